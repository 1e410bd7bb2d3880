//! A tiny deterministic vision-language model with an exact hand-written
//! backward pass.
//!
//! Architecture: patch statistics plus a sinusoidal position code, linearly
//! projected to `embed_dim` (the visual embeddings); a prompt query built as
//! the mean of hashed token embeddings; one softmax cross-attention from the
//! query over the visual tokens; and a linear vocabulary head on
//! `context + query`. With `decode_step = t > 1` the argmax token is appended
//! to the prompt `t − 1` times before the scored step.
//!
//! Weights are drawn in a fixed order from a SplitMix64 stream seeded with
//! [`ToyModelConfig::seed`], each uniform in `[−0.1, 0.1]`:
//! projection (`embed_dim × 12`), query-key (`embed_dim × embed_dim`), value
//! (`embed_dim × embed_dim`), head (`vocab × embed_dim`), token table
//! (`vocab × embed_dim`). A uniform draw is `(next_u64 >> 11) · 2⁻⁵³`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, SaliencyGrid, TokenGrid};
use crate::imaging::RasterImage;
use crate::objective::{self, NextTokenSummary, ObjectiveConfig};
use crate::protocol::{
    self, AnswerRequest, AnswerResponse, GradientBackend, GroundRequest, GroundResponse, ViewGrounding,
};

const FEATURES: usize = 12;
const WEIGHT_RANGE: f64 = 0.1;
// Fixed gains lift the ±0.1 weights into a regime with non-trivial attention
// and next-token distributions.
const EMBED_GAIN: f64 = 10.0;
const TOKEN_GAIN: f64 = 10.0;
const ATTN_GAIN: f64 = 10.0;
const HEAD_GAIN: f64 = 10.0;

/// SplitMix64 generator.
#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn weights(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| -WEIGHT_RANGE + 2.0 * WEIGHT_RANGE * self.next_f64())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub embed_dim: usize,
    pub vocab: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
    /// Row-major token indices of the grid laid over the FULL image that may
    /// be attended to; `None` makes every token attendable. Crop views attend
    /// to a token only when its whole patch lies inside these cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_mask: Option<Vec<usize>>,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            embed_dim: 16,
            vocab: 64,
            grid_rows: 8,
            grid_cols: 8,
            seed: 0,
            attention_mask: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbeddings {
    pub grid: TokenGrid,
    /// Extent of the original image the view was cut from.
    pub image_rect: Rect,
    pub vectors: Vec<Vec<f64>>,
}

/// Gradient of the objective w.r.t. every visual embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub grid: TokenGrid,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub summary: NextTokenSummary,
    /// Attention weights of the scored step, one per visual token.
    pub attention: Vec<f64>,
    /// Tokens appended greedily before the scored step.
    pub generated: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ToyModelConfig,
    proj: Vec<f64>,
    qk: Vec<f64>,
    value: Vec<f64>,
    head: Vec<f64>,
    tokens: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, yr) in y.iter().enumerate().take(rows) {
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * yr;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-cased alphanumeric words hashed with FNV-1a into `[0, vocab)`.
pub fn tokenize(prompt: &str, vocab: usize) -> Vec<usize> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % vocab as u64) as usize
        })
        .collect()
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        if config.embed_dim < 2 || config.vocab < 2 {
            return Err(Error::invalid("toy model needs embed_dim >= 2 and vocab >= 2"));
        }
        if config.grid_rows == 0 || config.grid_cols == 0 {
            return Err(Error::invalid("toy model grid must be non-empty"));
        }
        let n = config.grid_rows * config.grid_cols;
        if let Some(mask) = &config.attention_mask {
            if let Some(bad) = mask.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!("attention mask index {bad} outside grid")));
            }
        }
        let d = config.embed_dim;
        let mut rng = SplitMix64::new(config.seed);
        let proj = rng.weights(d * FEATURES);
        let qk = rng.weights(d * d);
        let value = rng.weights(d * d);
        let head = rng.weights(config.vocab * d);
        let tokens = rng.weights(config.vocab * d);
        Ok(ToyModel {
            config,
            proj,
            qk,
            value,
            head,
            tokens,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Zeroes the vocabulary head, making every distribution uniform.
    pub fn with_zero_head(mut self) -> Self {
        self.head.iter_mut().for_each(|w| *w = 0.0);
        self
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        tokenize(prompt, self.config.vocab)
    }

    /// Per-patch features: mean R, G, B and gray standard deviation (all
    /// scaled by 1/255), then sin/cos position codes at two frequencies for
    /// the row and the column.
    pub fn patch_features(&self, image: &RasterImage) -> Result<Vec<[f64; FEATURES]>> {
        let (rows, cols) = (self.config.grid_rows, self.config.grid_cols);
        if (image.width as usize) < cols || (image.height as usize) < rows {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than the {rows}x{cols} token grid",
                image.width, image.height
            )));
        }
        let (w, h) = (image.width as usize, image.height as usize);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
            for c in 0..cols {
                let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
                let mut sum = [0.0f64; 3];
                let (mut g_sum, mut g_sq) = (0.0f64, 0.0f64);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.rgb(x as u32, y as u32);
                        let g = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                        for k in 0..3 {
                            sum[k] += p[k] as f64;
                        }
                        g_sum += g;
                        g_sq += g * g;
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let g_mean = g_sum / n;
                let g_std = (g_sq / n - g_mean * g_mean).max(0.0).sqrt();
                let pr = std::f64::consts::PI * (r as f64 + 0.5) / rows as f64;
                let pc = std::f64::consts::PI * (c as f64 + 0.5) / cols as f64;
                out.push([
                    sum[0] / n / 255.0,
                    sum[1] / n / 255.0,
                    sum[2] / n / 255.0,
                    g_std / 255.0,
                    pr.sin(),
                    pr.cos(),
                    (2.0 * pr).sin(),
                    (2.0 * pr).cos(),
                    pc.sin(),
                    pc.cos(),
                    (2.0 * pc).sin(),
                    (2.0 * pc).cos(),
                ]);
            }
        }
        Ok(out)
    }

    /// Embeds the pixels of one view. `view_rect` locates `image` inside the
    /// original image whose extent is `image_rect`.
    pub fn embed_view(&self, image: &RasterImage, view_rect: Rect, image_rect: Rect) -> Result<VisualEmbeddings> {
        if (image.width, image.height) != (view_rect.w, view_rect.h) {
            return Err(Error::invalid(format!(
                "view pixels {}x{} do not match view rect {view_rect:?}",
                image.width, image.height
            )));
        }
        let grid = TokenGrid::new(self.config.grid_rows, self.config.grid_cols, view_rect)?;
        let d = self.config.embed_dim;
        let vectors = self
            .patch_features(image)?
            .iter()
            .map(|f| {
                matvec(&self.proj, d, FEATURES, f)
                    .into_iter()
                    .map(|v| EMBED_GAIN * v)
                    .collect()
            })
            .collect();
        Ok(VisualEmbeddings {
            grid,
            image_rect,
            vectors,
        })
    }

    /// Embeds a whole image as the global view.
    pub fn embed_image(&self, image: &RasterImage) -> Result<VisualEmbeddings> {
        self.embed_view(image, image.rect(), image.rect())
    }

    /// Which tokens of `grid` may be attended to under the configured mask.
    pub fn attendable(&self, grid: &TokenGrid, image_rect: Rect) -> Vec<bool> {
        let Some(mask) = &self.config.attention_mask else {
            return vec![true; grid.len()];
        };
        let (gr, gc) = (self.config.grid_rows, self.config.grid_cols);
        let mut allowed = vec![false; gr * gc];
        for &i in mask {
            allowed[i] = true;
        }
        let cw = image_rect.w as f64 / gc as f64;
        let ch = image_rect.h as f64 / gr as f64;
        const SLACK: f64 = 1e-9;
        (0..grid.len())
            .map(|i| {
                let (x0, y0, x1, y1) = grid.token_extent(i);
                let (x0, x1) = (x0 - image_rect.x as f64, x1 - image_rect.x as f64);
                let (y0, y1) = (y0 - image_rect.y as f64, y1 - image_rect.y as f64);
                let c_lo = (x0 / cw + SLACK).floor().max(0.0) as usize;
                let c_hi = ((x1 / cw - SLACK).ceil() as usize).clamp(c_lo + 1, gc);
                let r_lo = (y0 / ch + SLACK).floor().max(0.0) as usize;
                let r_hi = ((y1 / ch - SLACK).ceil() as usize).clamp(r_lo + 1, gr);
                (r_lo..r_hi).all(|r| (c_lo..c_hi).all(|c| allowed[r * gc + c]))
            })
            .collect()
    }

    fn query(&self, token_ids: &[usize]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut q = vec![0.0; d];
        for &t in token_ids {
            for (qk, w) in q.iter_mut().zip(&self.tokens[t * d..(t + 1) * d]) {
                *qk += w;
            }
        }
        let scale = TOKEN_GAIN / token_ids.len() as f64;
        q.iter_mut().for_each(|v| *v *= scale);
        q
    }

    /// `γ Aᵀq`, so that the attention score of token `i` is `r · v_i`.
    fn score_direction(&self, q: &[f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let gamma = ATTN_GAIN / (d as f64).sqrt();
        matvec_t(&self.qk, d, d, q).into_iter().map(|v| gamma * v).collect()
    }

    fn attention(&self, vectors: &[Vec<f64>], attendable: &[bool], r: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = vectors.iter().map(|v| dot(r, v)).collect();
        let max = scores
            .iter()
            .zip(attendable)
            .filter(|(_, a)| **a)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores
            .iter()
            .zip(attendable)
            .map(|(s, a)| if *a { (s - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        weights
    }

    fn step(&self, vectors: &[Vec<f64>], attendable: &[bool], q: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.config.embed_dim;
        let r = self.score_direction(q);
        let a = self.attention(vectors, attendable, &r);
        let mut vbar = vec![0.0; d];
        for (ai, v) in a.iter().zip(vectors) {
            if *ai != 0.0 {
                for (o, x) in vbar.iter_mut().zip(v) {
                    *o += ai * x;
                }
            }
        }
        let context = matvec(&self.value, d, d, &vbar);
        let hidden: Vec<f64> = context.iter().zip(q).map(|(c, q)| c + q).collect();
        let logits = matvec(&self.head, self.config.vocab, d, &hidden)
            .into_iter()
            .map(|z| HEAD_GAIN * z)
            .collect();
        (logits, a, r)
    }

    fn run(
        &self,
        vectors: &[Vec<f64>],
        attendable: &[bool],
        prompt_tokens: &[usize],
        decode_step: usize,
    ) -> Result<(Forward, Vec<f64>, Vec<f64>)> {
        if prompt_tokens.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        if decode_step == 0 {
            return Err(Error::invalid("decode_step must be >= 1"));
        }
        if let Some(t) = prompt_tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        let mut ids = prompt_tokens.to_vec();
        let mut generated = Vec::new();
        loop {
            let q = self.query(&ids);
            let (logits, attention, r) = self.step(vectors, attendable, &q);
            if generated.len() + 1 == decode_step {
                let summary = NextTokenSummary::from_logits(&logits, decode_step)?;
                let fwd = Forward {
                    logits,
                    summary,
                    attention,
                    generated,
                };
                return Ok((fwd, q, r));
            }
            let next = objective::argmax(&logits);
            generated.push(next);
            ids.push(next);
        }
    }

    pub fn forward(&self, emb: &VisualEmbeddings, prompt_tokens: &[usize], decode_step: usize) -> Result<Forward> {
        let attendable = self.attendable(&emb.grid, emb.image_rect);
        Ok(self.run(&emb.vectors, &attendable, prompt_tokens, decode_step)?.0)
    }

    /// Gradient of the objective w.r.t. every visual embedding, by reverse
    /// mode through head, value projection and attention softmax. The greedy
    /// prefix is piecewise constant in the embeddings and contributes nothing.
    pub fn gradient(
        &self,
        emb: &VisualEmbeddings,
        prompt_tokens: &[usize],
        objective: &ObjectiveConfig,
    ) -> Result<(f64, Forward, GradientField)> {
        objective.validate()?;
        let attendable = self.attendable(&emb.grid, emb.image_rect);
        let vectors = &emb.vectors;
        let (fwd, _q, r) = self.run(vectors, &attendable, prompt_tokens, objective.decode_step)?;
        let (value, seed) = objective::objective_seed(objective, &fwd.logits)?;

        let d = self.config.embed_dim;
        let g_hidden: Vec<f64> = matvec_t(&self.head, self.config.vocab, d, &seed)
            .into_iter()
            .map(|g| HEAD_GAIN * g)
            .collect();
        // hidden = context + q, and q does not depend on the embeddings.
        let g_vbar = matvec_t(&self.value, d, d, &g_hidden);
        let a = &fwd.attention;
        let h: Vec<f64> = vectors.iter().map(|v| dot(&g_vbar, v)).collect();
        let h_mean: f64 = a.iter().zip(&h).map(|(ai, hi)| ai * hi).sum();
        let grads = vectors
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if a[i] == 0.0 {
                    return vec![0.0; d];
                }
                let g_score = a[i] * (h[i] - h_mean);
                (0..d).map(|k| a[i] * g_vbar[k] + g_score * r[k]).collect()
            })
            .collect();
        Ok((
            value,
            fwd,
            GradientField {
                grid: emb.grid,
                vectors: grads,
            },
        ))
    }

    /// Per-token ℓ2 norm of the objective gradient.
    pub fn saliency(
        &self,
        emb: &VisualEmbeddings,
        prompt_tokens: &[usize],
        objective: &ObjectiveConfig,
    ) -> Result<(SaliencyGrid, NextTokenSummary)> {
        let (_, fwd, field) = self.gradient(emb, prompt_tokens, objective)?;
        let scores = field
            .vectors
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok((SaliencyGrid::new(field.grid, scores)?, fwd.summary))
    }

    /// Objective value as a plain function of the embeddings; the
    /// finite-difference side of gradient checks.
    pub fn objective_value(
        &self,
        emb: &VisualEmbeddings,
        prompt_tokens: &[usize],
        objective: &ObjectiveConfig,
    ) -> Result<f64> {
        let fwd = self.forward(emb, prompt_tokens, objective.decode_step)?;
        objective::objective_value(objective, &fwd.logits)
    }

    /// Greedy first answer token with all views attended jointly.
    pub fn answer(&self, views: &[VisualEmbeddings], prompt_tokens: &[usize]) -> Result<usize> {
        let mut vectors = Vec::new();
        let mut attendable = Vec::new();
        for emb in views {
            vectors.extend(emb.vectors.iter().cloned());
            attendable.extend(self.attendable(&emb.grid, emb.image_rect));
        }
        let (fwd, _, _) = self.run(&vectors, &attendable, prompt_tokens, 1)?;
        Ok(fwd.summary.argmax())
    }
}

/// The toy model behind the [`GradientBackend`] contract.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    model: ToyModel,
}

impl ToyBackend {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        Ok(ToyBackend {
            model: ToyModel::new(config)?,
        })
    }

    pub fn from_model(model: ToyModel) -> Self {
        ToyBackend { model }
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    fn embed_all(&self, views: &[protocol::ViewPayload]) -> Result<Vec<VisualEmbeddings>> {
        let global = views
            .first()
            .filter(|v| v.is_global)
            .ok_or_else(|| Error::invalid("first view must be the global view"))?;
        let image_rect = global.rect;
        views
            .iter()
            .map(|v| {
                let pixels = v.image.decode()?;
                self.model.embed_view(&pixels, v.rect, image_rect)
            })
            .collect()
    }
}

impl GradientBackend for ToyBackend {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse> {
        let tokens = self.model.tokenize(&request.prompt);
        let views = self
            .embed_all(&request.views)?
            .iter()
            .map(|emb| {
                let (map, summary) = self.model.saliency(emb, &tokens, &request.objective)?;
                Ok(ViewGrounding {
                    rows: map.grid.rows,
                    cols: map.grid.cols,
                    scores: map.scores,
                    entropy: summary.entropy,
                    max_prob: summary.max_prob,
                    vocab: summary.vocab(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundResponse { id: request.id, views })
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse> {
        let tokens = self.model.tokenize(&request.prompt);
        let embs = self.embed_all(&request.views)?;
        let id = self.model.answer(&embs, &tokens)?;
        Ok(AnswerResponse {
            id: request.id,
            text: format!("tok{id}"),
        })
    }

    fn ping(&self) -> Result<String> {
        let c = &self.model.config;
        Ok(format!(
            "toy(seed={}, dim={}, vocab={}, grid={}x{})",
            c.seed, c.embed_dim, c.vocab, c.grid_rows, c.grid_cols
        ))
    }
}
