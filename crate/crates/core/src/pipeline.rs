//! Saliency map to ranked regions: Gaussian smoothing, elbow thresholding,
//! connected components, weighting by the unsmoothed map, top-K selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{token_bbox_to_pixels, BinaryMask, Component, RegionProposal, SaliencyGrid, ViewId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Gaussian width in token units.
    pub sigma: f64,
    pub connectivity: Connectivity,
    pub top_k: usize,
    pub min_component_tokens: usize,
    /// Maps whose smoothed range is below this are degenerate.
    pub flat_epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sigma: 1.0,
            connectivity: Connectivity::Eight,
            top_k: 2,
            min_component_tokens: 1,
            flat_epsilon: 1e-9,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        if self.flat_epsilon.is_nan() || self.flat_epsilon < 0.0 {
            return Err(Error::invalid("flat_epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn convolve_line(line: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    (0..line.len() as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * line[reflect(i + k as i64 - r, line.len())])
                .sum()
        })
        .collect()
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_smooth(map: &SaliencyGrid, sigma: f64) -> Result<SaliencyGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let (rows, cols) = (map.grid.rows, map.grid.cols);
    let mut horizontal = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        horizontal.extend(convolve_line(&map.scores[r * cols..(r + 1) * cols], &kernel));
    }
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let column: Vec<f64> = (0..rows).map(|r| horizontal[r * cols + c]).collect();
        for (r, v) in convolve_line(&column, &kernel).into_iter().enumerate() {
            // Rounding can leave tiny negatives next to exact zeros.
            out[r * cols + c] = v.max(0.0);
        }
    }
    let mut smoothed = SaliencyGrid::new(map.grid, out)?;
    smoothed.smoothed = true;
    Ok(smoothed)
}

/// Elbow of the descending-sorted values: the value at the point farthest
/// from the chord joining the first and last points, ties going to the
/// smallest index. `None` when every value lies within `flat_epsilon` of
/// the others.
pub fn elbow_threshold(values: &[f64], flat_epsilon: f64) -> Result<Option<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("elbow threshold needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("elbow threshold needs finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (first, last) = (sorted[0], sorted[sorted.len() - 1]);
    if first - last < flat_epsilon {
        return Ok(None);
    }
    // Distance up to the constant chord length: |Δv·i − Δi·(v_i − v_0)|.
    let dv = last - first;
    let di = (sorted.len() - 1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in sorted.iter().enumerate() {
        let d = (dv * i as f64 - di * (v - first)).abs();
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok(Some(sorted[best.0]))
}

/// Bit `i` is set iff `map.scores[i] >= tau`.
pub fn binarize(map: &SaliencyGrid, tau: f64) -> Result<BinaryMask> {
    if tau.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    BinaryMask::new(map.grid, map.scores.iter().map(|s| *s >= tau).collect(), tau)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Maximal connected sets of active tokens (two-pass labeling with
/// union-find), ordered by `(row_min, col_min)` of their bounding boxes.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let (rows, cols) = (mask.grid.rows, mask.grid.cols);
    let mut parent: Vec<usize> = (0..rows * cols).collect();
    // Already-visited neighbours in raster order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !mask.bits[i] {
                continue;
            }
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= cols as isize {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if mask.bits[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; rows * cols];
    for i in 0..rows * cols {
        if !mask.bits[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    let mut components: Vec<Component> = groups
        .into_iter()
        .map(|g| Component::from_indices(g, &mask.grid))
        .collect();
    components.sort_by_key(|c| (c.token_bbox.row_min, c.token_bbox.col_min, c.token_indices[0]));
    components
}

/// Ranking order: weight descending, then size descending, then
/// `(row_min, col_min)`.
pub fn rank_order(a: &Component, b: &Component) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then(b.size().cmp(&a.size()))
        .then(a.token_bbox.row_min.cmp(&b.token_bbox.row_min))
        .then(a.token_bbox.col_min.cmp(&b.token_bbox.col_min))
}

/// Sets each weight to the sum of the ORIGINAL scores over the component and
/// ranks. Components below `min_tokens` or without any saliency are dropped;
/// the rest is not truncated.
pub fn weigh_and_rank(components: Vec<Component>, original: &SaliencyGrid, min_tokens: usize) -> Vec<Component> {
    let mut ranked: Vec<Component> = components
        .into_iter()
        .map(|mut c| {
            c.weight = c.token_indices.iter().map(|&i| original.scores[i]).sum();
            c
        })
        .filter(|c| c.size() >= min_tokens && c.weight > 0.0)
        .collect();
    ranked.sort_by(rank_order);
    ranked
}

pub fn score_and_rank(
    components: Vec<Component>,
    original: &SaliencyGrid,
    top_k: usize,
    min_tokens: usize,
) -> Vec<Component> {
    let mut ranked = weigh_and_rank(components, original, min_tokens);
    ranked.truncate(top_k);
    ranked
}

/// Everything produced on the way from one saliency map to its proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub smoothed: SaliencyGrid,
    /// `None` for a degenerate (flat) map.
    pub threshold: Option<f64>,
    pub mask: Option<BinaryMask>,
    /// Every surviving component, weighted and ranked, before top-K.
    pub ranked: Vec<Component>,
    pub degenerate: bool,
}

impl Extraction {
    /// The first `limit` ranked components as proposals in image pixels.
    pub fn proposals(&self, limit: usize, view: ViewId, iteration: usize) -> Result<Vec<RegionProposal>> {
        self.ranked
            .iter()
            .take(limit)
            .map(|c| to_proposal(c, &self.smoothed, view, iteration))
            .collect()
    }
}

pub fn to_proposal(c: &Component, map: &SaliencyGrid, view: ViewId, iteration: usize) -> Result<RegionProposal> {
    Ok(RegionProposal {
        component: c.clone(),
        pixel_rect: token_bbox_to_pixels(&c.token_bbox, &map.grid)?,
        score: c.weight,
        source_view: view,
        iteration,
    })
}

/// Runs the full chain on one map. A flat map yields no components and
/// `degenerate = true`.
pub fn extract(map: &SaliencyGrid, config: &PipelineConfig) -> Result<Extraction> {
    config.validate()?;
    let smoothed = gaussian_smooth(map, config.sigma)?;
    let threshold = if smoothed.scores.len() < 2 {
        None
    } else {
        elbow_threshold(&smoothed.scores, config.flat_epsilon)?
    };
    let Some(tau) = threshold else {
        return Ok(Extraction {
            smoothed,
            threshold: None,
            mask: None,
            ranked: Vec::new(),
            degenerate: true,
        });
    };
    let mask = binarize(&smoothed, tau)?;
    let ranked = weigh_and_rank(
        connected_components(&mask, config.connectivity),
        map,
        config.min_component_tokens,
    );
    Ok(Extraction {
        smoothed,
        threshold: Some(tau),
        mask: Some(mask),
        ranked,
        degenerate: false,
    })
}

/// Top-K proposals of a single map (attributed to the global view at
/// iteration 0) plus the degenerate flag.
pub fn extract_regions(map: &SaliencyGrid, config: &PipelineConfig) -> Result<(Vec<RegionProposal>, bool)> {
    let e = extract(map, config)?;
    Ok((e.proposals(config.top_k, ViewId(0), 0)?, e.degenerate))
}
