//! Localization evaluation, the planted-evidence benchmark and the ablation
//! runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rect_iou, token_bbox_to_pixels, Rect, RegionProposal, TokenBox, TokenGrid};
use crate::imaging::RasterImage;
use crate::objective::ObjectiveKind;
use crate::pipeline::PipelineConfig;
use crate::protocol::GradientBackend;
use crate::refine::{self, Decision, RefineConfig, Stopping};

pub const OPEN_TEMPLATE: &str = "Answer the question using a single word or phrase.";
pub const MULTIPLE_CHOICE_TEMPLATE: &str = "Answer with the option's letter from the given choices directly.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnswerType {
    Open,
    MultipleChoice { options: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: String,
    pub question: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<Rect>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answer: Option<String>,
    /// Attention mask for the toy backend on planted samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_attention_mask: Option<Vec<usize>>,
}

impl ManifestRecord {
    /// The question followed by the answer-format instruction.
    pub fn prompt(&self) -> String {
        match &self.answer_type {
            AnswerType::Open => format!("{}\n{OPEN_TEMPLATE}", self.question),
            AnswerType::MultipleChoice { options } => {
                let mut p = self.question.clone();
                for (i, o) in options.iter().enumerate() {
                    let letter = (b'A' + (i % 26) as u8) as char;
                    let _ = write!(p, "\n{letter}. {o}");
                }
                format!("{p}\n{MULTIPLE_CHOICE_TEMPLATE}")
            }
        }
    }
}

/// One sample per line, JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Parses JSONL; blank lines are ignored. Line numbers in errors are
    /// 1-based.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records: Vec<ManifestRecord> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: n + 1,
                message: e.to_string(),
            })?;
            if records.iter().any(|r| r.sample_id == record.sample_id) {
                return Err(Error::Manifest {
                    line: n + 1,
                    message: format!("duplicate sample_id `{}`", record.sample_id),
                });
            }
            records.push(record);
        }
        Ok(Manifest {
            base_dir: base_dir.into(),
            records,
        })
    }

    /// Reads a manifest file and checks that every image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let manifest = Self::parse(&text, base)?;
        for (k, r) in manifest.records.iter().enumerate() {
            let image = manifest.image_path(r);
            if !image.is_file() {
                return Err(Error::Manifest {
                    line: k + 1,
                    message: format!("image {} not found", image.display()),
                });
            }
        }
        Ok(manifest)
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.image)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    /// Max IoU over all final proposals and ground-truth boxes.
    pub best_iou: f64,
    /// IoU of the top proposal.
    pub top_iou: f64,
    pub proposals: Vec<Rect>,
    pub iterations: usize,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: Vec<SampleResult>,
    pub evaluated: usize,
    /// Samples without ground-truth boxes.
    pub skipped: usize,
    pub mean_iou: f64,
    pub mean_top_iou: f64,
    pub hit_rate_at_05: f64,
    pub mean_iterations: f64,
    /// Iteration count → number of samples.
    pub iteration_counts: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTiming {
    pub sample_id: String,
    pub seconds: f64,
}

/// Max IoU over every proposal and box pair; 0 when either side is empty.
pub fn best_iou(proposals: &[Rect], gt: &[Rect]) -> f64 {
    proposals
        .iter()
        .flat_map(|p| gt.iter().map(move |g| rect_iou(p, g)))
        .fold(0.0, f64::max)
}

impl EvalReport {
    pub fn from_samples(label: impl Into<String>, samples: Vec<SampleResult>, skipped: usize) -> Self {
        let n = samples.len();
        let mean = |f: &dyn Fn(&SampleResult) -> f64| {
            if n == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let mut iteration_counts = BTreeMap::new();
        for s in &samples {
            *iteration_counts.entry(s.iterations).or_insert(0) += 1;
        }
        EvalReport {
            label: label.into(),
            evaluated: n,
            skipped,
            mean_iou: mean(&|s| s.best_iou),
            mean_top_iou: mean(&|s| s.top_iou),
            hit_rate_at_05: mean(&|s| if s.best_iou >= 0.5 { 1.0 } else { 0.0 }),
            mean_iterations: mean(&|s| s.iterations as f64),
            iteration_counts,
            samples,
        }
    }

    /// Human-readable per-sample table.
    pub fn table(&self) -> String {
        let mut out = format!("# {}\n{:<24} {:>8} {:>8} {:>6} {:>5}\n", self.label, "sample", "best_iou", "top_iou", "iters", "props");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:<24} {:>8.4} {:>8.4} {:>6} {:>5}",
                s.sample_id,
                s.best_iou,
                s.top_iou,
                s.iterations,
                s.proposals.len()
            );
        }
        let _ = writeln!(
            out,
            "mean_iou {:.4}  hit@0.5 {:.4}  mean_iters {:.3}  evaluated {}  skipped {}",
            self.mean_iou, self.hit_rate_at_05, self.mean_iterations, self.evaluated, self.skipped
        );
        out
    }
}

/// Builds a backend for one manifest record.
pub type BackendFactory<'a> = dyn Fn(&ManifestRecord) -> Result<Box<dyn GradientBackend>> + Sync + 'a;

fn eval_sample(
    manifest: &Manifest,
    record: &ManifestRecord,
    gt: &[Rect],
    factory: &BackendFactory<'_>,
    pipeline: &PipelineConfig,
    config: &RefineConfig,
) -> Result<SampleResult> {
    let image = RasterImage::load(manifest.image_path(record))?;
    let backend = factory(record)?;
    let outcome = refine::refine(&image, &record.prompt(), backend.as_ref(), pipeline, config).map_err(|e| e.error)?;
    let rects: Vec<Rect> = outcome.proposals.iter().map(|p: &RegionProposal| p.pixel_rect).collect();
    Ok(SampleResult {
        sample_id: record.sample_id.clone(),
        best_iou: best_iou(&rects, gt),
        top_iou: best_iou(&rects[..rects.len().min(1)], gt),
        proposals: rects,
        iterations: outcome.trace.iterations.len(),
        decision: outcome.decision,
    })
}

/// Refines every sample with ground truth and scores its final proposals.
/// Samples run on up to `workers` threads; results keep manifest order.
pub fn eval_localization(
    manifest: &Manifest,
    factory: &BackendFactory<'_>,
    pipeline: &PipelineConfig,
    config: &RefineConfig,
    workers: usize,
    label: &str,
) -> Result<(EvalReport, Vec<SampleTiming>)> {
    let jobs: Vec<(&ManifestRecord, &[Rect])> = manifest
        .records
        .iter()
        .filter_map(|r| match &r.gt_boxes {
            Some(gt) if !gt.is_empty() => Some((r, gt.as_slice())),
            _ => None,
        })
        .collect();
    let skipped = manifest.records.len() - jobs.len();
    if skipped > 0 {
        log::warn!("{skipped} samples without gt_boxes skipped");
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<SampleResult>, f64)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(record, gt)) = jobs.get(k) else { break };
                let start = Instant::now();
                let r = eval_sample(manifest, record, gt, factory, pipeline, config);
                let secs = start.elapsed().as_secs_f64();
                results.lock().unwrap_or_else(|e| e.into_inner()).push((k, r, secs));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|(k, _, _)| *k);
    let mut samples = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for (k, r, secs) in results {
        let id = &jobs[k].0.sample_id;
        let sample = r.map_err(|e| match e {
            Error::Protocol { message, raw } => Error::Protocol {
                message: format!("sample {id}: {message}"),
                raw,
            },
            Error::BackendUnavailable(m) => Error::BackendUnavailable(format!("sample {id}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("sample {id}: {m}")),
            other => other,
        })?;
        timings.push(SampleTiming {
            sample_id: id.clone(),
            seconds: secs,
        });
        samples.push(sample);
    }
    Ok((EvalReport::from_samples(label, samples, skipped), timings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_samples: usize,
    pub width: u32,
    pub height: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Side of the square evidence block, in tokens.
    pub block_tokens: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_samples: 100,
            width: 64,
            height: 64,
            grid_rows: 8,
            grid_cols: 8,
            block_tokens: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSample {
    pub record: ManifestRecord,
    pub image: RasterImage,
    pub block: TokenBox,
}

pub const PLANTED_QUESTION: &str = "What is written in the marked region?";

/// Random noise images, each with a uniformly placed square block of tokens
/// that is the only thing the toy backend may attend to.
pub fn planted_samples(config: &PlantedConfig) -> Result<Vec<PlantedSample>> {
    let b = config.block_tokens;
    if b == 0 || b > config.grid_rows || b > config.grid_cols {
        return Err(Error::invalid(format!(
            "block of {b} tokens does not fit a {}x{} grid",
            config.grid_rows, config.grid_cols
        )));
    }
    let grid = TokenGrid::new(config.grid_rows, config.grid_cols, Rect::of_size(config.width, config.height))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_samples)
        .map(|k| {
            let mut data = vec![0u8; (config.width * config.height * 3) as usize];
            rng.fill(data.as_mut_slice());
            let image = RasterImage::new(config.width, config.height, 3, data)?;
            let row_min = rng.random_range(0..=config.grid_rows - b);
            let col_min = rng.random_range(0..=config.grid_cols - b);
            let block = TokenBox {
                row_min,
                col_min,
                row_max: row_min + b - 1,
                col_max: col_min + b - 1,
            };
            let mask = (row_min..row_min + b)
                .flat_map(|r| (col_min..col_min + b).map(move |c| r * config.grid_cols + c))
                .collect();
            let record = ManifestRecord {
                sample_id: format!("planted-{k:04}"),
                image: format!("planted-{k:04}.ppm"),
                question: PLANTED_QUESTION.into(),
                answer_type: AnswerType::Open,
                gt_boxes: Some(vec![token_bbox_to_pixels(&block, &grid)?]),
                gt_answer: None,
                toy_attention_mask: Some(mask),
            };
            Ok(PlantedSample { record, image, block })
        })
        .collect()
}

/// Writes the planted images and `manifest.jsonl` into `dir`.
pub fn generate_planted(config: &PlantedConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let samples = planted_samples(config)?;
    for s in &samples {
        s.image.save(dir.join(&s.record.image))?;
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records: samples.into_iter().map(|s| s.record).collect(),
    };
    std::fs::write(dir.join("manifest.jsonl"), manifest.to_jsonl())?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Stopping,
    Objective,
    TopK,
    DecodeStep,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Stopping,
        AblationAxis::Objective,
        AblationAxis::TopK,
        AblationAxis::DecodeStep,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stopping" | "stopping_policy" => Ok(AblationAxis::Stopping),
            "objective" => Ok(AblationAxis::Objective),
            "top_k" | "top-k" => Ok(AblationAxis::TopK),
            "decode_step" | "decode-step" => Ok(AblationAxis::DecodeStep),
            other => Err(Error::invalid(format!("unknown ablation axis `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Stopping => "stopping",
            AblationAxis::Objective => "objective",
            AblationAxis::TopK => "top_k",
            AblationAxis::DecodeStep => "decode_step",
        }
    }

    /// Config paths the axis is allowed to change.
    pub fn paths(&self) -> &'static [&'static str] {
        match self {
            AblationAxis::Stopping => &["refine.stopping"],
            AblationAxis::Objective => &[
                "refine.objective.kind",
                "refine.objective.mass",
                "refine.objective.renormalize",
            ],
            AblationAxis::TopK => &["refine.top_k"],
            AblationAxis::DecodeStep => &["refine.objective.decode_step"],
        }
    }

    /// One configuration per axis value, all else taken from `base`.
    pub fn settings(&self, pipeline: &PipelineConfig, base: &RefineConfig) -> Vec<AblationSetting> {
        let with = |label: String, f: &dyn Fn(&mut RefineConfig)| {
            let mut refine = base.clone();
            f(&mut refine);
            AblationSetting {
                label,
                pipeline: pipeline.clone(),
                refine,
            }
        };
        match self {
            AblationAxis::Stopping => [
                Stopping::SpatialEntropy,
                Stopping::ConfidenceDrop,
                Stopping::Fixed { iterations: 1 },
                Stopping::Fixed { iterations: 2 },
                Stopping::Fixed { iterations: 3 },
            ]
            .into_iter()
            .map(|s| with(s.label(), &|r| r.stopping = s))
            .collect(),
            AblationAxis::Objective => [ObjectiveKind::Entropy, ObjectiveKind::top_p(0.9), ObjectiveKind::MaxProb]
                .into_iter()
                .map(|k| with(k.label(), &|r| r.objective.kind = k))
                .collect(),
            AblationAxis::TopK => (1..=4)
                .map(|k| with(format!("top_k={k}"), &|r| r.top_k = k))
                .collect(),
            AblationAxis::DecodeStep => (1..=4)
                .map(|t| with(format!("decode_step={t}"), &|r| r.objective.decode_step = t))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: String,
    pub pipeline: PipelineConfig,
    pub refine: RefineConfig,
}

impl AblationSetting {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::json!({ "pipeline": self.pipeline, "refine": self.refine })
    }
}

/// Dotted paths of every leaf that differs between two JSON values.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: Option<&serde_json::Value>, b: Option<&serde_json::Value>, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Some(serde_json::Value::Object(x)), Some(serde_json::Value::Object(y))) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x.get(k), y.get(k), &p, out);
                }
            }
            (x, y) if x != y => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(Some(a), Some(b), "", &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub setting: AblationSetting,
    /// Paths that differ from the first setting of the axis.
    pub diff: Vec<String>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub entries: Vec<AblationEntry>,
    /// True when every diff stays within the axis's declared paths.
    pub diff_confined: bool,
}

impl AblationResult {
    pub fn comparison_table(&self) -> String {
        let mut out = format!(
            "# ablation: {}\n{:<20} {:>6} {:>9} {:>8} {:>10}\n",
            self.axis.name(),
            "setting",
            "n",
            "mean_iou",
            "hit@0.5",
            "mean_iters"
        );
        for e in &self.entries {
            let r = &e.report;
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>9.4} {:>8.4} {:>10.3}",
                e.setting.label, r.evaluated, r.mean_iou, r.hit_rate_at_05, r.mean_iterations
            );
        }
        let _ = writeln!(out, "config diff confined to axis: {}", self.diff_confined);
        out
    }
}

/// Evaluates the manifest once per value of `axis`.
pub fn run_ablation(
    axis: AblationAxis,
    manifest: &Manifest,
    factory: &BackendFactory<'_>,
    pipeline: &PipelineConfig,
    base: &RefineConfig,
    workers: usize,
) -> Result<(AblationResult, Vec<Vec<SampleTiming>>)> {
    let settings = axis.settings(pipeline, base);
    let reference = settings[0].to_value();
    let mut entries = Vec::with_capacity(settings.len());
    let mut timings = Vec::with_capacity(settings.len());
    for setting in settings {
        let diff = config_diff(&reference, &setting.to_value());
        let (report, t) = eval_localization(manifest, factory, &setting.pipeline, &setting.refine, workers, &setting.label)?;
        timings.push(t);
        entries.push(AblationEntry { setting, diff, report });
    }
    let diff_confined = entries
        .iter()
        .flat_map(|e| &e.diff)
        .all(|p| axis.paths().iter().any(|a| p == a || p.starts_with(&format!("{a}."))));
    Ok((
        AblationResult {
            axis,
            entries,
            diff_confined,
        },
        timings,
    ))
}
