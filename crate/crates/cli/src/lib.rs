//! The `entropy-ground` command line.
//!
//! Exit codes: 0 on success, 2 for input errors (unreadable files, bad
//! flags, malformed manifests), 3 when the backend fails or misbehaves.

pub mod config;

use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use entropy_ground_core::eval::{self, AblationAxis, Manifest, ManifestRecord, PlantedConfig};
use entropy_ground_core::geometry::{Rect, RegionProposal, View, ViewId, ViewSet};
use entropy_ground_core::imaging::{self, RasterImage};
use entropy_ground_core::pipeline;
use entropy_ground_core::protocol::{self, GradientBackend, RemoteBackend};
use entropy_ground_core::refine::{self, Decision, RefineError};
use entropy_ground_core::toy::ToyBackend;
use entropy_ground_core::Error;

pub use config::{CommonArgs, RunConfig, BACKEND_ENV};

#[derive(Parser, Debug)]
#[command(name = "entropy-ground", version, about = "Entropy-gradient visual grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// One grounding pass over the whole image.
    Ground {
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Iterative zoom refinement followed by an answer.
    Refine {
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Localization IoU over a JSONL manifest.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// One evaluation per value of each ablation axis.
    Ablate {
        manifest: PathBuf,
        /// stopping, objective, top_k or decode_step; repeatable. All four
        /// when omitted.
        #[arg(long)]
        axis: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Writes a planted-evidence benchmark (images and manifest).
    Plant {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: u32,
        /// Evidence block side in tokens.
        #[arg(long, default_value_t = 2)]
        block_tokens: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Serves the toy model over the wire protocol on stdio or a socket.
    ServeToy {
        /// Address to listen on instead of stdio, e.g. 127.0.0.1:7000.
        #[arg(long)]
        listen: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_backend_failure() { 3 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<RefineError>() {
            return if e.error.is_backend_failure() { 3 } else { 2 };
        }
    }
    2
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let env = std::env::var(BACKEND_ENV).ok();
    match cli.command {
        Command::Ground { image, prompt, common } => {
            let cfg = prepare(&common, env)?;
            cmd_ground(&image, &prompt, &cfg, &common.out)
        }
        Command::Refine { image, prompt, common } => {
            let cfg = prepare(&common, env)?;
            cmd_refine(&image, &prompt, &cfg, &common.out)
        }
        Command::Eval { manifest, common } => {
            let cfg = prepare(&common, env)?;
            cmd_eval(&manifest, &cfg, &common.out)
        }
        Command::Ablate { manifest, axis, common } => {
            let axes = if axis.is_empty() {
                AblationAxis::ALL.to_vec()
            } else {
                axis.iter().map(|a| AblationAxis::parse(a)).collect::<Result<_, _>>()?
            };
            let cfg = prepare(&common, env)?;
            cmd_ablate(&manifest, &axes, &cfg, &common.out)
        }
        Command::Plant {
            samples,
            size,
            block_tokens,
            common,
        } => {
            let cfg = RunConfig::resolve(&common, env)?;
            let planted = PlantedConfig {
                n_samples: samples,
                width: size,
                height: size,
                grid_rows: cfg.toy.grid_rows,
                grid_cols: cfg.toy.grid_cols,
                block_tokens,
                seed: common.seed.unwrap_or(0),
            };
            let manifest = eval::generate_planted(&planted, &common.out)?;
            println!(
                "{} samples written to {}",
                manifest.records.len(),
                common.out.join("manifest.jsonl").display()
            );
            Ok(())
        }
        Command::ServeToy { listen, common } => {
            let cfg = RunConfig::resolve(&common, env)?;
            let backend = ToyBackend::new(cfg.toy)?;
            match listen {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    println!("listening on {}", listener.local_addr()?);
                    std::io::stdout().flush()?;
                    protocol::serve_tcp(&backend, listener)?;
                }
                None => protocol::serve(&backend, std::io::stdin().lock(), std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn prepare(common: &CommonArgs, env: Option<String>) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::resolve(common, env)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    cfg.echo(&common.out)?;
    Ok(cfg)
}

fn load_image(path: &Path) -> anyhow::Result<RasterImage> {
    RasterImage::load(path).with_context(|| format!("cannot read image {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A region as written to disk.
#[derive(Clone, Debug, Serialize)]
pub struct RegionRecord {
    pub pixel_rect: Rect,
    pub score: f64,
    pub iteration: usize,
    pub source_view: ViewId,
    pub tokens: usize,
}

impl From<&RegionProposal> for RegionRecord {
    fn from(p: &RegionProposal) -> Self {
        RegionRecord {
            pixel_rect: p.pixel_rect,
            score: p.score,
            iteration: p.iteration,
            source_view: p.source_view,
            tokens: p.component.size(),
        }
    }
}

#[derive(Serialize)]
struct GroundRecord<'a> {
    prompt: &'a str,
    degenerate: bool,
    threshold: Option<f64>,
    entropy: f64,
    max_prob: f64,
    regions: Vec<RegionRecord>,
}

pub fn cmd_ground(image_path: &Path, prompt: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let image = load_image(image_path)?;
    let backend = cfg.backend(None)?;
    let views = ViewSet::global_only(image.width, image.height);
    let grounding = protocol::ground(
        backend.as_ref(),
        &views,
        &image,
        prompt,
        &cfg.refine.objective,
        cfg.refine.tap_layer,
    )?;
    let g = &grounding[0];
    let extraction = pipeline::extract(&g.saliency, &cfg.pipeline)?;
    let proposals = extraction.proposals(cfg.pipeline.top_k, ViewId(0), 0)?;
    let record = GroundRecord {
        prompt,
        degenerate: extraction.degenerate,
        threshold: extraction.threshold,
        entropy: g.stats.entropy,
        max_prob: g.stats.max_prob,
        regions: proposals.iter().map(RegionRecord::from).collect(),
    };
    write_json(&out.join("regions.json"), &record)?;
    if cfg.render {
        let rects: Vec<Rect> = proposals.iter().map(|p| p.pixel_rect).collect();
        imaging::render_heatmap(&g.saliency, None, &[]).save(out.join("heatmap_v0.ppm"))?;
        imaging::render_heatmap(&g.saliency, Some(&image), &rects).save(out.join("overlay_v0.ppm"))?;
    }
    if extraction.degenerate {
        println!("degenerate saliency map: no regions");
    }
    for p in &proposals {
        let r = p.pixel_rect;
        println!("region x={} y={} w={} h={} score={:.6e}", r.x, r.y, r.w, r.h, p.score);
    }
    Ok(())
}

#[derive(Serialize)]
struct RefineRecord<'a> {
    prompt: &'a str,
    answer: String,
    decision: Decision,
    iterations: usize,
    views: &'a [View],
    regions: Vec<RegionRecord>,
}

pub fn cmd_refine(image_path: &Path, prompt: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let image = load_image(image_path)?;
    let backend = cfg.backend(None)?;
    let outcome = match refine::refine(&image, prompt, backend.as_ref(), &cfg.pipeline, &cfg.refine) {
        Ok(o) => o,
        Err(e) => {
            write_json(&out.join("trace.json"), &e.trace)?;
            return Err(e.into());
        }
    };
    write_json(&out.join("trace.json"), &outcome.trace)?;
    let answer = refine::answer_with_views(backend.as_ref(), &outcome.views, &image, prompt)?;
    let record = RefineRecord {
        prompt,
        answer: answer.clone(),
        decision: outcome.decision,
        iterations: outcome.trace.iterations.len(),
        views: outcome.views.views(),
        regions: outcome.proposals.iter().map(RegionRecord::from).collect(),
    };
    write_json(&out.join("result.json"), &record)?;
    if cfg.render {
        for it in &outcome.trace.iterations {
            let rects: Vec<Rect> = it.selected.iter().map(|p| p.pixel_rect).collect();
            for v in &it.views {
                let stem = format!("iter{}_{}", it.iteration, v.view.id);
                let base = imaging::crop(&image, &v.view.pixel_rect)?;
                imaging::render_heatmap(&v.saliency, None, &[]).save(out.join(format!("{stem}_heatmap.ppm")))?;
                imaging::render_heatmap(&v.saliency, Some(&base), &rects).save(out.join(format!("{stem}_overlay.ppm")))?;
            }
        }
    }
    println!("answer: {answer}");
    println!("stopped after {} iterations ({:?})", record.iterations, outcome.decision);
    for r in &record.regions {
        let p = r.pixel_rect;
        println!("region x={} y={} w={} h={} score={:.6e}", p.x, p.y, p.w, p.h, r.score);
    }
    Ok(())
}

/// Toy backends take each sample's attention mask; remote backends share
/// one connection.
fn make_factory(cfg: &RunConfig) -> anyhow::Result<Box<eval::BackendFactory<'_>>> {
    if cfg.is_toy() {
        Ok(Box::new(move |r: &ManifestRecord| {
            let mut toy = cfg.toy.clone();
            if r.toy_attention_mask.is_some() {
                toy.attention_mask = r.toy_attention_mask.clone();
            }
            Ok(Box::new(ToyBackend::new(toy)?) as Box<dyn GradientBackend>)
        }))
    } else {
        let shared = Arc::new(RemoteBackend::from_endpoint(&cfg.backend, cfg.timeout())?);
        Ok(Box::new(move |_: &ManifestRecord| Ok(Box::new(shared.clone()) as Box<dyn GradientBackend>)))
    }
}

fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn cmd_eval(manifest_path: &Path, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let factory = make_factory(cfg)?;
    let label = cfg.refine.stopping.label();
    let (report, timings) = eval::eval_localization(&manifest, &*factory, &cfg.pipeline, &cfg.refine, cfg.workers, &label)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.table())?;
    write_json(&out.join("timings.json"), &timings)?;
    if report.skipped > 0 {
        eprintln!("warning: {} samples without gt_boxes skipped", report.skipped);
    }
    print!("{}", report.table());
    Ok(())
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct DiffAudit<'a> {
    axis: &'static str,
    declared_paths: &'static [&'static str],
    confined: bool,
    settings: Vec<(&'a str, &'a [String])>,
}

pub fn cmd_ablate(manifest_path: &Path, axes: &[AblationAxis], cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let factory = make_factory(cfg)?;
    let mut summary = String::new();
    for &axis in axes {
        let (result, timings) = eval::run_ablation(axis, &manifest, &*factory, &cfg.pipeline, &cfg.refine, cfg.workers)?;
        let dir = out.join(axis.name());
        fs::create_dir_all(&dir)?;
        for entry in &result.entries {
            write_json(&dir.join(format!("report_{}.json", file_stem(&entry.setting.label))), &entry.report)?;
        }
        let audit = DiffAudit {
            axis: axis.name(),
            declared_paths: axis.paths(),
            confined: result.diff_confined,
            settings: result
                .entries
                .iter()
                .map(|e| (e.setting.label.as_str(), e.diff.as_slice()))
                .collect(),
        };
        write_json(&dir.join("config_diff.json"), &audit)?;
        write_json(&dir.join("timings.json"), &timings)?;
        let table = result.comparison_table();
        fs::write(dir.join("comparison.txt"), &table)?;
        summary.push_str(&table);
        summary.push('\n');
        if !result.diff_confined {
            anyhow::bail!("ablation `{}` changed settings outside its axis", axis.name());
        }
    }
    fs::write(out.join("ablation_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
