//! Run configuration: defaults, then the TOML file, then the
//! `ENTROPY_GROUND_BACKEND` variable, then command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use entropy_ground_core::objective::ObjectiveKind;
use entropy_ground_core::pipeline::{Connectivity, PipelineConfig};
use entropy_ground_core::protocol::{GradientBackend, RemoteBackend};
use entropy_ground_core::refine::{RefineConfig, Stopping};
use entropy_ground_core::toy::{ToyBackend, ToyModelConfig};

pub const BACKEND_ENV: &str = "ENTROPY_GROUND_BACKEND";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `toy`, `tcp://host:port` or `cmd:<shell command>`.
    pub backend: String,
    /// Per-request deadline for remote backends.
    pub timeout_secs: u64,
    pub workers: usize,
    pub render: bool,
    pub toy: ToyModelConfig,
    pub pipeline: PipelineConfig,
    pub refine: RefineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: "toy".into(),
            timeout_secs: 120,
            workers: 1,
            render: false,
            toy: ToyModelConfig::default(),
            pipeline: PipelineConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

/// Flags shared by every subcommand. Unset flags leave the configuration
/// untouched.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `toy`, `tcp://host:port` or `cmd:<shell command>`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, value_parser = ["entropy", "top_p", "max_prob"])]
    pub objective: Option<String>,
    #[arg(long)]
    pub top_p_mass: Option<f64>,
    #[arg(long)]
    pub decode_step: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// `spatial`, `confidence` or `fixed:N`.
    #[arg(long)]
    pub stopping: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_parser = ["4", "8"])]
    pub connectivity: Option<String>,
    /// Write heatmap and overlay pixmaps.
    #[arg(long)]
    pub render: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Toy model seed (planted data seed for `plant`).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Layers the config file, the environment and the flags over the
    /// defaults. `env_backend` is the value of [`BACKEND_ENV`], if set.
    pub fn resolve(args: &CommonArgs, env_backend: Option<String>) -> anyhow::Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(b) = env_backend.filter(|b| !b.is_empty()) {
            cfg.backend = b;
        }
        cfg.apply(args)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, a: &CommonArgs) -> anyhow::Result<()> {
        if let Some(b) = &a.backend {
            self.backend = b.clone();
        }
        match a.objective.as_deref() {
            Some("entropy") => self.refine.objective.kind = ObjectiveKind::Entropy,
            Some("max_prob") => self.refine.objective.kind = ObjectiveKind::MaxProb,
            Some("top_p") => {
                if !matches!(self.refine.objective.kind, ObjectiveKind::TopPEntropy { .. }) {
                    self.refine.objective.kind = ObjectiveKind::top_p(0.9);
                }
            }
            Some(other) => bail!("unknown objective `{other}`"),
            None => {}
        }
        if let Some(m) = a.top_p_mass {
            match &mut self.refine.objective.kind {
                ObjectiveKind::TopPEntropy { mass, .. } => *mass = m,
                _ => bail!("--top-p-mass needs the top_p objective"),
            }
        }
        if let Some(t) = a.decode_step {
            self.refine.objective.decode_step = t;
        }
        if let Some(k) = a.top_k {
            self.refine.top_k = k;
            self.pipeline.top_k = k;
        }
        if let Some(s) = &a.stopping {
            self.refine.stopping = Stopping::parse(s)?;
        }
        if let Some(t) = a.max_iters {
            self.refine.max_iters = t;
        }
        if let Some(s) = a.sigma {
            self.pipeline.sigma = s;
        }
        if let Some(c) = &a.connectivity {
            self.pipeline.connectivity = Connectivity::try_from(c.parse::<u8>()?).map_err(anyhow::Error::msg)?;
        }
        if a.render {
            self.render = true;
        }
        if let Some(s) = a.seed {
            self.toy.seed = s;
        }
        if let Some(w) = a.workers {
            self.workers = w;
        }
        if let Some(t) = a.timeout_secs {
            self.timeout_secs = t;
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pipeline.validate()?;
        self.refine.validate()?;
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        if self.timeout_secs == 0 {
            bail!("timeout_secs must be >= 1");
        }
        if self.backend != "toy" && !self.backend.starts_with("tcp://") && !self.backend.starts_with("cmd:") {
            bail!("backend must be `toy`, `tcp://host:port` or `cmd:<command>`, got `{}`", self.backend);
        }
        Ok(())
    }

    pub fn is_toy(&self) -> bool {
        self.backend == "toy"
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// The configured backend, with `mask` overriding the toy attention mask.
    pub fn backend(&self, mask: Option<Vec<usize>>) -> anyhow::Result<Box<dyn GradientBackend>> {
        if self.is_toy() {
            let mut toy = self.toy.clone();
            if mask.is_some() {
                toy.attention_mask = mask;
            }
            Ok(Box::new(ToyBackend::new(toy)?))
        } else {
            Ok(Box::new(RemoteBackend::from_endpoint(&self.backend, self.timeout())?))
        }
    }

    /// Writes `effective_config.toml` into `out`.
    pub fn echo(&self, out: &Path) -> anyhow::Result<()> {
        std::fs::write(out.join("effective_config.toml"), self.to_toml())?;
        Ok(())
    }
}
