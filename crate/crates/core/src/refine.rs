//! Iterative zoom: ground every view, pool components across views, keep the
//! top K, and crop into them until a stopping policy fires.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    rect_iou, BinaryMask, Component, Rect, RegionProposal, SaliencyGrid, View, ViewId, ViewSet,
};
use crate::imaging::RasterImage;
use crate::objective::ObjectiveConfig;
use crate::pipeline::{self, Connectivity, PipelineConfig};
use crate::protocol::{self, DistributionStats, GradientBackend};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Stopping {
    /// Stop once the spatial entropy of the top view's mask stops decreasing.
    SpatialEntropy,
    /// Stop once the top view's max next-token probability decreases.
    ConfidenceDrop,
    /// Exactly `iterations` passes (capped by `max_iters`).
    Fixed { iterations: usize },
}

impl Stopping {
    /// `spatial`, `confidence` or `fixed:N`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial" | "spatial_entropy" => Ok(Stopping::SpatialEntropy),
            "confidence" | "confidence_drop" => Ok(Stopping::ConfidenceDrop),
            _ => {
                let n = s
                    .strip_prefix("fixed:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown stopping policy `{s}`")))?;
                Ok(Stopping::Fixed { iterations: n })
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Stopping::SpatialEntropy => "spatial".into(),
            Stopping::ConfidenceDrop => "confidence".into(),
            Stopping::Fixed { iterations } => format!("fixed:{iterations}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub top_k: usize,
    pub stopping: Stopping,
    pub min_crop_px: u32,
    pub dedupe_iou: f64,
    pub objective: ObjectiveConfig,
    /// Forwarded to the backend untouched.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_layer: Option<u32>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iters: 4,
            top_k: 2,
            stopping: Stopping::SpatialEntropy,
            min_crop_px: 28,
            dedupe_iou: 0.9,
            objective: ObjectiveConfig::default(),
            tap_layer: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        if !(self.dedupe_iou > 0.0 && self.dedupe_iou <= 1.0) {
            return Err(Error::invalid(format!("dedupe_iou {} outside (0, 1]", self.dedupe_iou)));
        }
        if let Stopping::Fixed { iterations: 0 } = self.stopping {
            return Err(Error::invalid("fixed stopping needs at least one iteration"));
        }
        self.objective.validate()
    }
}

/// Entropy of the component-size distribution of `mask`; `+∞` for an empty
/// mask.
pub fn spatial_entropy(mask: &BinaryMask, connectivity: Connectivity) -> f64 {
    let sizes: Vec<usize> = pipeline::connected_components(mask, connectivity)
        .iter()
        .map(Component::size)
        .collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return f64::INFINITY;
    }
    -sizes
        .iter()
        .map(|&n| {
            let p = n as f64 / total as f64;
            p * p.ln()
        })
        .sum::<f64>()
}

/// The spatial-entropy break rule: stop on the first `H_t >= H_prev`, with
/// `H_prev` starting at `+∞`.
#[derive(Clone, Debug)]
pub struct SpatialEntropyStop {
    h_prev: f64,
}

impl Default for SpatialEntropyStop {
    fn default() -> Self {
        SpatialEntropyStop { h_prev: f64::INFINITY }
    }
}

impl SpatialEntropyStop {
    /// True when the loop must stop.
    pub fn observe(&mut self, h: f64) -> bool {
        if h >= self.h_prev {
            return true;
        }
        self.h_prev = h;
        false
    }
}

/// Stop iff the confidence strictly decreased.
pub fn confidence_stop(prev_conf: f64, cur_conf: f64) -> bool {
    cur_conf < prev_conf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    SpatialEntropyRose,
    ConfidenceDropped,
    BudgetReached,
    DegenerateMaps,
    EmptyPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view: View,
    pub saliency: SaliencyGrid,
    pub stats: DistributionStats,
    pub threshold: Option<f64>,
    pub mask: Option<BinaryMask>,
    /// All weighted components of this view, ranked.
    pub components: Vec<Component>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub views: Vec<ViewRecord>,
    /// Pooled top-K across views.
    pub selected: Vec<RegionProposal>,
    /// View holding the top pooled component.
    pub top_view: Option<ViewId>,
    /// Spatial entropy of the top view's mask; `None` stands for `+∞`.
    pub spatial_entropy: Option<f64>,
    /// Max next-token probability reported for the top view.
    pub confidence: Option<f64>,
    pub decision: Decision,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub views: ViewSet,
    /// Proposals of the iteration that produced `views` (for the global-only
    /// set, those of the last iteration).
    pub proposals: Vec<RegionProposal>,
    pub trace: RefinementTrace,
    pub decision: Decision,
}

/// A failure inside the loop, with everything recorded before it.
#[derive(Debug)]
pub struct RefineError {
    pub error: Error,
    pub trace: RefinementTrace,
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.iterations.len())
    }
}

impl std::error::Error for RefineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RefineError {
    fn from(error: Error) -> Self {
        RefineError {
            error,
            trace: RefinementTrace::default(),
        }
    }
}

/// Grows `rect` symmetrically to at least `min_px` per side, staying inside
/// `within`; sides longer than `within` are capped at its size.
pub fn expand_rect(rect: &Rect, min_px: u32, within: &Rect) -> Rect {
    fn axis(start: u32, len: u32, min_px: u32, lo: u32, span: u32) -> (u32, u32) {
        let target = len.max(min_px).min(span);
        if target <= len {
            return (start, len);
        }
        let grown = start.saturating_sub((target - len) / 2).max(lo);
        (grown.min(lo + span - target), target)
    }
    let (x, w) = axis(rect.x, rect.w, min_px, within.x, within.w);
    let (y, h) = axis(rect.y, rect.h, min_px, within.y, within.h);
    Rect::new(x, y, w, h)
}

/// Next view set: the global view, then one crop per selected proposal in
/// score order, skipping near-duplicates of views already chosen.
pub fn next_views(
    current: &ViewSet,
    selected: &[RegionProposal],
    config: &RefineConfig,
    next_id: &mut u32,
) -> Result<ViewSet> {
    let mut views = vec![current.global().clone()];
    for p in selected {
        let source = current
            .get(p.source_view)
            .ok_or_else(|| Error::invalid(format!("proposal from unknown view {}", p.source_view)))?;
        let rect = expand_rect(&p.pixel_rect, config.min_crop_px, &source.pixel_rect);
        if views.iter().any(|v| rect_iou(&v.pixel_rect, &rect) >= config.dedupe_iou) {
            continue;
        }
        views.push(View {
            id: ViewId(*next_id),
            pixel_rect: rect,
            parent: Some(source.id),
            is_global: false,
            depth: source.depth + 1,
        });
        *next_id += 1;
    }
    ViewSet::new(views)
}

/// Runs the refinement loop on `image` from its global view.
pub fn refine(
    image: &RasterImage,
    prompt: &str,
    backend: &dyn GradientBackend,
    pipeline_config: &PipelineConfig,
    config: &RefineConfig,
) -> std::result::Result<RefineOutcome, RefineError> {
    pipeline_config.validate()?;
    config.validate()?;
    let budget = match config.stopping {
        Stopping::Fixed { iterations } => iterations.min(config.max_iters),
        _ => config.max_iters,
    };
    let mut views = ViewSet::global_only(image.width, image.height);
    let mut next_id = 1u32;
    let mut trace = RefinementTrace::default();
    let mut spatial = SpatialEntropyStop::default();
    let mut prev_conf: Option<f64> = None;
    // Proposals that produced the current `views`.
    let mut producing: Option<Vec<RegionProposal>> = None;

    for t in 0..budget {
        let step = iterate(image, prompt, backend, pipeline_config, config, &views, t);
        let (records, selected) = match step {
            Ok(r) => r,
            Err(error) => return Err(RefineError { error, trace }),
        };
        let mut record = IterationRecord {
            iteration: t,
            views: records,
            selected: selected.clone(),
            top_view: selected.first().map(|p| p.source_view),
            spatial_entropy: None,
            confidence: None,
            decision: Decision::Continue,
        };
        let finish = |record: IterationRecord, mut trace: RefinementTrace, views: ViewSet, producing: Option<Vec<RegionProposal>>| {
            let decision = record.decision;
            let proposals = producing.unwrap_or_else(|| record.selected.clone());
            trace.iterations.push(record);
            Ok(RefineOutcome {
                views,
                proposals,
                trace,
                decision,
            })
        };

        if record.views.iter().all(|v| v.degenerate) {
            record.decision = Decision::DegenerateMaps;
            return finish(record, trace, views, producing);
        }
        let Some(top) = selected.first() else {
            record.decision = Decision::EmptyPool;
            return finish(record, trace, views, producing);
        };
        let top_record = record
            .views
            .iter()
            .find(|v| v.view.id == top.source_view)
            .expect("top proposal comes from a grounded view");
        let h = top_record
            .mask
            .as_ref()
            .map_or(f64::INFINITY, |m| spatial_entropy(m, pipeline_config.connectivity));
        let conf = top_record.stats.max_prob;
        record.spatial_entropy = h.is_finite().then_some(h);
        record.confidence = Some(conf);
        log::debug!("iteration {t}: H = {h}, confidence = {conf}, views = {}", views.len());

        let stop = match config.stopping {
            Stopping::SpatialEntropy => spatial.observe(h).then_some(Decision::SpatialEntropyRose),
            Stopping::ConfidenceDrop => {
                let dropped = prev_conf.is_some_and(|p| confidence_stop(p, conf));
                prev_conf = Some(conf);
                dropped.then_some(Decision::ConfidenceDropped)
            }
            Stopping::Fixed { .. } => None,
        };
        if let Some(decision) = stop {
            record.decision = decision;
            return finish(record, trace, views, producing);
        }

        let expanded = match next_views(&views, &selected, config, &mut next_id) {
            Ok(v) => v,
            Err(error) => return Err(RefineError { error, trace }),
        };
        if t + 1 == budget {
            record.decision = Decision::BudgetReached;
            return finish(record, trace, expanded, Some(selected));
        }
        trace.iterations.push(record);
        views = expanded;
        producing = Some(selected);
    }
    unreachable!("budget is at least one iteration")
}

type IterationResult = (Vec<ViewRecord>, Vec<RegionProposal>);

fn iterate(
    image: &RasterImage,
    prompt: &str,
    backend: &dyn GradientBackend,
    pipeline_config: &PipelineConfig,
    config: &RefineConfig,
    views: &ViewSet,
    t: usize,
) -> Result<IterationResult> {
    let groundings = protocol::ground(backend, views, image, prompt, &config.objective, config.tap_layer)?;
    let mut records = Vec::with_capacity(groundings.len());
    let mut pool: Vec<(usize, &Component)> = Vec::new();
    let mut extractions = Vec::with_capacity(groundings.len());
    for (view, g) in views.views().iter().zip(groundings) {
        let e = pipeline::extract(&g.saliency, pipeline_config)?;
        extractions.push(e);
        records.push(ViewRecord {
            view: view.clone(),
            saliency: g.saliency,
            stats: g.stats,
            threshold: None,
            mask: None,
            components: Vec::new(),
            degenerate: false,
        });
    }
    for (k, e) in extractions.iter().enumerate() {
        pool.extend(e.ranked.iter().map(|c| (k, c)));
    }
    // Stable sort: equal components keep view order.
    pool.sort_by(|a, b| pipeline::rank_order(a.1, b.1));
    let selected = pool
        .iter()
        .take(config.top_k)
        .map(|&(k, c)| pipeline::to_proposal(c, &extractions[k].smoothed, records[k].view.id, t))
        .collect::<Result<Vec<_>>>()?;
    for (record, e) in records.iter_mut().zip(extractions) {
        record.threshold = e.threshold;
        record.mask = e.mask;
        record.components = e.ranked;
        record.degenerate = e.degenerate;
    }
    Ok((records, selected))
}

/// Final answer over the global view followed by the crops in score order.
pub fn answer_with_views(
    backend: &dyn GradientBackend,
    views: &ViewSet,
    image: &RasterImage,
    prompt: &str,
) -> Result<String> {
    protocol::answer(backend, views, image, prompt)
}
