//! Token grids, saliency maps, masks, components and views, plus the mapping
//! between token coordinates and pixel coordinates of the original image.
//!
//! Pixel rectangles are half-open: a [`Rect`] covers `[x, x + w) × [y, y + h)`.
//! Token indices are row-major everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned half-open pixel rectangle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    /// Rectangle anchored at the origin, e.g. the full extent of an image.
    pub const fn of_size(w: u32, h: u32) -> Self {
        Rect { x: 0, y: 0, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    /// True when `other` lies entirely inside `self`. Empty rectangles are
    /// contained wherever their anchor is.
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if (x0 as u64) < x1 && (y0 as u64) < y1 {
            Some(Rect::new(x0, y0, (x1 - x0 as u64) as u32, (y1 - y0 as u64) as u32))
        } else {
            None
        }
    }

    /// Re-expresses an absolute rectangle relative to the top-left corner of
    /// `origin`. Fails when `self` is not inside `origin`.
    pub fn relative_to(&self, origin: &Rect) -> Result<Rect> {
        if !origin.contains(self) {
            return Err(Error::invalid(format!(
                "rect {self:?} is not inside {origin:?}"
            )));
        }
        Ok(Rect::new(self.x - origin.x, self.y - origin.y, self.w, self.h))
    }
}

/// Intersection over union of two pixel rectangles.
///
/// Zero-area inputs give 0, including two identical zero-area rectangles:
/// degenerate boxes never count as a match.
pub fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).map_or(0, |r| r.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Inclusive token-space bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl TokenBox {
    pub fn rows(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn cols(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

/// Visual-token lattice covering one view of the original image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    /// Nominal pixels per token edge. Pixel mapping always derives the exact
    /// per-token size from `view_rect` and the grid dims instead.
    pub patch_px: u32,
    /// Region of the ORIGINAL image this grid covers.
    pub view_rect: Rect,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, view_rect: Rect) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("token grid {rows}x{cols} is empty")));
        }
        if (view_rect.w as usize) < cols || (view_rect.h as usize) < rows {
            return Err(Error::invalid(format!(
                "view {}x{} px cannot hold a {rows}x{cols} token grid",
                view_rect.w, view_rect.h
            )));
        }
        let patch_px = ((view_rect.w as usize / cols).min(view_rect.h as usize / rows)).max(1) as u32;
        Ok(TokenGrid {
            rows,
            cols,
            patch_px,
            view_rect,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Pixel rectangle of a single token in original-image coordinates.
    pub fn token_rect(&self, index: usize) -> Rect {
        let (r, c) = self.coords(index);
        let bbox = TokenBox {
            row_min: r,
            col_min: c,
            row_max: r,
            col_max: c,
        };
        token_bbox_to_pixels(&bbox, self).expect("index inside grid")
    }

    /// Exact (fractional) extent of a token in original-image coordinates as
    /// `(x0, y0, x1, y1)`.
    pub fn token_extent(&self, index: usize) -> (f64, f64, f64, f64) {
        let (r, c) = self.coords(index);
        let tw = self.view_rect.w as f64 / self.cols as f64;
        let th = self.view_rect.h as f64 / self.rows as f64;
        let x0 = self.view_rect.x as f64;
        let y0 = self.view_rect.y as f64;
        (
            x0 + c as f64 * tw,
            y0 + r as f64 * th,
            x0 + (c + 1) as f64 * tw,
            y0 + (r + 1) as f64 * th,
        )
    }
}

/// Maps an inclusive token box to a pixel rectangle of the original image.
///
/// Token edges land at `floor(k * w / cols)` from the view origin on the
/// leading side and `ceil(k * w / cols)` on the trailing side, so the result
/// always covers every pixel the tokens touch, and is clamped to the view.
pub fn token_bbox_to_pixels(bbox: &TokenBox, grid: &TokenGrid) -> Result<Rect> {
    if bbox.row_min > bbox.row_max
        || bbox.col_min > bbox.col_max
        || bbox.row_max >= grid.rows
        || bbox.col_max >= grid.cols
    {
        return Err(Error::invalid(format!(
            "token box {bbox:?} outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let vr = grid.view_rect;
    let (w, h) = (vr.w as u64, vr.h as u64);
    let (cols, rows) = (grid.cols as u64, grid.rows as u64);
    let x0 = bbox.col_min as u64 * w / cols;
    let x1 = ((bbox.col_max as u64 + 1) * w).div_ceil(cols).min(w);
    let y0 = bbox.row_min as u64 * h / rows;
    let y1 = ((bbox.row_max as u64 + 1) * h).div_ceil(rows).min(h);
    Ok(Rect::new(
        vr.x + x0 as u32,
        vr.y + y0 as u32,
        (x1 - x0) as u32,
        (y1 - y0) as u32,
    ))
}

/// Per-token saliency scores over a [`TokenGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyGrid {
    pub grid: TokenGrid,
    pub scores: Vec<f64>,
    /// Set on maps produced by smoothing.
    #[serde(default)]
    pub smoothed: bool,
}

impl SaliencyGrid {
    pub fn new(grid: TokenGrid, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.len() {
            return Err(Error::invalid(format!(
                "{} scores for a {}x{} grid",
                scores.len(),
                grid.rows,
                grid.cols
            )));
        }
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || **s < 0.0)
        {
            return Err(Error::invalid(format!("score {i} is {s}; expected finite and >= 0")));
        }
        Ok(SaliencyGrid {
            grid,
            scores,
            smoothed: false,
        })
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub grid: TokenGrid,
    pub bits: Vec<bool>,
    pub threshold_used: f64,
}

impl BinaryMask {
    pub fn new(grid: TokenGrid, bits: Vec<bool>, threshold_used: f64) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::invalid(format!(
                "{} mask bits for a {}x{} grid",
                bits.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(BinaryMask {
            grid,
            bits,
            threshold_used,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[self.grid.index(row, col)]
    }
}

/// A connected set of mask-active tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Sorted ascending, non-empty.
    pub token_indices: Vec<usize>,
    /// Sum of the unsmoothed saliency over `token_indices`.
    pub weight: f64,
    pub token_bbox: TokenBox,
}

impl Component {
    /// Builds a component with weight 0 and the tight bounding box of
    /// `indices`. `indices` must be non-empty.
    pub fn from_indices(mut indices: Vec<usize>, grid: &TokenGrid) -> Self {
        assert!(!indices.is_empty(), "component without tokens");
        indices.sort_unstable();
        let mut bbox = TokenBox {
            row_min: usize::MAX,
            col_min: usize::MAX,
            row_max: 0,
            col_max: 0,
        };
        for &i in &indices {
            let (r, c) = grid.coords(i);
            bbox.row_min = bbox.row_min.min(r);
            bbox.col_min = bbox.col_min.min(c);
            bbox.row_max = bbox.row_max.max(r);
            bbox.col_max = bbox.col_max.max(c);
        }
        Component {
            token_indices: indices,
            weight: 0.0,
            token_bbox: bbox,
        }
    }

    pub fn size(&self) -> usize {
        self.token_indices.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewId(pub u32);

impl std::fmt::Display for ViewId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// A ranked region, mapped back to the original image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub component: Component,
    pub pixel_rect: Rect,
    pub score: f64,
    pub source_view: ViewId,
    pub iteration: usize,
}

/// A region of the original image fed to the model: either the global view
/// or a crop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub id: ViewId,
    pub pixel_rect: Rect,
    pub parent: Option<ViewId>,
    pub is_global: bool,
    pub depth: usize,
}

impl View {
    pub fn global(width: u32, height: u32) -> Self {
        View {
            id: ViewId(0),
            pixel_rect: Rect::of_size(width, height),
            parent: None,
            is_global: true,
            depth: 0,
        }
    }
}

/// Maps a rectangle given relative to `parent`'s top-left corner to
/// original-image coordinates.
pub fn compose_rect(child: &Rect, parent: &View) -> Result<Rect> {
    let p = parent.pixel_rect;
    if child.right() > p.w as u64 || child.bottom() > p.h as u64 {
        return Err(Error::invalid(format!(
            "child {child:?} escapes parent extent {}x{}",
            p.w, p.h
        )));
    }
    Ok(Rect::new(p.x + child.x, p.y + child.y, child.w, child.h))
}

/// Ordered views: the global view first, then crops by descending score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    views: Vec<View>,
}

impl ViewSet {
    pub fn new(views: Vec<View>) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(Error::invalid("view set is empty"));
        };
        if !first.is_global || first.depth != 0 || first.pixel_rect.x != 0 || first.pixel_rect.y != 0
        {
            return Err(Error::invalid("first view must be the global view at depth 0"));
        }
        if views.iter().filter(|v| v.is_global).count() != 1 {
            return Err(Error::invalid("view set needs exactly one global view"));
        }
        let image = first.pixel_rect;
        for v in &views[1..] {
            if !image.contains(&v.pixel_rect) || v.pixel_rect.is_empty() {
                return Err(Error::invalid(format!(
                    "view {} rect {:?} outside image",
                    v.id, v.pixel_rect
                )));
            }
        }
        Ok(ViewSet { views })
    }

    pub fn global_only(width: u32, height: u32) -> Self {
        ViewSet {
            views: vec![View::global(width, height)],
        }
    }

    pub fn global(&self) -> &View {
        &self.views[0]
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, id: ViewId) -> Option<&View> {
        self.views.iter().find(|v| v.id == id)
    }
}
