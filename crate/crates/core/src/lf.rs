//! Core 4D light field types and epipolar geometry.
//!
//! Conventions used throughout the crate:
//!
//! * a light field has `S x T` subviews indexed by `(s, t)`, each `U x V` pixels;
//! * pixel coordinates are `(u, v) = (row, column)` with the origin at the top left;
//! * `s` pairs with `u` and `t` pairs with `v` when projecting between views;
//! * disparity is measured in pixels per unit subview step, anchored to the middle view.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::Prompt;

/// Position of a subview in the `S x T` view grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewIndex {
    pub s: usize,
    pub t: usize,
}

impl ViewIndex {
    pub const fn new(s: usize, t: usize) -> Self {
        Self { s, t }
    }
}

impl std::fmt::Display for ViewIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.s, self.t)
    }
}

/// Light field extent `(S, T, U, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub views_s: usize,
    pub views_t: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(views_s: usize, views_t: usize, height: usize, width: usize) -> Self {
        Self { views_s, views_t, height, width }
    }

    pub fn num_views(&self) -> usize {
        self.views_s * self.views_t
    }

    pub fn pixels_per_view(&self) -> usize {
        self.height * self.width
    }

    /// Default reference view `(floor(S/2), floor(T/2))`.
    pub fn default_middle(&self) -> ViewIndex {
        ViewIndex::new(self.views_s / 2, self.views_t / 2)
    }

    pub fn contains_view(&self, view: ViewIndex) -> bool {
        view.s < self.views_s && view.t < self.views_t
    }

    /// Row-major linear index of a view.
    pub fn view_offset(&self, view: ViewIndex) -> usize {
        debug_assert!(self.contains_view(view));
        view.s * self.views_t + view.t
    }

    pub fn view_at(&self, offset: usize) -> ViewIndex {
        ViewIndex::new(offset / self.views_t, offset % self.views_t)
    }

    /// All views in row-major order.
    pub fn views(&self) -> impl Iterator<Item = ViewIndex> + '_ {
        (0..self.num_views()).map(|i| self.view_at(i))
    }
}

/// Dense row-major 2D buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Plane<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

impl<T> Plane<T> {
    /// Wraps `data`; returns `None` when its length is not `height * width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width).then_some(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for u in 0..height {
            for v in 0..width {
                data.push(f(u, v));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[u * self.width + v]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[u * self.width + v]
    }
}

/// Integer label map of one subview.
pub type LabelMap = Plane<u16>;

/// The 4D image `L[s, t, u, v, c]` with a designated reference subview.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    dims: Dims,
    middle: ViewIndex,
    views: Vec<RgbImage>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LightFieldError {
    #[error("light field needs at least one view on each axis, got {0}x{1}")]
    EmptyGrid(usize, usize),
    #[error("expected {expected} views, got {got}")]
    ViewCount { expected: usize, got: usize },
    #[error("view {view} is {got_height}x{got_width}, expected {height}x{width}")]
    ViewSize { view: ViewIndex, height: usize, width: usize, got_height: usize, got_width: usize },
    #[error("middle view {0} outside the view grid")]
    MiddleOutOfRange(ViewIndex),
}

impl LightField {
    /// Builds a light field from row-major views; `middle` defaults to `(S/2, T/2)`.
    pub fn new(
        views_s: usize,
        views_t: usize,
        views: Vec<RgbImage>,
        middle: Option<ViewIndex>,
    ) -> Result<Self, LightFieldError> {
        if views_s == 0 || views_t == 0 {
            return Err(LightFieldError::EmptyGrid(views_s, views_t));
        }
        if views.len() != views_s * views_t {
            return Err(LightFieldError::ViewCount { expected: views_s * views_t, got: views.len() });
        }
        let height = views[0].height() as usize;
        let width = views[0].width() as usize;
        let dims = Dims::new(views_s, views_t, height, width);
        for (i, img) in views.iter().enumerate() {
            if img.height() as usize != height || img.width() as usize != width {
                return Err(LightFieldError::ViewSize {
                    view: dims.view_at(i),
                    height,
                    width,
                    got_height: img.height() as usize,
                    got_width: img.width() as usize,
                });
            }
        }
        let middle = middle.unwrap_or_else(|| dims.default_middle());
        if !dims.contains_view(middle) {
            return Err(LightFieldError::MiddleOutOfRange(middle));
        }
        Ok(Self { dims, middle, views })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn middle(&self) -> ViewIndex {
        self.middle
    }

    pub fn view(&self, view: ViewIndex) -> &RgbImage {
        &self.views[self.dims.view_offset(view)]
    }

    pub fn views(&self) -> &[RgbImage] {
        &self.views
    }

    #[inline]
    pub fn pixel(&self, view: ViewIndex, u: usize, v: usize) -> [u8; 3] {
        self.view(view).get_pixel(v as u32, u as u32).0
    }
}

/// Per-pixel disparity anchored to one view, with the estimator's confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub values: Plane<f32>,
    pub coherence: Plane<f32>,
    pub view: ViewIndex,
}

impl DisparityMap {
    /// Constant disparity with full coherence, handy for fixtures.
    pub fn constant(height: usize, width: usize, value: f32, view: ViewIndex) -> Self {
        Self {
            values: Plane::filled(height, width, value),
            coherence: Plane::filled(height, width, 1.0),
            view,
        }
    }

    pub fn from_values(values: Plane<f32>, view: ViewIndex) -> Self {
        let coherence = Plane::filled(values.height(), values.width(), 1.0);
        Self { values, coherence, view }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        *self.values.get(u, v)
    }
}

/// Binary mask of one subview. `count` always equals the number of set bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl ViewMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width], count: 0 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width], count: height * width }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Option<Self> {
        if bits.len() != height * width {
            return None;
        }
        let count = bits.iter().filter(|&&b| b).count();
        Some(Self { height, width, bits, count })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::empty(height, width);
        for u in 0..height {
            for v in 0..width {
                if f(u, v) {
                    mask.set(u, v);
                }
            }
        }
        mask
    }

    /// Pixels whose label equals `label`.
    pub fn from_label(labels: &LabelMap, label: u16) -> Self {
        let bits: Vec<bool> = labels.as_slice().iter().map(|&l| l == label).collect();
        let count = bits.iter().filter(|&&b| b).count();
        Self { height: labels.height(), width: labels.width(), bits, count }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.width + v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize) {
        let bit = &mut self.bits[u * self.width + v];
        if !*bit {
            *bit = true;
            self.count += 1;
        }
    }

    #[inline]
    pub fn clear(&mut self, u: usize, v: usize) {
        let bit = &mut self.bits[u * self.width + v];
        if *bit {
            *bit = false;
            self.count -= 1;
        }
    }

    pub fn clear_all(&mut self) {
        self.bits.iter_mut().for_each(|b| *b = false);
        self.count = 0;
    }

    /// Set pixels in scan order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / width, i % width))
    }

    pub fn intersection_count(&self, other: &ViewMask) -> usize {
        debug_assert_eq!(self.bits.len(), other.bits.len());
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Intersection over union; `IoU(empty, empty)` is 0.
    pub fn iou(&self, other: &ViewMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count + other.count - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn is_subset_of(&self, other: &ViewMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Tight `(u_min, v_min, u_max, v_max)` bounds, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.iter_set();
        let (u0, v0) = it.next()?;
        let mut bb = (u0, v0, u0, v0);
        for (u, v) in it {
            bb.0 = bb.0.min(u);
            bb.1 = bb.1.min(v);
            bb.2 = bb.2.max(u);
            bb.3 = bb.3.max(v);
        }
        Some(bb)
    }
}

/// Pipeline stage that produced the mask of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Absent,
    Coarse,
    Occluded,
    Refined,
    Fallback,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Absent, Stage::Coarse, Stage::Occluded, Stage::Refined, Stage::Fallback];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Absent => "absent",
            Stage::Coarse => "coarse",
            Stage::Occluded => "occluded",
            Stage::Refined => "refined",
            Stage::Fallback => "fallback",
        }
    }
}

/// One segment across every subview, with per-view provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LightFieldMask {
    pub segment_id: u32,
    dims: Dims,
    per_view: Vec<ViewMask>,
    stage: Vec<Stage>,
    prompts: Vec<Option<Prompt>>,
}

impl LightFieldMask {
    /// All views absent.
    pub fn new(segment_id: u32, dims: Dims) -> Self {
        let n = dims.num_views();
        Self {
            segment_id,
            dims,
            per_view: vec![ViewMask::empty(dims.height, dims.width); n],
            stage: vec![Stage::Absent; n],
            prompts: vec![None; n],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Stores a view mask. An empty mask always records `Absent`, and `Absent`
    /// always stores an empty mask.
    pub fn set_view(&mut self, view: ViewIndex, mask: ViewMask, stage: Stage) {
        assert_eq!((mask.height(), mask.width()), (self.dims.height, self.dims.width), "mask dims");
        let i = self.dims.view_offset(view);
        if mask.is_empty() || stage == Stage::Absent {
            self.per_view[i] = ViewMask::empty(self.dims.height, self.dims.width);
            self.stage[i] = Stage::Absent;
        } else {
            self.per_view[i] = mask;
            self.stage[i] = stage;
        }
    }

    pub fn set_prompt(&mut self, view: ViewIndex, prompt: Option<Prompt>) {
        let i = self.dims.view_offset(view);
        self.prompts[i] = prompt;
    }

    pub fn view(&self, view: ViewIndex) -> &ViewMask {
        &self.per_view[self.dims.view_offset(view)]
    }

    pub fn stage(&self, view: ViewIndex) -> Stage {
        self.stage[self.dims.view_offset(view)]
    }

    pub fn prompt(&self, view: ViewIndex) -> Option<&Prompt> {
        self.prompts[self.dims.view_offset(view)].as_ref()
    }

    pub fn masks(&self) -> &[ViewMask] {
        &self.per_view
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stage
    }

    pub fn total_pixels(&self) -> usize {
        self.per_view.iter().map(ViewMask::pixel_count).sum()
    }

    pub fn stage_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for s in &self.stage {
            counts[Stage::ALL.iter().position(|x| x == s).unwrap()] += 1;
        }
        counts
    }
}

/// Per-view ground truth labels, with optional per-view disparity.
///
/// Label `0` marks unlabeled pixels; positive labels are segments.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<LabelMap>,
    pub disparity: Option<Vec<Plane<f32>>>,
}

impl GroundTruth {
    pub fn labels_at(&self, dims: &Dims, view: ViewIndex) -> &LabelMap {
        &self.labels[dims.view_offset(view)]
    }

    pub fn disparity_at(&self, dims: &Dims, view: ViewIndex) -> Option<&Plane<f32>> {
        self.disparity.as_ref().map(|d| &d[dims.view_offset(view)])
    }
}

/// Maps a middle-view point into `target` along its epipolar line.
///
/// `u' = u + d (s_m - i)`, `v' = v + d (t_m - j)`. No rounding or bounds checks.
#[inline]
pub fn project_point(p: (f64, f64), d: f64, target: ViewIndex, middle: ViewIndex) -> (f64, f64) {
    let ds = middle.s as f64 - target.s as f64;
    let dt = middle.t as f64 - target.t as f64;
    (p.0 + d * ds, p.1 + d * dt)
}

/// Inverse of [`project_point`]: maps a point of view `from` back to the middle view.
#[inline]
pub fn backproject_point(p: (f64, f64), d: f64, from: ViewIndex, middle: ViewIndex) -> (f64, f64) {
    let ds = middle.s as f64 - from.s as f64;
    let dt = middle.t as f64 - from.t as f64;
    (p.0 - d * ds, p.1 - d * dt)
}

/// Rounds a projected coordinate pair half away from zero and keeps it only if in frame.
#[inline]
pub fn round_to_pixel(p: (f64, f64), height: usize, width: usize) -> Option<(usize, usize)> {
    let u = p.0.round();
    let v = p.1.round();
    if u >= 0.0 && v >= 0.0 && u < height as f64 && v < width as f64 {
        Some((u as usize, v as usize))
    } else {
        None
    }
}

/// Boustrophedon traversal of the view grid: even rows left to right, odd rows right to left.
pub fn snake_order(views_s: usize, views_t: usize) -> Vec<ViewIndex> {
    let mut out = Vec::with_capacity(views_s * views_t);
    for s in 0..views_s {
        if s % 2 == 0 {
            out.extend((0..views_t).map(|t| ViewIndex::new(s, t)));
        } else {
            out.extend((0..views_t).rev().map(|t| ViewIndex::new(s, t)));
        }
    }
    out
}
