//! Segment once in the middle view, then carry every mask to all subviews.
//!
//! Per segment: propagate with disparity, drop pixels whose features disagree
//! with the source, prompt the segmenter with the surviving mask and keep its
//! answer unless it strays too far from the prompt.

use std::time::{Duration, Instant};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Prompt, SegmenterBackend, Session};
use crate::features::{FeatureField, UpsampledFeatures};
use crate::lf::{project_point, round_to_pixel, DisparityMap, Dims, LightField, LightFieldMask, Stage, ViewIndex, ViewMask};

pub use crate::features::densify_features;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub t_sim: f64,
    pub t_iou: f64,
    pub points_per_side: usize,
    pub enable_refinement: bool,
    pub enable_occlusion: bool,
    pub min_mask_pixels: usize,
    pub disparity_sign: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_sim: 0.7,
            t_iou: 0.1,
            points_per_side: 64,
            enable_refinement: true,
            enable_occlusion: true,
            min_mask_pixels: 4,
            disparity_sign: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.t_sim) || !(0.0..=1.0).contains(&self.t_iou) {
            return Err(PipelineError::Input("t_sim and t_iou must lie in [0, 1]".into()));
        }
        if self.min_mask_pixels == 0 || self.points_per_side == 0 {
            return Err(PipelineError::Input("min_mask_pixels and points_per_side must be at least 1".into()));
        }
        if self.disparity_sign != 1.0 && self.disparity_sign != -1.0 {
            return Err(PipelineError::Input("disparity_sign must be +1 or -1".into()));
        }
        Ok(())
    }
}

/// Mean feature vector of a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFeature {
    pub vector: Vec<f32>,
    pub support: usize,
}

/// A mask whose set pixels carry their similarity to the source feature.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMask {
    pub mask: ViewMask,
    /// One weight per set pixel, in scan order.
    pub weights: Vec<f32>,
}

impl WeightedMask {
    pub fn uniform(mask: ViewMask) -> Self {
        let weights = vec![1.0; mask.pixel_count()];
        Self { mask, weights }
    }
}

/// Automatic mask generation on the middle view.
///
/// Masks smaller than `min_mask_pixels` are dropped; ids start at 1 in
/// descending area order (ties by first set pixel in scan order).
pub fn segment_source(
    backend: &dyn SegmenterBackend,
    lf: &LightField,
    cfg: &PipelineConfig,
) -> Result<Vec<(u32, ViewMask)>, PipelineError> {
    let session = backend.set_image(lf.view(lf.middle()), Some(lf.middle()))?;
    let result = source_masks(backend, &session, cfg);
    backend.release(&session)?;
    result
}

fn source_masks(
    backend: &dyn SegmenterBackend,
    session: &Session,
    cfg: &PipelineConfig,
) -> Result<Vec<(u32, ViewMask)>, PipelineError> {
    let mut masks: Vec<ViewMask> = backend
        .auto_generate(session, cfg.points_per_side)?
        .into_iter()
        .map(|r| r.mask)
        .filter(|m| m.pixel_count() >= cfg.min_mask_pixels)
        .collect();
    let first = |m: &ViewMask| m.bits().iter().position(|&b| b).unwrap_or(usize::MAX);
    masks.sort_by(|a, b| b.pixel_count().cmp(&a.pixel_count()).then(first(a).cmp(&first(b))));
    Ok(masks.into_iter().enumerate().map(|(i, m)| (i as u32 + 1, m)).collect())
}

/// Source pixels paired with the disparity used to move them.
fn source_points(source: &ViewMask, d: &DisparityMap, disparity_sign: f64) -> Vec<(f64, f64, f64)> {
    source.iter_set().map(|(u, v)| (u as f64, v as f64, d.at(u, v) as f64 * disparity_sign)).collect()
}

fn project_points(points: &[(f64, f64, f64)], view: ViewIndex, middle: ViewIndex, height: usize, width: usize) -> ViewMask {
    let mut out = ViewMask::empty(height, width);
    for &(u, v, d) in points {
        if let Some((pu, pv)) = round_to_pixel(project_point((u, v), d, view, middle), height, width) {
            out.set(pu, pv);
        }
    }
    out
}

/// Projects the middle-view `source` into `view`.
pub fn propagate_view(source: &ViewMask, d: &DisparityMap, view: ViewIndex, disparity_sign: f64) -> ViewMask {
    if view == d.view {
        return source.clone();
    }
    let points = source_points(source, d, disparity_sign);
    project_points(&points, view, d.view, source.height(), source.width())
}

/// Projects the middle-view `source` into every view of `dims`; all views are coarse.
pub fn propagate_mask(source: &ViewMask, d: &DisparityMap, dims: Dims, disparity_sign: f64) -> LightFieldMask {
    let points = source_points(source, d, disparity_sign);
    let mut out = LightFieldMask::new(0, dims);
    for view in dims.views() {
        let mask = if view == d.view {
            source.clone()
        } else {
            project_points(&points, view, d.view, dims.height, dims.width)
        };
        let stage = if mask.is_empty() { Stage::Absent } else { Stage::Coarse };
        out.set_view(view, mask, stage);
    }
    out
}

pub fn mask_mean_feature(mask: &ViewMask, field: &dyn FeatureField) -> Result<MaskFeature, PipelineError> {
    if mask.is_empty() {
        return Err(PipelineError::Input("mean feature of an empty mask".into()));
    }
    let k = field.dim();
    let mut acc = vec![0.0f64; k];
    let mut buf = vec![0.0f32; k];
    for (u, v) in mask.iter_set() {
        field.vector_into(u, v, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, x)| *a += *x as f64);
    }
    let n = mask.pixel_count() as f64;
    Ok(MaskFeature { vector: acc.into_iter().map(|a| (a / n) as f32).collect(), support: mask.pixel_count() })
}

#[inline]
fn cosine(a: &[f32], b: &[f32], b_norm: f64) -> f64 {
    let mut dot = 0.0f64;
    let mut aa = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        aa += *x as f64 * *x as f64;
    }
    let a_norm = aa.sqrt();
    if a_norm < 1e-12 || b_norm < 1e-12 {
        0.0
    } else {
        dot / (a_norm * b_norm)
    }
}

/// Keeps coarse pixels whose feature has cosine similarity at least `t_sim` to the source.
pub fn occlude_mask(coarse: &ViewMask, field: &dyn FeatureField, source: &MaskFeature, t_sim: f64) -> WeightedMask {
    let src_norm = source.vector.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt();
    let mut buf = vec![0.0f32; field.dim()];
    let mut mask = ViewMask::empty(coarse.height(), coarse.width());
    let mut weights = Vec::new();
    for (u, v) in coarse.iter_set() {
        field.vector_into(u, v, &mut buf);
        let sim = cosine(&buf, &source.vector, src_norm);
        if sim >= t_sim {
            mask.set(u, v);
            weights.push(sim as f32);
        }
    }
    WeightedMask { mask, weights }
}

/// Weighted centroid point plus tight bounding box of the mask.
///
/// The point is the continuous centroid when its rounded pixel is set,
/// otherwise the nearest set pixel (ties by scan order).
pub fn build_prompt(wm: &WeightedMask) -> Result<Prompt, PipelineError> {
    let Some((u0, v0, u1, v1)) = wm.mask.bounding_box() else {
        return Err(PipelineError::Input("prompt from an empty mask".into()));
    };
    let total: f64 = wm.weights.iter().map(|&w| w as f64).sum();
    let uniform = total <= 1e-12;
    let (mut su, mut sv, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for ((u, v), &w) in wm.mask.iter_set().zip(&wm.weights) {
        let w = if uniform { 1.0 } else { w as f64 };
        su += w * u as f64;
        sv += w * v as f64;
        sw += w;
    }
    let centroid = (su / sw, sv / sw);
    let (h, w) = (wm.mask.height(), wm.mask.width());
    let point = match round_to_pixel(centroid, h, w) {
        Some((pu, pv)) if wm.mask.get(pu, pv) => centroid,
        _ => {
            let dist = |(u, v): (usize, usize)| (u as f64 - centroid.0).powi(2) + (v as f64 - centroid.1).powi(2);
            let mut best = None;
            for p in wm.mask.iter_set() {
                if best.is_none_or(|(_, bd)| dist(p) < bd) {
                    best = Some((p, dist(p)));
                }
            }
            let ((pu, pv), _) = best.expect("mask is non-empty");
            (pu as f64, pv as f64)
        }
    };
    Ok(Prompt::point_and_box(point, (u0 as f64, v0 as f64, u1 as f64, v1 as f64)))
}

/// Prompts the segmenter with `wm` and keeps its mask unless it overlaps
/// `wm` with IoU below `t_iou`. Backend failures fall back to `wm`.
pub fn refine_and_select(
    backend: &dyn SegmenterBackend,
    session: &Session,
    wm: &WeightedMask,
    cfg: &PipelineConfig,
) -> Result<(ViewMask, Stage, Prompt), PipelineError> {
    let prompt = build_prompt(wm)?;
    let (mask, stage) = refine_with(backend, session, wm, &prompt, cfg);
    Ok((mask, stage, prompt))
}

fn refine_with(
    backend: &dyn SegmenterBackend,
    session: &Session,
    wm: &WeightedMask,
    prompt: &Prompt,
    cfg: &PipelineConfig,
) -> (ViewMask, Stage) {
    match backend.prompt(session, prompt) {
        Ok(refined) if refined.mask.iou(&wm.mask) >= cfg.t_iou => (refined.mask, Stage::Refined),
        Ok(_) => (wm.mask.clone(), Stage::Fallback),
        Err(e) => {
            warn!("refinement failed, keeping coarse mask: {e}");
            (wm.mask.clone(), Stage::Fallback)
        }
    }
}

/// Wall time of a run, with per-stage time summed across workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub total_ms: f64,
    pub source_ms: f64,
    pub encode_ms: f64,
    pub propagate_ms: f64,
    pub occlude_ms: f64,
    pub prompt_ms: f64,
    pub refine_ms: f64,
    pub num_masks: usize,
    pub num_views: usize,
    /// `total_ms / (num_masks * num_views)`, 0 without masks.
    pub ms_per_mask_per_subview: f64,
}

impl TimingRecord {
    /// Propagation, occlusion and prompt construction, summed over workers.
    pub fn geometric_core_ms(&self) -> f64 {
        self.propagate_ms + self.occlude_ms + self.prompt_ms
    }
}

pub fn per_mask_per_subview(total_ms: f64, num_masks: usize, num_views: usize) -> f64 {
    if num_masks == 0 || num_views == 0 {
        0.0
    } else {
        total_ms / (num_masks * num_views) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub masks: Vec<LightFieldMask>,
    pub timing: TimingRecord,
}

struct SourceSegment {
    id: u32,
    mask: ViewMask,
    points: Vec<(f64, f64, f64)>,
    feature: Option<MaskFeature>,
}

#[derive(Default)]
struct StageClock {
    encode: Duration,
    propagate: Duration,
    occlude: Duration,
    prompt: Duration,
    refine: Duration,
}

impl StageClock {
    fn add(&mut self, other: &StageClock) {
        self.encode += other.encode;
        self.propagate += other.propagate;
        self.occlude += other.occlude;
        self.prompt += other.prompt;
        self.refine += other.refine;
    }
}

type ViewOutcome = (ViewMask, Stage, Option<Prompt>);

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

fn process_view(
    backend: &dyn SegmenterBackend,
    lf: &LightField,
    view: ViewIndex,
    segments: &[SourceSegment],
    cfg: &PipelineConfig,
) -> (Vec<ViewOutcome>, StageClock) {
    let dims = lf.dims();
    let mut clock = StageClock::default();
    let needs_session = cfg.enable_occlusion || cfg.enable_refinement;
    let session = if needs_session {
        match timed(&mut clock.encode, || backend.set_image(lf.view(view), Some(view))) {
            Ok(s) => Some(s),
            Err(e) => {
                warn!("cannot encode view {view}, keeping coarse masks: {e}");
                None
            }
        }
    } else {
        None
    };
    let field = session.as_ref().map(|s| UpsampledFeatures::new(&s.features, dims.height, dims.width));
    let mut outcomes = Vec::with_capacity(segments.len());
    for seg in segments {
        let coarse = timed(&mut clock.propagate, || project_points(&seg.points, view, lf.middle(), dims.height, dims.width));
        let (wm, occluded) = match (&field, &seg.feature) {
            (Some(field), Some(feat)) if cfg.enable_occlusion => {
                (timed(&mut clock.occlude, || occlude_mask(&coarse, field, feat, cfg.t_sim)), true)
            }
            _ => (WeightedMask::uniform(coarse), false),
        };
        if wm.mask.pixel_count() < cfg.min_mask_pixels {
            outcomes.push((ViewMask::empty(dims.height, dims.width), Stage::Absent, None));
            continue;
        }
        let outcome = match (&session, cfg.enable_refinement) {
            (Some(session), true) => {
                let prompt = timed(&mut clock.prompt, || build_prompt(&wm)).expect("mask is non-empty");
                let (mask, stage) = timed(&mut clock.refine, || refine_with(backend, session, &wm, &prompt, cfg));
                (mask, stage, Some(prompt))
            }
            (None, true) => (wm.mask, Stage::Fallback, None),
            _ => (wm.mask, if occluded { Stage::Occluded } else { Stage::Coarse }, None),
        };
        let outcome = if outcome.0.is_empty() { (outcome.0, Stage::Absent, outcome.2) } else { outcome };
        outcomes.push(outcome);
    }
    if let Some(session) = &session {
        if let Err(e) = backend.release(session) {
            warn!("release of view {view} failed: {e}");
        }
    }
    (outcomes, clock)
}

/// Runs the full pipeline on the current rayon pool.
///
/// The middle view of every output mask is its source mask, staged coarse.
/// Output does not depend on the number of workers.
pub fn segment_lightfield(
    backend: &dyn SegmenterBackend,
    lf: &LightField,
    d: &DisparityMap,
    cfg: &PipelineConfig,
) -> Result<Segmentation, PipelineError> {
    cfg.validate()?;
    let dims = lf.dims();
    if d.view != lf.middle() || d.values.height() != dims.height || d.values.width() != dims.width {
        return Err(PipelineError::Input("disparity map must cover the middle view".into()));
    }
    let start = Instant::now();
    let middle = backend.set_image(lf.view(lf.middle()), Some(lf.middle()))?;
    let sources = source_masks(backend, &middle, cfg);
    let sources = match sources {
        Ok(s) => s,
        Err(e) => {
            let _ = backend.release(&middle);
            return Err(e);
        }
    };
    let middle_field = UpsampledFeatures::new(&middle.features, dims.height, dims.width);
    let segments: Vec<SourceSegment> = sources
        .into_iter()
        .map(|(id, mask)| {
            let feature = if cfg.enable_occlusion { mask_mean_feature(&mask, &middle_field).ok() } else { None };
            let points = source_points(&mask, d, cfg.disparity_sign);
            SourceSegment { id, mask, points, feature }
        })
        .collect();
    backend.release(&middle)?;
    let source_ms = start.elapsed().as_secs_f64() * 1e3;

    let others: Vec<ViewIndex> = dims.views().filter(|&v| v != lf.middle()).collect();
    let per_view: Vec<(Vec<ViewOutcome>, StageClock)> = if segments.is_empty() {
        Vec::new()
    } else {
        others.par_iter().map(|&view| process_view(backend, lf, view, &segments, cfg)).collect()
    };

    let mut masks: Vec<LightFieldMask> = segments
        .iter()
        .map(|seg| {
            let mut m = LightFieldMask::new(seg.id, dims);
            m.set_view(lf.middle(), seg.mask.clone(), Stage::Coarse);
            m
        })
        .collect();
    let mut clock = StageClock::default();
    for (view, (outcomes, c)) in others.iter().zip(per_view) {
        clock.add(&c);
        for (m, (mask, stage, prompt)) in masks.iter_mut().zip(outcomes) {
            m.set_view(*view, mask, stage);
            m.set_prompt(*view, prompt);
        }
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let timing = TimingRecord {
        total_ms,
        source_ms,
        encode_ms: ms(clock.encode),
        propagate_ms: ms(clock.propagate),
        occlude_ms: ms(clock.occlude),
        prompt_ms: ms(clock.prompt),
        refine_ms: ms(clock.refine),
        num_masks: masks.len(),
        num_views: dims.num_views(),
        ms_per_mask_per_subview: per_mask_per_subview(total_ms, masks.len(), dims.num_views()),
    };
    Ok(Segmentation { masks, timing })
}
