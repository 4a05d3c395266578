//! Cross-view consistency and segmentation quality of light field masks.
//!
//! Consistency metrics move every view mask back into the middle view with
//! ground-truth disparity. Quality metrics compare view masks with per-view
//! labels, treating every label value (including 0) as a ground-truth region.

pub mod reference;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lf::{backproject_point, round_to_pixel, Dims, GroundTruth, LabelMap, LightFieldMask, Plane, ViewIndex, ViewMask};
use crate::pipeline::TimingRecord;

pub const REPORT_SCHEMA: &str = "lfseg-report/1";

/// Maps a mask of view `from` into middle-view coordinates using that view's disparity.
pub fn backproject_mask(vm: &ViewMask, disparity: &Plane<f32>, from: ViewIndex, middle: ViewIndex, sign: f64) -> ViewMask {
    if from == middle {
        return vm.clone();
    }
    let (h, w) = (vm.height(), vm.width());
    let mut out = ViewMask::empty(h, w);
    for (u, v) in vm.iter_set() {
        let d = *disparity.get(u, v) as f64 * sign;
        if let Some((bu, bv)) = round_to_pixel(backproject_point((u as f64, v as f64), d, from, middle), h, w) {
            out.set(bu, bv);
        }
    }
    out
}

/// Overall and per-segment SIoU. `None` where no view contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct SiouResult {
    pub overall: Option<f64>,
    pub per_segment: BTreeMap<u32, Option<f64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean IoU of each non-middle view's backprojection against the middle mask.
pub fn compute_siou(masks: &[LightFieldMask], disparity: &[Plane<f32>], middle: ViewIndex, sign: f64) -> SiouResult {
    let per_segment: BTreeMap<u32, Option<f64>> = masks
        .par_iter()
        .map(|m| {
            let dims = m.dims();
            let reference = m.view(middle);
            let value = if reference.is_empty() {
                None
            } else {
                mean(dims.views().filter(|&v| v != middle && !m.view(v).is_empty()).map(|v| {
                    backproject_mask(m.view(v), &disparity[dims.view_offset(v)], v, middle, sign).iou(reference)
                }))
            };
            (m.segment_id, value)
        })
        .collect();
    let overall = mean(per_segment.values().flatten().copied());
    SiouResult { overall, per_segment }
}

/// Mean number of distinct segments landing on each middle-view pixel that receives any.
pub fn compute_lpp(masks: &[LightFieldMask], disparity: &[Plane<f32>], middle: ViewIndex, sign: f64) -> Option<f64> {
    let first = masks.first()?;
    let dims = first.dims();
    let unions: Vec<ViewMask> = masks
        .par_iter()
        .map(|m| {
            let mut union = ViewMask::empty(dims.height, dims.width);
            for v in dims.views() {
                for (u, vv) in backproject_mask(m.view(v), &disparity[dims.view_offset(v)], v, middle, sign).iter_set() {
                    union.set(u, vv);
                }
            }
            union
        })
        .collect();
    let mut counts = vec![0u32; dims.pixels_per_view()];
    for union in &unions {
        for (c, &b) in counts.iter_mut().zip(union.bits()) {
            *c += b as u32;
        }
    }
    let labeled = counts.iter().filter(|&&c| c > 0).count();
    (labeled > 0).then(|| counts.iter().map(|&c| c as f64).sum::<f64>() / labeled as f64)
}

fn label_histogram(mask: &ViewMask, labels: &LabelMap, hist: &mut Vec<usize>) {
    hist.iter_mut().for_each(|h| *h = 0);
    for (b, &l) in mask.bits().iter().zip(labels.as_slice()) {
        if *b {
            let l = l as usize;
            if l >= hist.len() {
                hist.resize(l + 1, 0);
            }
            hist[l] += 1;
        }
    }
}

/// Largest count, ties to the smaller label.
fn majority(hist: &[usize]) -> usize {
    let mut best = 0;
    for (l, &c) in hist.iter().enumerate() {
        if c > hist[best] {
            best = l;
        }
    }
    best
}

/// Achievable accuracy of one view; `None` without predictions.
pub fn view_accuracy(masks: &[&ViewMask], labels: &LabelMap) -> Option<f64> {
    let mut hist = Vec::new();
    let (mut hit, mut total) = (0usize, 0usize);
    for m in masks.iter().filter(|m| !m.is_empty()) {
        label_histogram(m, labels, &mut hist);
        hit += hist[majority(&hist)];
        total += m.pixel_count();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Undersegmentation error of one view, normalized by its pixel count.
pub fn view_undersegmentation(masks: &[&ViewMask], labels: &LabelMap) -> f64 {
    let mut hist = Vec::new();
    let mut leak = 0usize;
    for m in masks.iter().filter(|m| !m.is_empty()) {
        label_histogram(m, labels, &mut hist);
        let n = m.pixel_count();
        leak += hist.iter().filter(|&&c| c > 0).map(|&c| c.min(n - c)).sum::<usize>();
    }
    leak as f64 / labels.as_slice().len() as f64
}

fn views_of(masks: &[LightFieldMask], view: ViewIndex) -> Vec<&ViewMask> {
    masks.iter().map(|m| m.view(view)).collect()
}

/// Mean per-view achievable accuracy over views that carry predictions.
pub fn compute_aa(masks: &[LightFieldMask], labels: &[LabelMap], dims: Dims) -> Option<f64> {
    let per_view: Vec<Option<f64>> = dims
        .views()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&v| view_accuracy(&views_of(masks, v), &labels[dims.view_offset(v)]))
        .collect();
    mean(per_view.into_iter().flatten())
}

/// Mean per-view undersegmentation error over all views.
pub fn compute_ue(masks: &[LightFieldMask], labels: &[LabelMap], dims: Dims) -> f64 {
    let per_view: Vec<f64> = dims
        .views()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&v| view_undersegmentation(&views_of(masks, v), &labels[dims.view_offset(v)]))
        .collect();
    mean(per_view).unwrap_or(0.0)
}

/// Fraction of light field pixels covered by at least one mask.
pub fn compute_coverage(masks: &[LightFieldMask], dims: Dims) -> f64 {
    let mut covered = 0usize;
    for v in dims.views() {
        let mut union = vec![false; dims.pixels_per_view()];
        for m in masks {
            for (c, &b) in union.iter_mut().zip(m.view(v).bits()) {
                *c |= b;
            }
        }
        covered += union.iter().filter(|&&b| b).count();
    }
    covered as f64 / (dims.num_views() * dims.pixels_per_view()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub num_segments: usize,
    pub siou: Option<f64>,
    pub lpp: Option<f64>,
    /// Over segmented pixels only.
    pub aa: Option<f64>,
    pub ue: f64,
    /// Fraction of pixels segmented.
    pub coverage: f64,
    pub time_ms_per_mask_per_subview: Option<f64>,
    pub per_segment_siou: BTreeMap<u32, Option<f64>>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Assembles every metric. Consistency metrics are `None` without GT disparity.
pub fn evaluate(
    masks: &[LightFieldMask],
    gt: &GroundTruth,
    dims: Dims,
    middle: ViewIndex,
    timing: Option<&TimingRecord>,
    sign: f64,
) -> MetricsReport {
    let mut warnings = Vec::new();
    let (siou, lpp) = match &gt.disparity {
        Some(disp) => {
            let s = compute_siou(masks, disp, middle, sign);
            for (id, v) in &s.per_segment {
                if v.is_none() {
                    warnings.push(format!("segment {id} appears in no view besides the middle one; excluded from SIoU"));
                }
            }
            (s, compute_lpp(masks, disp, middle, sign))
        }
        None => {
            warnings.push("ground-truth disparity missing; siou and lpp omitted".into());
            (SiouResult { overall: None, per_segment: BTreeMap::new() }, None)
        }
    };
    if masks.is_empty() {
        warnings.push("no segments; siou, lpp and aa undefined".into());
    }
    let time = timing.map(|t| crate::pipeline::per_mask_per_subview(t.total_ms, masks.len(), dims.num_views()));
    MetricsReport {
        schema: REPORT_SCHEMA.into(),
        num_segments: masks.len(),
        siou: siou.overall,
        lpp,
        aa: compute_aa(masks, &gt.labels, dims),
        ue: compute_ue(masks, &gt.labels, dims),
        coverage: compute_coverage(masks, dims),
        time_ms_per_mask_per_subview: time.filter(|_| !masks.is_empty()),
        per_segment_siou: siou.per_segment,
        warnings,
        config: serde_json::Value::Null,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::Stage;

    fn lfm(id: u32, dims: Dims, f: impl Fn(ViewIndex, usize, usize) -> bool) -> LightFieldMask {
        let mut m = LightFieldMask::new(id, dims);
        for v in dims.views() {
            m.set_view(v, ViewMask::from_fn(dims.height, dims.width, |a, b| f(v, a, b)), Stage::Coarse);
        }
        m
    }

    fn zeros(dims: Dims) -> Vec<Plane<f32>> {
        vec![Plane::filled(dims.height, dims.width, 0.0); dims.num_views()]
    }

    #[test]
    fn consistent_mask_has_unit_siou_and_lpp() {
        let dims = Dims::new(3, 3, 8, 8);
        let m = lfm(1, dims, |_, u, v| u < 4 && v < 5);
        let mid = ViewIndex::new(1, 1);
        let s = compute_siou(std::slice::from_ref(&m), &zeros(dims), mid, 1.0);
        assert_eq!(s.overall, Some(1.0));
        assert_eq!(compute_lpp(std::slice::from_ref(&m), &zeros(dims), mid, 1.0), Some(1.0));
    }

    #[test]
    fn middle_only_segment_is_excluded() {
        let dims = Dims::new(3, 3, 4, 4);
        let mid = ViewIndex::new(1, 1);
        let m = lfm(5, dims, |v, _, _| v == mid);
        let s = compute_siou(&[m], &zeros(dims), mid, 1.0);
        assert_eq!(s.overall, None);
        assert_eq!(s.per_segment.get(&5), Some(&None));
    }

    #[test]
    fn disjoint_segments_have_unit_lpp() {
        let dims = Dims::new(3, 3, 6, 6);
        let a = lfm(1, dims, |_, u, _| u < 2);
        let b = lfm(2, dims, |_, u, _| u > 3);
        assert_eq!(compute_lpp(&[a, b], &zeros(dims), ViewIndex::new(1, 1), 1.0), Some(1.0));
    }

    #[test]
    fn half_overlap_gives_lpp_one_and_a_half() {
        let dims = Dims::new(3, 3, 4, 4);
        // 8 labeled pixels in rows 0-1, half of them claimed by both segments.
        let a = lfm(1, dims, |_, u, _| u < 2);
        let b = lfm(2, dims, |_, u, v| u < 2 && v < 2);
        assert_eq!(compute_lpp(&[a, b], &zeros(dims), ViewIndex::new(1, 1), 1.0), Some(1.5));
    }

    #[test]
    fn straddling_mask_accuracy() {
        let labels = Plane::from_fn(1, 10, |_, v| if v < 6 { 1 } else { 2 });
        let m = ViewMask::full(1, 10);
        assert_eq!(view_accuracy(&[&m], &labels), Some(0.6));
        assert_eq!(view_accuracy(&[], &labels), None);
        // Ties go to the smaller label.
        let tie = Plane::from_fn(1, 4, |_, v| if v < 2 { 3 } else { 1 });
        let mut hist = Vec::new();
        label_histogram(&ViewMask::full(1, 4), &tie, &mut hist);
        assert_eq!(majority(&hist), 1);
    }

    #[test]
    fn exact_predictions_are_perfect() {
        let dims = Dims::new(1, 2, 4, 4);
        let labels = vec![Plane::from_fn(4, 4, |u, _| (u / 2) as u16); 2];
        let a = lfm(1, dims, |_, u, _| u < 2);
        let b = lfm(2, dims, |_, u, _| u >= 2);
        assert_eq!(compute_aa(&[a.clone(), b.clone()], &labels, dims), Some(1.0));
        assert_eq!(compute_ue(&[a.clone(), b.clone()], &labels, dims), 0.0);
        assert_eq!(compute_coverage(&[a, b], dims), 1.0);
    }

    #[test]
    fn mask_inside_one_segment_has_no_leak() {
        let labels = Plane::filled(8, 8, 3u16);
        let m = ViewMask::from_fn(8, 8, |u, v| u * 8 + v < 10);
        assert_eq!(view_undersegmentation(&[&m], &labels), 0.0);
    }

    #[test]
    fn handcrafted_overflow() {
        // Left half label 1, right half label 2; mask covers columns 0..5 of 8 (rows 0..3).
        let labels = Plane::from_fn(8, 8, |_, v| if v < 4 { 1 } else { 2 });
        let m = ViewMask::from_fn(8, 8, |u, v| u < 4 && v < 5);
        // |P| = 20, |P n S1| = 16 -> min(16, 4) = 4; |P n S2| = 4 -> min(4, 16) = 4.
        assert_eq!(view_undersegmentation(&[&m], &labels), 8.0 / 64.0);
    }

    #[test]
    fn coverage_extremes() {
        let dims = Dims::new(2, 2, 3, 3);
        assert_eq!(compute_coverage(&[], dims), 0.0);
        assert_eq!(compute_coverage(&[lfm(1, dims, |_, _, _| true)], dims), 1.0);
    }

    #[test]
    fn backprojection_inverts_constant_propagation() {
        let dims = Dims::new(5, 5, 20, 20);
        let mid = ViewIndex::new(2, 2);
        let src = ViewMask::from_fn(20, 20, |u, v| (5..12).contains(&u) && (6..15).contains(&v));
        let d = crate::lf::DisparityMap::constant(20, 20, 1.0, mid);
        let disp = Plane::filled(20, 20, 1.0f32);
        for view in dims.views() {
            let fwd = crate::pipeline::propagate_view(&src, &d, view, 1.0);
            assert_eq!(backproject_mask(&fwd, &disp, view, mid, 1.0), src, "view {view}");
        }
    }

    #[test]
    fn timing_is_per_mask_per_subview() {
        let dims = Dims::new(9, 9, 2, 2);
        let gt = GroundTruth { labels: vec![Plane::filled(2, 2, 1); 81], disparity: Some(zeros(dims)) };
        let masks = vec![lfm(1, dims, |_, _, _| true), lfm(2, dims, |_, u, _| u == 0)];
        let timing = TimingRecord { total_ms: 273.6, ..Default::default() };
        let r = evaluate(&masks, &gt, dims, ViewIndex::new(4, 4), Some(&timing), 1.0);
        assert!((r.time_ms_per_mask_per_subview.unwrap() - 1.689).abs() < 5e-4);
        assert_eq!(r.schema, "lfseg-report/1");
    }

    #[test]
    fn missing_disparity_yields_nulls() {
        let dims = Dims::new(1, 1, 2, 2);
        let gt = GroundTruth { labels: vec![Plane::filled(2, 2, 1)], disparity: None };
        let r = evaluate(&[lfm(1, dims, |_, _, _| true)], &gt, dims, ViewIndex::new(0, 0), None, 1.0);
        assert_eq!((r.siou, r.lpp), (None, None));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["siou"].is_null() && json["lpp"].is_null());
    }

    #[test]
    fn empty_segment_changes_nothing() {
        let dims = Dims::new(3, 3, 6, 6);
        let labels: Vec<LabelMap> = (0..9).map(|_| Plane::from_fn(6, 6, |u, _| (u / 3) as u16)).collect();
        let gt = GroundTruth { labels, disparity: Some(zeros(dims)) };
        let mid = ViewIndex::new(1, 1);
        let a = lfm(1, dims, |_, u, v| u < 4 && v > 1);
        let base = evaluate(std::slice::from_ref(&a), &gt, dims, mid, None, 1.0);
        let more = evaluate(&[a, LightFieldMask::new(2, dims)], &gt, dims, mid, None, 1.0);
        assert_eq!((base.siou, base.lpp, base.aa, base.ue, base.coverage), (more.siou, more.lpp, more.aa, more.ue, more.coverage));
    }
}
