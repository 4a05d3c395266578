//! Slow, literal re-implementations of the metrics, used to cross-check the fast ones.
//!
//! Nothing here shares code with the parent module: pixels are handled as
//! coordinate sets and every quantity is recounted from scratch.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::lf::{Dims, LabelMap, LightFieldMask, Plane, ViewIndex};

type PixelSet = BTreeSet<(usize, usize)>;

fn pixels(m: &LightFieldMask, view: ViewIndex) -> PixelSet {
    let d = m.dims();
    let mut out = PixelSet::new();
    for u in 0..d.height {
        for v in 0..d.width {
            if m.view(view).get(u, v) {
                out.insert((u, v));
            }
        }
    }
    out
}

fn all_views(d: Dims) -> Vec<ViewIndex> {
    let mut out = Vec::new();
    for s in 0..d.views_s {
        for t in 0..d.views_t {
            out.push(ViewIndex { s, t });
        }
    }
    out
}

/// Half-away-from-zero rounding, written out.
fn round_half_away(x: f64) -> i64 {
    if x >= 0.0 {
        (x + 0.5).floor() as i64
    } else {
        -((-x + 0.5).floor() as i64)
    }
}

fn backproject(set: &PixelSet, disp: &Plane<f32>, from: ViewIndex, middle: ViewIndex, sign: f64, d: Dims) -> PixelSet {
    let mut out = PixelSet::new();
    for &(u, v) in set {
        let dd = disp.as_slice()[u * d.width + v] as f64 * sign;
        let bu = u as f64 - dd * (middle.s as f64 - from.s as f64);
        let bv = v as f64 - dd * (middle.t as f64 - from.t as f64);
        let (ru, rv) = (round_half_away(bu), round_half_away(bv));
        if ru >= 0 && rv >= 0 && (ru as usize) < d.height && (rv as usize) < d.width {
            out.insert((ru as usize, rv as usize));
        }
    }
    out
}

fn iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn siou(masks: &[LightFieldMask], disparity: &[Plane<f32>], middle: ViewIndex, sign: f64) -> (Option<f64>, BTreeMap<u32, Option<f64>>) {
    let mut per = BTreeMap::new();
    for m in masks {
        let d = m.dims();
        let reference = pixels(m, middle);
        let mut vals = Vec::new();
        if !reference.is_empty() {
            for view in all_views(d) {
                let p = pixels(m, view);
                if view == middle || p.is_empty() {
                    continue;
                }
                let idx = view.s * d.views_t + view.t;
                vals.push(iou(&backproject(&p, &disparity[idx], view, middle, sign, d), &reference));
            }
        }
        let v = if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) };
        per.insert(m.segment_id, v);
    }
    let defined: Vec<f64> = per.values().filter_map(|x| *x).collect();
    let overall = if defined.is_empty() { None } else { Some(defined.iter().sum::<f64>() / defined.len() as f64) };
    (overall, per)
}

pub fn lpp(masks: &[LightFieldMask], disparity: &[Plane<f32>], middle: ViewIndex, sign: f64) -> Option<f64> {
    let first = masks.first()?;
    let d = first.dims();
    let mut ids: Vec<Vec<HashSet<u32>>> = vec![vec![HashSet::new(); d.width]; d.height];
    for m in masks {
        for view in all_views(d) {
            let idx = view.s * d.views_t + view.t;
            let view_pixels = if view == middle { pixels(m, view) } else { backproject(&pixels(m, view), &disparity[idx], view, middle, sign, d) };
            for (u, v) in view_pixels {
                ids[u][v].insert(m.segment_id);
            }
        }
    }
    let sizes: Vec<usize> = ids.iter().flatten().map(|s| s.len()).filter(|&n| n > 0).collect();
    if sizes.is_empty() {
        None
    } else {
        Some(sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
    }
}

fn label_set(labels: &LabelMap, label: u16) -> PixelSet {
    let mut out = PixelSet::new();
    for u in 0..labels.height() {
        for v in 0..labels.width() {
            if *labels.get(u, v) == label {
                out.insert((u, v));
            }
        }
    }
    out
}

fn distinct_labels(labels: &LabelMap) -> BTreeSet<u16> {
    labels.as_slice().iter().copied().collect()
}

pub fn aa(masks: &[LightFieldMask], labels: &[LabelMap], d: Dims) -> Option<f64> {
    let mut per_view = Vec::new();
    for view in all_views(d) {
        let lm = &labels[view.s * d.views_t + view.t];
        let regions: Vec<(u16, PixelSet)> = distinct_labels(lm).into_iter().map(|l| (l, label_set(lm, l))).collect();
        let (mut good, mut total) = (0usize, 0usize);
        for m in masks {
            let p = pixels(m, view);
            if p.is_empty() {
                continue;
            }
            // Ascending label order with strict improvement keeps the smaller label on ties.
            let mut best: Option<(u16, usize)> = None;
            for (l, region) in &regions {
                let overlap = p.intersection(region).count();
                if best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((*l, overlap));
                }
            }
            let (assigned, _) = best.expect("label map is non-empty");
            good += p.iter().filter(|&&(u, v)| *lm.get(u, v) == assigned).count();
            total += p.len();
        }
        if total > 0 {
            per_view.push(good as f64 / total as f64);
        }
    }
    if per_view.is_empty() {
        None
    } else {
        Some(per_view.iter().sum::<f64>() / per_view.len() as f64)
    }
}

pub fn ue(masks: &[LightFieldMask], labels: &[LabelMap], d: Dims) -> f64 {
    let mut per_view = Vec::new();
    for view in all_views(d) {
        let lm = &labels[view.s * d.views_t + view.t];
        let mut sum = 0usize;
        for l in distinct_labels(lm) {
            let region = label_set(lm, l);
            for m in masks {
                let p = pixels(m, view);
                let inside = p.intersection(&region).count();
                if inside > 0 {
                    let outside = p.difference(&region).count();
                    sum += inside.min(outside);
                }
            }
        }
        per_view.push(sum as f64 / (d.height * d.width) as f64);
    }
    per_view.iter().sum::<f64>() / per_view.len() as f64
}

pub fn coverage(masks: &[LightFieldMask], d: Dims) -> f64 {
    let mut covered = 0usize;
    for view in all_views(d) {
        let mut union = PixelSet::new();
        for m in masks {
            union.extend(pixels(m, view));
        }
        covered += union.len();
    }
    covered as f64 / (d.num_views() * d.height * d.width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::{Stage, ViewMask};
    use crate::metrics;
    use proptest::prelude::*;

    fn fixture_strategy() -> impl Strategy<Value = (Vec<LightFieldMask>, Vec<LabelMap>, Vec<Plane<f32>>)> {
        let d = Dims::new(3, 3, 8, 8);
        let n = d.num_views() * d.pixels_per_view();
        (
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), 0..4),
            proptest::collection::vec(0u16..4, n),
            proptest::collection::vec(-2i32..=2, n),
        )
            .prop_map(move |(mask_bits, labels, disp)| {
                let masks = mask_bits
                    .into_iter()
                    .enumerate()
                    .map(|(k, bits)| {
                        let mut m = LightFieldMask::new(k as u32 + 1, d);
                        for view in d.views() {
                            let i = d.view_offset(view) * 64;
                            m.set_view(view, ViewMask::from_bits(8, 8, bits[i..i + 64].to_vec()).unwrap(), Stage::Refined);
                        }
                        m
                    })
                    .collect();
                let labels = labels.chunks(64).map(|c| Plane::from_vec(8, 8, c.to_vec()).unwrap()).collect();
                let disp = disp.chunks(64).map(|c| Plane::from_vec(8, 8, c.iter().map(|&x| x as f32 * 0.5).collect()).unwrap()).collect();
                (masks, labels, disp)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fast_metrics_equal_reference((masks, labels, disp) in fixture_strategy()) {
            let d = Dims::new(3, 3, 8, 8);
            let mid = ViewIndex::new(1, 1);
            let fast = metrics::compute_siou(&masks, &disp, mid, 1.0);
            let slow = siou(&masks, &disp, mid, 1.0);
            prop_assert_eq!(fast.overall, slow.0);
            prop_assert_eq!(fast.per_segment, slow.1);
            prop_assert_eq!(metrics::compute_lpp(&masks, &disp, mid, 1.0), lpp(&masks, &disp, mid, 1.0));
            prop_assert_eq!(metrics::compute_aa(&masks, &labels, d), aa(&masks, &labels, d));
            prop_assert_eq!(metrics::compute_ue(&masks, &labels, d), ue(&masks, &labels, d));
            prop_assert_eq!(metrics::compute_coverage(&masks, d), coverage(&masks, d));
        }
    }

    #[test]
    fn rounding_helper_matches_std() {
        for x in [-2.5, -1.5, -0.5, -0.49, 0.0, 0.5, 1.5, 2.4999, 3.5] {
            assert_eq!(round_half_away(x), f64::round(x) as i64, "{x}");
        }
    }
}
