//! Middle-view disparity from structure-tensor orientation on epipolar plane images.
//!
//! A scene point traces a line through an EPI whose spatial slope per view
//! step equals minus its disparity. The local orientation of that line is the
//! eigenvector of the smaller eigenvalue of the smoothed gradient tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::lf::{DisparityMap, LightField, Plane, ViewIndex};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DisparityError {
    #[error("disparity estimation needs at least 3 views on one axis, got {0}x{1}")]
    TooFewViews(usize, usize),
    #[error("invalid estimator parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityParams {
    pub sigma_grad: f64,
    pub sigma_tensor: f64,
    pub coherence_min: f64,
    /// `+1` when the dataset follows `u_i = u_m + d (s_m - i)`, `-1` for the opposite parallax.
    pub disparity_sign: f64,
}

impl Default for DisparityParams {
    fn default() -> Self {
        Self { sigma_grad: 0.8, sigma_tensor: 1.6, coherence_min: 0.05, disparity_sign: 1.0 }
    }
}

impl DisparityParams {
    fn validate(&self) -> Result<(), DisparityError> {
        if !(self.sigma_grad > 0.0 && self.sigma_tensor > 0.0) {
            return Err(DisparityError::InvalidParams("sigmas must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coherence_min) {
            return Err(DisparityError::InvalidParams("coherence_min must lie in [0, 1]".into()));
        }
        if self.disparity_sign != 1.0 && self.disparity_sign != -1.0 {
            return Err(DisparityError::InvalidParams("disparity_sign must be +1 or -1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpiAxis {
    /// Views `(s_m, t)` sliced at a fixed row `u`; spatial axis is `v`.
    Horizontal,
    /// Views `(s, t_m)` sliced at a fixed column `v`; spatial axis is `u`.
    Vertical,
}

/// `views x spatial` grayscale slice with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiSlice {
    pub samples: Plane<f32>,
    pub axis: EpiAxis,
}

/// Smoothed gradient outer products of an EPI.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    /// Spatial-spatial entry.
    pub j_uu: Plane<f32>,
    /// Spatial-view entry.
    pub j_us: Plane<f32>,
    /// View-view entry.
    pub j_ss: Plane<f32>,
}

/// Per-pixel line slope `du/ds` and coherence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiOrientation {
    pub slope: Plane<f32>,
    pub coherence: Plane<f32>,
}

fn gaussian(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-r..=r).map(|m| (-(m * m) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Odd derivative taps, scaled to differentiate linear ramps exactly.
fn gaussian_derivative(sigma: f64) -> Vec<f64> {
    let g = gaussian(sigma);
    let r = (g.len() / 2) as i64;
    let raw: Vec<f64> = (-r..=r).zip(&g).map(|(m, w)| m as f64 * w).collect();
    let norm: f64 = (-r..=r).zip(&raw).map(|(m, w)| m as f64 * w).sum();
    raw.into_iter().map(|x| x / norm).collect()
}

/// Correlates along rows (`along_rows = false`) or columns, replicating borders.
fn correlate(src: &[f64], rows: usize, cols: usize, taps: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; rows * cols];
    for a in 0..rows {
        for b in 0..cols {
            let mut acc = 0.0;
            for (i, w) in taps.iter().enumerate() {
                let m = i as i64 - r;
                let (aa, bb) = if along_rows {
                    ((a as i64 + m).clamp(0, rows as i64 - 1) as usize, b)
                } else {
                    (a, (b as i64 + m).clamp(0, cols as i64 - 1) as usize)
                };
                acc += w * src[aa * cols + bb];
            }
            out[a * cols + b] = acc;
        }
    }
    out
}

/// Structure tensor of an EPI. Rows index views, columns index the spatial axis.
pub fn structure_tensor(epi: &EpiSlice, sigma_grad: f64, sigma_tensor: f64) -> TensorField {
    let (rows, cols) = (epi.samples.height(), epi.samples.width());
    let src: Vec<f64> = epi.samples.as_slice().iter().map(|&x| x as f64).collect();
    let g = gaussian(sigma_grad);
    let dg = gaussian_derivative(sigma_grad);
    let g_u = correlate(&correlate(&src, rows, cols, &g, true), rows, cols, &dg, false);
    let g_s = correlate(&correlate(&src, rows, cols, &dg, true), rows, cols, &g, false);
    let gt = gaussian(sigma_tensor);
    let smooth = |f: &dyn Fn(usize) -> f64| {
        let prod: Vec<f64> = (0..rows * cols).map(f).collect();
        let s = correlate(&correlate(&prod, rows, cols, &gt, true), rows, cols, &gt, false);
        Plane::from_vec(rows, cols, s.into_iter().map(|x| x as f32).collect()).expect("sized")
    };
    TensorField {
        j_uu: smooth(&|i| g_u[i] * g_u[i]),
        j_us: smooth(&|i| g_u[i] * g_s[i]),
        j_ss: smooth(&|i| g_s[i] * g_s[i]),
    }
}

/// Line slope and coherence of one tensor `[[a, b], [b, c]]` (spatial first).
///
/// Slopes are clamped to `+-max_slope`.
#[inline]
pub fn tensor_orientation(a: f64, b: f64, c: f64, max_slope: f64) -> (f64, f64) {
    let trace = a + c;
    if trace < 1e-12 {
        return (0.0, 0.0);
    }
    let coherence = (((a - c).powi(2) + 4.0 * b * b) / (trace * trace)).clamp(0.0, 1.0);
    // Principal eigenvector (gradient direction) at angle theta from the spatial axis;
    // the iso-intensity line is perpendicular to it.
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let slope = (-theta.tan()).clamp(-max_slope, max_slope);
    (slope, coherence)
}

pub fn epi_orientation(epi: &EpiSlice, sigma_grad: f64, sigma_tensor: f64) -> EpiOrientation {
    let tensor = structure_tensor(epi, sigma_grad, sigma_tensor);
    let (rows, cols) = (epi.samples.height(), epi.samples.width());
    let max_slope = cols.max(rows) as f64;
    let mut slope = Plane::filled(rows, cols, 0.0f32);
    let mut coherence = Plane::filled(rows, cols, 0.0f32);
    for i in 0..rows * cols {
        let (sl, co) = tensor_orientation(
            tensor.j_uu.as_slice()[i] as f64,
            tensor.j_us.as_slice()[i] as f64,
            tensor.j_ss.as_slice()[i] as f64,
            max_slope,
        );
        slope.as_mut_slice()[i] = sl as f32;
        coherence.as_mut_slice()[i] = co as f32;
    }
    EpiOrientation { slope, coherence }
}

fn luma(lf: &LightField, view: ViewIndex) -> Plane<f32> {
    let img = lf.view(view);
    let d = lf.dims();
    Plane::from_fn(d.height, d.width, |u, v| {
        let [r, g, b] = img.get_pixel(v as u32, u as u32).0;
        ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
    })
}

/// (disparity, coherence) at the reference row of every EPI along one axis.
fn axis_estimates(lf: &LightField, axis: EpiAxis, params: &DisparityParams) -> (Plane<f32>, Plane<f32>) {
    let d = lf.dims();
    let m = lf.middle();
    let (views, reference): (Vec<ViewIndex>, usize) = match axis {
        EpiAxis::Horizontal => ((0..d.views_t).map(|t| ViewIndex::new(m.s, t)).collect(), m.t),
        EpiAxis::Vertical => ((0..d.views_s).map(|s| ViewIndex::new(s, m.t)).collect(), m.s),
    };
    let lumas: Vec<Plane<f32>> = views.iter().map(|&v| luma(lf, v)).collect();
    let (slices, spatial) = match axis {
        EpiAxis::Horizontal => (d.height, d.width),
        EpiAxis::Vertical => (d.width, d.height),
    };
    let per_slice: Vec<(Vec<f32>, Vec<f32>)> = (0..slices)
        .into_par_iter()
        .map(|fixed| {
            let samples = Plane::from_fn(views.len(), spatial, |a, b| match axis {
                EpiAxis::Horizontal => *lumas[a].get(fixed, b),
                EpiAxis::Vertical => *lumas[a].get(b, fixed),
            });
            let o = epi_orientation(&EpiSlice { samples, axis }, params.sigma_grad, params.sigma_tensor);
            let row = reference * spatial;
            let disp = o.slope.as_slice()[row..row + spatial]
                .iter()
                .map(|&s| (-(s as f64) * params.disparity_sign) as f32)
                .collect();
            (disp, o.coherence.as_slice()[row..row + spatial].to_vec())
        })
        .collect();
    let mut disp = Plane::filled(d.height, d.width, 0.0f32);
    let mut coh = Plane::filled(d.height, d.width, 0.0f32);
    for (fixed, (ds, cs)) in per_slice.into_iter().enumerate() {
        for b in 0..spatial {
            let (u, v) = match axis {
                EpiAxis::Horizontal => (fixed, b),
                EpiAxis::Vertical => (b, fixed),
            };
            *disp.get_mut(u, v) = ds[b];
            *coh.get_mut(u, v) = cs[b];
        }
    }
    (disp, coh)
}

/// Estimates the middle-view disparity map.
///
/// Horizontal and vertical EPI estimates are merged by keeping the more
/// coherent one; pixels where neither reaches `coherence_min` take the value of
/// the nearest valid pixel (4-connected breadth-first order, seeds in scan
/// order) and record coherence 0.
pub fn estimate_disparity(lf: &LightField, params: &DisparityParams) -> Result<DisparityMap, DisparityError> {
    params.validate()?;
    let d = lf.dims();
    let use_h = d.views_t >= 3;
    let use_v = d.views_s >= 3;
    if !use_h && !use_v {
        return Err(DisparityError::TooFewViews(d.views_s, d.views_t));
    }
    let (h, v) = rayon::join(
        || use_h.then(|| axis_estimates(lf, EpiAxis::Horizontal, params)),
        || use_v.then(|| axis_estimates(lf, EpiAxis::Vertical, params)),
    );
    let n = d.pixels_per_view();
    let mut disp = vec![0.0f32; n];
    let mut coh = vec![0.0f32; n];
    for i in 0..n {
        let pick = match (&h, &v) {
            (Some(h), Some(v)) if v.1.as_slice()[i] > h.1.as_slice()[i] => v,
            (Some(h), _) => h,
            (None, Some(v)) => v,
            (None, None) => unreachable!(),
        };
        disp[i] = pick.0.as_slice()[i];
        coh[i] = pick.1.as_slice()[i];
    }
    let valid: Vec<bool> = coh.iter().map(|&c| c as f64 >= params.coherence_min).collect();
    fill_nearest(&mut disp, &valid, d.height, d.width);
    for (c, ok) in coh.iter_mut().zip(&valid) {
        if !ok {
            *c = 0.0;
        }
    }
    Ok(DisparityMap {
        values: Plane::from_vec(d.height, d.width, disp).expect("sized"),
        coherence: Plane::from_vec(d.height, d.width, coh).expect("sized"),
        view: lf.middle(),
    })
}

/// Multi-source BFS fill of invalid pixels; all zero when nothing is valid.
fn fill_nearest(values: &mut [f32], valid: &[bool], height: usize, width: usize) {
    let mut done = valid.to_vec();
    let mut queue: VecDeque<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    if queue.is_empty() {
        values.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    while let Some(i) = queue.pop_front() {
        let (u, v) = (i / width, i % width);
        let mut visit = |j: usize| {
            if !done[j] {
                done[j] = true;
                values[j] = values[i];
                queue.push_back(j);
            }
        };
        if u > 0 {
            visit(i - width);
        }
        if u + 1 < height {
            visit(i + width);
        }
        if v > 0 {
            visit(i - 1);
        }
        if v + 1 < width {
            visit(i + 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::Dims;
    use crate::synthgen::{generate, ObjectSpec, SceneSpec, Shape};
    use image::RgbImage;

    /// Smooth 1-D noise sampled at continuous positions.
    fn texture_1d(x: f64) -> f64 {
        let h = |i: i64| ((i.wrapping_mul(2654435761) ^ 0x5bd1e995) % 1000) as f64 / 1000.0;
        let cell = 5.0;
        let (i, f) = ((x / cell).floor() as i64, (x / cell).fract().rem_euclid(1.0));
        let s = f * f * (3.0 - 2.0 * f);
        h(i) + (h(i + 1) - h(i)) * s
    }

    fn sheared_epi(d: f64, views: usize, width: usize) -> EpiSlice {
        let mid = (views / 2) as f64;
        // u_i = u_m + d (s_m - i): intensity at (i, u) is that of u_m = u - d (mid - i).
        let samples = Plane::from_fn(views, width, |i, u| texture_1d(u as f64 + 100.0 - d * (mid - i as f64)) as f32);
        EpiSlice { samples, axis: EpiAxis::Horizontal }
    }

    fn median(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    }

    fn interior_errors(d: f64) -> Vec<f64> {
        let epi = sheared_epi(d, 9, 128);
        let o = epi_orientation(&epi, 0.8, 1.6);
        let margin = (2.0 * 1.6f64).ceil() as usize + (d.abs() * 4.0) as usize;
        (margin..128 - margin).map(|u| (-(*o.slope.get(4, u) as f64) - d).abs()).collect()
    }

    #[test]
    fn constant_epi_has_zero_coherence() {
        let epi = EpiSlice { samples: Plane::filled(9, 32, 0.5), axis: EpiAxis::Vertical };
        let o = epi_orientation(&epi, 0.8, 1.6);
        assert!(o.coherence.as_slice().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn sheared_texture_recovers_shear() {
        assert!(median(interior_errors(1.0)) <= 0.1, "d=1 median {}", median(interior_errors(1.0)));
        assert!(median(interior_errors(-2.0)) <= 0.15, "d=-2 median {}", median(interior_errors(-2.0)));
    }

    #[test]
    fn tensor_is_positive_semidefinite() {
        let epi = sheared_epi(1.3, 9, 64);
        let t = structure_tensor(&epi, 0.8, 1.6);
        for i in 0..t.j_uu.as_slice().len() {
            let (a, b, c) = (t.j_uu.as_slice()[i] as f64, t.j_us.as_slice()[i] as f64, t.j_ss.as_slice()[i] as f64);
            assert!(a >= 0.0 && c >= 0.0 && a * c - b * b >= -1e-9);
        }
    }

    #[test]
    fn derivative_taps_are_exact_on_ramps() {
        let dg = gaussian_derivative(0.8);
        let ramp: Vec<f64> = (0..20).map(|x| 3.0 * x as f64).collect();
        let out = correlate(&ramp, 1, 20, &dg, false);
        assert!((out[10] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flat_light_field_gives_zero_disparity() {
        let lf = LightField::new(5, 5, vec![RgbImage::from_pixel(20, 12, image::Rgb([128, 128, 128])); 25], None).unwrap();
        let dm = estimate_disparity(&lf, &DisparityParams::default()).unwrap();
        assert!(dm.values.as_slice().iter().all(|&x| x == 0.0));
        assert!(dm.coherence.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_few_views_is_an_error() {
        let lf = LightField::new(2, 1, vec![RgbImage::new(4, 4); 2], None).unwrap();
        assert_eq!(estimate_disparity(&lf, &DisparityParams::default()), Err(DisparityError::TooFewViews(2, 1)));
        // One usable axis is enough.
        let lf = LightField::new(1, 5, vec![RgbImage::new(4, 4); 5], None).unwrap();
        assert!(estimate_disparity(&lf, &DisparityParams::default()).is_ok());
    }

    fn plane_scene(d: f64) -> crate::synthgen::SyntheticScene {
        generate(&SceneSpec::plane(Dims::new(9, 9, 64, 64), d, 21)).unwrap()
    }

    #[test]
    fn textured_plane_disparity() {
        let scene = plane_scene(1.0);
        let dm = estimate_disparity(&scene.lf, &DisparityParams::default()).unwrap();
        let good = dm.values.as_slice().iter().filter(|&&x| (x - 1.0).abs() <= 0.2).count();
        assert!(good as f64 >= 0.9 * dm.values.as_slice().len() as f64, "{good}");
    }

    #[test]
    fn brightness_scaling_is_invariant() {
        let scene = plane_scene(-1.0);
        let params = DisparityParams::default();
        let base = estimate_disparity(&scene.lf, &params).unwrap();
        let dimmed: Vec<RgbImage> = scene
            .lf
            .views()
            .iter()
            .map(|img| {
                let mut out = img.clone();
                out.pixels_mut().for_each(|p| p.0.iter_mut().for_each(|c| *c /= 2));
                out
            })
            .collect();
        let lf2 = LightField::new(9, 9, dimmed, None).unwrap();
        let other = estimate_disparity(&lf2, &params).unwrap();
        // Halving 8-bit values quantizes; compare medians of the field.
        let m1 = median(base.values.as_slice().iter().map(|&x| x as f64).collect());
        let m2 = median(other.values.as_slice().iter().map(|&x| x as f64).collect());
        assert!((m1 - m2).abs() < 0.02, "{m1} vs {m2}");
    }

    #[test]
    fn exact_brightness_scaling_leaves_estimates_unchanged() {
        let epi = sheared_epi(0.7, 9, 48);
        let scaled = EpiSlice {
            samples: Plane::from_vec(9, 48, epi.samples.as_slice().iter().map(|x| x * 0.25).collect()).unwrap(),
            axis: epi.axis,
        };
        let a = epi_orientation(&epi, 0.8, 1.6);
        let b = epi_orientation(&scaled, 0.8, 1.6);
        for (x, y) in a.slope.as_slice().iter().zip(b.slope.as_slice()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn mirroring_spatial_axes_negates_disparity() {
        let scene = plane_scene(1.0);
        let d = scene.lf.dims();
        let mirrored: Vec<RgbImage> = scene.lf.views().iter().map(image::imageops::rotate180).collect();
        let lf_m = LightField::new(d.views_s, d.views_t, mirrored, None).unwrap();
        let params = DisparityParams::default();
        let mean = |dm: &DisparityMap| dm.values.as_slice().iter().map(|&x| x as f64).sum::<f64>() / (d.pixels_per_view() as f64);
        let a = mean(&estimate_disparity(&scene.lf, &params).unwrap());
        let b = mean(&estimate_disparity(&lf_m, &params).unwrap());
        assert!((a + b).abs() < 0.05, "{a} vs {b}");

        // Mirroring views as well as pixels restores the original parallax.
        let both: Vec<RgbImage> = (0..d.num_views())
            .map(|i| image::imageops::rotate180(&scene.lf.views()[d.num_views() - 1 - i]))
            .collect();
        let lf_b = LightField::new(d.views_s, d.views_t, both, None).unwrap();
        let c = mean(&estimate_disparity(&lf_b, &params).unwrap());
        assert!((a - c).abs() < 0.05, "{a} vs {c}");
    }

    #[test]
    fn two_layer_scene() {
        let mut spec = SceneSpec::plane(Dims::new(9, 9, 64, 64), 0.0, 5);
        spec.objects.push(ObjectSpec {
            shape: Shape::Rect { u0: 20.0, v0: 20.0, height: 24.0, width: 24.0 },
            disparity: 2.0,
            feature_seed: 1,
            texture_seed: 2,
        });
        let scene = generate(&spec).unwrap();
        let dm = estimate_disparity(&scene.lf, &DisparityParams::default()).unwrap();
        let truth = scene.middle_disparity();
        let mut errs = Vec::new();
        for u in 0..64 {
            for v in 0..64 {
                let near_edge = (u as i64 - 20).abs() <= 3 || (u as i64 - 43).abs() <= 3 || (v as i64 - 20).abs() <= 3 || (v as i64 - 43).abs() <= 3;
                let inside_band = (17..=46).contains(&u) && (17..=46).contains(&v);
                if near_edge && inside_band {
                    continue;
                }
                errs.push((dm.at(u, v) - truth.at(u, v)).abs() as f64);
            }
        }
        assert!(median(errs) <= 0.3);
    }

    #[test]
    fn disparity_sign_flips_output() {
        let scene = plane_scene(1.0);
        let plus = estimate_disparity(&scene.lf, &DisparityParams::default()).unwrap();
        let minus = estimate_disparity(&scene.lf, &DisparityParams { disparity_sign: -1.0, ..Default::default() }).unwrap();
        for (a, b) in plus.values.as_slice().iter().zip(minus.values.as_slice()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn fill_uses_nearest_valid_pixel() {
        let mut values = vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0];
        let valid = vec![false, false, true, false, false, false, false, false, true];
        fill_nearest(&mut values, &valid, 3, 3);
        assert_eq!(values, vec![5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 9.0, 9.0, 9.0]);
    }
}
