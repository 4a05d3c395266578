//! Procedural layered light field scenes with exact ground truth.
//!
//! A scene is a textured background plane plus flat objects, each at its own
//! disparity. Objects are defined in middle-view coordinates and forward
//! projected into every view, painted back to front by ascending disparity so
//! nearer layers win. Alongside the images the generator produces per-view
//! labels and disparities, per-pixel feature vectors, and per-object
//! visibility, so every pipeline stage has a reference answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::FeatureMap;
use crate::features::DenseFeatures;
use crate::lf::{project_point, round_to_pixel, Dims, GroundTruth, LabelMap, LightField, Plane, ViewIndex, ViewMask};

pub use crate::features::downsample_features;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
}

/// Object footprint in middle-view pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Pixels with `u0 <= u < u0 + height` and `v0 <= v < v0 + width`.
    Rect { u0: f64, v0: f64, height: f64, width: f64 },
    /// Pixels with `(u - cu)^2 + (v - cv)^2 <= radius^2`.
    Disc { cu: f64, cv: f64, radius: f64 },
}

impl Shape {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Rect { u0, v0, height, width } => u >= u0 && u < u0 + height && v >= v0 && v < v0 + width,
            Shape::Disc { cu, cv, radius } => (u - cu).powi(2) + (v - cv).powi(2) <= radius * radius,
        }
    }

    /// Bounds `(u_min, v_min, u_max, v_max)` of the continuous shape.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { u0, v0, height, width } => (u0, v0, u0 + height, v0 + width),
            Shape::Disc { cu, cv, radius } => (cu - radius, cv - radius, cu + radius, cv + radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub disparity: f64,
    pub feature_seed: u64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub disparity: f64,
    pub feature_seed: u64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: Dims,
    pub objects: Vec<ObjectSpec>,
    pub background: BackgroundSpec,
    pub feature_dim: usize,
    pub patch_grid: usize,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Allows non-integer disparities; forward projection then rounds.
    #[serde(default)]
    pub subpixel: bool,
}

/// Minimum disparity gap between an object and the background.
pub const MIN_LAYER_GAP: f64 = 0.5;

impl SceneSpec {
    /// Background-only scene.
    pub fn plane(dims: Dims, disparity: f64, seed: u64) -> Self {
        Self {
            dims,
            objects: Vec::new(),
            background: BackgroundSpec { disparity, feature_seed: seed, texture_seed: seed ^ 0xb6 },
            feature_dim: 16,
            patch_grid: 16,
            noise_sigma: 0.01,
            rng_seed: seed,
            subpixel: disparity.fract() != 0.0,
        }
    }

    /// Randomly placed rects and discs whose middle-view bounds keep a small gap.
    ///
    /// The background sits at disparity -1 and objects at 0, 1 or 2.
    pub fn random(dims: Dims, num_objects: usize, seed: u64) -> Result<Self, SceneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::plane(dims, -1.0, seed);
        let (s_m, t_m) = (dims.views_s / 2, dims.views_t / 2);
        let reach_s = s_m.max(dims.views_s - 1 - s_m) as f64;
        let reach_t = t_m.max(dims.views_t - 1 - t_m) as f64;
        let min_side = dims.height.min(dims.width) as f64;
        let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut attempts = 0;
        while spec.objects.len() < num_objects {
            attempts += 1;
            if attempts > 20_000 {
                return Err(SceneError::Invalid(format!(
                    "could not place {num_objects} objects in a {}x{} frame",
                    dims.height, dims.width
                )));
            }
            let disparity = rng.random_range(0..=2) as f64;
            let size = rng.random_range((min_side * 0.14).max(6.0)..(min_side * 0.27).max(7.0)).round();
            let margin_u = disparity.abs() * reach_s + 1.0;
            let margin_v = disparity.abs() * reach_t + 1.0;
            let (hi_u, hi_v) = (dims.height as f64 - margin_u - size, dims.width as f64 - margin_v - size);
            if hi_u <= margin_u || hi_v <= margin_v {
                continue;
            }
            let u0 = rng.random_range(margin_u..hi_u).round();
            let v0 = rng.random_range(margin_v..hi_v).round();
            let shape = if rng.random_bool(0.5) {
                let height = (size * rng.random_range(0.7..1.0)).round();
                Shape::Rect { u0, v0, height, width: size }
            } else {
                let r = (size / 2.0).floor();
                Shape::Disc { cu: u0 + r, cv: v0 + r, radius: r }
            };
            let (a0, b0, a1, b1) = shape.extent();
            let gap = 3.0;
            if placed.iter().any(|&(c0, d0, c1, d1)| a0 < c1 + gap && c0 < a1 + gap && b0 < d1 + gap && d0 < b1 + gap) {
                continue;
            }
            placed.push((a0, b0, a1, b1));
            spec.objects.push(ObjectSpec {
                shape,
                disparity,
                feature_seed: rng.random(),
                texture_seed: rng.random(),
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    /// A far square directly below a wider near bar. In views above the middle
    /// row the bar slides down over roughly 30% of the square.
    pub fn occluder(dims: Dims, seed: u64) -> Result<Self, SceneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1);
        let mut spec = Self::plane(dims, -1.0, seed);
        let reach = (dims.views_s / 2) as f64;
        let near_d = 3.0;
        let far_d = 0.0;
        let shift = (near_d - far_d) * reach;
        let side = (shift / 0.3).round();
        let bar_h = (shift + 2.0).round();
        let bar_w = side + 2.0 * shift;
        let v_jitter = rng.random_range(-3..=3) as f64;
        let u0 = ((dims.height as f64 - side - bar_h) / 2.0).round() + bar_h / 2.0;
        let v0 = ((dims.width as f64 - side) / 2.0).round() + v_jitter;
        spec.objects.push(ObjectSpec {
            shape: Shape::Rect { u0, v0, height: side, width: side },
            disparity: far_d,
            feature_seed: rng.random(),
            texture_seed: rng.random(),
        });
        spec.objects.push(ObjectSpec {
            shape: Shape::Rect { u0: u0 - bar_h, v0: v0 - shift, height: bar_h, width: bar_w },
            disparity: near_d,
            feature_seed: rng.random(),
            texture_seed: rng.random(),
        });
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let d = &self.dims;
        let bad = |msg: String| Err(SceneError::Invalid(msg));
        if d.views_s == 0 || d.views_t == 0 || d.height == 0 || d.width == 0 {
            return bad(format!("empty dimensions {d:?}"));
        }
        if self.feature_dim == 0 || self.patch_grid == 0 {
            return bad("feature_dim and patch_grid must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if self.objects.len() >= u16::MAX as usize {
            return bad("too many objects".into());
        }
        let bg = self.background.disparity;
        if !bg.is_finite() || (!self.subpixel && bg.fract() != 0.0) {
            return bad(format!("background disparity {bg} must be a finite integer unless subpixel is set"));
        }
        let middle = d.default_middle();
        for (k, obj) in self.objects.iter().enumerate() {
            let od = obj.disparity;
            if !od.is_finite() || (!self.subpixel && od.fract() != 0.0) {
                return bad(format!("object {k} disparity {od} must be a finite integer unless subpixel is set"));
            }
            if od < bg + MIN_LAYER_GAP {
                return bad(format!("object {k} disparity {od} must exceed the background {bg} by {MIN_LAYER_GAP}"));
            }
            let Some((u0, v0, u1, v1)) = footprint_of(&obj.shape, d.height, d.width).bounding_box() else {
                return bad(format!("object {k} covers no pixel of the middle view"));
            };
            for (s, t) in [(0, 0), (0, d.views_t - 1), (d.views_s - 1, 0), (d.views_s - 1, d.views_t - 1)] {
                let view = ViewIndex::new(s, t);
                for (u, v) in [(u0, v0), (u1, v1)] {
                    if round_to_pixel(project_point((u as f64, v as f64), od, view, middle), d.height, d.width)
                        .is_none()
                    {
                        return bad(format!("object {k} leaves the frame in view {view}"));
                    }
                }
            }
            if let Shape::Rect { u0, v0, height, width } = obj.shape {
                if u0 < 0.0 || v0 < 0.0 || u0 + height > d.height as f64 || v0 + width > d.width as f64 {
                    return bad(format!("object {k} leaves the middle view"));
                }
            }
        }
        Ok(())
    }
}

/// In-frame middle-view pixels covered by a shape.
fn footprint_of(shape: &Shape, height: usize, width: usize) -> ViewMask {
    let (a0, b0, a1, b1) = shape.extent();
    let mut mask = ViewMask::empty(height, width);
    let lo_u = a0.floor().max(0.0) as usize;
    let lo_v = b0.floor().max(0.0) as usize;
    let hi_u = (a1.ceil() as usize + 1).min(height);
    let hi_v = (b1.ceil() as usize + 1).min(width);
    for u in lo_u..hi_u {
        for v in lo_v..hi_v {
            if shape.contains(u as f64, v as f64) {
                mask.set(u, v);
            }
        }
    }
    mask
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn lattice(seed: u64, iu: i64, iv: i64) -> f64 {
    let h = mix64(seed ^ mix64(iu as u64 ^ mix64(iv as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothed value noise in `[0, 1)` with lattice spacing `cell`.
fn value_noise(seed: u64, u: f64, v: f64, cell: f64) -> f64 {
    let (x, y) = (u / cell, v / cell);
    let (ix, iy) = (x.floor(), y.floor());
    let (fx, fy) = (x - ix, y - iy);
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (ix, iy) = (ix as i64, iy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix, iy + 1);
    let c = lattice(seed, ix + 1, iy);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sy;
    let bottom = c + (d - c) * sy;
    top + (bottom - top) * sx
}

/// Colour of a surface at middle-view coordinates `(u, v)`.
pub fn texture(seed: u64, u: f64, v: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let cs = mix64(seed.wrapping_add(c as u64 * 0x1000_0001));
        let base = 60.0 + 135.0 * lattice(cs, -7, 3);
        let n = 90.0 * (value_noise(cs, u, v, 7.0) - 0.5) + 50.0 * (value_noise(cs ^ 0x55, u, v, 4.0) - 0.5);
        *o = (base + n).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Rendered scene with ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub lf: LightField,
    pub gt: GroundTruth,
    /// Unit feature vector per label (`0` is the background).
    pub layer_vectors: Vec<Vec<f32>>,
    /// Pooled `P x P x K` feature map per view, row-major view order.
    pub features: Vec<FeatureMap>,
    footprints: Vec<ViewMask>,
}

/// Random unit vectors per layer, Gram-Schmidt orthogonalized when `dim` allows.
fn layer_vectors(spec: &SceneSpec) -> Vec<Vec<f32>> {
    let seeds = std::iter::once(spec.background.feature_seed).chain(spec.objects.iter().map(|o| o.feature_seed));
    let raw: Vec<Vec<f64>> = seeds
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let orthogonalize = spec.feature_dim >= raw.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    for mut v in raw {
        if orthogonalize {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect()
}

struct RenderedView {
    image: image::RgbImage,
    labels: LabelMap,
    disparity: Plane<f32>,
}

fn render_view(spec: &SceneSpec, footprints: &[ViewMask], view: ViewIndex) -> RenderedView {
    let d = spec.dims;
    let middle = d.default_middle();
    let mut image = image::RgbImage::new(d.width as u32, d.height as u32);
    let bg = &spec.background;
    let mut labels = Plane::filled(d.height, d.width, 0u16);
    let mut disparity = Plane::filled(d.height, d.width, bg.disparity as f32);
    for u in 0..d.height {
        for v in 0..d.width {
            // Inverse projection of the background plane.
            let (um, vm) = project_point((u as f64, v as f64), -bg.disparity, view, middle);
            image.put_pixel(v as u32, u as u32, image::Rgb(texture(bg.texture_seed, um, vm)));
        }
    }
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[a].disparity.total_cmp(&spec.objects[b].disparity).then(a.cmp(&b)));
    for k in order {
        let obj = &spec.objects[k];
        for (um, vm) in footprints[k].iter_set() {
            let q = project_point((um as f64, vm as f64), obj.disparity, view, middle);
            if let Some((u, v)) = round_to_pixel(q, d.height, d.width) {
                image.put_pixel(v as u32, u as u32, image::Rgb(texture(obj.texture_seed, um as f64, vm as f64)));
                *labels.get_mut(u, v) = k as u16 + 1;
                *disparity.get_mut(u, v) = obj.disparity as f32;
            }
        }
    }
    RenderedView { image, labels, disparity }
}

/// Renders the scene described by `spec`. Deterministic for a given spec.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let d = spec.dims;
    let footprints: Vec<ViewMask> =
        spec.objects.iter().map(|o| footprint_of(&o.shape, d.height, d.width)).collect();
    let rendered: Vec<RenderedView> =
        (0..d.num_views()).into_par_iter().map(|i| render_view(spec, &footprints, d.view_at(i))).collect();
    let mut images = Vec::with_capacity(rendered.len());
    let mut labels = Vec::with_capacity(rendered.len());
    let mut disparity = Vec::with_capacity(rendered.len());
    for r in rendered {
        images.push(r.image);
        labels.push(r.labels);
        disparity.push(r.disparity);
    }
    let lf = LightField::new(d.views_s, d.views_t, images, None).map_err(|e| SceneError::Invalid(e.to_string()))?;
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        lf,
        gt: GroundTruth { labels, disparity: Some(disparity) },
        layer_vectors: layer_vectors(spec),
        features: Vec::new(),
        footprints,
    };
    scene.features = (0..d.num_views())
        .into_par_iter()
        .map(|i| downsample_features(&scene.feature_image(d.view_at(i)), spec.patch_grid))
        .collect();
    Ok(scene)
}

impl SyntheticScene {
    pub fn dims(&self) -> Dims {
        self.spec.dims
    }

    /// Per-pixel features of a view: the visible layer's unit vector plus
    /// Gaussian noise of `noise_sigma` per component.
    pub fn feature_image(&self, view: ViewIndex) -> DenseFeatures {
        let d = self.spec.dims;
        let k = self.spec.feature_dim;
        let labels = self.gt.labels_at(&d, view);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.rng_seed);
        rng.set_stream(d.view_offset(view) as u64 + 1);
        let noise = Normal::new(0.0, self.spec.noise_sigma).expect("validated sigma");
        let mut data = Vec::with_capacity(d.pixels_per_view() * k);
        for &l in labels.as_slice() {
            for &x in &self.layer_vectors[l as usize] {
                let n: f64 = if self.spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(x + n as f32);
            }
        }
        DenseFeatures::new(d.height, d.width, k, data).expect("sized from dims")
    }

    /// Middle-view pixels covered by object `index` (including parts hidden in the middle view).
    pub fn footprint(&self, index: usize) -> &ViewMask {
        &self.footprints[index]
    }

    /// Footprint pixels of object `index` that remain visible once projected into `view`.
    pub fn visibility(&self, index: usize, view: ViewIndex) -> ViewMask {
        let d = self.spec.dims;
        let middle = d.default_middle();
        let labels = self.gt.labels_at(&d, view);
        let disparity = self.spec.objects[index].disparity;
        let mut out = ViewMask::empty(d.height, d.width);
        for (u, v) in self.footprints[index].iter_set() {
            let q = project_point((u as f64, v as f64), disparity, view, middle);
            if let Some((qu, qv)) = round_to_pixel(q, d.height, d.width) {
                if *labels.get(qu, qv) == index as u16 + 1 {
                    out.set(u, v);
                }
            }
        }
        out
    }

    /// Ground-truth disparity of the middle view.
    pub fn middle_disparity(&self) -> crate::lf::DisparityMap {
        let d = self.spec.dims;
        let middle = self.lf.middle();
        let values = self.gt.disparity_at(&d, middle).expect("synthetic scenes carry disparity").clone();
        crate::lf::DisparityMap::from_values(values, middle)
    }

    /// Fraction of light field pixels carrying a non-zero label.
    pub fn labeled_fraction(&self) -> f64 {
        let total: usize = self.gt.labels.iter().map(|l| l.as_slice().len()).sum();
        let labeled: usize = self.gt.labels.iter().map(|l| l.as_slice().iter().filter(|&&x| x != 0).count()).sum();
        labeled as f64 / total as f64
    }
}
