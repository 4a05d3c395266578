//! Dense per-pixel feature fields and resampling to and from patch grids.

use crate::backend::FeatureMap;

/// Per-pixel feature vectors of one subview, row-major `(u, v, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatures {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

/// Anything that can produce the feature vector of a pixel.
pub trait FeatureField: Sync {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn dim(&self) -> usize;
    /// Writes the vector of pixel `(u, v)` into `out` (length `dim`).
    fn vector_into(&self, u: usize, v: usize, out: &mut [f32]);
}

impl DenseFeatures {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == height * width * dim && dim > 0).then_some(Self { height, width, dim, data })
    }

    pub fn filled(height: usize, width: usize, vector: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * vector.len());
        for _ in 0..height * width {
            data.extend_from_slice(vector);
        }
        Self { height, width, dim: vector.len(), data }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn vector(&self, u: usize, v: usize) -> &[f32] {
        let start = (u * self.width + v) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self { data: self.data.iter().map(|x| x * factor).collect(), ..self.clone() }
    }
}

impl FeatureField for DenseFeatures {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    fn vector_into(&self, u: usize, v: usize, out: &mut [f32]) {
        out.copy_from_slice(self.vector(u, v));
    }
}

/// Bilinear interpolation taps along one axis: `(lo, hi, frac)`.
///
/// Patch `p` of `grid` patches over `extent` pixels is centred at
/// `(p + 0.5) * extent / grid - 0.5`; positions beyond the outer centres clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn axis_tap(pos: f64, extent: usize, grid: usize) -> Tap {
    // Pixel coordinate to continuous grid coordinate.
    let x = (pos + 0.5) * grid as f64 / extent as f64 - 0.5;
    let x = x.clamp(0.0, (grid - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(grid - 1);
    Tap { lo, hi, frac: (x - lo as f64) as f32 }
}

fn axis_taps(extent: usize, grid: usize) -> Vec<Tap> {
    (0..extent).map(|i| axis_tap(i as f64, extent, grid)).collect()
}

#[inline]
fn blend(fm: &FeatureMap, tu: Tap, tv: Tap, out: &mut [f32]) {
    let a = fm.vector(tu.lo, tv.lo);
    let b = fm.vector(tu.lo, tv.hi);
    let c = fm.vector(tu.hi, tv.lo);
    let d = fm.vector(tu.hi, tv.hi);
    let (fu, fv) = (tu.frac, tv.frac);
    for k in 0..out.len() {
        let top = a[k] + fv * (b[k] - a[k]);
        let bottom = c[k] + fv * (d[k] - c[k]);
        out[k] = top + fu * (bottom - top);
    }
}

/// Evaluates the bilinear upsampling of `fm` at a continuous pixel position.
pub fn sample_bilinear(fm: &FeatureMap, height: usize, width: usize, u: f64, v: f64) -> Vec<f32> {
    let p = fm.patch_grid();
    let mut out = vec![0.0; fm.embed_dim()];
    blend(fm, axis_tap(u, height, p), axis_tap(v, width, p), &mut out);
    out
}

/// Lazily upsampled view of a patch grid; evaluates only requested pixels.
#[derive(Debug, Clone)]
pub struct UpsampledFeatures<'a> {
    map: &'a FeatureMap,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl<'a> UpsampledFeatures<'a> {
    pub fn new(map: &'a FeatureMap, height: usize, width: usize) -> Self {
        Self {
            map,
            rows: axis_taps(height, map.patch_grid()),
            cols: axis_taps(width, map.patch_grid()),
        }
    }
}

impl FeatureField for UpsampledFeatures<'_> {
    fn height(&self) -> usize {
        self.rows.len()
    }
    fn width(&self) -> usize {
        self.cols.len()
    }
    fn dim(&self) -> usize {
        self.map.embed_dim()
    }
    #[inline]
    fn vector_into(&self, u: usize, v: usize, out: &mut [f32]) {
        blend(self.map, self.rows[u], self.cols[v], out);
    }
}

/// Materializes the bilinear upsampling of `fm` to `height x width` pixels.
pub fn densify_features(fm: &FeatureMap, height: usize, width: usize) -> DenseFeatures {
    let up = UpsampledFeatures::new(fm, height, width);
    let k = fm.embed_dim();
    let mut data = vec![0.0f32; height * width * k];
    for (i, chunk) in data.chunks_exact_mut(k).enumerate() {
        up.vector_into(i / width, i % width, chunk);
    }
    DenseFeatures { height, width, dim: k, data }
}

/// Pools a dense feature image into a `P x P` grid by area-weighted block means.
///
/// Patch `(p, q)` covers rows `[p U / P, (p+1) U / P)` and columns
/// `[q V / P, (q+1) V / P)` in continuous coordinates; pixels cut by a block
/// edge contribute in proportion to their covered area.
pub fn downsample_features(dense: &DenseFeatures, patch_grid: usize) -> FeatureMap {
    assert!(patch_grid >= 1, "patch grid must be positive");
    let (h, w, k) = (dense.height, dense.width, dense.dim);
    let row_cover = coverage(h, patch_grid);
    let col_cover = coverage(w, patch_grid);
    let mut data = vec![0.0f32; patch_grid * patch_grid * k];
    let mut acc = vec![0.0f64; k];
    for p in 0..patch_grid {
        for q in 0..patch_grid {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut total = 0.0f64;
            for &(u, wu) in &row_cover[p] {
                for &(v, wv) in &col_cover[q] {
                    let wgt = wu * wv;
                    total += wgt;
                    for (a, x) in acc.iter_mut().zip(dense.vector(u, v)) {
                        *a += wgt * *x as f64;
                    }
                }
            }
            let out = &mut data[(p * patch_grid + q) * k..][..k];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = (a / total) as f32;
            }
        }
    }
    FeatureMap::new(patch_grid, k, data).expect("pooled features are finite")
}

/// For each of `grid` blocks over `extent` pixels, the covered pixels and their overlap length.
fn coverage(extent: usize, grid: usize) -> Vec<Vec<(usize, f64)>> {
    let step = extent as f64 / grid as f64;
    (0..grid)
        .map(|p| {
            let lo = p as f64 * step;
            let hi = (p + 1) as f64 * step;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(extent).max(first + 1);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i.min(extent - 1), overlap))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(p: usize, k: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(p, k, (0..p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn densify_at_native_resolution_is_identity() {
        let fm = random_map(5, 3, 1);
        let dense = densify_features(&fm, 5, 5);
        for u in 0..5 {
            for v in 0..5 {
                assert_eq!(dense.vector(u, v), fm.vector(u, v));
            }
        }
    }

    #[test]
    fn densify_constant_grid_is_constant() {
        let fm = FeatureMap::filled(3, 4, 0.25);
        let dense = densify_features(&fm, 11, 7);
        assert!(dense.as_slice().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn upsampled_interpolant_hits_grid_values_at_patch_centres() {
        let fm = random_map(4, 8, 2);
        for p in 0..4 {
            for q in 0..4 {
                let (cu, cv) = ((p as f64 + 0.5) * 4.0 - 0.5, (q as f64 + 0.5) * 4.0 - 0.5);
                assert_eq!(sample_bilinear(&fm, 16, 16, cu, cv), fm.vector(p, q));
            }
        }
        // Integer pixels of the dense field agree with the continuous interpolant.
        let dense = densify_features(&fm, 16, 16);
        for u in 0..16 {
            for v in 0..16 {
                assert_eq!(dense.vector(u, v), sample_bilinear(&fm, 16, 16, u as f64, v as f64).as_slice());
            }
        }
    }

    #[test]
    fn lazy_and_dense_upsampling_agree() {
        let fm = random_map(3, 5, 3);
        let dense = densify_features(&fm, 10, 13);
        let lazy = UpsampledFeatures::new(&fm, 10, 13);
        let mut out = vec![0.0; 5];
        for u in 0..10 {
            for v in 0..13 {
                lazy.vector_into(u, v, &mut out);
                assert_eq!(out.as_slice(), dense.vector(u, v));
            }
        }
    }

    #[test]
    fn downsample_constant_and_global_mean() {
        let dense = DenseFeatures::filled(9, 6, &[1.0, -2.0]);
        let fm = downsample_features(&dense, 4);
        assert!(fm.as_slice().chunks(2).all(|c| (c[0] - 1.0).abs() < 1e-6 && (c[1] + 2.0).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..7 * 5 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let dense = DenseFeatures::new(7, 5, 3, data.clone()).unwrap();
        let fm = downsample_features(&dense, 1);
        for k in 0..3 {
            let mean: f64 = data.iter().skip(k).step_by(3).map(|&x| x as f64).sum::<f64>() / 35.0;
            assert!((fm.vector(0, 0)[k] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_matches_brute_force_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, k, p) = (16, 16, 3, 4);
        let data: Vec<f32> = (0..h * w * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = DenseFeatures::new(h, w, k, data).unwrap();
        let fm = downsample_features(&dense, p);
        for bp in 0..p {
            for bq in 0..p {
                for kk in 0..k {
                    let mut sum = 0.0f64;
                    for u in bp * 4..bp * 4 + 4 {
                        for v in bq * 4..bq * 4 + 4 {
                            sum += dense.vector(u, v)[kk] as f64;
                        }
                    }
                    assert!((fm.vector(bp, bq)[kk] as f64 - sum / 16.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn downsample_weights_fractional_blocks_by_area() {
        // 3 pixels into 2 blocks: block 0 = px0 + half of px1, block 1 = half px1 + px2.
        let dense = DenseFeatures::new(1, 3, 1, vec![0.0, 3.0, 6.0]).unwrap();
        let fm = downsample_features(&dense, 2);
        // Rows: a single pixel row split into 2 blocks of half height each; each block sees the full row.
        assert!((fm.vector(0, 0)[0] - 1.0).abs() < 1e-6);
        assert!((fm.vector(0, 1)[0] - 5.0).abs() < 1e-6);
    }
}
