//! Ground-truth driven segmenter.
//!
//! Answers prompts with the exact label mask of the segment under the prompt
//! point, so pipeline runs on synthetic scenes have a known correct answer.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    amg_grid_axis, check_image, BackendError, BackendInfo, FeatureMap, Prompt, SegmentResult, SegmenterBackend,
    Session, SessionRegistry,
};
use crate::features::{downsample_features, DenseFeatures};
use crate::lf::{round_to_pixel, Dims, GroundTruth, LabelMap, LightField, ViewIndex, ViewMask};

pub struct OracleBackend {
    dims: Dims,
    info: BackendInfo,
    views: Vec<RgbImage>,
    labels: Vec<LabelMap>,
    features: Vec<Arc<FeatureMap>>,
    by_content: HashMap<u64, Vec<usize>>,
    sessions: SessionRegistry<usize>,
}

fn fingerprint(image: &RgbImage) -> u64 {
    let mut h = DefaultHasher::new();
    (image.width(), image.height()).hash(&mut h);
    image.as_raw().hash(&mut h);
    h.finish()
}

impl OracleBackend {
    /// `features` holds one map per view in row-major view order.
    pub fn new(lf: &LightField, gt: &GroundTruth, features: Vec<FeatureMap>) -> Result<Self, BackendError> {
        let dims = lf.dims();
        if gt.labels.len() != dims.num_views() || features.len() != dims.num_views() {
            return Err(BackendError::Input(format!(
                "oracle needs {} label maps and feature maps, got {} and {}",
                dims.num_views(),
                gt.labels.len(),
                features.len()
            )));
        }
        if let Some(bad) = gt.labels.iter().position(|l| l.height() != dims.height || l.width() != dims.width) {
            return Err(BackendError::Input(format!("label map of view {} has wrong size", dims.view_at(bad))));
        }
        let info = BackendInfo { patch_grid: features[0].patch_grid(), embed_dim: features[0].embed_dim() };
        if features.iter().any(|f| f.patch_grid() != info.patch_grid || f.embed_dim() != info.embed_dim) {
            return Err(BackendError::Input("feature maps disagree on P or K".into()));
        }
        let mut by_content: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, img) in lf.views().iter().enumerate() {
            by_content.entry(fingerprint(img)).or_default().push(i);
        }
        Ok(Self {
            dims,
            info,
            views: lf.views().to_vec(),
            labels: gt.labels.clone(),
            features: features.into_iter().map(Arc::new).collect(),
            by_content,
            sessions: SessionRegistry::new(),
        })
    }

    /// Oracle whose features are derived from the labels alone: every label gets
    /// a fixed pseudo-random unit vector, pooled to a `patch_grid` grid.
    pub fn with_label_features(
        lf: &LightField,
        gt: &GroundTruth,
        patch_grid: usize,
        embed_dim: usize,
    ) -> Result<Self, BackendError> {
        let features = gt
            .labels
            .iter()
            .map(|labels| downsample_features(&label_feature_image(labels, embed_dim), patch_grid))
            .collect();
        Self::new(lf, gt, features)
    }

    /// Number of sessions not yet released.
    pub fn live_sessions(&self) -> usize {
        self.sessions.len()
    }

    fn resolve_view(&self, image: &RgbImage, view: Option<ViewIndex>) -> Result<usize, BackendError> {
        if let Some(view) = view {
            if !self.dims.contains_view(view) {
                return Err(BackendError::Input(format!("view {view} outside the oracle scene")));
            }
            return Ok(self.dims.view_offset(view));
        }
        self.by_content
            .get(&fingerprint(image))
            .and_then(|candidates| candidates.iter().copied().find(|&i| self.views[i] == *image))
            .ok_or_else(|| BackendError::Input("image is not a view of the oracle scene".into()))
    }

    fn label_mask(&self, offset: usize, label: u16) -> SegmentResult {
        if label == 0 {
            return SegmentResult { mask: ViewMask::empty(self.dims.height, self.dims.width), score: 0.0 };
        }
        SegmentResult { mask: ViewMask::from_label(&self.labels[offset], label), score: 1.0 }
    }
}

/// Deterministic unit vector of a label.
pub fn label_vector(label: u16, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c61_6265_6c00 ^ label as u64);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(|x| x as f32).collect()
}

fn label_feature_image(labels: &LabelMap, dim: usize) -> DenseFeatures {
    let mut cache: HashMap<u16, Vec<f32>> = HashMap::new();
    let mut data = Vec::with_capacity(labels.as_slice().len() * dim);
    for &l in labels.as_slice() {
        data.extend_from_slice(cache.entry(l).or_insert_with(|| label_vector(l, dim)));
    }
    DenseFeatures::new(labels.height(), labels.width(), dim, data).expect("sized from labels")
}

impl SegmenterBackend for OracleBackend {
    fn info(&self) -> BackendInfo {
        self.info
    }

    fn set_image(&self, image: &RgbImage, view: Option<ViewIndex>) -> Result<Session, BackendError> {
        let (h, w) = check_image(image)?;
        if (h, w) != (self.dims.height, self.dims.width) {
            return Err(BackendError::Input(format!(
                "image is {h}x{w}, oracle scene is {}x{}",
                self.dims.height, self.dims.width
            )));
        }
        let offset = self.resolve_view(image, view)?;
        let id = self.sessions.insert(offset);
        Ok(Session { id, height: h, width: w, features: Arc::clone(&self.features[offset]) })
    }

    /// A point selects the label under it (unlabeled gives an empty mask); a
    /// box alone selects the label with the most pixels inside it.
    fn prompt(&self, session: &Session, prompt: &Prompt) -> Result<SegmentResult, BackendError> {
        let offset = self.sessions.get(session.id)?;
        prompt.validate(self.dims.height, self.dims.width)?;
        let labels = &self.labels[offset];
        if let Some(point) = prompt.point {
            let (u, v) = round_to_pixel(point, self.dims.height, self.dims.width)
                .ok_or_else(|| BackendError::Input("prompt point outside image".into()))?;
            return Ok(self.label_mask(offset, *labels.get(u, v)));
        }
        let (u0, v0, u1, v1) = prompt.bbox.expect("validated prompt has a box");
        let span = |lo: f64, hi: f64, extent: usize| {
            let first = lo.ceil().max(0.0) as i64;
            let last = (hi.floor() as i64).min(extent as i64 - 1);
            first.max(0) as usize..(last + 1).max(first) as usize
        };
        let rows = span(u0, u1, self.dims.height);
        let cols = span(v0, v1, self.dims.width);
        let mut counts: HashMap<u16, usize> = HashMap::new();
        for u in rows {
            for v in cols.clone() {
                let l = *labels.get(u, v);
                if l != 0 {
                    *counts.entry(l).or_default() += 1;
                }
            }
        }
        let best = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l);
        Ok(self.label_mask(offset, best.unwrap_or(0)))
    }

    fn auto_generate(&self, session: &Session, points_per_side: usize) -> Result<Vec<SegmentResult>, BackendError> {
        let offset = self.sessions.get(session.id)?;
        if points_per_side == 0 {
            return Err(BackendError::Input("points_per_side must be at least 1".into()));
        }
        let labels = &self.labels[offset];
        let rows = amg_grid_axis(points_per_side, self.dims.height);
        let cols = amg_grid_axis(points_per_side, self.dims.width);
        let mut seen = Vec::new();
        for &u in &rows {
            for &v in &cols {
                let l = *labels.get(u, v);
                if l != 0 && !seen.contains(&l) {
                    seen.push(l);
                }
            }
        }
        Ok(seen.into_iter().map(|l| self.label_mask(offset, l)).collect())
    }

    fn release(&self, session: &Session) -> Result<(), BackendError> {
        self.sessions.remove(session.id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::Plane;

    /// 1x3 views of 8x8; labels: 1 in the top-left 3x3, 2 in the bottom-right 4x4.
    fn fixture() -> (LightField, GroundTruth) {
        let labels = Plane::from_fn(8, 8, |u, v| {
            if u < 3 && v < 3 {
                1
            } else if u >= 4 && v >= 4 {
                2
            } else {
                0
            }
        });
        let views: Vec<RgbImage> = (0..3).map(|i| RgbImage::from_pixel(8, 8, image::Rgb([i as u8 * 10, 0, 0]))).collect();
        let lf = LightField::new(1, 3, views, None).unwrap();
        let gt = GroundTruth { labels: vec![labels; 3], disparity: None };
        (lf, gt)
    }

    #[test]
    fn point_selects_label_mask() {
        let (lf, gt) = fixture();
        let oracle = OracleBackend::with_label_features(&lf, &gt, 2, 4).unwrap();
        let s = oracle.set_image(lf.view(ViewIndex::new(0, 1)), None).unwrap();
        let r = oracle.prompt(&s, &Prompt::point(1.0, 1.0)).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.mask, ViewMask::from_label(&gt.labels[1], 1));
        let r = oracle.prompt(&s, &Prompt::point(0.0, 7.0)).unwrap();
        assert!(r.mask.is_empty());
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn point_dominates_box() {
        let (lf, gt) = fixture();
        let oracle = OracleBackend::with_label_features(&lf, &gt, 2, 4).unwrap();
        let s = oracle.set_image(lf.view(ViewIndex::new(0, 0)), None).unwrap();
        // Box covers both segments; label 2 has more pixels in it.
        let r = oracle.prompt(&s, &Prompt::point_and_box((2.0, 2.0), (0.0, 0.0, 7.0, 7.0))).unwrap();
        assert_eq!(r.mask, ViewMask::from_label(&gt.labels[0], 1));
        let box_only = Prompt { point: None, bbox: Some((0.0, 0.0, 7.0, 7.0)), point_label: true };
        assert_eq!(oracle.prompt(&s, &box_only).unwrap().mask, ViewMask::from_label(&gt.labels[0], 2));
    }

    #[test]
    fn amg_dedups_by_label() {
        let (lf, gt) = fixture();
        let oracle = OracleBackend::with_label_features(&lf, &gt, 2, 4).unwrap();
        let s = oracle.set_image(lf.view(ViewIndex::new(0, 2)), None).unwrap();
        let all = oracle.auto_generate(&s, 8).unwrap();
        assert_eq!(all.len(), 2);
        // A single centre point at (4, 4) lands on label 2.
        let one = oracle.auto_generate(&s, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].mask, ViewMask::from_label(&gt.labels[2], 2));
    }

    #[test]
    fn sessions_are_deterministic_and_released() {
        let (lf, gt) = fixture();
        let oracle = OracleBackend::with_label_features(&lf, &gt, 2, 4).unwrap();
        let a = oracle.set_image(lf.view(ViewIndex::new(0, 1)), None).unwrap();
        let b = oracle.set_image(lf.view(ViewIndex::new(0, 1)), None).unwrap();
        assert_eq!(*a.features, *b.features);
        oracle.release(&a).unwrap();
        oracle.release(&a).unwrap();
        assert!(matches!(oracle.prompt(&a, &Prompt::point(1.0, 1.0)), Err(BackendError::InvalidSession(_))));
        assert!(oracle.prompt(&b, &Prompt::point(1.0, 1.0)).is_ok());
        assert_eq!(oracle.live_sessions(), 1);
    }

    #[test]
    fn rejects_foreign_images_and_bad_prompts() {
        let (lf, gt) = fixture();
        let oracle = OracleBackend::with_label_features(&lf, &gt, 2, 4).unwrap();
        let foreign = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        assert!(matches!(oracle.set_image(&foreign, None), Err(BackendError::Input(_))));
        assert!(oracle.set_image(&RgbImage::new(0, 0), None).is_err());
        let s = oracle.set_image(&foreign, Some(ViewIndex::new(0, 0))).unwrap();
        assert!(matches!(oracle.prompt(&s, &Prompt::point(9.0, 0.0)), Err(BackendError::Input(_))));
    }

    #[test]
    fn label_vectors_are_unit_and_fixed() {
        let a = label_vector(3, 16);
        assert_eq!(a, label_vector(3, 16));
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
