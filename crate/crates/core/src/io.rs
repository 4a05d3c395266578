//! On-disk formats: light field directories, ground truth, disparity maps and mask sets.
//!
//! Canonical light field layout:
//!
//! ```text
//! lf.json                    {"views":[S,T],"height":U,"width":V,"middle":[s,t]}
//! views/{s}_{t}.png          8-bit RGB
//! gt/labels/{s}_{t}.png      16-bit grayscale labels (optional)
//! gt/disparity/{s}_{t}.f32   little-endian f32, row-major (optional)
//! gt/features/{s}_{t}.f32    P x P x K little-endian f32 (optional, with gt/features/meta.json)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backend::{FeatureMap, Prompt};
use crate::lf::{Dims, DisparityMap, GroundTruth, LabelMap, LightField, LightFieldError, LightFieldMask, Plane, Stage, ViewIndex, ViewMask};

pub const MASKS_SCHEMA: &str = "lfseg-masks/1";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("missing view {0}")]
    MissingView(ViewIndex),
    #[error("missing files: {}", list_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error(transparent)]
    LightField(#[from] LightFieldError),
}

fn list_paths(paths: &[PathBuf]) -> String {
    let mut out = String::new();
    for (i, p) in paths.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{}", p.display());
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_parent(path: &Path) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

/// `lf.json` contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightFieldMeta {
    pub views: [usize; 2],
    pub height: usize,
    pub width: usize,
    pub middle: [usize; 2],
}

impl LightFieldMeta {
    pub fn of(lf: &LightField) -> Self {
        let d = lf.dims();
        Self { views: [d.views_s, d.views_t], height: d.height, width: d.width, middle: [lf.middle().s, lf.middle().t] }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.views[0], self.views[1], self.height, self.width)
    }

    pub fn middle(&self) -> ViewIndex {
        ViewIndex::new(self.middle[0], self.middle[1])
    }
}

/// File naming of a light field tree, relative to its root.
///
/// Patterns may use `{s}`, `{t}` and the row-major view index `{idx}`,
/// optionally zero padded as `{idx:03}` (also `{s:02}` and `{t:02}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub views: String,
    pub labels: String,
    pub disparity: String,
    pub features: String,
    /// View grid to assume when the tree has no `lf.json`.
    pub grid: Option<(usize, usize)>,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            views: "views/{s}_{t}.png".into(),
            labels: "gt/labels/{s}_{t}.png".into(),
            disparity: "gt/disparity/{s}_{t}.f32".into(),
            features: "gt/features/{s}_{t}.f32".into(),
            grid: None,
        }
    }
}

impl Layout {
    pub fn canonical() -> Self {
        Self::default()
    }

    /// Expands `pattern` for `view` of a grid with `views_t` columns.
    pub fn render(pattern: &str, view: ViewIndex, views_t: usize) -> String {
        let idx = view.s * views_t + view.t;
        let mut out = String::with_capacity(pattern.len() + 8);
        let mut rest = pattern;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let Some(close) = rest[open..].find('}') else {
                out.push_str(&rest[open..]);
                return out;
            };
            let token = &rest[open + 1..open + close];
            let (name, width) = match token.split_once(':') {
                Some((n, w)) => (n, w.trim_start_matches('0').parse::<usize>().unwrap_or(0)),
                None => (token, 0),
            };
            let value = match name {
                "s" => Some(view.s),
                "t" => Some(view.t),
                "idx" => Some(idx),
                _ => None,
            };
            match value {
                Some(x) => {
                    let _ = write!(out, "{x:0width$}");
                }
                None => out.push_str(&rest[open..=open + close]),
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        out
    }

    fn path(&self, root: &Path, pattern: &str, view: ViewIndex, views_t: usize) -> PathBuf {
        root.join(Self::render(pattern, view, views_t))
    }
}

/// `gt/features/meta.json` contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub patch_grid: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedLightField {
    pub lf: LightField,
    /// Present when every label map exists.
    pub gt: Option<GroundTruth>,
    /// Present when every feature map exists.
    pub features: Option<Vec<FeatureMap>>,
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    ensure_parent(path)?;
    img.save(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

pub fn read_labels(path: &Path) -> Result<LabelMap, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    Ok(Plane::from_vec(h as usize, w as usize, luma.into_raw()).expect("image buffer matches its size"))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, labels.as_slice().to_vec())
            .expect("plane matches its size");
    buf.save(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

pub fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(format_err(path, format!("expected {} f32 values, found {} bytes", expected, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_f32s(path: &Path, values: &[f32]) -> Result<(), IoError> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_plane(path: &Path, height: usize, width: usize) -> Result<Plane<f32>, IoError> {
    let values = read_f32s(path, height * width)?;
    if let Some(bad) = values.iter().position(|x| !x.is_finite()) {
        return Err(format_err(path, format!("non-finite value at index {bad}")));
    }
    Ok(Plane::from_vec(height, width, values).expect("length checked"))
}

/// Loads a light field and whatever ground truth the tree carries.
pub fn load_lightfield(root: &Path, layout: &Layout) -> Result<LoadedLightField, IoError> {
    let meta_path = root.join("lf.json");
    let (grid, middle) = if meta_path.exists() {
        let meta: LightFieldMeta = read_json(&meta_path)?;
        ((meta.views[0], meta.views[1]), Some(meta.middle()))
    } else if let Some(grid) = layout.grid {
        (grid, None)
    } else {
        return Err(IoError::MissingFiles(vec![meta_path]));
    };
    let (views_s, views_t) = grid;
    let order: Vec<ViewIndex> =
        (0..views_s).flat_map(|s| (0..views_t).map(move |t| ViewIndex::new(s, t))).collect();
    let mut images = Vec::with_capacity(order.len());
    for &view in &order {
        let path = layout.path(root, &layout.views, view, views_t);
        if !path.exists() {
            return Err(IoError::MissingView(view));
        }
        images.push(read_rgb(&path)?);
    }
    let lf = LightField::new(views_s, views_t, images, middle)?;
    let dims = lf.dims();
    if meta_path.exists() {
        let meta: LightFieldMeta = read_json(&meta_path)?;
        if (meta.height, meta.width) != (dims.height, dims.width) {
            return Err(format_err(&meta_path, format!("declares {}x{} but views are {}x{}", meta.height, meta.width, dims.height, dims.width)));
        }
    }

    let labels = load_all(root, layout, &layout.labels, &order, views_t, |p| {
        let l = read_labels(p)?;
        if (l.height(), l.width()) != (dims.height, dims.width) {
            return Err(format_err(p, "label map size differs from the views"));
        }
        Ok(l)
    })?;
    let disparity = load_all(root, layout, &layout.disparity, &order, views_t, |p| read_plane(p, dims.height, dims.width))?;
    let gt = labels.map(|labels| GroundTruth { labels, disparity });

    let feature_meta = root.join(feature_meta_path(&layout.features));
    let features = if feature_meta.exists() {
        let fm: FeatureMeta = read_json(&feature_meta)?;
        load_all(root, layout, &layout.features, &order, views_t, |p| {
            let data = read_f32s(p, fm.patch_grid * fm.patch_grid * fm.embed_dim)?;
            FeatureMap::new(fm.patch_grid, fm.embed_dim, data).map_err(|e| format_err(p, e.to_string()))
        })?
    } else {
        None
    };
    Ok(LoadedLightField { lf, gt, features })
}

fn feature_meta_path(pattern: &str) -> PathBuf {
    Path::new(pattern).parent().unwrap_or(Path::new("")).join("meta.json")
}

/// `None` when no file of the family exists, an error when only some do.
fn load_all<T>(
    root: &Path,
    layout: &Layout,
    pattern: &str,
    order: &[ViewIndex],
    views_t: usize,
    mut read: impl FnMut(&Path) -> Result<T, IoError>,
) -> Result<Option<Vec<T>>, IoError> {
    let paths: Vec<PathBuf> = order.iter().map(|&v| layout.path(root, pattern, v, views_t)).collect();
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.len() == paths.len() {
        return Ok(None);
    }
    if !missing.is_empty() {
        return Err(IoError::MissingFiles(missing));
    }
    paths.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>().map(Some)
}

/// Ground-truth files that an evaluation needs but the tree lacks.
pub fn missing_ground_truth(root: &Path, layout: &Layout, dims: Dims, need_disparity: bool) -> Vec<PathBuf> {
    let mut patterns = vec![layout.labels.as_str()];
    if need_disparity {
        patterns.push(layout.disparity.as_str());
    }
    let mut missing = Vec::new();
    for pattern in patterns {
        for view in dims.views() {
            let p = layout.path(root, pattern, view, dims.views_t);
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    missing
}

/// Writes a light field in the canonical layout.
pub fn save_lightfield(
    root: &Path,
    lf: &LightField,
    gt: Option<&GroundTruth>,
    features: Option<&[FeatureMap]>,
) -> Result<(), IoError> {
    let layout = Layout::canonical();
    let dims = lf.dims();
    write_json(&root.join("lf.json"), &LightFieldMeta::of(lf))?;
    for view in dims.views() {
        let i = dims.view_offset(view);
        write_rgb(&layout.path(root, &layout.views, view, dims.views_t), lf.view(view))?;
        if let Some(gt) = gt {
            write_labels(&layout.path(root, &layout.labels, view, dims.views_t), &gt.labels[i])?;
            if let Some(disp) = &gt.disparity {
                write_f32s(&layout.path(root, &layout.disparity, view, dims.views_t), disp[i].as_slice())?;
            }
        }
        if let Some(features) = features {
            write_f32s(&layout.path(root, &layout.features, view, dims.views_t), features[i].as_slice())?;
        }
    }
    if let Some(features) = features {
        if let Some(first) = features.first() {
            let meta = FeatureMeta { patch_grid: first.patch_grid(), embed_dim: first.embed_dim() };
            write_json(&root.join(feature_meta_path(&layout.features)), &meta)?;
        }
    }
    Ok(())
}

/// Sidecar of a stored disparity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityMeta {
    pub height: usize,
    pub width: usize,
    pub view: [usize; 2],
    pub values: String,
    pub coherence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

/// Writes `disparity.f32`, `coherence.f32` and `disparity.json` into `dir`.
pub fn save_disparity(dir: &Path, dm: &DisparityMap, params: Option<serde_json::Value>) -> Result<(), IoError> {
    write_f32s(&dir.join("disparity.f32"), dm.values.as_slice())?;
    write_f32s(&dir.join("coherence.f32"), dm.coherence.as_slice())?;
    let meta = DisparityMeta {
        height: dm.values.height(),
        width: dm.values.width(),
        view: [dm.view.s, dm.view.t],
        values: "disparity.f32".into(),
        coherence: "coherence.f32".into(),
        params,
    };
    write_json(&dir.join("disparity.json"), &meta)
}

/// Reads a disparity map from its `disparity.json` sidecar or the directory holding it.
pub fn load_disparity(path: &Path) -> Result<DisparityMap, IoError> {
    let meta_path = if path.is_dir() { path.join("disparity.json") } else { path.to_path_buf() };
    let meta: DisparityMeta = read_json(&meta_path)?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let values = read_plane(&dir.join(&meta.values), meta.height, meta.width)?;
    let coherence = read_plane(&dir.join(&meta.coherence), meta.height, meta.width)?;
    Ok(DisparityMap { values, coherence, view: ViewIndex::new(meta.view[0], meta.view[1]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: u32,
    pub pixels: usize,
    /// Row-major over views.
    pub stages: Vec<Stage>,
    pub stage_counts: StageCounts,
    /// Row-major over views; `null` where no prompt was issued.
    pub prompts: Vec<Option<Prompt>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub absent: usize,
    pub coarse: usize,
    pub occluded: usize,
    pub refined: usize,
    pub fallback: usize,
}

impl StageCounts {
    pub fn from_array(c: [usize; 5]) -> Self {
        Self { absent: c[0], coarse: c[1], occluded: c[2], refined: c[3], fallback: c[4] }
    }

    pub fn add(&mut self, other: &StageCounts) {
        self.absent += other.absent;
        self.coarse += other.coarse;
        self.occluded += other.occluded;
        self.refined += other.refined;
        self.fallback += other.fallback;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub schema: String,
    pub lightfield: LightFieldMeta,
    pub segments: Vec<SegmentRecord>,
    pub stage_totals: StageCounts,
    /// Free-form provenance (run configuration).
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Writes `masks/{id}/{s}_{t}.png` (0/255) for every view plus `manifest.json`.
pub fn save_masks(
    root: &Path,
    meta: LightFieldMeta,
    masks: &[LightFieldMask],
    config: serde_json::Value,
) -> Result<MaskManifest, IoError> {
    let dims = meta.dims();
    let mut segments = Vec::with_capacity(masks.len());
    let mut totals = StageCounts::default();
    for m in masks {
        if m.dims() != dims {
            return Err(format_err(root, format!("segment {} has dims {:?}, expected {:?}", m.segment_id, m.dims(), dims)));
        }
        for view in dims.views() {
            let path = root.join("masks").join(m.segment_id.to_string()).join(format!("{}_{}.png", view.s, view.t));
            write_mask_png(&path, m.view(view))?;
        }
        let counts = StageCounts::from_array(m.stage_counts());
        totals.add(&counts);
        segments.push(SegmentRecord {
            segment_id: m.segment_id,
            pixels: m.total_pixels(),
            stages: m.stages().to_vec(),
            stage_counts: counts,
            prompts: dims.views().map(|v| m.prompt(v).cloned()).collect(),
        });
    }
    let manifest =
        MaskManifest { schema: MASKS_SCHEMA.into(), lightfield: meta, segments, stage_totals: totals, config };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_mask_png(path: &Path, mask: &ViewMask) -> Result<(), IoError> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("mask matches its size");
    buf.save(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

fn read_mask_png(path: &Path, dims: Dims) -> Result<ViewMask, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?.to_luma8();
    if (img.height() as usize, img.width() as usize) != (dims.height, dims.width) {
        return Err(format_err(path, "mask size differs from the light field"));
    }
    let bits = img.as_raw().iter().map(|&x| x >= 128).collect();
    Ok(ViewMask::from_bits(dims.height, dims.width, bits).expect("size checked"))
}

/// Reads a mask set written by [`save_masks`].
pub fn load_masks(root: &Path) -> Result<(Vec<LightFieldMask>, MaskManifest), IoError> {
    let manifest_path = root.join("manifest.json");
    let manifest: MaskManifest = read_json(&manifest_path)?;
    if manifest.schema != MASKS_SCHEMA {
        return Err(format_err(&manifest_path, format!("unsupported schema {}", manifest.schema)));
    }
    let dims = manifest.lightfield.dims();
    let mut masks = Vec::with_capacity(manifest.segments.len());
    for seg in &manifest.segments {
        if seg.stages.len() != dims.num_views() || seg.prompts.len() != dims.num_views() {
            return Err(format_err(&manifest_path, format!("segment {} lists the wrong number of views", seg.segment_id)));
        }
        let mut m = LightFieldMask::new(seg.segment_id, dims);
        for view in dims.views() {
            let i = dims.view_offset(view);
            let path = root.join("masks").join(seg.segment_id.to_string()).join(format!("{}_{}.png", view.s, view.t));
            let mask = read_mask_png(&path, dims)?;
            if mask.is_empty() != (seg.stages[i] == Stage::Absent) {
                return Err(format_err(&path, format!("stage {} disagrees with the mask", seg.stages[i].as_str())));
            }
            m.set_view(view, mask, seg.stages[i]);
            m.set_prompt(view, seg.prompts[i].clone());
        }
        masks.push(m);
    }
    Ok((masks, manifest))
}
