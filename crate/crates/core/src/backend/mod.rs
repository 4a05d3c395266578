//! Promptable 2D segmentation services.
//!
//! The pipeline talks to a [`SegmenterBackend`]: submit an image once, then
//! issue any number of prompts or an automatic mask generation pass against
//! the returned [`Session`]. Three implementations ship with the crate:
//!
//! * [`oracle::OracleBackend`] answers from ground-truth labels, for exact desk-scale runs;
//! * [`stub::StubBackend`] returns canned responses, for protocol and plumbing tests;
//! * [`external::ExternalBackend`] speaks the framed wire protocol to a model server.

pub mod external;
pub mod oracle;
pub mod protocol;
pub mod server;
pub mod stub;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::lf::{ViewIndex, ViewMask};

pub use external::{ExternalBackend, ExternalConfig, Transport};
pub use oracle::OracleBackend;
pub use stub::StubBackend;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid session {0}")]
    InvalidSession(u64),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Remote(String),
}

impl From<std::io::Error> for BackendError {
    fn from(e: std::io::Error) -> Self {
        BackendError::Transport(e.to_string())
    }
}

/// Point and/or box prompt in `(u, v)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub point: Option<(f64, f64)>,
    /// `(u_min, v_min, u_max, v_max)`.
    #[serde(rename = "box")]
    pub bbox: Option<(f64, f64, f64, f64)>,
    pub point_label: bool,
}

impl Prompt {
    pub fn point(u: f64, v: f64) -> Self {
        Self { point: Some((u, v)), bbox: None, point_label: true }
    }

    pub fn point_and_box(point: (f64, f64), bbox: (f64, f64, f64, f64)) -> Self {
        Self { point: Some(point), bbox: Some(bbox), point_label: true }
    }

    /// Checks the prompt against an image of `height x width` pixels.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), BackendError> {
        if self.point.is_none() && self.bbox.is_none() {
            return Err(BackendError::Input("prompt needs a point or a box".into()));
        }
        if let Some((u, v)) = self.point {
            let inside = u.is_finite()
                && v.is_finite()
                && u >= 0.0
                && v >= 0.0
                && u <= (height as f64 - 1.0)
                && v <= (width as f64 - 1.0);
            if !inside {
                return Err(BackendError::Input(format!(
                    "prompt point ({u}, {v}) outside {height}x{width} image"
                )));
            }
        }
        if let Some((u0, v0, u1, v1)) = self.bbox {
            if ![u0, v0, u1, v1].iter().all(|x| x.is_finite()) || u0 > u1 || v0 > v1 {
                return Err(BackendError::Input(format!("malformed box ({u0}, {v0}, {u1}, {v1})")));
            }
        }
        Ok(())
    }
}

/// Best mask for a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub mask: ViewMask,
    pub score: f64,
}

/// `P x P x K` patch embedding grid of one image, stored row-major `(p, q, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    patch_grid: usize,
    embed_dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(patch_grid: usize, embed_dim: usize, data: Vec<f32>) -> Result<Self, BackendError> {
        if patch_grid == 0 || embed_dim == 0 {
            return Err(BackendError::Input("feature map needs P >= 1 and K >= 1".into()));
        }
        if data.len() != patch_grid * patch_grid * embed_dim {
            return Err(BackendError::Input(format!(
                "feature map of {} values does not match {patch_grid}x{patch_grid}x{embed_dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::Input("feature map has non-finite entries".into()));
        }
        Ok(Self { patch_grid, embed_dim, data })
    }

    pub fn filled(patch_grid: usize, embed_dim: usize, value: f32) -> Self {
        Self { patch_grid, embed_dim, data: vec![value; patch_grid * patch_grid * embed_dim] }
    }

    pub fn patch_grid(&self) -> usize {
        self.patch_grid
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, p: usize, q: usize) -> &[f32] {
        let k = self.embed_dim;
        let start = (p * self.patch_grid + q) * k;
        &self.data[start..start + k]
    }
}

/// Handle to an encoded image. Cheap to clone; the features are shared.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub features: Arc<FeatureMap>,
}

/// Encoder geometry advertised by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub patch_grid: usize,
    pub embed_dim: usize,
}

/// A promptable segmentation service.
///
/// Implementations must be deterministic for a fixed `(image, prompt)`.
pub trait SegmenterBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    /// Encodes an image. `view` is an optional hint naming the subview the
    /// image came from; backends that do not need it ignore it.
    fn set_image(&self, image: &RgbImage, view: Option<ViewIndex>) -> Result<Session, BackendError>;

    fn prompt(&self, session: &Session, prompt: &Prompt) -> Result<SegmentResult, BackendError>;

    fn auto_generate(&self, session: &Session, points_per_side: usize) -> Result<Vec<SegmentResult>, BackendError>;

    /// Invalidates the session. Releasing twice is a no-op.
    fn release(&self, session: &Session) -> Result<(), BackendError>;
}

/// Live session table shared by the in-process backends.
#[derive(Debug)]
pub(crate) struct SessionRegistry<T> {
    next: AtomicU64,
    live: Mutex<HashMap<u64, T>>,
}

impl<T: Clone> SessionRegistry<T> {
    pub(crate) fn new() -> Self {
        Self { next: AtomicU64::new(1), live: Mutex::new(HashMap::new()) }
    }

    pub(crate) fn insert(&self, value: T) -> u64 {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.live.lock().expect("session registry poisoned").insert(id, value);
        id
    }

    pub(crate) fn get(&self, id: u64) -> Result<T, BackendError> {
        self.live
            .lock()
            .expect("session registry poisoned")
            .get(&id)
            .cloned()
            .ok_or(BackendError::InvalidSession(id))
    }

    pub(crate) fn remove(&self, id: u64) -> Option<T> {
        self.live.lock().expect("session registry poisoned").remove(&id)
    }

    pub(crate) fn len(&self) -> usize {
        self.live.lock().expect("session registry poisoned").len()
    }
}

pub(crate) fn check_image(image: &RgbImage) -> Result<(usize, usize), BackendError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(BackendError::Input("image has a zero dimension".into()));
    }
    Ok((image.height() as usize, image.width() as usize))
}

/// Sample positions of an `n x n` automatic-mask-generation grid over one axis.
pub fn amg_grid_axis(n: usize, extent: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let x = ((i as f64 + 0.5) * extent as f64 / n as f64).floor() as usize;
            x.min(extent - 1)
        })
        .collect()
}
