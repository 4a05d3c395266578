//! Canned-response backend for protocol and plumbing tests.

use std::sync::Arc;

use image::RgbImage;

use super::{
    check_image, BackendError, BackendInfo, FeatureMap, Prompt, SegmentResult, SegmenterBackend, Session,
    SessionRegistry,
};
use crate::lf::{ViewIndex, ViewMask};

pub const STUB_PATCH_GRID: usize = 4;
pub const STUB_EMBED_DIM: usize = 8;

/// Every image encodes to an all-ones `4 x 4 x 8` grid; prompts return an
/// empty mask with score 0 and mask generation finds nothing.
pub struct StubBackend {
    features: Arc<FeatureMap>,
    sessions: SessionRegistry<(usize, usize)>,
}

impl Default for StubBackend {
    fn default() -> Self {
        Self {
            features: Arc::new(FeatureMap::filled(STUB_PATCH_GRID, STUB_EMBED_DIM, 1.0)),
            sessions: SessionRegistry::new(),
        }
    }
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.len()
    }
}

impl SegmenterBackend for StubBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { patch_grid: STUB_PATCH_GRID, embed_dim: STUB_EMBED_DIM }
    }

    fn set_image(&self, image: &RgbImage, _view: Option<ViewIndex>) -> Result<Session, BackendError> {
        let (height, width) = check_image(image)?;
        let id = self.sessions.insert((height, width));
        Ok(Session { id, height, width, features: Arc::clone(&self.features) })
    }

    fn prompt(&self, session: &Session, prompt: &Prompt) -> Result<SegmentResult, BackendError> {
        let (h, w) = self.sessions.get(session.id)?;
        prompt.validate(h, w)?;
        Ok(SegmentResult { mask: ViewMask::empty(h, w), score: 0.0 })
    }

    fn auto_generate(&self, session: &Session, points_per_side: usize) -> Result<Vec<SegmentResult>, BackendError> {
        self.sessions.get(session.id)?;
        if points_per_side == 0 {
            return Err(BackendError::Input("points_per_side must be at least 1".into()));
        }
        Ok(Vec::new())
    }

    fn release(&self, session: &Session) -> Result<(), BackendError> {
        self.sessions.remove(session.id);
        Ok(())
    }
}
