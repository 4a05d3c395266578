//! Wire-protocol client for an out-of-process model server.
//!
//! A pool of connections provides parallelism; each connection carries one
//! request at a time, and a session stays pinned to the connection that
//! created it.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use log::debug;

use super::protocol::{le_bytes_to_f32s, read_frame, write_frame, Frame, Request, Response};
use super::{check_image, BackendError, BackendInfo, FeatureMap, Prompt, SegmentResult, SegmenterBackend, Session};
use crate::lf::{ViewIndex, ViewMask};

/// Where the model server lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// Shell command whose stdin/stdout carry the protocol.
    Spawn(String),
    /// `host:port` of a listening server.
    Tcp(String),
}

impl FromStr for Transport {
    type Err = BackendError;

    /// `tcp://host:port` or `tcp:host:port` selects TCP; anything else is a command to spawn.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(BackendError::Input("empty server transport".into()));
        }
        if let Some(addr) = s.strip_prefix("tcp://").or_else(|| s.strip_prefix("tcp:")) {
            return Ok(Transport::Tcp(addr.to_string()));
        }
        Ok(Transport::Spawn(s.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    pub transport: Transport,
    pub pool_size: usize,
    pub model: String,
    pub device: String,
}

impl ExternalConfig {
    pub fn new(transport: Transport) -> Self {
        Self { transport, pool_size: 4, model: "hiera_small".into(), device: "cuda".into() }
    }
}

struct Connection {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn open(transport: &Transport) -> Result<Self, BackendError> {
        match transport {
            Transport::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| BackendError::Transport(format!("connect {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let reader = stream.try_clone()?;
                Ok(Self { reader: Box::new(BufReader::new(reader)), writer: Box::new(BufWriter::new(stream)), child: None })
            }
            Transport::Spawn(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| BackendError::Transport(format!("spawn `{cmd}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(BufWriter::new(stdin)),
                    child: Some(child),
                })
            }
        }
    }

    fn from_streams(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self { reader, writer, child: None }
    }

    fn call(&mut self, request: &Request, payload: Vec<u8>) -> Result<(Response, Vec<u8>), BackendError> {
        write_frame(&mut self.writer, &Frame::new(request, payload))?;
        let frame = read_frame(&mut self.reader)
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .ok_or_else(|| BackendError::Transport("server closed the connection".into()))?;
        let response: Response = frame.parse_header().map_err(|e| BackendError::Protocol(e.to_string()))?;
        if !response.ok {
            return Err(BackendError::Remote(response.error.unwrap_or_else(|| "unspecified error".into())));
        }
        Ok((response, frame.payload))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin asks the server to exit.
            self.writer = Box::new(std::io::sink());
            if child.wait().is_err() {
                let _ = child.kill();
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pinned {
    connection: usize,
    image_id: u64,
    height: usize,
    width: usize,
}

pub struct ExternalBackend {
    connections: Vec<Mutex<Connection>>,
    info: BackendInfo,
    sessions: Mutex<HashMap<u64, Pinned>>,
    next_session: AtomicU64,
    next_connection: AtomicUsize,
}

impl ExternalBackend {
    pub fn connect(config: &ExternalConfig) -> Result<Self, BackendError> {
        let pool = config.pool_size.max(1);
        let connections = (0..pool).map(|_| Connection::open(&config.transport)).collect::<Result<Vec<_>, _>>()?;
        Self::initialize(connections, config)
    }

    /// Client over already-established streams, one per pooled connection.
    pub fn from_streams(
        streams: Vec<(Box<dyn Read + Send>, Box<dyn Write + Send>)>,
        config: &ExternalConfig,
    ) -> Result<Self, BackendError> {
        let connections = streams.into_iter().map(|(r, w)| Connection::from_streams(r, w)).collect();
        Self::initialize(connections, config)
    }

    fn initialize(mut connections: Vec<Connection>, config: &ExternalConfig) -> Result<Self, BackendError> {
        if connections.is_empty() {
            return Err(BackendError::Input("connection pool is empty".into()));
        }
        let mut info = None;
        for conn in &mut connections {
            let (resp, _) = conn.call(&Request::Init { model: config.model.clone(), device: config.device.clone() }, vec![])?;
            let got = BackendInfo {
                patch_grid: resp.patch_grid.ok_or_else(|| BackendError::Protocol("init reply lacks patch_grid".into()))?,
                embed_dim: resp.embed_dim.ok_or_else(|| BackendError::Protocol("init reply lacks embed_dim".into()))?,
            };
            if *info.get_or_insert(got) != got {
                return Err(BackendError::Protocol("pooled servers disagree on feature geometry".into()));
            }
        }
        Ok(Self {
            connections: connections.into_iter().map(Mutex::new).collect(),
            info: info.expect("non-empty pool"),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            next_connection: AtomicUsize::new(0),
        })
    }

    fn pinned(&self, session: &Session) -> Result<Pinned, BackendError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(&session.id)
            .copied()
            .ok_or(BackendError::InvalidSession(session.id))
    }

    fn call_on(&self, connection: usize, request: &Request, payload: Vec<u8>) -> Result<(Response, Vec<u8>), BackendError> {
        let mut conn = self.connections[connection].lock().expect("connection poisoned");
        conn.call(request, payload)
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }
}

fn mask_from_bytes(bytes: &[u8], height: usize, width: usize) -> Result<ViewMask, BackendError> {
    ViewMask::from_bits(height, width, bytes.iter().map(|&b| b != 0).collect())
        .ok_or_else(|| BackendError::Protocol(format!("mask payload of {} bytes for {height}x{width}", bytes.len())))
}

impl SegmenterBackend for ExternalBackend {
    fn info(&self) -> BackendInfo {
        self.info
    }

    fn set_image(&self, image: &RgbImage, _view: Option<ViewIndex>) -> Result<Session, BackendError> {
        let (height, width) = check_image(image)?;
        let connection = self.next_connection.fetch_add(1, Ordering::Relaxed) % self.connections.len();
        let request = Request::SetImage { height, width, channels: 3, dtype: "u8".into() };
        let (resp, payload) = self.call_on(connection, &request, image.as_raw().clone())?;
        let image_id = resp.image_id.ok_or_else(|| BackendError::Protocol("set_image reply lacks image_id".into()))?;
        let [p, q, k] =
            resp.feature_shape.ok_or_else(|| BackendError::Protocol("set_image reply lacks feature_shape".into()))?;
        if p != q {
            return Err(BackendError::Protocol(format!("non-square feature grid {p}x{q}")));
        }
        if resp.feature_dtype.as_deref().unwrap_or("f32") != "f32" {
            return Err(BackendError::Protocol("unsupported feature dtype".into()));
        }
        let values = le_bytes_to_f32s(&payload).ok_or_else(|| BackendError::Protocol("ragged feature payload".into()))?;
        let features = FeatureMap::new(p, k, values).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id, Pinned { connection, image_id, height, width });
        debug!("session {id} pinned to connection {connection} as image {image_id}");
        Ok(Session { id, height, width, features: Arc::new(features) })
    }

    fn prompt(&self, session: &Session, prompt: &Prompt) -> Result<SegmentResult, BackendError> {
        let pin = self.pinned(session)?;
        prompt.validate(pin.height, pin.width)?;
        let request = Request::Prompt {
            image_id: pin.image_id,
            point: prompt.point.map(|(u, v)| [u, v]),
            bbox: prompt.bbox.map(|(a, b, c, d)| [a, b, c, d]),
        };
        let (resp, payload) = self.call_on(pin.connection, &request, vec![])?;
        let mask = mask_from_bytes(&payload, pin.height, pin.width)?;
        Ok(SegmentResult { mask, score: resp.score.unwrap_or(0.0) })
    }

    /// Masks are ranked by score and any mask overlapping an already kept one
    /// with IoU above 0.9 is dropped.
    fn auto_generate(&self, session: &Session, points_per_side: usize) -> Result<Vec<SegmentResult>, BackendError> {
        let pin = self.pinned(session)?;
        if points_per_side == 0 {
            return Err(BackendError::Input("points_per_side must be at least 1".into()));
        }
        let request = Request::Amg { image_id: pin.image_id, points_per_side };
        let (resp, payload) = self.call_on(pin.connection, &request, vec![])?;
        let count = resp.count.unwrap_or(0);
        let scores = resp.scores.unwrap_or_default();
        let per_mask = pin.height * pin.width;
        if scores.len() != count || payload.len() != count * per_mask {
            return Err(BackendError::Protocol(format!(
                "amg reply: count {count}, {} scores, {} payload bytes",
                scores.len(),
                payload.len()
            )));
        }
        let mut candidates = payload
            .chunks_exact(per_mask.max(1))
            .take(count)
            .zip(scores)
            .map(|(bytes, score)| Ok(SegmentResult { mask: mask_from_bytes(bytes, pin.height, pin.width)?, score }))
            .collect::<Result<Vec<_>, BackendError>>()?;
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut kept: Vec<SegmentResult> = Vec::new();
        for c in candidates {
            if c.mask.is_empty() || kept.iter().any(|k| k.mask.iou(&c.mask) > 0.9) {
                continue;
            }
            kept.push(c);
        }
        Ok(kept)
    }

    fn release(&self, session: &Session) -> Result<(), BackendError> {
        let pin = self.sessions.lock().expect("session table poisoned").remove(&session.id);
        if let Some(pin) = pin {
            self.call_on(pin.connection, &Request::Release { image_id: pin.image_id }, vec![])?;
        }
        Ok(())
    }
}
