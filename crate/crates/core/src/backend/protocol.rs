//! Framed wire protocol between the engine and a model server.
//!
//! Every message is
//!
//! ```text
//! u32 LE header length | u32 LE payload length | UTF-8 JSON header | raw payload
//! ```
//!
//! The header carries an `op` field on requests and an `ok` field on responses.
//! Payloads are row-major: HWC `u8` images, `P x P x K` little-endian `f32`
//! features, and `U x V` bytes (0/1) per mask.

use std::io::{self, Read, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const PREFIX_LEN: usize = 8;
pub const MAX_HEADER_LEN: u32 = 1 << 20;
pub const MAX_PAYLOAD_LEN: u32 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("header length {0} exceeds limit")]
    HeaderTooLarge(u32),
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(u32),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("header is not valid UTF-8")]
    InvalidUtf8,
    #[error("malformed header: {0}")]
    Json(String),
}

impl ProtocolError {
    /// Whether the stream can no longer be trusted to be at a frame boundary.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, ProtocolError::InvalidUtf8 | ProtocolError::Json(_))
    }
}

/// One message with its header kept as raw JSON bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new<T: Serialize>(header: &T, payload: Vec<u8>) -> Self {
        let header = serde_json::to_vec(header).expect("protocol headers serialize");
        Self { header, payload }
    }

    pub fn parse_header<T: DeserializeOwned>(&self) -> Result<T, ProtocolError> {
        let text = std::str::from_utf8(&self.header).map_err(|_| ProtocolError::InvalidUtf8)?;
        serde_json::from_str(text).map_err(|e| ProtocolError::Json(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREFIX_LEN + self.header.len() + self.payload.len());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize), ProtocolError> {
        let mut cursor = io::Cursor::new(bytes);
        let frame = read_frame(&mut cursor)?.ok_or(ProtocolError::Truncated)?;
        Ok((frame, cursor.position() as usize))
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&(frame.header.len() as u32).to_le_bytes())?;
    w.write_all(&(frame.payload.len() as u32).to_le_bytes())?;
    w.write_all(&frame.header)?;
    w.write_all(&frame.payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut prefix = [0u8; PREFIX_LEN];
    let mut filled = 0;
    while filled < PREFIX_LEN {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header_len = u32::from_le_bytes(prefix[..4].try_into().unwrap());
    let payload_len = u32::from_le_bytes(prefix[4..].try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(ProtocolError::HeaderTooLarge(header_len));
    }
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    let mut header = vec![0u8; header_len as usize];
    let mut payload = vec![0u8; payload_len as usize];
    read_body(r, &mut header)?;
    read_body(r, &mut payload)?;
    Ok(Some(Frame { header, payload }))
}

fn read_body<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Init {
        model: String,
        device: String,
    },
    SetImage {
        height: usize,
        width: usize,
        channels: usize,
        dtype: String,
    },
    Prompt {
        image_id: u64,
        point: Option<[f64; 2]>,
        #[serde(rename = "box")]
        bbox: Option<[f64; 4]>,
    },
    Amg {
        image_id: u64,
        points_per_side: usize,
    },
    Release {
        image_id: u64,
    },
}

/// Response header. Fields not relevant to the request are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Response {
    pub fn ok() -> Self {
        Self { ok: true, ..Self::default() }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self { ok: false, error: Some(message.into()), ..Self::default() }
    }
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    bytes.len().is_multiple_of(4)
        .then(|| bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}
