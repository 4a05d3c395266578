//! Serves any [`SegmenterBackend`] over the framed wire protocol.
//!
//! Used for conformance tests of the external client and by `lfseg serve`,
//! which exposes the oracle or stub backend to other processes.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use image::RgbImage;
use log::{debug, warn};

use super::protocol::{f32s_to_le_bytes, read_frame, write_frame, Frame, ProtocolError, Request, Response};
use super::{Prompt, SegmenterBackend, Session};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub frames: usize,
    pub errors: usize,
    /// Sessions still open when the peer disconnected (released on exit).
    pub leaked_sessions: usize,
}

/// Answers frames until the peer closes the stream or sends an unrecoverable frame.
pub fn serve_connection<R: Read, W: Write>(
    backend: &dyn SegmenterBackend,
    reader: &mut R,
    writer: &mut W,
) -> io::Result<ServeStats> {
    let mut sessions: HashMap<u64, Session> = HashMap::new();
    let mut stats = ServeStats::default();
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(frame)) => frame,
            Ok(None) => break,
            Err(e) => {
                stats.errors += 1;
                warn!("dropping connection: {e}");
                // Best effort: the peer may already be gone.
                let _ = write_frame(writer, &Frame::new(&Response::error(e.to_string()), Vec::new()));
                break;
            }
        };
        stats.frames += 1;
        let reply = handle(backend, &mut sessions, &frame);
        if !reply_ok(&reply) {
            stats.errors += 1;
        }
        write_frame(writer, &reply)?;
    }
    stats.leaked_sessions = sessions.len();
    for session in sessions.values() {
        let _ = backend.release(session);
    }
    Ok(stats)
}

fn reply_ok(frame: &Frame) -> bool {
    frame.parse_header::<Response>().map(|r| r.ok).unwrap_or(false)
}

fn error_frame(message: impl Into<String>) -> Frame {
    Frame::new(&Response::error(message), Vec::new())
}

fn handle(backend: &dyn SegmenterBackend, sessions: &mut HashMap<u64, Session>, frame: &Frame) -> Frame {
    let request: Request = match frame.parse_header() {
        Ok(r) => r,
        Err(ProtocolError::Json(e)) => return error_frame(format!("malformed request: {e}")),
        Err(e) => return error_frame(e.to_string()),
    };
    debug!("request {request:?}");
    match request {
        Request::Init { .. } => {
            let info = backend.info();
            Frame::new(
                &Response { patch_grid: Some(info.patch_grid), embed_dim: Some(info.embed_dim), ..Response::ok() },
                Vec::new(),
            )
        }
        Request::SetImage { height, width, channels, dtype } => {
            if channels != 3 || dtype != "u8" {
                return error_frame("set_image expects channels=3 and dtype=u8");
            }
            if height.checked_mul(width).and_then(|n| n.checked_mul(3)) != Some(frame.payload.len()) {
                return error_frame(format!(
                    "payload of {} bytes does not match {height}x{width}x3",
                    frame.payload.len()
                ));
            }
            let Some(image) = RgbImage::from_raw(width as u32, height as u32, frame.payload.clone()) else {
                return error_frame("image dimensions overflow");
            };
            match backend.set_image(&image, None) {
                Ok(session) => {
                    let fm = Arc::clone(&session.features);
                    let id = session.id;
                    sessions.insert(id, session);
                    Frame::new(
                        &Response {
                            image_id: Some(id),
                            feature_shape: Some([fm.patch_grid(), fm.patch_grid(), fm.embed_dim()]),
                            feature_dtype: Some("f32".into()),
                            ..Response::ok()
                        },
                        f32s_to_le_bytes(fm.as_slice()),
                    )
                }
                Err(e) => error_frame(e.to_string()),
            }
        }
        Request::Prompt { image_id, point, bbox } => {
            let Some(session) = sessions.get(&image_id) else {
                return error_frame(format!("unknown image_id {image_id}"));
            };
            let prompt = Prompt {
                point: point.map(|p| (p[0], p[1])),
                bbox: bbox.map(|b| (b[0], b[1], b[2], b[3])),
                point_label: true,
            };
            match backend.prompt(session, &prompt) {
                Ok(result) => Frame::new(
                    &Response { score: Some(result.score), ..Response::ok() },
                    result.mask.bits().iter().map(|&b| b as u8).collect(),
                ),
                Err(e) => error_frame(e.to_string()),
            }
        }
        Request::Amg { image_id, points_per_side } => {
            let Some(session) = sessions.get(&image_id) else {
                return error_frame(format!("unknown image_id {image_id}"));
            };
            match backend.auto_generate(session, points_per_side) {
                Ok(results) => {
                    let mut payload = Vec::with_capacity(results.len() * session.height * session.width);
                    for r in &results {
                        payload.extend(r.mask.bits().iter().map(|&b| b as u8));
                    }
                    Frame::new(
                        &Response {
                            count: Some(results.len()),
                            scores: Some(results.iter().map(|r| r.score).collect()),
                            ..Response::ok()
                        },
                        payload,
                    )
                }
                Err(e) => error_frame(e.to_string()),
            }
        }
        Request::Release { image_id } => {
            if let Some(session) = sessions.remove(&image_id) {
                if let Err(e) = backend.release(&session) {
                    return error_frame(e.to_string());
                }
            }
            Frame::new(&Response::ok(), Vec::new())
        }
    }
}

/// Serves one connection on stdin/stdout.
pub fn serve_stdio(backend: &dyn SegmenterBackend) -> io::Result<ServeStats> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut reader = BufReader::new(stdin.lock());
    let mut writer = BufWriter::new(stdout.lock());
    serve_connection(backend, &mut reader, &mut writer)
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(backend: Arc<dyn SegmenterBackend>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let mut reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    warn!("cannot clone stream: {e}");
                    return;
                }
            };
            let mut writer = BufWriter::new(stream);
            match serve_connection(backend.as_ref(), &mut reader, &mut writer) {
                Ok(stats) => debug!("connection {peer:?} closed: {stats:?}"),
                Err(e) => warn!("connection {peer:?} failed: {e}"),
            }
        });
    }
    Ok(())
}
