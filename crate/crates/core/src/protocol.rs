//! Backend contract and its line-delimited JSON wire format.
//!
//! Every message is one UTF-8 line holding a JSON object with an `op` tag
//! and an `id`. Requests are `ground`, `answer` and `ping`; replies are
//! `ground_result`, `answer_result`, `pong` and `error`. The schema is
//! documented in `docs/protocol.md`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, SaliencyGrid, TokenGrid, ViewId, ViewSet};
use crate::imaging::{self, RasterImage};
use crate::objective::ObjectiveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelFormat {
    Gray8,
    Rgb8,
}

impl PixelFormat {
    pub fn channels(self) -> u8 {
        match self {
            PixelFormat::Gray8 => 1,
            PixelFormat::Rgb8 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    Inline {
        width: u32,
        height: u32,
        format: PixelFormat,
        /// Base64 of the row-major interleaved samples.
        data: String,
    },
    /// A binary pixmap readable by the backend.
    Path { path: String },
}

impl ImagePayload {
    pub fn inline(image: &RasterImage) -> Self {
        ImagePayload::Inline {
            width: image.width,
            height: image.height,
            format: if image.channels == 1 {
                PixelFormat::Gray8
            } else {
                PixelFormat::Rgb8
            },
            data: BASE64.encode(&image.data),
        }
    }

    pub fn decode(&self) -> Result<RasterImage> {
        match self {
            ImagePayload::Inline {
                width,
                height,
                format,
                data,
            } => {
                let bytes = BASE64
                    .decode(data)
                    .map_err(|e| Error::protocol(format!("bad base64 image: {e}"), None))?;
                RasterImage::new(*width, *height, format.channels(), bytes)
            }
            ImagePayload::Path { path } => RasterImage::load(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPayload {
    pub view: ViewId,
    /// Location of the view in original-image pixels.
    pub rect: Rect,
    pub is_global: bool,
    pub image: ImagePayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    pub id: u64,
    pub views: Vec<ViewPayload>,
    pub prompt: String,
    pub objective: ObjectiveConfig,
    /// Passed through untouched; its meaning belongs to the backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_layer: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewGrounding {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub entropy: f64,
    pub max_prob: f64,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub id: u64,
    pub views: Vec<ViewGrounding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub id: u64,
    pub views: Vec<ViewPayload>,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub id: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Message {
    Ground(GroundRequest),
    Answer(AnswerRequest),
    Ping { id: u64 },
    GroundResult(GroundResponse),
    AnswerResult(AnswerResponse),
    Pong { id: u64, model: String },
    Error { id: u64, message: String },
}

const OPS: [&str; 7] = [
    "ground",
    "answer",
    "ping",
    "ground_result",
    "answer_result",
    "pong",
    "error",
];

impl Message {
    pub fn id(&self) -> u64 {
        match self {
            Message::Ground(r) => r.id,
            Message::Answer(r) => r.id,
            Message::GroundResult(r) => r.id,
            Message::AnswerResult(r) => r.id,
            Message::Ping { id } | Message::Pong { id, .. } | Message::Error { id, .. } => *id,
        }
    }
}

/// One message as a single line, newline included.
pub fn encode(message: &Message) -> String {
    let mut line = serde_json::to_string(message).expect("messages always serialize");
    line.push('\n');
    line
}

pub fn decode(line: &str) -> Result<Message> {
    let raw = || Some(line.trim_end().to_string());
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::protocol(format!("malformed message: {e}"), raw()))?;
    match value.get("op") {
        Some(serde_json::Value::String(op)) if !OPS.contains(&op.as_str()) => {
            return Err(Error::protocol(format!("unknown op `{op}`"), raw()));
        }
        Some(serde_json::Value::String(_)) => {}
        _ => return Err(Error::protocol("message has no string `op` field", raw())),
    }
    serde_json::from_value(value).map_err(|e| Error::protocol(format!("malformed message: {e}"), raw()))
}

/// Anything that can turn views and a prompt into saliency grids and answers.
pub trait GradientBackend: Send + Sync {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse>;
    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse>;
    /// A short description of the backend.
    fn ping(&self) -> Result<String>;
}

impl<B: GradientBackend + ?Sized> GradientBackend for Box<B> {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse> {
        (**self).ground(request)
    }
    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse> {
        (**self).answer(request)
    }
    fn ping(&self) -> Result<String> {
        (**self).ping()
    }
}

impl<B: GradientBackend + ?Sized> GradientBackend for std::sync::Arc<B> {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse> {
        (**self).ground(request)
    }
    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse> {
        (**self).answer(request)
    }
    fn ping(&self) -> Result<String> {
        (**self).ping()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Distribution statistics reported alongside each saliency grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub entropy: f64,
    pub max_prob: f64,
    pub vocab: usize,
}

/// A validated per-view grounding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    pub view: ViewId,
    pub saliency: SaliencyGrid,
    pub stats: DistributionStats,
}

/// Inline payloads for every view, global first.
pub fn view_payloads(views: &ViewSet, image: &RasterImage) -> Result<Vec<ViewPayload>> {
    views
        .views()
        .iter()
        .map(|v| {
            let pixels = imaging::crop(image, &v.pixel_rect)?;
            Ok(ViewPayload {
                view: v.id,
                rect: v.pixel_rect,
                is_global: v.is_global,
                image: ImagePayload::inline(&pixels),
            })
        })
        .collect()
}

fn validate_grounding(v: &ViewGrounding, rect: Rect) -> std::result::Result<(), String> {
    if v.rows == 0 || v.cols == 0 {
        return Err(format!("empty {}x{} grid", v.rows, v.cols));
    }
    if v.rows.checked_mul(v.cols) != Some(v.scores.len()) {
        return Err(format!("{}x{} grid carries {} scores", v.rows, v.cols, v.scores.len()));
    }
    if v.cols as u64 > rect.w as u64 || v.rows as u64 > rect.h as u64 {
        return Err(format!("{}x{} grid does not fit a {}x{} view", v.rows, v.cols, rect.h, rect.w));
    }
    if let Some((i, s)) = v.scores.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(format!("score {i} is {s}; scores must be finite and non-negative"));
    }
    if v.vocab == 0 {
        return Err("vocab must be positive".into());
    }
    if !v.entropy.is_finite() || v.entropy < 0.0 || v.entropy > (v.vocab as f64).ln() + 1e-6 {
        return Err(format!("entropy {} outside [0, ln {}]", v.entropy, v.vocab));
    }
    if !(0.0..=1.0).contains(&v.max_prob) {
        return Err(format!("max_prob {} outside [0, 1]", v.max_prob));
    }
    Ok(())
}

/// Grounds every view in one request and validates the reply.
pub fn ground(
    backend: &dyn GradientBackend,
    views: &ViewSet,
    image: &RasterImage,
    prompt: &str,
    objective: &ObjectiveConfig,
    tap_layer: Option<u32>,
) -> Result<Vec<Grounding>> {
    objective.validate()?;
    let request = GroundRequest {
        id: next_id(),
        views: view_payloads(views, image)?,
        prompt: prompt.to_string(),
        objective: *objective,
        tap_layer,
    };
    let response = backend.ground(&request)?;
    let raw = || Some(encode(&Message::GroundResult(response.clone())).trim_end().to_string());
    if response.id != request.id {
        return Err(Error::protocol(
            format!("response id {} does not match request {}", response.id, request.id),
            raw(),
        ));
    }
    if response.views.len() != views.len() {
        return Err(Error::protocol(
            format!("{} grids returned for {} views", response.views.len(), views.len()),
            raw(),
        ));
    }
    views
        .views()
        .iter()
        .zip(&response.views)
        .map(|(view, g)| {
            validate_grounding(g, view.pixel_rect).map_err(|m| Error::protocol(format!("view {}: {m}", view.id), raw()))?;
            let grid = TokenGrid::new(g.rows, g.cols, view.pixel_rect)?;
            Ok(Grounding {
                view: view.id,
                saliency: SaliencyGrid::new(grid, g.scores.clone())?,
                stats: DistributionStats {
                    entropy: g.entropy,
                    max_prob: g.max_prob,
                    vocab: g.vocab,
                },
            })
        })
        .collect()
}

/// Final answer over the global view plus crops.
pub fn answer(backend: &dyn GradientBackend, views: &ViewSet, image: &RasterImage, prompt: &str) -> Result<String> {
    let request = AnswerRequest {
        id: next_id(),
        views: view_payloads(views, image)?,
        prompt: prompt.to_string(),
    };
    let response = backend.answer(&request)?;
    if response.id != request.id {
        return Err(Error::protocol(
            format!("response id {} does not match request {}", response.id, request.id),
            Some(encode(&Message::AnswerResult(response)).trim_end().to_string()),
        ));
    }
    Ok(response.text)
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    broken: bool,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A backend reached over a child process's standard streams or a TCP
/// socket. Requests are serialized: one in flight per connection.
pub struct RemoteBackend {
    conn: Mutex<Connection>,
    timeout: Duration,
    label: String,
}

impl RemoteBackend {
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
        label: impl Into<String>,
    ) -> Self {
        Self::build(reader, Box::new(writer), None, timeout, label.into())
    }

    fn build(
        reader: impl Read + Send + 'static,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        timeout: Duration,
        label: String,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        RemoteBackend {
            conn: Mutex::new(Connection {
                writer,
                lines: rx,
                child,
                broken: false,
            }),
            timeout,
            label,
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::BackendUnavailable(format!("connect {addr}: {e}")))?;
        let reader = stream.try_clone()?;
        Ok(Self::build(reader, Box::new(stream), None, timeout, format!("tcp://{addr}")))
    }

    /// Runs `command` through `sh -c` and talks to its stdin/stdout.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::BackendUnavailable(format!("spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self::build(stdout, Box::new(stdin), Some(child), timeout, format!("cmd:{command}")))
    }

    /// `tcp://host:port` or `cmd:<shell command>`.
    pub fn from_endpoint(endpoint: &str, timeout: Duration) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            Self::connect_tcp(addr, timeout)
        } else if let Some(cmd) = endpoint.strip_prefix("cmd:") {
            Self::spawn(cmd, timeout)
        } else {
            Err(Error::invalid(format!("unrecognized backend endpoint `{endpoint}`")))
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn roundtrip(&self, request: &Message) -> Result<Message> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        if conn.broken {
            return Err(Error::BackendUnavailable(format!("{}: connection is broken", self.label)));
        }
        let unavailable = |conn: &mut Connection, msg: String| {
            conn.broken = true;
            Error::BackendUnavailable(format!("{}: {msg}", self.label))
        };
        let line = encode(request);
        if let Err(e) = conn.writer.write_all(line.as_bytes()).and_then(|_| conn.writer.flush()) {
            return Err(unavailable(&mut conn, format!("write failed: {e}")));
        }
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(unavailable(&mut conn, format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                // A late reply would desynchronize the stream.
                return Err(unavailable(&mut conn, format!("no reply within {:?}", self.timeout)));
            }
            Err(RecvTimeoutError::Disconnected) => return Err(unavailable(&mut conn, "connection closed".into())),
        };
        let message = decode(&reply)?;
        if let Message::Error { message, .. } = &message {
            return Err(Error::protocol(format!("backend reported: {message}"), Some(reply)));
        }
        if message.id() != request.id() {
            return Err(Error::protocol(
                format!("reply id {} does not match request {}", message.id(), request.id()),
                Some(reply),
            ));
        }
        Ok(message)
    }
}

impl GradientBackend for RemoteBackend {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse> {
        match self.roundtrip(&Message::Ground(request.clone()))? {
            Message::GroundResult(r) => Ok(r),
            other => Err(Error::protocol("expected ground_result", Some(encode(&other)))),
        }
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResponse> {
        match self.roundtrip(&Message::Answer(request.clone()))? {
            Message::AnswerResult(r) => Ok(r),
            other => Err(Error::protocol("expected answer_result", Some(encode(&other)))),
        }
    }

    fn ping(&self) -> Result<String> {
        match self.roundtrip(&Message::Ping { id: next_id() })? {
            Message::Pong { model, .. } => Ok(model),
            other => Err(Error::protocol("expected pong", Some(encode(&other)))),
        }
    }
}

/// Handles one request line; failures become `error` replies.
pub fn handle_line(backend: &dyn GradientBackend, line: &str) -> Message {
    let id = serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
        .unwrap_or(0);
    let fail = |e: Error| Message::Error {
        id,
        message: e.to_string(),
    };
    match decode(line) {
        Ok(Message::Ground(r)) => backend.ground(&r).map(Message::GroundResult).unwrap_or_else(fail),
        Ok(Message::Answer(r)) => backend.answer(&r).map(Message::AnswerResult).unwrap_or_else(fail),
        Ok(Message::Ping { id }) => backend
            .ping()
            .map(|model| Message::Pong { id, model })
            .unwrap_or_else(fail),
        Ok(other) => fail(Error::protocol(format!("`{}` is not a request", op_name(&other)), None)),
        Err(e) => fail(e),
    }
}

fn op_name(message: &Message) -> &'static str {
    match message {
        Message::Ground(_) => "ground",
        Message::Answer(_) => "answer",
        Message::Ping { .. } => "ping",
        Message::GroundResult(_) => "ground_result",
        Message::AnswerResult(_) => "answer_result",
        Message::Pong { .. } => "pong",
        Message::Error { .. } => "error",
    }
}

/// Serves requests line by line until the reader is exhausted.
pub fn serve(backend: &dyn GradientBackend, reader: impl BufRead, mut writer: impl Write) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(backend, &line);
        writer.write_all(encode(&reply).as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one at a time.
pub fn serve_tcp(backend: &dyn GradientBackend, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        if let Err(e) = serve(backend, reader, stream) {
            log::warn!("connection ended with error: {e}");
        }
    }
    Ok(())
}
