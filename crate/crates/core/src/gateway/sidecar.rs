//! Client side of the `her2-sidecar` protocol: newline-delimited JSON over
//! the stdin/stdout of a child process.
//!
//! The child announces itself with a handshake line before anything else:
//!
//! ```text
//! {"protocol":"her2-sidecar","version":1,"roles":["tumor","stain","segment"]}
//! ```
//!
//! Each request carries an `id`; the child answers in order and echoes it.
//! Classification answers carry `probabilities` keyed by label name,
//! segmentation answers carry `labels_b64` (one byte per pixel), and
//! failures carry `error`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    LabelMap, ModelBinding, ModelRole, StainLabel, StainPrediction, TumorLabel, TumorPrediction,
};
use crate::error::{Her2Error, Result};

pub const PROTOCOL_NAME: &str = "her2-sidecar";
pub const PROTOCOL_VERSION: u32 = 1;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);
const STDERR_KEEP: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub version: u32,
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub role: String,
    pub width: u32,
    pub height: u32,
    pub pixels_b64: String,
}

/// Any of the three response shapes; exactly one payload field is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>> {
    B64.decode(text)
        .map_err(|e| Her2Error::ProtocolViolation(format!("bad base64 payload: {e}")))
}

/// A running sidecar process. Requests are strictly sequential.
pub struct SidecarHandle {
    command: String,
    child: Option<Child>,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr_tail: Arc<Mutex<VecDeque<u8>>>,
    roles: Vec<String>,
    next_id: u64,
    request_timeout: Duration,
}

impl std::fmt::Debug for SidecarHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SidecarHandle")
            .field("command", &self.command)
            .field("roles", &self.roles)
            .field("running", &self.child.is_some())
            .finish()
    }
}

/// Starts the binding's sidecar and waits for its handshake.
pub fn spawn_sidecar(binding: &ModelBinding) -> Result<SidecarHandle> {
    spawn_sidecar_with_timeout(binding, HANDSHAKE_TIMEOUT)
}

pub fn spawn_sidecar_with_timeout(
    binding: &ModelBinding,
    handshake_timeout: Duration,
) -> Result<SidecarHandle> {
    binding.validate()?;
    let command = binding
        .sidecar_command
        .clone()
        .ok_or_else(|| Her2Error::InvalidArgument("sidecar binding without command".into()))?;
    let argv = shlex::split(&command).filter(|a| !a.is_empty()).ok_or_else(|| {
        Her2Error::InvalidArgument(format!("cannot parse sidecar command {command:?}"))
    })?;

    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Her2Error::BackendUnavailable(format!("cannot start {command:?}: {e}")))?;

    let stdout = child.stdout.take().expect("stdout piped");
    let stderr = child.stderr.take().expect("stderr piped");
    let stdin = child.stdin.take();

    let (tx, lines) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });

    let stderr_tail = Arc::new(Mutex::new(VecDeque::with_capacity(STDERR_KEEP)));
    let tail = Arc::clone(&stderr_tail);
    thread::spawn(move || {
        let mut reader = BufReader::new(stderr);
        let mut buf = [0u8; 1024];
        while let Ok(n) = reader.read(&mut buf) {
            if n == 0 {
                break;
            }
            let mut tail = tail.lock().unwrap_or_else(|p| p.into_inner());
            tail.extend(&buf[..n]);
            let excess = tail.len().saturating_sub(STDERR_KEEP);
            tail.drain(..excess);
        }
    });

    let mut handle = SidecarHandle {
        command,
        child: Some(child),
        stdin,
        lines,
        stderr_tail,
        roles: Vec::new(),
        next_id: 0,
        request_timeout: REQUEST_TIMEOUT,
    };

    let line = match handle.read_line(handshake_timeout, "handshake") {
        Ok(line) => line,
        Err(e) => {
            handle.shutdown();
            return Err(e);
        }
    };
    let checked = serde_json::from_str::<Handshake>(&line)
        .map_err(|e| {
            Her2Error::BackendUnavailable(format!("malformed handshake {line:?}: {e}"))
        })
        .and_then(|hs| {
            if hs.protocol != PROTOCOL_NAME {
                return Err(Her2Error::BackendUnavailable(format!(
                    "unknown protocol {:?}",
                    hs.protocol
                )));
            }
            if hs.version != PROTOCOL_VERSION {
                return Err(Her2Error::BackendUnavailable(format!(
                    "unsupported protocol version {} (expected {PROTOCOL_VERSION})",
                    hs.version
                )));
            }
            let role = binding.role.wire_name();
            if !hs.roles.iter().any(|r| r == role) {
                return Err(Her2Error::BackendUnavailable(format!(
                    "sidecar does not serve role {role:?} (offers {:?})",
                    hs.roles
                )));
            }
            Ok(hs)
        });
    match checked {
        Ok(hs) => {
            handle.roles = hs.roles;
            Ok(handle)
        }
        Err(e) => {
            handle.shutdown();
            Err(e)
        }
    }
}

impl SidecarHandle {
    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn set_request_timeout(&mut self, timeout: Duration) {
        self.request_timeout = timeout;
    }

    fn stderr_excerpt(&self) -> String {
        // give the stderr reader a moment to drain after the child exits
        thread::sleep(Duration::from_millis(20));
        let tail = self.stderr_tail.lock().unwrap_or_else(|p| p.into_inner());
        let bytes: Vec<u8> = tail.iter().copied().collect();
        String::from_utf8_lossy(&bytes).trim().to_string()
    }

    fn unavailable(&self, what: String) -> Her2Error {
        let stderr = self.stderr_excerpt();
        if stderr.is_empty() {
            Her2Error::BackendUnavailable(format!("{:?}: {what}", self.command))
        } else {
            Her2Error::BackendUnavailable(format!(
                "{:?}: {what}; stderr: {stderr}",
                self.command
            ))
        }
    }

    fn read_line(&self, timeout: Duration, what: &str) -> Result<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(self.unavailable(format!("reading {what}: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(self.unavailable(format!(
                "no {what} within {:.1} s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(self.unavailable(format!("process closed stdout before {what}")))
            }
        }
    }

    /// Sends one request and returns the matching response.
    pub fn call(&mut self, role: ModelRole, width: u32, height: u32, pixels: &[u8]) -> Result<Response> {
        if self.child.is_none() {
            return Err(Her2Error::BackendUnavailable(format!(
                "{:?} has been shut down",
                self.command
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        let request = Request {
            id,
            role: role.wire_name().to_string(),
            width,
            height,
            pixels_b64: encode_b64(pixels),
        };
        let mut line = serde_json::to_vec(&request).expect("request serializes");
        line.push(b'\n');
        let written = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(&line).and_then(|_| stdin.flush()),
            None => Err(std::io::Error::other("stdin closed")),
        };
        if let Err(e) = written {
            return Err(self.unavailable(format!("writing request {id}: {e}")));
        }

        let reply = self.read_line(self.request_timeout, "response")?;
        let response: Response = serde_json::from_str(&reply).map_err(|e| {
            Her2Error::ProtocolViolation(format!("unparseable response {reply:?}: {e}"))
        })?;
        if response.id != Some(id) {
            return Err(Her2Error::ProtocolViolation(format!(
                "response id {:?} does not match request id {id}",
                response.id
            )));
        }
        if let Some(message) = &response.error {
            return Err(Her2Error::BackendUnavailable(format!(
                "{:?} failed request {id}: {message}",
                self.command
            )));
        }
        Ok(response)
    }

    fn probabilities(&mut self, role: ModelRole, w: u32, h: u32, px: &[u8]) -> Result<BTreeMap<String, f64>> {
        self.call(role, w, h, px)?.probabilities.ok_or_else(|| {
            Her2Error::ProtocolViolation("classification response without probabilities".into())
        })
    }

    pub fn classify_tumor(&mut self, w: u32, h: u32, px: &[u8]) -> Result<TumorPrediction> {
        let probs = self.probabilities(ModelRole::TumorC, w, h, px)?;
        let [tumor, normal] = pick(&probs, TumorLabel::ALL.map(TumorLabel::as_str))?;
        TumorPrediction::from_probabilities(tumor, normal)
    }

    pub fn classify_stain(&mut self, w: u32, h: u32, px: &[u8]) -> Result<StainPrediction> {
        let probs = self.probabilities(ModelRole::StainM, w, h, px)?;
        StainPrediction::from_probabilities(pick(&probs, StainLabel::ALL.map(StainLabel::as_str))?)
    }

    pub fn segment(&mut self, w: u32, h: u32, px: &[u8]) -> Result<LabelMap> {
        let text = self.call(ModelRole::SegmenterL, w, h, px)?.labels_b64.ok_or_else(|| {
            Her2Error::ProtocolViolation("segment response without labels_b64".into())
        })?;
        let labels = decode_b64(&text)?;
        if labels.len() != w as usize * h as usize {
            return Err(Her2Error::ProtocolViolation(format!(
                "label map has {} bytes, expected {}",
                labels.len(),
                w as usize * h as usize
            )));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > super::MAX_LABEL) {
            return Err(Her2Error::ProtocolViolation(format!(
                "label value {bad} outside 0..=4"
            )));
        }
        LabelMap::new(w, h, labels)
    }

    /// Closes stdin and reaps the child, killing it if it lingers.
    /// Calling this more than once is a no-op.
    pub fn shutdown(&mut self) {
        self.stdin = None;
        let Some(mut child) = self.child.take() else {
            return;
        };
        for _ in 0..50 {
            match child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(_) => break,
            }
        }
        let _ = child.kill();
        let _ = child.wait();
    }

    pub fn is_running(&self) -> bool {
        self.child.is_some()
    }
}

impl Drop for SidecarHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn shutdown_sidecar(handle: &mut SidecarHandle) {
    handle.shutdown();
}

fn pick<const N: usize>(probs: &BTreeMap<String, f64>, names: [&str; N]) -> Result<[f64; N]> {
    if probs.len() != N {
        return Err(Her2Error::ProtocolViolation(format!(
            "expected labels {names:?}, got {:?}",
            probs.keys().collect::<Vec<_>>()
        )));
    }
    let mut out = [0.0; N];
    for (slot, name) in out.iter_mut().zip(names) {
        *slot = *probs.get(name).ok_or_else(|| {
            Her2Error::ProtocolViolation(format!("missing probability for {name:?}"))
        })?;
    }
    Ok(out)
}

/// Response body a rule-based server produces for `request`. Shared by the
/// bundled test sidecar so that it cannot drift from the built-in rules.
pub fn rule_response(request: &Request) -> Response {
    let fail = |msg: String| Response {
        id: Some(request.id),
        error: Some(msg),
        ..Response::default()
    };
    let pixels = match decode_b64(&request.pixels_b64) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    if request.width == 0
        || request.height == 0
        || pixels.len() != request.width as usize * request.height as usize * 3
    {
        return fail(format!(
            "payload of {} bytes does not match {}x{} RGB8",
            pixels.len(),
            request.width,
            request.height
        ));
    }
    let mut response = Response {
        id: Some(request.id),
        ..Response::default()
    };
    match request.role.as_str() {
        "tumor" => {
            let p = super::rules::classify_tumor(&pixels);
            response.probabilities = Some(BTreeMap::from([
                ("tumor".to_string(), p.probabilities.tumor),
                ("normal".to_string(), p.probabilities.normal),
            ]));
        }
        "stain" => {
            let labels = super::rules::segment(&pixels, request.width, request.height);
            let p = super::rules::classify_stain(&labels);
            response.probabilities = Some(
                StainLabel::ALL
                    .iter()
                    .map(|l| (l.as_str().to_string(), p.probability(*l)))
                    .collect(),
            );
        }
        "segment" => {
            let labels = super::rules::segment(&pixels, request.width, request.height);
            response.labels_b64 = Some(encode_b64(labels.labels()));
        }
        other => return fail(format!("unknown role {other:?}")),
    }
    response
}
