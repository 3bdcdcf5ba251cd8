//! Predict wire protocol v1: line-delimited JSON over a child's stdio.
//!
//! 1. The child prints `{"ready":true,"protocol":1}` once it can serve.
//! 2. Each request is one line `{"id":"<id>","input":<value>}`; the child
//!    answers with one line `{"id":"<id>","output":<value>}`, strictly in
//!    order.
//! 3. Closing stdin asks the child to exit with code 0.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::ExitStatusExt;
use std::path::Path;
use std::process::{Child, ChildStdin, ExitStatus};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::value::RawValue;
use serde_json::Value;

use super::sandbox::{kill_group, spawn_sandboxed, SandboxPolicy};

pub const PROTOCOL_VERSION: u64 = 1;
pub const READY_LINE: &str = r#"{"ready":true,"protocol":1}"#;
pub const HEALTH_ID: &str = "__health__";
/// Longest stdout line accepted from a child.
pub const MAX_LINE_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("no ready line within the startup timeout")]
    StartupTimeout,
    #[error("no reply within the per-record timeout")]
    RecordTimeout,
    #[error("total time budget exhausted")]
    TotalTimeout,
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("reply for {0:?} has no output")]
    MissingOutput(String),
    #[error("child closed stdout")]
    Closed,
    #[error("child stdin closed: {0}")]
    StdinClosed(String),
}

/// Renders one request line (without the newline).
pub fn request_line(id: &str, input: &str) -> String {
    format!("{{\"id\":{},\"input\":{}}}", Value::String(id.to_owned()), input)
}

/// Parses one reply line for `expected_id`, returning the raw output bytes.
pub fn parse_reply(line: &str, expected_id: &str) -> Result<Box<RawValue>, ProtocolError> {
    let mut fields: BTreeMap<String, Box<RawValue>> =
        serde_json::from_str(line).map_err(|e| ProtocolError::Violation(format!("unparseable reply: {e}")))?;
    let id: String = match fields.get("id").map(|raw| serde_json::from_str(raw.get())) {
        Some(Ok(id)) => id,
        _ => return Err(ProtocolError::Violation("reply lacks a string id".into())),
    };
    if id != expected_id {
        return Err(ProtocolError::Violation(format!("expected reply for {expected_id:?}, got {id:?}")));
    }
    fields.remove("output").ok_or(ProtocolError::MissingOutput(id))
}

fn is_ready_line(line: &str) -> bool {
    serde_json::from_str::<Value>(line)
        .is_ok_and(|v| v == serde_json::json!({"ready": true, "protocol": PROTOCOL_VERSION}))
}

#[derive(Default)]
struct StderrBuf {
    bytes: Vec<u8>,
    truncated: bool,
}

/// Captured stderr, capped at the policy limit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StderrCapture {
    pub bytes: Vec<u8>,
    pub truncated: bool,
}

/// How a child process ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Code(i32),
    Signal(i32),
    /// Killed by the platform after a timeout.
    Killed,
}

impl Exit {
    fn from_status(status: ExitStatus) -> Self {
        match (status.code(), status.signal()) {
            (Some(c), _) => Exit::Code(c),
            (None, Some(s)) => Exit::Signal(s),
            (None, None) => Exit::Code(-1),
        }
    }

    /// Whether the kernel ended the child for exceeding an rlimit.
    pub fn hit_resource_limit(self) -> bool {
        matches!(self, Exit::Signal(s) if s == libc::SIGXCPU || s == libc::SIGXFSZ)
    }

    pub fn success(self) -> bool {
        self == Exit::Code(0)
    }
}

/// A running model child speaking protocol v1.
pub struct ModelProcess {
    child: Child,
    stdin: Option<Sender<String>>,
    writer: Option<JoinHandle<()>>,
    write_error: Arc<Mutex<Option<String>>>,
    lines: Receiver<Result<String, String>>,
    stderr: Arc<Mutex<StderrBuf>>,
    readers: Vec<JoinHandle<()>>,
    policy: SandboxPolicy,
    started: Instant,
    exit: Option<Exit>,
}

impl ModelProcess {
    pub fn spawn(argv: &[String], workdir: &Path, policy: &SandboxPolicy) -> std::io::Result<Self> {
        let mut child = spawn_sandboxed(argv, workdir, policy)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");

        let (line_tx, lines) = mpsc::channel();
        let stdout_reader = thread::spawn(move || read_lines(stdout, line_tx));

        let stderr_buf = Arc::new(Mutex::new(StderrBuf::default()));
        let cap = policy.max_stderr_bytes;
        let sink = Arc::clone(&stderr_buf);
        let stderr_reader = thread::spawn(move || drain_stderr(stderr, cap, sink));

        let (tx, rx) = mpsc::channel::<String>();
        let write_error = Arc::new(Mutex::new(None));
        let write_error_sink = Arc::clone(&write_error);
        let writer = thread::spawn(move || write_lines(stdin, rx, write_error_sink));

        Ok(Self {
            child,
            stdin: Some(tx),
            writer: Some(writer),
            write_error,
            lines,
            stderr: stderr_buf,
            readers: vec![stdout_reader, stderr_reader],
            policy: policy.clone(),
            started: Instant::now(),
            exit: None,
        })
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn total_remaining(&self) -> Duration {
        self.policy.total_timeout().saturating_sub(self.started.elapsed())
    }

    fn next_line(&self, timeout: Duration, on_timeout: ProtocolError) -> Result<String, ProtocolError> {
        let remaining = self.total_remaining();
        let (wait, err) = if remaining < timeout { (remaining, ProtocolError::TotalTimeout) } else { (timeout, on_timeout) };
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(reason)) => Err(ProtocolError::Violation(reason)),
            Err(RecvTimeoutError::Timeout) => Err(err),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Closed),
        }
    }

    /// Waits for the ready line within the startup timeout.
    pub fn await_ready(&mut self) -> Result<(), ProtocolError> {
        let line = self.next_line(self.policy.startup_timeout(), ProtocolError::StartupTimeout)?;
        if is_ready_line(&line) {
            Ok(())
        } else {
            Err(ProtocolError::Violation(format!("expected ready line, got {:?}", truncate(&line))))
        }
    }

    /// Sends one record and waits for its reply. `input` is raw JSON.
    pub fn request(&mut self, id: &str, input: &str) -> Result<Box<RawValue>, ProtocolError> {
        let tx = self.stdin.as_ref().ok_or_else(|| ProtocolError::StdinClosed("already closed".into()))?;
        if let Some(e) = self.write_error.lock().unwrap().clone() {
            return Err(ProtocolError::StdinClosed(e));
        }
        tx.send(request_line(id, input))
            .map_err(|_| ProtocolError::StdinClosed("writer stopped".into()))?;
        let line = self.next_line(self.policy.per_record_timeout(), ProtocolError::RecordTimeout)?;
        parse_reply(&line, id)
    }

    /// Closes stdin and waits up to the exit timeout; kills on expiry.
    pub fn finish(&mut self) -> Exit {
        self.stdin.take();
        let deadline = Instant::now() + self.policy.exit_timeout().min(self.total_remaining().max(Duration::from_millis(1)));
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    let exit = Exit::from_status(status);
                    self.exit = Some(exit);
                    kill_group(&self.child);
                    return exit;
                }
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => {
                    self.kill();
                    return Exit::Killed;
                }
            }
        }
    }

    /// Whether the child is still running.
    pub fn is_alive(&mut self) -> bool {
        self.exit.is_none() && matches!(self.child.try_wait(), Ok(None))
    }

    /// Reaps the child if it has exited on its own, waiting briefly.
    pub fn reap(&mut self, within: Duration) -> Option<Exit> {
        if self.exit.is_some() {
            return self.exit;
        }
        let deadline = Instant::now() + within;
        loop {
            if let Ok(Some(status)) = self.child.try_wait() {
                self.exit = Some(Exit::from_status(status));
                return self.exit;
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn kill(&mut self) {
        kill_group(&self.child);
        if self.exit.is_none() {
            self.exit = Some(self.child.wait().map(Exit::from_status).unwrap_or(Exit::Killed));
        }
        self.stdin.take();
    }

    /// Stops the child and returns its captured stderr.
    pub fn into_stderr(mut self) -> StderrCapture {
        self.kill();
        self.stdin.take();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
        for r in self.readers.drain(..) {
            let _ = r.join();
        }
        let buf = self.stderr.lock().unwrap();
        StderrCapture { bytes: buf.bytes.clone(), truncated: buf.truncated }
    }

    pub fn stderr_tail(&self, max: usize) -> String {
        let buf = self.stderr.lock().unwrap();
        let start = buf.bytes.len().saturating_sub(max);
        String::from_utf8_lossy(&buf.bytes[start..]).into_owned()
    }
}

impl Drop for ModelProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(120).collect()
}

fn read_lines(stdout: impl Read, tx: Sender<Result<String, String>>) {
    let mut reader = BufReader::new(stdout);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.by_ref().take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => return,
            Ok(_) => {
                if buf.last() == Some(&b'\n') {
                    buf.pop();
                    if buf.last() == Some(&b'\r') {
                        buf.pop();
                    }
                } else if buf.len() > MAX_LINE_BYTES {
                    let _ = tx.send(Err(format!("stdout line longer than {MAX_LINE_BYTES} bytes")));
                    return;
                }
                let msg = String::from_utf8(std::mem::take(&mut buf)).map_err(|_| "stdout line is not UTF-8".to_owned());
                if tx.send(msg).is_err() {
                    return;
                }
            }
        }
    }
}

fn drain_stderr(mut stderr: impl Read, cap: usize, sink: Arc<Mutex<StderrBuf>>) {
    let mut chunk = [0u8; 8192];
    loop {
        match stderr.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => {
                let mut buf = sink.lock().unwrap();
                let room = cap.saturating_sub(buf.bytes.len());
                if n > room {
                    buf.truncated = true;
                }
                buf.bytes.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
}

fn write_lines(mut stdin: ChildStdin, rx: Receiver<String>, error: Arc<Mutex<Option<String>>>) {
    for line in rx {
        let res = stdin.write_all(line.as_bytes()).and_then(|_| stdin.write_all(b"\n")).and_then(|_| stdin.flush());
        if let Err(e) = res {
            *error.lock().unwrap() = Some(e.to_string());
            return;
        }
    }
}
