//! Bridge to real model inference: hidden states are requested from a
//! long-running adapter process over a JSON-lines protocol on stdin/stdout.
//!
//! Request:  `{"backend_id": "...", "max_tokens": N, "text": "..."}`
//! Response: `{"states": [[f64, ...], ...]}` or `{"error": "message"}`
//!
//! The adapter owns tokenization and truncation; this side only checks the
//! returned matrix shape. One process serves all backends of a run.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embedders::{EmbeddingBackendSpec, HiddenStateSource, TokenMatrix};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Request<'a> {
    backend_id: &'a str,
    max_tokens: usize,
    text: &'a str,
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    states: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    error: Option<String>,
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Spawns `command` lazily on first use and keeps it alive for the whole
/// run, one request/response line per text.
pub struct ExternalBackend {
    command: String,
    io: Mutex<Option<ChildIo>>,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>) -> ExternalBackend {
        ExternalBackend {
            command: command.into(),
            io: Mutex::new(None),
        }
    }

    fn unavailable(&self, backend_id: &str, message: impl Into<String>) -> Error {
        Error::BackendUnavailable {
            backend_id: backend_id.into(),
            message: format!("adapter `{}`: {}", self.command, message.into()),
        }
    }

    fn spawn(&self, backend_id: &str) -> Result<ChildIo> {
        let mut parts = self.command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| self.unavailable(backend_id, "empty command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| self.unavailable(backend_id, e.to_string()))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| self.unavailable(backend_id, "no stdin pipe"))?;
        let stdout = child
            .stdout
            .take()
            .map(BufReader::new)
            .ok_or_else(|| self.unavailable(backend_id, "no stdout pipe"))?;
        Ok(ChildIo {
            child,
            stdin,
            stdout,
        })
    }

    fn round_trip(&self, spec: &EmbeddingBackendSpec, text: &str) -> Result<Response> {
        let mut guard = self.io.lock().expect("adapter mutex poisoned");
        if guard.is_none() {
            *guard = Some(self.spawn(&spec.backend_id)?);
        }
        let io = guard.as_mut().expect("just initialized");
        let request = serde_json::to_string(&Request {
            backend_id: &spec.backend_id,
            max_tokens: spec.max_tokens,
            text,
        })
        .expect("request serialization cannot fail");
        writeln!(io.stdin, "{request}")
            .and_then(|_| io.stdin.flush())
            .map_err(|e| self.unavailable(&spec.backend_id, e.to_string()))?;
        let mut line = String::new();
        let read = io
            .stdout
            .read_line(&mut line)
            .map_err(|e| self.unavailable(&spec.backend_id, e.to_string()))?;
        if read == 0 {
            // Adapter died; drop the handle so a later call can respawn.
            *guard = None;
            return Err(self.unavailable(&spec.backend_id, "adapter closed its stdout"));
        }
        serde_json::from_str(&line)
            .map_err(|e| self.unavailable(&spec.backend_id, format!("bad response: {e}")))
    }
}

impl HiddenStateSource for ExternalBackend {
    fn hidden_states(
        &self,
        spec: &EmbeddingBackendSpec,
        sample_id: &str,
        text: &str,
    ) -> Result<TokenMatrix> {
        let response = self.round_trip(spec, text)?;
        if let Some(message) = response.error {
            return Err(self.unavailable(&spec.backend_id, message));
        }
        let states = response
            .states
            .ok_or_else(|| self.unavailable(&spec.backend_id, "response had neither states nor error"))?;
        if states.is_empty() {
            return Err(Error::ZeroTokens {
                backend_id: spec.backend_id.clone(),
                sample_id: sample_id.into(),
            });
        }
        let dim = states[0].len();
        if states.iter().any(|row| row.len() != dim) {
            return Err(self.unavailable(&spec.backend_id, "ragged state matrix"));
        }
        Ok(TokenMatrix {
            rows: states.len(),
            dim,
            data: states.concat(),
        })
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.io.lock() {
            if let Some(mut io) = guard.take() {
                // Closing stdin lets a well-behaved adapter exit on its own.
                drop(io.stdin);
                let _ = io.child.wait();
            }
        }
    }
}
