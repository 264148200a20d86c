//! Problems evaluated by a child process speaking line-delimited JSON:
//! `{"x":[...]}` on its stdin, `{"y":[...]}` back on its stdout, one line
//! per evaluation. The child stays alive across evaluations.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_bounds, Problem};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Serialize)]
struct Request<'a> {
    x: &'a [f64],
}

#[derive(Deserialize)]
struct Reply {
    y: Vec<f64>,
}

pub struct ExternalProblem {
    name: String,
    m: usize,
    bounds: Vec<(f64, f64)>,
    timeout: Duration,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
}

impl ExternalProblem {
    /// Spawns `command` through the shell.
    pub fn spawn(command: &str, m: usize, bounds: Vec<(f64, f64)>, timeout: Duration) -> Result<Self> {
        if m == 0 || bounds.is_empty() {
            return Err(Error::Config("external problems need d >= 1 and m >= 1".into()));
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { name: format!("external:{command}"), m, bounds, timeout, child, stdin, lines: rx })
    }

    fn exit_status(&mut self) -> String {
        // give a dying child a moment so its status is reportable
        for _ in 0..20 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return status.to_string();
            }
            thread::sleep(Duration::from_millis(10));
        }
        "closed its output".to_string()
    }
}

impl Problem for ExternalProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn n_objectives(&self) -> usize {
        self.m
    }

    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        check_bounds(x, &self.bounds)?;
        let mut line = serde_json::to_string(&Request { x })?;
        line.push('\n');
        let written = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()),
            None => Err(std::io::ErrorKind::BrokenPipe.into()),
        };
        if written.is_err() {
            self.stdin = None;
            return Err(Error::ChildExit(self.exit_status()));
        }
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(Error::Protocol(format!("unreadable reply: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(Error::Timeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => return Err(Error::ChildExit(self.exit_status())),
        };
        let parsed: Reply =
            serde_json::from_str(reply.trim()).map_err(|e| Error::Protocol(format!("bad reply `{}`: {e}", reply.trim())))?;
        if parsed.y.len() != self.m {
            return Err(Error::Protocol(format!("expected {} objectives, got {}", self.m, parsed.y.len())));
        }
        if parsed.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("non-finite objective value".into()));
        }
        Ok(parsed.y)
    }
}

impl Drop for ExternalProblem {
    fn drop(&mut self) {
        self.stdin = None;
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}
