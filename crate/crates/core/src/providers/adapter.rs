//! Client side of the model adapter: a child process speaking the wire
//! protocol on stdin/stdout.

use std::io::{BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::wire::{read_message, write_message, Hello, Message, WireError};
use crate::ensemble::LogitVector;
use crate::tensor::{ImageTensor, TensorState};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Where a failure happened. `None` is the handshake.
fn at(batch: Option<usize>) -> String {
    match batch {
        Some(b) => format!("batch {b}"),
        None => "handshake".to_string(),
    }
}

fn status_text(status: &Option<ExitStatus>) -> String {
    match status {
        Some(s) => s.to_string(),
        None => "unknown status".to_string(),
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("cannot start adapter `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter protocol error at {}: {reason}", at(*.batch))]
    Protocol { batch: Option<usize>, reason: String },
    #[error("adapter exited at {} ({})", at(*.batch), status_text(.status))]
    ProcessExit {
        batch: Option<usize>,
        status: Option<ExitStatus>,
    },
    #[error("adapter timed out after {secs:.1}s at {}", at(*.batch))]
    Timeout { batch: Option<usize>, secs: f64 },
    #[error("image shape {got:?} does not match adapter input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("images must be standardized before inference")]
    NotStandardized,
    #[error("adapter is no longer usable after an earlier failure")]
    Poisoned,
}

impl AdapterError {
    /// Batch index the failure is attributed to, if any.
    pub fn batch(&self) -> Option<usize> {
        match self {
            AdapterError::Protocol { batch, .. }
            | AdapterError::ProcessExit { batch, .. }
            | AdapterError::Timeout { batch, .. } => *batch,
            _ => None,
        }
    }
}

pub struct AdapterClient {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    rx: Receiver<Result<Message, WireError>>,
    hello: Hello,
    timeout: Duration,
    batches_sent: usize,
    poisoned: bool,
}

impl AdapterClient {
    /// Launch `command` through `sh -c` and wait for HELLO.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, AdapterError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| AdapterError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let msg = read_message(&mut reader);
                let done = msg.is_err();
                if tx.send(msg).is_err() || done {
                    break;
                }
            }
        });
        let mut client = Self {
            child,
            stdin,
            rx,
            hello: Hello {
                num_classes: 0,
                channels: 0,
                height: 0,
                width: 0,
            },
            timeout,
            batches_sent: 0,
            poisoned: false,
        };
        match client.receive(None)? {
            Message::Hello(h) => {
                if h.num_classes < 2 || h.channels == 0 || h.height == 0 || h.width == 0 {
                    return Err(client.fail(AdapterError::Protocol {
                        batch: None,
                        reason: format!("invalid HELLO {h:?}"),
                    }));
                }
                client.hello = h;
                Ok(client)
            }
            other => Err(client.fail(AdapterError::Protocol {
                batch: None,
                reason: format!("expected HELLO, got message type 0x{:02x}", other.type_byte()),
            })),
        }
    }

    pub fn hello(&self) -> Hello {
        self.hello
    }

    pub fn num_classes(&self) -> usize {
        self.hello.num_classes as usize
    }

    pub fn batches_sent(&self) -> usize {
        self.batches_sent
    }

    fn fail(&mut self, err: AdapterError) -> AdapterError {
        self.poisoned = true;
        let _ = self.child.kill();
        let _ = self.child.wait();
        err
    }

    /// Exit status once the child is gone, waiting briefly for it.
    fn exit_status(&mut self) -> Option<ExitStatus> {
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match self.child.try_wait() {
                Ok(Some(s)) => return Some(s),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => return None,
            }
        }
    }

    fn exited(&mut self, batch: Option<usize>) -> AdapterError {
        let status = self.exit_status();
        self.fail(AdapterError::ProcessExit { batch, status })
    }

    fn receive(&mut self, batch: Option<usize>) -> Result<Message, AdapterError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(Ok(msg)) => Ok(msg),
            Ok(Err(WireError::Eof | WireError::TruncatedFrame | WireError::Io(_)))
            | Err(RecvTimeoutError::Disconnected) => Err(self.exited(batch)),
            Ok(Err(e)) => Err(self.fail(AdapterError::Protocol {
                batch,
                reason: e.to_string(),
            })),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(AdapterError::Timeout {
                batch,
                secs: self.timeout.as_secs_f64(),
            })),
        }
    }

    /// Run one batch of standardized images through the model.
    pub fn infer(&mut self, images: &[ImageTensor]) -> Result<Vec<LogitVector>, AdapterError> {
        if self.poisoned {
            return Err(AdapterError::Poisoned);
        }
        let expected = (
            self.hello.channels as usize,
            self.hello.height as usize,
            self.hello.width as usize,
        );
        let mut data = Vec::with_capacity(images.len() * self.hello.image_len());
        for img in images {
            if img.shape() != expected {
                return Err(AdapterError::ShapeMismatch {
                    expected,
                    got: img.shape(),
                });
            }
            if img.state() != TensorState::Standardized {
                return Err(AdapterError::NotStandardized);
            }
            data.extend(img.data().iter().map(|&v| v as f32));
        }
        let batch = self.batches_sent;
        self.batches_sent += 1;
        let b = images.len();
        let request = Message::InferRequest { batch: b as u32, data };
        let sent = match self.stdin.as_mut() {
            Some(w) => write_message(w, &request).is_ok(),
            None => false,
        };
        if !sent {
            return Err(self.exited(Some(batch)));
        }
        let (rb, values) = match self.receive(Some(batch))? {
            Message::InferResponse { batch, data } => (batch as usize, data),
            other => {
                return Err(self.fail(AdapterError::Protocol {
                    batch: Some(batch),
                    reason: format!("expected INFER_RESP, got message type 0x{:02x}", other.type_byte()),
                }))
            }
        };
        let c = self.num_classes();
        if rb != b || values.len() != b * c {
            return Err(self.fail(AdapterError::Protocol {
                batch: Some(batch),
                reason: format!(
                    "response holds {rb} rows and {} values, expected {b} rows of {c}",
                    values.len()
                ),
            }));
        }
        let rows = values
            .chunks_exact(c)
            .map(|row| LogitVector::new(row.iter().map(|&v| f64::from(v)).collect()))
            .collect::<Result<Vec<_>, _>>();
        rows.map_err(|e| {
            self.fail(AdapterError::Protocol {
                batch: Some(batch),
                reason: e.to_string(),
            })
        })
    }

    /// Send SHUTDOWN and wait for the child to exit.
    pub fn shutdown(mut self) -> Result<(), AdapterError> {
        self.close()
    }

    fn close(&mut self) -> Result<(), AdapterError> {
        if let Some(mut w) = self.stdin.take() {
            let _ = write_message(&mut w, &Message::Shutdown);
            let _ = w.flush();
        }
        if self.poisoned {
            return Ok(());
        }
        self.poisoned = true;
        match self.exit_status() {
            Some(_) => Ok(()),
            None => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(AdapterError::Timeout {
                    batch: None,
                    secs: 2.0,
                })
            }
        }
    }
}

impl Drop for AdapterClient {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
