//! Line-delimited JSON prediction server over standard input or TCP.
//!
//! Each request line is one JSON object; each gets exactly one response line.
//! A bad request yields an error response and the session continues.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::Arc;
use std::thread;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use trajectron::data::checkpoint::load_checkpoint;
use trajectron::model::{enumerate_gmms, predict, Model, OutputScheme, PredictionOutput};
use trajectron::scene::{PredictionInstance, State};

pub const PROTOCOL: u32 = 1;
/// Longest accepted request line in bytes.
pub const MAX_LINE: usize = 8 << 20;
/// Upper bound on samples per request.
pub const MAX_SAMPLES: usize = 10_000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub protocol: u32,
    /// Echoed back unchanged.
    #[serde(default)]
    pub id: Option<Value>,
    pub instance: PredictionInstance,
    /// Replaces the instance's ego future.
    #[serde(default)]
    pub ego_plan: Option<Vec<State>>,
    #[serde(default = "default_scheme")]
    pub scheme: OutputScheme,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub gmms: bool,
}

fn default_scheme() -> OutputScheme {
    OutputScheme::Full
}

fn default_samples() -> usize {
    20
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize)]
pub struct Response {
    pub protocol: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PredictionOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn error(id: Option<Value>, msg: impl Into<String>) -> Self {
        Response {
            protocol: PROTOCOL,
            id,
            ok: false,
            output: None,
            error: Some(msg.into()),
        }
    }
}

/// Answers one request line. Never fails; problems become error responses.
pub fn handle_line(model: &Model, line: &str) -> String {
    let resp = match serde_json::from_str::<Value>(line) {
        Err(e) => Response::error(None, format!("invalid JSON: {e}")),
        Ok(v) => {
            let id = v.get("id").cloned();
            match serde_json::from_value::<Request>(v) {
                Err(e) => Response::error(id, format!("invalid request: {e}")),
                Ok(req) => answer(model, req),
            }
        }
    };
    serde_json::to_string(&resp).expect("response serializes")
}

fn answer(model: &Model, req: Request) -> Response {
    if req.protocol != PROTOCOL {
        return Response::error(
            req.id,
            format!("unsupported protocol {} (server speaks {PROTOCOL})", req.protocol),
        );
    }
    if req.samples > MAX_SAMPLES {
        return Response::error(req.id, format!("samples is capped at {MAX_SAMPLES}"));
    }
    let mut inst = req.instance;
    if let Some(plan) = req.ego_plan {
        inst.ego_future = Some(plan);
    }
    let result = inst.validate().and_then(|()| {
        let mut out = predict(model, &inst, req.scheme, req.samples, req.seed)?;
        if req.gmms {
            out.gmms = Some(enumerate_gmms(model, &inst)?);
        }
        Ok(out)
    });
    match result {
        Ok(out) => Response {
            protocol: PROTOCOL,
            id: req.id,
            ok: true,
            output: Some(out),
            error: None,
        },
        Err(e) => Response::error(req.id, e.to_string()),
    }
}

/// Reads one line of at most `MAX_LINE` bytes. `Ok(None)` at end of input;
/// `Ok(Some(Err(())))` for an oversized line, which is consumed.
fn read_line(reader: &mut impl BufRead) -> io::Result<Option<Result<String, ()>>> {
    let mut buf = Vec::new();
    let n = reader.by_ref().take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') && buf.len() > MAX_LINE {
        // discard the rest of the line
        let mut sink = Vec::new();
        loop {
            sink.clear();
            let m = reader.by_ref().take(1 << 16).read_until(b'\n', &mut sink)?;
            if m == 0 || sink.last() == Some(&b'\n') {
                break;
            }
        }
        return Ok(Some(Err(())));
    }
    Ok(Some(Ok(String::from_utf8_lossy(&buf).into_owned())))
}

/// Serves one request stream until end of input.
pub fn session(model: &Model, reader: impl Read, mut writer: impl Write) -> io::Result<()> {
    let mut reader = BufReader::new(reader);
    while let Some(line) = read_line(&mut reader)? {
        let resp = match line {
            Ok(l) if l.trim().is_empty() => continue,
            Ok(l) => handle_line(model, l.trim_end()),
            Err(()) => serde_json::to_string(&Response::error(None, format!("request exceeds {MAX_LINE} bytes")))
                .expect("response serializes"),
        };
        writeln!(writer, "{resp}")?;
        writer.flush()?;
    }
    Ok(())
}

pub fn run(checkpoint: &Path, port: Option<u16>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = Arc::new(Model::from_checkpoint(&ckpt)?);
    match port {
        None => session(&model, io::stdin().lock(), io::stdout().lock())?,
        Some(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("binding port {port}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        eprintln!("accept failed: {e}");
                        continue;
                    }
                };
                let model = Arc::clone(&model);
                thread::spawn(move || {
                    if let Err(e) = connection(&model, stream) {
                        eprintln!("connection closed: {e}");
                    }
                });
            }
        }
    }
    Ok(())
}

fn connection(model: &Model, stream: TcpStream) -> io::Result<()> {
    let reader = stream.try_clone()?;
    session(model, reader, stream)
}
