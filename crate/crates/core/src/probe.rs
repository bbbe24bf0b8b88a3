//! Line-delimited JSON protocol for out-of-process subject models.
//!
//! Each request is one JSON object on one line, tagged by `"op"`:
//!
//! ```text
//! {"op":"answer","query":"..."}
//! {"op":"top_activated","query":"...","layer_id":15,"m":30}
//! {"op":"answer_with_dropout","query":"...","layer_id":15,"neurons":[4,9]}
//! {"op":"layer_width","layer_id":15}
//! {"op":"judge","a":"...","b":"..."}
//! ```
//!
//! and is answered, in order, by `{"ok":true,"result":...}` or
//! `{"ok":false,"error":"..."}`. Judge results are `"same"` or `"different"`.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, TryLockError};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conformal::LayerId;
use crate::dropout::{Judge, NeuronId, ProbeError, Query, Response, SubjectModel};

/// Longest accepted response line, in bytes.
pub const MAX_LINE: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeRequest {
    Answer {
        query: String,
    },
    TopActivated {
        query: String,
        layer_id: LayerId,
        m: usize,
    },
    AnswerWithDropout {
        query: String,
        layer_id: LayerId,
        neurons: Vec<NeuronId>,
    },
    LayerWidth {
        layer_id: LayerId,
    },
    Judge {
        a: String,
        b: String,
    },
}

impl ProbeRequest {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, ProbeError> {
        serde_json::from_str(line).map_err(|e| ProbeError::Protocol(format!("bad request: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ProbeResponse {
    pub fn success(result: Value) -> Self {
        Self {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        Self {
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    /// Parses one line and checks the `ok`/`result`/`error` shape.
    pub fn from_json_line(line: &str) -> Result<Self, ProbeError> {
        let resp: Self = serde_json::from_str(line)
            .map_err(|e| ProbeError::Protocol(format!("bad response: {e}")))?;
        match (resp.ok, &resp.result) {
            (true, None) => Err(ProbeError::Protocol("ok response without result".into())),
            _ => Ok(resp),
        }
    }

    /// The result payload, or the remote error.
    pub fn into_result(self) -> Result<Value, ProbeError> {
        if self.ok {
            self.result
                .ok_or_else(|| ProbeError::Protocol("ok response without result".into()))
        } else {
            Err(ProbeError::Remote(
                self.error.unwrap_or_else(|| "unspecified error".into()),
            ))
        }
    }
}

fn expect_string(v: Value) -> Result<String, ProbeError> {
    match v {
        Value::String(s) => Ok(s),
        other => Err(ProbeError::Protocol(format!(
            "expected string, got {other}"
        ))),
    }
}

fn expect_usize(v: Value) -> Result<usize, ProbeError> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| ProbeError::Protocol(format!("expected non-negative integer, got {v}")))
}

fn expect_neurons(v: Value) -> Result<Vec<NeuronId>, ProbeError> {
    serde_json::from_value(v).map_err(|e| ProbeError::Protocol(format!("bad neuron list: {e}")))
}

fn expect_verdict(v: Value) -> Result<bool, ProbeError> {
    match v.as_str() {
        Some("same") => Ok(true),
        Some("different") => Ok(false),
        _ => Err(ProbeError::Protocol(format!(
            "judge result must be \"same\" or \"different\", got {v}"
        ))),
    }
}

struct Channel {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn BufRead + Send>,
}

impl Channel {
    fn call(&mut self, request: &ProbeRequest) -> Result<Value, ProbeError> {
        let transport = |e: io::Error| ProbeError::Transport(e.to_string());
        let mut line = request.to_json_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        self.writer.flush().map_err(transport)?;

        let mut buf = Vec::new();
        let read = io::Read::take(&mut self.reader, MAX_LINE as u64 + 1)
            .read_until(b'\n', &mut buf)
            .map_err(transport)?;
        if read == 0 {
            return Err(ProbeError::Transport("probe closed its output".into()));
        }
        if buf.len() > MAX_LINE {
            return Err(ProbeError::Protocol("response line too long".into()));
        }
        let text = std::str::from_utf8(&buf)
            .map_err(|_| ProbeError::Protocol("response is not UTF-8".into()))?;
        ProbeResponse::from_json_line(text.trim_end())?.into_result()
    }
}

/// One connection to a probe process (or any reader/writer pair).
///
/// Requests are serialized; the connection is safe to share between threads.
pub struct ProbeConnection {
    channel: Mutex<Channel>,
    child: Option<Child>,
}

impl ProbeConnection {
    pub fn new(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            channel: Mutex::new(Channel {
                writer: Box::new(writer),
                reader: Box::new(reader),
            }),
            child: None,
        }
    }

    /// Launches `argv` and talks to it over its stdin/stdout.
    pub fn spawn(argv: &[String]) -> Result<Self, ProbeError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ProbeError::Handshake("empty probe command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProbeError::Handshake(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::new(BufReader::new(stdout), stdin);
        conn.child = Some(child);
        Ok(conn)
    }

    pub fn call(&self, request: &ProbeRequest) -> Result<Value, ProbeError> {
        self.channel
            .lock()
            .map_err(|_| ProbeError::Transport("connection poisoned".into()))?
            .call(request)
    }

    /// Confirms the probe is alive and knows every layer.
    pub fn handshake(&self, layers: &[LayerId]) -> Result<(), ProbeError> {
        for &layer in layers {
            match self.layer_width(layer) {
                Ok(0) => return Err(ProbeError::Handshake(format!("layer {layer} has width 0"))),
                Ok(_) => {}
                Err(e) => return Err(ProbeError::Handshake(e.to_string())),
            }
        }
        Ok(())
    }
}

impl Drop for ProbeConnection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // closing stdin lets a well-behaved probe exit on EOF
            if let Ok(mut channel) = self.channel.lock() {
                channel.writer = Box::new(io::sink());
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl SubjectModel for ProbeConnection {
    fn answer(&self, query: &Query) -> Result<Response, ProbeError> {
        let req = ProbeRequest::Answer {
            query: query.text.clone(),
        };
        self.call(&req).and_then(expect_string).map(Response)
    }

    fn top_activated(
        &self,
        query: &Query,
        layer: LayerId,
        m: usize,
    ) -> Result<Vec<NeuronId>, ProbeError> {
        let req = ProbeRequest::TopActivated {
            query: query.text.clone(),
            layer_id: layer,
            m,
        };
        self.call(&req).and_then(expect_neurons)
    }

    fn answer_with_dropout(
        &self,
        query: &Query,
        layer: LayerId,
        dropped: &[NeuronId],
    ) -> Result<Response, ProbeError> {
        let req = ProbeRequest::AnswerWithDropout {
            query: query.text.clone(),
            layer_id: layer,
            neurons: dropped.to_vec(),
        };
        self.call(&req).and_then(expect_string).map(Response)
    }

    fn layer_width(&self, layer: LayerId) -> Result<usize, ProbeError> {
        self.call(&ProbeRequest::LayerWidth { layer_id: layer })
            .and_then(expect_usize)
    }
}

impl Judge for ProbeConnection {
    fn same(&self, a: &Response, b: &Response) -> Result<bool, ProbeError> {
        if a == b {
            return Ok(true);
        }
        let req = ProbeRequest::Judge {
            a: a.0.clone(),
            b: b.0.clone(),
        };
        self.call(&req).and_then(expect_verdict)
    }
}

/// Several probe connections used as one model. Requests are stateless, so
/// each goes to whichever connection is free.
pub struct ProbePool {
    connections: Vec<ProbeConnection>,
    next: AtomicUsize,
}

impl ProbePool {
    pub fn new(connections: Vec<ProbeConnection>) -> Result<Self, ProbeError> {
        if connections.is_empty() {
            return Err(ProbeError::Handshake(
                "probe pool needs a connection".into(),
            ));
        }
        Ok(Self {
            connections,
            next: AtomicUsize::new(0),
        })
    }

    pub fn spawn(argv: &[String], size: usize) -> Result<Self, ProbeError> {
        let connections = (0..size.max(1))
            .map(|_| ProbeConnection::spawn(argv))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(connections)
    }

    pub fn len(&self) -> usize {
        self.connections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connections.is_empty()
    }

    pub fn handshake(&self, layers: &[LayerId]) -> Result<(), ProbeError> {
        self.connections
            .iter()
            .try_for_each(|c| c.handshake(layers))
    }

    fn call(&self, request: &ProbeRequest) -> Result<Value, ProbeError> {
        for conn in &self.connections {
            match conn.channel.try_lock() {
                Ok(mut channel) => return channel.call(request),
                Err(TryLockError::WouldBlock) => continue,
                Err(TryLockError::Poisoned(_)) => {
                    return Err(ProbeError::Transport("connection poisoned".into()))
                }
            }
        }
        let idx = self.next.fetch_add(1, Ordering::Relaxed) % self.connections.len();
        self.connections[idx].call(request)
    }
}

impl SubjectModel for ProbePool {
    fn answer(&self, query: &Query) -> Result<Response, ProbeError> {
        let req = ProbeRequest::Answer {
            query: query.text.clone(),
        };
        self.call(&req).and_then(expect_string).map(Response)
    }

    fn top_activated(
        &self,
        query: &Query,
        layer: LayerId,
        m: usize,
    ) -> Result<Vec<NeuronId>, ProbeError> {
        let req = ProbeRequest::TopActivated {
            query: query.text.clone(),
            layer_id: layer,
            m,
        };
        self.call(&req).and_then(expect_neurons)
    }

    fn answer_with_dropout(
        &self,
        query: &Query,
        layer: LayerId,
        dropped: &[NeuronId],
    ) -> Result<Response, ProbeError> {
        let req = ProbeRequest::AnswerWithDropout {
            query: query.text.clone(),
            layer_id: layer,
            neurons: dropped.to_vec(),
        };
        self.call(&req).and_then(expect_string).map(Response)
    }

    fn layer_width(&self, layer: LayerId) -> Result<usize, ProbeError> {
        self.call(&ProbeRequest::LayerWidth { layer_id: layer })
            .and_then(expect_usize)
    }
}

impl Judge for ProbePool {
    fn same(&self, a: &Response, b: &Response) -> Result<bool, ProbeError> {
        if a == b {
            return Ok(true);
        }
        let req = ProbeRequest::Judge {
            a: a.0.clone(),
            b: b.0.clone(),
        };
        self.call(&req).and_then(expect_verdict)
    }
}

/// Answers one request line against a model and judge.
pub fn handle_line<M, J>(model: &M, judge: &J, line: &str) -> ProbeResponse
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    let request = match ProbeRequest::from_json_line(line) {
        Ok(r) => r,
        Err(e) => return ProbeResponse::failure(e.to_string()),
    };
    let query = |text: &str| Query::new(text, text);
    let result = match request {
        ProbeRequest::Answer { query: q } => model.answer(&query(&q)).map(|r| Value::String(r.0)),
        ProbeRequest::TopActivated {
            query: q,
            layer_id,
            m,
        } => model
            .top_activated(&query(&q), layer_id, m)
            .map(Value::from),
        ProbeRequest::AnswerWithDropout {
            query: q,
            layer_id,
            neurons,
        } => model
            .answer_with_dropout(&query(&q), layer_id, &neurons)
            .map(|r| Value::String(r.0)),
        ProbeRequest::LayerWidth { layer_id } => model.layer_width(layer_id).map(Value::from),
        ProbeRequest::Judge { a, b } => {
            let (a, b) = (Response(a), Response(b));
            let same = if a == b { Ok(true) } else { judge.same(&a, &b) };
            same.map(|s| Value::from(if s { "same" } else { "different" }))
        }
    };
    match result {
        Ok(v) => ProbeResponse::success(v),
        Err(e) => ProbeResponse::failure(e.to_string()),
    }
}

/// Serves requests from `reader` until EOF, one response line per request.
pub fn serve<M, J>(
    model: &M,
    judge: &J,
    reader: impl BufRead,
    mut writer: impl Write,
) -> io::Result<()>
where
    M: SubjectModel + ?Sized,
    J: Judge + ?Sized,
{
    for line in reader.split(b'\n') {
        let line = line?;
        let response = match std::str::from_utf8(&line) {
            Ok(text) if text.trim().is_empty() => continue,
            Ok(text) => handle_line(model, judge, text),
            Err(_) => ProbeResponse::failure("request is not UTF-8"),
        };
        writeln!(writer, "{}", response.to_json_line())?;
        writer.flush()?;
    }
    Ok(())
}
