//! Newline-delimited JSON protocol between the engine and an out-of-process model.
//!
//! One request per line, one response per line, version echoed. Activation
//! vectors and distributions travel as base64 of little-endian `f32`, so
//! values round-trip to `f32` precision only.
//!
//! ```text
//! -> {"version":1,"id":3,"op":"run","inputs":{"dec_ids":[1,7,9]},
//!     "plan":[{"action":"replace","site":{...},"vector":"..."}],
//!     "capture":[{"stream":"dec","layer":4,"kind":"state_h","token":-1}],
//!     "return":{"top_k":5}}
//! <- {"version":1,"id":3,"captures":[{"site":{...},"vector":"..."}],
//!     "distribution":"...","top_k":[[9,0.71],...],"predicted_token":9}
//! ```
//!
//! Error codes: `bad_request`, `version`, `unsupported`, `invalid_plan`,
//! `addressing`, `input`, `internal`. A bad request never closes the connection.
//! `restore_from` is not part of the wire: the client resolves it to `replace`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::intervention::{f32_base64, ActionKind, Intervention};
use crate::engine::{validate_plan, Backend, Capabilities};
use crate::error::{Error, Result};
use crate::runtime::{ActivationRecord, HookSite, Hooks, Inputs, RunOutput, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    ModelInfo,
    Run,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireInputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_ids: Option<Vec<TokenId>>,
    pub dec_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnSpec {
    /// When set, the response carries a top-k list instead of the full distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub version: u32,
    pub id: u64,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<WireInputs>,
    #[serde(default)]
    pub plan: Vec<Intervention>,
    #[serde(default)]
    pub capture: Vec<HookSite>,
    #[serde(default, rename = "return")]
    pub ret: ReturnSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCapture {
    pub site: HookSite,
    #[serde(with = "f32_base64")]
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub version: u32,
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<Capabilities>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captures: Vec<WireCapture>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_f32_base64")]
    pub distribution: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<(TokenId, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_token: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

mod opt_f32_base64 {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::engine::f32_base64;

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&f32_base64::encode(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        match Option::<String>::deserialize(d)? {
            Some(s) => f32_base64::decode(&s).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

fn error_response(id: Option<u64>, code: &str, message: impl Into<String>) -> Response {
    Response {
        version: PROTOCOL_VERSION,
        id,
        error: Some(WireError { code: code.into(), message: message.into() }),
        ..Response::default()
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Plan(_) => "invalid_plan",
        Error::Capability(_) => "unsupported",
        Error::Addressing { .. } => "addressing",
        Error::Length { .. } | Error::Token { .. } | Error::Input(_) => "input",
        _ => "internal",
    }
}

/// Answers one request line. Never panics on malformed input.
pub fn handle_line(backend: &dyn Backend, line: &str) -> Response {
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_response(None, "bad_request", e.to_string()),
    };
    let id = value.get("id").and_then(serde_json::Value::as_u64);
    let req: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return error_response(id, "bad_request", e.to_string()),
    };
    if req.version != PROTOCOL_VERSION {
        return error_response(
            id,
            "version",
            format!("protocol version {} unsupported, expected {PROTOCOL_VERSION}", req.version),
        );
    }
    match req.op {
        Op::ModelInfo => Response {
            version: PROTOCOL_VERSION,
            id,
            info: Some(backend.capabilities().clone()),
            ..Response::default()
        },
        Op::Run => match serve_run(backend, &req) {
            Ok(r) => r,
            Err(e) => error_response(id, error_code(&e), e.to_string()),
        },
    }
}

fn serve_run(backend: &dyn Backend, req: &Request) -> Result<Response> {
    let wi = req.inputs.as_ref().ok_or_else(|| Error::Input("run request without inputs".into()))?;
    if req.plan.iter().any(|iv| iv.action() == ActionKind::RestoreFrom) {
        return Err(Error::Capability("restore_from must be resolved to replace by the client".into()));
    }
    validate_plan(backend.capabilities(), &req.plan).map_err(Error::Plan)?;
    let mut hooks = Hooks::default();
    for iv in &req.plan {
        match iv {
            Intervention::Capture { site } => hooks.captures.push(*site),
            Intervention::Replace { site, vector } => hooks.replacements.push((*site, vector.clone())),
            Intervention::AttnBlock(b) => hooks.blocks.push(b.clone()),
            Intervention::RestoreFrom { .. } => unreachable!(),
        }
    }
    let topo = backend.capabilities().topology();
    for site in &req.capture {
        site.check(&topo).map_err(|reason| Error::Addressing { site: site.to_string(), reason })?;
        hooks.captures.push(*site);
    }
    let inputs = Inputs { enc: wi.enc_ids.clone(), dec: wi.dec_ids.clone() };
    let out = backend.execute(&inputs, &hooks)?;
    let (distribution, top_k) = match req.ret.top_k {
        Some(k) => (None, Some(top_k(&out.distribution, k))),
        None => (Some(out.distribution), None),
    };
    Ok(Response {
        version: PROTOCOL_VERSION,
        id: Some(req.id),
        captures: out
            .captures
            .into_iter()
            .map(|r| WireCapture { site: r.site, vector: r.vector })
            .collect(),
        distribution,
        top_k,
        predicted_token: Some(out.predicted_token),
        ..Response::default()
    })
}

/// Highest-probability tokens, ties broken toward the lower id.
pub fn top_k(dist: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i as TokenId, dist[i])).collect()
}

/// Serves one connection until the peer hangs up.
pub fn serve_connection(backend: &dyn Backend, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(backend, &line);
        let mut text = serde_json::to_string(&resp).expect("response serializes");
        text.push('\n');
        writer.write_all(text.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// A background server; dropping the handle stops accepting new connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts serving `backend` on `addr` (use port 0 for an ephemeral port).
/// Each connection gets its own thread; requests on a connection are sequential.
pub fn spawn_server(backend: Arc<dyn Backend>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let backend = Arc::clone(&backend);
            std::thread::spawn(move || {
                let _ = serve_connection(backend.as_ref(), conn);
            });
        }
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Backend that forwards every pass to a wire-protocol server.
pub struct RemoteBackend {
    addr: String,
    conn: Mutex<Conn>,
    next_id: AtomicU64,
    caps: Capabilities,
    top_k: Option<usize>,
}

impl RemoteBackend {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Wire(format!("connect {addr}: {e}")))?;
        stream.set_read_timeout(Some(Duration::from_secs(120)))?;
        stream.set_nodelay(true)?;
        let conn = Conn { reader: BufReader::new(stream.try_clone()?), writer: stream };
        let mut me = Self {
            addr: addr.to_string(),
            conn: Mutex::new(conn),
            next_id: AtomicU64::new(1),
            caps: Capabilities {
                arch: crate::runtime::Arch::DecoderOnly,
                n_layers_enc: 0,
                n_layers_dec: 0,
                d_model: 0,
                vocab_size: 0,
                max_seq: 0,
                sentinel_ids: Vec::new(),
                actions: Vec::new(),
                knockout_modes: Vec::new(),
            },
            top_k: None,
        };
        let info = me.model_info()?;
        me.caps = info;
        if !me.caps.actions.contains(&ActionKind::RestoreFrom) {
            me.caps.actions.push(ActionKind::RestoreFrom);
        }
        Ok(me)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Asks the server for top-k lists only; the distribution is then zero outside the top k.
    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = Some(k);
        self
    }

    pub fn model_info(&self) -> Result<Capabilities> {
        let req = Request {
            version: PROTOCOL_VERSION,
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            op: Op::ModelInfo,
            inputs: None,
            plan: Vec::new(),
            capture: Vec::new(),
            ret: ReturnSpec::default(),
        };
        self.call(&req)?
            .info
            .ok_or_else(|| Error::Wire("model_info response without info".into()))
    }

    /// Sends one request and reads its response; protocol errors become [`Error::Remote`].
    pub fn call(&self, req: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        let mut conn = self.conn.lock().map_err(|_| Error::Wire("connection poisoned".into()))?;
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;
        let mut buf = String::new();
        if conn.reader.read_line(&mut buf)? == 0 {
            return Err(Error::Wire("server closed the connection".into()));
        }
        let resp: Response = serde_json::from_str(&buf)?;
        if resp.version != PROTOCOL_VERSION {
            return Err(Error::Wire(format!("server answered with version {}", resp.version)));
        }
        if let Some(e) = resp.error {
            return Err(Error::Remote { code: e.code, message: e.message });
        }
        if resp.id != Some(req.id) {
            return Err(Error::Wire(format!("response id {:?} for request {}", resp.id, req.id)));
        }
        Ok(resp)
    }

    /// Writes a raw line and returns the raw response line. Used to probe error handling.
    pub fn call_raw(&self, line: &str) -> Result<String> {
        let mut conn = self.conn.lock().map_err(|_| Error::Wire("connection poisoned".into()))?;
        conn.writer.write_all(line.trim_end().as_bytes())?;
        conn.writer.write_all(b"\n")?;
        conn.writer.flush()?;
        let mut buf = String::new();
        if conn.reader.read_line(&mut buf)? == 0 {
            return Err(Error::Wire("server closed the connection".into()));
        }
        Ok(buf)
    }
}

impl Backend for RemoteBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn execute(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput> {
        let mut plan: Vec<Intervention> = hooks
            .replacements
            .iter()
            .map(|(s, v)| Intervention::replace(*s, v.clone()))
            .collect();
        plan.extend(hooks.blocks.iter().cloned().map(Intervention::AttnBlock));
        let req = Request {
            version: PROTOCOL_VERSION,
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            op: Op::Run,
            inputs: Some(WireInputs { enc_ids: inputs.enc.clone(), dec_ids: inputs.dec.clone() }),
            plan,
            capture: hooks.captures.clone(),
            ret: ReturnSpec { top_k: self.top_k },
        };
        let resp = self.call(&req)?;
        let distribution = match (resp.distribution, resp.top_k) {
            (Some(d), _) => d,
            (None, Some(tk)) => {
                let mut d = vec![0.0; self.caps.vocab_size];
                for (t, p) in tk {
                    if let Some(slot) = d.get_mut(t as usize) {
                        *slot = p;
                    }
                }
                d
            }
            (None, None) => return Err(Error::Wire("run response without distribution".into())),
        };
        if distribution.len() != self.caps.vocab_size {
            return Err(Error::Wire(format!(
                "distribution of length {} for vocab {}",
                distribution.len(),
                self.caps.vocab_size
            )));
        }
        let predicted_token = resp
            .predicted_token
            .ok_or_else(|| Error::Wire("run response without predicted_token".into()))?;
        let captures = resp
            .captures
            .into_iter()
            .map(|c| {
                if c.vector.len() != self.caps.d_model {
                    return Err(Error::Wire(format!("capture {} has length {}", c.site, c.vector.len())));
                }
                Ok(ActivationRecord { site: c.site, vector: c.vector })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunOutput { distribution, predicted_token, captures })
    }
}
