//! Mock cloud sink: an append-only row table with idempotent appends, a
//! per-card policy table, bearer-token checks and an outage switch.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_with, encode, idempotency_key, CloudRecord, CodecError};
use crate::domain::{AccessPolicy, DeviceId, Timestamp, Uid};

pub const DEFAULT_TOKEN: &str = "edgegate-dev-token";
pub const TOKEN_ENV: &str = "EDGEGATE_SINK_TOKEN";

/// The mock bearer token: `EDGEGATE_SINK_TOKEN` if set, else the default.
pub fn token_from_env() -> String {
    std::env::var(TOKEN_ENV)
        .ok()
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| DEFAULT_TOKEN.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("sink unavailable")]
    Unavailable,
    #[error("uid not provisioned")]
    NotFound,
    #[error("corrupt sink state: {0}")]
    CorruptState(String),
}

impl From<CodecError> for SinkError {
    fn from(e: CodecError) -> Self {
        SinkError::Schema(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub row_index: u64,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SheetRow {
    pub row_index: u64,
    pub record: CloudRecord,
    pub key: String,
    pub received_at: Timestamp,
}

/// Append-only rows, dense from index 0, deduplicated by idempotency key.
#[derive(Debug, Clone, Default)]
pub struct SheetTable {
    rows: Vec<SheetRow>,
    seen: HashMap<String, u64>,
    max_seq: HashMap<DeviceId, u64>,
    duplicates: u64,
}

impl SheetTable {
    pub fn rows(&self) -> &[SheetRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends that hit an already-seen key.
    pub fn duplicate_appends(&self) -> u64 {
        self.duplicates
    }

    pub fn row_for_key(&self, key: &str) -> Option<u64> {
        self.seen.get(key).copied()
    }

    /// Next sequence number for a device whose record arrived without one.
    fn arrival_seq(&self, device: &DeviceId) -> u64 {
        self.max_seq.get(device).map_or(0, |s| s + 1)
    }

    fn append(&mut self, record: CloudRecord, received_at: Timestamp) -> Ack {
        let key = idempotency_key(&record);
        if let Some(&row_index) = self.seen.get(&key) {
            self.duplicates += 1;
            return Ack { row_index, key };
        }
        let row_index = self.rows.len() as u64;
        let seq = self.max_seq.entry(record.device_id.clone()).or_insert(record.seq);
        *seq = (*seq).max(record.seq);
        self.seen.insert(key.clone(), row_index);
        self.rows.push(SheetRow {
            row_index,
            record,
            key: key.clone(),
            received_at,
        });
        Ack { row_index, key }
    }

    /// Writes one JSON line per row: `{"row_index":..,"received_at":..,"record":{..}}`.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        self.save_from(0, &mut w)
    }

    /// Writes rows from `first` on; appending these to a saved state file
    /// keeps it loadable.
    pub fn save_from(&self, first: usize, mut w: impl Write) -> std::io::Result<()> {
        for row in self.rows.iter().skip(first) {
            let rec = encode(&row.record).map_err(std::io::Error::other)?;
            write!(
                w,
                "{{\"row_index\":{},\"received_at\":\"{}\",\"record\":",
                row.row_index,
                row.received_at.to_iso8601()
            )?;
            w.write_all(&rec)?;
            w.write_all(b"}\n")?;
        }
        w.flush()
    }

    pub fn load(r: impl BufRead) -> Result<Self, SinkError> {
        let mut table = SheetTable::default();
        for (lineno, line) in r.lines().enumerate() {
            let bad = |m: String| SinkError::CorruptState(format!("line {}: {m}", lineno + 1));
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let row_index = v["row_index"]
                .as_u64()
                .ok_or_else(|| bad("missing row_index".into()))?;
            let received_at = v["received_at"]
                .as_str()
                .ok_or_else(|| bad("missing received_at".into()))
                .and_then(|s| Timestamp::parse_iso8601(s).map_err(|e| bad(e.to_string())))?;
            let rec_bytes = serde_json::to_vec(&v["record"]).map_err(|e| bad(e.to_string()))?;
            let record = decode_with(&rec_bytes, |_| 0).map_err(|e| bad(e.to_string()))?;
            if row_index != table.rows.len() as u64 {
                return Err(bad(format!("non-dense row index {row_index}")));
            }
            table.append(record, received_at);
            if table.duplicates > 0 {
                return Err(bad("duplicate idempotency key".into()));
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuthzTable {
    entries: BTreeMap<Uid, AccessPolicy>,
}

impl AuthzTable {
    pub fn insert(&mut self, policy: AccessPolicy) -> Option<AccessPolicy> {
        self.entries.insert(policy.uid().clone(), policy)
    }

    pub fn get(&self, uid: &Uid) -> Option<&AccessPolicy> {
        self.entries.get(uid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AccessPolicy> {
        self.entries.values()
    }
}

impl FromIterator<AccessPolicy> for AuthzTable {
    fn from_iter<I: IntoIterator<Item = AccessPolicy>>(iter: I) -> Self {
        let mut t = AuthzTable::default();
        for p in iter {
            t.insert(p);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct CloudSink {
    token: String,
    sheet: SheetTable,
    authz: AuthzTable,
    unavailable: bool,
}

impl CloudSink {
    pub fn new(token: impl Into<String>, authz: AuthzTable) -> Self {
        Self {
            token: token.into(),
            sheet: SheetTable::default(),
            authz,
            unavailable: false,
        }
    }

    pub fn with_sheet(mut self, sheet: SheetTable) -> Self {
        self.sheet = sheet;
        self
    }

    pub fn sheet(&self) -> &SheetTable {
        &self.sheet
    }

    pub fn authz(&self) -> &AuthzTable {
        &self.authz
    }

    /// Fault-injection hook: while set, every request fails with `Unavailable`.
    pub fn set_unavailable(&mut self, unavailable: bool) {
        self.unavailable = unavailable;
    }

    fn check(&self, token: &str) -> Result<(), SinkError> {
        if token != self.token {
            return Err(SinkError::Unauthorized);
        }
        if self.unavailable {
            return Err(SinkError::Unavailable);
        }
        Ok(())
    }

    pub fn append(
        &mut self,
        token: &str,
        record_bytes: &[u8],
        received_at: Timestamp,
    ) -> Result<Ack, SinkError> {
        self.check(token)?;
        let sheet = &self.sheet;
        let record = decode_with(record_bytes, |d| sheet.arrival_seq(d))?;
        Ok(self.sheet.append(record, received_at))
    }

    pub fn query_policy(&self, token: &str, uid: &Uid) -> Result<AccessPolicy, SinkError> {
        self.check(token)?;
        self.authz.get(uid).cloned().ok_or(SinkError::NotFound)
    }

    pub fn export_csv(&self) -> Vec<u8> {
        export_csv(&self.sheet)
    }

    /// Serves one wire request against this sink.
    pub fn handle(&mut self, req: &wire::Request, now: Timestamp) -> wire::Response {
        use wire::{Request, Response};
        let result = match req {
            Request::Append { token, record } => self
                .append(token, record.as_bytes(), now)
                .map(|a| Response::Ack {
                    row_index: a.row_index,
                    key: a.key,
                }),
            Request::Query { token, uid } => match Uid::parse(uid) {
                Ok(uid) => match self.query_policy(token, &uid) {
                    Ok(policy) => Ok(Response::Policy { policy }),
                    Err(SinkError::NotFound) => Ok(Response::NotFound),
                    Err(e) => Err(e),
                },
                Err(e) => Err(SinkError::Schema(e.to_string())),
            },
            Request::Export => Ok(Response::Csv {
                body: String::from_utf8(self.export_csv()).expect("csv is utf-8"),
            }),
        };
        result.unwrap_or_else(|e| Response::from_error(&e))
    }
}

pub const CSV_HEADER: [&str; 6] = ["row_index", "device_id", "timestamp", "event_type", "seq", "data"];

/// One line per row after a header; data flattened as `key=value` pairs
/// joined by `;` in record order.
pub fn export_csv(table: &SheetTable) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in &table.rows {
        let data = row
            .record
            .data
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            row.row_index.to_string(),
            row.record.device_id.to_string(),
            row.record.timestamp.to_iso8601(),
            row.record.event_type.to_string(),
            row.record.seq.to_string(),
            data,
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Socket-mode protocol: each message is a 4-byte big-endian length followed
/// by a UTF-8 JSON body.
pub mod wire {
    use std::io::{self, Read, Write};
    use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;
    use std::time::{Duration, Instant};

    use serde::{Deserialize, Serialize};

    use super::{CloudSink, SinkError};
    use crate::auth::{CloudAuthority, CloudReply, CloudResponse};
    use crate::domain::{AccessPolicy, Timestamp, Uid};
    use crate::sync::{SendOutcome, SendResult, Transport};

    pub const MAX_FRAME: usize = 1 << 20;

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
    pub enum Request {
        /// `record` carries the canonical record bytes verbatim.
        Append { token: String, record: String },
        Query { token: String, uid: String },
        Export,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(tag = "status", rename_all = "snake_case")]
    pub enum Response {
        Ack { row_index: u64, key: String },
        Policy {
            policy: AccessPolicy,
        },
        NotFound,
        Csv {
            body: String,
        },
        Error {
            kind: ErrorKind,
            message: String,
        },
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum ErrorKind {
        Unauthorized,
        Schema,
        Unavailable,
        BadRequest,
    }

    impl Response {
        pub fn from_error(e: &SinkError) -> Self {
            let kind = match e {
                SinkError::Unauthorized => ErrorKind::Unauthorized,
                SinkError::Unavailable => ErrorKind::Unavailable,
                SinkError::Schema(_) | SinkError::CorruptState(_) | SinkError::NotFound => {
                    ErrorKind::Schema
                }
            };
            Response::Error {
                kind,
                message: e.to_string(),
            }
        }
    }

    pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
        if body.len() > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
        }
        w.write_all(&(body.len() as u32).to_be_bytes())?;
        w.write_all(body)?;
        w.flush()
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream.
    pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Ok(Some(body))
    }

    pub type TimeSource = Arc<dyn Fn() -> Timestamp + Send + Sync>;
    pub type Journal = Box<dyn Write + Send>;

    struct Shared {
        sink: CloudSink,
        journal: Option<Journal>,
    }

    /// A sink served over TCP. All connections share one mutex-guarded sink,
    /// so appends observe a single total order.
    pub struct SinkServer {
        addr: SocketAddr,
        stop: Arc<AtomicBool>,
        handle: Option<JoinHandle<()>>,
        shared: Arc<Mutex<Shared>>,
    }

    impl SinkServer {
        pub fn bind(
            addr: impl ToSocketAddrs,
            sink: CloudSink,
            now: TimeSource,
        ) -> io::Result<Self> {
            Self::bind_with_journal(addr, sink, now, None)
        }

        /// Like [`SinkServer::bind`], also writing each new row to `journal`
        /// in the saved-state format.
        pub fn bind_with_journal(
            addr: impl ToSocketAddrs,
            sink: CloudSink,
            now: TimeSource,
            journal: Option<Journal>,
        ) -> io::Result<Self> {
            let listener = TcpListener::bind(addr)?;
            let addr = listener.local_addr()?;
            let stop = Arc::new(AtomicBool::new(false));
            let sink = Arc::new(Mutex::new(Shared { sink, journal }));
            let handle = {
                let stop = stop.clone();
                let sink = sink.clone();
                std::thread::spawn(move || accept_loop(listener, sink, now, stop))
            };
            Ok(Self {
                addr,
                stop,
                handle: Some(handle),
                shared: sink,
            })
        }

        pub fn local_addr(&self) -> SocketAddr {
            self.addr
        }

        /// A copy of the sink's current state.
        pub fn snapshot(&self) -> CloudSink {
            self.shared.lock().expect("sink lock").sink.clone()
        }

        /// Blocks until the accept loop exits.
        pub fn join(mut self) {
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }

        pub fn shutdown(mut self) -> CloudSink {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
            self.snapshot()
        }
    }

    fn accept_loop(
        listener: TcpListener,
        sink: Arc<Mutex<Shared>>,
        now: TimeSource,
        stop: Arc<AtomicBool>,
    ) {
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let sink = sink.clone();
            let now = now.clone();
            std::thread::spawn(move || {
                let _ = serve_connection(stream, &sink, &now);
            });
        }
    }

    fn serve_connection(
        mut stream: TcpStream,
        shared: &Mutex<Shared>,
        now: &TimeSource,
    ) -> io::Result<()> {
        stream.set_nodelay(true)?;
        while let Some(body) = read_frame(&mut stream)? {
            let resp = match serde_json::from_slice::<Request>(&body) {
                Ok(req) => {
                    let mut guard = shared.lock().expect("sink lock");
                    let Shared { sink, journal } = &mut *guard;
                    let before = sink.sheet().len();
                    let resp = sink.handle(&req, now());
                    if let Some(j) = journal {
                        sink.sheet().save_from(before, j)?;
                    }
                    resp
                }
                Err(e) => Response::Error {
                    kind: ErrorKind::BadRequest,
                    message: e.to_string(),
                },
            };
            let bytes = serde_json::to_vec(&resp).expect("response serializes");
            write_frame(&mut stream, &bytes)?;
        }
        Ok(())
    }

    /// Client side of the socket protocol. Reconnects after any I/O failure
    /// so a late reply can never be mistaken for the next request's answer.
    pub struct SinkClient {
        addr: SocketAddr,
        token: String,
        timeout: Duration,
        stream: Option<TcpStream>,
    }

    impl SinkClient {
        pub fn new(addr: SocketAddr, token: impl Into<String>, timeout: Duration) -> Self {
            Self {
                addr,
                token: token.into(),
                timeout,
                stream: None,
            }
        }

        pub fn call(&mut self, req: &Request) -> io::Result<Response> {
            let result = self.try_call(req);
            if result.is_err() {
                self.stream = None;
            }
            result
        }

        fn try_call(&mut self, req: &Request) -> io::Result<Response> {
            if self.stream.is_none() {
                let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
                s.set_read_timeout(Some(self.timeout))?;
                s.set_write_timeout(Some(self.timeout))?;
                s.set_nodelay(true)?;
                self.stream = Some(s);
            }
            let stream = self.stream.as_mut().expect("connected");
            let body = serde_json::to_vec(req).map_err(io::Error::other)?;
            write_frame(stream, &body)?;
            let reply = read_frame(stream)?
                .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "sink closed"))?;
            serde_json::from_slice(&reply).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        }
    }

    impl Transport for SinkClient {
        fn send(&mut self, bytes: &[u8], _at: Timestamp) -> SendResult {
            let started = Instant::now();
            let req = Request::Append {
                token: self.token.clone(),
                record: String::from_utf8_lossy(bytes).into_owned(),
            };
            let outcome = match self.call(&req) {
                Ok(Response::Ack { row_index, key, .. }) => SendOutcome::Ack { row_index, key },
                Ok(Response::Error { message, .. }) => SendOutcome::Nack { reason: message },
                Ok(other) => SendOutcome::Nack {
                    reason: format!("unexpected reply {other:?}"),
                },
                Err(_) => SendOutcome::Timeout,
            };
            SendResult {
                outcome,
                elapsed: started.elapsed(),
            }
        }
    }

    impl CloudAuthority for SinkClient {
        fn query_policy(&mut self, uid: &Uid, _at: Timestamp, deadline: Duration) -> CloudResponse {
            let started = Instant::now();
            let req = Request::Query {
                token: self.token.clone(),
                uid: uid.to_string(),
            };
            let reply = match self.call(&req) {
                Ok(Response::Policy { policy }) => CloudReply::Policy(policy),
                Ok(Response::NotFound) => CloudReply::NotFound,
                _ => CloudReply::Timeout,
            };
            let elapsed = started.elapsed();
            if reply == CloudReply::Timeout {
                return CloudResponse {
                    reply,
                    elapsed: elapsed.max(deadline),
                };
            }
            CloudResponse { reply, elapsed }
        }
    }
}
