//! Newline-delimited JSON evaluation channel over TCP.
//!
//! On connect the server sends `hello`; the client then sends `eval`
//! requests one at a time and receives a `result` or `error` carrying the same
//! id. `bye` from the client ends the session.
//!
//! ```text
//! < {"type":"hello","v":1,"dim":8}
//! > {"type":"eval","id":1,"x":[0.0,0.0,0.75,0.0,0.0,1.0,0.375,0.5]}
//! < {"type":"result","id":1,"cycle_time":9.75,"feasible":true,"penalized":false}
//! > {"type":"bye"}
//! < {"type":"bye"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{EntityMap, EvaluationResult, LayoutVector};
use crate::driver::Evaluator;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const ENDPOINT_ENV: &str = "CELLOPT_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    Hello {
        v: u32,
        dim: usize,
    },
    Eval {
        id: u64,
        x: Vec<f64>,
    },
    Result {
        id: u64,
        cycle_time: f64,
        feasible: bool,
        penalized: bool,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        code: String,
        message: String,
    },
    Bye,
}

impl WireMessage {
    /// One framed line, including the trailing newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire messages always serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim_end_matches(['\n', '\r']))?)
    }

    fn error(id: Option<u64>, code: &str, message: impl Into<String>) -> Self {
        WireMessage::Error {
            id,
            code: code.to_owned(),
            message: message.into(),
        }
    }
}

/// Reply to a single request line, or `None` to close the connection.
pub fn respond(line: &str, map: &Arc<EntityMap>, evaluator: &Mutex<dyn Evaluator + Send>) -> Option<WireMessage> {
    let (id, x) = match WireMessage::parse(line) {
        Ok(WireMessage::Eval { id, x }) => (id, x),
        Ok(WireMessage::Bye) => return None,
        Ok(other) => {
            let id = match other {
                WireMessage::Result { id, .. } => Some(id),
                WireMessage::Error { id, .. } => id,
                _ => None,
            };
            return Some(WireMessage::error(id, "parse", "expected an eval or bye message"));
        }
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
            return Some(WireMessage::error(id, "parse", e.to_string()));
        }
    };
    let layout = match LayoutVector::new(x, map.clone()) {
        Ok(l) => l,
        Err(e) => return Some(WireMessage::error(Some(id), "dim", e.to_string())),
    };
    let outcome = {
        let mut guard = evaluator.lock().unwrap_or_else(|p| p.into_inner());
        guard.evaluate(&layout)
    };
    Some(match outcome {
        Ok(r) => WireMessage::Result {
            id,
            cycle_time: r.objective,
            feasible: r.feasible,
            penalized: r.penalized,
        },
        Err(e) => WireMessage::error(Some(id), "eval", e.to_string()),
    })
}

fn handle_connection(stream: TcpStream, map: Arc<EntityMap>, evaluator: Arc<Mutex<dyn Evaluator + Send>>) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let hello = WireMessage::Hello {
        v: PROTOCOL_VERSION,
        dim: map.dim(),
    };
    writer.write_all(hello.to_line().as_bytes())?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        match respond(&line, &map, &evaluator) {
            Some(reply) => writer.write_all(reply.to_line().as_bytes())?,
            None => {
                writer.write_all(WireMessage::Bye.to_line().as_bytes())?;
                return Ok(());
            }
        }
    }
}

/// Stops a running [`Server`] from another thread.
#[derive(Debug, Clone)]
pub struct ShutdownHandle {
    flag: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.flag.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
    }
}

/// Evaluation server. Connections are served on their own threads; all
/// evaluations go through one shared evaluator.
pub struct Server {
    listener: TcpListener,
    map: Arc<EntityMap>,
    evaluator: Arc<Mutex<dyn Evaluator + Send>>,
    flag: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(endpoint: &str, map: Arc<EntityMap>, evaluator: impl Evaluator + Send + 'static) -> Result<Self> {
        let listener = TcpListener::bind(endpoint)
            .map_err(|e| Error::Transport(format!("cannot bind {endpoint}: {e}")))?;
        Ok(Server {
            listener,
            map,
            evaluator: Arc::new(Mutex::new(evaluator)),
            flag: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn shutdown_handle(&self) -> Result<ShutdownHandle> {
        let mut addr = self.local_addr()?;
        if addr.ip().is_unspecified() {
            addr.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        Ok(ShutdownHandle {
            flag: self.flag.clone(),
            addr,
        })
    }

    /// Accepts connections until the shutdown handle fires.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            if self.flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let map = self.map.clone();
            let evaluator = self.evaluator.clone();
            thread::spawn(move || {
                let _ = handle_connection(stream, map, evaluator);
            });
        }
        Ok(())
    }
}

/// Binds `endpoint`, reports the bound address and a shutdown handle to
/// `on_ready`, then serves until that handle fires.
pub fn serve(
    endpoint: &str,
    map: Arc<EntityMap>,
    evaluator: impl Evaluator + Send + 'static,
    on_ready: impl FnOnce(SocketAddr, ShutdownHandle),
) -> Result<()> {
    let server = Server::bind(endpoint, map, evaluator)?;
    on_ready(server.local_addr()?, server.shutdown_handle()?);
    server.run()
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    dim: usize,
}

fn transport(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Transport(format!("{context}: {e}"))
}

impl Connection {
    fn open(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = endpoint
            .to_socket_addrs()
            .map_err(|e| transport(endpoint, e))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout)).map_err(|e| transport(endpoint, e))?;
                    stream.set_write_timeout(Some(timeout)).map_err(|e| transport(endpoint, e))?;
                    stream.set_nodelay(true).map_err(|e| transport(endpoint, e))?;
                    let writer = stream.try_clone().map_err(|e| transport(endpoint, e))?;
                    let mut conn = Connection {
                        reader: BufReader::new(stream),
                        writer,
                        dim: 0,
                    };
                    match conn.receive()? {
                        WireMessage::Hello { v: PROTOCOL_VERSION, dim } => conn.dim = dim,
                        other => return Err(Error::Transport(format!("unexpected greeting {other:?}"))),
                    }
                    return Ok(conn);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) => transport(endpoint, e),
            None => Error::Transport(format!("{endpoint}: no address")),
        })
    }

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        self.writer
            .write_all(msg.to_line().as_bytes())
            .map_err(|e| transport("send", e))
    }

    fn receive(&mut self) -> Result<WireMessage> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(Error::Transport("connection closed by server".into())),
            Ok(_) => WireMessage::parse(&line).map_err(|e| transport("malformed reply", e)),
            Err(e) => Err(transport("receive", e)),
        }
    }
}

/// Blocking client. Request ids strictly increase over the client's lifetime;
/// after a transport failure the next call reconnects.
pub struct RemoteEvaluator {
    endpoint: String,
    timeout: Duration,
    penalty: f64,
    next_id: u64,
    conn: Option<Connection>,
}

impl RemoteEvaluator {
    /// Connects and reads the server greeting.
    pub fn connect(endpoint: &str, timeout: Duration, penalty: f64) -> Result<Self> {
        let conn = Connection::open(endpoint, timeout)?;
        Ok(RemoteEvaluator {
            endpoint: endpoint.to_owned(),
            timeout,
            penalty,
            next_id: 1,
            conn: Some(conn),
        })
    }

    /// Dimension announced by the server, if connected.
    pub fn dim(&self) -> Option<usize> {
        self.conn.as_ref().map(|c| c.dim)
    }

    pub fn evaluate_coords(&mut self, x: &[f64]) -> Result<EvaluationResult> {
        if self.conn.is_none() {
            self.conn = Some(Connection::open(&self.endpoint, self.timeout)?);
        }
        let id = self.next_id;
        self.next_id += 1;
        let outcome = self.exchange(id, x);
        if matches!(outcome, Err(Error::Transport(_))) {
            self.conn = None;
        }
        outcome
    }

    fn exchange(&mut self, id: u64, x: &[f64]) -> Result<EvaluationResult> {
        let conn = self.conn.as_mut().expect("connected");
        conn.send(&WireMessage::Eval { id, x: x.to_vec() })?;
        match conn.receive()? {
            WireMessage::Result {
                id: got,
                cycle_time,
                feasible,
                penalized,
            } if got == id => Ok(EvaluationResult {
                objective: cycle_time,
                feasible,
                penalized,
                timeline: None,
            }),
            WireMessage::Error { id: got, code, message } if got == Some(id) || got.is_none() => {
                Err(Error::Evaluation { code, message })
            }
            other => Err(Error::Transport(format!("reply does not match request {id}: {other:?}"))),
        }
    }

    /// Sends `bye` and waits for the acknowledgement.
    pub fn close(mut self) -> Result<()> {
        self.say_bye()
    }

    fn say_bye(&mut self) -> Result<()> {
        if let Some(mut conn) = self.conn.take() {
            conn.send(&WireMessage::Bye)?;
            conn.receive()?;
        }
        Ok(())
    }
}

impl Drop for RemoteEvaluator {
    fn drop(&mut self) {
        let _ = self.say_bye();
    }
}

impl Evaluator for RemoteEvaluator {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
        self.evaluate_coords(x.coords())
    }

    fn penalty(&self) -> f64 {
        self.penalty
    }
}

/// One-shot evaluation over a fresh connection.
pub fn remote_evaluate(endpoint: &str, x: &LayoutVector, timeout: Duration) -> Result<EvaluationResult> {
    let mut client = RemoteEvaluator::connect(endpoint, timeout, f64::NAN)?;
    let result = client.evaluate_coords(x.coords());
    let _ = client.close();
    result
}
