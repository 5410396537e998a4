//! Client for external score models speaking the QSB1 framing:
//!
//! ```text
//! "QSB1" | u32 LE header_len | header (UTF-8 JSON) | n * f64 LE payload
//! ```
//!
//! The header carries `{type, n, beta, dtype, request_id}`; responses may add
//! `message` (errors) and `level` (the noise level the model actually used).

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PriorScore;
use crate::error::{QcsError, Result};

pub const MAGIC: &[u8; 4] = b"QSB1";
pub const MAX_HEADER_LEN: u32 = 1 << 20;
pub const MAX_PAYLOAD_LEN: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge timed out")]
    Timeout,
    #[error("bridge returned {actual} values, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("bridge reported failure for request {request_id}: {message}")]
    Remote { request_id: u64, message: String },
    #[error("bridge protocol violation: {0}")]
    Protocol(String),
    #[error("bridge transport: {0}")]
    Io(io::Error),
}

impl From<io::Error> for BridgeError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout,
            _ => BridgeError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    ScoreRequest,
    ScoreResponse,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    #[serde(rename = "type")]
    pub kind: FrameType,
    pub n: usize,
    pub beta: f64,
    pub dtype: String,
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

impl FrameHeader {
    pub fn request(n: usize, beta: f64, request_id: u64) -> Self {
        FrameHeader {
            kind: FrameType::ScoreRequest,
            n,
            beta,
            dtype: "f64".into(),
            request_id,
            message: None,
            level: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<f64>,
}

pub fn encode_frame(frame: &Frame) -> std::result::Result<Vec<u8>, BridgeError> {
    if frame.header.n != frame.payload.len() {
        return Err(BridgeError::Protocol(format!(
            "header n = {} but payload has {} values",
            frame.header.n,
            frame.payload.len()
        )));
    }
    let header = serde_json::to_vec(&frame.header).map_err(|e| BridgeError::Protocol(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header.len() + 8 * frame.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> std::result::Result<(), BridgeError> {
    w.write_all(&encode_frame(frame)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one complete frame; nothing is returned unless the whole frame
/// parsed.
pub fn read_frame<R: Read>(r: &mut R) -> std::result::Result<Frame, BridgeError> {
    let mut prefix = [0u8; 8];
    r.read_exact(&mut prefix)?;
    if &prefix[..4] != MAGIC {
        return Err(BridgeError::Protocol(format!("bad magic {:?}", &prefix[..4])));
    }
    let header_len = u32::from_le_bytes(prefix[4..].try_into().expect("4 bytes"));
    if header_len > MAX_HEADER_LEN {
        return Err(BridgeError::Protocol(format!("header length {header_len} too large")));
    }
    let mut raw = vec![0u8; header_len as usize];
    r.read_exact(&mut raw)?;
    let header: FrameHeader =
        serde_json::from_slice(&raw).map_err(|e| BridgeError::Protocol(format!("header: {e}")))?;
    if header.dtype != "f64" {
        return Err(BridgeError::Protocol(format!("unsupported dtype '{}'", header.dtype)));
    }
    if header.n > MAX_PAYLOAD_LEN {
        return Err(BridgeError::Protocol(format!("payload of {} values too large", header.n)));
    }
    let mut bytes = vec![0u8; header.n * 8];
    r.read_exact(&mut bytes)?;
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Frame { header, payload })
}

/// Where the score model lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`, optionally written `tcp://host:port`.
    Tcp(String),
    /// A command whose stdin/stdout carry the frames.
    Process { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = QcsError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(addr) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let looks_like_addr = !s.contains(char::is_whitespace)
            && s.rsplit_once(':').is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
        if looks_like_addr {
            return Ok(Endpoint::Tcp(s.to_string()));
        }
        let mut parts = s.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| QcsError::Config("empty bridge endpoint".into()))?;
        Ok(Endpoint::Process {
            program,
            args: parts.collect(),
        })
    }
}

enum Transport {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: BufWriter<TcpStream>,
    },
    Process {
        child: Child,
        reader: BufReader<std::process::ChildStdout>,
        writer: BufWriter<std::process::ChildStdin>,
    },
}

/// One connection to a score server. Requests are strictly sequential.
pub struct BridgeClient {
    transport: Transport,
    next_id: u64,
}

impl BridgeClient {
    /// Connects to the endpoint. The timeout bounds each read and write on
    /// TCP connections; child processes are read without a deadline.
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> std::result::Result<Self, BridgeError> {
        let transport = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_read_timeout(Some(timeout))?;
                stream.set_write_timeout(Some(timeout))?;
                stream.set_nodelay(true)?;
                Transport::Tcp {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: BufWriter::new(stream),
                }
            }
            Endpoint::Process { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Transport::Process {
                    child,
                    reader: BufReader::new(stdout),
                    writer: BufWriter::new(stdin),
                }
            }
        };
        Ok(BridgeClient { transport, next_id: 1 })
    }

    pub fn from_tcp(stream: TcpStream) -> io::Result<Self> {
        Ok(BridgeClient {
            transport: Transport::Tcp {
                reader: BufReader::new(stream.try_clone()?),
                writer: BufWriter::new(stream),
            },
            next_id: 1,
        })
    }

    /// Sends `x` at noise level `beta` and waits for the score.
    pub fn score(&mut self, x: &[f64], beta: f64) -> std::result::Result<Vec<f64>, BridgeError> {
        let request_id = self.next_id;
        self.next_id += 1;
        let request = Frame {
            header: FrameHeader::request(x.len(), beta, request_id),
            payload: x.to_vec(),
        };
        let response = match &mut self.transport {
            Transport::Tcp { reader, writer } => {
                write_frame(writer, &request)?;
                read_frame(reader)?
            }
            Transport::Process { reader, writer, .. } => {
                write_frame(writer, &request)?;
                read_frame(reader)?
            }
        };
        let h = &response.header;
        if h.request_id != request_id {
            return Err(BridgeError::Protocol(format!(
                "response id {} for request {request_id}",
                h.request_id
            )));
        }
        match h.kind {
            FrameType::Error => {
                return Err(BridgeError::Remote {
                    request_id,
                    message: h.message.clone().unwrap_or_default(),
                })
            }
            FrameType::ScoreRequest => {
                return Err(BridgeError::Protocol("server sent a request frame".into()));
            }
            FrameType::ScoreResponse => {}
        }
        if let Some(level) = h.level {
            if level != beta {
                debug!("bridge served beta {beta} at level {level}");
            }
        }
        if response.payload.len() != x.len() {
            return Err(BridgeError::DimensionMismatch {
                expected: x.len(),
                actual: response.payload.len(),
            });
        }
        Ok(response.payload)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Transport::Process { child, .. } = &mut self.transport {
            if let Err(e) = child.kill() {
                warn!("failed to stop bridge process: {e}");
            }
            let _ = child.wait();
        }
    }
}

/// A remote score model shared by all chains. With one connection, requests
/// queue on it; with several, each request takes whichever is idle.
pub struct BridgePrior {
    dim: usize,
    clients: Vec<Mutex<BridgeClient>>,
}

impl BridgePrior {
    pub fn new(dim: usize, clients: Vec<BridgeClient>) -> Result<Self> {
        if clients.is_empty() {
            return Err(QcsError::Config("bridge prior needs at least one connection".into()));
        }
        Ok(BridgePrior {
            dim,
            clients: clients.into_iter().map(Mutex::new).collect(),
        })
    }

    pub fn connect(endpoint: &Endpoint, dim: usize, timeout: Duration, connections: usize) -> Result<Self> {
        let clients = (0..connections.max(1))
            .map(|_| BridgeClient::connect(endpoint, timeout))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(dim, clients)
    }

    pub fn connections(&self) -> usize {
        self.clients.len()
    }

    fn with_client<T>(&self, f: impl FnOnce(&mut BridgeClient) -> T) -> T {
        for c in &self.clients {
            if let Ok(mut guard) = c.try_lock() {
                return f(&mut guard);
            }
        }
        let mut guard = self.clients[0].lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

impl PriorScore for BridgePrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
        crate::error::ensure_len("bridge score input", self.dim, x.len())?;
        let out = self.with_client(|c| c.score(x.as_slice(), beta))?;
        Ok(DVector::from_vec(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    #[test]
    fn frame_round_trip_is_bit_exact() {
        let frame = Frame {
            header: FrameHeader::request(4, 0.25, 9),
            payload: vec![f64::MIN_POSITIVE, -0.0, 1e308, std::f64::consts::PI],
        };
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = read_frame(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.header, frame.header);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.payload), bits(&frame.payload));
    }

    #[test]
    fn rejects_malformed_frames() {
        let good = encode_frame(&Frame {
            header: FrameHeader::request(1, 1.0, 1),
            payload: vec![1.0],
        })
        .unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_frame(&mut bad_magic.as_slice()), Err(BridgeError::Protocol(_))));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(read_frame(&mut &truncated[..]), Err(BridgeError::Io(_))));
        let mut junk = MAGIC.to_vec();
        junk.extend_from_slice(&3u32.to_le_bytes());
        junk.extend_from_slice(b"{no");
        assert!(matches!(read_frame(&mut junk.as_slice()), Err(BridgeError::Protocol(_))));
        let mismatched = Frame {
            header: FrameHeader::request(2, 1.0, 1),
            payload: vec![1.0],
        };
        assert!(encode_frame(&mismatched).is_err());
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("127.0.0.1:5000".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:5000".into()));
        assert_eq!("tcp://host:1".parse::<Endpoint>().unwrap(), Endpoint::Tcp("host:1".into()));
        assert_eq!(
            "python3 serve.py --echo".parse::<Endpoint>().unwrap(),
            Endpoint::Process {
                program: "python3".into(),
                args: vec!["serve.py".into(), "--echo".into()]
            }
        );
        assert!("  ".parse::<Endpoint>().is_err());
    }

    #[test]
    fn timeout_is_reported() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(500));
            drop(s);
        });
        let mut client = BridgeClient::connect(&Endpoint::Tcp(addr.to_string()), Duration::from_millis(50)).unwrap();
        assert!(matches!(client.score(&[1.0], 0.5), Err(BridgeError::Timeout)));
        hold.join().unwrap();
    }
}
