//! Two-party transport: length-prefixed frames, round and byte accounting,
//! optional synthetic latency.
//!
//! Wire frame: `len: u32 BE | msg_type: u8 | session: u16 BE | payload`,
//! where `len = payload.len() + 3`. Ring words inside payloads are
//! little-endian.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Upper bound on a single frame's declared length.
pub const MAX_FRAME: usize = 1 << 30;
pub const HEADER_LEN: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    /// Plain ring words (openings, Beaver d/e).
    Words = 1,
    /// Masked lookup inputs.
    Lookup = 2,
    /// Share-conversion openings.
    Convert = 3,
    /// Compressed curve points.
    Points = 4,
    /// Test-harness openings that are not part of any protocol.
    Harness = 5,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<MsgType> {
        Some(match b {
            1 => MsgType::Words,
            2 => MsgType::Lookup,
            3 => MsgType::Convert,
            4 => MsgType::Points,
            5 => MsgType::Harness,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&((self.payload.len() + 3) as u32).to_be_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one frame from the front of `buf`, returning it and the bytes used.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize)> {
        if buf.len() < 4 {
            return Err(Error::FrameCorrupt("short length prefix".into()));
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        let (msg_type, session) = Self::parse_header(len, &buf[4..])?;
        if buf.len() < 4 + len {
            return Err(Error::FrameCorrupt(format!(
                "declared {len} bytes, have {}",
                buf.len() - 4
            )));
        }
        let payload = buf[HEADER_LEN..4 + len].to_vec();
        Ok((
            Frame {
                msg_type,
                session,
                payload,
            },
            4 + len,
        ))
    }

    fn parse_header(len: usize, rest: &[u8]) -> Result<(MsgType, u16)> {
        if len < 3 {
            return Err(Error::FrameCorrupt(format!(
                "length {len} below header size"
            )));
        }
        if len > MAX_FRAME {
            return Err(Error::FrameCorrupt(format!("length {len} over limit")));
        }
        if rest.len() < 3 {
            return Err(Error::FrameCorrupt("truncated header".into()));
        }
        let msg_type = MsgType::from_u8(rest[0])
            .ok_or_else(|| Error::FrameCorrupt(format!("unknown message type {}", rest[0])))?;
        Ok((msg_type, u16::from_be_bytes([rest[1], rest[2]])))
    }
}

pub fn words_to_bytes(words: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn bytes_to_words(bytes: &[u8]) -> Result<Vec<u64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::FrameCorrupt(format!(
            "{} bytes is not a whole number of words",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// A duplex byte pipe carrying encoded frames.
pub trait Transport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    fn recv(&mut self, timeout: Duration) -> Result<Frame>;
}

pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl Transport for Loopback {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::ConnectionFailed("loopback peer hung up".into()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame> {
        let buf = match self.rx.recv_timeout(timeout) {
            Ok(b) => b,
            Err(RecvTimeoutError::Timeout) => return Err(Error::PeerTimeout),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::ConnectionFailed("loopback peer hung up".into()))
            }
        };
        let (frame, used) = Frame::decode(&buf)?;
        if used != buf.len() {
            return Err(Error::FrameCorrupt("trailing bytes after frame".into()));
        }
        Ok(frame)
    }
}

/// Raw byte-level loopback endpoints, for feeding arbitrary bytes to a session.
pub fn loopback_transports() -> (Loopback, Loopback) {
    let (tx0, rx1) = mpsc::channel();
    let (tx1, rx0) = mpsc::channel();
    (Loopback { tx: tx0, rx: rx0 }, Loopback { tx: tx1, rx: rx1 })
}

pub struct Tcp {
    stream: TcpStream,
}

impl Tcp {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Tcp { stream })
    }
}

impl Transport for Tcp {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame> {
        self.stream.set_read_timeout(Some(timeout))?;
        let mut len = [0u8; 4];
        read_full(&mut self.stream, &mut len)?;
        let n = u32::from_be_bytes(len) as usize;
        let mut head = [0u8; 3];
        if n >= 3 {
            read_full(&mut self.stream, &mut head)?;
        }
        let (msg_type, session) = Frame::parse_header(n, &head)?;
        let mut payload = vec![0u8; n - 3];
        read_full(&mut self.stream, &mut payload)?;
        Ok(Frame {
            msg_type,
            session,
            payload,
        })
    }
}

fn read_full(s: &mut TcpStream, buf: &mut [u8]) -> Result<()> {
    s.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => Error::PeerTimeout,
        std::io::ErrorKind::UnexpectedEof => Error::FrameCorrupt("stream ended mid-frame".into()),
        _ => Error::Io(e),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionStats {
    pub rounds: u64,
    pub frames_sent: u64,
    /// Payload bytes sent, excluding framing.
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wall: Duration,
}

impl SessionStats {
    /// Payload plus the 3 bytes of type and session id per frame.
    pub fn framed_bytes_sent(&self) -> u64 {
        self.bytes_sent + 3 * self.frames_sent
    }

    pub fn since(&self, earlier: &SessionStats) -> SessionStats {
        SessionStats {
            rounds: self.rounds - earlier.rounds,
            frames_sent: self.frames_sent - earlier.frames_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            wall: self.wall.saturating_sub(earlier.wall),
        }
    }
}

/// Synthetic link model: each frame is delayed by latency + size/bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Netem {
    pub latency: Duration,
    /// Bytes per second; zero means unlimited.
    pub bandwidth: f64,
}

impl Netem {
    pub const LAN: Netem = Netem {
        latency: Duration::from_micros(250),
        bandwidth: 620e6,
    };
    pub const WAN: Netem = Netem {
        latency: Duration::from_millis(48),
        bandwidth: 32e6,
    };

    pub fn delay_for(&self, bytes: usize) -> Duration {
        let transfer = if self.bandwidth > 0.0 {
            bytes as f64 / self.bandwidth
        } else {
            0.0
        };
        self.latency + Duration::from_secs_f64(transfer)
    }
}

pub struct Session {
    party: u8,
    id: u16,
    transport: Box<dyn Transport>,
    stats: SessionStats,
    netem: Option<Netem>,
    timeout: Duration,
}

impl Session {
    pub fn new(party: u8, id: u16, transport: Box<dyn Transport>) -> Self {
        Session {
            party,
            id,
            transport,
            stats: SessionStats::default(),
            netem: None,
            timeout: Duration::from_secs(600),
        }
    }

    pub fn party(&self) -> u8 {
        self.party
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn with_netem(mut self, latency_ms: f64, bandwidth_mb_s: f64) -> Self {
        self.netem = if latency_ms <= 0.0 && bandwidth_mb_s <= 0.0 {
            None
        } else {
            Some(Netem {
                latency: Duration::from_secs_f64(latency_ms.max(0.0) / 1000.0),
                bandwidth: bandwidth_mb_s.max(0.0) * 1e6,
            })
        };
        self
    }

    pub fn set_netem(&mut self, netem: Option<Netem>) {
        self.netem = netem;
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Simultaneous send and receive; one round.
    pub fn exchange(&mut self, msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
        let start = Instant::now();
        let frame = Frame {
            msg_type,
            session: self.id,
            payload: payload.to_vec(),
        }
        .encode();
        self.transport.send(&frame)?;
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += payload.len() as u64;
        if let Some(n) = self.netem {
            std::thread::sleep(n.delay_for(payload.len() + 3));
        }
        let got = self.transport.recv(self.timeout)?;
        if got.session != self.id {
            return Err(Error::FrameCorrupt(format!(
                "session {} on session {}",
                got.session, self.id
            )));
        }
        if got.msg_type != msg_type {
            return Err(Error::FrameCorrupt(format!(
                "expected {msg_type:?}, got {:?}",
                got.msg_type
            )));
        }
        self.stats.rounds += 1;
        self.stats.bytes_received += got.payload.len() as u64;
        self.stats.wall += start.elapsed();
        Ok(got.payload)
    }

    /// Exchanges equally long word vectors.
    pub fn exchange_words(&mut self, msg_type: MsgType, words: &[u64]) -> Result<Vec<u64>> {
        let back = bytes_to_words(&self.exchange(msg_type, &words_to_bytes(words))?)?;
        if back.len() != words.len() {
            return Err(Error::FrameCorrupt(format!(
                "peer sent {} words, expected {}",
                back.len(),
                words.len()
            )));
        }
        Ok(back)
    }
}

pub fn loopback_pair(session_id: u16) -> (Session, Session) {
    let (a, b) = loopback_transports();
    (
        Session::new(0, session_id, Box::new(a)),
        Session::new(1, session_id, Box::new(b)),
    )
}

/// Party 0 listens, party 1 connects.
pub fn tcp_listen(addr: impl ToSocketAddrs, session_id: u16) -> Result<Session> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::ConnectionFailed(e.to_string()))?;
    let (stream, _) = listener
        .accept()
        .map_err(|e| Error::ConnectionFailed(e.to_string()))?;
    Ok(Session::new(0, session_id, Box::new(Tcp::new(stream)?)))
}

pub fn tcp_connect(
    addr: impl ToSocketAddrs + Clone,
    session_id: u16,
    retry_for: Duration,
) -> Result<Session> {
    let deadline = Instant::now() + retry_for;
    loop {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => return Ok(Session::new(1, session_id, Box::new(Tcp::new(s)?))),
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::ConnectionFailed(e.to_string()))
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}
