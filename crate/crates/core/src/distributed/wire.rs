//! Framed request/response protocol spoken between coordinator and nodes.
//!
//! ```text
//! "RMSG" | version u8 | msg_type u8 | request_id u32 | payload_len u32 | payload | crc32 u32
//! ```
//!
//! Integers are little-endian. The CRC32 trailer covers header and payload.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use crate::error::{ResomError, Result};
use crate::io::ByteReader;

pub const MAGIC: &[u8; 4] = b"RMSG";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const DEFAULT_PACKET_BYTES: usize = 512;
/// Class id reported in `PREDICT_RESULT` when the winning neuron is unlabeled.
pub const NO_CLASS: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Init = 1,
    InitAck = 2,
    ComputeActivation = 3,
    ActivationResult = 4,
    PushActivation = 5,
    HebbStep = 6,
    Predict = 7,
    PredictResult = 8,
    Shutdown = 9,
    Error = 10,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MsgType::*;
        Some(match v {
            1 => Init,
            2 => InitAck,
            3 => ComputeActivation,
            4 => ActivationResult,
            5 => PushActivation,
            6 => HebbStep,
            7 => Predict,
            8 => PredictResult,
            9 => Shutdown,
            10 => Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub request_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

/// Mode requested by `INIT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Load maps, lateral matrices and labels for classification.
    Inference = 0,
    /// Load maps and start from zeroed lateral matrices.
    Hebbian = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Init {
        nodes: u32,
        aggregator: u32,
        mode: InitMode,
    },
    /// `classes` is the labeled class count on the aggregator, `0` elsewhere.
    InitAck {
        node_id: u32,
        neurons: u32,
        input_dim: u32,
        classes: u32,
    },
    ComputeActivation {
        input: Vec<f64>,
    },
    ActivationResult {
        values: Vec<f64>,
        bmu: u32,
    },
    /// One packet of a peer activation being moved to the aggregator.
    PushChunk {
        source: u32,
        bmu: u32,
        total_len: u32,
        offset: u32,
        data: Vec<u8>,
    },
    /// Asks a node to push its activation for this request to `target`.
    PushForward {
        target: String,
    },
    PushAck,
    /// Apply the Hebbian update with the activations stored for this request.
    HebbStep,
    /// Write the aggregator's lateral matrices into directory `dir`.
    HebbPersist {
        dir: String,
    },
    HebbAck,
    Predict,
    /// `class` is `None` when the winning neuron has no label.
    PredictResult {
        class: Option<u16>,
        map: u32,
        neuron: u32,
    },
    Shutdown,
    Error {
        text: String,
    },
}

const PUSH_CHUNK: u8 = 0;
const PUSH_FORWARD: u8 = 1;
const PUSH_ACK: u8 = 2;
const HEBB_APPLY: u8 = 0;
const HEBB_PERSIST: u8 = 1;
const HEBB_ACK: u8 = 2;

fn f64s(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn perr(msg: impl Into<String>) -> ResomError {
    ResomError::Protocol(msg.into())
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        use Message::*;
        match self {
            Init { .. } => MsgType::Init,
            InitAck { .. } => MsgType::InitAck,
            ComputeActivation { .. } => MsgType::ComputeActivation,
            ActivationResult { .. } => MsgType::ActivationResult,
            PushChunk { .. } | PushForward { .. } | PushAck => MsgType::PushActivation,
            HebbStep | HebbPersist { .. } | HebbAck => MsgType::HebbStep,
            Predict => MsgType::Predict,
            PredictResult { .. } => MsgType::PredictResult,
            Shutdown => MsgType::Shutdown,
            Error { .. } => MsgType::Error,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        use Message::*;
        let mut p = Vec::new();
        match self {
            Init {
                nodes,
                aggregator,
                mode,
            } => {
                p.extend_from_slice(&nodes.to_le_bytes());
                p.extend_from_slice(&aggregator.to_le_bytes());
                p.push(*mode as u8);
            }
            InitAck {
                node_id,
                neurons,
                input_dim,
                classes,
            } => {
                for x in [node_id, neurons, input_dim, classes] {
                    p.extend_from_slice(&x.to_le_bytes());
                }
            }
            ComputeActivation { input } => f64s(input, &mut p),
            ActivationResult { values, bmu } => {
                f64s(values, &mut p);
                p.extend_from_slice(&bmu.to_le_bytes());
            }
            PushChunk {
                source,
                bmu,
                total_len,
                offset,
                data,
            } => {
                p.push(PUSH_CHUNK);
                for x in [source, bmu, total_len, offset] {
                    p.extend_from_slice(&x.to_le_bytes());
                }
                p.extend_from_slice(data);
            }
            PushForward { target } => {
                p.push(PUSH_FORWARD);
                p.extend_from_slice(target.as_bytes());
            }
            PushAck => p.push(PUSH_ACK),
            HebbStep => p.push(HEBB_APPLY),
            HebbPersist { dir } => {
                p.push(HEBB_PERSIST);
                p.extend_from_slice(dir.as_bytes());
            }
            HebbAck => p.push(HEBB_ACK),
            Predict | Shutdown => {}
            PredictResult { class, map, neuron } => {
                p.extend_from_slice(&class.unwrap_or(NO_CLASS).to_le_bytes());
                p.extend_from_slice(&map.to_le_bytes());
                p.extend_from_slice(&neuron.to_le_bytes());
            }
            Error { text } => p.extend_from_slice(text.as_bytes()),
        }
        p
    }

    pub fn to_frame(&self, request_id: u32) -> Frame {
        Frame {
            msg_type: self.msg_type() as u8,
            request_id,
            payload: self.payload(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let t = MsgType::from_u8(frame.msg_type)
            .ok_or_else(|| perr(format!("unknown message type {}", frame.msg_type)))?;
        let p = frame.payload.as_slice();
        let mut r = ByteReader::new(p);
        let text =
            |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| perr("payload is not utf-8"));
        let f64_body = |b: &[u8]| -> Result<Vec<f64>> {
            if !b.len().is_multiple_of(8) {
                return Err(perr(format!(
                    "{} bytes is not a whole number of f64",
                    b.len()
                )));
            }
            Ok(b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let msg = match t {
            MsgType::Init => {
                let nodes = r.u32_le("node count")?;
                let aggregator = r.u32_le("aggregator id")?;
                let mode = match r.take(1, "mode")?[0] {
                    0 => InitMode::Inference,
                    1 => InitMode::Hebbian,
                    m => return Err(perr(format!("unknown init mode {m}"))),
                };
                Message::Init {
                    nodes,
                    aggregator,
                    mode,
                }
            }
            MsgType::InitAck => Message::InitAck {
                node_id: r.u32_le("node id")?,
                neurons: r.u32_le("neurons")?,
                input_dim: r.u32_le("input dim")?,
                classes: r.u32_le("classes")?,
            },
            MsgType::ComputeActivation => {
                return Ok(Message::ComputeActivation {
                    input: f64_body(p)?,
                })
            }
            MsgType::ActivationResult => {
                if p.len() < 4 {
                    return Err(perr("activation result too short"));
                }
                let (values, bmu) = p.split_at(p.len() - 4);
                return Ok(Message::ActivationResult {
                    values: f64_body(values)?,
                    bmu: u32::from_le_bytes(bmu.try_into().unwrap()),
                });
            }
            MsgType::PushActivation => match r.take(1, "push kind")?[0] {
                PUSH_CHUNK => {
                    let source = r.u32_le("source")?;
                    let bmu = r.u32_le("bmu")?;
                    let total_len = r.u32_le("total length")?;
                    let offset = r.u32_le("offset")?;
                    let data = r.take(r.remaining(), "chunk")?.to_vec();
                    Message::PushChunk {
                        source,
                        bmu,
                        total_len,
                        offset,
                        data,
                    }
                }
                PUSH_FORWARD => {
                    return Ok(Message::PushForward {
                        target: text(&p[1..])?,
                    })
                }
                PUSH_ACK => Message::PushAck,
                k => return Err(perr(format!("unknown push kind {k}"))),
            },
            MsgType::HebbStep => match r.take(1, "hebb kind")?[0] {
                HEBB_APPLY => Message::HebbStep,
                HEBB_PERSIST => {
                    return Ok(Message::HebbPersist {
                        dir: text(&p[1..])?,
                    })
                }
                HEBB_ACK => Message::HebbAck,
                k => return Err(perr(format!("unknown hebb kind {k}"))),
            },
            MsgType::Predict => Message::Predict,
            MsgType::PredictResult => {
                let class = r.u16_le("class")?;
                Message::PredictResult {
                    class: (class != NO_CLASS).then_some(class),
                    map: r.u32_le("map")?,
                    neuron: r.u32_le("neuron")?,
                }
            }
            MsgType::Shutdown => Message::Shutdown,
            MsgType::Error => {
                return Ok(Message::Error {
                    text: String::from_utf8_lossy(p).into_owned(),
                })
            }
        };
        if r.remaining() != 0 {
            return Err(perr(format!(
                "{} trailing payload bytes in {t:?}",
                r.remaining()
            )));
        }
        Ok(msg)
    }
}

/// What a [`FrameReader`] pulled off the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Incoming {
    Frame(Frame),
    /// Bytes that did not form a valid frame were dropped. `request_id` is
    /// set when the header was readable.
    Malformed {
        request_id: Option<u32>,
        reason: String,
    },
}

pub const CHECKSUM_MISMATCH: &str = "checksum mismatch";

/// Incremental frame decoder that resynchronizes on the magic after
/// garbage or corrupt frames.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::new(),
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Reads until at least `n` bytes are buffered; `false` on clean EOF.
    fn fill(&mut self, n: usize) -> io::Result<bool> {
        let mut chunk = [0u8; 8192];
        while self.buf.len() < n {
            let got = self.inner.read(&mut chunk)?;
            if got == 0 {
                return Ok(false);
            }
            self.buf.extend_from_slice(&chunk[..got]);
        }
        Ok(true)
    }

    /// `None` on end of stream.
    pub fn next_incoming(&mut self) -> io::Result<Option<Incoming>> {
        let mut skipped = 0usize;
        loop {
            match find_magic(&self.buf) {
                Some(0) => break,
                Some(pos) => {
                    self.buf.drain(..pos);
                    skipped += pos;
                    break;
                }
                None => {
                    let keep = self.buf.len().min(MAGIC.len() - 1);
                    let drop = self.buf.len() - keep;
                    self.buf.drain(..drop);
                    skipped += drop;
                    if !self.fill(self.buf.len() + 1)? {
                        skipped += self.buf.len();
                        self.buf.clear();
                        return Ok((skipped > 0).then(|| garbage(skipped)));
                    }
                }
            }
        }
        if skipped > 0 {
            return Ok(Some(garbage(skipped)));
        }
        if !self.fill(HEADER_LEN)? {
            return eof_mid_frame(self.buf.len());
        }
        let request_id = u32::from_le_bytes(self.buf[6..10].try_into().unwrap());
        let version = self.buf[4];
        if version != VERSION {
            self.buf.drain(..1);
            return Ok(Some(Incoming::Malformed {
                request_id: Some(request_id),
                reason: format!("unsupported protocol version {version}"),
            }));
        }
        let len = u32::from_le_bytes(self.buf[10..14].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            self.buf.drain(..1);
            return Ok(Some(Incoming::Malformed {
                request_id: Some(request_id),
                reason: format!("payload length {len} exceeds {MAX_PAYLOAD}"),
            }));
        }
        let total = HEADER_LEN + len + TRAILER_LEN;
        if !self.fill(total)? {
            return eof_mid_frame(self.buf.len());
        }
        let expected = u32::from_le_bytes(self.buf[total - 4..total].try_into().unwrap());
        let actual = crc32fast::hash(&self.buf[..total - 4]);
        if expected != actual {
            self.buf.drain(..total);
            return Ok(Some(Incoming::Malformed {
                request_id: Some(request_id),
                reason: CHECKSUM_MISMATCH.into(),
            }));
        }
        let frame = Frame {
            msg_type: self.buf[5],
            request_id,
            payload: self.buf[HEADER_LEN..HEADER_LEN + len].to_vec(),
        };
        self.buf.drain(..total);
        Ok(Some(Incoming::Frame(frame)))
    }
}

fn garbage(n: usize) -> Incoming {
    Incoming::Malformed {
        request_id: None,
        reason: format!("skipped {n} bytes before a frame magic"),
    }
}

fn eof_mid_frame<T>(have: usize) -> io::Result<T> {
    Err(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("stream ended inside a frame ({have} bytes buffered)"),
    ))
}

fn find_magic(buf: &[u8]) -> Option<usize> {
    buf.windows(MAGIC.len()).position(|w| w == MAGIC)
}

pub fn write_message<W: Write>(w: &mut W, request_id: u32, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.to_frame(request_id).encode())?;
    w.flush()
}

/// Splits an activation vector into `PushChunk` messages carrying at most
/// `packet_bytes` bytes of little-endian f64 data each.
pub fn chunk_activation(
    source: u32,
    values: &[f64],
    bmu: u32,
    packet_bytes: usize,
) -> Result<Vec<Message>> {
    validate_packet_bytes(packet_bytes)?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    f64s(values, &mut bytes);
    let total_len = bytes.len() as u32;
    if bytes.is_empty() {
        return Err(ResomError::Transfer(
            "cannot push an empty activation".into(),
        ));
    }
    Ok(bytes
        .chunks(packet_bytes)
        .enumerate()
        .map(|(i, c)| Message::PushChunk {
            source,
            bmu,
            total_len,
            offset: (i * packet_bytes) as u32,
            data: c.to_vec(),
        })
        .collect())
}

pub fn validate_packet_bytes(packet_bytes: usize) -> Result<()> {
    if packet_bytes == 0 || !packet_bytes.is_multiple_of(8) {
        return Err(ResomError::Param(format!(
            "packet_payload_bytes must be a positive multiple of 8 (got {packet_bytes})"
        )));
    }
    Ok(())
}

#[derive(Debug)]
struct Partial {
    bmu: u32,
    bytes: Vec<u8>,
    filled: Vec<bool>,
    received: usize,
}

/// Rebuilds activations from `PushChunk` packets, keyed by request and
/// source node. Chunks may arrive in any order; duplicates are ignored.
#[derive(Debug, Default)]
pub struct Reassembler {
    partial: HashMap<(u32, u32), Partial>,
}

/// A completed peer activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reassembled {
    pub source: u32,
    pub bmu: u32,
    pub values: Vec<f64>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    pub fn accept(
        &mut self,
        request_id: u32,
        source: u32,
        bmu: u32,
        total_len: u32,
        offset: u32,
        data: &[u8],
    ) -> Result<Option<Reassembled>> {
        let total = total_len as usize;
        let start = offset as usize;
        if total == 0 || !total.is_multiple_of(8) || total > MAX_PAYLOAD {
            return Err(ResomError::Transfer(format!(
                "bad activation length {total}"
            )));
        }
        if data.is_empty() || start + data.len() > total {
            return Err(ResomError::Transfer(format!(
                "chunk [{start}, {}) outside activation of {total} bytes",
                start + data.len()
            )));
        }
        let key = (request_id, source);
        let p = self.partial.entry(key).or_insert_with(|| Partial {
            bmu,
            bytes: vec![0; total],
            filled: vec![false; total],
            received: 0,
        });
        if p.bytes.len() != total || p.bmu != bmu {
            self.partial.remove(&key);
            return Err(ResomError::Transfer(
                "chunks of one activation disagree on its header".into(),
            ));
        }
        for (i, b) in data.iter().enumerate() {
            let at = start + i;
            if !p.filled[at] {
                p.filled[at] = true;
                p.received += 1;
            }
            p.bytes[at] = *b;
        }
        if p.received < total {
            return Ok(None);
        }
        let p = self.partial.remove(&key).unwrap();
        Ok(Some(Reassembled {
            source,
            bmu: p.bmu,
            values: p
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }))
    }

    /// Drops every partial activation belonging to `request_id`.
    pub fn discard(&mut self, request_id: u32) {
        self.partial.retain(|(r, _), _| *r != request_id);
    }
}
