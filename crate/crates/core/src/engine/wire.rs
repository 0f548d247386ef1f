//! Framed socket protocol of the stream engine.
//!
//! ```text
//! +----------+---------+--------+------------+-----------------------------+
//! | magic 8B | ver u16 | kind   | length u64 | payload                     |
//! | CHNKWIRE | LE      | u16 LE | LE         | u64 hdr len | JSON | body   |
//! +----------+---------+--------+------------+-----------------------------+
//! ```
//!
//! The payload starts with a JSON [`Message`] header; the body after it
//! carries an encoded announcement (ANNOUNCE) or raw cell bytes (DATA).

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{EngineError, StepOutcome};
use crate::distribution::RankMeta;
use crate::model::Region;

pub const WIRE_MAGIC: [u8; 8] = *b"CHNKWIRE";
pub const WIRE_VERSION: u16 = 1;
const FRAME_HEADER: usize = 20;
const MAX_PAYLOAD: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum Kind {
    Register = 1,
    Announce = 2,
    Request = 3,
    Data = 4,
    Release = 5,
    Close = 6,
}

impl Kind {
    fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => Kind::Register,
            2 => Kind::Announce,
            3 => Kind::Request,
            4 => Kind::Data,
            5 => Kind::Release,
            6 => Kind::Close,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// A reader rank joins the control endpoint.
    RegisterReader {
        group: String,
        group_size: usize,
        member: RankMeta,
    },
    /// A reader rank opens a data connection to a writer rank.
    RegisterData { group: String, reader: usize },
    /// A non-leading writer rank joins the leader.
    RegisterWriter { member: RankMeta, data_endpoint: String },
    /// Leader to reader: a step is available. Body: encoded announcement.
    Announce { step: u64, roster: Vec<RankMeta> },
    /// Writer rank to leader: its share of a step. Body: encoded announcement.
    Contribute { step: u64 },
    /// Leader to writer rank: what became of a step.
    Outcome { step: u64, outcome: StepOutcome },
    Request {
        step: u64,
        chunk: usize,
        dataset: String,
        chunk_region: Region,
        region: Region,
    },
    /// Body: raw cell bytes of `region`.
    Data { step: u64, chunk: usize, region: Region },
    Unavailable { step: u64, chunk: usize, reason: String },
    Release { step: u64, group: String, reader: usize },
    /// Leader to writer rank: every reader is done with a step.
    Free { step: u64 },
    Close,
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::RegisterReader { .. } | Message::RegisterData { .. } | Message::RegisterWriter { .. } => {
                Kind::Register
            }
            Message::Announce { .. } | Message::Contribute { .. } | Message::Outcome { .. } => Kind::Announce,
            Message::Request { .. } => Kind::Request,
            Message::Data { .. } | Message::Unavailable { .. } => Kind::Data,
            Message::Release { .. } | Message::Free { .. } => Kind::Release,
            Message::Close => Kind::Close,
        }
    }
}

/// Serializes a message and its body into one frame.
pub fn encode_frame(msg: &Message, body: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(msg).expect("message serializes");
    let payload_len = 8 + header.len() + body.len();
    let mut out = Vec::with_capacity(FRAME_HEADER + payload_len);
    out.extend_from_slice(&WIRE_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&(msg.kind() as u16).to_le_bytes());
    out.extend_from_slice(&(payload_len as u64).to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(body);
    out
}

pub fn write_message(w: &mut impl Write, msg: &Message, body: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(msg, body))?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed the connection
/// cleanly between frames.
pub fn read_message(r: &mut impl Read) -> Result<Option<(Message, Vec<u8>)>, EngineError> {
    let mut head = [0u8; FRAME_HEADER];
    let mut got = 0;
    while got < FRAME_HEADER {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(EngineError::Protocol("connection closed inside a frame".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if head[..8] != WIRE_MAGIC {
        return Err(EngineError::Protocol("bad frame magic".into()));
    }
    let version = u16::from_le_bytes([head[8], head[9]]);
    if version != WIRE_VERSION {
        return Err(EngineError::VersionMismatch {
            found: u32::from(version),
            expected: u32::from(WIRE_VERSION),
        });
    }
    let kind = Kind::from_u16(u16::from_le_bytes([head[10], head[11]]))
        .ok_or_else(|| EngineError::Protocol("unknown frame kind".into()))?;
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap());
    if !(8..=MAX_PAYLOAD).contains(&len) {
        return Err(EngineError::Protocol(format!("bad payload length {len}")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let hlen = u64::from_le_bytes(payload[..8].try_into().unwrap());
    if hlen > len - 8 {
        return Err(EngineError::Protocol("header length exceeds payload".into()));
    }
    let hend = 8 + hlen as usize;
    let msg: Message = serde_json::from_slice(&payload[8..hend])
        .map_err(|e| EngineError::Protocol(format!("bad message header: {e}")))?;
    if msg.kind() != kind {
        return Err(EngineError::Protocol(format!(
            "message {msg:?} sent as {kind:?} frame"
        )));
    }
    payload.drain(..hend);
    Ok(Some((msg, payload)))
}
