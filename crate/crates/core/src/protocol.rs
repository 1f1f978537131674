//! Wire messages shared by both transports.
//!
//! A body is canonical UTF-8 JSON. Bodies longer than the configured
//! threshold are deflated when that makes them smaller; a compressed body is
//! prefixed with [`COMPRESSED_FLAG`], a byte that can never start a JSON
//! document, so plain bodies carry no framing at all.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::domain::{CheckpointRecord, Payload, SessionId, Task, TaskId, Transport};
use crate::error::ProtocolError;
use crate::task_queue::{Completion, PartialOutcome};

pub const COMPRESSED_FLAG: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        client_info: String,
    },
    RequestTasks {
        count: u32,
    },
    Partial {
        task_id: TaskId,
        sequence: u64,
        progress_units: u64,
        partial_payload: Payload,
    },
    Final {
        task_id: TaskId,
        sequence: u64,
        payload: Payload,
    },
}

/// What a client receives about a task: no status or dispatch bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSnapshot {
    pub task_id: TaskId,
    pub kernel_id: String,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointRecord>,
}

impl From<Task> for TaskSnapshot {
    fn from(t: Task) -> Self {
        Self {
            task_id: t.task_id,
            kernel_id: t.kernel_id,
            payload: t.payload,
            checkpoint: t.checkpoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Applied,
    Stale,
    AlreadyComplete,
    Accepted,
    Duplicate,
}

impl From<PartialOutcome> for AckStatus {
    fn from(o: PartialOutcome) -> Self {
        match o {
            PartialOutcome::Applied => AckStatus::Applied,
            PartialOutcome::Stale => AckStatus::Stale,
            PartialOutcome::AlreadyComplete => AckStatus::AlreadyComplete,
        }
    }
}

impl From<&Completion> for AckStatus {
    fn from(c: &Completion) -> Self {
        match c {
            Completion::Accepted(_) => AckStatus::Accepted,
            Completion::Duplicate => AckStatus::Duplicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    /// Reply to `Hello`; carries the session token request-response clients
    /// echo on later requests.
    Welcome { session_id: SessionId },
    Tasks { tasks: Vec<TaskSnapshot> },
    Ack { task_id: TaskId, status: AckStatus },
    Drained,
    /// The request was rejected; the session stays usable.
    Error { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub compress: bool,
    /// Bodies strictly longer than this are candidates for compression.
    pub threshold: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            compress: true,
            threshold: 8 * 1024,
        }
    }
}

/// Framing costs used for byte accounting. They never change behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverheadConfig {
    /// Header bytes of one HTTP request plus its response.
    pub request_response_per_exchange: u64,
    /// Framing bytes per message on a persistent stream.
    pub stream_per_frame: u64,
    /// One-off cost of opening the stream (the upgrade exchange).
    pub stream_handshake: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            request_response_per_exchange: 700,
            stream_per_frame: 6,
            stream_handshake: 700,
        }
    }
}

pub trait WireMessage: Serialize + for<'de> Deserialize<'de> {
    fn validate(&self) -> Result<(), ProtocolError>;
}

impl WireMessage for ClientMessage {
    fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            ClientMessage::RequestTasks { count: 0 } => {
                Err(ProtocolError::Malformed("count must be >= 1".into()))
            }
            ClientMessage::Partial { sequence: 0, .. } | ClientMessage::Final { sequence: 0, .. } => {
                Err(ProtocolError::Malformed("sequence must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl WireMessage for ServerMessage {
    fn validate(&self) -> Result<(), ProtocolError> {
        Ok(())
    }
}

pub fn encode<M: WireMessage>(message: &M, codec: &CodecConfig) -> Vec<u8> {
    let body = serde_json::to_vec(message).expect("wire messages always serialize");
    if codec.compress && body.len() > codec.threshold {
        let mut enc = DeflateEncoder::new(vec![COMPRESSED_FLAG], Compression::default());
        enc.write_all(&body).expect("writing to a Vec cannot fail");
        let packed = enc.finish().expect("writing to a Vec cannot fail");
        if packed.len() < body.len() {
            return packed;
        }
    }
    body
}

pub fn decode<M: WireMessage>(bytes: &[u8]) -> Result<M, ProtocolError> {
    let message: M = match bytes.first() {
        None => return Err(ProtocolError::Malformed("empty body".into())),
        Some(&COMPRESSED_FLAG) => {
            let mut body = Vec::new();
            DeflateDecoder::new(&bytes[1..])
                .read_to_end(&mut body)
                .map_err(|e| ProtocolError::Malformed(format!("bad compressed body: {e}")))?;
            serde_json::from_slice(&body)
        }
        Some(_) => serde_json::from_slice(bytes),
    }
    .map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    message.validate()?;
    Ok(message)
}

pub fn is_compressed(bytes: &[u8]) -> bool {
    bytes.first() == Some(&COMPRESSED_FLAG)
}

/// Estimated bytes on the wire for one encoded message. Each of the two
/// HTTP messages of an exchange is charged half the per-exchange header
/// block; a stream frame is charged the per-frame overhead.
pub fn wire_cost(encoded_len: usize, transport: Transport, overhead: &OverheadConfig) -> u64 {
    encoded_len as u64 + framing_cost(transport, overhead)
}

pub fn framing_cost(transport: Transport, overhead: &OverheadConfig) -> u64 {
    match transport {
        Transport::RequestResponse => overhead.request_response_per_exchange / 2,
        Transport::Stream => overhead.stream_per_frame,
    }
}

pub fn message_cost<M: WireMessage>(
    message: &M,
    transport: Transport,
    codec: &CodecConfig,
    overhead: &OverheadConfig,
) -> u64 {
    wire_cost(encode(message, codec).len(), transport, overhead)
}
