//! Secure SCADA messaging: Q3P framing around IEC-104 ASDUs, per-message
//! key cost, the key-server request protocol, injected link latency and the
//! datagram transport.

pub mod asdu;
pub mod frame;
pub mod keyserver;
pub mod latency;
pub mod transport;

use thiserror::Error;

pub use asdu::AsduMessage;
pub use frame::{
    decode_frame, encode_frame, message_key_cost, KeyLookup, KeyRing, Q3pMode,
};
pub use keyserver::{KeyServer, KeyServerClient, KeyServerCore, KeyServerMessage};
pub use latency::{inject_latency, Latency, LatencyModel};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated ({0} bytes)")]
    Truncated(usize),
    #[error("{0} trailing bytes after the MAC")]
    TrailingBytes(usize),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown mode 0x{0:02x}")]
    UnknownMode(u8),
    #[error("MAC mismatch")]
    MacMismatch,
    #[error("unknown or consumed key index {0}")]
    UnknownKeyIndex(u64),
    #[error("key block too short: need {needed} bytes, have {available}")]
    InsufficientKey { needed: usize, available: usize },
    #[error("ASDU length {0} outside 4..=249")]
    AsduLength(usize),
    #[error("empty payload")]
    EmptyPayload,
}
