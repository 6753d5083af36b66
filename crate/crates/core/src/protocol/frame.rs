//! Q3P secure frame: header, ciphertext and truncated HMAC tag.
//!
//! ```text
//! 0      1      2              10       12            12+n       28+n
//! +------+------+--------------+--------+-------------+----------+
//! | ver  | mode | key_index BE | len BE | payload (n) | MAC (16) |
//! +------+------+--------------+--------+-------------+----------+
//! ```

use std::collections::HashMap;

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use super::asdu::AsduMessage;
use super::FrameError;

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAC_LEN: usize = 16;
pub const MIN_FRAME_LEN: usize = HEADER_LEN + MAC_LEN;
/// Session key bits charged per AES-mode message.
pub const AES_KEY_BITS: u64 = 128;

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Q3pMode {
    Aes = 0x01,
    Otp = 0x02,
}

impl TryFrom<u8> for Q3pMode {
    type Error = FrameError;
    fn try_from(b: u8) -> Result<Self, FrameError> {
        match b {
            0x01 => Ok(Q3pMode::Aes),
            0x02 => Ok(Q3pMode::Otp),
            other => Err(FrameError::UnknownMode(other)),
        }
    }
}

/// Key bits a message consumes: one per plaintext bit under OTP, a fixed
/// session key under AES.
pub fn message_key_cost(mode: u8, payload_len: usize) -> Result<u64, FrameError> {
    if payload_len == 0 {
        return Err(FrameError::EmptyPayload);
    }
    Ok(match Q3pMode::try_from(mode)? {
        Q3pMode::Otp => 8 * payload_len as u64,
        Q3pMode::Aes => AES_KEY_BITS,
    })
}

/// Bytes of key material a message needs.
pub fn key_bytes_needed(mode: Q3pMode, payload_len: usize) -> usize {
    match mode {
        Q3pMode::Otp => payload_len,
        Q3pMode::Aes => (AES_KEY_BITS / 8) as usize,
    }
}

/// MAC subkey: the last 16 bytes of SHA-256 over the key block.
pub fn mac_subkey(key_block: &[u8]) -> [u8; 16] {
    let digest = Sha256::digest(key_block);
    let mut k = [0u8; 16];
    k.copy_from_slice(&digest[16..]);
    k
}

fn tag(subkey: &[u8; 16], authenticated: &[u8]) -> [u8; MAC_LEN] {
    let mut mac = HmacSha256::new_from_slice(subkey).expect("HMAC accepts any key length");
    mac.update(authenticated);
    let full = mac.finalize().into_bytes();
    let mut t = [0u8; MAC_LEN];
    t.copy_from_slice(&full[..MAC_LEN]);
    t
}

fn apply_cipher(mode: Q3pMode, key_block: &[u8], key_index: u64, data: &mut [u8]) {
    match mode {
        Q3pMode::Otp => {
            for (d, k) in data.iter_mut().zip(key_block) {
                *d ^= k;
            }
        }
        Q3pMode::Aes => {
            let mut iv = [0u8; 16];
            iv[..8].copy_from_slice(&key_index.to_be_bytes());
            let mut c = Aes128Ctr::new(key_block[..16].into(), &iv.into());
            c.apply_keystream(data);
        }
    }
}

pub fn encode_frame(
    asdu: &AsduMessage,
    mode: Q3pMode,
    key_block: &[u8],
    key_index: u64,
) -> Result<Vec<u8>, FrameError> {
    let mut payload = asdu.to_bytes()?;
    let need = key_bytes_needed(mode, payload.len());
    if key_block.len() < need {
        return Err(FrameError::InsufficientKey {
            needed: need,
            available: key_block.len(),
        });
    }
    apply_cipher(mode, key_block, key_index, &mut payload);
    let mut out = Vec::with_capacity(MIN_FRAME_LEN + payload.len());
    out.push(VERSION);
    out.push(mode as u8);
    out.extend_from_slice(&key_index.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&payload);
    let t = tag(&mac_subkey(key_block), &out);
    out.extend_from_slice(&t);
    Ok(out)
}

/// Parsed header of a frame whose length fields are consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u8,
    pub mode: Q3pMode,
    pub key_index: u64,
    pub payload_len: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<FrameHeader, FrameError> {
    if bytes.len() < MIN_FRAME_LEN {
        return Err(FrameError::Truncated(bytes.len()));
    }
    let version = bytes[0];
    if version != VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let mode = Q3pMode::try_from(bytes[1])?;
    let key_index = u64::from_be_bytes(bytes[2..10].try_into().expect("8 bytes"));
    let payload_len = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
    let expected = MIN_FRAME_LEN + payload_len;
    if bytes.len() < expected {
        return Err(FrameError::Truncated(bytes.len()));
    }
    if bytes.len() > expected {
        return Err(FrameError::TrailingBytes(bytes.len() - expected));
    }
    Ok(FrameHeader {
        version,
        mode,
        key_index,
        payload_len,
    })
}

/// Source of key blocks for decoding. Blocks are single use: a block is
/// consumed once a frame under it verifies.
pub trait KeyLookup {
    fn key(&self, index: u64) -> Option<&[u8]>;
    fn consume(&mut self, index: u64);
}

#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: HashMap<u64, Vec<u8>>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: u64, block: Vec<u8>) {
        self.keys.insert(index, block);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl KeyLookup for KeyRing {
    fn key(&self, index: u64) -> Option<&[u8]> {
        self.keys.get(&index).map(Vec::as_slice)
    }

    fn consume(&mut self, index: u64) {
        self.keys.remove(&index);
    }
}

/// Parse, authenticate (constant-time), decrypt and deserialize.
pub fn decode_frame<K: KeyLookup + ?Sized>(
    bytes: &[u8],
    keys: &mut K,
) -> Result<AsduMessage, FrameError> {
    let h = parse_header(bytes)?;
    let block = keys
        .key(h.key_index)
        .ok_or(FrameError::UnknownKeyIndex(h.key_index))?;
    let body_end = HEADER_LEN + h.payload_len;
    let expect = tag(&mac_subkey(block), &bytes[..body_end]);
    if !bool::from(expect.ct_eq(&bytes[body_end..])) {
        return Err(FrameError::MacMismatch);
    }
    let need = key_bytes_needed(h.mode, h.payload_len);
    if block.len() < need {
        return Err(FrameError::InsufficientKey {
            needed: need,
            available: block.len(),
        });
    }
    let mut plain = bytes[HEADER_LEN..body_end].to_vec();
    apply_cipher(h.mode, block, h.key_index, &mut plain);
    keys.consume(h.key_index);
    AsduMessage::from_bytes(&plain)
}
