//! Key server: `GetKey(n)` and `KeyPoolStatus` over a length-prefixed wire
//! format. All pool mutations run on one actor thread, so concurrent
//! clients see a linearizable ledger.
//!
//! Wire: `len: u32 BE | opcode: u8 | body`, where `len` counts opcode+body.
//!
//! | opcode | message   | body                                   |
//! |--------|-----------|----------------------------------------|
//! | 0x01   | GetKey    | n: u32 BE                              |
//! | 0x02   | Status    | (empty)                                |
//! | 0x81   | Keys      | n: u32 BE, n × (index: u64 BE, 32 B)   |
//! | 0x82   | Refused   | level: u64 BE                          |
//! | 0x83   | StatusOk  | level: u64 BE, zone: u8                |
//! | 0xEE   | Error     | code: u8                               |

use std::sync::mpsc;
use std::thread;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::keypool::{Debit, KeyPool, Zone};

pub const KEY_BLOCK_BYTES: usize = 32;
pub const KEY_BLOCK_BITS: u64 = 256;

pub const OP_GET_KEY: u8 = 0x01;
pub const OP_STATUS: u8 = 0x02;
pub const OP_KEYS: u8 = 0x81;
pub const OP_REFUSED: u8 = 0x82;
pub const OP_STATUS_OK: u8 = 0x83;
pub const OP_ERROR: u8 = 0xEE;

/// Error codes carried by an `Error` response.
pub const ERR_MALFORMED: u8 = 1;
pub const ERR_ZERO_COUNT: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("length prefix {prefix} does not match {actual} body bytes")]
    LengthMismatch { prefix: usize, actual: usize },
    #[error("unknown opcode 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("malformed body for opcode 0x{0:02x}")]
    Body(u8),
    #[error("key server is not running")]
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyServerMessage {
    GetKey { n: u32 },
    KeyPoolStatus,
    Keys(Vec<(u64, [u8; KEY_BLOCK_BYTES])>),
    Refused { level: u64 },
    Status { level: u64, zone: Zone },
    Error { code: u8 },
}

impl KeyServerMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            KeyServerMessage::GetKey { n } => {
                body.push(OP_GET_KEY);
                body.extend_from_slice(&n.to_be_bytes());
            }
            KeyServerMessage::KeyPoolStatus => body.push(OP_STATUS),
            KeyServerMessage::Keys(keys) => {
                body.push(OP_KEYS);
                body.extend_from_slice(&(keys.len() as u32).to_be_bytes());
                for (idx, block) in keys {
                    body.extend_from_slice(&idx.to_be_bytes());
                    body.extend_from_slice(block);
                }
            }
            KeyServerMessage::Refused { level } => {
                body.push(OP_REFUSED);
                body.extend_from_slice(&level.to_be_bytes());
            }
            KeyServerMessage::Status { level, zone } => {
                body.push(OP_STATUS_OK);
                body.extend_from_slice(&level.to_be_bytes());
                body.push(zone.code());
            }
            KeyServerMessage::Error { code } => {
                body.push(OP_ERROR);
                body.push(*code);
            }
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 5 {
            return Err(WireError::Truncated);
        }
        let prefix = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[4..];
        if prefix != rest.len() {
            return Err(WireError::LengthMismatch {
                prefix,
                actual: rest.len(),
            });
        }
        let op = rest[0];
        let body = &rest[1..];
        let u64_at = |b: &[u8], at: usize| -> u64 {
            u64::from_be_bytes(b[at..at + 8].try_into().expect("8 bytes"))
        };
        match op {
            OP_GET_KEY if body.len() == 4 => Ok(KeyServerMessage::GetKey {
                n: u32::from_be_bytes(body.try_into().expect("4 bytes")),
            }),
            OP_STATUS if body.is_empty() => Ok(KeyServerMessage::KeyPoolStatus),
            OP_KEYS if body.len() >= 4 => {
                let n = u32::from_be_bytes(body[..4].try_into().expect("4 bytes")) as usize;
                let entry = 8 + KEY_BLOCK_BYTES;
                if body.len() != 4 + n * entry {
                    return Err(WireError::Body(op));
                }
                let keys = (0..n)
                    .map(|i| {
                        let at = 4 + i * entry;
                        let mut block = [0u8; KEY_BLOCK_BYTES];
                        block.copy_from_slice(&body[at + 8..at + entry]);
                        (u64_at(body, at), block)
                    })
                    .collect();
                Ok(KeyServerMessage::Keys(keys))
            }
            OP_REFUSED if body.len() == 8 => Ok(KeyServerMessage::Refused {
                level: u64_at(body, 0),
            }),
            OP_STATUS_OK if body.len() == 9 => Ok(KeyServerMessage::Status {
                level: u64_at(body, 0),
                zone: Zone::from_code(body[8]).ok_or(WireError::Body(op))?,
            }),
            OP_ERROR if body.len() == 1 => Ok(KeyServerMessage::Error { code: body[0] }),
            OP_GET_KEY | OP_STATUS | OP_KEYS | OP_REFUSED | OP_STATUS_OK | OP_ERROR => {
                Err(WireError::Body(op))
            }
            other => Err(WireError::UnknownOpcode(other)),
        }
    }
}

/// Deterministic key material for `index`: a ChaCha8 stream keyed by the
/// run seed, one stream per index.
pub fn synthesize_key(seed: u64, index: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

/// Synchronous server state. The engine calls it directly; [`KeyServer`]
/// wraps it in an actor for concurrent clients.
#[derive(Debug, Clone)]
pub struct KeyServerCore {
    pool: KeyPool,
    seed: u64,
    next_index: u64,
    granted_bits: u64,
}

impl KeyServerCore {
    pub fn new(pool: KeyPool, seed: u64) -> Self {
        Self {
            pool,
            seed,
            next_index: 0,
            granted_bits: 0,
        }
    }

    pub fn pool(&self) -> &KeyPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut KeyPool {
        &mut self.pool
    }

    pub fn into_pool(self) -> KeyPool {
        self.pool
    }

    pub fn granted_bits(&self) -> u64 {
        self.granted_bits
    }

    /// Reserve the next key index and return `len` bytes of material for it.
    /// Does not touch the pool; callers debit separately.
    pub fn allocate(&mut self, len: usize) -> (u64, Vec<u8>) {
        let idx = self.next_index;
        self.next_index += 1;
        (idx, synthesize_key(self.seed, idx, len))
    }

    pub fn handle(&mut self, request: &KeyServerMessage) -> KeyServerMessage {
        match *request {
            KeyServerMessage::GetKey { n: 0 } => KeyServerMessage::Error {
                code: ERR_ZERO_COUNT,
            },
            KeyServerMessage::GetKey { n } => {
                let bits = KEY_BLOCK_BITS * n as u64;
                match self.pool.debit(bits).expect("n ≥ 1 so bits > 0") {
                    Debit::Granted { bits } => {
                        self.granted_bits += bits;
                        let keys = (0..n)
                            .map(|_| {
                                let (idx, material) = self.allocate(KEY_BLOCK_BYTES);
                                let mut block = [0u8; KEY_BLOCK_BYTES];
                                block.copy_from_slice(&material);
                                (idx, block)
                            })
                            .collect();
                        KeyServerMessage::Keys(keys)
                    }
                    Debit::Refused { level } => KeyServerMessage::Refused { level },
                }
            }
            KeyServerMessage::KeyPoolStatus => KeyServerMessage::Status {
                level: self.pool.level(),
                zone: self.pool.zone(),
            },
            _ => KeyServerMessage::Error {
                code: ERR_MALFORMED,
            },
        }
    }

    /// Wire-level entry point: bytes in, bytes out.
    pub fn handle_bytes(&mut self, request: &[u8]) -> Vec<u8> {
        let resp = match KeyServerMessage::from_bytes(request) {
            Ok(msg) => self.handle(&msg),
            Err(_) => KeyServerMessage::Error {
                code: ERR_MALFORMED,
            },
        };
        resp.to_bytes()
    }
}

type Job = (Vec<u8>, mpsc::Sender<Vec<u8>>);

/// Actor-backed server. Every request is queued to one thread that owns the
/// pool, so requests are applied in a single total order.
pub struct KeyServer {
    tx: Option<mpsc::Sender<Job>>,
    worker: Option<thread::JoinHandle<KeyServerCore>>,
}

/// Cloneable client endpoint.
#[derive(Clone)]
pub struct KeyServerClient {
    tx: mpsc::Sender<Job>,
}

impl KeyServer {
    pub fn spawn(core: KeyServerCore) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = thread::spawn(move || {
            let mut core = core;
            for (req, reply) in rx {
                let resp = core.handle_bytes(&req);
                // A client that hung up does not stop the server.
                let _ = reply.send(resp);
            }
            core
        });
        Self {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    pub fn client(&self) -> KeyServerClient {
        KeyServerClient {
            tx: self.tx.clone().expect("server running"),
        }
    }

    /// Stop accepting requests once all clients are dropped and return the
    /// final state.
    pub fn shutdown(mut self) -> KeyServerCore {
        self.tx.take();
        self.worker
            .take()
            .expect("worker present")
            .join()
            .expect("key server thread panicked")
    }
}

impl KeyServerClient {
    pub fn roundtrip_bytes(&self, request: Vec<u8>) -> Result<Vec<u8>, WireError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx
            .send((request, reply_tx))
            .map_err(|_| WireError::Disconnected)?;
        reply_rx.recv().map_err(|_| WireError::Disconnected)
    }

    pub fn roundtrip(&self, request: &KeyServerMessage) -> Result<KeyServerMessage, WireError> {
        let resp = self.roundtrip_bytes(request.to_bytes())?;
        KeyServerMessage::from_bytes(&resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypool::PoolConfig;

    fn core(initial: u64) -> KeyServerCore {
        let pool = KeyPool::new(PoolConfig {
            initial,
            k_safe: 1_000,
            k_th: 2_000,
            k_cap: 1 << 40,
        })
        .unwrap();
        KeyServerCore::new(pool, 7)
    }

    #[test]
    fn wire_roundtrip() {
        let msgs = vec![
            KeyServerMessage::GetKey { n: 3 },
            KeyServerMessage::KeyPoolStatus,
            KeyServerMessage::Keys(vec![(1, [7; 32]), (2, [9; 32])]),
            KeyServerMessage::Refused { level: 55 },
            KeyServerMessage::Status {
                level: 4096,
                zone: Zone::Reconfigure,
            },
            KeyServerMessage::Error { code: 2 },
        ];
        for m in msgs {
            assert_eq!(KeyServerMessage::from_bytes(&m.to_bytes()).unwrap(), m);
        }
        assert_eq!(
            KeyServerMessage::GetKey { n: 2 }.to_bytes(),
            vec![0, 0, 0, 5, 0x01, 0, 0, 0, 2]
        );
        assert_eq!(
            KeyServerMessage::from_bytes(&[0, 0, 0, 1, 0x42]),
            Err(WireError::UnknownOpcode(0x42))
        );
        assert_eq!(
            KeyServerMessage::from_bytes(&[0, 0, 0, 3, 0x02]),
            Err(WireError::LengthMismatch {
                prefix: 3,
                actual: 1
            })
        );
    }

    #[test]
    fn status_idempotent_and_getkey_debits() {
        let mut c = core(10_000);
        let s1 = c.handle(&KeyServerMessage::KeyPoolStatus);
        let s2 = c.handle(&KeyServerMessage::KeyPoolStatus);
        assert_eq!(s1, s2);
        let KeyServerMessage::Keys(keys) = c.handle(&KeyServerMessage::GetKey { n: 2 }) else {
            panic!("expected keys");
        };
        assert_eq!(keys.len(), 2);
        assert!(keys[0].0 < keys[1].0);
        assert_eq!(c.pool().level(), 10_000 - 512);
    }

    #[test]
    fn refusal_and_zero_count() {
        let mut c = core(300);
        assert_eq!(
            c.handle(&KeyServerMessage::GetKey { n: 2 }),
            KeyServerMessage::Refused { level: 300 }
        );
        assert_eq!(
            c.handle(&KeyServerMessage::GetKey { n: 0 }),
            KeyServerMessage::Error {
                code: ERR_ZERO_COUNT
            }
        );
        assert_eq!(c.pool().level(), 300);
    }

    #[test]
    fn key_material_deterministic_per_index() {
        assert_eq!(synthesize_key(1, 5, 32), synthesize_key(1, 5, 32));
        assert_ne!(synthesize_key(1, 5, 32), synthesize_key(1, 6, 32));
        assert_eq!(synthesize_key(1, 5, 64)[..32], synthesize_key(1, 5, 32)[..]);
    }
}
