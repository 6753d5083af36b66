use std::thread;

use proptest::prelude::*;
use qkd_scada::keypool::{KeyPool, PoolConfig};
use qkd_scada::protocol::frame::{MAC_LEN, MIN_FRAME_LEN};
use qkd_scada::protocol::keyserver::KeyServerCore;
use qkd_scada::protocol::{
    decode_frame, encode_frame, message_key_cost, AsduMessage, FrameError, KeyRing, KeyServer,
    KeyServerMessage, Q3pMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Golden {
    name: String,
    mode: u8,
    key_index: u64,
    key_block: String,
    asdu: String,
    frame: String,
}

fn golden() -> Vec<Golden> {
    serde_json::from_str(include_str!("fixtures/q3p_golden.json")).unwrap()
}

#[test]
fn golden_vectors_encode_and_decode() {
    for g in golden() {
        let key = hex::decode(&g.key_block).unwrap();
        let asdu = AsduMessage::from_bytes(&hex::decode(&g.asdu).unwrap()).unwrap();
        let mode = Q3pMode::try_from(g.mode).unwrap();
        let frame = encode_frame(&asdu, mode, &key, g.key_index).unwrap();
        assert_eq!(hex::encode(&frame), g.frame, "{}", g.name);
        let mut ring = KeyRing::new();
        ring.insert(g.key_index, key);
        assert_eq!(decode_frame(&frame, &mut ring).unwrap(), asdu, "{}", g.name);
    }
}

fn asdu_strategy() -> impl Strategy<Value = AsduMessage> {
    (any::<u8>(), any::<u8>(), any::<u16>(), prop::collection::vec(any::<u8>(), 0..=245)).prop_map(
        |(type_id, cause_of_transmission, common_address, info_object)| AsduMessage {
            type_id,
            cause_of_transmission,
            common_address,
            info_object,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn frame_roundtrip(m in asdu_strategy(), otp in any::<bool>(), idx in any::<u64>(),
                       key in prop::collection::vec(any::<u8>(), 249..300)) {
        let mode = if otp { Q3pMode::Otp } else { Q3pMode::Aes };
        let f = encode_frame(&m, mode, &key, idx).unwrap();
        prop_assert_eq!(f.len(), MIN_FRAME_LEN + m.encoded_len());
        let mut ring = KeyRing::new();
        ring.insert(idx, key);
        prop_assert_eq!(decode_frame(&f, &mut ring).unwrap(), m);
        prop_assert!(ring.is_empty());
    }

    #[test]
    fn any_bit_flip_after_header_is_rejected(m in asdu_strategy(), bit in any::<prop::sample::Index>(),
                                             key in prop::collection::vec(any::<u8>(), 249..=249)) {
        let f = encode_frame(&m, Q3pMode::Otp, &key, 3).unwrap();
        let mut g = f.clone();
        let span = (f.len() - 12) * 8;
        let b = 12 * 8 + bit.index(span);
        g[b / 8] ^= 1 << (b % 8);
        let mut ring = KeyRing::new();
        ring.insert(3, key);
        prop_assert_eq!(decode_frame(&g, &mut ring), Err(FrameError::MacMismatch));
    }

    #[test]
    fn otp_cost_monotone(len in 1usize..249) {
        prop_assert!(message_key_cost(2, len + 1).unwrap() > message_key_cost(2, len).unwrap());
        prop_assert_eq!(message_key_cost(1, len).unwrap(), 128);
    }
}

#[test]
fn random_tags_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = AsduMessage::setpoint(1, 2, 50.0, 16);
    let key: Vec<u8> = (0..32).map(|_| rng.gen()).collect();
    let f = encode_frame(&m, Q3pMode::Aes, &key, 1).unwrap();
    let mut ring = KeyRing::new();
    ring.insert(1, key);
    let body = f.len() - MAC_LEN;
    for _ in 0..10_000 {
        let mut g = f.clone();
        rng.fill(&mut g[body..]);
        if g == f {
            continue;
        }
        assert_eq!(decode_frame(&g, &mut ring), Err(FrameError::MacMismatch));
    }
}

#[test]
fn concurrent_getkey_storm_keeps_ledger_exact() {
    let initial = 1_000_000u64;
    let pool = KeyPool::new(PoolConfig {
        initial,
        k_safe: 10_000,
        k_th: 20_000,
        k_cap: 2_000_000,
    })
    .unwrap();
    let server = KeyServer::spawn(KeyServerCore::new(pool, 5));
    let clients = 8;
    let per_client = 1_250;
    let handles: Vec<_> = (0..clients)
        .map(|c| {
            let client = server.client();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(c);
                let mut granted = 0u64;
                let mut indices = Vec::new();
                for _ in 0..per_client {
                    let req = if rng.gen_bool(0.8) {
                        KeyServerMessage::GetKey { n: rng.gen_range(1..=4) }
                    } else {
                        KeyServerMessage::KeyPoolStatus
                    };
                    match client.roundtrip(&req).unwrap() {
                        KeyServerMessage::Keys(keys) => {
                            assert!(keys.windows(2).all(|w| w[0].0 < w[1].0));
                            granted += 256 * keys.len() as u64;
                            indices.extend(keys.iter().map(|k| k.0));
                        }
                        KeyServerMessage::Refused { .. } | KeyServerMessage::Status { .. } => {}
                        other => panic!("unexpected {other:?}"),
                    }
                }
                (granted, indices)
            })
        })
        .collect();
    let mut granted = 0;
    let mut all = Vec::new();
    for h in handles {
        let (g, idx) = h.join().unwrap();
        granted += g;
        all.extend(idx);
    }
    let core = server.shutdown();
    assert_eq!(core.pool().level(), initial - granted);
    assert_eq!(core.granted_bits(), granted);
    assert_eq!(core.pool().ledger_residual(), 0);
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n, "key indices must be unique across clients");
}
