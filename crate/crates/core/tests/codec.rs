use proptest::prelude::*;
use rand::{Rng, RngCore};

use prfl::dpd::wire::{decode, encode, DecodeError};
use prfl::dpd::{CompressedMatrix, CompressedUpdate, LowRank, Payload};
use prfl::rng::derive;

fn random_update(rng: &mut impl Rng) -> CompressedUpdate {
    let count = rng.random_range(0..5);
    let f = |n: usize, rng: &mut dyn RngCore| -> Vec<f32> { (0..n).map(|_| f32::from_bits(rng.next_u32())).collect() };
    let matrices = (0..count)
        .map(|i| {
            if rng.random_bool(0.5) {
                let dims: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
                let n = dims.iter().product();
                CompressedMatrix { name: format!("raw.{i}"), orig_dims: dims, payload: Payload::Raw(f(n, rng)) }
            } else {
                let (p, q) = (rng.random_range(1..12), rng.random_range(1..12));
                let r = rng.random_range(1..=p.min(q));
                let (k_p, k_n) = (rng.random_range(1..=p.min(r)), rng.random_range(1..=r.min(q)));
                let low = LowRank {
                    p,
                    q,
                    r,
                    k_p,
                    k_n,
                    u_p: f(p * k_p, rng),
                    s_p: f(k_p, rng),
                    v_p: f(k_p * r, rng),
                    u_n: f(r * k_n, rng),
                    s_n: f(k_n, rng),
                    v_n: f(k_n * q, rng),
                };
                CompressedMatrix { name: format!("ümlaut.{i}"), orig_dims: vec![p, q], payload: Payload::LowRank(low) }
            }
        })
        .collect();
    CompressedUpdate { client_id: rng.random(), sample_count: rng.random(), matrices }
}

/// Bitwise comparison, so NaN payloads count as equal to themselves.
fn same_bits(a: &CompressedUpdate, b: &CompressedUpdate) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let payload = |m: &CompressedMatrix| match &m.payload {
        Payload::Raw(v) => vec![bits(v)],
        Payload::LowRank(l) => [&l.u_p, &l.s_p, &l.v_p, &l.u_n, &l.s_n, &l.v_n].iter().map(|v| bits(v)).collect(),
    };
    let shape = |m: &CompressedMatrix| match &m.payload {
        Payload::Raw(_) => None,
        Payload::LowRank(l) => Some((l.p, l.q, l.r, l.k_p, l.k_n)),
    };
    a.client_id == b.client_id
        && a.sample_count == b.sample_count
        && a.matrices.len() == b.matrices.len()
        && a.matrices.iter().zip(&b.matrices).all(|(x, y)| {
            x.name == y.name && x.orig_dims == y.orig_dims && shape(x) == shape(y) && payload(x) == payload(y)
        })
}

#[test]
fn random_updates_round_trip() {
    let mut rng = derive(42, &[]);
    for _ in 0..1000 {
        let u = random_update(&mut rng);
        let bytes = encode(&u).unwrap();
        assert!(same_bits(&decode(&bytes).unwrap(), &u));
    }
}

#[test]
fn distinct_errors() {
    let u = random_update(&mut derive(1, &[]));
    let bytes = encode(&u).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(DecodeError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(DecodeError::BadVersion(_))));
    assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(DecodeError::Truncated)));
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 5] ^= 0x40;
    assert!(matches!(decode(&bad), Err(DecodeError::CrcMismatch) | Err(DecodeError::Malformed(_))));
}

#[test]
fn flipped_payload_byte_is_a_crc_mismatch() {
    let u = CompressedUpdate {
        client_id: 7,
        sample_count: 3,
        matrices: vec![CompressedMatrix { name: "w".into(), orig_dims: vec![4], payload: Payload::Raw(vec![1.0; 4]) }],
    };
    let mut bytes = encode(&u).unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 1;
    assert!(matches!(decode(&bytes), Err(DecodeError::CrcMismatch)));
}

#[test]
fn truncations_of_valid_messages_fail_cleanly() {
    let mut rng = derive(5, &[]);
    for _ in 0..50 {
        let bytes = encode(&random_update(&mut rng)).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn huge_declared_sizes_do_not_allocate() {
    let mut b = Vec::new();
    b.extend_from_slice(b"PRFL");
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b.extend_from_slice(&0u64.to_le_bytes());
    b.extend_from_slice(&u32::MAX.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.push(b'w');
    b.push(1);
    b.push(0);
    for v in [u32::MAX; 5] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    assert!(decode(&b).is_err());
}

proptest! {
    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..4096)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn mutated_messages_never_panic(seed in any::<u64>(), flips in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8)) {
        let mut bytes = encode(&random_update(&mut derive(seed, &[]))).unwrap();
        for (pos, v) in flips {
            let n = bytes.len();
            bytes[pos % n] = v;
        }
        let _ = decode(&bytes);
    }
}
