use appendchain::chain::{BlockHeader, Gps, Rules};
use appendchain::consensus::quorum;
use appendchain::crypto::DirectCheck;
use appendchain::device::{derive_keys, payload};
use appendchain::metrics::median;
use appendchain::net::{keyed_draw, Latency};
use appendchain::scenario::{run_scenario, ScenarioConfig};
use appendchain::testkit::{device_info, TestNet};
use appendchain::{
    decode_canonical, encode_canonical, Algorithm, Blockchain, DeviceInfo, Digest, KeyPair, Rejection,
    Signature, Transaction,
};
use proptest::prelude::*;

fn arb_key() -> impl Strategy<Value = appendchain::PublicKey> {
    any::<[u8; 32]>().prop_map(|s| KeyPair::from_seed(s).public)
}

fn arb_info() -> impl Strategy<Value = DeviceInfo> {
    (
        any::<[u8; 32]>(),
        any::<u64>(),
        proptest::option::of(any::<(i64, i64)>()),
        proptest::collection::vec(any::<u8>(), 0..80),
        any::<u64>(),
    )
        .prop_map(|(sig, access_level, gps, data, produced_at)| DeviceInfo {
            device_sig: Signature([sig, sig].concat().try_into().unwrap()),
            access_level,
            gps: gps.map(|(lat_micro, lon_micro)| Gps { lat_micro, lon_micro }),
            data,
            produced_at,
        })
}

fn arb_tx() -> impl Strategy<Value = Transaction> {
    (any::<[u8; 32]>(), any::<u64>(), any::<[u8; 32]>(), arb_key(), arb_info()).prop_map(
        |(prev, index, sig, gateway_key, info)| Transaction {
            prev_hash: Digest(prev),
            index,
            gateway_sig: Signature([prev, sig].concat().try_into().unwrap()),
            gateway_key,
            info,
        },
    )
}

fn arb_header() -> impl Strategy<Value = BlockHeader> {
    (
        any::<[u8; 32]>(),
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        "[a-z ]{0,24}",
        arb_key(),
    )
        .prop_map(|(prev, index, created_at, expires_at, policy, owner_key)| BlockHeader {
            prev_header_hash: Digest(prev),
            index,
            created_at,
            expires_at,
            policy,
            owner_key,
        })
}

/// Chain with `blocks` device blocks, each holding `txs[i]` readings.
fn build(txs: &[usize]) -> (TestNet, Vec<KeyPair>) {
    let mut net = TestNet::new(Algorithm::Pbft, 4, 1);
    let mut devs = Vec::new();
    for (i, n) in txs.iter().enumerate() {
        let dev = KeyPair::from_seed([i as u8 + 1; 32]);
        let k = net.add_block(&dev.public);
        for t in 0..*n {
            net.append(k, &dev, 1 + t as u64);
        }
        devs.push(dev);
    }
    (net, devs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_encoding_round_trips(info in arb_info()) {
        let bytes = encode_canonical(&info);
        prop_assert_eq!(&bytes, &encode_canonical(&info));
        prop_assert_eq!(decode_canonical::<DeviceInfo>(&bytes).unwrap(), info);
    }

    #[test]
    fn transaction_encoding_round_trips(tx in arb_tx()) {
        let bytes = encode_canonical(&tx);
        prop_assert_eq!(decode_canonical::<Transaction>(&bytes).unwrap(), tx);
    }

    #[test]
    fn header_encoding_round_trips(h in arb_header()) {
        let bytes = encode_canonical(&h);
        prop_assert_eq!(decode_canonical::<BlockHeader>(&bytes).unwrap(), h);
    }

    #[test]
    fn distinct_values_encode_distinctly(a in arb_info(), b in arb_info()) {
        prop_assume!(a != b);
        prop_assert_ne!(encode_canonical(&a), encode_canonical(&b));
    }

    #[test]
    fn distinct_headers_hash_distinctly(a in arb_header(), b in arb_header()) {
        prop_assume!(a != b);
        prop_assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn trailing_bytes_are_rejected(h in arb_header(), extra in proptest::collection::vec(any::<u8>(), 1..8)) {
        let mut bytes = encode_canonical(&h);
        bytes.extend(extra);
        prop_assert!(decode_canonical::<BlockHeader>(&bytes).is_err());
    }

    #[test]
    fn truncated_encodings_are_rejected(info in arb_info(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_canonical(&info);
        let at = cut.index(bytes.len());
        prop_assert!(decode_canonical::<DeviceInfo>(&bytes[..at]).is_err());
    }

    #[test]
    fn integers_are_big_endian(v in any::<u64>()) {
        prop_assert_eq!(encode_canonical(&v), v.to_be_bytes().to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_byte_flip_in_a_ledger_is_detected(
        txs in proptest::collection::vec(1usize..4, 1..4),
        pick in any::<prop::sample::Index>(),
        byte in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let (net, _) = build(&txs);
        let mut parts = net.chain.to_parts();
        let with_ledger: Vec<usize> = (0..parts.len()).filter(|i| !parts[*i].ledger.is_empty()).collect();
        let b = with_ledger[pick.index(with_ledger.len())];
        let t = byte.index(parts[b].ledger.len());
        let mut bytes = encode_canonical(&parts[b].ledger[t]);
        let at = byte.index(bytes.len());
        bytes[at] ^= 1 << bit;
        // Flips that break decoding are caught before verification.
        if let Ok(tx) = decode_canonical::<Transaction>(&bytes) {
            parts[b].ledger[t] = tx;
            let chain = Blockchain::from_parts_unchecked(parts);
            prop_assert!(chain.verify_chain(&Rules::new(&net.cfg, &DirectCheck)).is_err());
        }
    }

    #[test]
    fn appends_only_extend(txs in proptest::collection::vec(0usize..4, 1..5), extra in 1usize..4) {
        let (mut net, devs) = build(&txs);
        let before = net.chain.to_parts();
        let target = net.chain.lookup_block(&devs[0].public).unwrap();
        for t in 0..extra {
            net.append(target, &devs[0], 1000 + t as u64);
        }
        let after = net.chain.to_parts();
        prop_assert_eq!(before.len(), after.len());
        for (b, a) in before.iter().zip(&after) {
            prop_assert_eq!(&b.header, &a.header);
            prop_assert!(a.ledger.len() >= b.ledger.len());
            prop_assert_eq!(&a.ledger[..b.ledger.len()], &b.ledger[..]);
        }
    }

    #[test]
    fn appending_to_one_block_leaves_others_untouched(txs in proptest::collection::vec(0usize..3, 2..5), which in any::<prop::sample::Index>()) {
        let (mut net, devs) = build(&txs);
        let i = which.index(devs.len());
        let target = net.chain.lookup_block(&devs[i].public).unwrap();
        let before: Vec<Vec<u8>> = net.chain.to_parts().iter().map(|p| {
            p.ledger.iter().flat_map(encode_canonical).collect()
        }).collect();
        net.append(target, &devs[i], 5000);
        let after: Vec<Vec<u8>> = net.chain.to_parts().iter().map(|p| {
            p.ledger.iter().flat_map(encode_canonical).collect()
        }).collect();
        for (k, (b, a)) in before.iter().zip(&after).enumerate() {
            if k as u64 + 1 != target {
                prop_assert_eq!(b, a);
            }
        }
        prop_assert!(net.chain.verify_chain(&Rules::new(&net.cfg, &DirectCheck)).is_ok());
    }

    #[test]
    fn readings_at_or_after_expiry_are_refused(offset in 0u64..1_000_000) {
        let (net, devs) = build(&[0]);
        let block = net.chain.lookup_block(&devs[0].public).unwrap();
        let expires_at = net.chain.block(block).unwrap().header().expires_at;
        let info = device_info(&devs[0], 0, expires_at + offset);
        let r = net.chain.build_transaction(block, info, &net.gateways[0]);
        prop_assert_eq!(r.err(), Some(Rejection::ExpiredBlock));
    }

    #[test]
    fn readings_before_expiry_are_accepted(before in 1u64..1_000_000) {
        let (net, devs) = build(&[0]);
        let block = net.chain.lookup_block(&devs[0].public).unwrap();
        let expires_at = net.chain.block(block).unwrap().header().expires_at;
        let info = device_info(&devs[0], 0, expires_at.saturating_sub(before));
        prop_assert!(net.chain.build_transaction(block, info, &net.gateways[0]).is_ok());
    }
}

proptest! {
    #[test]
    fn quorums_of_any_size_intersect_in_an_honest_gateway(n in 1usize..200) {
        let q = quorum(n);
        let f = (n - 1) / 3;
        prop_assert!(q <= n);
        prop_assert!(2 * q > n + f, "n={} q={} f={}", n, q, f);
    }

    #[test]
    fn median_matches_sort_reference(mut v in proptest::collection::vec(0u64..10_000, 1..50)) {
        let m = median(&v).unwrap();
        v.sort_unstable();
        let n = v.len();
        let expected = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        };
        prop_assert_eq!(m, expected);
    }

    #[test]
    fn workload_streams_are_pure_functions_of_the_seed(seed in any::<[u8; 32]>(), seq in any::<u64>(), gen in 0u64..8) {
        prop_assert_eq!(payload(&seed, seq), payload(&seed, seq));
        prop_assert_eq!(derive_keys(&seed, gen).public, derive_keys(&seed, gen).public);
    }

    #[test]
    fn latency_draws_stay_in_range(min in 0u64..50, width in 0u64..50, draw in any::<u64>()) {
        let l = Latency::uniform_ms(min, min + width);
        let us = l.sample(draw);
        prop_assert!(us >= min * 1000 && us <= (min + width) * 1000);
    }

    #[test]
    fn keyed_draws_depend_only_on_their_key(seed in any::<u64>(), from in 0u32..8, to in 0u32..8, c in any::<u64>()) {
        prop_assert_eq!(keyed_draw(seed, 1, from, to, 2, c), keyed_draw(seed, 1, from, to, 2, c));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn same_seed_runs_produce_identical_replicas(seed in 0u64..1000) {
        let cfg = ScenarioConfig {
            gateways: 3,
            devices_per_gateway: 2,
            tx_per_device: 3,
            witness_minimum: 1,
            duration_ms: 500,
            onboarding_ms: 200,
            seed,
            ..ScenarioConfig::default()
        };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        prop_assert!(a.integrity.ok());
        prop_assert_eq!(&a.per_gateway[0].fingerprint, &b.per_gateway[0].fingerprint);
        prop_assert_eq!(a.csv_row(), b.csv_row());
    }
}
