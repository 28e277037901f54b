use causal_rdp::oneshot::{
    elias_gamma_decode, elias_gamma_encode, elias_gamma_length, encode_length, pfr_decode, pfr_select, shared_stream,
    DiscreteChannel, HuffmanCode, PfrCodebook, PrefixCode, CODEBOOK_DOMAIN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn law(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gamma_round_trip(k in 1u64..u64::MAX / 2) {
        let bits = elias_gamma_encode(k);
        prop_assert_eq!(bits.len() as u32, elias_gamma_length(k));
        prop_assert_eq!(elias_gamma_decode(&bits), Some((k, bits.len())));
    }

    #[test]
    fn huffman_satisfies_kraft_and_round_trips(counts in prop::collection::vec(0u64..1000, 1..40), probe in 1u64..200) {
        let code = HuffmanCode::fit(&counts);
        prop_assert!(code.kraft_sum() <= 1.0 + 1e-12);
        let code = PrefixCode::Huffman(code);
        for k in (1..=counts.len() as u64 + 3).chain([probe]) {
            let mut bits = code.encode(k);
            prop_assert_eq!(bits.len() as u32, code.length(k));
            bits.extend([true, false, true]);
            prop_assert_eq!(code.decode(&bits), Some((k, bits.len() - 3)));
        }
    }

    #[test]
    fn decoder_replays_the_selection((n, reference, target) in (2usize..6).prop_flat_map(|n| (Just(n), law(n), law(n))), seed in any::<u64>(), trial in 0u64..1000) {
        let pick = pfr_select(&reference, &target, &mut shared_stream(seed, CODEBOOK_DOMAIN, 0, 0, trial)).unwrap();
        prop_assert!(pick.index >= 1 && pick.index <= pick.arrivals);
        prop_assert!(pick.symbol < n);
        let y = pfr_decode(&reference, pick.index, &mut shared_stream(seed, CODEBOOK_DOMAIN, 0, 0, trial)).unwrap();
        prop_assert_eq!(y, pick.symbol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn code_length_is_seed_deterministic(seed in any::<u64>(), chan in any::<u64>()) {
        let ch = DiscreteChannel::random(&mut ChaCha20Rng::seed_from_u64(chan), 4, 4, 2.0).unwrap();
        let book = PfrCodebook::new(seed, PrefixCode::EliasGamma);
        let a = encode_length(&ch, 10_000, &book).unwrap();
        let b = encode_length(&ch, 10_000, &book).unwrap();
        prop_assert_eq!(a, b);
    }
}
