use proptest::prelude::*;
use qrnn::bitpack::{dot_bits, dot_multibit, pack, qmatvec, words_for, PackError, PackedActivation, PackedQuantMatrix};
use qrnn::quantizers::{levels, QuantizedMatrix};

fn codes(bits: u8, len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..=levels(bits) as u8, len)
}

fn codes_any(max_len: usize) -> impl Strategy<Value = (u8, Vec<u8>)> {
    (1u8..=8).prop_flat_map(move |k| (Just(k), codes(k, 0..max_len)))
}

fn naive_dot(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).map(|(&x, &y)| x as u64 * y as u64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn pack_unpack_round_trip((k, c) in codes_any(257)) {
        let p = pack(&c, k).unwrap();
        prop_assert_eq!(p.len(), c.len());
        prop_assert_eq!(p.raw_words().len(), words_for(c.len()) * k as usize);
        prop_assert_eq!(p.unpack(), c);
    }

    #[test]
    fn padding_bits_are_zero((k, c) in codes_any(257)) {
        let p = pack(&c, k).unwrap();
        let tail = c.len() % 64;
        if tail != 0 {
            for plane in 0..k as usize {
                let last = *p.plane(plane).last().unwrap();
                prop_assert_eq!(last >> tail, 0);
            }
        }
    }

    #[test]
    fn code_sum_matches((k, c) in codes_any(257)) {
        let p = pack(&c, k).unwrap();
        prop_assert_eq!(p.code_sum(), c.iter().map(|&x| x as u64).sum::<u64>());
    }

    #[test]
    fn binary_dot_is_and_count(pairs in prop::collection::vec((0u8..=1, 0u8..=1), 0..300)) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let want = naive_dot(&a, &b);
        prop_assert_eq!(dot_bits(&pack(&a, 1).unwrap(), &pack(&b, 1).unwrap()).unwrap(), want);
    }

    #[test]
    fn multibit_dot_matches_integer_dot(
        (ka, kw, a, w) in (1u8..=8, 1u8..=8, 0usize..300).prop_flat_map(|(ka, kw, n)| {
            (Just(ka), Just(kw), codes(ka, n), codes(kw, n))
        })
    ) {
        let got = dot_multibit(&pack(&a, ka).unwrap(), &pack(&w, kw).unwrap()).unwrap();
        prop_assert_eq!(got, naive_dot(&a, &w));
    }

    #[test]
    fn qmatvec_matches_dense(
        (kw, ka, rows, cols) in (1u8..=4, 1u8..=4, 1usize..6, 1usize..150),
        seed in any::<u64>(),
        alpha_w in 0.01f64..5.0, beta_w in -3.0f64..3.0,
        alpha_a in 0.01f64..5.0, beta_a in -3.0f64..3.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let wq = QuantizedMatrix {
            codes: (0..rows * cols).map(|_| rng.random_range(0..=levels(kw) as u8)).collect(),
            bits: kw, alpha: alpha_w, beta: beta_w, rows, cols,
        };
        let ac: Vec<u8> = (0..cols).map(|_| rng.random_range(0..=levels(ka) as u8)).collect();
        let w = PackedQuantMatrix::from_quantized(&wq).unwrap();
        let a = PackedActivation::new(&ac, ka, alpha_a, beta_a).unwrap();
        let got = qmatvec(&w, &a).unwrap();
        let wd = wq.reconstruct();
        let ad: Vec<f64> = ac.iter().map(|&c| alpha_a * c as f64 / levels(ka) as f64 + beta_a).collect();
        for (r, g) in got.iter().enumerate() {
            let want: f64 = wd.row(r).iter().zip(&ad).map(|(x, y)| x * y).sum();
            let scale: f64 = wd.row(r).iter().zip(&ad).map(|(x, y)| (x * y).abs()).sum::<f64>().max(1e-300);
            prop_assert!((g - want).abs() <= 1e-9 * scale, "row {r}: {g} vs {want}");
        }
    }
}

#[test]
fn out_of_range_code_rejected() {
    assert!(matches!(
        pack(&[0, 1, 4], 2),
        Err(PackError::Range {
            index: 2,
            code: 4,
            bits: 2
        })
    ));
    assert!(matches!(pack(&[0], 0), Err(PackError::BitWidth(0))));
    assert!(matches!(pack(&[0], 9), Err(PackError::BitWidth(9))));
}

#[test]
fn length_mismatch_rejected() {
    let a = pack(&[1, 0, 1], 1).unwrap();
    let b = pack(&[1, 1], 1).unwrap();
    assert!(matches!(dot_bits(&a, &b), Err(PackError::Shape { left: 3, right: 2 })));
    assert!(dot_multibit(&a, &b).is_err());
}

#[test]
fn word_boundaries() {
    for n in [63usize, 64, 65, 127, 128, 129] {
        let c: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let p = pack(&c, 2).unwrap();
        assert_eq!(p.words_per_plane(), n.div_ceil(64));
        assert_eq!(p.unpack(), c);
        assert_eq!(dot_multibit(&p, &p).unwrap(), naive_dot(&c, &c));
    }
}
