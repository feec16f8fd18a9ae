//! Randomized invariants for the arithmetic and data-handling kernels.

use proptest::prelude::*;

use ucan_core::attenuate::{apply_column_scaling, retention_factor};
use ucan_core::data::{five_core_filter, forget_retain_split, Event, InteractionLog, SplitSpec};
use ucan_core::eval::rank_of;
use ucan_core::risk::{dequantize, minmax_norm, nf4_max_gap, quantize};
use ucan_core::tensor::Matrix;
use ucan_core::tensorio::TensorFile;

fn finite_f64() -> impl Strategy<Value = f64> {
    (-1e6f64..1e6).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decay_stays_bounded_and_monotone(
        tau in 0.0f64..0.95,
        beta in 0.1f64..6.0,
        alpha_max in 0.01f64..1.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let span = 1.0 - tau;
        let r1 = tau + span * a.max(1e-6);
        let r2 = tau + span * b.max(1e-6);
        let f1 = retention_factor(r1, tau, alpha_max, beta, 1e-8).unwrap();
        let f2 = retention_factor(r2, tau, alpha_max, beta, 1e-8).unwrap();
        prop_assert!(f1 >= 0.0 && f1 <= alpha_max);
        prop_assert!(f2 >= 0.0 && f2 <= alpha_max);
        if r1 >= r2 {
            prop_assert!(f1 <= f2 + 1e-12);
        } else {
            prop_assert!(f2 <= f1 + 1e-12);
        }
    }

    #[test]
    fn minmax_maps_into_the_half_open_unit_interval(
        v in prop::collection::vec(finite_f64(), 1..40),
    ) {
        let out = minmax_norm(&v, 1e-8).unwrap();
        prop_assert_eq!(out.len(), v.len());
        for x in out {
            prop_assert!((0.0..1.0).contains(&x), "{} outside [0, 1)", x);
        }
    }

    #[test]
    fn factor_scaling_commutes_with_input_gating(
        rank in 1usize..5,
        d_in in 1usize..8,
        d_out in 1usize..8,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = ucan_core::rng::substream(seed, "prop_scale");
        let w_a = Matrix::from_fn(rank, d_in, |_, _| rng.gen_range(-2.0..2.0));
        let w_b = Matrix::from_fn(d_out, rank, |_, _| rng.gen_range(-2.0..2.0));
        let alpha: Vec<f32> = (0..d_in).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x: Vec<f32> = (0..d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut scaled = w_a.clone();
        apply_column_scaling(&mut scaled, &alpha).unwrap();
        let left = w_b.matvec(&scaled.matvec(&x).unwrap()).unwrap();
        let gated: Vec<f32> = x.iter().zip(&alpha).map(|(v, a)| v * a).collect();
        let right = w_b.matvec(&w_a.matvec(&gated).unwrap()).unwrap();
        let norm: f32 = right.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (l, r) in left.iter().zip(&right) {
            prop_assert!((l - r).abs() <= 1e-5 * (1.0 + norm));
        }
    }

    #[test]
    fn quantization_error_stays_under_the_codebook_bound(
        rows in 1usize..5,
        cols in 1usize..12,
        block in 1usize..70,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = ucan_core::rng::substream(seed, "prop_quant");
        let w = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0..3.0));
        let q = quantize(&w, block).unwrap();
        let back = dequantize(&q);
        let half_gap = nf4_max_gap() / 2.0;
        for (bi, scale) in q.scales.iter().enumerate() {
            let lo = bi * block;
            let hi = ((bi + 1) * block).min(w.data.len());
            let bound = scale * half_gap + 1e-6;
            for i in lo..hi {
                prop_assert!(
                    (w.data[i] - back.data[i]).abs() <= bound,
                    "block {} elem {}: |{} - {}| > {}",
                    bi, i, w.data[i], back.data[i], bound
                );
            }
        }
    }

    #[test]
    fn split_partitions_every_user_history(
        n_users in 1u32..8,
        n_items in 2u32..30,
        seed in 0u64..500,
        fraction in 0.0f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = ucan_core::rng::substream(seed, "prop_split");
        let mut events = Vec::new();
        for u in 0..n_users {
            let n = rng.gen_range(1..12);
            for t in 0..n {
                events.push(Event {
                    user: u,
                    item: rng.gen_range(0..n_items),
                    ts: t as i64,
                });
            }
        }
        let log = InteractionLog::new(events, n_users, n_items).unwrap();
        let spec = SplitSpec { forget_fraction: fraction, seed };
        let (forget, retain) = forget_retain_split(&log, &spec).unwrap();

        // both sides together restore the log exactly
        let mut merged = forget.events.clone();
        merged.extend(retain.events.iter().cloned());
        let rebuilt = InteractionLog::new(merged, n_users, n_items).unwrap();
        prop_assert_eq!(&rebuilt.events, &log.events);

        // per-user forget volume is the floored fraction
        let by_user_all = log.by_user();
        let by_user_forget = forget.by_user();
        for u in 0..n_users as usize {
            let expect = (fraction * by_user_all[u].len() as f64).floor() as usize;
            prop_assert_eq!(by_user_forget[u].len(), expect);
        }
    }

    #[test]
    fn five_core_filtering_is_idempotent(
        n_users in 1u32..10,
        n_items in 1u32..12,
        seed in 0u64..500,
    ) {
        use rand::Rng;
        let mut rng = ucan_core::rng::substream(seed, "prop_core");
        let mut events = Vec::new();
        for u in 0..n_users {
            let n = rng.gen_range(0..9);
            for t in 0..n {
                events.push(Event {
                    user: u,
                    item: rng.gen_range(0..n_items),
                    ts: t as i64,
                });
            }
        }
        let log = InteractionLog::new(events, n_users, n_items).unwrap();
        let once = five_core_filter(&log);
        let twice = five_core_filter(&once);
        prop_assert_eq!(&once.events, &twice.events);
        prop_assert_eq!(once.n_users, twice.n_users);
        prop_assert_eq!(once.n_items, twice.n_items);
    }

    #[test]
    fn truth_rank_is_always_within_the_catalog(
        scores in prop::collection::vec(-1e3f32..1e3, 1..50),
        pick in 0usize..50,
    ) {
        let truth = (pick % scores.len()) as u32;
        let rank = rank_of(&scores, truth);
        prop_assert!(rank >= 1 && rank <= scores.len());
        prop_assert_eq!(ucan_core::eval::recall_at_k(&[rank], scores.len()).unwrap(), 1.0);
    }

    #[test]
    fn tensor_container_round_trips(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in 0u64..500,
    ) {
        use rand::Rng;
        let mut rng = ucan_core::rng::substream(seed, "prop_io");
        let mut file = TensorFile::new();
        file.push_meta("kind", "prop").unwrap();
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
        file.push("w", vec![rows, cols], data.clone()).unwrap();
        let bytes = file.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        let t = back.require("w").unwrap();
        prop_assert_eq!(&t.shape, &vec![rows, cols]);
        for (a, b) in t.data.iter().zip(&data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
