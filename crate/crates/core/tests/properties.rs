//! Model-level invariants over random configurations.

mod common;

use cog_core::objective::{total_loss, LabelPyramid, LossConfig};
use cog_core::tensor::{Backend, Eager};
use cog_core::{CogModel, StreamEngine};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn stream_matches_batch(seed in any::<u64>(), t in 1usize..90) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let m = common::model(cfg.clone(), seed);
        let x = common::frames(t, cfg.d_vis, seed ^ 1);
        let batch = m.error_probabilities(&x).unwrap();
        let mut e = StreamEngine::<f64>::new(&m).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let s = e.push_frame(x.row(i)).unwrap().p_error;
            prop_assert!((s - b).abs() <= 1e-9, "frame {i}: {s} vs {b}");
        }
    }

    #[test]
    fn every_level_is_normalized(seed in any::<u64>(), t in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let m = common::model(cfg.clone(), seed);
        let p = m.predict(&common::frames(t, cfg.d_vis, seed)).unwrap();
        for level in p.slow.iter().chain(&p.fast).chain(std::iter::once(&p.frame)) {
            let len = level.shape()[1];
            for i in 0..len {
                let (a, b) = (level.data()[i], level.data()[len + i]);
                prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                prop_assert!((a + b - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_heads_are_uniform_everywhere(seed in any::<u64>(), t in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let m = CogModel::init(cfg.clone(), &common::bank(cfg.prompts, cfg.d_text, seed), seed).unwrap();
        let p = m.predict(&common::frames(t, cfg.d_vis, seed)).unwrap();
        for level in p.slow.iter().chain(&p.fast).chain(std::iter::once(&p.frame)) {
            prop_assert!(level.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), t in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let m = common::model(cfg.clone(), seed);
        let labels: Vec<u8> = (0..t).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let mut e = Eager::<f64>::new();
        let x = e.constant(common::frames(t, cfg.d_vis, seed));
        let pyr = m.forward(&mut e, &x).unwrap();
        let targets = LabelPyramid::for_config(&labels, &cfg).unwrap();
        let terms = total_loss(&mut e, &pyr, &targets, &LossConfig::default()).unwrap();
        prop_assert!(terms.ce.item() >= 0.0 && terms.mse.item() >= 0.0 && terms.total.item() >= 0.0);
    }

    /// Each pushed frame is consumed once; a reset stream replays identically.
    #[test]
    fn reset_replays_identically(seed in any::<u64>(), t in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::random_config(&mut rng);
        let m = common::model(cfg.clone(), seed);
        let x = common::frames(t, cfg.d_vis, seed);
        let mut e = StreamEngine::<f32>::new(&m).unwrap();
        let first: Vec<u64> = (0..t).map(|i| e.push_f32(&x.row(i).iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap().p_error.to_bits()).collect();
        prop_assert_eq!(e.frames_seen(), t);
        e.reset();
        let again: Vec<u64> = (0..t).map(|i| e.push_f32(&x.row(i).iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap().p_error.to_bits()).collect();
        prop_assert_eq!(first, again);
    }
}
