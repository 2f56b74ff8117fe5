mod common;

use common::oracle::{brute_force, check_registry, newly_pruned, random_registry};
use prunelab::pruning::{
    global_magnitude_prune_weights, random_mask, sparsity_corrected_random_mask, zero_masked, Mask,
};
use prunelab::rng::SplitMix64;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matches_brute_force_on_200_registries() {
    for i in 0..200u64 {
        let mut rng = SplitMix64::derive(0x5eed, &[i]);
        let ties = i % 2 == 1;
        let mut reg = random_registry(&mut rng, 10_000, ties);
        check_registry(&mut reg, &mut rng, ties, 0.2, 10).unwrap_or_else(|e| panic!("registry {i}: {e}"));
    }
}

#[test]
fn equal_magnitudes_break_toward_earlier_layers() {
    let mut rng = SplitMix64::new(1);
    let mut reg = random_registry(&mut rng, 50, false);
    for e in reg.entries_mut() {
        e.tensor.data_mut().fill(0.5);
    }
    let mask = Mask::full(&reg);
    let out = global_magnitude_prune_weights(&reg, &mask, 0.2).unwrap();
    let got = newly_pruned(&mask, &out.mask);
    let k = got.len();
    let mut first = Vec::new();
    for (ei, m) in mask.entries().iter().enumerate() {
        first.extend((0..m.bits.len()).map(|j| (ei, j)));
    }
    assert_eq!(got, first[..k].to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruned_set_is_the_k_smallest(seed in any::<u64>(), ties in any::<bool>(), rate in 0.05f64..0.6) {
        let mut rng = SplitMix64::new(seed);
        let reg = random_registry(&mut rng, 2_000, ties);
        let mask = Mask::full(&reg);
        let r = mask.remaining();
        let k = (rate * r as f64 + 0.5).floor() as usize;
        prop_assume!(k > 0 && k < r);
        let out = global_magnitude_prune_weights(&reg, &mask, rate).unwrap();
        prop_assert_eq!(newly_pruned(&mask, &out.mask), brute_force(&reg, &mask, k));
        prop_assert_eq!(out.newly_pruned, k);
    }

    #[test]
    fn masks_nest_and_counts_follow_recurrence(seed in any::<u64>(), ties in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let mut reg = random_registry(&mut rng, 1_000, ties);
        prop_assert!(check_registry(&mut reg, &mut rng, ties, 0.2, 10).is_ok());
    }

    #[test]
    fn masked_weights_read_exactly_zero(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let mut reg = random_registry(&mut rng, 500, false);
        let before: Vec<Vec<f32>> = reg.entries().iter().filter(|e| !e.prunable).map(|e| e.tensor.data().to_vec()).collect();
        let mask = random_mask(&reg, 0.3, seed).unwrap();
        zero_masked(&mut reg, &mask);
        for (e, m) in reg.entries().iter().filter(|e| e.prunable).zip(mask.entries()) {
            for (&w, &b) in e.tensor.data().iter().zip(&m.bits) {
                if b == 0 {
                    prop_assert_eq!(w.to_bits(), 0);
                }
            }
        }
        let after: Vec<Vec<f32>> = reg.entries().iter().filter(|e| !e.prunable).map(|e| e.tensor.data().to_vec()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn random_mask_keeps_rounded_count(seed in any::<u64>(), fraction in 0.01f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let reg = random_registry(&mut rng, 3_000, false);
        let d = Mask::full(&reg).total();
        let keep = (fraction * d as f64 + 0.5).floor() as usize;
        prop_assume!(keep > 0);
        let mask = random_mask(&reg, fraction, seed).unwrap();
        prop_assert_eq!(mask.remaining(), keep);
    }

    #[test]
    fn corrected_mask_prunes_zeros_first(seed in any::<u64>(), zero_share in 0.0f64..0.9, fraction in 0.05f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let mut reg = random_registry(&mut rng, 2_000, false);
        let mut zeros = 0usize;
        let mut coin = SplitMix64::derive(seed, &[1]);
        for e in reg.entries_mut().iter_mut().filter(|e| e.prunable) {
            for w in e.tensor.data_mut() {
                if coin.random_bool(zero_share) {
                    *w = 0.0;
                    zeros += 1;
                }
            }
        }
        let d = Mask::full(&reg).total();
        let keep = (fraction * d as f64 + 0.5).floor() as usize;
        prop_assume!(keep > 0);
        let pruned = d - keep;
        let mask = sparsity_corrected_random_mask(&reg, fraction, 1e-38, seed).unwrap();
        prop_assert_eq!(mask.remaining(), keep);
        let mut pruned_zero = 0usize;
        let mut kept_zero = 0usize;
        for (e, m) in reg.entries().iter().filter(|e| e.prunable).zip(mask.entries()) {
            for (&w, &b) in e.tensor.data().iter().zip(&m.bits) {
                if w == 0.0 {
                    if b == 0 { pruned_zero += 1 } else { kept_zero += 1 }
                }
            }
        }
        prop_assert_eq!(pruned_zero, pruned.min(zeros));
        if pruned >= zeros {
            prop_assert_eq!(kept_zero, 0);
        }
    }
}
