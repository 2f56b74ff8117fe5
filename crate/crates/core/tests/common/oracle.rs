//! Brute-force reference for global magnitude pruning.

use prunelab::model::{ParamEntry, ParamKind, ParamRegistry};
use prunelab::pruning::{global_magnitude_prune_weights, Mask};
use prunelab::rng::SplitMix64;
use prunelab::Tensor;
use rand::Rng;

/// Random registry with at most `max_prunable` prunable entries. With
/// `ties`, magnitudes come from a handful of levels so the tie-break matters.
pub fn random_registry(rng: &mut SplitMix64, max_prunable: usize, ties: bool) -> ParamRegistry<f32> {
    let layers = rng.random_range(1..=5);
    let mut budget = max_prunable;
    let mut entries = Vec::new();
    for layer in 1..=layers {
        let left = layers - layer + 1;
        let n = rng.random_range(1..=(budget / left).max(1)).min(budget.max(1));
        budget = budget.saturating_sub(n);
        let tensor = Tensor::from_fn(&[n], |_| value(rng, ties));
        entries.push(ParamEntry {
            layer_id: layer,
            name: format!("layer{layer}.weight"),
            tensor,
            prunable: true,
            kind: if layer == layers { ParamKind::Dense } else { ParamKind::Conv },
        });
        entries.push(ParamEntry {
            layer_id: layer,
            name: format!("layer{layer}.bias"),
            tensor: Tensor::from_fn(&[2], |_| value(rng, ties)),
            prunable: false,
            kind: ParamKind::Bias,
        });
    }
    ParamRegistry::new(entries)
}

fn value(rng: &mut SplitMix64, ties: bool) -> f32 {
    if ties {
        rng.random_range(-3i32..=3) as f32 * 0.25
    } else {
        rng.random_range(-1.0f32..1.0)
    }
}

/// Redraws every prunable value, as retraining would.
pub fn redraw(registry: &mut ParamRegistry<f32>, rng: &mut SplitMix64, ties: bool) {
    for e in registry.entries_mut().iter_mut().filter(|e| e.prunable) {
        for v in e.tensor.data_mut() {
            *v = value(rng, ties);
        }
    }
}

/// Positions `(entry, index)` of the `k` active weights that sort first by
/// `(|w|, layer, entry, index)`.
pub fn brute_force(registry: &ParamRegistry<f32>, mask: &Mask, k: usize) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (ei, (e, m)) in registry.entries().iter().filter(|e| e.prunable).zip(mask.entries()).enumerate() {
        for (j, (&w, &b)) in e.tensor.data().iter().zip(&m.bits).enumerate() {
            if b == 1 {
                all.push((w.abs(), e.layer_id, ei, j));
            }
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(usize, usize)> = all[..k].iter().map(|t| (t.2, t.3)).collect();
    out.sort();
    out
}

pub fn newly_pruned(before: &Mask, after: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ei, (a, b)) in before.entries().iter().zip(after.entries()).enumerate() {
        for (j, (&x, &y)) in a.bits.iter().zip(&b.bits).enumerate() {
            if x == 1 && y == 0 {
                out.push((ei, j));
            }
        }
    }
    out
}

/// Prunes one registry for `iterations` rounds at `rate`, checking every
/// round against the brute-force set, nesting and the count recurrence.
pub fn check_registry(registry: &mut ParamRegistry<f32>, rng: &mut SplitMix64, ties: bool, rate: f64, iterations: usize) -> Result<(), String> {
    let mut mask = Mask::full(registry);
    let mut r = mask.remaining();
    for t in 1..=iterations {
        let k = (rate * r as f64 + 0.5).floor() as usize;
        if k >= r {
            break;
        }
        let want = brute_force(registry, &mask, k);
        let out = global_magnitude_prune_weights(registry, &mask, rate).map_err(|e| e.to_string())?;
        let got = newly_pruned(&mask, &out.mask);
        if got != want {
            return Err(format!("iteration {t}: pruned set differs from the k={k} smallest"));
        }
        if !out.mask.is_nested_in(&mask) {
            return Err(format!("iteration {t}: mask not nested"));
        }
        let expect = r - k;
        if out.mask.remaining() != expect {
            return Err(format!("iteration {t}: {} remaining, expected {expect}", out.mask.remaining()));
        }
        r = expect;
        mask = out.mask;
        redraw(registry, rng, ties);
    }
    Ok(())
}
