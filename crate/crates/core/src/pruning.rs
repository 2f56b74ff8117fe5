//! Binary masks over prunable weights, magnitude pruning, random-mask
//! baselines and natural-sparsity analysis.

use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamRegistry};
use crate::rng::{tag, SplitMix64};
use crate::tensor::Element;

/// Smallest positive normal `f32`, the default "numerically zero" threshold.
pub const DEFAULT_EPSILON: f64 = f32::MIN_POSITIVE as f64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    pub layer_id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    /// 1 = active, 0 = pruned.
    pub bits: Vec<u8>,
}

impl MaskEntry {
    pub fn remaining(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// One binary tensor per prunable parameter, in registry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    entries: Vec<MaskEntry>,
}

impl Mask {
    pub fn full<F: Element>(registry: &ParamRegistry<F>) -> Self {
        Mask {
            entries: registry
                .prunable()
                .map(|e| MaskEntry {
                    layer_id: e.layer_id,
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    bits: vec![1; e.tensor.len()],
                })
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<MaskEntry>) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.bits.len() {
                return Err(Error::MaskMismatch(format!("{}: shape {:?} vs {} bits", e.name, e.shape, e.bits.len())));
            }
            if e.bits.iter().any(|&b| b > 1) {
                return Err(Error::MaskMismatch(format!("{}: entries must be 0 or 1", e.name)));
            }
        }
        Ok(Mask { entries })
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total prunable count `d`.
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    /// Active count `r`.
    pub fn remaining(&self) -> usize {
        self.entries.iter().map(MaskEntry::remaining).sum()
    }

    pub fn remaining_fraction(&self) -> f64 {
        self.remaining() as f64 / self.total().max(1) as f64
    }

    /// True when every active entry of `self` is also active in `outer`.
    pub fn is_nested_in(&self, outer: &Mask) -> bool {
        self.entries.len() == outer.entries.len()
            && self.entries.iter().zip(&outer.entries).all(|(a, b)| {
                a.name == b.name && a.bits.len() == b.bits.len() && a.bits.iter().zip(&b.bits).all(|(&x, &y)| x <= y)
            })
    }

    /// Checks keys and shapes against the registry's prunable entries.
    pub fn check_matches<F: Element>(&self, registry: &ParamRegistry<F>) -> Result<()> {
        let prunable: Vec<_> = registry.prunable().collect();
        if prunable.len() != self.entries.len() {
            return Err(Error::MaskMismatch(format!(
                "{} mask tensors for {} prunable parameters",
                self.entries.len(),
                prunable.len()
            )));
        }
        for (m, p) in self.entries.iter().zip(prunable) {
            if m.name != p.name || m.layer_id != p.layer_id || m.shape != p.tensor.shape() {
                return Err(Error::MaskMismatch(format!(
                    "mask entry {} {:?} vs parameter {} {:?}",
                    m.name,
                    m.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Mask bits aligned with the registry (None for protected entries).
    pub fn aligned<'a, F: Element>(&'a self, registry: &ParamRegistry<F>) -> Vec<Option<&'a [u8]>> {
        registry
            .entries()
            .iter()
            .map(|e| {
                if e.prunable {
                    self.get(&e.name).map(|m| m.bits.as_slice())
                } else {
                    None
                }
            })
            .collect()
    }
}

/// A model whose masked prunable weights are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnetwork<F> {
    model: Model<F>,
    mask: Mask,
}

impl<F: Element> Subnetwork<F> {
    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<F> {
        &mut self.model
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn into_parts(self) -> (Model<F>, Mask) {
        (self.model, self.mask)
    }

    /// Re-zeroes masked entries (after external edits to the weights).
    pub fn enforce(&mut self) {
        zero_masked(self.model.registry_mut(), &self.mask);
    }
}

/// Sets every masked prunable weight to exactly zero.
pub fn zero_masked<F: Element>(registry: &mut ParamRegistry<F>, mask: &Mask) {
    for e in registry.entries_mut().iter_mut().filter(|e| e.prunable) {
        if let Some(m) = mask.get(&e.name) {
            for (w, &b) in e.tensor.data_mut().iter_mut().zip(&m.bits) {
                if b == 0 {
                    *w = F::zero();
                }
            }
        }
    }
}

/// Pairs `model` with `mask`, setting masked weights to exactly zero.
pub fn apply_mask<F: Element>(mut model: Model<F>, mask: Mask) -> Result<Subnetwork<F>> {
    mask.check_matches(model.registry())?;
    zero_masked(model.registry_mut(), &mask);
    Ok(Subnetwork { model, mask })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub mask: Mask,
    pub newly_pruned: usize,
    /// Set when the rate rounds to zero entries; the mask is unchanged.
    pub noop: bool,
}

/// Number pruned from `remaining` at `rate`, rounding half up.
pub fn prune_count(rate: f64, remaining: usize) -> usize {
    (rate * remaining as f64 + 0.5).floor() as usize
}

fn magnitude_prune<F: Element>(
    registry: &ParamRegistry<F>,
    mask: &Mask,
    rate: f64,
    depth_limit: Option<usize>,
) -> Result<PruneOutcome> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("prune rate {rate} not in (0,1)")));
    }
    mask.check_matches(registry)?;
    let in_pool = |layer: usize| depth_limit.is_none_or(|d| layer <= d);

    // (|w|, layer, entry, flat) for every active entry in the pool
    let mut pool: Vec<(F, usize, usize, usize)> = Vec::new();
    for (ei, (m, p)) in mask.entries.iter().zip(registry.prunable()).enumerate() {
        if !in_pool(m.layer_id) {
            continue;
        }
        for (j, (&b, &w)) in m.bits.iter().zip(p.tensor.data()).enumerate() {
            if b != 0 {
                pool.push((w.abs(), m.layer_id, ei, j));
            }
        }
    }
    let remaining = pool.len();
    if remaining == 0 {
        return Err(Error::InvalidArgument("no unmasked weights left to prune".into()));
    }
    let k = prune_count(rate, remaining);
    if k == 0 {
        return Ok(PruneOutcome {
            mask: mask.clone(),
            newly_pruned: 0,
            noop: true,
        });
    }
    if k >= remaining {
        return Err(Error::WouldEmptyNetwork { pruned: k, remaining });
    }
    let order = |a: &(F, usize, usize, usize), b: &(F, usize, usize, usize)| -> Ordering {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    };
    pool.select_nth_unstable_by(k - 1, order);
    let mut out = mask.clone();
    for &(_, _, ei, j) in &pool[..k] {
        out.entries[ei].bits[j] = 0;
    }
    Ok(PruneOutcome {
        mask: out,
        newly_pruned: k,
        noop: false,
    })
}

/// Masks the `round(rate·r)` smallest-magnitude active weights across all
/// prunable tensors jointly. Ties go to ascending `(layer_id, flat_index)`.
pub fn global_magnitude_prune<F: Element>(sub: &Subnetwork<F>, rate: f64) -> Result<PruneOutcome> {
    magnitude_prune(sub.model.registry(), &sub.mask, rate, None)
}

/// Registry-level form of [`global_magnitude_prune`].
pub fn global_magnitude_prune_weights<F: Element>(
    registry: &ParamRegistry<F>,
    mask: &Mask,
    rate: f64,
) -> Result<PruneOutcome> {
    magnitude_prune(registry, mask, rate, None)
}

/// Like [`global_magnitude_prune`] but only layers `1..=depth_limit` are
/// candidates; deeper layers keep their mask.
pub fn layerwise_prune<F: Element>(sub: &Subnetwork<F>, rate: f64, depth_limit: usize) -> Result<PruneOutcome> {
    if depth_limit == 0 {
        return Err(Error::InvalidArgument("depth_limit must be >= 1".into()));
    }
    magnitude_prune(sub.model.registry(), &sub.mask, rate, Some(depth_limit))
}

fn keep_count(fraction: f64, total: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("remaining fraction {fraction} not in (0,1]")));
    }
    let keep = (fraction * total as f64 + 0.5).floor() as usize;
    if keep == 0 {
        return Err(Error::InvalidArgument(format!("fraction {fraction} of {total} leaves no weights")));
    }
    Ok(keep.min(total))
}

fn mask_from_flat<F: Element>(registry: &ParamRegistry<F>, flat: &[u8]) -> Mask {
    let mut mask = Mask::full(registry);
    let mut off = 0;
    for e in &mut mask.entries {
        let n = e.bits.len();
        e.bits.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    mask
}

/// Exactly `round(fraction·d)` active entries at uniformly random positions.
pub fn random_mask<F: Element>(registry: &ParamRegistry<F>, fraction: f64, seed: u64) -> Result<Mask> {
    let d = registry.prunable_count();
    let keep = keep_count(fraction, d)?;
    let mut rng = SplitMix64::derive(seed, &[tag::MASK]);
    let mut flat = vec![0u8; d];
    for i in index::sample(&mut rng, d, keep) {
        flat[i] = 1;
    }
    Ok(mask_from_flat(registry, &flat))
}

/// Random mask that removes naturally-zero weights first: with `p` entries
/// to prune and zero set `Z`, prunes a random `p`-subset of `Z` if
/// `p ≤ |Z|`, else all of `Z` plus `p − |Z|` random non-zero entries.
pub fn sparsity_corrected_random_mask<F: Element>(
    registry: &ParamRegistry<F>,
    fraction: f64,
    epsilon: f64,
    seed: u64,
) -> Result<Mask> {
    let d = registry.prunable_count();
    let keep = keep_count(fraction, d)?;
    let prune = d - keep;
    let mags: Vec<f64> = registry
        .prunable()
        .flat_map(|e| e.tensor.data().iter().map(|w| w.as_f64().abs()))
        .collect();
    let (zeros, nonzeros): (Vec<usize>, Vec<usize>) = (0..d).partition(|&i| mags[i] < epsilon);
    let mut rng = SplitMix64::derive(seed, &[tag::MASK]);
    let mut flat = vec![1u8; d];
    if prune <= zeros.len() {
        for i in index::sample(&mut rng, zeros.len(), prune) {
            flat[zeros[i]] = 0;
        }
    } else {
        for &z in &zeros {
            flat[z] = 0;
        }
        for i in index::sample(&mut rng, nonzeros.len(), prune - zeros.len()) {
            flat[nonzeros[i]] = 0;
        }
    }
    Ok(mask_from_flat(registry, &flat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer_id: usize,
    pub name: String,
    pub zero: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    /// Lower edge of every bin; the first bin is `[0, epsilon)` and each
    /// following bin spans one decade, the last one open-ended.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub epsilon: f64,
    pub global_fraction: f64,
    pub per_layer: Vec<LayerSparsity>,
    pub histogram: MagnitudeHistogram,
}

/// Fraction of prunable weights with `|w| < epsilon`, per layer and overall.
pub fn natural_sparsity<F: Element>(registry: &ParamRegistry<F>, epsilon: f64) -> SparsityReport {
    let mut bins = vec![0.0, epsilon];
    let first_decade = epsilon.log10().ceil() as i32;
    let first = if 10f64.powi(first_decade) <= epsilon { first_decade + 1 } else { first_decade };
    bins.extend((first..=2).map(|e| 10f64.powi(e)));
    let mut counts = vec![0usize; bins.len()];
    let mut per_layer = Vec::new();
    let (mut zero_total, mut total) = (0usize, 0usize);
    for e in registry.prunable() {
        let mut zero = 0;
        for w in e.tensor.data() {
            let m = w.as_f64().abs();
            if m < epsilon {
                zero += 1;
            }
            let bin = bins.partition_point(|&edge| edge <= m).saturating_sub(1);
            counts[bin] += 1;
        }
        zero_total += zero;
        total += e.tensor.len();
        per_layer.push(LayerSparsity {
            layer_id: e.layer_id,
            name: e.name.clone(),
            zero,
            total: e.tensor.len(),
            fraction: zero as f64 / e.tensor.len().max(1) as f64,
        });
    }
    SparsityReport {
        epsilon,
        global_fraction: zero_total as f64 / total.max(1) as f64,
        per_layer,
        histogram: MagnitudeHistogram { bins, counts },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec, ParamEntry, ParamKind};
    use crate::tensor::Tensor;

    fn registry(layers: &[&[f64]]) -> ParamRegistry<f64> {
        ParamRegistry::new(
            layers
                .iter()
                .enumerate()
                .map(|(i, w)| ParamEntry {
                    layer_id: i + 1,
                    name: format!("conv{}.weight", i + 1),
                    tensor: Tensor::new(vec![w.len()], w.to_vec()).unwrap(),
                    prunable: true,
                    kind: ParamKind::Conv,
                })
                .collect(),
        )
    }

    #[test]
    fn smallest_magnitude_goes_first() {
        let reg = registry(&[&[0.5, -0.1, 0.3, -0.7]]);
        let out = global_magnitude_prune_weights(&reg, &Mask::full(&reg), 0.25).unwrap();
        assert_eq!(out.mask.entries()[0].bits, vec![1, 0, 1, 1]);
        assert_eq!(out.newly_pruned, 1);
    }

    #[test]
    fn tiny_rate_is_noop() {
        let reg = registry(&[&[0.5, -0.1, 0.3, -0.7]]);
        let full = Mask::full(&reg);
        let out = global_magnitude_prune_weights(&reg, &full, 0.1).unwrap();
        assert!(out.noop);
        assert_eq!(out.mask, full);
    }

    #[test]
    fn cannot_empty_network() {
        let reg = registry(&[&[0.5, 0.2]]);
        let mut mask = Mask::full(&reg);
        mask.entries[0].bits[0] = 0;
        let err = global_magnitude_prune_weights(&reg, &mask, 0.6).unwrap_err();
        assert!(matches!(err, Error::WouldEmptyNetwork { .. }));
    }

    #[test]
    fn successive_counts() {
        let w: Vec<f64> = (0..100).map(|i| ((i * 37) % 101) as f64 + 1.0).collect();
        let reg = registry(&[&w]);
        let mut mask = Mask::full(&reg);
        let mut seen = Vec::new();
        for _ in 0..3 {
            mask = global_magnitude_prune_weights(&reg, &mask, 0.2).unwrap().mask;
            seen.push(mask.remaining());
        }
        assert_eq!(seen, vec![80, 64, 51]);
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let reg = registry(&[&[1.0, 0.5, 0.5], &[0.5, 2.0]]);
        let out = global_magnitude_prune_weights(&reg, &Mask::full(&reg), 0.4).unwrap();
        assert_eq!(out.mask.entries()[0].bits, vec![1, 0, 0]);
        assert_eq!(out.mask.entries()[1].bits, vec![1, 1]);
    }

    fn sub_of(reg: ParamRegistry<f64>) -> Subnetwork<f64> {
        Subnetwork {
            mask: Mask::full(&reg),
            model: {
                let mut m = build_model::<f64>(&ArchSpec::mini_conv(2), 0).unwrap();
                *m.registry_mut() = reg;
                m
            },
        }
    }

    #[test]
    fn layerwise_restricts_pool() {
        let sub = sub_of(registry(&[&[0.9, 0.1, 0.8, 0.2], &[0.01, 0.02, 0.03]]));
        let out = layerwise_prune(&sub, 0.5, 1).unwrap();
        assert_eq!(out.mask.entries()[0].bits, vec![1, 0, 1, 0]);
        assert_eq!(out.mask.entries()[1].bits, vec![1, 1, 1]);
        let all = layerwise_prune(&sub, 0.5, 9).unwrap();
        assert_eq!(all, global_magnitude_prune(&sub, 0.5).unwrap());
        assert!(layerwise_prune(&sub, 0.5, 0).is_err());
    }

    #[test]
    fn random_mask_counts() {
        let w = vec![1.0; 1000];
        let reg = registry(&[&w]);
        assert_eq!(random_mask(&reg, 1.0, 3).unwrap().remaining(), 1000);
        let a = random_mask(&reg, 0.2, 3).unwrap();
        let b = random_mask(&reg, 0.2, 4).unwrap();
        assert_eq!(a.remaining(), 200);
        assert_ne!(a, b);
        assert_eq!(a, random_mask(&reg, 0.2, 3).unwrap());
        // overlap ~ Hypergeometric(1000, 200, 200): mean 40, sd ≈ 5.07
        let overlap = a.entries()[0].bits.iter().zip(&b.entries()[0].bits).filter(|(x, y)| **x == 1 && **y == 1).count();
        assert!((overlap as f64 - 40.0).abs() <= 4.0 * 5.07, "overlap {overlap}");
        assert!(random_mask(&reg, 0.0001, 3).is_err());
    }

    #[test]
    fn natural_sparsity_fixtures() {
        let reg = registry(&[&[0.5, 0.25, 1.0]]);
        assert_eq!(natural_sparsity(&reg, DEFAULT_EPSILON).global_fraction, 0.0);
        let reg = registry(&[&[0.0, 1.0, 0.0, 1.0]]);
        assert_eq!(natural_sparsity(&reg, DEFAULT_EPSILON).global_fraction, 0.5);
        let mut w = [0.3; 10];
        for i in [1, 4, 7] {
            w[i] = 1e-40;
        }
        let reg = registry(&[&w[..6], &w[6..]]);
        let rep = natural_sparsity(&reg, DEFAULT_EPSILON);
        assert!((rep.global_fraction - 0.3).abs() < 1e-15);
        assert_eq!(rep.histogram.counts.iter().sum::<usize>(), 10);
        assert_eq!(rep.histogram.counts[0], 3);
        let weighted: f64 = rep.per_layer.iter().map(|l| l.fraction * l.total as f64).sum::<f64>() / 10.0;
        assert!((weighted - rep.global_fraction).abs() < 1e-12);
    }

    #[test]
    fn corrected_random_mask_regimes() {
        let w = [0.0, 0.5, 0.0, 0.4, 0.3, 0.0, 0.2, 0.0, 0.9, 0.8];
        let reg = registry(&[&w]);
        let zeros: Vec<usize> = (0..10).filter(|&i| w[i] == 0.0).collect();

        let m = sparsity_corrected_random_mask(&reg, 0.3, DEFAULT_EPSILON, 1).unwrap();
        let bits = &m.entries()[0].bits;
        assert_eq!(m.remaining(), 3);
        assert!(zeros.iter().all(|&z| bits[z] == 0));

        let m = sparsity_corrected_random_mask(&reg, 0.6, DEFAULT_EPSILON, 1).unwrap();
        let pruned: Vec<usize> = (0..10).filter(|&i| m.entries()[0].bits[i] == 0).collect();
        assert_eq!(pruned, zeros);

        let m = sparsity_corrected_random_mask(&reg, 0.8, DEFAULT_EPSILON, 1).unwrap();
        let pruned: Vec<usize> = (0..10).filter(|&i| m.entries()[0].bits[i] == 0).collect();
        assert_eq!(pruned.len(), 2);
        assert!(pruned.iter().all(|p| zeros.contains(p)));
    }

    #[test]
    fn apply_mask_zeroes_and_checks() {
        let model = build_model::<f32>(&ArchSpec::mini_conv(10), 1).unwrap();
        let full = Mask::full(model.registry());
        let sub = apply_mask(model.clone(), full).unwrap();
        assert_eq!(sub.model(), &model);

        let mask = random_mask(model.registry(), 0.3, 2).unwrap();
        let sub = apply_mask(model.clone(), mask.clone()).unwrap();
        for (e, m) in sub.model().registry().prunable().zip(mask.entries()) {
            for (w, &b) in e.tensor.data().iter().zip(&m.bits) {
                if b == 0 {
                    assert_eq!(w.to_bits(), 0);
                }
            }
        }
        let other = build_model::<f32>(&ArchSpec::mini_vgg(10), 1).unwrap();
        assert!(matches!(apply_mask(other, mask), Err(Error::MaskMismatch(_))));
    }
}
