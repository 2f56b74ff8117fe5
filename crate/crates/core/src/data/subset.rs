use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// Keep every class, label a fraction of each class's images.
    PerClass,
    /// Label every image of a fraction of the classes.
    ByClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub mode: SubsetMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct LabeledSplit {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    /// Source row of every labeled / unlabeled image, ascending.
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

/// Splits `ds` into a labeled part and an unlabeled part with hidden labels.
/// Per-class counts are `floor(fraction·n_c)` with a minimum of 1.
pub fn sample_labeled_subset(ds: &Dataset, spec: &SubsetSpec) -> Result<LabeledSplit> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction {} not in (0,1]", spec.fraction)));
    }
    let labels = ds.labels()?;
    let classes = ds.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = SplitMix64::derive(spec.seed, &[tag::SUBSET]);
    let mut chosen = vec![false; ds.len()];
    match spec.mode {
        SubsetMode::PerClass => {
            for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
                let take = ((spec.fraction * members.len() as f64).floor() as usize).max(1);
                members.shuffle(&mut rng);
                for &i in &members[..take] {
                    chosen[i] = true;
                }
            }
        }
        SubsetMode::ByClass => {
            let mut present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
            let take = ((spec.fraction * classes as f64).floor() as usize).max(1).min(present.len());
            present.shuffle(&mut rng);
            for &c in &present[..take] {
                for &i in &by_class[c] {
                    chosen[i] = true;
                }
            }
        }
    }
    let labeled_indices: Vec<usize> = (0..ds.len()).filter(|&i| chosen[i]).collect();
    let unlabeled_indices: Vec<usize> = (0..ds.len()).filter(|&i| !chosen[i]).collect();
    if labeled_indices.is_empty() {
        return Err(Error::InvalidArgument("labeled subset is empty".into()));
    }
    let labeled = ds.subset(&labeled_indices, Split::Labeled);
    let unlabeled = Dataset::unlabeled(ds.images().select_rows(&unlabeled_indices), classes)?;
    Ok(LabeledSplit {
        labeled,
        unlabeled,
        labeled_indices,
        unlabeled_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dataset(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32 / n as f32);
        Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes, Split::Train).unwrap()
    }

    #[test]
    fn full_fraction_is_identity() {
        let ds = dataset(10, 5);
        let s = sample_labeled_subset(&ds, &SubsetSpec { fraction: 1.0, mode: SubsetMode::PerClass, seed: 1 }).unwrap();
        assert_eq!(s.labeled.len(), 50);
        assert!(s.unlabeled.is_empty());
        assert_eq!(s.labeled.images(), ds.images());
    }

    #[test]
    fn per_class_tenth() {
        let ds = dataset(10, 100);
        let s = sample_labeled_subset(&ds, &SubsetSpec { fraction: 0.1, mode: SubsetMode::PerClass, seed: 4 }).unwrap();
        assert_eq!(s.labeled.len(), 100);
        assert_eq!(s.labeled.class_histogram().unwrap(), vec![10; 10]);
        assert!(!s.unlabeled.has_labels());
    }

    #[test]
    fn by_class_tenth() {
        let ds = dataset(10, 100);
        let s = sample_labeled_subset(&ds, &SubsetSpec { fraction: 0.1, mode: SubsetMode::ByClass, seed: 4 }).unwrap();
        assert_eq!(s.labeled.len(), 100);
        let h = s.labeled.class_histogram().unwrap();
        assert_eq!(h.iter().filter(|&&c| c == 100).count(), 1);
        assert_eq!(h.iter().sum::<usize>(), 100);
    }

    #[test]
    fn minimum_one_and_deterministic() {
        let ds = dataset(3, 4);
        let spec = SubsetSpec { fraction: 0.01, mode: SubsetMode::PerClass, seed: 9 };
        let a = sample_labeled_subset(&ds, &spec).unwrap();
        let b = sample_labeled_subset(&ds, &spec).unwrap();
        assert_eq!(a.labeled.len(), 3);
        assert_eq!(a.labeled_indices, b.labeled_indices);
    }

    #[test]
    fn rejects_bad_fraction() {
        let ds = dataset(3, 4);
        for f in [0.0, -0.5, 1.5] {
            assert!(sample_labeled_subset(&ds, &SubsetSpec { fraction: f, mode: SubsetMode::ByClass, seed: 0 }).is_err());
        }
    }
}
