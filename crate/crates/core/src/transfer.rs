//! Evaluation protocols: accuracy, linear probes on frozen features and
//! finetuning of pruned backbones.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{he_init, HeadSpec, Model, LABEL_HEAD, ROTATION_HEAD};
use crate::optim::{LrSchedule, SgdConfig, SgdState};
use crate::pretext::{rotnet_batch, RotationMode, TaskKind};
use crate::pruning::Subnetwork;
use crate::rng::{tag, SplitMix64};
use crate::tensor::{Element, Tensor};
use crate::train::{train, Position, TaskData, TrainConfig, TrainRun};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    /// Accuracy per class; `NaN`-free, classes without samples report 0.
    pub per_class: Vec<f64>,
    pub count: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 and per-class accuracy of `logits:[N,C]` against `labels`.
pub fn accuracy<F: Element>(logits: &Tensor<F>, labels: &[usize], classes: usize) -> Result<Metrics> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("accuracy", format!("{n} rows vs {} labels", labels.len())));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (row, &l) in logits.data().chunks(c.max(1)).zip(labels) {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        totals[l] += 1;
        if argmax(row) == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Metrics {
        top1: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        count: n,
    })
}

fn batched<F: Element>(ds: &Dataset, mut f: impl FnMut(Tensor<F>) -> Result<Tensor<F>>) -> Result<Tensor<F>> {
    let mut parts = Vec::new();
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        parts.push(f(ds.batch(chunk))?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Eval-mode accuracy of the label head on `ds`. Pure: the model is not
/// touched.
pub fn evaluate<F: Element>(model: &Model<F>, ds: &Dataset) -> Result<Metrics> {
    let logits = batched(ds, |x| model.predict(&x, LABEL_HEAD))?;
    accuracy(&logits, ds.labels()?, ds.class_count())
}

/// Accuracy of the rotation head over all four rotations of every image.
pub fn evaluate_rotation<F: Element>(model: &Model<F>, ds: &Dataset) -> Result<Metrics> {
    let mut labels = Vec::new();
    let logits = batched(ds, |x| {
        let (rotated, l) = rotnet_batch(&x, RotationMode::AllFour, &mut SplitMix64::new(0))?;
        labels.extend(l);
        model.predict(&rotated, ROTATION_HEAD)
    })?;
    accuracy(&logits, &labels, 4)
}

/// Eval-mode penultimate features of every image.
pub fn dataset_features<F: Element>(model: &Model<F>, ds: &Dataset) -> Result<Tensor<F>> {
    batched(ds, |x| model.extract_features(&x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub sgd: SgdConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 64,
            schedule: LrSchedule {
                base_lr: 0.05,
                decay_factor: 10.0,
                decay_epochs: vec![20],
                warmup_epochs: 0,
            },
            sgd: SgdConfig {
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        }
    }
}

/// Per-dimension standardization fitted on the probe's training features.
/// Being affine, it leaves the family of linear classifiers unchanged and
/// only conditions the optimization.
fn standardize<F: Element>(train: &mut Tensor<F>, test: &mut Tensor<F>) -> Result<()> {
    let (n, d) = train.dims2()?;
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in train.data().chunks(d) {
        for j in 0..d {
            let v = row[j].as_f64();
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            mean[j] /= n.max(1) as f64;
            let var = (sq[j] / n.max(1) as f64 - mean[j] * mean[j]).max(0.0);
            1.0 / (var.sqrt() + 1e-6)
        })
        .collect();
    for t in [train, test] {
        for row in t.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = F::of((row[j].as_f64() - mean[j]) * scale[j]);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub test: Metrics,
    pub train: Metrics,
}

/// Trains a fresh linear classifier on frozen eval-mode features of
/// `backbone` and reports held-out accuracy. The backbone is only read.
pub fn linear_probe<F: Element>(
    backbone: &Model<F>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    cfg.schedule.validate()?;
    let classes = train_set.class_count();
    let mut xtr = dataset_features(backbone, train_set)?;
    let mut xte = dataset_features(backbone, test_set)?;
    standardize(&mut xtr, &mut xte)?;
    let ytr = train_set.labels()?;
    let d = xtr.dims2()?.1;
    let mut w: Tensor<F> = he_init(&[classes, d], SplitMix64::derive(seed, &[tag::PROBE, tag::HEAD]).state());
    let mut b: Tensor<F> = Tensor::zeros(&[classes]);
    let mut sgd = SgdState::new(cfg.sgd.clone(), &[&w, &b]);
    let n = train_set.len();
    let bsz = cfg.batch_size.clamp(1, n);
    let per_epoch = n / bsz;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut SplitMix64::derive(seed, &[tag::PROBE, epoch as u64]));
        for batch in 0..per_epoch {
            let idx = &order[batch * bsz..(batch + 1) * bsz];
            let labels: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(xtr.select_rows(idx));
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            let logits = g.linear(x, wn, Some(bn))?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let mut grads = g.backward(loss)?;
            let gw = grads.take(wn);
            let gb = grads.take(bn);
            let lr = cfg.schedule.lr_at(epoch, batch, per_epoch);
            sgd.step(&mut [&mut w, &mut b], &[gw, gb], &[None, None], lr)
                .map_err(|_| Error::Divergence {
                    iteration: 0,
                    step: epoch * per_epoch + batch,
                })?;
        }
    }
    let head_logits = |x: &Tensor<F>| -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let bn = g.constant(b.clone());
        let out = g.linear(x, wn, Some(bn))?;
        Ok(g.value(out).clone())
    };
    Ok(ProbeOutcome {
        test: accuracy(&head_logits(&xte)?, test_set.labels()?, classes)?,
        train: accuracy(&head_logits(&xtr)?, ytr, classes)?,
    })
}

/// Swaps in a fresh label head sized for `classes`.
pub fn with_label_head<F: Element>(model: &mut Model<F>, classes: usize, seed: u64) -> Result<()> {
    model.replace_heads(&[HeadSpec::new(LABEL_HEAD, classes)], SplitMix64::derive(seed, &[tag::HEAD]).state())
}

/// Finetuning with the pretraining mask held fixed: the classifier is
/// replaced for the target classes and every unmasked weight is trained.
pub fn finetune<F: Element>(
    pretrained: &Subnetwork<F>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Subnetwork<F>, Metrics)> {
    let mut sub = pretrained.clone();
    with_label_head(sub.model_mut(), train_set.class_count(), seed)?;
    let task = TaskKind::Labels;
    let data = TaskData::new(&task, train_set.clone(), seed)?;
    let run = TrainRun {
        task: &task,
        data: &data,
        cfg,
        seed: SplitMix64::derive(seed, &[tag::FINETUNE]).state(),
    };
    let mask = sub.mask().clone();
    train(sub.model_mut(), Some(&mask), &run, Position::default(), None)?;
    let metrics = evaluate(sub.model(), test_set)?;
    Ok((sub, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SynthSpec};
    use crate::model::{build_model, ArchSpec};
    use crate::pruning::{apply_mask, random_mask, Mask};

    #[test]
    fn accuracy_fixtures() {
        let perfect = Tensor::new(vec![3, 3], vec![9.0f64, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(accuracy(&perfect, &[0, 1, 2], 3).unwrap().top1, 1.0);

        let constant = Tensor::full(&[5, 3], 0.5f64);
        let m = accuracy(&constant, &[0, 1, 0, 2, 1], 3).unwrap();
        assert_eq!(m.top1, 2.0 / 5.0);
        assert_eq!(m.per_class, vec![1.0, 0.0, 0.0]);

        let logits = Tensor::new(vec![4, 2], vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0, 0], 2).unwrap().top1, 0.75);
    }

    fn data() -> (Dataset, Dataset) {
        let tr = generate_synthetic(&SynthSpec::new(200, 4, 16), 1, Split::Train).unwrap();
        let te = generate_synthetic(&SynthSpec::new(200, 4, 16), 2, Split::Test).unwrap();
        (tr, te)
    }

    #[test]
    fn evaluate_is_pure() {
        let (_, te) = data();
        let model = build_model::<f32>(&ArchSpec::mini_conv(4), 1).unwrap();
        let a = evaluate(&model, &te).unwrap();
        let b = evaluate(&model, &te).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, build_model::<f32>(&ArchSpec::mini_conv(4), 1).unwrap());
        assert_eq!(evaluate_rotation(&Model::<f32>::with_heads(&ArchSpec::mini_conv(4), 1, &TaskKind::Rotnet.heads(4)).unwrap(), &te).unwrap().count, 800);
    }

    #[test]
    fn probe_leaves_backbone_untouched() {
        let (tr, te) = data();
        let model = build_model::<f32>(&ArchSpec::mini_conv(4), 5).unwrap();
        let before = model.clone();
        let cfg = ProbeConfig {
            epochs: 3,
            ..ProbeConfig::default()
        };
        let out = linear_probe(&model, &tr, &te, &cfg, 1).unwrap();
        assert_eq!(model, before);
        assert!(out.test.top1 > 0.0);
    }

    #[test]
    fn zero_epoch_probe_is_near_chance() {
        let (tr, te) = data();
        let model = build_model::<f32>(&ArchSpec::mini_conv(4), 5).unwrap();
        let cfg = ProbeConfig {
            epochs: 0,
            ..ProbeConfig::default()
        };
        let mut accs = Vec::new();
        for seed in 0..8 {
            accs.push(linear_probe(&model, &tr, &te, &cfg, seed).unwrap().test.top1);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // chance 0.25; an untrained head's accuracy is a random variable over
        // seeds, and 8 draws of 200 images keep the mean well inside ±0.15
        assert!((mean - 0.25).abs() < 0.15, "{accs:?}");
    }

    #[test]
    fn finetune_keeps_mask_and_full_mask_is_plain_training() {
        let (tr, te) = data();
        let model = build_model::<f32>(&ArchSpec::mini_conv(4), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            schedule: LrSchedule::constant(0.05),
            sgd: SgdConfig::default(),
            augment: false,
        };
        let mask = random_mask(model.registry(), 0.5, 2).unwrap();
        let sub = apply_mask(model.clone(), mask.clone()).unwrap();
        let (tuned, _) = finetune(&sub, &tr, &te, &cfg, 3).unwrap();
        for (e, m) in tuned.model().registry().prunable().zip(mask.entries()) {
            assert!(e.tensor.data().iter().zip(&m.bits).all(|(w, &b)| b == 1 || w.to_bits() == 0));
        }

        let full = apply_mask(model.clone(), Mask::full(model.registry())).unwrap();
        let (a, ma) = finetune(&full, &tr, &te, &cfg, 3).unwrap();
        let mut plain = model.clone();
        with_label_head(&mut plain, 4, 3).unwrap();
        let task = TaskKind::Labels;
        let d = TaskData::new(&task, tr.clone(), 3).unwrap();
        let run = TrainRun {
            task: &task,
            data: &d,
            cfg: &cfg,
            seed: SplitMix64::derive(3, &[tag::FINETUNE]).state(),
        };
        train(&mut plain, None, &run, Position::default(), None).unwrap();
        assert_eq!(a.model(), &plain);
        assert_eq!(ma, evaluate(&plain, &te).unwrap());
    }
}
