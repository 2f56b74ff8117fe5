//! Mini-batch SGD over any objective, with frozen masks, resumable
//! positions and snapshot capture after a given number of samples.
//!
//! All randomness of a run is a pure function of `(seed, epoch, batch)`, so
//! training resumed from a [`Position`] continues exactly as the original
//! run would have.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_labeled_subset, AugmentPolicy, Dataset, SubsetSpec};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::optim::{LrSchedule, SgdConfig, SgdState};
use crate::pretext::{exemplar_loss, rotnet_loss, s4l_loss, supervised_loss, LossGraph, RotationMode, TaskKind};
use crate::pruning::{zero_masked, Mask};
use crate::rng::{tag, SplitMix64};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Random crop and flip on every training image.
    #[serde(default)]
    pub augment: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config {
                key: "batch_size".into(),
                detail: format!("must be at least 2, got {}", self.batch_size),
            });
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config {
                key: "sgd".into(),
                detail: "momentum must be in [0,1) and weight_decay >= 0".into(),
            });
        }
        self.schedule.validate()
    }

    /// Batches per epoch for `n` training images; the ragged tail is dropped.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size.min(n).max(1)
    }

    fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.min(n)
    }

    pub fn total_samples(&self, n: usize) -> u64 {
        (self.epochs * self.batches_per_epoch(n) * self.effective_batch(n)) as u64
    }
}

/// The training images of a task together with which rows may expose
/// their labels.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    /// `Some` for semi-supervised tasks: only flagged rows are labeled.
    pub labeled: Option<Vec<bool>>,
}

impl TaskData {
    pub fn new(task: &TaskKind, train: Dataset, seed: u64) -> Result<Self> {
        if task.uses_labels() && !train.has_labels() {
            return Err(Error::InvalidArgument(format!("task `{}` needs a labeled dataset", task.name())));
        }
        let labeled = match task {
            TaskKind::S4l {
                label_fraction,
                subset_mode,
            } => {
                let split = sample_labeled_subset(
                    &train,
                    &SubsetSpec {
                        fraction: *label_fraction,
                        mode: *subset_mode,
                        seed,
                    },
                )?;
                let mut flags = vec![false; train.len()];
                for i in split.labeled_indices {
                    flags[i] = true;
                }
                Some(flags)
            }
            _ => None,
        };
        Ok(TaskData { train, labeled })
    }
}

/// Where a run stands: the next batch to process and samples seen so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub epoch: usize,
    pub batch: usize,
    /// Source images consumed (rotated or augmented copies are not counted).
    pub samples: u64,
}

/// Model state at a position of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<F> {
    pub position: Position,
    pub model: Model<F>,
}

pub struct TrainRun<'a> {
    pub task: &'a TaskKind,
    pub data: &'a TaskData,
    pub cfg: &'a TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainReport<F> {
    pub end: Position,
    /// Mean loss of every epoch that was (partly) run.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub snapshot: Option<Snapshot<F>>,
}

/// Builds the loss graph of `task` on the rows `idx` of the training set.
pub fn task_loss<F: Element>(
    model: &mut Model<F>,
    task: &TaskKind,
    data: &TaskData,
    idx: &[usize],
    augment_images: bool,
    rng: &mut SplitMix64,
) -> Result<LossGraph<F>> {
    let ds = &data.train;
    let images = if augment_images {
        let policy = AugmentPolicy::standard();
        let shape = ds.image_shape();
        let mut pixels = Vec::with_capacity(idx.len() * ds.image(0).len());
        for &i in idx {
            pixels.extend(augment(ds.image(i), shape, &policy, rng));
        }
        Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], pixels)?
    } else {
        ds.images().select_rows(idx)
    };
    match task {
        TaskKind::Labels => {
            let labels = ds.batch_labels(idx)?;
            supervised_loss(model, images.cast(), &labels, Mode::Train)
        }
        TaskKind::Rotnet => rotnet_loss(model, &images.cast(), RotationMode::AllFour, Mode::Train, rng),
        TaskKind::Exemplar { margin, .. } => exemplar_loss(model, &images, idx, *margin, Mode::Train, rng),
        TaskKind::S4l { .. } => {
            let flags = data
                .labeled
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("s4l data lacks a labeled subset".into()))?;
            let (lab, unl): (Vec<usize>, Vec<usize>) = (0..idx.len()).partition(|&j| flags[idx[j]]);
            let lab_images: Tensor<F> = images.select_rows(&lab).cast();
            let lab_labels: Vec<usize> = lab.iter().map(|&j| idx[j]).map(|i| ds.labels().map(|l| l[i])).collect::<Result<_>>()?;
            let unl_images: Tensor<F> = images.select_rows(&unl).cast();
            let labeled = (!lab.is_empty()).then_some((&lab_images, lab_labels.as_slice()));
            let unlabeled = (!unl.is_empty()).then_some(&unl_images);
            s4l_loss(model, labeled, unlabeled, Mode::Train, rng)
        }
    }
}

/// Runs SGD from `start` to the end of the epoch budget. Masked entries are
/// zeroed up front and stay zero. With `capture_at = Some(k)` the model is
/// snapshotted at the first batch boundary where at least `k` samples have
/// been processed.
pub fn train<F: Element>(
    model: &mut Model<F>,
    mask: Option<&Mask>,
    run: &TrainRun,
    start: Position,
    capture_at: Option<u64>,
) -> Result<TrainReport<F>> {
    run.cfg.validate()?;
    for head in run.task.heads(run.data.train.class_count()) {
        if !model.has_head(&head.name) {
            return Err(Error::InvalidArgument(format!(
                "task `{}` needs a `{}` head",
                run.task.name(),
                head.name
            )));
        }
    }
    if let Some(m) = mask {
        m.check_matches(model.registry())?;
        zero_masked(model.registry_mut(), m);
    }
    let n = run.data.train.len();
    let bsz = run.cfg.effective_batch(n);
    let per_epoch = run.cfg.batches_per_epoch(n);
    if let Some(k) = capture_at {
        let total = run.cfg.total_samples(n);
        if k > total {
            return Err(Error::InvalidArgument(format!("rewind at {k} samples is beyond the run length of {total}")));
        }
    }
    let params: Vec<&Tensor<F>> = model.registry().entries().iter().map(|e| &e.tensor).collect();
    let mut sgd = SgdState::new(run.cfg.sgd.clone(), &params);

    let mut pos = start;
    let mut snapshot = None;
    let mut epoch_losses = Vec::new();
    let mut steps = 0;
    let capture = |pos: Position, model: &Model<F>, snapshot: &mut Option<Snapshot<F>>| {
        if let Some(k) = capture_at {
            if snapshot.is_none() && pos.samples >= k {
                *snapshot = Some(Snapshot {
                    position: pos,
                    model: model.clone(),
                });
            }
        }
    };
    while pos.epoch < run.cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut SplitMix64::derive(run.seed, &[tag::EPOCH, pos.epoch as u64]));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        while pos.batch < per_epoch {
            capture(pos, model, &mut snapshot);
            let idx = &order[pos.batch * bsz..(pos.batch + 1) * bsz];
            let mut rng = SplitMix64::derive(run.seed, &[tag::BATCH, pos.epoch as u64, pos.batch as u64]);
            let step = pos.epoch * per_epoch + pos.batch;
            let diverged = |_| Error::Divergence { iteration: 0, step };
            let lg = task_loss(model, run.task, run.data, idx, run.cfg.augment, &mut rng).map_err(|e| match e {
                Error::NonFinite(_) => diverged(()),
                e => e,
            })?;
            let loss = lg.value().as_f64();
            if !loss.is_finite() {
                return Err(diverged(()));
            }
            let grads = lg.param_grads()?;
            drop(lg);
            let lr = run.cfg.schedule.lr_at(pos.epoch, pos.batch, per_epoch);
            let masks = match mask {
                Some(m) => m.aligned(model.registry()),
                None => vec![None; model.registry().len()],
            };
            let mut params: Vec<&mut Tensor<F>> =
                model.registry_mut().entries_mut().iter_mut().map(|e| &mut e.tensor).collect();
            sgd.step(&mut params, &grads, &masks, lr).map_err(|e| match e {
                Error::NonFinite(_) => diverged(()),
                e => e,
            })?;
            loss_sum += loss;
            loss_count += 1;
            steps += 1;
            pos.batch += 1;
            pos.samples += bsz as u64;
        }
        if loss_count > 0 {
            epoch_losses.push(loss_sum / loss_count as f64);
        }
        pos.epoch += 1;
        pos.batch = 0;
    }
    capture(pos, model, &mut snapshot);
    Ok(TrainReport {
        end: pos,
        epoch_losses,
        steps,
        snapshot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SynthSpec};
    use crate::model::{ArchSpec, Model};
    use crate::pruning::random_mask;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            schedule: LrSchedule::constant(0.05),
            sgd: SgdConfig::default(),
            augment: false,
        }
    }

    fn setup(task: &TaskKind) -> (Model<f32>, TaskData) {
        let spec = ArchSpec::mini_conv(4);
        let ds = generate_synthetic(&SynthSpec::new(64, 4, 16), 3, Split::Train).unwrap();
        let model = Model::with_heads(&spec, 1, &task.heads(4)).unwrap();
        (model, TaskData::new(task, ds, 5).unwrap())
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        // without momentum the optimizer is stateless, so a resumed run must
        // retrace the uninterrupted one exactly
        let task = TaskKind::Rotnet;
        let (model, data) = setup(&task);
        let c = TrainConfig {
            sgd: SgdConfig {
                momentum: 0.0,
                weight_decay: 1e-4,
            },
            ..cfg(2)
        };
        let run = TrainRun {
            task: &task,
            data: &data,
            cfg: &c,
            seed: 11,
        };
        let mut full = model.clone();
        let rep = train(&mut full, None, &run, Position::default(), Some(40)).unwrap();
        let snap = rep.snapshot.unwrap();
        assert_eq!(snap.position, Position { epoch: 0, batch: 3, samples: 48 });
        assert_eq!(rep.end.samples, 128);

        let mut resumed = snap.model.clone();
        let tail = train(&mut resumed, None, &run, snap.position, None).unwrap();
        assert_eq!(tail.end, rep.end);
        assert_eq!(resumed, full);
    }

    #[test]
    fn capture_at_zero_is_initialization() {
        let task = TaskKind::Labels;
        let (model, data) = setup(&task);
        let c = cfg(1);
        let run = TrainRun {
            task: &task,
            data: &data,
            cfg: &c,
            seed: 2,
        };
        let mut m = model.clone();
        let rep = train(&mut m, None, &run, Position::default(), Some(0)).unwrap();
        assert_eq!(rep.snapshot.unwrap().model, model);
        assert!(train(&mut model.clone(), None, &run, Position::default(), Some(10_000)).is_err());
    }

    #[test]
    fn full_mask_equals_unmasked_training() {
        let task = TaskKind::Labels;
        let (model, data) = setup(&task);
        let c = cfg(1);
        let run = TrainRun {
            task: &task,
            data: &data,
            cfg: &c,
            seed: 2,
        };
        let mut a = model.clone();
        let ra = train(&mut a, None, &run, Position::default(), None).unwrap();
        let mut b = model.clone();
        let full = Mask::full(model.registry());
        let rb = train(&mut b, Some(&full), &run, Position::default(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
    }

    #[test]
    fn masked_entries_stay_zero_for_every_task() {
        for task in [
            TaskKind::Labels,
            TaskKind::Rotnet,
            TaskKind::exemplar(),
            TaskKind::S4l {
                label_fraction: 0.25,
                subset_mode: crate::data::SubsetMode::PerClass,
            },
        ] {
            let (mut model, data) = setup(&task);
            let mask = random_mask(model.registry(), 0.3, 4).unwrap();
            let c = cfg(1);
            let run = TrainRun {
                task: &task,
                data: &data,
                cfg: &c,
                seed: 3,
            };
            train(&mut model, Some(&mask), &run, Position::default(), None).unwrap();
            for (e, m) in model.registry().prunable().zip(mask.entries()) {
                for (w, &b) in e.tensor.data().iter().zip(&m.bits) {
                    if b == 0 {
                        assert_eq!(w.to_bits(), 0, "{}", task.name());
                    }
                }
            }
        }
    }

    #[test]
    fn missing_head_is_rejected() {
        let task = TaskKind::Rotnet;
        let (_, data) = setup(&task);
        let mut model = crate::model::build_model::<f32>(&ArchSpec::mini_conv(4), 0).unwrap();
        let c = cfg(1);
        let run = TrainRun {
            task: &task,
            data: &data,
            cfg: &c,
            seed: 0,
        };
        assert!(train(&mut model, None, &run, Position::default(), None).is_err());
    }

    #[test]
    fn exploding_rate_reports_divergence() {
        let task = TaskKind::Labels;
        let (mut model, data) = setup(&task);
        let c = TrainConfig {
            schedule: LrSchedule::constant(1e30),
            ..cfg(3)
        };
        let run = TrainRun {
            task: &task,
            data: &data,
            cfg: &c,
            seed: 0,
        };
        let err = train(&mut model, None, &run, Position::default(), None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
