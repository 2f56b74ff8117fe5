//! Iterative magnitude pruning with late resetting, winning-ticket
//! extraction and the re-initialization baselines.
//!
//! Iteration `t` trains the network under mask `m_{t−1}` and prunes it to
//! `m_t`. The first iteration trains from initialization and captures the
//! rewind checkpoint `W_k` after `k` samples; every later iteration restarts
//! from `W_k` (masked entries zeroed, momentum reset) and runs the remainder
//! of the same schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, ArchSpec, Model};
use crate::pretext::TaskKind;
use crate::pruning::{apply_mask, global_magnitude_prune_weights, random_mask, Mask, PruneOutcome, Subnetwork};
use crate::rng::{tag, SplitMix64};
use crate::tensor::Element;
use crate::train::{train, Position, TaskData, TrainConfig, TrainRun};
use crate::transfer::{evaluate, with_label_head, Metrics};

pub const DEFAULT_RATE: f64 = 0.2;
pub const DEFAULT_MAX_ITERATIONS: usize = 30;
pub const DEFAULT_REPORT_ITERATIONS: [usize; 14] = [1, 2, 3, 4, 5, 7, 9, 11, 14, 17, 20, 23, 26, 30];
/// Default rewind point, in epochs of the training set.
pub const DEFAULT_REWIND_EPOCHS: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpConfig {
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_max")]
    pub max_iterations: usize,
    /// Samples processed before the rewind snapshot; three epochs if unset.
    #[serde(default)]
    pub rewind_samples: Option<u64>,
    #[serde(default = "default_reports")]
    pub report_iterations: Vec<usize>,
    /// Restrict pruning to layers `1..=depth_limit`.
    #[serde(default)]
    pub depth_limit: Option<usize>,
}

fn default_rate() -> f64 {
    DEFAULT_RATE
}
fn default_max() -> usize {
    DEFAULT_MAX_ITERATIONS
}
fn default_reports() -> Vec<usize> {
    DEFAULT_REPORT_ITERATIONS.to_vec()
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            rate: DEFAULT_RATE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            rewind_samples: None,
            report_iterations: default_reports(),
            depth_limit: None,
        }
    }
}

impl ImpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Error::Config {
            key: format!("imp.{key}"),
            detail,
        };
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(bad("rate", format!("must be in (0,1), got {}", self.rate)));
        }
        if self.max_iterations == 0 {
            return Err(bad("max_iterations", "must be at least 1".into()));
        }
        if self.report_iterations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("report_iterations", "must be strictly increasing".into()));
        }
        if let Some(&bad_it) = self
            .report_iterations
            .iter()
            .find(|&&t| t == 0 || t > self.max_iterations)
        {
            return Err(bad("report_iterations", format!("{bad_it} is outside 1..={}", self.max_iterations)));
        }
        if self.depth_limit == Some(0) {
            return Err(bad("depth_limit", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rewind_for(&self, train_len: usize) -> u64 {
        self.rewind_samples.unwrap_or(DEFAULT_REWIND_EPOCHS * train_len as u64)
    }

    pub fn reports(&self, iteration: usize) -> bool {
        self.report_iterations.contains(&iteration)
    }
}

/// Remaining counts `r_0 = d, r_t = r_{t−1} − round(rate·r_{t−1})`.
pub fn remaining_schedule(d: usize, rate: f64, iterations: usize) -> Vec<usize> {
    let mut out = vec![d];
    for _ in 0..iterations {
        let r = *out.last().unwrap();
        out.push(r - crate::pruning::prune_count(rate, r).min(r));
    }
    out
}

/// Weights `W_k` together with the position needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct RewindCheckpoint<F> {
    pub samples: u64,
    pub position: Position,
    pub seed: u64,
    pub model: Model<F>,
}

#[derive(Serialize, Deserialize)]
struct RewindMeta {
    samples: u64,
    position: Position,
    seed: u64,
}

impl<F: Element> RewindCheckpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(RewindMeta {
            samples: self.samples,
            position: self.position,
            seed: self.seed,
        })?;
        save_checkpoint(path, &self.model, None, Some(meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, _, meta) = load_model(path)?;
        let extra = meta.extra.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: "sidecar lacks rewind metadata".into(),
        })?;
        let m: RewindMeta = serde_json::from_value(extra)?;
        Ok(RewindCheckpoint {
            samples: m.samples,
            position: m.position,
            seed: m.seed,
            model,
        })
    }
}

/// Trains from initialization until `rewind_samples` have been processed
/// and returns the snapshot; the rest of the schedule is not run.
pub fn capture_rewind<F: Element>(model: &Model<F>, run: &TrainRun, rewind_samples: u64) -> Result<RewindCheckpoint<F>> {
    let cfg = run.cfg;
    let n = run.data.train.len();
    if rewind_samples > cfg.total_samples(n) {
        return Err(Error::InvalidArgument(format!(
            "rewind at {rewind_samples} samples is beyond the run length of {}",
            cfg.total_samples(n)
        )));
    }
    let per_epoch = cfg.batches_per_epoch(n) as u64;
    let bsz = cfg.batch_size.min(n) as u64;
    // batches needed to reach the threshold, then stop right there
    let batches = rewind_samples.div_ceil(bsz);
    let epochs = (batches / per_epoch.max(1)) as usize;
    let short = TrainConfig {
        epochs: epochs + usize::from(!batches.is_multiple_of(per_epoch.max(1))),
        ..cfg.clone()
    };
    let mut m = model.clone();
    let rep = train(
        &mut m,
        None,
        &TrainRun {
            cfg: &short,
            ..*run
        },
        Position::default(),
        Some(rewind_samples),
    )?;
    let snap = rep.snapshot.expect("threshold within the shortened run");
    Ok(RewindCheckpoint {
        samples: snap.position.samples,
        position: snap.position,
        seed: run.seed,
        model: snap.model,
    })
}

/// One finished IMP iteration, handed to the observer.
pub struct ImpStep<'a, F> {
    pub iteration: usize,
    /// Mask the network was trained under (`m_{t−1}`).
    pub train_mask: &'a Mask,
    /// Trained weights `W*` of this iteration.
    pub trained: &'a Model<F>,
    /// Mask after pruning (`m_t`).
    pub mask: &'a Mask,
    pub prune: &'a PruneOutcome,
    pub epoch_losses: &'a [f64],
    pub rewind: &'a RewindCheckpoint<F>,
    pub reported: bool,
}

pub struct ImpOutcome<F> {
    pub rewind: RewindCheckpoint<F>,
    /// Index of the first mask held in `masks`.
    pub start: usize,
    /// `masks[i]` is `m_{start+i}`; `m_0` is the full mask.
    pub masks: Vec<Mask>,
}

/// State of an interrupted run: `mask` is `m_done`.
pub struct ImpResume<F> {
    pub rewind: RewindCheckpoint<F>,
    pub done: usize,
    pub mask: Mask,
}

fn tag_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::Divergence { step, .. } => Error::Divergence { iteration, step },
        e => e,
    }
}

/// Runs IMP for `cfg.max_iterations` iterations starting from `model`,
/// calling `observe` after each one.
pub fn imp_run<F: Element>(
    model: &Model<F>,
    run: &TrainRun,
    cfg: &ImpConfig,
    observe: impl FnMut(&ImpStep<F>) -> Result<()>,
) -> Result<ImpOutcome<F>> {
    imp_continue(model, run, cfg, None, observe)
}

/// Like [`imp_run`], but picks up after iteration `resume.done`. Because
/// every iteration after the first restarts from the rewind point, the
/// continuation is identical to an uninterrupted run.
pub fn imp_continue<F: Element>(
    model: &Model<F>,
    run: &TrainRun,
    cfg: &ImpConfig,
    resume: Option<ImpResume<F>>,
    mut observe: impl FnMut(&ImpStep<F>) -> Result<()>,
) -> Result<ImpOutcome<F>> {
    cfg.validate()?;
    let k = cfg.rewind_for(run.data.train.len());
    let (start, mut masks, mut rewind) = match resume {
        None => (0, vec![Mask::full(model.registry())], None),
        Some(r) => {
            r.mask.check_matches(model.registry())?;
            (r.done, vec![r.mask], Some(r.rewind))
        }
    };
    for t in start + 1..=cfg.max_iterations {
        let mask = masks.last().unwrap().clone();
        let (trained, losses) = match &rewind {
            None => {
                let mut m = model.clone();
                let rep = train(&mut m, Some(&mask), run, Position::default(), Some(k)).map_err(|e| tag_iteration(e, t))?;
                let snap = rep.snapshot.expect("rewind point checked against run length");
                rewind = Some(RewindCheckpoint {
                    samples: snap.position.samples,
                    position: snap.position,
                    seed: run.seed,
                    model: snap.model,
                });
                (m, rep.epoch_losses)
            }
            Some(ck) => {
                let mut m = ck.model.clone();
                let rep = train(&mut m, Some(&mask), run, ck.position, None).map_err(|e| tag_iteration(e, t))?;
                (m, rep.epoch_losses)
            }
        };
        let outcome = prune_step(&trained, &mask, cfg)?;
        observe(&ImpStep {
            iteration: t,
            train_mask: &mask,
            trained: &trained,
            mask: &outcome.mask,
            prune: &outcome,
            epoch_losses: &losses,
            rewind: rewind.as_ref().unwrap(),
            reported: cfg.reports(t),
        })?;
        masks.push(outcome.mask);
    }
    let rewind = rewind.ok_or_else(|| Error::InvalidArgument("resumed run has no rewind checkpoint".into()))?;
    Ok(ImpOutcome { rewind, start, masks })
}

fn prune_step<F: Element>(trained: &Model<F>, mask: &Mask, cfg: &ImpConfig) -> Result<PruneOutcome> {
    match cfg.depth_limit {
        None => global_magnitude_prune_weights(trained.registry(), mask, cfg.rate),
        Some(limit) => {
            let sub = apply_mask(trained.clone(), mask.clone())?;
            crate::pruning::layerwise_prune(&sub, cfg.rate, limit)
        }
    }
}

/// Winning ticket: mask `m` on the rewound weights `W_k`, including
/// protected parameters and normalization statistics.
pub fn extract_ticket<F: Element>(mask: &Mask, ckpt: &RewindCheckpoint<F>) -> Result<Subnetwork<F>> {
    apply_mask(ckpt.model.clone(), mask.clone())
}

/// Mask `m` on a fresh He draw of the whole network (label head attached).
pub fn random_reinit<F: Element>(mask: &Mask, spec: &ArchSpec, seed: u64) -> Result<Subnetwork<F>> {
    let model = build_model(spec, SplitMix64::derive(seed, &[tag::REINIT]).state())?;
    apply_mask(model, mask.clone())
}

/// Random mask at `fraction` on fresh He weights.
pub fn random_mask_network<F: Element>(spec: &ArchSpec, fraction: f64, seed: u64) -> Result<Subnetwork<F>> {
    let model: Model<F> = build_model(spec, SplitMix64::derive(seed, &[tag::REINIT]).state())?;
    let mask = random_mask(model.registry(), fraction, seed)?;
    apply_mask(model, mask)
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome<F> {
    pub subnetwork: Subnetwork<F>,
    pub test: Metrics,
    pub epoch_losses: Vec<f64>,
}

/// Trains `sub` on labels from its current weights with the mask frozen and
/// reports held-out top-1. A label head of the right width is kept,
/// otherwise a fresh one is attached.
pub fn retrain<F: Element>(
    sub: &Subnetwork<F>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RetrainOutcome<F>> {
    let mut sub = sub.clone();
    let classes = train_set.class_count();
    let fits = sub.model().heads().len() == 1
        && sub.model().heads()[0].name == crate::model::LABEL_HEAD
        && sub.model().heads()[0].width == classes;
    if !fits {
        with_label_head(sub.model_mut(), classes, seed)?;
    }
    let task = TaskKind::Labels;
    let data = TaskData::new(&task, train_set.clone(), seed)?;
    let run = TrainRun {
        task: &task,
        data: &data,
        cfg,
        seed: SplitMix64::derive(seed, &[tag::RETRAIN]).state(),
    };
    let mask = sub.mask().clone();
    let rep = train(sub.model_mut(), Some(&mask), &run, Position::default(), None)?;
    let test = evaluate(sub.model(), test_set)?;
    Ok(RetrainOutcome {
        subnetwork: sub,
        test,
        epoch_losses: rep.epoch_losses,
    })
}

/// Pruning during transfer: IMP with the target-label objective, starting
/// from the pretrained backbone with a fresh label head. Returns
/// `(pruning iteration, remaining fraction, held-out metrics)` of every
/// trained network whose mask has been pruned a reported number of times
/// (0 = unpruned).
pub fn finetune_with_pruning<F: Element>(
    pretrained: &Model<F>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    imp: &ImpConfig,
    seed: u64,
) -> Result<Vec<(usize, f64, Metrics)>> {
    let mut model = pretrained.clone();
    with_label_head(&mut model, train_set.class_count(), seed)?;
    let task = TaskKind::Labels;
    let data = TaskData::new(&task, train_set.clone(), seed)?;
    let run = TrainRun {
        task: &task,
        data: &data,
        cfg,
        seed: SplitMix64::derive(seed, &[tag::FINETUNE]).state(),
    };
    let mut out = Vec::new();
    imp_run(&model, &run, imp, |step| {
        let pruned_times = step.iteration - 1;
        if pruned_times == 0 || imp.reports(pruned_times) {
            let metrics = evaluate(step.trained, test_set)?;
            out.push((pruned_times, step.train_mask.remaining_fraction(), metrics));
        }
        Ok(())
    })?;
    Ok(out)
}
