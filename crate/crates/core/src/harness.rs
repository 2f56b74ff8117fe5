//! The experiment grid.
//!
//! For every seed and task an IMP job trains and prunes the network,
//! leaving `rewind.ckpt` and `iter{t}.ckpt` (trained weights of iteration
//! `t` with the mask `m_t` they were pruned to) under `seed{s}/{task}/`.
//! Evaluation cells then read those checkpoints. Each finished unit of work
//! writes a CSV fragment into `cells/`; a fragment on disk marks the unit
//! complete, so an interrupted run resumes where it stopped. Rows are also
//! appended to `records.csv` as they arrive, and the file is rewritten in
//! grid order once every cell is done.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::checkpoint::{load_model, save_checkpoint};
use crate::config::{Evaluation, ExperimentConfig, InitScheme};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, ArchSpec, Model};
use crate::pretext::TaskKind;
use crate::pruning::{apply_mask, natural_sparsity, sparsity_corrected_random_mask, Mask};
use crate::records::{
    parse_records, read_records, summarize, to_csv, write_atomic, write_records, write_summary, ExperimentRecord, Phase, RecordLog,
};
use crate::rng::{tag, SplitMix64};
use crate::tensor::{Element, Precision};
use crate::ticket::{
    extract_ticket, finetune_with_pruning, imp_continue, random_mask_network, random_reinit, remaining_schedule, retrain,
    ImpConfig, ImpResume, RewindCheckpoint,
};
use crate::train::{TaskData, TrainRun};
use crate::transfer::{evaluate, evaluate_rotation, finetune, linear_probe, Metrics};

/// Task column of rows that do not depend on a pretext task.
pub const NO_TASK: &str = "none";
/// Init-scheme column of rows that measure the pretrained network itself.
pub const NO_SCHEME: &str = "none";
/// Init-scheme column of finetuning with the pretraining mask kept fixed.
pub const PRUNED_IN_PRETRAINING: &str = "pretrain_pruned";
/// Init-scheme column of finetuning that prunes on the transfer labels.
pub const PRUNED_IN_TRANSFER: &str = "transfer_pruned";

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads for the grid; cells are the unit of parallelism.
    pub threads: usize,
    pub verbose: bool,
}

impl RunOptions {
    /// Thread count from `TS_THREADS`, else the available parallelism.
    pub fn from_env() -> Self {
        let threads = std::env::var("TS_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        RunOptions { threads, verbose: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    /// Units of work computed by this invocation.
    pub computed: usize,
    /// Units found complete on disk.
    pub skipped: usize,
    pub records: usize,
}

/// Directory of one seed's task.
pub fn task_dir(out: &Path, seed: u64, task: &str) -> PathBuf {
    out.join(format!("seed{seed}")).join(task)
}

pub fn iteration_checkpoint(out: &Path, seed: u64, task: &str, t: usize) -> PathBuf {
    task_dir(out, seed, task).join(format!("iter{t}.ckpt"))
}

pub fn rewind_checkpoint(out: &Path, seed: u64, task: &str) -> PathBuf {
    task_dir(out, seed, task).join("rewind.ckpt")
}

/// Remaining prunable weights after `t` IMP iterations, which depends only
/// on the registry layout and the config.
pub fn expected_remaining(spec: &ArchSpec, imp: &ImpConfig, t: usize) -> Result<(usize, usize)> {
    let model: Model<f32> = build_model(spec, 0)?;
    let reg = model.registry();
    let d = reg.prunable_count();
    let pool: usize = reg
        .prunable()
        .filter(|e| imp.depth_limit.is_none_or(|l| e.layer_id <= l))
        .map(|e| e.tensor.len())
        .sum();
    Ok((d - pool + remaining_schedule(pool, imp.rate, t)[t], d))
}

#[derive(Clone, Debug, PartialEq)]
enum Cell {
    Retrain {
        seed: u64,
        task: Option<usize>,
        iteration: usize,
        scheme: InitScheme,
    },
    Probe {
        seed: u64,
        task: usize,
        pruned: usize,
    },
    Finetune {
        seed: u64,
        task: usize,
        pruned: usize,
    },
    FinetunePrune {
        seed: u64,
        task: usize,
    },
}

struct Grid<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    spec: ArchSpec,
    train: Dataset,
    test: Dataset,
    target_train: Dataset,
    target_test: Dataset,
    log: Mutex<RecordLog>,
    verbose: bool,
}

fn frac(remaining: usize, d: usize) -> f64 {
    remaining as f64 / d as f64
}

impl<'a> Grid<'a> {
    fn task_name(&self, task: Option<usize>) -> &'static str {
        task.map_or(NO_TASK, |i| self.cfg.tasks[i].name())
    }

    fn cells_dir(&self, seed: u64, task: Option<usize>) -> PathBuf {
        task_dir(&self.out, seed, self.task_name(task)).join("cells")
    }

    fn imp_fragment(&self, seed: u64, task: usize, t: usize) -> PathBuf {
        self.cells_dir(seed, Some(task)).join(format!("imp_it{t}.csv"))
    }

    fn cell_fragment(&self, cell: &Cell) -> PathBuf {
        match *cell {
            Cell::Retrain {
                seed,
                task,
                iteration,
                scheme,
            } => self.cells_dir(seed, task).join(format!("retrain_it{iteration}_{scheme}.csv")),
            Cell::Probe { seed, task, pruned } => self.cells_dir(seed, Some(task)).join(format!("probe_it{pruned}.csv")),
            Cell::Finetune { seed, task, pruned } => self.cells_dir(seed, Some(task)).join(format!("finetune_it{pruned}.csv")),
            Cell::FinetunePrune { seed, task } => self.cells_dir(seed, Some(task)).join("finetune_prune.csv"),
        }
    }

    /// Row skeleton of a cell; defaults to test top-1 with value 0.
    fn record(
        &self,
        seed: u64,
        task: &str,
        prune_iteration: usize,
        remaining_fraction: f64,
        init_scheme: &str,
        phase: Phase,
    ) -> ExperimentRecord {
        ExperimentRecord {
            experiment_id: self.cfg.id.clone(),
            seed,
            task: task.into(),
            prune_iteration,
            remaining_fraction,
            init_scheme: init_scheme.into(),
            phase,
            split: "test".into(),
            metric: "top1".into(),
            value: 0.0,
        }
    }

    /// Persists a finished unit: fragment first, then the shared log.
    fn finish(&self, fragment: &Path, rows: &[ExperimentRecord]) -> Result<()> {
        if let Some(dir) = fragment.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = to_csv(rows, true)?;
        write_atomic(fragment, &bytes)?;
        self.log.lock().expect("record log poisoned").append(rows)
    }

    fn say(&self, what: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("[{}] {}", self.cfg.id, what());
        }
    }

    fn cells(&self) -> Vec<Cell> {
        let cfg = self.cfg;
        let imp = &cfg.imp;
        let evals = &cfg.evaluations;
        let trained_at = |p: usize| p < imp.max_iterations;
        let pruned: Vec<usize> = std::iter::once(0).chain(imp.report_iterations.iter().copied()).filter(|&p| trained_at(p)).collect();
        let mut out = Vec::new();
        for &seed in &cfg.seeds {
            if evals.contains(&Evaluation::Retrain) {
                for task in 0..cfg.tasks.len() {
                    for &iteration in &imp.report_iterations {
                        for &scheme in cfg.init_schemes.iter().filter(|&&s| s != InitScheme::RandomMask) {
                            out.push(Cell::Retrain {
                                seed,
                                task: Some(task),
                                iteration,
                                scheme,
                            });
                        }
                    }
                }
                if cfg.init_schemes.contains(&InitScheme::RandomMask) {
                    for &iteration in &imp.report_iterations {
                        out.push(Cell::Retrain {
                            seed,
                            task: None,
                            iteration,
                            scheme: InitScheme::RandomMask,
                        });
                    }
                }
            }
            for task in 0..cfg.tasks.len() {
                if evals.contains(&Evaluation::Probe) {
                    out.extend(pruned.iter().map(|&p| Cell::Probe { seed, task, pruned: p }));
                }
                if evals.contains(&Evaluation::Finetune) {
                    out.extend(pruned.iter().map(|&p| Cell::Finetune { seed, task, pruned: p }));
                }
                if evals.contains(&Evaluation::FinetunePrune) {
                    out.push(Cell::FinetunePrune { seed, task });
                }
            }
        }
        out
    }

    /// Every fragment path in grid order.
    fn fragments(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            for task in 0..self.cfg.tasks.len() {
                out.extend((1..=self.cfg.imp.max_iterations).map(|t| self.imp_fragment(seed, task, t)));
            }
        }
        let cells = self.cells();
        for &seed in &self.cfg.seeds {
            out.extend(
                cells
                    .iter()
                    .filter(|c| cell_seed(c) == seed)
                    .map(|c| self.cell_fragment(c)),
            );
        }
        out
    }
}

fn cell_seed(c: &Cell) -> u64 {
    match *c {
        Cell::Retrain { seed, .. } | Cell::Probe { seed, .. } | Cell::Finetune { seed, .. } | Cell::FinetunePrune { seed, .. } => seed,
    }
}

/// Runs (or resumes) the whole grid of `cfg`, writing into `cfg.output_dir()`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, opts),
        Precision::F64 => run_typed::<f64>(cfg, opts),
    }
}

fn run_typed<F: Element>(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (train, test) = cfg.data.load(&cfg.base_dir)?;
    let (target_train, target_test) = match &cfg.transfer {
        Some(t) => t.load(&cfg.base_dir)?,
        None => (train.clone(), test.clone()),
    };
    let spec = cfg.arch.resolve(&train, train.class_count())?;
    if target_train.image_shape() != spec.input {
        return Err(Error::Config {
            key: "transfer".into(),
            detail: format!("image shape {:?} differs from {:?}", target_train.image_shape(), spec.input),
        });
    }
    let mut cfg_json = serde_json::to_vec_pretty(cfg)?;
    cfg_json.push(b'\n');
    write_atomic(&out.join("config.json"), &cfg_json)?;
    let records_path = out.join("records.csv");
    let grid = Grid {
        cfg,
        out: out.clone(),
        spec,
        train,
        test,
        target_train,
        target_test,
        log: Mutex::new(RecordLog::open(&records_path)?),
        verbose: opts.verbose,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.tasks.len()).map(move |t| (s, t)))
        .collect();
    let imp_counts: Vec<Result<(usize, usize)>> = pool.install(|| jobs.par_iter().map(|&(s, t)| imp_job::<F>(&grid, s, t)).collect());
    let mut summary = RunSummary::default();
    for r in imp_counts {
        let (done, skipped) = r?;
        summary.computed += done;
        summary.skipped += skipped;
    }

    let cells = grid.cells();
    let results: Vec<Result<bool>> = pool.install(|| cells.par_iter().map(|c| eval_cell::<F>(&grid, c)).collect());
    for r in results {
        if r? {
            summary.computed += 1;
        } else {
            summary.skipped += 1;
        }
    }

    let mut all = Vec::new();
    for f in grid.fragments() {
        if f.exists() {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            all.extend(parse_records(&bytes)?);
        }
    }
    drop(grid);
    write_records(&records_path, &all)?;
    write_summary(&out.join("summary.json"), &summarize(&all))?;
    summary.records = all.len();
    Ok(summary)
}

/// Runs the remaining IMP iterations of one (seed, task); returns
/// `(iterations computed, iterations skipped)`.
fn imp_job<F: Element>(g: &Grid, seed: u64, task_idx: usize) -> Result<(usize, usize)> {
    let cfg = g.cfg;
    let task = &cfg.tasks[task_idx];
    let name = task.name();
    let max = cfg.imp.max_iterations;
    let done = (1..=max).take_while(|&t| g.imp_fragment(seed, task_idx, t).exists()).count();
    if done == max {
        return Ok((0, done));
    }
    if done > 0 && !iteration_checkpoint(&g.out, seed, name, done).exists() {
        // the last finished iteration diverged
        return Ok((0, done));
    }
    let dir = task_dir(&g.out, seed, name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let model: Model<F> = Model::with_heads(&g.spec, seed, &task.heads(g.spec.classes))?;
    let data = TaskData::new(task, g.train.clone(), seed)?;
    let run = TrainRun {
        task,
        data: &data,
        cfg: &cfg.train,
        seed,
    };
    let resume = if done > 0 {
        let rewind = RewindCheckpoint::<F>::load(&rewind_checkpoint(&g.out, seed, name))?;
        let (_, mask, _) = load_model::<F>(&iteration_checkpoint(&g.out, seed, name, done))?;
        let mask = mask.ok_or_else(|| Error::InvalidArgument(format!("iteration {done} checkpoint has no mask")))?;
        Some(ImpResume { rewind, done, mask })
    } else {
        None
    };
    let mut computed = 0;
    let started = Instant::now();
    let res = imp_continue(&model, &run, &cfg.imp, resume, |step| {
        let t = step.iteration;
        if t == 1 {
            step.rewind.save(&rewind_checkpoint(&g.out, seed, name))?;
        }
        let extra = json!({ "iteration": t, "trained_under_remaining": step.train_mask.remaining() });
        save_checkpoint(&iteration_checkpoint(&g.out, seed, name, t), step.trained, Some(step.mask), Some(extra))?;
        let rows = pretext_rows(g, seed, task, step.iteration, step.train_mask, step.trained, step.epoch_losses)?;
        g.finish(&g.imp_fragment(seed, task_idx, t), &rows)?;
        computed += 1;
        g.say(|| format!("seed {seed} {name}: IMP iteration {t}/{max} ({:.0}s)", started.elapsed().as_secs_f64()));
        Ok(())
    });
    match res {
        Ok(_) => Ok((computed, done)),
        Err(Error::Divergence { iteration, step }) => {
            let (remaining, d) = expected_remaining(&g.spec, &cfg.imp, iteration - 1)?;
            let base = g.record(seed, name, iteration - 1, frac(remaining, d), NO_SCHEME, Phase::Pretext);
            let row = measured(&base, "train", "diverged", step as f64);
            g.finish(&g.imp_fragment(seed, task_idx, iteration), &[row])?;
            g.say(|| format!("seed {seed} {name}: diverged at IMP iteration {iteration}, step {step}"));
            Ok((computed + 1, done))
        }
        Err(e) => Err(e),
    }
}

fn measured(base: &ExperimentRecord, split: &str, metric: &str, value: f64) -> ExperimentRecord {
    ExperimentRecord {
        split: split.into(),
        metric: metric.into(),
        value,
        ..base.clone()
    }
}

fn pretext_rows<F: Element>(
    g: &Grid,
    seed: u64,
    task: &TaskKind,
    t: usize,
    train_mask: &Mask,
    trained: &Model<F>,
    losses: &[f64],
) -> Result<Vec<ExperimentRecord>> {
    let name = task.name();
    let fr = train_mask.remaining_fraction();
    let row = |split: &str, metric: &str, v: f64| measured(&g.record(seed, name, t - 1, fr, NO_SCHEME, Phase::Pretext), split, metric, v);
    let mut rows = Vec::new();
    if let Some(&l) = losses.last() {
        rows.push(row("train", "loss", l));
    }
    if task.uses_labels() {
        rows.push(row("test", "top1", evaluate(trained, &g.test)?.top1));
    }
    if matches!(task, TaskKind::Rotnet | TaskKind::S4l { .. }) {
        rows.push(row("test", "rotation_top1", evaluate_rotation(trained, &g.test)?.top1));
    }
    if t == 1 {
        let report = natural_sparsity(trained.registry(), g.cfg.sparsity_epsilon);
        rows.push(row("train", "zero_fraction", report.global_fraction));
    }
    Ok(rows)
}

fn load_mask<F: Element>(g: &Grid, seed: u64, task: &str, t: usize) -> Result<Option<Mask>> {
    let path = iteration_checkpoint(&g.out, seed, task, t);
    if !path.exists() {
        return Ok(None);
    }
    Ok(load_model::<F>(&path)?.1)
}

/// Trained weights of the network pruned `p` times, with `m_p`.
fn pretrained_at<F: Element>(g: &Grid, seed: u64, task: &str, p: usize) -> Result<Option<(Model<F>, Mask)>> {
    let path = iteration_checkpoint(&g.out, seed, task, p + 1);
    if !path.exists() {
        return Ok(None);
    }
    let (model, _, _) = load_model::<F>(&path)?;
    let mask = if p == 0 {
        Mask::full(model.registry())
    } else {
        match load_mask::<F>(g, seed, task, p)? {
            Some(m) => m,
            None => return Ok(None),
        }
    };
    Ok(Some((model, mask)))
}

fn diverged(e: &Error) -> Option<usize> {
    match e {
        Error::Divergence { step, .. } => Some(*step),
        _ => None,
    }
}

fn metric_rows(base: &ExperimentRecord, m: &Metrics) -> Vec<ExperimentRecord> {
    vec![ExperimentRecord {
        split: "test".into(),
        metric: "top1".into(),
        value: m.top1,
        ..base.clone()
    }]
}

/// Returns whether the cell was computed (false: complete on disk, or its
/// inputs are missing because IMP diverged).
fn eval_cell<F: Element>(g: &Grid, cell: &Cell) -> Result<bool> {
    let fragment = g.cell_fragment(cell);
    if fragment.exists() {
        return Ok(false);
    }
    let cfg = g.cfg;
    let started = Instant::now();
    let rows = match *cell {
        Cell::Retrain {
            seed,
            task,
            iteration,
            scheme,
        } => {
            let name = g.task_name(task);
            let (sub, fraction) = match scheme {
                InitScheme::RandomMask => {
                    let (r, d) = expected_remaining(&g.spec, &cfg.imp, iteration)?;
                    let f = frac(r, d);
                    (random_mask_network::<F>(&g.spec, f, seed)?, f)
                }
                _ => {
                    let Some(mask) = load_mask::<F>(g, seed, name, iteration)? else {
                        return Ok(false);
                    };
                    let f = mask.remaining_fraction();
                    let sub = match scheme {
                        InitScheme::WinningTicket => {
                            let rewind = RewindCheckpoint::<F>::load(&rewind_checkpoint(&g.out, seed, name))?;
                            extract_ticket(&mask, &rewind)?
                        }
                        InitScheme::RandomReinit => random_reinit::<F>(&mask, &g.spec, seed)?,
                        InitScheme::SparsityCorrectedRandom => {
                            let (dense, _, _) = load_model::<F>(&iteration_checkpoint(&g.out, seed, name, 1))?;
                            let m = sparsity_corrected_random_mask(dense.registry(), f, cfg.sparsity_epsilon, seed)?;
                            let fresh: Model<F> = build_model(&g.spec, SplitMix64::derive(seed, &[tag::REINIT]).state())?;
                            apply_mask(fresh, m)?
                        }
                        InitScheme::RandomMask => unreachable!(),
                    };
                    (sub, f)
                }
            };
            let base = g.record(seed, name, iteration, fraction, scheme.as_str(), Phase::Retrain);
            match retrain(&sub, &g.train, &g.test, cfg.retrain_config(), seed) {
                Ok(out) => metric_rows(&base, &out.test),
                Err(e) => match diverged(&e) {
                    Some(step) => vec![ExperimentRecord {
                        split: "train".into(),
                        metric: "diverged".into(),
                        value: step as f64,
                        ..base
                    }],
                    None => return Err(e),
                },
            }
        }
        Cell::Probe { seed, task, pruned } => {
            let name = g.task_name(Some(task));
            let Some((model, mask)) = pretrained_at::<F>(g, seed, name, pruned)? else {
                return Ok(false);
            };
            let base = g.record(seed, name, pruned, mask.remaining_fraction(), NO_SCHEME, Phase::Probe);
            match linear_probe(&model, &g.target_train, &g.target_test, &cfg.probe_config(), seed) {
                Ok(p) => vec![
                    ExperimentRecord {
                        value: p.test.top1,
                        ..base.clone()
                    },
                    ExperimentRecord {
                        split: "train".into(),
                        value: p.train.top1,
                        ..base
                    },
                ],
                Err(e) => match diverged(&e) {
                    Some(step) => vec![ExperimentRecord {
                        split: "train".into(),
                        metric: "diverged".into(),
                        value: step as f64,
                        ..base
                    }],
                    None => return Err(e),
                },
            }
        }
        Cell::Finetune { seed, task, pruned } => {
            let name = g.task_name(Some(task));
            let Some((model, mask)) = pretrained_at::<F>(g, seed, name, pruned)? else {
                return Ok(false);
            };
            let base = g.record(seed, name, pruned, mask.remaining_fraction(), PRUNED_IN_PRETRAINING, Phase::Finetune);
            let sub = apply_mask(model, mask)?;
            match finetune(&sub, &g.target_train, &g.target_test, cfg.finetune_config(), seed) {
                Ok((_, m)) => metric_rows(&base, &m),
                Err(e) => match diverged(&e) {
                    Some(step) => vec![ExperimentRecord {
                        split: "train".into(),
                        metric: "diverged".into(),
                        value: step as f64,
                        ..base
                    }],
                    None => return Err(e),
                },
            }
        }
        Cell::FinetunePrune { seed, task } => {
            let name = g.task_name(Some(task));
            let path = iteration_checkpoint(&g.out, seed, name, 1);
            if !path.exists() {
                return Ok(false);
            }
            let (dense, _, _) = load_model::<F>(&path)?;
            match finetune_with_pruning(&dense, &g.target_train, &g.target_test, cfg.finetune_config(), &cfg.imp, seed) {
                Ok(points) => points
                    .iter()
                    .map(|(p, f, m)| measured(&g.record(seed, name, *p, *f, PRUNED_IN_TRANSFER, Phase::Finetune), "test", "top1", m.top1))
                    .collect(),
                Err(e) => match diverged(&e) {
                    Some(step) => vec![measured(&g.record(seed, name, 0, 1.0, PRUNED_IN_TRANSFER, Phase::Finetune), "train", "diverged", step as f64)],
                    None => return Err(e),
                },
            }
        }
    };
    g.finish(&fragment, &rows)?;
    g.say(|| format!("{} ({:.1}s)", fragment.display(), started.elapsed().as_secs_f64()));
    Ok(true)
}

/// Reads a finished run's records.
pub fn load_run_records(out: &Path) -> Result<Vec<ExperimentRecord>> {
    read_records(&out.join("records.csv"))
}
