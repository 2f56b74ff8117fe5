use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use prunelab::checkpoint::{load_model, save_checkpoint};
use prunelab::config::{Evaluation, ExperimentConfig, InitScheme};
use prunelab::data::{generate_synthetic, write_cifar_binary, write_idx, Dataset, GlyphSet, Split, SynthSpec};
use prunelab::harness::{run_experiment, RunOptions};
use prunelab::model::{build_model, Model};
use prunelab::pruning::{apply_mask, natural_sparsity, sparsity_corrected_random_mask, Mask, DEFAULT_EPSILON};
use prunelab::records::{read_records, summarize, write_summary};
use prunelab::rng::{tag, SplitMix64};
use prunelab::ticket::{extract_ticket, finetune_with_pruning, random_mask_network, random_reinit, retrain, RewindCheckpoint};
use prunelab::train::{train, Position, TaskData, TrainRun};
use prunelab::transfer::{evaluate, finetune, linear_probe};
use prunelab::{Element, Error, Precision, Result};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Iterative magnitude pruning laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Idx,
    Cifar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Glyphs {
    Primary,
    Transfer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    RandomReinit,
    RandomMask,
    SparsityCorrectedRandom,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic glyph dataset to IDX or CIFAR binary files.
    SynthData {
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, value_enum, default_value = "primary")]
        glyphs: Glyphs,
        #[arg(long, value_enum, default_value = "idx")]
        format: Format,
    },
    /// Train a dense network on the config's first task and save it.
    Train {
        /// Task name from the config; the first task if omitted.
        #[arg(long)]
        task: Option<String>,
    },
    /// Run only the IMP part of the grid (no evaluations).
    Imp,
    /// Combine a pruned mask with rewound weights into a winning ticket.
    Ticket {
        /// Checkpoint holding the mask (e.g. `iter5.ckpt`).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        rewind: PathBuf,
    },
    /// Retrain a masked checkpoint on labels and report held-out accuracy.
    Retrain {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Linear probe on frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finetune a checkpoint on the transfer set.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prune during transfer instead of keeping the checkpoint's mask.
        #[arg(long)]
        prune: bool,
    },
    /// Natural-sparsity report of a checkpoint, as JSON.
    Sparsity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Build a baseline subnetwork at the density of a mask checkpoint.
    Baseline {
        #[arg(long, value_enum)]
        kind: Baseline,
        /// Checkpoint whose mask sets the density (and, for random reinit,
        /// the mask itself).
        #[arg(long)]
        mask: PathBuf,
        /// Dense trained checkpoint for the sparsity-corrected baseline.
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Recompute `summary.json` from a run's `records.csv` and print it.
    Report,
    /// Run (or resume) the whole experiment grid.
    Run {
        /// Progress lines on stderr.
        #[arg(long, short)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let precision = match g.precision {
        Some(PrecisionArg::F64) => Precision::F64,
        Some(PrecisionArg::F32) => Precision::F32,
        None => match &g.config {
            Some(_) => load_config(g)?.precision,
            None => Precision::F32,
        },
    };
    match precision {
        Precision::F32 => dispatch_typed::<f32>(cli),
        Precision::F64 => dispatch_typed::<f64>(cli),
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config {
        key: "--config".into(),
        detail: "this command needs an experiment config".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &g.out {
        cfg.output = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    if let Some(p) = g.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    Ok(cfg)
}

fn out_dir(g: &Global) -> Result<PathBuf> {
    match (&g.out, &g.config) {
        (Some(o), _) => Ok(o.clone()),
        (None, Some(_)) => Ok(load_config(g)?.output_dir()),
        (None, None) => Ok(PathBuf::from(".")),
    }
}

fn seed(g: &Global, cfg: Option<&ExperimentConfig>) -> u64 {
    g.seed.or_else(|| cfg.map(|c| c.seeds[0])).unwrap_or(0)
}

fn print(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_masked<F: Element>(path: &Path) -> Result<(Model<F>, Mask)> {
    let (model, mask, _) = load_model::<F>(path)?;
    let mask = mask.unwrap_or_else(|| Mask::full(model.registry()));
    Ok((model, mask))
}

fn source_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    cfg.data.load(&cfg.base_dir)
}

fn target_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.transfer {
        Some(t) => t.load(&cfg.base_dir),
        None => source_data(cfg),
    }
}

fn dispatch_typed<F: Element>(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::SynthData {
            train,
            test,
            classes,
            size,
            noise,
            glyphs,
            format,
        } => {
            let out = out_dir(g)?;
            create_dir(&out)?;
            let s = seed(g, None);
            let spec = |n| SynthSpec {
                n,
                class_count: *classes,
                size: *size,
                glyphs: match glyphs {
                    Glyphs::Primary => GlyphSet::Primary,
                    Glyphs::Transfer => GlyphSet::Transfer,
                },
                noise: *noise,
            };
            let tr = generate_synthetic(&spec(*train), s, Split::Train)?;
            let te = generate_synthetic(&spec(*test), SplitMix64::derive(s, &[tag::TEST]).state(), Split::Test)?;
            let mut files = Vec::new();
            for (name, ds) in [("train", &tr), ("test", &te)] {
                match format {
                    Format::Idx => {
                        let (i, l) = (out.join(format!("{name}-images.idx")), out.join(format!("{name}-labels.idx")));
                        write_idx(ds, &i, &l)?;
                        files.extend([i, l]);
                    }
                    Format::Cifar => {
                        let p = out.join(format!("{name}.bin"));
                        write_cifar_binary(ds, &p)?;
                        files.push(p);
                    }
                }
            }
            print(&json!({ "files": files }))
        }
        Command::Train { task } => {
            let cfg = load_config(g)?;
            let task = match task {
                None => &cfg.tasks[0],
                Some(name) => cfg.tasks.iter().find(|t| t.name() == name).ok_or_else(|| Error::Config {
                    key: "--task".into(),
                    detail: format!("`{name}` is not among the config's tasks"),
                })?,
            };
            let s = seed(g, Some(&cfg));
            let (tr, te) = source_data(&cfg)?;
            let spec = cfg.arch.resolve(&tr, tr.class_count())?;
            let mut model: Model<F> = Model::with_heads(&spec, s, &task.heads(spec.classes))?;
            let data = TaskData::new(task, tr, s)?;
            let run = TrainRun {
                task,
                data: &data,
                cfg: &cfg.train,
                seed: s,
            };
            let rep = train(&mut model, None, &run, Position::default(), None)?;
            let out = cfg.output_dir();
            create_dir(&out)?;
            let path = out.join(format!("trained_{}_seed{s}.ckpt", task.name()));
            save_checkpoint(&path, &model, None, None)?;
            let top1 = if task.uses_labels() { Some(evaluate(&model, &te)?.top1) } else { None };
            print(&json!({ "checkpoint": path, "epoch_losses": rep.epoch_losses, "test_top1": top1 }))
        }
        Command::Imp => {
            let mut cfg = load_config(g)?;
            cfg.evaluations.clear();
            let opts = RunOptions {
                verbose: true,
                ..RunOptions::from_env()
            };
            let s = run_experiment(&cfg, &opts)?;
            print(&json!({ "output": cfg.output_dir(), "computed": s.computed, "skipped": s.skipped, "records": s.records }))
        }
        Command::Ticket { mask, rewind } => {
            let (_, m) = load_masked::<F>(mask)?;
            let ck = RewindCheckpoint::<F>::load(rewind)?;
            let sub = extract_ticket(&m, &ck)?;
            let out = out_dir(g)?;
            create_dir(&out)?;
            let path = out.join("ticket.ckpt");
            save_checkpoint(&path, sub.model(), Some(sub.mask()), None)?;
            print(&json!({ "checkpoint": path, "remaining_fraction": m.remaining_fraction() }))
        }
        Command::Retrain { ckpt } => {
            let cfg = load_config(g)?;
            let (model, mask) = load_masked::<F>(ckpt)?;
            let (tr, te) = source_data(&cfg)?;
            let out = retrain(&apply_mask(model, mask)?, &tr, &te, cfg.retrain_config(), seed(g, Some(&cfg)))?;
            print(&json!({ "test_top1": out.test.top1, "per_class": out.test.per_class, "epoch_losses": out.epoch_losses }))
        }
        Command::Probe { ckpt } => {
            let cfg = load_config(g)?;
            let (model, _) = load_masked::<F>(ckpt)?;
            let (tr, te) = target_data(&cfg)?;
            let p = linear_probe(&model, &tr, &te, &cfg.probe_config(), seed(g, Some(&cfg)))?;
            print(&json!({ "test_top1": p.test.top1, "train_top1": p.train.top1 }))
        }
        Command::Finetune { ckpt, prune } => {
            let cfg = load_config(g)?;
            let (model, mask) = load_masked::<F>(ckpt)?;
            let (tr, te) = target_data(&cfg)?;
            let s = seed(g, Some(&cfg));
            if *prune {
                let points = finetune_with_pruning(&model, &tr, &te, cfg.finetune_config(), &cfg.imp, s)?;
                let rows: Vec<Value> = points
                    .iter()
                    .map(|(p, f, m)| json!({ "prune_iteration": p, "remaining_fraction": f, "test_top1": m.top1 }))
                    .collect();
                print(&Value::Array(rows))
            } else {
                let fraction = mask.remaining_fraction();
                let (_, m) = finetune(&apply_mask(model, mask)?, &tr, &te, cfg.finetune_config(), s)?;
                print(&json!({ "remaining_fraction": fraction, "test_top1": m.top1 }))
            }
        }
        Command::Sparsity { ckpt, epsilon } => {
            let (model, _) = load_masked::<F>(ckpt)?;
            let report = natural_sparsity(model.registry(), epsilon.unwrap_or(DEFAULT_EPSILON));
            let text = serde_json::to_string_pretty(&report)?;
            match &g.out {
                Some(path) => fs::write(path, text + "\n").map_err(|e| Error::io(path, e)),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Command::Baseline {
            kind,
            mask,
            dense,
            epsilon,
        } => {
            let (model, m) = load_masked::<F>(mask)?;
            let spec = {
                let mut s = model.spec().clone();
                if g.config.is_some() {
                    let cfg = load_config(g)?;
                    let (tr, _) = source_data(&cfg)?;
                    s = cfg.arch.resolve(&tr, tr.class_count())?;
                }
                s
            };
            let s = seed(g, None);
            let fraction = m.remaining_fraction();
            let (sub, scheme) = match kind {
                Baseline::RandomReinit => (random_reinit::<F>(&m, &spec, s)?, InitScheme::RandomReinit),
                Baseline::RandomMask => (random_mask_network::<F>(&spec, fraction, s)?, InitScheme::RandomMask),
                Baseline::SparsityCorrectedRandom => {
                    let dense_path = dense.as_ref().ok_or_else(|| Error::Config {
                        key: "--dense".into(),
                        detail: "the sparsity-corrected baseline needs the trained dense checkpoint".into(),
                    })?;
                    let (trained, _) = load_masked::<F>(dense_path)?;
                    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
                    let corrected = sparsity_corrected_random_mask(trained.registry(), fraction, eps, s)?;
                    let fresh: Model<F> = build_model(&spec, SplitMix64::derive(s, &[tag::REINIT]).state())?;
                    (apply_mask(fresh, corrected)?, InitScheme::SparsityCorrectedRandom)
                }
            };
            let out = out_dir(g)?;
            create_dir(&out)?;
            let path = out.join(format!("{scheme}.ckpt"));
            save_checkpoint(&path, sub.model(), Some(sub.mask()), None)?;
            print(&json!({ "checkpoint": path, "init_scheme": scheme, "remaining_fraction": sub.mask().remaining_fraction() }))
        }
        Command::Report => {
            let out = out_dir(g)?;
            let rows = read_records(&out.join("records.csv"))?;
            let cells = summarize(&rows);
            write_summary(&out.join("summary.json"), &cells)?;
            for c in &cells {
                println!(
                    "{:<10} {:<26} {:<8} it={:<3} rem={:<8.5} {:<5} {:<14} {:.4} ± {:.4} (n={})",
                    c.task,
                    c.init_scheme,
                    format!("{:?}", c.phase).to_lowercase(),
                    c.prune_iteration,
                    c.remaining_fraction,
                    c.split,
                    c.metric,
                    c.mean,
                    c.stderr,
                    c.n
                );
            }
            Ok(())
        }
        Command::Run { verbose } => {
            let cfg = load_config(g)?;
            let opts = RunOptions {
                verbose: *verbose,
                ..RunOptions::from_env()
            };
            let s = run_experiment(&cfg, &opts)?;
            let evals: Vec<Evaluation> = cfg.evaluations.clone();
            print(&json!({
                "output": cfg.output_dir(),
                "evaluations": evals,
                "computed": s.computed,
                "skipped": s.skipped,
                "records": s.records,
            }))
        }
    }
}
