//! Experiment configuration, read from TOML.
//!
//! Relative paths inside a config file resolve against the directory that
//! holds the file.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_cifar_binary, load_idx, Dataset, GlyphSet, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::pretext::TaskKind;
use crate::pruning::DEFAULT_EPSILON;
use crate::rng::{tag, SplitMix64};
use crate::tensor::{Precision, Tensor};
use crate::ticket::ImpConfig;
use crate::train::TrainConfig;
use crate::transfer::ProbeConfig;

/// How the weights of a retrained subnetwork are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Pruned mask on the rewound weights `W_k`.
    WinningTicket,
    /// Pruned mask on fresh weights.
    RandomReinit,
    /// Uniformly random mask of the same density on fresh weights.
    RandomMask,
    /// Random mask that drops naturally-zero weights first, on fresh weights.
    SparsityCorrectedRandom,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        InitScheme::WinningTicket,
        InitScheme::RandomReinit,
        InitScheme::RandomMask,
        InitScheme::SparsityCorrectedRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::WinningTicket => "winning_ticket",
            InitScheme::RandomReinit => "random_reinit",
            InitScheme::RandomMask => "random_mask",
            InitScheme::SparsityCorrectedRandom => "sparsity_corrected_random",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// Retrain each reported mask on labels under every init scheme.
    Retrain,
    /// Linear probe on frozen features of the pretrained pruned network.
    Probe,
    /// Finetune the pretrained pruned network on the transfer set.
    Finetune,
    /// Prune during transfer: IMP on the transfer labels from the dense
    /// pretrained network.
    FinetunePrune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        glyphs: GlyphSet,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

fn default_size() -> usize {
    16
}
fn default_noise() -> f64 {
    0.05
}

impl DataSpec {
    /// Loads `(train, test)`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Synthetic {
                train,
                test,
                classes,
                size,
                glyphs,
                noise,
                seed,
            } => {
                let spec = |n| SynthSpec {
                    n,
                    class_count: *classes,
                    size: *size,
                    glyphs: *glyphs,
                    noise: *noise,
                };
                let tr = generate_synthetic(&spec(*train), *seed, Split::Train)?;
                let te = generate_synthetic(&spec(*test), SplitMix64::derive(*seed, &[tag::TEST]).state(), Split::Test)?;
                Ok((tr, te))
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let tr = load_idx(&base.join(train_images), &base.join(train_labels), *classes)?;
                let te = load_idx(&base.join(test_images), &base.join(test_labels), *classes)?;
                Ok((tr.with_split(Split::Train), te.with_split(Split::Test)))
            }
            DataSpec::Cifar { train, test } => {
                if train.is_empty() {
                    return Err(Error::Config {
                        key: "data.train".into(),
                        detail: "needs at least one batch file".into(),
                    });
                }
                let parts = train
                    .iter()
                    .map(|p| load_cifar_binary(&base.join(p)))
                    .collect::<Result<Vec<_>>>()?;
                let te = load_cifar_binary(&base.join(test))?;
                Ok((concat(&parts)?.with_split(Split::Train), te.with_split(Split::Test)))
            }
        }
    }
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let [c, h, w] = parts[0].image_shape();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_shape() != [c, h, w] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", p.image_shape(), [c, h, w])));
        }
        data.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels()?);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, parts[0].class_count(), Split::Train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// `mini_conv` or `mini_vgg`.
    pub name: String,
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

impl ArchConfig {
    /// The preset sized for `train`'s images and `classes` labels.
    pub fn resolve(&self, train: &Dataset, classes: usize) -> Result<ArchSpec> {
        let mut spec = ArchSpec::preset(&self.name, classes)?;
        spec.input = train.image_shape();
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Magnitude below which a trained weight counts as naturally zero.
    #[serde(default = "default_epsilon")]
    pub sparsity_epsilon: f64,
    #[serde(default = "default_schemes")]
    pub init_schemes: Vec<InitScheme>,
    #[serde(default = "default_evaluations")]
    pub evaluations: Vec<Evaluation>,
    pub data: DataSpec,
    /// Target of probes and finetuning; the main dataset if unset.
    #[serde(default)]
    pub transfer: Option<DataSpec>,
    pub arch: ArchConfig,
    pub tasks: Vec<TaskKind>,
    pub train: TrainConfig,
    #[serde(default)]
    pub imp: ImpConfig,
    /// Retraining schedule; `train` if unset.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    /// Finetuning schedule; `train` if unset.
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_schemes() -> Vec<InitScheme> {
    vec![InitScheme::WinningTicket, InitScheme::RandomReinit, InitScheme::RandomMask]
}
fn default_evaluations() -> Vec<Evaluation> {
    vec![Evaluation::Retrain]
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { key, detail } if !key.starts_with(prefix) => Error::Config {
            key: format!("{prefix}.{key}"),
            detail,
        },
        e => e,
    }
}

impl ExperimentConfig {
    /// Parses and validates a config; errors name the offending key.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            key: "<document>".into(),
            detail: e.to_string(),
        })?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                key: if path == "." { "<root>".into() } else { path },
                detail: e.into_inner().message().to_string(),
            }
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad("id", "must be non-empty and use only [A-Za-z0-9._-]");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed");
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds", "contains duplicates");
        }
        if self.tasks.is_empty() {
            return bad("tasks", "must list at least one task");
        }
        if self.tasks.iter().map(TaskKind::name).collect::<HashSet<_>>().len() != self.tasks.len() {
            return bad("tasks", "each task kind may appear once per experiment");
        }
        if self.evaluations.contains(&Evaluation::Retrain) && self.init_schemes.is_empty() {
            return bad("init_schemes", "retrain evaluation needs at least one scheme");
        }
        if self.sparsity_epsilon.is_nan() || self.sparsity_epsilon <= 0.0 {
            return bad("sparsity_epsilon", "must be positive");
        }
        for t in &self.tasks {
            if let TaskKind::S4l { label_fraction, .. } = t {
                if !(*label_fraction > 0.0 && *label_fraction <= 1.0) {
                    return bad("tasks.label_fraction", "must be in (0,1]");
                }
            }
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if let Some(r) = &self.retrain {
            r.validate().map_err(|e| prefixed("retrain", e))?;
        }
        if let Some(f) = &self.finetune {
            f.validate().map_err(|e| prefixed("finetune", e))?;
        }
        if let Some(p) = &self.probe {
            p.schedule.validate().map_err(|e| prefixed("probe.schedule", e))?;
            if p.batch_size == 0 {
                return bad("probe.batch_size", "must be at least 1");
            }
        }
        self.imp.validate()?;
        if !matches!(self.arch.name.as_str(), "mini_conv" | "mini_vgg") {
            return bad("arch.name", "unknown architecture (expected mini_conv or mini_vgg)");
        }
        Ok(())
    }

    pub fn retrain_config(&self) -> &TrainConfig {
        self.retrain.as_ref().unwrap_or(&self.train)
    }

    pub fn finetune_config(&self) -> &TrainConfig {
        self.finetune.as_ref().unwrap_or(&self.train)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        self.probe.clone().unwrap_or_default()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
id = "t"
[data]
kind = "synthetic"
train = 32
test = 16
classes = 4
[arch]
name = "mini_conv"
[[tasks]]
kind = "rotnet"
[train]
epochs = 1
batch_size = 8
[train.schedule]
base_lr = 0.05
"#;

    fn key_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text, Path::new(".")) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/x")).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.imp, ImpConfig::default());
        assert_eq!(cfg.evaluations, vec![Evaluation::Retrain]);
        assert_eq!(cfg.tasks, vec![TaskKind::Rotnet]);
        assert_eq!(cfg.output_dir(), PathBuf::from("/x/runs"));
        assert_eq!(cfg.sparsity_epsilon, f32::MIN_POSITIVE as f64);
    }

    #[test]
    fn diagnostics_name_the_key() {
        assert_eq!(key_of(&MINIMAL.replace("base_lr = 0.05", "base_lr = \"fast\"")), "train.schedule.base_lr");
        assert_eq!(key_of(&MINIMAL.replace("batch_size = 8", "batch_size = 1")), "train.batch_size");
        assert_eq!(key_of(&MINIMAL.replace("id = \"t\"", "id = \"t\"\nseeds = []")), "seeds");
        assert_eq!(key_of(&format!("{MINIMAL}\n[imp]\nrate = 1.5\n")), "imp.rate");
        assert_eq!(key_of(&MINIMAL.replace("name = \"mini_conv\"", "name = \"resnet\"")), "arch.name");
        assert!(key_of(&MINIMAL.replace("classes = 4", "classes = 4\ncolour = 1")).starts_with("data"));
        assert_eq!(key_of("id = "), "<document>");
    }

    #[test]
    fn synthetic_data_and_arch_resolve() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        let (tr, te) = cfg.data.load(&cfg.base_dir).unwrap();
        assert_eq!((tr.len(), te.len()), (32, 16));
        assert_ne!(tr.images().data()[..48], te.images().data()[..48]);
        let spec = cfg.arch.resolve(&tr, 4).unwrap();
        assert_eq!(spec, ArchSpec::mini_conv(4));
    }
}
