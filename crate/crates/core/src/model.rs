//! Desk-scale convnets and the parameter registry that drives pruning.
//!
//! Both architectures are stacks of `conv3x3 → batch-norm → relu` layers
//! grouped into three blocks, each block closed by a 2×2 max-pool. The
//! flattened output of the last block is the feature vector; one or more
//! dense heads sit on top of it.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, NodeId, NormMode};
use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    MiniConv,
    MiniVgg,
}

impl ArchName {
    fn convs_per_block(self) -> usize {
        match self {
            ArchName::MiniConv => 1,
            ArchName::MiniVgg => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: ArchName,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    /// Output channels of every conv layer, in order.
    pub widths: Vec<usize>,
    /// Width of the label head.
    pub classes: usize,
}

impl ArchSpec {
    pub fn mini_conv(classes: usize) -> Self {
        ArchSpec {
            name: ArchName::MiniConv,
            input: [3, 16, 16],
            widths: vec![8, 16, 32],
            classes,
        }
    }

    pub fn mini_vgg(classes: usize) -> Self {
        ArchSpec {
            name: ArchName::MiniVgg,
            input: [3, 16, 16],
            widths: vec![16, 16, 32, 32, 64, 64],
            classes,
        }
    }

    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        match name {
            "mini_conv" => Ok(Self::mini_conv(classes)),
            "mini_vgg" => Ok(Self::mini_vgg(classes)),
            other => Err(Error::Config {
                key: "arch.name".into(),
                detail: format!("unknown architecture `{other}`"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Config {
            key: "arch".into(),
            detail,
        };
        let want = 3 * self.name.convs_per_block();
        if self.widths.len() != want {
            return Err(bad(format!("{:?} needs {want} conv widths, got {}", self.name, self.widths.len())));
        }
        if self.widths.contains(&0) || self.input.contains(&0) || self.classes == 0 {
            return Err(bad("dimensions must be positive".into()));
        }
        if self.input[1] < 8 || self.input[2] < 8 {
            return Err(bad(format!("input {}x{} is smaller than 8x8", self.input[1], self.input[2])));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Width of the penultimate representation fed to the heads.
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * (self.input[1] / 8) * (self.input[2] / 8)
    }

    fn pools_after(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.name.convs_per_block())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Conv,
    Dense,
    NormAffine,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub layer_id: usize,
    pub name: String,
    pub tensor: Tensor<F>,
    pub prunable: bool,
    pub kind: ParamKind,
}

/// Ordered parameter table. Order is fixed by the architecture.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamRegistry<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Element> ParamRegistry<F> {
    pub fn new(entries: Vec<ParamEntry<F>>) -> Self {
        ParamRegistry { entries }
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn prunable(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter().filter(|e| e.prunable)
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable().map(|e| e.tensor.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn max_layer(&self) -> usize {
        self.entries.iter().map(|e| e.layer_id).max().unwrap_or(0)
    }
}

/// i.i.d. `N(0, 2/fan_in)` with `fan_in` the product of all but the first dim.
pub fn he_init<F: Element>(shape: &[usize], seed: u64) -> Tensor<F> {
    assert!(!shape.is_empty(), "he_init needs a non-empty shape");
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        F::of(z * std)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
}

impl HeadSpec {
    pub fn new(name: &str, width: usize) -> Self {
        HeadSpec {
            name: name.to_string(),
            width,
        }
    }
}

pub const LABEL_HEAD: &str = "labels";
pub const ROTATION_HEAD: &str = "rotation";
pub const EMBEDDING_HEAD: &str = "embedding";

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    spec: ArchSpec,
    registry: ParamRegistry<F>,
    norm_stats: Vec<RunningStats<F>>,
    heads: Vec<HeadSpec>,
}

/// Parameter leaves of one forward pass, indexed like the registry.
#[derive(Clone, Debug)]
pub struct Bound {
    pub nodes: Vec<NodeId>,
}

pub fn conv_weight_name(layer: usize) -> String {
    format!("conv{layer}.weight")
}

pub fn norm_param_name(layer: usize, which: &str) -> String {
    format!("bn{layer}.{which}")
}

pub fn head_param_name(head: &str, which: &str) -> String {
    format!("head.{head}.{which}")
}

fn entry_seed(seed: u64, name: &str) -> u64 {
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    SplitMix64::derive(seed, &[tag::INIT, h]).state()
}

fn head_entries<F: Element>(spec: &ArchSpec, head: &HeadSpec, seed: u64) -> [ParamEntry<F>; 2] {
    let layer_id = spec.depth() + 1;
    let wname = head_param_name(&head.name, "weight");
    let bname = head_param_name(&head.name, "bias");
    [
        ParamEntry {
            layer_id,
            tensor: he_init(&[head.width, spec.feature_dim()], entry_seed(seed, &wname)),
            name: wname,
            prunable: false,
            kind: ParamKind::Dense,
        },
        ParamEntry {
            layer_id,
            tensor: Tensor::zeros(&[head.width]),
            name: bname,
            prunable: false,
            kind: ParamKind::Bias,
        },
    ]
}

/// Builds a model with a single label head of width `spec.classes`.
pub fn build_model<F: Element>(spec: &ArchSpec, seed: u64) -> Result<Model<F>> {
    Model::with_heads(spec, seed, &[HeadSpec::new(LABEL_HEAD, spec.classes)])
}

impl<F: Element> Model<F> {
    pub fn with_heads(spec: &ArchSpec, seed: u64, heads: &[HeadSpec]) -> Result<Self> {
        spec.validate()?;
        if heads.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one head".into()));
        }
        let mut entries = Vec::new();
        let mut norm_stats = Vec::new();
        let mut in_ch = spec.input[0];
        for (i, &w) in spec.widths.iter().enumerate() {
            let layer = i + 1;
            let name = conv_weight_name(layer);
            entries.push(ParamEntry {
                layer_id: layer,
                tensor: he_init(&[w, in_ch, 3, 3], entry_seed(seed, &name)),
                name,
                prunable: true,
                kind: ParamKind::Conv,
            });
            for (which, value) in [("gamma", F::one()), ("beta", F::zero())] {
                entries.push(ParamEntry {
                    layer_id: layer,
                    name: norm_param_name(layer, which),
                    tensor: Tensor::full(&[w], value),
                    prunable: false,
                    kind: ParamKind::NormAffine,
                });
            }
            norm_stats.push(RunningStats {
                mean: vec![F::zero(); w],
                var: vec![F::one(); w],
            });
            in_ch = w;
        }
        for head in heads {
            if head.width == 0 {
                return Err(Error::InvalidArgument(format!("head `{}` has zero width", head.name)));
            }
            entries.extend(head_entries(spec, head, seed));
        }
        Ok(Model {
            spec: spec.clone(),
            registry: ParamRegistry::new(entries),
            norm_stats,
            heads: heads.to_vec(),
        })
    }

    /// Reassembles a model from stored tensors (e.g. a checkpoint).
    pub fn from_parts(
        spec: ArchSpec,
        registry: ParamRegistry<F>,
        norm_stats: Vec<RunningStats<F>>,
        heads: Vec<HeadSpec>,
    ) -> Result<Self> {
        let reference = Model::<F>::with_heads(&spec, 0, &heads)?;
        let same_layout = reference.registry.len() == registry.len()
            && reference
                .registry
                .entries()
                .iter()
                .zip(registry.entries())
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !same_layout || norm_stats.len() != spec.depth() {
            return Err(Error::shape("model", "stored tensors do not match the architecture"));
        }
        Ok(Model {
            spec,
            registry,
            norm_stats,
            heads,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn registry(&self) -> &ParamRegistry<F> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<F> {
        &mut self.registry
    }

    pub fn norm_stats(&self) -> &[RunningStats<F>] {
        &self.norm_stats
    }

    pub fn norm_stats_mut(&mut self) -> &mut [RunningStats<F>] {
        &mut self.norm_stats
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn has_head(&self, name: &str) -> bool {
        self.heads.iter().any(|h| h.name == name)
    }

    /// Swaps all heads for freshly initialized ones. Backbone tensors and
    /// normalization statistics are left untouched.
    pub fn replace_heads(&mut self, heads: &[HeadSpec], seed: u64) -> Result<()> {
        if heads.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one head".into()));
        }
        let depth = self.spec.depth();
        self.registry.entries.retain(|e| e.layer_id <= depth);
        for head in heads {
            self.registry.entries.extend(head_entries(&self.spec, head, seed));
        }
        self.heads = heads.to_vec();
        Ok(())
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound {
            nodes: self.registry.entries.iter().map(|e| g.leaf(e.tensor.clone())).collect(),
        }
    }

    /// Adds every parameter as a constant; no gradient reaches them.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Bound {
        Bound {
            nodes: self.registry.entries.iter().map(|e| g.constant(e.tensor.clone())).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(Error::shape(
                "model input",
                format!("expected [N,{},{},{}], got {:?}", self.spec.input[0], self.spec.input[1], self.spec.input[2], x.shape()),
            ));
        }
        Ok(())
    }

    fn forward_backbone(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        x: Tensor<F>,
        mode: Mode,
    ) -> Result<(NodeId, Vec<BatchStats<F>>)> {
        self.check_input(&x)?;
        let mut h = g.constant(x);
        let eps = F::of(NORM_EPS);
        let mut collected = Vec::new();
        for layer in 0..self.spec.depth() {
            let base = layer * 3;
            h = g.conv2d(h, bound.nodes[base], None, 1, 1)?;
            let (gamma, beta) = (bound.nodes[base + 1], bound.nodes[base + 2]);
            let stats = &self.norm_stats[layer];
            let norm_mode = match mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => NormMode::Eval {
                    mean: &stats.mean,
                    var: &stats.var,
                },
            };
            let (y, batch) = g.batch_norm(h, gamma, beta, norm_mode, eps)?;
            collected.extend(batch);
            h = g.relu(y);
            if self.spec.pools_after(layer) {
                h = g.max_pool2(h)?;
            }
        }
        Ok((g.flatten(h)?, collected))
    }

    /// Backbone forward pass returning the flattened feature node. In
    /// `Mode::Train` batch statistics are used and running averages updated.
    pub fn backbone(&mut self, g: &mut Graph<F>, bound: &Bound, x: Tensor<F>, mode: Mode) -> Result<NodeId> {
        let (features, batch) = self.forward_backbone(g, bound, x, mode)?;
        for (stats, b) in self.norm_stats.iter_mut().zip(&batch) {
            update_running(stats, b);
        }
        Ok(features)
    }

    /// Applies head `name` to a feature node.
    pub fn head(&self, g: &mut Graph<F>, bound: &Bound, name: &str, features: NodeId) -> Result<NodeId> {
        let w = self
            .registry
            .index_of(&head_param_name(name, "weight"))
            .ok_or_else(|| Error::InvalidArgument(format!("model has no `{name}` head")))?;
        let b = self
            .registry
            .index_of(&head_param_name(name, "bias"))
            .ok_or_else(|| Error::InvalidArgument(format!("model has no `{name}` head")))?;
        g.linear(features, bound.nodes[w], Some(bound.nodes[b]))
    }

    /// Penultimate-layer features in eval mode; the model is not modified.
    pub fn extract_features(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let (f, _) = self.forward_backbone(&mut g, &bound, batch.clone(), Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode logits of head `name`.
    pub fn predict(&self, batch: &Tensor<F>, head: &str) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let (f, _) = self.forward_backbone(&mut g, &bound, batch.clone(), Mode::Eval)?;
        let out = self.head(&mut g, &bound, head, f)?;
        Ok(g.value(out).clone())
    }

    /// Sets every prunable/protected tensor and statistic from `other`.
    pub fn copy_state_from(&mut self, other: &Model<F>) -> Result<()> {
        if self.registry.len() != other.registry.len() {
            return Err(Error::shape("copy_state_from", "registry layouts differ"));
        }
        self.registry = other.registry.clone();
        self.norm_stats = other.norm_stats.clone();
        Ok(())
    }
}

fn update_running<F: Element>(stats: &mut RunningStats<F>, batch: &BatchStats<F>) {
    let mom = F::of(NORM_MOMENTUM);
    let keep = F::one() - mom;
    let unbias = if batch.count > 1 {
        F::of(batch.count as f64 / (batch.count - 1) as f64)
    } else {
        F::one()
    };
    for c in 0..stats.mean.len() {
        stats.mean[c] = keep * stats.mean[c] + mom * batch.mean[c];
        stats.var[c] = keep * stats.var[c] + mom * batch.var[c] * unbias;
    }
}
