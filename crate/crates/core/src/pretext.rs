//! Training objectives: label classification, rotation prediction,
//! exemplar instance discrimination and the semi-supervised rotation sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::data::{augment, AugmentPolicy, SubsetMode};
use crate::error::{Error, Result};
use crate::model::{Bound, HeadSpec, Mode, Model, EMBEDDING_HEAD, LABEL_HEAD, ROTATION_HEAD};
use crate::tensor::{Element, Tensor};

/// Quarter turns, counterclockwise; label `k` means `k·90°`.
pub const ROTATIONS_DEG: [u32; 4] = [0, 90, 180, 270];

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Labels,
    Rotnet,
    Exemplar {
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default = "default_embedding")]
        embedding_dim: usize,
    },
    S4l {
        #[serde(default = "default_label_fraction")]
        label_fraction: f64,
        #[serde(default = "default_subset_mode")]
        subset_mode: SubsetMode,
    },
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}
fn default_embedding() -> usize {
    DEFAULT_EMBEDDING_DIM
}
fn default_label_fraction() -> f64 {
    0.1
}
fn default_subset_mode() -> SubsetMode {
    SubsetMode::PerClass
}

impl TaskKind {
    pub fn exemplar() -> Self {
        TaskKind::Exemplar {
            margin: DEFAULT_MARGIN,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Labels => "labels",
            TaskKind::Rotnet => "rotnet",
            TaskKind::Exemplar { .. } => "exemplar",
            TaskKind::S4l { .. } => "s4l",
        }
    }

    /// Heads a model needs to be trained on this task.
    pub fn heads(&self, classes: usize) -> Vec<HeadSpec> {
        match self {
            TaskKind::Labels => vec![HeadSpec::new(LABEL_HEAD, classes)],
            TaskKind::Rotnet => vec![HeadSpec::new(ROTATION_HEAD, 4)],
            TaskKind::Exemplar { embedding_dim, .. } => vec![HeadSpec::new(EMBEDDING_HEAD, *embedding_dim)],
            TaskKind::S4l { .. } => vec![HeadSpec::new(LABEL_HEAD, classes), HeadSpec::new(ROTATION_HEAD, 4)],
        }
    }

    /// Whether training on this task reads labels of the training set.
    pub fn uses_labels(&self) -> bool {
        matches!(self, TaskKind::Labels | TaskKind::S4l { .. })
    }
}

/// A loss node together with the graph and parameter leaves that built it.
pub struct LossGraph<F> {
    pub graph: Graph<F>,
    pub bound: Bound,
    pub loss: NodeId,
}

impl<F: Element> LossGraph<F> {
    pub fn value(&self) -> F {
        self.graph.value(self.loss).data()[0]
    }

    /// Gradients for every registry entry, in registry order.
    pub fn param_grads(&self) -> Result<Vec<Tensor<F>>> {
        let mut grads = self.graph.backward(self.loss)?;
        Ok(self.bound.nodes.iter().map(|&id| grads.take(id)).collect())
    }
}

/// Rotates a `[C,H,W]` image by `quarter_turns·90°` counterclockwise.
pub fn rotate90<F: Element>(image: &Tensor<F>, quarter_turns: usize) -> Result<Tensor<F>> {
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("rotate90", format!("expected [C,H,W], got {:?}", image.shape()))),
    };
    let src = image.data();
    let turns = quarter_turns % 4;
    let (oh, ow) = if turns.is_multiple_of(2) { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let (sr, sc) = match turns {
                    0 => (r, col),
                    1 => (col, w - 1 - r),
                    2 => (h - 1 - r, w - 1 - col),
                    _ => (h - 1 - col, r),
                };
                out.push(p[sr * w + sc]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Every image in all four orientations, image-major.
    AllFour,
    /// One uniformly drawn orientation per image.
    Sampled,
}

/// Builds the 4-way rotation classification batch for `images:[N,C,H,W]`.
pub fn rotnet_batch<F: Element, R: Rng>(
    images: &Tensor<F>,
    mode: RotationMode,
    rng: &mut R,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = images.dims4()?;
    if h != w {
        return Err(Error::shape("rotnet_batch", format!("images must be square, got {h}x{w}")));
    }
    let img_len = c * h * w;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let img = Tensor::new(vec![c, h, w], images.data()[i * img_len..(i + 1) * img_len].to_vec())?;
        let turns: Vec<usize> = match mode {
            RotationMode::AllFour => (0..4).collect(),
            RotationMode::Sampled => vec![rng.random_range(0..4)],
        };
        for t in turns {
            data.extend_from_slice(rotate90(&img, t)?.data());
            labels.push(t);
        }
    }
    let m = labels.len();
    Ok((Tensor::new(vec![m, c, h, w], data)?, labels))
}

/// Cross entropy of the label head.
pub fn supervised_loss<F: Element>(
    model: &mut Model<F>,
    images: Tensor<F>,
    labels: &[usize],
    mode: Mode,
) -> Result<LossGraph<F>> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let features = model.backbone(&mut graph, &bound, images, mode)?;
    let logits = model.head(&mut graph, &bound, LABEL_HEAD, features)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    Ok(LossGraph { graph, bound, loss })
}

/// Cross entropy of the rotation head on the rotated batch.
pub fn rotnet_loss<F: Element, R: Rng>(
    model: &mut Model<F>,
    images: &Tensor<F>,
    rotation: RotationMode,
    mode: Mode,
    rng: &mut R,
) -> Result<LossGraph<F>> {
    let (rotated, labels) = rotnet_batch(images, rotation, rng)?;
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let features = model.backbone(&mut graph, &bound, rotated, mode)?;
    let logits = model.head(&mut graph, &bound, ROTATION_HEAD, features)?;
    let loss = graph.softmax_cross_entropy(logits, &labels)?;
    Ok(LossGraph { graph, bound, loss })
}

/// Triplet loss over `embeddings:[2N,D]` whose first `N` rows are anchors
/// and last `N` rows positives; `negatives[i]` names the positive row
/// (0-based within the second half) used as the negative for anchor `i`.
pub fn exemplar_triplet<F: Element>(
    g: &mut Graph<F>,
    embeddings: NodeId,
    negatives: &[usize],
    margin: F,
) -> Result<NodeId> {
    let rows = g.value(embeddings).shape()[0];
    let n = rows / 2;
    if rows != 2 * n || negatives.len() != n {
        return Err(Error::shape("exemplar_triplet", format!("{rows} embeddings for {} anchors", negatives.len())));
    }
    let anchors = g.slice_rows(embeddings, 0, n)?;
    let positives = g.slice_rows(embeddings, n, 2 * n)?;
    let neg_rows: Vec<usize> = negatives.iter().map(|&j| n + j).collect();
    let negs = g.gather_rows(embeddings, &neg_rows)?;
    g.triplet_margin_loss(anchors, positives, negs, margin)
}

/// For every position, a uniformly drawn position holding a different id.
pub fn sample_negatives<R: Rng>(instance_ids: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let n = instance_ids.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| instance_ids[j] != instance_ids[i]).collect();
        if others.is_empty() {
            return Err(Error::InvalidArgument("exemplar batch needs at least 2 distinct instances".into()));
        }
        out.push(others[rng.random_range(0..others.len())]);
    }
    Ok(out)
}

/// Instance discrimination: two exemplar-augmented views per image form
/// anchor and positive; another instance's view is the negative. Embeddings
/// are L2-normalized outputs of the embedding head.
pub fn exemplar_loss<F: Element, R: Rng>(
    model: &mut Model<F>,
    images: &Tensor<f32>,
    instance_ids: &[usize],
    margin: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<LossGraph<F>> {
    let (n, c, h, w) = images.dims4()?;
    if instance_ids.len() != n {
        return Err(Error::shape("exemplar_loss", format!("{} ids for {n} images", instance_ids.len())));
    }
    let negatives = sample_negatives(instance_ids, rng)?;
    let policy = AugmentPolicy::exemplar();
    let img_len = c * h * w;
    let mut views = Vec::with_capacity(2 * n * img_len);
    for _view in 0..2 {
        for i in 0..n {
            let src = &images.data()[i * img_len..(i + 1) * img_len];
            views.extend(augment(src, [c, h, w], &policy, rng).into_iter().map(|v| F::of(v as f64)));
        }
    }
    let batch = Tensor::new(vec![2 * n, c, h, w], views)?;
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let features = model.backbone(&mut graph, &bound, batch, mode)?;
    let emb = model.head(&mut graph, &bound, EMBEDDING_HEAD, features)?;
    let emb = graph.l2_normalize(emb)?;
    let loss = exemplar_triplet(&mut graph, emb, &negatives, F::of(margin))?;
    Ok(LossGraph { graph, bound, loss })
}

/// Label cross entropy on the labeled part plus rotation cross entropy on
/// all images, unweighted.
pub fn s4l_loss<F: Element, R: Rng>(
    model: &mut Model<F>,
    labeled: Option<(&Tensor<F>, &[usize])>,
    unlabeled: Option<&Tensor<F>>,
    mode: Mode,
    rng: &mut R,
) -> Result<LossGraph<F>> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let mut terms = Vec::new();
    if let Some((images, labels)) = labeled {
        let f = model.backbone(&mut graph, &bound, images.clone(), mode)?;
        let logits = model.head(&mut graph, &bound, LABEL_HEAD, f)?;
        terms.push(graph.softmax_cross_entropy(logits, labels)?);
    }
    let all: Vec<&Tensor<F>> = labeled.map(|(x, _)| x).into_iter().chain(unlabeled).collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("s4l batch is empty".into()));
    }
    let combined = Tensor::concat_rows(&all)?;
    let (rotated, rot_labels) = rotnet_batch(&combined, RotationMode::AllFour, rng)?;
    let f = model.backbone(&mut graph, &bound, rotated, mode)?;
    let logits = model.head(&mut graph, &bound, ROTATION_HEAD, f)?;
    terms.push(graph.softmax_cross_entropy(logits, &rot_labels)?);
    let loss = if terms.len() == 2 {
        graph.add(terms[0], terms[1])?
    } else {
        terms[0]
    };
    Ok(LossGraph { graph, bound, loss })
}
