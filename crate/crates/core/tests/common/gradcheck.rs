//! Central finite differences against reverse-mode gradients, in f64.

use prunelab::autograd::{Graph, NodeId, NormMode};
use prunelab::rng::SplitMix64;
use prunelab::{Result, Tensor};
use rand::seq::index;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const POINTS: usize = 10;

pub struct CaseResult {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from 0 so no finite-difference step crosses a kink.
fn off_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = SplitMix64::new(seed);
    let r = g.constant(uniform(&shape, &mut rng));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn loss_of(case: &Case, inputs: &[Tensor<f64>], seed: u64) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &leaves)?;
    let loss = project(&mut g, out, seed)?;
    Ok((g, leaves, loss))
}

fn check(case: &Case, seed: u64) -> Result<CaseResult> {
    let (g, leaves, loss) = loss_of(case, &case.inputs, seed)?;
    let grads = g.backward(loss)?;
    let mut rng = SplitMix64::derive(seed, &[1]);
    let mut worst = 0.0f64;
    let mut points = 0;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads.get(leaves[i]);
        let picks = POINTS.min(input.len());
        for j in index::sample(&mut rng, input.len(), picks) {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = case.inputs.clone();
                shifted[i].data_mut()[j] += delta;
                let (g, _, l) = loss_of(case, &shifted, seed)?;
                Ok(g.value(l).data()[0])
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            points += 1;
        }
    }
    Ok(CaseResult {
        op: case.op,
        points,
        max_rel_err: worst,
    })
}

fn cases() -> Vec<Case> {
    let mut rng = SplitMix64::new(0x9e37);
    let r = &mut rng;
    let mut out: Vec<Case> = Vec::new();
    let mut push = |op, inputs, build: Build| out.push(Case { op, inputs, build });

    push("add", vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], Box::new(|g, l| g.add(l[0], l[1])));
    push("sub", vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], Box::new(|g, l| g.sub(l[0], l[1])));
    push("mul", vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], Box::new(|g, l| g.mul(l[0], l[1])));
    push("scale", vec![uniform(&[12], r)], Box::new(|g, l| Ok(g.scale(l[0], -1.7))));
    push("sum", vec![uniform(&[2, 6], r)], Box::new(|g, l| Ok(g.sum(l[0]))));
    push("mean", vec![uniform(&[2, 6], r)], Box::new(|g, l| Ok(g.mean(l[0]))));
    push("relu", vec![off_zero(&[4, 5], r)], Box::new(|g, l| Ok(g.relu(l[0]))));
    push("reshape", vec![uniform(&[2, 3, 4], r)], Box::new(|g, l| g.reshape(l[0], &[4, 6])));
    push("flatten", vec![uniform(&[2, 3, 2, 2], r)], Box::new(|g, l| g.flatten(l[0])));
    push(
        "linear",
        vec![uniform(&[3, 5], r), uniform(&[4, 5], r), uniform(&[4], r)],
        Box::new(|g, l| g.linear(l[0], l[1], Some(l[2]))),
    );
    push(
        "conv2d (stride 1, pad 1)",
        vec![uniform(&[2, 3, 5, 5], r), uniform(&[4, 3, 3, 3], r), uniform(&[4], r)],
        Box::new(|g, l| g.conv2d(l[0], l[1], Some(l[2]), 1, 1)),
    );
    push(
        "conv2d (stride 2, pad 0)",
        vec![uniform(&[2, 2, 5, 5], r), uniform(&[3, 2, 3, 3], r)],
        Box::new(|g, l| g.conv2d(l[0], l[1], None, 2, 0)),
    );
    push(
        "batch_norm (train)",
        vec![uniform(&[4, 3, 2, 2], r), uniform(&[3], r), uniform(&[3], r)],
        Box::new(|g, l| Ok(g.batch_norm(l[0], l[1], l[2], NormMode::Train, 1e-5)?.0)),
    );
    push(
        "batch_norm (eval)",
        vec![uniform(&[2, 3, 2, 2], r), uniform(&[3], r), uniform(&[3], r)],
        Box::new(|g, l| {
            let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.8]);
            Ok(g.batch_norm(l[0], l[1], l[2], NormMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
        }),
    );
    push("max_pool2", vec![uniform(&[2, 3, 4, 4], r)], Box::new(|g, l| g.max_pool2(l[0])));
    push("l2_normalize", vec![uniform(&[3, 5], r)], Box::new(|g, l| g.l2_normalize(l[0])));
    push("gather_rows", vec![uniform(&[4, 3], r)], Box::new(|g, l| g.gather_rows(l[0], &[2, 0, 2, 1])));
    push("slice_rows", vec![uniform(&[5, 3], r)], Box::new(|g, l| g.slice_rows(l[0], 1, 4)));
    push(
        "softmax_cross_entropy",
        vec![uniform(&[4, 5], r)],
        Box::new(|g, l| g.softmax_cross_entropy(l[0], &[0, 3, 4, 3])),
    );
    push(
        "triplet_margin_loss",
        vec![uniform(&[3, 4], r), uniform(&[3, 4], r), uniform(&[3, 4], r)],
        Box::new(|g, l| g.triplet_margin_loss(l[0], l[1], l[2], 1.5)),
    );
    push(
        "conv-norm-relu-pool-linear-ce pipeline",
        vec![uniform(&[3, 2, 4, 4], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r), uniform(&[3], r), uniform(&[2, 12], r)],
        Box::new(|g, l| {
            let c = g.conv2d(l[0], l[1], None, 1, 1)?;
            let (n, _) = g.batch_norm(c, l[2], l[3], NormMode::Train, 1e-5)?;
            let a = g.relu(n);
            let p = g.max_pool2(a)?;
            let f = g.flatten(p)?;
            let z = g.linear(f, l[4], None)?;
            g.softmax_cross_entropy(z, &[1, 0, 1])
        }),
    );
    out
}

/// Runs every case; one result per op.
pub fn run_suite() -> Result<Vec<CaseResult>> {
    cases().iter().enumerate().map(|(i, c)| check(c, 1000 + i as u64)).collect()
}
