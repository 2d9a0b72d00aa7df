//! Federated training over the simulated uplink: local gradients, ideal and
//! over-the-air aggregation, non-IID sharding, and the convergence-bound
//! checker for strongly convex losses.

use crate::airlink::{over_the_air_aggregate, AirlinkError, NoiseParams, RisMode, RisState, Transceiver};
use crate::channel::{
    draw_node_positions, generate_channels, ChannelError, ChannelSet, FadingParams, Geometry,
    PathLossParams,
};
use crate::linalg::{c, hermitian_solve, CMat, LinalgError};
use crate::optimizer::{alternating_optimize, AoConfig, OptimError, Powers};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("{samples} samples cannot be cut into {shards} equal shards for {nodes} nodes x {per_node}")]
    IndivisibleSharding { samples: usize, shards: usize, nodes: usize, per_node: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("convexity parameters must satisfy 0 < mu < rho (mu = {mu}, rho = {rho})")]
    InvalidConvexityParams { mu: f64, rho: f64 },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Airlink(#[from] AirlinkError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Loss driving the local gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropySoftmax,
    /// Squared error of every output against the scalar label, plus a ridge
    /// term; strongly convex, used by the bound checker.
    RegularizedLeastSquares { reg: f64 },
}

/// Linear model: `num_classes x num_features` weights, flattened row-major.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub num_classes: usize,
    pub num_features: usize,
    pub loss: LossKind,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, num_features: usize, loss: LossKind) -> Self {
        LinearModel { weights: vec![0.0; num_classes * num_features], num_classes, num_features, loss }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, u: &[f64], out: &mut [f64]) {
        for (cidx, o) in out.iter_mut().enumerate() {
            let row = &self.weights[cidx * self.num_features..(cidx + 1) * self.num_features];
            *o = row.iter().zip(u).map(|(w, x)| w * x).sum();
        }
    }
}

/// One node's local dataset: `size x num_features` features plus labels.
#[derive(Debug, Clone)]
pub struct DataShard {
    pub features: Vec<f64>,
    pub num_features: usize,
    pub labels: Vec<u8>,
}

impl DataShard {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_row(&self, k: usize) -> &[f64] {
        &self.features[k * self.num_features..(k + 1) * self.num_features]
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Mean per-sample gradient of the configured loss over the shard.
pub fn local_gradient(model: &LinearModel, shard: &DataShard) -> Result<Vec<f64>, FlError> {
    if shard.num_features != model.num_features {
        return Err(FlError::DimensionMismatch("local_gradient: feature width"));
    }
    let k_size = shard.size();
    let f = model.num_features;
    let mut grad = vec![0.0; model.dim()];
    let mut z = vec![0.0; model.num_classes];
    for k in 0..k_size {
        let u = shard.feature_row(k);
        model.logits(u, &mut z);
        match model.loss {
            LossKind::CrossEntropySoftmax => {
                softmax_in_place(&mut z);
                for cidx in 0..model.num_classes {
                    let coeff = z[cidx] - if cidx as u8 == shard.labels[k] { 1.0 } else { 0.0 };
                    let row = &mut grad[cidx * f..(cidx + 1) * f];
                    for (g, x) in row.iter_mut().zip(u) {
                        *g += coeff * x;
                    }
                }
            }
            LossKind::RegularizedLeastSquares { .. } => {
                let v = shard.labels[k] as f64;
                for cidx in 0..model.num_classes {
                    let coeff = z[cidx] - v;
                    let row = &mut grad[cidx * f..(cidx + 1) * f];
                    for (g, x) in row.iter_mut().zip(u) {
                        *g += coeff * x;
                    }
                }
            }
        }
    }
    let inv = 1.0 / k_size as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    if let LossKind::RegularizedLeastSquares { reg } = model.loss {
        for (g, w) in grad.iter_mut().zip(&model.weights) {
            *g += reg * w;
        }
    }
    Ok(grad)
}

/// Mean per-sample loss over the shard (ridge term included once).
pub fn loss_value(model: &LinearModel, shard: &DataShard) -> Result<f64, FlError> {
    if shard.num_features != model.num_features {
        return Err(FlError::DimensionMismatch("loss_value: feature width"));
    }
    let mut z = vec![0.0; model.num_classes];
    let mut total = 0.0;
    for k in 0..shard.size() {
        model.logits(shard.feature_row(k), &mut z);
        match model.loss {
            LossKind::CrossEntropySoftmax => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[shard.labels[k] as usize];
            }
            LossKind::RegularizedLeastSquares { .. } => {
                let v = shard.labels[k] as f64;
                total += 0.5 * z.iter().map(|&o| (o - v).powi(2)).sum::<f64>();
            }
        }
    }
    let mut loss = total / shard.size() as f64;
    if let LossKind::RegularizedLeastSquares { reg } = model.loss {
        loss += 0.5 * reg * model.weights.iter().map(|w| w * w).sum::<f64>();
    }
    Ok(loss)
}

/// Sample-count weighted loss over all shards.
pub fn pooled_loss(model: &LinearModel, shards: &[DataShard]) -> Result<f64, FlError> {
    let mut total = 0.0;
    let mut k_total = 0.0;
    for s in shards {
        total += loss_value(model, s)? * s.size() as f64;
        k_total += s.size() as f64;
    }
    Ok(total / k_total)
}

/// Sample-count weighted average of local gradients.
pub fn aggregate_ideal(grads: &[Vec<f64>], sizes: &[u64]) -> Result<Vec<f64>, FlError> {
    if grads.len() != sizes.len() || grads.is_empty() {
        return Err(FlError::DimensionMismatch("aggregate_ideal: node count"));
    }
    let d = grads[0].len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(FlError::DimensionMismatch("aggregate_ideal: gradient lengths"));
    }
    let k_total: f64 = sizes.iter().map(|&k| k as f64).sum();
    let mut out = vec![0.0; d];
    for (g, &k) in grads.iter().zip(sizes) {
        let w = k as f64 / k_total;
        for (o, &v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Gradient step `w - eta * g_hat`.
pub fn global_update(w: &[f64], g_hat: &[f64], eta: f64) -> Vec<f64> {
    assert_eq!(w.len(), g_hat.len());
    w.iter().zip(g_hat).map(|(&wi, &gi)| wi - eta * gi).collect()
}

/// Label-sorted contiguous sharding: cut the samples into equal shards after
/// a stable sort by label, then deal the shards to the nodes without
/// replacement. Each node ends up seeing only a few classes.
pub fn shard_noniid(
    features: &[f64],
    num_features: usize,
    labels: &[u8],
    num_shards: usize,
    shards_per_node: usize,
    num_nodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DataShard>, FlError> {
    let total = labels.len();
    if total % num_shards != 0 || num_nodes * shards_per_node != num_shards {
        return Err(FlError::IndivisibleSharding {
            samples: total,
            shards: num_shards,
            nodes: num_nodes,
            per_node: shards_per_node,
        });
    }
    let shard_size = total / num_shards;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    use rand::seq::SliceRandom;
    shard_ids.shuffle(rng);

    let mut out = Vec::with_capacity(num_nodes);
    for node in 0..num_nodes {
        let mut feats = Vec::with_capacity(shards_per_node * shard_size * num_features);
        let mut labs = Vec::with_capacity(shards_per_node * shard_size);
        for s in 0..shards_per_node {
            let shard = shard_ids[node * shards_per_node + s];
            for &idx in &order[shard * shard_size..(shard + 1) * shard_size] {
                feats.extend_from_slice(&features[idx * num_features..(idx + 1) * num_features]);
                labs.push(labels[idx]);
            }
        }
        out.push(DataShard { features: feats, num_features, labels: labs });
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions on the test shard.
pub fn evaluate_accuracy(model: &LinearModel, test: &DataShard) -> Result<f64, FlError> {
    if test.size() == 0 {
        return Err(FlError::EmptyTestSet);
    }
    if test.num_features != model.num_features {
        return Err(FlError::DimensionMismatch("evaluate_accuracy: feature width"));
    }
    let mut z = vec![0.0; model.num_classes];
    let mut correct = 0usize;
    for k in 0..test.size() {
        model.logits(test.feature_row(k), &mut z);
        let pred = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred as u8 == test.labels[k] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.size() as f64)
}

/// Smoothness and strong-convexity constants of the loss.
#[derive(Debug, Clone, Copy)]
pub struct ConvexityParams {
    pub rho: f64,
    pub mu: f64,
}

impl ConvexityParams {
    pub fn new(rho: f64, mu: f64) -> Result<Self, FlError> {
        if !(mu > 0.0 && mu < rho) {
            return Err(FlError::InvalidConvexityParams { mu, rho });
        }
        Ok(ConvexityParams { rho, mu })
    }

    /// Contraction factor `1 - mu / rho`.
    pub fn lambda(&self) -> f64 {
        1.0 - self.mu / self.rho
    }
}

/// Loss-gap bound after `T` rounds:
/// `initial_gap * lambda^T + sum_t lambda^(T - t) / (2 rho) * error_sq[t]`.
pub fn convergence_bound(
    initial_gap: f64,
    error_sq: &[f64],
    params: &ConvexityParams,
) -> Result<f64, FlError> {
    let lambda = params.lambda();
    let t_total = error_sq.len();
    let mut bound = initial_gap * lambda.powi(t_total as i32);
    for (t, &e) in error_sq.iter().enumerate() {
        bound += lambda.powi((t_total - 1 - t) as i32) / (2.0 * params.rho) * e;
    }
    Ok(bound)
}

/// How the global gradient is formed each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Ideal,
    AirComp,
    AirCompNoRis,
    AirCompPassive,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Ideal => "ideal",
            Aggregation::AirComp => "active",
            Aggregation::AirCompNoRis => "none",
            Aggregation::AirCompPassive => "passive",
        }
    }

    pub fn ris_mode(&self) -> Option<RisMode> {
        match self {
            Aggregation::Ideal => None,
            Aggregation::AirComp => Some(RisMode::Active),
            Aggregation::AirCompNoRis => Some(RisMode::None),
            Aggregation::AirCompPassive => Some(RisMode::Passive),
        }
    }
}

/// Training-loop switches.
#[derive(Debug, Clone)]
pub struct FlConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub aggregation: Aggregation,
}

/// Wireless scenario: geometry bounds, propagation parameters, array sizes,
/// and power/noise levels.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub server_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    /// Node placement box `[x0, x1, y0, y1]` at z = 0.
    pub node_region: [f64; 4],
    pub pl: PathLossParams,
    pub fade: FadingParams,
    pub num_antennas: usize,
    pub num_elements: usize,
    pub num_nodes: usize,
    pub p_node: f64,
    pub p_ris: f64,
    pub noise: NoiseParams,
    /// Draw the channels once and reuse them every round.
    pub static_channels: bool,
}

/// One CSV row of the experiment trace.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub arm: &'static str,
    pub seed: u64,
    pub round: usize,
    pub nmse: f64,
    pub predicted_mse: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub ao_iters: usize,
    pub elapsed_ms: u64,
}

/// Full output of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub rounds: Vec<RoundTrace>,
    /// `||grad L(w_t)||^2` per round (exact full-batch gradient).
    pub grad_norm_sq: Vec<f64>,
    /// `||g_hat_t - g_t||^2` per round.
    pub err_norm_sq: Vec<f64>,
    /// `L(w_t)` per round, at the point the gradients were computed.
    pub losses: Vec<f64>,
    /// `L(w_{T+1})` after the last update.
    pub final_loss: f64,
    pub final_model: LinearModel,
}

// Stream ids carving one seed into independent generator streams.
const STREAM_PLACEMENT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_CHANNEL_BASE: u64 = 0x1000;
const STREAM_NOISE_BASE: u64 = 0x2000_0000;
const STREAM_AO_BASE: u64 = 0x4000_0000;

/// Seeded generator on a fixed stream, so arms sharing a seed see identical
/// placements and per-round channels.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for the experiment's data pipeline (placement-independent).
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_DATA)
}

/// Run one federated training experiment.
///
/// Per round: local full-batch gradients, the transceiver/RIS optimization on
/// a fresh channel draw, one over-the-air aggregation, and a global step.
/// Channel and placement streams depend only on `(seed, round)`, so arms are
/// paired across the same seed.
pub fn run_fl(
    fl: &FlConfig,
    scenario: &Scenario,
    model0: &LinearModel,
    shards: &[DataShard],
    test: &DataShard,
    ao_cfg: &AoConfig,
    seed: u64,
    record_timing: bool,
) -> Result<RunResult, FlError> {
    if shards.len() != scenario.num_nodes {
        return Err(FlError::DimensionMismatch("run_fl: shard count vs scenario nodes"));
    }
    let sizes: Vec<u64> = shards.iter().map(|s| s.size() as u64).collect();
    let geom = Geometry {
        server_pos: scenario.server_pos,
        ris_pos: scenario.ris_pos,
        node_pos: draw_node_positions(
            scenario.node_region,
            scenario.num_nodes,
            &mut stream_rng(seed, STREAM_PLACEMENT),
        ),
    };
    let noise = match fl.aggregation {
        // a passive surface has no amplifiers, hence no injected noise
        Aggregation::AirCompPassive => NoiseParams { sigma_a_sq: 0.0, ..scenario.noise },
        _ => scenario.noise,
    };
    let powers = Powers {
        p_node: vec![scenario.p_node; scenario.num_nodes],
        p_ris: scenario.p_ris,
    };

    let mut model = model0.clone();
    let d = model.dim();
    let mut rounds = Vec::with_capacity(fl.rounds);
    let mut grad_norm_sq = Vec::with_capacity(fl.rounds);
    let mut err_norm_sq = Vec::with_capacity(fl.rounds);
    let mut losses = Vec::with_capacity(fl.rounds);
    let mut static_ch: Option<ChannelSet> = None;

    for t in 1..=fl.rounds {
        let started = std::time::Instant::now();
        let grads: Vec<Vec<f64>> = shards
            .par_iter()
            .map(|s| local_gradient(&model, s))
            .collect::<Result<_, _>>()?;
        let g_ideal = aggregate_ideal(&grads, &sizes)?;
        let train_loss = pooled_loss(&model, shards)?;

        let (g_hat, predicted_mse, ao_iters) = match fl.aggregation.ris_mode() {
            None => (g_ideal.clone(), 0.0, 0),
            Some(mode) => {
                let ch = if scenario.static_channels {
                    if static_ch.is_none() {
                        static_ch = Some(generate_channels(
                            &geom,
                            &scenario.pl,
                            &scenario.fade,
                            scenario.num_antennas,
                            scenario.num_elements,
                            &mut stream_rng(seed, STREAM_CHANNEL_BASE),
                        )?);
                    }
                    static_ch.clone().unwrap()
                } else {
                    generate_channels(
                        &geom,
                        &scenario.pl,
                        &scenario.fade,
                        scenario.num_antennas,
                        scenario.num_elements,
                        &mut stream_rng(seed, STREAM_CHANNEL_BASE + t as u64),
                    )?
                };
                let stats_stds: Vec<f64> =
                    grads.iter().map(|g| crate::airlink::normalize_gradient(g).2).collect();
                let stats = crate::airlink::GradientStats {
                    means: grads
                        .iter()
                        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
                        .collect(),
                    stds: stats_stds,
                    sizes: sizes.clone(),
                };
                let ao = alternating_optimize(
                    &ch,
                    mode,
                    &stats,
                    &powers,
                    &noise,
                    ao_cfg,
                    &mut stream_rng(seed, STREAM_AO_BASE + t as u64),
                )?;
                let tx = Transceiver {
                    m: ao.m,
                    b: ao.b,
                    p_node: powers.p_node.clone(),
                    p_ris: powers.p_ris,
                };
                let ris = match mode {
                    RisMode::None => RisState::none(),
                    RisMode::Active => RisState::active(ao.phi),
                    RisMode::Passive => RisState { phi: ao.phi, mode: RisMode::Passive },
                };
                let outcome = over_the_air_aggregate(
                    &grads,
                    &sizes,
                    &tx,
                    &ch,
                    &ris,
                    &noise,
                    &mut stream_rng(seed, STREAM_NOISE_BASE + t as u64),
                )?;
                (outcome.g_hat, outcome.predicted_mse, ao.iters_used)
            }
        };

        let err: f64 = g_hat.iter().zip(&g_ideal).map(|(a, b)| (a - b).powi(2)).sum();
        grad_norm_sq.push(g_ideal.iter().map(|v| v * v).sum());
        err_norm_sq.push(err);
        losses.push(train_loss);

        model.weights = global_update(&model.weights, &g_hat, fl.learning_rate);
        let test_accuracy = evaluate_accuracy(&model, test)?;
        let elapsed_ms =
            if record_timing { started.elapsed().as_millis() as u64 } else { 0 };
        rounds.push(RoundTrace {
            arm: fl.aggregation.name(),
            seed,
            round: t,
            nmse: err / d as f64,
            predicted_mse,
            train_loss,
            test_accuracy,
            ao_iters,
            elapsed_ms,
        });
    }
    let final_loss = pooled_loss(&model, shards)?;
    Ok(RunResult { rounds, grad_norm_sq, err_norm_sq, losses, final_loss, final_model: model })
}

/// Helpers for the convergence-bound checker: exact extreme eigenvalues of
/// the ridge Hessian and the closed-form optimum.
pub mod bound {
    use super::*;

    /// All eigenvalues of a dense real symmetric matrix by cyclic Jacobi
    /// rotations.
    pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(a.len(), n * n);
        let mut m = a.to_vec();
        let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(1e-300);
        for _ in 0..200 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i * n + j] * m[i * n + j])
                .sum();
            if off < 1e-28 * scale {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let cth = 1.0 / (t * t + 1.0).sqrt();
                    let sth = t * cth;
                    for k in 0..n {
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        m[k * n + p] = cth * akp - sth * akq;
                        m[k * n + q] = sth * akp + cth * akq;
                    }
                    for k in 0..n {
                        let apk = m[p * n + k];
                        let aqk = m[q * n + k];
                        m[p * n + k] = cth * apk - sth * aqk;
                        m[q * n + k] = sth * apk + cth * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i * n + i]).collect()
    }

    /// Ridge Hessian `(1/K) X^T X + reg I` over the pooled shards.
    pub fn ridge_hessian(shards: &[DataShard], reg: f64) -> (Vec<f64>, usize) {
        let n = shards[0].num_features;
        let mut h = vec![0.0; n * n];
        let mut k_total = 0.0;
        for s in shards {
            k_total += s.size() as f64;
            for k in 0..s.size() {
                let u = s.feature_row(k);
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] += u[i] * u[j];
                    }
                }
            }
        }
        for v in h.iter_mut() {
            *v /= k_total;
        }
        for i in 0..n {
            h[i * n + i] += reg;
        }
        (h, n)
    }

    /// Exact smoothness/strong-convexity constants of the ridge loss.
    pub fn ridge_convexity(shards: &[DataShard], reg: f64) -> Result<ConvexityParams, FlError> {
        let (h, n) = ridge_hessian(shards, reg);
        let eig = symmetric_eigenvalues(&h, n);
        let rho = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mu = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        ConvexityParams::new(rho, mu)
    }

    /// Closed-form minimizer of the ridge loss (normal equations).
    pub fn ridge_optimum(
        shards: &[DataShard],
        num_classes: usize,
        reg: f64,
    ) -> Result<LinearModel, FlError> {
        let (h, n) = ridge_hessian(shards, reg);
        let mut rhs = vec![0.0; n];
        let mut k_total = 0.0;
        for s in shards {
            k_total += s.size() as f64;
            for k in 0..s.size() {
                let v = s.labels[k] as f64;
                for (r, &x) in rhs.iter_mut().zip(s.feature_row(k)) {
                    *r += v * x;
                }
            }
        }
        for r in rhs.iter_mut() {
            *r /= k_total;
        }
        let hmat = CMat::from_fn(n, n, |i, j| c(h[i * n + j], 0.0));
        let crhs: Vec<_> = rhs.iter().map(|&v| c(v, 0.0)).collect();
        let sol = hermitian_solve(&hmat, &crhs)?;
        let row: Vec<f64> = sol.iter().map(|z| z.re).collect();
        let mut weights = Vec::with_capacity(num_classes * n);
        for _ in 0..num_classes {
            weights.extend_from_slice(&row);
        }
        Ok(LinearModel {
            weights,
            num_classes,
            num_features: n,
            loss: LossKind::RegularizedLeastSquares { reg },
        })
    }
}
