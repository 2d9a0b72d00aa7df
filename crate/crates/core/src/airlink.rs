//! Active-RIS reflection models and the over-the-air aggregation chain.
//!
//! Covers the exact and small-SI reflection models, the effective channel,
//! gradient normalization and recovery, the per-entry transmit/receive
//! simulation, and the closed-form error and reflect-power expressions the
//! optimizer works with.

use crate::channel::ChannelSet;
use crate::linalg::{c, inverse, sample_complex_gaussian, vdot, vnorm_sq, CMat, C64};
use rand::Rng;
use thiserror::Error;

/// Lower bound on the per-node gradient standard deviation, guarding the
/// normalization against constant gradients.
pub const DELTA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum AirlinkError {
    #[error("reflection loop I - Phi*H is numerically singular (cond {cond:.3e})")]
    SingularReflectionLoop { cond: f64 },
    #[error("operation requires a RIS but mode is None")]
    ModeNone,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("transmit power violation at node {node}: |b|^2 = {actual:.3e} > {budget:.3e}")]
    PowerViolation { node: usize, actual: f64, budget: f64 },
}

/// Operating mode of the reflecting surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RisMode {
    Active,
    Passive,
    None,
}

/// Reflection state: the diagonal of the coefficient matrix plus the mode.
/// Passive mode implies unit-modulus entries; mode `None` drops every RIS
/// term from the chain.
#[derive(Debug, Clone)]
pub struct RisState {
    pub phi: Vec<C64>,
    pub mode: RisMode,
}

impl RisState {
    pub fn active(phi: Vec<C64>) -> Self {
        RisState { phi, mode: RisMode::Active }
    }

    /// Passive state with each entry projected to unit modulus (phase kept).
    pub fn passive(phi: Vec<C64>) -> Self {
        let phi = phi
            .into_iter()
            .map(|z| if z.norm() > 0.0 { z / z.norm() } else { c(1.0, 0.0) })
            .collect();
        RisState { phi, mode: RisMode::Passive }
    }

    pub fn none() -> Self {
        RisState { phi: Vec::new(), mode: RisMode::None }
    }
}

/// Receive beamformer, transmit coefficients, and the power budgets they
/// must respect.
#[derive(Debug, Clone)]
pub struct Transceiver {
    pub m: Vec<C64>,
    pub b: Vec<C64>,
    pub p_node: Vec<f64>,
    pub p_ris: f64,
}

impl Transceiver {
    pub fn check_node_power(&self) -> Result<(), AirlinkError> {
        for (i, (bi, &pi)) in self.b.iter().zip(&self.p_node).enumerate() {
            let actual = bi.norm_sqr();
            if actual > pi * (1.0 + 1e-9) + 1e-30 {
                return Err(AirlinkError::PowerViolation { node: i, actual, budget: pi });
            }
        }
        Ok(())
    }
}

/// Per-node first/second order gradient statistics and shard sizes, assumed
/// known error-free at the server.
#[derive(Debug, Clone)]
pub struct GradientStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub sizes: Vec<u64>,
}

impl GradientStats {
    pub fn num_nodes(&self) -> usize {
        self.sizes.len()
    }

    /// Total number of samples across nodes.
    pub fn total_size(&self) -> f64 {
        self.sizes.iter().map(|&k| k as f64).sum()
    }

    /// Aggregation weight `K_i * delta_i` of node `i`.
    pub fn kdelta(&self, i: usize) -> f64 {
        self.sizes[i] as f64 * self.stds[i]
    }
}

/// Noise variances at the RIS amplifiers and at the server front end.
#[derive(Debug, Clone, Copy)]
pub struct NoiseParams {
    pub sigma_a_sq: f64,
    pub sigma_e_sq: f64,
}

/// Exact reflected signal `(I - Phi H)^{-1} Phi (x_in + z_a)` of an active
/// surface with self-interference.
pub fn exact_ris_output(
    ris: &RisState,
    h_si: &CMat,
    x_in: &[C64],
    z_a: &[C64],
) -> Result<Vec<C64>, AirlinkError> {
    if ris.mode != RisMode::Active {
        return Err(AirlinkError::ModeNone);
    }
    let n = ris.phi.len();
    if h_si.rows() != n || h_si.cols() != n || x_in.len() != n || z_a.len() != n {
        return Err(AirlinkError::DimensionMismatch("exact_ris_output"));
    }
    let phi_h = h_si.diag_mul_left(&ris.phi);
    let loop_mat = CMat::identity(n).sub(&phi_h);
    let inv = inverse(&loop_mat)
        .map_err(|_| AirlinkError::SingularReflectionLoop { cond: f64::INFINITY })?;
    let cond = loop_mat.norm_1() * inv.norm_1();
    if cond > 1e12 {
        return Err(AirlinkError::SingularReflectionLoop { cond });
    }
    let driven: Vec<C64> = x_in.iter().zip(z_a).zip(&ris.phi).map(|((&x, &z), &p)| p * (x + z)).collect();
    Ok(inv.matvec(&driven))
}

/// Effective reflection matrix `Psi`. Active mode uses the first-order SI
/// expansion `(I + Phi H) Phi`; passive mode is the plain diagonal `Phi`.
pub fn effective_ris_matrix(ris: &RisState, h_si: &CMat) -> Result<CMat, AirlinkError> {
    let n = ris.phi.len();
    match ris.mode {
        RisMode::None => Err(AirlinkError::ModeNone),
        RisMode::Passive => Ok(CMat::from_diag(&ris.phi)),
        RisMode::Active => {
            if h_si.rows() != n || h_si.cols() != n {
                return Err(AirlinkError::DimensionMismatch("effective_ris_matrix"));
            }
            let phi_h = h_si.diag_mul_left(&ris.phi);
            Ok(CMat::identity(n).add(&phi_h).diag_mul_right(&ris.phi))
        }
    }
}

/// Equivalent node-to-server channel `h_d + G Psi h_r`; with no RIS this is
/// just the direct link.
pub fn effective_channel(
    h_d: &[C64],
    g_mat: &CMat,
    psi: Option<&CMat>,
    h_r: &[C64],
) -> Result<Vec<C64>, AirlinkError> {
    let Some(psi) = psi else {
        return Ok(h_d.to_vec());
    };
    if g_mat.rows() != h_d.len() || g_mat.cols() != psi.rows() || psi.cols() != h_r.len() {
        return Err(AirlinkError::DimensionMismatch("effective_channel"));
    }
    let reflected = g_mat.matvec(&psi.matvec(h_r));
    Ok(h_d.iter().zip(reflected).map(|(&d, r)| d + r).collect())
}

/// Normalize a gradient to zero mean and unit variance. Returns the
/// sequence together with the mean and the (floored) standard deviation.
///
/// The divisor is `d - 1`, so the normalized sequence has sample variance
/// exactly one whenever the input is not constant.
pub fn normalize_gradient(g: &[f64]) -> (Vec<f64>, f64, f64) {
    let d = g.len();
    assert!(d >= 1, "gradient must be nonempty");
    let mean = g.iter().sum::<f64>() / d as f64;
    let var = if d > 1 {
        g.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (d - 1) as f64
    } else {
        0.0
    };
    let std = var.sqrt().max(DELTA_FLOOR);
    let s = g.iter().map(|&x| (x - mean) / std).collect();
    (s, mean, std)
}

/// Invert [`normalize_gradient`].
pub fn denormalize_gradient(s: &[f64], mean: f64, std: f64) -> Vec<f64> {
    s.iter().map(|&x| x * std + mean).collect()
}

/// Pack a real vector into `ceil(d/2)` complex entries: entry `k` carries
/// `s[k] + j s[k + ceil(d/2)]`, zero-padded when `d` is odd.
pub fn pack_complex(s: &[f64]) -> Vec<C64> {
    let d = s.len();
    let half = d.div_ceil(2);
    (0..half)
        .map(|k| {
            let im = if k + half < d { s[k + half] } else { 0.0 };
            c(s[k], im)
        })
        .collect()
}

/// Invert [`pack_complex`] given the original length.
pub fn unpack_complex(v: &[C64], d: usize) -> Vec<f64> {
    let half = d.div_ceil(2);
    assert_eq!(v.len(), half, "packed length must be ceil(d/2)");
    let mut s = vec![0.0; d];
    for (k, z) in v.iter().enumerate() {
        s[k] = z.re;
        if k + half < d {
            s[k + half] = z.im;
        }
    }
    s
}

/// Precomputed receive-side quantities for a fixed transceiver and channel
/// realization.
struct ChainCoeffs {
    /// `m^H h_{e,i} b_i` per node.
    node: Vec<C64>,
    /// `(G Psi)^H m`; empty when the RIS path is absent.
    ris_noise: Vec<C64>,
}

fn chain_coeffs(
    tx: &Transceiver,
    ch: &ChannelSet,
    ris: &RisState,
) -> Result<ChainCoeffs, AirlinkError> {
    let (g_psi, h_e): (Option<CMat>, Vec<Vec<C64>>) = match ris.mode {
        RisMode::None => (None, ch.h_d.clone()),
        _ => {
            let psi = effective_ris_matrix(ris, &ch.h_si)?;
            let g_psi = ch.g_mat.mul(&psi);
            let h_e = ch
                .h_d
                .iter()
                .zip(&ch.h_r)
                .map(|(hd, hr)| effective_channel(hd, &ch.g_mat, Some(&psi), hr))
                .collect::<Result<Vec<_>, _>>()?;
            (Some(g_psi), h_e)
        }
    };
    let node = h_e.iter().zip(&tx.b).map(|(he, &bi)| vdot(&tx.m, he) * bi).collect();
    let ris_noise = match g_psi {
        Some(gp) => gp.adjoint().matvec(&tx.m),
        None => Vec::new(),
    };
    Ok(ChainCoeffs { node, ris_noise })
}

/// Simulate the AirComp uplink for one block of symbols.
///
/// Each output entry is `m^H sum_i h_{e,i} b_i s_i + m^H (G Psi z_A + z_E)`
/// with fresh noise per entry. Mode `None` drops the RIS path entirely,
/// including the amplifier-noise term.
pub fn aircomp_round(
    signals: &[Vec<C64>],
    tx: &Transceiver,
    ch: &ChannelSet,
    ris: &RisState,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<Vec<C64>, AirlinkError> {
    if signals.len() != tx.b.len() || signals.len() != ch.h_d.len() {
        return Err(AirlinkError::DimensionMismatch("aircomp_round: node count"));
    }
    let len = signals.first().map_or(0, |s| s.len());
    if signals.iter().any(|s| s.len() != len) {
        return Err(AirlinkError::DimensionMismatch("aircomp_round: signal lengths"));
    }
    tx.check_node_power()?;
    let coeffs = chain_coeffs(tx, ch, ris)?;
    let n_elems = ch.num_elements();
    let mut out = Vec::with_capacity(len);
    for l in 0..len {
        let mut y = c(0.0, 0.0);
        for (i, s) in signals.iter().enumerate() {
            y += coeffs.node[i] * s[l];
        }
        if !coeffs.ris_noise.is_empty() {
            let z_a = sample_complex_gaussian(n_elems, noise.sigma_a_sq, rng);
            y += vdot(&coeffs.ris_noise, &z_a);
        }
        let z_e = sample_complex_gaussian(tx.m.len(), noise.sigma_e_sq, rng);
        y += vdot(&tx.m, &z_e);
        out.push(y);
    }
    Ok(out)
}

/// Recover the global gradient estimate from the aggregated sequence:
/// `g_hat = (s_hat + sum_i K_i * gbar_i) / K`.
pub fn recover_global_gradient(s_hat: &[f64], stats: &GradientStats) -> Vec<f64> {
    let k_total = stats.total_size();
    let offset: f64 = stats
        .means
        .iter()
        .zip(&stats.sizes)
        .map(|(&m, &k)| k as f64 * m)
        .sum();
    s_hat.iter().map(|&s| (s + offset) / k_total).collect()
}

/// Closed-form per-entry aggregation error for unit-variance uncorrelated
/// source symbols:
/// `sum_i |m^H h_{e,i} b_i - K_i delta_i|^2 + sigma_A^2 ||m^H G Psi||^2 +
/// sigma_E^2 ||m||^2`. Pass `g_psi = None` when there is no RIS path.
pub fn mse_closed_form(
    tx: &Transceiver,
    h_e: &[Vec<C64>],
    g_psi: Option<&CMat>,
    stats: &GradientStats,
    noise: &NoiseParams,
) -> f64 {
    assert_eq!(h_e.len(), tx.b.len());
    assert_eq!(h_e.len(), stats.num_nodes());
    let misalign: f64 = h_e
        .iter()
        .zip(&tx.b)
        .enumerate()
        .map(|(i, (he, &bi))| (vdot(&tx.m, he) * bi - c(stats.kdelta(i), 0.0)).norm_sqr())
        .sum();
    let ris_noise = match g_psi {
        Some(gp) => noise.sigma_a_sq * vnorm_sq(&gp.adjoint().matvec(&tx.m)),
        None => 0.0,
    };
    misalign + ris_noise + noise.sigma_e_sq * vnorm_sq(&tx.m)
}

/// Expected reflect power of the surface:
/// `sum_i |b_i|^2 ||Psi h_{r,i}||^2 + sigma_A^2 tr(Psi Psi^H)`.
pub fn ris_reflect_power(tx: &Transceiver, psi: &CMat, h_r: &[Vec<C64>], sigma_a_sq: f64) -> f64 {
    assert_eq!(h_r.len(), tx.b.len());
    let signal: f64 = tx
        .b
        .iter()
        .zip(h_r)
        .map(|(&bi, hr)| bi.norm_sqr() * vnorm_sq(&psi.matvec(hr)))
        .sum();
    signal + sigma_a_sq * psi.frob_norm_sq()
}

/// Outcome of one over-the-air aggregation of raw gradients.
pub struct AggregationOutcome {
    pub g_hat: Vec<f64>,
    pub stats: GradientStats,
    /// Closed-form per-entry error prediction for the round.
    pub predicted_mse: f64,
}

/// Full uplink chain for one round of raw local gradients: normalize, pack
/// into complex symbols, transmit, and recover the global estimate.
///
/// Packed symbols carry two gradient entries, so they are scaled by
/// `1/sqrt(2)` on transmit (unit average symbol power) and rescaled at the
/// server; per model entry the error then matches [`mse_closed_form`]
/// divided by `K^2`.
pub fn over_the_air_aggregate(
    grads: &[Vec<f64>],
    sizes: &[u64],
    tx: &Transceiver,
    ch: &ChannelSet,
    ris: &RisState,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<AggregationOutcome, AirlinkError> {
    assert_eq!(grads.len(), sizes.len());
    let d = grads.first().map_or(0, |g| g.len());
    if grads.iter().any(|g| g.len() != d) {
        return Err(AirlinkError::DimensionMismatch("over_the_air_aggregate: gradient lengths"));
    }
    let mut means = Vec::with_capacity(grads.len());
    let mut stds = Vec::with_capacity(grads.len());
    let scale = 1.0 / 2f64.sqrt();
    let signals: Vec<Vec<C64>> = grads
        .iter()
        .map(|g| {
            let (s, mean, std) = normalize_gradient(g);
            means.push(mean);
            stds.push(std);
            pack_complex(&s).into_iter().map(|z| z * scale).collect()
        })
        .collect();
    let stats = GradientStats { means, stds, sizes: sizes.to_vec() };
    let s_hat_c = aircomp_round(&signals, tx, ch, ris, noise, rng)?;
    let rescaled: Vec<C64> = s_hat_c.into_iter().map(|z| z * 2f64.sqrt()).collect();
    let s_hat = unpack_complex(&rescaled, d);
    let g_hat = recover_global_gradient(&s_hat, &stats);

    let predicted_mse = {
        let (g_psi, h_e): (Option<CMat>, Vec<Vec<C64>>) = match ris.mode {
            RisMode::None => (None, ch.h_d.clone()),
            _ => {
                let psi = effective_ris_matrix(ris, &ch.h_si)?;
                let h_e = ch
                    .h_d
                    .iter()
                    .zip(&ch.h_r)
                    .map(|(hd, hr)| effective_channel(hd, &ch.g_mat, Some(&psi), hr))
                    .collect::<Result<Vec<_>, _>>()?;
                (Some(ch.g_mat.mul(&psi)), h_e)
            }
        };
        let k = stats.total_size();
        mse_closed_form(tx, &h_e, g_psi.as_ref(), &stats, noise) / (k * k)
    };

    Ok(AggregationOutcome { g_hat, stats, predicted_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSet;
    use crate::linalg::vsub;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_channelset(m: usize, n: usize, u: usize, nu: f64, rng: &mut ChaCha8Rng) -> ChannelSet {
        let h_d = (0..u).map(|_| sample_complex_gaussian(m, 1.0, rng)).collect();
        let h_r = (0..u).map(|_| sample_complex_gaussian(n, 1.0, rng)).collect();
        let ge = sample_complex_gaussian(m * n, 1.0, rng);
        let g_mat = CMat::from_fn(m, n, |i, j| ge[i * n + j]);
        let se = sample_complex_gaussian(n * n, nu * nu, rng);
        let h_si = CMat::from_fn(n, n, |i, j| se[i * n + j]);
        ChannelSet { h_d, h_r, g_mat, h_si }
    }

    #[test]
    fn exact_output_without_si_is_plain_reflection() {
        let phi = vec![c(2.0, 0.5), c(-1.0, 0.0), c(0.0, 1.5)];
        let ris = RisState::active(phi.clone());
        let h_si = CMat::zeros(3, 3);
        let x = vec![c(1.0, 0.0), c(0.0, 1.0), c(-2.0, 0.5)];
        let z = vec![c(0.1, 0.0), c(0.0, -0.1), c(0.2, 0.2)];
        let out = exact_ris_output(&ris, &h_si, &x, &z).unwrap();
        for i in 0..3 {
            let want = phi[i] * (x[i] + z[i]);
            assert!((out[i] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn exact_output_scalar_geometric_series() {
        let ris = RisState::active(vec![c(2.0, 0.0)]);
        let mut h_si = CMat::zeros(1, 1);
        h_si.set(0, 0, c(0.1, 0.0));
        let out = exact_ris_output(&ris, &h_si, &[c(1.0, 0.0)], &[c(0.0, 0.0)]).unwrap();
        assert!((out[0] - c(2.5, 0.0)).norm() < 1e-12, "got {}", out[0]);
    }

    #[test]
    fn approximation_error_scales_quadratically_in_si() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 8;
        let phi = sample_complex_gaussian(n, 1.0, &mut rng);
        let h0e = sample_complex_gaussian(n * n, 1.0, &mut rng);
        let x = sample_complex_gaussian(n, 1.0, &mut rng);
        let ris = RisState::active(phi);
        let err_at = |nu: f64| {
            let h = CMat::from_fn(n, n, |i, j| h0e[i * n + j] * nu);
            let exact = exact_ris_output(&ris, &h, &x, &vec![c(0.0, 0.0); n]).unwrap();
            let psi = effective_ris_matrix(&ris, &h).unwrap();
            let approx = psi.matvec(&x);
            crate::linalg::vnorm(&vsub(&exact, &approx)) / crate::linalg::vnorm(&exact)
        };
        let e2 = err_at(1e-2);
        let e3 = err_at(1e-3);
        assert!(e2 / e3 >= 50.0, "quadratic decay violated: {e2:.3e} vs {e3:.3e}");
    }

    #[test]
    fn effective_matrix_matches_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let phi = sample_complex_gaussian(n, 1.0, &mut rng);
        let he = sample_complex_gaussian(n * n, 0.01, &mut rng);
        let h_si = CMat::from_fn(n, n, |i, j| he[i * n + j]);
        let ris = RisState::active(phi.clone());
        let psi = effective_ris_matrix(&ris, &h_si).unwrap();
        let phi_m = CMat::from_diag(&phi);
        let want = phi_m.add(&phi_m.mul(&h_si).mul(&phi_m));
        assert!(psi.sub(&want).frob_norm_sq() < 1e-20);
    }

    #[test]
    fn effective_matrix_passive_is_unit_diag() {
        let ris = RisState::passive(vec![c(3.0, 4.0), c(0.0, -2.0)]);
        let psi = effective_ris_matrix(&ris, &CMat::zeros(2, 2)).unwrap();
        for i in 0..2 {
            assert!((psi.at(i, i).norm() - 1.0).abs() < 1e-12);
            for j in 0..2 {
                if i != j {
                    assert_eq!(psi.at(i, j), c(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn effective_matrix_mode_none_rejected() {
        assert_eq!(
            effective_ris_matrix(&RisState::none(), &CMat::zeros(1, 1)),
            Err(AirlinkError::ModeNone)
        );
    }

    #[test]
    fn effective_channel_scalar_case() {
        let mut g = CMat::zeros(1, 1);
        g.set(0, 0, c(2.0, 0.0));
        let mut psi = CMat::zeros(1, 1);
        psi.set(0, 0, c(3.0, 0.0));
        let he = effective_channel(&[c(1.0, 0.0)], &g, Some(&psi), &[c(4.0, 0.0)]).unwrap();
        assert!((he[0] - c(25.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn effective_channel_none_is_direct() {
        let h_d = vec![c(1.0, 2.0), c(-1.0, 0.0)];
        let he = effective_channel(&h_d, &CMat::zeros(2, 3), None, &[c(0.0, 0.0); 3]).unwrap();
        assert_eq!(he, h_d);
    }

    #[test]
    fn effective_channel_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, n) = (3, 4);
        let h_d = sample_complex_gaussian(m, 1.0, &mut rng);
        let h_r = sample_complex_gaussian(n, 1.0, &mut rng);
        let ge = sample_complex_gaussian(m * n, 1.0, &mut rng);
        let pe = sample_complex_gaussian(n * n, 1.0, &mut rng);
        let g = CMat::from_fn(m, n, |i, j| ge[i * n + j]);
        let psi = CMat::from_fn(n, n, |i, j| pe[i * n + j]);
        let got = effective_channel(&h_d, &g, Some(&psi), &h_r).unwrap();
        for i in 0..m {
            let mut want = h_d[i];
            for k in 0..n {
                for l in 0..n {
                    want += g.at(i, k) * psi.at(k, l) * h_r[l];
                }
            }
            assert!((got[i] - want).norm() < 1e-10);
        }
    }

    #[test]
    fn normalize_hand_case() {
        let (s, mean, std) = normalize_gradient(&[1.0, 2.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert!((std - 1.0).abs() < 1e-15);
        assert_eq!(s, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_constant_gradient_uses_floor() {
        let (s, mean, std) = normalize_gradient(&[5.0, 5.0]);
        assert_eq!(mean, 5.0);
        assert_eq!(std, DELTA_FLOOR);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_round_trip() {
        let g = vec![0.3, -1.2, 7.5, 0.0, 2.25];
        let (s, mean, std) = normalize_gradient(&g);
        let back = denormalize_gradient(&s, mean, std);
        for (a, b) in g.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12);
        }
        // sample statistics of the normalized sequence
        let sm = s.iter().sum::<f64>() / s.len() as f64;
        let sv = s.iter().map(|&x| (x - sm).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        assert!(sm.abs() <= 1e-9);
        assert!((sv - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn pack_hand_cases() {
        assert_eq!(pack_complex(&[1.0, 2.0, 3.0, 4.0]), vec![c(1.0, 3.0), c(2.0, 4.0)]);
        assert_eq!(pack_complex(&[7.0]), vec![c(7.0, 0.0)]);
    }

    #[test]
    fn aircomp_perfect_alignment_noiseless() {
        let kdelta = 6.0;
        let stats = GradientStats { means: vec![0.0], stds: vec![3.0], sizes: vec![2] };
        assert_eq!(stats.kdelta(0), kdelta);
        let mut ch = random_channelset(1, 1, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        ch.h_d[0] = vec![c(2.0, 0.0)];
        let tx = Transceiver {
            m: vec![c(kdelta / 2.0, 0.0)],
            b: vec![c(1.0, 0.0)],
            p_node: vec![10.0],
            p_ris: 1.0,
        };
        let noise = NoiseParams { sigma_a_sq: 0.0, sigma_e_sq: 0.0 };
        let s1 = vec![c(0.5, -0.25), c(-1.0, 2.0)];
        let out = aircomp_round(
            &[s1.clone()],
            &tx,
            &ch,
            &RisState::none(),
            &noise,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for (o, s) in out.iter().zip(&s1) {
            assert!((o - s * kdelta).norm() < 1e-12);
        }
    }

    #[test]
    fn aircomp_zero_coefficients_yield_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = random_channelset(2, 3, 2, 0.01, &mut rng);
        let tx = Transceiver {
            m: vec![c(1.0, 0.0), c(0.0, 1.0)],
            b: vec![c(0.0, 0.0); 2],
            p_node: vec![1.0; 2],
            p_ris: 1.0,
        };
        let noise = NoiseParams { sigma_a_sq: 0.0, sigma_e_sq: 0.0 };
        let signals = vec![sample_complex_gaussian(4, 1.0, &mut rng); 2];
        let phi = sample_complex_gaussian(3, 1.0, &mut rng);
        let out =
            aircomp_round(&signals, &tx, &ch, &RisState::active(phi), &noise, &mut rng).unwrap();
        assert!(out.iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn aircomp_rejects_power_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = random_channelset(1, 2, 1, 0.0, &mut rng);
        let tx = Transceiver {
            m: vec![c(1.0, 0.0)],
            b: vec![c(2.0, 0.0)],
            p_node: vec![1.0],
            p_ris: 1.0,
        };
        let noise = NoiseParams { sigma_a_sq: 0.0, sigma_e_sq: 0.0 };
        let res = aircomp_round(&[vec![c(1.0, 0.0)]], &tx, &ch, &RisState::none(), &noise, &mut rng);
        assert!(matches!(res, Err(AirlinkError::PowerViolation { node: 0, .. })));
    }

    #[test]
    fn empirical_mse_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2026);
        let (m, n, u) = (2, 4, 3);
        let ch = random_channelset(m, n, u, 0.05, &mut rng);
        let phi = sample_complex_gaussian(n, 1.0, &mut rng);
        let ris = RisState::active(phi);
        let tx = Transceiver {
            m: sample_complex_gaussian(m, 1.0, &mut rng),
            b: sample_complex_gaussian(u, 0.5, &mut rng),
            p_node: vec![10.0; u],
            p_ris: 100.0,
        };
        let stats = GradientStats {
            means: vec![0.0; u],
            stds: vec![0.8, 1.1, 0.6],
            sizes: vec![2, 3, 1],
        };
        let noise = NoiseParams { sigma_a_sq: 0.3, sigma_e_sq: 0.5 };

        let psi = effective_ris_matrix(&ris, &ch.h_si).unwrap();
        let h_e: Vec<Vec<C64>> = ch
            .h_d
            .iter()
            .zip(&ch.h_r)
            .map(|(hd, hr)| effective_channel(hd, &ch.g_mat, Some(&psi), hr).unwrap())
            .collect();
        let g_psi = ch.g_mat.mul(&psi);
        let closed = mse_closed_form(&tx, &h_e, Some(&g_psi), &stats, &noise);

        let entries = 20_000;
        let signals: Vec<Vec<C64>> =
            (0..u).map(|_| sample_complex_gaussian(entries, 1.0, &mut rng)).collect();
        let out = aircomp_round(&signals, &tx, &ch, &ris, &noise, &mut rng).unwrap();
        let mut acc = 0.0;
        for l in 0..entries {
            let target: C64 = (0..u).map(|i| signals[i][l] * stats.kdelta(i)).sum();
            acc += (out[l] - target).norm_sqr();
        }
        let empirical = acc / entries as f64;
        let rel = (empirical / closed - 1.0).abs();
        assert!(rel < 0.03, "MC vs closed form off by {rel:.4}");
    }

    #[test]
    fn recover_is_exact_when_error_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 64;
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let sizes = [4u64, 2, 6];
        let mut means = Vec::new();
        let mut stds = Vec::new();
        let mut target = vec![0.0; d];
        for (g, &k) in grads.iter().zip(&sizes) {
            let (s, mean, std) = normalize_gradient(g);
            for (t, sv) in target.iter_mut().zip(&s) {
                *t += k as f64 * std * sv;
            }
            means.push(mean);
            stds.push(std);
        }
        let stats = GradientStats { means, stds, sizes: sizes.to_vec() };
        let g_hat = recover_global_gradient(&target, &stats);
        // oracle: plain weighted average of the raw gradients
        let k_total: f64 = sizes.iter().map(|&k| k as f64).sum();
        for j in 0..d {
            let want: f64 =
                grads.iter().zip(&sizes).map(|(g, &k)| k as f64 * g[j]).sum::<f64>() / k_total;
            assert!((g_hat[j] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn recover_trivial_offsets() {
        let stats = GradientStats { means: vec![0.0], stds: vec![1.0], sizes: vec![1] };
        let s_hat = vec![0.5, -2.0];
        assert_eq!(recover_global_gradient(&s_hat, &stats), s_hat);
    }

    #[test]
    fn recovery_error_scales_by_k_squared() {
        let stats =
            GradientStats { means: vec![0.1, -0.4], stds: vec![1.0, 2.0], sizes: vec![3, 5] };
        let k = stats.total_size();
        let s = vec![1.0, 2.0, 3.0];
        let s_hat = vec![1.5, 1.0, 3.25];
        let g = recover_global_gradient(&s, &stats);
        let g_hat = recover_global_gradient(&s_hat, &stats);
        let mse_s: f64 = s.iter().zip(&s_hat).map(|(a, b)| (a - b).powi(2)).sum();
        let mse_g: f64 = g.iter().zip(&g_hat).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((mse_g - mse_s / (k * k)).abs() < 1e-12);
    }

    #[test]
    fn mse_closed_form_zero_beamformer() {
        let stats =
            GradientStats { means: vec![0.0; 2], stds: vec![1.5, 0.5], sizes: vec![2, 4] };
        let tx = Transceiver {
            m: vec![c(0.0, 0.0); 3],
            b: vec![c(1.0, 0.0); 2],
            p_node: vec![1.0; 2],
            p_ris: 1.0,
        };
        let h_e = vec![vec![c(1.0, 0.0); 3]; 2];
        let noise = NoiseParams { sigma_a_sq: 0.7, sigma_e_sq: 0.9 };
        let want = stats.kdelta(0).powi(2) + stats.kdelta(1).powi(2);
        let got = mse_closed_form(&tx, &h_e, None, &stats, &noise);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mse_closed_form_invariant_under_global_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, n, u) = (3, 4, 2);
        let h_e: Vec<Vec<C64>> = (0..u).map(|_| sample_complex_gaussian(m, 1.0, &mut rng)).collect();
        let gpe = sample_complex_gaussian(m * n, 1.0, &mut rng);
        let g_psi = CMat::from_fn(m, n, |i, j| gpe[i * n + j]);
        let stats = GradientStats { means: vec![0.0; u], stds: vec![1.0, 0.5], sizes: vec![2, 2] };
        let noise = NoiseParams { sigma_a_sq: 0.4, sigma_e_sq: 0.2 };
        let base = Transceiver {
            m: sample_complex_gaussian(m, 1.0, &mut rng),
            b: sample_complex_gaussian(u, 1.0, &mut rng),
            p_node: vec![10.0; u],
            p_ris: 1.0,
        };
        let f0 = mse_closed_form(&base, &h_e, Some(&g_psi), &stats, &noise);
        let rot = C64::from_polar(1.0, 1.234);
        let rotated = Transceiver {
            m: base.m.iter().map(|&z| z * rot).collect(),
            b: base.b.iter().map(|&z| z * rot).collect(),
            p_node: base.p_node.clone(),
            p_ris: base.p_ris,
        };
        let f1 = mse_closed_form(&rotated, &h_e, Some(&g_psi), &stats, &noise);
        assert!((f0 - f1).abs() <= 1e-12 * f0.abs().max(1.0));
    }

    #[test]
    fn reflect_power_identity_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 4;
        let h_r = vec![sample_complex_gaussian(n, 1.0, &mut rng)];
        let tx = Transceiver {
            m: vec![c(1.0, 0.0)],
            b: vec![c(1.0, 0.0)],
            p_node: vec![1.0],
            p_ris: 1.0,
        };
        let sigma_a_sq = 0.25;
        let got = ris_reflect_power(&tx, &CMat::identity(n), &h_r, sigma_a_sq);
        let want = vnorm_sq(&h_r[0]) + sigma_a_sq * n as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn reflect_power_zero_cases() {
        let n = 3;
        let h_r = vec![vec![c(1.0, 1.0); n]];
        let tx = Transceiver {
            m: vec![c(1.0, 0.0)],
            b: vec![c(0.0, 0.0)],
            p_node: vec![1.0],
            p_ris: 1.0,
        };
        assert_eq!(ris_reflect_power(&tx, &CMat::identity(n), &h_r, 0.0), 0.0);
    }

    #[test]
    fn reflect_power_matches_simulated_output() {
        // E||r||^2 of the reflected signal with unit-variance symbols.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, u) = (3, 2);
        let h_r: Vec<Vec<C64>> = (0..u).map(|_| sample_complex_gaussian(n, 1.0, &mut rng)).collect();
        let pe = sample_complex_gaussian(n * n, 1.0, &mut rng);
        let psi = CMat::from_fn(n, n, |i, j| pe[i * n + j]);
        let b = sample_complex_gaussian(u, 1.0, &mut rng);
        let sigma_a_sq = 0.5;
        let tx = Transceiver { m: vec![c(1.0, 0.0)], b, p_node: vec![10.0; u], p_ris: 1.0 };
        let closed = ris_reflect_power(&tx, &psi, &h_r, sigma_a_sq);
        let draws = 20_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut x = vec![c(0.0, 0.0); n];
            for i in 0..u {
                let s = sample_complex_gaussian(1, 1.0, &mut rng)[0];
                for k in 0..n {
                    x[k] += h_r[i][k] * tx.b[i] * s;
                }
            }
            let z = sample_complex_gaussian(n, sigma_a_sq, &mut rng);
            let r = psi.matvec(&vadd_local(&x, &z));
            acc += vnorm_sq(&r);
        }
        let rel = (acc / draws as f64 / closed - 1.0).abs();
        assert!(rel < 0.03, "reflect power MC off by {rel:.4}");
    }

    fn vadd_local(a: &[C64], b: &[C64]) -> Vec<C64> {
        a.iter().zip(b).map(|(&x, &y)| x + y).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pack_unpack_round_trip(d in 1usize..50, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let packed = pack_complex(&s);
            prop_assert_eq!(packed.len(), d.div_ceil(2));
            let back = unpack_complex(&packed, d);
            prop_assert_eq!(back, s);
        }

        #[test]
        fn normalize_round_trip_random(d in 2usize..40, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (s, mean, std) = normalize_gradient(&g);
            let back = denormalize_gradient(&s, mean, std);
            for (a, b) in g.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
