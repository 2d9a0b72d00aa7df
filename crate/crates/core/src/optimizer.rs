//! Two-layer alternating optimization of the transceiver and the RIS
//! configuration.
//!
//! The outer layer cycles the closed-form receive beamformer, a
//! dual-decomposition solve for the transmit coefficients, and the RIS
//! update. The RIS update is itself an inner penalty loop that alternates
//! two single-constraint QCQPs (one per copy of the reflection vector)
//! while the penalty weight grows, driving the two copies together.

use crate::airlink::{
    effective_channel, effective_ris_matrix, mse_closed_form, ris_reflect_power, GradientStats,
    NoiseParams, RisMode, RisState, Transceiver,
};
use crate::channel::ChannelSet;
use crate::linalg::{
    c, cholesky, cholesky_solve, hermitian_solve, vdot, vhadamard, vnorm, vnorm_sq, vscale, vsub,
    CMat, C64, LinalgError,
};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("receive covariance is singular (needs sigma_E^2 > 0 or full-rank signal part)")]
    SingularR,
    #[error("RIS noise floor alone exceeds the reflect budget ({floor:.3e} > {budget:.3e})")]
    InfeasibleRisBudget { floor: f64, budget: f64 },
    #[error("constraint cannot be met at any multiplier (constant part {constant:.3e} > budget {budget:.3e})")]
    NoFeasiblePoint { constant: f64, budget: f64 },
    #[error("multiplier search failed to bracket the active constraint")]
    BracketFailure,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Knobs of the alternating optimization. Tolerances are relative.
#[derive(Debug, Clone)]
pub struct AoConfig {
    pub outer_tol: f64,
    pub outer_max_iters: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub tau0: f64,
    pub tau_growth: f64,
    pub tau_max: f64,
    pub bisect_tol: f64,
    pub lambda_grid_points: usize,
    /// Treat the power constraint as an equality whenever a nonnegative
    /// multiplier can enforce it (off by default; with it off the
    /// constraint binds only when the unconstrained solution violates it).
    pub force_active_constraint: bool,
}

impl Default for AoConfig {
    fn default() -> Self {
        AoConfig {
            outer_tol: 1e-6,
            outer_max_iters: 50,
            inner_tol: 1e-4,
            inner_max_iters: 200,
            tau0: 1.0,
            tau_growth: 1.1,
            tau_max: 1e6,
            bisect_tol: 1e-8,
            lambda_grid_points: 200,
            force_active_constraint: false,
        }
    }
}

/// One single-constraint QCQP: minimize `x^H A x - x^H v - v^H x` subject
/// to `x^H B x + q^H x + x^H q + const_term <= budget`, with `A` Hermitian
/// positive definite and `B` Hermitian positive semidefinite.
#[derive(Debug, Clone)]
pub struct QcqpInstance {
    pub a_mat: CMat,
    pub b_mat: CMat,
    pub v: Vec<C64>,
    pub q: Vec<C64>,
    pub const_term: f64,
    pub budget: f64,
}

impl QcqpInstance {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn objective(&self, x: &[C64]) -> f64 {
        let quad = vdot(x, &self.a_mat.matvec(x)).re;
        quad - 2.0 * vdot(&self.v, x).re
    }

    pub fn constraint_value(&self, x: &[C64]) -> f64 {
        vdot(x, &self.b_mat.matvec(x)).re + 2.0 * vdot(&self.q, x).re + self.const_term
    }

    fn has_trivial_constraint(&self) -> bool {
        self.b_mat.frob_norm_sq() == 0.0 && self.q.iter().all(|z| z.norm_sqr() == 0.0)
    }
}

/// Solution of [`solve_qcqp_kkt`], with the multiplier and the achieved
/// constraint value kept for slackness checks.
#[derive(Debug, Clone)]
pub struct QcqpSolution {
    pub x: Vec<C64>,
    pub lambda: f64,
    pub constraint_value: f64,
    pub objective: f64,
}

fn stationary_point(inst: &QcqpInstance, lambda: f64) -> Result<Vec<C64>, OptimError> {
    let mut mat = inst.a_mat.clone();
    if lambda != 0.0 {
        mat = mat.add(&inst.b_mat.scale(c(lambda, 0.0)));
    }
    let rhs: Vec<C64> =
        inst.v.iter().zip(&inst.q).map(|(&v, &q)| v - q * lambda).collect();
    Ok(hermitian_solve(&mat, &rhs)?)
}

/// Solve the QCQP through its KKT conditions: the stationary point is
/// `x(lambda) = (A + lambda B)^{-1} (v - lambda q)`, with `lambda = 0` when
/// the constraint is slack there and otherwise the root of the (decreasing)
/// constraint value, found by bisection. When `B` is well-conditioned PD the
/// bracket comes from the closed-form bound `sqrt(v^H B^{-1} v / budget)`;
/// otherwise the bracket is grown by doubling, falling back to a dense
/// log-spaced multiplier grid if the constraint value ever increases.
pub fn solve_qcqp_kkt(inst: &QcqpInstance, cfg: &AoConfig) -> Result<QcqpSolution, OptimError> {
    let n = inst.dim();
    if inst.a_mat.rows() != n || inst.b_mat.rows() != n || inst.q.len() != n {
        return Err(OptimError::DimensionMismatch("solve_qcqp_kkt"));
    }
    let x0 = stationary_point(inst, 0.0)?;
    let g0 = inst.constraint_value(&x0);
    let slack_ok = g0 <= inst.budget * (1.0 + 1e-12) + 1e-30;
    if slack_ok && !cfg.force_active_constraint {
        let objective = inst.objective(&x0);
        return Ok(QcqpSolution { x: x0, lambda: 0.0, constraint_value: g0, objective });
    }
    if inst.has_trivial_constraint() {
        if slack_ok {
            // force_active requested but the constraint does not depend on x
            let objective = inst.objective(&x0);
            return Ok(QcqpSolution { x: x0, lambda: 0.0, constraint_value: g0, objective });
        }
        return Err(OptimError::NoFeasiblePoint { constant: inst.const_term, budget: inst.budget });
    }
    if slack_ok {
        // force_active_constraint: increasing lambda only loosens further,
        // so the equality is unreachable; keep the slack solution.
        let objective = inst.objective(&x0);
        return Ok(QcqpSolution { x: x0, lambda: 0.0, constraint_value: g0, objective });
    }

    // Bracket [lo, hi] with g(lo) > budget >= g(hi).
    let mut lo = 0.0f64;
    let mut hi = None;
    if let Some(bound) = pd_lambda_bound(inst) {
        let g = inst.constraint_value(&stationary_point(inst, bound)?);
        if g <= inst.budget {
            hi = Some(bound);
        }
    }
    if hi.is_none() {
        let mut lambda = 1.0;
        let mut prev_g = g0;
        for _ in 0..200 {
            let g = inst.constraint_value(&stationary_point(inst, lambda)?);
            if g > prev_g * (1.0 + 1e-9) + 1e-30 {
                return grid_search_multiplier(inst, cfg, lambda);
            }
            if g <= inst.budget {
                hi = Some(lambda);
                break;
            }
            lo = lambda;
            prev_g = g;
            lambda *= 2.0;
        }
    }
    let Some(mut hi) = hi else {
        return Err(OptimError::BracketFailure);
    };

    let tol = cfg.bisect_tol * inst.budget.abs().max(1e-30);
    let mut best: Option<(f64, Vec<C64>, f64)> = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let x = stationary_point(inst, mid)?;
        let g = inst.constraint_value(&x);
        if g <= inst.budget {
            hi = mid;
            best = Some((mid, x, g));
            if inst.budget - g <= tol {
                break;
            }
        } else {
            lo = mid;
        }
        if (hi - lo) <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    let (lambda, x, g) = match best {
        Some(b) => b,
        None => {
            let x = stationary_point(inst, hi)?;
            let g = inst.constraint_value(&x);
            (hi, x, g)
        }
    };
    let objective = inst.objective(&x);
    Ok(QcqpSolution { x, lambda, constraint_value: g, objective })
}

/// Closed-form multiplier bound for positive definite `B`, skipped when the
/// factor looks ill-conditioned.
fn pd_lambda_bound(inst: &QcqpInstance) -> Option<f64> {
    if inst.budget <= 0.0 {
        return None;
    }
    let l = cholesky(&inst.b_mat).ok()?;
    let diag: Vec<f64> = (0..l.rows()).map(|i| l.at(i, i).re).collect();
    let dmax = diag.iter().cloned().fold(0.0f64, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmin > 0.0) || (dmax / dmin).powi(2) > 1e10 {
        return None;
    }
    let y = cholesky_solve(&l, &inst.v);
    let quad = vdot(&inst.v, &y).re;
    if quad <= 0.0 {
        return None;
    }
    Some((quad / inst.budget).sqrt())
}

/// Fallback for a non-monotone bracket: scan a dense log-spaced multiplier
/// grid, keep the best feasible point, and polish between the neighbours of
/// the feasibility transition.
fn grid_search_multiplier(
    inst: &QcqpInstance,
    cfg: &AoConfig,
    hint: f64,
) -> Result<QcqpSolution, OptimError> {
    let points = cfg.lambda_grid_points.max(8);
    let lo_exp = -10.0f64;
    let hi_exp = (hint.max(1.0) * 1e8).log10();
    let mut best: Option<(f64, Vec<C64>, f64, f64)> = None;
    let mut prev_infeasible: Option<f64> = Some(0.0);
    let mut transition: Option<(f64, f64)> = None;
    for k in 0..points {
        let e = lo_exp + (hi_exp - lo_exp) * k as f64 / (points - 1) as f64;
        let lambda = 10f64.powf(e);
        let x = stationary_point(inst, lambda)?;
        let g = inst.constraint_value(&x);
        if g <= inst.budget {
            let obj = inst.objective(&x);
            let better = best.as_ref().map_or(true, |b| obj < b.3);
            if better {
                best = Some((lambda, x, g, obj));
            }
            if transition.is_none() {
                if let Some(plo) = prev_infeasible {
                    transition = Some((plo, lambda));
                }
            }
        } else {
            prev_infeasible = Some(lambda);
        }
    }
    if let Some((mut lo, mut hi)) = transition {
        let tol = cfg.bisect_tol * inst.budget.abs().max(1e-30);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let x = stationary_point(inst, mid)?;
            let g = inst.constraint_value(&x);
            if g <= inst.budget {
                hi = mid;
                let obj = inst.objective(&x);
                best = Some((mid, x, g, obj));
                if inst.budget - g <= tol {
                    break;
                }
            } else {
                lo = mid;
            }
        }
    }
    match best {
        Some((lambda, x, g, objective)) => {
            Ok(QcqpSolution { x, lambda, constraint_value: g, objective })
        }
        None => Err(OptimError::NoFeasiblePoint { constant: inst.const_term, budget: inst.budget }),
    }
}

/// Closed-form receive beamformer `R^{-1} sum_i h_{e,i} b_i K_i delta_i`
/// with `R = sum |b_i|^2 h_e h_e^H + sigma_A^2 (G Psi)(G Psi)^H +
/// sigma_E^2 I`.
pub fn optimal_receive_beamformer(
    h_e: &[Vec<C64>],
    b: &[C64],
    g_psi: Option<&CMat>,
    stats: &GradientStats,
    noise: &NoiseParams,
) -> Result<Vec<C64>, OptimError> {
    let m_dim = h_e.first().map_or(0, |h| h.len());
    if h_e.len() != b.len() || h_e.len() != stats.num_nodes() {
        return Err(OptimError::DimensionMismatch("optimal_receive_beamformer"));
    }
    let mut r = CMat::identity(m_dim).scale(c(noise.sigma_e_sq, 0.0));
    for (he, &bi) in h_e.iter().zip(b) {
        r.add_scaled_outer(he, bi.norm_sqr());
    }
    if let Some(gp) = g_psi {
        let gpa = gp.mul(&gp.adjoint()).scale(c(noise.sigma_a_sq, 0.0));
        r = r.add(&gpa);
    }
    let mut rhs = vec![c(0.0, 0.0); m_dim];
    for (i, (he, &bi)) in h_e.iter().zip(b).enumerate() {
        let w = bi * stats.kdelta(i);
        for (dst, &h) in rhs.iter_mut().zip(he) {
            *dst += h * w;
        }
    }
    hermitian_solve(&r, &rhs).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => OptimError::SingularR,
        other => other.into(),
    })
}

/// Transmit coefficients by dual decomposition on the coupled reflect-power
/// constraint.
///
/// For a multiplier `lambda >= 0` the per-node minimizer is
/// `c_i^* t_i / (|c_i|^2 + lambda rho_i)` magnitude-clipped to `sqrt(P_i)`
/// with the phase kept, where `c_i = m^H h_{e,i}`, `t_i = K_i delta_i`, and
/// `rho_i = ||Psi h_{r,i}||^2`. The coupled constraint value is decreasing
/// in the multiplier, so bisection lands on complementary slackness.
#[allow(clippy::too_many_arguments)]
pub fn solve_transmit_coeffs(
    m: &[C64],
    h_e: &[Vec<C64>],
    psi_hr_norms: &[f64],
    stats: &GradientStats,
    p_node: &[f64],
    p_ris: f64,
    sigma_a_sq: f64,
    psi_frob_sq: f64,
    cfg: &AoConfig,
) -> Result<Vec<C64>, OptimError> {
    let u = h_e.len();
    if psi_hr_norms.len() != u || p_node.len() != u || stats.num_nodes() != u {
        return Err(OptimError::DimensionMismatch("solve_transmit_coeffs"));
    }
    let coeff: Vec<C64> = h_e.iter().map(|he| vdot(m, he)).collect();
    let targets: Vec<f64> = (0..u).map(|i| stats.kdelta(i)).collect();

    let avail = if p_ris.is_finite() {
        let floor = sigma_a_sq * psi_frob_sq;
        if floor > p_ris * (1.0 + 1e-9) {
            return Err(OptimError::InfeasibleRisBudget { floor, budget: p_ris });
        }
        Some(p_ris - floor)
    } else {
        None
    };

    let b_at = |lambda: f64| -> Vec<C64> {
        (0..u)
            .map(|i| {
                let cn = coeff[i].norm();
                if cn == 0.0 {
                    return c(0.0, 0.0);
                }
                // guard inf * 0 when a node does not load the surface
                let penalty = if psi_hr_norms[i] > 0.0 { lambda * psi_hr_norms[i] } else { 0.0 };
                let denom = cn * cn + penalty;
                let mag = (targets[i] * cn / denom).min(p_node[i].sqrt());
                C64::from_polar(mag, -coeff[i].arg())
            })
            .collect()
    };
    let coupled = |b: &[C64]| -> f64 {
        b.iter().zip(psi_hr_norms).map(|(bi, &rho)| bi.norm_sqr() * rho).sum()
    };

    let b0 = b_at(0.0);
    let Some(avail) = avail else {
        return Ok(b0);
    };
    if coupled(&b0) <= avail * (1.0 + 1e-12) + 1e-30 {
        return Ok(b0);
    }

    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..400 {
        if coupled(&b_at(hi)) <= avail {
            break;
        }
        lo = hi;
        hi *= 4.0;
    }
    let tol = cfg.bisect_tol * avail.max(1e-30);
    let mut best = b_at(hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let b = b_at(mid);
        let g = coupled(&b);
        if g <= avail {
            hi = mid;
            best = b;
            if avail - g <= tol {
                break;
            }
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    Ok(best)
}

/// Context shared by the two RIS subproblem builders.
struct RisCtx<'a> {
    m: &'a [C64],
    b: &'a [C64],
    ch: &'a ChannelSet,
    /// Self-interference matrix used for the update (zeroed in passive mode).
    h_si: &'a CMat,
    stats: &'a GradientStats,
    noise: &'a NoiseParams,
}

/// Assemble the QCQP over the main reflection vector with the auxiliary copy
/// fixed.
pub fn build_phi_subproblem(
    m: &[C64],
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    phi_tilde: &[C64],
    stats: &GradientStats,
    noise: &NoiseParams,
    tau: f64,
    budget: f64,
) -> QcqpInstance {
    let ctx = RisCtx { m, b, ch, h_si, stats, noise };
    build_phi_inner(&ctx, phi_tilde, tau, budget)
}

fn build_phi_inner(ctx: &RisCtx, phi_tilde: &[C64], tau: f64, budget: f64) -> QcqpInstance {
    let n = ctx.ch.num_elements();
    let omega = CMat::identity(n).add(&ctx.h_si.diag_mul_left(phi_tilde));
    let g_adj_m = ctx.ch.g_mat.adjoint().matvec(ctx.m);
    // w = Omega^H G^H m
    let w = omega.adjoint().matvec(&g_adj_m);

    let mut a_mat = CMat::identity(n).scale(c(tau, 0.0));
    for i in 0..n {
        let v = a_mat.at(i, i) + c(ctx.noise.sigma_a_sq * w[i].norm_sqr(), 0.0);
        a_mat.set(i, i, v);
    }
    let mut v1: Vec<C64> = vscale(phi_tilde, c(tau, 0.0));

    let s = omega.adjoint().mul(&omega);
    let mut b_mat = s.hadamard_identity().scale(c(ctx.noise.sigma_a_sq, 0.0));

    for i in 0..ctx.b.len() {
        let hr_conj: Vec<C64> = ctx.ch.h_r[i].iter().map(|z| z.conj()).collect();
        let a_i: Vec<C64> = hr_conj
            .iter()
            .zip(&w)
            .map(|(&hc, &wn)| hc * ctx.b[i].conj() * wn)
            .collect();
        a_mat.add_scaled_outer(&a_i, 1.0);
        let beta = c(ctx.stats.kdelta(i), 0.0) - vdot(ctx.m, &ctx.ch.h_d[i]) * ctx.b[i];
        for (dst, &ai) in v1.iter_mut().zip(&a_i) {
            *dst += beta * ai;
        }
        let sandwich = s.diag_mul_left(&hr_conj).diag_mul_right(&ctx.ch.h_r[i]);
        b_mat = b_mat.add(&sandwich.scale(c(ctx.b[i].norm_sqr(), 0.0)));
    }

    QcqpInstance { a_mat, b_mat, v: v1, q: vec![c(0.0, 0.0); n], const_term: 0.0, budget }
}

/// Assemble the QCQP over the auxiliary reflection copy with the main vector
/// fixed. The constraint picks up a linear term and a constant because the
/// auxiliary copy only enters through the self-interference product.
pub fn build_phitilde_subproblem(
    m: &[C64],
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    phi: &[C64],
    stats: &GradientStats,
    noise: &NoiseParams,
    tau: f64,
    budget: f64,
) -> QcqpInstance {
    let ctx = RisCtx { m, b, ch, h_si, stats, noise };
    build_phitilde_inner(&ctx, phi, tau, budget)
}

fn build_phitilde_inner(ctx: &RisCtx, phi: &[C64], tau: f64, budget: f64) -> QcqpInstance {
    let n = ctx.ch.num_elements();
    let g_adj_m = ctx.ch.g_mat.adjoint().matvec(ctx.m);
    let row_mg: Vec<C64> = g_adj_m.iter().map(|z| z.conj()).collect();
    let phi_conj: Vec<C64> = phi.iter().map(|z| z.conj()).collect();

    // sigma_A^2 quadratic part: Z^H Z with Z = Phi H^T diag(m^H G)
    let z = ctx.h_si.transpose().diag_mul_left(phi).diag_mul_right(&row_mg);
    let mut a_mat = z.adjoint().mul(&z).scale(c(ctx.noise.sigma_a_sq, 0.0));
    for i in 0..n {
        let v = a_mat.at(i, i) + c(tau, 0.0);
        a_mat.set(i, i, v);
    }

    // D = Phi (sum |b_i|^2 h_r h_r^H + sigma_A^2 I) Phi^H
    let mut inner = CMat::identity(n).scale(c(ctx.noise.sigma_a_sq, 0.0));
    for (bi, hr) in ctx.b.iter().zip(&ctx.ch.h_r) {
        inner.add_scaled_outer(hr, bi.norm_sqr());
    }
    let d_mat = inner.diag_mul_left(phi).diag_mul_right(&phi_conj);
    let b_mat = ctx.h_si.mul(&d_mat).mul(&ctx.h_si.adjoint()).hadamard_identity();
    let q: Vec<C64> = (0..n)
        .map(|r| {
            (0..n).map(|k| d_mat.at(r, k) * ctx.h_si.at(r, k).conj()).sum()
        })
        .collect();
    let const_term = d_mat.trace().re;

    let mut v2: Vec<C64> = vscale(phi, c(tau, 0.0));
    // - sigma_A^2 diag(m^H G Phi Phi^H H^H) G^H m
    for (r, dst) in v2.iter_mut().enumerate() {
        let mut acc = c(0.0, 0.0);
        for k in 0..n {
            acc += row_mg[k] * c(phi[k].norm_sqr(), 0.0) * ctx.h_si.at(r, k).conj();
        }
        *dst -= acc * g_adj_m[r] * ctx.noise.sigma_a_sq;
    }
    for i in 0..ctx.b.len() {
        let y_i = vhadamard(phi, &ctx.ch.h_r[i]);
        let p_i = vscale(&ctx.h_si.matvec(&y_i), ctx.b[i]);
        let a_t: Vec<C64> = p_i.iter().zip(&g_adj_m).map(|(&p, &g)| p.conj() * g).collect();
        a_mat.add_scaled_outer(&a_t, 1.0);
        let he0: Vec<C64> = ctx
            .ch
            .h_d[i]
            .iter()
            .zip(ctx.ch.g_mat.matvec(&y_i))
            .map(|(&hd, gy)| hd + gy)
            .collect();
        let beta = c(ctx.stats.kdelta(i), 0.0) - vdot(ctx.m, &he0) * ctx.b[i];
        for (dst, &at) in v2.iter_mut().zip(&a_t) {
            *dst += beta * at;
        }
    }

    QcqpInstance { a_mat, b_mat, v: v2, q, const_term, budget }
}

/// Split objective of the penalty reformulation, evaluated directly from the
/// signal-model expressions (kept independent of the subproblem assembly).
#[allow(clippy::too_many_arguments)]
pub fn penalized_objective(
    m: &[C64],
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    stats: &GradientStats,
    noise: &NoiseParams,
    phi: &[C64],
    phi_tilde: &[C64],
    tau: f64,
) -> f64 {
    let n = ch.num_elements();
    let omega = CMat::identity(n).add(&h_si.diag_mul_left(phi_tilde));
    let psi = omega.diag_mul_right(phi);
    let mut total = 0.0;
    for i in 0..b.len() {
        let h_e = effective_channel(&ch.h_d[i], &ch.g_mat, Some(&psi), &ch.h_r[i]).unwrap();
        total += (vdot(m, &h_e) * b[i] - c(stats.kdelta(i), 0.0)).norm_sqr();
    }
    let g_psi = ch.g_mat.mul(&psi);
    total += noise.sigma_a_sq * vnorm_sq(&g_psi.adjoint().matvec(m));
    total += tau * vnorm_sq(&vsub(phi, phi_tilde));
    total
}

/// Split reflect-power constraint of the penalty reformulation, evaluated
/// directly.
pub fn split_reflect_power(
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    noise: &NoiseParams,
    phi: &[C64],
    phi_tilde: &[C64],
) -> f64 {
    let n = ch.num_elements();
    let omega = CMat::identity(n).add(&h_si.diag_mul_left(phi_tilde));
    let psi = omega.diag_mul_right(phi);
    let mut total = noise.sigma_a_sq * psi.frob_norm_sq();
    for (bi, hr) in b.iter().zip(&ch.h_r) {
        total += bi.norm_sqr() * vnorm_sq(&psi.matvec(hr));
    }
    total
}

/// Reflect power of the single-variable constraint (both copies equal).
fn reflect_power_at(
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    noise: &NoiseParams,
    phi: &[C64],
) -> f64 {
    split_reflect_power(b, ch, h_si, noise, phi, phi)
}

/// Outcome of the inner penalty loop.
#[derive(Debug, Clone)]
pub struct PhiLoopOutcome {
    pub phi: Vec<C64>,
    /// Final relative distance between the two reflection copies.
    pub gap: f64,
    pub stalled: bool,
    pub iters: usize,
    /// Penalized objective evaluated before, between, and after the two
    /// half-steps of each pass (fixed penalty weight within a pass).
    pub surrogate_trace: Vec<[f64; 3]>,
}

/// Inner penalty loop: alternate the two reflection QCQPs while growing the
/// penalty weight until the copies agree, then re-project onto the true
/// constraint if the split approximation left it violated.
#[allow(clippy::too_many_arguments)]
pub fn penalty_phi_loop(
    m: &[C64],
    b: &[C64],
    ch: &ChannelSet,
    h_si: &CMat,
    stats: &GradientStats,
    noise: &NoiseParams,
    phi_init: &[C64],
    budget: f64,
    passive_projection: bool,
    cfg: &AoConfig,
) -> Result<PhiLoopOutcome, OptimError> {
    let ctx = RisCtx { m, b, ch, h_si, stats, noise };
    let mut phi = phi_init.to_vec();
    let mut phi_tilde = phi.clone();
    let mut tau = cfg.tau0;
    let mut gap = f64::INFINITY;
    let mut iters = 0;
    let mut surrogate_trace = Vec::new();
    for _ in 0..cfg.inner_max_iters {
        iters += 1;
        let before = penalized_objective(m, b, ch, h_si, stats, noise, &phi, &phi_tilde, tau);
        let inst1 = build_phi_inner(&ctx, &phi_tilde, tau, budget);
        phi = solve_qcqp_kkt(&inst1, cfg)?.x;
        if passive_projection {
            for z in &mut phi {
                let r = z.norm();
                *z = if r > 0.0 { *z / r } else { c(1.0, 0.0) };
            }
        }
        let mid = penalized_objective(m, b, ch, h_si, stats, noise, &phi, &phi_tilde, tau);
        let inst2 = build_phitilde_inner(&ctx, &phi, tau, budget);
        phi_tilde = solve_qcqp_kkt(&inst2, cfg)?.x;
        let after = penalized_objective(m, b, ch, h_si, stats, noise, &phi, &phi_tilde, tau);
        surrogate_trace.push([before, mid, after]);

        gap = vnorm(&vsub(&phi, &phi_tilde)) / vnorm(&phi).max(1.0);
        if gap <= cfg.inner_tol {
            break;
        }
        tau *= cfg.tau_growth;
        if tau > cfg.tau_max {
            break;
        }
    }
    let stalled = gap > 10.0 * cfg.inner_tol && iters >= cfg.inner_max_iters;

    // Final feasibility: the split constraint was enforced at (phi, phi_tilde),
    // but the deliverable is a single vector; shrink it if the true
    // constraint ended up violated.
    if budget.is_finite() {
        let mut power = reflect_power_at(b, ch, h_si, noise, &phi);
        if power > budget * (1.0 + 1e-9) {
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                let scaled = vscale(&phi, c(mid, 0.0));
                if reflect_power_at(b, ch, h_si, noise, &scaled) <= budget {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            phi = vscale(&phi, c(lo, 0.0));
            power = reflect_power_at(b, ch, h_si, noise, &phi);
            debug_assert!(power <= budget * (1.0 + 1e-6));
        }
    }

    Ok(PhiLoopOutcome { phi, gap, stalled, iters, surrogate_trace })
}

/// Per-step error values recorded across one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AoStep {
    ReceiveBeamformer,
    TransmitCoeffs,
    RisUpdate,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: AoStep,
    pub mse: f64,
}

/// Result of the full alternating optimization.
#[derive(Debug, Clone)]
pub struct AoResult {
    pub m: Vec<C64>,
    pub b: Vec<C64>,
    pub phi: Vec<C64>,
    /// Closed-form error after each outer iteration.
    pub mse_trace: Vec<f64>,
    /// Closed-form error after every individual update step.
    pub step_trace: Vec<StepRecord>,
    pub feasible: bool,
    pub iters_used: usize,
    /// RIS steps whose error increased beyond the monotonicity slack.
    pub phi_increases: usize,
    pub phi_steps: usize,
    pub inner_stalls: usize,
}

/// Power budgets of the nodes and of the active surface.
#[derive(Debug, Clone)]
pub struct Powers {
    pub p_node: Vec<f64>,
    pub p_ris: f64,
}

fn principal_direction(h_d: &[Vec<C64>]) -> Vec<C64> {
    let m_dim = h_d[0].len();
    let mut cov = CMat::zeros(m_dim, m_dim);
    for h in h_d {
        cov.add_scaled_outer(h, 1.0);
    }
    let mut v = h_d[0].clone();
    if vnorm(&v) == 0.0 {
        v = vec![c(0.0, 0.0); m_dim];
        v[0] = c(1.0, 0.0);
    }
    let norm = vnorm(&v);
    v = vscale(&v, c(1.0 / norm, 0.0));
    for _ in 0..100 {
        let next = cov.matvec(&v);
        let norm = vnorm(&next);
        if norm == 0.0 {
            break;
        }
        let next = vscale(&next, c(1.0 / norm, 0.0));
        let delta = vnorm(&vsub(&next, &v));
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    v
}

struct LinkState {
    psi: Option<CMat>,
    g_psi: Option<CMat>,
    h_e: Vec<Vec<C64>>,
}

fn link_state(ch: &ChannelSet, ris: &RisState, h_si: &CMat) -> Result<LinkState, OptimError> {
    match ris.mode {
        RisMode::None => Ok(LinkState { psi: None, g_psi: None, h_e: ch.h_d.clone() }),
        _ => {
            let psi = effective_ris_matrix(ris, h_si)
                .map_err(|_| OptimError::DimensionMismatch("link_state"))?;
            let g_psi = ch.g_mat.mul(&psi);
            let h_e = ch
                .h_d
                .iter()
                .zip(&ch.h_r)
                .map(|(hd, hr)| effective_channel(hd, &ch.g_mat, Some(&psi), hr).unwrap())
                .collect();
            Ok(LinkState { psi: Some(psi), g_psi: Some(g_psi), h_e })
        }
    }
}

/// Joint transceiver and RIS design: cycle the beamformer, transmit, and
/// RIS updates until the closed-form error stops improving.
pub fn alternating_optimize(
    ch: &ChannelSet,
    mode: RisMode,
    stats: &GradientStats,
    powers: &Powers,
    noise: &NoiseParams,
    cfg: &AoConfig,
    rng: &mut impl Rng,
) -> Result<AoResult, OptimError> {
    let u = ch.num_nodes();
    let n = ch.num_elements();
    if powers.p_node.len() != u || stats.num_nodes() != u {
        return Err(OptimError::DimensionMismatch("alternating_optimize"));
    }
    let zero_si = CMat::zeros(n, n);
    let (h_si, budget): (&CMat, f64) = match mode {
        RisMode::Active => (&ch.h_si, powers.p_ris),
        RisMode::Passive => (&zero_si, f64::INFINITY),
        RisMode::None => (&zero_si, f64::INFINITY),
    };

    // Warm start: beamformer along the dominant direct direction, transmit
    // coefficients phase-aligned at full node power, and (for the active
    // surface) random phases at the largest uniformly feasible amplitude.
    let m0 = principal_direction(&ch.h_d);
    let b0: Vec<C64> = ch
        .h_d
        .iter()
        .zip(&powers.p_node)
        .map(|(hd, &p)| {
            let ci = vdot(&m0, hd);
            if ci.norm() > 0.0 {
                C64::from_polar(p.sqrt(), -ci.arg())
            } else {
                c(p.sqrt(), 0.0)
            }
        })
        .collect();
    let mut ris = match mode {
        RisMode::None => RisState::none(),
        RisMode::Passive => {
            let phi = (0..n)
                .map(|_| C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            RisState { phi, mode: RisMode::Passive }
        }
        RisMode::Active => {
            let unit: Vec<C64> = (0..n)
                .map(|_| C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            let power_at = |amp: f64| {
                let scaled = vscale(&unit, c(amp, 0.0));
                reflect_power_at(&b0, ch, h_si, noise, &scaled)
            };
            let mut hi = 1.0f64;
            for _ in 0..200 {
                if power_at(hi) >= powers.p_ris {
                    break;
                }
                hi *= 2.0;
            }
            let mut lo = 0.0f64;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if power_at(mid) <= powers.p_ris {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            RisState::active(vscale(&unit, c(lo, 0.0)))
        }
    };

    let mut m = m0;
    let mut b = b0;
    let mut link = link_state(ch, &ris, h_si)?;
    let mut mse_trace = Vec::new();
    let mut step_trace = Vec::new();
    let mut phi_increases = 0;
    let mut phi_steps = 0;
    let mut inner_stalls = 0;
    let mut prev_mse = f64::INFINITY;
    let mut iters_used = 0;

    let eval_mse = |m: &[C64], b: &[C64], link: &LinkState| {
        let tx = Transceiver {
            m: m.to_vec(),
            b: b.to_vec(),
            p_node: powers.p_node.clone(),
            p_ris: powers.p_ris,
        };
        mse_closed_form(&tx, &link.h_e, link.g_psi.as_ref(), stats, noise)
    };

    for outer in 1..=cfg.outer_max_iters {
        iters_used = outer;

        m = optimal_receive_beamformer(&link.h_e, &b, link.g_psi.as_ref(), stats, noise)?;
        step_trace.push(StepRecord { step: AoStep::ReceiveBeamformer, mse: eval_mse(&m, &b, &link) });

        let (rho, frob): (Vec<f64>, f64) = match &link.psi {
            Some(psi) => (
                ch.h_r.iter().map(|hr| vnorm_sq(&psi.matvec(hr))).collect(),
                psi.frob_norm_sq(),
            ),
            None => (vec![0.0; u], 0.0),
        };
        let effective_p_ris = if mode == RisMode::Active { powers.p_ris } else { f64::INFINITY };
        b = solve_transmit_coeffs(
            &m,
            &link.h_e,
            &rho,
            stats,
            &powers.p_node,
            effective_p_ris,
            noise.sigma_a_sq,
            frob,
            cfg,
        )?;
        step_trace.push(StepRecord { step: AoStep::TransmitCoeffs, mse: eval_mse(&m, &b, &link) });

        if mode != RisMode::None {
            let before = step_trace.last().unwrap().mse;
            let outcome = penalty_phi_loop(
                &m,
                &b,
                ch,
                h_si,
                stats,
                noise,
                &ris.phi,
                budget,
                mode == RisMode::Passive,
                cfg,
            )?;
            if outcome.stalled {
                inner_stalls += 1;
            }
            let candidate = RisState { phi: outcome.phi, mode };
            let cand_link = link_state(ch, &candidate, h_si)?;
            let after = eval_mse(&m, &b, &cand_link);
            phi_steps += 1;
            if after > before * (1.0 + 1e-9) {
                phi_increases += 1;
            }
            ris = candidate;
            link = cand_link;
            step_trace.push(StepRecord { step: AoStep::RisUpdate, mse: after });
        }

        let mse = step_trace.last().unwrap().mse;
        mse_trace.push(mse);
        if prev_mse.is_finite() {
            let rel = (prev_mse - mse).abs() / prev_mse.max(1e-300);
            if rel <= cfg.outer_tol {
                break;
            }
        }
        prev_mse = mse;
    }

    // Final feasibility against the exact expressions.
    let node_ok = b
        .iter()
        .zip(&powers.p_node)
        .all(|(bi, &p)| bi.norm_sqr() <= p * (1.0 + 1e-6));
    let ris_ok = match mode {
        RisMode::Active => {
            let tx = Transceiver {
                m: m.clone(),
                b: b.clone(),
                p_node: powers.p_node.clone(),
                p_ris: powers.p_ris,
            };
            let psi = link.psi.as_ref().expect("active mode has psi");
            ris_reflect_power(&tx, psi, &ch.h_r, noise.sigma_a_sq) <= powers.p_ris * (1.0 + 1e-6)
        }
        _ => true,
    };

    Ok(AoResult {
        m,
        b,
        phi: ris.phi,
        mse_trace,
        step_trace,
        feasible: node_ok && ris_ok,
        iters_used,
        phi_increases,
        phi_steps,
        inner_stalls,
    })
}
