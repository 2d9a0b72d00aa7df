//! Per-round wireless channel generation from scenario geometry.
//!
//! Each link combines a distance-based path loss with Rician small-scale
//! fading. Line-of-sight components come from uniform-linear-array steering
//! vectors at half-wavelength spacing, with steering angles taken from the
//! azimuth of the geometric line between the endpoints, so the LOS part is
//! fully determined by the geometry.

use crate::linalg::{c, sample_complex_gaussian, CMat, C64};
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
}

/// Positions of the edge server, the RIS, and the edge nodes, in meters.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub server_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    pub node_pos: Vec<[f64; 3]>,
}

impl Geometry {
    pub fn num_nodes(&self) -> usize {
        self.node_pos.len()
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance-based path loss `C0 * (d / d0)^(-kappa)`.
///
/// `c0_db` is the loss in dB at the reference distance, so 30 dB at 1 m
/// means a linear gain of 1e-3 there.
#[derive(Debug, Clone)]
pub struct PathLossParams {
    pub c0_db: f64,
    pub ref_dist: f64,
    pub exponent_dr: f64,
    pub exponent_dd: f64,
    pub exponent_rs: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        PathLossParams {
            c0_db: 30.0,
            ref_dist: 1.0,
            exponent_dr: 2.8,
            exponent_dd: 3.6,
            exponent_rs: 2.2,
        }
    }
}

/// Rician factors per link class (dB) and the self-interference level.
///
/// `si_std_db` sets the standard deviation of the SI channel entries. By
/// default it is read as an amplitude quantity, `nu = 10^(si_std_db/20)`;
/// `si_db_is_power` switches to `nu = 10^(si_std_db/10)`.
#[derive(Debug, Clone)]
pub struct FadingParams {
    pub rician_db_dr: f64,
    pub rician_db_dd: f64,
    pub rician_db_rs: f64,
    pub si_std_db: f64,
    pub si_db_is_power: bool,
}

impl Default for FadingParams {
    fn default() -> Self {
        FadingParams {
            rician_db_dr: 0.0,
            rician_db_dd: 0.0,
            rician_db_rs: 3.0,
            si_std_db: -30.0,
            si_db_is_power: false,
        }
    }
}

impl FadingParams {
    /// Standard deviation of the SI channel entries on the linear scale.
    pub fn si_std(&self) -> f64 {
        if self.si_db_is_power {
            10f64.powf(self.si_std_db / 10.0)
        } else {
            10f64.powf(self.si_std_db / 20.0)
        }
    }
}

/// One realization of all links for a round: node-server vectors `h_d`,
/// node-RIS vectors `h_r`, the RIS-server matrix `g_mat`, and the RIS
/// self-interference matrix `h_si`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h_d: Vec<Vec<C64>>,
    pub h_r: Vec<Vec<C64>>,
    pub g_mat: CMat,
    pub h_si: CMat,
}

impl ChannelSet {
    pub fn num_nodes(&self) -> usize {
        self.h_d.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.g_mat.rows()
    }

    pub fn num_elements(&self) -> usize {
        self.g_mat.cols()
    }
}

/// Linear power gain of a link at the given distance.
pub fn path_loss(dist: f64, exponent: f64, params: &PathLossParams) -> Result<f64, ChannelError> {
    if !(dist > 0.0) {
        return Err(ChannelError::NonPositiveDistance(dist));
    }
    let c0 = 10f64.powf(-params.c0_db / 10.0);
    Ok(c0 * (dist / params.ref_dist).powf(-exponent))
}

/// Steering vector of a half-wavelength uniform linear array.
pub fn steering_vector(len: usize, angle: f64) -> Vec<C64> {
    let s = angle.sin();
    (0..len).map(|k| C64::from_polar(1.0, PI * k as f64 * s)).collect()
}

fn azimuth(from: [f64; 3], to: [f64; 3]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

/// Rician fading draw: `sqrt(gain) * (sqrt(k/(1+k)) * los + sqrt(1/(1+k)) * W)`
/// with `k = 10^(rician_db/10)` and `W` i.i.d. CN(0,1).
pub fn rician_channel(
    rows: usize,
    cols: usize,
    rician_db: f64,
    gain: f64,
    los: &CMat,
    rng: &mut impl Rng,
) -> Result<CMat, ChannelError> {
    if los.rows() != rows || los.cols() != cols {
        return Err(ChannelError::DimensionMismatch("rician_channel: los shape"));
    }
    let k = 10f64.powf(rician_db / 10.0);
    let los_w = (gain * k / (1.0 + k)).sqrt();
    let nlos_w = (gain / (1.0 + k)).sqrt();
    let w = sample_complex_gaussian(rows * cols, 1.0, rng);
    Ok(CMat::from_fn(rows, cols, |i, j| {
        los.at(i, j) * c(los_w, 0.0) + w[i * cols + j] * c(nlos_w, 0.0)
    }))
}

fn rician_vector(
    len: usize,
    rician_db: f64,
    gain: f64,
    los: &[C64],
    rng: &mut impl Rng,
) -> Vec<C64> {
    let k = 10f64.powf(rician_db / 10.0);
    let los_w = (gain * k / (1.0 + k)).sqrt();
    let nlos_w = (gain / (1.0 + k)).sqrt();
    let w = sample_complex_gaussian(len, 1.0, rng);
    los.iter()
        .zip(w)
        .map(|(&l, n)| l * c(los_w, 0.0) + n * c(nlos_w, 0.0))
        .collect()
}

/// Draw one full channel realization for the scenario.
///
/// Draw order is fixed (per node: `h_d`, then `h_r`; then `g_mat`; then
/// `h_si`), so a given generator state always yields the same set.
pub fn generate_channels(
    geom: &Geometry,
    pl: &PathLossParams,
    fade: &FadingParams,
    num_antennas: usize,
    num_elements: usize,
    rng: &mut impl Rng,
) -> Result<ChannelSet, ChannelError> {
    let u = geom.num_nodes();
    let mut h_d = Vec::with_capacity(u);
    let mut h_r = Vec::with_capacity(u);
    for node in &geom.node_pos {
        let d_ds = distance(*node, geom.server_pos);
        let gain_ds = path_loss(d_ds, pl.exponent_dd, pl)?;
        let los_ds = steering_vector(num_antennas, azimuth(geom.server_pos, *node));
        h_d.push(rician_vector(num_antennas, fade.rician_db_dd, gain_ds, &los_ds, rng));

        let d_dr = distance(*node, geom.ris_pos);
        let gain_dr = path_loss(d_dr, pl.exponent_dr, pl)?;
        let los_dr = steering_vector(num_elements, azimuth(geom.ris_pos, *node));
        h_r.push(rician_vector(num_elements, fade.rician_db_dr, gain_dr, &los_dr, rng));
    }

    let d_rs = distance(geom.ris_pos, geom.server_pos);
    let gain_rs = path_loss(d_rs, pl.exponent_rs, pl)?;
    let a_server = steering_vector(num_antennas, azimuth(geom.server_pos, geom.ris_pos));
    let a_ris = steering_vector(num_elements, azimuth(geom.ris_pos, geom.server_pos));
    let los_g = CMat::from_fn(num_antennas, num_elements, |i, j| a_server[i] * a_ris[j]);
    let g_mat = rician_channel(num_antennas, num_elements, fade.rician_db_rs, gain_rs, &los_g, rng)?;

    let nu = fade.si_std();
    let si = sample_complex_gaussian(num_elements * num_elements, nu * nu, rng);
    let h_si = CMat::from_fn(num_elements, num_elements, |i, j| si[i * num_elements + j]);

    Ok(ChannelSet { h_d, h_r, g_mat, h_si })
}

/// Draw node positions uniformly in the box `[x0,x1] x [y0,y1]` at z = 0.
pub fn draw_node_positions(
    region: [f64; 4],
    num_nodes: usize,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    (0..num_nodes)
        .map(|_| {
            let x = rng.random_range(region[0]..=region[1]);
            let y = rng.random_range(region[2]..=region[3]);
            [x, y, 0.0]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vnorm_sq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv_geometry(u: usize, seed: u64) -> Geometry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Geometry {
            server_pos: [-50.0, 0.0, 10.0],
            ris_pos: [0.0, 0.0, 10.0],
            node_pos: draw_node_positions([0.0, 20.0, -10.0, 10.0], u, &mut rng),
        }
    }

    #[test]
    fn path_loss_reference_distance() {
        let p = PathLossParams::default();
        let g = path_loss(1.0, 2.8, &p).unwrap();
        assert!((g - 1e-3).abs() < 1e-12, "C0 at 1 m should be 1e-3, got {g}");
    }

    #[test]
    fn path_loss_flat_exponent() {
        let p = PathLossParams::default();
        for d in [0.5, 1.0, 7.0, 300.0] {
            let g = path_loss(d, 0.0, &p).unwrap();
            assert!((g - 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn path_loss_direct_evaluation() {
        let p = PathLossParams::default();
        let g = path_loss(10.0, 2.2, &p).unwrap();
        assert!((g - 6.309573444801933e-6).abs() < 1e-15, "got {g}");
    }

    #[test]
    fn path_loss_monotone_decreasing() {
        let p = PathLossParams::default();
        let mut prev = f64::INFINITY;
        for d in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let g = path_loss(d, 2.2, &p).unwrap();
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn path_loss_rejects_nonpositive_distance() {
        let p = PathLossParams::default();
        assert_eq!(path_loss(0.0, 2.0, &p), Err(ChannelError::NonPositiveDistance(0.0)));
        assert!(path_loss(-1.0, 2.0, &p).is_err());
    }

    #[test]
    fn rician_pure_los_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let los = CMat::from_fn(2, 3, |i, j| C64::from_polar(1.0, 0.3 * (i + 2 * j) as f64));
        let h = rician_channel(2, 3, 60.0, 4.0, &los, &mut rng).unwrap();
        let want = los.scale(c(2.0, 0.0));
        let rel = h.sub(&want).frob_norm_sq().sqrt() / want.frob_norm_sq().sqrt();
        assert!(rel <= 1e-3, "LOS limit violated: {rel:.3e}");
    }

    #[test]
    fn rician_rayleigh_limit_power() {
        // kappa -> 0: mean squared Frobenius norm over many draws matches
        // gain * rows * cols.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let los = CMat::from_fn(2, 2, |_, _| c(1.0, 0.0));
        let gain = 0.5;
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let h = rician_channel(2, 2, -100.0, gain, &los, &mut rng).unwrap();
            acc += h.frob_norm_sq();
        }
        let ratio = acc / draws as f64 / (gain * 4.0);
        assert!((0.97..=1.03).contains(&ratio), "Rayleigh power ratio {ratio}");
    }

    #[test]
    fn rician_deterministic_under_seed() {
        let los = CMat::from_fn(3, 3, |_, _| c(1.0, 0.0));
        let a = rician_channel(3, 3, 3.0, 1.0, &los, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = rician_channel(3, 3, 3.0, 1.0, &los, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_channels_shapes() {
        let geom = sv_geometry(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = generate_channels(&geom, &PathLossParams::default(), &FadingParams::default(), 3, 5, &mut rng)
            .unwrap();
        assert_eq!(ch.h_d.len(), 4);
        assert_eq!(ch.h_r.len(), 4);
        assert!(ch.h_d.iter().all(|v| v.len() == 3));
        assert!(ch.h_r.iter().all(|v| v.len() == 5));
        assert_eq!((ch.g_mat.rows(), ch.g_mat.cols()), (3, 5));
        assert_eq!((ch.h_si.rows(), ch.h_si.cols()), (5, 5));
    }

    #[test]
    fn generate_channels_zero_si() {
        let geom = sv_geometry(2, 0);
        let fade = FadingParams { si_std_db: f64::NEG_INFINITY, ..FadingParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = generate_channels(&geom, &PathLossParams::default(), &fade, 2, 4, &mut rng).unwrap();
        assert!(ch.h_si.data().iter().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn generate_channels_deterministic() {
        let geom = sv_geometry(3, 7);
        let pl = PathLossParams::default();
        let fade = FadingParams::default();
        let a = generate_channels(&geom, &pl, &fade, 4, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_channels(&geom, &pl, &fade, 4, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn g_mat_per_entry_power_matches_path_loss() {
        // Server-RIS distance is 50 m in the reference geometry, exponent 2.2.
        let geom = sv_geometry(1, 0);
        let pl = PathLossParams::default();
        let fade = FadingParams::default();
        let want = 1e-3 * 50f64.powf(-2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, n) = (4, 6);
        let draws = 1000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let ch = generate_channels(&geom, &pl, &fade, m, n, &mut rng).unwrap();
            acc += ch.g_mat.frob_norm_sq();
        }
        let per_entry = acc / (draws * m * n) as f64;
        let rel = (per_entry / want - 1.0).abs();
        assert!(rel < 0.05, "per-entry power off by {rel:.3}");
    }

    #[test]
    fn link_powers_match_their_gains() {
        let geom = sv_geometry(3, 21);
        let pl = PathLossParams::default();
        let fade = FadingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, n) = (2, 3);
        let draws = 10_000;
        let mut acc_d = vec![0.0; 3];
        let mut acc_r = vec![0.0; 3];
        for _ in 0..draws {
            let ch = generate_channels(&geom, &pl, &fade, m, n, &mut rng).unwrap();
            for i in 0..3 {
                acc_d[i] += vnorm_sq(&ch.h_d[i]);
                acc_r[i] += vnorm_sq(&ch.h_r[i]);
            }
        }
        for i in 0..3 {
            let gain_d =
                path_loss(distance(geom.node_pos[i], geom.server_pos), pl.exponent_dd, &pl).unwrap();
            let gain_r =
                path_loss(distance(geom.node_pos[i], geom.ris_pos), pl.exponent_dr, &pl).unwrap();
            let rel_d = (acc_d[i] / (draws * m) as f64 / gain_d - 1.0).abs();
            let rel_r = (acc_r[i] / (draws * n) as f64 / gain_r - 1.0).abs();
            assert!(rel_d < 0.03, "h_d power off by {rel_d:.3} at node {i}");
            assert!(rel_r < 0.03, "h_r power off by {rel_r:.3} at node {i}");
        }
    }

    #[test]
    fn distances_are_symmetric() {
        let a = [1.0, -2.0, 3.0];
        let b = [-4.0, 5.0, 0.5];
        assert_eq!(distance(a, b), distance(b, a));
    }

    #[test]
    fn si_db_conventions() {
        let amp = FadingParams { si_std_db: -30.0, si_db_is_power: false, ..Default::default() };
        let pow = FadingParams { si_std_db: -30.0, si_db_is_power: true, ..Default::default() };
        assert!((amp.si_std() - 10f64.powf(-1.5)).abs() < 1e-15);
        assert!((pow.si_std() - 1e-3).abs() < 1e-15);
    }
}
