//! Multipath channel synthesis, pilot observations and the snapshot-to-
//! observation mapping used to feed the compressive-sensing stage from
//! received-signal samples.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::PairingRule;
use crate::error::{Error, Result};
use crate::rng::{complex_normal, random_phase};
use crate::upa::{array_response, channel_power_gain, UpaConfig, WavefrontMode};

/// Uplink pilot power, 33 dBm.
pub const PILOT_POWER_W: f64 = 1.995262314968879;

/// NLoS path power sits 20 dB below the LoS power.
pub const NLOS_POWER_RATIO: f64 = 0.01;

/// One propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Azimuth from the +z axis, in (0, pi).
    pub theta: f64,
    /// Elevation, in (-pi/2, pi/2).
    pub phi: f64,
    /// Distance from the reference element, meters.
    pub r: f64,
    /// Complex gain; deterministic for the LoS path.
    pub beta: Complex64,
    pub is_los: bool,
}

/// L paths sharing one geometry; the first entry is the LoS path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    /// LoS-deterministic gain at the reference element.
    pub fn los_power(cfg: &UpaConfig, theta: f64, phi: f64, r: f64) -> Result<f64> {
        channel_power_gain(cfg, theta, phi, r, 0, 0)
    }

    /// Build a path set from bare geometry. The LoS gain is the projected
    /// aperture gain at the reference element; NLoS gains are drawn
    /// CN(0, los_power / 100).
    pub fn from_geometry(
        cfg: &UpaConfig,
        geo: &[(f64, f64, f64)],
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if geo.is_empty() {
            return Err(Error::Estimation("path set must be non-empty".into()));
        }
        let (t0, p0, r0) = geo[0];
        let f_los = Self::los_power(cfg, t0, p0, r0)?;
        let mut paths = Vec::with_capacity(geo.len());
        paths.push(Path {
            theta: t0,
            phi: p0,
            r: r0,
            beta: Complex64::new(f_los.sqrt(), 0.0),
            is_los: true,
        });
        for &(t, p, r) in &geo[1..] {
            paths.push(Path {
                theta: t,
                phi: p,
                r,
                beta: complex_normal(rng, f_los * NLOS_POWER_RATIO),
                is_los: false,
            });
        }
        Ok(Self { paths })
    }

    /// Default sampler: r ~ U(rayleigh_lower, 0.5 rayleigh_upper),
    /// theta ~ U(0, pi), phi ~ U(-pi/2, pi/2).
    pub fn sample(cfg: &UpaConfig, l: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Self::sample_in_range(cfg, l, cfg.rayleigh_lower(), 0.5 * cfg.rayleigh_upper(), rng)
    }

    pub fn sample_in_range(
        cfg: &UpaConfig,
        l: usize,
        r_min: f64,
        r_max: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        assert!(l >= 1 && r_min <= r_max);
        let mut geo = Vec::with_capacity(l);
        for i in 0..l {
            let r = if r_min == r_max { r_min } else { rng.random_range(r_min..r_max) };
            let (theta, phi) = if i == 0 {
                sample_los_angles(rng)
            } else {
                (
                    rng.random_range(f64::EPSILON..std::f64::consts::PI),
                    rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
                )
            };
            geo.push((theta, phi, r));
        }
        Self::from_geometry(cfg, &geo, rng)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Mean ensemble power of each path: |beta|^2 for the LoS path, the
    /// draw variance for NLoS paths.
    pub fn mean_powers(cfg: &UpaConfig) -> fn(&UpaConfig) {
        // placeholder to keep signature parity; see `ensemble_powers`.
        let _ = cfg;
        |_| {}
    }

    /// Per-path ensemble powers E|beta_l|^2.
    pub fn ensemble_powers(&self, cfg: &UpaConfig) -> Result<Vec<f64>> {
        if self.paths.is_empty() {
            return Ok(Vec::new());
        }
        let los = &self.paths[0];
        let f_los = Self::los_power(cfg, los.theta, los.phi, los.r)?;
        Ok(self
            .paths
            .iter()
            .map(|p| if p.is_los { p.beta.norm_sqr() } else { f_los * NLOS_POWER_RATIO })
            .collect())
    }

    /// Mean per-element channel power E||h||^2 / N = sum_l E|beta_l|^2 / L.
    pub fn mean_element_power(&self, cfg: &UpaConfig) -> Result<f64> {
        Ok(self.ensemble_powers(cfg)?.iter().sum::<f64>() / self.len() as f64)
    }
}

/// LoS angles must keep the source in front of the array.
fn sample_los_angles(rng: &mut ChaCha12Rng) -> (f64, f64) {
    loop {
        let theta = rng.random_range(f64::EPSILON..std::f64::consts::PI);
        let phi = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        if theta.sin() * phi.cos() > 1e-9 {
            return (theta, phi);
        }
    }
}

/// h = sqrt(1/L) sum_l beta_l a(theta_l, phi_l, r_l).
pub fn generate_channel(cfg: &UpaConfig, paths: &PathSet, mode: WavefrontMode) -> Result<DVector<Complex64>> {
    if paths.is_empty() {
        return Err(Error::Estimation("path set must be non-empty".into()));
    }
    let scale = (1.0 / paths.len() as f64).sqrt();
    let mut h = DVector::from_element(cfg.n_elements(), Complex64::default());
    for p in &paths.paths {
        let a = array_response(cfg, p.theta, p.phi, p.r, mode)?;
        h.axpy(p.beta * scale, &a, Complex64::new(1.0, 0.0));
    }
    Ok(h)
}

/// T channel realisations sharing one geometry; NLoS gains are redrawn per
/// snapshot and optional element-level noise is added.
#[derive(Debug, Clone)]
pub struct SnapshotBatch {
    pub snapshots: Vec<DVector<Complex64>>,
    pub t: usize,
}

impl SnapshotBatch {
    pub fn generate(
        cfg: &UpaConfig,
        base: &PathSet,
        t: usize,
        element_noise_var: f64,
        mode: WavefrontMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if t == 0 {
            return Err(Error::EmptyBatch);
        }
        let f_los = PathSet::los_power(cfg, base.paths[0].theta, base.paths[0].phi, base.paths[0].r)?;
        // Cache per-path responses; only the gains change across snapshots.
        let responses: Vec<DVector<Complex64>> = base
            .paths
            .iter()
            .map(|p| array_response(cfg, p.theta, p.phi, p.r, mode))
            .collect::<Result<_>>()?;
        let scale = (1.0 / base.len() as f64).sqrt();
        let mut snapshots = Vec::with_capacity(t);
        for _ in 0..t {
            let mut h = DVector::from_element(cfg.n_elements(), Complex64::default());
            for (p, a) in base.paths.iter().zip(&responses) {
                let beta = if p.is_los {
                    p.beta
                } else {
                    complex_normal(rng, f_los * NLOS_POWER_RATIO)
                };
                h.axpy(beta * scale, a, Complex64::new(1.0, 0.0));
            }
            if element_noise_var > 0.0 {
                for e in h.iter_mut() {
                    *e += complex_normal(rng, element_noise_var);
                }
            }
            snapshots.push(h);
        }
        Ok(Self { snapshots, t })
    }
}

/// Per-pilot combining matrices, holographic patterns and symbols.
#[derive(Debug, Clone)]
pub struct PilotBank {
    /// F_p, each N_RF x N with CN(0, 1/N) entries.
    pub combiners: Vec<DMatrix<Complex64>>,
    /// Diagonal of M_p, unit-modulus random phases.
    pub patterns: Vec<DVector<Complex64>>,
    /// Transmit symbols x_p.
    pub symbols: Vec<Complex64>,
}

impl PilotBank {
    pub fn generate(cfg: &UpaConfig, rng: &mut ChaCha12Rng) -> Self {
        let n = cfg.n_elements();
        let var = 1.0 / n as f64;
        let combiners = (0..cfg.n_pilots)
            .map(|_| DMatrix::from_fn(cfg.n_rf, n, |_, _| complex_normal(rng, var)))
            .collect();
        let patterns = (0..cfg.n_pilots)
            .map(|_| DVector::from_fn(n, |_, _| random_phase(rng)))
            .collect();
        let symbols = vec![Complex64::new(PILOT_POWER_W.sqrt(), 0.0); cfg.n_pilots];
        Self { combiners, patterns, symbols }
    }
}

/// Stacked pilot observation y_p = F_p M_p h x_p + F_p M_p n_p.
pub fn simulate_pilots(
    cfg: &UpaConfig,
    h: &DVector<Complex64>,
    bank: &PilotBank,
    noise_var: f64,
    rng: &mut ChaCha12Rng,
) -> Result<DVector<Complex64>> {
    let n = cfg.n_elements();
    if h.len() != n {
        return Err(Error::DimensionMismatch(format!("channel length {} vs {n}", h.len())));
    }
    if bank.combiners.len() != cfg.n_pilots {
        return Err(Error::DimensionMismatch("pilot bank size mismatch".into()));
    }
    let mut y = DVector::from_element(cfg.n_pilots * cfg.n_rf, Complex64::default());
    for p in 0..cfg.n_pilots {
        let f = &bank.combiners[p];
        if f.nrows() != cfg.n_rf || f.ncols() != n || bank.patterns[p].len() != n {
            return Err(Error::DimensionMismatch(format!("pilot {p} matrix shapes")));
        }
        let mut mixed = DVector::from_fn(n, |i, _| bank.patterns[p][i] * h[i] * bank.symbols[p]);
        if noise_var > 0.0 {
            for i in 0..n {
                mixed[i] += bank.patterns[p][i] * complex_normal(rng, noise_var);
            }
        }
        let yp = f * mixed;
        y.rows_mut(p * cfg.n_rf, cfg.n_rf).copy_from(&yp);
    }
    Ok(y)
}

/// Hardware-imperfection model: the realised observation map is
/// F + dF with dF redrawn per snapshot, zero mean, scaled so that
/// sqrt(E||dF||^2 / E||F + dF||^2) equals `error_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub error_ratio: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn new(error_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&error_ratio) {
            return Err(Error::InvalidConfig(format!("error ratio {error_ratio} outside [0, 1)")));
        }
        Ok(Self { error_ratio, seed })
    }

    /// Per-entry variance of dF given the intended map's squared norm.
    pub fn entry_variance(&self, f_norm_sqr: f64, rows: usize, cols: usize) -> f64 {
        let eps2 = self.error_ratio * self.error_ratio;
        eps2 * f_norm_sqr / ((1.0 - eps2) * (rows * cols) as f64)
    }
}

/// Mean over snapshots of the per-snapshot paired element products
/// h[n] conj(h[pair(n)]), i.e. the raw material of the sample covariance.
pub fn paired_products(
    cfg: &UpaConfig,
    h: &DVector<Complex64>,
    rule: &PairingRule,
) -> DVector<Complex64> {
    let mut p = DVector::from_element(cfg.n_elements(), Complex64::default());
    for ny in -cfg.half_y()..=cfg.half_y() {
        for nz in -cfg.half_z()..=cfg.half_z() {
            let idx = cfg.element_index(ny, nz).unwrap();
            p[idx] = rule.sample_product(cfg, h, ny, nz);
        }
    }
    p
}

/// Observation for one covariance line, formed from received-signal
/// snapshots: the sample mean over tau of B * select(h^tau products), with
/// an optional per-snapshot perturbation of the linear map.
///
/// The perturbed map (F + dF^tau) acts on the product vector p^tau; since
/// dF^tau has i.i.d. CN(0, c^2) entries, dF^tau p^tau is CN(0, c^2 ||p^tau||^2 I)
/// given p^tau, and the snapshot average is drawn in that collapsed form.
pub fn form_observation_from_snapshots(
    cfg: &UpaConfig,
    batch: &SnapshotBatch,
    rule: &PairingRule,
    line: i64,
    b: &DMatrix<Complex64>,
    perturbation: Option<&Perturbation>,
) -> Result<DVector<Complex64>> {
    if batch.snapshots.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let line_len = rule.line_len(cfg);
    if b.ncols() != line_len || b.nrows() != cfg.n_rf {
        return Err(Error::DimensionMismatch(format!(
            "B is {}x{}, expected {}x{line_len}",
            b.nrows(),
            b.ncols(),
            cfg.n_rf
        )));
    }
    let t = batch.snapshots.len() as f64;
    let mut w_mean = DVector::from_element(line_len, Complex64::default());
    let mut prod_norm_sq_sum = 0.0;
    for h in &batch.snapshots {
        let w = rule.extract_line(cfg, h, line)?;
        w_mean += &w;
        if perturbation.is_some() {
            // ||p^tau||^2 over the full product vector the map acts on.
            let mut s = 0.0;
            for ny in -cfg.half_y()..=cfg.half_y() {
                for nz in -cfg.half_z()..=cfg.half_z() {
                    s += rule.sample_product(cfg, h, ny, nz).norm_sqr();
                }
            }
            prod_norm_sq_sum += s;
        }
    }
    w_mean /= Complex64::new(t, 0.0);
    let mut y = b * w_mean;
    if let Some(pert) = perturbation {
        if pert.error_ratio > 0.0 {
            // ||F||^2 where F = B * S and S places each B column once per
            // summed product band.
            let f_norm_sqr = b.norm_squared() * rule.bands_per_line() as f64;
            let c2 = pert.entry_variance(f_norm_sqr, cfg.n_rf, cfg.n_elements());
            let var_per_entry = c2 * prod_norm_sq_sum / (t * t);
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(pert.seed);
            use rand_chacha::rand_core::SeedableRng;
            rng.set_stream(line as u64 ^ 0x7061_6972);
            for e in y.iter_mut() {
                *e += complex_normal(&mut rng, var_per_entry);
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{CovarianceSet, Dimension};
    use crate::rng::{Purpose, SeedTree};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn rng(seed: u64, idx: u64) -> ChaCha12Rng {
        SeedTree::new(seed).stream(Purpose::Channel, idx)
    }

    #[test]
    fn single_los_path_channel_norm() {
        let cfg = UpaConfig::desk();
        let mut r = rng(1, 0);
        let ps = PathSet::from_geometry(&cfg, &[(PI / 2.0, 0.0, 8.0)], &mut r).unwrap();
        let f = PathSet::los_power(&cfg, PI / 2.0, 0.0, 8.0).unwrap();
        let h = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        assert_relative_eq!(h.norm_squared(), cfg.n_elements() as f64 * f, max_relative = 1e-9);
    }

    #[test]
    fn channel_is_deterministic_given_pathset() {
        let cfg = UpaConfig::desk();
        let mut r = rng(2, 0);
        let ps = PathSet::sample(&cfg, 3, &mut r).unwrap();
        let h1 = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        let h2 = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        assert_eq!(h1, h2);
        // Same seed, same draw sequence -> identical path sets too.
        let ps2 = PathSet::sample(&cfg, 3, &mut rng(2, 0)).unwrap();
        assert_eq!(ps, ps2);
    }

    #[test]
    fn ensemble_channel_power_matches_analytic() {
        let cfg = UpaConfig::desk();
        let mut r = rng(3, 0);
        let base = PathSet::sample(&cfg, 3, &mut r).unwrap();
        let powers = base.ensemble_powers(&cfg).unwrap();
        let expect = cfg.n_elements() as f64 * powers.iter().sum::<f64>() / base.len() as f64;
        let trials = 10_000;
        let batch = SnapshotBatch::generate(&cfg, &base, trials, 0.0, WavefrontMode::Exact, &mut r).unwrap();
        let samples: Vec<f64> = batch.snapshots.iter().map(|h| h.norm_squared()).collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se.max(1e-12 * expect),
            "mean {mean}, expect {expect}, se {se}"
        );
    }

    #[test]
    fn pilots_select_channel_entries_when_noiseless() {
        let cfg = UpaConfig::new(5, 3, 0.01, 0.0025, 1e-6, 4, 2).unwrap();
        let n = cfg.n_elements();
        let mut r = rng(4, 0);
        let ps = PathSet::from_geometry(&cfg, &[(1.2, 0.3, 6.0)], &mut r).unwrap();
        let h = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        // F_p M_p = rows of the identity, x_p = 1: y_p returns entries of h.
        let mut bank = PilotBank::generate(&cfg, &mut r);
        for p in 0..cfg.n_pilots {
            bank.patterns[p] = DVector::from_element(n, Complex64::new(1.0, 0.0));
            bank.symbols[p] = Complex64::new(1.0, 0.0);
            let mut f = DMatrix::from_element(cfg.n_rf, n, Complex64::default());
            for k in 0..cfg.n_rf {
                f[(k, p * cfg.n_rf + k)] = Complex64::new(1.0, 0.0);
            }
            bank.combiners[p] = f;
        }
        let y = simulate_pilots(&cfg, &h, &bank, 0.0, &mut r).unwrap();
        for p in 0..cfg.n_pilots {
            for k in 0..cfg.n_rf {
                assert_eq!(y[p * cfg.n_rf + k], h[p * cfg.n_rf + k]);
            }
        }
    }

    #[test]
    fn pilot_noise_power_matches_oracle() {
        let cfg = UpaConfig::new(9, 5, 0.01, 0.0025, 1e-6, 4, 3).unwrap();
        let mut r = rng(5, 0);
        let ps = PathSet::from_geometry(&cfg, &[(1.4, -0.2, 5.0)], &mut r).unwrap();
        let h = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        let bank = PilotBank::generate(&cfg, &mut r);
        let sigma2 = 1e-3;
        let clean = simulate_pilots(&cfg, &h, &bank, 0.0, &mut r).unwrap();
        let expect: f64 = sigma2
            * bank
                .combiners
                .iter()
                .zip(&bank.patterns)
                .map(|(f, m)| {
                    let fm = f * DMatrix::from_diagonal(m);
                    fm.norm_squared()
                })
                .sum::<f64>();
        let trials = 10_000;
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            let y = simulate_pilots(&cfg, &h, &bank, sigma2, &mut r).unwrap();
            samples.push((y - &clean).norm_squared());
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expect {expect} se {se}");
    }

    #[test]
    fn zero_symbols_leave_pure_filtered_noise() {
        let cfg = UpaConfig::new(9, 5, 0.01, 0.0025, 1e-6, 4, 2).unwrap();
        let mut r = rng(6, 0);
        let ps = PathSet::from_geometry(&cfg, &[(1.4, -0.2, 5.0)], &mut r).unwrap();
        let h = generate_channel(&cfg, &ps, WavefrontMode::Exact).unwrap();
        let mut bank = PilotBank::generate(&cfg, &mut r);
        for s in bank.symbols.iter_mut() {
            *s = Complex64::default();
        }
        let sigma2 = 0.5;
        // Empirical covariance of y_p must match sigma^2 (F M)(F M)^H.
        let trials = 20_000;
        let mut acc = DMatrix::from_element(cfg.n_rf, cfg.n_rf, Complex64::default());
        for _ in 0..trials {
            let y = simulate_pilots(&cfg, &h, &bank, sigma2, &mut r).unwrap();
            let y0 = y.rows(0, cfg.n_rf).clone_owned();
            acc += &y0 * y0.adjoint();
        }
        acc /= Complex64::new(trials as f64, 0.0);
        let fm = &bank.combiners[0] * DMatrix::from_diagonal(&bank.patterns[0]);
        let expect = fm.clone() * fm.adjoint() * Complex64::new(sigma2, 0.0);
        let rel = (acc - &expect).norm() / expect.norm();
        assert!(rel < 0.05, "relative covariance error {rel}");
    }

    #[test]
    fn snapshot_observation_matches_sample_covariance_line() {
        // T = 1, single LoS path: no randomness, the mapped observation must
        // equal B times the selected product line bit-exactly.
        let cfg = UpaConfig::desk();
        let mut r = rng(7, 0);
        let ps = PathSet::from_geometry(&cfg, &[(1.3, 0.4, 7.0)], &mut r).unwrap();
        let batch = SnapshotBatch::generate(&cfg, &ps, 1, 0.0, WavefrontMode::Exact, &mut r).unwrap();
        let rule = PairingRule::new(Dimension::Theta);
        let b = DMatrix::from_fn(cfg.n_rf, cfg.n_z, |_, _| complex_normal(&mut r, 1.0 / cfg.n_y as f64));
        let line = 4;
        let y = form_observation_from_snapshots(&cfg, &batch, &rule, line, &b, None).unwrap();
        let w = rule.extract_line(&cfg, &batch.snapshots[0], line).unwrap();
        let oracle = &b * w;
        assert_eq!(y, oracle);
    }

    #[test]
    fn snapshot_observation_converges_to_analytic_line() {
        let cfg = UpaConfig::desk();
        let mut r = rng(8, 0);
        let ps = PathSet::sample_in_range(&cfg, 3, 8.0, 12.0, &mut r).unwrap();
        let batch = SnapshotBatch::generate(&cfg, &ps, 2000, 0.0, WavefrontMode::Exact, &mut r).unwrap();
        let rule = PairingRule::new(Dimension::Theta);
        let b = DMatrix::from_fn(cfg.n_rf, cfg.n_z, |_, _| complex_normal(&mut r, 1.0 / cfg.n_y as f64));
        let line = -3;
        let y = form_observation_from_snapshots(&cfg, &batch, &rule, line, &b, None).unwrap();
        let covset = CovarianceSet::analytic(&cfg, &ps).unwrap();
        let w = covset.line(&cfg, Dimension::Theta, line).unwrap();
        let oracle = &b * w;
        let rel = (y - &oracle).norm() / oracle.norm();
        assert!(rel < 0.05, "relative deviation {rel}");
    }

    #[test]
    fn zero_error_ratio_is_bit_exact_with_unperturbed_path() {
        let cfg = UpaConfig::desk();
        let mut r = rng(9, 0);
        let ps = PathSet::sample(&cfg, 2, &mut r).unwrap();
        let batch = SnapshotBatch::generate(&cfg, &ps, 16, 0.0, WavefrontMode::Exact, &mut r).unwrap();
        let rule = PairingRule::new(Dimension::Zeta);
        let b = DMatrix::from_fn(cfg.n_rf, cfg.n_y, |_, _| complex_normal(&mut r, 1.0 / cfg.n_y as f64));
        let pert = Perturbation::new(0.0, 99).unwrap();
        let y0 = form_observation_from_snapshots(&cfg, &batch, &rule, 2, &b, None).unwrap();
        let y1 = form_observation_from_snapshots(&cfg, &batch, &rule, 2, &b, Some(&pert)).unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn perturbation_realises_requested_error_ratio() {
        // Explicit-matrix oracle for the scaling rule: draw dF with the
        // entry variance used by the collapsed sampler and measure the ratio.
        let cfg = UpaConfig::desk();
        let mut r = rng(10, 0);
        let n = cfg.n_elements();
        let b = DMatrix::from_fn(cfg.n_rf, cfg.n_z, |_, _| complex_normal(&mut r, 1.0 / cfg.n_y as f64));
        let f_norm_sqr = b.norm_squared() * 2.0;
        for &eps in &[0.05, 0.2, 0.6] {
            let pert = Perturbation::new(eps, 5).unwrap();
            let c2 = pert.entry_variance(f_norm_sqr, cfg.n_rf, n);
            let mut num = 0.0;
            let mut den = 0.0;
            for _ in 0..400 {
                let df_norm_sqr: f64 =
                    (0..cfg.n_rf * n).map(|_| complex_normal(&mut r, c2).norm_sqr()).sum();
                num += df_norm_sqr;
                den += f_norm_sqr + df_norm_sqr;
            }
            let realised = (num / den).sqrt();
            assert!(
                (realised - eps).abs() <= 0.05 * eps,
                "eps {eps} realised {realised}"
            );
        }
    }
}
