//! Construction of the azimuth-, elevation- and distance-specific
//! covariance matrices.
//!
//! Pairing each element (n_y, n_z) with its mirror (-n_y, -n_z) cancels the
//! quadratic (distance) part of the Fresnel phase and keeps the angular
//! part; summing a line with its index-flipped twin then isolates one
//! angle. Pairing against the reference element keeps the full radial
//! chirp instead. Entries carry the 1/L channel normalisation so sample
//! averages of h products and analytic entries agree without rescaling.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::channel::{PathSet, SnapshotBatch};
use crate::error::{Error, Result};
use crate::upa::{extra_distance_fresnel, UpaConfig};

/// The three decomposed estimation dimensions. `Zeta` is the composite
/// angle sin(zeta) = sin(theta) sin(phi) through which the elevation is
/// recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimension {
    Theta,
    Zeta,
    R,
}

impl Dimension {
    pub fn label(self) -> &'static str {
        match self {
            Dimension::Theta => "theta",
            Dimension::Zeta => "zeta",
            Dimension::R => "r",
        }
    }
}

/// Index selection strategy of one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairingRule {
    pub dimension: Dimension,
}

impl PairingRule {
    pub fn new(dimension: Dimension) -> Self {
        Self { dimension }
    }

    /// Companion index the rule combines with (n_y, n_z).
    pub fn index_map(&self, n_y: i64, n_z: i64) -> (i64, i64) {
        match self.dimension {
            Dimension::Theta => (-n_y, n_z),
            Dimension::Zeta => (n_y, -n_z),
            Dimension::R => (0, 0),
        }
    }

    /// Per-element product feeding the sample covariance.
    ///
    /// Angular dimensions use h[n] conj(h[-n]) (origin-symmetric pair); the
    /// radial dimension references the (0, 0) element unconjugated so the
    /// quadratic chirp keeps a positive rate.
    pub fn sample_product(
        &self,
        cfg: &UpaConfig,
        h: &DVector<Complex64>,
        n_y: i64,
        n_z: i64,
    ) -> Complex64 {
        let idx = cfg.element_index(n_y, n_z).unwrap();
        match self.dimension {
            Dimension::Theta | Dimension::Zeta => {
                let mirror = cfg.element_index(-n_y, -n_z).unwrap();
                h[idx] * h[mirror].conj()
            }
            Dimension::R => {
                let reference = cfg.element_index(0, 0).unwrap();
                h[reference] * h[idx].conj()
            }
        }
    }

    /// Length of one observation line.
    pub fn line_len(&self, cfg: &UpaConfig) -> usize {
        match self.dimension {
            Dimension::Theta => cfg.n_z,
            Dimension::Zeta | Dimension::R => cfg.n_y,
        }
    }

    /// How many product bands are summed into each line entry.
    pub fn bands_per_line(&self) -> usize {
        match self.dimension {
            Dimension::Theta | Dimension::Zeta => 2,
            Dimension::R => 1,
        }
    }

    /// Valid line indices for this dimension.
    pub fn line_range(&self, cfg: &UpaConfig) -> std::ops::RangeInclusive<i64> {
        match self.dimension {
            Dimension::Theta => -cfg.half_y()..=cfg.half_y(),
            Dimension::Zeta | Dimension::R => -cfg.half_z()..=cfg.half_z(),
        }
    }

    /// Extract one covariance line from a single snapshot.
    pub fn extract_line(
        &self,
        cfg: &UpaConfig,
        h: &DVector<Complex64>,
        line: i64,
    ) -> Result<DVector<Complex64>> {
        if !self.line_range(cfg).contains(&line) {
            return Err(Error::IndexOutOfRange(line, 0));
        }
        Ok(match self.dimension {
            Dimension::Theta => DVector::from_fn(cfg.n_z, |i, _| {
                let nz = i as i64 - cfg.half_z();
                self.sample_product(cfg, h, line, nz) + self.sample_product(cfg, h, -line, nz)
            }),
            Dimension::Zeta => DVector::from_fn(cfg.n_y, |i, _| {
                let ny = i as i64 - cfg.half_y();
                self.sample_product(cfg, h, ny, line) + self.sample_product(cfg, h, ny, -line)
            }),
            Dimension::R => {
                // Shifted reference (0, line): same radial form as the
                // n_z = 0 slice after translating the frame along z.
                let reference = cfg.element_index(0, line)?;
                DVector::from_fn(cfg.n_y, |i, _| {
                    let ny = i as i64 - cfg.half_y();
                    let idx = cfg.element_index(ny, line).unwrap();
                    h[reference] * h[idx].conj()
                })
            }
        })
    }
}

/// Fresnel-model phase of E{h[a,b] conj(h[-a,-b])} for one path, i.e. the
/// angular product entry. The quadratic terms of the two extra distances
/// are bitwise identical and cancel exactly, so no distance leaks in.
fn angular_product_phase(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, a: i64, b: i64) -> f64 {
    let k = 2.0 * PI / cfg.lambda;
    let dr_mirror = extra_distance_fresnel(cfg, theta, phi, r, -a, -b).unwrap();
    let dr = extra_distance_fresnel(cfg, theta, phi, r, a, b).unwrap();
    k * (dr_mirror - dr)
}

/// Analytic covariance entry for one dimension under the Fresnel model,
/// with the 1/L channel normalisation carried through.
pub fn covariance_entry(
    cfg: &UpaConfig,
    paths: &PathSet,
    n_y: i64,
    n_z: i64,
    rule: &PairingRule,
) -> Result<Complex64> {
    let powers = paths.ensemble_powers(cfg)?;
    let inv_l = 1.0 / paths.len() as f64;
    let mut acc = Complex64::default();
    for (p, &pow) in paths.paths.iter().zip(&powers) {
        let phase = match rule.dimension {
            Dimension::Theta => {
                let (my, mz) = rule.index_map(n_y, n_z);
                return_pair_sum(cfg, p.theta, p.phi, p.r, (n_y, n_z), (my, mz), pow * inv_l, &mut acc);
                continue;
            }
            Dimension::Zeta => {
                let (my, mz) = rule.index_map(n_y, n_z);
                return_pair_sum(cfg, p.theta, p.phi, p.r, (n_y, n_z), (my, mz), pow * inv_l, &mut acc);
                continue;
            }
            Dimension::R => {
                // E{h[0,0] conj(h[n])} = exp(+j k dr_fresnel(n)).
                let k = 2.0 * PI / cfg.lambda;
                k * extra_distance_fresnel(cfg, p.theta, p.phi, p.r, n_y, n_z)?
            }
        };
        acc += Complex64::from_polar(pow * inv_l, phase);
    }
    Ok(acc)
}

fn return_pair_sum(
    cfg: &UpaConfig,
    theta: f64,
    phi: f64,
    r: f64,
    n: (i64, i64),
    m: (i64, i64),
    weight: f64,
    acc: &mut Complex64,
) {
    let ph_n = angular_product_phase(cfg, theta, phi, r, n.0, n.1);
    let ph_m = angular_product_phase(cfg, theta, phi, r, m.0, m.1);
    *acc += Complex64::from_polar(weight, ph_n) + Complex64::from_polar(weight, ph_m);
}

fn require_quarter_wave(cfg: &UpaConfig) -> Result<()> {
    if (cfg.delta - cfg.lambda / 4.0).abs() > 1e-12 * cfg.lambda {
        return Err(Error::InvalidConfig(format!(
            "analytic covariance closed forms need delta = lambda/4, got delta = {}",
            cfg.delta
        )));
    }
    Ok(())
}

/// Radial covariance entry with the reference shifted to (0, n_z_offset).
fn radial_entry_shifted(
    cfg: &UpaConfig,
    paths: &PathSet,
    powers: &[f64],
    n_y: i64,
    n_z_offset: i64,
) -> Result<Complex64> {
    let k = 2.0 * PI / cfg.lambda;
    let inv_l = 1.0 / paths.len() as f64;
    let mut acc = Complex64::default();
    for (p, &pow) in paths.paths.iter().zip(powers) {
        let dr = extra_distance_fresnel(cfg, p.theta, p.phi, p.r, n_y, n_z_offset)?;
        let dr0 = extra_distance_fresnel(cfg, p.theta, p.phi, p.r, 0, n_z_offset)?;
        acc += Complex64::from_polar(pow * inv_l, k * (dr - dr0));
    }
    Ok(acc)
}

/// Azimuth covariance matrix (analytic mode).
pub fn build_w_theta(cfg: &UpaConfig, paths: &PathSet) -> Result<DMatrix<Complex64>> {
    require_quarter_wave(cfg)?;
    let rule = PairingRule::new(Dimension::Theta);
    let mut w = DMatrix::from_element(cfg.n_y, cfg.n_z, Complex64::default());
    for ny in -cfg.half_y()..=cfg.half_y() {
        for nz in -cfg.half_z()..=cfg.half_z() {
            w[((ny + cfg.half_y()) as usize, (nz + cfg.half_z()) as usize)] =
                covariance_entry(cfg, paths, ny, nz, &rule)?;
        }
    }
    Ok(w)
}

/// Composite-elevation covariance matrix (analytic mode).
pub fn build_w_phi(cfg: &UpaConfig, paths: &PathSet) -> Result<DMatrix<Complex64>> {
    require_quarter_wave(cfg)?;
    let rule = PairingRule::new(Dimension::Zeta);
    let mut w = DMatrix::from_element(cfg.n_y, cfg.n_z, Complex64::default());
    for ny in -cfg.half_y()..=cfg.half_y() {
        for nz in -cfg.half_z()..=cfg.half_z() {
            w[((ny + cfg.half_y()) as usize, (nz + cfg.half_z()) as usize)] =
                covariance_entry(cfg, paths, ny, nz, &rule)?;
        }
    }
    Ok(w)
}

/// Radial covariance slice at a given z offset (analytic mode). The
/// default slice is n_z_offset = 0.
pub fn build_w_r(cfg: &UpaConfig, paths: &PathSet, n_z_offset: i64) -> Result<DVector<Complex64>> {
    require_quarter_wave(cfg)?;
    if n_z_offset.abs() > cfg.half_z() {
        return Err(Error::IndexOutOfRange(0, n_z_offset));
    }
    let powers = paths.ensemble_powers(cfg)?;
    let mut w = DVector::from_element(cfg.n_y, Complex64::default());
    for ny in -cfg.half_y()..=cfg.half_y() {
        w[(ny + cfg.half_y()) as usize] = radial_entry_shifted(cfg, paths, &powers, ny, n_z_offset)?;
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceMode {
    Analytic,
    Sample,
}

/// The three constructed covariance matrices.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    /// N_y x N_z, rows are azimuth observation lines.
    pub w_theta: DMatrix<Complex64>,
    /// N_y x N_z, columns are composite-elevation observation lines.
    pub w_phi: DMatrix<Complex64>,
    /// N_y x N_z, column n_z is the radial slice referenced at (0, n_z).
    pub w_r: DMatrix<Complex64>,
    pub mode: CovarianceMode,
    pub sample_count: Option<usize>,
}

impl CovarianceSet {
    pub fn analytic(cfg: &UpaConfig, paths: &PathSet) -> Result<Self> {
        let w_theta = build_w_theta(cfg, paths)?;
        let w_phi = build_w_phi(cfg, paths)?;
        let powers = paths.ensemble_powers(cfg)?;
        let mut w_r = DMatrix::from_element(cfg.n_y, cfg.n_z, Complex64::default());
        for nz in -cfg.half_z()..=cfg.half_z() {
            for ny in -cfg.half_y()..=cfg.half_y() {
                w_r[((ny + cfg.half_y()) as usize, (nz + cfg.half_z()) as usize)] =
                    radial_entry_shifted(cfg, paths, &powers, ny, nz)?;
            }
        }
        Ok(Self { w_theta, w_phi, w_r, mode: CovarianceMode::Analytic, sample_count: None })
    }

    /// Arithmetic mean of the selected snapshot products.
    pub fn sample(cfg: &UpaConfig, batch: &SnapshotBatch) -> Result<Self> {
        if batch.snapshots.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let t = batch.snapshots.len() as f64;
        let theta_rule = PairingRule::new(Dimension::Theta);
        let zeta_rule = PairingRule::new(Dimension::Zeta);
        let mut w_theta = DMatrix::from_element(cfg.n_y, cfg.n_z, Complex64::default());
        let mut w_phi = w_theta.clone();
        let mut w_r = w_theta.clone();
        for h in &batch.snapshots {
            for ny in -cfg.half_y()..=cfg.half_y() {
                let row = (ny + cfg.half_y()) as usize;
                for nz in -cfg.half_z()..=cfg.half_z() {
                    let col = (nz + cfg.half_z()) as usize;
                    let p = theta_rule.sample_product(cfg, h, ny, nz);
                    let p_theta_twin = theta_rule.sample_product(cfg, h, -ny, nz);
                    let p_zeta_twin = zeta_rule.sample_product(cfg, h, ny, -nz);
                    w_theta[(row, col)] += p + p_theta_twin;
                    w_phi[(row, col)] += p + p_zeta_twin;
                    let reference = cfg.element_index(0, nz).unwrap();
                    let idx = cfg.element_index(ny, nz).unwrap();
                    w_r[(row, col)] += h[reference] * h[idx].conj();
                }
            }
        }
        let scale = Complex64::new(1.0 / t, 0.0);
        w_theta *= scale;
        w_phi *= scale;
        w_r *= scale;
        Ok(Self { w_theta, w_phi, w_r, mode: CovarianceMode::Sample, sample_count: Some(batch.snapshots.len()) })
    }

    /// One observation line of the requested dimension.
    pub fn line(&self, cfg: &UpaConfig, dim: Dimension, line: i64) -> Result<DVector<Complex64>> {
        let rule = PairingRule::new(dim);
        if !rule.line_range(cfg).contains(&line) {
            return Err(Error::IndexOutOfRange(line, 0));
        }
        Ok(match dim {
            Dimension::Theta => self.w_theta.row((line + cfg.half_y()) as usize).transpose(),
            Dimension::Zeta => self.w_phi.column((line + cfg.half_z()) as usize).clone_owned(),
            Dimension::R => self.w_r.column((line + cfg.half_z()) as usize).clone_owned(),
        })
    }

    pub fn lines(&self, cfg: &UpaConfig, dim: Dimension) -> Vec<i64> {
        PairingRule::new(dim).line_range(cfg).collect()
    }
}
