//! Fusion of the per-dimension sparse solutions into path parameters:
//! power-evidence computation, angular index correction, elevation
//! recovery, and reconstruction of the channel auto-correlation matrix.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::covariance::Dimension;
use crate::error::{Error, Result};
use crate::grids::CsProblem;
use crate::upa::{array_response, UpaConfig, WavefrontMode};
use crate::vbi::DimensionSolution;

/// Lines whose cosine denominator is below this magnitude are excluded
/// from the power-evidence average; they carry no amplitude information.
pub const EVIDENCE_DENOMINATOR_FLOOR: f64 = 1e-3;

/// Smallest |sin(theta)| at which the elevation can be separated from the
/// composite angle.
pub const AZIMUTH_SIN_FLOOR: f64 = 1e-3;

/// One dimension's L active blocks with offsets and per-line amplitudes.
#[derive(Debug, Clone)]
pub struct DimensionEstimate {
    pub dimension: Dimension,
    /// Grid indices of the L selected blocks.
    pub active_indices: Vec<usize>,
    /// Transform-domain offsets at the active blocks.
    pub offsets_at_active: Vec<f64>,
    /// Recovered transform values, clipped to the representable range.
    pub values: Vec<f64>,
    /// Symmetric line indices (n_y for azimuth, n_z for the composite
    /// angle) in the order of the amplitude rows.
    pub line_indices: Vec<i64>,
    /// lines x L matrix of the non-zero coefficient estimates, re-fit by
    /// least squares on the active columns after convergence.
    pub per_line_amplitudes: DMatrix<Complex64>,
}

impl DimensionEstimate {
    /// Build from a solved problem: pick the top-l support, keep offsets at
    /// the active blocks (zero elsewhere by definition), and re-estimate the
    /// active coefficients per line by least squares through the final
    /// dictionary. The refit removes the shrinkage bias the bounded
    /// inactive prior leaves on the posterior means.
    pub fn from_solution(
        cfg: &UpaConfig,
        problem: &CsProblem,
        solution: &DimensionSolution,
        l: usize,
    ) -> Result<Self> {
        let active = solution.active_set(l);
        let mut offsets_at_active = Vec::with_capacity(l);
        let mut values = Vec::with_capacity(l);
        let clamp = match problem.dimension {
            Dimension::Theta | Dimension::Zeta => 1.0 - 1e-9,
            Dimension::R => f64::INFINITY,
        };
        for &q in &active {
            let off = solution.offsets[q];
            offsets_at_active.push(off);
            let x = problem.model.grid.transform[q] + off;
            values.push(x.clamp(-clamp, clamp));
        }
        let mut model = problem.model.clone();
        model.offsets = vec![0.0; problem.grid_len()];
        for (&q, &off) in active.iter().zip(&offsets_at_active) {
            model.offsets[q] = off;
        }
        let psi = model.dictionary(cfg);
        let mut amplitudes = DMatrix::from_element(problem.line_count(), l, Complex64::default());
        let mut line_indices = Vec::with_capacity(problem.line_count());
        for (row, line) in problem.lines.iter().enumerate() {
            line_indices.push(line.index);
            let mut cols = DMatrix::from_element(cfg.n_rf, l, Complex64::default());
            for (j, &q) in active.iter().enumerate() {
                cols.column_mut(j).copy_from(&(&line.b * psi.column(q)));
            }
            let gram = cols.adjoint() * &cols;
            let rhs = cols.adjoint() * &line.y;
            let sol = gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Estimation("active-column refit is singular".into()))?;
            for j in 0..l {
                amplitudes[(row, j)] = sol[j] * problem.scale;
            }
        }
        Ok(Self {
            dimension: problem.dimension,
            active_indices: active,
            offsets_at_active,
            values,
            line_indices,
            per_line_amplitudes: amplitudes,
        })
    }
}

/// Power evidence of each path under a candidate pairing: slot q of the
/// azimuth estimate is assumed to belong with slot q of the composite
/// estimate. Division by the structural cosine exposes the raw path power
/// (with the 1/L channel normalisation still attached).
pub fn power_evidence(
    theta_est: &DimensionEstimate,
    zeta_est: &DimensionEstimate,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = theta_est.active_indices.len();
    if zeta_est.active_indices.len() != l {
        return Err(Error::DimensionMismatch("evidence slot counts differ".into()));
    }
    let mut e_theta = Vec::with_capacity(l);
    let mut e_zeta = Vec::with_capacity(l);
    for q in 0..l {
        let s_hat = zeta_est.values[q];
        let mut acc = 0.0;
        let mut used = 0usize;
        for (row, &n_y) in theta_est.line_indices.iter().enumerate() {
            let denom = 2.0 * (PI * n_y as f64 * s_hat).cos();
            if denom.abs() < 2.0 * EVIDENCE_DENOMINATOR_FLOOR {
                continue;
            }
            acc += theta_est.per_line_amplitudes[(row, q)].re / denom;
            used += 1;
        }
        if used == 0 {
            return Err(Error::EvidenceUndefined);
        }
        e_theta.push(acc / used as f64);

        let c_hat = theta_est.values[q];
        let mut acc = 0.0;
        let mut used = 0usize;
        for (row, &n_z) in zeta_est.line_indices.iter().enumerate() {
            let denom = 2.0 * (PI * n_z as f64 * c_hat).cos();
            if denom.abs() < 2.0 * EVIDENCE_DENOMINATOR_FLOOR {
                continue;
            }
            acc += zeta_est.per_line_amplitudes[(row, q)].re / denom;
            used += 1;
        }
        if used == 0 {
            return Err(Error::EvidenceUndefined);
        }
        e_zeta.push(acc / used as f64);
    }
    Ok((e_theta, e_zeta))
}

fn permutations(l: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..l).collect();
    fn heap(k: usize, idx: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(idx.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, idx, out);
            if k % 2 == 0 {
                idx.swap(i, k - 1);
            } else {
                idx.swap(0, k - 1);
            }
        }
    }
    heap(l, &mut idx, &mut out);
    out
}

fn permute_estimate(est: &DimensionEstimate, perm: &[usize]) -> DimensionEstimate {
    let mut out = est.clone();
    for (slot, &src) in perm.iter().enumerate() {
        out.active_indices[slot] = est.active_indices[src];
        out.offsets_at_active[slot] = est.offsets_at_active[src];
        out.values[slot] = est.values[src];
        for row in 0..est.per_line_amplitudes.nrows() {
            out.per_line_amplitudes[(row, slot)] = est.per_line_amplitudes[(row, src)];
        }
    }
    out
}

/// Result of the angular index correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Composite-angle slot matched to each azimuth slot.
    pub permutation: Vec<usize>,
    pub cost: f64,
}

/// Exhaustive angular index correction: among all L! alignments of the
/// composite-angle blocks to the azimuth blocks, pick the one whose power
/// evidences agree best (global assignment, not per-slot greedy).
pub fn angular_index_correction(
    theta_est: &DimensionEstimate,
    zeta_est: &DimensionEstimate,
) -> Result<Assignment> {
    let l = theta_est.active_indices.len();
    if l > 6 {
        return Err(Error::Estimation(format!(
            "exhaustive index correction supports up to 6 paths, got {l}"
        )));
    }
    let mut best: Option<Assignment> = None;
    for perm in permutations(l) {
        let candidate = permute_estimate(zeta_est, &perm);
        let Ok((e_theta, e_zeta)) = power_evidence(theta_est, &candidate) else {
            continue;
        };
        let cost: f64 = e_theta.iter().zip(&e_zeta).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |b| cost < b.cost) {
            best = Some(Assignment { permutation: perm, cost });
        }
    }
    best.ok_or(Error::EvidenceUndefined)
}

/// Elevation from the composite angle: phi = asin(sin(zeta)/sin(theta)).
/// Returns the angle and whether the argument had to be clipped to [-1, 1].
pub fn recover_phi(theta_hat: f64, sin_zeta: f64) -> Result<(f64, bool)> {
    let sin_theta = theta_hat.sin();
    if sin_theta.abs() <= AZIMUTH_SIN_FLOOR {
        return Err(Error::DegenerateAzimuth(AZIMUTH_SIN_FLOOR));
    }
    let ratio = sin_zeta / sin_theta;
    let clipped = !(-1.0..=1.0).contains(&ratio);
    Ok((ratio.clamp(-1.0, 1.0).asin(), clipped))
}

/// Estimated parameters of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
    /// Ensemble path power (the 1/L normalisation removed).
    pub power: f64,
    pub phi_clipped: bool,
}

/// Output of the full estimation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub paths: Vec<PathEstimate>,
    pub assignment: Assignment,
    pub nmse_r: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Rank-L factor F with R = F F^H.
#[derive(Debug, Clone)]
pub struct FactoredCorrelation {
    pub factor: DMatrix<Complex64>,
}

impl FactoredCorrelation {
    /// R = (1/L) sum_l power_l a_l a_l^H from explicit parameters.
    pub fn from_parameters(
        cfg: &UpaConfig,
        params: &[(f64, f64, f64, f64)],
        mode: WavefrontMode,
    ) -> Result<Self> {
        let l = params.len().max(1);
        let mut factor = DMatrix::from_element(cfg.n_elements(), params.len(), Complex64::default());
        for (i, &(theta, phi, r, power)) in params.iter().enumerate() {
            let a = array_response(cfg, theta, phi, r, mode)?;
            factor.column_mut(i).copy_from(&(a * Complex64::new((power / l as f64).sqrt(), 0.0)));
        }
        Ok(Self { factor })
    }

    pub fn dense(&self) -> DMatrix<Complex64> {
        &self.factor * self.factor.adjoint()
    }

    fn gram_norm_sqr(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
        (a.adjoint() * b).norm_squared()
    }
}

/// Normalised Frobenius error ||R - R_hat||^2 / ||R||^2 computed through
/// the L x L Gram matrices of the factors.
pub fn nmse(truth: &FactoredCorrelation, estimate: &FactoredCorrelation) -> f64 {
    let rr = FactoredCorrelation::gram_norm_sqr(&truth.factor, &truth.factor);
    if rr == 0.0 {
        return if FactoredCorrelation::gram_norm_sqr(&estimate.factor, &estimate.factor) == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let ee = FactoredCorrelation::gram_norm_sqr(&estimate.factor, &estimate.factor);
    let cross = FactoredCorrelation::gram_norm_sqr(&truth.factor, &estimate.factor);
    let v = (rr - 2.0 * cross + ee) / rr;
    // Clamp rounding-level negatives only; NaN from a broken estimate must
    // surface, not be masked.
    if v < 0.0 && v > -1e-9 {
        0.0
    } else {
        v
    }
}

/// Vector NMSE ||x - x_hat||^2 / ||x||^2.
pub fn nmse_vec(estimate: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = truth.iter().zip(estimate).map(|(t, e)| (t - e) * (t - e)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    num / den
}
