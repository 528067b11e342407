//! End-to-end channel estimation: covariance construction, the three
//! per-dimension sparse reconstructions, angular index correction,
//! per-path distance recovery and correlation-matrix scoring.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    form_observation_from_snapshots, PathSet, Perturbation, SnapshotBatch,
};
use crate::covariance::{CovarianceSet, Dimension, PairingRule};
use crate::error::{Error, Result};
use crate::grids::{
    assemble_cs_problem, assemble_radial_problem, make_distance_grid, make_theta_grid,
    make_zeta_grid, orthogonal_distance_cap, CsLine, CsProblem, LineNoise, OffGridModel,
    RadialContext,
};
use crate::recovery::{
    angular_index_correction, nmse, power_evidence, recover_phi, Assignment, DimensionEstimate,
    EstimationResult, FactoredCorrelation, PathEstimate,
};
use crate::rng::{complex_normal, Purpose, SeedTree};
use crate::upa::{UpaConfig, WavefrontMode};
use crate::vbi::{solve_dimension, DimensionSolution, LayeredPrior, SolverConfig};

/// Estimation schemes exposed by the benchmark harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Markov support prior, angular index correction, radial recovery.
    DereVm,
    /// Same pipeline with an i.i.d. support prior.
    DereVbi,
    /// Angular index correction disabled (identity pairing).
    WithoutAic,
    /// Angles only; reconstruction uses planar wavefronts (r = infinity).
    OffgridAngular,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::DereVm => "dere_vm",
            Scheme::DereVbi => "dere_vbi",
            Scheme::WithoutAic => "without_aic",
            Scheme::OffgridAngular => "offgrid_angular",
        }
    }
}

/// Resolved estimator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub prior: LayeredPrior,
    pub solver: SolverConfig,
    pub aic_enabled: bool,
    /// Reconstruct with planar wavefronts and skip distance recovery.
    pub far_field_reconstruction: bool,
    /// Azimuth grid size; defaults to N_z.
    pub theta_grid: Option<usize>,
    /// Composite-angle grid size; defaults to N_y.
    pub zeta_grid: Option<usize>,
    pub beta_delta: f64,
    /// Hard cap on radial grid points; the orthogonality-limited count
    /// applies beneath it.
    pub distance_cap: usize,
    /// Covariance slices feeding each radial problem.
    pub radial_slices: Vec<i64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            prior: LayeredPrior::default(),
            solver: SolverConfig::default(),
            aic_enabled: true,
            far_field_reconstruction: false,
            theta_grid: None,
            zeta_grid: None,
            beta_delta: 1.2,
            distance_cap: 64,
            radial_slices: vec![0],
        }
    }
}

/// Per-scheme estimator instances.
pub fn scheme_variants(scheme: Scheme) -> EstimatorOptions {
    let base = EstimatorOptions::default();
    match scheme {
        Scheme::DereVm => base,
        Scheme::DereVbi => EstimatorOptions { prior: LayeredPrior::iid(), ..base },
        Scheme::WithoutAic => EstimatorOptions { aic_enabled: false, ..base },
        Scheme::OffgridAngular => EstimatorOptions { far_field_reconstruction: true, ..base },
    }
}

/// How the covariance statistics are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Closed-form second-order statistics of the true path set.
    Analytic,
    /// Sample averages over T received-signal snapshots.
    Sample { t: usize },
}

/// One estimation trial: the scene, how its statistics are observed, and
/// the noise level.
#[derive(Debug, Clone)]
pub struct TrialInput {
    pub cfg: UpaConfig,
    pub truth: PathSet,
    pub source: CovarianceSource,
    /// Pilot-domain SNR; `None` runs noiseless.
    pub snr_db: Option<f64>,
    /// Pilot count; observation noise averages down with it.
    pub pilots: usize,
    pub perturbation: Option<Perturbation>,
    pub seed: SeedTree,
}

impl TrialInput {
    pub fn noiseless(cfg: UpaConfig, truth: PathSet, seed: SeedTree) -> Self {
        let pilots = cfg.n_pilots;
        Self { cfg, truth, source: CovarianceSource::Analytic, snr_db: None, pilots, perturbation: None, seed }
    }

    /// Element-domain noise variance implied by the pilot-domain SNR
    /// definition SNR = E||F M h x||^2 / E||F M n||^2 and the averaging
    /// over the pilot block. The pilot power cancels.
    pub fn element_noise_var(&self) -> Result<f64> {
        match self.snr_db {
            None => Ok(0.0),
            Some(db) => {
                let snr = 10.0f64.powf(db / 10.0);
                let p_mean = self.truth.mean_element_power(&self.cfg)?;
                Ok(p_mean / (snr * self.pilots as f64))
            }
        }
    }

    /// Equivalent covariance-line noise for the analytic source: the
    /// element products h_n (h_n')* carry 2 sigma_e^2 p + sigma_e^4 of
    /// measurement-noise power per entry.
    pub fn line_noise_var(&self) -> Result<f64> {
        let sigma_e = self.element_noise_var()?;
        if sigma_e == 0.0 {
            return Ok(0.0);
        }
        let p_mean = self.truth.mean_element_power(&self.cfg)?;
        Ok(2.0 * sigma_e * p_mean + sigma_e * sigma_e)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrialDiagnostics {
    pub iterations_theta: usize,
    pub iterations_zeta: usize,
    pub iterations_r: usize,
    pub converged: bool,
    pub clip_events: usize,
    pub ridge_events: usize,
}

/// Full pipeline output plus the per-iteration NMSE trace when requested.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub result: EstimationResult,
    pub diagnostics: TrialDiagnostics,
    /// NMSE of the reconstructed correlation after each outer iteration of
    /// the angular solvers (populated when trajectories are tracked).
    pub nmse_trace: Vec<f64>,
}

struct AssembledProblems {
    theta: CsProblem,
    zeta: CsProblem,
    covset: CovarianceSet,
    batch: Option<SnapshotBatch>,
}

fn assemble_problems(input: &TrialInput, opts: &EstimatorOptions) -> Result<AssembledProblems> {
    let cfg = &input.cfg;
    let theta_grid = make_theta_grid(opts.theta_grid.unwrap_or(cfg.n_z));
    let zeta_grid = make_zeta_grid(opts.zeta_grid.unwrap_or(cfg.n_y));
    match input.source {
        CovarianceSource::Analytic => {
            let covset = CovarianceSet::analytic(cfg, &input.truth)?;
            let noise = match input.line_noise_var()? {
                v if v > 0.0 => Some(LineNoise { variance: v, seed: input.seed.subtree(11) }),
                _ => None,
            };
            let seed = input.seed.subtree(7);
            let theta = assemble_cs_problem(cfg, &covset, Dimension::Theta, theta_grid, &seed, noise)?;
            let zeta = assemble_cs_problem(cfg, &covset, Dimension::Zeta, zeta_grid, &seed, noise)?;
            Ok(AssembledProblems { theta, zeta, covset, batch: None })
        }
        CovarianceSource::Sample { t } => {
            let sigma_e = input.element_noise_var()?;
            let mut channel_rng = input.seed.stream(Purpose::Channel, 1);
            let batch = SnapshotBatch::generate(cfg, &input.truth, t, sigma_e, WavefrontMode::Exact, &mut channel_rng)?;
            let covset = CovarianceSet::sample(cfg, &batch)?;
            let seed = input.seed.subtree(7);
            if input.perturbation.is_some() {
                let theta = assemble_from_snapshots(cfg, &batch, Dimension::Theta, theta_grid, &seed, input.perturbation.as_ref())?;
                let zeta = assemble_from_snapshots(cfg, &batch, Dimension::Zeta, zeta_grid, &seed, input.perturbation.as_ref())?;
                Ok(AssembledProblems { theta, zeta, covset, batch: Some(batch) })
            } else {
                let theta = assemble_cs_problem(cfg, &covset, Dimension::Theta, theta_grid, &seed, None)?;
                let zeta = assemble_cs_problem(cfg, &covset, Dimension::Zeta, zeta_grid, &seed, None)?;
                Ok(AssembledProblems { theta, zeta, covset, batch: Some(batch) })
            }
        }
    }
}

/// Build a problem by running the snapshot-to-observation mapping per line,
/// which is where hardware perturbations of the observation map enter.
fn assemble_from_snapshots(
    cfg: &UpaConfig,
    batch: &SnapshotBatch,
    dimension: Dimension,
    grid: crate::grids::Grid,
    seed: &SeedTree,
    perturbation: Option<&Perturbation>,
) -> Result<CsProblem> {
    let rule = PairingRule::new(dimension);
    let var = crate::grids::measurement_variance(cfg);
    let tag = match dimension {
        Dimension::Theta => 0u64,
        Dimension::Zeta => 1,
        Dimension::R => 2,
    };
    let mut lines = Vec::new();
    for (ordinal, line) in rule.line_range(cfg).enumerate() {
        let mut rng = seed.stream(Purpose::Matrices, (tag << 32) | ordinal as u64);
        let b = DMatrix::from_fn(cfg.n_rf, rule.line_len(cfg), |_, _| complex_normal(&mut rng, var));
        let pert_for_line = perturbation.map(|p| Perturbation {
            error_ratio: p.error_ratio,
            seed: p.seed ^ ((tag << 56) | (ordinal as u64) << 8),
        });
        let y = form_observation_from_snapshots(cfg, batch, &rule, line, &b, pert_for_line.as_ref())?;
        lines.push(CsLine { index: line, y, b });
    }
    let mut problem = CsProblem {
        dimension,
        model: OffGridModel::new(grid, None),
        lines,
        scale: 1.0,
    };
    problem.scale = crate::grids::normalise_problem(&mut problem.lines);
    Ok(problem)
}

fn radial_problem_for_path(
    cfg: &UpaConfig,
    covset: &CovarianceSet,
    batch: Option<&SnapshotBatch>,
    perturbation: Option<&Perturbation>,
    s_hat: f64,
    opts: &EstimatorOptions,
    input: &TrialInput,
    path_ordinal: u64,
) -> Result<CsProblem> {
    let cap = opts.distance_cap.min(orthogonal_distance_cap(cfg, opts.beta_delta));
    let grid = make_distance_grid(cfg, s_hat, opts.beta_delta, cap)?;
    let ctx = RadialContext { s_hat };
    let seed = input.seed.subtree(13 + path_ordinal);
    match (batch, perturbation) {
        (Some(batch), Some(_)) => {
            // Perturbed radial lines come through the snapshot mapping.
            let mut problem = assemble_from_snapshots(cfg, batch, Dimension::R, grid, &seed, perturbation)?;
            problem.lines.retain(|l| opts.radial_slices.contains(&l.index));
            problem.model.radial = Some(ctx);
            problem.scale = crate::grids::normalise_problem(&mut problem.lines);
            Ok(problem)
        }
        _ => {
            let noise = match input.source {
                CovarianceSource::Analytic => match input.line_noise_var()? {
                    v if v > 0.0 => Some(LineNoise { variance: v, seed: input.seed.subtree(17 + path_ordinal) }),
                    _ => None,
                },
                CovarianceSource::Sample { .. } => None,
            };
            assemble_radial_problem(cfg, covset, ctx, grid, &opts.radial_slices, &seed, noise)
        }
    }
}

/// Prior for the radial support chain: the grid is short, so the chain is
/// tuned to expect a single active ring.
fn radial_prior(base: &LayeredPrior, grid_len: usize) -> LayeredPrior {
    let pi1 = (1.0 / grid_len.max(2) as f64).clamp(0.05, 0.5);
    LayeredPrior {
        p01: base.p10 * pi1 / (1.0 - pi1),
        p10: base.p10,
        ..*base
    }
}

fn angular_values(problem: &CsProblem, est: &DimensionEstimate) -> Vec<f64> {
    let _ = problem;
    est.values.clone()
}

/// Run the full estimation pipeline on one trial.
pub fn estimate(input: &TrialInput, opts: &EstimatorOptions) -> Result<TrialOutput> {
    let l = input.truth.len();
    if l == 0 {
        return Err(Error::Estimation("empty path set".into()));
    }
    let problems = assemble_problems(input, opts)?;
    let theta_sol = solve_dimension(&input.cfg, &problems.theta, &opts.prior, &opts.solver)?;
    let zeta_sol = solve_dimension(&input.cfg, &problems.zeta, &opts.prior, &opts.solver)?;
    let (result, diagnostics) = fuse_and_reconstruct(
        input,
        opts,
        &problems,
        &theta_sol,
        &zeta_sol,
        None,
    )?;
    let mut nmse_trace = Vec::new();
    if opts.solver.track_trajectory {
        let iters = theta_sol.trajectory.len().max(zeta_sol.trajectory.len());
        for k in 0..iters {
            let snap = |sol: &DimensionSolution, k: usize| -> DimensionSolution {
                let i = k.min(sol.trajectory.len().saturating_sub(1));
                let point = &sol.trajectory[i];
                let mut s = sol.clone();
                s.offsets = point.offsets.clone();
                s.state.nu_post = point.nu_post.clone();
                for (line, mu) in s.state.lines.iter_mut().zip(&point.mu) {
                    line.mu = mu.clone();
                }
                s.trajectory = Vec::new();
                s
            };
            let t_k = snap(&theta_sol, k);
            let z_k = snap(&zeta_sol, k);
            match fuse_and_reconstruct(input, opts, &problems, &t_k, &z_k, None) {
                Ok((r, _)) => nmse_trace.push(r.nmse_r),
                Err(_) => nmse_trace.push(f64::NAN),
            }
        }
    }
    Ok(TrialOutput { result, diagnostics, nmse_trace })
}

fn fuse_and_reconstruct(
    input: &TrialInput,
    opts: &EstimatorOptions,
    problems: &AssembledProblems,
    theta_sol: &DimensionSolution,
    zeta_sol: &DimensionSolution,
    forced_assignment: Option<Assignment>,
) -> Result<(EstimationResult, TrialDiagnostics)> {
    let cfg = &input.cfg;
    let l = input.truth.len();
    let theta_est = DimensionEstimate::from_solution(cfg, &problems.theta, theta_sol, l)?;
    let zeta_est = DimensionEstimate::from_solution(cfg, &problems.zeta, zeta_sol, l)?;

    // Angular index correction (or the identity pairing).
    let assignment = match forced_assignment {
        Some(a) => a,
        None => {
            if opts.aic_enabled {
                angular_index_correction(&theta_est, &zeta_est)?
            } else {
                Assignment { permutation: (0..l).collect(), cost: f64::NAN }
            }
        }
    };
    let zeta_matched = {
        let mut m = zeta_est.clone();
        for (slot, &src) in assignment.permutation.iter().enumerate() {
            m.active_indices[slot] = zeta_est.active_indices[src];
            m.offsets_at_active[slot] = zeta_est.offsets_at_active[src];
            m.values[slot] = zeta_est.values[src];
            for row in 0..zeta_est.per_line_amplitudes.nrows() {
                m.per_line_amplitudes[(row, slot)] = zeta_est.per_line_amplitudes[(row, src)];
            }
        }
        m
    };
    let (e_theta, e_zeta) = power_evidence(&theta_est, &zeta_matched)?;

    let theta_vals = angular_values(&problems.theta, &theta_est);
    let mut diagnostics = TrialDiagnostics {
        iterations_theta: theta_sol.state.iterations,
        iterations_zeta: zeta_sol.state.iterations,
        iterations_r: 0,
        converged: theta_sol.state.converged && zeta_sol.state.converged,
        clip_events: 0,
        ridge_events: theta_sol.state.ridge_events + zeta_sol.state.ridge_events,
    };
    let mut paths = Vec::with_capacity(l);
    for q in 0..l {
        let theta_hat = theta_vals[q].clamp(-1.0, 1.0).acos();
        let sin_zeta = zeta_matched.values[q];
        let (phi_hat, clipped) = recover_phi(theta_hat, sin_zeta)?;
        if clipped {
            diagnostics.clip_events += 1;
        }
        // Path power: mean of the matched evidences, with the 1/L channel
        // normalisation removed.
        let power = (l as f64 * 0.5 * (e_theta[q] + e_zeta[q])).max(0.0);
        let r_hat = if opts.far_field_reconstruction {
            f64::INFINITY
        } else {
            let s_hat = theta_hat.sin() * phi_hat.sin();
            let problem = radial_problem_for_path(
                cfg,
                &problems.covset,
                problems.batch.as_ref(),
                input.perturbation.as_ref(),
                s_hat,
                opts,
                input,
                q as u64,
            )?;
            let prior = radial_prior(&opts.prior, problem.grid_len());
            let sol = solve_dimension(cfg, &problem, &prior, &opts.solver)?;
            diagnostics.iterations_r += sol.state.iterations;
            diagnostics.ridge_events += sol.state.ridge_events;
            let ring = sol.active_set(1)[0];
            let u = (problem.model.grid.transform[ring] + sol.offsets[ring])
                .clamp(0.0, 1.0 / cfg.rayleigh_lower());
            if u > 0.0 {
                1.0 / u
            } else {
                f64::INFINITY
            }
        };
        paths.push(PathEstimate { theta: theta_hat, phi: phi_hat, r: r_hat, power, phi_clipped: clipped });
    }

    // Score the reconstruction against the true statistics.
    let truth_powers = input.truth.ensemble_powers(cfg)?;
    let truth_params: Vec<(f64, f64, f64, f64)> = input
        .truth
        .paths
        .iter()
        .zip(&truth_powers)
        .map(|(p, &pow)| (p.theta, p.phi, p.r, pow))
        .collect();
    let truth_factor = FactoredCorrelation::from_parameters(cfg, &truth_params, WavefrontMode::Exact)?;
    let est_params: Vec<(f64, f64, f64, f64)> =
        paths.iter().map(|p| (p.theta, p.phi, p.r, p.power)).collect();
    let est_factor = FactoredCorrelation::from_parameters(cfg, &est_params, WavefrontMode::Exact)?;
    let nmse_r = nmse(&truth_factor, &est_factor);

    let iterations = diagnostics.iterations_theta + diagnostics.iterations_zeta + diagnostics.iterations_r;
    let result = EstimationResult {
        paths,
        assignment,
        nmse_r,
        iterations,
        converged: diagnostics.converged,
    };
    Ok((result, diagnostics))
}
