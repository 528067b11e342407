//! Uniform grids, off-grid offsets, measurement matrices and dictionaries
//! for the three per-dimension compressive sensing problems.
//!
//! Each dimension is gridded uniformly in the variable its covariance phase
//! is linear (or chirp-linear) in: cos(theta) for azimuth lines, sin(zeta)
//! for the composite elevation angle, and 1/r for distance. Offsets are
//! carried in the same transform variable, which keeps dictionary
//! derivatives trivial and clipping cells rectangular.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::covariance::{CovarianceSet, Dimension, PairingRule};
use crate::error::{Error, Result};
use crate::rng::{complex_normal, Purpose, SeedTree};
use crate::upa::UpaConfig;

/// A one-dimensional sampling grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dimension: Dimension,
    /// Transform-variable samples (cos theta | sin zeta | 1/r), strictly
    /// increasing.
    pub transform: Vec<f64>,
    /// The same points in the parameter domain (theta | zeta | r).
    pub points: Vec<f64>,
    /// Transform-domain region the grid tiles; offset cells at the edges
    /// extend to these bounds.
    pub domain: (f64, f64),
}

impl Grid {
    pub fn len(&self) -> usize {
        self.transform.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transform.is_empty()
    }

    /// Voronoi cell of grid point `q` in the transform variable; offsets are
    /// confined to it so the support index keeps its identity.
    pub fn cell(&self, q: usize) -> (f64, f64) {
        let x = self.transform[q];
        let lo = if q == 0 { self.domain.0 } else { 0.5 * (self.transform[q - 1] + x) };
        let hi = if q + 1 == self.len() { self.domain.1 } else { 0.5 * (x + self.transform[q + 1]) };
        (lo - x, hi - x)
    }

    /// Index of the grid point nearest to a transform value.
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        let mut err = f64::INFINITY;
        for (q, &g) in self.transform.iter().enumerate() {
            let d = (x - g).abs();
            if d < err {
                err = d;
                best = q;
            }
        }
        best
    }
}

/// Azimuth grid, uniform in cos(theta) over [-1, 1), matching the
/// pi n_z cos(theta) phase of the azimuth lines.
pub fn make_theta_grid(n: usize) -> Grid {
    assert!(n >= 1);
    let transform: Vec<f64> = (0..n).map(|k| (2.0 / n as f64) * (k as f64 - (n as f64 - 1.0) / 2.0)).collect();
    let points = transform.iter().map(|&c| c.clamp(-1.0, 1.0).acos()).collect();
    Grid { dimension: Dimension::Theta, transform, points, domain: (-1.0, 1.0) }
}

/// Composite-elevation grid, uniform in sin(zeta) over [-1, 1).
pub fn make_zeta_grid(n: usize) -> Grid {
    assert!(n >= 1);
    let transform: Vec<f64> = (0..n).map(|k| (2.0 / n as f64) * (k as f64 - (n as f64 - 1.0) / 2.0)).collect();
    let points = transform.iter().map(|&s| s.clamp(-1.0, 1.0).asin()).collect();
    Grid { dimension: Dimension::Zeta, transform, points, domain: (-1.0, 1.0) }
}

/// Far anchor of the harmonic distance grid, N_y^2 / (2 beta^2 lambda):
/// its first point is deep in the planar-wavefront region.
pub fn distance_anchor(cfg: &UpaConfig, beta_delta: f64) -> f64 {
    (cfg.n_y * cfg.n_y) as f64 / (2.0 * beta_delta * beta_delta * cfg.lambda)
}

/// 1/r step at which adjacent radial dictionary columns decohere below 1/2.
///
/// The inner product of two chirp columns spaced du apart behaves like the
/// Fresnel integral at argument z = M sqrt(lambda du / 8) (M the half
/// aperture in elements); z = sqrt(2) beta pushes the normalised magnitude
/// under 0.5 at beta = 1.2.
pub fn orthogonal_inverse_r_step(cfg: &UpaConfig, beta_delta: f64) -> f64 {
    let m = cfg.half_y() as f64;
    16.0 * beta_delta * beta_delta / (m * m * cfg.lambda)
}

/// Largest point count for which uniform 1/r subsampling of the radial grid
/// keeps every column pair below coherence 1/2.
pub fn orthogonal_distance_cap(cfg: &UpaConfig, beta_delta: f64) -> usize {
    let u_span = 1.0 / cfg.rayleigh_lower();
    let k = 1 + (u_span / orthogonal_inverse_r_step(cfg, beta_delta)).floor() as usize;
    k.max(1)
}

/// Harmonic distance grid: 1/r uniform with far anchor `distance_anchor`,
/// truncated at rayleigh_lower and subsampled uniformly in 1/r to at most
/// `cap` points.
pub fn make_distance_grid(cfg: &UpaConfig, g: f64, beta_delta: f64, cap: usize) -> Result<Grid> {
    if !(beta_delta > 0.0) || cap == 0 {
        return Err(Error::InvalidConfig("beta_delta > 0 and cap >= 1 required".into()));
    }
    let d_min = cfg.rayleigh_lower();
    let scaled_anchor = distance_anchor(cfg, beta_delta) * (1.0 - g * g);
    if scaled_anchor < d_min {
        return Err(Error::EmptyGrid(format!(
            "anchor {scaled_anchor:.3} m below the near-field floor {d_min:.3} m"
        )));
    }
    // r_n = anchor / (n + 1) >= d_min  <=>  n + 1 <= anchor / d_min.
    let uncapped = (scaled_anchor / d_min).floor() as usize;
    let kept = uncapped.min(cap);
    let mut transform = Vec::with_capacity(kept);
    let mut points = Vec::with_capacity(kept);
    for k in 0..kept {
        // Uniform subsample of the harmonic index range, first and last kept.
        let n = if kept == 1 {
            0
        } else {
            ((k as f64) * ((uncapped - 1) as f64) / ((kept - 1) as f64)).round() as usize
        };
        let u = (n as f64 + 1.0) / scaled_anchor;
        transform.push(u);
        points.push(1.0 / u);
    }
    Ok(Grid { dimension: Dimension::R, transform, points, domain: (0.0, 1.0 / d_min) })
}

/// Number of uncapped harmonic points, the floor expression the grid is
/// truncated from.
pub fn distance_grid_uncapped_len(cfg: &UpaConfig, g: f64, beta_delta: f64) -> usize {
    (distance_anchor(cfg, beta_delta) * (1.0 - g * g) / cfg.rayleigh_lower()).floor() as usize
}

/// Chirp and demodulation context of a radial dictionary, conditioned on
/// one path's estimated angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialContext {
    /// sin(theta_hat) sin(phi_hat) of the path the problem is built for.
    pub s_hat: f64,
}

impl RadialContext {
    /// Quadratic phase coefficient pi lambda (1 - s^2) / 16 multiplying
    /// n_y^2 / r.
    pub fn chirp_coeff(&self, cfg: &UpaConfig) -> f64 {
        PI * cfg.lambda * (1.0 - self.s_hat * self.s_hat) / 16.0
    }
}

/// Off-grid sampling model: a grid plus one offset per grid point, with the
/// dictionary builders below. Offsets live in the transform variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffGridModel {
    pub grid: Grid,
    pub offsets: Vec<f64>,
    /// Present for radial problems only.
    pub radial: Option<RadialContext>,
}

impl OffGridModel {
    pub fn new(grid: Grid, radial: Option<RadialContext>) -> Self {
        let offsets = vec![0.0; grid.len()];
        Self { grid, offsets, radial }
    }

    pub fn effective_transform(&self, q: usize) -> f64 {
        self.grid.transform[q] + self.offsets[q]
    }

    /// Clip a proposed offset into the Voronoi cell of its grid point.
    pub fn clip_offset(&self, q: usize, offset: f64) -> f64 {
        let (lo, hi) = self.grid.cell(q);
        offset.clamp(lo, hi)
    }
}

/// Azimuth dictionary: entry (n_z, q) = exp(j pi n_z (cos grid_q + offset_q)).
pub fn dictionary_theta(grid: &Grid, offsets: &[f64], half_z: i64) -> DMatrix<Complex64> {
    let rows = (2 * half_z + 1) as usize;
    DMatrix::from_fn(rows, grid.len(), |i, q| {
        let nz = i as i64 - half_z;
        Complex64::from_polar(1.0, PI * nz as f64 * (grid.transform[q] + offsets[q]))
    })
}

/// Composite-elevation dictionary: entry (n_y, q) = exp(j pi n_y (sin grid_q + offset_q)).
pub fn dictionary_zeta(grid: &Grid, offsets: &[f64], half_y: i64) -> DMatrix<Complex64> {
    let rows = (2 * half_y + 1) as usize;
    DMatrix::from_fn(rows, grid.len(), |i, q| {
        let ny = i as i64 - half_y;
        Complex64::from_polar(1.0, PI * ny as f64 * (grid.transform[q] + offsets[q]))
    })
}

/// Radial dictionary conditioned on the path angles: entry (n_y, q) =
/// exp(j [c n_y^2 (1/r_q + du_q) - (pi/2) n_y s_hat]) with
/// c = pi lambda (1 - s_hat^2)/16, matching the radial covariance slice.
pub fn dictionary_r(
    cfg: &UpaConfig,
    grid: &Grid,
    offsets: &[f64],
    ctx: &RadialContext,
) -> DMatrix<Complex64> {
    let half_y = cfg.half_y();
    let rows = (2 * half_y + 1) as usize;
    let c = ctx.chirp_coeff(cfg);
    DMatrix::from_fn(rows, grid.len(), |i, q| {
        let ny = (i as i64 - half_y) as f64;
        let u = grid.transform[q] + offsets[q];
        Complex64::from_polar(1.0, c * ny * ny * u - PI / 2.0 * ny * ctx.s_hat)
    })
}

impl OffGridModel {
    /// Build the dictionary for the current offsets.
    pub fn dictionary(&self, cfg: &UpaConfig) -> DMatrix<Complex64> {
        match self.grid.dimension {
            Dimension::Theta => dictionary_theta(&self.grid, &self.offsets, cfg.half_z()),
            Dimension::Zeta => dictionary_zeta(&self.grid, &self.offsets, cfg.half_y()),
            Dimension::R => dictionary_r(cfg, &self.grid, &self.offsets, self.radial.as_ref().expect("radial context")),
        }
    }

    /// Analytic derivative of dictionary column q with respect to its offset.
    pub fn column_derivative(&self, cfg: &UpaConfig, dict: &DMatrix<Complex64>, q: usize) -> DVector<Complex64> {
        let rows = dict.nrows();
        match self.grid.dimension {
            Dimension::Theta => {
                let half = cfg.half_z();
                DVector::from_fn(rows, |i, _| {
                    let n = (i as i64 - half) as f64;
                    Complex64::new(0.0, PI * n) * dict[(i, q)]
                })
            }
            Dimension::Zeta => {
                let half = cfg.half_y();
                DVector::from_fn(rows, |i, _| {
                    let n = (i as i64 - half) as f64;
                    Complex64::new(0.0, PI * n) * dict[(i, q)]
                })
            }
            Dimension::R => {
                let half = cfg.half_y();
                let c = self.radial.as_ref().expect("radial context").chirp_coeff(cfg);
                DVector::from_fn(rows, |i, _| {
                    let n = (i as i64 - half) as f64;
                    Complex64::new(0.0, c * n * n) * dict[(i, q)]
                })
            }
        }
    }
}

/// One observation line with its own measurement matrix.
#[derive(Debug, Clone)]
pub struct CsLine {
    pub index: i64,
    pub y: DVector<Complex64>,
    pub b: DMatrix<Complex64>,
}

/// The per-dimension compressive sensing problem: observations over lines,
/// one off-grid model shared by all lines.
#[derive(Debug, Clone)]
pub struct CsProblem {
    pub dimension: Dimension,
    pub model: OffGridModel,
    pub lines: Vec<CsLine>,
    /// Amplitude applied as y / scale before solving; recovered coefficients
    /// are multiplied back.
    pub scale: f64,
}

impl CsProblem {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn grid_len(&self) -> usize {
        self.model.grid.len()
    }
}

/// Additive observation noise in the covariance-line domain.
#[derive(Debug, Clone, Copy)]
pub struct LineNoise {
    pub variance: f64,
    pub seed: SeedTree,
}

/// Entry variance of the measurement matrices; the value 1/N_y mirrors the
/// stated draw of the wide matrices. The scale is absorbed by the
/// normalisation either way.
pub fn measurement_variance(cfg: &UpaConfig) -> f64 {
    1.0 / cfg.n_y as f64
}

fn draw_measurement(
    cfg: &UpaConfig,
    cols: usize,
    seed: &SeedTree,
    dim: Dimension,
    line_ordinal: u64,
) -> DMatrix<Complex64> {
    let tag = match dim {
        Dimension::Theta => 0u64,
        Dimension::Zeta => 1,
        Dimension::R => 2,
    };
    let mut rng = seed.stream(Purpose::Matrices, (tag << 32) | line_ordinal);
    let var = measurement_variance(cfg);
    DMatrix::from_fn(cfg.n_rf, cols, |_, _| complex_normal(&mut rng, var))
}

/// Rescale the observations of a problem to unit mean square, returning
/// the applied scale.
pub fn normalise_problem(lines: &mut [CsLine]) -> f64 {
    let total: f64 = lines.iter().map(|l| l.y.norm_squared()).sum();
    let count: usize = lines.iter().map(|l| l.y.len()).sum();
    let scale = (total / count.max(1) as f64).sqrt();
    if scale > 0.0 {
        for l in lines.iter_mut() {
            l.y /= Complex64::new(scale, 0.0);
        }
    }
    scale.max(f64::MIN_POSITIVE)
}

/// Assemble the azimuth or composite-elevation problem from a covariance
/// set: one compressed observation per line, per-line measurement matrices
/// drawn from the seed, optional line noise ahead of the compression.
pub fn assemble_cs_problem(
    cfg: &UpaConfig,
    covset: &CovarianceSet,
    dimension: Dimension,
    grid: Grid,
    seed: &SeedTree,
    noise: Option<LineNoise>,
) -> Result<CsProblem> {
    if dimension == Dimension::R {
        return Err(Error::Estimation(
            "radial problems are assembled per path via assemble_radial_problem".into(),
        ));
    }
    let rule = PairingRule::new(dimension);
    let mut lines = Vec::new();
    for (ordinal, line) in covset.lines(cfg, dimension).into_iter().enumerate() {
        let mut w = covset.line(cfg, dimension, line)?;
        if let Some(n) = &noise {
            let mut rng = n.seed.stream(Purpose::Noise, ((ordinal as u64) << 2) | dim_tag(dimension));
            for e in w.iter_mut() {
                *e += complex_normal(&mut rng, n.variance);
            }
        }
        let b = draw_measurement(cfg, rule.line_len(cfg), seed, dimension, ordinal as u64);
        lines.push(CsLine { index: line, y: &b * w, b });
    }
    let mut problem = CsProblem {
        dimension,
        model: OffGridModel::new(grid, None),
        lines,
        scale: 1.0,
    };
    problem.scale = normalise_problem(&mut problem.lines);
    Ok(problem)
}

fn dim_tag(d: Dimension) -> u64 {
    match d {
        Dimension::Theta => 0,
        Dimension::Zeta => 1,
        Dimension::R => 2,
    }
}

/// Assemble the radial problem for one path, conditioned on its estimated
/// angles. By default only the central slice feeds it; `slices` selects
/// shifted-reference lines when more are wanted.
pub fn assemble_radial_problem(
    cfg: &UpaConfig,
    covset: &CovarianceSet,
    ctx: RadialContext,
    grid: Grid,
    slices: &[i64],
    seed: &SeedTree,
    noise: Option<LineNoise>,
) -> Result<CsProblem> {
    let mut lines = Vec::new();
    for (ordinal, &slice) in slices.iter().enumerate() {
        let mut w = covset.line(cfg, Dimension::R, slice)?;
        if let Some(n) = &noise {
            let mut rng = n.seed.stream(Purpose::Noise, ((ordinal as u64) << 2) | dim_tag(Dimension::R));
            for e in w.iter_mut() {
                *e += complex_normal(&mut rng, n.variance);
            }
        }
        let b = draw_measurement(cfg, cfg.n_y, seed, Dimension::R, ordinal as u64);
        lines.push(CsLine { index: slice, y: &b * w, b });
    }
    let mut problem = CsProblem {
        dimension: Dimension::R,
        model: OffGridModel::new(grid, Some(ctx)),
        lines,
        scale: 1.0,
    };
    problem.scale = normalise_problem(&mut problem.lines);
    Ok(problem)
}
