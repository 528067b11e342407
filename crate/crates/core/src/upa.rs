//! Uniform planar array geometry: element positions, projected-aperture
//! path gain, spherical-wavefront extra distances and array responses.
//!
//! The array sits in the y-z plane, centred at the origin, with antenna
//! elements on a symmetric integer grid (n_y, n_z). Azimuth `theta` is
//! measured from the +z axis, elevation `phi` from the x-z plane, so a
//! source at distance r sits at
//! `s = r [sin(theta) cos(phi), sin(theta) sin(phi), cos(theta)]`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Coefficient of the radiating near-field lower bound c * sqrt(D^3 / lambda).
///
/// 0.62 = sqrt(2 / (3 sqrt(3))) is the classical constant at which the
/// worst-case residual of the second-order (Fresnel) expansion reaches
/// lambda/16; below it the expansion is no longer trustworthy.
pub const FRESNEL_LOWER_COEFF: f64 = 0.62;

/// Which extra-distance model the array response is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WavefrontMode {
    /// Exact Euclidean distances; used to synthesise channels.
    Exact,
    /// Second-order Fresnel expansion; used by estimation dictionaries.
    Fresnel,
}

/// Physical description of the UPA plus front-end dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpaConfig {
    /// Number of elements along y (odd).
    pub n_y: usize,
    /// Number of elements along z (odd).
    pub n_z: usize,
    /// Inter-element spacing in meters.
    pub delta: f64,
    /// Carrier wavelength in meters.
    pub lambda: f64,
    /// Effective element aperture A in m^2.
    pub element_area: f64,
    /// RF chains behind the aperture.
    pub n_rf: usize,
    /// Pilot symbols per estimation block.
    pub n_pilots: usize,
}

impl UpaConfig {
    pub fn new(
        n_y: usize,
        n_z: usize,
        lambda: f64,
        delta: f64,
        element_area: f64,
        n_rf: usize,
        n_pilots: usize,
    ) -> Result<Self> {
        let cfg = Self { n_y, n_z, delta, lambda, element_area, n_rf, n_pilots };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Quarter-wavelength spacing with the isotropic aperture
    /// A = lambda^2 / 4pi, capped at delta^2. At delta = lambda/4 the cap is
    /// active and the plate is a contiguous surface (occupation ratio 1);
    /// the uncapped isotropic value would overlap neighbouring elements.
    pub fn with_carrier(n_y: usize, n_z: usize, carrier_hz: f64, n_rf: usize, n_pilots: usize) -> Result<Self> {
        let lambda = SPEED_OF_LIGHT / carrier_hz;
        let delta = lambda / 4.0;
        let area = (lambda * lambda / (4.0 * PI)).min(delta * delta);
        Self::new(n_y, n_z, lambda, delta, area, n_rf, n_pilots)
    }

    /// 33 x 17 elements at 2 GHz. Small enough for minute-scale Monte Carlo
    /// sweeps while keeping the near/far transition at ~26 m like the full
    /// array.
    pub fn desk() -> Self {
        Self::with_carrier(33, 17, 2.0e9, 16, 32).expect("desk preset is valid")
    }

    /// 129 x 65 elements at 30 GHz.
    pub fn full_scale() -> Self {
        Self::with_carrier(129, 65, 30.0e9, 16, 32).expect("full-scale preset is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.n_y % 2 == 0 || self.n_z % 2 == 0 || self.n_y == 0 || self.n_z == 0 {
            return Err(Error::InvalidConfig(format!(
                "element counts must be odd and positive, got {} x {}",
                self.n_y, self.n_z
            )));
        }
        if !(self.lambda > 0.0) || !(self.delta > 0.0) {
            return Err(Error::InvalidConfig("wavelength and spacing must be positive".into()));
        }
        // Nyquist sampling of the covariance phases needs delta <= lambda/4.
        if self.delta > self.lambda / 4.0 * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "spacing {} exceeds lambda/4 = {}",
                self.delta,
                self.lambda / 4.0
            )));
        }
        if !(self.element_area > 0.0) || self.element_area > self.delta * self.delta * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "element area {} must lie in (0, delta^2 = {}]",
                self.element_area,
                self.delta * self.delta
            )));
        }
        if self.n_rf == 0 || self.n_pilots == 0 {
            return Err(Error::InvalidConfig("n_rf and n_pilots must be positive".into()));
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.n_y * self.n_z
    }

    /// Half-extent of the y index set: n_y ranges over -half_y ..= half_y.
    pub fn half_y(&self) -> i64 {
        (self.n_y as i64 - 1) / 2
    }

    pub fn half_z(&self) -> i64 {
        (self.n_z as i64 - 1) / 2
    }

    pub fn index_in_range(&self, n_y: i64, n_z: i64) -> bool {
        n_y.abs() <= self.half_y() && n_z.abs() <= self.half_z()
    }

    /// Flattened element index for the symmetric pair (n_y, n_z).
    pub fn element_index(&self, n_y: i64, n_z: i64) -> Result<usize> {
        if !self.index_in_range(n_y, n_z) {
            return Err(Error::IndexOutOfRange(n_y, n_z));
        }
        Ok(((n_y + self.half_y()) as usize) * self.n_z + (n_z + self.half_z()) as usize)
    }

    /// Centre of the (n_y, n_z)-th element: [0, n_y delta, n_z delta].
    pub fn element_center(&self, n_y: i64, n_z: i64) -> Result<[f64; 3]> {
        if !self.index_in_range(n_y, n_z) {
            return Err(Error::IndexOutOfRange(n_y, n_z));
        }
        Ok([0.0, n_y as f64 * self.delta, n_z as f64 * self.delta])
    }

    /// Array aperture D = delta sqrt(N_y^2 + N_z^2).
    pub fn aperture(&self) -> f64 {
        self.delta * ((self.n_y * self.n_y + self.n_z * self.n_z) as f64).sqrt()
    }

    /// Far-field boundary 2 D^2 / lambda.
    pub fn rayleigh_upper(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.lambda
    }

    /// Radiating near-field lower bound 0.62 sqrt(D^3 / lambda); the Fresnel
    /// expansion is accurate to lambda/16 per element above it.
    pub fn rayleigh_lower(&self) -> f64 {
        let d = self.aperture();
        FRESNEL_LOWER_COEFF * (d * d * d / self.lambda).sqrt()
    }
}

/// Source position for (theta, phi, r).
pub fn source_position(theta: f64, phi: f64, r: f64) -> [f64; 3] {
    [
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
        r * theta.cos(),
    ]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn check_direction(theta: f64, phi: f64, r: f64) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::BadGeometry(format!("distance must be positive, got {r}")));
    }
    if theta.sin() * phi.cos() <= 0.0 {
        return Err(Error::BadGeometry(
            "source is behind or coplanar with the array (sin(theta)cos(phi) <= 0)".into(),
        ));
    }
    Ok(())
}

/// Projected-aperture channel power gain of one element, closed form:
/// A r sin(theta) cos(phi) / (4 pi |s - p|^3).
pub fn channel_power_gain(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, n_y: i64, n_z: i64) -> Result<f64> {
    check_direction(theta, phi, r)?;
    let p = cfg.element_center(n_y, n_z)?;
    let s = source_position(theta, phi, r);
    let d = norm3([s[0] - p[0], s[1] - p[1], s[2] - p[2]]);
    Ok(cfg.element_area * r * theta.sin() * phi.cos() / (4.0 * PI * d * d * d))
}

// 8-point Gauss-Legendre nodes and weights on [-1, 1].
const GL8_X: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_W: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Power gain by 8x8 Gauss-Legendre quadrature of the free-space kernel over
/// the element surface. Reference implementation for the closed form above.
pub fn channel_power_gain_exact(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, n_y: i64, n_z: i64) -> Result<f64> {
    check_direction(theta, phi, r)?;
    let p = cfg.element_center(n_y, n_z)?;
    let s = source_position(theta, phi, r);
    let half = cfg.element_area.sqrt() / 2.0;
    let mut acc = 0.0;
    for (i, &xi) in GL8_X.iter().enumerate() {
        for (j, &xj) in GL8_X.iter().enumerate() {
            let y = p[1] + half * xi;
            let z = p[2] + half * xj;
            let dvec = [s[0], s[1] - y, s[2] - z];
            let d = norm3(dvec);
            // (s - pbar)^T e_x = s_x; the element surface has x = 0.
            acc += GL8_W[i] * GL8_W[j] * s[0] / (4.0 * PI * d * d * d);
        }
    }
    Ok(acc * half * half)
}

/// Geometry term g = (n_y sin(theta) sin(phi) + n_z cos(theta)) / sqrt(n_y^2 + n_z^2).
pub fn geometry_term(theta: f64, phi: f64, n_y: i64, n_z: i64) -> f64 {
    if n_y == 0 && n_z == 0 {
        return 0.0;
    }
    let num = n_y as f64 * theta.sin() * phi.sin() + n_z as f64 * theta.cos();
    num / ((n_y * n_y + n_z * n_z) as f64).sqrt()
}

/// Exact extra distance |s - p| - r travelled to element (n_y, n_z).
pub fn extra_distance_exact(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, n_y: i64, n_z: i64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::BadGeometry(format!("distance must be positive, got {r}")));
    }
    if !cfg.index_in_range(n_y, n_z) {
        return Err(Error::IndexOutOfRange(n_y, n_z));
    }
    let rp = cfg.delta * ((n_y * n_y + n_z * n_z) as f64).sqrt();
    let g = geometry_term(theta, phi, n_y, n_z);
    if r.is_infinite() {
        // Planar-wavefront limit.
        return Ok(-rp * g);
    }
    let u = rp / r;
    // r [sqrt(1 + u^2 - 2ug) - 1], evaluated in a cancellation-safe form.
    let x = u * u - 2.0 * u * g;
    Ok(r * x / ((1.0 + x).sqrt() + 1.0))
}

/// Fresnel (second order) extra distance
/// (n_y^2 + n_z^2) delta^2 (1 - g^2) / (2r) - sqrt(n_y^2 + n_z^2) delta g.
pub fn extra_distance_fresnel(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, n_y: i64, n_z: i64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::BadGeometry(format!("distance must be positive, got {r}")));
    }
    if !cfg.index_in_range(n_y, n_z) {
        return Err(Error::IndexOutOfRange(n_y, n_z));
    }
    let rp = cfg.delta * ((n_y * n_y + n_z * n_z) as f64).sqrt();
    let g = geometry_term(theta, phi, n_y, n_z);
    Ok(rp * rp * (1.0 - g * g) / (2.0 * r) - rp * g)
}

/// Spherical-wavefront array response; entries exp(-j 2pi/lambda * extra_distance).
pub fn array_response(cfg: &UpaConfig, theta: f64, phi: f64, r: f64, mode: WavefrontMode) -> Result<nalgebra::DVector<Complex64>> {
    if !(r > 0.0) {
        return Err(Error::BadGeometry(format!("distance must be positive, got {r}")));
    }
    let k = 2.0 * PI / cfg.lambda;
    let mut v = nalgebra::DVector::from_element(cfg.n_elements(), Complex64::new(0.0, 0.0));
    for ny in -cfg.half_y()..=cfg.half_y() {
        for nz in -cfg.half_z()..=cfg.half_z() {
            let dr = match mode {
                WavefrontMode::Exact => extra_distance_exact(cfg, theta, phi, r, ny, nz)?,
                WavefrontMode::Fresnel => extra_distance_fresnel(cfg, theta, phi, r, ny, nz)?,
            };
            let idx = cfg.element_index(ny, nz)?;
            v[idx] = Complex64::from_polar(1.0, -k * dr);
        }
    }
    Ok(v)
}
