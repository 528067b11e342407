use dere_core::estimator::*;
use dere_core::rng::SeedTree;
use dere_core::grids::{make_theta_grid, make_zeta_grid, make_distance_grid, orthogonal_distance_cap};
use dere_core::channel::{Path, PathSet};
use dere_core::UpaConfig;
use num_complex::Complex64;

fn main() {
    let cfg = UpaConfig::desk();
    let opts = scheme_variants(Scheme::DereVm);
    let tgrid = make_theta_grid(cfg.n_z);
    let zgrid = make_zeta_grid(cfg.n_y);
    let slots = [(3usize, 8usize), (9, 22), (13, 27)];
    let powers: [f64; 3] = [1.0, 0.5, 0.25];
    let mut paths = Vec::new();
    for (&(ti, zi), &pow) in slots.iter().zip(&powers) {
        let c = tgrid.transform[ti];
        let s = zgrid.transform[zi];
        let theta = c.acos();
        let phi = (s / theta.sin()).asin();
        let cap = opts.distance_cap.min(orthogonal_distance_cap(&cfg, opts.beta_delta));
        let grid = make_distance_grid(&cfg, s, opts.beta_delta, cap).unwrap();
        let r = grid.points[grid.len() - 1];
        println!("truth: theta={theta:.4} phi={phi:.4} r={r:.3} pow={pow} (cos={c:.4} sin_zeta={s:.4}) rgrid_len={}", grid.len());
        paths.push(Path { theta, phi, r, beta: Complex64::new(pow.sqrt(), 0.0), is_los: true });
    }
    let truth = PathSet { paths };
    let input = TrialInput::noiseless(cfg.clone(), truth.clone(), SeedTree::new(102));
    let out = estimate(&input, &opts).unwrap();
    println!("NMSE = {:.3e}  perm {:?} cost {:.3e}", out.result.nmse_r, out.result.assignment.permutation, out.result.assignment.cost);
    for p in &out.result.paths {
        println!("est: theta={:.4} phi={:.4} r={:.3} pow={:.4} clipped={}", p.theta, p.phi, p.r, p.power, p.phi_clipped);
    }
}
