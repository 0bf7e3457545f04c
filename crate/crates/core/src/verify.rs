//! Invariant suite for the spectral operators, run on random fields.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::spectral::{
    apply_a_hat, curl_scalar, inner_grad, inner_l2, inner_v, inner_w, norm_grad, norm_l2, norm_v, norm_w, norm_wstar,
    solve_generalized_stokes, wavenumbers, BilinearOperator, FluidParams, SpectralField, Wavenumber,
};

/// Outcome of one invariant at one cutoff. `worst` is the largest
/// normalized violation observed; the check passes when `worst <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub cutoff: usize,
    pub samples: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl InvariantCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Empirical bound `max ||B_hat(u, u)||_{W*} / ||u||_V^2` at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BilinearBound {
    pub cutoff: usize,
    pub samples: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorReport {
    pub checks: Vec<InvariantCheck>,
    pub bounds: Vec<BilinearBound>,
}

impl OperatorReport {
    /// The bound constant may not grow by more than 2x per doubling of `N`.
    pub fn bound_growth_ok(&self) -> bool {
        self.bounds.iter().all(|a| {
            self.bounds
                .iter()
                .filter(|b| b.cutoff == 2 * a.cutoff)
                .all(|b| b.max_ratio <= 2.0 * a.max_ratio)
        })
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(InvariantCheck::passed) && self.bound_growth_ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,cutoff,samples,worst,tolerance,passed\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                c.name,
                c.cutoff,
                c.samples,
                c.worst,
                c.tolerance,
                c.passed()
            ));
        }
        for b in &self.bounds {
            out.push_str(&format!(
                "bilinear_bound,{},{},{:e},,{}\n",
                b.cutoff,
                b.samples,
                b.max_ratio,
                self.bound_growth_ok()
            ));
        }
        out
    }
}

struct Worst(f64);

impl Worst {
    fn see(&mut self, v: f64) {
        if v > self.0 || v.is_nan() {
            self.0 = v;
        }
    }
}

/// Sums `amp(k, u_k) exp(i 2 pi k.j / m)` over retained modes on an `m x m` grid.
fn synthesize(u: &SpectralField, m: usize, amp: impl Fn(Wavenumber, Complex64) -> Complex64) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    let table: Vec<Complex64> = (0..m).map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / m as f64)).collect();
    let phase = |k: i64, j: usize| table[((k * j as i64).rem_euclid(m as i64)) as usize];
    for (k, c) in u.modes() {
        if c.norm_sqr() == 0.0 {
            continue;
        }
        let a = amp(k, c);
        for j1 in 0..m {
            let a1 = a * phase(k.0, j1);
            for j2 in 0..m {
                out[j1 * m + j2] += (a1 * phase(k.1, j2)).re;
            }
        }
    }
    out
}

fn direction(k: Wavenumber) -> (f64, f64) {
    let kn = ((k.0 * k.0 + k.1 * k.1) as f64).sqrt();
    (-k.1 as f64 / kn, k.0 as f64 / kn)
}

/// `(|u|^2, ||u||^2, ||u||_W^2)` by quadrature on an `m x m` grid.
pub fn grid_norms(u: &SpectralField, p: &FluidParams, m: usize) -> (f64, f64, f64) {
    let cell = (p.domain_side / m as f64).powi(2);
    let s = p.wavenumber_scale();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() * cell;
    let l2 = sq(&synthesize(u, m, |k, c| c * direction(k).0)) + sq(&synthesize(u, m, |k, c| c * direction(k).1));
    let mut grad = 0.0;
    for axis in 0..2 {
        for comp in 0..2 {
            grad += sq(&synthesize(u, m, |k, c| {
                let d = direction(k);
                let kj = if axis == 0 { k.0 } else { k.1 } as f64 * s;
                let di = if comp == 0 { d.0 } else { d.1 };
                c * Complex64::new(0.0, kj) * di
            }));
        }
    }
    let w = sq(&synthesize(u, m, |k, c| {
        c * Complex64::new(0.0, p.k_squared(k).sqrt() * p.elastic_symbol(k))
    }));
    (l2, grad, w)
}

/// Largest observed `|(B_hat(w, u), w)_V| / (||u||_W ||w||_V^2)`.
pub fn bilinear_constant(p: &FluidParams, samples: usize, seed: u64) -> f64 {
    let b = BilinearOperator::new(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.mode_cutoff;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let u = SpectralField::random(n, &mut rng, 1.0);
        let w = SpectralField::random(n, &mut rng, 1.0);
        let r = inner_v(&b.apply(&w, &u), &w, p).abs() / (norm_w(&u, p) * norm_v(&w, p).powi(2));
        worst = worst.max(r);
    }
    worst
}

/// Runs every operator invariant at each cutoff.
pub fn operator_suite(base: &FluidParams, cutoffs: &[usize], samples: usize, bound_samples: usize, seed: u64) -> OperatorReport {
    let mut checks = vec![];
    let mut bounds = vec![];
    for (ci, &n) in cutoffs.iter().enumerate() {
        let p = base.with_cutoff(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        let fields: Vec<SpectralField> = (0..samples).map(|_| SpectralField::random(n, &mut rng, 1.0)).collect();
        let check = |name, worst: Worst, tolerance| InvariantCheck {
            name,
            cutoff: n,
            samples,
            worst: worst.0,
            tolerance,
        };

        // Poincare chain: (P^2 + alpha)^{-1} ||u||_V^2 <= ||u||^2 <= alpha^{-1} ||u||_V^2
        let pc = p.poincare_constant();
        let mut w = Worst(0.0);
        for u in &fields {
            let (g, v) = (norm_grad(u, &p).powi(2), norm_v(u, &p).powi(2));
            w.see((v / (pc * pc + p.alpha) - g) / v);
            w.see((g - v / p.alpha) / v);
        }
        checks.push(check("poincare", w, 1e-12));

        // eigen-relation (v, e_k)_W = lambda_k (v, e_k)_V on every retained mode
        let mut w = Worst(0.0);
        for v in fields.iter().take(10) {
            for k in wavenumbers(n) {
                let e = SpectralField::real_mode(n, k, Complex64::new(1.0, 0.0));
                let lam = p.w_eigenvalue(k);
                let lhs = inner_w(v, &e, &p);
                let rhs = lam * inner_v(v, &e, &p);
                w.see((lhs - rhs).abs() / (lam * norm_v(v, &p) * norm_v(&e, &p)));
            }
        }
        checks.push(check("eigen_relation", w, 1e-12));

        // generalized Stokes: (v, g)_V = (f, g)
        let mut w = Worst(0.0);
        for pair in fields.chunks(2).filter(|c| c.len() == 2) {
            let v = solve_generalized_stokes(&pair[0], &p);
            let err = (inner_v(&v, &pair[1], &p) - inner_l2(&pair[0], &pair[1], &p)).abs();
            w.see(err / (norm_l2(&pair[0], &p) * norm_l2(&pair[1], &p)));
        }
        checks.push(check("generalized_stokes", w, 1e-12));

        // (A_hat u, u)_V = ||u||^2
        let mut w = Worst(0.0);
        for u in &fields {
            let g = inner_grad(u, u, &p);
            w.see((inner_v(&apply_a_hat(u, &p), u, &p) - g).abs() / g);
        }
        checks.push(check("a_hat_identity", w, 1e-12));

        // |curl u|^2 <= (2 / alpha) ||u||_V^2
        let mut w = Worst(0.0);
        for u in &fields {
            let bound = 2.0 / p.alpha * norm_v(u, &p).powi(2);
            w.see((curl_scalar(u, &p).norm_l2(&p).powi(2) - bound) / bound);
        }
        checks.push(check("curl_bound", w, 0.0));

        // skew-symmetry of B_hat
        let b = BilinearOperator::new(&p);
        let (mut w3, mut w4) = (Worst(0.0), Worst(0.0));
        for i in 0..samples {
            let (u, v, x) = (&fields[i], &fields[(i + 1) % samples], &fields[(i + 2) % samples]);
            let buv = b.apply(u, v);
            let scale = norm_w(u, &p) * norm_v(v, &p).powi(2);
            w3.see(inner_v(&buv, v, &p).abs() / scale);
            let lhs = inner_v(&buv, x, &p);
            let rhs = -inner_v(&b.apply(u, x), v, &p);
            w4.see((lhs - rhs).abs() / (norm_w(u, &p) * norm_v(v, &p) * norm_v(x, &p)));
        }
        checks.push(check("b_skew_v", w3, 1e-10));
        checks.push(check("b_antisymmetry", w4, 1e-10));

        // Parseval against quadrature on a (4N)^2 grid
        let m = 4 * n;
        let mut w = Worst(0.0);
        for u in fields.iter().take(20) {
            let (l2, grad, ww) = grid_norms(u, &p, m);
            w.see((l2 - norm_l2(u, &p).powi(2)).abs() / l2);
            w.see((grad - norm_grad(u, &p).powi(2)).abs() / grad);
            w.see((ww - norm_w(u, &p).powi(2)).abs() / ww);
        }
        checks.push(check("parseval_quadrature", w, 1e-10));

        let mut max_ratio = 0.0f64;
        for _ in 0..bound_samples {
            let u = SpectralField::random(n, &mut rng, 1.0);
            max_ratio = max_ratio.max(norm_wstar(&b.apply(&u, &u), &p) / norm_v(&u, &p).powi(2));
        }
        bounds.push(BilinearBound {
            cutoff: n,
            samples: bound_samples,
            max_ratio,
        });
    }
    OperatorReport { checks, bounds }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_defaults() {
        let p = FluidParams::default();
        let r = operator_suite(&p, &[4, 8], 100, 200, 11);
        for c in &r.checks {
            assert!(c.passed(), "{c:?}");
        }
        assert!(r.bound_growth_ok(), "{:?}", r.bounds);
        assert!(r.to_csv().lines().count() == 1 + r.checks.len() + r.bounds.len());
    }

    #[test]
    fn grid_norms_of_single_mode() {
        let p = FluidParams::default().with_cutoff(2);
        let e = SpectralField::real_mode(2, (1, 0), Complex64::new(1.0, 0.0));
        let (l2, grad, w) = grid_norms(&e, &p, 8);
        assert!((l2 - norm_l2(&e, &p).powi(2)).abs() < 1e-12 * l2);
        assert!((grad - norm_grad(&e, &p).powi(2)).abs() < 1e-12 * grad);
        assert!((w - norm_w(&e, &p).powi(2)).abs() < 1e-12 * w);
    }

    #[test]
    fn bilinear_constant_is_finite() {
        let c = bilinear_constant(&FluidParams::default().with_cutoff(4), 50, 3);
        assert!(c.is_finite() && c > 0.0);
    }
}
