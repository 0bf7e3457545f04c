//! Deterministic controlled (skeleton) equation
//!
//! ```text
//! dX = [-kappa A_hat X - B_hat(X, X) + F_hat(X) + G_hat(X) f
//!       + sum_j sigma_hat(X, z_j) (g(t, z_j) - 1) nu_j] dt
//! ```
//!
//! together with its energy balance, bound scans and diagnostics.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coefficients::Coefficients;
use crate::controls::{cost_q1, cost_q2, ControlPair, IntensityControl, MarkSpace, ScalarControl};
use crate::error::{Error, Result};
use crate::integrator::{check_state, skeleton_jump_weights, DriftModel, Propagator, SolverOptions};
use crate::mc::{derive_seed, try_par_map};
use crate::spectral::{distance_v, distance_wstar, inner_w, norm_v, norm_w, FluidParams, SpectralField};

/// States and norms at every solver node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
    pub norms_v: Vec<f64>,
    pub norms_w: Vec<f64>,
}

impl Trajectory {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Trajectory {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            norms_v: Vec::with_capacity(n),
            norms_w: Vec::with_capacity(n),
        }
    }

    pub(crate) fn push(&mut self, t: f64, x: SpectralField, p: &FluidParams) {
        self.times.push(t);
        self.norms_v.push(norm_v(&x, p));
        self.norms_w.push(norm_w(&x, p));
        self.states.push(x);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("trajectory has at least one node")
    }

    /// `sup_t ||X(t)||_W^2`.
    pub fn sup_w_squared(&self) -> f64 {
        self.norms_w.iter().fold(0.0, |m, w| m.max(w * w))
    }

    /// `sup_t ||X(t) - Y(t)||_V` on a common grid.
    pub fn sup_distance_v(&self, other: &Trajectory, p: &FluidParams) -> Result<f64> {
        if self.times.len() != other.times.len() {
            return Err(Error::InvalidParameter("trajectories live on different time grids".into()));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| distance_v(a, b, p))
            .fold(0.0, f64::max))
    }

    /// CSV rows `(t, norm_v, norm_w, residual)`; residual is empty when absent.
    pub fn to_csv(&self, residual: Option<&[f64]>) -> String {
        let mut out = String::from("t,norm_v,norm_w,residual\n");
        for i in 0..self.len() {
            let r = residual.map(|r| format!("{:e}", r[i])).unwrap_or_default();
            out.push_str(&format!("{:e},{:e},{:e},{}\n", self.times[i], self.norms_v[i], self.norms_w[i], r));
        }
        out
    }
}

/// A few low modes with fixed phases, scaled to `||X0||_V = 1`.
pub fn default_initial_state(p: &FluidParams) -> SpectralField {
    let n = p.mode_cutoff;
    let mut u = SpectralField::zeros(n);
    let modes: [((i64, i64), Complex64); 4] = [
        ((1, 0), Complex64::new(1.0, 0.0)),
        ((0, 1), Complex64::new(0.0, 0.8)),
        ((1, 1), Complex64::new(0.5, -0.5)),
        ((2, -1), Complex64::new(0.3, 0.2)),
    ];
    for (k, a) in modes {
        if k.0.unsigned_abs() as usize <= n && k.1.unsigned_abs() as usize <= n {
            u.set_real_mode(k, a);
        }
    }
    let nv = norm_v(&u, p);
    &u * (1.0 / nv)
}

/// Control values used on the step starting at `t` (left-constant).
pub(crate) fn control_values(q: &ControlPair, t: f64, dt: f64) -> (f64, Vec<f64>) {
    let tm = t + 0.5 * dt;
    let g = (0..q.g.marks()).map(|j| q.g.value_at(tm, j)).collect();
    (q.f.value_at(tm), g)
}

pub(crate) fn validate_inputs(x0: &SpectralField, q: &ControlPair, c: &dyn Coefficients, p: &FluidParams, opts: &SolverOptions) -> Result<usize> {
    p.validate()?;
    if x0.cutoff() != p.mode_cutoff {
        return Err(Error::InvalidParameter(format!(
            "initial state has cutoff {} but the model uses {}",
            x0.cutoff(),
            p.mode_cutoff
        )));
    }
    if q.g.marks() != c.marks().len() {
        return Err(Error::InvalidParameter("intensity control and mark space disagree".into()));
    }
    let steps = opts.steps(q.horizon())?;
    q.check_alignment(opts.dt)?;
    Ok(steps)
}

/// Integrates the skeleton equation for the control `q` and records every node.
pub fn solve_skeleton(
    x0: &SpectralField,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    let mut traj = Trajectory::with_capacity(0);
    integrate_skeleton(x0, q, c, p, opts, |t, x| {
        traj.push(t, x.clone(), p);
    })?;
    Ok(traj)
}

/// Skeleton integration calling `observe(t, X)` at every node, including `t = 0`.
pub fn integrate_skeleton(
    x0: &SpectralField,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    mut observe: impl FnMut(f64, &SpectralField),
) -> Result<SpectralField> {
    let steps = validate_inputs(x0, q, c, p, opts)?;
    let model = DriftModel::new(c, p, opts)?;
    let prop = Propagator::new(p, opts.dt);
    let nu = c.marks().weights();
    let mut x = x0.clone();
    check_state(&x, p, 0.0, opts.blowup_threshold)?;
    observe(0.0, &x);
    for n in 0..steps {
        let t = opts.time(n);
        let (f, g) = control_values(q, t, opts.dt);
        let w = skeleton_jump_weights(&g, nu);
        x = prop.lawson_step(&x, t, opts.dt, |y, s| model.eval(y, s, f, &w));
        let t1 = opts.time(n + 1);
        check_state(&x, p, t1, opts.blowup_threshold)?;
        observe(t1, &x);
    }
    Ok(x)
}

/// `|lhs - rhs|` per node of the balance
/// `||X(t)||_W^2 = ||X0||_W^2 + 2 int_0^t (-kappa A_hat X + F_hat + G_hat f + sum sigma_hat (g - 1) nu, X)_W ds`,
/// with the bilinear term dropped because `(B_hat(X, X), X)_W = 0`.
/// The time integral uses the trapezoid rule with the control held at its
/// left-cell value on each interval.
pub fn energy_report(traj: &Trajectory, q: &ControlPair, c: &dyn Coefficients, p: &FluidParams) -> Result<Vec<f64>> {
    if traj.len() < 2 {
        return Ok(vec![0.0; traj.len()]);
    }
    let dt = traj.times[1] - traj.times[0];
    let opts = SolverOptions::default().with_dt(dt).linear();
    let model = DriftModel::new(c, p, &opts)?;
    let nu = c.marks().weights();
    let integrand = |x: &SpectralField, t: f64, f: f64, w: &[f64]| {
        let mut r = model.eval(x, t, f, w);
        r.axpy(-p.kappa, &crate::spectral::apply_a_hat(x, p));
        2.0 * inner_w(&r, x, p)
    };
    let e0 = traj.norms_w[0].powi(2);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(traj.len());
    out.push(0.0);
    for i in 0..traj.len() - 1 {
        let (t0, t1) = (traj.times[i], traj.times[i + 1]);
        let (f, g) = control_values(q, t0, t1 - t0);
        let w = skeleton_jump_weights(&g, nu);
        let a = integrand(&traj.states[i], t0, f, &w);
        let b = integrand(&traj.states[i + 1], t1, f, &w);
        acc += 0.5 * (t1 - t0) * (a + b);
        out.push((traj.norms_w[i + 1].powi(2) - e0 - acc).abs());
    }
    Ok(out)
}

/// Draws a control with `Q1 = u1 m` and `Q2 = u2 m` for uniform `u1, u2`.
/// Both components are piecewise constant on `cells` equal cells; `g = exp(s theta)`
/// with Gaussian `theta` and `s` found by bisection.
pub fn random_control<R: Rng>(m: f64, cells: usize, horizon: f64, marks: &MarkSpace, rng: &mut R) -> Result<ControlPair> {
    let raw: Vec<f64> = (0..cells).map(|_| rng.sample(StandardNormal)).collect();
    let f = ScalarControl::uniform(horizon, raw)?;
    let target1 = rng.gen::<f64>() * m;
    let q1 = cost_q1(&f);
    let f = if q1 > 0.0 { f.scaled((target1 / q1).sqrt()) } else { f };

    let theta: Vec<f64> = (0..cells * marks.len()).map(|_| rng.sample(StandardNormal)).collect();
    let target2 = rng.gen::<f64>() * m;
    let g_of = |s: f64| IntensityControl::uniform(horizon, marks.len(), theta.iter().map(|t| (s * t).exp()).collect());
    let q2_of = |s: f64| -> Result<f64> { Ok(cost_q2(&g_of(s)?, marks)) };
    let mut hi = 1.0;
    while q2_of(hi)? < target2 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidParameter("could not scale intensity to the requested cost".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if q2_of(mid)? < target2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // lo keeps Q2 <= target, so the control stays inside the level set
    ControlPair::new(f, g_of(lo)?)
}

/// Settings for [`w_bound_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSettings {
    pub max_level: usize,
    pub trials: usize,
    pub control_cells: usize,
    pub seed: u64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            max_level: 4,
            trials: 100,
            control_cells: 10,
            seed: 1,
        }
    }
}

/// One row of a bound scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanLevel {
    pub m: usize,
    /// Largest `sup_t ||X(t)||_W^2` among controls drawn at this level.
    pub level_max: f64,
    /// Maximum over all levels `<= m`; every such control lies in `S^m`.
    pub cumulative: f64,
    pub trials: usize,
}

/// Empirical `sup_{q in S^m} sup_t ||X^q(t)||_W^2` for `m = 1..max_level`.
/// Trial 0 at every level is the uncontrolled pair `(0, 1)`.
pub fn w_bound_scan(
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    horizon: f64,
    s: &ScanSettings,
) -> Result<Vec<ScanLevel>> {
    if s.max_level == 0 || s.trials == 0 || s.control_cells == 0 {
        return Err(Error::InvalidParameter("scan needs m >= 1, trials >= 1, cells >= 1".into()));
    }
    let marks = c.marks();
    let mut rows = Vec::with_capacity(s.max_level);
    let mut cumulative = 0.0f64;
    for m in 1..=s.max_level {
        let sups = try_par_map(s.trials, |i| -> Result<f64> {
            let q = if i == 0 {
                ControlPair::uncontrolled(horizon, marks.len())
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, (m * s.trials + i) as u64));
                random_control(m as f64, s.control_cells, horizon, marks, &mut rng)?
            };
            let mut sup = 0.0f64;
            integrate_skeleton(x0, &q, c, p, opts, |_, x| sup = sup.max(norm_w(x, p).powi(2)))?;
            Ok(sup)
        })?;
        let level_max = sups.iter().cloned().fold(0.0, f64::max);
        cumulative = cumulative.max(level_max);
        rows.push(ScanLevel {
            m,
            level_max,
            cumulative,
            trials: s.trials,
        });
    }
    Ok(rows)
}

/// Result of [`uniqueness_gap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniquenessGap {
    /// `sup_t ||X_dt1(t) - X_dt2(t)||_V^2` on the common nodes.
    pub gap_squared: f64,
    /// `exp(int_0^T phi(s) ds)` along the finer trajectory.
    pub gronwall_budget: f64,
    /// Bilinear constant used in `phi`.
    pub bilinear_constant: f64,
}

/// Compares two step sizes and evaluates the Gronwall budget
/// `phi = C_B ||X||_W + 2 C_F + 2 C_G (1 + |f|^2) + 2 sum_j s1(z_j) |g - 1| nu_j`.
pub fn uniqueness_gap(
    x0: &SpectralField,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    dt1: f64,
    dt2: f64,
) -> Result<UniquenessGap> {
    let (coarse, fine) = if dt1 >= dt2 { (dt1, dt2) } else { (dt2, dt1) };
    let ratio = coarse / fine;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio {
        return Err(Error::InvalidParameter("step sizes must be integer multiples of each other".into()));
    }
    let stride = ratio.round() as usize;
    let a = solve_skeleton(x0, q, c, p, &opts.with_dt(coarse))?;
    let b = solve_skeleton(x0, q, c, p, &opts.with_dt(fine))?;
    let gap_squared = a
        .states
        .iter()
        .enumerate()
        .map(|(i, x)| distance_v(x, &b.states[i * stride], p).powi(2))
        .fold(0.0, f64::max);
    let c_b = if opts.nonlinear {
        crate::verify::bilinear_constant(p, 200, 0x5eed)
    } else {
        0.0
    };
    let k = c.constants();
    let nu = c.marks().weights();
    let mut integral = 0.0;
    for i in 0..b.len() - 1 {
        let (t, h) = (b.times[i], b.times[i + 1] - b.times[i]);
        let (f, g) = control_values(q, t, h);
        let jumps: f64 = (0..nu.len())
            .map(|j| c.envelope(t, j).s1 * (g[j] - 1.0).abs() * nu[j])
            .sum();
        let phi = c_b * b.norms_w[i] + 2.0 * k.c_f + 2.0 * k.c_g * (1.0 + f * f) + 2.0 * jumps;
        integral += phi * h;
    }
    Ok(UniquenessGap {
        gap_squared,
        gronwall_budget: integral.exp(),
        bilinear_constant: c_b,
    })
}

/// Space norm used inside [`sobolev_seminorm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeminormSpace {
    V,
    WStar,
}

/// Discrete `int int ||u(t) - u(s)||^p / |t - s|^{1 + beta p} ds dt` with
/// trapezoid weights and the diagonal omitted.
pub fn sobolev_seminorm(traj: &Trajectory, beta: f64, pexp: f64, space: SeminormSpace, p: &FluidParams) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) || !(pexp > 1.0) {
        return Err(Error::InvalidParameter("need 0 < beta < 1 and p > 1".into()));
    }
    let n = traj.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = traj.times[i + 1] - traj.times[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    let dist = |a: &SpectralField, b: &SpectralField| match space {
        SeminormSpace::V => distance_v(a, b, p),
        SeminormSpace::WStar => distance_wstar(a, b, p),
    };
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..i {
            let d = dist(&traj.states[i], &traj.states[j]);
            if d == 0.0 {
                continue;
            }
            let gap = traj.times[i] - traj.times[j];
            acc += 2.0 * w[i] * w[j] * d.powf(pexp) / gap.powf(1.0 + beta * pexp);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSet;
    use std::f64::consts::PI;

    fn setup(n: usize) -> (FluidParams, CoefficientSet) {
        let p = FluidParams::new(1.0, 0.5, 2.0 * PI, n).unwrap();
        let c = CoefficientSet::default_family(&p).unwrap();
        (p, c)
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let (p, c) = setup(4);
        let q = ControlPair::uncontrolled(1.0, 2);
        let traj = solve_skeleton(&SpectralField::zeros(4), &q, &c, &p, &SolverOptions::default().with_dt(0.01)).unwrap();
        assert!(traj.states.iter().all(|x| x.is_zero()));
        let res = energy_report(&traj, &q, &c, &p).unwrap();
        assert!(res.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let p = FluidParams::new(1.0, 0.5, 2.0 * PI, 4).unwrap();
        let c = CoefficientSet::zero(&p, MarkSpace::single(1.0));
        let x0 = SpectralField::real_mode(4, (2, 1), Complex64::new(0.4, 0.1));
        let q = ControlPair::uncontrolled(1.0, 1);
        let opts = SolverOptions::default().linear();
        let traj = solve_skeleton(&x0, &q, &c, &p, &opts).unwrap();
        let mu = p.a_hat_symbol((2, 1));
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let exact = x0.mode((2, 1)) * (-p.kappa * mu * t).exp();
            assert!((x.mode((2, 1)) - exact).norm() <= 1e-12 * x0.mode((2, 1)).norm());
        }
    }

    #[test]
    fn misaligned_controls_rejected() {
        let (p, c) = setup(4);
        let f = ScalarControl::new(vec![0.0, 0.0105, 1.0], vec![1.0, 0.0]).unwrap();
        let q = ControlPair::new(f, IntensityControl::identity(1.0, 2)).unwrap();
        let err = solve_skeleton(&default_initial_state(&p), &q, &c, &p, &SolverOptions::default().with_dt(0.01));
        assert!(matches!(err, Err(Error::GridMisaligned { .. })));
    }

    #[test]
    fn random_controls_respect_level() {
        let marks = MarkSpace::from_weights(vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 1..=4 {
            for _ in 0..20 {
                let q = random_control(m as f64, 10, 1.0, &marks, &mut rng).unwrap();
                assert!(crate::controls::in_s_m(&q, &marks, m as f64));
            }
        }
    }

    #[test]
    fn sobolev_oracle_for_linear_path() {
        let p = FluidParams::default().with_cutoff(2);
        let e = SpectralField::real_mode(2, (1, 0), Complex64::new(1.0, 0.0));
        let mut traj = Trajectory::with_capacity(1001);
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            traj.push(t, &e * t, &p);
        }
        let val = sobolev_seminorm(&traj, 0.25, 2.0, SeminormSpace::V, &p).unwrap();
        let exact = 8.0 / 15.0 * norm_v(&e, &p).powi(2);
        assert!((val - exact).abs() < 0.02 * exact, "{val} vs {exact}");
        let constant = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![e.clone(), e.clone(), e.clone()],
            norms_v: vec![0.0; 3],
            norms_w: vec![0.0; 3],
        };
        assert_eq!(sobolev_seminorm(&constant, 0.25, 2.0, SeminormSpace::WStar, &p).unwrap(), 0.0);
    }

    #[test]
    fn uniqueness_gap_trivial_cases() {
        let (p, c) = setup(4);
        let q = ControlPair::uncontrolled(1.0, 2);
        let opts = SolverOptions::default();
        let g = uniqueness_gap(&SpectralField::zeros(4), &q, &c, &p, &opts, 0.01, 0.005).unwrap();
        assert_eq!(g.gap_squared, 0.0);
        let x0 = default_initial_state(&p);
        let g = uniqueness_gap(&x0, &q, &c, &p, &opts, 0.01, 0.01).unwrap();
        assert_eq!(g.gap_squared, 0.0);
        assert!(g.gronwall_budget.is_finite() && g.gronwall_budget >= 1.0);
    }
}
