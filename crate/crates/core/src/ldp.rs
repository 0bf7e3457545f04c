//! Rate-function evaluation and minimization, empirical convergence checks
//! for perturbed controls, and small-noise rare-event studies.
//!
//! The rate of an endpoint target is approximated by minimizing
//! `Q1(f) + Q2(g) + w ||X^q(T) - target||_V^2` over piecewise-constant
//! controls with `g = exp(theta)`, increasing `w` stage by stage. The result
//! is an upper bound on the rate restricted to that control class.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::coefficients::{hat, unit_mode, CoefficientSet, Coefficients, DiffusionPart, DriftPart, JumpPart};
use crate::controls::{
    ell_unchecked, oscillating_intensity, total_cost, weak_perturbation, ControlPair, IntensityControl, MarkSpace, ScalarControl,
};
use crate::error::{Error, Result};
use crate::integrator::SolverOptions;
use crate::mc::{derive_seed, log_log_slope, try_par_map, Estimate};
use crate::skeleton::{integrate_skeleton, solve_skeleton, Trajectory};
use crate::spectral::{distance_v, norm_v, FluidParams, SpectralField, Wavenumber};
use crate::stochastic::{integrate_spde, mixture_likelihood_ratio, EpsRow, NoiseRealization};

/// Cost `Q1(f) + Q2(g)` of a control and the skeleton trajectory it drives.
pub fn rate_forward(
    q: &ControlPair,
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
) -> Result<(f64, Trajectory)> {
    let traj = solve_skeleton(x0, q, c, p, opts)?;
    Ok((total_cost(q, c.marks()), traj))
}

/// Settings of the endpoint optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    /// Cells of the piecewise-constant Brownian control.
    pub f_cells: usize,
    /// Cells of the piecewise-constant intensity control.
    pub g_cells: usize,
    /// Increasing penalty weights, one optimization stage each.
    pub penalties: Vec<f64>,
    /// Iteration cap per stage.
    pub max_iterations: usize,
    /// Stage stops when `max |grad| <= tol (1 + |objective|)` or after three
    /// iterations improving the objective by less than `1e-12` relative.
    pub gradient_tolerance: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Ball radius around the target; 0 asks for an exact hit.
    pub radius: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            f_cells: 10,
            g_cells: 10,
            penalties: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6],
            max_iterations: 200,
            gradient_tolerance: 1e-7,
            fd_step: 1e-6,
            radius: 0.0,
        }
    }
}

impl OptimizerSettings {
    fn validate(&self) -> Result<()> {
        if self.f_cells == 0 || self.g_cells == 0 {
            return Err(Error::InvalidParameter("optimizer grids need at least one cell".into()));
        }
        if self.penalties.is_empty() || self.penalties.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter("penalty weights must be positive".into()));
        }
        if self.penalties.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("penalty weights must increase".into()));
        }
        if !(self.fd_step > 0.0) || !(self.gradient_tolerance > 0.0) || !(self.radius >= 0.0) {
            return Err(Error::InvalidParameter("fd_step, gradient_tolerance must be positive and radius >= 0".into()));
        }
        Ok(())
    }
}

/// One accepted optimizer iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub stage: usize,
    pub iteration: usize,
    pub penalty: f64,
    pub objective: f64,
    pub cost: f64,
    pub residual: f64,
    pub gradient_norm: f64,
}

/// Output of [`rate_endpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    /// `Q1 + Q2` at the returned control.
    pub value: f64,
    pub control: ControlPair,
    /// `||X^q(T) - target||_V`.
    pub terminal_residual: f64,
    pub trajectory: Trajectory,
    pub trace: Vec<TraceEntry>,
    /// Every stage met the gradient tolerance.
    pub converged: bool,
}

impl RateResult {
    /// Turns a non-converged run into [`Error::NotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.trace.len(),
                objective: self.trace.last().map_or(f64::NAN, |t| t.objective),
            })
        }
    }

    pub fn trace_to_csv(&self) -> String {
        let mut out = String::from("stage,iteration,penalty,objective,cost,residual,gradient_norm\n");
        for t in &self.trace {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e}\n",
                t.stage, t.iteration, t.penalty, t.objective, t.cost, t.residual, t.gradient_norm
            ));
        }
        out
    }
}

struct Evaluation {
    objective: f64,
    cost: f64,
    residual: f64,
}

/// Maps the optimization vector to a control pair. Components whose
/// coefficient vanishes are not optimized.
struct Parametrization<'a> {
    horizon: f64,
    marks: &'a MarkSpace,
    f_cells: usize,
    g_cells: usize,
    use_f: bool,
    use_g: bool,
}

impl Parametrization<'_> {
    fn dim(&self) -> usize {
        self.use_f as usize * self.f_cells + self.use_g as usize * self.g_cells * self.marks.len()
    }

    fn controls(&self, theta: &[f64]) -> Result<ControlPair> {
        let mut rest = theta;
        let f = if self.use_f {
            let (head, tail) = rest.split_at(self.f_cells);
            rest = tail;
            ScalarControl::uniform(self.horizon, head.to_vec())?
        } else {
            ScalarControl::zero(self.horizon)
        };
        let g = if self.use_g {
            IntensityControl::uniform(self.horizon, self.marks.len(), rest.iter().map(|t| t.exp()).collect())?
        } else {
            IntensityControl::identity(self.horizon, self.marks.len())
        };
        ControlPair::new(f, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the penalized cost of reaching `target` (or its ball of
/// radius `settings.radius`) at `horizon`, starting from the zero-cost
/// control. Uses BFGS with Armijo backtracking on central-difference
/// gradients; every stage's objective is nonincreasing along the trace.
pub fn rate_endpoint(
    target: &SpectralField,
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    horizon: f64,
    settings: &OptimizerSettings,
) -> Result<RateResult> {
    settings.validate()?;
    if target.cutoff() != p.mode_cutoff {
        return Err(Error::InvalidParameter("target cutoff differs from the model".into()));
    }
    let marks = c.marks();
    let param = Parametrization {
        horizon,
        marks,
        f_cells: settings.f_cells,
        g_cells: settings.g_cells,
        use_f: c.has_diffusion(),
        use_g: c.has_jumps(),
    };
    let dim = param.dim();
    let eval = |theta: &[f64], w: f64| -> Result<Evaluation> {
        let q = param.controls(theta)?;
        let cost = total_cost(&q, marks);
        let xt = integrate_skeleton(x0, &q, c, p, opts, |_, _| {})?;
        let residual = distance_v(&xt, target, p);
        let excess = (residual - settings.radius).max(0.0);
        Ok(Evaluation {
            objective: cost + w * excess * excess,
            cost,
            residual,
        })
    };
    let gradient = |theta: &[f64], w: f64| -> Result<Vec<f64>> {
        let probes = try_par_map(2 * dim, |k| -> Result<f64> {
            let i = k / 2;
            let h = settings.fd_step * (1.0 + theta[i].abs());
            let mut x = theta.to_vec();
            x[i] += if k % 2 == 0 { h } else { -h };
            Ok(eval(&x, w)?.objective)
        })?;
        Ok((0..dim)
            .map(|i| (probes[2 * i] - probes[2 * i + 1]) / (2.0 * settings.fd_step * (1.0 + theta[i].abs())))
            .collect())
    };

    let mut theta = vec![0.0; dim];
    let mut trace = vec![];
    let mut converged = true;
    for (stage, &w) in settings.penalties.iter().enumerate() {
        let mut current = eval(&theta, w)?;
        let mut grad = gradient(&theta, w)?;
        let mut hinv = identity(dim);
        let mut fresh = true;
        let mut stage_ok = dim == 0;
        let mut flat = 0;
        for iteration in 0..settings.max_iterations {
            let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            trace.push(TraceEntry {
                stage,
                iteration,
                penalty: w,
                objective: current.objective,
                cost: current.cost,
                residual: current.residual,
                gradient_norm: gnorm,
            });
            if gnorm <= settings.gradient_tolerance * (1.0 + current.objective.abs()) {
                stage_ok = true;
                break;
            }
            let mut dir: Vec<f64> = (0..dim).map(|i| -dot(&hinv[i * dim..(i + 1) * dim], &grad)).collect();
            let mut slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                hinv = identity(dim);
                fresh = true;
                dir = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &dir);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + alpha * d).collect();
                if let Ok(e) = eval(&trial, w) {
                    if e.objective <= current.objective + 1e-4 * alpha * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((next, next_eval)) = accepted else {
                if fresh {
                    // no descent even along the gradient: finite-difference noise floor
                    stage_ok = gnorm <= 1e3 * settings.gradient_tolerance * (1.0 + current.objective.abs());
                    break;
                }
                hinv = identity(dim);
                fresh = true;
                continue;
            };
            let next_grad = gradient(&next, w)?;
            let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if fresh {
                    let scale = sy / dot(&y, &y);
                    hinv.iter_mut().for_each(|h| *h *= scale);
                    fresh = false;
                }
                bfgs_update(&mut hinv, &s, &y, sy);
            }
            let gain = current.objective - next_eval.objective;
            theta = next;
            current = next_eval;
            grad = next_grad;
            // relative objective change below the finite-difference noise floor
            flat = if gain <= 1e-12 * (1.0 + current.objective.abs()) { flat + 1 } else { 0 };
            if flat >= 3 {
                stage_ok = true;
                break;
            }
        }
        converged &= stage_ok;
    }
    let control = param.controls(&theta)?;
    let (value, trajectory) = rate_forward(&control, x0, c, p, opts)?;
    let terminal_residual = distance_v(trajectory.final_state(), target, p);
    Ok(RateResult {
        value,
        control,
        terminal_residual,
        trajectory,
        trace,
        converged,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Inverse-Hessian update `H <- (I - r s y^T) H (I - r y s^T) + r s s^T`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -r * (hy[i] * s[j] + s[i] * hy[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}

/// Which control component a convergence check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `f_n = f + sin(2 pi n t / T)`.
    Brownian,
    /// `g_n` alternating between `high` and 1 on `2n` cells.
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct C1Row {
    pub n: u32,
    /// `sup_t ||X^{q_n}(t) - X^q(t)||_V`.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C1Table {
    pub kind: PerturbationKind,
    pub rows: Vec<C1Row>,
}

impl C1Table {
    /// Strictly decreasing with an overall reduction of at least 2x.
    pub fn passed(&self) -> bool {
        let e: Vec<f64> = self.rows.iter().map(|r| r.error).collect();
        e.len() >= 2 && e.windows(2).all(|w| w[1] < w[0]) && e[0] >= 2.0 * e[e.len() - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,sup_distance_v\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e}\n", r.n, r.error));
        }
        out
    }
}

/// Solves the skeleton for weakly convergent perturbations `q_n -> q` and
/// tabulates the sup-distance to the limit trajectory. The intensity
/// variant replaces `q.g` by the weak limit `(high + 1) / 2`.
#[allow(clippy::too_many_arguments)]
pub fn c1_convergence_test(
    q: &ControlPair,
    ns: &[u32],
    kind: PerturbationKind,
    high: f64,
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
) -> Result<C1Table> {
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("n list must increase".into()));
    }
    let horizon = q.horizon();
    let steps = opts.steps(horizon)?;
    let marks = c.marks().len();
    let base = match kind {
        PerturbationKind::Brownian => q.clone(),
        PerturbationKind::Intensity => {
            if !(high > 0.0) {
                return Err(Error::InvalidParameter("intensity level must be positive".into()));
            }
            ControlPair::new(q.f.clone(), IntensityControl::constant(horizon, marks, 0.5 * (high + 1.0))?)?
        }
    };
    let limit = solve_skeleton(x0, &base, c, p, opts)?;
    let errors = try_par_map(ns.len(), |i| -> Result<f64> {
        let n = ns[i];
        let qn = match kind {
            PerturbationKind::Brownian => ControlPair::new(weak_perturbation(&q.f, n, steps)?, q.g.clone())?,
            PerturbationKind::Intensity => ControlPair::new(q.f.clone(), oscillating_intensity(horizon, marks, n, high)?)?,
        };
        solve_skeleton(x0, &qn, c, p, opts)?.sup_distance_v(&limit, p)
    })?;
    Ok(C1Table {
        kind,
        rows: ns.iter().zip(errors).map(|(&n, error)| C1Row { n, error }).collect(),
    })
}

/// Bounded sup-distance of the controlled equation to its skeleton limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C2Table {
    pub rows: Vec<EpsRow>,
    /// Log-log slope of the estimates against `eps` (rows with positive means).
    pub slope: f64,
}

impl C2Table {
    /// Strictly decreasing in `eps` (listed from largest to smallest) and
    /// the last estimate at most `final_bound`.
    pub fn passed(&self, final_bound: f64) -> bool {
        let m: Vec<f64> = self.rows.iter().map(|r| r.estimate.mean).collect();
        !m.is_empty() && m.windows(2).all(|w| w[1] < w[0]) && m[m.len() - 1] <= final_bound
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,estimator,mean,stderr,paths\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:e},bounded_sup_distance,{:e},{:e},{}\n",
                r.eps, r.estimate.mean, r.estimate.stderr, r.estimate.n
            ));
        }
        out
    }
}

/// Estimates `E[min(1, sup_t ||X^eps(t) - X^q(t)||_V)]` for deterministic
/// controls `q`, using common random numbers across `eps`.
#[allow(clippy::too_many_arguments)]
pub fn c2_convergence_test(
    q: &ControlPair,
    eps_list: &[f64],
    paths: usize,
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    seed: u64,
) -> Result<C2Table> {
    let limit = solve_skeleton(x0, q, c, p, opts)?;
    let mut rows = vec![];
    for &eps in eps_list {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        let d = try_par_map(paths, |i| -> Result<f64> {
            let noise = NoiseRealization::sample(eps, Some(&q.g), c.marks(), q.horizon(), opts.dt, derive_seed(seed, i as u64))?;
            let mut sup = 0.0f64;
            let mut node = 0;
            integrate_spde(
                x0,
                eps,
                q,
                c,
                p,
                opts,
                &noise,
                |_, x| {
                    sup = sup.max(distance_v(x, &limit.states[node], p));
                    node += 1;
                },
                |_, _| {},
            )?;
            Ok(sup.min(1.0))
        })?;
        rows.push(EpsRow {
            eps,
            estimate: Estimate::from_samples(&d),
        });
    }
    let pos: Vec<&EpsRow> = rows.iter().filter(|r| r.estimate.mean > 0.0).collect();
    let slope = if pos.len() >= 2 {
        log_log_slope(
            &pos.iter().map(|r| r.eps).collect::<Vec<_>>(),
            &pos.iter().map(|r| r.estimate.mean).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok(C2Table { rows, slope })
}

/// Linear single-mode model without bilinear term and drift, with either a
/// constant additive Brownian forcing `G = w` or a constant jump field
/// `sigma = w`, `w` a unit real mode. Everything about it is available in
/// closed form and serves as oracle for the optimizer and the Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDiagnostic {
    pub params: FluidParams,
    pub mode: Wavenumber,
    pub horizon: f64,
}

impl LinearDiagnostic {
    pub fn new(params: FluidParams, mode: Wavenumber, horizon: f64) -> Result<Self> {
        params.validate()?;
        unit_mode(&params, mode)?;
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        Ok(LinearDiagnostic { params, mode, horizon })
    }

    pub fn field(&self) -> SpectralField {
        unit_mode(&self.params, self.mode).expect("mode validated on construction")
    }

    /// Unit-`V` direction of `hat(w)`.
    pub fn direction(&self) -> SpectralField {
        let h = hat(&self.field(), &self.params);
        &h * (1.0 / norm_v(&h, &self.params))
    }

    /// Decay rate of the mode under `kappa A_hat`.
    pub fn decay_rate(&self) -> f64 {
        self.params.kappa * self.params.a_hat_symbol(self.mode)
    }

    /// `||hat(w)||_V`.
    pub fn response_norm(&self) -> f64 {
        norm_v(&hat(&self.field(), &self.params), &self.params)
    }

    pub fn brownian_model(&self) -> Result<CoefficientSet> {
        CoefficientSet::new(
            &self.params,
            MarkSpace::single(1.0),
            DriftPart::Zero,
            DiffusionPart::Constant { field: self.field() },
            JumpPart::Zero,
        )
    }

    pub fn jump_model(&self, nu: f64) -> Result<CoefficientSet> {
        CoefficientSet::new(
            &self.params,
            MarkSpace::single(nu),
            DriftPart::Zero,
            DiffusionPart::Zero,
            JumpPart::Constant {
                amplitudes: vec![1.0],
                fields: vec![self.field()],
            },
        )
    }

    pub fn options(&self, dt: f64) -> SolverOptions {
        SolverOptions::default().with_dt(dt).linear()
    }

    /// Per-cell `(|I_i|, int_{I_i} exp(-lambda (T - s)) ds)` on a uniform grid.
    fn cell_weights(&self, cells: usize) -> Vec<(f64, f64)> {
        let lam = self.decay_rate();
        let t = self.horizon;
        let h = t / cells as f64;
        (0..cells)
            .map(|i| {
                let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
                (h, ((-lam * (t - b)).exp() - (-lam * (t - a)).exp()) / lam)
            })
            .collect()
    }

    /// Least `Q1` of a control piecewise constant on `cells` cells moving
    /// the terminal state by `distance` (in `V`) along [`Self::direction`].
    pub fn brownian_cost(&self, distance: f64, cells: usize) -> f64 {
        let delta = distance / self.response_norm();
        let denom: f64 = self.cell_weights(cells).iter().map(|(h, c)| c * c / h).sum();
        delta * delta / (2.0 * denom)
    }

    /// Least `Q2` of an intensity piecewise constant on `cells` cells moving
    /// the terminal state by the signed `displacement` along
    /// [`Self::direction`], for mark mass `nu`. The optimal cell values are
    /// `exp(eta c_i / |I_i|)` with the scalar `eta` found by bisection.
    pub fn jump_cost(&self, displacement: f64, nu: f64, cells: usize) -> Result<f64> {
        let delta = displacement / self.response_norm();
        let w = self.cell_weights(cells);
        let reach = |eta: f64| -> f64 { w.iter().map(|(h, c)| ((eta * c / h).exp() - 1.0) * nu * c).sum::<f64>() };
        let lower_limit: f64 = -w.iter().map(|(_, c)| nu * c).sum::<f64>();
        if delta <= lower_limit {
            return Err(Error::InvalidParameter("displacement is not reachable by a positive intensity".into()));
        }
        let (mut lo, mut hi) = (-1.0, 1.0);
        while reach(lo) > delta {
            lo *= 2.0;
        }
        while reach(hi) < delta {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::InvalidParameter("displacement too large for the jump oracle".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if reach(mid) < delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eta = 0.5 * (lo + hi);
        Ok(w.iter().map(|(h, c)| ell_unchecked((eta * c / h).exp()) * nu * h).sum())
    }

    /// Standard deviation of the terminal `V` displacement of the Brownian model.
    pub fn terminal_sd(&self, eps: f64) -> f64 {
        let lam = self.decay_rate();
        let s2 = (1.0 - (-2.0 * lam * self.horizon).exp()) / (2.0 * lam);
        (eps * s2).sqrt() * self.response_norm()
    }

    /// `P(||X(T) - X^0(T)||_V >= r)` for the Brownian model.
    pub fn tail_probability(&self, eps: f64, r: f64) -> f64 {
        erfc(r / (self.terminal_sd(eps) * std::f64::consts::SQRT_2))
    }

    /// `-eps log P(||X(T) - X^0(T)||_V >= r)`.
    pub fn tail_rate(&self, eps: f64, r: f64) -> f64 {
        -eps * ln_erfc(r / (self.terminal_sd(eps) * std::f64::consts::SQRT_2))
    }

    /// Small-noise limit of [`Self::tail_rate`].
    pub fn asymptotic_rate(&self, r: f64) -> f64 {
        let sd1 = self.terminal_sd(1.0);
        r * r / (2.0 * sd1 * sd1)
    }
}

/// `ln erfc(x)`, switching to the asymptotic series where `erfc` underflows.
fn ln_erfc(x: f64) -> f64 {
    if x < 20.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        -x2 - (x * std::f64::consts::PI.sqrt()).ln() + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln()
    }
}

/// Settings of [`rare_event_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RareEventSettings {
    pub radius: f64,
    pub eps_list: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Rows with fewer hits are flagged and excluded from the ratio.
    pub min_hits: usize,
    pub importance_sampling: bool,
    pub optimizer: OptimizerSettings,
}

impl Default for RareEventSettings {
    fn default() -> Self {
        RareEventSettings {
            radius: 0.5,
            eps_list: vec![0.1, 0.05, 0.025],
            paths: 2000,
            seed: 1,
            min_hits: 10,
            importance_sampling: true,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RareEventRow {
    pub eps: f64,
    pub hits: usize,
    pub probability: Estimate,
    /// `-eps log P_hat`.
    pub mc_rate: f64,
    /// Importance-sampled probability under the boundary-control mixture.
    pub is_probability: Option<Estimate>,
    pub is_rate: Option<f64>,
    /// Bernoulli variance at the IS probability over the IS sample variance.
    pub variance_reduction: Option<f64>,
    /// Closed-form `-eps log P` when an oracle is supplied.
    pub reference_rate: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RareEventStudy {
    pub radius: f64,
    pub rows: Vec<RareEventRow>,
    /// Cheapest optimizer value over the boundary ray family.
    pub optimizer_value: f64,
    pub optimizer: RateResult,
    /// Number of boundary controls in the importance-sampling mixture.
    pub mixture_components: usize,
    /// Mean of `mc_rate / optimizer_value` over unflagged rows.
    pub ratio: Option<f64>,
}

impl RareEventStudy {
    /// Largest relative gap between MC and reference rates over unflagged rows.
    pub fn worst_reference_gap(&self) -> Option<f64> {
        let gaps: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| !r.flagged)
            .filter_map(|r| r.reference_rate.map(|g| (r.mc_rate - g).abs() / g.abs().max(f64::MIN_POSITIVE)))
            .collect();
        if gaps.is_empty() {
            None
        } else {
            Some(gaps.into_iter().fold(0.0, f64::max))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,r,estimator,value,stderr,hits,rate,reference_rate,variance_reduction,flagged\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:e},{:e},plain,{:e},{:e},{},{:e},{},,{}\n",
                row.eps,
                self.radius,
                row.probability.mean,
                row.probability.stderr,
                row.hits,
                row.mc_rate,
                opt(row.reference_rate),
                row.flagged
            ));
            if let Some(is) = row.is_probability {
                out.push_str(&format!(
                    "{:e},{:e},importance,{:e},{:e},,{},{},{},{}\n",
                    row.eps,
                    self.radius,
                    is.mean,
                    is.stderr,
                    opt(row.is_rate),
                    opt(row.reference_rate),
                    opt(row.variance_reduction),
                    row.flagged
                ));
            }
        }
        out.push_str(&format!(
            "0,{:e},optimizer,{:e},,,,,,{}\n",
            self.radius,
            self.optimizer_value,
            !self.optimizer.converged
        ));
        out
    }
}

/// Candidate escape directions at `x`: the normalized responses to the
/// diffusion field and to every jump field, with both signs.
fn ray_family(c: &dyn Coefficients, x: &SpectralField, t: f64, p: &FluidParams) -> Vec<SpectralField> {
    let mut dirs = vec![];
    let mut push = |v: SpectralField| {
        let n = norm_v(&v, p);
        if n > 0.0 {
            let u = &v * (1.0 / n);
            dirs.push(-&u);
            dirs.push(u);
        }
    };
    if c.has_diffusion() {
        push(c.diffusion_hat(x, t, p));
    }
    if c.has_jumps() {
        for j in 0..c.marks().len() {
            push(c.jump_hat(t, x, j, p));
        }
    }
    dirs
}

/// Monte Carlo estimate of `P(||X^eps(T) - X^0(T)||_V >= r)` for each
/// `eps`, the optimizer's rate for the cheapest boundary target along the
/// ray family, and an importance-sampled estimate under the equal-weight
/// mixture of the near-cheapest boundary controls.
pub fn rare_event_study(
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    horizon: f64,
    settings: &RareEventSettings,
    oracle: Option<&LinearDiagnostic>,
) -> Result<RareEventStudy> {
    let r = settings.radius;
    if !(r >= 0.0) || settings.paths == 0 {
        return Err(Error::InvalidParameter("radius must be >= 0 and paths >= 1".into()));
    }
    let marks = c.marks();
    let free = ControlPair::uncontrolled(horizon, marks.len());
    let limit = integrate_skeleton(x0, &free, c, p, opts, |_, _| {})?;

    let candidates = if r == 0.0 {
        vec![rate_endpoint(&limit, x0, c, p, opts, horizon, &settings.optimizer)?]
    } else {
        let dirs = ray_family(c, &limit, horizon, p);
        let mut out = Vec::with_capacity(dirs.len());
        for dir in dirs {
            let mut target = limit.clone();
            target.axpy(r, &dir);
            out.push(rate_endpoint(&target, x0, c, p, opts, horizon, &settings.optimizer)?);
        }
        out
    };
    let optimizer_value = candidates.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    if !optimizer_value.is_finite() {
        return Err(Error::InvalidParameter("model has no noise directions".into()));
    }
    // every boundary target within 10% of the cheapest feeds the IS mixture
    let mixture: Vec<RateResult> = candidates.into_iter().filter(|c| c.value <= 1.1 * optimizer_value).collect();
    let controls: Vec<ControlPair> = mixture.iter().map(|m| m.control.clone()).collect();
    let optimizer = mixture
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("mixture holds the cheapest candidate");

    let hit = |x: &SpectralField| distance_v(x, &limit, p) >= r;
    let mut rows = vec![];
    for (ei, &eps) in settings.eps_list.iter().enumerate() {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        let base = (ei * settings.paths) as u64;
        let plain = try_par_map(settings.paths, |i| -> Result<f64> {
            let noise = NoiseRealization::sample(eps, None, marks, horizon, opts.dt, derive_seed(settings.seed, base + i as u64))?;
            let xt = integrate_spde(x0, eps, &free, c, p, opts, &noise, |_, _| {}, |_, _| {})?;
            Ok(if hit(&xt) { 1.0 } else { 0.0 })
        })?;
        let hits = plain.iter().filter(|&&v| v > 0.0).count();
        let probability = Estimate::from_samples(&plain);
        let mc_rate = -eps * probability.mean.ln();
        let (mut is_probability, mut is_rate, mut variance_reduction) = (None, None, None);
        if settings.importance_sampling {
            let weighted = try_par_map(settings.paths, |i| -> Result<f64> {
                let k = i % controls.len();
                let q = &controls[k];
                let s = derive_seed(settings.seed ^ 0x1517, base + i as u64);
                let noise = NoiseRealization::sample(eps, Some(&q.g), marks, horizon, opts.dt, s)?;
                let xt = integrate_spde(x0, eps, q, c, p, opts, &noise, |_, _| {}, |_, _| {})?;
                if hit(&xt) {
                    mixture_likelihood_ratio(&controls, k, marks, eps, &noise)
                } else {
                    Ok(0.0)
                }
            })?;
            let est = Estimate::from_samples(&weighted);
            is_rate = Some(-eps * est.mean.ln());
            let v = est.variance();
            variance_reduction = Some(if v > 0.0 { est.mean * (1.0 - est.mean) / v } else { f64::INFINITY });
            is_probability = Some(est);
        }
        rows.push(RareEventRow {
            eps,
            hits,
            probability,
            mc_rate,
            is_probability,
            is_rate,
            variance_reduction,
            reference_rate: oracle.map(|o| o.tail_rate(eps, r)),
            flagged: hits < settings.min_hits,
        });
    }
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|row| !row.flagged && optimizer.value > 0.0)
        .map(|row| row.mc_rate / optimizer.value)
        .collect();
    let ratio = if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    };
    Ok(RareEventStudy {
        radius: r,
        rows,
        optimizer_value,
        optimizer,
        mixture_components: controls.len(),
        ratio,
    })
}
