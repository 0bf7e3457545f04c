//! Stochastic equation driven by a Brownian motion and a (tilted) Poisson
//! random measure, the auxiliary linear `Y` equation, and Girsanov weights.
//!
//! The controlled equation is integrated in the compensated form
//!
//! ```text
//! dX = [-kappa A_hat X - B_hat(X, X) + F_hat + G_hat psi + sum_j sigma_hat_j (phi_j - 1) nu_j] dt
//!      + sqrt(eps) G_hat dW + eps int sigma_hat(X(t-), z) (N^{phi/eps} - phi nu / eps)(dz, dt)
//! ```
//!
//! Brownian increments are applied at the start of each step
//! (Euler-Maruyama); jumps are applied exactly at their event times using
//! the left-limit state.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::Serialize;

use crate::coefficients::{hat, Coefficients};
use crate::controls::{ControlPair, IntensityControl, MarkSpace, ScalarControl};
use crate::error::{Error, Result};
use crate::integrator::{check_state, skeleton_jump_weights, DriftModel, Propagator, SolverOptions};
use crate::mc::{derive_seed, log_log_slope, try_par_map, Estimate};
use crate::skeleton::{control_values, random_control, validate_inputs, Trajectory};
use crate::spectral::{norm_w, FluidParams, SpectralField};

/// RNG stream carrying Brownian increments.
pub const BROWNIAN_STREAM: u64 = 0;
/// RNG stream carrying Poisson events.
pub const JUMP_STREAM: u64 = 1;

/// Realized events of a (tilted) Poisson random measure on `[0, T) x Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedPointStream {
    /// `(time, mark index)`, sorted by time.
    pub events: Vec<(f64, usize)>,
    pub eps: f64,
    pub horizon: f64,
    /// Intensity multiplier `phi`; the identity when untilted.
    pub tilt: IntensityControl,
    pub seed: u64,
}

impl MarkedPointStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count_for_mark(&self, j: usize) -> usize {
        self.events.iter().filter(|e| e.1 == j).count()
    }
}

/// Samples events with intensity `eps^{-1} phi(s, z_j) nu_j ds` per mark by
/// thinning a homogeneous process with rate `eps^{-1} max(phi) nu_j`.
pub fn sample_prm(eps: f64, tilt: Option<&IntensityControl>, marks: &MarkSpace, horizon: f64, seed: u64) -> Result<MarkedPointStream> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let tilt = match tilt {
        Some(g) => {
            if g.marks() != marks.len() {
                return Err(Error::InvalidParameter("tilt and mark space disagree".into()));
            }
            if (g.horizon() - horizon).abs() > 1e-9 * horizon {
                return Err(Error::InvalidParameter("tilt horizon differs from the simulation horizon".into()));
            }
            if !(g.min_value() > 0.0) {
                return Err(Error::InvalidParameter("tilt must be strictly positive".into()));
            }
            g.clone()
        }
        None => IntensityControl::identity(horizon, marks.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(JUMP_STREAM);
    let mut events = vec![];
    for j in 0..marks.len() {
        let bound = (0..tilt.cells()).map(|i| tilt.cell_value(i, j)).fold(0.0, f64::max);
        let rate = bound * marks.weight(j) / eps;
        let gaps = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += rng.sample(gaps);
            if t >= horizon {
                break;
            }
            let accept = tilt.value_at(t, j) / bound;
            if accept >= 1.0 || rng.gen::<f64>() < accept {
                events.push((t, j));
            }
        }
    }
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(MarkedPointStream {
        events,
        eps,
        horizon,
        tilt,
        seed,
    })
}

/// Brownian increments per step plus the Poisson events of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub dt: f64,
    pub increments: Vec<f64>,
    pub jumps: MarkedPointStream,
    pub seed: u64,
    fingerprint: u64,
}

impl NoiseRealization {
    /// Draws increments from stream 0 and events from stream 1 of `seed`.
    /// With `eps = 0` the event list is empty.
    pub fn sample(eps: f64, tilt: Option<&IntensityControl>, marks: &MarkSpace, horizon: f64, dt: f64, seed: u64) -> Result<Self> {
        let steps = SolverOptions::default().with_dt(dt).steps(horizon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BROWNIAN_STREAM);
        let sd = dt.sqrt();
        let increments = (0..steps).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let jumps = if eps > 0.0 {
            sample_prm(eps, tilt, marks, horizon, seed)?
        } else if eps == 0.0 {
            MarkedPointStream {
                events: vec![],
                eps,
                horizon,
                tilt: tilt.cloned().unwrap_or_else(|| IntensityControl::identity(horizon, marks.len())),
                seed,
            }
        } else {
            return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
        };
        Ok(Self::from_parts(dt, increments, jumps, seed))
    }

    pub fn from_parts(dt: f64, increments: Vec<f64>, jumps: MarkedPointStream, seed: u64) -> Self {
        let mut h = DefaultHasher::new();
        seed.hash(&mut h);
        dt.to_bits().hash(&mut h);
        jumps.eps.to_bits().hash(&mut h);
        for x in &increments {
            x.to_bits().hash(&mut h);
        }
        for (t, j) in &jumps.events {
            t.to_bits().hash(&mut h);
            j.hash(&mut h);
        }
        for v in jumps.tilt.values() {
            v.to_bits().hash(&mut h);
        }
        NoiseRealization {
            dt,
            increments,
            jumps,
            seed,
            fingerprint: h.finish(),
        }
    }

    pub fn eps(&self) -> f64 {
        self.jumps.eps
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `W(t_n)` at every node.
    pub fn brownian_path(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.increments.len() + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for d in &self.increments {
            acc += d;
            w.push(acc);
        }
        w
    }
}

/// One applied jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpEvent {
    pub t: f64,
    pub mark: usize,
    pub pre_norm_w: f64,
    pub post_norm_w: f64,
}

/// Output of [`solve_spde`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpdePath {
    pub trajectory: Trajectory,
    pub events: Vec<JumpEvent>,
    /// `X(t-)` for every event, in event order.
    pub pre_jump_states: Vec<SpectralField>,
    noise_fingerprint: u64,
}

impl SpdePath {
    pub fn noise_fingerprint(&self) -> u64 {
        self.noise_fingerprint
    }

    pub fn events_to_csv(&self) -> String {
        let mut out = String::from("t,mark,pre_norm_w,post_norm_w\n");
        for e in &self.events {
            out.push_str(&format!("{:e},{},{:e},{:e}\n", e.t, e.mark, e.pre_norm_w, e.post_norm_w));
        }
        out
    }
}

/// Jump-drift weights of the canonical compensated form:
/// `(phi_j - 1) nu_j` from the control minus `phi_j nu_j` from the
/// compensator of `N^{phi/eps}`.
pub(crate) fn spde_jump_weights(phi: &[f64], nu: &[f64]) -> Vec<f64> {
    phi.iter().zip(nu).map(|(f, n)| (f - 1.0) * n - f * n).collect()
}

fn check_noise(noise: &NoiseRealization, eps: f64, steps: usize, dt: f64, tilt: &IntensityControl) -> Result<()> {
    if noise.eps() != eps || noise.steps() != steps || noise.dt != dt || &noise.jumps.tilt != tilt {
        return Err(Error::NoiseMismatch);
    }
    Ok(())
}

/// Integrates the controlled equation with `psi = q.f`, `phi = q.g` on a
/// given noise realization. With `eps = 0` the code path is exactly that of
/// the skeleton solver. The noise must have been sampled with `phi` as tilt.
pub fn solve_spde(
    x0: &SpectralField,
    eps: f64,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    noise: &NoiseRealization,
) -> Result<SpdePath> {
    let mut trajectory = Trajectory::with_capacity(noise.steps() + 1);
    let mut events = vec![];
    let mut pre_jump_states = vec![];
    integrate_spde(
        x0,
        eps,
        q,
        c,
        p,
        opts,
        noise,
        |t, x| trajectory.push(t, x.clone(), p),
        |e, pre| {
            events.push(e);
            pre_jump_states.push(pre.clone());
        },
    )?;
    Ok(SpdePath {
        trajectory,
        events,
        pre_jump_states,
        noise_fingerprint: noise.fingerprint(),
    })
}

/// Observer form of [`solve_spde`]: `node(t, X)` at every step node and
/// `jump(event, X(t-))` at every event.
#[allow(clippy::too_many_arguments)]
pub fn integrate_spde(
    x0: &SpectralField,
    eps: f64,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    noise: &NoiseRealization,
    mut node: impl FnMut(f64, &SpectralField),
    mut jump: impl FnMut(JumpEvent, &SpectralField),
) -> Result<SpectralField> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
    }
    let steps = validate_inputs(x0, q, c, p, opts)?;
    check_noise(noise, eps, steps, opts.dt, &q.g)?;
    let model = DriftModel::new(c, p, opts)?;
    let prop = Propagator::new(p, opts.dt);
    let nu = c.marks().weights();
    let noisy = eps > 0.0;
    let sqrt_eps = eps.sqrt();
    let mut x = x0.clone();
    check_state(&x, p, 0.0, opts.blowup_threshold)?;
    node(0.0, &x);
    let mut next_event = 0;
    let events = &noise.jumps.events;
    for n in 0..steps {
        let t = opts.time(n);
        let t_next = opts.time(n + 1);
        let (f, g) = control_values(q, t, opts.dt);
        let w = if noisy {
            spde_jump_weights(&g, nu)
        } else {
            skeleton_jump_weights(&g, nu)
        };
        if noisy && c.has_diffusion() {
            let dw = noise.increments[n];
            if dw != 0.0 {
                x.axpy(sqrt_eps * dw, &c.diffusion_hat(&x, t, p));
            }
        }
        let mut cur = t;
        let mut stepped = false;
        while next_event < events.len() && events[next_event].0 < t_next {
            let (tau, j) = events[next_event];
            next_event += 1;
            if tau > cur {
                x = prop.lawson_step(&x, cur, tau - cur, |y, s| model.eval(y, s, f, &w));
                check_state(&x, p, tau, opts.blowup_threshold)?;
                cur = tau;
                stepped = true;
            }
            let pre_w = norm_w(&x, p);
            let pre = x.clone();
            if c.has_jumps() {
                x.axpy(eps, &c.jump_hat(tau, &pre, j, p));
            }
            let post_w = check_state(&x, p, tau, opts.blowup_threshold)?;
            jump(
                JumpEvent {
                    t: tau,
                    mark: j,
                    pre_norm_w: pre_w,
                    post_norm_w: post_w,
                },
                &pre,
            );
        }
        let h = if stepped { t_next - cur } else { opts.dt };
        if h > 0.0 {
            x = prop.lawson_step(&x, cur, h, |y, s| model.eval(y, s, f, &w));
        }
        check_state(&x, p, t_next, opts.blowup_threshold)?;
        node(t_next, &x);
    }
    Ok(x)
}

/// Samples a noise realization tilted by `q.g` and solves the controlled equation.
pub fn simulate_spde(
    x0: &SpectralField,
    eps: f64,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    seed: u64,
) -> Result<(SpdePath, NoiseRealization)> {
    let noise = NoiseRealization::sample(eps, Some(&q.g), c.marks(), q.horizon(), opts.dt, seed)?;
    let path = solve_spde(x0, eps, q, c, p, opts, &noise)?;
    Ok((path, noise))
}

/// Solves the linear equation
/// `dY = -kappa A_hat Y dt + sqrt(eps) G_hat(X) dW + eps int sigma_hat(X(t-), z) dN~^{phi/eps}`,
/// `Y(0) = 0`, driven by the same noise as `path`.
pub fn solve_y(
    eps: f64,
    path: &SpdePath,
    noise: &NoiseRealization,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    if path.noise_fingerprint != noise.fingerprint() || noise.eps() != eps || noise.dt != opts.dt {
        return Err(Error::NoiseMismatch);
    }
    let steps = noise.steps();
    if path.trajectory.len() != steps + 1 || path.pre_jump_states.len() != noise.jumps.len() {
        return Err(Error::NoiseMismatch);
    }
    let prop = Propagator::new(p, opts.dt);
    let nu = c.marks().weights();
    let sqrt_eps = eps.sqrt();
    let n = p.mode_cutoff;
    let mut y = SpectralField::zeros(n);
    let mut out = Trajectory::with_capacity(steps + 1);
    out.push(0.0, y.clone(), p);
    let events = &noise.jumps.events;
    let mut next_event = 0;
    for step in 0..steps {
        let t = opts.time(step);
        let t_next = opts.time(step + 1);
        let xn = &path.trajectory.states[step];
        let mut drift = SpectralField::zeros(n);
        if eps > 0.0 {
            if c.has_diffusion() {
                y.axpy(sqrt_eps * noise.increments[step], &c.diffusion_hat(xn, t, p));
            }
            if c.has_jumps() {
                let (_, g) = control_values(q, t, opts.dt);
                let mut acc = SpectralField::zeros(n);
                for j in 0..nu.len() {
                    acc.axpy(-g[j] * nu[j], &c.jump(t, xn, j, p));
                }
                drift = hat(&acc, p);
            }
        }
        let mut cur = t;
        let mut stepped = false;
        while next_event < events.len() && events[next_event].0 < t_next {
            let (tau, j) = events[next_event];
            if tau > cur {
                y = prop.lawson_step(&y, cur, tau - cur, |_, _| drift.clone());
                cur = tau;
                stepped = true;
            }
            if c.has_jumps() {
                y.axpy(eps, &c.jump_hat(tau, &path.pre_jump_states[next_event], j, p));
            }
            next_event += 1;
        }
        let h = if stepped { t_next - cur } else { opts.dt };
        if h > 0.0 {
            y = prop.lawson_step(&y, cur, h, |_, _| drift.clone());
        }
        check_state(&y, p, t_next, opts.blowup_threshold)?;
        out.push(t_next, y.clone(), p);
    }
    Ok(out)
}

/// Log-components of the Girsanov density of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GirsanovWeight {
    /// `eps^{-1/2} int psi dW - (2 eps)^{-1} int psi^2 dt`.
    pub log_brownian: f64,
    /// `sum_events log(1/phi) + eps^{-1} int int (phi - 1) nu dt`.
    pub log_jump: f64,
}

impl GirsanovWeight {
    pub fn brownian(&self) -> f64 {
        self.log_brownian.exp()
    }

    pub fn jump(&self) -> f64 {
        self.log_jump.exp()
    }

    pub fn value(&self) -> f64 {
        (self.log_brownian + self.log_jump).exp()
    }
}

/// Girsanov weights for shift `psi` and tilt `phi` on a noise realization.
/// The jump factor is written against the simulated (tilted) intensity, so
/// it is the likelihood ratio of the untilted law with respect to the tilted one.
pub fn girsanov_weight(psi: &ScalarControl, tilt: &IntensityControl, marks: &MarkSpace, eps: f64, noise: &NoiseRealization) -> Result<GirsanovWeight> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("Girsanov weights need eps > 0".into()));
    }
    if tilt.marks() != marks.len() || !(tilt.min_value() > 0.0) {
        return Err(Error::InvalidParameter("tilt must be positive and match the mark space".into()));
    }
    let dt = noise.dt;
    crate::controls::check_alignment(psi.grid(), dt)?;
    let (mut stoch, mut quad) = (0.0, 0.0);
    for (n, dw) in noise.increments.iter().enumerate() {
        let v = psi.value_at((n as f64 + 0.5) * dt);
        stoch += v * dw;
        quad += v * v * dt;
    }
    let log_brownian = stoch / eps.sqrt() - quad / (2.0 * eps);
    let mut log_jump: f64 = noise.jumps.events.iter().map(|&(t, j)| -tilt.value_at(t, j).ln()).sum();
    let mut comp = 0.0;
    for (i, w) in tilt.grid().windows(2).enumerate() {
        for j in 0..marks.len() {
            comp += (tilt.cell_value(i, j) - 1.0) * marks.weight(j) * (w[1] - w[0]);
        }
    }
    log_jump += comp / eps;
    Ok(GirsanovWeight {
        log_brownian,
        log_jump,
    })
}

/// Likelihood ratio of the unshifted, untilted law with respect to the
/// equal-weight mixture of the laws shifted by `controls[k].f` and tilted by
/// `controls[k].g`, for a path simulated under component `used`. With a
/// single component this equals `girsanov_weight(-f, g, ..)`.
pub fn mixture_likelihood_ratio(controls: &[ControlPair], used: usize, marks: &MarkSpace, eps: f64, noise: &NoiseRealization) -> Result<f64> {
    if !(eps > 0.0) || used >= controls.len() {
        return Err(Error::InvalidParameter("mixture needs eps > 0 and a valid component".into()));
    }
    if noise.jumps.tilt != controls[used].g {
        return Err(Error::NoiseMismatch);
    }
    let dt = noise.dt;
    let mid = |n: usize| (n as f64 + 0.5) * dt;
    let sqrt_eps = eps.sqrt();
    let shift = &controls[used].f;
    // increments of the reference Brownian motion along the simulated path
    let dw: Vec<f64> = noise
        .increments
        .iter()
        .enumerate()
        .map(|(n, d)| d + shift.value_at(mid(n)) * dt / sqrt_eps)
        .collect();
    let mut logs = Vec::with_capacity(controls.len());
    for q in controls {
        crate::controls::check_alignment(q.f.grid(), dt)?;
        let mut log_r = 0.0;
        for (n, d) in dw.iter().enumerate() {
            let v = q.f.value_at(mid(n));
            log_r += v * d / sqrt_eps - v * v * dt / (2.0 * eps);
        }
        for &(t, j) in &noise.jumps.events {
            log_r += q.g.value_at(t, j).ln();
        }
        for (i, w) in q.g.grid().windows(2).enumerate() {
            for j in 0..marks.len() {
                log_r -= (q.g.cell_value(i, j) - 1.0) * marks.weight(j) * (w[1] - w[0]) / eps;
            }
        }
        logs.push(log_r);
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = logs.iter().map(|l| (l - top).exp()).sum::<f64>() / logs.len() as f64;
    Ok((-top - mean.ln()).exp())
}

/// Mean Girsanov weights over independent paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GirsanovCheck {
    pub brownian: Estimate,
    pub jump: Estimate,
    pub combined: Estimate,
}

impl GirsanovCheck {
    /// All three means within `k` standard errors of one.
    pub fn passed(&self, k: f64) -> bool {
        self.brownian.within(1.0, k) && self.jump.within(1.0, k) && self.combined.within(1.0, k)
    }
}

/// Monte Carlo check of `E[weight] = 1` for constant-in-time controls.
pub fn girsanov_check(psi: &ScalarControl, tilt: &IntensityControl, marks: &MarkSpace, eps: f64, dt: f64, paths: usize, seed: u64) -> Result<GirsanovCheck> {
    let weights = try_par_map(paths, |i| -> Result<GirsanovWeight> {
        let noise = NoiseRealization::sample(eps, Some(tilt), marks, tilt.horizon(), dt, derive_seed(seed, i as u64))?;
        girsanov_weight(psi, tilt, marks, eps, &noise)
    })?;
    let col = |f: fn(&GirsanovWeight) -> f64| Estimate::from_samples(&weights.iter().map(f).collect::<Vec<_>>());
    Ok(GirsanovCheck {
        brownian: col(GirsanovWeight::brownian),
        jump: col(GirsanovWeight::jump),
        combined: col(GirsanovWeight::value),
    })
}

/// One row of an `eps`-indexed Monte Carlo table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub estimate: Estimate,
}

/// `E sup_t ||Y(t)||_W^2` per `eps` with its log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YBoundStudy {
    pub rows: Vec<EpsRow>,
    pub slope: f64,
}

/// Monte Carlo estimate of `E sup_t ||Y^eps(t)||_W^2` for each `eps`.
#[allow(clippy::too_many_arguments)]
pub fn y_bound_study(
    eps_list: &[f64],
    paths: usize,
    x0: &SpectralField,
    q: &ControlPair,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    seed: u64,
) -> Result<YBoundStudy> {
    let mut rows = vec![];
    for (ei, &eps) in eps_list.iter().enumerate() {
        let sups = try_par_map(paths, |i| -> Result<f64> {
            let s = derive_seed(seed, (ei * paths + i) as u64);
            let (path, noise) = simulate_spde(x0, eps, q, c, p, opts, s)?;
            Ok(solve_y(eps, &path, &noise, q, c, p, opts)?.sup_w_squared())
        })?;
        rows.push(EpsRow {
            eps,
            estimate: Estimate::from_samples(&sups),
        });
    }
    let slope = if rows.len() >= 2 {
        log_log_slope(
            &rows.iter().map(|r| r.eps).collect::<Vec<_>>(),
            &rows.iter().map(|r| r.estimate.mean).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok(YBoundStudy { rows, slope })
}

/// One row of [`a_priori_w_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct APrioriRow {
    pub eps: f64,
    pub m: usize,
    /// Mean over trials of `sup_t ||X(t)||_W^2`.
    pub estimate: Estimate,
    pub max: f64,
}

/// `E sup_t ||X^eps(t)||_W^2` under random deterministic controls in `S^m`
/// (trial 0 uncontrolled), for each `eps` and `m = 1..max_level`.
#[allow(clippy::too_many_arguments)]
pub fn a_priori_w_scan(
    eps_list: &[f64],
    max_level: usize,
    trials: usize,
    control_cells: usize,
    x0: &SpectralField,
    c: &dyn Coefficients,
    p: &FluidParams,
    opts: &SolverOptions,
    horizon: f64,
    seed: u64,
) -> Result<Vec<APrioriRow>> {
    let marks = c.marks();
    let mut rows = vec![];
    for (ei, &eps) in eps_list.iter().enumerate() {
        for m in 1..=max_level {
            let sups = try_par_map(trials, |i| -> Result<f64> {
                let base = ((ei * (max_level + 1) + m) * trials + i) as u64;
                let q = if i == 0 {
                    ControlPair::uncontrolled(horizon, marks.len())
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xC0DE, base));
                    random_control(m as f64, control_cells, horizon, marks, &mut rng)?
                };
                let noise = NoiseRealization::sample(eps, Some(&q.g), marks, horizon, opts.dt, derive_seed(seed, base))?;
                let mut sup = 0.0f64;
                integrate_spde(x0, eps, &q, c, p, opts, &noise, |_, x| sup = sup.max(norm_w(x, p).powi(2)), |_, _| {})?;
                Ok(sup)
            })?;
            rows.push(APrioriRow {
                eps,
                m,
                estimate: Estimate::from_samples(&sups),
                max: sups.iter().cloned().fold(0.0, f64::max),
            });
        }
    }
    Ok(rows)
}

/// Largest ratio between estimates of the same level across `eps`.
pub fn a_priori_spread(rows: &[APrioriRow]) -> f64 {
    let mut worst = 1.0f64;
    let levels: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.m).collect();
    for m in levels {
        let vals: Vec<f64> = rows.iter().filter(|r| r.m == m).map(|r| r.estimate.mean).collect();
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        worst = worst.max(hi / lo);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSet, DiffusionPart, DriftPart, JumpPart};
    use crate::skeleton::{default_initial_state, solve_skeleton};
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn params() -> FluidParams {
        FluidParams::new(1.0, 0.5, 2.0 * PI, 4).unwrap()
    }

    #[test]
    fn canonical_drift_equals_first_display() {
        let p = params();
        let c = CoefficientSet::default_family(&p).unwrap();
        let model = DriftModel::new(&c, &p, &SolverOptions::default()).unwrap();
        let x = default_initial_state(&p);
        let phi = [1.7, 0.4];
        let nu = c.marks().weights();
        let canonical = model.eval(&x, 0.2, 0.3, &spde_jump_weights(&phi, nu));
        let first: Vec<f64> = nu.iter().map(|n| -n).collect();
        let direct = model.eval(&x, 0.2, 0.3, &first);
        let diff = crate::spectral::distance_v(&canonical, &direct, &p);
        assert!(diff <= 1e-14 * crate::spectral::norm_v(&direct, &p));
    }

    #[test]
    fn eps_zero_equals_skeleton_bitwise() {
        let p = params();
        let c = CoefficientSet::default_family(&p).unwrap();
        let x0 = default_initial_state(&p);
        let q = ControlPair::new(
            ScalarControl::uniform(1.0, vec![0.5, -0.3]).unwrap(),
            IntensityControl::uniform(1.0, 2, vec![1.5, 0.7, 0.9, 1.2]).unwrap(),
        )
        .unwrap();
        let opts = SolverOptions::default().with_dt(0.01);
        let (path, _) = simulate_spde(&x0, 0.0, &q, &c, &p, &opts, 3).unwrap();
        let skel = solve_skeleton(&x0, &q, &c, &p, &opts).unwrap();
        assert_eq!(path.trajectory.states, skel.states);
        assert!(path.events.is_empty());
    }

    #[test]
    fn prm_counts_scale_with_eps() {
        let marks = MarkSpace::single(1.0);
        let mean = |eps: f64| {
            let counts: Vec<f64> = (0..4000)
                .map(|i| sample_prm(eps, None, &marks, 1.0, derive_seed(9, i)).unwrap().len() as f64)
                .collect();
            Estimate::from_samples(&counts)
        };
        let a = mean(1.0);
        assert!(a.within(1.0, 3.0), "{a:?}");
        let b = mean(0.25);
        assert!(b.within(4.0, 3.0), "{b:?}");
        let g = IntensityControl::constant(1.0, 1, 0.5).unwrap();
        let counts: Vec<f64> = (0..4000)
            .map(|i| sample_prm(1.0, Some(&g), &marks, 1.0, derive_seed(10, i)).unwrap().len() as f64)
            .collect();
        assert!(Estimate::from_samples(&counts).within(0.5, 3.0));
        assert!(sample_prm(1.0, Some(&IntensityControl::constant(1.0, 1, 0.0).unwrap()), &marks, 1.0, 1).is_err());
    }

    #[test]
    fn y_rejects_foreign_noise() {
        let p = params();
        let c = CoefficientSet::default_family(&p).unwrap();
        let q = ControlPair::uncontrolled(0.1, 2);
        let opts = SolverOptions::default().with_dt(0.01);
        let x0 = default_initial_state(&p);
        let (path, noise) = simulate_spde(&x0, 0.1, &q, &c, &p, &opts, 1).unwrap();
        assert!(solve_y(0.1, &path, &noise, &q, &c, &p, &opts).is_ok());
        let other = NoiseRealization::sample(0.1, None, c.marks(), 0.1, 0.01, 2).unwrap();
        assert!(matches!(solve_y(0.1, &path, &other, &q, &c, &p, &opts), Err(Error::NoiseMismatch)));
    }

    #[test]
    fn y_vanishes_without_noise() {
        let p = params();
        let c = CoefficientSet::default_family(&p).unwrap();
        let q = ControlPair::uncontrolled(0.1, 2);
        let opts = SolverOptions::default().with_dt(0.01);
        let (path, noise) = simulate_spde(&default_initial_state(&p), 0.0, &q, &c, &p, &opts, 1).unwrap();
        let y = solve_y(0.0, &path, &noise, &q, &c, &p, &opts).unwrap();
        assert!(y.states.iter().all(|s| s.is_zero()));
    }

    #[test]
    fn jump_weight_closed_form() {
        let marks = MarkSpace::single(1.0);
        let cst = 2.5;
        let tilt = IntensityControl::constant(1.0, 1, cst).unwrap();
        let noise = NoiseRealization::sample(1.0, Some(&tilt), &marks, 1.0, 0.01, 4).unwrap();
        let w = girsanov_weight(&ScalarControl::zero(1.0), &tilt, &marks, 1.0, &noise).unwrap();
        let count = noise.jumps.len() as f64;
        let expected = count * (1.0 / cst).ln() + (1.0 - 1.0 / cst) * cst;
        assert!((w.log_jump - expected).abs() < 1e-12);
        assert_eq!(w.log_brownian, 0.0);
        let id = IntensityControl::identity(1.0, 1);
        let noise = NoiseRealization::sample(1.0, None, &marks, 1.0, 0.01, 5).unwrap();
        assert_eq!(girsanov_weight(&ScalarControl::zero(1.0), &id, &marks, 1.0, &noise).unwrap().value(), 1.0);
    }

    #[test]
    fn single_component_mixture_matches_girsanov() {
        let marks = MarkSpace::from_weights(vec![0.5, 1.5]).unwrap();
        let q = ControlPair::new(
            ScalarControl::uniform(1.0, vec![0.4, -0.8]).unwrap(),
            IntensityControl::uniform(1.0, 2, vec![1.3, 0.6, 2.0, 0.9]).unwrap(),
        )
        .unwrap();
        let noise = NoiseRealization::sample(0.2, Some(&q.g), &marks, 1.0, 0.01, 6).unwrap();
        let lr = mixture_likelihood_ratio(std::slice::from_ref(&q), 0, &marks, 0.2, &noise).unwrap();
        let w = girsanov_weight(&q.f.negated(), &q.g, &marks, 0.2, &noise).unwrap().value();
        assert!((lr - w).abs() <= 1e-10 * w);
        let other = ControlPair::uncontrolled(1.0, 2);
        assert!(matches!(
            mixture_likelihood_ratio(&[other], 0, &marks, 0.2, &noise),
            Err(Error::NoiseMismatch)
        ));
    }

    #[test]
    fn jump_increment_uses_left_limit() {
        let p = params();
        let v = crate::coefficients::unit_mode(&p, (1, 1)).unwrap();
        let c = CoefficientSet::new(
            &p,
            MarkSpace::single(1.0),
            DriftPart::Zero,
            DiffusionPart::Zero,
            JumpPart::Affine {
                amplitudes: vec![1.0],
                linear: vec![1.0],
                fields: vec![v],
            },
        )
        .unwrap();
        let q = ControlPair::uncontrolled(0.5, 1);
        let opts = SolverOptions::default().with_dt(0.01).linear();
        let x0 = SpectralField::real_mode(4, (2, 0), Complex64::new(0.1, 0.0));
        let (path, _) = simulate_spde(&x0, 0.5, &q, &c, &p, &opts, 8).unwrap();
        assert_eq!(path.events.len(), path.pre_jump_states.len());
        for (e, pre) in path.events.iter().zip(&path.pre_jump_states) {
            assert!((norm_w(pre, &p) - e.pre_norm_w).abs() < 1e-15 * e.pre_norm_w.max(1.0));
        }
    }
}
