//! Exponential (Lawson) midpoint stepping shared by the deterministic and
//! stochastic solvers.
//!
//! The linear term `-kappa A_hat X` is integrated exactly mode by mode; the
//! remaining drift `N` is treated by the explicit midpoint rule in the
//! integrating-factor frame:
//!
//! ```text
//! X_mid = E(h/2) (X + h/2 N(X, t))
//! X_new = E(h) X + h E(h/2) N(X_mid, t + h/2)
//! ```

use serde::{Deserialize, Serialize};

use crate::coefficients::{hat, Coefficients};
use crate::error::{Error, Result};
use crate::spectral::{cutoff_bump, norm_v, norm_w, BilinearOperator, FluidParams, ModeTable, SpectralField};

/// Options shared by all solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub dt: f64,
    /// Include the bilinear term `B_hat(X, X)`.
    pub nonlinear: bool,
    /// Radius `n` of the cutoff applied to the bilinear term; `None` disables it.
    pub cutoff_radius: Option<f64>,
    /// Abort when `||X||_W` exceeds this value.
    pub blowup_threshold: f64,
    /// Collocation grid for the bilinear term; defaults to the smallest alias-free size.
    pub collocation_grid: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            dt: 1e-3,
            nonlinear: true,
            cutoff_radius: None,
            blowup_threshold: 1e6,
            collocation_grid: None,
        }
    }
}

impl SolverOptions {
    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn linear(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    /// Number of steps covering `[0, horizon]`; the horizon must be a multiple of `dt`.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        let r = horizon / self.dt;
        if (r - r.round()).abs() > 1e-9 * r {
            return Err(Error::GridMisaligned {
                dt: self.dt,
                point: horizon,
            });
        }
        Ok(r.round() as usize)
    }

    /// Node time `n dt`, computed without accumulation.
    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// Exact propagator `E(h) = exp(-kappa A_hat h)` with cached tables for `dt`.
#[derive(Debug, Clone)]
pub(crate) struct Propagator {
    dt: f64,
    full: ModeTable,
    half: ModeTable,
    cutoff: usize,
    kappa: f64,
    p: FluidParams,
}

impl Propagator {
    pub(crate) fn new(p: &FluidParams, dt: f64) -> Self {
        let n = p.mode_cutoff;
        let table = |h: f64| ModeTable::from_symbol(n, |k| (-p.kappa * p.a_hat_symbol(k) * h).exp());
        Propagator {
            dt,
            full: table(dt),
            half: table(0.5 * dt),
            cutoff: n,
            kappa: p.kappa,
            p: *p,
        }
    }

    fn tables(&self, h: f64) -> (std::borrow::Cow<'_, ModeTable>, std::borrow::Cow<'_, ModeTable>) {
        use std::borrow::Cow;
        if h == self.dt {
            (Cow::Borrowed(&self.half), Cow::Borrowed(&self.full))
        } else {
            let p = self.p;
            let make = |s: f64| ModeTable::from_symbol(self.cutoff, |k| (-self.kappa * p.a_hat_symbol(k) * s).exp());
            (Cow::Owned(make(0.5 * h)), Cow::Owned(make(h)))
        }
    }

    /// One Lawson midpoint step of length `h`.
    pub(crate) fn lawson_step(
        &self,
        x: &SpectralField,
        t: f64,
        h: f64,
        mut drift: impl FnMut(&SpectralField, f64) -> SpectralField,
    ) -> SpectralField {
        let (half, full) = self.tables(h);
        let n0 = drift(x, t);
        let mut xm = x.clone();
        xm.axpy(0.5 * h, &n0);
        xm.scale_by(&half);
        let mut n1 = drift(&xm, t + 0.5 * h);
        n1.scale_by(&half);
        let mut out = x.clone();
        out.scale_by(&full);
        out.axpy(h, &n1);
        out
    }
}

/// Evaluates the non-stiff drift
/// `-chi B_hat(X, X) + hat(F + G f + sum_j sigma_j w_j)`
/// for given Brownian control value `f` and per-mark jump weights `w_j`.
pub(crate) struct DriftModel<'a> {
    pub(crate) coeffs: &'a dyn Coefficients,
    pub(crate) p: FluidParams,
    bilinear: Option<BilinearOperator>,
    cutoff_radius: Option<f64>,
}

impl<'a> DriftModel<'a> {
    pub(crate) fn new(coeffs: &'a dyn Coefficients, p: &FluidParams, opts: &SolverOptions) -> Result<Self> {
        let bilinear = if opts.nonlinear {
            let grid = opts
                .collocation_grid
                .unwrap_or_else(|| BilinearOperator::default_grid(p.mode_cutoff));
            Some(BilinearOperator::with_grid(p, grid)?)
        } else {
            None
        };
        Ok(DriftModel {
            coeffs,
            p: *p,
            bilinear,
            cutoff_radius: opts.cutoff_radius,
        })
    }

    pub(crate) fn eval(&self, x: &SpectralField, t: f64, f: f64, jump_weights: &[f64]) -> SpectralField {
        let p = &self.p;
        let c = self.coeffs;
        let mut acc = SpectralField::zeros(x.cutoff());
        let mut any = false;
        if c.has_drift() {
            acc += &c.drift(x, t, p);
            any = true;
        }
        if c.has_diffusion() && f != 0.0 {
            acc.axpy(f, &c.diffusion(x, t, p));
            any = true;
        }
        if c.has_jumps() {
            for (j, &w) in jump_weights.iter().enumerate() {
                if w != 0.0 {
                    acc.axpy(w, &c.jump(t, x, j, p));
                    any = true;
                }
            }
        }
        let mut out = if any { hat(&acc, p) } else { acc };
        if let Some(b) = &self.bilinear {
            let chi = self.cutoff_radius.map_or(1.0, |n| cutoff_bump(norm_v(x, p), n));
            if chi != 0.0 {
                out.axpy(-chi, &b.apply(x, x));
            }
        }
        out
    }
}

/// Per-mark weights `(g_j - 1) nu_j` of the skeleton jump drift.
pub(crate) fn skeleton_jump_weights(g: &[f64], nu: &[f64]) -> Vec<f64> {
    g.iter().zip(nu).map(|(g, n)| (g - 1.0) * n).collect()
}

/// Rejects non-finite states and states above the blow-up threshold.
/// Returns `||x||_W`.
pub(crate) fn check_state(x: &SpectralField, p: &FluidParams, t: f64, threshold: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::BlowUp {
            time: t,
            reason: "non-finite state".into(),
        });
    }
    let w = norm_w(x, p);
    if w > threshold {
        return Err(Error::BlowUp {
            time: t,
            reason: format!("||X||_W = {w:e} exceeds {threshold:e}"),
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn linear_step_is_exact() {
        let p = FluidParams::default().with_cutoff(4);
        let prop = Propagator::new(&p, 0.01);
        let x = SpectralField::real_mode(4, (2, 1), Complex64::new(0.3, -0.2));
        let out = prop.lawson_step(&x, 0.0, 0.01, |y, _| SpectralField::zeros(y.cutoff()));
        let mu = p.a_hat_symbol((2, 1));
        let expected = x.mode((2, 1)) * (-p.kappa * mu * 0.01).exp();
        assert!((out.mode((2, 1)) - expected).norm() < 1e-16);
    }

    #[test]
    fn step_counts() {
        let o = SolverOptions::default();
        assert_eq!(o.steps(1.0).unwrap(), 1000);
        assert!(o.with_dt(0.3).steps(1.0).is_err());
        assert!(o.with_dt(0.0).steps(1.0).is_err());
    }

    #[test]
    fn midpoint_is_second_order_on_scalar_ode() {
        // x' = -kappa mu x + c with exact solution known; drift is constant c
        let p = FluidParams::default().with_cutoff(2);
        let k = (1, 1);
        let lam = p.kappa * p.a_hat_symbol(k);
        let c = SpectralField::real_mode(2, k, Complex64::new(1.0, 0.0));
        let x0 = SpectralField::real_mode(2, k, Complex64::new(0.5, 0.0));
        let exact = 0.5 * (-lam).exp() + (1.0 - (-lam).exp()) / lam;
        let err = |h: f64| {
            let prop = Propagator::new(&p, h);
            let steps = (1.0 / h).round() as usize;
            let mut x = x0.clone();
            for n in 0..steps {
                x = prop.lawson_step(&x, n as f64 * h, h, |_, _| c.clone());
            }
            (x.mode(k).re - exact).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }
}
