//! Function-space geometry and the linear/bilinear operators of the
//! second-grade fluid on the periodic torus `[0, L)^2`.
//!
//! A [`SpectralField`] stores one complex amplitude per retained wavenumber
//! `k`, `0 < |k|_inf <= N`, along the unit vector `k_perp / |k|` with
//! `k_perp = (-k2, k1)`. Every stored field is therefore divergence free and
//! has zero mean. The physical velocity is
//!
//! ```text
//! u(x) = sum_k  u_k * (k_perp / |k|) * exp(i (2 pi / L) k . x)
//! ```
//!
//! and it is real exactly when `u_{-k} = -conj(u_k)` (the basis vector flips
//! sign under `k -> -k`). All norms are evaluated by Parseval with the
//! convention `int |exp(i k.x)|^2 dx = L^2`.
//!
//! On the torus the Stokes operator, `(I + alpha A)^{-1}` and `A_hat` are
//! diagonal with multipliers depending only on `|k|^2`. The only grid-space
//! operation is the bilinear term [`BilinearOperator`].

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and discretization parameters of the fluid model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidParams {
    /// Elastic parameter.
    pub alpha: f64,
    /// Viscosity.
    pub kappa: f64,
    /// Torus period `L`.
    pub domain_side: f64,
    /// Retain wavenumbers with `|k|_inf <= mode_cutoff`.
    pub mode_cutoff: usize,
}

impl Default for FluidParams {
    fn default() -> Self {
        FluidParams {
            alpha: 1.0,
            kappa: 0.5,
            domain_side: 2.0 * PI,
            mode_cutoff: 8,
        }
    }
}

impl FluidParams {
    pub fn new(alpha: f64, kappa: f64, domain_side: f64, mode_cutoff: usize) -> Result<Self> {
        let p = FluidParams {
            alpha,
            kappa,
            domain_side,
            mode_cutoff,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.domain_side > 0.0 && self.domain_side.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "domain side must be positive, got {}",
                self.domain_side
            )));
        }
        if self.mode_cutoff == 0 {
            return Err(Error::InvalidParameter("mode cutoff must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_cutoff(mut self, n: usize) -> Self {
        self.mode_cutoff = n;
        self
    }

    /// `2 pi / L`.
    #[inline]
    pub fn wavenumber_scale(&self) -> f64 {
        2.0 * PI / self.domain_side
    }

    /// Poincare constant of the torus, `L / (2 pi)`.
    pub fn poincare_constant(&self) -> f64 {
        self.domain_side / (2.0 * PI)
    }

    /// Physical `|kappa_k|^2` for integer wavenumber `k`.
    #[inline]
    pub fn k_squared(&self, k: Wavenumber) -> f64 {
        let s = self.wavenumber_scale();
        s * s * (k.0 * k.0 + k.1 * k.1) as f64
    }

    /// `1 + alpha |k|^2`, the symbol of `I + alpha A`.
    #[inline]
    pub fn elastic_symbol(&self, k: Wavenumber) -> f64 {
        1.0 + self.alpha * self.k_squared(k)
    }

    /// Eigenvalue linking the W and V inner products of mode `k`.
    pub fn w_eigenvalue(&self, k: Wavenumber) -> f64 {
        self.elastic_symbol(k) * self.k_squared(k)
    }

    /// Multiplier of `A_hat = (I + alpha A)^{-1} A`.
    pub fn a_hat_symbol(&self, k: Wavenumber) -> f64 {
        self.k_squared(k) / self.elastic_symbol(k)
    }

    fn area(&self) -> f64 {
        self.domain_side * self.domain_side
    }
}

/// Integer wavenumber `(k1, k2)`.
pub type Wavenumber = (i64, i64);

fn side_len(cutoff: usize) -> usize {
    2 * cutoff + 1
}

/// Iterates over all retained non-zero wavenumbers of cutoff `n`, in storage order.
pub fn wavenumbers(n: usize) -> impl Iterator<Item = Wavenumber> {
    let n = n as i64;
    (-n..=n)
        .flat_map(move |k1| (-n..=n).map(move |k2| (k1, k2)))
        .filter(|&k| k != (0, 0))
}

/// Truncated divergence-free velocity field.
#[derive(Clone, PartialEq)]
pub struct SpectralField {
    cutoff: usize,
    coeffs: Vec<Complex64>,
}

impl fmt::Debug for SpectralField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.coeffs.iter().filter(|c| c.norm_sqr() > 0.0).count();
        f.debug_struct("SpectralField")
            .field("cutoff", &self.cutoff)
            .field("nonzero_modes", &nonzero)
            .finish()
    }
}

impl SpectralField {
    pub fn zeros(cutoff: usize) -> Self {
        let s = side_len(cutoff);
        SpectralField {
            cutoff,
            coeffs: vec![Complex64::new(0.0, 0.0); s * s],
        }
    }

    /// A field with a single stored amplitude (no conjugate completion).
    pub fn single_mode(cutoff: usize, k: Wavenumber, amplitude: Complex64) -> Self {
        let mut u = Self::zeros(cutoff);
        u.set_mode(k, amplitude);
        u
    }

    /// A real field built from one mode and its conjugate partner.
    pub fn real_mode(cutoff: usize, k: Wavenumber, amplitude: Complex64) -> Self {
        let mut u = Self::zeros(cutoff);
        u.set_real_mode(k, amplitude);
        u
    }

    /// Random real field with Gaussian amplitudes damped by `(1 + |k|^2)^(-decay/2)`.
    pub fn random<R: Rng + ?Sized>(cutoff: usize, rng: &mut R, decay: f64) -> Self {
        let mut u = Self::zeros(cutoff);
        for k in wavenumbers(cutoff) {
            if !is_upper_half(k) {
                continue;
            }
            let weight = (1.0 + (k.0 * k.0 + k.1 * k.1) as f64).powf(-0.5 * decay);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            u.set_real_mode(k, Complex64::new(re, im) * weight);
        }
        u
    }

    #[inline]
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    #[inline]
    fn index(&self, k: Wavenumber) -> Option<usize> {
        let n = self.cutoff as i64;
        if k == (0, 0) || k.0.abs() > n || k.1.abs() > n {
            return None;
        }
        let s = side_len(self.cutoff) as i64;
        Some(((k.0 + n) * s + (k.1 + n)) as usize)
    }

    #[inline]
    fn wavenumber_at(&self, idx: usize) -> Wavenumber {
        let s = side_len(self.cutoff);
        let n = self.cutoff as i64;
        ((idx / s) as i64 - n, (idx % s) as i64 - n)
    }

    /// Amplitude at `k`; zero for wavenumbers outside the retained set.
    pub fn mode(&self, k: Wavenumber) -> Complex64 {
        self.index(k)
            .map(|i| self.coeffs[i])
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Sets the raw amplitude at `k`. Panics if `k` is not retained.
    pub fn set_mode(&mut self, k: Wavenumber, amplitude: Complex64) {
        let i = self
            .index(k)
            .unwrap_or_else(|| panic!("wavenumber {k:?} outside cutoff {}", self.cutoff));
        self.coeffs[i] = amplitude;
    }

    /// Sets `k` and its partner `-k` so the velocity stays real.
    pub fn set_real_mode(&mut self, k: Wavenumber, amplitude: Complex64) {
        self.set_mode(k, amplitude);
        self.set_mode((-k.0, -k.1), -amplitude.conj());
    }

    /// Iterates `(k, amplitude)` over retained modes.
    pub fn modes(&self) -> impl Iterator<Item = (Wavenumber, Complex64)> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .filter_map(move |(i, &c)| {
                let k = self.wavenumber_at(i);
                (k != (0, 0)).then_some((k, c))
            })
    }

    /// Largest violation of the reality condition.
    pub fn reality_defect(&self) -> f64 {
        self.modes()
            .map(|(k, c)| (c + self.mode((-k.0, -k.1)).conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// Multiplies each mode by `symbol(k)`.
    pub fn map_symbol(&self, symbol: impl Fn(Wavenumber) -> f64) -> Self {
        let mut out = self.clone();
        out.apply_symbol(symbol);
        out
    }

    pub fn apply_symbol(&mut self, symbol: impl Fn(Wavenumber) -> f64) {
        for i in 0..self.coeffs.len() {
            let k = self.wavenumber_at(i);
            if k != (0, 0) {
                self.coeffs[i] *= symbol(k);
            }
        }
    }

    /// Multiplies mode-wise by a precomputed table.
    pub fn scale_by(&mut self, table: &ModeTable) {
        assert_eq!(self.cutoff, table.cutoff, "mode table cutoff does not match field");
        for (x, w) in self.coeffs.iter_mut().zip(&table.values) {
            *x *= *w;
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) {
        self.check_same(other);
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += y * a;
        }
    }

    /// Returns the field restricted (or zero-extended) to a new cutoff.
    pub fn resized(&self, cutoff: usize) -> Self {
        let mut out = Self::zeros(cutoff);
        for (k, c) in self.modes() {
            if let Some(i) = out.index(k) {
                out.coeffs[i] = c;
            }
        }
        out
    }

    fn check_same(&self, other: &SpectralField) {
        assert_eq!(
            self.cutoff, other.cutoff,
            "spectral fields with different cutoffs"
        );
    }

    /// Weighted Parseval sum `L^2 * sum_k w(k) Re(u_k conj v_k)`.
    fn weighted_inner(&self, other: &SpectralField, p: &FluidParams, w: impl Fn(Wavenumber) -> f64) -> f64 {
        self.check_same(other);
        let mut acc = 0.0;
        for (i, (a, b)) in self.coeffs.iter().zip(&other.coeffs).enumerate() {
            let k = self.wavenumber_at(i);
            if k == (0, 0) {
                continue;
            }
            acc += w(k) * (a * b.conj()).re;
        }
        acc * p.area()
    }

    /// Velocity components on an `m x m` collocation grid, row-major in `(x1, x2)`.
    pub fn to_grid(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let mut g1 = vec![0.0; m * m];
        let mut g2 = vec![0.0; m * m];
        for (k, c) in self.modes() {
            if c.norm_sqr() == 0.0 {
                continue;
            }
            let kn = ((k.0 * k.0 + k.1 * k.1) as f64).sqrt();
            let (d1, d2) = (-k.1 as f64 / kn, k.0 as f64 / kn);
            for j1 in 0..m {
                for j2 in 0..m {
                    let phase = 2.0 * PI * ((k.0 * j1 as i64 + k.1 * j2 as i64) as f64) / m as f64;
                    let e = c * Complex64::from_polar(1.0, phase);
                    g1[j1 * m + j2] += d1 * e.re;
                    g2[j1 * m + j2] += d2 * e.re;
                }
            }
        }
        (g1, g2)
    }
}

/// Real multiplier per retained mode, stored in field order so repeated
/// diagonal operators avoid re-evaluating their symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTable {
    cutoff: usize,
    values: Vec<f64>,
}

impl ModeTable {
    pub fn from_symbol(cutoff: usize, symbol: impl Fn(Wavenumber) -> f64) -> Self {
        let probe = SpectralField::zeros(cutoff);
        let values = (0..probe.coeffs.len())
            .map(|i| {
                let k = probe.wavenumber_at(i);
                if k == (0, 0) {
                    0.0
                } else {
                    symbol(k)
                }
            })
            .collect();
        ModeTable { cutoff, values }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }
}

fn is_upper_half(k: Wavenumber) -> bool {
    k.0 > 0 || (k.0 == 0 && k.1 > 0)
}

impl Add<&SpectralField> for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub<&SpectralField> for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&SpectralField> for SpectralField {
    fn add_assign(&mut self, rhs: &SpectralField) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&SpectralField> for SpectralField {
    fn sub_assign(&mut self, rhs: &SpectralField) {
        self.axpy(-1.0, rhs);
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, rhs: f64) -> SpectralField {
        let mut out = self.clone();
        for c in &mut out.coeffs {
            *c *= rhs;
        }
        out
    }
}

impl Neg for &SpectralField {
    type Output = SpectralField;
    fn neg(self) -> SpectralField {
        self * -1.0
    }
}

/// Scalar spectral function, used for the 2D curl.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSpectral {
    cutoff: usize,
    coeffs: Vec<Complex64>,
}

impl ScalarSpectral {
    pub fn mode(&self, k: Wavenumber) -> Complex64 {
        let n = self.cutoff as i64;
        if k.0.abs() > n || k.1.abs() > n {
            return Complex64::new(0.0, 0.0);
        }
        let s = side_len(self.cutoff) as i64;
        self.coeffs[((k.0 + n) * s + (k.1 + n)) as usize]
    }

    pub fn norm_l2(&self, p: &FluidParams) -> f64 {
        (self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() * p.area()).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == 0.0)
    }
}

/// General (not necessarily solenoidal) vector field in spectral form.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSpectral {
    cutoff: usize,
    c1: Vec<Complex64>,
    c2: Vec<Complex64>,
}

impl VectorSpectral {
    pub fn zeros(cutoff: usize) -> Self {
        let s = side_len(cutoff);
        VectorSpectral {
            cutoff,
            c1: vec![Complex64::new(0.0, 0.0); s * s],
            c2: vec![Complex64::new(0.0, 0.0); s * s],
        }
    }

    pub fn set_mode(&mut self, k: Wavenumber, v: (Complex64, Complex64)) {
        let n = self.cutoff as i64;
        assert!(k.0.abs() <= n && k.1.abs() <= n, "wavenumber outside cutoff");
        let s = side_len(self.cutoff) as i64;
        let i = ((k.0 + n) * s + (k.1 + n)) as usize;
        self.c1[i] = v.0;
        self.c2[i] = v.1;
    }
}

/// Helmholtz-Leray projection: keeps the component of each mode along `k_perp`.
pub fn leray_project(v: &VectorSpectral) -> SpectralField {
    let mut out = SpectralField::zeros(v.cutoff);
    for i in 0..v.c1.len() {
        let k = out.wavenumber_at(i);
        if k == (0, 0) {
            continue;
        }
        let kn = ((k.0 * k.0 + k.1 * k.1) as f64).sqrt();
        out.coeffs[i] = (v.c1[i] * (-k.1 as f64) + v.c2[i] * (k.0 as f64)) / kn;
    }
    out
}

pub fn inner_l2(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    u.weighted_inner(v, p, |_| 1.0)
}

pub fn inner_grad(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    u.weighted_inner(v, p, |k| p.k_squared(k))
}

/// `(u, v)_V = (u, v) + alpha ((u, v))`.
pub fn inner_v(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    u.weighted_inner(v, p, |k| p.elastic_symbol(k))
}

/// `(u, v)_W = (curl(u - alpha Lap u), curl(v - alpha Lap v))`.
pub fn inner_w(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    u.weighted_inner(v, p, |k| {
        let s = p.elastic_symbol(k);
        s * s * p.k_squared(k)
    })
}

pub fn norm_l2(u: &SpectralField, p: &FluidParams) -> f64 {
    inner_l2(u, u, p).max(0.0).sqrt()
}

pub fn norm_grad(u: &SpectralField, p: &FluidParams) -> f64 {
    inner_grad(u, u, p).max(0.0).sqrt()
}

pub fn norm_v(u: &SpectralField, p: &FluidParams) -> f64 {
    inner_v(u, u, p).max(0.0).sqrt()
}

pub fn norm_w(u: &SpectralField, p: &FluidParams) -> f64 {
    inner_w(u, u, p).max(0.0).sqrt()
}

/// `||u - v||_V` without allocating the difference.
pub fn distance_v(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    weighted_distance(u, v, p, |k| p.elastic_symbol(k))
}

/// `||u - v||_{W*}` without allocating the difference.
pub fn distance_wstar(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> f64 {
    weighted_distance(u, v, p, |k| 1.0 / p.k_squared(k))
}

fn weighted_distance(u: &SpectralField, v: &SpectralField, p: &FluidParams, w: impl Fn(Wavenumber) -> f64) -> f64 {
    u.check_same(v);
    let mut acc = 0.0;
    for (i, (a, b)) in u.coeffs.iter().zip(&v.coeffs).enumerate() {
        let d = (a - b).norm_sqr();
        if d != 0.0 {
            acc += w(u.wavenumber_at(i)) * d;
        }
    }
    (acc * p.area()).sqrt()
}

/// Dual norm of `W*` with `V` as pivot space: `sup_w (f, w)_V / ||w||_W`.
pub fn norm_wstar(f: &SpectralField, p: &FluidParams) -> f64 {
    f.weighted_inner(f, p, |k| 1.0 / p.k_squared(k)).max(0.0).sqrt()
}

/// Duality pairing `<f, w>` between `W*` and `W`, identified with `(f, w)_V`.
pub fn pairing_wstar_w(f: &SpectralField, w: &SpectralField, p: &FluidParams) -> f64 {
    inner_v(f, w, p)
}

/// Scalar curl `d1 u2 - d2 u1`; mode `k` gets amplitude `i |k| u_k`.
pub fn curl_scalar(u: &SpectralField, p: &FluidParams) -> ScalarSpectral {
    let mut coeffs = u.coeffs.clone();
    for (i, c) in coeffs.iter_mut().enumerate() {
        let k = u.wavenumber_at(i);
        if k == (0, 0) {
            continue;
        }
        *c *= Complex64::new(0.0, p.k_squared(k).sqrt());
    }
    ScalarSpectral {
        cutoff: u.cutoff,
        coeffs,
    }
}

/// Solves `v - alpha Lap v = f`, `div v = 0`: `v_k = f_k / (1 + alpha |k|^2)`.
pub fn solve_generalized_stokes(f: &SpectralField, p: &FluidParams) -> SpectralField {
    f.map_symbol(|k| 1.0 / p.elastic_symbol(k))
}

/// Stokes operator `A = -P Lap`.
pub fn apply_stokes(u: &SpectralField, p: &FluidParams) -> SpectralField {
    u.map_symbol(|k| p.k_squared(k))
}

/// `A_hat = (I + alpha A)^{-1} A`, multiplier `|k|^2 / (1 + alpha |k|^2)`.
pub fn apply_a_hat(u: &SpectralField, p: &FluidParams) -> SpectralField {
    u.map_symbol(|k| p.a_hat_symbol(k))
}

/// Pseudo-spectral evaluator for
/// `B_hat(u, v) = (I + alpha A)^{-1} P (curl(u - alpha Lap u) x v)`.
///
/// The product is formed on an `m x m` grid with `m >= 3N + 1`, which makes
/// every retained output mode alias free. Truncation to `|k|_inf <= N`
/// happens after the `(I + alpha A)^{-1}` multiplication, so
/// `(B_hat(u, v), v)_V` and `(B_hat(u, u), u)_W` vanish to round-off.
#[derive(Clone)]
pub struct BilinearOperator {
    params: FluidParams,
    grid: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for BilinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilinearOperator")
            .field("cutoff", &self.params.mode_cutoff)
            .field("grid", &self.grid)
            .finish()
    }
}

impl BilinearOperator {
    /// Smallest alias-free grid for a quadratic product at cutoff `n`.
    pub fn min_grid(n: usize) -> usize {
        3 * n + 1
    }

    /// Smallest 5-smooth grid size at or above [`Self::min_grid`].
    pub fn default_grid(n: usize) -> usize {
        let mut m = Self::min_grid(n);
        loop {
            let mut r = m;
            for f in [2, 3, 5] {
                while r.is_multiple_of(f) {
                    r /= f;
                }
            }
            if r == 1 {
                return m;
            }
            m += 1;
        }
    }

    pub fn new(p: &FluidParams) -> Self {
        Self::with_grid(p, Self::default_grid(p.mode_cutoff)).expect("default grid is alias free")
    }

    pub fn with_grid(p: &FluidParams, grid: usize) -> Result<Self> {
        let required = Self::min_grid(p.mode_cutoff);
        if grid < required {
            return Err(Error::GridTooSmall {
                grid,
                required,
                cutoff: p.mode_cutoff,
            });
        }
        let mut planner = FftPlanner::new();
        Ok(BilinearOperator {
            params: *p,
            grid,
            forward: planner.plan_fft_forward(grid),
            inverse: planner.plan_fft_inverse(grid),
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn params(&self) -> &FluidParams {
        &self.params
    }

    fn grid_index(&self, k: Wavenumber) -> usize {
        let m = self.grid as i64;
        (k.0.rem_euclid(m) * m + k.1.rem_euclid(m)) as usize
    }

    fn transform(&self, fft: &dyn Fft<f64>, buf: &mut [Complex64], tmp: &mut [Complex64], scratch: &mut [Complex64]) {
        let m = self.grid;
        fft.process_with_scratch(buf, scratch);
        for i in 0..m {
            for j in 0..m {
                tmp[j * m + i] = buf[i * m + j];
            }
        }
        fft.process_with_scratch(tmp, scratch);
        buf.copy_from_slice(tmp);
    }

    pub fn apply(&self, u: &SpectralField, v: &SpectralField) -> SpectralField {
        let n = self.params.mode_cutoff;
        assert_eq!(u.cutoff, n, "field cutoff does not match operator");
        assert_eq!(v.cutoff, n, "field cutoff does not match operator");
        let p = &self.params;
        let m = self.grid;
        let zero = Complex64::new(0.0, 0.0);
        let mut q = vec![zero; m * m];
        let mut v1 = vec![zero; m * m];
        let mut v2 = vec![zero; m * m];
        for (i, (&uc, &vc)) in u.coeffs.iter().zip(&v.coeffs).enumerate() {
            let k = u.wavenumber_at(i);
            if k == (0, 0) {
                continue;
            }
            let g = self.grid_index(k);
            let k2 = p.k_squared(k);
            q[g] = uc * Complex64::new(0.0, k2.sqrt() * p.elastic_symbol(k));
            let kn = ((k.0 * k.0 + k.1 * k.1) as f64).sqrt();
            v1[g] = vc * (-k.1 as f64 / kn);
            v2[g] = vc * (k.0 as f64 / kn);
        }
        let mut tmp = vec![zero; m * m];
        let mut scratch = vec![zero; self.inverse.get_inplace_scratch_len().max(self.forward.get_inplace_scratch_len())];
        for buf in [&mut q, &mut v1, &mut v2] {
            self.transform(self.inverse.as_ref(), buf, &mut tmp, &mut scratch);
        }
        // (q e3) x v = q (-v2, v1); the grid layout is transposed, which is
        // undone by the forward pass.
        let mut r1 = vec![zero; m * m];
        let mut r2 = vec![zero; m * m];
        for i in 0..m * m {
            let qr = q[i].re;
            r1[i] = Complex64::new(-qr * v2[i].re, 0.0);
            r2[i] = Complex64::new(qr * v1[i].re, 0.0);
        }
        self.transform(self.forward.as_ref(), &mut r1, &mut tmp, &mut scratch);
        self.transform(self.forward.as_ref(), &mut r2, &mut tmp, &mut scratch);
        let norm = 1.0 / (m * m) as f64;
        let mut out = SpectralField::zeros(n);
        for i in 0..out.coeffs.len() {
            let k = out.wavenumber_at(i);
            if k == (0, 0) {
                continue;
            }
            let g = self.grid_index(k);
            let kn = ((k.0 * k.0 + k.1 * k.1) as f64).sqrt();
            let projected = (r1[g] * (-k.1 as f64) + r2[g] * (k.0 as f64)) / kn;
            out.coeffs[i] = projected * (norm / p.elastic_symbol(k));
        }
        out
    }
}

/// One-shot `B_hat(u, v)` on the default alias-free grid.
pub fn apply_b_hat(u: &SpectralField, v: &SpectralField, p: &FluidParams) -> SpectralField {
    BilinearOperator::new(p).apply(u, v)
}

/// `B_hat(u, v)` on a caller-chosen grid; rejects grids that alias.
pub fn apply_b_hat_on_grid(u: &SpectralField, v: &SpectralField, p: &FluidParams, grid: usize) -> Result<SpectralField> {
    Ok(BilinearOperator::with_grid(p, grid)?.apply(u, v))
}

/// C^1 cubic cutoff: 1 on `[0, n]`, 0 on `[n + 1, inf)`.
pub fn cutoff_bump(r: f64, n: f64) -> f64 {
    let s = r.abs() - n;
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - 3.0 * s * s + 2.0 * s * s * s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(alpha: f64, n: usize) -> FluidParams {
        FluidParams::new(alpha, 0.5, 2.0 * PI, n).unwrap()
    }

    fn one() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    #[test]
    fn norms_of_single_modes() {
        let p = params(1.0, 4);
        let e = SpectralField::single_mode(4, (1, 0), one());
        assert_relative_eq!(norm_l2(&e, &p), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(norm_grad(&e, &p), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(norm_v(&e, &p), 2.0 * PI * 2f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(norm_w(&e, &p), 4.0 * PI, max_relative = 1e-14);
        let e34 = SpectralField::single_mode(4, (3, 4), one());
        assert_relative_eq!(norm_grad(&e34, &p), 5.0 * 2.0 * PI, max_relative = 1e-14);
        let z = SpectralField::zeros(4);
        assert_eq!(norm_l2(&z, &p), 0.0);
        assert_eq!(norm_w(&z, &p), 0.0);
    }

    #[test]
    fn half_spectrum_symmetry() {
        let p = params(1.0, 4);
        let a = SpectralField::single_mode(4, (2, -1), Complex64::new(0.3, 0.7));
        let b = SpectralField::single_mode(4, (-2, 1), -Complex64::new(0.3, 0.7).conj());
        assert_relative_eq!(norm_l2(&a, &p), norm_l2(&b, &p), max_relative = 1e-15);
    }

    #[test]
    fn curl_of_single_mode() {
        let p = params(1.0, 4);
        let c = curl_scalar(&SpectralField::single_mode(4, (1, 0), one()), &p);
        assert_relative_eq!(c.mode((1, 0)).im, 1.0, max_relative = 1e-15);
        assert_eq!(c.mode((1, 0)).re, 0.0);
        assert!(curl_scalar(&SpectralField::zeros(4), &p).is_zero());
    }

    #[test]
    fn stokes_inverse_and_a_hat_multipliers() {
        let p = params(1.0, 4);
        let f = SpectralField::single_mode(4, (1, 0), one());
        assert_relative_eq!(solve_generalized_stokes(&f, &p).mode((1, 0)).re, 0.5);
        assert_relative_eq!(apply_a_hat(&f, &p).mode((1, 0)).re, 0.5);
        assert!(solve_generalized_stokes(&SpectralField::zeros(4), &p).is_zero());
    }

    #[test]
    fn leray_removes_gradients() {
        let mut g = VectorSpectral::zeros(3);
        // grad of exp(i k.x) is i k exp(i k.x)
        g.set_mode((2, 1), (Complex64::new(0.0, 2.0), Complex64::new(0.0, 1.0)));
        assert!(leray_project(&g).modes().all(|(_, c)| c.norm() < 1e-15));
        let mut s = VectorSpectral::zeros(3);
        s.set_mode((1, 0), (Complex64::new(0.0, 0.0), one()));
        assert_relative_eq!(leray_project(&s).mode((1, 0)).re, 1.0);
    }

    #[test]
    fn grid_below_dealiasing_rejected() {
        let p = params(1.0, 4);
        let u = SpectralField::zeros(4);
        assert!(matches!(
            apply_b_hat_on_grid(&u, &u, &p, 12),
            Err(Error::GridTooSmall { required: 13, .. })
        ));
        assert!(apply_b_hat_on_grid(&u, &u, &p, 13).is_ok());
    }

    #[test]
    fn b_hat_is_bilinear_and_real() {
        let p = params(0.7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = SpectralField::random(4, &mut rng, 1.0);
        let v = SpectralField::random(4, &mut rng, 1.0);
        let op = BilinearOperator::new(&p);
        assert!(op.apply(&SpectralField::zeros(4), &v).is_zero());
        assert!(op.apply(&u, &SpectralField::zeros(4)).is_zero());
        let b = op.apply(&u, &v);
        assert!(b.reality_defect() < 1e-12 * norm_v(&b, &p).max(1.0));
        let b2 = op.apply(&(&u * 2.0), &v);
        assert!(norm_v(&(&b2 - &(&b * 2.0)), &p) < 1e-12 * norm_v(&b, &p));
    }

    #[test]
    fn b_hat_matches_between_grids() {
        let p = params(1.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = SpectralField::random(4, &mut rng, 1.0);
        let v = SpectralField::random(4, &mut rng, 1.0);
        let a = apply_b_hat_on_grid(&u, &v, &p, 13).unwrap();
        let b = apply_b_hat_on_grid(&u, &v, &p, 32).unwrap();
        assert!(norm_v(&(&a - &b), &p) < 1e-12 * norm_v(&a, &p));
    }

    #[test]
    fn b_hat_single_mode_product() {
        // u = v = real mode along k=(1,0): q is parallel to curl and
        // q x v = (1+alpha)|k|^2 * grad(psi^2 / 2) is a gradient, so B_hat = 0.
        let p = params(1.0, 4);
        let u = SpectralField::real_mode(4, (1, 0), Complex64::new(0.2, 0.1));
        let b = apply_b_hat(&u, &u, &p);
        assert!(norm_v(&b, &p) < 1e-14);
    }

    #[test]
    fn cutoff_bump_shape() {
        assert_eq!(cutoff_bump(0.5, 2.0), 1.0);
        assert_eq!(cutoff_bump(2.0, 2.0), 1.0);
        assert_eq!(cutoff_bump(3.0, 2.0), 0.0);
        assert_relative_eq!(cutoff_bump(2.5, 2.0), 0.5);
        // C^1 at both joins
        let h = 1e-7;
        assert!((cutoff_bump(2.0 + h, 2.0) - 1.0).abs() < 1e-12);
        assert!(cutoff_bump(3.0 - h, 2.0) < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(FluidParams::new(0.0, 1.0, 1.0, 4).is_err());
        assert!(FluidParams::new(1.0, -1.0, 1.0, 4).is_err());
        assert!(FluidParams::new(1.0, 1.0, 1.0, 0).is_err());
    }
}
