//! Coefficient maps `F`, `G`, `sigma`, their smoothed versions and
//! sampling-based checks of the Lipschitz, growth and integrability
//! conditions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controls::{cost_q2, IntensityControl, MarkSpace};
use crate::error::{Error, Result};
use crate::spectral::{norm_v, solve_generalized_stokes, FluidParams, SpectralField, Wavenumber};

/// `(I + alpha A)^{-1}` applied to a coefficient output.
pub fn hat(f: &SpectralField, p: &FluidParams) -> SpectralField {
    solve_generalized_stokes(f, p)
}

/// Constants declared by a coefficient set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DeclaredConstants {
    /// Lipschitz constant of `F` (squared, in `V`).
    pub c_f: f64,
    /// Lipschitz constant of `G` (squared, in `V`).
    pub c_g: f64,
    /// Mark-integrated Lipschitz constant of `sigma` (squared).
    pub c_l: f64,
    /// Bound on `int ||sigma(u, z)||_V^2 nu(dz) / (1 + ||u||_V^2)`.
    pub growth_q1: f64,
    /// Bound on `int ||sigma(u, z)||_V^4 nu(dz) / (1 + ||u||_V^4)`.
    pub growth_q2: f64,
}

/// Envelope pair `(s0, s1)` dominating the two sigma norms at one mark.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Envelope {
    pub s0: f64,
    pub s1: f64,
}

/// User-implementable coefficient maps. All outputs are un-smoothed; the
/// solvers apply [`hat`] themselves.
pub trait Coefficients: Send + Sync {
    fn marks(&self) -> &MarkSpace;

    /// `F(u, t)`.
    fn drift(&self, u: &SpectralField, t: f64, p: &FluidParams) -> SpectralField;

    /// `G(u, t)`.
    fn diffusion(&self, u: &SpectralField, t: f64, p: &FluidParams) -> SpectralField;

    /// `sigma(t, u, z_mark)`.
    fn jump(&self, t: f64, u: &SpectralField, mark: usize, p: &FluidParams) -> SpectralField;

    fn constants(&self) -> DeclaredConstants;

    fn envelope(&self, t: f64, mark: usize) -> Envelope;

    /// Hints that let solvers skip identically-zero terms.
    fn has_drift(&self) -> bool {
        true
    }

    fn has_diffusion(&self) -> bool {
        true
    }

    fn has_jumps(&self) -> bool {
        true
    }

    fn drift_hat(&self, u: &SpectralField, t: f64, p: &FluidParams) -> SpectralField {
        hat(&self.drift(u, t, p), p)
    }

    fn diffusion_hat(&self, u: &SpectralField, t: f64, p: &FluidParams) -> SpectralField {
        hat(&self.diffusion(u, t, p), p)
    }

    fn jump_hat(&self, t: f64, u: &SpectralField, mark: usize, p: &FluidParams) -> SpectralField {
        hat(&self.jump(t, u, mark, p), p)
    }
}

/// Drift part of a built-in set.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftPart {
    Zero,
    /// `F(u) = c u`.
    Linear { c: f64 },
    /// `F(u) = a tanh(||u||_V / s) d`.
    Saturating { amplitude: f64, scale: f64, field: SpectralField },
}

/// Diffusion part of a built-in set.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionPart {
    Zero,
    /// `G(u) = c u`.
    Linear { c: f64 },
    /// `G(u) = w`. Violates `G(0) = 0`; used for Gaussian diagnostics only.
    Constant { field: SpectralField },
    /// `G(u) = b (c u + tanh(||u||_V / s) w)`.
    Affine {
        amplitude: f64,
        linear: f64,
        scale: f64,
        field: SpectralField,
    },
}

/// Jump part of a built-in set: `sigma(u, z_j) = beta_j (v_j + gamma_j u)`.
/// `Constant` drops the `u` dependence.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpPart {
    Zero,
    Constant { amplitudes: Vec<f64>, fields: Vec<SpectralField> },
    Affine {
        amplitudes: Vec<f64>,
        linear: Vec<f64>,
        fields: Vec<SpectralField>,
    },
}

/// Built-in coefficient family.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    marks: MarkSpace,
    drift: DriftPart,
    diffusion: DiffusionPart,
    jumps: JumpPart,
    // ||field||_V cached per part; depends on the params the set was built for
    field_norms: FieldNorms,
}

#[derive(Debug, Clone, Default)]
struct FieldNorms {
    drift: f64,
    diffusion: f64,
    jumps: Vec<f64>,
}

/// Low modes used by the built-in fields.
const JUMP_MODES: [Wavenumber; 6] = [(2, 1), (1, 2), (2, -1), (1, -2), (1, 1), (1, -1)];

/// Real field on mode `k`, scaled to unit `V` norm.
pub fn unit_mode(p: &FluidParams, k: Wavenumber) -> Result<SpectralField> {
    let n = p.mode_cutoff as i64;
    if k.0.abs() > n || k.1.abs() > n || k == (0, 0) {
        return Err(Error::InvalidParameter(format!(
            "mode {k:?} is not retained at cutoff {}",
            p.mode_cutoff
        )));
    }
    let u = SpectralField::real_mode(p.mode_cutoff, k, Complex64::new(1.0, 0.0));
    let nv = norm_v(&u, p);
    Ok(&u * (1.0 / nv))
}

/// Unit-`V`-norm real field over several modes with fixed phases.
fn unit_combination(p: &FluidParams, modes: &[(Wavenumber, Complex64)]) -> Result<SpectralField> {
    let mut u = SpectralField::zeros(p.mode_cutoff);
    for &(k, a) in modes {
        unit_mode(p, k)?;
        u += &SpectralField::real_mode(p.mode_cutoff, k, a);
    }
    let nv = norm_v(&u, p);
    Ok(&u * (1.0 / nv))
}

/// Default drift direction `d`.
pub fn default_drift_field(p: &FluidParams) -> Result<SpectralField> {
    unit_combination(p, &[((1, 1), Complex64::new(1.0, 0.0)), ((1, 0), Complex64::new(0.0, 1.0))])
}

/// Default diffusion direction `w`.
pub fn default_diffusion_field(p: &FluidParams) -> Result<SpectralField> {
    unit_combination(p, &[((1, 0), Complex64::new(1.0, 0.0)), ((0, 1), Complex64::new(0.5, 0.5))])
}

/// Default jump direction for mark `j`.
pub fn default_jump_field(p: &FluidParams, j: usize) -> Result<SpectralField> {
    unit_mode(p, JUMP_MODES[j % JUMP_MODES.len()])
}

impl CoefficientSet {
    pub fn new(p: &FluidParams, marks: MarkSpace, drift: DriftPart, diffusion: DiffusionPart, jumps: JumpPart) -> Result<Self> {
        let n = p.mode_cutoff;
        let check = |f: &SpectralField, what: &str| -> Result<f64> {
            if f.cutoff() != n {
                return Err(Error::InvalidParameter(format!(
                    "{what} field has cutoff {} but the model uses {n}",
                    f.cutoff()
                )));
            }
            if !f.is_finite() {
                return Err(Error::InvalidParameter(format!("{what} field is not finite")));
            }
            Ok(norm_v(f, p))
        };
        let finite_nonneg = |x: f64, what: &str| -> Result<()> {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} must be finite and >= 0")))
            }
        };
        let mut norms = FieldNorms::default();
        match &drift {
            DriftPart::Zero => {}
            DriftPart::Linear { c } => finite_nonneg(c.abs(), "drift coefficient")?,
            DriftPart::Saturating { amplitude, scale, field } => {
                finite_nonneg(*amplitude, "drift amplitude")?;
                if !(*scale > 0.0) {
                    return Err(Error::InvalidParameter("drift scale must be positive".into()));
                }
                norms.drift = check(field, "drift")?;
            }
        }
        match &diffusion {
            DiffusionPart::Zero => {}
            DiffusionPart::Linear { c } => finite_nonneg(c.abs(), "diffusion coefficient")?,
            DiffusionPart::Constant { field } => norms.diffusion = check(field, "diffusion")?,
            DiffusionPart::Affine {
                amplitude,
                linear,
                scale,
                field,
            } => {
                finite_nonneg(*amplitude, "diffusion amplitude")?;
                finite_nonneg(*linear, "diffusion linear coefficient")?;
                if !(*scale > 0.0) {
                    return Err(Error::InvalidParameter("diffusion scale must be positive".into()));
                }
                norms.diffusion = check(field, "diffusion")?;
            }
        }
        match &jumps {
            JumpPart::Zero => {}
            JumpPart::Constant { amplitudes, fields } | JumpPart::Affine { amplitudes, fields, .. } => {
                if amplitudes.len() != marks.len() || fields.len() != marks.len() {
                    return Err(Error::InvalidParameter("jump part needs one amplitude and field per mark".into()));
                }
                for (j, (b, f)) in amplitudes.iter().zip(fields).enumerate() {
                    finite_nonneg(*b, "jump amplitude")?;
                    norms.jumps.push(check(f, &format!("jump mark {j}"))?);
                }
                if let JumpPart::Affine { linear, .. } = &jumps {
                    if linear.len() != marks.len() {
                        return Err(Error::InvalidParameter("jump part needs one linear coefficient per mark".into()));
                    }
                    for g in linear {
                        finite_nonneg(*g, "jump linear coefficient")?;
                    }
                }
            }
        }
        Ok(CoefficientSet {
            marks,
            drift,
            diffusion,
            jumps,
            field_norms: norms,
        })
    }

    /// The default family: saturating drift, affine diffusion with `G(0) = 0`,
    /// affine jumps on two marks with `nu(Z) = 1`.
    pub fn default_family(p: &FluidParams) -> Result<Self> {
        CoefficientSpec::default().build(p)
    }

    /// All maps identically zero.
    pub fn zero(p: &FluidParams, marks: MarkSpace) -> Self {
        Self::new(p, marks, DriftPart::Zero, DiffusionPart::Zero, JumpPart::Zero).expect("zero set is valid")
    }

    pub fn drift_part(&self) -> &DriftPart {
        &self.drift
    }

    pub fn diffusion_part(&self) -> &DiffusionPart {
        &self.diffusion
    }

    pub fn jump_part(&self) -> &JumpPart {
        &self.jumps
    }

    /// Whether `F(0) = 0` and `G(0) = 0` hold by construction.
    pub fn vanishes_at_zero(&self) -> bool {
        !matches!(self.diffusion, DiffusionPart::Constant { .. })
    }
}

impl Coefficients for CoefficientSet {
    fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    fn drift(&self, u: &SpectralField, _t: f64, p: &FluidParams) -> SpectralField {
        match &self.drift {
            DriftPart::Zero => SpectralField::zeros(u.cutoff()),
            DriftPart::Linear { c } => u * *c,
            DriftPart::Saturating { amplitude, scale, field } => field * (amplitude * (norm_v(u, p) / scale).tanh()),
        }
    }

    fn diffusion(&self, u: &SpectralField, _t: f64, p: &FluidParams) -> SpectralField {
        match &self.diffusion {
            DiffusionPart::Zero => SpectralField::zeros(u.cutoff()),
            DiffusionPart::Linear { c } => u * *c,
            DiffusionPart::Constant { field } => field.clone(),
            DiffusionPart::Affine {
                amplitude,
                linear,
                scale,
                field,
            } => {
                let mut out = u * (amplitude * linear);
                out.axpy(amplitude * (norm_v(u, p) / scale).tanh(), field);
                out
            }
        }
    }

    fn jump(&self, _t: f64, u: &SpectralField, mark: usize, _p: &FluidParams) -> SpectralField {
        match &self.jumps {
            JumpPart::Zero => SpectralField::zeros(u.cutoff()),
            JumpPart::Constant { amplitudes, fields } => &fields[mark] * amplitudes[mark],
            JumpPart::Affine {
                amplitudes,
                linear,
                fields,
            } => {
                let mut out = u * (amplitudes[mark] * linear[mark]);
                out.axpy(amplitudes[mark], &fields[mark]);
                out
            }
        }
    }

    fn constants(&self) -> DeclaredConstants {
        let c_f = match &self.drift {
            DriftPart::Zero => 0.0,
            DriftPart::Linear { c } => c * c,
            // |tanh(x/s) - tanh(y/s)| <= |x - y| / s and | ||u1|| - ||u2|| | <= ||u1 - u2||
            DriftPart::Saturating { amplitude, scale, .. } => (amplitude * self.field_norms.drift / scale).powi(2),
        };
        let c_g = match &self.diffusion {
            DiffusionPart::Zero | DiffusionPart::Constant { .. } => 0.0,
            DiffusionPart::Linear { c } => c * c,
            DiffusionPart::Affine {
                amplitude,
                linear,
                scale,
                ..
            } => (amplitude * (linear + self.field_norms.diffusion / scale)).powi(2),
        };
        let nu = self.marks.weights();
        let (mut c_l, mut q1, mut q2) = (0.0, 0.0, 0.0);
        match &self.jumps {
            JumpPart::Zero => {}
            JumpPart::Constant { amplitudes, .. } => {
                for j in 0..nu.len() {
                    let s = amplitudes[j] * self.field_norms.jumps[j];
                    q1 += nu[j] * s * s;
                    q2 += nu[j] * s.powi(4);
                }
            }
            JumpPart::Affine { amplitudes, linear, .. } => {
                for j in 0..nu.len() {
                    c_l += nu[j] * (amplitudes[j] * linear[j]).powi(2);
                    // ||sigma|| <= m (1 + ||u||) with m = beta max(||v||, gamma);
                    // (1 + r)^2 <= 2 (1 + r^2), (1 + r)^4 <= 8 (1 + r^4)
                    let m = amplitudes[j] * self.field_norms.jumps[j].max(linear[j]);
                    q1 += 2.0 * nu[j] * m * m;
                    q2 += 8.0 * nu[j] * m.powi(4);
                }
            }
        }
        DeclaredConstants {
            c_f,
            c_g,
            c_l,
            growth_q1: q1,
            growth_q2: q2,
        }
    }

    fn envelope(&self, _t: f64, mark: usize) -> Envelope {
        match &self.jumps {
            JumpPart::Zero => Envelope::default(),
            JumpPart::Constant { amplitudes, .. } => Envelope {
                s0: amplitudes[mark] * self.field_norms.jumps[mark],
                s1: 0.0,
            },
            // sup_r (||v|| + gamma r) / (1 + r) = max(||v||, gamma)
            JumpPart::Affine { amplitudes, linear, .. } => Envelope {
                s0: amplitudes[mark] * self.field_norms.jumps[mark].max(linear[mark]),
                s1: amplitudes[mark] * linear[mark],
            },
        }
    }

    fn has_drift(&self) -> bool {
        !matches!(self.drift, DriftPart::Zero)
    }

    fn has_diffusion(&self) -> bool {
        !matches!(self.diffusion, DiffusionPart::Zero)
    }

    fn has_jumps(&self) -> bool {
        !matches!(self.jumps, JumpPart::Zero)
    }
}

/// Drift family selector used in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Zero,
    Linear,
    Saturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    Zero,
    Linear,
    Constant,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpKind {
    Zero,
    Constant,
    Affine,
}

/// Named built-in family plus its parameters, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientSpec {
    pub drift: DriftKind,
    /// `a` for the saturating drift, `c` for the linear one.
    pub drift_amplitude: f64,
    pub drift_scale: f64,
    pub diffusion: DiffusionKind,
    /// `b` for affine and constant diffusion, `c` for the linear one.
    pub diffusion_amplitude: f64,
    pub diffusion_linear: f64,
    pub diffusion_scale: f64,
    pub jumps: JumpKind,
    pub jump_amplitudes: Vec<f64>,
    pub jump_linear: Vec<f64>,
    pub mark_weights: Vec<f64>,
    /// Use the same direction for every mark instead of distinct modes.
    pub shared_jump_field: bool,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec {
            drift: DriftKind::Saturating,
            drift_amplitude: 0.5,
            drift_scale: 1.0,
            diffusion: DiffusionKind::Affine,
            diffusion_amplitude: 0.5,
            diffusion_linear: 0.5,
            diffusion_scale: 1.0,
            jumps: JumpKind::Affine,
            jump_amplitudes: vec![0.5, 0.5],
            jump_linear: vec![0.2, 0.2],
            mark_weights: vec![0.5, 0.5],
            shared_jump_field: false,
        }
    }
}

impl CoefficientSpec {
    pub fn build(&self, p: &FluidParams) -> Result<CoefficientSet> {
        let marks = MarkSpace::from_weights(self.mark_weights.clone())?;
        let drift = match self.drift {
            DriftKind::Zero => DriftPart::Zero,
            DriftKind::Linear => DriftPart::Linear { c: self.drift_amplitude },
            DriftKind::Saturating => DriftPart::Saturating {
                amplitude: self.drift_amplitude,
                scale: self.drift_scale,
                field: default_drift_field(p)?,
            },
        };
        let diffusion = match self.diffusion {
            DiffusionKind::Zero => DiffusionPart::Zero,
            DiffusionKind::Linear => DiffusionPart::Linear {
                c: self.diffusion_amplitude,
            },
            DiffusionKind::Constant => DiffusionPart::Constant {
                field: &default_diffusion_field(p)? * self.diffusion_amplitude,
            },
            DiffusionKind::Affine => DiffusionPart::Affine {
                amplitude: self.diffusion_amplitude,
                linear: self.diffusion_linear,
                scale: self.diffusion_scale,
                field: default_diffusion_field(p)?,
            },
        };
        let fields = || -> Result<Vec<SpectralField>> {
            (0..marks.len())
                .map(|j| default_jump_field(p, if self.shared_jump_field { 0 } else { j }))
                .collect()
        };
        let jumps = match self.jumps {
            JumpKind::Zero => JumpPart::Zero,
            JumpKind::Constant => JumpPart::Constant {
                amplitudes: self.jump_amplitudes.clone(),
                fields: fields()?,
            },
            JumpKind::Affine => JumpPart::Affine {
                amplitudes: self.jump_amplitudes.clone(),
                linear: self.jump_linear.clone(),
                fields: fields()?,
            },
        };
        CoefficientSet::new(p, marks, drift, diffusion, jumps)
    }
}

/// Random sample field with a log-uniform `V` norm in `[1e-2, 1e2]`.
pub(crate) fn sample_field<R: Rng>(p: &FluidParams, rng: &mut R) -> SpectralField {
    let u = SpectralField::random(p.mode_cutoff, rng, 2.0);
    let target = 10f64.powf(rng.gen_range(-2.0..2.0));
    let nv = norm_v(&u, p);
    &u * (target / nv)
}

/// Largest ratio observed against one declared constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioCheck {
    pub max_ratio: f64,
    pub declared: f64,
}

impl RatioCheck {
    fn new(declared: f64) -> Self {
        RatioCheck { max_ratio: 0.0, declared }
    }

    fn observe(&mut self, r: f64) {
        if r > self.max_ratio || r.is_nan() {
            self.max_ratio = r;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_ratio <= self.declared * (1.0 + 1e-9) + 1e-15
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub drift: RatioCheck,
    pub diffusion: RatioCheck,
    pub jumps: RatioCheck,
    pub samples: usize,
}

impl LipschitzReport {
    pub fn passed(&self) -> bool {
        self.drift.passed() && self.diffusion.passed() && self.jumps.passed()
    }
}

/// Samples pairs `(u1, u2)` and times, recording the squared Lipschitz ratios
/// of `F`, `G` and the `nu`-integrated `sigma` against the declared constants.
pub fn check_lipschitz(c: &dyn Coefficients, p: &FluidParams, horizon: f64, samples: usize, seed: u64) -> LipschitzReport {
    let k = c.constants();
    let mut rep = LipschitzReport {
        drift: RatioCheck::new(k.c_f),
        diffusion: RatioCheck::new(k.c_g),
        jumps: RatioCheck::new(k.c_l),
        samples,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..samples {
        let u1 = sample_field(p, &mut rng);
        // alternate far pairs with nearby ones that probe the local slope
        let u2 = if i % 2 == 0 {
            sample_field(p, &mut rng)
        } else {
            let d = sample_field(p, &mut rng);
            &u1 + &(&d * (1e-3 * norm_v(&u1, p) / norm_v(&d, p)))
        };
        let t = rng.gen_range(0.0..horizon);
        let du2 = norm_v(&(&u1 - &u2), p).powi(2);
        if du2 == 0.0 {
            continue;
        }
        let ratio = |a: SpectralField, b: SpectralField| norm_v(&(&a - &b), p).powi(2) / du2;
        rep.drift.observe(ratio(c.drift(&u1, t, p), c.drift(&u2, t, p)));
        rep.diffusion.observe(ratio(c.diffusion(&u1, t, p), c.diffusion(&u2, t, p)));
        let nu = c.marks().weights();
        let s: f64 = (0..nu.len())
            .map(|j| nu[j] * ratio(c.jump(t, &u1, j, p), c.jump(t, &u2, j, p)))
            .sum();
        rep.jumps.observe(s);
    }
    rep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthReport {
    pub q1: RatioCheck,
    pub q2: RatioCheck,
    pub samples: usize,
}

impl GrowthReport {
    pub fn passed(&self) -> bool {
        self.q1.passed() && self.q2.passed()
    }
}

/// Empirical `int ||sigma(t, u, z)||_V^{2q} nu(dz) / (1 + ||u||_V^{2q})` for `q = 1, 2`.
pub fn check_growth(c: &dyn Coefficients, p: &FluidParams, horizon: f64, samples: usize, seed: u64) -> GrowthReport {
    let k = c.constants();
    let mut rep = GrowthReport {
        q1: RatioCheck::new(k.growth_q1),
        q2: RatioCheck::new(k.growth_q2),
        samples,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = c.marks().weights();
    for _ in 0..samples {
        let u = sample_field(p, &mut rng);
        let t = rng.gen_range(0.0..horizon);
        let r = norm_v(&u, p);
        let norms: Vec<f64> = (0..nu.len()).map(|j| norm_v(&c.jump(t, &u, j, p), p)).collect();
        let s1: f64 = norms.iter().zip(nu).map(|(s, w)| w * s * s).sum();
        let s2: f64 = norms.iter().zip(nu).map(|(s, w)| w * s.powi(4)).sum();
        rep.q1.observe(s1 / (1.0 + r * r));
        rep.q2.observe(s2 / (1.0 + r.powi(4)));
    }
    rep
}

/// `int_0^T int_Z exp(delta s_i(t, z)^2) nu(dz) dt` for both envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    pub delta: f64,
    pub s0_integral: f64,
    pub s1_integral: f64,
}

/// Integrates the envelopes with the midpoint rule on `cells` time cells
/// (exact for time-independent envelopes).
pub fn check_exponential_integrability(c: &dyn Coefficients, delta: f64, horizon: f64, cells: usize) -> Result<IntegrabilityReport> {
    if !(delta > 0.0) || cells == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("integrability check needs delta > 0, T > 0, cells >= 1".into()));
    }
    let h = horizon / cells as f64;
    let nu = c.marks().weights();
    let (mut i0, mut i1) = (0.0, 0.0);
    for i in 0..cells {
        let t = (i as f64 + 0.5) * h;
        for (j, w) in nu.iter().enumerate() {
            let e = c.envelope(t, j);
            i0 += (delta * e.s0 * e.s0).exp() * w * h;
            i1 += (delta * e.s1 * e.s1).exp() * w * h;
        }
    }
    Ok(IntegrabilityReport {
        delta,
        s0_integral: i0,
        s1_integral: i1,
    })
}

/// Lower estimates of the suprema over `S_2^m` of
/// `int s_i^2 (g + 1) nu dt` (`c*2`) and `int s_i |g - 1| nu dt` (`c*1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeConstants {
    pub c02: f64,
    pub c01: f64,
    pub c12: f64,
    pub c11: f64,
}

pub fn envelope_constants(c: &dyn Coefficients, m: f64, trials: &[IntensityControl]) -> Result<EnvelopeConstants> {
    if trials.is_empty() {
        return Err(Error::InvalidParameter("at least one trial control is required".into()));
    }
    let marks = c.marks();
    let mut out = EnvelopeConstants {
        c02: 0.0,
        c01: 0.0,
        c12: 0.0,
        c11: 0.0,
    };
    for g in trials {
        if g.marks() != marks.len() {
            return Err(Error::InvalidParameter("trial control has the wrong number of marks".into()));
        }
        let q2 = cost_q2(g, marks);
        if q2 > m {
            return Err(Error::InadmissibleControl(format!("Q2 = {q2} exceeds m = {m}")));
        }
        let mut acc = [0.0; 4];
        for (i, w) in g.grid().windows(2).enumerate() {
            let (dt, t) = (w[1] - w[0], 0.5 * (w[0] + w[1]));
            for j in 0..marks.len() {
                let e = c.envelope(t, j);
                let v = g.cell_value(i, j);
                let wdt = marks.weight(j) * dt;
                acc[0] += e.s0 * e.s0 * (v + 1.0) * wdt;
                acc[1] += e.s0 * (v - 1.0).abs() * wdt;
                acc[2] += e.s1 * e.s1 * (v + 1.0) * wdt;
                acc[3] += e.s1 * (v - 1.0).abs() * wdt;
            }
        }
        out.c02 = out.c02.max(acc[0]);
        out.c01 = out.c01.max(acc[1]);
        out.c12 = out.c12.max(acc[2]);
        out.c11 = out.c11.max(acc[3]);
    }
    Ok(out)
}

/// Largest observed `||sigma(t,u,z)||_V / ((1 + ||u||_V) s0)` and
/// `||sigma(u1) - sigma(u2)||_V / (||u1 - u2||_V s1)`; both must stay <= 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub s0_ratio: f64,
    pub s1_ratio: f64,
    pub samples: usize,
}

impl EnvelopeReport {
    pub fn passed(&self) -> bool {
        self.s0_ratio <= 1.0 + 1e-9 && self.s1_ratio <= 1.0 + 1e-9
    }
}

pub fn check_envelopes(c: &dyn Coefficients, p: &FluidParams, horizon: f64, samples: usize, seed: u64) -> EnvelopeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r0, mut r1) = (0.0f64, 0.0f64);
    let marks = c.marks().len();
    let ratio = |num: f64, den: f64| {
        if num == 0.0 {
            0.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    };
    for _ in 0..samples {
        let u1 = sample_field(p, &mut rng);
        let u2 = sample_field(p, &mut rng);
        let t = rng.gen_range(0.0..horizon);
        let j = rng.gen_range(0..marks);
        let e = c.envelope(t, j);
        let s = c.jump(t, &u1, j, p);
        r0 = r0.max(ratio(norm_v(&s, p), (1.0 + norm_v(&u1, p)) * e.s0));
        let ds = &s - &c.jump(t, &u2, j, p);
        r1 = r1.max(ratio(norm_v(&ds, p), norm_v(&(&u1 - &u2), p) * e.s1));
    }
    EnvelopeReport {
        s0_ratio: r0,
        s1_ratio: r1,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::inner_l2;
    use crate::spectral::inner_v;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn params(n: usize) -> FluidParams {
        FluidParams::new(1.0, 0.5, 2.0 * PI, n).unwrap()
    }

    #[test]
    fn hat_examples() {
        let p = params(4);
        assert!(hat(&SpectralField::zeros(4), &p).is_zero());
        let e = SpectralField::single_mode(4, (1, 0), Complex64::new(1.0, 0.0));
        assert_relative_eq!(hat(&e, &p).mode((1, 0)).re, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = SpectralField::random(4, &mut rng, 1.0);
            let g = SpectralField::random(4, &mut rng, 1.0);
            let lhs = inner_v(&hat(&f, &p), &g, &p);
            let rhs = inner_l2(&f, &g, &p);
            assert!((lhs - rhs).abs() <= 1e-12 * crate::spectral::norm_l2(&f, &p) * crate::spectral::norm_l2(&g, &p));
        }
    }

    #[test]
    fn default_family_vanishes_at_zero() {
        let p = params(4);
        let c = CoefficientSet::default_family(&p).unwrap();
        let z = SpectralField::zeros(4);
        assert!(c.drift(&z, 0.3, &p).is_zero());
        assert!(c.diffusion(&z, 0.3, &p).is_zero());
        assert!(c.vanishes_at_zero());
        assert_eq!(c.marks().total_mass(), 1.0);
    }

    #[test]
    fn default_constants_match_closed_form() {
        let p = params(4);
        let k = CoefficientSet::default_family(&p).unwrap().constants();
        assert_relative_eq!(k.c_f, 0.25, max_relative = 1e-12);
        assert_relative_eq!(k.c_g, 0.25 * 1.5f64.powi(2), max_relative = 1e-12);
        assert_relative_eq!(k.c_l, 0.25 * 0.04, max_relative = 1e-12);
        assert_relative_eq!(k.growth_q1, 2.0 * 0.25, max_relative = 1e-12);
        assert_relative_eq!(k.growth_q2, 8.0 * 0.0625, max_relative = 1e-12);
    }

    #[test]
    fn lipschitz_zero_and_linear() {
        let p = params(4);
        let z = CoefficientSet::zero(&p, MarkSpace::single(1.0));
        let rep = check_lipschitz(&z, &p, 1.0, 50, 1);
        assert_eq!(rep.drift.max_ratio, 0.0);
        assert!(rep.passed());
        let c = 0.7;
        let lin = CoefficientSet::new(
            &p,
            MarkSpace::single(1.0),
            DriftPart::Linear { c },
            DiffusionPart::Zero,
            JumpPart::Zero,
        )
        .unwrap();
        let rep = check_lipschitz(&lin, &p, 1.0, 50, 2);
        assert_relative_eq!(rep.drift.max_ratio, c * c, max_relative = 1e-12);
        assert!(rep.passed());
    }

    #[test]
    fn default_family_passes_all_checks() {
        let p = params(4);
        let c = CoefficientSet::default_family(&p).unwrap();
        assert!(check_lipschitz(&c, &p, 1.0, 500, 7).passed());
        let g = check_growth(&c, &p, 1.0, 500, 8);
        assert!(g.passed() && g.q1.max_ratio.is_finite() && g.q2.max_ratio.is_finite());
        assert!(check_envelopes(&c, &p, 1.0, 1000, 9).passed());
        let r = check_exponential_integrability(&c, 1.0, 1.0, 10).unwrap();
        assert!(r.s0_integral.is_finite() && r.s1_integral.is_finite());
    }

    #[test]
    fn growth_of_homogeneous_jumps() {
        // sigma(u, z_j) = beta_j u with sum nu beta^2 = c
        let p = params(4);
        let marks = MarkSpace::from_weights(vec![0.3, 0.7]).unwrap();
        let betas = vec![0.5, 1.5];
        let expected: f64 = 0.3 * 0.25 + 0.7 * 2.25;
        let c = CoefficientSet::new(
            &p,
            marks,
            DriftPart::Zero,
            DiffusionPart::Zero,
            JumpPart::Affine {
                amplitudes: betas,
                linear: vec![1.0, 1.0],
                fields: vec![SpectralField::zeros(4), SpectralField::zeros(4)],
            },
        )
        .unwrap();
        let rep = check_growth(&c, &p, 1.0, 300, 4);
        assert!(rep.q1.max_ratio <= expected * (1.0 + 1e-12));
        assert!(rep.passed());
        let z = CoefficientSet::zero(&p, MarkSpace::single(1.0));
        assert_eq!(check_growth(&z, &p, 1.0, 10, 1).q1.max_ratio, 0.0);
    }

    #[test]
    fn exponential_integrability_examples() {
        let p = params(4);
        let z = CoefficientSet::zero(&p, MarkSpace::from_weights(vec![0.25, 0.5]).unwrap());
        let r = check_exponential_integrability(&z, 1.0, 2.0, 4).unwrap();
        assert_relative_eq!(r.s0_integral, 2.0 * 0.75, max_relative = 1e-14);
        let unit = CoefficientSet::new(
            &p,
            MarkSpace::single(1.0),
            DriftPart::Zero,
            DiffusionPart::Zero,
            JumpPart::Constant {
                amplitudes: vec![1.0],
                fields: vec![unit_mode(&p, (1, 1)).unwrap()],
            },
        )
        .unwrap();
        let r = check_exponential_integrability(&unit, 1.0, 1.0, 3).unwrap();
        assert_relative_eq!(r.s0_integral, std::f64::consts::E, max_relative = 1e-12);
    }

    #[test]
    fn envelope_constant_examples() {
        let p = params(4);
        let c = CoefficientSet::default_family(&p).unwrap();
        let marks = c.marks().clone();
        let s0: Vec<f64> = (0..2).map(|j| c.envelope(0.0, j).s0).collect();
        let int_s0: f64 = (0..2).map(|j| s0[j] * marks.weight(j)).sum();
        let int_s0_sq: f64 = (0..2).map(|j| s0[j] * s0[j] * marks.weight(j)).sum();

        let one = IntensityControl::identity(1.0, 2);
        let k = envelope_constants(&c, 1.0, &[one]).unwrap();
        assert_eq!(k.c01, 0.0);
        assert_relative_eq!(k.c02, 2.0 * int_s0_sq, max_relative = 1e-12);

        let cst = 2.0;
        let g = IntensityControl::constant(1.0, 2, cst).unwrap();
        let k = envelope_constants(&c, 1.0, &[g]).unwrap();
        assert_relative_eq!(k.c01, (cst - 1.0) * int_s0, max_relative = 1e-12);

        assert!(envelope_constants(&c, 1.0, &[]).is_err());
        let expensive = IntensityControl::constant(1.0, 2, 10.0).unwrap();
        assert!(matches!(
            envelope_constants(&c, 1.0, &[expensive]),
            Err(Error::InadmissibleControl(_))
        ));
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let s = CoefficientSpec::default();
        let text = toml::to_string(&s).unwrap();
        let back: CoefficientSpec = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
        assert!(toml::from_str::<CoefficientSpec>("bogus = 1").is_err());
    }
}
