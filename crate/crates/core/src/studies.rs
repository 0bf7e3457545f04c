//! Subcommand drivers: each study runs from an [`ExperimentConfig`] and
//! returns its CSV outputs in memory together with a pass/fail verdict.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coefficients::{check_envelopes, check_exponential_integrability, check_growth, check_lipschitz, envelope_constants, Coefficients};
use crate::config::ExperimentConfig;
use crate::controls::{intensity_control_to_csv, scalar_control_to_csv, ControlPair, IntensityControl, MarkSpace, ScalarControl};
use crate::error::{Error, Result};
use crate::field_io::{field_from_csv, field_to_csv};
use crate::ldp::{c1_convergence_test, c2_convergence_test, rare_event_study, rate_endpoint, LinearDiagnostic, RareEventSettings};
use crate::mc::derive_seed;
use crate::skeleton::{energy_report, integrate_skeleton, random_control, solve_skeleton, w_bound_scan, ScanSettings};
use crate::spectral::norm_v;
use crate::stochastic::{a_priori_spread, a_priori_w_scan, girsanov_check, simulate_spde, y_bound_study};
use crate::verify::operator_suite;

/// Largest tolerated spread of a priori estimates across noise levels.
pub const SCAN_SPREAD_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Skeleton,
    Simulate,
    VerifyOperators,
    CheckCoefficients,
    Rate,
    McY,
    McC2,
    McLdp,
    GirsanovCheck,
    Scan,
    C1,
}

impl Study {
    pub const ALL: [Study; 11] = [
        Study::Skeleton,
        Study::Simulate,
        Study::VerifyOperators,
        Study::CheckCoefficients,
        Study::Rate,
        Study::McY,
        Study::McC2,
        Study::McLdp,
        Study::GirsanovCheck,
        Study::Scan,
        Study::C1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Skeleton => "skeleton",
            Study::Simulate => "simulate",
            Study::VerifyOperators => "verify-operators",
            Study::CheckCoefficients => "check-coefficients",
            Study::Rate => "rate",
            Study::McY => "mc-y",
            Study::McC2 => "mc-c2",
            Study::McLdp => "mc-ldp",
            Study::GirsanovCheck => "girsanov-check",
            Study::Scan => "scan",
            Study::C1 => "c1",
        }
    }

    /// Whether the study draws random numbers from the master seed.
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Study::Skeleton | Study::Rate | Study::C1)
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// In-memory result of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
    pub summary: Vec<String>,
    pub passed: bool,
}

impl StudyOutput {
    fn new() -> Self {
        StudyOutput {
            files: vec![],
            summary: vec![],
            passed: true,
        }
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }

    fn require(&mut self, ok: bool, what: &str) {
        self.summary.push(format!("{} {what}", if ok { "PASS" } else { "FAIL" }));
        self.passed &= ok;
    }

    pub fn summary_text(&self) -> String {
        let mut s = self.summary.join("\n");
        s.push('\n');
        s
    }
}

fn seeded(seed: u64, body: String) -> String {
    format!("# master_seed={seed}\n{body}")
}

/// Runs `study` with the given configuration.
pub fn run_study(study: Study, cfg: &ExperimentConfig) -> Result<StudyOutput> {
    let seed = if study.is_stochastic() {
        Some(cfg.master_seed()?)
    } else {
        cfg.seed
    };
    let seed_or_zero = seed.unwrap_or(0);
    let p = cfg.params();
    let opts = cfg.solver;
    let horizon = cfg.horizon;
    let mut out = StudyOutput::new();
    match study {
        Study::Skeleton => {
            let c = cfg.coefficient_set()?;
            let q = cfg.controls()?;
            let x0 = cfg.initial_state()?;
            let traj = solve_skeleton(&x0, &q, &c, &p, &opts)?;
            let residual = energy_report(&traj, &q, &c, &p)?;
            let worst = residual.iter().cloned().fold(0.0, f64::max);
            let mut res = String::from("t,energy_residual\n");
            for (t, r) in traj.times.iter().zip(&residual) {
                res.push_str(&format!("{t:e},{r:e}\n"));
            }
            out.file("trajectory.csv", traj.to_csv(Some(&residual)));
            out.file("energy_residual.csv", res);
            out.file("final_state.csv", field_to_csv(traj.final_state(), &p));
            out.note(format!("sup_w_squared {:e}", traj.sup_w_squared()));
            out.note(format!("max_energy_residual {worst:e}"));
        }
        Study::Simulate => {
            let c = cfg.coefficient_set()?;
            let q = cfg.controls()?;
            let x0 = cfg.initial_state()?;
            let s = seed_or_zero;
            let (path, noise) = simulate_spde(&x0, cfg.simulate.eps, &q, &c, &p, &opts, s)?;
            out.file("trajectory.csv", seeded(s, path.trajectory.to_csv(None)));
            out.file("events.csv", seeded(s, path.events_to_csv()));
            out.file("final_state.csv", field_to_csv(path.trajectory.final_state(), &p));
            out.note(format!("events {}", noise.jumps.len()));
            out.note(format!("sup_w_squared {:e}", path.trajectory.sup_w_squared()));
        }
        Study::VerifyOperators => {
            let o = &cfg.operators;
            let report = operator_suite(&p, &o.cutoffs, o.samples, o.bound_samples, seed_or_zero);
            out.file("operators.csv", seeded(seed_or_zero, report.to_csv()));
            for chk in &report.checks {
                out.require(chk.passed(), &format!("{} N={} worst={:e}", chk.name, chk.cutoff, chk.worst));
            }
            out.require(report.bound_growth_ok(), "bilinear bound growth");
        }
        Study::CheckCoefficients => {
            let c = cfg.coefficient_set()?;
            let k = &cfg.check;
            let s = seed_or_zero;
            let lip = check_lipschitz(&c, &p, horizon, k.samples, s);
            let growth = check_growth(&c, &p, horizon, k.samples, derive_seed(s, 1));
            let env = check_envelopes(&c, &p, horizon, k.samples, derive_seed(s, 2));
            let integ = check_exponential_integrability(&c, k.delta, horizon, k.cells)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 3));
            let trials = (0..k.trials)
                .map(|_| random_control(k.level, 10, horizon, c.marks(), &mut rng).map(|q| q.g))
                .collect::<Result<Vec<IntensityControl>>>()?;
            let cst = envelope_constants(&c, k.level, &trials)?;
            let mut csv = String::from("check,observed,declared,passed\n");
            for (name, r) in [
                ("lipschitz_drift", lip.drift),
                ("lipschitz_diffusion", lip.diffusion),
                ("lipschitz_jumps", lip.jumps),
                ("growth_q1", growth.q1),
                ("growth_q2", growth.q2),
            ] {
                csv.push_str(&format!("{name},{:e},{:e},{}\n", r.max_ratio, r.declared, r.passed()));
            }
            csv.push_str(&format!("envelope_s0,{:e},1,{}\n", env.s0_ratio, env.passed()));
            csv.push_str(&format!("envelope_s1,{:e},1,{}\n", env.s1_ratio, env.passed()));
            let finite = integ.s0_integral.is_finite() && integ.s1_integral.is_finite();
            csv.push_str(&format!("integrability_s0,{:e},,{finite}\n", integ.s0_integral));
            csv.push_str(&format!("integrability_s1,{:e},,{finite}\n", integ.s1_integral));
            for (name, v) in [("c02", cst.c02), ("c01", cst.c01), ("c12", cst.c12), ("c11", cst.c11)] {
                csv.push_str(&format!("level_constant_{name},{v:e},,{}\n", v.is_finite()));
            }
            out.file("coefficients.csv", seeded(s, csv));
            out.require(lip.passed(), "Lipschitz bounds");
            out.require(growth.passed(), "growth bounds");
            out.require(env.passed(), "envelopes dominate jump sizes");
            out.require(finite, "exponential integrability");
        }
        Study::Rate => {
            let c = cfg.coefficient_set()?;
            let x0 = cfg.initial_state()?;
            let target = match &cfg.rate.target_file {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    field_from_csv(&text)?.field
                }
                None => shifted_target(&x0, &c, &p, &opts, horizon, cfg.rate.shift)?,
            };
            let r = rate_endpoint(&target, &x0, &c, &p, &opts, horizon, &cfg.rate.optimizer)?;
            out.file("rate_trace.csv", r.trace_to_csv());
            out.file("rate_control_f.csv", scalar_control_to_csv(&r.control.f)?);
            out.file("rate_control_g.csv", intensity_control_to_csv(&r.control.g)?);
            out.file(
                "rate_summary.csv",
                format!(
                    "value,terminal_residual,converged,iterations\n{:e},{:e},{},{}\n",
                    r.value,
                    r.terminal_residual,
                    r.converged,
                    r.trace.len()
                ),
            );
            out.note(format!("rate_value {:e}", r.value));
            out.note(format!("terminal_residual {:e}", r.terminal_residual));
            out.require(r.converged, "optimizer converged");
        }
        Study::McY => {
            let s = seed_or_zero;
            let c = cfg.coefficient_set()?;
            let st = y_bound_study(&cfg.mc.eps, cfg.mc.paths, &cfg.initial_state()?, &cfg.controls()?, &c, &p, &opts, s)?;
            let mut csv = String::from("eps,estimator,mean,stderr,paths\n");
            for r in &st.rows {
                csv.push_str(&format!(
                    "{:e},sup_y_w_squared,{:e},{:e},{}\n",
                    r.eps, r.estimate.mean, r.estimate.stderr, r.estimate.n
                ));
            }
            out.file("y_bound.csv", seeded(s, csv));
            out.note(format!("slope {:.6}", st.slope));
            let t = &cfg.thresholds;
            out.require(st.slope >= t.y_slope_min && st.slope <= t.y_slope_max, "log-log slope in range");
        }
        Study::McC2 => {
            let s = seed_or_zero;
            let c = cfg.coefficient_set()?;
            let tab = c2_convergence_test(&cfg.controls()?, &cfg.mc.eps, cfg.mc.paths, &cfg.initial_state()?, &c, &p, &opts, s)?;
            out.file("c2.csv", seeded(s, tab.to_csv()));
            out.note(format!("slope {:.6}", tab.slope));
            out.require(tab.passed(cfg.thresholds.c2_final), "distance decreasing and final value small");
        }
        Study::McLdp => {
            let s = seed_or_zero;
            let re = &cfg.rare_event;
            let settings = RareEventSettings {
                radius: re.radius,
                eps_list: cfg.mc.eps.clone(),
                paths: cfg.mc.paths,
                seed: s,
                min_hits: re.min_hits,
                importance_sampling: re.importance_sampling,
                optimizer: re.optimizer.clone(),
            };
            let x0 = cfg.initial_state()?;
            let study = match re.linear_mode {
                Some([k1, k2]) => {
                    let d = LinearDiagnostic::new(p, (k1, k2), horizon)?;
                    let c = d.brownian_model()?;
                    rare_event_study(&x0, &c, &p, &opts.linear(), horizon, &settings, Some(&d))?
                }
                None => rare_event_study(&x0, &cfg.coefficient_set()?, &p, &opts, horizon, &settings, None)?,
            };
            out.file("rare_event.csv", seeded(s, study.to_csv()));
            out.file("rare_event_optimizer_trace.csv", study.optimizer.trace_to_csv());
            out.note(format!("optimizer_value {:e}", study.optimizer_value));
            if let Some(r) = study.ratio {
                out.note(format!("mc_to_optimizer_ratio {r:.6}"));
            }
            for row in study.rows.iter().filter(|r| r.flagged) {
                out.note(format!("eps {:e} flagged: {} hits", row.eps, row.hits));
            }
            if let Some(gap) = study.worst_reference_gap() {
                out.note(format!("worst_reference_gap {gap:.6}"));
                out.require(gap <= cfg.thresholds.rare_event_gap, "MC rate matches reference");
            }
        }
        Study::GirsanovCheck => {
            let s = seed_or_zero;
            let g = &cfg.girsanov;
            let marks = MarkSpace::from_weights(cfg.coefficients.mark_weights.clone())?;
            let psi = ScalarControl::constant(horizon, g.psi)?;
            let tilt = IntensityControl::constant(horizon, marks.len(), g.tilt)?;
            let chk = girsanov_check(&psi, &tilt, &marks, g.eps, opts.dt, g.paths, s)?;
            let mut csv = String::from("weight,mean,stderr,paths\n");
            for (name, e) in [("brownian", chk.brownian), ("jump", chk.jump), ("combined", chk.combined)] {
                csv.push_str(&format!("{name},{:e},{:e},{}\n", e.mean, e.stderr, e.n));
            }
            out.file("girsanov.csv", seeded(s, csv));
            out.require(chk.passed(g.sigmas), "mean weights equal one");
        }
        Study::Scan => {
            let s = seed_or_zero;
            let c = cfg.coefficient_set()?;
            let x0 = cfg.initial_state()?;
            let sc = &cfg.scan;
            let settings = ScanSettings {
                max_level: sc.max_level,
                trials: sc.trials,
                control_cells: sc.control_cells,
                seed: s,
            };
            let levels = w_bound_scan(&x0, &c, &p, &opts, horizon, &settings)?;
            let mut csv = String::from("m,level_max,cumulative,trials\n");
            for l in &levels {
                csv.push_str(&format!("{},{:e},{:e},{}\n", l.m, l.level_max, l.cumulative, l.trials));
            }
            out.file("skeleton_scan.csv", seeded(s, csv));
            if !sc.eps.is_empty() {
                let rows = a_priori_w_scan(&sc.eps, sc.max_level, sc.trials, sc.control_cells, &x0, &c, &p, &opts, horizon, s)?;
                let mut csv = String::from("eps,m,mean,stderr,max,trials\n");
                for r in &rows {
                    csv.push_str(&format!(
                        "{:e},{},{:e},{:e},{:e},{}\n",
                        r.eps, r.m, r.estimate.mean, r.estimate.stderr, r.max, r.estimate.n
                    ));
                }
                out.file("stochastic_scan.csv", seeded(s, csv));
                let spread = a_priori_spread(&rows);
                out.note(format!("spread_across_eps {spread:.6}"));
                out.require(spread <= SCAN_SPREAD_LIMIT, "bounded across noise levels");
            }
            out.require(levels.iter().all(|l| l.cumulative.is_finite()), "no blow-up");
        }
        Study::C1 => {
            let c = cfg.coefficient_set()?;
            let k = &cfg.c1;
            let tab = c1_convergence_test(&cfg.controls()?, &k.ns, k.kind, k.high, &cfg.initial_state()?, &c, &p, &opts)?;
            out.file("c1.csv", tab.to_csv());
            out.require(tab.passed(), "error table decreasing by at least 2x");
        }
    }
    Ok(out)
}

/// Uncontrolled terminal state moved by `shift` along the normalized
/// response to the diffusion field, or to the first jump field.
fn shifted_target(
    x0: &crate::spectral::SpectralField,
    c: &dyn Coefficients,
    p: &crate::spectral::FluidParams,
    opts: &crate::integrator::SolverOptions,
    horizon: f64,
    shift: f64,
) -> Result<crate::spectral::SpectralField> {
    let free = ControlPair::uncontrolled(horizon, c.marks().len());
    let mut xt = integrate_skeleton(x0, &free, c, p, opts, |_, _| {})?;
    let dir = if c.has_diffusion() {
        c.diffusion_hat(&xt, horizon, p)
    } else if c.has_jumps() {
        c.jump_hat(horizon, &xt, 0, p)
    } else {
        return Err(Error::Config("rate target needs a diffusion or jump coefficient".into()));
    };
    let n = norm_v(&dir, p);
    if n == 0.0 {
        return Err(Error::Config("noise direction vanishes at the terminal state".into()));
    }
    xt.axpy(shift / n, &dir);
    Ok(xt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert!("nope".parse::<Study>().is_err());
    }

    #[test]
    fn zero_data_skeleton_is_zero() {
        let cfg = ExperimentConfig::from_toml_str(
            "[solver]\ndt = 0.01\n[initial]\nscale = 0.0\n[coefficients]\ndrift = \"zero\"\ndiffusion = \"zero\"\njumps = \"zero\"\n",
            &[],
        )
        .unwrap();
        let out = run_study(Study::Skeleton, &cfg).unwrap();
        let res = &out.files.iter().find(|f| f.0 == "energy_residual.csv").unwrap().1;
        assert!(res.lines().skip(1).all(|l| l.ends_with(",0e0")));
        assert!(out.passed);
    }

    #[test]
    fn stochastic_study_without_seed_fails() {
        assert!(matches!(
            run_study(Study::GirsanovCheck, &ExperimentConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
