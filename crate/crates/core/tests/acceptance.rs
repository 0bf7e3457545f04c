//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::Complex64;

use g2ldp::coefficients::CoefficientSet;
use g2ldp::config::ExperimentConfig;
use g2ldp::controls::{ControlPair, IntensityControl, MarkSpace, ScalarControl};
use g2ldp::integrator::SolverOptions;
use g2ldp::ldp::*;
use g2ldp::mc::{derive_seed, try_par_map, Estimate};
use g2ldp::skeleton::*;
use g2ldp::spectral::{inner_v, FluidParams, SpectralField};
use g2ldp::stochastic::*;
use g2ldp::verify::operator_suite;
use g2ldp::Result;

const HORIZON: f64 = 1.0;
const SEED: u64 = 20_240_601;

fn params() -> FluidParams {
    FluidParams::default().with_cutoff(4)
}

fn controlled() -> ControlPair {
    ControlPair::new(
        ScalarControl::uniform(HORIZON, vec![0.5, -0.3, 0.2, 0.0]).unwrap(),
        IntensityControl::uniform(HORIZON, 2, vec![1.5, 0.7, 0.9, 1.2, 1.0, 2.0, 0.5, 1.1]).unwrap(),
    )
    .unwrap()
}

fn operator_criterion() -> Result<(bool, String)> {
    let t = Instant::now();
    let report = operator_suite(&FluidParams::default(), &[4, 8], 100, 200, SEED);
    let secs = t.elapsed().as_secs_f64();
    let worst = report.checks.iter().map(|c| c.worst / c.tolerance).fold(0.0, f64::max);
    Ok((
        report.passed() && secs < 30.0,
        format!("{} checks, worst/tol {worst:.2e}, {secs:.1}s (limit 30s)", report.checks.len()),
    ))
}

fn linear_criterion() -> Result<(bool, String)> {
    let p = params();
    let k = (2, 1);
    let x0 = SpectralField::real_mode(4, k, Complex64::new(0.4, 0.1));
    let opts = SolverOptions::default().linear();
    let zero = CoefficientSet::zero(&p, MarkSpace::single(1.0));
    let q = ControlPair::uncontrolled(HORIZON, 1);
    let rate = p.kappa * p.a_hat_symbol(k);
    let decay_error = |traj: &Trajectory| {
        traj.times
            .iter()
            .zip(&traj.states)
            .map(|(t, x)| (x.mode(k) - x0.mode(k) * (-rate * t).exp()).norm() / x0.mode(k).norm())
            .fold(0.0, f64::max)
    };
    let skel = decay_error(&solve_skeleton(&x0, &q, &zero, &p, &opts)?);
    let (path, _) = simulate_spde(&x0, 0.1, &q, &zero, &p, &opts, SEED)?;
    let spde = decay_error(&path.trajectory);

    let d = LinearDiagnostic::new(p, (1, 0), HORIZON)?;
    let c = d.brownian_model()?;
    let eps = 0.1;
    let dir = d.direction();
    let origin = SpectralField::zeros(4);
    let squares = try_par_map(10_000, |i| -> Result<f64> {
        let (path, _) = simulate_spde(&origin, eps, &q, &c, &p, &d.options(1e-3), derive_seed(SEED, i as u64))?;
        Ok(inner_v(path.trajectory.final_state(), &dir, &p).powi(2))
    })?;
    let var = Estimate::from_samples(&squares);
    let target = d.terminal_sd(eps).powi(2);
    Ok((
        skel <= 1e-12 && spde <= 1e-12 && var.within(target, 3.0),
        format!(
            "decay error skeleton {skel:.1e} spde {spde:.1e} (tol 1e-12); variance {:.5e} +- {:.1e} vs {target:.5e} (3 se)",
            var.mean, var.stderr
        ),
    ))
}

fn degeneration_criterion() -> Result<(bool, String)> {
    let p = params();
    let c = CoefficientSet::default_family(&p)?;
    let x0 = default_initial_state(&p);
    let q = controlled();
    let opts = SolverOptions::default();
    let (path, _) = simulate_spde(&x0, 0.0, &q, &c, &p, &opts, SEED)?;
    let skel = solve_skeleton(&x0, &q, &c, &p, &opts)?;
    let gap = path.trajectory.sup_distance_v(&skel, &p)?;
    Ok((gap <= 1e-10, format!("sup V distance {gap:.1e} (tol 1e-10)")))
}

fn energy_criterion() -> Result<(bool, String)> {
    let cfg = ExperimentConfig::default();
    let p = cfg.params();
    let c = cfg.coefficient_set()?;
    let x0 = cfg.initial_state()?;
    let q = controlled();
    let residual = |dt: f64| -> Result<f64> {
        let traj = solve_skeleton(&x0, &q, &c, &p, &SolverOptions::default().with_dt(dt))?;
        Ok(energy_report(&traj, &q, &c, &p)?.into_iter().fold(0.0, f64::max))
    };
    let coarse = residual(1e-3)?;
    let fine = residual(5e-4)?;
    let ratio = coarse / fine;
    Ok((ratio >= 1.8, format!("residual {coarse:.3e} -> {fine:.3e}, ratio {ratio:.2} (min 1.8)")))
}

fn scan_criterion() -> Result<(bool, String)> {
    let p = params();
    let c = CoefficientSet::default_family(&p)?;
    let x0 = default_initial_state(&p);
    let opts = SolverOptions::default();
    let settings = ScanSettings {
        max_level: 4,
        trials: 100,
        control_cells: 10,
        seed: SEED,
    };
    let levels = w_bound_scan(&x0, &c, &p, &opts, HORIZON, &settings)?;
    let skeleton_ok = levels.iter().all(|l| l.cumulative.is_finite()) && levels.windows(2).all(|w| w[1].cumulative >= w[0].cumulative);
    let rows = a_priori_w_scan(&[1e-1, 1e-2, 1e-3], 4, 100, 10, &x0, &c, &p, &opts, HORIZON, SEED)?;
    let spread = a_priori_spread(&rows);
    let largest = rows.iter().map(|r| r.max).fold(0.0, f64::max);
    Ok((
        skeleton_ok && largest.is_finite() && spread <= g2ldp::studies::SCAN_SPREAD_LIMIT,
        format!(
            "skeleton sup {:.3e} at m=4; stochastic max {largest:.3e}, eps spread {spread:.2} (limit {})",
            levels.last().map_or(f64::NAN, |l| l.cumulative),
            g2ldp::studies::SCAN_SPREAD_LIMIT
        ),
    ))
}

fn y_criterion() -> Result<(bool, String)> {
    let p = params();
    let c = CoefficientSet::default_family(&p)?;
    let x0 = default_initial_state(&p);
    let study = y_bound_study(&[1e-1, 3e-2, 1e-2, 3e-3], 200, &x0, &controlled(), &c, &p, &SolverOptions::default(), SEED)?;
    Ok(((0.8..=1.2).contains(&study.slope), format!("slope {:.3} (range [0.8, 1.2])", study.slope)))
}

fn girsanov_criterion() -> Result<(bool, String)> {
    let marks = MarkSpace::from_weights(vec![0.5, 0.5])?;
    let psi = ScalarControl::constant(HORIZON, 0.3)?;
    let tilt = IntensityControl::constant(HORIZON, 2, 1.5)?;
    let chk = girsanov_check(&psi, &tilt, &marks, 0.5, 1e-3, 10_000, SEED)?;
    let show = |e: &Estimate| format!("{:.4}+-{:.4}", e.mean, e.stderr);
    Ok((
        chk.passed(3.0),
        format!("brownian {} jump {} combined {} (3 se of 1)", show(&chk.brownian), show(&chk.jump), show(&chk.combined)),
    ))
}

fn c1_criterion() -> Result<(bool, String)> {
    let p = params();
    let c = CoefficientSet::default_family(&p)?;
    let x0 = default_initial_state(&p);
    let opts = SolverOptions::default().with_dt(1.0 / 1024.0);
    let q = ControlPair::new(ScalarControl::constant(HORIZON, 0.5)?, IntensityControl::identity(HORIZON, 2))?;
    let mut ok = true;
    let mut detail = vec![];
    for kind in [PerturbationKind::Brownian, PerturbationKind::Intensity] {
        let tab = c1_convergence_test(&q, &[1, 4, 16, 64], kind, 3.0, &x0, &c, &p, &opts)?;
        ok &= tab.passed();
        let errs: Vec<String> = tab.rows.iter().map(|r| format!("{:.2e}", r.error)).collect();
        detail.push(format!("{kind:?} [{}]", errs.join(", ")));
    }
    Ok((ok, format!("{} (strictly decreasing, n=1 >= 2x n=64)", detail.join("; "))))
}

fn c2_criterion() -> Result<(bool, String)> {
    let p = params();
    let x0 = default_initial_state(&p);
    let eps = [1e-1, 1e-2, 1e-3];
    let c = CoefficientSet::default_family(&p)?;
    let nonlinear = c2_convergence_test(&ControlPair::uncontrolled(HORIZON, 2), &eps, 200, &x0, &c, &p, &SolverOptions::default(), SEED)?;
    let d = LinearDiagnostic::new(p, (1, 0), HORIZON)?;
    let gauss = c2_convergence_test(&ControlPair::uncontrolled(HORIZON, 1), &eps, 200, &x0, &d.brownian_model()?, &p, &d.options(1e-3), SEED)?;
    let dist: Vec<String> = nonlinear.rows.iter().map(|r| format!("{:.3e}", r.estimate.mean)).collect();
    Ok((
        nonlinear.passed(0.05) && (0.4..=0.6).contains(&gauss.slope),
        format!("distances [{}] (final <= 0.05); gaussian slope {:.3} (range [0.4, 0.6])", dist.join(", "), gauss.slope),
    ))
}

fn oracle_criterion() -> Result<(bool, String)> {
    let p = params();
    let x0 = default_initial_state(&p);
    let d = LinearDiagnostic::new(p, (1, 0), HORIZON)?;
    let opts = d.options(1e-3);
    let settings = OptimizerSettings::default();
    let mut worst = 0.0f64;
    let mut all_converged = true;
    let mut solve = |c: &CoefficientSet, shift: f64, oracle: f64| -> Result<()> {
        let free = solve_skeleton(&x0, &ControlPair::uncontrolled(HORIZON, 1), c, &p, &opts)?;
        let mut target = free.final_state().clone();
        target.axpy(shift, &d.direction());
        let r = rate_endpoint(&target, &x0, c, &p, &opts, HORIZON, &settings)?;
        all_converged &= r.converged;
        worst = worst.max((r.value - oracle).abs() / oracle);
        Ok(())
    };
    let bm = d.brownian_model()?;
    for dist in [0.2, 0.4] {
        solve(&bm, dist, d.brownian_cost(dist, settings.f_cells))?;
    }
    let jm = d.jump_model(1.0)?;
    for disp in [0.1, -0.1] {
        solve(&jm, disp, d.jump_cost(disp, 1.0, settings.g_cells)?)?;
    }
    let optimizer_ok = all_converged && worst <= 0.05;

    let rare = RareEventSettings {
        radius: 2.5 * d.terminal_sd(0.05),
        eps_list: vec![0.1, 0.05, 0.025],
        paths: 2000,
        seed: SEED,
        ..Default::default()
    };
    let study = rare_event_study(&x0, &bm, &p, &opts, HORIZON, &rare, Some(&d))?;
    let gap = study.worst_reference_gap();
    let rare_ok = gap.is_some_and(|g| g <= 0.25);
    Ok((
        optimizer_ok && rare_ok,
        format!(
            "optimizer worst rel error {worst:.2e} (tol 0.05, converged {all_converged}); rare-event worst gap {} over {} usable rows (tol 0.25)",
            gap.map_or("none".into(), |g| format!("{g:.3}")),
            study.rows.iter().filter(|r| !r.flagged).count()
        ),
    ))
}

fn run_cli(dir: &std::path::Path, sub: &str, config: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let status = Command::new(env!("CARGO_BIN_EXE_g2ldp"))
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(|e| g2ldp::Error::io(dir, e))?
        .status;
    if !status.success() {
        return Err(g2ldp::Error::Config(format!("{sub} exited with {status}")));
    }
    let mut files = vec![];
    for entry in std::fs::read_dir(dir).map_err(|e| g2ldp::Error::io(dir, e))? {
        let path = entry.map_err(|e| g2ldp::Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            let bytes = std::fs::read(&path).map_err(|e| g2ldp::Error::io(&path, e))?;
            files.push((path.file_name().unwrap().to_string_lossy().into_owned(), bytes));
        }
    }
    files.sort();
    Ok(files)
}

fn reproducibility_criterion() -> Result<(bool, String)> {
    let tmp = tempfile::tempdir().map_err(|e| g2ldp::Error::io("tempdir", e))?;
    let config = tmp.path().join("experiment.toml");
    let text = "seed = 11\n[fluid]\nmodes = 4\n[mc]\neps = [0.1, 0.01]\npaths = 20\n";
    std::fs::write(&config, text).map_err(|e| g2ldp::Error::io(&config, e))?;
    let mut compared = 0;
    for sub in ["simulate", "mc-y", "mc-c2"] {
        let a = run_cli(&tmp.path().join(format!("{sub}-a")), sub, &config)?;
        let b = run_cli(&tmp.path().join(format!("{sub}-b")), sub, &config)?;
        if a.is_empty() || a != b {
            return Ok((false, format!("{sub} outputs differ between runs")));
        }
        compared += a.len();
    }
    Ok((true, format!("{compared} CSV files byte-identical across two runs")))
}

type Criterion = (&'static str, fn() -> Result<(bool, String)>);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("operator_suite", operator_criterion),
        ("linear_oracle", linear_criterion),
        ("zero_noise_degeneration", degeneration_criterion),
        ("energy_identity", energy_criterion),
        ("w_bound_scans", scan_criterion),
        ("y_estimate_slope", y_criterion),
        ("girsanov_means", girsanov_criterion),
        ("c1_weak_convergence", c1_criterion),
        ("c2_small_noise_limit", c2_criterion),
        ("rate_function_oracles", oracle_criterion),
        ("reproducibility", reproducibility_criterion),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += usize::from(!ok);
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
