use std::ffi::{CStr, CString};
use std::ptr;

use g2ldp_ffi::*;

unsafe fn last_error() -> String {
    let p = g2_last_error_message();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

unsafe fn params(modes: usize) -> *mut G2Params {
    let mut p = ptr::null_mut();
    assert_eq!(g2_params_new(1.0, 0.5, std::f64::consts::TAU, modes, &mut p), G2Status::Ok);
    p
}

#[test]
fn skeleton_round_trip() {
    unsafe {
        let p = params(4);
        let mut c = ptr::null_mut();
        assert_eq!(g2_coefficients_default(p, &mut c), G2Status::Ok);
        assert_eq!(g2_coefficients_marks(c), 2);
        let mut x0 = ptr::null_mut();
        assert_eq!(g2_field_default_initial(p, &mut x0), G2Status::Ok);
        let (mut nv, mut nw) = (0.0, 0.0);
        assert_eq!(g2_field_norms(x0, p, &mut nv, &mut nw), G2Status::Ok);
        assert!((nv - 1.0).abs() < 1e-12);

        let f = [0.5, -0.5];
        let mut traj = ptr::null_mut();
        let s = g2_solve_skeleton(p, c, x0, 1.0, 0.01, true, f.as_ptr(), f.len(), ptr::null(), 0, &mut traj);
        assert_eq!(s, G2Status::Ok);
        assert_eq!(g2_trajectory_len(traj), 101);
        let (mut t, mut v, mut w) = (0.0, 0.0, 0.0);
        assert_eq!(g2_trajectory_node(traj, 100, &mut t, &mut v, &mut w), G2Status::Ok);
        assert!((t - 1.0).abs() < 1e-12 && v.is_finite() && w >= v);
        assert_eq!(g2_trajectory_node(traj, 101, &mut t, &mut v, &mut w), G2Status::InvalidParameter);

        let mut last = ptr::null_mut();
        assert_eq!(g2_trajectory_final_state(traj, &mut last), G2Status::Ok);
        let mut csv = ptr::null_mut();
        assert_eq!(g2_field_to_csv(last, p, &mut csv), G2Status::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(g2_field_from_csv(csv, &mut back), G2Status::Ok);
        let (mut bv, mut bw) = (0.0, 0.0);
        assert_eq!(g2_field_norms(back, p, &mut bv, &mut bw), G2Status::Ok);
        assert_eq!(bv, v);

        g2_string_free(csv);
        g2_field_free(back);
        g2_field_free(last);
        g2_trajectory_free(traj);
        g2_field_free(x0);
        g2_coefficients_free(c);
        g2_params_free(p);
    }
}

#[test]
fn control_cost_matches_closed_form() {
    unsafe {
        let p = params(4);
        let spec = CString::new("mark_weights = [1.0]\njump_amplitudes = [0.5]\njump_linear = [0.1]").unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(g2_coefficients_from_toml(p, spec.as_ptr(), &mut c), G2Status::Ok);
        let f = [1.0];
        let g = [2.0];
        let mut cost = 0.0;
        assert_eq!(g2_control_cost(c, 1.0, f.as_ptr(), 1, g.as_ptr(), 1, &mut cost), G2Status::Ok);
        assert!((cost - (0.5 + 2.0 * 2f64.ln() - 1.0)).abs() < 1e-14);
        g2_coefficients_free(c);
        g2_params_free(p);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(g2_params_new(-1.0, 0.5, 1.0, 4, &mut p), G2Status::InvalidParameter);
        assert!(p.is_null());
        assert!(last_error().contains("alpha"), "{}", last_error());

        assert_eq!(g2_params_new(1.0, 0.5, 1.0, 4, ptr::null_mut()), G2Status::NullPointer);
        assert!(last_error().contains("out"));

        let p = params(4);
        let mut c = ptr::null_mut();
        assert_eq!(g2_coefficients_default(p, &mut c), G2Status::Ok);
        let mut x0 = ptr::null_mut();
        assert_eq!(g2_field_default_initial(p, &mut x0), G2Status::Ok);
        let mut traj = ptr::null_mut();
        let f = [1.0, 1.0, 1.0];
        let s = g2_solve_skeleton(p, c, x0, 1.0, 0.1, true, f.as_ptr(), 3, ptr::null(), 0, &mut traj);
        assert_eq!(s, G2Status::GridMisaligned);
        assert!(traj.is_null());

        let bad = CString::new("drift = \"nope\"").unwrap();
        let mut c2 = ptr::null_mut();
        assert_eq!(g2_coefficients_from_toml(p, bad.as_ptr(), &mut c2), G2Status::InvalidParameter);

        let garbage = CString::new("not a field").unwrap();
        let mut fld = ptr::null_mut();
        assert_eq!(g2_field_from_csv(garbage.as_ptr(), &mut fld), G2Status::Parse);

        g2_field_free(x0);
        g2_coefficients_free(c);
        g2_params_free(p);
    }
}

#[test]
fn simulation_is_seed_deterministic() {
    unsafe {
        let p = params(4);
        let mut c = ptr::null_mut();
        assert_eq!(g2_coefficients_default(p, &mut c), G2Status::Ok);
        let mut x0 = ptr::null_mut();
        assert_eq!(g2_field_default_initial(p, &mut x0), G2Status::Ok);
        let run = |seed| {
            let mut t = ptr::null_mut();
            assert_eq!(g2_simulate(p, c, x0, 0.05, 0.2, 0.01, true, seed, &mut t), G2Status::Ok);
            let (mut a, mut v, mut w) = (0.0, 0.0, 0.0);
            assert_eq!(g2_trajectory_node(t, g2_trajectory_len(t) - 1, &mut a, &mut v, &mut w), G2Status::Ok);
            g2_trajectory_free(t);
            (v, w)
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        g2_field_free(x0);
        g2_coefficients_free(c);
        g2_params_free(p);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/g2ldp.h");
    let src = include_str!("../src/lib.rs");
    for line in src.lines().filter(|l| l.contains("extern \"C\" fn ")) {
        let name = line.split("fn ").nth(1).unwrap().split('(').next().unwrap();
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct G2Field G2Field;"));
    let v = unsafe { CStr::from_ptr(g2_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
