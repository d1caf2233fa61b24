//! End-to-end acceptance checks on the `bh-circle` example.
//!
//! Each test prints a single `PASS`/`FAIL` line to stderr, bypassing the
//! test harness capture, and then asserts.

use std::f64::consts::TAU;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orbstab::floquet::{
    alignment, andronov_vitt_verdict, closed_loop_spectrum, comparison_verdict, estimate_growth_constants,
    exponent_sum_check, max_drift_norm, monodromy, restricted_monodromy, trace_integral, unit_multiplier,
};
use orbstab::linalg;
use orbstab::projection::{self, frame_at, GeometricFrame};
use orbstab::riccati::{self, analytic_example_gain, gain_from_riccati, prde_residual, solve_prde};
use orbstab::sim::{orbital_convergence_metrics, simulate_closed_loop, simulate_linear, SimOptions};
use orbstab::systems::{self, bh_auxiliary_gain, bh_circle, bh_minimal_coordinates, bh_riccati_family};
use orbstab::transverse::{
    comparison_system, minimal_tvl, pi_dagger, tvl_general, tvl_orthogonal, TransverseCoordinateMap,
};
use orbstab::{Closure, GainSchedule, PeriodicLinearSystem, RiccatiWeights, Verdict};

const GRID: usize = 512;

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "[criterion {id:>2}] {} {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

struct Design {
    tvl: PeriodicLinearSystem,
    comparison: PeriodicLinearSystem,
    gain: GainSchedule,
}

/// Riccati design for `a = 1`, shared between criteria.
fn design() -> &'static Design {
    static CELL: OnceLock<Design> = OnceLock::new();
    CELL.get_or_init(|| {
        let (sys, orbit) = bh_circle(1.0).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
        let comparison = comparison_system(&sys, &orbit, GRID).unwrap();
        let weights = RiccatiWeights::identity(3, 1);
        let sol = solve_prde(&comparison, &weights, riccati::DEFAULT_MAX_SWEEPS).unwrap();
        let gain = gain_from_riccati(&sol, &comparison, &weights).unwrap();
        Design { tvl, comparison, gain }
    })
}

fn sorted_real(v: &[Complex64]) -> Vec<f64> {
    let mut r: Vec<f64> = v.iter().map(|e| e.re).collect();
    r.sort_by(|a, b| b.total_cmp(a));
    r
}

fn max_deviation(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_01_riccati_design_spectra() {
    let start = Instant::now();
    let d = design();
    let tvl = closed_loop_spectrum(&d.tvl, Some(&d.gain), Closure::Direct).unwrap();
    let tvl_re = sorted_real(&tvl.exponents);
    let tvl_dev = max_deviation(&tvl_re, &[0.0, -1.0, -1.73]);

    let cmp = closed_loop_spectrum(&d.comparison, Some(&d.gain), Closure::Direct).unwrap();
    let mut want = [Complex64::new(-0.86, 0.5), Complex64::new(-0.86, -0.5), Complex64::new(-1.0, 0.0)];
    let mut got = cmp.exponents.clone();
    let key = |c: &Complex64| (c.re * 1e3).round() as i64 * 1_000_000 - (c.im * 1e3).round() as i64;
    got.sort_by_key(|c| std::cmp::Reverse(key(c)));
    want.sort_by_key(|c| std::cmp::Reverse(key(c)));
    let cmp_dev = got
        .iter()
        .zip(&want)
        .map(|(g, w)| (g.re - w.re).abs().max((g.im - w.im).abs()))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = tvl_dev <= 0.05 && cmp_dev <= 0.05 && got.len() == 3 && elapsed < 30.0;
    report(
        1,
        "Riccati design spectra",
        pass,
        &format!(
            "TVL exponents {tvl_re:.4?} (dev {tvl_dev:.3e}), comparison [{}] (dev {cmp_dev:.3e}), {elapsed:.1}s",
            got.iter().map(|c| format!("{:.4}{:+.4}i", c.re, c.im)).collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn criterion_02_analytic_controller_family() {
    let mut worst: f64 = 0.0;
    let mut parts = vec![];
    for a in [0.5, 2.0] {
        let (sys, orbit) = bh_circle(a).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
        let gain = analytic_example_gain(a, GRID).unwrap();
        let spec = closed_loop_spectrum(&tvl, Some(&gain), Closure::Direct).unwrap();
        let mut want = vec![0.0, -1.0, -a];
        want.sort_by(|x, y| y.total_cmp(x));
        let got = sorted_real(&spec.exponents);
        let dev = max_deviation(&got, &want);
        worst = worst.max(dev);
        parts.push(format!("a={a}: {got:.6?}"));
    }
    report(
        2,
        "analytic controller exponents",
        worst < 1e-4,
        &format!("{}, max dev {worst:.2e}", parts.join("; ")),
    );
}

#[test]
fn criterion_03_closed_form_riccati_family() {
    let a = 1.0;
    let (sys, orbit) = bh_circle(a).unwrap();
    let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
    let weights = RiccatiWeights::identity(3, 1);
    let mut worst: f64 = 0.0;
    for (k, i, j) in [(0.0, 0, 0), (0.7, 0, 1), (-1.3, 1, 1)] {
        let samples: Vec<DMatrix<f64>> = tvl
            .grid()
            .iter()
            .map(|&s| bh_riccati_family(a, k, i, j, s))
            .collect();
        let res = prde_residual(&samples, &tvl, &weights, true).unwrap();
        worst = worst.max(res);
    }
    report(
        3,
        "closed-form Riccati family residual",
        worst < 1e-7,
        &format!("max projected residual {worst:.3e} over 3 family members"),
    );
}

#[test]
fn criterion_04_projection_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = [0.0_f64; 8];
    for _ in 0..100 {
        let a = rng.gen_range(0.5..2.0);
        let s = rng.gen_range(0.0..TAU);
        let (sys, orbit) = bh_circle(a).unwrap();
        let fr = frame_at(&sys, &orbit, s).unwrap();
        let g = GeometricFrame::at(&orbit, s).unwrap();
        let omega = &fr.omega;
        let t = &fr.tangent;
        let sv = linalg::singular_values(omega);
        let rank_gap = if linalg::rank(omega, 1e-9) == 2 { 0.0 } else { 1.0 };
        // a point in the tube on the section through x_s(s)
        let normal = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let dz = omega * normal * (0.1 * a);
        let x = orbit.point(s) + &dz;
        let p = projection::project(&orbit, &x, None).unwrap();
        let ds = (p - s).rem_euclid(TAU);
        let back = ds.min(TAU - ds);
        let on = projection::project(&orbit, &orbit.point(s), None).unwrap();
        let on_gap = (on - s).rem_euclid(TAU).min(TAU - (on - s).rem_euclid(TAU));
        let vals = [
            (omega * omega - omega).norm(),
            (&fr.gamma * omega).norm(),
            (omega * t).norm(),
            rank_gap + sv.iter().filter(|v| **v > 1e-9).count().abs_diff(2) as f64,
            ((&fr.gamma * t)[0] - 1.0).abs() + on_gap,
            (omega - omega.transpose()).norm() + (g.gamma.transpose() - fr.gamma.transpose()).norm(),
            back,
            (x - orbit.point(p)).dot(&orbit.tangent(p).unwrap()).abs(),
        ];
        for (w, v) in worst.iter_mut().zip(vals) {
            *w = w.max(v);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let tol = [1e-12, 1e-12, 1e-12, 0.0, 1e-10, 1e-12, 1e-9, 1e-10];
    let pass = worst.iter().zip(tol).all(|(w, t)| *w <= t) && elapsed < 5.0;
    report(
        4,
        "projection and frame invariants",
        pass,
        &format!(
            "idempotence {:.1e}, ΓΩ {:.1e}, Ωx_s' {:.1e}, rank defect {}, left inverse {:.1e}, symmetry {:.1e}, section return {:.1e}, orthogonality {:.1e}; {elapsed:.2}s",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6], worst[7]
        ),
    );
}

#[test]
fn criterion_05_exponent_sums() {
    let d = design();
    let (sys, orbit) = bh_circle(1.0).unwrap();
    let riccati_gain = d.gain.clone();
    let r1 = exponent_sum_check(&sys, &orbit, |s| riccati_gain.eval(s), GRID).unwrap();
    let r2 = exponent_sum_check(&sys, &orbit, systems::bh_analytic_gain, GRID).unwrap();
    let mut ok = r1.passed && r2.passed;
    let mut parts = vec![
        format!("Riccati diff {:.2e}", r1.max_difference),
        format!("analytic diff {:.2e}", r2.max_difference),
    ];
    for a in [0.5, 1.0, 2.0] {
        let (sys, orbit) = bh_circle(a).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
        let cmp = comparison_system(&sys, &orbit, GRID).unwrap();
        let expected = -(2.0 * a + 1.0) * TAU;
        for (name, plin) in [("A⊥−K̂", &tvl), ("ΩA−K̂", &cmp)] {
            let shifted: Vec<DMatrix<f64>> = plin
                .grid()
                .iter()
                .zip(plin.a_samples())
                .map(|(&s, m)| m - bh_auxiliary_gain(a, s))
                .collect();
            let aux = plin.with_drift(shifted).unwrap();
            let sum = trace_integral(&aux, None, Closure::Direct).unwrap();
            let rel = ((sum - expected) / expected).abs();
            ok &= rel < 1e-6;
            parts.push(format!("a={a} {name} rel {rel:.1e}"));
        }
    }
    report(5, "exponent-sum trace integrals", ok, &parts.join(", "));
}

#[test]
fn criterion_06_unit_multiplier_witness() {
    let d = design();
    let mut cases: Vec<(String, f64, PeriodicLinearSystem, GainSchedule)> =
        vec![("Riccati a=1".into(), 1.0, d.tvl.clone(), d.gain.clone())];
    for a in [0.5, 1.0, 2.0] {
        let (sys, orbit) = bh_circle(a).unwrap();
        cases.push((
            format!("analytic a={a}"),
            a,
            tvl_orthogonal(&sys, &orbit, GRID).unwrap(),
            analytic_example_gain(a, GRID).unwrap(),
        ));
    }
    let mut ok = true;
    let mut parts = vec![];
    for (name, a, tvl, gain) in &cases {
        let (sys, orbit) = bh_circle(*a).unwrap();
        let m = monodromy(tvl, Some(gain), Closure::GainTimesOmega).unwrap();
        let unit = unit_multiplier(&m);
        let fr = frame_at(&sys, &orbit, orbit.s0()).unwrap();
        let v = sys.nominal_velocity(&orbit.point(orbit.s0()), orbit.s0());
        let y_par = &fr.tangent / fr.tangent.dot(&v);
        let cosine = alignment(&unit.eigenvector, &y_par);
        ok &= unit.distance < 1e-6 && cosine > 0.999;
        parts.push(format!("{name}: |μ−1| {:.1e}, cos {cosine:.6}", unit.distance));
    }
    report(6, "unit multiplier along the orbit", ok, &parts.join("; "));
}

#[test]
fn criterion_07_linear_nonlinear_consistency() {
    let d = design();
    let (sys, orbit) = bh_circle(1.0).unwrap();
    let fr = frame_at(&sys, &orbit, 0.0).unwrap();
    let dir = (&fr.omega * DVector::from_vec(vec![0.6, 0.3, -0.74])).normalize();
    let opts = SimOptions::default();
    let mut ok = true;
    let mut parts = vec![];
    for eps in [1e-3, 1e-4] {
        let dz0 = &dir * eps;
        let x0 = orbit.point(0.0) + &dz0;
        let trace = simulate_closed_loop(&sys, &orbit, &d.gain, &x0, 1, &opts).unwrap();
        let last = trace.len() - 1;
        let t_end = trace.times[last];
        let z_nl = &trace.states[last] - orbit.point(trace.s_values[last]);
        let lin = simulate_linear(&d.tvl, Some(&d.gain), Closure::Direct, &dz0, 1).unwrap();
        let z_lin = lin.states.last().unwrap();
        let t_lin = *lin.times.last().unwrap();
        let err = (&z_nl - z_lin).norm();
        ok &= err <= 10.0 * eps * eps && (t_end - t_lin).abs() < 1e-9;
        parts.push(format!("ε={eps:.0e}: error {err:.2e} (bound {:.1e})", 10.0 * eps * eps));
    }
    report(7, "linear vs nonlinear transverse error", ok, &parts.join(", "));
}

#[test]
fn criterion_08_nonlinear_convergence() {
    let d = design();
    let (sys, orbit) = bh_circle(1.0).unwrap();
    let x0 = DVector::from_vec(vec![1.2, 0.0, 0.1]);
    let trace = simulate_closed_loop(&sys, &orbit, &d.gain, &x0, 10, &SimOptions::default()).unwrap();
    let metrics = orbital_convergence_metrics(&trace).unwrap();
    let tvl = closed_loop_spectrum(&d.tvl, Some(&d.gain), Closure::Direct).unwrap();
    let slowest = tvl
        .transverse_exponents()
        .iter()
        .map(|e| e.re.abs())
        .fold(f64::INFINITY, f64::min);
    let rel = (metrics.fitted_decay_rate - slowest).abs() / slowest;
    let pass = metrics.final_distance < 1e-4 && metrics.monotone_after_first_period && rel <= 0.25;
    report(
        8,
        "nonlinear orbital convergence",
        pass,
        &format!(
            "final ‖z⊥‖ {:.2e}, monotone {}, fitted rate {:.4} vs slowest exponent {slowest:.4} (rel {rel:.3})",
            metrics.final_distance, metrics.monotone_after_first_period, metrics.fitted_decay_rate
        ),
    );
}

#[test]
fn criterion_09_growth_heuristic_limitation() {
    let mut ok = true;
    let mut parts = vec![];
    for a in [0.5, 1.0, 2.0] {
        let (sys, orbit) = bh_circle(a).unwrap();
        let cmp = comparison_system(&sys, &orbit, GRID).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
        let gain = analytic_example_gain(a, GRID).unwrap();
        let alpha = max_drift_norm(&cmp);
        let est = estimate_growth_constants(&cmp, Some(&gain), Closure::GainTimesOmega, alpha, 2).unwrap();
        let av = andronov_vitt_verdict(&closed_loop_spectrum(&tvl, Some(&gain), Closure::Direct).unwrap());
        let lemma = comparison_verdict(&cmp, &gain).unwrap();
        ok &= !est.condition_holds && av == Verdict::OrbitallyStable && lemma == Verdict::OrbitallyStable;
        parts.push(format!(
            "a={a}: holds {} (λ_M {:.1e}, C {:.3}), verdicts {av:?}/{lemma:?}",
            est.condition_holds, est.lambda_m, est.c
        ));
    }
    report(9, "growth heuristic fails for a stabilizing gain", ok, &parts.join("; "));
}

#[test]
fn criterion_10_general_tvl_equivalence() {
    let (sys, orbit) = bh_circle(1.0).unwrap();
    let tvl = tvl_orthogonal(&sys, &orbit, GRID).unwrap();
    let general = tvl_general(&TransverseCoordinateMap::excessive_z(&orbit), &sys, GRID).unwrap();
    let c0 = tvl.constraint_at(orbit.s0()).unwrap();
    let gain = analytic_example_gain(1.0, GRID).unwrap();
    let mut diff: f64 = 0.0;
    for g in [None, Some(&gain)] {
        let m_orth = restricted_monodromy(&monodromy(&tvl, g, Closure::Direct).unwrap(), &c0);
        let m_gen = restricted_monodromy(&monodromy(&general, g, Closure::Direct).unwrap(), &c0);
        diff = diff.max((m_orth - m_gen).amax());
    }

    let minimal = minimal_tvl(&bh_minimal_coordinates(1.0, &orbit), &sys, GRID).unwrap();
    let normal = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let input = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let mut drift: f64 = 0.0;
    let mut inp: f64 = 0.0;
    for (a, b) in minimal.a_samples().iter().zip(minimal.b_samples()) {
        drift = drift.max((a - &normal).amax());
        inp = inp.max((b - &input).amax());
    }
    // the right inverse used by both constructions
    let fr = frame_at(&sys, &orbit, 0.3).unwrap();
    let pi = DMatrix::from_row_slice(2, 3, &[0.3f64.sin(), 0.3f64.cos(), -1.0, 0.0, 0.0, 1.0]);
    let dag = pi_dagger(&pi, &fr.omega).unwrap();
    let right = (&pi * dag - DMatrix::identity(2, 2)).amax();
    report(
        10,
        "general and minimal transverse linearizations",
        diff < 1e-6 && drift < 1e-6 && inp < 1e-6 && right < 1e-12,
        &format!(
            "restricted monodromy diff {diff:.2e}, minimal drift dev {drift:.2e}, input dev {inp:.2e}, ΠΠ† dev {right:.1e}"
        ),
    );
}
