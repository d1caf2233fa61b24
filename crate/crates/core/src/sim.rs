//! Closed-loop simulation of the nonlinear system and of its transverse linearization.

use std::cell::Cell;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynsys::{ControlAffineSystem, OrbitParameterization};
use crate::floquet::{closed_loop_matrix, Closure};
use crate::ode::{integrate, OdeOptions};
use crate::plin::PeriodicLinearSystem;
use crate::projection::{frame_at, project_lifted, Tube};
use crate::riccati::GainSchedule;
use crate::{periodic_grid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: String,
    pub message: String,
}

/// Sampled closed-loop motion with its transverse coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Projection parameter, unwrapped across period boundaries.
    pub s_values: Vec<f64>,
    pub z_norms: Vec<f64>,
    pub inputs: Vec<DVector<f64>>,
    /// `ρ(s)` at each sample.
    pub rho_values: Vec<f64>,
    /// Duration of one lap of the orbit.
    pub period_time: f64,
    pub events: Vec<SimEvent>,
}

impl SimulationTrace {
    fn empty(period_time: f64) -> Self {
        Self {
            times: vec![],
            states: vec![],
            s_values: vec![],
            z_norms: vec![],
            inputs: vec![],
            rho_values: vec![],
            period_time,
            events: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x_1..x_n,s,znorm,u_1..u_m`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("s".into());
        header.push("znorm".into());
        header.extend((1..=m).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![format!("{:?}", self.times[i])];
            row.extend(self.states[i].iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", self.s_values[i]));
            row.push(format!("{:?}", self.z_norms[i]));
            row.extend(self.inputs[i].iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest integration step in time.
    pub dt_max: f64,
    pub samples_per_period: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-11,
            dt_max: f64::INFINITY,
            samples_per_period: 64,
        }
    }
}

/// `∫ ds/ρ(s)` over one lap of the orbit.
pub fn orbit_period_time(system: &ControlAffineSystem, orbit: &OrbitParameterization, grid_size: usize) -> Result<f64> {
    let grid = periodic_grid(orbit.s0(), orbit.period(), grid_size.max(8));
    let mut inv = Vec::with_capacity(grid.len());
    for &s in &grid {
        inv.push(1.0 / frame_at(system, orbit, s)?.rho);
    }
    Ok(grid
        .windows(2)
        .zip(inv.windows(2))
        .map(|(s, r)| 0.5 * (s[1] - s[0]) * (r[0] + r[1]))
        .sum())
}

fn is_projection_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::ProjectionAmbiguous { .. } | Error::FocalPointReached { .. } | Error::NewtonDiverged { .. }
    )
}

/// Simulates `ẋ = f + g·K(p(x))(x − x_s(p(x)))` for `horizon_periods` laps.
///
/// The projection is seeded with the previous parameter value so `s(t)`
/// stays continuous. Leaving the tube (or losing the projection) ends the
/// run with [`Error::LeftTube`], carrying the trace up to that point.
pub fn simulate_closed_loop(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    gain: &GainSchedule,
    x0: &DVector<f64>,
    horizon_periods: usize,
    options: &SimOptions,
) -> Result<SimulationTrace> {
    if x0.len() != system.state_dim() {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    if horizon_periods == 0 || options.samples_per_period == 0 {
        return Err(Error::invalid("horizon and sampling must be positive"));
    }
    let period_time = orbit_period_time(system, orbit, 512)?;
    let tube = Tube::of(orbit)?;
    let mut trace = SimulationTrace::empty(period_time);

    let s_start = match project_lifted(orbit, x0, None) {
        Ok(s) => s,
        Err(e) if is_projection_failure(&e) => {
            trace.events.push(SimEvent {
                time: 0.0,
                kind: "left_tube".into(),
                message: e.to_string(),
            });
            return Err(Error::LeftTube {
                time: 0.0,
                trace: Box::new(trace),
            });
        }
        Err(e) => return Err(e),
    };
    let control = |x: &DVector<f64>, s: f64| -> (DVector<f64>, f64) {
        let z = x - orbit.point(s);
        let zn = z.norm();
        (gain.eval(orbit.wrap(s)) * z, zn)
    };
    let record = |trace: &mut SimulationTrace, t: f64, x: &DVector<f64>, s: f64| -> Result<f64> {
        let (u, zn) = control(x, s);
        trace.times.push(t);
        trace.states.push(x.clone());
        trace.s_values.push(s);
        trace.z_norms.push(zn);
        trace.inputs.push(u);
        trace.rho_values.push(frame_at(system, orbit, orbit.wrap(s))?.rho);
        Ok(zn)
    };
    let z0 = record(&mut trace, 0.0, x0, s_start)?;
    if z0 > tube.reach {
        trace.events.push(SimEvent {
            time: 0.0,
            kind: "left_tube".into(),
            message: format!("initial distance {z0} exceeds the tube reach {}", tube.reach),
        });
        return Err(Error::LeftTube {
            time: 0.0,
            trace: Box::new(trace),
        });
    }
    let mut warned = false;
    let mut warn = |trace: &mut SimulationTrace, t: f64, zn: f64| {
        if zn > tube.trusted && !warned {
            warned = true;
            trace.events.push(SimEvent {
                time: t,
                kind: "outside_trusted_tube".into(),
                message: format!("distance {zn} exceeds the trusted radius {}", tube.trusted),
            });
        }
    };
    warn(&mut trace, 0.0, z0);

    let opts = OdeOptions {
        rtol: options.rtol,
        atol: options.atol,
        h_max: options.dt_max,
        ..OdeOptions::default()
    };
    let dt = period_time / options.samples_per_period as f64;
    let samples = horizon_periods * options.samples_per_period;
    let hint = Cell::new(s_start);
    let mut x = x0.clone();
    for i in 1..=samples {
        let t0 = (i - 1) as f64 * dt;
        let t1 = i as f64 * dt;
        let rhs = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
            let s = project_lifted(orbit, y, Some(hint.get()))?;
            let (u, _) = control(y, s);
            Ok(system.velocity(y, &u))
        };
        let mut step = |t: f64, y: &mut DVector<f64>| -> Result<()> {
            let s = project_lifted(orbit, y, Some(hint.get()))?;
            let zn = (&*y - orbit.point(s)).norm();
            if zn > tube.reach {
                return Err(Error::LeftTube {
                    time: t,
                    trace: Box::new(SimulationTrace::empty(period_time)),
                });
            }
            hint.set(s);
            Ok(())
        };
        let out = integrate(rhs, t0, &x, &[t1], &opts, Some(&mut step));
        let next = match out {
            Ok(mut v) => v.remove(0),
            Err(e) if is_projection_failure(&e) || matches!(e, Error::LeftTube { .. }) => {
                trace.events.push(SimEvent {
                    time: t0,
                    kind: "left_tube".into(),
                    message: e.to_string(),
                });
                return Err(Error::LeftTube {
                    time: t0,
                    trace: Box::new(trace),
                });
            }
            Err(e) => return Err(e),
        };
        let s = project_lifted(orbit, &next, Some(hint.get()))?;
        hint.set(s);
        let zn = record(&mut trace, t1, &next, s)?;
        warn(&mut trace, t1, zn);
        x = next;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceMetrics {
    pub final_distance: f64,
    /// Rate `λ` of a least-squares fit `‖z⊥‖ ≈ c·e^{−λt}`.
    pub fitted_decay_rate: f64,
    /// `s(t_end) − s(t_0) − ∫ρ(s(σ))dσ`.
    pub phase_drift: f64,
    /// `‖z⊥‖` sampled once per period strictly decreases after the first period.
    pub monotone_after_first_period: bool,
    /// Samples at or below this distance count as converged and are left out of the fit.
    pub noise_floor: f64,
    pub fit_samples: usize,
}

/// Distances at or below this level are treated as numerically converged.
pub const NOISE_FLOOR: f64 = 1e-9;

/// Decay fit over the last half of the part of the trace above the noise
/// floor, final distance and phase drift.
pub fn orbital_convergence_metrics(trace: &SimulationTrace) -> Result<ConvergenceMetrics> {
    let n = trace.len();
    if n < 4 || trace.times[n - 1] - trace.times[0] < 3.0 * trace.period_time * (1.0 - 1e-9) {
        return Err(Error::InsufficientData("the trace must span at least three periods".into()));
    }
    let t0 = trace.times[0];
    let above: Vec<usize> = (0..n).filter(|&i| trace.z_norms[i] > NOISE_FLOOR).collect();
    let last_above = above.last().map_or(t0, |&i| trace.times[i]);
    let t_end = trace.times[n - 1];
    let horizon = if last_above < 0.5 * (t0 + t_end) { last_above } else { t_end };
    let t_mid = t0 + 0.5 * (horizon - t0);
    let window: Vec<usize> = above.into_iter().filter(|&i| trace.times[i] >= t_mid).collect();
    let fitted_decay_rate = if window.len() >= 2 {
        let xs: Vec<f64> = window.iter().map(|&i| trace.times[i]).collect();
        let ys: Vec<f64> = window.iter().map(|&i| trace.z_norms[i].ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        -sxy / sxx
    } else {
        f64::NAN
    };

    let mut per_period = vec![];
    let mut next = t0;
    for i in 0..n {
        if trace.times[i] >= next - 1e-9 * trace.period_time {
            per_period.push(trace.z_norms[i]);
            next += trace.period_time;
        }
    }
    let monotone_after_first_period = per_period
        .iter()
        .skip(1)
        .filter(|z| **z > NOISE_FLOOR)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1] < w[0]);

    let rho_integral: f64 = trace
        .times
        .windows(2)
        .zip(trace.rho_values.windows(2))
        .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
        .sum();
    Ok(ConvergenceMetrics {
        final_distance: trace.z_norms[n - 1],
        fitted_decay_rate,
        phase_drift: trace.s_values[n - 1] - trace.s_values[0] - rho_integral,
        monotone_after_first_period,
        noise_floor: NOISE_FLOOR,
        fit_samples: window.len(),
    })
}

/// Trajectory of the linear periodic system in the parameter domain.
#[derive(Debug, Clone, Serialize)]
pub struct LinearTrace {
    /// Parameter values (continuing past one period).
    pub s_values: Vec<f64>,
    /// Elapsed time `∫ ds/ρ`.
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Largest `‖Cδ‖` seen before re-projection.
    pub constraint_drift: f64,
    pub events: Vec<SimEvent>,
}

/// Integrates `dδ/ds = A_cl(s)δ/ρ(s)` over `periods` laps, sampling at the
/// system's grid. With a constraint, the state is re-projected after every
/// step and the largest constraint violation is reported.
pub fn simulate_linear(
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
    dz0: &DVector<f64>,
    periods: usize,
) -> Result<LinearTrace> {
    let k = plin.dim();
    if dz0.len() != k {
        return Err(Error::invalid("initial deviation has the wrong dimension"));
    }
    let period = plin.period();
    let s0 = plin.s0();
    let wrap = |s: f64| s0 + (s - s0).rem_euclid(period);
    let mut events = vec![];
    let mut start = dz0.clone();
    if let (Some(c), Some(p)) = (plin.constraint_at(s0), plin.projector_at(s0)) {
        let violation = (&c * dz0).norm();
        if violation > 1e-12 * (1.0 + dz0.norm()) {
            events.push(SimEvent {
                time: 0.0,
                kind: "projected_initial_state".into(),
                message: format!("initial constraint violation {violation:e} removed"),
            });
            start = p * dz0;
        }
    }
    let per: Vec<f64> = plin.grid()[1..].to_vec();
    let mut outputs = vec![];
    for lap in 0..periods {
        outputs.extend(per.iter().map(|s| s + lap as f64 * period));
    }
    let mut y0 = DVector::zeros(k + 1);
    y0.rows_mut(0, k).copy_from(&start);
    let rhs = |s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let sw = wrap(s);
        let rho = plin.rho_at(sw);
        let a = closed_loop_matrix(plin, gain, closure, sw)?;
        let mut out = DVector::zeros(k + 1);
        out.rows_mut(0, k).copy_from(&(a * y.rows(0, k) / rho));
        out[k] = 1.0 / rho;
        Ok(out)
    };
    let drift = Cell::new(0.0_f64);
    let constrained = plin.has_constraint();
    let mut reproject = |s: f64, y: &mut DVector<f64>| -> Result<()> {
        let sw = wrap(s);
        if let (Some(c), Some(p)) = (plin.constraint_at(sw), plin.projector_at(sw)) {
            let x: DVector<f64> = y.rows(0, k).into_owned();
            drift.set(drift.get().max((&c * &x).norm()));
            y.rows_mut(0, k).copy_from(&(p * x));
        }
        Ok(())
    };
    let states = integrate(
        rhs,
        s0,
        &y0,
        &outputs,
        &OdeOptions::default(),
        if constrained { Some(&mut reproject) } else { None },
    )?;
    let mut s_values = vec![s0];
    let mut times = vec![0.0];
    let mut xs = vec![start];
    for (s, y) in outputs.iter().zip(states) {
        s_values.push(*s);
        times.push(y[k]);
        xs.push(y.rows(0, k).into_owned());
    }
    Ok(LinearTrace {
        s_values,
        times,
        states: xs,
        constraint_drift: drift.get(),
        events,
    })
}

/// Shorthand for a constant gain matrix, mostly for tests and zero-input runs.
pub fn constant_gain(s_grid: Vec<f64>, k: DMatrix<f64>) -> Result<GainSchedule> {
    GainSchedule::from_fn(s_grid, |_| k.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::analytic_example_gain;
    use crate::systems;
    use crate::transverse::{transverse_frame, tvl_orthogonal};
    use std::f64::consts::TAU;

    #[test]
    fn on_orbit_start_stays_on_orbit() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let k = analytic_example_gain(1.0, 256).unwrap();
        let x0 = orbit.point(0.4);
        let trace = simulate_closed_loop(&sys, &orbit, &k, &x0, 3, &SimOptions::default()).unwrap();
        assert!(trace.z_norms.iter().all(|z| *z < 1e-9));
        assert!(trace.inputs.iter().all(|u| u.norm() < 1e-9));
        let m = orbital_convergence_metrics(&trace).unwrap();
        assert!(m.final_distance < 1e-9);
        assert!(m.phase_drift.abs() < 1e-6);
        for w in trace.s_values.windows(2) {
            assert!(w[1] > w[0] && w[1] - w[0] < TAU / 2.0);
        }
    }

    #[test]
    fn analytic_gain_decay_rate() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let k = analytic_example_gain(1.0, 512).unwrap();
        let x0 = DVector::from_vec(vec![1.1, 0.0, 0.0]);
        let trace = simulate_closed_loop(&sys, &orbit, &k, &x0, 6, &SimOptions::default()).unwrap();
        let m = orbital_convergence_metrics(&trace).unwrap();
        assert!((m.fitted_decay_rate - 1.0).abs() < 0.2, "{m:?}");
        for (x, (s, z)) in trace.states.iter().zip(trace.s_values.iter().zip(&trace.z_norms)) {
            let t = orbit.tangent(*s).unwrap();
            let zv = x - orbit.point(*s);
            assert!(t.dot(&zv).abs() < 1e-8 * (1.0 + x.norm()));
            assert!((zv.norm() - z).abs() < 1e-15);
        }
    }

    #[test]
    fn far_start_leaves_tube() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let k = analytic_example_gain(1.0, 64).unwrap();
        let x0 = DVector::from_vec(vec![5.0, 0.0, 2.0]);
        match simulate_closed_loop(&sys, &orbit, &k, &x0, 2, &SimOptions::default()) {
            Err(Error::LeftTube { time, trace }) => {
                assert_eq!(time, 0.0);
                assert_eq!(trace.len(), 1);
                assert_eq!(trace.events[0].kind, "left_tube");
            }
            other => panic!("expected LeftTube, got {other:?}"),
        }
    }

    #[test]
    fn short_trace_is_insufficient() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let k = analytic_example_gain(1.0, 64).unwrap();
        let trace = simulate_closed_loop(&sys, &orbit, &k, &orbit.point(0.0), 1, &SimOptions::default()).unwrap();
        assert!(matches!(orbital_convergence_metrics(&trace), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn csv_header() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let k = analytic_example_gain(1.0, 64).unwrap();
        let trace = simulate_closed_loop(&sys, &orbit, &k, &orbit.point(0.0), 1, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_1,x_2,x_3,s,znorm,u_1\n"));
        assert_eq!(text.lines().count(), trace.len() + 1);
    }

    #[test]
    fn linear_zero_start_and_constraint_drift() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 256).unwrap();
        let zero = simulate_linear(&tvl, None, Closure::Direct, &DVector::zeros(3), 1).unwrap();
        assert!(zero.states.iter().all(|x| x.norm() == 0.0));
        let frame = transverse_frame(&sys, &orbit, 256).unwrap();
        let dz0 = frame.bases[0].column(0).into_owned();
        let run = simulate_linear(&tvl, None, Closure::Direct, &dz0, 1).unwrap();
        assert!(run.constraint_drift < 1e-7, "{}", run.constraint_drift);
        assert!(run.events.is_empty());
        assert!((run.times.last().unwrap() - TAU).abs() < 1e-9);
    }

    #[test]
    fn linear_start_off_constraint_is_projected() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 64).unwrap();
        let run = simulate_linear(&tvl, None, Closure::Direct, &DVector::from_vec(vec![1.0, 0.0, 0.0]), 1).unwrap();
        assert_eq!(run.events.len(), 1);
        assert!(run.states[0].norm() < 1e-15);
    }
}
