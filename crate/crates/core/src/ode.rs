//! Adaptive Dormand–Prince 5(4) integrator.
//!
//! Steps are clipped so that every requested output abscissa is hit exactly,
//! which lets callers sample periodic quantities on a fixed grid without dense
//! output. Integration may run forward or backward in the independent variable.

use nalgebra::DVector;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest step magnitude; `f64::INFINITY` for no limit.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_max: f64::INFINITY,
            max_steps: 2_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// difference between the 5th and embedded 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = rhs(t, y)` from `t0`, returning the state at each entry of
/// `outputs` (monotone in the integration direction, first entry may equal `t0`).
///
/// `on_step` runs after every accepted step and may modify the state in
/// place (used for constraint re-projection).
pub fn integrate<F>(
    mut rhs: F,
    t0: f64,
    y0: &DVector<f64>,
    outputs: &[f64],
    opts: &OdeOptions,
    mut on_step: Option<&mut dyn FnMut(f64, &mut DVector<f64>) -> Result<()>>,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut results = Vec::with_capacity(outputs.len());
    let Some(&t_last) = outputs.last() else {
        return Ok(results);
    };
    let dir = if t_last >= t0 { 1.0 } else { -1.0 };

    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = rhs(t, &y)?;
    check_finite(t, &k1)?;
    let mut h = initial_step(&mut rhs, t, &y, &k1, dir, opts)?;
    let mut steps = 0usize;
    let mut err_prev = 1e-4_f64;

    for &target in outputs {
        if (target - t) * dir < 0.0 {
            return Err(Error::invalid("output abscissae must be monotone"));
        }
        while (target - t) * dir > 0.0 {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::IntegrationFailure {
                    t,
                    reason: "maximum step count exceeded".into(),
                });
            }
            let remaining = (target - t).abs();
            let proposed = h.abs().min(opts.h_max);
            let mut step = proposed.min(remaining);
            // avoid leaving a sliver before the output point
            if remaining - step < 1e-10 * remaining.max(1.0) {
                step = remaining;
            }
            let clipped = step < proposed;
            let hs = step * dir;
            if step <= 16.0 * f64::EPSILON * t.abs().max(1.0) && step < remaining {
                return Err(Error::IntegrationFailure {
                    t,
                    reason: "step size underflow".into(),
                });
            }

            let k2 = rhs(t + C2 * hs, &(&y + &k1 * (A21 * hs)))?;
            let k3 = rhs(t + C3 * hs, &(&y + (&k1 * A31 + &k2 * A32) * hs))?;
            let k4 = rhs(t + C4 * hs, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * hs))?;
            let k5 = rhs(
                t + C5 * hs,
                &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * hs),
            )?;
            let k6 = rhs(
                t + hs,
                &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * hs),
            )?;
            let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * hs;
            let t_new = if step == remaining { target } else { t + hs };
            let k7 = rhs(t_new, &y_new)?;
            let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * hs;

            let mut acc = 0.0;
            for i in 0..y.len() {
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                acc += (err_vec[i] / sc).powi(2);
            }
            let err = if y.is_empty() { 0.0 } else { (acc / y.len() as f64).sqrt() };

            if !err.is_finite() {
                h = step * 0.1;
                continue;
            }
            if err <= 1.0 {
                t = t_new;
                y = y_new;
                k1 = k7;
                if let Some(cb) = on_step.as_mut() {
                    cb(t, &mut y)?;
                    k1 = rhs(t, &y)?;
                }
                check_finite(t, &y)?;
                // PI step-size controller
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0)).clamp(0.2, 5.0)
                };
                err_prev = err.max(1e-4);
                h = if clipped { proposed } else { step * fac };
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                h = step * fac;
            }
        }
        results.push(y.clone());
    }
    Ok(results)
}

fn check_finite(t: f64, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure {
            t,
            reason: "non-finite state or derivative".into(),
        })
    }
}

fn initial_step<F>(
    rhs: &mut F,
    t0: f64,
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    dir: f64,
    opts: &OdeOptions,
) -> Result<f64>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = y0.len().max(1) as f64;
    let scale = |y: &DVector<f64>, v: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..y.len() {
            acc += (v[i] / (opts.atol + opts.rtol * y[i].abs())).powi(2);
        }
        (acc / n).sqrt()
    };
    let d0 = scale(y0, y0);
    let d1 = scale(y0, f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0 + f0 * (h0 * dir);
    let f1 = rhs(t0 + h0 * dir, &y1)?;
    let d2 = scale(y0, &(&f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(opts.h_max))
}
