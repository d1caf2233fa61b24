//! Monodromy matrices, characteristic exponents and stability verdicts.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynsys::{ControlAffineSystem, OrbitParameterization};
use crate::linalg;
use crate::ode::{integrate, OdeOptions};
use crate::plin::PeriodicLinearSystem;
use crate::projection::frame_at;
use crate::riccati::GainSchedule;
use crate::transverse::{a_perp_orthogonal, b_perp};
use crate::{periodic_grid, Error, Result};

/// How a gain `K(s)` closes the loop on a periodic linear system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// `A + BK`.
    Direct,
    /// `A + BKP`, with `P` the system's projector (`Ω` for the orbit systems).
    GainTimesOmega,
}

/// Default absolute tolerance on a structural zero exponent.
pub const ZERO_TOLERANCE: f64 = 1e-6;

/// Closed-loop drift at `s` (time domain).
pub fn closed_loop_matrix(
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
    s: f64,
) -> Result<DMatrix<f64>> {
    let a = plin.a_at(s);
    let Some(gain) = gain else {
        return Ok(a);
    };
    let k = gain.eval(s);
    if k.shape() != (plin.input_dim(), plin.dim()) {
        return Err(Error::invalid(format!(
            "gain is {}×{}, system needs {}×{}",
            k.nrows(),
            k.ncols(),
            plin.input_dim(),
            plin.dim()
        )));
    }
    let b = plin.b_at(s);
    match closure {
        Closure::Direct => Ok(a + b * k),
        Closure::GainTimesOmega => {
            let p = plin
                .projector_at(s)
                .ok_or_else(|| Error::invalid("closure K·Ω needs a system with a projector"))?;
            Ok(a + b * k * p)
        }
    }
}

fn check_gain(plin: &PeriodicLinearSystem, gain: Option<&GainSchedule>) -> Result<()> {
    if let Some(g) = gain {
        if (g.period() - plin.period()).abs() > 1e-9 * plin.period().max(1.0) {
            return Err(Error::invalid("gain and system periods differ"));
        }
    }
    Ok(())
}

/// State transition matrix over one period of the parameter,
/// `dX/ds = A_cl(s)X/ρ(s)`, `X(s0) = I`, one column per thread.
pub fn monodromy(plin: &PeriodicLinearSystem, gain: Option<&GainSchedule>, closure: Closure) -> Result<DMatrix<f64>> {
    check_gain(plin, gain)?;
    let k = plin.dim();
    let s0 = plin.s0();
    let end = s0 + plin.period();
    let opts = OdeOptions::default();
    let columns: Vec<Result<DVector<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .map(|j| {
                scope.spawn(move || {
                    let rhs = |s: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
                        Ok(closed_loop_matrix(plin, gain, closure, s)? * x / plin.rho_at(s))
                    };
                    let e = DVector::from_fn(k, |i, _| if i == j { 1.0 } else { 0.0 });
                    integrate(rhs, s0, &e, &[end], &opts, None).map(|mut v| v.remove(0))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("monodromy worker panicked"))))
            .collect()
    });
    let cols = columns.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Fundamental matrices `X(s_i)` with `X(s0) = I` at increasing parameter
/// values, together with the elapsed time `t(s_i) = ∫ ds/ρ`.
pub fn fundamental_matrices(
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
    outputs: &[f64],
) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    check_gain(plin, gain)?;
    let k = plin.dim();
    let rhs = |s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let x = DMatrix::from_column_slice(k, k, &y.as_slice()[..k * k]);
        let rho = plin.rho_at(s);
        let dx = closed_loop_matrix(plin, gain, closure, s)? * x / rho;
        let mut out = DVector::zeros(k * k + 1);
        out.as_mut_slice()[..k * k].copy_from_slice(dx.as_slice());
        out[k * k] = 1.0 / rho;
        Ok(out)
    };
    let mut y0 = DVector::zeros(k * k + 1);
    for i in 0..k {
        y0[i * k + i] = 1.0;
    }
    let states = integrate(rhs, plin.s0(), &y0, outputs, &OdeOptions::default(), None)?;
    let mats = states
        .iter()
        .map(|y| DMatrix::from_column_slice(k, k, &y.as_slice()[..k * k]))
        .collect();
    let times = states.iter().map(|y| y[k * k]).collect();
    Ok((mats, times))
}

/// Characteristic multipliers and exponents of a monodromy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloquetSpectrum {
    /// Sorted by descending magnitude.
    pub multipliers: Vec<Complex64>,
    /// `Log(μ)/T` on the principal branch, in the order of `multipliers`;
    /// negative real multipliers alternate between `±iπ/T`.
    pub exponents: Vec<Complex64>,
    /// Duration of one lap, `∫ ds/ρ`.
    pub period_time: f64,
    /// Index of the multiplier within `zero_tolerance` of 1, if any.
    pub zero_exponent_index: Option<usize>,
    pub zero_tolerance: f64,
}

impl FloquetSpectrum {
    pub fn real_parts(&self) -> Vec<f64> {
        self.exponents.iter().map(|e| e.re).collect()
    }

    /// Largest real part among all exponents.
    pub fn max_real_part(&self) -> f64 {
        self.exponents.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum of the exponents' real parts.
    pub fn exponent_sum(&self) -> f64 {
        self.exponents.iter().map(|e| e.re).sum()
    }

    /// Exponents other than the structural zero.
    pub fn transverse_exponents(&self) -> Vec<Complex64> {
        self.exponents
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != self.zero_exponent_index)
            .map(|(_, e)| *e)
            .collect()
    }
}

pub fn spectrum(monodromy: &DMatrix<f64>, period_time: f64) -> FloquetSpectrum {
    spectrum_with_tolerance(monodromy, period_time, ZERO_TOLERANCE)
}

pub fn spectrum_with_tolerance(monodromy: &DMatrix<f64>, period_time: f64, zero_tolerance: f64) -> FloquetSpectrum {
    let mut multipliers: Vec<Complex64> = monodromy.complex_eigenvalues().iter().copied().collect();
    multipliers.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    let mut exponents: Vec<Complex64> = multipliers.iter().map(|m| m.ln() / period_time).collect();
    // negative real multipliers sit on the branch cut; pair them as ±iπ/T
    let mut upper = true;
    for (m, e) in multipliers.iter().zip(exponents.iter_mut()) {
        if m.re < 0.0 && m.im.abs() <= 1e-9 * m.norm() {
            let half_turn = std::f64::consts::PI / period_time;
            e.im = if upper { half_turn } else { -half_turn };
            upper = !upper;
        }
    }
    let zero_exponent_index = multipliers
        .iter()
        .enumerate()
        .map(|(i, m)| (i, (m - 1.0).norm()))
        .filter(|(_, d)| *d < zero_tolerance)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    FloquetSpectrum {
        multipliers,
        exponents,
        period_time,
        zero_exponent_index,
        zero_tolerance,
    }
}

/// Monodromy followed by [`spectrum`], with the lap duration of `plin`.
pub fn closed_loop_spectrum(
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
) -> Result<FloquetSpectrum> {
    let m = monodromy(plin, gain, closure)?;
    Ok(spectrum(&m, plin.time_period()))
}

/// `VᵀMV` for an orthonormal basis `V` of `ker C`.
pub fn restricted_monodromy(monodromy: &DMatrix<f64>, constraint: &DMatrix<f64>) -> DMatrix<f64> {
    let v = linalg::null_space(constraint, 1e-9);
    v.transpose() * monodromy * v
}

/// The multiplier closest to 1 and a unit eigenvector for it.
#[derive(Debug, Clone, Serialize)]
pub struct UnitMultiplier {
    pub multiplier: Complex64,
    pub distance: f64,
    pub eigenvector: DVector<f64>,
}

pub fn unit_multiplier(monodromy: &DMatrix<f64>) -> UnitMultiplier {
    let mu = monodromy
        .complex_eigenvalues()
        .iter()
        .copied()
        .min_by(|a, b| (a - 1.0).norm().total_cmp(&(b - 1.0).norm()))
        .unwrap_or(Complex64::new(f64::NAN, 0.0));
    let k = monodromy.nrows();
    let shifted = monodromy - DMatrix::identity(k, k) * mu.re;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.unwrap_or_else(|| DMatrix::identity(k, k));
    let idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let v = v_t.row(idx).transpose().into_owned();
    UnitMultiplier {
        multiplier: mu,
        distance: (mu - 1.0).norm(),
        eigenvector: v.normalize(),
    }
}

/// `|cos ∠(u, v)|`.
pub fn alignment(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    (u.dot(v) / (u.norm() * v.norm())).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    OrbitallyStable,
    Inconclusive,
    Unstable,
}

/// One simple zero exponent and all others strictly negative: stable.
/// Any exponent with positive real part: unstable. Otherwise inconclusive.
pub fn andronov_vitt_verdict(spec: &FloquetSpectrum) -> Verdict {
    verdict_from_real_parts(&spec.real_parts(), spec.zero_tolerance)
}

pub fn verdict_from_real_parts(real_parts: &[f64], tol: f64) -> Verdict {
    if real_parts.iter().any(|r| *r > tol) {
        return Verdict::Unstable;
    }
    let zeros = real_parts.iter().filter(|r| r.abs() <= tol).count();
    let negative = real_parts.iter().filter(|r| **r < -tol).count();
    if zeros == 1 && negative + 1 == real_parts.len() {
        Verdict::OrbitallyStable
    } else {
        Verdict::Inconclusive
    }
}

/// Verdict for the comparison system closed with `v = KΩw`: the same rule
/// applied to its spectrum, which carries the orbit's zero exponent.
pub fn comparison_verdict(comparison: &PeriodicLinearSystem, gain: &GainSchedule) -> Result<Verdict> {
    let spec = closed_loop_spectrum(comparison, Some(gain), Closure::GainTimesOmega)?;
    Ok(andronov_vitt_verdict(&spec))
}

/// `∮ Tr(A_cl(s))/ρ(s) ds`, the sum of the characteristic exponents times the lap duration.
pub fn trace_integral(plin: &PeriodicLinearSystem, gain: Option<&GainSchedule>, closure: Closure) -> Result<f64> {
    let grid = plin.grid();
    let mut values = Vec::with_capacity(grid.len());
    for (i, &s) in grid.iter().enumerate() {
        let a = match gain {
            None => plin.a_samples()[i].clone(),
            Some(_) => closed_loop_matrix(plin, gain, closure, s)?,
        };
        values.push(a.trace() / plin.rho_samples()[i]);
    }
    Ok(trapezoid(grid, &values))
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(s, v)| 0.5 * (s[1] - s[0]) * (v[0] + v[1]))
        .sum()
}

/// Period integrals of the traces of three closed loops sharing one exponent sum.
#[derive(Debug, Clone, Serialize)]
pub struct TraceSumReport {
    /// `A⊥ + B⊥K`.
    pub transverse: f64,
    /// `A + BKΩ`.
    pub first_approximation: f64,
    /// `ΩA + ΩBKΩ`.
    pub comparison: f64,
    pub max_difference: f64,
    /// `∮ (x_s'ᵀAx_s'/‖x_s'‖²)/ρ ds`.
    pub vanishing_term: f64,
    /// `ln‖ẋ_s(s0)‖ − ln‖ẋ_s(s0 + s_T)‖`.
    pub log_speed_change: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn exponent_sum_check<G>(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    gain: G,
    grid_size: usize,
) -> Result<TraceSumReport>
where
    G: Fn(f64) -> DMatrix<f64>,
{
    if grid_size < 8 {
        return Err(Error::invalid("grid needs at least 8 points"));
    }
    let grid = periodic_grid(orbit.s0(), orbit.period(), grid_size);
    let (mut tr_perp, mut tr_first, mut tr_cmp, mut vanishing) = (vec![], vec![], vec![], vec![]);
    for &s in &grid {
        let fr = frame_at(system, orbit, s)?;
        let a = crate::dynsys::a_matrix(system, orbit, &fr, s, true)?;
        let b = system.input_matrix(&fr.x_on_orbit);
        let k = gain(s);
        let bp = b_perp(system, &fr);
        let ap = a_perp_orthogonal(system, orbit, &fr, s)?;
        let t = &fr.tangent;
        tr_perp.push((ap + &bp * &k).trace() / fr.rho);
        tr_first.push((&a + &b * &k * &fr.omega).trace() / fr.rho);
        tr_cmp.push((&fr.omega * &a + &bp * &k * &fr.omega).trace() / fr.rho);
        vanishing.push((t.transpose() * &a * t)[0] / t.norm_squared() / fr.rho);
    }
    let transverse = trapezoid(&grid, &tr_perp);
    let first_approximation = trapezoid(&grid, &tr_first);
    let comparison = trapezoid(&grid, &tr_cmp);
    let max_difference = (transverse - first_approximation)
        .abs()
        .max((transverse - comparison).abs())
        .max((first_approximation - comparison).abs());
    let speed = |s: f64| system.nominal_velocity(&orbit.point(s), s).norm().ln();
    let tolerance = 1e-6 * orbit.period();
    let vanishing_term = trapezoid(&grid, &vanishing);
    Ok(TraceSumReport {
        transverse,
        first_approximation,
        comparison,
        max_difference,
        vanishing_term,
        log_speed_change: speed(orbit.s0()) - speed(orbit.s0() + orbit.period()),
        tolerance,
        passed: max_difference < tolerance && vanishing_term.abs() < 1e-8,
    })
}

/// Result of the grid heuristic for the constants of the growth bound
/// `‖W(t)W(τ)⁻¹‖ ≤ C e^{λ_M (t−τ)}`.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthEstimate {
    pub c: f64,
    pub lambda_m: f64,
    pub alpha: f64,
    /// `λ_M < −Cα`.
    pub condition_holds: bool,
    /// Always true: `C` is a grid maximum with constant rate, not a certified bound.
    pub heuristic: bool,
}

/// Largest spectral norm of the drift samples, a default for `α`.
pub fn max_drift_norm(plin: &PeriodicLinearSystem) -> f64 {
    plin.a_samples().iter().map(linalg::spectral_norm).fold(0.0, f64::max)
}

/// Estimates `C` over `τ` in one period and `t − τ` up to `horizon_periods`
/// laps, with `λ_M` the largest real exponent of the closed loop.
pub fn estimate_growth_constants(
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
    alpha: f64,
    horizon_periods: usize,
) -> Result<GrowthEstimate> {
    const PER_PERIOD: usize = 64;
    if horizon_periods == 0 {
        return Err(Error::invalid("horizon must span at least one period"));
    }
    let lambda_m = closed_loop_spectrum(plin, gain, closure)?.max_real_part();
    let total = PER_PERIOD * (horizon_periods + 1);
    let step = plin.period() / PER_PERIOD as f64;
    let outputs: Vec<f64> = (0..=total).map(|i| plin.s0() + step * i as f64).collect();
    let (mats, times) = fundamental_matrices(plin, gain, closure, &outputs)?;
    let horizon_time = horizon_periods as f64 * plin.time_period();
    let mut c: f64 = 0.0;
    for i in 0..PER_PERIOD {
        let inv = linalg::inverse(&mats[i], "fundamental matrix")?;
        for j in i..mats.len() {
            let dt = times[j] - times[i];
            if dt > horizon_time * (1.0 + 1e-12) {
                break;
            }
            let norm = linalg::spectral_norm(&(&mats[j] * &inv));
            c = c.max(norm * (-lambda_m * dt).exp());
        }
    }
    Ok(GrowthEstimate {
        c,
        lambda_m,
        alpha,
        condition_holds: lambda_m < -c * alpha,
        heuristic: true,
    })
}
