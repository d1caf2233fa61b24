//! Periodic Riccati synthesis of feedback gains.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::interp::{periodic_derivative, MatrixSpline};
use crate::linalg;
use crate::ode::{integrate, OdeOptions};
use crate::plin::PeriodicLinearSystem;
use crate::{periodic_grid, systems, Error, Result};

/// Sampled periodic gain `K(s)` (`m×k`), interpolated by periodic cubic splines.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    s_grid: Vec<f64>,
    k_samples: Vec<DMatrix<f64>>,
    spline: MatrixSpline,
}

impl GainSchedule {
    pub fn new(s_grid: Vec<f64>, k_samples: Vec<DMatrix<f64>>) -> Result<Self> {
        if s_grid.len() != k_samples.len() || s_grid.len() < 4 {
            return Err(Error::invalid("gain needs at least 4 samples matching the grid"));
        }
        if k_samples.iter().any(|k| k.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("gain samples must be finite"));
        }
        let gap = (&k_samples[0] - &k_samples[k_samples.len() - 1]).abs().max();
        if gap > 1e-9 * k_samples[0].abs().max().max(1.0) {
            return Err(Error::invalid(format!("gain samples are not periodic (gap {gap:e})")));
        }
        let spline = MatrixSpline::new(&s_grid, &k_samples)?;
        Ok(Self {
            s_grid,
            k_samples,
            spline,
        })
    }

    /// Samples `gain(s)` on a closed grid.
    pub fn from_fn<F>(s_grid: Vec<f64>, gain: F) -> Result<Self>
    where
        F: Fn(f64) -> DMatrix<f64>,
    {
        let samples = s_grid.iter().map(|&s| gain(s)).collect();
        Self::new(s_grid, samples)
    }

    pub fn eval(&self, s: f64) -> DMatrix<f64> {
        self.spline.eval(s)
    }

    pub fn grid(&self) -> &[f64] {
        &self.s_grid
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.k_samples
    }

    pub fn period(&self) -> f64 {
        self.s_grid[self.s_grid.len() - 1] - self.s_grid[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.k_samples[0].shape()
    }

    /// CSV with header `s,K[0][0],K[0][1],…` and one row per grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (m, k) = self.shape();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["s".to_string()];
        for i in 0..m {
            for j in 0..k {
                header.push(format!("K[{i}][{j}]"));
            }
        }
        w.write_record(&header)?;
        for (s, km) in self.s_grid.iter().zip(&self.k_samples) {
            let mut row = vec![format_float(*s)];
            for i in 0..m {
                for j in 0..k {
                    row.push(format_float(km[(i, j)]));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let mut m = 0;
        let mut k = 0;
        for name in header.iter().skip(1) {
            let inner = name
                .strip_prefix("K[")
                .and_then(|rest| rest.strip_suffix(']'))
                .ok_or_else(|| Error::invalid(format!("unexpected gain column {name}")))?;
            let (i, j) = inner
                .split_once("][")
                .ok_or_else(|| Error::invalid(format!("unexpected gain column {name}")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("bad index in {name}")));
            m = m.max(parse(i)? + 1);
            k = k.max(parse(j)? + 1);
        }
        if header.get(0) != Some("s") || m * k + 1 != header.len() {
            return Err(Error::invalid("gain CSV header must be s followed by K[i][j] columns"));
        }
        let (mut grid, mut samples) = (vec![], vec![]);
        for record in r.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number {v}"))))
                .collect::<Result<Vec<_>>>()?;
            grid.push(values[0]);
            samples.push(DMatrix::from_row_slice(m, k, &values[1..]));
        }
        Self::new(grid, samples)
    }
}

/// Shortest decimal that round-trips (Rust's `Display` for `f64`).
fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// State and input weights of the quadratic cost.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiWeights {
    pub q: DMatrix<f64>,
    pub rw: DMatrix<f64>,
}

impl RiccatiWeights {
    pub fn identity(k: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(k, k),
            rw: DMatrix::identity(m, m),
        }
    }

    pub fn diagonal(q: &[f64], rw: &[f64]) -> Result<Self> {
        if q.iter().any(|v| !(*v >= 0.0)) || rw.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("Q must be non-negative and Rw positive"));
        }
        Ok(Self {
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            rw: DMatrix::from_diagonal(&DVector::from_column_slice(rw)),
        })
    }

    fn check(&self, k: usize, m: usize) -> Result<DMatrix<f64>> {
        if self.q.shape() != (k, k) || self.rw.shape() != (m, m) {
            return Err(Error::invalid(format!(
                "weights must be {k}×{k} and {m}×{m}"
            )));
        }
        linalg::inverse(&self.rw, "Rw")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    pub s_grid: Vec<f64>,
    pub r_samples: Vec<DMatrix<f64>>,
    /// Unprojected equation residual over the grid.
    pub residual_max: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub periodicity_gap: f64,
}

/// Right-hand side `dR/ds` of the periodic Riccati equation in the
/// parameter domain.
fn prde_rate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rho: f64,
    q: &DMatrix<f64>,
    rw_inv: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let rb = r * b;
    -(a.transpose() * r + r * a + q - &rb * rw_inv * rb.transpose()) / rho
}

pub const DEFAULT_MAX_SWEEPS: usize = 200;
const GAP_TOLERANCE: f64 = 1e-8;
const BLOW_UP: f64 = 1e12;

/// Periodic solution of `Ṙ + AᵀR + RA + Q − RBRw⁻¹BᵀR = 0` by repeated
/// backward sweeps over one period.
pub fn solve_prde(plin: &PeriodicLinearSystem, weights: &RiccatiWeights, max_sweeps: usize) -> Result<RiccatiSolution> {
    let k = plin.dim();
    let rw_inv = weights.check(k, plin.input_dim())?;
    let grid = plin.grid().to_vec();
    let backward: Vec<f64> = grid.iter().rev().copied().collect();
    let end = backward[0];
    let opts = OdeOptions::default();
    let mut r_end = DMatrix::identity(k, k) * (1.0 + linalg::spectral_norm(&weights.q));
    let mut gap = f64::INFINITY;
    for sweep in 1..=max_sweeps.max(1) {
        let rhs = |s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
            let r = DMatrix::from_column_slice(k, k, y.as_slice());
            let dr = prde_rate(&plin.a_at(s), &plin.b_at(s), plin.rho_at(s), &weights.q, &rw_inv, &r);
            Ok(DVector::from_column_slice(linalg::symmetrize(&dr).as_slice()))
        };
        let mut guard = |s: f64, y: &mut DVector<f64>| -> Result<()> {
            if y.iter().any(|v| !v.is_finite()) || y.amax() > BLOW_UP {
                return Err(Error::BlowUp { s });
            }
            Ok(())
        };
        let start = DVector::from_column_slice(r_end.as_slice());
        let states = integrate(rhs, end, &start, &backward, &opts, Some(&mut guard)).map_err(|e| match e {
            Error::IntegrationFailure { t, .. } => Error::BlowUp { s: t },
            other => other,
        })?;
        let mut samples: Vec<DMatrix<f64>> = states
            .iter()
            .rev()
            .map(|y| linalg::symmetrize(&DMatrix::from_column_slice(k, k, y.as_slice())))
            .collect();
        let r0 = samples[0].clone();
        gap = (&r0 - &r_end).norm();
        if gap < GAP_TOLERANCE {
            let last = samples.len() - 1;
            samples[last] = r0;
            let residual_max = prde_residual(&samples, plin, weights, false)?;
            return Ok(RiccatiSolution {
                s_grid: grid,
                r_samples: samples,
                residual_max,
                converged: true,
                sweeps: sweep,
                periodicity_gap: gap,
            });
        }
        r_end = r0;
    }
    Err(Error::NotConverged {
        sweeps: max_sweeps,
        gap,
    })
}

/// `K(s) = −Rw⁻¹Bᵀ(s)R(s)` on the solution grid.
pub fn gain_from_riccati(
    sol: &RiccatiSolution,
    plin: &PeriodicLinearSystem,
    weights: &RiccatiWeights,
) -> Result<GainSchedule> {
    if plin.grid() != sol.s_grid.as_slice() {
        return Err(Error::invalid("Riccati solution and system grids differ"));
    }
    let rw_inv = weights.check(plin.dim(), plin.input_dim())?;
    let samples = sol
        .r_samples
        .iter()
        .zip(plin.b_samples())
        .map(|(r, b)| -(&rw_inv * b.transpose() * r))
        .collect();
    GainSchedule::new(sol.s_grid.clone(), samples)
}

/// Largest Frobenius norm over the grid of the Riccati residual in the time
/// domain, `ρR' + AᵀR + RA + Q − RBRw⁻¹BᵀR`, optionally sandwiched as
/// `Pᵀ[…]P` with the system's projector. `R'` is a spectral derivative of the samples.
pub fn prde_residual(
    r_samples: &[DMatrix<f64>],
    plin: &PeriodicLinearSystem,
    weights: &RiccatiWeights,
    projected: bool,
) -> Result<f64> {
    if r_samples.len() != plin.grid().len() {
        return Err(Error::invalid("R samples do not match the system grid"));
    }
    let rw_inv = weights.check(plin.dim(), plin.input_dim())?;
    let rates = periodic_derivative(plin.grid(), r_samples)?;
    let projectors = if projected {
        Some(
            plin.projector_samples()
                .ok_or_else(|| Error::invalid("projected residual needs a system with a projector"))?,
        )
    } else {
        None
    };
    let mut worst: f64 = 0.0;
    for i in 0..r_samples.len() {
        let r = &r_samples[i];
        let a = &plin.a_samples()[i];
        let rb = r * &plin.b_samples()[i];
        let mut res = &rates[i] * plin.rho_samples()[i] + a.transpose() * r + r * a + &weights.q
            - &rb * &rw_inv * rb.transpose();
        if let Some(p) = projectors {
            res = p[i].transpose() * res * &p[i];
        }
        worst = worst.max(res.norm());
    }
    Ok(worst)
}

/// The closed-form gain `K(s) = −[sin s, cos s, 1]` of the `bh-circle` example.
pub fn analytic_example_gain(a: f64, grid_size: usize) -> Result<GainSchedule> {
    if !(a > 0.0) {
        return Err(Error::invalid("a must be positive"));
    }
    GainSchedule::from_fn(periodic_grid(0.0, std::f64::consts::TAU, grid_size), systems::bh_analytic_gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;
    use crate::transverse::{comparison_system, tvl_orthogonal};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn scalar(a: f64, b: f64) -> PeriodicLinearSystem {
        let grid = periodic_grid(0.0, 1.0, 32);
        let n = grid.len();
        PeriodicLinearSystem::new(
            grid,
            vec![DMatrix::from_element(1, 1, a); n],
            vec![DMatrix::from_element(1, 1, b); n],
            vec![1.0; n],
        )
        .unwrap()
    }

    #[test]
    fn scalar_riccati_matches_algebraic_solution() {
        let p = scalar(1.0, 1.0);
        let w = RiccatiWeights::identity(1, 1);
        let sol = solve_prde(&p, &w, DEFAULT_MAX_SWEEPS).unwrap();
        let r = 1.0 + 2.0_f64.sqrt();
        for rs in &sol.r_samples {
            assert!((rs[(0, 0)] - r).abs() < 1e-8);
        }
        let k = gain_from_riccati(&sol, &p, &w).unwrap();
        assert!((k.eval(0.37)[(0, 0)] + r).abs() < 1e-8);
        assert!(sol.residual_max < 1e-6);
    }

    #[test]
    fn zero_weight_on_stable_dynamics_gives_zero() {
        let p = scalar(-1.0, 1.0);
        let w = RiccatiWeights::diagonal(&[0.0], &[1.0]).unwrap();
        let sol = solve_prde(&p, &w, DEFAULT_MAX_SWEEPS).unwrap();
        assert!(sol.r_samples.iter().all(|r| r.norm() < 1e-8));
        let k = gain_from_riccati(&sol, &p, &w).unwrap();
        assert!(k.samples().iter().all(|k| k.norm() < 1e-8));
    }

    #[test]
    fn unstabilizable_pair_does_not_converge() {
        let p = scalar(1.0, 0.0);
        let w = RiccatiWeights::identity(1, 1);
        let err = solve_prde(&p, &w, 20).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. } | Error::BlowUp { .. }), "{err:?}");
    }

    #[test]
    fn closed_form_family_solves_projected_equation() {
        let a = 1.0;
        let (sys, orbit) = systems::bh_circle(a).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 128).unwrap();
        let w = RiccatiWeights::identity(3, 1);
        for (k, i, j) in [(0.0, 0, 0), (0.7, 0, 1), (-1.3, 1, 1)] {
            let samples: Vec<_> = tvl.grid().iter().map(|&s| systems::bh_riccati_family(a, k, i, j, s)).collect();
            let res = prde_residual(&samples, &tvl, &w, true).unwrap();
            assert!(res < 1e-7, "k={k} i={i} j={j}: {res}");
        }
        let mut samples: Vec<_> = tvl.grid().iter().map(|&s| systems::bh_riccati_family(a, 0.0, 0, 0, s)).collect();
        for (n, r) in samples.iter_mut().enumerate() {
            r[(0, 1)] += 0.3 * (tvl.grid()[n]).cos();
            r[(1, 0)] = r[(0, 1)];
        }
        assert!(prde_residual(&samples, &tvl, &w, true).unwrap() > 0.1);
    }

    #[test]
    fn analytic_gain_annihilates_tangent() {
        let (_, orbit) = systems::bh_circle(2.0).unwrap();
        let k = analytic_example_gain(2.0, 64).unwrap();
        for s in [0.0, 0.9, 3.3] {
            assert!((k.eval(s) * orbit.tangent(s).unwrap()).norm() < 1e-7);
        }
    }

    #[test]
    fn comparison_riccati_self_consistent() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let cmp = comparison_system(&sys, &orbit, 256).unwrap();
        let w = RiccatiWeights::identity(3, 1);
        let sol = solve_prde(&cmp, &w, DEFAULT_MAX_SWEEPS).unwrap();
        assert!(sol.converged);
        assert!(sol.residual_max < 1e-6, "{}", sol.residual_max);
        assert!(sol.periodicity_gap < 1e-8);
        for r in &sol.r_samples {
            assert!((r - r.transpose()).norm() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn gain_csv_round_trip(size in 5usize..30, amp in -5.0f64..5.0) {
            let grid = periodic_grid(0.0, TAU, size);
            let g = GainSchedule::from_fn(grid, |s| DMatrix::from_row_slice(2, 2, &[amp * s.sin(), 1.0 / 3.0, s.cos(), amp])).unwrap();
            let mut buf = Vec::new();
            g.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            prop_assert!(text.starts_with("s,K[0][0],K[0][1],K[1][0],K[1][1]\n"));
            let back = GainSchedule::read_csv(buf.as_slice()).unwrap();
            for (x, y) in back.samples().iter().zip(g.samples()) {
                prop_assert_eq!(x, y);
            }
        }
    }
}
