//! Grid-sampled periodic linear systems `d/dt δ = A(s)δ + B(s)u` along an orbit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::interp::{MatrixSpline, PeriodicSpline};
use crate::{Error, Result};

/// Periodic linear system sampled on a closed grid of the orbit parameter.
///
/// Matrices are in the time domain; the parameter advances at `ds/dt = ρ(s)`,
/// so `d/ds δ = A(s)δ/ρ(s)`. Optional algebraic constraint rows `C(s)δ = 0`
/// come with a projector `P(s)` onto their kernel, used to suppress drift and
/// to form `K·P` gain closures.
#[derive(Debug, Clone)]
pub struct PeriodicLinearSystem {
    s_grid: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    constraint: Option<Vec<DMatrix<f64>>>,
    projector: Option<Vec<DMatrix<f64>>>,
    rho: Vec<f64>,
    a_spline: MatrixSpline,
    b_spline: MatrixSpline,
    constraint_spline: Option<MatrixSpline>,
    projector_spline: Option<MatrixSpline>,
    rho_spline: PeriodicSpline,
}

/// Tolerance on the agreement of the first and last samples.
const PERIODICITY_TOL: f64 = 1e-9;

impl PeriodicLinearSystem {
    pub fn new(
        s_grid: Vec<f64>,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        Self::build(s_grid, a, b, None, None, rho)
    }

    pub fn with_constraint(
        self,
        constraint: Vec<DMatrix<f64>>,
        projector: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        Self::build(self.s_grid, self.a, self.b, Some(constraint), Some(projector), self.rho)
    }

    /// Attaches a projector without declaring a constraint (the comparison
    /// system keeps `Ω(s)` for `K·Ω` closures).
    pub fn with_projector(self, projector: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::build(self.s_grid, self.a, self.b, self.constraint, Some(projector), self.rho)
    }

    fn build(
        s_grid: Vec<f64>,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        constraint: Option<Vec<DMatrix<f64>>>,
        projector: Option<Vec<DMatrix<f64>>>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        let n = s_grid.len();
        if a.len() != n || b.len() != n || rho.len() != n {
            return Err(Error::invalid("sample counts do not match the grid"));
        }
        let k = a[0].nrows();
        if a.iter().any(|m| m.shape() != (k, k)) || b.iter().any(|m| m.nrows() != k) {
            return Err(Error::invalid("drift must be square and input rows must match"));
        }
        if rho.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("rho must be positive on the whole grid"));
        }
        check_periodic("A", &a)?;
        check_periodic("B", &b)?;
        if (rho[0] - rho[n - 1]).abs() > PERIODICITY_TOL * rho[0].max(1.0) {
            return Err(Error::invalid("rho samples are not periodic"));
        }
        let a_spline = MatrixSpline::new(&s_grid, &a)?;
        let b_spline = MatrixSpline::new(&s_grid, &b)?;
        let constraint_spline = match &constraint {
            Some(c) => {
                if c.len() != n || c.iter().any(|m| m.ncols() != k) {
                    return Err(Error::invalid("constraint rows do not match the state"));
                }
                check_periodic("constraint", c)?;
                Some(MatrixSpline::new(&s_grid, c)?)
            }
            None => None,
        };
        let projector_spline = match &projector {
            Some(p) => {
                if p.len() != n || p.iter().any(|m| m.shape() != (k, k)) {
                    return Err(Error::invalid("projector samples do not match the state"));
                }
                check_periodic("projector", p)?;
                Some(MatrixSpline::new(&s_grid, p)?)
            }
            None => None,
        };
        let rho_spline = PeriodicSpline::new(&s_grid, &rho.iter().map(|r| vec![*r]).collect::<Vec<_>>())?;
        Ok(Self {
            s_grid,
            a,
            b,
            constraint,
            projector,
            rho,
            a_spline,
            b_spline,
            constraint_spline,
            projector_spline,
            rho_spline,
        })
    }

    pub fn dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn s0(&self) -> f64 {
        self.s_grid[0]
    }

    pub fn period(&self) -> f64 {
        self.s_grid[self.s_grid.len() - 1] - self.s_grid[0]
    }

    pub fn grid(&self) -> &[f64] {
        &self.s_grid
    }

    pub fn a_samples(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b_samples(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn rho_samples(&self) -> &[f64] {
        &self.rho
    }

    pub fn constraint_samples(&self) -> Option<&[DMatrix<f64>]> {
        self.constraint.as_deref()
    }

    pub fn projector_samples(&self) -> Option<&[DMatrix<f64>]> {
        self.projector.as_deref()
    }

    pub fn has_constraint(&self) -> bool {
        self.constraint.is_some()
    }

    pub fn a_at(&self, s: f64) -> DMatrix<f64> {
        self.a_spline.eval(s)
    }

    pub fn b_at(&self, s: f64) -> DMatrix<f64> {
        self.b_spline.eval(s)
    }

    pub fn rho_at(&self, s: f64) -> f64 {
        self.rho_spline.eval(s)[0]
    }

    pub fn constraint_at(&self, s: f64) -> Option<DMatrix<f64>> {
        self.constraint_spline.as_ref().map(|sp| sp.eval(s))
    }

    pub fn projector_at(&self, s: f64) -> Option<DMatrix<f64>> {
        self.projector_spline.as_ref().map(|sp| sp.eval(s))
    }

    /// Duration of one lap in time, `∫ ds/ρ(s)` (periodic trapezoid rule).
    pub fn time_period(&self) -> f64 {
        self.s_grid
            .windows(2)
            .zip(self.rho.windows(2))
            .map(|(s, r)| 0.5 * (s[1] - s[0]) * (1.0 / r[0] + 1.0 / r[1]))
            .sum()
    }

    /// The same system written in the parameter domain: `A/ρ`, `B/ρ`, `ρ ≡ 1`.
    pub fn to_parameter_domain(&self) -> Result<Self> {
        let a = self.a.iter().zip(&self.rho).map(|(m, r)| m / *r).collect();
        let b = self.b.iter().zip(&self.rho).map(|(m, r)| m / *r).collect();
        Self::build(
            self.s_grid.clone(),
            a,
            b,
            self.constraint.clone(),
            self.projector.clone(),
            vec![1.0; self.s_grid.len()],
        )
    }

    /// Same grid and constraint data with new drift samples.
    pub fn with_drift(&self, a: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::build(
            self.s_grid.clone(),
            a,
            self.b.clone(),
            self.constraint.clone(),
            self.projector.clone(),
            self.rho.clone(),
        )
    }

    pub fn to_document(&self) -> PlinDocument {
        PlinDocument {
            period: self.period(),
            state_dim: self.dim(),
            input_dim: self.input_dim(),
            s_grid: self.s_grid.clone(),
            rho: self.rho.clone(),
            a: self.a.iter().map(row_major).collect(),
            b: self.b.iter().map(row_major).collect(),
            constraint: self.constraint.as_ref().map(|c| c.iter().map(row_major).collect()),
            projector: self.projector.as_ref().map(|c| c.iter().map(row_major).collect()),
        }
    }

    pub fn from_document(doc: &PlinDocument) -> Result<Self> {
        let a = doc.a.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>()?;
        let b = doc.b.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>()?;
        let constraint = doc
            .constraint
            .as_ref()
            .map(|c| c.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let projector = doc
            .projector
            .as_ref()
            .map(|c| c.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Self::build(doc.s_grid.clone(), a, b, constraint, projector, doc.rho.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

fn check_periodic(what: &str, samples: &[DMatrix<f64>]) -> Result<()> {
    let first = &samples[0];
    let last = &samples[samples.len() - 1];
    let gap = (first - last).abs().max();
    if gap > PERIODICITY_TOL * first.abs().max().max(1.0) {
        return Err(Error::invalid(format!(
            "{what} samples are not periodic (first/last differ by {gap:e})"
        )));
    }
    Ok(())
}

/// JSON form of a [`PeriodicLinearSystem`]: matrices as arrays of rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlinDocument {
    pub period: f64,
    pub state_dim: usize,
    pub input_dim: usize,
    pub s_grid: Vec<f64>,
    pub rho: Vec<f64>,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<Vec<Vec<Vec<f64>>>>,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("ragged matrix rows"));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periodic_grid;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn rotating(size: usize) -> PeriodicLinearSystem {
        let grid = periodic_grid(0.0, TAU, size);
        let a = grid
            .iter()
            .map(|s| DMatrix::from_row_slice(2, 2, &[s.sin(), 1.0, -1.0, s.cos()]))
            .collect();
        let b = grid.iter().map(|s| DMatrix::from_row_slice(2, 1, &[0.0, 1.0 + 0.5 * s.cos()])).collect();
        let rho = grid.iter().map(|s| 1.0 + 0.3 * s.sin()).collect();
        PeriodicLinearSystem::new(grid, a, b, rho).unwrap()
    }

    #[test]
    fn interpolation_reproduces_samples() {
        let p = rotating(65);
        for (i, &s) in p.grid().iter().enumerate() {
            assert!((p.a_at(s) - &p.a_samples()[i]).norm() < 1e-13);
            assert!((p.rho_at(s) - p.rho_samples()[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn non_periodic_samples_rejected() {
        let grid = periodic_grid(0.0, 1.0, 10);
        let a = grid.iter().map(|s| DMatrix::from_element(1, 1, *s)).collect();
        let b = grid.iter().map(|_| DMatrix::from_element(1, 1, 1.0)).collect();
        let err = PeriodicLinearSystem::new(grid, a, b, vec![1.0; 10]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn time_period_of_variable_rate() {
        // ∫₀^{2π} ds / (1 + 0.3 sin s) = 2π / √(1 − 0.09)
        let p = rotating(513);
        let expected = TAU / (1.0_f64 - 0.09).sqrt();
        assert!((p.time_period() - expected).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn json_round_trip(size in 8usize..40, scale in 0.1f64..10.0) {
            let grid = periodic_grid(0.5, TAU, size);
            let a: Vec<_> = grid.iter().map(|s| DMatrix::from_row_slice(2, 2, &[scale * s.sin(), 1.0 / 3.0, -1.0, s.cos()])).collect();
            let b: Vec<_> = grid.iter().map(|s| DMatrix::from_row_slice(2, 1, &[0.1 * s.cos(), 1.0])).collect();
            let c: Vec<_> = grid.iter().map(|s| DMatrix::from_row_slice(1, 2, &[s.cos(), s.sin()])).collect();
            let pr: Vec<_> = grid.iter().map(|_| DMatrix::identity(2, 2)).collect();
            let p = PeriodicLinearSystem::new(grid, a, b, vec![scale; size]).unwrap().with_constraint(c, pr).unwrap();
            let back = PeriodicLinearSystem::from_json(&p.to_json().unwrap()).unwrap();
            for i in 0..size {
                prop_assert!((back.a_samples()[i].clone() - &p.a_samples()[i]).abs().max() <= 1e-12);
                prop_assert!((back.constraint_samples().unwrap()[i].clone() - &p.constraint_samples().unwrap()[i]).abs().max() <= 1e-12);
            }
            prop_assert!((back.period() - p.period()).abs() <= 1e-12);
        }
    }
}
