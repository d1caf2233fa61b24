//! Control-affine systems `ẋ = f(x) + g(x)u` and periodic orbit parameterizations.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::projection;
use crate::{Error, Result};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type Curve = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    f: VectorField,
    g: MatrixField,
    df: Option<MatrixField>,
    dg: Option<Vec<MatrixField>>,
    nominal_input: Option<Curve>,
    nominal_input_rate: Option<Curve>,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic_df", &self.df.is_some())
            .field("analytic_dg", &self.dg.is_some())
            .field("nominal_input", &self.nominal_input.is_some())
            .finish()
    }
}

impl ControlAffineSystem {
    pub fn new(n: usize, m: usize, f: VectorField, g: MatrixField) -> Result<Self> {
        if n < 2 || m < 1 {
            return Err(Error::invalid(format!(
                "state dimension must be >= 2 and input dimension >= 1 (got n={n}, m={m})"
            )));
        }
        Ok(Self {
            n,
            m,
            f,
            g,
            df: None,
            dg: None,
            nominal_input: None,
            nominal_input_rate: None,
        })
    }

    pub fn with_jacobian(mut self, df: MatrixField) -> Self {
        self.df = Some(df);
        self
    }

    /// Jacobians of the columns of `g`, one per input.
    pub fn with_input_jacobians(mut self, dg: Vec<MatrixField>) -> Result<Self> {
        if dg.len() != self.m {
            return Err(Error::invalid("one input-column Jacobian per input is required"));
        }
        self.dg = Some(dg);
        Ok(self)
    }

    /// Nominal input `υ(s)`; `rate` is `υ'(s)` and is finite-differenced when omitted.
    pub fn with_nominal_input(mut self, input: Curve, rate: Option<Curve>) -> Self {
        self.nominal_input = Some(input);
        self.nominal_input_rate = rate;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.df.is_some()
    }

    pub fn has_nominal_input(&self) -> bool {
        self.nominal_input.is_some()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.g)(x)
    }

    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let jac = match &self.df {
            Some(df) => df(x),
            None => state_jacobian(|y| (self.f)(y), x),
        };
        finite_or_missing(jac, "df")
    }

    /// Central finite-difference Jacobian of `f`, regardless of whether an
    /// analytic one was supplied.
    pub fn drift_jacobian_fd(&self, x: &DVector<f64>) -> DMatrix<f64> {
        state_jacobian(|y| (self.f)(y), x)
    }

    pub fn input_column_jacobian(&self, column: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let jac = match &self.dg {
            Some(dg) => dg[column](x),
            None => state_jacobian(|y| (self.g)(y).column(column).into_owned(), x),
        };
        finite_or_missing(jac, "dg")
    }

    pub fn nominal_input(&self, s: f64) -> DVector<f64> {
        match &self.nominal_input {
            Some(u) => u(s),
            None => DVector::zeros(self.m),
        }
    }

    /// `υ'(s)`; uses a 5-point stencil with step `period·1e-4` when no rate was given.
    pub fn nominal_input_rate(&self, s: f64, period: f64) -> DVector<f64> {
        match (&self.nominal_input_rate, &self.nominal_input) {
            (Some(rate), _) => rate(s),
            (None, Some(u)) => five_point_first(|t| u(t), s, period * 1e-4),
            (None, None) => DVector::zeros(self.m),
        }
    }

    /// `f(x) + g(x)υ(s)`, the velocity along the nominal motion.
    pub fn nominal_velocity(&self, x: &DVector<f64>, s: f64) -> DVector<f64> {
        if self.nominal_input.is_some() {
            self.velocity(x, &self.nominal_input(s))
        } else {
            self.drift(x)
        }
    }
}

fn finite_or_missing(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::MissingJacobian(format!("{what} is not finite")))
    }
}

/// 5-point central difference of a vector function of a scalar.
pub(crate) fn five_point_first<F>(func: F, s: f64, h: f64) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    (func(s - 2.0 * h) - func(s - h) * 8.0 + func(s + h) * 8.0 - func(s + 2.0 * h)) / (12.0 * h)
}

pub(crate) fn five_point_second<F>(func: F, s: f64, h: f64) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    (-func(s - 2.0 * h) + func(s - h) * 16.0 - func(s) * 30.0 + func(s + h) * 16.0
        - func(s + 2.0 * h))
        / (12.0 * h * h)
}

/// Jacobian of a state map by 5-point central differences, step `(1 + ‖x‖)·1e-5`.
pub fn state_jacobian<F>(func: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = (1.0 + x.norm()) * 1e-5;
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let shifted = |t: f64| {
            let mut y = x.clone();
            y[j] += t;
            func(&y)
        };
        cols.push(five_point_first(shifted, 0.0, h));
    }
    DMatrix::from_columns(&cols)
}

/// Regular closed curve `s ↦ x_s(s)` with `x_s(s + period) = x_s(s)`.
#[derive(Clone)]
pub struct OrbitParameterization {
    s0: f64,
    period: f64,
    xs: Curve,
    dxs: Option<Curve>,
    d2xs: Option<Curve>,
}

impl fmt::Debug for OrbitParameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OrbitParameterization")
            .field("s0", &self.s0)
            .field("period", &self.period)
            .field("analytic_tangent", &self.dxs.is_some())
            .field("analytic_curvature", &self.d2xs.is_some())
            .finish()
    }
}

impl OrbitParameterization {
    pub fn new(s0: f64, period: f64, xs: Curve) -> Result<Self> {
        if !(period > 0.0 && period.is_finite() && s0.is_finite()) {
            return Err(Error::invalid("orbit period must be positive and finite"));
        }
        let orbit = Self {
            s0,
            period,
            xs,
            dxs: None,
            d2xs: None,
        };
        let gap = (orbit.point(s0) - orbit.point(s0 + period)).norm();
        if gap > 1e-10 {
            return Err(Error::invalid(format!("curve is not closed: gap {gap:e}")));
        }
        Ok(orbit)
    }

    pub fn with_tangent(mut self, dxs: Curve) -> Self {
        self.dxs = Some(dxs);
        self
    }

    pub fn with_curvature(mut self, d2xs: Curve) -> Self {
        self.d2xs = Some(d2xs);
        self
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn dim(&self) -> usize {
        self.point(self.s0).len()
    }

    /// Reduces `s` into `[s0, s0 + period)`.
    pub fn wrap(&self, s: f64) -> f64 {
        let w = (s - self.s0).rem_euclid(self.period) + self.s0;
        if w >= self.s0 + self.period {
            self.s0
        } else {
            w
        }
    }

    pub fn point(&self, s: f64) -> DVector<f64> {
        (self.xs)(s)
    }

    /// `x_s'(s)`; see [`orbit_tangent`].
    pub fn tangent(&self, s: f64) -> Result<DVector<f64>> {
        orbit_tangent(self, s)
    }

    /// `x_s''(s)`, finite-differenced (step `period·1e-3`) when not supplied.
    pub fn curvature(&self, s: f64) -> DVector<f64> {
        match (&self.d2xs, &self.dxs) {
            (Some(d2), _) => d2(s),
            (None, Some(d1)) => five_point_first(|t| d1(t), s, self.period * 1e-4),
            (None, None) => five_point_second(|t| (self.xs)(t), s, self.period * 1e-3),
        }
    }

    /// Reach estimate of the curve: the smaller of the minimal radius of
    /// curvature and half the smallest bottleneck distance, taken over pairs
    /// of points more than a quarter period apart in parameter whose distance
    /// is a local minimum.
    pub fn reach_estimate(&self, grid_size: usize) -> Result<f64> {
        let grid: Vec<f64> = (0..grid_size)
            .map(|i| self.s0 + self.period * i as f64 / grid_size as f64)
            .collect();
        let mut radius = f64::INFINITY;
        let mut points = Vec::with_capacity(grid_size);
        for &s in &grid {
            let t = self.tangent(s)?;
            let c = self.curvature(s);
            let t2 = t.norm_squared();
            // curvature of a space curve: |t × c| / |t|^3, generalised via Lagrange's identity
            let cross2 = (t2 * c.norm_squared() - t.dot(&c).powi(2)).max(0.0);
            let kappa = cross2.sqrt() / t2.powf(1.5);
            if kappa > 0.0 {
                radius = radius.min(1.0 / kappa);
            }
            points.push(self.point(s));
        }
        // bottlenecks: pairs far apart in parameter whose distance is a local
        // minimum among neighbouring pairs
        let n = grid_size;
        let quarter = n / 4;
        let far = |i: usize, j: usize| {
            let sep = (j + n - i) % n;
            sep.min(n - sep) > quarter
        };
        let dist = |i: usize, j: usize| (&points[i % n] - &points[j % n]).norm();
        let mut half_gap = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                if !far(i, j) {
                    continue;
                }
                let d = dist(i, j);
                let is_min = [(n - 1, 0), (1, 0), (0, n - 1), (0, 1)].iter().all(|&(di, dj)| {
                    let (a, b) = ((i + di) % n, (j + dj) % n);
                    far(a, b) && dist(a, b) >= d
                });
                if is_min {
                    half_gap = half_gap.min(0.5 * d);
                }
            }
        }
        Ok(radius.min(half_gap))
    }
}

/// Tangent `x_s'(s)`: the analytic derivative when provided, otherwise a
/// 5-point central difference with step `period·1e-4`.
pub fn orbit_tangent(orbit: &OrbitParameterization, s: f64) -> Result<DVector<f64>> {
    if !s.is_finite() {
        return Err(Error::invalid("orbit parameter must be finite"));
    }
    let t = match &orbit.dxs {
        Some(d) => d(s),
        None => five_point_first(|u| (orbit.xs)(u), s, orbit.period * 1e-4),
    };
    let norm = t.norm();
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateTangent { s, norm });
    }
    Ok(t)
}

/// Largest transversal residual of the curve as a solution of the (possibly
/// driven) system.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OrbitResidual {
    pub max_residual: f64,
    pub at_s: f64,
}

impl OrbitResidual {
    /// Residuals below `1e-8` certify that the curve is an orbit.
    pub fn is_orbit(&self) -> bool {
        self.max_residual < 1e-8
    }
}

/// Max over a uniform grid of `‖Ω(s)(f(x_s) + g(x_s)υ(s))‖`.
pub fn verify_orbit(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    grid_size: usize,
) -> Result<OrbitResidual> {
    if grid_size < 8 {
        return Err(Error::invalid("orbit verification needs at least 8 grid points"));
    }
    let mut worst = OrbitResidual {
        max_residual: 0.0,
        at_s: orbit.s0(),
    };
    for i in 0..grid_size {
        let s = orbit.s0() + orbit.period() * i as f64 / grid_size as f64;
        let geo = projection::GeometricFrame::at(orbit, s)?;
        let v = system.nominal_velocity(&geo.x, s);
        let r = (&geo.omega * v).norm();
        if !(r <= worst.max_residual) {
            worst = OrbitResidual {
                max_residual: r,
                at_s: s,
            };
        }
    }
    Ok(worst)
}

/// First-approximation matrix `A(s)` along the orbit.
///
/// Returns `Df(x_s(s)) + Σ ∂g_i/∂x υ_i(s)`, plus `g υ'(s) Γ(s)` when
/// `include_upsilon_prime` is set. Without a nominal input both settings agree.
pub fn a_matrix(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    frame: &projection::ProjectionFrame,
    s: f64,
    include_upsilon_prime: bool,
) -> Result<DMatrix<f64>> {
    let x = &frame.x_on_orbit;
    let mut a = system.drift_jacobian(x)?;
    if system.has_nominal_input() {
        let ups = system.nominal_input(s);
        for i in 0..system.input_dim() {
            if ups[i] != 0.0 {
                a += system.input_column_jacobian(i, x)? * ups[i];
            }
        }
        if include_upsilon_prime {
            let rate = system.nominal_input_rate(s, orbit.period());
            a += system.input_matrix(x) * rate * &frame.gamma;
        }
    }
    Ok(a)
}
