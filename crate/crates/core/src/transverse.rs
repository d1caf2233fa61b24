//! Transverse linearizations along the orbit.
//!
//! All systems are returned in the time domain together with the rate
//! `ρ(s) = ds/dt`; [`PeriodicLinearSystem::to_parameter_domain`] gives the
//! `d/ds` form.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::Serialize;

use crate::dynsys::{a_matrix, five_point_first, verify_orbit, ControlAffineSystem, OrbitParameterization};
use crate::interp::periodic_derivative;
use crate::linalg;
use crate::ode::{integrate, OdeOptions};
use crate::plin::PeriodicLinearSystem;
use crate::projection::{frame_at, gamma_at, project_lifted, ProjectionFrame};
use crate::{periodic_grid, Error, Result};

pub type ProjectionGradient = Arc<dyn Fn(&DVector<f64>, f64) -> Result<RowDVector<f64>> + Send + Sync>;
pub type ProjectionHessian = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type CoordinateFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type CoordinateJacobian = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A projection operator `p(x)` known through its gradient.
///
/// The gradient callback receives a state and a parameter hint near `p(x)`;
/// the optional Hessian callback returns `D²p(x_s(s))`. Without it the
/// Hessian is a central difference of the gradient.
#[derive(Clone)]
pub struct ProjectionOperator {
    orbit: OrbitParameterization,
    gradient: ProjectionGradient,
    hessian: Option<ProjectionHessian>,
}

impl std::fmt::Debug for ProjectionOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectionOperator")
            .field("orbit", &self.orbit)
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

impl ProjectionOperator {
    pub fn new(orbit: OrbitParameterization, gradient: ProjectionGradient) -> Self {
        Self {
            orbit,
            gradient,
            hessian: None,
        }
    }

    /// The orthogonal projection onto the orbit.
    pub fn orthogonal(orbit: OrbitParameterization) -> Self {
        let inner = orbit.clone();
        let gradient: ProjectionGradient = Arc::new(move |x: &DVector<f64>, hint: f64| {
            let s = project_lifted(&inner, x, Some(hint))?;
            gamma_at(&inner, x, s)
        });
        Self::new(orbit, gradient)
    }

    pub fn with_hessian(mut self, hessian: ProjectionHessian) -> Self {
        self.hessian = Some(hessian);
        self
    }

    pub fn orbit(&self) -> &OrbitParameterization {
        &self.orbit
    }

    pub fn gradient(&self, x: &DVector<f64>, hint: f64) -> Result<RowDVector<f64>> {
        (self.gradient)(x, hint)
    }

    /// `Γ(s) = Dp(x_s(s))`.
    pub fn gamma(&self, s: f64) -> Result<RowDVector<f64>> {
        self.gradient(&self.orbit.point(s), s)
    }

    /// `D²p(x_s(s))`, symmetrized.
    pub fn hessian(&self, s: f64) -> Result<DMatrix<f64>> {
        if let Some(h) = &self.hessian {
            return Ok(h(s));
        }
        let x = self.orbit.point(s);
        let n = x.len();
        let h = 1e-5 * (1.0 + x.norm());
        let mut hess = DMatrix::zeros(n, n);
        for j in 0..n {
            let at = |offset: f64| -> Result<RowDVector<f64>> {
                let mut y = x.clone();
                y[j] += offset;
                self.gradient(&y, s)
            };
            let col = (at(-2.0 * h)? - at(-h)? * 8.0 + at(h)? * 8.0 - at(2.0 * h)?) / (12.0 * h);
            hess.set_column(j, &col.transpose());
        }
        if hess.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingJacobian("projection Hessian is not finite".into()));
        }
        Ok(linalg::symmetrize(&hess))
    }

    /// Projection frame at `s` built from this operator's `Γ(s)`.
    pub fn frame(&self, system: &ControlAffineSystem, s: f64) -> Result<ProjectionFrame> {
        ProjectionFrame::with_gamma(system, &self.orbit, s, self.gamma(s)?)
    }
}

/// A candidate set of transverse coordinates `y⊥ = y(s, x)` paired with a projection.
#[derive(Clone)]
pub struct TransverseCoordinateMap {
    dim: usize,
    value: CoordinateFn,
    dy_dx: Option<CoordinateJacobian>,
    dy_ds: Option<CoordinateFn>,
    projection: ProjectionOperator,
}

impl std::fmt::Debug for TransverseCoordinateMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransverseCoordinateMap")
            .field("dim", &self.dim)
            .field("dy_dx", &self.dy_dx.is_some())
            .field("dy_ds", &self.dy_ds.is_some())
            .finish()
    }
}

impl TransverseCoordinateMap {
    pub fn new<F>(dim: usize, value: Arc<F>, projection: ProjectionOperator) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            value,
            dy_dx: None,
            dy_ds: None,
            projection,
        }
    }

    pub fn with_state_jacobian<F>(mut self, dy_dx: Arc<F>) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.dy_dx = Some(dy_dx);
        self
    }

    pub fn with_parameter_derivative<F>(mut self, dy_ds: Arc<F>) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.dy_ds = Some(dy_ds);
        self
    }

    /// The excessive coordinates `z⊥ = x − x_s(s)` with the orthogonal projection.
    pub fn excessive_z(orbit: &OrbitParameterization) -> Self {
        let n = orbit.dim();
        let xs = orbit.clone();
        let ts = orbit.clone();
        Self::new(n, Arc::new(move |s: f64, x: &DVector<f64>| x - xs.point(s)), ProjectionOperator::orthogonal(orbit.clone()))
            .with_state_jacobian(Arc::new(move |_s: f64, _x: &DVector<f64>| DMatrix::identity(n, n)))
            .with_parameter_derivative(Arc::new(move |s: f64, _x: &DVector<f64>| {
                -ts.tangent(s).unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
            }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self) -> &ProjectionOperator {
        &self.projection
    }

    pub fn value(&self, s: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.value)(s, x)
    }

    pub fn has_state_jacobian(&self) -> bool {
        self.dy_dx.is_some()
    }

    /// `∂y/∂x`, by 5-point differences with step `(1 + ‖x‖)·1e-5` when not supplied.
    pub fn state_jacobian(&self, s: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.dy_dx {
            Some(d) => d(s, x),
            None => crate::dynsys::state_jacobian(|y| (self.value)(s, y), x),
        }
    }

    /// `∂y/∂s`, by 5-point differences with step `period·1e-4` when not supplied.
    pub fn parameter_derivative(&self, s: f64, x: &DVector<f64>) -> DVector<f64> {
        match &self.dy_ds {
            Some(d) => d(s, x),
            None => five_point_first(|t| (self.value)(t, x), s, self.projection.orbit.period() * 1e-4),
        }
    }

    /// `Π(s) = ∂y/∂x(s, x_s(s))`.
    pub fn pi(&self, s: f64) -> DMatrix<f64> {
        self.state_jacobian(s, &self.projection.orbit.point(s))
    }

    /// Total derivative `Π'(s)` along the orbit.
    pub fn pi_rate(&self, s: f64) -> DMatrix<f64> {
        let period = self.projection.orbit.period();
        // a differenced Jacobian is noisier, so take a wider parameter step
        let h = if self.dy_dx.is_some() { period * 1e-4 } else { period * 1e-3 };
        let at = |t: f64| self.pi(t);
        (at(s - 2.0 * h) - at(s - h) * 8.0 + at(s + h) * 8.0 - at(s + 2.0 * h)) / (12.0 * h)
    }
}

/// `A⊥(s) = Ω(s)A(s) − x_s'x_s'ᵀAᵀ(s)/‖x_s'‖²` for the orthogonal projection.
pub fn a_perp_orthogonal(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    frame: &ProjectionFrame,
    s: f64,
) -> Result<DMatrix<f64>> {
    let a = a_matrix(system, orbit, frame, s, true)?;
    let t = &frame.tangent;
    let along = t * t.transpose() / t.norm_squared();
    Ok(&frame.omega * &a - along * a.transpose())
}

/// `A⊥(s) = Ω(s)A(s) − ρ(s)x_s'(s)x_s'ᵀ(s)D²p(x_s(s))` for an arbitrary projection.
pub fn a_perp_general(
    system: &ControlAffineSystem,
    projection: &ProjectionOperator,
    frame: &ProjectionFrame,
    s: f64,
) -> Result<DMatrix<f64>> {
    let a = a_matrix(system, projection.orbit(), frame, s, true)?;
    let t = &frame.tangent;
    let hess = projection.hessian(s)?;
    Ok(&frame.omega * a - t * (t.transpose() * hess) * frame.rho)
}

/// `B⊥(s) = Ω(s)g(x_s(s))`.
pub fn b_perp(system: &ControlAffineSystem, frame: &ProjectionFrame) -> DMatrix<f64> {
    &frame.omega * system.input_matrix(&frame.x_on_orbit)
}

/// The direction `x_s'/(x_s'ᵀ ẋ_s)`, a periodic solution of the undriven
/// transverse linearization that no feedback of `z⊥` can remove.
pub fn nonvanishing_direction(system: &ControlAffineSystem, orbit: &OrbitParameterization, s: f64) -> Result<DVector<f64>> {
    let t = orbit.tangent(s)?;
    let v = system.nominal_velocity(&orbit.point(s), s);
    Ok(&t / t.dot(&v))
}

fn require_orbit(system: &ControlAffineSystem, orbit: &OrbitParameterization, grid_size: usize) -> Result<()> {
    let check = verify_orbit(system, orbit, grid_size.max(8))?;
    if check.is_orbit() {
        Ok(())
    } else {
        Err(Error::NotAnOrbit {
            residual: check.max_residual,
            s: check.at_s,
        })
    }
}

fn check_grid(system: &ControlAffineSystem, orbit: &OrbitParameterization, grid_size: usize) -> Result<Vec<f64>> {
    if grid_size < 8 {
        return Err(Error::invalid("grid needs at least 8 points"));
    }
    if system.state_dim() != orbit.dim() {
        return Err(Error::invalid("system and orbit dimensions differ"));
    }
    Ok(periodic_grid(orbit.s0(), orbit.period(), grid_size))
}

/// The constrained transverse linearization in excessive coordinates:
/// `δż⊥ = A⊥δz⊥ + B⊥u`, `Γδz⊥ = 0`, with projector `Ω`.
pub fn tvl_orthogonal(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    grid_size: usize,
) -> Result<PeriodicLinearSystem> {
    let grid = check_grid(system, orbit, grid_size)?;
    require_orbit(system, orbit, grid_size)?;
    let (mut a, mut b, mut c, mut p, mut rho) = (vec![], vec![], vec![], vec![], vec![]);
    for &s in &grid {
        let fr = frame_at(system, orbit, s)?;
        a.push(a_perp_orthogonal(system, orbit, &fr, s)?);
        b.push(b_perp(system, &fr));
        c.push(DMatrix::from_row_slice(1, fr.gamma.len(), fr.gamma.as_slice()));
        p.push(fr.omega.clone());
        rho.push(fr.rho);
    }
    PeriodicLinearSystem::new(grid, a, b, rho)?.with_constraint(c, p)
}

/// The unconstrained comparison system `ẇ = ΩAw + ΩBv`, carrying `Ω` as projector.
pub fn comparison_system(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    grid_size: usize,
) -> Result<PeriodicLinearSystem> {
    let grid = check_grid(system, orbit, grid_size)?;
    require_orbit(system, orbit, grid_size)?;
    let (mut a, mut b, mut p, mut rho) = (vec![], vec![], vec![], vec![]);
    for &s in &grid {
        let fr = frame_at(system, orbit, s)?;
        a.push(&fr.omega * a_matrix(system, orbit, &fr, s, true)?);
        b.push(b_perp(system, &fr));
        p.push(fr.omega.clone());
        rho.push(fr.rho);
    }
    PeriodicLinearSystem::new(grid, a, b, rho)?.with_projector(p)
}

/// Right inverse of `Π` on the constraint subspace.
///
/// For `N = n−1` returns `ΩΨᵀ(ΨΨᵀ)⁻¹` with `Ψ = ΠΩ`; for `N = n`, `Π⁻¹`;
/// for `N > n`, `(ΠᵀΠ)⁻¹Πᵀ`.
pub fn pi_dagger(pi: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (big_n, n) = pi.shape();
    if omega.shape() != (n, n) {
        return Err(Error::invalid("Π and Ω have incompatible shapes"));
    }
    if big_n + 1 < n {
        return Err(Error::RankDeficient(format!(
            "{big_n} coordinates cannot describe {} transverse directions",
            n - 1
        )));
    }
    let full = big_n.min(n);
    if linalg::rank(pi, 1e-9) < full {
        return Err(Error::RankDeficient(format!("Π must have rank {full}")));
    }
    if big_n + 1 == n {
        let psi = pi * omega;
        let gram = &psi * psi.transpose();
        Ok(omega * psi.transpose() * linalg::inverse(&gram, "ΨΨᵀ")?)
    } else if big_n == n {
        linalg::inverse(pi, "Π")
    } else {
        let gram = pi.transpose() * pi;
        Ok(linalg::inverse(&gram, "ΠᵀΠ")? * pi.transpose())
    }
}

/// Per-sample result of [`validate_transverse_coords`].
#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub s: f64,
    /// `‖y(s, x_s(s))‖`.
    pub vanishing_residual: f64,
    /// `‖∂y/∂s + Π x_s'‖` on the orbit.
    pub parameter_relation_residual: f64,
    pub rank_pi: usize,
    pub rank_dy: usize,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateValidation {
    pub coordinate_dim: usize,
    pub state_dim: usize,
    pub dimension_ok: bool,
    pub max_vanishing_residual: f64,
    pub max_parameter_relation_residual: f64,
    pub checks: Vec<CoordinateCheck>,
    pub valid: bool,
}

/// Numerical check that `y⊥` vanishes on the orbit, `rank ∂y/∂x = min(N, n)`
/// and `rank Dy⊥ = n−1` along a grid.
pub fn validate_transverse_coords(
    map: &TransverseCoordinateMap,
    system: &ControlAffineSystem,
    grid_size: usize,
) -> Result<CoordinateValidation> {
    let orbit = map.projection().orbit();
    let grid = check_grid(system, orbit, grid_size)?;
    let n = orbit.dim();
    let big_n = map.dim();
    let dimension_ok = big_n + 1 >= n;
    let mut checks = Vec::with_capacity(grid.len() - 1);
    for &s in &grid[..grid.len() - 1] {
        let x = orbit.point(s);
        let y = map.value(s, &x);
        let pi = map.state_jacobian(s, &x);
        let ys = map.parameter_derivative(s, &x);
        let gamma = map.projection().gamma(s)?;
        let dy = &pi + &ys * &gamma;
        let rank_of = |m: &DMatrix<f64>| linalg::rank(m, 1e-7);
        let rank_pi = rank_of(&pi);
        let rank_dy = rank_of(&dy);
        let relation = (&ys + &pi * orbit.tangent(s)?).norm();
        let vanishing = y.norm();
        let ok = y.len() == big_n
            && pi.shape() == (big_n, n)
            && vanishing < 1e-10
            && rank_pi == big_n.min(n)
            && rank_dy + 1 == n;
        checks.push(CoordinateCheck {
            s,
            vanishing_residual: vanishing,
            parameter_relation_residual: relation,
            rank_pi,
            rank_dy,
            ok,
        });
    }
    let max_of = |f: fn(&CoordinateCheck) -> f64| checks.iter().map(f).fold(0.0, f64::max);
    Ok(CoordinateValidation {
        coordinate_dim: big_n,
        state_dim: n,
        dimension_ok,
        max_vanishing_residual: max_of(|c| c.vanishing_residual),
        max_parameter_relation_residual: max_of(|c| c.parameter_relation_residual),
        valid: dimension_ok && checks.iter().all(|c| c.ok),
        checks,
    })
}

fn require_valid(map: &TransverseCoordinateMap, system: &ControlAffineSystem, grid_size: usize) -> Result<()> {
    let report = validate_transverse_coords(map, system, grid_size)?;
    if report.valid {
        return Ok(());
    }
    if !report.dimension_ok {
        return Err(Error::RankDeficient(format!(
            "{} coordinates for a {}-dimensional state",
            report.coordinate_dim, report.state_dim
        )));
    }
    let bad = report.checks.iter().find(|c| !c.ok).map_or(f64::NAN, |c| c.s);
    Err(Error::RankDeficient(format!("transverse coordinates are not valid at s = {bad}")))
}

/// Projector onto `ker C` (identity when `C` vanishes).
fn kernel_projector(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = c.ncols();
    if c.norm() < 1e-9 {
        return Ok(DMatrix::identity(k, k));
    }
    Ok(DMatrix::identity(k, k) - linalg::pinv(c)? * c)
}

/// Transverse linearization in arbitrary valid coordinates:
/// `δẏ⊥ = [ΠA⊥ + Ξ]Π†δy⊥ + ΠB⊥u`, `ΓΠ†δy⊥ = 0`, with `Ξ = ρΠ'`.
pub fn tvl_general(
    map: &TransverseCoordinateMap,
    system: &ControlAffineSystem,
    grid_size: usize,
) -> Result<PeriodicLinearSystem> {
    let orbit = map.projection().orbit();
    let grid = check_grid(system, orbit, grid_size)?;
    require_orbit(system, orbit, grid_size)?;
    require_valid(map, system, grid_size)?;
    let (mut a, mut b, mut c, mut p, mut rho) = (vec![], vec![], vec![], vec![], vec![]);
    for &s in &grid {
        let fr = map.projection().frame(system, s)?;
        let a_perp = a_perp_general(system, map.projection(), &fr, s)?;
        let pi = map.pi(s);
        let xi = map.pi_rate(s) * fr.rho;
        let dagger = pi_dagger(&pi, &fr.omega)?;
        let constraint = &fr.gamma * &dagger;
        let constraint = DMatrix::from_row_slice(1, constraint.len(), constraint.as_slice());
        p.push(kernel_projector(&constraint)?);
        a.push((&pi * a_perp + xi) * &dagger);
        b.push(&pi * b_perp(system, &fr));
        c.push(constraint);
        rho.push(fr.rho);
    }
    PeriodicLinearSystem::new(grid, a, b, rho)?.with_constraint(c, p)
}

/// Transverse linearization for minimal coordinates `y⊥(x)` without explicit
/// parameter dependence, through `f⊥ = Dy⊥·f` and `g⊥ = Dy⊥·g`:
/// `δẏ⊥ = Df⊥Ψ†δy⊥ + g⊥u`.
pub fn minimal_tvl(
    map: &TransverseCoordinateMap,
    system: &ControlAffineSystem,
    grid_size: usize,
) -> Result<PeriodicLinearSystem> {
    let orbit = map.projection().orbit();
    let grid = check_grid(system, orbit, grid_size)?;
    let n = orbit.dim();
    if map.dim() + 1 != n {
        return Err(Error::invalid(format!(
            "minimal coordinates need {} components, got {}",
            n - 1,
            map.dim()
        )));
    }
    require_orbit(system, orbit, grid_size)?;
    require_valid(map, system, grid_size)?;
    let (mut a, mut b, mut rho) = (vec![], vec![], vec![]);
    for &s in &grid {
        let x = orbit.point(s);
        let ds = map.parameter_derivative(s, &x);
        if ds.norm() > 1e-8 {
            return Err(Error::invalid(format!("coordinates depend on the parameter at s = {s}")));
        }
        let fr = map.projection().frame(system, s)?;
        let f_perp = |y: &DVector<f64>| map.state_jacobian(s, y) * system.nominal_velocity(y, s);
        let df_perp = crate::dynsys::state_jacobian(f_perp, &x);
        let pi = map.pi(s);
        a.push(df_perp * pi_dagger(&pi, &fr.omega)?);
        b.push(&pi * system.input_matrix(&x));
        rho.push(fr.rho);
    }
    PeriodicLinearSystem::new(grid, a, b, rho)
}

/// Coefficient rows of the phase-variation equation
/// `δψ̇ = Γ[A − A⊥]Π†δy⊥ + Γg·u`.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseVariation {
    pub s_grid: Vec<f64>,
    pub state_rows: Vec<RowDVector<f64>>,
    pub input_rows: Vec<RowDVector<f64>>,
}

impl PhaseVariation {
    /// `δψ̇` for a given transverse deviation and input at grid index `i`.
    pub fn rate(&self, i: usize, dy: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (&self.state_rows[i] * dy)[0] + (&self.input_rows[i] * u)[0]
    }
}

pub fn phase_variation_system(
    map: &TransverseCoordinateMap,
    system: &ControlAffineSystem,
    grid_size: usize,
) -> Result<PhaseVariation> {
    let orbit = map.projection().orbit();
    let grid = check_grid(system, orbit, grid_size)?;
    let (mut state_rows, mut input_rows) = (vec![], vec![]);
    for &s in &grid {
        let fr = map.projection().frame(system, s)?;
        let a = a_matrix(system, orbit, &fr, s, true)?;
        let a_perp = a_perp_general(system, map.projection(), &fr, s)?;
        let dagger = pi_dagger(&map.pi(s), &fr.omega)?;
        state_rows.push(&fr.gamma * (a - a_perp) * dagger);
        input_rows.push(&fr.gamma * system.input_matrix(&fr.x_on_orbit));
    }
    Ok(PhaseVariation {
        s_grid: grid,
        state_rows,
        input_rows,
    })
}

/// Smooth orthonormal bases `Φ⊥(s)` of `ker Γ(s)` on a closed grid.
#[derive(Debug, Clone, Serialize)]
pub struct TransverseFrame {
    pub s_grid: Vec<f64>,
    pub bases: Vec<DMatrix<f64>>,
    /// `max |Φ⊥(s0 + s_T) − Φ⊥(s0)|` after continuation around the orbit.
    pub holonomy_mismatch: f64,
}

impl TransverseFrame {
    /// Fails with [`Error::FrameHolonomy`] when the continued basis does not close up.
    pub fn require_closed(&self) -> Result<()> {
        if self.holonomy_mismatch > 1e-6 {
            Err(Error::FrameHolonomy {
                mismatch: self.holonomy_mismatch,
            })
        } else {
            Ok(())
        }
    }

    /// `Φ⊥(s0)ᵀΦ⊥(s0 + s_T)`: identity when the frame closes up.
    pub fn holonomy(&self) -> DMatrix<f64> {
        self.bases[0].transpose() * &self.bases[self.bases.len() - 1]
    }
}

fn gram_schmidt(vectors: impl IntoIterator<Item = DVector<f64>>, wanted: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(wanted);
    for mut v in vectors {
        if out.len() == wanted {
            break;
        }
        for _ in 0..2 {
            for q in &out {
                v -= q * q.dot(&v);
            }
        }
        let norm = v.norm();
        if norm > 1e-3 {
            out.push(v / norm);
        }
    }
    out
}

/// Continuation Gram–Schmidt frame of `ker Γ(s)`, seeded from the standard
/// basis at `s0` and from the previous sample afterwards.
pub fn transverse_frame(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    grid_size: usize,
) -> Result<TransverseFrame> {
    let grid = check_grid(system, orbit, grid_size)?;
    let n = orbit.dim();
    let mut bases: Vec<DMatrix<f64>> = Vec::with_capacity(grid.len());
    for &s in &grid {
        let fr = frame_at(system, orbit, s)?;
        let g = fr.gamma.transpose();
        let project = |v: DVector<f64>| {
            let c = g.dot(&v) / g.norm_squared();
            v - &g * c
        };
        let seeds: Vec<DVector<f64>> = match bases.last() {
            None => (0..n).map(|i| project(DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 }))).collect(),
            Some(prev) => prev.column_iter().map(|c| project(c.into_owned())).collect(),
        };
        let cols = gram_schmidt(seeds, n - 1);
        if cols.len() + 1 != n {
            return Err(Error::RankDeficient(format!("kernel basis lost rank at s = {s}")));
        }
        bases.push(DMatrix::from_columns(&cols));
    }
    let holonomy_mismatch = linalg::max_abs(&(&bases[bases.len() - 1] - &bases[0]));
    Ok(TransverseFrame {
        s_grid: grid,
        bases,
        holonomy_mismatch,
    })
}

/// The `(n−1)`-dimensional system of `ξ = Φ⊥ᵀδz⊥`:
/// `ξ̇ = [Φ⊥ᵀA⊥Φ⊥ − ρΦ⊥ᵀΦ⊥']ξ + Φ⊥ᵀB⊥u`.
///
/// The second drift term accounts for the rotation of the frame.
pub fn reduced_pair(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    frame: &TransverseFrame,
) -> Result<PeriodicLinearSystem> {
    frame.require_closed()?;
    let tvl = tvl_orthogonal(system, orbit, frame.s_grid.len())?;
    if tvl.grid() != frame.s_grid.as_slice() {
        return Err(Error::invalid("frame grid does not match the orbit grid"));
    }
    let rates = periodic_derivative(&frame.s_grid, &frame.bases)?;
    let mut a = Vec::with_capacity(frame.bases.len());
    let mut b = Vec::with_capacity(frame.bases.len());
    for (i, phi) in frame.bases.iter().enumerate() {
        let rho = tvl.rho_samples()[i];
        a.push(phi.transpose() * &tvl.a_samples()[i] * phi - phi.transpose() * &rates[i] * rho);
        b.push(phi.transpose() * &tvl.b_samples()[i]);
    }
    PeriodicLinearSystem::new(frame.s_grid.clone(), a, b, tvl.rho_samples().to_vec())
}

/// One-period controllability Gramian `∫ Φ(T, τ)B(τ)Bᵀ(τ)Φᵀ(T, τ) dτ`.
pub fn controllability_gramian(plin: &PeriodicLinearSystem) -> Result<DMatrix<f64>> {
    let k = plin.dim();
    let rhs = |s: f64, w: &DVector<f64>| -> Result<DVector<f64>> {
        let wm = DMatrix::from_column_slice(k, k, w.as_slice());
        let a = plin.a_at(s);
        let b = plin.b_at(s);
        let dw = (&a * &wm + &wm * a.transpose() + &b * b.transpose()) / plin.rho_at(s);
        Ok(DVector::from_column_slice(dw.as_slice()))
    };
    let end = plin.s0() + plin.period();
    let out = integrate(rhs, plin.s0(), &DVector::zeros(k * k), &[end], &OdeOptions::default(), None)?;
    Ok(linalg::symmetrize(&DMatrix::from_column_slice(k, k, out[0].as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn a_perp_matches_closed_form() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let fr = frame_at(&sys, &orbit, FRAC_PI_2).unwrap();
        let ap = a_perp_orthogonal(&sys, &orbit, &fr, FRAC_PI_2).unwrap();
        assert!((ap - m(3, 3, &[0.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
        let fr = frame_at(&sys, &orbit, 0.0).unwrap();
        let ap = a_perp_orthogonal(&sys, &orbit, &fr, 0.0).unwrap();
        assert!((ap - m(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn gamma_row_of_a_perp() {
        let (sys, orbit) = systems::bh_circle(1.3).unwrap();
        let s = 0.77;
        let fr = frame_at(&sys, &orbit, s).unwrap();
        let a = a_matrix(&sys, &orbit, &fr, s, true).unwrap();
        let ap = a_perp_orthogonal(&sys, &orbit, &fr, s).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.1, 0.4]);
        let t = &fr.tangent;
        let direct = -(t.transpose() * a.transpose() * &v)[0] / t.norm_squared();
        assert!(((&fr.gamma * &ap * &v)[0] - direct).abs() < 1e-13);
    }

    #[test]
    fn b_perp_values() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        for s in [0.0, 1.0, 4.0] {
            let fr = frame_at(&sys, &orbit, s).unwrap();
            let b = b_perp(&sys, &fr);
            assert!((&b - m(3, 1, &[s.sin(), s.cos(), 1.0])).norm() < 1e-14);
            assert!((&fr.gamma * b).norm() < 1e-14);
        }
        // an input along the tangent is annihilated
        let f: crate::dynsys::VectorField = Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0]]));
        let g: crate::dynsys::MatrixField = Arc::new(|x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[x[1], -x[0]]));
        let sys2 = ControlAffineSystem::new(2, 1, f, g).unwrap();
        let xs: crate::dynsys::Curve = Arc::new(|s: f64| DVector::from_vec(vec![s.sin(), s.cos()]));
        let orbit2 = OrbitParameterization::new(0.0, TAU, xs).unwrap();
        let fr = frame_at(&sys2, &orbit2, 0.4).unwrap();
        assert!(b_perp(&sys2, &fr).norm() < 1e-8);
    }

    #[test]
    fn tvl_orthogonal_samples_closed_form() {
        let a = 1.0;
        let (sys, orbit) = systems::bh_circle(a).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 64).unwrap();
        assert!(tvl.has_constraint());
        for (i, &s) in tvl.grid().iter().enumerate() {
            let expected = if s == 0.0 {
                m(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
            } else {
                let fr = frame_at(&sys, &orbit, s).unwrap();
                let am = a_matrix(&sys, &orbit, &fr, s, false).unwrap();
                let t = &fr.tangent;
                &fr.omega * &am - t * t.transpose() * am.transpose() / t.norm_squared()
            };
            assert!((&tvl.a_samples()[i] - expected).norm() < 1e-10);
            assert!((tvl.rho_samples()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_system_values() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let cmp = comparison_system(&sys, &orbit, 64).unwrap();
        assert!(!cmp.has_constraint());
        let a0 = &cmp.a_samples()[0];
        assert!((a0 - m(3, 3, &[0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
        assert!((&cmp.b_samples()[0] - m(3, 1, &[0.0, 1.0, 1.0])).norm() < 1e-14);
        let fr = frame_at(&sys, &orbit, FRAC_PI_4).unwrap();
        let am = &fr.omega * a_matrix(&sys, &orbit, &fr, FRAC_PI_4, false).unwrap();
        let h = 0.5_f64.sqrt();
        assert!((am - m(3, 3, &[-0.5, 0.5, h, -0.5, 0.5, h, 0.0, 0.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn not_an_orbit_is_rejected() {
        let (_, orbit) = systems::bh_circle(1.0).unwrap();
        let f: crate::dynsys::VectorField =
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[1] + x[0] * x[2], -x[0] + x[1] * x[2], 1.0]));
        let g: crate::dynsys::MatrixField = Arc::new(|x: &DVector<f64>| DMatrix::from_column_slice(3, 1, &[x[0], x[1], 1.0]));
        let wrong = ControlAffineSystem::new(3, 1, f, g).unwrap();
        assert!(matches!(tvl_orthogonal(&wrong, &orbit, 32), Err(Error::NotAnOrbit { .. })));
    }

    #[test]
    fn pi_dagger_cases() {
        let omega = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        let eye = DMatrix::identity(3, 3);
        assert!((pi_dagger(&eye, &omega).unwrap() - &eye).norm() < 1e-14);
        let mut stacked = DMatrix::zeros(5, 3);
        stacked.view_mut((0, 0), (3, 3)).copy_from(&eye);
        let d = pi_dagger(&stacked, &omega).unwrap();
        assert!((&d - stacked.transpose()).norm() < 1e-14);
        let short = m(1, 3, &[0.0, 1.0, 0.0]);
        assert!(matches!(pi_dagger(&short, &omega), Err(Error::RankDeficient(_))));
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let s = 1.1;
        let fr = frame_at(&sys, &orbit, s).unwrap();
        let pi = m(2, 3, &[0.3, 1.0, -0.2, 0.5, -0.4, 1.0]);
        let d = pi_dagger(&pi, &fr.omega).unwrap();
        let psi = &pi * &fr.omega;
        assert!((&psi * &d - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((&fr.gamma * &d).norm() < 1e-14);
    }

    #[test]
    fn validation_examples() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let z = TransverseCoordinateMap::excessive_z(&orbit);
        let rep = validate_transverse_coords(&z, &sys, 32).unwrap();
        assert!(rep.valid, "{rep:?}");
        assert!(rep.checks.iter().all(|c| c.rank_pi == 3 && c.rank_dy == 2));
        let sigma = systems::bh_minimal_coordinates(1.0, &orbit);
        let rep = validate_transverse_coords(&sigma, &sys, 32).unwrap();
        assert!(rep.valid, "{rep:?}");
        assert!(rep.max_parameter_relation_residual < 1e-5);
        let t_orbit = orbit.clone();
        let scalar = TransverseCoordinateMap::new(
            1,
            Arc::new(move |s: f64, x: &DVector<f64>| {
                DVector::from_element(1, t_orbit.tangent(s).unwrap().dot(&(x - t_orbit.point(s))))
            }),
            ProjectionOperator::orthogonal(orbit.clone()),
        );
        let rep = validate_transverse_coords(&scalar, &sys, 32).unwrap();
        assert!(!rep.dimension_ok && !rep.valid);
    }

    #[test]
    fn hessian_difference_matches_orthogonal_closed_form() {
        // for the unit circle in the plane x3 = 0, D²p on the orbit applied to
        // the tangent direction is the derivative of Γ(s) = x_s'ᵀ
        let (_, orbit) = systems::bh_circle(1.0).unwrap();
        let op = ProjectionOperator::orthogonal(orbit.clone());
        for s in [0.2, 2.5] {
            let h = op.hessian(s).unwrap();
            let t = orbit.tangent(s).unwrap();
            let gamma_rate = orbit.curvature(s).transpose();
            assert!((t.transpose() * &h - gamma_rate).norm() < 1e-8, "{h}");
        }
    }

    #[test]
    fn general_tvl_of_excessive_map_agrees_on_constraint() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 32).unwrap();
        let z = TransverseCoordinateMap::excessive_z(&orbit);
        let gen = tvl_general(&z, &sys, 32).unwrap();
        for i in 0..32 {
            let kernel = &tvl.projector_samples().unwrap()[i];
            let diff = (&gen.a_samples()[i] - &tvl.a_samples()[i]) * kernel;
            assert!(diff.norm() < 1e-6, "{diff}");
            assert!((&gen.b_samples()[i] - &tvl.b_samples()[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn minimal_pair_is_double_integrator() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let sigma = systems::bh_minimal_coordinates(1.0, &orbit);
        let expected_a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let expected_b = m(2, 1, &[0.0, 1.0]);
        let gen = tvl_general(&sigma, &sys, 32).unwrap();
        let min = minimal_tvl(&sigma, &sys, 32).unwrap().to_parameter_domain().unwrap();
        for i in 0..32 {
            assert!((&gen.a_samples()[i] - &expected_a).norm() < 1e-6, "{}", gen.a_samples()[i]);
            assert!((&min.a_samples()[i] - &expected_a).norm() < 1e-6, "{}", min.a_samples()[i]);
            assert!((&min.b_samples()[i] - &expected_b).norm() < 1e-12);
            assert!(gen.constraint_samples().unwrap()[i].norm() < 1e-12);
        }
    }

    #[test]
    fn doubling_the_drift_rescales_the_input_only_in_parameter_domain() {
        let a = 1.0;
        let (sys, orbit) = systems::bh_circle(a).unwrap();
        let f: crate::dynsys::VectorField =
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![2.0 * (x[1] + x[0] * x[2]), 2.0 * (-x[0] + x[1] * x[2]), 0.0]));
        let g: crate::dynsys::MatrixField = Arc::new(|x: &DVector<f64>| DMatrix::from_column_slice(3, 1, &[x[0], x[1], 1.0]));
        let fast = ControlAffineSystem::new(3, 1, f, g).unwrap();
        let sigma = systems::bh_minimal_coordinates(a, &orbit);
        let slow = minimal_tvl(&sigma, &sys, 16).unwrap();
        let quick = minimal_tvl(&sigma, &fast, 16).unwrap();
        for i in 0..16 {
            assert!((quick.rho_samples()[i] - 2.0).abs() < 1e-12);
            assert!((&quick.a_samples()[i] - &slow.a_samples()[i] * 2.0).norm() < 1e-6);
        }
        let slow = slow.to_parameter_domain().unwrap();
        let quick = quick.to_parameter_domain().unwrap();
        for i in 0..16 {
            assert!((&quick.a_samples()[i] - &slow.a_samples()[i]).norm() < 1e-6);
            assert!((&quick.b_samples()[i] - &slow.b_samples()[i] * 0.5).norm() < 1e-12);
        }
    }

    #[test]
    fn phase_variation_rows() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let z = TransverseCoordinateMap::excessive_z(&orbit);
        let pv = phase_variation_system(&z, &sys, 32).unwrap();
        for i in 0..32 {
            assert!(pv.state_rows[i].iter().all(|v| v.is_finite()));
            assert!(pv.input_rows[i].norm() < 1e-14);
            assert_eq!(pv.rate(i, &DVector::zeros(3), &DVector::zeros(1)), 0.0);
        }
    }

    #[test]
    fn frame_on_circle() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let fr = transverse_frame(&sys, &orbit, 128).unwrap();
        let phi0 = &fr.bases[0];
        assert!((phi0 - m(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0])).norm() < 1e-14);
        for (s, phi) in fr.s_grid.iter().zip(&fr.bases) {
            let g = frame_at(&sys, &orbit, *s).unwrap().gamma;
            assert!((g * phi).norm() < 1e-13);
            assert!((phi.transpose() * phi - DMatrix::identity(2, 2)).norm() < 1e-13);
        }
        fr.require_closed().unwrap();
        assert!((fr.holonomy() - DMatrix::identity(2, 2)).norm() < 1e-6);
    }

    #[test]
    fn reduced_pair_dimensions_and_gramian() {
        let (sys, orbit) = systems::bh_circle(1.0).unwrap();
        let fr = transverse_frame(&sys, &orbit, 128).unwrap();
        let red = reduced_pair(&sys, &orbit, &fr).unwrap();
        assert_eq!(red.dim(), 2);
        let w = controllability_gramian(&red).unwrap();
        let min_eig = w.symmetric_eigenvalues().min();
        assert!(min_eig > 1e-3, "{w}");

        let (sys, orbit) = systems::planar_limit_cycle(1.0).unwrap();
        let fr = transverse_frame(&sys, &orbit, 64).unwrap();
        assert_eq!(reduced_pair(&sys, &orbit, &fr).unwrap().dim(), 1);
    }

    #[test]
    fn nonvanishing_direction_solves_undriven_tvl() {
        let (sys, orbit) = systems::bh_circle(2.0).unwrap();
        let tvl = tvl_orthogonal(&sys, &orbit, 256).unwrap();
        let y0 = nonvanishing_direction(&sys, &orbit, 0.0).unwrap();
        let rhs = |s: f64, y: &DVector<f64>| Ok(tvl.a_at(s) * y / tvl.rho_at(s));
        let targets = [1.0, 3.0, TAU];
        let out = integrate(rhs, 0.0, &y0, &targets, &OdeOptions::default(), None).unwrap();
        for (s, y) in targets.iter().zip(out) {
            let expected = nonvanishing_direction(&sys, &orbit, *s).unwrap();
            assert!((y - expected).norm() < 1e-7);
        }
    }
}
