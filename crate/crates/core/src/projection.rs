//! Orthogonal projection onto the orbit and the moving frame `Γ(s)`, `Ω(s)`.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::dynsys::{ControlAffineSystem, OrbitParameterization};
use crate::{Error, Result};

/// Number of coarse samples used to seed an unhinted projection.
pub const SCAN_POINTS: usize = 256;
const MAX_NEWTON: usize = 50;

/// Purely geometric data at `s` for the orthogonal projection: no system needed.
#[derive(Debug, Clone)]
pub struct GeometricFrame {
    pub s: f64,
    pub x: DVector<f64>,
    pub tangent: DVector<f64>,
    pub curvature: DVector<f64>,
    pub gamma: RowDVector<f64>,
    pub omega: DMatrix<f64>,
}

impl GeometricFrame {
    pub fn at(orbit: &OrbitParameterization, s: f64) -> Result<Self> {
        let tangent = orbit.tangent(s)?;
        let gamma = tangent.transpose() / tangent.norm_squared();
        let n = tangent.len();
        let omega = DMatrix::identity(n, n) - &tangent * &gamma;
        Ok(Self {
            s,
            x: orbit.point(s),
            curvature: orbit.curvature(s),
            tangent,
            gamma,
            omega,
        })
    }
}

/// Frame of the projection operator at one orbit parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionFrame {
    pub s: f64,
    pub x_on_orbit: DVector<f64>,
    pub tangent: DVector<f64>,
    pub curvature: DVector<f64>,
    /// `Γ(s) = Dp(x_s(s))`.
    pub gamma: RowDVector<f64>,
    /// `Ω(s) = I − x_s'(s)Γ(s)`.
    pub omega: DMatrix<f64>,
    /// `ρ(s) = Γ(s) ẋ` along the nominal motion.
    pub rho: f64,
    /// Angle between `Γᵀ` and `x_s'`, zero for the orthogonal projection.
    pub theta: f64,
}

impl ProjectionFrame {
    /// Frame for an arbitrary projection operator whose on-orbit gradient is `gamma`.
    pub fn with_gamma(
        system: &ControlAffineSystem,
        orbit: &OrbitParameterization,
        s: f64,
        gamma: RowDVector<f64>,
    ) -> Result<Self> {
        let tangent = orbit.tangent(s)?;
        let x = orbit.point(s);
        let n = tangent.len();
        let omega = DMatrix::identity(n, n) - &tangent * &gamma;
        let rho = (&gamma * system.nominal_velocity(&x, s))[0];
        if !(rho > 0.0) {
            return Err(Error::NonPositiveRate { s, rho });
        }
        let cos_theta = (1.0 / (gamma.norm() * tangent.norm())).min(1.0);
        Ok(Self {
            s,
            curvature: orbit.curvature(s),
            x_on_orbit: x,
            tangent,
            gamma,
            omega,
            rho,
            theta: cos_theta.acos(),
        })
    }
}

/// Frame of the orthogonal projection operator at `s`.
pub fn frame_at(
    system: &ControlAffineSystem,
    orbit: &OrbitParameterization,
    s: f64,
) -> Result<ProjectionFrame> {
    let tangent = orbit.tangent(s)?;
    let gamma = tangent.transpose() / tangent.norm_squared();
    ProjectionFrame::with_gamma(system, orbit, s, gamma)
}

/// `Dp(x)` of the orthogonal projection for a point whose projection is `s`.
pub fn gamma_at(orbit: &OrbitParameterization, x: &DVector<f64>, s: f64) -> Result<RowDVector<f64>> {
    let t = orbit.tangent(s)?;
    let c = orbit.curvature(s);
    let t2 = t.norm_squared();
    let denominator = t2 - c.dot(&(x - orbit.point(s)));
    if denominator.abs() < 1e-9 * t2 {
        return Err(Error::FocalPointReached { s, denominator });
    }
    Ok(t.transpose() / denominator)
}

/// Orthogonal projection `p(x)`, reduced into `[s0, s0 + period)`.
///
/// With a hint, Newton's method starts there and its result wins even if a
/// remote part of the orbit is closer. Without one, a coarse scan over
/// [`SCAN_POINTS`] samples seeds the iteration.
pub fn project(orbit: &OrbitParameterization, x: &DVector<f64>, hint: Option<f64>) -> Result<f64> {
    Ok(orbit.wrap(project_lifted(orbit, x, hint)?))
}

/// Like [`project`] but the result is not wrapped: with a hint it lies in the
/// branch continuously connected to the hint (used to keep `s(t)` unwrapped).
pub fn project_lifted(
    orbit: &OrbitParameterization,
    x: &DVector<f64>,
    hint: Option<f64>,
) -> Result<f64> {
    let start = match hint {
        Some(h) => h,
        None => coarse_scan(orbit, x)?,
    };
    newton(orbit, x, start)
}

fn coarse_scan(orbit: &OrbitParameterization, x: &DVector<f64>) -> Result<f64> {
    let step = orbit.period() / SCAN_POINTS as f64;
    let dist: Vec<f64> = (0..SCAN_POINTS)
        .map(|i| (x - orbit.point(orbit.s0() + step * i as f64)).norm())
        .collect();
    let n = SCAN_POINTS;
    let best = (0..n).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
    let is_local_min = |i: usize| dist[i] <= dist[(i + n - 1) % n] && dist[i] <= dist[(i + 1) % n];
    for j in 0..n {
        let sep = (j + n - best) % n;
        let sep = sep.min(n - sep);
        if sep > 1 && is_local_min(j) && dist[j] <= 1.01 * dist[best] {
            return Err(Error::ProjectionAmbiguous {
                first: orbit.s0() + step * best as f64,
                second: orbit.s0() + step * j as f64,
            });
        }
    }
    Ok(orbit.s0() + step * best as f64)
}

fn newton(orbit: &OrbitParameterization, x: &DVector<f64>, start: f64) -> Result<f64> {
    let tol = 1e-10 * (1.0 + x.norm());
    let max_step = orbit.period() / 16.0;
    let mut s = start;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let t = orbit.tangent(s)?;
        let z = x - orbit.point(s);
        residual = t.dot(&z);
        let slope = orbit.curvature(s).dot(&z) - t.norm_squared();
        if residual.abs() < tol {
            // one extra step takes the quadratically converging iterate to full precision
            if slope < 0.0 {
                s -= residual / slope;
            }
            return Ok(s);
        }
        let step = if slope < 0.0 {
            (-residual / slope).clamp(-max_step, max_step)
        } else {
            // not near a minimum of the distance: move downhill
            residual.signum() * orbit.period() / 64.0
        };
        s += step;
    }
    Err(Error::NewtonDiverged {
        iterations: MAX_NEWTON,
        residual,
    })
}

/// Transverse coordinates `(s, z⊥)` with `z⊥ = x − x_s(s)`.
pub fn transverse_coords(
    orbit: &OrbitParameterization,
    x: &DVector<f64>,
    hint: Option<f64>,
) -> Result<(f64, DVector<f64>)> {
    let s = project(orbit, x, hint)?;
    let z = x - orbit.point(s);
    Ok((s, z))
}

/// Operational neighbourhood of the orbit for the orthogonal projection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Tube {
    /// Reach estimate; beyond it the projection is not trusted at all.
    pub reach: f64,
    /// `0.2 · reach`, inside which results are trusted without warning.
    pub trusted: f64,
}

impl Tube {
    pub fn of(orbit: &OrbitParameterization) -> Result<Self> {
        let reach = orbit.reach_estimate(SCAN_POINTS)?;
        Ok(Self {
            reach,
            trusted: 0.2 * reach,
        })
    }
}
