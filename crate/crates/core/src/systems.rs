//! Built-in example systems and the name-keyed system registry.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynsys::{ControlAffineSystem, Curve, MatrixField, OrbitParameterization, VectorField};
use crate::projection::GeometricFrame;
use crate::transverse::{ProjectionOperator, TransverseCoordinateMap};
use crate::{Error, Result};

/// The three-state system
///
/// ```text
/// ẋ₁ = x₂ + x₁x₃ + x₁u
/// ẋ₂ = −x₁ + x₂x₃ + x₂u
/// ẋ₃ = u
/// ```
///
/// with its undriven circular orbit of radius `a`,
/// `x_s(s) = (a sin s, a cos s, 0)`, `s = atan2(x₁, x₂)`.
pub fn bh_circle(a: f64) -> Result<(ControlAffineSystem, OrbitParameterization)> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("radius a must be positive (got {a})")));
    }
    let f: VectorField = Arc::new(|x: &DVector<f64>| {
        DVector::from_vec(vec![x[1] + x[0] * x[2], -x[0] + x[1] * x[2], 0.0])
    });
    let g: MatrixField = Arc::new(|x: &DVector<f64>| DMatrix::from_column_slice(3, 1, &[x[0], x[1], 1.0]));
    let df: MatrixField = Arc::new(|x: &DVector<f64>| {
        DMatrix::from_row_slice(3, 3, &[x[2], 1.0, x[0], -1.0, x[2], x[1], 0.0, 0.0, 0.0])
    });
    let dg: MatrixField = Arc::new(|_x: &DVector<f64>| {
        DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    });
    let system = ControlAffineSystem::new(3, 1, f, g)?
        .with_jacobian(df)
        .with_input_jacobians(vec![dg])?;

    let xs: Curve = Arc::new(move |s: f64| DVector::from_vec(vec![a * s.sin(), a * s.cos(), 0.0]));
    let dxs: Curve = Arc::new(move |s: f64| DVector::from_vec(vec![a * s.cos(), -a * s.sin(), 0.0]));
    let d2xs: Curve = Arc::new(move |s: f64| DVector::from_vec(vec![-a * s.sin(), -a * s.cos(), 0.0]));
    let orbit = OrbitParameterization::new(0.0, TAU, xs)?
        .with_tangent(dxs)
        .with_curvature(d2xs);
    Ok((system, orbit))
}

/// Closed-form stabilizing gain `K(s) = −[sin s, cos s, 1]` for [`bh_circle`].
pub fn bh_analytic_gain(s: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 3, &[-s.sin(), -s.cos(), -1.0])
}

/// `K̂(s)` with `B⊥B⊥ᵀR⊥ = K̂Ω` for the closed-form Riccati family.
pub fn bh_auxiliary_gain(a: f64, s: f64) -> DMatrix<f64> {
    let (sn, cs) = s.sin_cos();
    DMatrix::from_row_slice(3, 3, &[a, 0.0, a * sn, 0.0, a, a * cs, sn, cs, 1.0])
}

/// Closed-form family `R⊥(s) = Ωⁱ diag(1/a, 1/a, 1) Ωʲ + k·x_s'x_s'ᵀ/a²` solving
/// the Ω-projected Riccati equation of the analytic gain.
pub fn bh_riccati_family(a: f64, k: f64, i: u32, j: u32, s: f64) -> DMatrix<f64> {
    let (sn, cs) = s.sin_cos();
    let omega = DMatrix::from_row_slice(3, 3, &[sn * sn, sn * cs, 0.0, sn * cs, cs * cs, 0.0, 0.0, 0.0, 1.0]);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / a, 1.0 / a, 1.0]));
    let along = DMatrix::from_row_slice(
        3,
        3,
        &[cs * cs, -sn * cs, 0.0, -sn * cs, sn * sn, 0.0, 0.0, 0.0, 0.0],
    );
    omega.pow(i) * d * omega.pow(j) + along * k
}

/// Minimal transverse coordinates of [`bh_circle`]:
/// `σ₁ = ln √(x₁² + x₂²) − ln a − x₃`, `σ₂ = x₃`, paired with the orthogonal projection.
pub fn bh_minimal_coordinates(a: f64, orbit: &OrbitParameterization) -> TransverseCoordinateMap {
    let value = Arc::new(move |_s: f64, x: &DVector<f64>| {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        DVector::from_vec(vec![r.ln() - a.ln() - x[2], x[2]])
    });
    let dx = Arc::new(|_s: f64, x: &DVector<f64>| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        DMatrix::from_row_slice(2, 3, &[x[0] / r2, x[1] / r2, -1.0, 0.0, 0.0, 1.0])
    });
    TransverseCoordinateMap::new(2, value, ProjectionOperator::orthogonal(orbit.clone()))
        .with_state_jacobian(dx)
}

/// Planar limit cycle `ẋ = J x + x(r² − ‖x‖²) + (0, u)` on the circle of radius `r`.
pub fn planar_limit_cycle(r: f64) -> Result<(ControlAffineSystem, OrbitParameterization)> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("radius r must be positive (got {r})")));
    }
    let f: VectorField = Arc::new(move |x: &DVector<f64>| {
        let e = r * r - x.norm_squared();
        DVector::from_vec(vec![x[1] + x[0] * e, -x[0] + x[1] * e])
    });
    let g: MatrixField = Arc::new(|_x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    let system = ControlAffineSystem::new(2, 1, f, g)?;
    let xs: Curve = Arc::new(move |s: f64| DVector::from_vec(vec![r * s.sin(), r * s.cos()]));
    let orbit = OrbitParameterization::new(0.0, TAU, xs)?;
    Ok((system, orbit))
}

pub type GainFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// A system instance resolved from the registry.
#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub system: ControlAffineSystem,
    pub orbit: OrbitParameterization,
    /// Closed-form stabilizing gain, when the system has one.
    pub reference_gain: Option<GainFn>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("reference_gain", &self.reference_gain.is_some())
            .finish()
    }
}

type Builder = Box<dyn Fn(&BTreeMap<String, f64>) -> Result<SystemSpec> + Send + Sync>;

/// Systems keyed by name, instantiated from a flat parameter map.
pub struct SystemRegistry {
    builders: BTreeMap<String, (Vec<(&'static str, f64)>, Builder)>,
}

impl Default for SystemRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// Registry with `bh-circle` (parameter `a`, default 1) and
    /// `planar-limit-cycle` (parameter `r`, default 1).
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("bh-circle", vec![("a", 1.0)], |p| {
            let a = p["a"];
            let (system, orbit) = bh_circle(a)?;
            Ok(SystemSpec {
                name: "bh-circle".into(),
                params: p.clone(),
                system,
                orbit,
                reference_gain: Some(Arc::new(bh_analytic_gain)),
            })
        });
        reg.register("planar-limit-cycle", vec![("r", 1.0)], |p| {
            let (system, orbit) = planar_limit_cycle(p["r"])?;
            Ok(SystemSpec {
                name: "planar-limit-cycle".into(),
                params: p.clone(),
                system,
                orbit,
                reference_gain: None,
            })
        });
        reg
    }

    /// Registers a builder; `defaults` lists every accepted parameter.
    pub fn register<F>(&mut self, name: &str, defaults: Vec<(&'static str, f64)>, builder: F)
    where
        F: Fn(&BTreeMap<String, f64>) -> Result<SystemSpec> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_string(), (defaults, Box::new(builder)));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.builders.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &BTreeMap<String, f64>) -> Result<SystemSpec> {
        let (defaults, builder) = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownSystem(name.to_string()))?;
        let mut full: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in params {
            if !full.contains_key(k) {
                return Err(Error::invalid(format!("system {name:?} has no parameter {k:?}")));
            }
            full.insert(k.clone(), *v);
        }
        builder(&full)
    }
}

/// Orbit-local sanity helper used by tests and reports: the orthogonal frame
/// identities `‖ΓΩ‖`, `‖Ωx_s'‖`, `‖Ω² − Ω‖`, `|Γx_s' − 1|` maximised over a grid.
pub fn frame_identity_residuals(orbit: &OrbitParameterization, grid_size: usize) -> Result<[f64; 4]> {
    let mut worst = [0.0_f64; 4];
    for i in 0..grid_size {
        let s = orbit.s0() + orbit.period() * i as f64 / grid_size as f64;
        let g = GeometricFrame::at(orbit, s)?;
        let vals = [
            (&g.gamma * &g.omega).norm(),
            (&g.omega * &g.tangent).norm(),
            (&g.omega * &g.omega - &g.omega).norm(),
            ((&g.gamma * &g.tangent)[0] - 1.0).abs(),
        ];
        for (w, v) in worst.iter_mut().zip(vals) {
            *w = w.max(v);
        }
    }
    Ok(worst)
}
