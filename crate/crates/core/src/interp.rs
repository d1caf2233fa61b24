//! Periodic interpolation of sampled vector- and matrix-valued functions.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Periodic cubic spline through vector-valued samples.
///
/// The grid covers `[s0, s0 + period]` with the closing sample duplicated; the
/// duplicate is not stored.
#[derive(Debug, Clone)]
pub struct PeriodicSpline {
    knots: Vec<f64>,
    period: f64,
    dim: usize,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl PeriodicSpline {
    /// `grid` must be strictly increasing with `grid.last() - grid[0]` the
    /// period; `values[i]` is the sample at `grid[i]`. The last sample is
    /// expected to equal the first and is ignored.
    pub fn new(grid: &[f64], values: &[Vec<f64>]) -> Result<Self> {
        if grid.len() < 4 {
            return Err(Error::invalid("periodic spline needs at least 4 grid points"));
        }
        if grid.len() != values.len() {
            return Err(Error::invalid("grid and sample counts differ"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("samples have inconsistent dimension"));
        }
        let n = grid.len() - 1;
        let period = grid[n] - grid[0];
        let knots = grid.to_vec();
        let h: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();

        let mut flat = Vec::with_capacity(n * dim);
        for v in &values[..n] {
            flat.extend_from_slice(v);
        }

        let sub: Vec<f64> = (0..n).map(|i| h[(i + n - 1) % n]).collect();
        let diag: Vec<f64> = (0..n).map(|i| 2.0 * (h[(i + n - 1) % n] + h[i])).collect();
        let sup: Vec<f64> = h.clone();

        let mut second = vec![0.0; n * dim];
        let mut rhs = vec![0.0; n];
        for j in 0..dim {
            for i in 0..n {
                let y = |k: usize| flat[(k % n) * dim + j];
                let hp = h[(i + n - 1) % n];
                rhs[i] = 6.0 * ((y(i + 1) - y(i)) / h[i] - (y(i) - y(i + n - 1)) / hp);
            }
            let m = solve_cyclic(&sub, &diag, &sup, &rhs);
            for i in 0..n {
                second[i * dim + j] = m[i];
            }
        }

        Ok(Self {
            knots,
            period,
            dim,
            values: flat,
            second,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    fn locate(&self, s: f64) -> (usize, f64, f64) {
        let s0 = self.knots[0];
        let mut u = (s - s0).rem_euclid(self.period) + s0;
        if u >= self.knots[self.knots.len() - 1] {
            u = s0;
        }
        let i = match self.knots.binary_search_by(|k| k.total_cmp(&u)) {
            Ok(i) => i.min(self.knots.len() - 2),
            Err(i) => i - 1,
        };
        let h = self.knots[i + 1] - self.knots[i];
        (i, u - self.knots[i], h)
    }

    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        let (i, a, h) = self.locate(s);
        let n = self.knots.len() - 1;
        let i1 = (i + 1) % n;
        let b = h - a;
        for j in 0..self.dim {
            let (y0, y1) = (self.values[i * self.dim + j], self.values[i1 * self.dim + j]);
            let (m0, m1) = (self.second[i * self.dim + j], self.second[i1 * self.dim + j]);
            out[j] = m0 * b * b * b / (6.0 * h)
                + m1 * a * a * a / (6.0 * h)
                + (y0 / h - m0 * h / 6.0) * b
                + (y1 / h - m1 * h / 6.0) * a;
        }
    }

    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(s, &mut out);
        out
    }

    pub fn derivative(&self, s: f64) -> Vec<f64> {
        let (i, a, h) = self.locate(s);
        let n = self.knots.len() - 1;
        let i1 = (i + 1) % n;
        let b = h - a;
        (0..self.dim)
            .map(|j| {
                let (y0, y1) = (self.values[i * self.dim + j], self.values[i1 * self.dim + j]);
                let (m0, m1) = (self.second[i * self.dim + j], self.second[i1 * self.dim + j]);
                -m0 * b * b / (2.0 * h) + m1 * a * a / (2.0 * h) - (y0 / h - m0 * h / 6.0)
                    + (y1 / h - m1 * h / 6.0)
            })
            .collect()
    }
}

/// Cyclic tridiagonal solve (Sherman–Morrison on top of the Thomas algorithm).
fn solve_cyclic(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let alpha = sup[n - 1]; // couples the last row to x[0]
    let beta = sub[0]; // couples the first row to x[n-1]
    let gamma = -diag[0];
    let mut bb = diag.to_vec();
    bb[0] = diag[0] - gamma;
    bb[n - 1] = diag[n - 1] - alpha * beta / gamma;
    let x = thomas(sub, &bb, sup, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = thomas(sub, &bb, sup, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / m;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Periodic cubic spline of matrix-valued samples.
#[derive(Debug, Clone)]
pub struct MatrixSpline {
    rows: usize,
    cols: usize,
    spline: PeriodicSpline,
}

impl MatrixSpline {
    pub fn new(grid: &[f64], samples: &[DMatrix<f64>]) -> Result<Self> {
        let (rows, cols) = samples
            .first()
            .map(|m| m.shape())
            .ok_or_else(|| Error::invalid("no samples"))?;
        if samples.iter().any(|m| m.shape() != (rows, cols)) {
            return Err(Error::invalid("matrix samples have inconsistent shapes"));
        }
        let values: Vec<Vec<f64>> = samples.iter().map(|m| m.as_slice().to_vec()).collect();
        Ok(Self {
            rows,
            cols,
            spline: PeriodicSpline::new(grid, &values)?,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn eval(&self, s: f64) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &self.spline.eval(s))
    }

    pub fn derivative(&self, s: f64) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &self.spline.derivative(s))
    }
}

/// True when the grid spacing is uniform to relative precision `1e-9`.
pub fn is_uniform(grid: &[f64]) -> bool {
    if grid.len() < 2 {
        return true;
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    grid.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs())
}

/// Derivative of periodic matrix samples on a closed grid.
///
/// Uniform grids use FFT differentiation (exact for trigonometric polynomials
/// resolved by the grid); other grids fall back to the periodic spline.
pub fn periodic_derivative(grid: &[f64], samples: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    if grid.len() != samples.len() || grid.len() < 4 {
        return Err(Error::invalid("need at least 4 matching samples"));
    }
    if !is_uniform(grid) {
        let spline = MatrixSpline::new(grid, samples)?;
        return Ok(grid.iter().map(|&s| spline.derivative(s)).collect());
    }
    let n = grid.len() - 1;
    let period = grid[n] - grid[0];
    let (rows, cols) = samples[0].shape();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = vec![DMatrix::zeros(rows, cols); n + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for entry in 0..rows * cols {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[i].as_slice()[entry], 0.0);
        }
        fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            let freq = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            // the Nyquist mode of an even-length grid has no odd derivative
            let freq = if n.is_multiple_of(2) && k == n / 2 { 0.0 } else { freq };
            let w = std::f64::consts::TAU * freq / period;
            *b *= Complex::new(0.0, w) / n as f64;
        }
        inv.process(&mut buf);
        for i in 0..n {
            out[i].as_mut_slice()[entry] = buf[i].re;
        }
    }
    out[n] = out[0].clone();
    Ok(out)
}
