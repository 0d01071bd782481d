//! Fixed-step and adaptive integrators for ODEs, plus a method-of-steps
//! integrator for systems with discrete delays.
//!
//! All integrators are pure functions of their inputs. A [`HistoryBuffer`]
//! is owned by the solve that appends to it.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_i = t0 + i * dt` for `i = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidGrid(format!("t0 = {t0}, dt = {dt}")));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid covering `[0, t_end]` with spacing `dt`, rounding the step count.
    pub fn spanning(t_end: f64, dt: f64) -> Result<Self> {
        let n = (t_end / dt).round();
        if !(n >= 0.0) {
            return Err(Error::InvalidGrid(format!("t_end = {t_end}, dt = {dt}")));
        }
        Self::new(0.0, dt, n as usize)
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.time(i)).collect()
    }
}

/// Sampled solution: `states[[i, j]]` is series `j` at `times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Array2<f64>) -> Result<Self> {
        if times.len() != states.nrows() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: states.nrows(),
            });
        }
        Ok(Self { times, states })
    }

    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut states = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            states.row_mut(i).iter_mut().zip(r).for_each(|(d, s)| *d = *s);
        }
        Self::new(times, states)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, i: usize) -> Vec<f64> {
        self.states.row(i).to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4,
    DormandPrince,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    /// Ignored by RK4.
    pub rtol: f64,
    /// Ignored by RK4.
    pub atol: f64,
}

impl SolverSpec {
    pub const fn rk4() -> Self {
        Self {
            method: Method::Rk4,
            rtol: 0.0,
            atol: 0.0,
        }
    }

    pub const fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::DormandPrince,
            rtol,
            atol,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.method == Method::DormandPrince && !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidConfig(
                "Dormand-Prince requires rtol > 0 and atol > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self::rk4()
    }
}

/// Autonomous or time-dependent right-hand side `dz/dt = f(t, z)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, z: &[f64], dz: &mut [f64]);
}

/// Right-hand side with discrete delays:
/// `dz/dt = f(t, z(t), z(t - tau_1), ..., z(t - tau_m))`.
pub trait DelayField {
    fn dim(&self) -> usize;
    fn delays(&self) -> &[f64];
    /// `delayed[k]` holds `z(t - tau_k)`.
    fn eval(&self, t: f64, z: &[f64], delayed: &[&[f64]], dz: &mut [f64]);
}

/// Adapts a closure to [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, z: &[f64], dz: &mut [f64]) {
        (self.f)(t, z, dz)
    }
}

/// Adapts a closure to [`DelayField`].
pub struct FnDelayField<F> {
    dim: usize,
    delays: Vec<f64>,
    f: F,
}

impl<F: Fn(f64, &[f64], &[&[f64]], &mut [f64])> FnDelayField<F> {
    pub fn new(dim: usize, delays: Vec<f64>, f: F) -> Self {
        Self { dim, delays, f }
    }
}

impl<F: Fn(f64, &[f64], &[&[f64]], &mut [f64])> DelayField for FnDelayField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn delays(&self) -> &[f64] {
        &self.delays
    }
    fn eval(&self, t: f64, z: &[f64], delayed: &[&[f64]], dz: &mut [f64]) {
        (self.f)(t, z, delayed, dz)
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

fn axpy(out: &mut [f64], base: &[f64], a: f64, x: &[f64]) {
    for ((o, b), xi) in out.iter_mut().zip(base).zip(x) {
        *o = b + a * xi;
    }
}

/// One classical Runge-Kutta step of size `h` from `(t, z)`.
pub fn rk4_step<F>(mut f: F, z: &[f64], t: f64, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = z.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut y = vec![0.0; n];

    f(t, z, &mut k1);
    check_finite(&k1, t)?;
    axpy(&mut y, z, 0.5 * h, &k1);
    f(t + 0.5 * h, &y, &mut k2);
    check_finite(&k2, t)?;
    axpy(&mut y, z, 0.5 * h, &k2);
    f(t + 0.5 * h, &y, &mut k3);
    check_finite(&k3, t)?;
    axpy(&mut y, z, h, &k3);
    f(t + h, &y, &mut k4);
    check_finite(&k4, t)?;

    let out: Vec<f64> = (0..n)
        .map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite(&out, t + h)?;
    Ok(out)
}

/// RK4 with one step per grid interval.
pub fn rk4_solve<F>(mut f: F, z0: &[f64], grid: &TimeGrid) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    check_finite(z0, grid.t0)?;
    let mut rows = Vec::with_capacity(grid.n_points());
    rows.push(z0.to_vec());
    for i in 0..grid.n_steps {
        let next = rk4_step(&mut f, &rows[i], grid.time(i), grid.dt)?;
        rows.push(next);
    }
    Trajectory::from_rows(grid.times(), &rows)
}

// Dormand-Prince 5(4) tableau.
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
// b - b_hat
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn rms_scaled(v: &[f64], y: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(x, yi)| (x / (atol + rtol * yi.abs())).powi(2))
        .sum();
    (s / n).sqrt()
}

// Dense-output weights of the Dormand-Prince continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Fourth-order continuous extension on `[t, t + h]` at fraction `theta`.
#[allow(clippy::too_many_arguments)]
fn dense_output(
    y0: &[f64],
    y1: &[f64],
    k: [&[f64]; 7],
    h: f64,
    theta: f64,
) -> Vec<f64> {
    let [k1, _k2, k3, k4, k5, k6, k7] = k;
    let th1 = 1.0 - theta;
    (0..y0.len())
        .map(|i| {
            let ydiff = y1[i] - y0[i];
            let bspl = h * k1[i] - ydiff;
            let r4 = ydiff - h * k7[i] - bspl;
            let r5 = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            y0[i] + theta * (ydiff + th1 * (bspl + theta * (r4 + th1 * r5)))
        })
        .collect()
}

/// Adaptive Dormand-Prince 5(4) with the method's fourth-order continuous
/// extension evaluated at the grid points. The step size never adapts to the output grid, so refining the
/// grid leaves the accepted steps unchanged.
pub fn dopri5_solve<F>(mut f: F, z0: &[f64], grid: &TimeGrid, spec: &SolverSpec) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if spec.method != Method::DormandPrince {
        return Err(Error::UnsupportedSolver(
            "dopri5_solve called with a fixed-step spec".into(),
        ));
    }
    spec.validate()?;
    check_finite(z0, grid.t0)?;

    let (rtol, atol) = (spec.rtol, spec.atol);
    let n = z0.len();
    let t_start = grid.t0;
    let t_end = grid.t_end();
    let mut rows = Vec::with_capacity(grid.n_points());
    rows.push(z0.to_vec());
    if grid.n_steps == 0 || n == 0 {
        for _ in 0..grid.n_steps {
            rows.push(z0.to_vec());
        }
        return Trajectory::from_rows(grid.times(), &rows);
    }
    let h_floor = 1e-10 * (t_end - t_start);

    let mut t = t_start;
    let mut y = z0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t, &y, &mut k1);
    check_finite(&k1, t)?;

    // Initial step guess (Hairer, Norsett & Wanner II.4).
    let mut h = {
        let d0 = rms_scaled(&y, &y, rtol, atol);
        let d1 = rms_scaled(&k1, &y, rtol, atol);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let mut y1 = vec![0.0; n];
        axpy(&mut y1, &y, h0, &k1);
        let mut f1 = vec![0.0; n];
        f(t + h0, &y1, &mut f1);
        let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
        let d2 = rms_scaled(&diff, &y, rtol, atol) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(t_end - t_start)
    };

    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ys = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut next_out = 1usize;

    while next_out <= grid.n_steps {
        if t + h > t_end {
            h = t_end - t;
        }
        if h < h_floor {
            return Err(Error::StepSizeUnderflow { t, h, floor: h_floor });
        }

        for i in 0..n {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, &ys, &mut k2);
        for i in 0..n {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, &ys, &mut k3);
        for i in 0..n {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, &ys, &mut k4);
        for i in 0..n {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, &ys, &mut k5);
        for i in 0..n {
            ys[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, &ys, &mut k6);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        f(t + h, &y_new, &mut k7);
        for i in 0..n {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }

        let finite = y_new.iter().chain(&k7).all(|v| v.is_finite());
        let en = if finite {
            error_norm(&err, &y, &y_new, rtol, atol)
        } else {
            f64::INFINITY
        };

        if en <= 1.0 {
            let t_new = if t_end - (t + h) <= h_floor { t_end } else { t + h };
            while next_out <= grid.n_steps {
                let to = grid.time(next_out);
                if next_out == grid.n_steps {
                    if t_new < t_end {
                        break;
                    }
                    rows.push(y_new.clone());
                } else if to < t_new {
                    rows.push(dense_output(
                        &y,
                        &y_new,
                        [&k1, &k2, &k3, &k4, &k5, &k6, &k7],
                        h,
                        (to - t) / h,
                    ));
                } else if to == t_new {
                    rows.push(y_new.clone());
                } else {
                    break;
                }
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let fac = if en == 0.0 { 10.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 10.0) };
            h *= fac;
        } else {
            if !finite && !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { t });
            }
            let fac = if en.is_finite() { (0.9 * en.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
            h *= fac;
        }
    }
    Trajectory::from_rows(grid.times(), &rows)
}

/// Integrates an ODE right-hand side over `grid` with the requested method.
/// The returned trajectory has `grid.n_points()` rows including `z0`.
pub fn solve_ivp<V: VectorField + ?Sized>(
    field: &V,
    z0: &[f64],
    grid: &TimeGrid,
    spec: &SolverSpec,
) -> Result<Trajectory> {
    if z0.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: z0.len(),
        });
    }
    let f = |t: f64, z: &[f64], dz: &mut [f64]| field.eval(t, z, dz);
    match spec.method {
        Method::Rk4 => rk4_solve(f, z0, grid),
        Method::DormandPrince => dopri5_solve(f, z0, grid, spec),
    }
}

/// Rule giving the state for times before the first stored sample.
#[derive(Clone)]
pub enum InitialFunction {
    Constant(Vec<f64>),
    Custom(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl InitialFunction {
    pub fn at(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Constant(v) => v.clone(),
            Self::Custom(f) => f(t),
        }
    }
}

impl std::fmt::Debug for InitialFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// How a history lookup combines stored samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup {
    /// Before the first stored sample; answered by the initial function.
    Initial,
    Exact(usize),
    Linear { lo: usize, w_lo: f64, hi: usize, w_hi: f64 },
}

/// Grid-aligned past states `states[i]` at `t_first + i * dt`, plus an
/// optional initial function for earlier times.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    t_first: f64,
    dt: f64,
    states: Vec<Vec<f64>>,
    initial: Option<InitialFunction>,
}

const GRID_SNAP: f64 = 1e-9;

impl HistoryBuffer {
    /// Buffer starting at `t0` whose first stored state is `phi(t0)`.
    pub fn with_initial(t0: f64, dt: f64, phi: InitialFunction) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt = {dt}")));
        }
        let first = phi.at(t0);
        Ok(Self {
            t_first: t0,
            dt,
            states: vec![first],
            initial: Some(phi),
        })
    }

    /// Buffer from recorded samples only; lookups before `t_first` fail.
    pub fn from_samples(t_first: f64, dt: f64, samples: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt = {dt}")));
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset("history buffer needs at least one sample".into()));
        }
        Ok(Self {
            t_first,
            dt,
            states: samples,
            initial: None,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_first(&self) -> f64 {
        self.t_first
    }

    pub fn t_current(&self) -> f64 {
        self.t_first + (self.states.len() - 1) as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn latest(&self) -> &[f64] {
        self.states.last().expect("history buffer is never empty")
    }

    pub fn push(&mut self, state: Vec<f64>) {
        self.states.push(state);
    }

    /// Resolves `t` to stored indices. Times inside the step in progress
    /// (after the latest sample by at most one `dt`) resolve to the latest
    /// sample, which serves as the right interpolation endpoint.
    pub fn weights(&self, t: f64) -> Result<Lookup> {
        let s = (t - self.t_first) / self.dt;
        let last = self.states.len() - 1;
        let r = s.round();
        let snapped = (s - r).abs() <= GRID_SNAP * s.abs().max(1.0);
        if s < 0.0 && !(snapped && r == 0.0) {
            return match self.initial {
                Some(_) => Ok(Lookup::Initial),
                None => Err(self.out_of_range(t)),
            };
        }
        if snapped {
            let idx = r as usize;
            if idx <= last {
                return Ok(Lookup::Exact(idx));
            }
        }
        if s > last as f64 {
            return if s <= last as f64 + 1.0 + GRID_SNAP {
                Ok(Lookup::Exact(last))
            } else {
                Err(self.out_of_range(t))
            };
        }
        let lo = s.floor() as usize;
        let frac = s - lo as f64;
        Ok(Lookup::Linear {
            lo,
            w_lo: 1.0 - frac,
            hi: lo + 1,
            w_hi: frac,
        })
    }

    fn out_of_range(&self, t: f64) -> Error {
        Error::OutOfHistory {
            t,
            start: self.t_first,
            end: self.t_current(),
        }
    }

    pub fn lookup(&self, t: f64) -> Result<Vec<f64>> {
        Ok(match self.weights(t)? {
            Lookup::Initial => self
                .initial
                .as_ref()
                .expect("Initial lookup implies an initial function")
                .at(t),
            Lookup::Exact(i) => self.states[i].clone(),
            Lookup::Linear { lo, w_lo, hi, w_hi } => self.states[lo]
                .iter()
                .zip(&self.states[hi])
                .map(|(a, b)| w_lo * a + w_hi * b)
                .collect(),
        })
    }
}

/// Checks that every delay is a non-negative integer multiple of `dt` and
/// returns the multiples.
pub fn delay_steps(delays: &[f64], dt: f64) -> Result<Vec<usize>> {
    delays
        .iter()
        .map(|&d| {
            let s = d / dt;
            let r = s.round();
            if d < 0.0 || (s - r).abs() > 1e-6 * r.max(1.0) {
                Err(Error::DelayNotAligned { delay: d, dt })
            } else {
                Ok(r as usize)
            }
        })
        .collect()
}

/// Method-of-steps RK4 integration of a delay system. The buffer must end at
/// `grid.t0` and share its spacing; accepted states are appended to it.
/// Delays of zero read the current stage state, so the all-zero case is an
/// ODE. Stage lookups inside a step interpolate linearly on the buffer.
pub fn dde_solve<D: DelayField + ?Sized>(
    field: &D,
    buf: &mut HistoryBuffer,
    grid: &TimeGrid,
    spec: &SolverSpec,
) -> Result<Trajectory> {
    if spec.method != Method::Rk4 {
        return Err(Error::UnsupportedSolver(
            "delay systems are integrated with fixed-step RK4".into(),
        ));
    }
    if (buf.dt() - grid.dt).abs() > 1e-12 * grid.dt {
        return Err(Error::InvalidGrid(format!(
            "buffer dt {} differs from grid dt {}",
            buf.dt(),
            grid.dt
        )));
    }
    if (buf.t_current() - grid.t0).abs() > GRID_SNAP * grid.dt.max(grid.t0.abs()) {
        return Err(Error::InvalidGrid(format!(
            "buffer ends at {} but grid starts at {}",
            buf.t_current(),
            grid.t0
        )));
    }
    let n = field.dim();
    if buf.latest().len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: buf.latest().len(),
        });
    }
    let delays = field.delays().to_vec();
    if delays.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidConfig("delays must be non-negative".into()));
    }
    let tau_max = delays.iter().copied().fold(0.0, f64::max);
    if buf.weights(grid.t0 - tau_max).is_err() {
        return Err(Error::OutOfHistory {
            t: grid.t0 - tau_max,
            start: buf.t_first(),
            end: buf.t_current(),
        });
    }

    let h = grid.dt;
    let eval = |buf: &HistoryBuffer, t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let mut delayed: Vec<Vec<f64>> = Vec::with_capacity(delays.len());
        for &d in &delays {
            if d == 0.0 {
                delayed.push(y.to_vec());
            } else {
                delayed.push(buf.lookup(t - d)?);
            }
        }
        let refs: Vec<&[f64]> = delayed.iter().map(Vec::as_slice).collect();
        field.eval(t, y, &refs, out);
        check_finite(out, t)
    };

    let mut rows = Vec::with_capacity(grid.n_points());
    rows.push(buf.latest().to_vec());
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let z = buf.latest().to_vec();
        eval(buf, t, &z, &mut k1)?;
        axpy(&mut y, &z, 0.5 * h, &k1);
        eval(buf, t + 0.5 * h, &y, &mut k2)?;
        axpy(&mut y, &z, 0.5 * h, &k2);
        eval(buf, t + 0.5 * h, &y, &mut k3)?;
        axpy(&mut y, &z, h, &k3);
        eval(buf, t + h, &y, &mut k4)?;
        let next: Vec<f64> = (0..n)
            .map(|j| z[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        check_finite(&next, t + h)?;
        rows.push(next.clone());
        buf.push(next);
    }
    Trajectory::from_rows(grid.times(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, z: &[f64], dz: &mut [f64]) {
        for (d, v) in dz.iter_mut().zip(z) {
            *d = -v;
        }
    }

    #[test]
    fn rk4_zero_velocity_keeps_state() {
        let out = rk4_step(|_, _, dz: &mut [f64]| dz.fill(0.0), &[1.0, 2.0], 0.0, 0.1).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn rk4_exponential_step() {
        let out = rk4_step(decay, &[1.0], 0.0, 0.1).unwrap();
        assert!((out[0] - (-0.1f64).exp()).abs() <= 1e-7);
        assert!((out[0] - 0.9048374).abs() < 1e-7);
    }

    #[test]
    fn rk4_reports_non_finite() {
        let err = rk4_step(|_, _, dz: &mut [f64]| dz[0] = f64::NAN, &[1.0], 0.0, 0.1);
        assert!(matches!(err, Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn rk4_convergence_order() {
        let err_at = |dt: f64| {
            let grid = TimeGrid::spanning(1.0, dt).unwrap();
            let traj = rk4_solve(decay, &[1.0], &grid).unwrap();
            traj.times
                .iter()
                .enumerate()
                .map(|(i, t)| (traj.states[[i, 0]] - (-t).exp()).abs())
                .fold(0.0, f64::max)
        };
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&d| err_at(d)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn dopri_zero_field_is_constant() {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let traj = dopri5_solve(
            |_, _, dz: &mut [f64]| dz.fill(0.0),
            &[3.0, -1.0],
            &grid,
            &SolverSpec::dopri5(1e-7, 1e-9),
        )
        .unwrap();
        for i in 0..traj.len() {
            assert_eq!(traj.state(i), vec![3.0, -1.0]);
        }
    }

    #[test]
    fn dopri_matches_exponential() {
        let grid = TimeGrid::spanning(1.0, 0.01).unwrap();
        let traj = dopri5_solve(decay, &[1.0], &grid, &SolverSpec::dopri5(1e-7, 1e-9)).unwrap();
        assert_eq!(traj.len(), 101);
        let max_err = traj
            .times
            .iter()
            .enumerate()
            .map(|(i, t)| (traj.states[[i, 0]] - (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "{max_err}");
    }

    #[test]
    fn dopri_output_grid_refinement_is_consistent() {
        let spec = SolverSpec::dopri5(1e-7, 1e-9);
        let coarse = dopri5_solve(decay, &[1.0], &TimeGrid::new(0.0, 0.1, 20).unwrap(), &spec).unwrap();
        let fine = dopri5_solve(decay, &[1.0], &TimeGrid::new(0.0, 0.05, 40).unwrap(), &spec).unwrap();
        for i in 0..coarse.len() {
            let d = (coarse.states[[i, 0]] - fine.states[[2 * i, 0]]).abs();
            assert!(d <= 1e-7, "i = {i}: {d}");
        }
    }

    #[test]
    fn dopri_requires_tolerances() {
        let grid = TimeGrid::new(0.0, 0.1, 2).unwrap();
        let bad = SolverSpec::dopri5(0.0, 1e-9);
        assert!(dopri5_solve(decay, &[1.0], &grid, &bad).is_err());
    }

    #[test]
    fn dopri_step_underflow() {
        // Finite-time blow-up drives the controller below the floor.
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let res = dopri5_solve(
            |_, z: &[f64], dz: &mut [f64]| dz[0] = z[0] * z[0],
            &[1.0],
            &grid,
            &SolverSpec::dopri5(1e-7, 1e-9),
        );
        assert!(
            matches!(res, Err(Error::StepSizeUnderflow { .. }) | Err(Error::NonFiniteState { .. })),
            "{res:?}"
        );
    }

    #[test]
    fn solve_ivp_zero_steps_returns_initial() {
        let f = FnField::new(2, decay);
        let grid = TimeGrid::new(0.0, 0.1, 0).unwrap();
        for spec in [SolverSpec::rk4(), SolverSpec::dopri5(1e-7, 1e-9)] {
            let traj = solve_ivp(&f, &[1.0, 2.0], &grid, &spec).unwrap();
            assert_eq!(traj.len(), 1);
            assert_eq!(traj.state(0), vec![1.0, 2.0]);
        }
    }

    #[test]
    fn history_exact_and_midpoint() {
        let buf = HistoryBuffer::from_samples(0.0, 0.01, vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(buf.lookup(0.01).unwrap(), vec![1.0]);
        assert_eq!(buf.lookup(0.0).unwrap(), vec![0.0]);
        let mid = buf.lookup(0.005).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-12);
        assert!(matches!(buf.lookup(-0.01), Err(Error::OutOfHistory { .. })));
    }

    #[test]
    fn history_initial_function() {
        let buf = HistoryBuffer::with_initial(0.0, 0.01, InitialFunction::Constant(vec![0.5])).unwrap();
        assert_eq!(buf.lookup(-3.0).unwrap(), vec![0.5]);
        assert_eq!(buf.lookup(0.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn history_in_progress_step_uses_latest() {
        let buf = HistoryBuffer::from_samples(0.0, 0.1, vec![vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(buf.lookup(0.15).unwrap(), vec![2.0]);
        assert!(buf.lookup(0.35).is_err());
    }

    #[test]
    fn mackey_glass_derivative_at_start() {
        let (a, b, c) = (0.2, 0.1, 10.0);
        let field = FnDelayField::new(1, vec![5.0], move |_t, z: &[f64], d: &[&[f64]], dz: &mut [f64]| {
            let xd = d[0][0];
            dz[0] = -b * z[0] + a * xd / (1.0 + xd.powf(c));
        });
        let mut dz = [0.0];
        field.eval(0.0, &[0.5], &[&[0.5]], &mut dz);
        let expected = -0.1 * 0.5 + 0.2 * 0.5 / (1.0 + 0.5f64.powi(10));
        assert!((dz[0] - expected).abs() < 1e-15);
        assert!((dz[0] - 0.0499024).abs() < 1e-7);
    }

    #[test]
    fn dde_zero_delays_match_ode() {
        let ode = FnField::new(2, |_t, z: &[f64], dz: &mut [f64]| {
            dz[0] = z[1] - 0.3 * z[0] * z[1];
            dz[1] = -z[0] + 0.1 * z[1];
        });
        let dde = FnDelayField::new(2, vec![0.0, 0.0], |_t, z: &[f64], d: &[&[f64]], dz: &mut [f64]| {
            dz[0] = d[0][1] - 0.3 * z[0] * d[1][1];
            dz[1] = -d[1][0] + 0.1 * z[1];
        });
        let grid = TimeGrid::new(0.0, 0.05, 40).unwrap();
        let a = solve_ivp(&ode, &[1.0, 0.5], &grid, &SolverSpec::rk4()).unwrap();
        let mut buf = HistoryBuffer::from_samples(0.0, 0.05, vec![vec![1.0, 0.5]]).unwrap();
        let b = dde_solve(&dde, &mut buf, &grid, &SolverSpec::rk4()).unwrap();
        let diff = (&a.states - &b.states).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-12, "{diff}");
        assert_eq!(buf.len(), 41);
    }

    #[test]
    fn dde_rejects_uncovered_history() {
        let f = FnDelayField::new(1, vec![1.0], |_t, _z: &[f64], _d: &[&[f64]], dz: &mut [f64]| dz[0] = 0.0);
        let grid = TimeGrid::new(0.0, 0.1, 3).unwrap();
        let mut buf = HistoryBuffer::from_samples(0.0, 0.1, vec![vec![1.0]]).unwrap();
        assert!(matches!(
            dde_solve(&f, &mut buf, &grid, &SolverSpec::rk4()),
            Err(Error::OutOfHistory { .. })
        ));
    }

    #[test]
    fn delay_alignment() {
        assert_eq!(delay_steps(&[0.05, 0.1], 0.01).unwrap(), vec![5, 10]);
        assert!(matches!(delay_steps(&[0.015], 0.01), Err(Error::DelayNotAligned { .. })));
    }

    #[test]
    fn solvers_are_deterministic() {
        let grid = TimeGrid::spanning(2.0, 0.01).unwrap();
        let spec = SolverSpec::dopri5(1e-7, 1e-9);
        let f = |_t: f64, z: &[f64], dz: &mut [f64]| {
            dz[0] = z[1];
            dz[1] = -z[0].sin();
        };
        let a = dopri5_solve(f, &[1.0, 0.0], &grid, &spec).unwrap();
        let b = dopri5_solve(f, &[1.0, 0.0], &grid, &spec).unwrap();
        assert_eq!(a, b);
    }
}
