//! Benchmark data: Lorenz-96 and Mackey-Glass generators, the tsunami gauge
//! CSV format with filtering and splitting, and a three-gauge cascade
//! surrogate with known causal structure.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{
    dde_solve, dopri5_solve, FnDelayField, HistoryBuffer, InitialFunction, SolverSpec, TimeGrid,
    Trajectory,
};

/// Index sets into [`Dataset::trajectories`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

/// Trajectories sampled on one shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub series_names: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub splits: Splits,
}

impl Dataset {
    /// Dataset whose splits put everything in `train`.
    pub fn new(grid: TimeGrid, series_names: Vec<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        for tr in &trajectories {
            if tr.len() != grid.n_points() || tr.dim() != series_names.len() {
                return Err(Error::ShapeMismatch(format!(
                    "trajectory {}x{} on a {}-point grid with {} series",
                    tr.len(),
                    tr.dim(),
                    grid.n_points(),
                    series_names.len()
                )));
            }
        }
        let n = trajectories.len();
        Ok(Self {
            grid,
            series_names,
            trajectories,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_series(&self) -> usize {
        self.series_names.len()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn split(&self, split: Split) -> Vec<Trajectory> {
        self.split_indices(split)
            .iter()
            .map(|&i| self.trajectories[i].clone())
            .collect()
    }

    pub fn series_index(&self, name: &str) -> Option<usize> {
        self.series_names.iter().position(|s| s == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Spec {
    pub n: usize,
    pub forcing: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl Default for Lorenz96Spec {
    fn default() -> Self {
        Self {
            n: 6,
            forcing: 10.0,
            dt: 0.01,
            t_end: 30.72,
            n_trajectories: 16,
            seed: 0,
        }
    }
}

/// `dx_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`, indices cyclic.
pub fn lorenz96_rhs(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    let mut dx = vec![0.0; x.len()];
    lorenz96_rhs_into(x, forcing, &mut dx)?;
    Ok(dx)
}

fn lorenz96_rhs_into(x: &[f64], forcing: f64, dx: &mut [f64]) -> Result<()> {
    let n = x.len();
    if n < 4 {
        return Err(Error::TooFewSeries(n));
    }
    for i in 0..n {
        let ip1 = x[(i + 1) % n];
        let im1 = x[(i + n - 1) % n];
        let im2 = x[(i + n - 2) % n];
        dx[i] = (ip1 - im2) * im1 - x[i] + forcing;
    }
    Ok(())
}

/// Lorenz-96 trajectories from `x0`, integrated with Dormand-Prince at
/// rtol 1e-7 / atol 1e-9.
pub fn lorenz96_trajectory(x0: &[f64], forcing: f64, grid: &TimeGrid) -> Result<Trajectory> {
    if x0.len() < 4 {
        return Err(Error::TooFewSeries(x0.len()));
    }
    let spec = SolverSpec::dopri5(1e-7, 1e-9);
    dopri5_solve(
        |_, x: &[f64], dx: &mut [f64]| {
            lorenz96_rhs_into(x, forcing, dx).expect("length checked");
        },
        x0,
        grid,
        &spec,
    )
}

/// `n_trajectories` runs from `[1, 8, ..., 8] + U(-1, 1)` noise.
pub fn gen_lorenz96(spec: &Lorenz96Spec) -> Result<Dataset> {
    if spec.n < 4 {
        return Err(Error::TooFewSeries(spec.n));
    }
    let grid = TimeGrid::spanning(spec.t_end, spec.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    for _ in 0..spec.n_trajectories {
        let x0: Vec<f64> = (0..spec.n)
            .map(|i| if i == 0 { 1.0 } else { 8.0 } + rng.gen_range(-1.0..1.0))
            .collect();
        trajectories.push(lorenz96_trajectory(&x0, spec.forcing, &grid)?);
    }
    let names = (1..=spec.n).map(|i| format!("x{i}")).collect();
    Dataset::new(grid, names, trajectories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MackeyGlassSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub tau: f64,
    pub dt: f64,
    pub t_end: f64,
    pub phi0: f64,
}

impl Default for MackeyGlassSpec {
    fn default() -> Self {
        Self {
            a: 0.2,
            b: 0.1,
            c: 10.0,
            tau: 5.0,
            dt: 0.01,
            t_end: 153.6,
            phi0: 0.5,
        }
    }
}

pub fn mackey_glass_rhs(x_now: f64, x_delayed: f64, spec: &MackeyGlassSpec) -> f64 {
    -spec.b * x_now + spec.a * x_delayed / (1.0 + x_delayed.powf(spec.c))
}

/// One trajectory from the constant initial function `phi0`.
pub fn gen_mackey_glass(spec: &MackeyGlassSpec) -> Result<Dataset> {
    if !(spec.c > 0.0) || !(spec.tau > 0.0) {
        return Err(Error::InvalidConfig("Mackey-Glass needs c > 0 and tau > 0".into()));
    }
    let grid = TimeGrid::spanning(spec.t_end, spec.dt)?;
    let field = FnDelayField::new(1, vec![spec.tau], |_, x: &[f64], d: &[&[f64]], dx: &mut [f64]| {
        dx[0] = mackey_glass_rhs(x[0], d[0][0], spec);
    });
    let mut buf = HistoryBuffer::with_initial(0.0, spec.dt, InitialFunction::Constant(vec![spec.phi0]))?;
    let traj = dde_solve(&field, &mut buf, &grid, &SolverSpec::rk4())?;
    Dataset::new(grid, vec!["x".into()], vec![traj])
}

pub const TSUNAMI_SERIES: [&str; 3] = ["eta702", "eta901", "eta911"];
/// Event duration in seconds and resampled length.
pub const TSUNAMI_DURATION: f64 = 5.0 * 3600.0;
pub const TSUNAMI_POINTS: usize = 256;

pub fn tsunami_grid() -> TimeGrid {
    TimeGrid {
        t0: 0.0,
        dt: TSUNAMI_DURATION / (TSUNAMI_POINTS - 1) as f64,
        n_steps: TSUNAMI_POINTS - 1,
    }
}

/// Piecewise-linear resampling of `(times, values)` at `t`. `times` must be
/// strictly increasing and cover `t`.
fn interp(times: &[f64], values: &[f64], t: f64) -> Option<f64> {
    let n = times.len();
    if n == 0 || t < times[0] || t > times[n - 1] {
        return None;
    }
    let hi = times.partition_point(|&x| x < t);
    if hi < n && times[hi] == t {
        return Some(values[hi]);
    }
    let lo = hi - 1;
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    Some((1.0 - w) * values[lo] + w * values[hi])
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads one event CSV and resamples it onto `grid`.
pub fn read_event(path: &Path, grid: &TimeGrid) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| malformed(path, e.to_string()))?;
    let n_cols = rdr.headers().map_err(|e| malformed(path, e.to_string()))?.len();
    if n_cols != 4 {
        return Err(malformed(path, format!("header has {n_cols} columns, expected 4")));
    }
    let mut times = Vec::new();
    let mut series: [Vec<f64>; 3] = Default::default();
    for (i, rec) in rdr.deserialize::<[f64; 4]>().enumerate() {
        let row = rec.map_err(|e| malformed(path, format!("row {}: {e}", i + 2)))?;
        if let Some(&prev) = times.last() {
            if !(row[0] > prev) {
                return Err(malformed(path, format!("time not increasing at row {}", i + 2)));
            }
        }
        times.push(row[0]);
        for k in 0..3 {
            series[k].push(row[k + 1]);
        }
    }
    if times.is_empty() {
        return Err(malformed(path, "no data rows"));
    }
    let gt = grid.times();
    let mut states = Array2::zeros((gt.len(), 3));
    for (i, &t) in gt.iter().enumerate() {
        for k in 0..3 {
            states[[i, k]] = interp(&times, &series[k], t).ok_or_else(|| {
                malformed(
                    path,
                    format!("samples span [{}, {}], grid needs {t}", times[0], times[times.len() - 1]),
                )
            })?;
        }
    }
    Trajectory::new(gt, states)
}

/// Event CSV files in `dir`, sorted by file name.
pub fn event_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `*.csv` event in `dir` onto the 256-point, five-hour grid.
pub fn load_tsunami(dir: &Path) -> Result<Dataset> {
    let files = event_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no event files in {}", dir.display())));
    }
    let grid = tsunami_grid();
    let trajectories = files
        .iter()
        .map(|f| read_event(f, &grid))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(grid, TSUNAMI_SERIES.iter().map(|s| s.to_string()).collect(), trajectories)
}

/// Writes one CSV per trajectory (`event_0000.csv`, ...). Values use the
/// shortest round-tripping decimal form. Returns the written paths.
pub fn export_events(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(ds.len());
    for (i, tr) in ds.trajectories.iter().enumerate() {
        let path = dir.join(format!("event_{i:04}.csv"));
        let csv_err = |e: csv::Error| Error::Io(e.into());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let mut header = vec!["t".to_string()];
        header.extend(ds.series_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (r, &t) in tr.times.iter().enumerate() {
            let mut row = vec![t];
            row.extend(tr.states.row(r).iter().copied());
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn export_tsunami(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    if ds.series_names != TSUNAMI_SERIES {
        return Err(Error::InvalidConfig(format!(
            "tsunami export needs series {TSUNAMI_SERIES:?}, got {:?}",
            ds.series_names
        )));
    }
    export_events(ds, dir)
}

fn peak_abs(tr: &Trajectory, col: usize) -> f64 {
    tr.states.column(col).iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Seeded Fisher-Yates shuffle of `0..n`, then 80/5/15 by count.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 80 / 100;
    let n_val = n * 5 / 100;
    Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

/// Drops events with peak `|eta702| < 0.1` or peak `|eta901| < 0.5` and
/// splits the rest.
pub fn filter_and_split(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let col = |name: &str| {
        ds.series_index(name)
            .ok_or_else(|| Error::InvalidConfig(format!("dataset has no {name} series")))
    };
    let (g702, g901) = (col("eta702")?, col("eta901")?);
    let kept: Vec<Trajectory> = ds
        .trajectories
        .iter()
        .filter(|tr| !(peak_abs(tr, g702) < 0.1 || peak_abs(tr, g901) < 0.5))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset("no events left after amplitude filter".into()));
    }
    let splits = split_indices(kept.len(), seed);
    Ok(Dataset {
        grid: ds.grid,
        series_names: ds.series_names.clone(),
        trajectories: kept,
        splits,
    })
}

/// Three-gauge cascade: `s1` is an incoming damped oscillation with random
/// amplitude, phase and frequency per event; `s2` and `s3` are relaxations
/// driven by lagged copies of upstream gauges:
///
/// ```text
/// s1'' = -w^2 s1 - 2 zeta w s1'
/// s2'  = -d2 s2 + c12 s1(t - lag12)
/// s3'  = -d3 s3 + c13 s1(t - lag13) + c23 s2(t - lag23)
/// ```
///
/// Everything is zero before `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub n_events: usize,
    pub n_points: usize,
    pub dt: f64,
    /// Internal integration steps per output step.
    pub substeps: usize,
    pub omega: (f64, f64),
    pub zeta: f64,
    pub amplitude: (f64, f64),
    pub d2: f64,
    pub d3: f64,
    pub c12: f64,
    pub c13: f64,
    pub c23: f64,
    pub lag12: f64,
    pub lag13: f64,
    pub lag23: f64,
    /// Standard deviation of additive observation noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            n_events: 100,
            n_points: 256,
            dt: 0.1,
            substeps: 10,
            omega: (1.5, 3.0),
            zeta: 0.2,
            amplitude: (0.5, 1.5),
            d2: 5.0,
            d3: 3.0,
            c12: 5.0,
            c13: 1.5,
            c23: 1.5,
            lag12: 1.2,
            lag13: 2.0,
            lag23: 0.8,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// One incoming pulse: amplitude, phase and angular frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub amplitude: f64,
    pub phase: f64,
    pub omega: f64,
}

/// Integrates one cascade event on the output grid.
pub fn surrogate_event(spec: &SurrogateSpec, pulse: Pulse) -> Result<Trajectory> {
    if spec.n_points < 2 || spec.substeps == 0 {
        return Err(Error::InvalidConfig("surrogate needs n_points >= 2 and substeps >= 1".into()));
    }
    let h = spec.dt / spec.substeps as f64;
    let n_fine = (spec.n_points - 1) * spec.substeps;
    let grid = TimeGrid::new(0.0, h, n_fine)?;
    let Pulse { amplitude, phase, omega } = pulse;
    let x0 = vec![amplitude * phase.cos(), -amplitude * omega * phase.sin(), 0.0, 0.0];
    let zeros = vec![0.0; 4];
    let phi = InitialFunction::Custom(std::sync::Arc::new(move |t: f64| {
        if t >= 0.0 {
            x0.clone()
        } else {
            zeros.clone()
        }
    }));
    let s = spec.clone();
    let field = FnDelayField::new(
        4,
        vec![spec.lag12, spec.lag13, spec.lag23],
        move |_, x: &[f64], d: &[&[f64]], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = -omega * omega * x[0] - 2.0 * s.zeta * omega * x[1];
            dx[2] = -s.d2 * x[2] + s.c12 * d[0][0];
            dx[3] = -s.d3 * x[3] + s.c13 * d[1][0] + s.c23 * d[2][2];
        },
    );
    let mut buf = HistoryBuffer::with_initial(0.0, h, phi)?;
    let fine = dde_solve(&field, &mut buf, &grid, &SolverSpec::rk4())?;
    let times: Vec<f64> = (0..spec.n_points).map(|i| i as f64 * spec.dt).collect();
    let mut states = Array2::zeros((spec.n_points, 3));
    for i in 0..spec.n_points {
        let r = fine.states.row(i * spec.substeps);
        states[[i, 0]] = r[0];
        states[[i, 1]] = r[2];
        states[[i, 2]] = r[3];
    }
    Trajectory::new(times, states)
}

/// `n_events` cascade events with seeded pulses, split 80/5/15.
pub fn gen_surrogate_cascade(spec: &SurrogateSpec) -> Result<Dataset> {
    if spec.n_events == 0 {
        return Err(Error::EmptyDataset("surrogate with zero events".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trajectories = Vec::with_capacity(spec.n_events);
    for _ in 0..spec.n_events {
        let pulse = Pulse {
            amplitude: rng.gen_range(spec.amplitude.0..=spec.amplitude.1),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            omega: rng.gen_range(spec.omega.0..=spec.omega.1),
        };
        let mut tr = surrogate_event(spec, pulse)?;
        if spec.noise > 0.0 {
            let normal = Normal::new(0.0, spec.noise).expect("positive std");
            for v in tr.states.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        trajectories.push(tr);
    }
    let grid = TimeGrid::new(0.0, spec.dt, spec.n_points - 1)?;
    let names = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
    let mut ds = Dataset::new(grid, names, trajectories)?;
    ds.splits = split_indices(ds.len(), spec.seed);
    Ok(ds)
}
