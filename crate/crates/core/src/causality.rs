//! Granger-causal structure read off trained input layers: per-column norms,
//! normalization, lag ranking, ensemble statistics and report artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VelocityModel;

/// KDE bandwidth used when Scott's rule degenerates (one run or zero spread).
pub const KDE_FALLBACK_BANDWIDTH: f64 = 0.01;
/// KDE evaluation grid: this many evenly spaced points on `[0, 1]`.
pub const KDE_GRID_POINTS: usize = 101;

/// Source of one input column: `lag == 0` is the current value, `lag == k`
/// the value at `t - tau_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub series: usize,
    pub lag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the largest entry of the whole matrix.
    #[default]
    Global,
    /// Divide each row by its own largest entry.
    PerRow,
}

/// Input-layer column norms of the observed components, restricted to the
/// observed-series columns (augmented states are left out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityMatrix {
    pub norms: Array2<f64>,
    pub normalized: Array2<f64>,
    pub labels: Vec<ColumnLabel>,
    /// `tau_1..tau_m`; empty for a model without delay inputs.
    pub lags: Vec<f64>,
    pub adjacency: Array2<bool>,
    pub normalization: Normalization,
}

/// Scales by the global or per-row maximum; all-zero blocks stay zero.
pub fn normalize(norms: &Array2<f64>, mode: Normalization) -> Array2<f64> {
    let scale = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
    match mode {
        Normalization::Global => {
            let max = norms.iter().copied().fold(0.0, f64::max);
            norms.mapv(|v| scale(v, max))
        }
        Normalization::PerRow => {
            let mut out = norms.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().copied().fold(0.0, f64::max);
                row.mapv_inplace(|v| scale(v, max));
            }
            out
        }
    }
}

pub fn extract_causality(model: &VelocityModel) -> CausalityMatrix {
    extract_causality_with(model, Normalization::Global)
}

pub fn extract_causality_with(model: &VelocityModel, mode: Normalization) -> CausalityMatrix {
    let ns = model.n_series;
    let n_cols = ns * (model.delays.m() + 1);
    let all = model.input_column_norms();
    let norms = Array2::from_shape_fn((ns, n_cols), |(i, j)| all[[i, j]]);
    let adjacency = Array2::from_shape_fn((ns, n_cols), |(i, j)| model.prune_mask[i][j]);
    let m1 = model.delays.m() + 1;
    let labels = (0..n_cols)
        .map(|j| ColumnLabel {
            series: j / m1,
            lag: j % m1,
        })
        .collect();
    CausalityMatrix {
        normalized: normalize(&norms, mode),
        norms,
        labels,
        lags: model.delays.lags.clone(),
        adjacency,
        normalization: mode,
    }
}

impl CausalityMatrix {
    pub fn n_components(&self) -> usize {
        self.norms.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.labels.iter().map(|l| l.series + 1).max().unwrap_or(0)
    }

    pub fn column(&self, series: usize, lag: usize) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l.series == series && l.lag == lag)
    }

    /// Series-level adjacency: `(i, j)` is true when any column of series
    /// `j` survives in component `i`.
    pub fn series_adjacency(&self) -> Array2<bool> {
        let ns = self.n_series();
        let mut out = Array2::from_elem((self.n_components(), ns), false);
        for i in 0..self.n_components() {
            for (c, l) in self.labels.iter().enumerate() {
                out[[i, l.series]] |= self.adjacency[[i, c]];
            }
        }
        out
    }

    /// Sum of normalized entries of `source`'s columns in `target`'s row.
    pub fn contribution(&self, source: usize, target: usize) -> f64 {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.series == source)
            .map(|(c, _)| self.normalized[[target, c]])
            .sum()
    }
}

/// One delayed input's share in a component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagScore {
    /// 1-based lag index `k` of `tau_k`.
    pub index: usize,
    pub tau: f64,
    pub score: f64,
}

/// Surviving delayed inputs of `source` in component `target`, strongest
/// first (ties go to the shorter lag). The current-value column is not a
/// lag and is left out, as are columns that are pruned or exactly zero.
pub fn detect_lags(cm: &CausalityMatrix, source: usize, target: usize) -> Result<Vec<LagScore>> {
    if cm.lags.is_empty() {
        return Err(Error::NotDelayModel);
    }
    if target >= cm.n_components() || source >= cm.n_series() {
        return Err(Error::ShapeMismatch(format!(
            "source {source} / target {target} outside a {}x{} matrix",
            cm.n_components(),
            cm.n_series()
        )));
    }
    let mut out: Vec<LagScore> = cm
        .labels
        .iter()
        .enumerate()
        .filter(|(c, l)| {
            l.series == source && l.lag > 0 && cm.adjacency[[target, *c]] && cm.norms[[target, *c]] > 0.0
        })
        .map(|(c, l)| LagScore {
            index: l.lag,
            tau: cm.lags[l.lag - 1],
            score: cm.normalized[[target, c]],
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Matrices from repeated runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEnsemble {
    pub members: Vec<CausalityMatrix>,
    pub seeds: Vec<u64>,
}

impl NormEnsemble {
    pub fn new(members: Vec<CausalityMatrix>, seeds: Vec<u64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::EmptyDataset("ensemble needs at least one run".into()))?;
        if seeds.len() != members.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} runs but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        for m in &members {
            if m.norms.dim() != first.norms.dim() || m.labels != first.labels {
                return Err(Error::ShapeMismatch(format!(
                    "ensemble member {:?} vs {:?}",
                    m.norms.dim(),
                    first.norms.dim()
                )));
            }
        }
        Ok(Self { members, seeds })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn std_dev(values: &[f64]) -> f64 {
    let mu = mean(values);
    (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Scott's rule `sigma * n^(-1/5)`, with the fallback for `n = 1` or zero
/// spread.
pub fn scott_bandwidth(values: &[f64]) -> f64 {
    let sigma = std_dev(values);
    if values.len() < 2 || sigma == 0.0 {
        KDE_FALLBACK_BANDWIDTH
    } else {
        sigma * (values.len() as f64).powf(-0.2)
    }
}

/// Gaussian kernel density estimate at `x`.
pub fn gaussian_kde(samples: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    samples
        .iter()
        .map(|s| norm * (-0.5 * ((x - s) / h).powi(2)).exp())
        .sum::<f64>()
        / samples.len() as f64
}

pub fn kde_grid() -> Vec<f64> {
    (0..KDE_GRID_POINTS)
        .map(|i| i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect()
}

/// Per-entry statistics of the members' normalized matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_runs: usize,
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub bandwidth: Array2<f64>,
    pub kde_grid: Vec<f64>,
    /// `kde[[i, j, g]]`: density of entry `(i, j)` at `kde_grid[g]`.
    pub kde: Array3<f64>,
    pub labels: Vec<ColumnLabel>,
    pub lags: Vec<f64>,
}

pub fn aggregate_ensemble(e: &NormEnsemble) -> EnsembleSummary {
    let first = &e.members[0];
    let (rows, cols) = first.normalized.dim();
    let grid = kde_grid();
    let mut mean_m = Array2::zeros((rows, cols));
    let mut std_m = Array2::zeros((rows, cols));
    let mut bw = Array2::zeros((rows, cols));
    let mut kde = Array3::zeros((rows, cols, grid.len()));
    let mut vals = Vec::with_capacity(e.len());
    for i in 0..rows {
        for j in 0..cols {
            vals.clear();
            vals.extend(e.members.iter().map(|m| m.normalized[[i, j]]));
            mean_m[[i, j]] = mean(&vals);
            std_m[[i, j]] = std_dev(&vals);
            let h = scott_bandwidth(&vals);
            bw[[i, j]] = h;
            for (g, &x) in grid.iter().enumerate() {
                kde[[i, j, g]] = gaussian_kde(&vals, h, x);
            }
        }
    }
    EnsembleSummary {
        n_runs: e.len(),
        mean: mean_m,
        std: std_m,
        bandwidth: bw,
        kde_grid: grid,
        kde,
        labels: first.labels.clone(),
        lags: first.lags.clone(),
    }
}

/// Column header like `x1` or `x1(t-tau3)`.
pub fn column_name(label: &ColumnLabel, series_names: &[String]) -> String {
    let base = series_names
        .get(label.series)
        .cloned()
        .unwrap_or_else(|| format!("z{}", label.series + 1));
    if label.lag == 0 {
        base
    } else {
        format!("{base}(t-tau{})", label.lag)
    }
}

/// Per-entry ensemble statistics as CSV.
pub fn summary_csv(s: &EnsembleSummary, series_names: &[String]) -> String {
    let mut out = String::from("target,source,lag,mean,std,bandwidth\n");
    for i in 0..s.mean.nrows() {
        for (j, l) in s.labels.iter().enumerate() {
            let target = series_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("z{}", i + 1));
            let source = series_names
                .get(l.series)
                .cloned()
                .unwrap_or_else(|| format!("z{}", l.series + 1));
            let _ = writeln!(
                out,
                "{target},{source},{},{},{},{}",
                l.lag,
                s.mean[[i, j]],
                s.std[[i, j]],
                s.bandwidth[[i, j]]
            );
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grayscale heatmap: 1 is black, 0 is white. Values are clamped to
/// `[0, 1]`.
pub fn heatmap_svg(values: &Array2<f64>, row_labels: &[String], col_labels: &[String], title: &str) -> String {
    let cell = 28.0;
    let left = 110.0;
    let top = 40.0;
    let bottom = 120.0;
    let (rows, cols) = values.dim();
    let width = left + cell * cols as f64 + 20.0;
    let height = top + cell * rows as f64 + bottom;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20">{}</text>"#, xml_escape(title));
    for i in 0..rows {
        for j in 0..cols {
            let v = values[[i, j]].clamp(0.0, 1.0);
            let g = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})" stroke="gray" stroke-width="0.5"/>"#,
                left + cell * j as f64,
                top + cell * i as f64
            );
        }
    }
    for (i, l) in row_labels.iter().enumerate().take(rows) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            top + cell * (i as f64 + 0.65),
            xml_escape(l)
        );
    }
    for (j, l) in col_labels.iter().enumerate().take(cols) {
        let x = left + cell * (j as f64 + 0.6);
        let y = top + cell * rows as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" transform="rotate(60 {x} {y})">{}</text>"#,
            xml_escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// JSON document written by [`causality_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub series_names: Vec<String>,
    pub column_names: Vec<String>,
    pub runs: Vec<CausalityMatrix>,
    pub seeds: Vec<u64>,
    pub summary: EnsembleSummary,
}

impl CausalityReport {
    pub fn new(ensemble: &NormEnsemble, series_names: &[String]) -> Self {
        let summary = aggregate_ensemble(ensemble);
        let column_names = summary
            .labels
            .iter()
            .map(|l| column_name(l, series_names))
            .collect();
        Self {
            series_names: series_names.to_vec(),
            column_names,
            runs: ensemble.members.clone(),
            seeds: ensemble.seeds.clone(),
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn row_names(&self) -> Vec<String> {
        (0..self.summary.mean.nrows())
            .map(|i| {
                let n = self
                    .series_names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("z{}", i + 1));
                format!("d{n}/dt")
            })
            .collect()
    }

    /// Heatmap of the ensemble mean.
    pub fn mean_heatmap(&self) -> String {
        heatmap_svg(
            &self.summary.mean,
            &self.row_names(),
            &self.column_names,
            &format!("mean normalized column norm ({} runs)", self.summary.n_runs),
        )
    }

    /// Heatmap of the fraction of runs keeping each column.
    pub fn adjacency_heatmap(&self) -> String {
        let n = self.runs.len() as f64;
        let frac = Array2::from_shape_fn(self.summary.mean.dim(), |(i, j)| {
            self.runs.iter().filter(|r| r.adjacency[[i, j]]).count() as f64 / n
        });
        heatmap_svg(&frac, &self.row_names(), &self.column_names, "fraction of runs keeping column")
    }
}

/// Writes `causality.json`, `heatmap.svg`, `adjacency.svg` and
/// `ensemble.csv` into `dir`.
pub fn causality_report(ensemble: &NormEnsemble, series_names: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let report = CausalityReport::new(ensemble, series_names);
    let files = [
        ("causality.json", report.to_json()?),
        ("heatmap.svg", report.mean_heatmap()),
        ("adjacency.svg", report.adjacency_heatmap()),
        ("ensemble.csv", summary_csv(&report.summary, series_names)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}
