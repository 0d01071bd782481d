//! Forecast evaluation: roll a trained model out from the start of held-out
//! trajectories and compare against the recorded continuation.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::causality::{mean, std_dev};
use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::ode::Trajectory;
use crate::rollout::{self, RolloutInit};
use crate::train::warmup_steps;

/// Forecasts every trajectory in `truths`. NDDEs are seeded with the first
/// `tau_max` of recorded history, NODEs with the initial state only. Each
/// result starts at the seeding point (so its first row equals the truth)
/// and covers the rest of the grid.
pub fn forecast(model: &VelocityModel, truths: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let first = truths
        .first()
        .ok_or_else(|| Error::EmptyDataset("nothing to forecast".into()))?;
    if first.len() < 2 {
        return Err(Error::EmptyDataset("trajectory has fewer than two points".into()));
    }
    let dt = first.times[1] - first.times[0];
    let warmup = warmup_steps(model, dt)?;
    let len = first.len();
    for tr in truths {
        if tr.len() != len || tr.dim() != model.n_series {
            return Err(Error::ShapeMismatch(format!(
                "trajectory {}x{}, expected {len}x{}",
                tr.len(),
                tr.dim(),
                model.n_series
            )));
        }
    }
    if len <= warmup {
        return Err(Error::ShapeMismatch(format!(
            "{len} points leave nothing to forecast after a warm-up of {warmup}"
        )));
    }
    let init = RolloutInit {
        history: truths
            .iter()
            .map(|t| t.states.slice(s![..=warmup, ..]).to_owned())
            .collect(),
        dt,
    };
    let n_steps = len - 1 - warmup;
    let prepared = model.prepare();
    let roll = rollout::forward(model, &prepared, &init, n_steps, false)?;
    let times = first.times[warmup..].to_vec();
    (0..truths.len())
        .map(|b| {
            let states = Array2::from_shape_fn((n_steps + 1, model.n_series), |(n, j)| {
                roll.predicted(n)[[b, j]]
            });
            Trajectory::new(times.clone(), states)
        })
        .collect()
}

/// Truth restricted to the forecast window of `pred`.
pub fn aligned_truth<'a>(pred: &Trajectory, truth: &'a Trajectory) -> ndarray::ArrayView2<'a, f64> {
    let start = truth.len() - pred.len();
    truth.states.slice(s![start.., ..])
}

/// Mean squared error over the forecast points (the seeding point excluded).
pub fn forecast_mse(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.len() > truth.len() || pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.len(),
            pred.dim(),
            truth.len(),
            truth.dim()
        )));
    }
    let t = aligned_truth(pred, truth);
    let p = pred.states.slice(s![1.., ..]);
    let t = t.slice(s![1.., ..]);
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(p.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64)
}

/// `|pred - truth| / |truth|` in the Frobenius norm.
pub fn relative_l2(pred: ndarray::ArrayView2<f64>, truth: ndarray::ArrayView2<f64>) -> f64 {
    let num: f64 = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Largest value of one series and where it occurs (first index on ties).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub time: f64,
    pub value: f64,
}

pub fn peak(times: &[f64], values: impl IntoIterator<Item = f64>) -> Option<Peak> {
    let mut best: Option<Peak> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|b| v > b.value) {
            best = Some(Peak {
                index: i,
                time: times[i],
                value: v,
            });
        }
    }
    best
}

/// Observed and predicted peaks of one series of one trajectory. The
/// predicted series is the seeded warm-up followed by the forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub trajectory: usize,
    pub series: usize,
    pub observed: Peak,
    /// One per repeat.
    pub predicted: Vec<Peak>,
}

/// Forecast accuracy of several repeats on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub series_names: Vec<String>,
    /// Dataset indices of the evaluated trajectories.
    pub trajectories: Vec<usize>,
    /// `mse[r][k]`: repeat `r`, trajectory `k`.
    pub mse: Vec<Vec<f64>>,
    /// Mean over trajectories, per repeat.
    pub repeat_mse: Vec<f64>,
    pub mean_mse: f64,
    /// Population standard deviation of `repeat_mse`.
    pub std_mse: f64,
    pub peaks: Vec<PeakRecord>,
}

/// Evaluates each model on `truths` (dataset indices `indices`).
pub fn evaluate(
    models: &[VelocityModel],
    truths: &[Trajectory],
    indices: &[usize],
    series_names: &[String],
) -> Result<(EvalReport, Vec<Vec<Trajectory>>)> {
    if models.is_empty() {
        return Err(Error::EmptyDataset("no models to evaluate".into()));
    }
    let mut mse = Vec::with_capacity(models.len());
    let mut preds = Vec::with_capacity(models.len());
    for m in models {
        let p = forecast(m, truths)?;
        let per = p
            .iter()
            .zip(truths)
            .map(|(a, b)| forecast_mse(a, b))
            .collect::<Result<Vec<_>>>()?;
        mse.push(per);
        preds.push(p);
    }
    let repeat_mse: Vec<f64> = mse.iter().map(|v| mean(v)).collect();
    let mut peaks = Vec::new();
    for (k, truth) in truths.iter().enumerate() {
        for j in 0..truth.dim() {
            let observed = peak(&truth.times, truth.states.column(j).iter().copied())
                .expect("non-empty trajectory");
            let predicted = preds
                .iter()
                .map(|p| {
                    // The seeded warm-up counts as part of the predicted series.
                    let tr = &p[k];
                    let offset = truth.len() - tr.len();
                    let (tcol, pcol) = (truth.states.column(j), tr.states.column(j));
                    let values = tcol.iter().take(offset).chain(pcol.iter()).copied();
                    peak(&truth.times, values).expect("non-empty forecast")
                })
                .collect();
            peaks.push(PeakRecord {
                trajectory: indices.get(k).copied().unwrap_or(k),
                series: j,
                observed,
                predicted,
            });
        }
    }
    Ok((
        EvalReport {
            series_names: series_names.to_vec(),
            trajectories: indices.to_vec(),
            mean_mse: mean(&repeat_mse),
            std_mse: std_dev(&repeat_mse),
            repeat_mse,
            mse,
            peaks,
        },
        preds,
    ))
}
