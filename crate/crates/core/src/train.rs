//! Mini-batch training with a group-lasso penalty on input-layer columns
//! and magnitude pruning after every update.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpGrad, VelocityModel};
use crate::ode::{delay_steps, Method, SolverSpec, Trajectory};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rollout::{self, RolloutInit};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the group-lasso penalty.
    pub alpha: f64,
    /// Pruning threshold on effective column norms.
    pub rho: f64,
    pub lr: f64,
    /// Number of update iterations.
    pub n_max: usize,
    /// Subsequences per batch.
    pub n_batch: usize,
    /// Points per sampled subsequence, initial point included.
    pub l_batch: usize,
    pub optimizer: OptimizerKind,
    pub solver: SolverSpec,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub prune_persistent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            rho: 0.01,
            lr: 0.01,
            n_max: 2000,
            n_batch: 40,
            l_batch: 100,
            optimizer: OptimizerKind::Adam,
            solver: SolverSpec::rk4(),
            seed: 0,
            prune_persistent: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_batch < 2 {
            return Err(Error::InvalidConfig("l_batch must be at least 2".into()));
        }
        if self.n_batch == 0 {
            return Err(Error::InvalidConfig("n_batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::InvalidConfig("alpha and rho must be non-negative".into()));
        }
        if self.solver.method != Method::Rk4 {
            return Err(Error::UnsupportedSolver(
                "training differentiates through fixed-step RK4".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled subsequences: `history[b]` ends at the rollout's initial state
/// and includes the warm-up needed by the longest delay; `truth[b]` has
/// `l_batch` rows starting at that initial state.
#[derive(Debug, Clone)]
pub struct Batch {
    pub init: RolloutInit,
    pub truth: Vec<Array2<f64>>,
    /// `(trajectory index, start index)` per member, sorted.
    pub members: Vec<(usize, usize)>,
}

impl Batch {
    /// Builds a batch from explicit `(trajectory, start)` pairs.
    pub fn from_members(
        data: &[Trajectory],
        members: &[(usize, usize)],
        warmup: usize,
        l_batch: usize,
        dt: f64,
    ) -> Result<Self> {
        let mut members = members.to_vec();
        members.sort_unstable();
        let mut history = Vec::with_capacity(members.len());
        let mut truth = Vec::with_capacity(members.len());
        for &(ti, start) in &members {
            let tr = data
                .get(ti)
                .ok_or_else(|| Error::EmptyDataset(format!("no trajectory {ti}")))?;
            if start < warmup || start + l_batch > tr.len() {
                return Err(Error::ShapeMismatch(format!(
                    "subsequence at {start} (warm-up {warmup}, length {l_batch}) does not fit trajectory of {} points",
                    tr.len()
                )));
            }
            history.push(tr.states.slice(s![start - warmup..=start, ..]).to_owned());
            truth.push(tr.states.slice(s![start..start + l_batch, ..]).to_owned());
        }
        Ok(Self {
            init: RolloutInit { history, dt },
            truth,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.truth.first().map_or(0, |t| t.nrows() - 1)
    }
}

/// Grid spacing shared by `data`.
pub fn data_dt(data: &[Trajectory]) -> Result<f64> {
    let tr = data
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training trajectories".into()))?;
    if tr.len() < 2 {
        return Err(Error::EmptyDataset("trajectory has fewer than two points".into()));
    }
    Ok(tr.times[1] - tr.times[0])
}

/// Warm-up length in grid steps for the model's longest delay.
pub fn warmup_steps(model: &VelocityModel, dt: f64) -> Result<usize> {
    Ok(delay_steps(&model.delays.lags, dt)?.into_iter().max().unwrap_or(0))
}

/// Draws `n_batch` trajectories uniformly (with replacement) and a start
/// index per draw that leaves room for the warm-up and `l_batch` points.
pub fn sample_batch(
    data: &[Trajectory],
    warmup: usize,
    config: &TrainConfig,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut members = Vec::with_capacity(config.n_batch);
    for _ in 0..config.n_batch {
        let ti = rng.gen_range(0..data.len());
        let len = data[ti].len();
        if len < warmup + config.l_batch {
            return Err(Error::ShapeMismatch(format!(
                "trajectory {ti} has {len} points, need {} (warm-up {warmup} + {})",
                warmup + config.l_batch,
                config.l_batch
            )));
        }
        let start = rng.gen_range(warmup..=len - config.l_batch);
        members.push((ti, start));
    }
    Batch::from_members(data, &members, warmup, config.l_batch, dt)
}

/// Mean squared error over all points and series.
pub fn data_loss(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.states.dim() != truth.states.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.states.dim(),
            truth.states.dim()
        )));
    }
    let n = pred.states.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(pred
        .states
        .iter()
        .zip(truth.states.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// Unweighted sum of effective first-layer column norms.
pub fn group_lasso_penalty(model: &VelocityModel) -> f64 {
    model.group_lasso_penalty()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub data: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Gradient of the total loss, flat and ordered like
/// [`VelocityModel::params_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

fn batch_mse(model: &VelocityModel, roll: &rollout::Rollout, batch: &Batch) -> (f64, usize) {
    let ns = model.n_series;
    let mut sum = 0.0;
    let mut count = 0;
    for n in 1..=roll.n_steps {
        let pred = roll.predicted(n);
        for (b, truth) in batch.truth.iter().enumerate() {
            for j in 0..ns {
                sum += (pred[[b, j]] - truth[[n, j]]).powi(2);
            }
            count += ns;
        }
    }
    (sum / count.max(1) as f64, count)
}

/// Data loss over the predicted points of every rollout plus
/// `alpha * penalty`.
pub fn total_loss(model: &VelocityModel, batch: &Batch, config: &TrainConfig) -> Result<LossParts> {
    let prepared = model.prepare();
    let roll = rollout::forward(model, &prepared, &batch.init, batch.n_steps(), false)?;
    let (data, _) = batch_mse(model, &roll, batch);
    let penalty = model.group_lasso_penalty();
    Ok(LossParts {
        data,
        penalty,
        total: data + config.alpha * penalty,
    })
}

/// Adds `alpha * col / |col|` to the effective first-layer weight gradient;
/// zero columns get the zero subgradient.
fn add_penalty_grad(model: &VelocityModel, grads: &mut [MlpGrad], alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    for (c, g) in model.components.iter().zip(grads.iter_mut()) {
        let w = c.layers[0].effective_weight();
        let gw = &mut g.layers[0].weight;
        for (j, col) in w.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                gw.column_mut(j).scaled_add(alpha / norm, &col);
            }
        }
    }
}

/// Loss and its exact gradient through the unrolled RK4 steps.
pub fn loss_and_gradient(
    model: &VelocityModel,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(LossParts, Gradient)> {
    let prepared = model.prepare();
    let dt = batch.init.dt;
    let roll = rollout::forward(model, &prepared, &batch.init, batch.n_steps(), true)?;
    let (data, count) = batch_mse(model, &roll, batch);
    let ns = model.n_series;
    let scale = 2.0 / count.max(1) as f64;
    let mut grads = rollout::backward(model, &prepared, &roll, dt, |n| {
        let pred = roll.predicted(n);
        let mut adj = Array2::zeros((batch.len(), ns));
        for (b, truth) in batch.truth.iter().enumerate() {
            for j in 0..ns {
                adj[[b, j]] = scale * (pred[[b, j]] - truth[[n, j]]);
            }
        }
        adj
    })?;
    add_penalty_grad(model, &mut grads, config.alpha);
    let grad = Gradient(model.flatten_grad(&grads));
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let penalty = model.group_lasso_penalty();
    Ok((
        LossParts {
            data,
            penalty,
            total: data + config.alpha * penalty,
        },
        grad,
    ))
}

pub fn gradient(model: &VelocityModel, batch: &Batch, config: &TrainConfig) -> Result<Gradient> {
    loss_and_gradient(model, batch, config).map(|(_, g)| g)
}

/// Magnitude pruning: zeroes columns with effective norm `<= rho`.
pub fn prune(model: &mut VelocityModel, rho: f64, persistent: bool) -> usize {
    model.prune(rho, persistent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub penalty: f64,
    pub total: f64,
    pub pruned_columns: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,data_loss,penalty,total,pruned_columns\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.data_loss, r.penalty, r.total, r.pruned_columns
            ));
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

/// Runs `config.n_max` iterations of: sample a batch, roll out, compute the
/// penalized loss and its gradient, update, re-apply the prune mask, prune.
/// Deterministic for a given seed.
pub fn train(
    model: &mut VelocityModel,
    data: &[Trajectory],
    config: &TrainConfig,
) -> Result<LossHistory> {
    train_with(model, data, config, |_, _| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with<F>(
    model: &mut VelocityModel,
    data: &[Trajectory],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<LossHistory>
where
    F: FnMut(&EpochRecord, &VelocityModel),
{
    config.validate()?;
    let mut history = LossHistory::default();
    if config.n_max == 0 {
        return Ok(history);
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training trajectories".into()));
    }
    let dt = data_dt(data)?;
    let warmup = warmup_steps(model, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr, model.n_params());
    let mut params = model.params_flat();

    for epoch in 0..config.n_max {
        let batch = sample_batch(data, warmup, config, dt, &mut rng)?;
        let (loss, mut grad) = match loss_and_gradient(model, &batch, config) {
            Ok(v) => v,
            Err(Error::NonFiniteState { .. }) | Err(Error::NonFiniteGradient) => {
                return Err(Error::DivergedTraining {
                    epoch,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(Error::DivergedTraining {
                epoch,
                loss: loss.total,
            });
        }
        if config.prune_persistent {
            for (g, keep) in grad.0.iter_mut().zip(model.param_keep_mask()) {
                if !keep {
                    *g = 0.0;
                }
            }
        }
        opt.step(&mut params, &grad.0);
        model.set_params_flat(&params)?;
        if config.prune_persistent {
            model.apply_mask();
        }
        model.prune(config.rho, config.prune_persistent);
        params = model.params_flat();

        let record = EpochRecord {
            epoch,
            data_loss: loss.data,
            penalty: loss.penalty,
            total: loss.total,
            pruned_columns: model.pruned_count(),
        };
        on_epoch(&record, model);
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, DelaySpec, ModelSpec};
    use crate::ode::{dde_solve, HistoryBuffer, TimeGrid};

    const DT: f64 = 0.1;

    fn wavy_data(n_traj: usize, len: usize) -> Vec<Trajectory> {
        (0..n_traj)
            .map(|k| {
                let times: Vec<f64> = (0..len).map(|i| i as f64 * DT).collect();
                let rows: Vec<Vec<f64>> = times
                    .iter()
                    .map(|&t| vec![(t + k as f64).sin(), 0.5 * (1.3 * t).cos() + 0.1 * k as f64])
                    .collect();
                Trajectory::from_rows(times, &rows).unwrap()
            })
            .collect()
    }

    fn small_model(m: usize, wn: bool, ln: bool, seed: u64) -> VelocityModel {
        let delays = if m == 0 {
            DelaySpec::none()
        } else {
            DelaySpec::uniform(DT, m).unwrap()
        };
        init_model(
            &ModelSpec {
                n_series: 2,
                delays,
                n_aug: 0,
                hidden: vec![4],
                weight_norm: wn,
                layer_norm: ln,
            },
            seed,
        )
        .unwrap()
    }

    fn fd_check(model: &VelocityModel, alpha: f64) {
        let data = wavy_data(2, 12);
        let warmup = warmup_steps(model, DT).unwrap();
        let batch = Batch::from_members(&data, &[(0, 3), (1, 5)], warmup, 4, DT).unwrap();
        let config = TrainConfig {
            alpha,
            ..TrainConfig::default()
        };
        let (_, grad) = loss_and_gradient(model, &batch, &config).unwrap();
        let theta = model.params_flat();
        let eps = 1e-5;
        let mut probe = model.clone();
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += eps;
            probe.set_params_flat(&p).unwrap();
            let up = total_loss(&probe, &batch, &config).unwrap().total;
            p[i] -= 2.0 * eps;
            probe.set_params_flat(&p).unwrap();
            let down = total_loss(&probe, &batch, &config).unwrap().total;
            let fd = (up - down) / (2.0 * eps);
            let g = grad.0[i];
            let ok = (g - fd).abs() <= 1e-8 || (g - fd).abs() <= 1e-4 * g.abs().max(fd.abs());
            assert!(ok, "param {i}: adjoint {g} vs fd {fd}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_ndde() {
        fd_check(&small_model(2, false, false, 3), 0.0);
        fd_check(&small_model(2, false, false, 4), 0.05);
    }

    #[test]
    fn gradient_matches_finite_differences_node() {
        fd_check(&small_model(0, false, false, 5), 0.05);
    }

    #[test]
    fn gradient_matches_finite_differences_weight_and_layer_norm() {
        fd_check(&small_model(2, true, true, 6), 0.05);
        fd_check(&small_model(3, true, false, 7), 0.0);
        fd_check(&small_model(1, false, true, 8), 0.0);
    }

    #[test]
    fn batched_rollout_matches_generic_dde_solver() {
        let model = small_model(3, true, true, 11);
        let data = wavy_data(1, 20);
        let warmup = 3;
        let batch = Batch::from_members(&data, &[(0, 5)], warmup, 9, DT).unwrap();
        let prepared = model.prepare();
        let roll = rollout::forward(&model, &prepared, &batch.init, 8, false).unwrap();

        let hist = &batch.init.history[0];
        let samples: Vec<Vec<f64>> = hist.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut buf = HistoryBuffer::from_samples(0.0, DT, samples).unwrap();
        let grid = TimeGrid::new(warmup as f64 * DT, DT, 8).unwrap();
        let traj = dde_solve(&model, &mut buf, &grid, &SolverSpec::rk4()).unwrap();
        for n in 0..=8 {
            for j in 0..2 {
                let a = roll.predicted(n)[[0, j]];
                let b = traj.states[[n, j]];
                assert!((a - b).abs() < 1e-12, "step {n} series {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn data_loss_examples() {
        let t = |rows: &[Vec<f64>]| {
            Trajectory::from_rows((0..rows.len()).map(|i| i as f64).collect(), rows).unwrap()
        };
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(data_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(data_loss(&t(&[vec![0.0, 0.0]]), &t(&[vec![1.0, 3.0]])).unwrap(), 5.0);
        assert_eq!(data_loss(&t(&[vec![1.0]]), &t(&[vec![0.0]])).unwrap(), 1.0);
        assert!(matches!(
            data_loss(&a, &t(&[vec![0.0, 0.0]])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_loss_is_linear_in_alpha() {
        let model = small_model(2, false, false, 1);
        let data = wavy_data(1, 15);
        let batch = Batch::from_members(&data, &[(0, 4)], 2, 5, DT).unwrap();
        let at = |alpha| {
            total_loss(&model, &batch, &TrainConfig { alpha, ..TrainConfig::default() }).unwrap()
        };
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        assert!(l0.penalty > 0.0);
        assert!((l2.total - l0.total - 2.0 * (l1.total - l0.total)).abs() < 1e-12);
        assert!((l1.total - l0.total - l0.penalty).abs() < 1e-12);
    }

    #[test]
    fn zero_model_on_zero_data() {
        let mut model = small_model(2, false, false, 2);
        let zeros = vec![0.0; model.n_params()];
        model.set_params_flat(&zeros).unwrap();
        let times: Vec<f64> = (0..10).map(|i| i as f64 * DT).collect();
        let data = vec![Trajectory::new(times, Array2::zeros((10, 2))).unwrap()];
        let batch = Batch::from_members(&data, &[(0, 2), (0, 4)], 2, 5, DT).unwrap();
        let (loss, grad) = loss_and_gradient(&model, &batch, &TrainConfig::default()).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_needs_room_for_warmup() {
        let data = wavy_data(1, 10);
        assert!(Batch::from_members(&data, &[(0, 1)], 2, 3, DT).is_err());
        assert!(Batch::from_members(&data, &[(0, 8)], 2, 3, DT).is_err());
        let b = Batch::from_members(&data, &[(0, 7), (0, 2)], 2, 3, DT).unwrap();
        assert_eq!(b.members, vec![(0, 2), (0, 7)]);
        assert_eq!(b.n_steps(), 2);
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: 0.05,
            rho: 0.02,
            lr: 0.01,
            n_max: 30,
            n_batch: 4,
            l_batch: 5,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = wavy_data(3, 40);
        let run = |seed| {
            let mut model = small_model(2, false, false, 9);
            let hist = train(&mut model, &data, &quick_config(seed)).unwrap();
            (model, hist)
        };
        let (m1, h1) = run(1);
        let (m2, h2) = run(1);
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        let (m3, _) = run(2);
        assert_ne!(m1, m3);
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let data = wavy_data(1, 20);
        let mut model = small_model(2, false, false, 9);
        let before = model.clone();
        let cfg = TrainConfig {
            n_max: 0,
            ..quick_config(0)
        };
        let hist = train(&mut model, &data, &cfg).unwrap();
        assert!(hist.records.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn persistent_mask_only_grows_and_pruned_columns_stay_zero() {
        let data = wavy_data(2, 40);
        let mut model = small_model(2, false, false, 9);
        let cfg = TrainConfig {
            alpha: 0.5,
            rho: 0.05,
            lr: 0.02,
            n_max: 60,
            ..quick_config(4)
        };
        let mut prev: Vec<Vec<bool>> = model.prune_mask.clone();
        let mut grew = false;
        train_with(&mut model, &data, &cfg, |rec, m| {
            for (a, b) in prev.iter().zip(&m.prune_mask) {
                for (&was, &now) in a.iter().zip(b) {
                    assert!(was || !now, "pruned column revived at epoch {}", rec.epoch);
                }
            }
            let norms = m.input_column_norms();
            for (i, row) in m.prune_mask.iter().enumerate() {
                for (j, &keep) in row.iter().enumerate() {
                    if !keep {
                        assert_eq!(norms[[i, j]], 0.0);
                    }
                }
            }
            grew |= m.pruned_count() > 0;
            prev = m.prune_mask.clone();
        })
        .unwrap();
        assert!(grew, "strong penalty should prune something");
    }

    #[test]
    fn training_reduces_loss_on_linear_decay() {
        // z' = -z is representable exactly by an affine map.
        let times: Vec<f64> = (0..60).map(|i| i as f64 * DT).collect();
        let rows: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| vec![(-t).exp(), 2.0 * (-t).exp()])
            .collect();
        let data = vec![Trajectory::from_rows(times, &rows).unwrap()];
        let mut model = small_model(0, false, false, 13);
        let cfg = TrainConfig {
            alpha: 0.0,
            n_max: 150,
            n_batch: 8,
            l_batch: 10,
            ..quick_config(0)
        };
        let hist = train(&mut model, &data, &cfg).unwrap();
        let first = hist.records[0].data_loss;
        let last = hist.records.last().unwrap().data_loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = wavy_data(1, 20);
        let mut model = small_model(0, false, false, 0);
        for cfg in [
            TrainConfig { l_batch: 1, ..quick_config(0) },
            TrainConfig { n_batch: 0, ..quick_config(0) },
            TrainConfig { lr: 0.0, ..quick_config(0) },
            TrainConfig { solver: SolverSpec::dopri5(1e-6, 1e-8), ..quick_config(0) },
        ] {
            assert!(train(&mut model, &data, &cfg).is_err());
        }
    }

    #[test]
    fn loss_history_csv() {
        let h = LossHistory {
            records: vec![EpochRecord {
                epoch: 0,
                data_loss: 0.5,
                penalty: 2.0,
                total: 0.52,
                pruned_columns: 1,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,data_loss,penalty,total,pruned_columns\n0,0.5,2,0.52,1\n");
    }
}
