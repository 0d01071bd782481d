//! Batched fixed-step RK4 rollouts of a [`VelocityModel`] on a data grid,
//! with an exact reverse pass through every stage of the unrolled solver.
//!
//! Each batch member carries its own grid-aligned history. Index `p` runs
//! over the buffer: `0..=warmup` are recorded states, the rest are
//! predictions. Delays are whole multiples of `dt`, so a stage at
//! `t_p + c*dt` reads lag `k` at buffer position `p - K_k + c`; half-step
//! stages average the two neighbours.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{MlpGrad, MlpTape, PreparedMlp, VelocityModel};
use crate::ode::delay_steps;

/// Stage fractions of classical RK4.
const STAGE_C: [f64; 4] = [0.0, 0.5, 0.5, 1.0];

/// Starting conditions for a batch of rollouts. `history[b]` has
/// `warmup + 1` rows of observed series; its last row is the initial state.
#[derive(Debug, Clone)]
pub struct RolloutInit {
    pub history: Vec<Array2<f64>>,
    pub dt: f64,
}

impl RolloutInit {
    pub fn batch(&self) -> usize {
        self.history.len()
    }

    pub fn warmup(&self) -> usize {
        self.history.first().map_or(0, |h| h.nrows().saturating_sub(1))
    }
}

struct StageTape {
    input: Array2<f64>,
    comps: Vec<MlpTape>,
}

/// States of a batch rollout; `states[p]` is `batch x state_dim`.
pub struct Rollout {
    pub warmup: usize,
    pub n_steps: usize,
    pub states: Vec<Array2<f64>>,
    lag_steps: Vec<usize>,
    tapes: Vec<[StageTape; 4]>,
}

impl Rollout {
    /// Predicted observed series at step `n` (`n = 0` is the initial state).
    pub fn predicted(&self, n: usize) -> ArrayView2<'_, f64> {
        self.states[self.warmup + n].view()
    }
}

fn check_model_history(model: &VelocityModel, init: &RolloutInit) -> Result<Vec<usize>> {
    let lag_steps = delay_steps(&model.delays.lags, init.dt)?;
    let warmup = init.warmup();
    let needed = lag_steps.iter().copied().max().unwrap_or(0);
    if init.history.is_empty() {
        return Err(Error::EmptyDataset("empty rollout batch".into()));
    }
    for h in &init.history {
        if h.nrows() != warmup + 1 || h.ncols() != model.n_series {
            return Err(Error::ShapeMismatch(format!(
                "history block {}x{}, expected {}x{}",
                h.nrows(),
                h.ncols(),
                warmup + 1,
                model.n_series
            )));
        }
    }
    if warmup < needed {
        return Err(Error::OutOfHistory {
            t: -(needed as f64) * init.dt,
            start: -(warmup as f64) * init.dt,
            end: 0.0,
        });
    }
    Ok(lag_steps)
}

/// Fills the assembled-input matrix for one stage.
fn assemble_stage(
    model: &VelocityModel,
    states: &[Array2<f64>],
    lag_steps: &[usize],
    p: usize,
    c: f64,
    current: &Array2<f64>,
    x: &mut Array2<f64>,
) {
    let m1 = model.delays.m() + 1;
    let ns = model.n_series;
    for j in 0..ns {
        x.column_mut(j * m1).assign(&current.column(j));
    }
    for (k, &ks) in lag_steps.iter().enumerate() {
        let base = p - ks;
        for j in 0..ns {
            let col = j * m1 + k + 1;
            if c == 0.0 {
                x.column_mut(col).assign(&states[base].column(j));
            } else if c == 1.0 {
                x.column_mut(col).assign(&states[base + 1].column(j));
            } else {
                let lo = states[base].column(j);
                let hi = states[base + 1].column(j);
                let mut dst = x.column_mut(col);
                for b in 0..dst.len() {
                    dst[b] = (1.0 - c) * lo[b] + c * hi[b];
                }
            }
        }
    }
    let base = ns * m1;
    for a in 0..model.n_aug {
        x.column_mut(base + a).assign(&current.column(ns + a));
    }
}

/// Runs `n_steps` RK4 steps of size `init.dt` for every batch member.
/// With `taped`, keeps what [`backward`] needs.
pub fn forward(
    model: &VelocityModel,
    prepared: &[PreparedMlp],
    init: &RolloutInit,
    n_steps: usize,
    taped: bool,
) -> Result<Rollout> {
    let lag_steps = check_model_history(model, init)?;
    let warmup = init.warmup();
    let bsz = init.batch();
    let dim = model.state_dim();
    let n_in = model.n_inputs();
    let h = init.dt;

    let mut states: Vec<Array2<f64>> = Vec::with_capacity(warmup + 1 + n_steps);
    for p in 0..=warmup {
        let mut st = Array2::zeros((bsz, dim));
        for (b, hist) in init.history.iter().enumerate() {
            st.slice_mut(s![b, ..model.n_series]).assign(&hist.row(p));
        }
        states.push(st);
    }

    let mut tapes = Vec::with_capacity(if taped { n_steps } else { 0 });
    let mut x = Array2::zeros((bsz, n_in));
    for n in 0..n_steps {
        let p = warmup + n;
        let z = states[p].clone();
        let mut ks: Vec<Array2<f64>> = Vec::with_capacity(4);
        let mut stage_tapes: Vec<StageTape> = Vec::with_capacity(4);
        for (si, &c) in STAGE_C.iter().enumerate() {
            let y = match si {
                0 => z.clone(),
                1 | 2 => &z + &(&ks[si - 1] * (0.5 * h)),
                _ => &z + &(&ks[2] * h),
            };
            assemble_stage(model, &states, &lag_steps, p, c, &y, &mut x);
            let mut k = Array2::zeros((bsz, dim));
            let mut comp_tapes = Vec::with_capacity(if taped { dim } else { 0 });
            for (i, mlp) in prepared.iter().enumerate() {
                if taped {
                    let (out, tape) = mlp.forward_taped(x.view());
                    k.column_mut(i).assign(&out);
                    comp_tapes.push(tape);
                } else {
                    k.column_mut(i).assign(&mlp.forward(x.view()));
                }
            }
            if taped {
                stage_tapes.push(StageTape {
                    input: x.clone(),
                    comps: comp_tapes,
                });
            }
            ks.push(k);
        }
        let mut next = z;
        next.scaled_add(h / 6.0, &ks[0]);
        next.scaled_add(h / 3.0, &ks[1]);
        next.scaled_add(h / 3.0, &ks[2]);
        next.scaled_add(h / 6.0, &ks[3]);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: (n + 1) as f64 * h });
        }
        states.push(next);
        if taped {
            let arr: [StageTape; 4] = stage_tapes
                .try_into()
                .unwrap_or_else(|_| unreachable!("four stages"));
            tapes.push(arr);
        }
    }

    Ok(Rollout {
        warmup,
        n_steps,
        states,
        lag_steps,
        tapes,
    })
}

/// Reverse pass. `state_adjoint(n)` supplies `dL/dz` for predicted step `n`
/// (`1..=n_steps`, observed series only, `batch x n_series`). Returns one
/// effective-parameter gradient per component.
pub fn backward<F>(
    model: &VelocityModel,
    prepared: &[PreparedMlp],
    rollout: &Rollout,
    dt: f64,
    mut state_adjoint: F,
) -> Result<Vec<MlpGrad>>
where
    F: FnMut(usize) -> Array2<f64>,
{
    if rollout.tapes.len() != rollout.n_steps {
        return Err(Error::InvalidConfig("rollout was run without a tape".into()));
    }
    let warmup = rollout.warmup;
    let bsz = rollout.states[0].nrows();
    let dim = model.state_dim();
    let ns = model.n_series;
    let m1 = model.delays.m() + 1;
    let h = dt;
    let mut grads: Vec<MlpGrad> = prepared.iter().map(MlpGrad::zeros_like).collect();

    let total = rollout.states.len();
    let mut lam: Vec<Array2<f64>> = (0..total).map(|_| Array2::zeros((bsz, dim))).collect();
    for n in 1..=rollout.n_steps {
        let a = state_adjoint(n);
        lam[warmup + n].slice_mut(s![.., ..ns]).scaled_add(1.0, &a);
    }

    for n in (0..rollout.n_steps).rev() {
        let p = warmup + n;
        let lam_next = lam[p + 1].clone();
        lam[p] += &lam_next;
        let mut dk = [
            &lam_next * (h / 6.0),
            &lam_next * (h / 3.0),
            &lam_next * (h / 3.0),
            &lam_next * (h / 6.0),
        ];
        for si in (0..4).rev() {
            let tape = &rollout.tapes[n][si];
            let c = STAGE_C[si];
            let mut dx = Array2::<f64>::zeros(tape.input.raw_dim());
            for (i, mlp) in prepared.iter().enumerate() {
                let d = mlp
                    .backward(tape.input.view(), &tape.comps[i], dk[si].column(i), &mut grads[i], true)
                    .expect("dx requested");
                dx += &d;
            }
            // Current-state part of the input.
            let mut dy = Array2::<f64>::zeros((bsz, dim));
            for j in 0..ns {
                dy.column_mut(j).assign(&dx.column(j * m1));
            }
            for a in 0..model.n_aug {
                dy.column_mut(ns + a).assign(&dx.column(ns * m1 + a));
            }
            // Delayed part, routed to the buffer positions it was read from.
            for (k, &ks) in rollout.lag_steps.iter().enumerate() {
                let base = p - ks;
                for j in 0..ns {
                    let g = dx.column(j * m1 + k + 1);
                    if c != 1.0 {
                        let mut dst = lam[base].column_mut(j);
                        dst.scaled_add(1.0 - c, &g);
                    }
                    if c != 0.0 {
                        let mut dst = lam[base + 1].column_mut(j);
                        dst.scaled_add(c, &g);
                    }
                }
            }
            lam[p] += &dy;
            match si {
                3 => dk[2].scaled_add(h, &dy),
                2 => dk[1].scaled_add(0.5 * h, &dy),
                1 => dk[0].scaled_add(0.5 * h, &dy),
                _ => {}
            }
        }
    }
    Ok(grads)
}
