//! Component-wise velocity networks.
//!
//! Each output series `i` owns an independent MLP `f_i`. Its first-layer
//! weight columns line up with the entries of the assembled input vector, so
//! a zero column means the corresponding input cannot influence `dz_i/dt`.
//!
//! Input layout for `n` series and lags `tau_1..tau_m` is series-major:
//! `[z_1(t), z_1(t-tau_1), .., z_1(t-tau_m), z_2(t), .., z_n(t-tau_m), s_1, .., s_a]`
//! where `s` are the augmented states (current values only).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{DelayField, HistoryBuffer, SolverSpec, TimeGrid, Trajectory, VectorField};

/// Variance floor used by layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Ordered positive lags in time units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    pub lags: Vec<f64>,
}

impl DelaySpec {
    pub fn new(lags: Vec<f64>) -> Result<Self> {
        if lags.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArchitecture("lags must be positive".into()));
        }
        if lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArchitecture("lags must be strictly increasing".into()));
        }
        Ok(Self { lags })
    }

    pub fn none() -> Self {
        Self { lags: Vec::new() }
    }

    /// `tau_k = k * step` for `k = 1..=m`.
    pub fn uniform(step: f64, m: usize) -> Result<Self> {
        Self::new((1..=m).map(|k| k as f64 * step).collect())
    }

    pub fn m(&self) -> usize {
        self.lags.len()
    }

    pub fn max(&self) -> f64 {
        self.lags.last().copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Raw weight (`out x in`). With weight normalization this is the
    /// direction `v`; the effective row is `g * v / |v|`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub wn_scale: Option<Array1<f64>>,
    pub layer_norm: Option<LayerNormParams>,
}

impl LayerParams {
    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        match &self.wn_scale {
            None => self.weight.clone(),
            Some(g) => {
                let mut w = self.weight.clone();
                for (mut row, &gr) in w.rows_mut().into_iter().zip(g) {
                    let norm = row.dot(&row).sqrt();
                    if norm > 0.0 {
                        row *= gr / norm;
                    }
                }
                w
            }
        }
    }

    /// Chains a gradient on the effective weight back to `(v, g)`.
    fn wn_backward(&self, d_eff: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        match &self.wn_scale {
            None => (d_eff.clone(), None),
            Some(g) => {
                let mut dv = Array2::zeros(self.weight.raw_dim());
                let mut dg = Array1::zeros(g.len());
                for r in 0..self.weight.nrows() {
                    let v = self.weight.row(r);
                    let norm = v.dot(&v).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let de = d_eff.row(r);
                    let proj = de.dot(&v) / norm;
                    dg[r] = proj;
                    let scale = g[r] / norm;
                    let mut out = dv.row_mut(r);
                    for c in 0..v.len() {
                        out[c] = scale * (de[c] - proj * v[c] / norm);
                    }
                }
                (dv, Some(dg))
            }
        }
    }

    fn n_params(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self.wn_scale.as_ref().map_or(0, |g| g.len())
            + self.layer_norm.as_ref().map_or(0, |l| l.gain.len() + l.shift.len())
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let Some(g) = self.wn_scale.as_ref() {
            out.push(g.as_slice().expect("standard layout"));
        }
        if let Some(ln) = self.layer_norm.as_ref() {
            out.push(ln.gain.as_slice().expect("standard layout"));
            out.push(ln.shift.as_slice().expect("standard layout"));
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(g) = self.wn_scale.as_mut() {
            out.push(g.as_slice_mut().expect("standard layout"));
        }
        if let Some(ln) = self.layer_norm.as_mut() {
            out.push(ln.gain.as_slice_mut().expect("standard layout"));
            out.push(ln.shift.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// One output series' network: hidden layers use `tanh` (after layer
/// normalization when enabled); the final layer is a raw affine map to a
/// single value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMlp {
    pub layers: Vec<LayerParams>,
}

impl ComponentMlp {
    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn prepare(&self) -> PreparedMlp {
        PreparedMlp {
            layers: self
                .layers
                .iter()
                .map(|l| PreparedLayer {
                    weight: l.effective_weight(),
                    bias: l.bias.clone(),
                    layer_norm: l.layer_norm.clone(),
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.in_width() {
            return Err(Error::DimensionMismatch {
                expected: self.in_width(),
                got: x.len(),
            });
        }
        Ok(self.prepare().forward_one(x))
    }
}

#[derive(Debug, Clone)]
pub struct PreparedLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub layer_norm: Option<LayerNormParams>,
}

/// An MLP with effective weights materialized for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedMlp {
    pub layers: Vec<PreparedLayer>,
}

/// Activations kept for the backward pass of one batched evaluation.
#[derive(Debug, Clone)]
pub struct MlpTape {
    hidden: Vec<HiddenTape>,
}

#[derive(Debug, Clone)]
struct HiddenTape {
    out: Array2<f64>,
    normalized: Option<(Array2<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    /// Gradient with respect to the effective weight.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub ln_gain: Option<Array1<f64>>,
    pub ln_shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &PreparedMlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    ln_gain: l.layer_norm.as_ref().map(|p| Array1::zeros(p.gain.len())),
                    ln_shift: l.layer_norm.as_ref().map(|p| Array1::zeros(p.shift.len())),
                })
                .collect(),
        }
    }
}

fn layer_norm_rows(a: &mut Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, Array1<f64>) {
    let width = a.ncols() as f64;
    let mut inv_std = Array1::zeros(a.nrows());
    for (mut row, is) in a.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row -= mean;
        let var = row.dot(&row) / width;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let normalized = a.clone();
    *a *= &p.gain;
    *a += &p.shift;
    (normalized, inv_std)
}

impl PreparedMlp {
    pub fn in_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn forward_one(&self, x: &[f64]) -> f64 {
        let mut h = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let mut a = l.weight.dot(&h) + &l.bias;
            if li == last {
                return a[0];
            }
            if let Some(p) = &l.layer_norm {
                let width = a.len() as f64;
                let mean = a.sum() / width;
                a -= mean;
                let var = a.dot(&a) / width;
                a /= (var + LN_EPS).sqrt();
                a = a * &p.gain + &p.shift;
            }
            a.mapv_inplace(crate::activation::tanh);
            h = a;
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Batched evaluation over the rows of `x` (`batch x in`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.run(x, None)
    }

    pub fn forward_taped(&self, x: ArrayView2<f64>) -> (Array1<f64>, MlpTape) {
        let mut tape = MlpTape {
            hidden: Vec::with_capacity(self.layers.len() - 1),
        };
        let out = self.run(x, Some(&mut tape));
        (out, tape)
    }

    fn run(&self, x: ArrayView2<f64>, mut tape: Option<&mut MlpTape>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut h: Option<Array2<f64>> = None;
        for (li, l) in self.layers.iter().enumerate() {
            let input = h.as_ref().map_or(x, |a| a.view());
            let mut a = input.dot(&l.weight.t());
            a += &l.bias;
            if li == last {
                return a.column(0).to_owned();
            }
            let normalized = l.layer_norm.as_ref().map(|p| layer_norm_rows(&mut a, p));
            a.mapv_inplace(crate::activation::tanh);
            if let Some(t) = tape.as_deref_mut() {
                t.hidden.push(HiddenTape {
                    out: a.clone(),
                    normalized,
                });
            }
            h = Some(a);
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Accumulates parameter gradients for `d_out` (one value per row) into
    /// `grad` and returns the gradient with respect to `x` when requested.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        tape: &MlpTape,
        d_out: ArrayView1<f64>,
        grad: &mut MlpGrad,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut d_a: Array2<f64> = d_out.to_owned().insert_axis(Axis(1));
        for li in (0..=last).rev() {
            let l = &self.layers[li];
            let input = if li == 0 { x } else { tape.hidden[li - 1].out.view() };
            let g = &mut grad.layers[li];
            g.weight += &d_a.t().dot(&input);
            g.bias += &d_a.sum_axis(Axis(0));
            if li == 0 && !want_dx {
                return None;
            }
            let d_in = d_a.dot(&l.weight);
            if li == 0 {
                return Some(d_in);
            }
            // Through tanh (and layer norm) of the previous hidden layer.
            let prev = &tape.hidden[li - 1];
            let prev_layer = &self.layers[li - 1];
            let mut d_y = d_in;
            d_y.zip_mut_with(&prev.out, |d, &h| *d *= 1.0 - h * h);
            d_a = match (&prev.normalized, &prev_layer.layer_norm) {
                (Some((xhat, inv_std)), Some(p)) => {
                    let pg = &mut grad.layers[li - 1];
                    if let Some(dg) = pg.ln_gain.as_mut() {
                        *dg += &(&d_y * xhat).sum_axis(Axis(0));
                    }
                    if let Some(ds) = pg.ln_shift.as_mut() {
                        *ds += &d_y.sum_axis(Axis(0));
                    }
                    let mut dxhat = d_y;
                    dxhat *= &p.gain;
                    let width = dxhat.ncols() as f64;
                    for ((mut row, xr), &is) in
                        dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let s1 = row.sum() / width;
                        let s2 = row.dot(&xr) / width;
                        row.zip_mut_with(&xr, |d, &xv| *d = is * (*d - s1 - xv * s2));
                    }
                    dxhat
                }
                _ => d_y,
            };
        }
        unreachable!()
    }
}

/// Architecture description used to build a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_series: usize,
    pub delays: DelaySpec,
    #[serde(default)]
    pub n_aug: usize,
    /// Hidden widths; `[100, 100, 100]` gives four linear layers.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub weight_norm: bool,
    #[serde(default)]
    pub layer_norm: bool,
}

impl ModelSpec {
    pub fn n_inputs(&self) -> usize {
        self.n_series * (self.delays.m() + 1) + self.n_aug
    }
}

/// The full velocity field `f_theta`: one [`ComponentMlp`] per state entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    pub n_series: usize,
    pub delays: DelaySpec,
    pub n_aug: usize,
    pub components: Vec<ComponentMlp>,
    /// `prune_mask[i][j] == false` marks input column `j` of component `i`
    /// as pruned.
    pub prune_mask: Vec<Vec<bool>>,
}

/// Deterministic initialization: weights uniform on `+-1/sqrt(fan_in)`, zero
/// biases, weight-norm scales equal to the initial row norms, layer-norm
/// gain 1 and shift 0.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<VelocityModel> {
    if spec.n_series == 0 {
        return Err(Error::InvalidArchitecture("need at least one series".into()));
    }
    if spec.hidden.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArchitecture("hidden widths must be positive".into()));
    }
    let n_in = spec.n_inputs();
    let n_out = spec.n_series + spec.n_aug;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![n_in];
    widths.extend_from_slice(&spec.hidden);
    widths.push(1);
    let n_layers = widths.len() - 1;

    let components = (0..n_out)
        .map(|_| {
            let layers = (0..n_layers)
                .map(|li| {
                    let (fan_in, fan_out) = (widths[li], widths[li + 1]);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let weight =
                        Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
                    let wn_scale = spec.weight_norm.then(|| {
                        weight.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
                    });
                    let hidden = li + 1 < n_layers;
                    let layer_norm = (spec.layer_norm && hidden).then(|| LayerNormParams {
                        gain: Array1::ones(fan_out),
                        shift: Array1::zeros(fan_out),
                    });
                    LayerParams {
                        weight,
                        bias: Array1::zeros(fan_out),
                        wn_scale,
                        layer_norm,
                    }
                })
                .collect();
            ComponentMlp { layers }
        })
        .collect();

    Ok(VelocityModel {
        n_series: spec.n_series,
        delays: spec.delays.clone(),
        n_aug: spec.n_aug,
        components,
        prune_mask: vec![vec![true; n_in]; n_out],
    })
}

/// `[z(t), z(t - tau_1), ..., z(t - tau_m)]` laid out series-major, read
/// from `buf` (every entry of the stored state counts as a series).
pub fn assemble_delay_input(buf: &HistoryBuffer, t: f64, delays: &DelaySpec) -> Result<Vec<f64>> {
    let mut blocks = vec![buf.lookup(t)?];
    for &lag in &delays.lags {
        blocks.push(buf.lookup(t - lag)?);
    }
    let n = blocks[0].len();
    let mut out = Vec::with_capacity(n * blocks.len());
    for j in 0..n {
        out.extend(blocks.iter().map(|b| b[j]));
    }
    Ok(out)
}

impl VelocityModel {
    pub fn state_dim(&self) -> usize {
        self.n_series + self.n_aug
    }

    pub fn n_inputs(&self) -> usize {
        self.n_series * (self.delays.m() + 1) + self.n_aug
    }

    /// Column index of series `j` at lag index `k` (0 = current value).
    pub fn column(&self, series: usize, lag: usize) -> usize {
        series * (self.delays.m() + 1) + lag
    }

    pub fn spec(&self) -> ModelSpec {
        let l0 = &self.components[0].layers;
        ModelSpec {
            n_series: self.n_series,
            delays: self.delays.clone(),
            n_aug: self.n_aug,
            hidden: l0[..l0.len() - 1].iter().map(LayerParams::out_width).collect(),
            weight_norm: l0[0].wn_scale.is_some(),
            layer_norm: l0[0].layer_norm.is_some(),
        }
    }

    pub fn prepare(&self) -> Vec<PreparedMlp> {
        self.components.iter().map(ComponentMlp::prepare).collect()
    }

    /// Writes the assembled input for the current state and the delayed
    /// states (`delayed[k]` is the full state at `t - tau_k`).
    pub fn assemble_input(&self, current: &[f64], delayed: &[&[f64]], out: &mut [f64]) {
        let m1 = self.delays.m() + 1;
        for j in 0..self.n_series {
            out[j * m1] = current[j];
            for (k, d) in delayed.iter().enumerate() {
                out[j * m1 + k + 1] = d[j];
            }
        }
        let base = self.n_series * m1;
        for a in 0..self.n_aug {
            out[base + a] = current[self.n_series + a];
        }
    }

    /// Stacks every component's output for an assembled input vector.
    pub fn velocity_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_inputs(),
                got: x.len(),
            });
        }
        Ok(self.prepare().iter().map(|c| c.forward_one(x)).collect())
    }

    /// `(i, j)` is the l2 norm of column `j` of component `i`'s effective
    /// first-layer weight.
    pub fn input_column_norms(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.components.len(), self.n_inputs()));
        for (i, c) in self.components.iter().enumerate() {
            let w = c.layers[0].effective_weight();
            for (j, col) in w.columns().into_iter().enumerate() {
                out[[i, j]] = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        out
    }

    /// Sum of all effective first-layer column norms, component by
    /// component, column by column.
    pub fn group_lasso_penalty(&self) -> f64 {
        self.input_column_norms().iter().sum()
    }

    /// Re-zeroes the raw first-layer columns the mask marks as pruned.
    pub fn apply_mask(&mut self) {
        for (c, mask) in self.components.iter_mut().zip(&self.prune_mask) {
            let w = &mut c.layers[0].weight;
            for (j, &keep) in mask.iter().enumerate() {
                if !keep {
                    w.column_mut(j).fill(0.0);
                }
            }
        }
    }

    /// Zeroes every first-layer column whose effective norm is `<= rho`.
    /// With `persistent`, pruned columns stay masked forever; otherwise the
    /// mask is recomputed from this round alone. Returns the number of
    /// columns that went from unpruned to pruned.
    pub fn prune(&mut self, rho: f64, persistent: bool) -> usize {
        let norms = self.input_column_norms();
        let mut newly = 0;
        for (i, c) in self.components.iter_mut().enumerate() {
            let w = &mut c.layers[0].weight;
            for j in 0..w.ncols() {
                let was_kept = self.prune_mask[i][j];
                if norms[[i, j]] <= rho {
                    w.column_mut(j).fill(0.0);
                    self.prune_mask[i][j] = false;
                    if was_kept {
                        newly += 1;
                    }
                } else if !persistent {
                    self.prune_mask[i][j] = true;
                }
            }
        }
        newly
    }

    pub fn pruned_count(&self) -> usize {
        self.prune_mask.iter().flatten().filter(|k| !**k).count()
    }

    pub fn n_params(&self) -> usize {
        self.components
            .iter()
            .flat_map(|c| &c.layers)
            .map(LayerParams::n_params)
            .sum()
    }

    /// All parameters in a fixed order: per component, per layer: weight
    /// (row-major), bias, weight-norm scale, layer-norm gain and shift.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in &self.components {
            for l in &c.layers {
                for s in l.param_slices() {
                    out.extend_from_slice(s);
                }
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut pos = 0;
        for c in &mut self.components {
            for l in &mut c.layers {
                for s in l.param_slices_mut() {
                    s.copy_from_slice(&flat[pos..pos + s.len()]);
                    pos += s.len();
                }
            }
        }
        Ok(())
    }

    /// Converts gradients on effective parameters (one [`MlpGrad`] per
    /// component) into a flat gradient on the raw parameters.
    pub fn flatten_grad(&self, grads: &[MlpGrad]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (c, g) in self.components.iter().zip(grads) {
            for (l, lg) in c.layers.iter().zip(&g.layers) {
                let (dv, dg) = l.wn_backward(&lg.weight);
                out.extend(dv.iter());
                out.extend(lg.bias.iter());
                if let Some(dg) = dg {
                    out.extend(dg.iter());
                }
                if l.layer_norm.is_some() {
                    out.extend(lg.ln_gain.as_ref().expect("ln grad").iter());
                    out.extend(lg.ln_shift.as_ref().expect("ln grad").iter());
                }
            }
        }
        out
    }

    /// Flat mask over parameters: `false` for raw first-layer weights in
    /// pruned columns.
    pub fn param_keep_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for (c, mask) in self.components.iter().zip(&self.prune_mask) {
            for (li, l) in c.layers.iter().enumerate() {
                if li == 0 {
                    for _r in 0..l.weight.nrows() {
                        out.extend(mask.iter().copied());
                    }
                } else {
                    out.extend(std::iter::repeat(true).take(l.weight.len()));
                }
                let rest = l.n_params() - l.weight.len();
                out.extend(std::iter::repeat(true).take(rest));
            }
        }
        out
    }
}

impl VectorField for VelocityModel {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    /// Delay inputs, if any, are fed the current state.
    fn eval(&self, _t: f64, z: &[f64], dz: &mut [f64]) {
        let delayed: Vec<&[f64]> = vec![z; self.delays.m()];
        let mut x = vec![0.0; self.n_inputs()];
        self.assemble_input(z, &delayed, &mut x);
        for (d, c) in dz.iter_mut().zip(&self.components) {
            *d = c.forward(&x).expect("assembled width matches");
        }
    }
}

impl DelayField for VelocityModel {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn delays(&self) -> &[f64] {
        &self.delays.lags
    }

    fn eval(&self, _t: f64, z: &[f64], delayed: &[&[f64]], dz: &mut [f64]) {
        let mut x = vec![0.0; self.n_inputs()];
        self.assemble_input(z, delayed, &mut x);
        for (d, c) in dz.iter_mut().zip(&self.components) {
            *d = c.forward(&x).expect("assembled width matches");
        }
    }
}

/// Initial value problem for a model without delay inputs.
pub fn solve_ivp(
    model: &VelocityModel,
    z0: &[f64],
    grid: &TimeGrid,
    spec: &SolverSpec,
) -> Result<Trajectory> {
    if !model.delays.is_empty() {
        return Err(Error::InvalidArchitecture(
            "solve_ivp needs a model without delay inputs".into(),
        ));
    }
    crate::ode::solve_ivp(model, z0, grid, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::InitialFunction;

    fn linear_layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> LayerParams {
        let rows = w.len();
        let cols = w[0].len();
        LayerParams {
            weight: Array2::from_shape_vec((rows, cols), w.into_iter().flatten().collect()).unwrap(),
            bias: Array1::from(b),
            wn_scale: None,
            layer_norm: None,
        }
    }

    fn spec(n: usize, m: usize, hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            n_series: n,
            delays: DelaySpec::uniform(0.1, m).unwrap(),
            n_aug: 0,
            hidden,
            weight_norm: false,
            layer_norm: false,
        }
    }

    #[test]
    fn affine_single_layer() {
        let c = ComponentMlp {
            layers: vec![linear_layer(vec![vec![2.0]], vec![1.0])],
        };
        assert_eq!(c.forward(&[3.0]).unwrap(), 7.0);
        assert!(matches!(c.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = init_model(&spec(2, 0, vec![4, 4]), 1).unwrap();
        let zeros = vec![0.0; m.n_params()];
        m.set_params_flat(&zeros).unwrap();
        assert_eq!(m.velocity_eval(&[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn weight_norm_effective_row() {
        let mut l = linear_layer(vec![vec![3.0, 4.0]], vec![0.0]);
        l.wn_scale = Some(Array1::from(vec![10.0]));
        let w = l.effective_weight();
        assert!((w[[0, 0]] - 6.0).abs() < 1e-12 && (w[[0, 1]] - 8.0).abs() < 1e-12);
        // Scaling the raw row leaves the effective row unchanged.
        l.weight *= 7.5;
        let w2 = l.effective_weight();
        assert!((&w - &w2).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let s = spec(6, 0, vec![100, 100, 100]);
        let a = init_model(&s, 7).unwrap();
        let b = init_model(&s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.components.len(), 6);
        assert_eq!(a.components[0].layers.len(), 4);
        assert_eq!(a.components[0].in_width(), 6);
        assert_eq!(a.components[0].layers[3].out_width(), 1);
        assert_ne!(a, init_model(&s, 8).unwrap());

        let mg = init_model(&spec(1, 10, vec![25, 25, 25]), 0).unwrap();
        assert_eq!(mg.components.len(), 1);
        assert_eq!(mg.components[0].in_width(), 11);
        assert_eq!(mg.components[0].layers.len(), 4);
    }

    #[test]
    fn init_rejects_bad_arch() {
        assert!(matches!(init_model(&spec(0, 0, vec![4]), 0), Err(Error::InvalidArchitecture(_))));
        assert!(matches!(init_model(&spec(2, 0, vec![0]), 0), Err(Error::InvalidArchitecture(_))));
    }

    #[test]
    fn delay_input_ordering() {
        let buf = HistoryBuffer::with_initial(0.0, 0.1, InitialFunction::Constant(vec![2.5])).unwrap();
        let d = DelaySpec::uniform(0.1, 3).unwrap();
        assert_eq!(assemble_delay_input(&buf, 0.0, &d).unwrap(), vec![2.5; 4]);
        assert_eq!(assemble_delay_input(&buf, 0.0, &DelaySpec::none()).unwrap(), vec![2.5]);

        // Three gauges, six lags: each gauge contributes a contiguous block.
        let samples: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![100.0 + i as f64, 200.0 + i as f64, 300.0 + i as f64])
            .collect();
        let buf = HistoryBuffer::from_samples(0.0, 1.0, samples).unwrap();
        let x = assemble_delay_input(&buf, 6.0, &DelaySpec::uniform(1.0, 6).unwrap()).unwrap();
        assert_eq!(x.len(), 21);
        let expect: Vec<f64> = [100.0, 200.0, 300.0]
            .iter()
            .flat_map(|base| (0..7).map(move |k| base + 6.0 - k as f64))
            .collect();
        assert_eq!(x, expect);
    }

    #[test]
    fn rotation_field() {
        let comp = |w: Vec<f64>| ComponentMlp {
            layers: vec![linear_layer(vec![w], vec![0.0])],
        };
        let m = VelocityModel {
            n_series: 2,
            delays: DelaySpec::none(),
            n_aug: 0,
            components: vec![comp(vec![0.0, 1.0]), comp(vec![-1.0, 0.0])],
            prune_mask: vec![vec![true; 2]; 2],
        };
        assert_eq!(m.velocity_eval(&[0.3, 0.7]).unwrap(), vec![0.7, -0.3]);
    }

    #[test]
    fn column_norms_and_penalty() {
        let comp = ComponentMlp {
            layers: vec![
                linear_layer(vec![vec![3.0, 0.0], vec![4.0, 0.0]], vec![0.0, 0.0]),
                linear_layer(vec![vec![1.0, 1.0]], vec![0.0]),
            ],
        };
        let mut m = VelocityModel {
            n_series: 2,
            delays: DelaySpec::none(),
            n_aug: 0,
            components: vec![comp.clone()],
            prune_mask: vec![vec![true; 2]],
        };
        m.n_series = 2;
        let norms = m.input_column_norms();
        assert_eq!(norms[[0, 0]], 5.0);
        assert_eq!(norms[[0, 1]], 0.0);
        assert_eq!(m.group_lasso_penalty(), 5.0);
        m.components.push(comp);
        m.prune_mask.push(vec![true; 2]);
        assert_eq!(m.group_lasso_penalty(), 10.0);
    }

    #[test]
    fn prune_threshold_is_inclusive() {
        let mut m = init_model(&spec(2, 0, vec![3]), 3).unwrap();
        let w = &mut m.components[0].layers[0].weight;
        w.column_mut(0).assign(&Array1::from(vec![0.005, 0.0, 0.0]));
        w.column_mut(1).assign(&Array1::from(vec![0.01, 0.0, 0.0]));
        let w = &mut m.components[1].layers[0].weight;
        w.column_mut(0).assign(&Array1::from(vec![3.0, 4.0, 0.0]));
        let before = m.components[1].layers[0].weight.clone();
        let n = m.prune(0.01, true);
        assert_eq!(n, 2);
        assert_eq!(m.prune_mask[0], vec![false, false]);
        assert!(m.prune_mask[1][0]);
        assert_eq!(m.components[1].layers[0].weight.column(0), before.column(0));
        assert_eq!(m.input_column_norms()[[0, 1]], 0.0);
        // Already-pruned columns do not count twice.
        assert_eq!(m.prune(0.01, true), 0);
    }

    #[test]
    fn masked_column_has_no_influence() {
        let mut m = init_model(&spec(3, 2, vec![8, 8]), 11).unwrap();
        m.prune_mask[1][4] = false;
        m.apply_mask();
        let mut x: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
        let base = m.velocity_eval(&x).unwrap()[1];
        for v in [-1e6, -3.0, 0.0, 42.0] {
            x[4] = v;
            assert_eq!(m.velocity_eval(&x).unwrap()[1], base);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut s = spec(2, 1, vec![5, 4]);
        s.weight_norm = true;
        s.layer_norm = true;
        let mut m = init_model(&s, 5).unwrap();
        let p = m.params_flat();
        assert_eq!(p.len(), m.n_params());
        assert_eq!(m.param_keep_mask().len(), p.len());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        m.set_params_flat(&shifted).unwrap();
        assert_eq!(m.params_flat(), shifted);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut s = spec(2, 0, vec![16, 16]);
        s.layer_norm = true;
        let m = init_model(&s, 9).unwrap();
        let prepared = m.components[0].prepare();
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 - 2.5) * (j as f64 + 0.5));
        let (_, tape) = prepared.forward_taped(x.view());
        for h in &tape.hidden {
            let (xhat, _) = h.normalized.as_ref().unwrap();
            for row in xhat.rows() {
                let mean = row.sum() / row.len() as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                assert!(mean.abs() < 1e-6);
                // Unit variance up to the epsilon floor.
                assert!((var - 1.0).abs() < 1e-3, "{var}");
            }
        }
    }

    #[test]
    fn batched_forward_matches_single() {
        let mut s = spec(2, 2, vec![6, 5]);
        s.weight_norm = true;
        s.layer_norm = true;
        let m = init_model(&s, 21).unwrap();
        let prepared = m.components[1].prepare();
        let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let batched = prepared.forward(x.view());
        for r in 0..4 {
            let single = m.components[1].forward(x.row(r).as_slice().unwrap()).unwrap();
            assert!((batched[r] - single).abs() < 1e-12);
        }
    }

    #[test]
    fn component_independence() {
        let a = init_model(&spec(3, 0, vec![6]), 2).unwrap();
        let mut b = a.clone();
        b.components[0].layers[1].weight.mapv_inplace(|v| v * 3.0 + 1.0);
        let x = [0.2, -0.4, 0.9];
        let ya = a.velocity_eval(&x).unwrap();
        let yb = b.velocity_eval(&x).unwrap();
        assert_ne!(ya[0], yb[0]);
        assert_eq!(ya[1..], yb[1..]);
    }

    #[test]
    fn node_rejects_delay_model() {
        let m = init_model(&spec(1, 2, vec![3]), 0).unwrap();
        let grid = TimeGrid::new(0.0, 0.1, 3).unwrap();
        assert!(solve_ivp(&m, &[1.0], &grid, &SolverSpec::rk4()).is_err());
    }

    #[test]
    fn linear_decay_model_matches_exponential() {
        let m = VelocityModel {
            n_series: 1,
            delays: DelaySpec::none(),
            n_aug: 0,
            components: vec![ComponentMlp {
                layers: vec![linear_layer(vec![vec![-1.0]], vec![0.0])],
            }],
            prune_mask: vec![vec![true]],
        };
        let grid = TimeGrid::spanning(1.0, 0.01).unwrap();
        let traj = solve_ivp(&m, &[1.0], &grid, &SolverSpec::dopri5(1e-9, 1e-11)).unwrap();
        for (i, t) in traj.times.iter().enumerate() {
            assert!((traj.states[[i, 0]] - (-t).exp()).abs() < 1e-8);
        }
    }
}
