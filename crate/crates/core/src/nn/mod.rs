//! Stacked LSTM regressor with a fully connected head, trained by exact
//! backpropagation through time.
//!
//! Gate order inside every LSTM weight block is input, forget, cell, output.
//! Hidden and cell state start at zero for every window. FC layers use `tanh`
//! between them and a linear output.

mod checkpoint;
mod params;

use std::sync::Arc;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use params::{Layout, ParameterVector, Segment, SegmentKind};

use crate::error::{Error, Result};
use crate::extreme::{evl_grad, evl_loss, indicator, EventThresholds, EvlParams, Tail};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub lstm_layers: usize,
    pub hidden_dim: usize,
    /// Output sizes of the FC layers; the last must be 1.
    pub fc_dims: Vec<usize>,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// L2 coefficient on weights (biases excluded).
    pub lambda: f64,
    /// Weight of the extreme value loss term; 0 disables it.
    pub evl_weight: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            lstm_layers: 2,
            hidden_dim: 32,
            fc_dims: vec![16, 8, 1],
            clip_norm: 1.0,
            lambda: 0.0,
            evl_weight: 0.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.lstm_layers == 0 {
            return Err(Error::config("model.lstm_layers", "must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if self.fc_dims.last() != Some(&1) || self.fc_dims.contains(&0) {
            return Err(Error::config("model.fc_dims", "must be positive sizes ending in 1"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::config("model.clip", "must be finite and >= 0"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("model.lambda", "must be finite and >= 0"));
        }
        if !(self.evl_weight.is_finite() && self.evl_weight >= 0.0) {
            return Err(Error::config("evl.weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Optional extreme value loss term attached to the regression loss.
///
/// The prediction is mapped to an event probability
/// `u = sigmoid((prediction - eps1) / scale)` and scored against the
/// right-extreme label of the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvlTerm {
    pub thresholds: EventThresholds,
    pub params: EvlParams,
    pub scale: f64,
}

const EVL_U_MIN: f64 = 1e-12;

impl EvlTerm {
    pub fn label(&self, target: f64) -> u8 {
        Tail::Right.binary_label(indicator(target, &self.thresholds))
    }

    /// `(u, du/dprediction)`; the derivative is zero where `u` had to be clamped.
    fn probability(&self, prediction: f64) -> (f64, f64) {
        let z = Tail::Right.exceedance_score(prediction, &self.thresholds, self.scale);
        let u = 1.0 / (1.0 + (-z).exp());
        if u < EVL_U_MIN {
            (EVL_U_MIN, 0.0)
        } else if u > 1.0 - EVL_U_MIN {
            (1.0 - EVL_U_MIN, 0.0)
        } else {
            (u, u * (1.0 - u) / self.scale)
        }
    }

    pub fn value(&self, prediction: f64, target: f64) -> Result<f64> {
        let (u, _) = self.probability(prediction);
        evl_loss(u, self.label(target), &self.params)
    }

    pub fn derivative(&self, prediction: f64, target: f64) -> Result<f64> {
        let (u, du) = self.probability(prediction);
        if du == 0.0 {
            return Ok(0.0);
        }
        Ok(evl_grad(u, self.label(target), &self.params)? * du)
    }
}

#[derive(Debug, Clone)]
struct LstmBlock {
    input: usize,
    hidden: usize,
    w_x: usize,
    w_h: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    input: usize,
    output: usize,
    weight: usize,
    bias: usize,
}

/// Network shape bound to a parameter layout. Holds no weights itself.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    layout: Arc<Layout>,
    lstm: Vec<LstmBlock>,
    dense: Vec<DenseBlock>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    /// `steps x input`
    inputs: Vec<f64>,
    /// `steps x 4h`, post-activation gates
    gates: Vec<f64>,
    /// `(steps + 1) x h`, row 0 is the zero initial state
    cells: Vec<f64>,
    hiddens: Vec<f64>,
    /// `steps x h`, tanh of the cell state
    cell_tanh: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    lstm: Vec<LstmCache>,
    /// Input to each dense layer.
    dense_inputs: Vec<Vec<f64>>,
    prediction: f64,
}

impl ForwardCache {
    pub fn prediction(&self) -> f64 {
        self.prediction
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden state of LSTM layer `layer` after `t` steps (`t = 0` is the zero state).
    pub fn hidden(&self, layer: usize, t: usize) -> &[f64] {
        let c = &self.lstm[layer];
        let h = c.hiddens.len() / (self.steps + 1);
        &c.hiddens[t * h..(t + 1) * h]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += m * x` for a row-major `rows x cols` matrix.
fn gemv_acc(m: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += m^T * y`.
fn gemv_t_acc(m: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yi) in m.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

/// `g += y x^T`.
fn outer_acc(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (row, &yi) in g.chunks_exact_mut(cols).zip(y) {
        if yi != 0.0 {
            for (gi, xi) in row.iter_mut().zip(x) {
                *gi += yi * xi;
            }
        }
    }
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::default();
        let h = cfg.hidden_dim;
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        let mut input = cfg.input_dim;
        for l in 0..cfg.lstm_layers {
            let w_x = layout.push(format!("lstm{l}.w_x"), SegmentKind::Weight, 4 * h, input);
            let w_h = layout.push(format!("lstm{l}.w_h"), SegmentKind::Weight, 4 * h, h);
            let bias = layout.push(format!("lstm{l}.b"), SegmentKind::Bias, 4 * h, 1);
            lstm.push(LstmBlock { input, hidden: h, w_x, w_h, bias });
            input = h;
        }
        let mut dense = Vec::with_capacity(cfg.fc_dims.len());
        for (k, &output) in cfg.fc_dims.iter().enumerate() {
            let weight = layout.push(format!("fc{k}.w"), SegmentKind::Weight, output, input);
            let bias = layout.push(format!("fc{k}.b"), SegmentKind::Bias, output, 1);
            dense.push(DenseBlock { input, output, weight, bias });
            input = output;
        }
        Ok(Self { cfg, layout: Arc::new(layout), lstm, dense })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let forget: Vec<_> = self
            .lstm
            .iter()
            .map(|b| b.bias + b.hidden..b.bias + 2 * b.hidden)
            .collect();
        let values = params::init_values(&self.layout, &forget, seed);
        ParameterVector { values, layout: self.layout.clone(), version: 0 }
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.values.len() != self.layout.len() {
            return Err(Error::Contract(format!(
                "network expects {} parameters, got {}",
                self.layout.len(),
                params.values.len()
            )));
        }
        Ok(())
    }

    /// Runs the window through the network. `inputs` holds `steps * input_dim`
    /// values, time-major.
    pub fn forward(&self, params: &ParameterVector, inputs: &[f64]) -> Result<ForwardCache> {
        self.check_params(params)?;
        let d_in = self.cfg.input_dim;
        if inputs.is_empty() || inputs.len() % d_in != 0 {
            return Err(Error::Contract(format!(
                "window of {} values is not a whole number of {d_in}-dimensional steps",
                inputs.len()
            )));
        }
        let steps = inputs.len() / d_in;
        let w = &params.values;

        let mut caches: Vec<LstmCache> = Vec::with_capacity(self.lstm.len());
        let mut layer_in = inputs.to_vec();
        for block in &self.lstm {
            let h = block.hidden;
            let w_x = &w[block.w_x..block.w_x + 4 * h * block.input];
            let w_h = &w[block.w_h..block.w_h + 4 * h * h];
            let bias = &w[block.bias..block.bias + 4 * h];
            let mut gates = vec![0.0; steps * 4 * h];
            let mut cells = vec![0.0; (steps + 1) * h];
            let mut hiddens = vec![0.0; (steps + 1) * h];
            let mut cell_tanh = vec![0.0; steps * h];
            for t in 0..steps {
                let x = &layer_in[t * block.input..(t + 1) * block.input];
                let a = &mut gates[t * 4 * h..(t + 1) * 4 * h];
                a.copy_from_slice(bias);
                gemv_acc(w_x, block.input, x, a);
                gemv_acc(w_h, h, &hiddens[t * h..(t + 1) * h], a);
                for j in 0..h {
                    let i_g = sigmoid(a[j]);
                    let f_g = sigmoid(a[h + j]);
                    let g_g = a[2 * h + j].tanh();
                    let o_g = sigmoid(a[3 * h + j]);
                    a[j] = i_g;
                    a[h + j] = f_g;
                    a[2 * h + j] = g_g;
                    a[3 * h + j] = o_g;
                    let c = f_g * cells[t * h + j] + i_g * g_g;
                    let tc = c.tanh();
                    cells[(t + 1) * h + j] = c;
                    cell_tanh[t * h + j] = tc;
                    hiddens[(t + 1) * h + j] = o_g * tc;
                }
                if hiddens[(t + 1) * h..(t + 2) * h].iter().any(|v| !v.is_finite())
                    || cells[(t + 1) * h..(t + 2) * h].iter().any(|v| !v.is_finite())
                {
                    return Err(Error::Numeric { stage: "lstm forward", timestep: t });
                }
            }
            let next_in = hiddens[h..].to_vec();
            caches.push(LstmCache {
                inputs: std::mem::replace(&mut layer_in, next_in),
                gates,
                cells,
                hiddens,
                cell_tanh,
            });
        }

        let top = self.lstm.last().expect("at least one LSTM layer");
        let mut act = caches.last().unwrap().hiddens[steps * top.hidden..].to_vec();
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        for (k, block) in self.dense.iter().enumerate() {
            let mut z = w[block.bias..block.bias + block.output].to_vec();
            gemv_acc(&w[block.weight..block.weight + block.output * block.input], block.input, &act, &mut z);
            dense_inputs.push(act);
            if k + 1 < self.dense.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { stage: "dense forward", timestep: steps });
            }
            act = z;
        }
        Ok(ForwardCache { steps, lstm: caches, dense_inputs, prediction: act[0] })
    }

    pub fn predict(&self, params: &ParameterVector, inputs: &[f64]) -> Result<f64> {
        self.forward(params, inputs).map(|c| c.prediction)
    }

    /// `(prediction - target)^2 + lambda * sum(w^2) + evl_weight * EVL`.
    pub fn loss(&self, prediction: f64, target: f64, params: &ParameterVector, evl: Option<&EvlTerm>) -> Result<f64> {
        let r = prediction - target;
        let mut total = r * r;
        if self.cfg.lambda > 0.0 {
            total += self.cfg.lambda * params.weight_sq_sum();
        }
        if let (Some(term), true) = (evl, self.cfg.evl_weight > 0.0) {
            total += self.cfg.evl_weight * term.value(prediction, target)?;
        }
        Ok(total)
    }

    /// Exact gradient of [`Network::loss`] with respect to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        target: f64,
        params: &ParameterVector,
        evl: Option<&EvlTerm>,
    ) -> Result<ParameterVector> {
        self.check_params(params)?;
        if cache.lstm.len() != self.lstm.len() || cache.dense_inputs.len() != self.dense.len() {
            return Err(Error::Contract("forward cache does not match this network".into()));
        }
        let w = &params.values;
        let mut grad = ParameterVector::zeros(self.layout.clone());
        let g = &mut grad.values;

        let mut dy = 2.0 * (cache.prediction - target);
        if let (Some(term), true) = (evl, self.cfg.evl_weight > 0.0) {
            dy += self.cfg.evl_weight * term.derivative(cache.prediction, target)?;
        }

        // dense head, top to bottom
        let mut delta = vec![dy];
        for (k, block) in self.dense.iter().enumerate().rev() {
            let x = &cache.dense_inputs[k];
            outer_acc(&mut g[block.weight..block.weight + block.output * block.input], block.input, &delta, x);
            for (gb, d) in g[block.bias..block.bias + block.output].iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut dx = vec![0.0; block.input];
            gemv_t_acc(&w[block.weight..block.weight + block.output * block.input], block.input, &delta, &mut dx);
            if k > 0 {
                // x = tanh(z) of the layer below
                for (d, a) in dx.iter_mut().zip(x) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }

        // LSTM stack, top to bottom; dh_ext holds dL/dh_t from above for every step
        let steps = cache.steps;
        let top = self.lstm.last().unwrap();
        let mut dh_ext = vec![0.0; steps * top.hidden];
        dh_ext[(steps - 1) * top.hidden..].copy_from_slice(&delta);

        for (l, block) in self.lstm.iter().enumerate().rev() {
            let c = &cache.lstm[l];
            let h = block.hidden;
            let w_x = &w[block.w_x..block.w_x + 4 * h * block.input];
            let w_h = &w[block.w_h..block.w_h + 4 * h * h];
            let mut dx_all = vec![0.0; steps * block.input];
            let mut dh_rec = vec![0.0; h];
            let mut dc_rec = vec![0.0; h];
            let mut da = vec![0.0; 4 * h];
            for t in (0..steps).rev() {
                let gates = &c.gates[t * 4 * h..(t + 1) * 4 * h];
                let c_prev = &c.cells[t * h..(t + 1) * h];
                for j in 0..h {
                    let (i_g, f_g, g_g, o_g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let tc = c.cell_tanh[t * h + j];
                    let dh = dh_ext[t * h + j] + dh_rec[j];
                    let d_o = dh * tc;
                    let dc = dc_rec[j] + dh * o_g * (1.0 - tc * tc);
                    da[j] = dc * g_g * i_g * (1.0 - i_g);
                    da[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
                    da[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                    da[3 * h + j] = d_o * o_g * (1.0 - o_g);
                    dc_rec[j] = dc * f_g;
                }
                let x = &c.inputs[t * block.input..(t + 1) * block.input];
                let h_prev = &c.hiddens[t * h..(t + 1) * h];
                outer_acc(&mut g[block.w_x..block.w_x + 4 * h * block.input], block.input, &da, x);
                outer_acc(&mut g[block.w_h..block.w_h + 4 * h * h], h, &da, h_prev);
                for (gb, d) in g[block.bias..block.bias + 4 * h].iter_mut().zip(&da) {
                    *gb += d;
                }
                dh_rec.fill(0.0);
                gemv_t_acc(w_h, h, &da, &mut dh_rec);
                if l > 0 {
                    gemv_t_acc(w_x, block.input, &da, &mut dx_all[t * block.input..(t + 1) * block.input]);
                }
            }
            dh_ext = dx_all;
        }

        if self.cfg.lambda > 0.0 {
            let two_lambda = 2.0 * self.cfg.lambda;
            for s in self.layout.segments().iter().filter(|s| s.kind == SegmentKind::Weight) {
                for (gi, wi) in g[s.range()].iter_mut().zip(&w[s.range()]) {
                    *gi += two_lambda * wi;
                }
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward pass".into()));
        }
        Ok(grad)
    }

    /// Forward + loss + backward for one sample.
    pub fn loss_and_grad(
        &self,
        params: &ParameterVector,
        inputs: &[f64],
        target: f64,
        evl: Option<&EvlTerm>,
    ) -> Result<(f64, ParameterVector)> {
        let cache = self.forward(params, inputs)?;
        let loss = self.loss(cache.prediction, target, params, evl)?;
        let grad = self.backward(&cache, target, params, evl)?;
        Ok((loss, grad))
    }
}

/// Rescales `grad` to norm `clip_norm` if it is longer; `clip_norm = 0` disables.
pub fn clip_gradients(mut grad: ParameterVector, clip_norm: f64) -> ParameterVector {
    clip_in_place(&mut grad, clip_norm);
    grad
}

pub fn clip_in_place(grad: &mut ParameterVector, clip_norm: f64) {
    if clip_norm <= 0.0 {
        return;
    }
    let norm = grad.norm();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grad.values.iter_mut().for_each(|v| *v *= scale);
    }
}

/// `w - eta * g`, with the version bumped by one.
pub fn sgd_step(params: &ParameterVector, grad: &ParameterVector, eta: f64) -> Result<ParameterVector> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grad, eta)?;
    Ok(next)
}

pub fn sgd_step_in_place(params: &mut ParameterVector, grad: &ParameterVector, eta: f64) -> Result<()> {
    params.check_same_shape(grad)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Argument(format!("step size must be finite and > 0, got {eta}")));
    }
    for (w, g) in params.values.iter_mut().zip(&grad.values) {
        *w -= eta * g;
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("sgd step".into()));
    }
    params.version += 1;
    Ok(())
}
