//! LSTM cell, stacked sequence forward pass and exact backpropagation
//! through time.
//!
//! Per layer and timestep:
//!
//! ```text
//! c̃ = tanh(W_c_h·h⁻ + W_c_x·x + b_c)
//! f = σ(W_f_h·h⁻ + W_f_x·x + b_f)
//! g = σ(W_g_h·h⁻ + W_g_x·x + b_g)
//! o = σ(W_o_h·h⁻ + W_o_x·x + b_o)
//! c = f ⊙ c⁻ + g ⊙ c̃
//! h = o ⊙ tanh(c)
//! ```
//!
//! and the output head is `ŷ = W_out·h + b_out` on the last layer. Inputs are
//! flat row-major `steps × input_size` slices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_normal_init, Matrix, Rng};

/// Default window length in days.
pub const DEFAULT_SEQUENCE_LENGTH: usize = 200;
/// Default stride between windows in days.
pub const DEFAULT_WINDOW_SHIFT: usize = 100;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weights of one gate (or of the candidate cell state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub bias: Vec<f64>,
}

impl GateParams {
    fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_h: Matrix::zeros(hidden, hidden),
            w_x: Matrix::zeros(hidden, input),
            bias: vec![0.0; hidden],
        }
    }

    fn xavier(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        Self {
            w_h: xavier_normal_init(hidden, hidden, rng),
            w_x: xavier_normal_init(hidden, input, rng),
            bias: vec![0.0; hidden],
        }
    }

    /// `out = W_h·h + W_x·x + b`
    #[inline]
    fn affine(&self, h: &[f64], x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        self.w_h.matvec_acc(h, out);
        self.w_x.matvec_acc(x, out);
    }
}

/// One LSTM layer: candidate state plus forget, input and output gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub candidate: GateParams,
    pub forget: GateParams,
    pub input: GateParams,
    pub output: GateParams,
    pub hidden_size: usize,
    pub input_size: usize,
}

/// Hidden and cell state after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl StepState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmLayer {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            candidate: GateParams::zeros(hidden, input),
            forget: GateParams::zeros(hidden, input),
            input: GateParams::zeros(hidden, input),
            output: GateParams::zeros(hidden, input),
            hidden_size: hidden,
            input_size: input,
        }
    }

    fn xavier(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        Self {
            candidate: GateParams::xavier(hidden, input, rng),
            forget: GateParams::xavier(hidden, input, rng),
            input: GateParams::xavier(hidden, input, rng),
            output: GateParams::xavier(hidden, input, rng),
            hidden_size: hidden,
            input_size: input,
        }
    }

    fn gates(&self) -> [&GateParams; 4] {
        [&self.candidate, &self.forget, &self.input, &self.output]
    }

    fn gates_mut(&mut self) -> [&mut GateParams; 4] {
        [
            &mut self.candidate,
            &mut self.forget,
            &mut self.input,
            &mut self.output,
        ]
    }

    /// Writes `[c̃, f, g, o]` activations into `acts` (length 4H) and the new
    /// cell/hidden state into `c`, `tanh_c`, `h`.
    #[inline]
    fn step_into(
        &self,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        acts: &mut [f64],
        c: &mut [f64],
        tanh_c: &mut [f64],
        h: &mut [f64],
    ) {
        let hs = self.hidden_size;
        for (k, gate) in self.gates().iter().enumerate() {
            gate.affine(h_prev, x, &mut acts[k * hs..(k + 1) * hs]);
        }
        let (cand, rest) = acts.split_at_mut(hs);
        let (f, rest) = rest.split_at_mut(hs);
        let (g, o) = rest.split_at_mut(hs);
        for j in 0..hs {
            cand[j] = cand[j].tanh();
            f[j] = sigmoid(f[j]);
            g[j] = sigmoid(g[j]);
            o[j] = sigmoid(o[j]);
            c[j] = f[j] * c_prev[j] + g[j] * cand[j];
            tanh_c[j] = c[j].tanh();
            h[j] = o[j] * tanh_c[j];
        }
    }

    /// One cell transition.
    pub fn step(&self, x: &[f64], prev: &StepState) -> StepState {
        let hs = self.hidden_size;
        let mut acts = vec![0.0; 4 * hs];
        let mut next = StepState::zeros(hs);
        let mut tanh_c = vec![0.0; hs];
        self.step_into(x, &prev.h, &prev.c, &mut acts, &mut next.c, &mut tanh_c, &mut next.h);
        next
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub sequence_length: usize,
    pub window_shift: usize,
}

impl LstmConfig {
    pub fn new(hidden_size: usize, num_layers: usize, dropout_rate: f64) -> Self {
        Self {
            hidden_size,
            num_layers,
            dropout_rate,
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            window_shift: DEFAULT_WINDOW_SHIFT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("hidden size and layer count must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.window_shift == 0 || self.window_shift > self.sequence_length {
            return Err(Error::Config(format!(
                "window shift {} must be in 1..={}",
                self.window_shift, self.sequence_length
            )));
        }
        Ok(())
    }
}

/// Full parameter set of a stacked LSTM with a linear output head. Also used
/// as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub hidden_size: usize,
    pub input_size: usize,
    pub output_size: usize,
}

/// Inverted-dropout scale factors applied to each non-final layer's hidden
/// output: entry is 0 or `1/(1-p)`. One `steps × hidden` block per boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample(params: &LstmParams, steps: usize, rate: f64, rng: &mut Rng) -> Option<Self> {
        if rate <= 0.0 || params.layers.len() < 2 {
            return None;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = steps * params.hidden_size;
        let masks = (0..params.layers.len() - 1)
            .map(|_| {
                (0..n)
                    .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
                    .collect()
            })
            .collect();
        Some(Self { masks })
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// steps × input
    xs: Vec<f64>,
    /// (steps + 1) × H, row 0 is the zero initial state
    h: Vec<f64>,
    c: Vec<f64>,
    /// steps × 4H
    acts: Vec<f64>,
    /// steps × H
    tanh_c: Vec<f64>,
}

/// Cached activations of one forward pass, consumed by [`LstmParams::backward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    layers: Vec<LayerCache>,
    pub predictions: Vec<f64>,
}

/// Tensor descriptor used in the serialized shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub format: String,
    pub hidden_size: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub num_layers: usize,
    pub tensors: Vec<TensorShape>,
}

const GATE_NAMES: [&str; 4] = ["candidate", "forget", "input", "output"];

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize, num_layers: usize, output_size: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| LstmLayer::zeros(hidden_size, if l == 0 { input_size } else { hidden_size }))
            .collect();
        Self {
            layers,
            w_out: Matrix::zeros(output_size, hidden_size),
            b_out: vec![0.0; output_size],
            hidden_size,
            input_size,
            output_size,
        }
    }

    /// Xavier-normal weights, zero biases.
    pub fn xavier(input_size: usize, config: &LstmConfig, output_size: usize, rng: &mut Rng) -> Self {
        let h = config.hidden_size;
        let layers = (0..config.num_layers)
            .map(|l| LstmLayer::xavier(h, if l == 0 { input_size } else { h }, rng))
            .collect();
        Self {
            layers,
            w_out: xavier_normal_init(output_size, h, rng),
            b_out: vec![0.0; output_size],
            hidden_size: h,
            input_size,
            output_size,
        }
    }

    /// Zeroed parameter set with identical shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size, self.hidden_size, self.layers.len(), self.output_size)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every tensor in a fixed order (layers, gates, w_h/w_x/bias; then head).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for g in layer.gates() {
                out.push(g.w_h.as_slice());
                out.push(g.w_x.as_slice());
                out.push(g.bias.as_slice());
            }
        }
        out.push(self.w_out.as_slice());
        out.push(self.b_out.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            for g in layer.gates_mut() {
                out.push(g.w_h.as_mut_slice());
                out.push(g.w_x.as_mut_slice());
                out.push(g.bias.as_mut_slice());
            }
        }
        out.push(self.w_out.as_mut_slice());
        out.push(self.b_out.as_mut_slice());
        out
    }

    pub fn shapes(&self) -> Vec<TensorShape> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (g, name) in layer.gates().iter().zip(GATE_NAMES) {
                out.push(TensorShape {
                    name: format!("layer{l}.{name}.w_h"),
                    rows: g.w_h.rows(),
                    cols: g.w_h.cols(),
                });
                out.push(TensorShape {
                    name: format!("layer{l}.{name}.w_x"),
                    rows: g.w_x.rows(),
                    cols: g.w_x.cols(),
                });
                out.push(TensorShape {
                    name: format!("layer{l}.{name}.bias"),
                    rows: g.bias.len(),
                    cols: 1,
                });
            }
        }
        out.push(TensorShape {
            name: "out.w".into(),
            rows: self.w_out.rows(),
            cols: self.w_out.cols(),
        });
        out.push(TensorShape {
            name: "out.b".into(),
            rows: self.b_out.len(),
            cols: 1,
        });
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, inputs: &[f64], steps: usize) -> Result<()> {
        if inputs.len() != steps * self.input_size {
            return Err(Error::Dimension(format!(
                "{} input values for {steps} steps of width {}",
                inputs.len(),
                self.input_size
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every activation needed by backpropagation.
    pub fn forward_cached(
        &self,
        inputs: &[f64],
        steps: usize,
        dropout: Option<&DropoutMasks>,
    ) -> Result<ForwardCache> {
        self.check_inputs(inputs, steps)?;
        let hs = self.hidden_size;
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let xs: Vec<f64> = if l == 0 {
                inputs.to_vec()
            } else {
                let below = &layers[l - 1].h[hs..];
                match dropout {
                    Some(d) => below.iter().zip(&d.masks[l - 1]).map(|(h, m)| h * m).collect(),
                    None => below.to_vec(),
                }
            };
            let din = layer.input_size;
            let mut cache = LayerCache {
                xs,
                h: vec![0.0; (steps + 1) * hs],
                c: vec![0.0; (steps + 1) * hs],
                acts: vec![0.0; steps * 4 * hs],
                tanh_c: vec![0.0; steps * hs],
            };
            for t in 0..steps {
                let (h_prev, h_next) = cache.h.split_at_mut((t + 1) * hs);
                let (c_prev, c_next) = cache.c.split_at_mut((t + 1) * hs);
                layer.step_into(
                    &cache.xs[t * din..(t + 1) * din],
                    &h_prev[t * hs..],
                    &c_prev[t * hs..],
                    &mut cache.acts[t * 4 * hs..(t + 1) * 4 * hs],
                    &mut c_next[..hs],
                    &mut cache.tanh_c[t * hs..(t + 1) * hs],
                    &mut h_next[..hs],
                );
            }
            layers.push(cache);
        }
        let top = layers.last().expect("at least one layer");
        let o = self.output_size;
        let mut predictions = vec![0.0; steps * o];
        for t in 0..steps {
            let out = &mut predictions[t * o..(t + 1) * o];
            out.copy_from_slice(&self.b_out);
            self.w_out.matvec_acc(&top.h[(t + 1) * hs..(t + 2) * hs], out);
        }
        Ok(ForwardCache {
            steps,
            layers,
            predictions,
        })
    }

    /// Predictions for every timestep (`steps × output_size`), dropout off,
    /// zero initial state.
    pub fn forward(&self, inputs: &[f64], steps: usize) -> Result<Vec<f64>> {
        self.check_inputs(inputs, steps)?;
        let hs = self.hidden_size;
        let mut xs = inputs.to_vec();
        let mut acts = vec![0.0; 4 * hs];
        let mut tanh_c = vec![0.0; hs];
        for layer in &self.layers {
            let din = layer.input_size;
            let mut h = vec![0.0; hs];
            let mut c = vec![0.0; hs];
            let mut h_new = vec![0.0; hs];
            let mut c_new = vec![0.0; hs];
            let mut out = vec![0.0; steps * hs];
            for t in 0..steps {
                layer.step_into(
                    &xs[t * din..(t + 1) * din],
                    &h,
                    &c,
                    &mut acts,
                    &mut c_new,
                    &mut tanh_c,
                    &mut h_new,
                );
                std::mem::swap(&mut h, &mut h_new);
                std::mem::swap(&mut c, &mut c_new);
                out[t * hs..(t + 1) * hs].copy_from_slice(&h);
            }
            xs = out;
        }
        let o = self.output_size;
        let mut predictions = vec![0.0; steps * o];
        for t in 0..steps {
            let p = &mut predictions[t * o..(t + 1) * o];
            p.copy_from_slice(&self.b_out);
            self.w_out.matvec_acc(&xs[t * hs..(t + 1) * hs], p);
        }
        Ok(predictions)
    }

    /// Reverse-mode pass given `d_pred = ∂L/∂ŷ` for every timestep.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        d_pred: &[f64],
        dropout: Option<&DropoutMasks>,
    ) -> LstmParams {
        let steps = cache.steps;
        let hs = self.hidden_size;
        let o = self.output_size;
        let mut grads = self.zeros_like();
        let top = cache.layers.last().expect("at least one layer");

        // Output head.
        let mut dh_above = vec![0.0; steps * hs];
        for t in 0..steps {
            let dy = &d_pred[t * o..(t + 1) * o];
            if dy.iter().all(|v| *v == 0.0) {
                continue;
            }
            let h = &top.h[(t + 1) * hs..(t + 2) * hs];
            grads.w_out.add_outer(dy, h);
            for (b, d) in grads.b_out.iter_mut().zip(dy) {
                *b += d;
            }
            self.w_out.matvec_t_acc(dy, &mut dh_above[t * hs..(t + 1) * hs]);
        }

        let mut d_pre = vec![0.0; 4 * hs];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lc = &cache.layers[l];
            let gl = &mut grads.layers[l];
            let din = layer.input_size;
            let mut dx = if l > 0 { vec![0.0; steps * din] } else { Vec::new() };
            let mut dh_next = vec![0.0; hs];
            let mut dc_next = vec![0.0; hs];
            for t in (0..steps).rev() {
                let acts = &lc.acts[t * 4 * hs..(t + 1) * 4 * hs];
                let tanh_c = &lc.tanh_c[t * hs..(t + 1) * hs];
                let c_prev = &lc.c[t * hs..(t + 1) * hs];
                let h_prev = &lc.h[t * hs..(t + 1) * hs];
                let x = &lc.xs[t * din..(t + 1) * din];
                for j in 0..hs {
                    let cand = acts[j];
                    let f = acts[hs + j];
                    let g = acts[2 * hs + j];
                    let og = acts[3 * hs + j];
                    let dh = dh_above[t * hs + j] + dh_next[j];
                    let tc = tanh_c[j];
                    let dc = dc_next[j] + dh * og * (1.0 - tc * tc);
                    d_pre[3 * hs + j] = dh * tc * og * (1.0 - og);
                    d_pre[hs + j] = dc * c_prev[j] * f * (1.0 - f);
                    d_pre[2 * hs + j] = dc * cand * g * (1.0 - g);
                    d_pre[j] = dc * g * (1.0 - cand * cand);
                    dc_next[j] = dc * f;
                }
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                let gates = layer.gates();
                for (k, gg) in gl.gates_mut().into_iter().enumerate() {
                    let dp = &d_pre[k * hs..(k + 1) * hs];
                    gg.w_h.add_outer(dp, h_prev);
                    gg.w_x.add_outer(dp, x);
                    for (b, d) in gg.bias.iter_mut().zip(dp) {
                        *b += d;
                    }
                    gates[k].w_h.matvec_t_acc(dp, &mut dh_next);
                    if l > 0 {
                        gates[k].w_x.matvec_t_acc(dp, &mut dx[t * din..(t + 1) * din]);
                    }
                }
            }
            if l > 0 {
                dh_above = match dropout {
                    Some(d) => dx.iter().zip(&d.masks[l - 1]).map(|(a, m)| a * m).collect(),
                    None => dx,
                };
            }
        }
        grads
    }

    /// Sum of squared errors over masked timesteps and its gradient.
    /// Returns `(sse, masked count, ∂sse/∂θ)`.
    pub fn sse_gradient(
        &self,
        inputs: &[f64],
        steps: usize,
        targets: &[f64],
        mask: &[bool],
        dropout: Option<&DropoutMasks>,
    ) -> Result<(f64, usize, LstmParams)> {
        let n = steps * self.output_size;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "targets/mask length {}/{} for {n} outputs",
                targets.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Ok((0.0, 0, self.zeros_like()));
        }
        let cache = self.forward_cached(inputs, steps, dropout)?;
        let mut d_pred = vec![0.0; n];
        let mut sse = 0.0;
        let mut count = 0;
        for i in 0..n {
            if mask[i] {
                let e = cache.predictions[i] - targets[i];
                sse += e * e;
                d_pred[i] = 2.0 * e;
                count += 1;
            }
        }
        Ok((sse, count, self.backward_cached(&cache, &d_pred, dropout)))
    }

    /// Gradient of the masked mean squared error of a single sequence.
    pub fn backward(
        &self,
        inputs: &[f64],
        steps: usize,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<LstmParams> {
        let (_, count, mut g) = self.sse_gradient(inputs, steps, targets, mask, None)?;
        if count > 0 {
            g.scale(1.0 / count as f64);
        }
        Ok(g)
    }

    pub fn shape_manifest(&self) -> ShapeManifest {
        ShapeManifest {
            format: "f64-le".into(),
            hidden_size: self.hidden_size,
            input_size: self.input_size,
            output_size: self.output_size,
            num_layers: self.layers.len(),
            tensors: self.shapes(),
        }
    }

    /// Writes `<stem>.bin` (little-endian f64 tensors, manifest order) and
    /// `<stem>.json` (shape manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for t in self.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(stem.with_extension("bin"), bytes)?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_vec_pretty(&self.shape_manifest())?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: ShapeManifest =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        if manifest.format != "f64-le" {
            return Err(Error::Config(format!("unknown tensor format {}", manifest.format)));
        }
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let mut params = Self::zeros(
            manifest.input_size,
            manifest.hidden_size,
            manifest.num_layers,
            manifest.output_size,
        );
        if params.shapes() != manifest.tensors {
            return Err(Error::Dimension("tensor manifest does not match architecture".into()));
        }
        if bytes.len() != params.num_params() * 8 {
            return Err(Error::Dimension(format!(
                "{} bytes for {} parameters",
                bytes.len(),
                params.num_params()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.set_flat(&flat)?;
        Ok(params)
    }
}
