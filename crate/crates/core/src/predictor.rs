//! LSTM + fully-connected noise predictor.
//!
//! Each of the `m` window steps feeds the features
//! `[ỹⱼ, νⱼ, Q̂_a, Q̂_b, R̂]` (previous estimates repeated on every step) through a
//! single LSTM layer. The final hidden state passes through ReLU, a dense layer
//! and a scaled sigmoid, so each output lies strictly inside `(0, bound)`.
//!
//! All trainable values live in one flat vector so that the optimizer, the
//! gradient checks and the weight file treat them uniformly.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomSource;
use crate::vehicle::LABEL_BOUND;

pub const FEATURES: usize = 5;
pub const OUTPUTS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LR: f64 = 1e-4;
pub const WEIGHTS_FORMAT: &str = "noisecov-weights";
pub const WEIGHTS_VERSION: u32 = 1;
const SIGMOID_FLOOR: f64 = 1e-9;

/// Fixed per-feature multipliers applied before the LSTM. They bring yaw rate,
/// innovations (std ≲ √bound) and variance estimates (≲ bound) to unit order.
pub fn default_feature_scale() -> [f64; FEATURES] {
    let inv_bound = 1.0 / LABEL_BOUND;
    [1.0, inv_bound.sqrt(), inv_bound, inv_bound, inv_bound]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorInput {
    pub measurements: Vec<f64>,
    pub innovations: Vec<f64>,
    pub prev_labels: [f64; 3],
}

impl PredictorInput {
    pub fn new(measurements: Vec<f64>, innovations: Vec<f64>, prev_labels: [f64; 3]) -> Result<Self> {
        if measurements.len() != innovations.len() {
            return Err(Error::dim(format!(
                "{} measurements but {} innovations",
                measurements.len(),
                innovations.len()
            )));
        }
        if measurements.is_empty() {
            return Err(Error::InsufficientData("empty predictor window".into()));
        }
        Ok(PredictorInput {
            measurements,
            innovations,
            prev_labels,
        })
    }

    pub fn window(&self) -> usize {
        self.measurements.len()
    }
}

/// Anything that turns a window of measurements and innovations into `(Q̂_a, Q̂_b, R̂)`.
pub trait LabelPredictor: Sync {
    fn predict(&self, input: &PredictorInput) -> Result<[f64; 3]>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    hidden: usize,
    bound: f64,
    feature_scale: [f64; FEATURES],
    values: Vec<f64>,
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w_ih: Range<usize>,
    pub w_hh: Range<usize>,
    pub bias: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
}

impl Layout {
    pub fn new(hidden: usize) -> Layout {
        let g = 4 * hidden;
        let w_ih = 0..g * FEATURES;
        let w_hh = w_ih.end..w_ih.end + g * hidden;
        let bias = w_hh.end..w_hh.end + g;
        let fc_w = bias.end..bias.end + OUTPUTS * hidden;
        let fc_b = fc_w.end..fc_w.end + OUTPUTS;
        Layout {
            w_ih,
            w_hh,
            bias,
            fc_w,
            fc_b,
        }
    }

    pub fn len(&self) -> usize {
        self.fc_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensors(&self) -> [(&'static str, Range<usize>); 5] {
        [
            ("w_ih", self.w_ih.clone()),
            ("w_hh", self.w_hh.clone()),
            ("bias", self.bias.clone()),
            ("fc_w", self.fc_w.clone()),
            ("fc_b", self.fc_b.clone()),
        ]
    }
}

// Gate blocks inside the 4h pre-activation: input, forget, cell, output.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

impl NetworkParams {
    /// Uniform weights in `±1/√h`, forget-gate bias 1, other biases 0.
    pub fn init(rng: &mut RandomSource, hidden: usize) -> Result<NetworkParams> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be at least 1".into()));
        }
        let layout = Layout::new(hidden);
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut values = vec![0.0; layout.len()];
        for range in [layout.w_ih.clone(), layout.w_hh.clone(), layout.fc_w.clone()] {
            for v in &mut values[range] {
                *v = rng.uniform(-limit, limit);
            }
        }
        for j in 0..hidden {
            values[layout.bias.start + GATE_F * hidden + j] = 1.0;
        }
        Ok(NetworkParams {
            hidden,
            bound: LABEL_BOUND,
            feature_scale: default_feature_scale(),
            values,
        })
    }

    pub fn zeros(hidden: usize) -> NetworkParams {
        NetworkParams {
            hidden,
            bound: LABEL_BOUND,
            feature_scale: default_feature_scale(),
            values: vec![0.0; Layout::new(hidden).len()],
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn feature_scale(&self) -> [f64; FEATURES] {
        self.feature_scale
    }

    pub fn with_feature_scale(mut self, scale: [f64; FEATURES]) -> Self {
        self.feature_scale = scale;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.hidden)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden: usize,
    steps: usize,
    /// Scaled features per step, `steps × FEATURES`.
    xs: Vec<f64>,
    /// Gate activations per step, `steps × 4h` (i, f, g, o).
    gates: Vec<f64>,
    /// Cell state after each step, `steps × h`.
    cells: Vec<f64>,
    /// `tanh(c)` after each step.
    cells_tanh: Vec<f64>,
    /// Hidden state after each step.
    hs: Vec<f64>,
    /// Sigmoid outputs before scaling.
    sig: [f64; OUTPUTS],
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn forward(params: &NetworkParams, input: &PredictorInput) -> Result<([f64; 3], ForwardCache)> {
    let h = params.hidden;
    let g4 = 4 * h;
    let m = input.window();
    if input.innovations.len() != m {
        return Err(Error::dim("window columns differ in length"));
    }
    let layout = params.layout();
    let w = &params.values;
    let w_ih = &w[layout.w_ih.clone()];
    let w_hh = &w[layout.w_hh.clone()];
    let bias = &w[layout.bias.clone()];
    let s = params.feature_scale;

    let mut cache = ForwardCache {
        hidden: h,
        steps: m,
        xs: Vec::with_capacity(m * FEATURES),
        gates: vec![0.0; m * g4],
        cells: vec![0.0; m * h],
        cells_tanh: vec![0.0; m * h],
        hs: vec![0.0; m * h],
        sig: [0.0; OUTPUTS],
    };
    let mut pre = vec![0.0; g4];
    let zeros = vec![0.0; h];

    for t in 0..m {
        let x = [
            input.measurements[t] * s[0],
            input.innovations[t] * s[1],
            input.prev_labels[0] * s[2],
            input.prev_labels[1] * s[3],
            input.prev_labels[2] * s[4],
        ];
        cache.xs.extend_from_slice(&x);
        let h_prev: &[f64] = if t == 0 { &zeros } else { &cache.hs[(t - 1) * h..t * h] };
        for r in 0..g4 {
            let mut acc = bias[r];
            let row_ih = &w_ih[r * FEATURES..(r + 1) * FEATURES];
            for k in 0..FEATURES {
                acc += row_ih[k] * x[k];
            }
            let row_hh = &w_hh[r * h..(r + 1) * h];
            for k in 0..h {
                acc += row_hh[k] * h_prev[k];
            }
            pre[r] = acc;
        }
        let gates = &mut cache.gates[t * g4..(t + 1) * g4];
        for j in 0..h {
            gates[GATE_I * h + j] = sigmoid(pre[GATE_I * h + j]);
            gates[GATE_F * h + j] = sigmoid(pre[GATE_F * h + j]);
            gates[GATE_G * h + j] = pre[GATE_G * h + j].tanh();
            gates[GATE_O * h + j] = sigmoid(pre[GATE_O * h + j]);
        }
        for j in 0..h {
            let c_prev = if t == 0 { 0.0 } else { cache.cells[(t - 1) * h + j] };
            let c = gates[GATE_F * h + j] * c_prev + gates[GATE_I * h + j] * gates[GATE_G * h + j];
            let tc = c.tanh();
            cache.cells[t * h + j] = c;
            cache.cells_tanh[t * h + j] = tc;
            cache.hs[t * h + j] = gates[GATE_O * h + j] * tc;
        }
        if !cache.hs[t * h..(t + 1) * h].iter().all(|v| v.is_finite())
            || !cache.cells[t * h..(t + 1) * h].iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFiniteActivation { step: t });
        }
    }

    let last = &cache.hs[(m - 1) * h..m * h];
    let fc_w = &w[layout.fc_w.clone()];
    let fc_b = &w[layout.fc_b.clone()];
    let mut out = [0.0; OUTPUTS];
    for o in 0..OUTPUTS {
        let mut z = fc_b[o];
        for j in 0..h {
            z += fc_w[o * h + j] * last[j].max(0.0);
        }
        if !z.is_finite() {
            return Err(Error::NonFiniteActivation { step: m });
        }
        let sg = sigmoid(z).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR);
        cache.sig[o] = sg;
        out[o] = params.bound * sg;
    }
    Ok((out, cache))
}

/// Backpropagation through the output head and all LSTM steps.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    output_grad: &[f64; 3],
) -> Result<Vec<f64>> {
    let h = params.hidden;
    if cache.hidden != h || cache.gates.len() != cache.steps * 4 * h {
        return Err(Error::dim("forward cache does not match parameters"));
    }
    let g4 = 4 * h;
    let m = cache.steps;
    let layout = params.layout();
    let w = &params.values;
    let w_hh = &w[layout.w_hh.clone()];
    let fc_w = &w[layout.fc_w.clone()];

    let mut grad = vec![0.0; layout.len()];
    if output_grad.iter().all(|g| *g == 0.0) {
        return Ok(grad);
    }

    let last = &cache.hs[(m - 1) * h..m * h];
    let mut dh = vec![0.0; h];
    for o in 0..OUTPUTS {
        let sg = cache.sig[o];
        let dz = output_grad[o] * params.bound * sg * (1.0 - sg);
        grad[layout.fc_b.start + o] += dz;
        for j in 0..h {
            let a = last[j].max(0.0);
            grad[layout.fc_w.start + o * h + j] += dz * a;
            if last[j] > 0.0 {
                dh[j] += dz * fc_w[o * h + j];
            }
        }
    }

    let mut dc_next = vec![0.0; h];
    let mut dpre = vec![0.0; g4];
    for t in (0..m).rev() {
        let gates = &cache.gates[t * g4..(t + 1) * g4];
        for j in 0..h {
            let i = gates[GATE_I * h + j];
            let f = gates[GATE_F * h + j];
            let g = gates[GATE_G * h + j];
            let o = gates[GATE_O * h + j];
            let tc = cache.cells_tanh[t * h + j];
            let c_prev = if t == 0 { 0.0 } else { cache.cells[(t - 1) * h + j] };

            let d_o = dh[j] * tc;
            let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
            dpre[GATE_O * h + j] = d_o * o * (1.0 - o);
            dpre[GATE_I * h + j] = dc * g * i * (1.0 - i);
            dpre[GATE_G * h + j] = dc * i * (1.0 - g * g);
            dpre[GATE_F * h + j] = dc * c_prev * f * (1.0 - f);
            dc_next[j] = dc * f;
        }
        let x = &cache.xs[t * FEATURES..(t + 1) * FEATURES];
        for r in 0..g4 {
            let d = dpre[r];
            if d == 0.0 {
                continue;
            }
            grad[layout.bias.start + r] += d;
            let gi = layout.w_ih.start + r * FEATURES;
            for k in 0..FEATURES {
                grad[gi + k] += d * x[k];
            }
            if t > 0 {
                let h_prev = &cache.hs[(t - 1) * h..t * h];
                let gh = layout.w_hh.start + r * h;
                for k in 0..h {
                    grad[gh + k] += d * h_prev[k];
                }
            }
        }
        // dh for the previous step flows only through W_hh.
        for v in dh.iter_mut() {
            *v = 0.0;
        }
        if t > 0 {
            for r in 0..g4 {
                let d = dpre[r];
                if d == 0.0 {
                    continue;
                }
                let row = &w_hh[r * h..(r + 1) * h];
                for k in 0..h {
                    dh[k] += d * row[k];
                }
            }
        }
    }
    Ok(grad)
}

impl LabelPredictor for NetworkParams {
    fn predict(&self, input: &PredictorInput) -> Result<[f64; 3]> {
        forward(self, input).map(|(y, _)| y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(values: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if values.len() != grads.len() || values.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam shapes: params {}, grads {}, state {}",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, &g), (m, v)) in values
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WeightsHeader {
    format: String,
    version: u32,
    hidden: usize,
    features: usize,
    outputs: usize,
    bound: f64,
    /// Number of `f64` values in the payload: feature scales, bound, then weights.
    values: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

/// Serialized weights: one JSON header line, then little-endian `f64` payload
/// `[feature_scale × 5, bound, weights…]`.
pub fn to_bytes(params: &NetworkParams, tag: Option<&str>) -> Vec<u8> {
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        hidden: params.hidden,
        features: FEATURES,
        outputs: OUTPUTS,
        bound: params.bound,
        values: FEATURES + 1 + params.values.len(),
        tag: tag.map(str::to_owned),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in params
        .feature_scale
        .iter()
        .chain(std::iter::once(&params.bound))
        .chain(&params.values)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a weight file, returning the parameters and the optional tag.
pub fn from_bytes(bytes: &[u8]) -> Result<(NetworkParams, Option<String>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::IncompatibleWeights("missing header line".into()))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::IncompatibleWeights(format!("bad header: {e}")))?;
    if header.format != WEIGHTS_FORMAT || header.version != WEIGHTS_VERSION {
        return Err(Error::IncompatibleWeights(format!(
            "expected {WEIGHTS_FORMAT} v{WEIGHTS_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    if header.features != FEATURES || header.outputs != OUTPUTS || header.hidden == 0 {
        return Err(Error::IncompatibleWeights(format!(
            "shape {}→{}→{} is not supported",
            header.features, header.hidden, header.outputs
        )));
    }
    let n_weights = Layout::new(header.hidden).len();
    if header.values != FEATURES + 1 + n_weights {
        return Err(Error::IncompatibleWeights(format!(
            "header declares {} values, hidden size {} needs {}",
            header.values,
            header.hidden,
            FEATURES + 1 + n_weights
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.values * 8 {
        return Err(Error::IncompatibleWeights(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.values * 8
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::IncompatibleWeights("non-finite weight".into()));
    }
    let mut feature_scale = [0.0; FEATURES];
    feature_scale.copy_from_slice(&vals[..FEATURES]);
    let bound = vals[FEATURES];
    if !(bound > 0.0) {
        return Err(Error::IncompatibleWeights("output bound must be positive".into()));
    }
    Ok((
        NetworkParams {
            hidden: header.hidden,
            bound,
            feature_scale,
            values: vals[FEATURES + 1..].to_vec(),
        },
        header.tag,
    ))
}

pub fn save(params: &NetworkParams, tag: Option<&str>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params, tag);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(NetworkParams, Option<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
