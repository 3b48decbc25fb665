//! Desk-scale sequence model: a per-frame feed-forward stack with an
//! optional bidirectional vanilla recurrent layer, producing logits for the
//! CTC loss. Parameter gradients are computed by reverse accumulation.
//!
//! Canonical flattening order (used by checkpoints and gradient views):
//! layer-major; within a dense layer the weight matrix row-major, then the
//! bias; within a recurrent layer the forward-direction input weights,
//! hidden weights and bias, then the same three for the backward direction.

use crate::ctc::{ctc_loss_grad, LabelSeq};
use crate::error::{GradLabError, Result};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub type FeatureMatrix = Array2<f64>;
pub type LogitMatrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of pre-activation z and activation a.
    fn backward(&self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the hidden feed-forward layers.
    pub hidden: Vec<usize>,
    /// Width of the optional bidirectional recurrent layer (tanh), inserted
    /// after the feed-forward stack. Its output width is twice this value.
    pub recurrent: Option<usize>,
    pub alphabet_size: usize,
    pub activation: Activation,
    /// Indices of the layers whose gradients participate in matching.
    pub match_layers: Vec<usize>,
}

impl ModelConfig {
    /// Feed-forward stack matching gradients on the last layer only.
    pub fn feed_forward(input_dim: usize, hidden: Vec<usize>, alphabet_size: usize) -> Self {
        let n = hidden.len() + 1;
        Self {
            input_dim,
            hidden,
            recurrent: None,
            alphabet_size,
            activation: Activation::Relu,
            match_layers: vec![n - 1],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + usize::from(self.recurrent.is_some()) + 1
    }

    pub fn output_dim(&self) -> usize {
        self.alphabet_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.alphabet_size == 0 {
            return Err(GradLabError::InvalidConfig("input_dim and alphabet_size must be positive".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) || self.recurrent == Some(0) {
            return Err(GradLabError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.match_layers.is_empty() {
            return Err(GradLabError::InvalidConfig("match_layers must be nonempty".into()));
        }
        if self.match_layers.iter().any(|&i| i >= self.num_layers()) {
            return Err(GradLabError::InvalidConfig("match_layers index out of range".into()));
        }
        Ok(())
    }

    /// (input width, layer kind) for every layer in order.
    fn layer_plan(&self) -> Vec<LayerPlan> {
        let mut plan = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden {
            plan.push(LayerPlan::Dense { input: width, output: h, hidden: true });
            width = h;
        }
        if let Some(r) = self.recurrent {
            plan.push(LayerPlan::BiRnn { input: width, units: r });
            width = 2 * r;
        }
        plan.push(LayerPlan::Dense { input: width, output: self.output_dim(), hidden: false });
        plan
    }
}

#[derive(Clone, Copy, Debug)]
enum LayerPlan {
    Dense { input: usize, output: usize, hidden: bool },
    BiRnn { input: usize, units: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Dense {
        /// output x input
        w: Array2<f64>,
        b: Array1<f64>,
    },
    BiRnn {
        wx_f: Array2<f64>,
        wh_f: Array2<f64>,
        b_f: Array1<f64>,
        wx_b: Array2<f64>,
        wh_b: Array2<f64>,
        b_b: Array1<f64>,
    },
}

impl LayerParams {
    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Dense { w, b } => w.len() + b.len(),
            LayerParams::BiRnn { wx_f, wh_f, b_f, wx_b, wh_b, b_b } => {
                wx_f.len() + wh_f.len() + b_f.len() + wx_b.len() + wh_b.len() + b_b.len()
            }
        }
    }

    fn append_flat(&self, out: &mut Vec<f64>) {
        match self {
            LayerParams::Dense { w, b } => {
                out.extend(w.iter());
                out.extend(b.iter());
            }
            LayerParams::BiRnn { wx_f, wh_f, b_f, wx_b, wh_b, b_b } => {
                for m in [wx_f, wh_f] {
                    out.extend(m.iter());
                }
                out.extend(b_f.iter());
                for m in [wx_b, wh_b] {
                    out.extend(m.iter());
                }
                out.extend(b_b.iter());
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            LayerParams::Dense { w, b } => {
                w.iter_mut().for_each(&mut f);
                b.iter_mut().for_each(&mut f);
            }
            LayerParams::BiRnn { wx_f, wh_f, b_f, wx_b, wh_b, b_b } => {
                wx_f.iter_mut().for_each(&mut f);
                wh_f.iter_mut().for_each(&mut f);
                b_f.iter_mut().for_each(&mut f);
                wx_b.iter_mut().for_each(&mut f);
                wh_b.iter_mut().for_each(&mut f);
                b_b.iter_mut().for_each(&mut f);
            }
        }
    }
}

/// All model parameters; also the representation of a full gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layers: Vec<LayerParams>,
}

impl ParamVector {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    /// Canonical flattening of all layers.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            layer.append_flat(&mut out);
        }
        Array1::from(out)
    }

    /// Inverse of [`flatten`](Self::flatten), shaped by `cfg`.
    pub fn unflatten(cfg: &ModelConfig, flat: ArrayView1<f64>) -> Result<Self> {
        let mut proto = init_model(cfg, 0)?;
        if flat.len() != proto.param_count() {
            return Err(GradLabError::ShapeMismatch {
                expected: format!("{} parameters", proto.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut it = flat.iter();
        for layer in &mut proto.layers {
            layer.for_each_mut(|v| *v = *it.next().expect("length checked"));
        }
        Ok(proto)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in &mut z.layers {
            layer.for_each_mut(|v| *v = 0.0);
        }
        z
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.for_each_mut(|v| *v *= factor);
        }
    }

    /// self += factor * other, layerwise.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err(self, other));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerParams::Dense { w, b: bv }, LayerParams::Dense { w: ow, b: ob })
                    if w.dim() == ow.dim() && bv.len() == ob.len() =>
                {
                    w.scaled_add(factor, ow);
                    bv.scaled_add(factor, ob);
                }
                (
                    LayerParams::BiRnn { wx_f, wh_f, b_f, wx_b, wh_b, b_b },
                    LayerParams::BiRnn {
                        wx_f: o1,
                        wh_f: o2,
                        b_f: o3,
                        wx_b: o4,
                        wh_b: o5,
                        b_b: o6,
                    },
                ) if wx_f.dim() == o1.dim() && wx_b.dim() == o4.dim() => {
                    wx_f.scaled_add(factor, o1);
                    wh_f.scaled_add(factor, o2);
                    b_f.scaled_add(factor, o3);
                    wx_b.scaled_add(factor, o4);
                    wh_b.scaled_add(factor, o5);
                    b_b.scaled_add(factor, o6);
                }
                _ => {
                    return Err(GradLabError::ShapeMismatch {
                        expected: "matching layer structure".into(),
                        got: "mismatched layer".into(),
                    })
                }
            }
        }
        Ok(())
    }
}

fn shape_err(a: &ParamVector, b: &ParamVector) -> GradLabError {
    GradLabError::ShapeMismatch {
        expected: format!("{} layers", a.layers.len()),
        got: format!("{} layers", b.layers.len()),
    }
}

/// Flattened gradient restricted to the configured match_layers, plus the
/// L2 norm of the full gradient.
#[derive(Clone, Debug)]
pub struct GradientView {
    pub flat: Array1<f64>,
    pub full_norm: f64,
}

/// Build the attacker-visible view of a full gradient (or parameter delta).
pub fn gradient_view(grad: &ParamVector, cfg: &ModelConfig) -> GradientView {
    let full_norm = grad.l2_norm();
    let mut selected: Vec<usize> = cfg.match_layers.clone();
    selected.sort_unstable();
    selected.dedup();
    let mut flat = Vec::new();
    for &i in &selected {
        grad.layers[i].append_flat(&mut flat);
    }
    GradientView { flat: Array1::from(flat), full_norm }
}

/// Deterministic initialization: weights drawn N(0, 1/fan_in), biases zero.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamVector> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |rows: usize, cols: usize, fan_in: usize| -> Array2<f64> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
    };
    let mut layers = Vec::new();
    for plan in cfg.layer_plan() {
        match plan {
            LayerPlan::Dense { input, output, .. } => layers.push(LayerParams::Dense {
                w: sample(output, input, input),
                b: Array1::zeros(output),
            }),
            LayerPlan::BiRnn { input, units } => layers.push(LayerParams::BiRnn {
                wx_f: sample(units, input, input),
                wh_f: sample(units, units, units),
                b_f: Array1::zeros(units),
                wx_b: sample(units, input, input),
                wh_b: sample(units, units, units),
                b_b: Array1::zeros(units),
            }),
        }
    }
    Ok(ParamVector { layers })
}

/// Dropout on hidden activations: per-frame i.i.d. masks, inverted scaling.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(GradLabError::InvalidConfig(format!("dropout rate {} not in [0,1)", self.rate)));
        }
        Ok(())
    }

    /// T x width mask with entries 0 or 1/(1-rate), deterministic per
    /// (seed, layer index).
    fn mask(&self, layer: usize, frames: usize, width: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed, layer as u64));
        let keep = 1.0 - self.rate;
        Array2::from_shape_fn((frames, width), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Derive an independent stream seed from a base seed and an index.
pub fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15)).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct LayerCache {
    input: Array2<f64>,
    /// Pre-activation (dense) or stacked hidden states (recurrent).
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
    /// Recurrent only: forward/backward hidden states before concatenation.
    rnn_states: Option<(Array2<f64>, Array2<f64>)>,
}

fn forward_cached(
    params: &ParamVector,
    cfg: &ModelConfig,
    x: &FeatureMatrix,
    dropout: Option<&DropoutSpec>,
) -> Result<(LogitMatrix, Vec<LayerCache>)> {
    cfg.validate()?;
    if let Some(d) = dropout {
        d.validate()?;
    }
    if x.ncols() != cfg.input_dim {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("T x {}", cfg.input_dim),
            got: format!("{} x {}", x.nrows(), x.ncols()),
        });
    }
    let plan = cfg.layer_plan();
    if params.layers.len() != plan.len() {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("{} layers", plan.len()),
            got: format!("{}", params.layers.len()),
        });
    }
    let frames = x.nrows();
    let mut caches = Vec::with_capacity(plan.len());
    let mut current = x.clone();
    for (idx, (layer, plan)) in params.layers.iter().zip(&plan).enumerate() {
        match (layer, plan) {
            (LayerParams::Dense { w, b }, LayerPlan::Dense { hidden, .. }) => {
                let pre = current.dot(&w.t()) + b;
                let (act, mask) = if *hidden {
                    let mut act = pre.mapv(|z| cfg.activation.apply(z));
                    let mask = dropout
                        .filter(|d| d.rate > 0.0)
                        .map(|d| d.mask(idx, frames, act.ncols()));
                    if let Some(m) = &mask {
                        act *= m;
                    }
                    (act, mask)
                } else {
                    (pre.clone(), None)
                };
                caches.push(LayerCache { input: current, pre, mask, rnn_states: None });
                current = act;
            }
            (LayerParams::BiRnn { wx_f, wh_f, b_f, wx_b, wh_b, b_b }, LayerPlan::BiRnn { units, .. }) => {
                let r = *units;
                let mut h_f = Array2::zeros((frames, r));
                let mut prev = Array1::zeros(r);
                for t in 0..frames {
                    let z = wx_f.dot(&current.row(t)) + wh_f.dot(&prev) + b_f;
                    let h = z.mapv(f64::tanh);
                    h_f.row_mut(t).assign(&h);
                    prev = h;
                }
                let mut h_b = Array2::zeros((frames, r));
                let mut next = Array1::zeros(r);
                for t in (0..frames).rev() {
                    let z = wx_b.dot(&current.row(t)) + wh_b.dot(&next) + b_b;
                    let h = z.mapv(f64::tanh);
                    h_b.row_mut(t).assign(&h);
                    next = h;
                }
                let mut concat = Array2::zeros((frames, 2 * r));
                for t in 0..frames {
                    concat.row_mut(t).slice_mut(ndarray::s![..r]).assign(&h_f.row(t));
                    concat.row_mut(t).slice_mut(ndarray::s![r..]).assign(&h_b.row(t));
                }
                let mask = dropout
                    .filter(|d| d.rate > 0.0)
                    .map(|d| d.mask(idx, frames, 2 * r));
                let mut out = concat.clone();
                if let Some(m) = &mask {
                    out *= m;
                }
                caches.push(LayerCache {
                    input: current,
                    pre: concat,
                    mask,
                    rnn_states: Some((h_f, h_b)),
                });
                current = out;
            }
            _ => unreachable!("params built from the same plan"),
        }
    }
    Ok((current, caches))
}

/// Forward pass to logits. With a `DropoutSpec` present, masks are drawn
/// i.i.d. per frame and hidden unit from its seed.
pub fn forward(
    params: &ParamVector,
    cfg: &ModelConfig,
    x: &FeatureMatrix,
    dropout: Option<&DropoutSpec>,
) -> Result<LogitMatrix> {
    forward_cached(params, cfg, x, dropout).map(|(logits, _)| logits)
}

/// CTC loss and the full parameter gradient by reverse accumulation.
pub fn loss_and_full_grad(
    params: &ParamVector,
    cfg: &ModelConfig,
    x: &FeatureMatrix,
    y: &LabelSeq,
    dropout: Option<&DropoutSpec>,
) -> Result<(f64, ParamVector)> {
    let (logits, caches) = forward_cached(params, cfg, x, dropout)?;
    let ctc = ctc_loss_grad(&logits, y, cfg.alphabet_size)?;
    let mut grad = params.zeros_like();
    let mut delta = ctc.grad_logits; // T x output
    let plan = cfg.layer_plan();
    for idx in (0..params.layers.len()).rev() {
        let cache = &caches[idx];
        match (&params.layers[idx], &mut grad.layers[idx], &plan[idx]) {
            (
                LayerParams::Dense { w, .. },
                LayerParams::Dense { w: gw, b: gb },
                LayerPlan::Dense { hidden, .. },
            ) => {
                let mut d = delta;
                if *hidden {
                    if let Some(m) = &cache.mask {
                        d *= m;
                    }
                    // activation derivative on the pre-dropout activation
                    let act_pre_dropout = cache.pre.mapv(|z| cfg.activation.apply(z));
                    for ((dv, &z), &a) in d.iter_mut().zip(cache.pre.iter()).zip(act_pre_dropout.iter()) {
                        *dv *= cfg.activation.backward(z, a);
                    }
                }
                *gw += &d.t().dot(&cache.input);
                *gb += &d.sum_axis(Axis(0));
                delta = d.dot(w);
            }
            (
                LayerParams::BiRnn { wx_f, wh_f, wx_b, wh_b, .. },
                LayerParams::BiRnn {
                    wx_f: gwx_f,
                    wh_f: gwh_f,
                    b_f: gb_f,
                    wx_b: gwx_b,
                    wh_b: gwh_b,
                    b_b: gb_b,
                },
                LayerPlan::BiRnn { units, .. },
            ) => {
                let r = *units;
                let frames = cache.input.nrows();
                let mut d = delta;
                if let Some(m) = &cache.mask {
                    d *= m;
                }
                let (h_f, h_b) = cache.rnn_states.as_ref().expect("recurrent cache");
                let mut delta_x = Array2::zeros(cache.input.dim());
                // forward direction: backprop through time from the end
                let mut carry = Array1::<f64>::zeros(r);
                for t in (0..frames).rev() {
                    let e = &d.row(t).slice(ndarray::s![..r]).to_owned() + &carry;
                    let g = &e * &h_f.row(t).mapv(|h| 1.0 - h * h);
                    for i in 0..r {
                        for j in 0..cache.input.ncols() {
                            gwx_f[[i, j]] += g[i] * cache.input[[t, j]];
                        }
                        gb_f[i] += g[i];
                        if t > 0 {
                            for j in 0..r {
                                gwh_f[[i, j]] += g[i] * h_f[[t - 1, j]];
                            }
                        }
                    }
                    delta_x.row_mut(t).scaled_add(1.0, &wx_f.t().dot(&g));
                    carry = wh_f.t().dot(&g);
                }
                // backward direction: time-reversed recurrence
                let mut carry = Array1::<f64>::zeros(r);
                for t in 0..frames {
                    let e = &d.row(t).slice(ndarray::s![r..]).to_owned() + &carry;
                    let g = &e * &h_b.row(t).mapv(|h| 1.0 - h * h);
                    for i in 0..r {
                        for j in 0..cache.input.ncols() {
                            gwx_b[[i, j]] += g[i] * cache.input[[t, j]];
                        }
                        gb_b[i] += g[i];
                        if t + 1 < frames {
                            for j in 0..r {
                                gwh_b[[i, j]] += g[i] * h_b[[t + 1, j]];
                            }
                        }
                    }
                    delta_x.row_mut(t).scaled_add(1.0, &wx_b.t().dot(&g));
                    carry = wh_b.t().dot(&g);
                }
                delta = delta_x;
            }
            _ => unreachable!("params built from the same plan"),
        }
    }
    Ok((ctc.loss, grad))
}

/// CTC loss and the attacker-visible gradient view.
pub fn loss_and_grad(
    params: &ParamVector,
    cfg: &ModelConfig,
    x: &FeatureMatrix,
    y: &LabelSeq,
    dropout: Option<&DropoutSpec>,
) -> Result<(f64, GradientView)> {
    let (loss, grad) = loss_and_full_grad(params, cfg, x, y, dropout)?;
    Ok((loss, gradient_view(&grad, cfg)))
}

/// theta <- theta - lr * grad.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut next = params.clone();
    next.axpy(-lr, grad)?;
    Ok(next)
}

/// Versioned model checkpoint; also used for embedder encoders.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamVector,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &std::path::Path, cfg: &ModelConfig, params: &ParamVector) -> Result<()> {
    let ckpt = Checkpoint { version: CHECKPOINT_VERSION, config: cfg.clone(), params: params.clone() };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelConfig, ParamVector)> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(GradLabError::InvalidConfig(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    Ok((ckpt.config, ckpt.params))
}
