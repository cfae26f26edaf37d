use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BnCache, ConvDims};
use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// 1x1 convolution on a residual skip path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Projection {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

/// One entry of a declarative layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    Relu,
    MaxPool1d {
        width: usize,
        stride: usize,
    },
    GlobalAvgPool,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    /// Saves the current activation for the matching [`LayerSpec::ResidualEnd`].
    ResidualStart,
    /// Adds the saved activation (projected if needed) to the current one.
    ResidualEnd {
        projection: Option<Projection>,
    },
    GradientReversal {
        lambda: f64,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerSpec::FullyConnected { inputs, outputs }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool1d { .. } => "max_pool1d",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::ResidualStart => "residual_start",
            LayerSpec::ResidualEnd { .. } => "residual_end",
            LayerSpec::GradientReversal { .. } => "gradient_reversal",
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    Seq { channels: usize, len: usize },
    Flat(usize),
}

impl Act {
    pub fn size(&self) -> usize {
        match *self {
            Act::Seq { channels, len } => channels * len,
            Act::Flat(n) => n,
        }
    }
}

impl fmt::Display for Act {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Act::Seq { channels, len } => write!(f, "[{channels} x {len}]"),
            Act::Flat(n) => write!(f, "[{n}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Running statistics are state, not learnable parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }
}

/// A named parameter or state tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<F>,
    pub frozen: bool,
}

impl<F: Float> Param<F> {
    pub fn trainable(&self) -> bool {
        !self.frozen && !self.role.is_buffer()
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a, F> {
    /// Batch moments; running statistics are updated by [`Sequential::forward`].
    Train,
    /// Running statistics.
    Infer,
    /// Moments recorded by an earlier train-mode pass, treated as constants.
    Reference(&'a BatchStats<F>),
}

/// Batch moments of every batch-norm layer of one pass (`None` for other
/// layers and for frozen batch norms).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats<F> {
    pub layers: Vec<Option<(Vec<F>, Vec<F>)>>,
}

#[derive(Debug, Clone)]
enum Cache<F> {
    None,
    Conv { x: Vec<F> },
    Bn(BnCache<F>),
    Relu { out: Vec<F> },
    Pool { argmax: Vec<usize>, in_len: usize },
    Fc { x: Vec<F> },
    ResEnd { skip_x: Option<Vec<F>> },
}

/// Everything one forward pass recorded for its backward pass.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    batch: usize,
    caches: Vec<Cache<F>>,
    stats: BatchStats<F>,
}

impl<F> Tape<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn stats(&self) -> &BatchStats<F> {
        &self.stats
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    spec: LayerSpec,
    params: Range<usize>,
    input: Act,
    output: Act,
}

/// A validated layer stack with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<F> {
    input: Act,
    layers: Vec<Layer>,
    params: Vec<Param<F>>,
    /// Per layer: batch-norm running statistics are usable.
    bn_ready: Vec<bool>,
}

fn shape_err(name: &str, spec: &LayerSpec, input: Act, why: &str) -> Error {
    Error::Shape(format!("layer {name} ({}) on input {input}: {why}", spec.kind()))
}

/// Output shape of each layer, or the first inconsistency.
pub fn infer_shapes(input: Act, layers: &[(String, LayerSpec)]) -> Result<Vec<Act>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut saved: Vec<Act> = Vec::new();
    let mut cur = input;
    for (name, spec) in layers {
        let err = |why: &str| shape_err(name, spec, cur, why);
        cur = match (spec, cur) {
            (
                &LayerSpec::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                Act::Seq { channels, len },
            ) => {
                if in_ch != channels || out_ch == 0 {
                    return Err(err(&format!("expects {in_ch} input channels")));
                }
                let len = ops::conv_out_len(len, kernel, stride, padding)
                    .ok_or_else(|| err("kernel longer than padded input or zero stride"))?;
                Act::Seq { channels: out_ch, len }
            }
            (&LayerSpec::BatchNorm { channels, epsilon, momentum }, Act::Seq { channels: c, .. }) => {
                if channels != c {
                    return Err(err(&format!("expects {channels} channels")));
                }
                if !(epsilon > 0.0) || !(0.0..=1.0).contains(&momentum) {
                    return Err(err("epsilon must be positive and momentum in [0, 1]"));
                }
                cur
            }
            (LayerSpec::Relu, _) | (LayerSpec::GradientReversal { .. }, _) => cur,
            (&LayerSpec::MaxPool1d { width, stride }, Act::Seq { channels, len }) => {
                let len = ops::conv_out_len(len, width, stride, 0).ok_or_else(|| err("window longer than input"))?;
                Act::Seq { channels, len }
            }
            (LayerSpec::GlobalAvgPool, Act::Seq { channels, .. }) => Act::Flat(channels),
            (&LayerSpec::FullyConnected { inputs, outputs }, Act::Flat(n)) => {
                if inputs != n || outputs == 0 {
                    return Err(err(&format!("expects {inputs} features")));
                }
                Act::Flat(outputs)
            }
            (LayerSpec::ResidualStart, _) => {
                saved.push(cur);
                cur
            }
            (LayerSpec::ResidualEnd { projection }, _) => {
                let skip = saved.pop().ok_or_else(|| err("no open residual block"))?;
                let projected = match (projection, skip) {
                    (None, s) => s,
                    (Some(p), Act::Seq { channels, len }) => {
                        if p.in_ch != channels {
                            return Err(err("projection input channels differ from the block input"));
                        }
                        let len = ops::conv_out_len(len, 1, p.stride, 0).ok_or_else(|| err("zero projection stride"))?;
                        Act::Seq { channels: p.out_ch, len }
                    }
                    (Some(_), Act::Flat(_)) => return Err(err("projection needs a sequence input")),
                };
                if projected != cur {
                    return Err(err(&format!("skip path {projected} does not match main path")));
                }
                cur
            }
            _ => return Err(err("incompatible input rank")),
        };
        shapes.push(cur);
    }
    if !saved.is_empty() {
        return Err(Error::Shape(format!("{} residual block(s) never closed", saved.len())));
    }
    Ok(shapes)
}

fn param_specs(spec: &LayerSpec) -> Vec<(ParamRole, Vec<usize>, Option<&'static str>)> {
    match *spec {
        LayerSpec::Conv1d {
            in_ch, out_ch, kernel, ..
        } => vec![
            (ParamRole::Weight, vec![out_ch, in_ch, kernel], None),
            (ParamRole::Bias, vec![out_ch], None),
        ],
        LayerSpec::BatchNorm { channels, .. } => vec![
            (ParamRole::Gamma, vec![channels], None),
            (ParamRole::Beta, vec![channels], None),
            (ParamRole::RunningMean, vec![channels], None),
            (ParamRole::RunningVar, vec![channels], None),
        ],
        LayerSpec::FullyConnected { inputs, outputs } => vec![
            (ParamRole::Weight, vec![outputs, inputs], None),
            (ParamRole::Bias, vec![outputs], None),
        ],
        LayerSpec::ResidualEnd { projection: Some(p) } => vec![
            (ParamRole::Weight, vec![p.out_ch, p.in_ch, 1], Some("proj")),
            (ParamRole::Bias, vec![p.out_ch], Some("proj")),
        ],
        _ => Vec::new(),
    }
}

fn fan_in(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Conv1d { in_ch, kernel, .. } => in_ch * kernel,
        LayerSpec::FullyConnected { inputs, .. } => inputs,
        LayerSpec::ResidualEnd { projection: Some(p) } => p.in_ch,
        _ => 1,
    }
}

impl<F: Float> Sequential<F> {
    /// Validates the stack and allocates parameters: zero weights and biases,
    /// unit gamma and running variance, zero beta and running mean. Call
    /// [`Sequential::init_he_uniform`] for a trainable start.
    pub fn new(input: Act, layers: Vec<(String, LayerSpec)>) -> Result<Self> {
        let shapes = infer_shapes(input, &layers)?;
        let mut names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Shape(format!("duplicate layer name {}", w[0])));
        }
        let mut params = Vec::new();
        let mut built = Vec::with_capacity(layers.len());
        let mut prev = input;
        for ((name, spec), out) in layers.into_iter().zip(shapes) {
            let start = params.len();
            for (role, shape, infix) in param_specs(&spec) {
                let mut tensor = Tensor::zeros(shape);
                if matches!(role, ParamRole::Gamma | ParamRole::RunningVar) {
                    tensor.values_mut().iter_mut().for_each(|v| *v = F::one());
                }
                let pname = match infix {
                    Some(i) => format!("{name}.{i}.{}", role.suffix()),
                    None => format!("{name}.{}", role.suffix()),
                };
                params.push(Param {
                    name: pname,
                    role,
                    tensor,
                    frozen: false,
                });
            }
            built.push(Layer {
                name,
                spec,
                params: start..params.len(),
                input: prev,
                output: out,
            });
            prev = out;
        }
        let n = built.len();
        Ok(Self {
            input,
            layers: built,
            params,
            bn_ready: vec![false; n],
        })
    }

    /// He-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
    pub fn init_he_uniform(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &self.layers {
            let bound = (6.0 / fan_in(&layer.spec) as f64).sqrt();
            for p in &mut self.params[layer.params.clone()] {
                if p.role == ParamRole::Weight {
                    for v in p.tensor.values_mut() {
                        *v = F::of(rng.random_range(-bound..bound));
                    }
                }
            }
        }
    }

    pub fn input_shape(&self) -> Act {
        self.input
    }

    pub fn output_shape(&self) -> Act {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        self.layers.iter().map(|l| (l.name.clone(), l.spec.clone())).collect()
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    /// Learnable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| !p.role.is_buffer()).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_grl_lambda(&mut self, lambda: f64) {
        for l in &mut self.layers {
            if let LayerSpec::GradientReversal { lambda: lam } = &mut l.spec {
                *lam = lambda;
            }
        }
    }

    /// Marks every batch-norm layer's running statistics as usable (e.g.
    /// after loading them from disk).
    pub fn mark_stats_ready(&mut self) {
        self.bn_ready.iter_mut().for_each(|r| *r = true);
    }

    pub fn stats_ready(&self) -> bool {
        self.layers
            .iter()
            .zip(&self.bn_ready)
            .all(|(l, &r)| r || !matches!(l.spec, LayerSpec::BatchNorm { .. }))
    }

    /// Batch norms with frozen running statistics normalize with them even
    /// in train mode.
    fn bn_frozen(&self, layer: &Layer) -> bool {
        let s = layer.params.start;
        self.params[s + 2].frozen || self.params[s + 3].frozen
    }

    /// Forward pass; in [`Mode::Train`] the running statistics of unfrozen
    /// batch norms are updated afterwards.
    pub fn forward(&mut self, x: Vec<F>, batch: usize, mode: Mode<'_, F>) -> Result<(Vec<F>, Tape<F>)> {
        let (out, tape) = self.forward_pass(x, batch, mode, true)?;
        if matches!(mode, Mode::Train) {
            self.update_running(&tape.stats);
        }
        Ok((out, tape))
    }

    /// Forward pass that leaves the network untouched and records nothing.
    pub fn forward_infer(&self, x: Vec<F>, batch: usize) -> Result<Vec<F>> {
        Ok(self.forward_pass(x, batch, Mode::Infer, false)?.0)
    }

    /// Forward pass that records a tape but never touches running statistics.
    pub fn forward_pass(&self, mut x: Vec<F>, batch: usize, mode: Mode<'_, F>, record: bool) -> Result<(Vec<F>, Tape<F>)> {
        if x.len() != batch * self.input.size() {
            return Err(Error::Shape(format!(
                "input holds {} values, expected {batch} x {}",
                x.len(),
                self.input
            )));
        }
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut stats = BatchStats {
            layers: vec![None; self.layers.len()],
        };
        let mut saved: Vec<Vec<F>> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let p = &self.params[layer.params.clone()];
            let (y, cache) = match (&layer.spec, layer.input) {
                (
                    &LayerSpec::Conv1d {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                    },
                    Act::Seq { len, .. },
                ) => {
                    let d = ConvDims {
                        batch,
                        in_ch,
                        out_ch,
                        len,
                        kernel,
                        stride,
                        padding,
                    };
                    let y = ops::conv1d_forward(&x, p[0].tensor.values(), p[1].tensor.values(), d)?;
                    (y, Cache::Conv { x })
                }
                (&LayerSpec::BatchNorm { channels, epsilon, .. }, Act::Seq { len, .. }) => {
                    let eps = F::of(epsilon);
                    let dims = (batch, channels, len);
                    let running = || (p[2].tensor.values().to_vec(), p[3].tensor.values().to_vec());
                    let use_running = self.bn_frozen(layer) || matches!(mode, Mode::Infer);
                    let (mean, var, batch_moments) = if use_running {
                        if !self.bn_ready[li] {
                            return Err(Error::Numeric(format!(
                                "batch norm {} has no running statistics yet",
                                layer.name
                            )));
                        }
                        let (m, v) = running();
                        (m, v, false)
                    } else if let Mode::Reference(r) = mode {
                        let (m, v) = r.layers.get(li).and_then(|s| s.clone()).ok_or_else(|| {
                            Error::Shape(format!("reference statistics missing for {}", layer.name))
                        })?;
                        (m, v, false)
                    } else {
                        if batch * len < 1 {
                            return Err(Error::Shape("batch norm over an empty batch".into()));
                        }
                        let (m, v) = ops::channel_moments(&x, batch, channels, len);
                        stats.layers[li] = Some((m.clone(), v.clone()));
                        (m, v, true)
                    };
                    let (y, c) = ops::batchnorm_apply(
                        &x,
                        p[0].tensor.values(),
                        p[1].tensor.values(),
                        &mean,
                        &var,
                        eps,
                        dims,
                        batch_moments,
                    );
                    (y, Cache::Bn(c))
                }
                (LayerSpec::Relu, _) => {
                    let y = ops::relu(&x);
                    let c = if record { Cache::Relu { out: y.clone() } } else { Cache::None };
                    (y, c)
                }
                (&LayerSpec::MaxPool1d { width, stride }, Act::Seq { channels, len }) => {
                    let (y, argmax) = ops::maxpool1d(&x, batch * channels, len, width, stride);
                    (y, Cache::Pool { argmax, in_len: x.len() })
                }
                (LayerSpec::GlobalAvgPool, Act::Seq { channels, len }) => {
                    (ops::global_avg_pool(&x, batch * channels, len), Cache::None)
                }
                (&LayerSpec::FullyConnected { inputs, outputs }, _) => {
                    let y = ops::fc_forward(&x, p[0].tensor.values(), p[1].tensor.values(), batch, inputs, outputs)?;
                    (y, Cache::Fc { x })
                }
                (LayerSpec::ResidualStart, _) => {
                    saved.push(x.clone());
                    (x, Cache::None)
                }
                (LayerSpec::ResidualEnd { projection }, _) => {
                    let skip = saved.pop().expect("validated residual nesting");
                    match projection {
                        None => {
                            let mut y = x;
                            y.iter_mut().zip(&skip).for_each(|(a, &b)| *a += b);
                            (y, Cache::ResEnd { skip_x: None })
                        }
                        Some(pr) => {
                            let skip_len = skip.len() / (batch * pr.in_ch);
                            let d = ConvDims {
                                batch,
                                in_ch: pr.in_ch,
                                out_ch: pr.out_ch,
                                len: skip_len,
                                kernel: 1,
                                stride: pr.stride,
                                padding: 0,
                            };
                            let proj = ops::conv1d_forward(&skip, p[0].tensor.values(), p[1].tensor.values(), d)?;
                            let mut y = x;
                            y.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);
                            (y, Cache::ResEnd { skip_x: Some(skip) })
                        }
                    }
                }
                (LayerSpec::GradientReversal { .. }, _) => (ops::grl_forward(&x), Cache::None),
                _ => unreachable!("shapes validated at build time"),
            };
            if record {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, Tape { batch, caches, stats }))
    }

    fn update_running(&mut self, stats: &BatchStats<F>) {
        for (li, layer) in self.layers.iter().enumerate() {
            if let (LayerSpec::BatchNorm { momentum, .. }, Some((m, v))) = (&layer.spec, &stats.layers[li]) {
                let mom = F::of(*momentum);
                let keep = F::one() - mom;
                let first = layer.params.start;
                for (r, &b) in self.params[first + 2].tensor.values_mut().iter_mut().zip(m) {
                    *r = keep * *r + mom * b;
                }
                for (r, &b) in self.params[first + 3].tensor.values_mut().iter_mut().zip(v) {
                    *r = keep * *r + mom * b;
                }
                self.bn_ready[li] = true;
            }
        }
    }

    pub fn has_trainable(&self) -> bool {
        self.params.iter().any(Param::trainable)
    }

    /// Names of the parameters owned by layers matching `pred`.
    pub fn param_names_where(&self, pred: impl Fn(&LayerSpec) -> bool) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| pred(&l.spec))
            .flat_map(|l| self.params[l.params.clone()].iter().map(|p| p.name.clone()))
            .collect()
    }

    /// Index of the first layer that owns a trainable parameter.
    fn first_trainable_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| self.params[l.params.clone()].iter().any(Param::trainable))
    }

    /// Back-propagates `grad_out` through the recorded pass, accumulating
    /// into the gradients of trainable parameters. Returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(&mut self, tape: &Tape<F>, grad_out: Vec<F>, need_input_grad: bool) -> Result<Option<Vec<F>>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Shape("tape was not recorded by this network".into()));
        }
        let batch = tape.batch;
        if grad_out.len() != batch * self.output_shape().size() {
            return Err(Error::Shape(format!(
                "output gradient holds {} values, expected {batch} x {}",
                grad_out.len(),
                self.output_shape()
            )));
        }
        let stop = if need_input_grad {
            0
        } else {
            match self.first_trainable_layer() {
                Some(i) => i,
                None => return Ok(None),
            }
        };
        let mut g = grad_out;
        let mut skip_grads: Vec<Vec<F>> = Vec::new();
        for li in (stop..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let need_x = need_input_grad || li > stop;
            let range = layer.params.clone();
            let train = |p: &Param<F>| p.trainable();
            let next = match (&layer.spec, &tape.caches[li], layer.input) {
                (
                    &LayerSpec::Conv1d {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                    },
                    Cache::Conv { x },
                    Act::Seq { len, .. },
                ) => {
                    let d = ConvDims {
                        batch,
                        in_ch,
                        out_ch,
                        len,
                        kernel,
                        stride,
                        padding,
                    };
                    let params = &mut self.params[range];
                    let grads = ops::conv1d_backward(x, params[0].tensor.values(), &g, d, need_x)?;
                    accumulate(&mut params[0], &grads.w, train);
                    accumulate(&mut params[1], &grads.bias, train);
                    grads.x
                }
                (&LayerSpec::BatchNorm { channels, .. }, Cache::Bn(c), Act::Seq { len, .. }) => {
                    let params = &mut self.params[range];
                    let (gx, gg, gb) = ops::batchnorm_backward(&g, params[0].tensor.values(), c, (batch, channels, len), need_x);
                    accumulate(&mut params[0], &gg, train);
                    accumulate(&mut params[1], &gb, train);
                    gx
                }
                (LayerSpec::Relu, Cache::Relu { out }, _) => Some(ops::relu_backward(out, &g)),
                (LayerSpec::MaxPool1d { .. }, Cache::Pool { argmax, in_len }, _) => {
                    Some(ops::maxpool1d_backward(argmax, &g, *in_len))
                }
                (LayerSpec::GlobalAvgPool, _, Act::Seq { len, .. }) => Some(ops::global_avg_pool_backward(&g, len)),
                (&LayerSpec::FullyConnected { inputs, outputs }, Cache::Fc { x }, _) => {
                    let params = &mut self.params[range];
                    let (gx, gw, gb) = ops::fc_backward(x, params[0].tensor.values(), &g, batch, inputs, outputs, need_x);
                    accumulate(&mut params[0], &gw, train);
                    accumulate(&mut params[1], &gb, train);
                    gx
                }
                (LayerSpec::ResidualEnd { projection }, Cache::ResEnd { skip_x }, _) => {
                    let skip_g = match (projection, skip_x) {
                        (Some(pr), Some(sx)) => {
                            let d = ConvDims {
                                batch,
                                in_ch: pr.in_ch,
                                out_ch: pr.out_ch,
                                len: sx.len() / (batch * pr.in_ch),
                                kernel: 1,
                                stride: pr.stride,
                                padding: 0,
                            };
                            let params = &mut self.params[range];
                            let grads = ops::conv1d_backward(sx, params[0].tensor.values(), &g, d, true)?;
                            accumulate(&mut params[0], &grads.w, train);
                            accumulate(&mut params[1], &grads.bias, train);
                            grads.x.expect("requested")
                        }
                        _ => g.clone(),
                    };
                    skip_grads.push(skip_g);
                    Some(g)
                }
                (LayerSpec::ResidualStart, _, _) => {
                    let mut total = g;
                    if let Some(sg) = skip_grads.pop() {
                        total.iter_mut().zip(&sg).for_each(|(a, &b)| *a += b);
                    }
                    Some(total)
                }
                (&LayerSpec::GradientReversal { lambda }, _, _) => Some(ops::grl_backward(&g, F::of(lambda))),
                _ => return Err(Error::Shape(format!("tape entry does not match layer {}", layer.name))),
            };
            match next {
                Some(v) => g = v,
                None => return Ok(None),
            }
        }
        if stop > 0 {
            return Ok(None);
        }
        Ok(need_input_grad.then_some(g))
    }
}

fn accumulate<F: Float>(p: &mut Param<F>, g: &[F], keep: impl Fn(&Param<F>) -> bool) {
    if keep(p) {
        p.tensor.grad_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
}
