//! Feedforward place classifier: affine layers with LeakyReLU and inverted
//! dropout on hidden units, a raw-logit output layer, temperature-scaled
//! softmax, hard-label cross-entropy and Adam.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::retention::LiveToken;
use crate::seed::SeedRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    /// Fraction of hidden units zeroed in training mode.
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, num_classes: usize) -> Self {
        ClassifierConfig {
            input_dim,
            hidden_layers,
            num_classes,
            leaky_slope: 0.1,
            dropout_rate: 0.3,
            init_seed: 0,
        }
    }

    pub fn with_seed(&self, init_seed: u64) -> Self {
        ClassifierConfig {
            init_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(RkdError::InvalidConfig(format!(
                "classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(RkdError::InvalidConfig(
                "layer widths must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(RkdError::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(RkdError::InvalidConfig("leaky slope must be finite".into()));
        }
        Ok(())
    }

    /// `(in, out)` widths of every affine layer, input to logits.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden_layers.iter().copied())
            .chain(std::iter::once(self.num_classes))
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine map; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.in_dim, self.out_dim)
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim
            && self.out_dim == other.out_dim
            && self.weights.len() == other.weights.len()
            && self.bias.len() == other.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub config: ClassifierConfig,
    pub layers: Vec<Dense>,
    #[serde(skip)]
    token: LiveToken,
}

/// Parameter-shaped accumulator for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Gradients {
            layers: params.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers
            .iter_mut()
            .flat_map(Dense::values_mut)
            .for_each(|g| *g *= factor);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activations recorded by a forward pass, consumed by [`ClassifierParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each affine layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    /// Dropout multiplier per hidden unit (1 in eval mode).
    masks: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Seeded init: weights uniform in `±1/sqrt(fan_in)`, zero biases.
pub fn init_params(config: &ClassifierConfig) -> Result<ClassifierParams> {
    config.validate()?;
    let mut rng = SeedRng::seed_from_u64(config.init_seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let bound = 1.0 / (i as f64).sqrt();
            let mut layer = Dense::zeros(i, o);
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
            layer
        })
        .collect();
    Ok(ClassifierParams {
        config: config.clone(),
        layers,
        token: LiveToken::default(),
    })
}

impl ClassifierParams {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Builds params from explicit layers, checking them against `config`.
    pub fn from_layers(config: ClassifierConfig, layers: Vec<Dense>) -> Result<Self> {
        let params = ClassifierParams {
            config,
            layers,
            token: LiveToken::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(RkdError::invalid(format!(
                "expected {} layers, found {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (k, ((i, o), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.in_dim != *i
                || layer.out_dim != *o
                || layer.weights.len() != i * o
                || layer.bias.len() != *o
            {
                return Err(RkdError::invalid(format!(
                    "layer {k} does not have shape {o}x{i}"
                )));
            }
        }
        if !self.is_finite() {
            return Err(RkdError::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(Dense::values)
            .all(|v| v.is_finite())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.input_dim {
            return Err(RkdError::invalid(format!(
                "expected {} features, got {}",
                self.config.input_dim,
                features.len()
            )));
        }
        Ok(())
    }

    fn leaky(&self, h: f64) -> f64 {
        if h > 0.0 {
            h
        } else {
            self.config.leaky_slope * h
        }
    }

    /// Forward pass recording what backprop needs. Dropout is active only
    /// when `dropout` carries an RNG.
    pub fn forward_trace(
        &self,
        features: &[f64],
        mut dropout: Option<&mut SeedRng>,
    ) -> Result<ForwardTrace> {
        self.check_input(features)?;
        let n_hidden = self.layers.len() - 1;
        let keep = 1.0 - self.config.dropout_rate;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(n_hidden);
        let mut masks = Vec::with_capacity(n_hidden);
        let mut x = features.to_vec();
        for layer in &self.layers[..n_hidden] {
            let h = layer.apply(&x);
            let mask: Vec<f64> = match dropout.as_deref_mut() {
                Some(rng) if self.config.dropout_rate > 0.0 => h
                    .iter()
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                _ => vec![1.0; h.len()],
            };
            let a = h
                .iter()
                .zip(&mask)
                .map(|(&v, m)| self.leaky(v) * m)
                .collect();
            inputs.push(std::mem::replace(&mut x, a));
            hidden_pre.push(h);
            masks.push(mask);
        }
        let logits = self.layers[n_hidden].apply(&x);
        inputs.push(x);
        Ok(ForwardTrace {
            inputs,
            hidden_pre,
            masks,
            logits,
        })
    }

    /// Raw logits; `training` enables dropout driven by `rng`.
    pub fn forward_logits(
        &self,
        features: &[f64],
        training: bool,
        rng: &mut SeedRng,
    ) -> Result<Vec<f64>> {
        let dropout = if training { Some(rng) } else { None };
        Ok(self.forward_trace(features, dropout)?.logits)
    }

    /// Eval-mode logits.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(features, None)?.logits)
    }

    /// Adds the parameter gradient implied by `dlogits` for one traced sample into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], grads: &mut Gradients) {
        let mut delta = dlogits.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.inputs[k];
            let g = &mut grads.layers[k];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            let pre = &trace.hidden_pre[k - 1];
            let mask = &trace.masks[k - 1];
            for ((p, h), m) in prev.iter_mut().zip(pre).zip(mask) {
                let slope = if *h > 0.0 {
                    1.0
                } else {
                    self.config.leaky_slope
                };
                *p *= slope * m;
            }
            delta = prev;
        }
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            config: &self.config,
            layers: &self.layers,
        };
        serde_json::to_string(&ckpt).map_err(|e| RkdError::invalid(e.to_string()))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| RkdError::invalid(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(RkdError::invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ClassifierParams::from_layers(ckpt.config, ckpt.layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()?).map_err(|e| RkdError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RkdError::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

const CHECKPOINT_FORMAT: &str = "rkd-classifier";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a ClassifierConfig,
    layers: &'a [Dense],
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ClassifierConfig,
    layers: Vec<Dense>,
}

/// `exp(z_i / T) / Σ_j exp(z_j / T)`, evaluated after subtracting the max logit.
pub fn temp_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RkdError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(RkdError::invalid("logits must be non-empty and finite"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy of the T=1 softmax against a one-hot label, and its logit gradient `q - onehot`.
pub fn hard_loss_and_grad(z: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= z.len() {
        return Err(RkdError::invalid(format!(
            "class {true_class} out of range for {} logits",
            z.len()
        )));
    }
    let q = temp_softmax(z, 1.0)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = log_norm - z[true_class];
    let mut grad = q;
    grad[true_class] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(RkdError::InvalidConfig(format!(
                "invalid Adam settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ClassifierParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay, when non-zero, is added to
/// the gradient as an L2 term.
pub fn adam_step(
    params: &mut ClassifierParams,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    let shapes_match = |g: &Gradients| {
        g.layers.len() == params.layers.len()
            && g.layers
                .iter()
                .zip(&params.layers)
                .all(|(a, b)| a.same_shape(b))
    };
    if !shapes_match(grads)
        || !shapes_match(&state.first_moment)
        || !shapes_match(&state.second_moment)
    {
        return Err(RkdError::invalid("gradient shapes do not match parameters"));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let moments = state
        .first_moment
        .layers
        .iter_mut()
        .zip(state.second_moment.layers.iter_mut());
    for ((layer, grad), (m, v)) in params.layers.iter_mut().zip(&grads.layers).zip(moments) {
        let triples = layer
            .values_mut()
            .zip(grad.values())
            .zip(m.values_mut().zip(v.values_mut()));
        for ((p, &g), (m, v)) in triples {
            let g = g + weight_decay * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    debug_assert!(params.is_finite(), "Adam produced non-finite parameters");
    Ok(())
}
