//! Feedforward ReLU classifier whose hidden layers accept unit masks.
//!
//! With no mask the full network runs (inference). With a mask, each masked
//! hidden layer's post-activation is multiplied by its mask slice, which
//! yields the sub-network of that mask. Logits are never masked.

use std::cell::Cell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskPlan, MaskScheme};
use crate::numeric::{cross_entropy, softmax_cross_entropy, uniform_block, Matrix, RngKey, Vector};

const TAG_INIT: u64 = 0x696e_6974;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`backward`] invocations made on the current thread.
pub fn backward_calls() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[d_in, h_1, ..., h_L, n_classes]`.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// One flag per hidden layer. Empty means every hidden layer is masked.
    #[serde(default)]
    pub masked_layers: Vec<bool>,
    /// A shared logit bias is trained by every instance, so enabling it
    /// lets each instance leak into its own flipped sub-network.
    #[serde(default)]
    pub output_bias: bool,
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f64,
}

fn default_keep_prob() -> f64 {
    0.5
}

impl ModelConfig {
    pub fn mlp(layer_widths: Vec<usize>) -> Self {
        let hidden = layer_widths.len().saturating_sub(2);
        Self {
            layer_widths,
            activation: Activation::Relu,
            masked_layers: vec![true; hidden],
            output_bias: false,
            keep_prob: 0.5,
        }
    }

    pub fn n_hidden(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated config has layers")
    }

    pub fn is_masked(&self, hidden: usize) -> bool {
        self.masked_layers.get(hidden).copied().unwrap_or(self.masked_layers.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if *self.layer_widths.last().unwrap() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !self.masked_layers.is_empty() && self.masked_layers.len() != self.n_hidden() {
            return Err(Error::Config(format!(
                "{} masked-layer flags for {} hidden layers",
                self.masked_layers.len(),
                self.n_hidden()
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::Config(format!("keep_prob {} not in (0, 1)", self.keep_prob)));
        }
        Ok(())
    }

    /// Widths of the masked hidden layers, in order.
    pub fn mask_widths(&self) -> Vec<usize> {
        (0..self.n_hidden())
            .filter(|&h| self.is_masked(h))
            .map(|h| self.layer_widths[h + 1])
            .collect()
    }

    pub fn mask_plan(&self, global_seed: u64, scheme: MaskScheme) -> MaskPlan {
        MaskPlan {
            global_seed,
            keep_prob: self.keep_prob,
            layer_widths: self.mask_widths(),
            scheme,
        }
    }

    /// For each hidden layer, its index into `Mask::per_layer` if masked.
    pub(crate) fn mask_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        (0..self.n_hidden())
            .map(|h| {
                self.is_masked(h).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        let n = self.layer_widths.len() - 1;
        (0..n)
            .map(|l| {
                let w = self.layer_widths[l] * self.layer_widths[l + 1];
                let has_bias = l + 1 < n || self.output_bias;
                w + if has_bias { self.layer_widths[l + 1] } else { 0 }
            })
            .sum()
    }
}

/// Weights `weights[l]` map layer `l` (cols) to layer `l + 1` (rows).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vector>>,
    pub init_seed: u64,
}

/// Gradients shaped like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vector>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: params.biases.iter().map(|b| b.as_ref().map(|b| vec![0.0; b.len()])).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if let (Some(a), Some(b)) = (a, b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|x| *x *= f);
        }
        for b in self.biases.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x *= f);
        }
    }

    /// All entries in a fixed order: weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out
    }
}

impl ModelParams {
    pub fn flatten(&self) -> Vec<f64> {
        Gradients {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
        .flatten()
    }

    /// Mutable references in [`Gradients::flatten`] order.
    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.extend(w.data_mut().iter_mut());
            if let Some(b) = b {
                out.extend(b.iter_mut());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let n = config.layer_widths.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Dimension {
                what: "parameter layers".into(),
                expected: n,
                got: self.weights.len(),
            });
        }
        for l in 0..n {
            let want = (config.layer_widths[l + 1], config.layer_widths[l]);
            if self.weights[l].shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "parameter check",
                    left_rows: self.weights[l].rows(),
                    left_cols: self.weights[l].cols(),
                    right_rows: want.0,
                    right_cols: want.1,
                });
            }
            let want_bias = l + 1 < n || config.output_bias;
            match (&self.biases[l], want_bias) {
                (Some(b), true) if b.len() == want.0 => {}
                (None, false) => {}
                _ => return Err(Error::Config(format!("bias of layer {l} does not match config"))),
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let n = config.layer_widths.len() - 1;
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for l in 0..n {
        let (fan_in, fan_out) = (config.layer_widths[l], config.layer_widths[l + 1]);
        // zero readout: untrained logits are exactly uniform
        let bound = if l + 1 < n { (6.0 / fan_in as f64).sqrt() } else { 0.0 };
        let key = RngKey::tagged(seed, TAG_INIT, l as u64, 0);
        let data = uniform_block(key, 0, fan_in * fan_out)
            .into_iter()
            .map(|u| (2.0 * u - 1.0) * bound)
            .collect();
        weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        biases.push((l + 1 < n || config.output_bias).then(|| vec![0.0; fan_out]));
    }
    Ok(ModelParams {
        weights,
        biases,
        init_seed: seed,
    })
}

/// Activations recorded by [`forward`], enough to replay its backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vector,
    /// Pre-activation of every layer (the last entry holds the logits).
    pub pre: Vec<Vector>,
    /// Post-activation (after ReLU and mask) of every hidden layer.
    pub post: Vec<Vector>,
    /// Mask slice applied to each hidden layer, if any.
    pub masks: Vec<Option<Vector>>,
}

fn check_mask(config: &ModelConfig, mask: Option<&Mask>) -> Result<()> {
    if let Some(m) = mask {
        let widths = config.mask_widths();
        if m.n_layers() != widths.len() {
            return Err(Error::MaskMismatch(format!(
                "mask has {} layers, model masks {}",
                m.n_layers(),
                widths.len()
            )));
        }
        for (i, (layer, w)) in m.per_layer.iter().zip(widths).enumerate() {
            if layer.len() != w {
                return Err(Error::MaskMismatch(format!("mask layer {i} has width {}, expected {w}", layer.len())));
            }
        }
    }
    Ok(())
}

fn affine(w: &Matrix, b: Option<&Vector>, x: &[f64]) -> Result<Vector> {
    let mut z = w.matvec(x)?;
    if let Some(b) = b {
        z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
    }
    Ok(z)
}

fn activate(z: &[f64], mask: Option<&[f64]>) -> Vector {
    match mask {
        None => z.iter().map(|&v| v.max(0.0)).collect(),
        Some(m) => z.iter().zip(m).map(|(&v, &m)| v.max(0.0) * m).collect(),
    }
}

pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    x: &[f64],
    mask: Option<&Mask>,
) -> Result<(Vector, ForwardCache)> {
    if x.len() != config.input_dim() {
        return Err(Error::Dimension {
            what: "input features".into(),
            expected: config.input_dim(),
            got: x.len(),
        });
    }
    check_mask(config, mask)?;
    let slots = config.mask_slots();
    let n = params.weights.len();
    let mut cache = ForwardCache {
        input: x.to_vec(),
        pre: Vec::with_capacity(n),
        post: Vec::with_capacity(n - 1),
        masks: Vec::with_capacity(n - 1),
    };
    for l in 0..n {
        let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let z = affine(&params.weights[l], params.biases[l].as_ref(), input)?;
        if l + 1 < n {
            let slice = match (mask, slots[l]) {
                (Some(m), Some(s)) => Some(m.layer(s).to_vec()),
                _ => None,
            };
            let h = activate(&z, slice.as_deref());
            cache.post.push(h);
            cache.masks.push(slice);
        }
        cache.pre.push(z);
    }
    let logits = cache.pre[n - 1].clone();
    Ok((logits, cache))
}

/// Logits only, same arithmetic as [`forward`] without recording a cache.
pub fn logits(params: &ModelParams, config: &ModelConfig, x: &[f64], mask: Option<&Mask>) -> Result<Vector> {
    if x.len() != config.input_dim() {
        return Err(Error::Dimension {
            what: "input features".into(),
            expected: config.input_dim(),
            got: x.len(),
        });
    }
    check_mask(config, mask)?;
    let slots = config.mask_slots();
    let n = params.weights.len();
    let mut h = x.to_vec();
    for l in 0..n {
        let z = affine(&params.weights[l], params.biases[l].as_ref(), &h)?;
        if l + 1 == n {
            return Ok(z);
        }
        let slice = match (mask, slots[l]) {
            (Some(m), Some(s)) => Some(m.layer(s)),
            _ => None,
        };
        h = activate(&z, slice);
    }
    unreachable!("network has at least one layer")
}

/// Cross-entropy of the (optionally masked) network on one instance.
pub fn loss_on(params: &ModelParams, config: &ModelConfig, z: &Instance, mask: Option<&Mask>) -> Result<f64> {
    cross_entropy(&logits(params, config, &z.features, mask)?, z.label)
}

/// Exact gradients of the loss of the forward pass recorded in `cache`.
///
/// Units with a zero mask entry pass no gradient, so every weight into or
/// out of them, and their biases, get exactly zero.
pub fn backward(cache: &ForwardCache, params: &ModelParams, config: &ModelConfig, label: usize) -> Result<Gradients> {
    BACKWARD_CALLS.with(|c| c.set(c.get() + 1));
    let n = params.weights.len();
    if cache.pre.len() != n || cache.post.len() + 1 != n {
        return Err(Error::Dimension {
            what: "forward cache layers".into(),
            expected: n,
            got: cache.pre.len(),
        });
    }
    if cache.input.len() != config.input_dim() {
        return Err(Error::Dimension {
            what: "cached input".into(),
            expected: config.input_dim(),
            got: cache.input.len(),
        });
    }
    let (_, mut delta) = softmax_cross_entropy(&cache.pre[n - 1], label)?;
    let mut grads = Gradients::zeros_like(params);
    for l in (0..n).rev() {
        let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        if params.weights[l].shape() != (delta.len(), input.len()) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left_rows: params.weights[l].rows(),
                left_cols: params.weights[l].cols(),
                right_rows: delta.len(),
                right_cols: input.len(),
            });
        }
        let gw = &mut grads.weights[l];
        for (r, &d) in delta.iter().enumerate() {
            for (g, &a) in gw.row_mut(r).iter_mut().zip(input) {
                *g = d * a;
            }
        }
        if let Some(gb) = grads.biases[l].as_mut() {
            gb.copy_from_slice(&delta);
        }
        if l > 0 {
            let upstream = params.weights[l].matvec_transposed(&delta)?;
            let pre = &cache.pre[l - 1];
            let mask = cache.masks[l - 1].as_deref();
            delta = upstream
                .iter()
                .enumerate()
                .map(|(j, &g)| {
                    let m = mask.map_or(1.0, |m| m[j]);
                    if m == 0.0 || pre[j] <= 0.0 {
                        0.0
                    } else {
                        g * m
                    }
                })
                .collect();
        }
    }
    Ok(grads)
}

/// Forward plus backward on a single instance.
pub fn instance_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    z: &Instance,
    mask: Option<&Mask>,
) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward(params, config, &z.features, mask)?;
    let loss = cross_entropy(&logits, z.label)?;
    Ok((loss, backward(&cache, params, config, z.label)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Option<Vec<f64>>,
}

/// On-disk model: config, init seed, parameters as nested lists, and the
/// mask plan the model was trained with (absent for plain training).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub init_seed: u64,
    #[serde(default)]
    pub mask_plan: Option<MaskPlan>,
    layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams, mask_plan: Option<&MaskPlan>) -> Self {
        Self {
            config: config.clone(),
            init_seed: params.init_seed,
            mask_plan: mask_plan.cloned(),
            layers: params
                .weights
                .iter()
                .zip(&params.biases)
                .map(|(w, b)| LayerRecord {
                    weights: w.to_rows(),
                    bias: b.clone(),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &self.layers {
            weights.push(Matrix::from_rows(&layer.weights)?);
            biases.push(layer.bias.clone());
        }
        let params = ModelParams {
            weights,
            biases,
            init_seed: self.init_seed,
        };
        self.config.validate()?;
        params.check_shapes(&self.config)?;
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
