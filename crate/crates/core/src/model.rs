//! The Compact Convolutional Transformer.
//!
//! Pipeline: convolutional tokenizer → positional embedding → pre-norm
//! transformer encoder → attention-based sequence pooling → linear head.
//! Parameters live in a named, ordered [`ModelParams`] map; a forward pass
//! binds them onto a tape as [`BoundParams`].

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Padding, Tape, Var};
use crate::config::{CctConfig, ConfigError};
use crate::error::TensorError;
use crate::nn::{
    add_positional_embedding, feed_forward, multi_head_attention, stochastic_depth, AttentionParams,
    DropState, FeedForwardParams,
};
use crate::tensor::{Element, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of weight and positional-table initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// N(0, σ²) resampled until inside ±2σ.
    TruncatedNormal,
    /// Truncated normal with σ = √(2 / fan_in), fan_in = product of all
    /// but the last axis. Tokenizer convolutions need it: at σ = 0.02 their
    /// output drowns in the positional table and training stalls.
    HeTruncatedNormal,
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Canonical parameter layout for a config, in architecture order.
pub fn param_layout(cfg: &CctConfig) -> Result<Vec<ParamSpec>, ConfigError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });

    let mut in_ch = cfg.input_channels;
    for l in 0..cfg.tokenizer_conv_layers {
        let out_ch = cfg.tokenizer_channels(l);
        let k = cfg.tokenizer_kernel;
        push(format!("tokenizer.conv{l}.weight"), vec![k, k, in_ch, out_ch], Init::HeTruncatedNormal);
        push(format!("tokenizer.conv{l}.bias"), vec![out_ch], Init::Zeros);
        in_ch = out_ch;
    }
    push("pos_embedding".into(), vec![cfg.num_tokens()?, d], Init::Normal);
    for i in 0..cfg.num_encoder_layers {
        let p = format!("blocks.{i}");
        push(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
        push(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.attn.w{m}"), vec![d, d], Init::TruncatedNormal);
            push(format!("{p}.attn.b{m}"), vec![d], Init::Zeros);
        }
        push(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
        push(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
        push(format!("{p}.ffn.w1"), vec![d, cfg.ffn_hidden], Init::TruncatedNormal);
        push(format!("{p}.ffn.b1"), vec![cfg.ffn_hidden], Init::Zeros);
        push(format!("{p}.ffn.w2"), vec![cfg.ffn_hidden, d], Init::TruncatedNormal);
        push(format!("{p}.ffn.b2"), vec![d], Init::Zeros);
    }
    push("norm.gamma".into(), vec![d], Init::Ones);
    push("norm.beta".into(), vec![d], Init::Zeros);
    push("seq_pool.weight".into(), vec![d, 1], Init::TruncatedNormal);
    push("head.weight".into(), vec![d, cfg.num_classes], Init::TruncatedNormal);
    push("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    Ok(specs)
}

/// Named model parameters in architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams { tensors: IndexMap::new() }
    }
}

impl<T: Element> ModelParams<T> {
    /// Fresh parameters for `cfg`, reproducible from `seed`.
    pub fn init(cfg: &CctConfig, seed: u64) -> Result<Self, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let truncated = |rng: &mut ChaCha8Rng, dist: &Normal<f64>, std: f64| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        };
        let mut params = ModelParams::default();
        for spec in param_layout(cfg)? {
            let n: usize = spec.shape.iter().product();
            let values: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal => (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
                Init::TruncatedNormal => (0..n).map(|_| truncated(&mut rng, &normal, INIT_STD)).collect(),
                Init::HeTruncatedNormal => {
                    let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let he = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| truncated(&mut rng, &he, std)).collect()
                }
            };
            params.tensors.insert(spec.name, Tensor::from_parts(spec.shape, values));
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Check that names, order and shapes match the layout of `cfg`.
    pub fn check_layout(&self, cfg: &CctConfig) -> Result<(), LayoutError> {
        let layout = param_layout(cfg).map_err(LayoutError::Config)?;
        if layout.len() != self.len() {
            return Err(LayoutError::Count { expected: layout.len(), found: self.len() });
        }
        for (spec, (name, t)) in layout.iter().zip(self.iter()) {
            if spec.name != name {
                return Err(LayoutError::Name { expected: spec.name.clone(), found: name.to_string() });
            }
            if spec.shape != t.shape() {
                return Err(LayoutError::Shape {
                    name: name.to_string(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Put every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundParams<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayoutError {
    #[error(transparent)]
    Config(ConfigError),
    #[error("expected {expected} parameter tensors, found {found}")]
    Count { expected: usize, found: usize },
    #[error("expected parameter `{expected}`, found `{found}`")]
    Name { expected: String, found: String },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// Parameters recorded on a tape for one forward pass.
pub struct BoundParams<'t, T: Element> {
    vars: IndexMap<String, Var<'t, T>>,
}

/// Bind hand-made variables, e.g. to differentiate a model stage with
/// respect to its parameters.
impl<'t, T: Element, S: Into<String>> FromIterator<(S, Var<'t, T>)> for BoundParams<'t, T> {
    fn from_iter<I: IntoIterator<Item = (S, Var<'t, T>)>>(iter: I) -> Self {
        BoundParams { vars: iter.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }
}

impl<'t, T: Element> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn attention(&self, block: usize, num_heads: usize) -> Result<AttentionParams<'t, T>, TensorError> {
        let g = |m: &str| self.get(&format!("blocks.{block}.attn.{m}"));
        Ok(AttentionParams {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
            num_heads,
        })
    }

    fn ffn(&self, block: usize) -> Result<FeedForwardParams<'t, T>, TensorError> {
        let g = |m: &str| self.get(&format!("blocks.{block}.ffn.{m}"));
        Ok(FeedForwardParams { w1: g("w1")?, b1: g("b1")?, w2: g("w2")?, b2: g("b2")? })
    }

    fn layer_norm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.layer_norm(self.get(&format!("{prefix}.gamma"))?, self.get(&format!("{prefix}.beta"))?, LN_EPS)
    }
}

/// Convolutional tokenizer: `[B, H, W, C]` images to `[B, T, d]` tokens.
pub fn tokenize<'t, T: Element>(
    x: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &CctConfig,
) -> Result<Var<'t, T>, TensorError> {
    let shape = x.shape();
    let expected = [cfg.input_hw, cfg.input_hw, cfg.input_channels];
    if shape.len() != 4 || shape[1..] != expected {
        let mut want = vec![shape.first().copied().unwrap_or(0)];
        want.extend_from_slice(&expected);
        return Err(TensorError::ShapeMismatch { op: "tokenize", left: shape, right: want });
    }
    let batch = shape[0];
    let mut h = x;
    for l in 0..cfg.tokenizer_conv_layers {
        let w = params.get(&format!("tokenizer.conv{l}.weight"))?;
        let b = params.get(&format!("tokenizer.conv{l}.bias"))?;
        h = h
            .conv2d(w, b, 1, Padding::Same)?
            .relu()?
            .maxpool2d(cfg.tokenizer_pool, cfg.tokenizer_pool_stride, Padding::Same)?;
    }
    let s = h.shape();
    h.reshape([batch, s[1] * s[2], s[3]])
}

/// Positional embedding followed by the pre-norm transformer blocks.
pub fn encode<'t, T: Element>(
    tokens: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &CctConfig,
    drop: &mut DropState,
) -> Result<Var<'t, T>, TensorError> {
    let mut x = add_positional_embedding(tokens, params.get("pos_embedding")?)?;
    for i in 0..cfg.num_encoder_layers {
        let rate = cfg.drop_path_rate(i);
        let prefix = format!("blocks.{i}");

        let h = params.layer_norm(&format!("{prefix}.ln1"), x)?;
        let h = multi_head_attention(h, &params.attention(i, cfg.num_heads)?, cfg.attn_dropout, drop)?;
        x = x.add(stochastic_depth(h, rate, drop)?)?;

        let h = params.layer_norm(&format!("{prefix}.ln2"), x)?;
        let h = feed_forward(h, &params.ffn(i)?, cfg.dropout, drop)?;
        x = x.add(stochastic_depth(h, rate, drop)?)?;
    }
    Ok(x)
}

/// Attention-weighted pooling over tokens: `[B, T, d]` to `[B, d]`.
pub fn sequence_pool<'t, T: Element>(
    encoded: Var<'t, T>,
    params: &BoundParams<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    sequence_pool_with_weights(encoded, params).map(|(out, _)| out)
}

/// As [`sequence_pool`], also returning the pooling weights `[B, T]`.
pub fn sequence_pool_with_weights<'t, T: Element>(
    encoded: Var<'t, T>,
    params: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Tensor<T>), TensorError> {
    let shape = encoded.shape();
    if shape.len() != 3 {
        return Err(TensorError::RankTooLow { op: "sequence_pool", rank: shape.len(), min: 3 });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let u = params.layer_norm("norm", encoded)?;
    let weights = u.matmul(params.get("seq_pool.weight")?)?.reshape([b, t])?.softmax(1)?;
    let weights_value = weights.value();
    let pooled = weights.reshape([b, 1, t])?.matmul(u)?.reshape([b, d])?;
    Ok((pooled, weights_value))
}

/// Raw class logits `[B, num_classes]`.
pub fn forward<'t, T: Element>(
    x: Var<'t, T>,
    params: &BoundParams<'t, T>,
    cfg: &CctConfig,
    drop: &mut DropState,
) -> Result<Var<'t, T>, TensorError> {
    let tokens = tokenize(x, params, cfg)?;
    let encoded = encode(tokens, params, cfg, drop)?;
    let pooled = sequence_pool(encoded, params)?;
    pooled.matmul(params.get("head.weight")?)?.add(params.get("head.bias")?)
}

/// Eval-mode logits for a stack of images, computed in chunks of `batch`.
pub fn predict_logits<T: Element>(
    params: &ModelParams<T>,
    cfg: &CctConfig,
    images: &Tensor<T>,
    batch: usize,
) -> Result<Tensor<T>, TensorError> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n * cfg.num_classes);
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.constant(images.slice_leading(start, end)?);
        let logits = forward(x, &bound, cfg, &mut DropState::eval())?;
        out.extend_from_slice(logits.value().data());
        start = end;
    }
    Tensor::new([n, cfg.num_classes], out)
}

/// Row-wise argmax, ties to the lower index.
pub fn argmax_rows<T: Element>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape().last().copied().unwrap_or(1).max(1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
