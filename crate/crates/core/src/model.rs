//! Miniature decoder-only transformer.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`), GELU MLP,
//! learned absolute positions and an optional tied LM head. Positional
//! embeddings are *not* part of [`BoundModel::embed`]; they are added over
//! the whole composed sequence so soft-prompt rows take positions `0..p`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::corpus::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tied_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 128,
            tied_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model config: {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "model config: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("tied_head".into(), self.tied_head.to_string()),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::Corrupt(format!("header is missing `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Corrupt(format!("header `{key}` has bad value `{raw}`")))
        }
        let config = ModelConfig {
            vocab_size: get(meta, "vocab_size")?,
            d_model: get(meta, "d_model")?,
            n_layers: get(meta, "n_layers")?,
            n_heads: get(meta, "n_heads")?,
            d_ff: get(meta, "d_ff")?,
            max_seq_len: get(meta, "max_seq_len")?,
            tied_head: get(meta, "tied_head")?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.w_qkv", "attn.b_qkv", "attn.w_out", "attn.b_out", "ln2.gain",
    "ln2.bias", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

impl LayerWeights {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let e = config.d_model;
        let ff = config.d_ff;
        // GPT-2 style: residual projections shrink with depth.
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        LayerWeights {
            ln1_gain: Tensor::full(&[e], 1.0),
            ln1_bias: Tensor::zeros(&[e]),
            w_qkv: Tensor::randn(&[e, 3 * e], INIT_STD, rng),
            b_qkv: Tensor::zeros(&[3 * e]),
            w_out: Tensor::randn(&[e, e], resid_std, rng),
            b_out: Tensor::zeros(&[e]),
            ln2_gain: Tensor::full(&[e], 1.0),
            ln2_bias: Tensor::zeros(&[e]),
            w_fc: Tensor::randn(&[e, ff], INIT_STD, rng),
            b_fc: Tensor::zeros(&[ff]),
            w_proj: Tensor::randn(&[ff, e], resid_std, rng),
            b_proj: Tensor::zeros(&[e]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `[e×V]`; `None` when the head is tied to the token embedding.
    pub lm_head: Option<Tensor>,
}

impl ModelWeights {
    /// Seeded initialization; identical seeds give identical weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.d_model;
        let token_embedding = Tensor::randn(&[config.vocab_size, e], INIT_STD, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq_len, e], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::init(config, &mut rng))
            .collect();
        let lm_head = (!config.tied_head)
            .then(|| Tensor::randn(&[e, config.vocab_size], INIT_STD, &mut rng));
        Ok(ModelWeights {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::full(&[e], 1.0),
            final_bias: Tensor::zeros(&[e]),
            lm_head,
        })
    }

    /// All parameters with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("wte".to_string(), &self.token_embedding),
            ("wpe".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("h.{i}.{field}"), t));
            }
        }
        out.push(("ln_f.gain".into(), &self.final_gain));
        out.push(("ln_f.bias".into(), &self.final_bias));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    /// Same order as [`ModelWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every parameter's name, shape and little-endian bytes.
    pub fn digest(&self) -> String {
        checkpoint::array_digest(&self.named_tensors())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "model".into(),
            meta: self.config.to_meta(),
            arrays: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != "model" {
            return Err(Error::Corrupt(format!(
                "expected a model checkpoint, found kind `{}`",
                ckpt.kind
            )));
        }
        let config = ModelConfig::from_meta(&ckpt.meta_map())?;
        let mut weights = ModelWeights::init(&config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = weights
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected.len() != ckpt.arrays.len() {
            return Err(Error::Corrupt(format!(
                "model checkpoint holds {} arrays, config implies {}",
                ckpt.arrays.len(),
                expected.len()
            )));
        }
        for ((name, shape), slot) in expected.iter().zip(weights.tensors_mut()) {
            let (found, tensor) = ckpt
                .arrays
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Corrupt(format!("missing array `{name}`")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "array `{found}` has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(weights)
    }

    /// Records the weights on `tape`. With `trainable = false` every weight is a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let mut put = |t: &Tensor| -> Result<Var> {
            if trainable {
                let mut owned = t.clone();
                owned.set_requires_grad(true);
                tape.leaf(&owned)
            } else {
                tape.constant(t)
            }
        };
        let mut params = Vec::new();
        let wte = put(&self.token_embedding)?;
        let wpe = put(&self.position_embedding)?;
        params.extend([wte, wpe]);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let vars: Vec<Var> = layer
                .tensors()
                .into_iter()
                .map(&mut put)
                .collect::<Result<_>>()?;
            params.extend(vars.iter().copied());
            layers.push(BoundLayer {
                ln1_gain: vars[0],
                ln1_bias: vars[1],
                w_qkv: vars[2],
                b_qkv: vars[3],
                w_out: vars[4],
                b_out: vars[5],
                ln2_gain: vars[6],
                ln2_bias: vars[7],
                w_fc: vars[8],
                b_fc: vars[9],
                w_proj: vars[10],
                b_proj: vars[11],
            });
        }
        let final_gain = put(&self.final_gain)?;
        let final_bias = put(&self.final_bias)?;
        params.extend([final_gain, final_bias]);
        let head = match &self.lm_head {
            Some(h) => {
                let v = put(h)?;
                params.push(v);
                v
            }
            None => tape.transpose(wte)?,
        };
        Ok(BoundModel {
            config: self.config.clone(),
            wte,
            wpe,
            layers,
            final_gain,
            final_bias,
            head,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    ln1_gain: Var,
    ln1_bias: Var,
    w_qkv: Var,
    b_qkv: Var,
    w_out: Var,
    b_out: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

/// Weights recorded on a tape, ready for forward passes.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    wte: Var,
    wpe: Var,
    layers: Vec<BoundLayer>,
    final_gain: Var,
    final_bias: Var,
    head: Var,
    params: Vec<Var>,
}

impl BoundModel {
    /// Tape handles of the parameters, in [`ModelWeights::tensors_mut`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        tape.embedding(self.wte, tokens)
    }

    /// Adds positions `0..L` to every row of `x`.
    pub fn add_positions(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let len = tape.shape(x)[0];
        if len > self.config.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.config.max_seq_len,
            });
        }
        let pos = tape.slice_rows(self.wpe, 0, len)?;
        tape.add(x, pos)
    }

    /// Logits `[L×V]` for position-embedded input rows `[L×e]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with_dropout(tape, x, None)
    }

    pub(crate) fn forward_with_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let e = self.config.d_model;
        if shape.len() != 2 || shape[1] != e {
            return Err(Error::shape("forward", &shape, &[shape[0], e]));
        }
        let len = shape[0];
        if len > self.config.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.config.max_seq_len,
            });
        }
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = x;
        for layer in &self.layers {
            let normed = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
            let qkv = tape.matmul(normed, layer.w_qkv)?;
            let qkv = tape.add_row_bias(qkv, layer.b_qkv)?;
            let mut head_outputs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = tape.slice_cols(qkv, head * hd, hd)?;
                let k = tape.slice_cols(qkv, e + head * hd, hd)?;
                let v = tape.slice_cols(qkv, 2 * e + head * hd, hd)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale);
                let att = tape.causal_softmax_rows(scores)?;
                head_outputs.push(tape.matmul(att, v)?);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let attn = tape.matmul(merged, layer.w_out)?;
            let attn = tape.add_row_bias(attn, layer.b_out)?;
            let attn = apply_dropout(tape, attn, dropout.as_mut())?;
            h = tape.add(h, attn)?;

            let normed = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
            let fc = tape.matmul(normed, layer.w_fc)?;
            let fc = tape.add_row_bias(fc, layer.b_fc)?;
            let act = tape.gelu(fc);
            let proj = tape.matmul(act, layer.w_proj)?;
            let proj = tape.add_row_bias(proj, layer.b_proj)?;
            let proj = apply_dropout(tape, proj, dropout.as_mut())?;
            h = tape.add(h, proj)?;
        }
        let normed = tape.layer_norm(h, self.final_gain, self.final_bias, LAYER_NORM_EPS)?;
        tape.matmul(normed, self.head)
    }
}

fn apply_dropout(
    tape: &mut Tape,
    x: Var,
    dropout: Option<&mut (f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let Some((rate, rng)) = dropout else {
        return Ok(x);
    };
    if *rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - *rate;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(&Tensor::new(shape, mask)?)?;
    tape.mul(x, mask)
}

/// Token embedding rows for `tokens`, without positions.
pub fn embed(tokens: &[usize], weights: &ModelWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false)?;
    let x = bound.embed(&mut tape, tokens)?;
    Ok(tape.to_tensor(x))
}

/// Logits for input rows that already carry positional embeddings.
pub fn forward(input_embeddings: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false)?;
    let x = tape.constant(input_embeddings)?;
    let logits = bound.forward(&mut tape, x)?;
    Ok(tape.to_tensor(logits))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// The budget ran out before the stop token appeared.
    pub truncated: bool,
}

/// Greedy decoding. `prefix` rows carry no positional embeddings; positions
/// are added over the growing sequence at every step. The stop token, when
/// produced, is the last element of the output.
pub fn generate_greedy(
    prefix: &Tensor,
    weights: &ModelWeights,
    max_new_tokens: usize,
    stop_token: usize,
) -> Result<Generation> {
    let e = weights.config.d_model;
    if prefix.shape().len() != 2 || prefix.cols() != e {
        return Err(Error::shape("generate_greedy", prefix.shape(), &[prefix.rows(), e]));
    }
    let len = prefix.rows();
    if len + max_new_tokens > weights.config.max_seq_len {
        return Err(Error::Length {
            len: len + max_new_tokens,
            max: weights.config.max_seq_len,
        });
    }
    let mut tokens = Vec::new();
    let mut rows = prefix.data().to_vec();
    for _ in 0..max_new_tokens {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false)?;
        let n = rows.len() / e;
        let x = tape.constant(&Tensor::matrix(n, e, rows.clone())?)?;
        let x = bound.add_positions(&mut tape, x)?;
        let logits = bound.forward(&mut tape, x)?;
        let v = weights.config.vocab_size;
        let last = &tape.value(logits)[(n - 1) * v..n * v];
        let next = argmax(last);
        tokens.push(next);
        if next == stop_token {
            return Ok(Generation {
                tokens,
                truncated: false,
            });
        }
        rows.extend_from_slice(weights.token_embedding.row(next));
    }
    Ok(Generation {
        tokens,
        truncated: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Training window length; clipped to `max_seq_len`.
    pub window: usize,
    /// Fraction of the token stream held out for evaluation.
    pub holdout_fraction: f64,
    pub dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            lr: 3e-3,
            seed: 42,
            batch_size: 4,
            window: 128,
            holdout_fraction: 0.1,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub weights: ModelWeights,
    /// Mean training loss of every step.
    pub log: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

/// Next-token loss over non-overlapping windows of `stream`.
pub fn stream_loss(weights: &ModelWeights, stream: &[usize], window: usize) -> Result<f64> {
    let window = window.min(weights.config.max_seq_len);
    if stream.len() < 2 || window == 0 {
        return Err(Error::contract("stream_loss needs at least two tokens"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + window).min(stream.len() - 1);
        let inputs = &stream[start..end];
        let targets = &stream[start + 1..end + 1];
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false)?;
        let x = bound.embed(&mut tape, inputs)?;
        let x = bound.add_positions(&mut tape, x)?;
        let logits = bound.forward(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, targets, &vec![true; targets.len()])?;
        total += tape.scalar(loss) * targets.len() as f64;
        count += targets.len();
        start = end;
    }
    Ok(total / count as f64)
}

/// Trains a fresh model on the concatenated token sequences of `corpus`.
pub fn pretrain_lm(
    corpus: &[Vec<usize>],
    config: &ModelConfig,
    train: &PretrainConfig,
) -> Result<Pretrained> {
    config.validate()?;
    let stream: Vec<usize> = corpus.iter().flatten().copied().collect();
    if stream.len() < 2 {
        return Err(Error::contract("pretraining corpus needs at least two tokens"));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenId {
            id: bad,
            vocab: config.vocab_size,
        });
    }
    let window = train.window.min(config.max_seq_len).max(1);
    let holdout_len = ((stream.len() as f64) * train.holdout_fraction).round() as usize;
    let (train_stream, heldout) = if holdout_len >= 2 && stream.len() - holdout_len > window + 1 {
        stream.split_at(stream.len() - holdout_len)
    } else {
        (&stream[..], &stream[..])
    };
    let mut weights = ModelWeights::init(config, train.seed)?;
    let initial_heldout_loss = stream_loss(&weights, heldout, window)?;
    let mut log = Vec::with_capacity(train.steps);
    if train.steps == 0 {
        return Ok(Pretrained {
            weights,
            log,
            initial_heldout_loss,
            final_heldout_loss: initial_heldout_loss,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(AdamConfig::with_lr(train.lr));
    let w = window.min(train_stream.len() - 1);
    let batch = train.batch_size.max(1);
    for _ in 0..train.steps {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, true)?;
        let mut losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let start = rng.random_range(0..=train_stream.len() - w - 1);
            let inputs = &train_stream[start..start + w];
            let targets = &train_stream[start + 1..start + w + 1];
            let x = bound.embed(&mut tape, inputs)?;
            let x = bound.add_positions(&mut tape, x)?;
            let drop = (train.dropout > 0.0).then_some((train.dropout, &mut rng));
            let logits = bound.forward_with_dropout(&mut tape, x, drop)?;
            losses.push(tape.cross_entropy(logits, targets, &vec![true; w])?);
        }
        let stacked = tape.concat_rows(&losses)?;
        let total = tape.sum(stacked);
        let loss = tape.scale(total, 1.0 / batch as f64);
        log.push(tape.scalar(loss));
        let grads = tape.backward(loss)?;
        let params = bound.params().to_vec();
        let mut tensors = weights.tensors_mut();
        for (var, t) in params.iter().zip(tensors.iter_mut()) {
            t.set_requires_grad(true);
            grads.accumulate_into(*var, t)?;
        }
        adam.step(&mut tensors)?;
        for t in tensors.iter_mut() {
            t.set_requires_grad(false);
        }
    }
    let final_heldout_loss = stream_loss(&weights, heldout, window)?;
    Ok(Pretrained {
        weights,
        log,
        initial_heldout_loss,
        final_heldout_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            tied_head: true,
        }
    }

    #[test]
    fn embed_is_a_table_lookup() {
        let w = ModelWeights::init(&tiny(), 1).unwrap();
        let x = embed(&[3, 3], &w).unwrap();
        assert_eq!(x.row(0), w.token_embedding.row(3));
        assert_eq!(x.row(1), w.token_embedding.row(3));
        assert!(matches!(
            embed(&[0; 7], &w),
            Err(Error::Length { len: 7, max: 6 })
        ));
        assert!(matches!(embed(&[11], &w), Err(Error::TokenId { .. })));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_budget_generates_nothing() {
        let w = ModelWeights::init(&tiny(), 1).unwrap();
        let prefix = embed(&[1, 2], &w).unwrap();
        let g = generate_greedy(&prefix, &w, 0, 0).unwrap();
        assert!(g.tokens.is_empty());
    }

    #[test]
    fn immediate_stop_token_ends_generation() {
        let w = ModelWeights::init(&tiny(), 1).unwrap();
        let prefix = embed(&[1, 2], &w).unwrap();
        let first = generate_greedy(&prefix, &w, 1, usize::MAX).unwrap().tokens[0];
        let g = generate_greedy(&prefix, &w, 4, first).unwrap();
        assert_eq!(g.tokens, vec![first]);
        assert!(!g.truncated);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn untied_head_round_trips_through_checkpoint() {
        let mut c = tiny();
        c.tied_head = false;
        let w = ModelWeights::init(&c, 5).unwrap();
        let back = ModelWeights::from_checkpoint(w.to_checkpoint()).unwrap();
        assert_eq!(w, back);
    }
}
