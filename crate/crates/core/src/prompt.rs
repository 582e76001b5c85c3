//! Soft prompts: a trainable `p×e` matrix prefixed to the embedded input of
//! a frozen model, optimized by backpropagation through that model.
//!
//! The base model is only ever borrowed immutably here. [`tune`] also
//! records the weight digest before and after, and fails if it changed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::corpus::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lstm::{lstm_bidirectional, BiLstm, BoundCell, LstmCell};
use crate::model::{generate_greedy, BoundModel, Generation, ModelWeights};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Standard deviation of directly initialized prompt entries.
pub const DIRECT_INIT_STD: f64 = 0.02;
const PROJECTION_INIT_STD: f64 = 0.02;
pub const DEFAULT_PROMPT_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Direct,
    LstmReparam,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Direct => "direct",
            InitMode::LstmReparam => "lstm",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(InitMode::Direct),
            "lstm" | "lstm-reparam" | "lstmreparam" => Ok(InitMode::LstmReparam),
            other => Err(Error::contract(format!(
                "unknown init mode `{other}` (expected direct or lstm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptParams {
    /// The prompt matrix is itself the parameter.
    Direct { prompt: Tensor },
    /// `P_e = BiLSTM(seed) · W + b`; every tensor here is trainable.
    LstmReparam {
        seed: Tensor,
        lstm: BiLstm,
        proj_w: Tensor,
        proj_b: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    len: usize,
    width: usize,
    params: PromptParams,
}

/// Prompt recorded on a tape: the `p×e` matrix and the parameter leaves.
#[derive(Debug, Clone)]
pub struct BoundPrompt {
    pub matrix: Var,
    pub params: Vec<Var>,
}

/// `init_prompt`: seeded soft prompt of `len` rows and width `width`.
pub fn init_prompt(mode: InitMode, len: usize, width: usize, seed: u64) -> Result<SoftPrompt> {
    if len == 0 || width == 0 {
        return Err(Error::contract(format!(
            "prompt dimensions must be positive, got p={len}, e={width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match mode {
        InitMode::Direct => PromptParams::Direct {
            prompt: Tensor::randn(&[len, width], DIRECT_INIT_STD, &mut rng),
        },
        InitMode::LstmReparam => PromptParams::LstmReparam {
            seed: Tensor::randn(&[len, width], 1.0, &mut rng),
            lstm: BiLstm::random(width, width, &mut rng),
            proj_w: Tensor::randn(&[2 * width, width], PROJECTION_INIT_STD, &mut rng),
            proj_b: Tensor::zeros(&[width]),
        },
    };
    Ok(SoftPrompt { len, width, params })
}

impl SoftPrompt {
    pub fn from_params(params: PromptParams) -> Result<Self> {
        let (len, width) = match &params {
            PromptParams::Direct { prompt } => {
                if prompt.shape().len() != 2 {
                    return Err(Error::contract("direct prompt must be a matrix"));
                }
                (prompt.rows(), prompt.cols())
            }
            PromptParams::LstmReparam {
                seed,
                lstm,
                proj_w,
                proj_b,
            } => {
                let (p, e) = (seed.rows(), seed.cols());
                let h = lstm.hidden();
                let ok = seed.shape().len() == 2
                    && lstm.forward.input() == e
                    && lstm.backward.input() == e
                    && lstm.backward.hidden() == h
                    && proj_w.shape() == [2 * h, e]
                    && proj_b.shape() == [e];
                if !ok {
                    return Err(Error::contract("inconsistent LSTM reparametrization shapes"));
                }
                (p, e)
            }
        };
        Ok(SoftPrompt { len, width, params })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> InitMode {
        match self.params {
            PromptParams::Direct { .. } => InitMode::Direct,
            PromptParams::LstmReparam { .. } => InitMode::LstmReparam,
        }
    }

    pub fn params(&self) -> &PromptParams {
        &self.params
    }

    /// Trainable tensors, in the order [`SoftPrompt::bind`] returns their vars.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match &self.params {
            PromptParams::Direct { prompt } => vec![prompt],
            PromptParams::LstmReparam {
                seed,
                lstm,
                proj_w,
                proj_b,
            } => {
                let mut v = vec![seed];
                v.extend(lstm.forward.tensors());
                v.extend(lstm.backward.tensors());
                v.push(proj_w);
                v.push(proj_b);
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.params {
            PromptParams::Direct { prompt } => vec![prompt],
            PromptParams::LstmReparam {
                seed,
                lstm,
                proj_w,
                proj_b,
            } => {
                let mut v = vec![seed];
                v.extend(lstm.forward.tensors_mut());
                v.extend(lstm.backward.tensors_mut());
                v.push(proj_w);
                v.push(proj_b);
                v
            }
        }
    }

    /// Records every prompt parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPrompt> {
        let mut leaf = |t: &Tensor| -> Result<Var> {
            let mut owned = t.clone();
            owned.set_requires_grad(true);
            tape.leaf(&owned)
        };
        match &self.params {
            PromptParams::Direct { prompt } => {
                let v = leaf(prompt)?;
                Ok(BoundPrompt {
                    matrix: v,
                    params: vec![v],
                })
            }
            PromptParams::LstmReparam {
                seed,
                lstm,
                proj_w,
                proj_b,
            } => {
                let seed_v = leaf(seed)?;
                let fw = bind_cell(&mut leaf, &lstm.forward)?;
                let bw = bind_cell(&mut leaf, &lstm.backward)?;
                let w = leaf(proj_w)?;
                let b = leaf(proj_b)?;
                let hidden = lstm_bidirectional(tape, seed_v, &fw, &bw)?;
                let projected = tape.matmul(hidden, w)?;
                let matrix = tape.add_row_bias(projected, b)?;
                let mut params = vec![seed_v];
                params.extend(fw.vars());
                params.extend(bw.vars());
                params.extend([w, b]);
                Ok(BoundPrompt { matrix, params })
            }
        }
    }

    /// The current `p×e` prompt matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        match &self.params {
            PromptParams::Direct { prompt } => {
                let mut t = prompt.clone();
                t.set_requires_grad(false);
                Ok(t)
            }
            PromptParams::LstmReparam { .. } => {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape)?;
                Ok(tape.to_tensor(bound.matrix))
            }
        }
    }

    /// Drops the reparametrization and keeps only the produced matrix.
    pub fn collapse(&self) -> Result<SoftPrompt> {
        Ok(SoftPrompt {
            len: self.len,
            width: self.width,
            params: PromptParams::Direct {
                prompt: self.matrix()?,
            },
        })
    }

    pub fn to_checkpoint(&self, task: Option<&str>) -> Checkpoint {
        let mut meta = vec![
            ("p".to_string(), self.len.to_string()),
            ("e".to_string(), self.width.to_string()),
            ("mode".to_string(), self.mode().as_str().to_string()),
        ];
        if let Some(task) = task {
            meta.push(("task".to_string(), task.to_string()));
        }
        let names = self.param_names();
        Checkpoint {
            kind: "prompt".into(),
            meta,
            arrays: names
                .into_iter()
                .zip(self.tensors())
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    (n, t)
                })
                .collect(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self.mode() {
            InitMode::Direct => vec!["prompt".into()],
            InitMode::LstmReparam => {
                let mut v = vec!["seed".to_string()];
                for dir in ["fw", "bw"] {
                    for f in ["w_ih", "w_hh", "bias"] {
                        v.push(format!("lstm.{dir}.{f}"));
                    }
                }
                v.push("proj.w".into());
                v.push("proj.b".into());
                v
            }
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<SoftPrompt> {
        if ckpt.kind != "prompt" {
            return Err(Error::Corrupt(format!(
                "expected a prompt checkpoint, found kind `{}`",
                ckpt.kind
            )));
        }
        let mode: InitMode = ckpt
            .meta_value("mode")
            .ok_or_else(|| Error::Corrupt("prompt header is missing `mode`".into()))?
            .parse()
            .map_err(|_| Error::Corrupt("prompt header has a bad `mode`".into()))?;
        let arr = |name: &str| -> Result<Tensor> {
            ckpt.array(name)
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("prompt checkpoint lacks `{name}`")))
        };
        let params = match mode {
            InitMode::Direct => PromptParams::Direct {
                prompt: arr("prompt")?,
            },
            InitMode::LstmReparam => {
                let cell = |dir: &str| -> Result<LstmCell> {
                    Ok(LstmCell {
                        w_ih: arr(&format!("lstm.{dir}.w_ih"))?,
                        w_hh: arr(&format!("lstm.{dir}.w_hh"))?,
                        bias: arr(&format!("lstm.{dir}.bias"))?,
                    })
                };
                PromptParams::LstmReparam {
                    seed: arr("seed")?,
                    lstm: BiLstm {
                        forward: cell("fw")?,
                        backward: cell("bw")?,
                    },
                    proj_w: arr("proj.w")?,
                    proj_b: arr("proj.b")?,
                }
            }
        };
        let prompt = SoftPrompt::from_params(params).map_err(|e| Error::Corrupt(e.to_string()))?;
        let expect = |key: &str, value: usize| -> Result<()> {
            match ckpt.meta_value(key) {
                Some(v) if v == value.to_string() => Ok(()),
                other => Err(Error::Corrupt(format!(
                    "prompt header `{key}`={other:?} disagrees with arrays ({value})"
                ))),
            }
        };
        expect("p", prompt.len)?;
        expect("e", prompt.width)?;
        Ok(prompt)
    }
}

fn bind_cell(leaf: &mut impl FnMut(&Tensor) -> Result<Var>, cell: &LstmCell) -> Result<BoundCell> {
    Ok(BoundCell::new(
        leaf(&cell.w_ih)?,
        leaf(&cell.w_hh)?,
        leaf(&cell.bias)?,
        cell.hidden(),
    ))
}

/// `[P_e ; X_e]`: prompt rows first, then the embedded input rows.
pub fn compose(prompt: &SoftPrompt, input: &Tensor) -> Result<Tensor> {
    let matrix = prompt.matrix()?;
    if input.shape().len() != 2 || input.cols() != matrix.cols() {
        return Err(Error::shape("compose", matrix.shape(), input.shape()));
    }
    let mut data = matrix.data().to_vec();
    data.extend_from_slice(input.data());
    Tensor::matrix(matrix.rows() + input.rows(), matrix.cols(), data)
}

/// One tokenized text-to-text sample. `target` already ends with the stop token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub id: String,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Token layout of one training sequence `[P_e ; input ; target[..m-1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    /// Tokens embedded after the prompt rows.
    pub fed: Vec<usize>,
    /// Next-token target for every position of the composed sequence.
    pub targets: Vec<usize>,
    /// True only where the next token is a target token.
    pub mask: Vec<bool>,
}

impl TrainingSequence {
    pub fn new(prompt_len: usize, sample: &TokenizedSample) -> Result<Self> {
        if sample.input.is_empty() || sample.target.is_empty() {
            return Err(Error::Sample {
                sample: sample.id.clone(),
                reason: "input and target must both be non-empty".into(),
            });
        }
        let n = sample.input.len();
        let m = sample.target.len();
        let mut fed = sample.input.clone();
        fed.extend_from_slice(&sample.target[..m - 1]);
        let total = prompt_len + fed.len();
        let mut targets = vec![0; total];
        let mut mask = vec![false; total];
        let mut next: Vec<usize> = sample.input.clone();
        next.extend_from_slice(&sample.target);
        // Position p-1+i predicts next[i].
        for (i, &tok) in next.iter().enumerate() {
            let pos = prompt_len + i - 1;
            if pos < total {
                targets[pos] = tok;
                mask[pos] = i >= n;
            }
        }
        debug_assert_eq!(mask.iter().filter(|&&b| b).count(), m);
        Ok(TrainingSequence { fed, targets, mask })
    }

    pub fn target_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Composed logits and loss for one sample on an existing tape.
pub fn sequence_loss(
    tape: &mut Tape,
    model: &BoundModel,
    prompt: Var,
    seq: &TrainingSequence,
) -> Result<Var> {
    let x = model.embed(tape, &seq.fed)?;
    let composed = tape.concat_rows(&[prompt, x])?;
    let composed = model.add_positions(tape, composed)?;
    let logits = model.forward(tape, composed)?;
    tape.cross_entropy(logits, &seq.targets, &seq.mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningConfig {
    pub prompt_len: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Samples whose target (with stop token) is longer are rejected.
    pub max_target_len: Option<usize>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            prompt_len: DEFAULT_PROMPT_LEN,
            lr: 3e-3,
            steps: 300,
            batch_size: 4,
            seed: 42,
            init_mode: InitMode::Direct,
            max_target_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub prompt: SoftPrompt,
    /// Token-weighted mini-batch loss at every step, before the update.
    pub log: Vec<f64>,
    pub digest_before: String,
    pub digest_after: String,
}

fn check_sample(
    model: &ModelWeights,
    prompt_len: usize,
    max_target_len: Option<usize>,
    s: &TokenizedSample,
) -> Result<()> {
    let total = prompt_len + s.input.len() + s.target.len();
    if total > model.config.max_seq_len {
        return Err(Error::Sample {
            sample: s.id.clone(),
            reason: format!(
                "prompt {prompt_len} + input {} + target {} exceeds max_seq_len {}",
                s.input.len(),
                s.target.len(),
                model.config.max_seq_len
            ),
        });
    }
    if let Some(limit) = max_target_len {
        if s.target.len() > limit {
            return Err(Error::Sample {
                sample: s.id.clone(),
                reason: format!("target length {} exceeds {limit}", s.target.len()),
            });
        }
    }
    if let Some(&bad) = s
        .input
        .iter()
        .chain(&s.target)
        .find(|&&t| t >= model.config.vocab_size)
    {
        return Err(Error::Sample {
            sample: s.id.clone(),
            reason: format!("token id {bad} is outside the model vocabulary"),
        });
    }
    Ok(())
}

/// Token-weighted mean target loss of `prompt` over `dataset`.
pub fn dataset_loss(
    model: &ModelWeights,
    prompt: &SoftPrompt,
    dataset: &[TokenizedSample],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("dataset_loss over an empty dataset"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for s in dataset {
        check_sample(model, prompt.len(), None, s)?;
        let seq = TrainingSequence::new(prompt.len(), s)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        let p = tape.constant(&prompt.matrix()?)?;
        let loss = sequence_loss(&mut tape, &bound, p, &seq)?;
        total += tape.scalar(loss) * seq.target_count() as f64;
        count += seq.target_count();
    }
    Ok(total / count as f64)
}

/// Optimizes only the prompt parameters; the model is read-only.
pub fn tune(
    model: &ModelWeights,
    prompt: SoftPrompt,
    dataset: &[TokenizedSample],
    config: &TuningConfig,
) -> Result<TuneOutcome> {
    if dataset.is_empty() {
        return Err(Error::contract("tune needs at least one sample"));
    }
    if prompt.width() != model.config.d_model {
        return Err(Error::shape(
            "tune",
            &[prompt.len(), prompt.width()],
            &[prompt.len(), model.config.d_model],
        ));
    }
    let digest_before = model.digest();
    let sequences = dataset
        .iter()
        .map(|s| {
            check_sample(model, prompt.len(), config.max_target_len, s)?;
            TrainingSequence::new(prompt.len(), s)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut prompt = prompt;
    let mut log = Vec::with_capacity(config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let batch = config.batch_size.max(1).min(sequences.len());
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..config.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..sequences.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let total_targets: usize = picked.iter().map(|&i| sequences[i].target_count()).sum();

        let mut tape = Tape::new();
        let bound_model = model.bind(&mut tape, false)?;
        let bound_prompt = prompt.bind(&mut tape)?;
        let mut weighted = Vec::with_capacity(batch);
        for &i in &picked {
            let seq = &sequences[i];
            let loss = sequence_loss(&mut tape, &bound_model, bound_prompt.matrix, seq)?;
            weighted.push(tape.scale(loss, seq.target_count() as f64 / total_targets as f64));
        }
        let stacked = tape.concat_rows(&weighted)?;
        let loss = tape.sum(stacked);
        log.push(tape.scalar(loss));
        let grads = tape.backward(loss)?;
        let mut params = prompt.tensors_mut();
        for (var, t) in bound_prompt.params.iter().zip(params.iter_mut()) {
            t.set_requires_grad(true);
            grads.accumulate_into(*var, t)?;
        }
        adam.step(&mut params)?;
        for t in params.iter_mut() {
            t.set_requires_grad(false);
        }
    }

    let digest_after = model.digest();
    if digest_after != digest_before {
        return Err(Error::contract("base model weights changed during prompt tuning"));
    }
    Ok(TuneOutcome {
        prompt,
        log,
        digest_before,
        digest_after,
    })
}

/// Greedy continuation of `[P_e ; embed(input)]` until `stop_token` or `budget`.
pub fn infer(
    model: &ModelWeights,
    prompt: &SoftPrompt,
    input: &[usize],
    budget: usize,
    stop_token: usize,
) -> Result<Generation> {
    if budget == 0 {
        return Ok(Generation {
            tokens: Vec::new(),
            truncated: true,
        });
    }
    let x = crate::model::embed(input, model)?;
    let prefix = compose(prompt, &x)?;
    generate_greedy(&prefix, model, budget, stop_token)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_length_prompt_is_rejected() {
        assert!(init_prompt(InitMode::Direct, 0, 4, 1).is_err());
        assert!(init_prompt(InitMode::LstmReparam, 3, 0, 1).is_err());
    }

    #[test]
    fn compose_stacks_prompt_over_input() {
        let prompt = init_prompt(InitMode::Direct, 2, 4, 9).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        let c = compose(&prompt, &x).unwrap();
        assert_eq!(c.shape(), &[5, 4]);
        assert_eq!(c.row(2), x.row(0));
        assert_eq!(c.row(0), prompt.matrix().unwrap().row(0));
        let narrow = Tensor::zeros(&[3, 5]);
        assert!(matches!(compose(&prompt, &narrow), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_reparam_weights_give_zero_prompt() {
        let params = PromptParams::LstmReparam {
            seed: Tensor::zeros(&[3, 4]),
            lstm: BiLstm::zeros(4, 4),
            proj_w: Tensor::zeros(&[8, 4]),
            proj_b: Tensor::zeros(&[4]),
        };
        let p = SoftPrompt::from_params(params).unwrap();
        assert!(p.matrix().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_sequence_masks_all_but_targets() {
        let s = TokenizedSample {
            id: "s".into(),
            input: vec![5, 6, 7],
            target: vec![8, 9, 1],
        };
        let seq = TrainingSequence::new(2, &s).unwrap();
        assert_eq!(seq.fed, vec![5, 6, 7, 8, 9]);
        assert_eq!(seq.targets.len(), 7);
        // Positions 4, 5, 6 predict 8, 9, 1.
        assert_eq!(seq.mask, vec![false, false, false, false, true, true, true]);
        assert_eq!(&seq.targets[4..], &[8, 9, 1]);
        assert_eq!(seq.targets[1], 5);
    }

    #[test]
    fn checkpoint_round_trip_both_modes() {
        for mode in [InitMode::Direct, InitMode::LstmReparam] {
            let p = init_prompt(mode, 3, 4, 2).unwrap();
            let back = SoftPrompt::from_checkpoint(&p.to_checkpoint(Some("nli"))).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn collapse_preserves_matrix() {
        let p = init_prompt(InitMode::LstmReparam, 3, 4, 2).unwrap();
        let c = p.collapse().unwrap();
        assert_eq!(c.mode(), InitMode::Direct);
        assert_eq!(c.matrix().unwrap(), p.matrix().unwrap());
    }
}
