//! Analytic gradients against central finite differences.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softprompt::autograd::{Tape, Var};
use softprompt::lstm::{lstm_bidirectional, BoundCell, LstmCell};
use softprompt::model::{ModelConfig, ModelWeights};
use softprompt::prompt::{dataset_loss, init_prompt, sequence_loss, InitMode, TokenizedSample, TrainingSequence};
use softprompt::Tensor;

pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Max relative error over every input coordinate of `inputs`.
pub fn op_error(inputs: &[Tensor], build: &Build) -> f64 {
    let run = |xs: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_grad()).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let loss = tape.scalar(out);
        let grads = tape.backward(out).unwrap();
        let g = vars
            .iter()
            .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
            .collect();
        (loss, g)
    };
    let (_, analytic) = run(inputs);
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

/// Contracts an output with fixed random weights so every entry matters.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng);
    let w = tape.constant(&w).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Worst relative error of every differentiable op, by name.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_matrix(&mut rng, 3, 4);
    let b = rand_matrix(&mut rng, 4, 2);
    let c = rand_matrix(&mut rng, 3, 4);
    let bias = Tensor::randn(&[4], 1.0, &mut rng);
    let wide = rand_matrix(&mut rng, 3, 5);
    let sq = rand_matrix(&mut rng, 4, 4);
    let x = rand_matrix(&mut rng, 3, 6);
    let gain = Tensor::randn(&[6], 1.0, &mut rng);
    let shift = Tensor::randn(&[6], 1.0, &mut rng);
    let logits = rand_matrix(&mut rng, 4, 7);
    let top = rand_matrix(&mut rng, 2, 3);
    let tall = rand_matrix(&mut rng, 4, 3);
    let side = rand_matrix(&mut rng, 2, 5);

    let seq = rand_matrix(&mut rng, 3, 4);
    let fw = LstmCell::random(4, 3, &mut rng);
    let bw = LstmCell::random(4, 3, &mut rng);
    let mut lstm_inputs = vec![seq];
    lstm_inputs.extend(fw.tensors().into_iter().cloned());
    lstm_inputs.extend(bw.tensors().into_iter().cloned());

    vec![
        ("matmul", op_error(&[a.clone(), b], &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 10)
        })),
        ("transpose", op_error(&[a.clone()], &|t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y, 11)
        })),
        ("add", op_error(&[a.clone(), c.clone()], &|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 12)
        })),
        ("mul", op_error(&[a.clone(), c], &|t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, 13)
        })),
        ("scale", op_error(&[a.clone()], &|t, v| {
            let y = t.scale(v[0], -2.5);
            project(t, y, 14)
        })),
        ("add_row_bias", op_error(&[a.clone(), bias], &|t, v| {
            let y = t.add_row_bias(v[0], v[1]).unwrap();
            project(t, y, 15)
        })),
        ("sum", op_error(&[a], &|t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y)
        })),
        ("gelu", op_error(&[wide.clone()], &|t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 20)
        })),
        ("tanh", op_error(&[wide.clone()], &|t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 21)
        })),
        ("sigmoid", op_error(&[wide.clone()], &|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 22)
        })),
        ("softmax_rows", op_error(&[wide], &|t, v| {
            let y = t.softmax_rows(v[0]);
            project(t, y, 23)
        })),
        ("causal_softmax_rows", op_error(&[sq], &|t, v| {
            let y = t.causal_softmax_rows(v[0]).unwrap();
            project(t, y, 24)
        })),
        ("layer_norm", op_error(&[x, gain, shift], &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, 30)
        })),
        ("cross_entropy", op_error(&[logits], &|t, v| {
            t.cross_entropy(v[0], &[3, 0, 6, 2], &[true, false, true, true]).unwrap()
        })),
        ("concat_rows", op_error(&[top.clone(), tall.clone()], &|t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            project(t, y, 40)
        })),
        ("concat_cols", op_error(&[top, side], &|t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            project(t, y, 41)
        })),
        ("slice_rows", op_error(&[tall.clone()], &|t, v| {
            let y = t.slice_rows(v[0], 1, 2).unwrap();
            project(t, y, 42)
        })),
        ("slice_cols", op_error(&[tall.clone()], &|t, v| {
            let y = t.slice_cols(v[0], 1, 2).unwrap();
            project(t, y, 43)
        })),
        ("embedding", op_error(&[tall], &|t, v| {
            let y = t.embedding(v[0], &[2, 0, 2, 3]).unwrap();
            project(t, y, 44)
        })),
        ("lstm_bidirectional", op_error(&lstm_inputs, &|t, v| {
            let f = BoundCell::new(v[1], v[2], v[3], 3);
            let b = BoundCell::new(v[4], v[5], v[6], 3);
            let y = lstm_bidirectional(t, v[0], &f, &b).unwrap();
            project(t, y, 50)
        })),
    ]
}

/// Two layers, two heads, width 16, vocabulary 32.
pub fn small_model() -> ModelWeights {
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        tied_head: true,
    };
    let mut m = ModelWeights::init(&cfg, 9).unwrap();
    // Default init is nearly flat; perturb so gradients are not all tiny.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in m.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn sample() -> TokenizedSample {
    TokenizedSample {
        id: "s".into(),
        input: vec![4, 9, 17, 5, 30],
        target: vec![12, 7, 1],
    }
}

/// ∂loss/∂P_e through the frozen small model, on 20 random coordinates.
pub fn prompt_gradient_error(mode: InitMode) -> f64 {
    let model = small_model();
    let data = vec![sample()];
    let seq = TrainingSequence::new(4, &data[0]).unwrap();
    let mut prompt = init_prompt(mode, 4, 16, 3).unwrap();
    if mode == InitMode::Direct {
        // Larger entries than the default init so the check is not trivially flat.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for x in prompt.tensors_mut()[0].data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false).unwrap();
    let bp = prompt.bind(&mut tape).unwrap();
    let loss = sequence_loss(&mut tape, &bm, bp.matrix, &seq).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = bp
        .params
        .iter()
        .map(|v| grads.get(*v).unwrap().to_vec())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..analytic.len());
        let i = rng.random_range(0..analytic[k].len());
        let mut plus = prompt.clone();
        plus.tensors_mut()[k].data_mut()[i] += STEP;
        let mut minus = prompt.clone();
        minus.tensors_mut()[k].data_mut()[i] -= STEP;
        let numeric = (dataset_loss(&model, &plus, &data).unwrap()
            - dataset_loss(&model, &minus, &data).unwrap())
            / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[k][i], numeric));
    }
    worst
}
