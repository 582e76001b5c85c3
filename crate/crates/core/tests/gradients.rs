mod common;

use common::grad::{all_op_errors, prompt_gradient_error, rel_err, sample, small_model, STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softprompt::autograd::{Tape, Var};
use softprompt::model::ModelWeights;
use softprompt::prompt::InitMode;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in all_op_errors() {
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn prompt_gradient_through_frozen_model() {
    for mode in [InitMode::Direct, InitMode::LstmReparam] {
        let err = prompt_gradient_error(mode);
        assert!(err < 1e-3, "{mode:?}: max relative error {err:e}");
    }
}

#[test]
fn model_weight_gradients_match_finite_differences() {
    let mut model = small_model();
    let data = sample();
    let tokens: Vec<usize> = data.input.iter().chain(&data.target).copied().collect();
    let loss_of = |m: &ModelWeights, tape: &mut Tape, grads: bool| -> (Var, Vec<Var>) {
        let bm = m.bind(tape, grads).unwrap();
        let x = bm.embed(tape, &tokens[..tokens.len() - 1]).unwrap();
        let x = bm.add_positions(tape, x).unwrap();
        let logits = bm.forward(tape, x).unwrap();
        let n = tokens.len() - 1;
        let loss = tape.cross_entropy(logits, &tokens[1..], &vec![true; n]).unwrap();
        (loss, bm.params().to_vec())
    };
    let mut tape = Tape::new();
    let (loss, params) = loss_of(&model, &mut tape, true);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
        .collect();
    let value = |m: &ModelWeights| {
        let mut tape = Tape::new();
        let (loss, _) = loss_of(m, &mut tape, false);
        tape.scalar(loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let k = rng.random_range(0..analytic.len());
        let i = rng.random_range(0..analytic[k].len());
        let orig = model.tensors_mut()[k].data()[i];
        model.tensors_mut()[k].data_mut()[i] = orig + STEP;
        let up = value(&model);
        model.tensors_mut()[k].data_mut()[i] = orig - STEP;
        let down = value(&model);
        model.tensors_mut()[k].data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[k][i], (up - down) / (2.0 * STEP)));
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
