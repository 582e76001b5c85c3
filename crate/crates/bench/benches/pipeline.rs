use criterion::{black_box, criterion_group, criterion_main, Criterion};
use softprompt::codec::{Codec, TaskKind};
use softprompt::eval::{evaluate, MatchMode};
use softprompt::model::{embed, forward};
use softprompt::prompt::{infer, init_prompt, tune, InitMode, TuningConfig};
use softprompt::tokenizer::EOS;
use softprompt_bench::{corpus_text, desk_model, instances, samples, tokenizer};

fn model_benches(c: &mut Criterion) {
    let model = desk_model();
    let tokens: Vec<usize> = (0..64).map(|i| 4 + (i * 7) % 500).collect();
    let x = embed(&tokens, &model).unwrap();
    c.bench_function("forward 64 tokens", |b| b.iter(|| forward(black_box(&x), &model).unwrap()));

    let notes = instances(TaskKind::ProgressNote, 16);
    let tok = tokenizer(&notes);
    let data = samples(&tok, &notes);
    for mode in [InitMode::Direct, InitMode::LstmReparam] {
        let prompt = init_prompt(mode, 20, 64, 1).unwrap();
        let config = TuningConfig {
            steps: 1,
            init_mode: mode,
            ..TuningConfig::default()
        };
        c.bench_function(&format!("tuning step, {} prompt", mode.as_str()), |b| {
            b.iter(|| tune(&model, prompt.clone(), &data, &config).unwrap())
        });
    }
    let prompt = init_prompt(InitMode::Direct, 20, 64, 1).unwrap();
    c.bench_function("generate 16 tokens", |b| {
        b.iter(|| infer(&model, &prompt, &data[0].input, 16, EOS).unwrap())
    });
}

fn text_benches(c: &mut Criterion) {
    let items = instances(TaskKind::Concept, 200);
    let text = corpus_text(&items);
    c.bench_function("train bpe tokenizer", |b| b.iter(|| tokenizer(black_box(&items[..50]))));
    let tok = tokenizer(&items);
    c.bench_function("encode corpus", |b| b.iter(|| tok.encode(black_box(&text))));

    let codec = Codec::default();
    let relations = instances(TaskKind::Relation, 200);
    c.bench_function("parse 200 relation targets", |b| {
        b.iter(|| {
            for i in &relations {
                codec.parse_output(i.task, &i.target_text, &i.source, &i.expected_pairs()).unwrap();
            }
        })
    });
    let generations: Vec<Option<&str>> = items.iter().map(|i| Some(i.target_text.as_str())).collect();
    c.bench_function("evaluate 200 concept instances", |b| {
        b.iter(|| evaluate(&codec, &items, &generations, MatchMode::Relaxed).unwrap())
    });
}

criterion_group!(benches, model_benches, text_benches);
criterion_main!(benches);
