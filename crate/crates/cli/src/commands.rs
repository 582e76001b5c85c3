//! The pipeline stages. Each one reads and validates all of its inputs
//! before it writes anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use softprompt::codec::{Annotations, Codec, Lexicon, Source, TaskInstance, TaskKind};
use softprompt::corpus::{
    generate_synthetic, load_standoff, read_instances, write_instances, Checkpoint, SyntheticSpec,
};
use softprompt::eval::{evaluate, EvalReport, MatchMode};
use softprompt::model::{pretrain_lm, ModelConfig, ModelWeights, PretrainConfig, Pretrained};
use softprompt::prompt::{infer, init_prompt, tune, SoftPrompt, TokenizedSample, TuneOutcome, TuningConfig};
use softprompt::tokenizer::{Tokenizer, TokenizerMode, EOS};

/// Failure of this program rather than of its inputs.
#[derive(Debug)]
pub struct Internal(pub String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Internal(format!("writing {}: {e}", path.display())).into())
}

fn write_with<E: fmt::Display>(path: &Path, r: std::result::Result<(), E>) -> Result<()> {
    r.map_err(|e| Internal(format!("writing {}: {e}", path.display())).into())
}

/// The directory `path` goes into must already exist.
pub fn check_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    if path.is_dir() {
        bail!("output path {} is a directory", path.display());
    }
    Ok(())
}

/// `model.ckpt` -> `model.ckpt.loss.tsv`.
pub fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.tsv");
    PathBuf::from(s)
}

/// TSV path written next to an evaluation report.
pub fn report_table_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "tsv") {
        let mut s = out.as_os_str().to_owned();
        s.push(".tsv");
        PathBuf::from(s)
    } else {
        out.with_extension("tsv")
    }
}

fn loss_tsv(log: &[f64]) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in log.iter().enumerate() {
        s.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    s
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Training text: one document per non-empty line, or per instance for
/// `.jsonl` files (input then target). A tab splits a line into input and
/// target, which are tokenized separately as during tuning.
enum Documents {
    Lines(Vec<String>),
    Pairs(Vec<(String, String)>),
}

fn read_documents(path: &Path) -> Result<Documents> {
    if is_jsonl(path) {
        let instances = read_instances(path, &Codec::default())
            .with_context(|| format!("reading instances {}", path.display()))?;
        Ok(Documents::Pairs(
            instances.into_iter().map(|i| (i.input_text, i.target_text)).collect(),
        ))
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
        Ok(Documents::Lines(
            text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        ))
    }
}

impl Documents {
    fn text(&self) -> String {
        match self {
            Documents::Lines(v) => v.join("\n").replace('\t', "\n"),
            Documents::Pairs(v) => v
                .iter()
                .map(|(a, b)| format!("{a}\n{b}"))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    fn sequences(&self, tok: &Tokenizer) -> Vec<Vec<usize>> {
        let close = |mut v: Vec<usize>| {
            v.push(EOS);
            v
        };
        match self {
            Documents::Lines(v) => v
                .iter()
                .map(|l| {
                    let mut s = Vec::new();
                    for part in l.split('\t') {
                        s.extend(tok.encode(part));
                    }
                    close(s)
                })
                .collect(),
            Documents::Pairs(v) => v
                .iter()
                .map(|(a, b)| {
                    let mut s = tok.encode(a);
                    s.extend(tok.encode(b));
                    close(s)
                })
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Documents::Lines(v) => v.is_empty(),
            Documents::Pairs(v) => v.is_empty(),
        }
    }
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Tokenizer::load(path).with_context(|| format!("reading tokenizer {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelWeights> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading model {}", path.display()))?;
    ModelWeights::from_checkpoint(ckpt).with_context(|| format!("reading model {}", path.display()))
}

fn load_instances(path: &Path, codec: &Codec, task: Option<TaskKind>) -> Result<Vec<TaskInstance>> {
    let instances = read_instances(path, codec).with_context(|| format!("reading instances {}", path.display()))?;
    if let Some(task) = task {
        if let Some(other) = instances.iter().find(|i| i.task != task) {
            bail!(
                "{}: instance `{}` is a {} instance, expected {task}",
                path.display(),
                other.id,
                other.task
            );
        }
    }
    let mut seen = BTreeSet::new();
    for i in &instances {
        if !seen.insert(i.id.as_str()) {
            bail!("{}: duplicate instance id `{}`", path.display(), i.id);
        }
    }
    Ok(instances)
}

fn check_vocab(tok: &Tokenizer, model: &ModelWeights) -> Result<()> {
    if tok.vocab_size() != model.config.vocab_size {
        bail!(
            "tokenizer has {} entries but the model vocabulary is {}",
            tok.vocab_size(),
            model.config.vocab_size
        );
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TokenizerOpts {
    pub data: PathBuf,
    pub vocab_size: usize,
    pub mode: TokenizerMode,
    pub out: PathBuf,
}

pub fn cmd_tokenizer(o: &TokenizerOpts) -> Result<Tokenizer> {
    check_output(&o.out)?;
    let docs = read_documents(&o.data)?;
    let tok = Tokenizer::train(&docs.text(), o.vocab_size, o.mode)?;
    eprintln!("tokenizer: {} entries ({})", tok.vocab_size(), tok.mode().as_str());
    write_with(&o.out, tok.save(&o.out))?;
    Ok(tok)
}

#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub data: PathBuf,
    pub tokenizer: PathBuf,
    pub out: PathBuf,
    /// `vocab_size` is taken from the tokenizer.
    pub model: ModelConfig,
    pub train: PretrainConfig,
}

pub fn cmd_pretrain(o: &PretrainOpts) -> Result<Pretrained> {
    check_output(&o.out)?;
    let tok = load_tokenizer(&o.tokenizer)?;
    let docs = read_documents(&o.data)?;
    if docs.is_empty() {
        bail!("{}: no training text", o.data.display());
    }
    let config = ModelConfig {
        vocab_size: tok.vocab_size(),
        ..o.model.clone()
    };
    config.validate()?;
    let corpus = docs.sequences(&tok);
    let out = pretrain_lm(&corpus, &config, &o.train)?;
    eprintln!(
        "pretrain: held-out loss {:.4} -> {:.4} over {} steps",
        out.initial_heldout_loss,
        out.final_heldout_loss,
        out.log.len()
    );
    write_with(&o.out, out.weights.to_checkpoint().save(&o.out))?;
    write_file(&loss_log_path(&o.out), loss_tsv(&out.log))?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthOpts {
    pub task: TaskKind,
    pub count: usize,
    pub seed: u64,
    pub label_cue: bool,
    pub out: PathBuf,
}

pub fn cmd_synth(o: &SynthOpts) -> Result<Vec<TaskInstance>> {
    check_output(&o.out)?;
    let mut spec = SyntheticSpec::new(o.task, o.count, o.seed);
    if o.label_cue {
        spec = spec.with_label_cue();
    }
    let instances = generate_synthetic(&Codec::default(), &spec)?;
    write_with(&o.out, write_instances(&o.out, &instances))?;
    eprintln!("synth: {} {} instances", instances.len(), o.task);
    Ok(instances)
}

#[derive(Debug, Clone)]
pub struct ConvertOpts {
    pub dir: PathBuf,
    pub task: TaskKind,
    pub out: PathBuf,
}

/// Standoff `.txt`/`.ann` pairs to instances. Concept instances keep every
/// document; relation instances skip documents without relations.
pub fn cmd_convert(o: &ConvertOpts) -> Result<Vec<TaskInstance>> {
    if !matches!(o.task, TaskKind::Concept | TaskKind::Relation) {
        bail!("convert supports concept and relation, not {}", o.task);
    }
    check_output(&o.out)?;
    let mut stems: Vec<PathBuf> = std::fs::read_dir(&o.dir)
        .with_context(|| format!("listing {}", o.dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ann"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("{}: no .ann files", o.dir.display());
    }
    let codec = Codec::default();
    let mut out = Vec::new();
    for ann in stems {
        let txt = ann.with_extension("txt");
        let doc = load_standoff(&txt, &ann).with_context(|| format!("reading {}", ann.display()))?;
        let gold = match o.task {
            TaskKind::Concept => Annotations::Concepts(doc.concepts()),
            _ => {
                let rels = doc.relation_annotations();
                if rels.is_empty() {
                    continue;
                }
                Annotations::Relations(rels)
            }
        };
        let inst = TaskInstance::new(&codec, doc.id.clone(), o.task, Source::Text(doc.text.clone()), gold)
            .with_context(|| format!("converting {}", ann.display()))?;
        out.push(inst);
    }
    write_with(&o.out, write_instances(&o.out, &out))?;
    eprintln!("convert: {} {} instances", out.len(), o.task);
    Ok(out)
}

pub fn tokenize_instances(tok: &Tokenizer, instances: &[TaskInstance]) -> Vec<TokenizedSample> {
    instances
        .iter()
        .map(|i| {
            let mut target = tok.encode(&i.target_text);
            target.push(EOS);
            TokenizedSample {
                id: i.id.clone(),
                input: tok.encode(&i.input_text),
                target,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TuneOpts {
    pub model: PathBuf,
    pub tokenizer: PathBuf,
    pub data: PathBuf,
    pub task: Option<TaskKind>,
    pub out: PathBuf,
    pub tuning: TuningConfig,
}

pub fn cmd_tune(o: &TuneOpts) -> Result<TuneOutcome> {
    check_output(&o.out)?;
    let model = load_model(&o.model)?;
    let tok = load_tokenizer(&o.tokenizer)?;
    check_vocab(&tok, &model)?;
    let instances = load_instances(&o.data, &Codec::default(), o.task)?;
    if instances.is_empty() {
        bail!("{}: no instances to tune on", o.data.display());
    }
    let samples = tokenize_instances(&tok, &instances);
    let max = model.config.max_seq_len;
    for s in &samples {
        let len = o.tuning.prompt_len + s.input.len() + s.target.len() - 1;
        if len > max {
            bail!("instance `{}`: prompt, input and target need {len} positions, the model has {max}", s.id);
        }
    }
    let prompt = init_prompt(o.tuning.init_mode, o.tuning.prompt_len, model.config.d_model, o.tuning.seed)?;
    let outcome = tune(&model, prompt, &samples, &o.tuning)?;
    if outcome.digest_before != outcome.digest_after {
        return Err(Internal("model weights changed during tuning".into()).into());
    }
    eprintln!(
        "tune: loss {:.4} -> {:.4} over {} steps",
        outcome.log.first().copied().unwrap_or(f64::NAN),
        outcome.log.last().copied().unwrap_or(f64::NAN),
        outcome.log.len()
    );
    let task = o.task.or_else(|| {
        let first = instances[0].task;
        instances.iter().all(|i| i.task == first).then_some(first)
    });
    let ckpt = outcome.prompt.to_checkpoint(task.map(|t| t.as_str()));
    write_with(&o.out, ckpt.save(&o.out))?;
    write_file(&loss_log_path(&o.out), loss_tsv(&outcome.log))?;
    Ok(outcome)
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub generated: String,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct GenerateOpts {
    pub model: PathBuf,
    pub prompt: PathBuf,
    pub tokenizer: PathBuf,
    pub data: PathBuf,
    pub task: Option<TaskKind>,
    pub out: PathBuf,
    pub max_new_tokens: usize,
}

pub fn cmd_generate(o: &GenerateOpts) -> Result<Vec<GenerationRecord>> {
    check_output(&o.out)?;
    if o.max_new_tokens == 0 {
        bail!("max-new-tokens must be positive");
    }
    let model = load_model(&o.model)?;
    let tok = load_tokenizer(&o.tokenizer)?;
    check_vocab(&tok, &model)?;
    let ckpt = Checkpoint::load(&o.prompt).with_context(|| format!("reading prompt {}", o.prompt.display()))?;
    let prompt = SoftPrompt::from_checkpoint(&ckpt).with_context(|| format!("reading prompt {}", o.prompt.display()))?;
    if prompt.width() != model.config.d_model {
        bail!("prompt width {} does not match model width {}", prompt.width(), model.config.d_model);
    }
    if let (Some(task), Some(stored)) = (o.task, ckpt.meta_value("task")) {
        if stored != task.as_str() {
            bail!("prompt was tuned for {stored}, not {task}");
        }
    }
    let instances = load_instances(&o.data, &Codec::default(), o.task)?;
    let samples = tokenize_instances(&tok, &instances);
    let max = model.config.max_seq_len;
    let mut budgets = Vec::with_capacity(samples.len());
    for s in &samples {
        let used = prompt.len() + s.input.len();
        if used >= max {
            bail!("instance `{}`: prompt and input need {used} positions, the model has {max}", s.id);
        }
        budgets.push(o.max_new_tokens.min(max - used));
    }
    let mut records = Vec::with_capacity(samples.len());
    for (s, budget) in samples.iter().zip(budgets) {
        let g = infer(&model, &prompt, &s.input, budget, EOS)?;
        let tokens: &[usize] = match g.tokens.last() {
            Some(&EOS) => &g.tokens[..g.tokens.len() - 1],
            _ => &g.tokens,
        };
        records.push(GenerationRecord {
            id: s.id.clone(),
            generated: tok.decode(tokens)?,
            truncated: g.truncated,
        });
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(&o.out, text)?;
    eprintln!("generate: {} generations", records.len());
    Ok(records)
}

pub fn read_generations(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading generations {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if out.insert(r.id.clone(), r.generated).is_some() {
            bail!("{}: line {}: duplicate id `{}`", path.display(), i + 1, r.id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub task: Option<TaskKind>,
    pub data: PathBuf,
    pub generations: PathBuf,
    pub mode: MatchMode,
    pub lexicon: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes the `key=value` report to `out` and the per-category table next to it.
pub fn cmd_eval(o: &EvalOpts) -> Result<EvalReport> {
    check_output(&o.out)?;
    let table = report_table_path(&o.out);
    let mut codec = Codec::default();
    if let Some(path) = &o.lexicon {
        codec = codec.with_lexicon(Lexicon::load(path).with_context(|| format!("reading lexicon {}", path.display()))?);
    }
    let instances = load_instances(&o.data, &codec, o.task)?;
    let generations = read_generations(&o.generations)?;
    let known: BTreeSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    if let Some(stray) = generations.keys().find(|id| !known.contains(id.as_str())) {
        bail!("{}: generation for unknown instance `{stray}`", o.generations.display());
    }
    let missing = instances.iter().filter(|i| !generations.contains_key(&i.id)).count();
    if missing > 0 {
        eprintln!("eval: {missing} instances have no generation and count as nonlogical");
    }
    let paired: Vec<Option<&str>> = instances
        .iter()
        .map(|i| generations.get(&i.id).map(String::as_str))
        .collect();
    let report = evaluate(&codec, &instances, &paired, o.mode)?;
    write_file(&o.out, report.to_text())?;
    write_file(&table, report.to_tsv())?;
    eprintln!(
        "eval: P {:.4} R {:.4} F1 {:.4} over {} instances",
        report.precision, report.recall, report.f1, report.instances
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_paths() {
        assert_eq!(loss_log_path(Path::new("a/m.ckpt")), PathBuf::from("a/m.ckpt.loss.tsv"));
        assert_eq!(report_table_path(Path::new("r.txt")), PathBuf::from("r.tsv"));
        assert_eq!(report_table_path(Path::new("r")), PathBuf::from("r.tsv"));
        assert_eq!(report_table_path(Path::new("r.tsv")), PathBuf::from("r.tsv.tsv"));
    }

    #[test]
    fn missing_output_directory_is_an_input_error() {
        assert!(check_output(Path::new("/definitely/not/here/out.txt")).is_err());
        assert!(check_output(Path::new("out.txt")).is_ok());
    }

    #[test]
    fn loss_log_is_one_based() {
        assert_eq!(loss_tsv(&[2.0, 1.5]), "step\tloss\n1\t2.000000\n2\t1.500000\n");
    }
}
