//! Command-line front end. Exit codes: 0 success, 1 bad input or usage,
//! 2 internal invariant violation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use crate::charlm::{
    charlm_train, filter_corpus, Bidirectional, CharLm, CharLmConfig, Direction, SentenceScorer,
};
use crate::config::RunConfig;
use crate::data::{
    encode_examples, generate_toy_task, mix_datasets, read_jsonl, write_jsonl, Example,
    FeatureFile, SubwordVocab, ToyConfig, FEATURE_MAGIC, FEATURE_VERSION,
};
use crate::error::{Error, Result};
use crate::eval::{
    adversarial_eval, bleu, decode_all, detok_all, sense_accuracy, sentence_bleu, BleuValidator,
    DecodeOptions,
};
use crate::gradcheck::check_joint_loss;
use crate::model::{ImageFeatures, Model, ModelConfig, Sample};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::training::{
    average_checkpoints, train, CheckpointArchive, Validator, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Parser, Debug)]
#[command(name = "mmtx", about = "Multimodal translation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic disambiguation task.
    GenToy(GenToyArgs),
    /// Learn a subword vocabulary from JSONL datasets.
    LearnVocab(LearnVocabArgs),
    /// Keep sentences a character LM finds in-domain.
    Filter(FilterArgs),
    /// Concatenate datasets with oversampling factors, then shuffle.
    Mix(MixArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate a dataset.
    Translate(DecodeArgs),
    /// Translate and score against references.
    Evaluate(EvaluateArgs),
    /// Average checkpoints parameter-wise.
    Average(AverageArgs),
    /// Score with true and with deranged images.
    Adversarial(AdversarialArgs),
    /// Finite-difference check of the joint loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenToyArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct LearnVocabArgs {
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// One sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2.5)]
    threshold: f64,
    /// Trained LM; give twice (forward, then backward) for bidirectional scoring.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// In-domain corpus to train an LM on when no --model is given.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    #[arg(long)]
    bidirectional: bool,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to save the trained forward LM (backward goes to `<path>.backward`).
    #[arg(long)]
    save_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MixArgs {
    /// `path:factor`
    #[arg(long = "input", required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Per-sentence `id\thypothesis\treference\tsentence_bleu` report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AverageArgs {
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdversarialArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `accuracy` (ambiguous-word accuracy) or `bleu`.
    #[arg(long, default_value = "accuracy")]
    metric: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Version line including the on-disk format versions.
pub fn version_text() -> String {
    format!(
        "{} (checkpoint {} v{CHECKPOINT_VERSION}, features {} v{FEATURE_VERSION})",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(CHECKPOINT_MAGIC),
        String::from_utf8_lossy(FEATURE_MAGIC),
    )
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let version: &'static str = Box::leak(version_text().into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::GenToy(a) => gen_toy(a),
        Command::LearnVocab(a) => learn_vocab(a),
        Command::Filter(a) => filter(a),
        Command::Mix(a) => mix(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Average(a) => average(a),
        Command::Adversarial(a) => adversarial(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_toy(a: GenToyArgs) -> Result<String> {
    let cfg = ToyConfig {
        noise: a.noise,
        ..ToyConfig::default()
    };
    let task = generate_toy_task(a.train, a.test, a.seed, &cfg)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_jsonl(&a.out_dir.join("train.jsonl"), &task.train)?;
    write_jsonl(&a.out_dir.join("test.jsonl"), &task.test)?;
    task.features.save(&a.out_dir.join("features.mmxi"))?;
    Ok(format!(
        "train\t{}\ntest\t{}\nimages\t{}\n",
        task.train.len(),
        task.test.len(),
        task.features.len()
    ))
}

fn learn_vocab(a: LearnVocabArgs) -> Result<String> {
    let mut corpus = Vec::new();
    for path in &a.inputs {
        for ex in read_jsonl(path)? {
            corpus.push(ex.source);
            corpus.extend(ex.target);
        }
    }
    let vocab = SubwordVocab::learn(&corpus, a.size)?;
    vocab.save(&a.out)?;
    Ok(format!(
        "vocab_size\t{}\nmerges\t{}\n",
        vocab.len(),
        vocab.merges().len()
    ))
}

fn filter(a: FilterArgs) -> Result<String> {
    let scorer: Box<dyn SentenceScorer> = match (a.models.as_slice(), &a.train_corpus) {
        ([], Some(corpus)) => {
            let corpus = read_lines(corpus)?;
            let config = CharLmConfig {
                steps: a.steps,
                seed: a.seed,
                ..CharLmConfig::default()
            };
            let (forward, _) = charlm_train(&corpus, &config)?;
            if let Some(p) = &a.save_model {
                forward.save(p)?;
            }
            if a.bidirectional {
                let (backward, _) = charlm_train(
                    &corpus,
                    &CharLmConfig {
                        direction: Direction::Backward,
                        ..config
                    },
                )?;
                if let Some(p) = &a.save_model {
                    let mut name = p.as_os_str().to_owned();
                    name.push(".backward");
                    backward.save(Path::new(&name))?;
                }
                Box::new(Bidirectional { forward, backward })
            } else {
                Box::new(forward)
            }
        }
        ([one], None) => Box::new(CharLm::load(one)?),
        ([fwd, bwd], None) => Box::new(Bidirectional {
            forward: CharLm::load(fwd)?,
            backward: CharLm::load(bwd)?,
        }),
        _ => {
            return Err(Error::Config(
                "give either --train-corpus or one or two --model paths (forward, backward)".into(),
            ))
        }
    };
    let pool = read_lines(&a.input)?;
    let outcome = filter_corpus(scorer.as_ref(), &pool, a.threshold)?;
    let mut kept = outcome.kept.join("\n");
    if !kept.is_empty() {
        kept.push('\n');
    }
    write_text(&a.out, &kept)?;
    if let Some(r) = &a.report {
        write_text(r, &outcome.report_tsv())?;
    }
    info!("{}", outcome.summary());
    Ok(format!(
        "kept\t{}\ntotal\t{}\n",
        outcome.kept.len(),
        outcome.decisions.len()
    ))
}

fn mix(a: MixArgs) -> Result<String> {
    let mut loaded: Vec<(Vec<Example>, usize)> = Vec::new();
    for spec in &a.inputs {
        let (path, factor) = spec
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("mix input {spec:?} is not path:factor")))?;
        let factor = factor
            .parse()
            .map_err(|_| Error::Config(format!("bad oversampling factor in {spec:?}")))?;
        loaded.push((read_jsonl(Path::new(path))?, factor));
    }
    let parts: Vec<(&[Example], usize)> = loaded.iter().map(|(e, f)| (e.as_slice(), *f)).collect();
    let mixed = mix_datasets(&parts, &mut SplitMix64::new(a.seed))?;
    write_jsonl(&a.out, &mixed)?;
    Ok(format!("examples\t{}\n", mixed.len()))
}

fn load_features(path: Option<&Path>) -> Result<Option<FeatureFile>> {
    path.map(FeatureFile::load).transpose()
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("config key {key} must be set")))
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    let vocab = SubwordVocab::load(require(&cfg.vocab, "vocab")?)?;
    if cfg.model.vocab_size != vocab.len() {
        info!(
            "vocab_size {} replaced by the vocabulary's {}",
            cfg.model.vocab_size,
            vocab.len()
        );
        cfg.model.vocab_size = vocab.len();
    }
    cfg.validate()?;
    require(&cfg.train.checkpoint_dir, "checkpoint_dir")?;
    let features = load_features(cfg.features.as_deref())?;
    let train_set = encode_examples(
        &read_jsonl(require(&cfg.train_data, "train_data")?)?,
        &vocab,
        features.as_ref(),
    )?;
    let valid = match &cfg.valid_data {
        Some(p) => {
            let examples = read_jsonl(p)?;
            let refs: Vec<String> = examples
                .iter()
                .map(|e| e.target.clone().unwrap_or_default())
                .collect();
            Some((encode_examples(&examples, &vocab, features.as_ref())?, refs))
        }
        None => None,
    };
    let opts = DecodeOptions {
        max_len: cfg.max_decode_len,
        beam: 1,
        jobs: cfg.jobs,
    };
    let validator = match &valid {
        Some((samples, refs)) => Some(BleuValidator::new(samples, refs.clone(), &vocab, opts)?),
        None => None,
    };
    let mut tc = cfg.train.clone();
    tc.checkpoint_meta
        .push(("model_config".into(), cfg.model_text()));
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train(
        &mut model,
        &train_set,
        &tc,
        validator.as_ref().map(|v| v as &dyn Validator),
    )?;
    let tsv = report.to_tsv();
    let dir = require(&cfg.train.checkpoint_dir, "checkpoint_dir")?;
    write_text(&dir.join("report.tsv"), &tsv)?;
    write_text(&dir.join("run.cfg"), &cfg.to_text())?;
    Ok(tsv)
}

/// Rebuilds a translation model from a checkpoint written by `train`.
pub fn load_model(path: &Path) -> Result<Model> {
    let archive = CheckpointArchive::load(path)?;
    let text = archive.meta_value("model_config").ok_or_else(|| {
        Error::Format(format!("{} carries no model configuration", path.display()))
    })?;
    let config: ModelConfig = RunConfig::model_from_text(text)?;
    let mut model = Model::new(config, 0)?;
    archive.apply_to(model.params_mut())?;
    Ok(model)
}

struct Loaded {
    model: Model,
    vocab: SubwordVocab,
    examples: Vec<Example>,
    samples: Vec<Sample>,
    opts: DecodeOptions,
}

fn load_for_decoding(a: &DecodeArgs) -> Result<Loaded> {
    let model = load_model(&a.checkpoint)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    if vocab.len() > model.config().vocab_size {
        return Err(Error::Input(format!(
            "vocabulary has {} entries, model was trained with {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let features = load_features(a.features.as_deref())?;
    let examples = read_jsonl(&a.input)?;
    let samples = encode_examples(&examples, &vocab, features.as_ref())?;
    let opts = DecodeOptions {
        max_len: a.max_len,
        beam: a.beam,
        jobs: a.jobs,
    };
    Ok(Loaded {
        model,
        vocab,
        examples,
        samples,
        opts,
    })
}

fn translate(a: DecodeArgs) -> Result<String> {
    let l = load_for_decoding(&a)?;
    let hyps = detok_all(&l.vocab, &decode_all(&l.model, &l.samples, &l.opts)?);
    let mut out = String::new();
    for (ex, h) in l.examples.iter().zip(&hyps) {
        let _ = writeln!(out, "{}\t{h}", ex.id);
    }
    Ok(out)
}

fn references(examples: &[Example]) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|e| {
            e.target
                .clone()
                .ok_or_else(|| Error::Input(format!("example {} has no reference", e.id)))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<String> {
    let l = load_for_decoding(&a.decode)?;
    let refs = references(&l.examples)?;
    let hyps = detok_all(&l.vocab, &decode_all(&l.model, &l.samples, &l.opts)?);
    let mut out = format!("metric\tvalue\nbleu\t{:.4}\n", bleu(&hyps, &refs, false)?);
    if let Ok(acc) = sense_accuracy(&hyps, &refs) {
        let _ = writeln!(out, "sense_accuracy\t{acc:.4}");
    }
    if let Some(p) = &a.report {
        let mut rep = String::from("id\thypothesis\treference\tsentence_bleu\n");
        for ((ex, h), r) in l.examples.iter().zip(&hyps).zip(&refs) {
            let _ = writeln!(rep, "{}\t{h}\t{r}\t{:.4}", ex.id, sentence_bleu(h, r)?);
        }
        write_text(p, &rep)?;
    }
    Ok(out)
}

fn average(a: AverageArgs) -> Result<String> {
    let archives = a
        .checkpoints
        .iter()
        .map(|p| CheckpointArchive::load(p))
        .collect::<Result<Vec<_>>>()?;
    let avg = average_checkpoints(&archives)?;
    avg.save(&a.out)?;
    Ok(format!(
        "averaged\t{}\nsource_steps\t{}\n",
        archives.len(),
        avg.meta_value("source_steps").unwrap_or("")
    ))
}

fn adversarial(a: AdversarialArgs) -> Result<String> {
    let l = load_for_decoding(&a.decode)?;
    let refs = references(&l.examples)?;
    let vocab = &l.vocab;
    let metric: Box<dyn Fn(&[Vec<usize>]) -> Result<f64>> = match a.metric.as_str() {
        "accuracy" => Box::new(|outs| sense_accuracy(&detok_all(vocab, outs), &refs)),
        "bleu" => Box::new(|outs| bleu(&detok_all(vocab, outs), &refs, false)),
        other => {
            return Err(Error::Config(format!(
                "unknown metric {other:?} (accuracy|bleu)"
            )))
        }
    };
    let rep = adversarial_eval(&l.model, &l.samples, a.seed, &l.opts, metric.as_ref())?;
    Ok(format!(
        "metric\t{}\nmetric_true\t{:.6}\nmetric_shuffled\t{:.6}\ndelta\t{:.6}\nseed\t{}\n",
        a.metric, rep.metric_true, rep.metric_shuffled, rep.delta, rep.seed
    ))
}

/// A small random batch exercising every objective the model has.
pub fn random_batch(config: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = SplitMix64::new(seed);
    let ids = |len: usize, rng: &mut SplitMix64| -> Vec<usize> {
        (0..len)
            .map(|_| 4 + rng.below(config.vocab_size.saturating_sub(4).max(1)))
            .collect()
    };
    (0..n)
        .map(|i| {
            let src = ids(2 + i % 3, &mut rng);
            let tgt = Some(ids(2 + (i + 1) % 3, &mut rng));
            let grid = Tensor::uniform(&[config.image_positions, config.image_dim], 1.0, &mut rng);
            let pooled = Tensor::uniform(&[config.pooled_dim], 1.0, &mut rng);
            Ok(Sample {
                src,
                tgt,
                image: Some(std::sync::Arc::new(ImageFeatures::new(grid, pooled)?)),
            })
        })
        .collect()
}

fn gradcheck(a: GradcheckArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    cfg.model.validate()?;
    let model = Model::new(cfg.model.clone(), a.seed)?;
    let batch = random_batch(&cfg.model, 3, a.seed)?;
    let (report, worst) = check_joint_loss(&model, &batch, a.seed, a.step, a.tol)?;
    let out = format!(
        "parameters\t{}\nmax_rel_error\t{:.3e}\nworst_parameter\t{worst}\npassed\t{}\n",
        model.params().len(),
        report.max_rel_error,
        report.passed
    );
    if report.passed {
        Ok(out)
    } else {
        print!("{out}");
        Err(Error::Contract(format!(
            "gradient check failed: {:.3e} > {:.1e}",
            report.max_rel_error, a.tol
        )))
    }
}
