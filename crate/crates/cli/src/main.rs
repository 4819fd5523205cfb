//! `codistill` command-line entry point: datagen, train, eval, caption.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use codistill::bridge::BridgeKind;
use codistill::config::RunConfig;
use codistill::datagen::{generate_corpus, read_corpus, write_corpus, CorpusRecord, NoiseConfig};
use codistill::eval::evaluate_model;
use codistill::hash::fnv1a_seeded;
use codistill::model::{greedy_decode, read_checkpoint, ImageFeatures};
use codistill::run::{corpus_hash, run_training};
use codistill::tokenizer::Vocab;
use codistill::trainer::Alternation;
use codistill::{Error, Params};

#[derive(Parser)]
#[command(
    name = "codistill",
    version,
    about = "Cooperative distillation for captioning with noisy labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write clean, noisy and test corpora plus a split manifest.
    Datagen(DatagenArgs),
    /// Train the joint vocabulary, warm-start both models and co-distill.
    Train(TrainArgs),
    /// Evaluate a checkpoint: BLEU-4 against clean templates and coherence AUC.
    Eval(EvalArgs),
    /// Print ground truth and greedy captions for corpus records.
    Caption(CaptionArgs),
}

fn probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err("must lie in [0, 1]".into())
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite and non-negative".into())
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite and positive".into())
    }
}

#[derive(Args)]
struct DatagenArgs {
    /// Records in each of the clean and noisy training corpora.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Records in the test corpus.
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    test_n: u64,
    #[arg(long, env = "CODIST_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON config; its `noise` section supplies defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probability of replacing a caption with another scene's [default: 0.3]
    #[arg(long, value_parser = probability)]
    p_mismatch: Option<f64>,
    /// Per-word deletion probability [default: 0.1]
    #[arg(long, value_parser = probability)]
    p_delete: Option<f64>,
    /// Probability of shuffling word order [default: 0.1]
    #[arg(long, value_parser = probability)]
    p_shuffle: Option<f64>,
    /// Probability of inserting a random word [default: 0.1]
    #[arg(long, value_parser = probability)]
    p_insert: Option<f64>,
    /// Standard deviation of Gaussian feature jitter [default: 0.05]
    #[arg(long, value_parser = non_negative)]
    sigma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlternationArg {
    PerBatch,
    PerEpoch,
}

#[derive(Clone, Copy, ValueEnum)]
enum BridgeArg {
    Hashed,
    Remote,
}

/// Bridge settings shared by `train` and `eval`.
#[derive(Args)]
struct BridgeArgs {
    /// Caption embedder [default: hashed]
    #[arg(long, value_enum)]
    bridge: Option<BridgeArg>,
    /// Embedding dimension [default: 256]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    bridge_dim: Option<u64>,
    /// Base URL of a remote embedding service (POST {url}/embed).
    #[arg(long)]
    bridge_endpoint: Option<String>,
    /// Remote request timeout in milliseconds [default: 10000]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    bridge_timeout_ms: Option<u64>,
}

impl BridgeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(b) = self.bridge {
            cfg.bridge.kind = match b {
                BridgeArg::Hashed => BridgeKind::Hashed,
                BridgeArg::Remote => BridgeKind::Remote,
            };
        }
        if let Some(d) = self.bridge_dim {
            cfg.bridge.dim = d as usize;
        }
        if let Some(e) = &self.bridge_endpoint {
            cfg.bridge.endpoint = Some(e.clone());
        }
        if let Some(t) = self.bridge_timeout_ms {
            cfg.bridge.timeout_ms = t;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Clean (teacher) corpus, JSON Lines.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Noisy (student) corpus, JSON Lines.
    #[arg(long)]
    noisy: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config overlaid on the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file [default: 0]
    #[arg(long, env = "CODIST_SEED")]
    seed: Option<u64>,
    /// Co-distillation steps [default: 1000]
    #[arg(long)]
    steps: Option<u64>,
    /// Warm-start steps for each model [default: 1000]
    #[arg(long)]
    pretrain_steps: Option<u64>,
    /// [default: 16]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long, value_parser = positive_f64)]
    lr: Option<f64>,
    /// Linear warmup length in optimizer steps [default: 100]
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// [default: per-batch]
    #[arg(long, value_enum)]
    alternation: Option<AlternationArg>,
    /// Checkpoint interval in steps; 0 keeps only the first and last [default: 500]
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Greedy decode cap for coherence weights [default: 24]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_decode_len: Option<u64>,
    /// Target joint vocabulary size [default: 512]
    #[arg(long)]
    vocab_size: Option<u64>,
    /// Encoder and decoder layers [default: 2]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    layers: Option<u64>,
    /// [default: 64]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    embed_dim: Option<u64>,
    /// [default: 4]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    heads: Option<u64>,
    /// [default: 256]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    ffn_dim: Option<u64>,
    /// Distillation temperature [default: 1]
    #[arg(long, value_parser = positive_f64)]
    temperature: Option<f64>,
    /// Record per-step wall time in metrics.csv (breaks byte reproducibility).
    #[arg(long)]
    wall_time: bool,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory: supplies config.json, vocab.txt, the latest student
    /// checkpoint and eval/ as the report location.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Test corpus, JSON Lines.
    #[arg(long)]
    test: PathBuf,
    /// Report path; defaults to <run>/eval/<checkpoint>.json with --run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 24]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_decode_len: Option<u64>,
    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Args)]
struct CaptionArgs {
    /// Run directory supplying vocab.txt and the latest student checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Corpus whose features are captioned, JSON Lines.
    #[arg(long)]
    features: PathBuf,
    /// Records to caption, from the start of the corpus.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// [default: 24]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_decode_len: Option<u64>,
}

/// Exit 2: the invocation or configuration is invalid. Exit 1: anything
/// that fails while running.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Caption(a) => caption(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) if !p.exists() => Err(Failure::Runtime(anyhow::anyhow!(
            "config file not found: {}",
            p.display()
        ))),
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

/// Independent generator seed for each split.
fn split_seed(seed: u64, split: &str) -> u64 {
    fnv1a_seeded(seed, split.as_bytes())
}

fn datagen(a: DatagenArgs) -> CmdResult {
    let mut noise = load_config(a.config.as_deref())?.noise;
    for (flag, dst) in [
        (a.p_mismatch, &mut noise.p_mismatch),
        (a.p_delete, &mut noise.p_delete),
        (a.p_shuffle, &mut noise.p_shuffle),
        (a.p_insert, &mut noise.p_insert),
        (a.sigma, &mut noise.sigma_feature),
    ] {
        if let Some(v) = flag {
            *dst = v;
        }
    }
    noise.validate()?;

    let clean_noise = NoiseConfig::clean(noise.sigma_feature);
    let splits: [(&str, u64, &NoiseConfig); 3] = [
        ("clean", a.n, &clean_noise),
        ("noisy", a.n, &noise),
        ("test", a.test_n, &noise),
    ];
    let mut corpora = Vec::new();
    for (name, n, cfg) in splits {
        let seed = split_seed(a.seed, name);
        corpora.push((name, seed, generate_corpus(n as usize, cfg, seed)?));
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = serde_json::Map::new();
    for (name, seed, records) in &corpora {
        let file = format!("{name}.jsonl");
        write_corpus(records, &a.out.join(&file))?;
        files.insert(
            name.to_string(),
            serde_json::json!({
                "file": file,
                "seed": seed,
                "records": records.len(),
                "noisy_records": records.iter().filter(|r| r.noisy).count(),
                "hash": format!("{:016x}", corpus_hash(records)?),
            }),
        );
    }
    let manifest = serde_json::json!({
        "seed": a.seed,
        "noise": noise,
        "splits": files,
    });
    let path = a.out.join("split.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)? + "\n",
    )
    .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} clean, {} noisy, {} test records to {}",
        a.n,
        a.n,
        a.test_n,
        a.out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.pretrain_steps {
        t.pretrain_steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v as usize;
    }
    if let Some(v) = a.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = a.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = a.alternation {
        t.alternation = match v {
            AlternationArg::PerBatch => Alternation::PerBatch,
            AlternationArg::PerEpoch => Alternation::PerEpoch,
        };
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.max_decode_len {
        t.max_decode_len = v as usize;
    }
    if let Some(v) = a.temperature {
        t.loss.temperature = v;
    }
    if a.wall_time {
        t.record_wall_time = true;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.layers {
        m.layers = v as usize;
    }
    if let Some(v) = a.embed_dim {
        m.embed_dim = v as usize;
    }
    if let Some(v) = a.heads {
        m.heads = v as usize;
    }
    if let Some(v) = a.ffn_dim {
        m.ffn_dim = v as usize;
    }
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v as usize;
    }
    a.bridge.apply(&mut cfg);
    if let Some(p) = &a.clean {
        cfg.paths.clean = Some(p.clone());
    }
    if let Some(p) = &a.noisy {
        cfg.paths.noisy = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.paths.out = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("{flag} is required (flag or config paths)")))
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    let clean_path = required(&cfg.paths.clean, "--clean")?;
    let noisy_path = required(&cfg.paths.noisy, "--noisy")?;
    let out = required(&cfg.paths.out, "--out")?;
    require_file(clean_path, "clean corpus")?;
    require_file(noisy_path, "noisy corpus")?;
    if out.exists() && !out.is_dir() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "output path is not a directory: {}",
            out.display()
        )));
    }
    let clean = read_corpus(clean_path)?;
    let noisy = read_corpus(noisy_path)?;

    let outcome = run_training(&cfg, &clean, &noisy, out)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} {} loss={:.6} w_mean={:.4}",
            last.step, last.stream, last.loss, last.w_mean
        );
    }
    println!("run written to {}", out.display());
    Ok(())
}

/// `student_{k}.ckpt` with the largest `k`.
fn latest_student(run: &Path) -> Result<PathBuf, Failure> {
    let dir = run.join("checkpoints");
    let entries = fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries {
        let path = e
            .with_context(|| format!("reading {}", dir.display()))?
            .path();
        let step = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("student_")?
                .strip_suffix(".ckpt")?
                .parse::<u64>()
                .ok()
        });
        if let Some(k) = step {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Failure::Runtime(anyhow::anyhow!(
            "no student checkpoint in {}",
            dir.display()
        ))
    })
}

/// Checkpoint and vocabulary paths from explicit flags or a run directory.
fn model_paths(
    run: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
) -> Result<(PathBuf, PathBuf), Failure> {
    let checkpoint = match (checkpoint, run) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => latest_student(r)?,
        (None, None) => return Err(Failure::Usage("--checkpoint or --run is required".into())),
    };
    let vocab = match (vocab, run) {
        (Some(v), _) => v.clone(),
        (None, Some(r)) => r.join("vocab.txt"),
        (None, None) => return Err(Failure::Usage("--vocab or --run is required".into())),
    };
    require_file(&checkpoint, "checkpoint")?;
    require_file(&vocab, "vocabulary")?;
    Ok((checkpoint, vocab))
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(Params, Vocab), Failure> {
    let text = fs::read_to_string(vocab).with_context(|| format!("reading {}", vocab.display()))?;
    let vocab = Vocab::from_text(&text)?;
    let params: Params = read_checkpoint(checkpoint)?;
    if params.config().vocab_size != vocab.len() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "checkpoint expects {} tokens but the vocabulary has {}",
            params.config().vocab_size,
            vocab.len()
        )));
    }
    Ok((params, vocab))
}

fn decode_len(flag: Option<u64>, cfg: &RunConfig, params: &Params) -> Result<usize, Failure> {
    let len = flag.map(|v| v as usize).unwrap_or(cfg.train.max_decode_len);
    let cap = params.config().max_positions - 1;
    if len > cap {
        return Err(Failure::Usage(format!(
            "--max-decode-len {len} exceeds the model limit {cap}"
        )));
    }
    Ok(len)
}

fn eval(a: EvalArgs) -> CmdResult {
    let mut cfg = match &a.run {
        Some(r) if r.join("config.json").is_file() => load_config(Some(&r.join("config.json")))?,
        _ => RunConfig::default(),
    };
    a.bridge.apply(&mut cfg);
    cfg.bridge.validate()?;
    let (ckpt, vocab_path) = model_paths(&a.run, &a.checkpoint, &a.vocab)?;
    require_file(&a.test, "test corpus")?;
    let out = match (&a.out, &a.run) {
        (Some(o), _) => Some(o.clone()),
        (None, Some(r)) => {
            let stem = ckpt
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report");
            Some(r.join("eval").join(format!("{stem}.json")))
        }
        (None, None) => None,
    };

    let (params, vocab) = load_model(&ckpt, &vocab_path)?;
    let max_len = decode_len(a.max_decode_len, &cfg, &params)?;
    let test = read_corpus(&a.test)?;
    let vocab = Arc::new(vocab);
    let bridge = cfg.bridge.build(Arc::clone(&vocab))?;
    let report = evaluate_model(&params, &test, bridge.as_ref(), &vocab, max_len)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn caption(a: CaptionArgs) -> CmdResult {
    let (ckpt, vocab_path) = model_paths(&a.run, &a.checkpoint, &a.vocab)?;
    require_file(&a.features, "corpus")?;
    let (params, vocab) = load_model(&ckpt, &vocab_path)?;
    let max_len = decode_len(a.max_decode_len, &RunConfig::default(), &params)?;
    let records: Vec<CorpusRecord> = read_corpus(&a.features)?;
    println!("id\tground_truth\tcaption");
    for rec in records.iter().take(a.count) {
        let features =
            ImageFeatures::new(&rec.features).with_context(|| format!("record {}", rec.id))?;
        let ids = greedy_decode(&params, &features, max_len)
            .with_context(|| format!("record {}", rec.id))?;
        println!("{}\t{}\t{}", rec.id, rec.caption, vocab.decode(&ids)?);
    }
    Ok(())
}
