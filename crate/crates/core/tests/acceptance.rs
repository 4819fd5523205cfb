//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any fails.
//!
//! `cargo test -p codistill-core --test acceptance -- c4 c5` runs a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use codistill::config::RunConfig;
use codistill::datagen::{generate_corpus, read_corpus, write_corpus, CorpusRecord, NoiseConfig};
use codistill::eval::{bleu4, evaluate_model};
use codistill::hash::fnv1a;
use codistill::losses::{
    cross_entropy_seq, denoising_loss, diversity_loss, kl_seq, LossConfig, Origin, Stream,
};
use codistill::model::{
    greedy_decode, load_checkpoint, save_checkpoint, ImageFeatures, ModelConfig, ModelParams,
    SoftmaxSequence,
};
use codistill::run::{build_samples, run_training, train_joint_vocab};
use codistill::tokenizer::{normalize, Vocab};
use codistill::trainer::{
    codistill_step, stream_update, train_codistill, train_noisy_baseline, warm_start, TrainConfig,
    TrainState,
};
use codistill::{Params, Params32};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

const MIN: u64 = 60;

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: "c1",
        name: "gradient correctness",
        budget: Duration::from_secs(2 * MIN),
        run: c1_gradients,
    },
    Criterion {
        id: "c2",
        name: "loss identities",
        budget: Duration::from_secs(MIN),
        run: c2_loss_identities,
    },
    Criterion {
        id: "c3",
        name: "freeze contract",
        budget: Duration::from_secs(5 * MIN),
        run: c3_freeze,
    },
    Criterion {
        id: "c4",
        name: "coherence discrimination",
        budget: Duration::from_secs(15 * MIN),
        run: c4_auc,
    },
    Criterion {
        id: "c5",
        name: "denoising benefit",
        budget: Duration::from_secs(30 * MIN),
        run: c5_bleu_margin,
    },
    Criterion {
        id: "c6",
        name: "determinism",
        budget: Duration::from_secs(5 * MIN),
        run: c6_determinism,
    },
    Criterion {
        id: "c7",
        name: "round trips",
        budget: Duration::from_secs(2 * MIN),
        run: c7_round_trips,
    },
    Criterion {
        id: "c8",
        name: "greedy decode oracle",
        budget: Duration::from_secs(MIN),
        run: c8_decode,
    },
    Criterion {
        id: "c9",
        name: "BLEU oracle",
        budget: Duration::from_secs(MIN),
        run: c9_bleu,
    },
];

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA
        .iter()
        .filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id))
    {
        ran += 1;
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let result = match result {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; over budget {:?}", c.budget)),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {} {:<26} {:>8.1}s  {detail}",
            c.id.to_uppercase(),
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// --- 1 -------------------------------------------------------------------

fn c1_gradients() -> Check {
    let (cfg, vocab) = tiny_setup();
    let student = init(&cfg, 101);
    let teacher = init(&cfg, 202);
    let hashed = hashed(&vocab);
    let fixed = FixedBridge(0.35);
    let lc = LossConfig::default();
    let max_len = 6;
    let noisy = tiny_sample(&vocab, Origin::Noisy, "abc cab", 0.3);
    let clean = tiny_sample(&vocab, Origin::Clean, "bca abc", 0.9);

    let mut worst = (String::new(), 0.0f64);
    let mut ws = Vec::new();
    let bridges: [&dyn codistill::bridge::SemanticBridge; 2] = [&hashed, &fixed];
    for (stream, bridge) in [Stream::Denoise, Stream::Diversity]
        .into_iter()
        .flat_map(|s| bridges.map(|b| (s, b)))
    {
        let eval = |p: &Params| match stream {
            Stream::Denoise => {
                denoising_loss(p, &teacher, &noisy, bridge, &vocab, max_len, &lc).unwrap()
            }
            Stream::Diversity => {
                diversity_loss(p, &student, &clean, bridge, &vocab, max_len, &lc).unwrap()
            }
        };
        let trainable = match stream {
            Stream::Denoise => &student,
            Stream::Diversity => &teacher,
        };
        let out = eval(trainable);
        ws.push(out.report.w.value());
        for (name, rel) in gradient_check(trainable, &out.grads, 1e-4, |p| eval(p).report.total) {
            if rel > worst.1 {
                worst = (format!("{}:{name}", stream.name()), rel);
            }
        }
    }
    ensure!(
        ws.iter().all(|w| *w > 0.0 && *w < 1.0),
        "both terms must be active, w = {ws:?}"
    );
    ensure!(
        worst.1 < 1e-4,
        "max relative error {:.3e} at {}",
        worst.1,
        worst.0
    );
    Ok(format!(
        "max rel err {:.2e} ({}), w = {ws:.3?}",
        worst.1, worst.0
    ))
}

// --- 2 -------------------------------------------------------------------

fn random_softmax(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> SoftmaxSequence<f64> {
    let scale = rng.random_range(0.1..10.0);
    let logits: Vec<f64> = (0..len * vocab)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    SoftmaxSequence::from_logits(&logits, vocab, 1.0)
}

fn c2_loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..6);
        let v = rng.random_range(2..40);
        let p = random_softmax(&mut rng, len, v);
        let q = random_softmax(&mut rng, len, v);
        min_kl = min_kl.min(kl_seq(&p, &q).unwrap());
        max_self = max_self.max(kl_seq(&p, &p).unwrap().abs());
    }
    ensure!(min_kl >= -1e-12, "kl_seq reached {min_kl:e}");
    ensure!(max_self <= 1e-9, "kl_seq(p,p) reached {max_self:e}");

    let mut max_ce_err = 0.0f64;
    for v in [2usize, 16, 20, 103, 512] {
        let rows = vec![vec![1.0 / v as f64; v]; 5];
        let s = SoftmaxSequence::from_rows(&rows).unwrap();
        let targets: Vec<u32> = (0..5).map(|i| 1 + (i * 7 % (v - 1)) as u32).collect();
        max_ce_err =
            max_ce_err.max((cross_entropy_seq(&s, &targets).unwrap() - (v as f64).ln()).abs());
    }
    ensure!(max_ce_err <= 1e-9, "uniform CE off ln V by {max_ce_err:e}");

    let (cfg, vocab) = tiny_setup();
    let (a, b) = (init(&cfg, 1), init(&cfg, 2));
    let noisy = tiny_sample(&vocab, Origin::Noisy, "abc bca", 0.2);
    let clean = tiny_sample(&vocab, Origin::Clean, "cab", 0.6);
    let lc = LossConfig::default();
    for w in [0.0, 1.0] {
        let d = denoising_loss(&a, &b, &noisy, &FixedBridge(w), &vocab, 6, &lc)
            .unwrap()
            .report;
        let v = diversity_loss(&b, &a, &clean, &FixedBridge(w), &vocab, 6, &lc)
            .unwrap()
            .report;
        let (d_single, v_single) = if w == 0.0 {
            (d.kl_term, v.ce_term)
        } else {
            (d.ce_term, v.kl_term)
        };
        ensure!(
            d.total == d_single,
            "denoising total at w={w} is {} not {d_single}",
            d.total
        );
        ensure!(
            v.total == v_single,
            "diversity total at w={w} is {} not {v_single}",
            v.total
        );
    }
    for w in [0.0, 0.3, 0.5, 1.0] {
        let (ce, kl) = (1.7, 0.4);
        ensure!(
            Stream::Denoise.combine(w, ce, kl) == Stream::Diversity.combine(1.0 - w, ce, kl),
            "stream formulas not mirror images at w={w}"
        );
    }
    Ok(format!(
        "min KL {min_kl:.1e}, max |KL(p,p)| {max_self:.1e}, CE err {max_ce_err:.1e}"
    ))
}

// --- 3 -------------------------------------------------------------------

fn small_world(
    n: usize,
    d: usize,
) -> (
    ModelConfig,
    Vocab,
    Vec<codistill::Sample>,
    Vec<codistill::Sample>,
) {
    let clean = generate_corpus(n, &NoiseConfig::clean(0.05), 31).unwrap();
    let noisy = generate_corpus(n, &NoiseConfig::default(), 32).unwrap();
    let vocab = train_joint_vocab(&clean, &noisy, 512).unwrap();
    let mc = ModelConfig {
        embed_dim: d,
        heads: 2,
        ffn_dim: 2 * d,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let cs = build_samples(&clean, &vocab, Origin::Clean, &mc).unwrap();
    let ns = build_samples(&noisy, &vocab, Origin::Noisy, &mc).unwrap();
    (mc, vocab, ns, cs)
}

fn c3_freeze() -> Check {
    let (mc, vocab, ns, cs) = small_world(40, 16);
    let bridge = hashed(&vocab);
    let tc = TrainConfig {
        batch_size: 4,
        optimizer: codistill::optim::AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(init(&mc, 1), init(&mc, 2), ns.len(), cs.len(), 3);
    let mut shadow = state.clone();
    for step in 1..=10u64 {
        let k = step as usize;
        let nb: Vec<_> = (0..4).map(|i| &ns[(4 * k + i) % ns.len()]).collect();
        let cb: Vec<_> = (0..4).map(|i| &cs[(4 * k + i) % cs.len()]).collect();
        let teacher = state.teacher.clone();
        stream_update(
            &mut state,
            Stream::Denoise,
            &nb,
            &bridge,
            &vocab,
            &tc,
            step,
            &mut Vec::new(),
        )
        .unwrap();
        ensure!(
            state.teacher == teacher,
            "teacher moved during denoising sub-step {step}"
        );
        let student = state.student.clone();
        stream_update(
            &mut state,
            Stream::Diversity,
            &cb,
            &bridge,
            &vocab,
            &tc,
            step,
            &mut Vec::new(),
        )
        .unwrap();
        ensure!(
            state.student == student,
            "student moved during diversity sub-step {step}"
        );
        ensure!(
            state.teacher != teacher,
            "teacher never trained at step {step}"
        );
        state.step = step;

        // codistill_step is exactly these two sub-steps.
        codistill_step(&mut shadow, &nb, &cb, &bridge, &vocab, &tc, &mut Vec::new()).unwrap();
        ensure!(
            shadow.student == state.student && shadow.teacher == state.teacher,
            "codistill_step diverged from its sub-steps at step {step}"
        );
    }
    Ok("10 steps, 20 sub-steps bit-identical on the frozen side".into())
}

// --- 4 and 5 ---------------------------------------------------------------

/// Model used for the desk-scale experiments; d = 32 keeps criterion 5
/// within its budget on a single core.
fn experiment_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 2,
        embed_dim: 32,
        heads: 4,
        ffn_dim: 128,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    }
}

struct Experiment {
    noisy: Vec<CorpusRecord>,
    vocab: Vocab,
    model: ModelConfig,
    train: TrainConfig,
    noisy_samples: Vec<codistill::Sample>,
    clean_samples: Vec<codistill::Sample>,
}

fn experiment() -> Experiment {
    let clean = generate_corpus(2000, &NoiseConfig::clean(0.05), 41).unwrap();
    let noisy = generate_corpus(2000, &NoiseConfig::mismatch_only(0.5, 0.05), 42).unwrap();
    let vocab = train_joint_vocab(&clean, &noisy, 512).unwrap();
    let model = experiment_model(&vocab);
    let clean_samples = build_samples(&clean, &vocab, Origin::Clean, &model).unwrap();
    let noisy_samples = build_samples(&noisy, &vocab, Origin::Noisy, &model).unwrap();
    let train = TrainConfig {
        pretrain_steps: 2000,
        steps: 3000,
        ..TrainConfig::default()
    };
    Experiment {
        noisy,
        vocab,
        model,
        train,
        noisy_samples,
        clean_samples,
    }
}

/// Measured on the reference run (seed 0, corpora seeds 41/42/43); the
/// pins sit 0.05 below, never under the stated floors.
const C4_MEASURED_AUC: f64 = 0.9981;
const C4_PIN: f64 = 0.948;
const C5_MEASURED_MARGIN: f64 = 0.0791;
const C5_PIN: f64 = 0.029;

fn c4_auc() -> Check {
    let ex = experiment();
    let teacher = warm_start(&ex.model, &ex.train, &ex.clean_samples, Origin::Clean, 2000)
        .unwrap()
        .params;
    let student = ModelParams::init(&ex.model, 0).unwrap();
    let bridge = hashed(&ex.vocab);
    let lc = LossConfig::default();
    let mut weights = Vec::with_capacity(ex.noisy_samples.len());
    for s in &ex.noisy_samples {
        let out = denoising_loss(
            &student,
            &teacher,
            s,
            &bridge,
            &ex.vocab,
            ex.train.max_decode_len,
            &lc,
        )
        .unwrap();
        weights.push(out.report.w.value());
    }
    let flags: Vec<bool> = ex.noisy.iter().map(|r| r.noisy).collect();
    let auc = codistill::eval::coherence_auc(&weights, &flags).unwrap();
    let mean = |noisy: bool| {
        let ws: Vec<f64> = weights
            .iter()
            .zip(&flags)
            .filter(|(_, f)| **f == noisy)
            .map(|(w, _)| *w)
            .collect();
        ws.iter().sum::<f64>() / ws.len() as f64
    };
    let detail = format!(
        "auc {auc:.4} (pin {C4_PIN}, reference {C4_MEASURED_AUC}); mean w corrupted {:.3} vs clean {:.3}",
        mean(true),
        mean(false)
    );
    ensure!(auc >= C4_PIN.max(0.90), "{detail}");
    ensure!(mean(true) < mean(false), "{detail}");
    Ok(detail)
}

fn c5_bleu_margin() -> Check {
    let ex = experiment();
    let test = generate_corpus(500, &NoiseConfig::clean(0.05), 43).unwrap();
    let bridge = hashed(&ex.vocab);
    let out = train_codistill(
        &ex.train,
        &ex.model,
        &ex.noisy_samples,
        &ex.clean_samples,
        &bridge,
        &ex.vocab,
        None,
    )
    .unwrap();
    let baseline = train_noisy_baseline(&ex.train, &ex.model, &ex.noisy_samples).unwrap();
    let len = ex.train.max_decode_len;
    let bleu = |p: &Params| {
        evaluate_model(p, &test, &bridge, &ex.vocab, len)
            .unwrap()
            .bleu4
    };
    let (student, base) = (bleu(&out.state.student), bleu(&baseline));
    let margin = student - base;
    let detail = format!(
        "student {student:.4} vs baseline {base:.4}, margin {margin:+.4} (pin {C5_PIN}, reference {C5_MEASURED_MARGIN:+.4})"
    );
    ensure!(margin >= C5_PIN.max(0.02), "{detail}");
    Ok(detail)
}

// --- 6 -------------------------------------------------------------------

fn run_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(
        "metrics.csv".to_string(),
        std::fs::read(dir.join("metrics.csv")).unwrap(),
    )];
    let mut ckpts: Vec<_> = std::fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    ckpts.sort();
    for p in ckpts {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        files.push((name, std::fs::read(&p).unwrap()));
    }
    files
}

fn c6_determinism() -> Check {
    let clean = generate_corpus(60, &NoiseConfig::clean(0.05), 61).unwrap();
    let noisy = generate_corpus(60, &NoiseConfig::default(), 62).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.embed_dim = 16;
    cfg.model.heads = 2;
    cfg.model.ffn_dim = 32;
    cfg.train.batch_size = 4;
    cfg.train.pretrain_steps = 10;
    cfg.train.steps = 8;
    cfg.train.checkpoint_every = 4;
    cfg.train.seed = 6;
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_training(&cfg, &clean, &noisy, &a).unwrap();
    run_training(&cfg, &clean, &noisy, &b).unwrap();
    let (fa, fb) = (run_files(&a), run_files(&b));
    ensure!(
        fa.len() == 7,
        "expected metrics + 6 checkpoints, got {}",
        fa.len()
    );
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        ensure!(na == nb && ba == bb, "{na} differs between runs");
    }
    let rows = String::from_utf8_lossy(&fa[0].1).lines().count() - 1;
    ensure!(rows == 16, "expected 16 metrics rows, got {rows}");
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

// --- 7 -------------------------------------------------------------------

fn c7_round_trips() -> Check {
    let records = generate_corpus(1000, &NoiseConfig::clean(0.05), 71).unwrap();
    let caps: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = Vocab::train(&[&caps[..]], 80).unwrap();
    for c in &caps {
        let back = vocab.decode(&vocab.encode(c)).unwrap();
        ensure!(
            back == normalize(c),
            "tokenizer round trip: {c:?} -> {back:?}"
        );
    }
    let vocab_back = Vocab::from_text(&vocab.to_text()).unwrap();
    ensure!(vocab_back == vocab, "vocab serialization round trip");

    let noisy = generate_corpus(300, &NoiseConfig::default(), 72).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&noisy, &path).unwrap();
    let back = read_corpus(&path).unwrap();
    ensure!(back.len() == noisy.len(), "corpus length changed");
    let mut worst = 0.0f64;
    for (a, b) in noisy.iter().zip(&back) {
        ensure!(
            a.id == b.id
                && a.caption == b.caption
                && a.noisy == b.noisy
                && a.noise_ops == b.noise_ops,
            "record {} changed",
            a.id
        );
        ensure!(
            a.features.len() == b.features.len(),
            "record {} region count changed",
            a.id
        );
        for (x, y) in a.features.iter().flatten().zip(b.features.iter().flatten()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-7, "float drift {worst:e}");

    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let p: Params32 = ModelParams::init(&cfg, 7).unwrap();
    let bytes = save_checkpoint(&p);
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    ensure!(
        u64::from_le_bytes(tail.try_into().unwrap()) == fnv1a(body),
        "trailing checksum is not FNV-1a of the preceding bytes"
    );
    let q: Params32 = load_checkpoint(&bytes).unwrap();
    ensure!(q == p, "checkpoint load changed parameters");
    ensure!(
        save_checkpoint(&q) == bytes,
        "checkpoint re-save not bitwise identical"
    );
    Ok(format!(
        "1000 captions, {} records (max drift {worst:.1e}), {} checkpoint bytes",
        noisy.len(),
        bytes.len()
    ))
}

// --- 8 -------------------------------------------------------------------

fn c8_decode() -> Check {
    let p = rigged(&[5, 7, codistill::tokenizer::EOS]);
    let f = ImageFeatures::new(&[vec![0.3, -0.2, 0.9]]).unwrap();
    let seq = greedy_decode(&p, &f, 5).unwrap();
    ensure!(seq == [5, 7], "rigged decode gave {seq:?}");

    let mut tie = rigged(&[]);
    let bias = &mut tie.tensor_mut("out_proj.bias").unwrap().data;
    bias[8] = 2.5;
    bias[6] = 2.5;
    let seq = greedy_decode(&tie, &f, 1).unwrap();
    ensure!(seq == [6], "tie resolved to {seq:?}");
    Ok("[5, 7] forced; tie between 6 and 8 -> 6".into())
}

// --- 9 -------------------------------------------------------------------

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn c9_bleu() -> Check {
    let identity = bleu4(
        &[
            words("a small red circle"),
            words("a large blue star and a medium green heart"),
        ],
        &[
            vec![words("a small red circle")],
            vec![words("a large blue star and a medium green heart")],
        ],
    )
    .unwrap();
    ensure!((identity - 1.0).abs() <= 1e-9, "identity gave {identity}");

    // Add-one on every order: 1/5, 1/4, 1/3, 1/2, brevity penalty 1.
    let hand =
        ((1.0f64 / 5.0).ln() + (1.0f64 / 4.0).ln() + (1.0f64 / 3.0).ln() + (1.0f64 / 2.0).ln())
            / 4.0;
    let hand = hand.exp();
    let zero = bleu4(&[words("p q r s")], &[vec![words("a b c d")]]).unwrap();
    ensure!(
        (zero - hand).abs() <= 1e-9,
        "zero overlap gave {zero}, hand value {hand}"
    );

    let half = bleu4(
        &[words("a large blue star")],
        &[vec![words("a large blue star and a small heart")]],
    )
    .unwrap();
    ensure!(
        (half - (-1.0f64).exp()).abs() <= 1e-9,
        "half length gave {half}"
    );
    Ok(format!("1.0, {zero:.9}, {half:.9}"))
}
