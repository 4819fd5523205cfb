//! Warm-start pretraining and the alternating cooperative-distillation loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::SemanticBridge;
use crate::error::{Error, Result};
use crate::losses::{
    caption_ce, denoising_loss, diversity_loss, LossConfig, Origin, Stream, StreamLossReport,
    StreamSample,
};
use crate::model::{write_checkpoint, Gradients, ModelConfig, ModelParams};
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

const TEACHER_INIT: u64 = 0x7465_6163_6865_7221;
const STUDENT_INIT: u64 = 0x7374_7564_656e_7421;
const CLEAN_ORDER: u64 = 0x636c_6561_6e00_0001;
const NOISY_ORDER: u64 = 0x6e6f_6973_7900_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One denoising then one diversity update per step.
    PerBatch,
    /// A full pass over the noisy corpus, then a full pass over the clean one;
    /// each step is a single update.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Co-distillation steps.
    pub steps: u64,
    /// Warm-start steps for each model on its own corpus.
    pub pretrain_steps: u64,
    pub alternation: Alternation,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub max_decode_len: usize,
    pub warmup_steps: u64,
    /// Fill the `wall_ms` metrics column. Off by default so metrics files
    /// are byte-reproducible.
    pub record_wall_time: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 1000,
            pretrain_steps: 1000,
            alternation: Alternation::PerBatch,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            max_decode_len: 24,
            warmup_steps: 100,
            record_wall_time: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1)
            || !(0.0..1.0).contains(&self.optimizer.beta2)
        {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.loss.temperature.is_nan() || self.loss.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded epoch-wise shuffling over dataset indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Both models, their optimizer moments, the step counter and the batch
/// order state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub student_opt: Adam<T>,
    pub teacher_opt: Adam<T>,
    pub step: u64,
    noisy_order: BatchSampler,
    clean_order: BatchSampler,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        student: ModelParams<T>,
        teacher: ModelParams<T>,
        noisy_len: usize,
        clean_len: usize,
        seed: u64,
    ) -> Self {
        TrainState {
            student_opt: Adam::new(&student),
            teacher_opt: Adam::new(&teacher),
            student,
            teacher,
            step: 0,
            noisy_order: BatchSampler::new(noisy_len, seed ^ NOISY_ORDER),
            clean_order: BatchSampler::new(clean_len, seed ^ CLEAN_ORDER),
        }
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stream: &'static str,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,stream,loss,ce,kl,w_mean,w_min,w_max,wall_ms";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stream,
            self.loss,
            self.ce,
            self.kl,
            self.w_mean,
            self.w_min,
            self.w_max,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleLog {
    pub step: u64,
    pub stream: Stream,
    pub id: String,
    pub noisy: Option<bool>,
    pub report: StreamLossReport,
}

fn lr_for(opt_steps: u64, cfg: &TrainConfig) -> f64 {
    warmup_lr(cfg.optimizer.lr, opt_steps + 1, cfg.warmup_steps)
}

fn mean_ce_grads<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &[StreamSample<T>],
    batch: &[usize],
) -> Result<(f64, Gradients<T>)> {
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    let scale = T::one() / T::from_usize_lossy(batch.len());
    for &i in batch {
        let (l, g) = caption_ce(params, &dataset[i])?;
        loss += l.as_f64();
        grads.add_scaled(&g, scale);
    }
    Ok((loss / batch.len() as f64, grads))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optimizer: Adam<T>,
    /// Mean batch cross-entropy before each update.
    pub losses: Vec<f64>,
}

/// Cross-entropy training of one model on its own corpus.
pub fn pretrain<T: Scalar>(
    model: ModelParams<T>,
    dataset: &[StreamSample<T>],
    config: &TrainConfig,
    steps: u64,
    order_seed: u64,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut params = model;
    let mut opt = Adam::new(&params);
    let mut sampler = BatchSampler::new(dataset.len(), order_seed);
    let mut losses = Vec::with_capacity(steps as usize);
    for k in 1..=steps {
        let batch = sampler.next_batch(config.batch_size);
        let (loss, grads) = mean_ce_grads(&params, dataset, &batch).map_err(|e| match e {
            Error::Diverged => Error::DivergedAt(k),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::DivergedAt(k));
        }
        losses.push(loss);
        let lr = lr_for(opt.steps(), config);
        opt.step(&mut params, &grads, &config.optimizer, lr);
    }
    Ok(PretrainOutcome {
        params,
        optimizer: opt,
        losses,
    })
}

/// Mean stream loss over `batch` and one Adam step on the trainable model.
/// The partner model is only read.
#[allow(clippy::too_many_arguments)]
pub fn stream_update<T: Scalar>(
    state: &mut TrainState<T>,
    stream: Stream,
    batch: &[&StreamSample<T>],
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    config: &TrainConfig,
    step: u64,
    samples: &mut Vec<SampleLog>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let (trainable, frozen, opt) = match stream {
        Stream::Denoise => (&mut state.student, &state.teacher, &mut state.student_opt),
        Stream::Diversity => (&mut state.teacher, &state.student, &mut state.teacher_opt),
    };
    let mut grads = trainable.zero_grads();
    let scale = T::one() / T::from_usize_lossy(batch.len());
    let (mut loss, mut ce, mut kl, mut w_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut w_min, mut w_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for sample in batch {
        let out = match stream {
            Stream::Denoise => denoising_loss(
                trainable,
                frozen,
                sample,
                bridge,
                vocab,
                config.max_decode_len,
                &config.loss,
            ),
            Stream::Diversity => diversity_loss(
                trainable,
                frozen,
                sample,
                bridge,
                vocab,
                config.max_decode_len,
                &config.loss,
            ),
        }
        .map_err(|e| match e {
            Error::Diverged => Error::DivergedAt(step),
            other => other,
        })?;
        let r = &out.report;
        if !r.total.is_finite() {
            return Err(Error::DivergedAt(step));
        }
        loss += r.total;
        ce += r.ce_term;
        kl += r.kl_term;
        let w = r.w.value();
        w_sum += w;
        w_min = w_min.min(w);
        w_max = w_max.max(w);
        grads.add_scaled(&out.grads, scale);
        samples.push(SampleLog {
            step,
            stream,
            id: sample.id.clone(),
            noisy: sample.noisy,
            report: out.report,
        });
    }
    let lr = lr_for(opt.steps(), config);
    opt.step(trainable, &grads, &config.optimizer, lr);
    let n = batch.len() as f64;
    Ok(StepMetrics {
        step,
        stream: stream.name(),
        loss: loss / n,
        ce: ce / n,
        kl: kl / n,
        w_mean: w_sum / n,
        w_min,
        w_max,
        wall_ms: if config.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

/// One alternation: a denoising update of the student against the frozen
/// teacher, then a diversity update of the teacher against the (just
/// updated, now frozen) student.
pub fn codistill_step<T: Scalar>(
    state: &mut TrainState<T>,
    noisy_batch: &[&StreamSample<T>],
    clean_batch: &[&StreamSample<T>],
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    config: &TrainConfig,
    samples: &mut Vec<SampleLog>,
) -> Result<[StepMetrics; 2]> {
    let step = state.step + 1;
    let denoise = stream_update(
        state,
        Stream::Denoise,
        noisy_batch,
        bridge,
        vocab,
        config,
        step,
        samples,
    )?;
    let diversity = stream_update(
        state,
        Stream::Diversity,
        clean_batch,
        bridge,
        vocab,
        config,
        step,
        samples,
    )?;
    state.step = step;
    Ok([denoise, diversity])
}

pub fn teacher_init_seed(seed: u64) -> u64 {
    seed ^ TEACHER_INIT
}

pub fn student_init_seed(seed: u64) -> u64 {
    seed ^ STUDENT_INIT
}

/// Batch-order seed used when warm-starting a model on the given corpus.
pub fn pretrain_order_seed(seed: u64, origin: Origin) -> u64 {
    match origin {
        Origin::Clean => seed ^ CLEAN_ORDER ^ TEACHER_INIT,
        Origin::Noisy => seed ^ NOISY_ORDER ^ STUDENT_INIT,
    }
}

/// Warm start of one model exactly as `train_codistill` does it.
pub fn warm_start<T: Scalar>(
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    dataset: &[StreamSample<T>],
    origin: Origin,
    steps: u64,
) -> Result<PretrainOutcome<T>> {
    let init_seed = match origin {
        Origin::Clean => teacher_init_seed(config.seed),
        Origin::Noisy => student_init_seed(config.seed),
    };
    let params = ModelParams::init(model_cfg, init_seed)?;
    pretrain(
        params,
        dataset,
        config,
        steps,
        pretrain_order_seed(config.seed, origin),
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub warm_student: ModelParams<T>,
    pub warm_teacher: ModelParams<T>,
    pub metrics: Vec<StepMetrics>,
    pub samples: Vec<SampleLog>,
}

fn checkpoint_paths(dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("student_{step}.ckpt")),
        dir.join(format!("teacher_{step}.ckpt")),
    )
}

fn save_pair<T: Scalar>(dir: &Path, step: u64, state: &TrainState<T>) -> Result<()> {
    let (s, t) = checkpoint_paths(dir, step);
    write_checkpoint(&state.student, &s)?;
    write_checkpoint(&state.teacher, &t)
}

/// Warm start both models, then run `config.steps` co-distillation steps.
///
/// With `run_dir`, checkpoints go to `run_dir/checkpoints/` (warm start as
/// step 0, every `checkpoint_every` steps and at the end) and metrics to
/// `run_dir/metrics.csv`.
pub fn train_codistill<T: Scalar>(
    config: &TrainConfig,
    model_cfg: &ModelConfig,
    noisy: &[StreamSample<T>],
    clean: &[StreamSample<T>],
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if noisy.is_empty() || clean.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let teacher = warm_start(
        model_cfg,
        config,
        clean,
        Origin::Clean,
        config.pretrain_steps,
    )?;
    let student = warm_start(
        model_cfg,
        config,
        noisy,
        Origin::Noisy,
        config.pretrain_steps,
    )?;
    let warm_student = student.params.clone();
    let warm_teacher = teacher.params.clone();
    let mut state = TrainState::new(
        student.params,
        teacher.params,
        noisy.len(),
        clean.len(),
        config.seed,
    );
    state.student_opt = student.optimizer;
    state.teacher_opt = teacher.optimizer;

    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    let mut csv = match run_dir {
        Some(dir) => {
            let dir_ckpt = ckpt_dir.as_deref().expect("set with run_dir");
            fs::create_dir_all(dir_ckpt).map_err(|e| Error::io(dir_ckpt, e))?;
            let path = dir.join("metrics.csv");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    if let Some(dir) = &ckpt_dir {
        save_pair(dir, 0, &state)?;
    }

    let noisy_epoch = noisy.len().div_ceil(config.batch_size) as u64;
    let clean_epoch = clean.len().div_ceil(config.batch_size) as u64;
    let mut metrics = Vec::new();
    let mut samples = Vec::new();
    for _ in 0..config.steps {
        let rows: Vec<StepMetrics> = match config.alternation {
            Alternation::PerBatch => {
                let nb = state.noisy_order.next_batch(config.batch_size);
                let cb = state.clean_order.next_batch(config.batch_size);
                let nb: Vec<&StreamSample<T>> = nb.iter().map(|&i| &noisy[i]).collect();
                let cb: Vec<&StreamSample<T>> = cb.iter().map(|&i| &clean[i]).collect();
                codistill_step(&mut state, &nb, &cb, bridge, vocab, config, &mut samples)?.to_vec()
            }
            Alternation::PerEpoch => {
                let step = state.step + 1;
                let phase = state.step % (noisy_epoch + clean_epoch);
                let row = if phase < noisy_epoch {
                    let b = state.noisy_order.next_batch(config.batch_size);
                    let b: Vec<&StreamSample<T>> = b.iter().map(|&i| &noisy[i]).collect();
                    stream_update(
                        &mut state,
                        Stream::Denoise,
                        &b,
                        bridge,
                        vocab,
                        config,
                        step,
                        &mut samples,
                    )?
                } else {
                    let b = state.clean_order.next_batch(config.batch_size);
                    let b: Vec<&StreamSample<T>> = b.iter().map(|&i| &clean[i]).collect();
                    stream_update(
                        &mut state,
                        Stream::Diversity,
                        &b,
                        bridge,
                        vocab,
                        config,
                        step,
                        &mut samples,
                    )?
                };
                state.step = step;
                vec![row]
            }
        };
        if let Some((w, path)) = csv.as_mut() {
            for r in &rows {
                writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.extend(rows);
        if let Some(dir) = &ckpt_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_pair(dir, state.step, &state)?;
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        if state.step > 0
            && (config.checkpoint_every == 0 || state.step % config.checkpoint_every != 0)
        {
            save_pair(dir, state.step, &state)?;
        }
    }
    Ok(TrainOutcome {
        state,
        warm_student,
        warm_teacher,
        metrics,
        samples,
    })
}

/// CE-only student on the noisy corpus with the same initialization, batch
/// order and total update count as the co-distilled student.
pub fn train_noisy_baseline<T: Scalar>(
    config: &TrainConfig,
    model_cfg: &ModelConfig,
    noisy: &[StreamSample<T>],
) -> Result<ModelParams<T>> {
    config.validate()?;
    let steps = config.pretrain_steps + config.steps;
    Ok(warm_start(model_cfg, config, noisy, Origin::Noisy, steps)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 1);
        let mut seen: Vec<usize> = s.next_batch(3);
        seen.extend(s.next_batch(2));
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let a = BatchSampler::new(10, 7).next_batch(10);
        let b = BatchSampler::new(10, 7).next_batch(10);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_row_shape() {
        let m = StepMetrics {
            step: 3,
            stream: "denoise",
            loss: 1.5,
            ce: 2.0,
            kl: 0.5,
            w_mean: 0.75,
            w_min: 0.5,
            w_max: 1.0,
            wall_ms: 0,
        };
        assert_eq!(m.csv_row(), "3,denoise,1.5,2,0.5,0.75,0.5,1,0");
        assert_eq!(
            METRICS_HEADER.split(',').count(),
            m.csv_row().split(',').count()
        );
    }
}
