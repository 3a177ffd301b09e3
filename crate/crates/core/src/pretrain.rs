//! Stage 1: policy pretraining against the frozen surrogate.
//!
//! Each sampled sequence is scored one feature at a time: when a segment is
//! closed by EOS or STOP it is materialized, appended to a working copy of the
//! dataset, and the surrogate loss `L` of that working set is measured on the
//! train split. Sampling is not differentiable, so the policy is updated with
//! a score-function objective `J = Σ (L - b) · Σ log π(segment tokens)` where
//! `b` is an exponential moving average of `L`. The working set resets for
//! every sequence.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{Split, TabularDataset};
use crate::evaluators::{EvalError, Surrogate};
use crate::nn::{Adam, Ctx, Gradients, Graph, NnError, Tensor};
use crate::policy::{EncoderInput, PolicyError, PolicyModel, SampledSequence};
use crate::seed;
use crate::transform::{apply_program, FeatureProgram, Token};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("aborted after {0} consecutive non-finite losses")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, PretrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub sequences_per_epoch: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub baseline_decay: f64,
    pub patience: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Sequences sampled (with a fixed seed) to measure validation loss.
    pub val_sequences: usize,
    /// Cap on generated columns in a working set.
    pub cap: usize,
}

impl PretrainConfig {
    pub fn with_cap(cap: usize) -> Self {
        PretrainConfig {
            epochs: 30,
            sequences_per_epoch: 16,
            temperature_start: 1.0,
            temperature_end: 0.1,
            baseline_decay: 0.9,
            patience: 10,
            lr: 1e-4,
            grad_clip: 1.0,
            val_sequences: 8,
            cap,
        }
    }

    /// Linear anneal from start to end over the epochs.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temperature_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.temperature_start + (self.temperature_end - self.temperature_start) * f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    /// Mean train-split surrogate loss over the epoch's scored features.
    pub train_loss: f64,
    pub val_loss: f64,
    pub temperature: f64,
    pub best_val_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

impl PretrainRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} train_loss={:.6} val_loss={:.6} T={:.4} best={:.6}",
            self.epoch, self.train_loss, self.val_loss, self.temperature, self.best_val_loss
        )
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub records: Vec<PretrainRecord>,
    /// Serialized best-validation policy (already loaded into the policy).
    pub best_checkpoint: Vec<u8>,
    pub best_val_loss: f64,
    pub skipped_updates: usize,
}

/// Per-feature losses of one sequence: `(first token, last token, L)` with
/// token positions inclusive of the terminator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss {
    pub start: usize,
    pub end: usize,
    pub loss: f64,
}

/// Materializes the segments of `tokens` one by one into a working copy of
/// `dataset` and measures the surrogate loss on `split` after each.
pub fn feature_losses(
    tokens: &[Token],
    dataset: &TabularDataset,
    surrogate: &Surrogate,
    split: Split,
    cap: usize,
) -> Result<Vec<FeatureLoss>> {
    let mut out = Vec::new();
    let mut segments: Vec<Vec<Token>> = Vec::new();
    let mut start = 0;
    let mut current: Vec<Token> = Vec::new();
    for (pos, &t) in tokens.iter().enumerate() {
        match t {
            Token::Eos | Token::Stop => {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                    let program = FeatureProgram::from_segments(segments.clone());
                    let working = apply_program(&program, dataset, cap).dataset;
                    let loss = surrogate.loss(&working, split)?;
                    out.push(FeatureLoss { start, end: pos, loss });
                }
                start = pos + 1;
            }
            _ => current.push(t),
        }
    }
    Ok(out)
}

/// Surrogate loss on `split` of the full program's augmented dataset.
fn program_loss(tokens: &[Token], dataset: &TabularDataset, surrogate: &Surrogate, split: Split, cap: usize) -> Result<f64> {
    let program = FeatureProgram::from_tokens(tokens);
    let aug = apply_program(&program, dataset, cap);
    Ok(surrogate.loss(&aug.dataset, split)?)
}

/// Mean validation-split surrogate loss over `n` sequences sampled at
/// `temperature` with a fixed seed; reproducible for given parameters.
pub fn validation_loss(
    policy: &PolicyModel,
    input: &EncoderInput,
    surrogate: &Surrogate,
    dataset: &TabularDataset,
    temperature: f64,
    n: usize,
    cap: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n.max(1) {
        let s = policy.sample(input, temperature, &mut rng)?;
        total += program_loss(s.sequence.tokens(), dataset, surrogate, Split::Val, cap)?;
    }
    Ok(total / n.max(1) as f64)
}

/// Per-token weights of one sequence: every token of a feature, its
/// terminator included, carries that feature's `L - b`. The baseline is
/// updated after each feature.
pub fn token_weights(len: usize, feats: &[FeatureLoss], baseline: &mut f64, decay: f64) -> Vec<f64> {
    let mut weights = vec![0.0; len];
    for f in feats {
        let advantage = f.loss - *baseline;
        weights[f.start..=f.end].iter_mut().for_each(|w| *w = advantage);
        *baseline = decay * *baseline + (1.0 - decay) * f.loss;
    }
    weights
}

/// Gradient of `J = Σ_t weights[t] · log π(token_t)` for one sampled
/// sequence; `None` if the objective or gradient is not finite.
pub fn score_function_gradient(
    policy: &PolicyModel,
    input: &EncoderInput,
    sample: &SampledSequence,
    weights: &[f64],
    ctx: &mut Ctx,
) -> Result<Option<Gradients>> {
    let mut g = Graph::new();
    let z = policy.encode(&mut g, input, ctx)?;
    let scored = policy.score(&mut g, z, sample.sequence.tokens(), sample.temperature, ctx)?;
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let weighted = g.mul(scored.log_probs, w)?;
    let j = g.sum(weighted);
    if !g.value(j).item().is_finite() {
        return Ok(None);
    }
    let mut grads = Gradients::zeros_like(&policy.store);
    g.backward(j, &mut grads)?;
    Ok(grads.is_finite().then_some(grads))
}

fn update(
    policy: &mut PolicyModel,
    adam: &mut Adam,
    input: &EncoderInput,
    sample: &SampledSequence,
    weights: &[f64],
    config: &PretrainConfig,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let mut ctx = Ctx::train(policy.config.dropout, rng);
    let Some(mut grads) = score_function_gradient(policy, input, sample, weights, &mut ctx)? else {
        return Ok(false);
    };
    grads.clip_norm(config.grad_clip);
    adam.step(&mut policy.store, &grads)?;
    Ok(true)
}

/// Runs stage 1 and leaves the best-validation parameters in `policy`.
/// `on_epoch` receives every record as it is produced.
pub fn pretrain(
    policy: &mut PolicyModel,
    surrogate: &Surrogate,
    dataset: &TabularDataset,
    config: &PretrainConfig,
    master_seed: u64,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&PretrainRecord),
) -> Result<PretrainOutcome> {
    let input = policy.encoder_input(dataset)?;
    let mut adam = Adam::new(&policy.store, config.lr);
    let mut sample_rng = seed::rng(master_seed, "pretrain.sample");
    let mut dropout_rng = seed::rng(master_seed, "pretrain.dropout");
    let val_seed = seed::derive(master_seed, "pretrain.val");

    let mut baseline = surrogate.loss(dataset, Split::Train)?;
    let mut best_val = f64::INFINITY;
    let mut best_bytes = policy.to_bytes(None)?;
    let mut records = Vec::new();
    let mut since_best = 0;
    let mut nonfinite_run = 0;
    let mut skipped = 0;

    for epoch in 0..config.epochs {
        let temperature = config.temperature(epoch);
        let mut losses = Vec::new();
        for _ in 0..config.sequences_per_epoch {
            let sample = policy.sample(&input, temperature, &mut sample_rng)?;
            let feats = feature_losses(sample.sequence.tokens(), dataset, surrogate, Split::Train, config.cap)?;
            if feats.is_empty() {
                continue;
            }
            if feats.iter().any(|f| !f.loss.is_finite()) {
                skipped += 1;
                nonfinite_run += 1;
                log::warn!("non-finite surrogate loss in epoch {epoch}; update skipped");
                if nonfinite_run >= 3 {
                    return Err(PretrainError::NonFinite(nonfinite_run));
                }
                continue;
            }
            let weights = token_weights(sample.token_ids.len(), &feats, &mut baseline, config.baseline_decay);
            losses.extend(feats.iter().map(|f| f.loss));
            if update(policy, &mut adam, &input, &sample, &weights, config, &mut dropout_rng)? {
                nonfinite_run = 0;
            } else {
                skipped += 1;
                nonfinite_run += 1;
                log::warn!("non-finite policy objective in epoch {epoch}; update skipped");
                if nonfinite_run >= 3 {
                    return Err(PretrainError::NonFinite(nonfinite_run));
                }
            }
        }
        let val_loss = validation_loss(
            policy,
            &input,
            surrogate,
            dataset,
            temperature,
            config.val_sequences,
            config.cap,
            val_seed,
        )?;
        let mut checkpoint = None;
        if val_loss < best_val {
            best_val = val_loss;
            since_best = 0;
            best_bytes = policy.to_bytes(None)?;
            if let Some(dir) = checkpoint_dir {
                let path = dir.join("pretrain_best.ckpt");
                std::fs::write(&path, &best_bytes).map_err(NnError::from)?;
                checkpoint = Some(path);
            }
        } else {
            since_best += 1;
        }
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let record = PretrainRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            temperature,
            best_val_loss: best_val,
            checkpoint,
        };
        on_epoch(&record);
        records.push(record);
        if since_best >= config.patience {
            log::info!("pretraining stopped early after epoch {}", epoch + 1);
            break;
        }
    }
    policy.load_bytes(&best_bytes)?;
    Ok(PretrainOutcome {
        records,
        best_checkpoint: best_bytes,
        best_val_loss: best_val,
        skipped_updates: skipped,
    })
}
