//! Stage 2: PPO fine-tuning on downstream metric improvements.
//!
//! A trajectory is one whole program sampled at T = 1. Its terminal reward is
//! the change in the validation metric of a fresh downstream model when the
//! program's features are added. Advantages are batch-normalized rewards
//! broadcast to every token; there is no value network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Split, TabularDataset};
use crate::evaluators::{evaluate_downstream, metric_delta, DownstreamConfig, EvalError, Metric, MetricReport, ModelKind};
use crate::nn::{Adam, Ctx, Gradients, Graph, NnError, Tensor, Var};
use crate::policy::{EncoderInput, PolicyError, PolicyModel, SampledSequence};
use crate::seed;
use crate::transform::{apply_program, FeatureProgram};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub iterations: usize,
    pub trajectories: usize,
    pub epochs: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub normalize_advantages: bool,
    pub temperature: f64,
    pub cap: usize,
}

impl PpoConfig {
    pub fn with_cap(cap: usize) -> Self {
        PpoConfig {
            iterations: 10,
            trajectories: 8,
            epochs: 4,
            clip: 0.2,
            entropy_coef: 1e-4,
            lr: 1e-4,
            grad_clip: 1.0,
            normalize_advantages: true,
            temperature: 1.0,
            cap,
        }
    }
}

/// Everything needed to turn a program into a reward. The base metric is
/// computed once and reused by every rollout.
#[derive(Debug, Clone)]
pub struct RewardContext<'a> {
    pub dataset: &'a TabularDataset,
    pub model: ModelKind,
    pub metric: Metric,
    pub downstream: DownstreamConfig,
    pub downstream_seed: u64,
    pub cap: usize,
    pub base: MetricReport,
}

impl<'a> RewardContext<'a> {
    pub fn new(
        dataset: &'a TabularDataset,
        model: ModelKind,
        metric: Metric,
        downstream: DownstreamConfig,
        downstream_seed: u64,
        cap: usize,
    ) -> Result<Self> {
        let base = evaluate_downstream(model, dataset, Split::Val, &downstream, downstream_seed)?;
        Ok(RewardContext {
            dataset,
            model,
            metric,
            downstream,
            downstream_seed,
            cap,
            base,
        })
    }

    /// Validation report of the augmented dataset and its metric delta.
    pub fn reward(&self, program: &FeatureProgram) -> Result<(f64, MetricReport)> {
        if program.is_empty() {
            return Ok((0.0, self.base.clone()));
        }
        let aug = apply_program(program, self.dataset, self.cap);
        if aug.generated.is_empty() {
            return Ok((0.0, self.base.clone()));
        }
        let report = evaluate_downstream(self.model, &aug.dataset, Split::Val, &self.downstream, self.downstream_seed)?;
        Ok((metric_delta(&report, &self.base, self.metric), report))
    }

    /// Report of `program` on `split`.
    pub fn report(&self, program: &FeatureProgram, split: Split) -> Result<MetricReport> {
        let aug = apply_program(program, self.dataset, self.cap);
        Ok(evaluate_downstream(self.model, &aug.dataset, split, &self.downstream, self.downstream_seed)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample: SampledSequence,
    pub program: FeatureProgram,
    pub reward: f64,
    pub advantage: f64,
    /// Downstream training failed; the reward is a penalty.
    pub failed: bool,
}

impl Trajectory {
    pub fn old_log_probs(&self) -> &[f64] {
        &self.sample.log_probs
    }
}

/// Samples `n` programs on the current (frozen) parameters and scores them.
/// Trajectory `i` uses its own seed, so the batch does not depend on thread
/// scheduling. Failed evaluations get the running minimum reward.
pub fn collect(
    policy: &PolicyModel,
    input: &EncoderInput,
    ctx: &RewardContext,
    n: usize,
    temperature: f64,
    seed: u64,
    running_min: &mut f64,
) -> Result<Vec<Trajectory>> {
    let results: Vec<Result<(SampledSequence, FeatureProgram, Option<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "trajectory", i as u64));
            let sample = policy.sample(input, temperature, &mut rng)?;
            let program = FeatureProgram::from_sequence(&sample.sequence);
            let reward = match ctx.reward(&program) {
                Ok((r, _)) if r.is_finite() => Some(r),
                Ok(_) => None,
                Err(e) => {
                    log::warn!("downstream evaluation failed for `{}`: {e}", sample.sequence);
                    None
                }
            };
            Ok((sample, program, reward))
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for r in results {
        let (sample, program, reward) = r?;
        if let Some(v) = reward {
            *running_min = running_min.min(v);
        }
        pending.push((sample, program, reward));
    }
    for (sample, program, reward) in pending {
        let failed = reward.is_none();
        out.push(Trajectory {
            sample,
            program,
            reward: reward.unwrap_or(*running_min),
            advantage: 0.0,
            failed,
        });
    }
    Ok(out)
}

/// `(r - mean) / (std + 1e-8)`, population std.
pub fn normalized_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

pub fn advantages(trajectories: &mut [Trajectory], normalize: bool) {
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    let adv = if normalize {
        normalized_advantages(&rewards)
    } else {
        rewards
    };
    for (t, a) in trajectories.iter_mut().zip(adv) {
        t.advantage = a;
    }
}

/// Per-token clipped objective `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Sums of the clipped objective and entropy over the included tokens of
/// one trajectory, as graph values, plus bookkeeping.
pub struct ObjectiveParts {
    pub surrogate_sum: Var,
    pub entropy_sum: Var,
    pub tokens: usize,
    pub clipped: usize,
    pub excluded: usize,
}

/// Builds the clipped surrogate for per-token new log-probabilities `new_lp`
/// (shape `[L]`) against `old_lp`. Tokens whose ratio is not finite are
/// excluded.
pub fn objective_parts(
    g: &mut Graph,
    new_lp: Var,
    entropies: Var,
    old_lp: &[f64],
    advantage: &[f64],
    clip: f64,
) -> Result<ObjectiveParts> {
    let len = old_lp.len();
    let new_vals = g.value(new_lp).data().to_vec();
    let mut include = vec![0.0; len];
    let (mut clipped, mut excluded) = (0, 0);
    for i in 0..len {
        let diff = new_vals[i] - old_lp[i];
        if diff.is_finite() && diff.abs() < 50.0 {
            include[i] = 1.0;
            let r = diff.exp();
            if (r - 1.0).abs() > clip {
                clipped += 1;
            }
        } else {
            excluded += 1;
            log::warn!("non-finite probability ratio at token {i}; excluded");
        }
    }
    let old = g.constant(Tensor::vector(old_lp.to_vec()));
    let adv = g.constant(Tensor::vector(advantage.to_vec()));
    let mask = g.constant(Tensor::vector(include));
    let diff = g.sub(new_lp, old)?;
    let diff = g.clamp(diff, -50.0, 50.0);
    let ratio = g.exp(diff);
    let unclipped = g.mul(ratio, adv)?;
    let bounded = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let bounded = g.mul(bounded, adv)?;
    let term = g.minimum(unclipped, bounded)?;
    let term = g.mul(term, mask)?;
    let surrogate_sum = g.sum(term);
    let ent = g.mul(entropies, mask)?;
    let entropy_sum = g.sum(ent);
    Ok(ObjectiveParts {
        surrogate_sum,
        entropy_sum,
        tokens: len - excluded,
        clipped,
        excluded,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    /// Objective (to maximize) of the last epoch, before its step.
    pub objective: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub excluded_tokens: usize,
}

/// Gradient, surrogate sum, entropy sum, tokens, clipped, excluded.
type TrajectoryTerms = (Gradients, f64, f64, usize, usize, usize);

/// `epochs` Adam steps, each over every token of the batch, maximizing the
/// mean clipped objective plus `entropy_coef` times the mean entropy.
pub fn ppo_update(
    policy: &mut PolicyModel,
    adam: &mut Adam,
    input: &EncoderInput,
    trajectories: &[Trajectory],
    config: &PpoConfig,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let total_tokens: usize = trajectories.iter().map(|t| t.sample.token_ids.len()).sum();
    if total_tokens == 0 {
        return Ok(stats);
    }
    for _ in 0..config.epochs {
        let per_traj: Vec<Result<TrajectoryTerms>> = trajectories
            .par_iter()
            .map(|t| {
                let mut g = Graph::new();
                let mut ctx = Ctx::eval();
                let z = policy.encode(&mut g, input, &mut ctx)?;
                let scored = policy.score(&mut g, z, t.sample.sequence.tokens(), t.sample.temperature, &mut ctx)?;
                let adv = vec![t.advantage; t.sample.token_ids.len()];
                let parts = objective_parts(&mut g, scored.log_probs, scored.entropies, t.old_log_probs(), &adv, config.clip)?;
                let ent = g.scale(parts.entropy_sum, config.entropy_coef);
                let obj = g.add(parts.surrogate_sum, ent)?;
                let loss = g.scale(obj, -1.0 / total_tokens as f64);
                let mut grads = Gradients::zeros_like(&policy.store);
                g.backward(loss, &mut grads)?;
                Ok((
                    grads,
                    g.value(parts.surrogate_sum).item(),
                    g.value(parts.entropy_sum).item(),
                    parts.tokens,
                    parts.clipped,
                    parts.excluded,
                ))
            })
            .collect();
        let mut grads = Gradients::zeros_like(&policy.store);
        let (mut sur, mut ent, mut tokens, mut clipped, mut excluded) = (0.0, 0.0, 0, 0, 0);
        for r in per_traj {
            let (g, s, e, t, c, x) = r?;
            grads.add(&g);
            sur += s;
            ent += e;
            tokens += t;
            clipped += c;
            excluded += x;
        }
        let denom = tokens.max(1) as f64;
        stats = UpdateStats {
            objective: (sur + config.entropy_coef * ent) / total_tokens as f64,
            clip_fraction: clipped as f64 / denom,
            entropy: ent / denom,
            excluded_tokens: excluded,
        };
        if !grads.is_finite() {
            log::warn!("non-finite PPO gradient; step skipped");
            continue;
        }
        grads.clip_norm(config.grad_clip);
        adam.step(&mut policy.store, &grads)?;
    }
    Ok(stats)
}

/// Incumbent best program across fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct BestArtifact {
    pub program: FeatureProgram,
    pub val_reward: f64,
    /// Iteration the program was found in; 0 for the initial empty program.
    pub iteration: usize,
    pub test_report: Option<MetricReport>,
}

impl BestArtifact {
    pub fn empty() -> Self {
        BestArtifact {
            program: FeatureProgram::empty(),
            val_reward: 0.0,
            iteration: 0,
            test_report: None,
        }
    }

    /// Replaces the incumbent when `reward` is strictly better.
    pub fn offer(&mut self, program: &FeatureProgram, reward: f64, iteration: usize) -> bool {
        if reward > self.val_reward {
            self.program = program.clone();
            self.val_reward = reward;
            self.iteration = iteration;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub best_reward: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

impl IterationRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter {} mean_r={:.6} max_r={:.6} best_r={:.6} clip_frac={:.4} entropy={:.6}",
            self.iteration, self.mean_reward, self.max_reward, self.best_reward, self.clip_fraction, self.entropy
        )
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub best: BestArtifact,
    pub records: Vec<IterationRecord>,
    pub adam: Adam,
}

/// Runs `config.iterations` rounds of collect, advantage, update. The best
/// artifact's test report is filled in at the end.
pub fn fine_tune(
    policy: &mut PolicyModel,
    ctx: &RewardContext,
    config: &PpoConfig,
    master_seed: u64,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<FineTuneOutcome> {
    let input = policy.encoder_input(ctx.dataset)?;
    let mut adam = Adam::new(&policy.store, config.lr);
    let mut rng = seed::rng(master_seed, "ppo.rollouts");
    let mut best = BestArtifact::empty();
    let mut records = Vec::new();
    let mut running_min = 0.0f64;
    for iteration in 1..=config.iterations {
        let batch_seed: u64 = rng.random();
        let mut trajectories = collect(
            policy,
            &input,
            ctx,
            config.trajectories,
            config.temperature,
            batch_seed,
            &mut running_min,
        )?;
        for t in &trajectories {
            if !t.failed {
                best.offer(&t.program, t.reward, iteration);
            }
        }
        advantages(&mut trajectories, config.normalize_advantages);
        let stats = if trajectories.len() >= 2 {
            ppo_update(policy, &mut adam, &input, &trajectories, config)?
        } else {
            UpdateStats::default()
        };
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let record = IterationRecord {
            iteration,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
            max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            best_reward: best.val_reward,
            clip_fraction: stats.clip_fraction,
            entropy: stats.entropy,
        };
        on_iteration(&record);
        records.push(record);
    }
    best.test_report = Some(ctx.report(&best.program, Split::Test)?);
    Ok(FineTuneOutcome { best, records, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamId, ParamStore};

    #[test]
    fn clip_arithmetic() {
        let a = 0.7;
        assert!((clipped_term(1.5, a, 0.2) - 1.2 * a).abs() < 1e-15);
        // With a negative advantage the min picks the clipped 0.8·A.
        assert!((clipped_term(0.5, -a, 0.2) - 0.8 * -a).abs() < 1e-15);
        assert_eq!(clipped_term(1.0, a, 0.2), a);
    }

    #[test]
    fn advantage_normalization() {
        let adv = normalized_advantages(&[0.1, -0.1]);
        assert!((adv[0] - 1.0).abs() < 1e-6 && (adv[1] + 1.0).abs() < 1e-6);
        assert!(normalized_advantages(&[0.3; 4]).iter().all(|&a| a == 0.0));
        let adv = normalized_advantages(&[0.5, 0.1, -0.2, 0.05]);
        assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    /// Three-token policy with a single logit row.
    struct Toy {
        store: ParamStore,
        theta: ParamId,
    }

    impl Toy {
        fn new(logits: [f64; 3]) -> Self {
            let mut store = ParamStore::new();
            let theta = store.add("theta", Tensor::matrix(1, 3, logits.to_vec()));
            Toy { store, theta }
        }

        fn probs(&self) -> Vec<f64> {
            self.store.get(self.theta).softmax_rows(1.0).data().to_vec()
        }

        fn entropy(&self) -> f64 {
            -self.probs().iter().map(|p| p * p.ln()).sum::<f64>()
        }

        /// Per-token log-probs and entropies of `ids` as graph values.
        fn forward(&self, g: &mut Graph, ids: &[usize]) -> (Var, Var) {
            let theta = g.param(&self.store, self.theta);
            let rows = g.embedding(theta, &vec![0; ids.len()]).unwrap();
            let ls = g.log_softmax(rows, 1.0);
            let lp = g.pick(ls, ids).unwrap();
            let p = g.exp(ls);
            let plp = g.mul(p, ls).unwrap();
            let ent = g.row_sum(plp);
            let ent = g.reshape(ent, &[ids.len()]).unwrap();
            let ent = g.neg(ent);
            (lp, ent)
        }

        fn objective_grad(&self, ids: &[usize], old: &[f64], adv: &[f64], clip: f64, coef: f64) -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let (lp, ent) = self.forward(&mut g, ids);
            let parts = objective_parts(&mut g, lp, ent, old, adv, clip).unwrap();
            let e = g.scale(parts.entropy_sum, coef);
            let obj = g.add(parts.surrogate_sum, e).unwrap();
            let obj = g.scale(obj, 1.0 / ids.len() as f64);
            let mut grads = Gradients::zeros_like(&self.store);
            g.backward(obj, &mut grads).unwrap();
            (g.value(obj).item(), grads.get(self.theta).data().to_vec())
        }
    }

    fn toy_training(coef: f64) -> (f64, f64) {
        let mut toy = Toy::new([2.0, 0.0, 0.0]);
        let start = toy.entropy();
        let mut adam = Adam::new(&toy.store, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = toy.probs();
            let ids: Vec<usize> = (0..16)
                .map(|_| {
                    let u: f64 = rng.random();
                    if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 }
                })
                .collect();
            let rewards: Vec<f64> = ids.iter().map(|&i| if i == 0 { 1.0 } else { 0.0 }).collect();
            let mut adv = normalized_advantages(&rewards);
            if adv.iter().all(|a| *a == 0.0) {
                adv = vec![0.0; ids.len()];
            }
            let old: Vec<f64> = ids.iter().map(|&i| p[i].ln()).collect();
            let (_, grad) = toy.objective_grad(&ids, &old, &adv, 0.2, coef);
            let mut grads = Gradients::zeros_like(&toy.store);
            let mut g = Graph::new();
            let theta = g.param(&toy.store, toy.theta);
            let target = g.constant(Tensor::matrix(1, 3, grad));
            let dot = g.mul(theta, target).unwrap();
            let loss = g.sum(dot);
            let loss = g.neg(loss);
            g.backward(loss, &mut grads).unwrap();
            grads.clip_norm(1.0);
            adam.step(&mut toy.store, &grads).unwrap();
        }
        (start, toy.entropy())
    }

    #[test]
    fn unchanged_parameters_give_unit_ratios() {
        let toy = Toy::new([0.3, -0.2, 0.5]);
        let ids = [0, 2, 1, 2];
        let p = toy.probs();
        let old: Vec<f64> = ids.iter().map(|&i| p[i].ln()).collect();
        let adv = normalized_advantages(&[0.4, -0.1, 0.2, 0.0]);
        let mut g = Graph::new();
        let (lp, ent) = toy.forward(&mut g, &ids);
        let parts = objective_parts(&mut g, lp, ent, &old, &adv, 0.2).unwrap();
        assert_eq!(parts.clipped, 0);
        let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
        let mean_sur = g.value(parts.surrogate_sum).item() / ids.len() as f64;
        assert!((mean_sur - mean_adv).abs() < 1e-9 && mean_adv.abs() < 1e-9);
    }

    #[test]
    fn no_clip_no_entropy_is_vanilla_policy_gradient() {
        let toy = Toy::new([0.3, -0.2, 0.5]);
        let ids = [0, 2, 1, 2, 0];
        let p = toy.probs();
        // Stale log-probs so the ratios are not 1.
        let old: Vec<f64> = ids.iter().enumerate().map(|(k, &i)| p[i].ln() + 0.1 * k as f64 - 0.2).collect();
        let adv = [1.0, -0.5, 0.3, -0.8, 0.2];
        let (_, grad) = toy.objective_grad(&ids, &old, &adv, 1e9, 0.0);
        // Reference: mean_t A_t · ratio_t · (onehot(i_t) - p).
        let mut reference = [0.0; 3];
        for (t, &i) in ids.iter().enumerate() {
            let ratio = (p[i].ln() - old[t]).exp();
            for (j, r) in reference.iter_mut().enumerate() {
                let d = if j == i { 1.0 } else { 0.0 } - p[j];
                *r += adv[t] * ratio * d / ids.len() as f64;
            }
        }
        for j in 0..3 {
            assert!((grad[j] - reference[j]).abs() < 1e-12, "{grad:?} vs {reference:?}");
        }
    }

    #[test]
    fn larger_entropy_coefficient_keeps_entropy_higher() {
        let (start, low) = toy_training(0.02);
        let (_, high) = toy_training(2.0);
        assert!(high > low, "high {high} low {low}");
        assert!(high > start, "high {high} start {start}");
    }

    proptest::proptest! {
        #[test]
        fn clipped_term_is_bounded(ratio in 0.0f64..5.0, adv in -3.0f64..3.0, clip in 0.01f64..0.99) {
            let bound = (ratio * adv).max(ratio.clamp(1.0 - clip, 1.0 + clip) * adv);
            proptest::prop_assert!(clipped_term(ratio, adv, clip) <= bound);
        }
    }

    #[test]
    fn incumbent_only_improves() {
        let mut best = BestArtifact::empty();
        let p = FeatureProgram::empty();
        assert!(!best.offer(&p, 0.0, 1));
        assert!(!best.offer(&p, -0.1, 1));
        assert!(best.offer(&p, 0.05, 2));
        assert!(!best.offer(&p, 0.05, 3));
        assert_eq!(best.iteration, 2);
    }
}
