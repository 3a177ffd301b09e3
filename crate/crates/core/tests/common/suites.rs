//! Measurement routines shared by the focused tests and the acceptance report.

use featgen_core::policy::{PolicyConfig, PolicyModel};
use featgen_core::{FeatureColumn, TabularDataset, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::oracles::{naive_valid, random_columns};

#[derive(Debug, Default)]
pub struct SamplingOutcome {
    pub schemas: usize,
    pub sequences: usize,
    pub valid: usize,
    pub longest: usize,
    pub hit_limit: usize,
}

/// Samples `per_schema` sequences from freshly initialized policies on
/// `schemas` random schemas, at the default length limit. The network is
/// narrower than the default (validity comes from the mask, not the width).
/// Half the policies get EOS/STOP priors close to zero so decoding runs into
/// the length limit.
pub fn sampling_suite(schemas: usize, per_schema: usize, seed: u64) -> SamplingOutcome {
    let results: Vec<(usize, usize, usize, usize)> = (0..schemas)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
            let n = rng.random_range(1..13);
            let (kinds, cols) = random_columns(&mut rng, n, 30);
            let columns = kinds
                .iter()
                .zip(cols)
                .enumerate()
                .map(|(i, (k, v))| FeatureColumn::new(format!("V{}", i + 1), *k, v))
                .collect();
            let labels = (0..30).map(|i| (i % 2) as f64).collect();
            let ds = TabularDataset::from_columns(columns, labels, TaskKind::Classification);
            let mut config = PolicyConfig {
                d_model: 32,
                heads: 4,
                d_ff: 32,
                encoder_layers: 1,
                decoder_layers: 1,
                dropout: 0.0,
                ..PolicyConfig::default()
            };
            if s % 2 == 1 {
                config.eos_prior = 0.01;
                config.stop_prior = 1e-4;
            }
            let max_len = config.max_len;
            let policy = PolicyModel::new(&kinds, config, &mut rng).unwrap();
            let input = policy.encoder_input(&ds).unwrap();
            let (mut valid, mut longest, mut hit) = (0, 0, 0);
            for i in 0..per_schema {
                let t = if i % 2 == 0 { 1.0 } else { 2.0 };
                let sample = policy.sample(&input, t, &mut rng).unwrap();
                let tokens = sample.sequence.tokens();
                let ok = policy.grammar().validate(tokens).is_ok()
                    && naive_valid(tokens, &kinds, max_len, true)
                    && tokens.len() <= max_len;
                valid += ok as usize;
                longest = longest.max(tokens.len());
                hit += (tokens.len() == max_len) as usize;
            }
            (per_schema, valid, longest, hit)
        })
        .collect();
    let mut out = SamplingOutcome {
        schemas,
        ..Default::default()
    };
    for (n, v, l, h) in results {
        out.sequences += n;
        out.valid += v;
        out.longest = out.longest.max(l);
        out.hit_limit += h;
    }
    out
}

// ---- clipped objective on a three-token toy policy ----

use featgen_core::nn::{Adam, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use featgen_core::ppo::{normalized_advantages, objective_parts};

/// Policy over three tokens parameterized by one row of logits.
pub struct ToyPolicy {
    pub store: ParamStore,
    pub theta: ParamId,
}

impl ToyPolicy {
    pub fn new(logits: [f64; 3]) -> Self {
        let mut store = ParamStore::new();
        let theta = store.add("theta", Tensor::matrix(1, 3, logits.to_vec()));
        ToyPolicy { store, theta }
    }

    pub fn probs(&self) -> Vec<f64> {
        let l = self.store.get(self.theta).data();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs().iter().map(|p| p * p.ln()).sum::<f64>()
    }

    /// Per-draw log-probabilities and entropies as graph values.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> (Var, Var) {
        let theta = g.param(&self.store, self.theta);
        let rows = g.embedding(theta, &vec![0; ids.len()]).unwrap();
        let ls = g.log_softmax(rows, 1.0);
        let lp = g.pick(ls, ids).unwrap();
        let p = g.exp(ls);
        let plp = g.mul(p, ls).unwrap();
        let ent = g.row_sum(plp);
        let ent = g.reshape(ent, &[ids.len()]).unwrap();
        (lp, g.neg(ent))
    }
}

/// Ten clipped-objective updates of a toy policy rewarded for token 0;
/// returns the entropy before and after.
pub fn toy_entropy_run(entropy_coef: f64) -> (f64, f64) {
    let mut toy = ToyPolicy::new([2.0, 0.0, 0.0]);
    let start = toy.entropy();
    let mut adam = Adam::new(&toy.store, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = toy.probs();
        let ids: Vec<usize> = (0..16)
            .map(|_| {
                let u: f64 = rng.random();
                if u < p[0] {
                    0
                } else if u < p[0] + p[1] {
                    1
                } else {
                    2
                }
            })
            .collect();
        let rewards: Vec<f64> = ids.iter().map(|&i| (i == 0) as u8 as f64).collect();
        let adv = normalized_advantages(&rewards);
        let old: Vec<f64> = ids.iter().map(|&i| p[i].ln()).collect();
        let mut g = Graph::new();
        let (lp, ent) = toy.forward(&mut g, &ids);
        let parts = objective_parts(&mut g, lp, ent, &old, &adv, 0.2).unwrap();
        let e = g.scale(parts.entropy_sum, entropy_coef);
        let obj = g.add(parts.surrogate_sum, e).unwrap();
        let loss = g.scale(obj, -1.0 / ids.len() as f64);
        let mut grads = Gradients::zeros_like(&toy.store);
        g.backward(loss, &mut grads).unwrap();
        grads.clip_norm(1.0);
        adam.step(&mut toy.store, &grads).unwrap();
    }
    (start, toy.entropy())
}
