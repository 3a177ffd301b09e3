//! Transformer encoder-decoder policy over the transformation vocabulary.
//!
//! The encoder reads one position per original feature (a feature-id
//! embedding plus projected column statistics) interleaved with separator
//! embeddings: `[V1, EOS, V2, EOS, ..., VN, EOS, STOP]`. The decoder emits
//! tokens autoregressively under the grammar mask, so every sampled sequence
//! is valid.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureColumn, FeatureKind, TabularDataset};
use crate::nn::{
    checkpoint, causal_mask, sinusoidal, Adam, Ctx, Embedding, FeedForward, Graph, LayerNorm, Linear,
    MultiHeadAttention, NnError, ParamStore, Tensor, Var, MASKED,
};
use crate::transform::{schema_fingerprint, Grammar, GrammarState, Token, TransformSequence, ValidationError, Vocab};

/// Temperatures below this decode greedily.
pub const GREEDY_BELOW: f64 = 1e-3;

/// Width of the per-feature statistics vector fed to the encoder.
pub const STATS_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("schema mismatch: policy bound to {expected} features, dataset has {found}")]
    SchemaMismatch { expected: usize, found: usize },
    #[error("schema mismatch: feature kinds differ from the bound schema")]
    KindMismatch,
    #[error("token {token} at position {pos} is masked: {source}")]
    MaskedToken {
        pos: usize,
        token: Token,
        source: ValidationError,
    },
    #[error("checkpoint was written for a different schema")]
    Fingerprint,
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub discrete_arithmetic: bool,
    /// Initial probability of EOS at a mid-segment position.
    pub eos_prior: f64,
    /// Initial probability of STOP at a mid-segment position.
    pub stop_prior: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_model: 128,
            heads: 8,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: crate::transform::DEFAULT_MAX_LEN,
            dropout: 0.1,
            discrete_arithmetic: true,
            eos_prior: 0.4,
            stop_prior: 0.05,
        }
    }
}

/// Row-order invariant summary of one column, squashed to a small range.
pub fn stats_vector(column: &FeatureColumn) -> [f64; STATS_DIM] {
    let slog = |x: f64| x.signum() * x.abs().ln_1p();
    let s = &column.stats;
    [
        slog(s.mean),
        slog(s.std),
        slog(s.min),
        slog(s.max),
        (s.distinct_count as f64).ln_1p() / 10.0,
        s.fraction_missing,
        if column.kind == FeatureKind::Discrete { 1.0 } else { 0.0 },
        1.0,
    ]
}

/// Encoder input for a dataset: one statistics row per original feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub stats: Tensor,
}

impl EncoderInput {
    pub fn n_features(&self) -> usize {
        self.stats.rows()
    }

    /// Number of encoder positions (`2N + 1`).
    pub fn len(&self) -> usize {
        2 * self.n_features() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.n_features() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub sequence: TransformSequence,
    pub token_ids: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub temperature: f64,
}

impl SampledSequence {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Teacher-forced scores of a sequence; both are `[L]` graph values.
#[derive(Debug, Clone, Copy)]
pub struct Scored {
    pub log_probs: Var,
    pub entropies: Var,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Encoder output plus the per-layer cross-attention keys/values.
struct Memory {
    cross_kv: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub store: ParamStore,
    grammar: Grammar,
    feature_emb: Embedding,
    special_emb: Embedding,
    stats_proj: Linear,
    token_emb: Embedding,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
    /// Decoder position codes for `0..max_len`.
    positions: Tensor,
}

impl PolicyModel {
    pub fn new(kinds: &[FeatureKind], config: PolicyConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(NnError::HeadDim {
                d_model: d,
                heads: config.heads,
            }
            .into());
        }
        let mut grammar = Grammar::new(kinds.to_vec());
        grammar.max_len = config.max_len;
        grammar.discrete_arithmetic = config.discrete_arithmetic;
        let vocab = grammar.vocab();
        let n = kinds.len();
        let mut store = ParamStore::new();
        let feature_emb = Embedding::new(&mut store, "enc.feature", n.max(1), d, rng);
        let special_emb = Embedding::new(&mut store, "enc.special", 2, d, rng);
        let stats_proj = Linear::glorot(&mut store, "enc.stats", STATS_DIM, d, rng);
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let name = format!("enc.{l}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d),
                attn: MultiHeadAttention::new(&mut store, &format!("{name}.attn"), d, config.heads, rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("{name}.ff"), d, config.d_ff, rng),
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d);
        // one extra row for the BOS input
        let token_emb = Embedding::new(&mut store, "dec.token", vocab.size() + 1, d, rng);
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let name = format!("dec.{l}");
            decoder.push(DecoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{name}.self"), d, config.heads, rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), d),
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{name}.cross"), d, config.heads, rng)?,
                ln3: LayerNorm::new(&mut store, &format!("{name}.ln3"), d),
                ff: FeedForward::new(&mut store, &format!("{name}.ff"), d, config.d_ff, rng),
            });
        }
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let head = Linear::new(&mut store, "head", d, vocab.size(), 0.02, rng);
        let bias = output_prior(vocab, config.eos_prior, config.stop_prior);
        store.get_mut(head.b).data_mut().copy_from_slice(&bias);
        let config_max_len = config.max_len;
        Ok(PolicyModel {
            config,
            store,
            grammar,
            feature_emb,
            special_emb,
            stats_proj,
            token_emb,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            head,
            positions: sinusoidal(config_max_len, d),
        })
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn vocab(&self) -> Vocab {
        self.grammar.vocab()
    }

    pub fn n_features(&self) -> usize {
        self.grammar.kinds.len()
    }

    pub fn fingerprint(&self) -> u64 {
        schema_fingerprint(&self.grammar.kinds)
    }

    /// Statistics rows for the original columns of `dataset`.
    pub fn encoder_input(&self, dataset: &TabularDataset) -> Result<EncoderInput> {
        let n = self.n_features();
        if dataset.n_features() != n {
            return Err(PolicyError::SchemaMismatch {
                expected: n,
                found: dataset.n_features(),
            });
        }
        if dataset.kinds() != self.grammar.kinds {
            return Err(PolicyError::KindMismatch);
        }
        let data: Vec<f64> = dataset.columns.iter().flat_map(stats_vector).collect();
        Ok(EncoderInput {
            stats: Tensor::matrix(n, STATS_DIM, data),
        })
    }

    fn check_input(&self, input: &EncoderInput) -> Result<()> {
        if input.n_features() != self.n_features() {
            return Err(PolicyError::SchemaMismatch {
                expected: self.n_features(),
                found: input.n_features(),
            });
        }
        Ok(())
    }

    /// Latent memory `z`, shaped `[2N + 1, d_model]`.
    pub fn encode(&self, g: &mut Graph, input: &EncoderInput, ctx: &mut Ctx) -> Result<Var> {
        self.check_input(input)?;
        let s = &self.store;
        let n = input.n_features();
        let ids: Vec<usize> = (0..n).collect();
        let fe = self.feature_emb.forward(g, s, &ids)?;
        let stats = g.constant(input.stats.clone());
        let proj = self.stats_proj.forward(g, s, stats)?;
        let feats = g.add(fe, proj)?;
        let eos = self.special_emb.forward(g, s, &[0])?;
        let stop = self.special_emb.forward(g, s, &[1])?;
        let mut rows = Vec::with_capacity(2 * n + 1);
        for i in 0..n {
            rows.push(g.slice_rows(feats, i, i + 1)?);
            rows.push(eos);
        }
        rows.push(stop);
        let x = g.concat_rows(&rows)?;
        let pos = g.constant(sinusoidal(2 * n + 1, self.config.d_model));
        let mut x = g.add(x, pos)?;
        x = ctx.drop(g, x);
        for layer in &self.encoder {
            let h = layer.ln1.forward(g, s, x)?;
            let a = layer.attn.forward(g, s, h, h, None, ctx)?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, s, x)?;
            let f = layer.ff.forward(g, s, h, ctx)?;
            let f = ctx.drop(g, f);
            x = g.add(x, f)?;
        }
        Ok(self.enc_norm.forward(g, s, x)?)
    }

    fn memory(&self, g: &mut Graph, z: Var) -> Result<Memory> {
        let mut cross_kv = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            cross_kv.push(layer.cross_attn.project_kv(g, &self.store, z)?);
        }
        Ok(Memory { cross_kv })
    }

    /// Decoder inputs for positions `start..start + ids.len()`: embedding of
    /// the previous token (BOS first) plus position code.
    fn decoder_inputs(&self, g: &mut Graph, prev_ids: &[usize], start: usize) -> Result<Var> {
        let e = self.token_emb.forward(g, &self.store, prev_ids)?;
        let end = start + prev_ids.len();
        let pos = if end <= self.positions.rows() {
            self.positions.slice_rows(start, end)
        } else {
            sinusoidal(end, self.config.d_model).slice_rows(start, end)
        };
        let pos = g.constant(pos);
        Ok(g.add(e, pos)?)
    }

    /// Runs the decoder stack on new rows `x`. `cache` holds the self-attention
    /// keys/values of earlier positions and is extended in place; `mask` is
    /// the additive self-attention mask for the new rows.
    fn decode_rows(
        &self,
        g: &mut Graph,
        memory: &Memory,
        mut x: Var,
        cache: &mut [Option<(Var, Var)>],
        mask: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let s = &self.store;
        x = ctx.drop(g, x);
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = layer.ln1.forward(g, s, x)?;
            let (k, v) = layer.self_attn.project_kv(g, s, h)?;
            let (k, v) = match cache[l] {
                Some((pk, pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?),
                None => (k, v),
            };
            cache[l] = Some((k, v));
            let a = layer.self_attn.attend(g, s, h, k, v, mask, ctx)?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, s, x)?;
            let (mk, mv) = memory.cross_kv[l];
            let c = layer.cross_attn.attend(g, s, h, mk, mv, None, ctx)?;
            let c = ctx.drop(g, c);
            x = g.add(x, c)?;
            let h = layer.ln3.forward(g, s, x)?;
            let f = layer.ff.forward(g, s, h, ctx)?;
            let f = ctx.drop(g, f);
            x = g.add(x, f)?;
        }
        let x = self.dec_norm.forward(g, s, x)?;
        Ok(self.head.forward(g, s, x)?)
    }

    fn bos(&self) -> usize {
        self.vocab().size()
    }

    /// Samples one sequence at `temperature` under the grammar mask; greedy
    /// when the temperature is below [`GREEDY_BELOW`].
    pub fn sample(&self, input: &EncoderInput, temperature: f64, rng: &mut dyn RngCore) -> Result<SampledSequence> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let z = self.encode(&mut g, input, &mut ctx)?;
        self.sample_from(&mut g, z, temperature, rng)
    }

    /// Sampling step loop given an already encoded memory `z` in `g`.
    pub fn sample_from(&self, g: &mut Graph, z: Var, temperature: f64, rng: &mut dyn RngCore) -> Result<SampledSequence> {
        let greedy = temperature < GREEDY_BELOW;
        let t_eff = temperature.max(GREEDY_BELOW);
        let vocab = self.vocab();
        let memory = self.memory(g, z)?;
        let mut cache = vec![None; self.decoder.len()];
        let mut ctx = Ctx::eval();
        let mut state = GrammarState::default();
        let mut prev = self.bos();
        let (mut tokens, mut ids, mut lps, mut ents) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        while !state.done {
            let pos = state.len;
            let x = self.decoder_inputs(g, &[prev], pos)?;
            let logits = self.decode_rows(g, &memory, x, &mut cache, None, &mut ctx)?;
            let allowed = self.grammar.mask(&state);
            let (lp, ent) = masked_log_probs(g.value(logits).data(), &allowed, t_eff);
            let choice = if greedy {
                argmax_allowed(&lp, &allowed)
            } else {
                draw(&lp, &allowed, rng)
            };
            let token = vocab.token(choice);
            state.advance_with(&self.grammar, token);
            tokens.push(token);
            ids.push(choice);
            lps.push(lp[choice]);
            ents.push(ent);
            prev = choice;
        }
        let sequence = self
            .grammar
            .validate(&tokens)
            .expect("masked decoding always yields a valid sequence");
        Ok(SampledSequence {
            sequence,
            token_ids: ids,
            log_probs: lps,
            entropies: ents,
            temperature,
        })
    }

    /// Greedy decode (deterministic).
    pub fn greedy(&self, input: &EncoderInput) -> Result<SampledSequence> {
        struct NoRng;
        impl RngCore for NoRng {
            fn next_u32(&mut self) -> u32 {
                unreachable!("greedy decoding draws no random numbers")
            }
            fn next_u64(&mut self) -> u64 {
                unreachable!("greedy decoding draws no random numbers")
            }
            fn fill_bytes(&mut self, _: &mut [u8]) {
                unreachable!("greedy decoding draws no random numbers")
            }
        }
        self.sample(input, 0.0, &mut NoRng)
    }

    /// Teacher-forced log-probabilities and entropies of `tokens` at
    /// `temperature`, as differentiable graph values.
    pub fn score(
        &self,
        g: &mut Graph,
        z: Var,
        tokens: &[Token],
        temperature: f64,
        ctx: &mut Ctx,
    ) -> Result<Scored> {
        let vocab = self.vocab();
        let t_eff = temperature.max(GREEDY_BELOW);
        let len = tokens.len();
        let mut state = GrammarState::default();
        let mut mask = Vec::with_capacity(len * vocab.size());
        for (pos, &t) in tokens.iter().enumerate() {
            if let Err(source) = state.check(&self.grammar, t) {
                return Err(PolicyError::MaskedToken { pos, token: t, source });
            }
            mask.extend(self.grammar.mask(&state).into_iter().map(|ok| if ok { 0.0 } else { MASKED }));
            state.advance_with(&self.grammar, t);
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| vocab.index(t)).collect();
        let mut prev = vec![self.bos()];
        prev.extend_from_slice(&ids[..len.saturating_sub(1)]);
        let memory = self.memory(g, z)?;
        let x = self.decoder_inputs(g, &prev, 0)?;
        let causal = g.constant(causal_mask(len));
        let mut cache = vec![None; self.decoder.len()];
        let logits = self.decode_rows(g, &memory, x, &mut cache, Some(causal), ctx)?;
        let mask = g.constant(Tensor::matrix(len, vocab.size(), mask));
        let masked = g.add(logits, mask)?;
        let lp = g.log_softmax(masked, t_eff);
        let picked = g.pick(lp, &ids)?;
        let p = g.exp(lp);
        let plp = g.mul(p, lp)?;
        let neg_ent = g.row_sum(plp);
        let entropies = g.neg(neg_ent);
        let entropies = g.reshape(entropies, &[len])?;
        Ok(Scored {
            log_probs: picked,
            entropies,
        })
    }

    /// Plain-value version of [`score`](Self::score) in evaluation mode.
    pub fn log_probs_of(&self, input: &EncoderInput, tokens: &[Token], temperature: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let z = self.encode(&mut g, input, &mut ctx)?;
        let scored = self.score(&mut g, z, tokens, temperature, &mut ctx)?;
        Ok((
            g.value(scored.log_probs).data().to_vec(),
            g.value(scored.entropies).data().to_vec(),
        ))
    }

    fn checkpoint_meta(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "policy".into());
        meta.insert("schema_fingerprint".into(), self.fingerprint().to_string());
        meta.insert("n_features".into(), self.n_features().to_string());
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        meta
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam>) -> Result<()> {
        Ok(checkpoint::save(path, &self.store, adam, &self.checkpoint_meta())?)
    }

    pub fn to_bytes(&self, adam: Option<&Adam>) -> Result<Vec<u8>> {
        Ok(checkpoint::to_bytes(&self.store, adam, &self.checkpoint_meta())?)
    }

    /// Loads parameters into this model; rejects checkpoints for another
    /// schema. Returns the stored optimizer state, if any.
    pub fn load(&mut self, path: &Path) -> Result<Option<Adam>> {
        let bytes = std::fs::read(path).map_err(NnError::from)?;
        self.load_bytes(&bytes)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<Option<Adam>> {
        let mut scratch = self.store.clone();
        let loaded = checkpoint::from_bytes(bytes, &mut scratch)?;
        if loaded.meta.get("schema_fingerprint") != Some(&self.fingerprint().to_string()) {
            return Err(PolicyError::Fingerprint);
        }
        self.store = scratch;
        Ok(loaded.adam)
    }
}

/// Output-head bias giving EOS and STOP the requested probabilities at a
/// mid-segment position when all other logits are equal.
fn output_prior(vocab: Vocab, eos: f64, stop: f64) -> Vec<f64> {
    let mut bias = vec![0.0; vocab.size()];
    let rest = 1.0 - eos - stop;
    if rest > 0.0 && eos > 0.0 && stop > 0.0 {
        let others = (vocab.size() - 2) as f64;
        bias[vocab.eos()] = (eos * others / rest).ln();
        bias[vocab.stop()] = (stop * others / rest).ln();
    }
    bias
}

/// Log-probabilities of `softmax(logits / t)` restricted to allowed tokens,
/// and the entropy of that distribution.
pub fn masked_log_probs(logits: &[f64], allowed: &[bool], t: f64) -> (Vec<f64>, f64) {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| (l / t - max).exp())
        .sum();
    let log_z = max + z.ln();
    let lp: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { l / t - log_z } else { f64::NEG_INFINITY })
        .collect();
    let entropy = -lp.iter().filter(|v| v.is_finite()).map(|&v| v.exp() * v).sum::<f64>();
    (lp, entropy)
}

fn argmax_allowed(lp: &[f64], allowed: &[bool]) -> usize {
    let mut best = None;
    for (i, (&v, &a)) in lp.iter().zip(allowed).enumerate() {
        if a && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.expect("grammar always allows STOP").0
}

fn draw(lp: &[f64], allowed: &[bool], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&v, &a)) in lp.iter().zip(allowed).enumerate() {
        if !a {
            continue;
        }
        acc += v.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
