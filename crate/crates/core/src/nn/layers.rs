use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use super::{NnError, Result};

/// Value added to attention/output logits that must receive zero probability.
pub const MASKED: f64 = -1e9;

/// Forward-pass context: dropout rate and the RNG that drives it. Without an
/// RNG the pass is deterministic (evaluation mode).
pub struct Ctx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Ctx<'static> {
        Ctx { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'a mut dyn RngCore) -> Ctx<'a> {
        Ctx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn drop(&mut self, g: &mut Graph, v: Var) -> Var {
        let p = self.dropout;
        g.dropout(v, p, self.rng.as_deref_mut())
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ N(0, std^2), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, std: f64, rng: &mut dyn RngCore) -> Self {
        let w = store.add(format!("{name}.w"), normal_tensor(&[in_dim, out_dim], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Glorot-scaled initialization.
    pub fn glorot(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut dyn RngCore) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Self::new(store, name, in_dim, out_dim, std, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul(n, gamma)?;
        g.add(s, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut dyn RngCore) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), normal_tensor(&[count, dim], 0.02, rng)),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, ids)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(NnError::HeadDim { d_model, heads });
        }
        Ok(MultiHeadAttention {
            heads,
            d_model,
            q: Linear::glorot(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::glorot(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::glorot(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::glorot(store, &format!("{name}.o"), d_model, d_model, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Projected keys and values of `x`; cacheable across decoding steps.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, store, x)?, self.v.forward(g, store, x)?))
    }

    /// Attends queries from `x_q` over already-projected `keys`/`values`.
    /// `mask` is additive, shaped `[queries, keys]`.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        keys: Var,
        values: Var,
        mask: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x_q)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(keys, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(values, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let p = g.softmax(scores, 1, 1.0)?;
            let p = ctx.drop(g, p);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.o.forward(g, store, cat)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, store, x_kv)?;
        self.attend(g, store, x_q, k, v, mask, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut dyn RngCore) -> Self {
        FeedForward {
            l1: Linear::glorot(store, &format!("{name}.fc1"), d_model, d_ff, rng),
            l2: Linear::glorot(store, &format!("{name}.fc2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = ctx.drop(g, h);
        self.l2.forward(g, store, h)
    }
}

/// Fixed sinusoidal position codes, `[len, d]`.
pub fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data)
}

/// Additive mask hiding future positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::matrix(len, len, data)
}
