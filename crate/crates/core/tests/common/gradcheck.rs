//! Central-difference checks of reverse-mode gradients.

use featgen_core::evaluators::mlp::Mlp;
use featgen_core::nn::layers::normal_tensor;
use featgen_core::nn::{
    causal_mask, Ctx, FeedForward, Gradients, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor,
    Var,
};
use featgen_core::policy::PolicyModel;
use featgen_core::transform::random_sequence;
use featgen_core::FeatureKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding do not count as failures.
pub const FLOOR: f64 = 1e-3;

type LossFn<'a> = dyn Fn(&mut Graph, &ParamStore) -> Var + 'a;

/// Largest relative error between analytic and central-difference
/// gradients over every scalar of every parameter.
pub fn max_rel_error(store: &mut ParamStore, f: &LossFn) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let mut grads = Gradients::zeros_like(store);
    g.backward(loss, &mut grads).unwrap();
    let mut worst: f64 = 0.0;
    for pi in 0..store.len() {
        let id = ParamId(pi);
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            let eval = |store: &mut ParamStore, x: f64| {
                store.get_mut(id).data_mut()[k] = x;
                let mut g = Graph::new();
                let l = f(&mut g, store);
                g.value(l).item()
            };
            let up = eval(store, orig + STEP);
            let down = eval(store, orig - STEP);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).data()[k];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

/// One named case per operation group; each returns its worst error.
pub fn op_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = |name: &'static str, params: Vec<Tensor>, f: &LossFn| {
        let mut store = ParamStore::new();
        for (i, p) in params.into_iter().enumerate() {
            store.add(format!("p{i}"), p);
        }
        out.push((name, max_rel_error(&mut store, f)));
    };
    let p = |g: &mut Graph, s: &ParamStore, i: usize| g.param(s, ParamId(i));

    case(
        "add/sub/mul/div",
        vec![
            normal_tensor(&[3, 4], 1.0, &mut rng),
            uniform(&[3, 4], 0.5, 2.0, &mut rng),
            normal_tensor(&[1, 4], 1.0, &mut rng),
        ],
        &|g, s| {
            let (a, b, row) = (p(g, s, 0), p(g, s, 1), p(g, s, 2));
            let x = g.mul(a, b).unwrap();
            let x = g.add(x, row).unwrap();
            let x = g.sub(x, b).unwrap();
            let x = g.div(x, b).unwrap();
            let x = g.mul(x, row).unwrap();
            probe(g, x, seed)
        },
    );
    case("scale/neg/add_scalar", vec![normal_tensor(&[2, 3], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let x = g.scale(a, -1.7);
        let x = g.neg(x);
        let x = g.add_scalar(x, 0.3);
        let x = g.mul(x, a).unwrap();
        probe(g, x, seed)
    });
    case("exp/ln", vec![uniform(&[2, 3], 0.2, 2.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let x = g.ln(a);
        let y = g.exp(x);
        let y = g.mul(y, x).unwrap();
        probe(g, y, seed)
    });
    case("relu/gelu", vec![normal_tensor(&[3, 3], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let r = g.relu(a);
        let q = g.gelu(a);
        let x = g.add(r, q).unwrap();
        probe(g, x, seed)
    });
    case("sum/mean/row_sum", vec![normal_tensor(&[3, 4], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let sq = g.mul(a, a).unwrap();
        let rs = g.row_sum(sq);
        let rs = probe(g, rs, seed);
        let m = g.mean(a);
        let m = g.mul(m, m).unwrap();
        let t = g.sum(sq);
        let x = g.add(rs, m).unwrap();
        g.add(x, t).unwrap()
    });
    case(
        "matmul/transpose",
        vec![normal_tensor(&[3, 4], 1.0, &mut rng), normal_tensor(&[4, 2], 1.0, &mut rng)],
        &|g, s| {
            let (a, b) = (p(g, s, 0), p(g, s, 1));
            let x = g.matmul(a, b).unwrap();
            let xt = g.transpose(x);
            let y = g.matmul(xt, a).unwrap();
            probe(g, y, seed)
        },
    );
    case(
        "reshape/concat/slice",
        vec![normal_tensor(&[2, 6], 1.0, &mut rng), normal_tensor(&[2, 3], 1.0, &mut rng)],
        &|g, s| {
            let (a, b) = (p(g, s, 0), p(g, s, 1));
            let r = g.reshape(a, &[4, 3]).unwrap();
            let rows = g.concat_rows(&[r, b]).unwrap();
            let top = g.slice_rows(rows, 1, 5).unwrap();
            let cols = g.concat_cols(&[top, top]).unwrap();
            let mid = g.slice_cols(cols, 2, 5).unwrap();
            let sq = g.mul(mid, mid).unwrap();
            probe(g, sq, seed)
        },
    );
    case("embedding/pick", vec![normal_tensor(&[5, 3], 1.0, &mut rng)], &|g, s| {
        let t = p(g, s, 0);
        let e = g.embedding(t, &[4, 0, 4, 2]).unwrap();
        let sq = g.mul(e, e).unwrap();
        let picked = g.pick(sq, &[2, 0, 1, 2]).unwrap();
        probe(g, picked, seed)
    });
    case("softmax/log_softmax", vec![normal_tensor(&[3, 4], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let s1 = g.softmax(a, 1, 0.7).unwrap();
        let s0 = g.softmax(a, 0, 1.3).unwrap();
        let l = g.log_softmax(a, 0.5);
        let x = g.add(s1, s0).unwrap();
        let x = g.add(x, l).unwrap();
        probe(g, x, seed)
    });
    case("layer_norm", vec![normal_tensor(&[3, 5], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let n = g.layer_norm(a, 1e-5);
        probe(g, n, seed)
    });
    case("dropout", vec![normal_tensor(&[3, 4], 1.0, &mut rng)], &|g, s| {
        let a = p(g, s, 0);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let d = g.dropout(a, 0.3, Some(&mut mask_rng));
        let d = g.mul(d, a).unwrap();
        probe(g, d, seed)
    });
    // Values are kept away from the clamp bounds and from ties.
    case(
        "clamp/minimum",
        vec![uniform(&[2, 4], -2.0, 2.0, &mut rng), uniform(&[2, 4], -2.0, 2.0, &mut rng)],
        &|g, s| {
            let (a, b) = (p(g, s, 0), p(g, s, 1));
            let c = g.clamp(a, -1.0, 1.0);
            let m = g.minimum(c, b).unwrap();
            let m = g.mul(m, a).unwrap();
            probe(g, m, seed)
        },
    );
    out
}

/// Linear, layer norm, attention with a causal mask, feed-forward.
pub fn layer_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", normal_tensor(&[4, 8], 1.0, &mut rng));
    let lin = Linear::new(&mut store, "lin", 8, 8, 0.5, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 8);
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    let ff = FeedForward::new(&mut store, "ff", 8, 6, &mut rng);
    // Perturb the layer norm affine parameters off their 1/0 initial values.
    for p in store.params_mut() {
        if p.name.starts_with("ln.") {
            p.value = p.value.map(|v| v + 0.3);
        }
    }
    max_rel_error(&mut store, &|g, s| {
        let xv = g.param(s, x);
        let h = lin.forward(g, s, xv).unwrap();
        let h = ln.forward(g, s, h).unwrap();
        let mask = g.constant(causal_mask(4));
        let mut ctx = Ctx::eval();
        let a = attn.forward(g, s, h, h, Some(mask), &mut ctx).unwrap();
        let h = g.add(h, a).unwrap();
        let f = ff.forward(g, s, h, &mut ctx).unwrap();
        probe(g, f, seed)
    })
}

/// Teacher-forced policy log-likelihood plus entropy of a random valid
/// sequence, differentiated through encoder and decoder.
pub fn policy_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = vec![FeatureKind::Continuous, FeatureKind::Discrete, FeatureKind::Continuous];
    let mut policy = PolicyModel::new(&kinds, super::tiny_policy_config(), &mut rng).unwrap();
    let dataset = small_dataset(&kinds, seed);
    let input = policy.encoder_input(&dataset).unwrap();
    let grammar = policy.grammar().clone();
    let seq = loop {
        let s = random_sequence(&grammar, &mut rng, 3, 2);
        if s.tokens().len() > 3 {
            break s;
        }
    };
    let tokens = seq.tokens().to_vec();
    let snapshot = policy.clone();
    max_rel_error(&mut policy.store, &|g, s| {
        let mut model = snapshot.clone();
        model.store = s.clone();
        let mut ctx = Ctx::eval();
        let z = model.encode(g, &input, &mut ctx).unwrap();
        let scored = model.score(g, z, &tokens, 0.8, &mut ctx).unwrap();
        let lp = g.sum(scored.log_probs);
        let ent = g.sum(scored.entropies);
        let ent = g.scale(ent, 0.1);
        g.add(lp, ent).unwrap()
    })
}

/// Surrogate-shaped MLP with a cross-entropy loss built from graph ops.
pub fn surrogate_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::new(5, &[6, 6], 3, &mut rng);
    // Zero-initialized biases can put ReLU inputs exactly on the kink.
    for p in mlp.store.params_mut() {
        let shift = uniform(p.value.shape(), -0.5, 0.5, &mut rng);
        p.value = p.value.zip_map(&shift, |a, b| a + b);
    }
    let x = normal_tensor(&[7, 5], 1.0, &mut rng);
    let y: Vec<usize> = (0..7).map(|_| rng.random_range(0..3)).collect();
    let snapshot = mlp.clone();
    max_rel_error(&mut mlp.store, &|g, s| {
        let mut model = snapshot.clone();
        model.store = s.clone();
        let xv = g.constant(x.clone());
        let logits = model.forward_graph(g, xv).unwrap();
        let ls = g.log_softmax(logits, 1.0);
        let picked = g.pick(ls, &y).unwrap();
        let m = g.mean(picked);
        g.neg(m)
    })
}

fn small_dataset(kinds: &[FeatureKind], seed: u64) -> featgen_core::TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows = 30;
    let columns = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let values = (0..rows)
                .map(|_| match k {
                    FeatureKind::Continuous => rng.random_range(-2.0..2.0),
                    FeatureKind::Discrete => rng.random_range(0..3) as f64,
                })
                .collect();
            featgen_core::FeatureColumn::new(format!("V{}", i + 1), *k, values)
        })
        .collect();
    let labels = (0..rows).map(|r| (r % 2) as f64).collect();
    featgen_core::TabularDataset::from_columns(columns, labels, featgen_core::TaskKind::Classification)
}

/// Every case for one seed.
pub fn all_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut cases = op_cases(seed);
    cases.push(("layers", layer_case(seed)));
    cases.push(("policy forward", policy_case(seed)));
    cases.push(("surrogate forward", surrogate_case(seed)));
    cases
}
