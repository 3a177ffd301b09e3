//! Naive reference implementations, written independently of the library.

use std::collections::HashMap;

use featgen_core::transform::{BinaryOp, UnaryOp};
use featgen_core::{FeatureKind, Token};

// ---- transform language ----

fn unary(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Abs => x.abs(),
        UnaryOp::Square => x * x,
        UnaryOp::Inverse => {
            if x == 0.0 {
                0.0
            } else {
                1.0 / x
            }
        }
        UnaryOp::Log => x.abs().ln_1p(),
        UnaryOp::Sqrt => x.abs().sqrt(),
        UnaryOp::Cube => x * x * x,
    }
}

fn binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                0.0
            } else {
                a / b
            }
        }
    }
}

fn apply_row(acc: f64, tok: Token, columns: &[Vec<f64>], row: usize) -> f64 {
    match tok {
        Token::Binary(op, f) => binary(op, acc, columns[f][row]),
        Token::Unary(op) => unary(op, acc),
        other => panic!("unexpected token {other} after the crossing prefix"),
    }
}

/// Number of leading tokens that keep the accumulator categorical.
fn cross_prefix(segment: &[Token], kinds: &[FeatureKind]) -> usize {
    let starts = match segment[0] {
        Token::Cross(_) => true,
        Token::Binary(BinaryOp::Add, f) => kinds[f] == FeatureKind::Discrete,
        _ => false,
    };
    if !starts {
        return 0;
    }
    let mut n = 1;
    while n < segment.len() && matches!(segment[n], Token::Cross(_)) {
        n += 1;
    }
    n
}

/// Renumbers arbitrary keys by their position in the sorted distinct set.
fn recode<K: Ord + Clone>(keys: &[K]) -> Vec<f64> {
    let mut distinct = keys.to_vec();
    distinct.sort();
    distinct.dedup();
    keys.iter().map(|k| distinct.iter().position(|d| d == k).unwrap() as f64).collect()
}

/// Raw values of one segment. A leading crossing is built by repeated
/// pairwise crossing in ascending feature order, recoding after each step;
/// remaining tokens are applied row by row.
pub fn naive_segment(segment: &[Token], columns: &[Vec<f64>], kinds: &[FeatureKind]) -> (FeatureKind, Vec<f64>) {
    let rows = columns[0].len();
    let prefix = cross_prefix(segment, kinds);
    let mut acc: Vec<f64> = if prefix == segment.len() || prefix > 1 {
        let mut feats: Vec<usize> = segment[..prefix]
            .iter()
            .map(|t| match t {
                Token::Cross(f) | Token::Binary(_, f) => *f,
                _ => unreachable!(),
            })
            .collect();
        feats.sort();
        feats.dedup();
        let codes = |f: usize| -> Vec<u64> { columns[f].iter().map(|&v| v as u64).collect() };
        let mut acc = recode(&codes(feats[0]));
        for &f in &feats[1..] {
            let pairs: Vec<(u64, u64)> = acc.iter().map(|&a| a as u64).zip(codes(f)).collect();
            acc = recode(&pairs);
        }
        acc
    } else {
        (0..rows)
            .map(|r| match segment[0] {
                Token::Binary(BinaryOp::Sub, f) => -columns[f][r],
                Token::Binary(_, f) | Token::Cross(f) => columns[f][r],
                other => panic!("segment starts with {other}"),
            })
            .collect()
    };
    if prefix == segment.len() {
        return (FeatureKind::Discrete, acc);
    }
    for (r, a) in acc.iter_mut().enumerate() {
        for &tok in &segment[prefix.max(1)..] {
            *a = apply_row(*a, tok, columns, r);
        }
    }
    (FeatureKind::Continuous, acc)
}

/// Independent statement of the typing rules.
pub fn naive_valid(tokens: &[Token], kinds: &[FeatureKind], max_len: usize, discrete_arithmetic: bool) -> bool {
    let n = kinds.len();
    if tokens.is_empty() || tokens.len() > max_len || *tokens.last().unwrap() != Token::Stop {
        return false;
    }
    if tokens[..tokens.len() - 1].contains(&Token::Stop) {
        return false;
    }
    let in_range = |f: usize| f < n;
    // None: segment start.
    let mut acc: Option<FeatureKind> = None;
    for &t in tokens {
        match t {
            Token::Stop => {}
            Token::Eos => {
                if acc.is_none() {
                    return false;
                }
                acc = None;
            }
            Token::Unary(_) => {
                if acc != Some(FeatureKind::Continuous) {
                    return false;
                }
            }
            Token::Binary(op, f) => {
                if !in_range(f) {
                    return false;
                }
                let discrete_ok = discrete_arithmetic && op == BinaryOp::Add;
                if kinds[f] == FeatureKind::Discrete && !discrete_ok {
                    return false;
                }
                if acc == Some(FeatureKind::Discrete) && !discrete_arithmetic {
                    return false;
                }
                acc = Some(if acc.is_none() { kinds[f] } else { FeatureKind::Continuous });
            }
            Token::Cross(f) => {
                if !in_range(f) || kinds[f] != FeatureKind::Discrete || acc == Some(FeatureKind::Continuous) {
                    return false;
                }
                acc = Some(FeatureKind::Discrete);
            }
        }
    }
    true
}

// ---- metrics ----

/// Confusion counts keyed by (actual, predicted).
fn confusion(pred: &[usize], actual: &[usize]) -> (HashMap<(usize, usize), usize>, Vec<usize>) {
    let mut m = HashMap::new();
    let mut labels: Vec<usize> = Vec::new();
    for (&p, &a) in pred.iter().zip(actual) {
        *m.entry((a, p)).or_insert(0) += 1;
        for l in [p, a] {
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
    }
    (m, labels)
}

pub fn accuracy(pred: &[usize], actual: &[usize]) -> f64 {
    let mut hits = 0.0;
    for i in 0..actual.len() {
        if pred[i] == actual[i] {
            hits += 1.0;
        }
    }
    hits / actual.len() as f64
}

fn counts(pred: &[usize], actual: &[usize]) -> Vec<(f64, f64, f64)> {
    let (m, labels) = confusion(pred, actual);
    labels
        .iter()
        .map(|&c| {
            let get = |a, p| *m.get(&(a, p)).unwrap_or(&0) as f64;
            let tp = get(c, c);
            let fp: f64 = labels.iter().filter(|&&a| a != c).map(|&a| get(a, c)).sum();
            let fneg: f64 = labels.iter().filter(|&&p| p != c).map(|&p| get(c, p)).sum();
            (tp, fp, fneg)
        })
        .collect()
}

pub fn macro_precision(pred: &[usize], actual: &[usize]) -> f64 {
    let c = counts(pred, actual);
    let total: f64 = c
        .iter()
        .map(|&(tp, fp, _)| if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) })
        .sum();
    total / c.len() as f64
}

pub fn macro_f1(pred: &[usize], actual: &[usize]) -> f64 {
    let c = counts(pred, actual);
    let total: f64 = c
        .iter()
        .map(|&(tp, fp, fneg)| {
            let d = 2.0 * tp + fp + fneg;
            if d == 0.0 {
                0.0
            } else {
                2.0 * tp / d
            }
        })
        .sum();
    total / c.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn one_minus_rae(pred: &[f64], actual: &[f64]) -> f64 {
    let m = mean(actual);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..actual.len() {
        num += (pred[i] - actual[i]).abs();
        den += (m - actual[i]).abs();
    }
    if den == 0.0 {
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - num / den
}

pub fn r2(pred: &[f64], actual: &[f64]) -> f64 {
    let m = mean(actual);
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in 0..actual.len() {
        res += (pred[i] - actual[i]).powi(2);
        tot += (actual[i] - m).powi(2);
    }
    if tot == 0.0 {
        return if res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - res / tot
}

// ---- suites shared by the oracle tests and the acceptance report ----

use featgen_core::transform::{evaluate_segment, random_sequence, split_segments, Vocab};
use featgen_core::{FeatureColumn, Grammar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random columns with exact zeros and small discrete code sets.
pub fn random_columns(rng: &mut ChaCha8Rng, n: usize, rows: usize) -> (Vec<FeatureKind>, Vec<Vec<f64>>) {
    let mut kinds = Vec::new();
    let mut cols = Vec::new();
    for _ in 0..n {
        if rng.random_bool(0.3) {
            let k = rng.random_range(2..5u32);
            kinds.push(FeatureKind::Discrete);
            cols.push((0..rows).map(|_| rng.random_range(0..k) as f64).collect());
        } else {
            kinds.push(FeatureKind::Continuous);
            cols.push(
                (0..rows)
                    .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-3.0..3.0) })
                    .collect(),
            );
        }
    }
    (kinds, cols)
}

#[derive(Debug, Default)]
pub struct TransformOracleOutcome {
    pub sequences: usize,
    pub segments: usize,
    pub non_finite: usize,
    pub mismatches: Vec<String>,
}

/// Materializes `n` random valid sequences on random 5-column datasets with
/// the library and with [`naive_segment`]; results must be bit-identical.
pub fn transform_oracle(n: usize, seed: u64) -> TransformOracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TransformOracleOutcome::default();
    for _ in 0..n {
        let (kinds, cols) = random_columns(&mut rng, 5, 40);
        let columns: Vec<FeatureColumn> = kinds
            .iter()
            .zip(&cols)
            .enumerate()
            .map(|(i, (k, v))| FeatureColumn::new(format!("V{}", i + 1), *k, v.clone()))
            .collect();
        let grammar = Grammar::new(kinds.clone());
        let seq = random_sequence(&grammar, &mut rng, 6, 6);
        out.sequences += 1;
        for segment in split_segments(seq.tokens()) {
            out.segments += 1;
            let (kind, expected) = naive_segment(segment, &cols, &kinds);
            match evaluate_segment(segment, &columns) {
                Ok(got) => {
                    if got.kind != kind || got.values != expected {
                        out.mismatches.push(format!("{segment:?}"));
                    }
                }
                Err(_) => {
                    if expected.iter().all(|v| v.is_finite()) {
                        out.mismatches.push(format!("{segment:?} rejected but finite"));
                    } else {
                        out.non_finite += 1;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub mutations: usize,
    pub invalid: usize,
    pub caught: usize,
    /// Mutations where the library and the reference disagree.
    pub disagreements: Vec<String>,
}

fn random_token(rng: &mut ChaCha8Rng, n: usize) -> Token {
    // Feature indices run past N so out-of-range references get produced.
    let vocab = Vocab::new(n + 2);
    vocab.token(rng.random_range(0..vocab.size()))
}

/// Applies `n` random mutations to random valid sequences and compares
/// `Grammar::validate` with [`naive_valid`].
pub fn mutation_fuzz(n: usize, seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FuzzOutcome::default();
    for _ in 0..n {
        let width = rng.random_range(1..6);
        let (kinds, _) = random_columns(&mut rng, width, 1);
        let mut grammar = Grammar::new(kinds.clone());
        grammar.max_len = rng.random_range(4..30);
        grammar.discrete_arithmetic = rng.random_bool(0.5);
        let base = random_sequence(&grammar, &mut rng, 4, 4);
        let mut t = base.tokens().to_vec();
        let n_feat = kinds.len();
        match rng.random_range(0..8) {
            0 => {
                let i = rng.random_range(0..t.len());
                t[i] = random_token(&mut rng, n_feat);
            }
            1 => {
                let i = rng.random_range(0..=t.len());
                t.insert(i, random_token(&mut rng, n_feat));
            }
            2 => {
                let i = rng.random_range(0..t.len());
                t.remove(i);
            }
            3 => {
                let (i, j) = (rng.random_range(0..t.len()), rng.random_range(0..t.len()));
                t.swap(i, j);
            }
            4 => t.push(random_token(&mut rng, n_feat)),
            5 => {
                let keep = rng.random_range(0..t.len());
                t.truncate(keep);
            }
            6 => {
                // overflow the length limit
                let extra = grammar.max_len;
                let fill = t[0];
                for _ in 0..extra {
                    t.insert(0, fill);
                }
            }
            _ => {
                for _ in 0..rng.random_range(1..4) {
                    let i = rng.random_range(0..t.len().max(1));
                    if t.is_empty() {
                        t.push(random_token(&mut rng, n_feat));
                    } else {
                        t[i] = random_token(&mut rng, n_feat);
                    }
                }
            }
        }
        out.mutations += 1;
        let reference = naive_valid(&t, &kinds, grammar.max_len, grammar.discrete_arithmetic);
        let library = grammar.validate(&t).is_ok();
        if !reference {
            out.invalid += 1;
            if !library {
                out.caught += 1;
            }
        }
        if reference != library {
            out.disagreements.push(format!("{t:?} kinds {kinds:?} max_len {}", grammar.max_len));
        }
    }
    out
}

// ---- metric suite ----

#[derive(Debug, Default)]
pub struct MetricOracleOutcome {
    pub vectors: usize,
    pub max_error: f64,
    pub forced_rae_mean: f64,
    pub forced_r2_perfect: f64,
}

/// Compares library metrics with the naive ones on `n` random vectors
/// (half classification, half regression) and evaluates the forced cases.
pub fn metric_oracle(n: usize, seed: u64) -> MetricOracleOutcome {
    use featgen_core::evaluators::metrics as lib;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricOracleOutcome::default();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let len = rng.random_range(1..60);
        if i % 2 == 0 {
            let k = rng.random_range(2..6);
            let actual: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = actual
                .iter()
                .map(|&a| if rng.random_bool(0.6) { a } else { rng.random_range(0..k + 1) })
                .collect();
            worst = worst
                .max((lib::accuracy(&pred, &actual) - accuracy(&pred, &actual)).abs())
                .max((lib::macro_precision(&pred, &actual) - macro_precision(&pred, &actual)).abs())
                .max((lib::macro_f1(&pred, &actual) - macro_f1(&pred, &actual)).abs());
        } else {
            let actual: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let pred: Vec<f64> = actual.iter().map(|a| a + rng.random_range(-2.0..2.0)).collect();
            worst = worst
                .max((lib::one_minus_rae(&pred, &actual) - one_minus_rae(&pred, &actual)).abs())
                .max((lib::r2(&pred, &actual) - r2(&pred, &actual)).abs());
        }
        out.vectors += 1;
    }
    out.max_error = worst;
    let actual: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
    let m = mean(&actual);
    out.forced_rae_mean = lib::one_minus_rae(&vec![m; actual.len()], &actual);
    out.forced_r2_perfect = lib::r2(&actual, &actual);
    out
}
