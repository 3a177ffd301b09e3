//! Feature-transformation token language.
//!
//! A program is a token sequence such as `+V1 +V2 EOS -V3 *V1 STOP`; every
//! segment between separators folds left over an accumulator and produces one
//! new column (here `V1 + V2` and `-V3 * V1`). Feature references are to the
//! original columns only.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{train_moments, FeatureColumn, FeatureKind, FeatureStats, Split, TabularDataset};

pub const DEFAULT_MAX_LEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => protected_div(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnaryOp {
    Abs,
    Square,
    Inverse,
    Log,
    Sqrt,
    Cube,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 6] = [
        UnaryOp::Abs,
        UnaryOp::Square,
        UnaryOp::Inverse,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Cube,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::Inverse => "inverse",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Cube => "cube",
        }
    }

    /// Protected forms: `inverse(0) = 0`, `log(x) = ln(|x| + 1)`, `sqrt(x) = sqrt(|x|)`.
    pub fn apply(self, x: f64) -> f64 {
        match self {
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
}

pub fn protected_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    /// Operator fused with an original feature (`+V1`, `/V3`).
    Binary(BinaryOp, usize),
    /// Operator on the accumulator.
    Unary(UnaryOp),
    /// Categorical crossing with a discrete feature.
    Cross(usize),
    Eos,
    Stop,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Binary(op, i) => write!(f, "{}V{}", op.symbol(), i + 1),
            Token::Unary(op) => f.write_str(op.name()),
            Token::Cross(i) => write!(f, "xV{}", i + 1),
            Token::Eos => f.write_str("EOS"),
            Token::Stop => f.write_str("STOP"),
        }
    }
}

impl Token {
    pub fn parse(text: &str) -> Option<Token> {
        match text {
            "EOS" => return Some(Token::Eos),
            "STOP" => return Some(Token::Stop),
            _ => {}
        }
        if let Some(op) = UnaryOp::ALL.iter().find(|op| op.name() == text) {
            return Some(Token::Unary(*op));
        }
        let mut chars = text.chars();
        let head = chars.next()?;
        let rest = chars.as_str().strip_prefix('V')?;
        let idx: usize = rest.parse().ok()?;
        if idx == 0 {
            return None;
        }
        let feature = idx - 1;
        match head {
            '+' => Some(Token::Binary(BinaryOp::Add, feature)),
            '-' => Some(Token::Binary(BinaryOp::Sub, feature)),
            '*' => Some(Token::Binary(BinaryOp::Mul, feature)),
            '/' => Some(Token::Binary(BinaryOp::Div, feature)),
            'x' => Some(Token::Cross(feature)),
            _ => None,
        }
    }

    pub fn feature(&self) -> Option<usize> {
        match self {
            Token::Binary(_, i) | Token::Cross(i) => Some(*i),
            _ => None,
        }
    }
}

/// Dense index space of the action vocabulary for `n` original features:
/// `4n` fused binary tokens, 6 unary tokens, `n` cross tokens, EOS, STOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_features: usize,
}

impl Vocab {
    pub fn new(n_features: usize) -> Self {
        Vocab { n_features }
    }

    pub fn size(&self) -> usize {
        5 * self.n_features + 8
    }

    pub fn eos(&self) -> usize {
        self.size() - 2
    }

    pub fn stop(&self) -> usize {
        self.size() - 1
    }

    pub fn index(&self, token: Token) -> usize {
        let n = self.n_features;
        match token {
            Token::Binary(op, f) => op as usize * n + f,
            Token::Unary(op) => 4 * n + op as usize,
            Token::Cross(f) => 4 * n + 6 + f,
            Token::Eos => self.eos(),
            Token::Stop => self.stop(),
        }
    }

    pub fn token(&self, index: usize) -> Token {
        let n = self.n_features;
        if index < 4 * n {
            Token::Binary(BinaryOp::ALL[index / n], index % n)
        } else if index < 4 * n + 6 {
            Token::Unary(UnaryOp::ALL[index - 4 * n])
        } else if index < 5 * n + 6 {
            Token::Cross(index - 4 * n - 6)
        } else if index == self.eos() {
            Token::Eos
        } else {
            assert_eq!(index, self.stop(), "token index {index} out of range");
            Token::Stop
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("empty token list")]
    Empty,
    #[error("sequence does not end with STOP")]
    MissingStop,
    #[error("token after STOP at position {0}")]
    TrailingTokens(usize),
    #[error("empty segment at position {0}")]
    EmptySegment(usize),
    #[error("segment starts with a unary operator at position {0}")]
    UnaryFirst(usize),
    #[error("feature V{} at position {pos} is out of range (N = {n})", .feature + 1)]
    BadFeatureIndex { pos: usize, feature: usize, n: usize },
    #[error("kind mismatch at position {pos}: {reason}")]
    KindMismatch { pos: usize, reason: &'static str },
    #[error("sequence longer than max length {0}")]
    TooLong(usize),
}

/// Typing rules of the language for one dataset schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub kinds: Vec<FeatureKind>,
    pub max_len: usize,
    /// Allow `+Vd` on discrete (label-encoded) features.
    pub discrete_arithmetic: bool,
}

impl Grammar {
    pub fn new(kinds: Vec<FeatureKind>) -> Self {
        Grammar {
            kinds,
            max_len: DEFAULT_MAX_LEN,
            discrete_arithmetic: true,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.kinds.len())
    }

    /// Allowed-token mask for the next position.
    pub fn mask(&self, state: &GrammarState) -> Vec<bool> {
        let vocab = self.vocab();
        (0..vocab.size()).map(|i| state.check(self, vocab.token(i)).is_ok()).collect()
    }

    pub fn validate(&self, tokens: &[Token]) -> Result<TransformSequence, ValidationError> {
        if tokens.is_empty() {
            return Err(ValidationError::Empty);
        }
        let mut state = GrammarState::default();
        for &t in tokens {
            state.check(self, t)?;
            state.advance_with(self, t);
        }
        if !state.done {
            return Err(ValidationError::MissingStop);
        }
        Ok(TransformSequence { tokens: tokens.to_vec() })
    }
}

/// Incremental parser state shared by validation and masked decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GrammarState {
    pub len: usize,
    /// Kind of the current accumulator; `None` at a segment start.
    pub acc: Option<FeatureKind>,
    pub segments: usize,
    pub done: bool,
}

impl GrammarState {
    pub fn at_segment_start(&self) -> bool {
        self.acc.is_none()
    }

    pub fn check(&self, grammar: &Grammar, token: Token) -> Result<(), ValidationError> {
        let pos = self.len;
        if self.done {
            return Err(ValidationError::TrailingTokens(pos));
        }
        if pos + 1 > grammar.max_len {
            return Err(ValidationError::TooLong(grammar.max_len));
        }
        if pos + 1 == grammar.max_len && token != Token::Stop {
            return Err(ValidationError::TooLong(grammar.max_len));
        }
        let n = grammar.kinds.len();
        if let Some(feature) = token.feature() {
            if feature >= n {
                return Err(ValidationError::BadFeatureIndex { pos, feature, n });
            }
        }
        match token {
            Token::Stop => Ok(()),
            Token::Eos => match self.acc {
                None => Err(ValidationError::EmptySegment(pos)),
                Some(_) => Ok(()),
            },
            Token::Unary(_) => match self.acc {
                None => Err(ValidationError::UnaryFirst(pos)),
                Some(FeatureKind::Discrete) => Err(ValidationError::KindMismatch {
                    pos,
                    reason: "unary operator on a discrete accumulator",
                }),
                Some(FeatureKind::Continuous) => Ok(()),
            },
            Token::Binary(op, f) => {
                if grammar.kinds[f] == FeatureKind::Discrete && !(op == BinaryOp::Add && grammar.discrete_arithmetic) {
                    return Err(ValidationError::KindMismatch {
                        pos,
                        reason: "arithmetic on a discrete feature",
                    });
                }
                if self.acc == Some(FeatureKind::Discrete) && !grammar.discrete_arithmetic {
                    return Err(ValidationError::KindMismatch {
                        pos,
                        reason: "arithmetic on a discrete accumulator",
                    });
                }
                Ok(())
            }
            Token::Cross(f) => {
                if grammar.kinds[f] != FeatureKind::Discrete {
                    return Err(ValidationError::KindMismatch {
                        pos,
                        reason: "cross with a continuous feature",
                    });
                }
                if self.acc == Some(FeatureKind::Continuous) {
                    return Err(ValidationError::KindMismatch {
                        pos,
                        reason: "cross on a continuous accumulator",
                    });
                }
                Ok(())
            }
        }
    }

    /// Assumes `check` passed. Kinds are needed for the first token.
    pub fn advance_with(&mut self, grammar: &Grammar, token: Token) {
        self.len += 1;
        match token {
            Token::Stop => {
                if self.acc.is_some() {
                    self.segments += 1;
                }
                self.acc = None;
                self.done = true;
            }
            Token::Eos => {
                self.segments += 1;
                self.acc = None;
            }
            Token::Unary(_) => self.acc = Some(FeatureKind::Continuous),
            Token::Cross(_) => self.acc = Some(FeatureKind::Discrete),
            Token::Binary(_, f) => {
                self.acc = Some(match self.acc {
                    None => grammar.kinds.get(f).copied().unwrap_or(FeatureKind::Continuous),
                    Some(_) => FeatureKind::Continuous,
                })
            }
        }
    }
}

/// Uniformly random valid sequence with 1..=`max_features` segments of
/// 1..=`max_segment_len` operation tokens each. Used to diversify
/// surrogate training data and in tests.
pub fn random_sequence<R: rand::Rng + ?Sized>(
    grammar: &Grammar,
    rng: &mut R,
    max_features: usize,
    max_segment_len: usize,
) -> TransformSequence {
    let vocab = grammar.vocab();
    let features = rng.random_range(1..=max_features.max(1));
    let mut tokens = Vec::new();
    let mut state = GrammarState::default();
    for k in 0..features {
        let len = rng.random_range(1..=max_segment_len.max(1));
        // room for this segment's tokens, its terminator and a final STOP
        if state.len + len + 2 > grammar.max_len {
            break;
        }
        for _ in 0..len {
            let mask = grammar.mask(&state);
            let choices: Vec<usize> = (0..vocab.size())
                .filter(|&i| mask[i] && i != vocab.eos() && i != vocab.stop())
                .collect();
            if choices.is_empty() {
                break;
            }
            let t = vocab.token(choices[rng.random_range(0..choices.len())]);
            state.advance_with(grammar, t);
            tokens.push(t);
        }
        let end = if k + 1 == features { Token::Stop } else { Token::Eos };
        state.advance_with(grammar, end);
        tokens.push(end);
    }
    if !state.done {
        tokens.push(Token::Stop);
    }
    grammar
        .validate(&tokens)
        .expect("random_sequence only emits allowed tokens")
}

/// A validated token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransformSequence {
    tokens: Vec<Token>,
}

impl TransformSequence {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn empty() -> Self {
        TransformSequence { tokens: vec![Token::Stop] }
    }

    /// Segments without their EOS/STOP terminators.
    pub fn segments(&self) -> Vec<&[Token]> {
        split_segments(&self.tokens)
    }

    pub fn to_text(&self) -> String {
        program_text(&self.segments())
    }
}

impl fmt::Display for TransformSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(Token::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

pub fn split_segments(tokens: &[Token]) -> Vec<&[Token]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t, Token::Eos | Token::Stop) {
            if i > start {
                out.push(&tokens[start..i]);
            }
            start = i + 1;
            if *t == Token::Stop {
                break;
            }
        }
    }
    out
}

pub fn segment_text(segment: &[Token]) -> String {
    let parts: Vec<String> = segment.iter().map(Token::to_string).collect();
    parts.join(" ")
}

/// One segment per line.
pub fn program_text(segments: &[&[Token]]) -> String {
    let mut s = String::new();
    for seg in segments {
        s.push_str(&segment_text(seg));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Parses the line-per-segment text format into a token list ending in STOP.
/// Blank lines and `#` comments are ignored.
pub fn parse_program(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let mut offset = 0;
        for word in content.split(' ') {
            if !word.trim().is_empty() {
                let word_trim = word.trim();
                let tok = Token::parse(word_trim).filter(|t| !matches!(t, Token::Eos | Token::Stop));
                match tok {
                    Some(t) => tokens.push(t),
                    None => {
                        return Err(ParseError {
                            line: lineno + 1,
                            column: offset + 1 + (word.len() - word.trim_start().len()),
                            message: format!("unknown token {word_trim:?}"),
                        })
                    }
                }
            }
            offset += word.len() + 1;
        }
        tokens.push(Token::Eos);
    }
    match tokens.last_mut() {
        Some(last) => *last = Token::Stop,
        None => tokens.push(Token::Stop),
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaterializeError {
    #[error("segment `{segment}` produced a non-finite value at row {row}")]
    NonFinite { segment: String, row: usize },
    #[error("invalid segment `{0}`")]
    Invalid(String),
}

/// Raw (pre-standardization) values of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentValue {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    /// When the segment starts with a crossing: sorted distinct code tuples
    /// of the crossed features (ascending index); a row's code is its
    /// tuple's rank.
    pub categories: Option<Vec<Vec<u32>>>,
}

/// Left-fold evaluation of one segment over the original columns.
pub fn evaluate_segment(segment: &[Token], columns: &[FeatureColumn]) -> Result<SegmentValue, MaterializeError> {
    evaluate_segment_with(segment, columns, None)
}

/// Length of the leading run of tokens that keeps the accumulator discrete:
/// a cross or `+Vd` on a discrete feature, then crosses.
fn discrete_prefix(segment: &[Token], columns: &[FeatureColumn]) -> usize {
    let starts = match segment.first() {
        Some(Token::Cross(_)) => true,
        Some(&Token::Binary(BinaryOp::Add, f)) => columns.get(f).map(|c| c.kind) == Some(FeatureKind::Discrete),
        _ => false,
    };
    if !starts {
        return 0;
    }
    1 + segment[1..].iter().take_while(|t| matches!(t, Token::Cross(_))).count()
}

/// Like [`evaluate_segment`], but crossings are coded against `known`
/// categories (unseen tuples get `known.len()`).
pub fn evaluate_segment_with(
    segment: &[Token],
    columns: &[FeatureColumn],
    known: Option<&[Vec<u32>]>,
) -> Result<SegmentValue, MaterializeError> {
    let text = || segment_text(segment);
    let first = *segment.first().ok_or_else(|| MaterializeError::Invalid(String::new()))?;
    let col = |f: usize| columns.get(f).map(|c| &c.values).ok_or_else(|| MaterializeError::Invalid(text()));
    let prefix = discrete_prefix(segment, columns);

    let mut categories = None;
    let mut acc: Vec<f64> = if prefix == segment.len() || prefix > 1 {
        let mut features: Vec<usize> = segment[..prefix].iter().filter_map(Token::feature).collect();
        features.sort_unstable();
        features.dedup();
        if features.iter().any(|&f| f >= columns.len()) {
            return Err(MaterializeError::Invalid(text()));
        }
        let tuples: Vec<Vec<u32>> = (0..columns[0].values.len())
            .map(|r| features.iter().map(|&f| columns[f].values[r] as u32).collect())
            .collect();
        let cats: Vec<Vec<u32>> = match known {
            Some(k) => k.to_vec(),
            None => tuples.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
        };
        let values = tuples
            .iter()
            .map(|t| cats.binary_search(t).map(|i| i as f64).unwrap_or(cats.len() as f64))
            .collect();
        categories = Some(cats);
        values
    } else {
        match first {
            Token::Binary(BinaryOp::Sub, f) => col(f)?.iter().map(|v| -v).collect(),
            Token::Binary(_, f) | Token::Cross(f) => col(f)?.clone(),
            _ => return Err(MaterializeError::Invalid(text())),
        }
    };
    if prefix == segment.len() {
        return Ok(SegmentValue {
            kind: FeatureKind::Discrete,
            values: acc,
            categories,
        });
    }
    check_finite(&acc, segment)?;
    for &tok in &segment[prefix.max(1)..] {
        match tok {
            Token::Binary(op, f) => {
                for (a, b) in acc.iter_mut().zip(col(f)?) {
                    *a = op.apply(*a, *b);
                }
            }
            Token::Unary(op) => {
                for a in acc.iter_mut() {
                    *a = op.apply(*a);
                }
            }
            _ => return Err(MaterializeError::Invalid(text())),
        }
        check_finite(&acc, segment)?;
    }
    Ok(SegmentValue {
        kind: FeatureKind::Continuous,
        values: acc,
        categories,
    })
}

fn check_finite(values: &[f64], segment: &[Token]) -> Result<(), MaterializeError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(MaterializeError::NonFinite {
            segment: segment_text(segment),
            row,
        }),
        None => Ok(()),
    }
}

/// Everything needed to recompute a generated column on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSpec {
    pub segment: String,
    pub kind: FeatureKind,
    /// Train-split (mean, std) for continuous columns.
    pub standardization: Option<(f64, f64)>,
    pub categories: Option<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFeature {
    pub column: FeatureColumn,
    pub spec: GeneratedSpec,
    pub signature: Signature,
}

fn standardize_with(values: &[f64], mean: f64, std: f64) -> Vec<f64> {
    values
        .iter()
        .map(|v| if std > 0.0 { (v - mean) / std } else { 0.0 })
        .collect()
}

/// Materializes one segment; continuous results are standardized with
/// train-split statistics of the generated values.
pub fn materialize_segment(segment: &[Token], dataset: &TabularDataset) -> Result<GeneratedFeature, MaterializeError> {
    let raw = evaluate_segment(segment, &dataset.columns)?;
    let name = segment_text(segment);
    let (values, standardization) = match raw.kind {
        FeatureKind::Continuous => {
            let mut train = dataset.rows_in(Split::Train);
            if train.is_empty() {
                train = (0..dataset.n_rows()).collect();
            }
            let (mean, std) = train_moments(&raw.values, &train);
            (standardize_with(&raw.values, mean, std), Some((mean, std)))
        }
        FeatureKind::Discrete => (raw.values, None),
    };
    check_finite(&values, segment)?;
    let stats = FeatureStats::compute(&values, Some(0.0));
    Ok(GeneratedFeature {
        column: FeatureColumn {
            name: name.clone(),
            kind: raw.kind,
            values,
            stats,
        },
        spec: GeneratedSpec {
            segment: name,
            kind: raw.kind,
            standardization,
            categories: raw.categories,
        },
        signature: canonical_signature(segment),
    })
}

/// Materializes every segment of a sequence; a failed segment yields its
/// diagnostic in place of a column.
pub fn materialize(sequence: &TransformSequence, dataset: &TabularDataset) -> Vec<Result<GeneratedFeature, MaterializeError>> {
    sequence.segments().into_iter().map(|s| materialize_segment(s, dataset)).collect()
}

/// Recomputes a generated column on new data using stored training statistics.
pub fn apply_spec(spec: &GeneratedSpec, columns: &[FeatureColumn]) -> Result<FeatureColumn, MaterializeError> {
    let tokens = parse_program(&spec.segment).map_err(|_| MaterializeError::Invalid(spec.segment.clone()))?;
    let segment = &tokens[..tokens.len() - 1];
    let raw = evaluate_segment_with(segment, columns, spec.categories.as_deref())?;
    let values = match (raw.kind, &spec.standardization) {
        (FeatureKind::Continuous, Some((mean, std))) => standardize_with(&raw.values, *mean, *std),
        (FeatureKind::Discrete, _) => raw.values,
        _ => return Err(MaterializeError::Invalid(spec.segment.clone())),
    };
    check_finite(&values, segment)?;
    Ok(FeatureColumn::new(spec.segment.clone(), spec.kind, values))
}

/// Stable identity of an algebraically normalized segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature {
    pub hash: u64,
    pub canonical: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Feat(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Cross(Vec<usize>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Feat(i) => write!(f, "V{}", i + 1),
            Expr::Neg(e) => write!(f, "neg({e})"),
            Expr::Add(a, b) => write!(f, "add({a},{b})"),
            Expr::Mul(a, b) => write!(f, "mul({a},{b})"),
            Expr::Div(a, b) => write!(f, "div({a},{b})"),
            Expr::Unary(op, e) => write!(f, "{}({e})", op.name()),
            Expr::Cross(fs) => {
                let parts: Vec<String> = fs.iter().map(|i| format!("V{}", i + 1)).collect();
                write!(f, "cross({})", parts.join(","))
            }
        }
    }
}

// Every rewrite below is exact in IEEE arithmetic (sign symmetry of
// rounding, commutativity of a single add/mul), so equal forms evaluate to
// identical columns. Associativity is deliberately not used.
fn neg(e: Expr) -> Expr {
    match e {
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn strip_neg(e: Expr) -> (bool, Expr) {
    match e {
        Expr::Neg(inner) => (true, *inner),
        other => (false, other),
    }
}

fn ordered(a: Expr, b: Expr) -> (Expr, Expr) {
    if a.to_string() <= b.to_string() {
        (a, b)
    } else {
        (b, a)
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Neg(x), Expr::Neg(y)) => {
            let (x, y) = ordered(*x, *y);
            neg(Expr::Add(Box::new(x), Box::new(y)))
        }
        (a, b) => {
            let (a, b) = ordered(a, b);
            Expr::Add(Box::new(a), Box::new(b))
        }
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    let (na, a) = strip_neg(a);
    let (nb, b) = strip_neg(b);
    let (a, b) = ordered(a, b);
    let m = Expr::Mul(Box::new(a), Box::new(b));
    if na ^ nb {
        neg(m)
    } else {
        m
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    let (na, a) = strip_neg(a);
    let (nb, b) = strip_neg(b);
    let d = Expr::Div(Box::new(a), Box::new(b));
    if na ^ nb {
        neg(d)
    } else {
        d
    }
}

fn unary(op: UnaryOp, e: Expr) -> Expr {
    use UnaryOp::*;
    match (op, e) {
        // even functions ignore the sign
        (Abs | Square | Log | Sqrt, Expr::Neg(x)) => unary(op, *x),
        (Cube | Inverse, Expr::Neg(x)) => neg(unary(op, *x)),
        (Abs | Square | Log | Sqrt, Expr::Unary(Abs, x)) => unary(op, *x),
        // already non-negative
        (Abs, e @ Expr::Unary(Square | Log | Sqrt, _)) => e,
        (op, e) => Expr::Unary(op, Box::new(e)),
    }
}

fn cross(a: Expr, f: usize) -> Option<Expr> {
    let mut features = match a {
        Expr::Cross(fs) => fs,
        Expr::Feat(i) => vec![i],
        _ => return None,
    };
    features.push(f);
    features.sort_unstable();
    features.dedup();
    Some(Expr::Cross(features))
}

fn canonical_expr(segment: &[Token]) -> Option<Expr> {
    let mut iter = segment.iter();
    let mut acc = match *iter.next()? {
        Token::Binary(BinaryOp::Sub, f) => Expr::Neg(Box::new(Expr::Feat(f))),
        Token::Binary(_, f) => Expr::Feat(f),
        Token::Cross(f) => Expr::Cross(vec![f]),
        _ => return None,
    };
    for &tok in iter {
        acc = match tok {
            Token::Binary(BinaryOp::Add, f) => add(acc, Expr::Feat(f)),
            Token::Binary(BinaryOp::Sub, f) => add(acc, neg(Expr::Feat(f))),
            Token::Binary(BinaryOp::Mul, f) => mul(acc, Expr::Feat(f)),
            Token::Binary(BinaryOp::Div, f) => div(acc, Expr::Feat(f)),
            Token::Unary(op) => unary(op, acc),
            Token::Cross(f) => cross(acc, f)?,
            Token::Eos | Token::Stop => return None,
        };
    }
    Some(acc)
}

pub fn canonical_signature(segment: &[Token]) -> Signature {
    let canonical = match canonical_expr(segment) {
        // a discrete copy `+Vd` partitions rows like `cross(Vd)`
        Some(e) => e.to_string(),
        None => format!("invalid:{}", segment_text(segment)),
    };
    let mut hasher = DefaultHasher::new();
    canonical.hash(&mut hasher);
    Signature {
        hash: hasher.finish(),
        canonical,
    }
}

/// Segments of a program with their signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProgram {
    pub segments: Vec<Vec<Token>>,
    pub signatures: Vec<Signature>,
}

impl FeatureProgram {
    pub fn from_sequence(sequence: &TransformSequence) -> Self {
        let segments: Vec<Vec<Token>> = sequence.segments().into_iter().map(<[Token]>::to_vec).collect();
        let signatures = segments.iter().map(|s| canonical_signature(s)).collect();
        FeatureProgram { segments, signatures }
    }

    /// Program from the segments of a token list (terminators dropped).
    pub fn from_tokens(tokens: &[Token]) -> Self {
        Self::from_segments(split_segments(tokens).into_iter().map(<[Token]>::to_vec).collect())
    }

    pub fn from_segments(segments: Vec<Vec<Token>>) -> Self {
        let signatures = segments.iter().map(|s| canonical_signature(s)).collect();
        FeatureProgram { segments, signatures }
    }

    pub fn empty() -> Self {
        FeatureProgram {
            segments: Vec::new(),
            signatures: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn to_text(&self) -> String {
        let refs: Vec<&[Token]> = self.segments.iter().map(Vec::as_slice).collect();
        program_text(&refs)
    }
}

/// Result of [`apply_program`]: the augmented dataset plus what was kept.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub dataset: TabularDataset,
    pub generated: Vec<GeneratedFeature>,
    pub rejected: Vec<String>,
}

const DUPLICATE_TOL: f64 = 1e-9;

fn same_column(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DUPLICATE_TOL)
}

/// Appends the program's distinct, finite features to the dataset, dropping
/// repeated signatures and copies of existing columns, up to `cap` new columns.
pub fn apply_program(program: &FeatureProgram, dataset: &TabularDataset, cap: usize) -> Augmented {
    let mut out = dataset.clone();
    let mut generated: Vec<GeneratedFeature> = Vec::new();
    let mut rejected = Vec::new();
    let mut seen: HashSet<Signature> = HashSet::new();
    for segment in &program.segments {
        if generated.len() >= cap {
            rejected.push(format!("{}: generated-feature cap {cap} reached", segment_text(segment)));
            continue;
        }
        let sig = canonical_signature(segment);
        if seen.contains(&sig) {
            rejected.push(format!("{}: duplicate signature", segment_text(segment)));
            continue;
        }
        seen.insert(sig);
        match materialize_segment(segment, dataset) {
            Ok(feature) => {
                let dup_original = out.columns.iter().any(|c| same_column(&c.values, &feature.column.values));
                if dup_original {
                    rejected.push(format!("{}: identical to an existing column", feature.column.name));
                    continue;
                }
                out.columns.push(feature.column.clone());
                generated.push(feature);
            }
            Err(e) => {
                log::debug!("rejected feature: {e}");
                rejected.push(e.to_string());
            }
        }
    }
    Augmented {
        dataset: out,
        generated,
        rejected,
    }
}

/// Hash of the original schema (feature count and kinds).
pub fn schema_fingerprint(kinds: &[FeatureKind]) -> u64 {
    // Stored in checkpoints, so it must not depend on the std hasher.
    kinds
        .iter()
        .fold(crate::seed::derive(kinds.len() as u64, "schema"), |h, k| crate::seed::derive(h, k.as_str()))
}
