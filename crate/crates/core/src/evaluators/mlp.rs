//! Feed-forward networks: the frozen surrogate used during pretraining and
//! the small downstream MLP.

use rand::seq::SliceRandom;
use rand::RngCore;

use super::EvalError;
use crate::nn::{Adam, Graph, Gradients, Linear, NnError, ParamStore, Tensor, Var};

/// Supervision for an MLP.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>, usize),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(y, _) => y.len(),
            Labels::Values(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates label sets of the same kind.
    pub fn concat(parts: Vec<Labels>) -> Labels {
        let mut iter = parts.into_iter();
        let mut out = iter.next().unwrap_or(Labels::Values(Vec::new()));
        for part in iter {
            match (&mut out, part) {
                (Labels::Classes(a, _), Labels::Classes(b, _)) => a.extend(b),
                (Labels::Values(a), Labels::Values(b)) => a.extend(b),
                _ => panic!("cannot concatenate class and value labels"),
            }
        }
        out
    }

    fn output_dim(&self) -> usize {
        match self {
            Labels::Classes(_, k) => *k,
            Labels::Values(_) => 1,
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(y, k) => Labels::Classes(idx.iter().map(|&i| y[i]).collect(), *k),
            Labels::Values(y) => Labels::Values(idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early-stopping patience on validation loss; `None` trains all epochs.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

/// ReLU multilayer perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub store: ParamStore,
    layers: Vec<Linear>,
    input_dim: usize,
}

fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.cols();
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::matrix(idx.len(), c, data)
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut dyn RngCore) -> Self {
        let mut store = ParamStore::new();
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::glorot(&mut store, &format!("mlp.{i}"), w[0], w[1], rng))
            .collect();
        Mlp {
            store,
            layers,
            input_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, &self.store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Outputs (logits or values), `[rows, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(self.store.get(l.w))?.add_row(self.store.get(l.b));
            if i + 1 < self.layers.len() {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Mean cross-entropy (classes) or mean squared error (values).
    pub fn loss(&self, x: &Tensor, labels: &Labels) -> Result<f64, NnError> {
        let out = self.forward(x)?;
        Ok(match labels {
            Labels::Classes(y, _) => {
                let lp = out.log_softmax_rows(1.0);
                -y.iter().enumerate().map(|(r, &c)| lp.row(r)[c]).sum::<f64>() / y.len() as f64
            }
            Labels::Values(y) => {
                out.data().iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
            }
        })
    }

    fn loss_graph(&self, g: &mut Graph, x: &Tensor, labels: &Labels) -> Result<Var, NnError> {
        let xv = g.constant(x.clone());
        let out = self.forward_graph(g, xv)?;
        match labels {
            Labels::Classes(y, _) => {
                let lp = g.log_softmax(out, 1.0);
                let picked = g.pick(lp, y)?;
                let m = g.mean(picked);
                Ok(g.neg(m))
            }
            Labels::Values(y) => {
                let t = g.constant(Tensor::matrix(y.len(), 1, y.clone()));
                let d = g.sub(out, t)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean(sq))
            }
        }
    }

    /// Mini-batch Adam training; with a validation set and patience, stops
    /// early and restores the best-validation parameters.
    pub fn train(
        &mut self,
        x: &Tensor,
        labels: &Labels,
        val: Option<(&Tensor, &Labels)>,
        config: &TrainConfig,
        rng: &mut dyn RngCore,
    ) -> Result<TrainSummary, EvalError> {
        assert_eq!(labels.output_dim(), self.layers.last().map_or(0, |l| l.out_dim));
        let mut adam = Adam::new(&self.store, config.lr);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut best = (f64::INFINITY, self.store.clone());
        let mut since_best = 0;
        let mut epochs_run = 0;
        for _ in 0..config.epochs {
            epochs_run += 1;
            order.shuffle(rng);
            for batch in order.chunks(config.batch_size.max(1)) {
                let bx = select_rows(x, batch);
                let by = labels.select(batch);
                let mut g = Graph::new();
                let loss = self.loss_graph(&mut g, &bx, &by)?;
                if !g.value(loss).item().is_finite() {
                    return Err(EvalError::Diverged("non-finite training loss".into()));
                }
                let mut grads = Gradients::zeros_like(&self.store);
                g.backward(loss, &mut grads)?;
                grads.clip_norm(1.0);
                adam.step(&mut self.store, &grads)?;
            }
            if let (Some((vx, vy)), Some(patience)) = (val, config.patience) {
                let vl = self.loss(vx, vy)?;
                if !vl.is_finite() {
                    return Err(EvalError::Diverged("non-finite validation loss".into()));
                }
                if vl < best.0 {
                    best = (vl, self.store.clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
        if best.0.is_finite() {
            self.store = best.1;
        }
        let best_val_loss = match val {
            Some((vx, vy)) => self.loss(vx, vy)?,
            None => f64::NAN,
        };
        Ok(TrainSummary {
            epochs_run,
            best_val_loss,
        })
    }
}
