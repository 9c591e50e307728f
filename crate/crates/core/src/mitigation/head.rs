use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadHyper {
    /// L2 penalty on the weights (not the bias), `l2 / 2 * ||W||^2`.
    pub l2: f64,
    pub max_steps: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_steps: 500,
            grad_tol: 1e-6,
        }
    }
}

/// Linear classifier head, `logits = x W + b` with `W` stored `d x classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainedHead {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    /// Objective after each accepted step (first entry: the initial head).
    pub trace: Vec<f64>,
}

impl RetrainedHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += xi * self.weight[i * self.classes + c];
            }
        }
        out
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let l = self.logits(x);
        u8::from(l[1] > l[0])
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Problem<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    classes: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy plus penalty; fills `grad` (weights then bias).
    fn eval(&self, w: &[f64], b: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (n, d, k) = (self.x.rows(), self.x.cols(), self.classes);
        let mut loss = 0.0;
        let mut g = vec![0.0; d * k + k];
        for i in 0..n {
            let x = self.x.row(i);
            let mut logits = b.to_vec();
            for (j, xj) in x.iter().enumerate() {
                for c in 0..k {
                    logits[c] += xj * w[j * k + c];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let y = self.y[i] as usize;
            loss += lse - logits[y];
            for c in 0..k {
                let dl = (logits[c] - lse).exp() - f64::from(u8::from(c == y));
                for (j, xj) in x.iter().enumerate() {
                    g[j * k + c] += dl * xj;
                }
                g[d * k + c] += dl;
            }
        }
        let inv = 1.0 / n as f64;
        let penalty = 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(out) = grad {
            for (o, gv) in out.iter_mut().zip(&g) {
                *o = gv * inv;
            }
            for (o, wv) in out.iter_mut().zip(w) {
                *o += self.l2 * wv;
            }
        }
        loss * inv + penalty
    }
}

/// Multinomial logistic regression on fixed embeddings, started from the
/// given head and optimised by full-batch gradient descent with Armijo
/// backtracking, so the objective never increases.
pub fn retrain_head(
    x: &Matrix,
    labels: &[u8],
    init_weight: &[f64],
    init_bias: &[f64],
    hyper: &HeadHyper,
) -> Result<RetrainedHead> {
    let (n, d) = (x.rows(), x.cols());
    let classes = init_bias.len();
    if n == 0 || n != labels.len() {
        return Err(Error::invalid(
            "embeddings and labels must be non-empty and equally long",
        ));
    }
    if init_weight.len() != d * classes || classes < 2 {
        return Err(Error::invalid("initial head does not match the embedding dimension"));
    }
    if labels.iter().any(|&l| l as usize >= classes) {
        return Err(Error::invalid("label outside the head's classes"));
    }
    if hyper.l2 < 0.0 || !hyper.l2.is_finite() {
        return Err(Error::invalid("l2 must be finite and non-negative"));
    }
    let prob = Problem {
        x,
        y: labels,
        classes,
        l2: hyper.l2,
    };
    let split = d * classes;
    let mut params: Vec<f64> = init_weight.iter().chain(init_bias).copied().collect();
    let mut grad = vec![0.0; params.len()];
    let mut f = prob.eval(&params[..split], &params[split..], Some(&mut grad));
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..hyper.max_steps {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < hyper.grad_tol {
            break;
        }
        let mut accepted = None;
        let mut t = step;
        for _ in 0..60 {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - t * g).collect();
            let fc = prob.eval(&cand[..split], &cand[split..], None);
            if fc.is_finite() && fc <= f - 1e-4 * t * gnorm2 {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            break;
        };
        if !fc.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch: trace.len(),
                trace,
            });
        }
        params = cand;
        f = prob.eval(&params[..split], &params[split..], Some(&mut grad));
        trace.push(f);
        // Let the step grow again after easy progress.
        step = (t * 2.0).min(1e6);
    }
    Ok(RetrainedHead {
        weight: params[..split].to_vec(),
        bias: params[split..].to_vec(),
        dim: d,
        classes,
        trace,
    })
}
