use super::ModelParams;
use crate::error::{Error, Result};
use crate::feature_store::Label;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub neg: f64,
    pub pos: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { neg: 1.0, pos: 1.0 };

    fn for_label(self, positive: bool) -> f64 {
        if positive {
            self.pos
        } else {
            self.neg
        }
    }
}

/// Reversed-prevalence weights: the negative class gets `prevalence`, the positive `1 - prevalence`.
pub fn weights_from_prevalence(prevalence: f64) -> Result<ClassWeights> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(Error::DegeneratePrevalence(prevalence));
    }
    Ok(ClassWeights { neg: prevalence, pos: 1.0 - prevalence })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Per task `[p(negative), p(positive)]`.
    pub probs: Vec<[f64; 2]>,
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Intermediates kept for the backward pass.
pub(crate) struct Cache {
    pub n: usize,
    /// n × hidden
    pub pre: Vec<f64>,
    /// n × hidden
    pub enc: Vec<f64>,
    /// n × attn, tanh branch
    pub tanh: Vec<f64>,
    /// n × attn, sigmoid gate (gated only)
    pub gate: Vec<f64>,
    pub out: ForwardOutput,
}

fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub(crate) fn forward_cached(params: &ModelParams, tiles: &[f32]) -> Result<Cache> {
    let d = params.dims();
    let (dim, h, a) = (d.dim, d.hidden, d.attn);
    if tiles.is_empty() || !tiles.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} feature values is not a positive multiple of dim {dim}",
            tiles.len()
        )));
    }
    if tiles.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite tile feature".into()));
    }
    let n = tiles.len() / dim;
    let (we, be) = (params.enc_w(), params.enc_b());
    let (v, w) = (params.att_v(), params.att_w());
    let u = params.gate_u();

    let mut pre = vec![0.0; n * h];
    let mut enc = vec![0.0; n * h];
    let mut tanh = vec![0.0; n * a];
    let mut gate = if u.is_some() { vec![0.0; n * a] } else { Vec::new() };
    let mut scores = vec![0.0; n];
    for k in 0..n {
        let x = &tiles[k * dim..(k + 1) * dim];
        let pk = &mut pre[k * h..(k + 1) * h];
        let ek = &mut enc[k * h..(k + 1) * h];
        for j in 0..h {
            let row = &we[j * dim..(j + 1) * dim];
            let mut acc = be[j];
            for (wv, &xv) in row.iter().zip(x) {
                acc += wv * xv as f64;
            }
            pk[j] = acc;
            ek[j] = acc.max(0.0);
        }
        let tk = &mut tanh[k * a..(k + 1) * a];
        let mut s = 0.0;
        for i in 0..a {
            let row = &v[i * h..(i + 1) * h];
            let acc: f64 = row.iter().zip(ek.iter()).map(|(p, q)| p * q).sum();
            tk[i] = acc.tanh();
        }
        if let Some(u) = u {
            let gk = &mut gate[k * a..(k + 1) * a];
            for i in 0..a {
                let row = &u[i * h..(i + 1) * h];
                let acc: f64 = row.iter().zip(ek.iter()).map(|(p, q)| p * q).sum();
                gk[i] = 1.0 / (1.0 + (-acc).exp());
                s += w[i] * tk[i] * gk[i];
            }
        } else {
            for i in 0..a {
                s += w[i] * tk[i];
            }
        }
        scores[k] = s;
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut attention: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = attention.iter().sum();
    attention.iter_mut().for_each(|x| *x /= total);

    let mut embedding = vec![0.0; h];
    for k in 0..n {
        let ak = attention[k];
        for (z, e) in embedding.iter_mut().zip(&enc[k * h..(k + 1) * h]) {
            *z += ak * e;
        }
    }
    let probs = (0..d.tasks)
        .map(|t| {
            let wt = params.head_w(t);
            let bt = params.head_b(t);
            let l0 = bt[0] + wt[..h].iter().zip(&embedding).map(|(p, q)| p * q).sum::<f64>();
            let l1 = bt[1] + wt[h..].iter().zip(&embedding).map(|(p, q)| p * q).sum::<f64>();
            softmax2(l0, l1)
        })
        .collect::<Vec<_>>();
    if probs.iter().flatten().chain(&attention).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite forward output".into()));
    }
    Ok(Cache {
        n,
        pre,
        enc,
        tanh,
        gate,
        out: ForwardOutput { probs, attention, embedding },
    })
}

/// Runs the network on one bag of `n × dim` row-major tile features.
pub fn forward(params: &ModelParams, tiles: &[f32]) -> Result<ForwardOutput> {
    forward_cached(params, tiles).map(|c| c.out)
}

/// Weighted cross-entropy averaged over the tasks with a label.
pub fn multitask_loss(probs: &[[f64; 2]], labels: &[Label], weights: &[ClassWeights]) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} tasks, {} labels, {} weights",
            probs.len(),
            labels.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, l), w) in probs.iter().zip(labels).zip(weights) {
        if let Some(y) = l.value() {
            let py = p[y as usize].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += w.for_label(y) * -py.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoSupervision);
    }
    Ok(total / count as f64)
}

pub(crate) fn class_weight(w: ClassWeights, positive: bool) -> f64 {
    w.for_label(positive)
}
