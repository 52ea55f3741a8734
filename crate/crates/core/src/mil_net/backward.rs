use rayon::prelude::*;

use super::forward::{class_weight, forward, forward_cached, multitask_loss, ClassWeights, PROB_CLAMP};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::feature_store::Label;

/// One training bag: `n × dim` tile features and one label per task.
#[derive(Debug, Clone, Copy)]
pub struct BagExample<'a> {
    pub tiles: &'a [f32],
    pub labels: &'a [Label],
}

fn check_batch(params: &ModelParams, batch: &[BagExample], weights: &[ClassWeights]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let t = params.dims().tasks;
    if weights.len() != t {
        return Err(Error::Shape(format!("{} class weights for {t} tasks", weights.len())));
    }
    if let Some(b) = batch.iter().find(|b| b.labels.len() != t) {
        return Err(Error::Shape(format!("{} labels for {t} tasks", b.labels.len())));
    }
    Ok(())
}

/// Mean loss over the batch.
pub fn batch_loss(params: &ModelParams, batch: &[BagExample], weights: &[ClassWeights]) -> Result<f64> {
    check_batch(params, batch, weights)?;
    let mut total = 0.0;
    for b in batch {
        let out = forward(params, b.tiles)?;
        total += multitask_loss(&out.probs, b.labels, weights)?;
    }
    Ok(total / batch.len() as f64)
}

fn bag_gradient(params: &ModelParams, bag: &BagExample, weights: &[ClassWeights]) -> Result<(f64, ModelParams)> {
    let d = params.dims();
    let (dim, h, a) = (d.dim, d.hidden, d.attn);
    let cache = forward_cached(params, bag.tiles)?;
    let out = &cache.out;
    let loss = multitask_loss(&out.probs, bag.labels, weights)?;
    let supervised = bag.labels.iter().filter(|l| l.value().is_some()).count() as f64;
    let mut g = params.zeros_like();

    // heads
    let z = &out.embedding;
    let mut dz = vec![0.0; h];
    for t in 0..d.tasks {
        let Some(y) = bag.labels[t].value() else { continue };
        let p = out.probs[t];
        let py = p[y as usize];
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&py) {
            continue;
        }
        let scale = class_weight(weights[t], y) / supervised;
        let dl = [scale * (p[0] - (!y) as u8 as f64), scale * (p[1] - y as u8 as f64)];
        let wt = params.head_w(t).to_vec();
        {
            let gw = g.head_w_mut(t);
            for c in 0..2 {
                for j in 0..h {
                    gw[c * h + j] += dl[c] * z[j];
                }
            }
        }
        let gb = g.head_b_mut(t);
        gb[0] += dl[0];
        gb[1] += dl[1];
        for c in 0..2 {
            for j in 0..h {
                dz[j] += wt[c * h + j] * dl[c];
            }
        }
    }

    // attention softmax
    let n = cache.n;
    let alpha = &out.attention;
    let dalpha: Vec<f64> = (0..n)
        .map(|k| cache.enc[k * h..(k + 1) * h].iter().zip(&dz).map(|(e, g)| e * g).sum())
        .collect();
    let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let dscore: Vec<f64> = (0..n).map(|k| alpha[k] * (dalpha[k] - mean)).collect();

    let v = params.att_v();
    let w = params.att_w();
    let u = params.gate_u();
    let we_len = h * dim;
    let mut d_enc_w = vec![0.0; we_len];
    let mut d_enc_b = vec![0.0; h];
    let mut d_att_v = vec![0.0; a * h];
    let mut d_att_w = vec![0.0; a];
    let mut d_gate_u = vec![0.0; if u.is_some() { a * h } else { 0 }];
    let mut dh = vec![0.0; h];
    let mut du_t = vec![0.0; a];
    let mut du_g = vec![0.0; a];
    for k in 0..n {
        let ek = &cache.enc[k * h..(k + 1) * h];
        let tk = &cache.tanh[k * a..(k + 1) * a];
        for j in 0..h {
            dh[j] = alpha[k] * dz[j];
        }
        let ds = dscore[k];
        match u {
            None => {
                for i in 0..a {
                    d_att_w[i] += ds * tk[i];
                    du_t[i] = ds * w[i] * (1.0 - tk[i] * tk[i]);
                }
            }
            Some(_) => {
                let gk = &cache.gate[k * a..(k + 1) * a];
                for i in 0..a {
                    d_att_w[i] += ds * tk[i] * gk[i];
                    du_t[i] = ds * w[i] * gk[i] * (1.0 - tk[i] * tk[i]);
                    du_g[i] = ds * w[i] * tk[i] * gk[i] * (1.0 - gk[i]);
                }
            }
        }
        for i in 0..a {
            let row = &v[i * h..(i + 1) * h];
            let grow = &mut d_att_v[i * h..(i + 1) * h];
            for j in 0..h {
                grow[j] += du_t[i] * ek[j];
                dh[j] += row[j] * du_t[i];
            }
        }
        if let Some(u) = u {
            for i in 0..a {
                let row = &u[i * h..(i + 1) * h];
                let grow = &mut d_gate_u[i * h..(i + 1) * h];
                for j in 0..h {
                    grow[j] += du_g[i] * ek[j];
                    dh[j] += row[j] * du_g[i];
                }
            }
        }
        // relu
        let pk = &cache.pre[k * h..(k + 1) * h];
        let x = &bag.tiles[k * dim..(k + 1) * dim];
        for j in 0..h {
            if pk[j] > 0.0 {
                let dp = dh[j];
                d_enc_b[j] += dp;
                let grow = &mut d_enc_w[j * dim..(j + 1) * dim];
                for (gw, &xv) in grow.iter_mut().zip(x) {
                    *gw += dp * xv as f64;
                }
            }
        }
    }
    g.enc_w_mut().copy_from_slice(&d_enc_w);
    g.enc_b_mut().copy_from_slice(&d_enc_b);
    g.att_v_mut().copy_from_slice(&d_att_v);
    g.att_w_mut().copy_from_slice(&d_att_w);
    if let Some(gu) = g.gate_u_mut() {
        gu.copy_from_slice(&d_gate_u);
    }
    if !g.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss, g))
}

/// Analytic gradient of the mean batch loss, plus that loss.
///
/// Bags are processed in parallel; the per-bag gradients are summed in batch
/// order so the result does not depend on the number of workers.
pub fn backward(
    params: &ModelParams,
    batch: &[BagExample],
    weights: &[ClassWeights],
) -> Result<(f64, ModelParams)> {
    check_batch(params, batch, weights)?;
    let per_bag = batch
        .par_iter()
        .map(|b| bag_gradient(params, b, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_bag {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences, `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    params: &ModelParams,
    batch: &[BagExample],
    weights: &[ClassWeights],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let (_, analytic) = backward(params, batch, weights)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = batch_loss(&probe, batch, weights)?;
        probe.as_mut_slice()[i] = orig - eps;
        let down = batch_loss(&probe, batch, weights)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.as_slice()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
