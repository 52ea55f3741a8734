use rand::Rng;
use rayon::prelude::*;

use super::roc::roc_auc;
use crate::error::{Error, Result};
use crate::rng;

/// Settings shared by every bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 10_000, level: 0.95, seed: 0 }
    }
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Central percentile interval of a statistic over `units` resampled with replacement.
///
/// `stat` receives the resampled unit indices and returns `None` when the
/// resample is degenerate; such resamples are redrawn, with at most
/// `100 · replicates` draws in total. Replicate `r` uses its own keyed stream,
/// so the interval does not depend on thread count.
pub fn percentile_interval<F>(units: usize, cfg: &BootstrapConfig, stat: F) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if cfg.replicates == 0 || units == 0 {
        return Err(Error::Config("bootstrap needs >= 1 replicate and >= 1 unit".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Config(format!("bootstrap level {} outside (0,1)", cfg.level)));
    }
    let cap = 100 * cfg.replicates;
    let results: Vec<(Option<f64>, usize)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, "bootstrap", r as u64);
            let mut idx = vec![0usize; units];
            for attempt in 1..=cap {
                idx.iter_mut().for_each(|i| *i = rng.random_range(0..units));
                if let Some(v) = stat(&idx) {
                    return (Some(v), attempt);
                }
            }
            (None, cap)
        })
        .collect();
    let draws: usize = results.iter().map(|r| r.1).sum();
    if draws > cap || results.iter().any(|r| r.0.is_none()) {
        return Err(Error::DegenerateBootstrap(draws));
    }
    let mut values: Vec<f64> = results.into_iter().filter_map(|r| r.0).collect();
    values.sort_unstable_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((nearest_rank(&values, tail), nearest_rank(&values, 1.0 - tail)))
}

/// Percentile interval of ROC-AUC over resampled (score, label) pairs.
pub fn bootstrap_auc_interval(scores: &[f64], labels: &[bool], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    roc_auc(scores, labels)?;
    percentile_interval(scores.len(), cfg, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        roc_auc(&s, &l).ok()
    })
}
