//! Attention quality against planted tile truth, and linear probes on slide embeddings.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::feature_store::{CohortManifest, Grade, TileClass};
use crate::rng;
use crate::stats::{bootstrap_auc_interval, percentile_interval, roc_auc, wilcoxon_signed_rank_one_tailed, BootstrapConfig, TestResult};
use crate::trainer::{predict, BagPrediction, BagSource, FoldModels, PredictionSet, Scoring};

pub const DEFAULT_TOP_FRACTION: f64 = 0.10;

/// Size of the high-attention set, `ceil(top_frac · n)`.
pub fn top_count(n: usize, top_frac: f64) -> usize {
    // 0.1 * 30 is 3.0000000000000004 in binary
    (((top_frac * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Positions of the `top_count` highest attention values, ties to the lower position.
pub fn top_attention(attention: &[f64], top_frac: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order.truncate(top_count(attention.len(), top_frac));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BagFractions {
    pub bag_id: String,
    pub n_tiles: usize,
    pub n_top: usize,
    /// Per tile class, in `TileClass::ALL` order.
    pub all: [f64; 6],
    pub top: [f64; 6],
}

impl BagFractions {
    pub fn tumor_all(&self) -> f64 {
        self.all[TileClass::Tumor.code() as usize]
    }

    pub fn tumor_top(&self) -> f64 {
        self.top[TileClass::Tumor.code() as usize]
    }
}

fn class_fractions(classes: impl Iterator<Item = TileClass>) -> [f64; 6] {
    let mut counts = [0usize; 6];
    let mut n = 0;
    for c in classes {
        counts[c.code() as usize] += 1;
        n += 1;
    }
    counts.map(|c| c as f64 / n as f64)
}

#[derive(Debug, Clone)]
pub struct AttentionFractions {
    pub bags: Vec<BagFractions>,
    /// One-tailed test that tumor is enriched in the top set.
    pub test: Option<TestResult>,
}

fn bag_classes<'a>(source: &'a dyn BagSource, p: &BagPrediction) -> Result<&'a [TileClass]> {
    source
        .bag(&p.bag_id)?
        .tile_class()
        .ok_or_else(|| Error::MissingTruth(p.bag_id.clone()))
}

/// Tile-class fractions over the inference tiles and over the top-attention
/// subset, per bag, plus the paired one-tailed Wilcoxon test across bags.
pub fn high_attention_fractions(
    preds: &PredictionSet,
    source: &dyn BagSource,
    top_frac: f64,
) -> Result<AttentionFractions> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::Config(format!("top fraction {top_frac} outside (0,1]")));
    }
    let mut bags = Vec::with_capacity(preds.bags.len());
    for p in &preds.bags {
        let classes = bag_classes(source, p)?;
        let top = top_attention(&p.attention, top_frac);
        bags.push(BagFractions {
            bag_id: p.bag_id.clone(),
            n_tiles: p.tiles.len(),
            n_top: top.len(),
            all: class_fractions(p.tiles.iter().map(|&k| classes[k])),
            top: class_fractions(top.iter().map(|&i| classes[p.tiles[i]])),
        });
    }
    let top: Vec<f64> = bags.iter().map(|b| b.tumor_top()).collect();
    let all: Vec<f64> = bags.iter().map(|b| b.tumor_all()).collect();
    let test = match wilcoxon_signed_rank_one_tailed(&top, &all) {
        Ok(t) => Some(t),
        Err(Error::AllZero | Error::TooFew { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(AttentionFractions { bags, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationAuc {
    pub auc: f64,
    pub ci: Option<(f64, f64)>,
    pub n_tiles: usize,
    pub n_bags: usize,
}

/// Pooled ROC-AUC of tile attention against planted tumor labels; the
/// bootstrap resamples whole bags.
pub fn attention_annotation_auc(
    preds: &PredictionSet,
    source: &dyn BagSource,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<AnnotationAuc> {
    let per_bag: Vec<(Vec<f64>, Vec<bool>)> = preds
        .bags
        .iter()
        .map(|p| {
            let truth = source
                .bag(&p.bag_id)?
                .tumor_label()
                .ok_or_else(|| Error::MissingTruth(p.bag_id.clone()))?;
            Ok((p.attention.clone(), p.tiles.iter().map(|&k| truth[k]).collect()))
        })
        .collect::<Result<_>>()?;
    let pooled = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for i in idx {
            s.extend_from_slice(&per_bag[i].0);
            l.extend_from_slice(&per_bag[i].1);
        }
        (s, l)
    };
    let (s, l) = pooled(&mut (0..per_bag.len()));
    let auc = roc_auc(&s, &l)?;
    let ci = bootstrap
        .map(|cfg| {
            percentile_interval(per_bag.len(), cfg, |idx| {
                let (s, l) = pooled(&mut idx.iter().copied());
                roc_auc(&s, &l).ok()
            })
        })
        .transpose()?;
    Ok(AnnotationAuc { auc, ci, n_tiles: s.len(), n_bags: per_bag.len() })
}

/// Attention-pooled slide representation (the input to the task heads),
/// averaged over fold models; one row per bag.
pub fn extract_embeddings(models: &FoldModels, source: &dyn BagSource, bag_ids: &[&str]) -> Result<Vec<Vec<f64>>> {
    Ok(predict(models, source, bag_ids, Scoring::Ensemble)?
        .bags
        .into_iter()
        .map(|b| b.embedding)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Grade,
    PrimarySite,
}

impl ProbeTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Grade => "grade",
            ProbeTask::PrimarySite => "primary_site",
        }
    }

    /// Label per bag; `None` where the manifest has no value.
    pub fn labels(self, manifest: &CohortManifest, bag_ids: &[&str]) -> Result<Vec<Option<bool>>> {
        bag_ids
            .iter()
            .map(|id| {
                let row = manifest
                    .row(id)
                    .ok_or_else(|| Error::IdMismatch(format!("bag {id} missing from manifest")))?;
                Ok(match self {
                    ProbeTask::Grade => row.grade.map(|g| g == Grade::High),
                    ProbeTask::PrimarySite => row.is_primary_site,
                })
            })
            .collect()
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grade" => Ok(ProbeTask::Grade),
            "primary_site" => Ok(ProbeTask::PrimarySite),
            other => Err(Error::Config(format!("probe task {other:?}: expected grade or primary_site"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Ridge penalty on the weights (not the bias); `inf` shrinks them to zero.
    pub l2: f64,
    pub test_fraction: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { l2: 1e-2, test_fraction: 0.2, max_iter: 10_000, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting from the initial point.
    pub losses: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    l2: f64,
}

impl Objective<'_> {
    /// Mean log loss plus `l2/2 · |w|²`; `theta` is `[w…, b]`.
    fn value(&self, theta: &[f64]) -> f64 {
        let d = theta.len() - 1;
        let n = self.x.len() as f64;
        let loss: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(xi, &yi)| {
                let z = xi.iter().zip(&theta[..d]).map(|(a, w)| a * w).sum::<f64>() + theta[d];
                if yi {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum::<f64>()
            / n;
        loss + 0.5 * self.l2 * theta[..d].iter().map(|w| w * w).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = theta.len() - 1;
        let n = self.x.len() as f64;
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let z = xi.iter().zip(&theta[..d]).map(|(a, w)| a * w).sum::<f64>() + theta[d];
            let r = sigmoid(z) - yi as u8 as f64;
            for (gj, a) in g.iter_mut().zip(xi) {
                *gj += r * a;
            }
            g[d] += r;
        }
        g.iter_mut().for_each(|v| *v /= n);
        for j in 0..d {
            g[j] += self.l2 * theta[j];
        }
        g
    }
}

/// L2-regularized logistic regression by full-batch gradient descent with
/// Armijo backtracking, stopping at gradient norm `< tol` or `max_iter` steps.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64, max_iter: usize, tol: f64) -> Result<LogisticFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    if !(l2 >= 0.0) {
        return Err(Error::Config(format!("l2 {l2} must be >= 0")));
    }
    let pos = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
    if l2.is_infinite() {
        let bias = (pos / (1.0 - pos)).ln();
        return Ok(LogisticFit { weights: vec![0.0; d], bias, iterations: 0, converged: true, losses: vec![] });
    }
    let obj = Objective { x, y, l2 };
    let mut theta = vec![0.0; d + 1];
    let mut f = obj.value(&theta);
    let mut losses = vec![f];
    let mut step: f64 = 1.0;
    for it in 0..max_iter {
        let g = obj.gradient(&theta);
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg.sqrt() < tol {
            return Ok(LogisticFit { weights: theta[..d].to_vec(), bias: theta[d], iterations: it, converged: true, losses });
        }
        step = (step * 2.0).min(1e6);
        loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
            let fc = obj.value(&cand);
            if fc <= f - 0.5 * step * gg {
                theta = cand;
                f = fc;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                // no further decrease representable
                return Ok(LogisticFit { weights: theta[..d].to_vec(), bias: theta[d], iterations: it, converged: false, losses });
            }
        }
        if !f.is_finite() {
            return Err(Error::Numeric("probe objective diverged".into()));
        }
        losses.push(f);
    }
    let converged = obj.gradient(&theta).iter().map(|v| v * v).sum::<f64>().sqrt() < tol;
    Ok(LogisticFit { weights: theta[..d].to_vec(), bias: theta[d], iterations: max_iter, converged, losses })
}

/// Seeded stratified split; returns (train, test) row indices, each sorted.
pub fn stratified_split(y: &[bool], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0,1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (cls, tag) in [(false, 0u64), (true, 1u64)] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == cls).collect();
        idx.shuffle(&mut rng::stream(seed, "probe-split", tag));
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        if n_test == 0 || n_test == idx.len() {
            return Err(Error::DegenerateSplit(format!(
                "class {cls} has {} rows, cannot place it in both train and test",
                idx.len()
            )));
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub auc: f64,
    pub ci: Option<(f64, f64)>,
    pub fit: LogisticFit,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeResult {
    pub fn to_json(&self) -> Value {
        json!({
            "task": self.task.as_str(),
            "auc": self.auc,
            "ci": self.ci.map(|(a, b)| vec![a, b]),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "converged": self.fit.converged,
            "iterations": self.fit.iterations,
            "weights": self.fit.weights,
            "bias": self.fit.bias,
        })
    }
}

/// Fits a probe on a stratified 80/20 split of labeled rows and reports the
/// held-out AUC. Rows with a missing label are dropped.
pub fn logistic_probe(
    task: ProbeTask,
    embeddings: &[Vec<f64>],
    labels: &[Option<bool>],
    cfg: &ProbeConfig,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let (x, y): (Vec<Vec<f64>>, Vec<bool>) = embeddings
        .iter()
        .zip(labels)
        .filter_map(|(e, l)| l.map(|l| (e.clone(), l)))
        .unzip();
    let (train, test) = stratified_split(&y, cfg.test_fraction, cfg.seed)?;
    let xs = |idx: &[usize]| idx.iter().map(|&i| x[i].clone()).collect::<Vec<_>>();
    let ys = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
    let fit = fit_logistic(&xs(&train), &ys(&train), cfg.l2, cfg.max_iter, cfg.tol)?;
    let scores: Vec<f64> = test
        .iter()
        .map(|&i| x[i].iter().zip(&fit.weights).map(|(a, w)| a * w).sum::<f64>() + fit.bias)
        .collect();
    let y_test = ys(&test);
    let auc = roc_auc(&scores, &y_test)?;
    let ci = bootstrap.map(|b| bootstrap_auc_interval(&scores, &y_test, b)).transpose()?;
    Ok(ProbeResult { task, auc, ci, fit, n_train: train.len(), n_test: test.len() })
}

/// One `<bag_id>.csv` per bag with `tile_index,x,y,attention`; coordinates are
/// left empty when the bag has none.
pub fn write_heatmaps(preds: &PredictionSet, source: &dyn BagSource, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in &preds.bags {
        let coords = source.bag(&p.bag_id)?.coords();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tile_index", "x", "y", "attention"])?;
        for (&k, a) in p.tiles.iter().zip(&p.attention) {
            let (x, y) = coords.map(|c| (c[k][0].to_string(), c[k][1].to_string())).unwrap_or_default();
            w.write_record([k.to_string(), x, y, a.to_string()])?;
        }
        let path = dir.join(format!("{}.csv", p.bag_id));
        let bytes = w.into_inner().map_err(|e| Error::format("heatmap", e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Attention report as JSON: cohort test, annotation AUC and per-bag fractions.
pub fn attention_report_json(fr: &AttentionFractions, ann: Option<&AnnotationAuc>, top_frac: f64) -> Value {
    let names: Vec<&str> = TileClass::ALL.iter().map(|c| c.name()).collect();
    let bags: Vec<Value> = fr
        .bags
        .iter()
        .map(|b| {
            json!({
                "bag_id": b.bag_id,
                "n_tiles": b.n_tiles,
                "n_top": b.n_top,
                "all": names.iter().zip(b.all).map(|(n, v)| (n.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
                "top": names.iter().zip(b.top).map(|(n, v)| (n.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            })
        })
        .collect();
    let mean = |f: fn(&BagFractions) -> f64| {
        (!fr.bags.is_empty()).then(|| fr.bags.iter().map(f).sum::<f64>() / fr.bags.len() as f64)
    };
    json!({
        "top_fraction": top_frac,
        "tumor_fraction_top_mean": mean(BagFractions::tumor_top),
        "tumor_fraction_all_mean": mean(BagFractions::tumor_all),
        "wilcoxon": fr.test.as_ref().map(|t| json!({"statistic": t.statistic, "p": t.p_value, "n": t.n, "method": format!("{:?}", t.method)})),
        "annotation_auc": ann.map(|a| json!({"auc": a.auc, "ci": a.ci.map(|(l, h)| vec![l, h]), "n_tiles": a.n_tiles, "n_bags": a.n_bags})),
        "bags": bags,
    })
}
