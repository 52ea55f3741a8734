use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::bootstrap::{bootstrap_auc_interval, percentile_interval, BootstrapConfig};
use super::hypothesis::{paired_t_one_tailed, pearson, wilcoxon_signed_rank_one_tailed, TestResult};
use super::roc::{roc_auc, roc_curve};
use crate::error::{Error, Result};

const SUMMARY_KEY: &str = "summary";

/// Metrics for one target on one evaluation subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    /// `None` when the subset lacks positives or negatives.
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub ci: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<(f64, f64)>>,
    /// Per-fold test AUCs when `auc` is their mean over cross-validation folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_aucs: Option<Vec<Option<f64>>>,
}

impl TargetMetrics {
    pub fn is_defined(&self) -> bool {
        self.auc.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean AUC over defined targets.
    pub mean: Option<f64>,
    /// Sample standard deviation of AUC over defined targets.
    pub sd: Option<f64>,
    /// Number of defined targets.
    pub n: usize,
}

/// Per-target ROC-AUC with optional bootstrap intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub targets: BTreeMap<String, TargetMetrics>,
    pub summary: Summary,
}

/// Scores and labels for one target; `None` labels are skipped.
pub struct TargetScores<'a> {
    pub target_id: &'a str,
    pub scores: &'a [f64],
    pub labels: &'a [Option<bool>],
}

/// Mean of the per-fold AUCs over folds holding both classes, plus the
/// per-fold values. `folds[i]` is the fold of pair `i`.
pub fn fold_mean_auc(scores: &[f64], labels: &[bool], folds: &[usize], k: usize) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    let mut per = Vec::with_capacity(k);
    for f in 0..k {
        let (s, l): (Vec<f64>, Vec<bool>) =
            (0..scores.len()).filter(|&i| folds[i] == f).map(|i| (scores[i], labels[i])).unzip();
        per.push(match roc_auc(&s, &l) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok((mean, per))
}

fn summarize(targets: &BTreeMap<String, TargetMetrics>) -> Summary {
    let aucs: Vec<f64> = targets.values().filter_map(|m| m.auc).collect();
    let n = aucs.len();
    let mean = (n > 0).then(|| aucs.iter().sum::<f64>() / n as f64);
    let sd = mean.filter(|_| n > 1).map(|m| {
        (aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    Summary { mean, sd, n }
}

impl MetricsReport {
    pub fn from_targets(targets: BTreeMap<String, TargetMetrics>) -> Self {
        let summary = summarize(&targets);
        MetricsReport { targets, summary }
    }

    /// Evaluates each target. Targets with a single class present are kept as
    /// undefined and left out of the summary.
    pub fn evaluate(
        inputs: &[TargetScores],
        bootstrap: Option<&BootstrapConfig>,
        with_roc: bool,
    ) -> Result<Self> {
        Self::evaluate_impl(inputs, None, bootstrap, with_roc)
    }

    /// Cross-validation evaluation: each target's AUC is the mean of the
    /// per-fold test AUCs, `folds[i]` being the test fold of bag `i`. The
    /// bootstrap resamples bags and recomputes that mean; the ROC curve is
    /// drawn over the pooled scores.
    pub fn evaluate_folds(
        inputs: &[TargetScores],
        folds: &[usize],
        bootstrap: Option<&BootstrapConfig>,
        with_roc: bool,
    ) -> Result<Self> {
        Self::evaluate_impl(inputs, Some(folds), bootstrap, with_roc)
    }

    fn evaluate_impl(
        inputs: &[TargetScores],
        folds: Option<&[usize]>,
        bootstrap: Option<&BootstrapConfig>,
        with_roc: bool,
    ) -> Result<Self> {
        let k = folds.map_or(0, |f| f.iter().max().map_or(0, |m| m + 1));
        let mut out = BTreeMap::new();
        for t in inputs {
            if t.scores.len() != t.labels.len() || folds.is_some_and(|f| f.len() != t.scores.len()) {
                return Err(Error::Shape(format!("target {}: scores, labels and folds differ in length", t.target_id)));
            }
            let keep: Vec<usize> = (0..t.scores.len()).filter(|&i| t.labels[i].is_some()).collect();
            let s: Vec<f64> = keep.iter().map(|&i| t.scores[i]).collect();
            let l: Vec<bool> = keep.iter().map(|&i| t.labels[i] == Some(true)).collect();
            let n_pos = l.iter().filter(|&&x| x).count();
            let n_neg = l.len() - n_pos;
            let undefined = TargetMetrics { auc: None, n_pos, n_neg, ci: None, roc: None, fold_aucs: None };
            let metrics = match folds {
                None => match roc_auc(&s, &l) {
                    Ok(auc) => TargetMetrics {
                        auc: Some(auc),
                        n_pos,
                        n_neg,
                        ci: bootstrap.map(|b| bootstrap_auc_interval(&s, &l, b)).transpose()?,
                        roc: if with_roc { Some(roc_curve(&s, &l)?) } else { None },
                        fold_aucs: None,
                    },
                    Err(Error::UndefinedAuc) => undefined,
                    Err(e) => return Err(e),
                },
                Some(folds) => {
                    let f: Vec<usize> = keep.iter().map(|&i| folds[i]).collect();
                    match fold_mean_auc(&s, &l, &f, k)? {
                        (Some(auc), per) => {
                            let ci = bootstrap
                                .map(|b| {
                                    percentile_interval(s.len(), b, |idx| {
                                        let rs: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
                                        let rl: Vec<bool> = idx.iter().map(|&i| l[i]).collect();
                                        let rf: Vec<usize> = idx.iter().map(|&i| f[i]).collect();
                                        fold_mean_auc(&rs, &rl, &rf, k).ok()?.0
                                    })
                                })
                                .transpose()?;
                            TargetMetrics {
                                auc: Some(auc),
                                n_pos,
                                n_neg,
                                ci,
                                roc: if with_roc { Some(roc_curve(&s, &l)?) } else { None },
                                fold_aucs: Some(per),
                            }
                        }
                        (None, per) => TargetMetrics { fold_aucs: Some(per), ..undefined },
                    }
                }
            };
            out.insert(t.target_id.to_string(), metrics);
        }
        Ok(Self::from_targets(out))
    }

    /// Combines reports over disjoint target sets.
    pub fn merge(reports: impl IntoIterator<Item = MetricsReport>) -> Result<Self> {
        let mut all = BTreeMap::new();
        for r in reports {
            for (k, v) in r.targets {
                if all.insert(k.clone(), v).is_some() {
                    return Err(Error::TargetMismatch(format!("target {k} appears in two reports")));
                }
            }
        }
        Ok(Self::from_targets(all))
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, t) in &self.targets {
            let mut v = json!({
                "auc": t.auc,
                "n_pos": t.n_pos,
                "n_neg": t.n_neg,
                "ci": t.ci.map(|(lo, hi)| vec![lo, hi]),
                "status": if t.is_defined() { "ok" } else { "undefined" },
            });
            if let Some(per) = &t.fold_aucs {
                v["fold_aucs"] = json!(per);
            }
            if let Some(roc) = &t.roc {
                v["roc"] = json!(roc.iter().map(|(x, y)| [*x, *y]).collect::<Vec<_>>());
            }
            m.insert(k.clone(), v);
        }
        m.insert(SUMMARY_KEY.into(), serde_json::to_value(&self.summary).expect("summary serializes"));
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::format("report", "not a JSON object"))?;
        let mut targets = BTreeMap::new();
        for (k, t) in obj {
            if k == SUMMARY_KEY {
                continue;
            }
            let auc = t.get("auc").and_then(Value::as_f64);
            let ci = t.get("ci").and_then(Value::as_array).and_then(|a| {
                Some((a.first()?.as_f64()?, a.get(1)?.as_f64()?))
            });
            let roc = t.get("roc").and_then(Value::as_array).map(|pts| {
                pts.iter()
                    .filter_map(|p| Some((p.get(0)?.as_f64()?, p.get(1)?.as_f64()?)))
                    .collect()
            });
            let fold_aucs = t
                .get("fold_aucs")
                .and_then(Value::as_array)
                .map(|a| a.iter().map(Value::as_f64).collect());
            let count = |key: &str| {
                t.get(key)
                    .and_then(Value::as_u64)
                    .map(|x| x as usize)
                    .ok_or_else(|| Error::format("report", format!("target {k} lacks {key}")))
            };
            targets.insert(k.clone(), TargetMetrics { auc, n_pos: count("n_pos")?, n_neg: count("n_neg")?, ci, roc, fold_aucs });
        }
        Ok(Self::from_targets(targets))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_json())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_json(path)?)
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairedTest {
    T,
    Wilcoxon,
}

impl std::str::FromStr for PairedTest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(PairedTest::T),
            "wilcoxon" => Ok(PairedTest::Wilcoxon),
            other => Err(Error::Config(format!("unknown test {other:?}, expected t|wilcoxon"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDelta {
    pub target: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub prevalence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestOutcome {
    Computed(TestResult),
    /// All paired differences are zero.
    Identical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub test: PairedTest,
    pub outcome: TestOutcome,
    pub deltas: Vec<TargetDelta>,
    /// Pearson correlation of `delta` against prevalence, when prevalences are known.
    pub gain_vs_prevalence: Option<TestResult>,
}

impl Comparison {
    pub fn to_json(&self) -> Value {
        let (status, statistic, p, n) = match &self.outcome {
            TestOutcome::Computed(r) => ("ok", Some(r.statistic), Some(r.p_value), r.n),
            TestOutcome::Identical => ("identical", None, None, self.deltas.len()),
        };
        json!({
            "test": self.test,
            "status": status,
            "statistic": statistic,
            "p": p,
            "n": n,
            "mean_a": mean(self.deltas.iter().map(|d| d.a)),
            "mean_b": mean(self.deltas.iter().map(|d| d.b)),
            "deltas": self.deltas,
            "gain_vs_prevalence": self.gain_vs_prevalence.as_ref().map(|r| json!({
                "r": r.statistic, "p": r.p_value, "n": r.n,
            })),
        })
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pairs per-target AUCs of `a` and `b` (targets undefined in either are
/// skipped), runs the one-tailed paired test of a > b, and correlates the
/// gains with prevalence when given.
pub fn compare_reports(
    a: &MetricsReport,
    b: &MetricsReport,
    test: PairedTest,
    prevalences: Option<&BTreeMap<String, f64>>,
) -> Result<Comparison> {
    let shared: Vec<&String> = a.targets.keys().filter(|k| b.targets.contains_key(*k)).collect();
    if shared.is_empty() {
        return Err(Error::TargetMismatch("reports share no targets".into()));
    }
    let deltas: Vec<TargetDelta> = shared
        .into_iter()
        .filter_map(|k| {
            let (x, y) = (a.targets[k].auc?, b.targets[k].auc?);
            Some(TargetDelta {
                target: k.clone(),
                a: x,
                b: y,
                delta: x - y,
                prevalence: prevalences.and_then(|p| p.get(k).copied()),
            })
        })
        .collect();
    let xs: Vec<f64> = deltas.iter().map(|d| d.a).collect();
    let ys: Vec<f64> = deltas.iter().map(|d| d.b).collect();
    let result = match test {
        PairedTest::T => paired_t_one_tailed(&xs, &ys),
        PairedTest::Wilcoxon => wilcoxon_signed_rank_one_tailed(&xs, &ys),
    };
    let outcome = match result {
        Ok(r) => TestOutcome::Computed(r),
        Err(Error::ZeroVariance(_)) | Err(Error::AllZero) if deltas.iter().all(|d| d.delta == 0.0) => {
            TestOutcome::Identical
        }
        Err(e) => return Err(e),
    };
    let gain_vs_prevalence = if prevalences.is_some() {
        let (gain, prev): (Vec<f64>, Vec<f64>) =
            deltas.iter().filter_map(|d| Some((d.delta, d.prevalence?))).unzip();
        pearson(&prev, &gain).ok()
    } else {
        None
    };
    Ok(Comparison { test, outcome, deltas, gain_vs_prevalence })
}
