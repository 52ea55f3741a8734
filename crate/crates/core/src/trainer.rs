//! Bag sampling, the per-fold training loop with model selection, k-fold
//! training and (fold-ensembled) inference.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::feature_store::{CohortManifest, FeatureBag, Label};
use crate::mil_net::{
    adam_step, backward, forward, init_params, weights_from_prevalence, AdamState, BagExample, ClassWeights,
    ModelParams, TrainConfig,
};
use crate::rng;
use crate::splitter::{fold_roles, SplitAssignment, Subset};
use crate::stats::{roc_auc, BootstrapConfig, MetricsReport, TargetScores};

pub const MODELS_FILE: &str = "models.json";

/// Tile indices for one bag: all tiles in order when `n_tiles <= bag_size`,
/// otherwise `bag_size` distinct indices drawn uniformly, returned sorted.
pub fn sample_bag<R: Rng + ?Sized>(n_tiles: usize, bag_size: usize, rng: &mut R) -> Vec<usize> {
    if n_tiles <= bag_size {
        return (0..n_tiles).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n_tiles, bag_size).into_vec();
    idx.sort_unstable();
    idx
}

fn gather(bag: &FeatureBag, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * bag.dim());
    for &k in idx {
        out.extend_from_slice(bag.tile(k));
    }
    out
}

/// Read access to bags by id.
pub trait BagSource: Sync {
    fn bag(&self, bag_id: &str) -> Result<&FeatureBag>;
}

/// In-memory bags indexed by id.
pub struct BagIndex<'a> {
    map: HashMap<&'a str, &'a FeatureBag>,
}

impl<'a> BagIndex<'a> {
    pub fn new(bags: &'a [FeatureBag]) -> Self {
        BagIndex { map: bags.iter().map(|b| (b.id(), b)).collect() }
    }
}

impl BagSource for BagIndex<'_> {
    fn bag(&self, bag_id: &str) -> Result<&FeatureBag> {
        self.map
            .get(bag_id)
            .copied()
            .ok_or_else(|| Error::IdMismatch(format!("bag {bag_id} not loaded")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Multitask,
    Singletask(String),
}

impl Mode {
    /// Task list the model is trained on.
    pub fn tasks(&self, targets: &[String]) -> Vec<String> {
        match self {
            Mode::Multitask => targets.to_vec(),
            Mode::Singletask(t) => vec![t.clone()],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Multitask => write!(f, "multitask"),
            Mode::Singletask(t) => write!(f, "singletask:{t}"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multitask" => Ok(Mode::Multitask),
            Some(("singletask", t)) if !t.is_empty() => Ok(Mode::Singletask(t.to_string())),
            _ => Err(Error::Config(format!("mode {s:?}: expected multitask or singletask:TARGET"))),
        }
    }
}

/// Best checkpoint of one fold and its selection-score history.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub params: ModelParams,
    /// Selection-fold mean AUC after each epoch.
    pub trace: Vec<f64>,
    pub best_epoch: usize,
}

fn task_indices(manifest: &CohortManifest, tasks: &[String]) -> Result<Vec<usize>> {
    if tasks.is_empty() {
        return Err(Error::Config("no target to train on".into()));
    }
    tasks
        .iter()
        .map(|t| manifest.target_index(t).ok_or_else(|| Error::UnknownTarget(t.clone())))
        .collect()
}

fn labels_for(manifest: &CohortManifest, bag_id: &str, tasks: &[usize]) -> Result<Vec<Label>> {
    let row = manifest
        .row(bag_id)
        .ok_or_else(|| Error::IdMismatch(format!("bag {bag_id} missing from manifest")))?;
    Ok(tasks.iter().map(|&t| row.labels[t]).collect())
}

/// Inference tile sample of a bag, keyed by its id.
pub fn inference_tiles(bag: &FeatureBag, cfg: &TrainConfig) -> Vec<usize> {
    let mut r = rng::stream_for_id(cfg.seed, "infer", bag.id());
    sample_bag(bag.n_tiles(), cfg.infer_bag_size, &mut r)
}

/// Mean AUC over tasks with both classes among `labels`; `None` if no task qualifies.
fn mean_auc(probs: &[Vec<f64>], labels: &[Vec<Label>], n_tasks: usize) -> Result<Option<f64>> {
    let mut aucs = Vec::new();
    for t in 0..n_tasks {
        let (s, l): (Vec<f64>, Vec<bool>) = probs
            .iter()
            .zip(labels)
            .filter_map(|(p, l)| l[t].value().map(|y| (p[t], y)))
            .unzip();
        match roc_auc(&s, &l) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedAuc) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

fn selection_evaluable(labels: &[Vec<Label>], n_tasks: usize) -> bool {
    (0..n_tasks).any(|t| {
        let pos = labels.iter().any(|l| l[t] == Label::Positive);
        let neg = labels.iter().any(|l| l[t] == Label::Negative);
        pos && neg
    })
}

/// Trains one fold: folds other than `test_fold` and its selection fold train,
/// the selection fold picks the epoch. Only train and selection bags are read.
pub fn train_fold(
    source: &dyn BagSource,
    manifest: &CohortManifest,
    assignment: &SplitAssignment,
    test_fold: usize,
    targets: &[String],
    cfg: &TrainConfig,
    mode: &Mode,
) -> Result<FoldResult> {
    cfg.validate()?;
    let roles = fold_roles(assignment.k(), test_fold)?;
    let tasks = mode.tasks(targets);
    let task_idx = task_indices(manifest, &tasks)?;
    let n_tasks = tasks.len();

    let mut train = Vec::new();
    for &f in &roles.train {
        for id in assignment.fold_ids(f) {
            let labels = labels_for(manifest, id, &task_idx)?;
            if labels.iter().any(|l| l.value().is_some()) {
                train.push((id, labels));
            }
        }
    }
    train.sort_by(|a, b| a.0.cmp(b.0));
    if train.is_empty() {
        return Err(Error::NoSupervision);
    }
    let selection: Vec<(&str, Vec<Label>)> = assignment
        .fold_ids(roles.selection)
        .into_iter()
        .map(|id| Ok((id, labels_for(manifest, id, &task_idx)?)))
        .collect::<Result<_>>()?;
    let sel_labels: Vec<Vec<Label>> = selection.iter().map(|s| s.1.clone()).collect();
    if !selection_evaluable(&sel_labels, n_tasks) {
        return Err(Error::SelectionInfeasible(roles.selection));
    }

    // class weights from train-fold prevalence
    let weights: Vec<ClassWeights> = (0..n_tasks)
        .map(|t| {
            let (pos, n) = train.iter().fold((0usize, 0usize), |(p, n), (_, l)| match l[t] {
                Label::Positive => (p + 1, n + 1),
                Label::Negative => (p, n + 1),
                Label::Missing => (p, n),
            });
            if n == 0 {
                return ClassWeights::UNIFORM;
            }
            weights_from_prevalence(pos as f64 / n as f64).unwrap_or(ClassWeights::UNIFORM)
        })
        .collect();

    let dim = source.bag(train[0].0)?.dim();
    let dims = cfg.dims(dim, n_tasks);
    let mut params = init_params(dims, cfg.gated_attention, cfg.seed)?;
    let mut adam = AdamState::for_params(&params);
    let adam_cfg = cfg.adam();

    // inference inputs for the selection fold are fixed across epochs
    let sel_tiles: Vec<Vec<f32>> = selection
        .par_iter()
        .map(|(id, _)| {
            let bag = source.bag(id)?;
            Ok(gather(bag, &inference_tiles(bag, cfg)))
        })
        .collect::<Result<_>>()?;

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = rng::stream2(cfg.seed, "shuffle", test_fold as u64, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }
        let mut tile_rng = rng::stream2(cfg.seed, "train-tiles", test_fold as u64, epoch as u64);
        for chunk in order.chunks(cfg.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let bag = source.bag(train[i].0)?;
                if bag.dim() != dim {
                    return Err(Error::Shape(format!("bag {} has dim {}, expected {dim}", bag.id(), bag.dim())));
                }
                feats.push(gather(bag, &sample_bag(bag.n_tiles(), cfg.train_bag_size, &mut tile_rng)));
            }
            let batch: Vec<BagExample> = chunk
                .iter()
                .zip(&feats)
                .map(|(&i, f)| BagExample { tiles: f, labels: &train[i].1 })
                .collect();
            let (_, grads) = backward(&params, &batch, &weights)?;
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged in fold {test_fold} epoch {epoch}")));
        }

        let snapshot = params.quantized();
        let probs: Vec<Vec<f64>> = sel_tiles
            .par_iter()
            .map(|t| Ok(forward(&snapshot, t)?.probs.iter().map(|p| p[1]).collect()))
            .collect::<Result<_>>()?;
        let score = mean_auc(&probs, &sel_labels, n_tasks)?.ok_or(Error::SelectionInfeasible(roles.selection))?;
        trace.push(score);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(FoldResult { params, trace, best_epoch })
}

/// One checkpoint per test fold.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub mode: Mode,
    /// Task ids in head order.
    pub tasks: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelsMeta {
    mode: String,
    tasks: Vec<String>,
    k: usize,
    best_epochs: Vec<usize>,
    traces: Vec<Vec<f64>>,
    train: TrainConfig,
}

impl FoldModels {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelParams> {
        self.folds.iter().map(|f| &f.params)
    }

    fn check(&self) -> Result<()> {
        let first = self.folds.first().ok_or_else(|| Error::Validation("no fold models".into()))?;
        let dims = first.params.dims();
        if dims.tasks != self.tasks.len() {
            return Err(Error::Shape(format!("{} heads for {} tasks", dims.tasks, self.tasks.len())));
        }
        if let Some(f) = self.folds.iter().find(|f| f.params.dims() != dims || f.params.gated() != first.params.gated()) {
            return Err(Error::Shape(format!("fold model dims {:?} differ from {:?}", f.params.dims(), dims)));
        }
        Ok(())
    }

    /// Writes `fold{f}.milm` per fold and `models.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (f, r) in self.folds.iter().enumerate() {
            r.params.save(&dir.join(format!("fold{f}.milm")))?;
        }
        let meta = ModelsMeta {
            mode: self.mode.to_string(),
            tasks: self.tasks.clone(),
            k: self.k(),
            best_epochs: self.folds.iter().map(|f| f.best_epoch).collect(),
            traces: self.folds.iter().map(|f| f.trace.clone()).collect(),
            train: self.config.clone(),
        };
        let path = dir.join(MODELS_FILE);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODELS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelsMeta = serde_json::from_str(&text)?;
        if meta.best_epochs.len() != meta.k || meta.traces.len() != meta.k {
            return Err(Error::format(MODELS_FILE, "per-fold lists disagree with k"));
        }
        let folds = (0..meta.k)
            .map(|f| {
                Ok(FoldResult {
                    params: ModelParams::load(&dir.join(format!("fold{f}.milm")))?,
                    trace: meta.traces[f].clone(),
                    best_epoch: meta.best_epochs[f],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let models = FoldModels { mode: meta.mode.parse()?, tasks: meta.tasks, folds, config: meta.train };
        models.check()?;
        Ok(models)
    }
}

/// Trains every fold as test fold; folds run in parallel.
pub fn train_cv(
    source: &dyn BagSource,
    manifest: &CohortManifest,
    assignment: &SplitAssignment,
    targets: &[String],
    cfg: &TrainConfig,
    mode: &Mode,
) -> Result<FoldModels> {
    let folds = (0..assignment.k())
        .into_par_iter()
        .map(|f| train_fold(source, manifest, assignment, f, targets, cfg, mode))
        .collect::<Result<Vec<_>>>()?;
    let models = FoldModels { mode: mode.clone(), tasks: mode.tasks(targets), folds, config: cfg.clone() };
    models.check()?;
    Ok(models)
}

/// How fold models are combined at inference.
#[derive(Debug, Clone, Copy)]
pub enum Scoring<'a> {
    /// Mean probability over all fold models; attention from fold 0.
    Ensemble,
    /// Each dev bag scored by the model whose test fold holds it.
    OutOfFold(&'a SplitAssignment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub bag_id: String,
    /// Positive-class probability per task.
    pub probs: Vec<f64>,
    /// Tile indices used at inference, aligned with `attention`.
    pub tiles: Vec<usize>,
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub tasks: Vec<String>,
    pub bags: Vec<BagPrediction>,
}

/// Arithmetic mean taken as offsets from the minimum, so identical members
/// give back that member's value exactly.
fn member_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let n = values.clone().count() as f64;
    (lo + values.map(|v| v - lo).sum::<f64>() / n).clamp(lo, hi)
}

/// Scores `bag_ids` in the given order.
pub fn predict(
    models: &FoldModels,
    source: &dyn BagSource,
    bag_ids: &[&str],
    scoring: Scoring,
) -> Result<PredictionSet> {
    models.check()?;
    let dims = models.folds[0].params.dims();
    let bags = bag_ids
        .par_iter()
        .map(|id| {
            let bag = source.bag(id)?;
            if bag.dim() != dims.dim {
                return Err(Error::Shape(format!("bag {id} has dim {}, models expect {}", bag.dim(), dims.dim)));
            }
            let tiles = inference_tiles(bag, &models.config);
            let feats = gather(bag, &tiles);
            match scoring {
                Scoring::Ensemble => {
                    let outs = models.models().map(|m| forward(m, &feats)).collect::<Result<Vec<_>>>()?;
                    let probs = (0..dims.tasks).map(|t| member_mean(outs.iter().map(|o| o.probs[t][1]))).collect();
                    let embedding = (0..dims.hidden).map(|j| member_mean(outs.iter().map(|o| o.embedding[j]))).collect();
                    let attention = outs.into_iter().next().expect("k >= 1").attention;
                    Ok(BagPrediction { bag_id: id.to_string(), probs, tiles, attention, embedding })
                }
                Scoring::OutOfFold(assign) => {
                    let f = assign
                        .fold_of(id)
                        .ok_or_else(|| Error::Validation(format!("bag {id} has no CV fold")))?;
                    let m = models
                        .folds
                        .get(f)
                        .ok_or_else(|| Error::Shape(format!("bag {id} in fold {f}, only {} models", models.k())))?;
                    let out = forward(&m.params, &feats)?;
                    Ok(BagPrediction {
                        bag_id: id.to_string(),
                        probs: out.probs.iter().map(|p| p[1]).collect(),
                        tiles,
                        attention: out.attention,
                        embedding: out.embedding,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet { tasks: models.tasks.clone(), bags })
}

/// Bag ids of one subset in id order.
pub fn subset_bags(assignment: &SplitAssignment, subset: Subset) -> Vec<&str> {
    assignment.subset_ids(subset)
}

impl PredictionSet {
    pub fn task_index(&self, target: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == target)
    }

    /// Scores of one task in bag order.
    pub fn scores(&self, task: usize) -> Vec<f64> {
        self.bags.iter().map(|b| b.probs[task]).collect()
    }

    /// Predictions CSV with columns `bag_id,target_id,prob`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bag_id", "target_id", "prob"])?;
        for b in &self.bags {
            for (t, p) in self.tasks.iter().zip(&b.probs) {
                w.write_record([b.bag_id.as_str(), t.as_str(), &p.to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::format("predictions", e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// One `<bag_id>.csv` per bag with columns `tile_index,attention`.
    pub fn write_attention(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for b in &self.bags {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["tile_index", "attention"])?;
            for (k, a) in b.tiles.iter().zip(&b.attention) {
                w.write_record([k.to_string(), a.to_string()])?;
            }
            let path = dir.join(format!("{}.csv", b.bag_id));
            let bytes = w.into_inner().map_err(|e| Error::format("attention", e.to_string()))?;
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Per-task metrics against manifest labels. With `cv` each task's AUC is
    /// the mean over the test folds recorded there; otherwise it is computed
    /// over all bags at once.
    pub fn report(
        &self,
        manifest: &CohortManifest,
        cv: Option<&SplitAssignment>,
        bootstrap: Option<&BootstrapConfig>,
        with_roc: bool,
    ) -> Result<MetricsReport> {
        let mut labels = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let ti = manifest
                .target_index(t)
                .ok_or_else(|| Error::TargetMismatch(format!("target {t} not in manifest")))?;
            let l = self
                .bags
                .iter()
                .map(|b| {
                    manifest
                        .label(&b.bag_id, ti)
                        .map(|l| l.value())
                        .ok_or_else(|| Error::Validation(format!("bag {} not in manifest", b.bag_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(l);
        }
        let scores: Vec<Vec<f64>> = (0..self.tasks.len()).map(|t| self.scores(t)).collect();
        let inputs: Vec<TargetScores> = self
            .tasks
            .iter()
            .enumerate()
            .map(|(t, id)| TargetScores { target_id: id, scores: &scores[t], labels: &labels[t] })
            .collect();
        match cv {
            None => MetricsReport::evaluate(&inputs, bootstrap, with_roc),
            Some(assign) => {
                let folds = self
                    .bags
                    .iter()
                    .map(|b| {
                        assign.fold_of(&b.bag_id).ok_or_else(|| Error::Validation(format!("bag {} has no CV fold", b.bag_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                MetricsReport::evaluate_folds(&inputs, &folds, bootstrap, with_roc)
            }
        }
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({ "tasks": self.tasks, "n_bags": self.bags.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitter::split_cohort;
    use crate::synthgen::{generate_cohort, SynthConfig};
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    #[test]
    fn sample_bag_cases() {
        let mut r = rng::stream(0, "t", 0);
        assert_eq!(sample_bag(50, 100, &mut r), (0..50).collect::<Vec<_>>());
        let s = sample_bag(500, 100, &mut r);
        assert_eq!(s.len(), 100);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 100);
        assert!(s.iter().all(|&i| i < 500));
        assert_eq!(sample_bag(1, 1000, &mut r), vec![0]);
    }

    #[test]
    fn mode_round_trip() {
        for m in [Mode::Multitask, Mode::Singletask("ALT_A".into())] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("singletask:".parse::<Mode>().is_err());
        assert!("both".parse::<Mode>().is_err());
    }

    struct Tracking<'a> {
        inner: BagIndex<'a>,
        seen: Mutex<BTreeSet<String>>,
    }

    impl BagSource for Tracking<'_> {
        fn bag(&self, id: &str) -> Result<&FeatureBag> {
            self.seen.lock().unwrap().insert(id.to_string());
            self.inner.bag(id)
        }
    }

    fn small() -> (crate::synthgen::Cohort, SplitAssignment, Vec<String>, TrainConfig) {
        let cfg = SynthConfig { n_bags: 160, ..Default::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let targets: Vec<String> = ["ALT_A", "ALT_B", "ALT_C"].iter().map(|s| s.to_string()).collect();
        let split = split_cohort(&cohort.manifest, &targets, 0.2, 5, 3).unwrap();
        let tc = TrainConfig { hidden: 8, attn: 4, max_epochs: 3, patience: 5, learning_rate: 1e-2, ..Default::default() };
        (cohort, split, targets, tc)
    }

    #[test]
    fn training_reads_only_train_and_selection_bags() {
        let (cohort, split, targets, tc) = small();
        let src = Tracking { inner: BagIndex::new(&cohort.bags), seen: Mutex::new(BTreeSet::new()) };
        let r = train_fold(&src, &cohort.manifest, &split, 2, &targets, &tc, &Mode::Multitask).unwrap();
        assert_eq!(r.trace.len(), 3);
        let seen = src.seen.into_inner().unwrap();
        for id in &seen {
            let s = split.get(id).unwrap();
            assert_eq!(s.subset, Subset::Dev);
            assert_ne!(s.fold, Some(2), "test-fold bag {id} was read");
        }
        assert!(!seen.is_empty());
    }

    #[test]
    fn patience_zero_trains_one_epoch_and_best_is_argmax() {
        let (cohort, split, targets, tc) = small();
        let src = BagIndex::new(&cohort.bags);
        let r = train_fold(&src, &cohort.manifest, &split, 0, &targets, &TrainConfig { patience: 0, ..tc.clone() }, &Mode::Multitask)
            .unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.best_epoch, 0);
        let r = train_fold(&src, &cohort.manifest, &split, 0, &targets, &tc, &Mode::Multitask).unwrap();
        let best = r.trace[r.best_epoch];
        assert!(r.trace.iter().all(|&s| s <= best));
        assert!(best >= r.trace[0]);
    }

    #[test]
    fn seeded_rerun_is_bitwise_identical() {
        let (cohort, split, targets, tc) = small();
        let src = BagIndex::new(&cohort.bags);
        let a = train_fold(&src, &cohort.manifest, &split, 1, &targets, &tc, &Mode::Multitask).unwrap();
        let b = train_fold(&src, &cohort.manifest, &split, 1, &targets, &tc, &Mode::Multitask).unwrap();
        assert_eq!(a.params.to_checkpoint_bytes(), b.params.to_checkpoint_bytes());
    }

    #[test]
    fn selection_without_both_classes_is_infeasible() {
        let (cohort, split, _, tc) = small();
        let src = BagIndex::new(&cohort.bags);
        // ALT_H is rare enough that a 160-bag cohort leaves some fold without positives
        let roles_sel = (0..5).find(|&f| {
            let sel = (f + 1) % 5;
            split.fold_ids(sel).iter().all(|id| cohort.manifest.label(id, 7) != Some(Label::Positive))
        });
        if let Some(f) = roles_sel {
            let err = train_fold(&src, &cohort.manifest, &split, f, &["ALT_H".into()], &tc, &Mode::Multitask).unwrap_err();
            assert!(matches!(err, Error::SelectionInfeasible(_)));
        }
    }

    #[test]
    fn cv_ensemble_and_out_of_fold() {
        let (cohort, split, targets, tc) = small();
        let src = BagIndex::new(&cohort.bags);
        let models = train_cv(&src, &cohort.manifest, &split, &targets, &tc, &Mode::Singletask("ALT_B".into())).unwrap();
        assert_eq!(models.k(), 5);
        assert_eq!(models.folds[0].params.dims().tasks, 1);
        let dev = split.subset_ids(Subset::Dev);
        let oof = predict(&models, &src, &dev, Scoring::OutOfFold(&split)).unwrap();
        assert_eq!(oof.bags.len(), dev.len());
        let ens = predict(&models, &src, &dev, Scoring::Ensemble).unwrap();
        for b in &ens.bags {
            let bag = src.bag(&b.bag_id).unwrap();
            let member: Vec<f64> = models
                .models()
                .map(|m| forward(m, &gather(bag, &b.tiles)).unwrap().probs[0][1])
                .collect();
            let lo = member.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = member.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(b.probs[0] >= lo && b.probs[0] <= hi);
            assert_eq!(b.tiles.len(), bag.n_tiles().min(tc.infer_bag_size));
            assert_eq!(b.attention.len(), b.tiles.len());
        }
        let dir = tempfile::tempdir().unwrap();
        models.save(dir.path()).unwrap();
        let back = FoldModels::load(dir.path()).unwrap();
        assert_eq!(back.mode, models.mode);
        assert_eq!(predict(&back, &src, &dev, Scoring::Ensemble).unwrap(), ens);
    }

    #[test]
    fn two_member_mean() {
        assert!((member_mean([0.2, 0.4].into_iter()) - 0.3).abs() < 1e-15);
        assert_eq!(member_mean([0.7; 5].into_iter()), 0.7);
    }

    #[test]
    fn identical_checkpoints_ensemble_exactly() {
        let (cohort, _, _, tc) = small();
        let src = BagIndex::new(&cohort.bags);
        let p = init_params(tc.dims(64, 2), false, 4).unwrap().quantized();
        let one = FoldResult { params: p, trace: vec![0.5], best_epoch: 0 };
        let single = FoldModels { mode: Mode::Multitask, tasks: vec!["x".into(), "y".into()], folds: vec![one.clone()], config: tc.clone() };
        let many = FoldModels { folds: vec![one; 5], ..single.clone() };
        let ids: Vec<&str> = cohort.bags.iter().take(10).map(|b| b.id()).collect();
        let a = predict(&single, &src, &ids, Scoring::Ensemble).unwrap();
        let b = predict(&many, &src, &ids, Scoring::Ensemble).unwrap();
        assert_eq!(a, b);
    }
}
