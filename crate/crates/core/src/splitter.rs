//! Holdout carving and iteratively stratified k-fold assignment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{CohortManifest, Label, StainOrigin};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Dev,
    Temporal,
    External,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Dev => "dev",
            Subset::Temporal => "temporal",
            Subset::External => "external",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Subset::Dev),
            "temporal" => Ok(Subset::Temporal),
            "external" => Ok(Subset::External),
            other => Err(Error::Config(format!("unknown subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BagSplit {
    pub subset: Subset,
    pub fold: Option<usize>,
}

/// Subset tag and CV fold per bag id.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    entries: BTreeMap<String, BagSplit>,
    k: usize,
    seed: u64,
}

impl SplitAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, bag_id: &str) -> Option<BagSplit> {
        self.entries.get(bag_id).copied()
    }

    /// Entries sorted by bag id.
    pub fn iter(&self) -> impl Iterator<Item = (&str, BagSplit)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset_ids(&self, subset: Subset) -> Vec<&str> {
        self.iter().filter(|(_, s)| s.subset == subset).map(|(id, _)| id).collect()
    }

    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.iter()
            .filter(|(_, s)| s.subset == Subset::Dev && s.fold == Some(fold))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn fold_of(&self, bag_id: &str) -> Option<usize> {
        self.get(bag_id).and_then(|s| s.fold)
    }

    /// Merges fold indices for dev bags into a holdout assignment.
    pub fn with_folds(mut self, folds: &SplitAssignment) -> Result<Self> {
        for (id, s) in self.entries.iter_mut() {
            if s.subset == Subset::Dev {
                s.fold = Some(folds.fold_of(id).ok_or_else(|| {
                    Error::Validation(format!("dev bag {id} has no fold"))
                })?);
            }
        }
        self.k = folds.k;
        self.seed = folds.seed;
        Ok(self)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bag_id", "subset", "fold"])?;
        for (id, s) in self.iter() {
            let fold = s.fold.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([id, s.subset.as_str(), &fold])?;
        }
        w.into_inner().map_err(|e| Error::format("splits", e.to_string()))
    }

    /// Parses a split file; `k` is recovered as one plus the largest fold index.
    pub fn from_csv_bytes(bytes: &[u8], seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        if r.headers()?.iter().collect::<Vec<_>>() != ["bag_id", "subset", "fold"] {
            return Err(Error::format("splits", "header must be bag_id,subset,fold"));
        }
        let mut entries = BTreeMap::new();
        let mut k = 0;
        for rec in r.records() {
            let rec = rec?;
            let subset: Subset = rec[1]
                .parse()
                .map_err(|_| Error::format("splits", format!("bad subset {:?}", &rec[1])))?;
            let fold = match (&rec[2], subset) {
                ("", Subset::Dev) => {
                    return Err(Error::format("splits", format!("dev bag {} lacks a fold", &rec[0])))
                }
                ("", _) => None,
                (f, Subset::Dev) => Some(
                    f.parse::<usize>()
                        .map_err(|_| Error::format("splits", format!("bad fold {f:?}")))?,
                ),
                (f, _) => {
                    return Err(Error::format("splits", format!("holdout bag {} has fold {f}", &rec[0])))
                }
            };
            if let Some(f) = fold {
                k = k.max(f + 1);
            }
            if entries.insert(rec[0].to_string(), BagSplit { subset, fold }).is_some() {
                return Err(Error::Validation(format!("duplicate bag {} in splits", &rec[0])));
            }
        }
        Ok(SplitAssignment { entries, k, seed })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_bytes(&bytes, 0)
    }
}

/// External-stain bags go to the external holdout; the latest `temporal_fraction`
/// of the rest (by timestamp, ties to the smaller bag id) to the temporal holdout.
pub fn carve_holdouts(manifest: &CohortManifest, temporal_fraction: f64) -> Result<SplitAssignment> {
    if manifest.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if !(0.0..=1.0).contains(&temporal_fraction) {
        return Err(Error::Config(format!("temporal_fraction {temporal_fraction} outside [0,1]")));
    }
    let mut entries = BTreeMap::new();
    let mut internal = Vec::new();
    for row in manifest.rows() {
        if row.stain_origin == StainOrigin::External {
            entries.insert(row.bag_id.clone(), BagSplit { subset: Subset::External, fold: None });
        } else {
            internal.push(row);
        }
    }
    internal.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| a.bag_id.cmp(&b.bag_id)));
    // guard against 0.2 * n landing a hair above an integer
    let n_temporal = ((temporal_fraction * internal.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    for (i, row) in internal.iter().enumerate() {
        let subset = if i < n_temporal { Subset::Temporal } else { Subset::Dev };
        entries.insert(row.bag_id.clone(), BagSplit { subset, fold: None });
    }
    Ok(SplitAssignment { entries, k: 0, seed: 0 })
}

/// Binary indicator matrix used for stratification.
#[derive(Debug, Clone)]
pub struct StratLabels {
    pub label_ids: Vec<String>,
    /// Row-aligned with the bag id list it was built for.
    pub rows: Vec<Vec<bool>>,
}

/// Target labels (missing counts as negative here only) followed by one-hot
/// scanner, tissue site and procedure indicators.
pub fn stratification_labels(
    manifest: &CohortManifest,
    bag_ids: &[&str],
    targets: &[String],
) -> Result<StratLabels> {
    let target_idx = targets
        .iter()
        .map(|t| manifest.target_index(t).ok_or_else(|| Error::UnknownTarget(t.clone())))
        .collect::<Result<Vec<_>>>()?;
    let rows = bag_ids
        .iter()
        .map(|id| {
            manifest
                .row(id)
                .ok_or_else(|| Error::IdMismatch(format!("bag {id} not in manifest")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cats: BTreeSet<String> = BTreeSet::new();
    for r in &rows {
        cats.insert(format!("scanner={}", r.scanner));
        cats.insert(format!("tissue_site={}", r.tissue_site));
        cats.insert(format!("procedure={}", r.procedure));
    }
    let cats: Vec<String> = cats.into_iter().collect();
    let mut label_ids: Vec<String> = targets.iter().map(|t| format!("target={t}")).collect();
    label_ids.extend(cats.iter().cloned());
    let matrix = rows
        .iter()
        .map(|r| {
            let mut v: Vec<bool> = target_idx.iter().map(|&t| r.labels[t] == Label::Positive).collect();
            let mine = [
                format!("scanner={}", r.scanner),
                format!("tissue_site={}", r.tissue_site),
                format!("procedure={}", r.procedure),
            ];
            v.extend(cats.iter().map(|c| mine.contains(c)));
            v
        })
        .collect();
    Ok(StratLabels { label_ids, rows: matrix })
}

fn pick_fold(
    candidates: impl Iterator<Item = usize>,
    demand: Option<&[i64]>,
    capacity: &[i64],
    rng: &mut rng::StreamRng,
) -> usize {
    let key = |f: usize| (demand.map_or(0, |d| d[f]), capacity[f]);
    let folds: Vec<usize> = candidates.collect();
    let best = folds.iter().map(|&f| key(f)).max().expect("k >= 1");
    let tied: Vec<usize> = folds.into_iter().filter(|&f| key(f) == best).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

fn assign(row: &[bool], f: usize, k: i64, demand: &mut [Vec<i64>], capacity: &mut [i64], remaining: &mut [usize]) {
    capacity[f] -= k;
    for (j, &on) in row.iter().enumerate() {
        if on {
            demand[j][f] -= k;
            remaining[j] -= 1;
        }
    }
}

/// Iterative multi-label stratification into `k` folds.
///
/// Repeatedly takes the label with the fewest unassigned positive bags and
/// hands each of its bags (in bag id order) to the fold with the largest
/// remaining demand for that label, then the largest remaining capacity,
/// then a seeded draw. Bags positive on no remaining label go by capacity.
/// Demands and capacities are kept scaled by `k` so all comparisons are exact.
pub fn stratified_kfold(
    bag_ids: &[&str],
    strat: &StratLabels,
    k: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    if k < 2 {
        return Err(Error::InfeasibleSplit(format!("k = {k} < 2")));
    }
    if k > bag_ids.len() {
        return Err(Error::InfeasibleSplit(format!("k = {k} exceeds {} dev bags", bag_ids.len())));
    }
    if strat.rows.len() != bag_ids.len() {
        return Err(Error::Shape("stratification rows do not match bag ids".into()));
    }
    let n_labels = strat.label_ids.len();
    // process bags in id order so input row order cannot matter
    let mut order: Vec<usize> = (0..bag_ids.len()).collect();
    order.sort_by(|&a, &b| bag_ids[a].cmp(bag_ids[b]));
    let mut label_order: Vec<usize> = (0..n_labels).collect();
    label_order.sort_by(|&a, &b| strat.label_ids[a].cmp(&strat.label_ids[b]));

    let kk = k as i64;
    let mut demand: Vec<Vec<i64>> = (0..n_labels)
        .map(|j| {
            let pos = strat.rows.iter().filter(|r| r[j]).count() as i64;
            vec![pos; k]
        })
        .collect();
    let mut capacity = vec![bag_ids.len() as i64; k];
    let mut fold: Vec<Option<usize>> = vec![None; bag_ids.len()];
    let mut remaining: Vec<usize> = (0..n_labels)
        .map(|j| strat.rows.iter().filter(|r| r[j]).count())
        .collect();
    let mut rng = rng::stream(seed, "splitter/kfold", 0);

    loop {
        let next = label_order
            .iter()
            .copied()
            .filter(|&j| remaining[j] > 0)
            .min_by_key(|&j| remaining[j]);
        let Some(j) = next else { break };
        for &i in &order {
            if fold[i].is_none() && strat.rows[i][j] {
                let f = pick_fold(0..k, Some(&demand[j]), &capacity, &mut rng);
                fold[i] = Some(f);
                assign(&strat.rows[i], f, kk, &mut demand, &mut capacity, &mut remaining);
            }
        }
    }
    for &i in &order {
        if fold[i].is_none() {
            let f = pick_fold(0..k, None, &capacity, &mut rng);
            fold[i] = Some(f);
            assign(&strat.rows[i], f, kk, &mut demand, &mut capacity, &mut remaining);
        }
    }

    let entries = bag_ids
        .iter()
        .zip(fold)
        .map(|(id, f)| {
            (
                id.to_string(),
                BagSplit { subset: Subset::Dev, fold: Some(f.expect("every bag assigned")) },
            )
        })
        .collect();
    Ok(SplitAssignment { entries, k, seed })
}

/// Training, selection and test folds for one CV run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: Vec<usize>,
    pub selection: usize,
    pub test: usize,
}

/// Selection fold is `(test + 1) mod k`; the remaining `k - 2` folds train.
pub fn fold_roles(k: usize, test_fold: usize) -> Result<FoldRoles> {
    if k < 3 {
        return Err(Error::InfeasibleRoles(format!("k = {k} < 3")));
    }
    if test_fold >= k {
        return Err(Error::InfeasibleRoles(format!("test fold {test_fold} >= k = {k}")));
    }
    let selection = (test_fold + 1) % k;
    let train = (0..k).filter(|&f| f != test_fold && f != selection).collect();
    Ok(FoldRoles { train, selection, test: test_fold })
}

/// Holdouts plus stratified folds over the development bags.
pub fn split_cohort(
    manifest: &CohortManifest,
    targets: &[String],
    temporal_fraction: f64,
    k: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let holdouts = carve_holdouts(manifest, temporal_fraction)?;
    let dev = holdouts.subset_ids(Subset::Dev);
    if dev.is_empty() {
        return Err(Error::EmptyDev);
    }
    let strat = stratification_labels(manifest, &dev, targets)?;
    let folds = stratified_kfold(&dev, &strat, k, seed)?;
    holdouts.clone().with_folds(&folds)
}

/// Per-fold positive counts for each label; used by tests and reports.
pub fn fold_positive_counts(bag_ids: &[&str], strat: &StratLabels, assignment: &SplitAssignment) -> Vec<Vec<usize>> {
    let pos: HashMap<&str, usize> = bag_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut counts = vec![vec![0; assignment.k()]; strat.label_ids.len()];
    for (id, s) in assignment.iter() {
        if let (Some(f), Some(&i)) = (s.fold, pos.get(id)) {
            for (j, &on) in strat.rows[i].iter().enumerate() {
                if on {
                    counts[j][f] += 1;
                }
            }
        }
    }
    counts
}
