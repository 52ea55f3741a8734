//! Bags of tile features, cohort manifests, target selection and the on-disk store.
//!
//! A store directory holds `manifest.csv` and one `bags/<bag_id>.fbag` file per bag.
//!
//! Bag file layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `FBAG` |
//! | 4 | 2 | version `u16` = 1 |
//! | 6 | 2 | flags `u16`: bit0 coords, bit1 tile_class, bit2 tumor_label |
//! | 8 | 4 | n_tiles `u32` |
//! | 12 | 4 | dim `u32` |
//! | 16 | 4·n·d | features, `f32`, row-major |
//! | .. | 8·n | coords, `u32` pairs (x, y), if flagged |
//! | .. | n | tile_class `u8`, if flagged |
//! | .. | n | tumor_label `u8`, if flagged |

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 4] = b"FBAG";
pub const BAG_VERSION: u16 = 1;
pub const BAG_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const BAGS_DIR: &str = "bags";
pub const BAG_EXT: &str = "fbag";

const FLAG_COORDS: u16 = 1;
const FLAG_CLASS: u16 = 1 << 1;
const FLAG_TUMOR: u16 = 1 << 2;

const FIXED_COLUMNS: [&str; 9] = [
    "bag_id",
    "cohort_id",
    "timestamp",
    "stain_origin",
    "scanner",
    "tissue_site",
    "procedure",
    "grade",
    "is_primary_site",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum TileClass {
    Tumor = 0,
    Stroma = 1,
    Epithelium = 2,
    Necrosis = 3,
    Immune = 4,
    Other = 5,
}

impl TileClass {
    pub const ALL: [TileClass; 6] = [
        TileClass::Tumor,
        TileClass::Stroma,
        TileClass::Epithelium,
        TileClass::Necrosis,
        TileClass::Immune,
        TileClass::Other,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TileClass::Tumor => "tumor",
            TileClass::Stroma => "stroma",
            TileClass::Epithelium => "epithelium",
            TileClass::Necrosis => "necrosis",
            TileClass::Immune => "immune",
            TileClass::Other => "other",
        }
    }
}

/// One slide: an ordered list of tile feature vectors plus optional tile metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    bag_id: String,
    n_tiles: usize,
    dim: usize,
    features: Vec<f32>,
    tile_coords: Option<Vec<[u32; 2]>>,
    tile_class: Option<Vec<TileClass>>,
    tile_tumor_label: Option<Vec<bool>>,
}

fn check_bag_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "bag_id {id:?} must be nonempty and use only [A-Za-z0-9._-]"
        )))
    }
}

impl FeatureBag {
    pub fn new(bag_id: impl Into<String>, n_tiles: usize, dim: usize, features: Vec<f32>) -> Result<Self> {
        let bag_id = bag_id.into();
        check_bag_id(&bag_id)?;
        if n_tiles == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "bag {bag_id}: n_tiles and dim must be >= 1 (got {n_tiles}x{dim})"
            )));
        }
        if features.len() != n_tiles * dim {
            return Err(Error::Validation(format!(
                "bag {bag_id}: expected {} feature values, got {}",
                n_tiles * dim,
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "bag {bag_id}: non-finite feature at flat index {i}"
            )));
        }
        Ok(FeatureBag {
            bag_id,
            n_tiles,
            dim,
            features,
            tile_coords: None,
            tile_class: None,
            tile_tumor_label: None,
        })
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.n_tiles {
            return Err(Error::Validation(format!(
                "bag {}: {what} has length {len}, expected {}",
                self.bag_id, self.n_tiles
            )));
        }
        Ok(())
    }

    pub fn with_coords(mut self, coords: Vec<[u32; 2]>) -> Result<Self> {
        self.check_len("tile_coords", coords.len())?;
        self.tile_coords = Some(coords);
        Ok(self)
    }

    pub fn with_tile_class(mut self, classes: Vec<TileClass>) -> Result<Self> {
        self.check_len("tile_class", classes.len())?;
        self.tile_class = Some(classes);
        Ok(self)
    }

    pub fn with_tumor_label(mut self, labels: Vec<bool>) -> Result<Self> {
        self.check_len("tile_tumor_label", labels.len())?;
        self.tile_tumor_label = Some(labels);
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.bag_id
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `n_tiles × dim`.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn tile(&self, k: usize) -> &[f32] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn coords(&self) -> Option<&[[u32; 2]]> {
        self.tile_coords.as_deref()
    }

    pub fn tile_class(&self) -> Option<&[TileClass]> {
        self.tile_class.as_deref()
    }

    pub fn tumor_label(&self) -> Option<&[bool]> {
        self.tile_tumor_label.as_deref()
    }

    /// Serializes to the bag file layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut flags = 0u16;
        if self.tile_coords.is_some() {
            flags |= FLAG_COORDS;
        }
        if self.tile_class.is_some() {
            flags |= FLAG_CLASS;
        }
        if self.tile_tumor_label.is_some() {
            flags |= FLAG_TUMOR;
        }
        let mut out = Vec::with_capacity(BAG_HEADER_LEN + self.features.len() * 4 + self.n_tiles * 10);
        out.extend_from_slice(BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.n_tiles as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(coords) = &self.tile_coords {
            for [x, y] in coords {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        if let Some(classes) = &self.tile_class {
            out.extend(classes.iter().map(|c| c.code()));
        }
        if let Some(labels) = &self.tile_tumor_label {
            out.extend(labels.iter().map(|&b| b as u8));
        }
        out
    }

    /// Parses the bag file layout. `bag_id` comes from the file name.
    pub fn from_bytes(bag_id: &str, bytes: &[u8]) -> Result<Self> {
        let ctx = format!("bag file {bag_id}");
        let mut cur = Cursor { bytes, pos: 0, ctx: &ctx };
        if cur.take(4)? != BAG_MAGIC {
            return Err(Error::format(&ctx, "bad magic"));
        }
        let version = cur.u16()?;
        if version != BAG_VERSION {
            return Err(Error::format(&ctx, format!("unsupported version {version}")));
        }
        let flags = cur.u16()?;
        if flags & !(FLAG_COORDS | FLAG_CLASS | FLAG_TUMOR) != 0 {
            return Err(Error::format(&ctx, format!("unknown flag bits {flags:#06x}")));
        }
        let n_tiles = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let n_values = n_tiles
            .checked_mul(dim)
            .ok_or_else(|| Error::format(&ctx, "n_tiles*dim overflows"))?;
        let payload = cur.take(
            n_values
                .checked_mul(4)
                .ok_or_else(|| Error::format(&ctx, "payload size overflows"))?,
        )?;
        let features = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut bag = FeatureBag::new(bag_id, n_tiles, dim, features)?;
        if flags & FLAG_COORDS != 0 {
            let raw = cur.take(8 * n_tiles)?;
            let coords = raw
                .chunks_exact(8)
                .map(|c| {
                    [
                        u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                        u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                    ]
                })
                .collect();
            bag = bag.with_coords(coords)?;
        }
        if flags & FLAG_CLASS != 0 {
            let raw = cur.take(n_tiles)?;
            let classes = raw
                .iter()
                .map(|&c| {
                    TileClass::from_code(c)
                        .ok_or_else(|| Error::Validation(format!("bag {bag_id}: tile class code {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            bag = bag.with_tile_class(classes)?;
        }
        if flags & FLAG_TUMOR != 0 {
            let raw = cur.take(n_tiles)?;
            let labels = raw
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Validation(format!("bag {bag_id}: tumor label {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            bag = bag.with_tumor_label(labels)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                &ctx,
                format!("{} trailing bytes", bytes.len() - cur.pos),
            ));
        }
        Ok(bag)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.ctx,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
    Missing,
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn value(self) -> Option<bool> {
        match self {
            Label::Negative => Some(false),
            Label::Positive => Some(true),
            Label::Missing => None,
        }
    }

    fn as_cell(self) -> &'static str {
        match self {
            Label::Negative => "0",
            Label::Positive => "1",
            Label::Missing => "NA",
        }
    }

    fn parse(cell: &str) -> Option<Self> {
        match cell {
            "0" => Some(Label::Negative),
            "1" => Some(Label::Positive),
            "NA" => Some(Label::Missing),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StainOrigin {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub bag_id: String,
    pub cohort_id: String,
    pub timestamp: NaiveDate,
    pub stain_origin: StainOrigin,
    pub scanner: String,
    pub tissue_site: String,
    pub procedure: String,
    pub grade: Option<Grade>,
    pub is_primary_site: Option<bool>,
    /// One entry per manifest target, in target order.
    pub labels: Vec<Label>,
}

/// Per-bag labels and metadata, keyed by bag id.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    targets: Vec<String>,
    rows: Vec<ManifestRow>,
    index: HashMap<String, usize>,
}

impl CohortManifest {
    pub fn new(targets: Vec<String>, rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &targets {
            if t.is_empty() || FIXED_COLUMNS.contains(&t.as_str()) {
                return Err(Error::Validation(format!("invalid target id {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Validation(format!("duplicate target id {t}")));
            }
        }
        let mut index = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            check_bag_id(&row.bag_id)?;
            if row.labels.len() != targets.len() {
                return Err(Error::Validation(format!(
                    "row {}: {} labels for {} targets",
                    row.bag_id,
                    row.labels.len(),
                    targets.len()
                )));
            }
            if index.insert(row.bag_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate bag_id {}", row.bag_id)));
            }
        }
        Ok(CohortManifest { targets, rows, index })
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, bag_id: &str) -> Option<&ManifestRow> {
        self.index.get(bag_id).map(|&i| &self.rows[i])
    }

    pub fn position(&self, bag_id: &str) -> Option<usize> {
        self.index.get(bag_id).copied()
    }

    pub fn target_index(&self, target: &str) -> Option<usize> {
        self.targets.iter().position(|t| t == target)
    }

    pub fn label(&self, bag_id: &str, target: usize) -> Option<Label> {
        self.row(bag_id).map(|r| r.labels[target])
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = FIXED_COLUMNS
            .iter()
            .copied()
            .chain(self.targets.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let ts = r.timestamp.format("%Y-%m-%d").to_string();
            let mut rec: Vec<&str> = vec![
                &r.bag_id,
                &r.cohort_id,
                &ts,
                match r.stain_origin {
                    StainOrigin::Internal => "internal",
                    StainOrigin::External => "external",
                },
                &r.scanner,
                &r.tissue_site,
                &r.procedure,
                match r.grade {
                    Some(Grade::Low) => "low",
                    Some(Grade::High) => "high",
                    None => "NA",
                },
                match r.is_primary_site {
                    Some(true) => "true",
                    Some(false) => "false",
                    None => "NA",
                },
            ];
            rec.extend(r.labels.iter().map(|l| l.as_cell()));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "manifest";
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = r.headers()?.clone();
        if header.len() < FIXED_COLUMNS.len()
            || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b)
        {
            return Err(Error::format(ctx, "header must start with the fixed manifest columns"));
        }
        let targets: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bag_id = &rec[0];
            let bad = |col: &str, v: &str| Error::format(ctx, format!("bag {bag_id}: bad {col} {v:?}"));
            let timestamp = NaiveDate::parse_from_str(&rec[2], "%Y-%m-%d")
                .map_err(|_| bad("timestamp", &rec[2]))?;
            let stain_origin = match &rec[3] {
                "internal" => StainOrigin::Internal,
                "external" => StainOrigin::External,
                v => return Err(bad("stain_origin", v)),
            };
            let grade = match &rec[7] {
                "low" => Some(Grade::Low),
                "high" => Some(Grade::High),
                "NA" | "" => None,
                v => return Err(bad("grade", v)),
            };
            let is_primary_site = match &rec[8] {
                "true" => Some(true),
                "false" => Some(false),
                "NA" | "" => None,
                v => return Err(bad("is_primary_site", v)),
            };
            let labels = rec
                .iter()
                .skip(FIXED_COLUMNS.len())
                .map(|c| Label::parse(c).ok_or_else(|| bad("label", c)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(ManifestRow {
                bag_id: bag_id.to_string(),
                cohort_id: rec[1].to_string(),
                timestamp,
                stain_origin,
                scanner: rec[4].to_string(),
                tissue_site: rec[5].to_string(),
                procedure: rec[6].to_string(),
                grade,
                is_primary_site,
                labels,
            });
        }
        CohortManifest::new(targets, rows)
    }
}

/// Inclusion decision for one manifest target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target_id: String,
    pub positive_count: usize,
    pub labeled_count: usize,
    pub prevalence: f64,
    pub included: bool,
    #[serde(rename = "override")]
    pub override_: bool,
}

/// Keeps targets with at least `min_positives` positive bags, plus any listed override.
/// Missing labels count toward neither positives nor the prevalence denominator.
pub fn select_targets(
    manifest: &CohortManifest,
    min_positives: usize,
    overrides: &[String],
) -> Result<Vec<TargetSpec>> {
    if min_positives == 0 {
        return Err(Error::Config("min_positives must be >= 1".into()));
    }
    for o in overrides {
        if manifest.target_index(o).is_none() {
            return Err(Error::UnknownTarget(o.clone()));
        }
    }
    Ok(manifest
        .targets()
        .iter()
        .enumerate()
        .map(|(t, id)| {
            let (pos, labeled) = manifest.rows().iter().fold((0, 0), |(p, n), r| match r.labels[t] {
                Label::Positive => (p + 1, n + 1),
                Label::Negative => (p, n + 1),
                Label::Missing => (p, n),
            });
            let override_ = overrides.iter().any(|o| o == id);
            TargetSpec {
                target_id: id.clone(),
                positive_count: pos,
                labeled_count: labeled,
                prevalence: if labeled == 0 { 0.0 } else { pos as f64 / labeled as f64 },
                included: pos >= min_positives || override_,
                override_,
            }
        })
        .collect())
}

pub fn write_targets_csv(path: &Path, specs: &[TargetSpec]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target_id", "positive_count", "labeled_count", "prevalence", "included", "override"])?;
    for s in specs {
        w.write_record([
            s.target_id.clone(),
            s.positive_count.to_string(),
            s.labeled_count.to_string(),
            s.prevalence.to_string(),
            s.included.to_string(),
            s.override_.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("targets", e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_feature_store(bags: &[FeatureBag], manifest: &CohortManifest, dir: &Path) -> Result<()> {
    let bag_ids: BTreeSet<&str> = bags.iter().map(|b| b.id()).collect();
    if bag_ids.len() != bags.len() {
        return Err(Error::IdMismatch("duplicate bag ids in bag list".into()));
    }
    let manifest_ids: BTreeSet<&str> = manifest.rows().iter().map(|r| r.bag_id.as_str()).collect();
    if bag_ids != manifest_ids {
        let missing: Vec<_> = manifest_ids.difference(&bag_ids).take(3).collect();
        let extra: Vec<_> = bag_ids.difference(&manifest_ids).take(3).collect();
        return Err(Error::IdMismatch(format!(
            "manifest-only {missing:?}, bags-only {extra:?}"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = manifest.to_csv_bytes()?;
    fs::write(&manifest_path, bytes).map_err(|e| Error::io(&manifest_path, e))?;
    if bags.is_empty() {
        return Ok(());
    }
    let bag_dir = dir.join(BAGS_DIR);
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    for bag in bags {
        let path = bag_dir.join(format!("{}.{BAG_EXT}", bag.id()));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bag.to_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    CohortManifest::from_csv_bytes(&bytes)
}

pub fn read_bag(dir: &Path, bag_id: &str) -> Result<FeatureBag> {
    let path = dir.join(BAGS_DIR).join(format!("{bag_id}.{BAG_EXT}"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    FeatureBag::from_bytes(bag_id, &bytes)
}

/// Reads a store; bags are returned in manifest order.
pub fn read_feature_store(dir: &Path) -> Result<(Vec<FeatureBag>, CohortManifest)> {
    let manifest = read_manifest(dir)?;
    let bag_dir = dir.join(BAGS_DIR);
    let mut on_disk = BTreeSet::new();
    if bag_dir.exists() {
        for entry in fs::read_dir(&bag_dir).map_err(|e| Error::io(&bag_dir, e))? {
            let path = entry.map_err(|e| Error::io(&bag_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(BAG_EXT) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    on_disk.insert(stem.to_string());
                }
            }
        }
    }
    let expected: BTreeSet<String> = manifest.rows().iter().map(|r| r.bag_id.clone()).collect();
    if on_disk != expected {
        let missing: Vec<_> = expected.difference(&on_disk).take(3).collect();
        let extra: Vec<_> = on_disk.difference(&expected).take(3).collect();
        return Err(Error::IdMismatch(format!(
            "manifest-only {missing:?}, files-only {extra:?}"
        )));
    }
    let bags = manifest
        .rows()
        .iter()
        .map(|r| read_bag(dir, &r.bag_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((bags, manifest))
}
