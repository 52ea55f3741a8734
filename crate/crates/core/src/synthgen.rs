//! Synthetic cohorts with planted shared-morphology programs.
//!
//! Each bag draws a set of active latent programs; targets are noisy-OR
//! functions of the programs, so targets sharing a program have correlated
//! labels. Tumor tiles carry the active program directions, non-tumor tiles
//! carry a fixed per-class offset. All draws come from keyed streams.

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    CohortManifest, FeatureBag, Grade, Label, ManifestRow, StainOrigin, TileClass,
};
use crate::rng::{self, StreamRng};

const MAX_REJECTIONS: usize = 10_000;
const MAX_ABS_COS: f64 = 0.3;
const TUMOR_CONCENTRATION: f64 = 10.0;
const TIMESPAN_DAYS: i64 = 4 * 365;
const SCANNERS: [&str; 3] = ["scanner_a", "scanner_b", "scanner_c"];
const PROCEDURES: [&str; 2] = ["resection", "biopsy"];
const METASTATIC_SITES: [&str; 3] = ["liver", "lymph_node", "peritoneum"];
const PRIMARY_SITE: &str = "primary";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPrograms {
    pub id: String,
    pub programs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_bags: usize,
    pub dim: usize,
    pub n_programs: usize,
    /// Activation probability of each latent program.
    pub program_activity: Vec<f64>,
    pub targets: Vec<TargetPrograms>,
    /// Probability of flipping each target label after the noisy-OR.
    pub label_noise: f64,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub tumor_fraction_mean: f64,
    pub signal_amplitude: f64,
    pub noise_sigma: f64,
    pub class_offset_magnitude: f64,
    pub external_fraction: f64,
    pub stain_shift_magnitude: f64,
    pub grade_effect: f64,
    pub site_effect: f64,
    pub cohort_id: String,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    /// Eight targets with prevalences near 0.40, 0.30, 0.20, 0.12, 0.08, 0.05,
    /// 0.03 and 0.02. The two rarest and ALT_F ride on programs that also feed
    /// the two commonest targets. 3125 bags leave 2000 in development after
    /// the external (20%) and temporal (20% of the rest) holdouts.
    fn default() -> Self {
        let targets = [
            ("ALT_A", vec![0, 6, 7]),
            ("ALT_B", vec![1, 5]),
            ("ALT_C", vec![2]),
            ("ALT_D", vec![3]),
            ("ALT_E", vec![4]),
            ("ALT_F", vec![5]),
            ("ALT_G", vec![6]),
            ("ALT_H", vec![7]),
        ]
        .into_iter()
        .map(|(id, programs)| TargetPrograms { id: id.into(), programs })
        .collect();
        SynthConfig {
            seed: 7,
            n_bags: 3125,
            dim: 64,
            n_programs: 8,
            program_activity: vec![0.3688, 0.2632, 0.20, 0.12, 0.08, 0.05, 0.03, 0.02],
            targets,
            label_noise: 0.0,
            tiles_min: 16,
            tiles_max: 48,
            tumor_fraction_mean: 0.2,
            signal_amplitude: 3.0,
            noise_sigma: 1.0,
            class_offset_magnitude: 6.0,
            external_fraction: 0.2,
            stain_shift_magnitude: 0.5,
            grade_effect: 1.5,
            site_effect: 1.5,
            cohort_id: "synthetic".into(),
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.program_activity.len() != self.n_programs {
            return bad(format!(
                "program_activity has {} entries for {} programs",
                self.program_activity.len(),
                self.n_programs
            ));
        }
        if let Some(q) = self.program_activity.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return bad(format!("program activity {q} outside (0,1)"));
        }
        if self.targets.is_empty() {
            return bad("at least one target is required".into());
        }
        let mut ids = std::collections::HashSet::new();
        for t in &self.targets {
            if !ids.insert(&t.id) {
                return bad(format!("duplicate target {}", t.id));
            }
            if t.programs.is_empty() || t.programs.iter().any(|&p| p >= self.n_programs) {
                return bad(format!("target {} must reference >= 1 valid program", t.id));
            }
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0,0.5)", self.label_noise));
        }
        if self.tiles_min < 2 || self.tiles_min > self.tiles_max {
            return bad(format!(
                "need 2 <= tiles_min <= tiles_max, got {}..{}",
                self.tiles_min, self.tiles_max
            ));
        }
        if !(self.tumor_fraction_mean > 0.0 && self.tumor_fraction_mean < 1.0) {
            return bad("tumor_fraction_mean outside (0,1)".into());
        }
        if !(self.signal_amplitude > 0.0) || !(self.noise_sigma > 0.0) {
            return bad("signal_amplitude and noise_sigma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.external_fraction) {
            return bad("external_fraction outside [0,1)".into());
        }
        if !(self.stain_shift_magnitude >= 0.0) || !(self.class_offset_magnitude >= 0.0) {
            return bad("stain_shift_magnitude and class_offset_magnitude must be >= 0".into());
        }
        if !self.grade_effect.is_finite() || !self.site_effect.is_finite() {
            return bad("grade_effect and site_effect must be finite".into());
        }
        Ok(())
    }
}

/// A generated cohort plus the latent program activations that produced it.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub bags: Vec<FeatureBag>,
    pub manifest: CohortManifest,
    /// `programs[i][p]`: whether program `p` is active in bag `i`.
    pub programs: Vec<Vec<bool>>,
}

struct Directions {
    programs: Vec<Vec<f64>>,
    grade: Vec<f64>,
    site: Vec<f64>,
    class_offsets: Vec<Vec<f64>>,
    stain_shift: Vec<f32>,
}

fn unit_gaussian(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn draw_directions(cfg: &SynthConfig) -> Result<Directions> {
    let mut rng = rng::stream(cfg.seed, "synth/directions", 0);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_programs + 2);
    for k in 0..cfg.n_programs + 2 {
        let mut tries = 0;
        let v = loop {
            if tries == MAX_REJECTIONS {
                return Err(Error::Generation(format!(
                    "no direction {k} with |cos| <= {MAX_ABS_COS} after {MAX_REJECTIONS} tries (dim {})",
                    cfg.dim
                )));
            }
            tries += 1;
            let v = unit_gaussian(&mut rng, cfg.dim);
            if accepted.iter().all(|u| dot(u, &v).abs() <= MAX_ABS_COS) {
                break v;
            }
        };
        accepted.push(v);
    }
    let site = accepted.pop().expect("site direction");
    let grade = accepted.pop().expect("grade direction");
    let mut rng = rng::stream(cfg.seed, "synth/class_offsets", 0);
    let class_offsets = (0..TileClass::ALL.len() - 1)
        .map(|_| {
            unit_gaussian(&mut rng, cfg.dim)
                .into_iter()
                .map(|x| x * cfg.class_offset_magnitude)
                .collect()
        })
        .collect();
    let mut rng = rng::stream(cfg.seed, "synth/stain", 0);
    let stain_shift = unit_gaussian(&mut rng, cfg.dim)
        .into_iter()
        .map(|x| (x * cfg.stain_shift_magnitude) as f32)
        .collect();
    Ok(Directions {
        programs: accepted,
        grade,
        site,
        class_offsets,
        stain_shift,
    })
}

fn external_mask(cfg: &SynthConfig) -> Vec<bool> {
    let n_external = (cfg.external_fraction * cfg.n_bags as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_bags).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "synth/external", 0));
    let mut mask = vec![false; cfg.n_bags];
    for &i in &order[..n_external.min(cfg.n_bags)] {
        mask[i] = true;
    }
    mask
}

pub fn bag_id(index: usize) -> String {
    format!("bag{index:05}")
}

fn generate_bag(
    cfg: &SynthConfig,
    dirs: &Directions,
    index: usize,
    external: bool,
) -> Result<(FeatureBag, ManifestRow, Vec<bool>)> {
    let idx = index as u64;
    let mut lrng = rng::stream(cfg.seed, "synth/labels", idx);
    let programs: Vec<bool> = cfg
        .program_activity
        .iter()
        .map(|&q| lrng.random_bool(q))
        .collect();
    let labels = cfg
        .targets
        .iter()
        .map(|t| {
            let y = t.programs.iter().any(|&p| programs[p]);
            let flip = cfg.label_noise > 0.0 && lrng.random_bool(cfg.label_noise);
            Label::from_bool(y ^ flip)
        })
        .collect();

    let mut mrng = rng::stream(cfg.seed, "synth/meta", idx);
    let high_grade = mrng.random_bool(0.5);
    let primary = mrng.random_bool(0.5);
    let scanner = SCANNERS[mrng.random_range(0..SCANNERS.len())];
    let procedure = PROCEDURES[mrng.random_range(0..PROCEDURES.len())];
    let tissue_site = if primary {
        PRIMARY_SITE
    } else {
        METASTATIC_SITES[mrng.random_range(0..METASTATIC_SITES.len())]
    };
    let timestamp = cfg.start_date + Duration::days(mrng.random_range(0..TIMESPAN_DAYS));

    let mut trng = rng::stream(cfg.seed, "synth/tiles", idx);
    let n_tiles = trng.random_range(cfg.tiles_min..=cfg.tiles_max);
    let mu = cfg.tumor_fraction_mean;
    let beta = Beta::new(mu * TUMOR_CONCENTRATION, (1.0 - mu) * TUMOR_CONCENTRATION)
        .map_err(|e| Error::Generation(e.to_string()))?;
    let tumor_fraction: f64 = beta.sample(&mut trng);

    // unit-norm sum of the active program directions
    let mut signal = vec![0.0f64; cfg.dim];
    for (p, &on) in programs.iter().enumerate() {
        if on {
            for (s, d) in signal.iter_mut().zip(&dirs.programs[p]) {
                *s += d;
            }
        }
    }
    let norm = signal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        signal.iter_mut().for_each(|s| *s *= cfg.signal_amplitude / norm);
    }
    let grade_val = if high_grade { 1.0 } else { -1.0 };
    let site_val = if primary { 1.0 } else { -1.0 };
    let tumor_mean: Vec<f64> = (0..cfg.dim)
        .map(|j| {
            signal[j] + cfg.grade_effect * grade_val * dirs.grade[j] + cfg.site_effect * site_val * dirs.site[j]
        })
        .collect();

    let mut features = Vec::with_capacity(n_tiles * cfg.dim);
    let mut classes = Vec::with_capacity(n_tiles);
    for _ in 0..n_tiles {
        let class = if trng.random_bool(tumor_fraction) {
            TileClass::Tumor
        } else {
            TileClass::ALL[trng.random_range(1..TileClass::ALL.len())]
        };
        let mean = match class {
            TileClass::Tumor => &tumor_mean,
            c => &dirs.class_offsets[c.code() as usize - 1],
        };
        for (j, m) in mean.iter().enumerate() {
            let noise: f64 = trng.sample(StandardNormal);
            let mut v = (m + cfg.noise_sigma * noise) as f32;
            if external {
                v += dirs.stain_shift[j];
            }
            features.push(v);
        }
        classes.push(class);
    }
    let cols = (n_tiles as f64).sqrt().ceil() as usize;
    let coords = (0..n_tiles)
        .map(|k| [(k % cols) as u32, (k / cols) as u32])
        .collect();
    let tumor = classes.iter().map(|&c| c == TileClass::Tumor).collect();
    let id = bag_id(index);
    let bag = FeatureBag::new(id.clone(), n_tiles, cfg.dim, features)?
        .with_coords(coords)?
        .with_tile_class(classes)?
        .with_tumor_label(tumor)?;
    let row = ManifestRow {
        bag_id: id,
        cohort_id: cfg.cohort_id.clone(),
        timestamp,
        stain_origin: if external { StainOrigin::External } else { StainOrigin::Internal },
        scanner: scanner.into(),
        tissue_site: tissue_site.into(),
        procedure: procedure.into(),
        grade: Some(if high_grade { Grade::High } else { Grade::Low }),
        is_primary_site: Some(primary),
        labels,
    };
    Ok((bag, row, programs))
}

/// Generates a cohort; output is a pure function of the config.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let dirs = draw_directions(cfg)?;
    let external = external_mask(cfg);
    let generated = (0..cfg.n_bags)
        .into_par_iter()
        .map(|i| generate_bag(cfg, &dirs, i, external[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut bags = Vec::with_capacity(cfg.n_bags);
    let mut rows = Vec::with_capacity(cfg.n_bags);
    let mut programs = Vec::with_capacity(cfg.n_bags);
    for (b, r, p) in generated {
        bags.push(b);
        rows.push(r);
        programs.push(p);
    }
    let manifest = CohortManifest::new(cfg.targets.iter().map(|t| t.id.clone()).collect(), rows)?;
    Ok(Cohort { bags, manifest, programs })
}

/// Planted ground truth for one bag, in bag tile order.
#[derive(Debug, Clone, PartialEq)]
pub struct BagTruth {
    pub bag_id: String,
    pub tile_class: Vec<TileClass>,
    pub tumor: Vec<bool>,
    pub programs: Option<Vec<bool>>,
}

impl BagTruth {
    pub fn tumor_count(&self) -> usize {
        self.tumor.iter().filter(|&&t| t).count()
    }
}

/// Echoes the planted per-tile metadata. `programs`, when given, must be index-aligned with `bags`.
pub fn planted_truth(bags: &[FeatureBag], programs: Option<&[Vec<bool>]>) -> Result<Vec<BagTruth>> {
    if let Some(p) = programs {
        if p.len() != bags.len() {
            return Err(Error::Shape(format!(
                "{} program rows for {} bags",
                p.len(),
                bags.len()
            )));
        }
    }
    bags.iter()
        .enumerate()
        .map(|(i, b)| {
            let (Some(classes), Some(tumor)) = (b.tile_class(), b.tumor_label()) else {
                return Err(Error::MissingTruth(b.id().to_string()));
            };
            Ok(BagTruth {
                bag_id: b.id().to_string(),
                tile_class: classes.to_vec(),
                tumor: tumor.to_vec(),
                programs: programs.map(|p| p[i].clone()),
            })
        })
        .collect()
}

pub fn write_programs_csv(path: &std::path::Path, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let n_programs = cohort.programs.first().map_or(0, Vec::len);
    let mut header = vec!["bag_id".to_string()];
    header.extend((0..n_programs).map(|p| format!("program_{p}")));
    w.write_record(&header)?;
    for (bag, progs) in cohort.bags.iter().zip(&cohort.programs) {
        let mut rec = vec![bag.id().to_string()];
        rec.extend(progs.iter().map(|&on| (on as u8).to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("programs", e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_bags: usize) -> SynthConfig {
        SynthConfig {
            n_bags,
            dim: 16,
            tiles_min: 4,
            tiles_max: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_cohort() {
        let c = generate_cohort(&small(0)).unwrap();
        assert!(c.bags.is_empty() && c.manifest.is_empty());
        assert_eq!(c.manifest.targets().len(), 8);
    }

    #[test]
    fn deterministic() {
        let a = generate_cohort(&small(20)).unwrap();
        let b = generate_cohort(&small(20)).unwrap();
        assert_eq!(a.bags, b.bags);
        assert_eq!(a.manifest, b.manifest);
        let c = generate_cohort(&SynthConfig { seed: 8, ..small(20) }).unwrap();
        assert_ne!(a.bags, c.bags);
    }

    #[test]
    fn bag_invariants() {
        let cfg = small(50);
        let c = generate_cohort(&cfg).unwrap();
        for (bag, progs) in c.bags.iter().zip(&c.programs) {
            assert!((cfg.tiles_min..=cfg.tiles_max).contains(&bag.n_tiles()));
            assert_eq!(bag.dim(), cfg.dim);
            let row = c.manifest.row(bag.id()).unwrap();
            for (t, spec) in cfg.targets.iter().enumerate() {
                let expect = spec.programs.iter().any(|&p| progs[p]);
                assert_eq!(row.labels[t].value(), Some(expect));
            }
        }
        let n_ext = c
            .manifest
            .rows()
            .iter()
            .filter(|r| r.stain_origin == StainOrigin::External)
            .count();
        assert_eq!(n_ext, 10);
    }

    #[test]
    fn infeasible_directions() {
        let cfg = SynthConfig { dim: 2, n_bags: 1, ..SynthConfig::default() };
        assert!(matches!(generate_cohort(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small(1);
        cfg.targets[0].programs = vec![99];
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { tiles_min: 1, ..small(1) };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { tiles_min: 10, tiles_max: 5, ..small(1) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truth_echoes_bag_metadata() {
        let c = generate_cohort(&small(10)).unwrap();
        let truth = planted_truth(&c.bags, Some(&c.programs)).unwrap();
        for (t, b) in truth.iter().zip(&c.bags) {
            assert_eq!(t.tile_class, b.tile_class().unwrap());
            assert_eq!(t.tumor, b.tumor_label().unwrap());
        }
        let bare = FeatureBag::new("x", 1, 1, vec![0.0]).unwrap();
        assert!(matches!(planted_truth(&[bare], None), Err(Error::MissingTruth(_))));
    }
}
