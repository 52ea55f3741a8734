use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mtmil::analysis::{
    attention_annotation_auc, attention_report_json, extract_embeddings, high_attention_fractions, logistic_probe,
    write_heatmaps, ProbeTask,
};
use mtmil::config::{default_keys, RunConfig};
use mtmil::feature_store::{read_feature_store, read_manifest, select_targets, write_feature_store, write_targets_csv, FeatureBag};
use mtmil::plot::{roc_svg, scatter_svg, Scatter};
use mtmil::splitter::{split_cohort, SplitAssignment, Subset};
use mtmil::stats::{compare_reports, read_json, write_json, Comparison, MetricsReport, PairedTest, TestOutcome};
use mtmil::synthgen::{generate_cohort, write_programs_csv};
use mtmil::trainer::{predict, train_cv, BagIndex, FoldModels, Mode, PredictionSet, Scoring};
use mtmil::{Error, Result};

const TARGETS_FILE: &str = "targets.csv";

#[derive(Parser)]
#[command(name = "mtmil", version, about = "Multi-task attention MIL over bags of tile features")]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on this.
    #[arg(long, global = true, env = "MTMIL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.learning_rate=3e-3. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    /// Out-of-fold on dev, fold ensemble on holdouts.
    Auto,
    Ensemble,
    OutOfFold,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    /// ROC curves from an eval report.
    Roc,
    /// Per-target AUC of model a against model b from a comparison.
    Scatter,
    /// Per-target AUC gain against prevalence from a comparison.
    Gain,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic feature store.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Carve temporal and external holdouts and assign CV folds to dev bags.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: PathBuf,
        /// Fold count; overrides split.k.
        #[arg(long)]
        k: Option<usize>,
        /// Fold assignment seed; overrides split.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Target inclusion table; defaults to targets.csv next to --out.
        #[arg(long)]
        targets_out: Option<PathBuf>,
    },
    /// Train one model per CV fold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// multitask or singletask:TARGET
        #[arg(long, default_value = "multitask")]
        mode: Mode,
        /// Target inclusion table; defaults to targets.csv next to --splits,
        /// else every manifest target.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-target ROC-AUC on one subset, with bootstrap intervals.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directories; reports over their tasks are merged.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value = "dev")]
        subset: Subset,
        #[arg(long, value_enum, default_value = "auto")]
        scoring: ScoringArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write bag_id,target_id,prob rows here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write per-bag attention CSVs here (first model only).
        #[arg(long)]
        attention_dir: Option<PathBuf>,
    },
    /// Paired comparison of two eval reports.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "t")]
        test: PairedTest,
        /// CSV with target_id and prevalence columns, e.g. targets.csv from split.
        #[arg(long)]
        prevalences: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tumor enrichment among high-attention tiles, attention-vs-annotation AUC and heatmaps.
    Attn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value = "dev")]
        subset: Subset,
        /// Output directory for attention.json and heatmaps/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Logistic probe on fold-averaged slide embeddings.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        task: ProbeTask,
        #[arg(long, default_value = "dev")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Static SVG figure from a report or comparison.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Omit the generation timestamp comment.
        #[arg(long)]
        no_meta: bool,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn keys_help() -> String {
    let keys = default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys and defaults (set in --config or with --set):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:width$} = {v}\n"));
    }
    s
}

struct Store {
    bags: Vec<FeatureBag>,
    manifest: mtmil::feature_store::CohortManifest,
}

impl Store {
    fn read(dir: &Path) -> Result<Self> {
        let (bags, manifest) = read_feature_store(dir)?;
        Ok(Store { bags, manifest })
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::StoreIo { path: path.to_path_buf(), source: e }
}

/// Included targets from a targets.csv written by `split`.
fn read_included_targets(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format { context: path.display().to_string(), detail: e.to_string() })?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            context: path.display().to_string(),
            detail: format!("missing column {name}"),
        })
    };
    let (id, inc) = (col("target_id")?, col("included")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if &rec[inc] == "true" {
            out.push(rec[id].to_string());
        }
    }
    Ok(out)
}

fn read_prevalences(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format { context: path.display().to_string(), detail: e.to_string() })?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            context: path.display().to_string(),
            detail: format!("missing column {name}"),
        })
    };
    let (id, prev) = (col("target_id")?, col("prevalence")?);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let p: f64 = rec[prev].parse().map_err(|_| Error::Format {
            context: path.display().to_string(),
            detail: format!("bad prevalence {:?}", &rec[prev]),
        })?;
        out.insert(rec[id].to_string(), p);
    }
    Ok(out)
}

fn scoring_for<'a>(arg: ScoringArg, subset: Subset, split: &'a SplitAssignment) -> Scoring<'a> {
    match (arg, subset) {
        (ScoringArg::Ensemble, _) => Scoring::Ensemble,
        (ScoringArg::OutOfFold, _) | (ScoringArg::Auto, Subset::Dev) => Scoring::OutOfFold(split),
        (ScoringArg::Auto, _) => Scoring::Ensemble,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn cmd_gen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let rc = cfg.load()?;
    let cohort = generate_cohort(&rc.synth)?;
    write_feature_store(&cohort.bags, &cohort.manifest, out)?;
    write_programs_csv(&out.join("programs.csv"), &cohort)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, rc.to_toml_string()?).map_err(|e| io_err(&cfg_path, e))?;
    println!("wrote {} bags with {} targets to {}", cohort.bags.len(), cohort.manifest.targets().len(), out.display());
    Ok(())
}

fn cmd_split(cfg: &ConfigArgs, store: &Path, k: Option<usize>, seed: Option<u64>, out: &Path, targets_out: Option<&Path>) -> Result<()> {
    let mut rc = cfg.load()?;
    rc.split.k = k.unwrap_or(rc.split.k);
    rc.split.seed = seed.unwrap_or(rc.split.seed);
    rc.validate()?;
    let manifest = read_manifest(store)?;
    let specs = select_targets(&manifest, rc.split.min_positives, &rc.split.overrides)?;
    let included: Vec<String> = specs.iter().filter(|s| s.included).map(|s| s.target_id.clone()).collect();
    let split = split_cohort(&manifest, &included, rc.split.temporal_fraction, rc.split.k, rc.split.seed)?;
    ensure_parent(out)?;
    split.write(out)?;
    let tpath = targets_out.map_or_else(|| sibling(out, TARGETS_FILE), Path::to_path_buf);
    ensure_parent(&tpath)?;
    write_targets_csv(&tpath, &specs)?;
    let n = |s| split.subset_ids(s).len();
    println!(
        "dev {} temporal {} external {}; {} folds; {}/{} targets included",
        n(Subset::Dev),
        n(Subset::Temporal),
        n(Subset::External),
        split.k(),
        included.len(),
        specs.len()
    );
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, store: &Path, splits: &Path, mode: &Mode, targets: Option<&Path>, out: &Path) -> Result<()> {
    let rc = cfg.load()?;
    let st = Store::read(store)?;
    let split = SplitAssignment::read(splits)?;
    let default_targets = sibling(splits, TARGETS_FILE);
    let targets = match targets {
        Some(p) => read_included_targets(p)?,
        None if default_targets.exists() => read_included_targets(&default_targets)?,
        None => st.manifest.targets().to_vec(),
    };
    if let Mode::Singletask(t) = mode {
        if !targets.contains(t) {
            return Err(Error::UnknownTarget(t.clone()));
        }
    }
    let src = BagIndex::new(&st.bags);
    let models = train_cv(&src, &st.manifest, &split, &targets, &rc.train, mode)?;
    models.save(out)?;
    let best: Vec<usize> = models.folds.iter().map(|f| f.best_epoch).collect();
    println!("trained {} fold models ({mode}, {} tasks); best epochs {best:?}", models.k(), models.tasks.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &ConfigArgs,
    model_dirs: &[PathBuf],
    store: &Path,
    splits: &Path,
    subset: Subset,
    scoring: ScoringArg,
    out: &Path,
    predictions: Option<&Path>,
    attention_dir: Option<&Path>,
) -> Result<()> {
    let rc = cfg.load()?;
    let st = Store::read(store)?;
    let split = SplitAssignment::read(splits)?;
    let ids = split.subset_ids(subset);
    let src = BagIndex::new(&st.bags);
    let scoring = scoring_for(scoring, subset, &split);
    let cv = match scoring {
        Scoring::OutOfFold(s) => Some(s),
        Scoring::Ensemble => None,
    };
    let boot = rc.stats.bootstrap();
    let mut reports = Vec::new();
    let mut sets: Vec<PredictionSet> = Vec::new();
    for dir in model_dirs {
        let models = FoldModels::load(dir)?;
        let preds = predict(&models, &src, &ids, scoring)?;
        reports.push(preds.report(&st.manifest, cv, Some(&boot), true)?);
        sets.push(preds);
    }
    let report = MetricsReport::merge(reports)?;
    ensure_parent(out)?;
    report.write(out)?;
    if let Some(p) = predictions {
        ensure_parent(p)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bag_id", "target_id", "prob"])?;
        for set in &sets {
            for b in &set.bags {
                for (t, pr) in set.tasks.iter().zip(&b.probs) {
                    w.write_record([b.bag_id.as_str(), t.as_str(), &pr.to_string()])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format { context: "predictions".into(), detail: e.to_string() })?;
        fs::write(p, bytes).map_err(|e| io_err(p, e))?;
    }
    if let Some(d) = attention_dir {
        sets[0].write_attention(d)?;
    }
    let undefined = report.targets.values().filter(|m| !m.is_defined()).count();
    println!(
        "{}: mean AUC {} over {} targets ({} undefined)",
        subset.as_str(),
        fmt_opt(report.summary.mean),
        report.summary.n,
        undefined
    );
    Ok(())
}

fn comparison_json(c: &Comparison, alpha: f64) -> Value {
    let mut v = c.to_json();
    let sig = match &c.outcome {
        TestOutcome::Computed(r) => Some(r.p_value < alpha),
        TestOutcome::Identical => None,
    };
    v["alpha"] = json!(alpha);
    v["significant"] = json!(sig);
    if let Some(r) = &c.gain_vs_prevalence {
        v["gain_vs_prevalence"]["significant"] = json!(r.p_value < alpha);
    }
    v
}

fn cmd_compare(cfg: &ConfigArgs, a: &Path, b: &Path, test: PairedTest, prevalences: Option<&Path>, out: &Path) -> Result<()> {
    let rc = cfg.load()?;
    let ra = MetricsReport::read(a)?;
    let rb = MetricsReport::read(b)?;
    let prev = prevalences.map(read_prevalences).transpose()?;
    let c = compare_reports(&ra, &rb, test, prev.as_ref())?;
    ensure_parent(out)?;
    write_json(out, &comparison_json(&c, rc.stats.alpha))?;
    match &c.outcome {
        TestOutcome::Computed(r) => println!("{} targets: statistic {:.4}, one-tailed p {:.4e}", r.n, r.statistic, r.p_value),
        TestOutcome::Identical => println!("{} targets: identical AUCs", c.deltas.len()),
    }
    if let Some(r) = &c.gain_vs_prevalence {
        println!("gain vs prevalence: r {:.4}, p {:.4e}", r.statistic, r.p_value);
    }
    Ok(())
}

fn cmd_attn(cfg: &ConfigArgs, model_dir: &Path, store: &Path, splits: &Path, subset: Subset, out: &Path) -> Result<()> {
    let rc = cfg.load()?;
    let st = Store::read(store)?;
    let split = SplitAssignment::read(splits)?;
    let ids = split.subset_ids(subset);
    let src = BagIndex::new(&st.bags);
    let models = FoldModels::load(model_dir)?;
    let preds = predict(&models, &src, &ids, scoring_for(ScoringArg::Auto, subset, &split))?;
    let fr = high_attention_fractions(&preds, &src, rc.attn.top_fraction)?;
    let ann = match attention_annotation_auc(&preds, &src, Some(&rc.stats.bootstrap())) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    let mut v = attention_report_json(&fr, ann.as_ref(), rc.attn.top_fraction);
    v["subset"] = json!(subset.as_str());
    v["alpha"] = json!(rc.stats.alpha);
    v["significant"] = json!(fr.test.as_ref().map(|t| t.p_value < rc.stats.alpha));
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_json(&out.join("attention.json"), &v)?;
    write_heatmaps(&preds, &src, &out.join("heatmaps"))?;
    println!(
        "tumor fraction top {} vs all {}; wilcoxon p {}; annotation AUC {}",
        fmt_opt(v["tumor_fraction_top_mean"].as_f64()),
        fmt_opt(v["tumor_fraction_all_mean"].as_f64()),
        fr.test.as_ref().map_or("undefined".into(), |t| format!("{:.4e}", t.p_value)),
        fmt_opt(ann.map(|a| a.auc))
    );
    Ok(())
}

fn cmd_probe(cfg: &ConfigArgs, model_dir: &Path, store: &Path, splits: &Path, task: ProbeTask, subset: Subset, out: &Path) -> Result<()> {
    let rc = cfg.load()?;
    let st = Store::read(store)?;
    let split = SplitAssignment::read(splits)?;
    let ids = split.subset_ids(subset);
    let src = BagIndex::new(&st.bags);
    let models = FoldModels::load(model_dir)?;
    let emb = extract_embeddings(&models, &src, &ids)?;
    let labels = task.labels(&st.manifest, &ids)?;
    let res = logistic_probe(task, &emb, &labels, &rc.probe, Some(&rc.stats.bootstrap()))?;
    let mut v = res.to_json();
    v["subset"] = json!(subset.as_str());
    ensure_parent(out)?;
    write_json(out, &v)?;
    println!("{} probe: test AUC {:.4} (converged {})", task.as_str(), res.auc, res.fit.converged);
    Ok(())
}

fn cmd_plot(input: &Path, kind: PlotKind, out: &Path, no_meta: bool) -> Result<()> {
    let v = read_json(input)?;
    let meta = (!no_meta).then(|| {
        let now: chrono::DateTime<chrono::Utc> = std::time::SystemTime::now().into();
        format!("mtmil {} generated {}", env!("CARGO_PKG_VERSION"), now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    });
    let svg = match kind {
        PlotKind::Roc => {
            let report = MetricsReport::from_json(&v)?;
            let curves: Vec<(String, Vec<(f64, f64)>)> = report
                .targets
                .iter()
                .filter_map(|(k, m)| Some((format!("{k} ({:.3})", m.auc?), m.roc.clone()?)))
                .collect();
            if curves.is_empty() {
                return Err(Error::Validation(format!("{}: no ROC curves to plot", input.display())));
            }
            roc_svg(&curves, "ROC", meta.as_deref())
        }
        PlotKind::Scatter | PlotKind::Gain => {
            let deltas = v["deltas"]
                .as_array()
                .ok_or_else(|| Error::Validation(format!("{}: not a comparison", input.display())))?;
            let field = |d: &Value, k: &str| d[k].as_f64();
            let points: Vec<(String, f64, f64)> = deltas
                .iter()
                .filter_map(|d| {
                    let name = d["target"].as_str()?.to_string();
                    match kind {
                        PlotKind::Gain => Some((name, field(d, "prevalence")?, field(d, "delta")?)),
                        _ => Some((name, field(d, "b")?, field(d, "a")?)),
                    }
                })
                .collect();
            if points.is_empty() {
                return Err(Error::Validation(format!("{}: no points to plot", input.display())));
            }
            let s = match kind {
                PlotKind::Gain => Scatter {
                    title: "AUC gain vs prevalence",
                    xlabel: "prevalence",
                    ylabel: "AUC a - AUC b",
                    points: &points,
                    diagonal: false,
                    zero_line: true,
                },
                _ => Scatter { title: "Per-target AUC", xlabel: "AUC b", ylabel: "AUC a", points: &points, diagonal: true, zero_line: false },
            };
            scatter_svg(&s, meta.as_deref())
        }
    };
    ensure_parent(out)?;
    fs::write(out, svg).map_err(|e| io_err(out, e))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Gen { cfg, out } => cmd_gen(cfg, out),
        Cmd::Split { cfg, store, k, seed, out, targets_out } => cmd_split(cfg, store, *k, *seed, out, targets_out.as_deref()),
        Cmd::Train { cfg, store, splits, mode, targets, out } => cmd_train(cfg, store, splits, mode, targets.as_deref(), out),
        Cmd::Eval { cfg, models, store, splits, subset, scoring, out, predictions, attention_dir } => cmd_eval(
            cfg,
            models,
            store,
            splits,
            *subset,
            *scoring,
            out,
            predictions.as_deref(),
            attention_dir.as_deref(),
        ),
        Cmd::Compare { cfg, a, b, test, prevalences, out } => cmd_compare(cfg, a, b, *test, prevalences.as_deref(), out),
        Cmd::Attn { cfg, models, store, splits, subset, out } => cmd_attn(cfg, models, store, splits, *subset, out),
        Cmd::Probe { cfg, models, store, splits, task, subset, out } => cmd_probe(cfg, models, store, splits, *task, *subset, out),
        Cmd::Plot { input, kind, out, no_meta } => cmd_plot(input, *kind, out, *no_meta),
        Cmd::Config { cfg } => {
            print!("{}", cfg.load()?.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let cmd = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|s| s.after_long_help(help.clone()));
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
