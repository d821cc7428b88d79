//! `taxpath`: run title-to-taxonomy-path experiments from the command line.
//!
//! Every subcommand derives its behavior from one TOML experiment
//! configuration (`--config`, or a built-in desk-scale default). The global
//! seed and artifact directory can be overridden with `--seed`/`--out` or
//! the `TAXPATH_SEED`/`TAXPATH_OUT` environment variables (flags win).
//!
//! Artifacts are stamped with the sha256 hash of the effective configuration
//! and the seed; commands that consume artifacts refuse hash mismatches
//! unless `--allow-stale` is passed. Reruns with an unchanged configuration
//! produce byte-identical artifacts.
//!
//! Exit codes:
//!   0  success
//!   1  configuration or usage error (bad config file, unknown system)
//!   2  missing or malformed artifact, or an I/O failure (clap also uses 2
//!      for malformed command lines)
//!   3  stale artifact: embedded config hash differs from the current
//!      configuration (override with --allow-stale)
//!   4  computation failure (training divergence, decode failure)

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use taxpath_core::corpus::{write_catalog_tsv, Product};
use taxpath_core::eval::{BootstrapReport, CrossValReport, MetricsReport, SweepReport};
use taxpath_core::experiment::{
    self as exp, seeds, subseed, ExperimentConfig, ExperimentError, PredictionRow, Stamped,
    SystemKind,
};
use taxpath_core::models::Model;
use taxpath_core::taxonomy::PathShapeReport;

#[derive(Parser)]
#[command(
    name = "taxpath",
    version,
    about = "Translate product titles into taxonomy paths and evaluate the systems",
    after_help = "Exit codes: 0 success; 1 config/usage error; 2 missing or bad artifact/IO; \
                  3 stale artifact (see --allow-stale); 4 computation failure.\n\
                  Environment: TAXPATH_SEED and TAXPATH_OUT override the config file; \
                  --seed/--out override both."
)]
struct Cli {
    /// TOML experiment configuration (omit for the built-in desk-scale
    /// synthetic default).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed override (also: TAXPATH_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory override (also: TAXPATH_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Accept artifacts whose embedded config hash differs from the current
    /// configuration.
    #[arg(long, global = true)]
    allow_stale: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the catalog, split it, build vocabularies, and write
    /// the data artifacts.
    Prepare,
    /// Train every configured model and write checkpoints plus training
    /// histories.
    Train,
    /// Decode the test bucket with one system (default: all systems).
    Predict {
        /// System to run (repeatable); defaults to every configured system.
        #[arg(long)]
        system: Vec<String>,
    },
    /// Score prediction files with support-weighted precision/recall/F1.
    Evaluate {
        /// System to score (repeatable); defaults to every system with a
        /// predictions artifact.
        #[arg(long)]
        system: Vec<String>,
    },
    /// Bootstrap-resample the test pairs and report p5/p95 intervals.
    Bootstrap {
        #[arg(long)]
        system: Vec<String>,
    },
    /// Stratified k-fold cross-validation of one system over the full
    /// catalog.
    Crossval {
        /// System to cross-validate. Translation systems retrain per fold.
        #[arg(long, default_value = "knn")]
        system: String,
    },
    /// Retrain each system across shrinking train splits and tabulate
    /// weighted F1.
    Sweep {
        /// Systems to sweep (repeatable); defaults to every configured
        /// system.
        #[arg(long)]
        system: Vec<String>,
    },
    /// Classify predicted paths against the gold taxonomy and graft accepted
    /// novel paths onto it.
    AnalyzePaths {
        #[arg(long)]
        system: Vec<String>,
    },
    /// Combine metric, bootstrap, cross-validation, and sweep artifacts into
    /// one text report.
    Report,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Failure {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Failure {
        let code = match &e {
            ExperimentError::BadConfig(_)
            | ExperimentError::Toml(_)
            | ExperimentError::UnknownSystem(_) => 1,
            ExperimentError::Io { .. }
            | ExperimentError::Json(_)
            | ExperimentError::BadArtifact { .. }
            | ExperimentError::MissingPrediction(_)
            | ExperimentError::DuplicatePrediction(_)
            | ExperimentError::Corpus(_) => 2,
            ExperimentError::HashMismatch { .. } => 3,
            ExperimentError::Model(_)
            | ExperimentError::Tensor(_)
            | ExperimentError::Decode(_)
            | ExperimentError::Eval(_)
            | ExperimentError::Knn(_) => 4,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(f) => {
            eprintln!("taxpath: {}", f.message);
            std::process::exit(f.code);
        }
    }
}

/// Flags beat environment variables beat the config file.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load_toml(path)?,
        None => ExperimentConfig::desk_default("taxpath-out"),
    };
    if let Ok(v) = std::env::var("TAXPATH_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|e| Failure::new(1, format!("TAXPATH_SEED {v:?} is not a seed: {e}")))?;
    }
    if let Ok(v) = std::env::var("TAXPATH_OUT") {
        cfg.out_dir = PathBuf::from(v);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Artifact locations under the output directory.
struct Paths {
    out: PathBuf,
}

impl Paths {
    fn join(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn catalog(&self) -> PathBuf {
        self.join("catalog.tsv")
    }

    fn split(&self) -> PathBuf {
        self.join("split.json")
    }

    fn checkpoint(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.ckpt"))
    }

    fn history(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.history.jsonl"))
    }

    fn predictions(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.predictions.tsv"))
    }

    fn metrics(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.metrics.json"))
    }

    fn bootstrap(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.bootstrap.json"))
    }

    fn crossval(&self, system: &str) -> PathBuf {
        self.join(&format!("crossval.{system}.json"))
    }

    fn paths_report(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.paths.json"))
    }

    fn verdicts(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.verdicts.tsv"))
    }

    fn taxonomy(&self, system: &str) -> PathBuf {
        self.join(&format!("{system}.taxonomy.tsv"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

struct Run {
    cfg: ExperimentConfig,
    hash: String,
    paths: Paths,
    allow_stale: bool,
}

impl Run {
    fn new(cli: &Cli) -> Result<Run, Failure> {
        let cfg = effective_config(cli)?;
        let hash = cfg.config_hash();
        let paths = Paths {
            out: cfg.out_dir.clone(),
        };
        std::fs::create_dir_all(&paths.out)
            .map_err(|e| Failure::new(2, format!("{}: {e}", paths.out.display())))?;
        Ok(Run {
            cfg,
            hash,
            paths,
            allow_stale: cli.allow_stale,
        })
    }

    fn meta(&self, system: Option<&str>) -> Vec<String> {
        exp::meta_lines(&self.hash, self.cfg.seed, system)
    }

    fn stamp<T>(&self, system: Option<&str>, payload: T) -> Stamped<T> {
        Stamped {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            system: system.map(str::to_string),
            payload,
        }
    }

    /// Requested systems, or a default drawn from the configuration;
    /// validates every name.
    fn systems(&self, requested: &[String], default: Vec<String>) -> Result<Vec<String>, Failure> {
        let list = if requested.is_empty() {
            default
        } else {
            requested.to_vec()
        };
        for name in &list {
            exp::resolve_system(&self.cfg, name)?;
        }
        Ok(list)
    }

    /// Systems that already have a predictions artifact, in configuration
    /// order.
    fn systems_with_predictions(&self) -> Vec<String> {
        exp::system_names(&self.cfg)
            .into_iter()
            .filter(|name| self.paths.predictions(name).exists())
            .collect()
    }

    fn read_predictions(&self, system: &str) -> Result<Vec<PredictionRow>, Failure> {
        let path = self.paths.predictions(system);
        if !path.exists() {
            return Err(Failure::new(
                2,
                format!(
                    "{} not found; run `taxpath predict --system {system}` first",
                    path.display()
                ),
            ));
        }
        let (rows, meta) = exp::read_predictions_tsv(&path)?;
        let found = exp::meta_value(&meta, "config_hash").ok_or_else(|| {
            Failure::new(2, format!("{}: no config_hash metadata", path.display()))
        })?;
        exp::check_hash(found, &self.hash, &path, self.allow_stale)?;
        Ok(rows)
    }

    fn load_checkpoint(&self, system: &str) -> Result<Model, Failure> {
        let path = self.paths.checkpoint(system);
        if !path.exists() {
            return Err(Failure::new(
                2,
                format!("{} not found; run `taxpath train` first", path.display()),
            ));
        }
        let (model, meta) = exp::load_model(&path)?;
        exp::check_hash(&meta.config_hash, &self.hash, &path, self.allow_stale)?;
        Ok(model)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let run = Run::new(cli)?;
    match &cli.command {
        Command::Prepare => cmd_prepare(&run),
        Command::Train => cmd_train(&run),
        Command::Predict { system } => cmd_predict(&run, system),
        Command::Evaluate { system } => cmd_evaluate(&run, system),
        Command::Bootstrap { system } => cmd_bootstrap(&run, system),
        Command::Crossval { system } => cmd_crossval(&run, system),
        Command::Sweep { system } => cmd_sweep(&run, system),
        Command::AnalyzePaths { system } => cmd_analyze(&run, system),
        Command::Report => cmd_report(&run),
    }
}

fn cmd_prepare(run: &Run) -> Result<(), Failure> {
    let data = exp::prepare(&run.cfg)?;
    write_text(&run.paths.join("config.effective.toml"), &run.cfg.to_toml()?)?;
    write_catalog_tsv(&data.products, &run.paths.catalog(), &run.meta(None))
        .map_err(ExperimentError::from)?;
    exp::write_stamped_json(&run.paths.split(), &run.stamp(None, data.split.clone()))?;
    let vocab_meta = format!("config_hash: {}; seed: {}", run.hash, run.cfg.seed);
    data.src_vocab
        .save(&run.paths.join("src.vocab"), &vocab_meta)
        .map_err(ExperimentError::from)?;
    data.tgt_vocab
        .save(&run.paths.join("tgt.vocab"), &vocab_meta)
        .map_err(ExperimentError::from)?;
    let classes: std::collections::HashSet<String> =
        data.products.iter().map(Product::class).collect();
    let summary = json!({
        "products": data.products.len(),
        "classes": classes.len(),
        "train": data.split.train.len(),
        "validation": data.split.validation.len(),
        "test": data.split.test.len(),
        "skipped_unk_targets": data.skipped_unk_targets,
        "skipped_deep_targets": data.skipped_deep_targets,
        "src_vocab_size": data.src_vocab.len(),
        "tgt_vocab_size": data.tgt_vocab.len(),
    });
    exp::write_stamped_json(&run.paths.join("prepared.json"), &run.stamp(None, summary))?;
    println!(
        "prepared {} products ({} classes) into {}/{}/{} train/validation/test; \
         source vocab {}, target vocab {}",
        data.products.len(),
        classes.len(),
        data.split.train.len(),
        data.split.validation.len(),
        data.split.test.len(),
        data.src_vocab.len(),
        data.tgt_vocab.len(),
    );
    println!("artifacts in {}", run.paths.out.display());
    Ok(())
}

fn cmd_train(run: &Run) -> Result<(), Failure> {
    let data = exp::prepare(&run.cfg)?;
    let systems = exp::train_all(&run.cfg, &data)?;
    for sys in &systems {
        exp::save_model(
            &run.paths.checkpoint(&sys.name),
            &sys.name,
            &sys.model,
            &run.hash,
            run.cfg.seed,
        )?;
        let meta_line = serde_json::to_string(&json!({
            "config_hash": run.hash,
            "seed": run.cfg.seed,
            "system": sys.name,
        }))
        .expect("plain json");
        write_text(
            &run.paths.history(&sys.name),
            &format!("{meta_line}\n{}", sys.history.to_jsonl()),
        )?;
        let best = &sys.history.epochs[sys.history.best_epoch - 1];
        println!(
            "{}: {} epochs, best epoch {} (val loss {:.4}), {} parameters",
            sys.name,
            sys.history.epochs.len(),
            sys.history.best_epoch,
            best.val_loss,
            sys.model.param_count(),
        );
    }
    Ok(())
}

fn cmd_predict(run: &Run, requested: &[String]) -> Result<(), Failure> {
    let data = exp::prepare(&run.cfg)?;
    let test = data.test_products();
    let names = run.systems(requested, exp::system_names(&run.cfg))?;
    for name in &names {
        let rows = match exp::resolve_system(&run.cfg, name)? {
            SystemKind::Knn => exp::predict_with_knn(&data.train_products(), &test)?,
            SystemKind::Model(_) => {
                let model = run.load_checkpoint(name)?;
                exp::predict_with_model(
                    &model,
                    &data.src_vocab,
                    &data.tgt_vocab,
                    &test,
                    &run.cfg.decode,
                )?
            }
            SystemKind::Ensemble => {
                let members: Vec<Model> = run
                    .cfg
                    .decode
                    .ensemble
                    .iter()
                    .map(|m| run.load_checkpoint(m))
                    .collect::<Result<_, _>>()?;
                let refs: Vec<&Model> = members.iter().collect();
                exp::predict_with_ensemble(
                    &refs,
                    &data.src_vocab,
                    &data.tgt_vocab,
                    &test,
                    &run.cfg.decode,
                )?
            }
        };
        exp::write_predictions_tsv(
            &run.paths.predictions(name),
            &rows,
            &run.meta(Some(name)),
        )?;
        println!(
            "{name}: {} predictions -> {}",
            rows.len(),
            run.paths.predictions(name).display()
        );
    }
    Ok(())
}

fn cmd_evaluate(run: &Run, requested: &[String]) -> Result<(), Failure> {
    let data = exp::prepare(&run.cfg)?;
    let test = data.test_products();
    let names = run.systems(requested, run.systems_with_predictions())?;
    if names.is_empty() {
        return Err(Failure::new(2, "no prediction artifacts; run `taxpath predict` first"));
    }
    let mut entries = Vec::new();
    for name in &names {
        let rows = run.read_predictions(name)?;
        let metrics = exp::evaluate_predictions(&rows, &test)?;
        exp::write_stamped_json(
            &run.paths.metrics(name),
            &run.stamp(Some(name), metrics.clone()),
        )?;
        entries.push((name.clone(), metrics, None));
    }
    print!("{}", exp::render_metrics_table(&entries));
    Ok(())
}

fn cmd_bootstrap(run: &Run, requested: &[String]) -> Result<(), Failure> {
    let data = exp::prepare(&run.cfg)?;
    let test = data.test_products();
    let names = run.systems(requested, run.systems_with_predictions())?;
    if names.is_empty() {
        return Err(Failure::new(2, "no prediction artifacts; run `taxpath predict` first"));
    }
    let seed = subseed(run.cfg.seed, seeds::BOOTSTRAP);
    let mut entries = Vec::new();
    for name in &names {
        let rows = run.read_predictions(name)?;
        let metrics = exp::evaluate_predictions(&rows, &test)?;
        let boot = exp::bootstrap_predictions(
            &rows,
            &test,
            run.cfg.evaluation.bootstrap_iterations,
            seed,
        )?;
        exp::write_stamped_json(
            &run.paths.bootstrap(name),
            &run.stamp(Some(name), boot.clone()),
        )?;
        entries.push((name.clone(), metrics, Some(boot)));
    }
    print!("{}", exp::render_metrics_table(&entries));
    Ok(())
}

fn cmd_crossval(run: &Run, system: &str) -> Result<(), Failure> {
    let products = exp::load_products(&run.cfg.data)?;
    let report = exp::crossval_system(&run.cfg, &products, system)?;
    exp::write_stamped_json(
        &run.paths.crossval(system),
        &run.stamp(Some(system), report.clone()),
    )?;
    print!("{}", render_crossval(system, &report));
    Ok(())
}

fn render_crossval(system: &str, report: &CrossValReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{}-fold cross-validation of {system}\n", report.k));
    for (i, fold) in report.folds.iter().enumerate() {
        out.push_str(&format!(
            "  fold {i}: wP {:.4} wR {:.4} wF {:.4} (n={})\n",
            fold.weighted_precision, fold.weighted_recall, fold.weighted_f1, fold.total
        ));
    }
    out.push_str(&format!(
        "  mean wP {:.4} (var {:.6}), mean wR {:.4} (var {:.6}), mean wF {:.4} (var {:.6})\n",
        report.mean_precision,
        report.var_precision,
        report.mean_recall,
        report.var_recall,
        report.mean_f1,
        report.var_f1
    ));
    out
}

fn cmd_sweep(run: &Run, requested: &[String]) -> Result<(), Failure> {
    let products = exp::load_products(&run.cfg.data)?;
    let systems = run.systems(requested, exp::system_names(&run.cfg))?;
    let report = exp::sweep_systems(&run.cfg, &products, &systems)?;
    exp::write_stamped_json(&run.paths.join("sweep.json"), &run.stamp(None, report.clone()))?;
    let tsv = exp::render_sweep_tsv(&report, &run.meta(None));
    write_text(&run.paths.join("sweep.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_analyze(run: &Run, requested: &[String]) -> Result<(), Failure> {
    let products = exp::load_products(&run.cfg.data)?;
    let names = run.systems(requested, run.systems_with_predictions())?;
    if names.is_empty() {
        return Err(Failure::new(2, "no prediction artifacts; run `taxpath predict` first"));
    }
    for name in &names {
        let rows = run.read_predictions(name)?;
        let analysis = exp::analyze_predicted_paths(&products, &rows);
        let payload = json!({
            "shape": analysis.shape,
            "unparseable": analysis.unparseable,
            "gold_edges": taxpath_core::taxonomy::TaxonomyGraph::from_paths(
                products.iter().map(|p| &p.gold_path)
            ).edge_count(),
            "merged_edges": analysis.merged.edge_count(),
            "merged_is_forest": analysis.merged.is_forest(),
        });
        exp::write_stamped_json(&run.paths.paths_report(name), &run.stamp(Some(name), payload))?;

        let mut verdicts = String::new();
        for m in run.meta(Some(name)) {
            verdicts.push_str(&format!("# {m}\n"));
        }
        verdicts.push_str("# columns: path\tverdict\tdetail\n");
        for c in &analysis.classified {
            verdicts.push_str(&format!(
                "{}\t{}\t{}\n",
                c.path.serialize(),
                c.verdict.kind,
                c.verdict.detail
            ));
        }
        write_text(&run.paths.verdicts(name), &verdicts)?;
        write_text(
            &run.paths.taxonomy(name),
            &analysis.merged.export_edges_tsv(&run.meta(Some(name))),
        )?;
        let s = &analysis.shape;
        println!(
            "{name}: {} existing, {} novel accepted ({:.0}% top-first, {:.0}% leaf-last), \
             {} rejected unknown-node, {} rejected cycle, {} rejected malformed, {} unparseable",
            s.count_existing,
            s.count_novel,
            100.0 * s.fraction_top_first,
            100.0 * s.fraction_leaf_last,
            s.count_rejected_unknown_node,
            s.count_rejected_cycle,
            s.count_rejected_malformed,
            analysis.unparseable,
        );
    }
    Ok(())
}

fn cmd_report(run: &Run) -> Result<(), Failure> {
    let mut entries: Vec<(String, MetricsReport, Option<BootstrapReport>)> = Vec::new();
    for name in exp::system_names(&run.cfg) {
        let metrics_path = run.paths.metrics(&name);
        if !metrics_path.exists() {
            continue;
        }
        let metrics: Stamped<MetricsReport> = exp::read_stamped_json(&metrics_path)?;
        exp::check_hash(&metrics.config_hash, &run.hash, &metrics_path, run.allow_stale)?;
        let boot_path = run.paths.bootstrap(&name);
        let boot = if boot_path.exists() {
            let b: Stamped<BootstrapReport> = exp::read_stamped_json(&boot_path)?;
            exp::check_hash(&b.config_hash, &run.hash, &boot_path, run.allow_stale)?;
            Some(b.payload)
        } else {
            None
        };
        entries.push((name, metrics.payload, boot));
    }
    if entries.is_empty() {
        return Err(Failure::new(2, "no metrics artifacts; run `taxpath evaluate` first"));
    }

    let mut report = String::new();
    report.push_str(&format!(
        "taxpath report\nconfig hash: {}\nseed: {}\n\ntest-set metrics\n",
        run.hash, run.cfg.seed
    ));
    report.push_str(&exp::render_metrics_table(&entries));

    let mut crossvals: BTreeMap<String, CrossValReport> = BTreeMap::new();
    for name in exp::system_names(&run.cfg) {
        let path = run.paths.crossval(&name);
        if path.exists() {
            let c: Stamped<CrossValReport> = exp::read_stamped_json(&path)?;
            exp::check_hash(&c.config_hash, &run.hash, &path, run.allow_stale)?;
            crossvals.insert(name, c.payload);
        }
    }
    for (name, c) in &crossvals {
        report.push('\n');
        report.push_str(&render_crossval(name, c));
    }

    let sweep_path = run.paths.join("sweep.json");
    if sweep_path.exists() {
        let s: Stamped<SweepReport> = exp::read_stamped_json(&sweep_path)?;
        exp::check_hash(&s.config_hash, &run.hash, &sweep_path, run.allow_stale)?;
        report.push_str("\ndata-size sweep (weighted F1)\n");
        report.push_str(&exp::render_sweep_tsv(&s.payload, &[]));
    }

    for name in exp::system_names(&run.cfg) {
        let path = run.paths.paths_report(&name);
        if path.exists() {
            let p: Stamped<serde_json::Value> = exp::read_stamped_json(&path)?;
            exp::check_hash(&p.config_hash, &run.hash, &path, run.allow_stale)?;
            if let Ok(shape) = serde_json::from_value::<PathShapeReport>(p.payload["shape"].clone())
            {
                report.push_str(&format!(
                    "\npath analysis: {name}\n  existing {} | novel {} (top-first {:.2}, \
                     leaf-last {:.2}) | rejected {}/{}/{} (unknown/cycle/malformed)\n",
                    shape.count_existing,
                    shape.count_novel,
                    shape.fraction_top_first,
                    shape.fraction_leaf_last,
                    shape.count_rejected_unknown_node,
                    shape.count_rejected_cycle,
                    shape.count_rejected_malformed,
                ));
            }
        }
    }

    write_text(&run.paths.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}
