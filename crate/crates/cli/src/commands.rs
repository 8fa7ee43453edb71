//! Subcommand implementations.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use egclmil::bagdata::{self, Cohort, SyntheticSpec, Task, TaskSchema};
use egclmil::losses::LossMode;
use egclmil::metrics::{self, MetricsBundle, ReportFormat, ReportLabels};
use egclmil::model::{Head, ModelKind};
use egclmil::stain::{self, MacenkoParams, RgbPatch, StainBasis};
use egclmil::train::{
    self, CvReport, Dataset, EpochRecord, FoldResult, PatientPrediction, SlidePrediction, SplitPlan,
    SweepRun, TrainError, TrainEvent,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{read_json, Overrides, RunConfigFile};
use crate::log::{Level, Logger};
use crate::{
    CliError, EvalArgs, FormatArg, ReportArgs, RunFlags, SplitArgs, StainArgs, SweepArgs, SynthArgs,
    TrainArgs,
};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const SPLITS: &str = "splits.json";
pub const RUN_INFO: &str = "run.json";
pub const AGGREGATE: &str = "aggregate.json";

/// Creates `dir`, or empties it under `force`. A non-empty directory
/// without `force` is refused.
pub fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Exists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    Ok(metrics::write_json(path, value)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_dataset(manifest: &Path, task: Task) -> Result<Dataset, CliError> {
    let cohort = Cohort::load(manifest)?;
    let schema = TaskSchema::new(task, &cohort.manifest.class_names)?;
    let task_cohort = bagdata::remap_labels(&cohort.manifest, &schema)?;
    Ok(Dataset::new(&cohort, &task_cohort))
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(args: &SynthArgs, log: &Logger) -> Result<(), CliError> {
    let mut spec: SyntheticSpec = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let cohort = bagdata::generate_synthetic_cohort(&spec)?;
    prepare_out(&args.out, args.force)?;
    cohort.write(&args.out)?;
    log.event(
        Level::Info,
        "synth_done",
        &json!({
            "out": args.out,
            "n_slides": cohort.bags.len(),
            "n_classes": spec.n_classes,
            "seed": spec.seed,
        }),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// stain

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_ppm = path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("ppm"));
        if path.is_file() && is_ppm {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn stain(args: &StainArgs, log: &Logger) -> Result<(), CliError> {
    if !args.input.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", args.input.display())));
    }
    let input = fs::canonicalize(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let out = std::path::absolute(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    if input.starts_with(&out) || out == input {
        return Err(CliError::Config("output directory must not contain the input".into()));
    }
    let reference = match &args.reference {
        Some(p) => StainBasis::load(p)?,
        None => StainBasis::reference(),
    };
    let files = ppm_files(&input)?;
    prepare_out(&out, args.force)?;
    if files.is_empty() {
        log.warn(format!("no .ppm patches in {}", input.display()));
        return Ok(());
    }
    let patches = files
        .iter()
        .map(|p| RgbPatch::read(p))
        .collect::<Result<Vec<_>, _>>()?;
    let params = MacenkoParams::default();
    let pooled = if args.pooled {
        match stain::estimate_pooled_basis(&patches, &params) {
            Ok(b) => Some(Ok(b)),
            Err(e) => Some(Err(e.to_string())),
        }
    } else {
        None
    };
    let mut fallbacks = 0;
    for (path, patch) in files.iter().zip(&patches) {
        let basis = match &pooled {
            Some(b) => b.clone(),
            None => stain::estimate_patch_basis(patch, &params).map_err(|e| e.to_string()),
        };
        let normalized = basis.and_then(|b| {
            stain::normalize_patch(patch, &b, &reference).map_err(|e| e.to_string())
        });
        let name = path.file_name().expect("listed files have names");
        let target = out.join(name);
        match normalized {
            Ok(p) => p.write(&target)?,
            Err(reason) => {
                fallbacks += 1;
                log.warn(format!("{}: {reason}; copied unchanged", path.display()));
                fs::copy(path, &target).map_err(|e| CliError::io(&target, e))?;
            }
        }
    }
    log.event(
        Level::Info,
        "stain_done",
        &json!({"n_patches": files.len(), "fallbacks": fallbacks, "pooled": args.pooled}),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// split

pub fn split(args: &SplitArgs, log: &Logger) -> Result<(), CliError> {
    let ds = load_dataset(&args.manifest, args.task)?;
    let fractions = egclmil::train::TrainConfig::default().fractions;
    let plan = train::stratified_patient_kfold(&ds, args.folds, fractions, args.seed)?;
    train::check_leakage(&plan, &ds)?;
    for w in &plan.warnings {
        log.warn(w.clone());
    }
    prepare_out(&args.out, args.force)?;
    write_json(&args.out.join(SPLITS), &plan)?;
    log.event(
        Level::Info,
        "split_done",
        &json!({"n_folds": plan.folds.len(), "n_patients": ds.patients().len(), "warnings": plan.warnings.len()}),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run directories

/// Identity of a run directory, read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub task: Task,
    pub model: ModelKind,
    pub mode: LossMode,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub n_folds: usize,
    pub completed_folds: Vec<usize>,
    pub failed_folds: Vec<usize>,
}

fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold_{fold}"))
}

fn report_labels<'a>(info: &'a RunInfo, task: &'a str, method: &'a str, model: &'a str) -> ReportLabels<'a> {
    ReportLabels {
        task,
        method,
        model,
        class_names: &info.class_names,
    }
}

fn emit_tables(
    dir: &Path,
    info: &RunInfo,
    folds: &[(usize, &MetricsBundle)],
    format: ReportFormat,
) -> Result<(), CliError> {
    let task = info.task.to_string();
    let method = info.mode.to_string();
    let model = info.model.to_string();
    metrics::emit_report(dir, &report_labels(info, &task, &method, &model), folds, format)?;
    Ok(())
}

/// Writes fold results, checkpoints, curves, the CV summary and the class
/// tables of a finished cross-validation.
pub fn persist_run(
    run_dir: &Path,
    cfg: &RunConfigFile,
    class_names: &[String],
    report: &CvReport,
) -> Result<RunInfo, CliError> {
    for fold in &report.folds {
        match fold {
            Ok(outcome) => {
                let dir = fold_dir(run_dir, outcome.result.fold);
                fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                write_json(&dir.join("result.json"), &outcome.result)?;
                outcome.head.save(&dir.join("checkpoint.bin"))?;
                write_csv::<EpochRecord>(&dir.join("curve.csv"), &outcome.result.curve)?;
            }
            Err(failure) => {
                let dir = fold_dir(run_dir, failure.fold);
                fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                write_json(&dir.join("error.json"), failure)?;
            }
        }
    }
    write_json(&run_dir.join(AGGREGATE), &report.summary)?;
    let info = RunInfo {
        run_id: cfg.run_id(),
        task: cfg.task,
        model: cfg.model.kind,
        mode: cfg.loss.mode,
        lambda: cfg.loss.lambda,
        gamma: cfg.loss.gamma,
        seed: cfg.train.seed,
        class_names: class_names.to_vec(),
        n_folds: report.summary.n_folds,
        completed_folds: report.summary.completed_folds.clone(),
        failed_folds: report.summary.failures.iter().map(|f| f.fold).collect(),
    };
    write_json(&run_dir.join(RUN_INFO), &info)?;
    let slide: Vec<(usize, &MetricsBundle)> = report
        .folds
        .iter()
        .filter_map(|f| f.as_ref().ok())
        .map(|o| (o.result.fold, &o.result.slide_metrics))
        .collect();
    if !slide.is_empty() {
        emit_tables(run_dir, &info, &slide, ReportFormat::Csv)?;
    }
    Ok(info)
}

fn run_overrides(flags: &RunFlags) -> Overrides {
    Overrides {
        seed: flags.seed,
        task: flags.task,
        gamma: flags.gamma,
        runs_dir: flags.out.clone(),
        ..Default::default()
    }
}

fn event_sink(log: &Logger) -> impl Fn(&TrainEvent) + Sync + '_ {
    move |ev: &TrainEvent| log.train_event(ev)
}

fn split_plan(ds: &Dataset, cfg: &RunConfigFile, log: &Logger) -> Result<SplitPlan, CliError> {
    let plan = train::stratified_patient_kfold(ds, cfg.train.n_folds, cfg.train.fractions, cfg.train.seed)?;
    for w in &plan.warnings {
        log.warn(w.clone());
    }
    Ok(plan)
}

fn run_outcome(report: &CvReport) -> Result<(), CliError> {
    let failures = &report.summary.failures;
    if failures.is_empty() {
        return Ok(());
    }
    let detail: Vec<String> = failures.iter().map(|f| f.message.clone()).collect();
    if report.any_divergence() {
        Err(CliError::Diverged(format!("partial results kept; {}", detail.join("; "))))
    } else {
        Err(CliError::Runtime(detail.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// train

/// Runs cross-validation into `<runs_dir>/<run_id>` and returns that
/// directory.
pub fn train(args: &TrainArgs, log: &Logger) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfigFile::load(&args.run.config)?;
    let mut o = run_overrides(&args.run);
    o.mode = args.mode;
    o.lambda = args.lambda;
    cfg.apply(&o)?;
    cfg.resolve_run_id();
    cfg.validate()?;
    let ds = load_dataset(cfg.cohort_path()?, cfg.task)?;
    let exp = cfg.experiment(&ds.class_names, false)?;
    let run_dir = cfg.paths.runs_dir.join(cfg.run_id());
    prepare_out(&run_dir, args.run.force)?;
    write_json(&run_dir.join(EFFECTIVE_CONFIG), &cfg)?;
    let plan = split_plan(&ds, &cfg, log)?;
    write_json(&run_dir.join(SPLITS), &plan)?;
    log.event(
        Level::Info,
        "train_start",
        &json!({
            "run_dir": run_dir,
            "n_slides": ds.slides.len(),
            "n_patients": ds.patients().len(),
            "n_folds": plan.folds.len(),
        }),
    );
    let sink = event_sink(log);
    let report = train::run_cv(&ds, &plan, &exp, args.run.jobs, &sink)?;
    persist_run(&run_dir, &cfg, &ds.class_names, &report)?;
    log.event(
        Level::Info,
        "train_done",
        &json!({
            "run_dir": run_dir,
            "completed_folds": report.summary.completed_folds.len(),
            "macro_f1": report.summary.slide.macro_f1,
        }),
    );
    run_outcome(&report)?;
    Ok(run_dir)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_slides: usize,
    pub n_patients: usize,
    pub slide_metrics: MetricsBundle,
    pub patient_metrics: MetricsBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPredictions {
    pub slides: Vec<SlidePrediction>,
    pub patients: Vec<PatientPrediction>,
}

pub fn eval(args: &EvalArgs, log: &Logger) -> Result<(), CliError> {
    let head = Head::load(&args.checkpoint)?;
    let ds = load_dataset(&args.cohort, args.task)?;
    let hc = head.config();
    if hc.n_classes() != ds.n_classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, task {} has {}",
            hc.n_classes(),
            args.task,
            ds.n_classes()
        )));
    }
    let patients: Vec<String> = match (&args.split, args.fold) {
        (Some(path), Some(k)) => {
            let plan: SplitPlan = read_json(path)?;
            let fold = plan
                .folds
                .iter()
                .find(|f| f.fold == k)
                .ok_or_else(|| CliError::Config(format!("{} has no fold {k}", path.display())))?;
            fold.test.clone()
        }
        _ => ds.patients().keys().map(|p| p.to_string()).collect(),
    };
    let (slides, slide_metrics) = train::evaluate_patients(&head, &ds, &patients)?;
    let patient_preds = train::majority_vote_patient(&slides, ds.n_classes());
    let truth: Vec<usize> = patient_preds.iter().map(|p| p.label).collect();
    let pred: Vec<usize> = patient_preds.iter().map(|p| p.predicted).collect();
    let patient_metrics = MetricsBundle::from_predictions(&truth, &pred, ds.n_classes())?;
    prepare_out(&args.out, args.force)?;
    let m = EvalMetrics {
        n_slides: slides.len(),
        n_patients: patient_preds.len(),
        slide_metrics,
        patient_metrics,
    };
    write_json(&args.out.join("metrics.json"), &m)?;
    write_json(
        &args.out.join("predictions.json"),
        &EvalPredictions {
            slides,
            patients: patient_preds,
        },
    )?;
    log.event(
        Level::Info,
        "eval_done",
        &json!({"n_slides": m.n_slides, "macro_f1": m.slide_metrics.macro_f1, "accuracy": m.slide_metrics.accuracy}),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub grid: Vec<f64>,
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    pub runs: Vec<String>,
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let grid = s
        .split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| CliError::Config(format!("--grid: {v:?} is not a finite λ >= 0")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(grid)
}

pub fn parse_modes(s: &str) -> Result<Vec<LossMode>, CliError> {
    s.split(',')
        .map(|m| m.trim().parse::<LossMode>().map_err(|e| CliError::Config(format!("--modes: {e}"))))
        .collect()
}

pub fn sweep_run_name(run: &SweepRun) -> String {
    format!("lambda{}_{}_seed{}", run.lambda, run.mode, run.seed)
}

/// Runs the grid into `<runs_dir>/<run_id>`, one run directory per
/// (λ, mode, seed), plus `sweep.csv` and `sweep.json`.
pub fn sweep(args: &SweepArgs, log: &Logger) -> Result<(), CliError> {
    let grid = parse_grid(&args.grid)?;
    let modes = parse_modes(&args.modes)?;
    if args.repeats == 0 {
        return Err(CliError::Config("--repeats must be >= 1".into()));
    }
    let mut cfg = RunConfigFile::load(&args.run.config)?;
    cfg.apply(&run_overrides(&args.run))?;
    if cfg.run_id.is_none() {
        cfg.run_id = Some(format!(
            "sweep_task{}_{}_seed{}",
            cfg.task.n_classes(),
            cfg.model.kind,
            cfg.train.seed
        ));
    }
    cfg.validate()?;
    let ds = load_dataset(cfg.cohort_path()?, cfg.task)?;
    let base = cfg.experiment(&ds.class_names, modes.contains(&LossMode::Egcl))?;
    let sweep_dir = cfg.paths.runs_dir.join(cfg.run_id());
    prepare_out(&sweep_dir, args.run.force)?;
    write_json(&sweep_dir.join(EFFECTIVE_CONFIG), &cfg)?;
    let seeds: Vec<u64> = (0..args.repeats as u64).map(|i| cfg.train.seed + i).collect();
    let mut runs = Vec::new();
    for &lambda in &grid {
        for &mode in &modes {
            for &seed in &seeds {
                runs.push(sweep_run_name(&SweepRun { lambda, mode, seed }));
            }
        }
    }
    write_json(
        &sweep_dir.join("sweep_plan.json"),
        &SweepPlan {
            grid: grid.clone(),
            modes: modes.clone(),
            seeds: seeds.clone(),
            runs,
        },
    )?;

    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let mut diverged = Vec::new();
    let sink = event_sink(log);
    let mut on_run = |run: &SweepRun, report: &CvReport| -> Result<(), TrainError> {
        let name = sweep_run_name(run);
        let mut rc = cfg.clone();
        rc.loss.lambda = run.lambda;
        rc.loss.mode = run.mode;
        rc.train.seed = run.seed;
        rc.run_id = Some(name.clone());
        rc.paths.runs_dir = sweep_dir.clone();
        let dir = sweep_dir.join(&name);
        let persisted = (|| -> Result<(), CliError> {
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            write_json(&dir.join(EFFECTIVE_CONFIG), &rc)?;
            let plan = train::stratified_patient_kfold(&ds, rc.train.n_folds, rc.train.fractions, rc.train.seed)?;
            write_json(&dir.join(SPLITS), &plan)?;
            persist_run(&dir, &rc, &ds.class_names, report)?;
            Ok(())
        })();
        if report.any_divergence() {
            diverged.push(name.clone());
        }
        log.event(
            Level::Info,
            "sweep_run_done",
            &json!({"run": name, "macro_f1": report.summary.slide.macro_f1, "failed_folds": report.summary.failures.len()}),
        );
        persisted.map_err(|e| {
            let msg = e.to_string();
            *failure.borrow_mut() = Some(e);
            TrainError::Output(msg)
        })
    };
    let result = train::lambda_sweep(&ds, &base, &grid, &modes, &seeds, args.run.jobs, &sink, &mut on_run);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let report = result?;
    report.write_csv(&sweep_dir.join("sweep.csv"))?;
    write_json(&sweep_dir.join("sweep.json"), &report)?;
    if let Some(best) = report.argmax_row() {
        log.event(
            Level::Info,
            "sweep_done",
            &json!({"argmax_lambda": best.lambda, "argmax_mode": best.mode, "macro_f1": best.macro_f1}),
        );
    }
    if !diverged.is_empty() {
        return Err(CliError::Diverged(format!(
            "diverged runs (partial results kept): {}",
            diverged.join(", ")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn report(args: &ReportArgs, log: &Logger) -> Result<(), CliError> {
    let info: RunInfo = read_json(&args.run.join(RUN_INFO))?;
    let mut slide = Vec::new();
    let mut patient = Vec::new();
    for &k in &info.completed_folds {
        let r: FoldResult = read_json(&fold_dir(&args.run, k).join("result.json"))?;
        slide.push((k, r.slide_metrics));
        patient.push((k, r.patient_metrics));
    }
    if slide.is_empty() {
        return Err(CliError::Runtime(format!("{} has no completed folds", args.run.display())));
    }
    let format = match args.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Both => ReportFormat::Both,
    };
    let out = args.run.join("report");
    prepare_out(&out, args.force)?;
    for (level, folds) in [("slide", &slide), ("patient", &patient)] {
        let borrowed: Vec<(usize, &MetricsBundle)> = folds.iter().map(|(k, b)| (*k, b)).collect();
        emit_tables(&out.join(level), &info, &borrowed, format)?;
    }
    log.event(
        Level::Info,
        "report_done",
        &json!({"out": out, "folds": info.completed_folds}),
    );
    Ok(())
}
