//! Subcommand implementations and artifact/cache plumbing.
//!
//! Expensive intermediates are cached under `<out>/cache`, keyed by a
//! digest of everything upstream of them (data source, preprocessing and
//! windowing knobs), so the matrix subcommands can re-run cheaply after a
//! model-knob change; `--force` recomputes regardless.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use gsr_core::dsp::{preprocess_cohort, write_series_csv};
use gsr_core::error::{Error, Result};
use gsr_core::eval::{
    emit_report, experiment_from_windows, roc_csv, CellTiming, EvaluationReport,
    ExperimentOutput, ReportFormat,
};
use gsr_core::ingest::{
    generate_synthetic_cohort, merge_cohorts, parse_subject_csv, parse_subject_xml,
    write_subject_csv, Cohort, CsvSchema, SubjectRecord, SynthConfig,
};
use gsr_core::models::{
    build_features, fit_cnn, fit_gbdt, fit_knn, fit_logreg, fit_lstm, fit_mlp,
    fit_random_forest, gather_labels, save_model, ModelFamily, TrainedModel,
};
use gsr_core::seed::{derive_seed, digest_bytes};
use gsr_core::windowing::{
    class_weights, make_windows, read_windows_csv, stratified_split, write_windows_csv,
    LabeledWindow,
};

use crate::config::{render_resolved, CsvLayoutName, ReportFormatName, RunConfig};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Echo the fully-resolved config next to the artifacts it produced.
pub fn echo_resolved_config(ctx: &Ctx) -> Result<()> {
    write_text(&ctx.out.join("resolved_config.toml"), &render_resolved(&ctx.cfg)?)
}

/// What the windows artifact depends on; its digest keys the cache.
#[derive(Serialize)]
struct WindowsKey<'a> {
    source: SourceDesc,
    preprocess: &'a gsr_core::dsp::PreprocessConfig,
    window: &'a gsr_core::windowing::WindowConfig,
}

#[derive(Serialize)]
enum SourceDesc {
    Synthetic(SynthConfig),
    /// Input files as (name, content digest) pairs.
    Files(Vec<(String, String)>),
}

fn source_desc(cfg: &RunConfig) -> Result<SourceDesc> {
    if cfg.uses_synthetic() {
        return Ok(SourceDesc::Synthetic(cfg.synth.clone()));
    }
    let mut files = Vec::with_capacity(cfg.inputs.len());
    for path in &cfg.inputs {
        let bytes = fs::read(path)
            .map_err(|e| Error::Parse(format!("cannot read input {}: {e}", path.display())))?;
        files.push((
            path.display().to_string(),
            format!("{:016x}", digest_bytes(&bytes)),
        ));
    }
    Ok(SourceDesc::Files(files))
}

fn windows_cache_digest(ctx: &Ctx) -> Result<u64> {
    let key = WindowsKey {
        source: source_desc(&ctx.cfg)?,
        preprocess: &ctx.cfg.preprocess,
        window: &ctx.cfg.window,
    };
    let bytes = serde_json::to_vec(&key)
        .map_err(|e| Error::Numerical(format!("cache key serialization failed: {e}")))?;
    Ok(digest_bytes(&bytes))
}

fn subject_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_subject_file(cfg: &RunConfig, path: &Path) -> Result<SubjectRecord> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read input {}: {e}", path.display())))?;
    let ext = path
        .extension()
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let record = if ext == "xml" {
        parse_subject_xml(&text, cfg.source_tag)
    } else {
        let id = subject_id_for(path);
        let schema = match cfg.csv_layout {
            CsvLayoutName::Long => CsvSchema::long(id),
            CsvLayoutName::Wide => CsvSchema::wide(id),
        };
        let ingest = parse_subject_csv(&text, &schema, cfg.source_tag)?;
        if ingest.skipped_count > 0 || ingest.bad_row_count > 0 {
            log::info!(
                "{}: skipped {} blank cells, dropped {} bad rows",
                path.display(),
                ingest.skipped_count,
                ingest.bad_row_count
            );
        }
        Ok(ingest.record)
    };
    record.map_err(|e| match e {
        e @ Error::Subject { .. } => e,
        other => other.for_subject(&subject_id_for(path)),
    })
}

/// The cohort this run operates on: generated or read from `inputs`.
pub fn load_cohort(ctx: &Ctx) -> Result<Cohort> {
    if ctx.cfg.uses_synthetic() {
        let cohort = generate_synthetic_cohort(&ctx.cfg.synth)?;
        log::info!(
            "generated synthetic cohort: {} subjects x {} steps",
            cohort.subjects.len(),
            ctx.cfg.synth.steps_per_subject
        );
        return Ok(cohort);
    }
    let mut cohorts = Vec::with_capacity(ctx.cfg.inputs.len());
    for path in &ctx.cfg.inputs {
        cohorts.push(Cohort::new(vec![read_subject_file(&ctx.cfg, path)?]));
    }
    let cohort = merge_cohorts(cohorts)?;
    log::info!("ingested {} subjects", cohort.subjects.len());
    Ok(cohort)
}

/// Windows for this run, from cache when the upstream digest matches.
pub fn load_windows(ctx: &Ctx) -> Result<Vec<LabeledWindow>> {
    let digest = windows_cache_digest(ctx)?;
    let cache = ctx.cache_dir().join(format!("windows-{digest:016x}.csv"));
    if !ctx.force {
        if let Ok(text) = fs::read_to_string(&cache) {
            match read_windows_csv(&text) {
                Ok(windows) => {
                    log::info!("reusing {} cached windows ({})", windows.len(), cache.display());
                    return Ok(windows);
                }
                Err(e) => log::warn!("ignoring unreadable cache {}: {e}", cache.display()),
            }
        }
    }
    let cohort = load_cohort(ctx)?;
    let series = preprocess_cohort(&cohort, &ctx.cfg.preprocess)?;
    let mut windows = Vec::new();
    for s in &series {
        windows.extend(make_windows(s, &ctx.cfg.window)?);
    }
    let hypo = windows.iter().filter(|w| w.label.is_hypo()).count();
    log::info!("cut {} windows ({hypo} hypo)", windows.len());
    write_text(&cache, &write_windows_csv(&windows)?)?;
    Ok(windows)
}

/// `synth`: write the generated cohort as canonical per-subject CSVs.
pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let cohort = generate_synthetic_cohort(&ctx.cfg.synth)?;
    let dir = ctx.data_dir();
    for subject in &cohort.subjects {
        write_text(
            &dir.join(format!("{}.csv", subject.subject_id)),
            &write_subject_csv(subject),
        )?;
    }
    log::info!("wrote {} subject files to {}", cohort.subjects.len(), dir.display());
    Ok(())
}

/// `ingest`: parse raw subject files and write them back in the canonical
/// layout.
pub fn cmd_ingest(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.inputs.is_empty() {
        return Err(Error::Config(
            "ingest needs input files (positional arguments or `inputs` in the config)".into(),
        ));
    }
    let cohort = load_cohort(ctx)?;
    let dir = ctx.data_dir();
    for subject in &cohort.subjects {
        write_text(
            &dir.join(format!("{}.csv", subject.subject_id)),
            &write_subject_csv(subject),
        )?;
    }
    log::info!("wrote {} canonical subject files to {}", cohort.subjects.len(), dir.display());
    Ok(())
}

/// `preprocess`: run the DSP chain and dump the standardized series.
pub fn cmd_preprocess(ctx: &Ctx) -> Result<()> {
    let cohort = load_cohort(ctx)?;
    let series = preprocess_cohort(&cohort, &ctx.cfg.preprocess)?;
    let dir = ctx.out.join("series");
    for s in &series {
        write_text(&dir.join(format!("{}.csv", s.subject_id)), &write_series_csv(s))?;
    }
    log::info!("preprocessed {} subjects into {}", series.len(), dir.display());
    Ok(())
}

fn fit_cell(
    windows: &[LabeledWindow],
    split: &gsr_core::windowing::SplitAssignment,
    family: ModelFamily,
    mode: gsr_core::models::FeatureMode,
    cfg: &RunConfig,
) -> Result<TrainedModel> {
    let cell_seed = derive_seed(cfg.seed, &format!("train:{}:{}", family.key(), mode.key()));
    let train_x = build_features(windows, &split.train, mode, family)?;
    let val_x = build_features(windows, &split.val, mode, family)?;
    let train_y = gather_labels(windows, &split.train);
    let val_y = gather_labels(windows, &split.val);
    let weights = class_weights(&train_y)?;
    let tc = cfg.train.for_family(family, cell_seed, weights);
    match family {
        ModelFamily::Logreg => fit_logreg(&train_x, &train_y, &tc),
        ModelFamily::Knn => fit_knn(&train_x, &train_y, &cfg.knn),
        ModelFamily::RandomForest => fit_random_forest(&train_x, &train_y, &cfg.forest, &tc),
        ModelFamily::Gbdt => fit_gbdt(&train_x, &train_y, &val_x, &val_y, &cfg.gbdt, &tc),
        ModelFamily::Mlp => fit_mlp(&train_x, &train_y, &val_x, &val_y, &cfg.mlp, &tc),
        ModelFamily::Cnn => fit_cnn(&train_x, &train_y, &val_x, &val_y, &cfg.cnn, &tc),
        ModelFamily::Lstm => fit_lstm(&train_x, &train_y, &val_x, &val_y, &cfg.lstm, &tc),
    }
}

#[derive(Serialize)]
struct TrainedEntry {
    model: String,
    feature_mode: String,
    path: String,
    epochs_run: usize,
    best_val_loss: Option<f64>,
}

/// `train`: fit every requested cell on the train split and save the
/// binaries.
pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let windows = load_windows(ctx)?;
    let split = stratified_split(
        &windows,
        ctx.cfg.split_fractions,
        derive_seed(ctx.cfg.seed, "split"),
    )?;
    let digest = windows_cache_digest(ctx)?;
    let dir = ctx.out.join("models");
    ensure_dir(&dir)?;
    let mut manifest = Vec::new();
    for family in &ctx.cfg.families {
        for mode in &ctx.cfg.modes {
            let started = Instant::now();
            let model = fit_cell(&windows, &split, *family, *mode, &ctx.cfg)?;
            let path = dir.join(format!("{}_{}.bin", family.key(), mode.key()));
            save_model(&path, &model, digest)?;
            log::info!(
                "trained {}:{} in {:.1}s -> {}",
                family.key(),
                mode.key(),
                started.elapsed().as_secs_f64(),
                path.display()
            );
            manifest.push(TrainedEntry {
                model: family.key().to_string(),
                feature_mode: mode.key().to_string(),
                path: path.display().to_string(),
                epochs_run: model.meta.epochs_run,
                best_val_loss: model.meta.best_val_loss,
            });
        }
    }
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numerical(format!("manifest serialization failed: {e}")))?;
    write_text(&dir.join("manifest.json"), &(manifest_json + "\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct TimingsFile<'a> {
    total_seconds: f64,
    cells: &'a [CellTiming],
}

fn write_report_artifacts(ctx: &Ctx, output: &ExperimentOutput, total_seconds: f64) -> Result<()> {
    for format in &ctx.cfg.formats {
        let (name, fmt) = match format {
            ReportFormatName::Json => ("report.json", ReportFormat::Json),
            ReportFormatName::Md => ("report.md", ReportFormat::Markdown),
            ReportFormatName::Csv => ("report.csv", ReportFormat::Csv),
        };
        write_text(&ctx.out.join(name), &emit_report(&output.report, fmt)?)?;
    }
    for roc in &output.rocs {
        write_text(&ctx.out.join(roc.file_name()), &roc_csv(&roc.points))?;
    }
    let timings = TimingsFile {
        total_seconds,
        cells: &output.timings,
    };
    let timings_json = serde_json::to_string_pretty(&timings)
        .map_err(|e| Error::Numerical(format!("timings serialization failed: {e}")))?;
    write_text(&ctx.out.join("timings.json"), &(timings_json + "\n"))?;
    Ok(())
}

/// `evaluate`: the full matrix and its report artifacts. `ablate` is the
/// same run restricted by `--models` / `--feature-mode`.
pub fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let windows = load_windows(ctx)?;
    let output = experiment_from_windows(&windows, &ctx.cfg.experiment())?;
    write_report_artifacts(ctx, &output, started.elapsed().as_secs_f64())?;
    let ok = output
        .report
        .rows
        .iter()
        .filter(|r| r.status == "ok")
        .count();
    log::info!(
        "evaluated {} cells ({ok} ok) in {:.1}s -> {}",
        output.report.rows.len(),
        started.elapsed().as_secs_f64(),
        ctx.out.join("report.json").display()
    );
    Ok(())
}

/// `report`: re-render markdown and CSV views from an existing report.json.
pub fn cmd_report(ctx: &Ctx, report_path: Option<&Path>) -> Result<()> {
    let default_path = ctx.out.join("report.json");
    let path = report_path.unwrap_or(&default_path);
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read report {}: {e}", path.display())))?;
    let report: EvaluationReport = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    write_text(&ctx.out.join("report.md"), &emit_report(&report, ReportFormat::Markdown)?)?;
    write_text(&ctx.out.join("report.csv"), &emit_report(&report, ReportFormat::Csv)?)?;
    log::info!("rendered report.md and report.csv from {}", path.display());
    Ok(())
}
