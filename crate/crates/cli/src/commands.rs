//! Subcommand implementations. Each returns the `key=value` summary line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use radiogen_core::checkpoint::ModelCheckpoint;
use radiogen_core::data::raw::load_raw;
use radiogen_core::data::{build_cohort, Cohort, Exclusion, Split};
use radiogen_core::eval::{compare_reports, evaluate, GeneSignificanceReport, PredictionSource};
use radiogen_core::model::ModelConfig;
use radiogen_core::synth::synthesize;
use radiogen_core::train::train;
use radiogen_core::{Error, Result};

use crate::config::RunConfig;

pub const TRAIN_LOG_FILE: &str = "train_log.txt";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::config(format!("no {what} given on the command line or in [data]")))
}

/// Create `dir`, refusing a non-empty existing directory unless `overwrite`.
fn prepare_out(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::input(format!(
                    "output directory {} is not empty (pass --overwrite to replace it)",
                    dir.display()
                )));
            }
            warn!("replacing contents of {}", dir.display());
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn synth(cfg: &RunConfig, out: Option<PathBuf>, overwrite: bool) -> Result<String> {
    let out = pick(out, &cfg.data.raw_dir, "output directory")?;
    let cohort = synthesize(&cfg.synth, cfg.n_patients)?;
    prepare_out(&out, overwrite)?;
    let manifest = cohort.write(&cfg.synth, &out, Some(cfg.to_table()))?;
    Ok(format!(
        "command=synth patients={} genes={} planted={} digest={} out={}",
        manifest.n_patients,
        manifest.n_genes,
        cfg.synth.planted_genes,
        manifest.digest,
        out.display()
    ))
}

pub fn preprocess(cfg: &RunConfig, raw: Option<PathBuf>, out: Option<PathBuf>, overwrite: bool) -> Result<String> {
    let raw = pick(raw, &cfg.data.raw_dir, "raw input directory")?;
    let out = pick(out, &cfg.data.cohort_dir, "cohort output directory")?;
    let (imaging, expression, unpaired) = load_raw(&raw)?;
    let mut cohort = build_cohort(imaging, &expression, &cfg.cohort())?;
    for id in unpaired {
        cohort.manifest.exclusions.push(Exclusion {
            patient_id: id,
            reason: "volume has no tumor mask".into(),
        });
    }
    for e in &cohort.manifest.exclusions {
        warn!("excluded `{}`: {}", e.patient_id, e.reason);
    }
    cohort.manifest.run_config = Some(cfg.to_table());
    prepare_out(&out, overwrite)?;
    cohort.save(&out)?;
    let m = &cohort.manifest;
    Ok(format!(
        "command=preprocess patients={} excluded={} genes={} train={} validation={} test={} digest={} out={}",
        m.patient_count,
        m.exclusions.len(),
        m.gene_count,
        m.ids_in(Split::Train).len(),
        m.ids_in(Split::Validation).len(),
        m.ids_in(Split::Test).len(),
        m.digest,
        out.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig, cohort_dir: Option<PathBuf>, out: Option<PathBuf>, overwrite: bool) -> Result<String> {
    let cohort_dir = pick(cohort_dir, &cfg.data.cohort_dir, "cohort directory")?;
    let out = pick(out, &cfg.data.checkpoint_dir, "checkpoint output directory")?;
    let cohort = Cohort::load(&cohort_dir)?;
    let genes = cohort.gene_ids.len();
    let defaults = ModelConfig::default();
    if cfg.model.gene_count != defaults.gene_count && cfg.model.gene_count != genes {
        return Err(Error::config(format!(
            "model.gene_count = {} but the cohort keeps {genes} genes",
            cfg.model.gene_count
        )));
    }
    let model_cfg = ModelConfig {
        gene_count: genes,
        ..cfg.model.clone()
    };
    prepare_out(&out, overwrite)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let outcome = train(&cohort, &model_cfg, &cfg.train, |entry| {
        let line = entry.to_line();
        info!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let meta = &outcome.checkpoint.meta;
    let digest = outcome.checkpoint.save(&out, Some(cfg.to_table()))?;
    Ok(format!(
        "command=train epochs={} best_epoch={} best_val_loss={} initial_val_loss={} final_train_loss={} final_val_loss={} digest={} out={}",
        meta.epochs,
        meta.best_epoch,
        meta.best_val_loss,
        meta.initial_val_loss,
        fmt_opt(meta.final_train_loss),
        fmt_opt(meta.final_val_loss),
        digest,
        out.display()
    ))
}

pub fn eval_cmd(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    cohort_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    overwrite: bool,
    oracle: bool,
) -> Result<String> {
    let checkpoint = pick(checkpoint, &cfg.data.checkpoint_dir, "checkpoint directory")?;
    let cohort_dir = pick(cohort_dir, &cfg.data.cohort_dir, "cohort directory")?;
    let out = pick(out, &cfg.data.report_dir, "report output directory")?;
    let ck = ModelCheckpoint::load(&checkpoint)?;
    let cohort = Cohort::load(&cohort_dir)?;
    let source = if oracle { PredictionSource::Oracle } else { PredictionSource::Model };
    let mut report = evaluate(&ck, &cohort, &cfg.eval, source)?;
    report.summary.run_config = Some(cfg.to_table());
    prepare_out(&out, overwrite)?;
    report.save(&out)?;
    let s = &report.summary;
    Ok(format!(
        "command=eval significant_count={} evaluable={} genes={} n={} alpha={} r_max={} r_min={} r_mean={} digest={} out={}",
        s.significant_count,
        s.evaluable_count,
        s.gene_count,
        s.n_patients,
        s.alpha,
        fmt_opt(s.r_max),
        fmt_opt(s.r_min),
        fmt_opt(s.r_mean),
        s.digest,
        out.display()
    ))
}

pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let ra = GeneSignificanceReport::load(a)?;
    let rb = GeneSignificanceReport::load(b)?;
    let c = compare_reports(&ra, &rb)?;
    Ok(format!(
        "command=compare count_a={} count_b={} count_delta={:+} intersection={} only_a={} only_b={} max_abs_r_delta={}",
        c.count_a,
        c.count_b,
        c.count_delta,
        c.intersection.len(),
        c.only_a.len(),
        c.only_b.len(),
        c.max_abs_r_delta()
    ))
}
