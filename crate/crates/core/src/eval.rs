//! Held-out evaluation: per-gene Pearson correlation between predicted and
//! true log1p-standardized expression, Holm–Šidák correction, reports and
//! report comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::{Cohort, Split};
use crate::digest::Digester;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::stats::{holm_sidak, pearson, pearson_pvalue, permutation_pvalue, DEFAULT_PERMUTATIONS};

pub const SUMMARY_FILE: &str = "summary.toml";
pub const GENES_FILE: &str = "genes.tsv";
pub const HISTOGRAM_FILE: &str = "histogram.tsv";
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;
pub const HISTOGRAM_BINS: usize = 40;
pub const TARGET_SPACE: &str = "log1p-standardized";
const MIN_TEST_PATIENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    /// Below this many test patients p-values come from a permutation test.
    pub permutation_threshold: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            permutation_threshold: 8,
            permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if self.permutations == 0 {
            return Err(Error::config("permutations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneAssociation {
    pub gene_id: String,
    /// `None` when the gene is not evaluable.
    pub r: Option<f64>,
    pub n: usize,
    pub p: Option<f64>,
    pub hs_significant: bool,
    pub evaluable: bool,
}

/// Where test-set predictions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionSource {
    Model,
    /// Predictions replaced by the true targets (pipeline self-test).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub alpha: f64,
    pub target_space: String,
    pub split: String,
    pub n_patients: usize,
    pub gene_count: usize,
    pub evaluable_count: usize,
    pub significant_count: usize,
    pub r_max: Option<f64>,
    pub r_min: Option<f64>,
    pub r_mean: Option<f64>,
    pub permutation_threshold: usize,
    pub permutations: usize,
    #[serde(default)]
    pub oracle: bool,
    pub checkpoint_digest: String,
    pub cohort_digest: String,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneSignificanceReport {
    pub summary: ReportSummary,
    pub genes: Vec<GeneAssociation>,
}

/// Histogram bin of `r` over `[-1, 1]`; the last bin is closed on the right.
pub fn histogram_bin(r: f64) -> usize {
    (((r + 1.0) / HISTOGRAM_BIN_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Counts per histogram bin over the evaluable genes.
pub fn histogram(genes: &[GeneAssociation]) -> Vec<usize> {
    let mut counts = vec![0; HISTOGRAM_BINS];
    for r in genes.iter().filter_map(|g| g.r) {
        counts[histogram_bin(r)] += 1;
    }
    counts
}

fn has_variance(v: &[f64]) -> bool {
    v.iter().any(|x| *x != v[0])
}

fn gene_stat(
    gene: &str,
    x: &[f64],
    y: &[f64],
    cfg: &EvalConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    if !has_variance(x) || !has_variance(y) {
        return Ok((None, None));
    }
    let r = pearson(x, y, gene)?;
    let p = if x.len() < cfg.permutation_threshold {
        let mut rng = substream(cfg.seed, &format!("permutation/{gene}"));
        permutation_pvalue(x, y, cfg.permutations, &mut rng, gene)?
    } else {
        pearson_pvalue(r, x.len())?.p
    };
    Ok((Some(r), Some(p)))
}

/// Per-gene statistics for `predictions[patient][gene]` against `targets`,
/// with Holm–Šidák over the evaluable genes.
pub fn evaluate_predictions(
    gene_ids: &[String],
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<Vec<GeneAssociation>> {
    cfg.validate()?;
    let n = predictions.len();
    if n < MIN_TEST_PATIENTS {
        return Err(Error::input(format!(
            "evaluation needs at least {MIN_TEST_PATIENTS} test patients, got {n}"
        )));
    }
    if targets.len() != n {
        return Err(Error::dim(format!("{n} prediction rows but {} target rows", targets.len())));
    }
    let g = gene_ids.len();
    if let Some(row) = predictions.iter().chain(targets).find(|r| r.len() != g) {
        return Err(Error::dim(format!("row of length {} for {g} genes", row.len())));
    }
    let stats = (0..g)
        .into_par_iter()
        .map(|j| {
            let x: Vec<f64> = predictions.iter().map(|r| r[j]).collect();
            let y: Vec<f64> = targets.iter().map(|r| r[j]).collect();
            gene_stat(&gene_ids[j], &x, &y, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let pvalues: Vec<f64> = stats.iter().filter_map(|s| s.1).collect();
    let mut flags = holm_sidak(&pvalues, cfg.alpha)?.into_iter();
    Ok(gene_ids
        .iter()
        .zip(stats)
        .map(|(id, (r, p))| GeneAssociation {
            gene_id: id.clone(),
            r,
            n,
            p,
            hs_significant: p.is_some() && flags.next().expect("one flag per evaluable gene"),
            evaluable: p.is_some(),
        })
        .collect())
}

fn report_digest(alpha: f64, genes: &[GeneAssociation]) -> String {
    let mut d = Digester::new();
    d.f64s(&[alpha]);
    for g in genes {
        d.str(&g.gene_id)
            .u64(g.n as u64)
            .f64s(&[g.r.unwrap_or(f64::NAN), g.p.unwrap_or(f64::NAN)])
            .u64(g.hs_significant as u64);
    }
    d.hex()
}

impl GeneSignificanceReport {
    pub fn from_genes(
        genes: Vec<GeneAssociation>,
        cfg: &EvalConfig,
        n_patients: usize,
        checkpoint_digest: String,
        cohort_digest: String,
    ) -> Self {
        let rs: Vec<f64> = genes.iter().filter_map(|g| g.r).collect();
        let (r_max, r_min, r_mean) = if rs.is_empty() {
            (None, None, None)
        } else {
            (
                Some(rs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                Some(rs.iter().copied().fold(f64::INFINITY, f64::min)),
                // mean can drift outside [min, max] by rounding when all r are equal
                Some((rs.iter().sum::<f64>() / rs.len() as f64).clamp(
                    rs.iter().copied().fold(f64::INFINITY, f64::min),
                    rs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )),
            )
        };
        let summary = ReportSummary {
            alpha: cfg.alpha,
            target_space: TARGET_SPACE.into(),
            split: "test".into(),
            n_patients,
            gene_count: genes.len(),
            evaluable_count: rs.len(),
            significant_count: genes.iter().filter(|g| g.hs_significant).count(),
            r_max,
            r_min,
            r_mean,
            permutation_threshold: cfg.permutation_threshold,
            permutations: cfg.permutations,
            oracle: false,
            checkpoint_digest,
            cohort_digest,
            digest: report_digest(cfg.alpha, &genes),
            run_config: None,
        };
        GeneSignificanceReport { summary, genes }
    }

    pub fn significant_ids(&self) -> BTreeSet<&str> {
        self.genes
            .iter()
            .filter(|g| g.hs_significant)
            .map(|g| g.gene_id.as_str())
            .collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        histogram(&self.genes)
    }

    pub fn genes_tsv(&self) -> String {
        let mut out = String::from("gene_id\tr\tn\tp\ths_significant\tevaluable\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
        for g in &self.genes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                g.gene_id,
                fmt(g.r),
                g.n,
                fmt(g.p),
                g.hs_significant,
                g.evaluable
            ));
        }
        out
    }

    pub fn histogram_tsv(&self) -> String {
        let mut out = String::from("bin_start\tbin_end\tcount\n");
        for (i, c) in self.histogram().iter().enumerate() {
            let lo = -1.0 + i as f64 * HISTOGRAM_BIN_WIDTH;
            out.push_str(&format!("{lo:.2}\t{:.2}\t{c}\n", lo + HISTOGRAM_BIN_WIDTH));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SUMMARY_FILE);
        let text = toml::to_string(&self.summary).map_err(|e| Error::parse(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for (name, body) in [(GENES_FILE, self.genes_tsv()), (HISTOGRAM_FILE, self.histogram_tsv())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: ReportSummary = toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let path = dir.join(GENES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let genes = parse_genes(&text).map_err(|msg| Error::parse(&path, msg))?;
        Ok(GeneSignificanceReport { summary, genes })
    }
}

fn parse_genes(text: &str) -> std::result::Result<Vec<GeneAssociation>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty gene table")?;
    if header.split('\t').collect::<Vec<_>>() != ["gene_id", "r", "n", "p", "hs_significant", "evaluable"] {
        return Err(format!("unexpected header `{header}`"));
    }
    let opt = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| format!("bad number `{s}`"))
        }
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(format!("line {}: expected 6 fields, got {}", i + 2, f.len()));
            }
            let flag = |s: &str| s.parse::<bool>().map_err(|_| format!("line {}: bad flag `{s}`", i + 2));
            Ok(GeneAssociation {
                gene_id: f[0].to_string(),
                r: opt(f[1])?,
                n: f[2].parse().map_err(|_| format!("line {}: bad count `{}`", i + 2, f[2]))?,
                p: opt(f[3])?,
                hs_significant: flag(f[4])?,
                evaluable: flag(f[5])?,
            })
        })
        .collect()
}

/// Evaluate a checkpoint on the cohort's test split.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    cohort: &Cohort,
    cfg: &EvalConfig,
    source: PredictionSource,
) -> Result<GeneSignificanceReport> {
    cfg.validate()?;
    cohort.manifest.check_disjoint()?;
    if checkpoint.gene_ids != cohort.gene_ids {
        return Err(Error::config(format!(
            "checkpoint predicts {} genes that do not match the cohort's {}",
            checkpoint.gene_ids.len(),
            cohort.gene_ids.len()
        )));
    }
    if checkpoint.model.config().input_size != cohort.manifest.config.input_size {
        return Err(Error::config("checkpoint input size differs from the cohort slice size"));
    }
    if checkpoint.meta.data_digest != cohort.manifest.digest {
        warn!("checkpoint was trained on a cohort with a different digest");
    }
    let test = cohort.records_in(Split::Test);
    if test.len() < MIN_TEST_PATIENTS {
        return Err(Error::input(format!(
            "test split has {} patients, at least {MIN_TEST_PATIENTS} are required",
            test.len()
        )));
    }
    let size = cohort.manifest.config.input_size;
    let targets: Vec<Vec<f64>> = test.iter().map(|r| checkpoint.transform.apply(&r.target)).collect();
    let predictions = match source {
        PredictionSource::Oracle => targets.clone(),
        PredictionSource::Model => test
            .par_iter()
            .map(|r| checkpoint.model.predict(&r.slice_tensors(size)))
            .collect::<Result<Vec<_>>>()?,
    };
    let genes = evaluate_predictions(&cohort.gene_ids, &predictions, &targets, cfg)?;
    let mut report = GeneSignificanceReport::from_genes(
        genes,
        cfg,
        test.len(),
        checkpoint.digest(),
        cohort.manifest.digest.clone(),
    );
    report.summary.oracle = source == PredictionSource::Oracle;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportComparison {
    pub count_a: usize,
    pub count_b: usize,
    /// `count_a − count_b`.
    pub count_delta: i64,
    pub intersection: Vec<String>,
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
    /// Per gene `r_a − r_b`, `None` where either side is not evaluable.
    pub r_deltas: Vec<(String, Option<f64>)>,
}

impl ReportComparison {
    pub fn max_abs_r_delta(&self) -> f64 {
        self.r_deltas.iter().filter_map(|(_, d)| d.map(f64::abs)).fold(0.0, f64::max)
    }

    pub fn union_size(&self) -> usize {
        self.intersection.len() + self.only_a.len() + self.only_b.len()
    }
}

pub fn compare_reports(a: &GeneSignificanceReport, b: &GeneSignificanceReport) -> Result<ReportComparison> {
    let ra: BTreeMap<&str, Option<f64>> = a.genes.iter().map(|g| (g.gene_id.as_str(), g.r)).collect();
    let rb: BTreeMap<&str, Option<f64>> = b.genes.iter().map(|g| (g.gene_id.as_str(), g.r)).collect();
    let ka: BTreeSet<&str> = ra.keys().copied().collect();
    let kb: BTreeSet<&str> = rb.keys().copied().collect();
    let sym = ka.symmetric_difference(&kb).count();
    if sym > 0 {
        return Err(Error::input(format!(
            "reports cover different gene sets ({sym} genes in only one of them)"
        )));
    }
    let sa = a.significant_ids();
    let sb = b.significant_ids();
    let owned = |s: std::collections::btree_set::Difference<'_, &str>| s.map(|g| g.to_string()).collect();
    Ok(ReportComparison {
        count_a: sa.len(),
        count_b: sb.len(),
        count_delta: sa.len() as i64 - sb.len() as i64,
        intersection: sa.intersection(&sb).map(|g| g.to_string()).collect(),
        only_a: owned(sa.difference(&sb)),
        only_b: owned(sb.difference(&sa)),
        r_deltas: a
            .genes
            .iter()
            .map(|g| {
                let d = match (g.r, rb[g.gene_id.as_str()]) {
                    (Some(x), Some(y)) => Some(x - y),
                    _ => None,
                };
                (g.gene_id.clone(), d)
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("G{i}")).collect()
    }

    #[test]
    fn oracle_predictions_are_all_significant() {
        let targets: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 % 7.0, -(i as f64)]).collect();
        let genes = evaluate_predictions(&ids(3), &targets, &targets, &EvalConfig::default()).unwrap();
        assert!(genes.iter().all(|g| g.r == Some(1.0) && g.hs_significant));
    }

    #[test]
    fn constant_predictions_are_not_evaluable() {
        let targets: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        let preds = vec![vec![0.5, -0.2]; 10];
        let genes = evaluate_predictions(&ids(2), &preds, &targets, &EvalConfig::default()).unwrap();
        assert!(genes.iter().all(|g| !g.evaluable && !g.hs_significant && g.r.is_none()));
        let report = GeneSignificanceReport::from_genes(genes, &EvalConfig::default(), 10, "c".into(), "d".into());
        assert_eq!(report.summary.significant_count, 0);
        assert_eq!(report.summary.r_max, None);
    }

    #[test]
    fn too_few_patients_is_refused() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(evaluate_predictions(&ids(1), &rows, &rows, &EvalConfig::default()).is_err());
    }

    #[test]
    fn small_samples_use_permutations() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y: Vec<Vec<f64>> = [1.1, 1.9, 3.2, 3.9, 5.1].iter().map(|v| vec![*v]).collect();
        let cfg = EvalConfig { permutations: 2000, ..Default::default() };
        let genes = evaluate_predictions(&ids(1), &x, &y, &cfg).unwrap();
        // 2 of 120 orderings are as extreme, so p sits near 1/60 and not at the t-test value
        let p = genes[0].p.unwrap();
        let t = pearson_pvalue(genes[0].r.unwrap(), 5).unwrap().p;
        assert!((p - 1.0 / 60.0).abs() < 0.01, "{p}");
        assert!(t < 1e-3 && p > t);
    }

    #[test]
    fn histogram_bins_edges() {
        assert_eq!(histogram_bin(-1.0), 0);
        assert_eq!(histogram_bin(1.0), HISTOGRAM_BINS - 1);
        assert_eq!(histogram_bin(0.0), 20);
        assert_eq!(histogram_bin(-0.0001), 19);
    }

    fn report(sig: &[bool], rs: &[f64]) -> GeneSignificanceReport {
        let genes = sig
            .iter()
            .zip(rs)
            .enumerate()
            .map(|(i, (&s, &r))| GeneAssociation {
                gene_id: format!("G{i}"),
                r: Some(r),
                n: 10,
                p: Some(if s { 0.001 } else { 0.5 }),
                hs_significant: s,
                evaluable: true,
            })
            .collect();
        GeneSignificanceReport::from_genes(genes, &EvalConfig::default(), 10, "c".into(), "d".into())
    }

    #[test]
    fn comparison_of_disjoint_sets() {
        let mut a = vec![false; 10];
        let mut b = vec![false; 10];
        a[..3].fill(true);
        b[3..7].fill(true);
        let rs = vec![0.1; 10];
        let c = compare_reports(&report(&a, &rs), &report(&b, &rs)).unwrap();
        assert_eq!((c.intersection.len(), c.union_size(), c.count_delta), (0, 7, -1));
        let same = compare_reports(&report(&a, &rs), &report(&a, &rs)).unwrap();
        assert_eq!(same.max_abs_r_delta(), 0.0);
        assert_eq!(same.intersection.len(), 3);
    }

    #[test]
    fn comparison_rejects_gene_set_mismatch() {
        let a = report(&[true, false], &[0.5, 0.1]);
        let mut b = a.clone();
        b.genes[1].gene_id = "OTHER".into();
        let err = compare_reports(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2 genes"), "{err}");
    }

    #[test]
    fn report_round_trips_through_files() {
        let rep = report(&[true, false, true], &[0.91, -0.123456789012345, 0.3]);
        let dir = tempfile::tempdir().unwrap();
        rep.save(dir.path()).unwrap();
        let back = GeneSignificanceReport::load(dir.path()).unwrap();
        assert_eq!(back, rep);
    }
}
