//! Assembly of model-ready patient records and the cohort manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expression::ExpressionMatrix;
use super::preprocess::{
    cap_slices, crop_or_pad, normalize_intensity, resample_mask_to_1mm, resample_to_1mm,
    select_tumor_slices,
};
use super::volume::{TumorMask, Volume};
use crate::digest::Digester;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {parts:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(train, validation, test)` patient counts for a cohort of `n`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.validation * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    /// Side of the square slices fed to the model.
    pub input_size: usize,
    pub min_tumor_voxels: usize,
    /// Upper bound on slices kept per patient (largest tumor cross-sections).
    pub max_slices: usize,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            input_size: 64,
            min_tumor_voxels: 10,
            max_slices: 1,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One paired imaging study.
#[derive(Debug, Clone)]
pub struct ImagingInput {
    pub volume: Volume,
    pub mask: TumorMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Standardized `H×H` slices, rows along y.
    pub slices: Vec<Vec<f64>>,
    /// Raw expression in filtered gene order.
    pub target: Vec<f64>,
}

impl PatientRecord {
    /// Slices as `1×H×W` tensors.
    pub fn slice_tensors(&self, size: usize) -> Vec<Tensor> {
        self.slices
            .iter()
            .map(|s| Tensor::new(&[1, size, size], s.clone()).expect("slice size checked at build"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub split: Split,
    pub slice_count: usize,
    /// Axial indices on the 1 mm grid.
    pub slice_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub patient_count: usize,
    pub gene_count: usize,
    pub config: CohortConfig,
    pub notes: Vec<String>,
    /// Digest of the raw inputs and the configuration.
    pub input_digest: String,
    /// Digest of the processed records, split and gene list.
    pub digest: String,
    pub patients: Vec<ManifestPatient>,
    pub exclusions: Vec<Exclusion>,
    /// Resolved run configuration of the command that produced this cohort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<toml::Table>,
}

impl CohortManifest {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.patients.iter().find(|p| p.id == id).map(|p| p.split)
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.patients
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.id.clone())
            .collect()
    }

    /// Every patient appears exactly once, so no patient can be in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::input(format!(
                    "patient `{}` appears more than once in the manifest (split leakage)",
                    p.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub gene_ids: Vec<String>,
    /// Sorted by patient id.
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn record(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == id)
    }

    pub fn records_in(&self, split: Split) -> Vec<&PatientRecord> {
        self.records
            .iter()
            .filter(|r| self.manifest.split_of(&r.patient_id) == Some(split))
            .collect()
    }
}

const NOTES: [&str; 3] = [
    "resampled to isotropic 1 mm (trilinear, boundary clamped; masks nearest-neighbour)",
    "per-volume z-score normalization; CT intensities are not HU-windowed",
    "skull stripping not applied; inputs assumed pre-stripped",
];

struct Processed {
    id: String,
    slices: Vec<Vec<f64>>,
    indices: Vec<usize>,
}

fn process_patient(input: &ImagingInput, cfg: &CohortConfig) -> std::result::Result<Processed, String> {
    let v = &input.volume;
    if v.dims() != input.mask.dims() {
        return Err(format!(
            "mask dims {:?} do not match volume dims {:?}",
            input.mask.dims(),
            v.dims()
        ));
    }
    let res = resample_to_1mm(v).map_err(|e| e.to_string())?;
    let mask = resample_mask_to_1mm(&input.mask, v.spacing()).map_err(|e| e.to_string())?;
    let norm = normalize_intensity(&res).map_err(|e| e.to_string())?;
    let selected = select_tumor_slices(&norm, &mask, cfg.min_tumor_voxels).map_err(|e| e.to_string())?;
    if selected.is_empty() {
        return Err(format!(
            "no axial slice with at least {} tumor voxels",
            cfg.min_tumor_voxels
        ));
    }
    let indices = cap_slices(&selected, &mask, cfg.max_slices);
    let [nx, ny, _] = norm.dims();
    let slices = indices
        .iter()
        .map(|&z| crop_or_pad(norm.axial_slice(z), nx, ny, cfg.input_size))
        .collect();
    Ok(Processed {
        id: v.patient_id.clone(),
        slices,
        indices,
    })
}

fn input_digest(imaging: &[&ImagingInput], em: &ExpressionMatrix, cfg: &CohortConfig) -> String {
    let mut d = Digester::new();
    d.str(&toml::to_string(cfg).expect("config serializes"));
    for inp in imaging {
        let v = &inp.volume;
        d.str(&v.patient_id).str(&format!("{:?}{:?}{:?}", v.modality, v.dims(), v.spacing()));
        d.f64s(v.voxels()).bytes(inp.mask.labels());
    }
    d.str(&em.to_tsv());
    d.hex()
}

/// Pair imaging with expression, preprocess each patient, filter genes on the
/// retained cohort and assign seeded train/validation/test splits.
pub fn build_cohort(imaging: Vec<ImagingInput>, em: &ExpressionMatrix, cfg: &CohortConfig) -> Result<Cohort> {
    cfg.split.validate()?;
    if cfg.input_size == 0 || cfg.max_slices == 0 {
        return Err(Error::config("input_size and max_slices must be positive"));
    }
    let mut by_id: BTreeMap<String, ImagingInput> = BTreeMap::new();
    for inp in imaging {
        let id = inp.volume.patient_id.clone();
        if by_id.insert(id.clone(), inp).is_some() {
            return Err(Error::input(format!("duplicate imaging patient id `{id}`")));
        }
    }
    let digest_in = input_digest(&by_id.values().collect::<Vec<_>>(), em, cfg);

    let mut exclusions = Vec::new();
    for id in em.patient_ids() {
        if !by_id.contains_key(id) {
            exclusions.push(Exclusion {
                patient_id: id.clone(),
                reason: "expression present but no imaging".into(),
            });
        }
    }
    let paired: Vec<&ImagingInput> = by_id
        .iter()
        .filter_map(|(id, inp)| {
            if em.patient_index(id).is_some() {
                Some(inp)
            } else {
                exclusions.push(Exclusion {
                    patient_id: id.clone(),
                    reason: "imaging present but no expression column".into(),
                });
                None
            }
        })
        .collect();

    let outcomes: Vec<_> = paired.par_iter().map(|inp| process_patient(inp, cfg)).collect();
    let mut processed = Vec::new();
    for (inp, out) in paired.iter().zip(outcomes) {
        match out {
            Ok(p) => processed.push(p),
            Err(reason) => {
                warn!("excluding patient `{}`: {reason}", inp.volume.patient_id);
                exclusions.push(Exclusion {
                    patient_id: inp.volume.patient_id.clone(),
                    reason,
                });
            }
        }
    }
    exclusions.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if processed.is_empty() {
        return Err(Error::input("cohort is empty after pairing and slice selection"));
    }

    // gene filtering runs over the retained patients only
    let cols: Vec<usize> = processed
        .iter()
        .map(|p| em.patient_index(&p.id).expect("paired"))
        .collect();
    let mut sub = Vec::with_capacity(em.n_genes() * cols.len());
    for g in 0..em.n_genes() {
        let row = em.row(g);
        sub.extend(cols.iter().map(|&c| row[c]));
    }
    let retained = ExpressionMatrix::new(
        em.gene_ids().to_vec(),
        processed.iter().map(|p| p.id.clone()).collect(),
        sub,
    )?
    .filter_median_zero()?;
    if retained.n_genes() == 0 {
        return Err(Error::input("no gene survives median-zero filtering"));
    }

    let n = processed.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(cfg.seed, "split"));
    let (n_train, n_val, _) = cfg.split.counts(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }

    let records: Vec<PatientRecord> = processed
        .iter()
        .enumerate()
        .map(|(i, p)| PatientRecord {
            patient_id: p.id.clone(),
            slices: p.slices.clone(),
            target: retained.column(i),
        })
        .collect();
    let patients: Vec<ManifestPatient> = processed
        .iter()
        .zip(&splits)
        .map(|(p, &split)| ManifestPatient {
            id: p.id.clone(),
            split,
            slice_count: p.slices.len(),
            slice_indices: p.indices.clone(),
        })
        .collect();

    let digest = records_digest(&records, &patients, retained.gene_ids(), &digest_in);
    info!(
        "cohort: {} patients, {} genes, {} exclusions",
        n,
        retained.n_genes(),
        exclusions.len()
    );
    Ok(Cohort {
        manifest: CohortManifest {
            patient_count: n,
            gene_count: retained.n_genes(),
            config: cfg.clone(),
            notes: NOTES.iter().map(|s| s.to_string()).collect(),
            input_digest: digest_in,
            digest,
            patients,
            exclusions,
            run_config: None,
        },
        gene_ids: retained.gene_ids().to_vec(),
        records,
    })
}

fn records_digest(records: &[PatientRecord], patients: &[ManifestPatient], genes: &[String], input: &str) -> String {
    let mut d = Digester::new();
    d.str(input);
    for g in genes {
        d.str(g);
    }
    for (r, p) in records.iter().zip(patients) {
        d.str(&r.patient_id).str(&format!("{:?}{:?}", p.split, p.slice_indices));
        for s in &r.slices {
            d.f64s(s);
        }
        d.f64s(&r.target);
    }
    d.hex()
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TARGETS_FILE: &str = "targets.tsv";
pub const RECORDS_DIR: &str = "records";

impl Cohort {
    /// Write `manifest.toml`, `targets.tsv` and one `records/<id>.bin` of
    /// little-endian `f64` slices per patient.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let rec_dir = dir.join(RECORDS_DIR);
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        for r in &self.records {
            let path = rec_dir.join(format!("{}.bin", r.patient_id));
            let bytes: Vec<u8> = r.slices.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let n = self.records.len();
        let mut values = Vec::with_capacity(self.gene_ids.len() * n);
        for g in 0..self.gene_ids.len() {
            values.extend(self.records.iter().map(|r| r.target[g]));
        }
        let targets = ExpressionMatrix::new(
            self.gene_ids.clone(),
            self.records.iter().map(|r| r.patient_id.clone()).collect(),
            values,
        )?;
        targets.save(&dir.join(TARGETS_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&self.manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Cohort> {
        let manifest = load_manifest(dir)?;
        manifest.check_disjoint()?;
        let targets = ExpressionMatrix::load(&dir.join(TARGETS_FILE))?;
        if targets.n_genes() != manifest.gene_count {
            return Err(Error::input(format!(
                "targets hold {} genes, manifest says {}",
                targets.n_genes(),
                manifest.gene_count
            )));
        }
        let size = manifest.config.input_size;
        let mut records = Vec::with_capacity(manifest.patients.len());
        for p in &manifest.patients {
            let path = dir.join(RECORDS_DIR).join(format!("{}.bin", p.id));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != p.slice_count * size * size * 8 {
                return Err(Error::parse(&path, format!("expected {} slices of {size}×{size}", p.slice_count)));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let col = targets
                .patient_index(&p.id)
                .ok_or_else(|| Error::input(format!("patient `{}` missing from targets", p.id)))?;
            records.push(PatientRecord {
                patient_id: p.id.clone(),
                slices: values.chunks(size * size).map(<[f64]>::to_vec).collect(),
                target: targets.column(col),
            });
        }
        Ok(Cohort {
            manifest,
            gene_ids: targets.gene_ids().to_vec(),
            records,
        })
    }
}

pub fn load_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
}
