//! Synthetic paired imaging/expression cohorts with planted associations.
//!
//! Each patient has a latent vector `z ~ N(0, I)`. The first latent sets the
//! radius of a spherical lesion, the second its intensity, further latents
//! jitter its position. A fixed cylinder of tissue gives the lesion a
//! reference contrast that survives per-volume intensity normalization. Planted genes satisfy
//! `log1p(expr) = baseline + w·z + ε`, null genes `log1p(expr) = baseline + ε`,
//! so in log space the association is exactly linear.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, ImagingInput, Modality, TumorMask, Volume};
use crate::digest::Digester;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSpec {
    pub latent_dim: usize,
    pub planted_genes: usize,
    pub null_genes: usize,
    /// Explicit `K×L` association weights; random unit rows when absent.
    pub weights: Option<Vec<Vec<f64>>>,
    pub noise_std: f64,
    /// Mean log1p expression; each gene draws its own within ±1 of this.
    pub baseline_log_expression: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub background_std: f64,
    /// Axial cylinder of constant tissue intensity around the volume centre; radius 0 disables it.
    pub tissue_radius_mm: f64,
    pub tissue_intensity: f64,
    pub radius_range: [f64; 2],
    pub intensity_range: [f64; 2],
    pub position_jitter_mm: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            latent_dim: 2,
            planted_genes: 50,
            null_genes: 450,
            weights: None,
            noise_std: 0.5,
            baseline_log_expression: 5.0,
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            modality: Modality::MRI,
            background_std: 0.2,
            tissue_radius_mm: 30.0,
            tissue_intensity: 5.0,
            radius_range: [8.0, 24.0],
            intensity_range: [2.0, 10.0],
            position_jitter_mm: 6.0,
            seed: 0,
        }
    }
}

/// Latents beyond this many standard deviations saturate the lesion mapping.
const LATENT_SPAN: f64 = 2.5;
const POSITION_RETRIES: usize = 20;

impl PlantSpec {
    pub fn total_genes(&self) -> usize {
        self.planted_genes + self.null_genes
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.total_genes() == 0 {
            return Err(Error::config("spec has no genes"));
        }
        if !(self.noise_std >= 0.0) || !(self.background_std >= 0.0) {
            return Err(Error::config("noise and background std must be non-negative"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.planted_genes || w.iter().any(|r| r.len() != self.latent_dim) {
                return Err(Error::config(format!(
                    "weights must be {}×{}",
                    self.planted_genes, self.latent_dim
                )));
            }
        }
        let [r0, r1] = self.radius_range;
        let [i0, i1] = self.intensity_range;
        if !(0.0 < r0 && r0 <= r1) || !(i0 <= i1) {
            return Err(Error::config("radius and intensity ranges must be ordered, radius positive"));
        }
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("volume dims and spacing must be positive"));
        }
        Ok(())
    }

    fn map_latent(range: [f64; 2], z: f64) -> f64 {
        let mid = 0.5 * (range[0] + range[1]);
        let half = 0.5 * (range[1] - range[0]);
        (mid + half * z / LATENT_SPAN).clamp(range[0], range[1])
    }

    pub fn lesion_radius(&self, z: &[f64]) -> f64 {
        Self::map_latent(self.radius_range, z[0])
    }

    pub fn lesion_intensity(&self, z: &[f64]) -> f64 {
        match z.get(1) {
            Some(&z2) => Self::map_latent(self.intensity_range, z2),
            None => 0.5 * (self.intensity_range[0] + self.intensity_range[1]),
        }
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    /// Lesion centre in mm: volume centre plus latent-driven jitter.
    pub fn lesion_center(&self, z: &[f64]) -> [f64; 3] {
        let ext = self.extent();
        let mut c = ext.map(|e| e / 2.0);
        for (k, &zk) in z.iter().enumerate().skip(2) {
            c[(k - 2) % 3] += self.position_jitter_mm * zk.tanh();
        }
        c
    }

    pub fn gene_layout(&self) -> Result<GeneLayout> {
        self.validate()?;
        let mut rng = substream(self.seed, "synth/genes");
        let weights: Vec<Vec<f64>> = match &self.weights {
            Some(w) => w.clone(),
            None => (0..self.planted_genes)
                .map(|_| {
                    let v: Vec<f64> = (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.iter().map(|x| x / norm).collect()
                })
                .collect(),
        };
        let g = self.total_genes();
        let mut slots: Vec<usize> = (0..g).collect();
        slots.shuffle(&mut rng);
        let mut genes: Vec<GeneTruth> = (0..g)
            .map(|i| GeneTruth {
                id: format!("GENE{:05}", i + 1),
                planted: false,
                weights: vec![0.0; self.latent_dim],
                baseline: 0.0,
            })
            .collect();
        for (k, &slot) in slots.iter().enumerate() {
            if k < self.planted_genes {
                genes[slot].planted = true;
                genes[slot].weights = weights[k].clone();
            }
        }
        for gene in &mut genes {
            gene.baseline = self.baseline_log_expression + rng.gen_range(-1.0..=1.0);
        }
        Ok(GeneLayout { genes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTruth {
    pub id: String,
    pub planted: bool,
    pub weights: Vec<f64>,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneLayout {
    pub genes: Vec<GeneTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    pub latent: Vec<f64>,
}

/// Everything the generator knows and the model must not see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub latent_dim: usize,
    pub noise_std: f64,
    pub patients: Vec<PatientTruth>,
    pub genes: Vec<GeneTruth>,
}

impl GroundTruth {
    pub fn planted_ids(&self) -> Vec<&str> {
        self.genes.iter().filter(|g| g.planted).map(|g| g.id.as_str()).collect()
    }

    pub fn is_planted(&self, id: &str) -> Option<bool> {
        self.genes.iter().find(|g| g.id == id).map(|g| g.planted)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::parse(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct PatientSample {
    pub volume: Volume,
    pub mask: TumorMask,
    /// Expression in gene-layout order.
    pub expression: Vec<f64>,
    pub truth: PatientTruth,
}

pub fn patient_id(index: usize) -> String {
    format!("SYN{:04}", index + 1)
}

/// Draw one patient from its own substream.
pub fn sample_patient<R: Rng + ?Sized>(
    spec: &PlantSpec,
    layout: &GeneLayout,
    id: &str,
    rng: &mut R,
) -> Result<PatientSample> {
    let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let radius = spec.lesion_radius(&z);
    let intensity = spec.lesion_intensity(&z);
    let ext = spec.extent();
    let fits = |c: &[f64; 3]| (0..3).all(|a| c[a] - radius >= 0.0 && c[a] + radius <= ext[a]);
    let mut center = spec.lesion_center(&z);
    let mut tries = 0;
    while !fits(&center) {
        if tries == POSITION_RETRIES {
            return Err(Error::input(format!(
                "lesion of radius {radius:.2} mm does not fit in a {:?} mm volume",
                ext
            )));
        }
        center = ext.map(|e| {
            let lo = radius.min(e / 2.0);
            let hi = (e - radius).max(e / 2.0);
            rng.gen_range(lo..=hi)
        });
        tries += 1;
    }

    let [nx, ny, nz] = spec.dims;
    let mid = ext.map(|e| e / 2.0);
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    let mut mask = TumorMask::empty(spec.dims);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let noise: f64 = rng.sample(StandardNormal);
                let p = [i as f64 * spec.spacing[0], j as f64 * spec.spacing[1], k as f64 * spec.spacing[2]];
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                let mut v = spec.background_std * noise;
                let r2 = (p[0] - mid[0]).powi(2) + (p[1] - mid[1]).powi(2);
                if r2 <= spec.tissue_radius_mm * spec.tissue_radius_mm {
                    v += spec.tissue_intensity;
                }
                if d2 <= radius * radius {
                    v += intensity;
                    mask.set(i, j, k, 1);
                }
                // stored on disk as f32
                voxels.push(v as f32 as f64);
            }
        }
    }
    let volume = Volume::new(id, spec.modality, spec.dims, spec.spacing, voxels)?;

    let expression = layout
        .genes
        .iter()
        .map(|g| {
            let eps: f64 = rng.sample(StandardNormal);
            let signal: f64 = g.weights.iter().zip(&z).map(|(w, zi)| w * zi).sum();
            (g.baseline + signal + spec.noise_std * eps).exp_m1().max(0.0)
        })
        .collect();
    Ok(PatientSample {
        volume,
        mask,
        expression,
        truth: PatientTruth {
            id: id.to_string(),
            latent: z,
        },
    })
}

/// An in-memory synthetic cohort.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub imaging: Vec<ImagingInput>,
    pub expression: ExpressionMatrix,
    pub truth: GroundTruth,
}

/// Generate `n_patients` patients; a pure function of `spec` (including its seed).
pub fn synthesize(spec: &PlantSpec, n_patients: usize) -> Result<SyntheticCohort> {
    if n_patients < 3 {
        return Err(Error::input(format!(
            "a synthetic cohort needs at least 3 patients, got {n_patients}"
        )));
    }
    let layout = spec.gene_layout()?;
    let samples = (0..n_patients)
        .map(|i| {
            let id = patient_id(i);
            let mut rng = substream(spec.seed, &format!("synth/patient/{id}"));
            sample_patient(spec, &layout, &id, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let g = layout.genes.len();
    let mut values = vec![0.0; g * n_patients];
    for (p, s) in samples.iter().enumerate() {
        for (gi, &v) in s.expression.iter().enumerate() {
            values[gi * n_patients + p] = v;
        }
    }
    let expression = ExpressionMatrix::new(
        layout.genes.iter().map(|g| g.id.clone()).collect(),
        samples.iter().map(|s| s.truth.id.clone()).collect(),
        values,
    )?;
    let truth = GroundTruth {
        latent_dim: spec.latent_dim,
        noise_std: spec.noise_std,
        patients: samples.iter().map(|s| s.truth.clone()).collect(),
        genes: layout.genes,
    };
    let imaging = samples
        .into_iter()
        .map(|s| ImagingInput {
            volume: s.volume,
            mask: s.mask,
        })
        .collect();
    Ok(SyntheticCohort {
        imaging,
        expression,
        truth,
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.toml";
pub const GENERATION_FILE: &str = "generation.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub n_patients: usize,
    pub n_genes: usize,
    pub spec: PlantSpec,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<toml::Table>,
}

impl SyntheticCohort {
    pub fn digest(&self) -> String {
        let mut d = Digester::new();
        for inp in &self.imaging {
            d.bytes(&inp.volume.to_bytes()).bytes(inp.mask.labels());
        }
        d.str(&self.expression.to_tsv());
        d.str(&toml::to_string(&self.truth).expect("truth serializes"));
        d.hex()
    }

    /// Write the cohort in the raw-input layout read by
    /// [`crate::data::raw::load_raw`], plus ground truth and a generation manifest.
    pub fn write(&self, spec: &PlantSpec, dir: &Path, run_config: Option<toml::Table>) -> Result<GenerationManifest> {
        crate::data::raw::save_raw(dir, &self.imaging, &self.expression)?;
        self.truth.save(&dir.join(GROUND_TRUTH_FILE))?;
        let manifest = GenerationManifest {
            n_patients: self.imaging.len(),
            n_genes: self.expression.n_genes(),
            spec: spec.clone(),
            digest: self.digest(),
            run_config,
        };
        let path = dir.join(GENERATION_FILE);
        let text = toml::to_string(&manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Synthesize and write a cohort to `dir`.
pub fn generate_cohort(spec: &PlantSpec, n_patients: usize, dir: &Path) -> Result<GenerationManifest> {
    synthesize(spec, n_patients)?.write(spec, dir, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PlantSpec {
        PlantSpec {
            planted_genes: 3,
            null_genes: 4,
            dims: [24, 24, 24],
            radius_range: [2.0, 5.0],
            position_jitter_mm: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_plant_is_exactly_linear() {
        let spec = PlantSpec {
            planted_genes: 1,
            null_genes: 0,
            weights: Some(vec![vec![1.0, 0.0]]),
            noise_std: 0.0,
            baseline_log_expression: 8.0,
            dims: [16, 16, 16],
            radius_range: [2.0, 4.0],
            ..Default::default()
        };
        let layout = spec.gene_layout().unwrap();
        let base = layout.genes[0].baseline;
        for i in 0..20 {
            let mut rng = substream(3, &format!("p{i}"));
            let s = sample_patient(&spec, &layout, "p", &mut rng).unwrap();
            let recovered = s.expression[0].ln_1p() - base;
            assert!((recovered - s.truth.latent[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let spec = small_spec();
        let a = synthesize(&spec, 4).unwrap();
        let b = synthesize(&spec, 4).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.expression, b.expression);
        let c = synthesize(&PlantSpec { seed: 1, ..spec }, 4).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn lesion_follows_latents() {
        let spec = small_spec();
        assert!(spec.lesion_radius(&[1.0, 0.0]) > spec.lesion_radius(&[-1.0, 0.0]));
        assert!(spec.lesion_intensity(&[0.0, 1.0]) > spec.lesion_intensity(&[0.0, -1.0]));
        assert_eq!(spec.lesion_radius(&[100.0, 0.0]), 5.0);
        let c = spec.lesion_center(&[0.0, 0.0]);
        assert_eq!(c, [11.5, 11.5, 11.5]);
    }

    #[test]
    fn mask_matches_lesion() {
        let spec = small_spec();
        let layout = spec.gene_layout().unwrap();
        let mut rng = substream(0, "m");
        let s = sample_patient(&spec, &layout, "p", &mut rng).unwrap();
        let r = spec.lesion_radius(&s.truth.latent);
        let count = s.mask.labels().iter().filter(|&&l| l == 1).count() as f64;
        let sphere = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((count - sphere).abs() < 0.5 * sphere + 10.0, "{count} vs {sphere}");
    }

    #[test]
    fn oversized_lesion_errors() {
        let spec = PlantSpec {
            dims: [8, 8, 8],
            radius_range: [6.0, 6.0],
            ..small_spec()
        };
        let layout = spec.gene_layout().unwrap();
        assert!(sample_patient(&spec, &layout, "p", &mut substream(0, "x")).is_err());
    }

    #[test]
    fn needs_three_patients() {
        assert!(synthesize(&small_spec(), 2).is_err());
    }

    #[test]
    fn layout_counts_and_unit_weights() {
        let spec = PlantSpec::default();
        let layout = spec.gene_layout().unwrap();
        assert_eq!(layout.genes.len(), 500);
        let planted: Vec<_> = layout.genes.iter().filter(|g| g.planted).collect();
        assert_eq!(planted.len(), 50);
        for g in planted {
            let n: f64 = g.weights.iter().map(|w| w * w).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
