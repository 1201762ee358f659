//! Volumes, tumor masks and their on-disk layout.
//!
//! A volume is stored as a TOML header next to a raw blob of little-endian
//! `f32` voxels, x varying fastest. Masks use the same header with one `u8`
//! label per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MRI,
}

/// Scalar 3-D image. Voxels are held as `f64` in memory and written as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub modality: Modality,
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TumorMask {
    dims: [usize; 3],
    labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub patient_id: String,
    pub modality: Modality,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// `"f32"` for volumes, `"u8"` for masks.
    pub dtype: String,
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::input(format!("volume dims {dims:?} must all be ≥ 1")));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::input(format!(
            "volume spacing {spacing:?} must be finite and positive"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        modality: Modality,
        dims: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<f64>,
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::input(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume {
            patient_id: patient_id.into(),
            modality,
            dims,
            spacing,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    /// Axial slice `z` as `Y` rows of `X` values.
    pub fn axial_slice(&self, z: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            patient_id: self.patient_id.clone(),
            modality: self.modality,
            dims: self.dims,
            spacing: self.spacing,
            dtype: "f32".into(),
        }
    }

    /// Little-endian `f32` blob, x fastest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.voxels
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    /// Write `<stem>.toml` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_pair(stem, &self.header(), &self.to_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (header, bytes, bin) = read_pair(stem)?;
        if header.dtype != "f32" {
            return Err(Error::parse(&bin, format!("expected dtype f32, found {}", header.dtype)));
        }
        if bytes.len() % 4 != 0 {
            return Err(Error::parse(&bin, "blob length is not a multiple of 4"));
        }
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Volume::new(header.patient_id, header.modality, header.dims, header.spacing, voxels)
            .map_err(|e| Error::parse(&bin, e.to_string()))
    }
}

impl TumorMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::input(format!(
                "mask {dims:?} inconsistent with {} labels",
                labels.len()
            )));
        }
        Ok(TumorMask { dims, labels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        TumorMask {
            dims,
            labels: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.labels[i] = label;
    }

    pub fn axial_count(&self, z: usize) -> usize {
        let n = self.dims[0] * self.dims[1];
        self.labels[z * n..(z + 1) * n].iter().filter(|&&l| l != 0).count()
    }

    pub fn save(&self, stem: &Path, patient_id: &str, spacing: [f64; 3], modality: Modality) -> Result<()> {
        let header = VolumeHeader {
            patient_id: patient_id.to_string(),
            modality,
            dims: self.dims,
            spacing,
            dtype: "u8".into(),
        };
        write_pair(stem, &header, &self.labels)
    }

    pub fn load(stem: &Path) -> Result<(VolumeHeader, Self)> {
        let (header, bytes, bin) = read_pair(stem)?;
        if header.dtype != "u8" {
            return Err(Error::parse(&bin, format!("expected dtype u8, found {}", header.dtype)));
        }
        let mask = TumorMask::new(header.dims, bytes).map_err(|e| Error::parse(&bin, e.to_string()))?;
        Ok((header, mask))
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write_pair(stem: &Path, header: &VolumeHeader, bytes: &[u8]) -> Result<()> {
    let toml_path = with_ext(stem, ".toml");
    let bin_path = with_ext(stem, ".bin");
    let text = toml::to_string(header).map_err(|e| Error::parse(&toml_path, e.to_string()))?;
    fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))?;
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

fn read_pair(stem: &Path) -> Result<(VolumeHeader, Vec<u8>, PathBuf)> {
    let toml_path = with_ext(stem, ".toml");
    let bin_path = with_ext(stem, ".bin");
    let text = fs::read_to_string(&toml_path).map_err(|e| Error::io(&toml_path, e))?;
    let header: VolumeHeader =
        toml::from_str(&text).map_err(|e| Error::parse(&toml_path, e.to_string()))?;
    check_geometry(header.dims, header.spacing).map_err(|e| Error::parse(&toml_path, e.to_string()))?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    Ok((header, bytes, bin_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new("p", Modality::CT, [2, 2, 0], [1.0; 3], vec![]).is_err());
        assert!(Volume::new("p", Modality::CT, [1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new("p", Modality::CT, [2, 1, 1], [1.0; 3], vec![0.0]).is_err());
    }

    #[test]
    fn save_load_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new("P7", Modality::MRI, [3, 2, 2], [1.0, 1.0, 2.5], (0..12).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        let stem = dir.path().join("P7");
        v.save(&stem).unwrap();
        assert_eq!(Volume::load(&stem).unwrap(), v);

        let mut m = TumorMask::empty([3, 2, 2]);
        m.set(1, 1, 1, 1);
        m.save(&dir.path().join("P7.mask"), "P7", v.spacing(), v.modality).unwrap();
        let (h, back) = TumorMask::load(&dir.path().join("P7.mask")).unwrap();
        assert_eq!(back, m);
        assert_eq!(h.patient_id, "P7");
        assert_eq!(back.axial_count(1), 1);
        assert!(Volume::load(&dir.path().join("P7.mask")).is_err());
    }
}
