//! Raw input directory layout:
//!
//! ```text
//! <dir>/expression.tsv
//! <dir>/volumes/<patient>.toml + .bin
//! <dir>/masks/<patient>.toml + .bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;

use super::cohort::ImagingInput;
use super::expression::ExpressionMatrix;
use super::volume::{TumorMask, Volume};
use crate::error::{Error, Result};

pub const EXPRESSION_FILE: &str = "expression.tsv";
pub const VOLUMES_DIR: &str = "volumes";
pub const MASKS_DIR: &str = "masks";

pub fn save_raw(dir: &Path, imaging: &[ImagingInput], expression: &ExpressionMatrix) -> Result<()> {
    for sub in [VOLUMES_DIR, MASKS_DIR] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for inp in imaging {
        let v = &inp.volume;
        v.save(&dir.join(VOLUMES_DIR).join(&v.patient_id))?;
        inp.mask
            .save(&dir.join(MASKS_DIR).join(&v.patient_id), &v.patient_id, v.spacing(), v.modality)?;
    }
    expression.save(&dir.join(EXPRESSION_FILE))
}

/// Stems (`<dir>/<name>` without extension) of every header in `dir`, sorted.
fn stems(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "toml") {
            out.push(path.with_extension(""));
        }
    }
    out.sort();
    Ok(out)
}

/// Load every volume with a matching mask. Volumes without a mask are skipped
/// with a warning and reported in the returned list.
pub fn load_raw(dir: &Path) -> Result<(Vec<ImagingInput>, ExpressionMatrix, Vec<String>)> {
    let expression = ExpressionMatrix::load(&dir.join(EXPRESSION_FILE))?;
    let mut masks = BTreeMap::new();
    for stem in stems(&dir.join(MASKS_DIR))? {
        let (header, mask) = TumorMask::load(&stem)?;
        masks.insert(header.patient_id, mask);
    }
    let mut imaging = Vec::new();
    let mut unpaired = Vec::new();
    for stem in stems(&dir.join(VOLUMES_DIR))? {
        let volume = Volume::load(&stem)?;
        match masks.remove(&volume.patient_id) {
            Some(mask) => imaging.push(ImagingInput { volume, mask }),
            None => {
                warn!("volume `{}` has no tumor mask", volume.patient_id);
                unpaired.push(volume.patient_id);
            }
        }
    }
    Ok((imaging, expression, unpaired))
}
