//! Volume resampling, intensity standardization and tumor-slice selection.

use log::warn;

use super::volume::{TumorMask, Volume};
use crate::error::{Error, Result};

/// Per-axis sampling plan: for each output voxel the two neighbours and the
/// weight of the upper one.
fn axis_plan(n: usize, spacing: f64, axis: usize) -> Vec<(usize, usize, f64)> {
    if n == 1 {
        let copies = if spacing == 1.0 {
            1
        } else {
            warn!("axis {axis} has a single voxel at {spacing} mm; extending it as a constant");
            (spacing.round() as usize).max(1)
        };
        return vec![(0, 0, 0.0); copies];
    }
    let extent = (n - 1) as f64 * spacing;
    let n_out = (extent + 1e-9).floor() as usize + 1;
    (0..n_out)
        .map(|i| {
            let u = (i as f64 / spacing).clamp(0.0, (n - 1) as f64);
            let lo = (u.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

/// Output dims after resampling to a 1 mm grid.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| axis_plan(dims[a], spacing[a], a).len())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::input(format!("spacing {spacing:?} must be finite and positive")));
    }
    Ok(())
}

/// Trilinear resampling onto an isotropic 1 mm grid spanning the same physical
/// extent. Samples outside the input clamp to the boundary.
pub fn resample_to_1mm(v: &Volume) -> Result<Volume> {
    let spacing = v.spacing();
    check_spacing(spacing)?;
    if spacing == [1.0, 1.0, 1.0] {
        return Ok(v.clone());
    }
    let d = v.dims();
    let plans: Vec<_> = (0..3).map(|a| axis_plan(d[a], spacing[a], a)).collect();
    let (px, py, pz) = (&plans[0], &plans[1], &plans[2]);
    let mut out = Vec::with_capacity(px.len() * py.len() * pz.len());
    for &(z0, z1, fz) in pz {
        for &(y0, y1, fy) in py {
            for &(x0, x1, fx) in px {
                let c = |x, y, z| v.get(x, y, z);
                let c00 = c(x0, y0, z0) * (1.0 - fx) + c(x1, y0, z0) * fx;
                let c10 = c(x0, y1, z0) * (1.0 - fx) + c(x1, y1, z0) * fx;
                let c01 = c(x0, y0, z1) * (1.0 - fx) + c(x1, y0, z1) * fx;
                let c11 = c(x0, y1, z1) * (1.0 - fx) + c(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    Volume::new(
        v.patient_id.clone(),
        v.modality,
        [px.len(), py.len(), pz.len()],
        [1.0; 3],
        out,
    )
}

/// Nearest-neighbour counterpart of [`resample_to_1mm`] for label masks.
pub fn resample_mask_to_1mm(m: &TumorMask, spacing: [f64; 3]) -> Result<TumorMask> {
    check_spacing(spacing)?;
    if spacing == [1.0, 1.0, 1.0] {
        return Ok(m.clone());
    }
    let d = m.dims();
    let pick = |&(lo, hi, f): &(usize, usize, f64)| if f >= 0.5 { hi } else { lo };
    let plans: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_plan(d[a], spacing[a], a).iter().map(pick).collect())
        .collect();
    let mut labels = Vec::with_capacity(plans.iter().map(Vec::len).product());
    for &z in &plans[2] {
        for &y in &plans[1] {
            for &x in &plans[0] {
                labels.push(m.labels()[x + d[0] * (y + d[1] * z)]);
            }
        }
    }
    TumorMask::new([plans[0].len(), plans[1].len(), plans[2].len()], labels)
}

/// Z-score over all voxels with the population standard deviation.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let vox = v.voxels();
    let n = vox.len() as f64;
    let mean = vox.iter().sum::<f64>() / n;
    let var = vox.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::input(format!(
            "volume of patient `{}` has zero intensity variance (constant value {mean}); cannot standardize",
            v.patient_id
        )));
    }
    let mut out = v.clone();
    for x in out.voxels_mut() {
        *x = (*x - mean) / std;
    }
    Ok(out)
}

/// Ascending axial indices whose mask-positive count reaches `min_tumor_voxels`.
pub fn select_tumor_slices(v: &Volume, m: &TumorMask, min_tumor_voxels: usize) -> Result<Vec<usize>> {
    if v.dims() != m.dims() {
        return Err(Error::dim(format!(
            "mask dims {:?} do not match volume dims {:?}",
            m.dims(),
            v.dims()
        )));
    }
    Ok((0..m.dims()[2])
        .filter(|&z| m.axial_count(z) >= min_tumor_voxels)
        .collect())
}

/// Keep at most `max` of the selected slices, preferring the largest tumor
/// cross-sections (ties to the lower index). Result stays ascending.
pub fn cap_slices(selected: &[usize], m: &TumorMask, max: usize) -> Vec<usize> {
    if selected.len() <= max {
        return selected.to_vec();
    }
    let mut ranked: Vec<(usize, usize)> = selected.iter().map(|&z| (m.axial_count(z), z)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked[..max].iter().map(|&(_, z)| z).collect();
    keep.sort_unstable();
    keep
}

/// Centre-crop or zero-pad an `ny × nx` slice to `size × size`.
pub fn crop_or_pad(slice: &[f64], nx: usize, ny: usize, size: usize) -> Vec<f64> {
    let off_x = (nx as isize - size as isize).div_euclid(2);
    let off_y = (ny as isize - size as isize).div_euclid(2);
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let sy = r as isize + off_y;
        if sy < 0 || sy >= ny as isize {
            continue;
        }
        for c in 0..size {
            let sx = c as isize + off_x;
            if sx >= 0 && sx < nx as isize {
                out[r * size + c] = slice[sy as usize * nx + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::Modality;

    fn vol(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f64>) -> Volume {
        Volume::new("p", Modality::CT, dims, spacing, voxels).unwrap()
    }

    #[test]
    fn identity_at_unit_spacing() {
        let v = vol([2, 2, 2], [1.0; 3], (0..8).map(f64::from).collect());
        assert_eq!(resample_to_1mm(&v).unwrap(), v);
    }

    #[test]
    fn ramp_at_two_mm() {
        let v = vol([5, 1, 1], [2.0, 1.0, 1.0], vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        let r = resample_to_1mm(&v).unwrap();
        assert_eq!(r.dims(), [9, 1, 1]);
        assert_eq!(r.spacing(), [1.0; 3]);
        for (i, &x) in r.voxels().iter().enumerate() {
            assert!((x - i as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let v = vol([4, 3, 3], [1.5, 0.7, 3.0], vec![2.5; 36]);
        let r = resample_to_1mm(&v).unwrap();
        assert_eq!(r.dims(), resampled_dims([4, 3, 3], [1.5, 0.7, 3.0]));
        assert!(r.voxels().iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn single_voxel_axis_is_extended() {
        let v = vol([2, 2, 1], [1.0, 1.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]);
        let r = resample_to_1mm(&v).unwrap();
        assert_eq!(r.dims(), [2, 2, 3]);
        for z in 0..3 {
            assert_eq!(r.axial_slice(z), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn zscore_examples() {
        let n = normalize_intensity(&vol([3, 1, 1], [1.0; 3], vec![1.0, 2.0, 3.0])).unwrap();
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in n.voxels().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        let again = normalize_intensity(&n).unwrap();
        for (a, b) in again.voxels().iter().zip(n.voxels()) {
            assert!((a - b).abs() < 1e-9);
        }
        let affine = vol([3, 1, 1], [1.0; 3], vec![7.0, 9.0, 11.0]);
        let na = normalize_intensity(&affine).unwrap();
        for (a, b) in na.voxels().iter().zip(n.voxels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_rejected() {
        let err = normalize_intensity(&vol([2, 1, 1], [1.0; 3], vec![4.0, 4.0])).unwrap_err();
        assert!(err.to_string().contains("zero intensity variance"));
    }

    fn mask_with_counts(counts: &[(usize, usize)], nz: usize) -> TumorMask {
        let mut m = TumorMask::empty([4, 4, nz]);
        for &(z, c) in counts {
            for i in 0..c {
                m.set(i % 4, i / 4, z, 1);
            }
        }
        m
    }

    #[test]
    fn slice_selection_examples() {
        let v = vol([4, 4, 10], [1.0; 3], vec![0.0; 160]);
        assert!(select_tumor_slices(&v, &TumorMask::empty([4, 4, 10]), 10).unwrap().is_empty());
        let m = mask_with_counts(&[(7, 12)], 10);
        assert_eq!(select_tumor_slices(&v, &m, 10).unwrap(), vec![7]);
        let m = mask_with_counts(&[(3, 9), (5, 10), (6, 11)], 10);
        assert_eq!(select_tumor_slices(&v, &m, 10).unwrap(), vec![5, 6]);
        assert!(select_tumor_slices(&v, &TumorMask::empty([4, 4, 9]), 1).is_err());
    }

    #[test]
    fn cap_keeps_largest_in_order() {
        let m = mask_with_counts(&[(1, 10), (2, 14), (3, 16), (4, 14), (5, 10)], 8);
        assert_eq!(cap_slices(&[1, 2, 3, 4, 5], &m, 3), vec![2, 3, 4]);
        assert_eq!(cap_slices(&[1, 2], &m, 3), vec![1, 2]);
    }

    #[test]
    fn crop_and_pad_are_centred() {
        let s: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(crop_or_pad(&s, 4, 4, 2), vec![5.0, 6.0, 9.0, 10.0]);
        let padded = crop_or_pad(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4);
        assert_eq!(&padded[4..8], &[0.0, 1.0, 2.0, 0.0]);
        assert_eq!(&padded[8..12], &[0.0, 3.0, 4.0, 0.0]);
        assert_eq!(padded.iter().sum::<f64>(), 10.0);
    }
}
