use super::{Modality, Volume};
use crate::error::{Error, Result};

/// Closed intensity interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipRange {
    lo: f32,
    hi: f32,
}

impl ClipRange {
    /// CT window in Hounsfield-like units.
    pub const CT: ClipRange = ClipRange { lo: -500.0, hi: 200.0 };
    /// PET window in SUV-like units.
    pub const PET: ClipRange = ClipRange { lo: 0.01, hi: 20.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Parameter(format!("clip range needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    pub fn for_modality(m: Modality) -> Option<Self> {
        match m {
            Modality::Ct => Some(Self::CT),
            Modality::Pet => Some(Self::PET),
            Modality::Mask => None,
        }
    }
}

pub fn clip_intensity(v: &Volume, r: ClipRange) -> Volume {
    v.map(|w| w.max(r.lo).min(r.hi))
}

/// Trilinear sample at a continuous voxel index, clamped to the grid.
fn trilinear(v: &Volume, u: [f64; 3]) -> f64 {
    let d = v.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let c = u[a].clamp(0.0, (d[a] - 1) as f64);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(d[a] - 1);
        w[a] = c - f;
    }
    let mut acc = 0.0;
    for (cx, wx) in [(lo[0], 1.0 - w[0]), (hi[0], w[0])] {
        for (cy, wy) in [(lo[1], 1.0 - w[1]), (hi[1], w[1])] {
            for (cz, wz) in [(lo[2], 1.0 - w[2]), (hi[2], w[2])] {
                let wt = wx * wy * wz;
                if wt != 0.0 {
                    acc += wt * v.get(cx, cy, cz) as f64;
                }
            }
        }
    }
    acc
}

/// Resample onto an isotropic grid of spacing `target`.
///
/// Output dims are `max(1, round(n * s / target))` per axis. Voxel centers
/// are aligned so output voxel `i` sits at source index
/// `(i + 0.5) * target / s - 0.5`. Masks are re-binarized at 0.5.
pub fn resample_isotropic(v: &Volume, target: f32) -> Result<Volume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Parameter(format!("target spacing must be positive, got {target}")));
    }
    let (d, s) = (v.dims(), v.spacing());
    let out_dims = [0, 1, 2].map(|a| ((d[a] as f64 * s[a] as f64 / target as f64).round() as usize).max(1));
    if out_dims == d && s == [target; 3] {
        return Ok(v.clone());
    }
    let ratio = [0, 1, 2].map(|a| target as f64 / s[a] as f64);
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let u = [x, y, z]
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| (i as f64 + 0.5) * ratio[a] - 0.5)
                    .collect::<Vec<_>>();
                let val = trilinear(v, [u[0], u[1], u[2]]);
                out.push(if v.modality() == Modality::Mask {
                    if val >= 0.5 { 1.0 } else { 0.0 }
                } else {
                    val as f32
                });
            }
        }
    }
    Volume::new(out_dims, [target; 3], out, v.modality())
}

/// Unweighted center of mass of the nonzero mask voxels, in voxel indices.
pub fn center_of_mass(mask: &Volume) -> Result<[f64; 3]> {
    let d = mask.dims();
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if mask.get(x, y, z) != 0.0 {
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Crop a box of `roi` voxels centered on the voxel nearest the mask's
/// center of mass. The box spans `[c - n/2, c + n/2)` per axis; voxels
/// outside the source take `pad`.
pub fn crop_roi(v: &Volume, mask: &Volume, roi: [usize; 3], pad: f32) -> Result<Volume> {
    if v.dims() != mask.dims() {
        return Err(Error::Shape(format!("volume {:?} and mask {:?} differ", v.dims(), mask.dims())));
    }
    if roi.iter().any(|&n| n == 0 || n % 2 != 0) {
        return Err(Error::Parameter(format!("ROI dims must be even and positive, got {roi:?}")));
    }
    let com = center_of_mass(mask)?;
    let d = v.dims();
    let start = [0, 1, 2].map(|a| com[a].round() as i64 - (roi[a] / 2) as i64);
    let mut out = Vec::with_capacity(roi.iter().product());
    for z in 0..roi[2] {
        let sz = start[2] + z as i64;
        for y in 0..roi[1] {
            let sy = start[1] + y as i64;
            for x in 0..roi[0] {
                let sx = start[0] + x as i64;
                let inside = sx >= 0 && sy >= 0 && sz >= 0 && (sx as usize) < d[0] && (sy as usize) < d[1] && (sz as usize) < d[2];
                out.push(if inside { v.get(sx as usize, sy as usize, sz as usize) } else { pad });
            }
        }
    }
    Volume::new(roi, v.spacing(), out, v.modality())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], spacing: [f32; 3]) -> Volume {
        let mut vox = Vec::new();
        for _z in 0..dims[2] {
            for _y in 0..dims[1] {
                for x in 0..dims[0] {
                    vox.push(x as f32);
                }
            }
        }
        Volume::new(dims, spacing, vox, Modality::Ct).unwrap()
    }

    #[test]
    fn clip_examples() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![-900.0, 0.0, 35.0], Modality::Ct).unwrap();
        let c = clip_intensity(&v, ClipRange::CT);
        assert_eq!(c.voxels(), &[-500.0, 0.0, 35.0]);
        let p = clip_intensity(&v, ClipRange::PET);
        assert_eq!(p.voxels()[2], 20.0);
        assert_eq!(p.voxels()[0], 0.01);
        assert!(ClipRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn unit_spacing_resample_is_identity() {
        let v = ramp([4, 3, 2], [1.0; 3]);
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
        assert!(matches!(resample_isotropic(&v, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([5, 3, 2], [0.7, 1.3, 2.2], 4.25, Modality::Pet).unwrap();
        let r = resample_isotropic(&v, 0.9).unwrap();
        assert!(r.voxels().iter().all(|&x| (x - 4.25).abs() < 1e-6));
    }

    #[test]
    fn ramp_with_double_spacing_halves_slope() {
        let v = ramp([6, 2, 2], [2.0, 1.0, 1.0]);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [12, 2, 2]);
        // closed-form oracle: source index u = (i + 0.5) / 2 - 0.5 clamped to [0, 5]
        for i in 0..12 {
            let u = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 5.0);
            assert!((r.get(i, 1, 1) as f64 - u).abs() < 1e-6, "voxel {i}");
        }
        for i in 1..10 {
            let slope = r.get(i + 1, 0, 0) - r.get(i, 0, 0);
            assert!((slope - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_around_single_voxel() {
        let img = Volume::new([20, 20, 20], [1.0; 3], (0..8000).map(|i| i as f32).collect(), Modality::Ct).unwrap();
        let mut m = vec![0.0; 8000];
        m[img.index(10, 10, 10)] = 1.0;
        let mask = Volume::new([20, 20, 20], [1.0; 3], m, Modality::Mask).unwrap();
        let c = crop_roi(&img, &mask, [4, 4, 4], -500.0).unwrap();
        assert_eq!(c.dims(), [4, 4, 4]);
        assert_eq!(c.get(0, 0, 0), img.get(8, 8, 8));
        assert_eq!(c.get(3, 3, 3), img.get(11, 11, 11));
    }

    #[test]
    fn crop_near_edge_pads_outside_source() {
        let img = Volume::filled([6, 6, 6], [1.0; 3], 7.0, Modality::Ct).unwrap();
        let mut m = vec![0.0; 216];
        m[img.index(0, 0, 0)] = 1.0;
        let mask = Volume::new([6, 6, 6], [1.0; 3], m, Modality::Mask).unwrap();
        let c = crop_roi(&img, &mask, [4, 4, 4], -500.0).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let src_inside = x >= 2 && y >= 2 && z >= 2;
                    assert_eq!(c.get(x, y, z), if src_inside { 7.0 } else { -500.0 });
                }
            }
        }
    }

    #[test]
    fn symmetric_mask_centers_the_crop() {
        let img = Volume::new([9, 9, 9], [1.0; 3], (0..729).map(|i| i as f32).collect(), Modality::Ct).unwrap();
        let mut m = vec![0.0; 729];
        for (x, y, z) in [(2, 4, 4), (6, 4, 4), (4, 2, 4), (4, 6, 4), (4, 4, 2), (4, 4, 6)] {
            m[img.index(x, y, z)] = 1.0;
        }
        let mask = Volume::new([9, 9, 9], [1.0; 3], m, Modality::Mask).unwrap();
        let c = crop_roi(&img, &mask, [2, 2, 2], 0.0).unwrap();
        // box [c - 1, c + 1) around the center voxel 4
        assert_eq!(c.get(1, 1, 1), img.get(4, 4, 4));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let img = Volume::filled([4, 4, 4], [1.0; 3], 1.0, Modality::Ct).unwrap();
        let mask = Volume::filled([4, 4, 4], [1.0; 3], 0.0, Modality::Mask).unwrap();
        assert!(matches!(crop_roi(&img, &mask, [2, 2, 2], 0.0), Err(Error::EmptyMask)));
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(vals in proptest::collection::vec(-2000.0f32..2000.0, 1..64)) {
            let n = vals.len();
            let v = Volume::new([n, 1, 1], [1.0; 3], vals, Modality::Ct).unwrap();
            let once = clip_intensity(&v, ClipRange::CT);
            prop_assert_eq!(clip_intensity(&once, ClipRange::CT), once);
        }

        #[test]
        fn crop_has_requested_dims(
            cx in 0usize..8, cy in 0usize..8, cz in 0usize..5,
            rx in 1usize..6, ry in 1usize..6, rz in 1usize..4
        ) {
            let img = Volume::filled([8, 8, 5], [1.0; 3], 3.0, Modality::Pet).unwrap();
            let mut m = vec![0.0; 320];
            m[img.index(cx, cy, cz)] = 1.0;
            let mask = Volume::new([8, 8, 5], [1.0; 3], m, Modality::Mask).unwrap();
            let roi = [2 * rx, 2 * ry, 2 * rz];
            let c = crop_roi(&img, &mask, roi, 0.0).unwrap();
            prop_assert_eq!(c.dims(), roi);
            prop_assert_eq!(c.len(), roi.iter().product::<usize>());
        }
    }
}
