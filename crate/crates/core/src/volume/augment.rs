//! Geometric augmentation restricted to integer shifts, axis flips and
//! quarter-turn rotations, so masks stay binary without resampling.

use super::{Modality, Volume};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two axes spanning the rotation plane, in right-handed order.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (2, 0),
            Axis::Z => (0, 1),
        }
    }
}

/// Rotation by `quarter_turns * 90` degrees about `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rotation {
    pub axis: Axis,
    pub quarter_turns: u8,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationSpec {
    /// Largest shift per axis, in voxels.
    pub max_translation: usize,
    /// Candidate rotations; each sample picks one of these or none.
    pub rotations: Vec<Rotation>,
    /// Axes that are flipped independently with probability 1/2.
    pub flips: Vec<Axis>,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn identity(seed: u64) -> Self {
        Self { max_translation: 0, rotations: Vec::new(), flips: Vec::new(), seed }
    }

    /// Shifts of up to two voxels, flips on all axes and the rotations that
    /// keep `dims` unchanged.
    pub fn standard(dims: [usize; 3], seed: u64) -> Self {
        let mut rotations = Vec::new();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let (a, b) = axis.plane();
            let turns: &[u8] = if dims[a] == dims[b] { &[1, 2, 3] } else { &[2] };
            rotations.extend(turns.iter().map(|&q| Rotation { axis, quarter_turns: q }));
        }
        Self { max_translation: 2, rotations, flips: vec![Axis::X, Axis::Y, Axis::Z], seed }
    }
}

/// Shift by `offset` voxels: `out[p] = in[p - offset]`, `fill` elsewhere.
pub fn translate(v: &Volume, offset: [i64; 3], fill: f32) -> Volume {
    let d = v.dims();
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d[2] as i64 {
        for y in 0..d[1] as i64 {
            for x in 0..d[0] as i64 {
                let s = [x - offset[0], y - offset[1], z - offset[2]];
                let inside = (0..3).all(|a| s[a] >= 0 && s[a] < d[a] as i64);
                out.push(if inside { v.get(s[0] as usize, s[1] as usize, s[2] as usize) } else { fill });
            }
        }
    }
    v.with_voxels(out).expect("geometry preserved")
}

pub fn flip(v: &Volume, axis: Axis) -> Volume {
    let d = v.dims();
    let a = axis.index();
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut s = [x, y, z];
                s[a] = d[a] - 1 - s[a];
                out.push(v.get(s[0], s[1], s[2]));
            }
        }
    }
    v.with_voxels(out).expect("geometry preserved")
}

/// Rotate by `quarter_turns * 90` degrees about `axis`. With plane axes
/// `(a, b)`, one quarter turn maps source `(p_a, p_b)` to
/// `(n_b - 1 - p_b, p_a)`, swapping the two extents.
pub fn rotate90(v: &Volume, axis: Axis, quarter_turns: u8) -> Volume {
    let mut cur = v.clone();
    for _ in 0..quarter_turns % 4 {
        cur = rotate_once(&cur, axis);
    }
    cur
}

fn rotate_once(v: &Volume, axis: Axis) -> Volume {
    let d = v.dims();
    let (a, b) = axis.plane();
    let mut nd = d;
    nd.swap(a, b);
    let mut sp = v.spacing();
    sp.swap(a, b);
    let mut out = vec![0.0f32; v.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = [x, y, z];
                let mut q = p;
                q[a] = d[b] - 1 - p[b];
                q[b] = p[a];
                out[q[0] + nd[0] * (q[1] + nd[1] * q[2])] = v.get(x, y, z);
            }
        }
    }
    Volume::new(nd, sp, out, v.modality()).expect("rotation preserves invariants")
}

fn background(v: &Volume) -> f32 {
    if v.modality() == Modality::Mask {
        0.0
    } else {
        v.voxels().iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// `n` randomly transformed copies of an image/mask pair. The same transform
/// is applied to both; shifted-in voxels take the image minimum (0 for the
/// mask).
pub fn augment(v: &Volume, mask: &Volume, spec: &AugmentationSpec, n: usize) -> Result<Vec<(Volume, Volume)>> {
    if v.dims() != mask.dims() {
        return Err(Error::Shape(format!("image {:?} and mask {:?} differ", v.dims(), mask.dims())));
    }
    let d = v.dims();
    for r in &spec.rotations {
        let (a, b) = r.axis.plane();
        if r.quarter_turns % 2 == 1 && d[a] != d[b] {
            return Err(Error::Parameter(format!("rotation {r:?} would change dims {d:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fill_img, fill_mask) = (background(v), background(mask));
    let t = spec.max_translation as i64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img = v.clone();
        let mut msk = mask.clone();
        if !spec.rotations.is_empty() {
            let pick = rng.random_range(0..=spec.rotations.len());
            if let Some(r) = spec.rotations.get(pick) {
                img = rotate90(&img, r.axis, r.quarter_turns);
                msk = rotate90(&msk, r.axis, r.quarter_turns);
            }
        }
        for &axis in &spec.flips {
            if rng.random_bool(0.5) {
                img = flip(&img, axis);
                msk = flip(&msk, axis);
            }
        }
        if t > 0 {
            let off = [0; 3].map(|_| rng.random_range(-t..=t));
            img = translate(&img, off, fill_img);
            msk = translate(&msk, off, fill_mask);
        }
        out.push((img, msk));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect(), Modality::Ct).unwrap()
    }

    fn blob(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        let mut m = vec![0.0; n];
        for i in (0..n).step_by(3) {
            m[i] = 1.0;
        }
        Volume::new(dims, [1.0; 3], m, Modality::Mask).unwrap()
    }

    #[test]
    fn identity_spec_copies_input() {
        let v = indexed([4, 4, 2]);
        let m = blob([4, 4, 2]);
        let out = augment(&v, &m, &AugmentationSpec::identity(1), 3).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(a, b)| a == &v && b == &m));
    }

    #[test]
    fn flips_are_involutions() {
        let v = indexed([3, 4, 5]);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            assert_eq!(flip(&flip(&v, axis), axis), v);
            assert_ne!(flip(&v, axis), v);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity_and_dims_swap() {
        let v = indexed([3, 4, 5]);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let once = rotate90(&v, axis, 1);
            let (a, b) = axis.plane();
            let d = v.dims();
            assert_eq!(once.dims()[a], d[b]);
            assert_eq!(once.dims()[b], d[a]);
            assert_eq!(rotate90(&once, axis, 3), v);
            // two quarter turns equal two plane flips
            let (fa, fb) = ([Axis::X, Axis::Y, Axis::Z][a], [Axis::X, Axis::Y, Axis::Z][b]);
            assert_eq!(rotate90(&v, axis, 2), flip(&flip(&v, fa), fb));
        }
    }

    #[test]
    fn translation_shifts_indices() {
        let v = indexed([4, 3, 2]);
        let t = translate(&v, [1, 0, 0], -1.0);
        for z in 0..2 {
            for y in 0..3 {
                assert_eq!(t.get(0, y, z), -1.0);
                for x in 1..4 {
                    assert_eq!(t.get(x, y, z), v.get(x - 1, y, z));
                }
            }
        }
    }

    #[test]
    fn flips_and_rotations_preserve_mask_count() {
        let m = blob([6, 6, 4]);
        let img = indexed([6, 6, 4]);
        let spec = AugmentationSpec { max_translation: 0, ..AugmentationSpec::standard([6, 6, 4], 9) };
        for (a, b) in augment(&img, &m, &spec, 20).unwrap() {
            assert_eq!(b.count_nonzero(), m.count_nonzero());
            assert_eq!(a.dims(), img.dims());
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_consistent() {
        let m = blob([6, 6, 4]);
        let img = m.relabel(Modality::Ct).unwrap();
        let spec = AugmentationSpec::standard([6, 6, 4], 42);
        let a = augment(&img, &m, &spec, 10).unwrap();
        let b = augment(&img, &m, &spec, 10).unwrap();
        assert_eq!(a, b);
        // the image here equals the mask, so a shared transform keeps them equal
        // wherever no fill value was shifted in
        for (i, mk) in &a {
            assert_eq!(i.voxels(), mk.voxels());
        }
    }

    #[test]
    fn dim_changing_rotation_is_rejected() {
        let v = indexed([4, 4, 2]);
        let m = blob([4, 4, 2]);
        let spec = AugmentationSpec {
            rotations: vec![Rotation { axis: Axis::X, quarter_turns: 1 }],
            ..AugmentationSpec::identity(0)
        };
        assert!(matches!(augment(&v, &m, &spec, 1), Err(Error::Parameter(_))));
    }
}
