//! CT preprocessing: lung masking, HU windowing, isotropic resampling, patch
//! extraction in the four input modalities, and orientation augmentation.

pub mod lung_mask;
pub mod resample;

pub use lung_mask::{apply_mask, lung_mask, LungMaskParams};
pub use resample::{resample_isotropic, resample_mask_isotropic};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::data_model::{Modality, NodulePatch, Volume};
use crate::util::rng_from;
use crate::{Error, Result};

/// An HU clipping window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo >= hi {
            return Err(Error::InvalidArgument(format!(
                "window needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(WindowSpec { lo, hi })
    }
}

pub const LUNG_WINDOW: WindowSpec = WindowSpec {
    lo: -1000.0,
    hi: 400.0,
};
pub const MEDIASTINAL_WINDOW: WindowSpec = WindowSpec {
    lo: -160.0,
    hi: 240.0,
};

/// Clip to the window and map linearly onto [0, 1].
pub fn window_normalize(voxels: &Array3<f32>, w: WindowSpec) -> Array3<f32> {
    let (lo, hi) = (w.lo as f32, w.hi as f32);
    let range = hi - lo;
    voxels.mapv(|v| (v.clamp(lo, hi) - lo) / range)
}

/// HU fill used for out-of-bounds voxels; below every window floor, so it
/// normalizes to exactly 0.
const OOB_HU: f32 = -10_000.0;

fn crop_with_pad(voxels: &Array3<f32>, start: [isize; 3], size: [usize; 3], fill: f32) -> (Array3<f32>, bool) {
    let shape = voxels.shape().to_vec();
    let mut out = Array3::<f32>::from_elem((size[0], size[1], size[2]), fill);
    let mut padded = false;
    for z in 0..size[0] {
        let iz = start[0] + z as isize;
        if iz < 0 || iz >= shape[0] as isize {
            padded = true;
            continue;
        }
        for y in 0..size[1] {
            let iy = start[1] + y as isize;
            if iy < 0 || iy >= shape[1] as isize {
                padded = true;
                continue;
            }
            for x in 0..size[2] {
                let ix = start[2] + x as isize;
                if ix < 0 || ix >= shape[2] as isize {
                    padded = true;
                    continue;
                }
                out[[z, y, x]] = voxels[[iz as usize, iy as usize, ix as usize]];
            }
        }
    }
    (out, padded)
}

fn crop_mask_with_pad(mask: &Array3<u8>, start: [isize; 3], size: [usize; 3]) -> Array3<u8> {
    let f = mask.mapv(|v| f32::from(v));
    let (c, _) = crop_with_pad(&f, start, size, 0.0);
    c.mapv(|v| v as u8)
}

/// Geometry of one extraction: where the crop starts and how large it is.
fn crop_geometry(
    volume: &Volume,
    center_mm: [f64; 3],
    diameter_mm: f64,
    modality: Modality,
    side: usize,
) -> ([isize; 3], [usize; 3]) {
    let c = volume.mm_to_voxel(center_mm);
    let center = [c[0].round() as isize, c[1].round() as isize, c[2].round() as isize];
    let size: [usize; 3] = match modality {
        Modality::Cube64 => [side; 3],
        _ => {
            let mut s = [0usize; 3];
            for a in 0..3 {
                s[a] = ((diameter_mm / volume.spacing[a]).ceil() as usize).max(1);
            }
            s
        }
    };
    let mut start = [0isize; 3];
    for a in 0..3 {
        start[a] = center[a] - (size[a] / 2) as isize;
    }
    (start, size)
}

/// Extract a 2-channel patch (lung + mediastinal window) from a resampled HU
/// volume. Crops that leave the volume are zero-padded and flagged.
pub fn extract_patch(
    volume: &Volume,
    center_mm: [f64; 3],
    diameter_mm: f64,
    modality: Modality,
    side: usize,
) -> Result<NodulePatch> {
    let (patch, _) = extract_patch_impl(volume, None, center_mm, diameter_mm, modality, side)?;
    Ok(patch)
}

/// Same geometry as [`extract_patch`] but also carries a mask (defined on the
/// volume grid) through the crop/resize, nearest-neighbor so it stays binary.
pub fn extract_patch_with_mask(
    volume: &Volume,
    mask: &Array3<u8>,
    center_mm: [f64; 3],
    diameter_mm: f64,
    modality: Modality,
    side: usize,
) -> Result<(NodulePatch, Array3<u8>)> {
    if mask.shape() != volume.voxels.shape() {
        return Err(Error::InvalidArgument(format!(
            "mask grid {:?} != volume grid {:?}",
            mask.shape(),
            volume.voxels.shape()
        )));
    }
    let (patch, m) = extract_patch_impl(volume, Some(mask), center_mm, diameter_mm, modality, side)?;
    Ok((patch, m.expect("mask requested")))
}

fn extract_patch_impl(
    volume: &Volume,
    mask: Option<&Array3<u8>>,
    center_mm: [f64; 3],
    diameter_mm: f64,
    modality: Modality,
    side: usize,
) -> Result<(NodulePatch, Option<Array3<u8>>)> {
    let cv = volume.mm_to_voxel(center_mm);
    let shape = volume.voxels.shape();
    for a in 0..3 {
        if cv[a] < 0.0 || cv[a] > shape[a] as f64 - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "nodule center {center_mm:?} falls outside the volume"
            )));
        }
    }
    let (start, size) = crop_geometry(volume, center_mm, diameter_mm, modality, side);
    let (crop_hu, padded) = crop_with_pad(&volume.voxels, start, size, OOB_HU);
    let mut crop_mask = mask.map(|m| crop_mask_with_pad(m, start, size));

    let mut channels = [
        window_normalize(&crop_hu, LUNG_WINDOW),
        window_normalize(&crop_hu, MEDIASTINAL_WINDOW),
    ];

    match modality {
        Modality::Cube64 | Modality::X => {}
        Modality::XResize64 => {
            for ch in &mut channels {
                *ch = resample::resize_cubic(ch, [side; 3]).mapv(|v| v.clamp(0.0, 1.0));
            }
            crop_mask = crop_mask.map(|m| resample::resize_nearest_mask(&m, [side; 3]));
        }
        Modality::XPadding64 => {
            for (a, s) in size.iter().enumerate() {
                if *s > side {
                    return Err(Error::InvalidArgument(format!(
                        "tight crop axis {a} is {s} voxels, larger than side {side}"
                    )));
                }
            }
            let mut pad_start = [0isize; 3];
            for a in 0..3 {
                pad_start[a] = -(((side - size[a]) / 2) as isize);
            }
            for ch in &mut channels {
                let (p, _) = crop_with_pad(ch, pad_start, [side; 3], 0.0);
                *ch = p;
            }
            crop_mask = crop_mask.map(|m| crop_mask_with_pad(&m, pad_start, [side; 3]));
        }
    }

    let dims = channels[0].dim();
    let mut data = Array4::<f32>::zeros((2, dims.0, dims.1, dims.2));
    for (i, ch) in channels.iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(ch);
    }
    let patch = NodulePatch::new(data, modality, side, padded)?;
    Ok((patch, crop_mask))
}

/// One of the 48 axis-aligned orientation transforms: an axis permutation
/// composed with per-axis flips. Covers flips, right-angle rotations and
/// transposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Orientation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        Orientation {
            perm: PERMS[rng.random_range(0..PERMS.len())],
            flip: [rng.random(), rng.random(), rng.random()],
        }
    }

    pub fn apply3(&self, a: &Array3<f32>) -> Array3<f32> {
        let mut v = a.view().permuted_axes(self.perm);
        for (ax, f) in self.flip.iter().enumerate() {
            if *f {
                v.invert_axis(Axis(ax));
            }
        }
        v.to_owned()
    }

    pub fn apply3_u8(&self, a: &Array3<u8>) -> Array3<u8> {
        let mut v = a.view().permuted_axes(self.perm);
        for (ax, f) in self.flip.iter().enumerate() {
            if *f {
                v.invert_axis(Axis(ax));
            }
        }
        v.to_owned()
    }
}

/// Apply one seeded random orientation jointly to the patch channels and the
/// optional mask. Deterministic given `seed`.
pub fn augment(
    patch: &NodulePatch,
    mask: Option<&Array3<u8>>,
    seed: u64,
) -> (NodulePatch, Option<Array3<u8>>) {
    let mut rng = rng_from(seed);
    let orient = Orientation::sample(&mut rng);
    let spatial_perm = [orient.perm[0] + 1, orient.perm[1] + 1, orient.perm[2] + 1];
    let mut v = patch.data.view().permuted_axes([0, spatial_perm[0], spatial_perm[1], spatial_perm[2]]);
    for (ax, f) in orient.flip.iter().enumerate() {
        if *f {
            v.invert_axis(Axis(ax + 1));
        }
    }
    let data = v.to_owned().as_standard_layout().to_owned();
    let out = NodulePatch {
        data,
        modality: patch.modality,
        side: patch.side,
        oob_padded: patch.oob_padded,
    };
    let mask = mask.map(|m| orient.apply3_u8(m).as_standard_layout().to_owned());
    (out, mask)
}

/// Options of the manifest-to-patches pipeline.
#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub modality: Modality,
    pub side: usize,
    pub target_spacing: f64,
    pub lung_mask: bool,
    pub lung_params: LungMaskParams,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            modality: Modality::Cube64,
            side: 64,
            target_spacing: 0.5,
            lung_mask: true,
            lung_params: LungMaskParams::default(),
        }
    }
}

/// Full per-nodule pipeline: optional lung masking, isotropic resampling of
/// volume (cubic) and mask (nearest), then patch extraction.
pub fn preprocess_volume(
    volume: &Volume,
    mask: Option<&Array3<u8>>,
    center_mm: [f64; 3],
    diameter_mm: f64,
    opts: &PreprocessOptions,
) -> Result<(NodulePatch, Option<Array3<u8>>)> {
    let masked;
    let vol = if opts.lung_mask {
        let f = lung_mask(volume, &opts.lung_params)?;
        masked = apply_mask(volume, &f);
        &masked
    } else {
        volume
    };
    let resampled = resample_isotropic(vol, opts.target_spacing)?;
    match mask {
        Some(m) => {
            let rm = resample_mask_isotropic(m, volume.spacing, opts.target_spacing)?;
            let (p, pm) = extract_patch_with_mask(
                &resampled,
                &rm,
                center_mm,
                diameter_mm,
                opts.modality,
                opts.side,
            )?;
            Ok((p, Some(pm)))
        }
        None => {
            let p = extract_patch(&resampled, center_mm, diameter_mm, opts.modality, opts.side)?;
            Ok((p, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu_volume(shape: (usize, usize, usize), f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::new(
            Array3::from_shape_fn(shape, |(z, y, x)| f(z, y, x)),
            [0.5; 3],
            [0.0; 3],
        )
        .unwrap()
    }

    #[test]
    fn window_hand_values() {
        let v = Array3::from_shape_fn((8, 8, 8), |(z, _, _)| match z {
            0 => -2000.0,
            1 => 400.0,
            2 => -300.0,
            _ => -1000.0,
        });
        let w = window_normalize(&v, LUNG_WINDOW);
        assert_eq!(w[[0, 0, 0]], 0.0);
        assert_eq!(w[[1, 0, 0]], 1.0);
        assert!((w[[2, 0, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn window_is_monotone() {
        let mut rng = rng_from(5);
        for _ in 0..100 {
            let a: f32 = rng.random_range(-2000.0..2000.0);
            let b: f32 = rng.random_range(-2000.0..2000.0);
            let (lo, hi) = (a.min(b), a.max(b));
            let arr = Array3::from_shape_fn((8, 8, 8), |_| 0.0f32);
            let _ = arr;
            let w = MEDIASTINAL_WINDOW;
            let va = (f32::from(lo).clamp(w.lo as f32, w.hi as f32) - w.lo as f32)
                / (w.hi - w.lo) as f32;
            let vb = (f32::from(hi).clamp(w.lo as f32, w.hi as f32) - w.lo as f32)
                / (w.hi - w.lo) as f32;
            assert!(va <= vb);
        }
    }

    #[test]
    fn cube_patch_encloses_centerd_nodule() {
        // 10 mm nodule at center of a 64-voxel 0.5 mm volume
        let vol = hu_volume((64, 64, 64), |z, y, x| {
            let d = ((z as f32 - 32.0).powi(2) + (y as f32 - 32.0).powi(2)
                + (x as f32 - 32.0).powi(2))
            .sqrt();
            if d <= 10.0 {
                -100.0
            } else {
                -900.0
            }
        });
        let center = [16.0, 16.0, 16.0]; // mm
        let p = extract_patch(&vol, center, 10.0, Modality::Cube64, 32).unwrap();
        assert_eq!(p.data.shape(), &[2, 32, 32, 32]);
        assert!(!p.oob_padded);
        // nodule voxels (brighter) present strictly inside
        let lung = p.data.index_axis(Axis(0), 0);
        assert!(lung[[16, 16, 16]] > lung[[0, 0, 0]]);
    }

    #[test]
    fn tight_crop_size_follows_diameter_over_spacing() {
        let vol = hu_volume((64, 64, 64), |_, _, _| -500.0);
        let p = extract_patch(&vol, [16.0, 16.0, 16.0], 8.0, Modality::X, 64).unwrap();
        // 8 mm / 0.5 mm = 16 voxels per axis
        assert_eq!(p.data.shape(), &[2, 16, 16, 16]);
    }

    #[test]
    fn padding_modality_centers_the_tight_crop() {
        let vol = hu_volume((64, 64, 64), |_, _, _| 240.0); // mediastinal ceiling
        let p = extract_patch(&vol, [16.0, 16.0, 16.0], 8.0, Modality::XPadding64, 64).unwrap();
        assert_eq!(p.data.shape(), &[2, 64, 64, 64]);
        let med = p.data.index_axis(Axis(0), 1);
        // 16^3 block centered with 24-voxel margins
        assert_eq!(med[[32, 32, 32]], 1.0);
        assert_eq!(med[[23, 32, 32]], 0.0);
        assert_eq!(med[[24, 32, 32]], 1.0);
        assert_eq!(med[[39, 32, 32]], 1.0);
        assert_eq!(med[[40, 32, 32]], 0.0);
    }

    #[test]
    fn resize_modality_fills_the_cube_and_stays_in_range() {
        let vol = hu_volume((64, 64, 64), |z, _, _| -800.0 + z as f32 * 10.0);
        let (p, m) = extract_patch_with_mask(
            &vol,
            &Array3::from_elem((64, 64, 64), 1u8),
            [16.0, 16.0, 16.0],
            8.0,
            Modality::XResize64,
            64,
        )
        .unwrap();
        assert_eq!(p.data.shape(), &[2, 64, 64, 64]);
        assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.shape(), &[64, 64, 64]);
        assert!(m.iter().all(|v| *v == 1));
    }

    #[test]
    fn out_of_bounds_crop_pads_and_flags() {
        let vol = hu_volume((32, 32, 32), |_, _, _| 0.0);
        let p = extract_patch(&vol, [1.0, 1.0, 1.0], 10.0, Modality::Cube64, 32).unwrap();
        assert!(p.oob_padded);
        // padded corner normalizes to 0 in both windows
        assert_eq!(p.data[[0, 0, 0, 0]], 0.0);
        assert_eq!(p.data[[1, 0, 0, 0]], 0.0);
    }

    #[test]
    fn augment_is_deterministic_and_permutes_values() {
        let mut rng = rng_from(77);
        let data = Array4::from_shape_fn((2, 6, 6, 6), |_| rng.random_range(0.0..1.0f32));
        let patch = NodulePatch::new(data, Modality::Cube64, 6, false).unwrap();
        let mut mask = Array3::<u8>::zeros((6, 6, 6));
        mask[[1, 2, 3]] = 1;
        mask[[4, 4, 4]] = 1;

        let (a1, m1) = augment(&patch, Some(&mask), 99);
        let (a2, m2) = augment(&patch, Some(&mask), 99);
        assert_eq!(a1.data, a2.data);
        assert_eq!(m1, m2);

        // multiset of channel values preserved
        for ch in 0..2 {
            let mut orig: Vec<u32> = patch
                .data
                .index_axis(Axis(0), ch)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let mut out: Vec<u32> = a1
                .data
                .index_axis(Axis(0), ch)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            orig.sort_unstable();
            out.sort_unstable();
            assert_eq!(orig, out);
        }
        // mask foreground count invariant
        let fg: usize = m1.unwrap().iter().map(|v| *v as usize).sum();
        assert_eq!(fg, 2);

        // different seeds eventually give different transforms
        let mut distinct = false;
        for s in 0..20 {
            let (b, _) = augment(&patch, None, s);
            if b.data != a1.data {
                distinct = true;
                break;
            }
        }
        assert!(distinct);
    }

    #[test]
    fn augment_keeps_values_in_unit_range() {
        let mut rng = rng_from(78);
        let data = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.random_range(0.0..1.0f32));
        let patch = NodulePatch::new(data, Modality::Cube64, 4, false).unwrap();
        for s in 0..48 {
            let (a, _) = augment(&patch, None, s);
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
