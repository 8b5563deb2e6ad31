//! Separable cubic (Catmull-Rom) and nearest-neighbor resampling.
//!
//! Output sample `i` maps to input coordinate `(i + 0.5) * scale - 0.5`
//! (pixel-center convention), so resampling at the identical spacing is an
//! exact identity and physical extents are preserved to within one voxel.

use ndarray::{Array3, Axis};

use crate::data_model::Volume;
use crate::{Error, Result};

/// Keys cubic convolution kernel with a = -1/2; reproduces linear fields
/// exactly and interpolates (passes through the samples).
fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

fn resample_lines<F>(data: &Array3<f32>, axis: usize, n_out: usize, mut line_fn: F) -> Array3<f32>
where
    F: FnMut(&[f32], &mut [f32]),
{
    let mut out_shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
    out_shape[axis] = n_out;
    let mut out = Array3::<f32>::zeros(out_shape);
    let mut buf_in = vec![0.0f32; data.shape()[axis]];
    let mut buf_out = vec![0.0f32; n_out];
    for (lane_in, mut lane_out) in data
        .lanes(Axis(axis))
        .into_iter()
        .zip(out.lanes_mut(Axis(axis)))
    {
        for (b, v) in buf_in.iter_mut().zip(lane_in.iter()) {
            *b = *v;
        }
        line_fn(&buf_in, &mut buf_out);
        for (o, v) in lane_out.iter_mut().zip(&buf_out) {
            *o = *v;
        }
    }
    out
}

fn cubic_line(input: &[f32], output: &mut [f32], scale: f64) {
    let n = input.len() as isize;
    let clamp = |i: isize| input[i.clamp(0, n - 1) as usize] as f64;
    for (i, o) in output.iter_mut().enumerate() {
        let x = (i as f64 + 0.5) * scale - 0.5;
        let i0 = x.floor() as isize;
        let t = x - i0 as f64;
        let mut acc = 0.0;
        for m in -1..=2isize {
            acc += clamp(i0 + m) * cubic_kernel(m as f64 - t);
        }
        *o = acc as f32;
    }
}

fn nearest_line(input: &[f32], output: &mut [f32], scale: f64) {
    let n = input.len() as isize;
    for (i, o) in output.iter_mut().enumerate() {
        let x = (i as f64 + 0.5) * scale - 0.5;
        let idx = (x + 0.5).floor() as isize;
        *o = input[idx.clamp(0, n - 1) as usize];
    }
}

fn output_len(n_in: usize, spacing: f64, target: f64) -> usize {
    ((n_in as f64 * spacing / target).round() as usize).max(2)
}

/// Cubic-spline resampling of a volume to isotropic `target` mm/voxel.
pub fn resample_isotropic(volume: &Volume, target: f64) -> Result<Volume> {
    if target <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be > 0, got {target}"
        )));
    }
    let mut data = volume.voxels.clone();
    let mut origin = volume.origin;
    for axis in 0..3 {
        let spacing = volume.spacing[axis];
        let n_out = output_len(data.shape()[axis], spacing, target);
        if spacing == target && n_out == data.shape()[axis] {
            continue;
        }
        let scale = target / spacing;
        data = resample_lines(&data, axis, n_out, |i, o| cubic_line(i, o, scale));
        // voxel 0 center moves by half the spacing difference
        origin[axis] += (target - spacing) / 2.0;
    }
    Volume::new(data, [target; 3], origin)
}

/// Nearest-neighbor (zero-order) resampling for binary masks, matching the
/// geometry of [`resample_isotropic`].
pub fn resample_mask_isotropic(
    mask: &Array3<u8>,
    spacing: [f64; 3],
    target: f64,
) -> Result<Array3<u8>> {
    if target <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be > 0, got {target}"
        )));
    }
    let mut data = mask.mapv(|v| f32::from(v));
    for axis in 0..3 {
        let n_out = output_len(data.shape()[axis], spacing[axis], target);
        if n_out == data.shape()[axis] && spacing[axis] == target {
            continue;
        }
        let scale = target / spacing[axis];
        data = resample_lines(&data, axis, n_out, |i, o| nearest_line(i, o, scale));
    }
    Ok(data.mapv(|v| v as u8))
}

/// Cubic resize of a 3D block to an explicit shape (used by the resize
/// modality). Output values are NOT clamped; the caller owns the value range.
pub fn resize_cubic(data: &Array3<f32>, out_shape: [usize; 3]) -> Array3<f32> {
    let mut out = data.clone();
    for axis in 0..3 {
        if out.shape()[axis] == out_shape[axis] {
            continue;
        }
        let scale = out.shape()[axis] as f64 / out_shape[axis] as f64;
        out = resample_lines(&out, axis, out_shape[axis], |i, o| cubic_line(i, o, scale));
    }
    out
}

/// Nearest-neighbor resize of a binary mask to an explicit shape.
pub fn resize_nearest_mask(mask: &Array3<u8>, out_shape: [usize; 3]) -> Array3<u8> {
    let mut out = mask.mapv(|v| f32::from(v));
    for axis in 0..3 {
        if out.shape()[axis] == out_shape[axis] {
            continue;
        }
        let scale = out.shape()[axis] as f64 / out_shape[axis] as f64;
        out = resample_lines(&out, axis, out_shape[axis], |i, o| nearest_line(i, o, scale));
    }
    out.mapv(|v| v as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn volume_from_fn<F: Fn(usize, usize, usize) -> f32>(
        shape: (usize, usize, usize),
        spacing: [f64; 3],
        f: F,
    ) -> Volume {
        Volume::new(
            Array3::from_shape_fn(shape, |(z, y, x)| f(z, y, x)),
            spacing,
            [0.0; 3],
        )
        .unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = volume_from_fn((10, 9, 8), [0.5; 3], |z, y, x| {
            (z * 100 + y * 10 + x) as f32 * 0.37
        });
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.voxels.shape(), v.voxels.shape());
        for (a, b) in r.voxels.iter().zip(v.voxels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = volume_from_fn((9, 9, 9), [0.8, 1.1, 0.6], |_, _, _| 42.5);
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.spacing, [0.5; 3]);
        for a in r.voxels.iter() {
            assert!((a - 42.5).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_ramp_doubles_and_matches_analytic_line() {
        // ramp along z at 1.0 mm: value = z_mm; resampled to 0.5 mm
        let v = volume_from_fn((16, 8, 8), [1.0, 0.5, 0.5], |z, _, _| z as f32);
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.voxels.shape()[0], 32);
        // interior: output voxel i sits at input coordinate (i+0.5)*0.5 - 0.5
        for i in 4..28 {
            let x = (i as f64 + 0.5) * 0.5 - 0.5;
            let got = r.voxels[[i, 4, 4]] as f64;
            assert!(
                (got - x).abs() < 1e-4,
                "voxel {i}: got {got}, want {x}"
            );
        }
        // physical extent preserved within one voxel
        let extent_in = 16.0 * 1.0;
        let extent_out = r.voxels.shape()[0] as f64 * 0.5;
        assert!((extent_in - extent_out).abs() <= 0.5);
    }

    #[test]
    fn rejects_nonpositive_target() {
        let v = volume_from_fn((8, 8, 8), [0.5; 3], |_, _, _| 0.0);
        assert!(resample_isotropic(&v, 0.0).is_err());
        assert!(resample_isotropic(&v, -1.0).is_err());
    }

    #[test]
    fn mask_resample_stays_binary_and_tracks_geometry() {
        let mut mask = Array3::<u8>::zeros((8, 8, 8));
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    mask[[z, y, x]] = 1;
                }
            }
        }
        let out = resample_mask_isotropic(&mask, [1.0; 3], 0.5).unwrap();
        assert_eq!(out.shape(), &[16, 16, 16]);
        assert!(out.iter().all(|v| *v <= 1));
        let vol_in: usize = mask.iter().map(|v| *v as usize).sum();
        let vol_out: usize = out.iter().map(|v| *v as usize).sum();
        // 2x upsampling multiplies the voxel count by ~8
        assert!((vol_out as f64 - vol_in as f64 * 8.0).abs() <= vol_in as f64 * 2.0);
    }

    #[test]
    fn resize_cubic_hits_target_shape() {
        let d = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z + y + x) as f32);
        let r = resize_cubic(&d, [10, 10, 10]);
        assert_eq!(r.shape(), &[10, 10, 10]);
        let n = resize_nearest_mask(&Array3::<u8>::ones((5, 6, 7)), [10, 10, 10]);
        assert!(n.iter().all(|v| *v == 1));
    }
}
