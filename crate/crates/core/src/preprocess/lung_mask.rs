//! Robust lung-cavity masking.
//!
//! The pipeline: Otsu binarization, largest connected body component, hole
//! filling, body subtraction to expose the air cavities, small-component
//! denoising, grayscale closing with a non-flat ball element, and a final
//! 0.5 threshold. The closing is what recovers juxta-pleural bumps that the
//! coarse cavity extraction carves away.

use ndarray::Array3;

use crate::data_model::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LungMaskParams {
    /// Histogram bins for Otsu.
    pub otsu_bins: usize,
    /// HU range covered by the histogram.
    pub hu_range: (f64, f64),
    /// Components smaller than this are dropped in the denoise step.
    pub min_component_voxels: usize,
    /// Radius of the non-flat closing ball, in voxels.
    pub closing_radius: f64,
    /// Peak height of the quadratic profile of the closing element.
    pub closing_height: f64,
}

impl Default for LungMaskParams {
    fn default() -> Self {
        LungMaskParams {
            otsu_bins: 256,
            hu_range: (-1024.0, 1024.0),
            min_component_voxels: 64,
            closing_radius: 5.0,
            closing_height: 0.5,
        }
    }
}

/// Run the full masking pipeline and return the binary lung mask F. Step 8
/// (multiplying the raw CT by F) belongs to the caller; see [`apply_mask`].
pub fn lung_mask(volume: &Volume, params: &LungMaskParams) -> Result<Array3<u8>> {
    let threshold = otsu_threshold(&volume.voxels, params)?;
    // tissue is bright; the body is the largest bright component
    let body = volume.voxels.mapv(|v| u8::from(f64::from(v) >= threshold));
    let body = largest_component(&body);
    let filled = fill_holes(&body);
    // cavities: filled body minus body
    let mut cavities = Array3::<u8>::zeros(body.raw_dim());
    ndarray::Zip::from(&mut cavities)
        .and(&filled)
        .and(&body)
        .for_each(|c, f, b| *c = f & !b & 1);
    let denoised = drop_small_components(&cavities, params.min_component_voxels);
    let closed = grayscale_close(&denoised, params.closing_radius, params.closing_height);
    Ok(closed.mapv(|v| u8::from(v >= 0.5)))
}

/// Step 8 of the pipeline: zero out everything outside the mask.
pub fn apply_mask(volume: &Volume, mask: &Array3<u8>) -> Volume {
    let mut v = volume.clone();
    ndarray::Zip::from(&mut v.voxels)
        .and(mask)
        .for_each(|x, m| *x *= f32::from(*m));
    v
}

/// Otsu threshold over a fixed-range histogram. Returns the HU cut between
/// the two classes; errors when the histogram is degenerate (single bin).
pub fn otsu_threshold(voxels: &Array3<f32>, params: &LungMaskParams) -> Result<f64> {
    let (lo, hi) = params.hu_range;
    let bins = params.otsu_bins;
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u64; bins];
    for v in voxels.iter() {
        let b = (((f64::from(*v) - lo) / width).floor() as isize).clamp(0, bins as isize - 1);
        hist[b as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, c)| i as f64 * *c as f64)
        .sum();
    let mut best_k = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for k in 0..bins - 1 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    if best_var <= 0.0 {
        return Err(Error::DegenerateHistogram);
    }
    Ok(lo + (best_k as f64 + 1.0) * width)
}

const NEIGHBORS6: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn flood(mask: &Array3<u8>, labels: &mut Array3<u32>, seed: [usize; 3], label: u32) -> usize {
    let shape = mask.raw_dim();
    let (d, h, w) = (shape[0] as isize, shape[1] as isize, shape[2] as isize);
    let mut stack = vec![seed];
    labels[seed] = label;
    let mut count = 0usize;
    while let Some([z, y, x]) = stack.pop() {
        count += 1;
        for n in NEIGHBORS6 {
            let (nz, ny, nx) = (z as isize + n[0], y as isize + n[1], x as isize + n[2]);
            if nz < 0 || nz >= d || ny < 0 || ny >= h || nx < 0 || nx >= w {
                continue;
            }
            let p = [nz as usize, ny as usize, nx as usize];
            if mask[p] == 1 && labels[p] == 0 {
                labels[p] = label;
                stack.push(p);
            }
        }
    }
    count
}

/// Keep only the largest 6-connected foreground component.
pub fn largest_component(mask: &Array3<u8>) -> Array3<u8> {
    let mut labels = Array3::<u32>::zeros(mask.raw_dim());
    let mut best = (0u32, 0usize);
    let mut next = 1u32;
    let shape = mask.shape().to_vec();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z, y, x];
                if mask[p] == 1 && labels[p] == 0 {
                    let count = flood(mask, &mut labels, p, next);
                    if count > best.1 {
                        best = (next, count);
                    }
                    next += 1;
                }
            }
        }
    }
    labels.mapv(|l| u8::from(l == best.0 && l != 0))
}

/// Fill interior cavities: complement components not reachable from the
/// volume border become foreground.
pub fn fill_holes(mask: &Array3<u8>) -> Array3<u8> {
    let complement = mask.mapv(|v| 1 - v);
    let mut labels = Array3::<u32>::zeros(mask.raw_dim());
    let shape = mask.shape().to_vec();
    // flood the outside from every border voxel
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let border =
                    z == 0 || y == 0 || x == 0 || z == shape[0] - 1 || y == shape[1] - 1 || x == shape[2] - 1;
                let p = [z, y, x];
                if border && complement[p] == 1 && labels[p] == 0 {
                    flood(&complement, &mut labels, p, 1);
                }
            }
        }
    }
    let mut out = mask.clone();
    ndarray::Zip::from(&mut out)
        .and(&complement)
        .and(&labels)
        .for_each(|o, c, l| {
            if *c == 1 && *l == 0 {
                *o = 1;
            }
        });
    out
}

/// Remove 6-connected components below `min_voxels`.
pub fn drop_small_components(mask: &Array3<u8>, min_voxels: usize) -> Array3<u8> {
    let mut labels = Array3::<u32>::zeros(mask.raw_dim());
    let mut keep = vec![false];
    let mut next = 1u32;
    let shape = mask.shape().to_vec();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z, y, x];
                if mask[p] == 1 && labels[p] == 0 {
                    let count = flood(mask, &mut labels, p, next);
                    keep.push(count >= min_voxels);
                    next += 1;
                }
            }
        }
    }
    labels.mapv(|l| u8::from(l != 0 && keep[l as usize]))
}

/// Exact squared Euclidean distance transform (separable parabola method).
/// Distances are measured to the nearest foreground voxel.
pub fn distance_squared(mask: &Array3<u8>) -> Array3<f64> {
    const INF: f64 = 1e18;
    let shape = mask.shape().to_vec();
    let mut dist = mask.mapv(|v| if v == 1 { 0.0 } else { INF });
    for axis in 0..3 {
        let mut f = vec![0.0f64; shape[axis]];
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in f.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            let out = dt_1d(&f);
            for (o, v) in lane.iter_mut().zip(out) {
                *o = v;
            }
        }
    }
    dist
}

/// 1D squared distance transform of a sampled function (Felzenszwalb).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    // degenerate only when f values are -inf; cannot happen
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut out = vec![0.0f64; n];
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    out
}

/// Grayscale closing of a binary mask with a non-flat ball of radius `r` and
/// quadratic height profile h(s) = height * (1 - |s|^2 / r^2).
///
/// The dilation of a binary image by such an element depends only on the
/// distance to the nearest foreground voxel, so it reduces to the exact
/// distance transform; the erosion is evaluated by a direct ball scan.
pub fn grayscale_close(mask: &Array3<u8>, r: f64, height: f64) -> Array3<f64> {
    let r2 = r * r;
    let d2 = distance_squared(mask);
    // dilation: 1 + h(d) within reach of the mask, h(0) elsewhere
    let dil = d2.mapv(|d| {
        if d <= r2 {
            1.0 + height * (1.0 - d / r2)
        } else {
            height
        }
    });

    // precompute ball offsets with their heights
    let ri = r.floor() as isize;
    let mut offsets: Vec<([isize; 3], f64)> = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let dd = (dz * dz + dy * dy + dx * dx) as f64;
                if dd <= r2 {
                    offsets.push(([dz, dy, dx], height * (1.0 - dd / r2)));
                }
            }
        }
    }

    let shape = mask.shape().to_vec();
    let (dd, hh, ww) = (shape[0] as isize, shape[1] as isize, shape[2] as isize);
    let dil_slice = dil.as_slice().expect("contiguous");
    let mut out = Array3::<f64>::zeros(mask.raw_dim());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let mut m = f64::INFINITY;
                for ([dz, dy, dx], h) in &offsets {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    // outside the grid the dilation is at most `height`
                    let v = if nz < 0 || nz >= dd || ny < 0 || ny >= hh || nx < 0 || nx >= ww {
                        height
                    } else {
                        dil_slice[((nz * hh + ny) * ww + nx) as usize]
                    };
                    let e = v - h;
                    if e < m {
                        m = e;
                    }
                }
                out[[z, y, x]] = m;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball_mask(shape: (usize, usize, usize), center: [f64; 3], r: f64) -> Array3<u8> {
        Array3::from_shape_fn(shape, |(z, y, x)| {
            let d = (z as f64 - center[0]).powi(2)
                + (y as f64 - center[1]).powi(2)
                + (x as f64 - center[2]).powi(2);
            u8::from(d.sqrt() <= r)
        })
    }

    #[test]
    fn otsu_rejects_constant_volume() {
        let v = Array3::<f32>::from_elem((8, 8, 8), -1000.0);
        assert!(matches!(
            otsu_threshold(&v, &LungMaskParams::default()),
            Err(Error::DegenerateHistogram)
        ));
    }

    #[test]
    fn otsu_separates_bimodal_volume() {
        let v = Array3::from_shape_fn((8, 8, 8), |(z, _, _)| {
            if z < 4 {
                -950.0 + (z as f32)
            } else {
                30.0 + (z as f32)
            }
        });
        let t = otsu_threshold(&v, &LungMaskParams::default()).unwrap();
        // any cut strictly between the two clusters is a correct Otsu result
        assert!(t > -947.0 && t < 30.0, "threshold {t}");
    }

    #[test]
    fn largest_component_and_hole_fill() {
        let mut m = Array3::<u8>::zeros((12, 12, 12));
        // big blob with an internal hole
        for z in 2..10 {
            for y in 2..10 {
                for x in 2..10 {
                    m[[z, y, x]] = 1;
                }
            }
        }
        m[[6, 6, 6]] = 0;
        // small separate speck
        m[[0, 0, 0]] = 1;
        let big = largest_component(&m);
        assert_eq!(big[[0, 0, 0]], 0);
        assert_eq!(big[[3, 3, 3]], 1);
        let filled = fill_holes(&big);
        assert_eq!(filled[[6, 6, 6]], 1);
        // exterior remains empty
        assert_eq!(filled[[1, 1, 1]], 0);
    }

    #[test]
    fn drop_small_components_respects_threshold() {
        let mut m = Array3::<u8>::zeros((10, 10, 10));
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    m[[z, y, x]] = 1; // 64 voxels
                }
            }
        }
        m[[8, 8, 8]] = 1; // singleton
        let d = drop_small_components(&m, 64);
        assert_eq!(d[[2, 2, 2]], 1);
        assert_eq!(d[[8, 8, 8]], 0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let m = ball_mask((9, 9, 9), [4.0, 4.0, 4.0], 2.0);
        let d2 = distance_squared(&m);
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let mut best = f64::INFINITY;
                    for bz in 0..9 {
                        for by in 0..9 {
                            for bx in 0..9 {
                                if m[[bz, by, bx]] == 1 {
                                    let dd = ((z as f64 - bz as f64).powi(2)
                                        + (y as f64 - by as f64).powi(2)
                                        + (x as f64 - bx as f64).powi(2))
                                        as f64;
                                    best = best.min(dd);
                                }
                            }
                        }
                    }
                    assert!(
                        (d2[[z, y, x]] - best).abs() < 1e-9,
                        "at {z},{y},{x}: {} vs {}",
                        d2[[z, y, x]],
                        best
                    );
                }
            }
        }
    }

    #[test]
    fn closing_preserves_interior_and_exterior() {
        let m = ball_mask((16, 16, 16), [8.0, 8.0, 8.0], 4.0);
        let closed = grayscale_close(&m, 3.0, 0.5);
        let binary = closed.mapv(|v| u8::from(v >= 0.5));
        // interior stays, far exterior stays empty, and closing only adds
        assert_eq!(binary[[8, 8, 8]], 1);
        assert_eq!(binary[[0, 0, 0]], 0);
        for (b, orig) in binary.iter().zip(m.iter()) {
            if *orig == 1 {
                assert_eq!(*b, 1);
            }
        }
    }

    #[test]
    fn closing_fills_a_notch() {
        // half-space cavity with a bump carved out of it (wall-attached blob)
        let mut m = Array3::<u8>::zeros((20, 20, 20));
        for z in 0..20 {
            for y in 0..10 {
                for x in 0..20 {
                    m[[z, y, x]] = 1;
                }
            }
        }
        // carve a hemispherical notch of radius 3 at the flat wall
        for z in 0..20 {
            for y in 0..20 {
                for x in 0..20 {
                    let d = ((z as f64 - 10.0).powi(2)
                        + (y as f64 - 9.0).powi(2)
                        + (x as f64 - 10.0).powi(2))
                    .sqrt();
                    if d <= 3.0 {
                        m[[z, y, x]] = 0;
                    }
                }
            }
        }
        let closed = grayscale_close(&m, 5.0, 0.5);
        let binary = closed.mapv(|v| u8::from(v >= 0.5));
        // the notch center is recovered
        assert_eq!(binary[[10, 8, 10]], 1, "notch not recovered by closing");
    }
}
