//! 3D convolution via im2col + GEMM. Kernels are cubic; stride, padding and
//! dilation are isotropic, which covers every layer of the synergic model.

use ndarray::IxDyn;

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

/// Forward pass. `x`: [cin, D, H, W]; `w`: [cout, cin, k, k, k].
/// Returns the output [cout, Do, Ho, Wo] and the cached im2col matrix.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<Tensor<T>>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>) {
    let sh = x.shape();
    assert_eq!(sh[0], spec.cin, "input channels mismatch");
    let (d, h, wd) = (sh[1], sh[2], sh[3]);
    let (od, oh, ow) = (spec.out_len(d), spec.out_len(h), spec.out_len(wd));
    let n = od * oh * ow;
    let k3 = spec.kernel.pow(3);
    let kk = spec.cin * k3;

    let xs = x.as_slice().expect("contiguous input");
    let mut cols = vec![T::zero(); kk * n];
    im2col(xs, &mut cols, spec, [d, h, wd], [od, oh, ow]);

    let ws = w.as_slice().expect("contiguous weights");
    let mut out = vec![T::zero(); spec.cout * n];
    unsafe {
        T::gemm(
            spec.cout,
            kk,
            n,
            T::one(),
            ws.as_ptr(),
            kk as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    if let Some(b) = bias {
        let bs = b.as_slice().expect("contiguous bias");
        for c in 0..spec.cout {
            let bc = bs[c];
            for v in &mut out[c * n..(c + 1) * n] {
                *v = *v + bc;
            }
        }
    }
    let value = Tensor::from_shape_vec(IxDyn(&[spec.cout, od, oh, ow]), out).unwrap();
    let cols = Tensor::from_shape_vec(IxDyn(&[kk, n]), cols).unwrap();
    (value, cols)
}

/// Backward pass: gradients w.r.t. input, weights and bias. `in_dims` are
/// the spatial dims of the forward input (not recoverable from the output
/// extent when striding).
pub fn backward<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    cols: &Tensor<T>,
    spec: &ConvSpec,
    in_dims: [usize; 3],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let gsh = gout.shape();
    let (od, oh, ow) = (gsh[1], gsh[2], gsh[3]);
    let n = od * oh * ow;
    let k3 = spec.kernel.pow(3);
    let kk = spec.cin * k3;
    let gs = gout.as_slice().expect("contiguous grad");
    let cs = cols.as_slice().expect("contiguous cols");
    let ws = w.as_slice().expect("contiguous weights");

    let dw = if need_dw {
        // dW[cout, kk] = g[cout, n] * cols^T[n, kk]
        let mut dw = vec![T::zero(); spec.cout * kk];
        unsafe {
            T::gemm(
                spec.cout,
                n,
                kk,
                T::one(),
                gs.as_ptr(),
                n as isize,
                1,
                cs.as_ptr(),
                1,
                n as isize,
                T::zero(),
                dw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        Some(Tensor::from_shape_vec(w.raw_dim(), dw).unwrap())
    } else {
        None
    };

    let db = if need_db {
        let mut db = vec![T::zero(); spec.cout];
        for c in 0..spec.cout {
            let mut acc = T::zero();
            for v in &gs[c * n..(c + 1) * n] {
                acc = acc + *v;
            }
            db[c] = acc;
        }
        Some(Tensor::from_shape_vec(IxDyn(&[spec.cout]), db).unwrap())
    } else {
        None
    };

    let dx = if need_dx {
        // dcols[kk, n] = W^T[kk, cout] * g[cout, n]
        let mut dcols = vec![T::zero(); kk * n];
        unsafe {
            T::gemm(
                kk,
                spec.cout,
                n,
                T::one(),
                ws.as_ptr(),
                1,
                kk as isize,
                gs.as_ptr(),
                n as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let [d, h, wd] = in_dims;
        let mut dx = vec![T::zero(); spec.cin * d * h * wd];
        col2im(&dcols, &mut dx, spec, [d, h, wd], [od, oh, ow]);
        Some(Tensor::from_shape_vec(IxDyn(&[spec.cin, d, h, wd]), dx).unwrap())
    } else {
        None
    };

    (dx, dw, db)
}

fn im2col<T: Scalar>(
    x: &[T],
    cols: &mut [T],
    spec: &ConvSpec,
    dims: [usize; 3],
    odims: [usize; 3],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let n = od * oh * ow;
    let k = spec.kernel;
    let (s, p, dl) = (spec.stride as isize, spec.pad as isize, spec.dilation as isize);
    let mut row = 0usize;
    for ci in 0..spec.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (ozk, oyk, oxk) = (kz as isize * dl - p, ky as isize * dl - p, kx as isize * dl - p);
                    for oz in 0..od {
                        let iz = oz as isize * s + ozk;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + oyk;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base_in = (iz as usize * h + iy as usize) * w;
                            let base_out = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + oxk;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dst[base_out + ox] = xc[base_in + ix as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    dcols: &[T],
    dx: &mut [T],
    spec: &ConvSpec,
    dims: [usize; 3],
    odims: [usize; 3],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let n = od * oh * ow;
    let k = spec.kernel;
    let (s, p, dl) = (spec.stride as isize, spec.pad as isize, spec.dilation as isize);
    let mut row = 0usize;
    for ci in 0..spec.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &dcols[row * n..(row + 1) * n];
                    let (ozk, oyk, oxk) = (kz as isize * dl - p, ky as isize * dl - p, kx as isize * dl - p);
                    for oz in 0..od {
                        let iz = oz as isize * s + ozk;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + oyk;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base_in = (iz as usize * h + iy as usize) * w;
                            let base_out = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + oxk;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                xc[base_in + ix as usize] =
                                    xc[base_in + ix as usize] + src[base_out + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
