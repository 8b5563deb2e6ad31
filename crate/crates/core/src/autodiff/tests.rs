//! Finite-difference checks for every op, run on small random tensors in f64.

use super::*;
use ndarray::IxDyn;
use rand::Rng;

use crate::util::rng_from;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Compare analytic gradients of `build` w.r.t. its single input against
/// central differences at every element.
fn check_grad<F>(input: Tensor<f64>, build: F, tol: f64)
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let loss = build(&mut g, x);
    assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
    let grads = g.backward(loss);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.raw_dim()));

    let h = 1e-5;
    for idx in 0..input.len() {
        let mut plus = input.clone();
        plus.as_slice_mut().unwrap()[idx] += h;
        let mut minus = input.clone();
        minus.as_slice_mut().unwrap()[idx] -= h;
        let eval = |inp: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.param(inp);
            let loss = build(&mut g, x);
            g.scalar(loss)
        };
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (a - numeric).abs() / denom < tol,
            "grad mismatch at {idx}: analytic {a}, numeric {numeric}"
        );
    }
}

/// A generic scalar-izing head so map-valued ops can be checked: weights the
/// output with fixed pseudo-random coefficients and sums.
fn spread_loss(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let shape: Vec<usize> = g.value(y).shape().to_vec();
    let coeff = g.constant(rand_tensor(&shape, seed));
    let prod = g.mul(y, coeff);
    g.sum(prod)
}

#[test]
fn conv3d_gradients() {
    for (stride, pad, dilation) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 1)] {
        let spec = ConvSpec {
            cin: 2,
            cout: 3,
            kernel: 3,
            stride,
            pad,
            dilation,
        };
        let x = rand_tensor(&[2, 6, 6, 6], 1);
        let w = rand_tensor(&[3, 2, 3, 3, 3], 2);
        let b = rand_tensor(&[3], 3);

        // wrt input
        check_grad(x.clone(), |g, xi| {
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            let y = g.conv3d(xi, wi, Some(bi), spec);
            spread_loss(g, y, 40)
        }, 1e-6);
        // wrt weights
        check_grad(w.clone(), |g, wi| {
            let xi = g.constant(x.clone());
            let bi = g.constant(b.clone());
            let y = g.conv3d(xi, wi, Some(bi), spec);
            spread_loss(g, y, 41)
        }, 1e-6);
        // wrt bias
        check_grad(b.clone(), |g, bi| {
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let y = g.conv3d(xi, wi, Some(bi), spec);
            spread_loss(g, y, 42)
        }, 1e-6);
    }
}

#[test]
fn group_norm_gradients() {
    let x = rand_tensor(&[4, 3, 3, 3], 7);
    let gamma = rand_tensor(&[4], 8);
    let beta = rand_tensor(&[4], 9);
    check_grad(x.clone(), |g, xi| {
        let gm = g.constant(gamma.clone());
        let bt = g.constant(beta.clone());
        let y = g.group_norm(xi, gm, bt, 2);
        spread_loss(g, y, 50)
    }, 1e-5);
    check_grad(gamma.clone(), |g, gm| {
        let xi = g.constant(x.clone());
        let bt = g.constant(beta.clone());
        let y = g.group_norm(xi, gm, bt, 2);
        spread_loss(g, y, 51)
    }, 1e-6);
    check_grad(beta.clone(), |g, bt| {
        let xi = g.constant(x.clone());
        let gm = g.constant(gamma.clone());
        let y = g.group_norm(xi, gm, bt, 2);
        spread_loss(g, y, 52)
    }, 1e-6);
}

#[test]
fn pointwise_and_reduction_gradients() {
    let x = rand_tensor(&[3, 4], 11).mapv(|v| v + 2.5); // keep log/div away from 0
    check_grad(x.clone(), |g, xi| {
        let y = g.log(xi);
        spread_loss(g, y, 60)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let y = g.sigmoid(xi);
        spread_loss(g, y, 61)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let y = g.affine(xi, -1.7, 0.3);
        spread_loss(g, y, 62)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let c = g.constant(rand_tensor(&[3, 4], 12).mapv(|v| v + 3.0));
        let y = g.div(xi, c);
        spread_loss(g, y, 63)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let c = g.constant(rand_tensor(&[3, 4], 13));
        let y = g.mul(xi, c);
        let z = g.sub(y, xi);
        spread_loss(g, z, 64)
    }, 1e-6);

    let v = rand_tensor(&[5], 14);
    check_grad(v.clone(), |g, xi| {
        let c = g.constant(rand_tensor(&[5], 15));
        g.dot(xi, c)
    }, 1e-6);

    let f = rand_tensor(&[3, 2, 2, 2], 16);
    check_grad(f.clone(), |g, xi| {
        let y = g.gap(xi);
        spread_loss(g, y, 65)
    }, 1e-6);
    check_grad(f.clone(), |g, xi| {
        let w = g.constant(rand_tensor(&[3], 17));
        let y = g.channel_weighted_sum(xi, w);
        spread_loss(g, y, 66)
    }, 1e-6);
    let w = rand_tensor(&[3], 18);
    check_grad(w.clone(), |g, wi| {
        let fc = g.constant(f.clone());
        let y = g.channel_weighted_sum(fc, wi);
        spread_loss(g, y, 67)
    }, 1e-6);
}

#[test]
fn relu_abs_clamp_gradients_away_from_kinks() {
    // shift values away from the non-differentiable points
    let x = rand_tensor(&[4, 4], 19).mapv(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
    check_grad(x.clone(), |g, xi| {
        let y = g.relu(xi);
        spread_loss(g, y, 70)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let y = g.abs(xi);
        spread_loss(g, y, 71)
    }, 1e-6);
    check_grad(x.clone(), |g, xi| {
        let y = g.clamp(xi, -0.8, 0.8);
        spread_loss(g, y, 72)
    }, 1e-4);
}

#[test]
fn min_max_norm_gradient_including_extremes() {
    let x = rand_tensor(&[3, 3, 3], 23);
    check_grad(x.clone(), |g, xi| {
        let y = g.min_max_norm(xi);
        spread_loss(g, y, 80)
    }, 1e-5);
}

#[test]
fn min_max_norm_constant_input_is_zero_with_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_elem(IxDyn(&[2, 2]), 3.5));
    let y = g.min_max_norm(x);
    assert!(g.value(y).iter().all(|v| *v == 0.0));
    let s = g.sum(y);
    let grads = g.backward(s);
    assert!(grads.get(x).is_none() || grads.get(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn scale_by_gradients() {
    let x = rand_tensor(&[2, 3], 29);
    check_grad(x.clone(), |g, xi| {
        let s = g.constant_scalar(0.7);
        let y = g.scale_by(xi, s);
        spread_loss(g, y, 90)
    }, 1e-6);
    let s0 = rand_tensor(&[], 30);
    check_grad(s0, |g, si| {
        let xc = g.constant(rand_tensor(&[2, 3], 31));
        let y = g.scale_by(xc, si);
        spread_loss(g, y, 91)
    }, 1e-6);
}

#[test]
fn shared_node_accumulates_both_paths() {
    // loss = sum(x * x) must produce gradient 2x through the duplicate-parent path
    let x = rand_tensor(&[4], 33);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let y = g.mul(xi, xi);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    let got = grads.get(xi).unwrap();
    for (gv, xv) in got.iter().zip(x.iter()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_direct_computation() {
    // 1x1x1 kernel, stride 1: conv is a per-voxel channel mix
    let spec = ConvSpec {
        cin: 2,
        cout: 1,
        kernel: 1,
        stride: 1,
        pad: 0,
        dilation: 1,
    };
    let x = rand_tensor(&[2, 3, 3, 3], 35);
    let w = rand_tensor(&[1, 2, 1, 1, 1], 36);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(w.clone());
    let y = g.conv3d(xi, wi, None, spec);
    let yv = g.value(y);
    for z in 0..3 {
        for r in 0..3 {
            for c in 0..3 {
                let want = w[[0, 0, 0, 0, 0]] * x[[0, z, r, c]] + w[[0, 1, 0, 0, 0]] * x[[1, z, r, c]];
                let got = yv[[0, z, r, c]];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}
