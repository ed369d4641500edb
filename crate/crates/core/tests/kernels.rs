use proptest::prelude::*;
use spikelab::numerics::{
    conv2d, conv2d_backward, dense, dense_backward, pool2d, pool2d_backward, pool2d_forward, sample_gaussian, PoolKind,
    RngStream, Tensor,
};

fn gauss(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    sample_gaussian(rng, shape, 0.0, 1.0).unwrap()
}

/// Direct seven-loop convolution.
fn conv_reference(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, oh, ow], out).unwrap()
}

fn dense_reference(x: &Tensor, wt: &Tensor, bias: &Tensor) -> Tensor {
    let [b, n] = x.shape().try_into().unwrap();
    let m = wt.shape()[0];
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for o in 0..m {
            out[i * m + o] = bias.data()[o] + (0..n).map(|j| wt.data()[o * n + j] * x.data()[i * n + j]).sum::<f64>();
        }
    }
    Tensor::new(&[b, m], out).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

fn pairing(out: &Tensor, g: &Tensor) -> f64 {
    out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `f` at `x` in every coordinate.
fn numeric_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
        .collect()
}

fn assert_grad(analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale > 1e-6 {
            assert!((a - n).abs() / scale < 1e-6, "analytic {a} vs numeric {n}");
        } else {
            assert!((a - n).abs() < 1e-10, "analytic {a} vs numeric {n}");
        }
    }
}

const EPS: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_reference_and_finite_differences(
        seed in any::<u64>(),
        b in 1usize..3, cin in 1usize..3, cout in 1usize..3,
        h in 3usize..7, w in 3usize..7, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = RngStream::new(seed, 0);
        let x = gauss(&mut rng, &[b, cin, h, w]);
        let kern = gauss(&mut rng, &[cout, cin, k, k]);
        let bias = gauss(&mut rng, &[cout]);
        let out = conv2d(&x, &kern, &bias, stride, pad).unwrap();
        assert_close(&out, &conv_reference(&x, &kern, &bias, stride, pad), 1e-12);

        let g = gauss(&mut rng, out.shape());
        let grads = conv2d_backward(&x, &kern, &g, stride, pad, true).unwrap();
        let loss = |x: &Tensor, k: &Tensor, bi: &Tensor| pairing(&conv2d(x, k, bi, stride, pad).unwrap(), &g);
        assert_grad(grads.input.as_ref().unwrap().data(), &numeric_grad(&x, EPS, |p| loss(p, &kern, &bias)));
        assert_grad(grads.kernel.data(), &numeric_grad(&kern, EPS, |p| loss(&x, p, &bias)));
        assert_grad(grads.bias.data(), &numeric_grad(&bias, EPS, |p| loss(&x, &kern, p)));
    }

    #[test]
    fn dense_matches_reference_and_finite_differences(seed in any::<u64>(), b in 1usize..4, n in 1usize..7, m in 1usize..6) {
        let mut rng = RngStream::new(seed, 1);
        let x = gauss(&mut rng, &[b, n]);
        let wt = gauss(&mut rng, &[m, n]);
        let bias = gauss(&mut rng, &[m]);
        let out = dense(&x, &wt, &bias).unwrap();
        assert_close(&out, &dense_reference(&x, &wt, &bias), 1e-12);

        let g = gauss(&mut rng, out.shape());
        let grads = dense_backward(&x, &wt, &g, true).unwrap();
        let loss = |x: &Tensor, w: &Tensor, bi: &Tensor| pairing(&dense(x, w, bi).unwrap(), &g);
        assert_grad(grads.input.as_ref().unwrap().data(), &numeric_grad(&x, EPS, |p| loss(p, &wt, &bias)));
        assert_grad(grads.weight.data(), &numeric_grad(&wt, EPS, |p| loss(&x, p, &bias)));
        assert_grad(grads.bias.data(), &numeric_grad(&bias, EPS, |p| loss(&x, &wt, p)));
    }

    #[test]
    fn pool_matches_finite_differences(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, cells in 1usize..4, size in 1usize..4, max in any::<bool>()) {
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let side = cells * size;
        let mut rng = RngStream::new(seed, 2);
        let x = gauss(&mut rng, &[b, c, side, side]);
        let (out, trace) = pool2d_forward(&x, kind, size).unwrap();
        let g = gauss(&mut rng, out.shape());
        let analytic = pool2d_backward(&trace, &g).unwrap();
        assert_grad(analytic.data(), &numeric_grad(&x, EPS, |p| pairing(&pool2d(p, kind, size).unwrap(), &g)));
    }

    #[test]
    fn kernels_are_pure(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 3);
        let x = gauss(&mut rng, &[2, 2, 5, 5]);
        let k = gauss(&mut rng, &[3, 2, 3, 3]);
        let bias = gauss(&mut rng, &[3]);
        let a = conv2d(&x, &k, &bias, 1, 1).unwrap();
        let b = conv2d(&x, &k, &bias, 1, 1).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

#[test]
fn unit_kernel_scales_exactly() {
    let mut rng = RngStream::new(9, 0);
    let x = gauss(&mut rng, &[2, 1, 4, 5]);
    let out = conv2d(&x, &Tensor::filled(&[1, 1, 1, 1], 0.75), &Tensor::zeros(&[1]), 1, 0).unwrap();
    for (o, v) in out.data().iter().zip(x.data()) {
        assert_eq!(*o, 0.75 * v);
    }
}
