mod common;

use std::sync::Arc;

use common::*;
use eegfmri::tensor::ScanMode;
use eegfmri::{Error, Tape64, Tensor64};
use proptest::prelude::*;

fn naive_conv(x: &Tensor64, k: &Tensor64, stride: (usize, usize), pad: (usize, usize)) -> (Vec<usize>, Vec<f64>) {
    let (xs, ks) = (x.shape(), k.shape());
    let oh = (xs[2] + 2 * pad.0 - ks[2]) / stride.0 + 1;
    let ow = (xs[3] + 2 * pad.1 - ks[3]) / stride.1 + 1;
    let mut out = Vec::new();
    for n in 0..xs[0] {
        for o in 0..ks[0] {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..xs[1] {
                        for a in 0..ks[2] {
                            for b in 0..ks[3] {
                                let y = (i * stride.0 + a) as isize - pad.0 as isize;
                                let z = (j * stride.1 + b) as isize - pad.1 as isize;
                                if y >= 0 && z >= 0 && (y as usize) < xs[2] && (z as usize) < xs[3] {
                                    acc += x.get(&[n, c, y as usize, z as usize]) * k.get(&[o, c, a, b]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![xs[0], ks[0], oh, ow], out)
}

#[test]
fn conv2d_examples() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let k = t.constant(Tensor64::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(x, k, (1, 1), (0, 0)).unwrap();
    assert_eq!(t.value(y).to_vec(), vec![1., 2., 3., 4.]);

    let x = t.constant(Tensor64::ones(&[1, 1, 3, 3]));
    let k = t.constant(Tensor64::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, k, (1, 1), (0, 0)).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 9.0);

    let mut r = rng(1);
    let xv = random(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let kv = random(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let (x, k) = (t.constant(xv.clone()), t.constant(kv.clone()));
    let y = t.conv2d(x, k, (1, 1), (1, 1)).unwrap();
    let (shape, want) = naive_conv(&xv, &kv, (1, 1), (1, 1));
    assert_eq!(t.value(y).shape(), &[2, 4, 8, 8]);
    assert_eq!(shape, vec![2, 4, 8, 8]);
    assert_close(&t.value(y).to_vec(), &want, 1e-12);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::zeros(&[1, 2, 4, 4]));
    let k = t.constant(Tensor64::zeros(&[1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, k, (1, 1), (0, 0)), Err(Error::Dimension(_))));
    let k = t.constant(Tensor64::zeros(&[1, 2, 7, 7]));
    assert!(t.conv2d(x, k, (1, 1), (1, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn conv2d_matches_loop_oracle(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 1usize..9, w in 1usize..9, kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3, ph in 0usize..2, pw in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(kh <= h + 2 * ph && kw <= w + 2 * pw);
        let mut r = rng(seed);
        let xv = random(&[n, c, h, w], -1.0, 1.0, &mut r);
        let kv = random(&[o, c, kh, kw], -1.0, 1.0, &mut r);
        let mut t = Tape64::new();
        let (x, k) = (t.constant(xv.clone()), t.constant(kv.clone()));
        let y = t.conv2d(x, k, (sh, sw), (ph, pw)).unwrap();
        let (shape, want) = naive_conv(&xv, &kv, (sh, sw), (ph, pw));
        prop_assert_eq!(t.value(y).shape(), shape.as_slice());
        for (a, b) in t.value(y).to_vec().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ops_stay_finite_on_bounded_inputs(vals in prop::collection::vec(-1e3f64..1e3, 8)) {
        let mut t = Tape64::new();
        let x = t.param(Tensor64::new(&[2, 4], vals).unwrap());
        let g = t.param(Tensor64::ones(&[4]));
        let b = t.param(Tensor64::zeros(&[4]));
        let a = t.silu(x).unwrap();
        let s = t.sigmoid(x).unwrap();
        let sp = t.softplus(x).unwrap();
        let sm = t.softmax(x, 1).unwrap();
        let ln = t.layer_norm(x, g, b, 1e-5).unwrap();
        let parts = [a, s, sp, sm, ln];
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = t.add(acc, *p).unwrap();
        }
        let m = t.mean(acc).unwrap();
        t.backward(m).unwrap();
        prop_assert!(t.grad(x).unwrap().is_finite());
    }
}

#[test]
fn linear_examples() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let eye = t.constant(Tensor64::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let zb = t.constant(Tensor64::zeros(&[3]));
    let y = t.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(t.value(y).to_vec(), vec![1., 2., 3.]);

    let w0 = t.constant(Tensor64::zeros(&[1, 3]));
    let b5 = t.constant(Tensor64::full(&[1], 5.0));
    let y = t.linear(x, w0, Some(b5)).unwrap();
    assert_eq!(t.value(y).to_vec(), vec![5.0]);

    let mut r = rng(3);
    let xv = random(&[4, 8], -1.0, 1.0, &mut r);
    let wv = random(&[3, 8], -1.0, 1.0, &mut r);
    let (x, w) = (t.constant(xv.clone()), t.constant(wv.clone()));
    let y = t.linear(x, w, None).unwrap();
    let mut want = Vec::new();
    for i in 0..4 {
        for o in 0..3 {
            want.push((0..8).map(|k| xv.get(&[i, k]) * wv.get(&[o, k])).sum::<f64>());
        }
    }
    assert_close(&t.value(y).to_vec(), &want, 1e-12);

    let bad = t.constant(Tensor64::zeros(&[3, 7]));
    assert!(matches!(t.linear(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape64::new();
    let g = t.constant(Tensor64::ones(&[3]));
    let b = t.constant(Tensor64::zeros(&[3]));
    let x = t.constant(Tensor64::full(&[3], 3.0));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).to_vec(), vec![0.0; 3]);

    let g2 = t.constant(Tensor64::ones(&[2]));
    let b2 = t.constant(Tensor64::zeros(&[2]));
    let x = t.constant(Tensor64::from_f64(&[2], &[1., -1.]).unwrap());
    let y = t.layer_norm(x, g2, b2, 1e-5).unwrap();
    assert_close(&t.value(y).to_vec(), &[1.0, -1.0], 1e-5);

    let g16 = t.constant(Tensor64::ones(&[16]));
    let b16 = t.constant(Tensor64::zeros(&[16]));
    let x = t.constant(random(&[16], -5.0, 5.0, &mut rng(4)));
    let y = t.layer_norm(x, g16, b16, 1e-5).unwrap();
    let y = t.value(y).to_vec();
    let mean = y.iter().sum::<f64>() / 16.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-3);
}

#[test]
fn silu_examples() {
    let mut t = Tape64::new();
    let x = t.param(Tensor64::from_f64(&[2], &[0.0, 20.0]).unwrap());
    let y = t.silu(x).unwrap();
    let v = t.value(y).to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 20.0).abs() < 1e-6);
    let f = |x: f64| x / (1.0 + (-x).exp());
    let fd = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap().to_vec()[0];
    assert!((g - 0.5).abs() < 1e-12);
    assert!((fd - 0.5).abs() < 1e-9);
}

#[test]
fn softmax_examples() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::ones(&[3]));
    let y = t.softmax(x, 0).unwrap();
    assert_close(&t.value(y).to_vec(), &[1.0 / 3.0; 3], 1e-15);

    let x = t.constant(Tensor64::from_f64(&[2], &[1000.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_close(&t.value(y).to_vec(), &[1.0, 0.0], 1e-300);

    let xv = random(&[8], -3.0, 3.0, &mut rng(5));
    let x = t.constant(xv.clone());
    let y = t.softmax(x, 0).unwrap();
    let e: Vec<f64> = xv.to_vec().iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    let want: Vec<f64> = e.iter().map(|v| v / z).collect();
    assert_close(&t.value(y).to_vec(), &want, 1e-12);

    let xv = random(&[3, 4, 5], -3.0, 3.0, &mut rng(6));
    let x = t.constant(xv);
    let y = t.softmax(x, 1).unwrap();
    let v = t.value(y).clone();
    for a in 0..3 {
        for c in 0..5 {
            let s: f64 = (0..4).map(|b| v.get(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape64::new();
    let x = t.param(Tensor64::scalar(3.0));
    let y = t.square(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);

    let mut t = Tape64::new();
    let x = t.param(Tensor64::scalar(2.0));
    let y = t.param(Tensor64::scalar(5.0));
    let p = t.mul(x, y).unwrap();
    t.backward(p).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 5.0);
    assert_eq!(t.grad(y).unwrap().item(), 2.0);
}

#[test]
fn backward_on_vector_needs_seed() {
    let mut t = Tape64::new();
    let x = t.param(Tensor64::ones(&[3]));
    let y = t.exp(x).unwrap();
    assert!(matches!(t.backward(y), Err(Error::Usage(_))));
    t.backward_with_seed(y, &Tensor64::ones(&[3])).unwrap();
    assert_close(&t.grad(x).unwrap().to_vec(), &[1f64.exp(); 3], 1e-15);
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut r = rng(8);
    let xv = random(&[5], -1.0, 1.0, &mut r);
    let build = |t: &mut Tape64| {
        let x = t.param(xv.clone());
        let f = t.silu(x).unwrap();
        let f = t.sum(f).unwrap();
        let e = t.exp(x).unwrap();
        let g = t.mean(e).unwrap();
        (x, f, g)
    };
    let mut t = Tape64::new();
    let (x, f, g) = build(&mut t);
    let h = t.add(f, g).unwrap();
    t.backward(h).unwrap();
    let joint = t.grad(x).unwrap().to_vec();

    let mut t = Tape64::new();
    let (x, f, g) = build(&mut t);
    t.backward(f).unwrap();
    t.backward(g).unwrap();
    assert_close(&t.grad(x).unwrap().to_vec(), &joint, 1e-15);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn permute_shares_storage_and_backprops() {
    let mut t = Tape64::new();
    let xv = random(&[2, 3, 4], -1.0, 1.0, &mut rng(9));
    let x = t.param(xv.clone());
    let p = t.permute(x, &[2, 0, 1]).unwrap();
    assert!(!t.value(p).is_contiguous());
    assert_eq!(t.value(p).get(&[3, 1, 2]), xv.get(&[1, 2, 3]));
}

/// Central-difference check of one differentiable op family over ten seeds.
fn check_op(name: &str, shapes: &[&[usize]], f: &Graph<'_>) {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let inputs: Vec<Tensor64> = shapes.iter().map(|s| random(s, -1.0, 1.0, &mut r)).collect();
        let err = grad_check(&inputs, f);
        assert!(err < FD_TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn gradient_elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], &|t, v| {
        let y = t.add(v[0], v[1])?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    check_op("sub", &[&[5], &[5]], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        let y = t.exp(y)?;
        t.mean(y)
    });
    check_op("mul", &[&[2, 3], &[2, 3]], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        let y = t.sigmoid(y)?;
        t.sum(y)
    });
    check_op("div", &[&[4], &[4]], &|t, v| {
        let d = t.add_scalar(v[1], 3.0)?;
        let y = t.div(v[0], d)?;
        let y = t.square(y)?;
        t.sum(y)
    });
    check_op("scale/log", &[&[4]], &|t, v| {
        let e = t.exp(v[0])?;
        let l = t.log(e)?;
        let y = t.scale(l, -2.5)?;
        let y = t.mul(y, v[0])?;
        t.sum(y)
    });
    check_op("silu/softplus", &[&[6]], &|t, v| {
        let a = t.silu(v[0])?;
        let b = t.softplus(v[0])?;
        let y = t.mul(a, b)?;
        t.sum(y)
    });
}

#[test]
fn gradient_shape_ops() {
    check_op("concat/slice", &[&[2, 3, 2], &[2, 1, 2]], &|t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        let y = t.mul(s, s)?;
        let y = t.silu(y)?;
        t.sum(y)
    });
    check_op("pad/reshape/permute", &[&[2, 3, 4]], &|t, v| {
        let p = t.pad(v[0], &[(0, 1), (1, 0), (2, 1)])?;
        let q = t.permute(p, &[2, 0, 1])?;
        let r = t.reshape(q, &[7, 12])?;
        let w = t.constant(Tensor64::new(&[7, 12], (0..84).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let y = t.mul(r, w)?;
        let y = t.exp(y)?;
        t.sum(y)
    });
    check_op("gather/add_bias", &[&[4, 3], &[3]], &|t, v| {
        let g = t.gather(v[0], 0, Arc::new(vec![3, 0, 0, 2]))?;
        let b = t.add_bias(g, v[1], 1)?;
        let y = t.square(b)?;
        t.sum(y)
    });
}

#[test]
fn gradient_layer_ops() {
    check_op("conv2d", &[&[2, 2, 5, 4], &[3, 2, 3, 2]], &|t, v| {
        let y = t.conv2d(v[0], v[1], (2, 1), (1, 1))?;
        let y = t.silu(y)?;
        t.sum(y)
    });
    check_op("linear", &[&[2, 3, 4], &[5, 4], &[5]], &|t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let y = t.sigmoid(y)?;
        t.sum(y)
    });
    check_op("matmul", &[&[2, 3, 4], &[2, 4, 2]], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.square(y)?;
        t.mean(y)
    });
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let w = t.constant(Tensor64::new(&[3, 5], (0..15).map(|i| (i as f64).cos()).collect()).unwrap());
        let y = t.mul(y, w)?;
        let y = t.exp(y)?;
        t.sum(y)
    });
    check_op("softmax", &[&[3, 4, 2]], &|t, v| {
        let y = t.softmax(v[0], 1)?;
        let w = t.constant(Tensor64::new(&[3, 4, 2], (0..24).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let y = t.mul(y, w)?;
        let y = t.square(y)?;
        t.sum(y)
    });
    check_op("box_filter", &[&[3, 5, 6]], &|t, v| {
        let y = t.box_filter(v[0], [2, 3, 3])?;
        let y = t.square(y)?;
        t.sum(y)
    });
}

#[test]
fn gradient_selective_scan() {
    for mode in [ScanMode::Sequential, ScanMode::Chunked(3)] {
        check_op("selective_scan", &[&[7, 3], &[7, 3], &[3, 2], &[7, 2], &[7, 2], &[3]], &move |t, v| {
            let delta = t.softplus(v[1])?;
            let a = t.exp(v[2])?;
            let a = t.neg(a)?;
            let y = t.selective_scan(v[0], delta, a, v[3], v[4], v[5], mode)?;
            let y = t.square(y)?;
            t.sum(y)
        });
    }
}
