use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

// O(N k^3) direct summation.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: [usize; 3]) -> Vec<f64> {
    let [n, ci, d, h, wd] = x.dims5().unwrap();
    let [co, _, kd, kh, kw] = w.dims5().unwrap();
    let (od, oh, ow) = (d + 2 * pad[0] - kd + 1, h + 2 * pad[1] - kh + 1, wd + 2 * pad[2] - kw + 1);
    let xi = |bn: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            return 0.0;
        }
        x.data()[(((bn * ci + c) * d + z as usize) * h + y as usize) * wd + xx as usize]
    };
    let mut out = Vec::new();
    for bn in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let wv = w.data()[(((o * ci + c) * kd + a) * kh + bb) * kw + cc];
                                        s += wv
                                            * xi(
                                                bn,
                                                c,
                                                (z + a) as isize - pad[0] as isize,
                                                (y + bb) as isize - pad[1] as isize,
                                                (xx + cc) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_single_tap() {
    let mut g = Graph::new();
    let x = g.constant(t(vec![1, 1, 1, 1, 1], vec![3.0]));
    let w = g.constant(t(vec![1, 1, 1, 1, 1], vec![2.0]));
    let b = g.constant(t(vec![1], vec![1.0]));
    let y = g.conv3d(x, w, b, [0; 3]).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);
}

#[test]
fn conv_counts_in_bounds_taps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 1, 5, 5, 5], 1.0));
    let w = g.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv3d(x, w, b, [1; 3]).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 5, 5, 5]);
    assert_eq!(v.data()[(2 * 5 + 2) * 5 + 2], 27.0);
    assert_eq!(v.data()[0], 8.0);
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(vec![1, 2, 4, 4, 3], &mut rng);
    let w = random(vec![3, 2, 3, 3, 3], &mut rng);
    let b = random(vec![3], &mut rng);
    for pad in [[1, 1, 1], [0, 1, 1], [1, 0, 1]] {
        let got = kernels::conv3d_forward(&x, &w, &b, pad).unwrap();
        let want = conv_oracle(&x, &w, &b, pad);
        assert_eq!(got.numel(), want.len());
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_batched_and_chunked() {
    // large enough to split the im2col buffer into several depth chunks
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(vec![2, 8, 40, 24, 24], &mut rng);
    let w = random(vec![2, 8, 3, 3, 3], &mut rng);
    let b = random(vec![2], &mut rng);
    let got = kernels::conv3d_forward(&x, &w, &b, [1; 3]).unwrap();
    let want = conv_oracle(&x, &w, &b, [1; 3]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-11);
    }
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::zeros(vec![1, 2, 3, 3, 3]);
    let b = Tensor::zeros(vec![1]);
    let w = Tensor::zeros(vec![1, 3, 3, 3, 3]);
    assert!(matches!(kernels::conv3d_forward(&x, &w, &b, [1; 3]), Err(crate::Error::Shape(_))));
    let w = Tensor::zeros(vec![1, 2, 5, 5, 5]);
    assert!(matches!(kernels::conv3d_forward(&x, &w, &b, [0; 3]), Err(crate::Error::Shape(_))));
    let w = Tensor::zeros(vec![1, 2, 5, 5, 5]);
    assert!(kernels::conv3d_forward(&x, &w, &b, [1; 3]).is_ok());
}

#[test]
fn relu_forward_backward() {
    let mut g = Graph::new();
    let x = g.param(t(vec![3], vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn mul_backward() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(2.0));
    let b = g.param(Tensor::scalar(3.0));
    let y = g.mul(a, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[3.0]);
    assert_eq!(g.grad(b).unwrap(), &[2.0]);
}

#[test]
fn mean_backward() {
    let mut g = Graph::new();
    let x = g.param(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
    let m = g.mean(x);
    assert_eq!(g.value(m).item(), 2.5);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn square_grad() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn diamond_sums_paths() {
    // y = x*x + 3x, x reused on three edges
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[7.0]);
}

#[test]
fn concat_splits_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let a = g.param(random(vec![1, 2, 2, 2, 2], &mut rng));
    let b = g.param(random(vec![1, 3, 2, 2, 2], &mut rng));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 2, 2, 2]);
    let w = g.constant(t(vec![1, 5, 2, 2, 2], (0..40).map(f64::from).collect()));
    let p = g.mul(c, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let ga: Vec<f64> = (0..16).map(f64::from).collect();
    let gb: Vec<f64> = (16..40).map(f64::from).collect();
    assert_eq!(g.grad(a).unwrap(), ga.as_slice());
    assert_eq!(g.grad(b).unwrap(), gb.as_slice());
}

#[test]
fn concat_rejects_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![1, 2, 2, 2, 2]));
    let b = g.constant(Tensor::zeros(vec![1, 1, 2, 2, 3]));
    assert!(matches!(g.concat_channels(&[a, b]), Err(crate::Error::Shape(_))));
}

#[test]
fn crop_backward_zero_pads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let x = g.param(random(vec![1, 1, 8, 8, 8], &mut rng));
    let c = g.crop_center(x, [6, 6, 6]).unwrap();
    let up = random(vec![1, 1, 6, 6, 6], &mut rng);
    let u = g.constant(up.clone());
    let p = g.mul(c, u).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    for z in 0..8 {
        for y in 0..8 {
            for xx in 0..8 {
                let inside = (1..7).contains(&z) && (1..7).contains(&y) && (1..7).contains(&xx);
                let want = if inside {
                    up.data()[((z - 1) * 6 + y - 1) * 6 + xx - 1]
                } else {
                    0.0
                };
                assert_eq!(grad[(z * 8 + y) * 8 + xx], want);
                if inside {
                    assert_eq!(
                        g.value(c).data()[((z - 1) * 6 + y - 1) * 6 + xx - 1],
                        g.value(x).data()[(z * 8 + y) * 8 + xx]
                    );
                }
            }
        }
    }
}

#[test]
fn shape_mismatch_and_broadcast() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.add(a, b), Err(crate::Error::Shape(_))));
    let s = g.param(Tensor::scalar(2.0));
    let x = g.param(t(vec![3], vec![1.0, 2.0, 3.0]));
    let y = g.mul(x, s).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(s).unwrap(), &[6.0]);
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    assert!(g.global_skip_add(a, b).is_err());
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Validation(_))));
}

#[test]
fn sum_is_linear_in_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random(vec![2, 3, 4], &mut rng);
    let err = grad_check(|g, x| Ok(g.sum(x)), &p, GRAD_CHECK_EPS).unwrap();
    assert!(err < 1e-10, "{err}");
}

fn conv_mse(seed: u64) -> f64 {
    // loss = mean((conv3d(x, w, b) - y)^2), checked in x, w and b.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(vec![1, 2, 3, 4, 3], &mut rng);
    let w = random(vec![2, 2, 3, 3, 3], &mut rng);
    let b = random(vec![2], &mut rng);
    let y = random(vec![1, 2, 3, 4, 3], &mut rng);
    let loss = |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
        let yv = g.constant(y.clone());
        let c = g.conv3d(x, w, b, [1; 3])?;
        let d = g.sub(c, yv)?;
        let s = g.square(d);
        Ok(g.mean(s))
    };
    let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
    let ex = grad_check(
        |g, v| {
            let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
            loss(g, v, w, b)
        },
        &x,
        GRAD_CHECK_EPS,
    )
    .unwrap();
    let ew = grad_check(
        |g, v| {
            let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone()));
            loss(g, x, v, b)
        },
        &w,
        GRAD_CHECK_EPS,
    )
    .unwrap();
    let eb = grad_check(
        |g, v| {
            let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
            loss(g, x, w, v)
        },
        &b,
        GRAD_CHECK_EPS,
    )
    .unwrap();
    ex.max(ew).max(eb)
}

#[test]
fn conv_mse_gradients() {
    for seed in 0..3 {
        let e = conv_mse(seed);
        assert!(e < 1e-6, "seed {seed}: {e}");
    }
}

#[test]
fn pool_and_normalize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random(vec![1, 3, 4, 4, 2], &mut rng);
    let w = random(vec![1, 3, 2, 2, 1], &mut rng);
    let e = grad_check(
        |g, x| {
            let a = g.avg_pool2(x)?;
            let n = g.normalize_channels(a, 1e-4)?;
            let wv = g.constant(w.clone());
            let m = g.mul(n, wv)?;
            Ok(g.sum(m))
        },
        &p,
        GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn eager_matches_graph_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(vec![1, 1, 4, 5, 6], &mut rng);
    let w1 = random(vec![3, 1, 3, 3, 3], &mut rng);
    let b1 = random(vec![3], &mut rng);
    let w2 = random(vec![1, 4, 3, 3, 3], &mut rng);
    let b2 = random(vec![1], &mut rng);
    fn run<B: Backend>(be: &mut B, ts: [&Tensor; 5]) -> Tensor {
        let x = be.input(ts[0].clone());
        let w1 = be.param(ts[1].clone());
        let b1 = be.param(ts[2].clone());
        let w2 = be.param(ts[3].clone());
        let b2 = be.param(ts[4].clone());
        let h = be.conv3d(&x, &w1, &b1, [1; 3]).unwrap();
        let h = be.relu(&h);
        let c = be.concat_channels(&[x.clone(), h]).unwrap();
        let r = be.conv3d(&c, &w2, &b2, [1; 3]).unwrap();
        let y = be.global_skip_add(&x, &r).unwrap();
        be.tensor(&y).clone()
    }
    let ts = [&x, &w1, &b1, &w2, &b2];
    let a = run(&mut Graph::new(), ts);
    let b = run(&mut Eager, ts);
    assert_eq!(a, b);
}

fn random_graph_grad(seed: u64, wa: f64, wb: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random(vec![1, 2, 3, 3, 3], &mut rng);
    let w = random(vec![2, 2, 3, 3, 3], &mut rng);
    let b = random(vec![2], &mut rng);
    let mut g = Graph::new();
    let x = g.param(p);
    let (w, b) = (g.constant(w), g.constant(b));
    let c = g.conv3d(x, w, b, [1; 3]).unwrap();
    let f = g.square(c);
    let f = g.mean(f);
    let h = g.relu(c);
    let h = g.mul(h, x).unwrap();
    let h = g.sum(h);
    let fa = g.scale(f, wa);
    let hb = g.scale(h, wb);
    let y = g.add(fa, hb).unwrap();
    g.backward(y).unwrap();
    g.grad(x).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_ops_match_differences(seed in 0u64..1000, n in 1usize..6, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random(vec![n, m], &mut rng);
        let q = random(vec![n, m], &mut rng);
        let e = grad_check(|g, x| {
            let qv = g.constant(q.clone());
            let a = g.mul(x, qv)?;
            let b = g.sub(a, x)?;
            let r = g.relu(b);
            let s = g.square(x);
            let s = g.add_scalar(s, 1.5)?;
            let d = g.div(r, s)?;
            let sq = g.sqrt_eps(s, 1e-3)?;
            let k = g.scale(sq, 0.7);
            let t = g.add(d, k)?;
            Ok(g.mean(t))
        }, &p, GRAD_CHECK_EPS).unwrap();
        prop_assert!(e < 1e-6, "{}", e);
    }

    #[test]
    fn conv_chain_matches_differences(seed in 0u64..1000) {
        prop_assert!(conv_mse(seed) < 1e-6);
    }

    #[test]
    fn gradient_is_linear(seed in 0u64..1000, wa in -2.0f64..2.0, wb in -2.0f64..2.0) {
        let f = random_graph_grad(seed, 1.0, 0.0);
        let h = random_graph_grad(seed, 0.0, 1.0);
        let combo = random_graph_grad(seed, wa, wb);
        for i in 0..f.len() {
            prop_assert!((combo[i] - (wa * f[i] + wb * h[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_deterministic(seed in 0u64..1000) {
        let a = random_graph_grad(seed, 0.3, 0.9);
        let b = random_graph_grad(seed, 0.3, 0.9);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
