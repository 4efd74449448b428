use evmf_tensor::{Activation, Graph, Init, ParamStore, Precision, SeedRng, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::default();
    let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.data(ia), &[1., 2., 3., 4.]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.data(ab), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_empty_inner_dimension() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::zeros(vec![3, 0])).unwrap();
    let b = g.constant(Tensor::zeros(vec![0, 2])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[3, 2]);
    assert!(g.data(c).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_descriptive() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
    assert!(err.to_string().contains("[2, 3] x [2, 3]"));
}

/// Direct six-loop cross-correlation, independent of the kernel under test.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![b, o, oh, ow]);
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ci, iy as usize, ix as usize]) * k.at(&[oi, ci, ky, kx]);
                            }
                        }
                    }
                    let off = out.offset(&[bi, oi, y, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_and_zero_kernels() {
    let mut rng = SeedRng::new(5);
    let x = random(&mut rng, &[1, 1, 4, 5]);
    let mut g = Graph::default();
    let xv = g.constant(x.clone()).unwrap();
    let one = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let y = g.conv2d(xv, one, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
    let zk = g.constant(Tensor::zeros(vec![2, 1, 3, 3])).unwrap();
    let z = g.conv2d(xv, zk, 1, 1).unwrap();
    assert!(g.data(z).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = SeedRng::new(11);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::default();
    let (xv, kv) = (g.constant(x.clone()).unwrap(), g.constant(k.clone()).unwrap());
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert!(g.value(y).max_abs_diff(&conv_oracle(&x, &k, 1, 0)) < 1e-12);
}

#[test]
fn conv2d_oracle_over_strides_and_padding() {
    let mut rng = SeedRng::new(12);
    for case in 0..40 {
        let b = 1 + rng.below(2);
        let c = 1 + rng.below(4);
        let h = 3 + rng.below(7);
        let w = 3 + rng.below(7);
        let kh = 1 + rng.below(3);
        let kw = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let x = random(&mut rng, &[b, c, h, w]);
        let k = random(&mut rng, &[2, c, kh, kw]);
        let mut g = Graph::default();
        let (xv, kv) = (g.constant(x.clone()).unwrap(), g.constant(k.clone()).unwrap());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let d = g.value(y).max_abs_diff(&conv_oracle(&x, &k, stride, pad));
        assert!(d < 1e-12, "case {case}: diff {d}");
    }
}

#[test]
fn conv2d_kernel_larger_than_input() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
    let k = g.constant(Tensor::zeros(vec![1, 1, 5, 5])).unwrap();
    assert!(g.conv2d(x, k, 1, 1).is_err());
    assert!(g.conv2d(x, k, 1, 2).is_ok());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::default();
    let u = g.constant(Tensor::vector(vec![0.3; 4])).unwrap();
    let s = g.softmax(u, 0).unwrap();
    for &v in g.data(s) {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()])).unwrap();
    let s = g.softmax(x, 0).unwrap();
    assert!((g.data(s)[0] - 0.25).abs() < 1e-15);
    assert!((g.data(s)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance_and_axis() {
    let mut rng = SeedRng::new(2);
    let x = random(&mut rng, &[3, 4, 2]);
    let mut g = Graph::default();
    let xv = g.constant(x.clone()).unwrap();
    let shifted = g.add_scalar(xv, 17.25).unwrap();
    for axis in 0..3 {
        let a = g.softmax(xv, axis).unwrap();
        let b = g.softmax(shifted, axis).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
    }
    let s = g.softmax(xv, 1).unwrap();
    let v = g.value(s);
    for i in 0..3 {
        for k in 0..2 {
            let sum: f64 = (0..4).map(|j| v.at(&[i, j, k])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::default();
    let ones = g.constant(Tensor::vector(vec![1.0; 3])).unwrap();
    let zeros = g.constant(Tensor::vector(vec![0.0; 3])).unwrap();
    let c = g.constant(Tensor::vector(vec![4.0; 3])).unwrap();
    let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
    let r = 1.5f64.sqrt();
    let expect = [-r, 0.0, r];
    for (a, b) in g.data(y).iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    let beta = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
    let y = g.layer_norm(x, zeros, beta, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.5, -1.0, 2.0]);
}

#[test]
fn activation_examples() {
    let mut g = Graph::default();
    let z = g.constant(Tensor::vector(vec![0.0])).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.data(s), &[0.5]);
    let sp = g.softplus(z).unwrap();
    assert!((g.data(sp)[0] - 2f64.ln()).abs() < 1e-15);
    let neg = g.constant(Tensor::vector(vec![-3.0, -0.5, 0.0])).unwrap();
    let r = g.relu(neg).unwrap();
    assert!(g.data(r).iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut g = Graph::default();
    let x = g.variable(Tensor::vector(vec![0.0, 1.0])).unwrap();
    let r = g.relu(x).unwrap();
    let l = g.sum_all(r).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(&g, x).data(), &[0.0, 1.0]);
}

#[test]
fn backward_sum_of_squares() {
    let mut g = Graph::default();
    let data = vec![0.5, -2.0, 3.0];
    let x = g.variable(Tensor::vector(data.clone())).unwrap();
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq).unwrap();
    let grads = g.backward(l).unwrap();
    let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.wrt(&g, x).data(), expect.as_slice());
}

#[test]
fn backward_constant_loss_gives_zero_grads() {
    let mut rng = SeedRng::new(1);
    let mut store = ParamStore::new();
    let w = store.register("w", &[3], Init::UniformFanIn { fan_in: 3 }, &mut rng).unwrap();
    let mut g = Graph::default();
    let _wv = g.param(&store, w);
    let c = g.constant(Tensor::scalar(4.0)).unwrap();
    let l = g.scale(c, 2.0).unwrap();
    let grads = g.backward(l).unwrap();
    store.accumulate(&g, &grads);
    assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::default();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn repeated_accumulation_adds_up() {
    let mut rng = SeedRng::new(1);
    let mut store = ParamStore::new();
    let w = store.register("w", &[2], Init::Constant(1.5), &mut rng).unwrap();
    let mut g = Graph::default();
    let wv = g.param(&store, w);
    let l = g.sum_all(wv).unwrap();
    let grads = g.backward(l).unwrap();
    store.accumulate(&g, &grads);
    store.accumulate(&g, &grads);
    assert_eq!(store.get(w).grad.data(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.get(w).grad.data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_forward_is_error() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::vector(vec![1000.0])).unwrap();
    assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn f32_mode_rounds_outputs() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::vector(vec![0.1])).unwrap();
    let y = g.scale(x, 1.0).unwrap();
    assert_eq!(g.data(y)[0], 0.1f32 as f64);
}

#[test]
fn activation_kinds_enumerate() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::vector(vec![0.0])).unwrap();
    for (kind, expect) in [
        (Activation::Sigmoid, 0.5),
        (Activation::Relu, 0.0),
        (Activation::Silu, 0.0),
        (Activation::Tanh, 0.0),
        (Activation::Exp, 1.0),
    ] {
        let y = g.activation(x, kind).unwrap();
        assert_eq!(g.data(y)[0], expect, "{kind:?}");
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::zeros(vec![2, 9])).unwrap();
    let l = g.cross_entropy(x, &[0, 5]).unwrap();
    assert!((g.value(l).item() - 9f64.ln()).abs() < 1e-14);
    assert!(g.cross_entropy(x, &[0, 9]).is_err());
}

#[test]
fn mix_is_relabeling_invariant_bitwise() {
    let mut rng = SeedRng::new(9);
    let alpha = random(&mut rng, &[4]);
    let prims = random(&mut rng, &[4, 6]);
    let perm = [2usize, 0, 3, 1];
    let pa: Vec<f64> = perm.iter().map(|&j| alpha.data()[j]).collect();
    let pp: Vec<f64> = perm
        .iter()
        .flat_map(|&j| prims.data()[j * 6..(j + 1) * 6].to_vec())
        .collect();
    let mut g = Graph::default();
    let (a, p) = (g.constant(alpha).unwrap(), g.constant(prims).unwrap());
    let m1 = g.mix(a, p).unwrap();
    let a2 = g.constant(Tensor::vector(pa)).unwrap();
    let p2 = g.constant(t(&[4, 6], &pp)).unwrap();
    let m2 = g.mix(a2, p2).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(g.data(m1)), bits(g.data(m2)));
}
