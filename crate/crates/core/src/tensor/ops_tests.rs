use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed pseudo-random weights, so gradients are not uniform.
fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let w = g.constant(rand_tensor(&shape, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_permutation() {
    let g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let y = g.matmul(i2, i2).unwrap();
    assert_eq!(g.value(y).data(), &[1., 0., 0., 1.]);

    let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let p = g.constant(Tensor::from_f64(&[2, 2], &[0., 1., 1., 0.]).unwrap());
    let y = g.matmul(a, p).unwrap();
    assert_eq!(g.value(y).data(), &[2., 1., 4., 3.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = rand_tensor(&[4, 2], 7);
    let a = rand_tensor(&[3, 4], 8);
    let ra = grad_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul(x, bv)?;
            probe(g, y, 1)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(ra.max_rel_err < 1e-6, "{ra:?}");
    let rb = grad_check(
        |g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul(av, x)?;
            probe(g, y, 2)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(rb.max_rel_err < 1e-6, "{rb:?}");
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let a = rand_tensor(&[2, 3, 5], 11);
    let b = rand_tensor(&[2, 4, 5], 12);
    for which in 0..2 {
        let (x, other) = if which == 0 { (&a, &b) } else { (&b, &a) };
        let r = grad_check(
            |g, v| {
                let o = g.constant(other.clone());
                let y = if which == 0 { g.matmul_t(v, o)? } else { g.matmul_t(o, v)? };
                probe(g, y, 3)
            },
            x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
    // large enough to use the blocked kernel
    let a = rand_tensor(&[3, 20, 16], 13);
    let b = rand_tensor(&[16, 24], 14);
    let r = grad_check(
        |g, v| {
            let o = g.constant(b.clone());
            let y = g.matmul(v, o)?;
            probe(g, y, 4)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax_lastdim(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new(vec![2], vec![0.7, f64::NEG_INFINITY]).unwrap());
    let y = g.softmax_lastdim(x);
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    let x = g.constant(Tensor::new(vec![2], vec![0.7, MASK_NEG]).unwrap());
    let y = g.softmax_lastdim(x);
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    let x = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
    let y = g.softmax_lastdim(x);
    assert!(g.value(y).data()[0].is_nan());
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let x = rand_tensor(&[4, 7], 5).map(|v| v * 10.0);
    let g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_lastdim(xv);
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let r = grad_check(
        |g, v| {
            let y = g.softmax_lastdim(v);
            probe(g, y, 9)
        },
        &rand_tensor(&[5], 6),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_examples_and_gradient() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.5));
    let ones = g.constant(Tensor::full(&[4], 1.0));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let xr = g.constant(rand_tensor(&[3, 4], 1));
    let beta = g.constant(Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(xr, zeros, beta, 1e-5).unwrap();
    for row in g.value(y).data().chunks(4) {
        assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
    }
    assert!(g.layer_norm(xr, ones, zeros, 0.0).is_err());

    let gamma = rand_tensor(&[8], 2);
    let beta = rand_tensor(&[8], 3);
    let x = rand_tensor(&[8], 4);
    let rx = grad_check(
        |g, v| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            let y = g.layer_norm(v, gm, bt, 1e-5)?;
            probe(g, y, 5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(rx.max_rel_err < 1e-5, "{rx:?}");
    let rg = grad_check(
        |g, v| {
            let xv = g.constant(x.clone());
            let bt = g.constant(beta.clone());
            let y = g.layer_norm(xv, v, bt, 1e-5)?;
            probe(g, y, 6)
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    assert!(rg.max_rel_err < 1e-5, "{rg:?}");
}

#[test]
fn activation_values() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[0.0, -1.0, 40.0]).unwrap());
    assert_eq!(g.value(g.gelu(x)).data()[0], 0.0);
    assert_eq!(g.value(g.relu(x)).data()[1], 0.0);
    let s = g.value(g.sigmoid(x));
    assert_eq!(s.data()[0], 0.5);
    assert!((s.data()[2] - 1.0).abs() < 1e-15);
}

#[test]
fn activation_gradients() {
    // keep inputs away from the relu kink
    let x = rand_tensor(&[12], 21).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v } * 3.0);
    for act in 0..3 {
        let r = grad_check(
            |g, v| {
                let y = match act {
                    0 => g.gelu(v),
                    1 => g.relu(v),
                    _ => g.sigmoid(v),
                };
                probe(g, y, 22)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "activation {act}: {r:?}");
    }
}

#[test]
fn conv2d_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let w = g.constant(Tensor::from_f64(&[1, 1, 1, 1], &[2.]).unwrap());
    let b = g.constant(Tensor::from_f64(&[1], &[0.]).unwrap());
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);

    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);

    let x = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let w = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.conv2d(x, w, None, 2, 0).is_err());
}

#[test]
fn conv2d_identity_kernel_is_bit_exact() {
    let x = rand_tensor(&[1, 3, 4, 5], 30);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.set(&[c, c, 0, 0], 1.0);
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(*g.value(y), x);
}

#[test]
fn conv2d_gradients() {
    let x = rand_tensor(&[1, 2, 5, 5], 31);
    let w = rand_tensor(&[3, 2, 3, 3], 32);
    let b = rand_tensor(&[3], 33);
    let rx = grad_check(
        |g, v| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(v, wv, Some(bv), 1, 1)?;
            probe(g, y, 34)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(rx.max_rel_err < 1e-5, "{rx:?}");
    let rw = grad_check(
        |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, v, Some(bv), 1, 1)?;
            probe(g, y, 35)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(rw.max_rel_err < 1e-5, "{rw:?}");
    let rb = grad_check(
        |g, v| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(v), 1, 1)?;
            probe(g, y, 36)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(rb.max_rel_err < 1e-5, "{rb:?}");
    // strided patch-embedding case
    let x = rand_tensor(&[1, 3, 8, 8], 37);
    let w = rand_tensor(&[4, 3, 4, 4], 38);
    let r = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, None, 4, 0)?;
            probe(g, y, 39)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap(), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1.]);

    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);

    let unused = g.input(Tensor::zeros(&[2]), true);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zeros(unused).data(), &[0., 0.]);

    assert!(matches!(g.backward(x), Err(crate::Error::Usage(_))));
}

#[test]
fn param_grads_accumulate_until_zeroed() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[2], &[1., 2.]).unwrap()).unwrap();
    let other = store.add("unused", Tensor::zeros(&[3])).unwrap();
    for _ in 0..2 {
        let g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        store.accumulate(&g, &grads);
    }
    assert_eq!(store.get(id).grad().unwrap().data(), &[2., 2.]);
    assert!(store.get(other).grad_or_zeros().data().iter().all(|&v| v == 0.0));
    store.zero_grad();
    assert!(store.get(id).grad().is_none());
}

#[test]
fn gather_concat_and_suffix_add_gradients() {
    let x = rand_tensor(&[3, 4], 40);
    let r = grad_check(
        |g, v| {
            let t = g.permute(v, &[1, 0])?;
            let p = g.gather(t, vec![0, 5, layout::ZERO, 5, 11], &[5])?;
            probe(g, p, 41)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let other = rand_tensor(&[3, 2], 42);
    let r = grad_check(
        |g, v| {
            let o = g.constant(other.clone());
            let c = g.concat_last(v, o)?;
            let c2 = g.concat_last(o, c)?;
            probe(g, c2, 43)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let big = rand_tensor(&[2, 3, 4], 44);
    let r = grad_check(
        |g, v| {
            let b = g.constant(big.clone());
            let y = g.add_suffix(b, v)?;
            let y = g.scale(y, 0.5);
            probe(g, y, 45)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn clamp_blocks_gradient_outside_range() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[-2., 0.5, 2.]).unwrap(), true);
    let c = g.clamp(x, 0.0, 1.0);
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(g.value(c).data(), &[0., 0.5, 1.]);
    assert_eq!(grads.get(x).unwrap().data(), &[0., 1., 0.]);
}
