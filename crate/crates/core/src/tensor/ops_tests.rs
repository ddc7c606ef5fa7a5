use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn store_with(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        s.init(*name, shape, Init::Normal(0.7), &mut rng).unwrap();
    }
    s
}

/// Projects an output onto a fixed pseudo-random direction so every output
/// entry contributes a distinct weight to the checked scalar.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.618 + 0.3).sin()).collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, wv)?;
    Ok(g.mean(p))
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> f64 {
    let r = grad_check(store, 1e-4, 0, |g, p| {
        let y = f(g, p)?;
        project(g, y)
    })
    .unwrap();
    r.max_rel_error
}

fn forward(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn linear_identity_and_hand_case() {
    let y = forward(|g| {
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        g.linear(x, w, b)
    });
    assert_eq!(y.data(), &[4.0, 6.0]);

    let x = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
    let y = forward(|g| {
        let xv = g.constant(x.clone());
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(&[2]));
        g.linear(xv, w, b)
    });
    assert_eq!(y, x);
}

#[test]
fn linear_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        g.linear(x, w, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let s = store_with(&[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[5])], 1);
    let err = check(&s, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.linear(x, w, b)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv1d_unit_kernel_identity() {
    let x = t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let y = forward(|g| {
        let xv = g.constant(x.clone());
        let k = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        g.conv1d(xv, k, 3)
    });
    assert_eq!(y, x);
}

#[test]
fn conv1d_impulse_response_hits_dilated_taps() {
    // impulse at t=4 of 9; taps (a, b, c) must land at 4+2, 4, 4-2 (correlation).
    let mut x = vec![0.0; 9];
    x[4] = 1.0;
    let y = forward(|g| {
        let xv = g.constant(t(&[9, 1], &x));
        let k = g.constant(t(&[3, 1, 1], &[0.5, 2.0, -3.0]));
        g.conv1d(xv, k, 2)
    });
    let mut want = vec![0.0; 9];
    want[6] = 0.5;
    want[4] = 2.0;
    want[2] = -3.0;
    assert_eq!(y.data(), want.as_slice());
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let s = store_with(&[("x", &[7, 3]), ("k", &[3, 3, 4])], 2);
    let err = check(&s, |g, p| {
        let (x, k) = (g.param(p, "x")?, g.param(p, "k")?);
        g.conv1d(x, k, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv2d_unit_kernel_identity_and_impulse_response() {
    let x = t(&[2, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let y = forward(|g| {
        let xv = g.constant(x.clone());
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        g.conv2d(xv, k)
    });
    assert_eq!(y, x);

    // A centred impulse through a correlation returns the kernel flipped in
    // both axes; with a symmetric readout that is the kernel itself reversed.
    let kern: Vec<f64> = (0..9).map(|i| i as f64 + 1.0).collect();
    let mut imp = vec![0.0; 25];
    imp[12] = 1.0;
    let y = forward(|g| {
        let xv = g.constant(t(&[5, 5, 1], &imp));
        let k = g.constant(t(&[3, 3, 1, 1], &kern));
        g.conv2d(xv, k)
    });
    for dy in 0..3 {
        for dx in 0..3 {
            let out = y.data()[(3 - dy) * 5 + (3 - dx)];
            assert_eq!(out, kern[dy * 3 + dx]);
        }
    }
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let s = store_with(&[("x", &[5, 4, 2]), ("k", &[3, 3, 2, 3])], 3);
    let err = check(&s, |g, p| {
        let (x, k) = (g.param(p, "x")?, g.param(p, "k")?);
        g.conv2d(x, k)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_single_key_broadcasts_value() {
    let y = forward(|g| {
        let q = g.constant(t(&[3, 2], &[1.0, -4.0, 0.0, 9.0, 2.0, 2.0]));
        let k = g.constant(t(&[1, 2], &[0.3, 0.1]));
        let v = g.constant(t(&[1, 3], &[5.0, -1.0, 2.0]));
        g.attention(q, k, v)
    });
    for r in 0..3 {
        assert_eq!(y.row(r), &[5.0, -1.0, 2.0]);
    }
}

#[test]
fn attention_saturates_onto_aligned_key() {
    // orthonormal keys; query = 50 * key_1
    let y = forward(|g| {
        let q = g.constant(t(&[1, 3], &[0.0, 50.0, 0.0]));
        let k = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        g.attention(q, k, v)
    });
    // weight on the other keys is exp(-50/sqrt(3)) ≈ 3e-13
    assert!((y.data()[0] - 3.0).abs() < 1e-10);
    assert!((y.data()[1] - 4.0).abs() < 1e-10);
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let s = store_with(&[("q", &[3, 4]), ("k", &[5, 4]), ("v", &[5, 2])], 4);
    let err = check(&s, |g, p| {
        let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
        g.attention(q, k, v)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn zero_inputs_give_analytic_values() {
    let y = forward(|g| {
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gamma = g.constant(t(&[3], &[2.0, 3.0, 4.0]));
        let beta = g.constant(t(&[3], &[0.5, -0.5, 1.0]));
        g.layer_norm(x, gamma, beta)
    });
    assert_eq!(y.data(), &[0.5, -0.5, 1.0, 0.5, -0.5, 1.0]);
    let y = forward(|g| {
        let x = g.constant(Tensor::zeros(&[4]));
        Ok(g.gelu(x))
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = forward(|g| {
        let a = g.constant(Tensor::zeros(&[4]));
        let b = g.constant(t(&[4], &[-3.0, 0.0, 1.0, 7.0]));
        g.gated_tanh(a, b)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_element_hand_cases() {
    let y = forward(|g| {
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let beta = g.constant(Tensor::zeros(&[2]));
        g.layer_norm(x, gamma, beta)
    });
    // mean 2, variance 1
    let s = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);

    let y = forward(|g| {
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        Ok(g.gelu(x))
    });
    assert!((y.data()[0] - 0.841_191_990_608_276_8).abs() < 1e-14);
    assert!((y.data()[1] + 0.158_808_009_391_723_24).abs() < 1e-14);

    let y = forward(|g| {
        let a = g.constant(t(&[2], &[1.0, -0.5]));
        let b = g.constant(t(&[2], &[0.0, 2.0]));
        g.gated_tanh(a, b)
    });
    assert!((y.data()[0] - 0.380_797_077_977_882_4).abs() < 1e-14);
    assert!((y.data()[1] + 0.407_031_441_798_062_1).abs() < 1e-14);
}

#[test]
fn pointwise_and_norm_gradients_match_finite_differences() {
    let s = store_with(&[("x", &[3, 4]), ("y", &[3, 4]), ("g", &[4]), ("b", &[4])], 5);
    let err = check(&s, |g, p| {
        let (x, gm, b) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
        g.layer_norm(x, gm, b)
    });
    assert!(err < TOL, "layer_norm {err}");
    let err = check(&s, |g, p| {
        let x = g.param(p, "x")?;
        Ok(g.gelu(x))
    });
    assert!(err < TOL, "gelu {err}");
    let err = check(&s, |g, p| {
        let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
        g.gated_tanh(x, y)
    });
    assert!(err < TOL, "gated_tanh {err}");
    let err = check(&s, |g, p| {
        let x = g.param(p, "x")?;
        Ok(g.softmax_rows(x))
    });
    assert!(err < TOL, "softmax {err}");
    let err = check(&s, |g, p| {
        let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
        let d = g.sub(x, y)?;
        let t = g.tanh(d);
        let s = g.sigmoid(x);
        let m = g.mul(t, s)?;
        let m = g.scale(m, 1.7);
        g.mse(m, y)
    });
    assert!(err < TOL, "composite {err}");
}

#[test]
fn group_norm_gradient_matches_finite_differences() {
    let s = store_with(&[("x", &[3, 2, 4]), ("g", &[4]), ("b", &[4])], 6);
    let err = check(&s, |g, p| {
        let (x, gm, b) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
        g.group_norm(x, 2, gm, b)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn group_norm_of_constant_input_is_beta() {
    let y = forward(|g| {
        let x = g.constant(Tensor::full(&[2, 2, 4], 3.0));
        let gamma = g.constant(Tensor::full(&[4], 5.0));
        let beta = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        g.group_norm(x, 2, gamma, beta)
    });
    for p in 0..4 {
        assert_eq!(&y.data()[p * 4..p * 4 + 4], &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn layout_ops_gradients_match_finite_differences() {
    let s = store_with(&[("x", &[4, 6, 3]), ("y", &[4, 6, 2])], 7);
    let err = check(&s, |g, p| {
        let x = g.param(p, "x")?;
        let d = g.space_to_depth2(x)?;
        let u = g.upsample2(d)?;
        let y = g.param(p, "y")?;
        let c = g.concat_last(u, y)?;
        let c = g.slice_last(c, 2, 10)?;
        let c = g.slice_rows(c, 1, 3)?;
        let c = g.pad_crop2d(c, 5, 4)?;
        let c = g.reshape(c, &[20, 10])?;
        Ok(g.tanh(c))
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn space_to_depth_then_upsample_places_blocks() {
    let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let y = forward(|g| {
        let xv = g.constant(t(&[4, 4, 1], &x));
        g.space_to_depth2(xv)
    });
    assert_eq!(y.shape(), &[2, 2, 4]);
    assert_eq!(&y.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    let y = forward(|g| {
        let xv = g.constant(t(&[1, 2, 1], &[1.0, 2.0]));
        g.upsample2(xv)
    });
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, f64::NAN]));
    let s = g.mean(x);
    assert!(matches!(g.check_finite(), Err(TensorError::NonFinite { .. })));
    assert!(g.backward(s).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let y = forward(|g| {
        let x = g.constant(t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
        Ok(g.softmax_rows(x))
    });
    assert!((y.data()[0] - 0.5).abs() < 1e-15 && y.data()[2] == 0.0);
}

#[test]
fn unreachable_params_get_zero_gradient() {
    let s = store_with(&[("a", &[2]), ("b", &[3])], 8);
    let mut g = Graph::new();
    let a = g.param(&s, "a").unwrap();
    let _b = g.param(&s, "b").unwrap();
    let l = g.mean(a);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("b").unwrap(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads.get("a").unwrap(), &[0.5, 0.5]);
}

fn arb_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_and_linear_are_linear_in_x(
        x1 in arb_vec(6 * 5 * 2),
        x2 in arb_vec(6 * 5 * 2),
        k in arb_vec(3 * 3 * 2 * 3),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let run = |x: &[f64], kind: u8| forward(|g| {
            let kv = |g: &mut Graph| g.constant(t(&[3, 3, 2, 3], &k));
            match kind {
                0 => {
                    let xv = g.constant(t(&[6, 5, 2], x));
                    let kk = kv(g);
                    g.conv2d(xv, kk)
                }
                1 => {
                    let xv = g.constant(t(&[30, 2], x));
                    let kk = g.constant(t(&[3, 2, 9], &k[..54]));
                    g.conv1d(xv, kk, 3)
                }
                _ => {
                    let xv = g.constant(t(&[30, 2], x));
                    let w = g.constant(t(&[2, 4], &k[..8]));
                    g.matmul(xv, w)
                }
            }
        });
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        for kind in 0..3u8 {
            let (y1, y2, ym) = (run(&x1, kind), run(&x2, kind), run(&mix, kind));
            for i in 0..ym.len() {
                let want = a * y1.data()[i] + b * y2.data()[i];
                prop_assert!((ym.data()[i] - want).abs() < 1e-6);
            }
        }
    }
}
