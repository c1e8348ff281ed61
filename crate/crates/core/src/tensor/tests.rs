//! Gradient checks: every op's analytic backward is compared against central
//! finite differences in f64. These are the ground truth the models rely on.

use super::*;
use crate::rng::{normal_array, rng_from_seed};
use ndarray::ArrayD;
use rand::RngExt;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn eval_scalar<F>(f: &F, x0: &ArrayD<f64>) -> f64
where
    F: for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let out = f(&tape, x);
    assert_eq!(out.len(), 1, "gradient check target must be scalar");
    out.item()
}

fn tape_grad<F>(f: &F, x0: &ArrayD<f64>) -> ArrayD<f64>
where
    F: for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let out = f(&tape, x);
    let mut store = tape.backward(out);
    store.take(x.id()).expect("input gradient")
}

/// Checks d(f)/d(x) against central differences on up to 48 coordinates.
fn check_grad<F>(shape: &[usize], seed: u64, f: F)
where
    F: for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>,
{
    let mut rng = rng_from_seed(seed);
    let x0: ArrayD<f64> = normal_array(&mut rng, shape);
    let ga = tape_grad(&f, &x0);
    assert_eq!(ga.shape(), x0.shape());
    let n = x0.len();
    let coords: Vec<usize> = if n <= 48 {
        (0..n).collect()
    } else {
        let mut c: Vec<usize> = (0..48).map(|_| rng.random_range(0..n)).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let flat = x0.as_slice().expect("standard layout").to_vec();
    // Logical-order copy; backward passes may return non-contiguous arrays.
    let ga_flat: Vec<f64> = ga.iter().copied().collect();
    for &i in &coords {
        let mut xp = flat.clone();
        let mut xm = flat.clone();
        xp[i] += H;
        xm[i] -= H;
        let fp = eval_scalar(&f, &ArrayD::from_shape_vec(shape, xp).unwrap());
        let fm = eval_scalar(&f, &ArrayD::from_shape_vec(shape, xm).unwrap());
        let fd = (fp - fm) / (2.0 * H);
        let an = ga_flat[i];
        let err = (an - fd).abs() / fd.abs().max(1.0);
        assert!(err < TOL, "coord {i}: analytic {an} vs fd {fd} (err {err})");
    }
}

/// Projects a tensor to a scalar with a fixed random weighting, so gradient
/// checks exercise non-uniform output gradients.
fn proj<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = rng_from_seed(seed);
    let w: ArrayD<f64> = normal_array(&mut rng, &v.shape());
    v.mul(tape.constant(w)).sum()
}

#[test]
fn grad_silu() {
    check_grad(&[17], 1, |t, x| proj(t, x.silu(), 100));
}

#[test]
fn grad_scale_add_scalar() {
    check_grad(&[9], 2, |t, x| proj(t, x.scale(-2.5).add_scalar(0.7), 101));
}

#[test]
fn grad_add_sub_mul() {
    check_grad(&[12], 3, |t, x| {
        let mut rng = rng_from_seed(500);
        let c = t.constant(normal_array(&mut rng, &[12]));
        proj(t, (x + c).mul(x - c), 102)
    });
    // Both operands fed from the same leaf: d(x*x)/dx = 2x.
    check_grad(&[7], 4, |t, x| proj(t, x.mul(x), 103));
}

#[test]
fn grad_reductions() {
    check_grad(&[11], 5, |_, x| x.sum());
    check_grad(&[11], 6, |_, x| x.mean());
    check_grad(&[11], 7, |_, x| x.sum_squares());
    check_grad(&[10], 8, |t, x| {
        let mut rng = rng_from_seed(501);
        let c = t.constant(normal_array(&mut rng, &[10]));
        x.mse(c)
    });
}

#[test]
fn grad_reshape_flatten() {
    check_grad(&[3, 4, 2], 9, |t, x| proj(t, x.reshape(&[6, 4]), 104));
    check_grad(&[2, 3, 3], 10, |t, x| proj(t, x.flatten(), 105));
}

#[test]
fn grad_concat_and_slice() {
    check_grad(&[2, 4, 4], 11, |t, x| {
        let mut rng = rng_from_seed(502);
        let c = t.constant(normal_array(&mut rng, &[3, 4, 4]));
        proj(t, x.concat_channels(c), 106)
    });
    check_grad(&[2, 4, 4], 12, |t, x| {
        let mut rng = rng_from_seed(503);
        let c = t.constant(normal_array(&mut rng, &[3, 4, 4]));
        proj(t, c.concat_channels(x), 107)
    });
    check_grad(&[5, 4, 4], 13, |t, x| proj(t, x.slice_channels(1, 3), 108));
}

#[test]
fn grad_block_reshuffles() {
    check_grad(&[3, 4, 4], 14, |t, x| proj(t, x.space_to_depth(2), 109));
    check_grad(&[12, 2, 2], 15, |t, x| proj(t, x.depth_to_space(2), 110));
}

#[test]
fn grad_pooling() {
    check_grad(&[2, 6, 6], 16, |t, x| proj(t, x.avg_pool(3), 111));
    check_grad(&[2, 3, 3], 17, |t, x| proj(t, x.upsample_nearest(2), 112));
    check_grad(&[4, 5, 5], 18, |t, x| proj(t, x.global_mean_pool(), 113));
}

#[test]
fn grad_conv2d_input_kernel_bias() {
    let mut rng = rng_from_seed(600);
    let w0: ArrayD<f64> = normal_array(&mut rng, &[4, 3, 3, 3]);
    let b0: ArrayD<f64> = normal_array(&mut rng, &[4]);
    let x0: ArrayD<f64> = normal_array(&mut rng, &[3, 6, 6]);
    // Gradient with respect to the input.
    check_grad(&[3, 6, 6], 19, |t, x| {
        let w = t.constant(w0.clone());
        let b = t.constant(b0.clone());
        proj(t, x.conv2d(w, b, 1, 1), 114)
    });
    // With respect to the kernel.
    check_grad(&[4, 3, 3, 3], 20, |t, w| {
        let x = t.constant(x0.clone());
        let b = t.constant(b0.clone());
        proj(t, x.conv2d(w, b, 1, 1), 115)
    });
    // With respect to the bias.
    check_grad(&[4], 21, |t, b| {
        let x = t.constant(x0.clone());
        let w = t.constant(w0.clone());
        proj(t, x.conv2d(w, b, 1, 1), 116)
    });
}

#[test]
fn grad_conv2d_strided_and_pointwise() {
    let mut rng = rng_from_seed(601);
    let w0: ArrayD<f64> = normal_array(&mut rng, &[5, 3, 3, 3]);
    let b0: ArrayD<f64> = normal_array(&mut rng, &[5]);
    check_grad(&[3, 8, 8], 22, |t, x| {
        let w = t.constant(w0.clone());
        let b = t.constant(b0.clone());
        proj(t, x.conv2d(w, b, 2, 1), 117)
    });
    let w1: ArrayD<f64> = normal_array(&mut rng, &[2, 4, 1, 1]);
    let b1: ArrayD<f64> = normal_array(&mut rng, &[2]);
    check_grad(&[4, 5, 5], 23, |t, x| {
        let w = t.constant(w1.clone());
        let b = t.constant(b1.clone());
        proj(t, x.conv2d(w, b, 1, 0), 118)
    });
}

#[test]
fn grad_dense() {
    let mut rng = rng_from_seed(602);
    let w0: ArrayD<f64> = normal_array(&mut rng, &[5, 7]);
    let b0: ArrayD<f64> = normal_array(&mut rng, &[5]);
    let x0: ArrayD<f64> = normal_array(&mut rng, &[7]);
    check_grad(&[7], 24, |t, x| {
        proj(t, x.dense(t.constant(w0.clone()), t.constant(b0.clone())), 119)
    });
    check_grad(&[5, 7], 25, |t, w| {
        proj(t, t.constant(x0.clone()).dense(w, t.constant(b0.clone())), 120)
    });
    check_grad(&[5], 26, |t, b| {
        proj(t, t.constant(x0.clone()).dense(t.constant(w0.clone()), b), 121)
    });
}

#[test]
fn grad_channel_bias() {
    let mut rng = rng_from_seed(603);
    let b0: ArrayD<f64> = normal_array(&mut rng, &[3]);
    let x0: ArrayD<f64> = normal_array(&mut rng, &[3, 4, 4]);
    check_grad(&[3, 4, 4], 27, |t, x| proj(t, x.add_channel_bias(t.constant(b0.clone())), 122));
    check_grad(&[3], 28, |t, b| proj(t, t.constant(x0.clone()).add_channel_bias(b), 123));
}

#[test]
fn grad_power_normalize() {
    check_grad(&[8], 29, |t, x| proj(t, x.power_normalize(8.0).unwrap(), 124));
}

#[test]
fn grad_cross_entropy() {
    check_grad(&[6], 30, |_, x| x.cross_entropy_logits(2));
}

#[test]
fn power_normalize_rejects_zero_and_bad_target() {
    let tape = Tape::<f64>::new();
    let z = tape.leaf(ArrayD::zeros(vec![4]));
    assert!(matches!(z.power_normalize(4.0), Err(crate::CoreError::ZeroSignal)));
    let x = tape.leaf(ArrayD::from_elem(vec![4], 1.0));
    assert!(x.power_normalize(-1.0).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(vec![3], 2.0));
    let y = x.detach().sum_squares();
    let mut store = tape.backward(y);
    assert!(store.take(x.id()).is_none());
}

#[test]
fn clamp_values_and_mask_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_shape_vec(vec![4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap());
    let c = x.clamp(-1.0, 1.0);
    assert_eq!(c.value().as_slice().unwrap(), &[-1.0, -0.5, 0.5, 1.0]);
    // d/dx sum(clamp(x)^2) = 2*clamp(x) inside the interval, 0 outside.
    let y = c.sum_squares();
    let mut store = tape.backward(y);
    let g = store.take(x.id()).unwrap();
    assert_eq!(g.as_slice().unwrap(), &[0.0, -1.0, 1.0, 0.0]);
}

#[test]
fn tanh_values_and_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_shape_vec(vec![3], vec![-2.0, 0.0, 1.5]).unwrap());
    let t = x.tanh();
    for (got, want) in t.value().iter().zip([-2.0f64, 0.0, 1.5]) {
        assert!((got - want.tanh()).abs() < 1e-12);
    }
    // d/dx sum(tanh(x)) = 1 - tanh(x)^2.
    let y = t.sum();
    let mut store = tape.backward(y);
    let g = store.take(x.id()).unwrap();
    for (got, x0) in g.iter().zip([-2.0f64, 0.0, 1.5]) {
        assert!((got - (1.0 - x0.tanh().powi(2))).abs() < 1e-12);
    }
}

#[test]
fn clamp_passes_nan_through() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_shape_vec(vec![2], vec![f64::NAN, 0.3]).unwrap());
    let c = x.clamp(-1.0, 1.0);
    assert!(c.value()[[0]].is_nan());
    assert_eq!(c.value()[[1]], 0.3);
}

#[test]
fn constant_leaves_get_no_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(ArrayD::from_elem(vec![3], 2.0));
    let y = x.sum_squares();
    assert!(!y.tracked());
    let mut store = tape.backward(y);
    assert!(store.take(x.id()).is_none());
}

#[test]
fn shared_subexpression_accumulates() {
    // f = sum(x*x) + sum(x): df/dx = 2x + 1.
    let tape = Tape::<f64>::new();
    let x0 = ArrayD::from_shape_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = tape.leaf(x0.clone());
    let y = x.mul(x).sum() + x.sum();
    let mut store = tape.backward(y);
    let g = store.take(x.id()).unwrap();
    for (gi, xi) in g.iter().zip(x0.iter()) {
        assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn session_sums_gradients_over_repeated_bindings() {
    let tape = Tape::<f64>::new();
    let sess = Session::new(&tape, true);
    let p = Param::new("w", ArrayD::from_elem(vec![2], 3.0));
    let a = sess.param(&p);
    let b = sess.param(&p);
    let loss = (a + b).sum_squares();
    let mut store = tape.backward(loss);
    let grads = sess.grads_by_name(&mut store);
    let g = &grads["w"];
    // y = sum((2w)^2): dy/dw = 8w = 24, accumulated across both bindings.
    for v in g.iter() {
        assert!((v - 24.0).abs() < 1e-12);
    }
}

#[test]
fn inference_session_records_nothing() {
    let tape = Tape::<f64>::new();
    let sess = Session::new(&tape, false);
    let p = Param::new("w", ArrayD::from_elem(vec![2], 3.0));
    let a = sess.param(&p);
    assert!(!a.tracked());
    let loss = a.sum_squares();
    let mut store = tape.backward(loss);
    assert!(sess.grads_by_name(&mut store).is_empty());
}

#[test]
fn conv2d_bwd_helper_matches_op() {
    let mut rng = rng_from_seed(604);
    let x0: ArrayD<f64> = normal_array(&mut rng, &[2, 5, 5]);
    let w0: ArrayD<f64> = normal_array(&mut rng, &[3, 2, 3, 3]);
    let b0: ArrayD<f64> = normal_array(&mut rng, &[3]);
    let tape = Tape::new();
    let (x, w, b) = (tape.leaf(x0.clone()), tape.leaf(w0.clone()), tape.leaf(b0.clone()));
    let y = x.conv2d(w, b, 1, 1);
    let gy: ArrayD<f64> = normal_array(&mut rng, &y.shape());
    let loss = y.mul(tape.constant(gy.clone())).sum();
    let mut store = tape.backward(loss);
    let (gx, gw, gb) = conv2d_bwd(
        &x0.view().into_dimensionality().unwrap(),
        &w0.view().into_dimensionality().unwrap(),
        &gy.view().into_dimensionality().unwrap(),
        1,
        1,
    );
    let close = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-10)
    };
    assert!(close(&store.take(x.id()).unwrap(), &gx.into_dyn()));
    assert!(close(&store.take(w.id()).unwrap(), &gw.into_dyn()));
    assert!(close(&store.take(b.id()).unwrap(), &gb.into_dyn()));
}

#[test]
fn f32_and_f64_tapes_agree() {
    let mut rng = rng_from_seed(605);
    let x64: ArrayD<f64> = normal_array(&mut rng, &[3, 4, 4]);
    let x32 = x64.mapv(|v| v as f32);
    let run64 = {
        let tape = Tape::new();
        let x = tape.leaf(x64.clone());
        x.silu().avg_pool(2).sum_squares().item()
    };
    let run32 = {
        let tape = Tape::new();
        let x = tape.leaf(x32);
        x.silu().avg_pool(2).sum_squares().item()
    };
    assert!((run64 - run32 as f64).abs() < 1e-5);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn block_reshuffle_roundtrips(seed in 0u64..1000, c in 1usize..4, hw in 1usize..5) {
            let mut rng = rng_from_seed(seed);
            let x: ArrayD<f64> = normal_array(&mut rng, &[c, hw * 2, hw * 2]);
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            let back = v.space_to_depth(2).depth_to_space(2);
            prop_assert_eq!(&*back.value(), &x);
        }

        #[test]
        fn power_normalize_hits_target(seed in 0u64..1000, n in 1usize..16, target in 0.1f64..100.0) {
            let mut rng = rng_from_seed(seed ^ 0xabcd);
            let x: ArrayD<f64> = normal_array(&mut rng, &[2 * n]);
            prop_assume!(x.iter().any(|&v| v != 0.0));
            let tape = Tape::new();
            let y = tape.constant(x).power_normalize(target).unwrap();
            let nsq: f64 = y.value().iter().map(|v| v * v).sum();
            prop_assert!((nsq - target).abs() / target < 1e-12);
        }
    }
}
