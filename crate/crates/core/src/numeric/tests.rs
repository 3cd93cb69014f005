use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random weights so every output coordinate contributes to the scalar.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(v));
    let w = g.constant(w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let report = grad_check_many(
        |g, vs| {
            let out = f(g, vs)?;
            weighted_sum(g, out, 99)
        },
        &pts,
        &GradCheckOptions::default(),
    )
    .unwrap();
    report.max_relative_error
}

#[test]
fn softmax_of_equal_values_is_uniform() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::full(vec![1, 4], 0.3)).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let s = g.square(x).unwrap();
    let s = g.sum(s).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn matmul_shape_and_mismatch() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![3, 4])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    let err = g.matmul(b, a).unwrap_err();
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![3, 4]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn non_finite_output_is_rejected() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(Tensor::full(vec![2], 1e200)).unwrap();
    let err = g.square(a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "square" }));
}

#[test]
fn primitives_pass_grad_check() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]))),
        ("matmul_t", check(&[&[3, 4], &[5, 4]], |g, v| g.matmul_t(v[0], v[1]))),
        ("add", check(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]))),
        ("sub", check(&[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]))),
        ("mul", check(&[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]))),
        ("add_row", check(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]))),
        ("mul_row", check(&[&[3, 4], &[4]], |g, v| g.mul_row(v[0], v[1]))),
        ("scale", check(&[&[5]], |g, v| g.scale(v[0], -1.7))),
        ("square", check(&[&[2, 2]], |g, v| g.square(v[0]))),
        ("mean", check(&[&[2, 3]], |g, v| g.mean(v[0]))),
        ("softmax", check(&[&[3, 5]], |g, v| g.softmax(v[0]))),
        ("causal_softmax", check(&[&[3, 5]], |g, v| g.causal_softmax(v[0], 1))),
        ("log_softmax", check(&[&[3, 5]], |g, v| g.log_softmax(v[0]))),
        ("layer_norm", check(&[&[3, 6]], |g, v| g.layer_norm(v[0], 1e-5))),
        ("gelu", check(&[&[4, 3]], |g, v| g.gelu(v[0]))),
        ("sigmoid", check(&[&[4, 3]], |g, v| g.sigmoid(v[0]))),
        ("conv2d", check(&[&[2, 5, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], v[2], (2, 2)))),
        ("depthwise_conv1d", check(&[&[7, 3], &[3, 3], &[3]], |g, v| g.depthwise_conv1d(v[0], v[1], v[2], 1))),
        ("depthwise_conv1d_s2", check(&[&[7, 3], &[3, 3], &[3]], |g, v| g.depthwise_conv1d(v[0], v[1], v[2], 2))),
        ("slice_rows", check(&[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 4))),
        ("slice_cols", check(&[&[3, 5]], |g, v| g.slice_cols(v[0], 2, 5))),
        ("concat_rows", check(&[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", check(&[&[2, 3], &[2, 1]], |g, v| g.concat_cols(&[v[0], v[1]]))),
        ("transpose", check(&[&[2, 3]], |g, v| g.transpose(v[0]))),
        ("swap_axes01", check(&[&[2, 3, 4]], |g, v| g.swap_axes01(v[0]))),
        ("reshape", check(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]))),
        ("gather_rows", check(&[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2]))),
        ("pick", check(&[&[3, 4]], |g, v| g.pick(v[0], &[1, 3, 0]))),
    ];
    for (name, err) in &cases {
        assert!(*err < tol, "{name}: max relative error {err:e}");
    }
}

#[test]
fn abs_and_relu_pass_away_from_kinks() {
    // shift inputs away from zero so no coordinate sits within epsilon of a kink
    let pt = Tensor::new(vec![4], vec![0.7, -0.4, 1.3, -2.0]).unwrap();
    let err = grad_check(
        |g, v| {
            let a = g.abs(v)?;
            let r = g.relu(v)?;
            let s = g.add(a, r)?;
            weighted_sum(g, s, 3)
        },
        &pt,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn causal_softmax_masks_future_exactly() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    let y = g.causal_softmax(x, 0).unwrap();
    let y = g.value(y).data().to_vec();
    assert_eq!(&y[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(y[5], 0.0);
    assert!((y[3] + y[4] - 1.0).abs() < 1e-15);
}

#[test]
fn conv2d_same_padding_shapes() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(vec![1, 240, 128])).unwrap();
    let w = g.constant(Tensor::zeros(vec![4, 1, 3, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![4])).unwrap();
    let y = g.conv2d(x, w, b, (2, 2)).unwrap();
    assert_eq!(g.shape(y), &[4, 120, 64]);
    let x = g.constant(Tensor::zeros(vec![1, 7, 5])).unwrap();
    let y = g.conv2d(x, w, b, (2, 2)).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 3]);
}
