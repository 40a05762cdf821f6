mod common;

use aknet::{Error, Graph, Tensor};
use common::{naive_conv1d, naive_conv2d, naive_matvec, uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let h = rng.random_range(k..10);
        let w = rng.random_range(k..10);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let x = uniform(&mut rng, &[cin, h, w]);
        let kern = uniform(&mut rng, &[cout, cin, k, k]);
        let mut g = Graph::new();
        let (xn, wn) = (g.input(x.clone()), g.input(kern.clone()));
        let y = g.conv2d(xn, wn, stride, pad).unwrap();
        let expected = naive_conv2d(&x, &kern, (stride, stride), (pad, pad));
        let diff = g.value(y).max_abs_diff(&expected).expect("same shape");
        assert!(diff < 1e-6, "diff {diff}");
    }
}

#[test]
fn conv2d_over_frames_is_per_frame_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[2, 3, 6, 5]);
    let kern = uniform(&mut rng, &[4, 2, 3, 3]);
    let mut g = Graph::new();
    let (xn, wn) = (g.input(x.clone()), g.input(kern.clone()));
    let y = g.conv2d(xn, wn, 2, 1).unwrap();
    let yv = g.value(y);
    assert_eq!(yv.dims(), &[4, 3, 3, 3]);
    for frame in 0..3 {
        let xf = Tensor::from_fn([2, 6, 5], |i| {
            let (c, r) = (i / 30, i % 30);
            x.data()[(c * 3 + frame) * 30 + r]
        });
        let expected = naive_conv2d(&xf, &kern, (2, 2), (1, 1));
        for o in 0..4 {
            for p in 0..9 {
                let got = yv.data()[(o * 3 + frame) * 9 + p];
                assert!((got - expected.data()[o * 9 + p]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn conv1d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..5);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let l = rng.random_range(k..20);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let x = uniform(&mut rng, &[cin, l]);
        let kern = uniform(&mut rng, &[cout, cin, k]);
        let mut g = Graph::new();
        let (xn, wn) = (g.input(x.clone()), g.input(kern.clone()));
        let y = g.conv1d(xn, wn, stride, pad).unwrap();
        let expected = naive_conv1d(&x, &kern, stride, pad);
        assert!(g.value(y).max_abs_diff(&expected).unwrap() < 1e-6);
    }
}

#[test]
fn dense_matches_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (i, o) = (rng.random_range(1..12), rng.random_range(1..12));
        let x = uniform(&mut rng, &[i]);
        let w = uniform(&mut rng, &[o, i]);
        let b = uniform(&mut rng, &[o]);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.dense(xn, wn, bn).unwrap();
        let expected = naive_matvec(&w, x.data(), b.data());
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-9);
        }
    }
}

#[test]
fn identity_kernel_reproduces_input() {
    // A 1×3 kernel [0, 1, 0] with one column of padding on each side.
    let x = t(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let wn = g.input(t(&[1, 1, 1, 3], &[0., 1., 0.]));
    let y = g.conv2d_rect(xn, wn, (1, 1), (0, 1)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv1d_small_example() {
    let mut g = Graph::new();
    let xn = g.input(t(&[1, 4], &[1., 2., 3., 4.]));
    let wn = g.input(t(&[1, 1, 3], &[1., 0., -1.]));
    let y = g.conv1d(xn, wn, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[-2., -2., -2., 3.]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, &[4, 7]).map(|v| v * 50.0);
    let mut g = Graph::new();
    let xn = g.input(x);
    let y = g.softmax(xn, 1).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn global_avg_pool_averages_each_channel() {
    let mut g = Graph::new();
    let xn = g.input(t(&[2, 1, 2, 2], &[1., 2., 3., 4., 10., 10., 10., 10.]));
    let y = g.global_avg_pool(xn).unwrap();
    assert_eq!(g.value(y).data(), &[2.5, 10.0]);
}

#[test]
fn minmax_maps_constant_to_half() {
    let mut g = Graph::new();
    let xn = g.input(Tensor::full([2, 3, 3], 7.0));
    let y = g.minmax_normalize(xn).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));

    let mut g = Graph::new();
    let xn = g.input(t(&[1, 1, 3], &[2., 4., 3.]));
    let y = g.minmax_normalize(xn).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.5]);
}

#[test]
fn minmax_rejects_non_finite() {
    let mut g = Graph::new();
    let xn = g.input(t(&[1, 1, 2], &[1.0, f64::NAN]));
    assert!(matches!(g.minmax_normalize(xn), Err(Error::NonFinite(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let x = g.input(uniform(&mut rng, &[3, 4]));
    let y = g.sum(x);
    let grads = g.backward(y).unwrap();
    assert!(grads.node(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_twice_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = uniform(&mut rng, &[5]);
    let mut g = Graph::new();
    let x = g.input(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq);
    let grads = g.backward(y).unwrap();
    for (gv, v) in grads.node(x).unwrap().data().iter().zip(xv.data()) {
        assert!((gv - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar_output() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::zeros([2, 2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarOutput(_))));
}

#[test]
fn mismatched_channels_are_rejected() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::zeros([3, 5, 5]));
    let w = g.input(Tensor::zeros([2, 4, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::ShapeMismatch { .. })));
    let a = g.input(Tensor::zeros([2, 3]));
    let b = g.input(Tensor::zeros([2, 4]));
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn temporal_shift_moves_channel_folds() {
    // Four channels, two frames; fraction 1/4 delays channel 0 by one frame
    // and advances channel 1.
    let x = Tensor::from_fn([4, 2, 1, 1], |i| (i + 1) as f64);
    let mut g = Graph::new();
    let xn = g.input(x);
    let y = g.temporal_shift(xn, 0.25).unwrap();
    assert_eq!(g.value(y).data(), &[0., 1., 4., 0., 5., 6., 7., 8.]);
}

#[test]
fn gather_columns_picks_flat_positions() {
    let x = Tensor::from_fn([2, 1, 2, 2], |i| i as f64);
    let mut g = Graph::new();
    let xn = g.input(x);
    let y = g.gather_columns(xn, &[3, 0]).unwrap();
    assert_eq!(g.value(y).dims(), &[2, 2]);
    assert_eq!(g.value(y).data(), &[3., 0., 7., 4.]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_k() {
    let mut g = Graph::new();
    let z = g.input(Tensor::<f64>::zeros([4]));
    let l = g.cross_entropy(z, 2).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
}
