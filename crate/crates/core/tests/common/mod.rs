//! Test-only oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

pub mod gradsuite;

use aknet::Tensor;
use rand::Rng;

pub fn uniform(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation of `x: Cin×H×W` with
/// `w: Cout×Cin×kh×kw`.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<f64> {
    let (cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, kh, kw) = (w.dims()[0], w.dims()[2], w.dims()[3]);
    assert_eq!(w.dims()[1], cin);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let iy = (y * stride.0 + a) as isize - pad.0 as isize;
                            let ix = (xx * stride.1 + b) as isize - pad.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.at(&[c, iy as usize, ix as usize]) * w.at(&[o, c, a, b]);
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

/// Direct nested-loop 1D cross-correlation of `x: Cin×L` with `w: Cout×Cin×k`.
pub fn naive_conv1d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, l) = (x.dims()[0], x.dims()[1]);
    let (cout, k) = (w.dims()[0], w.dims()[2]);
    let ol = (l + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ol];
    for o in 0..cout {
        for p in 0..ol {
            let mut s = 0.0;
            for c in 0..cin {
                for a in 0..k {
                    let i = (p * stride + a) as isize - pad as isize;
                    if i >= 0 && (i as usize) < l {
                        s += x.at(&[c, i as usize]) * w.at(&[o, c, a]);
                    }
                }
            }
            out[o * ol + p] = s;
        }
    }
    Tensor::new(vec![cout, ol], out).unwrap()
}

pub fn naive_matvec(w: &Tensor<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    let (r, c) = (w.dims()[0], w.dims()[1]);
    (0..r)
        .map(|i| b[i] + (0..c).map(|j| w.at(&[i, j]) * x[j]).sum::<f64>())
        .collect()
}

/// Heatmap `T×H×W` with values on a coarse grid so ties are common.
pub fn tied_heatmap(rng: &mut impl Rng) -> Tensor<f64> {
    let t = rng.random_range(1..=8);
    let h = rng.random_range(1..=14);
    let w = rng.random_range(1..=14);
    let levels = rng.random_range(2..=20) as f64;
    Tensor::from_fn([t, h, w], |_| (rng.random_range(0.0..1.0) * levels).floor() / levels)
}

/// Top-`n` flat positions by full sort: descending score, then ascending
/// position.
pub fn topn_oracle(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Largest gap between interior columns of a 2D convolution over a
/// width-constant map and the 1D convolution with the width-summed kernel,
/// both computed by nested loops, for one random configuration.
pub fn compaction_gap(rng: &mut impl Rng) -> f64 {
    let cin = rng.random_range(1..=4);
    let cout = rng.random_range(1..=4);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let n = rng.random_range(k..=12);
    let width = k + rng.random_range(2..=4);
    let pad = k / 2;
    let w = uniform(rng, &[cout, cin, k, k]);
    let seq = uniform(rng, &[cin, n]);
    let x2 = Tensor::from_fn([cin, n, width], |i| seq.data()[i / width]);
    let y2 = naive_conv2d(&x2, &w, (stride, 1), (pad, pad));
    let w1 = aknet::classifier::compact_kernel(&w, aknet::classifier::CompactAxis::Width).unwrap();
    let y1 = naive_conv1d(&seq, &w1, stride, pad);
    let (ol, ow) = (y2.dims()[1], y2.dims()[2]);
    assert_eq!(y1.dims()[1], ol);
    let mut gap = 0f64;
    // Columns whose receptive field lies inside the map.
    for col in pad..ow - pad {
        for o in 0..cout {
            for p in 0..ol {
                gap = gap.max((y2.at(&[o, p, col]) - y1.at(&[o, p])).abs());
            }
        }
    }
    gap
}

/// Expected `(params, flops)` growth when one dimension of an all-ones
/// operator doubles, read off the cost formulas by hand.
pub const DOUBLING: &[(aknet::cost::OpKind, &str, f64, f64)] = {
    use aknet::cost::OpKind::*;
    &[
        (Conv3d, "c_in", 2.0, 2.0),
        (Conv3d, "c_out", 2.0, 2.0),
        (Conv3d, "k_s", 4.0, 4.0),
        (Conv3d, "k_t", 2.0, 2.0),
        (Conv3d, "t", 1.0, 2.0),
        (Conv3d, "h", 1.0, 2.0),
        (Conv3d, "w", 1.0, 2.0),
        (Conv3d, "n", 1.0, 1.0),
        (Conv2p1d, "c_in", 2.0, 2.0),
        (Conv2p1d, "c_out", 2.0, 2.0),
        // k_s² + k_t: 1 + 1 → 4 + 1.
        (Conv2p1d, "k_s", 2.5, 2.5),
        // 1 + 1 → 1 + 2.
        (Conv2p1d, "k_t", 1.5, 1.5),
        (Conv2p1d, "t", 1.0, 2.0),
        (Conv2p1d, "h", 1.0, 2.0),
        (Conv2p1d, "w", 1.0, 2.0),
        (Conv2d, "c_in", 2.0, 2.0),
        (Conv2d, "c_out", 2.0, 2.0),
        (Conv2d, "k_s", 4.0, 4.0),
        (Conv2d, "k_t", 1.0, 1.0),
        (Conv2d, "t", 1.0, 2.0),
        (Conv2d, "h", 1.0, 2.0),
        (Conv2d, "w", 1.0, 2.0),
        (Conv2d, "n", 1.0, 1.0),
        (Conv1dPoints, "c_in", 2.0, 2.0),
        (Conv1dPoints, "c_out", 2.0, 2.0),
        (Conv1dPoints, "k_p", 2.0, 2.0),
        (Conv1dPoints, "k_s", 1.0, 1.0),
        (Conv1dPoints, "n", 1.0, 2.0),
        (Conv1dPoints, "t", 1.0, 1.0),
        (Conv1dPoints, "h", 1.0, 1.0),
    ]
};

pub fn unit_dims() -> aknet::cost::OpDims {
    aknet::cost::OpDims {
        c_in: 1,
        c_out: 1,
        k_s: 1,
        k_t: 1,
        k_p: 1,
        t: 1,
        h: 1,
        w: 1,
        n: 1,
    }
}

/// Runs every doubling probe; returns the descriptions of those that fail.
pub fn doubling_failures() -> Vec<String> {
    use aknet::cost::op_cost;
    let mut bad = Vec::new();
    for &(kind, field, fp, ff) in DOUBLING {
        let base = op_cost(kind, unit_dims());
        let mut d = unit_dims();
        match field {
            "c_in" => d.c_in = 2,
            "c_out" => d.c_out = 2,
            "k_s" => d.k_s = 2,
            "k_t" => d.k_t = 2,
            "k_p" => d.k_p = 2,
            "t" => d.t = 2,
            "h" => d.h = 2,
            "w" => d.w = 2,
            "n" => d.n = 2,
            _ => unreachable!(),
        }
        let c = op_cost(kind, d);
        let (gp, gf) = (c.params as f64 / base.params as f64, c.flops as f64 / base.flops as f64);
        if gp != fp || gf != ff {
            bad.push(format!("{kind} {field}: params ×{gp} flops ×{gf}, expected ×{fp} ×{ff}"));
        }
    }
    bad
}

/// Cross-multiplied sides of `point flops / conv2d flops = α·k_p/k_s²`
/// for one layer pair with `N = α·T·H·W` points and `α = num/den`, so the
/// comparison is exact integer arithmetic.
pub fn point_ratio(alpha_num: u64, alpha_den: u64, c: u64, k: u64, (t, h, w): (u64, u64, u64)) -> (u64, u64) {
    use aknet::cost::{op_cost, OpDims, OpKind};
    let n = alpha_num * t * h * w / alpha_den;
    assert_eq!(n * alpha_den, alpha_num * t * h * w, "choose dims with integral N");
    let grid = op_cost(
        OpKind::Conv2d,
        OpDims { c_in: c, c_out: c, k_s: k, t, h, w, ..OpDims::default() },
    );
    let point = op_cost(
        OpKind::Conv1dPoints,
        OpDims { c_in: c, c_out: c, k_p: k, n, ..OpDims::default() },
    );
    (point.flops * alpha_den * k * k, grid.flops * alpha_num * k)
}
