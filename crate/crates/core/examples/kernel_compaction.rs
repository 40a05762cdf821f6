//! Shows that a 2D convolution over a map that is constant along the
//! width equals a 1D convolution with the width-summed kernel.

use aknet::classifier::{compact_kernel, CompactAxis};
use aknet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aknet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout, n, width) = (3, 5, 12, 7);
    let w = Tensor::from_fn([cout, cin, 3, 3], |_| rng.random_range(-1.0..1.0));
    let seq: Vec<f64> = (0..cin * n).map(|_| rng.random_range(-1.0..1.0)).collect();

    // The sequence laid out along the height and repeated across the width.
    let x2 = Tensor::from_fn([cin, n, width], |i| seq[i / (n * width) * n + i / width % n]);
    let x1 = Tensor::new([cin, n], seq)?;
    let w1 = compact_kernel(&w, CompactAxis::Width)?;

    let mut g: Graph<f64> = Graph::new();
    let (a, b) = (g.input(x2), g.input(w.clone()));
    let y2 = g.conv2d(a, b, 1, 1)?;
    let (c, d) = (g.input(x1), g.input(w1));
    let y1 = g.conv1d(c, d, 1, 1)?;

    // Compare an interior column; border columns see zero padding.
    let col = width / 2;
    let mut worst = 0f64;
    for o in 0..cout {
        for i in 0..n {
            let v2 = g.value(y2).at(&[o, i, col]);
            let v1 = g.value(y1).at(&[o, i]);
            worst = worst.max((v2 - v1).abs());
        }
    }
    println!("kernel {:?} → {:?}", w.dims(), g.dims(d));
    println!("max |conv2d - conv1d| on column {col}: {worst:.2e}");
    Ok(())
}
