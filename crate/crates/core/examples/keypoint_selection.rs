//! Selects the top 30% of a hand-made heatmap with a bright blob moving
//! right, ranks the points frame-major and prints the `t,y,x,score` dump.

use aknet::points::{normalize_coords, rank_points, select_topn};
use aknet::Tensor;

fn main() -> aknet::Result<()> {
    let (t, h, w) = (4usize, 6usize, 6usize);
    let heat = Tensor::from_fn([t, h, w], |i| {
        let (f, y, x) = (i / (h * w), i / w % h, i % w);
        let (cy, cx) = (2.5, 1.0 + f as f64);
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        (-d2 / 2.0).exp()
    });

    let picked = select_topn(&heat, 0.3)?;
    println!("{} of {} positions selected", picked.len(), t * h * w);
    println!("per-frame counts {:?}", picked.per_frame_counts());

    let ranked = rank_points(&picked, (h + w) as f64)?;
    print!("{}", ranked.dump());

    let norm = normalize_coords(&ranked.coords)?;
    println!("centroid {:?} radius {:.3}", norm.centroid, norm.radius);
    Ok(())
}
