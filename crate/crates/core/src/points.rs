//! Keypoint selection from a clip heatmap, frame-major ranking into a 1D
//! sequence, coordinate normalisation and the learned feature/position
//! transform.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Init, NodeId, ParamStore, Tensor};

/// A feature-map position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

/// Selected keypoints in sequence order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Vec<Coord>,
    pub scores: Vec<f64>,
    /// Flat `t·H·W + y·W + x` position of each point, used to gather
    /// features from a `C×T×H×W` map.
    pub index: Vec<usize>,
    /// Extent `(T, H, W)` of the map the points were selected from.
    pub extent: (usize, usize, usize),
    pub ranked: bool,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of points that fall in each frame.
    pub fn per_frame_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.extent.0];
        for c in &self.coords {
            counts[c.t] += 1;
        }
        counts
    }

    /// `t,y,x,score` lines in sequence order.
    pub fn dump(&self) -> String {
        self.coords
            .iter()
            .zip(&self.scores)
            .map(|(c, s)| format!("{},{},{},{}\n", c.t, c.y, c.x, s))
            .collect()
    }
}

/// `N = round(α·T·H·W)` (halves round up), at least one.
pub fn sample_count(alpha: f64, t: usize, h: usize, w: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("sampling ratio {alpha} must lie in (0, 1]")));
    }
    let total = t * h * w;
    let n = (alpha * total as f64 + 0.5).floor() as usize;
    Ok(n.clamp(1, total))
}

/// Picks the `N` highest-scoring positions of `heatmap: T×H×W` across all
/// frames. Equal scores prefer the earlier `(t, y, x)`. Points come out in
/// that preference order (descending score).
pub fn select_topn<E: Element>(heatmap: &Tensor<E>, alpha: f64) -> Result<PointSet> {
    if heatmap.rank() != 3 {
        return Err(Error::Rank {
            op: "select_topn",
            expected: "3",
            found: heatmap.dims().to_vec(),
        });
    }
    if !heatmap.all_finite() {
        return Err(Error::NonFinite("select_topn"));
    }
    let (t, h, w) = (heatmap.dims()[0], heatmap.dims()[1], heatmap.dims()[2]);
    let n = sample_count(alpha, t, h, w)?;
    let scores = heatmap.data();
    let before = |a: &usize, b: &usize| scores[*b].partial_cmp(&scores[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if n < order.len() {
        order.select_nth_unstable_by(n - 1, before);
        order.truncate(n);
    }
    order.sort_unstable_by(before);
    Ok(PointSet {
        coords: order
            .iter()
            .map(|&i| Coord {
                t: i / (h * w),
                y: i / w % h,
                x: i % w,
            })
            .collect(),
        scores: order.iter().map(|&i| scores[i].as_f64()).collect(),
        index: order,
        extent: (t, h, w),
        ranked: false,
    })
}

/// Sort key `x + y + τ·t`.
pub fn rank_key(c: Coord, tau: f64) -> f64 {
    c.x as f64 + c.y as f64 + tau * c.t as f64
}

/// Stable descending sort of `points` by [`rank_key`].
pub fn rank_points(points: &PointSet, tau: f64) -> Result<PointSet> {
    if !(tau > 1.0) || !tau.is_finite() {
        return Err(Error::Config(format!("ranking weight tau = {tau} must exceed 1")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| rank_key(points.coords[b], tau).total_cmp(&rank_key(points.coords[a], tau)));
    Ok(PointSet {
        coords: order.iter().map(|&i| points.coords[i]).collect(),
        scores: order.iter().map(|&i| points.scores[i]).collect(),
        index: order.iter().map(|&i| points.index[i]).collect(),
        extent: points.extent,
        ranked: true,
    })
}

/// Point coordinates centred on their centroid and scaled to unit radius.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCoords {
    /// `(x, y, t)` per point.
    pub coords: Vec<[f64; 3]>,
    pub centroid: [f64; 3],
    /// Largest distance to the centroid before scaling.
    pub radius: f64,
}

impl NormalizedCoords {
    /// `3×N` tensor with rows `x`, `y`, `t`.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let n = self.coords.len();
        Tensor::from_fn([3, n], |i| E::lit(self.coords[i % n][i / n]))
    }
}

pub fn normalize_coords(coords: &[Coord]) -> Result<NormalizedCoords> {
    if coords.is_empty() {
        return Err(Error::invalid("normalize_coords: no points"));
    }
    let raw: Vec<[f64; 3]> = coords.iter().map(|c| [c.x as f64, c.y as f64, c.t as f64]).collect();
    let n = raw.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &raw {
        for k in 0..3 {
            centroid[k] += p[k] / n;
        }
    }
    let centered: Vec<[f64; 3]> = raw
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let radius = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius < 1e-9 { 1.0 } else { radius };
    Ok(NormalizedCoords {
        coords: centered.iter().map(|p| [p[0] / scale, p[1] / scale, p[2] / scale]).collect(),
        centroid,
        radius,
    })
}

/// Widths of the transform network: per-point layers, then dense layers
/// before the final `(C+3)²` output.
pub const TNET_POINT_WIDTHS: [usize; 3] = [64, 128, 256];
pub const TNET_DENSE_WIDTHS: [usize; 2] = [128, 64];

/// Learned `(C+3)×(C+3)` transform of coordinate-augmented point features.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformNet {
    /// Feature channels `C`; the network sees `C + 3` inputs.
    pub channels: usize,
}

impl TransformNet {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }

    pub fn width(&self) -> usize {
        self.channels + 3
    }

    /// Initialises weights so the produced matrix is the identity.
    pub fn init_params<E: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<E>, rng: &mut R) {
        let mut cin = self.width();
        for (i, &cout) in TNET_POINT_WIDTHS.iter().enumerate() {
            store.init(format!("tnet.conv{}.weight", i + 1), [cout, cin, 1], Init::He { fan_in: cin }, rng);
            store.init(format!("tnet.conv{}.bias", i + 1), [cout], Init::Zeros, rng);
            cin = cout;
        }
        for (i, &out) in TNET_DENSE_WIDTHS.iter().enumerate() {
            store.init(format!("tnet.fc{}.weight", i + 1), [out, cin], Init::He { fan_in: cin }, rng);
            store.init(format!("tnet.fc{}.bias", i + 1), [out], Init::Zeros, rng);
            cin = out;
        }
        let d = self.width();
        store.init("tnet.fc3.weight", [d * d, cin], Init::Zeros, rng);
        store.insert(
            "tnet.fc3.bias",
            Tensor::from_fn([d * d], |i| if i / d == i % d { E::one() } else { E::zero() }),
        );
    }

    /// `A` for augmented points `x: (C+3)×N`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for i in 1..=TNET_POINT_WIDTHS.len() {
            let w = g.param(store, &format!("tnet.conv{i}.weight"))?;
            let b = g.param(store, &format!("tnet.conv{i}.bias"))?;
            h = g.conv1d(h, w, 1, 0)?;
            h = g.channel_affine(h, None, b)?;
            h = g.relu(h);
        }
        h = g.max_over_columns(h)?;
        for i in 1..=3 {
            let w = g.param(store, &format!("tnet.fc{i}.weight"))?;
            let b = g.param(store, &format!("tnet.fc{i}.bias"))?;
            h = g.dense(h, w, b)?;
            if i < 3 {
                h = g.relu(h);
            }
        }
        let d = self.width();
        g.reshape(h, [d, d])
    }
}

/// Row-vector transform `concat(S, D′)·A` for column-stored points
/// `s: C×N`, `d: 3×N`. Keeps the first `keep` output channels.
pub fn apply_transform<E: Element>(
    g: &mut Graph<E>,
    s: NodeId,
    d: NodeId,
    a: NodeId,
    keep: usize,
) -> Result<NodeId> {
    let aug = g.concat(&[s, d])?;
    let at = g.transpose(a)?;
    let out = g.matmul(at, aug)?;
    if keep == g.dims(out)[0] {
        Ok(out)
    } else {
        g.narrow(out, 0, keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coord(x: usize, y: usize, t: usize) -> Coord {
        Coord { t, y, x }
    }

    fn set_of(coords: Vec<Coord>) -> PointSet {
        let n = coords.len();
        PointSet {
            index: (0..n).collect(),
            scores: vec![0.0; n],
            coords,
            extent: (4, 4, 4),
            ranked: false,
        }
    }

    #[test]
    fn picks_top_two_of_four() {
        let h = Tensor::new([1, 2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let p = select_topn(&h, 0.5).unwrap();
        assert_eq!(p.coords, vec![coord(0, 0, 0), coord(1, 1, 0)]);
        assert_eq!(p.index, vec![0, 3]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let h = Tensor::<f64>::zeros([2, 3, 3]);
        let p = select_topn(&h, 1.0).unwrap();
        assert_eq!(p.len(), 18);
        // All tied: earliest positions first.
        assert_eq!(p.index, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_ratio() {
        let h = Tensor::<f64>::zeros([1, 2, 2]);
        assert!(select_topn(&h, 0.0).is_err());
        assert!(select_topn(&h, 1.5).is_err());
    }

    #[test]
    fn count_rounds_half_up_and_clamps() {
        assert_eq!(sample_count(0.5, 1, 1, 3).unwrap(), 2);
        assert_eq!(sample_count(0.01, 1, 2, 2).unwrap(), 1);
        assert_eq!(sample_count(0.3, 8, 14, 14).unwrap(), 470);
    }

    #[test]
    fn ranks_by_weighted_coordinate_sum() {
        let p = set_of(vec![coord(1, 1, 0), coord(0, 0, 1), coord(3, 3, 0)]);
        let r = rank_points(&p, 10.0).unwrap();
        assert_eq!(r.coords, vec![coord(0, 0, 1), coord(3, 3, 0), coord(1, 1, 0)]);
        assert_eq!(r.index, vec![1, 2, 0]);
        assert!(r.ranked);
    }

    #[test]
    fn ranking_rejects_small_tau() {
        assert!(rank_points(&set_of(vec![coord(0, 0, 0)]), 1.0).is_err());
    }

    #[test]
    fn symmetric_pair_normalizes_to_unit() {
        let n = normalize_coords(&[coord(0, 0, 0), coord(2, 0, 0)]).unwrap();
        assert_eq!(n.coords, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let single = normalize_coords(&[coord(3, 2, 1)]).unwrap();
        assert_eq!(single.coords, vec![[0.0; 3]]);
    }

    #[test]
    fn transform_starts_as_identity() {
        let net = TransformNet::new(4);
        let mut store = ParamStore::<f64>::new();
        net.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([7, 5], |i| i as f64 * 0.1));
        let a = net.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.dims(a), &[7, 7]);
        let eye = Tensor::from_fn([7, 7], |i| if i / 7 == i % 7 { 1.0 } else { 0.0 });
        assert_eq!(g.value(a), &eye);
    }

    #[test]
    fn scaled_identity_doubles_features() {
        let mut g = Graph::new();
        let s = Tensor::from_fn([2, 3], |i| i as f64);
        let sn = g.input(s.clone());
        let dn = g.input(Tensor::full([3, 3], 5.0));
        let a = g.input(Tensor::from_fn([5, 5], |i| if i / 5 == i % 5 { 2.0 } else { 0.0 }));
        let out = apply_transform(&mut g, sn, dn, a, 2).unwrap();
        assert_eq!(g.value(out), &s.map(|v| 2.0 * v));
    }
}
