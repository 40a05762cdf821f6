//! Analytical parameter and multiply-accumulate counts for grid and point
//! convolutions, aggregated over the baseline and keypoint networks.
//!
//! Only weight-input products are counted; biases, per-channel affine
//! terms, activations and pooling are free.

use std::fmt::{self, Write as _};

use crate::backbone::{self, LayerKind, LayerSpec, Stage};
use crate::classifier::PointLayerKind;
use crate::error::Result;
use crate::model::{layer_extent, AkNet, ModelConfig};
use crate::points::{self, TNET_DENSE_WIDTHS, TNET_POINT_WIDTHS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv3d,
    Conv2p1d,
    Conv2d,
    Conv1dPoints,
    /// Fully connected layer applied `n` times.
    Dense,
    /// Parameter-free products: `c_in·c_out` multiplies per position, `n`
    /// positions.
    Product,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv3d => "conv3d",
            OpKind::Conv2p1d => "conv2p1d",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv1dPoints => "conv1d_points",
            OpKind::Dense => "dense",
            OpKind::Product => "product",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Operator dimensions; fields a kind does not use are ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpDims {
    pub c_in: u64,
    pub c_out: u64,
    pub k_s: u64,
    pub k_t: u64,
    pub k_p: u64,
    pub t: u64,
    pub h: u64,
    pub w: u64,
    pub n: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCost {
    pub kind: OpKind,
    pub dims: OpDims,
    pub params: u64,
    pub flops: u64,
}

pub fn op_cost(kind: OpKind, d: OpDims) -> OpCost {
    let cc = d.c_in * d.c_out;
    let thw = d.t * d.h * d.w;
    let (params, flops) = match kind {
        OpKind::Conv3d => {
            let p = cc * d.k_s * d.k_s * d.k_t;
            (p, p * thw)
        }
        OpKind::Conv2p1d => {
            let p = cc * (d.k_s * d.k_s + d.k_t);
            (p, p * thw)
        }
        OpKind::Conv2d => {
            let p = cc * d.k_s * d.k_s;
            (p, p * thw)
        }
        OpKind::Conv1dPoints => {
            let p = cc * d.k_p;
            (p, p * d.n)
        }
        OpKind::Dense => (cc, cc * d.n),
        OpKind::Product => (0, cc * d.n),
    };
    OpCost {
        kind,
        dims: d,
        params,
        flops,
    }
}

/// Which sub-network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    /// Layers up to the separating stage (shared by both networks).
    Front,
    /// 2D layers after the separating stage (baseline only).
    Back,
    /// Pooled classifier of the baseline.
    Head,
    Heatmap,
    Aux,
    Transform,
    /// Compacted 1D point layers.
    Point,
    Fusion,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Front => "front",
            Part::Back => "back",
            Part::Head => "head",
            Part::Heatmap => "heatmap",
            Part::Aux => "aux",
            Part::Transform => "transform",
            Part::Point => "point",
            Part::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub layer: String,
    pub part: Part,
    pub cost: OpCost,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Totals {
    type Output = Totals;

    fn add(self, o: Totals) -> Totals {
        Totals {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

/// Per-layer costs of the keypoint network and of the unsplit baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub split: Stage,
    pub alpha: f64,
    pub points: usize,
    pub ours: Vec<LayerCost>,
    pub baseline: Vec<LayerCost>,
}

fn sum<'a>(rows: impl Iterator<Item = &'a LayerCost>) -> Totals {
    rows.fold(Totals::default(), |acc, r| {
        acc + Totals {
            params: r.cost.params,
            flops: r.cost.flops,
        }
    })
}

impl CostReport {
    pub fn part(&self, part: Part) -> Totals {
        let rows = match part {
            Part::Back | Part::Head => &self.baseline,
            _ => &self.ours,
        };
        sum(rows.iter().filter(|r| r.part == part))
    }

    pub fn total(&self) -> Totals {
        sum(self.ours.iter())
    }

    pub fn baseline_total(&self) -> Totals {
        sum(self.baseline.iter())
    }

    /// Everything after the separating layer in the keypoint network.
    pub fn point_branch(&self) -> Totals {
        self.part(Part::Transform) + self.part(Part::Point) + self.part(Part::Fusion)
    }

    /// Everything after the separating layer in the baseline.
    pub fn back_end(&self) -> Totals {
        self.part(Part::Back) + self.part(Part::Head)
    }

    /// `1 - point_branch / back_end` in flops.
    pub fn back_end_reduction(&self) -> f64 {
        1.0 - self.point_branch().flops as f64 / self.back_end().flops as f64
    }

    /// `1 - total / baseline_total` in flops.
    pub fn reduction(&self) -> f64 {
        1.0 - self.total().flops as f64 / self.baseline_total().flops as f64
    }

    /// Tab-separated `layer  kind  params  flops` table of the keypoint
    /// network followed by the baseline, with part totals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tkind\tparams\tflops\n");
        for (label, rows) in [("ours", &self.ours), ("baseline", &self.baseline)] {
            for r in rows.iter() {
                let _ = writeln!(s, "{label}/{}\t{}\t{}\t{}", r.layer, r.cost.kind, r.cost.params, r.cost.flops);
            }
        }
        let parts = [
            Part::Front,
            Part::Heatmap,
            Part::Aux,
            Part::Transform,
            Part::Point,
            Part::Fusion,
            Part::Back,
            Part::Head,
        ];
        for p in parts {
            let t = self.part(p);
            let _ = writeln!(s, "total/{}\t-\t{}\t{}", p.as_str(), t.params, t.flops);
        }
        for (name, t) in [("ours", self.total()), ("baseline", self.baseline_total())] {
            let _ = writeln!(s, "total/{name}\t-\t{}\t{}", t.params, t.flops);
        }
        s
    }
}

fn conv2d_row(layer: String, part: Part, cin: usize, cout: usize, k: usize, (t, h, w): (usize, usize, usize)) -> LayerCost {
    LayerCost {
        layer,
        part,
        cost: op_cost(
            OpKind::Conv2d,
            OpDims {
                c_in: cin as u64,
                c_out: cout as u64,
                k_s: k as u64,
                t: t as u64,
                h: h as u64,
                w: w as u64,
                ..OpDims::default()
            },
        ),
    }
}

fn conv1d_row(layer: String, part: Part, cin: usize, cout: usize, k: usize, n: usize) -> LayerCost {
    LayerCost {
        layer,
        part,
        cost: op_cost(
            OpKind::Conv1dPoints,
            OpDims {
                c_in: cin as u64,
                c_out: cout as u64,
                k_p: k as u64,
                n: n as u64,
                ..OpDims::default()
            },
        ),
    }
}

fn flat_row(layer: String, part: Part, kind: OpKind, cin: usize, cout: usize, n: usize) -> LayerCost {
    LayerCost {
        layer,
        part,
        cost: op_cost(
            kind,
            OpDims {
                c_in: cin as u64,
                c_out: cout as u64,
                n: n as u64,
                ..OpDims::default()
            },
        ),
    }
}

/// Costs of 2D `layers` starting from extent `(t, h, w)`; returns the
/// extent after the last layer.
fn grid_layers(
    layers: &[LayerSpec],
    part: Part,
    (t, mut h, mut w): (usize, usize, usize),
    rows: &mut Vec<LayerCost>,
) -> (usize, usize, usize) {
    for l in layers {
        let (oh, ow) = (layer_extent(l, h), layer_extent(l, w));
        let n = &l.name;
        match l.kind {
            LayerKind::Conv2d => rows.push(conv2d_row(n.clone(), part, l.in_channels, l.out_channels, l.kernel, (t, oh, ow))),
            LayerKind::Residual => {
                rows.push(conv2d_row(format!("{n}.conv1"), part, l.in_channels, l.out_channels, l.kernel, (t, oh, ow)));
                rows.push(conv2d_row(format!("{n}.conv2"), part, l.out_channels, l.out_channels, l.kernel, (t, oh, ow)));
                if l.has_projection() {
                    rows.push(conv2d_row(format!("{n}.proj"), part, l.in_channels, l.out_channels, 1, (t, oh, ow)));
                }
            }
            LayerKind::Relu | LayerKind::AvgPool | LayerKind::TemporalShift => {}
        }
        (h, w) = (oh, ow);
    }
    (t, h, w)
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad).saturating_sub(k) / stride + 1
}

/// Cost of the keypoint network described by `cfg` and of the unsplit
/// baseline on the same clip size.
pub fn network_cost(cfg: &ModelConfig) -> Result<CostReport> {
    let net = AkNet::new(cfg.clone())?;
    let (c, t, h, w) = cfg.split_extent()?;
    let n = points::sample_count(cfg.alpha, t, h, w)?;
    let classes = cfg.classes;

    let mut ours = Vec::new();
    grid_layers(&net.split.front, Part::Front, (cfg.clip_len, cfg.height, cfg.width), &mut ours);

    let hidden = net.head.hidden();
    ours.push(flat_row("kp.se.w1".into(), Part::Heatmap, OpKind::Dense, c, hidden, t));
    ours.push(flat_row("kp.se.w2".into(), Part::Heatmap, OpKind::Dense, hidden, c, t));
    ours.push(flat_row("kp.weighted_sum".into(), Part::Heatmap, OpKind::Product, c, 1, t * h * w));
    ours.push(flat_row("kp.reweight".into(), Part::Heatmap, OpKind::Product, c, 1, t * h * w));

    let (mut ah, mut aw) = (h, w);
    for name in ["aux.conv1", "aux.conv2"] {
        (ah, aw) = (conv_out(ah, 3, 2, 1), conv_out(aw, 3, 2, 1));
        ours.push(conv2d_row(name.into(), Part::Aux, c, c, 3, (t, ah, aw)));
    }
    ours.push(flat_row("aux.fc".into(), Part::Aux, OpKind::Dense, c, classes, 1));

    if cfg.transform {
        let mut cin = c + 3;
        for (i, &cout) in TNET_POINT_WIDTHS.iter().enumerate() {
            ours.push(conv1d_row(format!("tnet.conv{}", i + 1), Part::Transform, cin, cout, 1, n));
            cin = cout;
        }
        for (i, &out) in TNET_DENSE_WIDTHS.iter().enumerate() {
            ours.push(flat_row(format!("tnet.fc{}", i + 1), Part::Transform, OpKind::Dense, cin, out, 1));
            cin = out;
        }
        let d = c + 3;
        ours.push(flat_row("tnet.fc3".into(), Part::Transform, OpKind::Dense, cin, d * d, 1));
        let keep = if cfg.keep_coords { d } else { c };
        ours.push(flat_row("tnet.apply".into(), Part::Transform, OpKind::Product, d, keep, n));
    }

    let mut len = n;
    for l in &net.point_layers {
        let nm = &l.name;
        match l.kind {
            PointLayerKind::Conv1d => {
                len = conv_out(len, l.kernel, l.stride, l.padding);
                ours.push(conv1d_row(format!("{nm}.1d"), Part::Point, l.in_channels, l.out_channels, l.kernel, len));
            }
            PointLayerKind::Residual1d => {
                let out = conv_out(len, l.kernel, l.stride, l.padding);
                ours.push(conv1d_row(format!("{nm}.conv1.1d"), Part::Point, l.in_channels, l.out_channels, l.kernel, out));
                ours.push(conv1d_row(format!("{nm}.conv2.1d"), Part::Point, l.out_channels, l.out_channels, l.kernel, out));
                if l.has_projection() {
                    ours.push(conv1d_row(format!("{nm}.proj.1d"), Part::Point, l.in_channels, l.out_channels, 1, out));
                }
                len = out;
            }
            PointLayerKind::AvgPool1d => len = l.out_len(len),
            PointLayerKind::Relu => {}
        }
    }
    ours.push(flat_row(
        crate::classifier::FUSE.into(),
        Part::Fusion,
        OpKind::Dense,
        net.fusion.in_features(),
        classes,
        1,
    ));

    let mut baseline: Vec<LayerCost> = ours.iter().filter(|r| r.part == Part::Front).cloned().collect();
    grid_layers(&net.split.back, Part::Back, (t, h, w), &mut baseline);
    baseline.push(flat_row(
        backbone::HEAD.into(),
        Part::Head,
        OpKind::Dense,
        cfg.backbone.out_channels(),
        classes,
        1,
    ));

    Ok(CostReport {
        split: cfg.split,
        alpha: cfg.alpha,
        points: n,
        ours,
        baseline,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub split: Stage,
    pub alpha: f64,
    pub flops: u64,
    pub params: u64,
}

impl SweepRow {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Sampling ratios swept by default.
pub const SWEEP_ALPHAS: [f64; 3] = [0.1, 0.3, 0.5];

/// Total cost for every `(split, alpha)` pair, splits outermost.
pub fn sweep(base: &ModelConfig, splits: &[Stage], alphas: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(splits.len() * alphas.len());
    for &split in splits {
        for &alpha in alphas {
            let cfg = ModelConfig {
                split,
                alpha,
                ..base.clone()
            };
            let total = network_cost(&cfg)?.total();
            rows.push(SweepRow {
                split,
                alpha,
                flops: total.flops,
                params: total.params,
            });
        }
    }
    Ok(rows)
}

/// `split  alpha  gflops  params` table.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("split\talpha\tgflops\tparams\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", r.split, r.alpha, r.gflops(), r.params);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(c_in: u64, c_out: u64, k: u64, t: u64, hw: u64) -> OpDims {
        OpDims {
            c_in,
            c_out,
            k_s: k,
            k_t: 1,
            k_p: k,
            t,
            h: hw,
            w: hw,
            n: 0,
        }
    }

    #[test]
    fn table_examples() {
        let d = dims(64, 128, 3, 8, 14);
        let c2 = op_cost(OpKind::Conv2d, d);
        assert_eq!(c2.params, 73_728);
        assert_eq!(c2.flops, 115_605_504);
        let p = op_cost(OpKind::Conv1dPoints, OpDims { n: 470, ..d });
        assert_eq!(p.flops, 11_550_720);
        assert_eq!(op_cost(OpKind::Conv3d, d), OpCost { kind: OpKind::Conv3d, ..c2 });
    }

    #[test]
    fn default_config_is_cheaper_than_baseline() {
        let r = network_cost(&ModelConfig::default()).unwrap();
        assert_eq!(r.points, 154);
        assert!(r.total().flops < r.baseline_total().flops);
        assert_eq!(
            r.total(),
            [Part::Front, Part::Heatmap, Part::Aux, Part::Transform, Part::Point, Part::Fusion]
                .into_iter()
                .map(|p| r.part(p))
                .fold(Totals::default(), |a, b| a + b)
        );
        assert_eq!(r.baseline_total(), r.part(Part::Front) + r.back_end());
    }

    #[test]
    fn tsv_has_header_and_totals() {
        let r = network_cost(&ModelConfig::default()).unwrap();
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("layer\tkind\tparams\tflops\n"));
        assert!(tsv.contains("ours/s4.block.conv1.1d\tconv1d_points\t"));
        assert!(tsv.contains("baseline/s4.block.conv1\tconv2d\t"));
    }
}
