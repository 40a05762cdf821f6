//! Compaction of the 2D back-end into a 1D point network, the point
//! forward pass and fusion with the pooled feature map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NodeId, ParamStore, Tensor};

/// Suffix of every compacted parameter name.
pub const COMPACT_SUFFIX: &str = ".1d";
pub const FUSE: &str = "fuse.fc";

/// Spatial kernel axis summed away by compaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CompactAxis {
    #[default]
    Width,
    Height,
}

impl fmt::Display for CompactAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompactAxis::Width => "width",
            CompactAxis::Height => "height",
        })
    }
}

impl FromStr for CompactAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "width" => Ok(CompactAxis::Width),
            "height" => Ok(CompactAxis::Height),
            other => Err(Error::Config(format!("unknown compaction axis `{other}`"))),
        }
    }
}

/// What to do with temporal-shift layers of the back-end, which have no
/// point-sequence counterpart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShiftPolicy {
    #[default]
    Drop,
    Reject,
}

/// `ŵ[o,i,a] = Σ_b w[o,i,a,b]` (width) or `Σ_a w[o,i,a,b]` (height).
pub fn compact_kernel<E: Element>(w: &Tensor<E>, axis: CompactAxis) -> Result<Tensor<E>> {
    if w.rank() != 4 {
        return Err(Error::Rank {
            op: "compact_kernel",
            expected: "4",
            found: w.dims().to_vec(),
        });
    }
    let (co, ci, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
    let d = w.data();
    let out = match axis {
        CompactAxis::Width => Tensor::from_fn([co, ci, kh], |i| {
            d[i * kw..(i + 1) * kw].iter().copied().fold(E::zero(), |a, b| a + b)
        }),
        CompactAxis::Height => Tensor::from_fn([co, ci, kw], |i| {
            let (plane, b) = (i / kw, i % kw);
            (0..kh).fold(E::zero(), |a, r| a + d[(plane * kh + r) * kw + b])
        }),
    };
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLayerKind {
    Conv1d,
    Relu,
    AvgPool1d,
    Residual1d,
}

/// A layer of the 1D point network, derived from one back-end layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLayer {
    /// Name of the source 2D layer; parameters live under
    /// `{name}…{COMPACT_SUFFIX}`.
    pub name: String,
    pub kind: PointLayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PointLayer {
    pub fn has_projection(&self) -> bool {
        self.kind == PointLayerKind::Residual1d && (self.in_channels != self.out_channels || self.stride != 1)
    }

    /// Sequence length after this layer for input length `n`.
    pub fn out_len(&self, n: usize) -> usize {
        match self.kind {
            PointLayerKind::Conv1d | PointLayerKind::Residual1d => {
                (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
            }
            PointLayerKind::AvgPool1d => (n / self.kernel).max(1),
            PointLayerKind::Relu => n,
        }
    }
}

/// Maps every back-end layer to its 1D counterpart with identical
/// channels, strides, padding and residual topology.
pub fn compact_network(back: &[LayerSpec], shifts: ShiftPolicy) -> Result<Vec<PointLayer>> {
    let mut out = Vec::with_capacity(back.len());
    for layer in back {
        let kind = match layer.kind {
            LayerKind::Conv2d => PointLayerKind::Conv1d,
            LayerKind::Relu => PointLayerKind::Relu,
            LayerKind::AvgPool => PointLayerKind::AvgPool1d,
            LayerKind::Residual => PointLayerKind::Residual1d,
            LayerKind::TemporalShift => match shifts {
                ShiftPolicy::Drop => continue,
                ShiftPolicy::Reject => return Err(Error::NoPointCounterpart(layer.name.clone())),
            },
        };
        out.push(PointLayer {
            name: layer.name.clone(),
            kind,
            in_channels: layer.in_channels,
            out_channels: layer.out_channels,
            kernel: layer.kernel,
            stride: layer.stride,
            padding: layer.padding,
        });
    }
    Ok(out)
}

fn conv_prefixes(layer: &LayerSpec) -> Vec<String> {
    let n = &layer.name;
    match layer.kind {
        LayerKind::Conv2d => vec![n.clone()],
        LayerKind::Residual => {
            let mut v = vec![format!("{n}.conv1"), format!("{n}.conv2")];
            if layer.has_projection() {
                v.push(format!("{n}.proj"));
            }
            v
        }
        _ => Vec::new(),
    }
}

/// Compacts the trained 2D back-end parameters in `src` into 1D point
/// parameters (weights summed along `axis`, scale/shift copied), all
/// suffixed with [`COMPACT_SUFFIX`].
pub fn compact_params<E: Element>(back: &[LayerSpec], src: &ParamStore<E>, axis: CompactAxis) -> Result<ParamStore<E>> {
    let mut out = ParamStore::new();
    for layer in back {
        for prefix in conv_prefixes(layer) {
            let w = src.get(&format!("{prefix}.weight"))?;
            out.insert(format!("{prefix}.weight{COMPACT_SUFFIX}"), compact_kernel(w, axis)?);
            for part in ["scale", "shift"] {
                let name = format!("{prefix}.{part}");
                out.insert(format!("{name}{COMPACT_SUFFIX}"), src.get(&name)?.clone());
            }
        }
    }
    Ok(out)
}

fn conv1d_affine<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    prefix: &str,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight{COMPACT_SUFFIX}"))?;
    let s = g.param(store, &format!("{prefix}.scale{COMPACT_SUFFIX}"))?;
    let b = g.param(store, &format!("{prefix}.shift{COMPACT_SUFFIX}"))?;
    let y = g.conv1d(x, w, stride, padding)?;
    g.channel_affine(y, Some(s), b)
}

/// Runs the ranked point sequence `x: C×N` through the point network and
/// returns `e_f: C′×N′`.
pub fn point_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    layers: &[PointLayer],
    mut x: NodeId,
) -> Result<NodeId> {
    for layer in layers {
        x = match layer.kind {
            PointLayerKind::Conv1d => conv1d_affine(g, store, x, &layer.name, layer.stride, layer.padding)?,
            PointLayerKind::Relu => g.relu(x),
            PointLayerKind::AvgPool1d => {
                let k = layer.kernel.min(g.dims(x)[1]);
                g.avg_pool(x, k)?
            }
            PointLayerKind::Residual1d => {
                let n = &layer.name;
                let h = conv1d_affine(g, store, x, &format!("{n}.conv1"), layer.stride, layer.padding)?;
                let h = g.relu(h);
                let h = conv1d_affine(g, store, h, &format!("{n}.conv2"), 1, layer.padding)?;
                let skip = if layer.has_projection() {
                    conv1d_affine(g, store, x, &format!("{n}.proj"), layer.stride, 0)?
                } else {
                    x
                };
                let y = g.add(h, skip)?;
                g.relu(y)
            }
        };
    }
    Ok(x)
}

/// Dense fusion head over `concat(GAP(X_l), mean(e_f))`, or over
/// `mean(e_f)` alone when `concat` is off.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub map_channels: usize,
    pub point_channels: usize,
    pub classes: usize,
    pub concat: bool,
}

impl FusionHead {
    pub fn in_features(&self) -> usize {
        self.point_channels + if self.concat { self.map_channels } else { 0 }
    }

    pub fn init_params<E: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<E>, rng: &mut R) {
        crate::backbone::init_head(FUSE, self.in_features(), self.classes, store, rng);
    }

    /// Starts the point columns from a trained pooled classifier
    /// (`classes×point_channels` weight and bias) and zeroes the map
    /// columns, so the fused head initially predicts what the 2D network
    /// did from the same features.
    pub fn init_from_head<E: Element>(&self, store: &mut ParamStore<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<()> {
        if weight.dims() != [self.classes, self.point_channels] || bias.dims() != [self.classes] {
            return Err(Error::ShapeMismatch {
                op: "FusionHead::init_from_head",
                dim: "head weight element count",
                expected: self.classes * self.point_channels,
                found: weight.len(),
            });
        }
        let (fin, off) = (self.in_features(), self.in_features() - self.point_channels);
        let w = Tensor::from_fn([self.classes, fin], |i| {
            let (r, c) = (i / fin, i % fin);
            if c < off {
                E::zero()
            } else {
                weight.data()[r * self.point_channels + c - off]
            }
        });
        store.insert(format!("{FUSE}.weight"), w);
        store.insert(format!("{FUSE}.bias"), bias.clone());
        Ok(())
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x_l: NodeId, e_f: NodeId) -> Result<NodeId> {
        let pooled_points = g.global_avg_pool(e_f)?;
        let features = if self.concat {
            let pooled_map = g.global_avg_pool(x_l)?;
            g.concat(&[pooled_map, pooled_points])?
        } else {
            pooled_points
        };
        let w = g.param(store, &format!("{FUSE}.weight"))?;
        let b = g.param(store, &format!("{FUSE}.bias"))?;
        g.dense(features, w, b)
    }
}
