//! The two trainable models: the plain backbone classifier (stage 1) and
//! the keypoint network built from it (stage 2).

use rand::Rng;

use crate::backbone::{self, Backbone, BackboneConfig, LayerSpec, NetworkSplit, Stage};
use crate::classifier::{self, CompactAxis, FusionHead, PointLayer, ShiftPolicy, COMPACT_SUFFIX};
use crate::error::{Error, Result};
use crate::keypoint::{HeatmapNodes, KeypointHead};
use crate::points::{self, PointSet, TransformNet};
use crate::tensor::{Element, Graph, NodeId, ParamStore, Tensor};

/// Architecture and pipeline switches shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    /// Stage after which the backbone is separated.
    pub split: Stage,
    /// Fraction of feature-map positions kept as keypoints.
    pub alpha: f64,
    /// Temporal ranking weight; `None` uses `H + W` of the separating map.
    pub tau: Option<f64>,
    pub rank: bool,
    pub transform: bool,
    pub concat: bool,
    /// Keep the three coordinate channels after the transform (widening
    /// the first point layer) instead of truncating to `C`.
    pub keep_coords: bool,
    pub reduction: usize,
    pub compact_axis: CompactAxis,
    pub shift_policy: ShiftPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            classes: 4,
            clip_len: 8,
            height: 32,
            width: 32,
            split: Stage::S3,
            alpha: 0.3,
            tau: None,
            rank: true,
            transform: true,
            concat: true,
            keep_coords: false,
            reduction: 4,
            compact_axis: CompactAxis::Width,
            shift_policy: ShiftPolicy::Drop,
        }
    }
}

impl ModelConfig {
    pub fn stage1(&self) -> Result<Backbone> {
        Backbone::new(self.backbone.clone(), self.classes)
    }

    /// `(C, T, H, W)` of the separating feature map.
    pub fn split_extent(&self) -> Result<(usize, usize, usize, usize)> {
        let c = self
            .backbone
            .channels_at(self.split)
            .ok_or_else(|| Error::Config(format!("backbone has no stage `{}`", self.split)))?;
        let mut h = self.height;
        let mut w = self.width;
        for layer in backbone::build_backbone(&self.backbone)? {
            if layer.stage > self.split {
                break;
            }
            h = layer_extent(&layer, h);
            w = layer_extent(&layer, w);
        }
        Ok((c, self.clip_len, h, w))
    }

    pub fn effective_tau(&self) -> Result<f64> {
        let (_, _, h, w) = self.split_extent()?;
        Ok(self.tau.unwrap_or((h + w) as f64))
    }
}

/// Spatial extent after `layer` for input extent `n`.
pub fn layer_extent(layer: &LayerSpec, n: usize) -> usize {
    use crate::backbone::LayerKind::*;
    match layer.kind {
        Conv2d | Residual => (n + 2 * layer.padding - layer.kernel) / layer.stride + 1,
        AvgPool => n / layer.kernel,
        Relu | TemporalShift => n,
    }
}

/// Everything one stage-2 forward pass produces.
#[derive(Clone, Debug)]
pub struct AkOutput {
    pub logits: NodeId,
    pub aux_logits: NodeId,
    pub heatmap: HeatmapNodes,
    pub energy: NodeId,
    pub features: NodeId,
    pub points: PointSet,
}

/// Stage-2 network: front layers, heatmap head with auxiliary classifier,
/// keypoint selection and ranking, transform net, compacted point network
/// and fusion head.
#[derive(Clone, Debug)]
pub struct AkNet {
    pub config: ModelConfig,
    pub split: NetworkSplit,
    pub point_layers: Vec<PointLayer>,
    pub head: KeypointHead,
    pub tnet: TransformNet,
    pub fusion: FusionHead,
}

impl AkNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if !(config.alpha > 0.0 && config.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1]", config.alpha)));
        }
        if config.tau.is_some_and(|t| !(t > 1.0)) {
            return Err(Error::Config("tau must exceed 1".into()));
        }
        let layers = backbone::build_backbone(&config.backbone)?;
        let split = backbone::split_at(&layers, config.split)?;
        let mut point_layers = classifier::compact_network(&split.back, config.shift_policy)?;
        let c = split.split_channels();
        if config.keep_coords {
            if let Some(first) = point_layers.first_mut() {
                first.in_channels += 3;
            }
        }
        let head = KeypointHead::new(c, config.reduction, config.classes)?;
        let fusion = FusionHead {
            map_channels: c,
            point_channels: config.backbone.out_channels(),
            classes: config.classes,
            concat: config.concat,
        };
        Ok(Self {
            tnet: TransformNet::new(c),
            config,
            split,
            point_layers,
            head,
            fusion,
        })
    }

    /// Builds stage-2 parameters from a trained stage-1 store: front
    /// weights are copied, back-end weights compacted, the fusion head
    /// starts from the stage-1 classifier and the new modules are freshly
    /// initialised.
    pub fn params_from_stage1<E: Element, R: Rng + ?Sized>(&self, stage1: &ParamStore<E>, rng: &mut R) -> Result<ParamStore<E>> {
        let mut store = ParamStore::new();
        for layer in &self.split.front {
            for (name, _) in layer.param_shapes() {
                store.insert(name.clone(), stage1.get(&name)?.clone());
            }
        }
        let mut compact = classifier::compact_params(&self.split.back, stage1, self.config.compact_axis)?;
        if self.config.keep_coords {
            widen_first_layer(&mut compact, &self.point_layers)?;
        }
        store.extend_from(&compact);
        self.head.init_params(&mut store, rng);
        if self.config.transform {
            self.tnet.init_params(&mut store, rng);
        }
        let w = stage1.get(&format!("{}.weight", backbone::HEAD))?;
        let b = stage1.get(&format!("{}.bias", backbone::HEAD))?;
        self.fusion.init_from_head(&mut store, w, b)?;
        Ok(store)
    }

    /// Fresh parameters for every module (no stage-1 weights).
    pub fn init_params<E: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<E>> {
        let bb = self.config.stage1()?;
        let stage1: ParamStore<E> = bb.init_params(rng);
        self.params_from_stage1(&stage1, rng)
    }

    /// Forward pass on a `C×T×H×W` clip node.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, clip: NodeId) -> Result<AkOutput> {
        let x = backbone::forward_features(g, store, &self.split, clip)?;
        let heatmap = self.head.heatmap(g, store, x)?;
        let reweighted = g.channel_scale(x, heatmap.normalized)?;
        let aux_logits = self.head.aux_predict(g, store, reweighted)?;
        let energy = g.energy(heatmap.normalized);

        let mut points = points::select_topn(g.value(heatmap.normalized), self.config.alpha)?;
        if self.config.rank {
            points = points::rank_points(&points, self.config.effective_tau()?)?;
        }
        let s = g.gather_columns(x, &points.index)?;
        let c = self.split.split_channels();
        let seq = if self.config.transform || self.config.keep_coords {
            let coords = points::normalize_coords(&points.coords)?;
            let d = g.input(coords.to_tensor());
            let keep = if self.config.keep_coords { c + 3 } else { c };
            if self.config.transform {
                let aug = g.concat(&[s, d])?;
                let a = self.tnet.forward(g, store, aug)?;
                points::apply_transform(g, s, d, a, keep)?
            } else {
                g.concat(&[s, d])?
            }
        } else {
            s
        };
        let e_f = classifier::point_forward(g, store, &self.point_layers, seq)?;
        let logits = self.fusion.forward(g, store, x, e_f)?;
        Ok(AkOutput {
            logits,
            aux_logits,
            heatmap,
            energy,
            features: x,
            points,
        })
    }
}

/// Adds zero input columns for the three coordinate channels to the first
/// point layer's input-facing weights.
fn widen_first_layer<E: Element>(store: &mut ParamStore<E>, layers: &[PointLayer]) -> Result<()> {
    let Some(first) = layers.first() else {
        return Ok(());
    };
    let names = [
        format!("{}.conv1.weight{COMPACT_SUFFIX}", first.name),
        format!("{}.proj.weight{COMPACT_SUFFIX}", first.name),
        format!("{}.weight{COMPACT_SUFFIX}", first.name),
    ];
    for name in names {
        if let Ok(w) = store.get(&name) {
            let (co, ci, k) = (w.dims()[0], w.dims()[1], w.dims()[2]);
            let widened = Tensor::from_fn([co, ci + 3, k], |i| {
                let (o, rest) = (i / ((ci + 3) * k), i % ((ci + 3) * k));
                let (c, a) = (rest / k, rest % k);
                if c < ci {
                    w.data()[(o * ci + c) * k + a]
                } else {
                    E::zero()
                }
            });
            store.insert(name, widened);
        }
    }
    if first.kind == classifier::PointLayerKind::Residual1d && !store.contains(&format!("{}.proj.weight{COMPACT_SUFFIX}", first.name)) {
        return Err(Error::Config(
            "keep_coords needs a projection shortcut on the first point layer".into(),
        ));
    }
    Ok(())
}

/// Scalar pieces of the stage-2 objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub aux: f64,
    pub energy: f64,
    pub total: f64,
}

/// `(CE(y_cls) + CE(y_aux)) / 2 + r_e`, the regulariser term only when
/// `reg` is set. Returns the total node and its parts.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    out: &AkOutput,
    label: usize,
    reg: bool,
) -> Result<(NodeId, LossTerms)> {
    let cls = g.cross_entropy(out.logits, label)?;
    let aux = g.cross_entropy(out.aux_logits, label)?;
    let sum = g.add(cls, aux)?;
    let mut total = g.scale(sum, E::lit(0.5));
    if reg {
        total = g.add(total, out.energy)?;
    }
    let v = |g: &Graph<E>, n: NodeId| g.value(n).item().as_f64();
    let terms = LossTerms {
        cls: v(g, cls),
        aux: v(g, aux),
        energy: v(g, out.energy),
        total: v(g, total),
    };
    Ok((total, terms))
}
