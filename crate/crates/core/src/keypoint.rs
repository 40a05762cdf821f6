//! Heatmap head: squeeze-excitation channel weights per frame, a
//! channel-weighted heatmap normalised to `[0, 1]`, attention reweighting
//! of the features, an auxiliary classifier and the energy regulariser.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Init, NodeId, ParamStore};

pub const SE_W1: &str = "kp.se.w1";
pub const SE_W2: &str = "kp.se.w2";

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointHead {
    pub channels: usize,
    pub reduction: usize,
    pub classes: usize,
}

/// Graph nodes produced by [`KeypointHead::heatmap`].
#[derive(Clone, Copy, Debug)]
pub struct HeatmapNodes {
    /// Per-frame channel weights, `T×C`.
    pub weights: NodeId,
    /// Unnormalised scores, `T×H×W`.
    pub raw: NodeId,
    /// Min-max normalised scores in `[0, 1]`, `T×H×W`.
    pub normalized: NodeId,
}

impl KeypointHead {
    pub fn new(channels: usize, reduction: usize, classes: usize) -> Result<Self> {
        if channels == 0 || classes == 0 {
            return Err(Error::Config("keypoint head needs positive channels and classes".into()));
        }
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {reduction} must divide the channel count {channels}"
            )));
        }
        Ok(Self {
            channels,
            reduction,
            classes,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn init_params<E: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<E>, rng: &mut R) {
        let (c, h) = (self.channels, self.hidden());
        store.init(SE_W1, [h, c], Init::He { fan_in: c }, rng);
        store.init(SE_W2, [c, h], Init::Uniform(1.0 / (h as f64).sqrt()), rng);
        for name in ["aux.conv1", "aux.conv2"] {
            store.init(format!("{name}.weight"), [c, c, 3, 3], Init::He { fan_in: 9 * c }, rng);
            store.init(format!("{name}.bias"), [c], Init::Zeros, rng);
        }
        crate::backbone::init_head("aux.fc", c, self.classes, store, rng);
    }

    /// `ω = softmax(W2·relu(W1·Z))` per frame, where `Z` is the spatial
    /// mean of every channel. Returns a `T×C` node whose rows sum to one.
    pub fn channel_weights<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: NodeId) -> Result<NodeId> {
        let z = g.spatial_mean(x)?;
        let w1 = g.param(store, SE_W1)?;
        let w2 = g.param(store, SE_W2)?;
        let w1t = g.transpose(w1)?;
        let hidden = g.matmul(z, w1t)?;
        let hidden = g.relu(hidden);
        let w2t = g.transpose(w2)?;
        let logits = g.matmul(hidden, w2t)?;
        g.softmax(logits, 1)
    }

    pub fn heatmap<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: NodeId) -> Result<HeatmapNodes> {
        let weights = self.channel_weights(g, store, x)?;
        let raw = g.channel_weighted_sum(x, weights)?;
        let normalized = g.minmax_normalize(raw)?;
        Ok(HeatmapNodes {
            weights,
            raw,
            normalized,
        })
    }

    /// Two stride-2 convolutions with ReLU, global pooling and a dense
    /// layer on the reweighted features.
    pub fn aux_predict<E: Element>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for name in ["aux.conv1", "aux.conv2"] {
            let w = g.param(store, &format!("{name}.weight"))?;
            let b = g.param(store, &format!("{name}.bias"))?;
            h = g.conv2d(h, w, 2, 1)?;
            h = g.channel_affine(h, None, b)?;
            h = g.relu(h);
        }
        crate::backbone::forward_head(g, store, h, "aux.fc")
    }
}

/// `X̃ = H ⊙ X` applied to every channel.
pub fn attention_reweight<E: Element>(g: &mut Graph<E>, x: NodeId, h: NodeId) -> Result<NodeId> {
    g.channel_scale(x, h)
}

/// Mean of `4·H·(1−H)` over every position of the clip.
pub fn energy_reg<E: Element>(g: &mut Graph<E>, h: NodeId) -> NodeId {
    g.energy(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_with_store(c: usize) -> (KeypointHead, ParamStore<f64>) {
        let head = KeypointHead::new(c, 4, 3).unwrap();
        let mut store = ParamStore::new();
        head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (head, store)
    }

    #[test]
    fn zero_excitation_gives_uniform_weights() {
        let (head, mut store) = head_with_store(8);
        *store.get_mut(SE_W1).unwrap() = Tensor::zeros([2, 8]);
        *store.get_mut(SE_W2).unwrap() = Tensor::zeros([8, 2]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([8, 3, 2, 2], |i| i as f64));
        let w = head.channel_weights(&mut g, &store, x).unwrap();
        assert_eq!(g.dims(w), &[3, 8]);
        assert!(g.value(w).data().iter().all(|&v| (v - 0.125).abs() < 1e-12));
    }

    #[test]
    fn weights_are_per_frame_simplex() {
        let (head, store) = head_with_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([8, 4, 3, 3], |_| rng.random_range(-2.0..2.0)));
        let w = head.channel_weights(&mut g, &store, x).unwrap();
        for row in g.value(w).data().chunks(8) {
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_weights_select_a_channel() {
        let mut g = Graph::new();
        let x = Tensor::from_fn([3, 2, 2, 2], |i| i as f64);
        let xn = g.input(x.clone());
        let w = g.input(Tensor::from_fn([2, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 }));
        let raw = g.channel_weighted_sum(xn, w).unwrap();
        assert_eq!(g.value(raw).data(), &x.data()[8..16]);
    }

    #[test]
    fn heatmap_spans_unit_interval() {
        let (head, store) = head_with_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([8, 2, 4, 4], |_| rng.random_range(0.0..1.0)));
        let hm = head.heatmap(&mut g, &store, x).unwrap();
        let h = g.value(hm.normalized).data();
        let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn aux_head_emits_class_logits() {
        let (head, store) = head_with_store(8);
        let mut g = Graph::new();
        let x = g.input(Tensor::full([8, 2, 8, 8], 0.3));
        let y = head.aux_predict(&mut g, &store, x).unwrap();
        assert_eq!(g.dims(y), &[3]);
    }

    #[test]
    fn energy_reference_values() {
        let mut g: Graph<f64> = Graph::new();
        for (h, expected) in [(0.5, 1.0), (0.25, 0.75), (1.0, 0.0), (0.0, 0.0)] {
            let hn = g.input(Tensor::full([2, 3, 3], h));
            let e = energy_reg(&mut g, hn);
            assert_eq!(g.value(e).item(), expected);
        }
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(KeypointHead::new(10, 4, 2).is_err());
        assert!(KeypointHead::new(8, 0, 2).is_err());
    }
}
