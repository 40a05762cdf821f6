//! Accuracy and keypoint-localisation metrics for trained checkpoints.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::Clip;
use crate::model::AkNet;
use crate::points::PointSet;
use crate::tensor::{Graph, ParamStore};

/// Per-clip result of a stage-2 forward pass.
#[derive(Clone, Debug)]
pub struct ClipEval {
    pub prediction: usize,
    pub points: PointSet,
    /// Normalised heatmap, `T×H×W` at the separating layer.
    pub heatmap: Vec<f32>,
    pub energy: f64,
}

pub fn run_stage2(net: &AkNet, store: &ParamStore<f32>, clip: &Clip) -> Result<ClipEval> {
    let mut g = Graph::new();
    let x = g.input(clip.frames.clone());
    let out = net.forward(&mut g, store, x)?;
    let logits = g.value(out.logits).data();
    let prediction = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    Ok(ClipEval {
        prediction,
        points: out.points,
        heatmap: g.value(out.heatmap.normalized).data().to_vec(),
        energy: g.value(out.energy).item() as f64,
    })
}

/// Fraction of `points` that land on the object mask resampled to the
/// selection grid.
pub fn keypoint_in_mask(clip: &Clip, points: &PointSet) -> Option<f64> {
    let (_, h, w) = points.extent;
    let mask = clip.downsampled_mask(h, w)?;
    let hits = points.index.iter().filter(|&&i| mask[i]).count();
    Some(hits as f64 / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub clips: usize,
    pub accuracy: f64,
    /// Mean fraction of keypoints inside the object mask (stage 2 with
    /// masks only).
    pub keypoint_in_mask: Option<f64>,
    /// Mean object area fraction at the selection grid: the in-mask
    /// fraction a uniformly random selection would reach.
    pub chance: Option<f64>,
    pub energy: Option<f64>,
    /// Mean number of points per frame index.
    pub frame_counts: Vec<f64>,
    /// `count_histogram[k]` frames received exactly `k` points.
    pub count_histogram: Vec<usize>,
}

impl EvalMetrics {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clips {}", self.clips);
        let _ = writeln!(s, "accuracy {:.4}", self.accuracy);
        if let (Some(k), Some(c)) = (self.keypoint_in_mask, self.chance) {
            let _ = writeln!(s, "keypoint_in_mask {k:.4}");
            let _ = writeln!(s, "chance {c:.4}");
        }
        if let Some(e) = self.energy {
            let _ = writeln!(s, "r_e {e:.6}");
        }
        if !self.frame_counts.is_empty() {
            let fc: Vec<String> = self.frame_counts.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(s, "points_per_frame {}", fc.join(" "));
            let hist: Vec<String> = self
                .count_histogram
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(k, n)| format!("{k}:{n}"))
                .collect();
            let _ = writeln!(s, "frame_count_histogram {}", hist.join(" "));
        }
        s
    }
}

pub fn evaluate(ck: &Checkpoint, clips: &[Clip]) -> Result<EvalMetrics> {
    if clips.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let n = clips.len() as f64;
    match ck.stage {
        1 => {
            let bb = ck.model.stage1()?;
            let predict = |s: &ParamStore<f32>, c: &Clip| crate::harness::train::predict_stage1(&bb, s, c);
            Ok(EvalMetrics {
                clips: clips.len(),
                accuracy: crate::harness::train::accuracy(&ck.params, clips, &predict)?,
                keypoint_in_mask: None,
                chance: None,
                energy: None,
                frame_counts: Vec::new(),
                count_histogram: Vec::new(),
            })
        }
        2 => {
            let net = AkNet::new(ck.model.clone())?;
            let evals: Vec<ClipEval> = clips
                .par_iter()
                .map(|c| run_stage2(&net, &ck.params, c))
                .collect::<Result<_>>()?;
            let correct = evals.iter().zip(clips).filter(|(e, c)| e.prediction == c.label).count();
            let (t, h, w) = evals[0].points.extent;
            let mut kim = Vec::new();
            let mut chance = Vec::new();
            let mut frame_counts = vec![0.0; t];
            let mut hist = vec![0usize; h * w + 1];
            for (e, c) in evals.iter().zip(clips) {
                if let (Some(k), Some(f)) = (keypoint_in_mask(c, &e.points), c.mask_fraction(h, w)) {
                    kim.push(k);
                    chance.push(f);
                }
                for (f, &k) in e.points.per_frame_counts().iter().enumerate() {
                    frame_counts[f] += k as f64 / n;
                    hist[k] += 1;
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            while hist.len() > 1 && hist.last() == Some(&0) {
                hist.pop();
            }
            Ok(EvalMetrics {
                clips: clips.len(),
                accuracy: correct as f64 / n,
                keypoint_in_mask: mean(&kim),
                chance: mean(&chance),
                energy: Some(evals.iter().map(|e| e.energy).sum::<f64>() / n),
                frame_counts,
                count_histogram: hist,
            })
        }
        s => Err(Error::Format(format!("checkpoint has unknown stage {s}"))),
    }
}
