//! Mini-batch SGD for both stages.
//!
//! Per-clip gradients of a batch may be computed concurrently, but they
//! are summed in clip order, so the trained weights and the metrics log do
//! not depend on the thread count.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunConfig, TrainConfig};
use crate::harness::dataset::Clip;
use crate::model::{total_loss, AkNet, LossTerms};
use crate::tensor::{Graph, ParamStore, Tensor};

/// Loss and correctness of one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipStats {
    pub terms: LossTerms,
    pub correct: bool,
}

/// A model that can produce per-clip gradients.
pub trait Trainable: Sync {
    fn clip_gradients(&self, store: &ParamStore<f32>, clip: &Clip, reg: bool) -> Result<(ParamStore<f32>, ClipStats)>;
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl Trainable for Backbone {
    fn clip_gradients(&self, store: &ParamStore<f32>, clip: &Clip, _reg: bool) -> Result<(ParamStore<f32>, ClipStats)> {
        let mut g = Graph::new();
        let x = g.input(clip.frames.clone());
        let logits = self.forward(&mut g, store, x)?;
        let loss = g.cross_entropy(logits, clip.label)?;
        let l = g.value(loss).item() as f64;
        let correct = argmax(g.value(logits).data()) == clip.label;
        let grads = g.backward(loss)?.into_store();
        let terms = LossTerms {
            cls: l,
            aux: 0.0,
            energy: 0.0,
            total: l,
        };
        Ok((grads, ClipStats { terms, correct }))
    }
}

impl Trainable for AkNet {
    fn clip_gradients(&self, store: &ParamStore<f32>, clip: &Clip, reg: bool) -> Result<(ParamStore<f32>, ClipStats)> {
        let mut g = Graph::new();
        let x = g.input(clip.frames.clone());
        let out = self.forward(&mut g, store, x)?;
        let (loss, terms) = total_loss(&mut g, &out, clip.label, reg)?;
        let correct = argmax(g.value(out.logits).data()) == clip.label;
        let grads = g.backward(loss)?.into_store();
        Ok((grads, ClipStats { terms, correct }))
    }
}

/// Averages of one training epoch plus validation accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub aux: f64,
    pub energy: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    /// One log line; fixed precision so equal runs give equal bytes.
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} lr {:.6} loss {:.6} cls {:.6} aux {:.6} r_e {:.6} train_acc {:.4} val_acc {:.4}",
            self.epoch, self.lr, self.loss, self.cls, self.aux, self.energy, self.train_acc, self.val_acc
        )
    }
}

/// SGD with momentum and L2 weight decay on tensors of rank ≥ 2.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &ParamStore<f32>,
        lr: f64,
        cfg: &TrainConfig,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        let (lr, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        for (name, grad) in grads.iter() {
            if frozen(name) {
                continue;
            }
            let w = store.get_mut(name)?;
            let decay = if w.rank() >= 2 { wd } else { 0.0 };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(w.dims().to_vec()));
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Runs the whole schedule of `cfg`, writing one log line per epoch.
pub fn fit<M: Trainable>(
    model: &M,
    store: &mut ParamStore<f32>,
    train: &[Clip],
    val: &[Clip],
    cfg: &TrainConfig,
    frozen: &dyn Fn(&str) -> bool,
    predict: &(dyn Fn(&ParamStore<f32>, &Clip) -> Result<usize> + Sync),
    log: &mut dyn Write,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut sgd = Sgd::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.clip_gradients(store, &train[i], cfg.reg))
                .collect::<Result<_>>()?;
            let mut total: Option<ParamStore<f32>> = None;
            for (grads, stats) in &results {
                let t = stats.terms;
                for (s, v) in sums.iter_mut().zip([t.total, t.cls, t.aux, t.energy]) {
                    *s += v;
                }
                correct += stats.correct as usize;
                match total.as_mut() {
                    None => total = Some(grads.clone()),
                    Some(acc) => {
                        for (name, gv) in grads.iter() {
                            match acc.get_mut(name) {
                                Ok(a) => a.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b),
                                Err(_) => acc.insert(name, gv.clone()),
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let mut scale = 1.0 / batch.len() as f64;
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|&v| (v as f64 * scale).powi(2))
                .sum::<f64>()
                .sqrt();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                scale *= cfg.clip_norm / norm;
            }
            let scale = scale as f32;
            for (_, gv) in grads.iter_mut() {
                gv.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            sgd.step(store, &grads, lr, cfg, frozen)?;
        }
        let n = train.len() as f64;
        let val_acc = accuracy(store, val, predict)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss: sums[0] / n,
            cls: sums[1] / n,
            aux: sums[2] / n,
            energy: sums[3] / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        writeln!(log, "{}", m.log_line())?;
        log.flush()?;
        history.push(m);
    }
    Ok(history)
}

/// Fraction of `clips` whose prediction matches the label.
pub fn accuracy(
    store: &ParamStore<f32>,
    clips: &[Clip],
    predict: &(dyn Fn(&ParamStore<f32>, &Clip) -> Result<usize> + Sync),
) -> Result<f64> {
    if clips.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = clips
        .par_iter()
        .map(|c| predict(store, c).map(|p| p == c.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / clips.len() as f64)
}

pub fn predict_stage1(model: &Backbone, store: &ParamStore<f32>, clip: &Clip) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.input(clip.frames.clone());
    let logits = model.forward(&mut g, store, x)?;
    Ok(argmax(g.value(logits).data()))
}

pub fn predict_stage2(model: &AkNet, store: &ParamStore<f32>, clip: &Clip) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.input(clip.frames.clone());
    let out = model.forward(&mut g, store, x)?;
    Ok(argmax(g.value(out.logits).data()))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Trains the stage selected by `run`. Stage 2 starts from `stage1`.
pub fn train(
    run: &RunConfig,
    train: &[Clip],
    val: &[Clip],
    stage1: Option<&Checkpoint>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let model_cfg = run.model.clone();
    match run.stage {
        1 => {
            let bb = model_cfg.stage1()?;
            let mut store: ParamStore<f32> = bb.init_params(&mut rng);
            let predict = |s: &ParamStore<f32>, c: &Clip| predict_stage1(&bb, s, c);
            let history = fit(&bb, &mut store, train, val, &run.train, &|_| false, &predict, log)?;
            Ok(TrainOutcome {
                checkpoint: Checkpoint {
                    stage: 1,
                    model: model_cfg,
                    params: store,
                },
                history,
            })
        }
        2 => {
            let s1 = stage1.ok_or_else(|| Error::Config("stage 2 needs a stage-1 checkpoint".into()))?;
            if s1.stage != 1 {
                return Err(Error::Config(format!("init checkpoint is stage {}, expected 1", s1.stage)));
            }
            if s1.model.backbone != model_cfg.backbone || s1.model.classes != model_cfg.classes {
                return Err(Error::Config("stage-1 checkpoint backbone or classes differ from config".into()));
            }
            let net = AkNet::new(model_cfg.clone())?;
            let mut store = net.params_from_stage1(&s1.params, &mut rng)?;
            let front: Vec<String> = net
                .split
                .front
                .iter()
                .flat_map(|l| l.param_shapes().into_iter().map(|(n, _)| n))
                .collect();
            let freeze = run.train.freeze_front;
            let frozen = move |name: &str| freeze && front.iter().any(|f| f == name);
            let predict = |s: &ParamStore<f32>, c: &Clip| predict_stage2(&net, s, c);
            let history = fit(&net, &mut store, train, val, &run.train, &frozen, &predict, log)?;
            Ok(TrainOutcome {
                checkpoint: Checkpoint {
                    stage: 2,
                    model: model_cfg,
                    params: store,
                },
                history,
            })
        }
        s => Err(Error::Config(format!("unknown stage {s}"))),
    }
}
