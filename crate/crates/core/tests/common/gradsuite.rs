//! One finite-difference case per differentiable tape operation. Each case
//! draws fresh parameters and a fixed random projection so the scalar
//! output depends on every output element.

use aknet::tensor::{grad_check, GradCheckConfig, GradientReport};
use aknet::harness::config::stage_list;
use aknet::model::{total_loss, AkNet, ModelConfig};
use aknet::{Graph, NodeId, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::uniform;

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>>;

pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (ParamStore<f64>, Builder),
}

/// Values bounded away from zero so ReLU inputs avoid the kink.
fn away_from_zero(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() >= 1e-3 {
            break v;
        }
    })
}

/// `sum(y ⊙ r)` for a fixed random `r`.
fn project(g: &mut Graph<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let rn = g.input(r.clone());
    let p = g.mul(y, rn)?;
    Ok(g.sum(p))
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v);
    }
    s
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[2, 5, 5])), ("w", uniform(rng, &[3, 2, 3, 3]))]);
                let r = uniform(rng, &[3, 5, 5]);
                (p, Box::new(move |g, s| {
                    let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                    let y = g.conv2d(x, w, 1, 1)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "conv2d_frames_strided",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[2, 3, 6, 6])), ("w", uniform(rng, &[2, 2, 3, 3]))]);
                let r = uniform(rng, &[2, 3, 3, 3]);
                (p, Box::new(move |g, s| {
                    let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                    let y = g.conv2d(x, w, 2, 1)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "conv1d",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 9])), ("w", uniform(rng, &[4, 3, 3]))]);
                let r = uniform(rng, &[4, 5]);
                (p, Box::new(move |g, s| {
                    let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                    let y = g.conv1d(x, w, 2, 1)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "conv1d_pointwise",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 7])), ("w", uniform(rng, &[5, 3, 1]))]);
                let r = uniform(rng, &[5, 7]);
                (p, Box::new(move |g, s| {
                    let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                    let y = g.conv1d(x, w, 1, 0)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "dense",
            make: |rng| {
                let p = store(vec![
                    ("x", uniform(rng, &[6])),
                    ("w", uniform(rng, &[4, 6])),
                    ("b", uniform(rng, &[4])),
                ]);
                let r = uniform(rng, &[4]);
                (p, Box::new(move |g, s| {
                    let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                    let y = g.dense(x, w, b)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "matmul_transpose",
            make: |rng| {
                let p = store(vec![("a", uniform(rng, &[3, 4])), ("b", uniform(rng, &[5, 4]))]);
                let r = uniform(rng, &[3, 5]);
                (p, Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                    let bt = g.transpose(b)?;
                    let y = g.matmul(a, bt)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "relu",
            make: |rng| {
                let p = store(vec![("x", away_from_zero(rng, &[4, 5]))]);
                let r = uniform(rng, &[4, 5]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.relu(x);
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "softmax_axis0",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[5, 3]))]);
                let r = uniform(rng, &[5, 3]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.softmax(x, 0)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "softmax_axis1",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 6]))]);
                let r = uniform(rng, &[3, 6]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.softmax(x, 1)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "channel_affine",
            make: |rng| {
                let p = store(vec![
                    ("x", uniform(rng, &[3, 2, 4])),
                    ("scale", uniform(rng, &[3])),
                    ("shift", uniform(rng, &[3])),
                ]);
                let r = uniform(rng, &[3, 2, 4]);
                (p, Box::new(move |g, s| {
                    let (x, a, b) = (g.param(s, "x")?, g.param(s, "scale")?, g.param(s, "shift")?);
                    let y = g.channel_affine(x, Some(a), b)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "global_avg_pool",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[4, 2, 3, 3]))]);
                let r = uniform(rng, &[4]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.global_avg_pool(x)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "spatial_mean",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 2, 3, 4]))]);
                let r = uniform(rng, &[2, 3]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.spatial_mean(x)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "channel_weighted_sum",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 2, 3, 3])), ("w", uniform(rng, &[2, 3]))]);
                let r = uniform(rng, &[2, 3, 3]);
                (p, Box::new(move |g, s| {
                    let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
                    let y = g.channel_weighted_sum(x, w)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "minmax_normalize",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[2, 3, 3]))]);
                let r = uniform(rng, &[2, 3, 3]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.minmax_normalize(x)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "channel_scale",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 2, 2, 3])), ("h", uniform(rng, &[2, 2, 3]))]);
                let r = uniform(rng, &[3, 2, 2, 3]);
                (p, Box::new(move |g, s| {
                    let (x, h) = (g.param(s, "x")?, g.param(s, "h")?);
                    let y = g.channel_scale(x, h)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "concat_narrow_reshape",
            make: |rng| {
                let p = store(vec![("a", uniform(rng, &[2, 5])), ("b", uniform(rng, &[3, 5]))]);
                let r = uniform(rng, &[15]);
                (p, Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                    let c = g.concat(&[a, b])?;
                    let n = g.narrow(c, 1, 3)?;
                    let y = g.reshape(n, [15])?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "gather_columns",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[3, 2, 2, 3]))]);
                let r = uniform(rng, &[3, 5]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.gather_columns(x, &[7, 0, 11, 3, 7])?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "max_over_columns",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[4, 6]))]);
                let r = uniform(rng, &[4]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.max_over_columns(x)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "temporal_shift",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[8, 3, 2, 2]))]);
                let r = uniform(rng, &[8, 3, 2, 2]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.temporal_shift(x, 0.25)?;
                    project(g, y, &r)
                }))
            },
        },
        GradCase {
            name: "avg_pool",
            make: |rng| {
                let p = store(vec![("x", uniform(rng, &[2, 2, 4, 4])), ("v", uniform(rng, &[2, 6]))]);
                let r = uniform(rng, &[2, 2, 2, 2]);
                let r1 = uniform(rng, &[2, 3]);
                (p, Box::new(move |g, s| {
                    let x = g.param(s, "x")?;
                    let y = g.avg_pool(x, 2)?;
                    let a = project(g, y, &r)?;
                    let v = g.param(s, "v")?;
                    let y1 = g.avg_pool(v, 2)?;
                    let b = project(g, y1, &r1)?;
                    g.add(a, b)
                }))
            },
        },
        GradCase {
            name: "energy",
            make: |rng| {
                let p = store(vec![("h", Tensor::from_fn([2, 3, 3], |_| rng.random_range(0.0..1.0)))]);
                (p, Box::new(move |g, s| {
                    let h = g.param(s, "h")?;
                    Ok(g.energy(h))
                }))
            },
        },
        GradCase {
            name: "cross_entropy",
            make: |rng| {
                let p = store(vec![("z", uniform(rng, &[5]))]);
                let label = rng.random_range(0..5);
                (p, Box::new(move |g, s| {
                    let z = g.param(s, "z")?;
                    g.cross_entropy(z, label)
                }))
            },
        },
        GradCase {
            name: "add_mul_scale_mean",
            make: |rng| {
                let p = store(vec![("a", uniform(rng, &[3, 4])), ("b", uniform(rng, &[3, 4]))]);
                (p, Box::new(move |g, s| {
                    let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                    let m = g.mul(a, b)?;
                    let m = g.add(m, a)?;
                    let m = g.scale(m, 1.5);
                    Ok(g.mean(m))
                }))
            },
        },
    ]
}

/// The whole stage-2 objective (classification, auxiliary and energy terms)
/// of a narrow network on a 2-frame 16×16 clip, differentiated with
/// respect to every network parameter.
pub fn stage2_loss_case() -> GradCase {
    GradCase {
        name: "stage2_loss",
        make: |rng| {
            let mut cfg = ModelConfig {
                clip_len: 2,
                height: 16,
                width: 16,
                ..ModelConfig::default()
            };
            cfg.backbone.stages = stage_list(&[4, 8, 8, 8, 8], &[2, 1, 2, 2, 2]).expect("valid stages");
            let net = AkNet::new(cfg).expect("valid model");
            let params: ParamStore<f64> = net.init_params(rng).expect("init");
            let clip = Tensor::from_fn([3, 2, 16, 16], |_| rng.random_range(0.0..1.0));
            let label = rng.random_range(0..4);
            (params, Box::new(move |g, s| {
                let x = g.input(clip.clone());
                let out = net.forward(g, s, x)?;
                Ok(total_loss(g, &out, label, true)?.0)
            }))
        },
    }
}

/// Runs `case` at `points` random draws; returns the worst report.
pub fn check_case(case: &GradCase, points: usize, seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig::default();
    let mut worst: Option<GradientReport> = None;
    for i in 0..points {
        let (params, build) = (case.make)(&mut rng);
        let cfg = GradCheckConfig {
            seed: seed ^ i as u64,
            ..cfg.clone()
        };
        let report = grad_check(&params, &build, &cfg).expect("grad check runs");
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_error() > w.max_rel_error())
        {
            worst = Some(report);
        }
    }
    worst.expect("at least one point")
}
