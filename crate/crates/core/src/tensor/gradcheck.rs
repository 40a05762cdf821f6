//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Relative errors divide by `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Entries probed per parameter; smaller tensors are checked in full.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a ±step perturbation changed a discrete
    /// decision (ReLU mask, argmax, selection), where the function is not
    /// differentiable.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `build`'s analytic gradients against central differences for
/// every parameter in `params`. `build` must construct the same scalar
/// function each time it is called.
pub fn grad_check<F>(params: &ParamStore<f64>, build: F, cfg: &GradCheckConfig) -> Result<GradientReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::with_branch_tracking();
    let out = build(&mut g, params)?;
    let grads = g.backward(out)?;
    let base_sig = g.branch_signature();

    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::with_branch_tracking();
        let out = build(&mut g, store)?;
        Ok((g.value(out).item(), g.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let len = params.get(&name)?.len();
        let analytic = grads.param(&name).map(|t| t.data().to_vec());
        let entries: Vec<usize> = if len <= cfg.max_entries {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, cfg.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in entries {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + cfg.step;
            let (fp, sp) = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - cfg.step;
            let (fm, sm) = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            check.max_rel_error = check.max_rel_error.max((a - numeric).abs() / denom);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradientReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        params: report,
    })
}
