//! Finite-difference audit of every parameter tensor through the full
//! pipeline and loss.

use crate::error::Result;
use crate::heads::loss;
use crate::skeleton::{build_adjacency, AdjacencyGraph, Gender, NUM_CLIPS, NUM_JOINTS};
use crate::tensor::{BranchPattern, Graph, SeededRng, Tensor, Var};

use super::{forward, ModelParams, RunConfig};

pub const GRADCHECK_CLIP_LEN: usize = 8;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Entries compared per tensor.
    pub entries: usize,
    pub step: f64,
    /// Denominator floor for the relative error. Central differences at
    /// h = 1e-5 on an O(1) loss carry about 1e-11 of roundoff, so smaller
    /// gradients cannot be resolved to the tolerance.
    pub floor: f64,
    /// Scale the analytic gradient of the named tensor (negative control).
    pub fault: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            entries: 6,
            step: 1e-5,
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Entries whose stencil crossed a relu, max or mask boundary and were
    /// differenced with the base point's branches held fixed.
    pub frozen: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// The audit runs on 7 clips of 8 frames; a temporal kernel longer than that
/// is shortened to the largest odd length that fits.
fn audit_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.clip_len = GRADCHECK_CLIP_LEN;
    if c.temporal_kernel > GRADCHECK_CLIP_LEN {
        c.temporal_kernel = GRADCHECK_CLIP_LEN - 1;
    }
    c
}

struct Problem {
    cfg: RunConfig,
    adjacency: AdjacencyGraph,
    clips: Tensor,
    target: f64,
    gender: Gender,
}

impl Problem {
    fn loss_graph(&self, mut g: Graph, params: &ModelParams, as_params: bool) -> Result<(Graph, Var, ModelParams<Var>)> {
        let pv = params.map(&mut |_, t| {
            if as_params {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        let x = g.constant(self.clips.clone());
        let (s, l) = forward(&mut g, x, &self.adjacency, &pv, &self.cfg)?;
        let out = loss(&mut g, s, l, self.target, self.gender, &self.cfg.loss_weights())?;
        Ok((g, out, pv))
    }

    fn eval(&self, params: &ModelParams) -> Result<(f64, u64)> {
        let (g, out, _) = self.loss_graph(Graph::with_kink_trace(), params, false)?;
        Ok((g.value(out).data()[0], g.kink_signature()))
    }

    fn eval_frozen(&self, params: &ModelParams, pattern: &BranchPattern) -> Result<f64> {
        let (g, out, _) = self.loss_graph(Graph::with_frozen_branches(pattern.clone()), params, false)?;
        Ok(g.value(out).data()[0])
    }
}

/// Compares analytic and central-difference gradients on a random batch for
/// every parameter tensor of the configured mode.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<Vec<GroupReport>> {
    let cfg = audit_config(cfg);
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed).fork(0x6772_6164);
    let mut params = ModelParams::init(&cfg, &mut rng);
    // zero-initialized tensors (output projections, gate, biases) would hide
    // whole gradient paths
    for (_, t) in params.named_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::uniform(t.shape().to_vec(), -0.5, 0.5, &mut rng);
        }
    }
    let problem = Problem {
        clips: Tensor::uniform(
            vec![NUM_CLIPS, GRADCHECK_CLIP_LEN, NUM_JOINTS, cfg.channels[0]],
            -1.0,
            1.0,
            &mut rng,
        ),
        target: rng.uniform(0.1, 0.9),
        gender: if rng.uniform(0.0, 1.0) < 0.5 { Gender::Female } else { Gender::Male },
        adjacency: build_adjacency(),
        cfg,
    };

    let (mut g, out, pv) = problem.loss_graph(Graph::new(), &params, true)?;
    if let Some((name, factor)) = &opts.fault {
        for (n, v) in pv.named() {
            if &n == name {
                g.inject_grad_fault(v, *factor);
            }
        }
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = pv.named().into_iter().map(|(_, v)| grads.get_or_zeros(&g, v)).collect();
    let (base_sig, pattern) = {
        let (g, _, _) = problem.loss_graph(Graph::with_kink_trace(), &params, false)?;
        (g.kink_signature(), g.branch_pattern())
    };

    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let numel = analytic[k].numel();
        let mut candidates: Vec<usize> = (0..numel).collect();
        rng.shuffle(&mut candidates);
        let (mut checked, mut frozen, mut worst) = (0, 0, 0.0f64);
        let h = opts.step;
        for &i in candidates.iter().take(opts.entries) {
            let original = params.named_mut()[k].1.data()[i];
            params.named_mut()[k].1.data_mut()[i] = original + h;
            let (mut fp, sp) = problem.eval(&params)?;
            params.named_mut()[k].1.data_mut()[i] = original - h;
            let (mut fm, sm) = problem.eval(&params)?;
            if sp != base_sig || sm != base_sig {
                // the stencil straddles a kink; difference the smooth piece
                // the base point lies on
                fm = problem.eval_frozen(&params, &pattern)?;
                params.named_mut()[k].1.data_mut()[i] = original + h;
                fp = problem.eval_frozen(&params, &pattern)?;
                frozen += 1;
            }
            params.named_mut()[k].1.data_mut()[i] = original;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
            checked += 1;
        }
        reports.push(GroupReport {
            name: name.clone(),
            checked,
            frozen,
            max_rel_error: worst,
            passed: checked > 0 && worst < GRADCHECK_TOLERANCE,
        });
    }
    Ok(reports)
}
