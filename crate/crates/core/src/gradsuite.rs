//! Finite-difference checks of every training loss on small random batches.
//!
//! Each loss is parameterized by unconstrained 64-bit logits (and raw
//! embeddings for the prototype term), so perturbations never leave the
//! probability simplex.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fsc::{cross_entropy_grad, fsc_objective, proto_loss_grad};
use crate::gss::{geometric_grad, mutual_info_grad, prob_consistency_grad, GssBatch, GssObjective, MiSign};
use crate::numerics::{grad_check, softmax_backward, softmax_rows, GradCheckConfig, ParamSet, ProbBatch, Tensor};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteLoss {
    ProbConsistency,
    MutualInfo,
    Geometric,
    CrossEntropy,
    Proto,
    /// The weighted pretraining objective with default weights.
    PretrainTotal,
    /// Cross-entropy plus prototype loss.
    CalibrateTotal,
}

impl SuiteLoss {
    pub const ALL: [SuiteLoss; 7] = [
        SuiteLoss::ProbConsistency,
        SuiteLoss::MutualInfo,
        SuiteLoss::Geometric,
        SuiteLoss::CrossEntropy,
        SuiteLoss::Proto,
        SuiteLoss::PretrainTotal,
        SuiteLoss::CalibrateTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteLoss::ProbConsistency => "prob_consistency",
            SuiteLoss::MutualInfo => "mutual_info",
            SuiteLoss::Geometric => "geometric",
            SuiteLoss::CrossEntropy => "cross_entropy",
            SuiteLoss::Proto => "proto",
            SuiteLoss::PretrainTotal => "pretrain_total",
            SuiteLoss::CalibrateTotal => "calibrate_total",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub loss: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], range: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-range..range)).collect();
    Tensor::new(dims, data).expect("dims match data")
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.dims()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn pair(ps: &ParamSet<f64>) -> Result<(ProbBatch, ProbBatch)> {
    Ok((softmax_rows(ps.get("l1")?)?, softmax_rows(ps.get("l2")?)?))
}

/// Loss value and logit gradients for a two-view loss given its gradients
/// with respect to the probability rows.
fn two_view(
    ps: &ParamSet<f64>,
    f: impl Fn(&GssBatch) -> Result<(f64, Vec<f64>, Vec<f64>)>,
) -> Result<(f64, ParamSet<f64>)> {
    let (p1, p2) = pair(ps)?;
    let batch = GssBatch::new(p1.clone(), p2.clone())?;
    let (v, g1, g2) = f(&batch)?;
    let mut g = ps.zeros_like();
    g.get_mut("l1")?.data_mut().copy_from_slice(&softmax_backward(&p1, &g1));
    g.get_mut("l2")?.data_mut().copy_from_slice(&softmax_backward(&p2, &g2));
    Ok((v, g))
}

/// Maximum relative error of one loss on a random `batch x dim` instance.
pub fn check_loss(loss: SuiteLoss, seed: u64, batch: usize, dim: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    // Two classes, each present at least once, for the prototype terms.
    let mut proto_labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    proto_labels.shuffle(&mut rng);
    let ce_labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..dim)).collect();
    match loss {
        SuiteLoss::Proto => {
            params.insert("z", random_tensor(&mut rng, &[batch, dim], 1.0))?;
        }
        SuiteLoss::CrossEntropy => {
            params.insert("logits", random_tensor(&mut rng, &[batch, dim], 2.0))?;
        }
        SuiteLoss::CalibrateTotal => {
            params.insert("z", random_tensor(&mut rng, &[batch, dim], 1.0))?;
            params.insert("logits", random_tensor(&mut rng, &[batch, 2], 2.0))?;
        }
        _ => {
            params.insert("l1", random_tensor(&mut rng, &[batch, dim], 2.0))?;
            params.insert("l2", random_tensor(&mut rng, &[batch, dim], 2.0))?;
        }
    }
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    let report = match loss {
        SuiteLoss::ProbConsistency => grad_check(|ps| two_view(ps, |b| Ok(prob_consistency_grad(b))), &params, &cfg)?,
        SuiteLoss::MutualInfo => grad_check(
            |ps| {
                two_view(ps, |b| {
                    let (m1, g1) = mutual_info_grad(&b.p1, MiSign::Corrected);
                    let (m2, g2) = mutual_info_grad(&b.p2, MiSign::Corrected);
                    Ok((m1 + m2, g1, g2))
                })
            },
            &params,
            &cfg,
        )?,
        SuiteLoss::Geometric => grad_check(|ps| two_view(ps, geometric_grad), &params, &cfg)?,
        SuiteLoss::PretrainTotal => grad_check(
            |ps| {
                two_view(ps, |b| {
                    let l = GssObjective::default().evaluate(b)?;
                    Ok((l.total, l.grad_p1, l.grad_p2))
                })
            },
            &params,
            &cfg,
        )?,
        SuiteLoss::CrossEntropy => grad_check(
            |ps| {
                let probs = softmax_rows(ps.get("logits")?)?;
                let (v, gp) = cross_entropy_grad(&probs, &ce_labels)?;
                let mut g = ps.zeros_like();
                g.get_mut("logits")?.data_mut().copy_from_slice(&softmax_backward(&probs, &gp));
                Ok((v, g))
            },
            &params,
            &cfg,
        )?,
        SuiteLoss::Proto => grad_check(
            |ps| {
                let (v, gz) = proto_loss_grad(&rows(ps.get("z")?), &proto_labels, 2)?;
                let mut g = ps.zeros_like();
                g.get_mut("z")?.data_mut().copy_from_slice(&gz.concat());
                Ok((v, g))
            },
            &params,
            &cfg,
        )?,
        SuiteLoss::CalibrateTotal => grad_check(
            |ps| {
                let probs = softmax_rows(ps.get("logits")?)?;
                let l = fsc_objective(&probs, &rows(ps.get("z")?), &proto_labels)?;
                let mut g = ps.zeros_like();
                g.get_mut("z")?.data_mut().copy_from_slice(&l.grad_embeddings.concat());
                g.get_mut("logits")?
                    .data_mut()
                    .copy_from_slice(&softmax_backward(&probs, &l.grad_probs));
                Ok((l.total, g))
            },
            &params,
            &cfg,
        )?,
    };
    Ok(report.max_rel_error)
}

/// Every loss over seeds `0..seeds`.
pub fn gradient_suite(seeds: u64, batch: usize, dim: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for loss in SuiteLoss::ALL {
        for seed in 0..seeds {
            let err = check_loss(loss, seed, batch, dim)?;
            out.push(SuiteResult {
                loss: loss.name(),
                seed,
                max_rel_error: err,
                pass: err <= GRAD_TOLERANCE,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_a_few_seeds() {
        for r in gradient_suite(3, 4, 8).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![0.3, -0.7])).unwrap();
        let report = grad_check(
            |ps| {
                let x = ps.get("x")?.data();
                let mut g = ps.zeros_like();
                // true gradient is 2x; report x instead
                g.get_mut("x")?.data_mut().copy_from_slice(x);
                Ok((x.iter().map(|v| v * v).sum(), g))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > GRAD_TOLERANCE);
    }
}
