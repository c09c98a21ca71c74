//! Adam search for the perturbation. Gradients are accumulated over
//! all (context, target) pairs before each step, the mask is
//! re-applied after each step, and the search stops early once every
//! pair is a full success.

use super::loss::{attack_loss_grad, evaluate_attack};
use super::{AttackOutcome, AttackSpec, Perturbation};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cadence of the (comparatively cheap) full-success early-stop check.
const EARLY_STOP_EVERY: usize = 10;

#[derive(Debug, Clone)]
pub struct AttackRun<T: Scalar> {
    pub perturbation: Perturbation<T>,
    /// One outcome per (context, target) pair, in input order.
    pub outcomes: Vec<AttackOutcome>,
    pub steps_used: usize,
    /// True when the search aborted on a non-finite loss; the returned
    /// perturbation is the last finite one.
    pub diverged: bool,
}

impl<T: Scalar> AttackRun<T> {
    /// Mean success fraction over the pairs.
    pub fn success_fraction(&self) -> f64 {
        self.outcomes.iter().map(|o| o.success_fraction).sum::<f64>() / self.outcomes.len() as f64
    }

    pub fn full_success(&self) -> bool {
        self.outcomes.iter().all(|o| o.full_success)
    }
}

fn all_full_success<T: Scalar>(
    model: &Model<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    p: &Perturbation<T>,
) -> Result<bool> {
    for (context, target) in pairs {
        if !evaluate_attack(model, context, target, p)?.full_success {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Optimize one perturbation against `pairs.len()` pairs at once
/// (`spec.multiplicity` must match). All pairs must share context and
/// target lengths; heterogeneous lengths are rejected, not padded.
pub fn optimize_attack<T: Scalar>(
    model: &Model<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    spec: &AttackSpec,
) -> Result<AttackRun<T>> {
    spec.validate()?;
    if pairs.is_empty() || pairs.len() != spec.multiplicity {
        return Err(Error::InvalidSpec(format!(
            "got {} pairs for multiplicity {}",
            pairs.len(),
            spec.multiplicity
        )));
    }
    for (context, target) in pairs {
        if context.len() != spec.context_len || target.len() != spec.target_len {
            return Err(Error::InvalidSpec(format!(
                "pair lengths ({}, {}) disagree with spec ({}, {})",
                context.len(),
                target.len(),
                spec.context_len,
                spec.target_len
            )));
        }
    }

    let mut p = Perturbation::zeros(
        spec.attack_len,
        model.config.embed_dim,
        spec.dim_fraction,
        spec.seed,
    )?;
    let mut adam = Adam::new(spec.lr);
    let inv_n = 1.0 / pairs.len() as f64;
    let mut steps_used = 0;
    let mut diverged = false;

    'search: for step in 0..spec.steps {
        if step % EARLY_STOP_EVERY == 0 && all_full_success(model, pairs, &p)? {
            break;
        }
        let mut grad: Tensor<T> = Tensor::zeros(vec![spec.attack_len, model.config.embed_dim]);
        for (context, target) in pairs {
            match attack_loss_grad(model, context, target, &p) {
                Ok((_, g)) => grad.add_assign(&g),
                Err(Error::NonFinite { .. }) => {
                    diverged = true;
                    break 'search;
                }
                Err(e) => return Err(e),
            }
        }
        grad.scale_assign(T::from_f64(inv_n));
        adam.step(&mut [p.values_mut()], &[&grad]);
        p.apply_mask();
        steps_used += 1;
    }

    let mut outcomes = Vec::with_capacity(pairs.len());
    for (context, target) in pairs {
        let mut outcome = evaluate_attack(model, context, target, &p)?;
        outcome.steps_used = steps_used;
        outcomes.push(outcome);
    }
    Ok(AttackRun { perturbation: p, outcomes, steps_used, diverged })
}
