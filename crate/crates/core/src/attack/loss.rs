//! The attack loss: mean teacher-forced cross-entropy of the target
//! continuation with the perturbation added to the activation surface.
//!
//! The loss is computed in one causal pass over context+target; the
//! per-prefix loop (one forward per target token) is kept as
//! [`attack_loss_looped`], an oracle that must agree with the single
//! pass because position i of a causal model never sees rows beyond i.

use super::{AttackOutcome, Perturbation};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::{log_sum_exp, NodeId, Tape};
use crate::tensor::Tensor;

fn check_lengths<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<()> {
    if context.is_empty() || target.is_empty() {
        return Err(Error::InvalidSpec("attack needs non-empty context and target".into()));
    }
    if perturbation.attack_len() > context.len() {
        return Err(Error::InvalidSpec(format!(
            "attack_len {} exceeds context length {}",
            perturbation.attack_len(),
            context.len()
        )));
    }
    if perturbation.dim() != model.config.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "attack_loss",
            detail: format!(
                "perturbation dim {} vs model dim {}",
                perturbation.dim(),
                model.config.embed_dim
            ),
        });
    }
    let needed = context.len() + target.len();
    if needed > model.config.max_context {
        return Err(Error::ContextOverflow { needed, max_context: model.config.max_context });
    }
    Ok(())
}

/// Build the differentiable loss graph. Returns the tape, the scalar
/// loss node, and the perturbation leaf whose gradient is the attack
/// gradient. The mask is applied inside the graph, so masked-out
/// dimensions get exactly zero gradient.
fn build_graph<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<(Tape<T>, NodeId, NodeId)> {
    check_lengths(model, context, target, perturbation)?;
    let full: Vec<usize> = context.iter().chain(target).copied().collect();
    let activations = model.f_before(&full, 0)?;

    let mut tape = Tape::new();
    let v = tape.constant(activations);
    let p_leaf = tape.leaf(perturbation.values().clone());
    let mask = tape.constant(perturbation.mask_tensor());
    let p_masked = tape.mul(p_leaf, mask)?;
    let attacked = tape.add_rows_at(v, p_masked, 0)?;
    let logits = model.f_after_nodes(&mut tape, attacked, 0)?;
    let rows = tape.slice_rows(logits, context.len() - 1, target.len())?;
    let ce = tape.cross_entropy(rows, target)?;
    let total = tape.sum(ce)?;
    let loss = tape.scale(total, 1.0 / target.len() as f64)?;
    Ok((tape, loss, p_leaf))
}

/// L(S, T, P): one causal forward pass.
pub fn attack_loss<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<f64> {
    let (tape, loss, _) = build_graph(model, context, target, perturbation)?;
    Ok(tape.value(loss).item().to_f64())
}

/// L(S, T, P) and ∂L/∂P in one reverse sweep.
pub fn attack_loss_grad<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<(f64, Tensor<T>)> {
    let (mut tape, loss, p_leaf) = build_graph(model, context, target, perturbation)?;
    tape.backward(loss)?;
    let grad = tape.grad(p_leaf).expect("perturbation is a leaf of the loss").clone();
    Ok((tape.value(loss).item().to_f64(), grad))
}

/// Literal prefix-loop form: activations of context+target computed
/// once, perturbed once, then one forward per target position over the
/// growing prefix. Slower by a factor of t; used to cross-check the
/// single-pass loss.
pub fn attack_loss_looped<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<f64> {
    check_lengths(model, context, target, perturbation)?;
    let full: Vec<usize> = context.iter().chain(target).copied().collect();
    let mut activations = model.f_before(&full, 0)?;

    // v' = v ; v'[:a] += P ⊙ mask
    let dim = model.config.embed_dim;
    let masked = {
        let mut m = perturbation.values().clone();
        for (v, &keep) in m.data_mut().iter_mut().zip(perturbation.mask()) {
            if !keep {
                *v = T::ZERO;
            }
        }
        m
    };
    for i in 0..perturbation.attack_len() {
        for j in 0..dim {
            let x = activations.get2(i, j) + masked.get2(i, j);
            activations.set2(i, j, x);
        }
    }

    let s = context.len();
    let mut total = 0.0f64;
    for (i, &tok) in target.iter().enumerate() {
        let prefix_len = s + i;
        let prefix =
            Tensor::matrix(prefix_len, dim, activations.data()[..prefix_len * dim].to_vec())?;
        let logits = model.f_after(&prefix, 0)?;
        let row = logits.row(prefix_len - 1);
        let ce = log_sum_exp(row) - row[tok];
        total += ce.to_f64();
    }
    Ok(total / target.len() as f64)
}

/// Teacher-forced evaluation of the success condition: at every target
/// position, does the perturbed model's argmax (ties to the lowest id)
/// equal the target token?
pub fn evaluate_attack<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    perturbation: &Perturbation<T>,
) -> Result<AttackOutcome> {
    check_lengths(model, context, target, perturbation)?;
    let full: Vec<usize> = context.iter().chain(target).copied().collect();
    let mut masked = perturbation.values().clone();
    for (v, &keep) in masked.data_mut().iter_mut().zip(perturbation.mask()) {
        if !keep {
            *v = T::ZERO;
        }
    }
    let logits = model.logits_perturbed(&full, Some(&masked), 0)?;
    let s = context.len();
    let mut per_token_correct = Vec::with_capacity(target.len());
    let mut loss = 0.0f64;
    for (i, &tok) in target.iter().enumerate() {
        let row = logits.row(s - 1 + i);
        per_token_correct.push(Tensor::<T>::argmax_slice(row) == tok);
        loss += (log_sum_exp(row) - row[tok]).to_f64();
    }
    let correct = per_token_correct.iter().filter(|&&c| c).count();
    Ok(AttackOutcome {
        success_fraction: correct as f64 / target.len() as f64,
        full_success: correct == target.len(),
        per_token_correct,
        final_loss: loss / target.len() as f64,
        steps_used: 0,
    })
}

