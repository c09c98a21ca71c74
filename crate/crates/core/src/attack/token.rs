//! Greedy, exhaustive token substitution: fix attack positions left to
//! right, trying every vocabulary token at each and keeping the one
//! that minimizes the teacher-forced loss of the target continuation.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Refuse enumerations beyond this many (position, token) forward
/// sweeps; the search is exhaustive by design and meant for small
/// vocabularies.
const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenAttack {
    /// The modified context S′.
    pub context: Vec<usize>,
    /// Best loss after fixing each attack position; non-increasing
    /// because the incumbent token is always among the candidates.
    pub loss_trace: Vec<f64>,
}

pub fn greedy_token_attack<T: Scalar>(
    model: &Model<T>,
    context: &[usize],
    target: &[usize],
    attack_len: usize,
) -> Result<TokenAttack> {
    if attack_len == 0 || attack_len > context.len() {
        return Err(Error::InvalidSpec(format!(
            "attack_len {} must be in [1, context length {}]",
            attack_len,
            context.len()
        )));
    }
    let vocab = model.config.vocab_size;
    if attack_len * vocab > MAX_SWEEPS {
        return Err(Error::InvalidSpec(format!(
            "{} × {} token sweeps exceed the enumeration guard",
            attack_len, vocab
        )));
    }

    let mut modified = context.to_vec();
    let mut loss_trace = Vec::with_capacity(attack_len);
    for position in 0..attack_len {
        let mut best_token = 0usize;
        let mut best_loss = f64::INFINITY;
        for token in 0..vocab {
            modified[position] = token;
            let loss = model.teacher_forced_ce(&modified, target)?;
            // strict < keeps the lowest token id on exact ties
            if loss < best_loss {
                best_loss = loss;
                best_token = token;
            }
        }
        modified[position] = best_token;
        loss_trace.push(best_loss);
    }
    Ok(TokenAttack { context: modified, loss_trace })
}
