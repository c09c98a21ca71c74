//! Activation attacks: the attack loss, gradient search over the
//! perturbation, evaluation, and the greedy exhaustive token attack.

mod loss;
mod optimize;
mod token;

pub use loss::{attack_loss, attack_loss_grad, attack_loss_looped, evaluate_attack};
pub use optimize::{optimize_attack, AttackRun};
pub use token::{greedy_token_attack, TokenAttack};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One attack cell: lengths, multiplicity, dimension fraction, and the
/// optimizer budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    /// a — leading context tokens whose activations the attacker controls.
    pub attack_len: usize,
    /// s — total context length (attack_len ≤ context_len).
    pub context_len: usize,
    /// t — tokens the attacker wants emitted exactly.
    pub target_len: usize,
    /// n — (context, target) pairs one perturbation must satisfy at once.
    pub multiplicity: usize,
    /// f — fraction of activation dimensions the attacker may touch.
    pub dim_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attack_len == 0 || self.attack_len > self.context_len {
            return Err(Error::InvalidSpec(format!(
                "attack_len {} must be in [1, context_len {}]",
                self.attack_len, self.context_len
            )));
        }
        if self.target_len == 0 {
            return Err(Error::InvalidSpec("target_len must be at least 1".into()));
        }
        if self.multiplicity == 0 {
            return Err(Error::InvalidSpec("multiplicity must be at least 1".into()));
        }
        if !(self.dim_fraction > 0.0 && self.dim_fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "dim_fraction {} must be in (0, 1]",
                self.dim_fraction
            )));
        }
        Ok(())
    }
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            attack_len: 1,
            context_len: 1,
            target_len: 1,
            multiplicity: 1,
            dim_fraction: 1.0,
            steps: 300,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Result of teacher-forced evaluation of one (context, target) pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackOutcome {
    pub per_token_correct: Vec<bool>,
    /// Fraction of target tokens predicted correctly.
    pub success_fraction: f64,
    /// Every target token correct; equivalent to the argmax rollout
    /// reproducing the target.
    pub full_success: bool,
    pub final_loss: f64,
    pub steps_used: usize,
}

/// One boolean mask row over `dim` activation dimensions with exactly
/// `round(f · dim)` entries set, chosen uniformly without replacement.
pub fn make_mask(dim: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!("mask fraction {fraction} must be in (0, 1]")));
    }
    let picks = (fraction * dim as f64).round() as usize;
    if picks == 0 {
        return Err(Error::InvalidSpec(format!(
            "fraction {fraction} of {dim} dimensions rounds to an empty mask"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(mask_row(dim, picks, &mut rng))
}

fn mask_row(dim: usize, picks: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut pool: Vec<usize> = (0..dim).collect();
    for i in 0..picks {
        let j = rng.gen_range(i..dim);
        pool.swap(i, j);
    }
    let mut row = vec![false; dim];
    for &idx in &pool[..picks] {
        row[idx] = true;
    }
    row
}

/// The attack vector P (attack_len × dim) and its dimension mask.
/// Entries outside the mask are identically zero, an invariant that is
/// re-established after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T: Scalar> {
    values: Tensor<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> Perturbation<T> {
    /// Zero values with a fresh mask of `round(fraction · dim)` live
    /// dimensions per row, rows drawn independently from `seed`.
    pub fn zeros(attack_len: usize, dim: usize, fraction: f64, seed: u64) -> Result<Self> {
        if attack_len == 0 {
            return Err(Error::InvalidSpec("perturbation needs at least one row".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!("mask fraction {fraction} must be in (0, 1]")));
        }
        let picks = (fraction * dim as f64).round() as usize;
        if picks == 0 {
            return Err(Error::InvalidSpec(format!(
                "fraction {fraction} of {dim} dimensions rounds to an empty mask"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Vec::with_capacity(attack_len * dim);
        for _ in 0..attack_len {
            mask.extend(mask_row(dim, picks, &mut rng));
        }
        Ok(Perturbation { values: Tensor::zeros(vec![attack_len, dim]), mask })
    }

    /// All-dimensions zero perturbation (f = 1).
    pub fn full(attack_len: usize, dim: usize) -> Self {
        Perturbation {
            values: Tensor::zeros(vec![attack_len, dim]),
            mask: vec![true; attack_len * dim],
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn attack_len(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// 0/1 tensor form of the mask.
    pub fn mask_tensor(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
        Tensor::new(vec![self.attack_len(), self.dim()], data).expect("mask sized with values")
    }

    /// Zero everything outside the mask.
    pub fn apply_mask(&mut self) {
        for (v, &keep) in self.values.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *v = T::ZERO;
            }
        }
    }

    /// True when no unmasked entry is nonzero.
    pub fn respects_mask(&self) -> bool {
        self.values.data().iter().zip(&self.mask).all(|(&v, &keep)| keep || v == T::ZERO)
    }
}

/// `length` i.i.d. uniform tokens from `[0, vocab)`.
pub fn sample_random_tokens(vocab: usize, length: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length).map(|_| rng.gen_range(0..vocab)).collect()
}
