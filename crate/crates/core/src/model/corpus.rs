//! Synthetic training data: a seeded order-2 Markov chain over the
//! vocabulary. Each predecessor token owns a small candidate set for
//! its successor, and the token before that picks which candidate is
//! favored, so the chain has strong first-order structure that a small
//! model learns quickly plus genuine second-order structure on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Successor candidates per predecessor token.
    pub branching: usize,
    /// Probability mass on the favored candidate; the rest is split
    /// evenly over the other candidates.
    pub favored_mass: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        CorpusSpec { vocab_size, branching: 4, favored_mass: 0.7, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec("corpus vocabulary must have at least 2 tokens".into()));
        }
        if self.branching < 2 || self.branching > self.vocab_size {
            return Err(Error::InvalidSpec(format!(
                "branching {} must be in [2, vocab_size]",
                self.branching
            )));
        }
        if !(self.favored_mass > 0.0 && self.favored_mass < 1.0) {
            return Err(Error::InvalidSpec("favored_mass must be in (0,1)".into()));
        }
        Ok(())
    }
}

pub struct MarkovChain {
    vocab: usize,
    branching: usize,
    favored_mass: f64,
    /// branching successor candidates per prev1 token
    candidates: Vec<u32>,
    /// favored candidate index per (prev2, prev1) pair
    favored: Vec<u8>,
}

impl MarkovChain {
    pub fn build(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let k = spec.branching;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut candidates = Vec::with_capacity(v * k);
        for _ in 0..v {
            // k distinct successors, partial Fisher-Yates
            let mut pool: Vec<u32> = (0..v as u32).collect();
            for i in 0..k {
                let j = rng.gen_range(i..v);
                pool.swap(i, j);
            }
            candidates.extend_from_slice(&pool[..k]);
        }
        let favored = (0..v * v).map(|_| rng.gen_range(0..k) as u8).collect();
        Ok(MarkovChain { vocab: v, branching: k, favored_mass: spec.favored_mass, candidates, favored })
    }

    /// p(next = candidates[prev1][c] | prev2, prev1)
    fn candidate_prob(&self, prev2: usize, prev1: usize, c: usize) -> f64 {
        let fav = self.favored[prev2 * self.vocab + prev1] as usize;
        if c == fav {
            self.favored_mass
        } else {
            (1.0 - self.favored_mass) / (self.branching - 1) as f64
        }
    }

    fn sample_next(&self, prev2: usize, prev1: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut dart: f64 = rng.gen();
        for c in 0..self.branching {
            dart -= self.candidate_prob(prev2, prev1, c);
            if dart <= 0.0 {
                return self.candidates[prev1 * self.branching + c] as usize;
            }
        }
        self.candidates[prev1 * self.branching + self.branching - 1] as usize
    }

    /// A fresh sequence: two uniform seed tokens, then the chain.
    pub fn sample_sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len.min(2) {
            seq.push(rng.gen_range(0..self.vocab));
        }
        while seq.len() < len {
            let next = self.sample_next(seq[seq.len() - 2], seq[seq.len() - 1], rng);
            seq.push(next);
        }
        seq
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Entropy of the conditional distribution, in nats. The best
    /// possible prediction loss on chain-interior positions.
    pub fn conditional_entropy(&self) -> f64 {
        let fav = self.favored_mass;
        let other = (1.0 - fav) / (self.branching - 1) as f64;
        -(fav * fav.ln() + (self.branching - 1) as f64 * other * other.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_deterministic_per_seed() {
        let spec = CorpusSpec::new(32, 5);
        let chain = MarkovChain::build(&spec).unwrap();
        let a = chain.sample_sequence(20, &mut ChaCha8Rng::seed_from_u64(1));
        let b = chain.sample_sequence(20, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t < 32));
    }

    #[test]
    fn successors_come_from_candidate_sets() {
        let spec = CorpusSpec::new(16, 9);
        let chain = MarkovChain::build(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = chain.sample_sequence(200, &mut rng);
        for w in seq.windows(3) {
            let prev1 = w[1];
            let next = w[2] as u32;
            let cands = &chain.candidates[prev1 * chain.branching..(prev1 + 1) * chain.branching];
            assert!(cands.contains(&next));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(CorpusSpec { vocab_size: 1, branching: 2, favored_mass: 0.5, seed: 0 }.validate().is_err());
        assert!(CorpusSpec { vocab_size: 8, branching: 1, favored_mass: 0.5, seed: 0 }.validate().is_err());
        assert!(CorpusSpec { vocab_size: 8, branching: 4, favored_mass: 1.0, seed: 0 }.validate().is_err());
    }
}
