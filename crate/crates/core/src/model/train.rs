//! Training loop: Adam on teacher-forced cross-entropy over chain
//! samples. Single-worker and deterministic per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusSpec, MarkovChain, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainParams {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    /// Held-out sequences used for the before/after evaluation.
    pub holdout_sequences: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { steps: 2000, lr: 1e-2, batch: 8, seq_len: 32, holdout_sequences: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub initial_holdout_ce: f64,
    pub final_holdout_ce: f64,
    /// (step, mean training cross-entropy)
    pub loss_curve: Vec<(usize, f64)>,
}

/// Mean teacher-forced cross-entropy over fixed held-out sequences.
fn holdout_ce<T: Scalar>(model: &Model<T>, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        total += model.teacher_forced_ce(&seq[..1], &seq[1..])? * (seq.len() - 1) as f64;
        count += seq.len() - 1;
    }
    Ok(total / count as f64)
}

/// Initialize a model from `seed` and fit it to the chain. `steps == 0`
/// returns the initialization unchanged. Divergence (non-finite loss)
/// aborts with [`Error::Diverged`].
pub fn train<T: Scalar>(
    config: ModelConfig,
    corpus: &CorpusSpec,
    params: &TrainParams,
    seed: u64,
) -> Result<(Model<T>, TrainStats)> {
    config.validate()?;
    if corpus.vocab_size != config.vocab_size {
        return Err(Error::InvalidSpec(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            corpus.vocab_size, config.vocab_size
        )));
    }
    if params.seq_len < 3 || params.seq_len > config.max_context {
        return Err(Error::InvalidSpec(format!(
            "seq_len {} must be in [3, max_context]",
            params.seq_len
        )));
    }
    if params.batch == 0 {
        return Err(Error::InvalidSpec("batch must be positive".into()));
    }

    let chain = MarkovChain::build(corpus)?;
    let mut model: Model<T> = Model::init(config, seed)?;

    // data stream and held-out stream are decoupled from the init seed
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(corpus.seed ^ 0x5851_f42d_4c95_7f2d);
    let holdout: Vec<Vec<usize>> = (0..params.holdout_sequences.max(1))
        .map(|_| chain.sample_sequence(params.seq_len, &mut holdout_rng))
        .collect();

    let initial_holdout_ce = holdout_ce(&model, &holdout)?;
    let mut loss_curve = Vec::with_capacity(params.steps);
    let mut adam = crate::optim::Adam::new(params.lr);
    let positions_per_batch = (params.batch * (params.seq_len - 1)) as f64;

    for step in 0..params.steps {
        let mut tape = Tape::new();
        let nodes = model.register_train_weights(&mut tape);
        let mut total = None;
        for _ in 0..params.batch {
            let seq = chain.sample_sequence(params.seq_len, &mut data_rng);
            let ce = model.train_sequence_ce(&mut tape, &nodes, &seq)?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let loss = tape.scale(total.expect("batch >= 1"), 1.0 / positions_per_batch)?;
        let loss_value = tape.value(loss).item().to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        loss_curve.push((step, loss_value));
        tape.backward(loss)?;

        let grads: Vec<_> = nodes
            .flat
            .iter()
            .map(|&id| tape.grad(id).expect("all weights reachable from the loss").clone())
            .collect();
        let mut tensors = model.weights.param_tensors_mut();
        let grad_refs: Vec<_> = grads.iter().collect();
        adam.step(&mut tensors, &grad_refs);
        for t in model.weights.param_tensors() {
            t.ensure_finite("adam update")?;
        }
    }

    let final_holdout_ce = holdout_ce(&model, &holdout)?;
    Ok((model, TrainStats { initial_holdout_ce, final_holdout_ce, loss_curve }))
}
