// temporary probe
use actlab_core::model::{train, CorpusSpec, ModelConfig, TrainParams};

fn main() {
    let config = ModelConfig {
        embed_dim: 32, vocab_size: 64, n_layers: 2, n_heads: 2, max_context: 128, p_bits: 16,
    };
    let corpus = CorpusSpec::new(64, 7);
    let t0 = std::time::Instant::now();
    let params = TrainParams { steps: 2000, lr: 1e-2, batch: 8, seq_len: 32, holdout_sequences: 32 };
    let (_m, stats) = train::<f32>(config, &corpus, &params, 42).unwrap();
    println!("elapsed {:?}", t0.elapsed());
    println!("initial holdout {:.4} final {:.4} ratio {:.4}",
        stats.initial_holdout_ce, stats.final_holdout_ce,
        stats.final_holdout_ce / stats.initial_holdout_ce);
    for (s, l) in stats.loss_curve.iter().step_by(250) { println!("step {s}: {l:.4}"); }
    println!("last {:?}", stats.loss_curve.last());
}
