// temporary probe: attack efficacy + kappa scale on the tiny trained model
use actlab_core::attack::{optimize_attack, sample_random_tokens, AttackSpec};
use actlab_core::model::{train, CorpusSpec, ModelConfig, TrainParams};

fn main() {
    let config = ModelConfig {
        embed_dim: 32, vocab_size: 64, n_layers: 2, n_heads: 2, max_context: 128, p_bits: 16,
    };
    let corpus = CorpusSpec::new(64, 7);
    let params = TrainParams::default();
    let (model, _) = train::<f32>(config, &corpus, &params, 42).unwrap();
    println!("trained");

    // a=1, t=1 full-success rate over 20 seeds
    let t0 = std::time::Instant::now();
    let mut wins = 0;
    for rep in 0..20u64 {
        let spec = AttackSpec { attack_len: 1, context_len: 1, target_len: 1, multiplicity: 1,
            dim_fraction: 1.0, steps: 300, lr: 0.1, seed: rep };
        let s = sample_random_tokens(64, 1, 1000 + rep);
        let t = sample_random_tokens(64, 1, 2000 + rep);
        let run = optimize_attack(&model, &[(s, t)], &spec).unwrap();
        if run.full_success() { wins += 1; }
    }
    println!("a=1 t=1: {wins}/20 full success, {:?}", t0.elapsed());

    // success fraction vs t for a=1 and a=2 (3 reps each)
    for a in [1usize, 2, 4] {
        print!("a={a}: ");
        for t in [1usize, 2, 4, 8, 16, 32, 64] {
            let mut acc = 0.0;
            let reps = 3;
            for rep in 0..reps as u64 {
                let spec = AttackSpec { attack_len: a, context_len: a, target_len: t, multiplicity: 1,
                    dim_fraction: 1.0, steps: 300, lr: 0.1, seed: 77 + rep };
                let s = sample_random_tokens(64, a, 10_000 + 31 * rep + t as u64);
                let tt = sample_random_tokens(64, t, 20_000 + 37 * rep + t as u64);
                let run = optimize_attack(&model, &[(s, tt)], &spec).unwrap();
                acc += run.success_fraction();
            }
            print!("t={t}:{:.2} ", acc / reps as f64);
        }
        println!(" ({:?})", t0.elapsed());
    }
}
