//! Parameter containers and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: NormParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// vocab_size × embed_dim
    pub tok_embed: Tensor<T>,
    /// max_context × embed_dim, learned absolute positions
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_final: NormParams<T>,
    /// embed_dim × vocab_size, untied from tok_embed
    pub unembed: Tensor<T>,
}

/// Box-Muller standard normal; keeps the crate off heavier samplers.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn randn_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::from_f64(gauss(rng) * std)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

impl<T: Scalar> Weights<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let v = config.vocab_size;
        let hidden = 4 * d;
        let base_std = 0.02;
        // residual-path projections are damped so depth does not blow up
        // activations at init
        let resid_std = base_std / ((2 * config.n_layers.max(1)) as f64).sqrt();

        let tok_embed = randn_tensor(&mut rng, v, d, base_std);
        let pos_embed = randn_tensor(&mut rng, config.max_context, d, base_std);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: NormParams {
                    gain: Tensor::full(vec![d], T::ONE),
                    bias: Tensor::zeros(vec![d]),
                },
                attn: AttentionParams {
                    wq: randn_tensor(&mut rng, d, d, base_std),
                    bq: Tensor::zeros(vec![d]),
                    wk: randn_tensor(&mut rng, d, d, base_std),
                    bk: Tensor::zeros(vec![d]),
                    wv: randn_tensor(&mut rng, d, d, base_std),
                    bv: Tensor::zeros(vec![d]),
                    wo: randn_tensor(&mut rng, d, d, resid_std),
                    bo: Tensor::zeros(vec![d]),
                },
                ln2: NormParams {
                    gain: Tensor::full(vec![d], T::ONE),
                    bias: Tensor::zeros(vec![d]),
                },
                mlp: MlpParams {
                    w_in: randn_tensor(&mut rng, d, hidden, base_std),
                    b_in: Tensor::zeros(vec![hidden]),
                    w_out: randn_tensor(&mut rng, hidden, d, resid_std),
                    b_out: Tensor::zeros(vec![d]),
                },
            })
            .collect();
        let ln_final = NormParams {
            gain: Tensor::full(vec![d], T::ONE),
            bias: Tensor::zeros(vec![d]),
        };
        let unembed = randn_tensor(&mut rng, d, v, base_std);

        Weights { tok_embed, pos_embed, blocks, ln_final, unembed }
    }

    /// Every parameter tensor, in the fixed order shared by the
    /// optimizer, the tape registration, and the weight file layout:
    /// tok_embed, pos_embed, then per block (ln1 gain/bias, wq, bq, wk,
    /// bk, wv, bv, wo, bo, ln2 gain/bias, w_in, b_in, w_out, b_out),
    /// then ln_final gain/bias, unembed.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1.gain, &b.ln1.bias, &b.attn.wq, &b.attn.bq, &b.attn.wk, &b.attn.bk,
                &b.attn.wv, &b.attn.bv, &b.attn.wo, &b.attn.bo, &b.ln2.gain, &b.ln2.bias,
                &b.mlp.w_in, &b.mlp.b_in, &b.mlp.w_out, &b.mlp.b_out,
            ]);
        }
        out.extend([&self.ln_final.gain, &self.ln_final.bias, &self.unembed]);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gain, &mut b.ln1.bias, &mut b.attn.wq, &mut b.attn.bq,
                &mut b.attn.wk, &mut b.attn.bk, &mut b.attn.wv, &mut b.attn.bv,
                &mut b.attn.wo, &mut b.attn.bo, &mut b.ln2.gain, &mut b.ln2.bias,
                &mut b.mlp.w_in, &mut b.mlp.b_in, &mut b.mlp.w_out, &mut b.mlp.b_out,
            ]);
        }
        out.extend([&mut self.ln_final.gain, &mut self.ln_final.bias, &mut self.unembed]);
        out
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tok_embed: self.tok_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: NormParams { gain: b.ln1.gain.cast(), bias: b.ln1.bias.cast() },
                    attn: AttentionParams {
                        wq: b.attn.wq.cast(),
                        bq: b.attn.bq.cast(),
                        wk: b.attn.wk.cast(),
                        bk: b.attn.bk.cast(),
                        wv: b.attn.wv.cast(),
                        bv: b.attn.bv.cast(),
                        wo: b.attn.wo.cast(),
                        bo: b.attn.bo.cast(),
                    },
                    ln2: NormParams { gain: b.ln2.gain.cast(), bias: b.ln2.bias.cast() },
                    mlp: MlpParams {
                        w_in: b.mlp.w_in.cast(),
                        b_in: b.mlp.b_in.cast(),
                        w_out: b.mlp.w_out.cast(),
                        b_out: b.mlp.b_out.cast(),
                    },
                })
                .collect(),
            ln_final: NormParams {
                gain: self.ln_final.gain.cast(),
                bias: self.ln_final.bias.cast(),
            },
            unembed: self.unembed.cast(),
        }
    }
}
