//! Forward passes, as tape graphs. The model is split into `f_before`
//! (embedding plus the first `split` blocks) and `f_after` (the rest),
//! so a perturbation can be injected on the activation surface between
//! them. The default split 0 injects right after the embedding.

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Tape node ids of every weight tensor, in `param_tensors` order.
pub(crate) struct WeightNodes {
    pub flat: Vec<NodeId>,
}

const PER_BLOCK: usize = 16;

impl WeightNodes {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, weights: &Weights<T>, as_leaves: bool) -> Self {
        let flat = weights
            .param_tensors()
            .into_iter()
            .map(|t| if as_leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        WeightNodes { flat }
    }

    fn tok_embed(&self) -> NodeId {
        self.flat[0]
    }
    fn pos_embed(&self) -> NodeId {
        self.flat[1]
    }
    fn block(&self, b: usize) -> &[NodeId] {
        &self.flat[2 + b * PER_BLOCK..2 + (b + 1) * PER_BLOCK]
    }
    fn ln_final(&self, n_layers: usize) -> (NodeId, NodeId) {
        let base = 2 + n_layers * PER_BLOCK;
        (self.flat[base], self.flat[base + 1])
    }
    fn unembed(&self, n_layers: usize) -> NodeId {
        self.flat[2 + n_layers * PER_BLOCK + 2]
    }
}

fn layer_norm_affine<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let normed = tape.layer_norm(x)?;
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, bias)
}

fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &[NodeId],
    config: &ModelConfig,
) -> Result<NodeId> {
    let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_in, b_in, w_out, b_out] =
        <[NodeId; PER_BLOCK]>::try_from(nodes).expect("block slice is 16 nodes");

    // attention sublayer
    let normed = layer_norm_affine(tape, x, ln1_g, ln1_b)?;
    let q = tape.matmul(normed, wq)?;
    let q = tape.add_row(q, bq)?;
    let k = tape.matmul(normed, wk)?;
    let k = tape.add_row(k, bk)?;
    let v = tape.matmul(normed, wv)?;
    let v = tape.add_row(v, bv)?;

    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let masked = tape.causal_mask(scores)?;
        let probs = tape.softmax(masked)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn = tape.matmul(merged, wo)?;
    let attn = tape.add_row(attn, bo)?;
    let x = tape.add(x, attn)?;

    // MLP sublayer
    let normed = layer_norm_affine(tape, x, ln2_g, ln2_b)?;
    let hidden = tape.matmul(normed, w_in)?;
    let hidden = tape.add_row(hidden, b_in)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul(hidden, w_out)?;
    let out = tape.add_row(out, b_out)?;
    tape.add(x, out)
}

/// Blocks `from..to`, then (when `to == n_layers`) nothing further —
/// callers append the head themselves via [`unembed_head`].
fn run_blocks<T: Scalar>(
    tape: &mut Tape<T>,
    mut x: NodeId,
    nodes: &WeightNodes,
    config: &ModelConfig,
    from: usize,
    to: usize,
) -> Result<NodeId> {
    for b in from..to {
        x = block_forward(tape, x, nodes.block(b), config)?;
    }
    Ok(x)
}

fn unembed_head<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &WeightNodes,
    config: &ModelConfig,
) -> Result<NodeId> {
    let (g, b) = nodes.ln_final(config.n_layers);
    let normed = layer_norm_affine(tape, x, g, b)?;
    tape.matmul(normed, nodes.unembed(config.n_layers))
}

/// Token embedding + position embedding as a tape subgraph (used in
/// training, where the embedding tables are leaves).
fn embed_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &WeightNodes,
    tokens: &[usize],
) -> Result<NodeId> {
    let tok = tape.gather(nodes.tok_embed(), tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather(nodes.pos_embed(), &positions)?;
    tape.add(tok, pos)
}

impl<T: Scalar> Model<T> {
    fn check_context(&self, len: usize) -> Result<()> {
        if len > self.config.max_context {
            return Err(Error::ContextOverflow { needed: len, max_context: self.config.max_context });
        }
        Ok(())
    }

    /// `f_before` at split 0: per-token embedding plus learned position
    /// embedding. Returns an |S|×d tensor; empty input gives 0×d.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        self.check_context(tokens.len())?;
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.weights.tok_embed.row(t);
            let pe = self.weights.pos_embed.row(i);
            data.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    /// Embedding plus the first `split` transformer blocks.
    pub fn f_before(&self, tokens: &[usize], split: usize) -> Result<Tensor<T>> {
        assert!(split <= self.config.n_layers, "split beyond layer count");
        let v = self.embed(tokens)?;
        if split == 0 || tokens.is_empty() {
            return Ok(v);
        }
        let mut tape = Tape::new();
        let nodes = WeightNodes::register(&mut tape, &self.weights, false);
        let x = tape.constant(v);
        let out = run_blocks(&mut tape, x, &nodes, &self.config, 0, split)?;
        Ok(tape.value(out).clone())
    }

    /// Graph form of `f_after` from a given split; used by the attack
    /// loss, which needs gradients through it.
    pub(crate) fn f_after_nodes(
        &self,
        tape: &mut Tape<T>,
        v: NodeId,
        split: usize,
    ) -> Result<NodeId> {
        assert!(split <= self.config.n_layers, "split beyond layer count");
        let nodes = WeightNodes::register(tape, &self.weights, false);
        let x = run_blocks(tape, v, &nodes, &self.config, split, self.config.n_layers)?;
        unembed_head(tape, x, &nodes, &self.config)
    }

    /// `f_after` at a given split, value form: activations in, logits out.
    pub fn f_after(&self, v: &Tensor<T>, split: usize) -> Result<Tensor<T>> {
        if v.rank() != 2 || v.cols() != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "f_after",
                detail: format!("expected s×{} activations, got {:?}", self.config.embed_dim, v.shape()),
            });
        }
        if v.rows() == 0 {
            return Err(Error::ShapeMismatch { op: "f_after", detail: "empty activation stack".into() });
        }
        self.check_context(v.rows())?;
        v.ensure_finite("f_after input")?;
        let mut tape = Tape::new();
        let vn = tape.constant(v.clone());
        let out = self.f_after_nodes(&mut tape, vn, split)?;
        Ok(tape.value(out).clone())
    }

    /// `f_after` at the default split 0 (all blocks plus unembedding).
    pub fn forward_after(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.f_after(v, 0)
    }

    /// Next-token logits at every position.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.forward_after(&self.embed(tokens)?)
    }

    /// Logits with an optional additive perturbation on the activations
    /// of the first rows after `f_before(·, split)`.
    pub fn logits_perturbed(
        &self,
        tokens: &[usize],
        perturb: Option<&Tensor<T>>,
        split: usize,
    ) -> Result<Tensor<T>> {
        let v = self.f_before(tokens, split)?;
        if v.rows() == 0 {
            return Err(Error::ShapeMismatch { op: "logits", detail: "empty sequence".into() });
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(v);
        if let Some(p) = perturb {
            if p.rank() != 2 || p.cols() != self.config.embed_dim || p.rows() > tokens.len() {
                return Err(Error::ShapeMismatch {
                    op: "logits_perturbed",
                    detail: format!("perturbation shape {:?} vs {} tokens", p.shape(), tokens.len()),
                });
            }
            let pn = tape.constant(p.clone());
            x = tape.add_rows_at(x, pn, 0)?;
        }
        let out = self.f_after_nodes(&mut tape, x, split)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax autoregressive sampling for `count` tokens, ties broken by
    /// lowest token id. The optional perturbation is re-applied to the
    /// leading activation rows at every step.
    pub fn argmax_rollout(
        &self,
        context: &[usize],
        count: usize,
        perturb: Option<&Tensor<T>>,
    ) -> Result<Vec<usize>> {
        self.check_tokens(context)?;
        self.check_context(context.len() + count)?;
        if count == 0 {
            return Ok(Vec::new());
        }
        if context.is_empty() {
            return Err(Error::InvalidSpec("rollout needs at least one context token".into()));
        }
        let mut seq = context.to_vec();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let logits = self.logits_perturbed(&seq, perturb, 0)?;
            let next = Tensor::<T>::argmax_slice(logits.row(logits.rows() - 1));
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Mean teacher-forced cross-entropy of `target` continuing `context`:
    /// one causal pass over context+target, cross-entropy read at the
    /// target positions.
    pub fn teacher_forced_ce(&self, context: &[usize], target: &[usize]) -> Result<f64> {
        if context.is_empty() || target.is_empty() {
            return Err(Error::InvalidSpec("teacher forcing needs non-empty context and target".into()));
        }
        let full: Vec<usize> = context.iter().chain(target).copied().collect();
        self.check_tokens(&full)?;
        self.check_context(full.len())?;
        let v = self.embed(&full)?;
        let mut tape = Tape::new();
        let vn = tape.constant(v);
        let logits = self.f_after_nodes(&mut tape, vn, 0)?;
        let rows = tape.slice_rows(logits, context.len() - 1, target.len())?;
        let ce = tape.cross_entropy(rows, target)?;
        let total = tape.sum(ce)?;
        let mean = tape.scale(total, 1.0 / target.len() as f64)?;
        Ok(tape.value(mean).item().to_f64())
    }

    /// Register every weight tensor as a differentiable leaf, for
    /// training steps. One registration serves a whole batch.
    pub(crate) fn register_train_weights(&self, tape: &mut Tape<T>) -> WeightNodes {
        WeightNodes::register(tape, &self.weights, true)
    }

    /// Summed next-token cross-entropy of one training sequence, built
    /// on leaf weights. Predicts tokens 1.. from positions 0..len-1.
    pub(crate) fn train_sequence_ce(
        &self,
        tape: &mut Tape<T>,
        nodes: &WeightNodes,
        tokens: &[usize],
    ) -> Result<NodeId> {
        if tokens.len() < 2 {
            return Err(Error::InvalidSpec("training sequences need at least 2 tokens".into()));
        }
        self.check_tokens(tokens)?;
        self.check_context(tokens.len())?;
        let x = embed_nodes(tape, nodes, tokens)?;
        let x = run_blocks(tape, x, nodes, &self.config, 0, self.config.n_layers)?;
        let logits = unembed_head(tape, x, nodes, &self.config)?;
        let inputs = tape.slice_rows(logits, 0, tokens.len() - 1)?;
        let ce = tape.cross_entropy(inputs, &tokens[1..])?;
        tape.sum(ce)
    }
}
