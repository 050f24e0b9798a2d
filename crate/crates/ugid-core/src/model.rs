//! Toy GPT-style autoregressive transformer with full instrumentation.
//!
//! Pre-layer-norm decoder blocks (causal multi-head attention + GELU FFN),
//! learned absolute position embeddings, and an unembedding tied to the
//! token embedding. Every forward pass can capture a [`Trace`]: all
//! per-layer, per-head attention matrices, the residual stream after each
//! block, and the output logits. The same struct instantiates both the
//! trainable student and the frozen reference model.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, ValueId};
use crate::rng::Rng;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id out of vocabulary")]
    TokenOutOfVocabulary,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus sequence shorter than 2 tokens")]
    SequenceTooShort,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Model dimensions and the seed its parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Smallest configuration where a middle target-layer band and
    /// multi-head routing are both meaningful.
    pub fn toy_default(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 16,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 4 {
            return Err(ModelError::InvalidConfig(format!(
                "n_layers {} < 4: no middle target-layer band exists",
                self.n_layers
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    /// Learned relative-position score bias per head; entry `[h][d]` is
    /// added to attention logits at query-key distance `d`. Initialized to
    /// favor the diagonal so heads start with usable self-attention.
    pub attn_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
}

impl Params {
    fn init(cfg: &ModelConfig) -> Params {
        let mut rng = Rng::new(cfg.seed).fork("model-init");
        let d = cfg.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
            Tensor::matrix(rows, cols, data)
        };
        let std = 0.06;
        let token_embedding = normal(cfg.vocab_size, d, std);
        let position_embedding = normal(cfg.max_seq_len, d, std);
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let mut bias = vec![0.0; cfg.n_heads * cfg.max_seq_len];
                for h in 0..cfg.n_heads {
                    bias[h * cfg.max_seq_len] = 1.5;
                }
                BlockParams {
                ln1_gain: Tensor::vector(vec![1.0; d]),
                ln1_bias: Tensor::vector(vec![0.0; d]),
                w_query: normal(d, d, std),
                w_key: normal(d, d, std),
                w_value: normal(d, d, std),
                w_out: normal(d, d, std),
                attn_bias: Tensor::matrix(cfg.n_heads, cfg.max_seq_len, bias),
                ln2_gain: Tensor::vector(vec![1.0; d]),
                ln2_bias: Tensor::vector(vec![0.0; d]),
                ff_w1: normal(d, cfg.d_ff, std),
                ff_b1: Tensor::vector(vec![0.0; cfg.d_ff]),
                ff_w2: normal(cfg.d_ff, d, std),
                ff_b2: Tensor::vector(vec![0.0; d]),
            }})
            .collect();
        Params {
            token_embedding,
            position_embedding,
            blocks,
            final_norm_gain: Tensor::vector(vec![1.0; d]),
            final_norm_bias: Tensor::vector(vec![0.0; d]),
        }
    }

    /// Canonically ordered `(name, tensor)` view used by the checkpoint
    /// format and the freeze bookkeeping.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in Self::block_fields(b) {
                out.push((format!("blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm_gain));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out
    }

    fn block_fields(b: &BlockParams) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1.gain", &b.ln1_gain),
            ("ln1.bias", &b.ln1_bias),
            ("attn.w_query", &b.w_query),
            ("attn.w_key", &b.w_key),
            ("attn.w_value", &b.w_value),
            ("attn.w_out", &b.w_out),
            ("attn.bias", &b.attn_bias),
            ("ln2.gain", &b.ln2_gain),
            ("ln2.bias", &b.ln2_bias),
            ("ffn.w1", &b.ff_w1),
            ("ffn.b1", &b.ff_b1),
            ("ffn.w2", &b.ff_w2),
            ("ffn.b2", &b.ff_b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &mut b.ln1_gain));
            out.push((format!("blocks.{i}.ln1.bias"), &mut b.ln1_bias));
            out.push((format!("blocks.{i}.attn.w_query"), &mut b.w_query));
            out.push((format!("blocks.{i}.attn.w_key"), &mut b.w_key));
            out.push((format!("blocks.{i}.attn.w_value"), &mut b.w_value));
            out.push((format!("blocks.{i}.attn.w_out"), &mut b.w_out));
            out.push((format!("blocks.{i}.attn.bias"), &mut b.attn_bias));
            out.push((format!("blocks.{i}.ln2.gain"), &mut b.ln2_gain));
            out.push((format!("blocks.{i}.ln2.bias"), &mut b.ln2_bias));
            out.push((format!("blocks.{i}.ffn.w1"), &mut b.ff_w1));
            out.push((format!("blocks.{i}.ffn.b1"), &mut b.ff_b1));
            out.push((format!("blocks.{i}.ffn.w2"), &mut b.ff_w2));
            out.push((format!("blocks.{i}.ffn.b2"), &mut b.ff_b2));
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm_gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm_bias));
        out
    }
}

/// Everything one forward pass exposes: per-layer per-head attention,
/// the residual stream after every block, and the output logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// `attn[layer][head]` is a T×T row-stochastic lower-triangular matrix.
    pub attn: Vec<Vec<Tensor>>,
    /// `hidden[layer]` is the T×d residual stream after the block's FFN
    /// and residual add.
    pub hidden: Vec<Tensor>,
    /// T×vocab logits at every position.
    pub logits: Tensor,
}

/// Tape-resident counterpart of [`Trace`], used while a loss is being
/// assembled. Head outputs are kept around for activation patching.
pub struct TapeTrace {
    pub attn: Vec<Vec<ValueId>>,
    pub hidden: Vec<ValueId>,
    pub logits: ValueId,
    pub head_outputs: Vec<Vec<ValueId>>,
}

impl TapeTrace {
    pub fn detach(&self, tape: &Tape) -> Trace {
        Trace {
            attn: self
                .attn
                .iter()
                .map(|heads| heads.iter().map(|&id| tape.value(id).clone()).collect())
                .collect(),
            hidden: self.hidden.iter().map(|&id| tape.value(id).clone()).collect(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Tape handles for every parameter of a registered model.
pub struct BlockVars {
    pub ln1_gain: ValueId,
    pub ln1_bias: ValueId,
    pub w_query: ValueId,
    pub w_key: ValueId,
    pub w_value: ValueId,
    pub w_out: ValueId,
    pub attn_bias: ValueId,
    pub ln2_gain: ValueId,
    pub ln2_bias: ValueId,
    pub ff_w1: ValueId,
    pub ff_b1: ValueId,
    pub ff_w2: ValueId,
    pub ff_b2: ValueId,
}

pub struct ModelVars {
    pub token_embedding: ValueId,
    pub position_embedding: ValueId,
    pub blocks: Vec<BlockVars>,
    pub final_norm_gain: ValueId,
    pub final_norm_bias: ValueId,
}

impl ModelVars {
    /// Parameter handles in the same canonical order as [`Params::named`].
    pub fn named(&self) -> Vec<(String, ValueId)> {
        let mut out: Vec<(String, ValueId)> = vec![
            ("token_embedding".into(), self.token_embedding),
            ("position_embedding".into(), self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), b.ln1_gain));
            out.push((format!("blocks.{i}.ln1.bias"), b.ln1_bias));
            out.push((format!("blocks.{i}.attn.w_query"), b.w_query));
            out.push((format!("blocks.{i}.attn.w_key"), b.w_key));
            out.push((format!("blocks.{i}.attn.w_value"), b.w_value));
            out.push((format!("blocks.{i}.attn.w_out"), b.w_out));
            out.push((format!("blocks.{i}.attn.bias"), b.attn_bias));
            out.push((format!("blocks.{i}.ln2.gain"), b.ln2_gain));
            out.push((format!("blocks.{i}.ln2.bias"), b.ln2_bias));
            out.push((format!("blocks.{i}.ffn.w1"), b.ff_w1));
            out.push((format!("blocks.{i}.ffn.b1"), b.ff_b1));
            out.push((format!("blocks.{i}.ffn.w2"), b.ff_w2));
            out.push((format!("blocks.{i}.ffn.b2"), b.ff_b2));
        }
        out.push(("final_norm.gain".into(), self.final_norm_gain));
        out.push(("final_norm.bias".into(), self.final_norm_bias));
        out
    }
}

/// Which parameters register as differentiable leaves.
#[derive(Debug, Clone)]
pub enum Trainability<'a> {
    /// Nothing trains: every parameter is a constant leaf.
    Frozen,
    /// Everything trains, embeddings included (pretraining).
    All,
    /// Only the listed blocks train; embeddings, other blocks, the final
    /// norm and the tied unembedding stay frozen.
    Blocks(&'a BTreeSet<usize>),
}

/// Replace one attention head's output vector at a single position with a
/// donor vector, before the output projection.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Model { config, params })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if tokens.iter().any(|&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocabulary);
        }
        Ok(())
    }

    /// Register all parameters on a tape.
    pub fn register(&self, tape: &mut Tape, trainability: Trainability) -> ModelVars {
        let train_block = |i: usize| -> bool {
            match &trainability {
                Trainability::Frozen => false,
                Trainability::All => true,
                Trainability::Blocks(set) => set.contains(&i),
            }
        };
        let train_shared = matches!(trainability, Trainability::All);
        let leaf = |tape: &mut Tape, t: &Tensor, trainable: bool| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let p = &self.params;
        let token_embedding = leaf(tape, &p.token_embedding, train_shared);
        let position_embedding = leaf(tape, &p.position_embedding, train_shared);
        let blocks = p
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let t = train_block(i);
                BlockVars {
                    ln1_gain: leaf(tape, &b.ln1_gain, t),
                    ln1_bias: leaf(tape, &b.ln1_bias, t),
                    w_query: leaf(tape, &b.w_query, t),
                    w_key: leaf(tape, &b.w_key, t),
                    w_value: leaf(tape, &b.w_value, t),
                    w_out: leaf(tape, &b.w_out, t),
                    attn_bias: leaf(tape, &b.attn_bias, t),
                    ln2_gain: leaf(tape, &b.ln2_gain, t),
                    ln2_bias: leaf(tape, &b.ln2_bias, t),
                    ff_w1: leaf(tape, &b.ff_w1, t),
                    ff_b1: leaf(tape, &b.ff_b1, t),
                    ff_w2: leaf(tape, &b.ff_w2, t),
                    ff_b2: leaf(tape, &b.ff_b2, t),
                }
            })
            .collect();
        let final_norm_gain = leaf(tape, &p.final_norm_gain, train_shared);
        let final_norm_bias = leaf(tape, &p.final_norm_bias, train_shared);
        ModelVars {
            token_embedding,
            position_embedding,
            blocks,
            final_norm_gain,
            final_norm_bias,
        }
    }

    /// Full decoder stack on a tape, recording the trace as it goes.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[TokenId],
        patch: Option<&PatchSpec>,
    ) -> Result<TapeTrace, ModelError> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        let tok = tape.embed_rows(vars.token_embedding, tokens);
        let pos = tape.slice_axis0(vars.position_embedding, 0, t_len);
        let mut x = tape.add(tok, pos);

        // Relative-bias gather pattern: entry (i, j) reads offset i - j of a
        // head's bias row; entries above the diagonal are never read by the
        // causal softmax, so they can safely point anywhere.
        let max_seq = self.config.max_seq_len;
        let bias_idx: Vec<Vec<usize>> = (0..n_heads)
            .map(|h| {
                let mut idx = Vec::with_capacity(t_len * t_len);
                for i in 0..t_len {
                    for j in 0..t_len {
                        let offset = i.saturating_sub(j);
                        idx.push(h * max_seq + offset);
                    }
                }
                idx
            })
            .collect();

        let mut attn = Vec::with_capacity(self.config.n_layers);
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        let mut head_outputs = Vec::with_capacity(self.config.n_layers);

        for (layer, b) in vars.blocks.iter().enumerate() {
            let normed = tape.layer_norm(x, b.ln1_gain, b.ln1_bias);
            let q = tape.matmul(normed, b.w_query);
            let k = tape.matmul(normed, b.w_key);
            let v = tape.matmul(normed, b.w_value);

            let mut layer_attn = Vec::with_capacity(n_heads);
            let mut layer_heads = Vec::with_capacity(n_heads);
            let mut outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim);
                let kh = tape.slice_cols(k, h * head_dim, head_dim);
                let vh = tape.slice_cols(v, h * head_dim, head_dim);
                let scores = tape.matmul_transpose_b(qh, kh);
                let scaled = tape.scale(scores, scale);
                let bias = tape.gather_flat(b.attn_bias, &bias_idx[h], vec![t_len, t_len]);
                let biased = tape.add(scaled, bias);
                let probs = tape.softmax_rows(biased, true)?;
                let mut out = tape.matmul(probs, vh);
                if let Some(p) = patch {
                    if p.layer == layer && p.head == h {
                        out = tape.overwrite_row(out, p.position, &p.values);
                    }
                }
                layer_attn.push(probs);
                layer_heads.push(out);
                outs.push(out);
            }
            let merged = tape.concat_cols(&outs);
            let projected = tape.matmul(merged, b.w_out);
            x = tape.add(x, projected);

            let normed2 = tape.layer_norm(x, b.ln2_gain, b.ln2_bias);
            let pre1 = tape.matmul(normed2, b.ff_w1);
            let pre1b = tape.add_bias_row(pre1, b.ff_b1);
            let act = tape.gelu(pre1b);
            let pre2 = tape.matmul(act, b.ff_w2);
            let pre2b = tape.add_bias_row(pre2, b.ff_b2);
            x = tape.add(x, pre2b);

            attn.push(layer_attn);
            hidden.push(x);
            head_outputs.push(layer_heads);
        }

        let final_normed = tape.layer_norm(x, vars.final_norm_gain, vars.final_norm_bias);
        let logits = tape.matmul_transpose_b(final_normed, vars.token_embedding);

        Ok(TapeTrace { attn, hidden, logits, head_outputs })
    }

    /// One forward pass with every instrumented quantity captured.
    pub fn forward_with_trace(&self, tokens: &[TokenId]) -> Result<Trace, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainability::Frozen);
        let trace = self.forward_on_tape(&mut tape, &vars, tokens, None)?;
        Ok(trace.detach(&tape))
    }

    /// Same as [`Model::forward_with_trace`] but with one head output
    /// overwritten, for causal-tracing experiments.
    pub fn forward_with_patch(
        &self,
        tokens: &[TokenId],
        patch: &PatchSpec,
    ) -> Result<Trace, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainability::Frozen);
        let trace = self.forward_on_tape(&mut tape, &vars, tokens, Some(patch))?;
        Ok(trace.detach(&tape))
    }

    /// Per-head pre-projection output vectors, `head_output[layer][head]`
    /// row-major T×head_dim. Donor material for activation patching.
    pub fn head_output(
        &self,
        tokens: &[TokenId],
        layer: usize,
        head: usize,
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, Trainability::Frozen);
        let trace = self.forward_on_tape(&mut tape, &vars, tokens, None)?;
        Ok(tape.value(trace.head_outputs[layer][head]).clone())
    }

    /// Softmax over the last position's logits.
    pub fn next_token_distribution(&self, prompt: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let trace = self.forward_with_trace(prompt)?;
        let last = trace.logits.rows() - 1;
        let row: Vec<f64> = (0..trace.logits.cols()).map(|c| trace.logits.at(last, c)).collect();
        Ok(softmax(&row))
    }

    /// exp of the mean per-token negative log-likelihood over all
    /// next-token predictions in the corpus.
    pub fn perplexity(&self, corpus: &[Vec<TokenId>]) -> Result<f64, ModelError> {
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut total_nll = 0.0;
        let mut count = 0usize;
        for seq in corpus {
            if seq.len() < 2 {
                return Err(ModelError::SequenceTooShort);
            }
            let trace = self.forward_with_trace(seq)?;
            let cols = trace.logits.cols();
            for pos in 0..seq.len() - 1 {
                let row: Vec<f64> = (0..cols).map(|c| trace.logits.at(pos, c)).collect();
                total_nll -= log_softmax_entry(&row, seq[pos + 1]);
                count += 1;
            }
        }
        Ok((total_nll / count as f64).exp())
    }

    /// Project a residual-stream row through the final norm and the tied
    /// unembedding: the logit-lens readout.
    pub fn lens_logits(&self, hidden_row: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        assert_eq!(hidden_row.len(), d, "lens input width mismatch");
        let normed = layer_norm_row(
            hidden_row,
            self.params.final_norm_gain.data(),
            self.params.final_norm_bias.data(),
        );
        let emb = &self.params.token_embedding;
        (0..self.config.vocab_size)
            .map(|v| {
                let row = &emb.data()[v * d..(v + 1) * d];
                normed.iter().zip(row).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

pub(crate) fn log_softmax_entry(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - max - log_denom
}

fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-8;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + EPS).sqrt();
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv_std * g + b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed: 99,
        };
        Model::init(cfg).unwrap()
    }

    #[test]
    fn config_rejects_bad_dims() {
        let mut cfg = ModelConfig::toy_default(1);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy_default(1);
        cfg.n_layers = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_shapes_match_contract() {
        let m = tiny();
        let trace = m.forward_with_trace(&[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(trace.hidden.len(), 4);
        assert_eq!(trace.attn.len(), 4);
        assert_eq!(trace.attn[0].len(), 2);
        assert_eq!(trace.attn[0][0].shape(), &[6, 6]);
        assert_eq!(trace.hidden[0].shape(), &[6, 8]);
        assert_eq!(trace.logits.shape(), &[6, 11]);
    }

    #[test]
    fn attention_rows_are_causal_and_stochastic() {
        let m = tiny();
        let trace = m.forward_with_trace(&[3, 1, 4, 1, 5]).unwrap();
        for heads in &trace.attn {
            for a in heads {
                // First row is the lone unmasked entry.
                assert_eq!(a.at(0, 0), 1.0);
                for i in 0..5 {
                    for j in (i + 1)..5 {
                        assert_eq!(a.at(i, j), 0.0, "upper triangle must be exactly zero");
                    }
                    let s: f64 = (0..5).map(|j| a.at(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        let a = m.forward_with_trace(&[1, 2, 3]).unwrap();
        let b = m.forward_with_trace(&[1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_logits_unchanged_by_appending() {
        let m = tiny();
        let short = m.forward_with_trace(&[2, 7, 5]).unwrap();
        let long = m.forward_with_trace(&[2, 7, 5, 9]).unwrap();
        for pos in 0..3 {
            for c in 0..11 {
                let diff = (short.logits.at(pos, c) - long.logits.at(pos, c)).abs();
                assert!(diff < 1e-9, "prefix logit drifted by {diff}");
            }
        }
    }

    #[test]
    fn token_out_of_range_is_an_error() {
        let m = tiny();
        let err = m.forward_with_trace(&[1, 99]).unwrap_err();
        assert_eq!(err.to_string(), "token id out of vocabulary");
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let m = tiny();
        let d = m.next_token_distribution(&[1, 2, 3]).unwrap();
        assert_eq!(d.len(), 11);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn uniform_logits_give_vocab_size_perplexity() {
        // Zero every parameter that feeds the logits: the unembedding is the
        // token embedding, so zeroing it makes all logits identical.
        let mut m = tiny();
        let n = m.params.token_embedding.numel();
        let rows = m.params.token_embedding.rows();
        let cols = m.params.token_embedding.cols();
        let _ = n;
        m.params.token_embedding = Tensor::matrix(rows, cols, vec![0.0; rows * cols]);
        let ppl = m.perplexity(&[vec![1, 2, 3, 4], vec![5, 6]]).unwrap();
        assert!((ppl - 11.0).abs() < 1e-9, "uniform perplexity {ppl}");
    }

    #[test]
    fn perplexity_rejects_degenerate_corpora() {
        let m = tiny();
        assert!(m.perplexity(&[]).is_err());
        assert!(m.perplexity(&[vec![1]]).is_err());
    }

    #[test]
    fn lens_at_last_layer_matches_output_logits() {
        let m = tiny();
        let trace = m.forward_with_trace(&[4, 2, 9]).unwrap();
        let last_hidden = trace.hidden.last().unwrap();
        let t = last_hidden.rows() - 1;
        let row: Vec<f64> = (0..8).map(|c| last_hidden.at(t, c)).collect();
        let lens = m.lens_logits(&row);
        for (c, lv) in lens.iter().enumerate() {
            assert!((lv - trace.logits.at(t, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn patching_an_identical_run_changes_nothing() {
        let m = tiny();
        let tokens = [1, 2, 3, 4];
        let clean = m.forward_with_trace(&tokens).unwrap();
        let donor = m.head_output(&tokens, 2, 1).unwrap();
        let row: Vec<f64> = (0..donor.cols()).map(|c| donor.at(2, c)).collect();
        let patched = m
            .forward_with_patch(
                &tokens,
                &PatchSpec { layer: 2, head: 1, position: 2, values: row },
            )
            .unwrap();
        assert_eq!(clean.logits, patched.logits);
    }
}
