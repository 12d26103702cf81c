//! A small decoder-only transformer with full activation tracing.
//!
//! Every forward pass can capture the post-softmax attention matrix of
//! each head and the FFN activations of each layer; those traces feed
//! both the differentiable cost term and the allocation metrics.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};

use crate::autodiff::{Element, Tape, Tensor, VarId};
use crate::constraints::{self, ConstraintSpec};
use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub key_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: trainable in minutes on a CPU.
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 64,
            key_dim: 32,
            ffn_dim: 128,
            vocab_size: 64,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.num_heads * self.key_dim {
            return Err(Error::Config(format!(
                "model_dim ({}) must equal num_heads ({}) * key_dim ({})",
                self.model_dim, self.num_heads, self.key_dim
            )));
        }
        for (name, v) in [
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("key_dim", self.key_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// One transformer block's parameters. Attention projections are stored
/// per head, matching how the math is written.
#[derive(Debug, Clone)]
pub struct LayerParams<F: Element> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub wq: Vec<Tensor<F>>,
    pub wk: Vec<Tensor<F>>,
    pub wv: Vec<Tensor<F>>,
    pub wo: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Learned parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct TransformerModel<F: Element> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_gamma: Tensor<F>,
    pub lnf_beta: Tensor<F>,
    pub w_vocab: Tensor<F>,
    pub b_vocab: Tensor<F>,
}

impl<F: Element> TransformerModel<F> {
    /// Seeded initialization: scaled normal (std 0.02) for matrices,
    /// zeros for biases, ones/zeros for layer-norm gain/bias.
    /// Identical seed + config gives bitwise-identical parameters.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let dk = config.key_dim;
        let v = config.vocab_size;

        let mut proj = |rows: usize, cols: usize| -> Tensor<F> {
            Tensor::randn(vec![rows, cols], INIT_STD, &mut rng).with_grad()
        };

        let tok_embed = proj(v, d);
        let pos_embed = proj(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let ln1_gamma = Tensor::filled(vec![d], F::one())?.with_grad();
            let ln1_beta = Tensor::zeros(vec![d]).with_grad();
            let mut wq = Vec::with_capacity(config.num_heads);
            let mut wk = Vec::with_capacity(config.num_heads);
            let mut wv = Vec::with_capacity(config.num_heads);
            for _ in 0..config.num_heads {
                wq.push(proj(d, dk));
                wk.push(proj(d, dk));
                wv.push(proj(d, dk));
            }
            let wo = proj(d, d);
            let ln2_gamma = Tensor::filled(vec![d], F::one())?.with_grad();
            let ln2_beta = Tensor::zeros(vec![d]).with_grad();
            let w1 = proj(d, config.ffn_dim);
            let b1 = Tensor::zeros(vec![config.ffn_dim]).with_grad();
            let w2 = proj(config.ffn_dim, d);
            let b2 = Tensor::zeros(vec![d]).with_grad();
            layers.push(LayerParams {
                ln1_gamma,
                ln1_beta,
                wq,
                wk,
                wv,
                wo,
                ln2_gamma,
                ln2_beta,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_gamma = Tensor::filled(vec![d], F::one())?.with_grad();
        let lnf_beta = Tensor::zeros(vec![d]).with_grad();
        let w_vocab = proj(d, v);
        let b_vocab = Tensor::zeros(vec![v]).with_grad();

        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            layers,
            lnf_gamma,
            lnf_beta,
            w_vocab,
            b_vocab,
        })
    }

    /// Parameters in their canonical visit order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        out.push(("tok_embed".to_string(), &self.tok_embed));
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_gamma"), &layer.ln1_gamma));
            out.push((format!("layer{l}.ln1_beta"), &layer.ln1_beta));
            for h in 0..layer.wq.len() {
                out.push((format!("layer{l}.head{h}.wq"), &layer.wq[h]));
                out.push((format!("layer{l}.head{h}.wk"), &layer.wk[h]));
                out.push((format!("layer{l}.head{h}.wv"), &layer.wv[h]));
            }
            out.push((format!("layer{l}.wo"), &layer.wo));
            out.push((format!("layer{l}.ln2_gamma"), &layer.ln2_gamma));
            out.push((format!("layer{l}.ln2_beta"), &layer.ln2_beta));
            out.push((format!("layer{l}.w1"), &layer.w1));
            out.push((format!("layer{l}.b1"), &layer.b1));
            out.push((format!("layer{l}.w2"), &layer.w2));
            out.push((format!("layer{l}.b2"), &layer.b2));
        }
        out.push(("lnf_gamma".to_string(), &self.lnf_gamma));
        out.push(("lnf_beta".to_string(), &self.lnf_beta));
        out.push(("w_vocab".to_string(), &self.w_vocab));
        out.push(("b_vocab".to_string(), &self.b_vocab));
        out
    }

    /// Mutable parameter references in the same order as `named_params`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        out.push(&mut self.tok_embed);
        out.push(&mut self.pos_embed);
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gamma);
            out.push(&mut layer.ln1_beta);
            let heads = layer.wq.len();
            let qs = layer.wq.iter_mut();
            let ks = layer.wk.iter_mut();
            let vs = layer.wv.iter_mut();
            let mut interleaved: Vec<&mut Tensor<F>> = Vec::with_capacity(heads * 3);
            for ((q, k), v) in qs.zip(ks).zip(vs) {
                interleaved.push(q);
                interleaved.push(k);
                interleaved.push(v);
            }
            out.extend(interleaved);
            out.push(&mut layer.wo);
            out.push(&mut layer.ln2_gamma);
            out.push(&mut layer.ln2_beta);
            out.push(&mut layer.w1);
            out.push(&mut layer.b1);
            out.push(&mut layer.w2);
            out.push(&mut layer.b2);
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.w_vocab);
        out.push(&mut self.b_vocab);
        out
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over parameter bytes; cheap identity check for tests and logs.
    pub fn param_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for (_, t) in self.named_params() {
            for &v in t.data() {
                for byte in v.as_f64().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }

    /// All parameters set to zero (uniform-output model); used by tests.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config)?;
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = F::zero();
            }
        }
        Ok(model)
    }
}

/// Parameter leaf ids on a tape, mirroring the model structure.
pub struct BoundParams {
    pub tok_embed: VarId,
    pub pos_embed: VarId,
    pub layers: Vec<BoundLayer>,
    pub lnf_gamma: VarId,
    pub lnf_beta: VarId,
    pub w_vocab: VarId,
    pub b_vocab: VarId,
}

pub struct BoundLayer {
    pub ln1_gamma: VarId,
    pub ln1_beta: VarId,
    pub wq: Vec<VarId>,
    pub wk: Vec<VarId>,
    pub wv: Vec<VarId>,
    pub wo: VarId,
    pub ln2_gamma: VarId,
    pub ln2_beta: VarId,
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl BoundParams {
    /// Leaf ids in `named_params` order, for pairing grads with params.
    pub fn ordered_ids(&self) -> Vec<VarId> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for layer in &self.layers {
            out.push(layer.ln1_gamma);
            out.push(layer.ln1_beta);
            for h in 0..layer.wq.len() {
                out.push(layer.wq[h]);
                out.push(layer.wk[h]);
                out.push(layer.wv[h]);
            }
            out.push(layer.wo);
            out.push(layer.ln2_gamma);
            out.push(layer.ln2_beta);
            out.push(layer.w1);
            out.push(layer.b1);
            out.push(layer.w2);
            out.push(layer.b2);
        }
        out.push(self.lnf_gamma);
        out.push(self.lnf_beta);
        out.push(self.w_vocab);
        out.push(self.b_vocab);
        out
    }
}

/// One captured matrix: a value snapshot plus its id on the source tape.
#[derive(Debug, Clone)]
pub struct TraceMatrix<F: Element> {
    pub values: Tensor<F>,
    pub var: VarId,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<F: Element> {
    /// Post-softmax (and post-constraint) attention, one N×N matrix per head.
    pub attention: Vec<TraceMatrix<F>>,
    /// FFN pre-activation, N×d_ff.
    pub ffn_pre: TraceMatrix<F>,
    /// FFN post-ReLU activation, N×d_ff.
    pub ffn_post: TraceMatrix<F>,
}

/// Per-layer, per-head activations captured during one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace<F: Element> {
    pub seq_len: usize,
    pub layers: Vec<LayerTrace<F>>,
}

impl<F: Element> ActivationTrace<F> {
    pub fn attention_matrices(&self) -> impl Iterator<Item = &TraceMatrix<F>> {
        self.layers.iter().flat_map(|l| l.attention.iter())
    }

    pub fn num_attention_matrices(&self) -> usize {
        self.layers.iter().map(|l| l.attention.len()).sum()
    }
}

/// Result of a forward pass: logits var (rows = positions, cols = vocab)
/// and, when requested, the full activation trace.
pub struct ForwardOutput<F: Element> {
    pub logits: VarId,
    pub trace: Option<ActivationTrace<F>>,
}

/// Row-major causal mask: position i may attend to j <= i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            mask[i * n + j] = true;
        }
    }
    mask
}

impl<F: Element> TransformerModel<F> {
    /// Register every parameter as a tape leaf. Bind once per tape and
    /// reuse across the sequences of a batch so gradients accumulate.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        BoundParams {
            tok_embed: tape.leaf(&self.tok_embed),
            pos_embed: tape.leaf(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|layer| BoundLayer {
                    ln1_gamma: tape.leaf(&layer.ln1_gamma),
                    ln1_beta: tape.leaf(&layer.ln1_beta),
                    wq: layer.wq.iter().map(|t| tape.leaf(t)).collect(),
                    wk: layer.wk.iter().map(|t| tape.leaf(t)).collect(),
                    wv: layer.wv.iter().map(|t| tape.leaf(t)).collect(),
                    wo: tape.leaf(&layer.wo),
                    ln2_gamma: tape.leaf(&layer.ln2_gamma),
                    ln2_beta: tape.leaf(&layer.ln2_beta),
                    w1: tape.leaf(&layer.w1),
                    b1: tape.leaf(&layer.b1),
                    w2: tape.leaf(&layer.w2),
                    b2: tape.leaf(&layer.b2),
                })
                .collect(),
            lnf_gamma: tape.leaf(&self.lnf_gamma),
            lnf_beta: tape.leaf(&self.lnf_beta),
            w_vocab: tape.leaf(&self.w_vocab),
            b_vocab: tape.leaf(&self.b_vocab),
        }
    }

    /// Causal forward pass under an inference-time constraint.
    ///
    /// The causal mask is applied before any constraint; constraint masks
    /// restrict selection to causally allowed positions. Logits row t
    /// depends only on tokens at positions <= t.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &[usize],
        constraint: &ConstraintSpec,
        want_trace: bool,
    ) -> Result<ForwardOutput<F>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Config("forward requires at least one token".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: n,
                bound: self.config.max_seq_len + 1,
            });
        }
        constraint.validate()?;
        let scale = F::from_f64(1.0 / (self.config.key_dim as f64).sqrt());
        let causal = causal_mask(n);

        let tok = tape.embedding(bound.tok_embed, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(bound.pos_embed, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut trace_layers = Vec::new();
        for layer in &bound.layers {
            let normed = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;
            let mut head_outputs = Vec::with_capacity(layer.wq.len());
            let mut head_traces = Vec::with_capacity(layer.wq.len());
            for h in 0..layer.wq.len() {
                let q = tape.matmul(normed, layer.wq[h])?;
                let k = tape.matmul(normed, layer.wk[h])?;
                let v = tape.matmul(normed, layer.wv[h])?;
                let kt = tape.transpose2d(k)?;
                let raw = tape.matmul(q, kt)?;
                let scores = tape.scale(raw, scale);
                let attn = constraints::apply_constraint(tape, constraint, scores, &causal)?;
                if want_trace {
                    head_traces.push(TraceMatrix {
                        values: tape.value_tensor(attn),
                        var: attn,
                    });
                }
                head_outputs.push(tape.matmul(attn, v)?);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let projected = tape.matmul(merged, layer.wo)?;
            x = tape.add(x, projected)?;

            let normed2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;
            let pre_raw = tape.matmul(normed2, layer.w1)?;
            let pre = tape.add_row_broadcast(pre_raw, layer.b1)?;
            let post = tape.relu(pre);
            if want_trace {
                trace_layers.push(LayerTrace {
                    attention: std::mem::take(&mut head_traces),
                    ffn_pre: TraceMatrix {
                        values: tape.value_tensor(pre),
                        var: pre,
                    },
                    ffn_post: TraceMatrix {
                        values: tape.value_tensor(post),
                        var: post,
                    },
                });
            }
            let down_raw = tape.matmul(post, layer.w2)?;
            let down = tape.add_row_broadcast(down_raw, layer.b2)?;
            x = tape.add(x, down)?;
        }

        let final_norm = tape.layer_norm(x, bound.lnf_gamma, bound.lnf_beta, LAYER_NORM_EPS)?;
        let proj = tape.matmul(final_norm, bound.w_vocab)?;
        let logits = tape.add_row_broadcast(proj, bound.b_vocab)?;

        Ok(ForwardOutput {
            logits,
            trace: want_trace.then_some(ActivationTrace {
                seq_len: n,
                layers: trace_layers,
            }),
        })
    }

    /// Convenience: one-shot forward on a fresh tape, returning logits
    /// values and the trace.
    pub fn run(
        &self,
        tokens: &[usize],
        constraint: &ConstraintSpec,
    ) -> Result<(Tensor<F>, ActivationTrace<F>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, tokens, constraint, true)?;
        let logits = tape.value_tensor(out.logits);
        Ok((logits, out.trace.expect("trace requested")))
    }
}
