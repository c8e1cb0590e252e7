//! A small decoder-only transformer over byte tokens.
//!
//! Pre-norm blocks with RMS normalization, learned absolute position
//! embeddings, bias-free projections, GELU feed-forward, and an untied LM
//! head. The attention sub-layer of block `i` is the one whose per-head
//! query projection and key statistics seed block `i`'s routers during
//! upcycling, so the forward pass exposes per-layer key activations and
//! FFN inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 16,
            head_dim: 8,
            n_layers: 2,
            ffn_hidden: 256,
            vocab_size: VOCAB_SIZE,
            seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.n_heads.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_heads must be a power of two, got {}",
                self.n_heads
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Every tensor of the dense architecture, with shape, in canonical
    /// (sorted-name-compatible) declaration order.
    pub fn dense_tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.seq_len, d]),
            ("final_norm.gain".to_string(), vec![d]),
            ("lm_head".to_string(), vec![self.vocab_size, d]),
        ];
        for i in 0..self.n_layers {
            specs.push((format!("layer.{i}.attn.norm.gain"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("layer.{i}.attn.{w}"), vec![d, d]));
            }
            specs.push((format!("layer.{i}.ffn.norm.gain"), vec![d]));
            specs.push((format!("layer.{i}.ffn.w1"), vec![self.ffn_hidden, d]));
            specs.push((format!("layer.{i}.ffn.w2"), vec![d, self.ffn_hidden]));
        }
        specs
    }
}

/// Fresh randomly initialized dense checkpoint (weights N(0, 0.02), norm
/// gains at one).
pub fn init_dense(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = SeedRng::derive(seed, "dense-init");
    let mut ckpt = Checkpoint::new_dense(cfg.clone());
    for (name, shape) in cfg.dense_tensor_specs() {
        let t = if name.ends_with("norm.gain") {
            Tensor::new(shape.clone(), vec![1.0; shape[0]])
        } else {
            Tensor::randn(shape, INIT_STD, &mut rng)
        };
        ckpt.insert(name, t)?;
    }
    Ok(ckpt)
}

/// Checkpoint tensors leased onto a tape for one forward/backward pass.
pub struct Leased {
    pub vars: BTreeMap<String, Var>,
}

impl Leased {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing leased tensor '{name}'"))
    }
}

/// Put every checkpoint tensor on the tape; `trainable(name)` decides
/// which ones participate in gradients.
pub fn lease(tape: &Tape, ckpt: &Checkpoint, trainable: impl Fn(&str) -> bool) -> Leased {
    let mut vars = BTreeMap::new();
    for (name, t) in ckpt.tensors() {
        let var = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        vars.insert(name.clone(), var);
    }
    Leased { vars }
}

pub fn lease_frozen(tape: &Tape, ckpt: &Checkpoint) -> Leased {
    lease(tape, ckpt, |_| false)
}

/// Per-layer activations the upcycler and diagnostics need: the residual
/// stream entering each FFN sub-layer, the normalized FFN input, and the
/// full attention key activations (heads live in column blocks).
pub struct ActivationTrace {
    pub pre_ffn: Vec<Var>,
    pub ffn_input: Vec<Var>,
    pub keys: Vec<Var>,
}

impl ActivationTrace {
    fn new() -> Self {
        ActivationTrace { pre_ffn: Vec::new(), ffn_input: Vec::new(), keys: Vec::new() }
    }
}

pub struct DenseForward {
    pub logits: Var,
    pub trace: ActivationTrace,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u16], seqs: usize) -> Result<usize> {
    if seqs == 0 || tokens.len() % seqs != 0 {
        return Err(Error::Invalid(format!(
            "token count {} not divisible into {seqs} sequences",
            tokens.len()
        )));
    }
    let seq_len = tokens.len() / seqs;
    if seq_len > cfg.seq_len {
        return Err(Error::SequenceTooLong { len: seq_len, max: cfg.seq_len });
    }
    for &t in tokens {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: t as usize, vocab: cfg.vocab_size });
        }
    }
    Ok(seq_len)
}

pub fn embed(tape: &Tape, lease: &Leased, tokens: &[u16], seqs: usize, seq_len: usize) -> Var {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos_ids: Vec<usize> = (0..seqs).flat_map(|_| 0..seq_len).collect();
    let tok = tape.gather_rows(lease.var("tok_emb"), &ids);
    let pos = tape.gather_rows(lease.var("pos_emb"), &pos_ids);
    tape.add(tok, pos)
}

/// Causal multi-head attention sub-layer with residual. Returns the new
/// residual stream and the raw key activations `[T, d_model]`.
pub fn attention_block(
    tape: &Tape,
    lease: &Leased,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    seqs: usize,
    seq_len: usize,
) -> (Var, Var) {
    let hd = cfg.head_dim;
    let xn = tape.rmsnorm(x, lease.var(&format!("layer.{layer}.attn.norm.gain")));
    let q = tape.matmul(xn, tape.transpose(lease.var(&format!("layer.{layer}.attn.wq"))));
    let k = tape.matmul(xn, tape.transpose(lease.var(&format!("layer.{layer}.attn.wk"))));
    let v = tape.matmul(xn, tape.transpose(lease.var(&format!("layer.{layer}.attn.wv"))));
    let scale = 1.0 / (hd as f64).sqrt();

    let mut seq_outs = Vec::with_capacity(seqs);
    for s in 0..seqs {
        let qs = tape.slice_rows(q, s * seq_len, seq_len);
        let ks = tape.slice_rows(k, s * seq_len, seq_len);
        let vs = tape.slice_rows(v, s * seq_len, seq_len);
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(qs, h * hd, hd);
            let kh = tape.slice_cols(ks, h * hd, hd);
            let vh = tape.slice_cols(vs, h * hd, hd);
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
            let probs = tape.causal_softmax(scores);
            head_outs.push(tape.matmul(probs, vh));
        }
        seq_outs.push(tape.concat_cols(&head_outs));
    }
    let merged = if seq_outs.len() == 1 { seq_outs[0] } else { tape.concat_rows(&seq_outs) };
    let out = tape.matmul(merged, tape.transpose(lease.var(&format!("layer.{layer}.attn.wo"))));
    (tape.add(x, out), k)
}

/// Dense GELU feed-forward sub-layer with residual. Returns the new
/// residual stream and the normalized FFN input.
pub fn dense_ffn_block(tape: &Tape, lease: &Leased, layer: usize, x: Var) -> (Var, Var) {
    let xn = tape.rmsnorm(x, lease.var(&format!("layer.{layer}.ffn.norm.gain")));
    let h = tape.gelu(tape.matmul(xn, tape.transpose(lease.var(&format!("layer.{layer}.ffn.w1")))));
    let y = tape.matmul(h, tape.transpose(lease.var(&format!("layer.{layer}.ffn.w2"))));
    (tape.add(x, y), xn)
}

pub fn lm_logits(tape: &Tape, lease: &Leased, x: Var) -> Var {
    let xf = tape.rmsnorm(x, lease.var("final_norm.gain"));
    tape.matmul(xf, tape.transpose(lease.var("lm_head")))
}

/// Full dense forward over `seqs` packed sequences of equal length.
pub fn dense_forward(
    tape: &Tape,
    lease: &Leased,
    cfg: &ModelConfig,
    tokens: &[u16],
    seqs: usize,
) -> Result<DenseForward> {
    let seq_len = check_tokens(cfg, tokens, seqs)?;
    let mut trace = ActivationTrace::new();
    let mut x = embed(tape, lease, tokens, seqs, seq_len);
    for layer in 0..cfg.n_layers {
        let (x_attn, keys) = attention_block(tape, lease, cfg, layer, x, seqs, seq_len);
        trace.pre_ffn.push(x_attn);
        trace.keys.push(keys);
        let (x_ffn, ffn_in) = dense_ffn_block(tape, lease, layer, x_attn);
        trace.ffn_input.push(ffn_in);
        x = x_ffn;
    }
    Ok(DenseForward { logits: lm_logits(tape, lease, x), trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            n_layers: 2,
            ffn_hidden: 24,
            vocab_size: VOCAB_SIZE,
            seq_len: 16,
        }
    }

    fn forward_logits(ckpt: &Checkpoint, tokens: &[u16]) -> Tensor {
        let tape = Tape::new();
        let lease = lease_frozen(&tape, ckpt);
        let fwd = dense_forward(&tape, &lease, ckpt.config(), tokens, 1).unwrap();
        tape.value(fwd.logits)
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = tiny_cfg();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        cfg.d_model = 24;
        assert!(cfg.validate().is_err(), "non-power-of-two head count must fail");
        cfg.n_heads = 2;
        cfg.d_model = 17;
        assert!(cfg.validate().is_err(), "d_model mismatch must fail");
    }

    #[test]
    fn single_token_logit_shape() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 1).unwrap();
        let logits = forward_logits(&ckpt, &[65]);
        assert_eq!(logits.shape(), &[1, cfg.vocab_size]);
    }

    #[test]
    fn causality_position_zero_ignores_the_future() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 2).unwrap();
        let a = forward_logits(&ckpt, &[10, 20, 30, 40]);
        let b = forward_logits(&ckpt, &[10, 40, 20, 30]);
        assert_eq!(a.row(0), b.row(0), "position 0 must be bit-identical under future permutation");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 3).unwrap();
        let a = forward_logits(&ckpt, &[1, 2, 3, 4, 5]);
        let b = forward_logits(&ckpt, &[1, 2, 3, 4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 4).unwrap();
        let tape = Tape::new();
        let lease = lease_frozen(&tape, &ckpt);
        let err = dense_forward(&tape, &lease, &cfg, &[999], 1);
        assert!(matches!(err, Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn overlong_sequence_rejected() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 4).unwrap();
        let tape = Tape::new();
        let lease = lease_frozen(&tape, &ckpt);
        let toks = vec![0u16; cfg.seq_len + 1];
        let err = dense_forward(&tape, &lease, &cfg, &toks, 1);
        assert!(matches!(err, Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = init_dense(&cfg, 7).unwrap();
        let b = init_dense(&cfg, 7).unwrap();
        let c = init_dense(&cfg, 8).unwrap();
        assert_eq!(a.tensor("tok_emb").unwrap(), b.tensor("tok_emb").unwrap());
        assert_ne!(a.tensor("tok_emb").unwrap(), c.tensor("tok_emb").unwrap());
    }

    #[test]
    fn trace_exposes_per_layer_keys_and_ffn_inputs() {
        let cfg = tiny_cfg();
        let ckpt = init_dense(&cfg, 5).unwrap();
        let tape = Tape::new();
        let lease = lease_frozen(&tape, &ckpt);
        let fwd = dense_forward(&tape, &lease, &cfg, &[7, 8, 9], 1).unwrap();
        assert_eq!(fwd.trace.keys.len(), cfg.n_layers);
        assert_eq!(fwd.trace.ffn_input.len(), cfg.n_layers);
        for &k in &fwd.trace.keys {
            assert_eq!(tape.shape_of(k), vec![3, cfg.d_model]);
        }
    }
}
