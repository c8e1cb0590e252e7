//! Mixture-of-Experts layer: router scoring, top-k dispatch, weighted
//! expert combination, and the router stability losses.
//!
//! The mixture router projects each token into `m` low-dimensional
//! queries `Q^j = W^j x` and scores it against per-expert key embeddings:
//! `S_i^j = (Q^j . K_i) / sqrt(d')`, with no normalization of queries or
//! keys. Router scores combine by summation (default) or max pooling;
//! when an expert owns several keys its score is the max over them.
//! Gates are a softmax over all `n` expert scores, then the top-k experts
//! are selected and combined as `y = sum_s R_s E_s(x)` without
//! renormalizing over the selected set.
//!
//! Baseline routers: a plain linear router (`vanilla`), the same with
//! top-1 selection (`switch`, no capacity limit or token dropping), and a
//! two-layer GELU MLP router (`mlp`).

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{attention_block, check_tokens, embed, lm_logits, Leased, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Mixture {
    Summation,
    MaxPooling,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Mixture,
    Vanilla,
    Switch,
    Mlp,
}

impl RouterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RouterKind::Mixture => "mixture",
            RouterKind::Vanilla => "vanilla",
            RouterKind::Switch => "switch",
            RouterKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(RouterKind::Mixture),
            "vanilla" => Ok(RouterKind::Vanilla),
            "switch" => Ok(RouterKind::Switch),
            "mlp" => Ok(RouterKind::Mlp),
            other => Err(Error::Config(format!("unknown router mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub n_routers: usize,
    pub router_dim: usize,
    pub keys_per_expert: usize,
    pub mixture: Mixture,
    pub router: RouterKind,
    pub aux_coeff: f64,
    pub z_coeff: f64,
    pub split_heads: bool,
}

impl MoEConfig {
    /// Derive the full config from the head geometry of `model` and the
    /// requested expert/router counts, applying the concatenation,
    /// duplication, and head-splitting rules.
    #[allow(clippy::too_many_arguments)]
    pub fn derive(
        model: &ModelConfig,
        n_experts: usize,
        top_k: usize,
        n_routers: usize,
        mixture: Mixture,
        router: RouterKind,
        split_heads: bool,
        aux_coeff: f64,
        z_coeff: f64,
    ) -> Result<Self> {
        if n_experts == 0 || !n_experts.is_power_of_two() {
            return Err(Error::Config(format!("n_experts must be a power of two, got {n_experts}")));
        }
        if top_k == 0 || top_k > n_experts {
            return Err(Error::Config(format!("top_k {top_k} must be in 1..={n_experts}")));
        }
        let (n_routers, router_dim, keys_per_expert, split_heads) = match router {
            RouterKind::Mixture => {
                let h = model.n_heads;
                let hd = model.head_dim;
                let m = n_routers;
                if m == 0 || !m.is_power_of_two() {
                    return Err(Error::Config(format!("n_routers must be a power of two, got {m}")));
                }
                if split_heads {
                    if m != 2 * h {
                        return Err(Error::Config(format!(
                            "split_heads requires n_routers == 2*n_heads ({}), got {m}",
                            2 * h
                        )));
                    }
                    if hd % 2 != 0 {
                        return Err(Error::Config("split_heads requires an even head_dim".into()));
                    }
                    if m < n_experts {
                        return Err(Error::Config(format!(
                            "split_heads with fewer routers ({m}) than experts ({n_experts}) is unsupported"
                        )));
                    }
                    (m, hd / 2, m / n_experts, true)
                } else if m <= n_experts {
                    if h % m != 0 {
                        return Err(Error::Config(format!(
                            "n_heads {h} must be divisible by n_routers {m}"
                        )));
                    }
                    if n_experts % m != 0 {
                        return Err(Error::Config(format!(
                            "n_experts {n_experts} must be divisible by n_routers {m}"
                        )));
                    }
                    (m, (h / m) * hd, 1, false)
                } else {
                    if m != h {
                        return Err(Error::Config(format!(
                            "n_routers {m} > n_experts {n_experts} requires n_routers == n_heads {h}"
                        )));
                    }
                    (m, hd, m / n_experts, false)
                }
            }
            _ => (0, 0, 0, false),
        };
        Ok(MoEConfig {
            n_experts,
            top_k,
            n_routers,
            router_dim,
            keys_per_expert,
            mixture,
            router,
            aux_coeff,
            z_coeff,
            split_heads,
        })
    }

    pub fn effective_top_k(&self) -> usize {
        match self.router {
            RouterKind::Switch => 1,
            _ => self.top_k.min(self.n_experts),
        }
    }

    pub fn n_keys(&self) -> usize {
        self.n_experts * self.keys_per_expert
    }
}

/// Per-token, per-batch routing state of one MoE layer on one batch.
pub struct MoeLayerOut {
    /// Combined layer output `[T, d_model]`.
    pub y: Var,
    /// Pre-softmax per-expert scores `[T, n]`.
    pub scores: Var,
    /// Softmax gates over all experts `[T, n]`.
    pub gates: Var,
    /// Mixture router only: raw per-router key scores, `m` of `[T, n_keys]`.
    pub per_router: Vec<Var>,
    /// Selected expert indices per token, descending gate, ties to lower index.
    pub selected: Vec<Vec<usize>>,
    /// Dispatches received per expert.
    pub counts: Vec<usize>,
    /// Load-balancing loss (coefficient already applied).
    pub aux: Var,
    /// Router z-loss (coefficient already applied).
    pub z: Var,
}

/// Mixture-of-routers attention scoring for one layer.
///
/// Returns the per-expert scores `[T, n]` and the raw per-router scores.
pub fn mixture_scores(
    tape: &Tape,
    lease: &Leased,
    cfg: &MoEConfig,
    layer: usize,
    xn: Var,
) -> (Var, Vec<Var>) {
    let scale = 1.0 / (cfg.router_dim as f64).sqrt();
    let key_vars: Vec<Var> = (0..cfg.n_experts)
        .flat_map(|e| {
            (0..cfg.keys_per_expert)
                .map(move |c| lease.var(&format!("layer.{layer}.expert.{e}.key.{c}")))
        })
        .collect();
    let keys_mat = tape.concat_rows(&key_vars); // [n_keys, d']
    let keys_t = tape.transpose(keys_mat);

    let per_router: Vec<Var> = (0..cfg.n_routers)
        .map(|j| {
            let w = lease.var(&format!("layer.{layer}.router.{j}.w"));
            let q = tape.matmul(xn, tape.transpose(w)); // [T, d']
            tape.scale(tape.matmul(q, keys_t), scale) // [T, n_keys]
        })
        .collect();

    let combined = match cfg.mixture {
        Mixture::Summation => {
            let mut acc = per_router[0];
            for r in &per_router[1..] {
                acc = tape.add(acc, *r);
            }
            acc
        }
        Mixture::MaxPooling => tape.max_stack(&per_router),
    };
    let scores = if cfg.keys_per_expert > 1 {
        tape.max_pool_cols(combined, cfg.keys_per_expert)
    } else {
        combined
    };
    (scores, per_router)
}

/// Baseline router logits for one layer.
pub fn baseline_scores(
    tape: &Tape,
    lease: &Leased,
    cfg: &MoEConfig,
    layer: usize,
    xn: Var,
) -> Var {
    match cfg.router {
        RouterKind::Vanilla | RouterKind::Switch => {
            let w = lease.var(&format!("layer.{layer}.router.0.w"));
            tape.matmul(xn, tape.transpose(w))
        }
        RouterKind::Mlp => {
            let w0 = lease.var(&format!("layer.{layer}.router.0.w"));
            let w1 = lease.var(&format!("layer.{layer}.router.1.w"));
            let h = tape.gelu(tape.matmul(xn, tape.transpose(w0)));
            tape.matmul(h, tape.transpose(w1))
        }
        RouterKind::Mixture => panic!("baseline_scores called with mixture router"),
    }
}

/// Top-k expert indices by descending gate; ties resolve to the lower index.
pub fn select_top_k(gates: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gates.len()).collect();
    idx.sort_by(|&a, &b| gates[b].partial_cmp(&gates[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Load-balancing loss: `alpha * n * sum_i fhat_i * P_i` where `fhat_i`
/// is expert `i`'s share of all dispatches in the batch and `P_i` the
/// batch-mean gate. Gradients flow through the gates only.
pub fn aux_loss(tape: &Tape, gates: Var, counts: &[usize], dispatches: usize, alpha: f64) -> Var {
    assert!(dispatches > 0, "aux_loss on an empty batch");
    let n = counts.len() as f64;
    let mean_gate = tape.mean_rows(gates);
    let w: Vec<f64> =
        counts.iter().map(|&c| alpha * n * (c as f64 / dispatches as f64)).collect();
    tape.wsum_const(mean_gate, &w)
}

/// Router z-loss: `beta * mean_t (log sum_i exp(S_ti))^2`.
pub fn z_loss(tape: &Tape, scores: Var, beta: f64) -> Var {
    let lse = tape.logsumexp_rows(scores);
    tape.scale(tape.mean_all(tape.mul(lse, lse)), beta)
}

/// One MoE sub-layer on a batch of normalized FFN inputs `xn [T, d]`.
pub fn moe_sublayer(
    tape: &Tape,
    lease: &Leased,
    model_cfg: &ModelConfig,
    cfg: &MoEConfig,
    layer: usize,
    xn: Var,
) -> MoeLayerOut {
    let (scores, per_router) = match cfg.router {
        RouterKind::Mixture => mixture_scores(tape, lease, cfg, layer, xn),
        _ => (baseline_scores(tape, lease, cfg, layer, xn), Vec::new()),
    };
    let gates = tape.softmax_rows(scores);

    let k_eff = cfg.effective_top_k();
    let n = cfg.n_experts;
    let t_tokens = tape.shape_of(xn)[0];
    let mut selected = Vec::with_capacity(t_tokens);
    let mut counts = vec![0usize; n];
    let mut expert_tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
    tape.with_value(gates, |g| {
        for t in 0..t_tokens {
            let sel = select_top_k(g.row(t), k_eff);
            for &e in &sel {
                counts[e] += 1;
                expert_tokens[e].push(t);
            }
            selected.push(sel);
        }
    });

    let mut y = tape.constant(Tensor::zeros(vec![t_tokens, model_cfg.d_model]));
    for (e, ids) in expert_tokens.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let w1 = lease.var(&format!("layer.{layer}.expert.{e}.w1"));
        let w2 = lease.var(&format!("layer.{layer}.expert.{e}.w2"));
        let xe = tape.gather_rows(xn, ids);
        let he = tape.gelu(tape.matmul(xe, tape.transpose(w1)));
        let oe = tape.matmul(he, tape.transpose(w2));
        let pos: Vec<(usize, usize)> = ids.iter().map(|&t| (t, e)).collect();
        let ge = tape.gather_elems(gates, &pos);
        let weighted = tape.scale_rows(oe, ge);
        y = tape.scatter_add_rows(y, weighted, ids);
    }

    let aux = aux_loss(tape, gates, &counts, t_tokens * k_eff, cfg.aux_coeff);
    let z = z_loss(tape, scores, cfg.z_coeff);
    MoeLayerOut { y, scores, gates, per_router, selected, counts, aux, z }
}

pub struct MoeForward {
    pub logits: Var,
    pub layers: Vec<MoeLayerOut>,
    /// Residual stream entering each FFN sub-layer.
    pub pre_ffn: Vec<Var>,
    /// Normalized expert input per layer.
    pub ffn_input: Vec<Var>,
}

/// Full MoE model forward over `seqs` packed sequences.
pub fn moe_forward(
    tape: &Tape,
    lease: &Leased,
    model_cfg: &ModelConfig,
    cfg: &MoEConfig,
    tokens: &[u16],
    seqs: usize,
) -> Result<MoeForward> {
    let seq_len = check_tokens(model_cfg, tokens, seqs)?;
    let mut layers = Vec::with_capacity(model_cfg.n_layers);
    let mut pre_ffn = Vec::new();
    let mut ffn_input = Vec::new();
    let mut x = embed(tape, lease, tokens, seqs, seq_len);
    for layer in 0..model_cfg.n_layers {
        let (x_attn, _keys) = attention_block(tape, lease, model_cfg, layer, x, seqs, seq_len);
        pre_ffn.push(x_attn);
        let xn = tape.rmsnorm(x_attn, lease.var(&format!("layer.{layer}.ffn.norm.gain")));
        ffn_input.push(xn);
        let out = moe_sublayer(tape, lease, model_cfg, cfg, layer, xn);
        x = tape.add(x_attn, out.y);
        layers.push(out);
    }
    Ok(MoeForward { logits: lm_logits(tape, lease, x), layers, pre_ffn, ffn_input })
}

/// Forward a checkpoint on a batch, dispatching on dense vs MoE, and
/// return the logits var (plus layer routing when MoE).
pub fn forward_any(
    tape: &Tape,
    lease: &Leased,
    ckpt: &Checkpoint,
    tokens: &[u16],
    seqs: usize,
) -> Result<(Var, Option<MoeForward>)> {
    match ckpt.moe_config() {
        Some(cfg) => {
            let fwd = moe_forward(tape, lease, ckpt.config(), cfg, tokens, seqs)?;
            Ok((fwd.logits, Some(fwd)))
        }
        None => {
            let fwd = crate::model::dense_forward(tape, lease, ckpt.config(), tokens, seqs)?;
            Ok((fwd.logits, None))
        }
    }
}

/// Materialized routing state of one layer over one batch.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    /// Raw per-router scores, `m` tensors of `[T, n_keys]` (mixture only).
    pub per_router: Vec<Tensor>,
    /// Combined pre-softmax expert scores `[T, n]`.
    pub summed: Tensor,
    /// Gates `[T, n]`.
    pub gates: Tensor,
    pub selected: Vec<Vec<usize>>,
    /// Per-expert share of tokens; sums to `k` (every token picks `k` experts).
    pub dispatch_fraction: Vec<f64>,
    /// Batch-mean gate per expert.
    pub mean_gate: Vec<f64>,
}

pub fn routing_trace(tape: &Tape, out: &MoeLayerOut) -> RoutingTrace {
    let gates = tape.value(out.gates);
    let t_tokens = gates.rows() as f64;
    let n = gates.cols();
    let dispatch_fraction: Vec<f64> =
        out.counts.iter().map(|&c| c as f64 / t_tokens).collect();
    let mut mean_gate = vec![0.0; n];
    for t in 0..gates.rows() {
        for e in 0..n {
            mean_gate[e] += gates.row(t)[e];
        }
    }
    for m in mean_gate.iter_mut() {
        *m /= t_tokens;
    }
    RoutingTrace {
        per_router: out.per_router.iter().map(|&v| tape.value(v)).collect(),
        summed: tape.value(out.scores),
        gates,
        selected: out.selected.clone(),
        dispatch_fraction,
        mean_gate,
    }
}

/// One exported routing record per token (JSON-lines schema).
#[derive(Serialize, Deserialize, Debug)]
pub struct TraceRecord {
    pub layer: usize,
    pub domain: String,
    pub gates: Vec<f64>,
    pub selected: Vec<usize>,
}
