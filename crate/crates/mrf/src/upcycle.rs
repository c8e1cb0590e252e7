//! Dense-to-MoE conversion.
//!
//! A frozen dense checkpoint yields per-head statistics: the head's slice
//! of the attention query projection and the arithmetic mean of its key
//! activations over a collection pass. Heads are then greedily paired by
//! the cosine similarity of their mean-key vectors, `log2(h/m)` times,
//! concatenating both members' query slices (stacking rows) and mean keys
//! at each round; the surviving items become the `m` router projections
//! `W^j` and, pairing a (possibly duplicated) key pool identically, the
//! `n` expert key embeddings `K_i`. Values are moved, never transformed.
//!
//! The expert side is plain upcycling: every layer's FFN weights are
//! copied verbatim into each expert; all other dense parameters carry
//! over unchanged. Baseline router modes install randomly initialized
//! routers instead of an attention-derived bank.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{BatchIter, Corpus};
use crate::error::{Error, Result};
use crate::model::{dense_forward, lease_frozen, ModelConfig, INIT_STD};
use crate::moe::{MoEConfig, RouterKind};
use crate::rng::SeedRng;
use crate::tape::Tape;
use crate::tensor::{cosine_similarity, Tensor};

/// Per-head statistics extracted from a frozen dense model.
#[derive(Clone, Debug)]
pub struct HeadStat {
    /// This head's rows of the query projection, `[head_dim, d_model]`.
    pub wq: Tensor,
    /// Mean key activation of this head over the collection pass, `[head_dim]`.
    pub k_avg: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadStats {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Positions that entered each mean.
    pub token_count: u64,
    /// `[layer][head]`.
    pub layers: Vec<Vec<HeadStat>>,
}

#[derive(Serialize, Deserialize)]
struct StatsManifest {
    format_version: u32,
    kind: String,
    d_model: usize,
    n_heads: usize,
    head_dim: usize,
    n_layers: usize,
    token_count: u64,
}

impl HeadStats {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = StatsManifest {
            format_version: 1,
            kind: "head_stats".into(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            n_layers: self.layers.len(),
            token_count: self.token_count,
        };
        let mpath = dir.join("manifest.json");
        std::fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Invalid(format!("stats manifest: {e}")))?,
        )
        .map_err(|e| Error::io(&mpath, e))?;
        let mut blob = Vec::new();
        for layer in &self.layers {
            for h in layer {
                for v in h.wq.data().iter().chain(h.k_avg.data()) {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let bpath = dir.join("stats.bin");
        std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<HeadStats> {
        let mpath = dir.join("manifest.json");
        let manifest: StatsManifest = serde_json::from_str(
            &std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?,
        )
        .map_err(|e| Error::CheckpointCorrupt(format!("stats manifest parse: {e}")))?;
        if manifest.format_version != 1 || manifest.kind != "head_stats" {
            return Err(Error::CheckpointVersion { found: manifest.format_version, expected: 1 });
        }
        let bpath = dir.join("stats.bin");
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let per_head = manifest.head_dim * manifest.d_model + manifest.head_dim;
        let expected = manifest.n_layers * manifest.n_heads * per_head * 8;
        if blob.len() != expected {
            return Err(Error::CheckpointCorrupt(format!(
                "stats blob has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut layers = Vec::with_capacity(manifest.n_layers);
        for _ in 0..manifest.n_layers {
            let mut heads = Vec::with_capacity(manifest.n_heads);
            for _ in 0..manifest.n_heads {
                let wq: Vec<f64> =
                    (&mut vals).take(manifest.head_dim * manifest.d_model).collect();
                let k_avg: Vec<f64> = (&mut vals).take(manifest.head_dim).collect();
                heads.push(HeadStat {
                    wq: Tensor::new(vec![manifest.head_dim, manifest.d_model], wq),
                    k_avg: Tensor::new(vec![manifest.head_dim], k_avg),
                });
            }
            layers.push(heads);
        }
        Ok(HeadStats {
            d_model: manifest.d_model,
            n_heads: manifest.n_heads,
            head_dim: manifest.head_dim,
            token_count: manifest.token_count,
            layers,
        })
    }
}

/// Run `iters` forward batches through a frozen dense checkpoint and
/// average each head's key activations; query slices copy straight out of
/// the checkpoint. The mean is an ordered single-threaded reduction, so
/// results replay exactly.
pub fn collect_key_stats(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    iters: usize,
    batch: usize,
    seq: usize,
    seed: u64,
) -> Result<HeadStats> {
    if !ckpt.is_frozen() {
        return Err(Error::CheckpointNotFrozen);
    }
    if iters == 0 {
        return Err(Error::Config("collect_key_stats requires iters >= 1".into()));
    }
    let cfg = ckpt.config().clone();
    let mut iter = BatchIter::new(corpus, batch * seq, seq, seed)?;
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; cfg.d_model]; cfg.n_layers];
    let mut count: u64 = 0;
    for _ in 0..iters {
        let b = iter.next_batch();
        let tape = Tape::new();
        let lease = lease_frozen(&tape, ckpt);
        let fwd = dense_forward(&tape, &lease, &cfg, &b.inputs, b.seqs)?;
        for (layer, &kvar) in fwd.trace.keys.iter().enumerate() {
            tape.with_value(kvar, |k| {
                for t in 0..k.rows() {
                    let row = k.row(t);
                    for (acc, v) in sums[layer].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            });
        }
        count += b.inputs.len() as u64;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (layer, sum) in sums.iter().enumerate() {
        let wq = ckpt.tensor(&format!("layer.{layer}.attn.wq"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let rows = &wq.data()
                [h * cfg.head_dim * cfg.d_model..(h + 1) * cfg.head_dim * cfg.d_model];
            let k_avg: Vec<f64> = sum[h * cfg.head_dim..(h + 1) * cfg.head_dim]
                .iter()
                .map(|s| s / count as f64)
                .collect();
            heads.push(HeadStat {
                wq: Tensor::new(vec![cfg.head_dim, cfg.d_model], rows.to_vec()),
                k_avg: Tensor::new(vec![cfg.head_dim], k_avg),
            });
        }
        layers.push(heads);
    }
    Ok(HeadStats {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim,
        token_count: count,
        layers,
    })
}

/// Greedy maximum-cosine pairing: repeatedly take the unmatched pair with
/// the highest cosine similarity (ties to the lowest `(i, j)`), remove
/// both, until nothing remains. Output is in selection order.
pub fn greedy_pair(items: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    if items.len() % 2 != 0 {
        return Err(Error::OddItemCount(items.len()));
    }
    for (i, v) in items.iter().enumerate() {
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroVector(i));
        }
    }
    let n = items.len();
    let mut used = vec![false; n];
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            sims[i * n + j] = cosine_similarity(&items[i], &items[j]);
        }
    }
    let mut pairs = Vec::with_capacity(n / 2);
    for _ in 0..n / 2 {
        let mut best: Option<(usize, usize)> = None;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..n {
            if used[i] {
                continue;
            }
            for j in (i + 1)..n {
                if used[j] {
                    continue;
                }
                if sims[i * n + j] > best_sim {
                    best_sim = sims[i * n + j];
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("pair pool exhausted early");
        used[i] = true;
        used[j] = true;
        pairs.push((i, j));
    }
    Ok(pairs)
}

/// Router projections and expert keys for every layer.
#[derive(Clone, Debug)]
pub struct LayerBank {
    /// `m` matrices of `[router_dim, d_model]`.
    pub routers: Vec<Tensor>,
    /// `[expert][key]`, each `[router_dim]`.
    pub keys: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct RouterBank {
    pub d_model: usize,
    pub router_dim: usize,
    pub layers: Vec<LayerBank>,
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let c = a.cols();
    assert_eq!(b.cols(), c);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), c], data)
}

fn concat_vecs(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = a.to_vec();
    out.extend_from_slice(b);
    out
}

fn log2_exact(x: usize) -> usize {
    debug_assert!(x.is_power_of_two());
    x.trailing_zeros() as usize
}

/// Build the per-layer router bank from head statistics.
pub fn build_router_bank(stats: &HeadStats, cfg: &MoEConfig) -> Result<RouterBank> {
    if cfg.router != RouterKind::Mixture {
        return Err(Error::BankMismatch(format!(
            "router bank only applies to the mixture router, not {}",
            cfg.router.as_str()
        )));
    }
    let h = stats.n_heads;
    let hd = stats.head_dim;
    let m = cfg.n_routers;
    let n = cfg.n_experts;
    let expected_dim = if cfg.split_heads {
        hd / 2
    } else if m <= n {
        (h / m) * hd
    } else {
        hd
    };
    if expected_dim != cfg.router_dim {
        return Err(Error::BankMismatch(format!(
            "config router_dim {} inconsistent with head geometry (expected {expected_dim})",
            cfg.router_dim
        )));
    }

    let mut layers = Vec::with_capacity(stats.layers.len());
    for heads in &stats.layers {
        if heads.len() != h {
            return Err(Error::BankMismatch(format!(
                "layer has {} heads, stats claim {h}",
                heads.len()
            )));
        }
        let bank = if cfg.split_heads {
            build_split(heads, cfg)
        } else if m <= n {
            build_concat(heads, cfg, stats.d_model)?
        } else {
            build_multi_key(heads, cfg)
        };
        layers.push(bank);
    }
    Ok(RouterBank { d_model: stats.d_model, router_dim: cfg.router_dim, layers })
}

/// `m <= n`: pair heads by mean-key cosine `log2(h/m)` times carrying the
/// query slices along; keys come from the same pairing procedure applied
/// to the key pool duplicated `n/m` times.
fn build_concat(heads: &[HeadStat], cfg: &MoEConfig, d_model: usize) -> Result<LayerBank> {
    let h = heads.len();
    let rounds = log2_exact(h / cfg.n_routers);

    let mut items: Vec<(Tensor, Vec<f64>)> =
        heads.iter().map(|s| (s.wq.clone(), s.k_avg.data().to_vec())).collect();
    for _ in 0..rounds {
        let kavgs: Vec<Vec<f64>> = items.iter().map(|(_, k)| k.clone()).collect();
        let pairs = greedy_pair(&kavgs)?;
        items = pairs
            .iter()
            .map(|&(i, j)| {
                (stack_rows(&items[i].0, &items[j].0), concat_vecs(&items[i].1, &items[j].1))
            })
            .collect();
    }
    let routers: Vec<Tensor> = items.iter().map(|(wq, _)| wq.clone()).collect();
    for r in &routers {
        debug_assert_eq!(r.shape(), &[cfg.router_dim, d_model]);
    }

    // key pool: every head's mean key, repeated n/m times
    let dup = cfg.n_experts / cfg.n_routers;
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(h * dup);
    for _ in 0..dup {
        pool.extend(heads.iter().map(|s| s.k_avg.data().to_vec()));
    }
    for _ in 0..rounds {
        let pairs = greedy_pair(&pool)?;
        pool = pairs.iter().map(|&(i, j)| concat_vecs(&pool[i], &pool[j])).collect();
    }
    debug_assert_eq!(pool.len(), cfg.n_experts);
    let keys = pool.into_iter().map(|k| vec![Tensor::new(vec![cfg.router_dim], k)]).collect();
    Ok(LayerBank { routers, keys })
}

/// `m == h > n`: routers and keys are the verbatim per-head statistics;
/// expert `e` owns the contiguous key block `[e*kpe, (e+1)*kpe)`.
fn build_multi_key(heads: &[HeadStat], cfg: &MoEConfig) -> LayerBank {
    let routers: Vec<Tensor> = heads.iter().map(|s| s.wq.clone()).collect();
    let keys = (0..cfg.n_experts)
        .map(|e| {
            (0..cfg.keys_per_expert)
                .map(|c| heads[e * cfg.keys_per_expert + c].k_avg.clone())
                .collect()
        })
        .collect();
    LayerBank { routers, keys }
}

/// `m == 2h`: halve every head into two routers/keys of dim `head_dim/2`.
fn build_split(heads: &[HeadStat], cfg: &MoEConfig) -> LayerBank {
    let hd = heads[0].k_avg.numel();
    let half = hd / 2;
    let d_model = heads[0].wq.cols();
    let mut routers = Vec::with_capacity(heads.len() * 2);
    let mut flat_keys = Vec::with_capacity(heads.len() * 2);
    for s in heads {
        for part in 0..2 {
            let rows =
                &s.wq.data()[part * half * d_model..(part + 1) * half * d_model];
            routers.push(Tensor::new(vec![half, d_model], rows.to_vec()));
            flat_keys.push(Tensor::new(
                vec![half],
                s.k_avg.data()[part * half..(part + 1) * half].to_vec(),
            ));
        }
    }
    let keys = (0..cfg.n_experts)
        .map(|e| {
            (0..cfg.keys_per_expert)
                .map(|c| flat_keys[e * cfg.keys_per_expert + c].clone())
                .collect()
        })
        .collect();
    LayerBank { routers, keys }
}

/// Convert a dense checkpoint into an MoE checkpoint: FFN weights copied
/// into `n` bitwise-identical experts, everything else carried over, and
/// the configured router installed (attention-derived bank for `mixture`,
/// `N(0, 0.02)` init for the baselines).
pub fn upcycle(
    ckpt: &Checkpoint,
    bank: Option<&RouterBank>,
    cfg: &MoEConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let model = ckpt.config().clone();
    let mut out = Checkpoint::new_moe(model.clone(), cfg.clone());

    for (name, t) in ckpt.tensors() {
        if name.contains(".ffn.w1") || name.contains(".ffn.w2") {
            continue;
        }
        out.insert(name.clone(), t.clone())?;
    }
    for layer in 0..model.n_layers {
        let w1 = ckpt.tensor(&format!("layer.{layer}.ffn.w1"))?;
        let w2 = ckpt.tensor(&format!("layer.{layer}.ffn.w2"))?;
        for e in 0..cfg.n_experts {
            out.insert(format!("layer.{layer}.expert.{e}.w1"), w1.clone())?;
            out.insert(format!("layer.{layer}.expert.{e}.w2"), w2.clone())?;
        }
    }

    match cfg.router {
        RouterKind::Mixture => {
            let bank = bank.ok_or_else(|| {
                Error::BankMismatch("mixture router needs an attention-derived bank".into())
            })?;
            if bank.layers.len() != model.n_layers {
                return Err(Error::BankMismatch(format!(
                    "bank has {} layers, checkpoint has {}",
                    bank.layers.len(),
                    model.n_layers
                )));
            }
            if bank.d_model != model.d_model || bank.router_dim != cfg.router_dim {
                return Err(Error::BankMismatch(format!(
                    "bank dims ({}, {}) do not match model/config ({}, {})",
                    bank.d_model, bank.router_dim, model.d_model, cfg.router_dim
                )));
            }
            for (layer, lb) in bank.layers.iter().enumerate() {
                if lb.routers.len() != cfg.n_routers || lb.keys.len() != cfg.n_experts {
                    return Err(Error::BankMismatch(format!(
                        "layer {layer} bank has {} routers / {} experts, config wants {} / {}",
                        lb.routers.len(),
                        lb.keys.len(),
                        cfg.n_routers,
                        cfg.n_experts
                    )));
                }
                for (j, w) in lb.routers.iter().enumerate() {
                    out.insert(format!("layer.{layer}.router.{j}.w"), w.clone())?;
                }
                for (e, keys) in lb.keys.iter().enumerate() {
                    for (c, k) in keys.iter().enumerate() {
                        out.insert(format!("layer.{layer}.expert.{e}.key.{c}"), k.clone())?;
                    }
                }
            }
        }
        RouterKind::Vanilla | RouterKind::Switch => {
            let mut rng = SeedRng::derive(seed, "router-init");
            for layer in 0..model.n_layers {
                out.insert(
                    format!("layer.{layer}.router.0.w"),
                    Tensor::randn(vec![cfg.n_experts, model.d_model], INIT_STD, &mut rng),
                )?;
            }
        }
        RouterKind::Mlp => {
            let mut rng = SeedRng::derive(seed, "router-init");
            for layer in 0..model.n_layers {
                out.insert(
                    format!("layer.{layer}.router.0.w"),
                    Tensor::randn(vec![model.d_model, model.d_model], INIT_STD, &mut rng),
                )?;
                out.insert(
                    format!("layer.{layer}.router.1.w"),
                    Tensor::randn(vec![cfg.n_experts, model.d_model], INIT_STD, &mut rng),
                )?;
            }
        }
    }
    Ok(out)
}

/// Convenience pipeline: freeze a copy of the dense checkpoint, collect
/// key statistics on a small pass, build the bank, and upcycle with the
/// mixture router. Collection geometry is the desk default (10 iterations
/// of 8 sequences).
pub fn upcycle_mixture_from(
    dense: &Checkpoint,
    corpus: &Corpus,
    cfg: &MoEConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let mut frozen = dense.clone();
    frozen.freeze();
    let seq = dense.config().seq_len.min(128);
    let stats = collect_key_stats(&frozen, corpus, 10, 8, seq, seed)?;
    let bank = build_router_bank(&stats, cfg)?;
    upcycle(dense, Some(&bank), cfg, seed)
}
