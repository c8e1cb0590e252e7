//! Optimization loop shared by dense and MoE training.
//!
//! Adam with decoupled weight decay, global-norm gradient clipping, and a
//! warmup-and-step-decay learning rate: linear 0 -> max over the first 1%
//! of steps, constant until 80%, multiplied by the decay factor at 80%
//! and again at 90%. The MoE objective is LM cross-entropy plus the
//! per-layer load-balancing and z losses (coefficients already applied
//! inside each term). Metrics are logged one JSON record per step and
//! replay bit-exactly under a fixed seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{val_batches, BatchIter, Corpus};
use crate::error::{Error, Result};
use crate::model::{init_dense, lease, lease_frozen, ModelConfig};
use crate::moe::forward_any;
use crate::tape::Tape;

/// Seed for validation-batch sampling, fixed so every run variant scores
/// the same held-out material.
const VAL_SEED: u64 = 0x56414c;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub decay_points: [f64; 2],
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub freeze_keys: bool,
    pub val_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 5e-4,
            warmup_frac: 0.01,
            decay_points: [0.8, 0.9],
            decay_factor: 0.316,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            weight_decay: 0.1,
            total_steps: 2000,
            batch_tokens: 8192,
            seq_len: 256,
            seed: 42,
            freeze_keys: false,
            val_batches: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [d1, d2] = self.decay_points;
        if !(self.warmup_frac > 0.0 && self.warmup_frac < d1) {
            return Err(Error::Config(format!(
                "warmup_frac {} must lie in (0, {d1})",
                self.warmup_frac
            )));
        }
        if !(0.0 < d1 && d1 < d2 && d2 < 1.0) {
            return Err(Error::Config(format!(
                "decay points {d1}, {d2} must be strictly increasing within (0, 1)"
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based; `step == total_steps` is the final
/// post-training value). Panics outside `0..=total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    assert!(step <= cfg.total_steps, "step {step} out of range 0..={}", cfg.total_steps);
    let total = cfg.total_steps as f64;
    let warmup_steps = (cfg.warmup_frac * total).round().max(1.0);
    if (step as f64) < warmup_steps {
        return cfg.max_lr * step as f64 / warmup_steps;
    }
    let d1 = (cfg.decay_points[0] * total).round() as u64;
    let d2 = (cfg.decay_points[1] * total).round() as u64;
    if step >= d2 {
        cfg.max_lr * cfg.decay_factor * cfg.decay_factor
    } else if step >= d1 {
        cfg.max_lr * cfg.decay_factor
    } else {
        cfg.max_lr
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub z_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub router: String,
}

/// Parameters excluded from weight decay: norms, embeddings, expert keys.
fn decays(name: &str) -> bool {
    !(name.ends_with("norm.gain")
        || name == "tok_emb"
        || name == "pos_emb"
        || name.contains(".key."))
}

/// Adam with decoupled weight decay; state keyed by parameter name.
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// One update over `grads` (name -> gradient, already clipped).
    pub fn step(
        &mut self,
        ckpt: &mut Checkpoint,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            let p = ckpt.tensor_mut(name)?;
            for ((pi, gi), (mi, vi)) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * gi;
                *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + wd * *pi);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Global-norm clip in sorted-name order; returns the post-clip norm.
fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        clip
    } else {
        norm
    }
}

fn trainable_predicate(cfg: &TrainConfig) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| !(cfg.freeze_keys && name.contains(".key."))
}

/// Core loop shared by dense and MoE training. Mutates `ckpt` in place
/// and returns the per-step metrics.
pub fn run_training(
    ckpt: &mut Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if ckpt.is_frozen() {
        return Err(Error::CheckpointFrozen);
    }
    let mut iter =
        BatchIter::new(corpus, cfg.batch_tokens, cfg.seq_len, cfg.seed ^ 0xba7c4)?;
    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(cfg.total_steps as usize);
    let is_trainable = trainable_predicate(cfg);

    for step in 0..cfg.total_steps {
        let batch = iter.next_batch();
        let tape = Tape::new();
        let leased = lease(&tape, ckpt, &is_trainable);
        let (logits, moe_fwd) = forward_any(&tape, &leased, ckpt, &batch.inputs, batch.seqs)?;
        let target_ids: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
        let lm = tape.cross_entropy(logits, &target_ids);

        let (total, aux_val, z_val) = match &moe_fwd {
            Some(fwd) => {
                let mut aux = fwd.layers[0].aux;
                let mut z = fwd.layers[0].z;
                for l in &fwd.layers[1..] {
                    aux = tape.add(aux, l.aux);
                    z = tape.add(z, l.z);
                }
                let total = tape.add(tape.add(lm, aux), z);
                (total, tape.scalar_value(aux), tape.scalar_value(z))
            }
            None => (lm, 0.0, 0.0),
        };

        let lm_val = tape.scalar_value(lm);
        let total_val = tape.scalar_value(total);
        if !total_val.is_finite() {
            return Err(Error::NanLoss { step, lm: lm_val, aux: aux_val, z: z_val });
        }

        let grads = tape.backward(total);
        let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, &var) in &leased.vars {
            if !tape.requires_grad(var) {
                continue;
            }
            let g = match grads.get(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; ckpt.tensor(name)?.numel()],
            };
            named.insert(name.clone(), g);
        }
        let grad_norm = clip_global_norm(&mut named, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        adam.step(ckpt, &named, lr, cfg)?;

        records.push(StepRecord {
            step,
            lr,
            lm_loss: lm_val,
            aux_loss: aux_val,
            z_loss: z_val,
            grad_norm,
        });
    }
    Ok(records)
}

/// Mean cross-entropy over the fixed validation batches.
pub fn eval_val_loss(ckpt: &Checkpoint, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let batches =
        val_batches(corpus, cfg.batch_tokens, cfg.seq_len, cfg.val_batches.max(1), VAL_SEED)?;
    let mut total = 0.0;
    for b in &batches {
        let tape = Tape::new();
        let leased = lease_frozen(&tape, ckpt);
        let (logits, _) = forward_any(&tape, &leased, ckpt, &b.inputs, b.seqs)?;
        let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
        let lm = tape.cross_entropy(logits, &targets);
        total += tape.scalar_value(lm);
    }
    Ok(total / batches.len() as f64)
}

/// Pretrain a fresh dense model.
pub fn train_dense(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<StepRecord>, RunSummary)> {
    let mut ckpt = init_dense(model_cfg, cfg.seed)?;
    let records = run_training(&mut ckpt, corpus, cfg)?;
    let summary = RunSummary {
        steps: cfg.total_steps,
        final_train_loss: records.last().map(|r| r.lm_loss).unwrap_or(f64::NAN),
        final_val_loss: eval_val_loss(&ckpt, corpus, cfg)?,
        router: "dense".into(),
    };
    Ok((ckpt, records, summary))
}

/// Continue training an upcycled MoE checkpoint.
pub fn train_moe(
    mut ckpt: Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<StepRecord>, RunSummary)> {
    let router = ckpt
        .moe_config()
        .ok_or_else(|| Error::Invalid("train-moe requires an MoE checkpoint".into()))?
        .router
        .as_str()
        .to_string();
    let records = run_training(&mut ckpt, corpus, cfg)?;
    let summary = RunSummary {
        steps: cfg.total_steps,
        final_train_loss: records.last().map(|r| r.lm_loss).unwrap_or(f64::NAN),
        final_val_loss: eval_val_loss(&ckpt, corpus, cfg)?,
        router,
    };
    Ok((ckpt, records, summary))
}

pub fn write_metrics_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Invalid(format!("metrics serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::BadMetricsLog {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VOCAB_SIZE;
    use crate::moe::{Mixture, MoEConfig, RouterKind};
    use crate::upcycle::upcycle_mixture_from;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            n_layers: 1,
            ffn_hidden: 24,
            vocab_size: VOCAB_SIZE,
            seq_len: 32,
        }
    }

    fn tiny_train(steps: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_tokens: 64,
            seq_len: 16,
            seed,
            val_batches: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus() -> Corpus {
        let mut bytes = Vec::new();
        while bytes.len() < 100_000 {
            bytes.extend_from_slice(b"the quick brown fox jumps over the lazy dog. 12 + 34 = 46\n");
        }
        Corpus::from_bytes("mix", &bytes, 0.05)
    }

    #[test]
    fn lr_schedule_anchor_values() {
        let cfg = TrainConfig { total_steps: 2000, ..TrainConfig::default() };
        assert!((lr_at(10, &cfg) - 2.5e-4).abs() < 1e-12, "0.5% warmup point");
        assert!((lr_at(1700, &cfg) - 1.580e-4).abs() < 1e-12, "85% point");
        assert!((lr_at(1900, &cfg) - 4.9928e-5).abs() < 1e-12, "95% point");
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(1000, &cfg), 5e-4);
    }

    #[test]
    fn lr_schedule_has_exactly_two_downward_jumps() {
        let cfg = TrainConfig { total_steps: 1000, ..TrainConfig::default() };
        let mut drops = 0;
        let mut prev = lr_at(0, &cfg);
        for step in 1..=1000 {
            let lr = lr_at(step, &cfg);
            if lr < prev {
                drops += 1;
            }
            prev = lr;
        }
        assert_eq!(drops, 2);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn lr_out_of_range_panics() {
        let cfg = TrainConfig { total_steps: 100, ..TrainConfig::default() };
        lr_at(101, &cfg);
    }

    #[test]
    fn adam_zero_grads_zero_decay_is_identity() {
        let model = tiny_model();
        let mut ckpt = init_dense(&model, 1).unwrap();
        let before = ckpt.tensor("lm_head").unwrap().clone();
        let mut adam = Adam::new();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let grads: BTreeMap<String, Vec<f64>> =
            [("lm_head".to_string(), vec![0.0; before.numel()])].into();
        adam.step(&mut ckpt, &grads, 1e-3, &cfg).unwrap();
        assert_eq!(ckpt.tensor("lm_head").unwrap(), &before);
    }

    #[test]
    fn dense_loss_starts_near_uniform_entropy_and_decreases() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let cfg = tiny_train(200, 3);
        let (_, records, _) = train_dense(&model, &corpus, &cfg).unwrap();
        let first = records.first().unwrap().lm_loss;
        let last = records.last().unwrap().lm_loss;
        let uniform = (VOCAB_SIZE as f64).ln();
        assert!((first - uniform).abs() < 0.3, "step-0 loss {first} vs ln(vocab) {uniform}");
        assert!(last < first, "training must reduce loss: {first} -> {last}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let cfg = tiny_train(20, 9);
        let (c1, r1, _) = train_dense(&model, &corpus, &cfg).unwrap();
        let (c2, r2, _) = train_dense(&model, &corpus, &cfg).unwrap();
        assert_eq!(r1, r2, "metric records must replay exactly");
        assert!(c1.bit_identical(&c2));
        let cfg2 = tiny_train(20, 10);
        let (_, r3, _) = train_dense(&model, &corpus, &cfg2).unwrap();
        assert_ne!(r1, r3, "different seed must change the run");
    }

    #[test]
    fn grad_norm_in_log_respects_clip() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let cfg = tiny_train(30, 5);
        let (_, records, _) = train_dense(&model, &corpus, &cfg).unwrap();
        for r in &records {
            assert!(r.grad_norm <= cfg.clip_norm + 1e-12, "step {}: {}", r.step, r.grad_norm);
        }
    }

    #[test]
    fn rejects_zero_steps() {
        let cfg = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn moe_training_runs_and_loss_components_compose() {
        let model = tiny_model();
        let corpus = tiny_corpus();
        let dense_cfg = tiny_train(30, 7);
        let (dense, _, _) = train_dense(&model, &corpus, &dense_cfg).unwrap();
        let moe_cfg = MoEConfig::derive(
            &model,
            4,
            2,
            2,
            Mixture::Summation,
            RouterKind::Mixture,
            false,
            0.02,
            0.001,
        )
        .unwrap();
        let moe = upcycle_mixture_from(&dense, &corpus, &moe_cfg, 7).unwrap();
        let (trained, records, summary) = train_moe(moe, &corpus, &tiny_train(20, 7)).unwrap();
        assert!(trained.moe_config().is_some());
        for r in &records {
            assert!(r.aux_loss > 0.0, "aux loss should be positive");
            assert!(r.z_loss >= 0.0);
        }
        assert!(summary.final_val_loss.is_finite());
    }

    #[test]
    fn metrics_log_round_trip_is_exact() {
        let records = vec![
            StepRecord {
                step: 0,
                lr: 1.25e-5,
                lm_loss: 5.556923412,
                aux_loss: 0.02000001,
                z_loss: 0.004324,
                grad_norm: 1.0,
            },
            StepRecord {
                step: 1,
                lr: 2.5e-5,
                lm_loss: std::f64::consts::PI,
                aux_loss: 0.0,
                z_loss: 0.0,
                grad_norm: 0.993,
            },
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.jsonl");
        write_metrics_log(&path, &records).unwrap();
        let loaded = read_metrics_log(&path).unwrap();
        assert_eq!(records, loaded);
        // write again; file bytes identical
        let bytes1 = std::fs::read(&path).unwrap();
        write_metrics_log(&path, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }
}
