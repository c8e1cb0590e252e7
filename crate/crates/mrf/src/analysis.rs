//! Routing and specialization diagnostics.
//!
//! Diversity: per (layer, domain), the batch-mean of the full softmax
//! gate vector (pre-selection, so distributions are comparable across k),
//! scalarized both as the population std across experts and the entropy
//! in bits of the mean-gate distribution — an uneven distribution (high
//! std, low entropy) means more domain-specific routing.
//!
//! Specialization: every probe token is evaluated by all n experts of a
//! layer, bypassing routing; the report is the token-averaged pairwise
//! cosine similarity of expert outputs. Lower similarity means more
//! specialized experts. Freshly upcycled experts are bitwise identical,
//! so every pair reports exactly 1.0.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::corpus::{probe_windows, Corpus};
use crate::error::{Error, Result};
use crate::model::lease_frozen;
use crate::moe::{moe_forward, routing_trace, TraceRecord};
use crate::rng::SeedRng;
use crate::tape::{gelu_value, Tape};
use crate::tensor::{cosine_similarity, Tensor};
use crate::train::StepRecord;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub seed: u64,
    pub batches_per_domain: usize,
    pub batch_tokens: usize,
    pub seq_len: usize,
    /// Specialization probe size, drawn evenly from all domains.
    pub probe_tokens: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0,
            batches_per_domain: 4,
            batch_tokens: 512,
            seq_len: 128,
            probe_tokens: 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiversityRow {
    pub layer: usize,
    pub domain: String,
    pub mean_gates: Vec<f64>,
    pub std: f64,
    pub entropy_bits: f64,
}

#[derive(Clone, Debug)]
pub struct DiversityReport {
    pub rows: Vec<DiversityRow>,
}

/// Population std and entropy (bits) of a gate distribution.
pub fn gate_stats(mean_gates: &[f64]) -> (f64, f64) {
    let n = mean_gates.len() as f64;
    let mean = mean_gates.iter().sum::<f64>() / n;
    let var = mean_gates.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let entropy = mean_gates
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum::<f64>();
    (var.sqrt(), entropy)
}

/// Average the full gate vector per (layer, domain) over probe batches.
/// Also returns one exportable trace record per probed token.
pub fn routing_diversity(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    layer_filter: Option<&[usize]>,
    probe: &ProbeConfig,
) -> Result<(DiversityReport, Vec<TraceRecord>)> {
    let moe_cfg = ckpt
        .moe_config()
        .ok_or_else(|| Error::Invalid("routing diversity requires an MoE checkpoint".into()))?
        .clone();
    let model_cfg = ckpt.config().clone();
    let seq = probe.seq_len.min(model_cfg.seq_len);
    let windows_per_batch = (probe.batch_tokens / seq).max(1);
    let keep = |layer: usize| layer_filter.map(|f| f.contains(&layer)).unwrap_or(true);

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for domain in &corpus.domains {
        let mut rng = SeedRng::derive(probe.seed, &format!("diversity/{}", domain.name));
        let mut sums = vec![vec![0.0; moe_cfg.n_experts]; model_cfg.n_layers];
        let mut count = 0u64;
        for _ in 0..probe.batches_per_domain {
            let windows = probe_windows(domain, seq, windows_per_batch, &mut rng)?;
            let tokens: Vec<u16> = windows.concat();
            let tape = Tape::new();
            let lease = lease_frozen(&tape, ckpt);
            let fwd = moe_forward(&tape, &lease, &model_cfg, &moe_cfg, &tokens, windows.len())?;
            for (layer, out) in fwd.layers.iter().enumerate() {
                if !keep(layer) {
                    continue;
                }
                let trace = routing_trace(&tape, out);
                for t in 0..trace.gates.rows() {
                    let grow = trace.gates.row(t);
                    for (acc, v) in sums[layer].iter_mut().zip(grow) {
                        *acc += v;
                    }
                    records.push(TraceRecord {
                        layer,
                        domain: domain.name.clone(),
                        gates: grow.to_vec(),
                        selected: trace.selected[t].clone(),
                    });
                }
            }
            count += tokens.len() as u64;
        }
        if count == 0 {
            return Err(Error::Corpus(format!("domain '{}' has zero tokens", domain.name)));
        }
        for layer in 0..model_cfg.n_layers {
            if !keep(layer) {
                continue;
            }
            let mean_gates: Vec<f64> = sums[layer].iter().map(|s| s / count as f64).collect();
            let (std, entropy_bits) = gate_stats(&mean_gates);
            rows.push(DiversityRow {
                layer,
                domain: domain.name.clone(),
                mean_gates,
                std,
                entropy_bits,
            });
        }
    }
    rows.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.domain.cmp(&b.domain)));
    Ok((DiversityReport { rows }, records))
}

#[derive(Clone, Debug)]
pub struct LayerSpecialization {
    pub layer: usize,
    /// Full symmetric `n x n` cosine matrix, row-major.
    pub matrix: Vec<f64>,
    /// Mean over the C(n, 2) distinct pairs.
    pub mean_pairwise: f64,
}

#[derive(Clone, Debug)]
pub struct SpecializationReport {
    pub n_experts: usize,
    pub layers: Vec<LayerSpecialization>,
}

/// Apply expert `e` of `layer` to a batch of normalized inputs.
fn expert_forward(ckpt: &Checkpoint, layer: usize, e: usize, xn: &Tensor) -> Result<Tensor> {
    let w1 = ckpt.tensor(&format!("layer.{layer}.expert.{e}.w1"))?;
    let w2 = ckpt.tensor(&format!("layer.{layer}.expert.{e}.w2"))?;
    let mut h = xn.matmul(&w1.transpose());
    for v in h.data_mut() {
        *v = gelu_value(*v);
    }
    Ok(h.matmul(&w2.transpose()))
}

/// Evaluate every token by all n experts per layer (routing bypassed) and
/// average pairwise output cosine similarity over tokens.
pub fn expert_specialization(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    probe: &ProbeConfig,
) -> Result<SpecializationReport> {
    let moe_cfg = ckpt
        .moe_config()
        .ok_or_else(|| Error::Invalid("specialization requires an MoE checkpoint".into()))?
        .clone();
    let model_cfg = ckpt.config().clone();
    let n = moe_cfg.n_experts;
    let seq = probe.seq_len.min(model_cfg.seq_len);
    let per_domain = (probe.probe_tokens / (corpus.domains.len() * seq)).max(1);

    // token-summed pairwise cosine per layer
    let mut sums = vec![vec![0.0; n * n]; model_cfg.n_layers];
    let mut count = 0u64;
    for domain in &corpus.domains {
        let mut rng = SeedRng::derive(probe.seed, &format!("specialization/{}", domain.name));
        let windows = probe_windows(domain, seq, per_domain, &mut rng)?;
        let tokens: Vec<u16> = windows.concat();
        let tape = Tape::new();
        let lease = lease_frozen(&tape, ckpt);
        let fwd = moe_forward(&tape, &lease, &model_cfg, &moe_cfg, &tokens, windows.len())?;
        let t_tokens = tokens.len();
        for layer in 0..model_cfg.n_layers {
            let xn = tape.value(fwd.ffn_input[layer]);
            let outs: Vec<Tensor> =
                (0..n).map(|e| expert_forward(ckpt, layer, e, &xn)).collect::<Result<_>>()?;
            for t in 0..t_tokens {
                for a in 0..n {
                    for b in (a + 1)..n {
                        let c = cosine_similarity(outs[a].row(t), outs[b].row(t));
                        sums[layer][a * n + b] += c;
                    }
                }
            }
        }
        count += tokens.len() as u64;
    }
    if count == 0 {
        return Err(Error::Corpus("empty specialization probe".into()));
    }

    let layers = (0..model_cfg.n_layers)
        .map(|layer| {
            let mut matrix = vec![0.0; n * n];
            let mut total = 0.0;
            for a in 0..n {
                matrix[a * n + a] = 1.0;
                for b in (a + 1)..n {
                    let mean = sums[layer][a * n + b] / count as f64;
                    matrix[a * n + b] = mean;
                    matrix[b * n + a] = mean;
                    total += mean;
                }
            }
            let pairs = (n * (n - 1) / 2) as f64;
            LayerSpecialization { layer, matrix, mean_pairwise: total / pairs }
        })
        .collect();
    Ok(SpecializationReport { n_experts: n, layers })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub steps: Vec<u64>,
    pub variants: Vec<String>,
    /// `[variant][step]` LM loss.
    pub lm: Vec<Vec<f64>>,
    pub final_lm: Vec<f64>,
    /// `final_lm[i] - final_lm[0]`.
    pub delta_vs_first: Vec<f64>,
    pub mean_final: f64,
    pub std_final: f64,
}

/// Align metrics logs on a shared step grid and compare LM loss curves.
pub fn compare_runs(logs: &[(String, Vec<StepRecord>)]) -> Result<Comparison> {
    if logs.len() < 2 {
        return Err(Error::Invalid("compare needs at least two logs".into()));
    }
    let steps: Vec<u64> = logs[0].1.iter().map(|r| r.step).collect();
    for (name, records) in &logs[1..] {
        let other: Vec<u64> = records.iter().map(|r| r.step).collect();
        if other != steps {
            return Err(Error::StepGridMismatch(format!(
                "'{}' has {} steps, '{}' has {}",
                logs[0].0,
                steps.len(),
                name,
                other.len()
            )));
        }
    }
    let lm: Vec<Vec<f64>> =
        logs.iter().map(|(_, r)| r.iter().map(|x| x.lm_loss).collect()).collect();
    let final_lm: Vec<f64> = lm.iter().map(|c| *c.last().unwrap()).collect();
    let delta_vs_first: Vec<f64> = final_lm.iter().map(|v| v - final_lm[0]).collect();
    let mean_final = final_lm.iter().sum::<f64>() / final_lm.len() as f64;
    let var = final_lm.iter().map(|v| (v - mean_final) * (v - mean_final)).sum::<f64>()
        / final_lm.len() as f64;
    Ok(Comparison {
        steps,
        variants: logs.iter().map(|(n, _)| n.clone()).collect(),
        lm,
        final_lm,
        delta_vs_first,
        mean_final,
        std_final: var.sqrt(),
    })
}

// ---- plot-ready output ----

pub fn diversity_csv(report: &DiversityReport) -> String {
    let mut out = String::from("layer,domain,expert,mean_gate,std,entropy\n");
    for row in &report.rows {
        for (e, g) in row.mean_gates.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.layer, row.domain, e, g, row.std, row.entropy_bits
            ));
        }
    }
    out
}

pub fn specialization_csv(report: &SpecializationReport) -> String {
    let n = report.n_experts;
    let mut out = String::from("layer,expert_a,expert_b,cosine\n");
    for l in &report.layers {
        for a in 0..n {
            for b in a..n {
                out.push_str(&format!("{},{a},{b},{}\n", l.layer, l.matrix[a * n + b]));
            }
        }
    }
    out
}

pub fn curves_csv(logs: &[(String, Vec<StepRecord>)]) -> String {
    let mut out = String::from("step,variant,lm_loss,aux_loss,z_loss\n");
    for (name, records) in logs {
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, name, r.lm_loss, r.aux_loss, r.z_loss
            ));
        }
    }
    out
}

pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut header = String::from("step");
    for v in &cmp.variants {
        header.push_str(&format!(",lm_{v}"));
    }
    for v in &cmp.variants[1..] {
        header.push_str(&format!(",delta_{v}"));
    }
    let mut out = header + "\n";
    for (i, step) in cmp.steps.iter().enumerate() {
        out.push_str(&step.to_string());
        for col in &cmp.lm {
            out.push_str(&format!(",{}", col[i]));
        }
        for col in &cmp.lm[1..] {
            out.push_str(&format!(",{}", col[i] - cmp.lm[0][i]));
        }
        out.push('\n');
    }
    out
}

pub fn write_traces_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Invalid(format!("trace serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VOCAB_SIZE;
    use crate::model::{init_dense, ModelConfig};
    use crate::moe::{Mixture, MoEConfig, RouterKind};
    use crate::rng::SeedRng;
    use crate::upcycle::upcycle_mixture_from;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            n_layers: 2,
            ffn_hidden: 24,
            vocab_size: VOCAB_SIZE,
            seq_len: 32,
        }
    }

    fn two_domain_corpus() -> Corpus {
        let mut a = Vec::new();
        let mut b = Vec::new();
        while a.len() < 20_000 {
            a.extend_from_slice(b"12 + 34 = 46; 9 * 9 = 81;\n");
            b.extend_from_slice(b"the river ran quiet under the bridge at dusk\n");
        }
        let mk = |name: &str, bytes: &[u8]| {
            let c = Corpus::from_bytes(name, bytes, 0.2);
            c.domains.into_iter().next().unwrap()
        };
        Corpus { domains: vec![mk("math", &a), mk("prose", &b)] }
    }

    fn fresh_moe() -> (Checkpoint, Corpus) {
        let model = tiny_model();
        let corpus = two_domain_corpus();
        let dense = init_dense(&model, 17).unwrap();
        let cfg = MoEConfig::derive(
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
        let moe = upcycle_mixture_from(&dense, &corpus, &cfg, 17).unwrap();
        (moe, corpus)
    }

    fn small_probe() -> ProbeConfig {
        ProbeConfig {
            seed: 5,
            batches_per_domain: 2,
            batch_tokens: 64,
            seq_len: 16,
            probe_tokens: 128,
        }
    }

    #[test]
    fn forced_gate_distribution_stats() {
        let (std, entropy) = gate_stats(&[0.9, 0.1]);
        assert!((std - 0.4).abs() < 1e-12, "std {std}");
        assert!((entropy - 0.469).abs() < 1e-3, "entropy {entropy}");
        let (std_u, entropy_u) = gate_stats(&[0.25; 4]);
        assert!(std_u.abs() < 1e-15);
        assert!((entropy_u - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_mean_gates_sum_to_one() {
        let (moe, corpus) = fresh_moe();
        let (report, records) = routing_diversity(&moe, &corpus, None, &small_probe()).unwrap();
        assert_eq!(report.rows.len(), 2 * 2, "layers x domains");
        for row in &report.rows {
            let sum: f64 = row.mean_gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{} sum {sum}", row.domain);
        }
        assert!(!records.is_empty());
        let r = &records[0];
        assert_eq!(r.gates.len(), 4);
        assert_eq!(r.selected.len(), 2);
    }

    #[test]
    fn diversity_layer_filter_restricts_rows() {
        let (moe, corpus) = fresh_moe();
        let (report, _) = routing_diversity(&moe, &corpus, Some(&[1]), &small_probe()).unwrap();
        assert!(report.rows.iter().all(|r| r.layer == 1));
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn diversity_is_deterministic() {
        let (moe, corpus) = fresh_moe();
        let (r1, _) = routing_diversity(&moe, &corpus, None, &small_probe()).unwrap();
        let (r2, _) = routing_diversity(&moe, &corpus, None, &small_probe()).unwrap();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.mean_gates, b.mean_gates);
        }
    }

    #[test]
    fn fresh_upcycle_specialization_is_exactly_one() {
        let (moe, corpus) = fresh_moe();
        let report = expert_specialization(&moe, &corpus, &small_probe()).unwrap();
        assert_eq!(report.layers.len(), 2);
        for l in &report.layers {
            for a in 0..4 {
                for b in 0..4 {
                    assert_eq!(l.matrix[a * 4 + b], 1.0, "layer {} pair ({a},{b})", l.layer);
                }
            }
            assert_eq!(l.mean_pairwise, 1.0);
        }
    }

    #[test]
    fn negated_expert_weights_give_minus_one() {
        let (mut moe, corpus) = fresh_moe();
        // negate expert 1's output projection in layer 0
        let w2 = moe.tensor_mut("layer.0.expert.1.w2").unwrap();
        for v in w2.data_mut() {
            *v = -*v;
        }
        let report = expert_specialization(&moe, &corpus, &small_probe()).unwrap();
        let m = &report.layers[0].matrix;
        assert!((m[1] - (-1.0)).abs() < 1e-12, "cos(E0, E1) = {}", m[1]);
        assert_eq!(m[2 * 4 + 3], 1.0, "untouched pair stays 1");
    }

    #[test]
    fn specialization_matrix_is_symmetric_with_unit_diagonal() {
        let (mut moe, corpus) = fresh_moe();
        // perturb every expert differently so values are nontrivial
        let mut rng = SeedRng::new(3);
        for layer in 0..2 {
            for e in 0..4 {
                let w1 = moe.tensor_mut(&format!("layer.{layer}.expert.{e}.w1")).unwrap();
                for v in w1.data_mut() {
                    *v += 0.01 * rng.normal();
                }
            }
        }
        let report = expert_specialization(&moe, &corpus, &small_probe()).unwrap();
        for l in &report.layers {
            for a in 0..4 {
                assert_eq!(l.matrix[a * 4 + a], 1.0);
                for b in 0..4 {
                    assert_eq!(l.matrix[a * 4 + b], l.matrix[b * 4 + a]);
                    assert!(l.matrix[a * 4 + b] <= 1.0 + 1e-12);
                    assert!(l.matrix[a * 4 + b] >= -1.0 - 1e-12);
                }
            }
        }
    }

    fn fake_log(name: &str, losses: &[f64]) -> (String, Vec<StepRecord>) {
        (
            name.to_string(),
            losses
                .iter()
                .enumerate()
                .map(|(i, &l)| StepRecord {
                    step: i as u64,
                    lr: 1e-4,
                    lm_loss: l,
                    aux_loss: 0.0,
                    z_loss: 0.0,
                    grad_norm: 1.0,
                })
                .collect(),
        )
    }

    #[test]
    fn identical_logs_compare_to_zero_delta() {
        let a = fake_log("a", &[5.0, 4.0, 3.0]);
        let b = fake_log("b", &[5.0, 4.0, 3.0]);
        let cmp = compare_runs(&[a, b]).unwrap();
        assert!(cmp.delta_vs_first.iter().all(|&d| d == 0.0));
        let csv = comparison_csv(&cmp);
        assert!(csv.lines().count() == 4);
        assert!(csv.contains("delta_b"));
    }

    #[test]
    fn strictly_lower_run_has_one_signed_delta() {
        let a = fake_log("base", &[5.0, 4.0, 3.0]);
        let b = fake_log("better", &[4.5, 3.5, 2.5]);
        let cmp = compare_runs(&[a, b]).unwrap();
        assert!(cmp.delta_vs_first[1] < 0.0);
        let csv = comparison_csv(&cmp);
        for line in csv.lines().skip(1) {
            let delta: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!(delta < 0.0);
        }
    }

    #[test]
    fn mismatched_step_grids_error() {
        let a = fake_log("a", &[5.0, 4.0, 3.0]);
        let b = fake_log("b", &[5.0, 4.0]);
        assert!(matches!(compare_runs(&[a, b]), Err(Error::StepGridMismatch(_))));
    }

    #[test]
    fn three_seed_summary_matches_hand_computation() {
        let logs = vec![
            fake_log("s1", &[5.0, 3.0]),
            fake_log("s2", &[5.0, 3.2]),
            fake_log("s3", &[5.0, 2.8]),
        ];
        let cmp = compare_runs(&logs).unwrap();
        let mean = (3.0 + 3.2 + 2.8) / 3.0;
        let var = ((3.0f64 - mean).powi(2) + (3.2 - mean).powi(2) + (2.8 - mean).powi(2)) / 3.0;
        assert!((cmp.mean_final - mean).abs() < 1e-12);
        assert!((cmp.std_final - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_schemas_have_expected_headers() {
        let (moe, corpus) = fresh_moe();
        let probe = small_probe();
        let (div, traces) = routing_diversity(&moe, &corpus, None, &probe).unwrap();
        let spec = expert_specialization(&moe, &corpus, &probe).unwrap();
        assert!(diversity_csv(&div).starts_with("layer,domain,expert,mean_gate,std,entropy\n"));
        assert!(specialization_csv(&spec).starts_with("layer,expert_a,expert_b,cosine\n"));
        let logs = vec![fake_log("x", &[1.0]), fake_log("y", &[2.0])];
        assert!(curves_csv(&logs).starts_with("step,variant,lm_loss,aux_loss,z_loss\n"));
        let tmp = tempfile::tempdir().unwrap();
        let tpath = tmp.path().join("traces.jsonl");
        write_traces_jsonl(&tpath, &traces).unwrap();
        let first = std::fs::read_to_string(&tpath).unwrap();
        let first_line = first.lines().next().unwrap();
        let parsed: TraceRecord = serde_json::from_str(first_line).unwrap();
        assert_eq!(parsed.gates.len(), 4);
    }
}
