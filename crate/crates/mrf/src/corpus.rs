//! Byte-level corpus loading and deterministic batching.
//!
//! A corpus is a directory whose immediate subdirectories are domain names
//! (`math/`, `code/`, ...), each holding UTF-8 `.txt` files. Files are
//! tokenized at the byte level (ids 0..=255) with `EOS` joining files into
//! one stream per domain; `BOS`/`PAD` exist in the vocab but never appear
//! in sampled training windows. The tail of every domain stream is held
//! out as a validation split.
//!
//! Batches are sampled as random contiguous windows from a single domain,
//! with domains interleaved by a seeded shuffle so long horizons visit
//! every domain equally often. The whole stream is replayable from a seed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub const VOCAB_SIZE: usize = 259;
pub const BOS: u16 = 256;
pub const EOS: u16 = 257;
pub const PAD: u16 = 258;

const DEFAULT_VAL_FRAC: f64 = 0.02;

#[derive(Clone)]
pub struct Domain {
    pub name: String,
    pub train: Vec<u16>,
    pub val: Vec<u16>,
}

#[derive(Clone)]
pub struct Corpus {
    pub domains: Vec<Domain>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Corpus> {
        Corpus::load_with_split(root, DEFAULT_VAL_FRAC)
    }

    pub fn load_with_split(root: &Path, val_frac: f64) -> Result<Corpus> {
        if !root.is_dir() {
            return Err(Error::Corpus(format!("{} is not a directory", root.display())));
        }
        let mut dir_names: Vec<String> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        dir_names.sort();

        let mut domains = Vec::new();
        for name in dir_names {
            let dir = root.join(&name);
            let mut files: Vec<_> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().map(|x| x == "txt").unwrap_or(false))
                .collect();
            files.sort();
            let mut stream: Vec<u16> = Vec::new();
            for (i, f) in files.iter().enumerate() {
                let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
                if i > 0 && !stream.is_empty() && !bytes.is_empty() {
                    stream.push(EOS);
                }
                stream.extend(bytes.iter().map(|&b| b as u16));
            }
            if stream.is_empty() {
                eprintln!("warning: domain '{name}' is empty, skipping");
                continue;
            }
            let val_len = ((stream.len() as f64) * val_frac).round() as usize;
            let split = stream.len() - val_len.min(stream.len() / 2);
            let val = stream.split_off(split);
            domains.push(Domain { name, train: stream, val });
        }
        if domains.is_empty() {
            return Err(Error::Corpus(format!("no non-empty domains under {}", root.display())));
        }
        Ok(Corpus { domains })
    }

    /// Single anonymous domain from an in-memory byte stream (tests).
    pub fn from_bytes(name: &str, bytes: &[u8], val_frac: f64) -> Corpus {
        let mut stream: Vec<u16> = bytes.iter().map(|&b| b as u16).collect();
        let val_len = ((stream.len() as f64) * val_frac).round() as usize;
        let split = stream.len() - val_len.min(stream.len() / 2);
        let val = stream.split_off(split);
        Corpus { domains: vec![Domain { name: name.to_string(), train: stream, val }] }
    }

    pub fn total_train_tokens(&self) -> usize {
        self.domains.iter().map(|d| d.train.len()).sum()
    }
}

/// One training batch: `seqs` independent windows of `seq_len` tokens from
/// a single domain, with next-token targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<u16>,
    pub targets: Vec<u16>,
    pub seqs: usize,
    pub seq_len: usize,
    pub domain: String,
}

pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    eligible: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    seqs: usize,
    seq_len: usize,
    rng: SeedRng,
}

impl<'a> BatchIter<'a> {
    pub fn new(corpus: &'a Corpus, batch_tokens: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch_tokens < seq_len {
            return Err(Error::Config(format!(
                "batch_tokens {batch_tokens} must be at least seq_len {seq_len}"
            )));
        }
        let eligible: Vec<usize> = corpus
            .domains
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                if d.train.len() > seq_len {
                    Some(i)
                } else {
                    eprintln!(
                        "warning: domain '{}' too short for seq_len {seq_len}, skipping",
                        d.name
                    );
                    None
                }
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::Corpus("no domain long enough to sample a window".into()));
        }
        let mut it = BatchIter {
            corpus,
            order: eligible.clone(),
            eligible,
            pos: 0,
            seqs: batch_tokens / seq_len,
            seq_len,
            rng: SeedRng::new(seed),
        };
        it.rng.shuffle(&mut it.order);
        Ok(it)
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos == self.order.len() {
            self.order.copy_from_slice(&self.eligible);
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let d = &self.corpus.domains[self.order[self.pos]];
        self.pos += 1;
        let mut inputs = Vec::with_capacity(self.seqs * self.seq_len);
        let mut targets = Vec::with_capacity(self.seqs * self.seq_len);
        for _ in 0..self.seqs {
            let off = self.rng.below(d.train.len() - self.seq_len);
            inputs.extend_from_slice(&d.train[off..off + self.seq_len]);
            targets.extend_from_slice(&d.train[off + 1..off + self.seq_len + 1]);
        }
        Batch {
            inputs,
            targets,
            seqs: self.seqs,
            seq_len: self.seq_len,
            domain: d.name.clone(),
        }
    }
}

/// Fixed validation batches: round-robin over domains with validation
/// data, windows seeded independently of the training stream so all run
/// variants score the same material.
pub fn val_batches(
    corpus: &Corpus,
    batch_tokens: usize,
    seq_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let eligible: Vec<&Domain> =
        corpus.domains.iter().filter(|d| d.val.len() > seq_len).collect();
    if eligible.is_empty() {
        return Err(Error::Corpus("no domain has enough validation data".into()));
    }
    let seqs = (batch_tokens / seq_len).max(1);
    let mut rng = SeedRng::derive(seed, "val-batches");
    let mut out = Vec::with_capacity(count);
    for b in 0..count {
        let d = eligible[b % eligible.len()];
        let mut inputs = Vec::with_capacity(seqs * seq_len);
        let mut targets = Vec::with_capacity(seqs * seq_len);
        for _ in 0..seqs {
            let off = rng.below(d.val.len() - seq_len);
            inputs.extend_from_slice(&d.val[off..off + seq_len]);
            targets.extend_from_slice(&d.val[off + 1..off + seq_len + 1]);
        }
        out.push(Batch { inputs, targets, seqs, seq_len, domain: d.name.clone() });
    }
    Ok(out)
}

/// Deterministic probe windows from one domain (validation split when
/// possible, training split otherwise).
pub fn probe_windows(
    domain: &Domain,
    seq_len: usize,
    windows: usize,
    rng: &mut SeedRng,
) -> Result<Vec<Vec<u16>>> {
    let stream = if domain.val.len() > seq_len { &domain.val } else { &domain.train };
    if stream.len() <= seq_len {
        return Err(Error::Corpus(format!("domain '{}' has zero usable tokens", domain.name)));
    }
    Ok((0..windows)
        .map(|_| {
            let off = rng.below(stream.len() - seq_len);
            stream[off..off + seq_len].to_vec()
        })
        .collect())
}
