//! Event-stream data model: JSONL serialization, time normalization,
//! mark priors, rare/frequent partitioning and the resampling baselines.
//!
//! All types are immutable after construction; every operation here is a
//! pure function.

use crate::error::{Error, Result};
use crate::real::Real;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as FmtWrite;
use std::io::BufRead;
use std::path::Path;

/// A single event: categorical mark plus absolute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event<F: Real> {
    pub mark: usize,
    pub time: F,
}

/// An ordered event sequence observed on the window `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence<F: Real> {
    pub events: Vec<Event<F>>,
    pub t_start: F,
    pub t_end: F,
}

impl<F: Real> EventSequence<F> {
    /// Checks strictly increasing finite times inside the observation window.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let mut prev = self.t_start;
        for (i, e) in self.events.iter().enumerate() {
            if !e.time.is_finite() {
                return Err(Error::Data(format!("non-finite time at event {i}")));
            }
            if e.mark >= vocab_size {
                return Err(Error::Data(format!(
                    "mark {} out of range (vocab {})",
                    e.mark, vocab_size
                )));
            }
            if i == 0 {
                if e.time < prev {
                    return Err(Error::Data("first event before t_start".into()));
                }
            } else if e.time <= prev {
                return Err(Error::Data(format!("non-monotone time at event {i}")));
            }
            prev = e.time;
        }
        if let Some(last) = self.events.last() {
            if last.time > self.t_end {
                return Err(Error::Data("last event after t_end".into()));
            }
        }
        Ok(())
    }
}

/// Train/val/test tag carried by a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A collection of sequences sharing one mark vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Real> {
    pub sequences: Vec<EventSequence<F>>,
    pub vocab_size: usize,
    pub split: Split,
}

impl<F: Real> Dataset<F> {
    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    fn mark_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.vocab_size];
        for s in &self.sequences {
            for e in &s.events {
                counts[e.mark] += 1;
            }
        }
        counts
    }
}

/// Mean/std of all event times, used for the affine time rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Identity transform (used for datasets trained on raw times).
    pub fn identity() -> Self {
        NormalizationStats { mean: 0.0, std: 1.0 }
    }

    pub fn normalize<F: Real>(&self, t: F) -> F {
        (t - F::of(self.mean)) / F::of(self.std)
    }

    pub fn denormalize<F: Real>(&self, t: F) -> F {
        t * F::of(self.std) + F::of(self.mean)
    }
}

/// Disjoint rare/frequent split of the mark vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkPartition {
    pub rare: BTreeSet<usize>,
    pub frequent: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    mark: usize,
    time: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    events: Vec<RawEvent>,
    t_start: f64,
    t_end: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab_size: usize,
}

/// Loads a JSONL dataset: one sequence per line, optional first header
/// line `{"vocab_size": k}`. Without the header, the vocabulary size is
/// `1 + max mark`.
pub fn load_jsonl<F: Real>(path: impl AsRef<Path>, split: Split) -> Result<Dataset<F>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut sequences = Vec::new();
    let mut declared_vocab: Option<usize> = None;
    let mut max_mark: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                declared_vocab = Some(h.vocab_size);
                continue;
            }
        }
        let raw: RawSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        for e in &raw.events {
            max_mark = Some(max_mark.map_or(e.mark, |m: usize| m.max(e.mark)));
        }
        sequences.push(EventSequence {
            events: raw
                .events
                .iter()
                .map(|e| Event { mark: e.mark, time: F::of(e.time) })
                .collect(),
            t_start: F::of(raw.t_start),
            t_end: F::of(raw.t_end),
        });
    }
    let vocab_size = declared_vocab.unwrap_or_else(|| max_mark.map_or(0, |m| m + 1));
    let ds = Dataset { sequences, vocab_size, split };
    for (i, s) in ds.sequences.iter().enumerate() {
        s.validate(vocab_size).map_err(|_| Error::NonMonotone { sequence: i })?;
    }
    Ok(ds)
}

/// Writes the dataset in the format [`load_jsonl`] reads, header
/// included; the file lands atomically.
pub fn save_jsonl<F: Real>(ds: &Dataset<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{}", serde_json::to_string(&Header { vocab_size: ds.vocab_size })?)
        .expect("string write");
    for s in &ds.sequences {
        let raw = RawSequence {
            events: s
                .events
                .iter()
                .map(|e| RawEvent { mark: e.mark, time: e.time.as_f64() })
                .collect(),
            t_start: s.t_start.as_f64(),
            t_end: s.t_end.as_f64(),
        };
        writeln!(out, "{}", serde_json::to_string(&raw)?).expect("string write");
    }
    crate::write_atomic(path, out.as_bytes())
}

/// Rescales every time by `(t - mean) / std`. With `stats = None` the
/// statistics are computed from `ds` (the training split).
pub fn normalize_times<F: Real>(
    ds: &Dataset<F>,
    stats: Option<NormalizationStats>,
) -> Result<(Dataset<F>, NormalizationStats)> {
    let stats = match stats {
        Some(s) => s,
        None => {
            let n = ds.n_events();
            if n == 0 {
                return Err(Error::Degenerate("no events to compute statistics".into()));
            }
            let sum: f64 = ds
                .sequences
                .iter()
                .flat_map(|s| s.events.iter())
                .map(|e| e.time.as_f64())
                .sum();
            let mean = sum / n as f64;
            let var: f64 = ds
                .sequences
                .iter()
                .flat_map(|s| s.events.iter())
                .map(|e| (e.time.as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            if std == 0.0 {
                return Err(Error::Degenerate("all event times identical (std = 0)".into()));
            }
            NormalizationStats { mean, std }
        }
    };
    if stats.std <= 0.0 {
        return Err(Error::Degenerate("std must be positive".into()));
    }
    let sequences = ds
        .sequences
        .iter()
        .map(|s| EventSequence {
            events: s
                .events
                .iter()
                .map(|e| Event { mark: e.mark, time: stats.normalize(e.time) })
                .collect(),
            t_start: stats.normalize(s.t_start),
            t_end: stats.normalize(s.t_end),
        })
        .collect();
    Ok((Dataset { sequences, vocab_size: ds.vocab_size, split: ds.split }, stats))
}

/// Inverse of [`normalize_times`] under the same statistics.
pub fn denormalize_times<F: Real>(ds: &Dataset<F>, stats: NormalizationStats) -> Dataset<F> {
    let sequences = ds
        .sequences
        .iter()
        .map(|s| EventSequence {
            events: s
                .events
                .iter()
                .map(|e| Event { mark: e.mark, time: stats.denormalize(e.time) })
                .collect(),
            t_start: stats.denormalize(s.t_start),
            t_end: stats.denormalize(s.t_end),
        })
        .collect();
    Dataset { sequences, vocab_size: ds.vocab_size, split: ds.split }
}

/// Empirical mark proportions over all events; entries sum to 1.
pub fn compute_prior<F: Real>(ds: &Dataset<F>) -> Result<Vec<f64>> {
    let total = ds.n_events();
    if total == 0 {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    Ok(ds
        .mark_counts()
        .into_iter()
        .map(|c| c as f64 / total as f64)
        .collect())
}

/// Splits the vocabulary into the given rare set and its complement.
pub fn partition_marks<F: Real>(
    ds: &Dataset<F>,
    rare_list: &BTreeSet<usize>,
) -> Result<MarkPartition> {
    if let Some(&m) = rare_list.iter().find(|&&m| m >= ds.vocab_size) {
        return Err(Error::Data(format!("rare mark {m} out of range")));
    }
    let frequent = (0..ds.vocab_size).filter(|m| !rare_list.contains(m)).collect();
    Ok(MarkPartition { rare: rare_list.clone(), frequent })
}

/// Duplicates whole sequences containing under-represented marks until every
/// mark's event count reaches that of the most frequent mark (up to one
/// sequence's worth of overshoot). Deterministic given the seed.
pub fn oversample<F: Real>(ds: &Dataset<F>, seed: u64) -> Dataset<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = ds.mark_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut sequences = ds.sequences.clone();
    let mut order: Vec<usize> = (0..ds.vocab_size).collect();
    order.sort_by_key(|&m| counts[m]);
    for m in order {
        if counts[m] == 0 {
            continue; // mark absent from every sequence, nothing to duplicate
        }
        let holders: Vec<usize> = ds
            .sequences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.events.iter().any(|e| e.mark == m))
            .map(|(i, _)| i)
            .collect();
        while counts[m] < target {
            let pick = holders[rng.gen_range(0..holders.len())];
            let seq = ds.sequences[pick].clone();
            for e in &seq.events {
                counts[e.mark] += 1;
            }
            sequences.push(seq);
        }
    }
    Dataset { sequences, vocab_size: ds.vocab_size, split: ds.split }
}

/// Drops whole sequences containing over-represented marks until every
/// mark's event count falls to that of the rarest (present) mark, up to one
/// sequence's worth. Deterministic given the seed.
pub fn undersample<F: Real>(ds: &Dataset<F>, seed: u64) -> Dataset<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = ds.mark_counts();
    let target = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    let mut sequences = ds.sequences.clone();
    let mut order: Vec<usize> = (0..ds.vocab_size).collect();
    order.sort_by_key(|&m| std::cmp::Reverse(counts[m]));
    for m in order {
        while counts[m] > target {
            let holders: Vec<usize> = sequences
                .iter()
                .enumerate()
                .filter(|(_, s)| s.events.iter().any(|e| e.mark == m))
                .map(|(i, _)| i)
                .collect();
            if holders.len() <= 1 {
                break; // keep the last sequence carrying this mark
            }
            let pick = holders[rng.gen_range(0..holders.len())];
            for e in &sequences[pick].events {
                counts[e.mark] -= 1;
            }
            sequences.remove(pick);
        }
    }
    Dataset { sequences, vocab_size: ds.vocab_size, split: ds.split }
}
