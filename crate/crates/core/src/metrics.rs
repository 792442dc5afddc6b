//! Evaluation metrics: one-vs-rest F1 aggregates, geometric-mean absolute
//! time error, rank correlation, curve distance, the density-fidelity
//! protocol against closed-form oracles, and held-out likelihood.

use crate::data::{Dataset, EventSequence};
use crate::encoder::{encode_prefixes, HistoryState};
use crate::error::{Error, Result};
use crate::iem::IemParams;
use crate::model::IfnmtppModel;
use crate::real::Real;
use crate::synth::ProcessSpec;
use crate::train;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Per-mark one-vs-rest confusion totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ConfusionCounts {
    pub fn from_streams(preds: &[usize], labels: &[usize], n_marks: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} predictions vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut c = ConfusionCounts {
            tp: vec![0; n_marks],
            fp: vec![0; n_marks],
            fn_: vec![0; n_marks],
        };
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= n_marks || l >= n_marks {
                return Err(Error::Data(format!("mark id out of range: pred {p}, label {l}")));
            }
            if p == l {
                c.tp[p] += 1;
            } else {
                c.fp[p] += 1;
                c.fn_[l] += 1;
            }
        }
        Ok(c)
    }

    fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    }
}

fn check_subset(subset: &[usize], n_marks: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Precondition("empty mark subset".into()));
    }
    if let Some(&m) = subset.iter().find(|&&m| m >= n_marks) {
        return Err(Error::Data(format!("subset mark {m} out of range")));
    }
    Ok(())
}

/// Unweighted mean of per-mark one-vs-rest F1 over the subset. Per-mark
/// counts come from the full prediction stream; the subset only selects
/// which marks are averaged.
pub fn macro_f1(preds: &[usize], labels: &[usize], subset: &[usize], n_marks: usize) -> Result<f64> {
    check_subset(subset, n_marks)?;
    let c = ConfusionCounts::from_streams(preds, labels, n_marks)?;
    let sum: f64 = subset
        .iter()
        .map(|&m| ConfusionCounts::f1(c.tp[m], c.fp[m], c.fn_[m]))
        .sum();
    Ok(sum / subset.len() as f64)
}

/// F1 from pooled TP/FP/FN over the subset.
pub fn micro_f1(preds: &[usize], labels: &[usize], subset: &[usize], n_marks: usize) -> Result<f64> {
    check_subset(subset, n_marks)?;
    let c = ConfusionCounts::from_streams(preds, labels, n_marks)?;
    let tp: usize = subset.iter().map(|&m| c.tp[m]).sum();
    let fp: usize = subset.iter().map(|&m| c.fp[m]).sum();
    let fn_: usize = subset.iter().map(|&m| c.fn_[m]).sum();
    Ok(ConfusionCounts::f1(tp, fp, fn_))
}

/// Geometric mean over the subset of per-mark mean absolute errors, where
/// each event contributes to the MAE of its TRUE mark. Subset marks with
/// no events are skipped; an exact mark (MAE 0) makes the result 0.
pub fn mae_geometric(
    pred_times: &[f64],
    true_times: &[f64],
    true_marks: &[usize],
    subset: &[usize],
) -> Result<f64> {
    if pred_times.len() != true_times.len() || true_times.len() != true_marks.len() {
        return Err(Error::Precondition("mismatched metric input lengths".into()));
    }
    if subset.is_empty() {
        return Err(Error::Precondition("empty mark subset".into()));
    }
    let mut maes = Vec::new();
    for &m in subset {
        let mut total = 0.0;
        let mut count = 0usize;
        for ((&p, &t), &mk) in pred_times.iter().zip(true_times).zip(true_marks) {
            if mk == m {
                total += (p - t).abs();
                count += 1;
            }
        }
        if count > 0 {
            maes.push(total / count as f64);
        }
    }
    if maes.is_empty() {
        return Err(Error::Degenerate("no subset mark has any events".into()));
    }
    if maes.iter().any(|&m| m == 0.0) {
        return Ok(0.0);
    }
    let log_mean = maes.iter().map(|m| m.ln()).sum::<f64>() / maes.len() as f64;
    Ok(log_mean.exp())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // tie group gets the average of ranks i+1 ..= j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Precondition("need two equal-length lists of length >= 2".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("zero rank variance".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Trapezoidal integral of `|f - g|` over the grid span.
pub fn l1_distance(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    if f.len() != g.len() || f.len() != grid.len() {
        return Err(Error::Precondition("mismatched curve lengths".into()));
    }
    if grid.len() < 2 {
        return Err(Error::Precondition("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Precondition("grid must be strictly increasing".into()));
    }
    let mut total = 0.0;
    for i in 1..grid.len() {
        let a = (f[i - 1] - g[i - 1]).abs();
        let b = (f[i] - g[i]).abs();
        total += 0.5 * (a + b) * (grid[i] - grid[i - 1]);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// fidelity protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub spearman: f64,
    pub l1: f64,
    pub relative_nll: f64,
    pub n_prefixes: usize,
    pub n_events: usize,
}

#[derive(Debug, Clone)]
pub struct FidelityConfig {
    /// Points per prefix curve.
    pub grid_points: usize,
    /// Oracle mass covered by the evaluation horizon.
    pub mass: f64,
    /// Cap on evaluated prefixes (deterministic subsampling).
    pub max_prefixes: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig { grid_points: 512, mass: 0.99, max_prefixes: usize::MAX }
    }
}

/// Evaluation grid over `(t_l, t_l + h]`: the first tenth of the points
/// spaced linearly to resolve the density head, the rest geometric.
pub fn fidelity_grid(t_l: f64, h: f64, n: usize) -> Vec<f64> {
    assert!(n >= 8 && h > 0.0);
    let n_head = n / 10;
    let n_tail = n - n_head;
    let head = h / 10.0;
    let mut grid = Vec::with_capacity(n);
    for i in 1..=n_head {
        grid.push(t_l + head * i as f64 / n_head as f64);
    }
    for j in 1..=n_tail {
        grid.push(t_l + head * 10f64.powf(j as f64 / n_tail as f64));
    }
    grid
}

/// Deterministic unbiased subsample of at most `cap` prefixes: a seeded
/// shuffle of all (sequence, prefix length) pairs, regrouped per sequence.
/// A plain stride would alias with fixed sequence lengths and pick the
/// same prefix positions every time.
pub(crate) fn choose_prefixes(seq_lens: &[usize], cap: usize) -> Vec<(usize, Vec<usize>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut all: Vec<(usize, usize)> = seq_lens
        .iter()
        .enumerate()
        .flat_map(|(si, &n)| (0..n).map(move |k| (si, k)))
        .collect();
    if all.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5eed);
        all.shuffle(&mut rng);
        all.truncate(cap.max(1));
        all.sort_unstable();
    }
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for (si, k) in all {
        match out.last_mut() {
            Some((last, ks)) if *last == si => ks.push(k),
            _ => out.push((si, vec![k])),
        }
    }
    out
}

/// Either the learned model or a closed-form oracle, usable
/// interchangeably in the fidelity protocol.
pub enum DensitySource<'a> {
    Oracle { spec: ProcessSpec, weights: Vec<f64> },
    Model(&'a IfnmtppModel<f64>),
}

/// Joint and marginal next-event densities for one prefix, with the
/// history conditioning and partition function precomputed.
pub struct PrefixDensity<'a> {
    iem: &'a IemParams<f64>,
    t_last: f64,
    cond_h: Array1<f64>,
    z: f64,
}

impl<'a> PrefixDensity<'a> {
    pub fn new(iem: &'a IemParams<f64>, h: &HistoryState<f64>) -> Result<Self> {
        let cond_h = iem.cond_h(h);
        let mut z = iem.eps_den;
        for m in 0..iem.n_marks() {
            let f0 = iem.input_term(m, 0.0, &cond_h);
            z += iem.sweep(&f0).sigma_dec() - iem.tail_constant_with(m, &cond_h);
        }
        if z <= 0.0 {
            return Err(Error::Numeric(format!("partition function {z} <= 0")));
        }
        Ok(PrefixDensity { iem, t_last: h.t_last, cond_h, z })
    }

    pub fn joint_pdf(&self, m: usize, t: f64) -> f64 {
        let f0 = self.iem.input_term(m, t - self.t_last, &self.cond_h);
        let (x, xt) = self.iem.sweep_with_dt(&f0, m);
        let s = x.sigma_dec();
        s * (1.0 - s) * xt / self.z
    }

    pub fn marginal_pdf(&self, t: f64) -> f64 {
        (0..self.iem.n_marks()).map(|m| self.joint_pdf(m, t)).sum()
    }
}

struct PreparedModel {
    iem: IemParams<f64>,
}

enum PreparedSource<'a> {
    Oracle { spec: ProcessSpec, weights: &'a [f64] },
    Model(PreparedModel, &'a IfnmtppModel<f64>),
}

impl DensitySource<'_> {
    fn prepare(&self) -> PreparedSource<'_> {
        match self {
            DensitySource::Oracle { spec, weights } => {
                PreparedSource::Oracle { spec: *spec, weights }
            }
            DensitySource::Model(model) => {
                PreparedSource::Model(PreparedModel { iem: model.iem() }, model)
            }
        }
    }
}

/// Per-sequence curves and per-event log densities for one source.
fn source_curves(
    prepared: &PreparedSource<'_>,
    seq: &EventSequence<f64>,
    prefixes: &[usize],
    grids: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let times: Vec<f64> = seq.events.iter().map(|e| e.time).collect();
    let floor = train::PDF_FLOOR;
    match prepared {
        PreparedSource::Oracle { spec, weights } => {
            let mut curves = Vec::with_capacity(prefixes.len());
            let mut logs = Vec::with_capacity(prefixes.len());
            for (&k, grid) in prefixes.iter().zip(grids) {
                let hist = &times[..k];
                curves.push(
                    grid.iter().map(|&t| spec.density(hist, seq.t_start, t)).collect(),
                );
                let ev = &seq.events[k];
                let joint = spec.joint_density(hist, seq.t_start, weights, ev.mark, ev.time);
                logs.push(joint.max(floor).ln());
            }
            Ok((curves, logs))
        }
        PreparedSource::Model(pm, model) => {
            let (states, _) = encode_prefixes(seq, model.encoder());
            let mut curves = Vec::with_capacity(prefixes.len());
            let mut logs = Vec::with_capacity(prefixes.len());
            for (&k, grid) in prefixes.iter().zip(grids) {
                let pd = PrefixDensity::new(&pm.iem, &states[k])?;
                curves.push(grid.iter().map(|&t| pd.marginal_pdf(t)).collect());
                let ev = &seq.events[k];
                logs.push(pd.joint_pdf(ev.mark, ev.time).max(floor).ln());
            }
            Ok((curves, logs))
        }
    }
}

/// Compares a density source against the process oracle on held-out
/// sequences: per-prefix Spearman and L1 between the marginal density
/// curves (averaged over prefixes), and the mean absolute difference of
/// per-event log joint densities.
pub fn fidelity(
    source: &DensitySource<'_>,
    spec: ProcessSpec,
    weights: &[f64],
    sequences: &[EventSequence<f64>],
    cfg: &FidelityConfig,
) -> Result<FidelityReport> {
    let total_prefixes: usize = sequences.iter().map(|s| s.events.len()).sum();
    if total_prefixes == 0 {
        return Err(Error::Degenerate("no events to evaluate".into()));
    }
    let prepared = source.prepare();
    let oracle = PreparedSource::Oracle { spec, weights };
    let lens: Vec<usize> = sequences.iter().map(|s| s.events.len()).collect();
    let assignments = choose_prefixes(&lens, cfg.max_prefixes);

    let per_seq: Vec<Result<(f64, f64, f64, usize)>> = assignments
        .par_iter()
        .map(|(si, ks)| {
            let seq = &sequences[*si];
            let times: Vec<f64> = seq.events.iter().map(|e| e.time).collect();
            let grids: Vec<Vec<f64>> = ks
                .iter()
                .map(|&k| {
                    let hist = &times[..k];
                    let h_abs = spec.horizon(hist, seq.t_start, cfg.mass)?;
                    let t_l = if k == 0 { seq.t_start } else { times[k - 1] };
                    Ok(fidelity_grid(t_l, (h_abs - t_l).max(1e-9), cfg.grid_points))
                })
                .collect::<Result<_>>()?;
            let (learned, learned_logs) = source_curves(&prepared, seq, ks, &grids)?;
            let (truth, truth_logs) = source_curves(&oracle, seq, ks, &grids)?;
            let mut rho_sum = 0.0;
            let mut l1_sum = 0.0;
            let mut nll_sum = 0.0;
            for i in 0..ks.len() {
                rho_sum += spearman(&learned[i], &truth[i])?;
                l1_sum += l1_distance(&learned[i], &truth[i], &grids[i])?;
                nll_sum += (learned_logs[i] - truth_logs[i]).abs();
            }
            Ok((rho_sum, l1_sum, nll_sum, ks.len()))
        })
        .collect();

    let mut rho = 0.0;
    let mut l1 = 0.0;
    let mut nll = 0.0;
    let mut count = 0usize;
    for part in per_seq {
        let (r, l, d, c) = part?;
        rho += r;
        l1 += l;
        nll += d;
        count += c;
    }
    Ok(FidelityReport {
        spearman: rho / count as f64,
        l1: l1 / count as f64,
        relative_nll: nll / count as f64,
        n_prefixes: count,
        n_events: count,
    })
}

/// Mean per-event negative log joint density on held-out data (the
/// survival term is excluded).
pub fn eval_nll(model: &IfnmtppModel<f64>, ds: &Dataset<f64>) -> Result<f64> {
    let bd = train::dataset_nll(&ds.sequences, model)?;
    if bd.n_events == 0 {
        return Err(Error::Degenerate("no events".into()));
    }
    Ok(bd.event_term / bd.n_events as f64)
}
