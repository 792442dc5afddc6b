//! Command-line surface: experiment configuration, the
//! generate / preprocess / train / calibrate / evaluate / fidelity
//! pipeline, and result export. Every command is a pure function of
//! (config, input files, seed), so reruns produce identical outputs.

use crate::data::{
    compute_prior, load_jsonl, normalize_times, partition_marks, save_jsonl, Dataset,
    EventSequence, NormalizationStats, Split,
};
use crate::encoder::encode_prefixes;
use crate::error::{Error, Result};
use crate::iem::IemParams;
use crate::metrics::{self, DensitySource, FidelityConfig, PrefixDensity};
use crate::model::{Checkpoint, IfnmtppModel, ModelDims};
use crate::sampling::{self, SampleConfig};
use crate::synth::{generate_splits, GenConfig, ProcessSpec, N_MARKS};
use crate::threshold::{self, ThresholdTable};
use crate::train::{self, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Full experiment configuration; JSON file fields, all optional, with
/// command-line flags applied on top.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic process name: hawkes_1, hawkes_2, poisson, self_correct, renewal.
    pub process: String,
    /// Per-mark draw weights; uniform over 5 marks when omitted.
    pub mark_weights: Option<Vec<f64>>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub n_layers: usize,
    pub total_steps: usize,
    /// Warmup steps; omitted means total_steps / 5.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validate_every: usize,
    pub n_samples: usize,
    pub u_max: f64,
    pub bisection_tol: f64,
    pub max_bisection_iters: usize,
    pub rare_marks: Vec<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Apply the train-split mean/std transform (requires `preprocess`).
    pub normalize: bool,
    /// Prefix caps keep sampling-heavy stages tractable; subsampling is a
    /// deterministic stride over the prefix stream.
    pub eval_max_prefixes: usize,
    pub calib_max_prefixes: usize,
    pub calib_time_max_prefixes: usize,
    pub fidelity_max_prefixes: usize,
    pub grid_points: usize,
    pub fidelity_mass: f64,
    /// How many per-prefix curve CSVs `fidelity` exports.
    pub curve_csv_prefixes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            process: "hawkes_1".into(),
            mark_weights: None,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            seq_len: 100,
            d_h: 32,
            d_f: 64,
            n_layers: 3,
            total_steps: 100_000,
            warmup_steps: None,
            batch_size: 32,
            learning_rate: 2e-3,
            validate_every: 500,
            n_samples: 100,
            u_max: 0.9,
            bisection_tol: 1e-6,
            max_bisection_iters: 200,
            rare_marks: Vec::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            normalize: false,
            eval_max_prefixes: 1000,
            calib_max_prefixes: 20_000,
            calib_time_max_prefixes: 500,
            fidelity_max_prefixes: 200,
            grid_points: 512,
            fidelity_mass: 0.99,
            curve_csv_prefixes: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_f == 0 || self.n_layers == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.validate_every == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        self.spec()?.validate()?;
        if let Some(w) = &self.mark_weights {
            if w.is_empty() || w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("invalid mark weights".into()));
            }
        }
        if self.rare_marks.iter().any(|&m| m >= self.n_marks()) {
            return Err(Error::Config("rare mark id out of range".into()));
        }
        self.sample_config().validate()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ProcessSpec> {
        ProcessSpec::from_name(&self.process)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.mark_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / N_MARKS as f64; N_MARKS])
    }

    pub fn n_marks(&self) -> usize {
        self.weights().len()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.n_marks(), self.d_h, self.d_f, self.n_layers)
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut g = GenConfig::new(self.spec().expect("validated"), self.seq_len);
        g.mark_weights = self.weights();
        g
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps.unwrap_or(self.total_steps / 5),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            validate_every: self.validate_every,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            n_samples: self.n_samples,
            u_max: self.u_max,
            bisection_tol: self.bisection_tol,
            max_bisection_iters: self.max_bisection_iters,
            rng_seed: self.seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Debug, Parser)]
#[command(name = "ifnmtpp", about = "Marked temporal point process toolkit", version)]
pub struct CliArgs {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate synthetic event sequences and write JSONL splits.
    Generate(CommonArgs),
    /// Compute train-split time statistics and write normalized splits.
    Preprocess(CommonArgs),
    /// Train a model; writes a checkpoint and a training curve CSV.
    Train(CommonArgs),
    /// Calibrate per-mark decision thresholds on the training split.
    Calibrate(CommonArgs),
    /// Score mark and time predictions on the test split.
    Evaluate(CommonArgs),
    /// Compare the learned density against the process oracle.
    Fidelity(CommonArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// hawkes_1 | hawkes_2 | poisson | self_correct | renewal
    #[arg(long)]
    pub process: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CI profile: d_h=8, d_f=8, L=2, 2000 steps.
    #[arg(long)]
    pub tiny: bool,
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if args.tiny {
        cfg.d_h = 8;
        cfg.d_f = 8;
        cfg.n_layers = 2;
        cfg.total_steps = 2000;
        cfg.warmup_steps = None;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(process) = &args.process {
        cfg.process = process.clone();
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
        if cfg.warmup_steps.map_or(false, |w| w >= steps) {
            cfg.warmup_steps = None;
        }
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Json(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

/// Parses the command line, runs the command, and returns the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match CliArgs::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version via "errors" that should exit 0
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => load_config(a).and_then(|c| cmd_generate(&c)),
        Command::Preprocess(a) => load_config(a).and_then(|c| cmd_preprocess(&c)),
        Command::Train(a) => load_config(a).and_then(|c| cmd_train(&c)),
        Command::Calibrate(a) => load_config(a).and_then(|c| cmd_calibrate(&c)),
        Command::Evaluate(a) => load_config(a).and_then(|c| cmd_evaluate(&c)),
        Command::Fidelity(a) => load_config(a).and_then(|c| cmd_fidelity(&c)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn load_split(cfg: &ExperimentConfig, name: &str, split: Split) -> Result<Dataset<f64>> {
    load_jsonl(cfg.path(name), split)
}

fn load_stats(cfg: &ExperimentConfig) -> Result<NormalizationStats> {
    if !cfg.normalize {
        return Ok(NormalizationStats::identity());
    }
    let text = std::fs::read_to_string(cfg.path("stats.json"))
        .map_err(|e| Error::Data(format!("missing stats.json (run preprocess first): {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

fn model_space(ds: &Dataset<f64>, stats: &NormalizationStats) -> Result<Dataset<f64>> {
    Ok(normalize_times(ds, Some(*stats))?.0)
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<(IfnmtppModel<f64>, NormalizationStats)> {
    let ckpt = Checkpoint::load(cfg.path("model.json"))?;
    Ok((ckpt.to_model()?, ckpt.stats))
}

/// Deterministic unbiased subsample of at most `cap` prefixes, as
/// `(sequence index, prefix lengths)` pairs. A prefix of length k
/// predicts event k, so k < n.
fn subsample_prefixes(seqs: &[EventSequence<f64>], cap: usize) -> Vec<(usize, Vec<usize>)> {
    let lens: Vec<usize> = seqs.iter().map(|s| s.events.len()).collect();
    metrics::choose_prefixes(&lens, cap)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    crate::write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let (train, val, test) =
        generate_splits(&cfg.gen_config(), cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)?;
    save_jsonl(&train, cfg.path("train.jsonl"))?;
    save_jsonl(&val, cfg.path("val.jsonl"))?;
    save_jsonl(&test, cfg.path("test.jsonl"))?;
    println!(
        "generated {} sequences ({} train / {} val / {} test) from {}",
        cfg.n_train + cfg.n_val + cfg.n_test,
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.process
    );
    Ok(())
}

pub fn cmd_preprocess(cfg: &ExperimentConfig) -> Result<()> {
    let train = load_split(cfg, "train.jsonl", Split::Train)?;
    let (train_norm, stats) = normalize_times(&train, None)?;
    for (input, output) in [("val.jsonl", "val_norm.jsonl"), ("test.jsonl", "test_norm.jsonl")] {
        let ds = load_split(cfg, input, Split::Val)?;
        save_jsonl(&normalize_times(&ds, Some(stats))?.0, cfg.path(output))?;
    }
    save_jsonl(&train_norm, cfg.path("train_norm.jsonl"))?;
    write_json(&cfg.path("stats.json"), &stats)?;
    println!("stats: mean {} std {}", stats.mean, stats.std);
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let stats = load_stats(cfg)?;
    let train_ds = model_space(&load_split(cfg, "train.jsonl", Split::Train)?, &stats)?;
    let val_ds = model_space(&load_split(cfg, "val.jsonl", Split::Val)?, &stats)?;
    let outcome = train::train(&train_ds, &val_ds, cfg.dims(), &cfg.train_config())?;

    let ckpt = Checkpoint::from_model(&outcome.model, stats, serde_json::to_value(cfg)?);
    ckpt.save(cfg.path("model.json"))?;
    let rows: Vec<String> = outcome
        .history
        .iter()
        .map(|r| format!("{},{},{}", r.step, r.train_nll, r.val_nll))
        .collect();
    write_csv(&cfg.path("training.csv"), "step,train_nll,val_nll", &rows)?;
    println!("best validation NLL/event: {}", outcome.best_val_nll);
    Ok(())
}

/// Mark-first and time-first threshold tables, calibrated on the
/// training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdBundle {
    pub mark_first: ThresholdTable,
    pub time_first: ThresholdTable,
}

impl ThresholdBundle {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-prefix score vectors `p*(m)` with their true next marks.
fn mark_scores(
    model: &IfnmtppModel<f64>,
    iem: &IemParams<f64>,
    seqs: &[EventSequence<f64>],
    cap: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let work = subsample_prefixes(seqs, cap);
    let parts: Vec<Result<(Vec<Vec<f64>>, Vec<usize>)>> = work
        .par_iter()
        .map(|(si, ks)| {
            let seq = &seqs[*si];
            let (states, _) = encode_prefixes(seq, model.encoder());
            let mut scores = Vec::with_capacity(ks.len());
            let mut labels = Vec::with_capacity(ks.len());
            for &k in ks {
                scores.push(iem.mark_prob(&states[k])?);
                labels.push(seq.events[k].mark);
            }
            Ok((scores, labels))
        })
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for part in parts {
        let (s, l) = part?;
        scores.extend(s);
        labels.extend(l);
    }
    Ok((scores, labels))
}

/// Per-prefix posteriors `p*(m | t̄)` at the predicted time, plus the
/// predicted times themselves (original units) and true next marks.
fn time_first_scores(
    model: &IfnmtppModel<f64>,
    iem: &IemParams<f64>,
    seqs: &[EventSequence<f64>],
    cap: usize,
    sample_cfg: &SampleConfig,
    stats: &NormalizationStats,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)> {
    let identity = NormalizationStats::identity();
    let work = subsample_prefixes(seqs, cap);
    let parts: Vec<Result<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)>> = work
        .par_iter()
        .map(|(si, ks)| {
            let seq = &seqs[*si];
            let (states, _) = encode_prefixes(seq, model.encoder());
            let mut scores = Vec::with_capacity(ks.len());
            let mut times = Vec::with_capacity(ks.len());
            let mut labels = Vec::with_capacity(ks.len());
            for &k in ks {
                let h = &states[k];
                // stay in model time for the posterior query
                let t_bar = sampling::predict_time_marginal(iem, h, sample_cfg, &identity)?;
                scores.push(sampling::mark_given_time(iem, h, t_bar)?);
                times.push(stats.denormalize(t_bar));
                labels.push(seq.events[k].mark);
            }
            Ok((scores, times, labels))
        })
        .collect();
    let mut scores = Vec::new();
    let mut times = Vec::new();
    let mut labels = Vec::new();
    for part in parts {
        let (s, t, l) = part?;
        scores.extend(s);
        times.extend(t);
        labels.extend(l);
    }
    Ok((scores, times, labels))
}

fn to_ratio_rows(scores: &[Vec<f64>], prior: &[f64]) -> Result<Vec<Vec<f64>>> {
    scores.iter().map(|s| threshold::ratios(s, prior)).collect()
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<()> {
    let (model, stats) = load_checkpoint(cfg)?;
    let train_ds = model_space(&load_split(cfg, "train.jsonl", Split::Train)?, &stats)?;
    let prior = compute_prior(&train_ds)?;
    let iem = model.iem();

    let (scores, labels) = mark_scores(&model, &iem, &train_ds.sequences, cfg.calib_max_prefixes)?;
    let mark_first =
        threshold::calibrate(&to_ratio_rows(&scores, &prior)?, &labels, prior.clone())?;

    let (t_scores, _, t_labels) = time_first_scores(
        &model,
        &iem,
        &train_ds.sequences,
        cfg.calib_time_max_prefixes,
        &cfg.sample_config(),
        &stats,
    )?;
    let time_first =
        threshold::calibrate(&to_ratio_rows(&t_scores, &prior)?, &t_labels, prior.clone())?;

    let bundle = ThresholdBundle { mark_first, time_first };
    bundle.save(cfg.path("thresholds.json"))?;
    println!("calibrated thresholds for {} marks", prior.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: String,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub rows: Vec<SubsetRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub n_prefixes: usize,
    pub methods: Vec<MethodReport>,
}

fn subset_rows(
    preds: &[usize],
    labels: &[usize],
    pred_times: &[f64],
    true_times: &[f64],
    subsets: &[(&str, Vec<usize>)],
    n_marks: usize,
) -> Result<Vec<SubsetRow>> {
    subsets
        .iter()
        .map(|(name, marks)| {
            if marks.is_empty() {
                return Ok(SubsetRow {
                    subset: name.to_string(),
                    macro_f1: None,
                    micro_f1: None,
                    mae: None,
                });
            }
            Ok(SubsetRow {
                subset: name.to_string(),
                macro_f1: Some(metrics::macro_f1(preds, labels, marks, n_marks)?),
                micro_f1: Some(metrics::micro_f1(preds, labels, marks, n_marks)?),
                mae: metrics::mae_geometric(pred_times, true_times, labels, marks).ok(),
            })
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let (model, stats) = load_checkpoint(cfg)?;
    let thresholds = ThresholdBundle::load(cfg.path("thresholds.json"))?;
    let test_raw = load_split(cfg, "test.jsonl", Split::Test)?;
    let test_ds = model_space(&test_raw, &stats)?;
    let n_marks = test_ds.vocab_size;
    let rare: BTreeSet<usize> = cfg.rare_marks.iter().copied().collect();
    let partition = partition_marks(&test_ds, &rare)?;
    let iem = model.iem();
    let sample_cfg = cfg.sample_config();

    // mark-first: p*(m) scores plus the mark-conditional time prediction
    // for the true mark (the time error protocol scores t̄ at true marks)
    let work = subsample_prefixes(&test_ds.sequences, cfg.eval_max_prefixes);
    struct PrefixEval {
        pm: Vec<f64>,
        label: usize,
        true_time: f64,
        t_cond: f64,
        pm_at_tbar: Vec<f64>,
        t_marginal: f64,
    }
    let identity = NormalizationStats::identity();
    let parts: Vec<Result<Vec<PrefixEval>>> = work
        .par_iter()
        .map(|(si, ks)| {
            let seq = &test_ds.sequences[*si];
            let raw_seq = &test_raw.sequences[*si];
            let (states, _) = encode_prefixes(seq, model.encoder());
            ks.iter()
                .map(|&k| {
                    let h = &states[k];
                    let label = seq.events[k].mark;
                    let t_cond =
                        sampling::predict_time(&iem, h, label, &sample_cfg, &stats)?;
                    let t_bar =
                        sampling::predict_time_marginal(&iem, h, &sample_cfg, &identity)?;
                    Ok(PrefixEval {
                        pm: iem.mark_prob(h)?,
                        label,
                        true_time: raw_seq.events[k].time,
                        t_cond,
                        pm_at_tbar: sampling::mark_given_time(&iem, h, t_bar)?,
                        t_marginal: stats.denormalize(t_bar),
                    })
                })
                .collect()
        })
        .collect();
    let mut evals = Vec::new();
    for part in parts {
        evals.extend(part?);
    }
    if evals.is_empty() {
        return Err(Error::Degenerate("no test prefixes to evaluate".into()));
    }

    let labels: Vec<usize> = evals.iter().map(|e| e.label).collect();
    let true_times: Vec<f64> = evals.iter().map(|e| e.true_time).collect();
    let cond_times: Vec<f64> = evals.iter().map(|e| e.t_cond).collect();
    let marg_times: Vec<f64> = evals.iter().map(|e| e.t_marginal).collect();

    fn mark_preds(
        evals: &[PrefixEval],
        time_first: bool,
        table: Option<&ThresholdTable>,
    ) -> Result<Vec<usize>> {
        evals
            .iter()
            .map(|e| {
                let scores = if time_first { &e.pm_at_tbar } else { &e.pm };
                match table {
                    Some(t) => {
                        threshold::predict_mark(&threshold::ratios(scores, &t.prior)?, t)
                    }
                    None => Ok(threshold::predict_mark_plain(scores)),
                }
            })
            .collect()
    }
    let methods: Vec<(&str, Vec<usize>, &[f64])> = vec![
        (
            "mark_first_thresholded",
            mark_preds(&evals, false, Some(&thresholds.mark_first))?,
            &cond_times,
        ),
        ("mark_first_plain", mark_preds(&evals, false, None)?, &cond_times),
        (
            "time_first_thresholded",
            mark_preds(&evals, true, Some(&thresholds.time_first))?,
            &marg_times,
        ),
        ("time_first_plain", mark_preds(&evals, true, None)?, &marg_times),
    ];

    let subsets: Vec<(&str, Vec<usize>)> = vec![
        ("all", (0..n_marks).collect()),
        ("rare", partition.rare.iter().copied().collect()),
        ("frequent", partition.frequent.iter().copied().collect()),
    ];
    let mut report = EvalReport {
        nll: metrics::eval_nll(&model, &test_ds)?,
        n_prefixes: evals.len(),
        methods: Vec::new(),
    };
    let mut csv_rows = Vec::new();
    for (name, preds, times) in &methods {
        let rows = subset_rows(preds, &labels, times, &true_times, &subsets, n_marks)?;
        for r in &rows {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv_rows.push(format!(
                "{name},{},{},{},{}",
                r.subset,
                fmt(r.macro_f1),
                fmt(r.micro_f1),
                fmt(r.mae)
            ));
        }
        report.methods.push(MethodReport { method: name.to_string(), rows });
    }
    write_json(&cfg.path("report.json"), &report)?;
    write_csv(&cfg.path("report.csv"), "method,subset,macro_f1,micro_f1,mae", &csv_rows)?;
    println!(
        "evaluated {} prefixes; NLL/event {}",
        report.n_prefixes, report.nll
    );
    Ok(())
}

pub fn cmd_fidelity(cfg: &ExperimentConfig) -> Result<()> {
    let (model, stats) = load_checkpoint(cfg)?;
    if stats.mean != 0.0 || stats.std != 1.0 {
        return Err(Error::Config(
            "fidelity requires a model trained on raw times (normalize = false)".into(),
        ));
    }
    let test_ds = load_split(cfg, "test.jsonl", Split::Test)?;
    let spec = cfg.spec()?;
    let weights = cfg.weights();
    let fcfg = FidelityConfig {
        grid_points: cfg.grid_points,
        mass: cfg.fidelity_mass,
        max_prefixes: cfg.fidelity_max_prefixes,
    };
    let source = DensitySource::Model(&model);
    let report = metrics::fidelity(&source, spec, &weights, &test_ds.sequences, &fcfg)?;
    write_json(&cfg.path("fidelity.json"), &report)?;

    // export the first few prefix curves of the first sequence for plotting
    let curves_dir = cfg.path("curves");
    if let Some(seq) = test_ds.sequences.first() {
        let iem = model.iem();
        let (states, _) = encode_prefixes(seq, model.encoder());
        let times: Vec<f64> = seq.events.iter().map(|e| e.time).collect();
        for k in 0..cfg.curve_csv_prefixes.min(seq.events.len()) {
            let hist = &times[..k];
            let h_abs = spec.horizon(hist, seq.t_start, cfg.fidelity_mass)?;
            let t_l = if k == 0 { seq.t_start } else { times[k - 1] };
            let grid = metrics::fidelity_grid(t_l, (h_abs - t_l).max(1e-9), cfg.grid_points);
            let pd = PrefixDensity::new(&iem, &states[k])?;
            let mut rows = Vec::with_capacity(grid.len());
            for &t in &grid {
                let mut row = String::new();
                write!(
                    row,
                    "{t},{},{}",
                    pd.marginal_pdf(t),
                    spec.density(hist, seq.t_start, t)
                )
                .expect("string write");
                rows.push(row);
            }
            write_csv(&curves_dir.join(format!("prefix_{k:03}.csv")), "t,learned,oracle", &rows)?;
        }
    }
    println!(
        "fidelity: spearman {} l1 {} relative_nll {}",
        report.spearman, report.l1, report.relative_nll
    );
    Ok(())
}

/// Imbalanced-data helper shared by tests: rare-subset macro-F1 with and
/// without thresholding, calibrated on train and scored on test.
pub fn rare_macro_f1_with_without(
    model: &IfnmtppModel<f64>,
    train_ds: &Dataset<f64>,
    test_ds: &Dataset<f64>,
    rare: &[usize],
    cap: usize,
) -> Result<(f64, f64)> {
    let iem = model.iem();
    let prior = compute_prior(train_ds)?;
    let (scores, labels) = mark_scores(model, &iem, &train_ds.sequences, cap)?;
    let table = threshold::calibrate(&to_ratio_rows(&scores, &prior)?, &labels, prior.clone())?;
    let (test_scores, test_labels) = mark_scores(model, &iem, &test_ds.sequences, cap)?;
    let with: Vec<usize> = test_scores
        .iter()
        .map(|s| threshold::predict_mark(&threshold::ratios(s, &table.prior)?, &table))
        .collect::<Result<_>>()?;
    let without: Vec<usize> = test_scores.iter().map(|s| threshold::predict_mark_plain(s)).collect();
    let n_marks = train_ds.vocab_size;
    Ok((
        metrics::macro_f1(&with, &test_labels, rare, n_marks)?,
        metrics::macro_f1(&without, &test_labels, rare, n_marks)?,
    ))
}
