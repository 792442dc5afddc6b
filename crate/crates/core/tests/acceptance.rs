//! Acceptance gate: eleven end-to-end criteria, each printing one
//! PASS/FAIL line. Criteria 5 and 6 train at realistic widths and run
//! for tens of minutes on a single core.

use ifnmtpp::data::{Dataset, Split};
use ifnmtpp::encoder::HistoryState;
use ifnmtpp::iem::IemParams;
use ifnmtpp::metrics::{self, DensitySource, FidelityConfig};
use ifnmtpp::model::{IfnmtppModel, ModelDims};
use ifnmtpp::quad::adaptive_simpson;
use ifnmtpp::sampling::{self, CondSampler, SampleConfig};
use ifnmtpp::synth::{generate_splits, simulate, GenConfig, ProcessSpec, N_MARKS};
use ifnmtpp::threshold::{self, ThresholdTable};
use ifnmtpp::train::{self, TrainConfig};
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:2} ({name}): {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_state(d_h: usize, t_last: f64, rng: &mut ChaCha8Rng) -> HistoryState<f64> {
    HistoryState {
        h: Array1::from_shape_fn(d_h, |_| rng.gen_range(-1.0..1.0)),
        t_last,
    }
}

fn random_iem(seed: u64) -> IemParams<f64> {
    IemParams::random_nonneg(5, 8, 6, 2, seed)
}

#[test]
fn criterion_01_gradient_exactness() {
    let start = Instant::now();
    let dims = ModelDims { n_marks: 2, d_e: 3, d_h: 3, d_f: 4, n_layers: 2 };
    let model = IfnmtppModel::<f64>::init(dims, 17);
    let seqs = vec![
        synth_seq(&[0.3, 0.9, 1.6, 2.4], &[0, 1, 0, 1], 3.0),
        synth_seq(&[0.5, 1.2, 2.0], &[1, 1, 0], 2.5),
    ];
    let batch: Vec<&ifnmtpp::EventSequence> = seqs.iter().collect();
    let (grads, _) = train::loss_gradients(&batch, &model).unwrap();

    let loss = |m: &IfnmtppModel<f64>| -> f64 {
        batch.iter().map(|s| train::nll_loss(s, m).unwrap().total).sum::<f64>()
            / batch.len() as f64
    };
    let step = 1e-5;
    let mut max_rel = 0.0f64;
    let n_slices = grads.slices().len();
    for si in 0..n_slices {
        for i in 0..grads.slices()[si].len() {
            let mut plus = model.clone();
            plus.raw.slices_mut()[si][i] += step;
            let mut minus = model.clone();
            minus.raw.slices_mut()[si][i] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let g = grads.slices()[si][i];
            max_rel = max_rel.max((g - fd).abs() / fd.abs().max(1e-5));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient exactness",
        max_rel <= 1e-4 && elapsed < 10.0,
        &format!("max relative error {max_rel:.3e}, {elapsed:.2} s"),
    );
}

fn synth_seq(times: &[f64], marks: &[usize], t_end: f64) -> ifnmtpp::EventSequence {
    ifnmtpp::EventSequence {
        events: times
            .iter()
            .zip(marks)
            .map(|(&time, &mark)| ifnmtpp::Event { mark, time })
            .collect(),
        t_start: 0.0,
        t_end,
    }
}

#[test]
fn criterion_02_normalization_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for draw in 0..1000 {
        let iem = random_iem(draw);
        let h = random_state(6, rng.gen_range(0.0..5.0), &mut rng);
        let total: f64 = iem.mark_prob(&h).unwrap().iter().sum();
        worst = worst.max((total - 1.0).abs());
    }
    report(
        2,
        "mark probabilities sum to one",
        worst <= 1e-9,
        &format!("max |sum - 1| = {worst:.3e} over 1000 draws"),
    );
}

#[test]
fn criterion_03_monotonicity_and_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0usize;
    let mut max_tail = 0.0f64;
    for trial in 0..20 {
        let iem = random_iem(1000 + trial);
        let h = random_state(6, rng.gen_range(0.0..3.0), &mut rng);
        for _ in 0..500 {
            let a = h.t_last + rng.gen_range(0.0..10.0);
            let b = a + rng.gen_range(1e-6..10.0);
            let ga = iem.gamma(a, &h).unwrap().gamma;
            let gb = iem.gamma(b, &h).unwrap().gamma;
            for m in 0..5 {
                if gb[m] > ga[m] + 1e-12 {
                    violations += 1;
                }
            }
        }
        let far = iem.gamma(h.t_last + 1e6, &h).unwrap().gamma;
        for m in 0..5 {
            max_tail = max_tail.max(far[m]);
        }
    }
    report(
        3,
        "monotone integral with vanishing tail",
        violations == 0 && max_tail <= 1e-6,
        &format!("{violations} violations over 10000 pairs, max tail {max_tail:.3e}"),
    );
}

#[test]
fn criterion_04_sampler_round_trip() {
    let cfg = SampleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for draw in 0..1000u64 {
        let iem = random_iem(2000 + draw);
        let h = random_state(6, rng.gen_range(0.0..4.0), &mut rng);
        let m = rng.gen_range(0..5);
        let u = rng.gen_range(1e-6..0.9);
        let t = sampling::sample_time(&iem, &h, m, u, &cfg).unwrap();
        let back = CondSampler::new(&iem, &h).cond_cdf(m, t).unwrap();
        worst = worst.max((back - u).abs());
    }
    report(
        4,
        "inverse-transform round trip",
        worst <= 1e-6,
        &format!("max |F(t|m) - u| = {worst:.3e} over 1000 draws, iteration cap 200"),
    );
}

fn desk_scale_fidelity(spec: ProcessSpec, seed: u64) -> (metrics::FidelityReport, f64) {
    let start = Instant::now();
    let gen = GenConfig::new(spec, 100);
    let (train_ds, val_ds, test_ds) = generate_splits(&gen, 2000, 400, 400, seed).unwrap();
    let cfg = TrainConfig {
        total_steps: 5000,
        warmup_steps: 1000,
        batch_size: 32,
        learning_rate: 2e-3,
        validate_every: 500,
        seed,
        ..TrainConfig::default()
    };
    let dims = ModelDims::new(N_MARKS, 32, 64, 3);
    let outcome = train::train(&train_ds, &val_ds, dims, &cfg).unwrap();
    let weights = gen.mark_weights.clone();
    let fcfg = FidelityConfig { grid_points: 512, mass: 0.99, max_prefixes: 200 };
    let source = DensitySource::Model(&outcome.model);
    let rep = metrics::fidelity(&source, spec, &weights, &test_ds.sequences, &fcfg).unwrap();
    (rep, start.elapsed().as_secs_f64())
}

#[test]
fn criterion_05_poisson_fidelity() {
    let (rep, secs) = desk_scale_fidelity(ProcessSpec::poisson(), 5);
    report(
        5,
        "Poisson fidelity at desk scale",
        rep.spearman >= 0.99 && rep.l1 <= 0.10 && rep.relative_nll <= 0.02 && secs <= 1800.0,
        &format!(
            "spearman {:.4}, l1 {:.4}, relative nll {:.4}, {:.0} s",
            rep.spearman, rep.l1, rep.relative_nll, secs
        ),
    );
}

#[test]
fn criterion_06_hawkes_fidelity() {
    let (rep, secs) = desk_scale_fidelity(ProcessSpec::hawkes_1(), 6);
    report(
        6,
        "Hawkes fidelity at desk scale",
        rep.spearman >= 0.99 && rep.l1 <= 0.5 && rep.relative_nll <= 0.02 && secs <= 1800.0,
        &format!(
            "spearman {:.4}, l1 {:.4}, relative nll {:.4}, {:.0} s",
            rep.spearman, rep.l1, rep.relative_nll, secs
        ),
    );
}

#[test]
fn criterion_07_threshold_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_marks = 3;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(5..60);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n_marks).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_marks)).collect();
        let prior = vec![1.0 / n_marks as f64; n_marks];
        let table = threshold::calibrate(&scores, &labels, prior).unwrap();
        for m in 0..n_marks {
            // exhaustive breakpoint search: predict positive iff score >= v
            let mut best = 0.0f64;
            let mut candidates: Vec<f64> = scores.iter().map(|s| s[m]).collect();
            candidates.push(f64::INFINITY);
            for &v in &candidates {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (s, &l) in scores.iter().zip(&labels) {
                    let pos = s[m] >= v;
                    match (pos, l == m) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                let f1 = if 2 * tp + fp + fn_ == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
                };
                best = best.max(f1);
            }
            worst = worst.max((table.f1[m] - best).abs());

            // the stored epsilon must attain the stored F1
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (s, &l) in scores.iter().zip(&labels) {
                let pos = s[m] > table.epsilon[m];
                match (pos, l == m) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let attained = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            worst = worst.max((attained - table.f1[m]).abs());
        }
    }
    report(
        7,
        "threshold search matches exhaustive oracle",
        worst <= 1e-12,
        &format!("max F1 gap {worst:.3e} over 100 sets"),
    );
}

#[test]
fn criterion_08_imbalance_directional_check() {
    let weights = vec![0.7, 0.2, 0.05, 0.03, 0.02];
    let rare = vec![2usize, 3, 4];
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in [81u64, 82, 83] {
        let mut gen = GenConfig::new(ProcessSpec::hawkes_1(), 50);
        gen.mark_weights = weights.clone();
        let (train_ds, val_ds, test_ds) = generate_splits(&gen, 300, 60, 60, seed).unwrap();
        let cfg = TrainConfig {
            total_steps: 800,
            warmup_steps: 160,
            batch_size: 32,
            learning_rate: 2e-3,
            validate_every: 200,
            seed,
            ..TrainConfig::default()
        };
        let dims = ModelDims::new(N_MARKS, 8, 8, 2);
        let outcome = train::train(&train_ds, &val_ds, dims, &cfg).unwrap();
        let (with, without) = ifnmtpp::cli::rare_macro_f1_with_without(
            &outcome.model,
            &train_ds,
            &test_ds,
            &rare,
            4000,
        )
        .unwrap();
        if with >= without {
            wins += 1;
        }
        details.push(format!("seed {seed}: {with:.4} vs {without:.4}"));
    }
    report(
        8,
        "thresholding helps rare marks",
        wins >= 2,
        &format!("{wins}/3 seeds in favor ({})", details.join("; ")),
    );
}

#[test]
fn criterion_09_oracle_self_consistency() {
    let specs = [
        ProcessSpec::hawkes_1(),
        ProcessSpec::hawkes_2(),
        ProcessSpec::poisson(),
        ProcessSpec::self_correct(),
        ProcessSpec::renewal(),
    ];
    let weights = vec![0.2; N_MARKS];
    let mut worst_rho: f64 = 1.0;
    let mut worst_l1 = 0.0f64;
    let mut worst_nll = 0.0f64;
    let mut worst_quad = 0.0f64;
    for spec in specs {
        let gen = GenConfig::new(spec, 40);
        let seqs: Vec<_> = (0..3).map(|s| simulate(&gen, 900 + s).unwrap()).collect();
        let source = DensitySource::Oracle { spec, weights: weights.clone() };
        let fcfg = FidelityConfig { grid_points: 128, ..FidelityConfig::default() };
        let rep = metrics::fidelity(&source, spec, &weights, &seqs, &fcfg).unwrap();
        worst_rho = worst_rho.min(rep.spearman);
        worst_l1 = worst_l1.max(rep.l1);
        worst_nll = worst_nll.max(rep.relative_nll);

        // compensator: closed form vs adaptive quadrature
        for seq in &seqs {
            let times: Vec<f64> = seq.events.iter().map(|e| e.time).collect();
            for &k in &[0usize, times.len() / 2, times.len() - 1] {
                let hist = &times[..k];
                let t_l = if k == 0 { seq.t_start } else { times[k - 1] };
                for dt in [0.3, 1.7] {
                    let exact = spec.cum_intensity(hist, seq.t_start, t_l + dt);
                    let quad = adaptive_simpson(
                        &|t| spec.intensity(hist, seq.t_start, t),
                        t_l,
                        t_l + dt,
                        1e-12,
                    ) + spec.cum_intensity(hist, seq.t_start, t_l);
                    worst_quad = worst_quad.max((exact - quad).abs());
                }
            }
        }
    }
    report(
        9,
        "oracle self-consistency",
        worst_rho == 1.0 && worst_l1 <= 1e-6 && worst_nll <= 1e-9 && worst_quad <= 1e-8,
        &format!(
            "spearman {worst_rho}, l1 {worst_l1:.2e}, relative nll {worst_nll:.2e}, quadrature gap {worst_quad:.2e}"
        ),
    );
}

#[test]
fn criterion_10_hawkes_long_run_rate() {
    let gen = GenConfig::new(ProcessSpec::hawkes_1(), 1000);
    let mut events = 0usize;
    let mut span = 0.0;
    for seed in 0..100u64 {
        let seq = simulate(&gen, 7000 + seed).unwrap();
        events += seq.events.len();
        span += seq.t_end - seq.t_start;
    }
    let rate = events as f64 / span;
    // stationary rate mu0 / (1 - a/b) = 0.2 / 0.2 = 1
    report(
        10,
        "Hawkes simulator long-run rate",
        (rate - 1.0).abs() <= 0.05 && events >= 100_000,
        &format!("empirical rate {rate:.4} over {events} events"),
    );
}

#[test]
fn criterion_11_zero_threshold_equivalence() {
    let gen = GenConfig::new(ProcessSpec::poisson(), 30);
    let seqs: Vec<_> = (0..20).map(|s| simulate(&gen, 1100 + s).unwrap()).collect();
    let ds = Dataset { sequences: seqs, vocab_size: N_MARKS, split: Split::Test };
    let uniform = vec![1.0 / N_MARKS as f64; N_MARKS];
    let table = ThresholdTable::zero(uniform);
    let model = IfnmtppModel::<f64>::init(ModelDims::new(N_MARKS, 8, 8, 2), 23);
    let iem = model.iem();
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for seq in &ds.sequences {
        let (states, _) = ifnmtpp::encoder::encode_prefixes(seq, model.encoder());
        for k in 0..seq.events.len() {
            let pm = iem.mark_prob(&states[k]).unwrap();
            let plain = threshold::predict_mark_plain(&pm);
            let r = threshold::ratios(&pm, &table.prior).unwrap();
            let thresholded = threshold::predict_mark(&r, &table).unwrap();
            if plain != thresholded {
                mismatches += 1;
            }
            total += 1;
        }
    }
    report(
        11,
        "zero thresholds reduce to argmax",
        mismatches == 0,
        &format!("{mismatches} mismatches over {total} prefixes"),
    );
}
