//! Inverse-transform sampling of the next event time by bisection on the
//! learned conditional CDF, mark-conditional and marginal time prediction,
//! and the time-first mark posterior.

use crate::data::NormalizationStats;
use crate::encoder::HistoryState;
use crate::error::{Error, Result};
use crate::iem::IemParams;
use crate::real::Real;
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Samples averaged per prediction.
    pub n_samples: usize,
    /// Quantile draws are uniform on (0, u_max); capping away from 1
    /// avoids chasing the far tail.
    pub u_max: f64,
    /// Bisection stopping tolerance, measured in CDF space.
    pub bisection_tol: f64,
    pub max_bisection_iters: usize,
    pub rng_seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_samples: 100,
            u_max: 0.9,
            bisection_tol: 1e-6,
            max_bisection_iters: 200,
            rng_seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.u_max <= 0.0 || self.u_max > 1.0 || self.bisection_tol <= 0.0
        {
            return Err(Error::Config("invalid sampling configuration".into()));
        }
        Ok(())
    }
}

const MAX_DOUBLINGS: usize = 60;
const BRACKET_INIT: f64 = 1.0;

/// CDF evaluator bound to one history: the conditioning vector, the
/// per-mark integrals at `t_last`, and the tail constants are computed
/// once, so each CDF query costs a single network sweep.
pub struct CondSampler<'a, F: Real> {
    iem: &'a IemParams<F>,
    t_last: F,
    cond_h: Array1<F>,
    tail: Vec<F>,
    /// Corrected unnormalized integral at `t_last`, per mark.
    mass_tl: Vec<F>,
}

impl<'a, F: Real> CondSampler<'a, F> {
    pub fn new(iem: &'a IemParams<F>, h: &HistoryState<F>) -> Self {
        let cond_h = iem.cond_h(h);
        let n_marks = iem.n_marks();
        let mut tail = Vec::with_capacity(n_marks);
        let mut mass_tl = Vec::with_capacity(n_marks);
        let eps_share = iem.eps_den / F::of(n_marks as f64);
        for m in 0..n_marks {
            let c = iem.tail_constant_with(m, &cond_h);
            let f0 = iem.input_term(m, F::zero(), &cond_h);
            let s = iem.sweep(&f0).sigma_dec();
            tail.push(c);
            // same epsilon share as the full evaluation, so the two CDF
            // paths agree exactly
            mass_tl.push(s - c + eps_share);
        }
        CondSampler { iem, t_last: h.t_last, cond_h, tail, mass_tl }
    }

    pub fn t_last(&self) -> F {
        self.t_last
    }

    fn corrected_mass(&self, m: usize, t: F) -> F {
        let f0 = self.iem.input_term(m, t - self.t_last, &self.cond_h);
        self.iem.sweep(&f0).sigma_dec() - self.tail[m]
    }

    /// Conditional CDF `F*(t | m)`.
    pub fn cond_cdf(&self, m: usize, t: F) -> Result<F> {
        if self.mass_tl[m] <= F::zero() {
            return Err(Error::ZeroMassMark(m));
        }
        Ok((self.mass_tl[m] - self.corrected_mass(m, t)) / self.mass_tl[m])
    }

    /// Marginal CDF of the next event time,
    /// `F*(t) = 1 − Σ_m Γ*(m,t)`, using `Σ_m Γ*(m,t_l) = 1`.
    pub fn marginal_cdf(&self, t: F) -> Result<F> {
        let total_tl: F = self.mass_tl.iter().copied().sum();
        if total_tl <= F::zero() {
            return Err(Error::Numeric("no probability mass at t_last".into()));
        }
        let total: F = (0..self.iem.n_marks()).map(|m| self.corrected_mass(m, t)).sum();
        Ok((total_tl - total) / total_tl)
    }
}

fn invert_cdf<F: Real>(
    cdf: &dyn Fn(F) -> Result<F>,
    t_last: F,
    u: f64,
    cfg: &SampleConfig,
) -> Result<F> {
    let u = F::of(u);
    let tol = F::of(cfg.bisection_tol);
    // bracket: double the width until the CDF exceeds u
    let mut width = F::of(BRACKET_INIT);
    let mut doublings = 0;
    while cdf(t_last + width)? < u {
        width = width + width;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::TailMass { doublings });
        }
    }
    let mut lo = t_last;
    let mut hi = t_last + width;
    let mut mid = hi;
    let mut residual = F::infinity();
    for _ in 0..cfg.max_bisection_iters {
        mid = (lo + hi) / F::of(2.0);
        let f = cdf(mid)?;
        residual = (f - u).abs();
        if residual <= tol {
            return Ok(mid);
        }
        if f < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the interval may have collapsed below float resolution even though
    // the CDF residual is above tol (flat CDF); report the residual
    if hi - lo <= F::of(f64::EPSILON) * (F::one() + hi.abs()) {
        return Ok(mid);
    }
    Err(Error::Tolerance { iters: cfg.max_bisection_iters, residual: residual.as_f64() })
}

/// Solves `F*(t | m) = u` for `t` by bracket doubling and bisection.
/// Returns a normalized time `>= t_last`.
pub fn sample_time<F: Real>(
    iem: &IemParams<F>,
    h: &HistoryState<F>,
    m: usize,
    u: f64,
    cfg: &SampleConfig,
) -> Result<F> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Precondition(format!("u = {u} outside [0, 1)")));
    }
    let sampler = CondSampler::new(iem, h);
    sample_time_with(&sampler, m, u, cfg)
}

/// As [`sample_time`] but reusing a prepared [`CondSampler`].
pub fn sample_time_with<F: Real>(
    sampler: &CondSampler<'_, F>,
    m: usize,
    u: f64,
    cfg: &SampleConfig,
) -> Result<F> {
    if sampler.mass_tl[m] <= F::zero() {
        return Err(Error::ZeroMassMark(m));
    }
    invert_cdf(&|t| sampler.cond_cdf(m, t), sampler.t_last, u, cfg)
}

/// Expected next-event time given the mark: the mean of `n_samples`
/// inverse-transform samples with `u ~ U(0, u_max)`, reported in original
/// time units.
pub fn predict_time<F: Real>(
    iem: &IemParams<F>,
    h: &HistoryState<F>,
    m: usize,
    cfg: &SampleConfig,
    stats: &NormalizationStats,
) -> Result<F> {
    cfg.validate()?;
    let sampler = CondSampler::new(iem, h);
    predict_time_with(&sampler, m, cfg, stats)
}

/// As [`predict_time`] but reusing a prepared [`CondSampler`].
pub fn predict_time_with<F: Real>(
    sampler: &CondSampler<'_, F>,
    m: usize,
    cfg: &SampleConfig,
    stats: &NormalizationStats,
) -> Result<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut acc = F::zero();
    for _ in 0..cfg.n_samples {
        let u = rng.gen_range(0.0..cfg.u_max);
        acc += sample_time_with(sampler, m, u, cfg)?;
    }
    Ok(stats.denormalize(acc / F::of(cfg.n_samples as f64)))
}

/// Marginal CDF of the next event time at `t`.
pub fn marginal_cdf<F: Real>(iem: &IemParams<F>, h: &HistoryState<F>, t: F) -> Result<F> {
    if t < h.t_last {
        return Err(Error::Precondition(format!("t = {t} before t_last = {}", h.t_last)));
    }
    CondSampler::new(iem, h).marginal_cdf(t)
}

/// Expected next-event time regardless of mark, via inverse-transform
/// sampling on the marginal CDF; original time units.
pub fn predict_time_marginal<F: Real>(
    iem: &IemParams<F>,
    h: &HistoryState<F>,
    cfg: &SampleConfig,
    stats: &NormalizationStats,
) -> Result<F> {
    cfg.validate()?;
    let sampler = CondSampler::new(iem, h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut acc = F::zero();
    for _ in 0..cfg.n_samples {
        let u = rng.gen_range(0.0..cfg.u_max);
        acc += invert_cdf(&|t| sampler.marginal_cdf(t), sampler.t_last, u, cfg)?;
    }
    Ok(stats.denormalize(acc / F::of(cfg.n_samples as f64)))
}

/// Mark posterior at a fixed time, `p*(m | t) = p*(m,t) / Σ_n p*(n,t)`.
pub fn mark_given_time<F: Real>(iem: &IemParams<F>, h: &HistoryState<F>, t: F) -> Result<Vec<F>> {
    let eval = iem.gamma(t, h)?;
    let total: F = eval.pdf.iter().copied().sum();
    if total <= F::zero() {
        return Err(Error::Degenerate(format!("all-zero density at t = {t}")));
    }
    Ok(eval.pdf.iter().map(|&p| p / total).collect())
}
