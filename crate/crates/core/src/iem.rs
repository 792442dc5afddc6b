//! Integral estimation module: a monotone network whose output, after
//! tail correction and partition normalization, is the improper integral
//! of the conditional joint density from `t` to infinity, per mark.
//!
//! Monotonicity in `t` holds by construction: the per-mark slope vectors,
//! the layer weights, and the aggregation vector are all non-negative,
//! activations are tanh, and the terminal map `x -> 1/(1+e^x)` is
//! decreasing.

use crate::encoder::HistoryState;
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Effective (already non-negative where required) network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IemParams<F: Real> {
    /// Per-mark slope vectors, `|M| x d_f`, entries >= 0.
    pub v: Array2<F>,
    /// Per-mark offsets, `|M| x d_f`.
    pub b: Array2<F>,
    /// History conditioning map, `d_f x d_h`, added to the input term.
    pub cond: Array2<F>,
    /// Fully connected layers, each `d_f x d_f` with entries >= 0.
    pub layers_w: Vec<Array2<F>>,
    /// Layer biases, unconstrained.
    pub layers_b: Vec<Array1<F>>,
    /// Aggregation vector collapsing the last hidden layer, entries >= 0.
    pub agg: Array1<F>,
    /// Small denominator constant added to the partition function.
    pub eps_den: F,
}

/// Evaluation of the integral network at one time point.
#[derive(Debug, Clone)]
pub struct GammaEval<F: Real> {
    /// Corrected, normalized integral from `t` to infinity, per mark.
    pub gamma: Vec<F>,
    /// Same integral taken from `t_last`; these are the mark probabilities.
    pub gamma_at_tl: Vec<F>,
    /// Joint density `p*(m, t)` per mark (exact analytic derivative).
    pub pdf: Vec<F>,
    /// Partition function value.
    pub partition: F,
}

impl<F: Real> IemParams<F> {
    pub fn n_marks(&self) -> usize {
        self.v.nrows()
    }

    pub fn d_f(&self) -> usize {
        self.v.ncols()
    }

    pub fn d_h(&self) -> usize {
        self.cond.ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers_w.len()
    }

    /// Random parameters with the non-negativity invariant holding, for
    /// initialization and property tests. Deterministic given the seed.
    pub fn random_nonneg(
        n_marks: usize,
        d_f: usize,
        d_h: usize,
        n_layers: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = |rng: &mut ChaCha8Rng| F::of(rng.gen_range(0.005..0.4));
        let free = |rng: &mut ChaCha8Rng| F::of(rng.gen_range(-0.5..0.5));
        let v = Array2::from_shape_fn((n_marks, d_f), |_| pos(&mut rng));
        let b = Array2::from_shape_fn((n_marks, d_f), |_| free(&mut rng));
        let cond = Array2::from_shape_fn((d_f, d_h), |_| free(&mut rng));
        let layers_w = (0..n_layers)
            .map(|_| Array2::from_shape_fn((d_f, d_f), |_| pos(&mut rng)))
            .collect();
        let layers_b = (0..n_layers)
            .map(|_| Array1::from_shape_fn(d_f, |_| free(&mut rng)))
            .collect();
        let agg = Array1::from_shape_fn(d_f, |_| pos(&mut rng));
        IemParams { v, b, cond, layers_w, layers_b, agg, eps_den: F::of(1e-10) }
    }

    /// Checks the non-negativity invariants.
    pub fn validate(&self) -> Result<()> {
        let neg = |name: &str| Err(Error::Data(format!("negative entry in {name}")));
        if self.v.iter().any(|&x| x < F::zero()) {
            return neg("v");
        }
        if self.agg.iter().any(|&x| x < F::zero()) {
            return neg("agg");
        }
        for w in &self.layers_w {
            if w.iter().any(|&x| x < F::zero()) {
                return neg("layer weights");
            }
        }
        Ok(())
    }

    pub(crate) fn cond_h(&self, h: &HistoryState<F>) -> Array1<F> {
        self.cond.dot(&h.h)
    }

    /// Network input for mark `m`: `v_m * (t - t_l) + b_m + cond(h)`.
    pub(crate) fn input_term(&self, m: usize, dt: F, cond_h: &Array1<F>) -> Array1<F> {
        let mut f0 = self.b.row(m).to_owned() + cond_h;
        f0.scaled_add(dt, &self.v.row(m).to_owned());
        f0
    }

    /// Value sweep: pushes `f0` through the layers and returns the
    /// pre-sigmoid aggregate `x`.
    pub(crate) fn sweep(&self, f0: &Array1<F>) -> F {
        let mut a = f0.clone();
        for (w, bias) in self.layers_w.iter().zip(&self.layers_b) {
            a = (w.dot(&a) + bias).mapv(|z| z.tanh());
        }
        self.agg.dot(&a)
    }

    /// Value sweep plus the exact time derivative channel; returns
    /// `(x, dx/dt)` for input `f0` with `df0/dt = v_m`.
    pub(crate) fn sweep_with_dt(&self, f0: &Array1<F>, m: usize) -> (F, F) {
        let mut a = f0.clone();
        let mut at = self.v.row(m).to_owned();
        for (w, bias) in self.layers_w.iter().zip(&self.layers_b) {
            let z = w.dot(&a) + bias;
            let zt = w.dot(&at);
            a = z.mapv(|x| x.tanh());
            at = (a.mapv(|x| F::one() - x * x)) * zt;
        }
        (self.agg.dot(&a), self.agg.dot(&at))
    }

    /// Uncorrected score `s*(m, t)`, monotone non-increasing in `t`.
    pub fn raw_score(&self, m: usize, t: F, h: &HistoryState<F>) -> Result<F> {
        if t < h.t_last {
            return Err(Error::Precondition(format!(
                "t = {t} before t_last = {}",
                h.t_last
            )));
        }
        let cond_h = self.cond_h(h);
        let f0 = self.input_term(m, t - h.t_last, &cond_h);
        Ok(self.sweep(&f0).sigma_dec())
    }

    /// Exact limit of `s*(m, t)` as `t -> infinity`: hidden units driven by
    /// the slope vector saturate at tanh's +1 limit, the rest keep their
    /// finite value.
    pub fn tail_constant(&self, m: usize, h: &HistoryState<F>) -> F {
        let cond_h = self.cond_h(h);
        self.tail_constant_with(m, &cond_h)
    }

    pub(crate) fn tail_constant_with(&self, m: usize, cond_h: &Array1<F>) -> F {
        let w0 = &self.layers_w[0];
        let wv = w0.dot(&self.v.row(m).to_owned());
        let finite = w0.dot(&(self.b.row(m).to_owned() + cond_h)) + &self.layers_b[0];
        let mut a = Array1::from_shape_fn(self.d_f(), |j| {
            if wv[j] > F::zero() {
                F::one()
            } else {
                finite[j].tanh()
            }
        });
        for (w, bias) in self.layers_w.iter().zip(&self.layers_b).skip(1) {
            a = (w.dot(&a) + bias).mapv(|z| z.tanh());
        }
        self.agg.dot(&a).sigma_dec()
    }

    /// Full evaluation at time `t`: corrected integrals from `t` and from
    /// `t_last`, the partition function, and the joint density per mark.
    pub fn gamma(&self, t: F, h: &HistoryState<F>) -> Result<GammaEval<F>> {
        if t < h.t_last {
            return Err(Error::Precondition(format!(
                "t = {t} before t_last = {}",
                h.t_last
            )));
        }
        let n_marks = self.n_marks();
        let cond_h = self.cond_h(h);
        let dt = t - h.t_last;
        let mut s_t = Vec::with_capacity(n_marks);
        let mut xt_t = Vec::with_capacity(n_marks);
        let mut s_tl = Vec::with_capacity(n_marks);
        let mut tail = Vec::with_capacity(n_marks);
        for m in 0..n_marks {
            let f0 = self.input_term(m, dt, &cond_h);
            let (x, xt) = self.sweep_with_dt(&f0, m);
            let s = x.sigma_dec();
            s_t.push(s);
            xt_t.push(xt * s * (F::one() - s));
            let f0_tl = self.input_term(m, F::zero(), &cond_h);
            s_tl.push(self.sweep(&f0_tl).sigma_dec());
            tail.push(self.tail_constant_with(m, &cond_h));
        }
        let mut z = self.eps_den;
        for m in 0..n_marks {
            z += s_tl[m] - tail[m];
        }
        if z <= F::zero() {
            return Err(Error::Numeric(format!("partition function Z = {z} <= 0")));
        }
        let eps_share = self.eps_den / F::of(n_marks as f64);
        let gamma = (0..n_marks).map(|m| (s_t[m] - tail[m]) / z).collect();
        let gamma_at_tl = (0..n_marks)
            .map(|m| (s_tl[m] - tail[m] + eps_share) / z)
            .collect();
        // p*(m,t) = -d gamma/dt = s(1-s) * dx/dt / Z, non-negative by construction
        let pdf = (0..n_marks).map(|m| xt_t[m] / z).collect();
        Ok(GammaEval { gamma, gamma_at_tl, pdf, partition: z })
    }

    /// Joint density `p*(m, t)`, the exact negated time derivative of gamma.
    pub fn pdf(&self, m: usize, t: F, h: &HistoryState<F>) -> Result<F> {
        Ok(self.gamma(t, h)?.pdf[m])
    }

    /// Mark probabilities `p*(m) = Gamma*(m, t_l)`; entries sum to 1.
    pub fn mark_prob(&self, h: &HistoryState<F>) -> Result<Vec<F>> {
        Ok(self.gamma(h.t_last, h)?.gamma_at_tl)
    }

    /// Conditional CDF of the next event time given its mark.
    pub fn cond_cdf(&self, m: usize, t: F, h: &HistoryState<F>) -> Result<F> {
        let eval = self.gamma(t, h)?;
        cond_cdf_from(&eval, m)
    }
}

/// CDF from a precomputed [`GammaEval`]; useful when one evaluation serves
/// several marks.
pub fn cond_cdf_from<F: Real>(eval: &GammaEval<F>, m: usize) -> Result<F> {
    let denom = eval.gamma_at_tl[m];
    if denom <= F::zero() {
        return Err(Error::ZeroMassMark(m));
    }
    Ok((denom - eval.gamma[m]) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn state(d_h: usize, t_last: f64, seed: u64) -> HistoryState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HistoryState {
            h: Array1::from_shape_fn(d_h, |_| rng.gen_range(-1.0..1.0)),
            t_last,
        }
    }

    fn params(seed: u64) -> IemParams<f64> {
        IemParams::random_nonneg(3, 6, 4, 3, seed)
    }

    #[test]
    fn raw_score_at_tl_ignores_slope() {
        let mut p = params(1);
        let h = state(4, 2.0, 2);
        let before = p.raw_score(0, 2.0, &h).unwrap();
        for x in p.v.row_mut(0) {
            *x *= 7.0;
        }
        let after = p.raw_score(0, 2.0, &h).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn raw_score_monotone_non_increasing() {
        for seed in 0..50u64 {
            let p = params(seed);
            let h = state(4, 0.0, seed + 1000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
            let mut a: f64 = rng.gen_range(0.0..5.0);
            let mut b: f64 = rng.gen_range(0.0..5.0);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            for m in 0..3 {
                let s1 = p.raw_score(m, a, &h).unwrap();
                let s2 = p.raw_score(m, b, &h).unwrap();
                assert!(s1 >= s2, "seed {seed} mark {m}: {s1} < {s2}");
            }
        }
    }

    #[test]
    fn raw_score_constant_when_slope_zero() {
        let mut p = params(3);
        p.v.fill(0.0);
        let h = state(4, 1.0, 4);
        let s1 = p.raw_score(1, 1.0, &h).unwrap();
        let s2 = p.raw_score(1, 10.0, &h).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn raw_score_rejects_past_time() {
        let p = params(5);
        let h = state(4, 1.0, 6);
        assert!(p.raw_score(0, 0.5, &h).is_err());
    }

    #[test]
    fn tail_equals_score_when_slope_zero() {
        let mut p = params(7);
        p.v.fill(0.0);
        let h = state(4, 0.5, 8);
        for m in 0..3 {
            let c = p.tail_constant(m, &h);
            let s_tl = p.raw_score(m, 0.5, &h).unwrap();
            assert!((c - s_tl).abs() < 1e-14);
        }
    }

    #[test]
    fn tail_hand_computed_on_unit_network() {
        // 1 mark, d_f = 1, single layer, zero-width history:
        // s(t) = sigma_dec(agg * tanh(w*(v*dt + b) + bias)),
        // limit = sigma_dec(agg * 1) when w*v > 0.
        let p = IemParams {
            v: array![[0.5]],
            b: array![[0.2]],
            cond: Array2::zeros((1, 1)),
            layers_w: vec![array![[0.7]]],
            layers_b: vec![array![0.1]],
            agg: array![1.3],
            eps_den: 1e-10,
        };
        let h = HistoryState { h: array![0.0], t_last: 0.0 };
        let c = p.tail_constant(0, &h);
        let expected = (1.3f64).sigma_dec();
        assert!((c - expected).abs() < 1e-15, "{c} vs {expected}");
        // and the score at large t approaches it
        let s = p.raw_score(0, 200.0, &h).unwrap();
        assert!((s - c).abs() < 1e-12);
    }

    #[test]
    fn tail_bounds_score_from_below() {
        for seed in 0..30u64 {
            let p = params(seed);
            let h = state(4, 0.0, seed + 3000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 4000);
            for m in 0..3 {
                let c = p.tail_constant(m, &h);
                let t: f64 = rng.gen_range(0.0..20.0);
                let s = p.raw_score(m, t, &h).unwrap();
                assert!(c <= s + 1e-15, "seed {seed}: C {c} > s {s}");
            }
        }
    }

    #[test]
    fn gamma_at_tl_sums_to_one() {
        for seed in 0..100u64 {
            let p = params(seed);
            let h = state(4, 0.3, seed + 5000);
            let eval = p.gamma(0.3, &h).unwrap();
            let sum: f64 = eval.gamma_at_tl.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "seed {seed}: sum {sum}");
        }
    }

    #[test]
    fn gamma_vanishes_at_large_t() {
        for seed in 0..20u64 {
            let p = params(seed);
            let h = state(4, 0.0, seed + 6000);
            let eval = p.gamma(1e6, &h).unwrap();
            for (m, &g) in eval.gamma.iter().enumerate() {
                assert!(g.abs() <= 1e-6, "seed {seed} mark {m}: gamma {g}");
            }
        }
    }

    #[test]
    fn gamma_at_tl_matches_gamma_field() {
        let p = params(11);
        let h = state(4, 1.5, 12);
        let eval = p.gamma(1.5, &h).unwrap();
        for m in 0..3 {
            // differ only by the eps_den share in the numerator
            assert!((eval.gamma[m] - eval.gamma_at_tl[m]).abs() <= 1e-9);
        }
    }

    #[test]
    fn gamma_bounded_by_gamma_at_tl() {
        let p = params(13);
        let h = state(4, 0.0, 14);
        for i in 0..20 {
            let t = i as f64 * 0.4;
            let eval = p.gamma(t, &h).unwrap();
            for m in 0..3 {
                assert!(eval.gamma[m] >= -1e-15);
                assert!(eval.gamma[m] <= eval.gamma_at_tl[m] + 1e-12);
            }
        }
    }

    #[test]
    fn pdf_matches_finite_difference_of_gamma() {
        for seed in 0..20u64 {
            let p = params(seed);
            let h = state(4, 0.0, seed + 7000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 8000);
            let t: f64 = rng.gen_range(0.1..4.0);
            let step = 1e-5;
            let up = p.gamma(t + step, &h).unwrap();
            let down = p.gamma(t - step, &h).unwrap();
            let eval = p.gamma(t, &h).unwrap();
            for m in 0..3 {
                let fd = -(up.gamma[m] - down.gamma[m]) / (2.0 * step);
                let a = eval.pdf[m];
                let denom = fd.abs().max(a.abs()).max(1e-10);
                assert!(
                    (fd - a).abs() / denom <= 1e-5,
                    "seed {seed} mark {m}: fd {fd} vs {a}"
                );
                assert!(a >= 0.0);
            }
        }
    }

    #[test]
    fn pdf_zero_when_slope_zero() {
        let mut p = params(15);
        p.v.fill(0.0);
        let h = state(4, 0.0, 16);
        for m in 0..3 {
            assert_eq!(p.pdf(m, 3.0, &h).unwrap(), 0.0);
        }
    }

    use crate::quad::adaptive_simpson;

    #[test]
    fn quadrature_consistency() {
        let p = params(17);
        let h = state(4, 0.0, 18);
        let horizon = 200.0;
        let total_pdf: f64 = (0..3)
            .map(|m| {
                adaptive_simpson(
                    &|t| p.gamma(t, &h).unwrap().pdf[m],
                    0.0,
                    horizon,
                    1e-9,
                )
            })
            .sum();
        let eval = p.gamma(horizon, &h).unwrap();
        let remaining: f64 = eval.gamma.iter().sum();
        assert!(
            (total_pdf + remaining - 1.0).abs() <= 1e-4,
            "mass {} + tail {}",
            total_pdf,
            remaining
        );
        // per-mark: Gamma(m, t_l) - Gamma(m, t) equals the integral of pdf
        let t = 2.5;
        for m in 0..3 {
            let integral =
                adaptive_simpson(&|x| p.gamma(x, &h).unwrap().pdf[m], 0.0, t, 1e-10);
            let at_t = p.gamma(t, &h).unwrap();
            let at_tl = p.gamma(0.0, &h).unwrap();
            let diff = at_tl.gamma[m] - at_t.gamma[m];
            assert!((integral - diff).abs() <= 1e-5, "mark {m}: {integral} vs {diff}");
        }
    }

    #[test]
    fn mark_prob_cases() {
        let single = IemParams::random_nonneg(1, 4, 3, 2, 19);
        let h = state(3, 0.0, 20);
        let pm = single.mark_prob(&h).unwrap();
        assert_eq!(pm.len(), 1);
        assert!((pm[0] - 1.0).abs() <= 1e-9);

        let p = params(21);
        let h = state(4, 0.0, 22);
        let pm = p.mark_prob(&h).unwrap();
        assert!((pm.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cond_cdf_properties() {
        let p = params(23);
        let h = state(4, 0.7, 24);
        for m in 0..3 {
            let at_tl = p.cond_cdf(m, 0.7, &h).unwrap();
            assert!(at_tl.abs() <= 1e-9, "F(t_l) = {at_tl}");
            let far = p.cond_cdf(m, 1e6, &h).unwrap();
            assert!((far - 1.0).abs() <= 1e-4, "F(inf) = {far}");
        }
        for seed in 0..20u64 {
            let p = params(seed + 100);
            let h = state(4, 0.0, seed + 9000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 9500);
            let mut a: f64 = rng.gen_range(0.0..6.0);
            let mut b: f64 = rng.gen_range(0.0..6.0);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            for m in 0..3 {
                let fa = p.cond_cdf(m, a, &h).unwrap();
                let fb = p.cond_cdf(m, b, &h).unwrap();
                assert!(fa <= fb + 1e-12);
            }
        }
    }

    #[test]
    fn validate_catches_negative_weight() {
        let mut p = params(25);
        assert!(p.validate().is_ok());
        p.v[(0, 0)] = -0.1;
        assert!(p.validate().is_err());
    }
}
