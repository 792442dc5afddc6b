//! History encoder: an LSTM over (mark embedding, inter-event time) inputs
//! producing one fixed-width state per event prefix, with hand-written
//! exact backpropagation through time.

use crate::data::EventSequence;
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{s, Array1, Array2};

/// LSTM parameters. Gate blocks are stacked in the order
/// input / forget / candidate / output along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Real> {
    /// Mark embedding table, `|M| x d_e`.
    pub embed: Array2<F>,
    /// Input weights, `4*d_h x (d_e + 1)` (the +1 column takes the inter-event time).
    pub w_input: Array2<F>,
    /// Recurrent weights, `4*d_h x d_h`.
    pub w_recur: Array2<F>,
    /// Gate biases, `4*d_h`.
    pub bias: Array1<F>,
}

impl<F: Real> EncoderParams<F> {
    pub fn zeros(n_marks: usize, d_e: usize, d_h: usize) -> Self {
        EncoderParams {
            embed: Array2::zeros((n_marks, d_e)),
            w_input: Array2::zeros((4 * d_h, d_e + 1)),
            w_recur: Array2::zeros((4 * d_h, d_h)),
            bias: Array1::zeros(4 * d_h),
        }
    }

    pub fn d_h(&self) -> usize {
        self.w_recur.ncols()
    }

    pub fn d_e(&self) -> usize {
        self.embed.ncols()
    }
}

/// Fixed-width summary of the event prefix, plus the time of its most
/// recent event.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState<F: Real> {
    pub h: Array1<F>,
    pub t_last: F,
}

/// Per-step intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<F: Real> {
    xs: Vec<Array1<F>>,
    marks: Vec<usize>,
    /// Post-activation gates per step, `4*d_h` in i/f/g/o order.
    gates: Vec<Array1<F>>,
    cs: Vec<Array1<F>>,
    tanh_cs: Vec<Array1<F>>,
    hs: Vec<Array1<F>>,
}

/// Gradients mirroring [`EncoderParams`].
pub type EncoderGrads<F> = EncoderParams<F>;

/// Runs the cell over the sequence, returning one [`HistoryState`] per
/// prefix length 0..=n. State 0 is the empty-history state (zero vector,
/// `t_last = t_start`).
pub fn encode_prefixes<F: Real>(
    seq: &EventSequence<F>,
    params: &EncoderParams<F>,
) -> (Vec<HistoryState<F>>, EncoderCache<F>) {
    let d_h = params.d_h();
    let d_e = params.d_e();
    let n = seq.events.len();
    let mut states = Vec::with_capacity(n + 1);
    states.push(HistoryState { h: Array1::zeros(d_h), t_last: seq.t_start });
    let mut cache = EncoderCache {
        xs: Vec::with_capacity(n),
        marks: Vec::with_capacity(n),
        gates: Vec::with_capacity(n),
        cs: Vec::with_capacity(n),
        tanh_cs: Vec::with_capacity(n),
        hs: Vec::with_capacity(n),
    };
    let mut h = Array1::<F>::zeros(d_h);
    let mut c = Array1::<F>::zeros(d_h);
    let mut t_prev = seq.t_start;
    for ev in &seq.events {
        let mut x = Array1::<F>::zeros(d_e + 1);
        x.slice_mut(s![..d_e]).assign(&params.embed.row(ev.mark));
        x[d_e] = ev.time - t_prev;
        let mut z = params.w_input.dot(&x) + params.w_recur.dot(&h) + &params.bias;
        // activations in place: logistic for i/f/o, tanh for g
        for j in 0..4 * d_h {
            let block = j / d_h;
            z[j] = if block == 2 { z[j].tanh() } else { z[j].logistic() };
        }
        let gi = z.slice(s![0..d_h]);
        let gf = z.slice(s![d_h..2 * d_h]);
        let gg = z.slice(s![2 * d_h..3 * d_h]);
        let go = z.slice(s![3 * d_h..4 * d_h]);
        let new_c = &gf.to_owned() * &c + &gi.to_owned() * &gg.to_owned();
        let tanh_c = new_c.mapv(|v| v.tanh());
        let new_h = &go.to_owned() * &tanh_c;
        cache.xs.push(x);
        cache.marks.push(ev.mark);
        cache.gates.push(z);
        cache.cs.push(new_c.clone());
        cache.tanh_cs.push(tanh_c);
        cache.hs.push(new_h.clone());
        c = new_c;
        h = new_h;
        t_prev = ev.time;
        states.push(HistoryState { h: h.clone(), t_last: t_prev });
    }
    (states, cache)
}

/// Exact reverse-mode gradients of a scalar loss through all states.
/// `upstream[i]` is dLoss/dh for the state at prefix length `i`
/// (index 0, the constant initial state, contributes nothing).
pub fn encoder_backward<F: Real>(
    seq: &EventSequence<F>,
    params: &EncoderParams<F>,
    cache: &EncoderCache<F>,
    upstream: &[Array1<F>],
) -> Result<EncoderGrads<F>> {
    let n = seq.events.len();
    if upstream.len() != n + 1 {
        return Err(Error::Precondition(format!(
            "expected {} upstream gradients, got {}",
            n + 1,
            upstream.len()
        )));
    }
    let d_h = params.d_h();
    let d_e = params.d_e();
    let mut grads = EncoderGrads::zeros(params.embed.nrows(), d_e, d_h);
    let mut dh = Array1::<F>::zeros(d_h);
    let mut dc = Array1::<F>::zeros(d_h);
    for step in (0..n).rev() {
        dh += &upstream[step + 1];
        let gates = &cache.gates[step];
        let gi = gates.slice(s![0..d_h]).to_owned();
        let gf = gates.slice(s![d_h..2 * d_h]).to_owned();
        let gg = gates.slice(s![2 * d_h..3 * d_h]).to_owned();
        let go = gates.slice(s![3 * d_h..4 * d_h]).to_owned();
        let tanh_c = &cache.tanh_cs[step];
        let c_prev = if step == 0 {
            Array1::<F>::zeros(d_h)
        } else {
            cache.cs[step - 1].clone()
        };
        let h_prev = if step == 0 {
            Array1::<F>::zeros(d_h)
        } else {
            cache.hs[step - 1].clone()
        };

        let d_go = &dh * tanh_c;
        dc += &(&dh * &go * &tanh_c.mapv(|v| F::one() - v * v));
        let d_gi = &dc * &gg;
        let d_gg = &dc * &gi;
        let d_gf = &dc * &c_prev;
        let dc_prev = &dc * &gf;

        let mut dz = Array1::<F>::zeros(4 * d_h);
        for j in 0..d_h {
            dz[j] = d_gi[j] * gi[j] * (F::one() - gi[j]);
            dz[d_h + j] = d_gf[j] * gf[j] * (F::one() - gf[j]);
            dz[2 * d_h + j] = d_gg[j] * (F::one() - gg[j] * gg[j]);
            dz[3 * d_h + j] = d_go[j] * go[j] * (F::one() - go[j]);
        }

        let x = &cache.xs[step];
        for r in 0..4 * d_h {
            let g = dz[r];
            if g == F::zero() {
                continue;
            }
            for col in 0..d_e + 1 {
                grads.w_input[(r, col)] += g * x[col];
            }
            for col in 0..d_h {
                grads.w_recur[(r, col)] += g * h_prev[col];
            }
            grads.bias[r] += g;
        }
        // dx -> embedding rows (the time column carries data, not parameters)
        let dx = params.w_input.t().dot(&dz);
        let mark = cache.marks[step];
        for col in 0..d_e {
            grads.embed[(mark, col)] += dx[col];
        }
        dh = params.w_recur.t().dot(&dz);
        dc = dc_prev;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(n_marks: usize, d_e: usize, d_h: usize, seed: u64) -> EncoderParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::zeros(n_marks, d_e, d_h);
        for v in p.embed.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in p.w_input.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in p.w_recur.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in p.bias.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        p
    }

    fn random_seq(n: usize, n_marks: usize, seed: u64) -> EventSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        let events = (0..n)
            .map(|_| {
                t += rng.gen_range(0.05..1.5);
                Event { mark: rng.gen_range(0..n_marks), time: t }
            })
            .collect();
        EventSequence { events, t_start: 0.0, t_end: t + 1.0 }
    }

    #[test]
    fn empty_prefix_is_zero_state() {
        let p = random_params(3, 4, 5, 1);
        let seq = random_seq(2, 3, 2);
        let (states, _) = encode_prefixes(&seq, &p);
        assert!(states[0].h.iter().all(|&v| v == 0.0));
        assert_eq!(states[0].t_last, seq.t_start);
        assert_eq!(states.len(), 3);
        assert_eq!(states[2].t_last, seq.events[1].time);
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let p = EncoderParams::<f64>::zeros(2, 3, 4);
        let seq = random_seq(1, 2, 3);
        let (states, _) = encode_prefixes(&seq, &p);
        // h = o * tanh(c) with c = i*g, g = tanh(0) = 0 => h = 0
        assert!(states[1].h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality_identical_prefixes_identical_states() {
        let p = random_params(4, 6, 8, 10);
        let a = random_seq(12, 4, 11);
        let mut b = a.clone();
        // perturb only events after index 5
        for ev in b.events.iter_mut().skip(6) {
            ev.time += 0.013;
            ev.mark = (ev.mark + 1) % 4;
        }
        let (sa, _) = encode_prefixes(&a, &p);
        let (sb, _) = encode_prefixes(&b, &p);
        for i in 0..=6 {
            assert_eq!(sa[i].h, sb[i].h, "state {i} diverged");
        }
        assert_ne!(sa[7].h, sb[7].h);
    }

    #[test]
    fn determinism() {
        let p = random_params(3, 4, 5, 20);
        let seq = random_seq(10, 3, 21);
        let (s1, _) = encode_prefixes(&seq, &p);
        let (s2, _) = encode_prefixes(&seq, &p);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.h, b.h);
        }
    }

    fn loss_sum_final(seq: &EventSequence<f64>, p: &EncoderParams<f64>) -> f64 {
        let (states, _) = encode_prefixes(seq, p);
        states.last().unwrap().h.sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = random_params(3, 3, 4, 30);
        let seq = random_seq(6, 3, 31);
        let (_, cache) = encode_prefixes(&seq, &p);
        let n = seq.events.len();
        let mut upstream = vec![Array1::<f64>::zeros(4); n + 1];
        upstream[n] = Array1::ones(4);
        let grads = encoder_backward(&seq, &p, &cache, &upstream).unwrap();

        fn check(
            p: &mut EncoderParams<f64>,
            seq: &EventSequence<f64>,
            get: impl Fn(&mut EncoderParams<f64>) -> &mut f64,
            g: f64,
        ) {
            let step = 1e-5;
            let orig = *get(p);
            *get(p) = orig + step;
            let up = loss_sum_final(seq, p);
            *get(p) = orig - step;
            let down = loss_sum_final(seq, p);
            *get(p) = orig;
            let fd = (up - down) / (2.0 * step);
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!((fd - g).abs() / denom <= 1e-4, "fd {fd} vs analytic {g}");
        }
        for r in 0..p.w_input.nrows() {
            for c in 0..p.w_input.ncols() {
                let g = grads.w_input[(r, c)];
                check(&mut p, &seq, |p| &mut p.w_input[(r, c)], g);
            }
        }
        for r in 0..p.w_recur.nrows() {
            for c in 0..p.w_recur.ncols() {
                let g = grads.w_recur[(r, c)];
                check(&mut p, &seq, |p| &mut p.w_recur[(r, c)], g);
            }
        }
        for r in 0..p.bias.len() {
            let g = grads.bias[r];
            check(&mut p, &seq, |p| &mut p.bias[r], g);
        }
        for r in 0..p.embed.nrows() {
            for c in 0..p.embed.ncols() {
                let g = grads.embed[(r, c)];
                check(&mut p, &seq, |p| &mut p.embed[(r, c)], g);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = random_params(3, 3, 4, 40);
        let seq = random_seq(5, 3, 41);
        let (_, cache) = encode_prefixes(&seq, &p);
        let upstream = vec![Array1::<f64>::zeros(4); 6];
        let grads = encoder_backward(&seq, &p, &cache, &upstream).unwrap();
        assert!(grads.w_input.iter().all(|&v| v == 0.0));
        assert!(grads.w_recur.iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
        assert!(grads.embed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradients_sum_linearly() {
        let p = random_params(3, 3, 4, 50);
        let s1 = random_seq(4, 3, 51);
        let s2 = random_seq(7, 3, 52);
        let per_seq = |seq: &EventSequence<f64>| {
            let (_, cache) = encode_prefixes(seq, &p);
            let n = seq.events.len();
            let mut upstream = vec![Array1::<f64>::zeros(4); n + 1];
            upstream[n] = Array1::ones(4);
            encoder_backward(seq, &p, &cache, &upstream).unwrap()
        };
        let g1 = per_seq(&s1);
        let g2 = per_seq(&s2);
        // independent sequences: combined loss gradient is the sum
        let sum = &g1.w_input + &g2.w_input;
        let again = &per_seq(&s1).w_input + &per_seq(&s2).w_input;
        assert_eq!(sum, again);
    }
}
