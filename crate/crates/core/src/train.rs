//! Likelihood computation and training: exact reverse-mode gradients of
//! the negative log-likelihood through the integral network and the
//! encoder, Adam with linear warmup, and the training loop.
//!
//! Per sequence, the loss is
//!   sum_i -log p*(m_i, t_i)  -  log( sum_m Gamma*(m, T) )
//! where the densities come from the tail-corrected, normalized network.
//! During training every hidden unit of layer 0 is driven by a strictly
//! positive slope, so the tail constant is shared across marks and
//! histories and gets a single forward/backward per batch.

use crate::data::{Dataset, EventSequence};
use crate::encoder::{encode_prefixes, encoder_backward, EncoderParams};
use crate::error::{Error, Result};
use crate::iem::IemParams;
use crate::model::{IfnmtppModel, ModelDims, ParamSet};
use crate::real::Real;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Densities below this are clamped inside the log; clamped terms carry
/// no gradient.
pub const PDF_FLOOR: f64 = 1e-30;

/// Decay of the iterate tail average used as a checkpoint candidate.
pub const EMA_DECAY: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validate_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            warmup_steps: 20_000,
            batch_size: 32,
            learning_rate: 2e-3,
            validate_every: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Loss totals over the evaluated sequences. `total` is always the sum of
/// the two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<F: Real> {
    pub event_term: F,
    pub survival_term: F,
    pub total: F,
    pub n_events: usize,
    /// Events whose density hit [`PDF_FLOOR`].
    pub n_floored: usize,
}

impl<F: Real> LossBreakdown<F> {
    fn zero() -> Self {
        LossBreakdown {
            event_term: F::zero(),
            survival_term: F::zero(),
            total: F::zero(),
            n_events: 0,
            n_floored: 0,
        }
    }

    fn merge(&mut self, other: &LossBreakdown<F>) {
        self.event_term += other.event_term;
        self.survival_term += other.survival_term;
        self.total += other.total;
        self.n_events += other.n_events;
        self.n_floored += other.n_floored;
    }

    pub fn per_event(&self) -> f64 {
        self.total.as_f64() / (self.n_events.max(1) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<F: Real> {
    /// Best-validation model.
    pub model: IfnmtppModel<F>,
    pub best_val_nll: f64,
    pub history: Vec<TrainRecord>,
}

// ---------------------------------------------------------------------------
// shared tail constant
// ---------------------------------------------------------------------------

/// Forward pass for the saturated tail: layer-0 activations pinned at
/// tanh's limit, then the remaining layers.
struct TailEval<F: Real> {
    acts: Vec<Array1<F>>,
    pub c: F,
}

fn tail_fwd<F: Real>(iem: &IemParams<F>) -> TailEval<F> {
    let mut acts: Vec<Array1<F>> = Vec::with_capacity(iem.n_layers().saturating_sub(1));
    let ones = Array1::<F>::ones(iem.d_f());
    for k in 1..iem.n_layers() {
        let prev = if k == 1 { &ones } else { &acts[k - 2] };
        let a = (iem.layers_w[k].dot(prev) + &iem.layers_b[k]).mapv(|z| z.tanh());
        acts.push(a);
    }
    let last = acts.last().unwrap_or(&ones);
    let c = iem.agg.dot(last).sigma_dec();
    TailEval { acts, c }
}

fn tail_bwd<F: Real>(iem: &IemParams<F>, tail: &TailEval<F>, g_c: F, g: &mut ParamSet<F>) {
    let ones = Array1::<F>::ones(iem.d_f());
    let last = tail.acts.last().unwrap_or(&ones);
    let g_x = -g_c * tail.c * (F::one() - tail.c);
    g.iem.agg.scaled_add(g_x, last);
    let mut g_a = iem.agg.mapv(|w| w * g_x);
    for k in (1..iem.n_layers()).rev() {
        let a = &tail.acts[k - 1];
        let prev = if k == 1 { &ones } else { &tail.acts[k - 2] };
        let g_z = Zip::from(&g_a).and(a).map_collect(|&ga, &av| ga * (F::one() - av * av));
        for (r, &gz) in g_z.iter().enumerate() {
            for (c_, &pv) in prev.iter().enumerate() {
                g.iem.layers_w[k][(r, c_)] += gz * pv;
            }
        }
        g.iem.layers_b[k] += &g_z;
        g_a = iem.layers_w[k].t().dot(&g_z);
    }
}

/// Checks that every layer-0 unit is driven by a strictly positive slope
/// for every mark, which makes the tail constant shared.
fn check_saturated<F: Real>(iem: &IemParams<F>) -> Result<()> {
    if iem.n_layers() == 0 {
        return Err(Error::Config("at least one hidden layer is required".into()));
    }
    for m in 0..iem.n_marks() {
        let wv = iem.layers_w[0].dot(&iem.v.row(m).to_owned());
        if wv.iter().any(|&x| x <= F::zero()) {
            return Err(Error::Numeric(format!(
                "tail not saturated for mark {m}; shared-tail gradients unavailable"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stacked layer sweeps
// ---------------------------------------------------------------------------

/// Value channel over a stack of input rows; returns per-layer activations
/// and the pre-sigmoid aggregates.
fn mat_sweep_fwd<F: Real>(iem: &IemParams<F>, f0: &Array2<F>) -> (Vec<Array2<F>>, Array1<F>) {
    let mut acts: Vec<Array2<F>> = Vec::with_capacity(iem.n_layers());
    for (k, (w, b)) in iem.layers_w.iter().zip(&iem.layers_b).enumerate() {
        let prev = if k == 0 { f0 } else { &acts[k - 1] };
        acts.push((prev.dot(&w.t()) + b).mapv(|z| z.tanh()));
    }
    let x = acts.last().unwrap_or(f0).dot(&iem.agg);
    (acts, x)
}

/// Backward through the value channel; accumulates layer/agg gradients and
/// returns the gradient w.r.t. the input rows.
fn mat_sweep_bwd<F: Real>(
    iem: &IemParams<F>,
    f0: &Array2<F>,
    acts: &[Array2<F>],
    g_x: &Array1<F>,
    g: &mut ParamSet<F>,
) -> Array2<F> {
    let last = acts.last().unwrap_or(f0);
    g.iem.agg += &last.t().dot(g_x);
    let mut g_a = Array2::from_shape_fn((f0.nrows(), iem.d_f()), |(r, j)| g_x[r] * iem.agg[j]);
    for k in (0..iem.n_layers()).rev() {
        let a = &acts[k];
        let prev = if k == 0 { f0 } else { &acts[k - 1] };
        let g_z = Zip::from(&g_a).and(a).map_collect(|&ga, &av| ga * (F::one() - av * av));
        g.iem.layers_w[k] += &g_z.t().dot(prev);
        g.iem.layers_b[k] += &g_z.sum_axis(Axis(0));
        g_a = g_z.dot(&iem.layers_w[k]);
    }
    g_a
}

/// Value channel plus its exact time derivative over a stack of rows.
/// Returns activations, derivative-channel activations, the pre-activation
/// derivative inputs (needed in the backward pass), and both aggregates.
#[allow(clippy::type_complexity)]
fn ev_sweep_fwd<F: Real>(
    iem: &IemParams<F>,
    f0: &Array2<F>,
    at0: &Array2<F>,
) -> (Vec<Array2<F>>, Vec<Array2<F>>, Vec<Array2<F>>, Array1<F>, Array1<F>) {
    let l = iem.n_layers();
    let mut a_list: Vec<Array2<F>> = Vec::with_capacity(l);
    let mut at_list: Vec<Array2<F>> = Vec::with_capacity(l);
    let mut zt_list: Vec<Array2<F>> = Vec::with_capacity(l);
    for (k, (w, b)) in iem.layers_w.iter().zip(&iem.layers_b).enumerate() {
        let prev_a = if k == 0 { f0 } else { &a_list[k - 1] };
        let prev_at = if k == 0 { at0 } else { &at_list[k - 1] };
        let a = (prev_a.dot(&w.t()) + b).mapv(|z| z.tanh());
        let zt = prev_at.dot(&w.t());
        let at = Zip::from(&a).and(&zt).map_collect(|&av, &ztv| (F::one() - av * av) * ztv);
        a_list.push(a);
        at_list.push(at);
        zt_list.push(zt);
    }
    let x = a_list.last().unwrap_or(f0).dot(&iem.agg);
    let xt = at_list.last().unwrap_or(at0).dot(&iem.agg);
    (a_list, at_list, zt_list, x, xt)
}

/// Backward through both channels; returns gradients w.r.t. the input rows
/// of the value channel and of the derivative channel.
#[allow(clippy::too_many_arguments)]
fn ev_sweep_bwd<F: Real>(
    iem: &IemParams<F>,
    f0: &Array2<F>,
    at0: &Array2<F>,
    a_list: &[Array2<F>],
    at_list: &[Array2<F>],
    zt_list: &[Array2<F>],
    g_x: &Array1<F>,
    g_xt: &Array1<F>,
    g: &mut ParamSet<F>,
) -> (Array2<F>, Array2<F>) {
    let d_f = iem.d_f();
    let rows = f0.nrows();
    let last_a = a_list.last().unwrap_or(f0);
    let last_at = at_list.last().unwrap_or(at0);
    g.iem.agg += &last_a.t().dot(g_x);
    g.iem.agg += &last_at.t().dot(g_xt);
    let mut g_a = Array2::from_shape_fn((rows, d_f), |(r, j)| g_x[r] * iem.agg[j]);
    let mut g_at = Array2::from_shape_fn((rows, d_f), |(r, j)| g_xt[r] * iem.agg[j]);
    let two = F::of(2.0);
    for k in (0..iem.n_layers()).rev() {
        let a = &a_list[k];
        let zt = &zt_list[k];
        let prev_a = if k == 0 { f0 } else { &a_list[k - 1] };
        let prev_at = if k == 0 { at0 } else { &at_list[k - 1] };
        // at = (1 - a^2) * zt, so the derivative channel feeds back into
        // both the pre-activation z (through a) and zt.
        let mut g_z = Array2::<F>::zeros((rows, d_f));
        let mut g_zt = Array2::<F>::zeros((rows, d_f));
        Zip::from(&mut g_z)
            .and(&mut g_zt)
            .and(&g_a)
            .and(&g_at)
            .and(a)
            .and(zt)
            .for_each(|gz, gzt, &ga, &gat, &av, &ztv| {
                let one_m = F::one() - av * av;
                *gzt = gat * one_m;
                *gz = (ga - two * gat * av * ztv) * one_m;
            });
        g.iem.layers_w[k] += &g_z.t().dot(prev_a);
        g.iem.layers_w[k] += &g_zt.t().dot(prev_at);
        g.iem.layers_b[k] += &g_z.sum_axis(Axis(0));
        g_a = g_z.dot(&iem.layers_w[k]);
        g_at = g_zt.dot(&iem.layers_w[k]);
    }
    (g_a, g_at)
}

// ---------------------------------------------------------------------------
// per-sequence loss and gradients
// ---------------------------------------------------------------------------

struct SeqForward<F: Real> {
    states_h: Array2<F>,
    /// Stacked input rows: (n+1) blocks of |M| rows evaluated at each
    /// prefix's last event time, then |M| rows evaluated at the horizon.
    f0v: Array2<F>,
    acts_v: Vec<Array2<F>>,
    s_v: Array1<F>,
    /// Partition function per prefix.
    z: Vec<F>,
    /// Corrected survival mass at the horizon, before normalization.
    surv: F,
    horizon_dt: F,
    // event rows (empty when the sequence has no events)
    f0e: Array2<F>,
    at0: Array2<F>,
    dts: Vec<F>,
    a_e: Vec<Array2<F>>,
    at_e: Vec<Array2<F>>,
    zt_e: Vec<Array2<F>>,
    x_e: Array1<F>,
    xt_e: Array1<F>,
}

fn seq_forward<F: Real>(
    seq: &EventSequence<F>,
    enc: &EncoderParams<F>,
    iem: &IemParams<F>,
) -> Result<(SeqForward<F>, crate::encoder::EncoderCache<F>)> {
    let (states, enc_cache) = encode_prefixes(seq, enc);
    let n = seq.events.len();
    let n_marks = iem.n_marks();
    let d_f = iem.d_f();
    let mut states_h = Array2::zeros((n + 1, enc.d_h()));
    for (k, st) in states.iter().enumerate() {
        states_h.row_mut(k).assign(&st.h);
    }
    let cond_h = states_h.dot(&iem.cond.t());

    let rows = (n + 2) * n_marks;
    let mut f0v = Array2::zeros((rows, d_f));
    for k in 0..=n {
        for m in 0..n_marks {
            let mut r = f0v.row_mut(k * n_marks + m);
            r.assign(&iem.b.row(m));
            r += &cond_h.row(k);
        }
    }
    let horizon_dt = seq.t_end - states[n].t_last;
    if horizon_dt < F::zero() {
        return Err(Error::Precondition("observation window ends before last event".into()));
    }
    for m in 0..n_marks {
        let mut r = f0v.row_mut((n + 1) * n_marks + m);
        r.assign(&iem.b.row(m));
        r += &cond_h.row(n);
        r.scaled_add(horizon_dt, &iem.v.row(m).to_owned());
    }
    let (acts_v, x_v) = mat_sweep_fwd(iem, &f0v);
    let s_v = x_v.mapv(|x| x.sigma_dec());

    let mut f0e = Array2::zeros((n, d_f));
    let mut at0 = Array2::zeros((n, d_f));
    let mut dts = Vec::with_capacity(n);
    for (i, ev) in seq.events.iter().enumerate() {
        let dt = ev.time - states[i].t_last;
        let mut r = f0e.row_mut(i);
        r.assign(&iem.b.row(ev.mark));
        r += &cond_h.row(i);
        r.scaled_add(dt, &iem.v.row(ev.mark).to_owned());
        at0.row_mut(i).assign(&iem.v.row(ev.mark));
        dts.push(dt);
    }
    let (a_e, at_e, zt_e, x_e, xt_e) = ev_sweep_fwd(iem, &f0e, &at0);

    Ok((
        SeqForward {
            states_h,
            f0v,
            acts_v,
            s_v,
            z: Vec::new(),
            surv: F::zero(),
            horizon_dt,
            f0e,
            at0,
            dts,
            a_e,
            at_e,
            zt_e,
            x_e,
            xt_e,
        },
        enc_cache,
    ))
}

fn finish_partition<F: Real>(fwd: &mut SeqForward<F>, iem: &IemParams<F>, tail_c: F, n: usize) -> Result<()> {
    let n_marks = iem.n_marks();
    let mf = F::of(n_marks as f64);
    fwd.z = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut z = iem.eps_den - mf * tail_c;
        for m in 0..n_marks {
            z += fwd.s_v[k * n_marks + m];
        }
        if z <= F::zero() {
            return Err(Error::Numeric(format!("partition function {z} <= 0")));
        }
        fwd.z.push(z);
    }
    let mut surv = -mf * tail_c;
    for m in 0..n_marks {
        surv += fwd.s_v[(n + 1) * n_marks + m];
    }
    fwd.surv = surv;
    Ok(())
}

/// Negative log-likelihood of one sequence under the model, split into the
/// event and survival terms.
pub fn nll_loss<F: Real>(seq: &EventSequence<F>, model: &IfnmtppModel<F>) -> Result<LossBreakdown<F>> {
    let iem = model.iem();
    check_saturated(&iem)?;
    let tail = tail_fwd(&iem);
    seq_loss(seq, model.encoder(), &iem, tail.c)
}

fn seq_loss<F: Real>(
    seq: &EventSequence<F>,
    enc: &EncoderParams<F>,
    iem: &IemParams<F>,
    tail_c: F,
) -> Result<LossBreakdown<F>> {
    let n = seq.events.len();
    let (mut fwd, _) = seq_forward(seq, enc, iem)?;
    finish_partition(&mut fwd, iem, tail_c, n)?;
    let floor = F::of(PDF_FLOOR);
    let mut bd = LossBreakdown::zero();
    bd.n_events = n;
    for i in 0..n {
        let s = fwd.x_e[i].sigma_dec();
        let pdf = s * (F::one() - s) * fwd.xt_e[i] / fwd.z[i];
        if pdf < floor {
            bd.event_term -= floor.ln();
            bd.n_floored += 1;
        } else {
            bd.event_term -= pdf.ln();
        }
    }
    bd.survival_term = -fwd.surv.max(floor).ln() + fwd.z[n].ln();
    bd.total = bd.event_term + bd.survival_term;
    Ok(bd)
}

/// Per-sequence gradients w.r.t. the effective parameters, plus the scalar
/// gradient w.r.t. the shared tail constant.
fn seq_grads<F: Real>(
    seq: &EventSequence<F>,
    enc: &EncoderParams<F>,
    iem: &IemParams<F>,
    tail_c: F,
    dims: ModelDims,
) -> Result<(ParamSet<F>, F, LossBreakdown<F>)> {
    let n = seq.events.len();
    let n_marks = iem.n_marks();
    let mf = F::of(n_marks as f64);
    let (mut fwd, enc_cache) = seq_forward(seq, enc, iem)?;
    finish_partition(&mut fwd, iem, tail_c, n)?;

    let floor = F::of(PDF_FLOOR);
    let mut bd = LossBreakdown::zero();
    bd.n_events = n;
    let mut g_xe = Array1::<F>::zeros(n);
    let mut g_xte = Array1::<F>::zeros(n);
    let mut g_z = vec![F::zero(); n + 1];
    for i in 0..n {
        let s = fwd.x_e[i].sigma_dec();
        let pdf = s * (F::one() - s) * fwd.xt_e[i] / fwd.z[i];
        if pdf < floor {
            bd.event_term -= floor.ln();
            bd.n_floored += 1;
            continue;
        }
        bd.event_term -= pdf.ln();
        // -log pdf = -log(s(1-s)) - log(x_t) + log Z
        g_xe[i] = F::one() - two_s(s);
        g_xte[i] = -F::one() / fwd.xt_e[i];
        g_z[i] += F::one() / fwd.z[i];
    }
    let surv_live = fwd.surv > floor;
    bd.survival_term = -fwd.surv.max(floor).ln() + fwd.z[n].ln();
    bd.total = bd.event_term + bd.survival_term;

    let mut g = ParamSet::zeros(dims);
    let mut g_c = F::zero();
    if surv_live {
        g_z[n] += F::one() / fwd.z[n];
        g_c += mf / fwd.surv;
    }

    // value-stack upstream: d s / d x = -s(1-s)
    let rows = (n + 2) * n_marks;
    let mut g_xv = Array1::<F>::zeros(rows);
    for k in 0..=n {
        if g_z[k] == F::zero() {
            continue;
        }
        g_c -= mf * g_z[k];
        for m in 0..n_marks {
            let idx = k * n_marks + m;
            let s = fwd.s_v[idx];
            g_xv[idx] = -g_z[k] * s * (F::one() - s);
        }
    }
    if surv_live {
        for m in 0..n_marks {
            let idx = (n + 1) * n_marks + m;
            let s = fwd.s_v[idx];
            g_xv[idx] = s * (F::one() - s) / fwd.surv;
        }
    }

    let mut g_condh = Array2::<F>::zeros((n + 1, iem.d_f()));
    let g_f0v = mat_sweep_bwd(iem, &fwd.f0v, &fwd.acts_v, &g_xv, &mut g);
    for k in 0..=n {
        for m in 0..n_marks {
            let row = g_f0v.row(k * n_marks + m);
            let mut gb = g.iem.b.row_mut(m);
            gb += &row;
            let mut gc = g_condh.row_mut(k);
            gc += &row;
        }
    }
    for m in 0..n_marks {
        let row = g_f0v.row((n + 1) * n_marks + m);
        let mut gb = g.iem.b.row_mut(m);
        gb += &row;
        let mut gv = g.iem.v.row_mut(m);
        gv.scaled_add(fwd.horizon_dt, &row);
        let mut gc = g_condh.row_mut(n);
        gc += &row;
    }

    if n > 0 {
        let (g_f0e, g_at0) = ev_sweep_bwd(
            iem, &fwd.f0e, &fwd.at0, &fwd.a_e, &fwd.at_e, &fwd.zt_e, &g_xe, &g_xte, &mut g,
        );
        for (i, ev) in seq.events.iter().enumerate() {
            let row = g_f0e.row(i);
            let mut gv = g.iem.v.row_mut(ev.mark);
            gv += &g_at0.row(i);
            gv.scaled_add(fwd.dts[i], &row);
            let mut gb = g.iem.b.row_mut(ev.mark);
            gb += &row;
            let mut gc = g_condh.row_mut(i);
            gc += &row;
        }
    }

    g.iem.cond += &g_condh.t().dot(&fwd.states_h);
    let upstream_mat = g_condh.dot(&iem.cond);
    let upstream: Vec<Array1<F>> = (0..=n).map(|k| upstream_mat.row(k).to_owned()).collect();
    g.encoder = encoder_backward(seq, enc, &enc_cache, &upstream)?;

    Ok((g, g_c, bd))
}

fn two_s<F: Real>(s: F) -> F {
    s + s
}

/// Gradient of the mean per-sequence loss over a batch, w.r.t. the raw
/// (pre-softplus) parameters, along with the summed loss breakdown.
pub fn loss_gradients<F: Real>(
    batch: &[&EventSequence<F>],
    model: &IfnmtppModel<F>,
) -> Result<(ParamSet<F>, LossBreakdown<F>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let iem = model.iem();
    check_saturated(&iem)?;
    let tail = tail_fwd(&iem);
    let enc = model.encoder();
    let dims = model.dims;
    let parts: Vec<Result<(ParamSet<F>, F, LossBreakdown<F>)>> = batch
        .par_iter()
        .map(|seq| seq_grads(seq, enc, &iem, tail.c, dims))
        .collect();
    let mut grads = ParamSet::zeros(dims);
    let mut g_c = F::zero();
    let mut bd = LossBreakdown::zero();
    for part in parts {
        let (g, gc, b) = part?;
        grads.add_scaled(&g, F::one());
        g_c += gc;
        bd.merge(&b);
    }
    tail_bwd(&iem, &tail, g_c, &mut grads);
    let scale = F::one() / F::of(batch.len() as f64);
    for slice in grads.slices_mut() {
        for x in slice {
            *x *= scale;
        }
    }
    model.chain_to_raw(&mut grads);
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((grads, bd))
}

/// Summed loss over many sequences (parallel, deterministic reduction).
pub fn dataset_nll<F: Real>(
    sequences: &[EventSequence<F>],
    model: &IfnmtppModel<F>,
) -> Result<LossBreakdown<F>> {
    let iem = model.iem();
    check_saturated(&iem)?;
    let tail = tail_fwd(&iem);
    let enc = model.encoder();
    let parts: Vec<Result<LossBreakdown<F>>> = sequences
        .par_iter()
        .map(|seq| seq_loss(seq, enc, &iem, tail.c))
        .collect();
    let mut bd = LossBreakdown::zero();
    for part in parts {
        bd.merge(&part?);
    }
    Ok(bd)
}

// ---------------------------------------------------------------------------
// optimizer and training loop
// ---------------------------------------------------------------------------

pub struct AdamState<F: Real> {
    m: ParamSet<F>,
    v: ParamSet<F>,
    t: usize,
}

impl<F: Real> AdamState<F> {
    pub fn new(dims: ModelDims) -> Self {
        AdamState { m: ParamSet::zeros(dims), v: ParamSet::zeros(dims), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: F, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = F::of(cfg.beta1);
        let b2 = F::of(cfg.beta2);
        let eps = F::of(cfg.adam_eps);
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        let gs = grads.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for ((p, g), (m, v)) in params.slices_mut().into_iter().zip(gs).zip(ms.into_iter().zip(vs)) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to the base rate, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// Trains a fresh model, validating periodically and returning the
/// checkpoint with the best validation loss.
pub fn train<F: Real>(
    train_ds: &Dataset<F>,
    val_ds: &Dataset<F>,
    dims: ModelDims,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if train_ds.sequences.is_empty() || val_ds.sequences.is_empty() {
        return Err(Error::Degenerate("empty training or validation split".into()));
    }
    if dims.n_marks != train_ds.vocab_size {
        return Err(Error::Config(format!(
            "model has {} marks but data has {}",
            dims.n_marks, train_ds.vocab_size
        )));
    }
    let mut model = IfnmtppModel::<F>::init(dims, cfg.seed);
    let mut adam = AdamState::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_train = train_ds.sequences.len();
    let mut best_val = f64::INFINITY;
    let mut best_params = model.raw.clone();
    let mut history = Vec::new();
    // Tail average of the iterates (exponential, ~1/(1-decay) step
    // horizon). At a constant learning rate the iterates orbit the
    // optimum with noise proportional to the rate; the average sits much
    // closer to the center and competes as a checkpoint candidate.
    let ema_decay = F::of(EMA_DECAY);
    let mut ema = model.raw.clone();
    for step in 1..=cfg.total_steps {
        let batch: Vec<&EventSequence<F>> = (0..cfg.batch_size)
            .map(|_| &train_ds.sequences[rng.gen_range(0..n_train)])
            .collect();
        let (grads, bd) = loss_gradients(&batch, &model)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        adam.step(&mut model.raw, &grads, F::of(lr_at(step, cfg)), cfg);
        if !model.raw.all_finite() {
            return Err(Error::Numeric(format!("parameters diverged at step {step}")));
        }
        for (e, p) in ema.slices_mut().into_iter().zip(model.raw.slices()) {
            for (ei, &pi) in e.iter_mut().zip(p) {
                *ei = ema_decay * *ei + (F::one() - ema_decay) * pi;
            }
        }
        if step % cfg.validate_every == 0 || step == cfg.total_steps {
            let val = dataset_nll(&val_ds.sequences, &model)?.per_event();
            history.push(TrainRecord { step, train_nll: bd.per_event(), val_nll: val });
            if val < best_val {
                best_val = val;
                best_params.clone_from(&model.raw);
            }
            let ema_model = IfnmtppModel { dims, raw: ema.clone() };
            let val_ema = dataset_nll(&val_ds.sequences, &ema_model)?.per_event();
            if val_ema < best_val {
                best_val = val_ema;
                best_params.clone_from(&ema);
            }
        }
    }
    Ok(TrainOutcome {
        model: IfnmtppModel { dims, raw: best_params },
        best_val_nll: best_val,
        history,
    })
}
