//! Model container: encoder plus integral-network parameters, the
//! softplus reparameterization that keeps the constrained weights
//! non-negative, and the JSON checkpoint format.

use crate::data::NormalizationStats;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::iem::IemParams;
use crate::real::{softplus_inv, Real};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const EPS_DEN: f64 = 1e-10;

/// Network widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_marks: usize,
    /// Mark embedding width (defaults to `d_h`).
    pub d_e: usize,
    /// History state width.
    pub d_h: usize,
    /// Integral-network hidden width.
    pub d_f: usize,
    /// Number of non-negative fully connected layers.
    pub n_layers: usize,
}

impl ModelDims {
    pub fn new(n_marks: usize, d_h: usize, d_f: usize, n_layers: usize) -> Self {
        ModelDims { n_marks, d_e: d_h, d_h, d_f, n_layers }
    }
}

/// One full set of trainable values. The integral-network part stores
/// raw (pre-softplus) values for the constrained fields `v`, `layers_w`
/// and `agg`; [`IfnmtppModel::iem`] materializes the effective weights.
/// The same struct doubles as a gradient / optimizer-moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Real> {
    pub encoder: EncoderParams<F>,
    pub iem: IemParams<F>,
}

impl<F: Real> ParamSet<F> {
    pub fn zeros(dims: ModelDims) -> Self {
        ParamSet {
            encoder: EncoderParams::zeros(dims.n_marks, dims.d_e, dims.d_h),
            iem: IemParams {
                v: Array2::zeros((dims.n_marks, dims.d_f)),
                b: Array2::zeros((dims.n_marks, dims.d_f)),
                cond: Array2::zeros((dims.d_f, dims.d_h)),
                layers_w: (0..dims.n_layers)
                    .map(|_| Array2::zeros((dims.d_f, dims.d_f)))
                    .collect(),
                layers_b: (0..dims.n_layers).map(|_| Array1::zeros(dims.d_f)).collect(),
                agg: Array1::zeros(dims.d_f),
                eps_den: F::of(EPS_DEN),
            },
        }
    }

    /// All parameter arrays as contiguous slices, in a fixed order shared
    /// by gradients and optimizer moments.
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.encoder.embed.as_slice_mut().unwrap(),
            self.encoder.w_input.as_slice_mut().unwrap(),
            self.encoder.w_recur.as_slice_mut().unwrap(),
            self.encoder.bias.as_slice_mut().unwrap(),
            self.iem.v.as_slice_mut().unwrap(),
            self.iem.b.as_slice_mut().unwrap(),
            self.iem.cond.as_slice_mut().unwrap(),
        ];
        for w in &mut self.iem.layers_w {
            out.push(w.as_slice_mut().unwrap());
        }
        for b in &mut self.iem.layers_b {
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.iem.agg.as_slice_mut().unwrap());
        out
    }

    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![
            self.encoder.embed.as_slice().unwrap(),
            self.encoder.w_input.as_slice().unwrap(),
            self.encoder.w_recur.as_slice().unwrap(),
            self.encoder.bias.as_slice().unwrap(),
            self.iem.v.as_slice().unwrap(),
            self.iem.b.as_slice().unwrap(),
            self.iem.cond.as_slice().unwrap(),
        ];
        for w in &self.iem.layers_w {
            out.push(w.as_slice().unwrap());
        }
        for b in &self.iem.layers_b {
            out.push(b.as_slice().unwrap());
        }
        out.push(self.iem.agg.as_slice().unwrap());
        out
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += other * scale`, elementwise across every array.
    pub fn add_scaled(&mut self, other: &ParamSet<F>, scale: F) {
        let others = other.slices();
        for (dst, src) in self.slices_mut().into_iter().zip(others) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// The trained model: dimensions plus raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IfnmtppModel<F: Real> {
    pub dims: ModelDims,
    pub raw: ParamSet<F>,
}

impl<F: Real> IfnmtppModel<F> {
    /// Random initialization, deterministic given the seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::zeros(dims);
        let k_enc = 1.0 / (dims.d_h as f64).sqrt();
        for x in p.encoder.embed.iter_mut() {
            *x = F::of(rng.gen_range(-0.1..0.1));
        }
        for x in p.encoder.w_input.iter_mut() {
            *x = F::of(rng.gen_range(-k_enc..k_enc));
        }
        for x in p.encoder.w_recur.iter_mut() {
            *x = F::of(rng.gen_range(-k_enc..k_enc));
        }
        // forget-gate bias starts at 1
        for j in dims.d_h..2 * dims.d_h {
            p.encoder.bias[j] = F::one();
        }
        // IEM raw values: effective weights drawn positive, then mapped
        // back through the inverse softplus.
        let w_scale = 2.0 / dims.d_f as f64;
        for x in p.iem.v.iter_mut() {
            *x = F::of(softplus_inv(rng.gen_range(0.05..0.5)));
        }
        for x in p.iem.b.iter_mut() {
            *x = F::of(rng.gen_range(-0.5..0.5));
        }
        let k_cond = 1.0 / (dims.d_h as f64).sqrt();
        for x in p.iem.cond.iter_mut() {
            *x = F::of(rng.gen_range(-k_cond..k_cond));
        }
        for w in &mut p.iem.layers_w {
            for x in w.iter_mut() {
                *x = F::of(softplus_inv(rng.gen_range(0.1 * w_scale..w_scale)));
            }
        }
        for x in p.iem.agg.iter_mut() {
            *x = F::of(softplus_inv(rng.gen_range(0.1 * w_scale..w_scale)));
        }
        IfnmtppModel { dims, raw: p }
    }

    pub fn encoder(&self) -> &EncoderParams<F> {
        &self.raw.encoder
    }

    /// Materializes the effective integral-network parameters
    /// (softplus applied to the constrained fields).
    pub fn iem(&self) -> IemParams<F> {
        let r = &self.raw.iem;
        IemParams {
            v: r.v.mapv(|x| x.softplus()),
            b: r.b.clone(),
            cond: r.cond.clone(),
            layers_w: r.layers_w.iter().map(|w| w.mapv(|x| x.softplus())).collect(),
            layers_b: r.layers_b.clone(),
            agg: r.agg.mapv(|x| x.softplus()),
            eps_den: r.eps_den,
        }
    }

    /// Converts gradients w.r.t. effective weights into gradients w.r.t.
    /// the raw values (chain rule through softplus on constrained fields).
    pub fn chain_to_raw(&self, grads: &mut ParamSet<F>) {
        let r = &self.raw.iem;
        for (g, &raw) in grads.iem.v.iter_mut().zip(r.v.iter()) {
            *g *= raw.logistic();
        }
        for (gw, rw) in grads.iem.layers_w.iter_mut().zip(&r.layers_w) {
            for (g, &raw) in gw.iter_mut().zip(rw.iter()) {
                *g *= raw.logistic();
            }
        }
        for (g, &raw) in grads.iem.agg.iter_mut().zip(r.agg.iter()) {
            *g *= raw.logistic();
        }
    }
}

/// Portable checkpoint: a versioned JSON document of named float arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub stats: NormalizationStats,
    pub config: serde_json::Value,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model<F: Real>(
        model: &IfnmtppModel<F>,
        stats: NormalizationStats,
        config: serde_json::Value,
    ) -> Self {
        let mut arrays = BTreeMap::new();
        for (name, slice) in array_names(model.dims).into_iter().zip(model.raw.slices()) {
            arrays.insert(name, slice.iter().map(|x| x.as_f64()).collect());
        }
        Checkpoint { format_version: CHECKPOINT_VERSION, dims: model.dims, stats, config, arrays }
    }

    pub fn to_model<F: Real>(&self) -> Result<IfnmtppModel<F>> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let mut model = IfnmtppModel { dims: self.dims, raw: ParamSet::zeros(self.dims) };
        for (name, slice) in array_names(self.dims).into_iter().zip(model.raw.slices_mut()) {
            let src = self
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing array {name}")))?;
            if src.len() != slice.len() {
                return Err(Error::Config(format!(
                    "checkpoint array {name} has length {} (expected {})",
                    src.len(),
                    slice.len()
                )));
            }
            for (d, &s) in slice.iter_mut().zip(src) {
                *d = F::of(s);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn array_names(dims: ModelDims) -> Vec<String> {
    let mut names = vec![
        "encoder.embed".to_string(),
        "encoder.w_input".to_string(),
        "encoder.w_recur".to_string(),
        "encoder.bias".to_string(),
        "iem.v".to_string(),
        "iem.b".to_string(),
        "iem.cond".to_string(),
    ];
    for i in 0..dims.n_layers {
        names.push(format!("iem.layer_w.{i}"));
    }
    for i in 0..dims.n_layers {
        names.push(format!("iem.layer_b.{i}"));
    }
    names.push("iem.agg".to_string());
    names
}
