//! Dense variational auto-encoder, built from scratch: sigmoid MLP encoder
//! with Gaussian mean/log-variance heads, sigmoid MLP decoder emitting
//! Bernoulli means, reparameterized ELBO training with Adam, and a binary
//! weight format.
//!
//! Gradient accumulation over a batch is chunked with a fixed chunk size
//! and folded in chunk order, so results are bit-identical whether the
//! chunks run on rayon or sequentially.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::epsim::ParamField;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::seed::{rng_from, standard_normal_vec};

/// Log-variance head outputs are clamped to this symmetric range.
pub const LOG_VAR_CLAMP: f64 = 20.0;
/// Decoder means are clamped this far inside (0, 1) before entering logs.
pub const BERNOULLI_EPS: f64 = 1e-7;
/// Fixed accumulation chunk: determinism does not depend on thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl VaeArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, latent_dim: usize) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(CoreError::invalid("input_dim and latent_dim must be positive"));
        }
        if hidden_dims.is_empty() || hidden_dims.iter().any(|&d| d == 0) {
            return Err(CoreError::invalid("hidden_dims must be non-empty and positive"));
        }
        Ok(VaeArch {
            input_dim,
            hidden_dims,
            latent_dim,
        })
    }
}

/// Per-sample Gaussian posterior over the latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: Array1<f64>,
    pub log_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// in x out.
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Dense {
    fn glorot(rng: &mut impl Rng, n_in: usize, n_out: usize) -> Dense {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_fn((n_in, n_out), |_| (rng.random::<f64>() * 2.0 - 1.0) * limit);
        Dense {
            w,
            b: Array1::zeros(n_out),
        }
    }

    fn zeros(n_in: usize, n_out: usize) -> Dense {
        Dense {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    fn linear(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(sigmoid);
}

#[derive(Debug, Clone, Default)]
pub struct TrainMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
    /// Mean loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Encoder/decoder weights plus training metadata. The decoder mirrors the
/// encoder's hidden stack in reverse order.
#[derive(Debug, Clone)]
pub struct VaeModel {
    arch: VaeArch,
    enc: Vec<Dense>,
    enc_mean: Dense,
    enc_log_var: Dense,
    dec: Vec<Dense>,
    dec_out: Dense,
    pub meta: TrainMeta,
}

/// Gradient (or optimizer moment) storage with the same layer shapes as a
/// model.
#[derive(Debug, Clone)]
pub struct VaeGrads {
    enc: Vec<Dense>,
    enc_mean: Dense,
    enc_log_var: Dense,
    dec: Vec<Dense>,
    dec_out: Dense,
}

impl VaeModel {
    /// Seeded Glorot-uniform initialization, zero biases.
    pub fn init(arch: VaeArch, seed: u64) -> VaeModel {
        let mut rng = rng_from(seed);
        let mut enc = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden_dims {
            enc.push(Dense::glorot(&mut rng, prev, h));
            prev = h;
        }
        let enc_mean = Dense::glorot(&mut rng, prev, arch.latent_dim);
        let enc_log_var = Dense::glorot(&mut rng, prev, arch.latent_dim);
        let mut dec = Vec::new();
        let mut dprev = arch.latent_dim;
        for &h in arch.hidden_dims.iter().rev() {
            dec.push(Dense::glorot(&mut rng, dprev, h));
            dprev = h;
        }
        let dec_out = Dense::glorot(&mut rng, dprev, arch.input_dim);
        VaeModel {
            arch,
            enc,
            enc_mean,
            enc_log_var,
            dec,
            dec_out,
            meta: TrainMeta::default(),
        }
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn layers(&self) -> Vec<(&Array2<f64>, &Array1<f64>)> {
        let mut out = Vec::new();
        for d in &self.enc {
            out.push((&d.w, &d.b));
        }
        out.push((&self.enc_mean.w, &self.enc_mean.b));
        out.push((&self.enc_log_var.w, &self.enc_log_var.b));
        for d in &self.dec {
            out.push((&d.w, &d.b));
        }
        out.push((&self.dec_out.w, &self.dec_out.b));
        out
    }

    fn layers_mut(&mut self) -> Vec<(&mut Array2<f64>, &mut Array1<f64>)> {
        let mut out: Vec<(&mut Array2<f64>, &mut Array1<f64>)> = Vec::new();
        for d in &mut self.enc {
            out.push((&mut d.w, &mut d.b));
        }
        out.push((&mut self.enc_mean.w, &mut self.enc_mean.b));
        out.push((&mut self.enc_log_var.w, &mut self.enc_log_var.b));
        for d in &mut self.dec {
            out.push((&mut d.w, &mut d.b));
        }
        out.push((&mut self.dec_out.w, &mut self.dec_out.b));
        out
    }

    /// Total scalar parameter count, in the fixed traversal order used by
    /// [`VaeModel::param`].
    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for (w, b) in self.layers() {
            if idx < w.len() {
                return *w.iter().nth(idx).unwrap();
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for (w, b) in self.layers_mut() {
            if idx < w.len() {
                *w.iter_mut().nth(idx).unwrap() = value;
                return;
            }
            idx -= w.len();
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Zeroes every weight matrix, leaving biases; handy for contract tests.
    pub fn zero_weights(&mut self) {
        for (w, _) in self.layers_mut() {
            w.fill(0.0);
        }
    }

    /// Overwrites the encoder head biases (mean, log-variance).
    pub fn set_head_biases(&mut self, mean: &[f64], log_var: &[f64]) {
        self.enc_mean.b = Array1::from_vec(mean.to_vec());
        self.enc_log_var.b = Array1::from_vec(log_var.to_vec());
    }

    /// Overwrites the decoder output bias.
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        self.dec_out.b = Array1::from_vec(bias.to_vec());
    }

    fn encoder_hidden(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.enc.len() + 1);
        acts.push(x.clone());
        for layer in &self.enc {
            let mut a = layer.linear(acts.last().unwrap());
            sigmoid_inplace(&mut a);
            acts.push(a);
        }
        acts
    }

    /// Batch encoder pass: rows of `x` map to posterior (means, log-vars).
    pub fn encode_batch(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.arch.input_dim {
            return Err(CoreError::DimensionMismatch {
                context: "encoder input",
                expected: self.arch.input_dim,
                got: x.ncols(),
            });
        }
        let rows = x.nrows();
        let chunks = rows.div_ceil(GRAD_CHUNK).max(1);
        let parts: Vec<(Array2<f64>, Array2<f64>)> = exec::map_range(chunks, |ci| {
            let lo = ci * GRAD_CHUNK;
            let hi = ((ci + 1) * GRAD_CHUNK).min(rows);
            let sub = x.slice(ndarray::s![lo..hi, ..]).to_owned();
            let acts = self.encoder_hidden(&sub);
            let h = acts.last().unwrap();
            let mean = self.enc_mean.linear(h);
            let mut log_var = self.enc_log_var.linear(h);
            log_var.mapv_inplace(|g| g.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
            (mean, log_var)
        });
        let l = self.arch.latent_dim;
        let mut means = Array2::zeros((rows, l));
        let mut log_vars = Array2::zeros((rows, l));
        for (ci, (m, g)) in parts.into_iter().enumerate() {
            let lo = ci * GRAD_CHUNK;
            means.slice_mut(ndarray::s![lo..lo + m.nrows(), ..]).assign(&m);
            log_vars
                .slice_mut(ndarray::s![lo..lo + g.nrows(), ..])
                .assign(&g);
        }
        Ok((means, log_vars))
    }

    /// Deterministic encoder forward pass for one field.
    pub fn encode(&self, field: &ParamField) -> Result<LatentPosterior> {
        self.encode_values(field.values())
    }

    pub fn encode_values(&self, values: &[f64]) -> Result<LatentPosterior> {
        let x = ArrayView2::from_shape((1, values.len()), values)
            .map_err(|e| CoreError::invalid(e.to_string()))?;
        let (mean, log_var) = self.encode_batch(&x)?;
        Ok(LatentPosterior {
            mean: mean.row(0).to_owned(),
            log_var: log_var.row(0).to_owned(),
        })
    }

    /// Decoder expectation at `z`: a parameter field with entries in (0, 1).
    /// Outputs are clamped a hair inside the open interval so downstream
    /// field invariants hold even for saturated logits.
    pub fn decode_mean(&self, z: &[f64]) -> Result<ParamField> {
        if z.len() != self.arch.latent_dim {
            return Err(CoreError::DimensionMismatch {
                context: "decoder input",
                expected: self.arch.latent_dim,
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("latent vector has non-finite entries"));
        }
        let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
        let p = self.decode_batch(&zm);
        ParamField::new(p.row(0).to_vec())
    }

    fn decode_batch(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut a = z.clone();
        for layer in &self.dec {
            a = layer.linear(&a);
            sigmoid_inplace(&mut a);
        }
        let mut p = self.dec_out.linear(&a);
        sigmoid_inplace(&mut p);
        p.mapv_inplace(|v| v.clamp(1e-15, 1.0 - 1e-15));
        p
    }
}

/// `z = mean + exp(log_var / 2) * noise`, elementwise.
pub fn reparameterize(post: &LatentPosterior, noise: &ArrayView1<f64>) -> Array1<f64> {
    let mut z = post.mean.clone();
    for (i, zi) in z.iter_mut().enumerate() {
        *zi += (post.log_var[i] / 2.0).exp() * noise[i];
    }
    z
}

/// Analytic KL divergence of the posterior from the standard normal:
/// `-1/2 sum(1 + log_var - mean^2 - exp(log_var))`.
pub fn kl_divergence(post: &LatentPosterior) -> f64 {
    let mut s = 0.0;
    for i in 0..post.mean.len() {
        let g = post.log_var[i];
        s += 1.0 + g - post.mean[i] * post.mean[i] - g.exp();
    }
    -0.5 * s
}

impl VaeGrads {
    pub fn zeros_like(model: &VaeModel) -> VaeGrads {
        VaeGrads {
            enc: model
                .enc
                .iter()
                .map(|d| Dense::zeros(d.w.nrows(), d.w.ncols()))
                .collect(),
            enc_mean: Dense::zeros(model.enc_mean.w.nrows(), model.enc_mean.w.ncols()),
            enc_log_var: Dense::zeros(model.enc_log_var.w.nrows(), model.enc_log_var.w.ncols()),
            dec: model
                .dec
                .iter()
                .map(|d| Dense::zeros(d.w.nrows(), d.w.ncols()))
                .collect(),
            dec_out: Dense::zeros(model.dec_out.w.nrows(), model.dec_out.w.ncols()),
        }
    }

    fn layers(&self) -> Vec<(&Array2<f64>, &Array1<f64>)> {
        let mut out = Vec::new();
        for d in &self.enc {
            out.push((&d.w, &d.b));
        }
        out.push((&self.enc_mean.w, &self.enc_mean.b));
        out.push((&self.enc_log_var.w, &self.enc_log_var.b));
        for d in &self.dec {
            out.push((&d.w, &d.b));
        }
        out.push((&self.dec_out.w, &self.dec_out.b));
        out
    }

    fn layers_mut(&mut self) -> Vec<(&mut Array2<f64>, &mut Array1<f64>)> {
        let mut out: Vec<(&mut Array2<f64>, &mut Array1<f64>)> = Vec::new();
        for d in &mut self.enc {
            out.push((&mut d.w, &mut d.b));
        }
        out.push((&mut self.enc_mean.w, &mut self.enc_mean.b));
        out.push((&mut self.enc_log_var.w, &mut self.enc_log_var.b));
        for d in &mut self.dec {
            out.push((&mut d.w, &mut d.b));
        }
        out.push((&mut self.dec_out.w, &mut self.dec_out.b));
        out
    }

    fn add(&mut self, other: &VaeGrads) {
        for ((w, b), (ow, ob)) in self.layers_mut().into_iter().zip(other.layers()) {
            *w += ow;
            *b += ob;
        }
    }

    fn scale(&mut self, f: f64) {
        for (w, b) in self.layers_mut() {
            w.mapv_inplace(|v| v * f);
            b.mapv_inplace(|v| v * f);
        }
    }

    /// Parameter read in the same traversal order as [`VaeModel::param`].
    pub fn param(&self, mut idx: usize) -> f64 {
        for (w, b) in self.layers() {
            if idx < w.len() {
                return *w.iter().nth(idx).unwrap();
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }
}

/// Negative-ELBO loss and its gradient over a batch.
///
/// Loss per sample is `KL - Bernoulli log-likelihood` with
/// `p = decode(reparameterize(encode(x), noise))`; the batch loss is the
/// sample mean. `noise` supplies the standard-normal draws (one row per
/// sample), which keeps the whole computation a deterministic function of
/// its arguments.
pub fn elbo_loss(
    model: &VaeModel,
    batch: &ArrayView2<f64>,
    noise: &ArrayView2<f64>,
) -> Result<(f64, VaeGrads)> {
    let b = batch.nrows();
    if b == 0 {
        return Err(CoreError::invalid("elbo batch is empty"));
    }
    if batch.ncols() != model.arch.input_dim {
        return Err(CoreError::DimensionMismatch {
            context: "elbo batch columns",
            expected: model.arch.input_dim,
            got: batch.ncols(),
        });
    }
    if noise.nrows() != b || noise.ncols() != model.arch.latent_dim {
        return Err(CoreError::DimensionMismatch {
            context: "elbo noise shape",
            expected: b * model.arch.latent_dim,
            got: noise.len(),
        });
    }
    if batch.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::invalid("elbo batch values must lie in [0, 1]"));
    }

    let chunks = b.div_ceil(GRAD_CHUNK);
    let parts: Vec<(f64, VaeGrads)> = exec::map_range(chunks, |ci| {
        let lo = ci * GRAD_CHUNK;
        let hi = ((ci + 1) * GRAD_CHUNK).min(b);
        let x = batch.slice(ndarray::s![lo..hi, ..]).to_owned();
        let e = noise.slice(ndarray::s![lo..hi, ..]).to_owned();
        elbo_chunk(model, &x, &e)
    });
    let mut loss_sum = 0.0;
    let mut grads = VaeGrads::zeros_like(model);
    for (l, g) in &parts {
        loss_sum += l;
        grads.add(g);
    }
    let inv_b = 1.0 / b as f64;
    grads.scale(inv_b);
    Ok((loss_sum * inv_b, grads))
}

/// Loss **sum** and gradient **sums** over one chunk.
fn elbo_chunk(model: &VaeModel, x: &Array2<f64>, e: &Array2<f64>) -> (f64, VaeGrads) {
    // ---- forward ----
    let enc_acts = model.encoder_hidden(x);
    let h = enc_acts.last().unwrap();
    let mean = model.enc_mean.linear(h);
    let log_var_raw = model.enc_log_var.linear(h);
    let log_var = log_var_raw.mapv(|g| g.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
    let std = log_var.mapv(|g| (g / 2.0).exp());
    let z = &mean + &(&std * e);

    let mut dec_acts = Vec::with_capacity(model.dec.len() + 1);
    dec_acts.push(z.clone());
    for layer in &model.dec {
        let mut a = layer.linear(dec_acts.last().unwrap());
        sigmoid_inplace(&mut a);
        dec_acts.push(a);
    }
    let mut p = model.dec_out.linear(dec_acts.last().unwrap());
    sigmoid_inplace(&mut p);
    let pc = p.mapv(|v| v.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS));

    let mut loss_sum = 0.0;
    for (xi, pi) in x.iter().zip(pc.iter()) {
        loss_sum -= xi * pi.ln() + (1.0 - xi) * (1.0 - pi).ln();
    }
    for i in 0..mean.nrows() {
        for l in 0..mean.ncols() {
            let g = log_var[[i, l]];
            let mu = mean[[i, l]];
            loss_sum += -0.5 * (1.0 + g - mu * mu - g.exp());
        }
    }

    // ---- backward ----
    let mut grads = VaeGrads::zeros_like(model);

    // d(loss)/d(p): zero where the Bernoulli clamp is active
    let mut dp = Array2::zeros(p.raw_dim());
    for ((dpi, (&xi, &pi)), &praw) in dp.iter_mut().zip(x.iter().zip(pc.iter())).zip(p.iter()) {
        if praw > BERNOULLI_EPS && praw < 1.0 - BERNOULLI_EPS {
            *dpi = -(xi / pi) + (1.0 - xi) / (1.0 - pi);
        }
    }
    // through the output sigmoid
    let mut delta = &dp * &p.mapv(|v| v * (1.0 - v));
    grads.dec_out.w = dec_acts.last().unwrap().t().dot(&delta);
    grads.dec_out.b = delta.sum_axis(Axis(0));
    let mut da = delta.dot(&model.dec_out.w.t());
    for j in (0..model.dec.len()).rev() {
        let a = &dec_acts[j + 1];
        delta = &da * &a.mapv(|v| v * (1.0 - v));
        grads.dec[j].w = dec_acts[j].t().dot(&delta);
        grads.dec[j].b = delta.sum_axis(Axis(0));
        da = delta.dot(&model.dec[j].w.t());
    }
    let dz = da;

    // reparameterization: z = mean + std * e
    let mut d_mean = dz.clone();
    let mut d_log_var = &dz * e * &std * 0.5;
    // KL terms: d/dmean = mean, d/dlog_var = -(1 - exp(log_var)) / 2
    d_mean += &mean;
    d_log_var += &log_var.mapv(|g| -0.5 * (1.0 - g.exp()));
    // clamp mask on the raw log-variance head
    let d_log_var_raw = ndarray::Zip::from(&d_log_var)
        .and(&log_var_raw)
        .map_collect(|&d, &raw| if raw.abs() < LOG_VAR_CLAMP { d } else { 0.0 });

    grads.enc_mean.w = h.t().dot(&d_mean);
    grads.enc_mean.b = d_mean.sum_axis(Axis(0));
    grads.enc_log_var.w = h.t().dot(&d_log_var_raw);
    grads.enc_log_var.b = d_log_var_raw.sum_axis(Axis(0));

    let mut dh = d_mean.dot(&model.enc_mean.w.t()) + d_log_var_raw.dot(&model.enc_log_var.w.t());
    for j in (0..model.enc.len()).rev() {
        let a = &enc_acts[j + 1];
        let delta = &dh * &a.mapv(|v| v * (1.0 - v));
        grads.enc[j].w = enc_acts[j].t().dot(&delta);
        grads.enc[j].b = delta.sum_axis(Axis(0));
        dh = delta.dot(&model.enc[j].w.t());
    }

    (loss_sum, grads)
}

/// Adam hyperparameters and the training schedule.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 50,
            batch_size: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
        }
    }
}

/// Minibatch Adam over the negative ELBO. Shuffles each epoch with the
/// seeded stream; the returned model records epoch-mean losses in its
/// metadata. Deterministic given the seed.
pub fn train(
    mut model: VaeModel,
    fields: &ArrayView2<f64>,
    params: &TrainParams,
) -> Result<VaeModel> {
    if fields.nrows() == 0 {
        return Err(CoreError::invalid("training dataset is empty"));
    }
    if fields.ncols() != model.arch.input_dim {
        return Err(CoreError::DimensionMismatch {
            context: "training data columns",
            expected: model.arch.input_dim,
            got: fields.ncols(),
        });
    }
    if params.batch_size == 0 {
        return Err(CoreError::invalid("batch_size must be positive"));
    }
    let n = fields.nrows();
    let latent = model.arch.latent_dim;
    let mut rng = rng_from(params.rng_seed);
    let mut m = VaeGrads::zeros_like(&model);
    let mut v = VaeGrads::zeros_like(&model);
    let mut t: u64 = 0;
    let mut history = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(params.batch_size).enumerate() {
            let batch = fields.select(Axis(0), chunk);
            let noise_vals = standard_normal_vec(&mut rng, chunk.len() * latent);
            let noise = Array2::from_shape_vec((chunk.len(), latent), noise_vals).unwrap();
            let (loss, grads) = elbo_loss(&model, &batch.view(), &noise.view())?;
            if !loss.is_finite() {
                return Err(CoreError::invalid(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            t += 1;
            let bc1 = 1.0 - params.beta1.powi(t as i32);
            let bc2 = 1.0 - params.beta2.powi(t as i32);
            for (((pw, pb), (gw, gb)), ((mw, mb), (vw, vb))) in model
                .layers_mut()
                .into_iter()
                .zip(grads.layers())
                .zip(m.layers_mut().into_iter().zip(v.layers_mut()))
            {
                adam_update(
                    pw.as_slice_mut().unwrap(),
                    gw.as_slice().unwrap(),
                    mw.as_slice_mut().unwrap(),
                    vw.as_slice_mut().unwrap(),
                    params,
                    bc1,
                    bc2,
                );
                adam_update(
                    pb.as_slice_mut().unwrap(),
                    gb.as_slice().unwrap(),
                    mb.as_slice_mut().unwrap(),
                    vb.as_slice_mut().unwrap(),
                    params,
                    bc1,
                    bc2,
                );
            }
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(epoch_loss / seen as f64);
    }
    model.meta = TrainMeta {
        epochs: params.epochs,
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        seed: params.rng_seed,
        loss_history: history,
    };
    Ok(model)
}

fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    params: &TrainParams,
    bias_c1: f64,
    bias_c2: f64,
) {
    for i in 0..p.len() {
        m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * g[i];
        v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * g[i] * g[i];
        let mhat = m[i] / bias_c1;
        let vhat = v[i] / bias_c2;
        p[i] -= params.learning_rate * mhat / (vhat.sqrt() + params.adam_eps);
    }
}

const VAE_MAGIC: &[u8; 4] = b"VAE1";
const VAE_VERSION: u8 = 1;

impl VaeModel {
    /// Binary format: magic "VAE1", one version byte, u32 LE header
    /// (input_dim, n_hidden_layers, each hidden dim, latent_dim), then per
    /// layer a row-major f64 LE weight matrix followed by its bias vector:
    /// encoder stack, the two heads (mean then log-variance), then the
    /// decoder stack and output layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(VAE_MAGIC);
        buf.push(VAE_VERSION);
        buf.extend_from_slice(&(self.arch.input_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.arch.hidden_dims.len() as u32).to_le_bytes());
        for &h in &self.arch.hidden_dims {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.arch.latent_dim as u32).to_le_bytes());
        for (w, b) in self.layers() {
            for x in w.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for x in b.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VaeModel> {
        let name = path.display().to_string();
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| CoreError::malformed(&name, "truncated magic"))?;
        if &magic != VAE_MAGIC {
            return Err(CoreError::malformed(&name, "bad magic, expected VAE1"));
        }
        let mut version = [0u8; 1];
        f.read_exact(&mut version)
            .map_err(|_| CoreError::malformed(&name, "truncated version byte"))?;
        if version[0] != VAE_VERSION {
            return Err(CoreError::malformed(
                &name,
                format!("unsupported version {} (expected {VAE_VERSION})", version[0]),
            ));
        }
        let read_u32 = |f: &mut std::fs::File, name: &str| -> Result<usize> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)
                .map_err(|_| CoreError::malformed(name, "truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let input_dim = read_u32(&mut f, &name)?;
        let n_hidden = read_u32(&mut f, &name)?;
        if n_hidden > 64 {
            return Err(CoreError::malformed(&name, "implausible hidden layer count"));
        }
        let mut hidden_dims = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden_dims.push(read_u32(&mut f, &name)?);
        }
        let latent_dim = read_u32(&mut f, &name)?;
        let arch = VaeArch::new(input_dim, hidden_dims, latent_dim)
            .map_err(|e| CoreError::malformed(&name, e.to_string()))?;

        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        let mut offset = 0usize;
        let mut take = |n_in: usize, n_out: usize| -> Result<Dense> {
            let need = (n_in * n_out + n_out) * 8;
            if offset + need > rest.len() {
                return Err(CoreError::malformed(&name, "truncated weight payload"));
            }
            let wvals: Vec<f64> = rest[offset..offset + n_in * n_out * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n_in * n_out * 8;
            let bvals: Vec<f64> = rest[offset..offset + n_out * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n_out * 8;
            if wvals.iter().chain(bvals.iter()).any(|v| !v.is_finite()) {
                return Err(CoreError::malformed(&name, "non-finite weights"));
            }
            Ok(Dense {
                w: Array2::from_shape_vec((n_in, n_out), wvals).unwrap(),
                b: Array1::from_vec(bvals),
            })
        };

        let mut enc = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden_dims {
            enc.push(take(prev, h)?);
            prev = h;
        }
        let enc_mean = take(prev, arch.latent_dim)?;
        let enc_log_var = take(prev, arch.latent_dim)?;
        let mut dec = Vec::new();
        let mut dprev = arch.latent_dim;
        for &h in arch.hidden_dims.iter().rev() {
            dec.push(take(dprev, h)?);
            dprev = h;
        }
        let dec_out = take(dprev, arch.input_dim)?;
        drop(take);
        if offset != rest.len() {
            return Err(CoreError::malformed(&name, "trailing bytes after weights"));
        }
        Ok(VaeModel {
            arch,
            enc,
            enc_mean,
            enc_log_var,
            dec,
            dec_out,
            meta: TrainMeta::default(),
        })
    }
}
