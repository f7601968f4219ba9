//! The representation map: identity on encoded features, or a per-dataset
//! beta-VAE encoder trained with KL annealing. Gradients are computed by an
//! explicit backward pass over the fixed two-layer architecture and checked
//! against finite differences in the tests.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BlockLayout, EncodedMatrix, Encoder};
use crate::error::{BcrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnealFamily {
    Constant,
    Linear,
    Cosine,
    Sine,
    Cyclical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub family: AnnealFamily,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_vae: usize,
    pub t_cyc: usize,
}

impl AnnealSchedule {
    pub fn new(family: AnnealFamily, beta_min: f64, beta_max: f64, t_vae: usize, t_cyc: usize) -> Result<Self> {
        if beta_min < 0.0 || beta_min > beta_max {
            return Err(BcrError::config("require 0 <= beta_min <= beta_max"));
        }
        if t_cyc < 1 {
            return Err(BcrError::config("t_cyc must be >= 1"));
        }
        Ok(AnnealSchedule { family, beta_min, beta_max, t_vae, t_cyc })
    }
}

/// KL weight at training epoch `t`.
pub fn beta_schedule(s: &AnnealSchedule, t: usize) -> Result<f64> {
    if t > s.t_vae {
        return Err(BcrError::config(format!("epoch {t} outside [0, {}]", s.t_vae)));
    }
    let frac = t as f64 / s.t_vae as f64;
    let v = match s.family {
        AnnealFamily::Constant => s.beta_max,
        AnnealFamily::Linear => s.beta_max * frac.min(1.0),
        AnnealFamily::Cosine => {
            s.beta_min + 0.5 * (s.beta_max - s.beta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        AnnealFamily::Sine => {
            s.beta_max - 0.5 * (s.beta_max - s.beta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        AnnealFamily::Cyclical => s.beta_max * ((t % s.t_cyc) as f64 / s.t_cyc as f64),
    };
    Ok(v)
}

/// Where numeric slots and one-hot groups live inside an encoded row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub numeric_slots: Vec<usize>,
    /// (offset, width) per categorical group.
    pub groups: Vec<(usize, usize)>,
    pub dim: usize,
}

impl FeatureLayout {
    pub fn from_encoder(encoder: &Encoder) -> Self {
        let mut numeric_slots = Vec::new();
        let mut groups = Vec::new();
        for b in &encoder.blocks {
            match *b {
                BlockLayout::Numeric { offset, .. } => numeric_slots.push(offset),
                BlockLayout::OneHot { offset, width, .. } => groups.push((offset, width)),
            }
        }
        FeatureLayout { numeric_slots, groups, dim: encoder.encoded_dim }
    }

    pub fn all_numeric(dim: usize) -> Self {
        FeatureLayout { numeric_slots: (0..dim).collect(), groups: Vec::new(), dim }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub layout: FeatureLayout,
    pub hidden: usize,
    pub latent: usize,
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array1<f64>,
    pub mu_w: Array2<f64>,
    pub mu_b: Array1<f64>,
    pub lv_w: Array2<f64>,
    pub lv_b: Array1<f64>,
    pub dec_w1: Array2<f64>,
    pub dec_b1: Array1<f64>,
    pub dec_w2: Array2<f64>,
    pub dec_b2: Array1<f64>,
}

impl VaeParams {
    pub fn init(layout: FeatureLayout, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let dim = layout.dim;
        let hidden = 32.max(2 * dim);
        let mut mat = |r: usize, c: usize| {
            let scale = (1.0 / c as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
        };
        VaeParams {
            layout,
            hidden,
            latent,
            enc_w1: mat(hidden, dim),
            enc_b1: Array1::zeros(hidden),
            mu_w: mat(latent, hidden),
            mu_b: Array1::zeros(latent),
            lv_w: mat(latent, hidden),
            lv_b: Array1::zeros(latent),
            dec_w1: mat(hidden, latent),
            dec_b1: Array1::zeros(hidden),
            dec_w2: mat(dim, hidden),
            dec_b2: Array1::zeros(dim),
        }
    }

    fn param_views_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for m in [
            &mut self.enc_w1,
            &mut self.mu_w,
            &mut self.lv_w,
            &mut self.dec_w1,
            &mut self.dec_w2,
        ] {
            out.extend(m.iter_mut());
        }
        for v in [
            &mut self.enc_b1,
            &mut self.mu_b,
            &mut self.lv_b,
            &mut self.dec_b1,
            &mut self.dec_b2,
        ] {
            out.extend(v.iter_mut());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut s = self.clone();
        s.param_views_mut().into_iter().map(|v| *v).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        for (slot, &v) in self.param_views_mut().into_iter().zip(flat.iter()) {
            *slot = v;
        }
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// mu(x): deterministic inference-time embedding.
    pub fn encode_mean(&self, x: &Array1<f64>) -> Array1<f64> {
        let h1 = (self.enc_w1.dot(x) + &self.enc_b1).mapv(f64::tanh);
        self.mu_w.dot(&h1) + &self.mu_b
    }

    /// Analytic Jacobian of mu(x): latent x dim.
    pub fn encode_jacobian(&self, x: &Array1<f64>) -> Array2<f64> {
        let pre = self.enc_w1.dot(x) + &self.enc_b1;
        let h1 = pre.mapv(f64::tanh);
        let gate = h1.mapv(|v| 1.0 - v * v);
        // mu_w * diag(gate) * enc_w1
        let mut scaled = self.enc_w1.clone();
        for (mut row, g) in scaled.rows_mut().into_iter().zip(gate.iter()) {
            row.mapv_inplace(|v| v * g);
        }
        self.mu_w.dot(&scaled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

struct ForwardTrace {
    h1: Array1<f64>,
    mu: Array1<f64>,
    lv: Array1<f64>,
    z: Array1<f64>,
    h2: Array1<f64>,
    out: Array1<f64>,
}

fn forward(p: &VaeParams, x: &Array1<f64>, eps: &Array1<f64>) -> ForwardTrace {
    let h1 = (p.enc_w1.dot(x) + &p.enc_b1).mapv(f64::tanh);
    let mu = p.mu_w.dot(&h1) + &p.mu_b;
    let lv = p.lv_w.dot(&h1) + &p.lv_b;
    let z = &mu + &(lv.mapv(|v| (0.5 * v).exp()) * eps);
    let h2 = (p.dec_w1.dot(&z) + &p.dec_b1).mapv(f64::tanh);
    let out = p.dec_w2.dot(&h2) + &p.dec_b2;
    ForwardTrace { h1, mu, lv, z, h2, out }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

fn reconstruction(layout: &FeatureLayout, out: &Array1<f64>, x: &Array1<f64>) -> (f64, Array1<f64>) {
    let mut rec = 0.0;
    let mut grad = Array1::zeros(out.len());
    if !layout.numeric_slots.is_empty() {
        let n = layout.numeric_slots.len() as f64;
        for &j in &layout.numeric_slots {
            let diff = out[j] - x[j];
            rec += diff * diff / n;
            grad[j] = 2.0 * diff / n;
        }
    }
    if !layout.groups.is_empty() {
        let g_count = layout.groups.len() as f64;
        for &(offset, width) in &layout.groups {
            let logits: Vec<f64> = (offset..offset + width).map(|j| out[j]).collect();
            let probs = softmax(&logits);
            let mut ce = 0.0;
            for k in 0..width {
                let target = x[offset + k];
                if target > 0.0 {
                    ce -= target * probs[k].max(1e-300).ln();
                }
                grad[offset + k] = (probs[k] - x[offset + k]) / g_count;
            }
            rec += ce / g_count;
        }
    }
    (rec, grad)
}

/// Composite ELBO terms at one input with the given reparameterization
/// noise: rec + beta * KL(N(mu, diag e^lv) || N(0, I)).
pub fn vae_loss(p: &VaeParams, x: &Array1<f64>, eps: &Array1<f64>, beta: f64) -> Result<VaeLoss> {
    let tr = forward(p, x, eps);
    let (rec, _) = reconstruction(&p.layout, &tr.out, x);
    let kl = 0.5
        * tr.mu
            .iter()
            .zip(tr.lv.iter())
            .map(|(&m, &l)| l.exp() + m * m - 1.0 - l)
            .sum::<f64>();
    let total = rec + beta * kl;
    if !total.is_finite() {
        return Err(BcrError::numeric("non-finite VAE forward pass"));
    }
    Ok(VaeLoss { rec, kl, total })
}

/// Loss plus the gradient of `total` with respect to every parameter,
/// flattened in the `flatten()` order.
pub fn vae_loss_grad(
    p: &VaeParams,
    x: &Array1<f64>,
    eps: &Array1<f64>,
    beta: f64,
) -> Result<(VaeLoss, VaeGrads)> {
    let tr = forward(p, x, eps);
    let (rec, g_out) = reconstruction(&p.layout, &tr.out, x);
    let kl = 0.5
        * tr.mu
            .iter()
            .zip(tr.lv.iter())
            .map(|(&m, &l)| l.exp() + m * m - 1.0 - l)
            .sum::<f64>();
    let total = rec + beta * kl;
    if !total.is_finite() {
        return Err(BcrError::numeric("non-finite VAE forward pass"));
    }

    // Decoder backward.
    let g_dec_w2 = outer(&g_out, &tr.h2);
    let g_dec_b2 = g_out.clone();
    let g_h2 = p.dec_w2.t().dot(&g_out);
    let g_pre2 = &g_h2 * &tr.h2.mapv(|v| 1.0 - v * v);
    let g_dec_w1 = outer(&g_pre2, &tr.z);
    let g_dec_b1 = g_pre2.clone();
    let g_z = p.dec_w1.t().dot(&g_pre2);

    // Reparameterization and KL.
    let std = tr.lv.mapv(|v| (0.5 * v).exp());
    let g_mu = &g_z + &tr.mu.mapv(|m| beta * m);
    let g_lv = &(&g_z * eps * &std * 0.5) + &tr.lv.mapv(|l| beta * 0.5 * (l.exp() - 1.0));

    // Encoder backward.
    let g_mu_w = outer(&g_mu, &tr.h1);
    let g_mu_b = g_mu.clone();
    let g_lv_w = outer(&g_lv, &tr.h1);
    let g_lv_b = g_lv.clone();
    let g_h1 = p.mu_w.t().dot(&g_mu) + p.lv_w.t().dot(&g_lv);
    let g_pre1 = &g_h1 * &tr.h1.mapv(|v| 1.0 - v * v);
    let g_enc_w1 = outer(&g_pre1, x);
    let g_enc_b1 = g_pre1;

    Ok((
        VaeLoss { rec, kl, total },
        VaeGrads {
            enc_w1: g_enc_w1,
            enc_b1: g_enc_b1,
            mu_w: g_mu_w,
            mu_b: g_mu_b,
            lv_w: g_lv_w,
            lv_b: g_lv_b,
            dec_w1: g_dec_w1,
            dec_b1: g_dec_b1,
            dec_w2: g_dec_w2,
            dec_b2: g_dec_b2,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array1<f64>,
    pub mu_w: Array2<f64>,
    pub mu_b: Array1<f64>,
    pub lv_w: Array2<f64>,
    pub lv_b: Array1<f64>,
    pub dec_w1: Array2<f64>,
    pub dec_b1: Array1<f64>,
    pub dec_w2: Array2<f64>,
    pub dec_b2: Array1<f64>,
}

impl VaeGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.enc_w1, &self.mu_w, &self.lv_w, &self.dec_w1, &self.dec_w2] {
            out.extend(m.iter().copied());
        }
        for v in [&self.enc_b1, &self.mu_b, &self.lv_b, &self.dec_b1, &self.dec_b2] {
            out.extend(v.iter().copied());
        }
        out
    }

    fn zeros_like(p: &VaeParams) -> Self {
        VaeGrads {
            enc_w1: Array2::zeros(p.enc_w1.dim()),
            enc_b1: Array1::zeros(p.enc_b1.len()),
            mu_w: Array2::zeros(p.mu_w.dim()),
            mu_b: Array1::zeros(p.mu_b.len()),
            lv_w: Array2::zeros(p.lv_w.dim()),
            lv_b: Array1::zeros(p.lv_b.len()),
            dec_w1: Array2::zeros(p.dec_w1.dim()),
            dec_b1: Array1::zeros(p.dec_b1.len()),
            dec_w2: Array2::zeros(p.dec_w2.dim()),
            dec_b2: Array1::zeros(p.dec_b2.len()),
        }
    }

    fn scale(&mut self, m: f64) {
        self.enc_w1.mapv_inplace(|x| x * m);
        self.enc_b1.mapv_inplace(|x| x * m);
        self.mu_w.mapv_inplace(|x| x * m);
        self.mu_b.mapv_inplace(|x| x * m);
        self.lv_w.mapv_inplace(|x| x * m);
        self.lv_b.mapv_inplace(|x| x * m);
        self.dec_w1.mapv_inplace(|x| x * m);
        self.dec_b1.mapv_inplace(|x| x * m);
        self.dec_w2.mapv_inplace(|x| x * m);
        self.dec_b2.mapv_inplace(|x| x * m);
    }

    fn accumulate(&mut self, other: &VaeGrads, scale: f64) {
        self.enc_w1.scaled_add(scale, &other.enc_w1);
        self.enc_b1.scaled_add(scale, &other.enc_b1);
        self.mu_w.scaled_add(scale, &other.mu_w);
        self.mu_b.scaled_add(scale, &other.mu_b);
        self.lv_w.scaled_add(scale, &other.lv_w);
        self.lv_b.scaled_add(scale, &other.lv_b);
        self.dec_w1.scaled_add(scale, &other.dec_w1);
        self.dec_b1.scaled_add(scale, &other.dec_b1);
        self.dec_w2.scaled_add(scale, &other.dec_w2);
        self.dec_b2.scaled_add(scale, &other.dec_b2);
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

pub struct VaeTrainConfig {
    pub latent: usize,
    pub schedule: AnnealSchedule,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl VaeTrainConfig {
    pub fn new(latent: usize, schedule: AnnealSchedule, epochs: usize, lr: f64, seed: u64) -> Self {
        VaeTrainConfig { latent, schedule, epochs, lr, momentum: 0.9, seed }
    }
}

/// Full-batch gradient descent with momentum; reparameterized sampling is
/// used during training only. Deterministic per seed.
pub fn vae_train(
    train: &EncodedMatrix,
    layout: FeatureLayout,
    cfg: &VaeTrainConfig,
) -> Result<(VaeParams, Vec<f64>)> {
    if train.n_rows() == 0 {
        return Err(BcrError::Empty("cannot train VAE on an empty matrix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = VaeParams::init(layout, cfg.latent, &mut rng);
    let n = train.n_rows();
    let inv_n = 1.0 / n as f64;
    let mut velocity = VaeGrads::zeros_like(&p);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let beta = beta_schedule(&cfg.schedule, epoch.min(cfg.schedule.t_vae))?;
        let mut total = 0.0;
        let mut grads = VaeGrads::zeros_like(&p);
        for i in 0..n {
            let x = train.values.row(i).to_owned();
            let eps = Array1::from_shape_fn(p.latent, |_| standard_normal(&mut rng));
            let (loss, g) = vae_loss_grad(&p, &x, &eps, beta)?;
            total += loss.total * inv_n;
            grads.accumulate(&g, inv_n);
        }
        if !total.is_finite() {
            return Err(BcrError::numeric(format!("VAE training diverged at epoch {epoch}")));
        }
        history.push(total);
        // v <- m*v - lr*g; p <- p + v
        velocity.scale(cfg.momentum);
        velocity.accumulate(&grads, -cfg.lr);
        apply_update(&mut p, &velocity);
    }
    Ok((p, history))
}

fn apply_update(p: &mut VaeParams, v: &VaeGrads) {
    p.enc_w1 += &v.enc_w1;
    p.enc_b1 += &v.enc_b1;
    p.mu_w += &v.mu_w;
    p.mu_b += &v.mu_b;
    p.lv_w += &v.lv_w;
    p.lv_b += &v.lv_b;
    p.dec_w1 += &v.dec_w1;
    p.dec_b1 += &v.dec_b1;
    p.dec_w2 += &v.dec_w2;
    p.dec_b2 += &v.dec_b2;
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// phi: identity on encoded features, or a beta-VAE posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub enum RepMap {
    Identity { dim: usize },
    Vae(VaeParams),
}

impl RepMap {
    pub fn identity(dim: usize) -> Self {
        RepMap::Identity { dim }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            RepMap::Identity { dim } => *dim,
            RepMap::Vae(p) => p.latent,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            RepMap::Identity { dim } => *dim,
            RepMap::Vae(p) => p.layout.dim,
        }
    }

    pub fn map(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(BcrError::DimMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(match self {
            RepMap::Identity { .. } => x.clone(),
            RepMap::Vae(p) => p.encode_mean(x),
        })
    }

    pub fn map_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(BcrError::DimMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(match self {
            RepMap::Identity { .. } => x.clone(),
            RepMap::Vae(p) => {
                let mut out = Array2::zeros((x.nrows(), p.latent));
                for (i, row) in x.rows().into_iter().enumerate() {
                    out.row_mut(i).assign(&p.encode_mean(&row.to_owned()));
                }
                out
            }
        })
    }

    pub fn map_jacobian(&self, x: &Array1<f64>) -> Result<Array2<f64>> {
        if x.len() != self.input_dim() {
            return Err(BcrError::DimMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(match self {
            RepMap::Identity { dim } => Array2::eye(*dim),
            RepMap::Vae(p) => p.encode_jacobian(x),
        })
    }
}

const VAE_MAGIC: &[u8; 4] = b"BCRV";

/// Flat binary persistence for a trained encoder, so a representation map
/// can be reused across search trials.
pub fn save_vae<W: Write>(w: &mut W, p: &VaeParams) -> Result<()> {
    w.write_all(VAE_MAGIC)?;
    let header = [
        p.layout.dim as u32,
        p.hidden as u32,
        p.latent as u32,
        p.layout.numeric_slots.len() as u32,
        p.layout.groups.len() as u32,
    ];
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for &s in &p.layout.numeric_slots {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for &(o, width) in &p.layout.groups {
        w.write_all(&(o as u32).to_le_bytes())?;
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    for v in p.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_vae<R: Read>(r: &mut R) -> Result<VaeParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VAE_MAGIC {
        return Err(BcrError::Format("bad magic: expected BCRV".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut next = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let dim = next(r)? as usize;
    let hidden = next(r)? as usize;
    let latent = next(r)? as usize;
    let n_num = next(r)? as usize;
    let n_groups = next(r)? as usize;
    let mut numeric_slots = Vec::with_capacity(n_num);
    for _ in 0..n_num {
        numeric_slots.push(next(r)? as usize);
    }
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let o = next(r)? as usize;
        let w = next(r)? as usize;
        groups.push((o, w));
    }
    let layout = FeatureLayout { numeric_slots, groups, dim };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = VaeParams::init(layout, latent, &mut rng);
    if p.hidden != hidden {
        return Err(BcrError::Format("hidden width mismatch in VAE file".into()));
    }
    let n = p.n_params();
    let mut flat = Vec::with_capacity(n);
    let mut f64buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut f64buf)?;
        flat.push(f64::from_le_bytes(f64buf));
    }
    p.assign_flat(&flat);
    Ok(p)
}
