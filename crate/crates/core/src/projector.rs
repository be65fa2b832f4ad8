//! Time-conditioned projector from latent states to the semantic space.
//!
//! `ẑ = normalize(W₂·relu(W₁·[h; e(t)] + b₁) + b₂)` where `e(t)` is a
//! sinusoidal timestep embedding. Training uses the NT-Xent contrastive loss
//! with in-batch negatives and Adam, keeping the parameters of the epoch with
//! the best validation cosine.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, DenseMatrix, MatRef};
use crate::surrogate::Dataset;

pub const PROJECTOR_SCHEMA_VERSION: u32 = 1;

/// Sinusoidal embedding: entries `2i, 2i+1` are `sin(t·ω_i), cos(t·ω_i)` with
/// `ω_i = 10000^(−2(i+1)/dim)`, so the slowest pair is `(sin(t/10⁴), cos(t/10⁴))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be even")));
    }
    let mut out = vec![0.0; dim];
    write_timestep_embedding(t, &mut out);
    Ok(out)
}

fn write_timestep_embedding(t: usize, out: &mut [f64]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * (i + 1) as f64 / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    /// `hidden × (latent_dim + time_embed_dim)`
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// `embed_dim × hidden`
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Gradients with the same layout as [`ProjectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ParamGrads {
    fn zeros(p: &ProjectorParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.data().len()],
            b1: vec![0.0; p.hidden],
            w2: vec![0.0; p.w2.data().len()],
            b2: vec![0.0; p.embed_dim],
        }
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0))
    }
}

/// Activations of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    /// `n × in`
    x: Vec<f64>,
    /// `n × hidden`, pre-activation
    a1: Vec<f64>,
    /// `n × hidden`
    r: Vec<f64>,
    /// `n` norms of the pre-normalization output
    y_norm: Vec<f64>,
    /// `n × embed_dim`, unit rows
    z: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output(&self, i: usize) -> &[f64] {
        let e = self.z.len() / self.n;
        &self.z[i * e..(i + 1) * e]
    }

    /// Row-major `n × embed_dim` outputs.
    pub fn outputs(&self) -> &[f64] {
        &self.z
    }
}

impl ProjectorParams {
    pub const DEFAULT_HIDDEN: usize = 256;
    pub const DEFAULT_TIME_EMBED_DIM: usize = 32;

    /// He-initialized first layer, `1/√hidden`-scaled second layer, zero biases.
    pub fn init(
        latent_dim: usize,
        embed_dim: usize,
        hidden: usize,
        time_embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || embed_dim == 0 || hidden == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        if time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dim {time_embed_dim} must be even"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = latent_dim + time_embed_dim;
        let s1 = (2.0 / input as f64).sqrt();
        let s2 = 0.1 * (1.0 / hidden as f64).sqrt();
        let w1 = (0..hidden * input)
            .map(|_| s1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w2 = (0..embed_dim * hidden)
            .map(|_| s2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            latent_dim,
            embed_dim,
            hidden,
            time_embed_dim,
            w1: DenseMatrix::new(hidden, input, w1)?,
            b1: vec![0.0; hidden],
            w2: DenseMatrix::new(embed_dim, hidden, w2)?,
            b2: vec![0.0; embed_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.time_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.rows() == self.hidden
            && self.w1.cols() == self.input_dim()
            && self.b1.len() == self.hidden
            && self.w2.rows() == self.embed_dim
            && self.w2.cols() == self.hidden
            && self.b2.len() == self.embed_dim
            && self.time_embed_dim % 2 == 0;
        if !ok {
            return Err(Error::Dimension("projector parameter shapes are inconsistent".into()));
        }
        let finite = self.w1.data().iter().chain(&self.b1).chain(self.w2.data()).chain(&self.b2);
        if finite.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("projector parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn forward(&self, h: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_batch(h, &[t])?.z)
    }

    /// Forward pass over `ts.len()` row-major latents in `hs`.
    pub fn forward_batch(&self, hs: &[f64], ts: &[usize]) -> Result<ForwardCache> {
        let n = ts.len();
        let (l, te, hid, e) = (self.latent_dim, self.time_embed_dim, self.hidden, self.embed_dim);
        if hs.len() != n * l {
            return Err(Error::Dimension(format!(
                "expected {n} latents of length {l}, got {} values",
                hs.len()
            )));
        }
        let inp = l + te;
        let mut x = vec![0.0; n * inp];
        for i in 0..n {
            let row = &mut x[i * inp..(i + 1) * inp];
            row[..l].copy_from_slice(&hs[i * l..(i + 1) * l]);
            write_timestep_embedding(ts[i], &mut row[l..]);
        }
        let mut a1 = vec![0.0; n * hid];
        for row in a1.chunks_mut(hid) {
            row.copy_from_slice(&self.b1);
        }
        gemm(
            1.0,
            MatRef::new(&x, n, inp),
            MatRef::new(self.w1.data(), hid, inp).t(),
            1.0,
            &mut a1,
        );
        let r: Vec<f64> = a1.iter().map(|&a| a.max(0.0)).collect();
        let mut z = vec![0.0; n * e];
        for row in z.chunks_mut(e) {
            row.copy_from_slice(&self.b2);
        }
        gemm(
            1.0,
            MatRef::new(&r, n, hid),
            MatRef::new(self.w2.data(), e, hid).t(),
            1.0,
            &mut z,
        );
        let mut y_norm = Vec::with_capacity(n);
        for row in z.chunks_mut(e) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nrm > 0.0 && nrm.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "projector output has norm {nrm} before normalization"
                )));
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            y_norm.push(nrm);
        }
        Ok(ForwardCache {
            n,
            x,
            a1,
            r,
            y_norm,
            z,
        })
    }

    /// Gradients of a scalar whose gradient with respect to `ẑ` is `upstream`.
    pub fn backward(&self, h: &[f64], t: usize, upstream: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        let cache = self.forward_batch(h, &[t])?;
        let (g, gh) = self.backward_batch(&cache, upstream, true)?;
        Ok((g.expect("parameter gradients requested"), gh))
    }

    /// Batched reverse pass; `upstream` is row-major `n × embed_dim`.
    ///
    /// Parameter gradients are summed over the batch. The time-embedding
    /// part of the input gradient is discarded.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        param_grads: bool,
    ) -> Result<(Option<ParamGrads>, Vec<f64>)> {
        let n = cache.n;
        let (l, hid, e) = (self.latent_dim, self.hidden, self.embed_dim);
        let inp = self.input_dim();
        if upstream.len() != n * e {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                n * e
            )));
        }
        // Through normalization: (g − ẑ(ẑ·g)) / ‖y‖.
        let mut gy = vec![0.0; n * e];
        for i in 0..n {
            let z = &cache.z[i * e..(i + 1) * e];
            let g = &upstream[i * e..(i + 1) * e];
            let proj: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
            let inv = 1.0 / cache.y_norm[i];
            for k in 0..e {
                gy[i * e + k] = (g[k] - z[k] * proj) * inv;
            }
        }
        let mut ga1 = vec![0.0; n * hid];
        gemm(
            1.0,
            MatRef::new(&gy, n, e),
            MatRef::new(self.w2.data(), e, hid),
            0.0,
            &mut ga1,
        );
        for (g, &a) in ga1.iter_mut().zip(&cache.a1) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut gx = vec![0.0; n * inp];
        gemm(
            1.0,
            MatRef::new(&ga1, n, hid),
            MatRef::new(self.w1.data(), hid, inp),
            0.0,
            &mut gx,
        );
        let mut gh = vec![0.0; n * l];
        for i in 0..n {
            gh[i * l..(i + 1) * l].copy_from_slice(&gx[i * inp..i * inp + l]);
        }
        if !param_grads {
            return Ok((None, gh));
        }
        let mut grads = ParamGrads::zeros(self);
        gemm(
            1.0,
            MatRef::new(&gy, n, e).t(),
            MatRef::new(&cache.r, n, hid),
            0.0,
            &mut grads.w2,
        );
        gemm(
            1.0,
            MatRef::new(&ga1, n, hid).t(),
            MatRef::new(&cache.x, n, inp),
            0.0,
            &mut grads.w1,
        );
        for i in 0..n {
            for k in 0..e {
                grads.b2[k] += gy[i * e + k];
            }
            for k in 0..hid {
                grads.b1[k] += ga1[i * hid + k];
            }
        }
        Ok((Some(grads), gh))
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ProjectorFile {
            schema_version: PROJECTOR_SCHEMA_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ProjectorFile = serde_json::from_str(&text)?;
        if file.schema_version != PROJECTOR_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "projector schema {} is not supported (expected {PROJECTOR_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        file.params.validate()?;
        Ok(file.params)
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectorFile {
    schema_version: u32,
    params: ProjectorParams,
}

/// NT-Xent over row-major `n × d` batches; returns the mean loss and its
/// gradient with respect to `z_hat`.
///
/// Similarities are true cosines, so the gradient is exact for inputs of any norm.
pub fn nt_xent_loss(z_hat: &[f64], z: &[f64], dim: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if dim == 0 || z_hat.len() != z.len() || z_hat.len() % dim != 0 {
        return Err(Error::Dimension("NT-Xent batches must have equal shapes".into()));
    }
    let n = z_hat.len() / dim;
    if n < 2 {
        return Err(Error::Empty(
            "NT-Xent needs at least two pairs to have negatives".into(),
        ));
    }
    let (zh, zh_norm) = unit_rows(z_hat, dim)?;
    let (zn, _) = unit_rows(z, dim)?;
    let mut s = vec![0.0; n * n];
    gemm(
        1.0 / tau,
        MatRef::new(&zh, n, dim),
        MatRef::new(&zn, n, dim).t(),
        0.0,
        &mut s,
    );
    let mut loss = 0.0;
    // s becomes (softmax(s_i·) − δ_i·) / (n·τ), i.e. ∂L/∂(ẑ_i·z_j) after scaling.
    for i in 0..n {
        let row = &mut s[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[i];
        for v in row.iter_mut() {
            *v = (*v - max).exp() / sum;
        }
        row[i] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64 * tau);
    }
    let mut g_unit = vec![0.0; n * dim];
    gemm(
        1.0,
        MatRef::new(&s, n, n),
        MatRef::new(&zn, n, dim),
        0.0,
        &mut g_unit,
    );
    for i in 0..n {
        let u = &zh[i * dim..(i + 1) * dim];
        let g = &mut g_unit[i * dim..(i + 1) * dim];
        let proj: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            g[k] = (g[k] - u[k] * proj) / zh_norm[i];
        }
    }
    Ok((loss / n as f64, g_unit))
}

fn unit_rows(m: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = m.to_vec();
    let mut norms = Vec::with_capacity(m.len() / dim);
    for row in out.chunks_mut(dim) {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return Err(Error::Degenerate("zero or non-finite embedding in NT-Xent batch".into()));
        }
        row.iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    Ok((out, norms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 256,
            tau: 0.5,
            patience: 5,
            validation_fraction: 0.1,
            hidden: ProjectorParams::DEFAULT_HIDDEN,
            time_embed_dim: ProjectorParams::DEFAULT_TIME_EMBED_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.hidden == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "hidden must be positive and time_embed_dim even".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Epoch 0 is the initialization.
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_cosine: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &ProjectorParams, lr: f64) -> Self {
        let g = ParamGrads::zeros(p);
        let shapes: Vec<Vec<f64>> = g.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            step: 0,
            lr,
        }
    }

    fn update(&mut self, p: &mut ProjectorParams, g: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (param, grad)) in p.tensors_mut().into_iter().zip(g.tensors()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..param.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * grad[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                param[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trajectory-level train/validation split; returns record indices.
fn split_records(dataset: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<u64> = dataset.records.iter().map(|r| r.trajectory_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, "split"));
    ids.shuffle(&mut rng);
    let n_val = if ids.len() < 2 {
        0
    } else {
        ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1)
    };
    let val: std::collections::HashSet<u64> = ids[..n_val].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, r) in dataset.records.iter().enumerate() {
        if val.contains(&r.trajectory_id) {
            valid.push(i);
        } else {
            train.push(i);
        }
    }
    if valid.is_empty() {
        valid = train.clone();
    }
    (train, valid)
}

fn gather(dataset: &Dataset, idx: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let mut hs = Vec::new();
    let mut ts = Vec::with_capacity(idx.len());
    let mut zs = Vec::new();
    for &i in idx {
        let r = &dataset.records[i];
        hs.extend_from_slice(&r.h);
        ts.push(r.t);
        zs.extend_from_slice(&r.z_true);
    }
    (hs, ts, zs)
}

/// Mean cosine between projected latents and their true embeddings.
pub fn mean_cosine(params: &ProjectorParams, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let (hs, ts, zs) = gather(dataset, chunk);
        let cache = params.forward_batch(&hs, &ts)?;
        let e = params.embed_dim;
        for i in 0..chunk.len() {
            let z = &zs[i * e..(i + 1) * e];
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += cache
                .output(i)
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / zn;
        }
    }
    Ok(total / idx.len() as f64)
}

fn batches(idx: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    idx.chunks(batch_size).filter(|b| b.len() >= 2)
}

fn batch_loss(params: &ProjectorParams, dataset: &Dataset, batch: &[usize], tau: f64) -> Result<f64> {
    let (hs, ts, zs) = gather(dataset, batch);
    let cache = params.forward_batch(&hs, &ts)?;
    Ok(nt_xent_loss(cache.outputs(), &zs, params.embed_dim, tau)?.0)
}

/// Trains a projector on `dataset` with Adam and early stopping on validation cosine.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ProjectorParams, TrainLog)> {
    config.validate()?;
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Data("training dataset is empty".into()))?;
    let (latent_dim, embed_dim) = (first.h.len(), first.z_true.len());
    if dataset
        .records
        .iter()
        .any(|r| r.h.len() != latent_dim || r.z_true.len() != embed_dim)
    {
        return Err(Error::Data("dataset records have inconsistent shapes".into()));
    }
    let (mut train_idx, val_idx) = split_records(dataset, config.validation_fraction, config.seed);
    if batches(&train_idx, config.batch_size).next().is_none() {
        return Err(Error::Data(
            "training split has fewer than two records; no usable batch".into(),
        ));
    }
    let mut params = ProjectorParams::init(
        latent_dim,
        embed_dim,
        config.hidden,
        config.time_embed_dim,
        crate::derive_seed(config.seed, "projector-init"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "shuffle"));
    let mut adam = Adam::new(&params, config.learning_rate);

    let init_loss = {
        let (mut total, mut count) = (0.0, 0);
        for b in batches(&train_idx, config.batch_size) {
            total += batch_loss(&params, dataset, b, config.tau)?;
            count += 1;
        }
        total / count as f64
    };
    let init_cos = mean_cosine(&params, dataset, &val_idx)?;
    let mut log = TrainLog {
        epochs: vec![EpochLog {
            epoch: 0,
            train_loss: init_loss,
            val_cosine: init_cos,
        }],
        best_epoch: 0,
        best_val_cosine: init_cos,
        stopped_early: false,
    };
    let mut best = params.clone();
    let mut stale = 0usize;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0);
        for b in batches(&train_idx, config.batch_size) {
            let (hs, ts, zs) = gather(dataset, b);
            let cache = params.forward_batch(&hs, &ts)?;
            let (loss, gz) = nt_xent_loss(cache.outputs(), &zs, embed_dim, config.tau)?;
            let (grads, _) = params.backward_batch(&cache, &gz, true)?;
            adam.update(&mut params, &grads.expect("parameter gradients requested"));
            total += loss;
            count += 1;
        }
        let train_loss = total / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
        }
        let val_cosine = mean_cosine(&params, dataset, &val_idx)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_cosine,
        });
        if val_cosine > log.best_val_cosine {
            log.best_val_cosine = val_cosine;
            log.best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience.max(1) {
                log.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;
    use crate::surrogate::{GeneratorConfig, Surrogate};
    use proptest::prelude::*;
    use rand::Rng;

    /// Relative error, with the denominator floored at the rounding scale of
    /// the difference quotients so exact zeros compare sensibly.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    #[test]
    fn embedding_cases() {
        let e = timestep_embedding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        assert_eq!(timestep_embedding(37, 32).unwrap().len(), 32);
        let e = timestep_embedding(10_000, 2).unwrap();
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((e[1] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert!(matches!(timestep_embedding(1, 3), Err(Error::Config(_))));
    }

    fn tiny() -> ProjectorParams {
        // latent 2, time embedding 0, hidden 2, embed 2.
        ProjectorParams {
            latent_dim: 2,
            embed_dim: 2,
            hidden: 2,
            time_embed_dim: 0,
            w1: DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 1.0]]).unwrap(),
            b1: vec![0.5, -0.25],
            w2: DenseMatrix::from_rows(&[[2.0, 1.0], [-1.0, 3.0]]).unwrap(),
            b2: vec![0.1, 0.2],
        }
    }

    #[test]
    fn tiny_network_matches_hand_evaluation() {
        // h = (1, 0.5): a1 = (1 − 1 + 0.5, 0.5 + 0.5 − 0.25) = (0.5, 0.75)
        // y = (1 + 0.75 + 0.1, −0.5 + 2.25 + 0.2) = (1.85, 1.95)
        let z = tiny().forward(&[1.0, 0.5], 0).unwrap();
        let n = (1.85f64 * 1.85 + 1.95 * 1.95).sqrt();
        assert!((z[0] - 1.85 / n).abs() <= 1e-12);
        assert!((z[1] - 1.95 / n).abs() <= 1e-12);
        // h = (0, 1): a1 = (−1.5, 0.75), relu kills the first unit.
        // y = (0.75 + 0.1, 2.25 + 0.2)
        let z = tiny().forward(&[0.0, 1.0], 0).unwrap();
        let n = (0.85f64 * 0.85 + 2.45 * 2.45).sqrt();
        assert!((z[0] - 0.85 / n).abs() <= 1e-12 && (z[1] - 2.45 / n).abs() <= 1e-12);
    }

    #[test]
    fn constant_network_outputs_normalized_bias() {
        let mut p = ProjectorParams::init(4, 3, 5, 2, 1).unwrap();
        p.w1.data_mut().iter_mut().for_each(|x| *x = 0.0);
        p.w2.data_mut().iter_mut().for_each(|x| *x = 0.0);
        p.b2 = vec![3.0, 0.0, 4.0];
        let z = p.forward(&[1.0, -2.0, 0.3, 9.0], 17).unwrap();
        assert_eq!(z, vec![0.6, 0.0, 0.8]);
        p.b2 = vec![0.0; 3];
        assert!(matches!(p.forward(&[1.0; 4], 1), Err(Error::Degenerate(_))));
        assert!(matches!(p.forward(&[1.0; 3], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn nt_xent_cases() {
        // ẑ = z, orthogonal pair, τ = 1: −log(e / (e + 1)).
        let z = [1.0, 0.0, 0.0, 1.0];
        let (loss, _) = nt_xent_loss(&z, &z, 2, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-12);
        // Identical targets: uniform softmax.
        let zs = [0.6, 0.8, 0.6, 0.8, 0.6, 0.8];
        let zh = [1.0, 0.0, -0.3, 0.7, 0.2, -0.9];
        let (loss, _) = nt_xent_loss(&zh, &zs, 2, 0.1).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(nt_xent_loss(&z[..2], &z[..2], 2, 1.0), Err(Error::Empty(_))));
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (5, 7);
        let zh = random_vec(&mut rng, n * d);
        let z = random_vec(&mut rng, n * d);
        for tau in [0.1, 0.5, 1.0] {
            let (_, g) = nt_xent_loss(&zh, &z, d, tau).unwrap();
            for k in 0..n * d {
                let eps = 1e-6;
                let mut p = zh.clone();
                p[k] += eps;
                let lp = nt_xent_loss(&p, &z, d, tau).unwrap().0;
                p[k] -= 2.0 * eps;
                let lm = nt_xent_loss(&p, &z, d, tau).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(rel_err(fd, g[k]) <= 1e-6, "tau {tau} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    fn probe(p: &ProjectorParams, h: &[f64], t: usize, u: &[f64]) -> f64 {
        p.forward(h, t).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
    }

    /// Fourth-order central difference at step 1e-4.
    fn stencil(f: impl Fn(f64) -> f64) -> f64 {
        let e = 1e-4;
        (-f(2.0 * e) + 8.0 * f(e) - 8.0 * f(-e) + f(-2.0 * e)) / (12.0 * e)
    }

    fn check_backward(p: &ProjectorParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_vec(&mut rng, p.latent_dim);
        let u = random_vec(&mut rng, p.embed_dim);
        let t = 23;
        let (g, gh) = p.backward(&h, t, &u).unwrap();
        for k in 0..h.len() {
            let fd = stencil(|d| {
                let mut hp = h.clone();
                hp[k] += d;
                probe(p, &hp, t, &u)
            });
            assert!(rel_err(fd, gh[k]) <= 1e-6, "h[{k}]: {fd} vs {}", gh[k]);
        }
        let grads = g.tensors().map(|t| t.to_vec());
        for tensor in 0..4 {
            let len = grads[tensor].len();
            // Sample a bounded set of coordinates on large networks.
            let stride = (len / 40).max(1);
            for k in (0..len).step_by(stride) {
                let fd = stencil(|d| {
                    let mut q = p.clone();
                    q.tensors_mut()[tensor][k] += d;
                    probe(&q, &h, t, &u)
                });
                assert!(
                    rel_err(fd, grads[tensor][k]) <= 1e-6,
                    "tensor {tensor}[{k}]: {fd} vs {}",
                    grads[tensor][k]
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_tiny() {
        let mut p = ProjectorParams::init(3, 4, 5, 2, 11).unwrap();
        p.b1 = vec![0.1, -0.2, 0.3, 0.05, -0.1];
        p.b2 = vec![0.2, -0.1, 0.0, 0.3];
        check_backward(&p, 1);
        check_backward(&p, 2);
    }

    #[test]
    fn backward_matches_finite_differences_default_size() {
        let p = ProjectorParams::init(32, 512, 256, 32, 12).unwrap();
        check_backward(&p, 3);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = ProjectorParams::init(3, 4, 5, 2, 11).unwrap();
        let (g, gh) = p.backward(&[0.3, -1.0, 2.0], 4, &[0.0; 4]).unwrap();
        assert!(g.is_zero());
        assert!(gh.iter().all(|&x| x == 0.0));
        assert!(matches!(
            p.backward(&[0.3, -1.0, 2.0], 4, &[0.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn batched_backward_sums_single_sample_gradients() {
        let p = ProjectorParams::init(3, 4, 6, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hs = random_vec(&mut rng, 9);
        let ups = random_vec(&mut rng, 12);
        let ts = [1, 5, 9];
        let cache = p.forward_batch(&hs, &ts).unwrap();
        let (g, gh) = p.backward_batch(&cache, &ups, true).unwrap();
        let g = g.unwrap();
        let mut sum = ParamGrads::zeros(&p);
        for i in 0..3 {
            let (gi, ghi) = p.backward(&hs[i * 3..i * 3 + 3], ts[i], &ups[i * 4..i * 4 + 4]).unwrap();
            for (a, b) in [(&mut sum.w1, &gi.w1), (&mut sum.b1, &gi.b1), (&mut sum.w2, &gi.w2), (&mut sum.b2, &gi.b2)] {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            for k in 0..3 {
                assert!((ghi[k] - gh[i * 3 + k]).abs() < 1e-12);
            }
        }
        for (a, b) in sum.tensors().iter().zip(g.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let p = ProjectorParams::init(3, 4, 5, 2, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(ProjectorParams::load(&path).unwrap(), p);
    }

    fn small_dataset() -> Dataset {
        let s = Surrogate::new(GeneratorConfig::default().with_seed(1)).unwrap();
        s.generate_dataset(120, &[10, 25, 40], 2).unwrap()
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            hidden: 32,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ds = small_dataset();
        let cfg = small_train();
        let (p1, log1) = train(&ds, &cfg).unwrap();
        let (p2, log2) = train(&ds, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert!(log1.epochs[1].train_loss < log1.epochs[0].train_loss);
        let dir = tempfile::tempdir().unwrap();
        log1.write_csv(&dir.path().join("log.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_cosine\n"));
    }

    #[test]
    fn zero_patience_stops_after_first_non_improving_epoch() {
        let ds = small_dataset();
        // A huge step size makes improvement stall quickly.
        let cfg = TrainConfig {
            epochs: 20,
            patience: 0,
            learning_rate: 0.5,
            ..small_train()
        };
        let (_, log) = train(&ds, &cfg).unwrap();
        // Every epoch before the last improved on the best so far.
        let mut best = log.epochs[0].val_cosine;
        for e in &log.epochs[1..log.epochs.len() - 1] {
            assert!(e.val_cosine > best);
            best = e.val_cosine;
        }
        let last = log.epochs.last().unwrap();
        if log.stopped_early {
            assert!(last.val_cosine <= best);
        }
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let mut ds = small_dataset();
        let cfg = small_train();
        assert!(matches!(
            train(&ds, &TrainConfig { batch_size: 1, ..cfg.clone() }),
            Err(Error::Config(_))
        ));
        ds.records.clear();
        assert!(matches!(train(&ds, &cfg), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn forward_is_unit_norm(seed in 0u64..1000, t in 0usize..60) {
            let p = ProjectorParams::init(4, 6, 8, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_vec(&mut rng, 4);
            let z = p.forward(&h, t).unwrap();
            prop_assert!((norm(&z) - 1.0).abs() <= 1e-12);
        }
    }
}
