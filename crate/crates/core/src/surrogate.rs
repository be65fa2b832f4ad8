//! Synthetic stand-in for a diffusion sampler.
//!
//! Latent trajectories start at a mixture-mode mean plus noise and are pulled
//! towards the nearest mode mean at every denoising step. A frozen random
//! `tanh` layer decodes finished latents into a unit-norm semantic
//! embedding space. Every trajectory owns its own ChaCha stream keyed by
//! `(seed, trajectory_id)`, so results do not depend on scheduling or on
//! any edits injected between steps.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, normalize, squared_distance, DenseMatrix};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Largest allowed cosine between decoded embeddings of two distinct modes.
pub const MAX_MODE_COSINE: f64 = 0.5;
const DECODER_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mean: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub modes: Vec<ModeSpec>,
    /// Coarse-group id of each mode, when the modes are organised in two levels.
    #[serde(default)]
    pub hierarchy: Option<Vec<usize>>,
    /// `noise_schedule[t]` is σ(t) for `t = 0..=steps`.
    pub noise_schedule: Vec<f64>,
    pub attraction_rate: f64,
    pub steps: usize,
    /// Seeds the frozen decoder.
    pub seed: u64,
    /// Standard deviation of decoder weights is `decoder_gain / sqrt(latent_dim)`.
    #[serde(default = "default_decoder_gain")]
    pub decoder_gain: f64,
    #[serde(default = "default_decoder_bias")]
    pub decoder_bias: f64,
}

fn default_decoder_gain() -> f64 {
    GeneratorConfig::DEFAULT_DECODER_GAIN
}

fn default_decoder_bias() -> f64 {
    0.05
}

/// σ decreasing linearly from `high` at `t = steps` to `low` at `t = 1`; σ(0) = `low`.
pub fn linear_schedule(steps: usize, high: f64, low: f64) -> Vec<f64> {
    let mut s = vec![low; steps + 1];
    if steps >= 2 {
        for (t, sigma) in s.iter_mut().enumerate().skip(1) {
            *sigma = low + (high - low) * (t - 1) as f64 / (steps - 1) as f64;
        }
    } else if steps == 1 {
        s[1] = high;
    }
    s
}

pub fn constant_schedule(steps: usize, sigma: f64) -> Vec<f64> {
    vec![sigma; steps + 1]
}

/// Initial spread `initial` at `t = steps`, then per-step noise decreasing
/// linearly from `high` at `t = steps − 1` to `low` at `t = 1`; σ(0) = `low`.
pub fn spread_schedule(steps: usize, initial: f64, high: f64, low: f64) -> Vec<f64> {
    let mut s = vec![low; steps + 1];
    if steps >= 3 {
        for (t, sigma) in s.iter_mut().enumerate().take(steps).skip(1) {
            *sigma = low + (high - low) * (t - 1) as f64 / (steps - 2) as f64;
        }
    }
    s[steps] = initial;
    s
}

impl GeneratorConfig {
    pub const DEFAULT_LATENT_DIM: usize = 32;
    pub const DEFAULT_EMBED_DIM: usize = 512;
    pub const DEFAULT_STEPS: usize = 50;
    /// Distance of each of the two default modes from the origin.
    pub const DEFAULT_MODE_OFFSET: f64 = 4.0;
    pub const DEFAULT_ATTRACTION: f64 = 0.002;
    pub const DEFAULT_INITIAL_SIGMA: f64 = 1.3;
    pub const DEFAULT_STEP_SIGMA_HIGH: f64 = 0.03;
    pub const DEFAULT_STEP_SIGMA_LOW: f64 = 0.01;
    pub const DEFAULT_DECODER_GAIN: f64 = 0.3;

    /// Default noise: a wide initial spread followed by small per-step noise,
    /// so a latent at any mid timestep largely determines its final embedding.
    pub fn default_schedule(steps: usize) -> Vec<f64> {
        spread_schedule(
            steps,
            Self::DEFAULT_INITIAL_SIGMA,
            Self::DEFAULT_STEP_SIGMA_HIGH,
            Self::DEFAULT_STEP_SIGMA_LOW,
        )
    }

    /// Two modes at `±offset·e₀` with the given weights.
    pub fn two_mode(weights: [f64; 2]) -> Self {
        let d = Self::DEFAULT_LATENT_DIM;
        let mut m0 = vec![0.0; d];
        let mut m1 = vec![0.0; d];
        m0[0] = Self::DEFAULT_MODE_OFFSET;
        m1[0] = -Self::DEFAULT_MODE_OFFSET;
        Self {
            latent_dim: d,
            embed_dim: Self::DEFAULT_EMBED_DIM,
            modes: vec![
                ModeSpec {
                    mean: m0,
                    weight: weights[0],
                },
                ModeSpec {
                    mean: m1,
                    weight: weights[1],
                },
            ],
            hierarchy: None,
            noise_schedule: Self::default_schedule(Self::DEFAULT_STEPS),
            attraction_rate: Self::DEFAULT_ATTRACTION,
            steps: Self::DEFAULT_STEPS,
            seed: 0,
            decoder_gain: default_decoder_gain(),
            decoder_bias: default_decoder_bias(),
        }
    }

    /// Two-level mixture: coarse group `g` has `subgroups[g]` modes.
    ///
    /// Mode means have norm `radius`. Coarse groups point along `±e₀` (two
    /// groups) or `e_g` (more); subgroups tilt away from their group axis by
    /// `tilt` radians along a simplex of directions private to the group.
    /// Latents keep a flat noise level `sigma` so finished samples retain a
    /// within-mode spread.
    pub fn hierarchical(
        subgroups: &[usize],
        weights: Vec<f64>,
        radius: f64,
        tilt: f64,
        sigma: f64,
    ) -> Self {
        let d = Self::DEFAULT_LATENT_DIM;
        let groups = subgroups.len();
        let mut next_dim = if groups <= 2 { 1 } else { groups };
        let mut modes = Vec::new();
        let mut hierarchy = Vec::new();
        let mut w = weights.into_iter();
        for (g, &count) in subgroups.iter().enumerate() {
            let mut axis = vec![0.0; d];
            if groups <= 2 {
                axis[0] = if g == 0 { 1.0 } else { -1.0 };
            } else {
                axis[g] = 1.0;
            }
            let offsets = simplex_directions(count, d, next_dim);
            next_dim += count.saturating_sub(1).max(1);
            for off in offsets {
                let mean: Vec<f64> = axis
                    .iter()
                    .zip(&off)
                    .map(|(a, o)| radius * (tilt.cos() * a + tilt.sin() * o))
                    .collect();
                modes.push(ModeSpec {
                    mean,
                    weight: w.next().unwrap_or(0.0),
                });
                hierarchy.push(g);
            }
        }
        let steps = Self::DEFAULT_STEPS;
        Self {
            latent_dim: d,
            embed_dim: Self::DEFAULT_EMBED_DIM,
            modes,
            hierarchy: Some(hierarchy),
            noise_schedule: spread_schedule(
                steps,
                sigma,
                Self::DEFAULT_STEP_SIGMA_HIGH,
                Self::DEFAULT_STEP_SIGMA_LOW,
            ),
            attraction_rate: Self::DEFAULT_ATTRACTION,
            steps,
            seed: 0,
            decoder_gain: default_decoder_gain(),
            decoder_bias: default_decoder_bias(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.modes.len() < 2 {
            return Err(Error::Config("at least two modes are required".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if m.mean.len() != self.latent_dim {
                return Err(Error::Config(format!(
                    "mode {i} mean has {} entries, latent_dim is {}",
                    m.mean.len(),
                    self.latent_dim
                )));
            }
            if m.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("mode {i} mean is not finite")));
            }
            if !(m.weight.is_finite() && m.weight >= 0.0) {
                return Err(Error::Config(format!("mode {i} weight must be >= 0")));
            }
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mode weights sum to {total}, not 1")));
        }
        if let Some(h) = &self.hierarchy {
            if h.len() != self.modes.len() {
                return Err(Error::Config("hierarchy needs one group id per mode".into()));
            }
        }
        if self.noise_schedule.len() != self.steps + 1 {
            return Err(Error::Config(format!(
                "noise schedule has {} entries, needs steps + 1 = {}",
                self.noise_schedule.len(),
                self.steps + 1
            )));
        }
        if self.noise_schedule.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise levels must be finite and >= 0".into()));
        }
        if self.noise_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(
                "noise must not increase as denoising proceeds".into(),
            ));
        }
        if !(self.attraction_rate > 0.0 && self.attraction_rate <= 1.0) {
            return Err(Error::Config("attraction_rate must lie in (0, 1]".into()));
        }
        if !(self.decoder_gain.is_finite() && self.decoder_gain > 0.0) {
            return Err(Error::Config("decoder_gain must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.noise_schedule[t]
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::two_mode([0.7, 0.3])
    }
}

/// `count` unit directions forming a centred regular simplex in dimensions
/// `first..first+count-1` (`±e_first` for two directions).
fn simplex_directions(count: usize, dim: usize, first: usize) -> Vec<Vec<f64>> {
    match count {
        0 => Vec::new(),
        1 => vec![vec![0.0; dim]],
        _ => {
            // Centre the standard basis of R^count, then express it in an
            // orthonormal basis of the (count-1)-dim hyperplane.
            let k = count;
            let centred: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64)
                        .collect()
                })
                .collect();
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for v in &centred {
                let mut w = v.clone();
                for b in &basis {
                    let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-9 && basis.len() < k - 1 {
                    basis.push(w.iter().map(|x| x / n).collect());
                }
            }
            centred
                .iter()
                .map(|v| {
                    let mut out = vec![0.0; dim];
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for (a, b) in basis.iter().enumerate() {
                        let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        out[first + a] = c / n;
                    }
                    out
                })
                .collect()
        }
    }
}

/// One trajectory in flight.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub trajectory_id: u64,
    /// Current timestep; `steps` at initialization, 0 when finished.
    pub t: usize,
    pub h: Vec<f64>,
    /// Oracle-only mixture label drawn at initialization.
    pub true_mode: usize,
    rng: ChaCha8Rng,
}

impl TrajectoryState {
    pub fn is_finished(&self) -> bool {
        self.t == 0
    }

    /// Position of the trajectory's noise stream, in 32-bit words.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

/// The generator with its frozen decoder.
#[derive(Debug, Clone)]
pub struct Surrogate {
    config: GeneratorConfig,
    decoder_w: DenseMatrix,
    decoder_b: Vec<f64>,
    mode_embeddings: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
}

impl Surrogate {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "decoder"));
        let std = config.decoder_gain / (config.latent_dim as f64).sqrt();
        for _attempt in 0..DECODER_ATTEMPTS {
            let w: Vec<f64> = (0..config.embed_dim * config.latent_dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..config.embed_dim)
                .map(|_| config.decoder_bias * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let decoder_w = DenseMatrix::new(config.embed_dim, config.latent_dim, w)?;
            let mut candidate = Self {
                config: config.clone(),
                decoder_w,
                decoder_b: b,
                mode_embeddings: Vec::new(),
                cumulative: Vec::new(),
            };
            let embeddings = config
                .modes
                .iter()
                .map(|m| candidate.decode_latent(&m.mean))
                .collect::<Result<Vec<_>>>()?;
            if separated(&embeddings, &config)? {
                candidate.mode_embeddings = embeddings;
                let mut acc = 0.0;
                candidate.cumulative = config
                    .modes
                    .iter()
                    .map(|m| {
                        acc += m.weight;
                        acc
                    })
                    .collect();
                return Ok(candidate);
            }
        }
        Err(Error::Config(format!(
            "no decoder within {DECODER_ATTEMPTS} draws separates the mode embeddings below cosine {MAX_MODE_COSINE}"
        )))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_modes(&self) -> usize {
        self.config.modes.len()
    }

    /// Decoded embedding of each mode mean.
    pub fn mode_embeddings(&self) -> &[Vec<f64>] {
        &self.mode_embeddings
    }

    /// Coarse group of each mode; every mode is its own group without a hierarchy.
    pub fn coarse_groups(&self) -> Vec<usize> {
        self.config
            .hierarchy
            .clone()
            .unwrap_or_else(|| (0..self.num_modes()).collect())
    }

    fn pick_mode(&self, u: f64) -> usize {
        let last_live = self
            .config
            .modes
            .iter()
            .rposition(|m| m.weight > 0.0)
            .unwrap_or(0);
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .map_or(last_live, |i| i.min(last_live))
    }

    fn trajectory_rng(seed: u64, trajectory_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trajectory_id);
        rng
    }

    /// Draws `n` trajectories with ids `0..n` at `t = steps`.
    pub fn sample_initial(&self, n: usize, seed: u64) -> Result<Vec<TrajectoryState>> {
        if n == 0 {
            return Err(Error::Empty("cannot sample an empty batch".into()));
        }
        Ok((0..n as u64).map(|id| self.init_trajectory(id, seed)).collect())
    }

    pub fn init_trajectory(&self, trajectory_id: u64, seed: u64) -> TrajectoryState {
        let mut rng = Self::trajectory_rng(seed, trajectory_id);
        let true_mode = self.pick_mode(rng.random::<f64>());
        let sigma = self.config.sigma(self.config.steps);
        let mean = &self.config.modes[true_mode].mean;
        let h = mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        TrajectoryState {
            trajectory_id,
            t: self.config.steps,
            h,
            true_mode,
            rng,
        }
    }

    /// Index of the mode mean closest to `h`; ties go to the lowest index.
    pub fn nearest_mode(&self, h: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, m) in self.config.modes.iter().enumerate() {
            let d = squared_distance(h, &m.mean);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Advances `state` from `t` to `t − 1`, optionally replacing its latent first.
    ///
    /// The noise draw happens whether or not an override is given, so edits
    /// never shift the trajectory's random stream.
    pub fn denoise_step(&self, state: &mut TrajectoryState, h_override: Option<&[f64]>) -> Result<()> {
        if state.t == 0 {
            return Err(Error::Trajectory(format!(
                "trajectory {} is already finished",
                state.trajectory_id
            )));
        }
        if let Some(o) = h_override {
            if o.len() != self.config.latent_dim {
                return Err(Error::Dimension(format!(
                    "override has {} entries, latent_dim is {}",
                    o.len(),
                    self.config.latent_dim
                )));
            }
            state.h.copy_from_slice(o);
        }
        let target = &self.config.modes[self.nearest_mode(&state.h)].mean;
        let keep = 1.0 - self.config.attraction_rate;
        let sigma = self.config.sigma(state.t - 1);
        for (x, m) in state.h.iter_mut().zip(target) {
            let noise: f64 = state.rng.sample(StandardNormal);
            // m + (1−r)(h − m): a mode mean is an exact fixed point and r = 1 lands on it exactly.
            *x = m + keep * (*x - m) + sigma * noise;
        }
        state.t -= 1;
        Ok(())
    }

    /// Runs a trajectory to completion without edits.
    pub fn finish(&self, state: &mut TrajectoryState) -> Result<()> {
        while state.t > 0 {
            self.denoise_step(state, None)?;
        }
        Ok(())
    }

    /// `normalize(tanh(W·h + b))`.
    pub fn decode_latent(&self, h: &[f64]) -> Result<Vec<f64>> {
        let pre = self.decoder_w.matvec(h)?;
        let act: Vec<f64> = pre
            .iter()
            .zip(&self.decoder_b)
            .map(|(p, b)| (p + b).tanh())
            .collect();
        normalize(&act)
    }

    pub fn decode_embedding(&self, state: &TrajectoryState) -> Result<Vec<f64>> {
        if !state.is_finished() {
            return Err(Error::Trajectory(format!(
                "trajectory {} is at t = {}, not finished",
                state.trajectory_id, state.t
            )));
        }
        self.decode_latent(&state.h)
    }

    /// `n` unguided trajectories run to completion.
    pub fn run_unguided(&self, n: usize, seed: u64) -> Result<Vec<FinalSample>> {
        if n == 0 {
            return Err(Error::Empty("cannot sample an empty batch".into()));
        }
        (0..n as u64)
            .into_par_iter()
            .map(|id| {
                let mut s = self.init_trajectory(id, seed);
                self.finish(&mut s)?;
                self.final_sample(&s)
            })
            .collect()
    }

    pub fn final_sample(&self, state: &TrajectoryState) -> Result<FinalSample> {
        Ok(FinalSample {
            trajectory_id: state.trajectory_id,
            true_mode: state.true_mode,
            z: self.decode_embedding(state)?,
            h: state.h.clone(),
        })
    }

    /// Runs `n` unguided trajectories, recording the latent at each captured
    /// timestep together with the finished embedding.
    pub fn generate_dataset(&self, n: usize, capture_timesteps: &[usize], seed: u64) -> Result<Dataset> {
        if capture_timesteps.is_empty() {
            return Err(Error::Config("capture_timesteps must not be empty".into()));
        }
        if n == 0 {
            return Err(Error::Empty("cannot generate an empty dataset".into()));
        }
        let mut capture = capture_timesteps.to_vec();
        capture.sort_unstable_by(|a, b| b.cmp(a));
        capture.dedup();
        if let Some(&bad) = capture
            .iter()
            .find(|&&t| t == 0 || t > self.config.steps)
        {
            return Err(Error::Config(format!(
                "capture timestep {bad} outside [1, {}]",
                self.config.steps
            )));
        }
        let per_traj: Vec<Vec<DatasetRecord>> = (0..n as u64)
            .into_par_iter()
            .map(|id| -> Result<Vec<DatasetRecord>> {
                let mut s = self.init_trajectory(id, seed);
                let mut captured: Vec<(usize, Vec<f64>)> = Vec::with_capacity(capture.len());
                loop {
                    if capture.contains(&s.t) {
                        captured.push((s.t, s.h.clone()));
                    }
                    if s.t == 0 {
                        break;
                    }
                    self.denoise_step(&mut s, None)?;
                }
                let z = self.decode_embedding(&s)?;
                Ok(captured
                    .into_iter()
                    .map(|(t, h)| DatasetRecord {
                        trajectory_id: id,
                        t,
                        h,
                        z_true: z.clone(),
                        true_mode: s.true_mode,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            header: DatasetHeader {
                schema_version: DATASET_SCHEMA_VERSION,
                config: self.config.clone(),
                n_trajectories: n,
                capture_timesteps: capture,
                seed,
            },
            records: per_traj.into_iter().flatten().collect(),
        })
    }
}

fn separated(embeddings: &[Vec<f64>], config: &GeneratorConfig) -> Result<bool> {
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            if config.modes[i].mean == config.modes[j].mean {
                continue;
            }
            if cosine_sim(&embeddings[i], &embeddings[j])? >= MAX_MODE_COSINE {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// A finished trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSample {
    pub trajectory_id: u64,
    pub true_mode: usize,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub config: GeneratorConfig,
    pub n_trajectories: usize,
    /// Descending (visit order).
    pub capture_timesteps: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub trajectory_id: u64,
    pub t: usize,
    pub h: Vec<f64>,
    pub z_true: Vec<f64>,
    pub true_mode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records captured at timestep `t`.
    pub fn at_timestep(&self, t: usize) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.t == t)
    }

    /// Header line followed by one JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.header, &self.records)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let (header, records): (DatasetHeader, Vec<DatasetRecord>) = read_jsonl(path)?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "dataset schema {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        Ok(Self { header, records })
    }
}

pub(crate) fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, header: &H, records: &[R]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<H: for<'de> Deserialize<'de>, R: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(H, Vec<R>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_sim, norm};

    fn small(weights: [f64; 2]) -> GeneratorConfig {
        GeneratorConfig::two_mode(weights).with_seed(3)
    }

    #[test]
    fn degenerate_mixture_always_picks_mode_zero() {
        let s = Surrogate::new(small([1.0, 0.0])).unwrap();
        let states = s.sample_initial(500, 9).unwrap();
        assert!(states.iter().all(|st| st.true_mode == 0));
    }

    #[test]
    fn mixture_fraction_matches_weight() {
        // Binomial(10000, 0.7) has sd ≈ 0.0046, so [0.68, 0.72] is > 4 sd wide.
        let s = Surrogate::new(small([0.7, 0.3])).unwrap();
        let states = s.sample_initial(10_000, 21).unwrap();
        let frac = states.iter().filter(|st| st.true_mode == 0).count() as f64 / 1e4;
        assert!((0.68..=0.72).contains(&frac), "{frac}");
    }

    #[test]
    fn zero_initial_noise_starts_on_the_mean() {
        let mut cfg = small([0.5, 0.5]);
        let steps = cfg.steps;
        cfg.noise_schedule[steps] = 0.0;
        for t in 0..steps {
            cfg.noise_schedule[t] = 0.0;
        }
        let s = Surrogate::new(cfg).unwrap();
        for st in s.sample_initial(50, 1).unwrap() {
            assert_eq!(st.h, s.config().modes[st.true_mode].mean);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = Surrogate::new(small([0.5, 0.5])).unwrap();
        assert!(matches!(s.sample_initial(0, 1), Err(Error::Empty(_))));
    }

    fn noiseless(mut cfg: GeneratorConfig) -> GeneratorConfig {
        cfg.noise_schedule = constant_schedule(cfg.steps, 0.0);
        cfg.attraction_rate = 0.5;
        cfg
    }

    #[test]
    fn mode_mean_is_a_fixed_point() {
        let s = Surrogate::new(noiseless(small([0.5, 0.5]))).unwrap();
        let mut st = s.init_trajectory(0, 4);
        let mean = s.config().modes[st.true_mode].mean.clone();
        s.denoise_step(&mut st, None).unwrap();
        assert_eq!(st.h, mean);
    }

    #[test]
    fn full_attraction_lands_on_nearest_mean() {
        let mut cfg = noiseless(small([0.5, 0.5]));
        cfg.attraction_rate = 1.0;
        let s = Surrogate::new(cfg).unwrap();
        let mut st = s.init_trajectory(0, 4);
        let mut h = vec![0.37; s.config().latent_dim];
        h[0] = 1.3;
        s.denoise_step(&mut st, Some(&h)).unwrap();
        assert_eq!(st.h, s.config().modes[0].mean);
        // Noise-free, full attraction: every finished trajectory sits on a mean.
        for mut st in s.sample_initial(20, 2).unwrap() {
            st.h[1] += 0.4;
            s.finish(&mut st).unwrap();
            assert!(s.config().modes.iter().any(|m| m.mean == st.h));
        }
    }

    #[test]
    fn noiseless_trajectories_converge_to_a_mean() {
        let s = Surrogate::new(noiseless(small([0.5, 0.5]))).unwrap();
        for mut st in s.sample_initial(10, 5).unwrap() {
            st.h[3] = 2.0;
            s.finish(&mut st).unwrap();
            let m = &s.config().modes[st.true_mode].mean;
            // Offset shrinks by (1 − r)^steps.
            let bound = 2.0 * (0.5f64).powi(50) * 1.01;
            assert!(squared_distance(&st.h, m).sqrt() <= bound);
        }
    }

    #[test]
    fn bisector_push_converges_to_the_pushed_mode() {
        // Iterating x ← m + (1−r)(x − m) from just past the bisector converges to m.
        let s = Surrogate::new(noiseless(small([0.5, 0.5]))).unwrap();
        let mut st = s.init_trajectory(0, 4);
        let mut h = vec![0.0; s.config().latent_dim];
        h[0] = -1e-6; // mode 1 sits at −4·e₀
        h[5] = 0.25;
        s.denoise_step(&mut st, Some(&h)).unwrap();
        s.finish(&mut st).unwrap();
        assert_eq!(s.nearest_mode(&st.h), 1);
        let dist = squared_distance(&st.h, &s.config().modes[1].mean).sqrt();
        assert!(dist < 1e-12, "{dist}");
    }

    #[test]
    fn finished_trajectory_cannot_step() {
        let s = Surrogate::new(small([0.5, 0.5])).unwrap();
        let mut st = s.init_trajectory(0, 4);
        s.finish(&mut st).unwrap();
        assert!(matches!(s.denoise_step(&mut st, None), Err(Error::Trajectory(_))));
    }

    #[test]
    fn override_shape_is_checked() {
        let s = Surrogate::new(small([0.5, 0.5])).unwrap();
        let mut st = s.init_trajectory(0, 4);
        assert!(matches!(
            s.denoise_step(&mut st, Some(&[1.0, 2.0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn decoding_is_deterministic_unit_and_separated() {
        let s = Surrogate::new(small([0.5, 0.5])).unwrap();
        let mut st = s.init_trajectory(0, 4);
        assert!(matches!(s.decode_embedding(&st), Err(Error::Trajectory(_))));
        s.finish(&mut st).unwrap();
        let a = s.decode_embedding(&st).unwrap();
        let b = s.decode_embedding(&st).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() <= 1e-12);
        let e = s.mode_embeddings();
        assert!(cosine_sim(&e[0], &e[1]).unwrap() < MAX_MODE_COSINE);
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let s = Surrogate::new(small([0.7, 0.3])).unwrap();
        let one = s.generate_dataset(1, &[25], 8).unwrap();
        assert_eq!(one.len(), 1);
        let a = s.generate_dataset(30, &[10, 40, 25], 8).unwrap();
        let b = s.generate_dataset(30, &[10, 40, 25], 8).unwrap();
        let c = s.generate_dataset(30, &[10, 40, 25], 9).unwrap();
        assert_eq!(a.len(), 90);
        assert_eq!(a, b);
        assert_ne!(a.records, c.records);
        assert_eq!(a.header.capture_timesteps, vec![40, 25, 10]);
        assert!(matches!(s.generate_dataset(3, &[], 8), Err(Error::Config(_))));
        assert!(matches!(s.generate_dataset(3, &[0], 8), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let s = Surrogate::new(small([0.7, 0.3])).unwrap();
        let a = s.generate_dataset(5, &[10, 30], 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        a.write_jsonl(&p).unwrap();
        assert_eq!(Dataset::read_jsonl(&p).unwrap(), a);
    }

    #[test]
    fn config_validation() {
        let mut c = small([0.5, 0.5]);
        c.modes[0].weight = 0.6;
        assert!(c.validate().is_err());
        let mut c = small([0.5, 0.5]);
        c.noise_schedule[3] = 2.0;
        assert!(c.validate().is_err());
        let mut c = small([0.5, 0.5]);
        c.modes.truncate(1);
        c.modes[0].weight = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_schedule_shape() {
        let s = GeneratorConfig::default_schedule(50);
        assert_eq!(s.len(), 51);
        assert_eq!(s[50], GeneratorConfig::DEFAULT_INITIAL_SIGMA);
        assert!((s[49] - GeneratorConfig::DEFAULT_STEP_SIGMA_HIGH).abs() < 1e-15);
        assert!((s[1] - GeneratorConfig::DEFAULT_STEP_SIGMA_LOW).abs() < 1e-15);
        assert_eq!(s[0], s[1]);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        let l = linear_schedule(50, 1.0, 0.05);
        assert!((l[50] - 1.0).abs() < 1e-15 && (l[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn unguided_frequencies_match_weights() {
        let s = Surrogate::new(small([0.7, 0.3])).unwrap();
        let states = s.sample_initial(20_000, 13).unwrap();
        let frac = states.iter().filter(|st| st.true_mode == 0).count() as f64 / 2e4;
        assert!((frac - 0.7).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn same_mode_embeddings_are_closer_than_cross_mode() {
        let s = Surrogate::new(small([0.5, 0.5])).unwrap();
        let fin = s.run_unguided(200, 3).unwrap();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..fin.len() {
            for j in (i + 1)..fin.len() {
                let c = cosine_sim(&fin[i].z, &fin[j].z).unwrap();
                if fin[i].true_mode == fin[j].true_mode {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / nx as f64);
    }

    #[test]
    fn simplex_offsets_are_unit_and_centred() {
        let dirs = simplex_directions(4, 10, 2);
        for d in &dirs {
            assert!((norm(d) - 1.0).abs() < 1e-12);
        }
        for i in 0..10 {
            let s: f64 = dirs.iter().map(|d| d[i]).sum();
            assert!(s.abs() < 1e-12);
        }
        let pair = simplex_directions(2, 4, 1);
        assert!((pair[0][1] + pair[1][1]).abs() < 1e-15 && pair[0][1].abs() > 0.99);
    }
}
