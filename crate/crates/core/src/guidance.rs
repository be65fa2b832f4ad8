//! KL guidance of the batch cluster distribution towards a target.
//!
//! A batch of latents `h_i` at timestep `t` is projected, softly assigned to
//! the leaf centroids, and averaged into `P`. The loss `KL(P ‖ U)` couples the
//! whole batch, so its gradient is always taken jointly:
//!
//! ```text
//! ∂KL/∂P_j      = ln(P_j/U_j) + 1
//! ∂KL/∂p_ij     = (1/N)·∂KL/∂P_j
//! ∂KL/∂cos_ik   = α·p_ik·(∂KL/∂p_ik − Σ_j p_ij·∂KL/∂p_ij)
//! ∂KL/∂ẑ_i      = Σ_k ∂KL/∂cos_ik·(ĉ_k − cos_ik·ẑ_i)/‖ẑ_i‖
//! ```
//!
//! followed by the projector's reverse pass into `h_i`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::ClusterTree;
use crate::error::{Error, Result};
use crate::numerics::{norm, softmax_scaled, ProbVector};
use crate::projector::ProjectorParams;
use crate::surrogate::{FinalSample, Surrogate, TrajectoryState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// `false` reproduces unguided sampling exactly.
    pub enabled: bool,
    pub gamma: f64,
    pub inner_steps: usize,
    pub guided_timesteps: BTreeSet<usize>,
    pub alpha: f64,
    pub batch_size: usize,
    /// Step halvings tried when an update increases the KL; 0 disables backtracking.
    pub max_halvings: usize,
}

impl GuidanceConfig {
    pub const DEFAULT_GAMMA: f64 = 16000.0;
    pub const DEFAULT_WINDOW: (usize, usize) = (10, 40);
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let (lo, hi) = Self::DEFAULT_WINDOW;
        Self {
            enabled: true,
            gamma: Self::DEFAULT_GAMMA,
            inner_steps: 1,
            guided_timesteps: (lo..=hi).collect(),
            alpha: 8.0,
            batch_size: 100,
            max_halvings: 5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.guided_timesteps.is_empty() {
            return Err(Error::Config(
                "guided_timesteps is empty; set enabled = false to turn guidance off".into(),
            ));
        }
        if self.guided_timesteps.contains(&0) {
            return Err(Error::Config("timestep 0 is the finished sample and cannot be guided".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `Σ p_j ln(p_j/u_j)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &ProbVector, u: &ProbVector) -> Result<f64> {
    if p.len() != u.len() {
        return Err(Error::Dimension(format!(
            "KL between distributions of length {} and {}",
            p.len(),
            u.len()
        )));
    }
    let mut kl = 0.0;
    for (j, (&pj, &uj)) in p.as_slice().iter().zip(u.as_slice()).enumerate() {
        if pj > 0.0 {
            if uj <= 0.0 {
                return Err(Error::SupportMismatch(j));
            }
            kl += pj * (pj / uj).ln();
        }
    }
    // Cancellation can leave a tiny negative sum when p ≈ u.
    Ok(kl.max(0.0))
}

/// Leaf centroids and target prepared once for repeated gradient evaluations.
#[derive(Debug, Clone)]
pub struct GuidanceTarget {
    /// Unit centroids, row-major `k × embed_dim`.
    centroids: Vec<Vec<f64>>,
    target: ProbVector,
}

impl GuidanceTarget {
    pub fn new(tree: &ClusterTree, target: &ProbVector) -> Result<Self> {
        let centroids: Vec<Vec<f64>> = tree.leaf_centroids().iter().map(|c| c.to_vec()).collect();
        Self::from_centroids(centroids, target)
    }

    pub fn from_centroids(centroids: Vec<Vec<f64>>, target: &ProbVector) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::Degenerate("guidance needs at least two leaves".into()));
        }
        if target.len() != centroids.len() {
            return Err(Error::Config(format!(
                "target has {} entries for {} leaves",
                target.len(),
                centroids.len()
            )));
        }
        let centroids = centroids
            .iter()
            .map(|c| {
                let n = norm(c);
                if n == 0.0 {
                    Err(Error::Degenerate("zero leaf centroid".into()))
                } else {
                    Ok(c.iter().map(|x| x / n).collect())
                }
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            centroids,
            target: target.clone(),
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.centroids.len()
    }

    pub fn target(&self) -> &ProbVector {
        &self.target
    }
}

/// Loss and per-sample latent gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub batch_distribution: ProbVector,
    /// Row-major `N × latent_dim`.
    pub grad: Vec<f64>,
}

/// `KL(P ‖ target)` of the batch at timestep `t`, without gradients.
pub fn batch_loss(
    hs: &[f64],
    t: usize,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
    alpha: f64,
) -> Result<(f64, ProbVector)> {
    let (_, soft) = soft_assignments(hs, t, params, guide, alpha)?;
    let p = mean_distribution(&soft)?;
    Ok((kl_divergence(&p, &guide.target)?, p))
}

fn soft_assignments(
    hs: &[f64],
    t: usize,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
    alpha: f64,
) -> Result<(crate::projector::ForwardCache, Vec<(Vec<f64>, ProbVector)>)> {
    let l = params.latent_dim;
    if l == 0 || hs.is_empty() || hs.len() % l != 0 {
        return Err(Error::Dimension(format!(
            "batch of {} values is not a non-empty multiple of latent_dim {l}",
            hs.len()
        )));
    }
    let n = hs.len() / l;
    let cache = params.forward_batch(hs, &vec![t; n])?;
    let soft = (0..n)
        .map(|i| {
            let z = cache.output(i);
            let zn = norm(z);
            if zn == 0.0 {
                return Err(Error::Degenerate("projected embedding is zero".into()));
            }
            let cos: Vec<f64> = guide
                .centroids
                .iter()
                .map(|c| c.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / zn)
                .collect();
            let p = softmax_scaled(&cos, alpha)?;
            Ok((cos, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cache, soft))
}

fn mean_distribution(soft: &[(Vec<f64>, ProbVector)]) -> Result<ProbVector> {
    let k = soft[0].1.len();
    let mut mean = vec![0.0; k];
    for (_, p) in soft {
        mean.iter_mut().zip(p.as_slice()).for_each(|(m, x)| *m += x);
    }
    let n = soft.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    ProbVector::new(mean)
}

/// Loss and exact gradient of `KL(P ‖ target)` with respect to every latent in the batch.
pub fn batch_grad_h(
    hs: &[f64],
    t: usize,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
    alpha: f64,
) -> Result<BatchGrad> {
    let (cache, soft) = soft_assignments(hs, t, params, guide, alpha)?;
    let p = mean_distribution(&soft)?;
    let loss = kl_divergence(&p, &guide.target)?;
    let n = soft.len();
    let e = params.embed_dim;
    let inv_n = 1.0 / n as f64;
    // ∂KL/∂p_ij; entries where P_j = 0 carry no mass and get no gradient.
    let dp: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(guide.target.as_slice())
        .map(|(&pj, &uj)| if pj > 0.0 { ((pj / uj).ln() + 1.0) * inv_n } else { 0.0 })
        .collect();
    let upstream: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (cos, pi) = &soft[i];
            let z = cache.output(i);
            let zn = norm(z);
            let mean_dp: f64 = pi.as_slice().iter().zip(&dp).map(|(a, b)| a * b).sum();
            let mut g = vec![0.0; e];
            for (k, c) in guide.centroids.iter().enumerate() {
                let dcos = alpha * pi[k] * (dp[k] - mean_dp);
                if dcos == 0.0 {
                    continue;
                }
                let s = dcos / zn;
                let proj = cos[k] / zn;
                for ((gj, cj), zj) in g.iter_mut().zip(c).zip(z) {
                    *gj += s * (cj - proj * zj);
                }
            }
            g
        })
        .collect();
    let (_, grad) = params.backward_batch(&cache, &upstream, false)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite guidance gradient at t = {t} (loss {loss}, batch distribution {:?})",
            p.as_slice()
        )));
    }
    Ok(BatchGrad {
        loss,
        batch_distribution: p,
        grad,
    })
}

/// Result of the inner updates at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub kl_before: f64,
    /// KL after each inner update.
    pub kl_trace: Vec<f64>,
    /// Step actually taken per inner update, after backtracking.
    pub step_sizes: Vec<f64>,
    /// Set when an update still increased the KL after all halvings.
    pub non_monotone: bool,
}

/// Monotonicity slack for the KL trace.
pub const KL_MONOTONE_TOL: f64 = 1e-6;

/// `h ← h − γ·∇KL`, `inner_steps` times with the gradient recomputed each time.
pub fn debias_step(
    hs: &[f64],
    t: usize,
    config: &GuidanceConfig,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
) -> Result<(Vec<f64>, StepTrace)> {
    config.validate()?;
    let mut h = hs.to_vec();
    let mut trace = StepTrace {
        kl_before: f64::NAN,
        kl_trace: Vec::with_capacity(config.inner_steps),
        step_sizes: Vec::with_capacity(config.inner_steps),
        non_monotone: false,
    };
    if config.gamma == 0.0 {
        let (kl, _) = batch_loss(&h, t, params, guide, config.alpha)?;
        trace.kl_before = kl;
        trace.kl_trace = vec![kl; config.inner_steps];
        trace.step_sizes = vec![0.0; config.inner_steps];
        return Ok((h, trace));
    }
    for step in 0..config.inner_steps {
        let g = batch_grad_h(&h, t, params, guide, config.alpha)?;
        if step == 0 {
            trace.kl_before = g.loss;
        }
        let mut gamma = config.gamma;
        let mut halvings = 0;
        let (candidate, kl) = loop {
            let candidate: Vec<f64> = h.iter().zip(&g.grad).map(|(x, d)| x - gamma * d).collect();
            let (kl, _) = batch_loss(&candidate, t, params, guide, config.alpha)?;
            if kl <= g.loss + KL_MONOTONE_TOL || halvings == config.max_halvings {
                break (candidate, kl);
            }
            gamma *= 0.5;
            halvings += 1;
        };
        if kl > g.loss + KL_MONOTONE_TOL {
            trace.non_monotone = true;
        }
        h = candidate;
        trace.kl_trace.push(kl);
        trace.step_sizes.push(gamma);
    }
    Ok((h, trace))
}

/// Per-timestep record of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepTrace {
    pub t: usize,
    pub kl_before: f64,
    pub kl_trace: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub non_monotone: bool,
    /// `‖h_edited − h‖` per sample.
    pub edit_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub first_trajectory: u64,
    pub size: usize,
    pub timesteps: Vec<TimestepTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasRunTrace {
    pub batches: Vec<BatchTrace>,
    /// Nearest-mode counts of the latents before the first edit.
    pub pre_histogram: Vec<usize>,
    /// Nearest-mode counts of the finished latents.
    pub post_histogram: Vec<usize>,
    pub non_monotone_steps: usize,
}

impl DebiasRunTrace {
    /// Batch-averaged KL per guided timestep, in visit order: `(t, before, after)`.
    pub fn mean_kl_by_timestep(&self) -> Vec<(usize, f64, f64)> {
        let Some(first) = self.batches.first() else {
            return Vec::new();
        };
        (0..first.timesteps.len())
            .map(|s| {
                let nb = self.batches.len() as f64;
                let before = self.batches.iter().map(|b| b.timesteps[s].kl_before).sum::<f64>() / nb;
                let after = self
                    .batches
                    .iter()
                    .map(|b| *b.timesteps[s].kl_trace.last().unwrap_or(&f64::NAN))
                    .sum::<f64>()
                    / nb;
                (first.timesteps[s].t, before, after)
            })
            .collect()
    }

    pub fn final_kl(&self) -> f64 {
        self.mean_kl_by_timestep().last().map_or(f64::NAN, |r| r.2)
    }
}

/// Runs `n` trajectories in joint batches, editing the latents at every guided timestep.
pub fn guided_sampling(
    surrogate: &Surrogate,
    config: &GuidanceConfig,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
    n: usize,
    seed: u64,
) -> Result<(Vec<FinalSample>, DebiasRunTrace)> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Empty("cannot sample an empty batch".into()));
    }
    let gen = surrogate.config();
    if params.latent_dim != gen.latent_dim {
        return Err(Error::Dimension(format!(
            "projector expects latent_dim {}, generator has {}",
            params.latent_dim, gen.latent_dim
        )));
    }
    if let Some(&t) = config.guided_timesteps.iter().next_back() {
        if t > gen.steps {
            return Err(Error::Config(format!(
                "guided timestep {t} exceeds the {} generator steps",
                gen.steps
            )));
        }
    }
    let starts: Vec<usize> = (0..n).step_by(config.batch_size).collect();
    let results = starts
        .par_iter()
        .map(|&start| {
            let end = (start + config.batch_size).min(n);
            run_batch(surrogate, config, params, guide, start as u64..end as u64, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = surrogate.num_modes();
    let mut samples = Vec::with_capacity(n);
    let mut trace = DebiasRunTrace {
        batches: Vec::with_capacity(results.len()),
        pre_histogram: vec![0; k],
        post_histogram: vec![0; k],
        non_monotone_steps: 0,
    };
    for (batch_samples, batch_trace, pre) in results {
        for f in &batch_samples {
            trace.post_histogram[surrogate.nearest_mode(&f.h)] += 1;
        }
        for m in pre {
            trace.pre_histogram[m] += 1;
        }
        trace.non_monotone_steps += batch_trace.timesteps.iter().filter(|s| s.non_monotone).count();
        trace.batches.push(batch_trace);
        samples.extend(batch_samples);
    }
    Ok((samples, trace))
}

type BatchOutput = (Vec<FinalSample>, BatchTrace, Vec<usize>);

fn run_batch(
    surrogate: &Surrogate,
    config: &GuidanceConfig,
    params: &ProjectorParams,
    guide: &GuidanceTarget,
    ids: std::ops::Range<u64>,
    seed: u64,
) -> Result<BatchOutput> {
    let mut states: Vec<TrajectoryState> = ids.clone().map(|id| surrogate.init_trajectory(id, seed)).collect();
    let l = surrogate.config().latent_dim;
    let mut timesteps = Vec::new();
    let mut pre: Option<Vec<usize>> = None;
    while !states[0].is_finished() {
        let t = states[0].t;
        if config.enabled && config.guided_timesteps.contains(&t) {
            let hs: Vec<f64> = states.iter().flat_map(|s| s.h.iter().copied()).collect();
            if pre.is_none() {
                pre = Some(states.iter().map(|s| surrogate.nearest_mode(&s.h)).collect());
            }
            let (edited, step) = debias_step(&hs, t, config, params, guide)?;
            let edit_norms = hs
                .chunks(l)
                .zip(edited.chunks(l))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect();
            for (s, h) in states.iter_mut().zip(edited.chunks(l)) {
                surrogate.denoise_step(s, Some(h))?;
            }
            timesteps.push(TimestepTrace {
                t,
                kl_before: step.kl_before,
                kl_trace: step.kl_trace,
                step_sizes: step.step_sizes,
                non_monotone: step.non_monotone,
                edit_norms,
            });
        } else {
            for s in states.iter_mut() {
                surrogate.denoise_step(s, None)?;
            }
        }
    }
    let pre = pre.unwrap_or_else(|| states.iter().map(|s| surrogate.nearest_mode(&s.h)).collect());
    let samples = states
        .iter()
        .map(|s| surrogate.final_sample(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        samples,
        BatchTrace {
            first_trajectory: ids.start,
            size: (ids.end - ids.start) as usize,
            timesteps,
        },
        pre,
    ))
}
