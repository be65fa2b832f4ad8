//! Two-stage discovery of semantic modes in embedding space.
//!
//! Stage 1 sweeps k-means over a range of `k` and keeps the silhouette
//! maximiser. Stage 2 refines each cluster by recursive binary spectral
//! splits on a shifted-cosine affinity graph, gated by a minimum child size
//! and a maximum depth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_sim, eigh, gemm, lanczos_largest, softmax_scaled, squared_distance, DenseMatrix, MatRef,
    ProbVector,
};

pub const TREE_SCHEMA_VERSION: u32 = 1;

/// Best silhouette below this marks the discovery result as low-confidence.
pub const LOW_CONFIDENCE_SILHOUETTE: f64 = 0.15;

const KMEANS_MAX_ITER: usize = 300;
/// Largest node solved with a dense eigendecomposition of the Laplacian.
const DENSE_SPECTRAL_MAX: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub s_min_fraction: f64,
    pub d_max: usize,
    pub alpha: f64,
    pub seed: u64,
    /// A spectral split is kept only if its two-cluster silhouette reaches this.
    #[serde(default = "default_min_split_silhouette")]
    pub min_split_silhouette: Option<f64>,
    /// Independent k-means++ initialisations; the lowest distortion wins.
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
}

fn default_min_split_silhouette() -> Option<f64> {
    Some(0.15)
}

fn default_restarts() -> usize {
    4
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 8,
            s_min_fraction: 0.05,
            d_max: 3,
            alpha: 8.0,
            seed: 0,
            min_split_silhouette: default_min_split_silhouette(),
            kmeans_restarts: default_restarts(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(Error::Config(format!(
                "k range {}..={} is invalid (needs 2 <= k_min <= k_max)",
                self.k_min, self.k_max
            )));
        }
        if !(self.s_min_fraction > 0.0 && self.s_min_fraction < 1.0) {
            return Err(Error::Config("s_min_fraction must lie in (0, 1)".into()));
        }
        if self.d_max < 1 {
            return Err(Error::Config("d_max must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be finite and >= 0".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-major copy of a point set.
struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    fn new(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let dim = points.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Empty("no points to cluster".into()));
        }
        let mut data = Vec::with_capacity(n * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::Dimension("points have different lengths".into()));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("point is not finite".into()));
            }
            data.extend_from_slice(p);
        }
        Ok(Self { n, dim, data })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Pairwise Euclidean distances, `n × n`.
    fn distances(&self) -> Vec<f64> {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        gemm(
            1.0,
            MatRef::new(&self.data, n, self.dim),
            MatRef::new(&self.data, n, self.dim).t(),
            0.0,
            &mut g,
        );
        let sq: Vec<f64> = (0..n).map(|i| g[i * n + i]).collect();
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = if i == j {
                    0.0
                } else {
                    (sq[i] + sq[j] - 2.0 * g[i * n + j]).max(0.0).sqrt()
                };
            }
        }
        // Symmetrise exactly so silhouettes do not depend on argument order.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (g[i * n + j] + g[j * n + i]);
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the (unnormalised) Lloyd means.
    pub distortion: f64,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations, best of `restarts`.
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let pts = Points::new(points)?;
    kmeans_points(&pts, k, seed, restarts.max(1))
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or 300 iterations have run.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_restarts(points, k, seed, 1)
}

fn kmeans_points(pts: &Points, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k < 1 || pts.n < k {
        return Err(Error::Config(format!(
            "k-means needs at least k = {k} points, got {}",
            pts.n
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let run = kmeans_once(pts, k, seed.wrapping_add(r as u64))?;
        if best.as_ref().is_none_or(|b| run.distortion < b.distortion) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_once(pts: &Points, k: usize, seed: u64) -> Result<KMeansResult> {
    let (n, dim) = (pts.n, pts.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.push(pts.row(first).to_vec());
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(pts.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            // Guard against round-off landing on an already chosen point.
            if d2[idx] == 0.0 {
                idx = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.push(pts.row(pick).to_vec());
        let c = centers.last().expect("just pushed");
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(pts.row(i), c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = pts.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = squared_distance(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        // Recompute means; an empty cluster is re-seeded at the point
        // farthest from its current centre.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(pts.row(i)).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = squared_distance(pts.row(a), &centers[assign[a]]);
                        let db = squared_distance(pts.row(b), &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .ok_or_else(|| Error::Degenerate("cannot re-seed an empty cluster".into()))?;
                let old = assign[far];
                counts[old] -= 1;
                sums[old].iter_mut().zip(pts.row(far)).for_each(|(s, x)| *s -= x);
                assign[far] = j;
                counts[j] = 1;
                sums[j] = pts.row(far).to_vec();
                changed = true;
            }
        }
        for j in 0..k {
            let inv = 1.0 / counts[j] as f64;
            centers[j] = sums[j].iter().map(|s| s * inv).collect();
        }
        if !changed || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    let distortion = (0..n)
        .map(|i| squared_distance(pts.row(i), &centers[assign[i]]))
        .sum();
    let centroids = centers.iter().map(|c| unit_or_zero(c)).collect();
    Ok(KMeansResult {
        assignments: assign,
        centroids,
        distortion,
        iterations,
    })
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Mean silhouette; singleton clusters contribute 0.
pub fn silhouette_score(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    let pts = Points::new(points)?;
    if assignments.len() != pts.n {
        return Err(Error::Dimension("one assignment per point is required".into()));
    }
    silhouette_from_distances(&pts.distances(), pts.n, assignments)
}

fn silhouette_from_distances(dist: &[f64], n: usize, assignments: &[usize]) -> Result<f64> {
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate(
            "silhouette is undefined for fewer than two clusters".into(),
        ));
    }
    if counts.contains(&0) {
        return Err(Error::Degenerate("silhouette needs every cluster non-empty".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if counts[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = &dist[i * n..(i + 1) * n];
        for (j, &d) in row.iter().enumerate() {
            sums[assignments[j]] += d;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteRow {
    pub k: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectKResult {
    pub k_star: usize,
    pub table: Vec<SilhouetteRow>,
    pub clustering: KMeansResult,
}

impl SelectKResult {
    pub fn best_score(&self) -> f64 {
        self.table
            .iter()
            .find(|r| r.k == self.k_star)
            .map_or(f64::NAN, |r| r.score)
    }

    pub fn low_confidence(&self) -> bool {
        self.best_score() < LOW_CONFIDENCE_SILHOUETTE
    }
}

/// Sweeps `k_min..=k_max` and returns the silhouette argmax (ties to smaller k).
pub fn select_k(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<SelectKResult> {
    select_k_restarts(points, k_min, k_max, seed, 1)
}

pub fn select_k_restarts(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
) -> Result<SelectKResult> {
    let pts = Points::new(points)?;
    select_k_points(&pts, k_min, k_max, seed, restarts)
}

fn select_k_points(pts: &Points, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<SelectKResult> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::Config(format!("k range {k_min}..={k_max} is invalid")));
    }
    if pts.n <= k_max {
        return Err(Error::Config(format!(
            "select_k needs more than {k_max} points, got {}",
            pts.n
        )));
    }
    let dist = pts.distances();
    let runs: Vec<(KMeansResult, f64)> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| -> Result<(KMeansResult, f64)> {
            let km = kmeans_points(pts, k, crate::derive_seed(seed, &format!("kmeans-{k}")), restarts)?;
            let s = silhouette_from_distances(&dist, pts.n, &km.assignments)?;
            Ok((km, s))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, s)) in runs.iter().enumerate() {
        if *s > runs[best].1 {
            best = i;
        }
    }
    let table = runs
        .iter()
        .enumerate()
        .map(|(i, (_, s))| SilhouetteRow { k: k_min + i, score: *s })
        .collect();
    Ok(SelectKResult {
        k_star: k_min + best,
        table,
        clustering: runs.into_iter().nth(best).expect("non-empty sweep").0,
    })
}

/// Outcome of a spectral bisection.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralSplit {
    /// Indices (into the input) on the non-negative and negative sides of the Fiedler vector.
    Split { positive: Vec<usize>, negative: Vec<usize> },
    /// The Fiedler vector is not determined or does not separate the points.
    NoSplit,
}

/// Splits `points` by the sign of the Fiedler vector of the symmetric
/// normalised Laplacian of the affinity `A_ij = (1 + cos_ij)/2`, `A_ii = 0`.
pub fn spectral_split(points: &[Vec<f64>]) -> Result<SpectralSplit> {
    let pts = Points::new(points)?;
    let all: Vec<usize> = (0..pts.n).collect();
    spectral_split_members(&pts, &all)
}

fn spectral_split_members(pts: &Points, members: &[usize]) -> Result<SpectralSplit> {
    let n = members.len();
    if n < 4 {
        return Err(Error::Config(format!(
            "spectral split needs at least 4 points, got {n}"
        )));
    }
    let dim = pts.dim;
    let mut u = Vec::with_capacity(n * dim);
    for &m in members {
        let row = pts.row(m);
        let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nr == 0.0 {
            return Err(Error::Degenerate("zero vector in spectral split".into()));
        }
        u.extend(row.iter().map(|x| x / nr));
    }
    let (l2, l3, fiedler) = if n <= DENSE_SPECTRAL_MAX {
        dense_fiedler(&u, n, dim)?
    } else {
        lanczos_fiedler(&u, n, dim)?
    };
    if l3 - l2 <= 1e-9 * (1.0 + l3.abs()) {
        return Ok(SpectralSplit::NoSplit);
    }
    let sign = fiedler
        .iter()
        .find(|v| v.abs() > 1e-12)
        .map_or(1.0, |v| v.signum());
    let (mut positive, mut negative) = (Vec::new(), Vec::new());
    for (i, &v) in fiedler.iter().enumerate() {
        if sign * v >= 0.0 {
            positive.push(members[i]);
        } else {
            negative.push(members[i]);
        }
    }
    if positive.is_empty() || negative.is_empty() {
        return Ok(SpectralSplit::NoSplit);
    }
    Ok(SpectralSplit::Split { positive, negative })
}

fn affinity(u: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    gemm(
        0.5,
        MatRef::new(u, n, dim),
        MatRef::new(u, n, dim).t(),
        0.0,
        &mut a,
    );
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = if i == j { 0.0 } else { (0.5 + a[i * n + j]).clamp(0.0, 1.0) };
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

fn inv_sqrt_degrees(degrees: &[f64]) -> Result<Vec<f64>> {
    degrees
        .iter()
        .map(|&d| {
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::Degenerate(
                    "isolated point: a row of the affinity matrix is zero".into(),
                ))
            }
        })
        .collect()
}

/// Returns `(λ₂, λ₃, v₂)` of `L = I − D^{-1/2} A D^{-1/2}`.
fn dense_fiedler(u: &[f64], n: usize, dim: usize) -> Result<(f64, f64, Vec<f64>)> {
    let a = affinity(u, n, dim);
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let s = inv_sqrt_degrees(&deg)?;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let m = s[i] * a[i * n + j] * s[j];
            l[i * n + j] = if i == j { 1.0 - m } else { -m };
        }
    }
    let eig = eigh(&DenseMatrix::new(n, n, l)?)?;
    let l3 = if n > 2 { eig.values[2] } else { f64::INFINITY };
    Ok((eig.values[1], l3, eig.vectors.column(1)))
}

/// Matrix-free variant for large nodes: the two leading eigenpairs of
/// `M = D^{-1/2} A D^{-1/2}` orthogonal to its top eigenvector `D^{1/2}1`.
fn lanczos_fiedler(u: &[f64], n: usize, dim: usize) -> Result<(f64, f64, Vec<f64>)> {
    // A = ½(11ᵀ + UUᵀ) − I for unit rows, so A·x needs two thin products.
    let mut total = vec![0.0; dim];
    for row in u.chunks(dim) {
        total.iter_mut().zip(row).for_each(|(t, x)| *t += x);
    }
    let deg: Vec<f64> = u
        .chunks(dim)
        .map(|row| {
            let d: f64 = row.iter().zip(&total).map(|(a, b)| a * b).sum();
            (n as f64 - 2.0 + d) / 2.0
        })
        .collect();
    let s = inv_sqrt_degrees(&deg)?;
    let apply = |x: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a * b).collect();
        let sum: f64 = y.iter().sum();
        let mut ut = vec![0.0; dim];
        gemm(1.0, MatRef::new(u, n, dim).t(), MatRef::new(&y, n, 1), 0.0, &mut ut);
        let mut out = vec![0.0; n];
        gemm(1.0, MatRef::new(u, n, dim), MatRef::new(&ut, dim, 1), 0.0, &mut out);
        out.iter_mut()
            .zip(&y)
            .zip(&s)
            .for_each(|((o, yi), si)| *o = si * (0.5 * (sum + *o) - yi));
        out
    };
    let mut q0: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    let nq = q0.iter().map(|x| x * x).sum::<f64>().sqrt();
    q0.iter_mut().for_each(|x| *x /= nq);
    // Deterministic, generic start vector.
    let start: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5).collect();
    let pairs = lanczos_largest(n, apply, &[q0], 2, &start)?;
    if pairs.len() < 2 {
        return Err(Error::Numerical("Lanczos returned too few eigenpairs".into()));
    }
    Ok((1.0 - pairs[0].0, 1.0 - pairs[1].0, pairs[0].1.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub members: Vec<usize>,
    /// Normalised mean of the members' embeddings.
    pub centroid: Vec<f64>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    /// Leaf node ids ordered by (depth, creation order).
    pub leaves: Vec<usize>,
    pub n_points: usize,
    pub k_star: usize,
    pub silhouette: Vec<SilhouetteRow>,
    pub low_confidence: bool,
    pub config: DiscoveryConfig,
}

impl ClusterTree {
    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_nodes(&self) -> impl Iterator<Item = &ClusterNode> {
        self.leaves.iter().map(move |&id| &self.nodes[id])
    }

    pub fn leaf_depths(&self) -> Vec<usize> {
        self.leaf_nodes().map(|n| n.depth).collect()
    }

    pub fn leaf_centroids(&self) -> Vec<&[f64]> {
        self.leaf_nodes().map(|n| n.centroid.as_slice()).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Leaf position (index into `leaves`) of every point.
    pub fn leaf_labels(&self) -> Vec<usize> {
        let mut labels = vec![usize::MAX; self.n_points];
        for (j, node) in self.leaf_nodes().enumerate() {
            for &m in &node.members {
                labels[m] = j;
            }
        }
        labels
    }

    /// Structural equality ignoring the config echo (used to compare `d_max` variants).
    pub fn same_structure(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.leaves == other.leaves
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TreeFile {
            schema_version: TREE_SCHEMA_VERSION,
            tree: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TreeFile = serde_json::from_str(&text)?;
        if file.schema_version != TREE_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "tree schema {} is not supported (expected {TREE_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file.tree)
    }

    pub fn write_silhouette_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.silhouette {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    schema_version: u32,
    tree: ClusterTree,
}

fn centroid_of(pts: &Points, members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; pts.dim];
    for &m in members {
        c.iter_mut().zip(pts.row(m)).for_each(|(s, x)| *s += x);
    }
    unit_or_zero(&c)
}

fn binary_silhouette(pts: &Points, a: &[usize], b: &[usize]) -> Result<f64> {
    let members: Vec<usize> = a.iter().chain(b).copied().collect();
    let sub = Points {
        n: members.len(),
        dim: pts.dim,
        data: members.iter().flat_map(|&m| pts.row(m).iter().copied()).collect(),
    };
    let labels: Vec<usize> = (0..members.len()).map(|i| usize::from(i >= a.len())).collect();
    silhouette_from_distances(&sub.distances(), sub.n, &labels)
}

/// Stage 1 by silhouette-selected k-means, then gated recursive spectral refinement.
pub fn build_cluster_tree(points: &[Vec<f64>], config: &DiscoveryConfig) -> Result<ClusterTree> {
    config.validate()?;
    let pts = Points::new(points)?;
    let sel = select_k_points(&pts, config.k_min, config.k_max, config.seed, config.kmeans_restarts)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); sel.k_star];
    for (i, &a) in sel.clustering.assignments.iter().enumerate() {
        groups[a].push(i);
    }
    let low_confidence = sel.low_confidence();
    refine(&pts, groups, config, sel.k_star, sel.table, low_confidence)
}

fn refine(
    pts: &Points,
    groups: Vec<Vec<usize>>,
    config: &DiscoveryConfig,
    k_star: usize,
    silhouette: Vec<SilhouetteRow>,
    low_confidence: bool,
) -> Result<ClusterTree> {
    let s_min = config.s_min_fraction * pts.n as f64;
    let mut nodes: Vec<ClusterNode> = groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| ClusterNode {
            id,
            parent: None,
            depth: 0,
            centroid: centroid_of(pts, &members),
            members,
            children: Vec::new(),
        })
        .collect();
    // Breadth-first: ids grow with depth, so creation order respects depth.
    let mut frontier: Vec<usize> = (0..nodes.len()).collect();
    while !frontier.is_empty() {
        let eligible: Vec<usize> = frontier
            .iter()
            .copied()
            .filter(|&id| {
                let node = &nodes[id];
                node.depth < config.d_max && node.members.len() as f64 >= s_min && node.members.len() >= 4
            })
            .collect();
        let splits: Vec<Option<(Vec<usize>, Vec<usize>)>> = eligible
            .par_iter()
            .map(|&id| -> Result<Option<(Vec<usize>, Vec<usize>)>> {
                let members = &nodes[id].members;
                match spectral_split_members(pts, members)? {
                    SpectralSplit::NoSplit => Ok(None),
                    SpectralSplit::Split { positive, negative } => {
                        if (positive.len() as f64) < s_min || (negative.len() as f64) < s_min {
                            return Ok(None);
                        }
                        if let Some(min_s) = config.min_split_silhouette {
                            if binary_silhouette(pts, &positive, &negative)? < min_s {
                                return Ok(None);
                            }
                        }
                        Ok(Some((positive, negative)))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut next = Vec::new();
        for (&id, split) in eligible.iter().zip(splits) {
            if let Some((pos, neg)) = split {
                let depth = nodes[id].depth + 1;
                for members in [pos, neg] {
                    let child = nodes.len();
                    nodes.push(ClusterNode {
                        id: child,
                        parent: Some(id),
                        depth,
                        centroid: centroid_of(pts, &members),
                        members,
                        children: Vec::new(),
                    });
                    nodes[id].children.push(child);
                    next.push(child);
                }
            }
        }
        frontier = next;
    }
    let mut leaves: Vec<usize> = nodes
        .iter()
        .filter(|n| n.children.is_empty())
        .map(|n| n.id)
        .collect();
    leaves.sort_by_key(|&id| (nodes[id].depth, id));
    Ok(ClusterTree {
        nodes,
        leaves,
        n_points: pts.n,
        k_star,
        silhouette,
        low_confidence,
        config: config.clone(),
    })
}

/// Single-level k-means clustering packaged as a tree of depth-0 leaves.
pub fn flat_baseline(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterTree> {
    let pts = Points::new(points)?;
    let km = kmeans_points(&pts, k, seed, DiscoveryConfig::default().kmeans_restarts)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in km.assignments.iter().enumerate() {
        groups[a].push(i);
    }
    let config = DiscoveryConfig {
        k_min: k.max(2),
        k_max: k.max(2),
        d_max: 1,
        seed,
        ..DiscoveryConfig::default()
    };
    let nodes: Vec<ClusterNode> = groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| ClusterNode {
            id,
            parent: None,
            depth: 0,
            centroid: centroid_of(&pts, &members),
            members,
            children: Vec::new(),
        })
        .collect();
    Ok(ClusterTree {
        leaves: (0..nodes.len()).collect(),
        nodes,
        n_points: pts.n,
        k_star: k,
        silhouette: Vec::new(),
        low_confidence: false,
        config,
    })
}

/// `softmax(α · cos(ẑ, c_j))` over the leaf centroids.
pub fn soft_assign(z_hat: &[f64], tree: &ClusterTree, alpha: f64) -> Result<ProbVector> {
    soft_assign_centroids(z_hat, &tree.leaf_centroids(), alpha)
}

pub fn soft_assign_centroids(z_hat: &[f64], centroids: &[&[f64]], alpha: f64) -> Result<ProbVector> {
    if centroids.len() < 2 {
        return Err(Error::Degenerate("soft assignment needs at least two leaves".into()));
    }
    let scores = centroids
        .iter()
        .map(|c| cosine_sim(z_hat, c))
        .collect::<Result<Vec<_>>>()?;
    softmax_scaled(&scores, alpha)
}

/// Elementwise mean of the batch's soft assignments.
pub fn batch_distribution(assignments: &[ProbVector]) -> Result<ProbVector> {
    let first = assignments
        .first()
        .ok_or_else(|| Error::Empty("batch distribution of an empty batch".into()))?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in assignments {
        if p.len() != k {
            return Err(Error::Dimension("assignment vectors differ in length".into()));
        }
        mean.iter_mut().zip(p.as_slice()).for_each(|(m, x)| *m += x);
    }
    let n = assignments.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(ProbVector::from_normalized(mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    DepthWeightedUniform,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probs: ProbVector,
    pub kind: TargetKind,
}

/// Depth-weighted uniform target `w_j ∝ 1/(d_j + 1)`, or `custom` verbatim.
pub fn target_distribution(tree: &ClusterTree, custom: Option<&[f64]>) -> Result<TargetDistribution> {
    target_from_depths(&tree.leaf_depths(), custom)
}

pub fn target_from_depths(depths: &[usize], custom: Option<&[f64]>) -> Result<TargetDistribution> {
    if let Some(c) = custom {
        if c.len() != depths.len() {
            return Err(Error::Config(format!(
                "custom target has {} entries for {} leaves",
                c.len(),
                depths.len()
            )));
        }
        let probs = ProbVector::new(c.to_vec()).map_err(|e| Error::Config(format!("custom target: {e}")))?;
        return Ok(TargetDistribution {
            probs,
            kind: TargetKind::Custom,
        });
    }
    if depths.is_empty() {
        return Err(Error::Empty("tree has no leaves".into()));
    }
    let w: Vec<f64> = depths.iter().map(|&d| 1.0 / (d as f64 + 1.0)).collect();
    let total: f64 = w.iter().sum();
    Ok(TargetDistribution {
        probs: ProbVector::from_normalized(w.iter().map(|x| x / total).collect()),
        kind: TargetKind::DepthWeightedUniform,
    })
}
