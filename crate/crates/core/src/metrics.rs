//! Evaluation of generated batches against a target class distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, gemm, nuclear_norm, softmax_scaled, sqrtm_psd, DenseMatrix, MatRef, ProbVector};
use crate::surrogate::Surrogate;

/// Ridge added to covariances fitted from fewer than `dim + 1` samples.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Negative Fréchet residue down to this is clamped to zero.
pub const FRECHET_NEGATIVE_TOL: f64 = 1e-8;
/// Temperature of the soft oracle used for the soft fairness discrepancy.
pub const SOFT_ORACLE_ALPHA: f64 = 8.0;

/// Mode whose decoded mean embedding is most cosine-similar to `z`; ties go to the lowest index.
pub fn classify_oracle(z: &[f64], surrogate: &Surrogate) -> Result<usize> {
    argmax_cosine(z, surrogate.mode_embeddings())
}

/// Index of the reference with the highest cosine to `z`; ties go to the lowest index.
pub fn argmax_cosine(z: &[f64], references: &[Vec<f64>]) -> Result<usize> {
    if references.first().is_some_and(|m| m.len() != z.len()) {
        return Err(Error::Dimension(format!(
            "embedding has length {}, references have length {}",
            z.len(),
            references[0].len()
        )));
    }
    let mut best = 0;
    let mut best_c = f64::NEG_INFINITY;
    for (j, m) in references.iter().enumerate() {
        let c = cosine_sim(z, m)?;
        if c > best_c {
            best_c = c;
            best = j;
        }
    }
    Ok(best)
}

pub fn classify_all(zs: &[Vec<f64>], surrogate: &Surrogate) -> Result<Vec<usize>> {
    zs.par_iter().map(|z| classify_oracle(z, surrogate)).collect()
}

/// `softmax(SOFT_ORACLE_ALPHA · cos(z, mode embedding))`.
pub fn soft_oracle(z: &[f64], surrogate: &Surrogate) -> Result<ProbVector> {
    let scores = surrogate
        .mode_embeddings()
        .iter()
        .map(|m| cosine_sim(z, m))
        .collect::<Result<Vec<_>>>()?;
    softmax_scaled(&scores, SOFT_ORACLE_ALPHA)
}

pub fn histogram(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Dimension(format!("label {l} is outside 0..{k}")))? += 1;
    }
    Ok(counts)
}

pub fn frequencies(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("no labels".into()));
    }
    let n = labels.len() as f64;
    Ok(histogram(labels, k)?.iter().map(|&c| c as f64 / n).collect())
}

/// `‖target − empirical frequencies‖₂` over hard labels.
pub fn fairness_discrepancy(labels: &[usize], target: &ProbVector) -> Result<f64> {
    let freq = frequencies(labels, target.len())?;
    Ok(l2_gap(&freq, target.as_slice()))
}

/// `‖target − mean soft class probability‖₂`.
pub fn soft_fairness_discrepancy(probs: &[ProbVector], target: &ProbVector) -> Result<f64> {
    let first = probs.first().ok_or_else(|| Error::Empty("no class probabilities".into()))?;
    if first.len() != target.len() {
        return Err(Error::Dimension("class probabilities do not match the target".into()));
    }
    let mut mean = vec![0.0; target.len()];
    for p in probs {
        if p.len() != mean.len() {
            return Err(Error::Dimension("class probability vectors differ in length".into()));
        }
        mean.iter_mut().zip(p.as_slice()).for_each(|(m, x)| *m += x);
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(l2_gap(&mean, target.as_slice()))
}

fn l2_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(max_c freq_c − 1/k) / (1 − 1/k)`.
pub fn deviation_ratio(labels: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config("deviation ratio needs at least two classes".into()));
    }
    let freq = frequencies(labels, k)?;
    let max = freq.iter().copied().fold(0.0, f64::max);
    let fair = 1.0 / k as f64;
    Ok(((max - fair) / (1.0 - fair)).clamp(0.0, 1.0))
}

/// Shannon entropy in nats; `0·ln 0 = 0`.
pub fn entropy(freq: &[f64]) -> f64 {
    -freq.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Mean and unbiased covariance of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub n: usize,
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
}

impl GaussianFit {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Empty(format!(
                "a Gaussian fit needs at least 2 samples, got {n}"
            )));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::Dimension("points must share a non-zero length".into()));
        }
        let mut mean = vec![0.0; dim];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred: Vec<f64> = points
            .iter()
            .flat_map(|p| p.iter().zip(&mean).map(|(x, m)| x - m))
            .collect();
        let mut cov = vec![0.0; dim * dim];
        gemm(
            1.0 / (n - 1) as f64,
            MatRef::new(&centred, n, dim).t(),
            MatRef::new(&centred, n, dim),
            0.0,
            &mut cov,
        );
        for i in 0..dim {
            for j in (i + 1)..dim {
                let v = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        if n < dim + 1 {
            for i in 0..dim {
                cov[i * dim + i] += COVARIANCE_RIDGE;
            }
        }
        Ok(Self {
            n,
            mean,
            cov: DenseMatrix::new(dim, dim, cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A fitted reference set with its covariance square root cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetReference {
    pub fit: GaussianFit,
    pub sqrt_cov: DenseMatrix,
}

impl FrechetReference {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let fit = GaussianFit::fit(points)?;
        let sqrt_cov = sqrtm_psd(&fit.cov)?;
        Ok(Self { fit, sqrt_cov })
    }

    /// Squared Fréchet distance from this reference to `points`.
    pub fn distance(&self, points: &[Vec<f64>]) -> Result<f64> {
        let other = Self::new(points)?;
        frechet_between(self, &other)
    }
}

/// `‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
///
/// The last trace equals the nuclear norm of `Σ₁^{1/2} Σ₂^{1/2}`, which is
/// evaluated by SVD so that round-off in tiny eigenvalues is not square-rooted.
pub fn frechet_between(a: &FrechetReference, b: &FrechetReference) -> Result<f64> {
    let dim = a.fit.dim();
    if b.fit.dim() != dim {
        return Err(Error::Dimension(format!(
            "Fréchet distance between {dim}- and {}-dimensional sets",
            b.fit.dim()
        )));
    }
    let mean_term: f64 = a.fit.mean.iter().zip(&b.fit.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let product = a.sqrt_cov.matmul(&b.sqrt_cov)?;
    let cross = nuclear_norm(&product)?;
    let d2 = mean_term + a.fit.cov.trace() + b.fit.cov.trace() - 2.0 * cross;
    if d2 < -FRECHET_NEGATIVE_TOL {
        return Err(Error::Numerical(format!("Fréchet distance is negative ({d2:e})")));
    }
    Ok(d2.max(0.0))
}

/// Squared Fréchet distance between Gaussians fitted to two sets.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    frechet_between(&FrechetReference::new(set_a)?, &FrechetReference::new(set_b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fd: f64,
    pub fd_soft: f64,
    pub deviation_ratio: f64,
    pub frechet: f64,
    pub histogram: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub entropy: f64,
    pub n: usize,
}

impl EvalResult {
    pub fn csv_header() -> &'static [&'static str] {
        &["n", "fd", "fd_soft", "deviation_ratio", "frechet", "entropy"]
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.fd.to_string(),
            self.fd_soft.to_string(),
            self.deviation_ratio.to_string(),
            self.frechet.to_string(),
            self.entropy.to_string(),
        ]
    }
}

/// Oracle-labels `embeddings` and scores them against `target` and the reference set.
pub fn evaluate(
    embeddings: &[Vec<f64>],
    surrogate: &Surrogate,
    target: &ProbVector,
    reference: Option<&FrechetReference>,
) -> Result<EvalResult> {
    let reference =
        reference.ok_or_else(|| Error::Config("evaluation needs an unguided reference set".into()))?;
    let k = surrogate.num_modes();
    if target.len() != k {
        return Err(Error::Config(format!(
            "target has {} classes, generator has {k} modes",
            target.len()
        )));
    }
    let labels = classify_all(embeddings, surrogate)?;
    let soft = embeddings
        .par_iter()
        .map(|z| soft_oracle(z, surrogate))
        .collect::<Result<Vec<_>>>()?;
    let freq = frequencies(&labels, k)?;
    Ok(EvalResult {
        fd: fairness_discrepancy(&labels, target)?,
        fd_soft: soft_fairness_discrepancy(&soft, target)?,
        deviation_ratio: if k >= 2 { deviation_ratio(&labels, k)? } else { 0.0 },
        frechet: reference.distance(embeddings)?,
        histogram: histogram(&labels, k)?,
        entropy: entropy(&freq),
        frequencies: freq,
        n: embeddings.len(),
    })
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension("labelings differ in length".into()));
    }
    if a.is_empty() {
        return Err(Error::Empty("no labels".into()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let sum_cells: f64 = table.iter().map(|&c| pairs(c)).sum();
    let sum_a: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::GeneratorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, mean: &[f64], chol: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        let d = mean.len();
        (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (0..d)
                    .map(|i| mean[i] + (0..=i).map(|j| chol[i][j] * e[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fd_cases() {
        let u = ProbVector::uniform(2).unwrap();
        assert_eq!(fairness_discrepancy(&[0, 1, 1, 0], &u).unwrap(), 0.0);
        assert!((fairness_discrepancy(&[0, 0, 0], &u).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let seventy: Vec<usize> = (0..100).map(|i| usize::from(i >= 70)).collect();
        assert!((fairness_discrepancy(&seventy, &u).unwrap() - 0.08f64.sqrt()).abs() < 1e-15);
        assert!(matches!(fairness_discrepancy(&[], &u), Err(Error::Empty(_))));
        let t = ProbVector::new(vec![0.7, 0.3]).unwrap();
        assert!(fairness_discrepancy(&seventy, &t).unwrap() < 1e-15);
    }

    #[test]
    fn soft_fd_matches_hard_on_one_hot() {
        let u = ProbVector::uniform(2).unwrap();
        let one_hot = |c: usize| ProbVector::new(if c == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).unwrap();
        let labels = [0, 0, 0, 1];
        let soft: Vec<ProbVector> = labels.iter().map(|&c| one_hot(c)).collect();
        assert_eq!(
            soft_fairness_discrepancy(&soft, &u).unwrap(),
            fairness_discrepancy(&labels, &u).unwrap()
        );
    }

    #[test]
    fn deviation_ratio_cases() {
        assert_eq!(deviation_ratio(&[0, 1, 0, 1], 2).unwrap(), 0.0);
        assert_eq!(deviation_ratio(&[2, 2, 2], 3).unwrap(), 1.0);
        let split: Vec<usize> = (0..100).map(|i| usize::from(i >= 86)).collect();
        assert!((deviation_ratio(&split, 2).unwrap() - 0.72).abs() < 1e-12);
        assert!(matches!(deviation_ratio(&[], 2), Err(Error::Empty(_))));
        assert!(matches!(deviation_ratio(&[0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chol = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.8, 0.0], vec![-0.2, 0.3, 0.4]];
        let a = gaussian(&mut rng, &[0.0, 1.0, 2.0], &chol, 500);
        let b = gaussian(&mut rng, &[0.5, 1.0, 1.0], &chol, 400);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-8, "{ab} {ba}");
        assert!(matches!(frechet_distance(&a[..1], &b), Err(Error::Empty(_))));
    }

    #[test]
    fn frechet_univariate_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, &[0.0], &[vec![1.0]], 50_000);
        let b = gaussian(&mut rng, &[3.0], &[vec![2.0]], 50_000);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 10.0).abs() <= 0.3, "{d}");
    }

    #[test]
    fn frechet_matches_closed_form_for_commuting_covariances() {
        // Diagonal covariances: d² = ‖Δμ‖² + Σ (√a_i − √b_i)².
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sa = [1.0, 0.5, 2.0, 0.1];
        let sb = [0.7, 1.5, 1.0, 0.3];
        let diag = |s: &[f64]| -> Vec<Vec<f64>> {
            (0..s.len())
                .map(|i| (0..s.len()).map(|j| if i == j { s[i] } else { 0.0 }).collect())
                .collect()
        };
        let a = gaussian(&mut rng, &[0.0; 4], &diag(&sa), 50_000);
        let b = gaussian(&mut rng, &[1.0, 0.0, -1.0, 0.5], &diag(&sb), 50_000);
        let exact = 2.25 + sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - exact).abs() <= 0.03 * exact, "{d} vs {exact}");
    }

    #[test]
    fn small_sets_are_regularised() {
        let pts = vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let fit = GaussianFit::fit(&pts).unwrap();
        assert!((fit.cov.get(1, 1) - COVARIANCE_RIDGE).abs() < 1e-18);
        assert!(frechet_distance(&pts, &pts).unwrap() <= 1e-8);
    }

    fn default_surrogate() -> Surrogate {
        Surrogate::new(GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn oracle_cases() {
        let s = default_surrogate();
        for (j, e) in s.mode_embeddings().iter().enumerate() {
            assert_eq!(classify_oracle(e, &s).unwrap(), j);
        }
        assert!(matches!(classify_oracle(&[1.0, 0.0], &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn oracle_tie_goes_to_lowest_index() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(argmax_cosine(&[1.0, 1.0], &refs).unwrap(), 0);
        assert_eq!(argmax_cosine(&[1.0, 1.1], &refs).unwrap(), 1);
    }

    #[test]
    fn oracle_agrees_with_hidden_modes() {
        let s = default_surrogate();
        let samples = s.run_unguided(2000, 5).unwrap();
        let hits = samples
            .iter()
            .filter(|f| classify_oracle(&f.z, &s).unwrap() == f.true_mode)
            .count();
        assert!(hits as f64 / samples.len() as f64 >= 0.99);
    }

    #[test]
    fn evaluate_self_reference() {
        let s = default_surrogate();
        let zs: Vec<Vec<f64>> = s.run_unguided(600, 6).unwrap().into_iter().map(|f| f.z).collect();
        let reference = FrechetReference::new(&zs).unwrap();
        let u = ProbVector::uniform(2).unwrap();
        let r = evaluate(&zs, &s, &u, Some(&reference)).unwrap();
        assert!(r.frechet <= 1e-8, "{}", r.frechet);
        let labels = classify_all(&zs, &s).unwrap();
        assert_eq!(r.fd, fairness_discrepancy(&labels, &u).unwrap());
        assert_eq!(r.histogram.iter().sum::<usize>(), r.n);
        assert!(r.fd <= 2f64.sqrt());
        assert_eq!(r, evaluate(&zs, &s, &u, Some(&reference)).unwrap());
        assert!(matches!(evaluate(&zs, &s, &u, None), Err(Error::Config(_))));
    }

    #[test]
    fn ari_cases() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // Hand-computed: contingency [[1,1],[1,1]] → index 0, expected 2·2/6, max 2.
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v - (0.0 - 2.0 / 3.0) / (2.0 - 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn deviation_ratio_in_unit_interval(labels in prop::collection::vec(0usize..4, 1..60)) {
            let d = deviation_ratio(&labels, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn fd_zero_iff_frequencies_match(labels in prop::collection::vec(0usize..3, 1..40)) {
            let freq = frequencies(&labels, 3).unwrap();
            let target = ProbVector::new(freq.clone()).unwrap();
            prop_assert!(fairness_discrepancy(&labels, &target).unwrap() < 1e-12);
            let u = ProbVector::uniform(3).unwrap();
            let fd = fairness_discrepancy(&labels, &u).unwrap();
            let balanced = freq.iter().all(|&f| (f - 1.0 / 3.0).abs() < 1e-12);
            prop_assert_eq!(fd < 1e-12, balanced);
        }

        #[test]
        fn ari_is_permutation_invariant(
            labels in prop::collection::vec(0usize..3, 4..40),
            other in prop::collection::vec(0usize..3, 40),
        ) {
            let b = &other[..labels.len()];
            let permuted: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
            let x = adjusted_rand_index(&labels, b).unwrap();
            let y = adjusted_rand_index(&permuted, b).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_is_nonnegative_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let d = rng.random_range(1..6);
            let n = rng.random_range(2..30);
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
            assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
        }
    }
}
