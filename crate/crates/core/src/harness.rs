//! Staged, persisted, reproducible experiment runs.
//!
//! A run directory holds the artifacts of five stages
//! (generate → train → discover → debias → evaluate). Each stage writes a
//! `<stage>.stage.json` manifest carrying a config hash. Hashes chain: a
//! stage's hash covers its own settings and its upstream hash, so any change
//! upstream invalidates every later stage. Wall-clock costs go to
//! `timings.json` and never into the report, which is byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::discovery::{
    build_cluster_tree, target_distribution, ClusterTree, DiscoveryConfig, SilhouetteRow, TargetKind,
};
use crate::error::{Error, Result};
use crate::guidance::{guided_sampling, DebiasRunTrace, GuidanceConfig, GuidanceTarget};
use crate::metrics::{argmax_cosine, evaluate, EvalResult, FrechetReference};
use crate::numerics::ProbVector;
use crate::projector::{train, ProjectorParams, TrainConfig, TrainLog};
use crate::surrogate::{read_jsonl, write_jsonl, Dataset, FinalSample, GeneratorConfig, Surrogate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const SAMPLES_SCHEMA_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const REFERENCE_FILE: &str = "reference.jsonl";
pub const PROJECTOR_FILE: &str = "projector.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const TRAIN_CSV_FILE: &str = "train_log.csv";
pub const TREE_FILE: &str = "tree.json";
pub const SILHOUETTE_FILE: &str = "silhouette.csv";
pub const DISCOVERY_INFO_FILE: &str = "discovery.json";
pub const GUIDED_FILE: &str = "guided.jsonl";
pub const TRACE_FILE: &str = "debias_trace.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const HISTOGRAM_CSV: &str = "histograms.csv";
pub const KL_TRACE_CSV: &str = "kl_trace.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Train,
    Discover,
    Debias,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generate,
        Stage::Train,
        Stage::Discover,
        Stage::Debias,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Discover => "discover",
            Stage::Debias => "debias",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Generate => None,
            Stage::Train => Some(Stage::Generate),
            Stage::Discover => Some(Stage::Train),
            Stage::Debias => Some(Stage::Discover),
            Stage::Evaluate => Some(Stage::Debias),
        }
    }

    pub fn manifest_file(self) -> String {
        format!("{}.stage.json", self.name())
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to reproduce a run.
///
/// The `seed` fields of the projector and discovery sub-configs are not used
/// directly: every stage draws its seed from `seed` via
/// [`crate::derive_seed`] with the stage name. `generator.seed` is kept as
/// given because it fixes the decoder, i.e. the generative model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub projector: TrainConfig,
    pub discovery: DiscoveryConfig,
    pub guidance: GuidanceConfig,
    pub n_corpus: usize,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "path_is_empty")]
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Timesteps recorded in the training corpus.
    pub capture_timesteps: Vec<usize>,
    /// Corpus timestep whose projected latents are clustered.
    pub discovery_timestep: usize,
    /// Custom leaf target; `None` selects the depth-weighted uniform target.
    pub target: Option<Vec<f64>>,
    /// Run directory whose discovered tree replaces clustering of this run's corpus.
    pub centroid_source: Option<PathBuf>,
}

fn path_is_empty(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            projector: TrainConfig::default(),
            discovery: DiscoveryConfig::default(),
            guidance: GuidanceConfig::default(),
            n_corpus: 2000,
            n_eval: 1000,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            capture_timesteps: (10..=40).step_by(5).collect(),
            discovery_timestep: 10,
            target: None,
            centroid_source: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.projector.validate()?;
        self.discovery.validate()?;
        self.guidance.validate()?;
        if self.n_corpus == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_corpus and n_eval must be at least 1".into()));
        }
        if self.capture_timesteps.is_empty() {
            return Err(Error::Config("capture_timesteps must not be empty".into()));
        }
        if !self.capture_timesteps.contains(&self.discovery_timestep) {
            return Err(Error::Config(format!(
                "discovery_timestep {} is not among capture_timesteps {:?}",
                self.discovery_timestep, self.capture_timesteps
            )));
        }
        if let Some(&t) = self.guidance.guided_timesteps.iter().next_back() {
            if t > self.generator.steps {
                return Err(Error::Config(format!(
                    "guided timestep {t} exceeds the {} generator steps",
                    self.generator.steps
                )));
            }
        }
        if let Some(target) = &self.target {
            ProbVector::new(target.clone()).map_err(|e| Error::Config(format!("target: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !path_is_empty(d)) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `seed ^ stable_hash(stage)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        crate::derive_seed(self.seed, stage)
    }

    /// Seed of the corpus trajectories.
    pub fn corpus_seed(&self) -> u64 {
        self.stage_seed("generate")
    }

    /// Seed shared by the unguided reference and the guided run, so both start
    /// from the same initial latents.
    pub fn sample_seed(&self) -> u64 {
        self.stage_seed("sample")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train"),
            ..self.projector.clone()
        }
    }

    pub fn discovery_config(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            seed: self.stage_seed("discover"),
            ..self.discovery.clone()
        }
    }

    fn stage_settings(&self, stage: Stage) -> Result<serde_json::Value> {
        Ok(match stage {
            Stage::Generate => json!({
                "generator": self.generator,
                "n_corpus": self.n_corpus,
                "n_eval": self.n_eval,
                "capture_timesteps": self.capture_timesteps,
                "corpus_seed": self.corpus_seed(),
                "sample_seed": self.sample_seed(),
            }),
            Stage::Train => json!({ "projector": self.train_config() }),
            Stage::Discover => {
                let source = match &self.centroid_source {
                    Some(dir) => {
                        let path = dir.join(TREE_FILE);
                        let bytes = std::fs::read(&path).map_err(|_| {
                            Error::Dependency(format!(
                                "centroid source {} has no {TREE_FILE}; run discover there first",
                                dir.display()
                            ))
                        })?;
                        Some(hex::encode(Sha256::digest(&bytes)))
                    }
                    None => None,
                };
                json!({
                    "discovery": self.discovery_config(),
                    "discovery_timestep": self.discovery_timestep,
                    "centroid_source_tree": source,
                })
            }
            Stage::Debias => json!({ "guidance": self.guidance, "target": self.target }),
            Stage::Evaluate => json!({}),
        })
    }

    /// Hex sha256 over the upstream hash, the stage name and the stage's settings.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let upstream = match stage.upstream() {
            Some(u) => self.stage_hash(u)?,
            None => String::new(),
        };
        let mut h = Sha256::new();
        h.update(upstream.as_bytes());
        h.update(stage.name().as_bytes());
        h.update(serde_json::to_vec(&self.stage_settings(stage)?)?);
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleSetHeader {
    schema_version: u32,
    guided: bool,
    n: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiscoveryInfo {
    foreign_centroids: bool,
    centroid_source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSummary {
    pub node: usize,
    pub depth: usize,
    pub size: usize,
    /// Ground-truth mode whose embedding is closest to the leaf centroid.
    pub mode: usize,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub k_star: usize,
    pub num_leaves: usize,
    pub max_depth: usize,
    pub n_points: usize,
    pub low_confidence: bool,
    pub leaves: Vec<LeafSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub t: usize,
    pub kl_before: f64,
    pub kl_after: f64,
}

/// Final product of a run. Wall-clock costs live in `timings.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReport {
    pub schema_version: u32,
    /// Config echo with `output_dir` cleared, so identical experiments in
    /// different directories produce identical reports.
    pub config: ExperimentConfig,
    pub stage_hashes: BTreeMap<Stage, String>,
    pub projector_val_cosine: f64,
    pub tree: TreeSummary,
    pub silhouette: Vec<SilhouetteRow>,
    pub target_kind: TargetKind,
    /// Leaf target folded onto ground-truth modes through the leaf → mode map.
    pub mode_target: Vec<f64>,
    pub pre: EvalResult,
    pub post: EvalResult,
    /// `1 − fd_post/fd_pre`; absent when the unguided FD is 0.
    pub fd_reduction: Option<f64>,
    pub kl_trace: Vec<KlRow>,
    pub kl_final: Option<f64>,
    pub non_monotone_steps: usize,
    pub foreign_centroids: bool,
    pub timings_file: String,
}

impl DebiasReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "report schema {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Checks that the counts recorded in different sections agree.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.config.n_eval;
        let fail = |what: String| Err(Error::Data(format!("inconsistent report: {what}")));
        if self.pre.n != n || self.post.n != n {
            return fail(format!("pre/post sizes {}/{} for n_eval {n}", self.pre.n, self.post.n));
        }
        if self.pre.histogram.iter().sum::<usize>() != n || self.post.histogram.iter().sum::<usize>() != n {
            return fail("histograms do not sum to n_eval".into());
        }
        if self.tree.leaves.len() != self.tree.num_leaves {
            return fail("leaf list length differs from num_leaves".into());
        }
        if !self.foreign_centroids && self.tree.leaves.iter().map(|l| l.size).sum::<usize>() != self.tree.n_points {
            return fail("leaf sizes do not sum to the clustered point count".into());
        }
        if self.mode_target.len() != self.pre.histogram.len() {
            return fail("mode target length differs from the mode count".into());
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_manifest(dir: &Path, stage: Stage) -> Result<Option<StageManifest>> {
    let path = dir.join(stage.manifest_file());
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Errors unless `stage` has a manifest in `dir` whose hash matches `config`.
pub fn require_fresh(config: &ExperimentConfig, dir: &Path, stage: Stage) -> Result<()> {
    let manifest = read_manifest(dir, stage)?.ok_or_else(|| {
        Error::Dependency(format!(
            "stage `{stage}` has not been run in {} ({} is missing)",
            dir.display(),
            stage.manifest_file()
        ))
    })?;
    let expected = config.stage_hash(stage)?;
    if manifest.config_hash != expected {
        return Err(Error::Stale(format!(
            "stage `{stage}` in {} was produced under a different configuration (hash {}, expected {}); rerun `{stage}`",
            dir.display(),
            &manifest.config_hash[..12.min(manifest.config_hash.len())],
            &expected[..12]
        )));
    }
    Ok(())
}

/// True when `stage` has an up-to-date manifest.
pub fn is_fresh(config: &ExperimentConfig, stage: Stage) -> Result<bool> {
    match require_fresh(config, &config.output_dir, stage) {
        Ok(()) => Ok(true),
        Err(Error::Dependency(_) | Error::Stale(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn record_timing(dir: &Path, stage: Stage, seconds: f64) -> Result<()> {
    let path = dir.join(TIMINGS_FILE);
    let mut stages: BTreeMap<String, f64> = if path.exists() {
        let value: serde_json::Value = read_json(&path)?;
        serde_json::from_value(value["stages"].clone()).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    stages.insert(stage.name().to_string(), seconds);
    let preprocessing: f64 = ["generate", "train", "discover"]
        .iter()
        .filter_map(|s| stages.get(*s))
        .sum();
    let value = json!({
        "stages": stages,
        "one_time_preprocessing_seconds": preprocessing,
        "guided_sampling_seconds": stages.get("debias"),
    });
    write_json(&path, &value)
}

/// Runs one stage after checking its upstream, then writes its manifest and timing.
pub fn run_stage(config: &ExperimentConfig, stage: Stage) -> Result<()> {
    config.validate()?;
    let dir = &config.output_dir;
    if let Some(up) = stage.upstream() {
        require_fresh(config, dir, up)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(stage.manifest_file());
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let start = Instant::now();
    match stage {
        Stage::Generate => generate_stage(config, dir)?,
        Stage::Train => train_stage(config, dir)?,
        Stage::Discover => discover_stage(config, dir)?,
        Stage::Debias => debias_stage(config, dir)?,
        Stage::Evaluate => evaluate_stage(config, dir)?,
    }
    let seconds = start.elapsed().as_secs_f64();
    write_json(
        &manifest_path,
        &StageManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            stage,
            config_hash: config.stage_hash(stage)?,
        },
    )?;
    record_timing(dir, stage, seconds)
}

pub fn cmd_generate(config: &ExperimentConfig) -> Result<()> {
    run_stage(config, Stage::Generate)
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    run_stage(config, Stage::Train)
}

pub fn cmd_discover(config: &ExperimentConfig) -> Result<()> {
    run_stage(config, Stage::Discover)
}

pub fn cmd_debias(config: &ExperimentConfig) -> Result<()> {
    run_stage(config, Stage::Debias)
}

pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<DebiasReport> {
    run_stage(config, Stage::Evaluate)?;
    DebiasReport::load(&config.output_dir.join(REPORT_FILE))
}

/// Runs every stage in order. With `reuse`, stages whose manifests are
/// already up to date are skipped.
pub fn cmd_pipeline(config: &ExperimentConfig, reuse: bool) -> Result<DebiasReport> {
    config.validate()?;
    for stage in Stage::ALL {
        if reuse && is_fresh(config, stage)? {
            continue;
        }
        run_stage(config, stage)?;
    }
    DebiasReport::load(&config.output_dir.join(REPORT_FILE))
}

/// Writes the default config, pointed at `output_dir`, to `path`.
pub fn cmd_init(path: &Path, output_dir: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig {
        output_dir: output_dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    config.save(path)?;
    Ok(config)
}

fn write_samples(path: &Path, samples: &[FinalSample], guided: bool, seed: u64) -> Result<()> {
    let header = SampleSetHeader {
        schema_version: SAMPLES_SCHEMA_VERSION,
        guided,
        n: samples.len(),
        seed,
    };
    write_jsonl(path, &header, samples)
}

fn read_samples(path: &Path) -> Result<Vec<FinalSample>> {
    let (header, samples): (SampleSetHeader, Vec<FinalSample>) = read_jsonl(path)?;
    if header.schema_version != SAMPLES_SCHEMA_VERSION || header.n != samples.len() {
        return Err(Error::Data(format!(
            "{}: schema {} with {} of {} samples",
            path.display(),
            header.schema_version,
            samples.len(),
            header.n
        )));
    }
    Ok(samples)
}

fn embeddings(samples: &[FinalSample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.z.clone()).collect()
}

fn generate_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let surrogate = Surrogate::new(config.generator.clone())?;
    let corpus = surrogate.generate_dataset(config.n_corpus, &config.capture_timesteps, config.corpus_seed())?;
    corpus.write_jsonl(&dir.join(CORPUS_FILE))?;
    let reference = surrogate.run_unguided(config.n_eval, config.sample_seed())?;
    write_samples(&dir.join(REFERENCE_FILE), &reference, false, config.sample_seed())
}

fn train_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let corpus = Dataset::read_jsonl(&dir.join(CORPUS_FILE))?;
    let (params, log) = train(&corpus, &config.train_config())?;
    params.save(&dir.join(PROJECTOR_FILE))?;
    log.write_csv(&dir.join(TRAIN_CSV_FILE))?;
    write_json(&dir.join(TRAIN_LOG_FILE), &log)
}

fn discover_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let params = ProjectorParams::load(&dir.join(PROJECTOR_FILE))?;
    let (tree, info) = match &config.centroid_source {
        Some(source) => {
            let tree = ClusterTree::load(&source.join(TREE_FILE))?;
            if let Some(c) = tree.leaf_centroids().iter().find(|c| c.len() != params.embed_dim) {
                return Err(Error::Dimension(format!(
                    "foreign centroids have dimension {}, projector emits {}",
                    c.len(),
                    params.embed_dim
                )));
            }
            let ours = config.stage_hash(Stage::Generate)?;
            let foreign = match read_manifest(source, Stage::Generate)? {
                Some(m) => m.config_hash != ours,
                None => true,
            };
            (
                tree,
                DiscoveryInfo {
                    foreign_centroids: foreign,
                    centroid_source: Some(source.clone()),
                },
            )
        }
        None => {
            let corpus = Dataset::read_jsonl(&dir.join(CORPUS_FILE))?;
            let t = config.discovery_timestep;
            let points = corpus
                .at_timestep(t)
                .map(|r| params.forward(&r.h, t))
                .collect::<Result<Vec<_>>>()?;
            let tree = build_cluster_tree(&points, &config.discovery_config())?;
            (
                tree,
                DiscoveryInfo {
                    foreign_centroids: false,
                    centroid_source: None,
                },
            )
        }
    };
    tree.save(&dir.join(TREE_FILE))?;
    tree.write_silhouette_csv(&dir.join(SILHOUETTE_FILE))?;
    write_json(&dir.join(DISCOVERY_INFO_FILE), &info)
}

fn debias_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let surrogate = Surrogate::new(config.generator.clone())?;
    let params = ProjectorParams::load(&dir.join(PROJECTOR_FILE))?;
    let tree = ClusterTree::load(&dir.join(TREE_FILE))?;
    let target = target_distribution(&tree, config.target.as_deref())?;
    let guide = GuidanceTarget::new(&tree, &target.probs)?;
    let (samples, trace) = guided_sampling(
        &surrogate,
        &config.guidance,
        &params,
        &guide,
        config.n_eval,
        config.sample_seed(),
    )?;
    write_samples(&dir.join(GUIDED_FILE), &samples, true, config.sample_seed())?;
    write_json(&dir.join(TRACE_FILE), &trace)
}

/// Ground-truth mode of each leaf: the mode embedding closest in cosine to the centroid.
pub fn leaf_modes(tree: &ClusterTree, surrogate: &Surrogate) -> Result<Vec<usize>> {
    tree.leaf_centroids()
        .iter()
        .map(|c| argmax_cosine(c, surrogate.mode_embeddings()))
        .collect()
}

/// Sums the leaf target over the leaves mapped to each mode.
pub fn mode_target(leaf_target: &ProbVector, leaf_modes: &[usize], num_modes: usize) -> Result<ProbVector> {
    let mut probs = vec![0.0; num_modes];
    for (&p, &m) in leaf_target.as_slice().iter().zip(leaf_modes) {
        probs[m] += p;
    }
    ProbVector::new(probs)
}

fn evaluate_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let surrogate = Surrogate::new(config.generator.clone())?;
    let tree = ClusterTree::load(&dir.join(TREE_FILE))?;
    let info: DiscoveryInfo = read_json(&dir.join(DISCOVERY_INFO_FILE))?;
    let log: TrainLog = read_json(&dir.join(TRAIN_LOG_FILE))?;
    let trace: DebiasRunTrace = read_json(&dir.join(TRACE_FILE))?;
    let reference = read_samples(&dir.join(REFERENCE_FILE))?;
    let guided = read_samples(&dir.join(GUIDED_FILE))?;

    let target = target_distribution(&tree, config.target.as_deref())?;
    let modes = leaf_modes(&tree, &surrogate)?;
    let k = surrogate.num_modes();
    let mode_target = mode_target(&target.probs, &modes, k)?;

    let z_ref = embeddings(&reference);
    let frechet_ref = FrechetReference::new(&z_ref)?;
    let pre = evaluate(&z_ref, &surrogate, &mode_target, Some(&frechet_ref))?;
    let post = evaluate(&embeddings(&guided), &surrogate, &mode_target, Some(&frechet_ref))?;

    let leaves = tree
        .leaf_nodes()
        .zip(&modes)
        .zip(target.probs.as_slice())
        .map(|((node, &mode), &p)| LeafSummary {
            node: node.id,
            depth: node.depth,
            size: node.members.len(),
            mode,
            target: p,
        })
        .collect();
    let kl_trace: Vec<KlRow> = trace
        .mean_kl_by_timestep()
        .into_iter()
        .map(|(t, kl_before, kl_after)| KlRow { t, kl_before, kl_after })
        .collect();
    let mut stage_hashes = BTreeMap::new();
    for stage in Stage::ALL {
        stage_hashes.insert(stage, config.stage_hash(stage)?);
    }
    let report = DebiasReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: ExperimentConfig {
            output_dir: PathBuf::new(),
            ..config.clone()
        },
        stage_hashes,
        projector_val_cosine: log.best_val_cosine,
        tree: TreeSummary {
            k_star: tree.k_star,
            num_leaves: tree.num_leaves(),
            max_depth: tree.max_depth(),
            n_points: tree.n_points,
            low_confidence: tree.low_confidence,
            leaves,
        },
        silhouette: tree.silhouette.clone(),
        target_kind: target.kind,
        mode_target: mode_target.into_vec(),
        fd_reduction: (pre.fd > 0.0).then(|| 1.0 - post.fd / pre.fd),
        kl_final: kl_trace.last().map(|r| r.kl_after),
        kl_trace,
        non_monotone_steps: trace.non_monotone_steps,
        foreign_centroids: info.foreign_centroids,
        pre,
        post,
        timings_file: TIMINGS_FILE.to_string(),
    };
    report.check_consistency()?;
    write_json(&dir.join(REPORT_FILE), &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    DMax,
    InnerSteps,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::DMax => "d_max",
            SweepParam::InnerSteps => "inner_steps",
            SweepParam::Gamma => "gamma",
        }
    }

    /// `config` with the parameter set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} takes positive integers, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::Alpha => {
                c.guidance.alpha = value;
                c.discovery.alpha = value;
            }
            SweepParam::DMax => c.discovery.d_max = as_count(value)?,
            SweepParam::InnerSteps => c.guidance.inner_steps = as_count(value)?,
            SweepParam::Gamma => c.guidance.gamma = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "d_max" => Ok(SweepParam::DMax),
            "inner_steps" => Ok(SweepParam::InnerSteps),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected alpha, d_max, inner_steps or gamma)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub fd: f64,
    pub frechet: f64,
    pub kl_final: Option<f64>,
    pub wall_clock: f64,
}

pub fn sweep_csv_path(config: &ExperimentConfig, param: SweepParam) -> PathBuf {
    config.output_dir.join(format!("sweep_{}.csv", param.name()))
}

/// Runs the pipeline once per value in `config.output_dir`, reusing every
/// stage the parameter does not affect. Each value's report is kept under
/// `sweep_<param>/`.
pub fn cmd_sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let keep = config.output_dir.join(format!("sweep_{}", param.name()));
    std::fs::create_dir_all(&keep).map_err(|e| Error::io(&keep, e))?;
    let mut rows = Vec::with_capacity(values.len());
    for (&value, c) in values.iter().zip(&configs) {
        let start = Instant::now();
        let report = cmd_pipeline(c, true)?;
        let wall_clock = start.elapsed().as_secs_f64();
        let dest = keep.join(format!("report_{value}.json"));
        std::fs::copy(c.output_dir.join(REPORT_FILE), &dest).map_err(|e| Error::io(&dest, e))?;
        rows.push(SweepRow {
            value,
            fd: report.post.fd,
            frechet: report.post.frechet,
            kl_final: report.kl_final,
            wall_clock,
        });
    }
    let path = sweep_csv_path(config, param);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// What `cmd_report` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub summary: String,
    pub written: Vec<PathBuf>,
    /// Sections that could not be produced, with the artifact each one needs.
    pub missing: Vec<String>,
}

const KNOWN_ARTIFACTS: [&str; 10] = [
    CORPUS_FILE,
    REFERENCE_FILE,
    PROJECTOR_FILE,
    TRAIN_LOG_FILE,
    TREE_FILE,
    DISCOVERY_INFO_FILE,
    GUIDED_FILE,
    TRACE_FILE,
    REPORT_FILE,
    TIMINGS_FILE,
];

/// Writes the summary and plot-ready CSVs for a run directory.
pub fn cmd_report(dir: &Path) -> Result<ReportOutcome> {
    let present: Vec<&str> = KNOWN_ARTIFACTS
        .iter()
        .copied()
        .filter(|f| dir.join(f).is_file())
        .collect();
    if present.is_empty() {
        return Err(Error::Dependency(format!(
            "{} holds 0 run artifacts (looked for {})",
            dir.display(),
            KNOWN_ARTIFACTS.join(", ")
        )));
    }
    let mut missing = Vec::new();
    let mut written = Vec::new();
    let mut summary = String::new();

    let report = if dir.join(REPORT_FILE).is_file() {
        Some(DebiasReport::load(&dir.join(REPORT_FILE))?)
    } else {
        missing.push(format!("metrics summary and mode histograms (needs {REPORT_FILE})"));
        None
    };
    if let Some(r) = &report {
        let path = dir.join(HISTOGRAM_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["mode", "target", "pre_count", "post_count", "pre_fraction", "post_fraction"])?;
        for m in 0..r.mode_target.len() {
            w.write_record([
                m.to_string(),
                r.mode_target[m].to_string(),
                r.pre.histogram[m].to_string(),
                r.post.histogram[m].to_string(),
                r.pre.frequencies[m].to_string(),
                r.post.frequencies[m].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let path = dir.join(METRICS_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["phase"];
        header.extend(EvalResult::csv_header());
        w.write_record(&header)?;
        for (phase, e) in [("pre", &r.pre), ("post", &r.post)] {
            let mut row = vec![phase.to_string()];
            row.extend(e.csv_row());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let _ = writeln!(summary, "FD before: {:.4}", r.pre.fd);
        let _ = writeln!(summary, "FD after: {:.4}", r.post.fd);
        match r.fd_reduction {
            Some(red) => {
                let _ = writeln!(summary, "FD reduction: {:.1}%", 100.0 * red);
            }
            None => {
                let _ = writeln!(summary, "FD reduction: n/a (unguided FD is 0)");
            }
        }
        let _ = writeln!(summary, "Frechet distance to unguided: {:.5}", r.post.frechet);
        let _ = writeln!(summary, "mode target: {:?}", r.mode_target);
        let _ = writeln!(summary, "mode histogram before: {:?}", r.pre.histogram);
        let _ = writeln!(summary, "mode histogram after: {:?}", r.post.histogram);
        let _ = writeln!(
            summary,
            "tree: k* = {}, {} leaves, max depth {}{}",
            r.tree.k_star,
            r.tree.num_leaves,
            r.tree.max_depth,
            if r.tree.low_confidence { " (low-confidence silhouette)" } else { "" }
        );
        if r.foreign_centroids {
            let _ = writeln!(summary, "centroids: foreign (reused from another generator configuration)");
        }
        let _ = writeln!(summary, "projector validation cosine: {:.4}", r.projector_val_cosine);
        if let Some(kl) = r.kl_final {
            let _ = writeln!(summary, "final batch KL: {kl:.3e}");
        }
        let _ = writeln!(summary, "non-monotone guidance steps: {}", r.non_monotone_steps);
    }

    let kl_rows: Option<Vec<KlRow>> = match &report {
        Some(r) => Some(r.kl_trace.clone()),
        None if dir.join(TRACE_FILE).is_file() => {
            let trace: DebiasRunTrace = read_json(&dir.join(TRACE_FILE))?;
            Some(
                trace
                    .mean_kl_by_timestep()
                    .into_iter()
                    .map(|(t, kl_before, kl_after)| KlRow { t, kl_before, kl_after })
                    .collect(),
            )
        }
        None => {
            missing.push(format!("KL trace (needs {TRACE_FILE})"));
            None
        }
    };
    if let Some(rows) = kl_rows {
        let path = dir.join(KL_TRACE_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    if report.is_none() && dir.join(TREE_FILE).is_file() {
        let tree = ClusterTree::load(&dir.join(TREE_FILE))?;
        let _ = writeln!(
            summary,
            "tree: k* = {}, {} leaves, max depth {}",
            tree.k_star,
            tree.num_leaves(),
            tree.max_depth()
        );
    }
    if !missing.is_empty() {
        let _ = writeln!(summary, "partial report; missing: {}", missing.join("; "));
    }
    let path = dir.join(SUMMARY_FILE);
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(ReportOutcome {
        summary,
        written,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A run small enough for unit tests: tiny corpus, short training, few samples.
    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            n_corpus: 120,
            n_eval: 40,
            output_dir: dir.to_path_buf(),
            seed: 5,
            capture_timesteps: vec![10, 20],
            ..ExperimentConfig::default()
        };
        c.generator.embed_dim = 24;
        c.projector.epochs = 3;
        c.projector.batch_size = 32;
        c.projector.hidden = 16;
        c.guidance.batch_size = 20;
        c.guidance.guided_timesteps = (10..=20).collect();
        c
    }

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = cmd_init(&path, dir.path()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.n_corpus, 2000);
        assert_eq!(ExperimentConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn partial_config_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 7, "n_eval": 10}"#).unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!((c.seed, c.n_eval, c.n_corpus), (7, 10, 2000));
    }

    #[test]
    fn malformed_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stage_seeds_follow_the_documented_derivation() {
        let c = ExperimentConfig {
            seed: 42,
            ..ExperimentConfig::default()
        };
        assert_eq!(c.corpus_seed(), 42 ^ crate::stable_hash("generate"));
        assert_eq!(c.train_config().seed, 42 ^ crate::stable_hash("train"));
        assert_eq!(c.discovery_config().seed, 42 ^ crate::stable_hash("discover"));
        assert_ne!(c.corpus_seed(), c.sample_seed());
    }

    #[test]
    fn stage_hashes_chain_downstream_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.guidance.inner_steps = 3;
        for stage in [Stage::Generate, Stage::Train, Stage::Discover] {
            assert_eq!(a.stage_hash(stage).unwrap(), b.stage_hash(stage).unwrap());
        }
        for stage in [Stage::Debias, Stage::Evaluate] {
            assert_ne!(a.stage_hash(stage).unwrap(), b.stage_hash(stage).unwrap());
        }
        let mut c = a.clone();
        c.n_corpus = 10;
        for stage in Stage::ALL {
            assert_ne!(a.stage_hash(stage).unwrap(), c.stage_hash(stage).unwrap());
        }
        let d = ExperimentConfig {
            output_dir: PathBuf::from("elsewhere"),
            ..a.clone()
        };
        assert_eq!(a.stage_hash(Stage::Evaluate).unwrap(), d.stage_hash(Stage::Evaluate).unwrap());
    }

    #[test]
    fn invalid_discovery_timestep_is_rejected() {
        let c = ExperimentConfig {
            discovery_timestep: 11,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_trajectory_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            n_corpus: 1,
            ..tiny(dir.path())
        };
        cmd_generate(&c).unwrap();
        let ds = Dataset::read_jsonl(&dir.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(ds.header.n_trajectories, 1);
        assert!(ds.records.iter().all(|r| r.trajectory_id == 0));
    }

    #[test]
    fn generate_is_byte_identical_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        cmd_generate(&c).unwrap();
        let first = std::fs::read(dir.path().join(CORPUS_FILE)).unwrap();
        let first_ref = std::fs::read(dir.path().join(REFERENCE_FILE)).unwrap();
        cmd_generate(&c).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(CORPUS_FILE)).unwrap());
        assert_eq!(first_ref, std::fs::read(dir.path().join(REFERENCE_FILE)).unwrap());
    }

    #[test]
    fn missing_upstream_is_a_dependency_error_naming_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let err = cmd_debias(&c).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("discover"), "{err}");
    }

    #[test]
    fn changed_upstream_config_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        cmd_generate(&c).unwrap();
        let mut changed = c.clone();
        changed.n_eval = 41;
        let err = cmd_train(&changed).unwrap_err();
        assert!(matches!(err, Error::Stale(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn tiny_pipeline_report_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let report = cmd_pipeline(&c, false).unwrap();
        report.check_consistency().unwrap();
        assert_eq!(report.pre.n, 40);
        assert_eq!(report.kl_trace.len(), 11);
        assert!(!report.foreign_centroids);
        for stage in Stage::ALL {
            assert!(is_fresh(&c, stage).unwrap());
        }
        let timings: serde_json::Value = read_json(&dir.path().join(TIMINGS_FILE)).unwrap();
        assert!(timings["stages"]["train"].is_number());

        let outcome = cmd_report(dir.path()).unwrap();
        assert!(outcome.missing.is_empty());
        assert!(outcome.summary.contains("FD before"));
        assert!(outcome.summary.contains("FD reduction") || outcome.summary.contains("n/a"));
        let files: Vec<Vec<u8>> = outcome.written.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let again = cmd_report(dir.path()).unwrap();
        let files2: Vec<Vec<u8>> = again.written.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(files, files2);

        // A guidance-only change reruns debias and evaluate and leaves the rest.
        let projector_before = std::fs::metadata(dir.path().join(PROJECTOR_FILE)).unwrap().modified().unwrap();
        let mut c2 = c.clone();
        c2.guidance.inner_steps = 2;
        assert!(is_fresh(&c2, Stage::Discover).unwrap());
        assert!(!is_fresh(&c2, Stage::Debias).unwrap());
        cmd_pipeline(&c2, true).unwrap();
        let projector_after = std::fs::metadata(dir.path().join(PROJECTOR_FILE)).unwrap().modified().unwrap();
        assert_eq!(projector_before, projector_after);
    }

    #[test]
    fn foreign_centroids_are_flagged() {
        let src = tempfile::tempdir().unwrap();
        let a = tiny(src.path());
        cmd_pipeline(&a, false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny(dir.path());
        b.generator.modes[0].weight = 0.5;
        b.generator.modes[1].weight = 0.5;
        b.centroid_source = Some(src.path().to_path_buf());
        let report = cmd_pipeline(&b, false).unwrap();
        assert!(report.foreign_centroids);
        assert!(cmd_report(dir.path()).unwrap().summary.contains("foreign"));

        // Same generator: the reused tree is not foreign.
        let same = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            output_dir: same.path().to_path_buf(),
            centroid_source: Some(src.path().to_path_buf()),
            ..a.clone()
        };
        assert!(!cmd_pipeline(&c, false).unwrap().foreign_centroids);
    }

    #[test]
    fn report_on_empty_dir_lists_zero_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_report(dir.path()).unwrap_err();
        assert!(err.to_string().contains("0 run artifacts"), "{err}");
    }

    #[test]
    fn report_on_partial_run_lists_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        cmd_generate(&c).unwrap();
        let outcome = cmd_report(dir.path()).unwrap();
        assert_eq!(outcome.missing.len(), 2);
        assert!(outcome.summary.contains("partial report"));
    }

    #[test]
    fn unknown_sweep_parameter_is_a_config_error() {
        let err = "temperature".parse::<SweepParam>().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(matches!(
            SweepParam::InnerSteps.apply(&ExperimentConfig::default(), 1.5),
            Err(Error::Config(_))
        ));
        let c = SweepParam::Alpha.apply(&ExperimentConfig::default(), 16.0).unwrap();
        assert_eq!((c.guidance.alpha, c.discovery.alpha), (16.0, 16.0));
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            cmd_sweep(&tiny(dir.path()), SweepParam::Gamma, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alpha_sweep_writes_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let rows = cmd_sweep(&c, SweepParam::Alpha, &[4.0, 8.0, 16.0]).unwrap();
        assert_eq!(rows.len(), 3);
        let mut r = csv::Reader::from_path(sweep_csv_path(&c, SweepParam::Alpha)).unwrap();
        assert_eq!(
            r.headers().unwrap().iter().collect::<Vec<_>>(),
            ["value", "fd", "frechet", "kl_final", "wall_clock"]
        );
        assert_eq!(r.records().count(), 3);
        assert!(dir.path().join("sweep_alpha/report_16.json").is_file());
    }
}
