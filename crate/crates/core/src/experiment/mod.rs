//! Config-driven training runs.
//!
//! A run trains one model with one optimizer under one sampling scheme and
//! records the full-training-set mean loss after every step. Everything
//! random in a run (initialization, minibatch draws, metric subsets) is
//! derived from `(seed, run_index)` alone, so repetitions can execute in any
//! order or in parallel and still produce identical records.

mod config;
mod report;

pub use config::{fig2_cells, parse_experiment, ExperimentFile};
pub use report::{
    run_cells, summarize_cell, timing_table, write_outputs, Bundle, CellResult, CellSummary, TimingRow, TimingTable,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{binary_subset, synthetic_blobs, Dataset, LabelledImages, DATA_DIR_ENV, TRAIN_IMAGES, TRAIN_LABELS};
use crate::error::{Error, Result};
use crate::metric::{evaluate_step, SchemeQualityRecord, DEFAULT_SUBSET};
use crate::model::{Architecture, Model};
use crate::optim::{estimate_from_batch, OptimizerConfig, Weighting};
use crate::prob::{convex_mix, gradient_norm_scheme, sample_indices, Scheme};

/// Where the MNIST IDX files are looked for when neither the config nor the
/// environment names a directory.
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

/// Sampling scheme refreshed before every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeKind {
    Uniform,
    GradNorm,
    /// `t * p_gn + (1 - t) * u`; `Mix(0.5)` is the midpoint scheme.
    Mix(f64),
}

impl SchemeKind {
    pub fn needs_norms(self) -> bool {
        !matches!(self, SchemeKind::Uniform)
    }

    /// Builds the scheme; `norms` must be present unless the kind is uniform.
    pub fn build(self, n: usize, norms: Option<&[f64]>) -> Result<Scheme> {
        let norms = || norms.ok_or_else(|| Error::InvalidArgument(format!("{self} needs gradient norms")));
        match self {
            SchemeKind::Uniform => Scheme::uniform(n),
            SchemeKind::GradNorm => gradient_norm_scheme(norms()?),
            SchemeKind::Mix(t) => convex_mix(&gradient_norm_scheme(norms()?)?, &Scheme::uniform(n)?, t),
        }
    }

    /// Filesystem-friendly tag (`mix0.5` rather than `mix:0.5`).
    pub fn slug(self) -> String {
        self.to_string().replace(':', "")
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKind::Uniform => f.write_str("uniform"),
            SchemeKind::GradNorm => f.write_str("gradnorm"),
            SchemeKind::Mix(t) => write!(f, "mix:{t}"),
        }
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "u" => Ok(SchemeKind::Uniform),
            "gradnorm" | "pgn" => Ok(SchemeKind::GradNorm),
            other => {
                let t = other
                    .strip_prefix("mix:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme `{s}`")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::InvalidArgument(format!("mix weight {t} outside [0, 1]")));
                }
                Ok(SchemeKind::Mix(t))
            }
        }
    }
}

impl TryFrom<String> for SchemeKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchemeKind> for String {
    fn from(k: SchemeKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Balanced zeros-vs-ones subset of the MNIST training split.
    Mnist01 { n_train: usize },
    Blobs { n: usize, dim: usize, separation: f64 },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mnist01 { n_train: 100 }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist01 { n_train } => write!(f, "mnist01-{n_train}"),
            DatasetSpec::Blobs { n, dim, separation } => write!(f, "blobs-{n}x{dim}-sep{separation}"),
        }
    }
}

/// Scheme-quality evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub enabled: bool,
    pub m: usize,
    /// Evaluate before every `cadence`-th step.
    pub cadence: usize,
    /// Scheme to assess; defaults to the training scheme.
    pub candidate: Option<SchemeKind>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            enabled: false,
            m: DEFAULT_SUBSET,
            cadence: 1,
            candidate: None,
        }
    }
}

/// How minibatch indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// i.i.d. draws from the scheme.
    #[default]
    WithReplacement,
    /// Distinct indices, uniform scheme only. With `batch = N` a step is a
    /// full-batch gradient step.
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Architecture,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub scheme: SchemeKind,
    pub steps: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub metric: MetricSettings,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    /// `unweighted` drops the `1/(N p_i)` factors; only useful to show
    /// what goes wrong without them.
    pub weighting: Weighting,
    pub sampling: SamplingMode,
}

impl Default for RunConfig {
    /// The reduced protocol: 5 runs of 100 steps, batch 5, CNN on 100
    /// binary MNIST items.
    fn default() -> Self {
        RunConfig {
            model: Architecture::Cnn,
            dataset: DatasetSpec::default(),
            optimizer: OptimizerConfig::default(),
            scheme: SchemeKind::Uniform,
            steps: 100,
            batch: 5,
            repetitions: 5,
            seed: 1,
            metric: MetricSettings::default(),
            out: None,
            data_dir: None,
            weighting: Weighting::Importance,
            sampling: SamplingMode::WithReplacement,
        }
    }
}

impl RunConfig {
    /// Long mode: 45 runs of 300 steps.
    pub fn full_protocol(mut self) -> Self {
        self.steps = 300;
        self.repetitions = 45;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if let SchemeKind::Mix(t) = self.scheme {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("mix weight {t} outside [0, 1]"));
            }
        }
        if self.metric.enabled && (self.metric.m < 2 || self.metric.cadence == 0) {
            return bad(format!(
                "metric needs m >= 2 and cadence >= 1, got m={} cadence={}",
                self.metric.m, self.metric.cadence
            ));
        }
        if self.sampling == SamplingMode::Permutation && self.scheme != SchemeKind::Uniform {
            return bad("permutation sampling requires the uniform scheme".into());
        }
        self.optimizer.validate()
    }

    /// Config value, then the environment variable, then [`DEFAULT_DATA_DIR`].
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }
}

const SEED_DATA: u64 = 0x6461_7461;
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_METRIC: u64 = 2;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run_index`: `mix64(mix64(seed) ^ run_index)`.
pub fn run_seed(seed: u64, run_index: usize) -> u64 {
    mix64(mix64(seed) ^ run_index as u64)
}

/// Seed of the training-set selection, shared by all runs of an experiment.
pub fn data_seed(seed: u64) -> u64 {
    mix64(mix64(seed) ^ SEED_DATA)
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the training set named by `config`. MNIST is read from
/// [`RunConfig::resolved_data_dir`].
pub fn prepare_dataset(config: &RunConfig) -> Result<Dataset> {
    match config.dataset {
        DatasetSpec::Mnist01 { n_train } => {
            let dir = config.resolved_data_dir();
            let train = LabelledImages::load(&dir, TRAIN_IMAGES, TRAIN_LABELS).map_err(|e| {
                Error::Dataset(format!(
                    "cannot load MNIST from {} ({e}); run `impsamp fetch-data` or set {DATA_DIR_ENV}",
                    dir.display()
                ))
            })?;
            binary_subset(&train, (0, 1), n_train, data_seed(config.seed))
        }
        DatasetSpec::Blobs { n, dim, separation } => synthetic_blobs(n, dim, separation, data_seed(config.seed)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    /// Derived per-run seed.
    pub seed: u64,
    pub config: RunConfig,
    /// Full-training-set mean loss before the first step and after each
    /// step; shorter than `steps + 1` only if the run aborted.
    pub losses: Vec<f64>,
    pub wall_clock_secs: f64,
    /// Full per-item gradient-norm passes spent refreshing the scheme.
    pub norm_passes: usize,
    pub quality: Vec<SchemeQualityRecord>,
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }
}

/// Loads the dataset and trains run `run_index`.
pub fn run_training(config: &RunConfig, run_index: usize) -> Result<RunRecord> {
    let data = prepare_dataset(config)?;
    run_training_on(config, &data, run_index)
}

/// Trains run `run_index` on an already prepared dataset.
///
/// Divergence (a non-finite loss or update) ends the run early; the record
/// keeps the losses so far and the reason. Configuration and shape problems
/// are returned as errors instead.
pub fn run_training_on(config: &RunConfig, data: &Dataset, run_index: usize) -> Result<RunRecord> {
    config.validate()?;
    let n = data.len();
    if config.sampling == SamplingMode::Permutation && config.batch > n {
        return Err(Error::Config(format!("permutation batch {} exceeds {n} items", config.batch)));
    }
    if config.metric.enabled && config.metric.m > n {
        return Err(Error::Config(format!("metric subset {} exceeds {n} items", config.metric.m)));
    }
    let seed = run_seed(config.seed, run_index);
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut draw_rng = stream(seed, STREAM_SAMPLING);
    let mut metric_rng = stream(seed, STREAM_METRIC);

    let start = Instant::now();
    let mut model = Model::init(config.model.clone(), &mut init_rng)?;
    let mut opt = config.optimizer.build(model.param_count())?;
    let uniform = Scheme::uniform(n)?;
    let candidate_kind = config.metric.candidate.unwrap_or(config.scheme);

    let mut record = RunRecord {
        run_index,
        seed,
        config: config.clone(),
        losses: Vec::with_capacity(config.steps + 1),
        wall_clock_secs: 0.0,
        norm_passes: 0,
        quality: Vec::new(),
        aborted: None,
    };
    record.losses.push(model.mean_loss(data)?);

    for step in 0..config.steps {
        let norms = if config.scheme.needs_norms() {
            record.norm_passes += 1;
            Some(model.loss_and_norms(data)?.1)
        } else {
            None
        };
        let scheme = match norms.as_deref() {
            Some(g) => config.scheme.build(n, Some(g))?,
            None => uniform.clone(),
        };

        if config.metric.enabled && step % config.metric.cadence == 0 {
            let candidate = if candidate_kind == config.scheme {
                scheme.clone()
            } else if candidate_kind.needs_norms() && norms.is_none() {
                candidate_kind.build(n, Some(&model.loss_and_norms(data)?.1))?
            } else {
                candidate_kind.build(n, norms.as_deref())?
            };
            let recs = evaluate_step(&model, data, &candidate, config.metric.m, step as u64, &mut metric_rng)?;
            record.quality.extend(recs);
        }

        let indices = match config.sampling {
            SamplingMode::WithReplacement => sample_indices(&scheme, config.batch, &mut draw_rng),
            SamplingMode::Permutation => index::sample(&mut draw_rng, n, config.batch).into_vec(),
        };
        let batch = indices
            .iter()
            .map(|&i| model.per_sample_gradient(data.input(i), data.label(i)))
            .collect::<Result<Vec<_>>>()?;
        let estimate = match estimate_from_batch(&batch, &scheme, &indices, config.weighting) {
            Ok(e) => e,
            Err(Error::NonFinite(msg)) => {
                record.aborted = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let mut theta = model.params().to_vec();
        let updated = opt.step(&mut theta, &estimate.g).and_then(|()| model.set_params(theta));
        if let Err(Error::NonFinite(msg)) = &updated {
            record.aborted = Some(format!("step {step}: {msg}"));
            break;
        }
        updated?;

        let loss = model.mean_loss(data)?;
        record.losses.push(loss);
        if !loss.is_finite() {
            record.aborted = Some(format!("step {step}: loss is {loss}"));
            break;
        }
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Writes `record` as pretty JSON to `path`, creating parent directories.
pub fn write_record(record: &RunRecord, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(record)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
