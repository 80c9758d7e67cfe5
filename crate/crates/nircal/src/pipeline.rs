//! Configuration-driven orchestration of the full calibration workflow.
//!
//! A single JSON [`PipelineConfig`] describes dataset, split, preprocessing,
//! model, and tuning budget. Each stage (`prepare`, `tune`, `train`,
//! `evaluate`, `activations`) reads that config, works out of the artifact
//! directory it names, and leaves files the next stage picks up. Stages
//! after `prepare` verify a content hash stored alongside the artifacts, so
//! outputs produced under one config are never silently reused by another.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    extrapolation_split, load_csv, save_csv, standard_split, synthesize, Instrument, SpectraSet,
    SplitProvenance, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::hyperopt::{optimize, BoConfig, BoRun, SearchSpace, Trial};
use crate::nn::{load_model, save_model, train as fit_network, CnnModel, CnnSpec, TrainConfig};
use crate::pls::{self, PlsModel, SelectionStrategy, SELECTION_HUBER_DELTA};
use crate::preprocess::{
    augment, emsc_apply, emsc_fit, global_std, scaler_apply, scaler_fit, AugmentConfig,
    FittedChain, FittedStep,
};
use crate::report::{
    activation_traces, evaluate as score, rank_kernels, write_activation_csv,
    write_convergence_csv, write_cv_curve_csv, write_history_csv, write_metrics_csv,
    write_ranking_csv, write_scatter_csv, ConvLayer, Metrics,
};

// ---------------------------------------------------------------------------
// Configuration

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Load a measured table from disk.
    Csv { path: String },
    /// Generate samples from the synthetic model.
    Synthetic(SyntheticConfig),
}

/// How samples are divided into train / validation / test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitConfig {
    /// Random split: test drawn from the second instrument, validation from
    /// the first.
    Standard {
        test_fraction: f64,
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Concentration-banded split for extrapolation studies.
    Extrapolation {
        train_below_mg: f64,
        val_upper_mg: f64,
    },
}

/// Whether the residual screen runs on the pooled data or on each
/// instrument's samples separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierScope {
    #[default]
    Global,
    PerInstrument,
}

/// Residual-based sample screen applied before splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_outlier_folds")]
    pub folds: usize,
    #[serde(default = "default_outlier_components")]
    pub max_components: usize,
    #[serde(default = "default_sigma_mult")]
    pub sigma_mult: f64,
    #[serde(default)]
    pub scope: OutlierScope,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_outlier_folds() -> usize {
    10
}
fn default_outlier_components() -> usize {
    30
}
fn default_sigma_mult() -> f64 {
    2.5
}

/// One preprocessing step, applied in the listed order during `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PreprocessStep {
    /// Spectral augmentation of the training and validation subsets.
    Augment {
        #[serde(default)]
        config: AugmentConfig,
    },
    /// Scatter correction fit on the training subset.
    ScatterCorrection {
        #[serde(default = "default_emsc_order")]
        order: usize,
    },
    /// Global standardization fit on the training subset.
    Standardize,
}

fn default_emsc_order() -> usize {
    1
}

impl PreprocessStep {
    /// Position in the only accepted ordering.
    fn rank(&self) -> u8 {
        match self {
            PreprocessStep::Augment { .. } => 0,
            PreprocessStep::ScatterCorrection { .. } => 1,
            PreprocessStep::Standardize => 2,
        }
    }
}

/// Network shape without the data-dependent input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnShape {
    pub kernels1: usize,
    pub filter_len1: usize,
    pub kernels2: usize,
    pub filter_len2: usize,
    pub dropout_rate: f64,
    pub dense_units: usize,
}

impl CnnShape {
    pub fn to_spec(&self, input_len: usize, noise_std: f64) -> CnnSpec {
        CnnSpec {
            input_len,
            kernels1: self.kernels1,
            filter_len1: self.filter_len1,
            kernels2: self.kernels2,
            filter_len2: self.filter_len2,
            dropout_rate: self.dropout_rate,
            dense_units: self.dense_units,
            noise_std,
        }
    }
}

/// Which regressor the `train` and `evaluate` stages work with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Pls {
        strategy: SelectionStrategy,
        #[serde(default = "default_outlier_folds")]
        folds: usize,
        max_components: usize,
        #[serde(default)]
        seed: u64,
    },
    Cnn {
        /// Fixed shape; when absent the tuned shape from `tune` is used.
        #[serde(default)]
        shape: Option<CnnShape>,
        #[serde(default)]
        noise_std: f64,
        /// Full training override; when absent a budget is derived from
        /// whether the preprocessing chain augments.
        #[serde(default)]
        train: Option<TrainConfig>,
        #[serde(default)]
        seed: u64,
    },
}

/// Budget for the `tune` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs per tuning trial; the default depends on augmentation.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Learning rate per tuning trial; the default depends on augmentation.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

fn default_n_init() -> usize {
    20
}
fn default_n_iter() -> usize {
    40
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            n_init: 20,
            n_iter: 40,
            seed: 0,
            epochs: None,
            learning_rate: None,
        }
    }
}

/// Complete description of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    /// Optional wavelength window (nm) applied right after loading.
    #[serde(default)]
    pub region_nm: Option<(f64, f64)>,
    pub split: SplitConfig,
    #[serde(default)]
    pub outliers: Option<OutlierConfig>,
    #[serde(default)]
    pub preprocess: Vec<PreprocessStep>,
    pub model: ModelConfig,
    #[serde(default)]
    pub tuning: TuningConfig,
    /// Directory all artifacts are written to and read from.
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let config: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::json("pipeline configuration", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Error::InvalidConfig { msg };
        let mut last_rank: Option<u8> = None;
        for step in &self.preprocess {
            let rank = step.rank();
            if last_rank.is_some_and(|r| r >= rank) {
                return Err(invalid(
                    "preprocessing steps must appear at most once each, in the order \
                     augment, scatter_correction, standardize"
                        .into(),
                ));
            }
            last_rank = Some(rank);
        }
        if let Some((low, high)) = self.region_nm {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(invalid(format!("bad wavelength region [{low}, {high}]")));
            }
        }
        if self.tuning.epochs == Some(0) {
            return Err(invalid("tuning epochs must be positive".into()));
        }
        if let Some(lr) = self.tuning.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid(format!(
                    "tuning learning rate must be positive, got {lr}"
                )));
            }
        }
        Ok(())
    }

    /// Hash of the scientific content: the configuration with the output
    /// location blanked, so moving an experiment does not invalidate it.
    pub fn content_hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.output_dir = PathBuf::new();
        let text = serde_json::to_string(&stripped).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    /// Redirect every stochastic component to one seed. Used by the CLI's
    /// seed override.
    pub fn override_seeds(&mut self, seed: u64) {
        if let DatasetConfig::Synthetic(sc) = &mut self.dataset {
            sc.seed = seed;
        }
        if let SplitConfig::Standard { seed: s, .. } = &mut self.split {
            *s = seed;
        }
        if let Some(oc) = &mut self.outliers {
            oc.seed = seed;
        }
        for step in &mut self.preprocess {
            if let PreprocessStep::Augment { config } = step {
                config.seed = seed;
            }
        }
        match &mut self.model {
            ModelConfig::Pls { seed: s, .. } => *s = seed,
            ModelConfig::Cnn { seed: s, train, .. } => {
                *s = seed;
                if let Some(t) = train {
                    t.shuffle_seed = seed;
                }
            }
        }
        self.tuning.seed = seed;
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Artifacts

/// File layout inside the output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    pub chain: PathBuf,
    pub provenance: PathBuf,
    pub metadata: PathBuf,
    pub trials: PathBuf,
    pub best_spec: PathBuf,
    pub convergence: PathBuf,
    pub model_bin: PathBuf,
    pub history: PathBuf,
    pub pls_model: PathBuf,
    pub cv_curve: PathBuf,
    pub metrics: PathBuf,
    pub scatter: PathBuf,
    pub activations: PathBuf,
    pub ranking: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> ArtifactPaths {
        let dir = dir.into();
        let f = |name: &str| dir.join(name);
        ArtifactPaths {
            train: f("train.csv"),
            validation: f("validation.csv"),
            test: f("test.csv"),
            chain: f("chain.json"),
            provenance: f("provenance.json"),
            metadata: f("metadata.json"),
            trials: f("trials.jsonl"),
            best_spec: f("best_spec.json"),
            convergence: f("convergence.csv"),
            model_bin: f("model.bin"),
            history: f("history.csv"),
            pls_model: f("pls_model.json"),
            cv_curve: f("cv_curve.csv"),
            metrics: f("metrics.csv"),
            scatter: f("scatter.csv"),
            activations: f("activations.csv"),
            ranking: f("kernel_ranking.csv"),
            dir,
        }
    }
}

/// Outcome of the screen recorded for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRecord {
    pub scope: OutlierScope,
    /// Sample ids removed, in ascending position order.
    pub flagged_ids: Vec<String>,
    /// Component count each screen fit used (one entry per screened group).
    pub components_used: Vec<usize>,
}

/// What `prepare` produced, written next to the data tables. Later stages
/// refuse to run when `config_hash` no longer matches their configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub grid_start_nm: f64,
    pub grid_step_nm: f64,
    pub grid_count: usize,
    /// Stored row counts, after any augmentation.
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub split: SplitProvenance,
    pub outliers: Option<OutlierRecord>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a file an earlier stage should have produced; a missing file names
/// that stage instead of surfacing a bare I/O error.
fn read_artifact(path: &Path, produced_by: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            produced_by: produced_by.into(),
        });
    }
    read_text(path)
}

/// Load the provenance record and insist it was produced by this exact
/// configuration content.
fn check_provenance(paths: &ArtifactPaths, config: &PipelineConfig) -> Result<Provenance> {
    let text = read_artifact(&paths.provenance, "prepare")?;
    let provenance: Provenance =
        serde_json::from_str(&text).map_err(|e| Error::json("provenance record", e))?;
    let expected = config.content_hash();
    if provenance.config_hash != expected {
        return Err(Error::StaleArtifacts {
            dir: paths.dir.display().to_string(),
            found: provenance.config_hash,
            expected,
        });
    }
    Ok(provenance)
}

/// Record when a stage last ran. Purely informational; nothing downstream
/// depends on it, so unreadable contents are replaced rather than fatal.
fn stamp_metadata(paths: &ArtifactPaths, stage: &str) -> Result<()> {
    let mut root: serde_json::Map<String, serde_json::Value> = if paths.metadata.exists() {
        read_text(&paths.metadata)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    } else {
        serde_json::Map::new()
    };
    let seconds = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    root.insert(
        stage.to_string(),
        serde_json::json!({
            "unix_seconds": seconds,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    );
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(root))
        .map_err(|e| Error::json("stage metadata", e))?;
    write_text(&paths.metadata, &text)
}

// ---------------------------------------------------------------------------
// Stage: prepare

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    /// Stored row counts, after any augmentation.
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_flagged: usize,
    pub grid_count: usize,
}

fn load_source(config: &PipelineConfig) -> Result<SpectraSet> {
    match &config.dataset {
        DatasetConfig::Csv { path } => load_csv(path),
        DatasetConfig::Synthetic(sc) => synthesize(sc),
    }
}

/// Run the screen and drop flagged samples, recording who was removed.
fn screen_outliers(
    set: SpectraSet,
    oc: &OutlierConfig,
) -> Result<(SpectraSet, Option<OutlierRecord>)> {
    if !oc.enabled {
        return Ok((set, None));
    }
    let (kept, flagged, components_used) = match oc.scope {
        OutlierScope::Global => {
            let screen =
                pls::remove_outliers(&set, oc.folds, oc.max_components, oc.sigma_mult, oc.seed)?;
            (screen.kept, screen.flagged, vec![screen.n_components])
        }
        OutlierScope::PerInstrument => {
            let mut kept = Vec::new();
            let mut flagged = Vec::new();
            let mut components = Vec::new();
            for instrument in [Instrument::One, Instrument::Two] {
                let members = set.indices_of(instrument);
                if members.is_empty() {
                    continue;
                }
                let subset = set.select(&members)?;
                let screen = pls::remove_outliers(
                    &subset,
                    oc.folds,
                    oc.max_components,
                    oc.sigma_mult,
                    oc.seed,
                )?;
                // Screen indices are subset-local; map back to parent rows.
                kept.extend(screen.kept.iter().map(|&i| members[i]));
                flagged.extend(screen.flagged.iter().map(|&i| members[i]));
                components.push(screen.n_components);
            }
            kept.sort_unstable();
            flagged.sort_unstable();
            (kept, flagged, components)
        }
    };
    let flagged_ids = flagged
        .iter()
        .map(|&i| set.sample_ids()[i].clone())
        .collect();
    let screened = set.select(&kept)?;
    let record = OutlierRecord {
        scope: oc.scope,
        flagged_ids,
        components_used,
    };
    Ok((screened, Some(record)))
}

/// Load, screen, split, fit-and-apply the preprocessing chain, and store
/// the three data tables plus chain and provenance records.
pub fn prepare(config: &PipelineConfig) -> Result<PrepareSummary> {
    config.validate()?;
    let paths = ArtifactPaths::new(&config.output_dir);
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(paths.dir.display().to_string(), e))?;

    let mut source = load_source(config)?;
    if let Some((low, high)) = config.region_nm {
        source = source.restrict_region(low, high)?;
    }
    let (source, outlier_record) = match &config.outliers {
        Some(oc) => screen_outliers(source, oc)?,
        None => (source, None),
    };

    let splits = match &config.split {
        SplitConfig::Standard {
            test_fraction,
            val_fraction,
            seed,
        } => standard_split(&source, *test_fraction, *val_fraction, *seed)?,
        SplitConfig::Extrapolation {
            train_below_mg,
            val_upper_mg,
        } => extrapolation_split(&source, *train_below_mg, *val_upper_mg)?,
    };
    let mut train_set = splits.train;
    let mut val_set = splits.validation;
    let mut test_set = splits.test;

    let mut steps = Vec::with_capacity(config.preprocess.len());
    for step in &config.preprocess {
        match step {
            PreprocessStep::Augment { config: ac } => {
                // The scale reference comes from the unaugmented training
                // pool; validation gets the same treatment so that early
                // stopping sees the distribution the network trains on.
                let train_std = global_std(&train_set);
                train_set = augment(&train_set, ac, train_std)?;
                val_set = augment(&val_set, ac, train_std)?;
                steps.push(FittedStep::Augment {
                    config: ac.clone(),
                    train_std,
                });
            }
            PreprocessStep::ScatterCorrection { order } => {
                let model = emsc_fit(&train_set, *order)?;
                train_set = emsc_apply(&model, &train_set)?;
                val_set = emsc_apply(&model, &val_set)?;
                test_set = emsc_apply(&model, &test_set)?;
                steps.push(FittedStep::ScatterCorrection { model });
            }
            PreprocessStep::Standardize => {
                let scaler = scaler_fit(&train_set)?;
                train_set = scaler_apply(&scaler, &train_set)?;
                val_set = scaler_apply(&scaler, &val_set)?;
                test_set = scaler_apply(&scaler, &test_set)?;
                steps.push(FittedStep::Standardize { scaler });
            }
        }
    }
    let chain = FittedChain { steps };

    save_csv(&train_set, &paths.train)?;
    save_csv(&val_set, &paths.validation)?;
    save_csv(&test_set, &paths.test)?;
    write_text(&paths.chain, &chain.to_json()?)?;

    let grid = train_set.grid();
    let provenance = Provenance {
        config_hash: config.content_hash(),
        grid_start_nm: grid.start_nm(),
        grid_step_nm: grid.step_nm(),
        grid_count: grid.count(),
        n_train: train_set.n_samples(),
        n_validation: val_set.n_samples(),
        n_test: test_set.n_samples(),
        split: splits.provenance,
        outliers: outlier_record,
    };
    let text = serde_json::to_string_pretty(&provenance)
        .map_err(|e| Error::json("provenance record", e))?;
    write_text(&paths.provenance, &text)?;
    stamp_metadata(&paths, "prepare")?;

    Ok(PrepareSummary {
        n_train: provenance.n_train,
        n_validation: provenance.n_validation,
        n_test: provenance.n_test,
        n_flagged: provenance
            .outliers
            .as_ref()
            .map_or(0, |r| r.flagged_ids.len()),
        grid_count: provenance.grid_count,
    })
}

// ---------------------------------------------------------------------------
// Training budgets

/// Full training budget derived from whether the chain augments: augmented
/// runs see each sample many times per epoch, so they get fewer epochs, a
/// shorter plateau patience, and a slightly lower initial rate.
pub fn default_train_config(has_augment: bool) -> TrainConfig {
    let mut config = TrainConfig::default();
    if has_augment {
        config.epochs = 100;
        config.plateau_patience = 10;
        config.learning_rate = 0.084;
    }
    config
}

/// Per-trial budget for tuning: much shorter than a full fit, long enough
/// for the validation loss to order candidates.
fn tuning_train_config(tuning: &TuningConfig, has_augment: bool) -> TrainConfig {
    let mut config = default_train_config(has_augment);
    config.epochs = tuning.epochs.unwrap_or(if has_augment { 40 } else { 200 });
    if let Some(lr) = tuning.learning_rate {
        config.learning_rate = lr;
    }
    config
}

/// Epochs whose validation losses are averaged into the tuning objective.
const OBJECTIVE_TAIL: usize = 10;

// ---------------------------------------------------------------------------
// Stage: tune

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSummary {
    pub n_trials: usize,
    /// Trials evaluated by this invocation (zero when resuming a finished
    /// record).
    pub n_new: usize,
    pub n_failed: usize,
    pub best_value: f64,
    pub best_spec: CnnSpec,
}

/// Search-space point to shape, in the dimension order of
/// [`SearchSpace::cnn_search_space`].
fn shape_from_point(point: &[f64]) -> CnnShape {
    CnnShape {
        kernels1: point[0].round() as usize,
        filter_len1: point[1].round() as usize,
        kernels2: point[2].round() as usize,
        filter_len2: point[3].round() as usize,
        dropout_rate: point[4],
        dense_units: point[5].round() as usize,
    }
}

fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_text(path)?;
    let mut trials = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        trials.push(serde_json::from_str(line).map_err(|e| Error::json("trial record", e))?);
    }
    Ok(trials)
}

/// Search network shapes by expected improvement, logging every trial as a
/// JSON line so an interrupted search resumes where it stopped.
pub fn tune(config: &PipelineConfig) -> Result<TuneSummary> {
    config.validate()?;
    let paths = ArtifactPaths::new(&config.output_dir);
    check_provenance(&paths, config)?;
    let ModelConfig::Cnn {
        noise_std, seed, ..
    } = &config.model
    else {
        return Err(Error::InvalidConfig {
            msg: "tuning applies only to the network model family".into(),
        });
    };

    let train_set = load_csv(&paths.train)?;
    let val_set = load_csv(&paths.validation)?;
    let chain = FittedChain::from_json(&read_artifact(&paths.chain, "prepare")?)?;
    let trial_budget = tuning_train_config(&config.tuning, chain.has_augment());

    let space = SearchSpace::cnn_search_space();
    let input_len = train_set.grid().count();
    let initial = read_trials(&paths.trials)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.trials)
        .map_err(|e| Error::io(paths.trials.display().to_string(), e))?;

    let bo = BoConfig {
        n_init: config.tuning.n_init,
        n_iter: config.tuning.n_iter,
        seed: config.tuning.seed,
    };
    let model_seed = *seed;
    let noise = *noise_std;
    let mut n_new = 0usize;
    let run: BoRun = optimize(
        &space,
        &bo,
        &initial,
        |point| {
            let spec = shape_from_point(point).to_spec(input_len, noise);
            spec.validate()?;
            let mut model = CnnModel::new(spec, model_seed)?;
            let history = fit_network(&mut model, &train_set, &val_set, &trial_budget)?;
            history
                .mean_val_loss_last(OBJECTIVE_TAIL)
                .ok_or(Error::InvalidConfig {
                    msg: "trial training produced no epochs".into(),
                })
        },
        |trial| {
            let line =
                serde_json::to_string(trial).map_err(|e| Error::json("trial record", e))?;
            writeln!(log, "{line}")
                .and_then(|()| log.flush())
                .map_err(|e| Error::io(paths.trials.display().to_string(), e))?;
            n_new += 1;
            Ok(())
        },
    )?;

    let best_spec = shape_from_point(&run.best_point).to_spec(input_len, noise);
    let text =
        serde_json::to_string_pretty(&best_spec).map_err(|e| Error::json("network shape", e))?;
    write_text(&paths.best_spec, &text)?;
    write_convergence_csv(&paths.convergence, &run)?;
    stamp_metadata(&paths, "tune")?;

    Ok(TuneSummary {
        n_trials: run.trials.len(),
        n_new,
        n_failed: run.trials.iter().filter(|t| t.failed).count(),
        best_value: run.best_value,
        best_spec,
    })
}

// ---------------------------------------------------------------------------
// Stage: train

#[derive(Debug, Clone, PartialEq)]
pub enum TrainSummary {
    Pls {
        n_components: usize,
        /// Cross-validated loss at the chosen count.
        cv_loss: f64,
    },
    Cnn {
        epochs_run: usize,
        final_val_loss: f64,
    },
}

/// Resolve the network shape: an explicit one from the configuration wins,
/// otherwise the tuned shape stored by `tune` is loaded and checked against
/// the current grid.
fn resolve_spec(
    paths: &ArtifactPaths,
    shape: &Option<CnnShape>,
    input_len: usize,
    noise_std: f64,
) -> Result<CnnSpec> {
    if let Some(shape) = shape {
        return Ok(shape.to_spec(input_len, noise_std));
    }
    let text = read_artifact(&paths.best_spec, "tune")?;
    let spec: CnnSpec =
        serde_json::from_str(&text).map_err(|e| Error::json("network shape", e))?;
    if spec.input_len != input_len {
        return Err(Error::StaleArtifacts {
            dir: paths.dir.display().to_string(),
            found: format!("tuned shape for {} input points", spec.input_len),
            expected: format!("{input_len} input points"),
        });
    }
    Ok(spec)
}

/// Fit the configured model on the stored training data (pooled with
/// validation for the factor model, which does its own cross-validation).
pub fn train(config: &PipelineConfig) -> Result<TrainSummary> {
    config.validate()?;
    let paths = ArtifactPaths::new(&config.output_dir);
    check_provenance(&paths, config)?;
    let train_set = load_csv(&paths.train)?;
    let val_set = load_csv(&paths.validation)?;

    match &config.model {
        ModelConfig::Pls {
            strategy,
            folds,
            max_components,
            seed,
        } => {
            let pooled = train_set.concat(&val_set)?;
            let x = pooled.absorbance().view();
            let y = pooled.reference_mg().view();
            let mut curve = pls::cross_validate(x, y, *max_components, *folds, *seed)?;
            if *strategy == SelectionStrategy::HoldoutOptimal {
                let test_set = load_csv(&paths.test)?;
                curve = curve.with_holdout(
                    x,
                    y,
                    test_set.absorbance().view(),
                    test_set.reference_mg().view(),
                )?;
            }
            let n_components = curve.select(*strategy)?;
            let model = pls::fit(x, y, n_components)?;
            write_text(&paths.pls_model, &model.to_json()?)?;
            write_cv_curve_csv(&paths.cv_curve, &curve)?;
            stamp_metadata(&paths, "train")?;
            let at = curve
                .components
                .iter()
                .position(|&c| c == n_components)
                .expect("selected count comes from the curve");
            Ok(TrainSummary::Pls {
                n_components,
                cv_loss: curve.cv_loss[at],
            })
        }
        ModelConfig::Cnn {
            shape,
            noise_std,
            train: train_override,
            seed,
        } => {
            let chain = FittedChain::from_json(&read_artifact(&paths.chain, "prepare")?)?;
            let spec = resolve_spec(&paths, shape, train_set.grid().count(), *noise_std)?;
            let budget = train_override
                .clone()
                .unwrap_or_else(|| default_train_config(chain.has_augment()));
            let mut model = CnnModel::new(spec, *seed)?;
            let history = fit_network(&mut model, &train_set, &val_set, &budget)?;
            save_model(&model, &paths.model_bin)?;
            write_history_csv(&paths.history, &history)?;
            stamp_metadata(&paths, "train")?;
            Ok(TrainSummary::Cnn {
                epochs_run: history.epochs.len(),
                final_val_loss: history.final_val_loss().unwrap_or(f64::NAN),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Stage: evaluate

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluateSummary {
    /// Metrics over the pooled stored train and validation rows.
    pub train: Metrics,
    pub test: Metrics,
}

/// Score the trained model on the stored tables and write the metric and
/// scatter reports.
pub fn evaluate(config: &PipelineConfig) -> Result<EvaluateSummary> {
    config.validate()?;
    let paths = ArtifactPaths::new(&config.output_dir);
    check_provenance(&paths, config)?;
    let train_set = load_csv(&paths.train)?;
    let val_set = load_csv(&paths.validation)?;
    let test_set = load_csv(&paths.test)?;

    let (preds_train, preds_val, preds_test) = match &config.model {
        ModelConfig::Pls { .. } => {
            let model = PlsModel::from_json(&read_artifact(&paths.pls_model, "train")?)?;
            (
                model.predict(&train_set)?,
                model.predict(&val_set)?,
                model.predict(&test_set)?,
            )
        }
        ModelConfig::Cnn { .. } => {
            if !paths.model_bin.exists() {
                return Err(Error::MissingArtifact {
                    path: paths.model_bin.display().to_string(),
                    produced_by: "train".into(),
                });
            }
            let model = load_model(&paths.model_bin)?;
            (
                model.predict(&train_set)?,
                model.predict(&val_set)?,
                model.predict(&test_set)?,
            )
        }
    };

    let mut fit_preds = preds_train.to_vec();
    fit_preds.extend(preds_val.iter());
    let mut fit_refs = train_set.reference_mg().to_vec();
    fit_refs.extend(val_set.reference_mg().iter());
    let fit_preds = Array1::from_vec(fit_preds);
    let fit_refs = Array1::from_vec(fit_refs);

    let train_metrics = score(fit_preds.view(), fit_refs.view(), SELECTION_HUBER_DELTA)?;
    let test_metrics = score(
        preds_test.view(),
        test_set.reference_mg().view(),
        SELECTION_HUBER_DELTA,
    )?;

    write_metrics_csv(
        &paths.metrics,
        &[
            ("train".to_string(), train_metrics),
            ("test".to_string(), test_metrics),
        ],
    )?;
    write_scatter_csv(
        &paths.scatter,
        &[
            (&train_set, preds_train.view(), "train"),
            (&val_set, preds_val.view(), "validation"),
            (&test_set, preds_test.view(), "test"),
        ],
    )?;
    stamp_metadata(&paths, "evaluate")?;

    Ok(EvaluateSummary {
        train: train_metrics,
        test: test_metrics,
    })
}

// ---------------------------------------------------------------------------
// Stage: activations

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationsSummary {
    pub layer: ConvLayer,
    /// Kernels whose traces were written, strongest first.
    pub kernels: Vec<usize>,
}

/// Rank a convolution layer's kernels by mean absolute response on the test
/// set and write the full ranking plus wavelength-aligned traces for the
/// strongest few.
pub fn activations(
    config: &PipelineConfig,
    layer: ConvLayer,
    top_k: usize,
) -> Result<ActivationsSummary> {
    config.validate()?;
    if top_k == 0 {
        return Err(Error::InvalidConfig {
            msg: "need at least one kernel trace".into(),
        });
    }
    let paths = ArtifactPaths::new(&config.output_dir);
    check_provenance(&paths, config)?;
    if !matches!(config.model, ModelConfig::Cnn { .. }) {
        return Err(Error::InvalidConfig {
            msg: "activation maps require the network model family".into(),
        });
    }
    if !paths.model_bin.exists() {
        return Err(Error::MissingArtifact {
            path: paths.model_bin.display().to_string(),
            produced_by: "train".into(),
        });
    }
    let model = load_model(&paths.model_bin)?;
    let test_set = load_csv(&paths.test)?;

    let ranks = rank_kernels(&model, &test_set, layer)?;
    let spec = model.spec();
    write_ranking_csv(
        &paths.ranking,
        layer,
        &ranks,
        spec.filter_len1,
        spec.filter_len2,
    )?;

    let kernels: Vec<usize> = ranks
        .iter()
        .take(top_k.min(ranks.len()))
        .map(|r| r.kernel)
        .collect();
    let traces = activation_traces(&model, &test_set, layer, &kernels)?;
    let layer_no = match layer {
        ConvLayer::First => 1,
        ConvLayer::Second => 2,
    };
    let labels: Vec<String> = kernels
        .iter()
        .map(|k| format!("layer{layer_no}_kernel{k:02}"))
        .collect();
    write_activation_csv(&paths.activations, test_set.grid(), &traces, &labels)?;
    stamp_metadata(&paths, "activations")?;

    Ok(ActivationsSummary { layer, kernels })
}

// ---------------------------------------------------------------------------
// Stage: synth

/// Generate a synthetic table and store it as CSV; returns the sample count.
pub fn synth_to_csv(config: &SyntheticConfig, path: impl AsRef<Path>) -> Result<usize> {
    let set = synthesize(config)?;
    save_csv(&set, path)?;
    Ok(set.n_samples())
}
