//! Experiment configuration: a strict, versioned TOML schema with the
//! simulation parameter table as defaults, plus the builder that turns a
//! parsed config into live datasets, model and loop parameters.
//!
//! Unknown keys are rejected; validation errors name the offending key.

use anyhow::{bail, Context, Result};
use dpfl_core::attack::AttackProfile;
use dpfl_core::data::{
    load_mnist, load_power_csv, partition_iid, partition_noniid, synth_classification,
    synth_regression, Partition,
};
use dpfl_core::fl::{FLConfig, FlData, PrivacySetup};
use dpfl_core::matrix::Matrix;
use dpfl_core::nn::{Batch, ModelSpec, Targets, Task};
use dpfl_core::rl::RLConfig;
use dpfl_core::rng::{stream_rng, StreamPurpose};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub fl: FlSection,
    pub model: ModelSection,
    pub privacy: PrivacySection,
    pub attack: AttackSection,
    pub dataset: DatasetSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rl: Option<RlSection>,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 42,
            fl: FlSection::default(),
            model: ModelSection::default(),
            privacy: PrivacySection::default(),
            attack: AttackSection::default(),
            dataset: DatasetSection::default(),
            rl: None,
            sweep: SweepSection::default(),
        }
    }
}

/// Federated loop parameters; defaults are the MNIST column of the
/// simulation parameter table (K=100, k=30, b=32, i=10, eta=0.01).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlSection {
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub accuracy_threshold: f64,
    pub max_rounds: usize,
}

impl Default for FlSection {
    fn default() -> Self {
        let d = FLConfig::mnist_defaults();
        FlSection {
            total_clients: d.total_clients,
            clients_per_round: d.clients_per_round,
            batch_size: d.batch_size,
            local_epochs: d.local_epochs,
            learning_rate: d.learning_rate,
            accuracy_threshold: d.accuracy_threshold,
            max_rounds: d.max_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden layer width; 0 picks the task default (64 classification,
    /// 32 regression).
    pub hidden_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden_width: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySection {
    /// Per-round privacy loss; `inf` is the no-DP sentinel.
    pub epsilon: f64,
    pub delta_round: f64,
    pub sensitivity: f64,
    pub budget: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            epsilon: 8.0,
            delta_round: 1e-5,
            sensitivity: 1.0,
            budget: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub enabled: bool,
    pub gamma: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            enabled: false,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// mnist | power_consumption | synthetic_classification | synthetic_regression
    pub kind: String,
    /// Data-side seed: generation, train/test split, partitioning.
    pub seed: u64,
    /// noniid | iid (noniid needs labels, so regression datasets use iid).
    pub partition: String,
    pub shards_per_client: usize,
    // mnist
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    // power_consumption
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    pub test_fraction: f64,
    // synthetic
    pub train_samples: usize,
    pub test_samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub margin: f64,
    pub noise_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "mnist".into(),
            seed: 7,
            partition: "noniid".into(),
            shards_per_client: 2,
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            path: "data/household_power_consumption.txt".into(),
            target_column: None,
            test_fraction: 0.2,
            train_samples: 1500,
            test_samples: 500,
            dim: 16,
            classes: 4,
            margin: 3.0,
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub alpha: f64,
    pub chi: f64,
    pub psi: [f64; 3],
    pub f_l_max: f64,
    pub m_l_max: f64,
    pub m_bins: usize,
    pub f_bins: usize,
    /// Explicit grid; empty means the default 10-point log grid 0.1..20.
    pub eps_grid: Vec<f64>,
    pub eps_start_idx: usize,
    pub explore_start: f64,
    pub explore_min: f64,
    pub explore_decay: f64,
    pub episodes: usize,
    pub loss_floor: f64,
    pub invert_attack_term: bool,
    /// Detector margin for the detect command.
    pub margin: f64,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = RLConfig::defaults();
        RlSection {
            alpha: d.alpha,
            chi: d.chi,
            psi: d.psi,
            f_l_max: d.f_l_max,
            m_l_max: d.m_l_max,
            m_bins: d.m_bins,
            f_bins: d.f_bins,
            eps_grid: Vec::new(),
            eps_start_idx: d.eps_start_idx,
            explore_start: d.explore_start,
            explore_min: d.explore_min,
            explore_decay: d.explore_decay,
            episodes: d.episodes,
            loss_floor: d.loss_floor,
            invert_attack_term: d.invert_attack_term,
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![8.0, 4.0, 1.0],
            gammas: vec![0.0, 0.01, 0.1],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl RlSection {
    pub fn to_core(&self) -> RLConfig {
        RLConfig {
            alpha: self.alpha,
            chi: self.chi,
            psi: self.psi,
            f_l_max: self.f_l_max,
            m_l_max: self.m_l_max,
            m_bins: self.m_bins,
            f_bins: self.f_bins,
            eps_grid: if self.eps_grid.is_empty() {
                RLConfig::defaults().eps_grid
            } else {
                self.eps_grid.clone()
            },
            eps_start_idx: self.eps_start_idx,
            explore_start: self.explore_start,
            explore_min: self.explore_min,
            explore_decay: self.explore_decay,
            episodes: self.episodes,
            loss_floor: self.loss_floor,
            invert_attack_term: self.invert_attack_term,
        }
    }
}

/// Parse and validate a config file; `seed_override` takes precedence over
/// the file's master seed. Returns the config and the raw file bytes (the
/// manifest hashes them).
pub fn load(path: &Path, seed_override: Option<u64>) -> Result<(ExperimentConfig, Vec<u8>)> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&raw).context("config is not UTF-8")?;
    let mut cfg: ExperimentConfig =
        toml::from_str(text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = seed_override {
        cfg.master_seed = seed;
    }
    validate(&cfg)?;
    Ok((cfg, raw))
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        bail!(
            "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
            cfg.schema_version
        );
    }
    cfg.fl_config(cfg.master_seed).validate()?;
    PrivacySetup::new(
        cfg.privacy.epsilon,
        cfg.privacy.delta_round,
        cfg.privacy.sensitivity,
        cfg.privacy.budget,
    )?;
    AttackProfile::new(cfg.attack.gamma, cfg.attack.enabled)?;
    match cfg.dataset.kind.as_str() {
        "mnist" | "power_consumption" | "synthetic_classification" | "synthetic_regression" => {}
        other => bail!("dataset.kind: unknown kind {other:?}"),
    }
    match cfg.dataset.partition.as_str() {
        "noniid" | "iid" => {}
        other => bail!("dataset.partition: unknown scheme {other:?}"),
    }
    if cfg.dataset.partition == "noniid" && !cfg.dataset_is_classification() {
        bail!("dataset.partition: noniid requires a labeled (classification) dataset");
    }
    if cfg.dataset.shards_per_client == 0 {
        bail!("dataset.shards_per_client: must be positive");
    }
    if !(cfg.dataset.test_fraction > 0.0 && cfg.dataset.test_fraction < 1.0) {
        bail!(
            "dataset.test_fraction: must be in (0, 1), got {}",
            cfg.dataset.test_fraction
        );
    }
    if let Some(rl) = &cfg.rl {
        rl.to_core().validate()?;
        if !(rl.margin >= 0.0) {
            bail!("rl.margin: must be >= 0, got {}", rl.margin);
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn fl_config(&self, master_seed: u64) -> FLConfig {
        FLConfig {
            total_clients: self.fl.total_clients,
            clients_per_round: self.fl.clients_per_round,
            batch_size: self.fl.batch_size,
            local_epochs: self.fl.local_epochs,
            learning_rate: self.fl.learning_rate,
            accuracy_threshold: self.fl.accuracy_threshold,
            max_rounds: self.fl.max_rounds,
            master_seed,
        }
    }

    pub fn privacy_setup(&self) -> Result<PrivacySetup> {
        Ok(PrivacySetup::new(
            self.privacy.epsilon,
            self.privacy.delta_round,
            self.privacy.sensitivity,
            self.privacy.budget,
        )?)
    }

    pub fn attack_profile(&self) -> Result<AttackProfile> {
        Ok(AttackProfile::new(self.attack.gamma, self.attack.enabled)?)
    }

    fn dataset_is_classification(&self) -> bool {
        matches!(
            self.dataset.kind.as_str(),
            "mnist" | "synthetic_classification"
        )
    }

    /// Paths of external dataset files this config reads, for the manifest.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match self.dataset.kind.as_str() {
            "mnist" => vec![
                self.dataset.train_images.clone(),
                self.dataset.train_labels.clone(),
                self.dataset.test_images.clone(),
                self.dataset.test_labels.clone(),
            ],
            "power_consumption" => vec![self.dataset.path.clone()],
            _ => Vec::new(),
        }
    }
}

/// A fully materialized experiment: config translated to core types with
/// the dataset loaded, split and partitioned.
pub struct BuiltExperiment {
    pub model: ModelSpec,
    pub data: FlData,
    pub task: Task,
}

pub fn build(cfg: &ExperimentConfig) -> Result<BuiltExperiment> {
    let ds = &cfg.dataset;
    let (train_inputs, train_targets, test, task) = match ds.kind.as_str() {
        "mnist" => {
            let (train_x, train_y) = load_mnist(&ds.train_images, &ds.train_labels)?;
            let (test_x, test_y) = load_mnist(&ds.test_images, &ds.test_labels)?;
            (
                train_x,
                Targets::Labels(train_y),
                Batch::new(test_x, Targets::Labels(test_y))?,
                Task::Classification,
            )
        }
        "power_consumption" => {
            let data = load_power_csv(&ds.path, ds.target_column.as_deref())?;
            let (train_x, train_y, test_x, test_y) =
                split_regression(data.features, data.target, ds.test_fraction, ds.seed)?;
            (
                train_x,
                Targets::Values(column_matrix(train_y)?),
                Batch::new(test_x, Targets::Values(column_matrix(test_y)?))?,
                Task::Regression,
            )
        }
        "synthetic_classification" => {
            let mut rng = stream_rng(ds.seed, StreamPurpose::DataGen, &[]);
            let total = ds.train_samples + ds.test_samples;
            let (inputs, labels) =
                synth_classification(total, ds.dim, ds.classes, ds.margin, &mut rng)?;
            let train_idx: Vec<usize> = (0..ds.train_samples).collect();
            let test_idx: Vec<usize> = (ds.train_samples..total).collect();
            let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let test_y: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
            (
                inputs.gather_rows(&train_idx),
                Targets::Labels(train_y),
                Batch::new(inputs.gather_rows(&test_idx), Targets::Labels(test_y))?,
                Task::Classification,
            )
        }
        "synthetic_regression" => {
            let mut rng = stream_rng(ds.seed, StreamPurpose::DataGen, &[]);
            let total = ds.train_samples + ds.test_samples;
            let (inputs, targets) = synth_regression(total, ds.dim, ds.noise_std, &mut rng)?;
            let train_idx: Vec<usize> = (0..ds.train_samples).collect();
            let test_idx: Vec<usize> = (ds.train_samples..total).collect();
            let train_y: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
            let test_y: Vec<f64> = test_idx.iter().map(|&i| targets[i]).collect();
            (
                inputs.gather_rows(&train_idx),
                Targets::Values(column_matrix(train_y)?),
                Batch::new(
                    inputs.gather_rows(&test_idx),
                    Targets::Values(column_matrix(test_y)?),
                )?,
                Task::Regression,
            )
        }
        other => bail!("dataset.kind: unknown kind {other:?}"),
    };

    let n_train = train_inputs.rows();
    let partition = build_partition(cfg, n_train, &train_targets)?;
    let input_dim = train_inputs.cols();
    let (output_dim, hidden_default) = match task {
        Task::Classification => {
            let classes = match &train_targets {
                Targets::Labels(l) => l.iter().copied().max().unwrap_or(0) + 1,
                Targets::Values(_) => unreachable!(),
            };
            (classes, 64)
        }
        Task::Regression => (1, 32),
    };
    let hidden = if cfg.model.hidden_width > 0 {
        cfg.model.hidden_width
    } else {
        hidden_default
    };
    let model = ModelSpec::three_layer(input_dim, hidden, output_dim, task)?;

    Ok(BuiltExperiment {
        model,
        data: FlData {
            train_inputs,
            train_targets,
            partition,
            test,
        },
        task,
    })
}

fn build_partition(cfg: &ExperimentConfig, n_train: usize, targets: &Targets) -> Result<Partition> {
    let mut rng = stream_rng(cfg.dataset.seed, StreamPurpose::Partition, &[]);
    let partition = match (cfg.dataset.partition.as_str(), targets) {
        ("noniid", Targets::Labels(labels)) => partition_noniid(
            n_train,
            labels,
            cfg.fl.total_clients,
            cfg.dataset.shards_per_client,
            &mut rng,
        )?,
        ("iid", _) => partition_iid(n_train, cfg.fl.total_clients, &mut rng)?,
        ("noniid", Targets::Values(_)) => {
            bail!("dataset.partition: noniid requires a labeled dataset")
        }
        (other, _) => bail!("dataset.partition: unknown scheme {other:?}"),
    };
    Ok(partition)
}

fn column_matrix(values: Vec<f64>) -> Result<Matrix> {
    let rows = values.len();
    Ok(Matrix::from_vec(rows, 1, values)?)
}

/// Shuffled train/test split of a regression table, keyed by the dataset seed.
fn split_regression(
    features: Matrix,
    target: Vec<f64>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Matrix, Vec<f64>, Matrix, Vec<f64>)> {
    let mut rng = stream_rng(seed, StreamPurpose::DataGen, &[1]);
    let (train_idx, test_idx) =
        dpfl_core::data::split_indices(features.rows(), test_fraction, &mut rng)?;
    let train_x = features.gather_rows(&train_idx);
    let test_x = features.gather_rows(&test_idx);
    let train_y: Vec<f64> = train_idx.iter().map(|&i| target[i]).collect();
    let test_y: Vec<f64> = test_idx.iter().map(|&i| target[i]).collect();
    Ok((train_x, train_y, test_x, test_y))
}
