//! Experiment configuration: TOML schema with full defaulting, dotted-path
//! overrides, and a content hash for artifact headers.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use splitsim_core::attack::mia::MiaCfg;
use splitsim_core::attack::reconstruct::AttackBudget;
use splitsim_core::data::DatasetCfg;
use splitsim_core::nn::{LayerSpec, ModelSpec};
use splitsim_core::protocol::{NoiseFamily, TrainCfg};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub dataset: DatasetCfg,
    pub training: TrainingSection,
    pub clients: ClientsSection,
    pub profile: ProfileSection,
    pub optimizer: OptimizerSection,
    pub attack: AttackSection,
    pub mia: MiaSection,
    pub scaling: ScalingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            model: ModelSection::default(),
            dataset: DatasetCfg::default(),
            training: TrainingSection::default(),
            clients: ClientsSection::default(),
            profile: ProfileSection::default(),
            optimizer: OptimizerSection::default(),
            attack: AttackSection::default(),
            mia: MiaSection::default(),
            scaling: ScalingSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv2dSmall { out_channels: 2, kernel: 3, padding: Some(1) },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { out: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 4 },
            ],
        }
    }
}

impl ModelSection {
    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec { input_shape: self.input.clone(), layers: self.layers.clone() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub noise_family: NoiseFamily,
    /// Epochs between aggregations.
    pub aggregate_every: usize,
    /// Split point and noise level for plain `train` runs...
    pub split_point: usize,
    pub sigma: f64,
    /// ...unless this asks for the decisions artifact from `optimize`.
    pub use_decisions: bool,
    /// Path to an attendance schedule file; empty means everyone attends.
    pub attendance: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 30,
            lr: 0.05,
            l2_lambda: 0.0,
            batch_size: 8,
            noise_family: NoiseFamily::Laplace,
            aggregate_every: 5,
            split_point: 1,
            sigma: 0.0,
            use_decisions: false,
            attendance: String::new(),
        }
    }
}

impl TrainingSection {
    pub fn to_train_cfg(&self) -> TrainCfg {
        TrainCfg {
            lr: self.lr,
            l2_lambda: self.l2_lambda,
            batch_size: self.batch_size,
            noise_family: self.noise_family,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsSection {
    pub count: usize,
    /// Privacy weights; a single value broadcasts, otherwise one per client.
    pub alpha: Vec<f64>,
    /// Power caps in watts; broadcast like `alpha`.
    pub p_max: Vec<f64>,
    /// Per-client multiplier on the device energy coefficients; broadcast
    /// like `alpha`. Models heterogeneous hardware.
    pub energy_scale: Vec<f64>,
}

impl Default for ClientsSection {
    fn default() -> Self {
        ClientsSection {
            count: 3,
            alpha: vec![0.4, 0.2, 0.5],
            p_max: vec![12.0],
            energy_scale: vec![1.0],
        }
    }
}

impl ClientsSection {
    /// Resolves a broadcastable per-client vector for `count` clients: one
    /// value repeats, a full-length vector is used as is, and anything else
    /// cycles (so a fixed personality pattern extends to larger rosters).
    pub fn per_client(values: &[f64], count: usize, what: &str) -> Result<Vec<f64>> {
        if values.is_empty() {
            bail!("clients.{what} must not be empty");
        }
        Ok((0..count).map(|i| values[i % values.len()]).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Deepest split point offered to clients.
    pub s_max: usize,
    pub sigma_max: f64,
    pub sigma_step: f64,
    /// Profiling inputs reconstructed per table cell.
    pub samples: usize,
    /// Batches per epoch assumed by the energy model.
    pub batches_per_epoch: usize,
    pub budget: BudgetSection,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            s_max: 3,
            sigma_max: 2.5,
            sigma_step: 0.05,
            samples: 4,
            batches_per_epoch: 4,
            budget: BudgetSection::from_budget(&AttackBudget::profiling()),
        }
    }
}

/// Mirror of the reconstruction budget so both the profiler and the attack
/// subcommand expose every knob in the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub outer_iters: usize,
    pub input_steps: usize,
    pub model_steps: usize,
    pub lr_input: f64,
    pub lr_model: f64,
    pub tv_weight: f64,
    pub clip_unit: bool,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection::from_budget(&AttackBudget::default())
    }
}

impl BudgetSection {
    pub fn from_budget(b: &AttackBudget) -> Self {
        BudgetSection {
            outer_iters: b.outer_iters,
            input_steps: b.input_steps,
            model_steps: b.model_steps,
            lr_input: b.lr_input,
            lr_model: b.lr_model,
            tv_weight: b.tv_weight,
            clip_unit: b.clip_unit,
            tol: b.tol,
            restarts: b.restarts,
        }
    }

    pub fn to_budget(&self) -> AttackBudget {
        AttackBudget {
            outer_iters: self.outer_iters,
            input_steps: self.input_steps,
            model_steps: self.model_steps,
            lr_input: self.lr_input,
            lr_model: self.lr_model,
            tv_weight: self.tv_weight,
            clip_unit: self.clip_unit,
            tol: self.tol,
            restarts: self.restarts,
        }
    }
}

/// The leakage threshold is either pinned or searched from reconstruction
/// outcomes ("auto").
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Fixed(f64),
    Named(String),
}

impl Threshold {
    pub fn validate(&self) -> Result<()> {
        match self {
            Threshold::Fixed(v) if *v > 0.0 && *v < 1.0 => Ok(()),
            Threshold::Fixed(v) => bail!("optimizer.t_fsim = {v} outside (0, 1)"),
            Threshold::Named(s) if s == "auto" => Ok(()),
            Threshold::Named(s) => bail!("optimizer.t_fsim = {s:?}; expected a number or \"auto\""),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    /// Retained fraction of the reference accuracy.
    pub beta: f64,
    pub t_fsim: Threshold,
    pub max_rounds: usize,
    pub sigma_floor: f64,
    pub probe_epochs: usize,
    /// Bins for the auto threshold search.
    pub threshold_bins: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            beta: 0.95,
            t_fsim: Threshold::Fixed(0.5),
            max_rounds: 5,
            sigma_floor: 0.0,
            probe_epochs: 30,
            threshold_bins: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Noise levels swept by `attack reconstruct`.
    pub sigmas: Vec<f64>,
    /// True keeps the prefix weights secret: the surrogate starts from the
    /// attacker's own random initialization.
    pub blind: bool,
    pub samples: usize,
    pub budget: BudgetSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            sigmas: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            blind: true,
            samples: 4,
            budget: BudgetSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaSection {
    pub members: usize,
    pub non_members: usize,
    pub shadow_pool: usize,
    pub shadow_count: usize,
    pub shadow_epochs: usize,
    pub target_epochs: usize,
    /// Weight decay used by both the target and the shadows.
    pub lambda: f64,
    pub attack_steps: usize,
    pub attack_lr: f64,
}

impl Default for MiaSection {
    fn default() -> Self {
        let mia = MiaCfg::default();
        MiaSection {
            members: 24,
            non_members: 24,
            shadow_pool: 96,
            shadow_count: mia.shadow_count,
            shadow_epochs: mia.epochs,
            target_epochs: mia.epochs,
            lambda: 0.0,
            attack_steps: mia.attack_steps,
            attack_lr: mia.attack_lr,
        }
    }
}

impl MiaSection {
    pub fn to_mia_cfg(&self, base: &TrainCfg) -> MiaCfg {
        MiaCfg {
            shadow_count: self.shadow_count,
            epochs: self.shadow_epochs,
            train: TrainCfg { l2_lambda: self.lambda, ..base.clone() },
            attack_steps: self.attack_steps,
            attack_lr: self.attack_lr,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub counts: Vec<usize>,
    /// Total training pool shared by the roster at every count.
    pub pool: usize,
}

impl Default for ScalingSection {
    fn default() -> Self {
        ScalingSection { counts: vec![3, 5, 8], pool: 120 }
    }
}

impl ExperimentConfig {
    /// Loads the config file (defaults when `path` is None), applies dotted
    /// `--override` pairs, then validates the result against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String], seed_flag: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut doc: toml::Value = text
            .parse()
            .with_context(|| match path {
                Some(p) => format!("parsing config {}", p.display()),
                None => "parsing built-in config".into(),
            })?;
        for pair in overrides {
            apply_override(&mut doc, pair)?;
        }
        let mut cfg: ExperimentConfig = doc
            .try_into()
            .with_context(|| match path {
                Some(p) => format!("validating config {}", p.display()),
                None => "validating overrides".into(),
            })?;
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.count == 0 {
            bail!("clients.count must be at least 1");
        }
        for &a in &self.clients.alpha {
            if !(0.0..=1.0).contains(&a) {
                bail!("clients.alpha value {a} outside [0, 1]");
            }
        }
        if self.clients.alpha.len() > 1 && self.clients.alpha.len() != self.clients.count {
            bail!(
                "clients.alpha has {} values for {} clients; give 1 or {}",
                self.clients.alpha.len(),
                self.clients.count,
                self.clients.count
            );
        }
        let k = self.model.layers.len();
        if self.profile.s_max == 0 || self.profile.s_max >= k {
            bail!("profile.s_max = {} must be in 1..{k}", self.profile.s_max);
        }
        if self.training.split_point == 0 || self.training.split_point > self.profile.s_max {
            bail!(
                "training.split_point = {} must be in 1..={}",
                self.training.split_point,
                self.profile.s_max
            );
        }
        if !(self.optimizer.beta > 0.0 && self.optimizer.beta <= 1.0) {
            bail!("optimizer.beta = {} outside (0, 1]", self.optimizer.beta);
        }
        self.optimizer.t_fsim.validate()?;
        if self.scaling.counts.iter().any(|&n| n == 0) {
            bail!("scaling.counts must all be at least 1");
        }
        Ok(())
    }

    /// Canonical TOML rendering of the effective config; also the hash input.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    pub fn sha256(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Applies one `--override section.key=value` pair onto the raw TOML tree.
/// The value is parsed as TOML (so numbers, booleans, arrays, and quoted
/// strings all work); bare words fall back to strings.
fn apply_override(doc: &mut toml::Value, pair: &str) -> Result<()> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| anyhow!("override {pair:?} is not KEY=VALUE"))?;
    let path = path.trim();
    if path.is_empty() {
        bail!("override {pair:?} has an empty key");
    }
    let value: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("parsed assignment"),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {path:?} descends through a non-table"))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override {path:?} descends through a non-table"))?;
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}
