//! Experiment configuration: strict TOML parsing (unknown keys rejected),
//! validation with field-level diagnostics, and a canonical digest that
//! stamps every artifact a run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stamp_core::fedsim::{Algorithm, FedConfig, RunConfig, TamGradientMode};
use stamp_core::gm::GMConfig;
use stamp_core::proto::{CoresetSolverConfig, MixStyleConfig, PcsConfig};
use stamp_core::taskpool::SyntheticDatasetConfig;
use stamp_core::tensor::ModelShape;
use stamp_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub num_tasks: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub batch_size: usize,
    /// `fedavg`, `stamp`, or a `+`-joined subset of `sam`/`tam`/`pcs`.
    pub algorithm: String,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            num_clients: 10,
            participation_fraction: 1.0,
            local_epochs: 5,
            rounds_per_task: 25,
            num_tasks: 5,
            local_lr: 0.005,
            global_lr: 1.0,
            batch_size: 128,
            algorithm: "stamp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder_dims: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub capacity_per_class: usize,
    pub tam_gradient_mode: TamGradientMode,
    pub recompute_task_gradients: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            capacity_per_class: 20,
            tam_gradient_mode: TamGradientMode::Coreset,
            recompute_task_gradients: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Shared,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub classes_per_task: usize,
    pub disjoint_across_clients: bool,
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            classes_per_task: 2,
            disjoint_across_clients: false,
            partition: PartitionKind::Shared,
            dirichlet_alpha: 1.0,
        }
    }
}

/// Full experiment configuration as parsed from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub federation: FederationSection,
    pub model: ModelSection,
    pub tam: GMConfig,
    pub sam: GMConfig,
    pub mixstyle: MixStyleConfig,
    pub memory: MemorySection,
    pub coreset_solver: CoresetSolverConfig,
    pub dataset: SyntheticDatasetConfig,
    pub tasks: TaskSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1],
            output_dir: PathBuf::from("runs"),
            federation: FederationSection::default(),
            model: ModelSection::default(),
            tam: GMConfig::default(),
            sam: GMConfig::default(),
            mixstyle: MixStyleConfig::default(),
            memory: MemorySection::default(),
            coreset_solver: CoresetSolverConfig::default(),
            dataset: SyntheticDatasetConfig::default(),
            tasks: TaskSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML string; unknown keys are rejected with the key named.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        Algorithm::parse(&self.federation.algorithm)
            .map_err(|e| Error::Config(format!("federation.algorithm: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must list at least one seed".into()));
        }
        self.algorithm()?;
        self.dataset
            .validate()
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        self.tam
            .validate()
            .map_err(|e| Error::Config(format!("tam: {e}")))?;
        self.sam
            .validate()
            .map_err(|e| Error::Config(format!("sam: {e}")))?;
        self.mixstyle
            .validate()
            .map_err(|e| Error::Config(format!("mixstyle: {e}")))?;
        if self.memory.capacity_per_class == 0 {
            return Err(Error::Config(
                "memory.capacity_per_class: must be at least 1".into(),
            ));
        }
        if self.tasks.classes_per_task == 0 {
            return Err(Error::Config("tasks.classes_per_task: must be at least 1".into()));
        }
        if self.tasks.dirichlet_alpha <= 0.0 {
            return Err(Error::Config("tasks.dirichlet_alpha: must be positive".into()));
        }
        let needed = self.tasks.classes_per_task * self.federation.num_tasks;
        if needed > self.dataset.num_classes {
            return Err(Error::Config(format!(
                "tasks.classes_per_task * federation.num_tasks = {} exceeds dataset.num_classes = {}",
                needed, self.dataset.num_classes
            )));
        }
        if self.tasks.disjoint_across_clients
            && needed * self.federation.num_clients > self.dataset.num_classes
        {
            return Err(Error::Config(format!(
                "tasks.disjoint_across_clients: needs {} classes but dataset has {}",
                needed * self.federation.num_clients,
                self.dataset.num_classes
            )));
        }
        self.shape()?;
        self.run_config(0)?.validate()?;
        Ok(())
    }

    pub fn shape(&self) -> Result<ModelShape> {
        ModelShape::new(
            self.dataset.input_dim,
            self.model.encoder_dims.clone(),
            self.dataset.num_classes,
        )
    }

    /// Core run configuration for one seed.
    pub fn run_config(&self, seed: u64) -> Result<RunConfig> {
        let fed = FedConfig {
            num_clients: self.federation.num_clients,
            participation_fraction: self.federation.participation_fraction,
            local_epochs: self.federation.local_epochs,
            rounds_per_task: self.federation.rounds_per_task,
            num_tasks: self.federation.num_tasks,
            local_lr: self.federation.local_lr,
            global_lr: self.federation.global_lr,
            batch_size: self.federation.batch_size,
            algorithm: self.algorithm()?,
            seed,
        };
        Ok(RunConfig {
            fed,
            shape: self.shape()?,
            tam_gm: self.tam.clone(),
            sam_gm: self.sam.clone(),
            pcs: PcsConfig {
                solver: self.coreset_solver.clone(),
                mixstyle: self.mixstyle.clone(),
            },
            memory_capacity: self.memory.capacity_per_class,
            tam_mode: self.memory.tam_gradient_mode,
            recompute_task_gradients: self.memory.recompute_task_gradients,
        })
    }

    /// Canonical hex digest of the configuration.
    pub fn digest(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }

    /// Stable id for one (config, seed) run.
    pub fn run_id(&self, seed: u64) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.digest()?.as_bytes());
        hasher.update(seed.to_le_bytes());
        Ok(hex_string(&hasher.finalize())[..12].to_string())
    }

    /// The desk-scale benchmark: 20 classes in tasks of 2 over 5 tasks and
    /// 4 clients, sized so a full algorithm comparison runs in seconds.
    pub fn desk_benchmark() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![1, 2, 3, 4, 5];
        cfg.federation = FederationSection {
            num_clients: 4,
            participation_fraction: 1.0,
            local_epochs: 1,
            rounds_per_task: 10,
            num_tasks: 5,
            local_lr: 0.05,
            global_lr: 1.0,
            batch_size: 64,
            algorithm: "stamp".into(),
        };
        cfg.model = ModelSection {
            encoder_dims: vec![32, 16],
        };
        cfg.dataset = SyntheticDatasetConfig {
            num_classes: 20,
            input_dim: 32,
            samples_per_class: 100,
            class_center_scale: 1.0,
            within_class_std: 1.0,
            seed: 7,
        };
        cfg.memory.capacity_per_class = 20;
        // Raw client deltas carry the step magnitude at the server; the
        // temporal side keeps equal task votes via unit normalization.
        cfg.sam.normalize_inputs = false;
        cfg.tam.normalize_inputs = true;
        cfg.tam.inner_rounds = 60;
        cfg.sam.inner_rounds = 60;
        cfg
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Apply a sweepable parameter. Unknown names list the valid ones.
pub fn apply_param(cfg: &mut ExperimentConfig, name: &str, value: &str) -> Result<()> {
    fn float(name: &str, value: &str) -> Result<f64> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("{name}: `{value}` is not a number")))
    }
    fn count(name: &str, value: &str) -> Result<usize> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("{name}: `{value}` is not a count")))
    }
    match name {
        "kappa" => {
            let v = float(name, value)?;
            cfg.tam.kappa = v;
            cfg.sam.kappa = v;
        }
        "tam.kappa" => cfg.tam.kappa = float(name, value)?,
        "sam.kappa" => cfg.sam.kappa = float(name, value)?,
        "inner_lr" => {
            let v = float(name, value)?;
            cfg.tam.inner_lr = v;
            cfg.sam.inner_lr = v;
        }
        "momentum" => {
            let v = float(name, value)?;
            cfg.tam.momentum = v;
            cfg.sam.momentum = v;
        }
        "inner_rounds" => {
            let v = count(name, value)?;
            cfg.tam.inner_rounds = v;
            cfg.sam.inner_rounds = v;
        }
        "scheduler_step" => {
            let v = count(name, value)?;
            cfg.tam.scheduler_step = v;
            cfg.sam.scheduler_step = v;
        }
        "scheduler_gamma" => {
            let v = float(name, value)?;
            cfg.tam.scheduler_gamma = v;
            cfg.sam.scheduler_gamma = v;
        }
        "local_lr" => cfg.federation.local_lr = float(name, value)?,
        "global_lr" => cfg.federation.global_lr = float(name, value)?,
        "local_epochs" => cfg.federation.local_epochs = count(name, value)?,
        "rounds_per_task" => cfg.federation.rounds_per_task = count(name, value)?,
        "num_tasks" => cfg.federation.num_tasks = count(name, value)?,
        "num_clients" => cfg.federation.num_clients = count(name, value)?,
        "batch_size" => cfg.federation.batch_size = count(name, value)?,
        "participation_fraction" => {
            cfg.federation.participation_fraction = float(name, value)?
        }
        "algorithm" => cfg.federation.algorithm = value.to_string(),
        "capacity_per_class" => cfg.memory.capacity_per_class = count(name, value)?,
        "lambda" => cfg.mixstyle.lambda = float(name, value)?,
        "dirichlet_alpha" => cfg.tasks.dirichlet_alpha = float(name, value)?,
        "classes_per_task" => cfg.tasks.classes_per_task = count(name, value)?,
        "class_center_scale" => cfg.dataset.class_center_scale = float(name, value)?,
        "within_class_std" => cfg.dataset.within_class_std = float(name, value)?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}`; valid parameters: kappa, tam.kappa, \
                 sam.kappa, inner_lr, momentum, inner_rounds, scheduler_step, scheduler_gamma, \
                 local_lr, global_lr, local_epochs, rounds_per_task, num_tasks, num_clients, \
                 batch_size, participation_fraction, algorithm, capacity_per_class, lambda, \
                 dirichlet_alpha, classes_per_task, class_center_scale, within_class_std"
            )))
        }
    }
    cfg.validate()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk_benchmark().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let err = ExperimentConfig::from_toml("nonexistent_knob = 3").unwrap_err();
        assert!(err.to_string().contains("nonexistent_knob"), "{err}");
        let err =
            ExperimentConfig::from_toml("[federation]\nlocal_lr = 0.1\ntypo_field = 2").unwrap_err();
        assert!(err.to_string().contains("typo_field"), "{err}");
    }

    #[test]
    fn toml_round_trip_is_semantically_identical() {
        let cfg = ExperimentConfig::desk_benchmark();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest().unwrap(), back.digest().unwrap());
    }

    #[test]
    fn digest_changes_with_config() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.federation.local_lr = 0.123;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn algorithm_labels_parse() {
        let mut cfg = ExperimentConfig::default();
        for label in ["fedavg", "stamp", "sam", "tam+pcs", "sam+tam"] {
            cfg.federation.algorithm = label.into();
            let algo = cfg.algorithm().unwrap();
            assert_eq!(algo.label(), label);
        }
        cfg.federation.algorithm = "bogus".into();
        assert!(cfg.algorithm().is_err());
    }

    #[test]
    fn unknown_sweep_parameter_lists_valid_names() {
        let mut cfg = ExperimentConfig::default();
        let err = apply_param(&mut cfg, "warp_factor", "9").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warp_factor"));
        assert!(msg.contains("kappa"));
    }

    #[test]
    fn kappa_sweep_touches_both_sides() {
        let mut cfg = ExperimentConfig::default();
        apply_param(&mut cfg, "kappa", "0.75").unwrap();
        assert_eq!(cfg.tam.kappa, 0.75);
        assert_eq!(cfg.sam.kappa, 0.75);
    }

    #[test]
    fn capacity_cross_check_is_enforced() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.num_tasks = 11; // 2 * 11 > 20 classes
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("num_tasks"), "{err}");
    }
}
