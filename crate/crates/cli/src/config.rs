//! Declarative run configuration: one TOML document with a section per
//! engine module, fully validated before any compute starts. Command
//! line flags override individual keys after the file is parsed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use nqs_core::ansatz::{AnsatzConfig, PhaseActivation};
use nqs_core::cluster::{init_groups, PartitionPlan, SplitStrategy};
use nqs_core::eloc::ElocMode;
use nqs_core::oracle::FciOptions;
use nqs_core::vmc::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub ansatz: AnsatzSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub fci: FciSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub fcidump: Option<PathBuf>,
    /// Electron counts per spin; defaults come from the FCIDUMP header.
    pub n_alpha: Option<usize>,
    pub n_beta: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzSection {
    /// Base shape, "toy" or "standard"; explicit keys override it.
    pub preset: String,
    pub n_layers: Option<usize>,
    pub n_head: Option<usize>,
    pub d_model: Option<usize>,
    pub phase_hidden: Option<Vec<usize>>,
    pub phase_activation: Option<PhaseActivation>,
    pub init_seed: u64,
}

impl Default for AnsatzSection {
    fn default() -> Self {
        AnsatzSection {
            preset: "toy".into(),
            n_layers: None,
            n_head: None,
            d_model: None,
            phase_hidden: None,
            phase_activation: None,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_count: u64,
    pub chunk_k: usize,
    pub iterations: u64,
    pub n_warmup: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub eloc_mode: ElocMode,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            n_count: base.n_count,
            chunk_k: base.chunk_k,
            iterations: base.iterations,
            n_warmup: base.n_warmup,
            lr_scale: base.lr_scale,
            beta1: base.beta1,
            beta2: base.beta2,
            epsilon: base.epsilon,
            weight_decay: base.weight_decay,
            eloc_mode: base.eloc_mode,
            seed: base.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub group_sizes: Vec<usize>,
    pub split_layers: Vec<usize>,
    /// Declared world size; must match the plan's rank product.
    pub ranks: Option<usize>,
    pub strategy: SplitStrategy,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let plan = PartitionPlan::single();
        ClusterSection {
            group_sizes: plan.group_sizes,
            split_layers: plan.split_layers,
            ranks: None,
            strategy: SplitStrategy::DensityAware,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Metrics stream destination; stdout when unset.
    pub metrics: Option<PathBuf>,
    /// Checkpoint to write after training, or to read for energy/sample.
    pub checkpoint: Option<PathBuf>,
    /// Trainer checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FciSection {
    pub dense_cap: Option<usize>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
}

impl FciSection {
    pub fn options(&self) -> FciOptions {
        let base = FciOptions::default();
        FciOptions {
            dense_cap: self.dense_cap.unwrap_or(base.dense_cap),
            max_iterations: self.max_iterations.unwrap_or(base.max_iterations),
            tolerance: self.tolerance.unwrap_or(base.tolerance),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Defaults to train.n_count when unset.
    pub n_count: Option<u64>,
    /// 0 means unlimited: sized to the full breadth the run can reach.
    pub chunk_k: Option<usize>,
    pub seed: Option<u64>,
    pub iteration: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n_count: None, chunk_k: None, seed: None, iteration: 1 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Spatial orbital count of the synthetic system (2K = 2·n_spatial).
    pub n_spatial: usize,
    pub n_elec: usize,
    /// Minimum ket lanes per kernel invocation.
    pub block: usize,
    /// Bra samples for the local-energy stage.
    pub n_samples: usize,
    pub seed: u64,
    /// Thread count for the threads-on row.
    pub threads: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_spatial: 20,
            n_elec: 14,
            block: 4096,
            n_samples: 24,
            seed: 7,
            threads: 4,
            repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn fcidump(&self) -> Result<&Path, String> {
        self.system
            .fcidump
            .as_deref()
            .ok_or_else(|| "system.fcidump is not set and no --fcidump was given".into())
    }

    /// Spin sector, explicit keys first, FCIDUMP header otherwise.
    pub fn spin_sector(&self, table: &nqs_core::integrals::IntegralTable) -> (usize, usize) {
        let (header_a, header_b) = table.spin_counts();
        (
            self.system.n_alpha.unwrap_or(header_a),
            self.system.n_beta.unwrap_or(header_b),
        )
    }

    pub fn ansatz_config(&self, k_orbitals: usize) -> Result<AnsatzConfig, String> {
        let mut shape = match self.ansatz.preset.as_str() {
            "toy" => AnsatzConfig::toy(k_orbitals),
            "standard" => AnsatzConfig::standard(k_orbitals),
            other => {
                return Err(format!(
                    "ansatz.preset {other:?} is neither \"toy\" nor \"standard\""
                ))
            }
        };
        if let Some(n) = self.ansatz.n_layers {
            shape.n_layers = n;
        }
        if let Some(n) = self.ansatz.n_head {
            shape.n_head = n;
        }
        if let Some(n) = self.ansatz.d_model {
            shape.d_model = n;
        }
        if let Some(hidden) = &self.ansatz.phase_hidden {
            shape.phase_hidden = hidden.clone();
        }
        if let Some(activation) = self.ansatz.phase_activation {
            shape.phase_activation = activation;
        }
        shape.validate().map_err(|e| format!("ansatz: {e}"))?;
        Ok(shape)
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            group_sizes: self.cluster.group_sizes.clone(),
            split_layers: self.cluster.split_layers.clone(),
        }
    }

    pub fn train_config(&self, k_orbitals: usize) -> Result<TrainConfig, String> {
        let config = TrainConfig {
            n_count: self.train.n_count,
            chunk_k: self.train.chunk_k,
            iterations: self.train.iterations,
            n_warmup: self.train.n_warmup,
            lr_scale: self.train.lr_scale,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            weight_decay: self.train.weight_decay,
            eloc_mode: self.train.eloc_mode,
            plan: self.partition_plan(),
            strategy: self.cluster.strategy,
            seed: self.train.seed,
        };
        config.validate(k_orbitals).map_err(|e| format!("train: {e}"))?;
        if let Some(world) = self.cluster.ranks {
            init_groups(0, world, &config.plan)
                .map_err(|e| format!("cluster.ranks: {e}"))?;
        }
        Ok(config)
    }
}

/// Cap for "unlimited" cache pools: every layer's unique-prefix breadth
/// is bounded by both the sample budget and the sector dimension.
pub fn resolve_chunk(requested: usize, n_count: u64, k: usize, na: usize, nb: usize) -> usize {
    if requested != 0 {
        return requested;
    }
    let full = binomial(k, na).saturating_mul(binomial(k, nb));
    full.min(n_count as u128).min(1 << 22).max(1) as usize
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut value: u128 = 1;
    for i in 0..k {
        value = value.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_an_empty_document() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.train.n_count, 10_000);
        assert_eq!(cfg.cluster.group_sizes, vec![1]);
        assert!(cfg.system.fcidump.is_none());
        assert!(cfg.fcidump().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(toml::from_str::<RunConfig>("[optimizer]\nbeta1 = 0.9\n").is_err());
    }

    #[test]
    fn sections_feed_the_engine_types() {
        let cfg: RunConfig = toml::from_str(
            "[system]\nfcidump = \"x.fcidump\"\n\
             [train]\nn_count = 500\neloc_mode = \"accurate\"\n\
             [cluster]\ngroup_sizes = [2, 2]\nsplit_layers = [1, 3]\nranks = 4\n",
        )
        .unwrap();
        let train = cfg.train_config(6).unwrap();
        assert_eq!(train.n_count, 500);
        assert_eq!(train.eloc_mode, ElocMode::Accurate);
        assert_eq!(train.plan.n_ranks(), 4);
        assert!(cfg.train_config(2).is_err());

        let wrong_world: RunConfig = toml::from_str(
            "[cluster]\ngroup_sizes = [2, 2]\nsplit_layers = [1, 3]\nranks = 6\n",
        )
        .unwrap();
        let err = wrong_world.train_config(6).unwrap_err();
        assert!(err.contains("cluster.ranks"), "{err}");
    }

    #[test]
    fn presets_build_shapes() {
        let cfg: RunConfig =
            toml::from_str("[ansatz]\npreset = \"toy\"\nd_model = 8\nn_head = 4\n").unwrap();
        let shape = cfg.ansatz_config(5).unwrap();
        assert_eq!(shape.d_model, 8);
        assert_eq!(shape.max_sequence, 6);
        let bad: RunConfig = toml::from_str("[ansatz]\npreset = \"huge\"\n").unwrap();
        assert!(bad.ansatz_config(5).is_err());
    }

    #[test]
    fn zero_chunk_resolves_to_the_reachable_breadth() {
        assert_eq!(resolve_chunk(64, 1000, 2, 1, 1), 64);
        assert_eq!(resolve_chunk(0, 1000, 2, 1, 1), 4);
        assert_eq!(resolve_chunk(0, 3, 2, 1, 1), 3);
        assert_eq!(resolve_chunk(0, u64::MAX, 40, 20, 20), 1 << 22);
    }
}
