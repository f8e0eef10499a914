//! Experiment configuration files (TOML). Every table rejects unknown keys
//! and every random stream takes an explicit seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetKind, ElementType};
use crate::error::{Error, Result};
use crate::flow::{ModelConfig, PartitionMode, DEFAULT_BLOCKS, DEFAULT_SCALE_BOUND};
use crate::gp::{GaussianProcessSpec, TruncationBounds};
use crate::grid::{Grid, IndexSet};
use crate::regression::{MapConfig, SgldConfig, DEFAULT_NOISE_VARIANCE};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub resolution: Vec<usize>,
}

impl GridSection {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.resolution.len(), &self.resolution).map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DatasetKind,
    pub gp: GaussianProcessSpec,
    #[serde(default)]
    pub bounds: Option<TruncationBounds>,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub element_type: ElementType,
    /// Shuffle and pair single-channel samples into two channels.
    #[serde(default)]
    pub pair_channels: bool,
    #[serde(default)]
    pub pairing_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub partition: PartitionMode,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_scale_bound")]
    pub scale_bound: f64,
    #[serde(default)]
    pub latent_jitter: Option<f64>,
    pub seed: u64,
}

fn default_blocks() -> usize {
    DEFAULT_BLOCKS
}
fn default_width() -> usize {
    32
}
fn default_depth() -> usize {
    3
}
fn default_scale_bound() -> f64 {
    DEFAULT_SCALE_BOUND
}

/// How observation nodes are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObservationRule {
    /// `count` distinct nodes drawn uniformly with `seed`.
    Random { count: usize, seed: u64 },
    /// Explicit node indices (e.g. strips).
    Indices { indices: Vec<usize> },
}

impl ObservationRule {
    pub fn select(&self, grid: &Grid) -> Result<IndexSet> {
        match self {
            ObservationRule::Random { count, seed } => {
                use rand::SeedableRng;
                let n = grid.node_count();
                if *count > n {
                    return Err(Error::Config(format!("cannot observe {count} of {n} nodes")));
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let idx = rand::seq::index::sample(&mut rng, n, *count).into_vec();
                IndexSet::from_unsorted(grid, idx)
            }
            ObservationRule::Indices { indices } => IndexSet::from_unsorted(grid, indices.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    pub sgld: SgldConfig,
    #[serde(default)]
    pub map: MapConfig,
    /// Independent chains pooled after burn-in.
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Used when no observation file is given: observe a fresh draw from the
    /// data process (seeded by `truth_seed`) at these nodes.
    #[serde(default)]
    pub observations: Option<ObservationRule>,
    #[serde(default)]
    pub truth_seed: Option<u64>,
    /// Channels observed in multi-channel models.
    #[serde(default = "default_obs_channels")]
    pub observed_channels: Vec<usize>,
    /// Quantile levels written with the summary.
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_VARIANCE
}
fn default_chains() -> usize {
    1
}
fn default_obs_channels() -> Vec<usize> {
    vec![0]
}
fn default_quantiles() -> Vec<f64> {
    vec![0.025, 0.5, 0.975]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub histogram_range: Option<(f64, f64)>,
}

fn default_max_lag() -> usize {
    32
}
fn default_bins() -> usize {
    40
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            max_lag: default_max_lag(),
            bins: default_bins(),
            histogram_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub latent: Option<GaussianProcessSpec>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub regression: Option<RegressionSection>,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn missing(section: &str) -> Error {
    Error::Config(format!("missing [{section}] section"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.grid()?;
        if let Some(d) = &self.data {
            if d.kind.dims() != grid.dims() {
                return Err(Error::Config(format!(
                    "data.kind {:?} needs a {}-dimensional grid",
                    d.kind,
                    d.kind.dims()
                )));
            }
            if d.kind.truncated() != d.bounds.is_some() {
                return Err(Error::Config("data.bounds must be given exactly for truncated kinds".into()));
            }
            d.gp.validate().map_err(|e| Error::Config(format!("data.gp: {e}")))?;
            if let Some(b) = d.bounds {
                TruncationBounds::new(b.lower, b.upper).map_err(|e| Error::Config(format!("data.bounds: {e}")))?;
            }
            if d.pair_channels && d.pairing_seed.is_none() {
                return Err(Error::Config("data.pairing_seed is required with pair_channels".into()));
            }
        }
        if let Some(l) = &self.latent {
            l.validate().map_err(|e| Error::Config(format!("latent: {e}")))?;
        }
        if self.model.is_some() {
            self.model_config()?.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(r) = &self.regression {
            r.sgld.validate()?;
            if !(r.noise_variance > 0.0) {
                return Err(Error::Config("regression.noise_variance must be positive".into()));
            }
            if r.chains == 0 {
                return Err(Error::Config("regression.chains must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSection> {
        self.data.as_ref().ok_or_else(|| missing("data"))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| missing("train"))
    }

    pub fn regression(&self) -> Result<&RegressionSection> {
        self.regression.as_ref().ok_or_else(|| missing("regression"))
    }

    /// Channels of the data the model sees (2 after channel pairing).
    pub fn data_channels(&self) -> usize {
        match &self.data {
            Some(d) if d.pair_channels => 2,
            _ => 1,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = self.model.as_ref().ok_or_else(|| missing("model"))?;
        let latent = self.latent.ok_or_else(|| missing("latent"))?;
        let dims = self.grid.resolution.len();
        let base = ModelConfig::new(dims, self.data_channels(), m.partition, latent);
        Ok(ModelConfig {
            blocks: m.blocks,
            modes: m.modes.unwrap_or(base.modes),
            width: m.width,
            depth: m.depth,
            scale_bound: m.scale_bound,
            latent_jitter: m.latent_jitter,
            ..base
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[grid]
resolution = [64]

[data]
kind = "gp"
gp = { length_scale = 0.5, nu = 1.5 }
count = 100
seed = 1

[latent]
length_scale = 0.1
nu = 0.5

[model]
partition = "domain"
blocks = 4
modes = 8
width = 16
depth = 2
seed = 3

[train]
batch_size = 16
warmup_iterations = 30
finetune_iterations = 20
lr_warmup = 1e-3
lr_finetune = 5e-4
seed = 4

[regression]
sgld = { total_iterations = 1000, burn_in = 100, thinning = 10, step_initial = 5e-3, step_final = 4e-3, seed = 5 }
observations = { rule = "random", count = 6, seed = 6 }
truth_seed = 7
"#;

    #[test]
    fn parses_a_full_config() {
        let c = ExperimentConfig::parse(FULL).unwrap();
        let m = c.model_config().unwrap();
        assert_eq!((m.blocks, m.modes, m.width, m.depth), (4, 8, 16, 2));
        assert_eq!(c.train().unwrap().lambda, 1.0);
        assert_eq!(c.regression().unwrap().noise_variance, 0.01);
        let pts = c.regression().unwrap().observations.as_ref().unwrap().select(&c.grid.grid().unwrap()).unwrap();
        assert_eq!(pts.len(), 6);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::parse(&FULL.replace("kind = \"gp\"", "kind = \"gpx\"")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("kind"), "{err}");
        let err = ExperimentConfig::parse(&FULL.replace("count = 100", "count = 100\ncolour = 3")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        assert!(ExperimentConfig::parse(&FULL.replace("nu = 1.5", "nu = 1.7")).is_err());
        assert!(ExperimentConfig::parse(&FULL.replace("resolution = [64]", "resolution = [64, 64]")).is_err());
        assert!(ExperimentConfig::parse(&FULL.replace("seed = 4\n", "")).is_err());
    }

    #[test]
    fn explicit_indices_rule() {
        let text = FULL.replace(
            "observations = { rule = \"random\", count = 6, seed = 6 }",
            "observations = { rule = \"indices\", indices = [5, 1, 9] }",
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        let pts = c.regression().unwrap().observations.as_ref().unwrap().select(&c.grid.grid().unwrap()).unwrap();
        assert_eq!(pts.indices(), &[1, 5, 9]);
    }
}
