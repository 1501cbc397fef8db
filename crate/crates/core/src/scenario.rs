//! Run descriptions, as read from JSON scenario files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelDistribution;
use crate::learner::{HyperParams, Strategy};
use crate::linktime::{ComputeProfile, LinkProfile};
use crate::mobility::MobilityConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Controlled,
    Mobility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub strategy: Strategy,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default = "LinkProfile::simulation_default")]
    pub link: LinkProfile,
    #[serde(default = "ComputeProfile::mnist")]
    pub compute: ComputeProfile,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled: Option<ControlledSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobility: Option<MobilitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs; train and test are split from one pool.
    Synthetic {
        num_labels: usize,
        per_label: usize,
        input_dim: usize,
        spread: f64,
        test_per_label: usize,
    },
    /// IDX image/label files, relative to the data root.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn num_labels(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { num_labels, .. } => *num_labels,
            DatasetSpec::Idx { .. } => 10,
        }
    }

    /// Data files this spec reads, resolved against `root`.
    pub fn files(&self, root: &Path) -> Vec<PathBuf> {
        match self {
            DatasetSpec::Synthetic { .. } => Vec::new(),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => [train_images, train_labels, test_images, test_labels]
                .into_iter()
                .map(|p| root.join(p))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_dims: vec![200, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSpec {
    /// Share of the training pool reserved for the bootstrap model.
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec {
            fraction: 0.02,
            epochs: 100,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub test_size: usize,
    /// Simulated seconds between mobility checkpoints.
    pub interval_s: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            test_size: 500,
            interval_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub encounters: usize,
    /// Share of the phase's encounters with the fixed label set.
    pub fixed_fraction: f64,
    pub fixed_labels: Vec<usize>,
    /// Size of the random label set used by the other encounters.
    pub random_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlledSpec {
    pub local_labels: Vec<usize>,
    pub local_size: usize,
    pub goal_labels: Vec<usize>,
    pub neighbor_size: usize,
    pub phases: Vec<Phase>,
}

impl Default for ControlledSpec {
    fn default() -> Self {
        ControlledSpec {
            local_labels: vec![0, 1],
            local_size: 80,
            goal_labels: vec![0, 1, 2, 3, 4],
            neighbor_size: 80,
            phases: default_phases(100),
        }
    }
}

/// The three drifting phases, `per_phase` encounters each.
pub fn default_phases(per_phase: usize) -> Vec<Phase> {
    [vec![2, 3], vec![3, 4, 5], vec![4, 5, 6]]
        .into_iter()
        .map(|fixed_labels| Phase {
            encounters: per_phase,
            fixed_fraction: 0.5,
            fixed_labels,
            random_labels: 3,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySpec {
    pub walk: MobilityConfig,
    pub local_size: usize,
    /// Labels added to each device's goal beyond its region's own.
    pub extra_goal_labels: usize,
}

impl Default for MobilitySpec {
    fn default() -> Self {
        MobilitySpec {
            walk: MobilityConfig {
                episodes: 2,
                ..MobilityConfig::default()
            },
            local_size: 80,
            extra_goal_labels: 3,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> serde_json::Result<Scenario> {
        serde_json::from_str(text)
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::param(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.hyper.validate()?;
        self.link.validate()?;
        self.compute.validate()?;
        let n = self.dataset.num_labels();
        if n < 2 {
            return Err(Error::param("dataset needs at least two labels"));
        }
        if let DatasetSpec::Synthetic {
            per_label,
            input_dim,
            spread,
            test_per_label,
            ..
        } = &self.dataset
        {
            if *input_dim == 0 || *test_per_label == 0 || test_per_label >= per_label {
                return Err(Error::param(
                    "synthetic dataset needs input_dim >= 1 and 0 < test_per_label < per_label",
                ));
            }
            if !(*spread >= 0.0) {
                return Err(Error::param("synthetic spread must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.bootstrap.fraction) || self.bootstrap.fraction == 0.0 {
            return Err(Error::param("bootstrap fraction must lie in (0, 1)"));
        }
        if !(self.bootstrap.learning_rate > 0.0) {
            return Err(Error::param("bootstrap learning rate must be positive"));
        }
        if self.eval.test_size == 0 || !(self.eval.interval_s > 0.0) {
            return Err(Error::param("eval needs a positive test size and interval"));
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::param("hidden layers need at least one unit"));
        }
        match self.kind {
            ScenarioKind::Controlled => {
                let c = self.controlled.as_ref().ok_or_else(|| {
                    Error::param("controlled scenario needs a 'controlled' section")
                })?;
                LabelDistribution::uniform_over(&c.local_labels, n)?;
                LabelDistribution::uniform_over(&c.goal_labels, n)?;
                if c.local_size == 0 || c.neighbor_size == 0 {
                    return Err(Error::param("local and neighbor sizes must be at least 1"));
                }
                if c.phases.is_empty() {
                    return Err(Error::param("schedule needs at least one phase"));
                }
                for p in &c.phases {
                    LabelDistribution::uniform_over(&p.fixed_labels, n)?;
                    if p.random_labels == 0
                        || p.random_labels > n
                        || !(0.0..=1.0).contains(&p.fixed_fraction)
                    {
                        return Err(Error::param(
                            "phase needs 1..=num_labels random labels and a fraction in [0, 1]",
                        ));
                    }
                }
            }
            ScenarioKind::Mobility => {
                let m = self
                    .mobility
                    .as_ref()
                    .ok_or_else(|| Error::param("mobility scenario needs a 'mobility' section"))?;
                m.walk.validate()?;
                if m.local_size == 0 {
                    return Err(Error::param("local size must be at least 1"));
                }
                if m.extra_goal_labels + 2 > n {
                    return Err(Error::param(
                        "too many extra goal labels for the label space",
                    ));
                }
            }
        }
        Ok(())
    }
}
