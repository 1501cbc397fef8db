//! Grid search over the learning hyperparameters on a controlled run.

use oppfl::learner::HyperParams;
use oppfl::scenario::{Scenario, ScenarioKind, SCHEMA_VERSION};
use oppfl::sim::{run, RunOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub kappa: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            eta: vec![0.02, 0.05, 0.1],
            lambda: vec![0.5, 1.0, 2.0],
            kappa: vec![1.0, 2.0, 4.0],
            phi: vec![0.5, 1.0, 2.0],
        }
    }
}

impl Grid {
    /// All combinations, `eta` varying slowest.
    pub fn points(&self, base: &HyperParams) -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &eta in &self.eta {
            for &lambda in &self.lambda {
                for &kappa in &self.kappa {
                    for &phi in &self.phi {
                        out.push(HyperParams {
                            eta,
                            lambda,
                            kappa,
                            phi,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fragment {
    pub schema: u32,
    pub hyper: HyperParams,
}

#[derive(Debug, Clone)]
pub struct TunePoint {
    pub hyper: HyperParams,
    pub score: f64,
}

/// Mean goal accuracy over the last tenth of the run (at least one row).
pub fn tail_score(accuracies: &[f64]) -> f64 {
    let k = (accuracies.len() / 10).max(1).min(accuracies.len());
    accuracies[accuracies.len() - k..].iter().sum::<f64>() / k as f64
}

/// Scores every grid point; returns them with the index of the best (first
/// wins on ties).
pub fn tune(
    scenario: &Scenario,
    grid: &Grid,
    options: &RunOptions,
) -> Result<(Vec<TunePoint>, usize), CliError> {
    if scenario.kind != ScenarioKind::Controlled {
        return Err(CliError::Config("tune needs a controlled scenario".into()));
    }
    let points = grid.points(&scenario.hyper);
    if points.is_empty() {
        return Err(CliError::Config("tuning grid is empty".into()));
    }
    let mut scored = Vec::with_capacity(points.len());
    for hyper in points {
        let mut sc = scenario.clone();
        sc.hyper = hyper.clone();
        sc.validate()
            .map_err(|e| CliError::Config(format!("grid point: {e}")))?;
        let metrics = run(&sc, options).map_err(|e| CliError::Runtime(e.to_string()))?;
        let accs: Vec<f64> = metrics.rows.iter().map(|r| r.goal_accuracy).collect();
        scored.push(TunePoint {
            hyper,
            score: tail_score(&accs),
        });
    }
    let mut best = 0;
    for (i, p) in scored.iter().enumerate() {
        if p.score > scored[best].score {
            best = i;
        }
    }
    Ok((scored, best))
}

pub fn fragment(best: &HyperParams) -> Fragment {
    Fragment {
        schema: SCHEMA_VERSION,
        hyper: best.clone(),
    }
}
