//! Per-device learning state and the encounter session protocol.
//!
//! A learner that meets a neighbor first decides whether to engage
//! ([`Strategy::should_engage`]). An engaged session runs `rho` rounds: the
//! neighbor computes a gradient of the learner's working model on its own
//! data, the learner files that gradient in its [`GradientTable`] under the
//! neighbor's label set, aggregates it with a gradient on its own data and
//! takes one step. The working model is committed only when every round
//! succeeded.
//!
//! Step sizes shrink with the model's drift from its bootstrap weights
//! ([`DecayState`]), and the shrink factor never recovers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{label_set_of, similarity, weight, LabelDistribution, LabelSet};
use crate::nn::{
    apply_step, l2_distance, loss_and_gradient, GradientVector, LabeledBatch, MlpArchitecture,
    ParameterVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Local,
    PairwiseFedAvg,
    GreedyNoSim,
    GreedySim,
    OpportunisticMomentum,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Local,
        Strategy::PairwiseFedAvg,
        Strategy::GreedyNoSim,
        Strategy::GreedySim,
        Strategy::OpportunisticMomentum,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Local => "local",
            Strategy::PairwiseFedAvg => "pairwise-fed-avg",
            Strategy::GreedyNoSim => "greedy-no-sim",
            Strategy::GreedySim => "greedy-sim",
            Strategy::OpportunisticMomentum => "opportunistic-momentum",
        }
    }

    /// Whether a learner with `goal` asks a neighbor holding `neighbor` for help.
    pub fn should_engage(
        &self,
        goal: &LabelDistribution,
        neighbor: &LabelDistribution,
        tau: f64,
    ) -> Result<bool> {
        Ok(match self {
            Strategy::Local => false,
            Strategy::PairwiseFedAvg | Strategy::GreedyNoSim => true,
            Strategy::GreedySim | Strategy::OpportunisticMomentum => {
                similarity(goal, neighbor)? > tau
            }
        })
    }

    /// Only the momentum rule iterates the gradient table when aggregating.
    pub fn charges_aggregation(&self) -> bool {
        matches!(self, Strategy::OpportunisticMomentum)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Base learning rate.
    pub eta: f64,
    /// Sharpness of the similarity weights.
    pub lambda: f64,
    /// Slope of the decay sigmoid.
    pub kappa: f64,
    /// Drift at which the decay sigmoid crosses one half.
    pub phi: f64,
    /// Similarity threshold for engaging.
    pub tau: f64,
    /// Rounds per session (upper bound when time-limited).
    pub rho: u32,
    /// Drop table keys strictly contained in a newly stored key.
    pub subsumption: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta: 0.05,
            lambda: 1.0,
            kappa: 2.0,
            phi: 1.0,
            tau: 0.2,
            rho: 6,
            subsumption: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::param(format!(
                "eta must be non-negative, got {}",
                self.eta
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("kappa", self.kappa),
            ("phi", self.phi),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.rho == 0 {
            return Err(Error::param("rho must be at least 1"));
        }
        Ok(())
    }
}

/// One table slot: the latest gradient learned on a label set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEntry {
    pub gradient: GradientVector,
    /// Distribution of the data the gradient was computed on.
    pub distribution: LabelDistribution,
    pub weight_cache: f64,
    pub last_updated: u64,
}

/// Label set -> most recent gradient. Iteration order is the key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientTable {
    entries: BTreeMap<LabelSet, GradientEntry>,
    subsumption: bool,
}

impl GradientTable {
    pub fn new(subsumption: bool) -> Self {
        GradientTable {
            entries: BTreeMap::new(),
            subsumption,
        }
    }

    /// Inserts or replaces the entry for `key`.
    pub fn store(&mut self, key: LabelSet, entry: GradientEntry) {
        if self.subsumption {
            self.entries.retain(|k, _| !k.is_strict_subset_of(&key));
        }
        self.entries.insert(key, entry);
    }

    pub fn get(&self, key: &LabelSet) -> Option<&GradientEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &LabelSet) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabelSet, &GradientEntry)> {
        self.entries.iter()
    }
}

/// Weighted mean of the local and the neighbor gradient.
pub fn greedy_aggregate(
    local: &GradientVector,
    neighbor: &GradientVector,
    w_local: f64,
    w_neighbor: f64,
) -> Result<GradientVector> {
    Error::check_len(local.len(), neighbor.len())?;
    if !(w_local > 0.0) || !(w_neighbor > 0.0) {
        return Err(Error::param("aggregation weights must be positive"));
    }
    let total = w_local + w_neighbor;
    GradientVector::new(
        local
            .as_slice()
            .iter()
            .zip(neighbor.as_slice())
            .map(|(l, n)| (w_local * l + w_neighbor * n) / total)
            .collect(),
    )
}

/// Weighted mean of the local gradient and every table gradient, each table
/// entry weighted by the similarity of its data to `goal`.
pub fn momentum_aggregate(
    local: &GradientVector,
    w_local: f64,
    table: &GradientTable,
    goal: &LabelDistribution,
    lambda: f64,
) -> Result<GradientVector> {
    if !(w_local > 0.0) {
        return Err(Error::param("local aggregation weight must be positive"));
    }
    let mut acc: Vec<f64> = local.as_slice().iter().map(|g| w_local * g).collect();
    let mut total = w_local;
    for (_, entry) in table.iter() {
        Error::check_len(acc.len(), entry.gradient.len())?;
        let w = weight(&entry.distribution, goal, lambda)?;
        for (a, g) in acc.iter_mut().zip(entry.gradient.as_slice()) {
            *a += w * g;
        }
        total += w;
    }
    if table.is_empty() {
        return Ok(local.clone());
    }
    GradientVector::new(acc.into_iter().map(|a| a / total).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Running-minimum sigmoid decay of the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayState {
    pub w0: ParameterVector,
    pub running_min_alpha: f64,
    pub kappa: f64,
    pub phi: f64,
}

impl DecayState {
    pub fn new(w0: ParameterVector, kappa: f64, phi: f64) -> Self {
        DecayState {
            w0,
            running_min_alpha: 1.0,
            kappa,
            phi,
        }
    }

    /// Sigmoid of `kappa * (phi - |w0 - w|)` before taking the minimum.
    pub fn raw_factor(&self, model: &ParameterVector) -> Result<f64> {
        let drift = l2_distance(&self.w0, model)?;
        Ok(sigmoid(self.kappa * (self.phi - drift)))
    }

    /// Current decay factor; also lowers the running minimum.
    pub fn factor(&mut self, model: &ParameterVector) -> Result<f64> {
        let alpha = self.raw_factor(model)?.min(self.running_min_alpha);
        self.running_min_alpha = alpha;
        Ok(alpha)
    }
}

/// Everything one device knows about itself.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub arch: MlpArchitecture,
    pub model: ParameterVector,
    pub clock: u64,
    pub local_data: LabeledBatch,
    pub data_dist: LabelDistribution,
    pub goal: LabelDistribution,
    pub gamma: GradientTable,
    pub decay: DecayState,
    pub strategy: Strategy,
    pub hyper: HyperParams,
}

impl DeviceState {
    /// A device starting from the shared bootstrap model.
    pub fn new(
        id: usize,
        arch: MlpArchitecture,
        bootstrap: ParameterVector,
        local_data: LabeledBatch,
        goal: LabelDistribution,
        strategy: Strategy,
        hyper: HyperParams,
    ) -> Result<Self> {
        Error::check_len(arch.param_count(), bootstrap.len())?;
        let data_dist = LabelDistribution::empirical(local_data.labels(), goal.num_labels())?;
        Ok(DeviceState {
            id,
            model: bootstrap.clone(),
            clock: 0,
            local_data,
            data_dist,
            goal,
            gamma: GradientTable::new(hyper.subsumption),
            decay: DecayState::new(bootstrap, hyper.kappa, hyper.phi),
            strategy,
            hyper,
            arch,
        })
    }

    pub fn label_set(&self) -> LabelSet {
        label_set_of(&self.data_dist)
    }

    /// One full-batch step on local data. Returns `(alpha, loss before the step)`.
    pub fn run_local_round(&mut self) -> Result<(f64, f64)> {
        let (loss, grad) = loss_and_gradient(&self.model, &self.arch, &self.local_data)?;
        let mut decay = self.decay.clone();
        let alpha = decay.factor(&self.model)?;
        self.model = apply_step(&self.model, &grad, self.hyper.eta * alpha)?;
        self.decay = decay;
        self.clock += 1;
        Ok((alpha, loss))
    }

    /// Runs `rho` remote-training rounds with a neighbor and commits the
    /// result. On error nothing about the learner changes.
    pub fn run_session(
        &mut self,
        neighbor_id: usize,
        neighbor_data: &LabeledBatch,
        neighbor_dist: &LabelDistribution,
        rho: u32,
    ) -> Result<SessionReport> {
        if rho == 0 {
            return Err(Error::param("a session needs at least one round"));
        }
        let greedy = match self.strategy {
            Strategy::GreedyNoSim | Strategy::GreedySim => true,
            Strategy::OpportunisticMomentum => false,
            other => {
                return Err(Error::param(format!(
                    "strategy {other} does not run remote sessions"
                )))
            }
        };
        let lambda = self.hyper.lambda;
        let key = label_set_of(neighbor_dist);
        let sim = similarity(&self.goal, neighbor_dist)?;
        let w_neighbor = weight(neighbor_dist, &self.goal, lambda)?;
        let w_local = weight(&self.data_dist, &self.goal, lambda)?;

        let mut working = self.model.clone();
        let mut gamma = self.gamma.clone();
        let mut decay = self.decay.clone();
        let mut clock = self.clock;
        let mut alphas = Vec::with_capacity(rho as usize);
        let mut loss_trace = Vec::with_capacity(rho as usize);

        for _ in 0..rho {
            let (remote, local) = rayon::join(
                || loss_and_gradient(&working, &self.arch, neighbor_data),
                || loss_and_gradient(&working, &self.arch, &self.local_data),
            );
            let (_, remote_grad) = remote?;
            let (local_loss, local_grad) = local?;
            gamma.store(
                key.clone(),
                GradientEntry {
                    gradient: remote_grad.clone(),
                    distribution: neighbor_dist.clone(),
                    weight_cache: w_neighbor,
                    last_updated: clock,
                },
            );
            let update = if greedy {
                greedy_aggregate(&local_grad, &remote_grad, 0.5, 0.5)?
            } else {
                momentum_aggregate(&local_grad, w_local, &gamma, &self.goal, lambda)?
            };
            let alpha = decay.factor(&working)?;
            working = apply_step(&working, &update, self.hyper.eta * alpha)?;
            clock += 1;
            alphas.push(alpha);
            loss_trace.push(local_loss);
        }

        self.model = working;
        self.gamma = gamma;
        self.decay = decay;
        self.clock = clock;
        Ok(SessionReport {
            learner_id: self.id,
            neighbor_id,
            strategy: self.strategy,
            rounds: rho,
            similarity: sim,
            alphas,
            loss_trace,
            bytes_sent: session_bytes(&self.arch, rho),
        })
    }
}

/// Model out and gradient back, once per round.
pub fn session_bytes(arch: &MlpArchitecture, rounds: u32) -> u64 {
    2 * rounds as u64 * arch.serialized_size_bytes()
}

/// Pairwise federated averaging starting from the mean of both models.
///
/// Each round both sides take one local step from the shared model and the
/// shared model becomes the mean of the two results. Both devices adopt the
/// final shared model.
pub fn pairwise_fed_avg_session(
    a: &mut DeviceState,
    b: &mut DeviceState,
    rounds: u32,
) -> Result<SessionReport> {
    Error::check_len(a.model.len(), b.model.len())?;
    if a.arch != b.arch {
        return Err(Error::Dimension {
            expected: a.arch.param_count(),
            got: b.arch.param_count(),
        });
    }
    let sim = similarity(&a.goal, &b.data_dist)?;
    let mut shared = a.model.mean(&b.model)?;
    let mut decay_a = a.decay.clone();
    let mut decay_b = b.decay.clone();
    let mut alphas = Vec::with_capacity(rounds as usize);
    let mut loss_trace = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let (ra, rb) = rayon::join(
            || loss_and_gradient(&shared, &a.arch, &a.local_data),
            || loss_and_gradient(&shared, &b.arch, &b.local_data),
        );
        let (loss_a, grad_a) = ra?;
        let (_, grad_b) = rb?;
        let alpha_a = decay_a.factor(&shared)?;
        let alpha_b = decay_b.factor(&shared)?;
        let next_a = apply_step(&shared, &grad_a, a.hyper.eta * alpha_a)?;
        let next_b = apply_step(&shared, &grad_b, b.hyper.eta * alpha_b)?;
        shared = next_a.mean(&next_b)?;
        alphas.push(alpha_a);
        loss_trace.push(loss_a);
    }
    a.model = shared.clone();
    b.model = shared;
    a.decay = decay_a;
    b.decay = decay_b;
    a.clock += rounds as u64;
    b.clock += rounds as u64;
    Ok(SessionReport {
        learner_id: a.id,
        neighbor_id: b.id,
        strategy: Strategy::PairwiseFedAvg,
        rounds,
        similarity: sim,
        alphas,
        loss_trace,
        bytes_sent: session_bytes(&a.arch, rounds),
    })
}

/// What one session did, as logged per session.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionReport {
    pub learner_id: usize,
    pub neighbor_id: usize,
    pub strategy: Strategy,
    pub rounds: u32,
    pub similarity: f64,
    pub alphas: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub bytes_sent: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_parameters};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn uni(labels: &[usize]) -> LabelDistribution {
        LabelDistribution::uniform_over(labels, 10).unwrap()
    }

    fn grad(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec()).unwrap()
    }

    fn entry(v: &[f64], dist: LabelDistribution) -> GradientEntry {
        GradientEntry {
            gradient: grad(v),
            distribution: dist,
            weight_cache: 1.0,
            last_updated: 0,
        }
    }

    fn key(labels: &[usize]) -> LabelSet {
        LabelSet::new(labels.to_vec(), 10).unwrap()
    }

    fn batch_for(labels: &[usize], n: usize, dim: usize, seed: u64) -> LabeledBatch {
        let mut rng = rng_from_seed(seed);
        let ls: Vec<usize> = (0..n).map(|i| labels[i % labels.len()]).collect();
        let inputs = ls
            .iter()
            .flat_map(|&l| {
                let base = l as f32 / 10.0;
                (0..dim)
                    .map(move |j| base * (j as f32 % 3.0) / 2.0)
                    .collect::<Vec<_>>()
            })
            .map(|v| (v + rng.random_range(0.0..0.05f32)).clamp(0.0, 1.0))
            .collect();
        LabeledBatch::new(dim, inputs, ls).unwrap()
    }

    fn device(strategy: Strategy, hyper: HyperParams, seed: u64) -> DeviceState {
        let arch = MlpArchitecture::new(6, vec![8], 10).unwrap();
        let params = init_parameters(&arch, seed);
        DeviceState::new(
            0,
            arch,
            params,
            batch_for(&[0, 1], 20, 6, seed),
            uni(&[0, 1, 2, 3, 4]),
            strategy,
            hyper,
        )
        .unwrap()
    }

    #[test]
    fn engagement_gate() {
        let goal = uni(&[0, 1, 2, 3, 4]);
        // sim({0..4}, {4,5,6}) = 0.2, not strictly above tau.
        assert!(!Strategy::GreedySim
            .should_engage(&goal, &uni(&[4, 5, 6]), 0.2)
            .unwrap());
        assert!(Strategy::GreedySim
            .should_engage(&goal, &uni(&[2, 3]), 0.2)
            .unwrap());
        assert!(Strategy::GreedyNoSim
            .should_engage(&goal, &uni(&[7, 8]), 0.2)
            .unwrap());
        assert!(!Strategy::Local.should_engage(&goal, &goal, 0.2).unwrap());
        assert!(Strategy::PairwiseFedAvg
            .should_engage(&goal, &uni(&[9]), 0.2)
            .unwrap());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    #[test]
    fn greedy_examples() {
        let a = grad(&[1.0, -3.0, 0.25]);
        let b = grad(&[5.0, 2.0, -0.75]);
        let mean: Vec<f64> = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x + y) / 2.0)
            .collect();
        assert_eq!(
            greedy_aggregate(&a, &b, 0.5, 0.5).unwrap().as_slice(),
            mean.as_slice()
        );
        let same = greedy_aggregate(&a, &a, 0.3, 2.0).unwrap();
        for (x, y) in same.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
        assert_eq!(
            greedy_aggregate(&grad(&[1.0, 0.0]), &grad(&[0.0, 1.0]), 1.0, 3.0)
                .unwrap()
                .as_slice(),
            &[0.25, 0.75]
        );
        assert!(greedy_aggregate(&a, &grad(&[1.0]), 0.5, 0.5).is_err());
    }

    #[test]
    fn momentum_examples() {
        let goal = uni(&[0, 1, 2, 3, 4]);
        let local = grad(&[1.0, 1.0]);
        assert_eq!(
            momentum_aggregate(&local, 0.7, &GradientTable::new(false), &goal, 1.0).unwrap(),
            local
        );

        // Two entries with weight one (data identical to the goal).
        let mut table = GradientTable::new(false);
        table.store(key(&[0, 1, 2, 3, 4]), entry(&[1.0, 0.0], goal.clone()));
        let other =
            LabelDistribution::from_counts(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
                .unwrap();
        table.store(key(&[0, 1, 2, 3]), entry(&[0.0, 1.0], uni(&[0, 1, 2, 3])));
        // Second key has sim 0.8, so replace it with a goal-identical one for unit weight.
        table.store(key(&[0, 1, 2, 3]), entry(&[0.0, 1.0], other));
        let out = momentum_aggregate(&local, 1.0, &table, &goal, 1.0).unwrap();
        for v in out.as_slice() {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_reduces_to_greedy_with_one_entry() {
        let goal = uni(&[0, 1, 2, 3, 4]);
        let neighbor = uni(&[3, 4, 5]);
        let w_n = weight(&neighbor, &goal, 1.3).unwrap();
        let local = grad(&[0.3, -1.2, 4.0]);
        let remote = grad(&[-2.0, 0.5, 1.0]);
        let mut table = GradientTable::new(false);
        table.store(key(&[3, 4, 5]), entry(remote.as_slice(), neighbor));
        let m = momentum_aggregate(&local, 0.4, &table, &goal, 1.3).unwrap();
        let g = greedy_aggregate(&local, &remote, 0.4, w_n).unwrap();
        for (a, b) in m.as_slice().iter().zip(g.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn table_replacement_and_subsumption() {
        let mut t = GradientTable::new(false);
        t.store(key(&[0, 1]), entry(&[1.0], uni(&[0, 1])));
        t.store(key(&[0, 1]), entry(&[2.0], uni(&[0, 1])));
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&key(&[0, 1])).unwrap().gradient.as_slice(), &[2.0]);
        t.store(key(&[5]), entry(&[3.0], uni(&[5])));
        assert_eq!(t.len(), 2);

        let mut s = GradientTable::new(true);
        s.store(key(&[0, 1]), entry(&[1.0], uni(&[0, 1])));
        s.store(key(&[0, 1, 2]), entry(&[1.0], uni(&[0, 1, 2])));
        assert_eq!(s.len(), 1);
        assert!(s.contains(&key(&[0, 1, 2])));
    }

    #[test]
    fn decay_at_bootstrap_matches_sigmoid() {
        let w0 = ParameterVector::new(vec![0.5, -0.5]).unwrap();
        let mut d = DecayState::new(w0.clone(), 2.0, 1.0);
        let expected = 2.0f64.exp() / (2.0f64.exp() + 1.0);
        assert!((d.factor(&w0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.880_797).abs() < 1e-6);
    }

    #[test]
    fn decay_is_running_minimum() {
        let w0 = ParameterVector::new(vec![0.0]).unwrap();
        let mut d = DecayState::new(w0, 2.0, 1.0);
        let mut prev = 1.0;
        for x in [0.5, 2.0, 0.0, 1.0, 3.0, 0.1] {
            let a = d.factor(&ParameterVector::new(vec![x]).unwrap()).unwrap();
            assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn decay_far_from_bootstrap_underflows_cleanly() {
        let w0 = ParameterVector::new(vec![0.0]).unwrap();
        let mut d = DecayState::new(w0, 1.0, 1.0);
        let a = d.factor(&ParameterVector::new(vec![1e6]).unwrap()).unwrap();
        assert_eq!(a, 0.0);
        assert!(sigmoid(-1e6) == 0.0 && sigmoid(1e6) == 1.0);
    }

    #[test]
    fn session_on_own_data_is_a_local_step() {
        let mut a = device(Strategy::GreedyNoSim, HyperParams::default(), 3);
        let mut b = a.clone();
        let data = a.local_data.clone();
        let dist = a.data_dist.clone();
        a.run_session(1, &data, &dist, 1).unwrap();
        b.run_local_round().unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.clock, 1);
    }

    #[test]
    fn failed_session_leaves_learner_untouched() {
        let mut a = device(Strategy::OpportunisticMomentum, HyperParams::default(), 4);
        let before = a.model.clone();
        let bad = LabeledBatch::new(5, vec![0.1; 10], vec![2, 3]).unwrap();
        assert!(a.run_session(1, &bad, &uni(&[2, 3]), 3).is_err());
        assert_eq!(a.model, before);
        assert_eq!(a.clock, 0);
        assert!(a.gamma.is_empty());
        assert_eq!(a.decay.running_min_alpha, 1.0);
    }

    #[test]
    fn session_records_rounds_and_table() {
        let mut a = device(Strategy::OpportunisticMomentum, HyperParams::default(), 5);
        let nb = batch_for(&[2, 3], 20, 6, 9);
        let report = a.run_session(7, &nb, &uni(&[2, 3]), 6).unwrap();
        assert_eq!(report.rounds, 6);
        assert_eq!(report.alphas.len(), 6);
        assert!(report.alphas.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.clock, 6);
        assert_eq!(a.gamma.len(), 1);
        assert_eq!(report.bytes_sent, 2 * 6 * a.arch.serialized_size_bytes());
        assert!((report.similarity - 0.4).abs() < 1e-12);
        let json = serde_json::to_value(&report).unwrap();
        for field in [
            "learnerId",
            "neighborId",
            "strategy",
            "rounds",
            "similarity",
            "alphas",
            "lossTrace",
            "bytesSent",
        ] {
            assert!(json.get(field).is_some(), "{field}");
        }
    }

    #[test]
    fn local_strategy_refuses_sessions() {
        let mut a = device(Strategy::Local, HyperParams::default(), 5);
        let nb = batch_for(&[2, 3], 4, 6, 9);
        assert!(a.run_session(1, &nb, &uni(&[2, 3]), 1).is_err());
    }

    #[test]
    fn local_rounds() {
        let hyper = HyperParams {
            eta: 0.0,
            ..HyperParams::default()
        };
        let mut a = device(Strategy::Local, hyper, 6);
        let before = a.model.clone();
        a.run_local_round().unwrap();
        assert_eq!(a.model, before);
        assert_eq!(a.clock, 1);

        let mut b = device(Strategy::Local, HyperParams::default(), 6);
        let mut prev_rate = f64::INFINITY;
        for _ in 0..20 {
            let (alpha, _) = b.run_local_round().unwrap();
            let rate = b.hyper.eta * alpha;
            assert!(rate <= prev_rate);
            prev_rate = rate;
        }
    }

    #[test]
    fn local_loss_falls_over_rounds_for_most_seeds() {
        let passes = (0..20u64)
            .filter(|&seed| {
                let mut d = device(Strategy::Local, HyperParams::default(), seed);
                let mut losses = Vec::new();
                for _ in 0..20 {
                    losses.push(d.run_local_round().unwrap().1);
                }
                losses.push(forward(&d.model, &d.arch, &d.local_data).unwrap().loss);
                losses.windows(2).all(|w| w[1] <= w[0] + 1e-12)
            })
            .count();
        assert!(passes >= 19, "{passes}/20");
    }

    #[test]
    fn fed_avg_examples() {
        let arch = MlpArchitecture::new(1, vec![], 1).unwrap();
        let data = LabeledBatch::new(1, vec![0.0], vec![0]).unwrap();
        let mk = |v: f32, id| {
            DeviceState::new(
                id,
                arch.clone(),
                ParameterVector::new(vec![v, 0.0]).unwrap(),
                data.clone(),
                LabelDistribution::point_mass(0, 1).unwrap(),
                Strategy::PairwiseFedAvg,
                HyperParams::default(),
            )
            .unwrap()
        };
        // One output class: softmax is constant, so gradients vanish.
        let (mut a, mut b) = (mk(2.0, 0), mk(4.0, 1));
        pairwise_fed_avg_session(&mut a, &mut b, 3).unwrap();
        assert_eq!(a.model.as_slice(), &[3.0, 0.0]);
        assert_eq!(b.model, a.model);

        let (mut a, mut b) = (mk(2.0, 0), mk(4.0, 1));
        pairwise_fed_avg_session(&mut a, &mut b, 0).unwrap();
        assert_eq!(a.model.as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn fed_avg_with_identical_twins_is_local_training() {
        let a0 = device(Strategy::PairwiseFedAvg, HyperParams::default(), 8);
        let (mut a, mut b, mut solo) = (a0.clone(), a0.clone(), a0);
        b.id = 1;
        pairwise_fed_avg_session(&mut a, &mut b, 4).unwrap();
        for _ in 0..4 {
            solo.run_local_round().unwrap();
        }
        assert_eq!(a.model, b.model);
        assert_eq!(a.model, solo.model);
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        assert!(HyperParams {
            rho: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            lambda: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HyperParams {
            tau: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
