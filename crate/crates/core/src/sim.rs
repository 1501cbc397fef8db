//! Whole-run orchestration: data, bootstrap model, devices, encounter stream,
//! sessions, evaluation and metrics.
//!
//! Two encounter sources exist. A controlled run walks one learner through a
//! fixed schedule of fresh neighbors. A mobility run derives encounters
//! between 45 devices from simulated Levy walks and evaluates every device at
//! regular checkpoints.
//!
//! Runs are deterministic in the seed and independent of the worker count:
//! work is only split where each result depends on one device's own state,
//! and results are always merged in encounter order.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{
    build_goal_test_set, load_idx, partition, synth_blobs, DataPool, DeviceSpec, GoalTestSet,
};
use crate::error::{Error, Result};
use crate::labels::{label_set_of, LabelDistribution};
use crate::learner::{pairwise_fed_avg_session, DeviceState, SessionReport, Strategy};
use crate::linktime::{encounter_time, feasible_rounds, t_send};
use crate::mobility::{contact_duration, detect_encounters, generate_trajectories, NUM_REGIONS};
use crate::nn::{
    accuracy, apply_step, forward, init_parameters, loss_and_gradient, LabeledBatch,
    MlpArchitecture, ParameterVector,
};
use crate::rng::{SeedTree, Stream};
use crate::scenario::{BootstrapSpec, DatasetSpec, Phase, Scenario, ScenarioKind};

pub const CSV_HEADER: &str =
    "sim_time_s,encounter_idx,device_id,strategy,goal_accuracy,alpha,gamma_size,bytes_sent,engaged";

/// Consecutive rises in held-out loss that end bootstrap training.
pub const PATIENCE: usize = 3;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub sim_time_s: f64,
    pub encounter_idx: usize,
    pub device_id: usize,
    pub strategy: Strategy,
    pub goal_accuracy: f64,
    pub alpha: f64,
    pub gamma_size: usize,
    pub bytes_sent: u64,
    pub engaged: bool,
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.sim_time_s,
            self.encounter_idx,
            self.device_id,
            self.strategy,
            self.goal_accuracy,
            self.alpha,
            self.gamma_size,
            self.bytes_sent,
            self.engaged
        )
    }
}

/// A session together with where it happened in the encounter stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionLogEntry {
    pub encounter_idx: usize,
    pub sim_time_s: f64,
    #[serde(flatten)]
    pub report: SessionReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    pub sessions: Vec<SessionLogEntry>,
    /// Accuracy of the bootstrap model on its own held-out slice.
    pub bootstrap_accuracy: f64,
    /// Behaviors worth recording next to the results.
    pub notes: Vec<String>,
}

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(out, "{}", row.to_csv_line())?;
        }
        Ok(())
    }

    pub fn write_sessions_jsonl<W: Write>(&self, out: &mut W) -> Result<()> {
        for s in &self.sessions {
            let line = serde_json::to_string(s).map_err(|e| Error::param(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_sent).sum()
    }

    /// Rows of one device, in time order.
    pub fn device_rows(&self, device: usize) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.device_id == device)
    }
}

/// Runtime knobs that do not change results.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Base directory for dataset files.
    pub data_root: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            data_root: PathBuf::from("."),
        }
    }
}

/// Train and test pools for a scenario.
pub fn load_data(spec: &DatasetSpec, root: &Path, seed: u64) -> Result<(DataPool, DataPool)> {
    let tree = SeedTree::new(seed);
    match spec {
        DatasetSpec::Synthetic {
            num_labels,
            per_label,
            input_dim,
            spread,
            test_per_label,
        } => {
            let pool = synth_blobs(
                *num_labels,
                *per_label,
                *input_dim,
                *spread,
                tree.seed(Stream::Dataset, 0),
            )?;
            pool.split_per_label(*test_per_label, tree.seed(Stream::Dataset, 1))
        }
        DatasetSpec::Idx { .. } => {
            let files = spec.files(root);
            let train = load_idx(&files[0], &files[1])?;
            let test = load_idx(&files[2], &files[3])?;
            Ok((train, test))
        }
    }
}

pub fn architecture(scenario: &Scenario, input_dim: usize) -> Result<MlpArchitecture> {
    MlpArchitecture::new(
        input_dim,
        scenario.model.hidden_dims.clone(),
        scenario.dataset.num_labels(),
    )
}

/// Full-batch training from a seeded initialization.
///
/// A tenth of `data` is held out; training stops after [`PATIENCE`]
/// consecutive epochs of rising held-out loss and returns the parameters with
/// the lowest held-out loss seen. Also returns the held-out accuracy of the
/// result (NaN when nothing could be held out).
pub fn train_bootstrap(
    data: &LabeledBatch,
    arch: &MlpArchitecture,
    spec: &BootstrapSpec,
    seed: u64,
) -> Result<(ParameterVector, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyData("bootstrap set is empty"));
    }
    let tree = SeedTree::new(seed);
    let mut params = init_parameters(arch, tree.seed(Stream::Init, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut tree.stream(Stream::Bootstrap));
    let held_len = data.len() / 10;
    let held = data.select(&order[..held_len]);
    let train = data.select(&order[held_len..]);
    let held_accuracy = |p: &ParameterVector| -> Result<f64> {
        if held.is_empty() {
            Ok(f64::NAN)
        } else {
            accuracy(p, arch, &held)
        }
    };
    if spec.epochs == 0 {
        let acc = held_accuracy(&params)?;
        return Ok((params, acc));
    }

    let mut best = params.clone();
    let mut best_loss = if held.is_empty() {
        f64::INFINITY
    } else {
        forward(&params, arch, &held)?.loss
    };
    let mut prev = best_loss;
    let mut rises = 0;
    for _ in 0..spec.epochs {
        let (_, g) = loss_and_gradient(&params, arch, &train)?;
        params = apply_step(&params, &g, spec.learning_rate)?;
        if held.is_empty() {
            continue;
        }
        let loss = forward(&params, arch, &held)?.loss;
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
        }
        rises = if loss > prev { rises + 1 } else { 0 };
        prev = loss;
        if rises >= PATIENCE {
            break;
        }
    }
    let out = if held.is_empty() { params } else { best };
    let acc = held_accuracy(&out)?;
    Ok((out, acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEncounter {
    pub distribution: LabelDistribution,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncounterSchedule {
    pub entries: Vec<ScheduledEncounter>,
}

/// Neighbor distributions phase by phase, shuffled within each phase, with
/// durations drawn uniformly from `[min_duration, 2 * min_duration)`.
pub fn build_controlled_schedule(
    phases: &[Phase],
    num_labels: usize,
    min_duration: f64,
    seed: u64,
) -> Result<EncounterSchedule> {
    if phases.is_empty() {
        return Err(Error::param("schedule needs at least one phase"));
    }
    if !(min_duration > 0.0) {
        return Err(Error::param("encounter durations must be positive"));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let all: Vec<usize> = (0..num_labels).collect();
    let mut entries = Vec::new();
    for phase in phases {
        let fixed = ((phase.encounters as f64) * phase.fixed_fraction).round() as usize;
        let mut dists = Vec::with_capacity(phase.encounters);
        for _ in 0..fixed {
            dists.push(LabelDistribution::uniform_over(
                &phase.fixed_labels,
                num_labels,
            )?);
        }
        for _ in fixed..phase.encounters {
            let labels: Vec<usize> = all
                .choose_multiple(&mut rng, phase.random_labels)
                .copied()
                .collect();
            dists.push(LabelDistribution::uniform_over(&labels, num_labels)?);
        }
        dists.shuffle(&mut rng);
        for distribution in dists {
            let duration_s = min_duration * (1.0 + rng.random::<f64>());
            entries.push(ScheduledEncounter {
                distribution,
                duration_s,
            });
        }
    }
    Ok(EncounterSchedule { entries })
}

/// Top-1 accuracy on the device's goal test set.
pub fn evaluate(device: &DeviceState, test: &GoalTestSet) -> Result<f64> {
    accuracy(&device.model, &device.arch, &test.batch)
}

/// Loads data and runs the scenario on `options.workers` threads.
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<RunMetrics> {
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::param(e.to_string()))?;
    pool.install(|| {
        let (train, test) = load_data(&scenario.dataset, &options.data_root, scenario.seed)?;
        match scenario.kind {
            ScenarioKind::Controlled => run_controlled(scenario, &train, &test),
            ScenarioKind::Mobility => run_mobility(scenario, &train, &test),
        }
    })
}

/// Per-session timing inputs shared by both run kinds.
struct Timing {
    t_send: f64,
    t_train: f64,
}

impl Timing {
    fn new(scenario: &Scenario, arch: &MlpArchitecture) -> Self {
        Timing {
            t_send: t_send(arch.serialized_size_bytes(), &scenario.link),
            t_train: scenario.compute.t_train,
        }
    }
}

/// One learner, a schedule of fresh neighbors, one row per encounter.
pub fn run_controlled(
    scenario: &Scenario,
    train: &DataPool,
    test: &DataPool,
) -> Result<RunMetrics> {
    scenario.validate()?;
    let spec = scenario
        .controlled
        .as_ref()
        .ok_or_else(|| Error::param("controlled scenario needs a 'controlled' section"))?;
    let n = scenario.dataset.num_labels();
    let tree = SeedTree::new(scenario.seed);
    let arch = architecture(scenario, train.input_dim())?;
    let timing = Timing::new(scenario, &arch);
    let hyper = &scenario.hyper;
    let strategy = scenario.strategy;

    let total: usize = spec.phases.iter().map(|p| p.encounters).sum();
    // Long enough for a full session even if every encounter adds a table key.
    let min_duration = encounter_time(
        hyper.rho,
        timing.t_send,
        timing.t_train,
        scenario.compute.t_agg(total + 1),
    );
    let schedule = build_controlled_schedule(
        &spec.phases,
        n,
        min_duration,
        tree.seed(Stream::Schedule, 0),
    )?;

    let goal = LabelDistribution::uniform_over(&spec.goal_labels, n)?;
    let mut specs = vec![DeviceSpec {
        distribution: LabelDistribution::uniform_over(&spec.local_labels, n)?,
        size: spec.local_size,
    }];
    specs.extend(schedule.entries.iter().map(|e| DeviceSpec {
        distribution: e.distribution.clone(),
        size: spec.neighbor_size,
    }));
    let parts = partition(
        train,
        scenario.bootstrap.fraction,
        &specs,
        tree.seed(Stream::Dataset, 2),
    )
    .map_err(|e| match e {
        Error::Device { index, source } if index > 0 => Error::Encounter { index, source },
        other => other,
    })?;
    let (boot, boot_acc) = train_bootstrap(
        &train.batch(&parts.bootstrap),
        &arch,
        &scenario.bootstrap,
        scenario.seed,
    )?;
    let test_set = build_goal_test_set(
        test,
        &goal,
        scenario.eval.test_size,
        tree.seed(Stream::Dataset, 3),
    )?;
    let mut learner = DeviceState::new(
        0,
        arch.clone(),
        boot.clone(),
        train.batch(&parts.devices[0]),
        goal.clone(),
        strategy,
        hyper.clone(),
    )?;

    let mut metrics = RunMetrics {
        bootstrap_accuracy: boot_acc,
        ..RunMetrics::default()
    };
    let mut clock = 0.0;
    for (i, entry) in schedule.entries.iter().enumerate() {
        let idx = i + 1;
        let nb_batch = train.batch(&parts.devices[idx]);
        let nb_dist = LabelDistribution::empirical(nb_batch.labels(), n)?;
        let at_encounter = |e: Error| Error::Encounter {
            index: idx,
            source: Box::new(e),
        };
        let mut report = None;
        if strategy.should_engage(&goal, &nb_dist, hyper.tau)? {
            report = if strategy == Strategy::PairwiseFedAvg {
                let rounds = feasible_rounds(
                    entry.duration_s,
                    timing.t_send,
                    timing.t_train,
                    0.0,
                    hyper.rho,
                    false,
                );
                if rounds == 0 {
                    None
                } else {
                    let mut neighbor = DeviceState::new(
                        idx,
                        arch.clone(),
                        boot.clone(),
                        nb_batch,
                        nb_dist.clone(),
                        strategy,
                        hyper.clone(),
                    )?;
                    Some(
                        pairwise_fed_avg_session(&mut learner, &mut neighbor, rounds)
                            .map_err(at_encounter)?,
                    )
                }
            } else {
                let t_agg = aggregation_time(scenario, &learner, &nb_dist);
                let rounds = feasible_rounds(
                    entry.duration_s,
                    timing.t_send,
                    timing.t_train,
                    t_agg,
                    hyper.rho,
                    false,
                );
                if rounds == 0 {
                    None
                } else {
                    Some(
                        learner
                            .run_session(idx, &nb_batch, &nb_dist, rounds)
                            .map_err(at_encounter)?,
                    )
                }
            };
        }
        if report.is_none() {
            learner.run_local_round().map_err(at_encounter)?;
        }
        clock += entry.duration_s;
        let bytes = report.as_ref().map_or(0, |r| r.bytes_sent);
        metrics.rows.push(MetricRow {
            sim_time_s: clock,
            encounter_idx: idx,
            device_id: 0,
            strategy,
            goal_accuracy: evaluate(&learner, &test_set)?,
            alpha: learner.decay.running_min_alpha,
            gamma_size: learner.gamma.len(),
            bytes_sent: bytes,
            engaged: report.is_some(),
        });
        if let Some(report) = report {
            metrics.sessions.push(SessionLogEntry {
                encounter_idx: idx,
                sim_time_s: clock,
                report,
            });
        }
    }
    Ok(metrics)
}

/// Aggregation cost of the next session, counting the neighbor's key if new.
fn aggregation_time(
    scenario: &Scenario,
    learner: &DeviceState,
    neighbor: &LabelDistribution,
) -> f64 {
    if !learner.strategy.charges_aggregation() {
        return 0.0;
    }
    let new_key = !learner.gamma.contains(&label_set_of(neighbor));
    scenario
        .compute
        .t_agg(learner.gamma.len() + new_key as usize)
}

/// Labels owned by a region.
pub fn region_labels(region: usize, num_labels: usize) -> [usize; 2] {
    [(2 * region) % num_labels, (2 * region + 1) % num_labels]
}

/// Region labels plus `extra` distinct others, drawn per device.
pub fn mobility_goal(
    region: usize,
    num_labels: usize,
    extra: usize,
    tree: &SeedTree,
    device: usize,
) -> Result<LabelDistribution> {
    let own = region_labels(region, num_labels);
    let others: Vec<usize> = (0..num_labels).filter(|l| !own.contains(l)).collect();
    let mut rng = tree.substream(Stream::Goals, device as u32);
    let mut labels: Vec<usize> = own.to_vec();
    labels.extend(others.choose_multiple(&mut rng, extra).copied());
    LabelDistribution::uniform_over(&labels, num_labels)
}

/// A learner-side job: one direction of one encounter.
struct Job {
    encounter_idx: usize,
    /// 0 when the smaller id learns, 1 for the reverse direction.
    direction: u8,
    neighbor: usize,
    duration_s: f64,
    sim_time_s: f64,
}

/// 45 walking devices, evaluated every `eval.interval_s` simulated seconds.
/// (encounter index, direction, sim time, report) for one finished session.
type Finished = (usize, u8, f64, SessionReport);

pub fn run_mobility(scenario: &Scenario, train: &DataPool, test: &DataPool) -> Result<RunMetrics> {
    scenario.validate()?;
    let spec = scenario
        .mobility
        .as_ref()
        .ok_or_else(|| Error::param("mobility scenario needs a 'mobility' section"))?;
    let n = scenario.dataset.num_labels();
    let tree = SeedTree::new(scenario.seed);
    let arch = architecture(scenario, train.input_dim())?;
    let timing = Timing::new(scenario, &arch);
    let hyper = &scenario.hyper;
    let strategy = scenario.strategy;
    let walk = &spec.walk;
    let num_devices = walk.num_devices();

    let regions: Vec<usize> = (0..num_devices)
        .map(|d| d / walk.devices_per_region)
        .collect();
    debug_assert!(regions.iter().all(|&r| r < NUM_REGIONS));
    let specs = regions
        .iter()
        .map(|&r| {
            Ok(DeviceSpec {
                distribution: LabelDistribution::uniform_over(&region_labels(r, n), n)?,
                size: spec.local_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let parts = partition(
        train,
        scenario.bootstrap.fraction,
        &specs,
        tree.seed(Stream::Dataset, 2),
    )?;
    let (boot, boot_acc) = train_bootstrap(
        &train.batch(&parts.bootstrap),
        &arch,
        &scenario.bootstrap,
        scenario.seed,
    )?;

    let mut devices = Vec::with_capacity(num_devices);
    let mut tests = Vec::with_capacity(num_devices);
    for (d, &region) in regions.iter().enumerate() {
        let goal = mobility_goal(region, n, spec.extra_goal_labels, &tree, d)?;
        tests.push(build_goal_test_set(
            test,
            &goal,
            scenario.eval.test_size,
            tree.seed(Stream::Dataset, 16 + d as u32),
        )?);
        devices.push(DeviceState::new(
            d,
            arch.clone(),
            boot.clone(),
            train.batch(&parts.devices[d]),
            goal,
            strategy,
            hyper.clone(),
        )?);
    }
    // What each device offers as a neighbor never changes.
    let offers: Vec<(LabeledBatch, LabelDistribution)> = devices
        .iter()
        .map(|d| (d.local_data.clone(), d.data_dist.clone()))
        .collect();

    let trajectories = generate_trajectories(walk, tree.seed(Stream::Mobility, 0))?;
    let encounters = detect_encounters(&trajectories, walk.arena.comm_range)?;
    let tick = walk.arena.tick;
    let horizon = walk.total_ticks() as f64 * tick;
    let interval = scenario.eval.interval_s;
    let mut checkpoints: Vec<f64> = (1..)
        .map(|c| c as f64 * interval)
        .take_while(|&t| t < horizon)
        .collect();
    checkpoints.push(horizon);

    let mut metrics = RunMetrics {
        bootstrap_accuracy: boot_acc,
        notes: vec!["every device runs one local round per evaluation interval".into()],
        ..RunMetrics::default()
    };
    let mut next = 0;
    for &t in &checkpoints {
        let first = next;
        while next < encounters.len() && (encounters[next].start_tick as f64 * tick) < t {
            next += 1;
        }
        let window = first..next;
        let mut bytes = vec![0u64; num_devices];
        let mut engaged = vec![false; num_devices];
        let mut logged = Vec::new();

        match strategy {
            Strategy::Local => {}
            Strategy::PairwiseFedAvg => {
                for idx in window.clone() {
                    let e = &encounters[idx];
                    let rounds = feasible_rounds(
                        contact_duration(e, &walk.arena),
                        timing.t_send,
                        timing.t_train,
                        0.0,
                        hyper.rho,
                        false,
                    );
                    if rounds == 0 {
                        continue;
                    }
                    let (lo, hi) = devices.split_at_mut(e.device_b);
                    let report = pairwise_fed_avg_session(&mut lo[e.device_a], &mut hi[0], rounds)
                        .map_err(|err| Error::Encounter {
                            index: idx + 1,
                            source: Box::new(err),
                        })?;
                    for d in [e.device_a, e.device_b] {
                        bytes[d] += report.bytes_sent;
                        engaged[d] = true;
                    }
                    logged.push((idx, 0u8, e.start_tick as f64 * tick, report));
                }
            }
            _ => {
                let mut jobs: Vec<Vec<Job>> = (0..num_devices).map(|_| Vec::new()).collect();
                for idx in window.clone() {
                    let e = &encounters[idx];
                    let duration_s = contact_duration(e, &walk.arena);
                    let sim_time_s = e.start_tick as f64 * tick;
                    for (direction, (learner, neighbor)) in
                        [(e.device_a, e.device_b), (e.device_b, e.device_a)]
                            .into_iter()
                            .enumerate()
                    {
                        jobs[learner].push(Job {
                            encounter_idx: idx,
                            direction: direction as u8,
                            neighbor,
                            duration_s,
                            sim_time_s,
                        });
                    }
                }
                let results: Vec<Result<Vec<Finished>>> = devices
                    .par_iter_mut()
                    .zip(jobs)
                    .map(|(device, jobs)| {
                        let mut done = Vec::new();
                        for job in jobs {
                            let (nb_batch, nb_dist) = &offers[job.neighbor];
                            if !device
                                .strategy
                                .should_engage(&device.goal, nb_dist, hyper.tau)?
                            {
                                continue;
                            }
                            let t_agg = aggregation_time(scenario, device, nb_dist);
                            let rounds = feasible_rounds(
                                job.duration_s,
                                timing.t_send,
                                timing.t_train,
                                t_agg,
                                hyper.rho,
                                true,
                            );
                            if rounds == 0 {
                                continue;
                            }
                            let report = device
                                .run_session(job.neighbor, nb_batch, nb_dist, rounds)
                                .map_err(|err| Error::Encounter {
                                    index: job.encounter_idx + 1,
                                    source: Box::new(err),
                                })?;
                            done.push((job.encounter_idx, job.direction, job.sim_time_s, report));
                        }
                        Ok(done)
                    })
                    .collect();
                for r in results {
                    for entry in r? {
                        bytes[entry.3.learner_id] += entry.3.bytes_sent;
                        engaged[entry.3.learner_id] = true;
                        logged.push(entry);
                    }
                }
            }
        }
        logged.sort_by_key(|(idx, dir, _, _)| (*idx, *dir));
        metrics.sessions.extend(
            logged
                .into_iter()
                .map(|(idx, _, time, report)| SessionLogEntry {
                    encounter_idx: idx + 1,
                    sim_time_s: time,
                    report,
                }),
        );

        devices
            .par_iter_mut()
            .try_for_each(|d| d.run_local_round().map(|_| ()))?;
        let accs: Vec<f64> = devices
            .par_iter()
            .zip(&tests)
            .map(|(d, t)| evaluate(d, t))
            .collect::<Result<_>>()?;
        for (d, device) in devices.iter().enumerate() {
            metrics.rows.push(MetricRow {
                sim_time_s: t,
                encounter_idx: next,
                device_id: d,
                strategy,
                goal_accuracy: accs[d],
                alpha: device.decay.running_min_alpha,
                gamma_size: device.gamma.len(),
                bytes_sent: bytes[d],
                engaged: engaged[d],
            });
        }
    }
    Ok(metrics)
}
