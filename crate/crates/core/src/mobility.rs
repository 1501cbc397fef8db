//! Levy-walk mobility on a square split into a 3x3 grid of regions, and
//! proximity-based encounter detection.
//!
//! Every device has a home point inside its anchor region. Within an episode
//! it alternates pauses and straight flights whose durations and lengths are
//! truncated power-law draws, and it heads straight home in time to be back
//! at the last tick of the episode.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedTree, SimRng, Stream};

/// Ratio between the truncation cap and the lower bound of the power law.
pub const LOWER_BOUND_RATIO: f64 = 1000.0;

pub const GRID: usize = 3;
pub const NUM_REGIONS: usize = GRID * GRID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevyParams {
    pub flight_exponent: f64,
    /// Longest flight, in distance units.
    pub flight_cap: f64,
    pub pause_exponent: f64,
    /// Longest pause, in seconds.
    pub pause_cap: f64,
    pub speed: f64,
}

impl Default for LevyParams {
    fn default() -> Self {
        LevyParams {
            flight_exponent: 1.5,
            flight_cap: 500.0,
            pause_exponent: 1.5,
            pause_cap: 600.0,
            speed: 1.5,
        }
    }
}

impl LevyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("flight_exponent", self.flight_exponent),
            ("pause_exponent", self.pause_exponent),
        ] {
            if !(e > 0.0 && e <= 2.0) {
                return Err(Error::param(format!("{name} must lie in (0, 2], got {e}")));
            }
        }
        for (name, v) in [
            ("flight_cap", self.flight_cap),
            ("pause_cap", self.pause_cap),
            ("speed", self.speed),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arena {
    pub side_length: f64,
    pub comm_range: f64,
    /// Seconds per simulation step.
    pub tick: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Arena {
            side_length: 1000.0,
            comm_range: 50.0,
            tick: 1.0,
        }
    }
}

impl Arena {
    pub fn region_side(&self) -> f64 {
        self.side_length / GRID as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.side_length > 0.0) || !(self.tick > 0.0) || !(self.comm_range > 0.0) {
            return Err(Error::param("arena side, range and tick must be positive"));
        }
        if self.comm_range >= self.region_side() {
            return Err(Error::param(format!(
                "communication range {} must be below the region side {}",
                self.comm_range,
                self.region_side()
            )));
        }
        Ok(())
    }

    /// Region id `row * 3 + col` of a point.
    pub fn region_of(&self, (x, y): (f64, f64)) -> usize {
        let side = self.region_side();
        let cell = |v: f64| ((v / side).floor().max(0.0) as usize).min(GRID - 1);
        cell(y) * GRID + cell(x)
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        (0.0..=self.side_length).contains(&x) && (0.0..=self.side_length).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityConfig {
    pub arena: Arena,
    pub levy: LevyParams,
    pub devices_per_region: usize,
    pub episodes: usize,
    pub episode_ticks: usize,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            arena: Arena::default(),
            levy: LevyParams::default(),
            devices_per_region: 5,
            episodes: 10,
            episode_ticks: 3600,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        self.levy.validate()?;
        if self.devices_per_region == 0 || self.episodes == 0 || self.episode_ticks == 0 {
            return Err(Error::param(
                "devices per region, episodes and episode ticks must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.devices_per_region * NUM_REGIONS
    }

    pub fn total_ticks(&self) -> usize {
        self.episodes * self.episode_ticks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub device_id: usize,
    pub anchor_region: usize,
    pub home: (f64, f64),
    pub positions: Vec<(f64, f64)>,
    /// Set when some episode could not end at home by flying and the last
    /// position was snapped to the home point instead.
    pub teleported: bool,
}

/// A maximal run of ticks during which two devices stay in range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Encounter {
    /// Always the smaller id.
    pub device_a: usize,
    pub device_b: usize,
    pub start_tick: usize,
    pub duration_ticks: usize,
}

impl Encounter {
    pub fn end_tick(&self) -> usize {
        self.start_tick + self.duration_ticks
    }
}

/// One draw from the power law `p(l) ~ l^-(1+exponent)` on `[cap/1000, cap)`.
pub fn sample_truncated_levy(exponent: f64, cap: f64, rng: &mut SimRng) -> f64 {
    truncated_levy_inverse_cdf(rng.random::<f64>(), exponent, cap)
}

/// Quantile function of the truncated power law; `u` in `[0, 1)`.
pub fn truncated_levy_inverse_cdf(u: f64, exponent: f64, cap: f64) -> f64 {
    let lmin = cap / LOWER_BOUND_RATIO;
    let a = lmin.powf(-exponent);
    let b = cap.powf(-exponent);
    let l = (a - u * (a - b)).powf(-1.0 / exponent);
    if l >= cap {
        f64::from_bits(cap.to_bits() - 1)
    } else {
        l.max(lmin)
    }
}

/// A trajectory per device, `devices_per_region` homes in each region.
/// Device `d` is anchored in region `d / devices_per_region`.
pub fn generate_trajectories(config: &MobilityConfig, seed: u64) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let tree = SeedTree::new(seed);
    Ok((0..config.num_devices())
        .into_par_iter()
        .map(|id| walk(config, id, &mut tree.substream(Stream::Mobility, id as u32)))
        .collect())
}

fn walk(config: &MobilityConfig, device_id: usize, rng: &mut SimRng) -> Trajectory {
    let arena = &config.arena;
    let levy = &config.levy;
    let anchor = device_id / config.devices_per_region;
    let side = arena.region_side();
    let (row, col) = (anchor / GRID, anchor % GRID);
    let home = (
        (col as f64 + rng.random::<f64>()) * side,
        (row as f64 + rng.random::<f64>()) * side,
    );
    let step = levy.speed * arena.tick;

    let mut positions = Vec::with_capacity(config.total_ticks());
    let mut teleported = false;
    for _ in 0..config.episodes {
        let mut pos = home;
        positions.push(pos);
        let mut motion = Motion::Pause(pause_ticks(levy, arena.tick, rng));
        for k in 1..config.episode_ticks {
            let remaining = config.episode_ticks - 1 - k;
            let to_home = dist(pos, home);
            // Head home while one ordinary step could still be undone in time.
            let needed = (to_home / step).ceil() as usize;
            if needed >= remaining {
                motion = Motion::Home;
            }
            pos = match motion {
                Motion::Home => {
                    if to_home <= step {
                        home
                    } else {
                        let f = step / to_home;
                        (pos.0 + (home.0 - pos.0) * f, pos.1 + (home.1 - pos.1) * f)
                    }
                }
                Motion::Pause(ref mut left) => {
                    if *left == 0 {
                        motion = new_flight(levy, rng);
                    } else {
                        *left -= 1;
                    }
                    pos
                }
                Motion::Flight {
                    ref mut heading,
                    ref mut left,
                } => {
                    let d = left.min(step);
                    *left -= d;
                    let (next, bounced) = reflect(pos, *heading, d, arena.side_length);
                    *heading = bounced;
                    if *left <= 0.0 {
                        motion = Motion::Pause(pause_ticks(levy, arena.tick, rng));
                    }
                    next
                }
            };
            if k == config.episode_ticks - 1 && pos != home {
                pos = home;
                teleported = true;
            }
            positions.push(pos);
        }
    }
    Trajectory {
        device_id,
        anchor_region: anchor,
        home,
        positions,
        teleported,
    }
}

enum Motion {
    Pause(u64),
    Flight { heading: (f64, f64), left: f64 },
    Home,
}

fn pause_ticks(levy: &LevyParams, tick: f64, rng: &mut SimRng) -> u64 {
    (sample_truncated_levy(levy.pause_exponent, levy.pause_cap, rng) / tick).round() as u64
}

fn new_flight(levy: &LevyParams, rng: &mut SimRng) -> Motion {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    Motion::Flight {
        heading: (theta.cos(), theta.sin()),
        left: sample_truncated_levy(levy.flight_exponent, levy.flight_cap, rng),
    }
}

/// Moves `d` along `heading`, mirroring off the walls of `[0, side]^2`.
/// Returns the new position and heading.
fn reflect(pos: (f64, f64), heading: (f64, f64), d: f64, side: f64) -> ((f64, f64), (f64, f64)) {
    let fold = |v: f64, h: f64| {
        let period = 2.0 * side;
        let m = v.rem_euclid(period);
        // An odd number of wall hits reverses the direction of travel.
        let h = if (v / side).floor().rem_euclid(2.0) == 1.0 {
            -h
        } else {
            h
        };
        let m = if m > side { period - m } else { m };
        (m.clamp(0.0, side), h)
    };
    let (x, hx) = fold(pos.0 + heading.0 * d, heading.0);
    let (y, hy) = fold(pos.1 + heading.1 * d, heading.1);
    ((x, y), (hx, hy))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// All maximal in-range intervals for every pair, ordered by start tick then
/// by device ids.
pub fn detect_encounters(trajectories: &[Trajectory], comm_range: f64) -> Result<Vec<Encounter>> {
    let ticks = trajectories.first().map_or(0, |t| t.positions.len());
    if let Some(t) = trajectories.iter().find(|t| t.positions.len() != ticks) {
        return Err(Error::Dimension {
            expected: ticks,
            got: t.positions.len(),
        });
    }
    let r2 = comm_range * comm_range;
    let mut open: HashMap<(usize, usize), usize> = HashMap::new();
    let mut done = Vec::new();
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for tick in 0..ticks {
        cells.clear();
        for (i, t) in trajectories.iter().enumerate() {
            let (x, y) = t.positions[tick];
            cells
                .entry((
                    (x / comm_range).floor() as i64,
                    (y / comm_range).floor() as i64,
                ))
                .or_default()
                .push(i);
        }
        let mut in_range = Vec::new();
        for (&(cx, cy), members) in &cells {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(others) = cells.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &i in members {
                        for &j in others {
                            if i < j {
                                let (a, b) = (
                                    trajectories[i].positions[tick],
                                    trajectories[j].positions[tick],
                                );
                                let (ex, ey) = (a.0 - b.0, a.1 - b.1);
                                if ex * ex + ey * ey <= r2 {
                                    in_range.push((i, j));
                                }
                            }
                        }
                    }
                }
            }
        }
        // A pair lands in `in_range` once: each unordered cell pair is visited
        // from both sides, but only the side holding the smaller index emits.
        in_range.sort_unstable();
        in_range.dedup();
        open.retain(|pair, start| {
            if in_range.binary_search(pair).is_ok() {
                true
            } else {
                done.push(make_encounter(trajectories, *pair, *start, tick));
                false
            }
        });
        for pair in in_range {
            open.entry(pair).or_insert(tick);
        }
    }
    for (pair, start) in open {
        done.push(make_encounter(trajectories, pair, start, ticks));
    }
    done.sort_by_key(|e| (e.start_tick, e.device_a, e.device_b));
    Ok(done)
}

fn make_encounter(
    trajectories: &[Trajectory],
    (i, j): (usize, usize),
    start: usize,
    end: usize,
) -> Encounter {
    let (a, b) = (trajectories[i].device_id, trajectories[j].device_id);
    Encounter {
        device_a: a.min(b),
        device_b: a.max(b),
        start_tick: start,
        duration_ticks: end - start,
    }
}

/// Exact contact length in seconds.
pub fn contact_duration(encounter: &Encounter, arena: &Arena) -> f64 {
    encounter.duration_ticks as f64 * arena.tick
}

pub fn write_trajectories_csv<W: Write>(out: &mut W, trajectories: &[Trajectory]) -> Result<()> {
    writeln!(out, "tick,deviceId,x,y")?;
    let ticks = trajectories.first().map_or(0, |t| t.positions.len());
    for tick in 0..ticks {
        for t in trajectories {
            let (x, y) = t.positions[tick];
            writeln!(out, "{tick},{},{x},{y}", t.device_id)?;
        }
    }
    Ok(())
}

pub fn write_encounters_csv<W: Write>(out: &mut W, encounters: &[Encounter]) -> Result<()> {
    writeln!(out, "deviceA,deviceB,startTick,durationTicks")?;
    for e in encounters {
        writeln!(
            out,
            "{},{},{},{}",
            e.device_a, e.device_b, e.start_tick, e.duration_ticks
        )?;
    }
    Ok(())
}
