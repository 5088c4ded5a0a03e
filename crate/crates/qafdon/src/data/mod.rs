//! Synthetic three-stage fault trajectories and triplet assembly.
//!
//! The generator is a closed-form surrogate for a transient simulator, not a
//! power-flow solution: constant pre-fault voltage, a depressed fault-on
//! plateau, and a damped (or, for unstable scenarios, growing and clipped)
//! oscillation after clearing. The shapes are analytically checkable while
//! still exercising the heterogeneous input windows the operator model has
//! to handle. Per-bus parameter offsets give each bus its own generative
//! law, so fine-tuning on a held-out bus has something real to adapt to.
//!
//! Every trajectory draws from an RNG stream keyed by (master seed, bus id,
//! index); parallel and serial generation produce identical datasets.

pub mod io;

use crate::error::{QafError, Result};
use crate::model::{PaddedInput, Triplet};
use crate::rng::{self, tag};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Voltage ceiling for unstable branches, in per-unit.
pub const CLIP_MAX: f64 = 1.45;

/// Per-bus parameter offsets emulating distinct dynamics per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusBias {
    pub id: u32,
    /// Added to the sampled fault depth.
    #[serde(default)]
    pub depth_shift: f64,
    /// Added to the sampled damping ratio.
    #[serde(default)]
    pub damping_shift: f64,
    /// Added to the sampled oscillation frequency (rad/s).
    #[serde(default)]
    pub freq_shift: f64,
}

impl BusBias {
    pub fn neutral(id: u32) -> Self {
        Self {
            id,
            depth_shift: 0.0,
            damping_shift: 0.0,
            freq_shift: 0.0,
        }
    }
}

/// Generator knobs: grid, horizon, observation window, sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub grid_step: f64,
    pub horizon: f64,
    /// Observable post-fault duration Δt_obs in seconds.
    pub dt_obs: f64,
    /// Sensor count of the padded input.
    pub m: usize,
    /// Query points sampled per trajectory.
    pub n_loc: usize,
    pub t_f_min: f64,
    pub t_f_max: f64,
    /// Clearing duration range in seconds.
    pub clear_min: f64,
    pub clear_max: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Probability of a stable post-fault branch.
    pub p_stable: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            grid_step: 0.01,
            horizon: 8.5,
            dt_obs: 0.4,
            m: 256,
            n_loc: 32,
            t_f_min: 0.5,
            t_f_max: 1.5,
            clear_min: 0.100,
            clear_max: 0.333,
            depth_min: 0.3,
            depth_max: 0.9,
            p_stable: 0.8,
        }
    }
}

impl GeneratorConfig {
    /// Padded input window end: the worst-case observed duration, so the
    /// padding always fits.
    pub fn t_max_input(&self) -> f64 {
        self.t_f_max + self.clear_max + self.dt_obs
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_step <= 0.0 || self.horizon <= 0.0 {
            return Err(QafError::Config("grid_step and horizon must be positive".into()));
        }
        if self.m < 1 || self.n_loc < 1 {
            return Err(QafError::Config("m and n_loc must be at least 1".into()));
        }
        if !(0.0 < self.t_f_min && self.t_f_min <= self.t_f_max) {
            return Err(QafError::Config("need 0 < t_f_min <= t_f_max".into()));
        }
        if !(0.0 < self.clear_min && self.clear_min <= self.clear_max) {
            return Err(QafError::Config("need 0 < clear_min <= clear_max".into()));
        }
        if self.dt_obs <= 0.0 {
            return Err(QafError::Config("dt_obs must be positive".into()));
        }
        if self.t_max_input() >= self.horizon {
            return Err(QafError::Config(format!(
                "t_max_input {} must stay below horizon {}",
                self.t_max_input(),
                self.horizon
            )));
        }
        if !(0.0..=1.0).contains(&self.p_stable) {
            return Err(QafError::Config("p_stable must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One simulated fault case: stage times and surrogate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScenario {
    pub bus_id: u32,
    /// Demand multiplier in [0.7, 1.3].
    pub load_scale: f64,
    /// Per-unit voltage dip during the fault.
    pub fault_depth: f64,
    /// Fault onset in seconds (t0 = 0).
    pub t_f: f64,
    /// Clearing time in seconds.
    pub t_cl: f64,
    /// Damping ratio ζ; non-positive values mark unstable branches.
    pub damping: f64,
    /// Oscillation frequency ω in rad/s.
    pub osc_freq: f64,
    pub stable: bool,
}

impl GridScenario {
    /// Pre-fault equilibrium voltage: heavier demand sags the bus.
    pub fn v_prefault(&self) -> f64 {
        1.0 - 0.2 * (self.load_scale - 1.0)
    }

    /// Fault-on plateau voltage.
    pub fn v_fault(&self) -> f64 {
        self.v_prefault() * (1.0 - self.fault_depth)
    }

    /// Post-fault settling voltage of the stable branch.
    pub fn v_settle(&self) -> f64 {
        self.v_prefault() - 0.02 * self.fault_depth
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_f && self.t_f < self.t_cl) {
            return Err(QafError::Scenario(format!(
                "stage times must satisfy 0 < t_f < t_cl, got t_f={} t_cl={}",
                self.t_f, self.t_cl
            )));
        }
        if self.osc_freq <= 0.0 {
            return Err(QafError::Scenario(format!(
                "oscillation frequency must be positive, got {}",
                self.osc_freq
            )));
        }
        if self.damping.abs() >= 1.0 {
            return Err(QafError::Scenario(format!(
                "|damping| must stay below 1, got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// One simulated voltage curve on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub scenario: GridScenario,
    pub grid_step: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// End of the observed window for a given Δt_obs.
    pub fn observed_end(&self, dt_obs: f64) -> f64 {
        self.scenario.t_cl + dt_obs
    }
}

/// Closed-form surrogate value at time `t`.
fn surrogate_value(sc: &GridScenario, t: f64) -> f64 {
    if t < sc.t_f {
        return sc.v_prefault();
    }
    if t < sc.t_cl {
        return sc.v_fault();
    }
    let dt = t - sc.t_cl;
    let omega_d = sc.osc_freq * (1.0 - sc.damping * sc.damping).sqrt();
    let v = sc.v_settle()
        + (sc.v_fault() - sc.v_settle()) * (-sc.damping * sc.osc_freq * dt).exp() * (omega_d * dt).cos();
    v.clamp(0.0, CLIP_MAX)
}

/// Evaluates the piecewise surrogate on a uniform grid over [0, horizon].
pub fn simulate_trajectory(
    scenario: &GridScenario,
    grid_step: f64,
    horizon: f64,
) -> Result<Trajectory> {
    scenario.validate()?;
    if grid_step <= 0.0 {
        return Err(QafError::Config(format!("grid step must be positive, got {grid_step}")));
    }
    if scenario.t_cl >= horizon {
        return Err(QafError::Scenario(format!(
            "clearing time {} beyond horizon {horizon}",
            scenario.t_cl
        )));
    }
    let n = (horizon / grid_step).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * grid_step).collect();
    let values: Vec<f64> = times.iter().map(|&t| surrogate_value(scenario, t)).collect();
    Ok(Trajectory {
        times,
        values,
        scenario: scenario.clone(),
        grid_step,
    })
}

fn sample_one_scenario(bus: &BusBias, cfg: &GeneratorConfig, rng: &mut impl Rng) -> GridScenario {
    let load_scale = rng.random_range(0.7..1.3);
    let t_f = rng.random_range(cfg.t_f_min..cfg.t_f_max);
    let clearing = rng.random_range(cfg.clear_min..cfg.clear_max);
    let fault_depth =
        (rng.random_range(cfg.depth_min..cfg.depth_max) + bus.depth_shift).clamp(0.05, 0.95);
    let stable = rng.random_range(0.0..1.0) < cfg.p_stable;
    let damping = if stable {
        (rng.random_range(0.08..0.35) + bus.damping_shift).max(0.02)
    } else {
        (rng.random_range(-0.12..-0.03) + bus.damping_shift).min(-0.01)
    };
    let osc_freq = (rng.random_range(4.0..9.0) + bus.freq_shift).max(1.0);
    GridScenario {
        bus_id: bus.id,
        load_scale,
        fault_depth,
        t_f,
        t_cl: t_f + clearing,
        damping,
        osc_freq,
        stable,
    }
}

/// Draws `n` scenarios for one bus; scenario `i` uses the stream keyed by
/// (seed, bus id, i).
pub fn sample_scenarios(
    bus: &BusBias,
    n: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<GridScenario>> {
    if n == 0 {
        return Err(QafError::Contract("scenario count must be at least 1".into()));
    }
    cfg.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, &[tag::SCENARIO, bus.id as u64, i as u64]);
            sample_one_scenario(bus, cfg, &mut rng)
        })
        .collect())
}

/// A contiguous piece of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Splits a trajectory into the observed part u over [0, t_cl + Δt_obs] and
/// the unobserved tail v over (t_cl + Δt_obs, horizon]. Together they
/// reconstruct the curve exactly.
pub fn segment(traj: &Trajectory, dt_obs: f64) -> Result<(Segment, Segment)> {
    let boundary = traj.observed_end(dt_obs);
    let last = *traj.times.last().ok_or_else(|| {
        QafError::Segmentation("cannot segment an empty trajectory".into())
    })?;
    if boundary >= last {
        return Err(QafError::Segmentation(format!(
            "observed window end {boundary} leaves no unobserved tail before {last}"
        )));
    }
    // Grid-point comparisons get a tiny tolerance so a boundary landing on a
    // grid point is included in u.
    let tol = traj.grid_step * 1e-9;
    let split = traj.times.partition_point(|&t| t <= boundary + tol);
    if split == 0 || split >= traj.len() {
        return Err(QafError::Segmentation(format!(
            "split at {boundary} leaves an empty segment"
        )));
    }
    Ok((
        Segment {
            times: traj.times[..split].to_vec(),
            values: traj.values[..split].to_vec(),
        },
        Segment {
            times: traj.times[split..].to_vec(),
            values: traj.values[split..].to_vec(),
        },
    ))
}

/// Resamples the observed window onto the m-sensor grid over
/// [0, t_max_input], zero beyond the observed end.
pub fn padded_input(
    traj: &Trajectory,
    dt_obs: f64,
    m: usize,
    t_max_input: f64,
) -> Result<PaddedInput> {
    if m < 1 {
        return Err(QafError::Contract("sensor count must be at least 1".into()));
    }
    let boundary = traj.observed_end(dt_obs);
    let tol = traj.grid_step * 1e-9;
    let mut values = vec![0.0; m];
    let mut valid_len = 0;
    for (j, v) in values.iter_mut().enumerate() {
        let s = if m == 1 {
            0.0
        } else {
            j as f64 * t_max_input / (m - 1) as f64
        };
        if s > boundary + tol {
            break;
        }
        *v = interp(traj, s);
        valid_len = j + 1;
    }
    PaddedInput::new(values, valid_len)
}

fn interp(traj: &Trajectory, t: f64) -> f64 {
    let pos = t / traj.grid_step;
    let i = (pos.floor() as usize).min(traj.len() - 1);
    if i + 1 >= traj.len() {
        return traj.values[i];
    }
    let frac = pos - i as f64;
    traj.values[i] * (1.0 - frac) + traj.values[i + 1] * frac
}

/// Header of a triplet dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub bus_id: u32,
    pub seed: u64,
    pub m: usize,
    pub n_loc: usize,
    pub dt_obs: f64,
    pub grid_step: f64,
    pub t_max_input: f64,
    pub horizon: f64,
}

/// Triplets plus their source-trajectory ids and the generation metadata.
#[derive(Debug, Clone)]
pub struct TripletDataset {
    pub meta: DatasetMeta,
    /// Local trajectory index of each triplet, parallel to `triplets`.
    pub traj_ids: Vec<u32>,
    pub triplets: Vec<Triplet>,
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplet_refs(&self) -> Vec<&Triplet> {
        self.triplets.iter().collect()
    }
}

/// Builds exactly n_loc triplets per trajectory: one shared padded input and
/// query times drawn uniformly (with replacement) from the unobserved-tail
/// grid points, targets looked up exactly at those points.
pub fn assemble_triplets(
    trajs: &[Trajectory],
    cfg: &GeneratorConfig,
    bus_id: u32,
    seed: u64,
) -> Result<TripletDataset> {
    if trajs.is_empty() {
        return Err(QafError::Contract("cannot assemble triplets from zero trajectories".into()));
    }
    cfg.validate()?;
    let t_max_input = cfg.t_max_input();
    let mut traj_ids = Vec::with_capacity(trajs.len() * cfg.n_loc);
    let mut triplets = Vec::with_capacity(trajs.len() * cfg.n_loc);
    for (idx, traj) in trajs.iter().enumerate() {
        let input = padded_input(traj, cfg.dt_obs, cfg.m, t_max_input)?;
        let (_, tail) = segment(traj, cfg.dt_obs)?;
        let mut rng = rng::stream(seed, &[tag::TRIPLET, bus_id as u64, idx as u64]);
        for _ in 0..cfg.n_loc {
            let k = rng.random_range(0..tail.times.len());
            traj_ids.push(idx as u32);
            triplets.push(Triplet {
                input: input.clone(),
                t: tail.times[k],
                target: tail.values[k],
            });
        }
    }
    Ok(TripletDataset {
        meta: DatasetMeta {
            bus_id,
            seed,
            m: cfg.m,
            n_loc: cfg.n_loc,
            dt_obs: cfg.dt_obs,
            grid_step: cfg.grid_step,
            t_max_input,
            horizon: cfg.horizon,
        },
        traj_ids,
        triplets,
    })
}

/// Simulates `n` trajectories for one bus, in parallel over trajectories.
pub fn generate_trajectories(
    bus: &BusBias,
    n: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let scenarios = sample_scenarios(bus, n, cfg, seed)?;
    scenarios
        .par_iter()
        .map(|sc| simulate_trajectory(sc, cfg.grid_step, cfg.horizon))
        .collect()
}

/// Full per-bus generation: trajectories plus the assembled triplet dataset.
pub fn generate_bus(
    bus: &BusBias,
    n: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Vec<Trajectory>, TripletDataset)> {
    let trajs = generate_trajectories(bus, n, cfg, seed)?;
    let dataset = assemble_triplets(&trajs, cfg, bus.id, seed)?;
    Ok((trajs, dataset))
}
