//! Interval quality metrics and test-set evaluation.
//!
//! PICP is the fraction of true values inside the (closed) predicted
//! intervals; PINAW is the mean interval width normalized by the
//! trajectory's own true-value range. Evaluation queries every grid point
//! of the unobserved tail — training only ever saw n_loc sampled points —
//! and consumes order-fixed intervals exactly as the inference path emits
//! them. Raw-pair crossings are reported as a diagnostic rate.

use crate::data::{self, Trajectory};
use crate::error::{QafError, Result};
use crate::model::{order_fixed, QafModel};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Prediction interval coverage probability over one set of points.
pub fn picp(targets: &[f64], lowers: &[f64], uppers: &[f64]) -> Result<f64> {
    if targets.is_empty() || targets.len() != lowers.len() || targets.len() != uppers.len() {
        return Err(QafError::Contract(format!(
            "picp wants equal nonempty lengths, got {}/{}/{}",
            targets.len(),
            lowers.len(),
            uppers.len()
        )));
    }
    let mut covered = 0usize;
    for ((&y, &l), &u) in targets.iter().zip(lowers).zip(uppers) {
        if y >= l && y <= u {
            covered += 1;
        }
    }
    Ok(covered as f64 / targets.len() as f64)
}

/// Prediction interval normalized average width; the normalizer is the
/// range of the true targets.
pub fn pinaw(targets: &[f64], lowers: &[f64], uppers: &[f64]) -> Result<f64> {
    if targets.is_empty() || targets.len() != lowers.len() || targets.len() != uppers.len() {
        return Err(QafError::Contract(format!(
            "pinaw wants equal nonempty lengths, got {}/{}/{}",
            targets.len(),
            lowers.len(),
            uppers.len()
        )));
    }
    let y_max = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_min = targets.iter().cloned().fold(f64::INFINITY, f64::min);
    if y_max <= y_min {
        return Err(QafError::DegenerateRange(format!(
            "constant targets (range [{y_min}, {y_max}]) make PINAW undefined"
        )));
    }
    let range = y_max - y_min;
    let mut acc = 0.0;
    for (&l, &u) in lowers.iter().zip(uppers) {
        acc += (u - l) / range;
    }
    Ok(acc / targets.len() as f64)
}

/// Per-trajectory interval quality.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub traj_id: u32,
    pub picp: f64,
    pub pinaw: f64,
    /// Fraction of query points whose raw pair had lo > hi.
    pub crossing_rate: f64,
    pub n_points: usize,
}

/// Evaluation summary: per-trajectory rows plus their means.
#[derive(Debug, Clone)]
pub struct IntervalReport {
    pub per_trajectory: Vec<TrajectoryMetrics>,
    pub mean_picp: f64,
    pub mean_pinaw: f64,
    pub mean_crossing_rate: f64,
    pub dt_obs: f64,
    pub alpha: f64,
    /// The conformal offset applied, when any.
    pub q_hat: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for v in values {
        acc += v;
        n += 1;
    }
    acc / n as f64
}

/// Evaluates raw or calibrated intervals over every unobserved-tail grid
/// point of each test trajectory.
pub fn evaluate_model(
    model: &QafModel,
    q_hat: Option<f64>,
    trajectories: &[Trajectory],
    dt_obs: f64,
) -> Result<IntervalReport> {
    if trajectories.is_empty() {
        return Err(QafError::Contract("no test trajectories".into()));
    }
    let config = model.config();
    let offset = q_hat.unwrap_or(0.0);

    let per_trajectory: Vec<TrajectoryMetrics> = trajectories
        .par_iter()
        .enumerate()
        .map(|(idx, traj)| -> Result<TrajectoryMetrics> {
            let input = data::padded_input(traj, dt_obs, config.m, config.t_max_input)?;
            let (_, tail) = data::segment(traj, dt_obs)?;
            let phi = model.branch_forward(&input)?;

            let mut targets = Vec::with_capacity(tail.times.len());
            let mut lowers = Vec::with_capacity(tail.times.len());
            let mut uppers = Vec::with_capacity(tail.times.len());
            let mut crossings = 0usize;
            for (&t, &y) in tail.times.iter().zip(&tail.values) {
                if !model.in_output_domain(t) {
                    break;
                }
                let psi = model.trunk_forward(t)?;
                let (lo_raw, hi_raw) = model.quantile_bounds(&phi, &psi)?;
                if lo_raw > hi_raw {
                    crossings += 1;
                }
                let (lo, hi) = order_fixed(lo_raw - offset, hi_raw + offset);
                targets.push(y);
                lowers.push(lo);
                uppers.push(hi);
            }
            Ok(TrajectoryMetrics {
                traj_id: idx as u32,
                picp: picp(&targets, &lowers, &uppers)?,
                pinaw: pinaw(&targets, &lowers, &uppers)?,
                crossing_rate: crossings as f64 / targets.len() as f64,
                n_points: targets.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(IntervalReport {
        mean_picp: mean(per_trajectory.iter().map(|m| m.picp)),
        mean_pinaw: mean(per_trajectory.iter().map(|m| m.pinaw)),
        mean_crossing_rate: mean(per_trajectory.iter().map(|m| m.crossing_rate)),
        per_trajectory,
        dt_obs,
        alpha: config.alpha,
        q_hat,
    })
}

/// Report CSV: commented header with the config echo, one row per
/// trajectory, one aggregate footer row.
pub fn render_report(report: &IntervalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# qafdon interval report");
    let _ = writeln!(out, "# dt_obs {:?}", report.dt_obs);
    let _ = writeln!(out, "# alpha {:?}", report.alpha);
    let _ = writeln!(out, "# calibrated {}", report.q_hat.is_some());
    if let Some(q) = report.q_hat {
        let _ = writeln!(out, "# q_hat {q:?}");
    }
    let _ = writeln!(out, "# n_trajectories {}", report.per_trajectory.len());
    let _ = writeln!(out, "# pinaw normalization: per-trajectory true-value range");
    let _ = writeln!(out, "traj_id,picp,pinaw,crossing_rate,n_points");
    for m in &report.per_trajectory {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{}",
            m.traj_id, m.picp, m.pinaw, m.crossing_rate, m.n_points
        );
    }
    let total: usize = report.per_trajectory.iter().map(|m| m.n_points).sum();
    let _ = writeln!(
        out,
        "aggregate,{:?},{:?},{:?},{}",
        report.mean_picp, report.mean_pinaw, report.mean_crossing_rate, total
    );
    out
}

pub fn write_report(report: &IntervalReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report))?;
    Ok(())
}

/// One (t, truth, lo_raw, hi_raw, lo_cal, hi_cal) sample for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub t: f64,
    pub truth: f64,
    pub lo_raw: f64,
    pub hi_raw: f64,
    pub lo_cal: f64,
    pub hi_cal: f64,
}

/// Interval curves over one trajectory's unobserved tail. Without a
/// conformal offset the calibrated columns equal the raw ones.
pub fn plot_data(
    model: &QafModel,
    q_hat: Option<f64>,
    traj: &Trajectory,
    dt_obs: f64,
) -> Result<Vec<PlotRow>> {
    let config = model.config();
    let input = data::padded_input(traj, dt_obs, config.m, config.t_max_input)?;
    let (_, tail) = data::segment(traj, dt_obs)?;
    let phi = model.branch_forward(&input)?;
    let offset = q_hat.unwrap_or(0.0);
    let mut rows = Vec::with_capacity(tail.times.len());
    for (&t, &y) in tail.times.iter().zip(&tail.values) {
        if !model.in_output_domain(t) {
            break;
        }
        let psi = model.trunk_forward(t)?;
        let (lo_raw, hi_raw) = model.quantile_bounds(&phi, &psi)?;
        let (lo_r, hi_r) = order_fixed(lo_raw, hi_raw);
        let (lo_c, hi_c) = order_fixed(lo_raw - offset, hi_raw + offset);
        rows.push(PlotRow {
            t,
            truth: y,
            lo_raw: lo_r,
            hi_raw: hi_r,
            lo_cal: lo_c,
            hi_cal: hi_c,
        });
    }
    Ok(rows)
}

pub fn render_plot_data(rows: &[PlotRow]) -> String {
    let mut out = String::from("t,truth,lo_raw,hi_raw,lo_cal,hi_cal\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?}",
            r.t, r.truth, r.lo_raw, r.hi_raw, r.lo_cal, r.hi_cal
        );
    }
    out
}

/// Pipeline stage an artifact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Finetuned,
    Conformal,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
            Stage::Conformal => "conformal",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = QafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "finetuned" => Ok(Stage::Finetuned),
            "conformal" => Ok(Stage::Conformal),
            other => Err(QafError::Config(format!(
                "unknown stage '{other}' (expected pretrained, finetuned, or conformal)"
            ))),
        }
    }
}

/// One sweep cell address.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepKey {
    pub dt_obs: f64,
    pub dataset_size: usize,
    pub stage: Stage,
}

/// Evaluated sweep cell; `None` metrics mark an absent artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub key: SweepKey,
    pub mean_picp: Option<f64>,
    pub mean_pinaw: Option<f64>,
}

/// Builds the full grid backing coverage/width-vs-Δt_obs curves. `lookup`
/// evaluates one cell; a `None` marks the artifact as absent and the sweep
/// continues.
pub fn sweep(
    dt_obs_values: &[f64],
    dataset_sizes: &[usize],
    stages: &[Stage],
    mut lookup: impl FnMut(&SweepKey) -> Option<(f64, f64)>,
) -> Vec<SweepCell> {
    let mut cells = Vec::with_capacity(dt_obs_values.len() * dataset_sizes.len() * stages.len());
    for &dt_obs in dt_obs_values {
        for &dataset_size in dataset_sizes {
            for &stage in stages {
                let key = SweepKey {
                    dt_obs,
                    dataset_size,
                    stage,
                };
                let found = lookup(&key);
                cells.push(SweepCell {
                    key,
                    mean_picp: found.map(|(p, _)| p),
                    mean_pinaw: found.map(|(_, w)| w),
                });
            }
        }
    }
    cells
}

pub fn render_sweep(cells: &[SweepCell]) -> String {
    let mut out = String::from("dt_obs,dataset_size,stage,mean_picp,mean_pinaw\n");
    for c in cells {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:?}"));
        let _ = writeln!(
            out,
            "{:?},{},{},{},{}",
            c.key.dt_obs,
            c.key.dataset_size,
            c.key.stage.as_str(),
            fmt(c.mean_picp),
            fmt(c.mean_pinaw)
        );
    }
    out
}
