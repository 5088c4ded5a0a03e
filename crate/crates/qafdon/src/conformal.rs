//! Split conformal calibration of the raw quantile intervals.
//!
//! The score of a calibration triplet is max{lo − G, G − hi} over the raw
//! (not order-fixed) quantile heads; it is negative exactly when the target
//! sits strictly inside the raw interval. The conformal offset q̂ is the
//! k-th smallest score with k = ⌈(n+1)(1−α)⌉, and the calibrated interval
//! widens both bounds by q̂ (narrowing them when q̂ is negative). Under
//! exchangeability of calibration and test triplets this guarantees
//! marginal coverage at least 1−α.
//!
//! Triplets sharing a trajectory are dependent, so two calibration modes
//! exist: `Triplet` scores every calibration triplet, `Trajectory` keeps one
//! random triplet per source trajectory.

use crate::data::TripletDataset;
use crate::error::{QafError, Result};
use crate::model::{QafModel, Triplet};
use crate::rng::{self, tag};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Exchangeability unit used to build the score set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationMode {
    /// Score every calibration triplet.
    Triplet,
    /// Score one randomly chosen triplet per source trajectory.
    Trajectory,
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Triplet => "triplet",
            CalibrationMode::Trajectory => "trajectory",
        }
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = QafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(CalibrationMode::Triplet),
            "trajectory" => Ok(CalibrationMode::Trajectory),
            other => Err(QafError::Config(format!(
                "unknown calibration mode '{other}' (expected triplet or trajectory)"
            ))),
        }
    }
}

/// Conformal offset with the score set that produced it.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// The ⌈(n+1)(1−α)⌉-th smallest score.
    pub q_hat: f64,
    /// Calibration scores in ascending order.
    pub scores: Vec<f64>,
    pub n_cal: usize,
    pub alpha: f64,
    pub mode: CalibrationMode,
}

/// Score of one triplet: max{lo − G, G − hi} over the raw quantile pair.
pub fn score(model: &QafModel, triplet: &Triplet) -> Result<f64> {
    let (lo, hi) = model.predict_quantiles(&triplet.input, triplet.t)?;
    Ok((lo - triplet.target).max(triplet.target - hi))
}

/// Order-statistic rank k = ⌈(n+1)(1−α)⌉, guarded against float roundoff
/// pushing an exactly-integer product over the next integer.
fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - 1e-9).ceil() as usize
}

/// Smallest calibration size for which the rank exists at level α.
pub fn min_calibration_size(alpha: f64) -> usize {
    let mut n = 1;
    while conformal_rank(n, alpha) > n {
        n += 1;
    }
    n
}

/// Computes q̂ from raw scores.
pub fn calibrate_scores(
    mut scores: Vec<f64>,
    alpha: f64,
    mode: CalibrationMode,
) -> Result<CalibrationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(QafError::Config(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let n = scores.len();
    if n == 0 {
        return Err(QafError::Calibration("no calibration scores".into()));
    }
    let k = conformal_rank(n, alpha);
    if k > n {
        return Err(QafError::Calibration(format!(
            "{n} calibration points cannot support level alpha={alpha}; \
             need at least n={}",
            min_calibration_size(alpha)
        )));
    }
    scores.sort_by(f64::total_cmp);
    Ok(CalibrationResult {
        q_hat: scores[k - 1],
        n_cal: n,
        scores,
        alpha,
        mode,
    })
}

/// Scores a calibration set and computes the conformal offset.
///
/// `seed` only matters in trajectory mode, where it keys the per-trajectory
/// triplet choice.
pub fn calibrate(
    model: &QafModel,
    cal: &TripletDataset,
    alpha: f64,
    mode: CalibrationMode,
    seed: u64,
) -> Result<CalibrationResult> {
    let chosen: Vec<&Triplet> = match mode {
        CalibrationMode::Triplet => cal.triplets.iter().collect(),
        CalibrationMode::Trajectory => {
            // Group by trajectory id regardless of record order.
            let mut per_traj: std::collections::BTreeMap<u32, Vec<&Triplet>> =
                std::collections::BTreeMap::new();
            for (tr, &tid) in cal.triplets.iter().zip(&cal.traj_ids) {
                per_traj.entry(tid).or_default().push(tr);
            }
            per_traj
                .values()
                .enumerate()
                .map(|(i, group)| {
                    let mut rng = rng::stream(seed, &[tag::SPLIT, cal.meta.bus_id as u64, i as u64]);
                    group[rng.random_range(0..group.len())]
                })
                .collect()
        }
    };
    let scores = chosen
        .par_iter()
        .map(|tr| score(model, tr))
        .collect::<Result<Vec<f64>>>()?;
    calibrate_scores(scores, alpha, mode)
}

/// Calibrated interval: the raw pair widened by q̂ on each side. The result
/// is not order-fixed; inference paths apply [`crate::model::order_fixed`].
pub fn calibrated_interval(
    model: &QafModel,
    calibration: &CalibrationResult,
    input: &crate::model::PaddedInput,
    t: f64,
) -> Result<(f64, f64)> {
    let (lo, hi) = model.predict_quantiles(input, t)?;
    Ok(widen(lo, hi, calibration.q_hat))
}

/// Symmetric widening by q̂; the width grows by exactly 2·q̂.
pub fn widen(lo: f64, hi: f64, q_hat: f64) -> (f64, f64) {
    (lo - q_hat, hi + q_hat)
}

const ARTIFACT_MAGIC: &str = "qafdon-calibration v1";
const HISTOGRAM_BINS: usize = 20;

/// Calibration artifact: everything needed to apply (and audit) a
/// calibrated predictor, linked to its checkpoint by content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub alpha: f64,
    pub n_cal: usize,
    pub q_hat: f64,
    pub mode: String,
    pub checkpoint_sha256: String,
    /// (bin lower edge, bin upper edge, count) rows over the score range.
    pub histogram: Vec<(f64, f64, usize)>,
}

impl CalibrationArtifact {
    pub fn from_result(result: &CalibrationResult, checkpoint_sha256: String) -> Self {
        let lo = *result.scores.first().expect("nonempty by construction");
        let hi = *result.scores.last().expect("nonempty by construction");
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        for &s in &result.scores {
            let b = (((s - lo) / span) * HISTOGRAM_BINS as f64) as usize;
            counts[b.min(HISTOGRAM_BINS - 1)] += 1;
        }
        let histogram = counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let w = span / HISTOGRAM_BINS as f64;
                (lo + i as f64 * w, lo + (i + 1) as f64 * w, c)
            })
            .collect();
        Self {
            alpha: result.alpha,
            n_cal: result.n_cal,
            q_hat: result.q_hat,
            mode: result.mode.as_str().to_string(),
            checkpoint_sha256,
            histogram,
        }
    }

    /// A calibrated predictor is invalid without a matching checkpoint hash.
    pub fn verify_checkpoint(&self, checkpoint_path: &Path) -> Result<()> {
        let actual = crate::model::file_sha256(checkpoint_path)?;
        if actual != self.checkpoint_sha256 {
            return Err(QafError::ArtifactMismatch(format!(
                "calibration was computed for checkpoint {}, but {} hashes to {}",
                self.checkpoint_sha256,
                checkpoint_path.display(),
                actual
            )));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{ARTIFACT_MAGIC}");
        let _ = writeln!(out, "alpha {:?}", self.alpha);
        let _ = writeln!(out, "n_cal {}", self.n_cal);
        let _ = writeln!(out, "q_hat {:?}", self.q_hat);
        let _ = writeln!(out, "mode {}", self.mode);
        let _ = writeln!(out, "checkpoint_sha256 {}", self.checkpoint_sha256);
        let _ = writeln!(out, "histogram {}", self.histogram.len());
        for (lo, hi, count) in &self.histogram {
            let _ = writeln!(out, "bin {lo:?} {hi:?} {count}");
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| QafError::Data("calibration artifact truncated".into()))
        };
        if next()? != ARTIFACT_MAGIC {
            return Err(QafError::Data("not a calibration artifact".into()));
        }
        let keyed = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| QafError::Data(format!("calibration artifact: expected '{key}'")))
        };
        let parse_f = |s: String| -> Result<f64> {
            s.parse()
                .map_err(|_| QafError::Data(format!("calibration artifact: bad float '{s}'")))
        };
        let alpha = parse_f(keyed(next()?, "alpha")?)?;
        let n_cal = keyed(next()?, "n_cal")?
            .parse()
            .map_err(|_| QafError::Data("calibration artifact: bad n_cal".into()))?;
        let q_hat = parse_f(keyed(next()?, "q_hat")?)?;
        let mode = keyed(next()?, "mode")?;
        let checkpoint_sha256 = keyed(next()?, "checkpoint_sha256")?;
        let bins: usize = keyed(next()?, "histogram")?
            .parse()
            .map_err(|_| QafError::Data("calibration artifact: bad histogram size".into()))?;
        let mut histogram = Vec::with_capacity(bins);
        for _ in 0..bins {
            let row = keyed(next()?, "bin")?;
            let parts: Vec<&str> = row.split(' ').collect();
            if parts.len() != 3 {
                return Err(QafError::Data("calibration artifact: bad bin row".into()));
            }
            histogram.push((
                parse_f(parts[0].to_string())?,
                parse_f(parts[1].to_string())?,
                parts[2]
                    .parse()
                    .map_err(|_| QafError::Data("calibration artifact: bad bin count".into()))?,
            ));
        }
        if next()? != "end" {
            return Err(QafError::Data("calibration artifact: missing end".into()));
        }
        Ok(Self {
            alpha,
            n_cal,
            q_hat,
            mode,
            checkpoint_sha256,
            histogram,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            QafError::Data(format!("cannot read calibration {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }
}
