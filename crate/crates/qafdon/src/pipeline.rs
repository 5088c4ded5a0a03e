//! Run configuration and the pipeline stages behind the CLI subcommands.
//!
//! A [`RunConfig`] is a TOML file with flat key-value sections. Loading it
//! and calling [`RunConfig::resolve`] propagates the master seed, α, and
//! Δt_obs into every section and derives the linked fields (sensor window,
//! horizon), so the persisted resolved config is sufficient to reproduce a
//! run byte for byte. Every stage writes its resolved config next to its
//! outputs.

use crate::conformal::{self, CalibrationArtifact, CalibrationMode};
use crate::data::{self, BusBias, GeneratorConfig};
use crate::error::{QafError, Result};
use crate::eval;
use crate::fed::{self, FedConfig, FineTuneConfig};
use crate::model;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Master knobs shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    /// Worker-thread cap; 1 guarantees bit-reproducible runs.
    pub threads: usize,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Miscoverage level α.
    pub alpha: f64,
    /// Observable post-fault duration Δt_obs in seconds.
    pub dt_obs: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            alpha: 0.05,
            dt_obs: 0.4,
        }
    }
}

/// Generator section: sampling ranges plus the configured buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(flatten)]
    pub generator: GeneratorConfig,
    /// Per-bus offsets; buses not listed here are neutral.
    #[serde(default)]
    pub buses: Vec<BusBias>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            buses: (1..=7).map(BusBias::neutral).collect(),
        }
    }
}

/// The full run configuration; see the module docs for resolution rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: model::ModelConfig,
    pub data: DataSection,
    pub fed: FedConfig,
    pub finetune: FineTuneConfig,
}

impl RunConfig {
    /// Propagates master values into the sections and derives linked
    /// fields. Idempotent; every stage calls this before running.
    pub fn resolve(&mut self) -> Result<()> {
        self.data.generator.dt_obs = self.run.dt_obs;
        self.data.generator.m = self.model.m;
        self.model.alpha = self.run.alpha;
        self.model.t_max_input = self.data.generator.t_max_input();
        self.model.horizon = self.data.generator.horizon;
        self.fed.seed = self.run.seed;
        self.finetune.seed = self.run.seed;
        self.data.generator.validate()?;
        self.model.validate()?;
        self.fed.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| QafError::Config(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| QafError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Bias entry for a bus, neutral when not configured.
    pub fn bus_bias(&self, id: u32) -> BusBias {
        self.data
            .buses
            .iter()
            .find(|b| b.id == id)
            .cloned()
            .unwrap_or_else(|| BusBias::neutral(id))
    }

    /// Writes the fully-resolved config next to a stage's outputs.
    pub fn persist_resolved(&self, dir: &Path, stage: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stage}.resolved.toml"));
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Runs `f` inside a rayon pool capped at `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| QafError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Output paths of one generated bus.
#[derive(Debug, Clone, PartialEq)]
pub struct BusFiles {
    pub bus_id: u32,
    pub dataset: PathBuf,
    pub trajectories: PathBuf,
}

/// Generates trajectories and triplet datasets for the given buses.
pub fn stage_gen_data(
    cfg: &RunConfig,
    buses: &[u32],
    n_per_bus: usize,
    out_dir: &Path,
) -> Result<Vec<BusFiles>> {
    if buses.is_empty() {
        return Err(QafError::Config("no buses selected".into()));
    }
    if n_per_bus == 0 {
        return Err(QafError::Config("trajectories per bus must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let gen = &cfg.data.generator;
    let mut files = Vec::with_capacity(buses.len());
    for &id in buses {
        let bias = cfg.bus_bias(id);
        let (trajs, dataset) = data::generate_bus(&bias, n_per_bus, gen, cfg.run.seed)?;
        let ds_path = out_dir.join(format!("bus_{id}.ds"));
        let traj_path = out_dir.join(format!("bus_{id}.traj"));
        data::io::write_dataset(&dataset, &ds_path)?;
        data::io::write_trajectories(
            &data::io::TrajFileMeta {
                bus_id: id,
                seed: cfg.run.seed,
                grid_step: gen.grid_step,
                horizon: gen.horizon,
            },
            &trajs,
            &traj_path,
        )?;
        files.push(BusFiles {
            bus_id: id,
            dataset: ds_path,
            trajectories: traj_path,
        });
    }
    Ok(files)
}

fn render_fed_telemetry(rows: &[fed::TelemetryRow]) -> String {
    let mut out = String::from("round,bus_id,loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:?}", r.round, r.bus_id, r.loss);
    }
    out
}

/// Federated pre-training over the given dataset files. Writes the final
/// checkpoint, a checkpoint at every averaging event, and the loss
/// telemetry. Returns the final checkpoint path.
pub fn stage_pretrain(
    cfg: &RunConfig,
    dataset_paths: &[PathBuf],
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let datasets = dataset_paths
        .iter()
        .map(|p| data::io::read_dataset(p))
        .collect::<Result<Vec<_>>>()?;
    let mut fed_cfg = cfg.fed.clone();
    fed_cfg.n_clients = datasets.len();

    let out_dir_owned = out_dir.to_path_buf();
    let output = fed::pretrain_with(&cfg.model, &fed_cfg, datasets, |round, model| {
        model::save_checkpoint(model, &out_dir_owned.join(format!("pretrain-round-{round}.ckpt")))
    })?;

    fs::write(
        out_dir.join("pretrain-telemetry.csv"),
        render_fed_telemetry(&output.telemetry),
    )?;
    let ckpt = out_dir.join("pretrained.ckpt");
    model::save_checkpoint(&output.model, &ckpt)?;
    Ok(ckpt)
}

/// Fine-tunes a checkpoint on a target-bus dataset.
pub fn stage_finetune(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let base = model::load_checkpoint(checkpoint)?;
    let dataset = data::io::read_dataset(dataset_path)?;
    let output = fed::finetune(&base, &dataset, &cfg.finetune)?;

    let mut telemetry = String::from("epoch,train_loss,val_loss\n");
    for (epoch, train, val) in &output.telemetry {
        let _ = writeln!(telemetry, "{epoch},{train:?},{val:?}");
    }
    fs::write(out_dir.join("finetune-telemetry.csv"), telemetry)?;
    let ckpt = out_dir.join("finetuned.ckpt");
    model::save_checkpoint(&output.model, &ckpt)?;
    Ok(ckpt)
}

/// Split conformal calibration of a checkpoint against a calibration
/// dataset; the artifact records the checkpoint's content hash.
pub fn stage_calibrate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    mode: CalibrationMode,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let model = model::load_checkpoint(checkpoint)?;
    let dataset = data::io::read_dataset(dataset_path)?;
    let result = conformal::calibrate(&model, &dataset, cfg.run.alpha, mode, cfg.run.seed)?;
    let artifact =
        CalibrationArtifact::from_result(&result, model::file_sha256(checkpoint)?);
    let path = out_dir.join("calibration.cal");
    artifact.save(&path)?;
    Ok(path)
}

/// Evaluates a checkpoint (optionally calibrated) over a trajectory file,
/// writing the report CSV and optional plot-data files for the first
/// `plot_samples` trajectories.
pub fn stage_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    calibration: Option<&Path>,
    trajectories_path: &Path,
    out_dir: &Path,
    plot_samples: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let model = model::load_checkpoint(checkpoint)?;
    let q_hat = match calibration {
        Some(cal_path) => {
            let artifact = CalibrationArtifact::load(cal_path)?;
            artifact.verify_checkpoint(checkpoint)?;
            Some(artifact.q_hat)
        }
        None => None,
    };
    let (_, trajs) = data::io::read_trajectories(trajectories_path)?;
    let report = eval::evaluate_model(&model, q_hat, &trajs, cfg.run.dt_obs)?;
    let report_path = out_dir.join("report.csv");
    eval::write_report(&report, &report_path)?;

    for (i, traj) in trajs.iter().take(plot_samples).enumerate() {
        let rows = eval::plot_data(&model, q_hat, traj, cfg.run.dt_obs)?;
        fs::write(out_dir.join(format!("plot-{i}.csv")), eval::render_plot_data(&rows))?;
    }
    Ok(report_path)
}

/// Predicts the interval curve over the unobserved tail of one trajectory.
pub fn stage_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    calibration: Option<&Path>,
    trajectories_path: &Path,
    index: usize,
    out_file: &Path,
) -> Result<()> {
    let model = model::load_checkpoint(checkpoint)?;
    let q_hat = match calibration {
        Some(cal_path) => {
            let artifact = CalibrationArtifact::load(cal_path)?;
            artifact.verify_checkpoint(checkpoint)?;
            Some(artifact.q_hat)
        }
        None => None,
    };
    let (_, trajs) = data::io::read_trajectories(trajectories_path)?;
    let traj = trajs.get(index).ok_or_else(|| {
        QafError::Data(format!(
            "trajectory index {index} out of range ({} available)",
            trajs.len()
        ))
    })?;
    let rows = eval::plot_data(&model, q_hat, traj, cfg.run.dt_obs)?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_file, eval::render_plot_data(&rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig {
            model: model::ModelConfig {
                m: 12,
                d: 3,
                p: 2,
                s: 2,
                fourier_m: 3,
                fourier_sigma: 1.0,
                branch_hidden: vec![],
                trunk_hidden: vec![],
                head_hidden: vec![],
                ..model::ModelConfig::default()
            },
            fed: FedConfig {
                n_clients: 2,
                k_local: 2,
                total_rounds: 4,
                batch_size: 8,
                ..FedConfig::default()
            },
            finetune: FineTuneConfig {
                max_epochs: 2,
                patience: 2,
                val_fraction: 0.25,
                batch_size: 8,
                ..FineTuneConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.data.generator.n_loc = 4;
        cfg.run.seed = 5;
        cfg.resolve().unwrap();
        cfg
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = tiny_run_config();
        let text = cfg.to_toml();
        let parsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn resolve_propagates_master_values() {
        let mut cfg = tiny_run_config();
        cfg.run.alpha = 0.1;
        cfg.run.dt_obs = 0.6;
        cfg.run.seed = 99;
        cfg.resolve().unwrap();
        assert_eq!(cfg.model.alpha, 0.1);
        assert_eq!(cfg.data.generator.dt_obs, 0.6);
        assert_eq!(cfg.fed.seed, 99);
        assert_eq!(cfg.finetune.seed, 99);
        assert_eq!(cfg.data.generator.m, cfg.model.m);
        assert_eq!(cfg.model.t_max_input, cfg.data.generator.t_max_input());
    }

    #[test]
    fn bus_bias_defaults_to_neutral() {
        let cfg = tiny_run_config();
        assert_eq!(cfg.bus_bias(1), cfg.data.buses[0]);
        assert_eq!(cfg.bus_bias(999), BusBias::neutral(999));
    }

    #[test]
    fn full_pipeline_runs_end_to_end_in_a_tempdir() {
        let cfg = tiny_run_config();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();

        let files = stage_gen_data(&cfg, &[1, 2, 3], 6, &root.join("data")).unwrap();
        assert_eq!(files.len(), 3);
        cfg.persist_resolved(&root.join("data"), "gen-data").unwrap();

        let train: Vec<PathBuf> = files[..2].iter().map(|f| f.dataset.clone()).collect();
        let ckpt_dir = root.join("ckpt");
        let pre = stage_pretrain(&cfg, &train, &ckpt_dir).unwrap();
        assert!(pre.exists());
        // Averaging events at rounds 2 and 4 leave loadable round checkpoints.
        let round2 = model::load_checkpoint(&ckpt_dir.join("pretrain-round-2.ckpt")).unwrap();
        assert_eq!(round2.config(), &cfg.model);
        let round4 = model::load_checkpoint(&ckpt_dir.join("pretrain-round-4.ckpt")).unwrap();
        let final_model = model::load_checkpoint(&pre).unwrap();
        assert_eq!(round4.flat_params(), final_model.flat_params());
        let telemetry =
            std::fs::read_to_string(ckpt_dir.join("pretrain-telemetry.csv")).unwrap();
        // Header plus one row per (round, client).
        assert_eq!(telemetry.lines().count(), 1 + 4 * 2);

        let fine = stage_finetune(&cfg, &pre, &files[2].dataset, &ckpt_dir).unwrap();
        let cal = stage_calibrate(&cfg, &fine, &files[2].dataset, CalibrationMode::Triplet, &ckpt_dir);
        // 6 trajectories × 4 points = 24 calibration scores ≥ 19 needed at α=0.05.
        let cal = cal.unwrap();

        let report_dir = root.join("reports");
        let report = stage_evaluate(&cfg, &fine, Some(&cal), &files[2].trajectories, &report_dir, 1)
            .unwrap();
        let text = std::fs::read_to_string(report).unwrap();
        assert!(text.contains("aggregate,"));
        assert!(report_dir.join("plot-0.csv").exists());

        let out = root.join("predict.csv");
        stage_predict(&cfg, &fine, Some(&cal), &files[2].trajectories, 0, &out).unwrap();
        assert!(out.exists());

        // Calibration hash must reject a different checkpoint.
        let err = stage_evaluate(&cfg, &pre, Some(&cal), &files[2].trajectories, &report_dir, 0)
            .unwrap_err();
        assert!(matches!(err, QafError::ArtifactMismatch(_)));
    }

    #[test]
    fn gen_data_rejects_zero_counts() {
        let cfg = tiny_run_config();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            stage_gen_data(&cfg, &[1], 0, dir.path()),
            Err(QafError::Config(_))
        ));
        assert!(matches!(
            stage_gen_data(&cfg, &[], 5, dir.path()),
            Err(QafError::Config(_))
        ));
    }
}
