//! Dataset and trajectory file formats.
//!
//! Both formats are self-describing line-oriented text. Floats are written
//! in shortest round-trip form, so identical data always produces identical
//! bytes and a read-back preserves every bit.
//!
//! Triplet dataset (`.ds`):
//! ```text
//! qafdon-dataset v1
//! bus_id <u32>
//! seed <u64>
//! m <usize>
//! n_loc <usize>
//! dt_obs <f64>
//! grid_step <f64>
//! t_max_input <f64>
//! horizon <f64>
//! n_traj <usize>
//! traj <id> <valid_len>          (per trajectory)
//! u <m floats>
//! q <t> <target>                 (n_loc lines)
//! end
//! ```
//!
//! Trajectory file (`.traj`):
//! ```text
//! qafdon-trajectories v1
//! bus_id <u32>
//! seed <u64>
//! grid_step <f64>
//! horizon <f64>
//! n_traj <usize>
//! traj <id>                      (per trajectory)
//! scenario <load_scale> <fault_depth> <t_f> <t_cl> <damping> <osc_freq> <stable>
//! values <floats>
//! end
//! ```

use super::{DatasetMeta, GridScenario, Trajectory, TripletDataset};
use crate::error::{QafError, Result};
use crate::model::{PaddedInput, Triplet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

const DATASET_MAGIC: &str = "qafdon-dataset v1";
const TRAJ_MAGIC: &str = "qafdon-trajectories v1";

fn floats_line(prefix: &str, values: &[f64]) -> String {
    let mut line = String::with_capacity(prefix.len() + values.len() * 12);
    line.push_str(prefix);
    for v in values {
        let _ = write!(line, " {v:?}");
    }
    line.push('\n');
    line
}

/// Serializes a triplet dataset.
pub fn render_dataset(ds: &TripletDataset) -> String {
    let m = &ds.meta;
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC}");
    let _ = writeln!(out, "bus_id {}", m.bus_id);
    let _ = writeln!(out, "seed {}", m.seed);
    let _ = writeln!(out, "m {}", m.m);
    let _ = writeln!(out, "n_loc {}", m.n_loc);
    let _ = writeln!(out, "dt_obs {:?}", m.dt_obs);
    let _ = writeln!(out, "grid_step {:?}", m.grid_step);
    let _ = writeln!(out, "t_max_input {:?}", m.t_max_input);
    let _ = writeln!(out, "horizon {:?}", m.horizon);
    let n_traj = ds.traj_ids.last().map_or(0, |&id| id as usize + 1);
    let _ = writeln!(out, "n_traj {n_traj}");

    let mut i = 0;
    while i < ds.triplets.len() {
        let tid = ds.traj_ids[i];
        let input = &ds.triplets[i].input;
        let _ = writeln!(out, "traj {tid} {}", input.valid_len());
        out.push_str(&floats_line("u", input.values()));
        while i < ds.triplets.len() && ds.traj_ids[i] == tid {
            let tr = &ds.triplets[i];
            let _ = writeln!(out, "q {:?} {:?}", tr.t, tr.target);
            i += 1;
        }
    }
    let _ = writeln!(out, "end");
    out
}

pub fn write_dataset(ds: &TripletDataset, path: &Path) -> Result<()> {
    fs::write(path, render_dataset(ds))?;
    Ok(())
}

struct Reader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, context: &'a str) -> Self {
        Self {
            lines: text.lines(),
            lineno: 0,
            context,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.lineno += 1;
        self.lines.next().ok_or_else(|| {
            QafError::Data(format!("{}: truncated at line {}", self.context, self.lineno))
        })
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.clone().next()
    }

    fn expect(&mut self, what: &str) -> Result<()> {
        let line = self.next()?;
        if line != what {
            return Err(QafError::Data(format!(
                "{} line {}: expected '{what}', got '{line}'",
                self.context, self.lineno
            )));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                QafError::Data(format!(
                    "{} line {}: expected '{key} <value>', got '{line}'",
                    self.context, self.lineno
                ))
            })
    }

    fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.keyed(key)?;
        raw.parse().map_err(|_| {
            QafError::Data(format!(
                "{} line {}: bad value '{raw}' for {key}",
                self.context, self.lineno
            ))
        })
    }
}

fn parse_floats(raw: &str, context: &str) -> Result<Vec<f64>> {
    raw.split(' ')
        .map(|s| {
            s.parse()
                .map_err(|_| QafError::Data(format!("{context}: bad float '{s}'")))
        })
        .collect()
}

/// Parses a triplet dataset file body.
pub fn parse_dataset(text: &str) -> Result<TripletDataset> {
    let mut r = Reader::new(text, "dataset");
    r.expect(DATASET_MAGIC)?;
    let meta = DatasetMeta {
        bus_id: r.keyed_parse("bus_id")?,
        seed: r.keyed_parse("seed")?,
        m: r.keyed_parse("m")?,
        n_loc: r.keyed_parse("n_loc")?,
        dt_obs: r.keyed_parse("dt_obs")?,
        grid_step: r.keyed_parse("grid_step")?,
        t_max_input: r.keyed_parse("t_max_input")?,
        horizon: r.keyed_parse("horizon")?,
    };
    let n_traj: usize = r.keyed_parse("n_traj")?;

    let mut traj_ids = Vec::new();
    let mut triplets = Vec::new();
    for _ in 0..n_traj {
        let header = r.keyed("traj")?;
        let mut parts = header.split(' ');
        let tid: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| QafError::Data("dataset: bad trajectory id".into()))?;
        let valid_len: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| QafError::Data("dataset: bad valid_len".into()))?;
        let values = parse_floats(r.keyed("u")?, "dataset input")?;
        if values.len() != meta.m {
            return Err(QafError::Data(format!(
                "dataset: input has {} sensors, header says {}",
                values.len(),
                meta.m
            )));
        }
        let input = PaddedInput::new(values, valid_len)
            .map_err(|e| QafError::Data(format!("dataset: {e}")))?;
        while r.peek().is_some_and(|l| l.starts_with("q ")) {
            let q = r.keyed("q")?;
            let fields = parse_floats(q, "dataset query")?;
            if fields.len() != 2 {
                return Err(QafError::Data("dataset: query line wants '<t> <target>'".into()));
            }
            traj_ids.push(tid);
            triplets.push(Triplet {
                input: input.clone(),
                t: fields[0],
                target: fields[1],
            });
        }
    }
    r.expect("end")?;
    if triplets.is_empty() {
        return Err(QafError::Data("dataset: no triplets".into()));
    }
    Ok(TripletDataset {
        meta,
        traj_ids,
        triplets,
    })
}

pub fn read_dataset(path: &Path) -> Result<TripletDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| QafError::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_dataset(&text)
}

/// Header of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajFileMeta {
    pub bus_id: u32,
    pub seed: u64,
    pub grid_step: f64,
    pub horizon: f64,
}

/// Serializes full trajectories for evaluation and plotting.
pub fn render_trajectories(meta: &TrajFileMeta, trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRAJ_MAGIC}");
    let _ = writeln!(out, "bus_id {}", meta.bus_id);
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "grid_step {:?}", meta.grid_step);
    let _ = writeln!(out, "horizon {:?}", meta.horizon);
    let _ = writeln!(out, "n_traj {}", trajs.len());
    for (i, traj) in trajs.iter().enumerate() {
        let sc = &traj.scenario;
        let _ = writeln!(out, "traj {i}");
        let _ = writeln!(
            out,
            "scenario {:?} {:?} {:?} {:?} {:?} {:?} {}",
            sc.load_scale, sc.fault_depth, sc.t_f, sc.t_cl, sc.damping, sc.osc_freq, sc.stable
        );
        out.push_str(&floats_line("values", &traj.values));
    }
    let _ = writeln!(out, "end");
    out
}

pub fn write_trajectories(meta: &TrajFileMeta, trajs: &[Trajectory], path: &Path) -> Result<()> {
    fs::write(path, render_trajectories(meta, trajs))?;
    Ok(())
}

/// Parses a trajectory file body.
pub fn parse_trajectories(text: &str) -> Result<(TrajFileMeta, Vec<Trajectory>)> {
    let mut r = Reader::new(text, "trajectories");
    r.expect(TRAJ_MAGIC)?;
    let meta = TrajFileMeta {
        bus_id: r.keyed_parse("bus_id")?,
        seed: r.keyed_parse("seed")?,
        grid_step: r.keyed_parse("grid_step")?,
        horizon: r.keyed_parse("horizon")?,
    };
    let n_traj: usize = r.keyed_parse("n_traj")?;
    let mut trajs = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        r.expect(&format!("traj {i}"))?;
        let sc_fields = r.keyed("scenario")?;
        let parts: Vec<&str> = sc_fields.split(' ').collect();
        if parts.len() != 7 {
            return Err(QafError::Data("trajectories: scenario line wants 7 fields".into()));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| QafError::Data(format!("trajectories: bad float '{s}'")))
        };
        let scenario = GridScenario {
            bus_id: meta.bus_id,
            load_scale: f(parts[0])?,
            fault_depth: f(parts[1])?,
            t_f: f(parts[2])?,
            t_cl: f(parts[3])?,
            damping: f(parts[4])?,
            osc_freq: f(parts[5])?,
            stable: match parts[6] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(QafError::Data(format!(
                        "trajectories: bad stable flag '{other}'"
                    )))
                }
            },
        };
        let values = parse_floats(r.keyed("values")?, "trajectory values")?;
        let times: Vec<f64> = (0..values.len())
            .map(|k| k as f64 * meta.grid_step)
            .collect();
        trajs.push(Trajectory {
            times,
            values,
            scenario,
            grid_step: meta.grid_step,
        });
    }
    r.expect("end")?;
    Ok((meta, trajs))
}

pub fn read_trajectories(path: &Path) -> Result<(TrajFileMeta, Vec<Trajectory>)> {
    let text = fs::read_to_string(path).map_err(|e| {
        QafError::Data(format!("cannot read trajectories {}: {e}", path.display()))
    })?;
    parse_trajectories(&text)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_bus, BusBias, GeneratorConfig};
    use super::*;

    fn sample() -> (Vec<Trajectory>, TripletDataset) {
        let cfg = GeneratorConfig {
            m: 16,
            n_loc: 3,
            ..GeneratorConfig::default()
        };
        generate_bus(&BusBias::neutral(5), 4, &cfg, 31).unwrap()
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let (_, ds) = sample();
        let text = render_dataset(&ds);
        let parsed = parse_dataset(&text).unwrap();
        assert_eq!(parsed.meta, ds.meta);
        assert_eq!(parsed.traj_ids, ds.traj_ids);
        assert_eq!(parsed.triplets, ds.triplets);
        assert_eq!(render_dataset(&parsed), text);
    }

    #[test]
    fn trajectory_roundtrip_is_byte_identical() {
        let (trajs, ds) = sample();
        let meta = TrajFileMeta {
            bus_id: ds.meta.bus_id,
            seed: ds.meta.seed,
            grid_step: ds.meta.grid_step,
            horizon: ds.meta.horizon,
        };
        let text = render_trajectories(&meta, &trajs);
        let (parsed_meta, parsed) = parse_trajectories(&text).unwrap();
        assert_eq!(parsed_meta, meta);
        assert_eq!(parsed, trajs);
        assert_eq!(render_trajectories(&parsed_meta, &parsed), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let (_, ds) = sample();
        let text = render_dataset(&ds);
        assert!(matches!(parse_dataset("nonsense"), Err(QafError::Data(_))));
        let broken = text.replace("dt_obs", "dtobs");
        assert!(matches!(parse_dataset(&broken), Err(QafError::Data(_))));
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_dataset(&truncated), Err(QafError::Data(_))));
    }
}
