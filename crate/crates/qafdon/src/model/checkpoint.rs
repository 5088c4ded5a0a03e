//! Versioned text checkpoints.
//!
//! A checkpoint holds the model config, the RNG seed it was built from, the
//! fixed Fourier matrix, and the flat parameter list with names and shapes.
//! Floats are written in shortest round-trip form, so save → load → save
//! reproduces the file byte for byte.

use super::{ModelConfig, QafModel};
use crate::error::{QafError, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

const MAGIC: &str = "qafdon-checkpoint v1";

fn write_usize_list(out: &mut String, key: &str, values: &[usize]) {
    if values.is_empty() {
        let _ = writeln!(out, "{key} -");
    } else {
        let list: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{key} {}", list.join(","));
    }
}

/// Serializes a model to the checkpoint format.
pub fn render_checkpoint(model: &QafModel) -> String {
    let c = model.config();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "seed {}", model.seed());
    let _ = writeln!(out, "[config]");
    let _ = writeln!(out, "m {}", c.m);
    let _ = writeln!(out, "d {}", c.d);
    let _ = writeln!(out, "p {}", c.p);
    let _ = writeln!(out, "s {}", c.s);
    let _ = writeln!(out, "fourier_m {}", c.fourier_m);
    let _ = writeln!(out, "fourier_sigma {:?}", c.fourier_sigma);
    write_usize_list(&mut out, "branch_hidden", &c.branch_hidden);
    write_usize_list(&mut out, "trunk_hidden", &c.trunk_hidden);
    write_usize_list(&mut out, "head_hidden", &c.head_hidden);
    let _ = writeln!(out, "alpha {:?}", c.alpha);
    let _ = writeln!(out, "t_max_input {:?}", c.t_max_input);
    let _ = writeln!(out, "horizon {:?}", c.horizon);
    let _ = writeln!(out, "mask_padding {}", c.mask_padding);
    let _ = writeln!(out, "[trunk_b]");
    let floats: Vec<String> = model.trunk_b().data().iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(out, "{}", floats.join(" "));
    let _ = writeln!(out, "[params]");
    for p in &model.params {
        let mut line = format!("{} {} {}", p.name, p.value.rows(), p.value.cols());
        for v in p.value.data() {
            let _ = write!(line, " {v:?}");
        }
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "end");
    out
}

pub fn save_checkpoint(model: &QafModel, path: &Path) -> Result<()> {
    fs::write(path, render_checkpoint(model))?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.lineno += 1;
        self.lines
            .next()
            .ok_or_else(|| QafError::Data(format!("checkpoint truncated at line {}", self.lineno)))
    }

    fn expect(&mut self, what: &str) -> Result<()> {
        let line = self.next()?;
        if line != what {
            return Err(QafError::Data(format!(
                "line {}: expected '{what}', got '{line}'",
                self.lineno
            )));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                QafError::Data(format!("line {}: expected '{key} <value>'", self.lineno))
            })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| QafError::Data(format!("bad float '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| QafError::Data(format!("bad integer '{s}'")))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_usize).collect()
}

/// Parses the checkpoint format back into a model.
pub fn parse_checkpoint(text: &str) -> Result<QafModel> {
    let mut r = LineReader {
        lines: text.lines(),
        lineno: 0,
    };
    r.expect(MAGIC)?;
    let seed: u64 = r
        .keyed("seed")?
        .parse()
        .map_err(|_| QafError::Data("bad seed".into()))?;
    r.expect("[config]")?;
    let config = ModelConfig {
        m: parse_usize(r.keyed("m")?)?,
        d: parse_usize(r.keyed("d")?)?,
        p: parse_usize(r.keyed("p")?)?,
        s: parse_usize(r.keyed("s")?)?,
        fourier_m: parse_usize(r.keyed("fourier_m")?)?,
        fourier_sigma: parse_f64(r.keyed("fourier_sigma")?)?,
        branch_hidden: parse_usize_list(r.keyed("branch_hidden")?)?,
        trunk_hidden: parse_usize_list(r.keyed("trunk_hidden")?)?,
        head_hidden: parse_usize_list(r.keyed("head_hidden")?)?,
        alpha: parse_f64(r.keyed("alpha")?)?,
        t_max_input: parse_f64(r.keyed("t_max_input")?)?,
        horizon: parse_f64(r.keyed("horizon")?)?,
        mask_padding: match r.keyed("mask_padding")? {
            "true" => true,
            "false" => false,
            other => return Err(QafError::Data(format!("bad mask_padding '{other}'"))),
        },
    };

    let mut model = QafModel::new(config, seed)?;

    r.expect("[trunk_b]")?;
    let trunk_values: Vec<f64> = r
        .next()?
        .split(' ')
        .map(parse_f64)
        .collect::<Result<_>>()?;
    if trunk_values.len() != model.config().fourier_m {
        return Err(QafError::Data(format!(
            "trunk_b has {} entries, config wants {}",
            trunk_values.len(),
            model.config().fourier_m
        )));
    }
    let fm = model.config().fourier_m;
    model.set_trunk_b(Tensor::matrix(fm, 1, trunk_values)?)?;

    r.expect("[params]")?;
    for i in 0..model.params.len() {
        let line = r.next()?;
        let mut fields = line.split(' ');
        let name = fields
            .next()
            .ok_or_else(|| QafError::Data("empty parameter line".into()))?;
        if name != model.params[i].name {
            return Err(QafError::Data(format!(
                "parameter {i} is '{name}', expected '{}'",
                model.params[i].name
            )));
        }
        let rows = parse_usize(fields.next().ok_or_else(|| {
            QafError::Data(format!("parameter '{name}' missing row count"))
        })?)?;
        let cols = parse_usize(fields.next().ok_or_else(|| {
            QafError::Data(format!("parameter '{name}' missing column count"))
        })?)?;
        let values: Vec<f64> = fields.map(parse_f64).collect::<Result<_>>()?;
        if rows != model.params[i].value.rows()
            || cols != model.params[i].value.cols()
            || values.len() != rows * cols
        {
            return Err(QafError::Data(format!(
                "parameter '{name}' has shape {rows}×{cols} with {} values, expected {:?}",
                values.len(),
                model.params[i].value.shape()
            )));
        }
        model.params[i].value = Tensor::matrix(rows, cols, values)?;
    }
    r.expect("end")?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<QafModel> {
    let text = fs::read_to_string(path).map_err(|e| {
        QafError::Data(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    parse_checkpoint(&text)
}

/// SHA-256 of a file's bytes, hex-encoded. Links calibration artifacts to
/// the exact checkpoint they were computed from.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}
