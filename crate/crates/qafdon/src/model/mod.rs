//! QAF operator model: attention branch, Fourier-feature trunk, and
//! shared-basis quantile heads.
//!
//! The branch network embeds the padded input function, runs single-head
//! self-attention, mean-pools over time, and maps the pooled vector to the
//! base basis φ ∈ R^p. The trunk maps a query time through random Fourier
//! features to ψ ∈ R^p. Four head networks turn (φ, ψ) into quantile bases
//! whose inner products are the lower and upper bounds of the raw interval.
//! φ feeds the branch-side heads and ψ the trunk-side heads.

mod checkpoint;
mod forward;

pub use checkpoint::{file_sha256, load_checkpoint, save_checkpoint};
pub use forward::pinball_loss;

use crate::error::{QafError, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture and interval hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Sensor count of the padded input function.
    pub m: usize,
    /// Attention embedding width.
    pub d: usize,
    /// Base basis count shared by branch and trunk.
    pub p: usize,
    /// Quantile basis count produced by the heads.
    pub s: usize,
    /// Number of random Fourier rows.
    pub fourier_m: usize,
    /// Gaussian scale σ of the Fourier matrix.
    pub fourier_sigma: f64,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Miscoverage level α; the heads target quantiles α/2 and 1−α/2.
    pub alpha: f64,
    /// End of the padded input window [0, T_max] in seconds.
    pub t_max_input: f64,
    /// Prediction end T in seconds.
    pub horizon: f64,
    /// Mask padded sensors inside attention and pooling. Off by default:
    /// zeros are fed through attention unmasked.
    #[serde(default)]
    pub mask_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 256,
            d: 16,
            p: 8,
            s: 8,
            fourier_m: 16,
            fourier_sigma: 2.0,
            branch_hidden: vec![32],
            trunk_hidden: vec![32],
            head_hidden: vec![16],
            alpha: 0.05,
            t_max_input: 2.25,
            horizon: 8.5,
            mask_padding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.d < 1 || self.fourier_m < 1 {
            return Err(QafError::Config(
                "m, d, and fourier_m must all be at least 1".into(),
            ));
        }
        if self.p < 1 || self.s < 1 {
            return Err(QafError::Config("p and s must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(QafError::Config(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.fourier_sigma <= 0.0 {
            return Err(QafError::Config(format!(
                "fourier_sigma must be positive, got {}",
                self.fourier_sigma
            )));
        }
        if !(self.t_max_input > 0.0 && self.t_max_input < self.horizon) {
            return Err(QafError::Config(format!(
                "need 0 < t_max_input < horizon, got {} vs {}",
                self.t_max_input, self.horizon
            )));
        }
        Ok(())
    }

    /// Quantile levels (α/2, 1−α/2) targeted by the two heads.
    pub fn quantile_levels(&self) -> (f64, f64) {
        (self.alpha / 2.0, 1.0 - self.alpha / 2.0)
    }

    /// Uniform sensor grid over [0, t_max_input].
    pub fn sensor_times(&self) -> Vec<f64> {
        let m = self.m;
        if m == 1 {
            return vec![0.0];
        }
        (0..m)
            .map(|j| j as f64 * self.t_max_input / (m - 1) as f64)
            .collect()
    }
}

/// Input function sampled on the fixed sensor grid, zero beyond `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInput {
    values: Vec<f64>,
    valid_len: usize,
}

impl PaddedInput {
    pub fn new(values: Vec<f64>, valid_len: usize) -> Result<Self> {
        if valid_len < 1 || valid_len > values.len() {
            return Err(QafError::Contract(format!(
                "valid_len {} out of range for {} sensors",
                valid_len,
                values.len()
            )));
        }
        if values[valid_len..].iter().any(|&v| v != 0.0) {
            return Err(QafError::Contract(
                "padded tail must be exactly zero".into(),
            ));
        }
        Ok(Self { values, valid_len })
    }

    /// Pads observed samples with zeros up to `m` sensors.
    pub fn from_observed(observed: &[f64], m: usize) -> Result<Self> {
        if observed.is_empty() || observed.len() > m {
            return Err(QafError::Contract(format!(
                "observed length {} must lie in 1..={m}",
                observed.len()
            )));
        }
        let mut values = observed.to_vec();
        values.resize(m, 0.0);
        Ok(Self {
            values,
            valid_len: observed.len(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }
}

/// One training sample: input function, query time, target value.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub input: PaddedInput,
    pub t: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
}

/// (weight index, bias index) pairs per layer, pointing into the flat
/// parameter list.
#[derive(Debug, Clone)]
pub(crate) struct MlpLayout {
    pub layers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub branch: MlpLayout,
    pub trunk: MlpLayout,
    pub head_lower_branch: MlpLayout,
    pub head_lower_trunk: MlpLayout,
    pub head_upper_branch: MlpLayout,
    pub head_upper_trunk: MlpLayout,
}

/// All trainable parameters plus the fixed Fourier matrix.
///
/// The trainable parameters form a flat ordered list so federated averaging,
/// checkpointing, and the optimizer all agree on ordering. `trunk_b` is
/// sampled once at construction and never updated by the optimizer.
#[derive(Debug, Clone)]
pub struct QafModel {
    config: ModelConfig,
    seed: u64,
    trunk_b: Tensor,
    pub(crate) params: Vec<Param>,
    pub(crate) layout: Layout,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

struct ParamBuilder<'r, R: Rng> {
    params: Vec<Param>,
    rng: &'r mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let value = glorot(self.rng, rows, cols);
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        self.params.len() - 1
    }

    fn bias(&mut self, name: &str, cols: usize) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            value: Tensor::zeros(1, cols),
        });
        self.params.len() - 1
    }

    fn mlp(&mut self, prefix: &str, dims: &[usize]) -> MlpLayout {
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let w = self.weight(&format!("{prefix}.{i}.w"), pair[0], pair[1]);
            let b = self.bias(&format!("{prefix}.{i}.b"), pair[1]);
            layers.push((w, b));
        }
        MlpLayout { layers }
    }
}

fn mlp_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

impl QafModel {
    /// Builds a model with Glorot-uniform weights, zero biases, and a fixed
    /// Fourier matrix sampled from N(0, σ²), all keyed by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;

        let mut init_rng = rng::stream(seed, &[tag::MODEL_INIT]);
        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: &mut init_rng,
        };
        let embed_w = b.weight("embed.w", 1, config.d);
        let embed_b = b.bias("embed.b", config.d);
        let wq = b.weight("attn.wq", config.d, config.d);
        let wk = b.weight("attn.wk", config.d, config.d);
        let wv = b.weight("attn.wv", config.d, config.d);
        let branch = b.mlp("branch", &mlp_dims(config.d, &config.branch_hidden, config.p));
        let trunk = b.mlp(
            "trunk",
            &mlp_dims(2 * config.fourier_m, &config.trunk_hidden, config.p),
        );
        let head_dims = mlp_dims(config.p, &config.head_hidden, config.s);
        let head_lower_branch = b.mlp("head_lb", &head_dims);
        let head_lower_trunk = b.mlp("head_lt", &head_dims);
        let head_upper_branch = b.mlp("head_ub", &head_dims);
        let head_upper_trunk = b.mlp("head_ut", &head_dims);
        let params = b.params;

        let mut fourier_rng = rng::stream(seed, &[tag::FOURIER]);
        let normal = Normal::new(0.0, config.fourier_sigma)
            .map_err(|e| QafError::Config(format!("fourier distribution: {e}")))?;
        let trunk_b = Tensor::matrix(
            config.fourier_m,
            1,
            (0..config.fourier_m)
                .map(|_| normal.sample(&mut fourier_rng))
                .collect(),
        )?;

        Ok(Self {
            config,
            seed,
            trunk_b,
            params,
            layout: Layout {
                embed_w,
                embed_b,
                wq,
                wk,
                wv,
                branch,
                trunk,
                head_lower_branch,
                head_lower_trunk,
                head_upper_branch,
                head_upper_trunk,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trunk_b(&self) -> &Tensor {
        &self.trunk_b
    }

    /// Replaces the fixed Fourier matrix (checkpoint restore, tests).
    pub fn set_trunk_b(&mut self, trunk_b: Tensor) -> Result<()> {
        if trunk_b.shape() != self.trunk_b.shape() {
            return Err(QafError::Shape(format!(
                "trunk_b shape {:?} vs {:?}",
                trunk_b.shape(),
                self.trunk_b.shape()
            )));
        }
        self.trunk_b = trunk_b;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total number of trainable scalars.
    pub fn flat_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.len()).collect()
    }

    pub fn param_name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Overwrites one named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| QafError::Contract(format!("no parameter named '{name}'")))?;
        if param.value.shape() != value.shape() {
            return Err(QafError::Shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    /// All trainable parameters concatenated in optimizer order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Restores parameters from a flat vector in optimizer order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(QafError::Shape(format!(
                "flat parameter vector has {} entries, model wants {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Identical architecture check used before federated averaging.
    pub fn same_architecture(&self, other: &QafModel) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Order-fixes a raw quantile pair for inference: (min, max).
pub fn order_fixed(lo: f64, hi: f64) -> (f64, f64) {
    if lo <= hi {
        (lo, hi)
    } else {
        (hi, lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            m: 8,
            d: 4,
            p: 3,
            s: 2,
            fourier_m: 4,
            fourier_sigma: 1.0,
            branch_hidden: vec![5],
            trunk_hidden: vec![5],
            head_hidden: vec![],
            alpha: 0.1,
            t_max_input: 1.0,
            horizon: 4.0,
            mask_padding: false,
        }
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut c = tiny_config();
        c.alpha = 1.0;
        assert!(matches!(c.validate(), Err(QafError::Config(_))));
        let mut c = tiny_config();
        c.p = 0;
        assert!(matches!(c.validate(), Err(QafError::Config(_))));
        let mut c = tiny_config();
        c.t_max_input = 5.0;
        assert!(matches!(c.validate(), Err(QafError::Config(_))));
        let mut c = tiny_config();
        c.fourier_sigma = 0.0;
        assert!(matches!(c.validate(), Err(QafError::Config(_))));
    }

    #[test]
    fn padded_input_enforces_zero_tail() {
        assert!(PaddedInput::new(vec![1.0, 2.0, 0.5], 2).is_err());
        let ok = PaddedInput::new(vec![1.0, 2.0, 0.0], 2).unwrap();
        assert_eq!(ok.valid_len(), 2);
        let padded = PaddedInput::from_observed(&[1.0, 2.0], 5).unwrap();
        assert_eq!(padded.values(), &[1.0, 2.0, 0.0, 0.0, 0.0]);
        assert!(PaddedInput::from_observed(&[], 5).is_err());
        assert!(PaddedInput::from_observed(&[1.0; 6], 5).is_err());
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = QafModel::new(tiny_config(), 9).unwrap();
        let b = QafModel::new(tiny_config(), 9).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(a.trunk_b().data(), b.trunk_b().data());
        let c = QafModel::new(tiny_config(), 10).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_glorot_limit() {
        let model = QafModel::new(tiny_config(), 3).unwrap();
        for p in &model.params {
            if p.name.ends_with(".b") {
                assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
            }
        }
        let wq = model.param("attn.wq").unwrap();
        let limit = (6.0 / 8.0_f64).sqrt();
        assert!(wq.data().iter().all(|x| x.abs() < limit));
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let mut model = QafModel::new(tiny_config(), 4).unwrap();
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.flat_len());
        let mut doubled = flat.clone();
        doubled.iter_mut().for_each(|x| *x *= 2.0);
        model.set_flat_params(&doubled).unwrap();
        assert_eq!(model.flat_params(), doubled);
        assert!(model.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn sensor_grid_spans_input_window() {
        let c = tiny_config();
        let times = c.sensor_times();
        assert_eq!(times.len(), c.m);
        assert_eq!(times[0], 0.0);
        assert!((times[c.m - 1] - c.t_max_input).abs() < 1e-12);
    }

    #[test]
    fn order_fix_swaps_crossed_pairs() {
        assert_eq!(order_fixed(1.0, 2.0), (1.0, 2.0));
        assert_eq!(order_fixed(2.0, 1.0), (1.0, 2.0));
    }
}
