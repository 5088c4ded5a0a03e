//! Simulated federated pre-training and target-bus fine-tuning.
//!
//! Each client (one per neighboring bus) runs local Adam steps on its own
//! triplets; every K rounds the parameters are replaced by their uniform
//! mean across clients. Only flat parameter vectors ever cross a client
//! boundary — an instrumented transfer log makes that checkable. Optimizer
//! moments are not averaged; they reset at every synchronization.
//!
//! Fine-tuning continues local Adam on the target-bus dataset with early
//! stopping on a held-out validation split, returning the checkpoint with
//! the best recorded validation loss.

use crate::adam::{AdamParams, AdamState};
use crate::data::TripletDataset;
use crate::error::{QafError, Result};
use crate::model::{ModelConfig, QafModel, Triplet};
use crate::rng::{self, tag};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Federated pre-training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    /// Local rounds between parameter averages (K).
    pub k_local: usize,
    pub total_rounds: usize,
    /// Minibatch size per local round; 0 means full batch.
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 6,
            k_local: 5,
            total_rounds: 400,
            batch_size: 32,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 1 {
            return Err(QafError::Config("need at least one client".into()));
        }
        if self.k_local < 1 {
            return Err(QafError::Config("k_local must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fine-tuning schedule with early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub max_epochs: usize,
    /// Consecutive non-improving validation evaluations before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            patience: 8,
            val_fraction: 0.2,
            batch_size: 32,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(QafError::Config("patience must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(QafError::Config(format!(
                "val_fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One bus participating in federated pre-training.
pub struct ClientState {
    pub bus_id: u32,
    pub model: QafModel,
    pub optimizer: AdamState,
    pub dataset: TripletDataset,
    batch_size: usize,
    seed: u64,
}

impl ClientState {
    pub fn new(model: QafModel, dataset: TripletDataset, fed: &FedConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(QafError::Federation(format!(
                "bus {} has an empty dataset",
                dataset.meta.bus_id
            )));
        }
        let sizes = model.param_sizes();
        Ok(Self {
            bus_id: dataset.meta.bus_id,
            optimizer: AdamState::new(fed.adam, &sizes),
            model,
            dataset,
            batch_size: fed.batch_size,
            seed: fed.seed,
        })
    }

    fn batch_indices(&self, round: usize) -> Vec<usize> {
        let n = self.dataset.len();
        if self.batch_size == 0 || self.batch_size >= n {
            return (0..n).collect();
        }
        let mut rng = rng::stream(self.seed, &[tag::BATCH, self.bus_id as u64, round as u64]);
        (0..self.batch_size).map(|_| rng.random_range(0..n)).collect()
    }
}

/// One minibatch Adam step on this client's data; only this client's
/// parameters change.
pub fn local_round(client: &mut ClientState, round: usize) -> Result<f64> {
    let indices = client.batch_indices(round);
    let batch: Vec<&Triplet> = indices.iter().map(|&i| &client.dataset.triplets[i]).collect();
    let (loss, grads) = client
        .model
        .batch_loss_and_grads(&batch)
        .map_err(|e| QafError::Training(format!("round {round}, bus {}: {e}", client.bus_id)))?;
    let mut tensors = client.model.param_tensors_mut();
    client.optimizer.step(&mut tensors, &grads, |i| {
        format!("bus {} round {round} param {i}", client.bus_id)
    })?;
    Ok(loss)
}

/// Uniform elementwise mean of all clients' flat parameter vectors.
pub fn average_params(clients: &[ClientState]) -> Result<Vec<f64>> {
    let models: Vec<&QafModel> = clients.iter().map(|c| &c.model).collect();
    average_models(&models)
}

fn average_models(models: &[&QafModel]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| QafError::Federation("cannot average zero clients".into()))?;
    for m in &models[1..] {
        if !first.same_architecture(m) {
            return Err(QafError::Federation(
                "client architectures differ; averaging is undefined".into(),
            ));
        }
    }
    let mut mean = vec![0.0; first.flat_len()];
    for m in models {
        for (acc, v) in mean.iter_mut().zip(m.flat_params()) {
            *acc += v;
        }
    }
    let n = models.len() as f64;
    mean.iter_mut().for_each(|x| *x /= n);
    Ok(mean)
}

/// What crossed a client boundary, for privacy-boundary assertions.
#[derive(Debug, Clone, PartialEq)]
pub enum TransferKind {
    /// A flat parameter vector of the given length.
    ParamVector { len: usize },
    /// Raw data records would look like this; the trainer never sends any.
    DataRecords { count: usize },
}

/// One logged cross-client transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub round: usize,
    pub bus_id: u32,
    pub kind: TransferKind,
}

/// One telemetry row per (round, client).
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub round: usize,
    pub bus_id: u32,
    pub loss: f64,
}

/// Result of federated pre-training.
pub struct PretrainOutput {
    /// The final averaged model θ̄.
    pub model: QafModel,
    pub telemetry: Vec<TelemetryRow>,
    /// 1-based round numbers at which averaging happened.
    pub averaging_rounds: Vec<usize>,
    pub transfers: Vec<Transfer>,
}

fn synchronize(
    clients: &mut [ClientState],
    round: usize,
    transfers: &mut Vec<Transfer>,
) -> Result<()> {
    let mean = average_params(clients)?;
    for c in clients.iter_mut() {
        transfers.push(Transfer {
            round,
            bus_id: c.bus_id,
            kind: TransferKind::ParamVector { len: mean.len() },
        });
        c.model.set_flat_params(&mean)?;
        c.optimizer.reset();
    }
    Ok(())
}

/// Federated pre-training over one dataset per neighboring bus.
///
/// All clients start from the same seed-keyed initialization. Rounds run
/// K-at-a-time between synchronizations; `on_average` fires at every
/// averaging event with the freshly averaged model. If the round count is
/// not a multiple of K, one trailing average produces the returned model.
pub fn pretrain_with(
    config: &ModelConfig,
    fed: &FedConfig,
    datasets: Vec<TripletDataset>,
    mut on_average: impl FnMut(usize, &QafModel) -> Result<()>,
) -> Result<PretrainOutput> {
    fed.validate()?;
    if datasets.is_empty() {
        return Err(QafError::Federation("no client datasets".into()));
    }
    if datasets.len() != fed.n_clients {
        return Err(QafError::Federation(format!(
            "config says {} clients but {} datasets were supplied",
            fed.n_clients,
            datasets.len()
        )));
    }
    for ds in &datasets {
        if ds.meta.m != config.m {
            return Err(QafError::Federation(format!(
                "bus {} dataset has m={}, model wants {}",
                ds.meta.bus_id, ds.meta.m, config.m
            )));
        }
    }

    let init = QafModel::new(config.clone(), fed.seed)?;
    let mut clients = datasets
        .into_iter()
        .map(|ds| ClientState::new(init.clone(), ds, fed))
        .collect::<Result<Vec<_>>>()?;

    let mut telemetry = Vec::with_capacity(fed.total_rounds * clients.len());
    let mut transfers = Vec::new();
    let mut averaging_rounds = Vec::new();

    for k in 0..fed.total_rounds {
        let losses: Vec<f64> = clients
            .par_iter_mut()
            .map(|c| local_round(c, k))
            .collect::<Result<Vec<_>>>()?;
        for (c, loss) in clients.iter().zip(losses) {
            telemetry.push(TelemetryRow {
                round: k + 1,
                bus_id: c.bus_id,
                loss,
            });
        }
        if (k + 1) % fed.k_local == 0 {
            synchronize(&mut clients, k + 1, &mut transfers)?;
            averaging_rounds.push(k + 1);
            on_average(k + 1, &clients[0].model)?;
        }
    }

    if fed.total_rounds % fed.k_local != 0 {
        synchronize(&mut clients, fed.total_rounds, &mut transfers)?;
        averaging_rounds.push(fed.total_rounds);
        on_average(fed.total_rounds, &clients[0].model)?;
    }

    let model = if fed.total_rounds == 0 {
        init
    } else {
        clients[0].model.clone()
    };
    Ok(PretrainOutput {
        model,
        telemetry,
        averaging_rounds,
        transfers,
    })
}

pub fn pretrain(
    config: &ModelConfig,
    fed: &FedConfig,
    datasets: Vec<TripletDataset>,
) -> Result<PretrainOutput> {
    pretrain_with(config, fed, datasets, |_, _| Ok(()))
}

/// Tracks the best validation loss and how long since it improved.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_index: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_index: 0,
            since_best: 0,
        }
    }

    /// Records one validation loss; returns true when training should stop.
    pub fn observe(&mut self, index: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_index = index;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_index(&self) -> usize {
        self.best_index
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Result of fine-tuning.
pub struct FinetuneOutput {
    /// Parameters from the best-validation checkpoint θᶠ.
    pub model: QafModel,
    /// (epoch, mean train loss, validation loss) per completed epoch.
    pub telemetry: Vec<(usize, f64, f64)>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Fine-tunes a pre-trained model on the target-bus dataset.
///
/// The dataset is split train/validation by `val_fraction` with a seeded
/// shuffle; after each epoch the mean joint pinball loss on the validation
/// split decides early stopping. The returned parameters come from the
/// minimum-validation checkpoint, never simply the last epoch.
pub fn finetune(
    base: &QafModel,
    dataset: &TripletDataset,
    cfg: &FineTuneConfig,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(QafError::Contract("fine-tuning dataset is empty".into()));
    }
    if dataset.meta.m != base.config().m {
        return Err(QafError::Contract(format!(
            "dataset has m={}, model wants {}",
            dataset.meta.m,
            base.config().m
        )));
    }

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(cfg.seed, &[tag::SPLIT, dataset.meta.bus_id as u64]);
    for i in (1..n).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&Triplet> = val_idx.iter().map(|&i| &dataset.triplets[i]).collect();
    let train: Vec<usize> = train_idx.to_vec();

    let mut model = base.clone();
    let mut optimizer = AdamState::new(cfg.adam, &model.param_sizes());
    let mut best_model = model.clone();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut telemetry = Vec::new();

    if cfg.max_epochs == 0 {
        return Ok(FinetuneOutput {
            model,
            telemetry,
            best_epoch: 0,
            best_val_loss: f64::NAN,
        });
    }

    let batch_size = if cfg.batch_size == 0 || cfg.batch_size > train.len() {
        train.len()
    } else {
        cfg.batch_size
    };

    for epoch in 1..=cfg.max_epochs {
        // One pass over the training split in a per-epoch shuffled order.
        let mut epoch_order = train.clone();
        let mut rng = rng::stream(
            cfg.seed,
            &[tag::BATCH, dataset.meta.bus_id as u64, epoch as u64],
        );
        for i in (1..epoch_order.len()).rev() {
            let j = rng.random_range(0..=i);
            epoch_order.swap(i, j);
        }
        let mut train_loss = 0.0;
        let mut batches = 0;
        for chunk in epoch_order.chunks(batch_size) {
            let batch: Vec<&Triplet> = chunk.iter().map(|&i| &dataset.triplets[i]).collect();
            let (loss, grads) = model
                .batch_loss_and_grads(&batch)
                .map_err(|e| QafError::Training(format!("epoch {epoch}: {e}")))?;
            let mut tensors = model.param_tensors_mut();
            optimizer.step(&mut tensors, &grads, |i| format!("epoch {epoch} param {i}"))?;
            train_loss += loss;
            batches += 1;
        }
        let val_loss = model.batch_loss(&val)?;
        telemetry.push((epoch, train_loss / batches as f64, val_loss));

        let improved = val_loss < stopper.best_loss();
        let stop = stopper.observe(epoch, val_loss);
        if improved {
            best_model = model.clone();
        }
        if stop {
            break;
        }
    }

    Ok(FinetuneOutput {
        model: best_model,
        telemetry,
        best_epoch: stopper.best_index(),
        best_val_loss: stopper.best_loss(),
    })
}
