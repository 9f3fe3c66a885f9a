//! Round orchestration: broadcast, participant sampling, local training,
//! divergence feedback, selection, aggregation, shadow FedAvg bookkeeping,
//! byte metering and evaluation.
//!
//! Every random decision draws from a stream keyed by `(seed, round, id)`, so
//! a run is a pure function of its config no matter how many threads train
//! clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aggregation::{self, AggregationError, DivergenceMatrix, SelectionMatrix};
use crate::config::{Algorithm, ConfigError, DataSource, ExperimentConfig, PartitionKind};
use crate::datasets::{self, DataError, Dataset, Partition};
use crate::nn::{argmax, LayeredGradient, LayeredModel, NnError};
use crate::rng::{self, SimRng, Stream};
use crate::trace::TraceRecord;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged in round {round}: non-finite parameters")]
    Diverged { round: usize },
    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Size-weighted mean of the participants' local training loss.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_error: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub feedback_bytes: u64,
    pub cum_upload_bytes: u64,
    pub cum_download_bytes: u64,
    pub cum_feedback_bytes: u64,
    pub selected_per_layer: Vec<usize>,
    pub participants: Vec<usize>,
    pub shadow_gap: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error_rate: f64,
}

/// Local optimisation settings for one client update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub lr: f64,
    pub epochs: usize,
    /// 0 (or anything >= the local dataset size) means full batch.
    pub batch_size: usize,
}

impl LocalTraining {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            lr: cfg.lr,
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
        }
    }

    fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size == 0 || self.batch_size >= n {
            n
        } else {
            self.batch_size
        }
    }

    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.effective_batch(n))
    }
}

/// Uniform `k`-subset of `[0, n_clients)`, returned in ascending order.
pub fn sample_participants<R: Rng + ?Sized>(
    n_clients: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, EngineError> {
    if k == 0 || k > n_clients {
        return Err(EngineError::InvalidArgument(format!(
            "cannot sample {k} participants from {n_clients} clients"
        )));
    }
    let mut ids = rand::seq::index::sample(rng, n_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Trains a copy of the broadcast model on `data` with mini-batch SGD,
/// reshuffling every epoch. A full-batch update keeps the natural sample
/// order. Returns the local model and the mean batch loss of the last epoch.
pub fn client_update(
    global: &LayeredModel,
    data: &Dataset,
    params: &LocalTraining,
    rng: &mut SimRng,
) -> Result<(LayeredModel, f64), EngineError> {
    if data.is_empty() {
        return Err(EngineError::InvalidArgument("client dataset is empty".into()));
    }
    if !(params.lr >= 0.0 && params.lr.is_finite()) || params.epochs == 0 {
        return Err(EngineError::InvalidArgument(format!(
            "invalid local training settings {params:?}"
        )));
    }
    let n = data.len();
    let batch = params.effective_batch(n);
    let mut model = global.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_epoch_loss = 0.0;
    for _ in 0..params.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let (loss, grad) = model.loss_and_gradient(&data.batch(chunk))?;
            model.apply_gradient(&grad, params.lr);
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
    }
    if !model.is_finite() {
        return Err(EngineError::Nn(NnError::NonFinite(0)));
    }
    Ok((model, last_epoch_loss))
}

/// Mean cross-entropy and misclassification rate (argmax, ties to the lower
/// class index).
pub fn evaluate(model: &LayeredModel, test: &Dataset) -> Result<Evaluation, EngineError> {
    if test.is_empty() {
        return Err(EngineError::InvalidArgument("test set is empty".into()));
    }
    let batch = test.full_batch();
    let logits = model.forward(&batch.inputs)?;
    let (loss, _) = model.loss_and_gradient(&batch)?;
    let wrong = (0..batch.len())
        .filter(|&r| argmax(logits.row(r)) != batch.labels[r])
        .count();
    Ok(Evaluation {
        loss,
        error_rate: wrong as f64 / batch.len() as f64,
    })
}

/// Builds `(train, test)` as described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), EngineError> {
    let seed = cfg.data_seed();
    match &cfg.data.source {
        DataSource::Blobs {
            classes,
            dim,
            samples_per_class,
            spread,
        } => {
            let ds = datasets::synth_blobs(*classes, *dim, *samples_per_class, *spread, seed)?;
            Ok(ds.split_train_test(cfg.data.test_fraction, seed)?)
        }
        DataSource::Idx {
            images,
            labels,
            test,
        } => {
            let train = datasets::load_idx(images, labels)?;
            match test {
                None => Ok(train.split_train_test(cfg.data.test_fraction, seed)?),
                Some((ti, tl)) => {
                    let test = datasets::load_idx(ti, tl)?;
                    if test.dim() != train.dim() {
                        return Err(EngineError::InvalidArgument(format!(
                            "test images have dimension {} but training images {}",
                            test.dim(),
                            train.dim()
                        )));
                    }
                    let classes = train.class_count().max(test.class_count());
                    Ok((train.with_class_count(classes)?, test.with_class_count(classes)?))
                }
            }
        }
    }
}

pub fn partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition, EngineError> {
    let seed = cfg.data_seed();
    Ok(match cfg.data.partition {
        PartitionKind::Iid => datasets::partition_iid(train, cfg.n_clients, seed)?,
        PartitionKind::Dirichlet { alpha } => {
            datasets::partition_dirichlet(train, cfg.n_clients, alpha, seed)?
        }
    })
}

/// Output of one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub trace: Option<TraceRecord>,
}

/// Mutable federation state: global model, optional shadow FedAvg model,
/// client datasets and cumulative byte counters.
pub struct Simulation {
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    clients: Vec<Dataset>,
    global: LayeredModel,
    shadow: Option<LayeredModel>,
    round: usize,
    layer_params: Vec<usize>,
    cum_upload: u64,
    cum_download: u64,
    cum_feedback: u64,
    prev_broadcast: Option<(LayeredModel, LayeredGradient)>,
    pool: Option<rayon::ThreadPool>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        Self::from_data(cfg, train, test)
    }

    /// Uses the given datasets instead of the config's data source.
    pub fn from_data(
        cfg: ExperimentConfig,
        train: Dataset,
        test: Dataset,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if train.dim() != test.dim() || train.class_count() != test.class_count() {
            return Err(EngineError::InvalidArgument(
                "train and test sets disagree on dimension or class count".into(),
            ));
        }
        let part = partition(&cfg, &train)?;
        let clients = part
            .assignments
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<Result<Vec<_>, _>>()?;
        let mut dims = vec![train.dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(train.class_count());
        let mut init_rng = rng::stream_rng(cfg.seed, Stream::ModelInit, 0, 0);
        let global = LayeredModel::init(&dims, &mut init_rng)?;
        let shadow = cfg.shadow_enabled.then(|| global.clone());
        let layer_params = global.layer_param_count();
        Ok(Self {
            cfg,
            train,
            test,
            clients,
            global,
            shadow,
            round: 0,
            layer_params,
            cum_upload: 0,
            cum_download: 0,
            cum_feedback: 0,
            prev_broadcast: None,
            pool: None,
        })
    }

    /// Runs client work on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| EngineError::ThreadPool(e.to_string()))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global_model(&self) -> &LayeredModel {
        &self.global
    }

    pub fn shadow_model(&self) -> Option<&LayeredModel> {
        self.shadow.as_ref()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn layer_param_count(&self) -> &[usize] {
        &self.layer_params
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn train_clients(
        &self,
        start: &LayeredModel,
        participants: &[usize],
        round: usize,
    ) -> Result<Vec<(LayeredModel, f64)>, EngineError> {
        let params = LocalTraining::from_config(&self.cfg);
        let seed = self.cfg.seed;
        self.install(|| {
            participants
                .par_iter()
                .map(|&k| {
                    let mut rng = rng::stream_rng(seed, Stream::ClientTraining, round as u64, k as u64);
                    client_update(start, &self.clients[k], &params, &mut rng)
                })
                .collect()
        })
    }

    fn select(
        &self,
        locals: &[LayeredModel],
        participants: &[usize],
        round: usize,
    ) -> Result<SelectionMatrix, EngineError> {
        let layers = self.global.layer_count();
        let k = participants.len();
        let mut rng = rng::stream_rng(self.cfg.seed, Stream::Selection, round as u64, 0);
        Ok(match self.cfg.algorithm {
            Algorithm::FedLdf => {
                let div = DivergenceMatrix::from_models(locals, participants.to_vec(), &self.global)?;
                aggregation::select_top_n(&div, self.cfg.top_n)?
            }
            Algorithm::FedAvg => SelectionMatrix::all_ones(layers, k),
            Algorithm::RandomLayer => {
                aggregation::random_layer_selection(layers, k, self.cfg.top_n, &mut rng)?
            }
            Algorithm::ClientDropout => {
                aggregation::client_dropout_selection(layers, k, self.cfg.keep, &mut rng)?
            }
        })
    }

    fn trace_gradients(
        &self,
        participants: &[usize],
    ) -> Result<(LayeredGradient, Vec<Vec<f64>>), EngineError> {
        let (_, global_grad) = self.global.loss_and_gradient(&self.train.full_batch())?;
        let norms = self.install(|| {
            participants
                .par_iter()
                .map(|&k| {
                    self.global
                        .loss_and_gradient(&self.clients[k].full_batch())
                        .map(|(_, g)| g.layer_norms())
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        Ok((global_grad, norms))
    }

    /// Executes one communication round.
    pub fn run_round(&mut self) -> Result<RoundOutcome, EngineError> {
        let round = self.round + 1;
        let cfg = &self.cfg;
        let bpp = cfg.bytes_per_param as u64;
        let k = cfg.clients_per_round;
        let layers = self.global.layer_count();

        let mut part_rng = rng::stream_rng(cfg.seed, Stream::Participants, round as u64, 0);
        let participants = sample_participants(cfg.n_clients, k, &mut part_rng)?;
        let download = (k * self.global.total_params()) as u64 * bpp;

        let traced = if cfg.trace_enabled || cfg.shadow_enabled {
            Some(self.trace_gradients(&participants)?)
        } else {
            None
        };

        let trained = self.train_clients(&self.global, &participants, round)?;
        let sizes: Vec<usize> = participants.iter().map(|&c| self.clients[c].len()).collect();
        let total_size: usize = sizes.iter().sum();
        let train_loss = trained
            .iter()
            .zip(&sizes)
            .map(|((_, l), &s)| l * s as f64)
            .sum::<f64>()
            / total_size as f64;
        let locals: Vec<LayeredModel> = trained.into_iter().map(|(m, _)| m).collect();

        let selection = self.select(&locals, &participants, round)?;
        let feedback = if cfg.algorithm == Algorithm::FedLdf {
            (k * layers) as u64 * bpp
        } else {
            0
        };
        let upload = selection.uploaded_params(&self.layer_params) as u64 * bpp;

        let new_global = match cfg.algorithm {
            Algorithm::FedAvg => aggregation::aggregate_fedavg(&locals, &sizes)?,
            _ => aggregation::aggregate_layerwise(&locals, &sizes, &selection)?,
        };
        if !new_global.is_finite() {
            return Err(EngineError::Diverged { round });
        }

        let mut shadow_gap = None;
        let mut shadow_loss = None;
        if let Some(shadow) = &self.shadow {
            let shadow_new = if cfg.shadow_resync {
                aggregation::aggregate_fedavg(&locals, &sizes)?
            } else {
                let shadow_locals: Vec<LayeredModel> = self
                    .train_clients(shadow, &participants, round)?
                    .into_iter()
                    .map(|(m, _)| m)
                    .collect();
                aggregation::aggregate_fedavg(&shadow_locals, &sizes)?
            };
            shadow_gap = Some(aggregation::layer_divergence(&new_global, &shadow_new)?);
            if traced.is_some() {
                shadow_loss = Some(shadow_new.loss_and_gradient(&self.train.full_batch())?.0);
            }
            self.shadow = Some(if cfg.shadow_resync {
                new_global.clone()
            } else {
                shadow_new
            });
        }

        let trace = match traced {
            Some((global_grad, client_layer_grad_norms)) => {
                let (step_norm, grad_diff_norm) = match &self.prev_broadcast {
                    Some((prev_model, prev_grad)) => (
                        Some(self.global.distance(prev_model)),
                        Some(global_grad.distance(prev_grad)),
                    ),
                    None => (None, None),
                };
                let global_loss = new_global.loss_and_gradient(&self.train.full_batch())?.0;
                let params = LocalTraining::from_config(cfg);
                let record = TraceRecord {
                    round,
                    eta: cfg.lr,
                    top_n: cfg.top_n,
                    clients_per_round: k,
                    layer_count: layers,
                    local_steps: sizes.iter().map(|&s| params.steps_for(s)).max().unwrap_or(0),
                    participants: participants.clone(),
                    client_sizes: sizes.clone(),
                    global_grad_norm: global_grad.norm(),
                    client_layer_grad_norms,
                    shadow_gaps: shadow_gap.clone(),
                    global_loss,
                    shadow_loss,
                    step_norm,
                    grad_diff_norm,
                };
                self.prev_broadcast = Some((self.global.clone(), global_grad));
                Some(record)
            }
            None => None,
        };

        self.global = new_global;
        self.round = round;
        self.cum_upload += upload;
        self.cum_download += download;
        self.cum_feedback += feedback;
        let eval = evaluate(&self.global, &self.test)?;

        Ok(RoundOutcome {
            metrics: RoundMetrics {
                round,
                algorithm: self.cfg.algorithm,
                seed: self.cfg.seed,
                train_loss,
                test_loss: eval.loss,
                test_error: eval.error_rate,
                upload_bytes: upload,
                download_bytes: download,
                feedback_bytes: feedback,
                cum_upload_bytes: self.cum_upload,
                cum_download_bytes: self.cum_download,
                cum_feedback_bytes: self.cum_feedback,
                selected_per_layer: selection.selected_per_layer(),
                participants,
                shadow_gap,
            },
            trace,
        })
    }
}

/// Full run of `cfg.rounds` rounds.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub traces: Vec<TraceRecord>,
    pub global: LayeredModel,
    pub shadow: Option<LayeredModel>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, EngineError> {
    run_simulation(Simulation::new(cfg.clone())?)
}

/// Runs the remaining rounds of an already constructed simulation.
pub fn run_simulation(mut sim: Simulation) -> Result<ExperimentResult, EngineError> {
    let mut metrics = Vec::with_capacity(sim.cfg.rounds);
    let mut traces = Vec::new();
    while sim.round < sim.cfg.rounds {
        let out = sim.run_round()?;
        metrics.push(out.metrics);
        traces.extend(out.trace);
    }
    Ok(ExperimentResult {
        metrics,
        traces,
        global: sim.global,
        shadow: sim.shadow,
    })
}
