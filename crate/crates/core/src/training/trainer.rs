use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::data::ViewData;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, RenyiParams};
use crate::metrics::{evaluate, EvalReport, ScoreSet};
use crate::nn::{Mode, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Largest tolerated `|total - (λ·ce + (1-λ)·rd)|` on any training step.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    ValLoss,
    ValAccuracy,
}

impl EarlyStopMetric {
    fn better(self, candidate: f64, best: f64) -> bool {
        match self {
            EarlyStopMetric::ValLoss => candidate < best,
            EarlyStopMetric::ValAccuracy => candidate > best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub seed: u64,
    pub renyi: RenyiParams,
    pub shuffle: bool,
    /// Folds run one after another and the report carries no timing, so two
    /// runs with the same seed write byte-identical reports.
    pub strict: bool,
    /// Representation names to feed the model, in order. Empty selects every
    /// representation of the manifest.
    pub views: Vec<String>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 40,
            batch_size: 32,
            early_stopping: true,
            early_stop_patience: 5,
            early_stop_metric: EarlyStopMetric::ValLoss,
            seed: 0,
            renyi: RenyiParams::default(),
            shuffle: true,
            strict: true,
            views: Vec::new(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return fail(format!(
                "epochs, batch_size and early_stop_patience must be >= 1, got {}, {}, {}",
                self.epochs, self.batch_size, self.early_stop_patience
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail(format!("invalid Adam constants {a:?}"));
        }
        self.renyi.validate()
    }
}

/// Patience-based stopping on a validation metric; only strict improvements
/// reset the counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    metric: EarlyStopMetric,
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(metric: EarlyStopMetric, patience: usize) -> Self {
        Self {
            metric,
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(best) => self.metric.better(value, best),
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted means over the epoch's training batches.
    pub ce: f64,
    pub rd: f64,
    pub total: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Per-step loss record passed to step observers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub rows: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the best epoch, in eval mode.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub loss_curve: Vec<EpochLog>,
    pub max_identity_residual: f64,
    pub optimizer_steps: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Independent stream seeds derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ GOLDEN.wrapping_mul(stream.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

fn check_views(model: &Model<f32>, data: &ViewData, what: &str) -> Result<()> {
    if data.views.len() != model.n_views() {
        return Err(Error::Config(format!(
            "{} takes {} view(s) but the {what} data has {}",
            model.kind(),
            model.n_views(),
            data.views.len()
        )));
    }
    Ok(())
}

/// Loss and probabilities of an eval-mode pass over `data` in chunks.
pub fn evaluate_loss(model: &mut Model<f32>, data: &ViewData, batch_size: usize, renyi: &RenyiParams) -> Result<(LossBreakdown, Vec<f64>)> {
    let saved = model.mode();
    model.set_mode(Mode::Eval);
    let result = (|| {
        let (mut ce, mut rd, mut total) = (0.0, 0.0, 0.0);
        let mut lambda = 1.0;
        let mut probs = Vec::with_capacity(data.len() * model.config().n_classes);
        let rows: Vec<usize> = (0..data.len()).collect();
        for chunk in rows.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk)?;
            let mut tape = Tape::<f32>::new();
            let vars: Vec<_> = batch.views.iter().map(|v| tape.constant(v.clone())).collect();
            let bound = model.forward(&mut tape, &vars, None)?;
            let proj = if model.uses_rd_loss() { bound.output.projections } else { None };
            let loss = combined_loss(&mut tape, bound.output.probs, &batch.labels, proj, renyi, model.config().rd_normalization)?;
            let w = chunk.len() as f64;
            ce += w * loss.breakdown.ce;
            rd += w * loss.breakdown.rd;
            total += w * loss.breakdown.total;
            lambda = loss.breakdown.lambda;
            probs.extend(tape.value(bound.output.probs).data().iter().map(|&p| p as f64));
        }
        let n = data.len() as f64;
        Ok((
            LossBreakdown {
                total: total / n,
                ce: ce / n,
                rd: rd / n,
                lambda,
            },
            probs,
        ))
    })();
    model.set_mode(saved);
    result
}

/// Eval-mode probabilities for `data`, scored against its labels.
pub fn score(model: &mut Model<f32>, data: &ViewData, batch_size: usize, class_names: &[String]) -> Result<ScoreSet> {
    check_views(model, data, "evaluation")?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut probs = Vec::with_capacity(data.len() * class_names.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        probs.extend(model.predict(&batch.views)?.data().iter().map(|&p| p as f64));
    }
    ScoreSet::new(probs, data.labels.clone(), class_names.to_vec())
}

pub fn evaluate_model(model: &mut Model<f32>, data: &ViewData, batch_size: usize, class_names: &[String]) -> Result<EvalReport> {
    evaluate(&score(model, data, batch_size, class_names)?)
}

fn accuracy_of(probs: &[f64], labels: &[usize], c: usize) -> f64 {
    let hits = probs
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn train_fold(model_cfg: &ModelConfig, train: &ViewData, val: &ViewData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_fold_observed(model_cfg, train, val, cfg, &mut |_| {})
}

/// Trains one model from `cfg.seed`, calling `on_step` after every optimizer
/// step.
///
/// The last incomplete batch of each epoch is kept. With early stopping the
/// returned model is the snapshot (parameters and batch-norm statistics) from
/// the best validation epoch; without it, the final one.
pub fn train_fold_observed(
    model_cfg: &ModelConfig,
    train: &ViewData,
    val: &ViewData,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.early_stopping && val.is_empty() {
        return Err(Error::Config("early stopping needs a non-empty validation set".into()));
    }
    let mut model = Model::<f32>::build(model_cfg, derive_seed(cfg.seed, INIT_STREAM))?;
    check_views(&model, train, "training")?;
    check_views(&model, val, "validation")?;
    let n_classes = model_cfg.n_classes;
    if let Some(&l) = train.labels.iter().chain(&val.labels).find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {l} out of range for {n_classes} classes")));
    }
    model.set_mode(Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TRAIN_STREAM));
    let mut adam = AdamState::for_params(model.parameters(), cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.early_stop_metric, cfg.early_stop_patience);
    let mut best: Option<Model<f32>> = None;
    let mut curve = Vec::new();
    let mut max_residual = 0.0f64;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut ce, mut rd, mut total) = (0.0, 0.0, 0.0);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.batch(rows)?;
            let mut tape = Tape::<f32>::new();
            let vars: Vec<_> = batch.views.iter().map(|v| tape.constant(v.clone())).collect();
            let bound = model.forward(&mut tape, &vars, Some(&mut rng))?;
            let proj = if model.uses_rd_loss() { bound.output.projections } else { None };
            let loss = combined_loss(
                &mut tape,
                bound.output.probs,
                &batch.labels,
                proj,
                &cfg.renyi,
                model_cfg.rd_normalization,
            )?;
            let br = loss.breakdown;
            if !(br.total.is_finite() && br.ce.is_finite() && br.rd.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {}: total {}, ce {}, rd {}",
                    b + 1,
                    br.total,
                    br.ce,
                    br.rd
                )));
            }
            let residual = br.identity_residual();
            max_residual = max_residual.max(residual);
            if residual > IDENTITY_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "loss identity violated at epoch {epoch}, batch {}: residual {residual:e}",
                    b + 1
                )));
            }
            tape.backward(loss.total)?;
            let grads: Vec<Vec<f32>> = bound.param_vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} at epoch {epoch}, batch {}",
                    model.parameters()[i].0,
                    b + 1
                )));
            }
            adam.step(model.parameters_mut(), &grads, cfg.lr)?;
            on_step(&StepLog {
                epoch,
                batch: b + 1,
                rows: rows.len(),
                breakdown: br,
            });
            let w = rows.len() as f64;
            ce += w * br.ce;
            rd += w * br.rd;
            total += w * br.total;
        }
        let n = train.len() as f64;
        let mut log = EpochLog {
            epoch,
            ce: ce / n,
            rd: rd / n,
            total: total / n,
            val_loss: None,
            val_accuracy: None,
        };
        if !val.is_empty() {
            let (vl, probs) = evaluate_loss(&mut model, val, cfg.batch_size, &cfg.renyi)?;
            if !vl.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
            }
            log.val_loss = Some(vl.total);
            log.val_accuracy = Some(accuracy_of(&probs, &val.labels, n_classes));
        }
        log::debug!(
            "epoch {epoch}: total {:.5} ce {:.5} rd {:.5} val_loss {:?} val_acc {:?}",
            log.total,
            log.ce,
            log.rd,
            log.val_loss,
            log.val_accuracy
        );
        let metric = match cfg.early_stop_metric {
            EarlyStopMetric::ValLoss => log.val_loss,
            EarlyStopMetric::ValAccuracy => log.val_accuracy,
        };
        curve.push(log);
        if cfg.early_stopping {
            let decision = stopper.observe(epoch, metric.expect("validation is non-empty"));
            if decision.improved {
                best = Some(model.clone());
            }
            if decision.stop && epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }
    let epochs_run = curve.len();
    let (mut model, best_epoch) = match best {
        Some(m) => (m, stopper.best_epoch()),
        None => (model, epochs_run),
    };
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model,
        best_epoch,
        epochs_run,
        stopped_early,
        loss_curve: curve,
        max_identity_residual: max_residual,
        optimizer_steps: adam.t,
    })
}

/// Builds a [`ViewData`] from matrices that already share a row order.
pub fn view_data(sample_ids: Vec<String>, labels: Vec<usize>, views: Vec<Tensor<f32>>) -> Result<ViewData> {
    let n = sample_ids.len();
    if labels.len() != n || views.iter().any(|v| v.rank() != 2 || v.shape()[0] != n) {
        return Err(Error::Contract("views, ids and labels must share the row count".into()));
    }
    Ok(ViewData {
        sample_ids,
        labels,
        views,
    })
}
