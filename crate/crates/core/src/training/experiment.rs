use std::fs;
use std::path::Path;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::{derive_seed, evaluate_model, train_fold, EpochLog, TrainConfig};
use crate::data::{load_views, Dataset, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::{checkpoint, Model, ModelConfig, Registry};

pub const REPORT_SCHEMA: &str = "finder-run-report/v1";

/// Stated next to every parameter count in a report.
pub const PARAMETER_COUNT_NOTE: &str = "Reference downstream models are described as having roughly 0.8 to 1.2 million \
parameters, which the stated layer sizes do not reproduce for every input width (fcn 512->[256,128,64]->8 has \
173000); counts here are exact for this configuration.";

const FOLD_STREAM_BASE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub parameter_count: usize,
    pub max_identity_residual: f64,
    pub loss_curve: Vec<EpochLog>,
    pub accuracy: f64,
    pub mean_eer: f64,
    pub per_class_eer: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub accuracy: f64,
    pub mean_eer: f64,
    /// Mean over the folds where the class EER is defined.
    pub per_class_eer: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(rename = "$schema")]
    pub schema: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub dataset_name: String,
    pub class_names: Vec<String>,
    pub model_kind: String,
    pub views: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Projection normalization feeding the divergence, `"none"` for kinds
    /// trained on cross-entropy alone.
    pub normalization: String,
    pub parameter_count: usize,
    pub parameter_count_note: String,
    pub last_batch_policy: String,
    pub eer_averaging: String,
    pub folds: Vec<FoldReport>,
    pub averages: Option<Averages>,
    /// Only filled outside strict mode; strict runs write it to `timing.json`.
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn recompute_averages(&mut self) {
        if self.folds.is_empty() {
            self.averages = None;
            return;
        }
        let n = self.folds.len() as f64;
        let c = self.class_names.len();
        let per_class = (0..c)
            .map(|k| {
                let vals: Vec<f64> = self.folds.iter().filter_map(|f| f.per_class_eer.get(k).copied().flatten()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        self.averages = Some(Averages {
            accuracy: self.folds.iter().map(|f| f.accuracy).sum::<f64>() / n,
            mean_eer: self.folds.iter().map(|f| f.mean_eer).sum::<f64>() / n,
            per_class_eer: per_class,
        });
    }
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_hash(model_cfg: &ModelConfig, cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(&(model_cfg, cfg)).expect("configs serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Picks the view indices and completes `input_dims` from the manifest.
pub fn resolve_views(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Vec<usize>, ModelConfig)> {
    let n_views = Registry::<f32>::builtin().get(&model_cfg.kind)?.n_views();
    let indices: Vec<usize> = if cfg.views.is_empty() {
        if dataset.banks().len() != n_views {
            return Err(Error::Config(format!(
                "{} takes {n_views} view(s) and the manifest has {}; choose them with `views`",
                model_cfg.kind,
                dataset.banks().len()
            )));
        }
        (0..n_views).collect()
    } else {
        cfg.views.iter().map(|v| dataset.view_index(v)).collect::<Result<_>>()?
    };
    if indices.len() != n_views {
        return Err(Error::Config(format!(
            "{} takes {n_views} view(s), {} selected",
            model_cfg.kind,
            indices.len()
        )));
    }
    let dims: Vec<usize> = indices.iter().map(|&i| dataset.view_dim(i)).collect();
    let mut resolved = model_cfg.clone();
    if resolved.input_dims.is_empty() {
        resolved.input_dims = dims;
    } else if resolved.input_dims != dims {
        return Err(Error::Config(format!(
            "model input_dims {:?} disagree with the selected representations {dims:?}",
            resolved.input_dims
        )));
    }
    if resolved.n_classes != dataset.n_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, manifest has {}",
            resolved.n_classes,
            dataset.n_classes()
        )));
    }
    Ok((indices, resolved))
}

fn run_fold(
    dataset: &Dataset,
    indices: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
    split: &SplitAssignment,
) -> Result<(FoldReport, Model<f32>)> {
    let train = load_views(dataset, indices, &split.train_ids)?;
    let val = load_views(dataset, indices, &split.val_ids)?;
    let test = load_views(dataset, indices, &split.test_ids)?;
    if test.is_empty() {
        return Err(Error::Config(format!("split {} has an empty test part", split.name)));
    }
    let seed = derive_seed(cfg.seed, FOLD_STREAM_BASE + fold as u64);
    let fold_cfg = TrainConfig { seed, ..cfg.clone() };
    log::info!(
        "{}: training {} on {} samples ({} val, {} test)",
        split.name,
        model_cfg.kind,
        train.len(),
        val.len(),
        test.len()
    );
    let mut outcome = train_fold(model_cfg, &train, &val, &fold_cfg)?;
    let EvalReport {
        accuracy,
        per_class_eer,
        mean_eer,
        confusion,
        warnings,
        ..
    } = evaluate_model(&mut outcome.model, &test, cfg.batch_size, dataset.class_names())?;
    log::info!("{}: accuracy {accuracy:.4}, mean EER {mean_eer:.4}", split.name);
    let report = FoldReport {
        name: split.name.clone(),
        seed,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        stopped_early: outcome.stopped_early,
        parameter_count: outcome.model.count_parameters(),
        max_identity_residual: outcome.max_identity_residual,
        loss_curve: outcome.loss_curve,
        accuracy,
        mean_eer,
        per_class_eer,
        confusion,
        warnings,
    };
    Ok((report, outcome.model))
}

/// Trains and evaluates every fold of the dataset's split policy.
///
/// With `out_dir`, the report is rewritten after each fold (status
/// `running`), the best model of each fold is saved as `<fold>.ckpt`, and a
/// failure leaves a report with status `failed` and the error message.
pub fn run_experiment(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let (indices, model_cfg) = resolve_views(dataset, model_cfg, cfg)?;
    let probe = Model::<f32>::build(&model_cfg, 0)?;
    let splits = dataset.splits()?;
    let started = Instant::now();
    let mut report = RunReport {
        schema: REPORT_SCHEMA.into(),
        status: RunStatus::Running,
        failure: None,
        dataset_name: dataset.manifest().dataset_name.clone(),
        class_names: dataset.class_names().to_vec(),
        model_kind: model_cfg.kind.clone(),
        views: indices.iter().map(|&i| dataset.manifest().representations[i].name.clone()).collect(),
        seed: cfg.seed,
        config_hash: config_hash(&model_cfg, cfg),
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        normalization: if probe.uses_rd_loss() {
            model_cfg.rd_normalization.as_str().into()
        } else {
            "none".into()
        },
        parameter_count: probe.count_parameters(),
        parameter_count_note: PARAMETER_COUNT_NOTE.into(),
        last_batch_policy: "kept".into(),
        eer_averaging: "unweighted".into(),
        folds: Vec::new(),
        averages: None,
        wall_clock_seconds: None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let flush = |report: &RunReport| -> Result<()> {
        match out_dir {
            Some(dir) => report.write(dir.join("report.json")),
            None => Ok(()),
        }
    };
    let save = |name: &str, model: &Model<f32>| -> Result<()> {
        match out_dir {
            Some(dir) => checkpoint::save(model, dir.join(format!("{name}.ckpt"))),
            None => Ok(()),
        }
    };
    let fail = |report: &mut RunReport, err: Error| -> Error {
        report.status = RunStatus::Failed;
        report.failure = Some(err.to_string());
        report.recompute_averages();
        if let Err(e) = flush(report) {
            log::error!("could not write the partial report: {e}");
        }
        err
    };

    if cfg.strict {
        for (i, split) in splits.iter().enumerate() {
            match run_fold(dataset, &indices, &model_cfg, cfg, i, split).and_then(|(f, m)| save(&split.name, &m).map(|_| f)) {
                Ok(fold) => {
                    report.folds.push(fold);
                    report.recompute_averages();
                    flush(&report)?;
                }
                Err(e) => return Err(fail(&mut report, e)),
            }
        }
    } else {
        let results: Vec<Result<(FoldReport, Model<f32>)>> = thread::scope(|s| {
            let handles: Vec<_> = splits
                .iter()
                .enumerate()
                .map(|(i, split)| {
                    let (indices, model_cfg) = (&indices, &model_cfg);
                    s.spawn(move || run_fold(dataset, indices, model_cfg, cfg, i, split))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("fold worker panicked".into()))))
                .collect()
        });
        for (split, result) in splits.iter().zip(results) {
            match result.and_then(|(f, m)| save(&split.name, &m).map(|_| f)) {
                Ok(fold) => report.folds.push(fold),
                Err(e) => return Err(fail(&mut report, e)),
            }
        }
        report.recompute_averages();
    }
    report.status = RunStatus::Complete;
    let elapsed = started.elapsed().as_secs_f64();
    if cfg.strict {
        if let Some(dir) = out_dir {
            let path = dir.join("timing.json");
            let text = serde_json::json!({ "wall_clock_seconds": elapsed }).to_string();
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
    } else {
        report.wall_clock_seconds = Some(elapsed);
    }
    flush(&report)?;
    Ok(report)
}
