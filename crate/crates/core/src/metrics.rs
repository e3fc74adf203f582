//! Accuracy, one-vs-all equal error rates, confusion matrices and CSV
//! import/export of predictions and penultimate features.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ViewData;
use crate::error::{Error, Result};
use crate::nn::Model;

/// Row-sum tolerance for probability matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Class probabilities for `n` samples with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    probs: Vec<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl ScoreSet {
    /// `probs` is row-major `[n × C]`.
    pub fn new(probs: Vec<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 || probs.len() != labels.len() * c {
            return Err(Error::Contract(format!(
                "score matrix of {} values does not match {} labels x {c} classes",
                probs.len(),
                labels.len()
            )));
        }
        for (i, row) in probs.chunks_exact(c).enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("row {i} has a non-finite score {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Integrity(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Integrity(format!("row {i} has label {l}, only {c} classes")));
        }
        Ok(Self {
            probs,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_classes();
        &self.probs[i * c..(i + 1) * c]
    }

    /// Argmax of row `i`, ties to the lowest class index.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    fn require_nonempty(&self, op: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract(format!("{op} on an empty score set")));
        }
        Ok(())
    }
}

pub fn accuracy(scores: &ScoreSet) -> Result<f64> {
    scores.require_nonempty("accuracy")?;
    let hits = (0..scores.len()).filter(|&i| scores.predicted(i) == scores.labels[i]).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// `counts[i][j]` = rows with true label `i` predicted as `j`.
pub fn confusion_matrix(scores: &ScoreSet) -> Result<Vec<Vec<u64>>> {
    scores.require_nonempty("confusion_matrix")?;
    let c = scores.n_classes();
    let mut m = vec![vec![0u64; c]; c];
    for i in 0..scores.len() {
        m[scores.labels[i]][scores.predicted(i)] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate of a binary detector where larger scores mean "positive".
///
/// Candidate thresholds are the distinct scores plus ±∞, with
/// FAR(t) = |neg ≥ t| / |neg| and FRR(t) = |pos < t| / |pos|. If some
/// threshold has FAR = FRR the first such point is returned; otherwise the
/// two rates are interpolated linearly between the adjacent thresholds where
/// FAR − FRR changes sign.
pub fn binary_eer(pos: &[f64], neg: &[f64]) -> Result<EerPoint> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract(format!(
            "binary_eer needs positives and negatives, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if let Some(v) = pos.iter().chain(neg).find(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("score {v} is not a number")));
    }
    let mut pos = pos.to_vec();
    let mut neg = neg.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = Vec::with_capacity(pos.len() + neg.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend(pos.iter().chain(&neg).copied());
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let rates = |t: f64| {
        let far = (neg.len() - neg.partition_point(|&s| s < t)) as f64 / nn;
        let frr = pos.partition_point(|&s| s < t) as f64 / np;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    if prev.0 == prev.1 {
        return Ok(EerPoint {
            eer: prev.0,
            threshold: thresholds[0],
        });
    }
    for w in thresholds.windows(2) {
        let cur = rates(w[1]);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d1 == 0.0 {
            return Ok(EerPoint {
                eer: cur.0,
                threshold: w[1],
            });
        }
        if d0 > 0.0 && d1 < 0.0 {
            let s = d0 / (d0 - d1);
            let eer = prev.0 + s * (cur.0 - prev.0);
            let threshold = match (w[0].is_finite(), w[1].is_finite()) {
                (true, true) => w[0] + s * (w[1] - w[0]),
                (true, false) => w[0],
                (false, true) => w[1],
                (false, false) => 0.0,
            };
            return Ok(EerPoint { eer, threshold });
        }
        prev = cur;
    }
    unreachable!("FAR - FRR goes from +1 at -inf to -1 at +inf")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsAll {
    /// `None` for classes without positives or negatives.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the defined classes.
    pub mean: f64,
    pub warnings: Vec<String>,
}

/// Per-class EER scoring each row by its probability for that class.
pub fn one_vs_all_eer(scores: &ScoreSet) -> Result<OneVsAll> {
    scores.require_nonempty("one_vs_all_eer")?;
    let mut per_class = Vec::with_capacity(scores.n_classes());
    let mut warnings = Vec::new();
    for c in 0..scores.n_classes() {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..scores.len() {
            let s = scores.row(i)[c];
            if scores.labels[i] == c {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            warnings.push(format!(
                "class {} has {} positive and {} negative sample(s); EER undefined and excluded from the mean",
                scores.class_names[c],
                pos.len(),
                neg.len()
            ));
            per_class.push(None);
        } else {
            per_class.push(Some(binary_eer(&pos, &neg)?.eer));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(OneVsAll {
        per_class,
        mean,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub per_class_eer: Vec<Option<f64>>,
    pub mean_eer: f64,
    /// Always `"unweighted"`: each defined class counts once in `mean_eer`.
    pub eer_averaging: String,
    pub confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

pub fn evaluate(scores: &ScoreSet) -> Result<EvalReport> {
    let ova = one_vs_all_eer(scores)?;
    Ok(EvalReport {
        n_samples: scores.len(),
        class_names: scores.class_names.clone(),
        accuracy: accuracy(scores)?,
        per_class_eer: ova.per_class,
        mean_eer: ova.mean,
        eer_averaging: "unweighted".into(),
        confusion: confusion_matrix(scores)?,
        warnings: ova.warnings,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `sample_id,label,p_<class>...` rows.
pub fn write_predictions(path: impl AsRef<Path>, sample_ids: &[String], scores: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    if sample_ids.len() != scores.len() {
        return Err(Error::Contract("one sample id per score row required".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend(scores.class_names.iter().map(|c| format!("p_{c}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in sample_ids.iter().enumerate() {
        let mut rec = vec![id.clone(), scores.labels[i].to_string()];
        rec.extend(scores.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction CSV as written by [`write_predictions`] or produced by
/// an external system with the same columns.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<(Vec<String>, ScoreSet)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(Error::Integrity(format!(
            "{}: expected header sample_id,label and at least two probability columns",
            path.display()
        )));
    }
    let class_names: Vec<String> = header
        .iter()
        .skip(2)
        .map(|h| h.strip_prefix("p_").unwrap_or(h).to_string())
        .collect();
    let (mut ids, mut labels, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| Error::Integrity(format!("{}: data row {}: bad {what}", path.display(), line + 1));
        ids.push(rec[0].to_string());
        labels.push(rec[1].trim().parse::<usize>().map_err(|_| bad("label"))?);
        for v in rec.iter().skip(2) {
            probs.push(v.trim().parse::<f64>().map_err(|_| bad("probability"))?);
        }
    }
    Ok((ids, ScoreSet::new(probs, labels, class_names)?))
}

/// Writes `sample_id,label,f0..f{k-1}` with the model's penultimate features.
pub fn export_embeddings(model: &mut Model<f32>, data: &ViewData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let features = model.embed(&data.views)?;
    let width = features.shape()[1];
    let mut out = String::new();
    out.push_str("sample_id,label");
    for k in 0..width {
        out.push_str(&format!(",f{k}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let mut rec = vec![data.sample_ids[i].clone(), data.labels[i].to_string()];
        rec.extend(features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8 csv"));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
