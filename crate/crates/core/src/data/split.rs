use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(Error::Config(format!("unknown split part {other:?}"))),
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

/// Disjoint train/validation/test id lists for one fold or fixed split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub name: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train_ids,
            Part::Val => &self.val_ids,
            Part::Test => &self.test_ids,
        }
    }

    /// Rejects ids that appear twice within or across parts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train_ids.iter().chain(&self.val_ids).chain(&self.test_ids) {
            if !seen.insert(id) {
                return Err(Error::Integrity(format!(
                    "sample id {id:?} appears more than once in split {}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        split.validate()?;
        Ok(split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Sample indices per class, classes in ascending label order.
fn by_class(labels: &[u16]) -> BTreeMap<u16, Vec<usize>> {
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn class_name(class_names: &[String], label: u16) -> String {
    class_names
        .get(label as usize)
        .cloned()
        .unwrap_or_else(|| label.to_string())
}

fn sorted_ids(ids: &[String], idx: impl IntoIterator<Item = usize>) -> Vec<String> {
    let mut out: Vec<String> = idx.into_iter().map(|i| ids[i].clone()).collect();
    out.sort();
    out
}

/// Per-class validation size: `round(fraction·n)`, at least one sample for
/// any class with two or more members when `fraction > 0`.
fn val_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Splits `pool` (indices) per class into (train, val).
fn carve_validation(labels: &[u16], pool: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        groups.entry(labels[i]).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(rng);
        let v = val_count(members.len(), fraction);
        val.extend_from_slice(&members[..v]);
        train.extend_from_slice(&members[v..]);
    }
    (train, val)
}

/// Stratified k-fold assignment.
///
/// Each class is shuffled with a generator seeded from `seed` and dealt
/// round-robin across folds, starting where the previous class stopped, so
/// every fold receives `floor` or `ceil` of `n_c / k` members of class `c`.
/// Within each fold, `val_fraction` of every class in the training portion
/// becomes validation data.
pub fn stratified_kfold(
    ids: &[String],
    labels: &[u16],
    class_names: &[String],
    k: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<Vec<SplitAssignment>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() != labels.len() {
        return Err(Error::Contract("ids and labels differ in length".into()));
    }
    let groups = by_class(labels);
    if let Some((&label, members)) = groups.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Config(format!(
            "class {} has {} sample(s), fewer than k = {k}",
            class_name(class_names, label),
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; ids.len()];
    let mut offset = 0;
    for members in groups.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    (0..k)
        .map(|fold| {
            let test: Vec<usize> = (0..ids.len()).filter(|&i| fold_of[i] == fold).collect();
            let rest: Vec<usize> = (0..ids.len()).filter(|&i| fold_of[i] != fold).collect();
            let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ SEED_STRIDE.wrapping_mul(fold as u64 + 1));
            let (train, val) = carve_validation(labels, &rest, val_fraction, &mut vrng);
            Ok(SplitAssignment {
                name: format!("fold{fold}"),
                train_ids: sorted_ids(ids, train),
                val_ids: sorted_ids(ids, val),
                test_ids: sorted_ids(ids, test),
            })
        })
        .collect()
}

/// One stratified train/val/test split with the given per-class fractions.
pub fn stratified_holdout(ids: &[String], labels: &[u16], val_fraction: f64, test_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "holdout fractions must be in [0, 1) and sum below 1, got val {val_fraction}, test {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..ids.len()).collect();
    let (rest, test) = carve_validation(labels, &all, test_fraction, &mut rng);
    let rest_fraction = val_fraction / (1.0 - test_fraction);
    let (train, val) = carve_validation(labels, &rest, rest_fraction, &mut rng);
    Ok(SplitAssignment {
        name: "official".into(),
        train_ids: sorted_ids(ids, train),
        val_ids: sorted_ids(ids, val),
        test_ids: sorted_ids(ids, test),
    })
}
