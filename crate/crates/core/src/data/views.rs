use std::collections::HashMap;

use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-aligned features for a set of samples, one `[n × dim_v]` matrix per
/// selected representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub views: Vec<Tensor<f32>>,
}

impl ViewData {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.shape()[1]).collect()
    }

    /// Rows `rows` of every view, in the given order.
    pub fn batch(&self, rows: &[usize]) -> Result<ViewData> {
        Ok(ViewData {
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            views: self.views.iter().map(|v| v.select_rows(rows)).collect::<Result<_>>()?,
        })
    }
}

/// Gathers the given sample ids from the selected banks.
///
/// Ids are emitted in sorted order so that every consumer sees the same row
/// order regardless of how the id list was produced.
pub fn load_views(dataset: &Dataset, view_indices: &[usize], ids: &[String]) -> Result<ViewData> {
    if view_indices.is_empty() {
        return Err(Error::Config("at least one representation must be selected".into()));
    }
    let banks = dataset.banks();
    if let Some(&bad) = view_indices.iter().find(|&&v| v >= banks.len()) {
        return Err(Error::Config(format!("view index {bad} out of range ({} banks)", banks.len())));
    }
    let index: HashMap<&str, usize> = dataset
        .sample_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Integrity(format!("sample id {:?} requested twice", w[0])));
    }
    let mut rows = Vec::with_capacity(sorted.len());
    let mut labels = Vec::with_capacity(sorted.len());
    for id in &sorted {
        let row = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Integrity(format!("sample id {id:?} is not present in the banks")))?;
        let label = banks[view_indices[0]].labels()[row];
        for &v in &view_indices[1..] {
            if banks[v].labels()[row] != label {
                return Err(Error::Integrity(format!(
                    "banks disagree on the label of sample {id:?}: {} vs {}",
                    label,
                    banks[v].labels()[row]
                )));
            }
        }
        rows.push(row);
        labels.push(label as usize);
    }
    let views = view_indices
        .iter()
        .map(|&v| banks[v].features().select_rows(&rows))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(view_indices
        .iter()
        .all(|&v| rows.iter().zip(&sorted).all(|(&r, id)| &banks[v].sample_ids()[r] == *id)));
    Ok(ViewData {
        sample_ids: sorted.into_iter().cloned().collect(),
        labels,
        views,
    })
}
