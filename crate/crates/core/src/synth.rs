//! Synthetic multi-view datasets with a known class structure.
//!
//! Every class `c` is written in base `m = ceil(C^(1/V))` as digits
//! `g_0(c), g_1(c), ...`, one digit per view. The mean of class `c` in view
//! `v` is
//!
//! ```text
//! separation · ( √(1−ρ)·S_v[c] + √ρ·E_v[g_v(c)] + 0.05·J_v[c] )
//! ```
//!
//! with random unit directions `S` (class-specific, visible in every view),
//! `E` (digit-specific, so a single view only narrows the class down to one
//! digit group) and a small `J` that keeps all class means distinct. Samples
//! add isotropic Gaussian noise of scale `σ`. At `ρ = 1` the class is only
//! identifiable from all views together.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    stratified_holdout, write_id_list, DatasetManifest, FeatureBank, RepresentationRef, SplitAssignment, SplitPolicy,
    MANIFEST_SCHEMA,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JITTER: f64 = 0.05;

fn default_separation() -> f64 {
    4.0
}

fn default_name() -> String {
    "synth".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSplit {
    Kfold { k: usize, val_fraction: f64 },
    /// One stratified holdout written as id-list files.
    Official { val_fraction: f64, test_fraction: f64 },
}

impl Default for SynthSplit {
    fn default() -> Self {
        SynthSplit::Kfold { k: 5, val_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub dataset_name: String,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub view_dims: Vec<usize>,
    /// Noise standard deviation per coordinate.
    pub sigma: f64,
    /// Share of the class signal that is view-exclusive, in `[0, 1]`.
    pub rho: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub seed: u64,
    #[serde(default)]
    pub split: SynthSplit,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dataset_name: default_name(),
            n_classes: 4,
            n_per_class: 50,
            view_dims: vec![64, 64],
            sigma: 1.0,
            rho: 1.0,
            separation: default_separation(),
            seed: 0,
            split: SynthSplit::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return fail(format!("n_classes must lie in [2, 65535], got {}", self.n_classes));
        }
        if self.n_per_class == 0 {
            return fail("n_per_class must be positive".into());
        }
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return fail(format!("view_dims must be non-empty and positive, got {:?}", self.view_dims));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be > 0, got {}", self.separation));
        }
        match self.split {
            SynthSplit::Kfold { k, val_fraction } if k < 2 || k > self.n_per_class || !(0.0..1.0).contains(&val_fraction) => {
                fail(format!(
                    "k-fold split needs 2 <= k <= n_per_class and val_fraction in [0, 1), got k={k}, val_fraction={val_fraction}"
                ))
            }
            _ => Ok(()),
        }
    }

    /// Base in which class indices are split into per-view digits.
    pub fn digit_base(&self) -> usize {
        let v = self.view_dims.len() as u32;
        let mut m = 1usize;
        while m.saturating_pow(v) < self.n_classes {
            m += 1;
        }
        m
    }

    pub fn digit(&self, class: usize, view: usize) -> usize {
        let m = self.digit_base();
        (class / m.pow(view as u32)) % m
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("A{:02}", c + 1)).collect()
    }

    pub fn sample_id(&self, class: usize, index: usize) -> String {
        format!("{}_{:03}_{:05}", self.dataset_name, class, index)
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub manifest: DatasetManifest,
    /// One bank per view, rows sorted by sample id.
    pub banks: Vec<FeatureBank>,
    /// `means[v][c]` is the mean of class `c` in view `v`.
    pub means: Vec<Vec<Vec<f64>>>,
    pub official_split: Option<SplitAssignment>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c_count, m) = (spec.n_classes, spec.digit_base());
    let (a, b) = ((1.0 - spec.rho).sqrt(), spec.rho.sqrt());
    let means: Vec<Vec<Vec<f64>>> = spec
        .view_dims
        .iter()
        .enumerate()
        .map(|(v, &dim)| {
            let shared: Vec<Vec<f64>> = (0..c_count).map(|_| unit_vector(dim, &mut rng)).collect();
            let digits: Vec<Vec<f64>> = (0..m).map(|_| unit_vector(dim, &mut rng)).collect();
            let jitter: Vec<Vec<f64>> = (0..c_count).map(|_| unit_vector(dim, &mut rng)).collect();
            (0..c_count)
                .map(|c| {
                    let g = spec.digit(c, v);
                    (0..dim)
                        .map(|k| spec.separation * (a * shared[c][k] + b * digits[g][k] + JITTER * jitter[c][k]))
                        .collect()
                })
                .collect()
        })
        .collect();

    // class-major, index-minor: already sorted by the zero-padded id
    let mut ids = Vec::with_capacity(c_count * spec.n_per_class);
    let mut labels = Vec::with_capacity(ids.capacity());
    for c in 0..c_count {
        for i in 0..spec.n_per_class {
            ids.push(spec.sample_id(c, i));
            labels.push(c as u16);
        }
    }
    debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let names: Vec<String> = (0..spec.view_dims.len()).map(|v| format!("view{v}")).collect();
    let mut banks = Vec::with_capacity(spec.view_dims.len());
    for (v, &dim) in spec.view_dims.iter().enumerate() {
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &l in &labels {
            for k in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((means[v][l as usize][k] + spec.sigma * noise) as f32);
            }
        }
        let features = Tensor::new(vec![ids.len(), dim], data)?;
        banks.push(FeatureBank::new(names[v].clone(), ids.clone(), labels.clone(), features)?);
    }

    let (split_policy, official_split) = match spec.split {
        SynthSplit::Kfold { k, val_fraction } => (
            SplitPolicy::Kfold {
                k,
                seed: spec.seed,
                val_fraction,
            },
            None,
        ),
        SynthSplit::Official {
            val_fraction,
            test_fraction,
        } => (
            SplitPolicy::Official {
                train_path: "train.txt".into(),
                val_path: "val.txt".into(),
                test_path: "test.txt".into(),
            },
            Some(stratified_holdout(&ids, &labels, val_fraction, test_fraction, spec.seed)?),
        ),
    };
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        dataset_name: spec.dataset_name.clone(),
        class_names: spec.class_names(),
        representations: names
            .iter()
            .zip(&spec.view_dims)
            .map(|(n, &dim)| RepresentationRef {
                name: n.clone(),
                dim,
                bank_path: format!("{n}.bank").into(),
            })
            .collect(),
        split_policy,
    };
    Ok(SynthDataset {
        spec: spec.clone(),
        manifest,
        banks,
        means,
        official_split,
    })
}

impl SynthDataset {
    /// Writes `manifest.json`, one bank per view, the holdout id lists for
    /// an official split and `spec.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rep, bank) in self.manifest.representations.iter().zip(&self.banks) {
            bank.write(dir.join(&rep.bank_path))?;
        }
        if let (Some(split), SplitPolicy::Official { train_path, val_path, test_path }) =
            (&self.official_split, &self.manifest.split_policy)
        {
            write_id_list(dir.join(train_path), &split.train_ids)?;
            write_id_list(dir.join(val_path), &split.val_ids)?;
            write_id_list(dir.join(test_path), &split.test_ids)?;
        }
        let spec_path = dir.join("spec.json");
        let text = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&spec_path, text + "\n").map_err(|e| Error::io(&spec_path, e))?;
        self.manifest.write(dir.join("manifest.json"))
    }

    /// Accuracy of the nearest-true-mean rule using the given views, which is
    /// Bayes-optimal here (isotropic noise, equal priors).
    pub fn nearest_mean_accuracy(&self, views: &[usize]) -> f64 {
        let n = self.banks[0].len();
        let labels = self.banks[0].labels();
        let mut hits = 0;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..self.spec.n_classes {
                let d: f64 = views
                    .iter()
                    .map(|&v| {
                        self.banks[v]
                            .features()
                            .row(i)
                            .iter()
                            .zip(&self.means[v][c])
                            .map(|(&x, &mu)| (x as f64 - mu).powi(2))
                            .sum::<f64>()
                    })
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == labels[i] as usize {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }
}
