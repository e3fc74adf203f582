//! Feature-bank files: one representation's vectors for every utterance.
//!
//! ```text
//! "FNDRBANK"                 8 bytes
//! format version             u32
//! representation name        u32 length + UTF-8
//! n                          u64
//! dim                        u32
//! labels                     u16 × n
//! sample ids                 n × (u32 length + UTF-8)
//! features                   f32 × n·dim, row-major
//! checksum                   u64, CRC-64/XZ of all preceding bytes
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::binfmt::{unframe, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const BANK_MAGIC: &[u8; 8] = b"FNDRBANK";
pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    representation_name: String,
    labels: Vec<u16>,
    sample_ids: Vec<String>,
    /// `[n × dim]`.
    features: Tensor<f32>,
}

impl FeatureBank {
    pub fn new(
        representation_name: impl Into<String>,
        sample_ids: Vec<String>,
        labels: Vec<u16>,
        features: Tensor<f32>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        if features.rank() != 2 || features.shape()[0] != n || labels.len() != n {
            return Err(Error::Contract(format!(
                "bank with {n} ids and {} labels needs an [n x dim] matrix, got {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if features.shape()[1] == 0 || features.shape()[1] > u32::MAX as usize {
            return Err(Error::Contract(format!("invalid bank dimension {}", features.shape()[1])));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Integrity(format!("duplicate sample id {dup:?} in bank")));
        }
        Ok(Self {
            representation_name: representation_name.into(),
            labels,
            sample_ids,
            features,
        })
    }

    pub fn representation_name(&self) -> &str {
        &self.representation_name
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    /// Fails on the first label outside `[0, n_classes)`.
    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().enumerate().find(|(_, &l)| l as usize >= n_classes) {
            Some((row, &label)) => Err(FormatError::LabelOutOfRange { row, label, n_classes }.into()),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.str(&self.representation_name);
        w.u64(self.len() as u64);
        w.u32(self.dim() as u32);
        for &l in &self.labels {
            w.u16(l);
        }
        for id in &self.sample_ids {
            w.str(id);
        }
        w.f32s(self.features.data().iter().copied());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unframe(bytes, BANK_MAGIC)?;
        let mut r = Reader::new(body);
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(FormatError::Version {
                expected: BANK_VERSION,
                found: version,
            }
            .into());
        }
        let name = r.str()?;
        let n = r.u64()?;
        let dim = r.u32()?;
        if dim == 0 {
            return Err(FormatError::Malformed("bank dimension is zero".into()).into());
        }
        let labels: Vec<u16> = r
            .array(n, 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let n = labels.len();
        // every id costs at least its 4-byte length prefix
        if n.saturating_mul(4) > r.remaining() {
            return Err(FormatError::Truncated {
                needed: n * 4,
                available: r.remaining(),
            }
            .into());
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.str()?);
        }
        let count = (n as u64)
            .checked_mul(dim as u64)
            .ok_or_else(|| FormatError::Malformed("feature matrix size overflows".into()))?;
        let features = r.f32s(count)?;
        r.expect_end()?;
        let features = Tensor::new(vec![n, dim as usize], features)?;
        Self::new(name, ids, labels, features).map_err(|e| match e {
            Error::Integrity(m) | Error::Contract(m) => Error::Format(FormatError::Malformed(m)),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    bank.write(path)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    FeatureBank::read(path)
}
