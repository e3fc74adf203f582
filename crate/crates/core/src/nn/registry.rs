use std::collections::BTreeMap;
use std::sync::Arc;

use super::arch::{CnnArch, FcnArch, FusionArch};
use super::{ForwardCtx, ForwardOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Everything a model of one architecture owns: trainable parameters in a
/// fixed order plus the batch-norm layers whose running statistics it keeps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    /// `(layer name, channel count)`.
    pub batchnorms: Vec<(String, usize)>,
}

/// One model family. Implementations are registered by name and selected
/// through `ModelConfig::kind`.
pub trait Architecture<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of input representations the architecture consumes.
    fn n_views(&self) -> usize;

    /// Whether training adds the divergence term between branch projections.
    fn uses_rd_loss(&self) -> bool {
        false
    }

    /// Parameters and buffers for `config`; fails when the shapes cannot be built.
    fn layout(&self, config: &ModelConfig) -> Result<Layout>;

    fn forward(&self, config: &ModelConfig, ctx: &mut ForwardCtx<'_, T>, views: &[Var]) -> Result<ForwardOutput>;
}

pub struct Registry<T: Element> {
    entries: BTreeMap<&'static str, Arc<dyn Architecture<T>>>,
}

impl<T: Element> Default for Registry<T> {
    fn default() -> Self {
        Self::builtin()
    }
}

impl<T: Element> Registry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// `fcn`, `cnn`, `finder` and `concat_fusion`.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(FcnArch));
        reg.register(Arc::new(CnnArch));
        reg.register(Arc::new(FusionArch::finder()));
        reg.register(Arc::new(FusionArch::concat()));
        reg
    }

    /// Adds or replaces an architecture, returning the previous entry under the same name.
    pub fn register(&mut self, arch: Arc<dyn Architecture<T>>) -> Option<Arc<dyn Architecture<T>>> {
        self.entries.insert(arch.name(), arch)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Architecture<T>>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown model kind {name:?} (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_kinds_are_registered() {
        let reg = Registry::<f32>::builtin();
        assert_eq!(reg.names(), vec!["cnn", "concat_fusion", "fcn", "finder"]);
        assert!(reg.get("finder").unwrap().uses_rd_loss());
        assert!(!reg.get("concat_fusion").unwrap().uses_rd_loss());
        assert_eq!(reg.get("cnn").unwrap().n_views(), 1);
        assert!(matches!(reg.get("aasist"), Err(Error::Config(_))));
    }

    #[test]
    fn register_replaces_by_name() {
        let mut reg = Registry::<f32>::empty();
        assert!(reg.register(Arc::new(FcnArch)).is_none());
        assert!(reg.register(Arc::new(FcnArch)).is_some());
        assert_eq!(reg.names(), vec!["fcn"]);
    }
}
