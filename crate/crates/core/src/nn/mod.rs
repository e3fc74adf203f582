//! Model configurations, the architecture registry and parameter ownership.

mod arch;
pub mod checkpoint;
pub mod registry;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RdNormalization;
use crate::tensor::{BatchNormState, Element, Padding, Tape, Tensor, Var};

pub use arch::{CnnArch, FcnArch, FusionArch};
pub use registry::{Architecture, Init, Layout, ParamSpec, Registry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl ConvBlock {
    pub const fn new(filters: usize, kernel: usize, pool: usize) -> Self {
        Self { filters, kernel, pool }
    }
}

/// Upper bound on any single configured width.
pub const MAX_WIDTH: usize = 1 << 20;

fn default_dense_units() -> Vec<usize> {
    vec![256, 128, 64]
}

fn default_conv_blocks() -> Vec<ConvBlock> {
    vec![ConvBlock::new(256, 3, 2), ConvBlock::new(128, 3, 2)]
}

fn default_projection_dim() -> usize {
    120
}

fn default_dropout_conv() -> f64 {
    0.3
}

fn default_dropout_dense() -> f64 {
    0.5
}

/// Declarative model description, stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Registered architecture name: `fcn`, `cnn`, `finder` or `concat_fusion`.
    pub kind: String,
    /// Width of each input representation, one entry per view.
    #[serde(default)]
    pub input_dims: Vec<usize>,
    pub n_classes: usize,
    #[serde(default = "default_dense_units")]
    pub dense_units: Vec<usize>,
    #[serde(default = "default_conv_blocks")]
    pub conv_blocks: Vec<ConvBlock>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default = "default_dropout_conv")]
    pub dropout_conv: f64,
    #[serde(default = "default_dropout_dense")]
    pub dropout_dense: f64,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub gate_enabled: bool,
    #[serde(default)]
    pub rd_normalization: RdNormalization,
}

impl ModelConfig {
    /// Config with default layer sizes.
    pub fn new(kind: &str, input_dims: Vec<usize>, n_classes: usize) -> Self {
        Self {
            kind: kind.to_string(),
            input_dims,
            n_classes,
            dense_units: default_dense_units(),
            conv_blocks: default_conv_blocks(),
            projection_dim: default_projection_dim(),
            dropout_conv: default_dropout_conv(),
            dropout_dense: default_dropout_dense(),
            padding: Padding::Same,
            gate_enabled: false,
            rd_normalization: RdNormalization::ReluEps,
        }
    }

    /// Checks that do not depend on the architecture.
    pub fn validate_common(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return fail(format!("input_dims must be non-empty and positive, got {:?}", self.input_dims));
        }
        if self.dense_units.contains(&0) {
            return fail(format!("dense_units must be positive, got {:?}", self.dense_units));
        }
        if self
            .conv_blocks
            .iter()
            .any(|b| b.filters == 0 || b.kernel == 0 || b.pool == 0)
        {
            return fail(format!("conv blocks need positive filters, kernel and pool: {:?}", self.conv_blocks));
        }
        let widths = self
            .input_dims
            .iter()
            .chain(&self.dense_units)
            .chain(self.conv_blocks.iter().flat_map(|b| [&b.filters, &b.kernel, &b.pool]))
            .chain([&self.projection_dim, &self.n_classes]);
        if let Some(w) = widths.into_iter().find(|&&w| w > MAX_WIDTH) {
            return fail(format!("layer width {w} exceeds the supported maximum {MAX_WIDTH}"));
        }
        if self.projection_dim == 0 {
            return fail("projection_dim must be positive".into());
        }
        for (name, p) in [("dropout_conv", self.dropout_conv), ("dropout_dense", self.dropout_dense)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[batch × n_classes]` softmax probabilities.
    pub probs: Var,
    /// Branch projections fed to the divergence loss (fusion kinds only).
    pub projections: Option<(Var, Var)>,
    /// Features just before the output layer.
    pub penultimate: Var,
}

/// Per-pass state handed to an [`Architecture`]: the tape, bound parameter
/// leaves, batch-norm statistics and the dropout RNG.
pub struct ForwardCtx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    params: HashMap<String, Var>,
    batchnorm: &'a mut BTreeMap<String, BatchNormState<T>>,
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Element> ForwardCtx<'_, T> {
    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    /// `x · W + b` using `{name}.weight` and `{name}.bias`.
    pub fn dense(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row_bias(y, b)
    }

    pub fn batchnorm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let state = self
            .batchnorm
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no batch-norm state named {name:?}")))?;
        self.tape.batchnorm1d(x, gamma, beta, state, self.train)
    }

    /// Inverted dropout: active only in training mode, survivors scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("training-mode forward needs a dropout RNG".into()))?;
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.tape.mul_const(x, Tensor::new(shape, mask)?)
    }
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct BoundForward {
    pub output: ForwardOutput,
    /// Tape leaves of the parameters, in [`Model::parameters`] order.
    pub param_vars: Vec<Var>,
}

/// A built network: configuration, named parameters and batch-norm buffers.
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    arch: Arc<dyn Architecture<T>>,
    params: Vec<(String, Tensor<T>)>,
    batchnorm: BTreeMap<String, BatchNormState<T>>,
    mode: Mode,
}

impl<T: Element> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            arch: Arc::clone(&self.arch),
            params: self.params.clone(),
            batchnorm: self.batchnorm.clone(),
            mode: self.mode,
        }
    }
}

impl<T: Element> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.config.kind)
            .field("parameters", &self.count_parameters())
            .field("mode", &self.mode)
            .finish()
    }
}

/// Architecture and layout for a config, validated against `registry`.
fn resolve<T: Element>(registry: &Registry<T>, config: &ModelConfig) -> Result<(Arc<dyn Architecture<T>>, Layout)> {
    config.validate_common()?;
    let arch = registry.get(&config.kind)?;
    if config.input_dims.len() != arch.n_views() {
        return Err(Error::Config(format!(
            "kind {} takes {} input view(s), config lists {}",
            config.kind,
            arch.n_views(),
            config.input_dims.len()
        )));
    }
    let layout = arch.layout(config)?;
    Ok((arch, layout))
}

impl<T: Element> Model<T> {
    /// Builds a model from the built-in registry.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with(&Registry::builtin(), config, seed)
    }

    /// Glorot-uniform weights, zero biases, unit/zero batch-norm affine terms,
    /// drawn in layout order from a generator seeded with `seed`.
    pub fn build_with(registry: &Registry<T>, config: &ModelConfig, seed: u64) -> Result<Self> {
        let (arch, layout) = resolve(registry, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .params
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<T> = match spec.init {
                    Init::Glorot { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                Ok((spec.name.clone(), Tensor::new(spec.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let batchnorm = layout
            .batchnorms
            .iter()
            .map(|(name, ch)| (name.clone(), BatchNormState::new(*ch)))
            .collect();
        Ok(Self {
            config: config.clone(),
            arch,
            params,
            batchnorm,
            mode: Mode::Train,
        })
    }

    /// Reassembles a model from stored tensors, checking them against the layout.
    pub fn from_parts(
        config: &ModelConfig,
        params: Vec<(String, Tensor<T>)>,
        batchnorm: BTreeMap<String, BatchNormState<T>>,
    ) -> Result<Self> {
        let (arch, layout) = resolve(&Registry::builtin(), config)?;
        if params.len() != layout.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameters for {}, found {}",
                layout.params.len(),
                config.kind,
                params.len()
            )));
        }
        for (spec, (name, t)) in layout.params.iter().zip(&params) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name:?} {:?} does not match expected {:?} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        for (name, ch) in &layout.batchnorms {
            match batchnorm.get(name) {
                Some(st) if st.running_mean.shape() == [*ch] && st.running_var.shape() == [*ch] => {}
                _ => return Err(Error::Integrity(format!("missing or malformed batch-norm state {name:?}"))),
            }
        }
        if batchnorm.len() != layout.batchnorms.len() {
            return Err(Error::Integrity("unexpected batch-norm states".into()));
        }
        Ok(Self {
            config: config.clone(),
            arch,
            params,
            batchnorm,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> &str {
        &self.config.kind
    }

    pub fn uses_rd_loss(&self) -> bool {
        self.arch.uses_rd_loss()
    }

    pub fn n_views(&self) -> usize {
        self.arch.n_views()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn batchnorm_states(&self) -> &BTreeMap<String, BatchNormState<T>> {
        &self.batchnorm
    }

    /// Scalar trainable parameters, batch-norm affine terms included and
    /// running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Width of the penultimate feature vector.
    pub fn penultimate_width(&self) -> usize {
        let c = &self.config;
        match self.arch.n_views() {
            2 => 2 * c.projection_dim,
            _ => match c.dense_units.last() {
                Some(&w) => w,
                None => self.parameter("out.weight").map_or(0, |w| w.shape()[0]),
            },
        }
    }

    /// Same model in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let arch = Registry::<U>::builtin()
            .get(&self.config.kind)
            .expect("built-in kinds exist in every precision");
        Model {
            config: self.config.clone(),
            arch,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            batchnorm: self
                .batchnorm
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.cast(),
                            running_var: s.running_var.cast(),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
            mode: self.mode,
        }
    }

    /// Records a forward pass over `views` (each `[batch × input_dims[i]]`).
    /// Training mode needs `rng` for dropout and updates batch-norm statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, views: &[Var], rng: Option<&mut ChaCha8Rng>) -> Result<BoundForward> {
        if views.len() != self.arch.n_views() {
            return Err(Error::Contract(format!(
                "{} expects {} view(s), got {}",
                self.config.kind,
                self.arch.n_views(),
                views.len()
            )));
        }
        let mut batch = None;
        for (i, (&v, &dim)) in views.iter().zip(&self.config.input_dims).enumerate() {
            let shape = tape.shape(v);
            if shape.len() != 2 || shape[1] != dim || batch.is_some_and(|b| b != shape[0]) {
                return Err(Error::Contract(format!(
                    "view {i} has shape {shape:?}, expected [batch x {dim}] with a common batch"
                )));
            }
            batch = Some(shape[0]);
        }
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        let params = self
            .params
            .iter()
            .zip(&param_vars)
            .map(|((n, _), v)| (n.clone(), *v))
            .collect();
        let mut ctx = ForwardCtx {
            tape,
            params,
            batchnorm: &mut self.batchnorm,
            train: self.mode == Mode::Train,
            rng,
        };
        let output = self.arch.forward(&self.config, &mut ctx, views)?;
        Ok(BoundForward { output, param_vars })
    }

    fn eval_pass<R>(&mut self, views: &[Tensor<T>], pick: impl FnOnce(&Tape<T>, &ForwardOutput) -> R) -> Result<R> {
        let saved = self.mode;
        self.mode = Mode::Eval;
        let mut tape = Tape::new();
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let result = self.forward(&mut tape, &vars, None);
        self.mode = saved;
        let bound = result?;
        Ok(pick(&tape, &bound.output))
    }

    /// Eval-mode class probabilities, `[batch × n_classes]`.
    pub fn predict(&mut self, views: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.eval_pass(views, |tape, out| tape.value(out.probs).clone())
    }

    /// Eval-mode penultimate features.
    pub fn embed(&mut self, views: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.eval_pass(views, |tape, out| tape.value(out.penultimate).clone())
    }
}
