use super::registry::{Architecture, Init, Layout, ParamSpec};
use super::{ForwardCtx, ForwardOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Padding, Var};

fn dense_specs(specs: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.weight"),
        vec![fan_in, fan_out],
        Init::Glorot { fan_in, fan_out },
    ));
    specs.push(ParamSpec::new(format!("{name}.bias"), vec![fan_out], Init::Zeros));
}

/// Hidden dense stack specs; returns the width of the last hidden layer.
fn dense_stack_layout(layout: &mut Layout, prefix: &str, input: usize, units: &[usize]) -> usize {
    let mut width = input;
    for (i, &u) in units.iter().enumerate() {
        dense_specs(&mut layout.params, &format!("{prefix}dense{i}"), width, u);
        width = u;
    }
    width
}

fn conv_len(len: usize, kernel: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(len),
        Padding::Valid => len.checked_sub(kernel).map(|l| l + 1),
    }
}

/// Conv trunk specs; returns the flattened feature length.
fn conv_trunk_layout(layout: &mut Layout, prefix: &str, input_dim: usize, cfg: &ModelConfig) -> Result<usize> {
    let mut channels = 1;
    let mut len = input_dim;
    for (i, block) in cfg.conv_blocks.iter().enumerate() {
        let fan_in = channels * block.kernel;
        let fan_out = block.filters * block.kernel;
        layout.params.push(ParamSpec::new(
            format!("{prefix}conv{i}.weight"),
            vec![block.filters, channels, block.kernel],
            Init::Glorot { fan_in, fan_out },
        ));
        layout.params.push(ParamSpec::new(
            format!("{prefix}conv{i}.bias"),
            vec![block.filters],
            Init::Zeros,
        ));
        layout.params.push(ParamSpec::new(
            format!("{prefix}bn{i}.gamma"),
            vec![block.filters],
            Init::Ones,
        ));
        layout.params.push(ParamSpec::new(
            format!("{prefix}bn{i}.beta"),
            vec![block.filters],
            Init::Zeros,
        ));
        layout.batchnorms.push((format!("{prefix}bn{i}"), block.filters));
        let after_conv = conv_len(len, block.kernel, cfg.padding).filter(|&l| l > 0);
        len = match after_conv.map(|l| l / block.pool) {
            Some(l) if l > 0 => l,
            _ => {
                return Err(Error::Config(format!(
                    "input of width {input_dim} is too short for conv block {i} \
                     (length {len}, kernel {}, pool {})",
                    block.kernel, block.pool
                )))
            }
        };
        channels = block.filters;
    }
    Ok(channels * len)
}

fn dense_stack<T: Element>(ctx: &mut ForwardCtx<'_, T>, prefix: &str, mut x: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let mut hidden = x;
    for i in 0..cfg.dense_units.len() {
        let h = ctx.dense(x, &format!("{prefix}dense{i}"))?;
        hidden = ctx.tape.relu(h);
        x = ctx.dropout(hidden, cfg.dropout_dense)?;
    }
    Ok((x, hidden))
}

/// `[B×D]` → conv blocks → dropout → `[B×flat]`.
fn conv_trunk<T: Element>(ctx: &mut ForwardCtx<'_, T>, prefix: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let batch = shape[0];
    let mut h = ctx.tape.reshape(x, &[batch, 1, shape[1]])?;
    for (i, block) in cfg.conv_blocks.iter().enumerate() {
        let w = ctx.param(&format!("{prefix}conv{i}.weight"))?;
        let b = ctx.param(&format!("{prefix}conv{i}.bias"))?;
        h = ctx.tape.conv1d(h, w, b, cfg.padding)?;
        h = ctx.batchnorm(h, &format!("{prefix}bn{i}"))?;
        h = ctx.tape.relu(h);
        h = ctx.tape.maxpool1d(h, block.pool)?;
    }
    h = ctx.dropout(h, cfg.dropout_conv)?;
    let flat: usize = ctx.tape.shape(h)[1..].iter().product();
    ctx.tape.reshape(h, &[batch, flat])
}

fn classify<T: Element>(ctx: &mut ForwardCtx<'_, T>, x: Var, name: &str) -> Result<Var> {
    let logits = ctx.dense(x, name)?;
    ctx.tape.softmax(logits)
}

/// Dense stack over the raw representation vector.
pub struct FcnArch;

impl<T: Element> Architecture<T> for FcnArch {
    fn name(&self) -> &'static str {
        "fcn"
    }

    fn n_views(&self) -> usize {
        1
    }

    fn layout(&self, cfg: &ModelConfig) -> Result<Layout> {
        let mut layout = Layout::default();
        let width = dense_stack_layout(&mut layout, "", cfg.input_dims[0], &cfg.dense_units);
        dense_specs(&mut layout.params, "out", width, cfg.n_classes);
        Ok(layout)
    }

    fn forward(&self, cfg: &ModelConfig, ctx: &mut ForwardCtx<'_, T>, views: &[Var]) -> Result<ForwardOutput> {
        let (x, hidden) = dense_stack(ctx, "", views[0], cfg)?;
        let probs = classify(ctx, x, "out")?;
        Ok(ForwardOutput {
            probs,
            projections: None,
            penultimate: hidden,
        })
    }
}

/// Conv blocks over the vector viewed as a one-channel signal, then the dense stack.
pub struct CnnArch;

impl<T: Element> Architecture<T> for CnnArch {
    fn name(&self) -> &'static str {
        "cnn"
    }

    fn n_views(&self) -> usize {
        1
    }

    fn layout(&self, cfg: &ModelConfig) -> Result<Layout> {
        let mut layout = Layout::default();
        let flat = conv_trunk_layout(&mut layout, "", cfg.input_dims[0], cfg)?;
        let width = dense_stack_layout(&mut layout, "", flat, &cfg.dense_units);
        dense_specs(&mut layout.params, "out", width, cfg.n_classes);
        Ok(layout)
    }

    fn forward(&self, cfg: &ModelConfig, ctx: &mut ForwardCtx<'_, T>, views: &[Var]) -> Result<ForwardOutput> {
        let flat = conv_trunk(ctx, "", views[0], cfg)?;
        let (x, hidden) = dense_stack(ctx, "", flat, cfg)?;
        let probs = classify(ctx, x, "out")?;
        Ok(ForwardOutput {
            probs,
            projections: None,
            penultimate: hidden,
        })
    }
}

/// Two conv branches, each projected to `projection_dim`, concatenated into a
/// softmax head. The `finder` variant exposes the projections to the
/// divergence loss; `concat_fusion` shares the graph and trains on
/// cross-entropy alone.
pub struct FusionArch {
    name: &'static str,
    rd_loss: bool,
}

impl FusionArch {
    pub fn finder() -> Self {
        Self {
            name: "finder",
            rd_loss: true,
        }
    }

    pub fn concat() -> Self {
        Self {
            name: "concat_fusion",
            rd_loss: false,
        }
    }
}

const BRANCHES: [&str; 2] = ["a", "b"];

impl<T: Element> Architecture<T> for FusionArch {
    fn name(&self) -> &'static str {
        self.name
    }

    fn n_views(&self) -> usize {
        2
    }

    fn uses_rd_loss(&self) -> bool {
        self.rd_loss
    }

    fn layout(&self, cfg: &ModelConfig) -> Result<Layout> {
        let mut layout = Layout::default();
        let p = cfg.projection_dim;
        for (branch, &dim) in BRANCHES.iter().zip(&cfg.input_dims) {
            let flat = conv_trunk_layout(&mut layout, &format!("branch_{branch}."), dim, cfg)?;
            dense_specs(&mut layout.params, &format!("proj_{branch}"), flat, p);
            if cfg.gate_enabled {
                layout
                    .params
                    .push(ParamSpec::new(format!("gate_{branch}"), vec![1], Init::Zeros));
            }
        }
        dense_specs(&mut layout.params, "head", 2 * p, cfg.n_classes);
        Ok(layout)
    }

    fn forward(&self, cfg: &ModelConfig, ctx: &mut ForwardCtx<'_, T>, views: &[Var]) -> Result<ForwardOutput> {
        let mut proj = Vec::with_capacity(2);
        for (branch, &view) in BRANCHES.iter().zip(views) {
            let flat = conv_trunk(ctx, &format!("branch_{branch}."), view, cfg)?;
            let mut e = ctx.dense(flat, &format!("proj_{branch}"))?;
            if cfg.gate_enabled {
                let g = ctx.param(&format!("gate_{branch}"))?;
                let gate = ctx.tape.sigmoid(g);
                e = ctx.tape.scale(e, gate)?;
            }
            proj.push(e);
        }
        let fused = ctx.tape.concat_cols(proj[0], proj[1])?;
        let probs = classify(ctx, fused, "head")?;
        Ok(ForwardOutput {
            probs,
            projections: Some((proj[0], proj[1])),
            penultimate: fused,
        })
    }
}
