//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

pub mod fuzz;

use finder_core::losses::{combined_loss, cross_entropy, renyi_divergence, RdNormalization, RenyiParams};
use finder_core::nn::{ConvBlock, Mode, Model, ModelConfig};
use finder_core::tensor::{BatchNormState, Padding, Tape, Tensor, Var};
use finder_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-2;

pub type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar objective: a fixed random projection of the graph output, so every
/// output element contributes with a distinct weight.
fn objective(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.shape(out).is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let shape = tape.shape(out).to_vec();
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    let weighted = tape.mul_const(out, w)?;
    Ok(tape.sum(weighted))
}

fn eval(case: &GradCase, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = objective(&mut tape, out, seed).unwrap();
    tape.value(loss).item().unwrap()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over all inputs.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Worst relative error over the case's inputs under central differences.
pub fn check_case(case: &GradCase, seed: u64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = objective(&mut tape, out, seed).unwrap();
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(v);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(case, &plus, seed) - eval(case, &minus, seed)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// One randomized instance of every differentiable primitive and loss.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(2..4);
    let n = rng.gen_range(2..5);
    let m = rng.gen_range(2..5);
    let c = rng.gen_range(2..4);
    let l = rng.gen_range(6..10);
    let k = [3usize, 5][rng.gen_range(0..2)];
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..m)).collect();
    let pick_idx = labels.clone();
    let alpha = rng.gen_range(1.2..4.0);
    let exponent = rng.gen_range(0.5..2.5);
    let params = RenyiParams {
        alpha,
        epsilon: 0.1,
        lambda: rng.gen_range(0.1..0.9),
    };
    let ce_labels = labels.clone();
    let combo_labels = labels.clone();
    let mut cases = vec![
        GradCase {
            name: "matmul",
            inputs: vec![uniform(&mut rng, &[b, n], -1.0, 1.0), uniform(&mut rng, &[n, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        GradCase {
            name: "add_row_bias",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0), uniform(&mut rng, &[m], -1.0, 1.0)],
            build: Box::new(|t, v| t.add_row_bias(v[0], v[1])),
        },
        GradCase {
            name: "add",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0), uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        GradCase {
            name: "mul",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0), uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        GradCase {
            name: "lincomb",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0), uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.lincomb(v[0], 0.4, v[1], 0.6)),
        },
        GradCase {
            name: "relu",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| Ok(t.relu(v[0]))),
        },
        GradCase {
            name: "sigmoid",
            inputs: vec![uniform(&mut rng, &[b, m], -3.0, 3.0)],
            build: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        },
        GradCase {
            name: "log",
            inputs: vec![uniform(&mut rng, &[b, m], 0.5, 2.0)],
            build: Box::new(|t, v| t.log(v[0])),
        },
        GradCase {
            name: "pow",
            inputs: vec![uniform(&mut rng, &[b, m], 0.5, 2.0)],
            build: Box::new(move |t, v| t.pow(v[0], exponent)),
        },
        GradCase {
            name: "add_scalar",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7))),
        },
        GradCase {
            name: "mul_scalar",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| Ok(t.mul_scalar(v[0], -1.3))),
        },
        GradCase {
            name: "softmax",
            inputs: vec![uniform(&mut rng, &[b, m], -2.0, 2.0)],
            build: Box::new(|t, v| t.softmax(v[0])),
        },
        GradCase {
            name: "conv1d_same",
            inputs: vec![
                uniform(&mut rng, &[b, c, l], -1.0, 1.0),
                uniform(&mut rng, &[c + 1, c, k], -1.0, 1.0),
                uniform(&mut rng, &[c + 1], -1.0, 1.0),
            ],
            build: Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Same)),
        },
        GradCase {
            name: "conv1d_valid",
            inputs: vec![
                uniform(&mut rng, &[b, c, l], -1.0, 1.0),
                uniform(&mut rng, &[2, c, k], -1.0, 1.0),
                uniform(&mut rng, &[2], -1.0, 1.0),
            ],
            build: Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Valid)),
        },
        GradCase {
            name: "maxpool1d",
            inputs: vec![uniform(&mut rng, &[b, c, l], -1.0, 1.0)],
            build: Box::new(|t, v| t.maxpool1d(v[0], 2)),
        },
        GradCase {
            name: "batchnorm1d_3d",
            inputs: vec![
                uniform(&mut rng, &[b, c, l], -1.0, 1.0),
                uniform(&mut rng, &[c], 0.5, 1.5),
                uniform(&mut rng, &[c], -0.5, 0.5),
            ],
            build: Box::new(move |t, v| {
                let mut st = BatchNormState::new(c);
                t.batchnorm1d(v[0], v[1], v[2], &mut st, true)
            }),
        },
        GradCase {
            name: "batchnorm1d_2d",
            inputs: vec![
                uniform(&mut rng, &[b + 2, m], -1.0, 1.0),
                uniform(&mut rng, &[m], 0.5, 1.5),
                uniform(&mut rng, &[m], -0.5, 0.5),
            ],
            build: Box::new(move |t, v| {
                let mut st = BatchNormState::new(m);
                t.batchnorm1d(v[0], v[1], v[2], &mut st, true)
            }),
        },
        GradCase {
            name: "reshape",
            inputs: vec![uniform(&mut rng, &[b, c, l], -1.0, 1.0)],
            build: Box::new(move |t, v| t.reshape(v[0], &[b, c * l])),
        },
        GradCase {
            name: "concat_cols",
            inputs: vec![uniform(&mut rng, &[b, n], -1.0, 1.0), uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.concat_cols(v[0], v[1])),
        },
        GradCase {
            name: "scale",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0), uniform(&mut rng, &[1], 0.2, 1.0)],
            build: Box::new(|t, v| t.scale(v[0], v[1])),
        },
        GradCase {
            name: "sum",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        GradCase {
            name: "mean",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.mean(v[0])),
        },
        GradCase {
            name: "sum_last",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(|t, v| t.sum_last(v[0])),
        },
        GradCase {
            name: "pick",
            inputs: vec![uniform(&mut rng, &[b, m], -1.0, 1.0)],
            build: Box::new(move |t, v| t.pick(v[0], &pick_idx)),
        },
        GradCase {
            name: "cross_entropy",
            inputs: vec![uniform(&mut rng, &[b, m], -2.0, 2.0)],
            build: Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                cross_entropy(t, p, &ce_labels)
            }),
        },
    ];
    for (name, norm) in [("renyi_relu_eps", RdNormalization::ReluEps), ("renyi_softmax", RdNormalization::Softmax)] {
        cases.push(GradCase {
            name,
            inputs: vec![uniform(&mut rng, &[b, n], -1.0, 2.0), uniform(&mut rng, &[b, n], -1.0, 2.0)],
            build: Box::new(move |t, v| renyi_divergence(t, v[0], v[1], &params, norm)),
        });
    }
    cases.push(GradCase {
        name: "combined_loss",
        inputs: vec![
            uniform(&mut rng, &[b, m], -2.0, 2.0),
            uniform(&mut rng, &[b, n], -1.0, 2.0),
            uniform(&mut rng, &[b, n], -1.0, 2.0),
        ],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(combined_loss(t, p, &combo_labels, Some((v[1], v[2])), &params, RdNormalization::ReluEps)?.total)
        }),
    });
    cases
}

/// Small fusion configuration used by gradient and training checks.
pub fn tiny_finder_config(dims: [usize; 2], n_classes: usize) -> ModelConfig {
    ModelConfig {
        conv_blocks: vec![ConvBlock::new(3, 3, 2), ConvBlock::new(2, 3, 2)],
        projection_dim: 4,
        gate_enabled: true,
        ..ModelConfig::new("finder", dims.to_vec(), n_classes)
    }
}

/// Outcome of a fusion-graph gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GraphCheck {
    pub error: f64,
    /// False when some perturbation flipped a ReLU sign or a max-pool winner,
    /// so central differences straddle a kink and say nothing about the
    /// gradient. Decided from forward passes alone.
    pub smooth: bool,
}

/// Full training-mode fusion forward plus combined loss, differentiated with
/// respect to every parameter and both inputs, against central differences.
pub fn check_finder_graph(seed: u64, norm: RdNormalization) -> GraphCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.gen_range(8..14), rng.gen_range(8..14)];
    let n_classes = rng.gen_range(2..4);
    let batch = rng.gen_range(2..4);
    let cfg = ModelConfig {
        rd_normalization: norm,
        ..tiny_finder_config(dims, n_classes)
    };
    let mut model = Model::<f64>::build(&cfg, seed).unwrap();
    model.set_mode(Mode::Train);
    let views: Vec<Tensor<f64>> = dims.iter().map(|&d| uniform(&mut rng, &[batch, d], -1.0, 1.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_classes)).collect();
    let params = RenyiParams::default();
    let dropout_seed = seed.wrapping_mul(31) + 7;

    let loss_of = |model: &mut Model<f64>, views: &[Tensor<f64>], tape: &mut Tape<f64>| -> (Var, Vec<Var>, Vec<Var>) {
        let vars: Vec<Var> = views.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let bound = model.forward(tape, &vars, Some(&mut drop_rng)).unwrap();
        let loss = combined_loss(tape, bound.output.probs, &labels, bound.output.projections, &params, norm).unwrap();
        (loss.total, bound.param_vars, vars)
    };

    let mut tape = Tape::new();
    let (loss, param_vars, view_vars) = loss_of(&mut model, &views, &mut tape);
    tape.backward(loss).unwrap();
    let base_pattern = tape.branch_pattern();
    let mut smooth = true;
    let mut value = |model: &mut Model<f64>, views: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let (loss, _, _) = loss_of(model, views, &mut tape);
        smooth &= tape.branch_pattern() == base_pattern;
        tape.value(loss).item().unwrap()
    };
    let mut analytic = Vec::new();
    for &v in param_vars.iter().chain(&view_vars) {
        analytic.extend(tape.grad_or_zeros(v));
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..model.parameters().len() {
        for j in 0..model.parameters()[p].1.len() {
            let orig = model.parameters()[p].1.data()[j];
            model.parameters_mut()[p].1.data_mut()[j] = orig + FD_STEP;
            let up = value(&mut model, &views);
            model.parameters_mut()[p].1.data_mut()[j] = orig - FD_STEP;
            let down = value(&mut model, &views);
            model.parameters_mut()[p].1.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    for v in 0..views.len() {
        for j in 0..views[v].len() {
            let mut plus = views.clone();
            plus[v].data_mut()[j] += FD_STEP;
            let mut minus = views.clone();
            minus[v].data_mut()[j] -= FD_STEP;
            numeric.push((value(&mut model, &plus) - value(&mut model, &minus)) / (2.0 * FD_STEP));
        }
    }
    GraphCheck {
        error: relative_error(&analytic, &numeric),
        smooth,
    }
}

/// Checks fusion graphs on consecutive seeds, alternating normalizations,
/// until `wanted` smooth points have been checked. Returns the checks made and
/// the seeds skipped for straddling a kink.
pub fn smooth_graph_checks(wanted: usize, max_seeds: u64) -> (Vec<(u64, RdNormalization, GraphCheck)>, Vec<u64>) {
    let mut checked = Vec::new();
    let mut skipped = Vec::new();
    for seed in 0..max_seeds {
        if checked.len() == wanted {
            break;
        }
        let norm = if seed % 2 == 0 { RdNormalization::ReluEps } else { RdNormalization::Softmax };
        let c = check_finder_graph(seed, norm);
        if c.smooth {
            checked.push((seed, norm, c));
        } else {
            skipped.push(seed);
        }
    }
    (checked, skipped)
}

/// Direct evaluation of the averaged divergence, independent of the tape.
pub fn renyi_oracle(a: &[f64], b: &[f64], cols: usize, alpha: f64, eps: f64, norm: RdNormalization) -> f64 {
    let normalize = |row: &[f64]| -> Vec<f64> {
        match norm {
            RdNormalization::ReluEps => row.iter().map(|&x| x.max(0.0) + eps).collect(),
            RdNormalization::Softmax => {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                row.iter().map(|&x| (x - mx).exp() / z + eps).collect()
            }
        }
    };
    let rows = a.len() / cols;
    let mut total = 0.0;
    for r in 0..rows {
        let p = normalize(&a[r * cols..(r + 1) * cols]);
        let q = normalize(&b[r * cols..(r + 1) * cols]);
        let s: f64 = p.iter().zip(&q).map(|(&pi, &qi)| pi.powf(alpha) * qi.powf(1.0 - alpha)).sum();
        total += s.ln() / (alpha - 1.0);
    }
    total / rows as f64
}

pub fn renyi_value(a: &Tensor<f64>, b: &Tensor<f64>, params: &RenyiParams, norm: RdNormalization) -> f64 {
    let mut tape = Tape::<f64>::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let d = renyi_divergence(&mut tape, va, vb, params, norm).unwrap();
    tape.value(d).item().unwrap()
}

/// Brute-force equal error rate: explicit FAR/FRR at every candidate
/// threshold, then the first point where FAR − FRR reaches zero, linearly
/// interpolated when it jumps across.
pub fn eer_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.push(f64::NEG_INFINITY);
    ts.push(f64::INFINITY);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let mut far = Vec::new();
    let mut frr = Vec::new();
    for &t in &ts {
        far.push(neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64);
        frr.push(pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64);
    }
    for i in 0..ts.len() {
        let d = far[i] - frr[i];
        if d == 0.0 {
            return far[i];
        }
        if d < 0.0 {
            let dp = far[i - 1] - frr[i - 1];
            let s = dp / (dp - d);
            return far[i - 1] + s * (far[i] - far[i - 1]);
        }
    }
    unreachable!()
}

/// Random probability matrix, optionally quantized so ties occur.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, c: usize, quantize: bool) -> (Vec<f64>, Vec<usize>) {
    let mut probs = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..c);
        let mut row: Vec<f64> = (0..c)
            .map(|j| {
                let boost = if j == label { rng.gen_range(0.0..2.0) } else { 0.0 };
                let x: f64 = rng.gen_range(0.0..1.0) + boost;
                if quantize {
                    (x * 4.0).round() / 4.0 + 0.01
                } else {
                    x + 1e-6
                }
            })
            .collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        probs.extend(row);
        labels.push(label);
    }
    (probs, labels)
}

/// Random strictly increasing map on the reals.
pub fn monotone_map(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let a = rng.gen_range(0.1..10.0);
    let b = rng.gen_range(-5.0..5.0);
    let c = rng.gen_range(0.0..3.0);
    move |x: f64| a * x + b + c * x.powi(3) + (x * 2.0).atan()
}
