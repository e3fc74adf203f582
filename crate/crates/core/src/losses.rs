//! Cross-entropy, the Rényi-divergence alignment loss between two branch
//! projections, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Added inside the log of the cross-entropy so saturated softmax rows stay finite.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenyiParams {
    /// Order of the divergence, strictly greater than 1.
    pub alpha: f64,
    /// Stabilizer added to both normalized inputs.
    pub epsilon: f64,
    /// Weight of the cross-entropy term; the divergence gets `1 - lambda`.
    pub lambda: f64,
}

impl Default for RenyiParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            epsilon: 0.1,
            lambda: 0.4,
        }
    }
}

impl RenyiParams {
    /// Training-time validation. `epsilon` must be strictly positive here;
    /// [`renyi_divergence`] itself also accepts `epsilon == 0` on normalized inputs.
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be finite and > 1, got {alpha}")))
    }
}

/// How branch projections are made positive before entering the divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdNormalization {
    /// `relu(e) + epsilon`.
    #[default]
    ReluEps,
    /// Row softmax, then `+ epsilon`.
    Softmax,
}

impl RdNormalization {
    pub fn as_str(self) -> &'static str {
        match self {
            RdNormalization::ReluEps => "relu_eps",
            RdNormalization::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub rd: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Breakdown whose total is computed from its parts.
    pub fn compose(ce: f64, rd: f64, lambda: f64) -> Self {
        Self {
            total: lambda * ce + (1.0 - lambda) * rd,
            ce,
            rd,
            lambda,
        }
    }

    /// Absolute deviation of `total` from `lambda·ce + (1-lambda)·rd`.
    pub fn identity_residual(&self) -> f64 {
        (self.total - (self.lambda * self.ce + (1.0 - self.lambda) * self.rd)).abs()
    }
}

/// Mean over the batch of `-ln(p[i, label_i] + 1e-12)`.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "cross_entropy needs [batch x classes] probabilities matching {} labels, got {:?}",
            labels.len(),
            shape
        )));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= shape[1]) {
        return Err(Error::Contract(format!(
            "label {l} at row {i} out of range for {} classes",
            shape[1]
        )));
    }
    let picked = tape.pick(probs, labels)?;
    let shifted = tape.add_scalar(picked, CE_CLAMP);
    let logs = tape.log(shifted)?;
    let mean = tape.mean(logs)?;
    Ok(tape.mul_scalar(mean, -1.0))
}

/// Batch-mean Rényi divergence of order `alpha` between two `[batch×D]`
/// projections (rank-1 inputs are treated as a batch of one):
/// `1/(alpha-1) · ln Σ_i (a_i+eps)^alpha (b_i+eps)^(1-alpha)`.
pub fn renyi_divergence<T: Element>(
    tape: &mut Tape<T>,
    e_a: Var,
    e_b: Var,
    params: &RenyiParams,
    normalization: RdNormalization,
) -> Result<Var> {
    check_alpha(params.alpha)?;
    if !(params.epsilon >= 0.0 && params.epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {}", params.epsilon)));
    }
    let (sa, sb) = (tape.shape(e_a).to_vec(), tape.shape(e_b).to_vec());
    if sa != sb || sa.is_empty() || sa.len() > 2 || sa.contains(&0) {
        return Err(Error::Shape {
            op: "renyi_divergence",
            lhs: sa,
            rhs: sb,
        });
    }
    let (a, b) = if sa.len() == 1 {
        let row = [1, sa[0]];
        (tape.reshape(e_a, &row)?, tape.reshape(e_b, &row)?)
    } else {
        (e_a, e_b)
    };
    let prepare = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let positive = match normalization {
            RdNormalization::ReluEps => tape.relu(x),
            RdNormalization::Softmax => tape.softmax(x)?,
        };
        Ok(tape.add_scalar(positive, params.epsilon))
    };
    let pa = prepare(tape, a)?;
    let pb = prepare(tape, b)?;
    // A non-positive base here means the normalization failed to guarantee positivity.
    let ta = tape.pow(pa, params.alpha)?;
    let tb = tape.pow(pb, 1.0 - params.alpha)?;
    let terms = tape.mul(ta, tb)?;
    let sums = tape.sum_last(terms)?;
    let logs = tape.log(sums)?;
    let per_row = tape.mul_scalar(logs, 1.0 / (params.alpha - 1.0));
    tape.mean(per_row)
}

/// Output of [`combined_loss`]: the scalar to differentiate plus its parts.
#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `lambda·CE + (1-lambda)·RD` when `projections` is given; plain cross-entropy
/// (reported with `lambda = 1`, `rd = 0`) otherwise.
pub fn combined_loss<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[usize],
    projections: Option<(Var, Var)>,
    params: &RenyiParams,
    normalization: RdNormalization,
) -> Result<CombinedLoss> {
    let ce = cross_entropy(tape, probs, labels)?;
    let ce_value = tape.value(ce).item()?.wide();
    let Some((pa, pb)) = projections else {
        return Ok(CombinedLoss {
            total: ce,
            breakdown: LossBreakdown {
                total: ce_value,
                ce: ce_value,
                rd: 0.0,
                lambda: 1.0,
            },
        });
    };
    let rd = renyi_divergence(tape, pa, pb, params, normalization)?;
    let rd_value = tape.value(rd).item()?.wide();
    let total = tape.lincomb(ce, params.lambda, rd, 1.0 - params.lambda)?;
    let total_value = tape.value(total).item()?.wide();
    Ok(CombinedLoss {
        total,
        breakdown: LossBreakdown {
            total: total_value,
            ce: ce_value,
            rd: rd_value,
            lambda: params.lambda,
        },
    })
}
