//! Margin loss, the class-weighted margin loss with regression and
//! reconstruction auxiliaries, and weighted cross-entropy for the CNN baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_neg: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_neg: 0.5,
        }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::config(format!(
                "margins must satisfy 0 <= m_minus < m_plus <= 1, got {} / {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda_neg < 0.0 {
            return Err(Error::config("lambda_neg must be non-negative"));
        }
        Ok(())
    }
}

/// How class proportions `p_k` become per-class loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `w_k = p_k`
    Literal,
    /// `w_k = 1 − p_k`, favouring the minority class.
    Inverse,
    /// `w_k = 1`: the unweighted margin loss.
    Uniform,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(WeightMode::Literal),
            "inverse" => Ok(WeightMode::Inverse),
            "uniform" | "none" => Ok(WeightMode::Uniform),
            other => Err(Error::config(format!("unknown weight mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMode::Literal => "literal",
            WeightMode::Inverse => "inverse",
            WeightMode::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedLossParams {
    /// `p_k = c_k / N` over the training set.
    pub class_proportions: Vec<f64>,
    pub weight_mode: WeightMode,
    pub lambda_reg: f64,
    pub lambda_recon: f64,
}

impl Default for WeightedLossParams {
    fn default() -> Self {
        WeightedLossParams {
            class_proportions: vec![0.5, 0.5],
            weight_mode: WeightMode::Inverse,
            lambda_reg: 0.05,
            lambda_recon: 0.0005,
        }
    }
}

impl WeightedLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_reg < 0.0 || self.lambda_recon < 0.0 {
            return Err(Error::config(format!(
                "loss coefficients must be non-negative (lambda_reg={}, lambda_recon={})",
                self.lambda_reg, self.lambda_recon
            )));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "class proportions must be non-negative and sum to 1, got {:?}",
                self.class_proportions
            )));
        }
        Ok(())
    }

    /// Proportions `c_k / N` of each class among `labels`.
    pub fn proportions_from_labels(labels: &[usize], classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            counts[l] += 1;
        }
        counts.iter().map(|&c| c as f64 / labels.len() as f64).collect()
    }

    pub fn class_weights(&self) -> Vec<f64> {
        self.class_proportions
            .iter()
            .map(|&p| match self.weight_mode {
                WeightMode::Literal => p,
                WeightMode::Inverse => 1.0 - p,
                WeightMode::Uniform => 1.0,
            })
            .collect()
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        t.set(&[b, l], 1.0);
    }
    t
}

fn check_one_hot(targets: &Tensor, norms_shape: &[usize]) -> Result<()> {
    if targets.shape() != norms_shape || norms_shape.len() != 2 {
        return Err(Error::dim("margin_loss", norms_shape, targets.shape()));
    }
    let c = norms_shape[1];
    for (b, row) in targets.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        let zeros = row.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::contract(format!("target row {b} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Per-sample, per-class margin terms `[B, C]`:
/// `T_k·max(0, m⁺ − ‖v_k‖)² + λ·(1 − T_k)·max(0, ‖v_k‖ − m⁻)²`.
pub fn margin_terms(tape: &mut Tape, norms: Var, targets: &Tensor, p: &MarginLossParams) -> Result<Var> {
    p.validate()?;
    check_one_hot(targets, tape.shape(norms))?;
    let t = tape.constant(targets.clone());
    let not_t = tape.constant(targets.map(|x| p.lambda_neg * (1.0 - x)));

    let neg_n = tape.scale(norms, -1.0);
    let below = tape.add_scalar(neg_n, p.m_plus);
    let below = tape.relu(below);
    let below = tape.square(below);
    let pos = tape.mul(t, below)?;

    let above = tape.add_scalar(norms, -p.m_minus);
    let above = tape.relu(above);
    let above = tape.square(above);
    let neg = tape.mul(not_t, above)?;
    tape.add(pos, neg)
}

/// Mean over the batch of the per-sample margin loss summed over classes.
pub fn margin_loss(tape: &mut Tape, norms: Var, targets: &Tensor, p: &MarginLossParams) -> Result<Var> {
    let terms = margin_terms(tape, norms, targets, p)?;
    let b = tape.shape(terms)[0] as f64;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / b))
}

/// Loss components on the tape. `regression` and `reconstruction` are the
/// unscaled mean squared errors; `total` applies the λ coefficients.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    pub regression: Option<Var>,
    pub reconstruction: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub reconstruction: f64,
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossValues {
            total: tape.value(self.total).item(),
            classification: tape.value(self.classification).item(),
            regression: get(self.regression),
            reconstruction: get(self.reconstruction),
        }
    }
}

fn mse(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim("mse", tape.shape(pred), target.shape()));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// Inputs to [`cardiocaps_loss`] beyond the capsule norms.
pub struct Auxiliary<'a> {
    /// Predicted regression target `[B]` and its label.
    pub regression: Option<(Var, &'a Tensor)>,
    /// Decoder output `[B, C·H·W]` and the flattened images.
    pub reconstruction: Option<(Var, &'a Tensor)>,
}

/// `Σ_k w_k · mean_b L_{b,k} + λ_reg · MSE(ŷ_reg, y_reg) + λ_recon · MSE(recon, image)`.
pub fn cardiocaps_loss(
    tape: &mut Tape,
    norms: Var,
    targets: &Tensor,
    aux: Auxiliary<'_>,
    margin: &MarginLossParams,
    weights: &WeightedLossParams,
) -> Result<LossParts> {
    weights.validate()?;
    let classes = tape.shape(norms).get(1).copied().unwrap_or(0);
    if weights.class_proportions.len() != classes {
        return Err(Error::config(format!(
            "{} class proportions for {classes} classes",
            weights.class_proportions.len()
        )));
    }
    let terms = margin_terms(tape, norms, targets, margin)?;
    let b = tape.shape(terms)[0] as f64;
    let per_class = tape.sum_axis(terms, 0)?;
    let w = tape.constant(Tensor::vector(weights.class_weights()));
    let weighted = tape.mul(per_class, w)?;
    let cls = tape.sum(weighted);
    let classification = tape.scale(cls, 1.0 / b);

    let mut total = classification;
    let regression = match aux.regression {
        Some((pred, target)) => {
            let r = mse(tape, pred, target)?;
            let scaled = tape.scale(r, weights.lambda_reg);
            total = tape.add(total, scaled)?;
            Some(r)
        }
        None => None,
    };
    let reconstruction = match aux.reconstruction {
        Some((pred, target)) => {
            let r = mse(tape, pred, target)?;
            let scaled = tape.scale(r, weights.lambda_recon);
            total = tape.add(total, scaled)?;
            Some(r)
        }
        None => None,
    };
    Ok(LossParts {
        total,
        classification,
        regression,
        reconstruction,
    })
}

/// Mean over the batch of `−w_y · log softmax(logits)_y`.
pub fn weighted_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[1] != class_weights.len() {
        return Err(Error::dim("weighted_cross_entropy", &s, &[labels.len(), class_weights.len()]));
    }
    if labels.iter().any(|&l| l >= s[1]) {
        return Err(Error::contract("label out of range for cross-entropy"));
    }
    let mut picks = Tensor::zeros([s[0], s[1]]);
    for (b, &l) in labels.iter().enumerate() {
        picks.set(&[b, l], class_weights[l]);
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picks = tape.constant(picks);
    let picked = tape.mul(logp, picks)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}
