use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CapsuleBank, CapsuleRole};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Fully connected layer `x·W + b` over `[B, in]` inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::uniform([fan_in, fan_out], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::uniform([fan_out], bound, rng)),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add(y, p.var(self.bias))
    }
}

fn flatten_digits(tape: &mut Tape, v: &CapsuleBank) -> Result<Var> {
    if v.role != CapsuleRole::Digit {
        return Err(Error::contract("head expects a digit capsule bank"));
    }
    let (b, n, d) = v.dims(tape);
    tape.reshape(v.activations, &[b, n * d])
}

/// Reconstruction decoder over all digit capsules concatenated (no class
/// masking): two ReLU layers then a sigmoid layer sized to the image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FcDecoder {
    pub layers: [Linear; 3],
    pub out_len: usize,
}

pub const DECODER_WIDTHS: [usize; 2] = [128, 256];

impl FcDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_digit: usize, d_digit: usize, out_len: usize, rng: &mut R) -> Self {
        let [h1, h2] = DECODER_WIDTHS;
        FcDecoder {
            layers: [
                Linear::new(store, "decoder.fc1", n_digit * d_digit, h1, rng),
                Linear::new(store, "decoder.fc2", h1, h2, rng),
                Linear::new(store, "decoder.fc3", h2, out_len, rng),
            ],
            out_len,
        }
    }

    /// `[B, C, D]` digit bank to `[B, out_len]` values in (0, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, v: &CapsuleBank) -> Result<Var> {
        let x = flatten_digits(tape, v)?;
        let h = self.layers[0].forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, p, h)?;
        let h = tape.relu(h);
        let y = self.layers[2].forward(tape, p, h)?;
        Ok(tape.sigmoid(y))
    }
}

/// Linear map from the concatenated digit capsules to one scalar per sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressionHead {
    pub linear: Linear,
}

impl RegressionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_digit: usize, d_digit: usize, rng: &mut R) -> Self {
        RegressionHead {
            linear: Linear::new(store, "regression", n_digit * d_digit, 1, rng),
        }
    }

    /// `[B, C, D]` digit bank to `[B]` predictions.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, v: &CapsuleBank) -> Result<Var> {
        let x = flatten_digits(tape, v)?;
        let y = self.linear.forward(tape, p, x)?;
        let b = tape.shape(y)[0];
        tape.reshape(y, &[b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Length of the positive-class capsule.
    pub score: f64,
}

/// Predicts the class whose digit capsule is longest, ties going to the lower
/// index. `digits` is `[B, C, D]`.
pub fn classify(digits: &Tensor, positive_class: usize) -> Result<Vec<Prediction>> {
    let s = digits.shape();
    if s.len() != 3 || s[1] < 2 || positive_class >= s[1] {
        return Err(Error::dim("classify", s, &[positive_class]));
    }
    let (c, d) = (s[1], s[2]);
    Ok(digits
        .data()
        .chunks(c * d)
        .map(|sample| {
            let norms: Vec<f64> = sample
                .chunks(d)
                .map(|cap| cap.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let mut class = 0;
            for k in 1..c {
                if norms[k] > norms[class] {
                    class = k;
                }
            }
            Prediction {
                class,
                score: norms[positive_class],
            }
        })
        .collect())
}
