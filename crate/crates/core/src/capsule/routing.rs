//! Routing from votes to digit capsules.
//!
//! Dynamic routing iterates agreement updates of the coupling logits; attention
//! routing replaces the iteration with a single softmax over logits produced by
//! a shared projection of each vote.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{squash, CapsuleBank, CapsuleRole, VoteArray};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMethod {
    Dynamic,
    Attention,
}

impl std::str::FromStr for RoutingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(RoutingMethod::Dynamic),
            "attention" => Ok(RoutingMethod::Attention),
            other => Err(Error::config(format!("unknown routing method `{other}`"))),
        }
    }
}

impl std::fmt::Display for RoutingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoutingMethod::Dynamic => "dynamic",
            RoutingMethod::Attention => "attention",
        })
    }
}

/// Axis along which attention weights are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Weights over contributing input capsules sum to one for each digit capsule.
    InputCaps,
    /// Weights over digit capsules sum to one for each input capsule.
    OutputCaps,
}

impl std::str::FromStr for SoftmaxAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_caps" | "input" => Ok(SoftmaxAxis::InputCaps),
            "output_caps" | "output" => Ok(SoftmaxAxis::OutputCaps),
            other => Err(Error::config(format!("unknown softmax axis `{other}`"))),
        }
    }
}

impl std::fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SoftmaxAxis::InputCaps => "input_caps",
            SoftmaxAxis::OutputCaps => "output_caps",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSpec {
    pub method: RoutingMethod,
    /// Dynamic routing iterations; ignored by attention.
    pub iterations: usize,
    /// Attention normalization axis; ignored by dynamic routing.
    pub softmax_axis: SoftmaxAxis,
    /// Divide attention logits by `√D_out`; ignored by dynamic routing.
    pub scale_by_sqrt_d: bool,
}

impl Default for RoutingSpec {
    fn default() -> Self {
        RoutingSpec {
            method: RoutingMethod::Attention,
            iterations: 3,
            softmax_axis: SoftmaxAxis::InputCaps,
            scale_by_sqrt_d: false,
        }
    }
}

impl RoutingSpec {
    pub fn dynamic(iterations: usize) -> Self {
        RoutingSpec {
            method: RoutingMethod::Dynamic,
            iterations,
            ..Self::default()
        }
    }

    pub fn attention() -> Self {
        Self::default()
    }
}

/// Intermediate routing quantities, one entry per iteration (attention has one).
#[derive(Clone, Debug)]
pub struct RoutingState {
    /// Final logits `[batch, N_in, N_out]`.
    pub logits: Var,
    /// Coupling coefficients (dynamic) or attention weights, `[batch, N_in, N_out]`.
    pub coefficients: Vec<Var>,
    /// Digit capsules `[batch, N_out, D_out]` produced at each iteration.
    pub outputs: Vec<Var>,
}

/// Shared 1×1 projection of a `D_out` vote to a scalar attention logit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_out: usize,
}

impl AttentionProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_out as f64).sqrt();
        AttentionProjection {
            weight: store.add("attention.weight", Tensor::uniform([d_out], bound, rng)),
            bias: store.add("attention.bias", Tensor::uniform([1], bound, rng)),
            d_out,
        }
    }

    pub fn route(&self, tape: &mut Tape, p: &Bound, votes: &VoteArray, spec: &RoutingSpec) -> Result<(CapsuleBank, RoutingState)> {
        attention_routing(tape, votes, spec, p.var(self.weight), p.var(self.bias))
    }
}

/// Routing-by-agreement.
///
/// ```text
/// b ← 0
/// repeat r times:
///     c_i ← softmax_j(b_i)
///     s_j ← Σ_i c_ij û_{j|i}
///     v_j ← squash(s_j)
///     b_ij ← b_ij + û_{j|i} · v_j
/// ```
///
/// Gradients flow through every iteration.
pub fn dynamic_routing(tape: &mut Tape, votes: &VoteArray, r: usize) -> Result<(CapsuleBank, RoutingState)> {
    if r < 1 {
        return Err(Error::config("dynamic routing needs at least one iteration"));
    }
    let (b, n_in, n_out, d_out) = votes.dims(tape);
    let u = votes.votes;
    let mut logits = tape.constant(Tensor::zeros([b, n_in, n_out]));
    let mut coefficients = Vec::with_capacity(r);
    let mut outputs = Vec::with_capacity(r);
    for _ in 0..r {
        let c = tape.softmax(logits, 2)?;
        coefficients.push(c);
        let cw = tape.reshape(c, &[b, n_in, n_out, 1])?;
        let weighted = tape.mul(u, cw)?;
        let s = tape.sum_axis(weighted, 1)?;
        let v = squash(tape, s)?;
        outputs.push(v);
        let vb = tape.reshape(v, &[b, 1, n_out, d_out])?;
        let prod = tape.mul(u, vb)?;
        let agreement = tape.sum_axis(prod, 3)?;
        logits = tape.add(logits, agreement)?;
    }
    let activations = *outputs.last().expect("r >= 1");
    Ok((
        CapsuleBank {
            activations,
            role: CapsuleRole::Digit,
            grid: None,
        },
        RoutingState {
            logits,
            coefficients,
            outputs,
        },
    ))
}

/// Single-pass attention routing:
/// `v_j = squash(Σ_i a_ij û_{j|i})` with `a = softmax(w·û_{j|i} + β)`.
///
/// `weight` is `[D_out]` and `bias` is `[1]`; both are shared by every
/// `(i, j)` pair.
pub fn attention_routing(
    tape: &mut Tape,
    votes: &VoteArray,
    spec: &RoutingSpec,
    weight: Var,
    bias: Var,
) -> Result<(CapsuleBank, RoutingState)> {
    if spec.method != RoutingMethod::Attention {
        return Err(Error::contract("attention_routing called with a non-attention spec"));
    }
    let (b, n_in, n_out, d_out) = votes.dims(tape);
    let u = votes.votes;
    let w = tape.reshape(weight, &[1, 1, 1, d_out])?;
    let proj = tape.mul(u, w)?;
    let logits = tape.sum_axis(proj, 3)?;
    let mut logits = tape.add(logits, bias)?;
    if spec.scale_by_sqrt_d {
        logits = tape.scale(logits, 1.0 / (d_out as f64).sqrt());
    }
    let axis = match spec.softmax_axis {
        SoftmaxAxis::InputCaps => 1,
        SoftmaxAxis::OutputCaps => 2,
    };
    let a = tape.softmax(logits, axis)?;
    let aw = tape.reshape(a, &[b, n_in, n_out, 1])?;
    let weighted = tape.mul(u, aw)?;
    let s = tape.sum_axis(weighted, 1)?;
    let v = squash(tape, s)?;
    Ok((
        CapsuleBank {
            activations: v,
            role: CapsuleRole::Digit,
            grid: None,
        },
        RoutingState {
            logits,
            coefficients: vec![a],
            outputs: vec![v],
        },
    ))
}
