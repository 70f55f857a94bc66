//! Capsule layers: primary capsules, affine votes, routing, and output heads.
//!
//! A capsule is a vector whose length encodes presence probability and whose
//! direction encodes pose. Every capsule bank is laid out `[batch, n_caps, d_caps]`.

mod heads;
mod primary;
mod routing;
mod votes;

pub use heads::{classify, FcDecoder, Linear, Prediction, RegressionHead};
pub use primary::PrimaryCapsules;
pub use routing::{
    attention_routing, dynamic_routing, AttentionProjection, RoutingMethod, RoutingSpec, RoutingState,
    SoftmaxAxis,
};
pub use votes::{AffineKind, AffineTransform, VoteArray};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapsuleRole {
    Primary,
    Digit,
}

/// Spatial arrangement of primary capsules: `types` capsules per grid cell.
/// Capsule `i` sits at `type = i / (rows·cols)`, `row = (i / cols) % rows`,
/// `col = i % cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub types: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    pub fn n_caps(&self) -> usize {
        self.types * self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CapsuleBank {
    /// `[batch, n_caps, d_caps]`
    pub activations: Var,
    pub role: CapsuleRole,
    pub grid: Option<GridLayout>,
}

impl CapsuleBank {
    pub fn dims(&self, tape: &Tape) -> (usize, usize, usize) {
        let s = tape.shape(self.activations);
        (s[0], s[1], s[2])
    }
}

/// `squash(s) = ‖s‖²/(1+‖s‖²) · s/‖s‖` over the last axis.
///
/// Uses the eps-guarded norm, so the zero vector maps to zero with a finite
/// gradient.
pub fn squash(tape: &mut Tape, s: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.is_empty() {
        return Err(Error::dim("squash", &shape, &[]));
    }
    let n = tape.vector_norm(s, NORM_EPS)?;
    let n2 = tape.square(n);
    let denom = tape.add_scalar(n2, 1.0);
    let factor = tape.div(n, denom)?;
    let mut fshape = shape[..shape.len() - 1].to_vec();
    fshape.push(1);
    let factor = tape.reshape(factor, &fshape)?;
    tape.mul(s, factor)
}
