//! Affine vote transforms `û_{j|i} = u_i · W_ij` and their ablation variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CapsuleBank, GridLayout};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffineKind {
    /// One learnable `D_in × (N_out·D_out)` matrix per input capsule.
    Shared,
    /// A 3×3 convolution (padding 1) across the capsule grid, shared by all capsule types.
    Conv,
    /// All-ones fixed weights.
    Constant,
}

impl std::str::FromStr for AffineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "original" => Ok(AffineKind::Shared),
            "conv" => Ok(AffineKind::Conv),
            "constant" => Ok(AffineKind::Constant),
            other => Err(Error::config(format!("unknown affine kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AffineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AffineKind::Shared => "shared",
            AffineKind::Conv => "conv",
            AffineKind::Constant => "constant",
        })
    }
}

pub const CONV_AFFINE_KERNEL: usize = 3;

/// Votes `[batch, N_in, N_out, D_out]`.
#[derive(Clone, Copy, Debug)]
pub struct VoteArray {
    pub votes: Var,
}

impl VoteArray {
    pub fn dims(&self, tape: &Tape) -> (usize, usize, usize, usize) {
        let s = tape.shape(self.votes);
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineTransform {
    pub kind: AffineKind,
    pub n_in: usize,
    pub d_in: usize,
    pub n_out: usize,
    pub d_out: usize,
    pub weight: Option<ParamId>,
    pub grid: Option<GridLayout>,
}

impl AffineTransform {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: AffineKind,
        n_in: usize,
        d_in: usize,
        n_out: usize,
        d_out: usize,
        grid: Option<GridLayout>,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = match kind {
            AffineKind::Shared => {
                let std = 0.5 / (n_in as f64).sqrt();
                Some(store.add("affine.weight", Tensor::randn([n_in, d_in, n_out * d_out], std, rng)))
            }
            AffineKind::Conv => {
                let g = grid.ok_or_else(|| Error::config("conv affine needs a capsule grid"))?;
                if g.n_caps() != n_in {
                    return Err(Error::config(format!(
                        "conv affine grid holds {} capsules, expected {n_in}",
                        g.n_caps()
                    )));
                }
                let fan_in = (d_in * CONV_AFFINE_KERNEL * CONV_AFFINE_KERNEL) as f64;
                let shape = [n_out * d_out, d_in, CONV_AFFINE_KERNEL, CONV_AFFINE_KERNEL];
                Some(store.add("affine.conv", Tensor::uniform(shape, 1.0 / fan_in.sqrt(), rng)))
            }
            AffineKind::Constant => None,
        };
        Ok(AffineTransform {
            kind,
            n_in,
            d_in,
            n_out,
            d_out,
            weight,
            grid,
        })
    }

    /// Learnable scalars owned by this transform.
    pub fn learnable_params(&self, store: &ParamStore) -> usize {
        self.weight.map_or(0, |w| store.get(w).len())
    }

    pub fn compute_votes(&self, tape: &mut Tape, p: &Bound, u: &CapsuleBank) -> Result<VoteArray> {
        let (b, n_in, d_in) = u.dims(tape);
        if n_in != self.n_in || d_in != self.d_in {
            return Err(Error::dim("compute_votes", &[n_in, d_in], &[self.n_in, self.d_in]));
        }
        let (n_out, d_out) = (self.n_out, self.d_out);
        let votes = match self.kind {
            AffineKind::Shared | AffineKind::Constant => {
                let w = match self.weight {
                    Some(id) => p.var(id),
                    None => tape.constant(Tensor::ones([d_in, n_out * d_out])),
                };
                let rows = tape.reshape(u.activations, &[b, n_in, 1, d_in])?;
                let out = tape.matmul(rows, w)?;
                tape.reshape(out, &[b, n_in, n_out, d_out])?
            }
            AffineKind::Conv => {
                let g = self.grid.expect("checked at construction");
                let w = p.var(self.weight.expect("conv weight"));
                let x = tape.reshape(u.activations, &[b * g.types, g.rows, g.cols, d_in])?;
                let x = tape.permute(x, &[0, 3, 1, 2])?;
                let y = tape.conv2d(x, w, 1, CONV_AFFINE_KERNEL / 2)?;
                let y = tape.permute(y, &[0, 2, 3, 1])?;
                tape.reshape(y, &[b, n_in, n_out, d_out])?
            }
        };
        Ok(VoteArray { votes })
    }
}
