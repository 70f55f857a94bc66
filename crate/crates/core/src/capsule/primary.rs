use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{squash, CapsuleBank, CapsuleRole, GridLayout};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Convolution whose output channels are regrouped into `d_primary`-vectors
/// and squashed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrimaryCapsules {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub d_primary: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PrimaryCapsules {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        out_channels: usize,
        d_primary: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_primary == 0 || !out_channels.is_multiple_of(d_primary) {
            return Err(Error::config(format!(
                "primary capsule channels {out_channels} not divisible by capsule dimension {d_primary}"
            )));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.add(
            "primary.weight",
            Tensor::uniform([out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add("primary.bias", Tensor::uniform([1, out_channels, 1, 1], bound, rng));
        Ok(PrimaryCapsules {
            weight,
            bias,
            in_channels,
            out_channels,
            d_primary,
            kernel,
            stride,
        })
    }

    pub fn types(&self) -> usize {
        self.out_channels / self.d_primary
    }

    /// Grid produced for a `height × width` feature map, if the kernel fits.
    pub fn grid_for(&self, height: usize, width: usize) -> Option<GridLayout> {
        if height < self.kernel || width < self.kernel {
            return None;
        }
        Some(GridLayout {
            types: self.types(),
            rows: (height - self.kernel) / self.stride + 1,
            cols: (width - self.kernel) / self.stride + 1,
        })
    }

    /// `[B, C, H, W]` features to a primary bank `[B, types·rows·cols, d_primary]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<CapsuleBank> {
        let conv = tape.conv2d(features, p.var(self.weight), self.stride, 0)?;
        let conv = tape.add(conv, p.var(self.bias))?;
        let s = tape.shape(conv).to_vec();
        let (b, rows, cols) = (s[0], s[2], s[3]);
        let types = self.types();
        let x = tape.reshape(conv, &[b, types, self.d_primary, rows, cols])?;
        let x = tape.permute(x, &[0, 1, 3, 4, 2])?;
        let x = tape.reshape(x, &[b, types * rows * cols, self.d_primary])?;
        let activations = squash(tape, x)?;
        Ok(CapsuleBank {
            activations,
            role: CapsuleRole::Primary,
            grid: Some(GridLayout { types, rows, cols }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indivisible_channels_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = PrimaryCapsules::new(&mut store, 4, 12, 8, 3, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reshape_arithmetic_and_norm_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 16 channels of 8-dim capsules on a 4×4 grid: 2 types × 16 cells
        let layer = PrimaryCapsules::new(&mut store, 3, 16, 8, 3, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn([1, 3, 6, 6], 2.0, &mut rng));
        let bank = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(bank.dims(&tape), (1, 32, 8));
        assert_eq!(bank.grid, Some(GridLayout { types: 2, rows: 4, cols: 4 }));
        for cap in tape.value(bank.activations).data().chunks(8) {
            assert!(cap.iter().map(|v| v * v).sum::<f64>().sqrt() < 1.0);
        }
    }
}
