//! Wall-clock comparison of dynamic and attention routing on shared votes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::capsule::{attention_routing, dynamic_routing, RoutingMethod, RoutingSpec, VoteArray};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteShape {
    pub batch: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: VoteShape,
    pub method: RoutingMethod,
    /// Iterations requested; attention ignores it.
    pub r: usize,
    pub median_secs: f64,
}

pub const BENCH_HEADER: &str = "batch,n_in,n_out,d_out,method,r,median_secs";

/// Random votes and attention parameters for one shape.
pub struct RoutingInputs {
    pub votes: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl RoutingInputs {
    pub fn new(shape: VoteShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let VoteShape { batch, n_in, n_out, d_out } = shape;
        RoutingInputs {
            votes: Tensor::randn([batch, n_in, n_out, d_out], 0.1, &mut rng),
            weight: Tensor::randn([d_out], 1.0 / (d_out as f64).sqrt(), &mut rng),
            bias: Tensor::zeros([1]),
        }
    }

    /// One forward routing call on a fresh tape.
    pub fn route(&self, method: RoutingMethod, r: usize) -> Result<()> {
        let mut tape = Tape::new();
        let votes = VoteArray {
            votes: tape.constant(self.votes.clone()),
        };
        match method {
            RoutingMethod::Dynamic => {
                dynamic_routing(&mut tape, &votes, r)?;
            }
            RoutingMethod::Attention => {
                let w = tape.constant(self.weight.clone());
                let b = tape.constant(self.bias.clone());
                attention_routing(&mut tape, &votes, &RoutingSpec::attention(), w, b)?;
            }
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median per-call time of dynamic routing for each `r` and of attention
/// routing (one row per `r`, repeating the same measurement), on identical
/// votes per shape.
pub fn bench_routing(shapes: &[VoteShape], r_values: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 || r_values.is_empty() || r_values.contains(&0) {
        return Err(Error::config("bench needs repeats >= 1 and r values >= 1"));
    }
    let mut rows = Vec::new();
    for &shape in shapes {
        let inputs = RoutingInputs::new(shape, seed);
        let time = |method, r| -> Result<f64> {
            inputs.route(method, r)?; // warm-up
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                inputs.route(method, r)?;
                samples.push(t.elapsed().as_secs_f64());
            }
            Ok(median(samples))
        };
        let attention = time(RoutingMethod::Attention, 1)?;
        for &r in r_values {
            rows.push(BenchRow {
                shape,
                method: RoutingMethod::Dynamic,
                r,
                median_secs: time(RoutingMethod::Dynamic, r)?,
            });
        }
        for &r in r_values {
            rows.push(BenchRow {
                shape,
                method: RoutingMethod::Attention,
                r,
                median_secs: attention,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for row in rows {
        let s = row.shape;
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.9}\n",
            s.batch, s.n_in, s.n_out, s.d_out, row.method, row.r, row.median_secs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_repeat_across_r() {
        let shape = VoteShape {
            batch: 1,
            n_in: 8,
            n_out: 2,
            d_out: 4,
        };
        let rows = bench_routing(&[shape], &[1, 2, 3], 3, 0).unwrap();
        assert_eq!(rows.len(), 6);
        let att: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == RoutingMethod::Attention)
            .map(|r| r.median_secs)
            .collect();
        assert!(att.windows(2).all(|w| w[0] == w[1]));
        let table = bench_table(&rows);
        assert_eq!(table.lines().next(), Some(BENCH_HEADER));
        assert_eq!(table.lines().count(), 7);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
