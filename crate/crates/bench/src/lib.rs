//! Shared fixtures for the routing benchmarks.

use capsroute::routing_bench::VoteShape;

/// Primary-capsule counts of the small preset, a mid-size grid and the
/// classic 6x6x32 layout.
pub const N_IN: [usize; 3] = [128, 512, 1152];

/// Single-sample vote shape with two 16-dimensional output capsules.
pub fn shape(n_in: usize) -> VoteShape {
    VoteShape {
        batch: 1,
        n_in,
        n_out: 2,
        d_out: 16,
    }
}
