//! Numerical laboratory for partially hyperbolic skew products
//! `f(x, θ) = (Ax, g_x(θ))` over hyperbolic automorphisms of the two-torus.
//!
//! The crate is organised bottom-up:
//!
//! * [`torus`]: points of `T²`, the base automorphism and its eigenstructure;
//! * [`partition`]: Markov partitions, plaques and symbolic cylinders;
//! * [`skew`]: the skew product, strong-unstable leaves and holonomies;
//! * [`reference`]: reference measures on unstable plaques;
//! * [`gibbs`]: empirical Gibbs u-states and Hölder density tracking;
//! * [`hitting`]: hitting averages on cross-sections and transverse measures;
//! * [`coupling`]: the coupling construction and its stopping-time tail;
//! * [`stats`]: large deviations, cumulant bounds and correlation decay;
//! * [`runner`]: experiment configs and the subcommand drivers used by the CLI.

pub mod coupling;
pub mod gibbs;
pub mod hitting;
pub mod numerics;
pub mod partition;
pub mod reference;
pub mod runner;
pub mod skew;
pub mod stats;
pub mod torus;

pub use partition::{MarkovPartition, Plaque, Rectangle, SymbolicCylinder};

pub use torus::{wrap, EigenCoords, ToralAutomorphism, TorusPoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for work item `stream` of a run seeded with `seed`.
///
/// Work is split into fixed chunks, each with its own stream, so results do
/// not depend on how many threads execute them.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
