//! Seeded randomness helpers shared by the generators and the simulator.
//!
//! Everything that draws random numbers in this crate goes through a
//! [`ChaCha12Rng`] seeded from a user-supplied 64-bit seed. Per-utterance
//! work uses [`split_seed`] so that utterance `k` sees the same stream no
//! matter how many worker threads process the batch or in what order.

use rand::Rng;
use rand::SeedableRng;
pub use rand_chacha::ChaCha12Rng;

/// Derives an independent stream seed from a master seed.
///
/// SplitMix64 finalizer over `master + (stream + 1) * golden`. The `+ 1`
/// keeps stream 0 from echoing the master seed.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one utterance (or other numbered unit) of a seeded run.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(split_seed(master, stream))
}

/// Poisson sample by inverse-CDF walk, so results depend only on a single
/// uniform draw and are reproducible across platforms.
///
/// Walks `p_k = e^-lambda * lambda^k / k!` cumulatively until the CDF
/// passes `u`. For the small rates used here (lambda well under 1) the walk
/// terminates after a couple of steps; the hard cap guards against a
/// pathological `u` close to 1 with large lambda.
pub fn poisson(lambda: f64, rng: &mut ChaCha12Rng) -> u32 {
    assert!(lambda >= 0.0, "poisson rate must be non-negative");
    if lambda == 0.0 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u >= cdf && k < 1000 {
        k += 1;
        p *= lambda / f64::from(k);
        cdf += p;
    }
    k
}
