//! Seeding and path-parallel evaluation.
//!
//! Path `i` of an experiment seeded with `seed` always draws from the ChaCha
//! stream `(seed, i)`, so results do not depend on how rayon schedules the
//! work. Per-path outputs are collected in index order and reduced
//! sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Grid and ensemble settings shared by the Monte Carlo estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimSettings {
    pub hurst: f64,
    pub grid_size: usize,
    pub substeps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

/// Independent random stream for path `index` of an experiment.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a seed for a named sub-experiment so that ensembles that must be
/// independent (e.g. two samples of a KS test) never share streams.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates `f(i)` for `i in 0..n` in parallel, returning results in index
/// order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Runs `f` on a dedicated pool with `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {threads}-thread pool ({e}); using the global pool");
            f()
        }
    }
}
