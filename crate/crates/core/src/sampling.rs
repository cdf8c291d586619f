//! Seeded random streams and low-discrepancy points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::Vec3;

/// Independent generator for `stream` under `seed`; used to split sampling
/// into chunks whose results do not depend on the worker count.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n2 = v.norm_squared();
        if n2 > 1e-6 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Uniform point in the ball of radius `radius` around the origin.
pub fn in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

pub const CHUNK: usize = 1024;

/// Runs `f(rng, count)` over `n` samples split into fixed chunks, each
/// with its own stream, in parallel; results come back in chunk order.
pub fn chunked<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(n - c * CHUNK);
            let mut rng = stream_rng(seed, c as u64);
            f(&mut rng, count)
        })
        .collect()
}

/// Van der Corput radical inverse of `i` in `base`.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Halton point in the unit cube (bases 2, 3, 5) with a Cranley-Patterson
/// shift.
pub fn halton3(i: u64, shift: [f64; 3]) -> [f64; 3] {
    let mut p = [
        radical_inverse(i, 2),
        radical_inverse(i, 3),
        radical_inverse(i, 5),
    ];
    for k in 0..3 {
        p[k] = (p[k] + shift[k]).fract();
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a: f64 = stream_rng(7, 0).random();
        let b: f64 = stream_rng(7, 1).random();
        let c: f64 = stream_rng(7, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
