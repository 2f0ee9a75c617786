//! Proof-of-work benchmark over random targets and payloads.

use std::time::Instant;

use dpush_core::block::{mine, BlockError, Difficulty};
use dpush_core::ident::KeyId;
use rand::{Rng, RngCore};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub difficulty: u32,
    pub trials: usize,
    pub min_attempts: u64,
    pub median_attempts: f64,
    pub geomean_attempts: f64,
    pub hashes_per_second: f64,
    /// Geometric-mean attempts divided by the measured hash rate.
    pub implied_seconds_per_message: f64,
    /// Bytes hashed per attempt; always the header length.
    pub bytes_per_attempt: u64,
}

pub fn geometric_mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|&v| (v as f64).ln()).sum::<f64>() / values.len() as f64).exp()
}

pub fn median(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2] as f64,
        n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
    }
}

pub fn bench_pow<R: RngCore>(difficulty: Difficulty, trials: usize, rng: &mut R) -> Result<BenchReport, BlockError> {
    let trials = trials.max(1);
    let mut attempts = Vec::with_capacity(trials);
    let mut bytes = 0u64;
    let started = Instant::now();
    for _ in 0..trials {
        let target = KeyId::random(rng);
        let len = rng.gen_range(1..=256);
        let mut payload = vec![0u8; len];
        rng.fill_bytes(&mut payload);
        let m = mine(target, difficulty, &payload, rng.gen(), None)?;
        attempts.push(m.attempts);
        bytes += m.bytes_hashed;
    }
    let secs = started.elapsed().as_secs_f64().max(1e-9);
    let total: u64 = attempts.iter().sum();
    let hashes_per_second = total as f64 / secs;
    let geomean = geometric_mean(&attempts);
    Ok(BenchReport {
        difficulty: difficulty.bits(),
        trials,
        min_attempts: *attempts.iter().min().expect("trials >= 1"),
        median_attempts: median(&attempts),
        geomean_attempts: geomean,
        hashes_per_second,
        implied_seconds_per_message: geomean / hashes_per_second,
        bytes_per_attempt: bytes / total,
    })
}
