//! Byte-level mutation of serialized banks and checkpoints.

use std::panic::{self, AssertUnwindSafe};

use crc::{Crc, CRC_64_XZ};
use finder_core::data::FeatureBank;
use finder_core::nn::{checkpoint, Model};
use finder_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tiny_finder_config;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Default)]
pub struct FuzzSummary {
    pub cases: usize,
    pub resealed: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub panics: Vec<String>,
}

pub fn sample_bank(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = rng.gen_range(1..6);
    let dim = rng.gen_range(1..5);
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..3u16)).collect();
    let data = (0..n * dim).map(|_| rng.gen::<f32>()).collect();
    FeatureBank::new("rep", ids, labels, Tensor::new(vec![n, dim], data).unwrap())
        .unwrap()
        .to_bytes()
}

pub fn sample_checkpoint(seed: u64) -> Vec<u8> {
    let model = Model::<f32>::build(&tiny_finder_config([6, 5], 3), seed).unwrap();
    checkpoint::to_bytes(&model)
}

/// Rewrites the trailing CRC so the mutation reaches the payload parser.
pub fn reseal(bytes: &mut [u8]) {
    if bytes.len() >= 16 {
        let cut = bytes.len() - 8;
        let sum = CRC64.checksum(&bytes[..cut]);
        bytes[cut..].copy_from_slice(&sum.to_le_bytes());
    }
}

pub fn mutate(rng: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match rng.gen_range(0..5) {
        0 => {
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(0..out.len());
                out[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        1 => out.truncate(rng.gen_range(0..out.len())),
        2 => {
            let i = rng.gen_range(0..out.len());
            out[i] = rng.gen();
        }
        3 => {
            // overwrite a 4- or 8-byte window, which hits length and count fields
            let w = if rng.gen() { 4 } else { 8 };
            if out.len() > w {
                let i = rng.gen_range(0..out.len() - w);
                let v: u64 = if rng.gen() { u64::MAX } else { rng.gen_range(0..1 << 20) };
                out[i..i + w].copy_from_slice(&v.to_le_bytes()[..w]);
            }
        }
        _ => {
            let extra = rng.gen_range(1..16);
            out.extend((0..extra).map(|_| rng.gen::<u8>()));
        }
    }
    out
}

fn classify(summary: &mut FuzzSummary, label: String, outcome: std::thread::Result<Result<(), Error>>) {
    match outcome {
        Ok(Ok(())) => summary.accepted += 1,
        Ok(Err(_)) => summary.rejected += 1,
        Err(_) => summary.panics.push(label),
    }
}

/// Half the cases target banks and half checkpoints; every other case has its
/// checksum recomputed after mutation.
pub fn fuzz_formats(seed: u64, cases: usize) -> FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ckpt = sample_checkpoint(seed);
    let mut summary = FuzzSummary::default();
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    for case in 0..cases {
        let bank_case = case % 2 == 0;
        let base = if bank_case { sample_bank(&mut rng) } else { ckpt.clone() };
        let mut bytes = mutate(&mut rng, &base);
        let resealed = case % 4 >= 2;
        if resealed {
            reseal(&mut bytes);
            summary.resealed += 1;
        }
        let label = format!("case {case} ({})", if bank_case { "bank" } else { "checkpoint" });
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
            if bank_case {
                FeatureBank::from_bytes(&bytes).map(|_| ())
            } else {
                checkpoint::from_bytes::<f32>(&bytes).map(|_| ())
            }
        }));
        classify(&mut summary, label, outcome);
        summary.cases += 1;
    }
    panic::set_hook(hook);
    summary
}
