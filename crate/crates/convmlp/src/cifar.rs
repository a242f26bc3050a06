//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! channel-planar RGB pixel bytes (32×32).

use std::path::Path;

use convmlp_core::train::Dataset;
use convmlp_core::Tensor;

use crate::error::{FormatError, Result};

pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const PIXELS: usize = 3 * 32 * 32;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => std::slice::from_ref(&TEST_FILE),
        }
    }
}

/// Splits a batch file into `(pixels, labels)`, keeping at most `limit`
/// records.
pub fn parse_batch(bytes: &[u8], limit: Option<usize>) -> Result<(&[u8], Vec<usize>)> {
    let rem = bytes.len() % RECORD_BYTES;
    if rem != 0 {
        return Err(FormatError::Truncated {
            offset: bytes.len() - rem,
            needed: RECORD_BYTES - rem,
            what: "CIFAR-10 record".into(),
        });
    }
    let n = (bytes.len() / RECORD_BYTES).min(limit.unwrap_or(usize::MAX));
    let bytes = &bytes[..n * RECORD_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let l = rec[0] as usize;
        if l >= NUM_CLASSES {
            return Err(FormatError::malformed(i * RECORD_BYTES, format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        labels.push(l);
    }
    Ok((bytes, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| FormatError::io(path, e))
}

/// Per-channel mean and std of the `[0, 1]`-scaled training split.
pub fn train_stats(dir: &Path) -> Result<([f64; 3], [f64; 3])> {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for name in TRAIN_FILES {
        let bytes = read(&dir.join(name))?;
        let (records, labels) = parse_batch(&bytes, None)?;
        for rec in records.chunks_exact(RECORD_BYTES) {
            for (ch, plane) in rec[1..].chunks_exact(1024).enumerate() {
                for &b in plane {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        count += labels.len() * 1024;
    }
    if count == 0 {
        return Err(FormatError::malformed(0, "training split has no records"));
    }
    let mean = sum.map(|s| s / count as f64);
    let std = [0, 1, 2].map(|c| (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0).sqrt());
    Ok((mean, std))
}

/// Loads one split from a directory of the standard binary batches,
/// normalized by training-split statistics.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let stats = train_stats(dir)?;
    let cap = limit.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        if labels.len() >= cap {
            break;
        }
        let bytes = read(&dir.join(name))?;
        let (records, l) = parse_batch(&bytes, Some(cap - labels.len()))?;
        for rec in records.chunks_exact(RECORD_BYTES) {
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        labels.extend(l);
    }
    let images = Tensor::from_vec(&[labels.len(), 3, 32, 32], pixels)?;
    let name = match split {
        Split::Train => "cifar10-train",
        Split::Test => "cifar10-test",
    };
    Ok(Dataset::from_raw(images, labels, NUM_CLASSES, Some(stats), name)?)
}
