//! Synthetic class-conditional images written in the CIFAR binary layout.
//!
//! Used for desk-scale runs and tests where the real CIFAR files are not
//! available. Every label owns a prototype (oriented colour grating plus a
//! bright blob); samples jitter phase, position and contrast and add pixel
//! noise, so labels are learnable but not trivially separable.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{CifarVariant, CIFAR_CHANNELS, CIFAR_SIDE};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub variant: CifarVariant,
    pub train_per_label: usize,
    pub val_per_label: usize,
    /// Standard deviation of the additive pixel noise, in 0..255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            variant: CifarVariant::Cifar100,
            train_per_label: 20,
            val_per_label: 10,
            noise: 30.0,
            seed: 0,
        }
    }
}

struct Prototype {
    color: [f64; 3],
    freq: (f64, f64),
    blob: (f64, f64),
    blob_color: [f64; 3],
}

fn prototypes(n: usize, seed: u64) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    (0..n)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(1.0..4.0);
            Prototype {
                color: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                freq: (freq * angle.cos(), freq * angle.sin()),
                blob: (rng.random_range(6.0..26.0), rng.random_range(6.0..26.0)),
                blob_color: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            }
        })
        .collect()
}

fn render(p: &Prototype, rng: &mut ChaCha8Rng, noise: f64, out: &mut Vec<u8>) {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast: f64 = rng.random_range(0.6..1.0);
    let (dy, dx): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let s = CIFAR_SIDE as f64;
    for c in 0..CIFAR_CHANNELS {
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let (yf, xf) = (y as f64, x as f64);
                let wave = (std::f64::consts::TAU * (p.freq.0 * xf + p.freq.1 * yf) / s + phase).sin();
                let d2 = (yf - p.blob.0 - dy).powi(2) + (xf - p.blob.1 - dx).powi(2);
                let blob = (-d2 / 18.0).exp();
                let n: f64 = rng.sample(StandardNormal);
                let v = 128.0 + contrast * (45.0 * wave * p.color[c] + 70.0 * blob * p.blob_color[c]) + noise * n;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

fn records(cfg: &SyntheticConfig, per_label: usize, stream: u64) -> Vec<u8> {
    let labels = cfg.variant.num_labels();
    let protos = prototypes(labels, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(stream));
    let mut out = Vec::with_capacity(labels * per_label * cfg.variant.record_len());
    // interleave labels so prefixes of the file stay balanced
    for _ in 0..per_label {
        for (label, p) in protos.iter().enumerate() {
            if cfg.variant == CifarVariant::Cifar100 {
                out.push((label / 5) as u8);
            }
            out.push(label as u8);
            render(p, &mut rng, cfg.noise, &mut out);
        }
    }
    out
}

/// Writes train and validation files under `dir` using the standard file
/// names of the variant. Returns the paths written.
pub fn write_synthetic_cifar(dir: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match cfg.variant {
        CifarVariant::Cifar100 => {
            for (name, n, stream) in [
                ("train.bin", cfg.train_per_label, 1),
                ("test.bin", cfg.val_per_label, 2),
            ] {
                let p = dir.join(name);
                fs::write(&p, records(cfg, n, stream))?;
                written.push(p);
            }
        }
        CifarVariant::Cifar10 => {
            let all = records(cfg, cfg.train_per_label, 1);
            let rec = cfg.variant.record_len();
            let n = all.len() / rec;
            for b in 0..5 {
                let (lo, hi) = (n * b / 5, n * (b + 1) / 5);
                let p = dir.join(format!("data_batch_{}.bin", b + 1));
                fs::write(&p, &all[lo * rec..hi * rec])?;
                written.push(p);
            }
            let p = dir.join("test_batch.bin");
            fs::write(&p, records(cfg, cfg.val_per_label, 2))?;
            written.push(p);
        }
    }
    Ok(written)
}
