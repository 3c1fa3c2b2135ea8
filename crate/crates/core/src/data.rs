//! CIFAR ingestion, per-image normalization and training augmentations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_labels(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes preceding the pixels of each record.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, Split::Validation) => vec!["test.bin"],
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Validation) => vec!["test_batch.bin"],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(CifarVariant::Cifar10),
            "cifar100" | "cifar-100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::config("variant", format!("unknown dataset variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
}

/// `N×C×S×S` images with integer labels in `[0, num_labels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub num_labels: usize,
    pub split: Split,
}

/// Dense `B×C×S×S` batch of real-valued images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// Inputs with one soft-target row (summing to 1) per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: ImageBatch,
    pub targets: Vec<f64>,
    pub num_labels: usize,
}

impl Batch {
    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.num_labels..(i + 1) * self.num_labels]
    }

    fn check_compatible(&self, other: &Batch) -> Result<()> {
        if self.inputs.count != other.inputs.count
            || self.inputs.channels != other.inputs.channels
            || self.inputs.size != other.inputs.size
            || self.num_labels != other.num_labels
        {
            return Err(Error::Input("batches to mix have different shapes".into()));
        }
        Ok(())
    }
}

fn resolve_cifar_file(path: &Path, variant: CifarVariant, name: &str) -> PathBuf {
    let direct = path.join(name);
    if direct.exists() {
        return direct;
    }
    let nested = path.join(variant.subdir()).join(name);
    if nested.exists() {
        return nested;
    }
    direct
}

/// Loads a split from the standard CIFAR binary layout.
///
/// `path` may be a single `.bin` file or a directory holding the standard
/// file names (optionally inside `cifar-10-batches-bin` or
/// `cifar-100-binary`). CIFAR-100 records carry a coarse then a fine label
/// byte; the fine label is used. Pixels are scaled to `[0, 1]`.
pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let files: Vec<PathBuf> = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        variant
            .files(split)
            .into_iter()
            .map(|f| resolve_cifar_file(path, variant, f))
            .collect()
    };
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: CIFAR_CHANNELS,
        size: CIFAR_SIDE,
        num_labels: variant.num_labels(),
        split,
    };
    for file in files {
        let bytes = fs::read(&file).map_err(|e| Error::Ingestion {
            path: file.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
        parse_records(&bytes, variant, &file, &mut ds)?;
    }
    Ok(ds)
}

fn parse_records(bytes: &[u8], variant: CifarVariant, file: &Path, ds: &mut Dataset) -> Result<()> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Ingestion {
            path: file.to_path_buf(),
            offset: 0,
            reason: "file is empty".into(),
        });
    }
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Ingestion {
            path: file.to_path_buf(),
            offset,
            reason: format!("truncated record: {} of {rec} bytes", bytes.len() % rec),
        });
    }
    ds.images.reserve(bytes.len() / rec * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= ds.num_labels {
            return Err(Error::Ingestion {
                path: file.to_path_buf(),
                offset: (i * rec + variant.label_bytes() - 1) as u64,
                reason: format!("label {label} out of range for {} labels", ds.num_labels),
            });
        }
        ds.labels.push(label);
        ds.images
            .extend(record[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Keeps only the listed labels, renumbered `0..labels.len()` in the
    /// given order.
    pub fn filter_labels(&self, labels: &[usize]) -> Result<Dataset> {
        if labels.len() < 2 {
            return Err(Error::config("labels", "a label subset needs at least two labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_labels) {
            return Err(Error::config("labels", format!("label {bad} out of range")));
        }
        let mut out = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            num_labels: labels.len(),
            ..self.clone_empty()
        };
        for i in 0..self.len() {
            if let Some(new) = labels.iter().position(|&l| l == self.labels[i]) {
                out.labels.push(new);
                out.images.extend_from_slice(self.image(i));
            }
        }
        Ok(out)
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            size: self.size,
            num_labels: self.num_labels,
            split: self.split,
        }
    }

    /// Average-pools every image by an integer `factor`.
    pub fn downscale(&self, factor: usize) -> Result<Dataset> {
        if factor == 0 || !self.size.is_multiple_of(factor) {
            return Err(Error::config(
                "downscale",
                format!("factor {factor} does not divide image size {}", self.size),
            ));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let s = self.size / factor;
        let mut out = Dataset {
            size: s,
            labels: self.labels.clone(),
            ..self.clone_empty()
        };
        let norm = (factor * factor) as f32;
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..self.channels {
                for y in 0..s {
                    for x in 0..s {
                        let mut acc = 0.0f32;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += img[(c * self.size + y * factor + dy) * self.size + x * factor + dx];
                            }
                        }
                        out.images.push(acc / norm);
                    }
                }
            }
        }
        Ok(out)
    }

    /// First `per_label` images of every label, in record order.
    pub fn take_per_label(&self, per_label: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_labels];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                seen[l] += 1;
                seen[l] <= per_label
            })
            .collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = self.clone_empty();
        for &i in indices {
            out.labels.push(self.labels[i]);
            out.images.extend_from_slice(self.image(i));
        }
        out
    }

    /// Applies [`normalize_per_image`] to every image.
    pub fn normalized(&self) -> Result<Dataset> {
        let mut out = Dataset {
            labels: self.labels.clone(),
            ..self.clone_empty()
        };
        out.images.reserve(self.images.len());
        for i in 0..self.len() {
            let img: Vec<f64> = self.image(i).iter().map(|&v| v as f64).collect();
            let n = normalize_per_image(&img).map_err(|e| Error::Input(format!("image {i}: {e}")))?;
            out.images.extend(n.into_iter().map(|v| v as f32));
        }
        Ok(out)
    }

    /// Images `indices` as a batch with one-hot targets.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut targets = vec![0.0; indices.len() * self.num_labels];
        for (row, &i) in indices.iter().enumerate() {
            data.extend(self.image(i).iter().map(|&v| v as f64));
            targets[row * self.num_labels + self.labels[i]] = 1.0;
        }
        Batch {
            inputs: ImageBatch {
                count: indices.len(),
                channels: self.channels,
                size: self.size,
                data,
            },
            targets,
            num_labels: self.num_labels,
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_labels];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Parses a label subset such as `0..9` (inclusive), `3,5,7` or a mix.
pub fn parse_label_subset(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let bad = || Error::config("labels", format!("bad range `{part}`"));
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(
                part.parse()
                    .map_err(|_| Error::config("labels", format!("bad label `{part}`")))?,
            );
        }
    }
    Ok(out)
}

/// Subtracts the image mean and divides by its (population) standard
/// deviation, both taken over all pixels and channels of this image.
pub fn normalize_per_image(image: &[f64]) -> Result<Vec<f64>> {
    if image.len() < 2 {
        return Err(Error::Input("normalization needs more than one pixel".into()));
    }
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > f64::EPSILON * mean.abs().max(1.0)) {
        return Err(Error::Input("image has zero variance".into()));
    }
    Ok(image.iter().map(|v| (v - mean) / std).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("mixing coefficient {lambda} is outside [0, 1]")));
    }
    Ok(())
}

/// `λ·a + (1−λ)·b` on inputs and targets.
pub fn mixup(a: &Batch, b: &Batch, lambda: f64) -> Result<Batch> {
    check_lambda(lambda)?;
    a.check_compatible(b)?;
    let mix =
        |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect() };
    Ok(Batch {
        inputs: ImageBatch {
            data: mix(&a.inputs.data, &b.inputs.data),
            ..a.inputs.clone()
        },
        targets: mix(&a.targets, &b.targets),
        num_labels: a.num_labels,
    })
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// CutMix box for an `size×size` image: sides `floor(size·√(1−λ))`
/// centred at `(cy, cx)`, clipped to the image.
pub fn cutmix_box_at(size: usize, lambda: f64, cy: usize, cx: usize) -> PixelBox {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let cut = (size as f64 * ratio).floor() as isize;
    let clip = |v: isize| v.clamp(0, size as isize) as usize;
    let (cy, cx) = (cy as isize, cx as isize);
    PixelBox {
        y0: clip(cy - cut / 2),
        y1: clip(cy - cut / 2 + cut),
        x0: clip(cx - cut / 2),
        x1: clip(cx - cut / 2 + cut),
    }
}

pub fn sample_cutmix_box<R: Rng + ?Sized>(size: usize, lambda: f64, rng: &mut R) -> PixelBox {
    let cy = rng.random_range(0..size);
    let cx = rng.random_range(0..size);
    cutmix_box_at(size, lambda, cy, cx)
}

/// Pastes `region` of every `b` image into the matching `a` image. Targets
/// mix with the realized ratio `λ' = 1 − area/size²`.
pub fn cutmix_with_box(a: &Batch, b: &Batch, region: PixelBox) -> Result<Batch> {
    a.check_compatible(b)?;
    let s = a.inputs.size;
    if region.y1 > s || region.x1 > s || region.y0 > region.y1 || region.x0 > region.x1 {
        return Err(Error::Input("cutmix box lies outside the image".into()));
    }
    let mut out = a.clone();
    for i in 0..a.inputs.count {
        let src = b.inputs.image(i);
        let dst = out.inputs.image_mut(i);
        for c in 0..a.inputs.channels {
            for y in region.y0..region.y1 {
                let row = (c * s + y) * s;
                dst[row + region.x0..row + region.x1].copy_from_slice(&src[row + region.x0..row + region.x1]);
            }
        }
    }
    let realized = 1.0 - region.area() as f64 / (s * s) as f64;
    out.targets = a
        .targets
        .iter()
        .zip(&b.targets)
        .map(|(p, q)| realized * p + (1.0 - realized) * q)
        .collect();
    Ok(out)
}

/// CutMix with a randomly centred box; returns the batch and the box used.
pub fn cutmix<R: Rng + ?Sized>(a: &Batch, b: &Batch, lambda: f64, rng: &mut R) -> Result<(Batch, PixelBox)> {
    check_lambda(lambda)?;
    let region = sample_cutmix_box(a.inputs.size, lambda, rng);
    Ok((cutmix_with_box(a, b, region)?, region))
}

/// Random Erasing: with probability `p`, a rectangle whose area fraction
/// lies in `area_range` and whose aspect ratio lies in `aspect_range` is
/// replaced by standard-normal noise on every channel. Up to ten
/// rectangles are proposed; if none fits, the image is left unchanged.
pub fn random_erase<R: Rng + ?Sized>(
    image: &[f64],
    channels: usize,
    size: usize,
    p: f64,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut R,
) -> (Vec<f64>, Option<PixelBox>) {
    let mut out = image.to_vec();
    if p <= 0.0 || rng.random::<f64>() >= p {
        return (out, None);
    }
    let total = (size * size) as f64;
    let (log_lo, log_hi) = (aspect_range.0.ln(), aspect_range.1.ln());
    for _ in 0..10 {
        let target = rng.random_range(area_range.0..=area_range.1) * total;
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= size || w >= size {
            continue;
        }
        let frac = (h * w) as f64 / total;
        if frac < area_range.0 || frac > area_range.1 {
            continue;
        }
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        let region = PixelBox {
            y0,
            y1: y0 + h,
            x0,
            x1: x0 + w,
        };
        for c in 0..channels {
            for y in region.y0..region.y1 {
                for x in region.x0..region.x1 {
                    out[(c * size + y) * size + x] = rng.sample(StandardNormal);
                }
            }
        }
        return (out, Some(region));
    }
    (out, None)
}

/// Training-time augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            mixup_alpha: 1.0,
            cutmix_alpha: 1.0,
            erase_prob: 0.25,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.3),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    /// Builds a config from policy names (`mixup`, `cutmix`, `erase`).
    /// `randaugment` is recognised but rejected.
    pub fn from_policies(names: &[&str]) -> Result<Self> {
        let mut cfg = AugmentConfig {
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            erase_prob: 0.0,
            ..Default::default()
        };
        let defaults = AugmentConfig::default();
        for name in names {
            match name.to_ascii_lowercase().as_str() {
                "mixup" => cfg.mixup_alpha = defaults.mixup_alpha,
                "cutmix" => cfg.cutmix_alpha = defaults.cutmix_alpha,
                "erase" | "random-erasing" | "random_erase" => cfg.erase_prob = defaults.erase_prob,
                "randaugment" => return Err(Error::Unsupported("RandAugment is not implemented".into())),
                other => return Err(Error::config("augment", format!("unknown policy `{other}`"))),
            }
        }
        cfg.enabled = !names.is_empty();
        Ok(cfg)
    }
}

/// Mixes `batch` with a shuffled copy of itself (Mixup or CutMix with equal
/// probability, whichever are enabled), then applies Random Erasing to each
/// image independently.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<Batch> {
    if !cfg.enabled {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    let mixers: Vec<(bool, f64)> = [(true, cfg.mixup_alpha), (false, cfg.cutmix_alpha)]
        .into_iter()
        .filter(|&(_, a)| a > 0.0)
        .collect();
    if !mixers.is_empty() && batch.inputs.count > 1 {
        let mut perm: Vec<usize> = (0..batch.inputs.count).collect();
        perm.shuffle(rng);
        let partner = permute_batch(batch, &perm);
        let (is_mixup, alpha) = if mixers.len() == 2 {
            mixers[usize::from(!rng.random_bool(0.5))]
        } else {
            mixers[0]
        };
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::config("augment", e.to_string()))?;
        let lambda: f64 = beta.sample(rng).clamp(0.0, 1.0);
        out = if is_mixup {
            mixup(batch, &partner, lambda)?
        } else {
            cutmix(batch, &partner, lambda, rng)?.0
        };
    }
    if cfg.erase_prob > 0.0 {
        let (c, s) = (out.inputs.channels, out.inputs.size);
        for i in 0..out.inputs.count {
            let (img, _) = random_erase(
                out.inputs.image(i),
                c,
                s,
                cfg.erase_prob,
                cfg.erase_area,
                cfg.erase_aspect,
                rng,
            );
            out.inputs.image_mut(i).copy_from_slice(&img);
        }
    }
    Ok(out)
}

fn permute_batch(batch: &Batch, perm: &[usize]) -> Batch {
    let mut out = batch.clone();
    let l = batch.num_labels;
    for (dst, &src) in perm.iter().enumerate() {
        out.inputs.image_mut(dst).copy_from_slice(batch.inputs.image(src));
        out.targets[dst * l..(dst + 1) * l].copy_from_slice(batch.target(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot_batch(labels: &[usize], num_labels: usize, size: usize, fill: f64) -> Batch {
        let count = labels.len();
        let mut targets = vec![0.0; count * num_labels];
        for (i, &l) in labels.iter().enumerate() {
            targets[i * num_labels + l] = 1.0;
        }
        Batch {
            inputs: ImageBatch {
                count,
                channels: 3,
                size,
                data: vec![fill; count * 3 * size * size],
            },
            targets,
            num_labels,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 3.0 - 0.5).collect()
    }

    #[test]
    fn normalization_gives_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 3072);
        let y = normalize_per_image(&x).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 768);
        let once = normalize_per_image(&x).unwrap();
        let twice = normalize_per_image(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_is_rejected() {
        assert!(normalize_per_image(&[0.4; 48]).is_err());
        assert!(normalize_per_image(&[1.0]).is_err());
    }

    #[test]
    fn mixup_endpoints_and_halves() {
        let a = one_hot_batch(&[2], 5, 4, 1.0);
        let b = one_hot_batch(&[4], 5, 4, -1.0);
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        let half = mixup(&a, &b, 0.5).unwrap();
        assert_eq!(half.target(0), &[0.0, 0.0, 0.5, 0.0, 0.5]);
        assert!(half.inputs.data.iter().all(|&v| v == 0.0));
        assert!(mixup(&a, &b, 1.5).is_err());
        assert!(mixup(&a, &b, -0.1).is_err());
    }

    #[test]
    fn cutmix_lambda_one_is_identity() {
        let a = one_hot_batch(&[0, 1], 3, 8, 1.0);
        let b = one_hot_batch(&[2, 2], 3, 8, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, region) = cutmix(&a, &b, 1.0, &mut rng).unwrap();
        assert_eq!(region.area(), 0);
        assert_eq!(out, a);
    }

    #[test]
    fn cutmix_unclipped_box_has_requested_area() {
        // 32x32, λ = 0.75: side floor(32·0.5) = 16, centred well inside.
        let region = cutmix_box_at(32, 0.75, 16, 16);
        assert_eq!(region.area(), 256);
        let a = one_hot_batch(&[0], 2, 32, 0.0);
        let b = one_hot_batch(&[1], 2, 32, 1.0);
        let out = cutmix_with_box(&a, &b, region).unwrap();
        let pasted = out.inputs.data.iter().filter(|&&v| v == 1.0).count() / 3;
        assert_eq!(pasted, 256);
        assert_eq!(out.target(0), &[0.75, 0.25]);
    }

    #[test]
    fn cutmix_clipped_box_uses_realized_ratio() {
        let region = cutmix_box_at(32, 0.75, 0, 0);
        assert_eq!(region.area(), 64);
        let a = one_hot_batch(&[0], 2, 32, 0.0);
        let b = one_hot_batch(&[1], 2, 32, 1.0);
        let out = cutmix_with_box(&a, &b, region).unwrap();
        let pasted = out.inputs.data.iter().filter(|&&v| v == 1.0).count() / 3;
        let realized = 1.0 - pasted as f64 / 1024.0;
        assert_eq!(out.target(0)[0], realized);
        assert!((out.target(0)[0] - 0.75).abs() > 0.1);
    }

    #[test]
    fn random_erase_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = vec![7.0; 3 * 32 * 32];
        let (same, none) = random_erase(&img, 3, 32, 0.0, (0.02, 0.33), (0.3, 3.3), &mut rng);
        assert_eq!(same, img);
        assert!(none.is_none());
        for _ in 0..500 {
            let (out, region) = random_erase(&img, 3, 32, 1.0, (0.02, 0.33), (0.3, 3.3), &mut rng);
            let region = region.expect("p = 1 always erases on 32x32");
            assert!((20..=338).contains(&region.area()), "{}", region.area());
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        if !region.contains(y, x) {
                            assert_eq!(out[(c * 32 + y) * 32 + x], 7.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_is_reproducible_and_targets_stay_distributions() {
        let mut labels = Vec::new();
        for i in 0..16 {
            labels.push(i % 4);
        }
        let mut batch = one_hot_batch(&labels, 4, 8, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in batch.inputs.data.iter_mut() {
            *v = rng.random();
        }
        let cfg = AugmentConfig::default();
        let run = |seed| augment_batch(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for seed in 0..20 {
            let a = run(seed);
            assert_eq!(a, run(seed));
            for i in 0..a.inputs.count {
                let t = a.target(i);
                assert!(t.iter().all(|&v| v >= 0.0));
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn randaugment_fails_loudly() {
        assert!(matches!(
            AugmentConfig::from_policies(&["mixup", "randaugment"]),
            Err(Error::Unsupported(_))
        ));
        assert!(AugmentConfig::from_policies(&["mixup", "cutmix", "erase"]).is_ok());
    }

    #[test]
    fn label_subset_parsing() {
        assert_eq!(parse_label_subset("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_label_subset("3, 5,7").unwrap(), vec![3, 5, 7]);
        assert!(parse_label_subset("5..2").is_err());
    }
}
