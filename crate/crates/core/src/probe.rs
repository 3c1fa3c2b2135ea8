//! Classifier probes on frozen model prefixes and label-averaged field
//! matrices of single heads (SHP), single nodes (SNP) and whole taps.
//!
//! A probe cuts the model after block `m` (or after the attention of block
//! `m`, before the output projection) and attaches a fresh head made of
//! sequence pooling and a fully connected layer. Silencing zeroes the input
//! rows of that fully connected layer outside the selected coordinates.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, sequence_pool, sequence_pool_backward, ModelState, Stop, Tensor};
use crate::trainer::{adamw_step, soft_target_cross_entropy_grad, AdamState, EpochRecord, OptimizerConfig};

/// Feature caches above this many values are recomputed per batch instead.
const FEATURE_CACHE_LIMIT: usize = 1 << 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    PostBlock,
    /// Concatenated head outputs before the output projection.
    PostAttention,
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::PostBlock => "post_block",
            Tap::PostAttention => "post_attention",
        })
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "post_block" | "block" => Ok(Tap::PostBlock),
            "post_attention" | "attention" | "attn" => Ok(Tap::PostAttention),
            other => Err(Error::config("tap", format!("unknown tap `{other}`"))),
        }
    }
}

/// Where a probe reads the model. `block` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbePoint {
    pub block: usize,
    pub tap: Tap,
}

impl ProbePoint {
    pub fn new(block: usize, tap: Tap) -> Self {
        ProbePoint { block, tap }
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.block == 0 || self.block > spec.num_blocks {
            return Err(Error::config(
                "probe.block",
                format!("block {} is outside 1..={}", self.block, spec.num_blocks),
            ));
        }
        Ok(())
    }

    fn stop(&self) -> Stop {
        match self.tap {
            Tap::PostBlock => Stop::AfterBlock(self.block - 1),
            Tap::PostAttention => Stop::AfterAttention(self.block - 1),
        }
    }
}

impl fmt::Display for ProbePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}-{}", self.block, self.tap)
    }
}

/// Frozen model prefix ending at a probe point.
#[derive(Debug, Clone)]
pub struct Extractor {
    spec: ArchitectureSpec,
    model: ModelState,
    probe: ProbePoint,
    fingerprint: String,
}

impl Extractor {
    pub fn new(model: &ModelState, spec: &ArchitectureSpec, probe: ProbePoint) -> Result<Self> {
        spec.validate()?;
        model.check_against(spec)?;
        probe.validate(spec)?;
        let mut model = model.clone();
        for t in &mut model.tensors {
            t.trainable = false;
        }
        let fingerprint = model.fingerprint();
        Ok(Extractor {
            spec: spec.clone(),
            model,
            probe,
            fingerprint,
        })
    }

    pub fn probe(&self) -> ProbePoint {
        self.probe
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// Fingerprint of the frozen tensors taken when the extractor was built.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_tokens(&self) -> usize {
        self.spec.num_tokens()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.dim
    }

    /// Heads of the probed block and the width of each head's column slice.
    pub fn heads(&self) -> (usize, usize) {
        let b = self.probe.block - 1;
        (self.spec.heads_per_block[b], self.spec.head_size(b))
    }

    /// Tap output (`T×dim`) for one image.
    pub fn extract(&self, image: &[f64]) -> Vec<f64> {
        model::forward_sample(&self.model, &self.spec, image, self.probe.stop()).tap
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.channels != self.spec.input_channels || data.size != self.spec.input_size {
            return Err(Error::ShapeMismatch {
                name: "input".into(),
                expected: vec![self.spec.input_channels, self.spec.input_size, self.spec.input_size],
                found: vec![data.channels, data.size, data.size],
            });
        }
        Ok(())
    }

    /// Tap outputs for `indices` of `data`, concatenated (`n×T×dim`).
    pub fn features(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let per: Vec<Vec<f64>> = indices
            .par_iter()
            .map(|&i| {
                let img: Vec<f64> = data.image(i).iter().map(|&v| v as f64).collect();
                self.extract(&img)
            })
            .collect();
        Ok(per.concat())
    }
}

/// Trainable probe head: sequence pooling followed by a fully connected layer.
///
/// Tensor order: `pool.weight [dim]`, `pool.bias [1]`, `fc.weight [dim, L]`,
/// `fc.bias [L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub tensors: Vec<Tensor>,
    pub dim: usize,
    pub num_labels: usize,
}

impl ProbeHead {
    /// Fresh head with truncated-normal weights. Without `fc_bias` the
    /// classifier bias stays frozen at zero.
    pub fn new(dim: usize, num_labels: usize, seed: u64, fc_bias: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut init = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break 0.02 * z;
                    }
                })
                .collect()
        };
        let tensor = |name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool| Tensor {
            name: name.into(),
            shape,
            data,
            trainable,
        };
        let pool_w = init(dim);
        let fc_w = init(dim * num_labels);
        ProbeHead {
            tensors: vec![
                tensor("pool.weight", vec![dim], pool_w, true),
                tensor("pool.bias", vec![1], vec![0.0], true),
                tensor("fc.weight", vec![dim, num_labels], fc_w, true),
                tensor("fc.bias", vec![num_labels], vec![0.0; num_labels], fc_bias),
            ],
            dim,
            num_labels,
        }
    }

    pub fn pool_weight(&self) -> &[f64] {
        &self.tensors[0].data
    }

    pub fn pool_bias(&self) -> f64 {
        self.tensors[1].data[0]
    }

    pub fn fc_weight(&self) -> &[f64] {
        &self.tensors[2].data
    }

    pub fn fc_bias(&self) -> &[f64] {
        &self.tensors[3].data
    }

    pub fn has_bias(&self) -> bool {
        self.tensors[3].trainable || self.fc_bias().iter().any(|&b| b != 0.0)
    }

    /// Output fields for one tap output.
    pub fn fields(&self, features: &[f64]) -> Vec<f64> {
        let (pooled, _) = sequence_pool(features, self.pool_weight(), self.pool_bias());
        self.fc(&pooled, None)
    }

    /// `b + Σ_k pooled[k]·W[k,:]`, restricted to `keep` when given.
    fn fc(&self, pooled: &[f64], keep: Option<&[usize]>) -> Vec<f64> {
        let l = self.num_labels;
        let w = self.fc_weight();
        let mut out = self.fc_bias().to_vec();
        let mut add = |k: usize| {
            let p = pooled[k];
            for (o, &wk) in out.iter_mut().zip(&w[k * l..(k + 1) * l]) {
                *o += p * wk;
            }
        };
        match keep {
            Some(ks) => ks.iter().for_each(|&k| add(k)),
            None => (0..self.dim).for_each(&mut add),
        }
        out
    }

    /// Copy of the head with every FC input row outside `keep` zeroed.
    pub fn silenced(&self, keep: &[usize]) -> ProbeHead {
        let mut copy = self.clone();
        let l = self.num_labels;
        let mut mask = vec![false; self.dim];
        keep.iter().for_each(|&k| mask[k] = true);
        for (k, row) in copy.tensors[2].data.chunks_exact_mut(l).enumerate() {
            if !mask[k] {
                row.iter_mut().for_each(|w| *w = 0.0);
            }
        }
        copy
    }
}

/// Builds the frozen extractor for `probe` and a fresh probe head.
pub fn attach_probe_head(
    model: &ModelState,
    spec: &ArchitectureSpec,
    probe: ProbePoint,
    seed: u64,
    fc_bias: bool,
) -> Result<(Extractor, ProbeHead)> {
    let extractor = Extractor::new(model, spec, probe)?;
    let head = ProbeHead::new(spec.dim, spec.num_labels, seed, fc_bias);
    Ok((extractor, head))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTrainOptions {
    pub seed: u64,
    /// Sequential gradient accumulation for bit-reproducible runs.
    pub strict: bool,
}

impl Default for ProbeTrainOptions {
    fn default() -> Self {
        ProbeTrainOptions { seed: 0, strict: true }
    }
}

enum FeatureSource<'a> {
    Cached(Vec<f64>),
    Live(&'a Dataset),
}

impl FeatureSource<'_> {
    fn batch(&self, extractor: &Extractor, indices: &[usize]) -> Result<Vec<f64>> {
        match self {
            FeatureSource::Cached(all) => {
                let per = extractor.num_tokens() * extractor.feature_dim();
                Ok(indices
                    .iter()
                    .flat_map(|&i| all[i * per..(i + 1) * per].iter().copied())
                    .collect())
            }
            FeatureSource::Live(data) => extractor.features(data, indices),
        }
    }
}

fn head_loss_and_grad(head: &ProbeHead, feats: &[f64], labels: &[usize], strict: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let per = feats.len() / labels.len();
    let n = labels.len();
    let l = head.num_labels;
    let work = |range: std::ops::Range<usize>| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g: Vec<Vec<f64>> = head.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        let mut target = vec![0.0; l];
        for i in range {
            let x = &feats[i * per..(i + 1) * per];
            let (pooled, weights) = sequence_pool(x, head.pool_weight(), head.pool_bias());
            let logits = head.fc(&pooled, None);
            target.iter_mut().for_each(|t| *t = 0.0);
            target[labels[i]] = 1.0;
            let (li, mut dl) = soft_target_cross_entropy_grad(&logits, &target, l)?;
            dl.iter_mut().for_each(|v| *v /= n as f64);
            loss += li;
            let w = head.fc_weight();
            let mut dpooled = vec![0.0; head.dim];
            for k in 0..head.dim {
                let row = &w[k * l..(k + 1) * l];
                let grow = &mut g[2][k * l..(k + 1) * l];
                for j in 0..l {
                    grow[j] += pooled[k] * dl[j];
                    dpooled[k] += row[j] * dl[j];
                }
            }
            for (gb, d) in g[3].iter_mut().zip(&dl) {
                *gb += d;
            }
            let (gpw, rest) = g.split_at_mut(1);
            sequence_pool_backward(&dpooled, x, &weights, head.pool_weight(), &mut gpw[0], &mut rest[0][0]);
        }
        Ok((loss, g))
    };
    let chunks = if strict {
        1
    } else {
        rayon::current_num_threads().clamp(1, n)
    };
    let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| work(n * c / chunks..n * (c + 1) / chunks))
        .collect();
    let mut total = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for p in parts {
        let (l, g) = p?;
        total += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc
                .iter_mut()
                .zip(&g)
                .for_each(|(a, x)| a.iter_mut().zip(x).for_each(|(p, q)| *p += q)),
        }
    }
    Ok((total / n as f64, grads.expect("one chunk")))
}

/// Trains the probe head on frozen tap outputs of `train` (no
/// augmentation). Returns one record per epoch; `val_acc` is filled when a
/// validation set is given.
pub fn train_probe_head(
    extractor: &Extractor,
    head: &mut ProbeHead,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &OptimizerConfig,
    options: ProbeTrainOptions,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("probe training set is empty".into()));
    }
    if train.num_labels != head.num_labels {
        return Err(Error::config(
            "labels",
            "dataset label count differs from the probe head",
        ));
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let per = extractor.num_tokens() * extractor.feature_dim();
    let source = if train.len() * per <= FEATURE_CACHE_LIMIT {
        FeatureSource::Cached(extractor.features(train, &all)?)
    } else {
        extractor.check_data(train)?;
        FeatureSource::Live(train)
    };
    let mut state = AdamState::for_tensors(&head.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = all;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let wd = config.weight_decay_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let feats = source.batch(extractor, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = head_loss_and_grad(head, &feats, &labels, options.strict)?;
            loss_sum += loss * chunk.len() as f64;
            adamw_step(&mut head.tensors, &mut state, &grads, config, lr, wd)?;
        }
        let val_acc = match validation {
            Some(v) => probe_accuracy(extractor, head, v)?,
            None => f64::NAN,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            val_acc,
            train_acc: f64::NAN,
        });
    }
    Ok(history)
}

/// Top-1 accuracy of extractor + head on `validation`.
pub fn probe_accuracy(extractor: &Extractor, head: &ProbeHead, validation: &Dataset) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Input(
            "cannot measure probe accuracy on an empty validation set".into(),
        ));
    }
    extractor.check_data(validation)?;
    let correct: usize = (0..validation.len())
        .into_par_iter()
        .map(|i| {
            let img: Vec<f64> = validation.image(i).iter().map(|&v| v as f64).collect();
            let f = head.fields(&extractor.extract(&img));
            usize::from(model::argmax_rows(&f, head.num_labels)[0] == validation.labels[i])
        })
        .sum();
    Ok(correct as f64 / validation.len() as f64)
}

/// What a field matrix measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subject {
    Head {
        head: usize,
    },
    Node {
        node: usize,
        head: usize,
    },
    /// Mean of the node matrices of one head.
    HeadFromNodes {
        head: usize,
    },
    Tap,
}

/// Label-averaged output fields, max-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMatrix {
    pub size: usize,
    /// `raw / scale`; the largest element is exactly 1.
    pub values: Vec<f64>,
    /// Row `i` is the mean field vector over validation inputs of label `i`.
    pub raw: Vec<f64>,
    /// Maximum element of `raw`.
    pub scale: f64,
    pub subject: Subject,
    pub probe: ProbePoint,
    pub model_hash: String,
}

impl FieldMatrix {
    pub fn from_raw(
        size: usize,
        raw: Vec<f64>,
        subject: Subject,
        probe: ProbePoint,
        model_hash: String,
    ) -> Result<Self> {
        if raw.len() != size * size {
            return Err(Error::Input("field matrix must be square".into()));
        }
        let scale = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateMatrix(scale));
        }
        let values = raw.iter().map(|&v| v / scale).collect();
        Ok(FieldMatrix {
            size,
            values,
            raw,
            scale,
            subject,
            probe,
            model_hash,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks_exact(self.size) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn sidecar_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            subject: Subject,
            probe: ProbePoint,
            normalization: f64,
            labels: usize,
            model_hash: &'a str,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            subject: self.subject,
            probe: self.probe,
            normalization: self.scale,
            labels: self.size,
            model_hash: &self.model_hash,
        })?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.sidecar_json()?)?;
        Ok(())
    }

    /// Grayscale heatmap, `cell` pixels per element; values are clamped to
    /// `[0, 1]` (white is 1).
    pub fn write_heatmap(&self, path: impl AsRef<Path>, cell: u32) -> Result<()> {
        let cell = cell.max(1);
        let side = self.size as u32 * cell;
        let img = image::GrayImage::from_fn(side, side, |x, y| {
            let v = self.get((y / cell) as usize, (x / cell) as usize).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        });
        img.save(path.as_ref()).map_err(|e| Error::Image(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FieldOptions {
    /// Also mask the features seen by sequence pooling, not only the FC input.
    pub silence_before_sp: bool,
}

/// Cached validation features for repeated field-matrix queries on one
/// probe. Matrices for different subjects are independent and computed in
/// parallel.
pub struct FieldProbe<'a> {
    extractor: &'a Extractor,
    head: &'a ProbeHead,
    labels: Vec<usize>,
    counts: Vec<usize>,
    options: FieldOptions,
    /// Pooled unsilenced features, `N×dim`.
    pooled: Vec<f64>,
    /// Raw tap outputs, kept only when pooling must see silenced features.
    tokens: Option<Vec<f64>>,
}

impl<'a> FieldProbe<'a> {
    pub fn new(
        extractor: &'a Extractor,
        head: &'a ProbeHead,
        validation: &Dataset,
        options: FieldOptions,
    ) -> Result<Self> {
        extractor.check_data(validation)?;
        let l = head.num_labels;
        if validation.num_labels != l {
            return Err(Error::config(
                "labels",
                "validation label count differs from the probe head",
            ));
        }
        let mut counts = vec![0; l];
        validation.labels.iter().for_each(|&y| counts[y] += 1);
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyLabel(empty));
        }
        let idx: Vec<usize> = (0..validation.len()).collect();
        let tokens = extractor.features(validation, &idx)?;
        let per = extractor.num_tokens() * extractor.feature_dim();
        let pooled: Vec<f64> = tokens
            .par_chunks_exact(per)
            .flat_map_iter(|x| sequence_pool(x, head.pool_weight(), head.pool_bias()).0)
            .collect();
        Ok(FieldProbe {
            extractor,
            head,
            labels: validation.labels.clone(),
            counts,
            options,
            pooled,
            tokens: options.silence_before_sp.then_some(tokens),
        })
    }

    fn raw_fields(&self, keep: &[usize]) -> Vec<f64> {
        let l = self.head.num_labels;
        let dim = self.head.dim;
        let silenced = self.head.silenced(keep);
        let mut sums = vec![0.0; l * l];
        for (n, &y) in self.labels.iter().enumerate() {
            let f = match &self.tokens {
                Some(tokens) => {
                    let per = self.extractor.num_tokens() * dim;
                    let mut masked = vec![0.0; per];
                    for (dst, src) in masked
                        .chunks_exact_mut(dim)
                        .zip(tokens[n * per..(n + 1) * per].chunks_exact(dim))
                    {
                        keep.iter().for_each(|&k| dst[k] = src[k]);
                    }
                    let (pooled, _) = sequence_pool(&masked, silenced.pool_weight(), silenced.pool_bias());
                    silenced.fc(&pooled, Some(keep))
                }
                None => silenced.fc(&self.pooled[n * dim..(n + 1) * dim], Some(keep)),
            };
            for (s, v) in sums[y * l..(y + 1) * l].iter_mut().zip(&f) {
                *s += v;
            }
        }
        for (row, &c) in sums.chunks_exact_mut(l).zip(&self.counts) {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
        sums
    }

    fn matrix(&self, keep: &[usize], subject: Subject) -> Result<FieldMatrix> {
        FieldMatrix::from_raw(
            self.head.num_labels,
            self.raw_fields(keep),
            subject,
            self.extractor.probe(),
            self.extractor.fingerprint().to_string(),
        )
    }

    pub fn options(&self) -> FieldOptions {
        self.options
    }

    /// Single-head matrix: only head `h`'s column slice reaches the FC layer.
    pub fn head(&self, h: usize) -> Result<FieldMatrix> {
        let (heads, hs) = self.extractor.heads();
        if h >= heads {
            return Err(Error::config("head", format!("head {h} is outside 0..{heads}")));
        }
        let keep: Vec<usize> = (h * hs..(h + 1) * hs).collect();
        self.matrix(&keep, Subject::Head { head: h })
    }

    /// Single-node matrix for input coordinate `k`.
    pub fn node(&self, k: usize) -> Result<FieldMatrix> {
        let dim = self.head.dim;
        if k >= dim {
            return Err(Error::config("node", format!("node {k} is outside 0..{dim}")));
        }
        let (_, hs) = self.extractor.heads();
        self.matrix(&[k], Subject::Node { node: k, head: k / hs })
    }

    /// Unsilenced matrix of the whole tap.
    pub fn whole(&self) -> Result<FieldMatrix> {
        let keep: Vec<usize> = (0..self.head.dim).collect();
        self.matrix(&keep, Subject::Tap)
    }

    pub fn all_heads(&self) -> Result<Vec<FieldMatrix>> {
        let (heads, _) = self.extractor.heads();
        (0..heads).into_par_iter().map(|h| self.head(h)).collect()
    }

    pub fn all_nodes(&self) -> Result<Vec<FieldMatrix>> {
        (0..self.head.dim).into_par_iter().map(|k| self.node(k)).collect()
    }

    /// Node matrices of head `h`, in node order.
    pub fn nodes_of_head(&self, h: usize) -> Result<Vec<FieldMatrix>> {
        let (heads, hs) = self.extractor.heads();
        if h >= heads {
            return Err(Error::config("head", format!("head {h} is outside 0..{heads}")));
        }
        (h * hs..(h + 1) * hs).into_par_iter().map(|k| self.node(k)).collect()
    }
}

pub fn head_field_matrix(
    extractor: &Extractor,
    head: &ProbeHead,
    h: usize,
    validation: &Dataset,
    options: FieldOptions,
) -> Result<FieldMatrix> {
    FieldProbe::new(extractor, head, validation, options)?.head(h)
}

pub fn node_field_matrix(
    extractor: &Extractor,
    head: &ProbeHead,
    k: usize,
    validation: &Dataset,
    options: FieldOptions,
) -> Result<FieldMatrix> {
    FieldProbe::new(extractor, head, validation, options)?.node(k)
}

pub fn whole_tap_field_matrix(
    extractor: &Extractor,
    head: &ProbeHead,
    validation: &Dataset,
    options: FieldOptions,
) -> Result<FieldMatrix> {
    FieldProbe::new(extractor, head, validation, options)?.whole()
}

/// Element-wise mean of the un-normalized node matrices of one head,
/// max-normalized again.
pub fn hp_from_snp(snp: &[FieldMatrix]) -> Result<FieldMatrix> {
    let first = snp
        .first()
        .ok_or_else(|| Error::Input("no node matrices given".into()))?;
    let head = match first.subject {
        Subject::Node { head, .. } => head,
        _ => return Err(Error::Input("head-from-nodes expects node matrices".into())),
    };
    for m in snp {
        let same = matches!(m.subject, Subject::Node { head: h, .. } if h == head);
        if !same || m.size != first.size || m.probe != first.probe || m.model_hash != first.model_hash {
            return Err(Error::Input("node matrices mix subjects, probes or sizes".into()));
        }
    }
    let n = snp.len() as f64;
    let mut raw = vec![0.0; first.raw.len()];
    for m in snp {
        raw.iter_mut().zip(&m.raw).for_each(|(a, v)| *a += v);
    }
    raw.iter_mut().for_each(|v| *v /= n);
    FieldMatrix::from_raw(
        first.size,
        raw,
        Subject::HeadFromNodes { head },
        first.probe,
        first.model_hash.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn tiny() -> (ArchitectureSpec, ModelState) {
        let mut spec = ArchitectureSpec::uniform(1, 2, 8, 2, 3, 8);
        spec.conv_channels = vec![8];
        let model = model::build_model(&spec, 4).unwrap();
        (spec, model)
    }

    fn data(spec: &ArchitectureSpec, per_label: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = per_label * spec.num_labels;
        let len = spec.input_channels * spec.input_size * spec.input_size;
        Dataset {
            images: (0..n * len).map(|_| normal.sample(&mut rng) as f32).collect(),
            labels: (0..n).map(|i| i % spec.num_labels).collect(),
            channels: spec.input_channels,
            size: spec.input_size,
            num_labels: spec.num_labels,
            split: Split::Validation,
        }
    }

    /// A head whose fields are positive somewhere so normalization succeeds.
    fn biased_head(spec: &ArchitectureSpec, seed: u64) -> ProbeHead {
        let mut h = ProbeHead::new(spec.dim, spec.num_labels, seed, true);
        h.tensors[2].data.iter_mut().for_each(|w| *w *= 50.0);
        h.tensors[3].data = vec![1.0; spec.num_labels];
        h
    }

    #[test]
    fn probe_point_range() {
        let (spec, model) = tiny();
        assert!(attach_probe_head(&model, &spec, ProbePoint::new(0, Tap::PostBlock), 0, true).is_err());
        assert!(attach_probe_head(&model, &spec, ProbePoint::new(3, Tap::PostBlock), 0, true).is_err());
        let (ex, head) = attach_probe_head(&model, &spec, ProbePoint::new(2, Tap::PostAttention), 0, true).unwrap();
        assert_eq!(head.dim, 8);
        let img = vec![0.1; 3 * 64];
        assert_eq!(ex.extract(&img).len(), spec.num_tokens() * 8);
    }

    #[test]
    fn single_head_matches_whole_tap() {
        let mut spec = ArchitectureSpec::uniform(1, 1, 8, 1, 3, 8);
        spec.conv_channels = vec![8];
        let model = model::build_model(&spec, 2).unwrap();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostAttention)).unwrap();
        let head = biased_head(&spec, 1);
        let val = data(&spec, 3, 9);
        let fp = FieldProbe::new(&ex, &head, &val, FieldOptions::default()).unwrap();
        assert_eq!(fp.head(0).unwrap().raw, fp.whole().unwrap().raw);
    }

    #[test]
    fn normalization_and_rows() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(2, Tap::PostBlock)).unwrap();
        let head = biased_head(&spec, 3);
        let val = data(&spec, 4, 1);
        let m = whole_tap_field_matrix(&ex, &head, &val, FieldOptions::default()).unwrap();
        assert_eq!(m.values.iter().copied().fold(f64::MIN, f64::max), 1.0);
        // row 1 is the mean of label-1 fields
        let mut mean = [0.0; 3];
        let idx: Vec<usize> = (0..val.len()).filter(|&i| val.labels[i] == 1).collect();
        for &i in &idx {
            let img: Vec<f64> = val.image(i).iter().map(|&v| v as f64).collect();
            let f = head.fields(&ex.extract(&img));
            mean.iter_mut().zip(&f).for_each(|(a, b)| *a += b / idx.len() as f64);
        }
        for j in 0..3 {
            assert!((m.raw[3 + j] - mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_label_is_named() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostBlock)).unwrap();
        let head = biased_head(&spec, 3);
        let mut val = data(&spec, 2, 1);
        let keep: Vec<usize> = (0..val.len()).filter(|&i| val.labels[i] != 2).collect();
        val = val.subset(&keep);
        match FieldProbe::new(&ex, &head, &val, FieldOptions::default()) {
            Err(Error::EmptyLabel(2)) => {}
            other => panic!("expected empty label error, got {:?}", other.err()),
        }
    }

    #[test]
    fn degenerate_head_errors() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostBlock)).unwrap();
        let mut head = ProbeHead::new(spec.dim, 3, 0, true);
        head.tensors[2].data.iter_mut().for_each(|w| *w = 0.0);
        head.tensors[3].data = vec![-1.0; 3];
        let val = data(&spec, 2, 1);
        assert!(matches!(
            whole_tap_field_matrix(&ex, &head, &val, FieldOptions::default()),
            Err(Error::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn head_matrix_ignores_weights_outside_slice() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostAttention)).unwrap();
        let head = biased_head(&spec, 5);
        let mut other = head.clone();
        // head 1 owns columns 4..8; perturb those rows only
        for k in 4..8 {
            for j in 0..3 {
                other.tensors[2].data[k * 3 + j] += 0.7;
            }
        }
        let val = data(&spec, 3, 2);
        for opts in [
            FieldOptions::default(),
            FieldOptions {
                silence_before_sp: true,
            },
        ] {
            let a = head_field_matrix(&ex, &head, 0, &val, opts).unwrap();
            let b = head_field_matrix(&ex, &other, 0, &val, opts).unwrap();
            assert_eq!(a.raw, b.raw);
        }
    }

    #[test]
    fn silencing_leaves_trained_head_untouched() {
        let (spec, _) = tiny();
        let head = biased_head(&spec, 5);
        let before = head.clone();
        let s = head.silenced(&[0]);
        assert_eq!(head, before);
        assert!(s.fc_weight()[3..].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn hp_of_identical_and_mixed() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostAttention)).unwrap();
        let head = biased_head(&spec, 8);
        let val = data(&spec, 3, 4);
        let fp = FieldProbe::new(&ex, &head, &val, FieldOptions::default()).unwrap();
        let n0 = fp.node(0).unwrap();
        let hp = hp_from_snp(&[n0.clone(), n0.clone(), n0.clone()]).unwrap();
        for (a, b) in hp.values.iter().zip(&n0.values) {
            assert!((a - b).abs() < 1e-15);
        }
        let mixed = [n0.clone(), fp.node(5).unwrap()];
        assert!(hp_from_snp(&mixed).is_err());
        assert!(hp_from_snp(&[fp.head(0).unwrap()]).is_err());
    }

    #[test]
    fn untrained_probe_near_chance() {
        let mut spec = ArchitectureSpec::uniform(1, 1, 8, 2, 10, 8);
        spec.conv_channels = vec![8];
        let model = model::build_model(&spec, 1).unwrap();
        let (ex, head) = attach_probe_head(&model, &spec, ProbePoint::new(1, Tap::PostBlock), 3, true).unwrap();
        let val = data(&spec, 50, 11);
        let acc = probe_accuracy(&ex, &head, &val).unwrap();
        // 500 samples: 4σ band around 0.1
        assert!((acc - 0.1).abs() < 4.0 * (0.09f64 / 500.0).sqrt(), "acc {acc}");
        assert!(probe_accuracy(&ex, &head, &val.subset(&[])).is_err());
    }

    #[test]
    fn head_training_keeps_extractor_and_learns() {
        let (spec, model) = tiny();
        let (ex, mut head) = attach_probe_head(&model, &spec, ProbePoint::new(2, Tap::PostBlock), 1, true).unwrap();
        let before = ex.model().clone();
        let train = data(&spec, 6, 3);
        let cfg = OptimizerConfig {
            epochs: 40,
            batch_size: 6,
            lr: 1e-2,
            ..OptimizerConfig::probe_preset()
        };
        let hist = train_probe_head(&ex, &mut head, &train, None, &cfg, ProbeTrainOptions::default()).unwrap();
        assert_eq!(ex.model(), &before);
        assert_eq!(ex.model().fingerprint(), ex.fingerprint());
        assert!(hist.last().unwrap().loss < hist[0].loss);
    }

    #[test]
    fn heatmap_png_round_trip() {
        let (spec, model) = tiny();
        let ex = Extractor::new(&model, &spec, ProbePoint::new(1, Tap::PostBlock)).unwrap();
        let head = biased_head(&spec, 3);
        let val = data(&spec, 2, 1);
        let m = whole_tap_field_matrix(&ex, &head, &val, FieldOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        m.write_heatmap(&p, 4).unwrap();
        m.write(dir.path(), "m").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let back: Vec<f64> = csv
            .split([',', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(back, m.values);
        assert!(p.exists());
    }
}
