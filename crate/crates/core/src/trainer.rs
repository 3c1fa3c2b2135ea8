//! Soft-target cross-entropy, AdamW, learning-rate schedules, the training
//! loop and checkpoint persistence.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::data::{augment_batch, AugmentConfig, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, argmax_rows, ModelState, Stop, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// `base·½(1 + cos(π·epoch/total))`
    Cosine,
    /// `base·q^floor(epoch/Δt)`
    Linear { q: f64, every: usize },
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    /// `cosine` or `linear:Q:DT`, e.g. `linear:0.78:10`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "cosine" {
            return Ok(Schedule::Cosine);
        }
        let bad = || Error::config("schedule", format!("expected `cosine` or `linear:Q:DT`, got `{s}`"));
        let rest = lower.strip_prefix("linear:").ok_or_else(bad)?;
        let (q, dt) = rest.split_once(':').ok_or_else(bad)?;
        Ok(Schedule::Linear {
            q: q.parse().map_err(|_| bad())?,
            every: dt.parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Schedule::Cosine => write!(f, "cosine"),
            Schedule::Linear { q, every } => write!(f, "linear:{q}:{every}"),
        }
    }
}

/// Value of a scheduled hyperparameter at `epoch` (0-based).
pub fn schedule_value(schedule: Schedule, epoch: usize, total_epochs: usize, base: f64) -> f64 {
    match schedule {
        Schedule::Cosine => {
            let frac = epoch as f64 / total_epochs.max(1) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        Schedule::Linear { q, every } => base * q.powi((epoch / every.max(1)) as i32),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    /// Global L2 norm clip on the gradient; off by default.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    /// Full-model training: η = 6e-4, α = 6e-2, batch 128, cosine.
    pub fn main_preset() -> Self {
        OptimizerConfig {
            lr: 6e-4,
            weight_decay: 6e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 1000,
            schedule: Schedule::Cosine,
            grad_clip: None,
        }
    }

    /// Probe classifier heads: η = 1e-3, α = 6e-2, linear (0.78, 10), 100 epochs.
    pub fn probe_preset() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            epochs: 100,
            schedule: Schedule::Linear { q: 0.78, every: 10 },
            ..Self::main_preset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta", "moment coefficients must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Schedule::Linear { q, every } = self.schedule {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::config("schedule", "decay factor q must lie in (0, 1]"));
            }
            if every < 1 {
                return Err(Error::config("schedule", "decay interval must be at least one epoch"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        schedule_value(self.schedule, epoch, self.epochs, self.lr)
    }

    pub fn weight_decay_at(&self, epoch: usize) -> f64 {
        schedule_value(self.schedule, epoch, self.epochs, self.weight_decay)
    }
}

/// Mean over rows of `−Σ_j targets[j]·log_softmax(logits)[j]`.
pub fn soft_target_cross_entropy(logits: &[f64], targets: &[f64], labels: usize) -> Result<f64> {
    Ok(soft_target_cross_entropy_grad(logits, targets, labels)?.0)
}

/// Loss and its gradient with respect to `logits` (already divided by the
/// row count).
pub fn soft_target_cross_entropy_grad(logits: &[f64], targets: &[f64], labels: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || labels == 0 || !logits.len().is_multiple_of(labels) || logits.is_empty() {
        return Err(Error::Input("logits and targets must both be B×L".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let rows = logits.len() / labels;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((z, t), g) in logits
        .chunks_exact(labels)
        .zip(targets.chunks_exact(labels))
        .zip(grad.chunks_exact_mut(labels))
    {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mass: f64 = t.iter().sum();
        for j in 0..labels {
            let logp = z[j] - lse;
            loss -= t[j] * logp;
            g[j] = (logp.exp() * mass - t[j]) / rows as f64;
        }
    }
    Ok((loss / rows as f64, grad))
}

/// First and second moments per tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_tensors(tensors: &[Tensor]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update of every trainable tensor.
///
/// Decay is decoupled: each trainable parameter is first scaled by
/// `1 − lr·weight_decay`, then moved by the bias-corrected Adam step.
/// Frozen tensors and their moments are left untouched.
pub fn adamw_step(
    tensors: &mut [Tensor],
    state: &mut AdamState,
    grads: &[Vec<f64>],
    cfg: &OptimizerConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != tensors.len() {
        return Err(Error::Input("gradient list does not match the parameter list".into()));
    }
    for (t, g) in tensors.iter().zip(grads) {
        if !t.trainable {
            continue;
        }
        if g.len() != t.len() {
            return Err(Error::ShapeMismatch {
                name: t.name.clone(),
                expected: vec![t.len()],
                found: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{}`", t.name)));
        }
    }
    let clip_scale = match cfg.grad_clip {
        Some(max_norm) => {
            let norm = tensors
                .iter()
                .zip(grads)
                .filter(|(t, _)| t.trainable)
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (i, tensor) in tensors.iter_mut().enumerate() {
        if !tensor.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data.iter_mut().enumerate() {
            let g = grads[i][j] * clip_scale;
            *p *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Which tensors stay fixed during training.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FreezeMask {
    #[default]
    Nothing,
    /// Freeze tensors matching any pattern.
    Only(Vec<String>),
    /// Freeze everything except tensors matching any pattern.
    AllExcept(Vec<String>),
}

/// A pattern matches a tensor by exact name or as a dotted prefix
/// (`blocks.0` matches `blocks.0.attn.qkv.weight`).
fn pattern_matches(pattern: &str, name: &str) -> bool {
    name == pattern || name.strip_prefix(pattern).is_some_and(|rest| rest.starts_with('.'))
}

impl FreezeMask {
    pub fn apply(&self, tensors: &mut [Tensor]) -> Result<()> {
        let patterns = match self {
            FreezeMask::Nothing => &[][..],
            FreezeMask::Only(p) | FreezeMask::AllExcept(p) => p.as_slice(),
        };
        for p in patterns {
            if !tensors.iter().any(|t| pattern_matches(p, &t.name)) {
                return Err(Error::config("freeze_mask", format!("`{p}` names no tensor")));
            }
        }
        for t in tensors.iter_mut() {
            let hit = patterns.iter().any(|p| pattern_matches(p, &t.name));
            t.trainable = match self {
                FreezeMask::Nothing => t.trainable,
                FreezeMask::Only(_) => t.trainable && !hit,
                FreezeMask::AllExcept(_) => t.trainable && hit,
            };
        }
        if !tensors.iter().any(|t| t.trainable) {
            return Err(Error::config("freeze_mask", "no trainable tensors remain"));
        }
        Ok(())
    }
}

/// Loss and parameter gradients of a batch.
///
/// In strict mode samples are accumulated sequentially in batch order. In
/// relaxed mode the batch is split into one chunk per rayon thread and the
/// chunk sums are added in chunk order, so results depend on the thread
/// count only through floating-point reassociation.
pub fn loss_and_grad(
    model: &ModelState,
    spec: &ArchitectureSpec,
    batch: &Batch,
    strict: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    model::check_batch(spec, &batch.inputs)?;
    let b = batch.inputs.count;
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let l = spec.num_labels;
    let work = |range: std::ops::Range<usize>| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for i in range {
            let cache = model::forward_sample(model, spec, batch.inputs.image(i), Stop::Logits);
            let (li, mut dl) = soft_target_cross_entropy_grad(&cache.logits, batch.target(i), l)?;
            dl.iter_mut().for_each(|v| *v /= b as f64);
            loss += li;
            model::backward_sample(model, spec, &cache, &dl, &mut grads);
        }
        Ok((loss, grads))
    };
    let chunks = if strict {
        1
    } else {
        rayon::current_num_threads().clamp(1, b)
    };
    let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| work(b * c / chunks..b * (c + 1) / chunks))
        .collect();
    let mut total_loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for part in parts {
        let (l, g) = part?;
        total_loss += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    for (p, q) in a.iter_mut().zip(x) {
                        *p += q;
                    }
                }
            }
        }
    }
    Ok((total_loss / b as f64, grads.expect("at least one chunk")))
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate_accuracy(model: &ModelState, spec: &ArchitectureSpec, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict_logits(model, spec, data)?;
    let pred = argmax_rows(&logits, spec.num_labels);
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Raw output fields for every image in `data` (`N×L`).
pub fn predict_logits(model: &ModelState, spec: &ArchitectureSpec, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * spec.num_labels);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let batch = data.batch(chunk);
        out.extend(model::forward(model, spec, &batch.inputs, false)?.logits);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// NaN when no validation set was supplied.
    pub val_acc: f64,
    /// NaN unless training accuracy evaluation is enabled.
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainOptions {
    pub augment: AugmentConfig,
    pub strict: bool,
    pub seed: u64,
    /// Also measure clean training accuracy after each epoch.
    pub eval_train: bool,
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Single-writer training loop over one model.
#[derive(Debug)]
pub struct Trainer {
    pub spec: ArchitectureSpec,
    pub model: ModelState,
    pub optimizer: AdamState,
    pub config: OptimizerConfig,
    pub options: TrainOptions,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        mut model: ModelState,
        spec: &ArchitectureSpec,
        config: OptimizerConfig,
        freeze: &FreezeMask,
        options: TrainOptions,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        model.check_against(spec)?;
        freeze.apply(&mut model.tensors)?;
        let optimizer = AdamState::for_tensors(&model.tensors);
        let rng = ChaCha8Rng::seed_from_u64(options.seed);
        Ok(Trainer {
            spec: spec.clone(),
            model,
            optimizer,
            config,
            options,
            epoch: 0,
            history: Vec::new(),
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: OptimizerConfig, options: TrainOptions) -> Result<Self> {
        config.validate()?;
        ckpt.model.check_against(&ckpt.spec)?;
        if !ckpt.model.tensors.iter().any(|t| t.trainable) {
            return Err(Error::config("freeze_mask", "no trainable tensors remain"));
        }
        Ok(Trainer {
            spec: ckpt.spec,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config,
            options,
            epoch: ckpt.epoch as usize,
            history: ckpt.history,
            rng: ckpt.rng.restore(),
        })
    }

    /// One pass over `train` in a fresh random order.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let lr = self.config.lr_at(self.epoch);
        let wd = self.config.weight_decay_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let batch = augment_batch(&train.batch(idx), &self.options.augment, &mut self.rng)?;
            let (loss, grads) = loss_and_grad(&self.model, &self.spec, &batch, self.options.strict)?;
            adamw_step(
                &mut self.model.tensors,
                &mut self.optimizer,
                &grads,
                &self.config,
                lr,
                wd,
            )?;
            loss_sum += loss * idx.len() as f64;
        }
        let val_acc = match val {
            Some(v) => evaluate_accuracy(&self.model, &self.spec, v)?,
            None => f64::NAN,
        };
        let train_acc = if self.options.eval_train {
            evaluate_accuracy(&self.model, &self.spec, train)?
        } else {
            f64::NAN
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            val_acc,
            train_acc,
        };
        self.history.push(rec);
        self.epoch += 1;
        Ok(rec)
    }

    /// Runs epochs until `config.epochs` is reached.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
        }
    }
}

/// Trains `model` for `config.epochs` epochs; returns it with the history.
pub fn train(
    model: ModelState,
    spec: &ArchitectureSpec,
    train_set: &Dataset,
    val: Option<&Dataset>,
    config: OptimizerConfig,
    freeze: &FreezeMask,
    options: TrainOptions,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model, spec, config, freeze, options)?;
    t.run(train_set, val)?;
    Ok((t.model, t.history))
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,lr,loss,val_acc,train_acc")?;
    for r in history {
        writeln!(f, "{},{:e},{},{},{}", r.epoch, r.lr, r.loss, r.val_acc, r.train_acc)?;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCTSHPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub model: ModelState,
    pub optimizer: AdamState,
    pub epoch: u64,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// A checkpoint of an untrained or externally trained model.
    pub fn from_model(spec: &ArchitectureSpec, model: ModelState) -> Self {
        let optimizer = AdamState::for_tensors(&model.tensors);
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(model.seed));
        Checkpoint {
            spec: spec.clone(),
            model,
            optimizer,
            epoch: 0,
            rng,
            history: Vec::new(),
        }
    }

    /// Checks this checkpoint was written for `spec`.
    pub fn verify_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        self.model.check_against(spec)?;
        if self.spec != *spec {
            return Err(Error::config(
                "arch",
                "checkpoint was written for a different architecture",
            ));
        }
        Ok(())
    }

    /// Little-endian layout: magic, version, spec hash, spec text, model
    /// seed, epoch, optimizer step, RNG state, tensors (name, trainable
    /// flag, dtype, shape, data), optimizer moments, history, then a
    /// SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.extend_from_slice(&self.spec.hash().to_le_bytes());
        put_bytes(&mut w, self.spec.to_config_string().as_bytes());
        w.extend_from_slice(&self.model.seed.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.optimizer.step.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&(self.model.tensors.len() as u32).to_le_bytes());
        for t in &self.model.tensors {
            put_bytes(&mut w, t.name.as_bytes());
            w.push(u8::from(t.trainable));
            w.push(DTYPE_F64);
            w.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut w, &t.data);
        }
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_f64s(&mut w, m);
            put_f64s(&mut w, v);
        }
        w.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            w.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            for x in [r.lr, r.loss, r.val_acc, r.train_acc] {
                w.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hash = r.u64()?;
        let text =
            String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Corrupt("spec text is not UTF-8".into()))?;
        let spec = ArchitectureSpec::from_config_str(&text)?;
        if spec.hash() != hash {
            return Err(Error::Corrupt("spec hash does not match spec text".into()));
        }
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let trainable = r.take(1)?[0] != 0;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Corrupt(format!("unknown dtype {dtype} for `{name}`")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` length disagrees with its shape"
                )));
            }
            tensors.push(Tensor {
                name,
                shape,
                data,
                trainable,
            });
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for t in &tensors {
            let (mi, vi) = (r.f64s()?, r.f64s()?);
            if mi.len() != t.len() || vi.len() != t.len() {
                return Err(Error::Corrupt(format!(
                    "optimizer moments for `{}` have the wrong length",
                    t.name
                )));
            }
            m.push(mi);
            v.push(vi);
        }
        let hn = r.u32()? as usize;
        let mut history = Vec::with_capacity(hn);
        for _ in 0..hn {
            let epoch = r.u64()? as usize;
            let lr = r.f64()?;
            let loss = r.f64()?;
            let val_acc = r.f64()?;
            let train_acc = r.f64()?;
            history.push(EpochRecord {
                epoch,
                lr,
                loss,
                val_acc,
                train_acc,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes before checksum".into()));
        }
        let model = ModelState { tensors, seed };
        model.check_against(&spec)?;
        Ok(Checkpoint {
            spec,
            model,
            optimizer: AdamState { m, v, step },
            epoch,
            rng: RngState {
                seed: rng_seed,
                stream,
                word_pos,
            },
            history,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u32).to_le_bytes());
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    w.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("unexpected end of data at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corrupt("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> Vec<Tensor> {
        vec![Tensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![value],
            trainable: true,
        }]
    }

    #[test]
    fn uniform_logits_give_log_label_count() {
        let logits = vec![0.3; 100];
        let mut t = vec![0.0; 100];
        t[17] = 1.0;
        let loss = soft_target_cross_entropy(&logits, &t, 100).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
        assert!((loss - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn loss_at_softmax_target_is_entropy() {
        let logits = [0.5, -1.0, 2.0, 0.1];
        let max = 2.0f64;
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|v| (v - max).exp() / z).collect();
        let entropy = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let loss = soft_target_cross_entropy(&logits, &p, 4).unwrap();
        assert!((loss - entropy).abs() < 1e-12);
        // any other target distribution gives a larger cross-entropy minus entropy gap >= 0
        let other = [0.25; 4];
        let h_other = -other.iter().map(|q: &f64| q * q.ln()).sum::<f64>();
        assert!(soft_target_cross_entropy(&logits, &other, 4).unwrap() >= h_other);
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let logits = vec![0.2, -0.7, 1.3, 0.05, -0.4, 0.9];
        let targets = vec![0.1, 0.6, 0.3, 0.0, 0.5, 0.5];
        let (_, g) = soft_target_cross_entropy_grad(&logits, &targets, 3).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fd = (soft_target_cross_entropy(&up, &targets, 3).unwrap()
                - soft_target_cross_entropy(&dn, &targets, 3).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(matches!(
            soft_target_cross_entropy(&[f64::NAN, 0.0], &[1.0, 0.0], 2),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn schedule_values() {
        assert_eq!(schedule_value(Schedule::Cosine, 0, 100, 3e-4), 3e-4);
        assert!((schedule_value(Schedule::Cosine, 50, 100, 1.0) - 0.5).abs() < 1e-15);
        let lin = schedule_value(Schedule::Linear { q: 0.78, every: 10 }, 25, 100, 1e-3);
        assert_eq!(lin, 1e-3 * 0.78 * 0.78);
        assert!((lin - 6.084e-4).abs() < 1e-15);
    }

    #[test]
    fn linear_schedule_has_ceil_total_over_dt_plateaus() {
        for (total, dt) in [(100, 10), (95, 10), (7, 3), (1, 5)] {
            let s = Schedule::Linear { q: 0.5, every: dt };
            let mut vals: Vec<f64> = (0..total).map(|e| schedule_value(s, e, total, 1.0)).collect();
            vals.dedup();
            assert_eq!(vals.len(), total.div_ceil(dt));
        }
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::main_preset()
        };
        let mut p = scalar(1.5);
        let mut st = AdamState::for_tensors(&p);
        for _ in 0..10 {
            adamw_step(&mut p, &mut st, &[vec![0.0]], &cfg, 1e-2, 0.0).unwrap();
        }
        assert_eq!(p[0].data[0], 1.5);
    }

    #[test]
    fn zero_gradients_with_decay_shrink_geometrically() {
        let cfg = OptimizerConfig::main_preset();
        let (lr, wd) = (1e-2, 0.5);
        let mut p = scalar(2.0);
        let mut st = AdamState::for_tensors(&p);
        let mut expected = 2.0;
        for _ in 0..5 {
            adamw_step(&mut p, &mut st, &[vec![0.0]], &cfg, lr, wd).unwrap();
            expected *= 1.0 - lr * wd;
            assert_eq!(p[0].data[0], expected);
        }
    }

    #[test]
    fn adamw_minimizes_scalar_quadratic() {
        // f(x) = (x - 3)^2
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::main_preset()
        };
        let mut p = scalar(0.0);
        let mut st = AdamState::for_tensors(&p);
        let mut converged_at = None;
        for step in 0..2000 {
            let x = p[0].data[0];
            adamw_step(&mut p, &mut st, &[vec![2.0 * (x - 3.0)]], &cfg, 1e-2, 0.0).unwrap();
            if (p[0].data[0] - 3.0).abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some());
        assert!((p[0].data[0] - 3.0).abs() < 1e-3, "{}", p[0].data[0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar(1.0);
        let mut st = AdamState::for_tensors(&p);
        let err = adamw_step(
            &mut p,
            &mut st,
            &[vec![f64::INFINITY]],
            &OptimizerConfig::main_preset(),
            1e-3,
            0.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(p[0].data[0], 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::probe_preset();
        assert!(c.validate().is_ok());
        c.schedule = Schedule::Linear { q: 1.5, every: 10 };
        assert!(c.validate().is_err());
        c.schedule = Schedule::Linear { q: 0.5, every: 0 };
        assert!(c.validate().is_err());
        c = OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::main_preset()
        };
        assert!(c.validate().is_err());
        assert_eq!(
            "linear:0.78:10".parse::<Schedule>().unwrap(),
            Schedule::Linear { q: 0.78, every: 10 }
        );
    }

    #[test]
    fn freeze_patterns() {
        let mut ts = vec![
            Tensor {
                name: "blocks.0.attn.qkv.weight".into(),
                shape: vec![1],
                data: vec![0.0],
                trainable: true,
            },
            Tensor {
                name: "blocks.10.attn.qkv.weight".into(),
                shape: vec![1],
                data: vec![0.0],
                trainable: true,
            },
            Tensor {
                name: "classifier.weight".into(),
                shape: vec![1],
                data: vec![0.0],
                trainable: true,
            },
        ];
        FreezeMask::Only(vec!["blocks.1".into()]).apply(&mut ts).unwrap_err();
        FreezeMask::Only(vec!["blocks.0".into()]).apply(&mut ts).unwrap();
        assert_eq!(
            ts.iter().map(|t| t.trainable).collect::<Vec<_>>(),
            vec![false, true, true]
        );
        FreezeMask::AllExcept(vec!["classifier".into()]).apply(&mut ts).unwrap();
        assert_eq!(
            ts.iter().map(|t| t.trainable).collect::<Vec<_>>(),
            vec![false, false, true]
        );
        assert!(FreezeMask::Only(vec!["classifier".into()]).apply(&mut ts).is_err());
    }
}
