//! CCT model: convolutional tokenizer, pre-norm transformer encoder blocks,
//! sequence pooling and a linear classifier, with a hand-derived backward
//! pass.
//!
//! Per-sample forward passes keep every intermediate needed for backprop in
//! a [`SampleCache`]. Batched evaluation fans samples out over rayon; each
//! sample is computed independently, so batching never changes results.

pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::data::ImageBatch;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable parameters of one model, in [`param_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub tensors: Vec<Tensor>,
    pub seed: u64,
}

impl ModelState {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and raw parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Checks that every tensor has the shape `spec` implies.
    pub fn check_against(&self, spec: &ArchitectureSpec) -> Result<()> {
        let layout = param_layout(spec);
        if layout.len() != self.tensors.len() {
            return Err(Error::Input(format!(
                "model has {} tensors, architecture implies {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Tensor names and shapes implied by a spec, in storage order.
pub fn param_layout(spec: &ArchitectureSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let k = spec.conv_kernel;
    let mut cin = spec.input_channels;
    for (i, &cout) in spec.conv_channels.iter().enumerate() {
        out.push((format!("tokenizer.conv{i}.weight"), vec![cout, cin, k, k]));
        out.push((format!("tokenizer.conv{i}.bias"), vec![cout]));
        cin = cout;
    }
    let d = spec.dim;
    let hid = spec.ff_hidden();
    out.push(("pos_embedding".into(), vec![spec.num_tokens(), d]));
    for b in 0..spec.num_blocks {
        let p = format!("blocks.{b}");
        out.push((format!("{p}.norm1.weight"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        out.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d]));
        out.push((format!("{p}.attn.proj.weight"), vec![d, d]));
        out.push((format!("{p}.attn.proj.bias"), vec![d]));
        out.push((format!("{p}.norm2.weight"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        out.push((format!("{p}.ff.fc1.weight"), vec![d, hid]));
        out.push((format!("{p}.ff.fc1.bias"), vec![hid]));
        out.push((format!("{p}.ff.fc2.weight"), vec![hid, d]));
        out.push((format!("{p}.ff.fc2.bias"), vec![d]));
    }
    out.push(("norm.weight".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    out.push(("pool.weight".into(), vec![d]));
    out.push(("pool.bias".into(), vec![1]));
    out.push(("classifier.weight".into(), vec![d, spec.num_labels]));
    out.push(("classifier.bias".into(), vec![spec.num_labels]));
    out
}

// Offsets into `ModelState::tensors`, mirroring `param_layout`.
const BLOCK_TENSORS: usize = 11;

struct Layout {
    conv: usize,
    pos: usize,
    blocks: usize,
    head: usize,
}

impl Layout {
    fn new(spec: &ArchitectureSpec) -> Self {
        let conv = 0;
        let pos = 2 * spec.num_conv_layers;
        let blocks = pos + 1;
        let head = blocks + BLOCK_TENSORS * spec.num_blocks;
        Layout {
            conv,
            pos,
            blocks,
            head,
        }
    }
}

/// Borrowed parameters of one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'a> {
    pub norm1_w: &'a [f64],
    pub norm1_b: &'a [f64],
    pub qkv_w: &'a [f64],
    pub proj_w: &'a [f64],
    pub proj_b: &'a [f64],
    pub norm2_w: &'a [f64],
    pub norm2_b: &'a [f64],
    pub fc1_w: &'a [f64],
    pub fc1_b: &'a [f64],
    pub fc2_w: &'a [f64],
    pub fc2_b: &'a [f64],
}

impl ModelState {
    pub fn block_params(&self, spec: &ArchitectureSpec, block: usize) -> BlockParams<'_> {
        let base = Layout::new(spec).blocks + BLOCK_TENSORS * block;
        let t = |i: usize| self.tensors[base + i].data.as_slice();
        BlockParams {
            norm1_w: t(0),
            norm1_b: t(1),
            qkv_w: t(2),
            proj_w: t(3),
            proj_b: t(4),
            norm2_w: t(5),
            norm2_b: t(6),
            fc1_w: t(7),
            fc1_b: t(8),
            fc2_w: t(9),
            fc2_b: t(10),
        }
    }
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm") || name == "pos_embedding"
}

/// Initializes a model: truncated-normal (std 0.02, cut at 2σ) weights and
/// positional embedding, zero biases, unit/zero layer-norm affine terms.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tensors = param_layout(spec)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if is_weight(&name) {
                (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * INIT_STD;
                        }
                    })
                    .collect()
            } else if name.contains("norm") && name.ends_with(".weight") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            Tensor {
                name,
                shape,
                data,
                trainable: true,
            }
        })
        .collect();
    Ok(ModelState { tensors, seed })
}

/// Where a truncated forward pass stops (block indices are 0-based here).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Logits,
    /// Pre-projection concatenation of the heads of this block.
    AfterAttention(usize),
    /// Residual stream after this block.
    AfterBlock(usize),
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f64>,
    pre_act: Vec<f64>,
    pool_arg: Option<Vec<usize>>,
    side: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub qkv: Vec<f64>,
    /// Row-stochastic attention weights, one `T×T` matrix per head.
    pub weights: Vec<Vec<f64>>,
    /// Head outputs, contiguous per head: head `h` owns columns
    /// `[h·dim/H, (h+1)·dim/H)`.
    pub concat: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: ops::LayerNormCache,
    n1: Vec<f64>,
    attn: AttentionCache,
    ln2: ops::LayerNormCache,
    n2: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    out: Vec<f64>,
}

/// Everything a single-sample forward pass computed.
#[derive(Debug, Clone)]
pub struct SampleCache {
    conv: Vec<ConvCache>,
    blocks: Vec<BlockCache>,
    ln_final: Option<ops::LayerNormCache>,
    final_tokens: Vec<f64>,
    pool_weights: Vec<f64>,
    pooled: Vec<f64>,
    /// Tokens at the stop point (`T×dim`) for truncated passes.
    pub tap: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Output of [`attention_subblock`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub concat_heads: Vec<f64>,
    pub projected: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

/// Multi-head scaled dot-product attention on `tokens` (`T×dim`, already
/// normalized) followed by the output projection.
pub fn attention_subblock(tokens: &[f64], params: &BlockParams<'_>, heads: usize) -> Result<AttentionOutput> {
    let dim = params.proj_b.len();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config("heads", format!("{heads} heads do not divide dim {dim}")));
    }
    if tokens.is_empty() || !tokens.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "token matrix of {} values is not T×{dim}",
            tokens.len()
        )));
    }
    let t = tokens.len() / dim;
    let cache = attention_forward(tokens, params.qkv_w, t, dim, heads);
    let mut projected = ops::matmul(&cache.concat, params.proj_w, t, dim, dim);
    ops::add_row_bias(&mut projected, params.proj_b);
    Ok(AttentionOutput {
        concat_heads: cache.concat,
        projected,
        weights: cache.weights,
    })
}

fn head_slice(qkv: &[f64], t: usize, dim: usize, part: usize, h: usize, hs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * hs);
    for r in 0..t {
        let start = r * 3 * dim + part * dim + h * hs;
        out.extend_from_slice(&qkv[start..start + hs]);
    }
    out
}

fn attention_forward(n1: &[f64], qkv_w: &[f64], t: usize, dim: usize, heads: usize) -> AttentionCache {
    let hs = dim / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let qkv = ops::matmul(n1, qkv_w, t, dim, 3 * dim);
    let mut concat = vec![0.0; t * dim];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = head_slice(&qkv, t, dim, 0, h, hs);
        let k = head_slice(&qkv, t, dim, 1, h, hs);
        let v = head_slice(&qkv, t, dim, 2, h, hs);
        let mut s = vec![0.0; t * t];
        ops::matmul_nt_acc(&q, &k, &mut s, t, t, hs);
        for row in s.chunks_exact_mut(t) {
            row.iter_mut().for_each(|x| *x *= scale);
            ops::softmax_in_place(row);
        }
        let o = ops::matmul(&s, &v, t, t, hs);
        for r in 0..t {
            concat[r * dim + h * hs..r * dim + (h + 1) * hs].copy_from_slice(&o[r * hs..(r + 1) * hs]);
        }
        weights.push(s);
    }
    AttentionCache { qkv, weights, concat }
}

/// Returns d(n1); accumulates the qkv weight gradient.
fn attention_backward(
    dconcat: &[f64],
    cache: &AttentionCache,
    n1: &[f64],
    qkv_w: &[f64],
    dqkv_w: &mut [f64],
    t: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let hs = dim / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let mut dqkv = vec![0.0; t * 3 * dim];
    for h in 0..heads {
        let q = head_slice(&cache.qkv, t, dim, 0, h, hs);
        let k = head_slice(&cache.qkv, t, dim, 1, h, hs);
        let v = head_slice(&cache.qkv, t, dim, 2, h, hs);
        let a = &cache.weights[h];
        let mut d_o = Vec::with_capacity(t * hs);
        for r in 0..t {
            d_o.extend_from_slice(&dconcat[r * dim + h * hs..r * dim + (h + 1) * hs]);
        }
        let mut da = vec![0.0; t * t];
        ops::matmul_nt_acc(&d_o, &v, &mut da, t, t, hs);
        let mut dv = vec![0.0; t * hs];
        ops::matmul_tn_acc(a, &d_o, &mut dv, t, t, hs);
        for (prow, drow) in a.chunks_exact(t).zip(da.chunks_exact_mut(t)) {
            ops::softmax_backward_in_place(prow, drow);
            drow.iter_mut().for_each(|x| *x *= scale);
        }
        let mut dq = vec![0.0; t * hs];
        ops::matmul_acc(&da, &k, &mut dq, t, t, hs);
        let mut dk = vec![0.0; t * hs];
        ops::matmul_tn_acc(&da, &q, &mut dk, t, t, hs);
        for r in 0..t {
            for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                let start = r * 3 * dim + part * dim + h * hs;
                dqkv[start..start + hs].copy_from_slice(&src[r * hs..(r + 1) * hs]);
            }
        }
    }
    ops::matmul_tn_acc(n1, &dqkv, dqkv_w, t, dim, 3 * dim);
    let mut dn1 = vec![0.0; t * dim];
    ops::matmul_nt_acc(&dqkv, qkv_w, &mut dn1, t, dim, 3 * dim);
    dn1
}

/// Softmax-weighted pooling of `tokens` (`T×dim`). Returns the pooled
/// vector and the pooling weights (a convex combination over tokens).
pub fn sequence_pool(tokens: &[f64], pool_w: &[f64], pool_b: f64) -> (Vec<f64>, Vec<f64>) {
    let dim = pool_w.len();
    let mut a: Vec<f64> = tokens
        .chunks_exact(dim)
        .map(|row| ops::dot(row, pool_w) + pool_b)
        .collect();
    ops::softmax_in_place(&mut a);
    let mut pooled = vec![0.0; dim];
    for (row, &w) in tokens.chunks_exact(dim).zip(&a) {
        for (p, &x) in pooled.iter_mut().zip(row) {
            *p += w * x;
        }
    }
    (pooled, a)
}

/// Backward of [`sequence_pool`]: returns d(tokens), accumulates pool
/// weight and bias gradients.
pub fn sequence_pool_backward(
    dpooled: &[f64],
    tokens: &[f64],
    weights: &[f64],
    pool_w: &[f64],
    dpool_w: &mut [f64],
    dpool_b: &mut f64,
) -> Vec<f64> {
    let dim = pool_w.len();
    let mut dtokens = vec![0.0; tokens.len()];
    let mut ds: Vec<f64> = tokens.chunks_exact(dim).map(|row| ops::dot(row, dpooled)).collect();
    for (drow, &w) in dtokens.chunks_exact_mut(dim).zip(weights) {
        for (d, &g) in drow.iter_mut().zip(dpooled) {
            *d += w * g;
        }
    }
    ops::softmax_backward_in_place(weights, &mut ds);
    for ((row, drow), &s) in tokens.chunks_exact(dim).zip(dtokens.chunks_exact_mut(dim)).zip(&ds) {
        for j in 0..dim {
            dpool_w[j] += s * row[j];
            drow[j] += s * pool_w[j];
        }
        *dpool_b += s;
    }
    dtokens
}

/// Runs one image (`C×S×S`) up to `stop`.
pub fn forward_sample(model: &ModelState, spec: &ArchitectureSpec, image: &[f64], stop: Stop) -> SampleCache {
    let lay = Layout::new(spec);
    let k = spec.conv_kernel;
    let mut x = image.to_vec();
    let mut cin = spec.input_channels;
    let mut side = spec.input_size;
    let mut conv = Vec::with_capacity(spec.num_conv_layers);
    for (i, &cout) in spec.conv_channels.iter().enumerate() {
        let w = &model.tensors[lay.conv + 2 * i].data;
        let b = &model.tensors[lay.conv + 2 * i + 1].data;
        let cols = ops::im2col(&x, cin, side, k);
        let hw = side * side;
        let mut z = ops::matmul(w, &cols, cout, cin * k * k, hw);
        for (row, &bv) in z.chunks_exact_mut(hw).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        let (next, pool_arg, next_side) = if spec.pool_after.contains(&(i + 1)) {
            let (p, arg) = ops::max_pool(&act, cout, side);
            (p, Some(arg), crate::arch::pooled_side(side))
        } else {
            (act, None, side)
        };
        conv.push(ConvCache {
            cols,
            pre_act: z,
            pool_arg,
            side,
        });
        x = next;
        cin = cout;
        side = next_side;
    }
    let dim = spec.dim;
    let t = side * side;
    let mut tokens = ops::transpose(&x, dim, t);
    for (v, p) in tokens.iter_mut().zip(&model.tensors[lay.pos].data) {
        *v += p;
    }

    let mut blocks = Vec::with_capacity(spec.num_blocks);
    for b in 0..spec.num_blocks {
        let p = model.block_params(spec, b);
        let heads = spec.heads_per_block[b];
        let (n1, ln1) = ops::layer_norm(&tokens, p.norm1_w, p.norm1_b);
        let attn = attention_forward(&n1, p.qkv_w, t, dim, heads);
        if stop == Stop::AfterAttention(b) {
            return SampleCache::truncated(conv, blocks, attn.concat);
        }
        let mut x1 = ops::matmul(&attn.concat, p.proj_w, t, dim, dim);
        ops::add_row_bias(&mut x1, p.proj_b);
        for (v, r) in x1.iter_mut().zip(&tokens) {
            *v += r;
        }
        let (n2, ln2) = ops::layer_norm(&x1, p.norm2_w, p.norm2_b);
        let hid = p.fc1_b.len();
        let mut f1 = ops::matmul(&n2, p.fc1_w, t, dim, hid);
        ops::add_row_bias(&mut f1, p.fc1_b);
        let g: Vec<f64> = f1.iter().map(|&v| ops::gelu(v)).collect();
        let mut out = ops::matmul(&g, p.fc2_w, t, hid, dim);
        ops::add_row_bias(&mut out, p.fc2_b);
        for (v, r) in out.iter_mut().zip(&x1) {
            *v += r;
        }
        tokens = out.clone();
        blocks.push(BlockCache {
            ln1,
            n1,
            attn,
            ln2,
            n2,
            f1,
            g,
            out,
        });
        if stop == Stop::AfterBlock(b) {
            return SampleCache::truncated(conv, blocks, tokens);
        }
    }

    let h = lay.head;
    let (xf, ln_final) = ops::layer_norm(&tokens, &model.tensors[h].data, &model.tensors[h + 1].data);
    let (pooled, pool_weights) = sequence_pool(&xf, &model.tensors[h + 2].data, model.tensors[h + 3].data[0]);
    let mut logits = ops::matmul(&pooled, &model.tensors[h + 4].data, 1, dim, spec.num_labels);
    ops::add_row_bias(&mut logits, &model.tensors[h + 5].data);
    SampleCache {
        conv,
        blocks,
        ln_final: Some(ln_final),
        final_tokens: xf,
        pool_weights,
        pooled,
        tap: Vec::new(),
        logits,
    }
}

impl SampleCache {
    fn truncated(conv: Vec<ConvCache>, blocks: Vec<BlockCache>, tap: Vec<f64>) -> Self {
        SampleCache {
            conv,
            blocks,
            ln_final: None,
            final_tokens: Vec::new(),
            pool_weights: Vec::new(),
            pooled: Vec::new(),
            tap,
            logits: Vec::new(),
        }
    }
}

/// Accumulates parameter gradients of a full forward pass given
/// `dlogits = ∂loss/∂logits` into `grads` (indexed like `model.tensors`).
pub fn backward_sample(
    model: &ModelState,
    spec: &ArchitectureSpec,
    cache: &SampleCache,
    dlogits: &[f64],
    grads: &mut [Vec<f64>],
) {
    let lay = Layout::new(spec);
    let dim = spec.dim;
    let labels = spec.num_labels;
    let h = lay.head;
    let ln_final = cache.ln_final.as_ref().expect("backward needs a full forward pass");

    // classifier
    ops::matmul_tn_acc(&cache.pooled, dlogits, &mut grads[h + 4], 1, dim, labels);
    ops::col_sum_acc(dlogits, &mut grads[h + 5]);
    let mut dpooled = vec![0.0; dim];
    ops::matmul_nt_acc(dlogits, &model.tensors[h + 4].data, &mut dpooled, 1, dim, labels);

    // sequence pooling
    let mut dpool_b = 0.0;
    let dxf = {
        let (lo, hi) = grads.split_at_mut(h + 3);
        let d = sequence_pool_backward(
            &dpooled,
            &cache.final_tokens,
            &cache.pool_weights,
            &model.tensors[h + 2].data,
            &mut lo[h + 2],
            &mut dpool_b,
        );
        hi[0][0] += dpool_b;
        d
    };

    // final norm
    let mut dtokens = {
        let (lo, hi) = grads.split_at_mut(h + 1);
        ops::layer_norm_backward(&dxf, ln_final, &model.tensors[h].data, &mut lo[h], &mut hi[0])
    };

    let t = spec.num_tokens();
    for b in (0..spec.num_blocks).rev() {
        let p = model.block_params(spec, b);
        let c = &cache.blocks[b];
        let base = lay.blocks + BLOCK_TENSORS * b;
        let hid = p.fc1_b.len();
        let heads = spec.heads_per_block[b];

        // feedforward: out = x1 + fc2(gelu(fc1(n2)))
        let dout = &dtokens;
        ops::matmul_tn_acc(&c.g, dout, &mut grads[base + 9], t, hid, dim);
        ops::col_sum_acc(dout, &mut grads[base + 10]);
        let mut dg = vec![0.0; t * hid];
        ops::matmul_nt_acc(dout, p.fc2_w, &mut dg, t, hid, dim);
        for (d, &f) in dg.iter_mut().zip(&c.f1) {
            *d *= ops::gelu_grad(f);
        }
        ops::matmul_tn_acc(&c.n2, &dg, &mut grads[base + 7], t, dim, hid);
        ops::col_sum_acc(&dg, &mut grads[base + 8]);
        let mut dn2 = vec![0.0; t * dim];
        ops::matmul_nt_acc(&dg, p.fc1_w, &mut dn2, t, dim, hid);
        let dx1_norm = {
            let (lo, hi) = grads.split_at_mut(base + 6);
            ops::layer_norm_backward(&dn2, &c.ln2, p.norm2_w, &mut lo[base + 5], &mut hi[0])
        };
        let mut dx1 = dtokens.clone();
        for (d, v) in dx1.iter_mut().zip(&dx1_norm) {
            *d += v;
        }

        // attention: x1 = x + proj(attn(n1))
        ops::matmul_tn_acc(&c.attn.concat, &dx1, &mut grads[base + 3], t, dim, dim);
        ops::col_sum_acc(&dx1, &mut grads[base + 4]);
        let mut dconcat = vec![0.0; t * dim];
        ops::matmul_nt_acc(&dx1, p.proj_w, &mut dconcat, t, dim, dim);
        let dn1 = attention_backward(&dconcat, &c.attn, &c.n1, p.qkv_w, &mut grads[base + 2], t, dim, heads);
        let dx_norm = {
            let (lo, hi) = grads.split_at_mut(base + 1);
            ops::layer_norm_backward(&dn1, &c.ln1, p.norm1_w, &mut lo[base], &mut hi[0])
        };
        dtokens = dx1;
        for (d, v) in dtokens.iter_mut().zip(&dx_norm) {
            *d += v;
        }
    }

    // positional embedding
    for (g, d) in grads[lay.pos].iter_mut().zip(&dtokens) {
        *g += d;
    }

    // tokenizer, back to front
    let mut dx = ops::transpose(&dtokens, t, dim);
    let k = spec.conv_kernel;
    for i in (0..spec.num_conv_layers).rev() {
        let cc = &cache.conv[i];
        let cout = spec.conv_channels[i];
        let cin = if i == 0 {
            spec.input_channels
        } else {
            spec.conv_channels[i - 1]
        };
        let hw = cc.side * cc.side;
        let mut dz = match &cc.pool_arg {
            Some(arg) => ops::max_pool_backward(&dx, arg, cout * hw),
            None => dx,
        };
        for (d, &z) in dz.iter_mut().zip(&cc.pre_act) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        ops::matmul_nt_acc(&dz, &cc.cols, &mut grads[lay.conv + 2 * i], cout, cin * k * k, hw);
        for (g, row) in grads[lay.conv + 2 * i + 1].iter_mut().zip(dz.chunks_exact(hw)) {
            *g += row.iter().sum::<f64>();
        }
        if i == 0 {
            break;
        }
        let mut dcols = vec![0.0; cin * k * k * hw];
        ops::matmul_tn_acc(
            &model.tensors[lay.conv + 2 * i].data,
            &dz,
            &mut dcols,
            cout,
            cin * k * k,
            hw,
        );
        dx = ops::col2im(&dcols, cin, cc.side, k);
    }
}

/// Per-block activations captured by a traced forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Pre-projection concatenation of the head outputs (`T×dim`).
    pub concat_heads: Vec<f64>,
    /// Residual stream after the block (`T×dim`).
    pub post_block: Vec<f64>,
    /// Attention weights per head (`T×T`, row-stochastic).
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B×L`, row-major.
    pub logits: Vec<f64>,
    pub traces: Option<Vec<ForwardTrace>>,
}

pub(crate) fn check_batch(spec: &ArchitectureSpec, batch: &ImageBatch) -> Result<()> {
    if batch.channels != spec.input_channels || batch.size != spec.input_size {
        return Err(Error::Input(format!(
            "batch images are {}×{}×{}, architecture expects {}×{}×{}",
            batch.channels, batch.size, batch.size, spec.input_channels, spec.input_size, spec.input_size
        )));
    }
    if batch.data.len() != batch.count * batch.image_len() {
        return Err(Error::Input(
            "batch buffer length does not match its declared shape".into(),
        ));
    }
    Ok(())
}

/// Batched forward pass producing `B×L` logits, optionally with traces.
pub fn forward(model: &ModelState, spec: &ArchitectureSpec, batch: &ImageBatch, trace: bool) -> Result<ForwardOutput> {
    check_batch(spec, batch)?;
    let per: Vec<(Vec<f64>, Option<ForwardTrace>)> = (0..batch.count)
        .into_par_iter()
        .map(|i| {
            let cache = forward_sample(model, spec, batch.image(i), Stop::Logits);
            let tr = trace.then(|| ForwardTrace {
                blocks: cache
                    .blocks
                    .iter()
                    .map(|b| BlockTrace {
                        concat_heads: b.attn.concat.clone(),
                        post_block: b.out.clone(),
                        attention: b.attn.weights.clone(),
                    })
                    .collect(),
                logits: cache.logits.clone(),
            });
            (cache.logits, tr)
        })
        .collect();
    let mut logits = Vec::with_capacity(batch.count * spec.num_labels);
    let mut traces = trace.then(Vec::new);
    for (l, t) in per {
        logits.extend(l);
        if let (Some(ts), Some(t)) = (traces.as_mut(), t) {
            ts.push(t);
        }
    }
    Ok(ForwardOutput { logits, traces })
}

/// Top-1 labels for a `B×L` logit matrix; ties go to the lowest index.
pub fn argmax_rows(logits: &[f64], labels: usize) -> Vec<usize> {
    logits
        .chunks_exact(labels)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
