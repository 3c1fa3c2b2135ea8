//! Declarative CCT architecture descriptions.
//!
//! An [`ArchitectureSpec`] fully determines every tensor shape of a model.
//! Specs serialize to a plain `key = value` text file, one field per line.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Max-pool window used by the tokenizer (3x3, stride 2, padding 1).
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub num_conv_layers: usize,
    /// Square kernel side of every tokenizer convolution.
    pub conv_kernel: usize,
    /// Output channels of each convolutional layer; the last entry equals `dim`.
    pub conv_channels: Vec<usize>,
    /// 1-based indices of the convolutional layers followed by max pooling.
    pub pool_after: BTreeSet<usize>,
    pub num_blocks: usize,
    pub dim: usize,
    pub heads_per_block: Vec<usize>,
    pub ff_expansion: f64,
    pub num_labels: usize,
    pub input_size: usize,
    pub input_channels: usize,
}

impl ArchitectureSpec {
    /// A CCT with `num_conv_layers` CLs that all output `dim` channels,
    /// pooling after the first CL and `heads` heads in every block.
    pub fn uniform(
        num_conv_layers: usize,
        num_blocks: usize,
        dim: usize,
        heads: usize,
        num_labels: usize,
        input_size: usize,
    ) -> Self {
        ArchitectureSpec {
            num_conv_layers,
            conv_kernel: 3,
            conv_channels: vec![dim; num_conv_layers],
            pool_after: BTreeSet::from([1]),
            num_blocks,
            dim,
            heads_per_block: vec![heads; num_blocks],
            ff_expansion: 2.0,
            num_labels,
            input_size,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_conv_layers < 1 {
            return Err(Error::config(
                "num_conv_layers",
                "at least one convolutional layer is required",
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config(
                "conv_kernel",
                "kernel must be odd so same-padding preserves size",
            ));
        }
        if self.conv_channels.len() != self.num_conv_layers {
            return Err(Error::config(
                "conv_channels",
                format!(
                    "expected {} entries, found {}",
                    self.num_conv_layers,
                    self.conv_channels.len()
                ),
            ));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("conv_channels", "channel counts must be positive"));
        }
        if self.conv_channels.last() != Some(&self.dim) {
            return Err(Error::config(
                "conv_channels",
                "the last convolutional layer must output `dim` channels",
            ));
        }
        if let Some(&bad) = self.pool_after.iter().find(|&&i| i == 0 || i > self.num_conv_layers) {
            return Err(Error::config(
                "pool_after",
                format!("layer index {bad} is outside 1..={}", self.num_conv_layers),
            ));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.heads_per_block.len() != self.num_blocks {
            return Err(Error::config(
                "heads_per_block",
                format!(
                    "expected {} entries, found {}",
                    self.num_blocks,
                    self.heads_per_block.len()
                ),
            ));
        }
        for (i, &h) in self.heads_per_block.iter().enumerate() {
            if h == 0 || !self.dim.is_multiple_of(h) {
                return Err(Error::config(
                    "heads_per_block",
                    format!("block {} has {h} heads, which does not divide dim {}", i + 1, self.dim),
                ));
            }
        }
        if !(self.ff_expansion > 0.0) || self.ff_hidden() == 0 {
            return Err(Error::config("ff_expansion", "must give a positive hidden width"));
        }
        if self.num_labels < 2 {
            return Err(Error::config("num_labels", "at least two labels are required"));
        }
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be positive"));
        }
        Ok(())
    }

    /// Nodes per head in block `block` (0-based).
    pub fn head_size(&self, block: usize) -> usize {
        self.dim / self.heads_per_block[block]
    }

    pub fn ff_hidden(&self) -> usize {
        (self.dim as f64 * self.ff_expansion).round() as usize
    }

    /// Spatial side after conv layer `layer` (0-based), including its pooling.
    pub fn spatial_after(&self, layer: usize) -> usize {
        let mut side = self.input_size;
        for l in 0..=layer {
            if self.pool_after.contains(&(l + 1)) {
                side = pooled_side(side);
            }
        }
        side
    }

    /// Side of the square token grid produced by the tokenizer.
    ///
    /// Convolutions preserve the spatial size; each pooled layer maps a side
    /// `s` to `floor((s - 1) / 2) + 1`. A 32x32 input pooled once gives a
    /// 16x16 grid, so 256 tokens.
    pub fn token_grid(&self) -> usize {
        self.spatial_after(self.num_conv_layers - 1)
    }

    pub fn num_tokens(&self) -> usize {
        let g = self.token_grid();
        g * g
    }

    /// Total layer count: every CL, four layers per transformer block
    /// (attention, projection and two feedforward layers) and the final
    /// classifier layer.
    pub fn layer_latency(&self) -> usize {
        self.num_conv_layers + 4 * self.num_blocks + 1
    }

    pub fn parameter_count(&self) -> usize {
        crate::model::param_layout(self)
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    pub fn to_config_string(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "num_conv_layers = {}", self.num_conv_layers);
        let _ = writeln!(s, "conv_kernel = {}", self.conv_kernel);
        let _ = writeln!(s, "conv_channels = {}", join(&mut self.conv_channels.iter().copied()));
        let _ = writeln!(s, "pool_after = {}", join(&mut self.pool_after.iter().copied()));
        let _ = writeln!(s, "num_blocks = {}", self.num_blocks);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(
            s,
            "heads_per_block = {}",
            join(&mut self.heads_per_block.iter().copied())
        );
        let _ = writeln!(s, "ff_expansion = {}", self.ff_expansion);
        let _ = writeln!(s, "num_labels = {}", self.num_labels);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        s
    }

    /// Parses the `key = value` format written by [`to_config_string`].
    /// Blank lines and `#` comments are ignored; every field is required.
    ///
    /// [`to_config_string`]: ArchitectureSpec::to_config_string
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("line {}: expected `key = value`", lineno + 1)))?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let take =
            |key: &str| -> Result<String> { fields.get(key).cloned().ok_or_else(|| Error::config(key, "missing")) };
        let scalar = |key: &str| -> Result<usize> {
            take(key)?
                .parse()
                .map_err(|_| Error::config(key, "not a non-negative integer"))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            let v = take(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::config(key, format!("bad list entry `{x}`")))
                })
                .collect()
        };
        let spec = ArchitectureSpec {
            num_conv_layers: scalar("num_conv_layers")?,
            conv_kernel: scalar("conv_kernel")?,
            conv_channels: list("conv_channels")?,
            pool_after: list("pool_after")?.into_iter().collect(),
            num_blocks: scalar("num_blocks")?,
            dim: scalar("dim")?,
            heads_per_block: list("heads_per_block")?,
            ff_expansion: take("ff_expansion")?
                .parse()
                .map_err(|_| Error::config("ff_expansion", "not a number"))?,
            num_labels: scalar("num_labels")?,
            input_size: scalar("input_size")?,
            input_channels: scalar("input_channels")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Stable digest of the config text, used to tag checkpoints and outputs.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Looks up a named preset (see [`PRESETS`]).
    pub fn preset(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (base, tiny) = match lower.strip_suffix("-tiny") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let mut spec = match base {
            "cct-7/3x1" => ArchitectureSpec::uniform(1, 7, 256, 4, 100, 32),
            "cct-7/3x1-h8" | "cct-7/3x1-h16" | "cct-7/3x1-h32" => {
                let last: usize = base
                    .rsplit('h')
                    .next()
                    .and_then(|h| h.parse().ok())
                    .expect("suffix parsed above");
                let mut s = ArchitectureSpec::uniform(1, 7, 256, 4, 100, 32);
                s.heads_per_block[6] = last;
                s
            }
            "cct-2/3x5" => {
                let mut s = ArchitectureSpec::uniform(5, 2, 256, 16, 100, 32);
                s.conv_channels = vec![64, 64, 64, 64, 256];
                s
            }
            "cct-2/3x2" => {
                let mut s = ArchitectureSpec::uniform(2, 2, 512, 32, 100, 32);
                s.conv_channels = vec![64, 512];
                s.pool_after = BTreeSet::from([1, 2]);
                s
            }
            "cct-1/3x1" => ArchitectureSpec::uniform(1, 1, 256, 16, 100, 32),
            "cct-1/3x2" => {
                let mut s = ArchitectureSpec::uniform(2, 1, 1024, 64, 100, 32);
                s.conv_channels = vec![64, 1024];
                s.pool_after = BTreeSet::from([1, 2]);
                s
            }
            _ => return Err(Error::config("arch", format!("unknown preset `{name}`"))),
        };
        if tiny {
            spec = spec.shrink();
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale shrink: dim 32, 10 labels, 16x16 inputs, 4 heads per block
    /// and intermediate CLs at 16 channels. A last block whose head count
    /// differs from the first block's (the H(7) variants) keeps its count.
    fn shrink(mut self) -> Self {
        const TINY_DIM: usize = 32;
        let first = self.heads_per_block.first().copied();
        self.heads_per_block = self
            .heads_per_block
            .iter()
            .map(|&h| if Some(h) == first { 4 } else { h.min(TINY_DIM) })
            .collect();
        let n = self.conv_channels.len();
        self.conv_channels = (0..n).map(|i| if i + 1 == n { TINY_DIM } else { 16 }).collect();
        self.dim = TINY_DIM;
        self.num_labels = 10;
        self.input_size = 16;
        self
    }
}

/// Names accepted by [`ArchitectureSpec::preset`]; each also has a `-tiny` form.
pub const PRESETS: &[&str] = &[
    "cct-7/3x1",
    "cct-7/3x1-h8",
    "cct-7/3x1-h16",
    "cct-7/3x1-h32",
    "cct-2/3x5",
    "cct-2/3x2",
    "cct-1/3x1",
    "cct-1/3x2",
];

pub(crate) fn pooled_side(side: usize) -> usize {
    (side + 2 * POOL_PADDING - POOL_KERNEL) / POOL_STRIDE + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cct_7_3x1_has_head_size_64_and_256_tokens() {
        let s = ArchitectureSpec::preset("cct-7/3x1").unwrap();
        assert_eq!(s.num_blocks, 7);
        assert!((0..7).all(|b| s.head_size(b) == 64));
        assert_eq!(s.num_tokens(), 256);
    }

    #[test]
    fn layer_latency_matches_reported_counts() {
        let cases = [
            ("cct-7/3x1", 30),
            ("cct-2/3x5", 14),
            ("cct-2/3x2", 11),
            ("cct-1/3x1", 6),
            ("cct-1/3x2", 7),
        ];
        for (name, expected) in cases {
            assert_eq!(
                ArchitectureSpec::preset(name).unwrap().layer_latency(),
                expected,
                "{name}"
            );
        }
    }

    #[test]
    fn non_divisible_dim_is_rejected_naming_the_field() {
        let mut s = ArchitectureSpec::uniform(1, 2, 30, 4, 10, 16);
        s.heads_per_block = vec![4, 4];
        match s.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads_per_block"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heads_list_must_match_block_count() {
        let mut s = ArchitectureSpec::uniform(1, 2, 32, 4, 10, 16);
        s.heads_per_block.pop();
        assert!(matches!(s.validate(), Err(Error::Config { ref field, .. }) if field == "heads_per_block"));
    }

    #[test]
    fn config_round_trip() {
        for name in PRESETS {
            let s = ArchitectureSpec::preset(name).unwrap();
            let back = ArchitectureSpec::from_config_str(&s.to_config_string()).unwrap();
            assert_eq!(s, back);
            let tiny = ArchitectureSpec::preset(&format!("{name}-tiny")).unwrap();
            assert_eq!(tiny.dim, 32);
            assert_eq!(tiny.num_labels, 10);
            assert_eq!(tiny.layer_latency(), s.layer_latency());
        }
    }

    #[test]
    fn zero_blocks_parses_with_empty_heads_list() {
        let s = ArchitectureSpec::uniform(1, 0, 16, 1, 10, 8);
        let text = s.to_config_string();
        assert!(text.contains("heads_per_block = \n"));
        assert_eq!(ArchitectureSpec::from_config_str(&text).unwrap(), s);
    }

    #[test]
    fn missing_field_is_named() {
        let text = ArchitectureSpec::preset("cct-1/3x1")
            .unwrap()
            .to_config_string()
            .replace("dim = 256\n", "");
        assert!(
            matches!(ArchitectureSpec::from_config_str(&text), Err(Error::Config { ref field, .. }) if field == "dim")
        );
    }

    #[test]
    fn pooling_placement_drives_token_count() {
        assert_eq!(ArchitectureSpec::preset("cct-2/3x2").unwrap().num_tokens(), 64);
        assert_eq!(ArchitectureSpec::preset("cct-2/3x5").unwrap().num_tokens(), 256);
        assert_eq!(ArchitectureSpec::preset("cct-1/3x1-tiny").unwrap().num_tokens(), 64);
        let mut s = ArchitectureSpec::uniform(1, 1, 16, 2, 10, 8);
        s.pool_after.clear();
        assert_eq!(s.num_tokens(), 64);
    }
}
