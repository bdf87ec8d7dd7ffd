use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{MFCC_DIM, WINDOW_FRAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
}

/// One convolution + ReLU, optionally followed by max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<PoolSpec>,
}

impl ConvLayerSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize, pad: usize, pool: Option<PoolSpec>) -> Self {
        ConvLayerSpec {
            filters,
            kernel,
            stride,
            pad,
            pool,
        }
    }
}

const fn pool(size: usize, stride: usize) -> Option<PoolSpec> {
    Some(PoolSpec { size, stride })
}

/// Network geometry. The Spell cell size is always the sum of the two
/// encoder cell sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvLayerSpec>,
    /// Width of the fully connected layer closing the conv stack.
    pub visual_dim: usize,
    pub watch_hidden: usize,
    pub watch_layers: usize,
    pub listen_hidden: usize,
    pub listen_layers: usize,
    pub spell_layers: usize,
    pub attention_dim: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub peephole: bool,
    pub dropout: f64,
    pub init_scale: f64,
}

impl ModelConfig {
    /// Full-size network: 120×120 input, the five-conv stack with fc6 = 512,
    /// three-layer encoders of 256 and a three-layer decoder of 512.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            input_height: 120,
            input_width: 120,
            conv: vec![
                ConvLayerSpec::new(96, 3, 1, 0, pool(3, 2)),
                ConvLayerSpec::new(256, 3, 2, 0, pool(3, 2)),
                ConvLayerSpec::new(512, 3, 1, 1, None),
                ConvLayerSpec::new(512, 3, 1, 1, None),
                ConvLayerSpec::new(512, 3, 1, 1, pool(3, 2)),
            ],
            visual_dim: 512,
            watch_hidden: 256,
            watch_layers: 3,
            listen_hidden: 256,
            listen_layers: 3,
            spell_layers: 3,
            attention_dim: 256,
            embed_dim: 16,
            mlp_hidden: 256,
            peephole: true,
            dropout: 0.1,
            init_scale: 0.08,
        }
    }

    /// Desk-scale default for 32×32 frames.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            input_height: 32,
            input_width: 32,
            conv: vec![
                ConvLayerSpec::new(16, 3, 1, 1, pool(2, 2)),
                ConvLayerSpec::new(32, 3, 1, 1, pool(2, 2)),
                ConvLayerSpec::new(32, 3, 1, 1, pool(2, 2)),
            ],
            visual_dim: 128,
            watch_hidden: 64,
            watch_layers: 2,
            listen_hidden: 64,
            listen_layers: 2,
            spell_layers: 2,
            attention_dim: 64,
            embed_dim: 16,
            mlp_hidden: 128,
            peephole: true,
            dropout: 0.1,
            init_scale: 0.08,
        }
    }

    /// Small single-layer network for `height × width` frames, sized for
    /// fast CPU training runs.
    pub fn tiny(vocab_size: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            vocab_size,
            input_height: height,
            input_width: width,
            conv: vec![
                ConvLayerSpec::new(8, 3, 1, 1, pool(2, 2)),
                ConvLayerSpec::new(8, 3, 1, 1, pool(2, 2)),
            ],
            visual_dim: 32,
            watch_hidden: 32,
            watch_layers: 1,
            listen_hidden: 32,
            listen_layers: 1,
            spell_layers: 1,
            attention_dim: 32,
            embed_dim: 16,
            mlp_hidden: 64,
            peephole: true,
            dropout: 0.1,
            init_scale: 0.08,
        }
    }

    /// Minimal network for finite-difference checks: decoder cell 8.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            input_height: 6,
            input_width: 6,
            conv: vec![ConvLayerSpec::new(2, 3, 1, 0, pool(2, 2))],
            visual_dim: 3,
            watch_hidden: 4,
            watch_layers: 1,
            listen_hidden: 4,
            listen_layers: 1,
            spell_layers: 1,
            attention_dim: 3,
            embed_dim: 3,
            mlp_hidden: 5,
            peephole: true,
            dropout: 0.0,
            init_scale: 0.5,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, height: usize, width: usize) -> Result<Self> {
        let cfg = match name {
            "full" => ModelConfig::full(vocab_size),
            "desk" => ModelConfig {
                input_height: height,
                input_width: width,
                ..ModelConfig::desk(vocab_size)
            },
            "tiny" => ModelConfig::tiny(vocab_size, height, width),
            other => return Err(Error::Config(format!("unknown model preset '{other}' (full, desk, tiny)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn spell_hidden(&self) -> usize {
        self.watch_hidden + self.listen_hidden
    }

    pub fn audio_dim(&self) -> usize {
        MFCC_DIM
    }

    /// Decoder layer-1 input: embedding plus both previous contexts.
    pub fn spell_input_dim(&self) -> usize {
        self.embed_dim + self.watch_hidden + self.listen_hidden
    }

    /// Spatial output `[C, H, W]` of every conv layer, in order.
    pub fn conv_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = [WINDOW_FRAMES, self.input_height, self.input_width];
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, l) in self.conv.iter().enumerate() {
            let fits = |n: usize, k: usize| n + 2 * l.pad >= k;
            if l.kernel == 0 || l.stride == 0 || !fits(shape[1], l.kernel) || !fits(shape[2], l.kernel) {
                return Err(Error::Config(format!("conv layer {i} does not fit input {shape:?}")));
            }
            let conv = |n: usize| (n + 2 * l.pad - l.kernel) / l.stride + 1;
            shape = [l.filters, conv(shape[1]), conv(shape[2])];
            if let Some(p) = l.pool {
                if p.size == 0 || p.stride == 0 || shape[1] < p.size || shape[2] < p.size {
                    return Err(Error::Config(format!("pool after conv layer {i} does not fit {shape:?}")));
                }
                let pooled = |n: usize| (n - p.size) / p.stride + 1;
                shape = [shape[0], pooled(shape[1]), pooled(shape[2])];
            }
            out.push(shape);
        }
        Ok(out)
    }

    /// Flattened conv output feeding the fully connected layer.
    pub fn conv_flat_dim(&self) -> Result<usize> {
        let last = self
            .conv_shapes()?
            .last()
            .copied()
            .unwrap_or([WINDOW_FRAMES, self.input_height, self.input_width]);
        Ok(last.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("visual_dim", self.visual_dim),
            ("watch_hidden", self.watch_hidden),
            ("watch_layers", self.watch_layers),
            ("listen_hidden", self.listen_hidden),
            ("listen_layers", self.listen_layers),
            ("spell_layers", self.spell_layers),
            ("attention_dim", self.attention_dim),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::Config(format!("init_scale {} must be positive", self.init_scale)));
        }
        self.conv_flat_dim()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_geometry_recomputed_from_layer_list() {
        let cfg = ModelConfig::full(46);
        let shapes = cfg.conv_shapes().unwrap();
        let sizes: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        // conv1 118 -> pool 58, conv2 28 -> pool 13, conv3..5 13 -> pool 6
        assert_eq!(sizes, vec![58, 13, 13, 13, 6]);
        assert_eq!(cfg.conv_flat_dim().unwrap(), 512 * 6 * 6);
        assert_eq!(cfg.spell_hidden(), 512);
    }

    #[test]
    fn presets_validate() {
        for name in ["full", "desk", "tiny"] {
            ModelConfig::preset(name, 46, 32, 32).unwrap();
        }
        ModelConfig::micro(6).validate().unwrap();
        assert!(ModelConfig::preset("huge", 46, 32, 32).is_err());
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut cfg = ModelConfig::tiny(46, 4, 4);
        cfg.conv[1].kernel = 5;
        assert!(cfg.validate().is_err());
    }
}
