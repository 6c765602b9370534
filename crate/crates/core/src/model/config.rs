use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One Conv2d → BN → ReLU block of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvBlockConfig {
    pub const fn new(filters: usize, kernel: usize, padding: usize, stride: usize) -> Self {
        ConvBlockConfig {
            filters,
            kernel: (kernel, kernel),
            padding: (padding, padding),
            stride: (stride, stride),
        }
    }

    /// Output spatial extent for an `(h, w)` input, or `None` when the
    /// padded input is smaller than the kernel.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcnConfig {
    pub blocks: Vec<ConvBlockConfig>,
}

impl Default for FcnConfig {
    fn default() -> Self {
        FcnConfig {
            blocks: vec![
                ConvBlockConfig::new(128, 8, 3, 4),
                ConvBlockConfig::new(256, 5, 2, 2),
                ConvBlockConfig::new(128, 3, 1, 1),
            ],
        }
    }
}

/// Parallel attention block sizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaConfig {
    /// SE bottleneck ratio `r`; the hidden layer has `C / r` units.
    pub reduction_ratio: usize,
    /// Query/key channels are `C / c1_divisor`.
    pub c1_divisor: usize,
    /// Value channels are `C / c2_divisor`.
    pub c2_divisor: usize,
}

impl Default for PaConfig {
    fn default() -> Self {
        PaConfig {
            reduction_ratio: 16,
            c1_divisor: 8,
            c2_divisor: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature rows per window (power, minute of day, day of week).
    pub input_features: usize,
    /// Time steps per window.
    pub window: usize,
    pub classes: usize,
    pub fcn: FcnConfig,
    pub pa: PaConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub sn_eps: f64,
    /// Power-iteration steps per training forward.
    pub sn_power_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_features: 3,
            window: 60,
            classes: 2,
            fcn: FcnConfig::default(),
            pa: PaConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            sn_eps: 1e-12,
            sn_power_iterations: 1,
        }
    }
}

impl ModelConfig {
    /// Channels entering the attention block.
    pub fn channels(&self) -> usize {
        self.fcn.blocks.last().map_or(1, |b| b.filters)
    }

    pub fn se_hidden(&self) -> usize {
        self.channels() / self.pa.reduction_ratio
    }

    pub fn qk_channels(&self) -> usize {
        self.channels() / self.pa.c1_divisor
    }

    pub fn value_channels(&self) -> usize {
        self.channels() / self.pa.c2_divisor
    }

    /// `[C, F, T]` after every FCN block, starting from the input.
    pub fn shape_chain(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![[1, self.input_features, self.window]];
        let (mut h, mut w) = (self.input_features, self.window);
        for (i, b) in self.fcn.blocks.iter().enumerate() {
            let (oh, ow) = b.output_extent(h, w).ok_or_else(|| {
                Error::Model(format!(
                    "block {} kernel {:?} does not fit a {h}x{w} input with padding {:?}",
                    i + 1,
                    b.kernel,
                    b.padding
                ))
            })?;
            shapes.push([b.filters, oh, ow]);
            h = oh;
            w = ow;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fcn.blocks.is_empty() {
            return Err(Error::Model("at least one FCN block is required".into()));
        }
        if self.classes < 2 {
            return Err(Error::Model("at least two classes are required".into()));
        }
        let c = self.channels();
        let pa = self.pa;
        for (name, d) in [
            ("reduction ratio", pa.reduction_ratio),
            ("query/key divisor", pa.c1_divisor),
            ("value divisor", pa.c2_divisor),
        ] {
            if d == 0 || !c.is_multiple_of(d) || c / d == 0 {
                return Err(Error::Model(format!(
                    "{c} channels are not divisible by the {name} {d}"
                )));
            }
        }
        if self.sn_power_iterations == 0 {
            return Err(Error::Model("power iteration count must be positive".into()));
        }
        self.shape_chain().map(|_| ())
    }
}
