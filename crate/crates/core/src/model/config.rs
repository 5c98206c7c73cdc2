use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vn::NormKind;

/// One backbone stage: FPS down to `points`, widen to `channels`, then
/// `resmlp` residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub points: usize,
    pub channels: usize,
    pub resmlp: usize,
}

impl StageConfig {
    pub const fn new(points: usize, channels: usize, resmlp: usize) -> Self {
        Self { points, channels, resmlp }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Neighbors of the input edge convolution.
    pub k0: usize,
    /// Channels of the input embedding.
    pub embed_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Neighbors used by set abstraction and residual grouping.
    pub k_group: usize,
    /// Observed anchors `N`.
    pub observed: usize,
    /// Missing anchors `M`.
    pub missing: usize,
    /// Anchor feature channels.
    pub channels: usize,
    /// Global feature channels `C_g`.
    pub global_channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Neighbors of the query embedding.
    pub k_query: usize,
    pub points_per_anchor: usize,
    /// Width of the dense (invariant) MLPs.
    pub hidden: usize,
    pub norm: NormKind,
    /// Use the equivariant VN bias in feature MLPs.
    pub vn_bias: bool,
}

impl ModelConfig {
    /// Smallest configuration that exercises every module; used by tests.
    pub fn tiny() -> Self {
        Self {
            k0: 8,
            embed_channels: 8,
            stages: vec![StageConfig::new(32, 8, 1), StageConfig::new(16, 16, 1), StageConfig::new(8, 16, 1)],
            k_group: 8,
            observed: 8,
            missing: 8,
            channels: 16,
            global_channels: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            k_query: 4,
            points_per_anchor: 2,
            hidden: 32,
            norm: NormKind::Zca,
            vn_bias: true,
        }
    }

    /// [`ModelConfig::tiny`] with 8 points per anchor (128 output points), for quick training runs.
    pub fn toy() -> Self {
        Self { points_per_anchor: 8, ..Self::tiny() }
    }

    /// CPU-trainable default: 256-point partials, 32 + 32 anchors, 2048 output points.
    pub fn desk() -> Self {
        Self {
            k0: 16,
            embed_channels: 16,
            stages: vec![StageConfig::new(128, 32, 1), StageConfig::new(64, 64, 1), StageConfig::new(32, 64, 1)],
            k_group: 16,
            observed: 32,
            missing: 32,
            channels: 64,
            global_channels: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            k_query: 8,
            points_per_anchor: 32,
            hidden: 128,
            norm: NormKind::Zca,
            vn_bias: true,
        }
    }

    /// Full-size layout: 128 + 128 anchors, 4 encoder and 6 decoder blocks, 8192 output points.
    pub fn full() -> Self {
        Self {
            stages: vec![StageConfig::new(512, 32, 1), StageConfig::new(256, 64, 1), StageConfig::new(128, 64, 1)],
            observed: 128,
            missing: 128,
            global_channels: 128,
            encoder_layers: 4,
            decoder_layers: 6,
            hidden: 256,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "toy" => Some(Self::toy()),
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn anchors(&self) -> usize {
        self.observed + self.missing
    }

    pub fn output_points(&self) -> usize {
        self.anchors() * self.points_per_anchor
    }

    /// Offsets emitted around each coarse seed by the refinement head.
    pub fn refine_spread(&self) -> usize {
        match self.points_per_anchor {
            p if p % 4 == 0 => 4,
            p if p % 2 == 0 => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Precondition(format!("invalid model config: {msg}")));
        if self.observed == 0 || self.missing == 0 {
            return fail("observed and missing anchor counts must be at least 1".into());
        }
        if self.decoder_layers == 0 {
            return fail("at least one decoder block is required".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if self.channels / self.heads < 3 || self.global_channels < 3 {
            return fail("every attention head and the global feature need at least 3 channels for a full-rank frame".into());
        }
        if self.stages.is_empty() {
            return fail("at least one backbone stage is required".into());
        }
        if self.stages.last().map(|s| s.points) != Some(self.observed) {
            return fail(format!("final stage must downsample to the {} observed anchors", self.observed));
        }
        if self.stages.windows(2).any(|w| w[1].points > w[0].points) {
            return fail("stage sizes must be non-increasing".into());
        }
        let widths = [self.embed_channels, self.channels, self.global_channels, self.hidden];
        if widths.contains(&0) || self.stages.iter().any(|s| s.channels == 0) {
            return fail("channel widths must be positive".into());
        }
        if self.k0 == 0 || self.k_group == 0 || self.k_query == 0 {
            return fail("neighbor counts must be positive".into());
        }
        if self.points_per_anchor == 0 {
            return fail("points_per_anchor must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
