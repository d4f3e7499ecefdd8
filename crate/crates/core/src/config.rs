//! Model architecture configuration.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::Error;
use crate::Result;

/// How the regression head turns per-level summaries into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Concatenate the per-level cls tokens and apply one affine map.
    ConcatCls,
    /// Per-level affine heads whose outputs are averaged over present levels.
    PerLevelAverage,
}

impl HeadMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadMode::ConcatCls => "concat-cls",
            HeadMode::PerLevelAverage => "per-level-average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat-cls" => Ok(HeadMode::ConcatCls),
            "per-level-average" => Ok(HeadMode::PerLevelAverage),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

/// Cross-level token mixing stage, or one of its ablation substitutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMixMode {
    /// Pairwise cross-level attention with learnable mixing scalars.
    Ctmm,
    /// Concatenate all sequences along tokens, run one shared self-attention,
    /// split back.
    Concat,
    /// Add the mean-pooled summaries of the other levels to each sequence.
    Sum,
    /// No cross-level token mixing at all.
    None,
}

impl CrossMixMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CrossMixMode::Ctmm => "ctmm",
            CrossMixMode::Concat => "concat",
            CrossMixMode::Sum => "sum",
            CrossMixMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ctmm" => Ok(CrossMixMode::Ctmm),
            "concat" => Ok(CrossMixMode::Concat),
            "sum" => Ok(CrossMixMode::Sum),
            "none" => Ok(CrossMixMode::None),
            other => Err(Error::Config(format!("unknown cross-mix mode `{other}`"))),
        }
    }
}

/// All architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input patch height/width in pixels.
    pub image_h: usize,
    pub image_w: usize,
    /// Base patch size `p`; higher levels also use p/2 and p/4.
    pub p: usize,
    /// Embedding channels.
    pub channels: usize,
    /// Encoder repeats.
    pub depth: usize,
    /// Self-attention heads in the per-level blocks.
    pub heads: usize,
    /// Number of regressed genes.
    pub genes: usize,
    /// Which pyramid levels feed the model (sorted, unique).
    pub levels_enabled: Vec<usize>,
    /// Attention-entry drop probability during training.
    pub mask_prob: f64,
    /// Squeeze-and-excitation reduction ratio of the channel-mixing stage.
    pub se_ratio: usize,
    pub head_mode: HeadMode,
    /// Ablation switches.
    pub use_dpe: bool,
    pub decoupled_itmm: bool,
    pub cross_mix: CrossMixMode,
    pub use_ccmm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 224,
            image_w: 224,
            p: 16,
            channels: 192,
            depth: 4,
            heads: 3,
            genes: 250,
            levels_enabled: vec![0, 1, 2],
            mask_prob: 0.1,
            se_ratio: 4,
            head_mode: HeadMode::ConcatCls,
            use_dpe: true,
            decoupled_itmm: true,
            cross_mix: CrossMixMode::Ctmm,
            use_ccmm: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            p: 16,
            channels: 8,
            depth: 1,
            heads: 1,
            genes: 4,
            mask_prob: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Number of input streams.
    pub fn level_count(&self) -> usize {
        self.levels_enabled.len()
    }

    /// Tokens per unit: `L = H * W / p^2`.
    pub fn tokens_per_unit(&self) -> usize {
        (self.image_h / self.p) * (self.image_w / self.p)
    }

    /// Sequence length of pyramid level `level` before the cls token.
    pub fn tokens_of_level(&self, level: usize) -> usize {
        if self.use_dpe {
            (level + 1) * self.tokens_per_unit()
        } else {
            self.tokens_per_unit()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels_enabled.is_empty() {
            return Err(Error::Config("levels_enabled must not be empty".into()));
        }
        let mut sorted = self.levels_enabled.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.levels_enabled {
            return Err(Error::Config(format!(
                "levels_enabled must be sorted and unique, got {:?}",
                self.levels_enabled
            )));
        }
        if self.level_count() > 4 || *sorted.last().unwrap() > 3 {
            return Err(Error::Config(format!(
                "at most 4 levels (0..=3) are supported, got {:?}",
                self.levels_enabled
            )));
        }
        if self.genes == 0 {
            return Err(Error::Config("gene count must be at least 1".into()));
        }
        if self.p == 0 || self.image_h % self.p != 0 || self.image_w % self.p != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image {}x{}",
                self.p, self.image_h, self.image_w
            )));
        }
        if self.use_dpe {
            // Level l tiles the central region at p / 2^l; every granularity
            // must stay integral and aligned.
            let max_level = *sorted.last().unwrap();
            let needed = 1usize << max_level;
            if self.p % needed != 0 {
                return Err(Error::Config(format!(
                    "patch size {} must be divisible by {} for level {}",
                    self.p, needed, max_level
                )));
            }
            if self.image_h % needed != 0 || self.image_w % needed != 0 {
                return Err(Error::Config(format!(
                    "image {}x{} must be divisible by {} for level {}",
                    self.image_h, self.image_w, needed, max_level
                )));
            }
        }
        if self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.use_ccmm {
            let mc = self.level_count() * self.channels;
            if self.se_ratio == 0 || mc % self.se_ratio != 0 {
                return Err(Error::Config(format!(
                    "levels*channels {mc} must be divisible by se_ratio {}",
                    self.se_ratio
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1)", self.mask_prob)));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical one-line rendering; the run fingerprint is derived from it.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let levels: Vec<String> = self.levels_enabled.iter().map(|l| format!("{l}")).collect();
        let _ = write!(
            s,
            "image={}x{} p={} channels={} depth={} heads={} genes={} levels={} mask_prob={} se_ratio={} head={} dpe={} decoupled_itmm={} cross_mix={} ccmm={}",
            self.image_h,
            self.image_w,
            self.p,
            self.channels,
            self.depth,
            self.heads,
            self.genes,
            levels.join(","),
            self.mask_prob,
            self.se_ratio,
            self.head_mode.as_str(),
            self.use_dpe,
            self.decoupled_itmm,
            self.cross_mix.as_str(),
            self.use_ccmm
        );
        s
    }

    /// Short hash of the canonical configuration.
    pub fn fingerprint(&self) -> String {
        crate::rng::fingerprint(&self.canonical_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_unit(), 196);
        assert_eq!(c.tokens_of_level(0), 196);
        assert_eq!(c.tokens_of_level(1), 392);
        assert_eq!(c.tokens_of_level(2), 588);
    }

    #[test]
    fn rejects_indivisible_patch_size() {
        let c = ModelConfig { image_h: 100, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_config_changes() {
        let a = ModelConfig::default();
        let b = ModelConfig { depth: 3, ..ModelConfig::default() };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), ModelConfig::default().fingerprint());
    }
}
