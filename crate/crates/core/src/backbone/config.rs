use serde::{Deserialize, Serialize};

use crate::tensor::ParamGroup;
use crate::{Error, Result};

/// Geometry of the volumetric transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input cube side `D` in voxels.
    pub side: usize,
    /// Patch side `p`.
    pub patch: usize,
    /// Token width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Number of transformer blocks `L`.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Channels of every decoder stage.
    pub dec_channels: usize,
    /// Channels produced by the voxelwise input skip path.
    pub skip_channels: usize,
    /// Hidden width of the per-voxel classifier.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            side: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            classes: 3,
            dec_channels: 8,
            skip_channels: 8,
            head_hidden: 16,
        }
    }

    /// Full-size geometry, used for parameter arithmetic only.
    pub fn reference_geometry() -> Self {
        ModelConfig {
            side: 96,
            patch: 16,
            dim: 768,
            heads: 12,
            depth: 12,
            mlp_ratio: 4,
            classes: 3,
            dec_channels: 16,
            skip_channels: 16,
            head_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.patch == 0 || self.side % self.patch != 0 {
            return fail(format!("side {} is not divisible by patch {}", self.side, self.patch));
        }
        if self.patch % 8 != 0 {
            return fail(format!("patch {} must be a multiple of 8 for the decoder", self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.depth % 4 != 0 {
            return fail(format!("depth {} must be a positive multiple of 4", self.depth));
        }
        if self.classes < 2 || self.mlp_ratio == 0 || self.dec_channels == 0 || self.skip_channels == 0 || self.head_hidden == 0 {
            return fail("classes >= 2 and every width must be positive".into());
        }
        Ok(())
    }

    /// Tokens per side, `D / p`.
    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    /// Tokens per modality, `N = (D/p)^3`.
    pub fn tokens(&self) -> usize {
        self.grid().pow(3)
    }

    pub fn voxels(&self) -> usize {
        self.side.pow(3)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.pow(3)
    }

    /// Zero-based block indices tapped by the decoder, shallowest first:
    /// blocks `L/4, L/2, 3L/4, L`.
    pub fn taps(&self) -> [usize; 4] {
        let q = self.depth / 4;
        [q - 1, 2 * q - 1, 3 * q - 1, 4 * q - 1]
    }

    /// De-patching factor of decoder stage `j` (0 = deepest tap).
    pub fn stage_factor(&self, j: usize) -> usize {
        self.patch >> (3 - j)
    }
}

/// How a parameter is initialised when a model is built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Gaussian with standard deviation `1/sqrt(fan_in)` (last axis).
    FanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, group: ParamGroup, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            group,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize, group: ParamGroup) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), [rows, cols], group, Init::FanIn));
    out.push(ParamSpec::new(format!("{prefix}.bias"), [rows], group, Init::Zeros));
}

/// Patch embedding `tag` with `c_in` input channels.
pub fn embedding_specs(cfg: &ModelConfig, tag: &str, c_in: usize, group: ParamGroup) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    linear_specs(&mut v, &format!("embed.{tag}"), cfg.dim, c_in * cfg.patch_voxels(), group);
    v.push(ParamSpec::new(format!("embed.{tag}.pos"), [cfg.tokens(), cfg.dim], group, Init::Normal(0.02)));
    v
}

pub fn skip_specs(cfg: &ModelConfig, tag: &str, c_in: usize, group: ParamGroup) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    linear_specs(&mut v, &format!("skip.{tag}"), cfg.skip_channels, c_in, group);
    v
}

/// Transformer blocks, decoder and classifier: everything but the input stem.
pub fn trunk_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let g = ParamGroup::Base;
    let d = cfg.dim;
    let mut v = Vec::new();
    for l in 0..cfg.depth {
        let b = format!("blocks.{l}");
        for ln in ["ln1", "ln2"] {
            v.push(ParamSpec::new(format!("{b}.{ln}.gamma"), [d], g, Init::Ones));
            v.push(ParamSpec::new(format!("{b}.{ln}.beta"), [d], g, Init::Zeros));
        }
        for t in ["q", "k", "v", "o"] {
            linear_specs(&mut v, &format!("{b}.attn.{t}"), d, d, g);
        }
        linear_specs(&mut v, &format!("{b}.mlp.fc1"), cfg.mlp_ratio * d, d, g);
        linear_specs(&mut v, &format!("{b}.mlp.fc2"), d, cfg.mlp_ratio * d, g);
    }
    let c = cfg.dec_channels;
    for j in 0..4 {
        let q = cfg.stage_factor(j);
        linear_specs(&mut v, &format!("dec.tap{j}"), q * q * q * c, d, g);
        if j > 0 {
            linear_specs(&mut v, &format!("dec.mix{j}"), c, 2 * c, g);
        }
    }
    linear_specs(&mut v, "head.fuse", cfg.head_hidden, c + cfg.skip_channels, g);
    linear_specs(&mut v, "head.out", cfg.classes, cfg.head_hidden, g);
    v
}
