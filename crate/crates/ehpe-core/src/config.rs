//! Model architecture configuration shared by both stages.
//!
//! Every field has a desk-scale default sized so the full two-phase training
//! run finishes in minutes on a laptop CPU; production-scale values (256 px
//! images, 2048-channel features, 512-wide attention) are reachable by
//! overriding fields, since all spatial relationships are expressed as ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton;

/// How graph-attention edge weights are produced.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeightMode {
    /// Attention coefficients recomputed from node features per input.
    Dynamic,
    /// Constant uniform weights over each neighborhood (ablation baseline).
    Fixed,
}

/// Initialization of the 15 learned joint-coordinate embeddings.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedInit {
    /// Training-set mean pose (computed by the trainer before registration).
    MeanPose,
    /// All zeros.
    Zeros,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input image side in pixels.
    pub image_size: usize,
    /// Input image channels.
    pub image_channels: usize,
    /// Heatmaps live at image_size / heatmap_div.
    pub heatmap_div: usize,
    /// The backbone feature map lives at image_size / feature_div.
    pub feature_div: usize,
    /// Depth resolution d of the 2.5-D heatmap.
    pub depth: usize,
    /// Gaussian target widths, in heatmap cells.
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Supervised joint set of the first stage, as category letters
    /// (e.g. "WT" = wrist + fingertips, "WTD" adds the DIP row).
    pub tw_joints: String,
    /// Output channels of the stride-2 backbone convolutions, in order; the
    /// last entry is the feature-map channel count C.
    pub backbone_channels: Vec<usize>,
    /// Channel width of the heatmap decoder.
    pub decoder_width: usize,
    /// Channel width of the 2.5-D refinement trunk.
    pub refine_width: usize,
    /// Residual blocks in the refinement trunk.
    pub refine_blocks: usize,
    /// Max-pool (and mirrored upsample) stages in the refinement trunk.
    pub refine_pools: usize,
    /// Emit the refined 2.5-D heatmap at feature resolution instead of
    /// heatmap resolution.
    pub refined_at_feature_res: bool,

    /// Enable the graph-attention branch.
    pub spi: bool,
    /// Enable the image-token attention branch.
    pub fem: bool,
    /// Attention heads per graph-attention layer.
    pub gat_heads: usize,
    /// Number of graph-attention layers (layer 1 one-hop, layers >= 2 two-hop).
    pub gat_layers: usize,
    /// Node feature width produced by each graph-attention layer
    /// (split across heads).
    pub spi_width: usize,
    /// Token width of the feature-enhancement branch.
    pub fem_width: usize,
    /// Duplicate the image tokens (raw + positional copy) so the token count
    /// matches the 2*h*w + 1 reading of the attention dimensions.
    pub fem_duplicate_tokens: bool,
    /// Edge-weight mode of the graph-attention layers.
    pub edge_weights: EdgeWeightMode,
    /// Initialization of the non-supervised joint coordinate embeddings.
    pub embed_init: EmbedInit,
    /// Overwrite the supervised joints of the fused output with the
    /// first-stage predictions instead of the fused values.
    pub pin_tw_joints: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            image_channels: 3,
            heatmap_div: 4,
            feature_div: 32,
            depth: 8,
            sigma_x: 1.5,
            sigma_y: 1.5,
            tw_joints: "WT".to_string(),
            backbone_channels: vec![8, 16, 32, 64],
            decoder_width: 16,
            refine_width: 16,
            refine_blocks: 4,
            refine_pools: 2,
            refined_at_feature_res: false,
            spi: true,
            fem: true,
            gat_heads: 8,
            gat_layers: 2,
            spi_width: 64,
            fem_width: 64,
            fem_duplicate_tokens: false,
            edge_weights: EdgeWeightMode::Dynamic,
            embed_init: EmbedInit::MeanPose,
            pin_tw_joints: false,
        }
    }
}

fn is_pow2(v: usize) -> bool {
    v > 0 && v & (v - 1) == 0
}

impl ModelConfig {
    /// Side length of the 2-D heatmaps.
    pub fn heatmap_size(&self) -> usize {
        self.image_size / self.heatmap_div
    }

    /// Side length of the backbone feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.feature_div
    }

    /// Side length of the refined 2.5-D heatmap.
    pub fn refined_size(&self) -> usize {
        if self.refined_at_feature_res {
            self.feature_size()
        } else {
            self.heatmap_size()
        }
    }

    /// Pixels per refined-heatmap cell; predictions in refined-heatmap units
    /// multiply by this to return to pixels.
    pub fn coord_scale(&self) -> f64 {
        (self.image_size / self.refined_size()) as f64
    }

    /// Feature channels C of the backbone output.
    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated non-empty")
    }

    /// Sorted joint indices supervised by the first stage.
    pub fn supervised_joints(&self) -> Result<Vec<usize>> {
        skeleton::joints_for_letters(&self.tw_joints)
    }

    /// Extra 2x max-pools after the backbone convolutions so the total
    /// downsampling reaches feature_div.
    pub fn backbone_extra_pools(&self) -> usize {
        let conv_down = 1usize << self.backbone_channels.len();
        (self.feature_div / conv_down).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if !is_pow2(self.heatmap_div) || !is_pow2(self.feature_div) {
            return fail(format!("heatmap_div {} and feature_div {} must be powers of two", self.heatmap_div, self.feature_div));
        }
        if self.feature_div < self.heatmap_div {
            return fail(format!("feature_div {} must be >= heatmap_div {}", self.feature_div, self.heatmap_div));
        }
        if self.image_size % self.feature_div != 0 || self.image_size % self.heatmap_div != 0 {
            return fail(format!("image_size {} must be divisible by heatmap_div and feature_div", self.image_size));
        }
        if self.feature_size() < 1 || self.heatmap_size() < 4 {
            return fail(format!("image_size {} too small for the configured divisors", self.image_size));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail("backbone_channels must be a non-empty list of positive widths".to_string());
        }
        let conv_down = 1usize << self.backbone_channels.len();
        if conv_down > self.feature_div {
            return fail(format!(
                "{} stride-2 backbone convolutions downsample by {conv_down}, beyond feature_div {}",
                self.backbone_channels.len(),
                self.feature_div
            ));
        }
        if self.depth == 0 {
            return fail("depth must be >= 1".to_string());
        }
        if self.image_channels == 0 {
            return fail("image_channels must be >= 1".to_string());
        }
        if self.sigma_x <= 0.0 || self.sigma_y <= 0.0 {
            return fail("sigma_x and sigma_y must be positive".to_string());
        }
        self.supervised_joints()?;
        if self.decoder_width == 0 || self.refine_width == 0 {
            return fail("decoder_width and refine_width must be positive".to_string());
        }
        if self.refine_blocks < 2 * self.refine_pools {
            return fail(format!(
                "refine_blocks {} must be >= 2 * refine_pools {} (down and up paths each consume one block per pool)",
                self.refine_blocks, self.refine_pools
            ));
        }
        if self.refine_pools > 0 && self.heatmap_size() >> self.refine_pools == 0 {
            return fail(format!("refine_pools {} collapses the {}-cell heatmap", self.refine_pools, self.heatmap_size()));
        }
        if self.gat_heads == 0 || self.spi_width % self.gat_heads != 0 {
            return fail(format!("spi_width {} must be a positive multiple of gat_heads {}", self.spi_width, self.gat_heads));
        }
        if self.gat_layers == 0 {
            return fail("gat_layers must be >= 1".to_string());
        }
        if self.fem_width == 0 {
            return fail("fem_width must be positive".to_string());
        }
        Ok(())
    }
}
