use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StreamDims;

/// How a branch combines its image tokens with the edge and nuclei guides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideMode {
    /// Multi-head cross-attention from the image stream to each guide.
    #[default]
    Mca,
    /// LayerNorm of the elementwise sum of the three streams.
    Sum,
    /// LayerNorm of a learned projection of the concatenated streams.
    Concat,
}

impl std::str::FromStr for GuideMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mca" => Ok(Self::Mca),
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::arg(format!("unknown guide mode `{s}` (mca | sum | concat)"))),
        }
    }
}

/// Branch and guidance ablations. All off is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub drop_spot: bool,
    pub drop_ctx: bool,
    pub drop_global: bool,
    pub no_edge_spot: bool,
    pub no_nuclei_spot: bool,
    pub no_edge_ctx: bool,
    pub no_nuclei_ctx: bool,
}

impl Ablation {
    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Side of the square context window, odd.
    pub d_context: usize,
    /// Output width, the number of predicted genes.
    pub n_genes: usize,
    pub stream_dims: StreamDims,
    #[serde(default)]
    pub guide_mode: GuideMode,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    /// Names of the predicted genes in output order; empty when unknown.
    #[serde(default)]
    pub genes: Vec<String>,
}

fn default_eps() -> f64 {
    crate::numerics::LAYER_NORM_EPS
}

impl ModelConfig {
    pub fn new(d_model: usize, n_heads: usize, d_context: usize, n_genes: usize, stream_dims: StreamDims) -> Self {
        Self {
            d_model,
            n_heads,
            d_context,
            n_genes,
            stream_dims,
            guide_mode: GuideMode::Mca,
            ablation: Ablation::default(),
            layer_norm_eps: default_eps(),
            genes: Vec::new(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_genes == 0 {
            return Err(Error::Config("d_model, n_heads and n_genes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads = {} does not divide d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_context == 0 || self.d_context % 2 == 0 {
            return Err(Error::Config(format!("d_context must be odd, got {}", self.d_context)));
        }
        let d = self.stream_dims;
        if d.image == 0 || d.edge == 0 || d.nuclei == 0 {
            return Err(Error::Config("stream widths must be positive".into()));
        }
        let a = self.ablation;
        if a.drop_spot && a.drop_ctx && a.drop_global {
            return Err(Error::Config("cannot drop all three branches".into()));
        }
        if !self.genes.is_empty() && self.genes.len() != self.n_genes {
            return Err(Error::Config(format!(
                "{} gene names for {} outputs",
                self.genes.len(),
                self.n_genes
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}
