//! The guided three-branch network: guiding blocks, branches, positional
//! encoding, fusion, prediction heads and checkpoints.

pub mod apeg;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use apeg::{apeg_encode, apeg_on};
pub use attention::{
    cross_attention, cross_attention_on, cross_attention_with_weights, mca, mca_on, mca_trace, AttentionHead,
    GuideMasks, McaOutput, McaParams, McaTrace,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Ablation, GuideMode, ModelConfig};
pub use forward::{
    bind_constants, bind_params, check_dataset, context_branch_on, context_bundle, fuse_on, global_tokens_on,
    head_on, spot_branch_on, spot_forward_on, BranchOutput, BranchVars, ContextAttention, GlobalOutput,
    SlideContext, SlidePredictions, SpotVars,
};
pub use params::{layout, HeadWeights, LinearHead, McaWeights, ModelParams, ModelWeights};
