//! Network blocks, the U-Net3D and fusion models, a small reverse-mode tape
//! and a toy trainer.
//!
//! Model code is generic over [`graph::Backend`], so one definition serves
//! plain evaluation, gradient recording and parameter declaration.

pub mod graph;
pub mod model;
pub mod ops;
pub mod train;
pub mod weights;

pub use graph::{Backend, Declare, Eval, Tape, Var};
pub use model::{
    declare_params, fusion_forward, init_weights, init_weights_with, stage_forward, unet3d_forward, FusionConfig,
    ModelSpec, StageConfig, TimeCompaction, UNet3DConfig,
};
pub use ops::{ConvSpec, Op};
pub use train::{fit_toy, loss_and_grads, toy_config, toy_dataset, Sample};
pub use weights::{InitRule, ManifestEntry, ModelWeights, ParamDecl, ParamKind};
