//! The small-object detector: graph construction, priors, matching, loss
//! and inference post-processing.

pub mod build;
pub mod decode;
pub mod exec;
pub mod fusion;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod params;
pub mod priors;

pub use build::{build_mfssd, fusion_spec, ArchConfig, FusionSpec};
pub use decode::{decode_detections, nms, DecodeConfig, Detection};
pub use exec::{forward, predict, ForwardPass, Mode};
pub use fusion::{fuse_features, FusionParams};
pub use graph::{ActShape, GraphSpec, HeadPair, Node, NodeId, NodeKind};
pub use loss::{multibox_loss, multibox_loss_on_tape, LossOutput};
pub use matching::{
    decode as decode_box, encode as encode_box, match_priors, Annotation, Assignment,
};
pub use params::{NodeParams, Params, TensorRole};
pub use priors::{generate_priors, PriorBoxSet, PriorConfig};
