//! Contrastive feature transformation: per-level networks, InfoNCE losses
//! and the offline and online training loops.

mod loss;
mod model;
mod train;

pub use loss::{infonce, infonce_var, multilevel_loss, ContrastiveParams, MultiLevelLoss, TripletBatch};
pub use model::{
    conv_key, embed, embed_var, head_input, head_key, heads, infer, infer_config, init_params, is_contrastive_key,
    proj_key, project, transform, ModelConfig, BOX_DIMS,
};
pub use train::{
    contrastive_margin, detection_loss, loss_csv, train_offline, train_online, LossRecord, Phase, TrainConfig,
    LOSS_CSV_HEADER,
};

pub use crate::graph::smooth_l1;
