//! Learnable PnP: the network, pose decoding, losses and training loop.

mod loss;
mod net;
mod train;

pub use loss::{
    loss_geom, loss_pose, loss_rot, loss_rot_sym, LossConfig, LossMode, LossTerms, MapPrediction, PoseTarget, ZOOM_SIZE,
};
pub use net::{assemble_input, decode_pose, predict_pose, HeadOutput, NetConfig, PatchPnp, RotMode};
pub use train::{
    evaluate_rel_add, mean_site, predict_samples, prepare_sample, train, EpochLog, Prepared, StepLog, TrainConfig,
    TrainReport,
};
