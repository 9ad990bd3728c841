//! Losses, training loops and checkpoint persistence.

mod checkpoint;
mod losses;
mod train;

pub use checkpoint::{config_text, Checkpoint, ModelKind, MAGIC, VERSION};
pub use losses::{
    log_mel_graph, loss_srl, loss_srl_graph, loss_ss, loss_ss_graph, loss_ss_per_sample, loss_total,
    loss_total_graph, mel_kernel, pit_loss, pit_loss_graph, srl_from_embeddings, Permutation,
    LOSS_FLOOR,
};
pub use train::{
    evaluate_losses, loss_curve_text, train_separator, trainable_ids, write_loss_curve, LossReport,
    SepItem, SeparationData, TrainConfig, LOSS_CURVE_HEADER,
};
