//! Training loops, reference oracles and evaluation metrics.

pub mod metrics;
pub mod oracle;
pub mod train;

pub use metrics::{
    empirical_distribution, entropy_metric, metrics_csv, nll_eval, token_accuracy, tv_distance, ExplicitReference,
    MetricsRow, SequenceReference, TrigramReference, METRICS_HEADER,
};
pub use oracle::{
    composition_kl, enumerate_states, factorized_generator, interval_average_logits, kolmogorov_reference,
    logit_step_kernel, sixteen_state_fixture, state_index, two_state_fixture, MAX_KOLMOGOROV_STATES,
};
pub use train::{finetune_loop, loss_curve_csv, pretrain_loop, Branch, LossRecord, Phase, TrainConfig};
