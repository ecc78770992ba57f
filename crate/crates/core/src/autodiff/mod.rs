//! Dense tensor graphs, reverse-mode differentiation and masked optimizers.

mod gradcheck;
mod graph;
mod optim;
mod terms;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use graph::{
    log_sum_exp, softmax, Batch, BnMode, BnStats, Evaluation, ForwardPass, Graph, GraphBuilder, LossKind,
    Node, NodeId, Op, Targets, BN_EPS, BN_MOMENTUM,
};
pub use optim::{masked_adam_step, masked_sgd_step, AdamHyper, OptimState};
pub use terms::{contrastive_loss, cosine_similarity, l2_penalty};
