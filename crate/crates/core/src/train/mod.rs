//! Contrastive training: multi-view NT-Xent, LARS, warm-up plus cosine
//! schedule and the training loop.

pub mod head;
pub mod lars;
pub mod loss;
pub mod schedule;
mod trainer;

pub use head::ProjectionHead;
pub use lars::{lars_step, lars_update, LarsConfig, LarsState};
pub use loss::{nt_xent_loss, nt_xent_with_grad, LossGrad};
pub use schedule::lr_at;
pub use trainer::{read_log, EpochRecord, TrainConfig, TrainOutput, TrainState, Trainer, ViewPlan};
