//! Losses, AdamW, the sharded training loop and the offline teacher.

mod loss;
mod optim;
mod parallel;
mod teacher;
mod train;

pub use loss::{argmax_rows, cross_entropy, distilled_loss, distilled_loss_node, DistillLossInput};
pub use optim::{AdamW, AdamWConfig, CosineSchedule, StepStats};
pub use parallel::map_ordered;
pub use teacher::{train_teacher, TeacherConfig, TeacherLogits, TeacherNet, TrainedTeacher, TEACHER_MAGIC};
pub use train::{evaluate, predict, train, Classifier, EpochRecord, TrainConfig, TrainReport};
