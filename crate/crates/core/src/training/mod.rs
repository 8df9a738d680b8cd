//! Configuration, optimizer, schedules, checkpoints and the training loops.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, RngState, Stage};
pub use config::{Objective, Schedule, Task, TrainConfig};
pub use metrics::{Header, MetricsLog, Record};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use trainer::{build_batch, head_recovery_defaults, loss_on_batch, RunData, StepStats, Trainer};
