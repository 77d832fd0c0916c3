//! Teacher construction, the distillation objective and the training loop.

mod example;
mod optim;
mod student;
mod train;

pub use example::{
    answer_cross_entropy, answer_logits, kd_loss, kd_loss_value, packed_cross_entropy, teacher_distributions,
    PackedExample, TeacherOutput,
    TrainingExample,
};
pub use optim::{clip_global_norm, global_norm, AdamW, LrSchedule, Schedule};
pub use student::{
    argmax, generate_plain, greedy, Ablations, BoundStudent, Student, StudentConfig, COMP_EMBEDDING,
    DECODER_PREFIX, ENCODER_PREFIX, PROJECTION,
};
pub use train::{
    run_training, sample_ratio, DistillState, LmState, LmTarget, Mode, StepStats, TeacherCache, TrainConfig, TrainLog,
    TrainOutcome, Trainer, LOG_FILE, MODEL_FILE, STATE_FILE, STUDENT_FILE,
};
