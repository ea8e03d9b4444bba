pub mod data;
pub mod sampler;
pub mod schedule;
pub mod teacher;
pub mod unet;

pub use data::{Dataset, DatasetKind};
pub use sampler::{ddim_step, initial_noise, run_trajectory, sample, Denoiser};
pub use schedule::{make_schedule, sampling_steps, NoiseSchedule};
pub use teacher::{
    heldout_corruptions, one_step_improvement, train_teacher, TeacherConfig, TeacherReport,
};
pub use unet::{
    act_scale_name, time_embedding, time_embeddings, ForwardOpts, LayerKind, LayerSelection,
    LayerSpec, QuantView, Role, ToyUNet, UNetConfig,
};
