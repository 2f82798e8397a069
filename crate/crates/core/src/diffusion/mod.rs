//! A desk-scale denoiser on small pixel grids: noise schedule, pose control
//! rendering, synthetic multi-identity data, the two-branch model, the
//! trainer and an ancestral sampler.

pub mod data;
pub mod infer;
pub mod model;
pub mod pose;
pub mod sample;
pub mod schedule;
pub mod train;

pub use data::{make_synthetic_dataset, AnnotatedFace, AnnotatedRecord, SyntheticDataset, ToyFaceEncoder};
pub use infer::{infer, InferenceOutput, InferenceRequest, PoseFace};
pub use model::{Branch, Conditioning, ParamSet, SiteMaps, ToyDenoiser};
pub use pose::{render_pose_control, Keypoint, PoseControl, PALETTE};
pub use sample::{sample, sample_with_maps, Sample};
pub use schedule::{timestep_embedding, NoiseSchedule};
pub use train::{conditioning_for, evaluate_loss, sample_batch, sample_example, train, training_loss, LossPoint, TrainingExample};
