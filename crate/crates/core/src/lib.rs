//! Denoising diffusion over explicit voxel radiance fields, guided by
//! differentiable volume rendering.
//!
//! The pipeline: fit `[4, N, N, N]` pre-activated voxel grids to posed
//! images ([`fit`]), train a 3D U-Net noise predictor ([`denoiser`]) with a
//! field-space loss plus a rendering loss on the one-shot clean estimate
//! ([`diffusion`]), then sample fields unconditionally, under a voxel mask,
//! or steered towards a target image ([`sampler`]). [`geometry`] provides
//! marching cubes and the Chamfer-based metrics.

pub mod camera;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod fit;
pub mod geometry;
pub mod io;
mod mc_tables;
pub mod optim;
pub mod render;
pub mod sampler;
pub mod schedule;
pub mod vec3;

pub use camera::{pixel_rays, spiral_trajectory, Camera, Ray, SpiralSpec};
pub use denoiser::{parameter_count, DenoiserConfig, DenoiserNet};
pub use diffusion::{
    estimate_f0, forward_diffuse, loss_rf, LrSchedule, StepLosses, Trainer, TrainingConfig, TrainingSample,
};
pub use error::{Error, Result};
pub use field::{activate, clamp_field, sample_field, ActivationConfig, RadianceField, CHANNELS};
pub use fit::{fit_field, psnr, FitConfig, FitResult, PSNR_CAP};
pub use geometry::{chamfer, coverage, marching_cubes, masked_psnr, mmd, sample_surface, Mesh, PointSet};
pub use io::{load_field, load_scene, save_field, PosedImage, Scene};
pub use render::{photometric_loss, render_image, render_ray, Image, RenderConfig, RenderedImage};
pub use sampler::{
    complete_masked, sample_guided, sample_unconditional, GuidanceTarget, NoisePredictor, SamplerConfig, VoxelMask,
};
pub use schedule::{linear_schedule, NoiseSchedule, ReverseVariance, ScheduleConfig};
