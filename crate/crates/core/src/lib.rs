//! Scale-space Difference-of-Gaussians blob detection for sizing bright
//! droplets in grayscale frames.
//!
//! The pipeline is [`image_core::preprocess`] -> [`convolve::convolve_bank`]
//! -> [`detector::dog_stack`] -> [`detector::find_extrema`] ->
//! [`detector::prune_overlaps`] -> [`detector::histogram`], wrapped by
//! [`detector::Detector`]. [`synth`] renders scenes with known circles and
//! [`evaluate`] scores detections against them.

pub mod bench;
pub mod convolve;
pub mod detector;
pub mod error;
pub mod evaluate;
pub mod image_core;
pub mod scale_space;
pub mod synth;

pub use convolve::{convolve_bank, fft_forward_plan, BackendKind, FftPlan, ScaleStack};
pub use detector::{
    detect, dog_stack, find_extrema, histogram, log_reference_response, prune_overlaps, Blob, BlobSet, BlobSetDocument,
    Detection, DetectionParams, Detector, DoGStack, PreprocessParams, RadiusHistogram, StageTimings,
};
pub use error::{Error, Result};
pub use evaluate::{match_voc, parity, EvalReport, ParityStats};
pub use image_core::{contrast_stretch, decode_image, load_image, preprocess, save_image, Image, ImageFormat};
pub use scale_space::{build_kernel_bank, build_ladder, KernelBank, SigmaLadder};
pub use synth::{add_noise, render_scene, GroundTruthCircle, RenderParams, Scene, Shading};
