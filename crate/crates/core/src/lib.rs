//! Unpaired MR to CT synthesis with attention-mask generators, coarse-mask
//! supervision and a cycle shape-consistency term.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod eval;
pub mod generator;
pub mod grid;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod study;
pub mod train;

pub use config::{AdversarialMode, LossWeights, NetworkSpec, RunConfig, ShapeGradient};
pub use error::{Error, Result};
pub use generator::{compose, discriminator_forward, generator_forward, Discriminator, Generator};
pub use grid::{normalize, resize_pad, ImageGrid, Modality};
pub use losses::{LossBundle, LossTerms};
pub use mask::{deform_mask, extract_coarse_mask, sample_displacement, CoarseMask};
pub use phantom::{make_dataset, make_phantom_pair, PhantomSpec, SliceDataset};
pub use train::{train_run, train_step, RunOptions, TrainState, TrainingData};
pub use eval::{evaluate, mae, paired_t_test, psnr, ssim, MetricsReport};
pub use study::{deform_study, emit_figure_bundle, Method};
