//! Model observers and a foveated search model for signal detection in
//! 2D and 3D power-law noise.

pub mod channels;
pub mod config;
pub mod error;
pub mod fft;
pub mod foveation;
pub mod harness;
pub mod io;
pub mod observers;
pub mod optim;
pub mod rng;
pub mod search;
pub mod stats;
pub mod stimulus;
pub mod volume;

pub use error::{Error, Result};
pub use fft::FftGrid;
pub use rng::SeedStream;
pub use stimulus::{NoiseSpec, NoiseSpectrum, SignalKind, SignalSpec, TrialStimulus};
pub use volume::{Kernel, Volume, VolumeGeometry};
