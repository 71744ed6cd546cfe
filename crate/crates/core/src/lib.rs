//! Spiking phasor neural networks.
//!
//! Complex-valued networks whose units live on the unit circle are trained
//! with complex-domain backpropagation, then executed as spike-timing-coded
//! networks: either by mapping phases straight to spike times
//! ([`spikemap`]) or by integrating a resonant soma/dendrite/synapse circuit
//! ([`circuit`]).

pub mod circuit;
pub mod complex_core;
pub mod data;
pub mod error;
pub mod model_io;
pub mod optim;
pub mod phasor_net;
pub mod spikemap;
pub mod train;

pub use complex_core::{cmul, ComplexTensor, ComplexValue, Real};
pub use error::{Error, LoadError, Result};
pub use phasor_net::{LayerSpec, PhasorNetwork};
