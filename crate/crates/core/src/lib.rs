//! Image PDEs solved two ways: classical reference schemes and a shallow
//! learned adaptive-filter network (BLADE) advanced in large explicit steps,
//! plus restoration, upscaling, segmentation and resampling built on it.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apps;
pub mod error;
pub mod features;
pub mod grid;
pub mod integrate;
pub mod io;
pub mod net;
pub mod refsolve;
pub mod spectral;
pub mod train;

pub use error::{BladeError, Result};
pub use features::{SelectionConfig, SelectionMap};
pub use grid::{ColorImage, FrameSequence, ImageGrid};
pub use integrate::{Estimator, Integrator, SequenceModel, TimeDerivative};
pub use net::{FilterBank, Footprint};
pub use refsolve::{Pde, SchemeConfig};
