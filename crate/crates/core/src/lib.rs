//! Evidential segmentation with a dual-branch network: per-pixel Dirichlet
//! evidence, belief fusion across branches, partial losses over scribble
//! annotations, and the training and evaluation machinery around them.

pub mod data;
pub mod error;
pub mod evidence;
pub mod fusion;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod protocol;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod tnsr;
pub mod train;

mod conv;
mod rng;

pub use data::{Dataset, ScribbleSample};
pub use error::{Error, Result};
pub use evidence::EvidenceMap;
pub use fusion::FusedOpinion;
pub use labels::{LabelMap, ScribbleMask};
pub use net::{DualNet, NetConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{RunRecord, TrainConfig};
