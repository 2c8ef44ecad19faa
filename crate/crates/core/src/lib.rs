//! Image color and style transfer by optimal transport between learned
//! sparse patch dictionaries.
//!
//! Two dictionaries are learned jointly, one per image, with a K-SVD variant
//! whose atom update is pulled toward the atoms it is coupled with under a
//! transport plan. The transferred image is synthesized by coding the content
//! patches on the content dictionary and decoding them on its barycentric
//! image under the plan, followed by a gradient-domain refinement.

pub mod coding;
pub mod dictionary;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model_io;
mod parallel;
pub mod patches;
pub mod pipeline;
pub mod rng;
pub mod synthesis;
pub mod transport;

pub use crate::coding::{AtomDistribution, SparseCode, SparseColumn};
pub use crate::dictionary::Dictionary;
pub use crate::error::{Error, Result};
pub use crate::image::Image;
pub use crate::patches::{PatchSet, Position};
pub use crate::pipeline::{fit, FitConfig, LossRecord, TransferModel};
pub use crate::synthesis::{transfer, Direction, TransferOptions};
pub use crate::transport::{CostMatrix, TransportPlan};
