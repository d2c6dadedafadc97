//! Confounder-aware aggregation of multi-judge score matrices.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod splr;
pub mod synth;
pub mod tensor;

pub use dataio::{ScoreMatrix, Split, Standardizer, TaskKind};
pub use error::{CareError, Result};
pub use moments::{CovarianceEstimate, PrecisionEstimate, ThirdOrderTensor};
pub use partition::TriViewPartition;

pub use spectral::{LatentFactors, QualityEstimates};
pub use splr::{SplrDecomposition, SplrParams};
pub use tensor::{CpComponents, MixtureModel, PosteriorResult};

