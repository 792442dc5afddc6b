//! Neural marked temporal point process whose network output is the
//! integral of the conditional joint density, so likelihoods, mark
//! probabilities, and conditional CDFs come out in closed form with no
//! numerical integration in the training loop.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod iem;
pub mod metrics;
pub mod model;
pub mod quad;
pub mod real;
pub mod sampling;
pub mod synth;
pub mod threshold;
pub mod train;

pub use error::{Error, Result};

use std::path::Path;

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Concrete double-precision aliases for the generic core types.
pub type Event = data::Event<f64>;
pub type EventSequence = data::EventSequence<f64>;
pub type Dataset = data::Dataset<f64>;
pub type EncoderParams = encoder::EncoderParams<f64>;
pub type HistoryState = encoder::HistoryState<f64>;
pub type IemParams = iem::IemParams<f64>;
pub type GammaEval = iem::GammaEval<f64>;
pub type ParamSet = model::ParamSet<f64>;
pub type IfnmtppModel = model::IfnmtppModel<f64>;
pub type LossBreakdown = train::LossBreakdown<f64>;
pub type TrainOutcome = train::TrainOutcome<f64>;
