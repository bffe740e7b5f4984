//! Trace-driven RowHammer fault simulation.
//!
//! The engine consumes DRAM command traces (ACT, RD, WR, REF), tracks hammer
//! pressure on the neighbours of every activated row, and injects bitflips
//! into weak cells named by a device map. Target-row-refresh mitigation, a
//! SECDED read path and an offline analyzer that evaluates thresholds and
//! probabilities analytically sit on top.

pub mod analyzer;
pub mod config;
pub mod devmap;
pub mod ecc;
pub mod engine;
pub mod geometry;
pub mod memory;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod sim;
pub mod trace;
pub mod tracker;
pub mod traffic;
pub mod trr;

pub use config::{load_config, SimConfig, TimingParams, TrrVariant};
pub use devmap::{DeviceMap, VariationParams};
pub use ecc::{EccOutcome, ParityMatrix};
pub use engine::{Engine, Probe, SimReport};
pub use geometry::{DeviceAddress, DeviceGeometry, MappingScheme, RowKey};
pub use par::Exec;
pub use trace::Command;
pub use tracker::{BitflipRecord, PatternClass};
pub use traffic::TrafficSpec;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Map(#[from] devmap::MapError),
    #[error(transparent)]
    Ecc(#[from] ecc::EccError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Traffic(#[from] traffic::TrafficError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Broad cause of a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable or malformed input.
    Input,
    /// Well-formed input that violates a model invariant.
    Invariant,
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Config(config::ConfigError::Io { .. } | config::ConfigError::Malformed(_)) => {
                Input
            }
            Error::Map(
                devmap::MapError::Io { .. }
                | devmap::MapError::Parse(_)
                | devmap::MapError::NonIntegerKey { .. }
                | devmap::MapError::Shape { .. },
            ) => Input,
            Error::Ecc(
                ecc::EccError::Io { .. }
                | ecc::EccError::RowCount(_)
                | ecc::EccError::RowLength { .. }
                | ecc::EccError::BadChar { .. },
            ) => Input,
            Error::Trace(_) | Error::Io { .. } => Input,
            Error::Metrics(metrics::MetricsError::Empty(_) | metrics::MetricsError::Pgm(_)) => {
                Input
            }
            Error::Traffic(traffic::TrafficError::Syntax(_)) => Input,
            Error::Engine(engine::EngineError::OutOfOrder { .. }) => Input,
            _ => Invariant,
        }
    }
}
