//! Continual category discovery anchored to a fixed simplex equiangular tight frame.
//!
//! A supervised base session trains an encoder and a cosine classifier while pulling each
//! class toward its own frame direction. Each later session receives unlabeled data mixing
//! known and novel classes, grows the classifier from clusters of the embeddings, and pulls
//! confident novel samples toward directions no earlier class has taken.

pub mod assignment;
pub mod data;
pub mod discovery;
pub mod encoder;
pub mod error;
pub mod etf;
pub mod eval;
pub mod losses;
pub mod numkit;
pub mod report;
pub mod session;

pub use data::{generate_stream, load_embeddings, write_embeddings, Split, StageData, StreamSpec};
pub use encoder::{Activation, Encoder, SgdConfig};
pub use error::{Error, Result};
pub use etf::{ideal_gram, AllocationLedger, EtfFrame};
pub use eval::{AccuracyTriple, NcDiagnostics};
pub use losses::{LossConfig, LossResult};
pub use numkit::{Matrix, Rng};
pub use session::{run_protocol, Preset, ProtocolRun, SessionConfig, SessionState, StageReport, Summary};
