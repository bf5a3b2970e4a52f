pub mod codec;
pub mod error;
pub mod matrix;
pub mod oracle;
pub mod store;
pub mod treedec;

pub use codec::{BlockTriple, SigmaIndex, StageId, TupleCode};
pub use error::{Error, Result};
pub use matrix::{
    BlockRef, Decision, MatrixState, Restriction, Schedule, Step, Transcript, Verdict,
};
