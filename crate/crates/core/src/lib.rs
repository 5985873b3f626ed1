//! Content selection network for document-grounded response selection.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod inspect;
pub mod matching;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod seeding;
pub mod selection;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{CsnError, Result};
