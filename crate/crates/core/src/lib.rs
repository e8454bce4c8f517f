//! Opcode-frequency malware detection.
//!
//! The crate is organised as a pipeline, one module per stage:
//!
//! * [`ingest`] parses disassembly listings (IDA-style `.asm` and `objdump`) into
//!   opcode mnemonic sequences.
//! * [`corpus`] builds the opcode vocabulary, vectorizes sequences into labeled
//!   sparse count vectors and persists the resulting feature matrix.
//! * [`curation`] performs instance selection on opcode weight.
//! * [`rank`] scores features with five filter methods.
//! * [`learners`] holds the tree classifiers and the random forest.
//! * [`eval`] runs stratified cross-validation and computes confusion metrics.
//! * [`cli`] wires the stages into the `opfreq` command line tool.

pub mod cli;
pub mod corpus;
pub mod curation;
pub mod eval;
pub mod ingest;
pub mod learners;
pub mod rank;
pub mod seed;
mod write;

pub use corpus::{FeatureMatrix, Label, LabelTag, Sample, Vocabulary};
pub use ingest::{OpcodeSequence, SourceDialect};
