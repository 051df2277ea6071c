//! Multimodal trajectory retrieval toolkit.
//!
//! The crate is organised along the data flow of the pipeline:
//!
//! * [`trajectory`] defines the unified trajectory format, ingests JSONL
//!   corpora and deduplicates states.
//! * [`pairs`] derives the twelve retrieval subtasks, candidate pools, the
//!   length-capped "lite" variant and train / IND / OOD splits.
//! * [`context`] turns keys and values into interleaved text / image-slot
//!   sequences.
//! * [`token_select`] groups redundant screenshot patches and emits keep masks
//!   for training.
//! * [`engine`] holds the reference encoder, InfoNCE, full-batch and cached
//!   gradients, and the training loop.
//! * [`eval`] embeds candidate pools, runs exact top-K inner product search and
//!   computes Recall@K tables.

pub mod context;
pub mod engine;
pub mod eval;
pub mod pairs;
pub mod seed;
pub mod synth;
pub mod token_select;
pub mod trajectory;

pub use context::{ContextSequence, Element, Side, StateId};
pub use pairs::{CandidatePool, PoolKind, RetrievalPair, SegmentKind, SegmentRef, Split, Subtask};
pub use trajectory::{ActionRecord, ActionSpaceDef, StateRecord, TrajectoryRecord};
