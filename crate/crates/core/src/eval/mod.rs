//! Candidate embedding, exact top-K search and Recall@K reporting.

mod recall;
mod search;
mod store;

pub use recall::{recall_at_k, split_name, GroupKey, RecallReport, RecallRow, StoreSet, DEFAULT_KS};
pub use search::{dot, top_k, top_k_batch, Hit};
pub use store::{id_hash, EmbeddingStore, STORE_MAGIC, STORE_VERSION};

use rayon::prelude::*;
use thiserror::Error;

use crate::context::{serialize_key, serialize_value, ContextError};
use crate::engine::{materialize, EncoderParams, EngineError, ImageSource, PreparedSequence};
use crate::pairs::{CandidatePool, PoolSet, RetrievalPair, SegmentRef};
use crate::trajectory::TrajectoryRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("store is sealed")]
    Sealed,
    #[error("expected dimension {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("duplicate store id {0}")]
    DuplicateId(SegmentRef),
    #[error("malformed store: {0}")]
    Format(String),
    #[error("pair {pair}: positive {value} is not in the candidate store")]
    MissingPositive { pair: usize, value: SegmentRef },
    #[error("unknown trajectory {0}")]
    UnknownTrajectory(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encoder settings used at inference time. No token masking is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub normalize: bool,
    pub max_sequence_tokens: usize,
    pub vocab: usize,
}

fn encode(
    seq: &crate::context::ContextSequence,
    images: &dyn ImageSource,
    params: &EncoderParams,
    cfg: &EmbedConfig,
) -> Result<Vec<f64>, EvalError> {
    let prepared = PreparedSequence::new(seq, cfg.vocab);
    let (input, _) = materialize(&prepared, images, None, cfg.max_sequence_tokens)?;
    Ok(params.embed(&input, cfg.normalize))
}

/// Embeds every member of `pool` into a sealed store, rows in pool order.
pub fn embed_pool<'a>(
    pool: &CandidatePool,
    lookup: &(dyn Fn(&str) -> Option<&'a TrajectoryRecord> + Sync),
    images: &dyn ImageSource,
    params: &EncoderParams,
    cfg: &EmbedConfig,
) -> Result<EmbeddingStore, EvalError> {
    let vectors: Vec<Vec<f64>> = pool
        .members()
        .par_iter()
        .map(|seg| {
            let t = lookup(&seg.trajectory_id)
                .ok_or_else(|| EvalError::UnknownTrajectory(seg.trajectory_id.clone()))?;
            encode(&serialize_value(t, seg)?, images, params, cfg)
        })
        .collect::<Result<_, _>>()?;
    let mut store = EmbeddingStore::new(params.dim);
    for (seg, v) in pool.members().iter().zip(&vectors) {
        store.push(seg.clone(), v)?;
    }
    Ok(store.seal())
}

/// Embeds all three pools.
pub fn embed_pools<'a>(
    pools: &PoolSet,
    lookup: &(dyn Fn(&str) -> Option<&'a TrajectoryRecord> + Sync),
    images: &dyn ImageSource,
    params: &EncoderParams,
    cfg: &EmbedConfig,
) -> Result<StoreSet, EvalError> {
    Ok(StoreSet {
        state: embed_pool(&pools.state, lookup, images, params, cfg)?,
        trajectory: embed_pool(&pools.trajectory, lookup, images, params, cfg)?,
        interval: embed_pool(&pools.interval, lookup, images, params, cfg)?,
    })
}

/// Key embeddings of `pairs`, in order.
pub fn embed_keys<'a>(
    pairs: &[RetrievalPair],
    lookup: &(dyn Fn(&str) -> Option<&'a TrajectoryRecord> + Sync),
    images: &dyn ImageSource,
    params: &EncoderParams,
    cfg: &EmbedConfig,
) -> Result<Vec<Vec<f32>>, EvalError> {
    pairs
        .par_iter()
        .map(|p| {
            let payload = match &p.key_segment {
                Some(seg) => {
                    let t = lookup(&seg.trajectory_id)
                        .ok_or_else(|| EvalError::UnknownTrajectory(seg.trajectory_id.clone()))?;
                    Some(serialize_value(t, seg)?)
                }
                None => None,
            };
            let key = serialize_key(&p.key_query, payload)?;
            let v = encode(&key, images, params, cfg)?;
            Ok(v.into_iter().map(|x| x as f32).collect())
        })
        .collect()
}
