use rayon::prelude::*;

use super::{info_nce_loss, ActivationMeter, EncoderInput, EncoderParams, EngineError, Grads};

/// Settings shared by the full-batch and cached gradient paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradConfig {
    pub temperature: f64,
    pub normalize: bool,
    pub sub_batch_size: usize,
    /// Embed sub-batches concurrently in the gradient-free pass. Reduction
    /// order is unaffected.
    pub parallel: bool,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            temperature: super::DEFAULT_TEMPERATURE,
            normalize: true,
            sub_batch_size: 1,
            parallel: false,
        }
    }
}

/// A batch of aligned (key, value) inputs.
pub type PairBatch = [(EncoderInput, EncoderInput)];

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    pub loss: f64,
    pub grads: Grads,
}

/// Plain backpropagation: forward every key and value, keep all activations,
/// then backpropagate keys then values in batch order.
pub fn grad_full(
    batch: &PairBatch,
    params: &EncoderParams,
    config: &GradConfig,
    meter: Option<&ActivationMeter>,
) -> Result<GradOutput, EngineError> {
    let b = batch.len();
    let keys: Vec<_> = batch.iter().map(|(k, _)| params.forward(k, config.normalize)).collect();
    let values: Vec<_> = batch.iter().map(|(_, v)| params.forward(v, config.normalize)).collect();
    if let Some(m) = meter {
        m.acquire(2 * b);
    }
    let out = info_nce_loss(
        &keys.iter().map(|f| f.y.clone()).collect::<Vec<_>>(),
        &values.iter().map(|f| f.y.clone()).collect::<Vec<_>>(),
        config.temperature,
    )?;
    let mut grads = Grads::zeros(params.vocab, params.dim);
    for (i, (k, _)) in batch.iter().enumerate() {
        params.backward(k, &keys[i], &out.d_keys[i], &mut grads);
    }
    for (i, (_, v)) in batch.iter().enumerate() {
        params.backward(v, &values[i], &out.d_values[i], &mut grads);
    }
    if let Some(m) = meter {
        m.release(2 * b);
    }
    Ok(GradOutput {
        loss: out.loss,
        grads,
    })
}

/// Gradient caching in three phases: embed everything without keeping
/// activations, take the loss and embedding gradients over the full batch,
/// then re-run each sub-batch with backpropagation driven by the cached
/// embedding gradients. Only one sub-batch of activations is alive at a time.
pub fn grad_cached(
    batch: &PairBatch,
    params: &EncoderParams,
    config: &GradConfig,
    meter: Option<&ActivationMeter>,
) -> Result<GradOutput, EngineError> {
    let b = batch.len();
    let sub = config.sub_batch_size;
    if sub == 0 || sub > b {
        return Err(EngineError::SubBatch { sub, batch: b });
    }

    let embed_all = |pick: fn(&(EncoderInput, EncoderInput)) -> &EncoderInput| -> Vec<Vec<f64>> {
        if config.parallel {
            batch
                .par_chunks(sub)
                .flat_map_iter(|c| c.iter().map(|p| params.embed(pick(p), config.normalize)).collect::<Vec<_>>())
                .collect()
        } else {
            batch.iter().map(|p| params.embed(pick(p), config.normalize)).collect()
        }
    };
    let key_cache = embed_all(|p| &p.0);
    let value_cache = embed_all(|p| &p.1);

    let out = info_nce_loss(&key_cache, &value_cache, config.temperature)?;

    let mut grads = Grads::zeros(params.vocab, params.dim);
    for (c, chunk) in batch.chunks(sub).enumerate() {
        let base = c * sub;
        let keys: Vec<_> = chunk.iter().map(|(k, _)| params.forward(k, config.normalize)).collect();
        let values: Vec<_> = chunk.iter().map(|(_, v)| params.forward(v, config.normalize)).collect();
        for (off, (k, v)) in keys.iter().zip(&values).enumerate() {
            if k.y != key_cache[base + off] || v.y != value_cache[base + off] {
                return Err(EngineError::CacheMismatch { row: base + off });
            }
        }
        if let Some(m) = meter {
            m.acquire(2 * chunk.len());
        }
        for (off, (k, _)) in chunk.iter().enumerate() {
            params.backward(k, &keys[off], &out.d_keys[base + off], &mut grads);
        }
        for (off, (_, v)) in chunk.iter().enumerate() {
            params.backward(v, &values[off], &out.d_values[base + off], &mut grads);
        }
        if let Some(m) = meter {
            m.release(2 * chunk.len());
        }
    }
    Ok(GradOutput {
        loss: out.loss,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_batch;

    #[test]
    fn full_sub_batch_is_bitwise_identical() {
        let params = EncoderParams::init(64, 8, 3);
        let batch = random_batch(6, 64, 11);
        let cfg = GradConfig {
            temperature: 0.1,
            sub_batch_size: 6,
            ..Default::default()
        };
        let full = grad_full(&batch, &params, &cfg, None).unwrap();
        let cached = grad_cached(&batch, &params, &cfg, None).unwrap();
        assert_eq!(full, cached);
    }

    #[test]
    fn small_sub_batches_agree_and_bound_activations() {
        let params = EncoderParams::init(64, 8, 3);
        let batch = random_batch(12, 64, 5);
        let cfg = GradConfig {
            temperature: 0.05,
            sub_batch_size: 3,
            ..Default::default()
        };
        let full_meter = ActivationMeter::default();
        let full = grad_full(&batch, &params, &cfg, Some(&full_meter)).unwrap();
        let meter = ActivationMeter::default();
        let cached = grad_cached(&batch, &params, &cfg, Some(&meter)).unwrap();
        assert!(full.grads.max_abs_diff(&cached.grads) <= 1e-10);
        assert_eq!(full_meter.peak(), 24);
        assert_eq!(meter.peak(), 6);
        assert_eq!(meter.live(), 0);

        let par = grad_cached(&batch, &params, &GradConfig { parallel: true, ..cfg }, None).unwrap();
        assert_eq!(par, cached);
    }

    #[test]
    fn oversized_sub_batch_rejected() {
        let params = EncoderParams::init(64, 4, 3);
        let batch = random_batch(2, 64, 1);
        let cfg = GradConfig {
            sub_batch_size: 3,
            ..Default::default()
        };
        assert!(matches!(
            grad_cached(&batch, &params, &cfg, None),
            Err(EngineError::SubBatch { .. })
        ));
    }
}
