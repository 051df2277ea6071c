use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    grad_cached, grad_full, materialize, EncoderInput, EncoderParams, EngineError, GradConfig, Grads, ImageSource,
    Masking, PreparedSequence, TrainConfig,
};
use crate::context::{serialize_pair, ContextError};
use crate::pairs::{RetrievalPair, Subtask};
use crate::trajectory::TrajectoryRecord;
use crate::seed::{derive_seed, rng_for};
use crate::token_select::TokenSelectConfig;

/// One training example: prepared key and value plus what the sampler needs.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub subtask: Subtask,
    pub key: PreparedSequence,
    pub value: PreparedSequence,
    /// Identity of the positive value; a batch never holds two pairs with the
    /// same value.
    pub value_id: String,
}

/// Serializes and tokenizes `pairs` for training.
pub fn prepare_training_pairs<'a>(
    pairs: &[RetrievalPair],
    lookup: impl Fn(&str) -> Option<&'a TrajectoryRecord> + Copy,
    vocab: usize,
) -> Result<Vec<TrainingPair>, ContextError> {
    pairs
        .iter()
        .map(|p| {
            let (key, value) = serialize_pair(p, lookup)?;
            Ok(TrainingPair {
                subtask: p.subtask,
                key: PreparedSequence::new(&key, vocab),
                value: PreparedSequence::new(&value, vocab),
                value_id: p.value_segment.key(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub curve: Vec<LossPoint>,
    /// Sequences shortened to fit the token budget, summed over steps.
    pub truncated: usize,
}

/// Number of warm-up steps, `ceil(fraction * total)`.
pub fn warmup_steps(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).ceil() as usize
}

/// Learning rate at 1-based `step`: linear ramp over the warm-up steps, then
/// constant.
pub fn learning_rate_at(step: usize, config: &TrainConfig) -> f64 {
    let w = warmup_steps(config.warmup_fraction, config.steps);
    if w > 0 && step <= w {
        config.learning_rate * step as f64 / w as f64
    } else {
        config.learning_rate
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Chunk length for subtask interleaving: `max(1, round(ratio * batch))`.
pub fn interleave_chunk(ratio: f64, batch: usize) -> usize {
    ((ratio * batch as f64).round() as usize).max(1)
}

/// Draws batches as consecutive chunks, each chunk from a single subtask.
/// Subtasks are picked in proportion to their size; within a subtask,
/// examples are drawn without replacement and reshuffled once exhausted.
struct Sampler {
    groups: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    total: usize,
    distinct_values: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(examples: &[TrainingPair], seed: u64) -> Self {
        let mut groups = vec![Vec::new(); Subtask::ALL.len()];
        for (k, e) in examples.iter().enumerate() {
            groups[e.subtask as usize].push(k);
        }
        groups.retain(|g| !g.is_empty());
        let distinct_values = examples.iter().map(|e| &e.value_id).collect::<HashSet<_>>().len();
        Self {
            queues: vec![Vec::new(); groups.len()],
            total: examples.len(),
            groups,
            distinct_values,
            rng: rng_for(seed, "train/sampler"),
        }
    }

    fn draw(&mut self, g: usize) -> usize {
        if self.queues[g].is_empty() {
            let mut q = self.groups[g].clone();
            q.shuffle(&mut self.rng);
            q.reverse();
            self.queues[g] = q;
        }
        self.queues[g].pop().expect("groups are non-empty")
    }

    fn pick_group(&mut self) -> usize {
        let mut r = self.rng.gen_range(0..self.total);
        for (g, members) in self.groups.iter().enumerate() {
            if r < members.len() {
                return g;
            }
            r -= members.len();
        }
        unreachable!("r < total")
    }

    fn batch(&mut self, examples: &[TrainingPair], size: usize, chunk: usize) -> Vec<usize> {
        let target = size.min(self.distinct_values);
        let mut out = Vec::with_capacity(target);
        let mut seen = HashSet::with_capacity(target);
        let mut attempts = 0usize;
        while out.len() < target && attempts < 64 * target + 1024 {
            let g = self.pick_group();
            let mut taken = 0;
            let mut tries = 0;
            while taken < chunk && out.len() < target && tries < 4 * chunk + self.groups[g].len() {
                tries += 1;
                let k = self.draw(g);
                if seen.insert(examples[k].value_id.as_str()) {
                    out.push(k);
                    taken += 1;
                }
            }
            attempts += tries;
        }
        out
    }
}

/// Trains the reference encoder with InfoNCE over in-batch negatives,
/// cached gradients and Adam. Returns the final parameters and the per-step
/// loss curve.
pub fn train(
    examples: &[TrainingPair],
    images: &dyn ImageSource,
    config: &TrainConfig,
    init: Option<EncoderParams>,
) -> Result<TrainOutcome, EngineError> {
    config.check()?;
    if examples.is_empty() {
        return Err(EngineError::EmptyTrainSplit);
    }
    let mut params = init.unwrap_or_else(|| EncoderParams::init(config.vocab, config.dim, config.seed));
    let mut adam = Adam::new(params.param_count());
    let mut sampler = Sampler::new(examples, config.seed);
    let chunk = interleave_chunk(config.interleave_ratio, config.batch_size);
    let selection = TokenSelectConfig {
        mask_ratio: config.mask_ratio,
        delta: config.delta,
        mode: config.keep_mode,
        ..TokenSelectConfig::default()
    };
    let mut curve = Vec::with_capacity(config.steps);
    let mut truncated = 0;

    for step in 1..=config.steps {
        let rows = sampler.batch(examples, config.batch_size, chunk);
        let masking = Masking {
            config: &selection,
            seed: derive_seed(config.seed, &format!("train/mask/{step}")),
        };
        let mut batch: Vec<(EncoderInput, EncoderInput)> = Vec::with_capacity(rows.len());
        for &r in &rows {
            let (k, tk) = materialize(&examples[r].key, images, Some(masking), config.max_sequence_tokens)?;
            let (v, tv) = materialize(&examples[r].value, images, Some(masking), config.max_sequence_tokens)?;
            truncated += tk as usize + tv as usize;
            batch.push((k, v));
        }
        let grad_config = GradConfig {
            temperature: config.temperature,
            normalize: config.normalize,
            sub_batch_size: config.sub_batch_size.min(batch.len()),
            parallel: config.parallel,
        };
        let out = if grad_config.sub_batch_size >= batch.len() {
            grad_full(&batch, &params, &grad_config, None)
        } else {
            grad_cached(&batch, &params, &grad_config, None)
        }
        .map_err(|e| match e {
            EngineError::NonFinite(_) => EngineError::Diverged { step },
            other => other,
        })?;
        if !out.loss.is_finite() {
            return Err(EngineError::Diverged { step });
        }
        let lr = learning_rate_at(step, config);
        adam.step(&mut params, &out.grads, lr);
        if !params.is_finite() {
            return Err(EngineError::Diverged { step });
        }
        curve.push(LossPoint {
            step,
            loss: out.loss,
            lr,
        });
        log::debug!("step {step}: loss {:.6} lr {lr:.3e} batch {}", out.loss, batch.len());
    }
    Ok(TrainOutcome {
        params,
        curve,
        truncated,
    })
}

/// Loss curve as CSV with columns `step,loss,lr`.
pub fn write_loss_csv<W: Write>(mut w: W, curve: &[LossPoint]) -> std::io::Result<()> {
    writeln!(w, "step,loss,lr")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.loss, p.lr)?;
    }
    Ok(())
}

/// Trailing moving average with window `w`; entry `k` averages points
/// `k + 1 - w ..= k`. Empty when the curve is shorter than the window.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            steps: 256,
            learning_rate: 5e-5,
            warmup_fraction: 0.05,
            ..TrainConfig::default()
        };
        assert_eq!(warmup_steps(0.05, 256), 13);
        assert!((learning_rate_at(1, &cfg) - 5e-5 / 13.0).abs() < 1e-20);
        assert!((learning_rate_at(13, &cfg) - 5e-5).abs() < 1e-20);
        assert_eq!(learning_rate_at(200, &cfg), 5e-5);
    }

    #[test]
    fn interleave_chunks() {
        assert_eq!(interleave_chunk(0.2, 2048), 410);
        assert_eq!(interleave_chunk(0.2, 64), 13);
        assert_eq!(interleave_chunk(0.0, 64), 1);
        assert_eq!(interleave_chunk(1.0, 8), 8);
    }

    #[test]
    fn adam_with_zero_rate_leaves_params() {
        let mut p = EncoderParams::init(8, 4, 1);
        let before = p.clone();
        let mut g = EncoderParams::zeros(8, 4);
        g.iter_mut().enumerate().for_each(|(k, x)| *x = k as f64 - 3.0);
        Adam::new(p.param_count()).step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn loss_csv_header() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[LossPoint { step: 1, loss: 0.5, lr: 1e-3 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,lr\n1,0.5,0.001\n");
    }
}
