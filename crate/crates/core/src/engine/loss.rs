use super::EngineError;

/// Mean InfoNCE loss over the keys and its gradient with respect to both
/// embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_key: Vec<f64>,
    pub d_keys: Vec<Vec<f64>>,
    pub d_values: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-key loss and score gradient from a `B x B` similarity matrix whose
/// diagonal holds the positives. Scores are divided by `t` here.
///
/// Returns `(per_key_loss, dL/dscore)` with the loss averaged over keys.
pub fn info_nce_scores(scores: &[Vec<f64>], t: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>), EngineError> {
    if t.is_nan() || t <= 0.0 {
        return Err(EngineError::Temperature(t));
    }
    let b = scores.len();
    let mut per_key = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b);
    for (i, row) in scores.iter().enumerate() {
        if row.len() != b {
            return Err(EngineError::Shape(format!("score row {i} has {} entries, expected {b}", row.len())));
        }
        let logits: Vec<f64> = row.iter().map(|s| s / t).collect();
        if let Some(j) = logits.iter().position(|x| !x.is_finite()) {
            return Err(EngineError::NonFinite(format!("similarity ({i}, {j})")));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        per_key.push(m + sum.ln() - logits[i]);
        grad.push(
            exps.iter()
                .enumerate()
                .map(|(j, e)| (e / sum - if i == j { 1.0 } else { 0.0 }) / (t * b as f64))
                .collect(),
        );
    }
    Ok((per_key, grad))
}

/// InfoNCE with in-batch negatives: key `i`'s positive is value `i`, every
/// other value in the batch is a negative.
pub fn info_nce_loss(keys: &[Vec<f64>], values: &[Vec<f64>], t: f64) -> Result<LossOutput, EngineError> {
    if keys.len() != values.len() {
        return Err(EngineError::Shape(format!(
            "{} keys against {} values",
            keys.len(),
            values.len()
        )));
    }
    if keys.is_empty() {
        return Err(EngineError::Shape("empty batch".into()));
    }
    let scores: Vec<Vec<f64>> = keys
        .iter()
        .map(|k| values.iter().map(|v| dot(k, v)).collect())
        .collect();
    let (per_key, g) = info_nce_scores(&scores, t)?;
    let b = keys.len();
    let d = keys[0].len();
    let mut d_keys = vec![vec![0.0; d]; b];
    let mut d_values = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let gij = g[i][j];
            for k in 0..d {
                d_keys[i][k] += gij * values[j][k];
                d_values[j][k] += gij * keys[i][k];
            }
        }
    }
    let loss = per_key.iter().sum::<f64>() / b as f64;
    Ok(LossOutput {
        loss,
        per_key,
        d_keys,
        d_values,
    })
}
