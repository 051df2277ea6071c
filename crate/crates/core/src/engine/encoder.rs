use std::cell::Cell;

use rand::Rng;

use super::EncoderInput;
use crate::seed::rng_for;

pub const DEFAULT_VOCAB: usize = 4096;
pub const DEFAULT_DIM: usize = 64;
pub const PATCH_FEATURES: usize = 3;

/// Reference encoder weights, row-major.
///
/// `e` is the `vocab x dim` text table, `p` the `dim x 3` patch projection and
/// `w` the `dim x dim` output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: usize,
    pub dim: usize,
    pub e: Vec<f64>,
    pub p: Vec<f64>,
    pub w: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            e: vec![0.0; vocab * dim],
            p: vec![0.0; dim * PATCH_FEATURES],
            w: vec![0.0; dim * dim],
        }
    }

    /// Seeded initialization: small uniform text and patch weights, output
    /// projection near identity.
    pub fn init(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "encoder-init");
        let mut out = Self::zeros(vocab, dim);
        let scale = 1.0 / (dim as f64).sqrt();
        out.e.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0) * scale);
        out.p.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0) * scale);
        for r in 0..dim {
            for c in 0..dim {
                let noise = rng.gen_range(-0.01..0.01);
                out.w[r * dim + c] = if r == c { 1.0 + noise } else { noise };
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().chain(&self.p).chain(&self.w).all(|x| x.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.e.len() + self.p.len() + self.w.len()
    }

    fn pool(&self, input: &EncoderInput) -> Vec<f64> {
        let d = self.dim;
        let mut h = vec![0.0; d];
        for &b in &input.tokens {
            let row = &self.e[b as usize * d..(b as usize + 1) * d];
            h.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        for f in &input.patches {
            for (a, hv) in h.iter_mut().enumerate() {
                let pr = &self.p[a * PATCH_FEATURES..(a + 1) * PATCH_FEATURES];
                *hv += pr[0] * f[0] + pr[1] * f[1] + pr[2] * f[2];
            }
        }
        let n = input.len().max(1) as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward(&self, input: &EncoderInput, normalize: bool) -> Forward {
        let d = self.dim;
        let h = self.pool(input);
        let z: Vec<f64> = (0..d)
            .map(|r| self.w[r * d..(r + 1) * d].iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y = if normalize && norm > 0.0 {
            z.iter().map(|x| x / norm).collect()
        } else {
            z.clone()
        };
        Forward {
            h,
            norm,
            y,
            normalize,
        }
    }

    pub fn embed(&self, input: &EncoderInput, normalize: bool) -> Vec<f64> {
        self.forward(input, normalize).y
    }

    /// Accumulates the parameter gradient of `dy . y` into `grads`.
    pub fn backward(&self, input: &EncoderInput, fwd: &Forward, dy: &[f64], grads: &mut Grads) {
        let d = self.dim;
        let dz: Vec<f64> = if fwd.normalize {
            if fwd.norm == 0.0 {
                return;
            }
            let proj: f64 = fwd.y.iter().zip(dy).map(|(a, b)| a * b).sum();
            fwd.y
                .iter()
                .zip(dy)
                .map(|(y, g)| (g - y * proj) / fwd.norm)
                .collect()
        } else {
            dy.to_vec()
        };
        let mut dh = vec![0.0; d];
        for r in 0..d {
            let row = &self.w[r * d..(r + 1) * d];
            let grow = &mut grads.w[r * d..(r + 1) * d];
            for c in 0..d {
                grow[c] += dz[r] * fwd.h[c];
                dh[c] += row[c] * dz[r];
            }
        }
        let n = input.len().max(1) as f64;
        dh.iter_mut().for_each(|x| *x /= n);
        for &b in &input.tokens {
            let row = &mut grads.e[b as usize * d..(b as usize + 1) * d];
            row.iter_mut().zip(&dh).for_each(|(g, x)| *g += x);
        }
        for f in &input.patches {
            for (a, g) in dh.iter().enumerate() {
                let pr = &mut grads.p[a * PATCH_FEATURES..(a + 1) * PATCH_FEATURES];
                pr[0] += g * f[0];
                pr[1] += g * f[1];
                pr[2] += g * f[2];
            }
        }
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub h: Vec<f64>,
    pub norm: f64,
    pub y: Vec<f64>,
    pub normalize: bool,
}

/// Parameter gradients, laid out like [`EncoderParams`].
pub type Grads = EncoderParams;

impl EncoderParams {
    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.e
            .iter()
            .zip(&other.e)
            .chain(self.p.iter().zip(&other.p))
            .chain(self.w.iter().zip(&other.w))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.e.iter().chain(&self.p).chain(&self.w)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.e.iter_mut().chain(self.p.iter_mut()).chain(self.w.iter_mut())
    }
}

/// Counts forward activations held alive at once.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl ActivationMeter {
    pub fn acquire(&self, n: usize) {
        let live = self.live.get() + n;
        self.live.set(live);
        self.peak.set(self.peak.get().max(live));
    }

    pub fn release(&self, n: usize) {
        self.live.set(self.live.get() - n);
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> EncoderInput {
        EncoderInput {
            tokens: vec![3, 7, 3],
            patches: vec![[0.1, 0.5, 0.9], [0.2, 0.2, 0.2]],
        }
    }

    #[test]
    fn normalized_embeddings_have_unit_norm() {
        let p = EncoderParams::init(16, 8, 1);
        let y = p.embed(&input(), true);
        let n: f64 = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(y, p.embed(&input(), true));
    }

    #[test]
    fn patch_perturbation_moves_embedding() {
        let p = EncoderParams::init(16, 8, 1);
        let mut other = input();
        other.patches[1][2] += 0.01;
        assert_ne!(p.embed(&input(), true), p.embed(&other, true));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = EncoderParams::init(16, 6, 2);
        let dy: Vec<f64> = (0..6).map(|k| (k as f64 - 2.5) / 3.0).collect();
        let objective = |q: &EncoderParams| -> f64 {
            q.embed(&input(), true).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let mut g = EncoderParams::zeros(16, 6);
        p.backward(&input(), &p.forward(&input(), true), &dy, &mut g);
        let h = 1e-6;
        let total = p.param_count();
        for k in (0..total).step_by(7) {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.iter_mut().nth(k).unwrap() += h;
            *minus.iter_mut().nth(k).unwrap() -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = *g.iter().nth(k).unwrap();
            assert!((fd - an).abs() < 1e-7, "param {k}: {fd} vs {an}");
        }
    }

    #[test]
    fn meter_tracks_peak() {
        let m = ActivationMeter::default();
        m.acquire(3);
        m.release(2);
        m.acquire(1);
        assert_eq!((m.live(), m.peak()), (2, 3));
    }
}
