//! Token selection over screenshot patch grids.
//!
//! Neighbouring patches with near-identical colour are joined into
//! components; each redundant component keeps only a share of its patches.
//! Used during training only.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

pub const DEFAULT_PATCH_SIZE: u32 = 28;

/// Guard against `(1 - r) * m` landing a hair above an integer.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TokenSelectError {
    #[error("grid {rows}x{cols} needs {expected} features, got {found}")]
    FeatureCount {
        rows: u32,
        cols: u32,
        expected: usize,
        found: usize,
    },
    #[error("patch size must be positive")]
    PatchSize,
    #[error("image buffer of {found} bytes does not match {width}x{height} RGB")]
    Buffer { width: u32, height: u32, found: usize },
    #[error("mask ratio must lie in [0, 1), got {0}")]
    Ratio(f64),
    #[error("similarity threshold must be non-negative, got {0}")]
    Delta(f64),
    #[error("mask covers {mask} patches but the sequence has {positions}")]
    LengthMismatch { mask: usize, positions: usize },
}

/// Mean RGB per patch, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
    pub patch_size: u32,
    pub features: Vec<[f64; 3]>,
}

impl PatchGrid {
    pub fn new(rows: u32, cols: u32, patch_size: u32, features: Vec<[f64; 3]>) -> Result<Self, TokenSelectError> {
        if patch_size == 0 {
            return Err(TokenSelectError::PatchSize);
        }
        let expected = rows as usize * cols as usize;
        if features.len() != expected {
            return Err(TokenSelectError::FeatureCount {
                rows,
                cols,
                expected,
                found: features.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            patch_size,
            features,
        })
    }

    /// Grid over a packed RGB8 buffer. Edge patches that overhang the image
    /// average only the pixels they cover.
    pub fn from_rgb(width: u32, height: u32, rgb: &[u8], patch_size: u32) -> Result<Self, TokenSelectError> {
        if patch_size == 0 {
            return Err(TokenSelectError::PatchSize);
        }
        if rgb.len() != width as usize * height as usize * 3 {
            return Err(TokenSelectError::Buffer {
                width,
                height,
                found: rgb.len(),
            });
        }
        let rows = height.div_ceil(patch_size);
        let cols = width.div_ceil(patch_size);
        let mut sums = vec![[0.0f64; 3]; rows as usize * cols as usize];
        let mut counts = vec![0u32; sums.len()];
        for y in 0..height {
            let row = (y / patch_size) as usize;
            for x in 0..width {
                let p = row * cols as usize + (x / patch_size) as usize;
                let off = (y as usize * width as usize + x as usize) * 3;
                for c in 0..3 {
                    sums[p][c] += rgb[off + c] as f64;
                }
                counts[p] += 1;
            }
        }
        for (s, n) in sums.iter_mut().zip(&counts) {
            for v in s.iter_mut() {
                *v /= *n as f64;
            }
        }
        Self::new(rows, cols, patch_size, sums)
    }

    pub fn from_image(img: &image::RgbImage, patch_size: u32) -> Result<Self, TokenSelectError> {
        Self::from_rgb(img.width(), img.height(), img.as_raw(), patch_size)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// `(row, col)` of patch `k`.
    pub fn position(&self, k: usize) -> (u32, u32) {
        ((k / self.cols as usize) as u32, (k % self.cols as usize) as u32)
    }
}

/// All `(row, col)` positions of a grid, row-major.
pub fn grid_positions(rows: u32, cols: u32) -> Vec<(u32, u32)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
    }
}

/// Component label per patch; a label is the smallest patch index in its
/// component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLabeling {
    pub labels: Vec<usize>,
    pub count: usize,
}

impl ComponentLabeling {
    /// Patch indices per component, keyed by label.
    pub fn components(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(k);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.components().values().map(Vec::len).collect()
    }
}

fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Components under 4-neighbour adjacency where the L∞ RGB distance between
/// patch means is at most `delta`.
pub fn build_components(grid: &PatchGrid, delta: f64) -> Result<ComponentLabeling, TokenSelectError> {
    if delta.is_nan() || delta < 0.0 {
        return Err(TokenSelectError::Delta(delta));
    }
    let (rows, cols) = (grid.rows as usize, grid.cols as usize);
    let mut uf = UnionFind::new(grid.len());
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            if c + 1 < cols && linf(&grid.features[k], &grid.features[k + 1]) <= delta {
                uf.union(k, k + 1);
            }
            if r + 1 < rows && linf(&grid.features[k], &grid.features[k + cols]) <= delta {
                uf.union(k, k + cols);
            }
        }
    }
    let mut smallest = vec![usize::MAX; grid.len()];
    let roots: Vec<usize> = (0..grid.len()).map(|k| uf.find(k)).collect();
    for (k, &root) in roots.iter().enumerate() {
        smallest[root] = smallest[root].min(k);
    }
    let labels: Vec<usize> = roots.iter().map(|&root| smallest[root]).collect();
    let count = labels.iter().enumerate().filter(|(k, l)| k == *l).count();
    Ok(ComponentLabeling { labels, count })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepMode {
    /// Uniformly random patches within each component.
    #[default]
    Random,
    /// The lowest-index patches of each component.
    FirstPatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub keep: Vec<bool>,
    pub realized_keep_count: usize,
}

impl SelectionMask {
    pub fn identity(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            realized_keep_count: n,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Alternating run lengths, starting with a (possibly empty) kept run.
    pub fn run_lengths(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = true;
        let mut len = 0;
        for &k in &self.keep {
            if k == current {
                len += 1;
            } else {
                runs.push(len);
                current = k;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_run_lengths(runs: &[usize]) -> Self {
        let mut keep = Vec::with_capacity(runs.iter().sum());
        for (k, &n) in runs.iter().enumerate() {
            keep.extend(std::iter::repeat_n(k % 2 == 0, n));
        }
        let realized_keep_count = keep.iter().filter(|k| **k).count();
        Self {
            keep,
            realized_keep_count,
        }
    }
}

/// Patches kept in a component of `m` patches at mask ratio `r`.
pub fn keep_count(m: usize, r: f64) -> usize {
    if m <= 1 {
        return m;
    }
    (((1.0 - r) * m as f64 - CEIL_SLACK).ceil() as usize).clamp(1, m)
}

/// Keep-mask at ratio `r`. Every component of `m > 1` patches keeps
/// `max(1, ceil((1 - r) m))` of them; singletons are always kept.
pub fn select_tokens(
    labeling: &ComponentLabeling,
    r: f64,
    seed: u64,
    mode: KeepMode,
) -> Result<SelectionMask, TokenSelectError> {
    if r.is_nan() || !(0.0..1.0).contains(&r) {
        return Err(TokenSelectError::Ratio(r));
    }
    let mut keep = vec![false; labeling.labels.len()];
    let mut rng = rng_for(seed, "token-select");
    for members in labeling.components().values() {
        let m = members.len();
        let k = keep_count(m, r);
        if k == m {
            members.iter().for_each(|&p| keep[p] = true);
            continue;
        }
        match mode {
            KeepMode::Random => {
                for pick in sample(&mut rng, m, k) {
                    keep[members[pick]] = true;
                }
            }
            KeepMode::FirstPatch => members[..k].iter().for_each(|&p| keep[p] = true),
        }
    }
    let realized_keep_count = keep.iter().filter(|k| **k).count();
    Ok(SelectionMask {
        keep,
        realized_keep_count,
    })
}

/// Drops masked positions; kept ones retain their original grid coordinates.
pub fn apply_mask<T: Clone>(positions: &[T], mask: &SelectionMask) -> Result<Vec<T>, TokenSelectError> {
    if positions.len() != mask.keep.len() {
        return Err(TokenSelectError::LengthMismatch {
            mask: mask.keep.len(),
            positions: positions.len(),
        });
    }
    Ok(positions
        .iter()
        .zip(&mask.keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| p.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSelectConfig {
    pub patch_size: u32,
    pub delta: f64,
    pub mask_ratio: f64,
    pub mode: KeepMode,
}

impl Default for TokenSelectConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            delta: 0.0,
            mask_ratio: 0.5,
            mode: KeepMode::Random,
        }
    }
}

/// Mask for one image. The stream is keyed by the image's content hash so the
/// same screenshot gets the same mask wherever it appears.
pub fn mask_for_image(
    grid: &PatchGrid,
    content_hash: &str,
    seed: u64,
    config: &TokenSelectConfig,
) -> Result<SelectionMask, TokenSelectError> {
    let labeling = build_components(grid, config.delta)?;
    select_tokens(
        &labeling,
        config.mask_ratio,
        crate::seed::derive_seed(seed, content_hash),
        config.mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: u32, cols: u32, colors: &[u8]) -> PatchGrid {
        let f = colors.iter().map(|&c| [c as f64; 3]).collect();
        PatchGrid::new(rows, cols, 28, f).unwrap()
    }

    #[test]
    fn uniform_grid_is_one_component() {
        let l = build_components(&grid(3, 4, &[7; 12]), 0.0).unwrap();
        assert_eq!(l.count, 1);
        assert!(l.labels.iter().all(|&x| x == 0));
    }

    #[test]
    fn checkerboard_is_all_singletons() {
        let colors: Vec<u8> = (0..16).map(|k| if (k / 4 + k % 4) % 2 == 0 { 0 } else { 255 }).collect();
        let l = build_components(&grid(4, 4, &colors), 10.0).unwrap();
        assert_eq!(l.count, 16);
        let m = select_tokens(&l, 0.5, 3, KeepMode::Random).unwrap();
        assert_eq!(m, SelectionMask::identity(16));
    }

    #[test]
    fn two_columns() {
        let l = build_components(&grid(2, 2, &[0, 255, 0, 255]), 0.0).unwrap();
        assert_eq!(l.labels, [0, 1, 0, 1]);
        assert_eq!(l.sizes(), [2, 2]);
        let m = select_tokens(&l, 0.5, 9, KeepMode::Random).unwrap();
        assert_eq!(m.realized_keep_count, 2);
        assert!(m.keep[0] ^ m.keep[2]);
        assert!(m.keep[1] ^ m.keep[3]);
        let f = select_tokens(&l, 0.5, 9, KeepMode::FirstPatch).unwrap();
        assert_eq!(f.keep, [true, true, false, false]);
    }

    #[test]
    fn threshold_joins_close_colours() {
        let g = grid(1, 3, &[10, 14, 30]);
        assert_eq!(build_components(&g, 4.0).unwrap().count, 2);
        assert_eq!(build_components(&g, 3.9).unwrap().count, 3);
        assert!(build_components(&g, -1.0).is_err());
    }

    #[test]
    fn keep_count_rule() {
        assert_eq!(keep_count(2, 0.5), 1);
        assert_eq!(keep_count(3, 0.5), 2);
        assert_eq!(keep_count(10, 0.7), 3);
        assert_eq!(keep_count(5, 0.99), 1);
        assert_eq!(keep_count(5, 0.0), 5);
        assert_eq!(keep_count(1, 0.9), 1);
    }

    #[test]
    fn ratio_out_of_range() {
        let l = build_components(&grid(1, 2, &[0, 0]), 0.0).unwrap();
        assert_eq!(select_tokens(&l, 1.0, 0, KeepMode::Random), Err(TokenSelectError::Ratio(1.0)));
    }

    #[test]
    fn partial_edge_patches_average_covered_pixels() {
        // 3x2 image, patch size 2: columns {0,1} and {2}.
        let rgb: Vec<u8> = [10, 20, 90, 30, 40, 90].iter().flat_map(|&v| [v; 3]).collect();
        let g = PatchGrid::from_rgb(3, 2, &rgb, 2).unwrap();
        assert_eq!((g.rows, g.cols), (1, 2));
        assert_eq!(g.features[0], [25.0; 3]);
        assert_eq!(g.features[1], [90.0; 3]);
    }

    #[test]
    fn apply_mask_keeps_positions() {
        let pos = grid_positions(2, 2);
        let mask = SelectionMask {
            keep: vec![true, false, true, true],
            realized_keep_count: 3,
        };
        assert_eq!(apply_mask(&pos, &mask).unwrap(), [(0, 0), (1, 0), (1, 1)]);
        assert!(matches!(
            apply_mask(&pos[..3], &mask),
            Err(TokenSelectError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn run_length_round_trip() {
        let mask = SelectionMask::from_run_lengths(&[0, 2, 3, 1]);
        assert_eq!(mask.keep, [false, false, true, true, true, false]);
        assert_eq!(mask.run_lengths(), [0, 2, 3, 1]);
        assert_eq!(mask.realized_keep_count, 3);
    }
}
