use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::EngineError;
use crate::context::{ContextSequence, Element};
use crate::seed::fnv1a64;
use crate::token_select::{apply_mask, mask_for_image, PatchGrid, TokenSelectConfig};
use crate::trajectory::{StateId, TrajectoryRecord};

/// Source of patch grids and content hashes for image slots.
pub trait ImageSource: Sync {
    fn grid(&self, id: &StateId) -> Option<&PatchGrid>;
    fn content_hash(&self, id: &StateId) -> &str;
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryImages {
    entries: HashMap<StateId, (PatchGrid, String)>,
}

impl InMemoryImages {
    pub fn insert(&mut self, id: StateId, grid: PatchGrid, content_hash: String) {
        self.entries.insert(id, (grid, content_hash));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every screenshot of `corpus` below `root` into a patch grid.
    pub fn load(root: &Path, corpus: &[TrajectoryRecord], patch_size: u32) -> Result<Self, EngineError> {
        let jobs: Vec<(StateId, &str, &str)> = corpus
            .iter()
            .flat_map(|t| {
                t.steps.iter().map(move |s| {
                    (
                        StateId::new(&t.id, s.state.index),
                        s.state.screenshot.path.as_str(),
                        s.state.content_hash.as_str(),
                    )
                })
            })
            .collect();
        let loaded: Vec<(StateId, PatchGrid, String)> = jobs
            .into_par_iter()
            .map(|(id, rel, hash)| {
                let path = root.join(rel);
                let img = image::open(&path)
                    .map_err(|e| EngineError::Image {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?
                    .to_rgb8();
                let grid = PatchGrid::from_image(&img, patch_size)?;
                Ok((id, grid, hash.to_string()))
            })
            .collect::<Result<_, EngineError>>()?;
        let mut out = Self::default();
        for (id, grid, hash) in loaded {
            out.insert(id, grid, hash);
        }
        Ok(out)
    }
}

impl ImageSource for InMemoryImages {
    fn grid(&self, id: &StateId) -> Option<&PatchGrid> {
        self.entries.get(id).map(|(g, _)| g)
    }

    fn content_hash(&self, id: &StateId) -> &str {
        self.entries.get(id).map(|(_, h)| h.as_str()).unwrap_or("")
    }
}

/// Word-level tokens: maximal alphanumeric runs, lowercased, and single
/// punctuation characters. Whitespace is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn bucket(token: &str, vocab: usize) -> u32 {
    (fnv1a64(token.as_bytes()) % vocab as u64) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    Token(u32),
    Image(StateId),
}

/// A tokenized sequence split into a protected head (query and action-space
/// preamble) and one block per observation/action step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedSequence {
    items: Vec<Item>,
    /// Start of each step block in `items`; everything before the first is
    /// protected from truncation.
    blocks: Vec<usize>,
}

impl PreparedSequence {
    pub fn new(seq: &ContextSequence, vocab: usize) -> Self {
        let mut items = Vec::new();
        let mut blocks = Vec::new();
        let push_text = |items: &mut Vec<Item>, text: &str| {
            items.extend(tokenize(text).iter().map(|t| Item::Token(bucket(t, vocab))));
        };
        for (k, e) in seq.elements.iter().enumerate() {
            match e {
                Element::Text(text) => {
                    let next_is_image = matches!(seq.elements.get(k + 1), Some(Element::Image(_)));
                    match text.rfind("Observation").filter(|_| next_is_image) {
                        // The observation label opens the next block.
                        Some(cut) => {
                            push_text(&mut items, &text[..cut]);
                            blocks.push(items.len());
                            push_text(&mut items, &text[cut..]);
                        }
                        None => push_text(&mut items, text),
                    }
                }
                Element::Image(id) => items.push(Item::Image(id.clone())),
            }
        }
        Self { items, blocks }
    }

    pub fn token_count(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, Item::Token(_))).count()
    }
}

/// Encoder-ready input: text buckets and patch features scaled to `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<u32>,
    pub patches: Vec<[f64; 3]>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.tokens.len() + self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optional training-time masking: selection config plus the step seed.
#[derive(Debug, Clone, Copy)]
pub struct Masking<'a> {
    pub config: &'a TokenSelectConfig,
    pub seed: u64,
}

enum Unit {
    Token(u32),
    Patch([f64; 3]),
}

/// Resolves image slots, applies masks and enforces `max_tokens` by dropping
/// the oldest steps first. Returns the input and whether it was truncated.
pub fn materialize(
    prepared: &PreparedSequence,
    images: &dyn ImageSource,
    masking: Option<Masking<'_>>,
    max_tokens: usize,
) -> Result<(EncoderInput, bool), EngineError> {
    // Units per region: region 0 is protected, region b + 1 is step block b.
    let mut regions: Vec<Vec<Unit>> = vec![Vec::new()];
    let mut next_block = 0;
    for (k, item) in prepared.items.iter().enumerate() {
        while next_block < prepared.blocks.len() && prepared.blocks[next_block] == k {
            regions.push(Vec::new());
            next_block += 1;
        }
        let region = regions.last_mut().expect("region 0 exists");
        match item {
            Item::Token(b) => region.push(Unit::Token(*b)),
            Item::Image(id) => {
                let grid = images.grid(id).ok_or_else(|| EngineError::MissingImage(id.clone()))?;
                let scaled = |f: &[f64; 3]| [f[0] / 255.0, f[1] / 255.0, f[2] / 255.0];
                match masking {
                    Some(m) if m.config.mask_ratio > 0.0 => {
                        let mask = mask_for_image(grid, images.content_hash(id), m.seed, m.config)?;
                        let kept = apply_mask(&grid.features, &mask)?;
                        region.extend(kept.iter().map(|f| Unit::Patch(scaled(f))));
                    }
                    _ => region.extend(grid.features.iter().map(|f| Unit::Patch(scaled(f)))),
                }
            }
        }
    }

    let mut total: usize = regions.iter().map(Vec::len).sum();
    let mut truncated = false;
    let mut first = 1;
    while total > max_tokens && first + 1 < regions.len() {
        total -= regions[first].len();
        regions[first].clear();
        first += 1;
        truncated = true;
    }
    if total > max_tokens && first < regions.len() {
        let cut = (total - max_tokens).min(regions[first].len());
        regions[first].drain(..cut);
        total -= cut;
        truncated = true;
    }
    if total > max_tokens {
        log::warn!("protected query and preamble alone exceed {max_tokens} tokens");
    } else if truncated {
        log::warn!("sequence truncated from the front to {max_tokens} tokens");
    }

    let mut input = EncoderInput::default();
    for unit in regions.into_iter().flatten() {
        match unit {
            Unit::Token(b) => input.tokens.push(b),
            Unit::Patch(f) => input.patches.push(f),
        }
    }
    Ok((input, truncated))
}
