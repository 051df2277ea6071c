//! Synthetic corpora and toy batches for tests, demos and the CLI.
//!
//! Every generated trajectory gets its own pair of made-up words, used in the
//! query and repeated in the typed action values, and its own screenshot
//! palette, so queries and trajectories are separable by construction.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::Rng;

use crate::engine::{EncoderInput, InMemoryImages};
use crate::pairs::SilverSet;
use crate::seed::rng_for;
use crate::token_select::PatchGrid;
use crate::trajectory::{
    builtin_action_space, content_hash, write_manifest, ActionRecord, ActionValue, BBox, Screenshot, StateId,
    StateRecord, Step, TrajectoryRecord,
};

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "za", "bo", "de", "fi", "gu", "ha", "jo", "ke", "li",
    "mo", "ne", "po", "qu", "ri", "su",
];

const FRAMES: [&str; 5] = [
    "Please {x}",
    "I'd like to {x}",
    "Can you {x}?",
    "Help me {x}",
    "Go ahead and {x}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub trajectories: usize,
    pub min_steps: u32,
    pub max_steps: u32,
    pub image_size: u32,
    pub patch_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            trajectories: 50,
            min_steps: 1,
            max_steps: 6,
            image_size: 112,
            patch_size: 28,
            seed: 0,
        }
    }
}

/// A generated corpus with its screenshots.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub trajectories: Vec<TrajectoryRecord>,
    pub images: HashMap<StateId, RgbImage>,
    pub silver: HashMap<String, SilverSet>,
}

/// A pronounceable word unique to `k`.
pub fn pseudo_word(k: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}{}", SYLLABLES[k % n], SYLLABLES[(k / n) % n], SYLLABLES[(k / (n * n) + k) % n])
}

fn palette(k: usize) -> [u8; 3] {
    // Spread hues by walking the colour cube with co-prime strides.
    [
        (40 + (k * 67) % 176) as u8,
        (40 + (k * 113) % 176) as u8,
        (40 + (k * 151) % 176) as u8,
    ]
}

fn screenshot(size: u32, base: [u8; 3], step: u32, rng: &mut impl Rng) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb(base));
    // Header band in a darker shade, then a step-specific box.
    let header = Rgb(base.map(|c| c / 2));
    for y in 0..size / 4 {
        for x in 0..size {
            img.put_pixel(x, y, header);
        }
    }
    let accent = Rgb([
        (base[0] as u32 + 60 * step) as u8,
        base[1].wrapping_add(90),
        (255 - base[2] as u32 / 2) as u8,
    ]);
    let bx = rng.gen_range(0..size / 2);
    let by = rng.gen_range(size / 4..size / 2);
    for y in by..by + size / 3 {
        for x in bx..bx + size / 3 {
            img.put_pixel(x, y, accent);
        }
    }
    img
}

fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Five deterministic rewrites of `query`.
pub fn paraphrases(query: &str) -> Vec<String> {
    let mut chars = query.chars();
    let lowered = match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect::<String>(),
        None => String::new(),
    };
    let body = lowered.trim_end_matches('.');
    FRAMES.iter().map(|f| f.replace("{x}", body)).collect()
}

/// Generates a corpus. Step counts are uniform in `[min_steps, max_steps]`.
pub fn generate(config: &SynthConfig) -> SynthCorpus {
    let mut rng = rng_for(config.seed, "synth");
    let space = builtin_action_space("mind2web").expect("built-in action space");
    let mut trajectories = Vec::with_capacity(config.trajectories);
    let mut images = HashMap::new();
    let mut silver = HashMap::new();
    for k in 0..config.trajectories {
        let id = format!("syn-{k:04}");
        let (w1, w2) = (pseudo_word(2 * k + config.seed as usize), pseudo_word(2 * k + 1 + config.seed as usize));
        let query = format!("Find the {w1} {w2} listing");
        let n = rng.gen_range(config.min_steps..=config.max_steps);
        let base = palette(k);
        let mut steps = Vec::with_capacity(n as usize);
        for i in 1..=n {
            let img = screenshot(config.image_size, base, i, &mut rng);
            let hash = content_hash(&png_bytes(&img));
            let (operation, value) = if i % 2 == 1 {
                ("type", Some(ActionValue::Text(format!("{w1} {w2}"))))
            } else {
                ("click", None)
            };
            let x = rng.gen_range(0.0..0.6);
            let y = rng.gen_range(0.0..0.6);
            steps.push(Step {
                state: StateRecord {
                    index: i,
                    screenshot: Screenshot {
                        path: format!("img/{id}/{i}.png"),
                        width: config.image_size,
                        height: config.image_size,
                    },
                    description: format!("Listing page {i} showing {w1} {w2}."),
                    content_hash: hash,
                },
                action: ActionRecord {
                    operation: operation.to_string(),
                    value,
                    target: Some(BBox {
                        x,
                        y,
                        width: rng.gen_range(0.05..0.4),
                        height: rng.gen_range(0.05..0.4),
                    }),
                },
            });
            images.insert(StateId::new(&id, i), img);
        }
        silver.insert(
            id.clone(),
            SilverSet {
                trajectory_id: id.clone(),
                gold_query: query.clone(),
                rewrites: paraphrases(&query),
            },
        );
        trajectories.push(TrajectoryRecord {
            id,
            source: "mind2web".into(),
            query,
            action_space: space.clone(),
            steps,
        });
    }
    SynthCorpus {
        trajectories,
        images,
        silver,
    }
}

impl SynthCorpus {
    /// Patch grids of every screenshot, keyed by state.
    pub fn image_source(&self, patch_size: u32) -> InMemoryImages {
        let mut out = InMemoryImages::default();
        for t in &self.trajectories {
            for s in &t.steps {
                let id = StateId::new(&t.id, s.state.index);
                let grid = PatchGrid::from_image(&self.images[&id], patch_size).expect("positive patch size");
                out.insert(id, grid, s.state.content_hash.clone());
            }
        }
        out
    }

    /// Writes `manifest.jsonl` and the PNG screenshots below `root`.
    pub fn write(&self, root: &Path) -> std::io::Result<()> {
        for t in &self.trajectories {
            for s in &t.steps {
                let path = root.join(&s.state.screenshot.path);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let img = &self.images[&StateId::new(&t.id, s.state.index)];
                std::fs::write(path, png_bytes(img))?;
            }
        }
        write_manifest(&root.join("manifest.jsonl"), &self.trajectories).map_err(std::io::Error::other)
    }
}

/// Random encoder inputs for gradient checks: `b` aligned pairs with 1 to 8
/// tokens and 0 to 5 patches each.
pub fn random_batch(b: usize, vocab: usize, seed: u64) -> Vec<(EncoderInput, EncoderInput)> {
    let mut rng = rng_for(seed, "random-batch");
    let one = |rng: &mut rand_chacha::ChaCha8Rng| EncoderInput {
        tokens: (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        patches: (0..rng.gen_range(0..=5))
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect(),
    };
    (0..b).map(|_| (one(&mut rng), one(&mut rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::validate_trajectory;

    #[test]
    fn words_are_unique() {
        let words: std::collections::HashSet<String> = (0..2000).map(pseudo_word).collect();
        assert_eq!(words.len(), 2000);
    }

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let cfg = SynthConfig {
            trajectories: 5,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.trajectories, b.trajectories);
        for t in &a.trajectories {
            assert!(validate_trajectory(t).is_pass(), "{}", validate_trajectory(t));
            assert!(a.silver[&t.id].violations().is_empty());
        }
        assert_eq!(a.image_source(28).len(), a.images.len());
    }

    #[test]
    fn paraphrase_frames() {
        let p = paraphrases("Buy a t-shirt.");
        assert_eq!(p[0], "Please buy a t-shirt");
        assert_eq!(p[2], "Can you buy a t-shirt?");
        assert_eq!(p.len(), 5);
    }
}
