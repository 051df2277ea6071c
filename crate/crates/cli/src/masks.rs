use std::fmt::Write;
use std::path::Path;

use image::Rgb;

use trajret_core::token_select::{build_components, mask_for_image, PatchGrid, TokenSelectConfig};
use trajret_core::trajectory::TrajectoryRecord;

use crate::config::PipelineConfig;
use crate::error::CliError;

/// Share of brightness left on dropped patches.
const DIM: f32 = 0.25;

/// Writes one overlay PNG per state for the first `report.mask_limit` states
/// and returns a TSV summary.
pub fn render_masks(
    corpus: &[TrajectoryRecord],
    image_root: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<String, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let selection = TokenSelectConfig {
        patch_size: cfg.images.patch_size,
        delta: cfg.train.delta,
        mask_ratio: cfg.train.mask_ratio,
        mode: cfg.train.keep_mode,
    };
    let mut tsv = String::from("state\tpatches\tcomponents\tkept\n");
    let states = corpus.iter().flat_map(|t| t.steps.iter().map(move |s| (t, &s.state)));
    for (t, state) in states.take(cfg.report.mask_limit) {
        let path = image_root.join(&state.screenshot.path);
        let mut img = image::open(&path)
            .map_err(|e| CliError::integrity(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let grid = PatchGrid::from_image(&img, selection.patch_size)
            .map_err(|e| CliError::integrity(format!("{}: {e}", path.display())))?;
        let components = build_components(&grid, selection.delta)
            .map_err(|e| CliError::integrity(e.to_string()))?
            .count;
        let mask = mask_for_image(&grid, &state.content_hash, cfg.train.seed, &selection)
            .map_err(|e| CliError::integrity(e.to_string()))?;
        let p = grid.patch_size;
        for (k, keep) in mask.keep.iter().enumerate() {
            if *keep {
                continue;
            }
            let (row, col) = grid.position(k);
            for y in row * p..(row + 1) * p {
                for x in col * p..(col + 1) * p {
                    let Rgb(c) = *img.get_pixel(x, y);
                    img.put_pixel(x, y, Rgb(c.map(|v| (v as f32 * DIM) as u8)));
                }
            }
        }
        let name = format!("{}_{}.png", t.id, state.index);
        img.save(out_dir.join(&name))
            .map_err(|e| CliError::user(format!("cannot write {name}: {e}")))?;
        let _ = writeln!(
            tsv,
            "{}/{}\t{}\t{components}\t{}",
            t.id,
            state.index,
            grid.len(),
            mask.realized_keep_count
        );
    }
    std::fs::write(out_dir.join("masks.tsv"), &tsv)?;
    Ok(tsv)
}
