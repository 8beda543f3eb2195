use std::path::{Path, PathBuf};

use harmony_core::imaging::RgbImage;

use crate::CliError;

const GAP: usize = 4;

/// Tiles `rows × columns` images into one picture with white gutters. Every
/// cell is resized to `cell × cell`.
pub fn tile(rows: &[Vec<RgbImage>], cell: usize) -> Result<RgbImage, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage("grid rows must be nonempty and equally long".into()));
    }
    if cell == 0 {
        return Err(CliError::Usage("grid cell size must be positive".into()));
    }
    let width = cols * cell + (cols + 1) * GAP;
    let height = rows.len() * cell + (rows.len() + 1) * GAP;
    let mut out = RgbImage::filled(width, height, [1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let img = img.resize(cell, cell);
            let (x0, y0) = (GAP + c * (cell + GAP), GAP + r * (cell + GAP));
            for ch in 0..3 {
                for y in 0..cell {
                    for x in 0..cell {
                        out.set(ch, y0 + y, x0 + x, img.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn report_grid(
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    gts: &[PathBuf],
    cell: usize,
    out: &Path,
) -> Result<(), CliError> {
    if inputs.len() != outputs.len() || inputs.len() != gts.len() {
        return Err(CliError::Usage(format!(
            "grid lists differ in length: {} inputs, {} outputs, {} ground truths",
            inputs.len(),
            outputs.len(),
            gts.len()
        )));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    for ((i, o), g) in inputs.iter().zip(outputs).zip(gts) {
        rows.push(vec![RgbImage::load(i)?, RgbImage::load(o)?, RgbImage::load(g)?]);
    }
    let grid = tile(&rows, cell)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    grid.save_png(out)?;
    Ok(())
}
