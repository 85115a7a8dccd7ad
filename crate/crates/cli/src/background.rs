use std::path::{Path, PathBuf};

use gtp_core::{GtpError, Result};
use image::RgbImage;

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Frame files in `dir`, name-sorted, thinned evenly to at most `max`.
pub fn frame_paths(dir: &Path, max: usize) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(GtpError::Data(format!("no png/jpeg frames in {}", dir.display())));
    }
    if max > 0 && paths.len() > max {
        let n = paths.len();
        paths = (0..max).map(|i| paths[i * n / max].clone()).collect();
    }
    Ok(paths)
}

/// Per-pixel, per-channel median over equally sized frames. Even counts take
/// the lower middle value.
pub fn temporal_median(frames: &[RgbImage]) -> Result<RgbImage> {
    let first = frames
        .first()
        .ok_or_else(|| GtpError::Data("median of no frames".into()))?;
    let (w, h) = first.dimensions();
    if let Some(f) = frames.iter().find(|f| f.dimensions() != (w, h)) {
        return Err(GtpError::Data(format!(
            "frame size {:?} differs from {:?}",
            f.dimensions(),
            (w, h)
        )));
    }
    let mut out = RgbImage::new(w, h);
    let mut column = vec![0u8; frames.len()];
    for (i, px) in out.as_mut().iter_mut().enumerate() {
        for (c, f) in column.iter_mut().zip(frames) {
            *c = f.as_raw()[i];
        }
        let mid = (column.len() - 1) / 2;
        *px = *column.select_nth_unstable(mid).1;
    }
    Ok(out)
}

pub fn load_frames(paths: &[PathBuf]) -> Result<Vec<RgbImage>> {
    paths
        .iter()
        .map(|p| {
            image::open(p)
                .map(|i| i.to_rgb8())
                .map_err(|e| GtpError::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}
