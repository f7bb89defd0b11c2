//! Frame sampling and strip compositing for video inputs.
//!
//! A video enters the judge as a single 1536x512 image: three frames
//! (first, midpoint, last) letterboxed into 512x512 tiles and laid out
//! left to right, each labeled "Frame k" so the judge can refer to
//! positions in time. Labels are burned into the pixels; the judge reads
//! them, so they must survive any re-encoding.

use std::collections::HashSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};
use thiserror::Error;

use crate::model::{ImagePayload, TimedFrame};

pub const TILE_SIZE: u32 = 512;
pub const STRIP_WIDTH: u32 = 3 * TILE_SIZE;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("image has a zero dimension")]
    ZeroDimensionImage,
    #[error("a strip takes exactly 3 frames, got {0}")]
    WrongFrameCount(usize),
    #[error("visual source not found: {0}")]
    SourceNotFound(PathBuf),
    #[error("source is a video file but no decoder command is configured")]
    DecoderMissing,
    #[error("decoder exited with {status}: {stderr}")]
    DecoderFailed { status: String, stderr: String },
    #[error("could not read image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Sampling and tiling
// ---------------------------------------------------------------------------

/// Picks the first frame, the midpoint frame, and the last frame.
/// Midpoint is floor((n-1)/2), which stays valid for every n and sits at
/// the exact center for odd counts.
pub fn sample_indices(frame_count: usize) -> Result<(usize, usize, usize), VisionError> {
    if frame_count == 0 {
        return Err(VisionError::EmptyVideo);
    }
    Ok((0, (frame_count - 1) / 2, frame_count - 1))
}

/// Scales a frame to fit inside one 512x512 tile, preserving aspect
/// ratio, centered on black. A frame that already fits is placed without
/// resampling.
pub fn fit_tile(frame: &RgbImage) -> Result<RgbImage, VisionError> {
    let (width, height) = frame.dimensions();
    if width == 0 || height == 0 {
        return Err(VisionError::ZeroDimensionImage);
    }
    if (width, height) == (TILE_SIZE, TILE_SIZE) {
        return Ok(frame.clone());
    }
    let scale = f64::min(
        f64::from(TILE_SIZE) / f64::from(width),
        f64::from(TILE_SIZE) / f64::from(height),
    );
    let target_w = ((f64::from(width) * scale).round() as u32).clamp(1, TILE_SIZE);
    let target_h = ((f64::from(height) * scale).round() as u32).clamp(1, TILE_SIZE);
    let scaled = if (target_w, target_h) == (width, height) {
        frame.clone()
    } else {
        imageops::resize(frame, target_w, target_h, FilterType::Triangle)
    };
    let mut tile = RgbImage::new(TILE_SIZE, TILE_SIZE);
    let x = i64::from((TILE_SIZE - target_w) / 2);
    let y = i64::from((TILE_SIZE - target_h) / 2);
    imageops::replace(&mut tile, &scaled, x, y);
    Ok(tile)
}

// ---------------------------------------------------------------------------
// Label rendering
// ---------------------------------------------------------------------------

const GLYPH_WIDTH: u32 = 5;
const GLYPH_HEIGHT: u32 = 7;
const GLYPH_ADVANCE: u32 = GLYPH_WIDTH + 1;
const LABEL_BASELINE: u32 = 8;
const LABEL_LEFT: u32 = 8;
const LABEL_FILL: Rgb<u8> = Rgb([255, 255, 255]);
const LABEL_OUTLINE: Rgb<u8> = Rgb([16, 16, 16]);

fn glyph(c: char) -> Option<[&'static str; 7]> {
    let rows = match c {
        'F' => [
            "#####", "#....", "#....", "####.", "#....", "#....", "#....",
        ],
        'r' => [
            ".....", ".....", "#.##.", "##..#", "#....", "#....", "#....",
        ],
        'a' => [
            ".....", ".....", ".###.", "....#", ".####", "#...#", ".####",
        ],
        'm' => [
            ".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#",
        ],
        'e' => [
            ".....", ".....", ".###.", "#...#", "#####", "#....", ".###.",
        ],
        '1' => [
            "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
        ],
        '2' => [
            ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
        ],
        '3' => [
            ".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###.",
        ],
        ' ' => {
            return Some([
                ".....", ".....", ".....", ".....", ".....", ".....", ".....",
            ])
        }
        _ => return None,
    };
    Some(rows)
}

/// Burns `text` into the image, white on a one-pixel dark outline, with
/// the glyph baseline `LABEL_BASELINE` rows below the top edge.
fn draw_label(image: &mut RgbImage, origin_x: u32, text: &str) {
    let top = i64::from(LABEL_BASELINE) + 1 - i64::from(GLYPH_HEIGHT);
    let mut lit: HashSet<(i64, i64)> = HashSet::new();
    let mut pen_x = i64::from(origin_x);
    for c in text.chars() {
        let Some(rows) = glyph(c) else {
            pen_x += i64::from(GLYPH_ADVANCE);
            continue;
        };
        for (dy, row) in rows.iter().enumerate() {
            for (dx, cell) in row.bytes().enumerate() {
                if cell == b'#' {
                    lit.insert((pen_x + dx as i64, top + dy as i64));
                }
            }
        }
        pen_x += i64::from(GLYPH_ADVANCE);
    }
    let mut paint = |x: i64, y: i64, color: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < image.width() && (y as u32) < image.height() {
            image.put_pixel(x as u32, y as u32, color);
        }
    };
    for &(x, y) in &lit {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if !lit.contains(&(x + dx, y + dy)) {
                    paint(x + dx, y + dy, LABEL_OUTLINE);
                }
            }
        }
    }
    for &(x, y) in &lit {
        paint(x, y, LABEL_FILL);
    }
}

// ---------------------------------------------------------------------------
// Strip composition
// ---------------------------------------------------------------------------

/// The composite image sent to the judge in place of a video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStrip {
    /// 1536x512, tiles left to right in temporal order.
    pub pixels: RgbImage,
    /// Positions of the tiles in the original frame list.
    pub tile_sources: [usize; 3],
    pub labels: [String; 3],
}

/// Letterboxes three frames into tiles and lays them out left to right,
/// labeling each tile in its top-left corner. `tile_sources` records
/// where each frame sat in the source video.
pub fn compose_strip(
    frames: &[RgbImage],
    tile_sources: [usize; 3],
) -> Result<FrameStrip, VisionError> {
    if frames.len() != 3 {
        return Err(VisionError::WrongFrameCount(frames.len()));
    }
    let mut pixels = RgbImage::new(STRIP_WIDTH, TILE_SIZE);
    let mut labels: [String; 3] = Default::default();
    for (index, frame) in frames.iter().enumerate() {
        let tile = fit_tile(frame)?;
        let origin_x = index as u32 * TILE_SIZE;
        imageops::replace(&mut pixels, &tile, i64::from(origin_x), 0);
        let label = format!("Frame {}", index + 1);
        draw_label(&mut pixels, origin_x + LABEL_LEFT, &label);
        labels[index] = label;
    }
    Ok(FrameStrip {
        pixels,
        tile_sources,
        labels,
    })
}

/// Full sampling pipeline: pick first/mid/last from a frame list and
/// composite them.
pub fn strip_from_frames(frames: &[TimedFrame]) -> Result<FrameStrip, VisionError> {
    let (first, mid, last) = sample_indices(frames.len())?;
    let picked = [
        frames[first].image.clone(),
        frames[mid].image.clone(),
        frames[last].image.clone(),
    ];
    compose_strip(&picked, [first, mid, last])
}

impl FrameStrip {
    /// Encodes the strip as a PNG attachment.
    pub fn to_payload(&self) -> Result<ImagePayload, VisionError> {
        let mut png = Vec::new();
        image::DynamicImage::ImageRgb8(self.pixels.clone())
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| VisionError::BadImage(e.to_string()))?;
        Ok(ImagePayload { png })
    }
}

// ---------------------------------------------------------------------------
// Frame and image loading
// ---------------------------------------------------------------------------

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn frames_from_directory(dir: &Path) -> Result<Vec<TimedFrame>, VisionError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|path| path.is_file() && is_image_file(path))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(VisionError::EmptyVideo);
    }
    paths
        .into_iter()
        .enumerate()
        .map(|(index, path)| {
            let image = image::open(&path)
                .map_err(|e| VisionError::BadImage(format!("{}: {e}", path.display())))?
                .to_rgb8();
            Ok(TimedFrame {
                image,
                timestamp: index as f64,
            })
        })
        .collect()
}

/// Loads the frames of a video source.
///
/// A directory is treated as pre-decoded frames: its image files, in
/// lexicographic name order. A video file is handed to the configured
/// decoder command, which must write numbered stills into the directory
/// substituted for `{outdir}`.
pub fn extract_frames(
    source: &Path,
    decoder_cmd: Option<&str>,
) -> Result<Vec<TimedFrame>, VisionError> {
    if !source.exists() {
        return Err(VisionError::SourceNotFound(source.to_path_buf()));
    }
    if source.is_dir() {
        return frames_from_directory(source);
    }
    let template = decoder_cmd.ok_or(VisionError::DecoderMissing)?;
    let outdir = tempfile::tempdir()?;
    let command_line = template
        .replace("{input}", &source.to_string_lossy())
        .replace("{outdir}", &outdir.path().to_string_lossy());
    let output = Command::new("sh").arg("-c").arg(&command_line).output()?;
    if !output.status.success() {
        return Err(VisionError::DecoderFailed {
            status: output
                .status
                .code()
                .map_or_else(|| "signal".to_string(), |c| c.to_string()),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    frames_from_directory(outdir.path())
}

/// Reads a still image into a PNG attachment. PNG files pass through
/// byte-for-byte after a decode check; other formats are re-encoded.
pub fn image_file_payload(path: &Path) -> Result<ImagePayload, VisionError> {
    if !path.exists() {
        return Err(VisionError::SourceNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| VisionError::BadImage(format!("{}: {e}", path.display())))?;
    if image::guess_format(&bytes).is_ok_and(|f| f == ImageFormat::Png) {
        return Ok(ImagePayload { png: bytes });
    }
    let mut png = Vec::new();
    decoded
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| VisionError::BadImage(e.to_string()))?;
    Ok(ImagePayload { png })
}
