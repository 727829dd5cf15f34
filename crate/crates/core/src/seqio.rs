//! Frames, ground-truth files, result files, and atomic writes.
//!
//! Box text files follow the common tracking-dataset convention: one
//! `x,y,w,h` line per frame, top-left corner, 1-based pixel coordinates.
//! Loaders shift to the crate's 0-based convention and writers shift back.

use std::fs;
use std::path::{Path, PathBuf};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write through a sibling temp file + rename so a crash never leaves a
/// partial file at `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

// ── Frames ──────────────────────────────────────────────────────────────

/// Decode a PNG/JPEG/BMP frame into a (1, 3, h, w) tensor scaled to [0, 1].
pub fn load_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(1, 3, h, w, data)
}

/// Encode a (1, 3, h, w) tensor in [0, 1] as an image file (format from the
/// extension). Values are clamped and rounded to 8 bits.
pub fn save_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let (n, c, h, w) = frame.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("save_frame wants (1,3,h,w), got {:?}", frame.shape())));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                (frame.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Frame files of a sequence directory: images directly in `dir` or in
/// `dir/img`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("img");
    let scan = if img_dir.is_dir() { img_dir } else { dir.to_path_buf() };
    let mut frames: Vec<PathBuf> = fs::read_dir(&scan)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
                .unwrap_or(false)
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Input(format!("no frame images under {}", dir.display())));
    }
    Ok(frames)
}

// ── Box files ───────────────────────────────────────────────────────────

/// Parse a boxes file. Lines that are empty or do not parse into four finite
/// numbers become `None` (absent annotation).
pub fn read_boxes(path: &Path) -> Result<Vec<Option<BBox>>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(parse_box_line).collect())
}

fn parse_box_line(line: &str) -> Option<BBox> {
    let fields: Vec<&str> = if line.contains(',') {
        line.split(',').collect()
    } else {
        line.split_whitespace().collect()
    };
    if fields.len() != 4 {
        return None;
    }
    let mut v = [0.0f64; 4];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.trim().parse().ok()?;
    }
    let b = BBox::new(v[0] - 1.0, v[1] - 1.0, v[2], v[3]);
    b.valid().then_some(b)
}

/// Write boxes, one `x,y,w,h` line per frame, 1-based. Atomic.
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format!("{},{},{},{}\n", b.x + 1.0, b.y + 1.0, b.w, b.h));
    }
    atomic_write(path, text.as_bytes())
}

// ── Sequences ───────────────────────────────────────────────────────────

/// A sequence directory: ordered frames plus per-frame ground truth.
pub struct Sequence {
    pub frames: Vec<PathBuf>,
    pub gt: Vec<Option<BBox>>,
}

impl Sequence {
    pub fn load(dir: &Path) -> Result<Self> {
        let frames = list_frames(dir)?;
        let gt_path = dir.join("groundtruth.txt");
        if !gt_path.is_file() {
            return Err(Error::Input(format!("{} has no groundtruth.txt", dir.display())));
        }
        let gt = read_boxes(&gt_path)?;
        if gt.len() != frames.len() {
            return Err(Error::Input(format!(
                "{}: {} ground-truth lines for {} frames",
                dir.display(),
                gt.len(),
                frames.len()
            )));
        }
        match gt.first() {
            Some(Some(_)) => {}
            _ => {
                return Err(Error::Input(format!(
                    "{}: first frame needs a valid init box",
                    dir.display()
                )))
            }
        }
        Ok(Sequence { frames, gt })
    }

    pub fn init_box(&self) -> BBox {
        self.gt[0].expect("validated at load")
    }
}
