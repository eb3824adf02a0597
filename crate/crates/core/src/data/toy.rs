//! Procedural pseudo-CT corpus.
//!
//! Each image is an elliptical brain mask of mid-grey tissue on a black
//! background. Hemorrhagic images add a bright (hyperdense) disc inside the
//! mask, ischemic images a dark (hypodense) one. Images sharing an index share
//! the same mask and tissue noise regardless of class, so class-1 and class-0
//! images with the same index differ only by the lesion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest, Origin, Split, StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

pub const TOY_TRUTH_FILE: &str = "toy_truth.json";

const TISSUE: f64 = 0.55;
const TISSUE_NOISE: f64 = 0.04;
const HYPERDENSE: f64 = 0.95;
const HYPODENSE: f64 = 0.22;

/// Pixel bounding box, `x0..x1` × `y0..y1` (upper bounds exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTruthEntry {
    /// Path relative to the corpus root, e.g. `hemorrhagic/toy_00003.png`.
    pub file: String,
    pub label: StrokeClass,
    pub bbox: BoundingBox,
}

/// Lesion ground truth written next to a toy corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTruth {
    pub image_size: usize,
    pub seed: u64,
    pub entries: Vec<ToyTruthEntry>,
}

impl ToyTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Box for an image given its path (absolute or relative to the corpus).
    pub fn lookup(&self, path: &Path) -> Option<&ToyTruthEntry> {
        self.entries.iter().find(|e| path.ends_with(&e.file))
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    r: f64,
}

fn render(size: usize, index: usize, class: StrokeClass, seed: u64) -> (Vec<f64>, Option<BoundingBox>) {
    let s = size as f64;
    let mut base = seed::rng(seed::mix(&[seed, index as u64, 0xB4A1]));
    let jitter = s / 32.0;
    let cx = s / 2.0 + base.random_range(-jitter..=jitter);
    let cy = s / 2.0 + base.random_range(-jitter..=jitter);
    let ax = s * 0.34 + base.random_range(-jitter..=jitter);
    let ay = s * 0.40 + base.random_range(-jitter..=jitter);

    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / ax, (y as f64 + 0.5 - cy) / ay);
            if dx * dx + dy * dy <= 1.0 {
                img[y * size + x] = TISSUE + base.random_range(-TISSUE_NOISE..=TISSUE_NOISE);
            }
        }
    }

    let intensity = match class {
        StrokeClass::Normal => return (img, None),
        StrokeClass::Hemorrhagic => HYPERDENSE,
        StrokeClass::Ischemic => HYPODENSE,
    };
    let mut rng = seed::rng(seed::mix(&[seed, index as u64, class.id() as u64]));
    let r = rng.random_range(0.11 * s..=0.16 * s);
    // Keep the whole disc inside the mask with a small margin.
    let (ix, iy) = (ax - r - 2.0, ay - r - 2.0);
    let lesion = loop {
        let u = rng.random_range(-1.0..=1.0f64);
        let v = rng.random_range(-1.0..=1.0f64);
        if u * u + v * v <= 1.0 {
            break Lesion {
                cx: cx + u * ix.max(0.0),
                cy: cy + v * iy.max(0.0),
                r,
            };
        }
    };
    let mut bbox: Option<BoundingBox> = None;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - lesion.cx, y as f64 + 0.5 - lesion.cy);
            if dx * dx + dy * dy <= lesion.r * lesion.r {
                let px = &mut img[y * size + x];
                *px = intensity + (*px - TISSUE) * 0.5;
                let b = bbox.get_or_insert(BoundingBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x + 1);
                b.y1 = b.y1.max(y + 1);
            }
        }
    }
    (img, bbox)
}

fn to_gray8(img: &[f64], size: usize) -> image::GrayImage {
    let px = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(size as u32, size as u32, px).expect("buffer matches size")
}

/// Writes a class-per-directory PNG corpus plus `toy_truth.json` and returns
/// its manifest (all records real and unassigned).
pub fn generate_toy_corpus(
    out_root: &Path,
    n_per_class: [usize; NUM_CLASSES],
    image_size: usize,
    seed: u64,
) -> Result<Manifest> {
    if image_size < 32 {
        return Err(Error::Parameter(format!(
            "toy image size {image_size} below minimum 32"
        )));
    }
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for class in StrokeClass::ALL {
        let dir = out_root.join(class.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..n_per_class[class.id()] {
            let (img, bbox) = render(image_size, index, class, seed);
            let rel = format!("{}/toy_{index:05}.png", class.dir_name());
            let path: PathBuf = out_root.join(&rel);
            to_gray8(&img, image_size)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            if let Some(bbox) = bbox {
                entries.push(ToyTruthEntry {
                    file: rel,
                    label: class,
                    bbox,
                });
            }
            records.push(ImageRecord {
                path,
                label: class,
                origin: Origin::Real,
                split: Split::Unassigned,
            });
        }
    }
    let truth = ToyTruth {
        image_size,
        seed,
        entries,
    };
    let truth_path = out_root.join(TOY_TRUTH_FILE);
    fs::write(&truth_path, serde_json::to_string_pretty(&truth)?)
        .map_err(|e| Error::io(&truth_path, e))?;
    Manifest::from_records(out_root, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lesion_only_changes_pixels_inside_its_box() {
        let (normal, none) = render(64, 3, StrokeClass::Normal, 11);
        let (bleed, bbox) = render(64, 3, StrokeClass::Hemorrhagic, 11);
        assert!(none.is_none());
        let bbox = bbox.unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !bbox.contains(x, y) {
                    assert_eq!(normal[y * 64 + x], bleed[y * 64 + x]);
                }
            }
        }
        // The disc sits inside the brain mask, so no lesion pixel is background.
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                assert!(normal[y * 64 + x] > 0.0);
            }
        }
    }

    #[test]
    fn dark_lesion_lowers_intensity() {
        let (normal, _) = render(64, 0, StrokeClass::Normal, 5);
        let (isch, _) = render(64, 0, StrokeClass::Ischemic, 5);
        assert!(isch.iter().sum::<f64>() < normal.iter().sum::<f64>());
    }

    #[test]
    fn rejects_small_images() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_toy_corpus(tmp.path(), [1, 1, 1], 16, 0),
            Err(Error::Parameter(_))
        ));
    }
}
