//! Image folders on disk.
//!
//! Files directly under the root get class 0; files in subdirectories are
//! labelled by subdirectory name in sorted order.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_transform, train_transform, Normalization};
use crate::error::{CapiError, Result};
use crate::rng::substream;
use crate::trainer::Dataset;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "JPEG"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Preprocess {
    /// Short side to `resolution · 256/224`, then a centered square crop.
    Eval,
    /// Random resized crop with area fraction in `scale`, optional flip.
    Train { scale: (f64, f64), hflip: bool },
}

#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub normalization: Normalization,
}

/// Decodes an image to `[0, 1]` RGB.
pub fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0,
    ))
}

fn readable(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

impl ImageFolder {
    /// Scans `root` one level deep. Files that cannot be read are skipped
    /// with a warning; a folder with no readable image is an error.
    pub fn open(root: &Path) -> Result<Self> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut classes: Vec<String> = Vec::new();
        let mut found: Vec<(PathBuf, Option<String>)> = Vec::new();
        for entry in entries {
            if entry.is_dir() {
                let name = entry
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mut files: Vec<PathBuf> = std::fs::read_dir(&entry)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                files.sort();
                classes.push(name.clone());
                found.extend(
                    files
                        .into_iter()
                        .filter(|p| p.is_file())
                        .map(|p| (p, Some(name.clone()))),
                );
            } else {
                found.push((entry, None));
            }
        }
        let mut paths = Vec::new();
        let mut labels = Vec::new();
        for (path, class) in found {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !EXTENSIONS.contains(&ext) {
                continue;
            }
            if let Err(e) = readable(&path) {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                continue;
            }
            labels.push(class.map_or(0, |c| classes.iter().position(|k| *k == c).unwrap_or(0)));
            paths.push(path);
        }
        if paths.is_empty() {
            return Err(CapiError::Dataset(format!(
                "no readable images in {}",
                root.display()
            )));
        }
        Ok(Self {
            paths,
            labels,
            classes,
            normalization: Normalization::IMAGENET,
        })
    }

    /// Decoded and normalized, at the file's own resolution. A file that
    /// fails to decode here is reported as a dataset error.
    pub fn raw(&self, index: usize) -> Result<Array3<f64>> {
        let path = self.paths.get(index).ok_or_else(|| {
            CapiError::Dataset(format!("index {index} out of {}", self.paths.len()))
        })?;
        let mut img = decode_image(path)
            .map_err(|e| CapiError::Dataset(format!("{}: {e}", path.display())))?;
        self.normalization.apply(&mut img);
        Ok(img)
    }

    /// Preprocessed to `resolution × resolution`. Training randomness comes
    /// from the `(seed, index)` substream.
    pub fn load(
        &self,
        index: usize,
        resolution: usize,
        preprocess: Preprocess,
        seed: u64,
    ) -> Result<Array3<f64>> {
        let img = self.raw(index)?;
        match preprocess {
            Preprocess::Eval => eval_transform(&img, resolution),
            Preprocess::Train { scale, hflip } => train_transform(
                &img,
                resolution,
                scale,
                hflip,
                &mut substream(seed, "augment", index as u64),
            ),
        }
    }
}

/// Decoded, preprocessed and normalized images of a folder, in file order.
pub fn load_image_folder(
    root: &Path,
    resolution: usize,
    preprocess: Preprocess,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let folder = ImageFolder::open(root)?;
    (0..folder.len())
        .map(|i| folder.load(i, resolution, preprocess, seed))
        .collect()
}

/// Writes a `[0, 1]` RGB map as a PNG, each cell drawn as a
/// `scale × scale` block.
pub fn save_rgb_map(map: &Array3<f64>, path: &Path, scale: u32) -> Result<()> {
    let (h, w, _) = map.dim();
    let scale = scale.max(1);
    let img = image::RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        image::Rgb(std::array::from_fn(|ch| {
            (map[[r, c, ch]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save(path)?;
    Ok(())
}

/// Pretraining samples raw images; cropping happens in the batch sampler.
impl Dataset for ImageFolder {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn image(&self, index: usize) -> Result<Array3<f64>> {
        self.raw(index)
    }
}
