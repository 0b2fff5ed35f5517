//! Image preprocessing on `H × W × 3` float arrays.

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    /// Maps `[0, 1]` pixels to normalized values in place.
    pub fn apply(&self, image: &mut Array3<f64>) {
        for c in 0..3 {
            image
                .slice_mut(s![.., .., c])
                .mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
    }
}

/// A crop window in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }
}

fn check(image: &Array3<f64>) -> Result<(usize, usize)> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(CapiError::InvalidShape(format!(
            "expected a non-empty H×W×3 image, got {h}×{w}×{c}"
        )));
    }
    Ok((h, w))
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (h, w) = check(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(CapiError::InvalidShape(
            "resize target must be non-empty".into(),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let sample_axis = |o: usize, src: usize, dst: usize| {
        let x = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, x - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|o| sample_axis(o, w, out_w)).collect();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for oy in 0..out_h {
        let (y0, y1, fy) = sample_axis(oy, h, out_h);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let top = image[[y0, x0, c]] * (1.0 - fx) + image[[y0, x1, c]] * fx;
                let bot = image[[y1, x0, c]] * (1.0 - fx) + image[[y1, x1, c]] * fx;
                out[[oy, ox, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn crop(image: &Array3<f64>, b: CropBox) -> Result<Array3<f64>> {
    let (h, w) = check(image)?;
    if b.height == 0 || b.width == 0 || b.top + b.height > h || b.left + b.width > w {
        return Err(CapiError::InvalidShape(format!(
            "crop {b:?} outside {h}×{w} image"
        )));
    }
    Ok(image
        .slice(s![b.top..b.top + b.height, b.left..b.left + b.width, ..])
        .to_owned())
}

pub fn center_crop(image: &Array3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (h, w) = check(image)?;
    if out_h > h || out_w > w {
        return Err(CapiError::InvalidShape(format!(
            "cannot center-crop {h}×{w} to {out_h}×{out_w}"
        )));
    }
    crop(
        image,
        CropBox {
            top: (h - out_h) / 2,
            left: (w - out_w) / 2,
            height: out_h,
            width: out_w,
        },
    )
}

pub fn hflip(image: &Array3<f64>) -> Array3<f64> {
    image.slice(s![.., ..;-1, ..]).to_owned()
}

/// Resizes so the shorter side equals `short`, keeping the aspect ratio.
pub fn resize_short_side(image: &Array3<f64>, short: usize) -> Result<Array3<f64>> {
    let (h, w) = check(image)?;
    let (nh, nw) = if h <= w {
        (
            short,
            ((w as f64 * short as f64 / h as f64).round() as usize).max(1),
        )
    } else {
        (
            ((h as f64 * short as f64 / w as f64).round() as usize).max(1),
            short,
        )
    };
    resize_bilinear(image, nh, nw)
}

/// Evaluation preprocessing: short side to `resolution · 256/224`, then a
/// centered `resolution × resolution` crop. At 224 this is resize 256, crop 224.
pub fn eval_transform(image: &Array3<f64>, resolution: usize) -> Result<Array3<f64>> {
    let short = (resolution as f64 * 256.0 / 224.0).round() as usize;
    let resized = resize_short_side(image, short)?;
    center_crop(&resized, resolution, resolution)
}

/// Samples a random-resized-crop window covering a `scale` fraction of the
/// image area with aspect ratio in `ratio` (log-uniform); windows whose
/// rounded area leaves the range are redrawn. After ten failed
/// attempts the largest centered crop with a clamped aspect ratio is used.
pub fn sample_crop(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> CropBox {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        let frac = (cw * ch) as f64 / area;
        if cw > 0 && ch > 0 && cw <= w && ch <= h && frac >= scale.0 && frac <= scale.1 {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, ((w as f64 / ratio.0).round() as usize).min(h))
    } else if in_ratio > ratio.1 {
        (((h as f64 * ratio.1).round() as usize).min(w), h)
    } else {
        (w, h)
    };
    CropBox {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Training augmentation: random resized crop to `resolution`, then an
/// optional coin-flip horizontal flip.
pub fn train_transform(
    image: &Array3<f64>,
    resolution: usize,
    scale: (f64, f64),
    flip: bool,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let (h, w) = check(image)?;
    let b = sample_crop(h, w, scale, (3.0 / 4.0, 4.0 / 3.0), rng);
    let out = resize_bilinear(&crop(image, b)?, resolution, resolution)?;
    Ok(if flip && rng.random::<bool>() {
        hflip(&out)
    } else {
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| (y * 1000 + x * 10 + c) as f64)
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        let flat = Array3::from_elem((9, 13, 3), 0.25);
        let r = resize_bilinear(&flat, 4, 6).unwrap();
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // half-pixel centers: output pixel i samples input 2i + 0.5
        let img = Array3::from_shape_fn((4, 4, 3), |(_, x, _)| x as f64);
        let r = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(r[[0, 0, 0]], 0.5);
        assert_eq!(r[[0, 1, 0]], 2.5);
    }

    #[test]
    fn eval_transform_of_square_image() {
        let img = Array3::from_elem((512, 512, 3), 1.0);
        let out = eval_transform(&img, 224).unwrap();
        assert_eq!(out.dim(), (224, 224, 3));
        let rect = Array3::from_elem((300, 600, 3), 1.0);
        assert_eq!(resize_short_side(&rect, 256).unwrap().dim(), (256, 512, 3));
    }

    #[test]
    fn full_scale_crop_is_plain_resize() {
        let img = ramp(40, 40);
        for seed in 0..20 {
            let out = train_transform(&img, 32, (1.0, 1.0), false, &mut seeded(seed)).unwrap();
            assert_eq!(out, resize_bilinear(&img, 32, 32).unwrap());
        }
    }

    #[test]
    fn crop_area_within_scale_range() {
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let b = sample_crop(224, 224, (0.6, 1.0), (0.75, 4.0 / 3.0), &mut rng);
            let f = b.area_fraction(224, 224);
            assert!((0.6..=1.0).contains(&f), "{f}");
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(3, 4);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img)[[0, 0, 0]], img[[0, 3, 0]]);
    }
}
