//! Random resized crop + horizontal flip views of one test image.
//!
//! View `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so views
//! can be generated in any order or in parallel with identical results.
//! Resizing is bilinear with corner-aligned sampling: output pixel `j` of an
//! `n`-pixel axis samples the crop at `j · (len − 1) / (n − 1)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image area.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.scale_min
            && self.scale_min <= self.scale_max
            && self.scale_max <= 1.0
            && 0.0 < self.ratio_min
            && self.ratio_min <= self.ratio_max
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid augmentation ranges {self:?}"
            )))
        }
    }
}

/// Crop rectangle (pixels, inclusive origin) and flip flag of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewParams {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    /// `views[0]` is the input image.
    pub views: Vec<Image>,
    pub seed: u64,
    /// Parameters of views `1..`, one entry per sampled view.
    pub params_log: Vec<ViewParams>,
}

fn sample_params(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AugmentConfig) -> ViewParams {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
    let mut rect = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale_min..=cfg.scale_max);
        let ratio = if lr0 < lr1 {
            rng.random_range(lr0..lr1).exp()
        } else {
            cfg.ratio_min
        };
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if 0 < cw && cw <= w && 0 < ch && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            rect = Some((x, y, cw, ch));
            break;
        }
    }
    let (x, y, width, height) = rect.unwrap_or((0, 0, w, h));
    let flip = rng.random_bool(cfg.flip_prob);
    ViewParams {
        x,
        y,
        width,
        height,
        flip,
    }
}

fn sample_coord(j: usize, n: usize, len: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        j as f64 * (len - 1) as f64 / (n - 1) as f64
    }
}

/// Crops `p` out of `image`, resizes back to the input size, then flips.
pub fn apply_view(image: &Image, p: &ViewParams) -> Image {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = Image::filled(c, h, w, 0.0);
    for oy in 0..h {
        let sy = p.y as f64 + sample_coord(oy, h, p.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(p.y + p.height - 1);
        let ty = sy - y0 as f64;
        for ox in 0..w {
            let sx = p.x as f64 + sample_coord(ox, w, p.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(p.x + p.width - 1);
            let tx = sx - x0 as f64;
            let dx = if p.flip { w - 1 - ox } else { ox };
            for ch in 0..c {
                let top = image.at(ch, y0, x0) * (1.0 - tx) + image.at(ch, y0, x1) * tx;
                let bot = image.at(ch, y1, x0) * (1.0 - tx) + image.at(ch, y1, x1) * tx;
                out.set(ch, oy, dx, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Independent child seed for item `index` of a run seeded with `seed`
/// (one SplitMix64 step over the pair).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters of view `index >= 1` under `seed`.
pub fn view_params(image: &Image, index: usize, seed: u64, cfg: &AugmentConfig) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_params(&mut rng, image.height(), image.width(), cfg)
}

pub fn generate_views(
    image: &Image,
    n_views: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<ViewBatch> {
    if n_views == 0 {
        return Err(Error::contract("n_views must be at least 1"));
    }
    cfg.validate()?;
    let params_log: Vec<ViewParams> = (1..n_views)
        .map(|i| view_params(image, i, seed, cfg))
        .collect();
    let mut views = Vec::with_capacity(n_views);
    views.push(image.clone());
    views.par_extend(params_log.par_iter().map(|p| apply_view(image, p)));
    Ok(ViewBatch {
        views,
        seed,
        params_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        Image::new(1, h, w, data).unwrap()
    }

    #[test]
    fn single_view_is_the_original() {
        let img = ramp(16, 16);
        let b = generate_views(&img, 1, 3, &AugmentConfig::default()).unwrap();
        assert_eq!(b.views, vec![img]);
        assert!(b.params_log.is_empty());
    }

    #[test]
    fn zero_views_is_a_contract_error() {
        let r = generate_views(&ramp(8, 8), 0, 1, &AugmentConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn sixty_four_views_log_sixty_three_draws() {
        let img = ramp(32, 32);
        let b = generate_views(&img, 64, 11, &AugmentConfig::default()).unwrap();
        assert_eq!(b.views.len(), 64);
        assert_eq!(b.params_log.len(), 63);
        assert_eq!(b.views[0], img);
        assert!(b.views.iter().all(|v| v.height() == 32 && v.width() == 32));
    }

    #[test]
    fn same_seed_same_batch_different_seed_different_log() {
        let img = ramp(16, 16);
        let cfg = AugmentConfig::default();
        let a = generate_views(&img, 16, 5, &cfg).unwrap();
        let b = generate_views(&img, 16, 5, &cfg).unwrap();
        let c = generate_views(&img, 16, 6, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params_log, c.params_log);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = ramp(12, 12);
        let p = ViewParams {
            x: 0,
            y: 0,
            width: 12,
            height: 12,
            flip: false,
        };
        assert_eq!(apply_view(&img, &p), img);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp(4, 6);
        let p = ViewParams {
            x: 0,
            y: 0,
            width: 6,
            height: 4,
            flip: true,
        };
        let f = apply_view(&img, &p);
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(f.at(0, y, x), img.at(0, y, 5 - x));
            }
        }
    }

    #[test]
    fn bilinear_midpoint_oracle() {
        // A 2-pixel-wide crop stretched to 3 columns samples at 0, 0.5, 1.
        let img = Image::new(1, 1, 3, vec![1.0, 5.0, 9.0]).unwrap();
        let p = ViewParams {
            x: 1,
            y: 0,
            width: 2,
            height: 1,
            flip: false,
        };
        assert_eq!(apply_view(&img, &p).data(), &[5.0, 7.0, 9.0]);
    }
}
