//! Synthetic source domain of noisy sinusoidal gratings and the
//! distribution shifts applied to its test split.
//!
//! Class `c` fixes the grating orientation (`c mod 2`: vertical or horizontal
//! stripes, both unchanged by a horizontal flip) and a frequency level
//! (`c / 2`, geometrically spaced between `freq_min` and `freq_max` cycles per
//! image). Phase, amplitude and small orientation/frequency jitter are drawn
//! per image, then i.i.d. Gaussian pixel noise is added. Every pixel is
//! rounded to f32 so in-memory bundles equal their on-disk form.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetBundle, DatasetMeta, Split};
use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::class_names;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Adds the magnitude to every pixel.
    MeanOffset,
    /// Scales pixels by `1 / (1 + magnitude)`.
    ContrastScale,
    /// Gaussian blur with standard deviation `magnitude` pixels (clamped edges).
    Blur,
    /// One of the three above per image, drawn uniformly.
    Mixture,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::MeanOffset => "mean-offset",
            ShiftKind::ContrastScale => "contrast-scale",
            ShiftKind::Blur => "blur",
            ShiftKind::Mixture => "mixture",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-offset" => Ok(ShiftKind::MeanOffset),
            "contrast-scale" | "contrast" => Ok(ShiftKind::ContrastScale),
            "blur" => Ok(ShiftKind::Blur),
            "mixture" => Ok(ShiftKind::Mixture),
            _ => Err(Error::config(format!(
                "unknown shift {s:?} (mean-offset, contrast-scale, blur, mixture)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    /// Drives the per-image choice of the mixture shift.
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            kind: ShiftKind::MeanOffset,
            magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitude >= 0.0 && self.magnitude.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "shift magnitude must be finite and >= 0, got {}",
                self.magnitude
            )))
        }
    }

    /// Shift applied to test image `index`. Magnitude 0 returns the input unchanged.
    pub fn apply(&self, image: &Image, index: u64) -> Image {
        if self.magnitude == 0.0 {
            return image.clone();
        }
        let kind = match self.kind {
            ShiftKind::Mixture => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index));
                [
                    ShiftKind::MeanOffset,
                    ShiftKind::ContrastScale,
                    ShiftKind::Blur,
                ][rng.random_range(0..3)]
            }
            k => k,
        };
        match kind {
            ShiftKind::MeanOffset => map(image, |v| v + self.magnitude),
            ShiftKind::ContrastScale => map(image, |v| v / (1.0 + self.magnitude)),
            ShiftKind::Blur => gaussian_blur(image, self.magnitude),
            ShiftKind::Mixture => unreachable!("resolved above"),
        }
    }
}

fn map(image: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

/// Separable Gaussian blur, kernel radius `ceil(3σ)`, edge pixels repeated.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(c, h, w, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-r..=r)
                    .map(|i| k[(i + r) as usize] * image.at(ch, y, clamp(x as isize + i, w)))
                    .sum();
                tmp.set(ch, y, x, s);
            }
        }
    }
    let mut out = Image::filled(c, h, w, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-r..=r)
                    .map(|i| k[(i + r) as usize] * tmp.at(ch, clamp(y as isize + i, h), x))
                    .sum();
                out.set(ch, y, x, s);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Lowest and highest class frequency, in cycles per image width.
    pub freq_min: f64,
    pub freq_max: f64,
    pub noise_std: f64,
    pub shift: ShiftSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            image_size: 32,
            channels: 1,
            n_train: 512,
            n_val: 256,
            n_test: 200,
            freq_min: 1.5,
            freq_max: 6.0,
            noise_std: 0.5,
            shift: ShiftSpec {
                kind: ShiftKind::MeanOffset,
                magnitude: 1.0,
                seed: 0,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::config("image_size and channels must be positive"));
        }
        if !(0.0 < self.freq_min && self.freq_min <= self.freq_max) || !(self.noise_std >= 0.0) {
            return Err(Error::config(
                "need 0 < freq_min <= freq_max and noise_std >= 0",
            ));
        }
        self.shift.validate()
    }

    fn levels(&self) -> usize {
        self.n_classes.div_ceil(2)
    }

    /// Nominal frequency (cycles per image) of class `c`.
    pub fn class_frequency(&self, c: usize) -> f64 {
        let n = self.levels();
        if n == 1 {
            return self.freq_min;
        }
        let t = (c / 2) as f64 / (n - 1) as f64;
        self.freq_min * (self.freq_max / self.freq_min).powf(t)
    }

    /// One source-domain image of class `c`.
    pub fn render(&self, c: usize, rng: &mut ChaCha8Rng) -> Image {
        let n = self.image_size;
        let theta =
            if c.is_multiple_of(2) { 0.0 } else { PI / 2.0 } + rng.random_range(-0.08..0.08);
        let freq = self.class_frequency(c) * rng.random_range(0.92..1.08);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.8..1.2);
        let noise = Normal::new(0.0, self.noise_std).expect("validated noise_std");
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(self.channels * n * n);
        for _ in 0..self.channels {
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 * ct + y as f64 * st) / n as f64;
                    data.push(amp * (2.0 * PI * freq * u + phase).sin() + noise.sample(rng));
                }
            }
        }
        Image::new(self.channels, n, n, data).expect("sized above")
    }
}

fn to_f32(mut img: Image) -> Image {
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = *v as f32 as f64);
    img
}

/// Source train/val splits and the shifted test split of one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: DatasetBundle,
    pub val: DatasetBundle,
    pub test: DatasetBundle,
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::SourceTrain => 1,
        Split::SourceVal => 2,
        Split::TestShifted => 3,
    }
}

/// `n` source-domain samples; labels cycle through the classes.
/// `shift` (if any) is applied to each image after rendering.
pub fn render_split(
    cfg: &SynthConfig,
    split: Split,
    n: usize,
    seed: u64,
    shift: Option<&ShiftSpec>,
) -> Result<DatasetBundle> {
    cfg.validate()?;
    let base = derive_seed(seed, split_tag(split));
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
            let img = cfg.render(c, &mut rng);
            to_f32(match shift {
                Some(s) => s.apply(&img, i as u64),
                None => img,
            })
        })
        .collect();
    let id = match shift {
        Some(s) => format!("synth-{seed}-{split}-{}-{}", s.kind, s.magnitude),
        None => format!("synth-{seed}-{split}"),
    };
    let meta = DatasetMeta {
        id,
        split,
        n_samples: n,
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        class_names: class_names(cfg.n_classes),
    };
    DatasetBundle::new(meta, images, labels)
}

/// Deterministic in `seed`: each split and image draws from its own stream.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    Ok(SynthData {
        train: render_split(cfg, Split::SourceTrain, cfg.n_train, seed, None)?,
        val: render_split(cfg, Split::SourceVal, cfg.n_val, seed, None)?,
        test: render_split(cfg, Split::TestShifted, cfg.n_test, seed, Some(&cfg.shift))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel_mean(b: &DatasetBundle) -> f64 {
        let n: usize = b.images.iter().map(|i| i.data().len()).sum();
        b.images.iter().flat_map(|i| i.data()).sum::<f64>() / n as f64
    }

    fn small(shift: ShiftSpec) -> SynthConfig {
        SynthConfig {
            n_train: 64,
            n_val: 8,
            n_test: 64,
            shift,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bundles() {
        let cfg = small(ShiftSpec::none());
        assert_eq!(
            gen_synthetic(&cfg, 4).unwrap(),
            gen_synthetic(&cfg, 4).unwrap()
        );
        assert_ne!(
            gen_synthetic(&cfg, 4).unwrap().train,
            gen_synthetic(&cfg, 5).unwrap().train
        );
    }

    #[test]
    fn null_shift_matches_a_fresh_source_draw() {
        let cfg = small(ShiftSpec::none());
        let d = gen_synthetic(&cfg, 1).unwrap();
        let (a, b) = (pixel_mean(&d.train), pixel_mean(&d.test));
        let flat: Vec<f64> = d
            .train
            .images
            .iter()
            .flat_map(|i| i.data().to_vec())
            .collect();
        let m = flat.iter().sum::<f64>() / flat.len() as f64;
        let sd = (flat.iter().map(|v| (v - m).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
        // Pixels within an image are correlated; bound with the image count.
        assert!(
            (a - b).abs() < 3.0 * sd / (d.train.len() as f64).sqrt(),
            "{a} vs {b}"
        );
    }

    #[test]
    fn mean_offset_moves_the_pixel_mean() {
        let shift = ShiftSpec {
            kind: ShiftKind::MeanOffset,
            magnitude: 0.5,
            seed: 0,
        };
        let cfg = SynthConfig {
            n_test: 400,
            ..small(shift)
        };
        let d = gen_synthetic(&cfg, 2).unwrap();
        let clean = render_split(&cfg, Split::TestShifted, 400, 2, None).unwrap();
        let delta = pixel_mean(&d.test) - pixel_mean(&clean);
        assert!((delta - 0.5).abs() < 0.02, "{delta}");
        let fresh = render_split(&cfg, Split::SourceVal, 400, 9, None).unwrap();
        let delta = pixel_mean(&d.test) - pixel_mean(&fresh);
        assert!((delta - 0.5).abs() < 0.02, "{delta}");
    }

    #[test]
    fn zero_magnitude_is_identity_for_every_kind() {
        let cfg = small(ShiftSpec::none());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = cfg.render(3, &mut rng);
        for kind in [
            ShiftKind::MeanOffset,
            ShiftKind::ContrastScale,
            ShiftKind::Blur,
            ShiftKind::Mixture,
        ] {
            let s = ShiftSpec {
                kind,
                magnitude: 0.0,
                seed: 1,
            };
            assert_eq!(s.apply(&img, 0), img);
        }
    }

    #[test]
    fn blur_preserves_constants_and_smooths_an_impulse() {
        let flat = Image::filled(1, 8, 8, 2.5);
        assert!(gaussian_blur(&flat, 1.3)
            .data()
            .iter()
            .all(|v| (v - 2.5).abs() < 1e-12));
        let mut imp = Image::filled(1, 9, 9, 0.0);
        imp.set(0, 4, 4, 1.0);
        let b = gaussian_blur(&imp, 1.0);
        assert!((b.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b.at(0, 4, 4) < 0.2 && b.at(0, 4, 5) > 0.0);
    }

    #[test]
    fn contrast_scale_divides_pixels() {
        let img = Image::new(1, 1, 2, vec![2.0, -4.0]).unwrap();
        let s = ShiftSpec {
            kind: ShiftKind::ContrastScale,
            magnitude: 1.0,
            seed: 0,
        };
        assert_eq!(s.apply(&img, 0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn frequencies_span_the_range_and_one_class_is_rejected() {
        let cfg = small(ShiftSpec::none());
        assert_eq!(cfg.class_frequency(0), cfg.freq_min);
        assert!((cfg.class_frequency(7) - cfg.freq_max).abs() < 1e-12);
        assert!(matches!(
            SynthConfig {
                n_classes: 1,
                ..cfg
            }
            .validate(),
            Err(Error::Config(_))
        ));
    }
}
