//! Decoding, resizing and stochastic augmentation of leaf photographs.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb32FImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Channel means and deviations used by ImageNet-pretrained backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub height: usize,
    pub width: usize,
    /// Standardise with ImageNet statistics when building model input.
    /// Images themselves always stay in `[0, 1]`.
    pub backbone_normalization: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            height: 224,
            width: 224,
            backbone_normalization: false,
        }
    }
}

impl PreprocessConfig {
    pub fn square(side: usize) -> Self {
        PreprocessConfig {
            height: side,
            width: side,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 {
            return Err(Error::config("preprocess.height", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("preprocess.width", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_degrees: f32,
    /// Maximum relative zoom in either direction.
    pub zoom_fraction: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: true,
            rotation_degrees: 15.0,
            zoom_fraction: 0.10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            horizontal_flip: false,
            rotation_degrees: 0.0,
            zoom_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.rotation_degrees == 0.0 && self.zoom_fraction == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::config("augment.rotation_degrees", "must lie in [0, 180]"));
        }
        if !(0.0..=0.5).contains(&self.zoom_fraction) {
            return Err(Error::config("augment.zoom_fraction", "must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Height × width × 3 image with every value in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Builds an image from `f(y, x, channel)`; results are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }

    /// NCHW single-item tensor, optionally standardised with ImageNet statistics.
    pub fn to_tensor(&self, backbone_normalization: bool) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = if backbone_normalization {
                    (px[c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
                } else {
                    px[c]
                };
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], out)
    }

    /// Inverse of [`ImageTensor::to_tensor`] without normalisation; values are clamped.
    pub fn from_tensor_item(t: &Tensor, item: usize) -> Self {
        let (h, w) = (t.h(), t.w());
        let src = t.item(item);
        Self::from_fn(h, w, |y, x, c| src[c * h * w + y * w + x])
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = (y as usize * self.width + x as usize) * 3;
            image::Rgb([0, 1, 2].map(|c| (self.data[i + c] * 255.0).round() as u8))
        })
    }
}

/// Stacks images into an NCHW batch.
pub fn batch_tensor(images: &[&ImageTensor], backbone_normalization: bool) -> Tensor {
    let items: Vec<Tensor> = images.iter().map(|im| im.to_tensor(backbone_normalization)).collect();
    Tensor::stack(&items)
}

/// Decodes, converts to RGB, resizes bilinearly and scales to `[0, 1]`.
pub fn load_and_preprocess(path: &Path, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::UndecodableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(preprocess_image(img, cfg))
}

/// Same as [`load_and_preprocess`] for an in-memory encoded image.
pub fn preprocess_bytes(bytes: &[u8], cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::UndecodableImage {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    Ok(preprocess_image(img, cfg))
}

pub fn preprocess_image(img: DynamicImage, cfg: &PreprocessConfig) -> ImageTensor {
    let rgb: Rgb32FImage = match img {
        DynamicImage::ImageRgb32F(i) => i,
        other => {
            // Grayscale and alpha variants collapse to three equal/opaque channels here.
            let rgb8 = other.to_rgb8();
            Rgb32FImage::from_fn(rgb8.width(), rgb8.height(), |x, y| {
                let p = rgb8.get_pixel(x, y);
                image::Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            })
        }
    };
    let resized = if rgb.width() as usize == cfg.width && rgb.height() as usize == cfg.height {
        rgb
    } else {
        image::imageops::resize(&rgb, cfg.width as u32, cfg.height as u32, FilterType::Triangle)
    };
    let data = resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor {
        height: cfg.height,
        width: cfg.width,
        data,
    }
}

/// One realisation of the augmentation distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_degrees: f32,
    pub zoom: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        angle_degrees: 0.0,
        zoom: 1.0,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = cfg.horizontal_flip && rng.random_bool(0.5);
        let angle_degrees = if cfg.rotation_degrees > 0.0 {
            rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
        } else {
            0.0
        };
        let zoom = if cfg.zoom_fraction > 0.0 {
            rng.random_range(1.0 - cfg.zoom_fraction..=1.0 + cfg.zoom_fraction)
        } else {
            1.0
        };
        AugmentDraw {
            flip,
            angle_degrees,
            zoom,
        }
    }
}

/// Flip, then rotate, then zoom; shape is preserved and values stay in `[0, 1]`.
pub fn augment<R: Rng>(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut R) -> ImageTensor {
    if cfg.is_identity() {
        return img.clone();
    }
    apply_draw(img, &AugmentDraw::sample(cfg, rng))
}

pub fn apply_draw(img: &ImageTensor, draw: &AugmentDraw) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    if draw.angle_degrees == 0.0 && draw.zoom == 1.0 {
        if !draw.flip {
            return img.clone();
        }
        return ImageTensor::from_fn(h, w, |y, x, c| img.get(y, w - 1 - x, c));
    }
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = (-draw.angle_degrees.to_radians()).sin_cos();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: undo zoom, undo rotation, undo flip.
            let qy = (y as f32 - cy) / draw.zoom;
            let qx = (x as f32 - cx) / draw.zoom;
            let sy = cy + sin * qx + cos * qy;
            let mut sx = cx + cos * qx - sin * qy;
            if draw.flip {
                sx = w as f32 - 1.0 - sx;
            }
            let px = sample_reflect(img, sy, sx);
            out.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    ImageTensor {
        height: h,
        width: w,
        data: out,
    }
}

/// Mirror index into `0..n` with the edge sample repeated (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn sample_reflect(img: &ImageTensor, y: f32, x: f32) -> [f32; 3] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let ys = [reflect(y0, img.height), reflect(y0 + 1, img.height)];
    let xs = [reflect(x0, img.width), reflect(x0 + 1, img.width)];
    let mut px = [0.0f32; 3];
    for (c, v) in px.iter_mut().enumerate() {
        let a = img.get(ys[0], xs[0], c) * (1.0 - fx) + img.get(ys[0], xs[1], c) * fx;
        let b = img.get(ys[1], xs[0], c) * (1.0 - fx) + img.get(ys[1], xs[1], c) * fx;
        *v = a * (1.0 - fy) + b * fy;
    }
    px
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 17) as f32 / 16.0)
    }

    fn write_png(dir: &Path, name: &str, img: image::DynamicImage) -> std::path::PathBuf {
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    #[test]
    fn white_image_stays_white_after_downscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(
            dir.path(),
            "white.png",
            image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(448, 448, image::Rgb([255, 255, 255]))),
        );
        let t = load_and_preprocess(&p, &PreprocessConfig::default()).unwrap();
        assert_eq!((t.height(), t.width()), (224, 224));
        assert!(t.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn mid_gray_normalises_to_128_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(
            dir.path(),
            "gray.png",
            image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(224, 224, image::Rgb([128, 128, 128]))),
        );
        let t = load_and_preprocess(&p, &PreprocessConfig::default()).unwrap();
        assert!(t.data().iter().all(|v| (v - 128.0 / 255.0).abs() < 1e-7));
    }

    #[test]
    fn grayscale_is_replicated_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = image::GrayImage::from_fn(30, 20, |x, y| image::Luma([(x * 8 + y) as u8]));
        let p = write_png(dir.path(), "g.png", image::DynamicImage::ImageLuma8(gray));
        let t = load_and_preprocess(&p, &PreprocessConfig::square(16)).unwrap();
        for px in t.data().chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        let (lo, hi) = t.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn undecodable_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(
            load_and_preprocess(&p, &PreprocessConfig::default()),
            Err(Error::UndecodableImage { .. })
        ));
    }

    #[test]
    fn identity_config_returns_input() {
        let img = gradient_image(12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&img, &AugmentConfig::disabled(), &mut rng), img);
    }

    #[test]
    fn double_flip_restores_original() {
        let img = gradient_image(10, 13);
        let draw = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        let once = apply_draw(&img, &draw);
        assert_ne!(once, img);
        assert_eq!(apply_draw(&once, &draw), img);
    }

    #[test]
    fn same_seed_same_augmentation() {
        let img = gradient_image(20, 20);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_uses_reflection_not_black_corners() {
        let img = ImageTensor::filled(16, 16, 0.8);
        let draw = AugmentDraw {
            flip: false,
            angle_degrees: 45.0,
            zoom: 0.8,
        };
        let out = apply_draw(&img, &draw);
        assert!(out.data().iter().all(|v| (v - 0.8).abs() < 1e-5));
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    proptest! {
        #[test]
        fn augmentation_preserves_shape_and_range(
            h in 2usize..24,
            w in 2usize..24,
            seed in any::<u64>(),
            rot in 0.0f32..=180.0,
            zoom in 0.0f32..=0.5,
            flip in any::<bool>(),
        ) {
            let img = ImageTensor::from_fn(h, w, |y, x, c| (((y * 31 + x * 17 + c * 5) as u64 ^ seed) % 255) as f32 / 254.0);
            let cfg = AugmentConfig { horizontal_flip: flip, rotation_degrees: rot, zoom_fraction: zoom, seed };
            let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!((out.height(), out.width()), (h, w));
            let (lo, hi) = out.min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
        }
    }
}
