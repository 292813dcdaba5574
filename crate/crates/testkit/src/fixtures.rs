use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::Rng;
use tealeaf_core::dataset::ClassRegistry;
use tealeaf_core::models::{
    build_model_with, save_checkpoint, ArchitectureId, BuildOptions, ClassifierModel, ModelScale,
};
use tealeaf_core::preprocess::PreprocessConfig;

use crate::data::rng;

pub const TEA_CLASSES: [&str; 7] = [
    "Brown Blight",
    "Gray Blight",
    "Green mirid bug",
    "Helopeltis",
    "Healthy leaf",
    "Red spider",
    "Tea algal leaf spot",
];

pub fn tea_registry() -> ClassRegistry {
    ClassRegistry::new(TEA_CLASSES).unwrap()
}

/// Randomly initialised compact MobileNetV2 at `side` pixels.
pub fn stub_model(side: usize, seed: u64) -> ClassifierModel {
    build_model_with(
        ArchitectureId::MobilenetV2,
        TEA_CLASSES.len(),
        &BuildOptions {
            scale: ModelScale::Compact,
            preprocess: PreprocessConfig::square(side),
            seed,
            ..BuildOptions::default()
        },
    )
    .unwrap()
}

/// Writes [`stub_model`] to `dir/stub.ckpt` and returns the path.
pub fn stub_checkpoint(dir: &Path, side: usize, seed: u64) -> PathBuf {
    let path = dir.join("stub.ckpt");
    save_checkpoint(&stub_model(side, seed), &tea_registry(), &path).unwrap();
    path
}

/// PNG bytes of a leafy-looking gradient with speckles.
pub fn golden_png(width: u32, height: u32, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        let g = 90 + (120 * y / height.max(1)) as u8;
        let speck = if r.random_range(0..20) == 0 { 70 } else { 0 };
        image::Rgb([30 + speck + (40 * x / width.max(1)) as u8, g, 40])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}
