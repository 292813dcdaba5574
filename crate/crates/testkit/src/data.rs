use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tealeaf_core::dataset::{ClassRegistry, DatasetIndex, LabeledPath};
use tealeaf_core::preprocess::ImageTensor;
use tealeaf_core::trainer::MemorySource;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise_image(h: usize, w: usize, hi: f32, rng: &mut impl Rng) -> ImageTensor {
    ImageTensor::from_fn(h, w, |_, _, _| rng.random_range(0.0..hi))
}

/// Index over made-up paths, `counts[c]` items in class `c`.
pub fn synthetic_index(counts: &[usize]) -> DatasetIndex {
    let registry = ClassRegistry::new((0..counts.len()).map(|c| format!("class_{c:02}"))).unwrap();
    let items = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| LabeledPath {
                path: PathBuf::from(format!("/data/class_{c:02}/img_{i:05}.png")),
                class_index: c,
            })
        })
        .collect();
    DatasetIndex::new(registry, items).unwrap()
}

/// Writes `<root>/<class>/<i>.png` with a class-dependent tint.
pub fn write_png_dataset(root: &Path, classes: &[(&str, usize)], side: u32, seed: u64) {
    let mut r = rng(seed);
    for (c, (name, n)) in classes.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            let tint = [(c * 67 % 256) as u8, (c * 131 % 256) as u8, (c * 29 % 256) as u8];
            let img = image::RgbImage::from_fn(side, side, |_, _| {
                image::Rgb(tint.map(|t| t.saturating_add(r.random_range(0..40))))
            });
            img.save(dir.join(format!("{i:03}.png"))).unwrap();
        }
    }
}

/// Noise images where class 1 carries a bright square at a random spot.
pub struct WatermarkTask {
    pub side: usize,
    pub mark: usize,
    pub train: MemorySource,
    /// Held-out watermarked images with the square's top-left corner.
    pub test: Vec<(ImageTensor, (usize, usize))>,
}

impl WatermarkTask {
    pub fn generate(side: usize, mark: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut images = Vec::with_capacity(n_train);
        let mut labels = Vec::with_capacity(n_train);
        for i in 0..n_train {
            let label = i % 2;
            let (img, _) = Self::sample(side, mark, label == 1, &mut r);
            images.push(img);
            labels.push(label);
        }
        let test = (0..n_test)
            .map(|_| {
                let (img, at) = Self::sample(side, mark, true, &mut r);
                (img, at.unwrap())
            })
            .collect();
        WatermarkTask {
            side,
            mark,
            train: MemorySource::new(images, labels),
            test,
        }
    }

    fn sample(side: usize, mark: usize, marked: bool, r: &mut ChaCha8Rng) -> (ImageTensor, Option<(usize, usize)>) {
        let mut img = noise_image(side, side, 0.6, r);
        if !marked {
            return (img, None);
        }
        let y0 = r.random_range(0..=side - mark);
        let x0 = r.random_range(0..=side - mark);
        for y in y0..y0 + mark {
            for x in x0..x0 + mark {
                for c in 0..3 {
                    img.set(y, x, c, 1.0);
                }
            }
        }
        (img, Some((y0, x0)))
    }

    pub fn inside(&self, at: (usize, usize), cell: (usize, usize)) -> bool {
        (at.0..at.0 + self.mark).contains(&cell.0) && (at.1..at.1 + self.mark).contains(&cell.1)
    }
}
