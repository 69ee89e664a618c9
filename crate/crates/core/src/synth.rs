//! Procedural two-class grayscale images for desk-scale experiments.
//!
//! Class 0 draws a filled disk, class 1 a ring of the same outer radius.
//! Position, radius, ring width, background level, object contrast, a global
//! gain and pixel noise are random per image.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_png, DatasetManifest, Record, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::{map_indexed, Exec};

pub const CLASS_NAMES: [&str; 2] = ["disk", "ring"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        SynthConfig { size, noise: 0.05, seed }
    }
}

/// Image `index` of the set; its class is `index % 2`.
pub fn sample(cfg: &SynthConfig, index: u64) -> (Image, usize) {
    let label = (index % 2) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let s = cfg.size as f64;
    let radius = rng.random_range(0.18 * s..=0.3 * s);
    let cy = rng.random_range(radius..=s - radius);
    let cx = rng.random_range(radius..=s - radius);
    let width = rng.random_range(0.3 * radius..=0.45 * radius);
    let background = rng.random_range(0.25..=0.45);
    let contrast = rng.random_range(0.25..=0.45);
    let gain = rng.random_range(0.6..=1.4);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let im = Image::from_fn(1, cfg.size, cfg.size, |_, y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
        let inside = if label == 0 {
            d <= radius
        } else {
            d <= radius && d >= radius - width
        };
        let mut v = gain * (background + if inside { contrast } else { 0.0 });
        if cfg.noise > 0.0 {
            v += noise.sample(&mut rng);
        }
        v.clamp(0.0, 1.0)
    });
    (im, label)
}

pub fn generate(exec: Exec, cfg: &SynthConfig, n: usize) -> Vec<(Image, usize)> {
    map_indexed(exec, n, |i| sample(cfg, i as u64))
}

/// Write `n` PNGs plus `manifest.txt` into `dir`; records are unsplit and,
/// when `labeled` is false, carry no labels.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, n: usize, labeled: bool) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset size".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(n);
    for (i, (im, label)) in generate(Exec::default(), cfg, n).into_iter().enumerate() {
        let name = format!("img_{i:05}.png");
        save_png(&im, &dir.join(&name), false)?;
        records.push(Record {
            path: name,
            label: labeled.then_some(label),
            split: Split::Unsplit,
        });
    }
    let classes = if labeled {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        Vec::new()
    };
    let m = DatasetManifest::new(classes, records, dir)?;
    crate::data::write_manifest(&m, &dir.join("manifest.txt"))?;
    Ok(m)
}
