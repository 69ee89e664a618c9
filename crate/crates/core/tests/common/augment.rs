//! Sampling statistics of the crop and blur stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitae_ssl::augment::{gaussian_blur, gaussian_kernel_2d, sample_crop, AugmentConfig, CropFallback};
use vitae_ssl::image::Image;

pub const SAMPLES: usize = 10_000;

#[derive(Clone, Debug)]
pub struct AugmentStats {
    pub samples: usize,
    pub area: [f64; 2],
    pub aspect: [f64; 2],
    /// Crops that needed the centered fallback (still within range).
    pub center_fallbacks: usize,
    pub full_image_fallbacks: usize,
    pub blur_rate: f64,
    pub even_kernels: usize,
    /// Largest |Σ kernel − 1| over all sampled blurs.
    pub kernel_sum_error: f64,
}

impl AugmentStats {
    pub fn passes(&self) -> bool {
        self.samples >= SAMPLES
            && self.area[0] >= 0.3
            && self.area[1] <= 0.9
            && self.aspect[0] >= 0.75
            && self.aspect[1] <= 1.3334
            && self.full_image_fallbacks == 0
            && (0.48..=0.52).contains(&self.blur_rate)
            && self.even_kernels == 0
            && self.kernel_sum_error <= 1e-12
    }
}

pub fn stats() -> AugmentStats {
    let cfg = AugmentConfig::new(224);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sides = [(224, 224), (512, 512), (300, 500), (97, 131)];
    let mut s = AugmentStats {
        samples: SAMPLES,
        area: [f64::INFINITY, f64::NEG_INFINITY],
        aspect: [f64::INFINITY, f64::NEG_INFINITY],
        center_fallbacks: 0,
        full_image_fallbacks: 0,
        blur_rate: 0.0,
        even_kernels: 0,
        kernel_sum_error: 0.0,
    };
    for i in 0..SAMPLES {
        let (h, w) = sides[i % sides.len()];
        let t = sample_crop(h, w, &mut rng, &cfg);
        let area = (t.h * t.w) as f64 / (h * w) as f64;
        let aspect = t.w as f64 / t.h as f64;
        s.area = [s.area[0].min(area), s.area[1].max(area)];
        s.aspect = [s.aspect[0].min(aspect), s.aspect[1].max(aspect)];
        match t.fallback {
            Some(CropFallback::Center) => s.center_fallbacks += 1,
            Some(CropFallback::FullImage) => s.full_image_fallbacks += 1,
            None => {}
        }
    }
    let blur_cfg = AugmentConfig::new(32);
    let im = Image::from_fn(3, 32, 32, |_, _, _| rng.random_range(0.0..1.0));
    let mut applied = 0;
    for _ in 0..SAMPLES {
        let (_, t) = gaussian_blur(&im, &mut rng, &blur_cfg);
        applied += t.applied as usize;
        s.even_kernels += (t.kernel % 2 == 0) as usize;
        let k = gaussian_kernel_2d(t.kernel, t.sigma);
        s.kernel_sum_error = s.kernel_sum_error.max((k.iter().sum::<f64>() - 1.0).abs());
    }
    s.blur_rate = applied as f64 / SAMPLES as f64;
    s
}
