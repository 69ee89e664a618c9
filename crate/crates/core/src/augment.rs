//! Fixed-size two-view augmentation: random resized crop, color
//! distortion, Gaussian blur, in that order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::{map_indexed, Exec};

const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub out_size: usize,
    #[serde(default = "d_scale")]
    pub scale_range: [f64; 2],
    #[serde(default = "d_aspect")]
    pub aspect_range: [f64; 2],
    #[serde(default = "d_jitter")]
    pub brightness: f64,
    #[serde(default = "d_jitter")]
    pub contrast: f64,
    #[serde(default = "d_jitter")]
    pub saturation: f64,
    #[serde(default = "d_hue")]
    pub hue: f64,
    #[serde(default = "d_gray")]
    pub gray_prob: f64,
    #[serde(default = "d_blur")]
    pub blur_prob: f64,
    #[serde(default = "d_sigma")]
    pub sigma_range: [f64; 2],
    #[serde(default = "d_kernel_frac")]
    pub kernel_frac: f64,
}

fn d_scale() -> [f64; 2] {
    [0.3, 0.9]
}
fn d_aspect() -> [f64; 2] {
    [3.0 / 4.0, 4.0 / 3.0]
}
fn d_jitter() -> f64 {
    0.4
}
fn d_hue() -> f64 {
    0.1
}
fn d_gray() -> f64 {
    0.2
}
fn d_blur() -> f64 {
    0.5
}
fn d_sigma() -> [f64; 2] {
    [0.1, 2.0]
}
fn d_kernel_frac() -> f64 {
    0.1
}

impl AugmentConfig {
    pub fn new(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            scale_range: d_scale(),
            aspect_range: d_aspect(),
            brightness: d_jitter(),
            contrast: d_jitter(),
            saturation: d_jitter(),
            hue: d_hue(),
            gray_prob: d_gray(),
            blur_prob: d_blur(),
            sigma_range: d_sigma(),
            kernel_frac: d_kernel_frac(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [smin, smax] = self.scale_range;
        let [amin, amax] = self.aspect_range;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.out_size == 0 {
            return bad("out_size must be positive");
        }
        if !(0.0 < smin && smin <= smax && smax <= 1.0) {
            return bad("scale_range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0 < amin && amin <= 1.0 && 1.0 <= amax) {
            return bad("aspect_range must satisfy 0 < min <= 1 <= max");
        }
        for p in [self.gray_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|&s| !(0.0..=1.0).contains(&s))
            || !(0.0..=0.5).contains(&self.hue)
        {
            return bad("jitter strengths must lie in [0, 1] (hue in [0, 0.5])");
        }
        let [lo, hi] = self.sigma_range;
        if !(0.0 < lo && lo <= hi) {
            return bad("sigma_range must be positive and ordered");
        }
        if !(self.kernel_frac > 0.0 && self.kernel_frac <= 1.0) {
            return bad("kernel_frac must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropFallback {
    /// All sampling attempts were rejected; a centered crop was used.
    Center,
    /// No crop within the configured ranges fits; the whole image was used.
    FullImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTrace {
    pub x: usize,
    pub y: usize,
    pub h: usize,
    pub w: usize,
    pub area_fraction: f64,
    pub aspect: f64,
    pub attempts: usize,
    pub fallback: Option<CropFallback>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTrace {
    pub order: Vec<ColorOp>,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurTrace {
    pub applied: bool,
    pub sigma: f64,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTrace {
    pub crop: CropTrace,
    pub color: ColorTrace,
    pub blur: BlurTrace,
}

impl ViewTrace {
    /// One JSON object per line.
    pub fn to_jsonl(traces: &[ViewTrace]) -> Result<String> {
        let mut out = String::new();
        for t in traces {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    pub trace: [ViewTrace; 2],
}

fn crop_ok(h: usize, w: usize, height: usize, width: usize, cfg: &AugmentConfig) -> bool {
    if h == 0 || w == 0 || h > height || w > width {
        return false;
    }
    let frac = (h * w) as f64 / (height * width) as f64;
    let aspect = w as f64 / h as f64;
    let [smin, smax] = cfg.scale_range;
    let [amin, amax] = cfg.aspect_range;
    (smin..=smax).contains(&frac) && (amin..=amax).contains(&aspect)
}

/// Sample a crop rectangle. Candidates are rounded to whole pixels and then
/// re-checked, so the recorded area fraction and aspect always lie in the
/// configured closed ranges unless a fallback is flagged.
pub fn sample_crop<R: Rng>(height: usize, width: usize, rng: &mut R, cfg: &AugmentConfig) -> CropTrace {
    let area = (height * width) as f64;
    let [smin, smax] = cfg.scale_range;
    let [amin, amax] = cfg.aspect_range;
    let trace = |x, y, h: usize, w: usize, attempts, fallback| CropTrace {
        x,
        y,
        h,
        w,
        area_fraction: (h * w) as f64 / area,
        aspect: w as f64 / h as f64,
        attempts,
        fallback,
    };
    for attempt in 1..=CROP_ATTEMPTS {
        let frac = rng.random_range(smin..=smax);
        let log_aspect = rng.random_range(amin.ln()..=amax.ln());
        let aspect = log_aspect.exp();
        let w = (area * frac * aspect).sqrt().round() as usize;
        let h = (area * frac / aspect).sqrt().round() as usize;
        if crop_ok(h, w, height, width, cfg) {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return trace(x, y, h, w, attempt, None);
        }
    }
    // Largest square whose area fraction stays in range, centered.
    let side = ((smax * area).sqrt().floor() as usize).min(height).min(width);
    if crop_ok(side, side, height, width, cfg) {
        let (y, x) = ((height - side) / 2, (width - side) / 2);
        return trace(x, y, side, side, CROP_ATTEMPTS, Some(CropFallback::Center));
    }
    trace(0, 0, height, width, CROP_ATTEMPTS, Some(CropFallback::FullImage))
}

pub fn random_resized_crop<R: Rng>(image: &Image, rng: &mut R, cfg: &AugmentConfig) -> Result<(Image, CropTrace)> {
    if image.height < 2 || image.width < 2 {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than 2x2",
            image.height, image.width
        )));
    }
    let t = sample_crop(image.height, image.width, rng, cfg);
    let out = image.resize_region(t.x, t.y, t.h, t.w, cfg.out_size, cfg.out_size);
    Ok((out, t))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn gray_of(image: &Image, y: usize, x: usize) -> f64 {
    if image.channels == 3 {
        (0..3).map(|c| LUMA[c] * image.at(c, y, x)).sum()
    } else {
        image.at(0, y, x)
    }
}

fn adjust_brightness(image: &mut Image, f: f64) {
    for v in &mut image.data {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(image: &mut Image, f: f64) {
    let n = (image.height * image.width) as f64;
    let mut mean = 0.0;
    for y in 0..image.height {
        for x in 0..image.width {
            mean += gray_of(image, y, x);
        }
    }
    mean /= n;
    for v in &mut image.data {
        *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
    }
}

fn adjust_saturation(image: &mut Image, f: f64) {
    if image.channels != 3 {
        return;
    }
    for y in 0..image.height {
        for x in 0..image.width {
            let g = gray_of(image, y, x);
            for c in 0..3 {
                let v = image.at_mut(c, y, x);
                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// RGB → HSV with all components in [0, 1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(image: &mut Image, shift: f64) {
    if image.channels != 3 || shift == 0.0 {
        return;
    }
    for y in 0..image.height {
        for x in 0..image.width {
            let (h, s, v) = rgb_to_hsv(image.at(0, y, x), image.at(1, y, x), image.at(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            *image.at_mut(0, y, x) = r.clamp(0.0, 1.0);
            *image.at_mut(1, y, x) = g.clamp(0.0, 1.0);
            *image.at_mut(2, y, x) = b.clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(image: &mut Image) {
    if image.channels != 3 {
        return;
    }
    for y in 0..image.height {
        for x in 0..image.width {
            let g = gray_of(image, y, x).clamp(0.0, 1.0);
            for c in 0..3 {
                *image.at_mut(c, y, x) = g;
            }
        }
    }
}

/// Apply color operations with fixed factors, in the traced order.
pub fn apply_color(image: &Image, t: &ColorTrace) -> Image {
    let mut out = image.clone().clamp01();
    for op in &t.order {
        match op {
            ColorOp::Brightness => adjust_brightness(&mut out, t.brightness),
            ColorOp::Contrast => adjust_contrast(&mut out, t.contrast),
            ColorOp::Saturation => adjust_saturation(&mut out, t.saturation),
            ColorOp::Hue => adjust_hue(&mut out, t.hue),
        }
    }
    if t.grayscale {
        to_grayscale(&mut out);
    }
    out
}

/// Color jitter (brightness, contrast, saturation, hue in random order)
/// followed by color dropping with probability `gray_prob`.
pub fn color_distort<R: Rng>(image: &Image, rng: &mut R, cfg: &AugmentConfig) -> (Image, ColorTrace) {
    let mut factor = |s: f64| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
    let brightness = factor(cfg.brightness);
    let contrast = factor(cfg.contrast);
    let saturation = factor(cfg.saturation);
    let hue = if cfg.hue > 0.0 {
        rng.random_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    let mut order = vec![ColorOp::Brightness, ColorOp::Contrast, ColorOp::Saturation, ColorOp::Hue];
    order.shuffle(rng);
    let grayscale = rng.random_bool(cfg.gray_prob);
    let t = ColorTrace {
        order,
        brightness,
        contrast,
        saturation,
        hue,
        grayscale,
    };
    (apply_color(image, &t), t)
}

/// Odd kernel side nearest to `frac · shorter_side` (ties go up), at least 1.
pub fn blur_kernel_size(height: usize, width: usize, frac: f64) -> usize {
    let x = frac * height.min(width) as f64;
    2 * (x / 2.0).floor() as usize + 1
}

/// Normalized 1-D Gaussian of odd length `k`.
pub fn gaussian_kernel_1d(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// The separable 2-D kernel as a dense `k × k` row-major matrix.
pub fn gaussian_kernel_2d(k: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel_1d(k, sigma);
    let mut out = Vec::with_capacity(k * k);
    for a in &g {
        for b in &g {
            out.push(a * b);
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable Gaussian convolution with reflect padding.
pub fn blur_with(image: &Image, k: usize, sigma: f64) -> Image {
    let g = gaussian_kernel_1d(k, sigma);
    let r = (k / 2) as isize;
    let (h, w) = (image.height, image.width);
    let horiz = Image::from_fn(image.channels, h, w, |c, y, x| {
        g.iter()
            .enumerate()
            .map(|(i, wt)| wt * image.at(c, y, reflect(x as isize + i as isize - r, w)))
            .sum()
    });
    Image::from_fn(image.channels, h, w, |c, y, x| {
        g.iter()
            .enumerate()
            .map(|(i, wt)| wt * horiz.at(c, reflect(y as isize + i as isize - r, h), x))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    })
}

pub fn gaussian_blur<R: Rng>(image: &Image, rng: &mut R, cfg: &AugmentConfig) -> (Image, BlurTrace) {
    let kernel = blur_kernel_size(image.height, image.width, cfg.kernel_frac);
    let applied = rng.random_bool(cfg.blur_prob);
    let [lo, hi] = cfg.sigma_range;
    let sigma = rng.random_range(lo..=hi);
    let out = if applied {
        blur_with(image, kernel, sigma)
    } else {
        image.clone()
    };
    (out, BlurTrace { applied, sigma, kernel })
}

/// One augmentation chain: crop, color, blur.
pub fn augment<R: Rng>(image: &Image, rng: &mut R, cfg: &AugmentConfig) -> Result<(Image, ViewTrace)> {
    let (x, crop) = random_resized_crop(image, rng, cfg)?;
    let (x, color) = color_distort(&x, rng, cfg);
    let (x, blur) = gaussian_blur(&x, rng, cfg);
    Ok((x, ViewTrace { crop, color, blur }))
}

/// Two independent chains over the same source image.
pub fn make_view_pair<R: Rng>(image: &Image, rngs: [&mut R; 2], cfg: &AugmentConfig) -> Result<ViewPair> {
    cfg.validate()?;
    let [r1, r2] = rngs;
    let (view1, t1) = augment(image, r1, cfg)?;
    let (view2, t2) = augment(image, r2, cfg)?;
    Ok(ViewPair {
        view1,
        view2,
        trace: [t1, t2],
    })
}

/// Per-view random stream for image `index` in `epoch`; independent of batch
/// composition and worker count.
pub fn view_rng(seed: u64, epoch: u64, index: u64, view: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch & 0xffff_ffff) << 32) | ((index & 0x3fff_ffff) << 2) | (view & 3));
    r
}

/// View pairs for a batch; image `i` uses streams derived from
/// `(seed, epoch, indices[i])`, so results do not depend on `exec`.
pub fn view_pairs_for_batch(
    exec: Exec,
    images: &[&Image],
    indices: &[u64],
    seed: u64,
    epoch: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<ViewPair>> {
    cfg.validate()?;
    map_indexed(exec, images.len(), |i| {
        let mut r1 = view_rng(seed, epoch, indices[i], 0);
        let mut r2 = view_rng(seed, epoch, indices[i], 1);
        make_view_pair(images[i], [&mut r1, &mut r2], cfg)
    })
    .into_iter()
    .collect()
}
