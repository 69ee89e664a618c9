//! Dataset manifests, splits, image decoding and evaluation preprocessing.
//!
//! Manifest grammar (UTF-8, `\n` line endings, `#` starts a comment line):
//!
//! ```text
//! manifest-version 1
//! classes <name> <name> ...
//! <relative path>\t<label name or ->\t<train|val|test|unsplit>
//! ```
//!
//! The `classes` line may list no names for unlabeled data. The split column
//! may be omitted (defaults to `unsplit`). Paths are resolved against the
//! manifest's directory, must be unique and may not contain tabs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::{map_indexed, Exec};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unsplit,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unsplit => "unsplit",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        Some(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "unsplit" => Split::Unsplit,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, records: Vec<Record>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            class_names,
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.path.is_empty() || r.path.contains('\t') || r.path.contains('\n') {
                return Err(Error::Data(format!("record {i}: invalid path {:?}", r.path)));
            }
            if !seen.insert(&r.path) {
                return Err(Error::Data(format!("duplicate path {}", r.path)));
            }
            if let Some(l) = r.label {
                if l >= self.class_names.len() {
                    return Err(Error::Data(format!("record {i}: label {l} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    /// Indices of records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.records[i]
                    .label
                    .ok_or_else(|| Error::Data(format!("record {} ({}) has no label", i, self.records[i].path)))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("manifest-version {MANIFEST_VERSION}\nclasses");
        for c in &self.class_names {
            s.push(' ');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.records {
            let label = r.label.map_or("-", |l| self.class_names[l].as_str());
            let _ = writeln!(s, "{}\t{}\t{}", r.path, label, r.split.as_str());
        }
        s
    }

    /// Parse manifest text; `origin` is used in error messages only.
    pub fn parse(text: &str, origin: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));

        let (n, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let version = header
            .strip_prefix("manifest-version ")
            .ok_or_else(|| err(n, "expected `manifest-version <n>`".into()))?;
        if version.trim() != MANIFEST_VERSION.to_string() {
            return Err(err(n, format!("unsupported manifest version {}", version.trim())));
        }
        let (n, classes) = lines.next().ok_or_else(|| err(n + 1, "missing `classes` line".into()))?;
        let mut words = classes.split_whitespace();
        if words.next() != Some("classes") {
            return Err(err(n, "expected `classes ...`".into()));
        }
        let class_names: Vec<String> = words.map(String::from).collect();
        let mut class_index = BTreeMap::new();
        for (i, c) in class_names.iter().enumerate() {
            if c == "-" || class_index.insert(c.clone(), i).is_some() {
                return Err(err(n, format!("invalid or repeated class name {c}")));
            }
        }

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 || cols[0].is_empty() {
                return Err(err(n, "expected `path<TAB>label[<TAB>split]`".into()));
            }
            let label = match cols[1] {
                "-" => None,
                name => Some(
                    *class_index
                        .get(name)
                        .ok_or_else(|| err(n, format!("unknown class label {name:?}")))?,
                ),
            };
            let split = match cols.get(2) {
                None => Split::Unsplit,
                Some(s) => Split::parse(s).ok_or_else(|| err(n, format!("unknown split {s:?}")))?,
            };
            if !seen.insert(cols[0].to_string()) {
                return Err(err(n, format!("duplicate path {}", cols[0])));
            }
            records.push(Record {
                path: cols[0].to_string(),
                label,
                split,
            });
        }
        Ok(DatasetManifest {
            class_names,
            records,
            root: root.into(),
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, path, root)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

/// Record indices grouped by label (unlabeled records form one extra group),
/// each group shuffled by `seed`.
fn strata(m: &DatasetManifest, seed: u64) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        groups.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .into_values()
        .map(|mut g| {
            g.shuffle(&mut rng);
            g
        })
        .collect()
}

/// Split `total` into per-group shares of `round(frac · Σ sizes)` by the
/// largest-remainder method (ties to the earlier group), so each share is
/// the floor or ceiling of its exact quota.
pub fn apportion(sizes: &[usize], frac: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let target = (frac * n as f64).round() as usize;
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * frac).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(out.iter().sum());
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if out[i] < sizes[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Stratified holdout: first `test_frac` of all records goes to test, then
/// `val_frac` of the remainder to validation, the rest to train.
pub fn split_holdout(m: &DatasetManifest, test_frac: f64, val_frac: f64, seed: u64) -> Result<DatasetManifest> {
    for f in [test_frac, val_frac] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1), got {f}")));
        }
    }
    let groups = strata(m, seed);
    if let Some(g) = groups.iter().find(|g| g.len() < 3) {
        return Err(Error::Data(format!(
            "a class has {} records, fewer than the 3 splits requested",
            g.len()
        )));
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let test = apportion(&sizes, test_frac);
    let rest: Vec<usize> = sizes.iter().zip(&test).map(|(s, t)| s - t).collect();
    let val = apportion(&rest, val_frac);
    let mut out = m.clone();
    for (gi, g) in groups.iter().enumerate() {
        for (j, &idx) in g.iter().enumerate() {
            out.records[idx].split = if j < test[gi] {
                Split::Test
            } else if j < test[gi] + val[gi] {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// `fold_of[i]` is the fold of record `i`.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn folds(&self) -> Vec<Vec<usize>> {
        let mut f = vec![Vec::new(); self.k];
        for (i, &k) in self.fold_of.iter().enumerate() {
            f[k].push(i);
        }
        f
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.folds().iter().map(Vec::len).collect()
    }
}

/// Stratified k-fold: classes are shuffled by `seed` and dealt round-robin
/// with one running counter, so fold sizes differ by at most one overall.
pub fn split_kfold(m: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > m.len() {
        return Err(Error::Data(format!("k = {k} exceeds {} records", m.len())));
    }
    let mut fold_of = vec![0; m.len()];
    let mut next = 0;
    for g in strata(m, seed) {
        for idx in g {
            fold_of[idx] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Decode an image file to `[0, 1]` floats. 16-bit sources are divided by
/// 65535, everything else by 255. Alpha is dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    use image::DynamicImage as D;
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decode = |e: image::ImageError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(decode)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |c: usize, px: Vec<f64>| -> Result<Image> {
        let mut data = vec![0.0; c * h * w];
        for (i, chunk) in px.chunks(c).enumerate() {
            for (ch, v) in chunk.iter().enumerate() {
                data[ch * h * w + i] = *v;
            }
        }
        Image::new(c, h, w, data)
    };
    let by = |v: &[u16], c: usize| planar(c, v.iter().map(|&x| x as f64 / 65535.0).collect());
    match img {
        D::ImageLuma16(b) => by(b.as_raw(), 1),
        D::ImageLumaA16(_) => by(img.to_luma16().as_raw(), 1),
        D::ImageRgb16(b) => by(b.as_raw(), 3),
        D::ImageRgba16(_) => by(img.to_rgb16().as_raw(), 3),
        D::ImageLuma8(b) => planar(1, b.as_raw().iter().map(|&x| x as f64 / 255.0).collect()),
        D::ImageLumaA8(_) => planar(1, img.to_luma8().as_raw().iter().map(|&x| x as f64 / 255.0).collect()),
        other => planar(3, other.to_rgb8().as_raw().iter().map(|&x| x as f64 / 255.0).collect()),
    }
}

/// Encode as 8-bit (or 16-bit) grayscale or RGB PNG.
pub fn save_png(im: &Image, path: &Path, sixteen_bit: bool) -> Result<()> {
    let (w, h) = (im.width as u32, im.height as u32);
    let n = im.height * im.width;
    let interleaved = |scale: f64| -> Vec<f64> {
        let mut v = Vec::with_capacity(n * im.channels);
        for i in 0..n {
            for c in 0..im.channels {
                v.push((im.data[c * n + i].clamp(0.0, 1.0) * scale).round());
            }
        }
        v
    };
    let encode_err = |e: image::ImageError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let dynimg: image::DynamicImage = match (im.channels, sixteen_bit) {
        (1, false) => image::GrayImage::from_raw(w, h, interleaved(255.0).into_iter().map(|x| x as u8).collect())
            .map(Into::into),
        (3, false) => image::RgbImage::from_raw(w, h, interleaved(255.0).into_iter().map(|x| x as u8).collect())
            .map(Into::into),
        (1, true) => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            w,
            h,
            interleaved(65535.0).into_iter().map(|x| x as u16).collect(),
        )
        .map(Into::into),
        (3, true) => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
            w,
            h,
            interleaved(65535.0).into_iter().map(|x| x as u16).collect(),
        )
        .map(Into::into),
        _ => None,
    }
    .ok_or_else(|| Error::Shape(format!("cannot encode {} channels", im.channels)))?;
    dynimg.save_with_format(path, image::ImageFormat::Png).map_err(encode_err)
}

/// Convert to `channels`: grayscale is replicated, RGB reduced to luma.
pub fn to_channels(im: Image, channels: usize) -> Result<Image> {
    if im.channels == 3 && channels == 1 {
        let n = im.height * im.width;
        let data = (0..n)
            .map(|i| 0.299 * im.data[i] + 0.587 * im.data[n + i] + 0.114 * im.data[2 * n + i])
            .collect();
        return Image::new(1, im.height, im.width, data);
    }
    im.with_channels(channels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize: usize,
    pub crop: usize,
    pub channels: usize,
}

impl PreprocessConfig {
    pub fn full() -> Self {
        PreprocessConfig {
            resize: 256,
            crop: 224,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize || self.channels == 0 {
            return Err(Error::Config("preprocess needs 0 < crop <= resize and channels > 0".into()));
        }
        Ok(())
    }
}

/// Exact `resize × resize` resample, then the central `crop × crop` window.
pub fn preprocess_eval(im: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    cfg.validate()?;
    let im = to_channels(im.clone(), cfg.channels)?;
    im.resize(cfg.resize, cfg.resize).center_crop(cfg.crop, cfg.crop).map(Image::clamp01)
}

/// Decode the given records, converting channels. Decoding runs per record
/// and results keep record order.
pub fn load_records(exec: Exec, m: &DatasetManifest, indices: &[usize], channels: usize) -> Result<Vec<Image>> {
    map_indexed(exec, indices.len(), |i| {
        let path = m.resolve(&m.records[indices[i]]);
        load_image(&path).and_then(|im| to_channels(im, channels))
    })
    .into_iter()
    .collect()
}
