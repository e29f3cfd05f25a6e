//! Synthetic image-classification data, external loaders, and the
//! train/val/test split discipline.
//!
//! Every dataset carries a [`SplitTag`]. Supernet training and search refuse
//! test-tagged data; only standalone ground-truth training reads it.

use std::f32::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::checkpoint::{self, NamedArray};
use crate::engine::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub tag: SplitTag,
    /// Positions of these samples in the dataset they were split from.
    pub origin: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, tag: SplitTag) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::input(format!("label {l} of sample {i} outside 0..{classes}")));
        }
        let origin = (0..labels.len()).collect();
        Ok(Self {
            images,
            labels,
            classes,
            tag,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            tag,
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    /// Hex SHA-256 of the shape, pixels, labels and class count.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.images.shape().dims() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.update((self.classes as u64).to_le_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Fails when `self` is the held-out test split.
    pub fn require_not_test(&self, consumer: &str) -> Result<()> {
        if self.tag == SplitTag::Test {
            return Err(Error::input(format!("{consumer} must not read the test split")));
        }
        Ok(())
    }

    /// Writes the SCNT container with tensors `images` and `labels`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = NamedArray {
            name: "labels".into(),
            dims: vec![self.len() as u32],
            data: self.labels.iter().map(|&l| l as f32).collect(),
        };
        checkpoint::save(path, &[NamedArray::from_tensor("images", &self.images), labels])
    }

    /// Writes the labeled CSV form: header `label,p0,p1,...`, one row per sample.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let per = self.images.numel() / self.len().max(1);
        let mut header = vec!["label".to_string()];
        header.extend((0..per).map(|i| format!("p{i}")));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, &l) in self.labels.iter().enumerate() {
            let mut row = vec![l.to_string()];
            row.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub const DEFAULT_SIZE: usize = 16;
pub const DEFAULT_CLASSES: usize = 4;
/// 4096 train + 512 val + 1024 test.
pub const DEFAULT_SAMPLES: usize = 5632;
pub const DEFAULT_TEST_FRACTION: f64 = 2.0 / 11.0;
pub const DEFAULT_VAL_FRACTION: f64 = 1.0 / 9.0;
pub const NOISE_STD: f32 = 0.1;

/// Class-conditional procedural images with Gaussian noise. Each class is a
/// constellation of six isolated dots: a straight stripe, a checker lattice,
/// a ring around a radial centre, or a corner (cycling for more than four
/// classes, with the spacing growing per cycle). Position, orientation,
/// polarity and per-channel tint are random.
///
/// Dots sit at least three pixels apart, so every small window looks alike
/// across classes and only the arrangement, visible to a receptive field of
/// several pixels, identifies the class.
pub fn generate_synthetic(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || n % classes != 0 {
        return Err(Error::input(format!(
            "{n} samples cannot be split evenly over {classes} classes"
        )));
    }
    if size < 4 {
        return Err(Error::input(format!("image size {size} too small")));
    }
    let channels = 3;
    let root = Rng::new(seed);
    let plane = size * size;
    let mut data = vec![0f32; n * channels * plane];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut pattern = vec![0f32; plane];
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = root.fork(i as u64);
        render(label, size, &mut rng, &mut pattern);
        if rng.bernoulli(0.5) {
            for v in &mut pattern {
                *v = 1.0 - *v;
            }
        }
        for c in 0..channels {
            let contrast = rng.uniform_range(0.5, 1.0);
            let offset = rng.uniform_range(0.0, 1.0 - contrast);
            let dst = &mut data[(i * channels + c) * plane..(i * channels + c + 1) * plane];
            for (d, &p) in dst.iter_mut().zip(&pattern) {
                *d = (offset + contrast * p + NOISE_STD * rng.normal()).clamp(0.0, 1.0);
            }
        }
    }
    let images = Tensor::from_vec(Shape::new(n, channels, size, size), data)?;
    Dataset::new(images, labels, classes, SplitTag::Full)
}

const DOTS: usize = 6;
/// Class-independent distractor dots per image.
pub const CLUTTER: usize = 4;

/// Writes a `[0, 1]` pattern for `label` into `out` (size x size).
fn render(label: usize, size: usize, rng: &mut Rng, out: &mut [f32]) {
    out.fill(0.0);
    let s = (size / 5).max(1) + label / 4;
    let span = |len: usize| size.saturating_sub(len).max(1);
    let mut pts: Vec<(isize, isize)> = Vec::with_capacity(DOTS);
    match label % 4 {
        0 => {
            let a = rng.below(span((DOTS - 1) * s + 1));
            let b = rng.below(size);
            pts.extend((0..DOTS).map(|k| ((a + k * s) as isize, b as isize)));
        }
        1 => {
            let g = s + 1;
            let (x0, y0) = (rng.below(span(2 * g + 1)), rng.below(span(g + 1)));
            pts.extend((0..DOTS).map(|k| ((x0 + (k % 3) * g) as isize, (y0 + (k / 3) * g) as isize)));
        }
        2 => {
            let r = 2.0 * s as f32;
            let lo = r.ceil() as usize;
            let cx = lo + rng.below(span(2 * lo + 1));
            let cy = lo + rng.below(span(2 * lo + 1));
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            pts.extend((0..DOTS).map(|k| {
                let t = phase + 2.0 * PI * k as f32 / DOTS as f32;
                (
                    (cx as f32 + r * t.cos()).round() as isize,
                    (cy as f32 + r * t.sin()).round() as isize,
                )
            }));
        }
        _ => {
            let arm = 3 * s;
            let (x0, y0) = (rng.below(span(arm + 1)), rng.below(span(arm + 1)));
            pts.push((0, 0));
            pts.extend((1..=3).map(|k| ((k * s) as isize, 0)));
            pts.extend((1..=2).map(|k| (0, (k * s) as isize)));
            let (fx, fy) = (rng.bernoulli(0.5), rng.bernoulli(0.5));
            for p in &mut pts {
                p.0 = if fx { arm as isize - p.0 } else { p.0 } + x0 as isize;
                p.1 = if fy { arm as isize - p.1 } else { p.1 } + y0 as isize;
            }
        }
    }
    let transpose = rng.bernoulli(0.5);
    pts.extend((0..CLUTTER).map(|_| (rng.below(size) as isize, rng.below(size) as isize)));
    for (x, y) in pts {
        let (x, y) = if transpose { (y, x) } else { (x, y) };
        let amp = rng.uniform_range(0.6, 1.0);
        if (0..size as isize).contains(&x) && (0..size as isize).contains(&y) {
            out[y as usize * size + x as usize] = amp;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stratified split. Per class, `round(n_k * test_fraction)` samples go to
/// test, then `round(rest * val_fraction)` of the remainder to validation.
pub fn split(ds: &Dataset, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    for (name, f) in [("validation", val_fraction), ("test", test_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::input(format!("{name} fraction {f} outside (0, 1)")));
        }
    }
    let mut rng = Rng::new(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
        rng.shuffle(&mut idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let n_val = ((idx.len() - n_test) as f64 * val_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::input(format!("{name} split would be empty")));
        }
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&train, SplitTag::Train),
        val: ds.subset(&val, SplitTag::Val),
        test: ds.subset(&test, SplitTag::Test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalFormat {
    /// SCNT container holding `images` (n, c, h, w) and `labels` (n).
    Scnt,
    /// Header `label,p0,p1,...`; pixels in channel-major order, square images.
    Csv,
}

impl ExternalFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ExternalFormat::Csv,
            _ => ExternalFormat::Scnt,
        }
    }
}

/// Loads and validates an external dataset. Pixel values already in `[0, 1]`
/// are kept; values in `[0, 255]` are divided by 255.
pub fn load_external(path: &Path, format: ExternalFormat, classes: usize, channels: usize) -> Result<Dataset> {
    let (images, labels) = match format {
        ExternalFormat::Scnt => load_scnt(path, classes)?,
        ExternalFormat::Csv => load_csv(path, classes, channels)?,
    };
    let images = rescale(images, path)?;
    Dataset::new(images, labels, classes, SplitTag::Full)
}

fn rescale(mut images: Tensor, path: &Path) -> Result<Tensor> {
    let (lo, hi) = images
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo >= 0.0 && hi <= 255.0) {
        return Err(Error::input(format!(
            "{}: pixel values span [{lo}, {hi}], expected [0, 1] or [0, 255]",
            path.display()
        )));
    }
    if hi > 1.0 {
        for v in images.data_mut() {
            *v /= 255.0;
        }
    }
    Ok(images)
}

fn load_scnt(path: &Path, classes: usize) -> Result<(Tensor, Vec<usize>)> {
    let arrays = checkpoint::load(path)?;
    let source = path.display().to_string();
    let find = |name: &str| {
        arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Parse {
            source_name: source.clone(),
            position: "tensor table".into(),
            message: format!("missing tensor '{name}'"),
        })
    };
    let images = find("images")?.to_tensor()?;
    let raw = find("labels")?;
    if raw.data.len() != images.shape().n {
        return Err(Error::Parse {
            source_name: source,
            position: "tensor 'labels'".into(),
            message: format!("{} labels for {} images", raw.data.len(), images.shape().n),
        });
    }
    let mut labels = Vec::with_capacity(raw.data.len());
    for (i, &v) in raw.data.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
            return Err(Error::Parse {
                source_name: source,
                position: format!("label {i}"),
                message: format!("label {v} is not an integer in 0..{classes}"),
            });
        }
        labels.push(v as usize);
    }
    Ok((images, labels))
}

fn load_csv(path: &Path, classes: usize, channels: usize) -> Result<(Tensor, Vec<usize>)> {
    let source = path.display().to_string();
    let parse_err = |line: u64, message: String| Error::Parse {
        source_name: source.clone(),
        position: format!("line {line}"),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") {
        return Err(parse_err(1, "header must start with 'label'".into()));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h != format!("p{i}") {
            return Err(parse_err(1, format!("column {} is '{h}', expected 'p{i}'", i + 1)));
        }
    }
    let pixels = header.len() - 1;
    let side = ((pixels / channels.max(1)) as f64).sqrt().round() as usize;
    if channels == 0 || side * side * channels != pixels || pixels == 0 {
        return Err(parse_err(
            1,
            format!("{pixels} pixel columns do not form {channels}-channel square images"),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != pixels + 1 {
            return Err(parse_err(line, format!("{} fields, expected {}", record.len(), pixels + 1)));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label '{}' is not a non-negative integer", &record[0])))?;
        if label >= classes {
            return Err(parse_err(line, format!("label {label} outside 0..{classes}")));
        }
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("pixel p{j} = '{field}' is not a number")))?;
            data.push(v);
        }
    }
    let images = Tensor::from_vec(Shape::new(labels.len(), channels, side, side), data)?;
    Ok((images, labels))
}
