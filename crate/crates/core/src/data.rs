//! Desk-scale datasets: synthetic 2D densities and a minimal raster-grid
//! file format. Everything lives in the canonical range `[-1, 1]`.
//!
//! Grid file layout (little-endian):
//!
//! ```text
//! b"EBMG"
//! u32 N, u32 H, u32 W, u32 channels, u32 num_classes (0 = unlabeled)
//! u8  pixels[N * H * W * channels]   // per sample: rows, then columns, then channels
//! u16 labels[N]                      // only when num_classes > 0
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

pub const DATA_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Points,
    Raster { height: usize, width: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub range: (f64, f64),
    pub kind: DataKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Checks the range and label invariants.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if let Some(v) = self.samples.values().iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Data(format!("{}: sample value {v} outside [{lo}, {hi}]", self.name)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Data(format!("{}: {} labels for {} samples", self.name, labels.len(), self.len())));
            }
            if let Some(y) = labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::Data(format!("{}: label {y} outside [0, {})", self.name, self.num_classes)));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self.samples.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            range: self.range,
            kind: self.kind,
        }
    }

    /// Random split into `(train, test)` with `test_fraction` of the rows in
    /// the second part.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test.min(self.len()));
        (self.subset(train), self.subset(test))
    }

    /// Uniform draw of `size` rows with replacement.
    pub fn batch(&self, size: usize, tag: BatchTag, rng: &mut Rng) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        Batch {
            x: self.samples.select_rows(&idx),
            y: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            tag,
        }
    }

    /// Parses `synth:<kind>:<n>[:<noise>]` or a grid file path.
    pub fn from_spec(spec: &str, seed: u64) -> Result<Dataset> {
        if let Some(rest) = spec.strip_prefix("synth:") {
            let mut parts = rest.split(':');
            let kind: Synth2d = parts.next().unwrap_or_default().parse()?;
            let n = match parts.next() {
                Some(s) => s.parse().map_err(|_| Error::Config(format!("bad sample count '{s}' in '{spec}'")))?,
                None => 8000,
            };
            let noise = match parts.next() {
                Some(s) => s.parse().map_err(|_| Error::Config(format!("bad noise '{s}' in '{spec}'")))?,
                None => kind.default_noise(),
            };
            if parts.next().is_some() {
                return Err(Error::Config(format!("trailing fields in dataset spec '{spec}'")));
            }
            synth_2d_with_noise(kind, n, noise, seed)
        } else {
            load_grid(Path::new(spec))
        }
    }
}

/// Whether a batch went through augmentation. Attached where batches are
/// drawn and checked where losses are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchTag {
    Clean,
    Augmented,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub tag: BatchTag,
}

impl Batch {
    pub fn clean(x: Tensor, y: Option<Vec<usize>>) -> Self {
        Self {
            x,
            y,
            tag: BatchTag::Clean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Synth2d {
    #[default]
    EightGaussians,
    TwoRings,
    Checkerboard,
    TwoMoons,
}

impl Synth2d {
    pub fn default_noise(self) -> f64 {
        match self {
            Synth2d::EightGaussians => 0.05,
            Synth2d::TwoRings => 0.02,
            Synth2d::Checkerboard => 0.0,
            Synth2d::TwoMoons => 0.05,
        }
    }
}

impl FromStr for Synth2d {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" => Ok(Synth2d::EightGaussians),
            "two_rings" => Ok(Synth2d::TwoRings),
            "checkerboard" => Ok(Synth2d::Checkerboard),
            "two_moons" => Ok(Synth2d::TwoMoons),
            other => Err(Error::Config(format!(
                "unknown synthetic dataset '{other}' (eight_gaussians|two_rings|checkerboard|two_moons)"
            ))),
        }
    }
}

impl fmt::Display for Synth2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Synth2d::EightGaussians => "eight_gaussians",
            Synth2d::TwoRings => "two_rings",
            Synth2d::Checkerboard => "checkerboard",
            Synth2d::TwoMoons => "two_moons",
        })
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 0.7;

/// Mode centres of the eight-Gaussians density: a regular octagon of radius
/// 0.7.
pub fn eight_gaussian_centres() -> [(f64, f64); 8] {
    std::array::from_fn(|k| {
        let a = k as f64 * PI / 4.0;
        (EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin())
    })
}

// Two-moons arcs are built in the usual unit-circle coordinates, then shifted
// by `MOONS_OFFSET` and scaled by `MOONS_SCALE` into [-1, 1]².
const MOONS_OFFSET: (f64, f64) = (0.5, 0.25);
const MOONS_SCALE: f64 = 0.6;

/// Centres of the two moon arcs in data coordinates; both arcs have radius
/// `MOONS_SCALE`.
pub fn moon_arc_centres() -> [(f64, f64); 2] {
    [
        (-MOONS_OFFSET.0 * MOONS_SCALE, -MOONS_OFFSET.1 * MOONS_SCALE),
        ((1.0 - MOONS_OFFSET.0) * MOONS_SCALE, (0.5 - MOONS_OFFSET.1) * MOONS_SCALE),
    ]
}

pub fn moon_radius() -> f64 {
    MOONS_SCALE
}

pub fn synth_2d(kind: Synth2d, n: usize, seed: u64) -> Result<Dataset> {
    synth_2d_with_noise(kind, n, kind.default_noise(), seed)
}

/// Synthetic 2D dataset. `noise` is the per-mode standard deviation for
/// eight-Gaussians, the radial jitter for rings and the moon noise in
/// unit-circle coordinates; checkerboard ignores it.
pub fn synth_2d_with_noise(kind: Synth2d, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let normal = |rng: &mut Rng| -> f64 { rng.sample(StandardNormal) };
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let num_classes;
    match kind {
        Synth2d::EightGaussians => {
            num_classes = 8;
            let centres = eight_gaussian_centres();
            for i in 0..n {
                // stratified: mode k gets rows k, k+8, k+16, ...
                let k = i % 8;
                let (cx, cy) = centres[k];
                values.push(cx + noise * normal(&mut rng));
                values.push(cy + noise * normal(&mut rng));
                labels.push(k);
            }
        }
        Synth2d::TwoMoons => {
            num_classes = 2;
            for i in 0..n {
                let moon = i % 2;
                let t = PI * rng.random::<f64>();
                let (x, y) = if moon == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x = x + noise * normal(&mut rng);
                let y = y + noise * normal(&mut rng);
                values.push((x - MOONS_OFFSET.0) * MOONS_SCALE);
                values.push((y - MOONS_OFFSET.1) * MOONS_SCALE);
                labels.push(moon);
            }
        }
        Synth2d::TwoRings => {
            num_classes = 0;
            for i in 0..n {
                let r = if i % 2 == 0 { 0.4 } else { 0.8 };
                let a = 2.0 * PI * rng.random::<f64>();
                let r = r + noise * normal(&mut rng);
                values.push(r * a.cos());
                values.push(r * a.sin());
            }
        }
        Synth2d::Checkerboard => {
            num_classes = 0;
            for _ in 0..n {
                // 4x4 board over [-1, 1]²; keep cells whose indices have even sum.
                let cx = rng.random_range(0..4usize);
                let cy = 2 * rng.random_range(0..2usize) + (cx % 2);
                values.push(-1.0 + 0.5 * (cx as f64 + rng.random::<f64>()));
                values.push(-1.0 + 0.5 * (cy as f64 + rng.random::<f64>()));
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(DATA_RANGE.0, DATA_RANGE.1);
    }
    let labelled = num_classes > 0;
    Ok(Dataset {
        name: kind.to_string(),
        samples: Tensor::new(vec![n, 2], values)?,
        labels: labelled.then_some(labels),
        num_classes,
        range: DATA_RANGE,
        kind: DataKind::Points,
    })
}

/// Maps a byte to `[-1, 1]` via `v / 127.5 - 1`.
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest level.
pub fn unit_to_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

const GRID_MAGIC: &[u8; 4] = b"EBMG";

pub fn load_grid(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    let header = (|| -> Result<[u32; 5]> {
        r.expect_magic(GRID_MAGIC)?;
        Ok([r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?])
    })()
    .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    let [n, h, w, c, num_classes] = header.map(|v| v as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(path, format!("malformed header: zero extent in {h}x{w}x{c}")));
    }
    let d = h * w * c;
    let expected = n * d + if num_classes > 0 { 2 * n } else { 0 };
    if r.remaining() != expected {
        return Err(Error::format(
            path,
            format!("truncated or oversized payload: header implies {expected} bytes, found {}", r.remaining()),
        ));
    }
    let pixels = r.take(n * d)?;
    let samples = Tensor::new(vec![n, d], pixels.iter().map(|&v| byte_to_unit(v)).collect())?;
    let labels = if num_classes > 0 {
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = r.u16()? as usize;
            if y >= num_classes {
                return Err(Error::format(path, format!("label {y} of sample {i} out of range for {num_classes} classes")));
            }
            labels.push(y);
        }
        Some(labels)
    } else {
        None
    };
    Ok(Dataset {
        name: path.file_stem().map_or_else(|| "grid".into(), |s| s.to_string_lossy().into_owned()),
        samples,
        labels,
        num_classes,
        range: DATA_RANGE,
        kind: DataKind::Raster {
            height: h,
            width: w,
            channels: c,
        },
    })
}

/// Writes raw pixels and optional labels in the grid format.
pub fn write_grid(
    path: &Path,
    shape: (usize, usize, usize),
    pixels: &[u8],
    labels: Option<(&[u16], usize)>,
) -> Result<()> {
    let (h, w, c) = shape;
    let d = h * w * c;
    if d == 0 || !pixels.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(format!("{} pixels do not tile {h}x{w}x{c}", pixels.len())));
    }
    let n = pixels.len() / d;
    let mut out = Writer::new();
    out.bytes(GRID_MAGIC);
    for v in [n, h, w, c, labels.map_or(0, |l| l.1)] {
        out.u32(v as u32);
    }
    out.bytes(pixels);
    if let Some((ls, _)) = labels {
        if ls.len() != n {
            return Err(Error::InvalidArgument(format!("{} labels for {n} samples", ls.len())));
        }
        for &y in ls {
            out.bytes(&y.to_le_bytes());
        }
    }
    out.write_to(path)
}

/// Writes a dataset in the grid format, quantizing values to bytes.
pub fn save_grid(dataset: &Dataset, path: &Path) -> Result<()> {
    let DataKind::Raster { height, width, channels } = dataset.kind else {
        return Err(Error::InvalidArgument("only raster datasets can be written as grids".into()));
    };
    let pixels: Vec<u8> = dataset.samples.values().iter().map(|&v| unit_to_byte(v)).collect();
    let labels: Option<Vec<u16>> = dataset.labels.as_ref().map(|l| l.iter().map(|&y| y as u16).collect());
    write_grid(
        path,
        (height, width, channels),
        &pixels,
        labels.as_deref().map(|l| (l, dataset.num_classes)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    None,
    /// Additive Gaussian jitter for point data.
    Jitter { sigma: f64 },
    /// Random horizontal flip, integer translation up to `max_shift` pixels
    /// (edge-replicated) and uniform dequantization noise of one level.
    Raster { max_shift: usize },
}

impl Augmentation {
    pub fn default_for(kind: DataKind) -> Self {
        match kind {
            DataKind::Points => Augmentation::Jitter { sigma: 0.01 },
            DataKind::Raster { .. } => Augmentation::Raster { max_shift: 2 },
        }
    }
}

/// Mirrors one `H×W×C` sample left to right.
pub fn flip_horizontal(sample: &[f64], height: usize, width: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; sample.len()];
    for r in 0..height {
        for col in 0..width {
            let src = (r * width + col) * channels;
            let dst = (r * width + (width - 1 - col)) * channels;
            out[dst..dst + channels].copy_from_slice(&sample[src..src + channels]);
        }
    }
    out
}

fn translate(sample: &[f64], height: usize, width: usize, channels: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; sample.len()];
    for r in 0..height {
        let sr = (r as isize - dy).clamp(0, height as isize - 1) as usize;
        for col in 0..width {
            let sc = (col as isize - dx).clamp(0, width as isize - 1) as usize;
            let src = (sr * width + sc) * channels;
            let dst = (r * width + col) * channels;
            out[dst..dst + channels].copy_from_slice(&sample[src..src + channels]);
        }
    }
    out
}

/// Applies `aug` to every row of `batch` and re-clamps to `range`.
pub fn augment(batch: &Tensor, aug: Augmentation, kind: DataKind, range: (f64, f64), rng: &mut Rng) -> Result<Tensor> {
    let mut out = batch.clone();
    match (aug, kind) {
        (Augmentation::None, _) => return Ok(out),
        (Augmentation::Jitter { sigma }, _) => {
            for v in out.values_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        (Augmentation::Raster { max_shift }, DataKind::Raster { height, width, channels }) => {
            if batch.cols() != height * width * channels {
                return Err(Error::shape("augment", batch.shape(), &[height, width, channels]));
            }
            let level = 2.0 / 255.0;
            let shift = max_shift as i64;
            for i in 0..out.rows() {
                let mut s = out.row(i).to_vec();
                if rng.random::<bool>() {
                    s = flip_horizontal(&s, height, width, channels);
                }
                let dy = rng.random_range(-shift..=shift) as isize;
                let dx = rng.random_range(-shift..=shift) as isize;
                s = translate(&s, height, width, channels, dy, dx);
                for v in &mut s {
                    *v += level * (rng.random::<f64>() - 0.5);
                }
                out.row_mut(i).copy_from_slice(&s);
            }
        }
        (Augmentation::Raster { .. }, DataKind::Points) => {
            return Err(Error::Config("raster augmentation requested for point data".into()));
        }
    }
    for v in out.values_mut() {
        *v = v.clamp(range.0, range.1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::mean_and_covariance;

    #[test]
    fn eight_gaussians_is_stratified_and_centred() {
        let d = synth_2d(Synth2d::EightGaussians, 8000, 1).unwrap();
        d.validate().unwrap();
        let labels = d.labels.as_ref().unwrap();
        for k in 0..8 {
            assert_eq!(labels.iter().filter(|&&y| y == k).count(), 1000);
        }
        for (k, (cx, cy)) in eight_gaussian_centres().iter().enumerate() {
            let r = (cx * cx + cy * cy).sqrt();
            assert!((r - 0.7).abs() < 1e-12);
            let idx: Vec<usize> = (0..8000).filter(|&i| labels[i] == k).collect();
            let (m, _) = mean_and_covariance(&d.samples.select_rows(&idx)).unwrap();
            assert!((m[0] - cx).abs() < 0.02 && (m[1] - cy).abs() < 0.02, "mode {k}: {m:?}");
        }
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = synth_2d_with_noise(Synth2d::TwoMoons, 2000, 0.0, 3).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let centres = moon_arc_centres();
        for i in 0..d.len() {
            let (cx, cy) = centres[labels[i]];
            let p = d.samples.row(i);
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - moon_radius()).abs() < 1e-9);
            // upper arc for moon 0, lower arc for moon 1
            if labels[i] == 0 {
                assert!(p[1] >= cy - 1e-12);
            } else {
                assert!(p[1] <= cy + 1e-12);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        for kind in [Synth2d::EightGaussians, Synth2d::TwoRings, Synth2d::Checkerboard, Synth2d::TwoMoons] {
            let a = synth_2d(kind, 500, 9).unwrap();
            let b = synth_2d(kind, 500, 9).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
        }
        assert!("spiral".parse::<Synth2d>().is_err());
        assert!(synth_2d(Synth2d::TwoMoons, 0, 1).is_err());
    }

    #[test]
    fn checkerboard_avoids_odd_cells() {
        let d = synth_2d(Synth2d::Checkerboard, 4000, 2).unwrap();
        for i in 0..d.len() {
            let p = d.samples.row(i);
            let cx = ((p[0] + 1.0) * 2.0).floor() as usize;
            let cy = ((p[1] + 1.0) * 2.0).floor() as usize;
            assert_eq!((cx.min(3) + cy.min(3)) % 2, 0);
        }
    }

    fn grid_path(dir: &tempfile::TempDir, name: &str) -> std::path::PathBuf {
        dir.path().join(name)
    }

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = grid_path(&dir, "g.grid");
        let pixels: Vec<u8> = (0..3 * 4 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect();
        write_grid(&path, (4, 4, 3), &pixels, Some((&[0, 2, 1], 3))).unwrap();
        let d = load_grid(&path).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 48);
        assert_eq!(d.labels.as_deref(), Some(&[0, 2, 1][..]));
        for (v, p) in d.samples.values().iter().zip(&pixels) {
            assert_eq!(unit_to_byte(*v), *p);
        }
        let again = grid_path(&dir, "h.grid");
        save_grid(&d, &again).unwrap();
        assert_eq!(load_grid(&again).unwrap().samples, d.samples);
    }

    #[test]
    fn grid_mapping_is_exact_at_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = grid_path(&dir, "w.grid");
        let mut pixels = vec![0u8; 16];
        pixels[5] = 255;
        write_grid(&path, (4, 4, 1), &pixels, None).unwrap();
        let d = load_grid(&path).unwrap();
        assert_eq!(d.samples.values()[5], 1.0);
        assert_eq!(d.samples.values()[0], -1.0);
        assert!(d.labels.is_none());
    }

    #[test]
    fn empty_grid_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = grid_path(&dir, "e.grid");
        write_grid(&path, (2, 2, 1), &[], None).unwrap();
        let d = load_grid(&path).unwrap();
        assert!(d.is_empty());
        assert!(crate::init::fit_gaussian(&d.samples, 1e-4).is_err());
    }

    #[test]
    fn grid_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let header_bad = grid_path(&dir, "a.grid");
        std::fs::write(&header_bad, b"EBMX\0\0").unwrap();
        let err = load_grid(&header_bad).unwrap_err().to_string();
        assert!(err.contains("malformed header"), "{err}");

        let short = grid_path(&dir, "b.grid");
        write_grid(&short, (2, 2, 1), &[1, 2, 3, 4, 5, 6, 7, 8], None).unwrap();
        let mut bytes = std::fs::read(&short).unwrap();
        bytes.pop();
        std::fs::write(&short, &bytes).unwrap();
        let err = load_grid(&short).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let bad_label = grid_path(&dir, "c.grid");
        write_grid(&bad_label, (2, 2, 1), &[0; 4], Some((&[5], 2))).unwrap();
        let err = load_grid(&bad_label).unwrap_err().to_string();
        assert!(err.contains("label 5"), "{err}");
    }

    #[test]
    fn augmentation_contracts() {
        let mut rng = rng::stream(1, Stream::Augment);
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]).unwrap();
        assert_eq!(augment(&x, Augmentation::None, DataKind::Points, DATA_RANGE, &mut rng).unwrap(), x);

        let sample: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 / 12.0).collect();
        let twice = flip_horizontal(&flip_horizontal(&sample, 2, 3, 2), 2, 3, 2);
        assert_eq!(twice, sample);
        assert_ne!(flip_horizontal(&sample, 2, 3, 2), sample);

        let n = 500_000;
        let zeros = Tensor::zeros(vec![n, 2]);
        let j = augment(&zeros, Augmentation::Jitter { sigma: 0.01 }, DataKind::Points, DATA_RANGE, &mut rng).unwrap();
        let (_, cov) = mean_and_covariance(&j).unwrap();
        for axis in [0, 3] {
            assert!((0.9e-4..=1.1e-4).contains(&cov[axis]), "{cov:?}");
        }

        let kind = DataKind::Raster {
            height: 4,
            width: 4,
            channels: 1,
        };
        let img = Tensor::from_rows(&[[1.0; 16], [-1.0; 16]]).unwrap();
        let a = augment(&img, Augmentation::default_for(kind), kind, DATA_RANGE, &mut rng).unwrap();
        assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.row(0).iter().all(|&v| v > 0.99));
    }
}
