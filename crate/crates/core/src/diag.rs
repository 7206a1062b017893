//! Evaluation diagnostics: kernel two-sample statistics, energy histograms,
//! PCA projections of penultimate features and sample rendering.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{unit_to_byte, DataKind};
use crate::error::{Error, Result};
use crate::init::mean_and_covariance;
use crate::net::EnergyModel;
use crate::tensor::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::shape("mmd", a.shape(), b.shape()));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidArgument("mmd needs at least two samples per set".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

/// Kernel sums `(Σ_{i≠j} k(a_i,a_j), Σ_{i≠j} k(b_i,b_j), Σ_{i,j} k(a_i,b_j))`.
fn kernel_sums(a: &Tensor, b: &Tensor, bandwidth: f64) -> (f64, f64, f64) {
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let within = |t: &Tensor| {
        let mut s = 0.0;
        for i in 0..t.rows() {
            for j in (i + 1)..t.rows() {
                s += (-gamma * sq_dist(t.row(i), t.row(j))).exp();
            }
        }
        2.0 * s
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    (within(a), within(b), cross)
}

/// Unbiased squared MMD with a Gaussian kernel, floored at zero.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(a, b, bandwidth)?;
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let (kaa, kbb, kab) = kernel_sums(a, b, bandwidth);
    let v = kaa / (n * (n - 1.0)) + kbb / (m * (m - 1.0)) - 2.0 * kab / (n * m);
    Ok(v.max(0.0))
}

/// Biased (V-statistic) squared MMD, non-negative and zero (up to rounding)
/// for identical sets.
pub fn mmd_biased(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(a, b, bandwidth)?;
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let (kaa, kbb, kab) = kernel_sums(a, b, bandwidth);
    let v = (kaa + n) / (n * n) + (kbb + m) / (m * m) - 2.0 * kab / (n * m);
    Ok(v.max(0.0))
}

/// Median pairwise distance over the pooled rows of `a` and `b`.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("median_bandwidth", a.shape(), b.shape()));
    }
    let rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument("median bandwidth needs at least two points".into()));
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if !(*m > 0.0) {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(*m)
}

/// Per-coordinate mean differences and the Frobenius norm of the covariance
/// difference between two sample sets.
pub fn moment_gap(a: &Tensor, b: &Tensor) -> Result<(Vec<f64>, f64)> {
    if a.cols() != b.cols() {
        return Err(Error::shape("moment_gap", a.shape(), b.shape()));
    }
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    let mean_gap = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).collect();
    let frob = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok((mean_gap, frob))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A named sample set, optionally labeled.
#[derive(Debug, Clone)]
pub struct Group {
    pub name: String,
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Group {
    pub fn new(name: impl Into<String>, x: Tensor) -> Self {
        Self {
            name: name.into(),
            x,
            labels: None,
        }
    }

    pub fn labeled(name: impl Into<String>, x: Tensor, labels: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            x,
            labels: Some(labels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub group: String,
    /// `None` for the whole group, `Some(c)` for the rows labeled `c`.
    pub class: Option<usize>,
    pub counts: Vec<usize>,
}

/// Histograms of `-E` over shared bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHistogram {
    pub edges: Vec<f64>,
    pub rows: Vec<HistogramRow>,
}

/// Counts of `values` in the bins delimited by `edges`; the last bin is
/// closed on the right.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &v in values {
        let Some(i) = edges.windows(2).position(|w| v >= w[0] && v < w[1]) else {
            if v == edges[bins] {
                counts[bins - 1] += 1;
            }
            continue;
        };
        counts[i] += 1;
    }
    counts
}

/// Histogram of `-E(x)` per group and, where labels exist, per class.
pub fn energy_histogram(model: &EnergyModel, groups: &[Group], bins: usize) -> Result<EnergyHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut scores = Vec::with_capacity(groups.len());
    for g in groups {
        if g.x.rows() == 0 {
            return Err(Error::InvalidArgument(format!("group '{}' is empty", g.name)));
        }
        let e = model.energy(&g.x)?;
        scores.push(e.into_iter().map(|v| -v).collect::<Vec<_>>());
    }
    let all = scores.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate("non-finite energies in histogram".into()));
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect();

    let mut rows = Vec::new();
    for (g, s) in groups.iter().zip(&scores) {
        rows.push(HistogramRow {
            group: g.name.clone(),
            class: None,
            counts: histogram(s, &edges),
        });
        if let Some(labels) = &g.labels {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            for c in 0..classes {
                let vals: Vec<f64> = s.iter().zip(labels).filter(|(_, &y)| y == c).map(|(v, _)| *v).collect();
                rows.push(HistogramRow {
                    group: g.name.clone(),
                    class: Some(c),
                    counts: histogram(&vals, &edges),
                });
            }
        }
    }
    Ok(EnergyHistogram { edges, rows })
}

impl EnergyHistogram {
    /// One row per (group, class): `group,class,bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,class,bin_lo,bin_hi,count\n");
        for r in &self.rows {
            let class = r.class.map(|c| c.to_string()).unwrap_or_else(|| "all".into());
            for (i, c) in r.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", r.group, class, self.edges[i], self.edges[i + 1], c);
            }
        }
        s
    }

    /// Horizontal bar chart of the whole-group rows.
    pub fn render_text(&self, width: usize) -> String {
        let mut s = String::new();
        for r in self.rows.iter().filter(|r| r.class.is_none()) {
            let peak = r.counts.iter().copied().max().unwrap_or(0).max(1);
            let _ = writeln!(s, "{}", r.group);
            for (i, &c) in r.counts.iter().enumerate() {
                let bar = "#".repeat(c * width / peak);
                let _ = writeln!(s, "{:>10.3} | {bar} {c}", self.edges[i]);
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// `[N, k]` projected coordinates.
    pub projected: Tensor,
    /// `[k, H]` principal directions, one per row.
    pub components: Tensor,
    pub mean: Vec<f64>,
    /// Fraction of total variance captured by each retained direction.
    pub explained: Vec<f64>,
}

/// Projects centered `features` onto their top-`k` principal directions.
/// Each direction's largest-magnitude entry is made positive.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Pca> {
    let (n, h) = (features.rows(), features.cols());
    if k == 0 || k > h || n < k {
        return Err(Error::InvalidArgument(format!("cannot take {k} components from {n}×{h} features")));
    }
    let mut mean = vec![0.0; h];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, h, |i, j| features.row(i)[j] - mean[j]);
    let scatter = centered.transpose() * &centered;
    let total = scatter.trace();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("features have no variance".into()));
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Tensor::zeros(vec![k, h]);
    let mut explained = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(c);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (dst, v) in components.row_mut(r).iter_mut().zip(col.iter()) {
            *dst = sign * v;
        }
        explained.push(eig.eigenvalues[c].max(0.0) / total);
    }
    let mut projected = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        let row = centered.row(i);
        for r in 0..k {
            projected.row_mut(i)[r] = row.iter().zip(components.row(r)).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Pca {
        projected,
        components,
        mean,
        explained,
    })
}

/// Centroids and spreads of sample groups in a shared 2D PCA plane of the
/// model's penultimate features.
#[derive(Debug, Clone)]
pub struct ManifoldReport {
    pub names: Vec<String>,
    pub centroids: Vec<[f64; 2]>,
    /// Root-mean-square distance of each group's points to its centroid.
    pub spreads: Vec<f64>,
    pub explained: Vec<f64>,
}

impl ManifoldReport {
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.centroids[a], self.centroids[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,pc1,pc2,spread\n");
        for i in 0..self.names.len() {
            let _ = writeln!(s, "{},{},{},{}", self.names[i], self.centroids[i][0], self.centroids[i][1], self.spreads[i]);
        }
        for i in 0..self.names.len() {
            for j in (i + 1)..self.names.len() {
                let _ = writeln!(s, "dist:{}-{},{},,", self.names[i], self.names[j], self.distance(i, j));
            }
        }
        s
    }
}

pub fn manifold_report(model: &EnergyModel, groups: &[Group]) -> Result<ManifoldReport> {
    let mut feats = Vec::new();
    let mut sizes = Vec::new();
    for g in groups {
        let f = model.features(&g.x)?;
        sizes.push(f.rows());
        feats.extend_from_slice(f.values());
    }
    let h = model.feature_dim();
    let all = Tensor::new(vec![feats.len() / h, h], feats)?;
    let pca = pca_project(&all, 2)?;
    let mut start = 0;
    let mut centroids = Vec::new();
    let mut spreads = Vec::new();
    for &n in &sizes {
        let rows: Vec<&[f64]> = (start..start + n).map(|i| pca.projected.row(i)).collect();
        let c = [
            rows.iter().map(|r| r[0]).sum::<f64>() / n as f64,
            rows.iter().map(|r| r[1]).sum::<f64>() / n as f64,
        ];
        let spread = (rows.iter().map(|r| (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sum::<f64>() / n as f64).sqrt();
        centroids.push(c);
        spreads.push(spread);
        start += n;
    }
    Ok(ManifoldReport {
        names: groups.iter().map(|g| g.name.clone()).collect(),
        centroids,
        spreads,
        explained: pca.explained,
    })
}

/// Writes samples as a tiled binary PPM (raster data) or as `x y` text rows
/// (2D points).
pub fn render_grid(samples: &Tensor, layout: (usize, usize), kind: DataKind, path: &Path) -> Result<()> {
    let (rows, cols) = layout;
    let b = samples.rows();
    if rows * cols < b {
        return Err(Error::InvalidArgument(format!("layout {rows}×{cols} cannot hold {b} samples")));
    }
    match kind {
        DataKind::Raster { height, width, channels } => {
            if samples.cols() != height * width * channels || !(channels == 1 || channels == 3) {
                return Err(Error::shape("render_grid", samples.shape(), &[b, height * width * channels]));
            }
            let (img_w, img_h) = (cols * width, rows * height);
            let mut pixels = vec![0u8; img_w * img_h * 3];
            for s in 0..b {
                let (tr, tc) = (s / cols, s % cols);
                let v = samples.row(s);
                for r in 0..height {
                    for c in 0..width {
                        let dst = ((tr * height + r) * img_w + tc * width + c) * 3;
                        for ch in 0..3 {
                            let src = (r * width + c) * channels + if channels == 3 { ch } else { 0 };
                            pixels[dst + ch] = unit_to_byte(v[src]);
                        }
                    }
                }
            }
            let mut out = format!("P6\n{img_w} {img_h}\n255\n").into_bytes();
            out.extend_from_slice(&pixels);
            std::fs::write(path, out)?;
        }
        DataKind::Points => {
            if samples.cols() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "scatter output needs 2D points, got dimension {}",
                    samples.cols()
                )));
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "# x y")?;
            for s in 0..b {
                let v = samples.row(s);
                writeln!(f, "{} {}", v[0], v[1])?;
            }
            f.flush()?;
        }
    }
    Ok(())
}

/// Reads a binary PPM written by [`render_grid`]: `(width, height, rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::format(path, reason.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary PPM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 3 {
        return Err(bad("pixel payload size mismatch"));
    }
    Ok((w, h, body.to_vec()))
}

/// Summary of a trained model against held-out data.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mmd: f64,
    pub bandwidth: f64,
    pub mean_gap: Vec<f64>,
    pub cov_frobenius_gap: f64,
    /// `(group, mean E, std E)` for x⁺, x⁻, x⁰ and uniform noise.
    pub energy_stats: Vec<(String, f64, f64)>,
    pub accuracy: Option<f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mmd,{}", self.mmd);
        let _ = writeln!(s, "bandwidth,{}", self.bandwidth);
        for (i, g) in self.mean_gap.iter().enumerate() {
            let _ = writeln!(s, "mean_gap_{i},{g}");
        }
        let _ = writeln!(s, "cov_frobenius_gap,{}", self.cov_frobenius_gap);
        for (name, m, sd) in &self.energy_stats {
            let _ = writeln!(s, "energy_mean_{name},{m}");
            let _ = writeln!(s, "energy_std_{name},{sd}");
        }
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy,{a}");
        }
        s
    }
}

/// Builds an [`EvalReport`]. `groups` supplies the samples whose energy
/// statistics are reported; MMD and moment gaps compare `generated` with
/// `real`.
pub fn evaluate(
    model: &EnergyModel,
    generated: &Tensor,
    real: &Tensor,
    groups: &[Group],
    labeled: Option<(&Tensor, &[usize])>,
) -> Result<EvalReport> {
    let bandwidth = median_bandwidth(generated, real)?;
    let m = mmd(generated, real, bandwidth)?;
    let (mean_gap, cov_frobenius_gap) = moment_gap(generated, real)?;
    let mut energy_stats = Vec::new();
    for g in groups {
        let (mean, std) = mean_std(&model.energy(&g.x)?);
        energy_stats.push((g.name.clone(), mean, std));
    }
    let accuracy = match labeled {
        Some((x, y)) if model.mode().has_classifier() => {
            let pred = model.predict(x)?;
            Some(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64)
        }
        _ => None,
    };
    let report = EvalReport {
        mmd: m,
        bandwidth,
        mean_gap,
        cov_frobenius_gap,
        energy_stats,
        accuracy,
    };
    let finite = report.mmd.is_finite()
        && report.cov_frobenius_gap.is_finite()
        && report.mean_gap.iter().all(|v| v.is_finite())
        && report.energy_stats.iter().all(|(_, a, b)| a.is_finite() && b.is_finite());
    if !finite {
        return Err(Error::Degenerate("evaluation produced non-finite statistics".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, Mode};
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = stream(seed, Stream::Eval);
        let v: Vec<f64> = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + shift
            })
            .collect();
        Tensor::new(vec![n, d], v).unwrap()
    }

    #[test]
    fn mmd_identical_and_separated() {
        let a = gaussian(200, 2, 0.0, 1);
        assert!(mmd_biased(&a, &a, 1.0).unwrap() < 1e-12);
        let u = mmd(&a, &a, 1.0).unwrap();
        assert_eq!(u, 0.0);

        let a = gaussian(1000, 2, 0.0, 2);
        let b = gaussian(1000, 2, 10.0, 3);
        assert!(mmd(&a, &b, 1.0).unwrap() > 0.5);
    }

    #[test]
    fn mmd_symmetry_and_permutation() {
        let a = gaussian(50, 3, 0.0, 4);
        let b = gaussian(60, 3, 0.5, 5);
        let ab = mmd(&a, &b, 0.8).unwrap();
        assert_relative_eq!(ab, mmd(&b, &a, 0.8).unwrap(), epsilon = 1e-14);
        let mut idx: Vec<usize> = (0..50).collect();
        idx.shuffle(&mut stream(0, Stream::Eval));
        let pa = a.select_rows(&idx);
        assert_relative_eq!(ab, mmd(&pa, &b, 0.8).unwrap(), epsilon = 1e-14);
        assert!(mmd(&a.select_rows(&[0]), &b, 1.0).is_err());
        assert!(mmd(&a, &b, 0.0).is_err());
    }

    #[test]
    fn median_bandwidth_on_known_points() {
        let a = Tensor::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 4.0]]).unwrap();
        // distances 5, 4, 3
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 4.0);
    }

    fn constant_model(beta: f64) -> EnergyModel {
        let mut m = EnergyModel::new(
            Mode::Uncond,
            Architecture {
                input_dim: 2,
                hidden: vec![4],
                num_classes: 0,
                slope: 0.2,
            },
            0,
        )
        .unwrap();
        for p in m.parameters_mut() {
            p.values_mut().fill(0.0);
        }
        m.energy_head_mut().unwrap().bias.values_mut()[0] = beta;
        m
    }

    #[test]
    fn constant_energy_spike() {
        let m = constant_model(1.5);
        let groups = [
            Group::labeled("pos", gaussian(30, 2, 0.0, 7), (0..30).map(|i| i % 3).collect()),
            Group::new("noise", gaussian(20, 2, 0.0, 8)),
        ];
        let h = energy_histogram(&m, &groups, 5).unwrap();
        for r in &h.rows {
            assert_eq!(r.counts.iter().filter(|&&c| c > 0).count(), 1);
            let bin = r.counts.iter().position(|&c| c > 0).unwrap();
            assert!(h.edges[bin] <= -1.5 && -1.5 <= h.edges[bin + 1]);
        }
        assert_eq!(h.rows[0].counts.iter().sum::<usize>(), 30);
        assert_eq!(h.rows.iter().filter(|r| r.group == "pos").count(), 4);
        assert_eq!(h.rows.last().unwrap().counts.iter().sum::<usize>(), 20);
        assert!(h.to_csv().lines().count() > 1);
        assert!(energy_histogram(&m, &[Group::new("e", Tensor::zeros(vec![0, 2]))], 5).is_err());
    }

    #[test]
    fn histogram_translation() {
        let vals = [0.1, 0.4, 0.45, 0.9, 1.0];
        let edges: Vec<f64> = (0..=4).map(|i| i as f64 * 0.25).collect();
        let c = 3.0;
        let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
        let shifted_edges: Vec<f64> = edges.iter().map(|e| e + c).collect();
        assert_eq!(histogram(&vals, &edges), histogram(&shifted, &shifted_edges));
        assert_eq!(histogram(&vals, &edges), vec![1, 2, 0, 2]);
    }

    #[test]
    fn pca_planar_and_isotropic() {
        let mut rng = stream(9, Stream::Eval);
        let planar: Vec<f64> = (0..200)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [a, 0.0, 2.0 * b, 0.0]
            })
            .collect();
        let p = pca_project(&Tensor::new(vec![200, 4], planar).unwrap(), 2).unwrap();
        assert_relative_eq!(p.explained.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let iso = gaussian(10_000, 10, 0.0, 10);
        let p = pca_project(&iso, 2).unwrap();
        for e in &p.explained {
            assert!((0.08..=0.12).contains(e), "{e}");
        }
        for r in 0..2 {
            let row = p.components.row(r);
            let pivot = row.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
        assert!(matches!(pca_project(&Tensor::zeros(vec![5, 3]), 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pca_rotation_isometry() {
        let mut x = gaussian(100, 3, 0.0, 11);
        for i in 0..100 {
            let r = x.row_mut(i);
            r[0] *= 3.0;
            r[1] *= 2.0;
            r[2] *= 0.5;
        }
        let (c, s) = (0.6f64, 0.8f64);
        // rotation in the (0,1) plane followed by one in the (1,2) plane
        let rot = [[c, -s, 0.0], [s * c, c * c, -s], [s * s, c * s, c]];
        let mut y = Tensor::zeros(vec![100, 3]);
        for i in 0..100 {
            for j in 0..3 {
                y.row_mut(i)[j] = (0..3).map(|k| rot[j][k] * x.row(i)[k]).sum();
            }
        }
        let px = pca_project(&x, 2).unwrap().projected;
        let py = pca_project(&y, 2).unwrap().projected;
        for i in 0..100 {
            for j in 0..100 {
                let dx = sq_dist(px.row(i), px.row(j)).sqrt();
                let dy = sq_dist(py.row(i), py.row(j)).sqrt();
                assert!((dx - dy).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_residual_orthogonal() {
        let x = gaussian(300, 5, 0.0, 12);
        let p = pca_project(&x, 2).unwrap();
        for i in 0..300 {
            let mut resid: Vec<f64> = x.row(i).iter().zip(&p.mean).map(|(a, m)| a - m).collect();
            for r in 0..2 {
                for (v, c) in resid.iter_mut().zip(p.components.row(r)) {
                    *v -= p.projected.row(i)[r] * c;
                }
            }
            for r in 0..2 {
                let dot: f64 = resid.iter().zip(p.components.row(r)).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn render_extremes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kind = DataKind::Raster {
            height: 2,
            width: 3,
            channels: 1,
        };
        let samples = Tensor::new(vec![2, 6], [vec![-1.0; 6], vec![1.0; 6]].concat()).unwrap();
        let path = dir.path().join("g.ppm");
        render_grid(&samples, (1, 2), kind, &path).unwrap();
        let (w, h, px) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (6, 2));
        for r in 0..2 {
            for c in 0..6 {
                let v = px[(r * 6 + c) * 3];
                assert_eq!(v, if c < 3 { 0 } else { 255 });
            }
        }

        let mut rng = stream(13, Stream::Eval);
        let vals: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut rng, -1.0..=1.0)).collect();
        let t = Tensor::new(vec![2, 6], vals.clone()).unwrap();
        render_grid(&t, (2, 1), kind, &path).unwrap();
        let (_, _, px) = read_ppm(&path).unwrap();
        for (i, v) in vals.iter().enumerate() {
            let back = crate::data::byte_to_unit(px[i * 3]);
            assert!((back - v).abs() <= 2.0 / 255.0 + 1e-12);
        }
        assert!(render_grid(&t, (1, 1), kind, &path).is_err());

        let pts = Tensor::from_rows(&[[0.5, -0.25]]).unwrap();
        let txt = dir.path().join("s.txt");
        render_grid(&pts, (1, 1), DataKind::Points, &txt).unwrap();
        assert!(std::fs::read_to_string(&txt).unwrap().contains("0.5 -0.25"));
    }

    #[test]
    fn moment_gap_of_shifted_copy() {
        let a = gaussian(100, 2, 0.0, 14);
        let mut b = a.clone();
        b.values_mut().iter_mut().for_each(|v| *v += 0.3);
        let (gap, frob) = moment_gap(&a, &b).unwrap();
        assert!(gap.iter().all(|g| (g - 0.3).abs() < 1e-12));
        assert!(frob < 1e-12);
    }
}
