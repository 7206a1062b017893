//! Initial distributions for SGLD chains.
//!
//! The informative initializer is one multivariate Gaussian fitted to the
//! whole training set; it stores a single `D×D` Cholesky factor no matter
//! how many classes the data has. The per-class mixture keeps one factor per
//! class and exists for comparison runs, as does the uniform box.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS_REG: f64 = 1e-4;

/// Sample mean and covariance (normalized by `N`) of the rows of `data`.
pub fn mean_and_covariance(data: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (data.rows(), data.cols());
    if data.shape().len() != 2 || n == 0 {
        return Err(Error::Data(format!(
            "need a non-empty [N, D] matrix, got shape {:?}",
            data.shape()
        )));
    }
    if !data.is_finite() {
        return Err(Error::Data("data contains non-finite values".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(data.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in 0..=a {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, cov))
}

/// Lower-triangular `L` with `L·Lᵀ = a` for a symmetric `n×n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let pivot = a[i * n + i] - dot;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(Error::Factorization { pivot: i, value: pivot });
                }
                l[i * n + i] = pivot.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - dot) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Single Gaussian `N(μ, Σ + eps_reg·I)` stored as mean plus Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInit {
    dim: usize,
    mean: Vec<f64>,
    chol: Vec<f64>,
    eps_reg: f64,
}

impl GaussianInit {
    pub fn from_moments(mean: Vec<f64>, cov: &[f64], eps_reg: f64) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::shape("gaussian covariance", &[d, d], &[cov.len()]));
        }
        if !(eps_reg > 0.0) {
            return Err(Error::InvalidArgument(format!("eps_reg must be positive, got {eps_reg}")));
        }
        let mut reg = cov.to_vec();
        for i in 0..d {
            reg[i * d + i] += eps_reg;
        }
        let chol = cholesky(&reg, d)?;
        Ok(Self {
            dim: d,
            mean,
            chol,
            eps_reg,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major lower-triangular factor.
    pub fn chol_factor(&self) -> &[f64] {
        &self.chol
    }

    pub fn eps_reg(&self) -> f64 {
        self.eps_reg
    }

    /// `L·Lᵀ`, i.e. the regularized covariance.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|k| self.chol[i * d + k] * self.chol[j * d + k]).sum();
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        out
    }

    fn sample_row(&self, rng: &mut Rng, z: &mut [f64], out: &mut [f64]) {
        let d = self.dim;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i + 1];
            out[i] = self.mean[i] + row.iter().zip(&z[..=i]).map(|(l, z)| l * z).sum::<f64>();
        }
    }

    fn write(&self, w: &mut Writer) {
        w.f64s(&self.mean);
        for i in 0..self.dim {
            w.f64s(&self.chol[i * self.dim..i * self.dim + i + 1]);
        }
    }

    fn read(r: &mut Reader<'_>, dim: usize, eps_reg: f64) -> Result<Self> {
        let mean = r.f64s(dim)?;
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            let row = r.f64s(i + 1)?;
            chol[i * dim..i * dim + i + 1].copy_from_slice(&row);
            if !(row[i] > 0.0) {
                return Err(r.error(format!("factor diagonal {i} is not positive")));
            }
        }
        Ok(Self {
            dim,
            mean,
            chol,
            eps_reg,
        })
    }
}

/// Fits `N(μ, Σ)` to the rows of `data`; `Σ` is normalized by `N` and
/// regularized by `eps_reg·I` before factorization.
pub fn fit_gaussian(data: &Tensor, eps_reg: f64) -> Result<GaussianInit> {
    let (mean, cov) = mean_and_covariance(data)?;
    GaussianInit::from_moments(mean, &cov, eps_reg)
}

/// One Gaussian per class, weighted by class frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureInit {
    components: Vec<(usize, GaussianInit)>,
    weights: Vec<f64>,
}

impl MixtureInit {
    pub fn components(&self) -> &[(usize, GaussianInit)] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }
}

/// Fits one Gaussian per class label. Classes are `0..=max(labels)`, and
/// each must have at least one sample.
pub fn fit_per_class(data: &Tensor, labels: &[usize], eps_reg: f64) -> Result<MixtureInit> {
    if labels.len() != data.rows() {
        return Err(Error::shape("fit_per_class", &[data.rows()], &[labels.len()]));
    }
    let Some(&max) = labels.iter().max() else {
        return Err(Error::Data("no labeled samples".into()));
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max + 1];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let n = labels.len() as f64;
    let mut components = Vec::with_capacity(by_class.len());
    let mut weights = Vec::with_capacity(by_class.len());
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        components.push((class, fit_gaussian(&data.select_rows(idx), eps_reg)?));
        weights.push(idx.len() as f64 / n);
    }
    Ok(MixtureInit { components, weights })
}

/// Which initial distribution a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    /// Single Gaussian fitted to the whole training set.
    Informative,
    /// Uniform over the data range.
    Uniform,
    /// Per-class Gaussian mixture.
    Mixture,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "informative" => Ok(InitKind::Informative),
            "uniform" => Ok(InitKind::Uniform),
            "mixture" => Ok(InitKind::Mixture),
            other => Err(Error::Config(format!(
                "unknown init '{other}' (informative|uniform|mixture)"
            ))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Informative => "informative",
            InitKind::Uniform => "uniform",
            InitKind::Mixture => "mixture",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitDist {
    Gaussian(GaussianInit),
    Mixture(MixtureInit),
    Uniform { dim: usize, lo: f64, hi: f64 },
}

impl InitDist {
    /// Fits the requested kind of initializer. The mixture needs labels.
    pub fn fit(kind: InitKind, data: &Tensor, labels: Option<&[usize]>, range: (f64, f64), eps_reg: f64) -> Result<Self> {
        match kind {
            InitKind::Informative => Ok(InitDist::Gaussian(fit_gaussian(data, eps_reg)?)),
            InitKind::Mixture => {
                let labels = labels.ok_or_else(|| Error::Config("mixture init needs labeled data".into()))?;
                Ok(InitDist::Mixture(fit_per_class(data, labels, eps_reg)?))
            }
            InitKind::Uniform => Ok(InitDist::Uniform {
                dim: data.cols(),
                lo: range.0,
                hi: range.1,
            }),
        }
    }

    pub fn kind(&self) -> InitKind {
        match self {
            InitDist::Gaussian(_) => InitKind::Informative,
            InitDist::Mixture(_) => InitKind::Mixture,
            InitDist::Uniform { .. } => InitKind::Uniform,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitDist::Gaussian(g) => g.dim(),
            InitDist::Mixture(m) => m.dim(),
            InitDist::Uniform { dim, .. } => *dim,
        }
    }

    /// Number of covariance factors held in memory.
    pub fn covariance_factors(&self) -> usize {
        match self {
            InitDist::Gaussian(_) => 1,
            InitDist::Mixture(m) => m.components.len(),
            InitDist::Uniform { .. } => 0,
        }
    }

    /// Centre of the distribution (the mixture's weighted mean).
    pub fn mean(&self) -> Vec<f64> {
        match self {
            InitDist::Gaussian(g) => g.mean().to_vec(),
            InitDist::Mixture(m) => {
                let mut out = vec![0.0; m.dim()];
                for ((_, g), w) in m.components.iter().zip(&m.weights) {
                    for (o, v) in out.iter_mut().zip(g.mean()) {
                        *o += w * v;
                    }
                }
                out
            }
            InitDist::Uniform { dim, lo, hi } => vec![0.5 * (lo + hi); *dim],
        }
    }

    /// Writes one draw into `out`.
    pub fn sample_row(&self, rng: &mut Rng, clamp: Option<(f64, f64)>, out: &mut [f64]) {
        let mut z = vec![0.0; out.len()];
        match self {
            InitDist::Gaussian(g) => g.sample_row(rng, &mut z, out),
            InitDist::Mixture(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = m.components.len() - 1;
                for (i, w) in m.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                m.components[pick].1.sample_row(rng, &mut z, out);
            }
            InitDist::Uniform { lo, hi, .. } => {
                for o in out.iter_mut() {
                    *o = rng.random_range(*lo..*hi);
                }
            }
        }
        if let Some((lo, hi)) = clamp {
            for o in out.iter_mut() {
                *o = o.clamp(lo, hi);
            }
        }
    }

    pub fn write(&self, w: &mut Writer) {
        w.bytes(INIT_MAGIC);
        w.u32(INIT_VERSION);
        match self {
            InitDist::Gaussian(g) => {
                w.u32(0);
                w.u64(g.dim as u64);
                w.f64(g.eps_reg);
                g.write(w);
            }
            InitDist::Mixture(m) => {
                w.u32(1);
                w.u64(m.dim() as u64);
                w.f64(m.components[0].1.eps_reg);
                w.u32(m.components.len() as u32);
                for ((label, g), weight) in m.components.iter().zip(&m.weights) {
                    w.u32(*label as u32);
                    w.f64(*weight);
                    g.write(w);
                }
            }
            InitDist::Uniform { dim, lo, hi } => {
                w.u32(2);
                w.u64(*dim as u64);
                w.f64(0.0);
                w.f64(*lo);
                w.f64(*hi);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(INIT_MAGIC)?;
        let version = r.u32()?;
        if version != INIT_VERSION {
            return Err(r.error(format!("unsupported init version {version}")));
        }
        let kind = r.u32()?;
        let dim = r.u64()? as usize;
        let eps_reg = r.f64()?;
        match kind {
            0 => Ok(InitDist::Gaussian(GaussianInit::read(r, dim, eps_reg)?)),
            1 => {
                let count = r.u32()? as usize;
                if count == 0 {
                    return Err(r.error("mixture without components"));
                }
                let mut components = Vec::with_capacity(count);
                let mut weights = Vec::with_capacity(count);
                for _ in 0..count {
                    let label = r.u32()? as usize;
                    weights.push(r.f64()?);
                    components.push((label, GaussianInit::read(r, dim, eps_reg)?));
                }
                Ok(InitDist::Mixture(MixtureInit { components, weights }))
            }
            2 => {
                let lo = r.f64()?;
                let hi = r.f64()?;
                Ok(InitDist::Uniform { dim, lo, hi })
            }
            other => Err(r.error(format!("unknown init kind {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes, path);
        let d = Self::read(&mut r)?;
        r.finish()?;
        Ok(d)
    }
}

const INIT_MAGIC: &[u8; 4] = b"EBMI";
const INIT_VERSION: u32 = 1;

/// `count` i.i.d. draws as a `[count, D]` matrix, optionally clamped to
/// `[lo, hi]`.
pub fn sample_init(dist: &InitDist, count: usize, clamp: Option<(f64, f64)>, rng: &mut Rng) -> Tensor {
    let d = dist.dim();
    let mut out = Tensor::zeros(vec![count, d]);
    for i in 0..count {
        dist.sample_row(rng, clamp, out.row_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn frob(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn degenerate_dataset() {
        let data = Tensor::from_rows(&[[0.3, -0.2]; 5]).unwrap();
        let g = fit_gaussian(&data, 1e-4).unwrap();
        assert_eq!(g.mean(), &[0.3, -0.2]);
        let s = 1e-4f64.sqrt();
        assert_relative_eq!(g.chol_factor()[0], s, epsilon = 1e-15);
        assert_eq!(g.chol_factor()[1], 0.0);
        assert_eq!(g.chol_factor()[2], 0.0);
        assert_relative_eq!(g.chol_factor()[3], s, epsilon = 1e-15);
    }

    #[test]
    fn hand_covariance() {
        let data = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]).unwrap();
        let (mean, cov) = mean_and_covariance(&data).unwrap();
        assert_relative_eq!(mean[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(mean[1], 2.0 / 3.0, epsilon = 1e-15);
        let want = [8.0 / 9.0, -4.0 / 9.0, -4.0 / 9.0, 8.0 / 9.0];
        for (c, w) in cov.iter().zip(want) {
            assert_relative_eq!(*c, w, epsilon = 1e-15);
        }
        let g = fit_gaussian(&data, 1e-12).unwrap();
        assert!(frob(&g.covariance(), &want) < 1e-11);
    }

    #[test]
    fn reconstruction_within_tolerance() {
        let mut rng = stream(3, Stream::Data);
        let data = sample_init(
            &InitDist::Uniform { dim: 4, lo: -1.0, hi: 1.0 },
            50,
            None,
            &mut rng,
        );
        let (_, mut cov) = mean_and_covariance(&data).unwrap();
        let g = fit_gaussian(&data, 1e-4).unwrap();
        for i in 0..4 {
            cov[i * 4 + i] += 1e-4;
        }
        assert!(frob(&g.covariance(), &cov) < 1e-10);
        // lower triangular with positive diagonal
        for i in 0..4 {
            assert!(g.chol_factor()[i * 4 + i] > 0.0);
            for j in i + 1..4 {
                assert_eq!(g.chol_factor()[i * 4 + j], 0.0);
            }
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_gaussian(&Tensor::zeros(vec![0, 2]), 1e-4), Err(Error::Data(_))));
        let bad = Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(fit_gaussian(&bad, 1e-4), Err(Error::Data(_))));
        let cov = [-1.0, 0.0, 0.0, 1.0];
        match GaussianInit::from_moments(vec![0.0, 0.0], &cov, 1e-4) {
            Err(Error::Factorization { pivot, .. }) => assert_eq!(pivot, 0),
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn per_class_fits() {
        let mut rng = stream(5, Stream::Data);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [(-5.0, -5.0), (5.0, 5.0)].iter().enumerate() {
            for _ in 0..1000 {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                rows.push([centre.0 + x, centre.1 + y]);
                labels.push(c);
            }
        }
        let data = Tensor::from_rows(&rows).unwrap();
        let m = fit_per_class(&data, &labels, 1e-4).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert!((m.components()[0].1.mean()[0] + 5.0).abs() < 0.5);
        assert!((m.components()[1].1.mean()[1] - 5.0).abs() < 0.5);
        let dist = InitDist::Mixture(m);
        assert_eq!(dist.covariance_factors(), 2);

        let single = fit_per_class(&data, &vec![0; 2000], 1e-4).unwrap();
        assert_eq!(single.weights(), &[1.0]);
        assert_eq!(single.components()[0].1, fit_gaussian(&data, 1e-4).unwrap());

        let mut gap = labels.clone();
        gap[0] = 3;
        assert!(matches!(fit_per_class(&data, &gap, 1e-4), Err(Error::Data(_))));
    }

    #[test]
    fn degenerate_sampling_returns_mean() {
        let data = Tensor::from_rows(&[[0.25, 0.5]; 3]).unwrap();
        let g = InitDist::Gaussian(fit_gaussian(&data, 1e-300).unwrap());
        let mut rng = stream(1, Stream::Init);
        let s = sample_init(&g, 10, None, &mut rng);
        for v in s.values().chunks(2) {
            assert_eq!(v, &[0.25, 0.5]);
        }
    }

    #[test]
    fn standard_normal_moments() {
        let g = InitDist::Gaussian(GaussianInit::from_moments(vec![0.0], &[1.0 - 1e-12], 1e-12).unwrap());
        let mut rng = stream(2, Stream::Init);
        let s = sample_init(&g, 100_000, None, &mut rng);
        let (m, c) = mean_and_covariance(&s).unwrap();
        assert!(m[0].abs() < 0.02, "{m:?}");
        assert!((0.97..=1.03).contains(&c[0]), "{c:?}");
    }

    #[test]
    fn correlated_moments() {
        let cov = [2.0, 1.0, 1.0, 2.0];
        let g = InitDist::Gaussian(GaussianInit::from_moments(vec![0.0, 0.0], &cov, 1e-12).unwrap());
        let mut rng = stream(4, Stream::Init);
        let s = sample_init(&g, 100_000, None, &mut rng);
        let (_, c) = mean_and_covariance(&s).unwrap();
        assert!(frob(&c, &cov) < 0.05, "{c:?}");
    }

    #[test]
    fn clamping_bounds_samples() {
        let g = InitDist::Gaussian(GaussianInit::from_moments(vec![0.0, 0.0], &[4.0, 0.0, 0.0, 4.0], 1e-4).unwrap());
        let mut rng = stream(4, Stream::Init);
        let s = sample_init(&g, 1000, Some((-1.0, 1.0)), &mut rng);
        assert!(s.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn storage_is_one_factor() {
        let data = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.2, 0.9]]).unwrap();
        let dist = InitDist::fit(InitKind::Informative, &data, Some(&[0, 1, 2, 3]), (-1.0, 1.0), 1e-4).unwrap();
        assert_eq!(dist.covariance_factors(), 1);
        let dist = InitDist::fit(InitKind::Mixture, &data, Some(&[0, 1, 2, 3]), (-1.0, 1.0), 1e-4).unwrap();
        assert_eq!(dist.covariance_factors(), 4);
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(8, Stream::Data);
        let data = sample_init(&InitDist::Uniform { dim: 3, lo: -1.0, hi: 1.0 }, 40, None, &mut rng);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        for kind in [InitKind::Informative, InitKind::Mixture, InitKind::Uniform] {
            let dist = InitDist::fit(kind, &data, Some(&labels), (-1.0, 1.0), 1e-4).unwrap();
            let path = dir.path().join(format!("{kind}.init"));
            dist.save(&path).unwrap();
            assert_eq!(InitDist::load(&path).unwrap(), dist);
        }
    }

    proptest! {
        #[test]
        fn affine_consistency(
            rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..20),
            a in -3.0f64..3.0,
            b in -2.0f64..2.0,
        ) {
            let data = Tensor::from_rows(&rows.iter().map(|r| [r.0, r.1]).collect::<Vec<_>>()).unwrap();
            let moved = Tensor::from_rows(&rows.iter().map(|r| [a * r.0 + b, a * r.1 + b]).collect::<Vec<_>>()).unwrap();
            let (m0, c0) = mean_and_covariance(&data).unwrap();
            let (m1, c1) = mean_and_covariance(&moved).unwrap();
            for (x, y) in m0.iter().zip(&m1) {
                prop_assert!((a * x + b - y).abs() < 1e-12);
            }
            for (x, y) in c0.iter().zip(&c1) {
                prop_assert!((a * a * x - y).abs() < 1e-11);
            }
        }
    }
}
