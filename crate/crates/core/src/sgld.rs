//! Negative sampling: replay buffer, chain initialization and the SGLD
//! update
//!
//! ```text
//! x_t = x_{t-1} - step_size * dE/dx(x_{t-1}) + noise_scale * N(0, I)
//! ```
//!
//! with the step size and noise scale set independently. Chains return
//! plain tensors, so negatives never carry a path back into the sampler.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::init::InitDist;
use crate::net::Energy;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_BUFFER_CAPACITY: usize = 10_000;
pub const DEFAULT_REINIT_PROB: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub clamp: Option<(f64, f64)>,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            step_size: 1.0,
            noise_scale: 0.001,
            clamp: None,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("SGLD needs at least one step".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!("SGLD step size must be positive, got {}", self.step_size)));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config(format!("SGLD noise must be non-negative, got {}", self.noise_scale)));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::Config(format!("empty clamp range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Runs `cfg.steps` SGLD updates from `x0` and returns the final state.
pub fn sgld_chain<E: Energy + ?Sized>(energy: &E, x0: &Tensor, cfg: &SgldConfig, rng: &mut Rng) -> Result<Tensor> {
    if !x0.is_finite() {
        return Err(Error::InvalidArgument("chain start contains non-finite values".into()));
    }
    let mut x = Tensor::new(x0.shape().to_vec(), x0.values().to_vec())?;
    for step in 1..=cfg.steps {
        let (e, grad) = energy.energy_and_grad(&x)?;
        if let Some(bad) = e.iter().find(|v| !v.is_finite()) {
            return Err(Error::SamplerDivergence { step, energy: *bad });
        }
        if !grad.is_finite() {
            let worst = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return Err(Error::SamplerDivergence { step, energy: worst });
        }
        for (xi, gi) in x.values_mut().iter_mut().zip(grad.values()) {
            *xi -= cfg.step_size * gi;
            if cfg.noise_scale > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *xi += cfg.noise_scale * z;
            }
            if let Some((lo, hi)) = cfg.clamp {
                *xi = xi.clamp(lo, hi);
            }
        }
    }
    Ok(x)
}

/// Fixed-capacity store of past negatives. Once full, each insertion
/// overwrites a uniformly chosen slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    reinit_prob: f64,
    data: Vec<f64>,
}

/// Chain starting points plus where each row came from.
#[derive(Debug, Clone)]
pub struct InitDraw {
    pub samples: Tensor,
    /// `true` where the row was drawn fresh from the initial distribution.
    pub fresh: Vec<bool>,
}

impl InitDraw {
    pub fn fresh_count(&self) -> usize {
        self.fresh.iter().filter(|&&f| f).count()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, reinit_prob: f64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("replay buffer capacity and dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::Config(format!("reinit probability {reinit_prob} outside [0, 1]")));
        }
        Ok(Self {
            capacity,
            dim,
            reinit_prob,
            data: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reinit_prob(&self) -> f64 {
        self.reinit_prob
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy of the stored entries as a `[len, D]` matrix.
    pub fn snapshot(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.data.clone()).expect("buffer layout")
    }

    /// Inserts every row of `samples`, evicting random entries once full.
    pub fn push(&mut self, samples: &Tensor, rng: &mut Rng) -> Result<()> {
        if samples.shape().len() != 2 || samples.cols() != self.dim {
            return Err(Error::shape("replay buffer push", samples.shape(), &[0, self.dim]));
        }
        for i in 0..samples.rows() {
            let row = samples.row(i);
            if self.len() < self.capacity {
                self.data.extend_from_slice(row);
            } else {
                let slot = rng.random_range(0..self.capacity);
                self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
            }
        }
        Ok(())
    }

    /// Starting points for `count` chains. Each row independently comes from
    /// a uniformly chosen buffer entry with probability `1 - reinit_prob`,
    /// otherwise from `p0`; an empty buffer always uses `p0`.
    pub fn draw_init(&self, p0: &InitDist, count: usize, clamp: Option<(f64, f64)>, rng: &mut Rng) -> Result<InitDraw> {
        if p0.dim() != self.dim {
            return Err(Error::shape("draw_init", &[p0.dim()], &[self.dim]));
        }
        let mut samples = Tensor::zeros(vec![count, self.dim]);
        let mut fresh = Vec::with_capacity(count);
        for i in 0..count {
            let use_p0 = self.is_empty() || rng.random::<f64>() < self.reinit_prob;
            if use_p0 {
                p0.sample_row(rng, clamp, samples.row_mut(i));
            } else {
                let j = rng.random_range(0..self.len());
                samples.row_mut(i).copy_from_slice(self.row(j));
            }
            fresh.push(use_p0);
        }
        Ok(InitDraw { samples, fresh })
    }

    /// `count` distinct entries chosen uniformly at random.
    pub fn sample_rows(&self, count: usize, rng: &mut Rng) -> Result<Tensor> {
        if count > self.len() {
            return Err(Error::InvalidArgument(format!(
                "asked for {count} buffer entries but only {} are stored",
                self.len()
            )));
        }
        let idx = rand::seq::index::sample(rng, self.len(), count).into_vec();
        Ok(self.snapshot().select_rows(&idx))
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.capacity as u64);
        w.u64(self.dim as u64);
        w.f64(self.reinit_prob);
        w.u64(self.len() as u64);
        w.f64s(&self.data);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let capacity = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let reinit_prob = r.f64()?;
        let len = r.u64()? as usize;
        if len > capacity {
            return Err(r.error(format!("buffer holds {len} entries but capacity is {capacity}")));
        }
        let mut buf = Self::new(capacity, dim, reinit_prob).map_err(|e| r.error(e.to_string()))?;
        buf.data = r.f64s(len * dim)?;
        Ok(buf)
    }
}

/// Writes `[count, D]` rows as `u64 count, u64 D` followed by row-major
/// little-endian `f64` values.
pub fn write_sample_dump(samples: &Tensor, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.u64(samples.rows() as u64);
    w.u64(samples.cols() as u64);
    w.f64s(samples.values());
    w.write_to(path)
}

pub fn read_sample_dump(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    let count = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let values = r.f64s(count * dim)?;
    r.finish()?;
    Tensor::new(vec![count, dim], values)
}
