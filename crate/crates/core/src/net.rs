//! Energy networks: a leaky-ReLU MLP trunk with an optional classifier head
//! and an optional scalar energy head.
//!
//! | mode     | classifier head | energy head | energy                 |
//! |----------|-----------------|-------------|------------------------|
//! | `Uncond` | -               | yes         | `energy_head(h)`       |
//! | `Mjem`   | yes             | yes         | `energy_head(h)`       |
//! | `LseJem` | yes             | -           | `-logsumexp(logits)`   |
//!
//! `h` is the trunk output after its final nonlinearity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{stable_softmax, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Uncond,
    Mjem,
    LseJem,
}

impl Mode {
    pub fn has_classifier(self) -> bool {
        matches!(self, Mode::Mjem | Mode::LseJem)
    }

    pub fn has_energy_head(self) -> bool {
        matches!(self, Mode::Uncond | Mode::Mjem)
    }

    fn code(self) -> u32 {
        match self {
            Mode::Uncond => 0,
            Mode::Mjem => 1,
            Mode::LseJem => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Mode::Uncond),
            1 => Some(Mode::Mjem),
            2 => Some(Mode::LseJem),
            _ => None,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(Mode::Uncond),
            "mjem" => Ok(Mode::Mjem),
            "lsejem" => Ok(Mode::LseJem),
            other => Err(Error::Config(format!("unknown mode '{other}' (uncond|mjem|lsejem)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Uncond => "uncond",
            Mode::Mjem => "mjem",
            Mode::LseJem => "lsejem",
        })
    }
}

/// Layer sizes and nonlinearity of an [`EnergyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub slope: f64,
}

impl Architecture {
    /// Three hidden layers of width 128 for 2D toys, 256 for raster inputs.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        let width = if input_dim <= 2 { 128 } else { 256 };
        Self {
            input_dim,
            hidden: vec![width; 3],
            num_classes,
            slope: 0.2,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Fully connected layer, `weight: [d_in, d_out]`, `bias: [d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform initialization in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    pub fn uniform(d_in: usize, d_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = draw(d_in * d_out);
        let b = draw(d_out);
        Self {
            weight: Tensor::new(vec![d_in, d_out], w).unwrap().with_requires_grad(true),
            bias: Tensor::new(vec![d_out], b).unwrap().with_requires_grad(true),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_in, d_out]).with_requires_grad(true),
            bias: Tensor::zeros(vec![d_out]).with_requires_grad(true),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }
}

/// Parameters of a model recorded on a [`Graph`], in
/// [`EnergyModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    mode: Mode,
    arch: Architecture,
    seed: u64,
    layers: Vec<Dense>,
    classifier: Option<Dense>,
    energy_head: Option<Dense>,
}

impl EnergyModel {
    /// Randomly initialized model; weights come from the `Model` stream of
    /// `seed`.
    pub fn new(mode: Mode, arch: Architecture, seed: u64) -> Result<Self> {
        validate_arch(mode, &arch)?;
        let mut rng = rng::stream(seed, Stream::Model);
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut d_in = arch.input_dim;
        for &width in &arch.hidden {
            layers.push(Dense::uniform(d_in, width, &mut rng));
            d_in = width;
        }
        let classifier = mode
            .has_classifier()
            .then(|| Dense::uniform(d_in, arch.num_classes, &mut rng));
        let energy_head = mode.has_energy_head().then(|| Dense::uniform(d_in, 1, &mut rng));
        Ok(Self {
            mode,
            arch,
            seed,
            layers,
            classifier,
            energy_head,
        })
    }

    /// Assembles a model from explicit layers, checking the mode invariants
    /// and that every layer chains onto the previous one.
    pub fn from_parts(
        mode: Mode,
        arch: Architecture,
        layers: Vec<Dense>,
        classifier: Option<Dense>,
        energy_head: Option<Dense>,
    ) -> Result<Self> {
        validate_arch(mode, &arch)?;
        if classifier.is_some() != mode.has_classifier() || energy_head.is_some() != mode.has_energy_head() {
            return Err(Error::Config(format!("heads do not match mode {mode}")));
        }
        if layers.len() != arch.hidden.len() {
            return Err(Error::Config("layer count does not match architecture".into()));
        }
        let mut d_in = arch.input_dim;
        for (layer, &width) in layers.iter().zip(&arch.hidden) {
            if layer.dims() != (d_in, width) || layer.bias.shape() != [width] {
                return Err(Error::shape("from_parts", &[d_in, width], layer.weight.shape()));
            }
            d_in = width;
        }
        if let Some(c) = &classifier {
            if c.dims() != (d_in, arch.num_classes) {
                return Err(Error::shape("from_parts", &[d_in, arch.num_classes], c.weight.shape()));
            }
        }
        if let Some(e) = &energy_head {
            if e.dims() != (d_in, 1) {
                return Err(Error::shape("from_parts", &[d_in, 1], e.weight.shape()));
            }
        }
        let mut model = Self {
            mode,
            arch,
            seed: 0,
            layers,
            classifier,
            energy_head,
        };
        for p in model.parameters_mut() {
            let t = std::mem::replace(p, Tensor::scalar(0.0));
            *p = t.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn classifier(&self) -> Option<&Dense> {
        self.classifier.as_ref()
    }

    pub fn energy_head(&self) -> Option<&Dense> {
        self.energy_head.as_ref()
    }

    pub fn energy_head_mut(&mut self) -> Option<&mut Dense> {
        self.energy_head.as_mut()
    }

    pub fn classifier_mut(&mut self) -> Option<&mut Dense> {
        self.classifier.as_mut()
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    fn dense_iter(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(&self.classifier).chain(&self.energy_head)
    }

    /// Every parameter tensor: trunk layers, then classifier, then energy
    /// head; weight before bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.dense_iter().flat_map(|d| [&d.weight, &d.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .chain(self.classifier.as_mut())
            .chain(self.energy_head.as_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("features.{i}.weight"));
            names.push(format!("features.{i}.bias"));
        }
        if self.classifier.is_some() {
            names.push("classifier.weight".into());
            names.push("classifier.bias".into());
        }
        if self.energy_head.is_some() {
            names.push("energy_head.weight".into());
            names.push("energy_head.bias".into());
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Records the parameters on `g`. With `trainable == false` they enter as
    /// constants and no parameter gradients are computed.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let params = self
            .parameters()
            .into_iter()
            .map(|p| g.leaf_with(p, trainable && p.requires_grad()))
            .collect();
        Bound { params }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.arch.input_dim {
            return Err(Error::shape("energy model input", shape, &[0, self.arch.input_dim]));
        }
        Ok(())
    }

    /// Penultimate-layer activations `[B, H]`.
    pub fn features_in(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for i in 0..self.layers.len() {
            let z = g.affine(h, p.params[2 * i], p.params[2 * i + 1])?;
            h = g.leaky_relu(z, self.arch.slope)?;
        }
        Ok(h)
    }

    fn head_offset(&self, energy: bool) -> usize {
        let mut off = 2 * self.layers.len();
        if energy && self.classifier.is_some() {
            off += 2;
        }
        off
    }

    pub fn logits_from_features(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        if self.classifier.is_none() {
            return Err(Error::Config(format!("mode {} has no classifier head", self.mode)));
        }
        let off = self.head_offset(false);
        g.affine(h, p.params[off], p.params[off + 1])
    }

    pub fn energy_from_features(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        match self.mode {
            Mode::Uncond | Mode::Mjem => {
                let off = self.head_offset(true);
                let e = g.affine(h, p.params[off], p.params[off + 1])?;
                let rows = g.shape(e)[0];
                g.reshape(e, vec![rows])
            }
            Mode::LseJem => {
                let logits = self.logits_from_features(g, p, h)?;
                let lse = g.logsumexp(logits)?;
                Ok(g.neg(lse))
            }
        }
    }

    pub fn logits_in(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if self.classifier.is_none() {
            return Err(Error::Config(format!("mode {} has no classifier head", self.mode)));
        }
        let h = self.features_in(g, p, x)?;
        self.logits_from_features(g, p, h)
    }

    /// Energy `[B]` of each row of `x`.
    pub fn energy_in(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.features_in(g, p, x)?;
        self.energy_from_features(g, p, h)
    }

    fn eval<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: FnOnce(&Self, &mut Graph, &Bound, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.leaf(x);
        let out = f(self, &mut g, &p, xv)?;
        Ok(g.to_tensor(out))
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |m, g, p, x| m.features_in(g, p, x))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |m, g, p, x| m.logits_in(g, p, x))
    }

    pub fn energy(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.eval(x, |m, g, p, x| m.energy_in(g, p, x))?.into_values())
    }

    /// Row-wise softmax of the classifier logits.
    pub fn class_posterior(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let c = logits.cols();
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.values().chunks_exact(c) {
            out.extend(stable_softmax(row).1);
        }
        Tensor::new(logits.shape().to_vec(), out)
    }

    /// Argmax class of each row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .values()
            .chunks_exact(logits.cols())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn write(&self, w: &mut Writer) {
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.mode.code());
        w.u64(self.seed);
        w.u32(self.arch.input_dim as u32);
        w.u32(self.arch.hidden.len() as u32);
        for &h in &self.arch.hidden {
            w.u32(h as u32);
        }
        w.u32(self.arch.num_classes as u32);
        w.f64(self.arch.slope);
        let names = self.parameter_names();
        w.u32(names.len() as u32);
        for (name, p) in names.iter().zip(self.parameters()) {
            w.str(name);
            w.u32(p.shape().len() as u32);
            for &d in p.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.values());
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.error(format!("unsupported model version {version}")));
        }
        let mode = Mode::from_code(r.u32()?).ok_or_else(|| r.error("unknown mode code"))?;
        let seed = r.u64()?;
        let input_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let num_classes = r.u32()? as usize;
        let slope = r.f64()?;
        let arch = Architecture {
            input_dim,
            hidden,
            num_classes,
            slope,
        };
        let mut model = Self::new(mode, arch, seed).map_err(|e| r.error(e.to_string()))?;
        let names = model.parameter_names();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(r.error(format!("expected {} parameter arrays, found {count}", names.len())));
        }
        for (name, p) in names.iter().zip(model.parameters_mut()) {
            let got = r.str()?;
            if &got != name {
                return Err(r.error(format!("expected parameter '{name}', found '{got}'")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(r.error(format!("parameter '{name}' has shape {shape:?}, expected {:?}", p.shape())));
            }
            let values = r.f64s(p.len())?;
            p.values_mut().copy_from_slice(&values);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes, path);
        let m = Self::read(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"EBMN";
const MODEL_VERSION: u32 = 1;

fn validate_arch(mode: Mode, arch: &Architecture) -> Result<()> {
    if arch.input_dim == 0 || arch.hidden.iter().any(|&h| h == 0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    if mode.has_classifier() && arch.num_classes == 0 {
        return Err(Error::Config(format!("mode {mode} needs at least one class")));
    }
    if !(0.0..1.0).contains(&arch.slope) {
        return Err(Error::Config(format!("leaky slope {} outside [0, 1)", arch.slope)));
    }
    Ok(())
}

/// A differentiable scalar energy over row vectors.
pub trait Energy {
    fn dim(&self) -> usize;

    /// Energies `[B]` and `∂E/∂x` `[B, D]` of each row of `x`.
    fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

impl Energy for EnergyModel {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.input(x.clone(), true);
        let e = self.energy_in(&mut g, &p, xv)?;
        // Rows are independent, so the gradient of the sum is the per-row
        // gradient.
        let total = g.sum(e);
        g.backward(total)?;
        let grad = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((g.value(e).to_vec(), Tensor::new(x.shape().to_vec(), grad)?))
    }
}
