//! The training loop: batch assembly, negative sampling, loss, SGD with
//! momentum, buffer update, divergence checks and checkpoints.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{Reader, Writer};
use crate::data::{augment, Augmentation, Batch, BatchTag, DataKind, Dataset};
use crate::diag::render_grid;
use crate::error::{Error, Result};
use crate::init::{InitDist, InitKind, DEFAULT_EPS_REG};
use crate::net::{Architecture, EnergyModel, Mode};
use crate::objectives::{inject_noise, joint_loss, uncond_loss, LossBreakdown, DEFAULT_REG_COEFF};
use crate::rng::{stream, Rng, RngState, Stream};
use crate::sgld::{sgld_chain, ReplayBuffer, SgldConfig, DEFAULT_BUFFER_CAPACITY, DEFAULT_REINIT_PROB};
use crate::tensor::{Graph, Tensor};

/// Per-step clamping of SGLD states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainClamp {
    /// Clamp raster data to its range, leave point data unbounded.
    Auto,
    None,
    Range(f64, f64),
}

impl ChainClamp {
    pub fn resolve(self, data: &Dataset) -> Option<(f64, f64)> {
        self.resolve_for(data.kind, data.range)
    }

    pub fn resolve_for(self, kind: DataKind, range: (f64, f64)) -> Option<(f64, f64)> {
        match self {
            ChainClamp::Auto => match kind {
                DataKind::Raster { .. } => Some(range),
                DataKind::Points => None,
            },
            ChainClamp::None => None,
            ChainClamp::Range(lo, hi) => Some((lo, hi)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub clf_batch: usize,
    pub gen_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub sgld: SgldConfig,
    pub chain_clamp: ChainClamp,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub reg_coeff: f64,
    pub inject_sigma: f64,
    pub mode: Mode,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub divergence_window: usize,
    /// Hidden widths; empty selects the default architecture for the data.
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub init: InitKind,
    pub eps_reg: f64,
    pub init_clamp: bool,
    pub augment: bool,
    /// Ablation only: also augment the likelihood batch.
    pub augment_gen_batch: bool,
    /// Write negatives every this many iterations; 0 disables.
    pub sample_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            iters_per_epoch: 390,
            clf_batch: 128,
            gen_batch: 64,
            learning_rate: 1e-4,
            momentum: 0.9,
            sgld: SgldConfig::default(),
            chain_clamp: ChainClamp::Auto,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            reinit_prob: DEFAULT_REINIT_PROB,
            reg_coeff: DEFAULT_REG_COEFF,
            inject_sigma: 0.0,
            mode: Mode::Uncond,
            seed: 0,
            divergence_threshold: 1e3,
            divergence_window: 50,
            hidden: Vec::new(),
            slope: 0.2,
            init: InitKind::Informative,
            eps_reg: DEFAULT_EPS_REG,
            init_clamp: true,
            augment: true,
            augment_gen_batch: false,
            sample_every: 0,
            checkpoint_every: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = parse_value(key, value)?,
            "clf_batch" => self.clf_batch = parse_value(key, value)?,
            "gen_batch" => self.gen_batch = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "sgld_steps" => self.sgld.steps = parse_value(key, value)?,
            "sgld_step_size" => self.sgld.step_size = parse_value(key, value)?,
            "sgld_noise" => self.sgld.noise_scale = parse_value(key, value)?,
            "sgld_clamp" => {
                self.chain_clamp = match value {
                    "auto" => ChainClamp::Auto,
                    "none" => ChainClamp::None,
                    _ => {
                        let (lo, hi) = value
                            .split_once(',')
                            .ok_or_else(|| Error::Config(format!("invalid value '{value}' for key '{key}'")))?;
                        ChainClamp::Range(parse_value(key, lo.trim())?, parse_value(key, hi.trim())?)
                    }
                }
            }
            "buffer_capacity" => self.buffer_capacity = parse_value(key, value)?,
            "reinit_prob" => self.reinit_prob = parse_value(key, value)?,
            "reg_coeff" => self.reg_coeff = parse_value(key, value)?,
            "inject_sigma" => self.inject_sigma = parse_value(key, value)?,
            "mode" => self.mode = value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for key 'mode'")))?,
            "seed" => self.seed = parse_value(key, value)?,
            "divergence_threshold" => self.divergence_threshold = parse_value(key, value)?,
            "divergence_window" => self.divergence_window = parse_value(key, value)?,
            "hidden" => {
                self.hidden = if value == "default" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse_value(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "slope" => self.slope = parse_value(key, value)?,
            "init" => self.init = value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for key 'init'")))?,
            "eps_reg" => self.eps_reg = parse_value(key, value)?,
            "init_clamp" => self.init_clamp = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "augment_gen_batch" => self.augment_gen_batch = parse_bool(key, value)?,
            "sample_every" => self.sample_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let clamp = match self.chain_clamp {
            ChainClamp::Auto => "auto".to_string(),
            ChainClamp::None => "none".to_string(),
            ChainClamp::Range(lo, hi) => format!("{lo},{hi}"),
        };
        let hidden = if self.hidden.is_empty() {
            "default".to_string()
        } else {
            self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("iters_per_epoch", self.iters_per_epoch.to_string());
        kv("clf_batch", self.clf_batch.to_string());
        kv("gen_batch", self.gen_batch.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("momentum", self.momentum.to_string());
        kv("sgld_steps", self.sgld.steps.to_string());
        kv("sgld_step_size", self.sgld.step_size.to_string());
        kv("sgld_noise", self.sgld.noise_scale.to_string());
        kv("sgld_clamp", clamp);
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("reinit_prob", self.reinit_prob.to_string());
        kv("reg_coeff", self.reg_coeff.to_string());
        kv("inject_sigma", self.inject_sigma.to_string());
        kv("mode", self.mode.to_string());
        kv("seed", self.seed.to_string());
        kv("divergence_threshold", self.divergence_threshold.to_string());
        kv("divergence_window", self.divergence_window.to_string());
        kv("hidden", hidden);
        kv("slope", self.slope.to_string());
        kv("init", self.init.to_string());
        kv("eps_reg", self.eps_reg.to_string());
        kv("init_clamp", self.init_clamp.to_string());
        kv("augment", self.augment.to_string());
        kv("augment_gen_batch", self.augment_gen_batch.to_string());
        kv("sample_every", self.sample_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iters_per_epoch", self.iters_per_epoch),
            ("clf_batch", self.clf_batch),
            ("gen_batch", self.gen_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("divergence_window", self.divergence_window),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("'{k}' must be positive")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("'hidden' widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return Err(Error::Config(format!("'reinit_prob' {} outside [0, 1]", self.reinit_prob)));
        }
        let nonneg = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("reg_coeff", self.reg_coeff),
            ("inject_sigma", self.inject_sigma),
            ("eps_reg", self.eps_reg),
        ];
        if let Some((k, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("'{k}' must be a finite non-negative number, got {v}")));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("'divergence_threshold' must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("'slope' {} outside [0, 1)", self.slope)));
        }
        self.sgld.validate()
    }

    pub fn total_iters(&self) -> u64 {
        (self.epochs * self.iters_per_epoch) as u64
    }

    pub fn architecture(&self, data: &Dataset) -> Architecture {
        let c = if self.mode.has_classifier() { data.num_classes } else { 0 };
        let mut arch = Architecture::default_for(data.dim(), c);
        if !self.hidden.is_empty() {
            arch.hidden = self.hidden.clone();
        }
        arch.slope = self.slope;
        arch
    }
}

/// The random streams a run consumes.
#[derive(Debug, Clone)]
pub struct Streams {
    pub data: Rng,
    pub sgld: Rng,
    pub init: Rng,
    pub augment: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream(seed, Stream::Data),
            sgld: stream(seed, Stream::Sgld),
            init: stream(seed, Stream::Init),
            augment: stream(seed, Stream::Augment),
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: EnergyModel,
    /// Momentum buffers, one per entry of `model.parameters()`.
    pub velocity: Vec<Tensor>,
    pub buffer: ReplayBuffer,
    pub p0: InitDist,
    pub iteration: u64,
    pub history: Vec<LossBreakdown>,
    pub rng: Streams,
    /// Chain starts and negatives of the most recent step.
    pub last_init: Option<Tensor>,
    pub last_negatives: Option<Tensor>,
}

impl TrainState {
    /// Fits the initial distribution and builds a fresh model.
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if data.is_empty() {
            return Err(Error::Data(format!("{}: dataset is empty", data.name)));
        }
        if cfg.mode.has_classifier() && data.labels.is_none() {
            return Err(Error::Config(format!("mode {} needs a labeled dataset", cfg.mode)));
        }
        let p0 = InitDist::fit(cfg.init, &data.samples, data.labels.as_deref(), data.range, cfg.eps_reg)?;
        Self::with_init(cfg, data, p0)
    }

    /// Builds a fresh model around an already fitted initial distribution.
    pub fn with_init(cfg: &TrainConfig, data: &Dataset, p0: InitDist) -> Result<Self> {
        if p0.dim() != data.dim() {
            return Err(Error::Config(format!(
                "initial distribution has dimension {} but data has {}",
                p0.dim(),
                data.dim()
            )));
        }
        let model = EnergyModel::new(cfg.mode, cfg.architecture(data), cfg.seed)?;
        let velocity = model.parameters().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Ok(Self {
            model,
            velocity,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, data.dim(), cfg.reinit_prob)?,
            p0,
            iteration: 0,
            history: Vec::new(),
            rng: Streams::new(cfg.seed),
            last_init: None,
            last_negatives: None,
        })
    }

    pub fn write(&self, cfg: &TrainConfig, w: &mut Writer) {
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&cfg.to_text());
        w.u64(self.iteration);
        self.model.write(w);
        w.u64(self.velocity.len() as u64);
        for v in &self.velocity {
            w.u64(v.len() as u64);
            w.f64s(v.values());
        }
        self.p0.write(w);
        self.buffer.write(w);
        for r in [&self.rng.data, &self.rng.sgld, &self.rng.init, &self.rng.augment] {
            let s = RngState::capture(r);
            w.bytes(&s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
        }
        w.u64(self.history.len() as u64);
        for b in &self.history {
            write_breakdown(w, b);
        }
    }

    /// Reads a checkpoint and the config it was written with.
    pub fn read(r: &mut Reader<'_>) -> Result<(Self, TrainConfig)> {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let cfg = TrainConfig::parse(&r.str()?).map_err(|e| r.error(format!("embedded config: {e}")))?;
        let iteration = r.u64()?;
        let model = EnergyModel::read(r)?;
        let n = r.u64()? as usize;
        let params = model.parameters();
        if n != params.len() {
            return Err(r.error(format!("{n} momentum buffers for {} parameters", params.len())));
        }
        let mut velocity = Vec::with_capacity(n);
        for p in &params {
            let len = r.u64()? as usize;
            if len != p.len() {
                return Err(r.error("momentum buffer size mismatch"));
            }
            velocity.push(Tensor::new(p.shape().to_vec(), r.f64s(len)?)?);
        }
        let p0 = InitDist::read(r)?;
        let buffer = ReplayBuffer::read(r)?;
        let mut rngs = Vec::with_capacity(4);
        for _ in 0..4 {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            rngs.push(RngState { seed, stream, word_pos }.restore());
        }
        let [data, sgld, init, augment]: [Rng; 4] = rngs.try_into().expect("four streams");
        let len = r.u64()? as usize;
        let mut history = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            history.push(read_breakdown(r)?);
        }
        r.finish()?;
        let state = Self {
            model,
            velocity,
            buffer,
            p0,
            iteration,
            history,
            rng: Streams {
                data,
                sgld,
                init,
                augment,
            },
            last_init: None,
            last_negatives: None,
        };
        Ok((state, cfg))
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        self.write(cfg, &mut w);
        let tmp = path.with_extension("tmp");
        w.write_to(&tmp)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let bytes = fs::read(path)?;
        Self::read(&mut Reader::new(&bytes, path))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EBMC";
const CHECKPOINT_VERSION: u32 = 1;

fn write_breakdown(w: &mut Writer, b: &LossBreakdown) {
    let flags = u32::from(b.clf_loss.is_some()) | (u32::from(b.accuracy.is_some()) << 1);
    w.u32(flags);
    for v in [
        b.gen_loss,
        b.clf_loss.unwrap_or(0.0),
        b.e_pos_mean,
        b.e_neg_mean,
        b.e_pos_sq_mean,
        b.e_neg_sq_mean,
        b.total,
        b.accuracy.unwrap_or(0.0),
    ] {
        w.f64(v);
    }
}

fn read_breakdown(r: &mut Reader<'_>) -> Result<LossBreakdown> {
    let flags = r.u32()?;
    let v = r.f64s(8)?;
    Ok(LossBreakdown {
        gen_loss: v[0],
        clf_loss: (flags & 1 != 0).then_some(v[1]),
        e_pos_mean: v[2],
        e_neg_mean: v[3],
        e_pos_sq_mean: v[4],
        e_neg_sq_mean: v[5],
        total: v[6],
        accuracy: (flags & 2 != 0).then_some(v[7]),
    })
}

/// One SGD-with-momentum update: `v ← m·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum(params: &mut [&mut Tensor], velocity: &mut [Tensor], grads: &[Vec<f64>], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((pi, vi), gi) in p.values_mut().iter_mut().zip(v.values_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

/// Draws the classification and likelihood batches for one step. The
/// classification batch is augmented; the likelihood batch stays clean
/// unless the ablation switch is on.
pub fn draw_batches(cfg: &TrainConfig, data: &Dataset, rng: &mut Streams) -> Result<(Option<Batch>, Batch)> {
    let aug = if cfg.augment {
        Augmentation::default_for(data.kind)
    } else {
        Augmentation::None
    };
    let clf = if cfg.mode.has_classifier() {
        let mut b = data.batch(cfg.clf_batch, BatchTag::Clean, &mut rng.data);
        if aug != Augmentation::None {
            b.x = augment(&b.x, aug, data.kind, data.range, &mut rng.augment)?;
            b.tag = BatchTag::Augmented;
        }
        Some(b)
    } else {
        None
    };
    let mut gen = data.batch(cfg.gen_batch, BatchTag::Clean, &mut rng.data);
    if cfg.augment_gen_batch && aug != Augmentation::None {
        gen.x = augment(&gen.x, aug, data.kind, data.range, &mut rng.augment)?;
        gen.tag = BatchTag::Augmented;
    }
    Ok((clf, gen))
}

/// One iteration: chain starts from the buffer or `p0`, SGLD, loss,
/// backward, parameter update and buffer push. On divergence the state is
/// left as it was before the update.
pub fn train_step(
    state: &mut TrainState,
    clf: Option<&Batch>,
    gen: &Batch,
    cfg: &TrainConfig,
    data_range: (f64, f64),
    chain_clamp: Option<(f64, f64)>,
) -> Result<LossBreakdown> {
    let iter = state.iteration;
    let init_clamp = cfg.init_clamp.then_some(data_range);
    let draw = state
        .buffer
        .draw_init(&state.p0, gen.x.rows(), init_clamp, &mut state.rng.init)?;
    let sgld_cfg = SgldConfig {
        clamp: chain_clamp,
        ..cfg.sgld.clone()
    };
    let x_neg = match sgld_chain(&state.model, &draw.samples, &sgld_cfg, &mut state.rng.sgld) {
        Ok(x) => x,
        Err(Error::SamplerDivergence { step, energy }) => {
            return Err(Error::TrainingDivergence {
                iter,
                reason: format!("sampler produced energy {energy} at step {step}"),
            })
        }
        Err(e) => return Err(e),
    };

    let pos = if cfg.inject_sigma > 0.0 {
        Batch {
            x: inject_noise(&gen.x, cfg.inject_sigma, &mut state.rng.augment)?,
            y: gen.y.clone(),
            tag: gen.tag,
        }
    } else {
        gen.clone()
    };

    let model = &state.model;
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let terms = match (model.mode(), clf) {
        (Mode::Uncond, _) => uncond_loss(model, &mut g, &p, &pos, &x_neg, cfg.reg_coeff, cfg.augment_gen_batch)?,
        (_, Some(clf)) => joint_loss(model, &mut g, &p, clf, &pos, &x_neg, cfg.reg_coeff, cfg.augment_gen_batch)?,
        (mode, None) => return Err(Error::Config(format!("mode {mode} needs a classification batch"))),
    };
    let b = terms.breakdown;
    if !b.is_finite() {
        return Err(Error::TrainingDivergence {
            iter,
            reason: "non-finite loss".into(),
        });
    }
    if b.energy_gap() > cfg.divergence_threshold {
        return Err(Error::TrainingDivergence {
            iter,
            reason: format!("energy gap {} exceeds {}", b.energy_gap(), cfg.divergence_threshold),
        });
    }
    g.backward(terms.total)?;
    let grads: Vec<Vec<f64>> = p
        .params
        .iter()
        .zip(model.parameters())
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDivergence {
            iter,
            reason: "non-finite parameter gradient".into(),
        });
    }
    drop(g);

    let mut params = state.model.parameters_mut();
    sgd_momentum(&mut params, &mut state.velocity, &grads, cfg.learning_rate, cfg.momentum);
    state.buffer.push(&x_neg, &mut state.rng.init)?;
    state.iteration += 1;
    state.history.push(b);
    state.last_init = Some(draw.samples);
    state.last_negatives = Some(x_neg);
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Health {
    Healthy,
    Diverged(u64),
}

/// Flags the first row that is non-finite or whose trailing mean energy gap
/// (over up to `window` rows) exceeds `threshold`.
pub fn divergence_monitor(history: &[LossBreakdown], threshold: f64, window: usize) -> Health {
    let window = window.max(1);
    let mut sum = 0.0;
    for (i, b) in history.iter().enumerate() {
        if !b.is_finite() {
            return Health::Diverged(i as u64);
        }
        sum += b.energy_gap();
        if i >= window {
            sum -= history[i - window].energy_gap();
        }
        let n = (i + 1).min(window) as f64;
        if sum / n > threshold {
            return Health::Diverged(i as u64);
        }
    }
    Health::Healthy
}

pub const METRICS_HEADER: &str = "iter,clf_loss,gen_loss,e_pos_mean,e_neg_mean,e_pos_sq_mean,e_neg_sq_mean,acc";

pub fn metrics_row(iter: u64, b: &LossBreakdown) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{iter},{},{},{},{},{},{},{}",
        opt(b.clf_loss),
        b.gen_loss,
        b.e_pos_mean,
        b.e_neg_mean,
        b.e_pos_sq_mean,
        b.e_neg_sq_mean,
        opt(b.accuracy)
    )
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.ebmc")
    }

    pub fn init(&self) -> PathBuf {
        self.root.join("init.ebmi")
    }

    pub fn samples(&self, iter: u64, kind: DataKind) -> PathBuf {
        let ext = match kind {
            DataKind::Raster { .. } => "ppm",
            DataKind::Points => "txt",
        };
        self.root.join(format!("samples_{iter:07}.{ext}"))
    }
}

fn grid_layout(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

/// Runs from `state.iteration` to `cfg.total_iters()`. With an output
/// directory, metrics rows are appended per step, a checkpoint is written
/// every `checkpoint_every` epochs and negatives every `sample_every` steps.
/// On divergence the last checkpoint is left untouched and the error is
/// returned; `state` keeps the history up to the failing step.
pub fn run(state: &mut TrainState, cfg: &TrainConfig, data: &Dataset, out: Option<&RunDir>) -> Result<()> {
    cfg.validate()?;
    let total = cfg.total_iters();
    let chain_clamp = cfg.chain_clamp.resolve(data);
    let mut metrics = match out {
        Some(dir) => {
            let path = dir.metrics();
            let f = if state.iteration == 0 {
                let mut f = File::create(&path)?;
                writeln!(f, "{METRICS_HEADER}")?;
                f
            } else {
                OpenOptions::new().append(true).open(&path)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let ipe = cfg.iters_per_epoch as u64;
    while state.iteration < total {
        let (clf, gen) = draw_batches(cfg, data, &mut state.rng)?;
        let step = train_step(state, clf.as_ref(), &gen, cfg, data.range, chain_clamp);
        let b = match step {
            Ok(b) => b,
            Err(e) => {
                if let Some(m) = metrics.as_mut() {
                    m.flush()?;
                }
                return Err(e);
            }
        };
        let iter = state.iteration - 1;
        if let Some(m) = metrics.as_mut() {
            writeln!(m, "{}", metrics_row(iter, &b))?;
        }
        if let Some(dir) = out {
            if cfg.sample_every > 0 && state.iteration.is_multiple_of(cfg.sample_every as u64) {
                if let Some(x) = &state.last_negatives {
                    render_grid(x, grid_layout(x.rows()), data.kind, &dir.samples(state.iteration, data.kind))?;
                }
            }
            if state.iteration.is_multiple_of(ipe * cfg.checkpoint_every as u64) || state.iteration == total {
                if let Some(m) = metrics.as_mut() {
                    m.flush()?;
                }
                state.save(cfg, &dir.checkpoint())?;
            }
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    Ok(())
}

/// Fits `p0`, builds the model and trains for `cfg.total_iters()` steps.
/// With an output directory the untrained state is checkpointed first.
pub fn train_loop(cfg: &TrainConfig, data: &Dataset, out: Option<&RunDir>) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, data)?;
    if let Some(dir) = out {
        state.p0.save(&dir.init())?;
        state.save(cfg, &dir.checkpoint())?;
    }
    run(&mut state, cfg, data, out)?;
    Ok(state)
}

/// Checks that `resumed` may continue a run written with `stored`; only the
/// epoch count and output cadences may differ.
pub fn check_resume(stored: &TrainConfig, resumed: &TrainConfig) -> Result<()> {
    let norm = |c: &TrainConfig| TrainConfig {
        epochs: 0,
        sample_every: 0,
        checkpoint_every: 1,
        ..c.clone()
    };
    if norm(stored) != norm(resumed) {
        return Err(Error::Config("config differs from the one stored in the checkpoint".into()));
    }
    Ok(())
}
