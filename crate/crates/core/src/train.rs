//! Optimizer, schedule and the novel-view training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use numgrad::{GradError, Gradients, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{CatError, Result};
use crate::kv::KeyValues;
use crate::losses::{LossReport, LossVariant, LossWeights};
use crate::model::{camera_rays, prepare_batch, ray_depths, Model, ModelConfig, Objective};
use crate::render::Ray;
use crate::synthdata::Dataset;
use crate::txformer::FusionVariant;

/// Training hyperparameters. Keys in config files use the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub rays: usize,
    pub points: usize,
    pub lr0: f64,
    /// Epochs over which the learning rate falls tenfold.
    pub decay_epochs: f64,
    pub loss: LossVariant,
    pub weights: LossWeights,
    pub preset: String,
    pub fusion: FusionVariant,
    pub constant_width: Option<usize>,
    pub unique_width: Option<usize>,
    pub seed: u64,
    pub deterministic: bool,
    pub stratified: bool,
    /// Share of each batch drawn from pixels that differ from the background.
    pub body_fraction: f64,
    /// Save a checkpoint every this many steps (0 disables).
    pub keep_every: u64,
    pub adapt_steps: u64,
    pub anchor_weight: f64,
    /// `model.*` keys applied over the preset.
    pub model_overrides: KeyValues,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            steps: None,
            rays: 4096,
            points: 64,
            lr0: 5e-4,
            decay_epochs: 1000.0,
            loss: LossVariant::Cov,
            weights: LossWeights::default(),
            preset: "desk".into(),
            fusion: FusionVariant::Tx2,
            constant_width: None,
            unique_width: None,
            seed: 0,
            deterministic: true,
            stratified: true,
            body_fraction: 0.5,
            keep_every: 0,
            adapt_steps: 200,
            anchor_weight: 1.0,
            model_overrides: KeyValues::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays == 0 || self.points == 0 {
            return Err(CatError::Invalid("rays and points must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(CatError::Invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_epochs > 0.0) {
            return Err(CatError::Invalid("decay_epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.body_fraction) {
            return Err(CatError::Invalid(format!("body_fraction must lie in [0, 1], got {}", self.body_fraction)));
        }
        if !(self.anchor_weight >= 0.0) {
            return Err(CatError::Invalid("anchor_weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective { variant: self.loss, weights: self.weights, anchor: None }
    }

    pub fn model_config(&self, parts: usize, frames: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, parts, frames)?;
        c.fusion = self.fusion;
        if let Some(w) = self.constant_width {
            c.constant_width = w;
        }
        if let Some(w) = self.unique_width {
            c.unique_width = w;
        }
        ModelConfig::read_kv(&self.model_overrides, c)
    }

    pub fn steps_per_epoch(&self, train_pixels: usize) -> u64 {
        (train_pixels.div_ceil(self.rays) as u64).max(1)
    }

    pub fn total_steps(&self, train_pixels: usize) -> u64 {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(train_pixels))
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        if let Some(s) = self.steps {
            kv.set("steps", s);
        }
        kv.set("rays", self.rays);
        kv.set("points", self.points);
        kv.set_f64("lr0", self.lr0);
        kv.set_f64("decay_epochs", self.decay_epochs);
        kv.set("loss", self.loss);
        kv.set_f64("w_rgb", self.weights.rgb);
        kv.set_f64("w_nsf", self.weights.nsf);
        kv.set_f64("w_decor", self.weights.decor);
        kv.set("preset", &self.preset);
        kv.set("fusion", self.fusion);
        if let Some(w) = self.constant_width {
            kv.set("constant_width", w);
        }
        if let Some(w) = self.unique_width {
            kv.set("unique_width", w);
        }
        kv.set("seed", self.seed);
        kv.set("deterministic", self.deterministic);
        kv.set("stratified", self.stratified);
        kv.set_f64("body_fraction", self.body_fraction);
        kv.set("keep_every", self.keep_every);
        kv.set("adapt_steps", self.adapt_steps);
        kv.set_f64("anchor_weight", self.anchor_weight);
        for key in self.model_overrides.keys() {
            kv.set(key, self.model_overrides.get_str(key).unwrap_or_default());
        }
    }

    /// Reads known keys over the defaults; `model.*` keys become overrides.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.get($key)? {
                    $slot = v;
                }
            };
        }
        field!("epochs", c.epochs);
        c.steps = kv.get("steps")?;
        field!("rays", c.rays);
        field!("points", c.points);
        field!("lr0", c.lr0);
        field!("decay_epochs", c.decay_epochs);
        field!("w_rgb", c.weights.rgb);
        field!("w_nsf", c.weights.nsf);
        field!("w_decor", c.weights.decor);
        field!("preset", c.preset);
        c.constant_width = kv.get("constant_width")?;
        c.unique_width = kv.get("unique_width")?;
        field!("seed", c.seed);
        field!("deterministic", c.deterministic);
        field!("stratified", c.stratified);
        field!("body_fraction", c.body_fraction);
        field!("keep_every", c.keep_every);
        field!("adapt_steps", c.adapt_steps);
        field!("anchor_weight", c.anchor_weight);
        if let Some(v) = kv.get_str("loss") {
            c.loss = v.parse()?;
        }
        if let Some(v) = kv.get_str("fusion") {
            c.fusion = v.parse()?;
        }
        for key in kv.keys().filter(|k| k.starts_with("model.")) {
            c.model_overrides.set(key, kv.get_str(key).unwrap_or_default());
        }
        c.validate()?;
        Ok(c)
    }
}

/// `lr0 · 10^(−epoch / decay_epochs)`.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / 10f64.powf(epoch as f64 / cfg.decay_epochs)
}

/// Adam with per-tensor first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: TensorMap::new(), v: TensorMap::new() }
    }
}

impl Adam {
    /// One update of every parameter that requires a gradient; a tensor
    /// without an entry in `grads` is treated as having zero gradient.
    pub fn update(&mut self, params: &mut TensorMap, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.len();
            let g = grads.get(name).map(Tensor::data);
            if let Some(g) = g {
                if g.len() != n {
                    return Err(CatError::Invalid(format!("gradient for `{name}` has {} values, tensor {n}", g.len())));
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            let data = p.data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,l_rgb,l_nsf,decor,total,lr";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{}", self.step, r.l_rgb, r.l_nsf, r.decor, r.total, self.lr)
    }
}

/// Appending CSV loss log.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CatError::io(path, e))?;
        let mut log = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        if fresh {
            log.line(LOG_HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| CatError::io(&self.path, e))
    }

    pub fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.line(&rec.csv_line())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CatError::io(&self.path, e))
    }
}

/// Parses a log written by [`LossLog`].
pub fn read_log(path: &Path) -> Result<Vec<(u64, [f64; 5])>> {
    let text = std::fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        let bad = || CatError::format(path, format!("bad log line `{line}`"));
        if cells.len() != 6 {
            return Err(bad());
        }
        let step = cells[0].parse().map_err(|_| bad())?;
        let mut vals = [0.0; 5];
        for (v, c) in vals.iter_mut().zip(&cells[1..]) {
            *v = c.parse().map_err(|_| bad())?;
        }
        rows.push((step, vals));
    }
    Ok(rows)
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(model: Model, seed: u64) -> Self {
        Self { model, adam: Adam::default(), step: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Which (view, frame) images a loop draws its rays from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampling {
    pub views: Vec<usize>,
    pub frames: Vec<usize>,
}

/// A resumable training loop over a dataset.
pub struct Trainer<'a> {
    pub ds: &'a Dataset,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub sampling: Sampling,
    pub objective: Objective,
    /// Echoed into checkpoints.
    pub data_dir: Option<PathBuf>,
    rays: Vec<Vec<Option<Ray>>>,
    /// Foreground pixel indices per `[view][frame]`.
    body: Vec<Vec<Vec<usize>>>,
    pixels_per_epoch: usize,
}

fn is_divergence(e: &CatError) -> bool {
    matches!(e, CatError::Graph(GradError::NonFinite { .. }))
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(ds: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.train_views.is_empty() || ds.train_frames.is_empty() {
            return Err(CatError::Invalid("dataset has no training views or frames".into()));
        }
        check_frame_layout(ds)?;
        let mc = cfg.model_config(ds.parts(), ds.train_frames.len())?;
        let model = Model::init(mc, cfg.seed)?;
        // pin the resolved model config so the checkpoint echo reads back unchanged
        let mut cfg = cfg;
        cfg.model_overrides = KeyValues::new();
        mc.write_kv(&mut cfg.model_overrides);
        let state = TrainState::fresh(model, cfg.seed);
        let sampling = Sampling { views: ds.train_views.clone(), frames: ds.train_frames.clone() };
        Self::with_state(ds, cfg, state, sampling)
    }

    pub fn with_state(ds: &'a Dataset, cfg: TrainConfig, state: TrainState, sampling: Sampling) -> Result<Self> {
        cfg.validate()?;
        if sampling.views.is_empty() || sampling.frames.is_empty() {
            return Err(CatError::Invalid("nothing to sample rays from".into()));
        }
        if sampling.frames.iter().any(|f| *f >= state.model.config.frames || *f >= ds.frames()) {
            return Err(CatError::OutOfRange("sampled frame outside the model's latent bank".into()));
        }
        let rays = ds.cameras.iter().map(|cam| camera_rays(cam, &ds.context(0).bounds())).collect::<Result<Vec<_>>>()?;
        let bg = ds.background.map(|c| (c * 255.0).round() as u8);
        let body = ds
            .images
            .iter()
            .map(|row| row.iter().map(|img| img.data.chunks(3).enumerate().filter(|(_, px)| *px != bg).map(|(i, _)| i).collect()).collect())
            .collect();
        let pixels_per_epoch = ds.train_pixels();
        let objective = cfg.objective();
        Ok(Self { ds, cfg, state, sampling, objective, data_dir: None, rays, body, pixels_per_epoch })
    }

    /// Continues from a checkpoint produced by [`Trainer::checkpoint`].
    pub fn resume(ds: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        check_frame_layout(ds)?;
        let sampling = Sampling { views: ds.train_views.clone(), frames: ds.train_frames.clone() };
        let mut t = Self::with_state(ds, ckpt.config, ckpt.state, sampling)?;
        t.data_dir = ckpt.data_dir;
        Ok(t)
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps(self.pixels_per_epoch)
    }

    pub fn epoch(&self) -> u64 {
        self.state.step / self.cfg.steps_per_epoch(self.pixels_per_epoch)
    }

    /// Draws one batch: (frame, rays, targets).
    fn draw(&mut self) -> (usize, Vec<Option<Ray>>, Vec<[f64; 3]>) {
        let rng = &mut self.state.rng;
        let view = self.sampling.views[rng.gen_range(0..self.sampling.views.len())];
        let frame = self.sampling.frames[rng.gen_range(0..self.sampling.frames.len())];
        let img = self.ds.image(view, frame);
        let n = img.width * img.height;
        let body = &self.body[view][frame];
        let from_body = if body.is_empty() { 0 } else { (self.cfg.rays as f64 * self.cfg.body_fraction).round() as usize };
        let mut rays = Vec::with_capacity(self.cfg.rays);
        let mut targets = Vec::with_capacity(self.cfg.rays);
        for i in 0..self.cfg.rays {
            let p = if i < from_body { body[rng.gen_range(0..body.len())] } else { rng.gen_range(0..n) };
            rays.push(self.rays[view][p]);
            let px = &img.data[3 * p..3 * p + 3];
            targets.push([px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]);
        }
        (frame, rays, targets)
    }

    /// Loss and gradients for the next batch, without touching parameters.
    pub fn batch_loss(&mut self, objective: &Objective) -> Result<(LossReport, Gradients, usize)> {
        let (frame, rays, targets) = self.draw();
        let depths = ray_depths(&rays, self.cfg.points, self.cfg.stratified, &mut self.state.rng)?;
        let ctx = self.ds.context(frame);
        let prep = prepare_batch(&ctx, &rays, &depths)?;
        let (report, grads) = self.state.model.loss_and_grad(&ctx, &prep, frame, &targets, objective)?;
        Ok((report, grads, frame))
    }

    /// One optimizer step. On a non-finite loss the state is left at the
    /// last good parameters and [`CatError::Diverged`] is returned.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let lr = lr_at(self.epoch(), &self.cfg);
        let objective = self.objective.clone();
        let before = self.state.clone();
        let step = self.state.step;
        let outcome = self.batch_loss(&objective).and_then(|(report, grads, _)| {
            if !report.total.is_finite() || grads.values().any(|t| !t.is_finite()) {
                return Err(CatError::Diverged { step, reason: "non-finite loss or gradient".into() });
            }
            Ok((report, grads))
        });
        let (report, grads) = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.state = before;
                return Err(if is_divergence(&e) { CatError::Diverged { step, reason: e.to_string() } } else { e });
            }
        };
        self.state.adam.update(&mut self.state.model.params, &grads, lr)?;
        self.state.step += 1;
        Ok(StepRecord { step, report, lr })
    }

    /// Trains until `target` steps have been taken in total.
    pub fn run_until(&mut self, target: u64, mut log: Option<&mut LossLog>, keep: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.state.step < target {
            let rec = self.step_once()?;
            if let Some(log) = log.as_deref_mut() {
                log.record(&rec)?;
            }
            records.push(rec);
            if let (Some(path), true) = (keep, self.cfg.keep_every > 0) {
                if self.state.step.is_multiple_of(self.cfg.keep_every) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(log) = log {
            log.flush()?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), data_dir: self.data_dir.clone(), state: self.state.clone() }
    }
}

/// Model frame `i` is dataset frame `i`; training frames must be `0..N`.
fn check_frame_layout(ds: &Dataset) -> Result<()> {
    if ds.train_frames.iter().enumerate().any(|(i, f)| i != *f) {
        return Err(CatError::Invalid("training frames must be numbered 0..N".into()));
    }
    Ok(())
}

/// Trains from scratch for the configured length. When `out` is given the
/// final checkpoint (and every `keep_every` one) is written there, and a
/// loss log is appended to `out` with a `.csv` extension.
pub fn train_novel_view(ds: &Dataset, cfg: TrainConfig, out: Option<&Path>, data_dir: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(ds, cfg)?;
    trainer.data_dir = data_dir.map(Path::to_path_buf);
    let total = trainer.total_steps();
    let mut log = out.map(|p| LossLog::open(&p.with_extension("csv"))).transpose()?;
    if let Some(path) = out {
        trainer.checkpoint().save(path)?;
    }
    trainer.run_until(total, log.as_mut(), out)?;
    let ckpt = trainer.checkpoint();
    if let Some(path) = out {
        ckpt.save(path)?;
    }
    Ok(ckpt)
}
