//! Evaluation, latent exchange, novel-pose adaptation, the ablation grid and
//! the micro-scale gradient check.

use std::fmt;
use std::time::{Duration, Instant};

use numgrad::{fd_check, FdReport, GradError, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{CatError, Result};
use crate::geometry::Vec3;
use crate::image::Image;
use crate::losses::{l_cov, mse, psnr, ssim, LossVariant, SSIM_WINDOW};
use crate::model::{prepare_batch, Anchor, Model, ModelConfig, Objective};
use crate::render::Ray;
use crate::synthdata::{build_scene, Dataset, SceneSpec, Split};
use crate::train::{Adam, Sampling, TrainConfig, TrainState, Trainer};
use crate::txformer::{FusionVariant, APPEARANCE, PSI_C, PSI_U};

/// One evaluated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub view: usize,
    pub frame: usize,
    pub psnr: f64,
    /// `None` for images smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn mean_psnr(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.ssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,frame,psnr,ssim\n");
        for r in &self.rows {
            let s = r.ssim.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{},{},{},{}\n", r.view, r.frame, r.psnr, s));
        }
        out
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

impl fmt::Display for MetricsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5} {:>6} {:>9} {:>7}", "view", "frame", "PSNR", "SSIM")?;
        for r in &self.rows {
            writeln!(f, "{:>5} {:>6} {:>9.3} {:>7}", r.view, r.frame, r.psnr, opt(r.ssim, 4))?;
        }
        write!(f, "{:>12} {:>9} {:>7}", "mean", opt(self.mean_psnr(), 3), opt(self.mean_ssim(), 4))
    }
}

/// Scores a rendered image against ground truth.
pub fn score(pred: &Image, truth: &Image) -> Result<(f64, Option<f64>)> {
    let p = psnr(pred, truth, 1.0)?;
    let s = if truth.width >= SSIM_WINDOW && truth.height >= SSIM_WINDOW { Some(ssim(pred, truth)?) } else { None };
    Ok((p, s))
}

/// Renders every (test view, frame) pair of `split`.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, samples: usize) -> Result<MetricsTable> {
    let mut rows = Vec::new();
    for &view in ds.views(split) {
        for &frame in ds.split_frames(split) {
            let pred = model.render_image(&ds.context(frame), &ds.cameras[view], frame, samples)?;
            let (psnr, ssim) = score(&pred, &ds.image(view, frame).to_float())?;
            rows.push(MetricRow { view, frame, psnr, ssim });
        }
    }
    Ok(MetricsTable { rows })
}

/// Frame `t` rendered with its own fused latent and with frame `t + dt`'s.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub own: Image,
    pub swapped: Image,
    /// MSE between the two 8-bit renders.
    pub mse: f64,
}

pub fn exchange_latents(model: &Model, ds: &Dataset, view: usize, t: usize, dt: i64, samples: usize) -> Result<Exchange> {
    let frames = model.config.frames.min(ds.frames());
    let other = t as i64 + dt;
    if t >= frames || other < 0 || other as usize >= frames {
        return Err(CatError::OutOfRange(format!("frames {t} and {other} must lie in 0..{frames}")));
    }
    let cam = ds.cameras.get(view).ok_or_else(|| CatError::OutOfRange(format!("view {view} of {}", ds.cameras.len())))?;
    let ctx = ds.context(t);
    let own = model.render_image(&ctx, cam, t, samples)?;
    let swapped = model.render_image_as(&ctx, cam, t, other as usize, samples)?;
    let mse = mse(&own.quantize().to_float(), &swapped.quantize().to_float())?;
    Ok(Exchange { own, swapped, mse })
}

/// Trained frame whose index is closest to `frame` (ties go to the lower).
pub fn nearest_trained(frame: usize, trained: usize) -> usize {
    frame.min(trained - 1)
}

/// A checkpoint extended to novel frames, with the final anchor penalty.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub ckpt: Checkpoint,
    pub penalty: f64,
    pub records: Vec<crate::train::StepRecord>,
}

fn extend_rows(t: &Tensor, sources: &[usize]) -> Result<Tensor> {
    let mut data = t.data().to_vec();
    for &s in sources {
        data.extend_from_slice(t.row_slice(s));
    }
    Ok(Tensor::matrix(t.rows() + sources.len(), t.cols(), data)?)
}

/// Extends the latent bank to frames `N..N+M` of `ds` (its novel frames),
/// copying frame latents from the nearest trained frame, then optimizes a
/// fresh constant latent anchored to the trained one with everything else
/// frozen.
pub fn adapt_novel_pose(ckpt: &Checkpoint, ds: &Dataset, cfg: &TrainConfig) -> Result<Adapted> {
    let trained = &ckpt.state.model;
    let n = trained.config.frames;
    let anchor_value =
        trained.tensor(PSI_C).cloned().ok_or_else(|| CatError::Invalid("checkpoint has no constant latent to anchor".into()))?;
    if ds.novel_frames.is_empty() {
        return Err(CatError::Invalid("dataset has no novel-pose frames".into()));
    }
    if ds.novel_frames.iter().enumerate().any(|(j, f)| *f != n + j) {
        return Err(CatError::Invalid(format!("novel frames must be numbered from {n}, after the trained frames")));
    }
    let m = ds.novel_frames.len();
    let sources: Vec<usize> = ds.novel_frames.iter().map(|f| nearest_trained(*f, n)).collect();

    let config = ModelConfig { frames: n + m, ..trained.config };
    let mut params = trained.params.clone();
    for name in [PSI_U, APPEARANCE] {
        if let Some(t) = params.get(name) {
            let grown = extend_rows(t, &sources)?;
            params.insert(name.to_string(), grown);
        }
    }
    for (name, t) in params.iter_mut() {
        t.set_requires_grad(name == PSI_C);
    }
    let model = Model::from_params(config, params)?;
    let state = TrainState { model, adam: Adam::default(), step: 0, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let anchor = Anchor { target: anchor_value, weight: cfg.anchor_weight, beta: 1.0 };
    let sampling = Sampling { views: ds.train_views.clone(), frames: ds.novel_frames.clone() };
    let adapt_cfg = TrainConfig { loss: LossVariant::None, steps: Some(cfg.adapt_steps), ..cfg.clone() };
    let mut trainer = Trainer::with_state(ds, adapt_cfg, state, sampling)?;
    trainer.objective = Objective { anchor: Some(anchor.clone()), ..trainer.cfg.objective() };
    trainer.data_dir = ckpt.data_dir.clone();
    let records = trainer.run_until(cfg.adapt_steps, None, None)?;
    let psi_c = trainer.state.model.tensor(PSI_C).expect("kept");
    let penalty = anchor.penalty(psi_c);
    Ok(Adapted { ckpt: trainer.checkpoint(), penalty, records })
}

/// Mean absolute off-diagonal frame covariance of Ψᵘ, if the model has one.
pub fn offdiag_cov(model: &Model) -> Result<Option<f64>> {
    match model.tensor(PSI_U) {
        Some(t) if t.rows() >= 2 => Ok(Some(l_cov(t)?)),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub loss: LossVariant,
    pub fusion: FusionVariant,
    pub outcome: std::result::Result<CellScores, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScores {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub offdiag_cov: Option<f64>,
    pub final_l_rgb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss,fusion,status,psnr,ssim,offdiag_cov,final_l_rgb\n");
        let o = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for c in &self.cells {
            match &c.outcome {
                Ok(s) => out.push_str(&format!(
                    "{},{},ok,{},{},{},{}\n",
                    c.loss,
                    c.fusion,
                    o(s.psnr),
                    o(s.ssim),
                    o(s.offdiag_cov),
                    s.final_l_rgb
                )),
                Err(e) => out.push_str(&format!("{},{},failed: {},,,,\n", c.loss, c.fusion, e.replace(',', ";"))),
            }
        }
        out
    }

    pub fn get(&self, loss: LossVariant, fusion: FusionVariant) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.loss == loss && c.fusion == fusion)
    }
}

/// Trains one model per (loss, fusion) cell from the same seed and scores it
/// on the test split. Failed cells are recorded, not propagated.
pub fn ablate(ds: &Dataset, base: &TrainConfig, losses: &[LossVariant], fusions: &[FusionVariant]) -> Result<AblationReport> {
    if losses.is_empty() || fusions.is_empty() {
        return Err(CatError::Invalid("ablation grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(losses.len() * fusions.len());
    for &loss in losses {
        for &fusion in fusions {
            let cfg = TrainConfig { loss, fusion, ..base.clone() };
            let outcome = run_cell(ds, cfg).map_err(|e| e.to_string());
            cells.push(AblationCell { loss, fusion, outcome });
        }
    }
    Ok(AblationReport { cells })
}

fn run_cell(ds: &Dataset, cfg: TrainConfig) -> Result<CellScores> {
    let points = cfg.points;
    let mut trainer = Trainer::new(ds, cfg)?;
    let total = trainer.total_steps();
    let records = trainer.run_until(total, None, None)?;
    let model = &trainer.state.model;
    let table = evaluate(model, ds, Split::Test, points)?;
    Ok(CellScores {
        psnr: table.mean_psnr(),
        ssim: table.mean_ssim(),
        offdiag_cov: offdiag_cov(model)?,
        final_l_rgb: records.last().map_or(f64::NAN, |r| r.report.l_rgb),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub fd: FdReport,
    pub parameters: usize,
    pub elapsed: Duration,
}

/// Finite-difference check of the full objective on one ray with two
/// samples through a two-part, two-frame scene, over every parameter and
/// latent of a micro model.
pub fn gradcheck_micro(seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let spec = SceneSpec { parts: 2, frames: 2, colors: vec![[0.8, 0.3, 0.2], [0.2, 0.4, 0.8]], seed, ..SceneSpec::default() };
    let scene = build_scene(&spec)?;
    let frame = 1;
    let ctx = scene.context(frame);
    // a ray straight through the torso, sampled twice inside the body
    let pose = &scene.poses[frame].transforms[0];
    let cap = &scene.skeleton.parts()[0];
    let center = pose.apply(&((cap.a + cap.b) * 0.5 + Vec3::new(0.03, 0.05, 0.0)));
    let dir = Vec3::new(0.1, -0.05, -1.0).normalize();
    let origin = center - dir * 2.0;
    let ray = Ray { origin, dir, near: 1.0, far: 3.0 };
    let depths = vec![vec![1.93, 2.04]];
    let prep = prepare_batch(&ctx, &[Some(ray)], &depths)?;
    if prep.points() != 2 {
        return Err(CatError::Degenerate(format!("gradcheck ray kept {} of 2 samples", prep.points())));
    }
    let model = Model::init(ModelConfig::micro(2, 2), seed)?;
    let objective = Objective::default();
    let target = [[0.3, 0.6, 0.2]];
    let fd = fd_check(
        |g: &Graph| {
            let vars = model.build_loss(g, &ctx, &prep, frame, &target, &objective).map_err(|e| match e {
                CatError::Graph(g) => g,
                other => GradError::Custom(other.to_string()),
            })?;
            Ok(vars.total)
        },
        &model.params,
        1e-6,
    )?;
    Ok(GradcheckReport { fd, parameters: model.param_count(), elapsed: start.elapsed() })
}
