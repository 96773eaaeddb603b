//! The full model: configuration, parameters and the rendering/loss graph.

use numgrad::{Axis, Gradients, Graph, Tensor, TensorMap, Var};
use rand::Rng;

use crate::deform::{self, BlendInverseOp, BlendWeights, PoseFrame, Skeleton, StatWeightsOp};
use crate::error::{CatError, Result};
use crate::fields::{encode_batch, EncodingConfig, FieldDecoders, Interval, LayerMarks, PosEncOp, RadianceNet};
use crate::geometry::{Aabb, Rigid, Vec3};
use crate::image::Image;
use crate::kv::KeyValues;
use crate::losses::{decor_graph, l_nsf_graph, l_rgb_graph, LossReport, LossVariant, LossWeights};
use crate::nn::{init_params, ParamSpec};
use crate::render::{depth_gaps, generate_ray, pixel_ray, sample_depths, AccumulateOp, Camera, Ray, Slot};
use crate::txformer::{EncoderLayer, FusionVariant, LatentBank, TxFusion, APPEARANCE, PSI_C, PSI_U};

/// Architecture and latent sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub parts: usize,
    pub frames: usize,
    pub encoding: EncodingConfig,
    pub width: usize,
    pub final_width: usize,
    pub decoder_width: usize,
    pub blend_width: usize,
    pub blend_depth: usize,
    pub constant_width: usize,
    pub unique_width: usize,
    pub appearance_width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub fusion: FusionVariant,
    /// Initial output bias of the blend MLP; `ln 0.01` keeps ΔW small at first.
    pub blend_bias: f64,
}

impl ModelConfig {
    /// Full-size networks: 256/128-wide radiance MLP, 128-d latents.
    pub fn full(parts: usize, frames: usize) -> Self {
        Self {
            parts,
            frames,
            encoding: EncodingConfig::default(),
            width: 256,
            final_width: 128,
            decoder_width: 64,
            blend_width: 128,
            blend_depth: 8,
            constant_width: 128,
            unique_width: 128,
            appearance_width: 128,
            heads: 4,
            ffn_width: 256,
            fusion: FusionVariant::Tx2,
            blend_bias: 0.01f64.ln(),
        }
    }

    /// Narrow networks that train in minutes on one core.
    pub fn desk(parts: usize, frames: usize) -> Self {
        Self {
            width: 64,
            final_width: 32,
            decoder_width: 32,
            blend_width: 32,
            constant_width: 32,
            unique_width: 32,
            appearance_width: 16,
            ffn_width: 64,
            ..Self::full(parts, frames)
        }
    }

    /// Tiny networks for finite-difference checks.
    pub fn micro(parts: usize, frames: usize) -> Self {
        Self {
            encoding: EncodingConfig { position_bands: 4, direction_bands: 2, include_raw: false },
            width: 8,
            final_width: 4,
            decoder_width: 4,
            blend_width: 6,
            constant_width: 4,
            unique_width: 4,
            appearance_width: 3,
            heads: 2,
            ffn_width: 8,
            ..Self::full(parts, frames)
        }
    }

    pub fn preset(name: &str, parts: usize, frames: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(parts, frames)),
            "desk" => Ok(Self::desk(parts, frames)),
            "micro" => Ok(Self::micro(parts, frames)),
            other => Err(CatError::Unknown { kind: "model preset", value: other.to_string() }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.parts == 0 || self.frames == 0 {
            return Err(CatError::Invalid("model needs at least one part and one frame".into()));
        }
        for (name, v) in [
            ("width", self.width),
            ("final_width", self.final_width),
            ("decoder_width", self.decoder_width),
            ("blend_width", self.blend_width),
            ("blend_depth", self.blend_depth),
            ("appearance_width", self.appearance_width),
        ] {
            if v == 0 {
                return Err(CatError::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.unique_width > 0 && (self.fusion.uses_t1() || self.fusion.uses_t2()) {
            self.encoder().validate()?;
        }
        if !self.blend_bias.is_finite() {
            return Err(CatError::Invalid("blend_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn radiance(&self) -> RadianceNet {
        RadianceNet {
            position_width: self.encoding.position_width(),
            direction_width: self.encoding.direction_width(),
            appearance_width: self.appearance_width,
            width: self.width,
            final_width: self.final_width,
        }
    }

    pub fn decoders(&self) -> FieldDecoders {
        FieldDecoders {
            position_width: self.encoding.position_width(),
            constant_width: self.constant_width,
            unique_width: self.unique_width,
            decoder_width: self.decoder_width,
            blend_width: self.blend_width,
            blend_depth: self.blend_depth,
            outputs: self.parts + 1,
            output_bias: self.blend_bias,
        }
    }

    pub fn encoder(&self) -> EncoderLayer {
        EncoderLayer { width: self.unique_width, heads: self.heads, ffn: self.ffn_width }
    }

    pub fn fusion_stack(&self) -> TxFusion {
        TxFusion { layer: self.encoder(), variant: self.fusion }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = self.radiance().specs();
        out.extend(self.decoders().specs());
        if self.unique_width > 0 {
            out.extend(self.fusion_stack().specs());
        }
        out.extend(LatentBank::specs(self.frames, self.constant_width, self.unique_width, self.appearance_width));
        out
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("model.parts", self.parts);
        kv.set("model.frames", self.frames);
        kv.set("model.position_bands", self.encoding.position_bands);
        kv.set("model.direction_bands", self.encoding.direction_bands);
        kv.set("model.include_raw", self.encoding.include_raw);
        kv.set("model.width", self.width);
        kv.set("model.final_width", self.final_width);
        kv.set("model.decoder_width", self.decoder_width);
        kv.set("model.blend_width", self.blend_width);
        kv.set("model.blend_depth", self.blend_depth);
        kv.set("model.constant_width", self.constant_width);
        kv.set("model.unique_width", self.unique_width);
        kv.set("model.appearance_width", self.appearance_width);
        kv.set("model.heads", self.heads);
        kv.set("model.ffn_width", self.ffn_width);
        kv.set("model.fusion", self.fusion);
        kv.set_f64("model.blend_bias", self.blend_bias);
    }

    /// Reads `model.*` keys over `base`; absent keys keep the base value.
    pub fn read_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self> {
        let mut c = base;
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.get($key)? {
                    $slot = v;
                }
            };
        }
        field!("model.parts", c.parts);
        field!("model.frames", c.frames);
        field!("model.position_bands", c.encoding.position_bands);
        field!("model.direction_bands", c.encoding.direction_bands);
        field!("model.include_raw", c.encoding.include_raw);
        field!("model.width", c.width);
        field!("model.final_width", c.final_width);
        field!("model.decoder_width", c.decoder_width);
        field!("model.blend_width", c.blend_width);
        field!("model.blend_depth", c.blend_depth);
        field!("model.constant_width", c.constant_width);
        field!("model.unique_width", c.unique_width);
        field!("model.appearance_width", c.appearance_width);
        field!("model.heads", c.heads);
        field!("model.ffn_width", c.ffn_width);
        field!("model.blend_bias", c.blend_bias);
        if let Some(f) = kv.get_str("model.fusion") {
            c.fusion = f.parse()?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// One frame's geometry as seen by the renderer.
#[derive(Debug, Clone, Copy)]
pub struct SceneContext<'a> {
    pub skeleton: &'a Skeleton,
    pub pose: &'a PoseFrame,
    pub background: [f64; 3],
}

impl SceneContext<'_> {
    pub fn bounds(&self) -> Aabb {
        Aabb::default()
    }
}

/// Numeric pre-pass for a set of rays: sample positions, their statistical
/// canonical correspondences and the quadrature layout. Nothing here depends
/// on learnable parameters.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub layout: Vec<Vec<Slot>>,
    pub x_obs: Vec<Vec3>,
    pub x0: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    pub ws0: Vec<f64>,
    pub parts: usize,
    pub flagged: usize,
}

impl PreparedBatch {
    pub fn points(&self) -> usize {
        self.x_obs.len()
    }

    pub fn rays(&self) -> usize {
        self.layout.len()
    }
}

/// Depth samples per ray; rays that miss the scene get none.
pub fn ray_depths<R: Rng + ?Sized>(rays: &[Option<Ray>], m: usize, stratified: bool, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    rays.iter()
        .map(|r| match r {
            Some(r) => sample_depths(r, m, stratified, rng),
            None => Ok(Vec::new()),
        })
        .collect()
}

pub fn prepare_batch(ctx: &SceneContext, rays: &[Option<Ray>], depths: &[Vec<f64>]) -> Result<PreparedBatch> {
    if rays.len() != depths.len() {
        return Err(CatError::Invalid(format!("{} rays but {} depth lists", rays.len(), depths.len())));
    }
    let skeleton = ctx.skeleton;
    let posed = skeleton.posed(ctx.pose)?;
    let inverses: Vec<Rigid> = ctx.pose.transforms.iter().map(Rigid::inverse).collect();
    let bounds = ctx.bounds();
    let k = skeleton.len();
    let mut batch = PreparedBatch {
        layout: Vec::with_capacity(rays.len()),
        x_obs: Vec::new(),
        x0: Vec::new(),
        dirs: Vec::new(),
        ws0: Vec::new(),
        parts: k,
        flagged: 0,
    };
    for (ray, hs) in rays.iter().zip(depths) {
        let Some(ray) = ray else {
            batch.layout.push(Vec::new());
            continue;
        };
        let gaps = depth_gaps(hs, ray.far);
        let mut slots = Vec::with_capacity(hs.len());
        for (h, delta) in hs.iter().zip(gaps) {
            let x = ray.at(*h);
            let corr = deform::inverse_with(&x, &ctx.pose.transforms, &inverses, skeleton, &posed);
            if !corr.converged || !bounds.contains(&corr.point, 0.0) {
                batch.flagged += 1;
                slots.push(Slot { point: None, delta });
                continue;
            }
            slots.push(Slot { point: Some(batch.x_obs.len()), delta });
            batch.x_obs.push(x);
            batch.x0.push(corr.point);
            batch.dirs.push(ray.dir);
            batch.ws0.extend(deform::raw_statistical_weights(&corr.point, skeleton));
        }
        batch.layout.push(slots);
    }
    Ok(batch)
}

/// Points to evaluate the weight fields at, without any ray structure.
pub fn prepare_points(ctx: &SceneContext, points: &[Vec3]) -> Result<PreparedBatch> {
    let rays: Vec<Option<Ray>> =
        points.iter().map(|p| Some(Ray { origin: *p, dir: Vec3::new(0.0, 0.0, 1.0), near: 0.0, far: 1.0 })).collect();
    let depths = vec![vec![0.0]; points.len()];
    prepare_batch(ctx, &rays, &depths)
}

/// Loss terms and total as graph values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pred: Var,
    pub l_rgb: Var,
    pub l_nsf: Var,
    pub decor: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub variant: LossVariant,
    pub weights: LossWeights,
    /// Smooth-L1 pull of ψᶜ towards a fixed value.
    pub anchor: Option<Anchor>,
}

impl Default for Objective {
    fn default() -> Self {
        Self { variant: LossVariant::Cov, weights: LossWeights::default(), anchor: None }
    }
}

/// `weight · Σ smooth_l1(ψᶜ − target; beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub target: Tensor,
    pub weight: f64,
    pub beta: f64,
}

impl Anchor {
    pub fn graph(&self, g: &Graph, psi_c: Var) -> Var {
        let t = g.constant(self.target.clone());
        let d = g.sub(psi_c, t);
        let s = g.smooth_l1(d, self.beta);
        let s = g.sum(s);
        g.scale(s, self.weight)
    }

    /// Unweighted penalty at `psi_c`.
    pub fn penalty(&self, psi_c: &Tensor) -> f64 {
        psi_c
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| {
                let x = (a - b).abs();
                if x < self.beta {
                    0.5 * x * x / self.beta
                } else {
                    x - 0.5 * self.beta
                }
            })
            .sum()
    }
}

struct WeightVars {
    w_obs: Var,
    x_can: Var,
    gxc: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: TensorMap,
}

/// Rays per graph when rendering whole images.
pub const RENDER_CHUNK: usize = 512;

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: init_params(&config.specs(), seed) })
    }

    /// Checks that `params` holds exactly the tensors the config declares.
    pub fn from_params(config: ModelConfig, params: TensorMap) -> Result<Self> {
        config.validate()?;
        let specs = config.specs();
        if specs.len() != params.len() {
            return Err(CatError::Invalid(format!("expected {} tensors, found {}", specs.len(), params.len())));
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => return Err(CatError::Invalid(format!("`{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape))),
                None => return Err(CatError::Invalid(format!("missing tensor `{}`", s.name))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn bank(&self) -> Result<LatentBank> {
        LatentBank::from_params(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.config.frames {
            return Err(CatError::OutOfRange(format!("frame {frame} of {}", self.config.frames)));
        }
        Ok(())
    }

    /// Decoded latent feature for the unique latent fused at `query`, or for
    /// the canonical pathway (zero unique input) when `query` is `None`.
    fn latent_feature(&self, g: &Graph, query: Option<usize>) -> Result<Option<Var>> {
        let c = &self.config;
        let psi_c = (c.constant_width > 0).then(|| g.input(PSI_C));
        let fused = if c.unique_width == 0 {
            None
        } else {
            Some(match query {
                Some(q) => {
                    let psi_u = g.input(PSI_U);
                    c.fusion_stack().fuse(g, psi_u, c.frames, q)?
                }
                None => g.constant(Tensor::zeros(&[1, c.unique_width])),
            })
        };
        Ok(c.decoders().latent_feature(g, psi_c, fused))
    }

    fn weight_stage(
        &self,
        g: &Graph,
        ctx: &SceneContext,
        prep: &PreparedBatch,
        query: usize,
        marks: &mut LayerMarks,
    ) -> Result<WeightVars> {
        let c = &self.config;
        let enc = c.encoding;
        let lat = self.latent_feature(g, Some(query))?;
        let gx0 = g.constant(encode_batch(&prep.x0, enc.position_bands, Interval::UNIT, enc.include_raw));
        let dw = c.decoders().delta(g, gx0, lat, marks);
        let ws0 = g.constant(Tensor::matrix(prep.points(), c.parts + 1, prep.ws0.clone())?);
        let raw = g.add(dw, ws0);
        let norm = g.sum_axis(raw, Axis::Cols);
        let w_obs = g.div(raw, norm);
        let x_can = g.custom(BlendInverseOp::new(prep.x_obs.clone(), ctx.pose), &[w_obs]);
        let gxc = g.custom(PosEncOp::new(enc.position_bands, Interval::UNIT, enc.include_raw), &[x_can]);
        Ok(WeightVars { w_obs, x_can, gxc })
    }

    /// Canonical weight field at the refined canonical points.
    fn canonical_stage(&self, g: &Graph, ctx: &SceneContext, wv: &WeightVars, marks: &mut LayerMarks) -> Result<Var> {
        let lat = self.latent_feature(g, None)?;
        let dw = self.config.decoders().delta(g, wv.gxc, lat, marks);
        let ws = g.custom(StatWeightsOp::new(ctx.skeleton)?, &[wv.x_can]);
        let raw = g.add(dw, ws);
        let norm = g.sum_axis(raw, Axis::Cols);
        Ok(g.div(raw, norm))
    }

    /// Composited colors `[R, 3]`, plus the weight-stage values when any
    /// sample survived the pre-pass.
    fn color_stage(
        &self,
        g: &Graph,
        ctx: &SceneContext,
        prep: &PreparedBatch,
        frame: usize,
        query: usize,
        marks: &mut LayerMarks,
    ) -> Result<(Var, Option<WeightVars>)> {
        self.check_frame(frame)?;
        self.check_frame(query)?;
        if prep.parts != self.config.parts {
            return Err(CatError::Invalid(format!("batch has {} parts, model {}", prep.parts, self.config.parts)));
        }
        let r = prep.rays();
        let bg = g.constant(Tensor::row(ctx.background.to_vec()));
        if prep.points() == 0 {
            let zeros = g.constant(Tensor::zeros(&[r, 3]));
            return Ok((g.add(zeros, bg), None));
        }
        let c = &self.config;
        let enc = c.encoding;
        let wv = self.weight_stage(g, ctx, prep, query, marks)?;
        let net = c.radiance();
        let (sigma, z) = net.density(g, wv.gxc, marks);
        let gd = g.constant(encode_batch(&prep.dirs, enc.direction_bands, Interval::UNIT, enc.include_raw));
        let app = g.input(APPEARANCE);
        let l = g.slice_rows(app, frame, frame + 1);
        let rgb = net.color(g, z, gd, l, marks);
        let out = g.custom(AccumulateOp::new(prep.layout.clone()), &[sigma, rgb]);
        let color = g.slice_cols(out, 0, 3);
        let acc = g.slice_cols(out, 3, 4);
        let neg = g.neg(acc);
        let clear = g.add_scalar(neg, 1.0);
        let fill = g.mul(clear, bg);
        Ok((g.add(color, fill), Some(wv)))
    }

    /// The training objective for one batch of rays of frame `frame`.
    pub fn build_loss(
        &self,
        g: &Graph,
        ctx: &SceneContext,
        prep: &PreparedBatch,
        frame: usize,
        targets: &[[f64; 3]],
        objective: &Objective,
    ) -> Result<LossVars> {
        if targets.len() != prep.rays() {
            return Err(CatError::Invalid(format!("{} targets for {} rays", targets.len(), prep.rays())));
        }
        let mut marks = LayerMarks::default();
        let (pred, wv) = self.color_stage(g, ctx, prep, frame, frame, &mut marks)?;
        let truth = g.constant(Tensor::matrix(targets.len(), 3, targets.iter().flatten().copied().collect())?);
        let l_rgb = l_rgb_graph(g, pred, truth);
        let l_nsf = match &wv {
            Some(wv) => {
                let w_can = self.canonical_stage(g, ctx, wv, &mut marks)?;
                l_nsf_graph(g, wv.w_obs, w_can)
            }
            None => g.scalar(0.0),
        };
        let c = &self.config;
        let decor = if c.unique_width >= 2 && c.frames >= 2 {
            decor_graph(g, objective.variant, g.input(PSI_U), c.frames, c.unique_width)
        } else {
            None
        };
        let w = objective.weights;
        let a = g.scale(l_rgb, w.rgb);
        let b = g.scale(l_nsf, w.nsf);
        let mut total = g.add(a, b);
        if let Some(d) = decor {
            let d = g.scale(d, w.decor);
            total = g.add(total, d);
        }
        if let (Some(anchor), true) = (&objective.anchor, c.constant_width > 0) {
            let a = anchor.graph(g, g.input(PSI_C));
            total = g.add(total, a);
        }
        Ok(LossVars { pred, l_rgb, l_nsf, decor, total })
    }

    /// Loss report and gradients for every trainable tensor.
    pub fn loss_and_grad(
        &self,
        ctx: &SceneContext,
        prep: &PreparedBatch,
        frame: usize,
        targets: &[[f64; 3]],
        objective: &Objective,
    ) -> Result<(LossReport, Gradients)> {
        let g = Graph::new();
        let vars = self.build_loss(&g, ctx, prep, frame, targets, objective)?;
        g.eval_all(&self.params)?;
        let scalar = |v: Var| -> Result<f64> { Ok(g.value_ref(v)?.data()[0]) };
        let decor = match vars.decor {
            Some(d) => scalar(d)?,
            None => 0.0,
        };
        let mut report = crate::losses::total(scalar(vars.l_rgb)?, scalar(vars.l_nsf)?, decor, objective.variant, objective.weights)?;
        // includes the anchor term when present
        report.total = scalar(vars.total)?;
        let grads = g.backward(vars.total)?;
        Ok((report, grads))
    }

    /// Colors of the given rays for `frame`, with the frame-unique latent
    /// fused at `query` (normally `frame`). Depths are bin midpoints.
    pub fn render_rays_as(
        &self,
        ctx: &SceneContext,
        frame: usize,
        query: usize,
        rays: &[Option<Ray>],
        samples: usize,
    ) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(rays.len());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for chunk in rays.chunks(RENDER_CHUNK) {
            let depths = ray_depths(chunk, samples, false, &mut rng)?;
            let prep = prepare_batch(ctx, chunk, &depths)?;
            let g = Graph::new();
            let mut marks = LayerMarks::default();
            let (pred, _) = self.color_stage(&g, ctx, &prep, frame, query, &mut marks)?;
            let t = g.eval(&self.params, pred).map_err(|e| marks.explain(e))?;
            out.extend(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(out)
    }

    pub fn render_rays(&self, ctx: &SceneContext, frame: usize, rays: &[Option<Ray>], samples: usize) -> Result<Vec<[f64; 3]>> {
        self.render_rays_as(ctx, frame, frame, rays, samples)
    }

    pub fn render_pixel(
        &self,
        ctx: &SceneContext,
        camera: &Camera,
        col: usize,
        row: usize,
        frame: usize,
        samples: usize,
    ) -> Result<[f64; 3]> {
        let ray = pixel_ray(camera, col, row, &ctx.bounds())?;
        Ok(self.render_rays(ctx, frame, &[ray], samples)?[0])
    }

    pub fn render_image_as(&self, ctx: &SceneContext, camera: &Camera, frame: usize, query: usize, samples: usize) -> Result<Image> {
        let rays = camera_rays(camera, &ctx.bounds())?;
        let colors = self.render_rays_as(ctx, frame, query, &rays, samples)?;
        Image::new(camera.width, camera.height, colors.into_iter().flatten().collect())
    }

    pub fn render_image(&self, ctx: &SceneContext, camera: &Camera, frame: usize, samples: usize) -> Result<Image> {
        self.render_image_as(ctx, camera, frame, frame, samples)
    }

    /// The fused frame-unique latent of frame `frame`.
    pub fn fused_latent(&self, frame: usize) -> Result<Vec<f64>> {
        self.check_frame(frame)?;
        if self.config.unique_width == 0 {
            return Ok(Vec::new());
        }
        self.config.fusion_stack().fuse_values(&self.params, &self.bank()?, frame)
    }

    fn constant_latent(&self) -> Vec<f64> {
        self.params.get(PSI_C).map(|t| t.data().to_vec()).unwrap_or_default()
    }

    /// Corrected weights of frame `frame` at a canonical point.
    pub fn frame_weights(&self, skeleton: &Skeleton, frame: usize, x_can: &Vec3) -> Result<BlendWeights> {
        let fused = self.fused_latent(frame)?;
        let dw = self.config.decoders().delta_weights(&self.params, &self.config.encoding, x_can, &self.constant_latent(), &fused)?;
        deform::corrected_weights(x_can, &dw, skeleton)
    }

    /// The canonical weight field: ψᶜ with a zero frame-unique input.
    pub fn canonical_weights(&self, skeleton: &Skeleton, x_can: &Vec3) -> Result<BlendWeights> {
        let zeros = vec![0.0; self.config.unique_width];
        let dw = self.config.decoders().delta_weights(&self.params, &self.config.encoding, x_can, &self.constant_latent(), &zeros)?;
        deform::canonical_weights(x_can, &dw, skeleton)
    }

    /// Weight-field consistency loss at observation points of one frame.
    pub fn l_nsf_at(&self, ctx: &SceneContext, frame: usize, points: &[Vec3]) -> Result<f64> {
        self.check_frame(frame)?;
        let prep = prepare_points(ctx, points)?;
        if prep.points() == 0 {
            return Ok(0.0);
        }
        let g = Graph::new();
        let mut marks = LayerMarks::default();
        let wv = self.weight_stage(&g, ctx, &prep, frame, &mut marks)?;
        let w_can = self.canonical_stage(&g, ctx, &wv, &mut marks)?;
        let l = l_nsf_graph(&g, wv.w_obs, w_can);
        Ok(g.eval(&self.params, l).map_err(|e| marks.explain(e))?.data()[0])
    }

    /// Parameters of the given names as plain copies (for inspection).
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.config.specs()
    }
}

/// Rays through every pixel centre, row-major.
pub fn camera_rays(camera: &Camera, bounds: &Aabb) -> Result<Vec<Option<Ray>>> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(generate_ray(camera, col as f64 + 0.5, row as f64 + 0.5, bounds)?);
        }
    }
    Ok(rays)
}
