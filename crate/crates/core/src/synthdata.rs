//! Synthetic articulated scenes with analytic ground truth, and the on-disk
//! dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::deform::{Capsule, PoseFrame, Skeleton};
use crate::error::{CatError, Result};
use crate::geometry::{segment_param, Aabb, Rigid, Vec3};
use crate::image::{Image, Image8};
use crate::kv::KeyValues;
use crate::model::SceneContext;
use crate::nn::param_rng;
use crate::render::{pixel_ray, Camera};

pub const DATASET_VERSION: u32 = 1;
pub const MAX_PARTS: usize = 6;
pub const MAX_MUSCLE: f64 = 0.2;
/// Ray-march steps per pixel for ground truth.
pub const MARCH_STEPS: usize = 512;

const PALETTE: [[f64; 3]; MAX_PARTS] =
    [[0.85, 0.25, 0.2], [0.2, 0.45, 0.85], [0.2, 0.7, 0.3], [0.9, 0.7, 0.15], [0.6, 0.3, 0.75], [0.95, 0.6, 0.5]];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub parts: usize,
    /// Training frames.
    pub frames: usize,
    /// Extra frames with unseen poses, appended after the training frames.
    pub novel_frames: usize,
    pub cameras: usize,
    /// The last `test_views` cameras are held out.
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub colors: Vec<[f64; 3]>,
    /// Per-frame stripe phase is drawn from `±texture_amplitude` radians.
    pub texture_amplitude: f64,
    /// Per-frame, per-part radius scale is drawn from `1 ± muscle_amplitude`.
    pub muscle_amplitude: f64,
    pub stripe_frequency: f64,
    /// Largest joint angle, radians.
    pub swing: f64,
    /// Largest root rotation about the vertical axis, radians.
    pub yaw: f64,
    /// Largest horizontal root translation.
    pub travel: f64,
    pub camera_distance: f64,
    pub camera_height: f64,
    /// Focal length in units of the image width.
    pub focal_scale: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            parts: 3,
            frames: 8,
            novel_frames: 0,
            cameras: 3,
            test_views: 1,
            width: 32,
            height: 32,
            seed: 0,
            colors: PALETTE[..3].to_vec(),
            texture_amplitude: 1.5,
            muscle_amplitude: 0.15,
            stripe_frequency: 12.0,
            swing: 0.6,
            yaw: 0.35,
            travel: 0.0,
            camera_distance: 3.0,
            camera_height: 0.4,
            focal_scale: 1.2,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.parts > MAX_PARTS {
            return Err(CatError::Invalid(format!("parts must be in 1..={MAX_PARTS}, got {}", self.parts)));
        }
        if self.frames == 0 || self.cameras == 0 || self.width == 0 || self.height == 0 {
            return Err(CatError::Invalid("frames, cameras and image size must be positive".into()));
        }
        if self.test_views >= self.cameras && self.cameras > 1 {
            return Err(CatError::Invalid("at least one camera must remain for training".into()));
        }
        if self.colors.len() != self.parts {
            return Err(CatError::Invalid(format!("{} colors for {} parts", self.colors.len(), self.parts)));
        }
        if !(0.0..=MAX_MUSCLE).contains(&self.muscle_amplitude) {
            return Err(CatError::OutOfRange(format!("muscle amplitude {} exceeds {MAX_MUSCLE}", self.muscle_amplitude)));
        }
        if !(self.texture_amplitude >= 0.0) || !(self.swing >= 0.0) || !(self.yaw >= 0.0) || !(self.travel >= 0.0) {
            return Err(CatError::Invalid("amplitudes must be nonnegative".into()));
        }
        if !(self.camera_distance > 1.8) || !(self.focal_scale > 0.0) {
            return Err(CatError::Invalid("cameras must sit outside the scene box with positive focal length".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.frames + self.novel_frames
    }

    /// Reads `scene.*`-free keys (`parts`, `frames`, ...) over the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut s = Self::default();
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.get($key)? {
                    $slot = v;
                }
            };
        }
        field!("parts", s.parts);
        field!("frames", s.frames);
        field!("novel_frames", s.novel_frames);
        field!("cameras", s.cameras);
        field!("test_views", s.test_views);
        field!("width", s.width);
        field!("height", s.height);
        field!("seed", s.seed);
        field!("texture_amplitude", s.texture_amplitude);
        field!("muscle_amplitude", s.muscle_amplitude);
        field!("stripe_frequency", s.stripe_frequency);
        field!("swing", s.swing);
        field!("yaw", s.yaw);
        field!("travel", s.travel);
        field!("camera_distance", s.camera_distance);
        field!("camera_height", s.camera_height);
        field!("focal_scale", s.focal_scale);
        if let Some(bg) = kv.get_list::<f64>("background")? {
            s.background = triple(&bg, "background")?;
        }
        s.colors = PALETTE[..s.parts.min(MAX_PARTS)].to_vec();
        if let Some(c) = kv.get_list::<f64>("colors")? {
            if c.len() % 3 != 0 {
                return Err(CatError::Invalid("colors must be RGB triples".into()));
            }
            s.colors = c.chunks(3).map(|t| [t[0], t[1], t[2]]).collect();
        }
        s.validate()?;
        Ok(s)
    }
}

fn triple(v: &[f64], what: &str) -> Result<[f64; 3]> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(CatError::Invalid(format!("{what} needs 3 values, got {}", v.len()))),
    }
}

/// Per-part rest geometry: capsule, joint pivot and swing axis.
fn rest_part(k: usize) -> (Capsule, Vec3, Vec3) {
    let v = Vec3::new;
    match k {
        0 => (Capsule::new(v(0.0, -0.45, 0.0), v(0.0, 0.3, 0.0), 0.2), v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0)),
        1 => (Capsule::new(v(0.22, 0.25, 0.0), v(0.7, 0.25, 0.0), 0.09), v(0.22, 0.25, 0.0), v(0.0, 0.0, 1.0)),
        2 => (Capsule::new(v(-0.22, 0.25, 0.0), v(-0.7, 0.25, 0.0), 0.09), v(-0.22, 0.25, 0.0), v(0.0, 0.0, -1.0)),
        3 => (Capsule::new(v(0.1, -0.5, 0.0), v(0.12, -0.85, 0.0), 0.08), v(0.1, -0.5, 0.0), v(1.0, 0.0, 0.0)),
        4 => (Capsule::new(v(-0.1, -0.5, 0.0), v(-0.12, -0.85, 0.0), 0.08), v(-0.1, -0.5, 0.0), v(1.0, 0.0, 0.0)),
        _ => (Capsule::new(v(0.0, 0.45, 0.0), v(0.0, 0.55, 0.0), 0.11), v(0.0, 0.33, 0.0), v(1.0, 0.0, 0.0)),
    }
}

/// The capsule skeleton family: torso, arms, legs and head, in that order.
pub fn default_skeleton(parts: usize) -> Result<Skeleton> {
    if parts == 0 || parts > MAX_PARTS {
        return Err(CatError::Invalid(format!("parts must be in 1..={MAX_PARTS}, got {parts}")));
    }
    let caps = (0..parts).map(|k| rest_part(k).0).collect();
    let parents = (0..parts).map(|k| (k > 0).then_some(0)).collect();
    Skeleton::new(caps, parents)
}

/// Root yaw about the vertical axis and horizontal shift, then each child
/// swings about its joint.
pub fn pose_from_angles(frame: usize, yaw: f64, shift: [f64; 2], angles: &[f64]) -> Result<PoseFrame> {
    let root = Rigid::from_translation(Vec3::new(shift[0], 0.0, shift[1])).compose(&Rigid::from_axis_angle(Vec3::y(), yaw));
    let mut transforms = vec![root];
    for (k, angle) in angles.iter().enumerate() {
        let (_, pivot, axis) = rest_part(k + 1);
        transforms.push(root.compose(&Rigid::about_pivot(axis, *angle, pivot)));
    }
    PoseFrame::new(frame, transforms)
}

/// Per-frame appearance: stripe phase and per-part radius scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLook {
    pub phase: f64,
    pub radius_scale: Vec<f64>,
}

/// Skeleton, poses, appearance and cameras of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub skeleton: Skeleton,
    pub poses: Vec<PoseFrame>,
    pub looks: Vec<FrameLook>,
    pub cameras: Vec<Camera>,
    inverses: Vec<Vec<Rigid>>,
}

impl Scene {
    /// Assembles a scene from explicit poses and looks.
    pub fn from_parts(
        spec: SceneSpec,
        skeleton: Skeleton,
        poses: Vec<PoseFrame>,
        looks: Vec<FrameLook>,
        cameras: Vec<Camera>,
    ) -> Result<Self> {
        if poses.len() != looks.len() {
            return Err(CatError::Invalid(format!("{} poses but {} looks", poses.len(), looks.len())));
        }
        for (i, (p, l)) in poses.iter().zip(&looks).enumerate() {
            if p.len() != skeleton.len() || l.radius_scale.len() != skeleton.len() {
                return Err(CatError::Invalid(format!("frame {i} does not match the {}-part skeleton", skeleton.len())));
            }
        }
        if spec.colors.len() != skeleton.len() {
            return Err(CatError::Invalid("one color per part is required".into()));
        }
        let inverses = poses.iter().map(|p| p.transforms.iter().map(Rigid::inverse).collect()).collect();
        let scene = Self { spec, skeleton, poses, looks, cameras, inverses };
        scene.check_inside()?;
        Ok(scene)
    }

    fn check_inside(&self) -> Result<()> {
        let bounds = Aabb::default();
        for (i, (pose, look)) in self.poses.iter().zip(&self.looks).enumerate() {
            for (k, (cap, g)) in self.skeleton.parts().iter().zip(&pose.transforms).enumerate() {
                let r = cap.radius * look.radius_scale[k];
                for end in [g.apply(&cap.a), g.apply(&cap.b)] {
                    if !bounds.contains(&end, -r) {
                        return Err(CatError::OutOfRange(format!("frame {i}: part {k} leaves the scene box")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    /// Color of the surface point at `p` in frame `frame`, or `None` when `p`
    /// is empty space. The nearest (most interior) part wins.
    pub fn query(&self, p: &Vec3, frame: usize) -> Option<[f64; 3]> {
        let look = &self.looks[frame];
        let mut best: Option<(f64, usize, Vec3)> = None;
        for (k, cap) in self.skeleton.parts().iter().enumerate() {
            let q = self.inverses[frame][k].apply(p);
            let sdf = Capsule { radius: cap.radius * look.radius_scale[k], ..*cap }.sdf(&q);
            if sdf < 0.0 && best.is_none_or(|(d, _, _)| sdf < d) {
                best = Some((sdf, k, q));
            }
        }
        let (_, k, q) = best?;
        let cap = &self.skeleton.parts()[k];
        let s = segment_param(&q, &cap.a, &cap.b) * (cap.b - cap.a).norm();
        let stripe = 0.5 + 0.5 * (self.spec.stripe_frequency * s + look.phase).sin();
        let shade = 0.55 + 0.45 * stripe;
        let base = self.spec.colors[k];
        Some([base[0] * shade, base[1] * shade, base[2] * shade])
    }

    pub fn occupied(&self, p: &Vec3, frame: usize) -> bool {
        self.query(p, frame).is_some()
    }

    pub fn context(&self, frame: usize) -> SceneContext<'_> {
        SceneContext { skeleton: &self.skeleton, pose: &self.poses[frame], background: self.spec.background }
    }
}

fn ring_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let focal = spec.focal_scale * spec.width as f64;
    (0..spec.cameras)
        .map(|j| {
            let angle = std::f64::consts::TAU * j as f64 / spec.cameras as f64;
            let eye = Vec3::new(spec.camera_distance * angle.sin(), spec.camera_height, spec.camera_distance * angle.cos());
            Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, spec.width, spec.height)
        })
        .collect()
}

/// Deterministic scene from the spec's seed.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let skeleton = default_skeleton(spec.parts)?;
    let total = spec.total_frames();
    let mut pose_rng = param_rng(spec.seed, "scene.pose");
    let mut tex_rng = param_rng(spec.seed, "scene.texture");
    let mut muscle_rng = param_rng(spec.seed, "scene.muscle");
    let mut poses = Vec::with_capacity(total);
    let mut looks = Vec::with_capacity(total);
    for i in 0..total {
        let yaw = spec.yaw * pose_rng.gen_range(-1.0..1.0);
        let angles: Vec<f64> = (1..spec.parts).map(|_| spec.swing * pose_rng.gen_range(-1.0..1.0)).collect();
        let shift = [spec.travel * pose_rng.gen_range(-1.0..1.0), spec.travel * pose_rng.gen_range(-1.0..1.0)];
        poses.push(pose_from_angles(i, yaw, shift, &angles)?);
        let phase = spec.texture_amplitude * tex_rng.gen_range(-1.0..1.0);
        let radius_scale = (0..spec.parts).map(|_| 1.0 + spec.muscle_amplitude * muscle_rng.gen_range(-1.0..1.0)).collect();
        looks.push(FrameLook { phase, radius_scale });
    }
    Scene::from_parts(spec.clone(), skeleton, poses, looks, ring_cameras(spec)?)
}

/// Marches every pixel ray in [`MARCH_STEPS`] equal steps through the scene
/// box and shades the first occupied sample.
pub fn rasterize_gt(scene: &Scene, camera: &Camera, frame: usize) -> Result<Image> {
    if frame >= scene.frames() {
        return Err(CatError::OutOfRange(format!("frame {frame} of {}", scene.frames())));
    }
    let bounds = Aabb::default();
    let mut img = Image::filled(camera.width, camera.height, scene.spec.background);
    for row in 0..camera.height {
        for col in 0..camera.width {
            let Some(ray) = pixel_ray(camera, col, row, &bounds)? else { continue };
            let step = (ray.far - ray.near) / MARCH_STEPS as f64;
            for j in 0..MARCH_STEPS {
                let p = ray.at(ray.near + (j as f64 + 0.5) * step);
                if let Some(c) = scene.query(&p, frame) {
                    img.set_pixel(col, row, c);
                    break;
                }
            }
        }
    }
    Ok(img)
}

/// Cameras, poses, ground-truth images and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub cameras: Vec<Camera>,
    pub skeleton: Skeleton,
    pub poses: Vec<PoseFrame>,
    /// `images[view][frame]`.
    pub images: Vec<Vec<Image8>>,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
    pub train_frames: Vec<usize>,
    pub novel_frames: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Novel,
}

impl std::str::FromStr for Split {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "novel" => Ok(Split::Novel),
            _ => Err(CatError::Unknown { kind: "split", value: s.to_string() }),
        }
    }
}

impl Dataset {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let spec = &scene.spec;
        let n_test = if spec.cameras > 1 { spec.test_views } else { 0 };
        let images = scene
            .cameras
            .iter()
            .map(|cam| (0..scene.frames()).map(|f| Ok(rasterize_gt(scene, cam, f)?.quantize())).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            width: spec.width,
            height: spec.height,
            background: spec.background,
            cameras: scene.cameras.clone(),
            skeleton: scene.skeleton.clone(),
            poses: scene.poses.clone(),
            images,
            train_views: (0..spec.cameras - n_test).collect(),
            test_views: (spec.cameras - n_test..spec.cameras).collect(),
            train_frames: (0..spec.frames).collect(),
            novel_frames: (spec.frames..spec.total_frames()).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        Self::from_scene(&build_scene(spec)?)
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    pub fn parts(&self) -> usize {
        self.skeleton.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(CatError::Invalid("dataset has no cameras".into()));
        }
        if self.train_views.iter().any(|v| self.test_views.contains(v)) {
            return Err(CatError::Invalid("train and test views overlap".into()));
        }
        let n = self.frames();
        let views = self.cameras.len();
        if self.train_views.iter().chain(&self.test_views).any(|v| *v >= views)
            || self.train_frames.iter().chain(&self.novel_frames).any(|f| *f >= n)
        {
            return Err(CatError::OutOfRange("split refers to a missing view or frame".into()));
        }
        if self.images.len() != views || self.images.iter().any(|v| v.len() != n) {
            return Err(CatError::Invalid("image grid does not match views x frames".into()));
        }
        for (v, row) in self.images.iter().enumerate() {
            for (f, img) in row.iter().enumerate() {
                if img.width != self.width || img.height != self.height {
                    return Err(CatError::Invalid(format!("image view {v} frame {f} is {}x{}", img.width, img.height)));
                }
            }
        }
        for p in &self.poses {
            if p.len() != self.skeleton.len() {
                return Err(CatError::Invalid(format!("pose {} has {} parts", p.frame, p.len())));
            }
        }
        Ok(())
    }

    pub fn context(&self, frame: usize) -> SceneContext<'_> {
        SceneContext { skeleton: &self.skeleton, pose: &self.poses[frame], background: self.background }
    }

    pub fn image(&self, view: usize, frame: usize) -> &Image8 {
        &self.images[view][frame]
    }

    pub fn views(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_views,
            Split::Test | Split::Novel => &self.test_views,
        }
    }

    pub fn split_frames(&self, split: Split) -> &[usize] {
        match split {
            Split::Train | Split::Test => &self.train_frames,
            Split::Novel => &self.novel_frames,
        }
    }

    /// Pixels over all training (view, frame) pairs.
    pub fn train_pixels(&self) -> usize {
        self.train_views.len() * self.train_frames.len() * self.width * self.height
    }
}

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str, path: &Path) -> Result<Vec<f64>> {
    line.split_whitespace().map(|s| s.parse::<f64>().map_err(|_| CatError::format(path, format!("bad number `{s}`")))).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CatError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CatError::io(path, e))
}

pub fn pose_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("poses").join(format!("frame_{frame:04}"))
}

pub fn image_path(dir: &Path, view: usize, frame: usize) -> PathBuf {
    dir.join("images").join(format!("view_{view:02}_frame_{frame:04}.ppm"))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    for sub in ["poses", "images"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| CatError::io(&p, e))?;
    }
    let mut meta = KeyValues::new();
    meta.set("version", DATASET_VERSION);
    meta.set("width", ds.width);
    meta.set("height", ds.height);
    meta.set("views", ds.cameras.len());
    meta.set("frames", ds.frames());
    meta.set("parts", ds.parts());
    meta.set("background", fmt_floats(&ds.background));
    meta.set_list("train_views", &ds.train_views);
    meta.set_list("test_views", &ds.test_views);
    meta.set_list("train_frames", &ds.train_frames);
    meta.set_list("novel_frames", &ds.novel_frames);
    write_text(&dir.join("meta"), &meta.render())?;

    let cams: String = ds.cameras.iter().map(|c| fmt_floats(&c.to_record()) + "\n").collect();
    write_text(&dir.join("cameras"), &cams)?;

    let skel: String = ds
        .skeleton
        .parts()
        .iter()
        .zip(ds.skeleton.parents())
        .map(|(c, p)| {
            let parent = p.map_or(-1, |p| p as i64);
            let vals = [c.a.x, c.a.y, c.a.z, c.b.x, c.b.y, c.b.z, c.radius];
            format!("{parent} {}\n", fmt_floats(&vals))
        })
        .collect();
    write_text(&dir.join("skeleton"), &skel)?;

    for pose in &ds.poses {
        let text: String = pose.transforms.iter().map(|g| fmt_floats(&g.to_row_major()) + "\n").collect();
        write_text(&pose_path(dir, pose.frame), &text)?;
    }
    for (v, row) in ds.images.iter().enumerate() {
        for (f, img) in row.iter().enumerate() {
            img.write_ppm(&image_path(dir, v, f))?;
        }
    }
    Ok(())
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty())
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = read_text(path)?;
    let mut parts = Vec::new();
    let mut parents = Vec::new();
    for line in data_lines(&text) {
        let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let parent: i64 = head.parse().map_err(|_| CatError::format(path, format!("bad parent `{head}`")))?;
        let v = parse_floats(rest, path)?;
        if v.len() != 7 {
            return Err(CatError::format(path, format!("skeleton record needs 8 fields, got {}", v.len() + 1)));
        }
        parents.push(usize::try_from(parent).ok());
        parts.push(Capsule::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), v[6]));
    }
    Skeleton::new(parts, parents).map_err(|e| CatError::format(path, e.to_string()))
}

pub fn read_pose(path: &Path, frame: usize) -> Result<PoseFrame> {
    let text = read_text(path)?;
    let transforms = data_lines(&text)
        .map(|l| Rigid::from_row_major(&parse_floats(l, path)?).map_err(|e| CatError::format(path, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    PoseFrame::new(frame, transforms).map_err(|e| CatError::format(path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let meta = KeyValues::parse(&read_text(&meta_path)?).map_err(|e| CatError::format(&meta_path, e.to_string()))?;
    let need = |k: &str| -> Result<usize> { meta.require(k).map_err(|e| CatError::format(&meta_path, e.to_string())) };
    let version: u32 = meta.require("version").map_err(|e| CatError::format(&meta_path, e.to_string()))?;
    if version != DATASET_VERSION {
        return Err(CatError::Version { path: meta_path, expected: DATASET_VERSION, found: version });
    }
    let (width, height, views, frames, parts) = (need("width")?, need("height")?, need("views")?, need("frames")?, need("parts")?);
    let list = |k: &str| -> Result<Vec<usize>> {
        meta.get_list(k).map_err(|e| CatError::format(&meta_path, e.to_string())).map(Option::unwrap_or_default)
    };
    let bg = meta.get_list::<f64>("background").map_err(|e| CatError::format(&meta_path, e.to_string()))?.unwrap_or_else(|| vec![1.0; 3]);
    let background = triple(&bg, "background").map_err(|e| CatError::format(&meta_path, e.to_string()))?;

    let cam_path = dir.join("cameras");
    let cams_text = read_text(&cam_path)?;
    let cameras = data_lines(&cams_text)
        .map(|l| Camera::from_record(&parse_floats(l, &cam_path)?, width, height).map_err(|e| CatError::format(&cam_path, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if cameras.len() != views {
        return Err(CatError::format(&cam_path, format!("{} cameras, meta declares {views}", cameras.len())));
    }
    let skeleton = read_skeleton(&dir.join("skeleton"))?;
    if skeleton.len() != parts {
        return Err(CatError::format(dir.join("skeleton"), format!("{} parts, meta declares {parts}", skeleton.len())));
    }
    let poses = (0..frames).map(|f| read_pose(&pose_path(dir, f), f)).collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(views);
    for v in 0..views {
        let mut row = Vec::with_capacity(frames);
        for f in 0..frames {
            let path = image_path(dir, v, f);
            let img = Image8::read_ppm(&path)?;
            if img.width != width || img.height != height {
                return Err(CatError::format(&path, format!("image is {}x{}, expected {width}x{height}", img.width, img.height)));
            }
            row.push(img);
        }
        images.push(row);
    }
    let ds = Dataset {
        width,
        height,
        background,
        cameras,
        skeleton,
        poses,
        images,
        train_views: list("train_views")?,
        test_views: list("test_views")?,
        train_frames: list("train_frames")?,
        novel_frames: list("novel_frames")?,
    };
    ds.validate().map_err(|e| CatError::format(&meta_path, e.to_string()))?;
    Ok(ds)
}
