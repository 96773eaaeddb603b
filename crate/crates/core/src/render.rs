//! Pinhole cameras, ray sampling and volumetric accumulation.

use std::rc::Rc;

use numgrad::{CustomOp, GradError, Tensor};
use rand::Rng;

use crate::error::{CatError, Result};
use crate::geometry::{Aabb, Mat3, Rigid, Vec3};

/// Pinhole camera; `extrinsics` maps world points into the camera frame
/// (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Rigid,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsics: Rigid, width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, extrinsics, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CatError::Invalid(format!("focal lengths must be positive, got {} and {}", self.fx, self.fy)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CatError::Invalid("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CatError::Invalid("image size must be positive".into()));
        }
        self.extrinsics.validate()
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = (target - eye).normalize();
        let down = -(up - z * up.dot(&z));
        if down.norm() < 1e-9 {
            return Err(CatError::Degenerate("up vector is parallel to the view direction".into()));
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let extrinsics = Rigid::new(rotation, -(rotation * eye));
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, extrinsics, width, height)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.extrinsics.inverse().translation
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.extrinsics.apply(p);
        (c.z > 1e-12).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// `fx fy cx cy` followed by the row-major `[R | t]`.
    pub fn to_record(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        out[..4].copy_from_slice(&[self.fx, self.fy, self.cx, self.cy]);
        out[4..].copy_from_slice(&self.extrinsics.to_row_major());
        out
    }

    pub fn from_record(v: &[f64], width: usize, height: usize) -> Result<Self> {
        if v.len() != 16 {
            return Err(CatError::Invalid(format!("camera record needs 16 values, got {}", v.len())));
        }
        Self::new(v[0], v[1], v[2], v[3], Rigid::from_row_major(&v[4..])?, width, height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, h: f64) -> Vec3 {
        self.origin + self.dir * h
    }
}

/// Back-projects continuous pixel coordinates `(u, v)`; the centre of pixel
/// `(col, row)` is `(col + 0.5, row + 0.5)`. Returns `None` when the ray
/// misses the scene box.
pub fn generate_ray(camera: &Camera, u: f64, v: f64, bounds: &Aabb) -> Result<Option<Ray>> {
    if !(u >= 0.0 && u < camera.width as f64 && v >= 0.0 && v < camera.height as f64) {
        return Err(CatError::OutOfRange(format!("pixel ({u}, {v}) outside {}x{} image", camera.width, camera.height)));
    }
    let local = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    let dir = (camera.extrinsics.rotation.transpose() * local).normalize();
    let origin = camera.center();
    Ok(bounds.intersect(&origin, &dir).map(|(near, far)| Ray { origin, dir, near, far }))
}

pub fn pixel_ray(camera: &Camera, col: usize, row: usize, bounds: &Aabb) -> Result<Option<Ray>> {
    generate_ray(camera, col as f64 + 0.5, row as f64 + 0.5, bounds)
}

/// `m` depths in `[near, far]`: one uniform draw per equal bin when
/// `stratified`, bin midpoints otherwise.
pub fn sample_depths<R: Rng + ?Sized>(ray: &Ray, m: usize, stratified: bool, rng: &mut R) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(CatError::Invalid(format!("need at least 2 samples per ray, got {m}")));
    }
    if !(ray.near < ray.far) {
        return Err(CatError::Invalid(format!("ray bounds [{}, {}] are empty", ray.near, ray.far)));
    }
    let step = (ray.far - ray.near) / m as f64;
    Ok((0..m)
        .map(|p| {
            let lo = ray.near + step * p as f64;
            if stratified {
                lo + step * rng.gen::<f64>()
            } else {
                lo + 0.5 * step
            }
        })
        .collect())
}

/// Gaps between consecutive depths; the last gap runs to `far`.
pub fn depth_gaps(depths: &[f64], far: f64) -> Vec<f64> {
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = depths.last() {
        out.push(far - last);
    }
    out
}

/// Quadrature points of one ray with their densities and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SampleSet {
    pub fn new(depths: Vec<f64>, far: f64, sigma: Vec<f64>, color: Vec<[f64; 3]>) -> Result<Self> {
        let deltas = depth_gaps(&depths, far);
        let set = Self { depths, deltas, sigma, color };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.depths.len();
        if self.deltas.len() != m || self.sigma.len() != m || self.color.len() != m {
            return Err(CatError::Invalid("sample set fields have different lengths".into()));
        }
        if self.depths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CatError::Invalid("depths are not strictly ascending".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(CatError::Invalid("gaps must be positive".into()));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(CatError::Invalid("densities must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accumulation {
    pub rgb: [f64; 3],
    pub acc: f64,
    pub weights: Vec<f64>,
}

/// `C = Σ_p T_p (1 − e^{−σ_p δ_p}) c_p` with `T_p = e^{−Σ_{q<p} σ_q δ_q}`.
pub fn accumulate(samples: &SampleSet) -> Accumulation {
    let mut rgb = [0.0; 3];
    let mut acc = 0.0;
    let mut weights = Vec::with_capacity(samples.sigma.len());
    let mut trans = 1.0;
    for p in 0..samples.sigma.len() {
        let decay = (-samples.sigma[p] * samples.deltas[p]).exp();
        let w = trans * (1.0 - decay);
        for (c, v) in rgb.iter_mut().zip(samples.color[p]) {
            *c += w * v;
        }
        acc += w;
        weights.push(w);
        trans *= decay;
    }
    Accumulation { rgb, acc, weights }
}

/// One quadrature slot: the row of the density/color inputs it reads (or
/// `None` for empty space) and its gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub point: Option<usize>,
    pub delta: f64,
}

/// Graph op: accumulate per-ray slots from `σ [P,1]` and `c [P,3]` into
/// `[R, 4]` rows of `(r, g, b, acc)`.
pub struct AccumulateOp {
    rays: Vec<Vec<Slot>>,
}

impl AccumulateOp {
    pub fn new(rays: Vec<Vec<Slot>>) -> Rc<Self> {
        Rc::new(Self { rays })
    }

    pub fn rays(&self) -> usize {
        self.rays.len()
    }

    fn check(&self, sigma: &Tensor, color: &Tensor) -> Result<(), GradError> {
        let p = sigma.rows();
        if sigma.cols() != 1 || color.rows() != p || color.cols() != 3 {
            return Err(GradError::Shape {
                op: "accumulate".into(),
                detail: format!("sigma {:?} and color {:?}", sigma.shape(), color.shape()),
            });
        }
        if let Some(bad) = self.rays.iter().flatten().filter_map(|s| s.point).find(|&i| i >= p) {
            return Err(GradError::Shape { op: "accumulate".into(), detail: format!("slot reads point {bad} of {p}") });
        }
        Ok(())
    }
}

impl CustomOp for AccumulateOp {
    fn name(&self) -> &str {
        "accumulate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        let (sigma, color) = (inputs[0], inputs[1]);
        self.check(sigma, color)?;
        let (s, c) = (sigma.data(), color.data());
        let mut out = Vec::with_capacity(self.rays.len() * 4);
        for slots in &self.rays {
            let mut acc = [0.0; 4];
            let mut trans = 1.0;
            for slot in slots {
                let Some(i) = slot.point else { continue };
                let decay = (-s[i] * slot.delta).exp();
                let w = trans * (1.0 - decay);
                for ch in 0..3 {
                    acc[ch] += w * c[i * 3 + ch];
                }
                acc[3] += w;
                trans *= decay;
            }
            out.extend_from_slice(&acc);
        }
        Tensor::matrix(self.rays.len(), 4, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        wants: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>, GradError> {
        let (sigma, color) = (inputs[0], inputs[1]);
        let (s, c) = (sigma.data(), color.data());
        let mut gs = vec![0.0; s.len()];
        let mut gc = vec![0.0; c.len()];
        let mut weights = Vec::new();
        let mut after = Vec::new();
        for (r, slots) in self.rays.iter().enumerate() {
            let go = &grad_output[r * 4..r * 4 + 4];
            let pts: Vec<(usize, f64)> = slots.iter().filter_map(|sl| sl.point.map(|i| (i, sl.delta))).collect();
            // forward pass: per-point weight and transmittance after the point
            weights.clear();
            after.clear();
            let mut trans = 1.0;
            for &(i, delta) in &pts {
                let decay = (-s[i] * delta).exp();
                weights.push(trans * (1.0 - decay));
                trans *= decay;
                after.push(trans);
            }
            // ∂C/∂σ_j = δ_j (T_{j+1} ĉ_j − Σ_{p>j} w_p ĉ_p), with ĉ = (c, 1)
            let mut tail = 0.0;
            for (n, &(i, delta)) in pts.iter().enumerate().rev() {
                let chat = go[0] * c[i * 3] + go[1] * c[i * 3 + 1] + go[2] * c[i * 3 + 2] + go[3];
                gs[i] += delta * (after[n] * chat - tail);
                tail += weights[n] * chat;
                for ch in 0..3 {
                    gc[i * 3 + ch] += weights[n] * go[ch];
                }
            }
        }
        Ok(vec![wants[0].then_some(gs), wants[1].then_some(gc)])
    }
}
