//! Skeleton, blend weights and the canonical/observation mapping.

use std::rc::Rc;

use numgrad::{CustomOp, GradError, Tensor};

use crate::error::{CatError, Result};
use crate::geometry::{segment_param, Mat3, Rigid, Vec3};

/// How many parts share weight at a point.
pub const NEAREST_PARTS: usize = 3;
/// Softening of the inverse-distance weights, in scene units.
pub const DISTANCE_EPS: f64 = 1e-2;
/// Surface distance at which the background weight reaches one half.
pub const BACKGROUND_MARGIN: f64 = 0.15;
pub const BACKGROUND_SOFTNESS: f64 = 0.03;

/// Inverse-map iteration budget and acceptance threshold.
pub const INVERSE_ITERATIONS: usize = 10;
pub const INVERSE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vec3, b: Vec3, radius: f64) -> Self {
        Self { a, b, radius }
    }

    /// Signed distance to the capsule surface.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let t = segment_param(p, &self.a, &self.b);
        (p - (self.a + (self.b - self.a) * t)).norm() - self.radius
    }

    pub fn transformed(&self, g: &Rigid) -> Self {
        Self { a: g.apply(&self.a), b: g.apply(&self.b), radius: self.radius }
    }
}

/// K capsule parts in the canonical rest pose, arranged as a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parts: Vec<Capsule>,
    parents: Vec<Option<usize>>,
}

impl Skeleton {
    pub fn new(parts: Vec<Capsule>, parents: Vec<Option<usize>>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CatError::Invalid("skeleton needs at least one part".into()));
        }
        if parents.len() != parts.len() {
            return Err(CatError::Invalid(format!("{} parts but {} parent entries", parts.len(), parents.len())));
        }
        for (k, c) in parts.iter().enumerate() {
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return Err(CatError::Invalid(format!("part {k} has radius {}", c.radius)));
            }
            if !c.a.iter().chain(c.b.iter()).all(|v| v.is_finite()) {
                return Err(CatError::Invalid(format!("part {k} has non-finite endpoints")));
            }
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(CatError::Invalid(format!("part graph must have exactly one root, found {roots}")));
        }
        for k in 0..parts.len() {
            // walking up from any part must reach the root within K hops
            let mut cur = k;
            for hop in 0..=parts.len() {
                match parents[cur] {
                    None => break,
                    Some(p) if p >= parts.len() => return Err(CatError::Invalid(format!("part {cur} has parent {p} out of range"))),
                    Some(p) => cur = p,
                }
                if hop == parts.len() {
                    return Err(CatError::Invalid(format!("part graph has a cycle through part {k}")));
                }
            }
        }
        Ok(Self { parts, parents })
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn parts(&self) -> &[Capsule] {
        &self.parts
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Capsules moved into a frame's observation space.
    pub fn posed(&self, pose: &PoseFrame) -> Result<Skeleton> {
        pose.check_parts(self.len())?;
        let parts = self.parts.iter().zip(&pose.transforms).map(|(c, g)| c.transformed(g)).collect();
        Ok(Skeleton { parts, parents: self.parents.clone() })
    }

    fn check_capsules(&self) -> Result<()> {
        for (k, c) in self.parts.iter().enumerate() {
            if (c.b - c.a).norm() < 1e-12 {
                return Err(CatError::Degenerate(format!("part {k} is a zero-length capsule")));
            }
        }
        Ok(())
    }
}

/// Per-frame part transforms mapping canonical part frames to observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame: usize,
    pub transforms: Vec<Rigid>,
}

impl PoseFrame {
    pub fn new(frame: usize, transforms: Vec<Rigid>) -> Result<Self> {
        for (k, g) in transforms.iter().enumerate() {
            g.validate().map_err(|e| CatError::Invalid(format!("frame {frame} part {k}: {e}")))?;
        }
        Ok(Self { frame, transforms })
    }

    pub fn identity(frame: usize, parts: usize) -> Self {
        Self { frame, transforms: vec![Rigid::identity(); parts] }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    fn check_parts(&self, k: usize) -> Result<()> {
        if self.transforms.len() != k {
            return Err(CatError::Invalid(format!(
                "pose for frame {} has {} transforms, skeleton has {k} parts",
                self.frame,
                self.transforms.len()
            )));
        }
        Ok(())
    }
}

/// K part weights followed by the background weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights(Vec<f64>);

impl BlendWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 2 {
            return Err(CatError::Invalid("blend weights need at least one part and the background".into()));
        }
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(CatError::Invalid(format!("weights {w:?} are not on the simplex")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn parts(&self) -> usize {
        self.0.len() - 1
    }

    pub fn background(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn sigmoid(x: f64) -> f64 {
    numgrad::kernels::sigmoid(x)
}

/// Weights and, on request, their 3-column Jacobian with respect to the point.
fn weights_and_jacobian(x: &Vec3, skeleton: &Skeleton, jac: Option<&mut [f64]>) -> Vec<f64> {
    let k = skeleton.len();
    let mut s = Vec::with_capacity(k);
    let mut ds = Vec::with_capacity(k);
    for c in &skeleton.parts {
        let t = segment_param(x, &c.a, &c.b);
        let off = x - (c.a + (c.b - c.a) * t);
        let dist = off.norm();
        if dist > c.radius {
            s.push(dist - c.radius);
            ds.push(off / dist);
        } else {
            s.push(0.0);
            ds.push(Vec3::zeros());
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let chosen = &order[..k.min(NEAREST_PARTS)];
    let nearest = order[0];

    let u: Vec<f64> = chosen.iter().map(|&i| 1.0 / (s[i] + DISTANCE_EPS)).collect();
    let total: f64 = u.iter().sum();
    let b = sigmoid((s[nearest] - BACKGROUND_MARGIN) / BACKGROUND_SOFTNESS);

    let mut w = vec![0.0; k + 1];
    for (n, &i) in chosen.iter().enumerate() {
        w[i] = (1.0 - b) * u[n] / total;
    }
    w[k] = b;

    if let Some(jac) = jac {
        jac.iter_mut().for_each(|v| *v = 0.0);
        let db = ds[nearest] * (b * (1.0 - b) / BACKGROUND_SOFTNESS);
        let du: Vec<Vec3> = chosen.iter().zip(&u).map(|(&i, ui)| ds[i] * (-ui * ui)).collect();
        let dtotal: Vec3 = du.iter().sum();
        for (n, &i) in chosen.iter().enumerate() {
            let wh = u[n] / total;
            let dwh = (du[n] - dtotal * wh) / total;
            let d = dwh * (1.0 - b) - db * wh;
            jac[i * 3..i * 3 + 3].copy_from_slice(d.as_slice());
        }
        jac[k * 3..k * 3 + 3].copy_from_slice(db.as_slice());
    }
    w
}

/// Inverse surface-distance weights over the nearest parts, with a background
/// slot that takes over beyond [`BACKGROUND_MARGIN`].
pub fn statistical_weights(x: &Vec3, skeleton: &Skeleton) -> Result<BlendWeights> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(CatError::Invalid("non-finite point".into()));
    }
    skeleton.check_capsules()?;
    Ok(BlendWeights(weights_and_jacobian(x, skeleton, None)))
}

/// `normalize(ΔW + w_s)`.
pub fn corrected_weights(x: &Vec3, delta: &[f64], skeleton: &Skeleton) -> Result<BlendWeights> {
    let ws = statistical_weights(x, skeleton)?;
    combine_weights(delta, ws.as_slice())
}

/// The normalization step of the correction, shared with the graph path.
pub fn combine_weights(delta: &[f64], ws: &[f64]) -> Result<BlendWeights> {
    if delta.len() != ws.len() {
        return Err(CatError::Invalid(format!("ΔW has width {}, expected {}", delta.len(), ws.len())));
    }
    if delta.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(CatError::Invalid("ΔW must be finite and strictly positive".into()));
    }
    let raw: Vec<f64> = delta.iter().zip(ws).map(|(d, s)| d + s).collect();
    let total: f64 = raw.iter().sum();
    Ok(BlendWeights(raw.into_iter().map(|v| v / total).collect()))
}

/// Canonical weight field: the correction evaluated with the rest-pose latent
/// pathway, whose ΔW the caller supplies.
pub fn canonical_weights(x_can: &Vec3, delta_can: &[f64], skeleton: &Skeleton) -> Result<BlendWeights> {
    corrected_weights(x_can, delta_can, skeleton)
}

/// `Σ w_k G_k` with the background slot contributing the identity.
pub fn blend_transform(w: &[f64], pose: &PoseFrame) -> Result<(Mat3, Vec3)> {
    if w.len() != pose.len() + 1 {
        return Err(CatError::Invalid(format!("{} weights for {} transforms", w.len(), pose.len())));
    }
    Ok(blend_unchecked(w, &pose.transforms))
}

/// `I + Σ_k w_k (R_k − I)` rather than `Σ_k w_k R_k + w_bg I`: equal on the
/// simplex, and exact when every part is at rest.
fn blend_unchecked(w: &[f64], transforms: &[Rigid]) -> (Mat3, Vec3) {
    let mut r = Mat3::identity();
    let mut t = Vec3::zeros();
    for (wk, g) in w.iter().zip(transforms) {
        r += (g.rotation - Mat3::identity()) * *wk;
        t += g.translation * *wk;
    }
    (r, t)
}

/// `Σ_k w_k R_k + w_bg I`, linear in unnormalized weights.
fn blend_linear(w: &[f64], transforms: &[Rigid]) -> (Mat3, Vec3) {
    let k = transforms.len();
    let mut r = Mat3::identity() * w[k];
    let mut t = Vec3::zeros();
    for (wk, g) in w.iter().zip(transforms) {
        r += g.rotation * *wk;
        t += g.translation * *wk;
    }
    (r, t)
}

pub fn transform_oc(x_can: &Vec3, w: &BlendWeights, pose: &PoseFrame) -> Result<Vec3> {
    let (r, t) = blend_transform(w.as_slice(), pose)?;
    Ok(r * x_can + t)
}

/// Result of inverting the blended transform at one observation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: Vec3,
    pub residual: f64,
    pub converged: bool,
}

/// Fixed-point inverse of the statistically weighted blend: start from the
/// per-part inverses weighted in observation space, then iterate
/// `x <- A(x)⁻¹ x_obs`.
pub fn inverse_map(x_obs: &Vec3, pose: &PoseFrame, skeleton: &Skeleton) -> Result<Correspondence> {
    let posed = skeleton.posed(pose)?;
    skeleton.check_capsules()?;
    let inverses: Vec<Rigid> = pose.transforms.iter().map(Rigid::inverse).collect();
    Ok(inverse_with(x_obs, &pose.transforms, &inverses, skeleton, &posed))
}

pub(crate) fn inverse_with(
    x_obs: &Vec3,
    transforms: &[Rigid],
    inverses: &[Rigid],
    skeleton: &Skeleton,
    posed: &Skeleton,
) -> Correspondence {
    let k = transforms.len();
    let w0 = weights_and_jacobian(x_obs, posed, None);
    let mut blended = x_obs * w0[k];
    for (w, inv) in w0.iter().zip(inverses) {
        blended += inv.apply(x_obs) * *w;
    }
    // later starts only matter where the blended guess oscillates between parts
    let starts = std::iter::once(*x_obs).chain(std::iter::once(blended)).chain(inverses.iter().map(|g| g.apply(x_obs)));
    let mut best = Correspondence { point: blended, residual: f64::INFINITY, converged: false };
    for start in starts {
        let (point, residual) = fixed_point(start, x_obs, transforms, skeleton);
        if residual < best.residual {
            best = Correspondence { point, residual, converged: false };
        }
        if best.residual < 1e-12 {
            break;
        }
    }
    best.converged = best.residual < INVERSE_TOLERANCE && best.point.iter().all(|v| v.is_finite());
    best
}

/// Damped Newton on `R(x) x + t(x) = x_obs`, falling back to the plain
/// fixed-point update when the Newton direction does not reduce the residual.
fn fixed_point(mut x: Vec3, x_obs: &Vec3, transforms: &[Rigid], skeleton: &Skeleton) -> (Vec3, f64) {
    let k = transforms.len();
    let mut jac = vec![0.0; (k + 1) * 3];
    let eval = |x: &Vec3, jac: Option<&mut [f64]>| {
        let w = weights_and_jacobian(x, skeleton, jac);
        let (r, t) = blend_unchecked(&w, transforms);
        (r, t, r * x + t - x_obs)
    };
    let (mut r, mut t, mut f) = eval(&x, Some(&mut jac));
    let mut residual = f.norm();
    for _ in 0..INVERSE_ITERATIONS {
        if !(residual >= 1e-12) {
            break;
        }
        let mut j = r;
        for (i, g) in transforms.iter().map(Some).chain(std::iter::once(None)).enumerate() {
            let moved = g.map_or(x, |g| g.apply(&x));
            j += moved * Vec3::from_row_slice(&jac[i * 3..i * 3 + 3]).transpose();
        }
        let mut next = None;
        if let Some(inv) = j.try_inverse() {
            let dx = inv * f;
            let mut step = 1.0;
            for _ in 0..4 {
                let cand = x - dx * step;
                if (eval(&cand, None).2).norm() < residual {
                    next = Some(cand);
                    break;
                }
                step *= 0.5;
            }
        }
        let cand = match next {
            Some(c) => c,
            None => match r.try_inverse() {
                Some(inv) if r.determinant().abs() > 1e-6 => inv * (x_obs - t),
                _ => return (x, f64::INFINITY),
            },
        };
        x = cand;
        (r, t, f) = eval(&x, Some(&mut jac));
        residual = f.norm();
    }
    if residual.is_nan() {
        residual = f64::INFINITY;
    }
    (x, residual)
}

/// Graph op: statistical weights of a batch of points `[P, 3] -> [P, K+1]`,
/// differentiable with respect to the points.
pub struct StatWeightsOp {
    skeleton: Skeleton,
}

impl StatWeightsOp {
    pub fn new(skeleton: &Skeleton) -> Result<Rc<Self>> {
        skeleton.check_capsules()?;
        Ok(Rc::new(Self { skeleton: skeleton.clone() }))
    }
}

impl CustomOp for StatWeightsOp {
    fn name(&self) -> &str {
        "stat_weights"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        let x = points_input(inputs, "stat_weights")?;
        let k = self.skeleton.len();
        let mut out = Vec::with_capacity(x.rows() * (k + 1));
        for p in 0..x.rows() {
            let v = Vec3::from_row_slice(x.row_slice(p));
            out.extend(weights_and_jacobian(&v, &self.skeleton, None));
        }
        Tensor::matrix(x.rows(), k + 1, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        wants: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>, GradError> {
        if !wants[0] {
            return Ok(vec![None]);
        }
        let x = inputs[0];
        let k1 = self.skeleton.len() + 1;
        let mut jac = vec![0.0; k1 * 3];
        let mut grad = vec![0.0; x.len()];
        for p in 0..x.rows() {
            let v = Vec3::from_row_slice(x.row_slice(p));
            weights_and_jacobian(&v, &self.skeleton, Some(&mut jac));
            let g = &grad_output[p * k1..(p + 1) * k1];
            for j in 0..k1 {
                for c in 0..3 {
                    grad[p * 3 + c] += g[j] * jac[j * 3 + c];
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Graph op: `x = A(w)⁻¹ (x_obs − t(w))` per point, where `A, t` blend the
/// frame's part transforms by the input weights `[P, K+1]`.
pub struct BlendInverseOp {
    x_obs: Vec<Vec3>,
    transforms: Vec<Rigid>,
}

impl BlendInverseOp {
    pub fn new(x_obs: Vec<Vec3>, pose: &PoseFrame) -> Rc<Self> {
        Rc::new(Self { x_obs, transforms: pose.transforms.clone() })
    }

    fn solve(&self, p: usize, w: &[f64]) -> Result<(Mat3, Vec3), GradError> {
        let (r, t) = blend_linear(w, &self.transforms);
        let inv = r
            .try_inverse()
            .filter(|_| r.determinant().abs() > 1e-9)
            .ok_or_else(|| GradError::Custom(format!("blend_inverse: singular blended rotation at point {p}")))?;
        Ok((inv, inv * (self.x_obs[p] - t)))
    }
}

impl CustomOp for BlendInverseOp {
    fn name(&self) -> &str {
        "blend_inverse"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        let w = inputs.first().ok_or_else(|| GradError::Custom("blend_inverse: missing input".into()))?;
        let (rows, cols) = w.dims2();
        if rows != self.x_obs.len() || cols != self.transforms.len() + 1 {
            return Err(GradError::Shape {
                op: "blend_inverse".into(),
                detail: format!("weights {:?} for {} points and {} parts", w.shape(), self.x_obs.len(), self.transforms.len()),
            });
        }
        let mut out = Vec::with_capacity(rows * 3);
        for p in 0..rows {
            let (_, x) = self.solve(p, w.row_slice(p))?;
            out.extend_from_slice(x.as_slice());
        }
        Tensor::matrix(rows, 3, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        wants: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>, GradError> {
        if !wants[0] {
            return Ok(vec![None]);
        }
        let w = inputs[0];
        let k = self.transforms.len();
        let mut grad = vec![0.0; w.len()];
        for p in 0..w.rows() {
            let (inv, _) = self.solve(p, w.row_slice(p))?;
            let x = Vec3::from_row_slice(output.row_slice(p));
            let u = inv.transpose() * Vec3::from_row_slice(&grad_output[p * 3..p * 3 + 3]);
            // ∂x/∂w_k = −A⁻¹ (R_k x + t_k); the background slot is the identity
            for (j, g) in self.transforms.iter().enumerate() {
                grad[p * (k + 1) + j] = -u.dot(&g.apply(&x));
            }
            grad[p * (k + 1) + k] = -u.dot(&x);
        }
        Ok(vec![Some(grad)])
    }
}

fn points_input<'a>(inputs: &[&'a Tensor], op: &str) -> Result<&'a Tensor, GradError> {
    let x = inputs.first().ok_or_else(|| GradError::Custom(format!("{op}: missing input")))?;
    if x.cols() != 3 {
        return Err(GradError::Shape { op: op.into(), detail: format!("points must be [P, 3], got {:?}", x.shape()) });
    }
    Ok(x)
}

/// Statistical weights without validation, for hot loops over checked skeletons.
pub(crate) fn raw_statistical_weights(x: &Vec3, skeleton: &Skeleton) -> Vec<f64> {
    weights_and_jacobian(x, skeleton, None)
}
