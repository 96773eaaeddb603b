//! Training losses and image quality metrics.

use std::fmt;
use std::str::FromStr;

use numgrad::{Axis, Graph, Tensor, TensorMap, Var};

use crate::error::{CatError, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
pub const CORR_EPS: f64 = 1e-12;
pub const KLD_VAR_FLOOR: f64 = 1e-12;

/// Which decorrelation term joins the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    None,
    Cov,
    Corr,
    Kld,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::None, LossVariant::Cov, LossVariant::Corr, LossVariant::Kld];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::None => "none",
            LossVariant::Cov => "cov",
            LossVariant::Corr => "corr",
            LossVariant::Kld => "kld",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| CatError::Unknown { kind: "loss variant", value: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub nsf: f64,
    pub decor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, nsf: 1.0, decor: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_nsf: f64,
    /// The decorrelation term of the active variant; zero for `none`.
    pub decor: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub variant: LossVariant,
}

/// Weighted sum of the three terms; the `none` variant drops the decorrelation term.
pub fn total(l_rgb: f64, l_nsf: f64, decor: f64, variant: LossVariant, weights: LossWeights) -> Result<LossReport> {
    for (name, v) in [("l_rgb", l_rgb), ("l_nsf", l_nsf), ("decorrelation", decor)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(CatError::Invalid(format!("{name} term is {v}")));
        }
    }
    let decor = if variant == LossVariant::None { 0.0 } else { decor };
    let total = weights.rgb * l_rgb + weights.nsf * l_nsf + weights.decor * decor;
    Ok(LossReport { l_rgb, l_nsf, decor, total, weights, variant })
}

/// `Σ_r ‖pred_r − truth_r‖₂`.
pub fn l_rgb_graph(g: &Graph, pred: Var, truth: Var) -> Var {
    let diff = g.sub(pred, truth);
    let norms = g.row_norm(diff);
    g.sum(norms)
}

/// `Σ_x ‖w_obs(x) − w_can(x)‖₁`.
pub fn l_nsf_graph(g: &Graph, w_obs: Var, w_can: Var) -> Var {
    let diff = g.sub(w_obs, w_can);
    let a = g.abs(diff);
    g.sum(a)
}

fn centered_rows(g: &Graph, psi: Var) -> Var {
    let mean = g.mean_axis(psi, Axis::Cols);
    g.sub(psi, mean)
}

/// Mean absolute off-diagonal frame covariance, normalized by `(N−1)²`.
pub fn l_cov_graph(g: &Graph, psi: Var, n: usize, d: usize) -> Var {
    let c = centered_rows(g, psi);
    let ct = g.transpose(c);
    let cov = g.matmul(c, ct);
    let cov = g.scale(cov, 1.0 / (d as f64 - 1.0));
    let all = g.abs(cov);
    // masking rather than subtracting the diagonal keeps the value exactly non-negative
    let mask = (0..n * n).map(|i| if i / n == i % n { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(Tensor::new(vec![n, n], mask).expect("mask shape"));
    let off = g.mul(all, mask);
    let off = g.sum(off);
    let norm = (n as f64 - 1.0).powi(2);
    g.scale(off, 1.0 / norm)
}

/// `Σ_d Π_i c_i[d] / sqrt(Π_i Σ_d c_i[d]² + ε)` over centered rows `c_i`.
pub fn l_corr_graph(g: &Graph, psi: Var) -> Var {
    let c = centered_rows(g, psi);
    let prod = g.prod_axis(c, Axis::Rows);
    let num = g.sum(prod);
    let sq = g.square(c);
    let ss = g.sum_axis(sq, Axis::Cols);
    let den = g.prod_axis(ss, Axis::Rows);
    let den = g.add_scalar(den, CORR_EPS);
    let den = g.sqrt(den);
    let den = g.sum(den);
    g.div(num, den)
}

/// Mean over dimensions of `½(μ² + s² − ln s² − 1)`, with `s²` the
/// maximum-likelihood variance over the N rows.
pub fn l_kld_graph(g: &Graph, psi: Var) -> Var {
    let mu = g.mean_axis(psi, Axis::Rows);
    let c = g.sub(psi, mu);
    let sq = g.square(c);
    let var = g.mean_axis(sq, Axis::Rows);
    let var = g.clamp_min(var, KLD_VAR_FLOOR);
    let mu2 = g.square(mu);
    let lv = g.log(var);
    let t = g.add(mu2, var);
    let t = g.sub(t, lv);
    let t = g.add_scalar(t, -1.0);
    let m = g.mean(t);
    g.scale(m, 0.5)
}

/// The training-time decorrelation term; the correlation score enters by
/// magnitude so that minimizing it drives frames apart rather than towards
/// anti-correlation.
pub fn decor_graph(g: &Graph, variant: LossVariant, psi: Var, n: usize, d: usize) -> Option<Var> {
    match variant {
        LossVariant::None => None,
        LossVariant::Cov => Some(l_cov_graph(g, psi, n, d)),
        LossVariant::Corr => {
            let c = l_corr_graph(g, psi);
            Some(g.abs(c))
        }
        LossVariant::Kld => Some(l_kld_graph(g, psi)),
    }
}

fn eval_on(psi: &Tensor, build: impl Fn(&Graph, Var) -> Var) -> Result<f64> {
    let g = Graph::new();
    let x = g.constant(psi.clone());
    let out = build(&g, x);
    Ok(g.eval(&TensorMap::new(), out)?.data()[0])
}

fn check_latents(psi: &Tensor, min_d: usize) -> Result<(usize, usize)> {
    let (n, d) = psi.dims2();
    if psi.shape().len() != 2 || n < 2 || d < min_d {
        return Err(CatError::Invalid(format!("latent matrix {:?} needs N >= 2 and D >= {min_d}", psi.shape())));
    }
    Ok((n, d))
}

pub fn l_cov(psi: &Tensor) -> Result<f64> {
    let (n, d) = check_latents(psi, 2)?;
    eval_on(psi, |g, x| l_cov_graph(g, x, n, d))
}

/// Value with a flag raised when some row has (near) zero spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub flagged: bool,
}

pub fn l_corr(psi: &Tensor) -> Result<Flagged> {
    let (n, d) = check_latents(psi, 1)?;
    let degenerate = (0..n).any(|i| {
        let row = psi.row_slice(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() <= CORR_EPS
    });
    if degenerate {
        return Ok(Flagged { value: 0.0, flagged: true });
    }
    Ok(Flagged { value: eval_on(psi, l_corr_graph)?, flagged: false })
}

pub fn l_kld(psi: &Tensor) -> Result<Flagged> {
    let (n, d) = check_latents(psi, 1)?;
    let clamped = (0..d).any(|j| {
        let mean = (0..n).map(|i| psi.at(i, j)).sum::<f64>() / n as f64;
        (0..n).map(|i| (psi.at(i, j) - mean).powi(2)).sum::<f64>() / (n as f64) < KLD_VAR_FLOOR
    });
    Ok(Flagged { value: eval_on(psi, l_kld_graph)?, flagged: clamped })
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CatError::Invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `pred` and `truth` are `[rays, 3]`.
pub fn l_rgb(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth)?;
    let g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(truth.clone()));
    let out = l_rgb_graph(&g, p, t);
    Ok(g.eval(&TensorMap::new(), out)?.data()[0])
}

/// L1 distance summed over points; both inputs are `[points, K+1]`.
pub fn l_nsf(w_obs: &Tensor, w_can: &Tensor) -> Result<f64> {
    check_pair(w_obs, w_can)?;
    let g = Graph::new();
    let (a, b) = (g.constant(w_obs.clone()), g.constant(w_can.clone()));
    let out = l_nsf_graph(&g, a, b);
    Ok(g.eval(&TensorMap::new(), out)?.data()[0])
}

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(CatError::Invalid(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_images(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`] for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(CatError::Invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &k {
        for b in &k {
            w.push(a * b);
        }
    }
    w
}

/// Mean structural similarity over all fully contained 11×11 Gaussian windows,
/// averaged over the three channels, for images with values in `[0, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_images(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(CatError::Invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}", a.width, a.height)));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let win = gaussian_window();
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let w = win[j * SSIM_WINDOW + i];
                        let idx = ((y + j) * a.width + x + i) * 3 + ch;
                        let (pa, pb) = (a.data[idx], b.data[idx]);
                        ma += w * pa;
                        mb += w * pb;
                        saa += w * pa * pa;
                        sbb += w * pb * pb;
                        sab += w * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}
