//! Latent bank, transformer encoder layers and the frame-latent fusion.

use std::fmt;
use std::str::FromStr;

use numgrad::{Axis, Graph, Tensor, TensorMap, Var};

use crate::error::{CatError, Result};
use crate::nn::{linear, linear_specs, Init, ParamSpec};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub const PSI_C: &str = "latent.psi_c";
pub const PSI_U: &str = "latent.psi_u";
pub const APPEARANCE: &str = "latent.appearance";

/// Constant latent ψᶜ `[1, Wc]`, frame latents Ψᵘ `[N, Wu]` and per-frame
/// appearance codes `[N, Wl]`. A zero width means the latent is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    pub psi_c: Option<Tensor>,
    pub psi_u: Option<Tensor>,
    pub appearance: Tensor,
}

impl LatentBank {
    pub fn specs(frames: usize, constant: usize, unique: usize, appearance: usize) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if constant > 0 {
            out.push(ParamSpec::new(PSI_C, vec![1, constant], Init::Normal(1.0)));
        }
        if unique > 0 {
            out.push(ParamSpec::new(PSI_U, vec![frames, unique], Init::Normal(1.0)));
        }
        out.push(ParamSpec::new(APPEARANCE, vec![frames, appearance], Init::Normal(1.0)));
        out
    }

    pub fn from_params(params: &TensorMap) -> Result<Self> {
        let appearance =
            params.get(APPEARANCE).cloned().ok_or_else(|| CatError::Invalid(format!("parameter set has no `{APPEARANCE}`")))?;
        Ok(Self { psi_c: params.get(PSI_C).cloned(), psi_u: params.get(PSI_U).cloned(), appearance })
    }

    pub fn frames(&self) -> usize {
        self.appearance.rows()
    }

    pub fn unique_width(&self) -> usize {
        self.psi_u.as_ref().map_or(0, |t| t.cols())
    }

    pub fn constant_width(&self) -> usize {
        self.psi_c.as_ref().map_or(0, |t| t.cols())
    }

    pub fn check_frame(&self, i: usize) -> Result<()> {
        if i >= self.frames() {
            return Err(CatError::OutOfRange(format!("frame {i} of {}", self.frames())));
        }
        Ok(())
    }
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k) V` on graph values.
pub fn attention(g: &Graph, q: Var, k: Var, v: Var, d_k: usize) -> Var {
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let p = g.softmax(scores);
    g.matmul(p, v)
}

/// Attention probabilities and output for concrete matrices.
pub fn attention_values(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(CatError::Invalid(format!("attention shapes q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let kt = g.transpose(kv);
    let s = g.matmul(qv, kt);
    let s = g.scale(s, 1.0 / (q.cols() as f64).sqrt());
    let p = g.softmax(s);
    let out = g.matmul(p, vv);
    g.eval_all(&TensorMap::new())?;
    Ok((g.value(p)?, g.value(out)?))
}

/// One post-norm encoder layer: multi-head self-attention and a ReLU
/// feed-forward block, each wrapped in a residual and layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayer {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl EncoderLayer {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.ffn == 0 {
            return Err(CatError::Invalid(format!(
                "encoder width {} must be a positive multiple of {} heads (ffn {})",
                self.width, self.heads, self.ffn
            )));
        }
        Ok(())
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.width;
        let mut out = Vec::new();
        for m in ["q", "k", "v", "o"] {
            out.extend(linear_specs(&format!("{prefix}.{m}"), d, d));
        }
        out.extend(linear_specs(&format!("{prefix}.ff1"), d, self.ffn));
        out.extend(linear_specs(&format!("{prefix}.ff2"), self.ffn, d));
        for ln in ["ln1", "ln2"] {
            out.push(ParamSpec::new(format!("{prefix}.{ln}.g"), vec![1, d], Init::Const(1.0)));
            out.push(ParamSpec::new(format!("{prefix}.{ln}.b"), vec![1, d], Init::Const(0.0)));
        }
        out
    }

    /// `[n, width] -> [n, width]`; no positional information is added.
    pub fn encode(&self, g: &Graph, prefix: &str, x: Var) -> Var {
        let q = linear(g, &format!("{prefix}.q"), x);
        let k = linear(g, &format!("{prefix}.k"), x);
        let v = linear(g, &format!("{prefix}.v"), x);
        let dh = self.width / self.heads;
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                attention(g, g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b), dh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let att = linear(g, &format!("{prefix}.o"), cat);
        let x1 = g.add(x, att);
        let x1 = self.norm(g, prefix, "ln1", x1);
        let f = linear(g, &format!("{prefix}.ff1"), x1);
        let f = g.relu(f);
        let f = linear(g, &format!("{prefix}.ff2"), f);
        let x2 = g.add(x1, f);
        self.norm(g, prefix, "ln2", x2)
    }

    fn norm(&self, g: &Graph, prefix: &str, which: &str, x: Var) -> Var {
        let gamma = g.input(&format!("{prefix}.{which}.g"));
        let beta = g.input(&format!("{prefix}.{which}.b"));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    pub fn encode_values(&self, params: &TensorMap, prefix: &str, tokens: &Tensor) -> Result<Tensor> {
        if tokens.rows() == 0 || tokens.cols() != self.width {
            return Err(CatError::Invalid(format!("tokens {:?} for width {}", tokens.shape(), self.width)));
        }
        let g = Graph::new();
        let x = g.constant(tokens.clone());
        let out = self.encode(&g, prefix, x);
        Ok(g.eval(params, out)?)
    }
}

/// How the frame-unique latent of frame i is formed from Ψᵘ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    Raw,
    Avg,
    Tx,
    AvgT2,
    Tx2,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] =
        [FusionVariant::Raw, FusionVariant::Avg, FusionVariant::Tx, FusionVariant::AvgT2, FusionVariant::Tx2];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Raw => "raw",
            FusionVariant::Avg => "avg",
            FusionVariant::Tx => "tx",
            FusionVariant::AvgT2 => "avg_t2",
            FusionVariant::Tx2 => "tx2",
        }
    }

    pub fn uses_t1(self) -> bool {
        matches!(self, FusionVariant::Tx | FusionVariant::Tx2)
    }

    pub fn uses_t2(self) -> bool {
        matches!(self, FusionVariant::AvgT2 | FusionVariant::Tx2)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| CatError::Unknown { kind: "fusion variant", value: s.to_string() })
    }
}

/// The two encoder stacks T₁ and T₂ (parameter prefixes `t1`, `t2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxFusion {
    pub layer: EncoderLayer,
    pub variant: FusionVariant,
}

impl TxFusion {
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if self.variant.uses_t1() {
            out.extend(self.layer.specs("t1"));
        }
        if self.variant.uses_t2() {
            out.extend(self.layer.specs("t2"));
        }
        out
    }

    /// T₂ applied to `(query, pooled)`, keeping the query token.
    fn second_stage(&self, g: &Graph, query: Var, pooled: Var) -> Var {
        let seq = g.concat_rows(&[query, pooled]);
        let out = self.layer.encode(g, "t2", seq);
        g.slice_rows(out, 0, 1)
    }

    /// `[1, width]` fused latent for frame `i`; `frames` is the row count of Ψᵘ.
    pub fn fuse(&self, g: &Graph, psi_u: Var, frames: usize, i: usize) -> Result<Var> {
        if i >= frames {
            return Err(CatError::OutOfRange(format!("frame {i} of {frames}")));
        }
        let own = g.slice_rows(psi_u, i, i + 1);
        Ok(match self.variant {
            FusionVariant::Raw => own,
            FusionVariant::Avg => g.mean_axis(psi_u, Axis::Rows),
            FusionVariant::Tx => {
                let t1 = self.layer.encode(g, "t1", psi_u);
                g.slice_rows(t1, i, i + 1)
            }
            FusionVariant::AvgT2 => {
                let pooled = g.mean_axis(psi_u, Axis::Rows);
                self.second_stage(g, own, pooled)
            }
            FusionVariant::Tx2 => {
                let t1 = self.layer.encode(g, "t1", psi_u);
                let pooled = g.mean_axis(t1, Axis::Rows);
                self.second_stage(g, own, pooled)
            }
        })
    }

    /// Fused latent for frame `i` of the bank.
    pub fn fuse_values(&self, params: &TensorMap, bank: &LatentBank, i: usize) -> Result<Vec<f64>> {
        let psi = bank.psi_u.as_ref().ok_or_else(|| CatError::Invalid("bank has no frame-unique latents".into()))?;
        let g = Graph::new();
        let x = g.constant(psi.clone());
        let out = self.fuse(&g, x, psi.rows(), i)?;
        Ok(g.eval(params, out)?.into_data())
    }
}

/// Tx²Former fusion `T₂(ψᵘᵢ, mean T₁(Ψᵘ))` for frame `i`.
pub fn tx2_fuse(params: &TensorMap, layer: EncoderLayer, bank: &LatentBank, i: usize) -> Result<Vec<f64>> {
    TxFusion { layer, variant: FusionVariant::Tx2 }.fuse_values(params, bank, i)
}

pub fn fuse_variant(params: &TensorMap, layer: EncoderLayer, bank: &LatentBank, i: usize, variant: FusionVariant) -> Result<Vec<f64>> {
    TxFusion { layer, variant }.fuse_values(params, bank, i)
}
