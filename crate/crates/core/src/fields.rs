//! Positional encoding and the neural fields.

use std::rc::Rc;

use numgrad::{CustomOp, GradError, Graph, Tensor, TensorMap, Var};

use crate::error::{CatError, Result};
use crate::geometry::Vec3;
use crate::nn::{linear, linear_specs, linear_split, Init, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingConfig {
    pub position_bands: usize,
    pub direction_bands: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { position_bands: 10, direction_bands: 4, include_raw: false }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.position_bands == 0 || self.direction_bands == 0 {
            return Err(CatError::Invalid("encoding band counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn position_width(&self) -> usize {
        encoded_width(3, self.position_bands, self.include_raw)
    }

    pub fn direction_width(&self) -> usize {
        encoded_width(3, self.direction_bands, self.include_raw)
    }
}

pub fn encoded_width(dim: usize, bands: usize, include_raw: bool) -> usize {
    dim * 2 * bands + if include_raw { dim } else { 0 }
}

/// Maps `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(CatError::Invalid(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    fn normalize(&self, x: f64) -> f64 {
        2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0
    }

    fn slope(&self) -> f64 {
        2.0 / (self.hi - self.lo)
    }
}

fn encode_into(xs: &[f64], bands: usize, include_raw: bool, range: Interval, out: &mut Vec<f64>) {
    if include_raw {
        out.extend(xs.iter().map(|x| range.normalize(*x)));
    }
    for x in xs {
        let xh = range.normalize(*x);
        let mut freq = std::f64::consts::PI;
        for _ in 0..bands {
            let (s, c) = (freq * xh).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

/// Sin/cos bands `(sin 2ˡπx̂, cos 2ˡπx̂)` for `l < bands`, per coordinate of the
/// normalized input; the normalized raw input is prepended when requested.
pub fn positional_encode(x: &[f64], bands: usize, range: Interval, include_raw: bool) -> Result<Vec<f64>> {
    if bands == 0 {
        return Err(CatError::Invalid("band count must be at least 1".into()));
    }
    for v in x {
        if !v.is_finite() {
            return Err(CatError::Invalid("non-finite encoder input".into()));
        }
        let xh = range.normalize(*v);
        if xh.abs() > 1.0 + 1e-6 {
            return Err(CatError::OutOfRange(format!("{v} lies outside [{}, {}]", range.lo, range.hi)));
        }
    }
    let mut out = Vec::with_capacity(encoded_width(x.len(), bands, include_raw));
    encode_into(x, bands, include_raw, range, &mut out);
    Ok(out)
}

/// Encodes a batch of 3-vectors without bounds checks, as a constant tensor.
pub fn encode_batch(points: &[Vec3], bands: usize, range: Interval, include_raw: bool) -> Tensor {
    let width = encoded_width(3, bands, include_raw);
    let mut out = Vec::with_capacity(points.len() * width);
    for p in points {
        encode_into(p.as_slice(), bands, include_raw, range, &mut out);
    }
    Tensor::matrix(points.len(), width, out).expect("encoded width")
}

/// Graph op: positional encoding of `[P, d]` rows, differentiable in the input.
pub struct PosEncOp {
    pub bands: usize,
    pub range: Interval,
    pub include_raw: bool,
}

impl PosEncOp {
    pub fn new(bands: usize, range: Interval, include_raw: bool) -> Rc<Self> {
        Rc::new(Self { bands, range, include_raw })
    }
}

impl CustomOp for PosEncOp {
    fn name(&self) -> &str {
        "posenc"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        let x = inputs.first().ok_or_else(|| GradError::Custom("posenc: missing input".into()))?;
        let (rows, dim) = x.dims2();
        let width = encoded_width(dim, self.bands, self.include_raw);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            encode_into(x.row_slice(r), self.bands, self.include_raw, self.range, &mut out);
        }
        Tensor::matrix(rows, width, out)
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
        let x = inputs[0];
        let (rows, dim) = x.dims2();
        let width = output.cols();
        let slope = self.range.slope();
        let raw = if self.include_raw { dim } else { 0 };
        let mut grad = vec![0.0; x.len()];
        for r in 0..rows {
            let out = output.row_slice(r);
            let g = &grad_output[r * width..(r + 1) * width];
            for c in 0..dim {
                let mut acc = if self.include_raw { g[c] } else { 0.0 };
                let mut freq = std::f64::consts::PI;
                let base = raw + c * 2 * self.bands;
                for l in 0..self.bands {
                    let (s, co) = (out[base + 2 * l], out[base + 2 * l + 1]);
                    acc += freq * (g[base + 2 * l] * co - g[base + 2 * l + 1] * s);
                    freq *= 2.0;
                }
                grad[r * dim + c] = acc * slope;
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Node-index ranges of the layers built so far, for error messages.
#[derive(Debug, Default, Clone)]
pub struct LayerMarks(Vec<(usize, String)>);

impl LayerMarks {
    fn mark(&mut self, g: &Graph, name: String) {
        self.0.push((g.len(), name));
    }

    /// The layer that owns graph node `node`, if any.
    pub fn layer_of(&self, node: usize) -> Option<&str> {
        self.0.iter().find(|(end, _)| node < *end).map(|(_, n)| n.as_str())
    }

    pub(crate) fn explain(&self, err: GradError) -> CatError {
        match &err {
            GradError::NonFinite { node, op } => match self.layer_of(*node) {
                Some(layer) => CatError::Invalid(format!("non-finite activation in layer {layer} ({op})")),
                None => err.into(),
            },
            _ => err.into(),
        }
    }
}

/// Density and color networks: ten hidden layers of `width`, a final layer
/// of `final_width`, the encoded position re-injected at layer 5, density
/// read from layer 8 and color from layer 11 after direction and appearance
/// enter at layers 9 and 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadianceNet {
    pub position_width: usize,
    pub direction_width: usize,
    pub appearance_width: usize,
    pub width: usize,
    pub final_width: usize,
}

impl RadianceNet {
    pub const PREFIX: &'static str = "radiance";

    pub fn specs(&self) -> Vec<ParamSpec> {
        let (p, w) = (self.position_width, self.width);
        let side = self.direction_width + self.appearance_width;
        let mut out = Vec::new();
        for layer in 1..=10 {
            let fan_in = match layer {
                1 => p,
                5 => w + p,
                9 | 10 => w + side,
                _ => w,
            };
            out.extend(linear_specs(&format!("radiance.l{layer}"), fan_in, w));
        }
        out.extend(linear_specs("radiance.l11", w, self.final_width));
        out.extend(linear_specs("radiance.sigma", w, 1));
        out.extend(linear_specs("radiance.rgb", self.final_width, 3));
        out
    }

    /// `(σ [P,1], z [P,width])` from encoded canonical positions.
    pub fn density(&self, g: &Graph, gx: Var, marks: &mut LayerMarks) -> (Var, Var) {
        let mut h = gx;
        for layer in 1..=8 {
            let name = format!("radiance.l{layer}");
            let pre = if layer == 5 { linear_split(g, &name, &[(h, self.width), (gx, self.position_width)]) } else { linear(g, &name, h) };
            h = g.relu(pre);
            marks.mark(g, name);
        }
        let sigma = linear(g, "radiance.sigma", h);
        let sigma = g.softplus(sigma);
        marks.mark(g, "radiance.sigma".into());
        (sigma, h)
    }

    /// RGB in `[0,1]` from the feature, encoded direction and appearance code.
    /// `l` may be a single row shared by the batch.
    pub fn color(&self, g: &Graph, z: Var, gd: Var, l: Var, marks: &mut LayerMarks) -> Var {
        let mut h = z;
        for layer in [9, 10] {
            let name = format!("radiance.l{layer}");
            let pre = linear_split(g, &name, &[(h, self.width), (gd, self.direction_width), (l, self.appearance_width)]);
            h = g.relu(pre);
            marks.mark(g, name);
        }
        let h11 = linear(g, "radiance.l11", h);
        let h11 = g.relu(h11);
        marks.mark(g, "radiance.l11".into());
        let rgb = linear(g, "radiance.rgb", h11);
        let rgb = g.sigmoid(rgb);
        marks.mark(g, "radiance.rgb".into());
        rgb
    }

    /// Density and feature at one canonical point.
    pub fn density_and_feature(&self, params: &TensorMap, enc: &EncodingConfig, p: &Vec3) -> Result<(f64, Vec<f64>)> {
        let gx = positional_encode(p.as_slice(), enc.position_bands, Interval::UNIT, enc.include_raw)?;
        let g = Graph::new();
        let x = g.constant(Tensor::row(gx));
        let mut marks = LayerMarks::default();
        let (sigma, z) = self.density(&g, x, &mut marks);
        g.eval_all(params).map_err(|e| marks.explain(e))?;
        let sigma = g.value(sigma)?.data()[0];
        Ok((sigma, g.value(z)?.into_data()))
    }

    pub fn color_at(&self, params: &TensorMap, enc: &EncodingConfig, z: &[f64], d: &Vec3, l: &[f64]) -> Result<[f64; 3]> {
        if (d.norm() - 1.0).abs() > 1e-9 {
            return Err(CatError::Invalid(format!("view direction has norm {}", d.norm())));
        }
        if z.len() != self.width || l.len() != self.appearance_width {
            return Err(CatError::Invalid(format!(
                "feature/appearance widths {}/{} do not match {}/{}",
                z.len(),
                l.len(),
                self.width,
                self.appearance_width
            )));
        }
        let gd = positional_encode(d.as_slice(), enc.direction_bands, Interval::UNIT, enc.include_raw)?;
        let g = Graph::new();
        let zv = g.constant(Tensor::row(z.to_vec()));
        let dv = g.constant(Tensor::row(gd));
        let lv = g.constant(Tensor::row(l.to_vec()));
        let mut marks = LayerMarks::default();
        let rgb = self.color(&g, zv, dv, lv, &mut marks);
        let out = g.eval(params, rgb).map_err(|e| marks.explain(e))?;
        Ok([out.data()[0], out.data()[1], out.data()[2]])
    }
}

/// The constant and frame-unique decoders and the blend-weight correction MLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldDecoders {
    pub position_width: usize,
    /// Width of ψᶜ; zero drops the constant branch.
    pub constant_width: usize,
    /// Width of the fused frame-unique latent; zero drops the unique branch.
    pub unique_width: usize,
    pub decoder_width: usize,
    pub blend_width: usize,
    pub blend_depth: usize,
    /// K+1 outputs.
    pub outputs: usize,
    /// Initial bias of the output layer, so that ΔW starts near `exp(bias)`.
    pub output_bias: f64,
}

impl FieldDecoders {
    pub fn latent_width(&self) -> usize {
        let c = if self.constant_width > 0 { self.decoder_width } else { 0 };
        let u = if self.unique_width > 0 { self.decoder_width } else { 0 };
        c + u
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if self.constant_width > 0 {
            out.extend(linear_specs("decoder.const.l1", self.constant_width, self.decoder_width));
            out.extend(linear_specs("decoder.const.l2", self.decoder_width, self.decoder_width));
        }
        if self.unique_width > 0 {
            out.extend(linear_specs("decoder.unique.l1", self.unique_width, self.decoder_width));
            out.extend(linear_specs("decoder.unique.l2", self.decoder_width, self.decoder_width));
        }
        let (p, w, lat) = (self.position_width, self.blend_width, self.latent_width());
        let skip = self.skip_layer();
        for layer in 1..=self.blend_depth {
            let fan_in = if layer == 1 {
                p + lat
            } else if layer == skip {
                w + p + lat
            } else {
                w
            };
            out.extend(linear_specs(&format!("blend.l{layer}"), fan_in, w));
        }
        let mut head = linear_specs("blend.out", w, self.outputs);
        head[1].init = Init::Const(self.output_bias);
        out.extend(head);
        out
    }

    fn skip_layer(&self) -> usize {
        if self.blend_depth >= 5 {
            5
        } else {
            usize::MAX
        }
    }

    fn decode(&self, g: &Graph, prefix: &str, latent: Var) -> Var {
        let h = linear(g, &format!("{prefix}.l1"), latent);
        let h = g.relu(h);
        linear(g, &format!("{prefix}.l2"), h)
    }

    /// `[1, latent_width]`: the two decoded latents side by side.
    pub fn latent_feature(&self, g: &Graph, psi_c: Option<Var>, fused_u: Option<Var>) -> Option<Var> {
        let c = psi_c.filter(|_| self.constant_width > 0).map(|v| self.decode(g, "decoder.const", v));
        let u = fused_u.filter(|_| self.unique_width > 0).map(|v| self.decode(g, "decoder.unique", v));
        match (c, u) {
            (Some(c), Some(u)) => Some(g.concat_cols(&[c, u])),
            (Some(v), None) | (None, Some(v)) => Some(v),
            (None, None) => None,
        }
    }

    /// `ΔW = exp(blend(γx, lat))`, `[P, K+1]`.
    pub fn delta(&self, g: &Graph, gx: Var, lat: Option<Var>, marks: &mut LayerMarks) -> Var {
        let lat_w = self.latent_width();
        let inputs = |h: Option<(Var, usize)>| {
            let mut parts = Vec::with_capacity(3);
            if let Some(h) = h {
                parts.push(h);
            }
            parts.push((gx, self.position_width));
            if let Some(l) = lat {
                parts.push((l, lat_w));
            }
            parts
        };
        let mut h = gx;
        for layer in 1..=self.blend_depth {
            let name = format!("blend.l{layer}");
            let pre = if layer == 1 {
                linear_split(g, &name, &inputs(None))
            } else if layer == self.skip_layer() {
                linear_split(g, &name, &inputs(Some((h, self.blend_width))))
            } else {
                linear(g, &name, h)
            };
            h = g.relu(pre);
            marks.mark(g, name);
        }
        let out = linear(g, "blend.out", h);
        let out = g.exp(out);
        marks.mark(g, "blend.out".into());
        out
    }

    /// ΔW at one canonical point for explicit latents.
    pub fn delta_weights(
        &self,
        params: &TensorMap,
        enc: &EncodingConfig,
        x_can: &Vec3,
        psi_c: &[f64],
        fused_u: &[f64],
    ) -> Result<Vec<f64>> {
        if psi_c.len() != self.constant_width || fused_u.len() != self.unique_width {
            return Err(CatError::Invalid(format!(
                "latent widths {}/{} do not match {}/{}",
                psi_c.len(),
                fused_u.len(),
                self.constant_width,
                self.unique_width
            )));
        }
        let gx = positional_encode(x_can.as_slice(), enc.position_bands, Interval::UNIT, enc.include_raw)?;
        let g = Graph::new();
        let x = g.constant(Tensor::row(gx));
        let c = (!psi_c.is_empty()).then(|| g.constant(Tensor::row(psi_c.to_vec())));
        let u = (!fused_u.is_empty()).then(|| g.constant(Tensor::row(fused_u.to_vec())));
        let lat = self.latent_feature(&g, c, u);
        let mut marks = LayerMarks::default();
        let dw = self.delta(&g, x, lat, &mut marks);
        Ok(g.eval(params, dw).map_err(|e| marks.explain(e))?.into_data())
    }
}
