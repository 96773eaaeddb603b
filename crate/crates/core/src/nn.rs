//! Parameter declarations, seeded initialization and graph layer helpers.

use numgrad::{Graph, Tensor, TensorMap, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }
}

/// Weight and bias of a dense layer, both uniform in `±1/√fan_in`.
pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<ParamSpec> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    vec![
        ParamSpec::new(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Uniform(bound)),
        ParamSpec::new(format!("{prefix}.b"), vec![1, fan_out], Init::Uniform(bound)),
    ]
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One stream per (seed, parameter name), so a parameter's initial value does
/// not depend on which other parameters exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes());
    ChaCha8Rng::seed_from_u64(mixed)
}

pub fn init_param(spec: &ParamSpec, seed: u64) -> Tensor {
    let mut rng = param_rng(seed, &spec.name);
    let n: usize = spec.shape.iter().product();
    let data: Vec<f64> = match spec.init {
        Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
        Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        Init::Const(c) => vec![c; n],
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches data").with_grad()
}

pub fn init_params(specs: &[ParamSpec], seed: u64) -> TensorMap {
    specs.iter().map(|s| (s.name.clone(), init_param(s, seed))).collect()
}

/// `x·W + b` with the parameters named `{prefix}.w` and `{prefix}.b`.
pub fn linear(g: &Graph, prefix: &str, x: Var) -> Var {
    let w = g.input(&format!("{prefix}.w"));
    let b = g.input(&format!("{prefix}.b"));
    g.affine(x, w, b)
}

/// A dense layer over the column concatenation of `parts`, computed block by
/// block so that single-row parts broadcast over the batch instead of being
/// tiled. Each part is `(var, width)`.
pub fn linear_split(g: &Graph, prefix: &str, parts: &[(Var, usize)]) -> Var {
    let w = g.input(&format!("{prefix}.w"));
    let b = g.input(&format!("{prefix}.b"));
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for &(x, width) in parts {
        if width == 0 {
            continue;
        }
        let block = g.slice_rows(w, offset, offset + width);
        offset += width;
        let y = g.matmul(x, block);
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y),
        });
    }
    match acc {
        Some(a) => g.add(a, b),
        None => b,
    }
}
