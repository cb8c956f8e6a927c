//! Surface transformer encoder: `[B, N, M, F]` patch sequences to `[B, N, D]`
//! patch embeddings.
//!
//! Each patch is flattened to `M·F` values and linearly projected to `D`,
//! a learned positional embedding is added, and the sequence passes through
//! pre-norm transformer blocks (multi-head self-attention and a GELU MLP,
//! each wrapped in a residual connection) and a final layer norm. There is no
//! class token: every patch embedding is consumed by the decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Encoder hyper-parameters (`encoder.*` keys of the run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent_dim: 48,
            depth: 4,
            heads: 6,
            mlp_ratio: 4,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Invalid(
                "encoder latent_dim, heads and mlp_ratio must be positive".into(),
            ));
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "encoder latent_dim {} is not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "encoder dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.latent_dim * self.mlp_ratio
    }
}

/// Input geometry seen by the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    /// Patches in the sequence, `H·N`.
    pub seq_len: usize,
    /// Vertices per patch, `M`.
    pub patch_vertices: usize,
    /// Feature channels, `F`.
    pub channels: usize,
}

impl InputDims {
    pub fn patch_len(&self) -> usize {
        self.patch_vertices * self.channels
    }
}

macro_rules! param_group {
    ($params:ident, $vars:ident { $($field:ident),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $params<T = f32> {
            $(pub $field: Tensor<T>,)*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: Var,)*
        }

        impl<T: Scalar> $params<T> {
            pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }

            fn take_from(it: &mut impl Iterator<Item = Tensor<T>>) -> Option<Self> {
                Some($params { $($field: it.next()?,)* })
            }

            pub fn cast<U: Scalar>(&self) -> $params<U> {
                $params { $($field: self.$field.cast(),)* }
            }
        }

        impl $vars {
            fn take_from(it: &mut impl Iterator<Item = Var>) -> Option<Self> {
                Some($vars { $($field: it.next()?,)* })
            }
        }
    };
}

param_group!(BlockParams, BlockVars {
    ln1_gain,
    ln1_bias,
    qkv_weight,
    qkv_bias,
    proj_weight,
    proj_bias,
    ln2_gain,
    ln2_bias,
    mlp_in_weight,
    mlp_in_bias,
    mlp_out_weight,
    mlp_out_bias,
});

param_group!(EmbedParams, EmbedVars {
    patch_weight,
    patch_bias,
    pos_embed,
});

param_group!(NormParams, NormVars { gain, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm: NormParams<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub norm: NormVars,
}

impl<T: Scalar> EncoderParams<T> {
    /// Tensors with dotted names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .embed
            .named()
            .into_iter()
            .map(|(n, t)| (format!("embed.{n}"), t))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.extend(self.norm.named().into_iter().map(|(n, t)| (format!("norm.{n}"), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .embed
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("embed.{n}"), t))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.extend(
            self.norm
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("norm.{n}"), t)),
        );
        out
    }

    /// Rebuild from tensors in [`EncoderParams::named`] order.
    pub fn take_from(
        depth: usize,
        it: &mut impl Iterator<Item = Tensor<T>>,
    ) -> Option<Self> {
        let embed = EmbedParams::take_from(it)?;
        let blocks = (0..depth)
            .map(|_| BlockParams::take_from(it))
            .collect::<Option<Vec<_>>>()?;
        let norm = NormParams::take_from(it)?;
        Some(EncoderParams {
            embed,
            blocks,
            norm,
        })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(BlockParams::cast).collect(),
            norm: self.norm.cast(),
        }
    }

    /// Check every tensor shape against a configuration.
    pub fn check_shapes(&self, config: &EncoderConfig, dims: &InputDims) -> Result<()> {
        let expected = expected_shapes(config, dims);
        let named = self.named();
        if named.len() != expected.len() {
            return Err(shape_err!(
                "encoder has {} tensors, configuration implies {}",
                named.len(),
                expected.len()
            ));
        }
        for ((name, t), (_, shape)) in named.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err!(
                    "encoder.{} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("encoder.{name}")));
            }
        }
        Ok(())
    }
}

impl EncoderVars {
    pub fn take_from(depth: usize, it: &mut impl Iterator<Item = Var>) -> Option<Self> {
        let embed = EmbedVars::take_from(it)?;
        let blocks = (0..depth)
            .map(|_| BlockVars::take_from(it))
            .collect::<Option<Vec<_>>>()?;
        let norm = NormVars::take_from(it)?;
        Some(EncoderVars {
            embed,
            blocks,
            norm,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers in canonical order.
fn layout(config: &EncoderConfig, dims: &InputDims) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.latent_dim;
    let hid = config.hidden_dim();
    let mut out = vec![
        ("embed.patch_weight".into(), vec![dims.patch_len(), d], Init::TruncNormal),
        ("embed.patch_bias".into(), vec![d], Init::Zeros),
        ("embed.pos_embed".into(), vec![dims.seq_len, d], Init::Normal),
    ];
    for i in 0..config.depth {
        let p = |n: &str| format!("blocks.{i}.{n}");
        out.extend([
            (p("ln1_gain"), vec![d], Init::Ones),
            (p("ln1_bias"), vec![d], Init::Zeros),
            (p("qkv_weight"), vec![d, 3 * d], Init::TruncNormal),
            (p("qkv_bias"), vec![3 * d], Init::Zeros),
            (p("proj_weight"), vec![d, d], Init::TruncNormal),
            (p("proj_bias"), vec![d], Init::Zeros),
            (p("ln2_gain"), vec![d], Init::Ones),
            (p("ln2_bias"), vec![d], Init::Zeros),
            (p("mlp_in_weight"), vec![d, hid], Init::TruncNormal),
            (p("mlp_in_bias"), vec![hid], Init::Zeros),
            (p("mlp_out_weight"), vec![hid, d], Init::TruncNormal),
            (p("mlp_out_bias"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("norm.gain".into(), vec![d], Init::Ones));
    out.push(("norm.bias".into(), vec![d], Init::Zeros));
    out
}

/// Dotted tensor names in canonical order.
pub fn param_names(config: &EncoderConfig, dims: &InputDims) -> Vec<String> {
    layout(config, dims).into_iter().map(|(n, _, _)| n).collect()
}

fn expected_shapes(config: &EncoderConfig, dims: &InputDims) -> Vec<(String, Vec<usize>)> {
    layout(config, dims)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

pub const INIT_STD: f64 = 0.02;

/// Normal sample with standard deviation `std`, redrawn until within two
/// standard deviations of zero.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: weights from a truncated normal (std 0.02),
/// positional embeddings from a normal (std 0.02), biases zero, norm gains one.
pub fn init_params(config: &EncoderConfig, dims: &InputDims, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout(config, dims).into_iter().map(|(_, shape, init)| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, INIT_STD) as f32).collect(),
            Init::Normal => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * INIT_STD) as f32
                })
                .collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        Tensor::new(shape, data).expect("layout shapes are consistent")
    });
    let mut it = tensors;
    Ok(EncoderParams::take_from(config.depth, &mut it).expect("layout matches parameter groups"))
}

/// Inverted dropout with its own seeded stream.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let keep = T::lit(1.0 / (1.0 - self.p));
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }
}

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    config: &EncoderConfig,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let (h, dh) = (config.heads, config.head_dim());

    let y = g.layernorm(x, p.ln1_gain, p.ln1_bias, 2)?;
    let qkv = linear(g, y, p.qkv_weight, p.qkv_bias)?;
    let qkv = g.reshape(qkv, &[b, n, 3, h, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let sl = g.slice(qkv, 0, i, 1)?;
        *part = g.reshape(sl, &[b, h, n, dh])?;
    }
    let [q, k, v] = parts;
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 3)?;
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, n, d])?;
    let o = linear(g, o, p.proj_weight, p.proj_bias)?;
    let o = maybe_dropout(g, o, dropout)?;
    let x = g.add(x, o)?;

    let y = g.layernorm(x, p.ln2_gain, p.ln2_bias, 2)?;
    let y = linear(g, y, p.mlp_in_weight, p.mlp_in_bias)?;
    let y = g.gelu(y)?;
    let y = linear(g, y, p.mlp_out_weight, p.mlp_out_bias)?;
    let y = maybe_dropout(g, y, dropout)?;
    g.add(x, y)
}

/// Encode patches `[B, N, M, F]` into embeddings `[B, N, D]`.
///
/// Pass `Some(dropout)` for training-mode dropout; `None` is inference mode
/// and fully deterministic.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    params: &EncoderVars,
    config: &EncoderConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let s = g.shape(patches).to_vec();
    let w = g.shape(params.embed.patch_weight).to_vec();
    let pos = g.shape(params.embed.pos_embed).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("encoder input must be [B, N, M, F], got {:?}", s));
    }
    let (b, n) = (s[0], s[1]);
    if s[2] * s[3] != w[0] || pos[0] != n || w[1] != config.latent_dim {
        return Err(shape_err!(
            "encoder input {:?} does not match patch projection {:?} and positional embedding {:?}",
            s,
            w,
            pos
        ));
    }
    let x = g.reshape(patches, &[b, n, s[2] * s[3]])?;
    let x = linear(g, x, params.embed.patch_weight, params.embed.patch_bias)?;
    let x = g.add(x, params.embed.pos_embed)?;
    let mut x = maybe_dropout(g, x, &mut dropout)?;
    for (i, bp) in params.blocks.iter().enumerate() {
        x = block(g, x, bp, config, &mut dropout).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("encoder block {i}: {m}")),
            e => e,
        })?;
    }
    g.layernorm(x, params.norm.gain, params.norm.bias, 2)
}
