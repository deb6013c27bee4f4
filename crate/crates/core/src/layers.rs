//! Building blocks shared by the transformer and U-Net architectures.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{
    Activation, ChannelLayout, Padding, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var,
};

pub const NORM_EPS: f64 = 1e-5;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn sample<T: Real, R: Rng + ?Sized>(self, rng: &mut R, shape: &[usize]) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::ONE),
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::from_f64(z * std);
                }
            }),
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-limit..limit)))
            }
        }
    }
}

/// Forward-pass context: parameter values plus the dropout RNG when training.
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Ctx {
            store,
            dropout_rng: None,
        }
    }

    pub fn train(store: &'a ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            store,
            dropout_rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn p(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(self.store, id)
    }
}

/// Parameter factory that prefixes names and tags their reporting component.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub component: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, component: impl Into<String>) -> Self {
        Builder {
            store,
            rng,
            component: component.into(),
        }
    }

    pub fn param(&mut self, name: &str, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = init.sample(self.rng, shape);
        self.store.add(name, self.component.clone(), kind, value)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Dense {
            weight: b.param(&format!("{name}.weight"), ParamKind::Weight, &[din, dout], init)?,
            bias: b.param(&format!("{name}.bias"), ParamKind::Bias, &[dout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(tape, self.weight), ctx.p(tape, self.bias));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        init: Init,
    ) -> Result<Self> {
        let init = match init {
            Init::GlorotUniform { .. } => Init::GlorotUniform {
                fan_in: cin * size * size,
                fan_out: cout * size * size,
            },
            other => other,
        };
        Ok(Conv {
            kernel: b.param(
                &format!("{name}.weight"),
                ParamKind::Weight,
                &[cout, cin, size, size],
                init,
            )?,
            bias: b.param(&format!("{name}.bias"), ParamKind::Bias, &[cout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (ctx.p(tape, self.kernel), ctx.p(tape, self.bias));
        tape.conv2d(x, k, Some(b), Padding::Same)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            gamma: b.param(&format!("{name}.gamma"), ParamKind::NormScale, &[channels], Init::Ones)?,
            beta: b.param(&format!("{name}.beta"), ParamKind::NormShift, &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ctx: &Ctx<'_, T>,
        x: Var,
        layout: ChannelLayout,
    ) -> Result<Var> {
        let (g, b) = (ctx.p(tape, self.gamma), ctx.p(tape, self.beta));
        tape.group_norm(x, self.groups, g, b, NORM_EPS, layout)
    }
}

/// Linear projection of flattened non-overlapping patches.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub proj: Dense,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        patch: usize,
        in_channels: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        Ok(PatchEmbed {
            patch,
            in_channels,
            embed_dim,
            proj: Dense::new(
                b,
                name,
                patch * patch * in_channels,
                embed_dim,
                Init::TruncNormal(0.02),
            )?,
        })
    }

    /// `image[C,H,W] -> tokens[(H/P)*(W/P), D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, image: Var) -> Result<Var> {
        if tape.shape(image).first() != Some(&self.in_channels) {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "expected {} channels, got {:?}",
                    self.in_channels,
                    tape.shape(image)
                ),
            ));
        }
        let patches = tape.patchify(image, self.patch)?;
        self.proj.forward(tape, ctx, patches)
    }
}

/// Learnable additive table, one row per token.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub tokens: usize,
    pub dim: usize,
}

impl PositionalEmbedding {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        tokens: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(PositionalEmbedding {
            table: b.param(name, ParamKind::Embedding, &[tokens, dim], Init::TruncNormal(0.02))?,
            tokens,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, tokens: Var) -> Result<Var> {
        if tape.shape(tokens) != [self.tokens, self.dim] {
            return Err(Error::dim(
                "add_positional",
                format!(
                    "tokens {:?} vs table [{}, {}]",
                    tape.shape(tokens),
                    self.tokens,
                    self.dim
                ),
            ));
        }
        let table = ctx.p(tape, self.table);
        tape.add(tokens, table)
    }
}

/// Pre-norm transformer layer: `x + attn(norm(x))`, then `+ mlp(norm(.))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: GroupNorm,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub norm2: GroupNorm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerDims {
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub groups: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: TransformerDims) -> Result<Self> {
        let width = d.heads * d.head_dim;
        let init = Init::TruncNormal(0.02);
        Ok(TransformerBlock {
            norm1: GroupNorm::new(b, &format!("{name}.norm1"), d.embed_dim, d.groups)?,
            query: Dense::new(b, &format!("{name}.attn.query"), d.embed_dim, width, init)?,
            key: Dense::new(b, &format!("{name}.attn.key"), d.embed_dim, width, init)?,
            value: Dense::new(b, &format!("{name}.attn.value"), d.embed_dim, width, init)?,
            out: Dense::new(b, &format!("{name}.attn.out"), width, d.embed_dim, init)?,
            norm2: GroupNorm::new(b, &format!("{name}.norm2"), d.embed_dim, d.groups)?,
            fc1: Dense::new(b, &format!("{name}.mlp.fc1"), d.embed_dim, d.mlp_hidden, init)?,
            fc2: Dense::new(b, &format!("{name}.mlp.fc2"), d.mlp_hidden, d.embed_dim, init)?,
            heads: d.heads,
            head_dim: d.head_dim,
            dropout: d.dropout,
        })
    }

    /// Multi-head self-attention on `[T, D]` tokens (no normalization or residual).
    pub fn mhsa<T: Real>(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let q = self.query.forward(tape, ctx, x)?;
        let k = self.key.forward(tape, ctx, x)?;
        let v = self.value.forward(tape, ctx, x)?;
        let dropout = ctx
            .dropout_rng
            .as_deref_mut()
            .map(|rng| (self.dropout, rng));
        let a = tape.attention(q, k, v, self.heads, self.head_dim, dropout)?;
        self.out.forward(tape, ctx, a)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, ctx, x, ChannelLayout::Last)?;
        let a = self.mhsa(tape, ctx, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, ctx, x, ChannelLayout::Last)?;
        let h = self.fc1.forward(tape, ctx, h)?;
        let h = tape.activation(h, Activation::Gelu);
        let h = self.fc2.forward(tape, ctx, h)?;
        tape.add(x, h)
    }
}

/// `shortcut(x) + conv2(swish(conv1(norm(x))))`; the shortcut is a 1x1
/// convolution when the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm: GroupNorm,
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(ResBlock {
            norm: GroupNorm::new(b, &format!("{name}.norm"), cin, groups)?,
            conv1: Conv::new(b, &format!("{name}.conv1"), cin, cout, kernel, init)?,
            conv2: Conv::new(b, &format!("{name}.conv2"), cout, cout, kernel, init)?,
            shortcut: if cin != cout {
                Some(Conv::new(b, &format!("{name}.shortcut"), cin, cout, 1, init)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(tape, ctx, x)?,
            None => x,
        };
        let h = self.norm.forward(tape, ctx, x, ChannelLayout::First)?;
        let h = self.conv1.forward(tape, ctx, h)?;
        let h = tape.activation(h, Activation::Swish);
        let h = self.conv2.forward(tape, ctx, h)?;
        tape.add(skip, h)
    }
}

/// Optional 2x bilinear upsampling followed by a residual block.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub upsample: bool,
    pub block: ResBlock,
}

impl DecoderStage {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let x = if self.upsample {
            let (h, w) = spatial(tape, x, "decoder_stage")?;
            tape.bilinear_resize(x, 2 * h, 2 * w)?
        } else {
            x
        };
        self.block.forward(tape, ctx, x)
    }
}

/// Residual blocks whose outputs become skips, then 2x average pooling.
#[derive(Debug, Clone)]
pub struct UnetDownStage {
    pub blocks: Vec<ResBlock>,
}

impl UnetDownStage {
    /// Returns `(skips, pooled)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ctx: &Ctx<'_, T>,
        x: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let (h, w) = spatial(tape, x, "unet_down_stage")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("unet_down_stage", format!("odd extents {h}x{w}")));
        }
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(tape, ctx, x)?;
            skips.push(x);
        }
        let pooled = tape.avg_pool2(x)?;
        Ok((skips, pooled))
    }
}

/// 2x bilinear upsampling, channel concatenation with the stage's skips,
/// then residual blocks.
#[derive(Debug, Clone)]
pub struct UnetUpStage {
    pub blocks: Vec<ResBlock>,
}

impl UnetUpStage {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ctx: &Ctx<'_, T>,
        x: Var,
        skips: &[Var],
    ) -> Result<Var> {
        let (h, w) = spatial(tape, x, "unet_up_stage")?;
        let up = tape.bilinear_resize(x, 2 * h, 2 * w)?;
        for &s in skips {
            let ss = tape.shape(s);
            if ss.len() != 3 || ss[1] != 2 * h || ss[2] != 2 * w {
                return Err(Error::dim(
                    "unet_up_stage",
                    format!("skip {:?} vs upsampled {}x{}", ss, 2 * h, 2 * w),
                ));
            }
        }
        let mut parts = vec![up];
        parts.extend_from_slice(skips);
        let mut x = tape.concat(&parts)?;
        for block in &self.blocks {
            x = block.forward(tape, ctx, x)?;
        }
        Ok(x)
    }
}

fn spatial<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [_, h, w] => Ok((h, w)),
        ref s => Err(Error::dim(op, format!("expected [C,H,W], got {s:?}"))),
    }
}
