//! Reverse-mode automatic differentiation over a linear op record.
//!
//! Each differentiable call appends a node holding its output value and the
//! state its adjoint needs. [`Tape::gradients`] walks the nodes in exact
//! reverse order; gradients reaching the same node are summed.

use rand::Rng;

use super::kernels::{self, Activation, AttnGeom, ChannelLayout, ConvGeom, GroupNormCache, Pads};
use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves extents; kernel extents must be odd.
    Same,
    /// No padding.
    Valid,
}

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<T>,
    },
    Bilinear {
        x: Var,
        channels: usize,
        input: (usize, usize),
        output: (usize, usize),
    },
    ReplicationPad {
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
        pads: Pads,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        channels: usize,
        spatial: usize,
        layout: ChannelLayout,
        cache: GroupNormCache<T>,
    },
    Softmax {
        x: Var,
        k: usize,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    AvgPool2 {
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
        mask: Option<Vec<T>>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn check3(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected [C,H,W], got {:?}", t.shape()))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Input whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Records a model parameter; [`Tape::backward`] accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `y = x * w + b` over the last axis of `x[*, Din]` with `w[Din, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let din = *xs.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::dim("linear", format!("x {xs:?} vs w {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs w {ws:?}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut y = vec![T::ZERO; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), rows, din),
            MatRef::new(self.value(w).data(), din, dout),
            MatMut::new(&mut y, rows, dout),
            b.is_some(),
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Stride-1 cross-correlation of `x[C,H,W]` with `k[Cout,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let (c, h, w) = check3("conv2d", self.value(x))?;
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 || ks[1] != c {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} vs kernel {ks:?}", self.shape(x)),
            ));
        }
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::dim(
                        "conv2d",
                        format!("same padding needs odd kernel, got {kh}x{kw}"),
                    ));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                (0, 0)
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} vs {cout} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            pad_h,
            pad_w,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            kernels::im2col(self.value(x).data(), &geom)
        };
        let y = {
            let src = if geom.is_pointwise() {
                self.value(x).data()
            } else {
                &cols
            };
            kernels::conv2d_forward(
                src,
                self.value(k).data(),
                b.map(|b| self.value(b).data()),
                cout,
                &geom,
            )
        };
        let out = Tensor::new(&[cout, geom.out_h(), geom.out_w()], y)?;
        let inputs: Vec<Var> = [Some(x), Some(k), b].into_iter().flatten().collect();
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cout,
                cols,
            },
            &inputs,
        ))
    }

    /// Half-pixel bilinear resize of `x[C,H,W]` with edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = check3("bilinear_resize", self.value(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("target {out_h}x{out_w} must be positive"),
            ));
        }
        let y = kernels::bilinear_forward(self.value(x).data(), c, (h, w), (out_h, out_w));
        let out = Tensor::new(&[c, out_h, out_w], y)?;
        Ok(self.push(
            out,
            Op::Bilinear {
                x,
                channels: c,
                input: (h, w),
                output: (out_h, out_w),
            },
            &[x],
        ))
    }

    pub fn replication_pad(&mut self, x: Var, pads: Pads) -> Result<Var> {
        let (c, h, w) = check3("replication_pad", self.value(x))?;
        let y = kernels::replication_pad_forward(self.value(x).data(), c, h, w, pads);
        let out = Tensor::new(
            &[c, h + pads.top + pads.bottom, w + pads.left + pads.right],
            y,
        )?;
        Ok(self.push(
            out,
            Op::ReplicationPad {
                x,
                channels: c,
                h,
                w,
                pads,
            },
            &[x],
        ))
    }

    /// Group normalization. With [`ChannelLayout::First`] the input is
    /// `[C, spatial...]`; with [`ChannelLayout::Last`] it is `[S, C]`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
        layout: ChannelLayout,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("group_norm", format!("rank too low: {shape:?}")));
        }
        let channels = match layout {
            ChannelLayout::First => shape[0],
            ChannelLayout::Last => {
                if shape.len() != 2 {
                    return Err(Error::dim(
                        "group_norm",
                        format!("channels-last expects [S,C], got {shape:?}"),
                    ));
                }
                shape[1]
            }
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(
                "group_norm",
                format!(
                    "affine {:?}/{:?} vs {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let spatial = self.value(x).len() / channels;
        let (y, cache) = kernels::group_norm_forward(
            self.value(x).data(),
            channels,
            spatial,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            layout,
        );
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                channels,
                spatial,
                layout,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let y = kernels::softmax_rows(self.value(x).data(), k);
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(out, Op::Softmax { x, k }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = kernels::activation_forward(kind, self.value(x).data());
        let out = Tensor::new(self.shape(x), y).expect("shape preserved");
        self.push(out, Op::Activation { x, kind }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = check3("avg_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("avg_pool2", format!("odd extents {h}x{w}")));
        }
        let y = kernels::avg_pool2_forward(self.value(x).data(), c, h, w);
        let out = Tensor::new(&[c, h / 2, w / 2], y)?;
        Ok(self.push(
            out,
            Op::AvgPool2 {
                x,
                channels: c,
                h,
                w,
            },
            &[x],
        ))
    }

    /// Splits `x[C,H,W]` into row-major non-overlapping `patch x patch`
    /// tiles, each flattened channel-major then row then column: `[T, C*P*P]`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (c, h, w) = check3("patchify", self.value(x))?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(
                "patchify",
                format!("{h}x{w} not divisible by patch {patch}"),
            ));
        }
        let index = kernels::patch_gather_index(c, h, w, patch);
        let src = self.value(x).data();
        let y: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(&[(h / patch) * (w / patch), c * patch * patch], y)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => {
                return Err(Error::dim(
                    "transpose",
                    format!("expected 2-D, got {:?}", self.shape(x)),
                ))
            }
        };
        let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        let src = self.value(x).data();
        let y: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(&[c, r], y)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(first), s),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention on `[T, heads*head_dim]`
    /// projections. Dropout on the attention probabilities is applied when
    /// `dropout` carries a positive rate and an RNG.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || s[1] != heads * head_dim || self.shape(k) != s || self.shape(v) != s {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} for {heads} heads of {head_dim}",
                    s,
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let geom = AttnGeom {
            tokens: s[0],
            heads,
            head_dim,
        };
        let mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - rate));
                let n = heads * geom.tokens * geom.tokens;
                Some(
                    (0..n)
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                T::ZERO
                            } else {
                                keep
                            }
                        })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let (y, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            geom,
            mask.as_deref(),
        );
        let out = Tensor::new(&s, y)?;
        let grad = [q, k, v].iter().any(|&x| self.needs(x));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs: if grad { probs } else { Vec::new() },
                mask,
            },
            &[q, k, v],
        ))
    }

    /// Mean squared difference over all elements, as a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim(
                "mse",
                format!("pred {:?} vs target {:?}", p.shape(), t.shape()),
            ));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::from_f64(total / n));
        Ok(self.push(out, Op::Mse { pred, target }, &[pred, target]))
    }

    /// `sum(x * weights)` as a `[1]` scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![T::ONE; n]).expect("matching length")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    /// Accumulates `d loss / d param` into every recorded parameter's grad.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let dst = store.get_mut(*id).grad.data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v), data).expect("gradient shape"));
            }
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = gd.len() / dout.max(1);
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; rows * din];
                    gemm(
                        MatRef::new(gd, rows, dout),
                        MatRef::new(self.value(*w).data(), din, dout).t(),
                        MatMut::new(&mut dx, rows, din),
                        false,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::ZERO; din * dout];
                    gemm(
                        MatRef::new(self.value(*x).data(), rows, din).t(),
                        MatRef::new(gd, rows, dout),
                        MatMut::new(&mut dw, din, dout),
                        false,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::ZERO; dout];
                    for row in gd.chunks_exact(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cout,
                cols,
            } => {
                let spatial = geom.out_h() * geom.out_w();
                let plen = geom.patch_len();
                if self.needs(*k) {
                    let src = if geom.is_pointwise() {
                        self.value(*x).data()
                    } else {
                        cols
                    };
                    let mut dk = vec![T::ZERO; cout * plen];
                    gemm(
                        MatRef::new(gd, *cout, spatial),
                        MatRef::new(src, plen, spatial).t(),
                        MatMut::new(&mut dk, *cout, plen),
                        false,
                    );
                    self.accumulate(grads, *k, dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::ZERO; plen * spatial];
                    gemm(
                        MatRef::new(self.value(*k).data(), *cout, plen).t(),
                        MatRef::new(gd, *cout, spatial),
                        MatMut::new(&mut dcols, plen, spatial),
                        false,
                    );
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        kernels::col2im(&dcols, geom)
                    };
                    self.accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    let db = gd.chunks_exact(spatial).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bilinear {
                x,
                channels,
                input,
                output,
            } => {
                let dx = kernels::bilinear_backward(gd, *channels, *input, *output);
                self.accumulate(grads, *x, dx);
            }
            Op::ReplicationPad {
                x,
                channels,
                h,
                w,
                pads,
            } => {
                let dx = kernels::replication_pad_backward(gd, *channels, *h, *w, *pads);
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                channels,
                spatial,
                layout,
                cache,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    gd,
                    cache,
                    *channels,
                    *spatial,
                    *groups,
                    self.value(*gamma).data(),
                    *layout,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax { x, k } => {
                let dx = kernels::softmax_rows_backward(out.data(), gd, *k);
                self.accumulate(grads, *x, dx);
            }
            Op::Activation { x, kind } => {
                let dx = kernels::activation_backward(*kind, self.value(*x).data(), gd);
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2 { x, channels, h, w } => {
                let dx = kernels::avg_pool2_backward(gd, *channels, *h, *w);
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::ZERO; self.value(*x).len()];
                for (&i, &v) in index.iter().zip(gd) {
                    dx[i] += v;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
                mask,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    mask.as_deref(),
                    gd,
                    *geom,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let coef = gd[0] * T::from_f64(2.0 / p.len() as f64);
                let dp: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * coef)
                    .collect();
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|&wv| wv * gd[0]).collect();
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}
