//! Residual blocks of causal dilated convolutions and stacks of them.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{bn_backward, bn_forward, BatchNormParams, BatchStats, BnCache, Mode, RunningStats};
use super::conv::{causal_dilated_conv, causal_dilated_conv_backward, ConvCache, ConvFilterBank, Segments};
use super::dropout::dropout_masks;
use super::linalg::{gemm_acc, gemm_tn_acc, matmul_nt};
use super::params::{init_uniform, prefixed, Params};
use super::TrainCtx;
use crate::error::{ensure_shape, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.relu(),
            Activation::Identity => v,
        }
    }

    fn grad<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Relu if pre <= T::zero() => T::zero(),
            _ => T::one(),
        }
    }
}

/// Two convolutions with a shared dilation plus a residual path.
///
/// `y = act(norm(conv2(act(norm(conv1(x)))))) + proj(x)`, where `proj` is the
/// identity when channel counts agree and a learned 1×1 map otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Real> {
    pub conv1: ConvFilterBank<T>,
    pub conv2: ConvFilterBank<T>,
    /// `[d_in × d_out]`, present only when the channel counts differ.
    pub proj: Option<Array2<T>>,
    pub norm: Option<[BatchNormParams<T>; 2]>,
    pub activation: Activation,
}

/// Running statistics of a block's two normalization layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats<T: Real> {
    pub first: RunningStats<T>,
    pub second: RunningStats<T>,
}

impl<T: Real> BlockStats<T> {
    pub fn new(dim: usize) -> Self {
        BlockStats { first: RunningStats::new(dim), second: RunningStats::new(dim) }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<T: Real> {
    x: Array2<T>,
    c1: ConvCache<T>,
    c2: ConvCache<T>,
    n1: Option<BnCache<T>>,
    n2: Option<BnCache<T>>,
    pre1: Array2<T>,
    pre2: Array2<T>,
    m1: Option<Array2<T>>,
    m2: Option<Array2<T>>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(conv1: ConvFilterBank<T>, conv2: ConvFilterBank<T>, proj: Option<Array2<T>>, activation: Activation) -> Result<Self> {
        if conv1.dilation != conv2.dilation {
            return Err(Error::config("both convolutions of a block share one dilation"));
        }
        if conv1.out_channels() != conv2.in_channels() {
            return Err(Error::shape("conv1 output channels must feed conv2"));
        }
        let (din, dout) = (conv1.in_channels(), conv2.out_channels());
        match &proj {
            None if din != dout => return Err(Error::shape("a projection is required when channel counts differ")),
            Some(p) if p.dim() != (din, dout) => return Err(Error::shape("projection shape")),
            _ => {}
        }
        Ok(ResidualBlock { conv1, conv2, proj, norm: None, activation })
    }

    pub fn random<R: Rng + ?Sized>(
        k: usize,
        d_in: usize,
        d_out: usize,
        dilation: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = ConvFilterBank::random(k, d_in, d_out, dilation, rng);
        let conv2 = ConvFilterBank::random(k, d_out, d_out, dilation, rng);
        let proj = (d_in != d_out)
            .then(|| init_uniform::<T, _>(&[d_in, d_out], d_in, rng).into_dimensionality().expect("rank 2"));
        ResidualBlock {
            conv1,
            conv2,
            proj,
            norm: batch_norm.then(|| [BatchNormParams::new(d_out), BatchNormParams::new(d_out)]),
            activation: Activation::Relu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn lookback(&self) -> usize {
        self.conv1.lookback() + self.conv2.lookback()
    }

    pub fn forward(
        &self,
        x: ArrayView2<T>,
        segs: &Segments,
        stats: Option<&BlockStats<T>>,
        mut train: Option<&mut TrainCtx>,
    ) -> Result<(Array2<T>, BlockCache<T>, Option<[BatchStats<T>; 2]>)> {
        ensure_shape(x.ncols() == self.in_channels(), || {
            format!("block input has {} channels, expected {}", x.ncols(), self.in_channels())
        })?;
        let mode = if train.is_some() { Mode::Train } else { Mode::Eval };
        let fallback = RunningStats::new(self.out_channels());
        let (rs1, rs2) = match stats {
            Some(s) => (&s.first, &s.second),
            None => (&fallback, &fallback),
        };
        let (a1, c1) = causal_dilated_conv(x, segs, &self.conv1)?;
        let (z1, n1, bs1) = match &self.norm {
            Some([p, _]) => {
                let (y, c, s) = bn_forward(a1.view(), segs.offsets(), p, rs1, mode);
                (y, Some(c), s)
            }
            None => (a1, None, None),
        };
        let mut h1 = z1.mapv(|v| self.activation.apply(v));
        let m1 = drop_mask(&mut train, h1.dim())?;
        if let Some(m) = &m1 {
            h1 *= m;
        }
        let (a2, c2) = causal_dilated_conv(h1.view(), segs, &self.conv2)?;
        let (z2, n2, bs2) = match &self.norm {
            Some([_, p]) => {
                let (y, c, s) = bn_forward(a2.view(), segs.offsets(), p, rs2, mode);
                (y, Some(c), s)
            }
            None => (a2, None, None),
        };
        let mut y = z2.mapv(|v| self.activation.apply(v));
        let m2 = drop_mask(&mut train, y.dim())?;
        if let Some(m) = &m2 {
            y *= m;
        }
        match &self.proj {
            Some(p) => gemm_acc(x, p.view(), y.view_mut()),
            None => y += &x,
        }
        let batch = match (bs1, bs2) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        let cache = BlockCache { x: x.to_owned(), c1, c2, n1, n2, pre1: z1, pre2: z2, m1, m2 };
        Ok((y, cache, batch))
    }

    pub fn backward(&self, dy: ArrayView2<T>, segs: &Segments, cache: &BlockCache<T>, grads: &mut ResidualBlock<T>) -> Array2<T> {
        let mut dx = match &self.proj {
            Some(p) => {
                gemm_tn_acc(cache.x.view(), dy, grads.proj.as_mut().expect("grad layout").view_mut());
                matmul_nt(dy, p.view())
            }
            None => dy.to_owned(),
        };
        let mut d = dy.to_owned();
        if let Some(m) = &cache.m2 {
            d *= m;
        }
        d.zip_mut_with(&cache.pre2, |g, &z| *g = *g * self.activation.grad(z));
        if let (Some([_, p]), Some(c)) = (&self.norm, &cache.n2) {
            let g = &mut grads.norm.as_mut().expect("grad layout")[1];
            d = bn_backward(d.view(), p, c, g);
        }
        let mut d = causal_dilated_conv_backward(d.view(), segs, &self.conv2, &cache.c2, &mut grads.conv2);
        if let Some(m) = &cache.m1 {
            d *= m;
        }
        d.zip_mut_with(&cache.pre1, |g, &z| *g = *g * self.activation.grad(z));
        if let (Some([p, _]), Some(c)) = (&self.norm, &cache.n1) {
            let g = &mut grads.norm.as_mut().expect("grad layout")[0];
            d = bn_backward(d.view(), p, c, g);
        }
        dx += &causal_dilated_conv_backward(d.view(), segs, &self.conv1, &cache.c1, &mut grads.conv1);
        dx
    }
}

fn drop_mask<T: Real>(train: &mut Option<&mut TrainCtx>, dim: (usize, usize)) -> Result<Option<Array2<T>>> {
    match train {
        Some(ctx) if ctx.dropout > 0.0 => Ok(Some(dropout_masks(dim.0, dim.1, ctx.dropout, &mut ctx.rng)?)),
        _ => Ok(None),
    }
}

/// Plain residual block over a single sequence.
pub fn residual_block<T: Real>(x: ArrayView2<T>, block: &ResidualBlock<T>) -> Result<Array2<T>> {
    if x.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    let (y, _, _) = block.forward(x, &Segments::single(x.nrows()), None, None)?;
    Ok(y)
}

impl<T: Real> Params<T> for ResidualBlock<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = prefixed("conv1", self.conv1.tensors());
        v.extend(prefixed("conv2", self.conv2.tensors()));
        if let Some(p) = &self.proj {
            v.push(("proj".to_string(), p.view().into_dyn()));
        }
        if let Some([a, b]) = &self.norm {
            v.extend(prefixed("bn1", a.tensors()));
            v.extend(prefixed("bn2", b.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = prefixed("conv1", self.conv1.tensors_mut());
        v.extend(prefixed("conv2", self.conv2.tensors_mut()));
        if let Some(p) = &mut self.proj {
            v.push(("proj".to_string(), p.view_mut().into_dyn()));
        }
        if let Some([a, b]) = &mut self.norm {
            v.extend(prefixed("bn1", a.tensors_mut()));
            v.extend(prefixed("bn2", b.tensors_mut()));
        }
        v
    }
}

/// Blocks applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnStack<T: Real> {
    pub blocks: Vec<ResidualBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct TcnCache<T: Real> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> TcnStack<T> {
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        channels: usize,
        k: usize,
        dilations: &[usize],
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let blocks = dilations
            .iter()
            .enumerate()
            .map(|(i, &l)| ResidualBlock::random(k, if i == 0 { input } else { channels }, channels, l, batch_norm, rng))
            .collect();
        TcnStack { blocks }
    }

    /// Trailing steps (including `t`) that can influence the output at `t`.
    pub fn receptive_field(&self) -> usize {
        1 + self.blocks.iter().map(|b| b.lookback()).sum::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }

    pub fn new_stats(&self) -> Vec<BlockStats<T>> {
        self.blocks.iter().map(|b| BlockStats::new(b.out_channels())).collect()
    }

    pub fn forward(
        &self,
        x: ArrayView2<T>,
        segs: &Segments,
        stats: Option<&[BlockStats<T>]>,
        mut train: Option<&mut TrainCtx>,
    ) -> Result<(Array2<T>, TcnCache<T>, Vec<Option<[BatchStats<T>; 2]>>)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut batch = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let st = stats.map(|s| &s[i]);
            let (y, c, bs) = b.forward(h.view(), segs, st, train.as_deref_mut())?;
            caches.push(c);
            batch.push(bs);
            h = y;
        }
        Ok((h, TcnCache { blocks: caches }, batch))
    }

    pub fn backward(&self, dy: Array2<T>, segs: &Segments, cache: &TcnCache<T>, grads: &mut TcnStack<T>) -> Array2<T> {
        let mut d = dy;
        for i in (0..self.blocks.len()).rev() {
            d = self.blocks[i].backward(d.view(), segs, &cache.blocks[i], &mut grads.blocks[i]);
        }
        d
    }
}

impl<T: Real> Params<T> for TcnStack<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.blocks.iter().enumerate().flat_map(|(i, b)| prefixed(&format!("b{i}"), b.tensors())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("b{i}"), b.tensors_mut()))
            .collect()
    }
}
