//! Gated recurrent unit cells and stacks with hand-derived backward passes.
//!
//! ```text
//! g = σ(W_g x + U_g s)
//! r = σ(W_r x + U_r s)
//! h = tanh(W_h x + U_h (s ⊙ r))
//! s' = (1 − g) ⊙ D(h) + g ⊙ s
//! ```
//! `D` is recurrent dropout on the candidate only; it is the identity unless a
//! mask is supplied.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::linalg::{gemm_acc, gemm_tn_acc, matvec, matvec_t_acc};
use super::params::{init_uniform, prefixed, Params};
use crate::error::{ensure_shape, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GruBias<T: Real> {
    pub b_g: Array1<T>,
    pub b_r: Array1<T>,
    pub b_h: Array1<T>,
}

/// Weights of one GRU layer: `W_*` are `[hidden × input]`, `U_*` are
/// `[hidden × hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T: Real> {
    pub w_g: Array2<T>,
    pub w_r: Array2<T>,
    pub w_h: Array2<T>,
    pub u_g: Array2<T>,
    pub u_r: Array2<T>,
    pub u_h: Array2<T>,
    pub bias: Option<GruBias<T>>,
}

impl<T: Real> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize, with_bias: bool) -> Self {
        let w = || Array2::zeros((hidden, input));
        let u = || Array2::zeros((hidden, hidden));
        GruParams {
            w_g: w(),
            w_r: w(),
            w_h: w(),
            u_g: u(),
            u_r: u(),
            u_h: u(),
            bias: with_bias.then(|| GruBias {
                b_g: Array1::zeros(hidden),
                b_r: Array1::zeros(hidden),
                b_h: Array1::zeros(hidden),
            }),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, with_bias: bool, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden, with_bias);
        for (name, mut t) in p.tensors_mut() {
            let fan_in = if name.starts_with('u') { hidden } else { input };
            let init = init_uniform::<T, _>(t.shape(), fan_in, rng);
            t.assign(&init);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_g.nrows()
    }
}

impl<T: Real> Params<T> for GruParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = vec![
            ("w_g".to_string(), self.w_g.view().into_dyn()),
            ("w_r".to_string(), self.w_r.view().into_dyn()),
            ("w_h".to_string(), self.w_h.view().into_dyn()),
            ("u_g".to_string(), self.u_g.view().into_dyn()),
            ("u_r".to_string(), self.u_r.view().into_dyn()),
            ("u_h".to_string(), self.u_h.view().into_dyn()),
        ];
        if let Some(b) = &self.bias {
            v.push(("b_g".to_string(), b.b_g.view().into_dyn()));
            v.push(("b_r".to_string(), b.b_r.view().into_dyn()));
            v.push(("b_h".to_string(), b.b_h.view().into_dyn()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = vec![
            ("w_g".to_string(), self.w_g.view_mut().into_dyn()),
            ("w_r".to_string(), self.w_r.view_mut().into_dyn()),
            ("w_h".to_string(), self.w_h.view_mut().into_dyn()),
            ("u_g".to_string(), self.u_g.view_mut().into_dyn()),
            ("u_r".to_string(), self.u_r.view_mut().into_dyn()),
            ("u_h".to_string(), self.u_h.view_mut().into_dyn()),
        ];
        if let Some(b) = &mut self.bias {
            v.push(("b_g".to_string(), b.b_g.view_mut().into_dyn()));
            v.push(("b_r".to_string(), b.b_r.view_mut().into_dyn()));
            v.push(("b_h".to_string(), b.b_h.view_mut().into_dyn()));
        }
        v
    }
}

/// One GRU update for a single input vector.
pub fn gru_cell_step<T: Real>(x: ArrayView1<T>, s_prev: ArrayView1<T>, p: &GruParams<T>) -> Result<Array1<T>> {
    ensure_shape(x.len() == p.input_dim(), || {
        format!("gru input has {} features, layer expects {}", x.len(), p.input_dim())
    })?;
    ensure_shape(s_prev.len() == p.hidden_dim(), || {
        format!("gru state has {} features, layer expects {}", s_prev.len(), p.hidden_dim())
    })?;
    let step = cell_forward(p, x, s_prev, None);
    Ok(step.s_next)
}

struct StepOut<T: Real> {
    g: Array1<T>,
    r: Array1<T>,
    h: Array1<T>,
    s_next: Array1<T>,
}

fn cell_forward<T: Real>(p: &GruParams<T>, x: ArrayView1<T>, s: ArrayView1<T>, mask: Option<ArrayView1<T>>) -> StepOut<T> {
    let x = x.insert_axis(Axis(0));
    let xg = input_projection(&p.w_g, x);
    let xr = input_projection(&p.w_r, x);
    let xh = input_projection(&p.w_h, x);
    recurrent_step(p, xg.row(0), xr.row(0), xh.row(0), s, mask)
}

/// `x · Wᵀ` for a whole sequence at once.
fn input_projection<T: Real>(w: &Array2<T>, x: ArrayView2<T>) -> Array2<T> {
    let wt = w.t().as_standard_layout().into_owned();
    let mut out = Array2::zeros((x.nrows(), w.nrows()));
    gemm_acc(x, wt.view(), out.view_mut());
    out
}

fn recurrent_step<T: Real>(
    p: &GruParams<T>,
    xg: ArrayView1<T>,
    xr: ArrayView1<T>,
    xh: ArrayView1<T>,
    s: ArrayView1<T>,
    mask: Option<ArrayView1<T>>,
) -> StepOut<T> {
    let mut ag = matvec(p.u_g.view(), s);
    ag += &xg;
    let mut ar = matvec(p.u_r.view(), s);
    ar += &xr;
    if let Some(b) = &p.bias {
        ag += &b.b_g;
        ar += &b.b_r;
    }
    let g = ag.mapv(Real::sigmoid);
    let r = ar.mapv(Real::sigmoid);
    let sr = &s * &r;
    let mut ah = matvec(p.u_h.view(), sr.view());
    ah += &xh;
    if let Some(b) = &p.bias {
        ah += &b.b_h;
    }
    let h = ah.mapv(T::tanh);
    let one = T::one();
    let s_next = Array1::from_shape_fn(s.len(), |i| {
        let hd = match mask {
            Some(m) => h[i] * m[i],
            None => h[i],
        };
        (one - g[i]) * hd + g[i] * s[i]
    });
    StepOut { g, r, h, s_next }
}

/// Everything the backward pass of one layer over a sequence needs.
#[derive(Debug, Clone)]
pub struct GruSeqCache<T: Real> {
    x: Array2<T>,
    s_prev: Array2<T>,
    g: Array2<T>,
    r: Array2<T>,
    h: Array2<T>,
    mask: Option<Array2<T>>,
}

/// Runs one layer over `x: [T × input]` from `s0`; returns all hidden states
/// `[T × hidden]`.
pub fn gru_layer_forward<T: Real>(
    p: &GruParams<T>,
    x: ArrayView2<T>,
    s0: ArrayView1<T>,
    mask: Option<&Array2<T>>,
) -> Result<(Array2<T>, GruSeqCache<T>)> {
    let steps = x.nrows();
    let hid = p.hidden_dim();
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    ensure_shape(x.ncols() == p.input_dim(), || {
        format!("gru input has {} features, layer expects {}", x.ncols(), p.input_dim())
    })?;
    ensure_shape(s0.len() == hid, || format!("initial state has {} features, expected {hid}", s0.len()))?;
    if let Some(m) = mask {
        ensure_shape(m.dim() == (steps, hid), || "dropout mask shape".to_string())?;
    }
    let (xg, xr, xh) = (input_projection(&p.w_g, x), input_projection(&p.w_r, x), input_projection(&p.w_h, x));
    let mut out = Array2::zeros((steps, hid));
    let mut s_prev = Array2::zeros((steps, hid));
    let mut g = Array2::zeros((steps, hid));
    let mut r = Array2::zeros((steps, hid));
    let mut h = Array2::zeros((steps, hid));
    let mut s = s0.to_owned();
    for t in 0..steps {
        let m = mask.map(|m| m.row(t));
        let o = recurrent_step(p, xg.row(t), xr.row(t), xh.row(t), s.view(), m);
        s_prev.row_mut(t).assign(&s);
        g.row_mut(t).assign(&o.g);
        r.row_mut(t).assign(&o.r);
        h.row_mut(t).assign(&o.h);
        out.row_mut(t).assign(&o.s_next);
        s = o.s_next;
    }
    let cache = GruSeqCache { x: x.to_owned(), s_prev, g, r, h, mask: mask.cloned() };
    Ok((out, cache))
}

/// Backward through one layer. `d_out` holds the gradient w.r.t. every
/// emitted hidden state (the final-state gradient belongs in its last row).
/// Returns `(d_x, d_s0)` and accumulates into `grads`.
pub fn gru_layer_backward<T: Real>(
    p: &GruParams<T>,
    cache: &GruSeqCache<T>,
    d_out: ArrayView2<T>,
    grads: &mut GruParams<T>,
) -> (Array2<T>, Array1<T>) {
    let (steps, hid) = cache.g.dim();
    let one = T::one();
    let mut da_g = Array2::zeros((steps, hid));
    let mut da_r = Array2::zeros((steps, hid));
    let mut da_h = Array2::zeros((steps, hid));
    let mut carry = Array1::<T>::zeros(hid);
    for t in (0..steps).rev() {
        let ds: Array1<T> = &d_out.row(t) + &carry;
        let g = cache.g.row(t);
        let r = cache.r.row(t);
        let h = cache.h.row(t);
        let s = cache.s_prev.row(t);
        let mut ds_prev = Array1::zeros(hid);
        let mut dah = Array1::zeros(hid);
        let mut dag = Array1::zeros(hid);
        for i in 0..hid {
            let m = cache.mask.as_ref().map_or(one, |m| m[[t, i]]);
            let hd = h[i] * m;
            let dg = ds[i] * (s[i] - hd);
            let dh = ds[i] * (one - g[i]) * m;
            ds_prev[i] = ds[i] * g[i];
            dah[i] = dh * (one - h[i] * h[i]);
            dag[i] = dg * g[i] * (one - g[i]);
        }
        let mut d_sr = Array1::zeros(hid);
        matvec_t_acc(p.u_h.view(), dah.view(), &mut d_sr);
        let mut dar = Array1::zeros(hid);
        for i in 0..hid {
            ds_prev[i] += d_sr[i] * r[i];
            let dr = d_sr[i] * s[i];
            dar[i] = dr * r[i] * (one - r[i]);
        }
        matvec_t_acc(p.u_g.view(), dag.view(), &mut ds_prev);
        matvec_t_acc(p.u_r.view(), dar.view(), &mut ds_prev);
        da_g.row_mut(t).assign(&dag);
        da_r.row_mut(t).assign(&dar);
        da_h.row_mut(t).assign(&dah);
        carry = ds_prev;
    }
    let sr = &cache.s_prev * &cache.r;
    gemm_tn_acc(da_g.view(), cache.x.view(), grads.w_g.view_mut());
    gemm_tn_acc(da_r.view(), cache.x.view(), grads.w_r.view_mut());
    gemm_tn_acc(da_h.view(), cache.x.view(), grads.w_h.view_mut());
    gemm_tn_acc(da_g.view(), cache.s_prev.view(), grads.u_g.view_mut());
    gemm_tn_acc(da_r.view(), cache.s_prev.view(), grads.u_r.view_mut());
    gemm_tn_acc(da_h.view(), sr.view(), grads.u_h.view_mut());
    if let Some(b) = &mut grads.bias {
        b.b_g += &da_g.sum_axis(Axis(0));
        b.b_r += &da_r.sum_axis(Axis(0));
        b.b_h += &da_h.sum_axis(Axis(0));
    }
    let mut dx = Array2::zeros(cache.x.dim());
    gemm_acc(da_g.view(), p.w_g.view(), dx.view_mut());
    gemm_acc(da_r.view(), p.w_r.view(), dx.view_mut());
    gemm_acc(da_h.view(), p.w_h.view(), dx.view_mut());
    (dx, carry)
}

/// Stacked GRU layers; layer `l` consumes layer `l − 1`'s hidden sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack<T: Real> {
    pub layers: Vec<GruParams<T>>,
}

#[derive(Debug, Clone)]
pub struct GruStackCache<T: Real> {
    layers: Vec<GruSeqCache<T>>,
    top: Array2<T>,
}

impl<T: Real> GruStackCache<T> {
    /// Hidden sequence emitted by layer `l`.
    pub fn layer_output(&self, l: usize) -> ArrayView2<'_, T> {
        if l + 1 < self.layers.len() {
            self.layers[l + 1].x.view()
        } else {
            self.top.view()
        }
    }
}

impl<T: Real> GruStack<T> {
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, layers: usize, with_bias: bool, rng: &mut R) -> Self {
        let layers = (0..layers)
            .map(|l| GruParams::random(if l == 0 { input } else { hidden }, hidden, with_bias, rng))
            .collect();
        GruStack { layers }
    }

    pub fn zeros(input: usize, hidden: usize, layers: usize, with_bias: bool) -> Self {
        let layers = (0..layers)
            .map(|l| GruParams::zeros(if l == 0 { input } else { hidden }, hidden, with_bias))
            .collect();
        GruStack { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim())
    }

    pub fn zero_state(&self) -> Vec<Array1<T>> {
        self.layers.iter().map(|l| Array1::zeros(l.hidden_dim())).collect()
    }

    /// Returns the top layer's hidden sequence, every layer's final state,
    /// and a cache for [`GruStack::backward`].
    pub fn forward(
        &self,
        x: ArrayView2<T>,
        s0: &[Array1<T>],
        masks: Option<&[Array2<T>]>,
    ) -> Result<(Array2<T>, Vec<Array1<T>>, GruStackCache<T>)> {
        if x.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        ensure_shape(s0.len() == self.layers.len(), || {
            format!("{} initial states for {} layers", s0.len(), self.layers.len())
        })?;
        let mut input = x.to_owned();
        let mut finals = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = masks.map(|m| &m[l]);
            let (out, cache) = gru_layer_forward(layer, input.view(), s0[l].view(), mask)?;
            finals.push(out.row(out.nrows() - 1).to_owned());
            caches.push(cache);
            input = out;
        }
        let top = input.clone();
        Ok((input, finals, GruStackCache { layers: caches, top }))
    }

    /// `d_top` is the gradient w.r.t. the top layer's hidden sequence;
    /// `d_finals` (optional) w.r.t. each layer's final state. Returns the
    /// input gradient and per-layer initial-state gradients.
    pub fn backward(
        &self,
        cache: &GruStackCache<T>,
        d_top: Array2<T>,
        d_finals: Option<&[Array1<T>]>,
        grads: &mut GruStack<T>,
    ) -> (Array2<T>, Vec<Array1<T>>) {
        let depth = self.layers.len();
        let steps = d_top.nrows();
        let mut d_layers: Vec<Option<Array2<T>>> = vec![None; depth];
        if let Some(df) = d_finals {
            for (l, d) in d_layers.iter_mut().enumerate() {
                let mut m = Array2::zeros((steps, self.layers[l].hidden_dim()));
                m.row_mut(steps - 1).assign(&df[l]);
                *d = Some(m);
            }
        }
        match &mut d_layers[depth - 1] {
            Some(m) => *m += &d_top,
            slot => *slot = Some(d_top),
        }
        self.backward_layers(cache, d_layers, grads)
    }

    /// Backward with a gradient w.r.t. any layer's hidden sequence
    /// (`d_layers[l]`, `None` meaning zero).
    pub fn backward_layers(
        &self,
        cache: &GruStackCache<T>,
        mut d_layers: Vec<Option<Array2<T>>>,
        grads: &mut GruStack<T>,
    ) -> (Array2<T>, Vec<Array1<T>>) {
        let depth = self.layers.len();
        let steps = cache.top.nrows();
        let mut ds0 = vec![Array1::zeros(0); depth];
        let mut from_above: Option<Array2<T>> = None;
        for l in (0..depth).rev() {
            let d_out = match (from_above.take(), d_layers[l].take()) {
                (Some(a), Some(b)) => a + &b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => Array2::zeros((steps, self.layers[l].hidden_dim())),
            };
            let (dx, d_init) = gru_layer_backward(&self.layers[l], &cache.layers[l], d_out.view(), &mut grads.layers[l]);
            ds0[l] = d_init;
            from_above = Some(dx);
        }
        (from_above.expect("at least one layer"), ds0)
    }
}

impl<T: Real> Params<T> for GruStack<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| prefixed(&format!("l{i}"), l.tensors())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("l{i}"), l.tensors_mut()))
            .collect()
    }
}
