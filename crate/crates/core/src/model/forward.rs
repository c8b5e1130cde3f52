//! Batched training forward/backward over user runs.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::{derived_rng, session_aggregate, AggMode, ConnectionMode, HighState, LowNet, Model, ModelBuffers, TrainSpec, UserRun};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchStats;
use crate::nn::dropout::dropout_masks;
use crate::nn::gru::GruStackCache;
use crate::nn::mlp::{mlp_backward, mlp_forward, MlpCache};
use crate::nn::params::zeros_like;
use crate::nn::tcn::TcnCache;
use crate::nn::{GruStack, Params, Segments, TrainCtx};
use crate::parallel::Exec;
use crate::real::Real;

/// Predictions for one run: one `[L × d]` matrix per session, aligned with the
/// session's items (row `t` predicts item `t`), plus the high-level state
/// after the run's last session (hierarchical models only).
#[derive(Debug, Clone)]
pub struct RunOutput<T: Real> {
    pub predictions: Vec<Array2<T>>,
    pub final_state: Option<HighState<T>>,
}

/// Result of [`Model::forward_batch`]; keep it for [`Model::backward_batch`].
pub struct BatchForward<T: Real> {
    pub outputs: Vec<RunOutput<T>>,
    /// Batch statistics per TCN block, for updating running statistics.
    pub bn_stats: Vec<Option<[BatchStats<T>; 2]>>,
    layout: Vec<Vec<Range<usize>>>,
    head: MlpCache<T>,
    path: Path<T>,
}

enum Path<T: Real> {
    Mean { high: Vec<Option<HighRun<T>>>, low: LowCache<T> },
    LastHidden(Vec<LastRun<T>>),
}

enum LowCache<T: Real> {
    Tcn { cache: TcnCache<T>, segs: Segments },
    Gru(Vec<Vec<GruStackCache<T>>>),
}

struct HighRun<T: Real> {
    cache: GruStackCache<T>,
    /// Per session, the per-layer state the session starts from.
    before: Vec<Vec<Array1<T>>>,
    state: HighState<T>,
}

struct LastRun<T: Real> {
    c: Array2<T>,
    low: Vec<GruStackCache<T>>,
    high: Vec<GruStackCache<T>>,
    state: HighState<T>,
}

fn gru_masks<T: Real>(
    stack: &GruStack<T>,
    steps: usize,
    train: Option<TrainSpec>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<Vec<Array2<T>>>> {
    match train {
        Some(t) if t.dropout > 0.0 => stack
            .layers
            .iter()
            .map(|l| dropout_masks(steps, l.hidden_dim(), t.dropout, rng))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        _ => Ok(None),
    }
}

fn sum_rows<T: Real>(m: ArrayView2<T>) -> Array1<T> {
    let mut acc = Array1::zeros(m.ncols());
    for r in m.rows() {
        acc += &r;
    }
    acc
}

impl<T: Real> Model<T> {
    pub(crate) fn last_hidden(&self) -> bool {
        self.high.is_some() && self.config.aggregation == AggMode::LastHidden
    }

    /// Tokens for a single-level model over the whole interaction stream:
    /// previous item (zero at the very start) and a session-start flag.
    pub(crate) fn stream_tokens(&self, sessions: &[Array2<T>]) -> Array2<T> {
        let d = self.embedding_dim();
        let n: usize = sessions.iter().map(|s| s.nrows()).sum();
        let mut tok = Array2::zeros((n, d + 1));
        let mut row = 0;
        let mut prev: Option<ArrayView1<T>> = None;
        for sess in sessions {
            for (j, x) in sess.rows().into_iter().enumerate() {
                if let Some(p) = prev {
                    tok.slice_mut(s![row, ..d]).assign(&p);
                }
                if j == 0 {
                    tok[[row, d]] = T::one();
                }
                prev = Some(x);
                row += 1;
            }
        }
        tok
    }

    /// Low-level tokens for one session of a hierarchical model. `top` is the
    /// high-level top-layer state the session starts from.
    pub(crate) fn session_tokens(&self, items: ArrayView2<T>, top: ArrayView1<T>) -> Array2<T> {
        let d = self.embedding_dim();
        let width = self.config.low_input_dim();
        let l = items.nrows();
        let full = self.config.connection == ConnectionMode::Full;
        if self.last_hidden() {
            let mut tok = Array2::zeros((l + 1, width));
            tok.slice_mut(s![1.., ..d]).assign(&items);
            if full {
                for mut r in tok.rows_mut() {
                    r.slice_mut(s![d..]).assign(&top);
                }
            }
            return tok;
        }
        let mut tok = Array2::zeros((l, width));
        if l > 1 {
            tok.slice_mut(s![1.., ..d]).assign(&items.slice(s![..l - 1, ..]));
        }
        if full {
            for mut r in tok.rows_mut() {
                r.slice_mut(s![d..]).assign(&top);
            }
        } else if width > d {
            tok.slice_mut(s![0, d..]).assign(&top);
        }
        tok
    }

    /// Initial low-level GRU states for a session (copied from the high
    /// level under the init connection, zero otherwise).
    pub(crate) fn low_init(&self, stack: &GruStack<T>, before: Option<&[Array1<T>]>) -> Vec<Array1<T>> {
        match before {
            Some(b) if self.config.connection == ConnectionMode::Init => b.to_vec(),
            _ => stack.zero_state(),
        }
    }

    fn check_runs(&self, runs: &[UserRun<T>]) -> Result<Vec<Vec<Range<usize>>>> {
        let d = self.embedding_dim();
        let mut at = 0;
        let mut layout = Vec::with_capacity(runs.len());
        for run in runs {
            if run.sessions.is_empty() {
                return Err(Error::EmptySequence);
            }
            let mut ranges = Vec::with_capacity(run.sessions.len());
            for sess in &run.sessions {
                if sess.nrows() == 0 {
                    return Err(Error::EmptySequence);
                }
                if sess.ncols() != d {
                    return Err(Error::Shape(format!("session items have {} features, expected {d}", sess.ncols())));
                }
                ranges.push(at..at + sess.nrows());
                at += sess.nrows();
            }
            if let (Some(init), Some(high)) = (&run.init, &self.high) {
                if init.layers.len() != high.depth() || init.layers.iter().any(|v| v.len() != high.hidden_dim()) {
                    return Err(Error::Shape("high-level state does not match the model".into()));
                }
            }
            layout.push(ranges);
        }
        Ok(layout)
    }

    /// Forward over a batch of runs. `train` enables dropout and batch
    /// statistics; `buffers` supplies running statistics in evaluation.
    pub fn forward_batch(
        &self,
        runs: &[UserRun<T>],
        buffers: Option<&ModelBuffers<T>>,
        train: Option<TrainSpec>,
        exec: Exec,
    ) -> Result<BatchForward<T>> {
        let layout = self.check_runs(runs)?;
        let (c, path, bn_stats, finals) = if self.last_hidden() {
            let res = exec
                .map_indexed(runs, |r, run| self.last_hidden_run(r, run, train))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let total = layout.last().and_then(|l| l.last()).map_or(0, |r| r.end);
            let mut c = Array2::zeros((total, self.config.low_hidden));
            for (run, ranges) in res.iter().zip(&layout) {
                let start = ranges[0].start;
                c.slice_mut(s![start..start + run.c.nrows(), ..]).assign(&run.c);
            }
            let finals = res.iter().map(|r| Some(r.state.clone())).collect::<Vec<_>>();
            (c, Path::LastHidden(res), Vec::new(), finals)
        } else {
            self.forward_mean(runs, &layout, buffers, train, exec)?
        };
        let (u, head) = mlp_forward(c.view(), &self.head)?;
        let outputs = layout
            .iter()
            .zip(finals)
            .map(|(ranges, final_state)| RunOutput {
                predictions: ranges.iter().map(|r| u.slice(s![r.clone(), ..]).to_owned()).collect(),
                final_state,
            })
            .collect();
        Ok(BatchForward { outputs, bn_stats, layout, head, path })
    }

    #[allow(clippy::type_complexity)]
    fn forward_mean(
        &self,
        runs: &[UserRun<T>],
        layout: &[Vec<Range<usize>>],
        buffers: Option<&ModelBuffers<T>>,
        train: Option<TrainSpec>,
        exec: Exec,
    ) -> Result<(Array2<T>, Path<T>, Vec<Option<[BatchStats<T>; 2]>>, Vec<Option<HighState<T>>>)> {
        let d = self.embedding_dim();
        let high: Vec<Option<HighRun<T>>> = match &self.high {
            Some(stack) => exec
                .map_indexed(runs, |r, run| {
                    let init = run.init.clone().unwrap_or_else(|| HighState::start(stack.depth(), stack.hidden_dim()));
                    let n = run.sessions.len();
                    let mut agg = Array2::zeros((n, d));
                    for (i, sess) in run.sessions.iter().enumerate() {
                        agg.row_mut(i).assign(&session_aggregate(sess.view(), None)?);
                    }
                    let mut rng = derived_rng(train.map_or(0, |t| t.seed), r as u64, 1);
                    let masks = gru_masks(stack, n, train, &mut rng)?;
                    let (_, finals, cache) = stack.forward(agg.view(), &init.layers, masks.as_deref())?;
                    let before = (0..n)
                        .map(|i| {
                            if i == 0 {
                                init.layers.clone()
                            } else {
                                (0..stack.depth()).map(|l| cache.layer_output(l).row(i - 1).to_owned()).collect()
                            }
                        })
                        .collect();
                    let state = HighState { layers: finals, sessions: init.sessions + n as u64 };
                    Ok(Some(HighRun { cache, before, state }))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?,
            None => runs.iter().map(|_| None).collect(),
        };
        let tokens = |r: usize| -> Vec<Array2<T>> {
            let run = &runs[r];
            match &high[r] {
                Some(h) => run
                    .sessions
                    .iter()
                    .zip(&h.before)
                    .map(|(sess, b)| self.session_tokens(sess.view(), b.last().expect("layers").view()))
                    .collect(),
                None => vec![self.stream_tokens(&run.sessions)],
            }
        };
        let total = layout.last().and_then(|l| l.last()).map_or(0, |r| r.end);
        let (c, low, bn_stats) = match &self.low {
            LowNet::Tcn(tcn) => {
                let mut packed = Array2::zeros((total, self.config.low_input_dim()));
                let mut lens = Vec::new();
                let mut at = 0;
                for r in 0..runs.len() {
                    for t in tokens(r) {
                        packed.slice_mut(s![at..at + t.nrows(), ..]).assign(&t);
                        at += t.nrows();
                        lens.push(t.nrows());
                    }
                }
                let segs = Segments::from_lengths(&lens);
                let mut ctx = train.map(|t| TrainCtx { rng: derived_rng(t.seed, u64::MAX, 2), dropout: t.dropout });
                let stats = buffers.map(|b| b.tcn.as_slice());
                let (c, cache, bn) = tcn.forward(packed.view(), &segs, stats, ctx.as_mut())?;
                (c, LowCache::Tcn { cache, segs }, bn)
            }
            LowNet::Gru(stack) => {
                let per_run = exec
                    .map_range(runs.len(), |r| {
                        let mut rng = derived_rng(train.map_or(0, |t| t.seed), r as u64, 3);
                        let mut outs = Vec::new();
                        let mut caches = Vec::new();
                        for (k, tok) in tokens(r).into_iter().enumerate() {
                            let before = high[r].as_ref().map(|h| h.before[k].as_slice());
                            let init = self.low_init(stack, before);
                            let masks = gru_masks(stack, tok.nrows(), train, &mut rng)?;
                            let (top, _, cache) = stack.forward(tok.view(), &init, masks.as_deref())?;
                            outs.push(top);
                            caches.push(cache);
                        }
                        Ok((outs, caches))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let mut c = Array2::zeros((total, stack.hidden_dim()));
                let mut all = Vec::with_capacity(runs.len());
                let mut at = 0;
                for (outs, caches) in per_run {
                    for o in outs {
                        c.slice_mut(s![at..at + o.nrows(), ..]).assign(&o);
                        at += o.nrows();
                    }
                    all.push(caches);
                }
                (c, LowCache::Gru(all), Vec::new())
            }
        };
        let finals = high.iter().map(|h| h.as_ref().map(|h| h.state.clone())).collect();
        Ok((c, Path::Mean { high, low }, bn_stats, finals))
    }

    fn last_hidden_run(&self, r: usize, run: &UserRun<T>, train: Option<TrainSpec>) -> Result<LastRun<T>> {
        let (LowNet::Gru(low), Some(high)) = (&self.low, &self.high) else {
            return Err(Error::config("last-hidden aggregation needs GRU levels"));
        };
        let mut rng = derived_rng(train.map_or(0, |t| t.seed), r as u64, 4);
        let mut state = run.init.clone().unwrap_or_else(|| HighState::start(high.depth(), high.hidden_dim()));
        let total: usize = run.sessions.iter().map(|s| s.nrows()).sum();
        let mut c = Array2::zeros((total, low.hidden_dim()));
        let mut low_caches = Vec::with_capacity(run.sessions.len());
        let mut high_caches = Vec::with_capacity(run.sessions.len());
        let mut at = 0;
        for sess in &run.sessions {
            let l = sess.nrows();
            let tok = self.session_tokens(sess.view(), state.top().view());
            let init = self.low_init(low, Some(&state.layers));
            let masks = gru_masks(low, tok.nrows(), train, &mut rng)?;
            let (top, _, lc) = low.forward(tok.view(), &init, masks.as_deref())?;
            c.slice_mut(s![at..at + l, ..]).assign(&top.slice(s![..l, ..]));
            at += l;
            let agg = top.slice(s![l..l + 1, ..]);
            let hmasks = gru_masks(high, 1, train, &mut rng)?;
            let (_, finals, hc) = high.forward(agg, &state.layers, hmasks.as_deref())?;
            state = HighState { layers: finals, sessions: state.sessions + 1 };
            low_caches.push(lc);
            high_caches.push(hc);
        }
        Ok(LastRun { c, low: low_caches, high: high_caches, state })
    }

    /// Gradients of `Σ ⟨d_pred, predictions⟩` w.r.t. all parameters. The
    /// state carried into each run is treated as a constant.
    pub fn backward_batch(&self, fwd: &BatchForward<T>, d_pred: &[Vec<Array2<T>>], exec: Exec) -> Result<Model<T>> {
        let d = self.embedding_dim();
        if d_pred.len() != fwd.layout.len() {
            return Err(Error::Shape("gradient batch does not match the forward batch".into()));
        }
        let total = fwd.layout.last().and_then(|l| l.last()).map_or(0, |r| r.end);
        let mut du = Array2::zeros((total, d));
        for (ranges, grads) in fwd.layout.iter().zip(d_pred) {
            if ranges.len() != grads.len() {
                return Err(Error::Shape("gradient batch does not match the forward batch".into()));
            }
            for (r, g) in ranges.iter().zip(grads) {
                if g.dim() != (r.len(), d) {
                    return Err(Error::Shape("prediction gradient has the wrong shape".into()));
                }
                du.slice_mut(s![r.clone(), ..]).assign(g);
            }
        }
        let mut grads = zeros_like(self);
        let dc = mlp_backward(du.view(), &self.head, &fwd.head, &mut grads.head);
        match &fwd.path {
            Path::Mean { high, low } => self.backward_mean(fwd, high, low, dc, &mut grads, exec),
            Path::LastHidden(runs) => self.backward_last_hidden(fwd, runs, dc, &mut grads, exec),
        }
        Ok(grads)
    }

    fn backward_mean(
        &self,
        fwd: &BatchForward<T>,
        high: &[Option<HighRun<T>>],
        low: &LowCache<T>,
        dc: Array2<T>,
        grads: &mut Model<T>,
        exec: Exec,
    ) {
        let d = self.embedding_dim();
        let hier = self.high.is_some();
        let full = self.config.connection == ConnectionMode::Full;
        // per run, per session: gradient w.r.t. the per-layer starting state
        let conn: Vec<Vec<Vec<Option<Array1<T>>>>> = match (low, &self.low, &mut grads.low) {
            (LowCache::Tcn { cache, segs }, LowNet::Tcn(tcn), LowNet::Tcn(g)) => {
                let dtok = tcn.backward(dc, segs, cache, g);
                fwd.layout
                    .iter()
                    .map(|ranges| {
                        ranges
                            .iter()
                            .map(|r| {
                                let top = if !hier {
                                    None
                                } else if full {
                                    Some(sum_rows(dtok.slice(s![r.clone(), d..])))
                                } else {
                                    Some(dtok.slice(s![r.start, d..]).to_owned())
                                };
                                self.top_only(top)
                            })
                            .collect()
                    })
                    .collect()
            }
            (LowCache::Gru(caches), LowNet::Gru(stack), LowNet::Gru(g)) => {
                let per_run = exec.map_indexed(caches, |r, run_caches| {
                    let mut gr = zeros_like(stack);
                    let ranges = &fwd.layout[r];
                    let seqs: Vec<Range<usize>> = if hier {
                        ranges.clone()
                    } else {
                        vec![ranges[0].start..ranges[ranges.len() - 1].end]
                    };
                    let mut conn = Vec::new();
                    for (cache, rg) in run_caches.iter().zip(seqs) {
                        let (dtok, ds0) = stack.backward(cache, dc.slice(s![rg, ..]).to_owned(), None, &mut gr);
                        if !hier {
                            continue;
                        }
                        conn.push(if full {
                            self.top_only(Some(sum_rows(dtok.slice(s![.., d..]))))
                        } else {
                            ds0.into_iter().map(Some).collect()
                        });
                    }
                    (gr, conn)
                });
                let mut conn = Vec::with_capacity(per_run.len());
                for (gr, c) in per_run {
                    g.add_assign_from(&gr);
                    conn.push(c);
                }
                conn
            }
            _ => unreachable!("cache layout follows the model"),
        };
        if let (Some(stack), Some(g)) = (&self.high, &mut grads.high) {
            let per_run = exec.map_indexed(high, |r, h| {
                let h = h.as_ref().expect("hierarchical run");
                let n = h.before.len();
                let mut gr = zeros_like(stack);
                let mut d_layers: Vec<Option<Array2<T>>> = vec![None; stack.depth()];
                for (i, sess) in conn[r].iter().enumerate().skip(1) {
                    for (l, v) in sess.iter().enumerate() {
                        if let Some(v) = v {
                            let m = d_layers[l].get_or_insert_with(|| Array2::zeros((n, stack.layers[l].hidden_dim())));
                            let mut row = m.row_mut(i - 1);
                            row += v;
                        }
                    }
                }
                stack.backward_layers(&h.cache, d_layers, &mut gr);
                gr
            });
            for gr in per_run {
                g.add_assign_from(&gr);
            }
        }
    }

    fn top_only(&self, top: Option<Array1<T>>) -> Vec<Option<Array1<T>>> {
        let depth = self.high.as_ref().map_or(0, |h| h.depth());
        let mut v: Vec<Option<Array1<T>>> = vec![None; depth];
        if depth > 0 {
            v[depth - 1] = top;
        }
        v
    }

    fn backward_last_hidden(&self, fwd: &BatchForward<T>, runs: &[LastRun<T>], dc: Array2<T>, grads: &mut Model<T>, exec: Exec) {
        let (LowNet::Gru(low), Some(high)) = (&self.low, &self.high) else {
            unreachable!("last-hidden path needs GRU levels")
        };
        let d = self.embedding_dim();
        let full = self.config.connection == ConnectionMode::Full;
        let per_run = exec.map_indexed(runs, |r, run| {
            let mut gl = zeros_like(low);
            let mut gh = zeros_like(high);
            let mut carry: Vec<Array1<T>> = high.zero_state();
            for (i, rg) in fwd.layout[r].iter().enumerate().rev() {
                let (d_agg, mut d_before) =
                    high.backward(&run.high[i], Array2::zeros((1, high.hidden_dim())), Some(&carry), &mut gh);
                let l = rg.len();
                let mut d_top = Array2::zeros((l + 1, low.hidden_dim()));
                d_top.slice_mut(s![..l, ..]).assign(&dc.slice(s![rg.clone(), ..]));
                d_top.row_mut(l).assign(&d_agg.row(0));
                let (dtok, ds0) = low.backward(&run.low[i], d_top, None, &mut gl);
                if full {
                    let top = d_before.len() - 1;
                    d_before[top] += &sum_rows(dtok.slice(s![.., d..]));
                } else {
                    for (a, b) in d_before.iter_mut().zip(&ds0) {
                        *a += b;
                    }
                }
                carry = d_before;
            }
            (gl, gh)
        });
        let (LowNet::Gru(gl_all), Some(gh_all)) = (&mut grads.low, &mut grads.high) else {
            unreachable!("gradient layout follows the model")
        };
        for (gl, gh) in per_run {
            gl_all.add_assign_from(&gl);
            gh_all.add_assign_from(&gh);
        }
    }
}
