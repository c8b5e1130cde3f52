//! Item co-interaction graph and localized graph convolutions.
//!
//! Two items are linked when one user interacted with both within a time
//! window. Node embeddings come from two graphconv layers with Mean
//! aggregation trained with a negative-sampling objective, and are written
//! out as an [`EmbeddingTable`].

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, Interaction, RecordKind};
use crate::error::{Error, Result};
use crate::model::derived_rng;
use crate::nn::linalg::{dotv, gemm_acc, gemm_tn_acc};
use crate::nn::params::{init_uniform, prefixed, Params};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::parallel::Exec;
use crate::real::Real;

/// Undirected item graph. Nodes are kept in ascending ID order and every
/// adjacency list is sorted, so aggregation order never depends on how the
/// graph was assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGraph {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    adjacency: Vec<Vec<usize>>,
    features: Array2<f64>,
}

impl ItemGraph {
    /// Graph over `ids` with feature row `features[i]` for `ids[i]`. Edges may
    /// be listed in any order and either direction; duplicates and self-loops
    /// are dropped.
    pub fn from_edges(ids: &[u64], features: ArrayView2<f64>, edges: &[(u64, u64)]) -> Result<Self> {
        if ids.len() != features.nrows() {
            return Err(Error::Shape(format!("{} nodes for {} feature rows", ids.len(), features.nrows())));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        let sorted: Vec<u64> = order.iter().map(|&i| ids[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::data("duplicate node ID in item graph"));
        }
        let index: HashMap<u64, usize> = sorted.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut feats = Array2::zeros((ids.len(), features.ncols()));
        for (row, &src) in order.iter().enumerate() {
            feats.row_mut(row).assign(&features.row(src));
        }
        let mut sets = vec![BTreeSet::new(); sorted.len()];
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(Error::data(format!("edge ({a}, {b}) references an unknown node")));
            };
            sets[ia].insert(ib);
            sets[ib].insert(ia);
        }
        let adjacency = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(ItemGraph { ids: sorted, index, adjacency, features: feats })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn node_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as ID pairs `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (u, nb) in self.adjacency.iter().enumerate() {
            for &v in nb.iter().filter(|&&v| v > u) {
                out.push((self.ids[u], self.ids[v]));
            }
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features<T: Real>(&self) -> Array2<T> {
        self.features.mapv(T::of)
    }
}

/// Initial node features for [`build_item_graph`].
#[derive(Debug, Clone, Copy)]
pub enum NodeFeatures<'a> {
    /// Rows of an existing table; every table item becomes a node.
    Table(&'a EmbeddingTable),
    /// Seeded standard-normal features of the given width.
    Random { dim: usize, seed: u64 },
}

/// Links items that one user interacted with at most `window_seconds` apart.
/// Impression records are ignored.
pub fn build_item_graph(records: &[Interaction], window_seconds: i64, features: NodeFeatures<'_>) -> Result<ItemGraph> {
    let mut by_user: HashMap<u64, Vec<(i64, u64)>> = HashMap::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Interaction) {
        by_user.entry(r.user_id).or_default().push((r.timestamp, r.item_id));
    }
    let mut edges = Vec::new();
    for events in by_user.values_mut() {
        events.sort_unstable();
        for i in 0..events.len() {
            for &(t, b) in &events[i + 1..] {
                if t - events[i].0 > window_seconds {
                    break;
                }
                edges.push((events[i].1, b));
            }
        }
    }
    let (ids, feats) = match features {
        NodeFeatures::Table(table) => {
            for r in records.iter().filter(|r| r.kind == RecordKind::Interaction) {
                if !table.contains(r.item_id) {
                    return Err(Error::MissingItem(r.item_id));
                }
            }
            (table.ids().to_vec(), table.matrix::<f64>())
        }
        NodeFeatures::Random { dim, seed } => {
            let ids: BTreeSet<u64> = records.iter().map(|r| r.item_id).collect();
            let ids: Vec<u64> = ids.into_iter().collect();
            let mut feats = Array2::zeros((ids.len(), dim));
            for (row, &id) in ids.iter().enumerate() {
                let mut rng = derived_rng(seed, id, 7);
                for v in feats.row_mut(row).iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
            (ids, feats)
        }
    };
    ItemGraph::from_edges(&ids, feats.view(), &edges)
}

/// One localized graph convolution: `Q: [hidden × d_in]`, `q: [hidden]`,
/// `W: [d_out × (d_in + hidden)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer<T: Real> {
    pub q: Array2<T>,
    pub qb: Array1<T>,
    pub w: Array2<T>,
}

impl<T: Real> GcnLayer<T> {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        GcnLayer { q: Array2::zeros((hidden, d_in)), qb: Array1::zeros(hidden), w: Array2::zeros((d_out, d_in + hidden)) }
    }

    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let q = init_uniform::<T, _>(&[hidden, d_in], d_in, rng);
        let w = init_uniform::<T, _>(&[d_out, d_in + hidden], d_in + hidden, rng);
        GcnLayer {
            q: q.into_dimensionality().expect("rank 2"),
            qb: Array1::zeros(hidden),
            w: w.into_dimensionality().expect("rank 2"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

impl<T: Real> Params<T> for GcnLayer<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("Q".to_string(), self.q.view().into_dyn()),
            ("q".to_string(), self.qb.view().into_dyn()),
            ("W".to_string(), self.w.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("Q".to_string(), self.q.view_mut().into_dyn()),
            ("q".to_string(), self.qb.view_mut().into_dyn()),
            ("W".to_string(), self.w.view_mut().into_dyn()),
        ]
    }
}

/// The two stacked layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<T: Real> {
    pub layers: [GcnLayer<T>; 2],
}

impl<T: Real> GcnParams<T> {
    pub fn new(d0: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, 0, 8);
        GcnParams {
            layers: [GcnLayer::random(d0, hidden, hidden, &mut rng), GcnLayer::random(hidden, hidden, d_out, &mut rng)],
        }
    }

    pub fn zeros(d0: usize, hidden: usize, d_out: usize) -> Self {
        GcnParams { layers: [GcnLayer::zeros(d0, hidden, hidden), GcnLayer::zeros(hidden, hidden, d_out)] }
    }

    pub fn validate(&self, d0: usize) -> Result<()> {
        let [a, b] = &self.layers;
        if a.input_dim() != d0 || b.input_dim() != a.output_dim() {
            return Err(Error::shape("graph layer dimensions do not chain"));
        }
        for l in &self.layers {
            if l.w.ncols() != l.input_dim() + l.hidden_dim() || l.qb.len() != l.hidden_dim() {
                return Err(Error::shape("malformed graph layer"));
            }
        }
        if !self.all_finite() {
            return Err(Error::Numeric("non-finite graph parameters".into()));
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for GcnParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = prefixed("l0", self.layers[0].tensors());
        out.extend(prefixed("l1", self.layers[1].tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let [a, b] = &mut self.layers;
        let mut out = prefixed("l0", a.tensors_mut());
        out.extend(prefixed("l1", b.tensors_mut()));
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T: Real> {
    input: Array2<T>,
    msg_pre: Array2<T>,
    concat: Array2<T>,
    out_pre: Array2<T>,
}

fn relu_grad<T: Real>(d: &mut Array2<T>, pre: &Array2<T>) {
    d.zip_mut_with(pre, |g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
}

/// `n_u = mean(ReLU(Q z_v + q) : v ∈ N(u))`, `z_u' = ReLU(W [z_u ; n_u])`.
/// Isolated nodes aggregate to zero.
pub fn graphconv_forward<T: Real>(
    z: ArrayView2<T>,
    graph: &ItemGraph,
    layer: &GcnLayer<T>,
    exec: Exec,
) -> Result<(Array2<T>, LayerCache<T>)> {
    if z.nrows() != graph.len() || z.ncols() != layer.input_dim() {
        return Err(Error::Shape(format!(
            "graph layer expects [{} × {}], got {:?}",
            graph.len(),
            layer.input_dim(),
            z.dim()
        )));
    }
    let (n, d_in, h) = (graph.len(), layer.input_dim(), layer.hidden_dim());
    let qt = layer.q.t().as_standard_layout().into_owned();
    let mut msg_pre = Array2::zeros((n, h));
    gemm_acc(z, qt.view(), msg_pre.view_mut());
    msg_pre += &layer.qb;
    let msg = msg_pre.mapv(Real::relu);
    let rows = exec.map_range(n, |u| {
        let nb = graph.neighbors(u);
        let mut acc = Array1::<T>::zeros(h);
        for &v in nb {
            acc += &msg.row(v);
        }
        if !nb.is_empty() {
            let k = T::of(nb.len() as f64);
            acc.mapv_inplace(|v| v / k);
        }
        acc
    });
    let mut concat = Array2::zeros((n, d_in + h));
    concat.slice_mut(s![.., ..d_in]).assign(&z);
    for (u, r) in rows.iter().enumerate() {
        concat.slice_mut(s![u, d_in..]).assign(r);
    }
    let wt = layer.w.t().as_standard_layout().into_owned();
    let mut out_pre = Array2::zeros((n, layer.output_dim()));
    gemm_acc(concat.view(), wt.view(), out_pre.view_mut());
    let out = out_pre.mapv(Real::relu);
    Ok((out, LayerCache { input: z.to_owned(), msg_pre, concat, out_pre }))
}

/// Accumulates parameter gradients into `grads` and returns `∂/∂z`.
pub fn graphconv_backward<T: Real>(
    dout: ArrayView2<T>,
    graph: &ItemGraph,
    layer: &GcnLayer<T>,
    cache: &LayerCache<T>,
    grads: &mut GcnLayer<T>,
) -> Array2<T> {
    let (n, d_in, h) = (graph.len(), layer.input_dim(), layer.hidden_dim());
    let mut dpre = dout.to_owned();
    relu_grad(&mut dpre, &cache.out_pre);
    gemm_tn_acc(dpre.view(), cache.concat.view(), grads.w.view_mut());
    let mut dconcat = Array2::zeros((n, d_in + h));
    gemm_acc(dpre.view(), layer.w.view(), dconcat.view_mut());
    let mut dz = dconcat.slice(s![.., ..d_in]).to_owned();
    let mut dmsg = Array2::<T>::zeros((n, h));
    for u in 0..n {
        let nb = graph.neighbors(u);
        if nb.is_empty() {
            continue;
        }
        let share = dconcat.slice(s![u, d_in..]).mapv(|g| g / T::of(nb.len() as f64));
        for &v in nb {
            let mut row = dmsg.row_mut(v);
            row += &share;
        }
    }
    relu_grad(&mut dmsg, &cache.msg_pre);
    gemm_tn_acc(dmsg.view(), cache.input.view(), grads.q.view_mut());
    grads.qb += &dmsg.sum_axis(Axis(0));
    gemm_acc(dmsg.view(), layer.q.view(), dz.view_mut());
    dz
}

/// Output of one layer without the backward cache.
pub fn graphconv_layer<T: Real>(z: ArrayView2<T>, graph: &ItemGraph, layer: &GcnLayer<T>) -> Result<Array2<T>> {
    Ok(graphconv_forward(z, graph, layer, Exec::Sequential)?.0)
}

#[derive(Debug, Clone)]
pub struct GcnCache<T: Real> {
    layers: [LayerCache<T>; 2],
}

/// Both layers applied to the graph's own features.
pub fn gcn_forward<T: Real>(graph: &ItemGraph, params: &GcnParams<T>, exec: Exec) -> Result<(Array2<T>, GcnCache<T>)> {
    params.validate(graph.feature_dim())?;
    let z0 = graph.features::<T>();
    let (z1, c0) = graphconv_forward(z0.view(), graph, &params.layers[0], exec)?;
    let (z2, c1) = graphconv_forward(z1.view(), graph, &params.layers[1], exec)?;
    Ok((z2, GcnCache { layers: [c0, c1] }))
}

pub fn gcn_backward<T: Real>(dz: ArrayView2<T>, graph: &ItemGraph, params: &GcnParams<T>, cache: &GcnCache<T>) -> GcnParams<T> {
    let [l0, l1] = &params.layers;
    let mut grads = GcnParams {
        layers: [GcnLayer::zeros(l0.input_dim(), l0.hidden_dim(), l0.output_dim()), GcnLayer::zeros(l1.input_dim(), l1.hidden_dim(), l1.output_dim())],
    };
    let [g0, g1] = &mut grads.layers;
    let dz1 = graphconv_backward(dz, graph, l1, &cache.layers[1], g1);
    graphconv_backward(dz1.view(), graph, l0, &cache.layers[0], g0);
    grads
}

/// Loss and gradients for one positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss<T: Real> {
    pub loss: T,
    pub d_anchor: Array1<T>,
    pub d_positive: Array1<T>,
    pub d_negatives: Vec<Array1<T>>,
}

/// `−log σ(z_uᵀ z_v) − Σ_c log σ(−z_uᵀ z_c)`: the C-sample estimate of the
/// scaled expectation over the negative distribution.
pub fn gcn_nce_loss<T: Real>(anchor: ArrayView1<T>, positive: ArrayView1<T>, negatives: &[ArrayView1<T>]) -> PairLoss<T> {
    let sp = dotv(anchor, positive);
    let mut loss = -sp.log_sigmoid();
    let gp = sp.sigmoid() - T::one();
    let mut d_anchor = positive.mapv(|v| v * gp);
    let d_positive = anchor.mapv(|v| v * gp);
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let sn = dotv(anchor, *neg);
        loss -= (-sn).log_sigmoid();
        let gn = sn.sigmoid();
        d_anchor.scaled_add(gn, neg);
        d_negatives.push(anchor.mapv(|v| v * gn));
    }
    PairLoss { loss, d_anchor, d_positive, d_negatives }
}

/// Positive pair `(u, v)` with sampled negatives, all as node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws `count` nodes uniformly from the non-neighbors of `u` (excluding
/// `u`). Returns fewer when `u` is linked to everything.
pub fn sample_non_neighbors<R: Rng + ?Sized>(graph: &ItemGraph, u: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let nb = graph.neighbors(u);
    let available = graph.len() - 1 - nb.len();
    if available == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = rng.random_range(0..graph.len());
        if v != u && nb.binary_search(&v).is_err() {
            out.push(v);
        }
    }
    out
}

/// Mean pair loss over `pairs` and its gradient with respect to the node
/// embeddings.
pub fn pairs_loss<T: Real>(z: ArrayView2<T>, pairs: &[PairSample]) -> (f64, Array2<T>) {
    let mut dz = Array2::zeros(z.dim());
    if pairs.is_empty() {
        return (0.0, dz);
    }
    let scale = T::of(1.0 / pairs.len() as f64);
    let mut total = 0.0;
    for p in pairs {
        let negs: Vec<ArrayView1<T>> = p.negatives.iter().map(|&c| z.row(c)).collect();
        let r = gcn_nce_loss(z.row(p.anchor), z.row(p.positive), &negs);
        total += r.loss.as_f64();
        dz.row_mut(p.anchor).scaled_add(scale, &r.d_anchor);
        dz.row_mut(p.positive).scaled_add(scale, &r.d_positive);
        for (&c, d) in p.negatives.iter().zip(&r.d_negatives) {
            dz.row_mut(c).scaled_add(scale, d);
        }
    }
    (total / pairs.len() as f64, dz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub hidden: usize,
    /// Output width; the width of the emitted embedding table.
    pub out_dim: usize,
    /// Negatives per positive pair (C).
    pub negatives: usize,
    pub steps: usize,
    /// Positive pairs drawn per step; 0 uses every directed edge.
    pub pairs_per_step: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden: 32,
            out_dim: 16,
            negatives: 1,
            steps: 500,
            pairs_per_step: 256,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::config("graph layer widths must be positive"));
        }
        if self.negatives == 0 {
            return Err(Error::config("at least one negative per pair is required"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GcnTrained {
    pub params: GcnParams<f32>,
    pub losses: Vec<f64>,
}

impl GcnTrained {
    pub fn embeddings(&self, graph: &ItemGraph, exec: Exec) -> Result<Array2<f32>> {
        Ok(gcn_forward(graph, &self.params, exec)?.0)
    }

    pub fn table(&self, graph: &ItemGraph, exec: Exec) -> Result<EmbeddingTable> {
        EmbeddingTable::from_rows(graph.ids().to_vec(), &self.embeddings(graph, exec)?)
    }
}

fn draw_pairs(graph: &ItemGraph, cfg: &GcnConfig, rng: &mut ChaCha8Rng) -> Vec<PairSample> {
    let directed: usize = (0..graph.len()).map(|u| graph.neighbors(u).len()).sum();
    let anchors: Vec<(usize, usize)> = if cfg.pairs_per_step == 0 || cfg.pairs_per_step >= directed {
        (0..graph.len()).flat_map(|u| graph.neighbors(u).iter().map(move |&v| (u, v))).collect()
    } else {
        let with_edges: Vec<usize> = (0..graph.len()).filter(|&u| !graph.neighbors(u).is_empty()).collect();
        (0..cfg.pairs_per_step)
            .map(|_| {
                let u = with_edges[rng.random_range(0..with_edges.len())];
                let nb = graph.neighbors(u);
                (u, nb[rng.random_range(0..nb.len())])
            })
            .collect()
    };
    anchors
        .into_iter()
        .map(|(u, v)| PairSample { anchor: u, positive: v, negatives: sample_non_neighbors(graph, u, cfg.negatives, rng) })
        .collect()
}

/// Trains both layers with Adam. Pair draws use a seeded stream, so a run is
/// reproducible for a given config.
pub fn train_gcn(graph: &ItemGraph, cfg: &GcnConfig, exec: Exec) -> Result<GcnTrained> {
    cfg.validate()?;
    if graph.num_edges() == 0 {
        return Err(Error::data("item graph has no edges"));
    }
    let mut params = GcnParams::<f32>::new(graph.feature_dim(), cfg.hidden, cfg.out_dim, cfg.seed);
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derived_rng(cfg.seed, step as u64, 9);
        let pairs = draw_pairs(graph, cfg, &mut rng);
        let (z, cache) = gcn_forward(graph, &params, exec)?;
        let (loss, dz) = pairs_loss(z.view(), &pairs);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("graph loss became {loss} at step {step}")));
        }
        losses.push(loss);
        let grads = gcn_backward(dz.view(), graph, &params, &cache);
        adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
    }
    Ok(GcnTrained { params, losses })
}

/// Random two-community graph: `nodes` items split in half, each pair linked
/// with probability `p_intra` inside a community and `p_inter` across.
/// Features are standard normal and carry no community signal. Returns the
/// graph and the community of each node (by node index).
pub fn two_community_graph(nodes: usize, p_intra: f64, p_inter: f64, feature_dim: usize, seed: u64) -> Result<(ItemGraph, Vec<usize>)> {
    let mut rng = derived_rng(seed, 0, 10);
    let ids: Vec<u64> = (1..=nodes as u64).collect();
    let labels: Vec<usize> = (0..nodes).map(|i| usize::from(i >= nodes / 2)).collect();
    let feats = Array2::from_shape_simple_fn((nodes, feature_dim), || StandardNormal.sample(&mut rng));
    let mut edges = Vec::new();
    for a in 0..nodes {
        for b in a + 1..nodes {
            let p = if labels[a] == labels[b] { p_intra } else { p_inter };
            if rng.random::<f64>() < p {
                edges.push((ids[a], ids[b]));
            }
        }
    }
    Ok((ItemGraph::from_edges(&ids, feats.view(), &edges)?, labels))
}

/// Mean pairwise cosine similarity within and across labels, over distinct
/// node pairs.
pub fn mean_cosines<T: Real>(z: ArrayView2<T>, labels: &[usize]) -> (f64, f64) {
    let norms: Vec<f64> = z.rows().into_iter().map(|r| dotv(r, r).as_f64().sqrt()).collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..z.nrows() {
        for b in a + 1..z.nrows() {
            let denom = norms[a] * norms[b];
            let c = if denom > 0.0 { dotv(z.row(a), z.row(b)).as_f64() / denom } else { 0.0 };
            if labels[a] == labels[b] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}
