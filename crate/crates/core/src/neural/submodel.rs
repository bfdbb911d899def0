use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, Hasher};
use crate::error::{invalid, Error, Result};
use crate::esc::{Endpoint, Subgraph};
use crate::stgraph::ForecastTask;
use crate::tensor::{axpy, Mat};

use super::data::{DataReader, NodeScaler, Split};
use super::params::{descend, init_mat, relu, ParamBlocks};

/// Plain gradient descent settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_clip: f64,
    pub stop_loss: f64,
    pub lambda_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, epochs: 10, batch: 32, grad_clip: 5.0, stop_loss: 0.0, lambda_reg: 1e-5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch < 1 {
            return invalid("epochs and batch must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_reg >= 0.0) || !(self.grad_clip >= 0.0) {
            return invalid("learning rate must be positive; lambda_reg and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Shape of a sub-model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubArch {
    /// Real members.
    pub nodes: usize,
    pub stub: bool,
    pub window: usize,
    pub features: usize,
    pub horizon: usize,
    pub channels: usize,
    pub kernel: usize,
    pub width: usize,
}

impl SubArch {
    pub fn total_nodes(&self) -> usize {
        self.nodes + usize::from(self.stub)
    }

    /// Temporal positions left after the convolution.
    pub fn positions(&self) -> usize {
        self.window + 1 - self.kernel
    }

    pub fn outputs(&self) -> usize {
        self.horizon * self.features
    }

    fn input_len(&self) -> usize {
        self.window * self.features
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubParams {
    /// Temporal kernel, `C × (kernel·F)`.
    pub wt: Mat,
    pub bt: Vec<f64>,
    /// Graph-convolution mixing, `C × C`.
    pub theta: Mat,
    pub bg: Vec<f64>,
    /// Embedding, `d × (positions·C)`.
    pub e: Mat,
    pub be: Vec<f64>,
    /// Readout from the embedding, `(P·F) × d`.
    pub r: Mat,
    /// Linear skip from the raw window, `(P·F) × (W·F)`.
    pub s: Mat,
    pub br: Vec<f64>,
}

impl SubParams {
    pub fn init(arch: &SubArch, rng: &mut ChaCha8Rng) -> Self {
        let (c, d, o) = (arch.channels, arch.width, arch.outputs());
        SubParams {
            wt: init_mat(rng, c, arch.kernel * arch.features),
            bt: vec![0.0; c],
            theta: init_mat(rng, c, c),
            bg: vec![0.0; c],
            e: init_mat(rng, d, arch.positions() * c),
            be: vec![0.0; d],
            r: init_mat(rng, o, d),
            s: init_mat(rng, o, arch.input_len()),
            br: vec![0.0; o],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        SubParams {
            wt: z(&self.wt),
            bt: vec![0.0; self.bt.len()],
            theta: z(&self.theta),
            bg: vec![0.0; self.bg.len()],
            e: z(&self.e),
            be: vec![0.0; self.be.len()],
            r: z(&self.r),
            s: z(&self.s),
            br: vec![0.0; self.br.len()],
        }
    }
}

impl ParamBlocks for SubParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("temporal.weight".into(), &self.wt.data[..]),
            ("temporal.bias".into(), &self.bt[..]),
            ("graph.weight".into(), &self.theta.data[..]),
            ("graph.bias".into(), &self.bg[..]),
            ("embed.weight".into(), &self.e.data[..]),
            ("embed.bias".into(), &self.be[..]),
            ("readout.weight".into(), &self.r.data[..]),
            ("readout.skip".into(), &self.s.data[..]),
            ("readout.bias".into(), &self.br[..]),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("temporal.weight".into(), &mut self.wt.data[..]),
            ("temporal.bias".into(), &mut self.bt[..]),
            ("graph.weight".into(), &mut self.theta.data[..]),
            ("graph.bias".into(), &mut self.bg[..]),
            ("embed.weight".into(), &mut self.e.data[..]),
            ("embed.bias".into(), &mut self.be[..]),
            ("readout.weight".into(), &mut self.r.data[..]),
            ("readout.skip".into(), &mut self.s.data[..]),
            ("readout.bias".into(), &mut self.br[..]),
        ]
    }
}

/// Row-normalised `(Aᵀ + I)`: row `v` averages `v` and its in-neighbours.
pub fn normalized_adjacency(sub: &Subgraph) -> Mat {
    let a = sub.local_adjacency();
    let n = a.rows;
    let mut out = Mat::zeros(n, n);
    for v in 0..n {
        let mut deg = 0.0;
        for u in 0..n {
            let w = if u == v { 1.0 } else { a.get(u, v) };
            out.set(v, u, w);
            deg += w;
        }
        for u in 0..n {
            out.set(v, u, out.get(v, u) / deg);
        }
    }
    out
}

/// Forward intermediates for one window.
#[derive(Clone, Debug, Default)]
pub(crate) struct SubCache {
    z_pre: Vec<f64>,
    z: Vec<f64>,
    m: Vec<f64>,
    g_pre: Vec<f64>,
    g: Vec<f64>,
    e_pre: Vec<f64>,
    pub h: Vec<f64>,
    pub y: Vec<f64>,
}

/// Runs one window. `x` holds every node including the stub, laid out
/// `(node, time, feature)`.
pub(crate) fn forward(p: &SubParams, arch: &SubArch, adj: &Mat, x: &[f64], cache: &mut SubCache) {
    let (nt, n, w, f, c, k) = (arch.total_nodes(), arch.nodes, arch.window, arch.features, arch.channels, arch.kernel);
    let (pp, d, o) = (arch.positions(), arch.width, arch.outputs());
    cache.z_pre.resize(nt * pp * c, 0.0);
    cache.z.resize(nt * pp * c, 0.0);
    for u in 0..nt {
        for t in 0..pp {
            let xin = &x[(u * w + t) * f..(u * w + t + k) * f];
            for ch in 0..c {
                let i = (u * pp + t) * c + ch;
                cache.z_pre[i] = p.bt[ch] + crate::tensor::dot(p.wt.row(ch), xin);
                cache.z[i] = relu(cache.z_pre[i]);
            }
        }
    }
    cache.m.clear();
    cache.m.resize(n * pp * c, 0.0);
    cache.g_pre.resize(n * pp * c, 0.0);
    cache.g.resize(n * pp * c, 0.0);
    for v in 0..n {
        for u in 0..nt {
            let a = adj.get(v, u);
            if a == 0.0 {
                continue;
            }
            axpy(a, &cache.z[u * pp * c..(u + 1) * pp * c], &mut cache.m[v * pp * c..(v + 1) * pp * c]);
        }
        for t in 0..pp {
            let base = (v * pp + t) * c;
            p.theta.matvec_into(&cache.m[base..base + c], &mut cache.g_pre[base..base + c]);
            for ch in 0..c {
                cache.g_pre[base + ch] += p.bg[ch];
                cache.g[base + ch] = relu(cache.g_pre[base + ch]);
            }
        }
    }
    cache.e_pre.resize(n * d, 0.0);
    cache.h.resize(n * d, 0.0);
    cache.y.resize(n * o, 0.0);
    for v in 0..n {
        p.e.matvec_into(&cache.g[v * pp * c..(v + 1) * pp * c], &mut cache.e_pre[v * d..(v + 1) * d]);
        for j in 0..d {
            cache.e_pre[v * d + j] += p.be[j];
            cache.h[v * d + j] = relu(cache.e_pre[v * d + j]);
        }
        let yv = &mut cache.y[v * o..(v + 1) * o];
        p.r.matvec_into(&cache.h[v * d..(v + 1) * d], yv);
        let xv = &x[v * w * f..(v + 1) * w * f];
        for (j, out) in yv.iter_mut().enumerate() {
            *out += crate::tensor::dot(p.s.row(j), xv) + p.br[j];
        }
    }
}

/// Accumulates parameter gradients given `dy` for every real node.
pub(crate) fn backward(p: &SubParams, arch: &SubArch, adj: &Mat, x: &[f64], cache: &SubCache, dy: &[f64], g: &mut SubParams) {
    let (nt, n, w, f, c, k) = (arch.total_nodes(), arch.nodes, arch.window, arch.features, arch.channels, arch.kernel);
    let (pp, d, o) = (arch.positions(), arch.width, arch.outputs());
    let mut dz = vec![0.0; nt * pp * c];
    let mut dh = vec![0.0; d];
    let mut dgv = vec![0.0; pp * c];
    let mut dm = vec![0.0; c];
    for v in 0..n {
        let dyv = &dy[v * o..(v + 1) * o];
        let hv = &cache.h[v * d..(v + 1) * d];
        axpy(1.0, dyv, &mut g.br);
        g.r.outer_acc(dyv, hv);
        g.s.outer_acc(dyv, &x[v * w * f..(v + 1) * w * f]);
        dh.iter_mut().for_each(|x| *x = 0.0);
        p.r.matvec_t_acc(dyv, &mut dh);
        for j in 0..d {
            if cache.e_pre[v * d + j] <= 0.0 {
                dh[j] = 0.0;
            }
        }
        axpy(1.0, &dh, &mut g.be);
        let gv = &cache.g[v * pp * c..(v + 1) * pp * c];
        g.e.outer_acc(&dh, gv);
        dgv.iter_mut().for_each(|x| *x = 0.0);
        p.e.matvec_t_acc(&dh, &mut dgv);
        for t in 0..pp {
            let base = (v * pp + t) * c;
            for ch in 0..c {
                if cache.g_pre[base + ch] <= 0.0 {
                    dgv[t * c + ch] = 0.0;
                }
            }
            let dgp = &dgv[t * c..(t + 1) * c];
            axpy(1.0, dgp, &mut g.bg);
            g.theta.outer_acc(dgp, &cache.m[base..base + c]);
            dm.iter_mut().for_each(|x| *x = 0.0);
            p.theta.matvec_t_acc(dgp, &mut dm);
            for u in 0..nt {
                let a = adj.get(v, u);
                if a != 0.0 {
                    axpy(a, &dm, &mut dz[(u * pp + t) * c..(u * pp + t + 1) * c]);
                }
            }
        }
    }
    for u in 0..nt {
        for t in 0..pp {
            let xin = &x[(u * w + t) * f..(u * w + t + k) * f];
            for ch in 0..c {
                let i = (u * pp + t) * c + ch;
                if cache.z_pre[i] <= 0.0 || dz[i] == 0.0 {
                    continue;
                }
                g.bt[ch] += dz[i];
                axpy(dz[i], xin, g.wt.row_mut(ch));
            }
        }
    }
}

/// Normalised member series with the window geometry needed to slice them.
#[derive(Clone, Debug)]
pub(crate) struct SubData {
    /// One timestep-major series per real member.
    pub series: Vec<Vec<f64>>,
}

impl SubData {
    /// Input window at `start` (stub rows stay zero) and, if it fits, the
    /// target block for every real member.
    pub fn window(&self, arch: &SubArch, start: usize, x: &mut Vec<f64>, y: Option<&mut Vec<f64>>) {
        let (w, f) = (arch.window, arch.features);
        x.clear();
        x.resize(arch.total_nodes() * w * f, 0.0);
        for (v, s) in self.series.iter().enumerate() {
            x[v * w * f..(v + 1) * w * f].copy_from_slice(&s[start * f..(start + w) * f]);
        }
        if let Some(y) = y {
            let o = arch.outputs();
            y.clear();
            y.resize(arch.nodes * o, 0.0);
            for (v, s) in self.series.iter().enumerate() {
                y[v * o..(v + 1) * o].copy_from_slice(&s[(start + w) * f..(start + w) * f + o]);
            }
        }
    }
}

/// Mean squared error per node over the batch plus `λ‖θ‖²`; fills `grads`
/// when given.
pub(crate) fn batch_loss(
    p: &SubParams,
    arch: &SubArch,
    adj: &Mat,
    data: &SubData,
    starts: &[usize],
    lambda: f64,
    mut grads: Option<&mut SubParams>,
) -> f64 {
    let scale = 1.0 / (starts.len() * arch.nodes) as f64;
    let mut cache = SubCache::default();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut dy = Vec::new();
    let mut loss = 0.0;
    for &s in starts {
        data.window(arch, s, &mut x, Some(&mut y));
        forward(p, arch, adj, &x, &mut cache);
        dy.clear();
        for (yh, yt) in cache.y.iter().zip(&y) {
            let r = yh - yt;
            loss += r * r * scale;
            dy.push(2.0 * r * scale);
        }
        if let Some(g) = grads.as_deref_mut() {
            backward(p, arch, adj, &x, &cache, &dy, g);
        }
    }
    loss += lambda * p.sq_norm();
    if let Some(g) = grads {
        for ((_, gb), (_, pb)) in g.blocks_mut().into_iter().zip(p.blocks()) {
            for (gi, pi) in gb.iter_mut().zip(pb) {
                *gi += 2.0 * lambda * pi;
            }
        }
    }
    loss
}

/// Sub-model training objective on normalised member series (one
/// timestep-major series per real member) at the given window starts.
/// Accumulates the gradient into `grads` when given.
pub fn sub_objective(
    params: &SubParams,
    arch: &SubArch,
    adj: &Mat,
    series: &[Vec<f64>],
    starts: &[usize],
    lambda: f64,
    grads: Option<&mut SubParams>,
) -> Result<f64> {
    if series.len() != arch.nodes {
        return Err(Error::ShapeMismatch(format!("{} series for {} members", series.len(), arch.nodes)));
    }
    let need = |s: usize| (s + arch.window) * arch.features + arch.outputs();
    if let Some(&s) = starts.iter().find(|&&s| series.iter().any(|x| x.len() < need(s))) {
        return Err(Error::ShapeMismatch(format!("window at {s} runs past the series")));
    }
    let data = SubData { series: series.to_vec() };
    Ok(batch_loss(params, arch, adj, &data, starts, lambda, grads))
}

/// Width and receptive field of a sub-model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubModelSpec {
    pub channels: usize,
    pub kernel: usize,
    pub width: usize,
}

impl Default for SubModelSpec {
    fn default() -> Self {
        SubModelSpec { channels: 8, kernel: 3, width: 8 }
    }
}

/// Trained forecaster of one subgraph. Parameters can only change while
/// the model is unfrozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    subgraph_id: u64,
    node_ids: Vec<String>,
    arch: SubArch,
    adjacency: Mat,
    params: SubParams,
    scalers: Vec<NodeScaler>,
    seed: u64,
    config: TrainConfig,
    data_digest: String,
    epoch_losses: Vec<f64>,
    frozen: bool,
}

impl SubModel {
    pub fn subgraph_id(&self) -> u64 {
        self.subgraph_id
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn arch(&self) -> &SubArch {
        &self.arch
    }

    pub fn params(&self) -> &SubParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut SubParams> {
        if self.frozen {
            return Err(Error::Frozen(self.subgraph_id));
        }
        Ok(&mut self.params)
    }

    pub fn scalers(&self) -> &[NodeScaler] {
        &self.scalers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn data_digest(&self) -> &str {
        &self.data_digest
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// 256-bit content hash of the full checkpoint.
    pub fn digest(&self) -> String {
        json_digest("sub-model", self)
    }

    fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::NotFrozen(self.subgraph_id))
        }
    }

    /// Normalises raw member series with the fitted scalers.
    pub(crate) fn normalize(&self, raw: &[Vec<f64>]) -> SubData {
        SubData { series: raw.iter().zip(&self.scalers).map(|(s, sc)| sc.transform(s)).collect() }
    }

    /// `(embeddings, normalised predictions)` for each start, flattened per
    /// node.
    pub(crate) fn infer(&self, data: &SubData, starts: &[usize]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.require_frozen()?;
        let mut cache = SubCache::default();
        let mut x = Vec::new();
        Ok(starts
            .iter()
            .map(|&s| {
                data.window(&self.arch, s, &mut x, None);
                forward(&self.params, &self.arch, &self.adjacency, &x, &mut cache);
                (cache.h.clone(), cache.y.clone())
            })
            .collect())
    }
}

/// Per-member embeddings of one raw input window (`W × F` per member).
pub fn encode(model: &SubModel, window: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (emb, _) = encode_and_predict(model, window)?;
    Ok(emb)
}

/// Embeddings and de-normalised `P`-step predictions for one raw window.
pub fn encode_and_predict(model: &SubModel, window: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let arch = &model.arch;
    if window.len() != arch.nodes || window.iter().any(|s| s.len() != arch.window * arch.features) {
        return Err(Error::ShapeMismatch(format!("expected {} windows of {} values", arch.nodes, arch.window * arch.features)));
    }
    let data = model.normalize(window);
    let (h, y) = model.infer(&data, &[0])?.pop().unwrap();
    let d = arch.width;
    let o = arch.outputs();
    let emb = h.chunks(d).map(<[f64]>::to_vec).collect();
    let pred = y
        .chunks(o)
        .zip(&model.scalers)
        .map(|(yv, sc)| sc.inverse(yv))
        .collect();
    Ok((emb, pred))
}

/// Trains and freezes the forecaster of `sub`.
///
/// Members listed in `exclude` are dropped together with every edge that
/// touches them before any data is read, so their features never enter the
/// model or its digest.
#[allow(clippy::too_many_arguments)]
pub fn train_submodel(
    sub: &Subgraph,
    reader: &mut DataReader,
    task: &ForecastTask,
    split: &Split,
    spec: &SubModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    exclude: &BTreeSet<usize>,
) -> Result<SubModel> {
    cfg.validate()?;
    let (total, f) = reader.graph_shape();
    task.validate(total)?;
    split.validate(task)?;
    if spec.kernel < 1 || spec.kernel > task.window || spec.channels < 1 || spec.width < 1 {
        return invalid(format!("bad sub-model spec {spec:?} for window {}", task.window));
    }
    let sub = without_nodes(sub, exclude);
    if sub.is_empty() {
        return Err(Error::EmptySubgraph(sub.id));
    }
    let arch = SubArch {
        nodes: sub.len(),
        stub: sub.has_stub,
        window: task.window,
        features: f,
        horizon: task.horizon,
        channels: spec.channels,
        kernel: spec.kernel,
        width: spec.width,
    };
    let mut digest = Hasher::new("sub-model-data");
    let mut node_ids = Vec::with_capacity(sub.len());
    let mut scalers = Vec::with_capacity(sub.len());
    let mut series = Vec::with_capacity(sub.len());
    for &v in &sub.nodes {
        let raw = reader.series(v, 0, split.train_end);
        let id = reader_id(reader, v);
        digest.str(&id).f64s(&raw);
        let sc = NodeScaler::fit(&raw, f);
        series.push(sc.transform(&raw));
        scalers.push(sc);
        node_ids.push(id);
    }
    let data = SubData { series };
    let adjacency = normalized_adjacency(&sub);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = SubParams::init(&arch, &mut rng);
    let mut grads = params.zeros_like();
    let mut order = split.train_starts(task);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch) {
            grads = params.zeros_like();
            total_loss += batch_loss(&params, &arch, &adjacency, &data, batch, cfg.lambda_reg, Some(&mut grads));
            descend(&mut params, &grads, cfg.learning_rate, cfg.grad_clip);
            batches += 1;
        }
        let mean = total_loss / batches as f64;
        epoch_losses.push(mean);
        if mean < cfg.stop_loss {
            break;
        }
    }
    drop(grads);
    Ok(SubModel {
        subgraph_id: sub.id,
        node_ids,
        arch,
        adjacency,
        params,
        scalers,
        seed,
        config: cfg.clone(),
        data_digest: digest.finish(),
        epoch_losses,
        frozen: true,
    })
}

fn reader_id(reader: &DataReader, v: usize) -> String {
    reader.node_id(v).to_string()
}

fn without_nodes(sub: &Subgraph, exclude: &BTreeSet<usize>) -> Subgraph {
    if !sub.nodes.iter().any(|v| exclude.contains(v)) {
        return sub.clone();
    }
    let keep = |v: &usize| !exclude.contains(v);
    let mut out = Subgraph::new(
        sub.id,
        sub.nodes.iter().copied().filter(keep).collect(),
        sub.edges.iter().copied().filter(|(u, v)| keep(u) && keep(v)).collect(),
    );
    out.virtual_edges = sub
        .virtual_edges
        .iter()
        .copied()
        .filter(|e| keep(&e.a) && !matches!(e.b, Endpoint::Node(b) if !keep(&b)))
        .collect();
    out.has_stub = out.virtual_edges.iter().any(|e| e.b == Endpoint::Stub);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::data::Ledger;
    use crate::neural::params::gradcheck;
    use crate::stgraph::{generate_synthetic, STGraph};
    use rand::Rng;

    fn small_sub() -> Subgraph {
        let mut s = Subgraph::new(7, vec![0, 1, 2], vec![(0, 1), (1, 2)]);
        s.virtual_edges.push(crate::esc::VirtualEdge { a: 2, b: Endpoint::Stub, kind: crate::esc::VirtualKind::GanglionStub });
        s.has_stub = true;
        s
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, ..TrainConfig::default() }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = SubArch { nodes: 3, stub: true, window: 5, features: 2, horizon: 2, channels: 3, kernel: 2, width: 4 };
        let adj = normalized_adjacency(&small_sub());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: Vec<(String, f64)> = Vec::new();
        for _ in 0..20 {
            let mut p = SubParams::init(&arch, &mut rng);
            for (_, b) in p.blocks_mut() {
                for x in b.iter_mut() {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
            let data = SubData { series: (0..3).map(|_| (0..20 * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
            let starts = [0usize, 4, 9];
            let mut g = p.zeros_like();
            batch_loss(&p, &arch, &adj, &data, &starts, 0.01, Some(&mut g));
            let errs = gradcheck::check_point(&p, &g, &mut rng, |q| batch_loss(q, &arch, &adj, &data, &starts, 0.01, None));
            for (name, e) in errs {
                match worst.iter_mut().find(|(n, _)| *n == name) {
                    Some(w) => w.1 = w.1.max(e),
                    None => worst.push((name, e)),
                }
            }
        }
        assert_eq!(worst.len(), 9);
        for (name, e) in worst {
            assert!(e < gradcheck::TOLERANCE, "{name}: {e}");
        }
    }

    fn zero_graph() -> STGraph {
        let n = 3;
        STGraph::new((0..n).map(|i| format!("z{i}")).collect(), 80, 1, vec![(0, 1), (1, 2)], vec![0.0; 80 * n]).unwrap()
    }

    #[test]
    fn zero_data_only_shrinks_weights() {
        let g = zero_graph();
        let mut ledger = Ledger::new();
        let mut reader = DataReader::new(&g, &mut ledger, "t");
        let sub = Subgraph::new(0, vec![0, 1, 2], vec![(0, 1), (1, 2)]);
        let task = ForecastTask::new(3, 12);
        let split = Split::temporal(80);
        let cfg = TrainConfig { epochs: 1, batch: 1000, lambda_reg: 0.01, ..TrainConfig::default() };
        let m = train_submodel(&sub, &mut reader, &task, &split, &SubModelSpec::default(), &cfg, 5, &BTreeSet::new()).unwrap();
        let init = SubParams::init(&m.arch, &mut ChaCha8Rng::seed_from_u64(5));
        // One full batch: the reported loss is the regulariser at the init point.
        assert!((m.epoch_losses[0] - 0.01 * init.sq_norm()).abs() < 1e-12);
        let (_, pred) = encode_and_predict(&m, &vec![vec![0.0; 12]; 3]).unwrap();
        assert!(pred.iter().flatten().all(|&y| y == 0.0));
        let emb = encode(&m, &vec![vec![0.0; 12]; 3]).unwrap();
        assert!(emb.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_frozen() {
        let g = generate_synthetic(6, 120, 1, 0.3).unwrap().graph;
        let sub = Subgraph::new(0, vec![0, 1, 2, 3], vec![]);
        let task = ForecastTask::default();
        let split = Split::temporal(120);
        let run = || {
            let mut ledger = Ledger::new();
            let mut reader = DataReader::new(&g, &mut ledger, "t");
            train_submodel(&sub, &mut reader, &task, &split, &SubModelSpec::default(), &fast_cfg(), 9, &BTreeSet::new()).unwrap()
        };
        let mut a = run();
        let b = run();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(matches!(a.params_mut(), Err(Error::Frozen(0))));
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn excluded_nodes_are_never_read() {
        let g = generate_synthetic(6, 120, 2, 0.3).unwrap().graph;
        let sub = Subgraph::new(3, vec![0, 1, 2], vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        let mut ledger = Ledger::new();
        let mut reader = DataReader::new(&g, &mut ledger, "t");
        let task = ForecastTask::default();
        let m = train_submodel(&sub, &mut reader, &task, &Split::temporal(120), &SubModelSpec::default(), &fast_cfg(), 1, &[1].into()).unwrap();
        assert_eq!(m.node_ids(), &["n0".to_string(), "n2".to_string()][..]);
        assert!(!ledger.nodes_read(None).contains("n1"));
        let mut reader = DataReader::new(&g, &mut ledger, "t");
        let err = train_submodel(&sub, &mut reader, &task, &Split::temporal(120), &SubModelSpec::default(), &fast_cfg(), 1, &[0, 1, 2].into());
        assert!(matches!(err, Err(Error::EmptySubgraph(3))));
    }

    #[test]
    fn identical_subgraphs_give_identical_embeddings() {
        let g = generate_synthetic(8, 120, 3, 0.3).unwrap().graph;
        let task = ForecastTask::default();
        let split = Split::temporal(120);
        let sub = Subgraph::new(0, vec![0, 1], vec![]);
        let mut l = Ledger::new();
        let a = train_submodel(&sub, &mut DataReader::new(&g, &mut l, "a"), &task, &split, &SubModelSpec::default(), &fast_cfg(), 4, &BTreeSet::new()).unwrap();
        let b = train_submodel(&sub, &mut DataReader::new(&g, &mut l, "b"), &task, &split, &SubModelSpec::default(), &fast_cfg(), 4, &BTreeSet::new()).unwrap();
        let window: Vec<Vec<f64>> = (0..2).map(|v| (0..12).map(|t| g.value(t, v, 0)).collect()).collect();
        let ea = encode(&a, &window).unwrap();
        assert_eq!(ea, encode(&b, &window).unwrap());
        assert!(ea.iter().flatten().all(|h| h.is_finite()));
    }
}
