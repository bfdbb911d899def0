use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{invalid, Error, Result};
use crate::esc::Partition;
use crate::ggb::{MetaGraph, MetaVertex};
use crate::tensor::{axpy, dot, Mat};

use super::params::{descend, init_mat, relu, ParamBlocks};
use super::submodel::{SubModel, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    /// Token and ganglion width `D_g`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_init: f64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig { dim: 16, heads: 2, layers: 2, lambda1: 0.01, lambda2: 0.001, alpha_init: 0.5 }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.dim % self.heads != 0 {
            return invalid(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return invalid("regularisation weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return invalid(format!("alpha_init {} outside [0,1]", self.alpha_init));
        }
        Ok(())
    }
}

/// Index structure tying meta-vertices to the live nodes of a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLayout {
    pub vertices: Vec<MetaVertex>,
    /// Sorted `(neighbour, edge)` lists.
    pub nbrs: Vec<Vec<(usize, usize)>>,
    /// Subgraph owning each non-ganglion vertex.
    pub group: Vec<Option<usize>>,
    /// For real vertices, position in `nodes`.
    pub real_pos: Vec<Option<usize>>,
    /// Live node indices, ascending; samples are laid out in this order.
    pub nodes: Vec<usize>,
    pub node_group: Vec<usize>,
    /// Token that carries each live node's correction.
    pub node_token: Vec<usize>,
    pub slot_members: Vec<Vec<usize>>,
    pub ganglion_vertices: Vec<usize>,
    /// `d_i + P·F` per subgraph.
    pub input_dims: Vec<usize>,
    pub outputs: usize,
    pub edge_count: usize,
    pub initial_weights: Vec<f64>,
}

impl MetaLayout {
    pub fn new(meta: &MetaGraph, partition: &Partition, widths: &[usize], outputs: usize) -> Result<Self> {
        let m = partition.subgraphs.len();
        if widths.len() != m || meta.slot_count() != m {
            return Err(Error::ShapeMismatch(format!(
                "{} widths and {} slots for {m} subgraphs",
                widths.len(),
                meta.slot_count()
            )));
        }
        let nv = meta.vertices.len();
        let mut nbrs = vec![Vec::new(); nv];
        for (e, edge) in meta.edges.iter().enumerate() {
            if edge.a >= nv || edge.b >= nv || edge.a == edge.b {
                return invalid(format!("meta-edge {e} ({}, {}) is inconsistent with {nv} vertices", edge.a, edge.b));
            }
            nbrs[edge.a].push((edge.b, e));
            nbrs[edge.b].push((edge.a, e));
        }
        nbrs.iter_mut().for_each(|l| l.sort_unstable());
        let mut nodes: Vec<usize> = partition.subgraphs.iter().flat_map(|s| s.nodes.iter().copied()).collect();
        nodes.sort_unstable();
        let node_group: Vec<usize> = nodes.iter().map(|&v| partition.subgraph_of(v).unwrap()).collect();
        let mut group = vec![None; nv];
        let mut real_pos = vec![None; nv];
        let mut node_token: Vec<usize> = node_group.iter().map(|&g| meta.position(MetaVertex::Slot(g)).unwrap()).collect();
        let mut slot_members = vec![Vec::new(); m];
        for (k, &g) in node_group.iter().enumerate() {
            slot_members[g].push(k);
        }
        let mut ganglion_vertices = Vec::new();
        for (i, vx) in meta.vertices.iter().enumerate() {
            match *vx {
                MetaVertex::Real(v) => {
                    let k = nodes
                        .binary_search(&v)
                        .map_err(|_| Error::InvalidArgument(format!("meta-vertex for node {v} which is not live")))?;
                    real_pos[i] = Some(k);
                    group[i] = Some(node_group[k]);
                    node_token[k] = i;
                }
                MetaVertex::Slot(s) => group[i] = Some(s),
                MetaVertex::Ganglion(_) => ganglion_vertices.push(i),
            }
        }
        Ok(MetaLayout {
            vertices: meta.vertices.clone(),
            nbrs,
            group,
            real_pos,
            nodes,
            node_group,
            node_token,
            slot_members,
            ganglion_vertices,
            input_dims: widths.iter().map(|w| w + outputs).collect(),
            outputs,
            edge_count: meta.edges.len(),
            initial_weights: meta.edges.iter().map(|e| e.weight).collect(),
        })
    }

    fn is_ganglion(&self, i: usize) -> bool {
        self.group[i].is_none()
    }
}

/// One training window: `[h_v; ŷ_v]` from the frozen sub-models and the
/// normalised target for every live node, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSample {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub win: Vec<Mat>,
    pub bin: Vec<Vec<f64>>,
    pub gw1: Vec<Mat>,
    pub gb1: Vec<Vec<f64>>,
    pub gw2: Vec<Mat>,
    pub gb2: Vec<Vec<f64>>,
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Vec<Mat>,
    pub wr: Mat,
    pub br: Vec<f64>,
    pub alpha: Vec<f64>,
    pub a_meta: Vec<f64>,
}

impl GlobalParams {
    fn init(layout: &MetaLayout, cfg: &GlobalConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let g = layout.ganglion_vertices.len();
        GlobalParams {
            win: layout.input_dims.iter().map(|&k| init_mat(rng, d, k)).collect(),
            bin: vec![vec![0.0; d]; layout.input_dims.len()],
            gw1: (0..g).map(|_| init_mat(rng, d, d)).collect(),
            gb1: vec![vec![0.0; d]; g],
            gw2: (0..g).map(|_| init_mat(rng, d, d)).collect(),
            gb2: vec![vec![0.0; d]; g],
            wq: (0..cfg.layers).map(|_| init_mat(rng, d, d)).collect(),
            wk: (0..cfg.layers).map(|_| init_mat(rng, d, d)).collect(),
            wv: (0..cfg.layers).map(|_| init_mat(rng, d, d)).collect(),
            wo: (0..cfg.layers).map(|_| init_mat(rng, d, d)).collect(),
            // Zero readout: an untrained layer passes sub-model forecasts through.
            wr: Mat::zeros(layout.outputs, d),
            br: vec![0.0; layout.outputs],
            alpha: vec![cfg.alpha_init],
            a_meta: layout.initial_weights.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        let zv = |v: &Vec<f64>| vec![0.0; v.len()];
        GlobalParams {
            win: self.win.iter().map(z).collect(),
            bin: self.bin.iter().map(zv).collect(),
            gw1: self.gw1.iter().map(z).collect(),
            gb1: self.gb1.iter().map(zv).collect(),
            gw2: self.gw2.iter().map(z).collect(),
            gb2: self.gb2.iter().map(zv).collect(),
            wq: self.wq.iter().map(z).collect(),
            wk: self.wk.iter().map(z).collect(),
            wv: self.wv.iter().map(z).collect(),
            wo: self.wo.iter().map(z).collect(),
            wr: z(&self.wr),
            br: zv(&self.br),
            alpha: vec![0.0],
            a_meta: zv(&self.a_meta),
        }
    }

    fn project(&mut self) {
        self.alpha[0] = self.alpha[0].clamp(0.0, 1.0);
        self.a_meta.iter_mut().for_each(|a| *a = a.max(0.0));
    }
}

impl ParamBlocks for GlobalParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, m) in self.win.iter().enumerate() {
            out.push((format!("input.{i}.weight"), &m.data));
            out.push((format!("input.{i}.bias"), &self.bin[i]));
        }
        for g in 0..self.gw1.len() {
            out.push((format!("ganglion.{g}.w1"), &self.gw1[g].data));
            out.push((format!("ganglion.{g}.b1"), &self.gb1[g]));
            out.push((format!("ganglion.{g}.w2"), &self.gw2[g].data));
            out.push((format!("ganglion.{g}.b2"), &self.gb2[g]));
        }
        for l in 0..self.wq.len() {
            out.push((format!("attention.{l}.query"), &self.wq[l].data));
            out.push((format!("attention.{l}.key"), &self.wk[l].data));
            out.push((format!("attention.{l}.value"), &self.wv[l].data));
            out.push((format!("attention.{l}.output"), &self.wo[l].data));
        }
        out.push(("readout.weight".into(), &self.wr.data));
        out.push(("readout.bias".into(), &self.br));
        out.push(("fusion.alpha".into(), &self.alpha));
        out.push(("meta.adjacency".into(), &self.a_meta));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, (m, b)) in self.win.iter_mut().zip(self.bin.iter_mut()).enumerate() {
            out.push((format!("input.{i}.weight"), &mut m.data));
            out.push((format!("input.{i}.bias"), b));
        }
        let gang = self.gw1.iter_mut().zip(self.gb1.iter_mut()).zip(self.gw2.iter_mut().zip(self.gb2.iter_mut()));
        for (g, ((w1, b1), (w2, b2))) in gang.enumerate() {
            out.push((format!("ganglion.{g}.w1"), &mut w1.data));
            out.push((format!("ganglion.{g}.b1"), b1));
            out.push((format!("ganglion.{g}.w2"), &mut w2.data));
            out.push((format!("ganglion.{g}.b2"), b2));
        }
        let att = self.wq.iter_mut().zip(self.wk.iter_mut()).zip(self.wv.iter_mut().zip(self.wo.iter_mut()));
        for (l, ((q, k), (v, o))) in att.enumerate() {
            out.push((format!("attention.{l}.query"), &mut q.data));
            out.push((format!("attention.{l}.key"), &mut k.data));
            out.push((format!("attention.{l}.value"), &mut v.data));
            out.push((format!("attention.{l}.output"), &mut o.data));
        }
        out.push(("readout.weight".into(), &mut self.wr.data));
        out.push(("readout.bias".into(), &mut self.br));
        out.push(("fusion.alpha".into(), &mut self.alpha));
        out.push(("meta.adjacency".into(), &mut self.a_meta));
        out
    }
}

/// `α·h_tok + (1−α)·h_gang`.
pub fn fuse(h_tok: &[f64], h_gang: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if h_tok.len() != h_gang.len() {
        return Err(Error::ShapeMismatch(format!("fuse {} vs {}", h_tok.len(), h_gang.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha {alpha} outside [0,1]"));
    }
    Ok(h_tok.iter().zip(h_gang).map(|(t, g)| alpha * t + (1.0 - alpha) * g).collect())
}

/// `Σ_v‖y_v − ŷ_v‖² + λ1·Σ|a| + λ2·Σ_g‖h_g‖²`.
pub fn ggb_loss(
    yhat: &[Vec<f64>],
    y: &[Vec<f64>],
    a_meta: &[f64],
    ganglion_states: &[Vec<f64>],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return invalid("regularisation weights must be non-negative");
    }
    if yhat.len() != y.len() || yhat.iter().zip(y).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("predictions and targets differ in shape".into()));
    }
    let fit: f64 = yhat.iter().zip(y).flat_map(|(a, b)| a.iter().zip(b)).map(|(p, t)| (p - t) * (p - t)).sum();
    let l1: f64 = a_meta.iter().map(|a| a.abs()).sum();
    let gang: f64 = ganglion_states.iter().map(|h| dot(h, h)).sum();
    Ok(fit + lambda1 * l1 + lambda2 * gang)
}

#[derive(Clone, Debug, Default)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    /// Per vertex: `heads × |J(i)|` normalised weights, self first.
    c: Vec<Vec<f64>>,
    /// Unweighted `exp(s - max)` in the same layout.
    ex: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct GlobalCache {
    inputs: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    gang_u: Vec<Vec<f64>>,
    gang_pre: Vec<Vec<f64>>,
    gang_h: Vec<Vec<f64>>,
    att: Vec<AttnCache>,
    hg: Vec<f64>,
    fused: Vec<f64>,
    pub yhat: Vec<Vec<f64>>,
}

fn forward(p: &GlobalParams, layout: &MetaLayout, cfg: &GlobalConfig, inputs: &[Vec<f64>], cache: &mut GlobalCache) {
    let nv = layout.vertices.len();
    let d = cfg.dim;
    let (heads, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x0 = vec![0.0; nv * d];
    cache.inputs = vec![Vec::new(); nv];
    for i in 0..nv {
        let Some(grp) = layout.group[i] else { continue };
        let input = match layout.real_pos[i] {
            Some(k) => inputs[k].clone(),
            None => {
                let members = &layout.slot_members[grp];
                let mut mean = vec![0.0; layout.input_dims[grp]];
                for &k in members {
                    axpy(1.0, &inputs[k], &mut mean);
                }
                mean.iter_mut().for_each(|x| *x /= members.len().max(1) as f64);
                mean
            }
        };
        let xi = &mut x0[i * d..(i + 1) * d];
        p.win[grp].matvec_into(&input, xi);
        axpy(1.0, &p.bin[grp], xi);
        cache.inputs[i] = input;
    }
    let ng = layout.ganglion_vertices.len();
    cache.gang_u = vec![vec![0.0; d]; ng];
    cache.gang_pre = vec![vec![0.0; d]; ng];
    cache.gang_h = vec![vec![0.0; d]; ng];
    for (g, &i) in layout.ganglion_vertices.iter().enumerate() {
        let nb = &layout.nbrs[i];
        let mut u = vec![0.0; d];
        for &(j, e) in nb {
            if !layout.is_ganglion(j) {
                axpy(p.a_meta[e] / nb.len() as f64, &x0[j * d..(j + 1) * d], &mut u);
            }
        }
        let mut pre = vec![0.0; d];
        p.gw1[g].matvec_into(&u, &mut pre);
        axpy(1.0, &p.gb1[g], &mut pre);
        let hid: Vec<f64> = pre.iter().map(|&v| relu(v)).collect();
        let mut h = vec![0.0; d];
        p.gw2[g].matvec_into(&hid, &mut h);
        axpy(1.0, &p.gb2[g], &mut h);
        x0[i * d..(i + 1) * d].copy_from_slice(&h);
        cache.gang_u[g] = u;
        cache.gang_pre[g] = pre;
        cache.gang_h[g] = h;
    }
    cache.x = vec![x0];
    cache.att.clear();
    for l in 0..cfg.layers {
        let x = &cache.x[l];
        let mut a = AttnCache { q: vec![0.0; nv * d], k: vec![0.0; nv * d], v: vec![0.0; nv * d], o: vec![0.0; nv * d], ..Default::default() };
        for i in 0..nv {
            let xi = &x[i * d..(i + 1) * d];
            p.wq[l].matvec_into(xi, &mut a.q[i * d..(i + 1) * d]);
            p.wk[l].matvec_into(xi, &mut a.k[i * d..(i + 1) * d]);
            p.wv[l].matvec_into(xi, &mut a.v[i * d..(i + 1) * d]);
        }
        for i in 0..nv {
            let js: Vec<(usize, f64)> =
                std::iter::once((i, 1.0)).chain(layout.nbrs[i].iter().map(|&(j, e)| (j, p.a_meta[e]))).collect();
            let nj = js.len();
            let mut c = vec![0.0; heads * nj];
            let mut ex = vec![0.0; heads * nj];
            let mut zs = vec![0.0; heads];
            for h in 0..heads {
                let qi = &a.q[i * d + h * dh..i * d + (h + 1) * dh];
                let s: Vec<f64> = js.iter().map(|&(j, _)| scale * dot(qi, &a.k[j * d + h * dh..j * d + (h + 1) * dh])).collect();
                let smax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (jj, &(_, w)) in js.iter().enumerate() {
                    let e = (s[jj] - smax).exp();
                    ex[h * nj + jj] = e;
                    z += w * e;
                }
                for (jj, &(j, w)) in js.iter().enumerate() {
                    let cij = w * ex[h * nj + jj] / z;
                    c[h * nj + jj] = cij;
                    if cij != 0.0 {
                        axpy(cij, &a.v[j * d + h * dh..j * d + (h + 1) * dh], &mut a.o[i * d + h * dh..i * d + (h + 1) * dh]);
                    }
                }
                zs[h] = z;
            }
            a.c.push(c);
            a.ex.push(ex);
            a.z.push(zs);
        }
        let mut next = x.clone();
        for i in 0..nv {
            let mut delta = vec![0.0; d];
            p.wo[l].matvec_into(&a.o[i * d..(i + 1) * d], &mut delta);
            axpy(1.0, &delta, &mut next[i * d..(i + 1) * d]);
        }
        cache.att.push(a);
        cache.x.push(next);
    }
    let xl = cache.x.last().unwrap();
    let alpha = p.alpha[0];
    cache.hg = vec![0.0; nv * d];
    cache.fused = vec![0.0; nv * d];
    for t in 0..nv {
        if layout.is_ganglion(t) {
            continue;
        }
        let gn: Vec<(usize, usize)> = layout.nbrs[t].iter().copied().filter(|&(g, _)| layout.is_ganglion(g)).collect();
        for &(g, e) in &gn {
            axpy(p.a_meta[e] / gn.len() as f64, &xl[g * d..(g + 1) * d], &mut cache.hg[t * d..(t + 1) * d]);
        }
        for c in 0..d {
            cache.fused[t * d + c] = alpha * xl[t * d + c] + (1.0 - alpha) * cache.hg[t * d + c];
        }
    }
    cache.yhat = inputs
        .iter()
        .enumerate()
        .map(|(k, input)| {
            let t = layout.node_token[k];
            let o = layout.outputs;
            let mut y = input[input.len() - o..].to_vec();
            let mut corr = vec![0.0; o];
            p.wr.matvec_into(&cache.fused[t * d..(t + 1) * d], &mut corr);
            axpy(1.0, &corr, &mut y);
            axpy(1.0, &p.br, &mut y);
            y
        })
        .collect();
}

/// Accumulates gradients of `data_scale·Σ‖ŷ−y‖² + gang_scale·Σ_g‖h_g‖²`.
#[allow(clippy::too_many_arguments)]
fn backward(
    p: &GlobalParams,
    layout: &MetaLayout,
    cfg: &GlobalConfig,
    targets: &[Vec<f64>],
    cache: &GlobalCache,
    data_scale: f64,
    gang_scale: f64,
    g: &mut GlobalParams,
) {
    let nv = layout.vertices.len();
    let d = cfg.dim;
    let (heads, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let o = layout.outputs;
    let alpha = p.alpha[0];
    let xl = cache.x.last().unwrap();
    let mut dfused = vec![0.0; nv * d];
    for (k, y) in targets.iter().enumerate() {
        let t = layout.node_token[k];
        let dy: Vec<f64> = cache.yhat[k].iter().zip(y).map(|(a, b)| 2.0 * (a - b) * data_scale).collect();
        axpy(1.0, &dy, &mut g.br);
        g.wr.outer_acc(&dy, &cache.fused[t * d..(t + 1) * d]);
        p.wr.matvec_t_acc(&dy, &mut dfused[t * d..(t + 1) * d]);
    }
    debug_assert_eq!(o, g.br.len());
    let mut dx = vec![0.0; nv * d];
    for t in 0..nv {
        if layout.is_ganglion(t) {
            continue;
        }
        let df = &dfused[t * d..(t + 1) * d];
        for c in 0..d {
            g.alpha[0] += df[c] * (xl[t * d + c] - cache.hg[t * d + c]);
            dx[t * d + c] += alpha * df[c];
        }
        let gn: Vec<(usize, usize)> = layout.nbrs[t].iter().copied().filter(|&(gv, _)| layout.is_ganglion(gv)).collect();
        let inv = 1.0 / gn.len().max(1) as f64;
        for &(gv, e) in &gn {
            let dhg: Vec<f64> = df.iter().map(|v| (1.0 - alpha) * v).collect();
            axpy(p.a_meta[e] * inv, &dhg, &mut dx[gv * d..(gv + 1) * d]);
            g.a_meta[e] += inv * dot(&dhg, &xl[gv * d..(gv + 1) * d]);
        }
    }
    for l in (0..cfg.layers).rev() {
        let a = &cache.att[l];
        let x = &cache.x[l];
        let mut dq = vec![0.0; nv * d];
        let mut dk = vec![0.0; nv * d];
        let mut dv = vec![0.0; nv * d];
        let mut dout = vec![0.0; nv * d];
        for i in 0..nv {
            g.wo[l].outer_acc(&dx[i * d..(i + 1) * d], &a.o[i * d..(i + 1) * d]);
            p.wo[l].matvec_t_acc(&dx[i * d..(i + 1) * d], &mut dout[i * d..(i + 1) * d]);
        }
        for i in 0..nv {
            let js: Vec<(usize, Option<usize>)> =
                std::iter::once((i, None)).chain(layout.nbrs[i].iter().map(|&(j, e)| (j, Some(e)))).collect();
            let nj = js.len();
            for h in 0..heads {
                let doi = &dout[i * d + h * dh..i * d + (h + 1) * dh];
                let c = &a.c[i][h * nj..(h + 1) * nj];
                let dc: Vec<f64> = js.iter().map(|&(j, _)| dot(doi, &a.v[j * d + h * dh..j * d + (h + 1) * dh])).collect();
                let mean: f64 = c.iter().zip(&dc).map(|(ci, di)| ci * di).sum();
                for (jj, &(j, e)) in js.iter().enumerate() {
                    if c[jj] != 0.0 {
                        axpy(c[jj], doi, &mut dv[j * d + h * dh..j * d + (h + 1) * dh]);
                    }
                    let ds = c[jj] * (dc[jj] - mean);
                    if ds != 0.0 {
                        let kj: Vec<f64> = a.k[j * d + h * dh..j * d + (h + 1) * dh].to_vec();
                        let qi: Vec<f64> = a.q[i * d + h * dh..i * d + (h + 1) * dh].to_vec();
                        axpy(ds * scale, &kj, &mut dq[i * d + h * dh..i * d + (h + 1) * dh]);
                        axpy(ds * scale, &qi, &mut dk[j * d + h * dh..j * d + (h + 1) * dh]);
                    }
                    if let Some(e) = e {
                        g.a_meta[e] += a.ex[i][h * nj + jj] / a.z[i][h] * (dc[jj] - mean);
                    }
                }
            }
        }
        for i in 0..nv {
            let xi = &x[i * d..(i + 1) * d];
            let dxi = &mut dx[i * d..(i + 1) * d];
            g.wq[l].outer_acc(&dq[i * d..(i + 1) * d], xi);
            g.wk[l].outer_acc(&dk[i * d..(i + 1) * d], xi);
            g.wv[l].outer_acc(&dv[i * d..(i + 1) * d], xi);
            p.wq[l].matvec_t_acc(&dq[i * d..(i + 1) * d], dxi);
            p.wk[l].matvec_t_acc(&dk[i * d..(i + 1) * d], dxi);
            p.wv[l].matvec_t_acc(&dv[i * d..(i + 1) * d], dxi);
        }
    }
    let x0 = &cache.x[0];
    for (gi, &i) in layout.ganglion_vertices.iter().enumerate() {
        let mut dh_: Vec<f64> = dx[i * d..(i + 1) * d].to_vec();
        axpy(2.0 * gang_scale, &cache.gang_h[gi], &mut dh_);
        axpy(1.0, &dh_, &mut g.gb2[gi]);
        let hid: Vec<f64> = cache.gang_pre[gi].iter().map(|&v| relu(v)).collect();
        g.gw2[gi].outer_acc(&dh_, &hid);
        let mut dhid = vec![0.0; d];
        p.gw2[gi].matvec_t_acc(&dh_, &mut dhid);
        for c in 0..d {
            if cache.gang_pre[gi][c] <= 0.0 {
                dhid[c] = 0.0;
            }
        }
        axpy(1.0, &dhid, &mut g.gb1[gi]);
        g.gw1[gi].outer_acc(&dhid, &cache.gang_u[gi]);
        let mut du = vec![0.0; d];
        p.gw1[gi].matvec_t_acc(&dhid, &mut du);
        let nb = &layout.nbrs[i];
        let inv = 1.0 / nb.len() as f64;
        for &(j, e) in nb {
            if layout.is_ganglion(j) {
                continue;
            }
            axpy(p.a_meta[e] * inv, &du, &mut dx[j * d..(j + 1) * d]);
            g.a_meta[e] += inv * dot(&du, &x0[j * d..(j + 1) * d]);
        }
    }
    for i in 0..nv {
        let Some(grp) = layout.group[i] else { continue };
        g.win[grp].outer_acc(&dx[i * d..(i + 1) * d], &cache.inputs[i]);
        axpy(1.0, &dx[i * d..(i + 1) * d], &mut g.bin[grp]);
    }
}

/// Training objective over a batch: mean squared error per node, the L1
/// penalty on meta weights, and the mean ganglion energy per window.
pub(crate) fn batch_loss(
    p: &GlobalParams,
    layout: &MetaLayout,
    cfg: &GlobalConfig,
    batch: &[&GlobalSample],
    mut grads: Option<&mut GlobalParams>,
) -> f64 {
    let data_scale = 1.0 / (batch.len() * layout.nodes.len()) as f64;
    let gang_scale = 1.0 / batch.len() as f64;
    let mut cache = GlobalCache::default();
    let mut loss = 0.0;
    for s in batch {
        forward(p, layout, cfg, &s.inputs, &mut cache);
        for (yh, y) in cache.yhat.iter().zip(&s.targets) {
            loss += data_scale * yh.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        loss += cfg.lambda2 * gang_scale * cache.gang_h.iter().map(|h| dot(h, h)).sum::<f64>();
        if let Some(g) = grads.as_deref_mut() {
            backward(p, layout, cfg, &s.targets, &cache, data_scale, cfg.lambda2 * gang_scale, g);
        }
    }
    loss += cfg.lambda1 * p.a_meta.iter().map(|a| a.abs()).sum::<f64>();
    if let Some(g) = grads {
        for (ga, &a) in g.a_meta.iter_mut().zip(&p.a_meta) {
            let sign = if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            };
            *ga += cfg.lambda1 * sign;
        }
    }
    loss
}

/// Global-layer training objective over a batch of samples. Accumulates
/// the gradient into `grads` when given.
pub fn ggb_objective(
    params: &GlobalParams,
    layout: &MetaLayout,
    cfg: &GlobalConfig,
    batch: &[&GlobalSample],
    grads: Option<&mut GlobalParams>,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if params.a_meta.len() != layout.edge_count || params.win.len() != layout.input_dims.len() {
        return Err(Error::ShapeMismatch("parameters do not match the layout".into()));
    }
    for s in batch {
        let widths_ok = s.inputs.iter().enumerate().all(|(i, x)| x.len() == layout.input_dims[layout.node_group[i]]);
        if s.inputs.len() != layout.nodes.len() || s.targets.len() != layout.nodes.len() || !widths_ok
            || s.targets.iter().any(|t| t.len() != layout.outputs)
        {
            return Err(Error::ShapeMismatch("sample does not match the layout".into()));
        }
    }
    Ok(batch_loss(params, layout, cfg, batch, grads))
}

/// Fusion transformer, ganglion MLPs and trainable meta-adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalLayer {
    config: GlobalConfig,
    params: GlobalParams,
    seed: u64,
    meta_digest: String,
    train_config: Option<TrainConfig>,
    epoch_losses: Vec<f64>,
}

impl GlobalLayer {
    /// Fresh layer for `meta`; every parameter comes from `seed`.
    pub fn new(meta: &MetaGraph, layout: &MetaLayout, config: &GlobalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(GlobalLayer {
            config: config.clone(),
            params: GlobalParams::init(layout, config, &mut rng),
            seed,
            meta_digest: meta.digest(),
            train_config: None,
            epoch_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &GlobalConfig {
        &self.config
    }

    pub fn params(&self) -> &GlobalParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GlobalParams {
        &mut self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha[0]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn meta_digest(&self) -> &str {
        &self.meta_digest
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn digest(&self) -> String {
        json_digest("global-layer", self)
    }

    /// Normalised predictions for every live node of one window.
    pub fn forward(&self, layout: &MetaLayout, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_full(layout, inputs)?.yhat)
    }

    pub(crate) fn forward_full(&self, layout: &MetaLayout, inputs: &[Vec<f64>]) -> Result<GlobalCache> {
        self.check_inputs(layout, inputs)?;
        let mut cache = GlobalCache::default();
        forward(&self.params, layout, &self.config, inputs, &mut cache);
        Ok(cache)
    }

    /// Attention weights per layer, vertex and head, over `{self} ∪ neighbours`.
    pub fn attention_weights(&self, layout: &MetaLayout, inputs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        let cache = self.forward_full(layout, inputs)?;
        Ok(cache
            .att
            .iter()
            .map(|a| {
                a.c.iter()
                    .map(|c| {
                        let nj = c.len() / self.config.heads;
                        c.chunks(nj).map(<[f64]>::to_vec).collect()
                    })
                    .collect()
            })
            .collect())
    }

    fn check_inputs(&self, layout: &MetaLayout, inputs: &[Vec<f64>]) -> Result<()> {
        if self.params.a_meta.len() != layout.edge_count || self.params.win.len() != layout.input_dims.len() {
            return invalid("global layer does not match the meta-graph layout");
        }
        if inputs.len() != layout.nodes.len()
            || inputs.iter().zip(&layout.node_group).any(|(x, &g)| x.len() != layout.input_dims[g])
        {
            return Err(Error::ShapeMismatch("global inputs do not match the layout".into()));
        }
        Ok(())
    }
}

/// Seeded descent on the global objective with the sub-models held fixed.
///
/// Stops after `cfg.epochs` or at the first epoch whose mean loss falls
/// below `cfg.stop_loss`. `α` and the meta weights are projected back into
/// their domains after every step.
pub fn train_global(
    layer: &mut GlobalLayer,
    layout: &MetaLayout,
    sub_models: &[SubModel],
    samples: &[GlobalSample],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if let Some(m) = sub_models.iter().find(|m| !m.is_frozen()) {
        return Err(Error::NotFrozen(m.subgraph_id()));
    }
    if samples.is_empty() {
        return invalid("no training windows for the global layer");
    }
    layer.check_inputs(layout, &samples[0].inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(layer.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    layer.epoch_losses.clear();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&GlobalSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut grads = layer.params.zeros_like();
            total += batch_loss(&layer.params, layout, &layer.config, &batch, Some(&mut grads));
            descend(&mut layer.params, &grads, cfg.learning_rate, cfg.grad_clip);
            layer.params.project();
            batches += 1;
        }
        let mean = total / batches as f64;
        layer.epoch_losses.push(mean);
        if mean < cfg.stop_loss {
            break;
        }
    }
    layer.train_config = Some(cfg.clone());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esc::{correlation_map, extract_backbone, segment};
    use crate::ggb::{build_meta_graph, key_node_sets};
    use crate::neural::params::gradcheck;
    use crate::stgraph::generate_synthetic;
    use rand::Rng;

    const WIDTH: usize = 3;
    const OUT: usize = 2;

    fn fixture(m: usize) -> (MetaGraph, MetaLayout) {
        let data = generate_synthetic(12, 80, 5, 0.5).unwrap();
        let g = data.graph;
        let topo = g.topology();
        let corr = correlation_map(&g, 30).unwrap();
        let d = extract_backbone(&topo, &corr).unwrap();
        let mut p = segment(&d, m, &topo, &corr).unwrap();
        p.repair(2);
        let keys = key_node_sets(&p, 0.85, 1e-10).unwrap();
        let meta = build_meta_graph(&p, &keys, &corr, 2, 4.0).unwrap();
        let layout = MetaLayout::new(&meta, &p, &vec![WIDTH; m], OUT).unwrap();
        (meta, layout)
    }

    fn small_cfg() -> GlobalConfig {
        GlobalConfig { dim: 4, heads: 2, layers: 2, lambda1: 0.01, lambda2: 0.05, alpha_init: 0.5 }
    }

    fn random_sample(layout: &MetaLayout, rng: &mut ChaCha8Rng) -> GlobalSample {
        let n = layout.nodes.len();
        GlobalSample {
            inputs: (0..n).map(|_| (0..WIDTH + OUT).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            targets: (0..n).map(|_| (0..OUT).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }

    fn perturbed(meta: &MetaGraph, layout: &MetaLayout, cfg: &GlobalConfig, rng: &mut ChaCha8Rng) -> GlobalParams {
        let mut p = GlobalLayer::new(meta, layout, cfg, rng.random()).unwrap().params;
        for (name, b) in p.blocks_mut() {
            for x in b.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
            if name == "meta.adjacency" {
                b.iter_mut().for_each(|a| *a = rng.random_range(0.2..1.5));
            }
            if name == "fusion.alpha" {
                b[0] = rng.random_range(0.2..0.8);
            }
        }
        p
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (meta, layout) = fixture(3);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut worst: Vec<(String, f64)> = Vec::new();
        for _ in 0..20 {
            let p = perturbed(&meta, &layout, &cfg, &mut rng);
            let samples: Vec<GlobalSample> = (0..2).map(|_| random_sample(&layout, &mut rng)).collect();
            let batch: Vec<&GlobalSample> = samples.iter().collect();
            let mut g = p.zeros_like();
            batch_loss(&p, &layout, &cfg, &batch, Some(&mut g));
            let errs = gradcheck::check_point(&p, &g, &mut rng, |q| batch_loss(q, &layout, &cfg, &batch, None));
            for (name, e) in errs {
                match worst.iter_mut().find(|(n, _)| *n == name) {
                    Some(w) => w.1 = w.1.max(e),
                    None => worst.push((name, e)),
                }
            }
        }
        assert_eq!(worst.len(), p_block_count(&layout, &cfg));
        for (name, e) in worst {
            assert!(e < gradcheck::TOLERANCE, "{name}: {e}");
        }
    }

    fn p_block_count(layout: &MetaLayout, cfg: &GlobalConfig) -> usize {
        2 * layout.input_dims.len() + 4 * layout.ganglion_vertices.len() + 4 * cfg.layers + 4
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![0.0, 2.0]);
        assert!(fuse(&[1.0], &[1.0], 1.5).is_err());
        assert!(fuse(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn ggb_loss_by_hand() {
        let yhat = vec![vec![1.0, 2.0]];
        let y = vec![vec![0.0, 0.0]];
        let l = ggb_loss(&yhat, &y, &[0.5, 1.5], &[vec![2.0]], 0.1, 0.01).unwrap();
        assert!((l - (5.0 + 0.2 + 0.04)).abs() < 1e-12);
        assert!(ggb_loss(&yhat, &y, &[], &[], -1.0, 0.0).is_err());
    }

    #[test]
    fn attention_rows_are_distributions_and_zero_edges_are_masked() {
        let (meta, layout) = fixture(3);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = GlobalLayer::new(&meta, &layout, &cfg, 9).unwrap();
        layer.params.wr = init_mat(&mut rng, OUT, cfg.dim);
        let zeroed = 0;
        layer.params.a_meta[zeroed] = 0.0;
        let sample = random_sample(&layout, &mut rng);
        let att = layer.attention_weights(&layout, &sample.inputs).unwrap();
        assert_eq!(att.len(), cfg.layers);
        let (a, b) = (meta.edges[zeroed].a, meta.edges[zeroed].b);
        for per_layer in &att {
            for (i, heads) in per_layer.iter().enumerate() {
                for w in heads {
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(w.iter().all(|&x| x >= 0.0));
                }
                let other = if i == a { Some(b) } else if i == b { Some(a) } else { None };
                if let Some(o) = other {
                    let jj = 1 + layout.nbrs[i].iter().position(|&(j, _)| j == o).unwrap();
                    assert!(heads.iter().all(|w| w[jj] == 0.0));
                }
            }
        }
    }

    #[test]
    fn detached_ganglion_gets_no_gradient() {
        let (meta, layout) = fixture(3);
        let cfg = GlobalConfig { lambda2: 0.0, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut p = perturbed(&meta, &layout, &cfg, &mut rng);
        let gv = layout.ganglion_vertices[1];
        for &(_, e) in &layout.nbrs[gv] {
            p.a_meta[e] = 0.0;
        }
        let sample = random_sample(&layout, &mut rng);
        let mut g = p.zeros_like();
        batch_loss(&p, &layout, &cfg, &[&sample], Some(&mut g));
        let blocks = g.blocks();
        for (name, b) in &blocks {
            if name.starts_with("ganglion.1.") {
                assert!(b.iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let live = blocks.iter().find(|(n, _)| n == "ganglion.0.w2").unwrap();
        assert!(live.1.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn training_decreases_loss_and_respects_domains() {
        let (meta, layout) = fixture(3);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<GlobalSample> = (0..8).map(|_| random_sample(&layout, &mut rng)).collect();
        let mut layer = GlobalLayer::new(&meta, &layout, &cfg, 11).unwrap();
        let tc = TrainConfig { learning_rate: 0.02, epochs: 15, batch: 8, grad_clip: 5.0, stop_loss: 0.0, lambda_reg: 0.0 };
        train_global(&mut layer, &layout, &[], &samples, &tc).unwrap();
        let l = layer.epoch_losses();
        assert_eq!(l.len(), 15);
        assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{l:?}");
        assert!((0.0..=1.0).contains(&layer.alpha()));
        assert!(layer.params().a_meta.iter().all(|&a| a >= 0.0));

        let mut again = GlobalLayer::new(&meta, &layout, &cfg, 11).unwrap();
        train_global(&mut again, &layout, &[], &samples, &tc).unwrap();
        assert_eq!(layer.digest(), again.digest());
    }

    #[test]
    fn stop_loss_ends_training_early() {
        let (meta, layout) = fixture(2);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<GlobalSample> = (0..4).map(|_| random_sample(&layout, &mut rng)).collect();
        let mut layer = GlobalLayer::new(&meta, &layout, &cfg, 1).unwrap();
        let tc = TrainConfig { epochs: 5, stop_loss: 1e9, ..TrainConfig::default() };
        train_global(&mut layer, &layout, &[], &samples, &tc).unwrap();
        assert_eq!(layer.epoch_losses().len(), 1);
    }

    #[test]
    fn untrained_layer_passes_sub_predictions_through() {
        let (meta, layout) = fixture(3);
        let layer = GlobalLayer::new(&meta, &layout, &small_cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_sample(&layout, &mut rng);
        let y = layer.forward(&layout, &s.inputs).unwrap();
        for (yv, x) in y.iter().zip(&s.inputs) {
            assert_eq!(yv.as_slice(), &x[WIDTH..]);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let (meta, layout) = fixture(2);
        assert!(GlobalLayer::new(&meta, &layout, &GlobalConfig { dim: 5, ..small_cfg() }, 0).is_err());
        let layer = GlobalLayer::new(&meta, &layout, &small_cfg(), 0).unwrap();
        assert!(layer.forward(&layout, &[vec![0.0; WIDTH + OUT]]).is_err());
    }
}
