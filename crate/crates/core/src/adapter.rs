//! Graph-based multimodal adapter.
//!
//! A mini-batch of frozen-encoder features becomes one graph node per
//! (sample, modality). Nodes of the same modality are linked by a
//! top-k Gaussian kernel; nodes of different modalities by a top-k cosine
//! score refined through a learned linear map. One or more attention-weighted
//! message-passing layers follow, and an output projection maps every node
//! into the SKB space as a unit-norm token.
//!
//! Parameter vectorization order (used by aggregation and checkpoints):
//! input projections in ascending [`EncoderSignature`] order, each as weight
//! then bias, followed by the cross-modal map, the message weight and the
//! output projection. Every block is row-major.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureSet;
use crate::error::{Error, Result};
use crate::math::{
    axpy, cosine_grads, dot, gaussian_kernel, norm, normalized, softmax_masked,
    top_k_indices, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Audio,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Audio => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            2 => Ok(Modality::Audio),
            t => Err(Error::Format(format!("unknown modality tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies a frozen encoder: its modality, model family and output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EncoderSignature {
    pub modality: Modality,
    pub family: u16,
    pub dim: usize,
}

impl fmt::Display for EncoderSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.modality, self.family, self.dim)
    }
}

/// Structural settings of the adapter. Not trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterHyper {
    pub k_intra: usize,
    pub k_cross: usize,
    pub sigma: f64,
    /// Multiplies edge weights before the attention softmax.
    pub attn_scale: f64,
    pub layers: usize,
}

impl Default for AdapterHyper {
    fn default() -> Self {
        Self {
            k_intra: 8,
            k_cross: 8,
            sigma: 1.0,
            attn_scale: 1.5,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProjection {
    /// `d_m × d_h`
    pub weight: Matrix,
    /// `1 × d_h`
    pub bias: Matrix,
}

/// Trainable matrices of the adapter. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    pub input_proj: BTreeMap<EncoderSignature, InputProjection>,
    /// `d_h × d_h`
    pub cross_map: Matrix,
    /// `d_h × d_h`
    pub mp_weight: Matrix,
    /// `d_h × d_s`
    pub out_proj: Matrix,
}

impl AdapterWeights {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            input_proj: self
                .input_proj
                .iter()
                .map(|(s, p)| {
                    (
                        *s,
                        InputProjection {
                            weight: z(&p.weight),
                            bias: z(&p.bias),
                        },
                    )
                })
                .collect(),
            cross_map: z(&self.cross_map),
            mp_weight: z(&self.mp_weight),
            out_proj: z(&self.out_proj),
        }
    }

    /// Named blocks in vectorization order.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(2 * self.input_proj.len() + 3);
        for (sig, p) in &self.input_proj {
            out.push((format!("input_proj[{sig}].weight"), &p.weight));
            out.push((format!("input_proj[{sig}].bias"), &p.bias));
        }
        out.push(("cross_map".into(), &self.cross_map));
        out.push(("mp_weight".into(), &self.mp_weight));
        out.push(("out_proj".into(), &self.out_proj));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(2 * self.input_proj.len() + 3);
        for (sig, p) in self.input_proj.iter_mut() {
            out.push((format!("input_proj[{sig}].weight"), &mut p.weight));
            out.push((format!("input_proj[{sig}].bias"), &mut p.bias));
        }
        out.push(("cross_map".into(), &mut self.cross_map));
        out.push(("mp_weight".into(), &mut self.mp_weight));
        out.push(("out_proj".into(), &mut self.out_proj));
        out
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_values());
        for (_, m) in self.blocks() {
            v.extend_from_slice(m.data());
        }
        v
    }

    /// Overwrites every block from a flat vector in vectorization order.
    pub fn assign_from(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "expected {} parameter values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &AdapterWeights) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.blocks_mut() {
            m.scale(s);
        }
    }

    pub fn same_layout(&self, other: &AdapterWeights) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ma), (nb, mb))| na == nb && ma.shape() == mb.shape())
    }
}

/// The global multimodal adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub weights: AdapterWeights,
    pub hyper: AdapterHyper,
}

impl AdapterParams {
    /// Seeded uniform(−s, s) initialization with `s = 1/√fan_in`.
    pub fn init<R: Rng>(
        signatures: &[EncoderSignature],
        hidden: usize,
        semantic_dim: usize,
        hyper: AdapterHyper,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || semantic_dim == 0 {
            return Err(Error::InvalidArgument("adapter dimensions must be > 0".into()));
        }
        if !(hyper.attn_scale > 0.0) || !(hyper.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("adapter hyperparameters {hyper:?}")));
        }
        let mut input_proj = BTreeMap::new();
        let mut sorted = signatures.to_vec();
        sorted.sort();
        for sig in sorted {
            if let Some(other) = input_proj
                .keys()
                .find(|s: &&EncoderSignature| s.modality == sig.modality && s.family == sig.family)
                .copied()
            {
                if other != sig {
                    return Err(Error::InvalidArgument(format!(
                        "encoder {sig} conflicts with {other}"
                    )));
                }
                continue;
            }
            input_proj.insert(
                sig,
                InputProjection {
                    weight: uniform(sig.dim, hidden, sig.dim, rng),
                    bias: uniform(1, hidden, sig.dim, rng),
                },
            );
        }
        Ok(Self {
            weights: AdapterWeights {
                input_proj,
                cross_map: uniform(hidden, hidden, hidden, rng),
                mp_weight: uniform(hidden, hidden, hidden, rng),
                out_proj: uniform(hidden, semantic_dim, hidden, rng),
            },
            hyper,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cross_map.rows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.weights.out_proj.cols()
    }
}

fn uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub sample_id: u64,
    pub modality: Modality,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Intra,
    Cross,
}

/// Directed edge; `src` aggregates messages from `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemanticGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl SemanticGraph {
    pub fn out_degree(&self, node: usize, kind: EdgeKind) -> usize {
        self.edges
            .iter()
            .filter(|e| e.src == node && e.kind == kind)
            .count()
    }
}

/// Projects every input row into a node embedding `relu(x W + b)`. Nodes
/// follow input order: all rows of the first set, then the second, and so on.
pub fn project_inputs(features: &[FeatureSet], params: &AdapterParams) -> Result<Vec<Node>> {
    Ok(project_with_preactivation(features, params)?.0)
}

fn project_with_preactivation(
    features: &[FeatureSet],
    params: &AdapterParams,
) -> Result<(Vec<Node>, Vec<Vec<f64>>)> {
    let mut nodes = Vec::new();
    let mut pre = Vec::new();
    for fs in features {
        let proj = params
            .weights
            .input_proj
            .get(&fs.signature)
            .ok_or_else(|| Error::UnknownSignature(fs.signature.to_string()))?;
        for (r, &sid) in fs.sample_ids.iter().enumerate() {
            let mut z = proj.weight.vec_mul(fs.features.row(r));
            axpy(1.0, proj.bias.data(), &mut z);
            let h = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
            nodes.push(Node {
                sample_id: sid,
                modality: fs.signature.modality,
                embedding: h,
            });
        }
    }
    Ok((nodes, pre))
}

/// Same-modality edges: each node links to its `k_intra` most similar peers
/// under the Gaussian kernel, weighted by the kernel value.
pub fn build_intra_edges(nodes: &[Node], sigma: f64, k_intra: usize) -> Result<Vec<Edge>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let mut edges = Vec::new();
    for (i, ni) in nodes.iter().enumerate() {
        let cands: Vec<usize> = (0..nodes.len())
            .filter(|&j| j != i && nodes[j].modality == ni.modality)
            .collect();
        let scores = cands
            .iter()
            .map(|&j| gaussian_kernel(&ni.embedding, &nodes[j].embedding, sigma))
            .collect::<Result<Vec<_>>>()?;
        for c in top_k_indices(&scores, k_intra) {
            edges.push(Edge {
                src: i,
                dst: cands[c],
                weight: scores[c],
                kind: EdgeKind::Intra,
            });
        }
    }
    Ok(edges)
}

/// Cross-modal edges. Candidates are ranked by the cosine of their images
/// under the learned map; the edge weight averages that refined score with
/// the raw embedding cosine.
pub fn build_cross_edges(nodes: &[Node], params: &AdapterParams, k_cross: usize) -> Vec<Edge> {
    // Unit-normalized raw and mapped embeddings; `None` for zero vectors.
    let unit = |v: &[f64]| normalized(v, "cross").ok().map(|(u, _)| u);
    let raw_units: Vec<Option<Vec<f64>>> = nodes.iter().map(|n| unit(&n.embedding)).collect();
    let mapped_units: Vec<Option<Vec<f64>>> = nodes
        .iter()
        .map(|n| unit(&params.weights.cross_map.vec_mul(&n.embedding)))
        .collect();
    let usable: Vec<bool> = (0..nodes.len())
        .map(|i| raw_units[i].is_some() && mapped_units[i].is_some())
        .collect();
    let cos = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| {
        dot(a.as_deref().expect("usable"), b.as_deref().expect("usable")).clamp(-1.0, 1.0)
    };
    let mut edges = Vec::new();
    for (i, ni) in nodes.iter().enumerate() {
        if !usable[i] {
            log::debug!("node {i} has a zero-norm embedding; no cross-modal edges");
            continue;
        }
        let cands: Vec<usize> = (0..nodes.len())
            .filter(|&j| usable[j] && nodes[j].modality != ni.modality)
            .collect();
        if cands.is_empty() {
            continue;
        }
        let refined: Vec<f64> = cands.iter().map(|&j| cos(&mapped_units[i], &mapped_units[j])).collect();
        for c in top_k_indices(&refined, k_cross) {
            let j = cands[c];
            let raw = cos(&raw_units[i], &raw_units[j]);
            edges.push(Edge {
                src: i,
                dst: j,
                weight: 0.5 * (raw + refined[c]),
                kind: EdgeKind::Cross,
            });
        }
    }
    edges
}

/// Outgoing neighbour lists, each sorted by destination, with edge indices.
fn neighbourhoods(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (e, edge) in edges.iter().enumerate() {
        out[edge.src].push(e);
    }
    for list in &mut out {
        list.sort_by_key(|&e| (edges[e].dst, edges[e].kind as u8));
    }
    out
}

fn attention(graph: &SemanticGraph, hoods: &[Vec<usize>], scale: f64) -> Vec<Vec<f64>> {
    hoods
        .iter()
        .map(|list| {
            let w: Vec<f64> = list.iter().map(|&e| graph.edges[e].weight).collect();
            softmax_masked(&w, &vec![true; w.len()], scale)
        })
        .collect()
}

struct LayerTrace {
    input: Vec<Vec<f64>>,
    messages: Vec<Vec<f64>>,
    residual_norm: Vec<f64>,
    output: Vec<Vec<f64>>,
}

fn layer_forward(
    h: &[Vec<f64>],
    hoods: &[Vec<usize>],
    att: &[Vec<f64>],
    edges: &[Edge],
    w_g: &Matrix,
) -> Result<LayerTrace> {
    let messages: Vec<Vec<f64>> = h.iter().map(|hj| w_g.vec_mul(hj)).collect();
    let mut output = Vec::with_capacity(h.len());
    let mut residual_norm = Vec::with_capacity(h.len());
    for i in 0..h.len() {
        let mut u = h[i].clone();
        for (&e, &a) in hoods[i].iter().zip(&att[i]) {
            axpy(a, &messages[edges[e].dst], &mut u);
        }
        let n = norm(&u);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm(format!(
                "message passing output of node {i} ({} neighbours, input norm {:.3e})",
                hoods[i].len(),
                norm(&h[i])
            )));
        }
        output.push(u.iter().map(|v| v / n).collect());
        residual_norm.push(n);
    }
    Ok(LayerTrace {
        input: h.to_vec(),
        messages,
        residual_norm,
        output,
    })
}

/// Runs the configured number of message-passing layers over a fixed graph
/// and returns the updated nodes. Attention over each neighbourhood is the
/// softmax of `attn_scale × edge weight`.
pub fn message_pass(graph: &SemanticGraph, params: &AdapterParams) -> Result<Vec<Node>> {
    let hoods = neighbourhoods(graph.nodes.len(), &graph.edges);
    let att = attention(graph, &hoods, params.hyper.attn_scale);
    let mut h: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.embedding.clone()).collect();
    for _ in 0..params.hyper.layers.max(1) {
        h = layer_forward(&h, &hoods, &att, &graph.edges, &params.weights.mp_weight)?.output;
    }
    Ok(graph
        .nodes
        .iter()
        .zip(h)
        .map(|(n, e)| Node {
            embedding: e,
            ..n.clone()
        })
        .collect())
}

/// `token_i = normalize(h_i W_o)`, one row per node.
pub fn emit_tokens(nodes: &[Node], params: &AdapterParams) -> Result<Matrix> {
    let d_s = params.semantic_dim();
    let mut out = Matrix::zeros(nodes.len(), d_s);
    for (i, n) in nodes.iter().enumerate() {
        let o = params.weights.out_proj.vec_mul(&n.embedding);
        let on = norm(&o);
        if !(on > 0.0) {
            return Err(Error::ZeroNorm(format!("output projection of node {i}")));
        }
        out.row_mut(i).iter_mut().zip(&o).for_each(|(t, v)| *t = v / on);
    }
    Ok(out)
}

/// Tokens for one input feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalTokens {
    pub signature: EncoderSignature,
    pub sample_ids: Vec<u64>,
    pub tokens: Matrix,
}

#[derive(Debug, Clone)]
pub struct AdapterOutput {
    pub graph: SemanticGraph,
    pub tokens: Vec<ModalTokens>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct ForwardTrace {
    pre_activation: Vec<Vec<f64>>,
    graph: SemanticGraph,
    hoods: Vec<Vec<usize>>,
    att: Vec<Vec<f64>>,
    mapped: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
    out_norm: Vec<f64>,
    tokens: Matrix,
    slices: Vec<(EncoderSignature, Vec<u64>)>,
}

impl ForwardTrace {
    /// All tokens in node order.
    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn graph(&self) -> &SemanticGraph {
        &self.graph
    }

    pub fn output(&self) -> AdapterOutput {
        let mut offset = 0;
        let tokens = self
            .slices
            .iter()
            .map(|(sig, ids)| {
                let idx: Vec<usize> = (offset..offset + ids.len()).collect();
                offset += ids.len();
                ModalTokens {
                    signature: *sig,
                    sample_ids: ids.clone(),
                    tokens: self.tokens.select_rows(&idx),
                }
            })
            .collect();
        AdapterOutput {
            graph: self.graph.clone(),
            tokens,
        }
    }
}

/// Full adapter pass over one mini-batch.
pub fn adapter_forward(batch: &[FeatureSet], params: &AdapterParams) -> Result<AdapterOutput> {
    Ok(forward_traced(batch, params)?.output())
}

pub fn forward_traced(batch: &[FeatureSet], params: &AdapterParams) -> Result<ForwardTrace> {
    if batch.iter().all(|fs| fs.sample_ids.is_empty()) {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (nodes, pre_activation) = project_with_preactivation(batch, params)?;
    let hy = &params.hyper;
    let mut edges = build_intra_edges(&nodes, hy.sigma, hy.k_intra)?;
    edges.extend(build_cross_edges(&nodes, params, hy.k_cross));
    let graph = SemanticGraph { nodes, edges };
    let mapped = graph
        .nodes
        .iter()
        .map(|n| params.weights.cross_map.vec_mul(&n.embedding))
        .collect();
    let hoods = neighbourhoods(graph.nodes.len(), &graph.edges);
    let att = attention(&graph, &hoods, hy.attn_scale);
    let mut layers = Vec::new();
    let mut h: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.embedding.clone()).collect();
    for _ in 0..hy.layers.max(1) {
        let layer = layer_forward(&h, &hoods, &att, &graph.edges, &params.weights.mp_weight)?;
        h = layer.output.clone();
        layers.push(layer);
    }
    let d_s = params.semantic_dim();
    let mut tokens = Matrix::zeros(h.len(), d_s);
    let mut out_norm = Vec::with_capacity(h.len());
    for (i, hi) in h.iter().enumerate() {
        let o = params.weights.out_proj.vec_mul(hi);
        let on = norm(&o);
        if !(on > 0.0) {
            return Err(Error::ZeroNorm(format!("output projection of node {i}")));
        }
        tokens.row_mut(i).iter_mut().zip(&o).for_each(|(t, v)| *t = v / on);
        out_norm.push(on);
    }
    Ok(ForwardTrace {
        pre_activation,
        graph,
        hoods,
        att,
        mapped,
        layers,
        out_norm,
        tokens,
        slices: batch
            .iter()
            .map(|fs| (fs.signature, fs.sample_ids.clone()))
            .collect(),
    })
}

/// Gradient of `y = u/‖u‖` given `dL/dy`, with `y` and `‖u‖` known.
fn normalize_backward(y: &[f64], u_norm: f64, g: &[f64]) -> Vec<f64> {
    let yg = dot(y, g);
    y.iter().zip(g).map(|(yv, gv)| (gv - yv * yg) / u_norm).collect()
}

/// Backpropagates `token_grads` (node order, `n × d_s`) through the adapter.
/// Edge selection is held fixed; gradients flow through edge weights,
/// attention, messages, projections and normalizations.
pub fn backward(
    trace: &ForwardTrace,
    batch: &[FeatureSet],
    params: &AdapterParams,
    token_grads: &Matrix,
) -> Result<AdapterWeights> {
    let n = trace.graph.nodes.len();
    if token_grads.shape() != (n, params.semantic_dim()) {
        return Err(Error::Shape(format!(
            "token gradient {:?} for {n} nodes",
            token_grads.shape()
        )));
    }
    let w = &params.weights;
    let mut grads = w.zeros_like();
    let d_h = params.hidden_dim();

    // Output projection and token normalization.
    let last = &trace.layers.last().expect("at least one layer").output;
    let mut g_h: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let g_o = normalize_backward(trace.tokens.row(i), trace.out_norm[i], token_grads.row(i));
        grads.out_proj.add_outer(&last[i], &g_o);
        g_h.push(w.out_proj.mul_vec(&g_o));
    }

    // Message-passing layers, last to first. Attention is shared across
    // layers, so its gradient accumulates.
    let mut g_att: Vec<Vec<f64>> = trace.hoods.iter().map(|l| vec![0.0; l.len()]).collect();
    for layer in trace.layers.iter().rev() {
        let mut g_in: Vec<Vec<f64>> = vec![vec![0.0; d_h]; n];
        let mut g_msg: Vec<Vec<f64>> = vec![vec![0.0; d_h]; n];
        for i in 0..n {
            let g_u = normalize_backward(&layer.output[i], layer.residual_norm[i], &g_h[i]);
            axpy(1.0, &g_u, &mut g_in[i]);
            for (k, &e) in trace.hoods[i].iter().enumerate() {
                let j = trace.graph.edges[e].dst;
                g_att[i][k] += dot(&g_u, &layer.messages[j]);
                axpy(trace.att[i][k], &g_u, &mut g_msg[j]);
            }
        }
        for j in 0..n {
            grads.mp_weight.add_outer(&layer.input[j], &g_msg[j]);
            let back = w.mp_weight.mul_vec(&g_msg[j]);
            axpy(1.0, &back, &mut g_in[j]);
        }
        g_h = g_in;
    }

    // Attention softmax to edge weights, then edge weights to embeddings.
    let scale = params.hyper.attn_scale;
    let sigma2 = params.hyper.sigma * params.hyper.sigma;
    let h0: Vec<&[f64]> = trace.graph.nodes.iter().map(|n| n.embedding.as_slice()).collect();
    let mut g_mapped: Vec<Vec<f64>> = vec![vec![0.0; d_h]; n];
    for i in 0..n {
        let a = &trace.att[i];
        let mean: f64 = a.iter().zip(&g_att[i]).map(|(x, y)| x * y).sum();
        for (k, &e) in trace.hoods[i].iter().enumerate() {
            let g_w = scale * a[k] * (g_att[i][k] - mean);
            if g_w == 0.0 {
                continue;
            }
            let edge = trace.graph.edges[e];
            let j = edge.dst;
            match edge.kind {
                EdgeKind::Intra => {
                    let c = g_w * edge.weight / sigma2;
                    for d in 0..d_h {
                        let diff = h0[i][d] - h0[j][d];
                        g_h[i][d] -= c * diff;
                        g_h[j][d] += c * diff;
                    }
                }
                EdgeKind::Cross => {
                    let (_, gi, gj) = cosine_grads(h0[i], h0[j]);
                    axpy(0.5 * g_w, &gi, &mut g_h[i]);
                    axpy(0.5 * g_w, &gj, &mut g_h[j]);
                    let (_, pi, pj) = cosine_grads(&trace.mapped[i], &trace.mapped[j]);
                    axpy(0.5 * g_w, &pi, &mut g_mapped[i]);
                    axpy(0.5 * g_w, &pj, &mut g_mapped[j]);
                }
            }
        }
    }
    for i in 0..n {
        if g_mapped[i].iter().all(|&v| v == 0.0) {
            continue;
        }
        grads.cross_map.add_outer(h0[i], &g_mapped[i]);
        let back = w.cross_map.mul_vec(&g_mapped[i]);
        axpy(1.0, &back, &mut g_h[i]);
    }

    // relu and input projections.
    let mut offset = 0;
    for fs in batch {
        let gp = grads
            .input_proj
            .get_mut(&fs.signature)
            .ok_or_else(|| Error::UnknownSignature(fs.signature.to_string()))?;
        for r in 0..fs.sample_ids.len() {
            let i = offset + r;
            let g_z: Vec<f64> = g_h[i]
                .iter()
                .zip(&trace.pre_activation[i])
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect();
            gp.weight.add_outer(fs.features.row(r), &g_z);
            axpy(1.0, &g_z, gp.bias.data_mut());
        }
        offset += fs.sample_ids.len();
    }

    for (name, m) in grads.blocks() {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(grads)
}
