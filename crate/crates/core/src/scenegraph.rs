//! Local scene graphs and the multi-head graph-attention stack that turns
//! one snippet (scene node plus agent-tube nodes) into a single embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    dot, leaky_relu, matmul_at, matmul_bt, softmax_in_place, xavier_uniform, Activation, Matrix,
    Param, Parameterized, LEAKY_SLOPE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNode {
    pub label_id: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnippet {
    pub snippet_index: usize,
    pub scene_feature: Vec<f64>,
    pub agents: Vec<AgentNode>,
}

impl SceneSnippet {
    pub fn feature_dim(&self) -> usize {
        self.scene_feature.len()
    }

    /// Node feature matrix for `topology`: row 0 is the scene, rows 1.. the agents.
    pub fn node_features(&self, topology: Topology) -> Result<Matrix> {
        let d = self.scene_feature.len();
        let agents: &[AgentNode] = if topology == Topology::SceneOnly {
            &[]
        } else {
            &self.agents
        };
        let mut data = Vec::with_capacity((agents.len() + 1) * d);
        data.extend_from_slice(&self.scene_feature);
        for (j, a) in agents.iter().enumerate() {
            if a.feature.len() != d {
                return Err(Error::Dimension(format!(
                    "agent {j} of snippet {} has dimension {}, scene has {d}",
                    self.snippet_index,
                    a.feature.len()
                )));
            }
            data.extend_from_slice(&a.feature);
        }
        Matrix::from_vec(agents.len() + 1, d, data)
    }

    pub fn agent_labels(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.label_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    FullyConnected,
    Star,
    StarSameLabel,
    SceneOnly,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::FullyConnected,
        Topology::Star,
        Topology::StarSameLabel,
        Topology::SceneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::FullyConnected => "fully_connected",
            Topology::Star => "star",
            Topology::StarSameLabel => "star_same_label",
            Topology::SceneOnly => "scene_only",
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topology::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown topology '{s}'")))
    }
}

/// Directed `(source, target)` pairs over `num_nodes` nodes. Node 0 is the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    /// `neighbors[i]` lists every `j` with `(i, j)` in `edges`, in edge order.
    neighbors: Vec<Vec<usize>>,
}

impl EdgeList {
    /// Builds an edge list, adding self-loops and symmetric closure and
    /// dropping duplicates. First-seen order is kept.
    pub fn new(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut present = vec![false; num_nodes * num_nodes];
        let mut edges = Vec::with_capacity(num_nodes + 2 * pairs.len());
        let mut push = |u: usize, v: usize, edges: &mut Vec<(usize, usize)>| {
            if !present[u * num_nodes + v] {
                present[u * num_nodes + v] = true;
                edges.push((u, v));
            }
        };
        for v in 0..num_nodes {
            push(v, v, &mut edges);
        }
        for &(u, v) in pairs {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Dimension(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            push(u, v, &mut edges);
            push(v, u, &mut edges);
        }
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            neighbors[u].push(v);
        }
        Ok(Self {
            num_nodes,
            edges,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.neighbors.get(u).is_some_and(|n| n.contains(&v))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub fn build_edge_list(topology: Topology, agent_labels: &[usize]) -> EdgeList {
    let k = agent_labels.len();
    let mut pairs = Vec::new();
    let num_nodes = match topology {
        Topology::SceneOnly => 1,
        Topology::Star => {
            pairs.extend((1..=k).map(|j| (0, j)));
            k + 1
        }
        Topology::StarSameLabel => {
            // Keep unordered pairs in lexicographic order so (0, j) edges
            // interleave with same-label agent edges deterministically.
            for u in 0..=k {
                for v in u + 1..=k {
                    if u == 0 || agent_labels[u - 1] == agent_labels[v - 1] {
                        pairs.push((u, v));
                    }
                }
            }
            k + 1
        }
        Topology::FullyConnected => {
            for u in 0..=k {
                for v in u + 1..=k {
                    pairs.push((u, v));
                }
            }
            k + 1
        }
    };
    EdgeList::new(num_nodes, &pairs).expect("generated edges are in range")
}

/// One attention head: `W1` (`d_out × d_in`) and `a` (`1 × 2·d_out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    pub w: Param,
    pub a: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub slope: f64,
}

impl GatLayer {
    pub fn new_random<R: Rng + ?Sized>(
        num_heads: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 {
            return Err(Error::Config("attention layer needs at least one head".into()));
        }
        let heads = (0..num_heads)
            .map(|_| GatHead {
                w: Param::new(xavier_uniform(d_out, d_in, d_in, d_out, rng)),
                a: Param::new(xavier_uniform(1, 2 * d_out, 2 * d_out, 1, rng)),
            })
            .collect();
        Ok(Self {
            heads,
            slope: LEAKY_SLOPE,
        })
    }

    pub fn d_in(&self) -> usize {
        self.heads[0].w.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.heads[0].w.value.rows()
    }

    fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or_else(|| {
            Error::Config("attention layer needs at least one head".into())
        })?;
        let (d_out, d_in) = first.w.value.shape();
        for (h, head) in self.heads.iter().enumerate() {
            if head.w.value.shape() != (d_out, d_in) || head.a.value.shape() != (1, 2 * d_out) {
                return Err(Error::Dimension(format!(
                    "head {h} has W1 {:?} / a {:?}, expected ({d_out}, {d_in}) / (1, {})",
                    head.w.value.shape(),
                    head.a.value.shape(),
                    2 * d_out
                )));
            }
        }
        Ok(())
    }
}

/// Per-head forward intermediates for the backward pass.
#[derive(Debug, Clone)]
struct HeadCache {
    z: Matrix,
    /// Pre-activation logits, aligned with `edges.neighbors(i)` per node.
    pre: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GatLayerCache {
    input: Matrix,
    heads: Vec<HeadCache>,
}

impl GatLayerCache {
    /// Attention coefficients of head `h` for node `i`, aligned with `neighbors(i)`.
    pub fn attention(&self, h: usize, i: usize) -> &[f64] {
        &self.heads[h].alpha[i]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// One multi-head attention layer; the output is the mean over heads.
pub fn gat_layer_forward(
    features: &Matrix,
    edges: &EdgeList,
    params: &GatLayer,
) -> Result<(Matrix, GatLayerCache)> {
    params.validate()?;
    if features.cols() != params.d_in() {
        return Err(Error::Dimension(format!(
            "node features have dimension {}, W1 expects {}",
            features.cols(),
            params.d_in()
        )));
    }
    if features.rows() != edges.num_nodes() {
        return Err(Error::Dimension(format!(
            "{} node rows for a graph of {} nodes",
            features.rows(),
            edges.num_nodes()
        )));
    }
    let n = features.rows();
    let d_out = params.d_out();
    let inv_heads = 1.0 / params.heads.len() as f64;
    let mut out = Matrix::zeros(n, d_out);
    let mut caches = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let z = matmul_bt(features, &head.w.value)?;
        let a = head.a.value.data();
        let (a_src, a_dst) = a.split_at(d_out);
        let src: Vec<f64> = (0..n).map(|i| dot(a_src, z.row(i))).collect();
        let dst: Vec<f64> = (0..n).map(|j| dot(a_dst, z.row(j))).collect();
        let mut pre = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        for i in 0..n {
            let nb = edges.neighbors(i);
            if nb.is_empty() {
                return Err(Error::Internal(format!("node {i} has no edges")));
            }
            let p: Vec<f64> = nb.iter().map(|&j| src[i] + dst[j]).collect();
            let mut e: Vec<f64> = p.iter().map(|&x| leaky_relu(x, params.slope)).collect();
            softmax_in_place(&mut e);
            let out_row = out.row_mut(i);
            for (&j, &w) in nb.iter().zip(&e) {
                for (o, &zj) in out_row.iter_mut().zip(z.row(j)) {
                    *o += inv_heads * w * zj;
                }
            }
            pre.push(p);
            alpha.push(e);
        }
        caches.push(HeadCache { z, pre, alpha });
    }
    Ok((
        out,
        GatLayerCache {
            input: features.clone(),
            heads: caches,
        },
    ))
}

/// Accumulates parameter gradients and returns the gradient wrt the layer input.
pub fn gat_layer_backward(
    upstream: &Matrix,
    edges: &EdgeList,
    params: &mut GatLayer,
    cache: &GatLayerCache,
) -> Result<Matrix> {
    if cache.heads.len() != params.heads.len() {
        return Err(Error::Internal(format!(
            "cache has {} heads, layer has {}",
            cache.heads.len(),
            params.heads.len()
        )));
    }
    let n = cache.input.rows();
    let d_out = params.d_out();
    if upstream.shape() != (n, d_out) {
        return Err(Error::Internal(format!(
            "upstream {:?} does not match layer output ({n}, {d_out})",
            upstream.shape()
        )));
    }
    let inv_heads = 1.0 / params.heads.len() as f64;
    let slope = params.slope;
    let mut d_input = Matrix::zeros(n, params.d_in());
    for (head, hc) in params.heads.iter_mut().zip(&cache.heads) {
        let a = head.a.value.data().to_vec();
        let (a_src, a_dst) = a.split_at(d_out);
        let mut d_z = Matrix::zeros(n, d_out);
        let mut d_a = vec![0.0; 2 * d_out];
        for i in 0..n {
            let nb = edges.neighbors(i);
            let g_i: Vec<f64> = upstream.row(i).iter().map(|g| g * inv_heads).collect();
            let alpha = &hc.alpha[i];
            // out_i = Σ_j α_ij z_j
            let d_alpha: Vec<f64> = nb.iter().map(|&j| dot(&g_i, hc.z.row(j))).collect();
            for (&j, &w) in nb.iter().zip(alpha) {
                for (dz, &g) in d_z.row_mut(j).iter_mut().zip(&g_i) {
                    *dz += w * g;
                }
            }
            let weighted: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
            for (idx, &j) in nb.iter().enumerate() {
                let d_e = alpha[idx] * (d_alpha[idx] - weighted);
                let d_pre = d_e * Activation::LeakyRelu { slope }.derivative(hc.pre[i][idx], 0.0);
                if d_pre == 0.0 {
                    continue;
                }
                let (zi, zj) = (hc.z.row(i), hc.z.row(j));
                for k in 0..d_out {
                    d_a[k] += d_pre * zi[k];
                    d_a[d_out + k] += d_pre * zj[k];
                }
                for (dz, &w) in d_z.row_mut(i).iter_mut().zip(a_src) {
                    *dz += d_pre * w;
                }
                for (dz, &w) in d_z.row_mut(j).iter_mut().zip(a_dst) {
                    *dz += d_pre * w;
                }
            }
        }
        head.a.accumulate_slice(&d_a)?;
        head.w.accumulate(&matmul_at(&d_z, &cache.input)?)?;
        let d_x = crate::numkit::matmul(&d_z, &head.w.value)?;
        d_input.add_assign(&d_x)?;
    }
    Ok(d_input)
}

impl Parameterized for GatLayer {
    fn params(&self) -> Vec<&Param> {
        self.heads.iter().flat_map(|h| [&h.w, &h.a]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.heads.iter_mut().flat_map(|h| [&mut h.w, &mut h.a]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `W2` applied to the mean of all node outputs.
    #[default]
    Aggregated,
    /// `W2` applied to the scene node output only.
    Scene,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregated" => Ok(Readout::Aggregated),
            "scene" => Ok(Readout::Scene),
            _ => Err(Error::Config(format!("unknown readout '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgatShape {
    pub input_dim: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    pub scene_dim: usize,
}

impl SgatShape {
    /// Head counts per layer: `{4, 4, C, C}`.
    pub fn head_counts(&self) -> [usize; 4] {
        [4, 4, self.num_classes, self.num_classes]
    }
}

/// Four attention layers plus the aggregation matrix `W2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgatStack {
    pub layers: Vec<GatLayer>,
    pub w2: Param,
    pub readout: Readout,
}

impl SgatStack {
    pub fn new_random<R: Rng + ?Sized>(
        shape: SgatShape,
        readout: Readout,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.num_classes == 0 || shape.head_dim == 0 || shape.scene_dim == 0 {
            return Err(Error::Config(format!("degenerate scene-graph shape {shape:?}")));
        }
        let mut layers = Vec::with_capacity(4);
        let mut d_in = shape.input_dim;
        for heads in shape.head_counts() {
            layers.push(GatLayer::new_random(heads, d_in, shape.head_dim, rng)?);
            d_in = shape.head_dim;
        }
        let w2 = Param::new(xavier_uniform(
            shape.scene_dim,
            shape.head_dim,
            shape.head_dim,
            shape.scene_dim,
            rng,
        ));
        Ok(Self {
            layers,
            w2,
            readout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn scene_dim(&self) -> usize {
        self.w2.value.rows()
    }
}

impl Parameterized for SgatStack {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self
            .layers
            .iter()
            .flat_map(|l| l.heads.iter().flat_map(|h| [&h.w, &h.a]))
            .collect();
        v.push(&self.w2);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.heads.iter_mut().flat_map(|h| [&mut h.w, &mut h.a]))
            .collect();
        v.push(&mut self.w2);
        v
    }
}

/// Forward state of one [`sgat_forward`] call.
#[derive(Debug, Clone)]
pub struct SgatCache {
    edges: EdgeList,
    layer_caches: Vec<GatLayerCache>,
    /// Pre-activation outputs of layers that are followed by LeakyReLU.
    pre_acts: Vec<Matrix>,
    readout_input: Vec<f64>,
    final_nodes: Matrix,
}

impl SgatCache {
    pub fn layer(&self, l: usize) -> &GatLayerCache {
        &self.layer_caches[l]
    }

    pub fn edges(&self) -> &EdgeList {
        &self.edges
    }

    pub fn node_outputs(&self) -> &Matrix {
        &self.final_nodes
    }
}

/// Runs the attention stack on one snippet and returns the scene embedding.
pub fn sgat_forward(
    snippet: &SceneSnippet,
    edges: &EdgeList,
    params: &SgatStack,
) -> Result<(Vec<f64>, SgatCache)> {
    // A single-node graph is the scene-only ablation; agents are dropped.
    let topology = if edges.num_nodes() == 1 {
        Topology::SceneOnly
    } else {
        Topology::FullyConnected
    };
    let x = snippet.node_features(topology)?;
    if x.rows() != edges.num_nodes() {
        return Err(Error::Dimension(format!(
            "snippet {} has {} nodes, edge list expects {}",
            snippet.snippet_index,
            x.rows(),
            edges.num_nodes()
        )));
    }
    sgat_forward_nodes(&x, edges, params)
}

/// [`sgat_forward`] on an explicit node-feature matrix.
pub fn sgat_forward_nodes(
    nodes: &Matrix,
    edges: &EdgeList,
    params: &SgatStack,
) -> Result<(Vec<f64>, SgatCache)> {
    let act = Activation::leaky();
    let mut h = nodes.clone();
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    let mut pre_acts = Vec::with_capacity(params.layers.len().saturating_sub(1));
    for (l, layer) in params.layers.iter().enumerate() {
        let (out, cache) = gat_layer_forward(&h, edges, layer)?;
        layer_caches.push(cache);
        if l + 1 < params.layers.len() {
            h = crate::numkit::activation(&out, act);
            pre_acts.push(out);
        } else {
            h = out;
        }
    }
    let d = h.cols();
    let readout_input: Vec<f64> = match params.readout {
        Readout::Scene => h.row(0).to_vec(),
        Readout::Aggregated => {
            let inv = 1.0 / h.rows() as f64;
            (0..d)
                .map(|c| (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() * inv)
                .collect()
        }
    };
    if params.w2.value.cols() != d {
        return Err(Error::Dimension(format!(
            "W2 expects {} inputs, last layer emits {d}",
            params.w2.value.cols()
        )));
    }
    let w2 = &params.w2.value;
    let embedding = (0..w2.rows())
        .map(|r| dot(w2.row(r), &readout_input))
        .collect();
    Ok((
        embedding,
        SgatCache {
            edges: edges.clone(),
            layer_caches,
            pre_acts,
            readout_input,
            final_nodes: h,
        },
    ))
}

/// Backward pass of [`sgat_forward`]; returns the gradient wrt node features.
pub fn sgat_backward(
    upstream: &[f64],
    cache: &SgatCache,
    params: &mut SgatStack,
) -> Result<Matrix> {
    if cache.layer_caches.len() != params.layers.len() {
        return Err(Error::Internal(format!(
            "cache has {} layers, stack has {}",
            cache.layer_caches.len(),
            params.layers.len()
        )));
    }
    let (scene_dim, d) = params.w2.value.shape();
    if upstream.len() != scene_dim {
        return Err(Error::Internal(format!(
            "upstream gradient has length {}, embedding has {scene_dim}",
            upstream.len()
        )));
    }
    let mut d_w2 = Matrix::zeros(scene_dim, d);
    let mut d_read = vec![0.0; d];
    for (r, &g) in upstream.iter().enumerate() {
        for c in 0..d {
            d_w2.add_at(r, c, g * cache.readout_input[c]);
            d_read[c] += g * params.w2.value.get(r, c);
        }
    }
    params.w2.accumulate(&d_w2)?;

    let n = cache.final_nodes.rows();
    let mut d_h = Matrix::zeros(n, d);
    match params.readout {
        Readout::Scene => d_h.row_mut(0).copy_from_slice(&d_read),
        Readout::Aggregated => {
            let inv = 1.0 / n as f64;
            for r in 0..n {
                for (o, g) in d_h.row_mut(r).iter_mut().zip(&d_read) {
                    *o = g * inv;
                }
            }
        }
    }
    let act = Activation::leaky();
    for l in (0..params.layers.len()).rev() {
        let d_in = gat_layer_backward(&d_h, &cache.edges, &mut params.layers[l], &cache.layer_caches[l])?;
        if l > 0 {
            let pre = &cache.pre_acts[l - 1];
            d_h = Matrix::from_vec(
                n,
                pre.cols(),
                d_in
                    .data()
                    .iter()
                    .zip(pre.data())
                    .map(|(&g, &x)| g * act.derivative(x, 0.0))
                    .collect(),
            )?;
        } else {
            d_h = d_in;
        }
    }
    Ok(d_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_snippet(rng: &mut ChaCha8Rng, d: usize, agents: usize, labels: usize) -> SceneSnippet {
        SceneSnippet {
            snippet_index: 0,
            scene_feature: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            agents: (0..agents)
                .map(|_| AgentNode {
                    label_id: rng.gen_range(0..labels),
                    feature: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect(),
        }
    }

    fn identity_layer(heads: usize, d: usize) -> GatLayer {
        GatLayer {
            heads: (0..heads)
                .map(|_| GatHead {
                    w: Param::new(Matrix::identity(d)),
                    a: Param::new(Matrix::zeros(1, 2 * d)),
                })
                .collect(),
            slope: LEAKY_SLOPE,
        }
    }

    fn edge_set(e: &EdgeList) -> BTreeSet<(usize, usize)> {
        e.edges().iter().copied().collect()
    }

    #[test]
    fn star_edges() {
        let e = build_edge_list(Topology::Star, &[0, 1]);
        let want: BTreeSet<_> = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (0, 2), (2, 0)]
            .into_iter()
            .collect();
        assert_eq!(edge_set(&e), want);
        assert_eq!(e.len(), 7);
    }

    #[test]
    fn star_same_label_edges() {
        let e = build_edge_list(Topology::StarSameLabel, &[3, 3, 5]);
        let star = build_edge_list(Topology::Star, &[3, 3, 5]);
        let mut want = edge_set(&star);
        want.insert((1, 2));
        want.insert((2, 1));
        assert_eq!(edge_set(&e), want);
    }

    #[test]
    fn fully_connected_matches_enumeration() {
        for k in 0..=6 {
            let e = build_edge_list(Topology::FullyConnected, &vec![0; k]);
            let mut want = BTreeSet::new();
            for u in 0..=k {
                for v in 0..=k {
                    want.insert((u, v));
                }
            }
            assert_eq!(edge_set(&e), want);
            assert_eq!(e.len(), (k + 1) * (k + 1));
        }
    }

    #[test]
    fn scene_only_is_single_node() {
        let e = build_edge_list(Topology::SceneOnly, &[1, 2, 3]);
        assert_eq!(e.num_nodes(), 1);
        assert_eq!(e.edges(), &[(0, 0)]);
    }

    #[test]
    fn edge_list_rejects_out_of_range() {
        assert!(EdgeList::new(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn single_node_identity_layer_passes_through() {
        let x = Matrix::from_rows(&[vec![0.5, 1.5, 0.0]]).unwrap();
        let edges = build_edge_list(Topology::SceneOnly, &[]);
        let (out, cache) = gat_layer_forward(&x, &edges, &identity_layer(1, 3)).unwrap();
        assert_eq!(out, x);
        assert_eq!(cache.attention(0, 0), &[1.0]);
    }

    #[test]
    fn identical_nodes_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = GatLayer::new_random(3, 4, 5, &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let edges = build_edge_list(Topology::FullyConnected, &[0]);
        let (out, _) = gat_layer_forward(&x, &edges, &layer).unwrap();
        assert!(out.row(0).iter().zip(out.row(1)).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    /// Attention computed over the full node×node matrix with -inf on non-edges.
    fn dense_mask_layer(x: &Matrix, edges: &EdgeList, layer: &GatLayer) -> Matrix {
        let n = x.rows();
        let d_out = layer.d_out();
        let mut out = Matrix::zeros(n, d_out);
        for head in &layer.heads {
            let mut z = Matrix::zeros(n, d_out);
            for i in 0..n {
                for o in 0..d_out {
                    let mut s = 0.0;
                    for c in 0..x.cols() {
                        s += head.w.value.get(o, c) * x.get(i, c);
                    }
                    z.set(i, o, s);
                }
            }
            let a = head.a.value.data();
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    if edges.contains(i, j) {
                        let mut s = 0.0;
                        for k in 0..d_out {
                            s += a[k] * z.get(i, k) + a[d_out + k] * z.get(j, k);
                        }
                        *l = if s > 0.0 { s } else { 0.2 * s };
                    }
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..n {
                    for k in 0..d_out {
                        out.add_at(i, k, exps[j] / total * z.get(j, k) / layer.heads.len() as f64);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn layer_matches_dense_mask_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for topology in Topology::ALL {
            let snip = random_snippet(&mut rng, 5, 3, 2);
            let edges = build_edge_list(topology, &snip.agent_labels());
            let x = snip.node_features(topology).unwrap();
            let layer = GatLayer::new_random(3, 5, 4, &mut rng).unwrap();
            let (out, _) = gat_layer_forward(&x, &edges, &layer).unwrap();
            assert!(out.max_abs_diff(&dense_mask_layer(&x, &edges, &layer)) < 1e-10);
        }
    }

    #[test]
    fn identical_heads_equal_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let single = GatLayer::new_random(1, 4, 3, &mut rng).unwrap();
        let multi = GatLayer {
            heads: vec![single.heads[0].clone(); 4],
            slope: LEAKY_SLOPE,
        };
        let snip = random_snippet(&mut rng, 4, 3, 2);
        let edges = build_edge_list(Topology::Star, &snip.agent_labels());
        let x = snip.node_features(Topology::Star).unwrap();
        let (a, _) = gat_layer_forward(&x, &edges, &single).unwrap();
        let (b, _) = gat_layer_forward(&x, &edges, &multi).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    fn identity_stack(d: usize, classes: usize) -> SgatStack {
        SgatStack {
            layers: [4, 4, classes, classes]
                .into_iter()
                .map(|h| identity_layer(h, d))
                .collect(),
            w2: Param::new(Matrix::identity(d)),
            readout: Readout::Aggregated,
        }
    }

    #[test]
    fn scene_only_identity_stack_returns_scene_feature() {
        let snip = SceneSnippet {
            snippet_index: 0,
            scene_feature: vec![0.3, 0.0, 2.0],
            agents: vec![AgentNode {
                label_id: 0,
                feature: vec![9.0, 9.0, 9.0],
            }],
        };
        let edges = build_edge_list(Topology::SceneOnly, &snip.agent_labels());
        let mut stack = identity_stack(3, 2);
        let (emb, _) = sgat_forward(&snip, &edges, &stack).unwrap();
        assert_eq!(emb, snip.scene_feature);
        stack.readout = Readout::Scene;
        let (emb_scene, _) = sgat_forward(&snip, &edges, &stack).unwrap();
        assert_eq!(emb_scene, emb);
    }

    #[test]
    fn stack_matches_stepwise_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let shape = SgatShape {
            input_dim: 6,
            head_dim: 4,
            num_classes: 3,
            scene_dim: 5,
        };
        for readout in [Readout::Aggregated, Readout::Scene] {
            let stack = SgatStack::new_random(shape, readout, &mut rng).unwrap();
            let snip = random_snippet(&mut rng, 6, 3, 2);
            let edges = build_edge_list(Topology::FullyConnected, &snip.agent_labels());
            let (emb, _) = sgat_forward(&snip, &edges, &stack).unwrap();

            let mut h = snip.node_features(Topology::FullyConnected).unwrap();
            for (l, layer) in stack.layers.iter().enumerate() {
                h = dense_mask_layer(&h, &edges, layer);
                if l < 3 {
                    h = h.map(|x| if x > 0.0 { x } else { 0.2 * x });
                }
            }
            let pooled: Vec<f64> = match readout {
                Readout::Scene => h.row(0).to_vec(),
                Readout::Aggregated => (0..h.cols())
                    .map(|c| (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / h.rows() as f64)
                    .collect(),
            };
            for (r, &e) in emb.iter().enumerate() {
                let want: f64 = (0..pooled.len()).map(|c| stack.w2.value.get(r, c) * pooled[c]).sum();
                assert!((e - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let shape = SgatShape {
            input_dim: 4,
            head_dim: 3,
            num_classes: 2,
            scene_dim: 3,
        };
        let mut stack = SgatStack::new_random(shape, Readout::Aggregated, &mut rng).unwrap();
        let snip = random_snippet(&mut rng, 4, 2, 2);
        let edges = build_edge_list(Topology::Star, &snip.agent_labels());
        let (_, cache) = sgat_forward(&snip, &edges, &stack).unwrap();
        let d_x = sgat_backward(&[0.0; 3], &cache, &mut stack).unwrap();
        assert!(d_x.data().iter().all(|&g| g == 0.0));
        assert!(stack.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_node_identity_input_grad_is_w2t_upstream() {
        let snip = SceneSnippet {
            snippet_index: 0,
            scene_feature: vec![0.5, 1.0, 2.0],
            agents: vec![],
        };
        let edges = build_edge_list(Topology::SceneOnly, &[]);
        let mut stack = identity_stack(3, 2);
        stack.w2 = Param::new(Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 3.0]]).unwrap());
        let (_, cache) = sgat_forward(&snip, &edges, &stack).unwrap();
        let up = [0.7, -0.4];
        let d_x = sgat_backward(&up, &cache, &mut stack).unwrap();
        // Positive inputs keep every LeakyReLU in its unit-slope branch.
        let want = [0.7, 1.4 + 0.4, -1.2];
        for (g, w) in d_x.row(0).iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{:?}", d_x.row(0));
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let shape = SgatShape {
            input_dim: 4,
            head_dim: 3,
            num_classes: 2,
            scene_dim: 3,
        };
        let stack = SgatStack::new_random(shape, Readout::Aggregated, &mut rng).unwrap();
        let mut other = SgatStack::new_random(
            SgatShape {
                num_classes: 3,
                ..shape
            },
            Readout::Aggregated,
            &mut rng,
        )
        .unwrap();
        let snip = random_snippet(&mut rng, 4, 1, 2);
        let edges = build_edge_list(Topology::Star, &snip.agent_labels());
        let (_, cache) = sgat_forward(&snip, &edges, &stack).unwrap();
        assert!(matches!(
            sgat_backward(&[1.0; 3], &cache, &mut other),
            Err(Error::Internal(_))
        ));
    }

    fn gradcheck_instance(seed: u64, topology: Topology, readout: Readout) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SgatShape {
            input_dim: rng.gen_range(2..=8),
            head_dim: rng.gen_range(2..=5),
            num_classes: rng.gen_range(1..=3),
            scene_dim: rng.gen_range(2..=6),
        };
        let mut stack = SgatStack::new_random(shape, readout, &mut rng).unwrap();
        let agents = rng.gen_range(0..=4);
        let snip = random_snippet(&mut rng, shape.input_dim, agents, 2);
        let edges = build_edge_list(topology, &snip.agent_labels());
        let probe: Vec<f64> = (0..shape.scene_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = sgat_forward(&snip, &edges, &stack).unwrap();
        sgat_backward(&probe, &cache, &mut stack).unwrap();
        let rep = check_gradient(&mut stack, 1e-5, |s| {
            let (emb, _) = sgat_forward(&snip, &edges, s).unwrap();
            dot(&emb, &probe)
        })
        .unwrap();
        rep.max_rel_error
    }

    #[test]
    fn sgat_backward_passes_gradcheck() {
        for seed in 0..8 {
            for topology in Topology::ALL {
                for readout in [Readout::Aggregated, Readout::Scene] {
                    let err = gradcheck_instance(seed, topology, readout);
                    assert!(err < 1e-4, "seed {seed} {topology} {readout:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = SgatShape {
            input_dim: 5,
            head_dim: 3,
            num_classes: 2,
            scene_dim: 4,
        };
        let mut stack = SgatStack::new_random(shape, Readout::Aggregated, &mut rng).unwrap();
        let snip = random_snippet(&mut rng, 5, 3, 2);
        let edges = build_edge_list(Topology::StarSameLabel, &snip.agent_labels());
        let x = snip.node_features(Topology::StarSameLabel).unwrap();
        let probe = [0.3, -0.2, 0.9, 0.1];
        let (_, cache) = sgat_forward_nodes(&x, &edges, &stack).unwrap();
        let d_x = sgat_backward(&probe, &cache, &mut stack).unwrap();
        let mut inputs = vec![Param::new(x.clone())];
        inputs[0].accumulate(&d_x).unwrap();
        let rep = check_gradient(&mut inputs, 1e-5, |p| {
            let (emb, _) = sgat_forward_nodes(&p[0].value, &edges, &stack).unwrap();
            dot(&emb, &probe)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one(seed in any::<u64>(), agents in 0usize..6, t in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let topology = Topology::ALL[t];
            let snip = random_snippet(&mut rng, 4, agents, 3);
            let edges = build_edge_list(topology, &snip.agent_labels());
            let layer = GatLayer::new_random(3, 4, 4, &mut rng).unwrap();
            let x = snip.node_features(topology).unwrap();
            let (_, cache) = gat_layer_forward(&x, &edges, &layer).unwrap();
            for h in 0..cache.num_heads() {
                for i in 0..edges.num_nodes() {
                    prop_assert!((cache.attention(h, i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn edge_lists_symmetric_with_self_loops(labels in proptest::collection::vec(0usize..3, 0..7), t in 0usize..4) {
            let e = build_edge_list(Topology::ALL[t], &labels);
            let set = edge_set(&e);
            prop_assert_eq!(set.len(), e.len());
            for v in 0..e.num_nodes() {
                prop_assert!(set.contains(&(v, v)));
            }
            for &(u, v) in e.edges() {
                prop_assert!(u < e.num_nodes() && v < e.num_nodes());
                prop_assert!(set.contains(&(v, u)));
            }
        }

        #[test]
        fn aggregated_readout_permutation_invariant(seed in any::<u64>(), agents in 1usize..5, t in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let topology = Topology::ALL[t];
            let shape = SgatShape { input_dim: 4, head_dim: 3, num_classes: 2, scene_dim: 3 };
            let stack = SgatStack::new_random(shape, Readout::Aggregated, &mut rng).unwrap();
            let snip = random_snippet(&mut rng, 4, agents, 2);
            let mut permuted = snip.clone();
            permuted.agents.reverse();
            let (a, _) = sgat_forward(&snip, &build_edge_list(topology, &snip.agent_labels()), &stack).unwrap();
            let (b, _) = sgat_forward(&permuted, &build_edge_list(topology, &permuted.agent_labels()), &stack).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
