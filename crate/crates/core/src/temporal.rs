//! Global temporal graph: three same-length 1D convolutions over the
//! sequence of scene embeddings, plus the fixed bank of binary anchor
//! masks used as class-agnostic proposals.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    conv1d, conv1d_backward, sigmoid, sigmoid_derivative, xavier_uniform, ConvKernel, Matrix,
    Param, Parameterized,
};

pub const DEFAULT_ANCHOR_COUNT: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub shape: ConvKernel,
    /// `1 × (c_out·c_in·k)`, indexed by [`ConvKernel::index`].
    pub weight: Param,
    pub bias: Param,
}

impl ConvLayer {
    pub fn new_random<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        let shape = ConvKernel::new(c_out, c_in, k)?;
        let weight = xavier_uniform(1, shape.len(), c_in * k, c_out * k, rng);
        Ok(Self {
            shape,
            weight: Param::new(weight),
            bias: Param::new(Matrix::zeros(1, c_out)),
        })
    }

    fn forward(&self, input: &Matrix) -> Result<Matrix> {
        conv1d(input, &self.shape, self.weight.value.data(), self.bias.value.data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub class_channels: usize,
    pub kernel: usize,
}

/// conv → σ → conv → σ → conv. The last layer emits `class_channels` raw
/// logits followed by one boundary channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalStack {
    pub layers: Vec<ConvLayer>,
}

impl TemporalStack {
    pub fn new_random<R: Rng + ?Sized>(shape: TemporalShape, rng: &mut R) -> Result<Self> {
        if shape.class_channels == 0 || shape.hidden == 0 {
            return Err(Error::Config(format!("degenerate temporal shape {shape:?}")));
        }
        let layers = vec![
            ConvLayer::new_random(shape.input_dim, shape.hidden, shape.kernel, rng)?,
            ConvLayer::new_random(shape.hidden, shape.hidden, shape.kernel, rng)?,
            ConvLayer::new_random(shape.hidden, shape.class_channels + 1, shape.kernel, rng)?,
        ];
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape.c_in
    }

    pub fn class_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].shape.c_out - 1
    }

    fn validate(&self) -> Result<()> {
        if self.layers.len() != 3 {
            return Err(Error::Config(format!(
                "temporal stack needs 3 layers, has {}",
                self.layers.len()
            )));
        }
        for w in self.layers.windows(2) {
            if w[0].shape.c_out != w[1].shape.c_in {
                return Err(Error::Dimension(format!(
                    "temporal layer emits {} channels, next expects {}",
                    w[0].shape.c_out, w[1].shape.c_in
                )));
            }
        }
        if self.layers[2].shape.c_out < 2 {
            return Err(Error::Config("temporal head needs at least one class channel".into()));
        }
        Ok(())
    }
}

impl Parameterized for TemporalStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalOutputs {
    /// `N × C` pre-sigmoid class scores.
    pub class_logits: Matrix,
    /// Per-snippet membership probability, clamped into `(ε, 1 - ε)`.
    pub boundary_probs: Vec<f64>,
}

impl TemporalOutputs {
    pub fn len(&self) -> usize {
        self.boundary_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary_probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols()
    }
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    inputs: [Matrix; 3],
    activated: [Matrix; 2],
}

pub fn temporal_forward(
    embeddings: &Matrix,
    params: &TemporalStack,
) -> Result<(TemporalOutputs, TemporalCache)> {
    params.validate()?;
    if embeddings.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "embeddings have dimension {}, temporal stack expects {}",
            embeddings.cols(),
            params.input_dim()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::Dimension("temporal graph needs at least one snippet".into()));
    }
    let h1 = params.layers[0].forward(embeddings)?.map(sigmoid);
    let h2 = params.layers[1].forward(&h1)?.map(sigmoid);
    let out = params.layers[2].forward(&h2)?;
    let n = out.rows();
    let c = out.cols() - 1;
    let mut class_logits = Matrix::zeros(n, c);
    let mut boundary_probs = Vec::with_capacity(n);
    for t in 0..n {
        let row = out.row(t);
        class_logits.row_mut(t).copy_from_slice(&row[..c]);
        boundary_probs.push(sigmoid(row[c]));
    }
    Ok((
        TemporalOutputs {
            class_logits,
            boundary_probs,
        },
        TemporalCache {
            inputs: [embeddings.clone(), h1.clone(), h2.clone()],
            activated: [h1, h2],
        },
    ))
}

/// Backward of [`temporal_forward`] given gradients wrt the class logits and
/// the (post-sigmoid) boundary probabilities. Returns the embedding gradient.
pub fn temporal_backward(
    d_logits: &Matrix,
    d_boundary: &[f64],
    outputs: &TemporalOutputs,
    cache: &TemporalCache,
    params: &mut TemporalStack,
) -> Result<Matrix> {
    let n = outputs.len();
    let c = outputs.num_classes();
    if d_logits.shape() != (n, c) || d_boundary.len() != n {
        return Err(Error::Dimension(format!(
            "loss gradients {:?}/{} do not match outputs ({n}, {c})",
            d_logits.shape(),
            d_boundary.len()
        )));
    }
    let mut d_out = Matrix::zeros(n, c + 1);
    for t in 0..n {
        let row = d_out.row_mut(t);
        row[..c].copy_from_slice(d_logits.row(t));
        row[c] = d_boundary[t] * sigmoid_derivative(outputs.boundary_probs[t]);
    }
    let mut upstream = d_out;
    for l in (0..3).rev() {
        let layer = &mut params.layers[l];
        let g = conv1d_backward(&cache.inputs[l], &layer.shape, layer.weight.value.data(), &upstream)?;
        layer.weight.accumulate_slice(&g.weights)?;
        layer.bias.accumulate_slice(&g.bias)?;
        upstream = if l > 0 {
            let act = &cache.activated[l - 1];
            Matrix::from_vec(
                act.rows(),
                act.cols(),
                g.input
                    .data()
                    .iter()
                    .zip(act.data())
                    .map(|(&g, &y)| g * sigmoid_derivative(y))
                    .collect(),
            )?
        } else {
            g.input
        };
    }
    Ok(upstream)
}

/// One contiguous window `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub start: usize,
    pub len: usize,
}

impl Anchor {
    pub fn end_exclusive(&self) -> usize {
        self.start + self.len
    }

    pub fn to_mask(&self, n: usize) -> Vec<bool> {
        (0..n)
            .map(|i| i >= self.start && i < self.end_exclusive())
            .collect()
    }
}

/// Layout of the proposal bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub count: usize,
    /// Window lengths are `N / d` (rounded, at least 1) for each divisor,
    /// listed coarse to fine.
    pub scale_divisors: Vec<usize>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_ANCHOR_COUNT,
            scale_divisors: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    n: usize,
    anchors: Vec<Anchor>,
}

impl AnchorBank {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn mask_len(&self) -> usize {
        self.n
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        self.anchors[i].to_mask(self.n)
    }
}

pub fn build_anchor_bank(n: usize) -> Result<AnchorBank> {
    build_anchor_bank_with(n, &AnchorConfig::default())
}

/// Multi-scale sliding windows, enumerated left to right and coarse to fine.
///
/// The base grid uses stride `scale / 2`. While the bank is short, the
/// strides are halved and the newly reachable windows appended; once every
/// stride is 1, the remaining window lengths from `N` down to 1 are added
/// at stride 1. Enumeration stops at exactly `count` unique windows.
pub fn build_anchor_bank_with(n: usize, cfg: &AnchorConfig) -> Result<AnchorBank> {
    if n < 4 {
        return Err(Error::Config(format!("anchor bank needs N >= 4, got {n}")));
    }
    let max_placeable = n * (n + 1) / 2;
    if cfg.count > max_placeable {
        return Err(Error::Config(format!(
            "cannot place {} distinct windows in N = {n}; at most {max_placeable} fit",
            cfg.count
        )));
    }
    if cfg.scale_divisors.contains(&0) {
        return Err(Error::Config("anchor scale divisor must be positive".into()));
    }
    let mut scales: Vec<usize> = Vec::new();
    for &d in &cfg.scale_divisors {
        let s = ((n + d / 2) / d).clamp(1, n);
        if !scales.contains(&s) {
            scales.push(s);
        }
    }

    let mut seen = HashSet::new();
    let mut anchors = Vec::with_capacity(cfg.count);
    let mut push = |a: Anchor, anchors: &mut Vec<Anchor>| -> bool {
        if anchors.len() < cfg.count && seen.insert(a) {
            anchors.push(a);
        }
        anchors.len() == cfg.count
    };

    let base_strides: Vec<usize> = scales.iter().map(|&s| (s / 2).max(1)).collect();
    let mut shift = 0u32;
    loop {
        let mut any_coarse = false;
        for (&scale, &base) in scales.iter().zip(&base_strides) {
            let stride = (base >> shift).max(1);
            any_coarse |= stride > 1;
            let mut start = 0;
            while start + scale <= n {
                if push(Anchor { start, len: scale }, &mut anchors) {
                    return Ok(AnchorBank { n, anchors });
                }
                start += stride;
            }
        }
        if !any_coarse {
            break;
        }
        shift += 1;
    }
    for len in (1..=n).rev() {
        for start in 0..=n - len {
            if push(Anchor { start, len }, &mut anchors) {
                return Ok(AnchorBank { n, anchors });
            }
        }
    }
    Err(Error::Internal(format!(
        "anchor enumeration produced only {} windows",
        anchors.len()
    )))
}

/// Intersection over union of two binary masks of equal length.
pub fn mask_iou(m1: &[bool], m2: &[bool]) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::Dimension(format!(
            "masks of length {} and {}",
            m1.len(),
            m2.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m1.iter().zip(m2) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Err(Error::UndefinedIou);
    }
    Ok(inter as f64 / union as f64)
}

/// Best-IoU anchor for a ground-truth mask; ties go to the lowest index.
pub fn match_anchor(gt_mask: &[bool], bank: &AnchorBank) -> Result<(usize, f64)> {
    if gt_mask.len() != bank.n {
        return Err(Error::Dimension(format!(
            "ground-truth mask has length {}, bank masks have {}",
            gt_mask.len(),
            bank.n
        )));
    }
    if !gt_mask.iter().any(|&b| b) {
        return Err(Error::UndefinedIou);
    }
    let gt_count = gt_mask.iter().filter(|&&b| b).count();
    let mut best = (0, -1.0);
    for (i, a) in bank.anchors.iter().enumerate() {
        let inter = gt_mask[a.start..a.end_exclusive()].iter().filter(|&&b| b).count();
        let iou = inter as f64 / (gt_count + a.len - inter) as f64;
        if iou > best.1 {
            best = (i, iou);
        }
    }
    Ok(best)
}
