//! Training loop, checkpoints and inference over feature corpora.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Corpus, VideoFeatureFile};
use crate::decode::{
    chunk_video, decode_segments, decode_segments_smoothed, nms_temporal, write_predictions,
    Segment, VideoSegment,
};
use crate::error::{Error, Result};
use crate::loss::{act_loss, br_loss, total_loss, LossWeights};
use crate::numkit::{check_gradient, GradCheckReport, Matrix, Param, Parameterized};
use crate::scenegraph::{
    build_edge_list, sgat_backward, sgat_forward_nodes, Readout, SceneSnippet, SgatCache,
    SgatShape, SgatStack, Topology,
};
use crate::temporal::{
    build_anchor_bank_with, match_anchor, temporal_backward, temporal_forward, AnchorBank,
    AnchorConfig, TemporalOutputs, TemporalShape, TemporalStack,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Temporal graph length; videos are processed in chunks of this many snippets.
    pub temporal_len: usize,
    pub num_classes: usize,
    /// Adds an extra class channel trained on snippets outside every activity.
    pub background_channel: bool,
    pub topology: Topology,
    pub readout: Readout,
    pub head_dim: usize,
    /// Scene embedding width; defaults to `num_classes · head_dim`.
    pub scene_dim: Option<usize>,
    pub hidden: usize,
    pub kernel: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Visit videos in a seeded random order each epoch.
    pub shuffle: bool,
    pub seed: u64,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temporal_len: 32,
            num_classes: 4,
            background_channel: false,
            topology: Topology::FullyConnected,
            readout: Readout::Aggregated,
            head_dim: 8,
            scene_dim: None,
            hidden: 64,
            kernel: 3,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            epochs: 30,
            grad_clip: Some(5.0),
            shuffle: true,
            seed: 7,
            anchors: AnchorConfig::default(),
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.temporal_len == 0 || self.num_classes == 0 || self.head_dim == 0 || self.hidden == 0 {
            return bad("temporal_len, num_classes, head_dim and hidden must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive".into());
        }
        if self.scene_dim == Some(0) {
            return bad("scene_dim must be positive".into());
        }
        self.loss.validate(self.class_channels())?;
        self.decode.validate()?;
        // Surfaces bank errors (e.g. too short a temporal length) early.
        build_anchor_bank_with(self.temporal_len, &self.anchors)?;
        Ok(())
    }

    pub fn scene_dim(&self) -> usize {
        self.scene_dim.unwrap_or(self.num_classes * self.head_dim)
    }

    pub fn class_channels(&self) -> usize {
        self.num_classes + usize::from(self.background_channel)
    }

    /// Learning rate after step decays up to `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub theta: f64,
    /// Snap decoded runs to their best-matching anchor window.
    pub snap: bool,
    /// Use the label-smoothing decoder instead of plain boundary runs.
    pub smoothing: bool,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            snap: false,
            smoothing: true,
            nms_iou: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub sgat: SgatStack,
    pub temporal: TemporalStack,
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.sgat.params();
        v.extend(self.temporal.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.sgat.params_mut();
        v.extend(self.temporal.params_mut());
        v
    }
}

/// Supervision for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTargets {
    /// `len × class_channels` one-hot class targets.
    pub y_s: Matrix,
    /// Union of the best-matching anchor masks of the chunk's segments.
    pub y_br: Vec<f64>,
}

/// Forward pass state kept for backprop.
pub struct ChunkForward {
    pub outputs: TemporalOutputs,
    sgat_caches: Vec<SgatCache>,
    temporal_cache: crate::temporal::TemporalCache,
}

impl Model {
    pub fn new_random(cfg: &TrainConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sgat = SgatStack::new_random(
            SgatShape {
                input_dim: feature_dim,
                head_dim: cfg.head_dim,
                num_classes: cfg.num_classes,
                scene_dim: cfg.scene_dim(),
            },
            cfg.readout,
            &mut rng,
        )?;
        let temporal = TemporalStack::new_random(
            TemporalShape {
                input_dim: cfg.scene_dim(),
                hidden: cfg.hidden,
                class_channels: cfg.class_channels(),
                kernel: cfg.kernel,
            },
            &mut rng,
        )?;
        Ok(Self { sgat, temporal })
    }

    pub fn feature_dim(&self) -> usize {
        self.sgat.input_dim()
    }

    pub fn forward(&self, snippets: &[SceneSnippet], topology: Topology) -> Result<ChunkForward> {
        let d = self.sgat.scene_dim();
        let mut emb = Matrix::zeros(snippets.len(), d);
        let mut sgat_caches = Vec::with_capacity(snippets.len());
        for (t, s) in snippets.iter().enumerate() {
            let x = s.node_features(topology)?;
            let edges = build_edge_list(topology, &s.agent_labels());
            let (e, cache) = sgat_forward_nodes(&x, &edges, &self.sgat)?;
            emb.row_mut(t).copy_from_slice(&e);
            sgat_caches.push(cache);
        }
        let (outputs, temporal_cache) = temporal_forward(&emb, &self.temporal)?;
        Ok(ChunkForward {
            outputs,
            sgat_caches,
            temporal_cache,
        })
    }

    /// Total loss of one chunk without touching gradients.
    pub fn loss(
        &self,
        snippets: &[SceneSnippet],
        targets: &ChunkTargets,
        topology: Topology,
        weights: &LossWeights,
    ) -> Result<f64> {
        let fwd = self.forward(snippets, topology)?;
        let act = act_loss(&targets.y_s, &fwd.outputs.class_logits, weights.pos_weights(), None)?;
        let br = br_loss(&targets.y_br, &fwd.outputs.boundary_probs, None)?;
        Ok(total_loss(act.value, br.value, weights))
    }

    /// Total loss of one chunk; adds its gradient into every parameter.
    pub fn loss_and_backward(
        &mut self,
        snippets: &[SceneSnippet],
        targets: &ChunkTargets,
        topology: Topology,
        weights: &LossWeights,
    ) -> Result<f64> {
        let fwd = self.forward(snippets, topology)?;
        let act = act_loss(&targets.y_s, &fwd.outputs.class_logits, weights.pos_weights(), None)?;
        let br = br_loss(&targets.y_br, &fwd.outputs.boundary_probs, None)?;
        let value = total_loss(act.value, br.value, weights);
        if !value.is_finite() {
            return Ok(value);
        }
        let d_logits = act.grad.map(|g| weights.lambda * g);
        let d_emb = temporal_backward(
            &d_logits,
            &br.grad,
            &fwd.outputs,
            &fwd.temporal_cache,
            &mut self.temporal,
        )?;
        for (t, cache) in fwd.sgat_caches.iter().enumerate() {
            sgat_backward(d_emb.row(t), cache, &mut self.sgat)?;
        }
        Ok(value)
    }
}

/// Builds the class and boundary targets for snippets
/// `[offset, offset + len)` of a video annotated with `segments`.
pub fn build_targets(
    segments: &[Segment],
    offset: usize,
    len: usize,
    bank: &AnchorBank,
    class_channels: usize,
    background_channel: bool,
) -> Result<ChunkTargets> {
    let n = bank.mask_len();
    if len > n {
        return Err(Error::Dimension(format!(
            "chunk of {len} snippets exceeds temporal length {n}"
        )));
    }
    let mut y_s = Matrix::zeros(len, class_channels);
    let mut y_br = vec![0.0; len];
    let mut covered = vec![false; len];
    for s in segments {
        if s.end < offset || s.start >= offset + len {
            continue;
        }
        let (a, b) = (s.start.max(offset) - offset, s.end.min(offset + len - 1) - offset);
        if s.class_id >= class_channels - usize::from(background_channel) {
            return Err(Error::Validation(format!(
                "annotation class {} outside the model's classes",
                s.class_id
            )));
        }
        for t in a..=b {
            y_s.set(t, s.class_id, 1.0);
            covered[t] = true;
        }
        let mut mask = vec![false; n];
        mask[a..=b].fill(true);
        let (idx, _) = match_anchor(&mask, bank)?;
        let anchor = bank.anchors()[idx];
        for t in anchor.start..anchor.end_exclusive().min(len) {
            y_br[t] = 1.0;
        }
    }
    if background_channel {
        for (t, &c) in covered.iter().enumerate() {
            if !c {
                y_s.set(t, class_channels - 1, 1.0);
            }
        }
    }
    Ok(ChunkTargets { y_s, y_br })
}

/// Plain SGD with momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new<M: Parameterized + ?Sized>(model: &M, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) {
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for ((x, vi), g) in values.iter_mut().zip(v.iter_mut()).zip(grads) {
                *vi = self.momentum * *vi + g;
                *x -= lr * *vi;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<M: Parameterized + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in model.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub epoch: usize,
    /// Mean chunk loss per completed epoch.
    pub loss_trace: Vec<f64>,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Internal(format!("serializing checkpoint: {e}")))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| {
            Error::parse(path, e.line(), format!("bad checkpoint: {e}"))
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Shapes must agree with a freshly initialized model for the stored config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = Model::new_random(&self.config, self.feature_dim, 0)?;
        let ours = self.model.params();
        let theirs = fresh.params();
        if ours.len() != theirs.len()
            || ours.iter().zip(&theirs).any(|(a, b)| a.value.shape() != b.value.shape())
            || self.model.sgat.readout != self.config.readout
        {
            return Err(Error::Validation(
                "checkpoint parameter shapes do not match its configuration".into(),
            ));
        }
        if ours.iter().any(|p| p.value.data().len() != p.value.rows() * p.value.cols() || !p.value.is_finite()) {
            return Err(Error::Validation("checkpoint holds malformed or non-finite parameters".into()));
        }
        Ok(())
    }
}

fn check_feature_dim(corpus: &Corpus, expected: usize) -> Result<()> {
    if let Some(v) = corpus.videos.iter().find(|v| v.header.feature_dim != expected) {
        return Err(Error::Validation(format!(
            "video {} has feature_dim {}, model expects {expected}",
            v.header.video_id, v.header.feature_dim
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<Checkpoint> {
    cfg.validate()?;
    let feature_dim = corpus
        .feature_dim()
        .ok_or_else(|| Error::Validation("training corpus has no videos".into()))?;
    check_feature_dim(corpus, feature_dim)?;
    let bank = build_anchor_bank_with(cfg.temporal_len, &cfg.anchors)?;

    // Targets are fixed, so build every chunk once.
    let mut chunks: Vec<(usize, usize, usize, ChunkTargets)> = Vec::new();
    for (vi, v) in corpus.videos.iter().enumerate() {
        let segs = corpus
            .annotations
            .get(&v.header.video_id)
            .map_or(&[][..], Vec::as_slice);
        for (offset, len) in chunk_video(v.header.n_snippets, cfg.temporal_len) {
            let targets = build_targets(segs, offset, len, &bank, cfg.class_channels(), cfg.background_channel)
                .map_err(|e| Error::Validation(format!("video {}: {e}", v.header.video_id)))?;
            chunks.push((vi, offset, len, targets));
        }
    }

    let mut model = Model::new_random(cfg, feature_dim, cfg.seed)?;
    let mut opt = Sgd::new(&model, cfg.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        for (step, &ci) in order.iter().enumerate() {
            let (vi, offset, len, targets) = &chunks[ci];
            let video = &corpus.videos[*vi];
            model.zero_grads();
            let loss = model.loss_and_backward(
                &video.snippets[*offset..offset + len],
                targets,
                cfg.topology,
                &cfg.loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {loss} at epoch {epoch}, step {step} (video {}, chunk at snippet {offset})",
                    video.header.video_id
                )));
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut model, max_norm);
            }
            opt.step(&mut model, lr);
            if model.params().iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameters became non-finite at epoch {epoch}, step {step} (video {}, chunk at snippet {offset})",
                    video.header.video_id
                )));
            }
            sum += loss;
        }
        let mean = sum / chunks.len().max(1) as f64;
        info!("epoch {epoch}: mean loss {mean:.6} (lr {lr})");
        loss_trace.push(mean);
    }
    model.zero_grads();

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        feature_dim,
        epoch: cfg.epochs,
        loss_trace,
        model,
    })
}

/// Gradient check of the whole model (scene-graph stack, temporal stack
/// and both loss terms) on one random chunk: `C = 3`, `D = 6`, at most three
/// agents per snippet. The topology and readout rotate with the seed.
pub fn gradcheck_random_model(seed: u64, h: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topology = Topology::ALL[(seed % 4) as usize];
    let readout = if (seed / 4).is_multiple_of(2) { Readout::Aggregated } else { Readout::Scene };
    let (c, d, len) = (3, 6, 6);
    let cfg = TrainConfig {
        num_classes: c,
        topology,
        readout,
        head_dim: 4,
        hidden: 5,
        ..TrainConfig::default()
    };
    let feature = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let snippets: Vec<SceneSnippet> = (0..len)
        .map(|t| SceneSnippet {
            snippet_index: t,
            scene_feature: feature(&mut rng),
            agents: (0..rng.gen_range(0..=3))
                .map(|_| crate::scenegraph::AgentNode {
                    label_id: rng.gen_range(0..2),
                    feature: feature(&mut rng),
                })
                .collect(),
        })
        .collect();
    let mut y_s = Matrix::zeros(len, c);
    for t in 0..len {
        if rng.gen_bool(0.5) {
            y_s.set(t, rng.gen_range(0..c), 1.0);
        }
    }
    let targets = ChunkTargets {
        y_s,
        y_br: (0..len).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect(),
    };
    let mut model = Model::new_random(&cfg, d, rng.gen())?;
    model.zero_grads();
    model.loss_and_backward(&snippets, &targets, topology, &cfg.loss)?;
    check_gradient(&mut model, h, |m| {
        m.loss(&snippets, &targets, topology, &cfg.loss).unwrap_or(f64::NAN)
    })
}

/// Joins same-class segments that were cut at a chunk border.
fn merge_across_chunks(mut segs: Vec<Segment>, borders: &[usize]) -> Vec<Segment> {
    segs.sort_by_key(|s| (s.class_id, s.start, s.end));
    let mut out: Vec<Segment> = Vec::with_capacity(segs.len());
    for s in segs {
        if let Some(last) = out.last_mut() {
            if last.class_id == s.class_id && last.end + 1 == s.start && borders.contains(&s.start) {
                let (la, lb) = (last.len() as f64, s.len() as f64);
                last.score = (last.score * la + s.score * lb) / (la + lb);
                last.end = s.end;
                continue;
            }
        }
        out.push(s);
    }
    out.sort_by_key(|s| (s.start, s.end, s.class_id));
    out
}

/// Decodes one video with a trained model.
pub fn detect_video(
    model: &Model,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    bank: &AnchorBank,
    video: &VideoFeatureFile,
) -> Result<Vec<Segment>> {
    let chunks = chunk_video(video.header.n_snippets, cfg.temporal_len);
    let mut segs = Vec::new();
    for &(offset, len) in &chunks {
        let fwd = model.forward(&video.snippets[offset..offset + len], cfg.topology)?;
        let mut outputs = fwd.outputs;
        if cfg.background_channel {
            let c = cfg.num_classes;
            let mut logits = Matrix::zeros(len, c);
            for t in 0..len {
                logits.row_mut(t).copy_from_slice(&outputs.class_logits.row(t)[..c]);
            }
            outputs.class_logits = logits;
        }
        let decoded = if decode.smoothing {
            decode_segments_smoothed(&outputs, bank, decode.theta, decode.snap)?
        } else {
            decode_segments(&outputs, bank, decode.theta, decode.snap)?
        };
        segs.extend(decoded.into_iter().map(|s| s.offset(offset)));
    }
    let borders: Vec<usize> = chunks.iter().skip(1).map(|c| c.0).collect();
    let merged = merge_across_chunks(segs, &borders);
    let mut kept = nms_temporal(&merged, decode.nms_iou);
    kept.sort_by_key(|s| (s.start, s.end, s.class_id));
    debug!("{}: {} segments", video.header.video_id, kept.len());
    Ok(kept)
}

/// Runs detection over every video. `jobs` bounds the worker threads
/// (0 uses all cores); output order is by video, then start snippet.
pub fn detect(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    decode: &DecodeConfig,
    jobs: usize,
) -> Result<Vec<VideoSegment>> {
    decode.validate()?;
    check_feature_dim(corpus, checkpoint.feature_dim)?;
    let cfg = &checkpoint.config;
    let bank = build_anchor_bank_with(cfg.temporal_len, &cfg.anchors)?;
    let run = || {
        corpus
            .videos
            .par_iter()
            .map(|v| {
                detect_video(&checkpoint.model, cfg, decode, &bank, v).map(|segs| {
                    segs.into_iter()
                        .map(|segment| VideoSegment {
                            video_id: v.header.video_id.clone(),
                            segment,
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let per_video = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
        .install(run)?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn detect_to_writer<W: Write>(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    decode: &DecodeConfig,
    jobs: usize,
    out: W,
) -> Result<Vec<VideoSegment>> {
    let preds = detect(checkpoint, corpus, decode, jobs)?;
    write_predictions(out, &preds)?;
    Ok(preds)
}
