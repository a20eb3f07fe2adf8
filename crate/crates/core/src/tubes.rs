//! Online agent-tube construction by greedy agentness-ordered linking.
//!
//! At each frame the live tubes, highest mean agentness first, each claim
//! the highest-agentness unclaimed detection that overlaps their latest box
//! by more than `lambda_iou`. Unclaimed detections start new tubes; a tube
//! that goes unmatched for more than `n_term` consecutive frames ends.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) is not well-ordered"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn lerp(&self, other: &BBox, t: f64) -> BBox {
        let f = |a: f64, b: f64| a + (b - a) * t;
        BBox {
            x1: f(self.x1, other.x1),
            y1: f(self.y1, other.y1),
            x2: f(self.x2, other.x2),
            y2: f(self.y2, other.y2),
        }
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub frame: usize,
    pub bbox: BBox,
    pub agentness: f64,
    pub class_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: usize,
    pub bbox: BBox,
    pub agentness: f64,
    /// True for boxes filled in by [`interpolate_tube`].
    pub interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    /// Creation order within one linker; lower ids win ties.
    pub id: usize,
    pub entries: Vec<TubeEntry>,
    class_score_sum: Vec<f64>,
    detections: usize,
    agentness_sum: f64,
    pub alive: bool,
    pub misses: usize,
}

impl Tube {
    fn start(id: usize, det: &FrameDetection) -> Self {
        let mut t = Tube {
            id,
            entries: Vec::new(),
            class_score_sum: vec![0.0; det.class_scores.len()],
            detections: 0,
            agentness_sum: 0.0,
            alive: true,
            misses: 0,
        };
        t.push(det);
        t
    }

    fn push(&mut self, det: &FrameDetection) {
        self.entries.push(TubeEntry {
            frame: det.frame,
            bbox: det.bbox,
            agentness: det.agentness,
            interpolated: false,
        });
        for (s, v) in self.class_score_sum.iter_mut().zip(&det.class_scores) {
            *s += v;
        }
        self.detections += 1;
        self.agentness_sum += det.agentness;
        self.misses = 0;
    }

    pub fn mean_agentness(&self) -> f64 {
        self.agentness_sum / self.detections.max(1) as f64
    }

    /// Per-class mean score over the linked detections.
    pub fn class_scores_mean(&self) -> Vec<f64> {
        let n = self.detections.max(1) as f64;
        self.class_score_sum.iter().map(|s| s / n).collect()
    }

    pub fn last_box(&self) -> &BBox {
        &self.entries.last().expect("tubes are never empty").bbox
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub lambda_iou: f64,
    pub n_term: usize,
    pub top_k: usize,
    pub min_agentness: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            lambda_iou: 0.5,
            n_term: 5,
            top_k: 4,
            min_agentness: 0.025,
        }
    }
}

/// Tube state for one video stream.
#[derive(Debug, Clone, Default)]
pub struct TubeSet {
    pub live: Vec<Tube>,
    pub finished: Vec<Tube>,
    next_id: usize,
}

impl TubeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// All tubes, live and finished, ordered by creation.
    pub fn into_tubes(self) -> Vec<Tube> {
        let mut all = self.finished;
        all.extend(self.live);
        all.sort_by_key(|t| t.id);
        all
    }
}

/// Advances the tube set by one frame of (already filtered and suppressed)
/// detections. Returns for each detection the id of the tube it joined.
pub fn link_step(
    tubes: &mut TubeSet,
    detections: &[FrameDetection],
    lambda_iou: f64,
    n_term: usize,
) -> Vec<usize> {
    let mut det_order: Vec<usize> = (0..detections.len()).collect();
    det_order.sort_by(|&a, &b| {
        detections[b]
            .agentness
            .total_cmp(&detections[a].agentness)
            .then(a.cmp(&b))
    });
    let mut tube_order: Vec<usize> = (0..tubes.live.len()).collect();
    tube_order.sort_by(|&a, &b| {
        let (ta, tb) = (&tubes.live[a], &tubes.live[b]);
        tb.mean_agentness()
            .total_cmp(&ta.mean_agentness())
            .then(ta.id.cmp(&tb.id))
    });

    let mut owner: Vec<Option<usize>> = vec![None; detections.len()];
    for ti in tube_order {
        let tube = &mut tubes.live[ti];
        let last = *tube.last_box();
        let pick = det_order
            .iter()
            .copied()
            .find(|&d| owner[d].is_none() && box_iou(&last, &detections[d].bbox) > lambda_iou);
        match pick {
            Some(d) => {
                owner[d] = Some(tube.id);
                tube.push(&detections[d]);
            }
            None => tube.misses += 1,
        }
    }

    let (live, ended): (Vec<Tube>, Vec<Tube>) = std::mem::take(&mut tubes.live)
        .into_iter()
        .partition(|t| t.misses <= n_term);
    tubes.live = live;
    tubes.finished.extend(ended.into_iter().map(|mut t| {
        t.alive = false;
        t
    }));

    for (d, det) in detections.iter().enumerate() {
        if owner[d].is_none() {
            let id = tubes.next_id;
            tubes.next_id += 1;
            owner[d] = Some(id);
            tubes.live.push(Tube::start(id, det));
        }
    }
    owner.into_iter().map(|o| o.expect("every detection is owned")).collect()
}

/// Links a whole detection stream. Frames without detections still count
/// as misses; detections below `min_agentness` are dropped first.
pub fn link_video(detections: &[FrameDetection], cfg: &LinkConfig) -> Vec<Tube> {
    let mut by_frame: BTreeMap<usize, Vec<FrameDetection>> = BTreeMap::new();
    for d in detections.iter().filter(|d| d.agentness >= cfg.min_agentness) {
        by_frame.entry(d.frame).or_default().push(d.clone());
    }
    let mut tubes = TubeSet::new();
    let (Some(&first), Some(&last)) = (by_frame.keys().next(), by_frame.keys().last()) else {
        return Vec::new();
    };
    for frame in first..=last {
        let dets = by_frame.get(&frame).map_or(&[][..], Vec::as_slice);
        link_step(&mut tubes, dets, cfg.lambda_iou, cfg.n_term);
    }
    tubes.into_tubes()
}

/// The `k` classes with the highest mean score, best first; ties go to the
/// lower class id.
pub fn label_tube(tube: &Tube, k: usize) -> Result<Vec<usize>> {
    let means = tube.class_scores_mean();
    if k > means.len() {
        return Err(Error::Config(format!(
            "cannot pick {k} labels from {} classes",
            means.len()
        )));
    }
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Fills frame gaps with coordinate-wise linear interpolation between the
/// bracketing boxes. Tubes with fewer than two entries are returned as is.
pub fn interpolate_tube(tube: &Tube) -> Tube {
    let mut out = tube.clone();
    if tube.entries.len() < 2 {
        return out;
    }
    out.entries.clear();
    for w in tube.entries.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        out.entries.push(*a);
        let gap = b.frame - a.frame;
        for step in 1..gap {
            let t = step as f64 / gap as f64;
            out.entries.push(TubeEntry {
                frame: a.frame + step,
                bbox: a.bbox.lerp(&b.bbox, t),
                agentness: a.agentness + (b.agentness - a.agentness) * t,
                interpolated: true,
            });
        }
    }
    out.entries.push(*tube.entries.last().expect("checked length"));
    out
}

/// Reads `video_id,frame,x1,y1,x2,y2,agentness,score_0..score_{C-1}`.
pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<FrameDetection>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_detections_from(std::io::BufReader::new(f), path)
}

pub fn read_detections_from<R: std::io::Read>(
    reader: R,
    path: &Path,
) -> Result<BTreeMap<String, Vec<FrameDetection>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse(path, 1, e))?.clone();
    let fixed = ["video_id", "frame", "x1", "y1", "x2", "y2", "agentness"];
    if headers.len() < fixed.len() || headers.iter().take(fixed.len()).ne(fixed) {
        return Err(Error::parse(
            path,
            1,
            format!("header must start with '{}'", fixed.join(",")),
        ));
    }
    let classes = headers.len() - fixed.len();
    for (c, h) in headers.iter().skip(fixed.len()).enumerate() {
        if h != format!("score_{c}") {
            return Err(Error::parse(path, 1, format!("expected column score_{c}, found '{h}'")));
        }
    }
    let mut out: BTreeMap<String, Vec<FrameDetection>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e))?;
        let num = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|_| Error::parse(path, line, format!("column {} is not a number", &headers[k])))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("column {} is not finite", &headers[k])));
            }
            Ok(v)
        };
        let frame: usize = rec[1]
            .parse()
            .map_err(|_| Error::parse(path, line, "frame is not a non-negative integer"))?;
        let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?)
            .map_err(|e| Error::parse(path, line, e))?;
        let agentness = num(6)?;
        let class_scores = (0..classes).map(|c| num(fixed.len() + c)).collect::<Result<Vec<_>>>()?;
        if !(0.0..=1.0).contains(&agentness) || class_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::parse(path, line, "scores must lie in [0, 1]"));
        }
        out.entry(rec[0].to_string()).or_default().push(FrameDetection {
            frame,
            bbox,
            agentness,
            class_scores,
        });
    }
    Ok(out)
}
