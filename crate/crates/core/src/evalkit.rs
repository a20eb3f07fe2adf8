//! Temporal detection scoring: IoU, per-class AP, mAP over threshold sets,
//! and frame-level precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{read_segment_csv, Segment, VideoSegment};
use crate::error::{Error, Result};

/// Inclusive-count IoU of two snippet intervals.
pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Road,
    Thumos,
    #[serde(rename = "activitynet")]
    ActivityNet,
}

impl Preset {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Preset::Road => vec![0.1, 0.2, 0.3, 0.4, 0.5],
            Preset::Thumos => vec![0.3, 0.4, 0.5, 0.6, 0.7],
            Preset::ActivityNet => vec![0.5, 0.7, 0.95],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "road" => Ok(Preset::Road),
            "thumos" => Ok(Preset::Thumos),
            "activitynet" => Ok(Preset::ActivityNet),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (expected road, thumos or activitynet)"
            ))),
        }
    }
}

/// All-point interpolated AP for detections and ground truth of one class.
///
/// Detections are ranked by score (ties: earlier start, then input order).
/// Each detection claims the unmatched ground truth of the same video with
/// the highest IoU, if that IoU reaches `theta`.
pub fn average_precision(dets: &[VideoSegment], gts: &[VideoSegment], theta: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .segment
            .score
            .total_cmp(&dets[a].segment.score)
            .then(dets[a].segment.start.cmp(&dets[b].segment.start))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_video.get(det.video_id.as_str()) {
            for &g in cands {
                if used[g] {
                    continue;
                }
                let iou = temporal_iou(&det.segment, &gts[g].segment);
                if iou >= theta && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    ap_from_hits(&hits, gts.len())
}

/// Area under the monotone precision envelope of a ranked hit list.
fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// AP per threshold for every class with at least one ground truth.
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

impl EvalReport {
    /// Fixed-width text table: one row per class, one column per threshold.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>8}", "class");
        for t in &self.thresholds {
            let _ = write!(s, " {:>8}", format!("@{t}"));
        }
        s.push('\n');
        for (c, aps) in &self.per_class_ap {
            let _ = write!(s, "{c:>8}");
            for ap in aps {
                let _ = write!(s, " {:>8.4}", ap);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:>8}", "mAP");
        for m in &self.map_per_threshold {
            let _ = write!(s, " {:>8.4}", m);
        }
        let _ = writeln!(s, "\navg mAP {:.4}  (gt {}, detections {})", self.average_map, self.num_ground_truth, self.num_detections);
        s
    }
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
    }
    Ok(())
}

pub fn mean_ap(dets: &[VideoSegment], gts: &[VideoSegment], thresholds: &[f64]) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.segment.class_id).collect();
    let mut per_class_ap = BTreeMap::new();
    for &c in &classes {
        let d: Vec<VideoSegment> = dets.iter().filter(|d| d.segment.class_id == c).cloned().collect();
        let g: Vec<VideoSegment> = gts.iter().filter(|g| g.segment.class_id == c).cloned().collect();
        per_class_ap.insert(c, thresholds.iter().map(|&t| average_precision(&d, &g, t)).collect::<Vec<_>>());
    }
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if per_class_ap.is_empty() {
                0.0
            } else {
                per_class_ap.values().map(|aps| aps[ti]).sum::<f64>() / per_class_ap.len() as f64
            }
        })
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_class_ap,
        map_per_threshold,
        average_map,
        num_ground_truth: gts.len(),
        num_detections: dets.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf1Report {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    /// Averages weighted by ground-truth support.
    pub weighted_avg: Averages,
    pub accuracy: f64,
}

/// Per-class precision/recall/F1 over aligned label sequences. A zero
/// denominator yields 0.
pub fn prf1(pred: &[usize], gt: &[usize]) -> Result<Prf1Report> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let total = gt.len();
    let classes: BTreeSet<usize> = pred.iter().chain(gt).copied().collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class_id: c,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, total),
            support: tp + fn_,
        });
    }
    let k = per_class.len().max(1) as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let support: usize = per_class.iter().map(|m| m.support).sum();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if support == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / support as f64
        }
    };
    let weighted_avg = Averages {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
    };
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(Prf1Report {
        per_class,
        macro_avg,
        weighted_avg,
        accuracy: ratio(correct, total),
    })
}

/// Ground-truth CSV: `video_id,class_id,start_snippet,end_snippet`.
pub fn read_ground_truth(path: &Path) -> Result<Vec<VideoSegment>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_segment_csv(std::io::BufReader::new(f), path, false)
}
