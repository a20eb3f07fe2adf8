//! From per-snippet network outputs to scored activity segments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::temporal_iou;
use crate::numkit::sigmoid;
use crate::temporal::{match_anchor, AnchorBank, TemporalOutputs};

/// A detected or annotated activity instance; `start` and `end` are
/// inclusive snippet indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class_id: usize,
    pub score: f64,
}

impl Segment {
    pub fn new(start: usize, end: usize, class_id: usize, score: f64) -> Self {
        debug_assert!(start <= end);
        Self {
            start,
            end,
            class_id,
            score,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offset(mut self, by: usize) -> Self {
        self.start += by;
        self.end += by;
        self
    }

    pub fn validate(&self, n_total: usize) -> Result<()> {
        if self.start > self.end {
            return Err(Error::Validation(format!(
                "segment start {} after end {}",
                self.start, self.end
            )));
        }
        if self.end >= n_total {
            return Err(Error::Validation(format!(
                "segment end {} outside video of {n_total} snippets",
                self.end
            )));
        }
        if !self.score.is_finite() {
            return Err(Error::Validation("segment score is not finite".into()));
        }
        Ok(())
    }
}

/// A segment tagged with the video it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSegment {
    pub video_id: String,
    pub segment: Segment,
}

/// Splits `[0, n_total)` into consecutive `(offset, length)` chunks of `n`.
pub fn chunk_video(n_total: usize, n: usize) -> Vec<(usize, usize)> {
    assert!(n >= 1, "chunk length must be positive");
    (0..n_total)
        .step_by(n)
        .map(|offset| (offset, n.min(n_total - offset)))
        .collect()
}

fn runs<T: PartialEq + Copy>(labels: &[Option<T>]) -> Vec<(usize, usize, T)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let Some(label) = labels[i] else {
            i += 1;
            continue;
        };
        let start = i;
        while i + 1 < labels.len() && labels[i + 1] == Some(label) {
            i += 1;
        }
        out.push((start, i, label));
        i += 1;
    }
    out
}

/// Class choice and score for a snippet range `[start, end]`.
fn score_range(outputs: &TemporalOutputs, start: usize, end: usize) -> (usize, f64) {
    let len = (end - start + 1) as f64;
    let boundary_mean = outputs.boundary_probs[start..=end].iter().sum::<f64>() / len;
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..outputs.num_classes() {
        let mean = (start..=end)
            .map(|t| sigmoid(outputs.class_logits.get(t, c)))
            .sum::<f64>()
            / len;
        if mean > best.1 {
            best = (c, mean);
        }
    }
    (best.0, boundary_mean * best.1)
}

/// Snaps `[start, end]` to the best-matching bank window, clipped to the
/// chunk length. Chunks shorter than the bank are zero-padded.
fn snap_range(bank: &AnchorBank, chunk_len: usize, start: usize, end: usize) -> Result<(usize, usize)> {
    let n = bank.mask_len();
    if chunk_len > n {
        return Err(Error::Dimension(format!(
            "chunk of {chunk_len} snippets exceeds anchor mask length {n}"
        )));
    }
    let mut mask = vec![false; n];
    mask[start..=end].iter_mut().for_each(|b| *b = true);
    let (idx, _) = match_anchor(&mask, bank)?;
    let a = bank.anchors()[idx];
    let s = a.start.min(chunk_len - 1);
    let e = (a.end_exclusive() - 1).min(chunk_len - 1);
    Ok((s, e))
}

/// Thresholds the boundary head at `theta` and turns each maximal run of
/// positives into one segment, optionally snapped to the anchor bank.
///
/// The class is the argmax of the mean class probability over the segment
/// and the score is `mean boundary prob × mean class prob`.
pub fn decode_segments(
    outputs: &TemporalOutputs,
    bank: &AnchorBank,
    theta: f64,
    snap: bool,
) -> Result<Vec<Segment>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {theta}")));
    }
    let active: Vec<Option<()>> = outputs
        .boundary_probs
        .iter()
        .map(|&p| (p >= theta).then_some(()))
        .collect();
    let mut out = Vec::new();
    for (start, end, ()) in runs(&active) {
        let (s, e) = if snap {
            snap_range(bank, outputs.len(), start, end)?
        } else {
            (start, end)
        };
        let (class_id, score) = score_range(outputs, s, e);
        out.push(Segment::new(s, e, class_id, score));
    }
    Ok(out)
}

/// Label-smoothing decoder: per-snippet argmax labels (background where the
/// boundary head is below `theta`) are passed through [`dual_verify`], then
/// each maximal run of one label becomes a segment of that class.
pub fn decode_segments_smoothed(
    outputs: &TemporalOutputs,
    bank: &AnchorBank,
    theta: f64,
    snap: bool,
) -> Result<Vec<Segment>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {theta}")));
    }
    let labels: Vec<Option<usize>> = (0..outputs.len())
        .map(|t| {
            (outputs.boundary_probs[t] >= theta).then(|| {
                let row = outputs.class_logits.row(t);
                (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
            })
        })
        .collect();
    let labels = dual_verify(&labels);
    let mut out = Vec::new();
    for (start, end, class_id) in runs(&labels) {
        let (s, e) = if snap {
            snap_range(bank, outputs.len(), start, end)?
        } else {
            (start, end)
        };
        let len = (e - s + 1) as f64;
        let boundary_mean = outputs.boundary_probs[s..=e].iter().sum::<f64>() / len;
        let class_mean = (s..=e)
            .map(|t| sigmoid(outputs.class_logits.get(t, class_id)))
            .sum::<f64>()
            / len;
        out.push(Segment::new(s, e, class_id, boundary_mean * class_mean));
    }
    Ok(out)
}

/// Single left-to-right pass absorbing one-snippet label flips: an interior
/// label that differs from its left neighbour takes that neighbour's label
/// when the right neighbour agrees with it.
pub fn dual_verify<T: PartialEq + Clone>(labels: &[T]) -> Vec<T> {
    let mut out = labels.to_vec();
    for i in 1..out.len().saturating_sub(1) {
        if out[i - 1] != out[i] && out[i - 1] == out[i + 1] {
            out[i] = out[i - 1].clone();
        }
    }
    out
}

/// Greedy per-class temporal NMS. Keeps a segment iff its IoU with every
/// already-kept segment of the same class is at most `iou_thresh`.
pub fn nms_temporal(segments: &[Segment], iou_thresh: f64) -> Vec<Segment> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        segments[b]
            .score
            .total_cmp(&segments[a].score)
            .then(segments[a].start.cmp(&segments[b].start))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Segment> = Vec::new();
    for i in order {
        let s = segments[i];
        if kept
            .iter()
            .filter(|k| k.class_id == s.class_id)
            .all(|k| temporal_iou(k, &s) <= iou_thresh)
        {
            kept.push(s);
        }
    }
    kept
}

pub(crate) const PREDICTION_HEADER: [&str; 5] = ["video_id", "class_id", "start_snippet", "end_snippet", "score"];

pub fn write_predictions<W: Write>(writer: W, preds: &[VideoSegment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io {
        path: "<predictions>".into(),
        source: e.into(),
    };
    w.write_record(PREDICTION_HEADER).map_err(io)?;
    for p in preds {
        let s = &p.segment;
        w.write_record([
            p.video_id.clone(),
            s.class_id.to_string(),
            s.start.to_string(),
            s.end.to_string(),
            s.score.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn write_predictions_file(path: &Path, preds: &[VideoSegment]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(std::io::BufWriter::new(f), preds)
}

/// Reads segment rows; with `with_score` false the score column is absent
/// (ground-truth layout) and scores are set to 1.
pub(crate) fn read_segment_csv<R: Read>(
    reader: R,
    path: &Path,
    with_score: bool,
) -> Result<Vec<VideoSegment>> {
    let expected: &[&str] = if with_score {
        &PREDICTION_HEADER
    } else {
        &PREDICTION_HEADER[..4]
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| Error::parse(path, 1, e))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header '{}', found '{}'", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e))?;
        if rec.len() != expected.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let int = |k: usize| -> Result<usize> {
            rec[k].parse().map_err(|_| {
                Error::parse(path, line, format!("column {} is not a non-negative integer: '{}'", expected[k], &rec[k]))
            })
        };
        let (class_id, start, end) = (int(1)?, int(2)?, int(3)?);
        let score = if with_score {
            let v: f64 = rec[4]
                .parse()
                .map_err(|_| Error::parse(path, line, format!("score is not a number: '{}'", &rec[4])))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, "score is not finite"));
            }
            v
        } else {
            1.0
        };
        if start > end {
            return Err(Error::parse(
                path,
                line,
                format!("start_snippet {start} is after end_snippet {end}"),
            ));
        }
        out.push(VideoSegment {
            video_id: rec[0].to_string(),
            segment: Segment::new(start, end, class_id, score),
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoSegment>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_segment_csv(std::io::BufReader::new(f), path, true)
}
