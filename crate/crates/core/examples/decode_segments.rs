// From network outputs to segments: boundary runs, dual verification of
// label flips, and per-class NMS.

use compad::decode::{decode_segments, decode_segments_smoothed, dual_verify, nms_temporal, Segment};
use compad::numkit::Matrix;
use compad::temporal::{build_anchor_bank, TemporalOutputs};

fn logits_for(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (t, &c) in labels.iter().enumerate() {
        for k in 0..classes {
            m.set(t, k, if k == c { 3.0 } else { -3.0 });
        }
    }
    m
}

pub fn run_example() -> compad::Result<(Vec<Segment>, Vec<Segment>)> {
    let flips = ['A', 'A', 'B', 'A', 'A'];
    println!("{flips:?} -> {:?}", dual_verify(&flips));

    let boundary = vec![
        0.1, 0.2, 0.8, 0.9, 0.95, 0.9, 0.85, 0.9, 0.9, 0.8, 0.2, 0.1, 0.7, 0.9, 0.9, 0.3,
    ];
    // Class 1 on 2..=6 with a one-snippet flip at 4, class 2 on 7..=9 and 12..=14.
    let labels = [0, 0, 1, 1, 0, 1, 1, 2, 2, 2, 0, 0, 2, 2, 2, 0];
    let outputs = TemporalOutputs { class_logits: logits_for(&labels, 3), boundary_probs: boundary };
    let bank = build_anchor_bank(16)?;

    let plain = decode_segments(&outputs, &bank, 0.5, false)?;
    let smoothed = decode_segments_smoothed(&outputs, &bank, 0.5, false)?;
    println!("boundary runs:");
    for s in &plain {
        println!("  [{:>2}, {:>2}] class {} score {:.3}", s.start, s.end, s.class_id, s.score);
    }
    println!("label-smoothed:");
    for s in &smoothed {
        println!("  [{:>2}, {:>2}] class {} score {:.3}", s.start, s.end, s.class_id, s.score);
    }

    let overlapping = [
        Segment::new(0, 9, 0, 0.9),
        Segment::new(1, 9, 0, 0.8),
        Segment::new(1, 9, 1, 0.7),
        Segment::new(12, 15, 0, 0.6),
    ];
    let kept = nms_temporal(&overlapping, 0.5);
    println!("NMS keeps {} of {}", kept.len(), overlapping.len());
    Ok((plain, smoothed))
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
