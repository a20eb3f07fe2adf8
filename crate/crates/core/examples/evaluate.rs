// Temporal mAP under the three threshold presets, plus per-snippet
// precision / recall / F1.

use compad::decode::{Segment, VideoSegment};
use compad::evalkit::{mean_ap, prf1, Preset};

fn vs(video: &str, start: usize, end: usize, class_id: usize, score: f64) -> VideoSegment {
    VideoSegment { video_id: video.into(), segment: Segment::new(start, end, class_id, score) }
}

pub fn run_example() -> compad::Result<Vec<f64>> {
    let gt = vec![vs("a", 0, 9, 0, 1.0), vs("a", 20, 29, 1, 1.0), vs("b", 5, 14, 0, 1.0)];
    let preds = vec![
        vs("a", 1, 10, 0, 0.9),
        vs("a", 18, 27, 1, 0.8),
        vs("b", 9, 20, 0, 0.7),
        vs("b", 30, 35, 1, 0.4),
    ];
    let mut averages = Vec::new();
    for preset in [Preset::Road, Preset::Thumos, Preset::ActivityNet] {
        let report = mean_ap(&preds, &gt, &preset.thresholds())?;
        println!("{preset:?}");
        print!("{}", report.to_table());
        averages.push(report.average_map);
    }

    let per_snippet_pred = [0, 0, 1, 1, 2, 2, 1, 0];
    let per_snippet_gt = [0, 0, 1, 2, 2, 2, 1, 1];
    let r = prf1(&per_snippet_pred, &per_snippet_gt)?;
    println!("accuracy {:.3}, macro F1 {:.3}", r.accuracy, r.macro_avg.f1);
    Ok(averages)
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
