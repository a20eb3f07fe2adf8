// Online tube linking over a short scripted scene: a car drives through,
// a pedestrian is occluded for three frames and a cyclist leaves for good.

use compad::tubes::{interpolate_tube, label_tube, link_video, BBox, FrameDetection, LinkConfig, Tube};

fn det(frame: usize, x: f64, y: f64, agentness: f64, scores: [f64; 5]) -> FrameDetection {
    FrameDetection {
        frame,
        bbox: BBox::new(x, y, x + 40.0, y + 40.0).expect("ordered box"),
        agentness,
        class_scores: scores.to_vec(),
    }
}

pub fn run_example() -> compad::Result<Vec<Tube>> {
    let mut dets = Vec::new();
    for f in 0..15 {
        dets.push(det(f, 2.0 * f as f64, 0.0, 0.9, [0.8, 0.1, 0.1, 0.6, 0.0]));
        if !(5..8).contains(&f) {
            dets.push(det(f, 200.0, 100.0 + f as f64, 0.7, [0.1, 0.9, 0.2, 0.0, 0.3]));
        }
        if f < 4 {
            dets.push(det(f, 400.0, 300.0, 0.5, [0.0, 0.2, 0.7, 0.1, 0.4]));
        }
    }
    let cfg = LinkConfig::default();
    let tubes = link_video(&dets, &cfg);
    for t in &tubes {
        let filled = interpolate_tube(t);
        println!(
            "tube {}: frames {}..={} ({} detected, {} interpolated), labels {:?}, alive {}",
            t.id,
            t.entries[0].frame,
            t.entries.last().map_or(0, |e| e.frame),
            t.entries.len(),
            filled.entries.len() - t.entries.len(),
            label_tube(t, cfg.top_k)?,
            t.alive
        );
    }
    Ok(tubes)
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
