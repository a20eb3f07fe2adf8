// The 128-window proposal bank and max-IoU matching of ground truth.

use compad::temporal::{build_anchor_bank, mask_iou, match_anchor};

pub fn run_example() -> compad::Result<Vec<(usize, f64)>> {
    let n = 32;
    let bank = build_anchor_bank(n)?;
    println!("{} windows over {n} snippets", bank.len());
    for a in bank.anchors().iter().step_by(16) {
        println!("  start {:>2} len {:>2}", a.start, a.len);
    }

    let mut matches = Vec::new();
    for (start, end) in [(0, 15), (5, 12), (20, 31), (3, 4)] {
        let gt: Vec<bool> = (0..n).map(|t| t >= start && t <= end).collect();
        let (idx, iou) = match_anchor(&gt, &bank)?;
        let a = bank.anchors()[idx];
        debug_assert_eq!(mask_iou(&gt, &bank.mask(idx))?, iou);
        println!(
            "gt [{start}, {end}] -> anchor {idx} [{}, {}] IoU {iou:.3}",
            a.start,
            a.end_exclusive() - 1
        );
        matches.push((idx, iou));
    }
    Ok(matches)
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
