// Writes a small synthetic corpus to disk and reads it back, then shows
// what a corrupted feature file reports.

use compad::dataio::{gen_synthetic_to_dir, read_features_from, Corpus, SyntheticConfig};

pub fn run_example() -> compad::Result<usize> {
    let dir = std::env::temp_dir().join(format!("compad-feature-files-{}", std::process::id()));
    let cfg = SyntheticConfig { n_videos: 3, n_test_videos: 1, ..SyntheticConfig::default() };
    let data = gen_synthetic_to_dir(&cfg, &dir)?;

    let train = dir.join("train");
    let loaded = Corpus::load(&train.join("features"), Some(&train.join("annotations.csv")))?;
    assert_eq!(loaded, data.train);
    for v in &loaded.videos {
        let segs = &loaded.annotations[&v.header.video_id];
        println!("{}: {} snippets, activities {:?}", v.header.video_id, v.header.n_snippets,
            segs.iter().map(|s| (s.start, s.end, s.class_id)).collect::<Vec<_>>());
    }

    let text = std::fs::read_to_string(train.join("features/train_0000.jsonl"))
        .map_err(|e| compad::Error::Internal(e.to_string()))?;
    let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
    match read_features_from(cut.as_bytes(), "train_0000.jsonl".as_ref()) {
        Err(e) => println!("truncated copy: {e}"),
        Ok(_) => unreachable!("a truncated file must not parse"),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(loaded.videos.len())
}

fn main() -> compad::Result<()> {
    run_example()?;
    Ok(())
}
