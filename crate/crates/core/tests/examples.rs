#![allow(dead_code)]

use compad::scenegraph::Topology;

mod gradcheck {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradcheck.rs"));
}
mod scene_graph {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/scene_graph.rs"));
}
mod anchor_bank {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/anchor_bank.rs"));
}
mod decode_segments {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/decode_segments.rs"));
}
mod tube_linking {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/tube_linking.rs"));
}
mod evaluate {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/evaluate.rs"));
}
mod feature_files {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/feature_files.rs"));
}
mod train_synthetic {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_synthetic.rs"));
}

#[test]
fn gradcheck_example() {
    assert!(gradcheck::run_example().unwrap() < 1e-4);
}

#[test]
fn scene_graph_example() {
    let sizes = scene_graph::run_example().unwrap();
    // 4 nodes: 16 fully connected, 4 + 2·3 star, plus the 0-2 same-label pair.
    assert_eq!(
        sizes,
        vec![
            (Topology::FullyConnected, 16),
            (Topology::Star, 10),
            (Topology::StarSameLabel, 12),
            (Topology::SceneOnly, 1)
        ]
    );
}

#[test]
fn anchor_bank_example() {
    let m = anchor_bank::run_example().unwrap();
    assert_eq!(m[0].1, 1.0);
    assert_eq!(m[2].1, 0.75);
}

#[test]
fn decode_example() {
    let (plain, smoothed) = decode_segments::run_example().unwrap();
    assert_eq!(plain.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), vec![(2, 9), (12, 14)]);
    assert_eq!(
        smoothed.iter().map(|s| (s.start, s.end, s.class_id)).collect::<Vec<_>>(),
        vec![(2, 6, 1), (7, 9, 2), (12, 14, 2)]
    );
}

#[test]
fn tube_example() {
    let tubes = tube_linking::run_example().unwrap();
    assert_eq!(tubes.len(), 3);
    assert!(!tubes[2].alive);
}

#[test]
fn evaluate_example() {
    let avgs = evaluate::run_example().unwrap();
    assert!((avgs[0] - 0.9).abs() < 1e-12);
}

#[test]
fn feature_files_example() {
    assert_eq!(feature_files::run_example().unwrap(), 3);
}

#[test]
fn train_synthetic_example_runs() {
    let (trace, map) = train_synthetic::run_example(1, Topology::Star).unwrap();
    assert_eq!(trace.len(), 1);
    assert!((0.0..=1.0).contains(&map));
}
