use sha2::{Digest, Sha256};

use compad::dataio::{gen_synthetic_to_dir, read_feature_dir, write_features_file, Corpus, SyntheticConfig};

fn tree_hash(root: &std::path::Path) -> String {
    let mut files: Vec<_> = walk(root);
    files.sort();
    let mut h = Sha256::new();
    for p in files {
        h.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&p).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn walk(d: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn hundred_video_corpus_hash_is_stable() {
    let cfg = SyntheticConfig { n_videos: 100, n_test_videos: 0, ..SyntheticConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_synthetic_to_dir(&cfg, a.path()).unwrap();
    gen_synthetic_to_dir(&cfg, b.path()).unwrap();
    let ha = tree_hash(a.path());
    assert_eq!(ha, tree_hash(b.path()));

    // Read everything back and rewrite it: the bytes must not change.
    let train = a.path().join("train");
    let corpus = Corpus::load(&train.join("features"), Some(&train.join("annotations.csv"))).unwrap();
    assert_eq!(corpus.videos.len(), 100);
    let c = tempfile::tempdir().unwrap();
    corpus.write(&c.path().join("train")).unwrap();
    std::fs::create_dir_all(c.path().join("test/features")).unwrap();
    std::fs::copy(a.path().join("test/annotations.csv"), c.path().join("test/annotations.csv")).unwrap();
    assert_eq!(tree_hash(c.path()), ha);
}

#[test]
fn duplicate_video_ids_are_rejected() {
    let cfg = SyntheticConfig { n_videos: 1, n_test_videos: 0, ..SyntheticConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic_to_dir(&cfg, dir.path()).unwrap();
    let fdir = dir.path().join("train/features");
    write_features_file(&fdir.join("copy.jsonl"), &data.train.videos[0]).unwrap();
    assert!(read_feature_dir(&fdir).is_err());
}
