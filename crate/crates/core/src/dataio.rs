//! Feature and annotation files, and a seeded synthetic corpus generator.
//!
//! A feature file is line-delimited JSON: one header line followed by one
//! record per snippet. A corpus directory holds `features/<video_id>.jsonl`
//! and `annotations.csv`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decode::{read_segment_csv, Segment, VideoSegment, PREDICTION_HEADER};
use crate::error::{Error, Result};
use crate::scenegraph::{AgentNode, SceneSnippet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureHeader {
    pub video_id: String,
    pub n_snippets: usize,
    pub feature_dim: usize,
    pub snippet_len_frames: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnippetRecord {
    scene_feature: Vec<f64>,
    agents: Vec<AgentNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureFile {
    pub header: FeatureHeader,
    pub snippets: Vec<SceneSnippet>,
}

impl VideoFeatureFile {
    /// Checks record count and vector lengths against the header.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if self.snippets.len() != h.n_snippets {
            return Err(Error::Validation(format!(
                "video {}: header declares {} snippets, found {}",
                h.video_id,
                h.n_snippets,
                self.snippets.len()
            )));
        }
        for (i, s) in self.snippets.iter().enumerate() {
            check_dims(s, h.feature_dim).map_err(|m| {
                Error::Validation(format!("video {} snippet {i}: {m}", h.video_id))
            })?;
        }
        Ok(())
    }
}

fn check_dims(s: &SceneSnippet, d: usize) -> std::result::Result<(), String> {
    if s.scene_feature.len() != d {
        return Err(format!(
            "scene_feature has {} values, feature_dim is {d}",
            s.scene_feature.len()
        ));
    }
    for (j, a) in s.agents.iter().enumerate() {
        if a.feature.len() != d {
            return Err(format!(
                "agent {j} feature has {} values, feature_dim is {d}",
                a.feature.len()
            ));
        }
    }
    if let Some(v) = s
        .scene_feature
        .iter()
        .chain(s.agents.iter().flat_map(|a| a.feature.iter()))
        .find(|v| !v.is_finite())
    {
        return Err(format!("non-finite feature value {v}"));
    }
    Ok(())
}

pub fn write_features<W: Write>(mut w: W, file: &VideoFeatureFile) -> Result<()> {
    file.validate()?;
    let io = |e: std::io::Error| Error::io(format!("<{}>", file.header.video_id), e);
    let json = |e: serde_json::Error| Error::Internal(format!("serializing features: {e}"));
    writeln!(w, "{}", serde_json::to_string(&file.header).map_err(json)?).map_err(io)?;
    for s in &file.snippets {
        let rec = SnippetRecord {
            scene_feature: s.scene_feature.clone(),
            agents: s.agents.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(json)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_features_file(path: &Path, file: &VideoFeatureFile) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(BufWriter::new(f), file)
}

/// Parses one feature file; `path` only labels errors.
pub fn read_features_from<R: Read>(reader: R, path: &Path) -> Result<VideoFeatureFile> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| line_error(path, 1, e))?,
        None => return Err(Error::parse(path, 1, "empty file, expected a header line")),
    };
    let header: FeatureHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
    if header.feature_dim == 0 {
        return Err(Error::parse(path, 1, "feature_dim must be positive"));
    }
    let mut snippets = Vec::with_capacity(header.n_snippets);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| line_error(path, lineno, e))?;
        if snippets.len() == header.n_snippets {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(
                path,
                lineno,
                format!("more records than the declared {} snippets", header.n_snippets),
            ));
        }
        let rec: SnippetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("bad snippet record: {e}")))?;
        let snippet = SceneSnippet {
            snippet_index: snippets.len(),
            scene_feature: rec.scene_feature,
            agents: rec.agents,
        };
        check_dims(&snippet, header.feature_dim).map_err(|m| Error::parse(path, lineno, m))?;
        snippets.push(snippet);
    }
    if snippets.len() != header.n_snippets {
        return Err(Error::parse(
            path,
            snippets.len() + 2,
            format!(
                "file ends after {} snippet records, header declares {}",
                snippets.len(),
                header.n_snippets
            ),
        ));
    }
    Ok(VideoFeatureFile { header, snippets })
}

fn line_error(path: &Path, line: usize, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::InvalidData {
        Error::parse(path, line, "line is not valid UTF-8")
    } else {
        Error::io(path, e)
    }
}

pub fn read_features(path: &Path) -> Result<VideoFeatureFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features_from(f, path)
}

/// Reads a single `.jsonl` file or every `.jsonl` file in a directory,
/// ordered by video id.
pub fn read_feature_dir(path: &Path) -> Result<Vec<VideoFeatureFile>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                v.push(p);
            }
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut videos = files
        .iter()
        .map(|p| read_features(p))
        .collect::<Result<Vec<_>>>()?;
    videos.sort_by(|a, b| a.header.video_id.cmp(&b.header.video_id));
    for w in videos.windows(2) {
        if w[0].header.video_id == w[1].header.video_id {
            return Err(Error::Validation(format!(
                "video id {} appears in more than one feature file",
                w[0].header.video_id
            )));
        }
    }
    Ok(videos)
}

pub type Annotations = BTreeMap<String, Vec<Segment>>;

/// Ground-truth CSV `video_id,class_id,start_snippet,end_snippet`, checked
/// against each video's snippet count.
pub fn read_annotations_from<R: Read>(
    reader: R,
    path: &Path,
    n_snippets: &BTreeMap<String, usize>,
) -> Result<Annotations> {
    let rows = read_segment_csv(reader, path, false)?;
    let mut out = Annotations::new();
    for (i, row) in rows.into_iter().enumerate() {
        let line = i + 2;
        let n = *n_snippets.get(&row.video_id).ok_or_else(|| {
            Error::parse(path, line, format!("unknown video '{}'", row.video_id))
        })?;
        row.segment
            .validate(n)
            .map_err(|e| Error::parse(path, line, e))?;
        out.entry(row.video_id).or_default().push(row.segment);
    }
    for segs in out.values_mut() {
        segs.sort_by_key(|s| (s.start, s.end, s.class_id));
    }
    Ok(out)
}

pub fn read_annotations(path: &Path, n_snippets: &BTreeMap<String, usize>) -> Result<Annotations> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations_from(BufReader::new(f), path, n_snippets)
}

pub fn write_annotations<W: Write>(writer: W, ann: &Annotations) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: "<annotations>".into(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&PREDICTION_HEADER[..4]).map_err(io)?;
    for (vid, segs) in ann {
        for s in segs {
            w.write_record([
                vid.clone(),
                s.class_id.to_string(),
                s.start.to_string(),
                s.end.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<annotations>", e))
}

/// Flattens annotations into the evaluation layout.
pub fn annotations_to_segments(ann: &Annotations) -> Vec<VideoSegment> {
    ann.iter()
        .flat_map(|(vid, segs)| {
            segs.iter().map(move |s| VideoSegment {
                video_id: vid.clone(),
                segment: *s,
            })
        })
        .collect()
}

/// Feature files plus their annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoFeatureFile>,
    pub annotations: Annotations,
}

impl Corpus {
    pub fn snippet_counts(&self) -> BTreeMap<String, usize> {
        self.videos
            .iter()
            .map(|v| (v.header.video_id.clone(), v.header.n_snippets))
            .collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.header.feature_dim)
    }

    /// Writes `features/<video_id>.jsonl` and `annotations.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let fdir = dir.join("features");
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for v in &self.videos {
            write_features_file(&fdir.join(format!("{}.jsonl", v.header.video_id)), v)?;
        }
        let apath = dir.join("annotations.csv");
        let f = std::fs::File::create(&apath).map_err(|e| Error::io(&apath, e))?;
        write_annotations(BufWriter::new(f), &self.annotations)
    }

    pub fn load(features: &Path, annotations: Option<&Path>) -> Result<Self> {
        let videos = read_feature_dir(features)?;
        if let Some(d) = videos.first().map(|v| v.header.feature_dim) {
            if let Some(v) = videos.iter().find(|v| v.header.feature_dim != d) {
                return Err(Error::Validation(format!(
                    "video {} has feature_dim {}, others have {d}",
                    v.header.video_id, v.header.feature_dim
                )));
            }
        }
        let mut corpus = Corpus {
            videos,
            annotations: Annotations::new(),
        };
        if let Some(a) = annotations {
            corpus.annotations = read_annotations(a, &corpus.snippet_counts())?;
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    /// Extra held-out videos drawn from the same stream after the training set.
    pub n_test_videos: usize,
    pub n_snippets_min: usize,
    pub n_snippets_max: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Size of the agent label vocabulary.
    pub agent_labels: usize,
    pub signature_scale: f64,
    pub noise_scale: f64,
    pub activities_min: usize,
    pub activities_max: usize,
    pub activity_len_min: usize,
    pub activity_len_max: usize,
    /// Minimum number of background snippets between two activities.
    pub min_gap: usize,
    pub snippet_len_frames: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_test_videos: 50,
            n_snippets_min: 32,
            n_snippets_max: 32,
            num_classes: 4,
            feature_dim: 16,
            agents_min: 1,
            agents_max: 4,
            agent_labels: 3,
            signature_scale: 4.0,
            noise_scale: 1.0,
            activities_min: 1,
            activities_max: 2,
            activity_len_min: 4,
            activity_len_max: 16,
            min_gap: 2,
            snippet_len_frames: 12,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lo, hi) in [
            ("n_snippets", self.n_snippets_min, self.n_snippets_max),
            ("agents", self.agents_min, self.agents_max),
            ("activities", self.activities_min, self.activities_max),
            ("activity_len", self.activity_len_min, self.activity_len_max),
        ] {
            if lo > hi {
                return bad(format!("{name}_min {lo} exceeds {name}_max {hi}"));
            }
        }
        if !(self.signature_scale > 0.0 && self.signature_scale.is_finite()) {
            return bad(format!("signature_scale must be positive, got {}", self.signature_scale));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if self.num_classes == 0 || self.feature_dim == 0 || self.n_snippets_min == 0 {
            return bad("num_classes, feature_dim and n_snippets_min must be positive".into());
        }
        if self.activity_len_min == 0 {
            return bad("activity_len_min must be positive".into());
        }
        if self.num_classes > self.feature_dim {
            return bad(format!(
                "{} orthogonal class signatures do not fit in dimension {}",
                self.num_classes, self.feature_dim
            ));
        }
        if self.agents_max > 0 && self.agent_labels == 0 {
            return bad("agent_labels must be positive when agents are generated".into());
        }
        let k = self.activities_max;
        if k > 0 {
            let needed = k * self.activity_len_min + (k - 1) * self.min_gap;
            if needed > self.n_snippets_min {
                return bad(format!(
                    "{k} activities of length >= {} with gap {} need {needed} snippets but videos may have only {}; lower activities_max, activity_len_min or min_gap",
                    self.activity_len_min, self.min_gap, self.n_snippets_min
                ));
            }
        }
        Ok(())
    }
}

/// Output of [`gen_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Corpus,
    pub test: Corpus,
    /// Unit-norm, mutually orthogonal class signatures.
    pub signatures: Vec<Vec<f64>>,
    /// Nearest-centroid accuracy on scene features of activity snippets.
    pub probe_accuracy: f64,
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures = orthonormal_signatures(cfg.num_classes, cfg.feature_dim, &mut rng);
    let mut train = Corpus::default();
    let mut test = Corpus::default();
    for i in 0..cfg.n_videos + cfg.n_test_videos {
        let (corpus, id) = if i < cfg.n_videos {
            (&mut train, format!("train_{i:04}"))
        } else {
            (&mut test, format!("test_{:04}", i - cfg.n_videos))
        };
        let (video, segs) = gen_video(cfg, id.clone(), &signatures, &mut rng);
        if !segs.is_empty() {
            corpus.annotations.insert(id, segs);
        }
        corpus.videos.push(video);
    }
    let probe_accuracy = centroid_probe(&[&train, &test], cfg.num_classes);
    Ok(SyntheticData {
        train,
        test,
        signatures,
        probe_accuracy,
    })
}

/// Generates and writes `out/train` and `out/test` corpora.
pub fn gen_synthetic_to_dir(cfg: &SyntheticConfig, out: &Path) -> Result<SyntheticData> {
    let data = gen_synthetic(cfg)?;
    data.train.write(&out.join("train"))?;
    data.test.write(&out.join("test"))?;
    Ok(data)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn orthonormal_signatures<R: Rng + ?Sized>(c: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
    while basis.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn plant_segments<R: Rng + ?Sized>(cfg: &SyntheticConfig, n: usize, rng: &mut R) -> Vec<Segment> {
    let k = rng.gen_range(cfg.activities_min..=cfg.activities_max);
    if k == 0 {
        return Vec::new();
    }
    // Draw lengths one at a time, capping each so the rest still fit.
    let mut lens = Vec::with_capacity(k);
    let mut budget = n - (k - 1) * cfg.min_gap;
    for j in 0..k {
        let reserve = (k - j - 1) * cfg.activity_len_min;
        let hi = cfg.activity_len_max.min(budget - reserve);
        let len = rng.gen_range(cfg.activity_len_min..=hi);
        budget -= len;
        lens.push(len);
    }
    lens.shuffle(rng);
    // Spread the leftover background over the k + 1 gaps.
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=budget)).collect();
    cuts.sort_unstable();
    let mut segs = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (j, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut + if j > 0 { cfg.min_gap } else { 0 };
        prev_cut = cut;
        let class_id = rng.gen_range(0..cfg.num_classes);
        segs.push(Segment::new(pos, pos + len - 1, class_id, 1.0));
        pos += len;
    }
    segs
}

fn gen_video<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    video_id: String,
    signatures: &[Vec<f64>],
    rng: &mut R,
) -> (VideoFeatureFile, Vec<Segment>) {
    let n = rng.gen_range(cfg.n_snippets_min..=cfg.n_snippets_max);
    let d = cfg.feature_dim;
    let segs = plant_segments(cfg, n, rng);
    let mut class_at = vec![None; n];
    for s in &segs {
        class_at[s.start..=s.end].fill(Some(s.class_id));
    }
    let feature = |rng: &mut R, class: Option<usize>| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| cfg.noise_scale * gaussian(rng)).collect();
        if let Some(c) = class {
            v.iter_mut()
                .zip(&signatures[c])
                .for_each(|(x, s)| *x += cfg.signature_scale * s);
        }
        v
    };
    let snippets = (0..n)
        .map(|t| {
            let scene_feature = feature(rng, class_at[t]);
            let n_agents = rng.gen_range(cfg.agents_min..=cfg.agents_max);
            let agents = (0..n_agents)
                .map(|_| AgentNode {
                    label_id: rng.gen_range(0..cfg.agent_labels.max(1)),
                    feature: feature(rng, class_at[t]),
                })
                .collect();
            SceneSnippet {
                snippet_index: t,
                scene_feature,
                agents,
            }
        })
        .collect();
    let header = FeatureHeader {
        video_id,
        n_snippets: n,
        feature_dim: d,
        snippet_len_frames: cfg.snippet_len_frames,
    };
    (VideoFeatureFile { header, snippets }, segs)
}

/// Fits one centroid per class on activity snippets' scene features and
/// reports how many of those snippets land nearest their own centroid.
/// Returns 1.0 when there are no activity snippets.
pub fn centroid_probe(corpora: &[&Corpus], num_classes: usize) -> f64 {
    let mut samples: Vec<(&[f64], usize)> = Vec::new();
    for corpus in corpora {
        for v in &corpus.videos {
            for s in corpus.annotations.get(&v.header.video_id).into_iter().flatten() {
                for t in s.start..=s.end {
                    samples.push((&v.snippets[t].scene_feature, s.class_id));
                }
            }
        }
    }
    let Some(d) = samples.first().map(|(f, _)| f.len()) else {
        return 1.0;
    };
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, c) in &samples {
        sums[*c].iter_mut().zip(*f).for_each(|(a, b)| *a += b);
        counts[*c] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let correct = samples
        .iter()
        .filter(|(f, c)| {
            let nearest = centroids
                .iter()
                .enumerate()
                .filter_map(|(k, cent)| {
                    cent.as_ref()
                        .map(|m| (k, m.iter().zip(*f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            nearest == Some(*c)
        })
        .count();
    correct as f64 / samples.len() as f64
}
