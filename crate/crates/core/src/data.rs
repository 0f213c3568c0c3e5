//! Label spaces, datasets and their file formats.
//!
//! Three line-oriented or single-object JSON formats are read here:
//!
//! * embeddings JSONL: `{"id": "...", "label": "...", "features": [..]}`
//! * frame-sequence JSONL: `{"id": "...", "label": "...", "frames": [[..], ..]}`
//! * labels manifest: `{"classes": [..], "counts": [..]}` with optional counts
//!
//! Blank lines in JSONL input are skipped but still counted, so error line
//! numbers match what an editor shows.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Ordered class names with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(Error::InvalidLabels(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, name) in classes.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidLabels(format!("class {i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidLabels(format!("duplicate class `{name}`")));
            }
        }
        Ok(Self { classes, index })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(String::as_str)
    }
}

/// Per-class training counts `N_c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDistribution {
    counts: Vec<u64>,
    total: u64,
    max_count: u64,
}

impl ClassDistribution {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidDistribution(format!(
                "class {c} has no samples"
            )));
        }
        let total = counts.iter().sum();
        let max_count = counts.iter().copied().max().unwrap_or(0);
        Ok(Self {
            counts,
            total,
            max_count,
        })
    }

    /// Counts the labels of a training split. Every class must occur.
    pub fn from_labels(
        labels: impl IntoIterator<Item = usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for label in labels {
            let slot = counts.get_mut(label).ok_or_else(|| {
                Error::InvalidDistribution(format!("label {label} outside {num_classes} classes"))
            })?;
            *slot += 1;
        }
        Self::new(counts)
    }

    /// `classes` counts falling geometrically from `max_count` to
    /// `max_count / ratio` (rounded, at least one).
    pub fn geometric(classes: usize, max_count: u64, ratio: f64) -> Result<Self> {
        if classes < 2 || ratio.is_nan() || ratio < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "geometric distribution needs >= 2 classes and ratio >= 1 (got {classes}, {ratio})"
            )));
        }
        let counts = (0..classes)
            .map(|c| {
                let frac = c as f64 / (classes - 1) as f64;
                ((max_count as f64) * ratio.powf(-frac)).round().max(1.0) as u64
            })
            .collect();
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    pub fn is_balanced(&self) -> bool {
        self.counts.iter().all(|&n| n == self.max_count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Fixed-dimension utterance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    samples: Vec<Sample>,
    dimension: usize,
}

impl EmbeddingDataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let dimension = first.features.len();
        if dimension == 0 {
            return Err(Error::Shape("feature vectors must be non-empty".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dimension {
                return Err(Error::DimensionMismatch {
                    line: i + 1,
                    expected: dimension,
                    found: s.features.len(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: s.id.clone(),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of `{}`", s.id)));
            }
        }
        Ok(Self { samples, dimension })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }
}

/// A variable-length `T x D` frame matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Array2<f64>,
    pub label: usize,
}

/// One model's decision on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub model_id: String,
    pub label: usize,
    pub probabilities: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.probabilities {
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "probabilities for `{}`/`{}` must be finite and non-negative",
                    self.sample_id, self.model_id
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "probabilities for `{}`/`{}` sum to {sum}",
                    self.sample_id, self.model_id
                )));
            }
            if self.label >= p.len() {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside {} probabilities",
                    self.label,
                    p.len()
                )));
            }
        }
        Ok(())
    }
}

/// Parsed labels manifest.
#[derive(Debug, Clone)]
pub struct LabelsManifest {
    pub labels: LabelSpace,
    pub counts: Option<ClassDistribution>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    classes: Vec<String>,
    #[serde(default)]
    counts: Option<Vec<u64>>,
}

pub fn parse_labels_manifest(text: &str) -> Result<LabelsManifest> {
    let raw: ManifestFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let labels = LabelSpace::new(raw.classes)?;
    let counts = match raw.counts {
        Some(c) if c.len() != labels.len() => {
            return Err(Error::InvalidDistribution(format!(
                "{} counts for {} classes",
                c.len(),
                labels.len()
            )))
        }
        Some(c) => Some(ClassDistribution::new(c)?),
        None => None,
    };
    Ok(LabelsManifest { labels, counts })
}

pub fn load_labels_manifest(path: impl AsRef<Path>) -> Result<LabelsManifest> {
    parse_labels_manifest(&read(path.as_ref())?)
}

pub fn write_labels_manifest(
    labels: &LabelSpace,
    counts: Option<&ClassDistribution>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("classes".into(), serde_json::json!(labels.classes()));
    if let Some(c) = counts {
        obj.insert("counts".into(), serde_json::json!(c.counts()));
    }
    let mut text = serde_json::to_string_pretty(&obj).expect("manifest serializes");
    text.push('\n');
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingLine {
    id: String,
    label: String,
    features: Vec<f64>,
}

#[derive(Serialize)]
struct EmbeddingLineRef<'a> {
    id: &'a str,
    label: &'a str,
    features: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    id: String,
    label: String,
    frames: Vec<Vec<f64>>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_line<'de, T: Deserialize<'de>>(line: usize, text: &'de str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

fn resolve_label(labels: &LabelSpace, line: usize, name: &str) -> Result<usize> {
    labels.id(name).ok_or_else(|| Error::UnknownLabel {
        line,
        label: name.to_string(),
    })
}

/// Parses embeddings JSONL. Insertion order is preserved.
pub fn parse_embeddings(text: &str, labels: &LabelSpace) -> Result<EmbeddingDataset> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut dimension = None;
    for (line, raw) in json_lines(text) {
        let rec: EmbeddingLine = parse_line(line, raw)?;
        let label = resolve_label(labels, line, &rec.label)?;
        let d = *dimension.get_or_insert(rec.features.len());
        if rec.features.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty feature vector".into(),
            });
        }
        if rec.features.len() != d {
            return Err(Error::DimensionMismatch {
                line,
                expected: d,
                found: rec.features.len(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId { line, id: rec.id });
        }
        samples.push(Sample {
            id: rec.id,
            features: rec.features,
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    EmbeddingDataset::new(samples)
}

pub fn load_embeddings(path: impl AsRef<Path>, labels: &LabelSpace) -> Result<EmbeddingDataset> {
    parse_embeddings(&read(path.as_ref())?, labels)
}

pub fn write_embeddings<W: Write>(
    dataset: &EmbeddingDataset,
    labels: &LabelSpace,
    mut out: W,
) -> Result<()> {
    for s in dataset.samples() {
        let name = labels.name(s.label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {} outside label space", s.label))
        })?;
        let line = EmbeddingLineRef {
            id: &s.id,
            label: name,
            features: &s.features,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io("<embeddings>", e.into()))?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<embeddings>", e))?;
    }
    Ok(())
}

pub fn save_embeddings(
    dataset: &EmbeddingDataset,
    labels: &LabelSpace,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_embeddings(dataset, labels, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses frame-sequence JSONL, truncating each sequence to its first
/// `max_frames` frames.
pub fn parse_frame_sequences(
    text: &str,
    labels: &LabelSpace,
    max_frames: usize,
) -> Result<Vec<FrameSequence>> {
    if max_frames == 0 {
        return Err(Error::InvalidArgument("max_frames must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut dimension = None;
    for (line, raw) in json_lines(text) {
        let rec: FrameLine = parse_line(line, raw)?;
        let label = resolve_label(labels, line, &rec.label)?;
        if rec.frames.is_empty() {
            return Err(Error::EmptyFrameSequence { line });
        }
        let d = *dimension.get_or_insert(rec.frames[0].len());
        if d == 0 {
            return Err(Error::Parse {
                line,
                message: "empty frame vector".into(),
            });
        }
        if let Some(bad) = rec.frames.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                line,
                expected: d,
                found: bad.len(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId { line, id: rec.id });
        }
        let t = rec.frames.len().min(max_frames);
        let flat: Vec<f64> = rec.frames.into_iter().take(t).flatten().collect();
        let frames = Array2::from_shape_vec((t, d), flat).expect("rows checked above");
        out.push(FrameSequence {
            id: rec.id,
            frames,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn load_frame_sequences(
    path: impl AsRef<Path>,
    labels: &LabelSpace,
    max_frames: usize,
) -> Result<Vec<FrameSequence>> {
    parse_frame_sequences(&read(path.as_ref())?, labels, max_frames)
}

pub fn write_frame_sequences<W: Write>(
    sequences: &[FrameSequence],
    labels: &LabelSpace,
    mut out: W,
) -> Result<()> {
    for s in sequences {
        let name = labels.name(s.label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {} outside label space", s.label))
        })?;
        let frames: Vec<Vec<f64>> = s.frames.rows().into_iter().map(|r| r.to_vec()).collect();
        let line = serde_json::json!({"id": s.id, "label": name, "frames": frames});
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io("<frames>", e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<frames>", e))?;
    }
    Ok(())
}

/// Isotropic unit-variance Gaussian clusters, one per class.
///
/// Class `c` draws from its own stream `(seed, Data, c)`: first a random
/// direction scaled to norm `separation` (the class mean), then its
/// samples in order. A class's data therefore depends only on the seed,
/// its index and its own count. Ids are `<class>-<index>`.
pub fn generate_synthetic(
    labels: &LabelSpace,
    counts: &ClassDistribution,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    let per_class = counts
        .counts()
        .iter()
        .map(|&n| n as usize)
        .collect::<Vec<_>>();
    let (all, _) = generate_split(
        labels,
        &per_class,
        &vec![0; per_class.len()],
        dim,
        separation,
        seed,
    )?;
    Ok(all)
}

/// Draws `train[c] + held_out[c]` samples per class from the same clusters
/// and splits each class's stream: the first `train[c]` go to the first
/// dataset, the rest to the second. The training part is identical to
/// [`generate_synthetic`] with the same counts.
pub fn generate_split(
    labels: &LabelSpace,
    train: &[usize],
    held_out: &[usize],
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be >= 1".into()));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    if train.len() != labels.len() || held_out.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "counts must have one entry per class ({})",
            labels.len()
        )));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (c, name) in labels.classes().iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Data, c as u64);
        let mut mean: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { separation / norm } else { 0.0 };
        mean.iter_mut().for_each(|v| *v *= scale);
        for k in 0..train[c] + held_out[c] {
            let features = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let sample = Sample {
                id: format!("{name}-{k:05}"),
                features,
                label: c,
            };
            if k < train[c] {
                first.push(sample);
            } else {
                second.push(sample);
            }
        }
    }
    let to_dataset = |s: Vec<Sample>| {
        if s.is_empty() {
            Ok(EmbeddingDataset {
                samples: s,
                dimension: dim,
            })
        } else {
            EmbeddingDataset::new(s)
        }
    };
    Ok((to_dataset(first)?, to_dataset(second)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> LabelSpace {
        LabelSpace::new(["a", "b"]).unwrap()
    }

    #[test]
    fn label_space_rejects_duplicates_and_singletons() {
        assert!(LabelSpace::new(["a"]).is_err());
        assert!(LabelSpace::new(["a", "a"]).is_err());
        let l = LabelSpace::new(["x", "y", "z"]).unwrap();
        assert_eq!(l.id("z"), Some(2));
        assert_eq!(l.name(1), Some("y"));
    }

    #[test]
    fn distribution_totals() {
        let d = ClassDistribution::new(vec![26, 1, 3]).unwrap();
        assert_eq!(d.total(), 30);
        assert_eq!(d.max_count(), 26);
        assert!(ClassDistribution::new(vec![3, 0]).is_err());
        let g = ClassDistribution::geometric(8, 260, 26.0).unwrap();
        assert_eq!(g.counts()[0], 260);
        assert_eq!(g.counts()[7], 10);
    }

    #[test]
    fn parses_two_lines() {
        let text = "{\"id\":\"u1\",\"label\":\"a\",\"features\":[1,2,3]}\n\
                    {\"id\":\"u2\",\"label\":\"b\",\"features\":[4,5,6]}\n";
        let ds = parse_embeddings(text, &two()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dimension(), 3);
        assert_eq!(ds.samples()[1].label, 1);
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_embeddings("", &two()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
        assert!(matches!(
            parse_embeddings("\n  \n", &two()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let text = "{\"id\":\"u1\",\"label\":\"a\",\"features\":[1,2,3]}\n\
                    {\"id\":\"u2\",\"label\":\"b\",\"features\":[4,5]}\n";
        match parse_embeddings(text, &two()) {
            Err(Error::DimensionMismatch {
                line,
                expected,
                found,
            }) => {
                assert_eq!((line, expected, found), (2, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_duplicate_id_and_malformed() {
        let unknown = "{\"id\":\"u1\",\"label\":\"zz\",\"features\":[1]}";
        assert!(matches!(
            parse_embeddings(unknown, &two()),
            Err(Error::UnknownLabel { line: 1, .. })
        ));
        let dup = "{\"id\":\"u1\",\"label\":\"a\",\"features\":[1]}\n\
                   {\"id\":\"u1\",\"label\":\"b\",\"features\":[2]}";
        assert!(matches!(
            parse_embeddings(dup, &two()),
            Err(Error::DuplicateId { line: 2, .. })
        ));
        let bad = "{\"id\":\"u1\",\"label\":\"a\",\"features\":[1]}\n\nnot json";
        assert!(matches!(
            parse_embeddings(bad, &two()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn frames_truncate_to_prefix() {
        let frames = |n: usize| {
            let rows: Vec<String> = (0..n).map(|i| format!("[{i},{i}]")).collect();
            rows.join(",")
        };
        let text = format!(
            "{{\"id\":\"s\",\"label\":\"a\",\"frames\":[{}]}}\n{{\"id\":\"l\",\"label\":\"b\",\"frames\":[{}]}}",
            frames(5),
            frames(12)
        );
        let seqs = parse_frame_sequences(&text, &two(), 10).unwrap();
        assert_eq!(seqs[0].frames.nrows(), 5);
        assert_eq!(seqs[1].frames.nrows(), 10);
        assert_eq!(seqs[1].frames[[9, 0]], 9.0);
    }

    #[test]
    fn empty_frame_sequence_rejected() {
        let text = "{\"id\":\"s\",\"label\":\"a\",\"frames\":[]}";
        let err = parse_frame_sequences(text, &two(), 10).unwrap_err();
        assert_eq!(err.to_string(), "line 1: empty frame sequence");
    }

    #[test]
    fn manifest_with_and_without_counts() {
        let m = parse_labels_manifest(r#"{"classes":["a","b"],"counts":[26,1]}"#).unwrap();
        assert_eq!(m.counts.unwrap().counts(), &[26, 1]);
        let m = parse_labels_manifest(r#"{"classes":["a","b"]}"#).unwrap();
        assert!(m.counts.is_none());
        assert!(parse_labels_manifest(r#"{"classes":["a","b"],"counts":[1]}"#).is_err());
    }

    #[test]
    fn synthetic_counts_and_zero_separation() {
        let labels = two();
        let dist = ClassDistribution::new(vec![26, 1]).unwrap();
        let ds = generate_synthetic(&labels, &dist, 4, 0.0, 3).unwrap();
        assert_eq!(ds.len(), 27);
        // with zero separation every class mean is the origin: the first draw
        // of each class equals the draw of a fresh stream with no offset
        for c in 0..2 {
            let mut rng = stream_rng(3, Stream::Data, c);
            let _: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let first: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let s = ds.samples().iter().find(|s| s.label == c as usize).unwrap();
            assert_eq!(s.features, first);
        }
    }

    #[test]
    fn class_streams_do_not_depend_on_other_counts() {
        let labels = two();
        let a = generate_synthetic(
            &labels,
            &ClassDistribution::new(vec![5, 3]).unwrap(),
            3,
            2.0,
            9,
        )
        .unwrap();
        let b = generate_synthetic(
            &labels,
            &ClassDistribution::new(vec![50, 3]).unwrap(),
            3,
            2.0,
            9,
        )
        .unwrap();
        let minority = |d: &EmbeddingDataset| {
            d.samples()
                .iter()
                .filter(|s| s.label == 1)
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(minority(&a), minority(&b));
    }

    #[test]
    fn split_training_part_matches_plain_generation() {
        let labels = two();
        let (train, val) = generate_split(&labels, &[6, 2], &[3, 3], 2, 1.5, 4).unwrap();
        let plain = generate_synthetic(
            &labels,
            &ClassDistribution::new(vec![6, 2]).unwrap(),
            2,
            1.5,
            4,
        )
        .unwrap();
        assert_eq!(train, plain);
        assert_eq!(val.len(), 6);
    }
}
