//! Domain types and on-disk formats shared by every other module.
//!
//! Times are snippet-indexed everywhere inside the library; seconds appear
//! only at the CLI boundary through `snippet_duration_sec`.
//!
//! On-disk layout of a corpus directory:
//! - `annotations.json` — classes, per-video points and (optionally) ground truth
//! - `features/<video_id>.bin` — raw little-endian f32, row-major T x D
//! - `features/<video_id>.json` — sidecar `{"T", "D", "snippet_duration_sec"}`

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One point annotation: a single labeled snippet inside an action instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub t: usize,
    pub label: usize,
}

/// Ground-truth action instance in snippet time. Evaluation-only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

/// One untrimmed video: snippet features plus its point annotations.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub video_id: String,
    /// T x D snippet feature matrix.
    pub features: Array2<f64>,
    pub snippet_duration_sec: f64,
    pub points: Vec<PointAnnotation>,
    gt_instances: Option<Vec<GtInstance>>,
}

/// Training-side view of a record. Ground truth is structurally absent, so
/// loss code cannot read it.
#[derive(Debug, Clone, Copy)]
pub struct TrainVideo<'a> {
    pub video_id: &'a str,
    pub features: &'a Array2<f64>,
    pub points: &'a [PointAnnotation],
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        features: Array2<f64>,
        snippet_duration_sec: f64,
        points: Vec<PointAnnotation>,
        gt_instances: Option<Vec<GtInstance>>,
    ) -> Self {
        VideoRecord {
            video_id: video_id.into(),
            features,
            snippet_duration_sec,
            points,
            gt_instances,
        }
    }

    pub fn num_snippets(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Ground-truth instances, for evaluation and reporting only.
    pub fn gt_instances(&self) -> Option<&[GtInstance]> {
        self.gt_instances.as_deref()
    }

    /// The view handed to training code: no ground truth.
    pub fn train_view(&self) -> TrainVideo<'_> {
        TrainVideo {
            video_id: &self.video_id,
            features: &self.features,
            points: &self.points,
        }
    }
}

/// Rank assigned to a proposal during instance-level learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProposalTag {
    Candidate,
    Rp,
    Pp,
    Np,
}

/// A temporal proposal in snippet time with its reliability score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score_oic: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_comp: Option<f64>,
    pub tag: ProposalTag,
}

impl Proposal {
    pub fn candidate(start: f64, end: f64, label: usize, score_oic: f64) -> Self {
        Proposal {
            start,
            end,
            label,
            score_oic,
            score_comp: None,
            tag: ProposalTag::Candidate,
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains_point(&self, t: usize) -> bool {
        self.start <= t as f64 && (t as f64) < self.end
    }

    /// Combined confidence after the instance stage.
    pub fn confidence(&self) -> f64 {
        self.score_oic + self.score_comp.unwrap_or(0.0)
    }
}

/// Final prediction tuple for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub confidence: f64,
}

fn default_tau() -> f64 {
    0.1
}
fn default_mu() -> f64 {
    0.999
}
fn default_lambda() -> f64 {
    1.0
}
fn default_theta1() -> f64 {
    0.95
}
fn default_theta2() -> f64 {
    0.1
}
fn default_theta_p() -> Vec<f64> {
    (0..=5).map(|i| i as f64 / 20.0).collect()
}
fn default_theta_a() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 100.0).collect()
}
fn default_epsilon() -> f64 {
    0.25
}
fn default_video_cls_threshold() -> f64 {
    0.5
}
fn default_n_rab() -> usize {
    2
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    16
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_nms_sigma() -> f64 {
    0.4
}
fn default_nms_min_score() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_true() -> bool {
    true
}

/// Training and inference hyperparameters. Loaded from a flat JSON file;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Prototype memory momentum.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Weight of the snippet-contrastive loss.
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    /// Weight of the boundary-regression loss.
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    /// Weight of the video-level classification loss.
    #[serde(default = "default_lambda")]
    pub lambda_video: f64,
    /// Attention threshold for pseudo-action expansion.
    #[serde(default = "default_theta1")]
    pub theta1: f64,
    /// Attention threshold for pseudo-background selection.
    #[serde(default = "default_theta2")]
    pub theta2: f64,
    /// Candidate-generation thresholds on fused class scores.
    #[serde(default = "default_theta_p")]
    pub theta_p: Vec<f64>,
    /// Negative-proposal thresholds on attention.
    #[serde(default = "default_theta_a")]
    pub theta_a: Vec<f64>,
    /// Boundary expansion ratio for flank regions and OIC outer regions.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_video_cls_threshold")]
    pub video_cls_threshold: f64,
    /// Number of attention blocks.
    #[serde(default = "default_n_rab")]
    pub n_rab: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "default_nms_sigma")]
    pub nms_sigma: f64,
    /// Detections rescored below this are dropped during soft-NMS.
    #[serde(default = "default_nms_min_score")]
    pub nms_min_score: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs_snippet: usize,
    #[serde(default = "default_epochs")]
    pub epochs_instance: usize,
    /// Sum the two contrastive fractions inside one log (false) or take two
    /// separate log terms (true).
    #[serde(default)]
    pub contra_split_logs: bool,
    /// Keep optimizing stage-1 parameters during the instance stage.
    #[serde(default)]
    pub joint_finetune: bool,
    #[serde(default = "default_true")]
    pub enable_rab: bool,
    #[serde(default = "default_true")]
    pub enable_contra: bool,
    #[serde(default = "default_true")]
    pub enable_reg: bool,
    #[serde(default = "default_true")]
    pub enable_score: bool,
    /// When off, completeness targets fall back to 1 for positive and 0 for
    /// negative proposals instead of IoU against reliable proposals.
    #[serde(default = "default_true")]
    pub enable_rp_matching: bool,
    #[serde(default = "default_true")]
    pub enable_np: bool,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("default config")
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {}", path.display(), e))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.mu > 0.0 && self.mu < 1.0) {
            problems.push(format!("mu must be in (0,1), got {}", self.mu));
        }
        if self.tau <= 0.0 {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("video_cls_threshold", self.video_cls_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must be in [0,1], got {v}"));
            }
        }
        for v in self.theta_p.iter().chain(self.theta_a.iter()) {
            if !(0.0..=1.0).contains(v) {
                problems.push(format!("thresholds must be in [0,1], got {v}"));
            }
        }
        if self.epsilon <= 0.0 {
            problems.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.nms_sigma <= 0.0 {
            problems.push(format!("nms_sigma must be positive, got {}", self.nms_sigma));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Digest of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureSidecar {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    snippet_duration_sec: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    num_classes: usize,
    class_names: Vec<String>,
    videos: Vec<AnnotationVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationVideo {
    video_id: String,
    points: Vec<PointAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<GtInstance>>,
}

/// A loaded corpus: class metadata plus validated records.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn feature_dim(&self) -> usize {
        self.videos.first().map(|v| v.feature_dim()).unwrap_or(0)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_features(feature_dir: &Path, video_id: &str) -> Result<(Array2<f64>, f64)> {
    let bin_path = feature_dir.join(format!("{video_id}.bin"));
    let sidecar_path = feature_dir.join(format!("{video_id}.json"));
    if !bin_path.exists() || !sidecar_path.exists() {
        return Err(Error::MissingFeatures {
            video_id: video_id.to_string(),
        });
    }
    let sidecar: FeatureSidecar = read_json(&sidecar_path)?;
    let mut file = fs::File::open(&bin_path).map_err(|source| Error::Io {
        path: bin_path.clone(),
        source,
    })?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|source| Error::Io {
        path: bin_path.clone(),
        source,
    })?;
    let expected = sidecar.t * sidecar.d * 4;
    if raw.len() != expected {
        return Err(Error::FeatureSize {
            video_id: video_id.to_string(),
            expected,
            found: raw.len(),
        });
    }
    let mut cursor = std::io::Cursor::new(raw);
    let mut data = Vec::with_capacity(sidecar.t * sidecar.d);
    for _ in 0..sidecar.t * sidecar.d {
        let v = cursor
            .read_f32::<LittleEndian>()
            .map_err(|source| Error::Io {
                path: bin_path.clone(),
                source,
            })?;
        data.push(v as f64);
    }
    let features = Array2::from_shape_vec((sidecar.t, sidecar.d), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((features, sidecar.snippet_duration_sec))
}

/// Loads and validates a corpus. Feature files are read in parallel; the
/// output order follows the annotation file.
pub fn load_corpus(feature_dir: &Path, annotation_file: &Path) -> Result<Corpus> {
    let ann: AnnotationFile = read_json(annotation_file)?;
    let records: Vec<Result<VideoRecord>> = ann
        .videos
        .par_iter()
        .map(|v| {
            let (features, snippet_duration_sec) = load_features(feature_dir, &v.video_id)?;
            let record = VideoRecord::new(
                v.video_id.clone(),
                features,
                snippet_duration_sec,
                v.points.clone(),
                v.gt.clone(),
            );
            let violations = validate_record(&record, ann.num_classes);
            if violations.is_empty() {
                Ok(record)
            } else {
                Err(Error::InvalidRecord {
                    video_id: v.video_id.clone(),
                    violations,
                })
            }
        })
        .collect();
    let mut videos = Vec::with_capacity(records.len());
    for r in records {
        videos.push(r?);
    }
    if let Some(first) = videos.first() {
        let d = first.feature_dim();
        for v in &videos {
            if v.feature_dim() != d {
                return Err(Error::DimMismatch {
                    video_id: v.video_id.clone(),
                    expected: d,
                    found: v.feature_dim(),
                });
            }
        }
    }
    if ann.class_names.len() != ann.num_classes {
        return Err(Error::Config(format!(
            "annotation file declares {} classes but names {}",
            ann.num_classes,
            ann.class_names.len()
        )));
    }
    Ok(Corpus {
        num_classes: ann.num_classes,
        class_names: ann.class_names,
        videos,
    })
}

/// Writes a corpus to `dir/annotations.json` + `dir/features/`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|source| Error::Io {
        path: feature_dir.clone(),
        source,
    })?;
    for v in &corpus.videos {
        let bin_path = feature_dir.join(format!("{}.bin", v.video_id));
        let mut buf = Vec::with_capacity(v.features.len() * 4);
        for x in v.features.iter() {
            buf.write_f32::<LittleEndian>(*x as f32)
                .map_err(|source| Error::Io {
                    path: bin_path.clone(),
                    source,
                })?;
        }
        let mut f = fs::File::create(&bin_path).map_err(|source| Error::Io {
            path: bin_path.clone(),
            source,
        })?;
        f.write_all(&buf).map_err(|source| Error::Io {
            path: bin_path.clone(),
            source,
        })?;
        let sidecar = FeatureSidecar {
            t: v.num_snippets(),
            d: v.feature_dim(),
            snippet_duration_sec: v.snippet_duration_sec,
        };
        write_json(&feature_dir.join(format!("{}.json", v.video_id)), &sidecar)?;
    }
    let ann = AnnotationFile {
        num_classes: corpus.num_classes,
        class_names: corpus.class_names.clone(),
        videos: corpus
            .videos
            .iter()
            .map(|v| AnnotationVideo {
                video_id: v.video_id.clone(),
                points: v.points.clone(),
                gt: v.gt_instances.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("annotations.json"), &ann)
}

/// Convenience: load a corpus from a directory produced by [`save_corpus`].
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    load_corpus(&dir.join("features"), &dir.join("annotations.json"))
}

/// Returns every invariant violation of the record; empty means valid.
pub fn validate_record(r: &VideoRecord, num_classes: usize) -> Vec<String> {
    let mut out = Vec::new();
    let t = r.num_snippets();
    if t < 1 {
        out.push("T must be >= 1".to_string());
    }
    if r.feature_dim() < 1 {
        out.push("D must be >= 1".to_string());
    }
    if !(r.snippet_duration_sec > 0.0) {
        out.push(format!(
            "snippet_duration_sec must be positive, got {}",
            r.snippet_duration_sec
        ));
    }
    if r.features.iter().any(|x| !x.is_finite()) {
        out.push("features contain non-finite values".to_string());
    }
    for (i, p) in r.points.iter().enumerate() {
        if p.t >= t {
            out.push(format!("point {} index {} out of [0,{})", i, p.t, t));
        }
        if p.label >= num_classes {
            out.push(format!(
                "point {} label {} out of [0,{})",
                i, p.label, num_classes
            ));
        }
    }
    for w in r.points.windows(2) {
        if w[1].t <= w[0].t {
            out.push(format!(
                "points not strictly increasing: {} then {}",
                w[0].t, w[1].t
            ));
        }
    }
    if let Some(gts) = &r.gt_instances {
        for (i, g) in gts.iter().enumerate() {
            if !(g.start >= 0.0 && g.start < g.end && g.end <= t as f64) {
                out.push(format!(
                    "gt instance {} violates 0 <= start < end <= T: [{}, {})",
                    i, g.start, g.end
                ));
            }
            if g.label >= num_classes {
                out.push(format!(
                    "gt instance {} label {} out of [0,{})",
                    i, g.label, num_classes
                ));
            }
        }
    }
    out
}

/// Digest over annotation and feature bytes, stable across platforms.
pub fn corpus_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let ann_path = dir.join("annotations.json");
    let mut h = Sha256::new();
    let ann_bytes = fs::read(&ann_path).map_err(|source| Error::Io {
        path: ann_path.clone(),
        source,
    })?;
    h.update(&ann_bytes);
    let ann: AnnotationFile = read_json(&ann_path)?;
    for v in &ann.videos {
        for ext in ["bin", "json"] {
            let p = dir.join("features").join(format!("{}.{ext}", v.video_id));
            let bytes = fs::read(&p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?;
            h.update(&bytes);
        }
    }
    Ok(hex_string(&h.finalize()))
}
