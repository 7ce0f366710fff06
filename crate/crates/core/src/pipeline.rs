//! End-to-end orchestration: corpus generation, the two training stages,
//! inference, evaluation, and a reproducibility manifest. Also the ablation
//! matrix runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ckpt::Checkpoint;
use crate::data::{corpus_digest, load_corpus_dir, save_corpus, Config, Corpus, Detection};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, DetectionMap, EvalReport, GtMap};
use crate::infer::infer_corpus;
use crate::synth::GenSpec;
use crate::train_instance::{train_instance_stage, InstanceEpochStats};
use crate::train_snippet::{train_snippet_stage, SnippetEpochStats};

/// One detection line of `dets.jsonl`; times in seconds at this boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionLine {
    pub video_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub label: usize,
    pub confidence: f64,
}

pub fn write_detections_jsonl(
    path: &Path,
    per_video: &[(String, Vec<Detection>)],
    corpus: &Corpus,
) -> Result<()> {
    let durations: BTreeMap<&str, f64> = corpus
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.snippet_duration_sec))
        .collect();
    let mut out = String::new();
    for (video_id, dets) in per_video {
        let dur = durations.get(video_id.as_str()).copied().unwrap_or(1.0);
        for d in dets {
            let line = DetectionLine {
                video_id: video_id.clone(),
                start_sec: d.start * dur,
                end_sec: d.end * dur,
                label: d.label,
                confidence: d.confidence,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads detections back into snippet units using each video's duration.
pub fn read_detections_jsonl(path: &Path, corpus: &Corpus) -> Result<DetectionMap> {
    let durations: BTreeMap<&str, f64> = corpus
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.snippet_duration_sec))
        .collect();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map = DetectionMap::new();
    for v in &corpus.videos {
        map.entry(v.video_id.clone()).or_default();
    }
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: DetectionLine = serde_json::from_str(line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let dur = durations
            .get(parsed.video_id.as_str())
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown video '{}'", parsed.video_id)))?;
        map.entry(parsed.video_id.clone()).or_default().push(Detection {
            start: parsed.start_sec / dur,
            end: parsed.end_sec / dur,
            label: parsed.label,
            confidence: parsed.confidence,
        });
    }
    Ok(map)
}

pub fn gt_map(corpus: &Corpus) -> GtMap {
    corpus
        .videos
        .iter()
        .map(|v| {
            (
                v.video_id.clone(),
                v.gt_instances().map(<[_]>::to_vec).unwrap_or_default(),
            )
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = String::new();
    for row in rows {
        buf.push_str(&serde_json::to_string(row).expect("serializable"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything needed to reproduce a run: config and its hash, seed, data
/// digests, artifact paths, and the final evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Config,
    pub config_hash: String,
    pub seed: u64,
    pub data_digest_train: String,
    pub data_digest_test: String,
    pub snippet_checkpoint: PathBuf,
    pub full_checkpoint: Option<PathBuf>,
    pub detections: PathBuf,
    pub report: PathBuf,
    pub map_per_threshold: Vec<f64>,
    pub average_map: BTreeMap<String, f64>,
}

pub struct PipelineOutcome {
    pub report: EvalReport,
    pub manifest: Manifest,
    pub snippet_stats: Vec<SnippetEpochStats>,
    pub instance_stats: Vec<InstanceEpochStats>,
}

/// Generates a train/test corpus pair under `out_dir/data/{train,test}`.
/// The test corpus derives its seed from the train seed so the two splits
/// are disjoint by construction.
pub fn generate_split(spec: &GenSpec, n_test_videos: usize, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let train_dir = out_dir.join("data").join("train");
    let test_dir = out_dir.join("data").join("test");
    let train = crate::synth::generate_corpus(spec)?;
    let mut test_spec = spec.clone();
    test_spec.n_videos = n_test_videos;
    test_spec.seed = spec.seed ^ 0xA5A5_5A5A;
    let test = crate::synth::generate_corpus(&test_spec)?;
    save_corpus(&train, &train_dir)?;
    save_corpus(&test, &test_dir)?;
    Ok((train_dir, test_dir))
}

/// Runs train-snippet -> train-instance -> infer -> eval, writing all
/// artifacts under `out_dir`. Stage 2 is skipped entirely when both of its
/// losses are disabled (the snippet-only ablation rows). Re-running with
/// identical inputs reproduces identical artifacts.
pub fn run_pipeline(
    config: &Config,
    train_dir: &Path,
    test_dir: &Path,
    out_dir: &Path,
    thresholds: &[f64],
) -> Result<PipelineOutcome> {
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    config.validate().map_err(|e| Error::stage("config", e))?;

    let train_corpus =
        load_corpus_dir(train_dir).map_err(|e| Error::stage("load-train", e))?;
    let test_corpus = load_corpus_dir(test_dir).map_err(|e| Error::stage("load-test", e))?;

    // Stage 1.
    let (net, memory, snippet_stats) =
        train_snippet_stage(&train_corpus, config).map_err(|e| Error::stage("train-snippet", e))?;
    let snippet_ckpt_path = out_dir.join("snippet_ckpt.json");
    let snippet_ckpt = Checkpoint::new(config.clone(), net.clone(), &memory);
    snippet_ckpt.save(&snippet_ckpt_path)?;
    write_jsonl(&out_dir.join("train_snippet_log.jsonl"), &snippet_stats)?;

    // Stage 2 (optional).
    let run_stage2 = config.enable_score || config.enable_reg;
    let (heads, instance_stats) = if run_stage2 {
        let (heads, stats) = train_instance_stage(&train_corpus, net.clone(), memory.clone(), config)
            .map_err(|e| Error::stage("train-instance", e))?;
        write_jsonl(&out_dir.join("train_instance_log.jsonl"), &stats)?;
        (Some(heads), stats)
    } else {
        (None, Vec::new())
    };
    let full_ckpt_path = if let Some(heads) = &heads {
        let mut ckpt = Checkpoint::new(config.clone(), net.clone(), &memory);
        ckpt.instance_heads = Some(heads.clone());
        let path = out_dir.join("full_ckpt.json");
        ckpt.save(&path)?;
        Some(path)
    } else {
        None
    };

    // Inference on the test split.
    let per_video = infer_corpus(&test_corpus.videos, &net, &memory, heads.as_ref(), config)
        .map_err(|e| Error::stage("infer", e))?;
    let dets_path = out_dir.join("dets.jsonl");
    write_detections_jsonl(&dets_path, &per_video, &test_corpus)?;

    // Evaluation.
    let dets: DetectionMap = per_video.into_iter().collect();
    let gts = gt_map(&test_corpus);
    let report = evaluate_map(&dets, &gts, &test_corpus.class_names, thresholds);
    let report_path = out_dir.join("report.json");
    write_json_file(&report_path, &report)?;

    let manifest = Manifest {
        config: config.clone(),
        config_hash: config.digest(),
        seed: config.seed,
        data_digest_train: corpus_digest(train_dir)?,
        data_digest_test: corpus_digest(test_dir)?,
        snippet_checkpoint: snippet_ckpt_path,
        full_checkpoint: full_ckpt_path,
        detections: dets_path,
        report: report_path,
        map_per_threshold: report.map_per_threshold.clone(),
        average_map: report.average_map.clone(),
    };
    write_json_file(&out_dir.join("manifest.json"), &manifest)?;

    Ok(PipelineOutcome {
        report,
        manifest,
        snippet_stats,
        instance_stats,
    })
}

/// The ablation matrix: component toggles mirroring the snippet-level and
/// instance-level rows of the component study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Base,
    BaseContra,
    BaseContraRab,
    FullNoReg,
    FullNoScore,
    FullNoRp,
    FullNoNp,
    Full,
}

impl AblationRow {
    pub const TABLE: [AblationRow; 8] = [
        AblationRow::Base,
        AblationRow::BaseContra,
        AblationRow::BaseContraRab,
        AblationRow::FullNoReg,
        AblationRow::FullNoScore,
        AblationRow::FullNoRp,
        AblationRow::FullNoNp,
        AblationRow::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationRow::Base => "base",
            AblationRow::BaseContra => "base+contra",
            AblationRow::BaseContraRab => "base+contra+rab",
            AblationRow::FullNoReg => "full-no-reg",
            AblationRow::FullNoScore => "full-no-score",
            AblationRow::FullNoRp => "full-no-rp",
            AblationRow::FullNoNp => "full-no-np",
            AblationRow::Full => "full",
        }
    }

    /// Applies the row's toggles to a fully-enabled base config.
    pub fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        cfg.enable_rab = true;
        cfg.enable_contra = true;
        cfg.enable_score = true;
        cfg.enable_reg = true;
        cfg.enable_rp_matching = true;
        cfg.enable_np = true;
        match self {
            AblationRow::Base => {
                cfg.enable_contra = false;
                cfg.enable_rab = false;
                cfg.enable_score = false;
                cfg.enable_reg = false;
            }
            AblationRow::BaseContra => {
                cfg.enable_rab = false;
                cfg.enable_score = false;
                cfg.enable_reg = false;
            }
            AblationRow::BaseContraRab => {
                cfg.enable_score = false;
                cfg.enable_reg = false;
            }
            AblationRow::FullNoReg => cfg.enable_reg = false,
            AblationRow::FullNoScore => cfg.enable_score = false,
            AblationRow::FullNoRp => cfg.enable_rp_matching = false,
            AblationRow::FullNoNp => cfg.enable_np = false,
            AblationRow::Full => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub name: String,
    pub map_per_threshold: Vec<f64>,
    pub average_map: BTreeMap<String, f64>,
}

/// Runs the requested ablation rows on the same data and seed, writing each
/// run under `out_dir/<row name>/` plus a comparative `ablation.json`.
pub fn run_ablation_table(
    base_config: &Config,
    train_dir: &Path,
    test_dir: &Path,
    out_dir: &Path,
    thresholds: &[f64],
    rows: &[AblationRow],
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let cfg = row.apply(base_config);
        let row_dir = out_dir.join(row.name());
        let outcome = run_pipeline(&cfg, train_dir, test_dir, &row_dir, thresholds)?;
        results.push(AblationResult {
            row: *row,
            name: row.name().to_string(),
            map_per_threshold: outcome.report.map_per_threshold,
            average_map: outcome.report.average_map,
        });
    }
    write_json_file(&out_dir.join("ablation.json"), &results)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{GenSpec, PointDistribution};

    fn tiny_spec(seed: u64) -> GenSpec {
        GenSpec {
            n_videos: 10,
            n_classes: 2,
            t_range: (40, 60),
            d: 12,
            instances_per_video: (2, 3),
            min_gap: 4,
            class_separation: 1.0,
            noise_sigma: 1.0,
            point_distribution: PointDistribution::Gaussian,
            seed,
        }
    }

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.lr = 8e-3;
        cfg.batch_size = 4;
        cfg.epochs_snippet = 10;
        cfg.epochs_instance = 10;
        cfg.seed = 42;
        cfg
    }

    #[test]
    fn pipeline_produces_all_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (train_dir, test_dir) = generate_split(&tiny_spec(1), 4, dir.path()).unwrap();
        let cfg = tiny_config();
        let thresholds: Vec<f64> = (1..=7).map(|i| i as f64 / 10.0).collect();

        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        let a = run_pipeline(&cfg, &train_dir, &test_dir, &out_a, &thresholds).unwrap();
        let b = run_pipeline(&cfg, &train_dir, &test_dir, &out_b, &thresholds).unwrap();

        for name in [
            "snippet_ckpt.json",
            "full_ckpt.json",
            "dets.jsonl",
            "report.json",
            "train_snippet_log.jsonl",
            "train_instance_log.jsonl",
        ] {
            let fa = std::fs::read(out_a.join(name)).unwrap();
            let fb = std::fs::read(out_b.join(name)).unwrap();
            assert!(!fa.is_empty(), "{name} empty");
            assert_eq!(fa, fb, "{name} differs between identical runs");
        }
        assert_eq!(a.report.map_per_threshold, b.report.map_per_threshold);
        assert!(a.manifest.average_map.contains_key("0.1:0.7"));
        assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
        assert_eq!(a.manifest.data_digest_train, b.manifest.data_digest_train);
    }

    #[test]
    fn detections_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = crate::synth::generate_corpus(&tiny_spec(2)).unwrap();
        let per_video: Vec<(String, Vec<Detection>)> = vec![(
            corpus.videos[0].video_id.clone(),
            vec![Detection {
                start: 3.0,
                end: 9.5,
                label: 1,
                confidence: 1.25,
            }],
        )];
        let path = dir.path().join("dets.jsonl");
        write_detections_jsonl(&path, &per_video, &corpus).unwrap();
        let map = read_detections_jsonl(&path, &corpus).unwrap();
        let d = &map[&corpus.videos[0].video_id][0];
        assert!((d.start - 3.0).abs() < 1e-9);
        assert!((d.end - 9.5).abs() < 1e-9);
        assert_eq!(d.label, 1);
    }

    #[test]
    fn snippet_only_rows_skip_stage_two() {
        let dir = tempfile::tempdir().unwrap();
        let (train_dir, test_dir) = generate_split(&tiny_spec(3), 3, dir.path()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs_snippet = 3;
        let cfg = AblationRow::Base.apply(&cfg);
        let out = dir.path().join("base_run");
        let outcome = run_pipeline(&cfg, &train_dir, &test_dir, &out, &[0.5]).unwrap();
        assert!(outcome.manifest.full_checkpoint.is_none());
        assert!(!out.join("full_ckpt.json").exists());
        assert!(out.join("report.json").exists());
    }
}
