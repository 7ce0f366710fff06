//! `hrpro` command line: corpus generation, two-stage training, inference,
//! evaluation, visualization, and the end-to-end pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use hrpro_core::ckpt::Checkpoint;
use hrpro_core::data::{load_corpus_dir, save_corpus, Config};
use hrpro_core::error::{Error, Result};
use hrpro_core::eval::{evaluate_map, parse_thresholds, EvalReport};
use hrpro_core::infer::infer_corpus;
use hrpro_core::pipeline::{
    generate_split, gt_map, read_detections_jsonl, run_ablation_table, run_pipeline,
    write_detections_jsonl, AblationRow,
};
use hrpro_core::synth::{generate_corpus, GenSpec};
use hrpro_core::train_instance::train_instance_stage;
use hrpro_core::train_snippet::train_snippet_stage;

#[derive(Parser)]
#[command(name = "hrpro", version, about = "Point-supervised temporal action localization")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (directory for most subcommands, file for infer/viz).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a generator spec.
    GenData {
        /// Generator spec JSON.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train the snippet-level stage.
    TrainSnippet {
        /// Corpus directory (annotations.json + features/).
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the instance-level stage on top of a snippet checkpoint.
    TrainInstance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        snippet_ckpt: PathBuf,
    },
    /// Run inference and write detections (seconds) as JSON lines.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate detections against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// lo:hi:step (inclusive) or a comma list.
        #[arg(long, default_value = "0.1:0.7:0.1")]
        thresholds: String,
        /// Report JSON path (defaults to report.json next to the detections).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render an SVG timeline of one video.
    Viz {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        /// Checkpoint providing the score curves.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// gen-data (optional) -> train-snippet -> train-instance -> infer -> eval.
    Pipeline {
        /// Generate train/test splits from this spec instead of loading them.
        #[arg(long)]
        gen_spec: Option<PathBuf>,
        /// Test-split size when generating (default: half the train videos).
        #[arg(long)]
        test_videos: Option<usize>,
        #[arg(long, required_unless_present = "gen_spec")]
        data_train: Option<PathBuf>,
        #[arg(long, required_unless_present = "gen_spec")]
        data_test: Option<PathBuf>,
        #[arg(long, default_value = "0.1:0.7:0.1")]
        thresholds: String,
        /// Run an ablation matrix instead of a single configuration
        /// (supported: "table3").
        #[arg(long)]
        ablate: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_report(report: &EvalReport) {
    print!("{:<16}", "class \\ tIoU");
    for t in &report.thresholds {
        print!("{:>8.2}", t);
    }
    println!();
    for (c, name) in report.class_names.iter().enumerate() {
        print!("{:<16}", name);
        for ap in &report.per_class_ap[c] {
            match ap {
                Some(v) => print!("{:>8.3}", v),
                None => print!("{:>8}", "-"),
            }
        }
        println!();
    }
    print!("{:<16}", "mAP");
    for v in &report.map_per_threshold {
        print!("{:>8.3}", v);
    }
    println!();
    for (range, v) in &report.average_map {
        println!("avg[{range}] = {v:.4}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { spec } => {
            let mut spec = GenSpec::from_file(spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let corpus = generate_corpus(&spec)?;
            let dir = out_dir(cli, "data");
            save_corpus(&corpus, &dir)?;
            println!(
                "wrote {} videos, {} classes to {}",
                corpus.videos.len(),
                corpus.num_classes,
                dir.display()
            );
            Ok(())
        }
        Command::TrainSnippet { data } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus_dir(data)?;
            let dir = out_dir(cli, "ckpt");
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            let (net, memory, stats) = train_snippet_stage(&corpus, &cfg)?;
            let mut log_lines = String::new();
            for s in &stats {
                info!(
                    "epoch {}: loss {:.5} (base {:.5}, contra {:.5})",
                    s.epoch, s.loss, s.loss_base, s.loss_contra
                );
                log_lines.push_str(&serde_json::to_string(s).expect("serializable"));
                log_lines.push('\n');
            }
            let log_path = dir.join("train_snippet_log.jsonl");
            std::fs::write(&log_path, log_lines).map_err(|source| Error::Io {
                path: log_path,
                source,
            })?;
            let ckpt_path = dir.join("snippet_ckpt.json");
            Checkpoint::new(cfg, net, &memory).save(&ckpt_path)?;
            println!("snippet checkpoint: {}", ckpt_path.display());
            Ok(())
        }
        Command::TrainInstance { data, snippet_ckpt } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus_dir(data)?;
            let loaded = Checkpoint::load(snippet_ckpt)?;
            loaded.check_architecture(&cfg)?;
            let dir = out_dir(cli, "ckpt");
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            let (heads, stats) =
                train_instance_stage(&corpus, loaded.snippet_net.clone(), loaded.memory(), &cfg)?;
            let mut log_lines = String::new();
            for s in &stats {
                info!(
                    "epoch {}: loss {:.5} (score {:.5}, reg {:.5})",
                    s.epoch, s.loss, s.loss_score, s.loss_reg
                );
                log_lines.push_str(&serde_json::to_string(s).expect("serializable"));
                log_lines.push('\n');
            }
            let log_path = dir.join("train_instance_log.jsonl");
            std::fs::write(&log_path, log_lines).map_err(|source| Error::Io {
                path: log_path,
                source,
            })?;
            let memory = loaded.memory();
            let mut full = Checkpoint::new(cfg, loaded.snippet_net, &memory);
            full.instance_heads = Some(heads);
            let ckpt_path = dir.join("full_ckpt.json");
            full.save(&ckpt_path)?;
            println!("full checkpoint: {}", ckpt_path.display());
            Ok(())
        }
        Command::Infer { ckpt, data } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus_dir(data)?;
            let loaded = Checkpoint::load(ckpt)?;
            let memory = loaded.memory();
            let per_video = infer_corpus(
                &corpus.videos,
                &loaded.snippet_net,
                &memory,
                loaded.instance_heads.as_ref(),
                &cfg,
            )?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("dets.jsonl"));
            write_detections_jsonl(&out, &per_video, &corpus)?;
            let n: usize = per_video.iter().map(|(_, d)| d.len()).sum();
            println!("{n} detections -> {}", out.display());
            Ok(())
        }
        Command::Eval {
            dets,
            data,
            thresholds,
            report,
        } => {
            let corpus = load_corpus_dir(data)?;
            let det_map = read_detections_jsonl(dets, &corpus)?;
            let gts = gt_map(&corpus);
            let thresholds = parse_thresholds(thresholds)?;
            let result = evaluate_map(&det_map, &gts, &corpus.class_names, &thresholds);
            print_report(&result);
            let report_path = report.clone().unwrap_or_else(|| {
                dets.parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("report.json")
            });
            let text = serde_json::to_string_pretty(&result).expect("serializable");
            std::fs::write(&report_path, text).map_err(|source| Error::Io {
                path: report_path.clone(),
                source,
            })?;
            println!("report: {}", report_path.display());
            Ok(())
        }
        Command::Viz {
            dets,
            data,
            video,
            ckpt,
        } => {
            let cfg = load_config(cli)?;
            let corpus = load_corpus_dir(data)?;
            let record = corpus
                .videos
                .iter()
                .find(|v| &v.video_id == video)
                .ok_or_else(|| Error::Config(format!("video '{video}' not in corpus")))?;
            let det_map = read_detections_jsonl(dets, &corpus)?;
            let loaded = Checkpoint::load(ckpt)?;
            let outputs = hrpro_core::model::snippet_outputs(
                &loaded.snippet_net,
                &record.features,
                loaded.memory().prototypes(),
                cfg.enable_rab,
            );
            let empty = Vec::new();
            let dets_for_video = det_map.get(video).unwrap_or(&empty);
            let svg = hrpro_core::viz::render_timeline(
                record,
                &outputs,
                dets_for_video,
                &corpus.class_names,
                24,
            );
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("{video}.svg")));
            std::fs::write(&out, svg).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            println!("timeline: {}", out.display());
            Ok(())
        }
        Command::Pipeline {
            gen_spec,
            test_videos,
            data_train,
            data_test,
            thresholds,
            ablate,
        } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, "out");
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            let thresholds = parse_thresholds(thresholds)?;
            let (train_dir, test_dir) = match gen_spec {
                Some(spec_path) => {
                    let mut spec = GenSpec::from_file(spec_path)?;
                    if let Some(seed) = cli.seed {
                        spec.seed = seed;
                    }
                    let n_test = test_videos.unwrap_or((spec.n_videos / 2).max(1));
                    generate_split(&spec, n_test, &dir)?
                }
                None => (
                    data_train.clone().expect("clap enforces data-train"),
                    data_test.clone().expect("clap enforces data-test"),
                ),
            };
            match ablate.as_deref() {
                Some("table3") => {
                    let results = run_ablation_table(
                        &cfg,
                        &train_dir,
                        &test_dir,
                        &dir,
                        &thresholds,
                        &AblationRow::TABLE,
                    )?;
                    println!("{:<18}{:>12}", "configuration", "avg[0.1:0.7]");
                    for r in &results {
                        let avg = r.average_map.get("0.1:0.7").copied().unwrap_or(f64::NAN);
                        println!("{:<18}{:>12.4}", r.name, avg);
                    }
                    Ok(())
                }
                Some(other) => Err(Error::Config(format!(
                    "unknown ablation matrix '{other}' (supported: table3)"
                ))),
                None => {
                    let outcome = run_pipeline(&cfg, &train_dir, &test_dir, &dir, &thresholds)?;
                    print_report(&outcome.report);
                    println!("manifest: {}", dir.join("manifest.json").display());
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(workers) = std::env::var("HRPRO_NUM_WORKERS") {
        match workers.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid HRPRO_NUM_WORKERS='{workers}'"),
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
