//! Command-line entry points: `synth`, `train`, `segment`, `eval`, and
//! `pipeline` chaining all four. Every command reads one key=value config
//! file; flags override it, and the effective configuration is echoed next
//! to the outputs so runs are diffable and repeatable.
//!
//! Exit codes: 0 success, 1 usage or missing-input errors, 2 numeric
//! failures during computation.

use std::path::{Path, PathBuf};

use crate::config::{apply_ablation, RunConfig};
use crate::dataio::{generate_synthetic, load_dataset, save_dataset, DatasetManifest};
use crate::decode::{segment_dataset, segmentation_csv, segmentation_svg, Segmentation, SegmentationSet};
use crate::eval::{evaluate, report_json, MetricReport};
use crate::model::{load_checkpoint, ModelParams};
use crate::training::{train, training_log_csv, TrainResult};
use crate::{Error, Result};

const USAGE: &str = "usage: actionseg <synth|train|segment|eval|pipeline> --config FILE \
[--seed N] [--out DIR] [--ablate NAME] [--tau F] [--svg] [--kprime N] [--k N] [--mof-bg]";

pub fn run_from_env() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args)
}

/// Parse arguments, execute, and map errors to exit codes.
pub fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let strs: Vec<&str> = args.iter().map(|a| a.as_ref()).collect();
    match execute(&strs) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(args: &[&str]) -> Result<()> {
    let command = match args.first() {
        Some(&c) => c,
        None => return Err(Error::Config(USAGE.into())),
    };
    let config = parse_flags(&args[1..])?;
    match command {
        "synth" => cmd_synth(&config).map(|_| ()),
        "train" => cmd_train(&config).map(|_| ()),
        "segment" => cmd_segment(&config).map(|_| ()),
        "eval" => cmd_eval(&config).map(|_| ()),
        "pipeline" => cmd_pipeline(&config),
        other => Err(Error::Config(format!("unknown command `{other}`\n{USAGE}"))),
    }
}

fn parse_flags(args: &[&str]) -> Result<RunConfig> {
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut ablations: Vec<String> = Vec::new();
    let mut iter = args.iter().peekable();
    while let Some(&arg) = iter.next() {
        let mut take_value = |name: &str| -> Result<String> {
            iter.next()
                .map(|v| v.to_string())
                .ok_or_else(|| Error::Config(format!("flag {name} needs a value\n{USAGE}")))
        };
        match arg {
            "--config" => config_path = Some(PathBuf::from(take_value("--config")?)),
            "--seed" => overrides.push(("seed".into(), take_value("--seed")?)),
            "--out" => overrides.push(("out_dir".into(), take_value("--out")?)),
            "--tau" => overrides.push(("eval.tau".into(), take_value("--tau")?)),
            "--kprime" => {
                overrides.push(("decode.group_count".into(), take_value("--kprime")?))
            }
            "--k" => {
                overrides.push(("decode.actions_per_group".into(), take_value("--k")?))
            }
            "--svg" => overrides.push(("svg".into(), "true".into())),
            "--mof-bg" => overrides.push(("print_mof_bg".into(), "true".into())),
            "--ablate" => ablations.push(take_value("--ablate")?),
            other => return Err(Error::Config(format!("unknown flag `{other}`\n{USAGE}"))),
        }
    }
    let path = config_path.ok_or_else(|| Error::Config(format!("--config is required\n{USAGE}")))?;
    let mut config = RunConfig::load(&path)?;
    for (key, value) in overrides {
        config.set(&key, &value)?;
    }
    for name in ablations {
        apply_ablation(&mut config, &name)?;
    }
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), message: e.to_string() })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })
}

/// Echo the effective configuration next to the outputs.
fn echo_config(config: &RunConfig) -> Result<()> {
    ensure_dir(&config.out_dir)?;
    write_file(&config.out_dir.join("run_config.txt"), &config.to_text())
}

pub fn cmd_synth(config: &RunConfig) -> Result<DatasetManifest> {
    let manifest = generate_synthetic(&config.synth_config())?;
    let dir = config.dataset_dir();
    ensure_dir(&dir)?;
    save_dataset(&manifest, &dir)?;
    echo_config(config)?;
    println!(
        "wrote dataset: {} videos, {} activities, {} classes -> {}",
        manifest.videos(),
        manifest.activity_count,
        manifest.class_count,
        dir.display()
    );
    Ok(manifest)
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainResult> {
    let manifest = load_dataset(&config.dataset_dir(), Path::new("manifest.csv"))?;
    train_manifest(config, &manifest)
}

fn train_manifest(config: &RunConfig, manifest: &DatasetManifest) -> Result<TrainResult> {
    ensure_dir(&config.out_dir)?;
    let backbone = config.backbone_config(manifest.feature_dim);
    let result = train(manifest, backbone, config.train_config(), Some(&config.out_dir))?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    let mut log_text = String::new();
    for line in config.to_text().lines() {
        log_text.push_str("# ");
        log_text.push_str(line);
        log_text.push('\n');
    }
    log_text.push_str(&training_log_csv(&result.log));
    write_file(&config.out_dir.join("training_log.csv"), &log_text)?;
    echo_config(config)?;
    if let Some(last) = result.log.last() {
        println!(
            "trained {} epochs; final loss {:.4} (global {:.4}, activity {:.4}, video {:.4})",
            result.log.len(),
            last.loss_total,
            last.loss_global,
            last.loss_activity,
            last.loss_video
        );
    } else {
        println!("trained 0 epochs (initialization only)");
    }
    println!("checkpoint: {}", config.out_dir.join("checkpoint_final.ckpt").display());
    Ok(result)
}

pub fn cmd_segment(config: &RunConfig) -> Result<SegmentationSet> {
    let manifest = load_dataset(&config.dataset_dir(), Path::new("manifest.csv"))?;
    let ckpt_path =
        config.checkpoint.clone().unwrap_or_else(|| config.out_dir.join("checkpoint_final.ckpt"));
    if !ckpt_path.exists() {
        return Err(Error::Io {
            path: ckpt_path,
            message: "checkpoint not found; train first or set checkpoint= in the config".into(),
        });
    }
    let params = load_checkpoint(&ckpt_path)?;
    segment_manifest(config, &manifest, &params)
}

fn segment_manifest(
    config: &RunConfig,
    manifest: &DatasetManifest,
    params: &ModelParams,
) -> Result<SegmentationSet> {
    let set = segment_dataset(
        manifest,
        params,
        config.decode_group_count,
        config.decode_actions_per_group,
        config.decode_vocab_size,
        config.background(),
        config.seed,
        config.train_threads,
    )?;
    let dir = config.segments_dir();
    ensure_dir(&dir)?;
    let mut index = String::from("video_id,group\n");
    for (v, seg) in set.segmentations.iter().enumerate() {
        write_file(&dir.join(format!("{}.csv", seg.video_id)), &segmentation_csv(seg))?;
        if config.svg {
            let svg = segmentation_svg(&seg.labels, set.total_clusters(), 640, 32);
            write_file(&dir.join(format!("{}.svg", seg.video_id)), &svg)?;
        }
        index.push_str(&format!("{},{}\n", seg.video_id, set.model.group_of_video[v] + 1));
    }
    write_file(&dir.join("segments_index.csv"), &index)?;
    echo_config(config)?;
    println!(
        "segmented {} videos into {} global clusters ({} groups x {} actions) -> {}",
        set.segmentations.len(),
        set.total_clusters(),
        config.decode_group_count,
        config.decode_actions_per_group,
        dir.display()
    );
    Ok(set)
}

pub fn cmd_eval(config: &RunConfig) -> Result<MetricReport> {
    let manifest = load_dataset(&config.dataset_dir(), Path::new("manifest.csv"))?;
    let dir = config.segments_dir();
    let mut segmentations = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let path = dir.join(format!("{}.csv", rec.video_id));
        segmentations.push(read_segmentation_csv(&path, &rec.video_id)?);
    }
    eval_segmentations(config, &manifest, &segmentations)
}

fn eval_segmentations(
    config: &RunConfig,
    manifest: &DatasetManifest,
    segmentations: &[Segmentation],
) -> Result<MetricReport> {
    let report = evaluate(manifest, segmentations, config.cluster_count(), &config.eval_settings())?;
    ensure_dir(&config.out_dir)?;
    write_file(&config.out_dir.join("report.json"), &report_json(&report))?;
    echo_config(config)?;
    println!("mof {:.4}", report.mof);
    println!("f1 {:.4}", report.f1);
    if config.print_mof_bg {
        println!("mof_bg {:.4}", report.mof_bg);
    }
    Ok(report)
}

pub fn cmd_pipeline(config: &RunConfig) -> Result<()> {
    let manifest = cmd_synth(config)?;
    let trained = train_manifest(config, &manifest)?;
    let set = segment_manifest(config, &manifest, &trained.params)?;
    eval_segmentations(config, &manifest, &set.segmentations)?;
    Ok(())
}

fn read_segmentation_csv(path: &Path, video_id: &str) -> Result<Segmentation> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "frame_index,global_cluster_id" {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    row: Some(1),
                    message: "expected header frame_index,global_cluster_id".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (frame, label) = line.split_once(',').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            row: Some(lineno + 1),
            message: "expected frame_index,global_cluster_id".into(),
        })?;
        let frame: usize = frame.trim().parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            row: Some(lineno + 1),
            message: "bad frame index".into(),
        })?;
        if frame != labels.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                row: Some(lineno + 1),
                message: format!("frame indices must be consecutive; expected {}", labels.len()),
            });
        }
        let label: usize = label.trim().parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            row: Some(lineno + 1),
            message: "bad cluster id".into(),
        })?;
        labels.push(label);
    }
    Ok(Segmentation { video_id: video_id.to_string(), labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = std::env::temp_dir().join(format!("actionseg_cli_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("cfg.txt");
        std::fs::write(&cfg_path, "preset=desk\nseed=1\n").unwrap();
        let config = parse_flags(&[
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "9",
            "--kprime",
            "5",
            "--k",
            "2",
            "--tau",
            "0.5",
            "--svg",
            "--ablate",
            "no-cyclic",
        ])
        .unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.decode_group_count, 5);
        assert_eq!(config.decode_actions_per_group, 2);
        assert_eq!(config.eval_tau, 0.5);
        assert!(config.svg);
        assert!(!config.loss_cyclic_term);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_config_is_usage_error() {
        assert!(parse_flags(&["--seed", "3"]).is_err());
        assert!(parse_flags(&["--bogus"]).is_err());
    }

    #[test]
    fn unknown_command_fails() {
        assert_eq!(run(&["frobnicate"]), 1);
        assert_eq!(run::<&str>(&[]), 1);
    }

    #[test]
    fn segmentation_csv_roundtrip() {
        let dir = std::env::temp_dir().join(format!("actionseg_segcsv_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let seg = Segmentation { video_id: "clip".into(), labels: vec![1, 1, 0, 3] };
        let path = dir.join("clip.csv");
        std::fs::write(&path, segmentation_csv(&seg)).unwrap();
        let loaded = read_segmentation_csv(&path, "clip").unwrap();
        assert_eq!(loaded, seg);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
