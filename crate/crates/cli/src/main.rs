//! Batch pipeline driver.
//!
//! Commands: gen-data, train-seg, run-lrg, train-extractor, train-fusion,
//! evaluate, cam, verify. Exit codes: 0 success, 2 configuration error,
//! 3 missing prerequisite, 4 assertion/verification failure.

use std::process::ExitCode;

use sdfn_cli::config::PipelineConfig;
use sdfn_cli::pipeline::{Pipeline, View};
use sdfn_cli::verify;
use sdfn_core::Error;

const USAGE: &str = "usage: sdfn <command> --config PATH [options]

commands:
  gen-data           generate the phantom corpus and its manifest
  train-seg          train the lung segmenter
  run-lrg            segment every image, post-process, cache crops + boxes
  train-extractor    train one feature extractor (--view global|local)
  train-fusion       train the fusion head on frozen extractors
  evaluate           write the evaluation report (CSV + JSON + ROC curves)
  cam                write activation heatmaps (--ids a,b --classes 0,5)
  verify             run the verification suite and report pass/fail

options:
  --config PATH      pipeline configuration file (required)
  --seed INT         override the configured global seed
  --view VIEW        extractor view: global or local
  --ids LIST         comma-separated image ids for cam
  --classes LIST     comma-separated class indices for cam

environment:
  SDFN_THREADS       cap worker parallelism";

struct Args {
    command: String,
    config: Option<String>,
    seed: Option<u64>,
    view: Option<String>,
    ids: Vec<String>,
    classes: Vec<usize>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    if argv.is_empty() {
        return Err("missing command".into());
    }
    let mut args = Args {
        command: argv[0].clone(),
        config: None,
        seed: None,
        view: None,
        ids: Vec::new(),
        classes: Vec::new(),
    };
    let mut i = 1;
    while i < argv.len() {
        let flag = argv[i].as_str();
        let value = |i: usize| -> Result<&String, String> {
            argv.get(i + 1).ok_or_else(|| format!("{flag} needs a value"))
        };
        match flag {
            "--config" => {
                args.config = Some(value(i)?.clone());
                i += 2;
            }
            "--seed" => {
                args.seed =
                    Some(value(i)?.parse().map_err(|_| format!("invalid --seed `{}`", argv[i + 1]))?);
                i += 2;
            }
            "--view" => {
                args.view = Some(value(i)?.clone());
                i += 2;
            }
            "--ids" => {
                args.ids = value(i)?.split(',').map(|s| s.trim().to_string()).collect();
                i += 2;
            }
            "--classes" => {
                args.classes = value(i)?
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| format!("invalid class `{s}`")))
                    .collect::<Result<_, _>>()?;
                i += 2;
            }
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok(args)
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite { .. } => 3,
        Error::InvalidConfig(_) | Error::Parse { .. } | Error::ConfigMismatch(_) | Error::Io(_) => 2,
        _ => 4,
    }
}

fn run(args: Args) -> Result<(), (u8, String)> {
    let config_path = args
        .config
        .as_deref()
        .ok_or_else(|| (2u8, "--config is required".to_string()))?;
    let mut config = PipelineConfig::load(std::path::Path::new(config_path))
        .map_err(|e| (2, e.to_string()))?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    let pipeline = Pipeline::new(config).map_err(|e| (2, e.to_string()))?;
    let stage_err = |e: Error| (exit_code_for(&e), e.to_string());

    match args.command.as_str() {
        "gen-data" => {
            pipeline.gen_data().map_err(stage_err)?;
            println!("corpus written to {}", pipeline.config.corpus_dir.display());
        }
        "train-seg" => {
            pipeline.train_seg().map_err(stage_err)?;
            println!("segmenter checkpoint written");
        }
        "run-lrg" => {
            let rows = pipeline.run_lrg().map_err(stage_err)?;
            let fallbacks = rows.iter().filter(|r| r.status.fallback).count();
            println!("{} crops written ({} fallbacks)", rows.len(), fallbacks);
        }
        "train-extractor" => {
            let view: View = args
                .view
                .as_deref()
                .ok_or_else(|| (2u8, "train-extractor needs --view global|local".to_string()))?
                .parse()
                .map_err(|e: Error| (2, e.to_string()))?;
            pipeline.train_extractor(view).map_err(stage_err)?;
            println!("{} extractor checkpoint written", view.name());
        }
        "train-fusion" => {
            pipeline.train_fusion().map_err(stage_err)?;
            println!("fusion checkpoint written");
        }
        "evaluate" => {
            let report = pipeline.evaluate().map_err(stage_err)?;
            for col in &report.columns {
                println!("{:12} mean AUC {:.4}", col.name, col.mean_auc);
            }
            println!("report written to {}", pipeline.config.reports_dir.display());
        }
        "cam" => {
            pipeline.cam(&args.ids, &args.classes).map_err(stage_err)?;
            println!("heatmaps written for {} image(s)", args.ids.len());
        }
        "verify" => {
            let reports = verify::run_all();
            for report in &reports {
                println!("{}", report.line());
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err((4, format!("{failed} criteria failed")));
            }
            println!("all {} criteria passed", reports.len());
        }
        other => return Err((2, format!("unknown command `{other}`\n\n{USAGE}"))),
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" || argv[0] == "help" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match parse_args(&argv) {
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Ok(args) => match run(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err((code, msg)) => {
                eprintln!("error: {msg}");
                ExitCode::from(code)
            }
        },
    }
}
