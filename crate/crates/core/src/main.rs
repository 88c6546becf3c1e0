use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use retarget_core::pipeline::{self, Models, PipelineConfig, CONFIG_KEYS};
use retarget_core::{Error, Result};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("retarget")
        .about("Correspondence-free online motion retargeting between point-cloud characters")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("Flat key = value configuration file"),
        );
    for key in CONFIG_KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(flag(key))
                .global(true)
                .value_name("VALUE")
                .help(format!("Overrides `{key}`"))
                .help_heading("Configuration"),
        );
    }
    let path = |name: &'static str, help: &'static str| {
        Arg::new(name).long(name).value_name("PATH").help(help)
    };
    cmd.subcommand(
        Command::new("gen-data")
            .about("Write the synthetic characters, evaluation sequence and ground truth"),
    )
    .subcommand(Command::new("train-skr").about("Train the skeleton regressor"))
    .subcommand(Command::new("train-smrm").about("Train the skeletal motion retargeting network"))
    .subcommand(Command::new("train-skin").about("Train the skinning weight predictor"))
    .subcommand(
        Command::new("retarget")
            .about("Stream source frames onto a target T-pose cloud, one output per input frame")
            .arg(
                path(
                    "source",
                    "Directory of frame_*.ply files, or - to read frame paths from stdin",
                )
                .required(true),
            )
            .arg(path("target", "Target T-pose point cloud (.ply)").required(true))
            .arg(path("out", "Output directory").required(true)),
    )
    .subcommand(
        Command::new("eval")
            .about("Score retargeted frames against ground truth")
            .arg(path("pred", "Output directory of `retarget`").required(true))
            .arg(path(
                "gt",
                "Ground-truth directory [default: <data_dir>/eval]",
            )),
    )
    .subcommand(
        Command::new("export-ply")
            .about("Lay a frame directory out side by side in one coloured PLY")
            .arg(path("input", "Directory of frame_*.ply files").required(true))
            .arg(path("output", "Output .ply file").required(true)),
    )
    .subcommand(
        Command::new("sweep")
            .about("Train and score the retargeting network at every sweep context length"),
    )
    .subcommand(Command::new("show-config").about("Print the resolved configuration"))
    .arg(
        Arg::new("quiet")
            .long("quiet")
            .short('q')
            .global(true)
            .action(ArgAction::SetTrue)
            .help("Suppress progress output"),
    )
}

fn resolve(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => PipelineConfig::load(Path::new(p))?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    for key in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("--{}: {msg}", flag(key))),
                other => other,
            })?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_arg(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn run(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m)?;
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let quiet = m.get_flag("quiet");
    let mut out = io::stdout().lock();
    let mut say = |s: String| {
        if !quiet {
            let _ = writeln!(out, "{s}");
        }
    };
    match name {
        "gen-data" => {
            let manifest = pipeline::gen_data(&cfg)?;
            say(format!(
                "wrote {} characters and a {}-frame evaluation sequence to {}",
                cfg.characters,
                manifest.len(),
                cfg.data_dir.display()
            ));
        }
        "train-skr" | "train-smrm" | "train-skin" => {
            let report = match name {
                "train-skr" => pipeline::train_skr_stage(&cfg)?,
                "train-smrm" => pipeline::train_smrm_stage(&cfg)?,
                _ => pipeline::train_skin_stage(&cfg)?,
            };
            say(format!(
                "{name}: loss {:.6} -> {:.6}; {}",
                report.initial_loss, report.final_loss, report.summary
            ));
        }
        "retarget" => {
            let models = Models::load(&cfg)?;
            let source = path_arg(sub, "source").expect("required");
            let target = path_arg(sub, "target").expect("required");
            let dest = path_arg(sub, "out").expect("required");
            let stdin = io::stdin();
            let frames = pipeline::frame_source(&source, Box::new(stdin.lock()))?;
            let n = pipeline::retarget(&models, frames, &target, &dest)?;
            say(format!("retargeted {n} frames into {}", dest.display()));
        }
        "eval" => {
            let pred = path_arg(sub, "pred").expect("required");
            let gt = path_arg(sub, "gt").unwrap_or_else(|| cfg.data_dir.join("eval"));
            let report = pipeline::evaluate_run(&cfg, &pred, &gt)?;
            for (k, v) in report.metrics() {
                say(format!("{k} {v:.6}"));
            }
        }
        "export-ply" => {
            let input = path_arg(sub, "input").expect("required");
            let output = path_arg(sub, "output").expect("required");
            let n = pipeline::export_ply(&input, &output)?;
            say(format!("exported {n} frames to {}", output.display()));
        }
        "sweep" => {
            for (context, report) in pipeline::sweep(&cfg)? {
                let line: Vec<String> = report
                    .metrics()
                    .iter()
                    .map(|(k, v)| format!("{k} {v:.4}"))
                    .collect();
                say(format!("context {context}: {}", line.join(", ")));
            }
        }
        "show-config" => say(cfg.to_text().trim_end().to_string()),
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
