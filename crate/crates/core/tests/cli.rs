use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use retarget_core::data::io::{read_ply, read_weights};

const TINY: [&str; 8] = [
    "--skr-steps=20",
    "--smrm-steps=10",
    "--skin-steps=10",
    "--sweep-contexts=5,10",
    "--points=96",
    "--characters=3",
    "--skr-batch=2",
    "--smrm-batch=2",
];

fn retarget(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retarget"))
        .current_dir(dir)
        .args(args)
        .args(TINY)
        .env_remove("RETARGET_DATA_DIR")
        .env_remove("RETARGET_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = retarget(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = retarget(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

const RETARGET: [&str; 7] = [
    "retarget",
    "--source",
    "data/eval/source",
    "--target",
    "data/eval/target_tpose.ply",
    "--out",
    "out",
];

fn full_run(dir: &Path) {
    ok(dir, &["gen-data"]);
    ok(dir, &["train-skr"]);
    ok(dir, &["train-smrm"]);
    ok(dir, &["train-skin"]);
    ok(dir, &RETARGET);
    ok(dir, &["eval", "--pred", "out"]);
    ok(
        dir,
        &["export-ply", "--input", "out", "--output", "strip.ply"],
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn thirty_frames_in_thirty_frames_out_in_target_correspondence() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path());
    let tpose = read_ply(&dir.path().join("data/eval/target_tpose.ply")).unwrap();
    let weights = read_weights(&dir.path().join("out/target.wgt")).unwrap();
    assert_eq!(weights.len(), tpose.len());
    for f in 0..30 {
        let frame = read_ply(&dir.path().join(format!("out/frame_{f:06}.ply"))).unwrap();
        assert_eq!(frame.len(), tpose.len());
        let joints = read_ply(&dir.path().join(format!("out/joints/frame_{f:06}.ply"))).unwrap();
        assert_eq!(joints.len(), 8);
    }
    assert!(!dir.path().join("out/frame_000030.ply").exists());

    let eval = fs::read_to_string(dir.path().join("run/eval.txt")).unwrap();
    assert!(eval.starts_with("RTEVAL 1\nframes 30\n"), "{eval}");
    for metric in [
        "mpjpe", "pa_mpjpe", "acc", "pa_acc", "mpvd", "pa_mpvd", "mdel",
    ] {
        assert!(eval.contains(&format!("\n{metric} ")), "{metric} missing");
    }
    let csv = fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,value,frames,config_hash"));
    assert_eq!(csv.lines().count(), 8);

    let strip = read_ply(&dir.path().join("strip.ply")).unwrap();
    assert_eq!(strip.len(), 30 * tpose.len());
}

#[test]
fn piped_frame_paths_match_directory_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in ["gen-data", "train-skr", "train-smrm", "train-skin"] {
        ok(d, &[stage]);
    }
    ok(d, &RETARGET);
    let list: String = (0..30)
        .map(|f| format!("data/eval/source/frame_{f:06}.ply\n"))
        .collect();
    let mut child = Command::new(env!("CARGO_BIN_EXE_retarget"))
        .current_dir(d)
        .args([
            "retarget",
            "--source",
            "-",
            "--target",
            "data/eval/target_tpose.ply",
            "--out",
            "piped",
        ])
        .args(TINY)
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(list.as_bytes())
        .unwrap();
    assert!(child.wait().unwrap().success());
    assert_eq!(tree(&d.join("out")), tree(&d.join("piped")));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        full_run(d);
        ok(d, &["sweep"]);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 100);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn sweep_reports_every_context() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let stdout = ok(dir.path(), &["sweep"]);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    let csv = fs::read_to_string(dir.path().join("run/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.starts_with("5,") || l.starts_with("10,")));
}

#[test]
fn stages_out_of_order_name_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fails(d, &["train-skr"], 3);
    assert!(err.contains("run `retarget gen-data` first"), "{err}");
    ok(d, &["gen-data"]);
    let err = fails(d, &RETARGET, 3);
    assert!(
        err.contains("skr.ckpt") && err.contains("train-skr"),
        "{err}"
    );
    ok(d, &["train-skr"]);
    let err = fails(d, &RETARGET, 3);
    assert!(err.contains("train-smrm"), "{err}");
    let err = fails(d, &["eval", "--pred", "nowhere"], 3);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "seed = 1\n# fine\nlambda_rot = lots\n").unwrap();
    let err = fails(d, &["gen-data", "--config", "bad.cfg"], 2);
    assert!(err.contains("bad.cfg:3:"), "{err}");
    fs::write(d.join("unknown.cfg"), "sede = 1\n").unwrap();
    let err = fails(d, &["gen-data", "--config", "unknown.cfg"], 2);
    assert!(err.contains("unknown key `sede`"), "{err}");
    fails(d, &["gen-data", "--lambda-smooth=-0.5"], 2);
    fails(d, &["gen-data", "--context=1"], 2);
    fails(d, &["gen-data", "--scale=huge"], 2);
    fails(d, &["no-such-command"], 2);
    fails(d, &["show-config", "--config", "absent.cfg"], 3);
}

#[test]
fn data_must_match_the_configuration() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let err = fails(dir.path(), &["train-skr", "--seed=5"], 2);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn precedence_is_file_then_environment_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.cfg"),
        "seed = 4\ndata_dir = from_file\nrun_dir = from_file\n",
    )
    .unwrap();
    let show = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_retarget"));
        c.current_dir(d)
            .args(["show-config", "--config", "run.cfg"])
            .args(extra);
        c.env_remove("RETARGET_DATA_DIR")
            .env_remove("RETARGET_RUN_DIR");
        if let Some(v) = env {
            c.env("RETARGET_DATA_DIR", v).env("RETARGET_SEED", "9");
        }
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    let base = show(&[], None);
    assert!(
        base.contains("seed = 4\n") && base.contains("data_dir = from_file\n"),
        "{base}"
    );
    let env = show(&[], Some("from_env"));
    assert!(
        env.contains("data_dir = from_env\n") && env.contains("seed = 4\n"),
        "{env}"
    );
    let flag = show(
        &["--data-dir", "from_flag", "--seed", "6"],
        Some("from_env"),
    );
    assert!(
        flag.contains("data_dir = from_flag\n") && flag.contains("seed = 6\n"),
        "{flag}"
    );
    assert!(flag.contains("run_dir = from_file\n"));
}
