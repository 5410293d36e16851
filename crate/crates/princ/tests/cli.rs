//! End-to-end tests of the `princ` binary: workflows, file outputs,
//! rerun determinism, and exit codes (0 success, 1 domain, 2 usage).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn princ(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_princ"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    let code = out.status.code().expect("exit code");
    assert_eq!(
        code,
        want,
        "{context}: expected exit {want}, got {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_args<'a>() -> Vec<&'a str> {
    vec![
        "gen-data",
        "--seen",
        "3",
        "--novel",
        "1",
        "--per-intent",
        "40",
        "--seed",
        "5",
        "--out",
        "ds",
    ]
}

const SPLIT: &[&str] = &[
    "--data",
    "ds/data.jsonl",
    "--manifest",
    "ds/manifest.json",
    "--split-seed",
    "3",
    "--k-shot",
    "2",
];

fn fast_train(extra: &[&str], dir: &Path) -> Output {
    let mut args = vec!["train", "--phase", "1"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&[
        "--seed",
        "1",
        "--phase1-epochs",
        "4",
        "--out",
        "ck1.princ",
    ]);
    args.extend_from_slice(extra);
    princ(&args, dir)
}

#[test]
fn full_workflow_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = princ(&gen_args(), d);
    assert_code(&out, 0, "gen-data");
    let records = fs::read_to_string(d.join("ds/data.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4 * 40);
    assert!(d.join("ds/manifest.json").exists());

    // regenerating with the same flags is byte-identical
    let first = fs::read(d.join("ds/data.jsonl")).unwrap();
    assert_code(&princ(&gen_args(), d), 0, "gen-data rerun");
    assert_eq!(first, fs::read(d.join("ds/data.jsonl")).unwrap());

    assert_code(&fast_train(&[], d), 0, "train phase 1");
    assert!(d.join("ck1.princ").exists());
    let report = fs::read_to_string(d.join("ck1.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("total").is_some());
        assert!(v.get("epoch").is_some());
    }

    // training rerun with identical flags produces identical bytes
    let ck1 = fs::read(d.join("ck1.princ")).unwrap();
    assert_code(&fast_train(&[], d), 0, "train rerun");
    assert_eq!(ck1, fs::read(d.join("ck1.princ")).unwrap());

    // phase 2 under each preservation mode
    for mode in ["none", "dakp", "ddkp"] {
        let mut args = vec![
            "train",
            "--phase",
            "2",
            "--from",
            "ck1.princ",
            "--preserve",
            mode,
        ];
        args.extend_from_slice(SPLIT);
        args.extend_from_slice(&["--seed", "1", "--phase2-epochs", "3"]);
        let out_name = format!("ck2_{mode}.princ");
        args.extend_from_slice(&["--out", &out_name]);
        assert_code(&princ(&args, d), 0, &format!("train phase 2 {mode}"));

        let ckpt = princ::checkpoint::load_checkpoint(d.join(&out_name)).unwrap();
        assert_eq!(ckpt.snapshot.is_some(), mode == "dakp", "{mode} snapshot flag");
        assert_eq!(ckpt.memory.is_some(), mode == "ddkp", "{mode} memory flag");
        assert!(ckpt.model.store.novel_count() > 0);
        if let Some(memory) = &ckpt.memory {
            assert!(memory.has_soft_labels());
            // no --memory-ratio flag given: the default applies
            assert_eq!(ckpt.config.memory_ratio, 0.1);
        }
    }

    // non-episodic evaluation
    let mut args = vec!["eval", "--from", "ck2_ddkp.princ", "--mode", "noneps"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&["--out", "eval.jsonl"]);
    let out = princ(&args, d);
    assert_code(&out, 0, "eval noneps");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall accuracy"), "table printed: {stdout}");
    let eval_lines = fs::read_to_string(d.join("eval.jsonl")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(eval_lines.lines().next().unwrap()).unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["mode"], "noneps");

    // evaluation reruns reproduce the record file byte for byte
    let first_eval = fs::read(d.join("eval.jsonl")).unwrap();
    assert_code(&princ(&args, d), 0, "eval rerun");
    assert_eq!(first_eval, fs::read(d.join("eval.jsonl")).unwrap());

    // episodic evaluation at a feasible small spec
    let mut args = vec![
        "eval",
        "--from",
        "ck2_ddkp.princ",
        "--mode",
        "eps",
        "--ways",
        "2",
        "--shots",
        "1",
        "--episodes",
        "4",
        "--eval-seed",
        "9",
        "--out",
        "eps.jsonl",
    ];
    args.extend_from_slice(SPLIT);
    let out = princ(&args, d);
    assert_code(&out, 0, "eval eps");
    let eps: serde_json::Value = serde_json::from_str(
        fs::read_to_string(d.join("eps.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(eps["episodes"], 4);
    assert_eq!(eps["total_queries"], 4 * 2 * 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let mut bad_gen = gen_args();
    bad_gen[4] = "0"; // --novel 0
    assert_code(&princ(&bad_gen, d), 2, "gen-data --novel 0");

    // unknown flag is rejected by the parser
    let out = princ(&["gen-data", "--seen", "2", "--novel", "1", "--out", "x", "--bogus"], d);
    assert_code(&out, 2, "unknown flag");

    // phase 2 without --from / --preserve
    assert_code(&princ(&gen_args(), d), 0, "gen-data");
    let mut args = vec!["train", "--phase", "2"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&["--out", "x.princ"]);
    assert_code(&princ(&args, d), 2, "phase 2 without --from");

    // eps without --ways
    assert_code(&fast_train(&[], d), 0, "train");
    let mut args = vec!["eval", "--from", "ck1.princ", "--mode", "eps"];
    args.extend_from_slice(SPLIT);
    assert_code(&princ(&args, d), 2, "eps without ways");

    // bad mode string
    let mut args = vec!["eval", "--from", "ck1.princ", "--mode", "sideways"];
    args.extend_from_slice(SPLIT);
    assert_code(&princ(&args, d), 2, "bad mode");
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // missing dataset file
    let mut args = vec!["train", "--phase", "1"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&["--out", "ck.princ"]);
    assert_code(&princ(&args, d), 1, "missing data");

    // corrupt checkpoint
    assert_code(&princ(&gen_args(), d), 0, "gen-data");
    fs::write(d.join("bad.princ"), b"not a checkpoint").unwrap();
    let mut args = vec!["eval", "--from", "bad.princ", "--mode", "noneps"];
    args.extend_from_slice(SPLIT);
    assert_code(&princ(&args, d), 1, "corrupt checkpoint");

    // evaluating a phase-1 checkpoint (no novel prototypes yet)
    assert_code(&fast_train(&[], d), 0, "train");
    let mut args = vec![
        "eval",
        "--from",
        "ck1.princ",
        "--mode",
        "eps",
        "--ways",
        "2",
        "--shots",
        "1",
        "--episodes",
        "2",
    ];
    args.extend_from_slice(SPLIT);
    assert_code(&princ(&args, d), 1, "phase-1 checkpoint rejected");
}

#[test]
fn config_file_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_code(&princ(&gen_args(), d), 0, "gen-data");

    fs::write(
        d.join("train.toml"),
        "phase1_epochs = 2\nbatch_size = 4\ntau = 0.2\n",
    )
    .unwrap();

    // config applies
    let mut args = vec!["train", "--phase", "1"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&["--seed", "1", "--config", "train.toml", "--out", "a.princ"]);
    assert_code(&princ(&args, d), 0, "train with config");
    let report = fs::read_to_string(d.join("a.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2, "epochs from config file");
    let ckpt = princ::checkpoint::load_checkpoint(d.join("a.princ")).unwrap();
    assert_eq!(ckpt.config.tau, 0.2);
    assert_eq!(ckpt.config.batch_size, 4);

    // flags override the file
    let mut args = vec!["train", "--phase", "1"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&[
        "--seed",
        "1",
        "--config",
        "train.toml",
        "--phase1-epochs",
        "3",
        "--out",
        "b.princ",
    ]);
    assert_code(&princ(&args, d), 0, "train with override");
    let report = fs::read_to_string(d.join("b.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3, "flag overrides config");

    // unknown keys in the config file are rejected
    fs::write(d.join("bad.toml"), "learning_rate = 1.0\n").unwrap();
    let mut args = vec!["train", "--phase", "1"];
    args.extend_from_slice(SPLIT);
    args.extend_from_slice(&["--config", "bad.toml", "--out", "c.princ"]);
    assert_code(&princ(&args, d), 1, "unknown config key");
}

#[test]
fn gradcheck_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "gradcheck", "--step", "1e-5", "--dims", "5", "--seed", "3", "--fixtures", "4",
    ];
    let a = princ(&args, d);
    assert_code(&a, 0, "gradcheck");
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert_eq!(stdout.matches("PASS").count(), 7, "{stdout}");
    for target in ["loss_cls", "loss_ii", "loss_is", "loss_l2", "loss_kd", "encode", "project"] {
        assert!(stdout.contains(target), "missing {target} in {stdout}");
    }

    let b = princ(&args, d);
    assert_eq!(a.stdout, b.stdout, "gradcheck report is deterministic");
}
