use std::path::Path;
use std::process::Command;

use clap::Parser;
use wlas::cli::{run, Cli};

const CONFIG: &str = r#"
[dataset]
train = 8
val = 2
test = 3
audio_only = 4

[dataset.synth]
height = 16
width = 16

[train]
batch_size = 2
learning_rate = 0.5
max_iterations = 3
validation_interval = 2

[decode]
width = 2
max_len = 20
"#;

fn cli(dir: &Path, args: &[&str]) -> Cli {
    let cfg = dir.join("run.toml");
    let data = dir.join("data");
    let runs = dir.join("runs");
    let mut argv = vec![
        "wlas".to_string(),
        "--config".into(),
        cfg.display().to_string(),
        "--data-dir".into(),
        data.display().to_string(),
        "--runs-dir".into(),
        runs.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    Cli::try_parse_from(argv).unwrap()
}

#[test]
fn generate_train_evaluate_decode_sweep() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();

    let out = run(&cli(dir.path(), &["generate"])).unwrap();
    assert!(out.message.contains("wrote 17 utterances"), "{}", out.message);
    let again = run(&cli(dir.path(), &["generate"])).unwrap();
    assert!(again.message.contains("up to date"));

    let trained = run(&cli(dir.path(), &["train"])).unwrap();
    let run_dir = trained.run_dir.unwrap();
    for f in ["config.toml", "run_log.jsonl", "best.ckpt", "last.ckpt", "summary.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run_dir.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run_dir.join("last.ckpt").display().to_string();

    let resumed = run(&cli(dir.path(), &["train", "--resume", &ckpt, "--max-iterations", "4"])).unwrap();
    assert!(resumed.message.contains("trained 4 iterations"), "{}", resumed.message);

    let las = run(&cli(dir.path(), &["train", "--mode", "las", "--max-iterations", "1"])).unwrap();
    assert!(las.run_dir.unwrap().join("best.ckpt").exists());

    let eval = run(&cli(dir.path(), &["evaluate", "--checkpoint", &ckpt])).unwrap();
    let eval_dir = eval.run_dir.unwrap();
    let report = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    for m in ["audio", "lips", "both"] {
        assert!(report.contains(m), "{report}");
    }
    assert!(eval_dir.join("report.json").exists());

    let dec = run(&cli(
        dir.path(),
        &["decode", "--checkpoint", &ckpt, "--ids", "test-00000,test-00001", "--attention"],
    ))
    .unwrap();
    let dec_dir = dec.run_dir.unwrap();
    let lines = std::fs::read_to_string(dec_dir.join("decodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(dec_dir.join("throughput.json").exists());
    let pgms = std::fs::read_dir(&dec_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert!(pgms >= 2);
    assert!(run(&cli(dir.path(), &["decode", "--checkpoint", &ckpt, "--ids", "nope"])).is_err());

    let sweep = run(&cli(dir.path(), &["sweep-beam", "--checkpoint", &ckpt, "--widths", "1,2"])).unwrap();
    let sweep_json = std::fs::read_to_string(sweep.run_dir.unwrap().join("sweep.json")).unwrap();
    let rows: serde_json::Value = serde_json::from_str(&sweep_json).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let err = run(&cli(dir.path(), &["train"])).unwrap_err();
    assert!(err.to_string().contains("wlas generate"));
}

#[test]
fn bad_config_fails_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wlas"))
        .args(["--config", cfg.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn help_lists_subcommands() {
    let out = Command::new(env!("CARGO_BIN_EXE_wlas")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for c in ["generate", "train", "evaluate", "decode", "sweep-beam"] {
        assert!(text.contains(c));
    }
}
