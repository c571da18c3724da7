//! Process-level tests of the `lskt` binary: exit codes, output files,
//! determinism, and the config-resolution rules.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lskt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lskt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// Writes a small deterministic dataset and returns its path.
fn small_dataset(dir: &Path) -> String {
    let data_dir = dir.join("data");
    let out = lskt(&[
        "synth",
        "--out",
        data_dir.to_str().unwrap(),
        "--n_learners",
        "30",
        "--n_concepts",
        "4",
        "--n_exercises",
        "12",
        "--steps",
        "12",
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
    data_dir.join("synth.csv").to_str().unwrap().to_string()
}

const TINY_TRAIN: &[&str] = &[
    "--embed_dim",
    "8",
    "--seq_len",
    "16",
    "--clusters",
    "2",
    "--pool_capacity",
    "6",
    "--batch_size",
    "8",
    "--seed",
    "5",
];

fn train_into(dir: &Path, data: &str, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(&["--epochs", epochs]);
    args.extend_from_slice(extra);
    lskt(&args)
}

#[test]
fn train_writes_config_history_checkpoint_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    let out = train_into(&run, &data, "2", &[]);
    assert_code(&out, 0);

    for file in ["config.json", "history.csv", "metrics.json"] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    for file in ["config.json", "params.bin", "optimizer.bin", "pool.bin", "history.csv"] {
        assert!(run.join("checkpoint").join(file).is_file(), "missing checkpoint/{file}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "header plus one row per epoch");

    let metrics: serde_json::Value =
        serde_json::from_str(&stdout_of(&out)).expect("stdout is the metrics report");
    assert!(metrics["auc"].is_number());
}

#[test]
fn train_repeated_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_code(&train_into(&a, &data, "2", &[]), 0);
    assert_code(&train_into(&b, &data, "2", &[]), 0);
    for file in ["config.json", "history.csv", "metrics.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
    assert_eq!(
        fs::read(a.join("checkpoint/params.bin")).unwrap(),
        fs::read(b.join("checkpoint/params.bin")).unwrap()
    );
}

#[test]
fn train_without_data_uses_builtin_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = lskt(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--embed_dim",
        "6",
        "--seq_len",
        "12",
        "--epochs",
        "1",
        "--clusters",
        "2",
        "--batch_size",
        "32",
    ]);
    assert_code(&out, 0);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn train_missing_data_exits_three_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lskt(&[
        "train",
        "--data",
        "no-such-file.csv",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(stderr_of(&out).contains("no-such-file.csv"));
}

#[test]
fn zero_learning_rate_freezes_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    // Deterministic settings: no dropout, no guess sampling (NI), and no
    // cluster refitting (RLS), so frozen parameters mean frozen loss.
    let out = train_into(
        &run,
        &data,
        "3",
        &["--lr", "0", "--dropout", "0", "--ablation", "RLS", "--irt_level", "NI"],
    );
    assert_code(&out, 0);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let losses: Vec<&str> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| *l == losses[0]), "history: {history}");
}

#[test]
fn evaluate_reproduces_the_final_epoch_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    assert_code(&train_into(&run, &data, "2", &[]), 0);

    let eval = |_tag: &str| {
        let out = lskt(&[
            "evaluate",
            "--config",
            run.join("config.json").to_str().unwrap(),
            "--checkpoint",
            run.join("checkpoint").to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        stdout_of(&out)
    };
    let first = eval("first");
    assert_eq!(first, eval("again"), "same checkpoint twice must print identical bytes");

    let metrics: serde_json::Value = serde_json::from_str(&first).unwrap();
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let last_row: Vec<f64> = history
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    // history columns: epoch, train_loss, val_auc, val_acc, val_rmse, val_mae
    for (i, key) in [(2, "auc"), (3, "acc"), (4, "rmse"), (5, "mae")] {
        let diff = (metrics[key].as_f64().unwrap() - last_row[i]).abs();
        assert!(diff <= 1e-12, "{key} differs from the final epoch row by {diff}");
    }
}

#[test]
fn evaluate_missing_checkpoint_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lskt(&[
        "evaluate",
        "--checkpoint",
        tmp.path().join("nowhere").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
}

#[test]
fn evaluate_config_mismatch_names_both_values() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    assert_code(&train_into(&run, &data, "2", &[]), 0);
    let out = lskt(&[
        "evaluate",
        "--config",
        run.join("config.json").to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--embed_dim",
        "32",
    ]);
    assert_code(&out, 2);
    let msg = stderr_of(&out);
    assert!(msg.contains("embed_dim 8"), "{msg}");
    assert!(msg.contains("embed_dim 32"), "{msg}");
}

#[test]
fn unknown_config_file_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nmomentum = 0.9\n").unwrap();
    let out = lskt(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("unknown config key `momentum`"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\n").unwrap();
    let run = tmp.path().join("run");
    let out = train_into(&run, &data, "3", &["--config", cfg.to_str().unwrap()]);
    assert_code(&out, 0);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4, "flag value 3 must win over file value 1");
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = lskt(&["synth", "--out", dir.to_str().unwrap(), "--seed", "11"]);
        assert_code(&out, 0);
    }
    assert_eq!(
        fs::read(a.join("synth.csv")).unwrap(),
        fs::read(b.join("synth.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("spec.json")).unwrap(),
        fs::read(b.join("spec.json")).unwrap()
    );
    let records = lskt::data::parse_csv(&a.join("synth.csv")).unwrap();
    let set = lskt::data::build_sequences(&records, 50).unwrap();
    assert!(set.skipped.skipped_learners.is_empty());
    assert_eq!(set.sequences.len(), 200, "default spec is 200 learners, one chunk each");
}

#[test]
fn synth_rejects_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out = lskt(&["synth", "--out", out_dir.to_str().unwrap(), "--guess", "1.5"]);
    assert_code(&out, 2);
    let out = lskt(&["synth", "--out", out_dir.to_str().unwrap(), "--n_learners", "0"]);
    assert_code(&out, 2);
}

#[test]
fn gradcheck_passes_and_prints_per_group_lines() {
    let out = lskt(&["gradcheck"]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    for group in ["embed.concept", "lse.block1.kernel_dir", "model.w7", "model.w8"] {
        assert!(text.contains(group), "missing group line for {group}:\n{text}");
    }
    assert!(text.contains("gradient check passed"));
}

#[test]
fn gradcheck_guards_and_negative_control() {
    let out = lskt(&["gradcheck", "--corrupt_group", "model.w8"]);
    assert_code(&out, 4);

    let out = lskt(&["gradcheck", "--dropout", "0.2"]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("gradcheck requires deterministic mode"));

    let out = lskt(&["gradcheck", "--embed_dim", "32"]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("tiny configuration"));
}

#[test]
fn export_embeddings_row_counts_labels_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    assert_code(&train_into(&run, &data, "2", &[]), 0);

    let export = |dir: &Path| {
        let out = lskt(&[
            "export-embeddings",
            "--config",
            run.join("config.json").to_str().unwrap(),
            "--checkpoint",
            run.join("checkpoint").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    };
    let (a, b) = (tmp.path().join("exp_a"), tmp.path().join("exp_b"));
    export(&a);
    export(&b);
    for file in ["exercise_embeddings.csv", "states.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs between identical exports"
        );
    }

    let exercises = fs::read_to_string(a.join("exercise_embeddings.csv")).unwrap();
    assert_eq!(exercises.lines().count() - 1, 12, "one row per vocabulary exercise");

    let records = lskt::data::parse_csv(Path::new(&data)).unwrap();
    let set = lskt::data::build_sequences(&records, 16).unwrap();
    let total_valid: usize = set.sequences.iter().map(|s| s.valid_len).sum();
    let states = fs::read_to_string(a.join("states.csv")).unwrap();
    assert_eq!(states.lines().count() - 1, total_valid, "one row per valid timestep");

    let cluster_col = states
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap());
    for label in cluster_col {
        assert!(label < 2, "cluster label {label} outside [0, clusters)");
    }
}

#[test]
fn export_embeddings_supports_learner_subsets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    assert_code(&train_into(&run, &data, "2", &[]), 0);

    let records = lskt::data::parse_csv(Path::new(&data)).unwrap();
    let set = lskt::data::build_sequences(&records, 16).unwrap();
    let learner = set.sequences[0].learner.clone();
    let expected: usize = set
        .sequences
        .iter()
        .filter(|s| s.learner == learner)
        .map(|s| s.valid_len)
        .sum();

    let dir = tmp.path().join("subset");
    let out = lskt(&[
        "export-embeddings",
        "--config",
        run.join("config.json").to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--learners",
        &learner,
    ]);
    assert_code(&out, 0);
    let states = fs::read_to_string(dir.join("states.csv")).unwrap();
    assert_eq!(states.lines().count() - 1, expected);

    let out = lskt(&[
        "export-embeddings",
        "--config",
        run.join("config.json").to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        tmp.path().join("none").to_str().unwrap(),
        "--learners",
        "ghost",
    ]);
    assert_code(&out, 3);
    assert!(stderr_of(&out).contains("ghost"));
}

#[test]
fn ablate_emits_requested_subset_with_shared_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let dir = tmp.path().join("abl");
    let out = lskt(&[
        "ablate",
        "--data",
        data.as_str(),
        "--out",
        dir.to_str().unwrap(),
        "--variants",
        "full,RKS",
        "--irt_levels",
        "NI",
        "--embed_dim",
        "8",
        "--seq_len",
        "16",
        "--epochs",
        "1",
        "--clusters",
        "2",
        "--pool_capacity",
        "6",
        "--batch_size",
        "8",
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);

    let csv = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "variant,irt,auc,acc,rmse,mae,split_hash");
    assert_eq!(rows.len(), 3, "two requested cells:\n{csv}");
    assert!(rows[1].starts_with("full,NI,"));
    assert!(rows[2].starts_with("RKS,NI,"));
    let hash = |row: &str| row.rsplit(',').next().unwrap().to_string();
    assert_eq!(hash(rows[1]), hash(rows[2]));
}

#[test]
fn usage_errors_exit_two() {
    let out = lskt(&["train"]);
    assert_code(&out, 2);
    let out = lskt(&["no-such-command"]);
    assert_code(&out, 2);
    let out = lskt(&["--help"]);
    assert_code(&out, 0);
}
