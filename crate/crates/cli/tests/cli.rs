use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mixcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixcon"))
        .current_dir(workspace_root())
        .args(args)
        .output()
        .expect("spawn mixcon")
}

fn ok(args: &[&str]) -> Output {
    let out = mixcon(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mixcon(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(mixcon(&[]).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = mixcon(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train", "invert", "sweep", "reduce", "report"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn reduce_on_bundled_fixtures() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sat");
    ok(&["reduce", "data/cnf/sat6.cnf", "--out", s(&out), "--samples", "500", "--trials", "100"]);
    let report = json(&out.join("reduce.json"));
    assert_eq!(report["completeness"], true);
    assert_eq!(report["violations"], 0);
    assert_eq!(report["K"], 100 * 5 * 5);
    assert!(report["max_ratio"].as_f64().unwrap() <= report["lipschitz_U"].as_f64().unwrap());

    let out = tmp.path().join("unsat");
    ok(&["reduce", "data/cnf/unsat3.cnf", "--out", s(&out), "--samples", "500", "--trials", "100"]);
    let report = json(&out.join("reduce.json"));
    assert!(report["completeness"].is_null());
    assert_eq!(report["min_unsat"], 1);
}

#[test]
fn reduce_failures_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = mixcon(&["reduce", "no/such/file.cnf", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));

    let bad = tmp.path().join("bad.cnf");
    fs::write(&bad, "p cnf 3 1\n1 1 2 0\n").unwrap();
    let out = mixcon(&["reduce", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = mixcon(&["reduce", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "bad.toml", "[synth]\nunknown_key = 1\n");
    assert_eq!(mixcon(&["--config", &cfg, "synth"]).status.code(), Some(1));
    let missing = tmp.path().join("missing.toml");
    assert_eq!(mixcon(&["--config", s(&missing), "synth"]).status.code(), Some(1));
}

#[test]
fn flag_beats_file_beats_default() {
    let tmp = TempDir::new().unwrap();
    let base = ["reduce", "data/cnf/sat6.cnf", "--samples", "50", "--trials", "20"];
    let run = |extra: &[&str], out: &Path| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", s(out)]);
        ok(&args);
        json(&out.join("reduce.json"))
    };
    let cfg = write_config(&tmp, "k.toml", "seed = 5\n[reduce]\nk = 3\n");

    let default = run(&[], &tmp.path().join("a"));
    assert_eq!(default["K"], 2500);
    let file = run(&["--config", &cfg], &tmp.path().join("b"));
    assert_eq!(file["K"], 3);
    let flag = run(&["--config", &cfg, "--k", "4"], &tmp.path().join("c"));
    assert_eq!(flag["K"], 4);

    // seed: file value 5 equals an explicit flag of 5, and a flag overrides it
    let seed_flag = run(&["--config", &cfg, "--seed", "5"], &tmp.path().join("d"));
    assert_eq!(seed_flag, file);
    let other = run(&["--config", &cfg, "--seed", "6"], &tmp.path().join("e"));
    assert_ne!(other["max_D"], file["max_D"]);
}

#[test]
fn out_directory_precedence() {
    let tmp = TempDir::new().unwrap();
    let file_out = tmp.path().join("from_file");
    let cfg = write_config(&tmp, "o.toml", &format!("out = {:?}\n", s(&file_out)));
    ok(&["--config", &cfg, "reduce", "data/cnf/unsat3.cnf", "--samples", "10", "--trials", "10"]);
    assert!(file_out.join("reduce.json").exists());
    let flag_out = tmp.path().join("from_flag");
    ok(&["--config", &cfg, "--out", s(&flag_out), "reduce", "data/cnf/unsat3.cnf", "--samples", "10", "--trials", "10"]);
    assert!(flag_out.join("reduce.json").exists());
}

#[test]
fn synth_writes_tables_and_hidden_dumps() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("synth");
    ok(&["synth", "--epochs", "2", "--attack-samples", "5", "--out", s(&out), "--threads", "1"]);
    let table1 = fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(table1.lines().count(), 1 + 7);
    assert!(table1.starts_with("model,network,lambda,beta,train_acc,test_acc"));
    let table2 = fs::read_to_string(out.join("table2.csv")).unwrap();
    assert_eq!(table2.lines().count(), 1 + 3 * 2);
    for epoch in 0..=2 {
        let dump = fs::read_to_string(out.join(format!("hidden_epoch_{epoch}.csv"))).unwrap();
        assert_eq!(dump.lines().count(), 1 + 7 * 200);
    }
}

#[test]
fn train_then_invert_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        "t.toml",
        "seed = 3\n[train.data]\nn_train = 100\nn_test = 40\n[train.training]\nepochs = 2\nlambda = 0.1\nbeta = 0.01\n\
         [invert]\nsamples = 6\n[invert.data]\nn_train = 100\nn_test = 40\n[invert.attack]\niterations = 20\n",
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["--config", &cfg, "train", "--out", s(dir)]);
        let ckpt = dir.join("model.ckpt");
        ok(&["--config", &cfg, "invert", "--checkpoint", s(&ckpt), "--out", s(dir)]);
    }
    for name in ["model.ckpt", "history.csv", "inversion.csv", "inversion_samples.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let summary = fs::read_to_string(a.join("inversion.csv")).unwrap();
    assert!(summary.contains("mse,") && summary.contains("mcs,"));
}

#[test]
fn invert_without_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(mixcon(&["invert", "--out", s(tmp.path())]).status.code(), Some(1));
}

#[test]
fn sweep_grid_from_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "s.toml", "[sweep.data]\nn_train = 60\nn_test = 20\n");
    let out = tmp.path().join("sweep");
    ok(&["--config", &cfg, "sweep", "--lambdas", "0.1,1", "--betas", "0.01,0", "--epochs", "1", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,beta,seed,train_acc,test_acc,mean_pair_dist,delta_h,status");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("0.1,0.01,0,"));
    assert!(lines[4].starts_with("1,0,0,"));
}

#[test]
fn report_on_a_small_mnist_slice() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        "r.toml",
        "[report]\nattack_samples = 2\n[report.data]\nn_train = 40\nn_test = 10\n[report.attack]\niterations = 5\n",
    );
    let out = tmp.path().join("report");
    ok(&["--config", &cfg, "report", "--epochs", "1", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(out.join("report.md")).unwrap().contains("| mixcon |"));
}

#[test]
fn checked_in_configs_parse() {
    let dir = workspace_root().join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        // `reduce` is cheap enough to run for every config; it validates the
        // whole file before doing any work.
        let tmp = TempDir::new().unwrap();
        let out = mixcon(&["--config", s(&path), "--out", s(tmp.path()), "reduce", "data/cnf/unsat3.cnf", "--samples", "5", "--trials", "5"]);
        assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        seen += 1;
    }
    assert!(seen >= 5);
}
