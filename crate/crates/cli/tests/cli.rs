//! End-to-end checks of the command-line interface: exit codes, the
//! machine-parsable summary line, determinism of generation, and the full
//! generate -> train -> eval -> inspect pipeline on a tiny dataset.

use std::path::Path;
use std::process::{Command, Output};

fn sdmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdmtl"))
        .args(args)
        .env("SDMTL_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn last_stdout_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim_end().lines().last().unwrap_or("").to_string()
}

fn tiny_gen_args<'a>(out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "gen-data",
        "--out",
        out,
        "--seed",
        seed,
        "--rows",
        "400",
        "--fields",
        "3",
        "--values-per-field",
        "8",
        "--vocab",
        "32",
    ]
}

#[test]
fn gen_data_is_deterministic_and_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out1 = sdmtl(&tiny_gen_args(a.to_str().unwrap(), "7"));
    let out2 = sdmtl(&tiny_gen_args(b.to_str().unwrap(), "7"));
    assert!(out1.status.success(), "{}", String::from_utf8_lossy(&out1.stderr));
    assert!(out2.status.success());
    for name in ["train.csv", "valid.csv", "test.csv", "schema.txt", "weights.csv"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} must be byte-identical across identical seeds");
    }
    let line = last_stdout_line(&out1);
    assert!(line.starts_with("status=ok"), "{line}");
    assert!(line.contains("funnel_violations=0"), "{line}");
    assert!(line.contains("bayes_auc_1="), "{line}");

    // a different seed changes the data
    let c = dir.path().join("c");
    let out3 = sdmtl(&tiny_gen_args(c.to_str().unwrap(), "8"));
    assert!(out3.status.success());
    assert_ne!(
        std::fs::read(a.join("train.csv")).unwrap(),
        std::fs::read(c.join("train.csv")).unwrap()
    );
}

fn write_tiny_train_cfg(path: &Path) {
    std::fs::write(
        path,
        "# tiny run\n\
         model=apem\n\
         batch_size=128\n\
         epochs=2\n\
         lr=0.005\n\
         embed_dim=8\n\
         heads=2\n\
         inducing_points=8\n\
         ps_layers=2\n\
         tower_hidden=8\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let gen = sdmtl(&tiny_gen_args(data.to_str().unwrap(), "3"));
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let cfg = dir.path().join("tiny.cfg");
    write_tiny_train_cfg(&cfg);
    let train = sdmtl(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let line = last_stdout_line(&train);
    assert!(line.starts_with("status=ok"), "{line}");
    assert!(line.contains("epochs_run=2"), "{line}");
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("best.ckpt").exists());
    assert!(run.join("last.ckpt").exists());

    let best = run.join("best.ckpt");
    let eval = sdmtl(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        best.to_str().unwrap(),
        "--seed",
        "1",
        "--split",
        "test",
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let line = last_stdout_line(&eval);
    assert!(line.starts_with("status=ok"), "{line}");
    assert!(line.contains("auc_1=") && line.contains("auc_2="), "{line}");
    assert!(line.contains("violation_rate="), "{line}");
    assert!(line.contains("log_loss_1="), "{line}");

    let stats = dir.path().join("stats");
    let inspect = sdmtl(&[
        "inspect-selector",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        best.to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(inspect.status.success(), "{}", String::from_utf8_lossy(&inspect.stderr));
    let line = last_stdout_line(&inspect);
    assert!(line.starts_with("status=ok"), "{line}");
    let rates = std::fs::read_to_string(stats.join("rates.csv")).unwrap();
    assert!(rates.starts_with("sample_index,rate"), "{rates}");
    assert_eq!(rates.trim_end().lines().count(), 1 + 40, "one row per test sample");
    let hist = std::fs::read_to_string(stats.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count"), "{hist}");
}

#[test]
fn verify_theory_exit_codes() {
    let ok = sdmtl(&["verify-theory", "--seeds", "10", "--tol", "1e-10"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let line = last_stdout_line(&ok);
    assert!(line.starts_with("status=ok"), "{line}");
    assert!(line.contains("checks=40"), "{line}");

    // an impossible tolerance must fail with the dedicated exit code
    let fail = sdmtl(&["verify-theory", "--seeds", "10", "--tol", "0"]);
    assert_eq!(fail.status.code(), Some(3));
    let line = last_stdout_line(&fail);
    assert!(line.starts_with("status=fail"), "{line}");
}

#[test]
fn usage_and_runtime_errors_use_distinct_codes() {
    // unknown subcommand -> usage error
    let unknown = sdmtl(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));

    // missing required flag -> usage error
    let missing = sdmtl(&["eval"]);
    assert_eq!(missing.status.code(), Some(1));

    // --help is not an error
    let help = sdmtl(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));

    // missing config file -> runtime error with a status line
    let runtime = sdmtl(&["train", "--config", "/nonexistent/missing.cfg"]);
    assert_eq!(runtime.status.code(), Some(2));
    let line = last_stdout_line(&runtime);
    assert!(line.starts_with("status=error"), "{line}");
    assert!(
        String::from_utf8_lossy(&runtime.stderr).contains("missing.cfg"),
        "error names the file"
    );

    // unknown config key -> runtime error
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "modle=apem\n").unwrap();
    let badkey = sdmtl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(badkey.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&badkey.stderr).contains("unknown key"));

    // bad SDMTL_LOG value -> usage error
    let badlog = Command::new(env!("CARGO_BIN_EXE_sdmtl"))
        .args(["verify-theory", "--seeds", "1"])
        .env("SDMTL_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(badlog.status.code(), Some(1));
}
