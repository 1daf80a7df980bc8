//! End-to-end checks of the `bnas` binary: exit-code contract, artifact
//! layout, and reproducibility from the resolved snapshot.

use std::path::Path;
use std::process::{Command, Output};

fn bnas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnas"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// A config small enough to search and train in seconds.
const TINY: &str = "\
seed = 1

[data]
train_n = 96
test_n = 32
classes = 4

[search]
num_cells = 3
init_channels = 8
epochs = 2
batch_size = 16
eval_cap = 64

[train]
scheme = \"minimal\"
epochs = 2
batch_size = 16
num_cells = 3
init_channels = 8
eval_cap = 64
";

#[test]
fn config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "bogus_key = 1\n").unwrap();
    let out = bnas(&["search", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    assert_eq!(code(&bnas(&["search", "--scheme", "bogus"], dir.path())), 2);
    // a section key typo must not fall back to a default silently
    std::fs::write(dir.path().join("typo.toml"), "[search]\nlamda = 0.0\n").unwrap();
    assert_eq!(code(&bnas(&["search", "--config", "typo.toml"], dir.path())), 2);
}

#[test]
fn io_and_format_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = bnas(
        &["train", "--config", "tiny.toml", "--genotype", "missing.json", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(dir.path().join("bad.csv"), "a,b\n1,notanumber\n").unwrap();
    assert_eq!(code(&bnas(&["plot", "bad.csv"], dir.path())), 4);
}

#[test]
fn pipeline_round_trips_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();

    let out = bnas(&["search", "--config", "tiny.toml", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["resolved.toml", "genotype.json", "metrics.csv"] {
        assert!(run.join(f).exists(), "search must write {f}");
    }

    // criterion: a rerun from the snapshot alone reproduces the artifacts
    let resolved = run.join("resolved.toml");
    let out = bnas(
        &["search", "--config", resolved.to_str().unwrap(), "--out", "rerun"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["genotype.json", "metrics.csv"] {
        let a = std::fs::read(run.join(f)).unwrap();
        let b = std::fs::read(dir.path().join("rerun").join(f)).unwrap();
        assert_eq!(a, b, "{f} must rerun byte-identically");
    }

    let out = bnas(&["train", "--config", resolved.to_str().unwrap(), "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.ckpt", "curve.csv", "grad_norms.bin"] {
        assert!(run.join(f).exists(), "train must write {f}");
    }

    let out = bnas(&["eval", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test accuracy"));

    let out = bnas(&["export", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.bnasbin").exists());

    let out = bnas(&["bench", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("speedup"), "{stdout}");
    let agree = stdout.lines().find(|l| l.starts_with("packed vs float")).expect("agreement line");
    assert!(agree.contains("32/32"), "packed must agree with float on the test batch: {agree}");
    // bench recomputes the exact bytes export wrote
    assert_eq!(
        std::fs::read(run.join("bench_report.json")).unwrap(),
        std::fs::read(run.join("cost_report.json")).unwrap()
    );

    let out = bnas(
        &["plot", "run/curve.csv", "run/grad_norms.bin", "--out", "figs"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["curve.svg", "grad_norms.svg"] {
        let svg = std::fs::read_to_string(dir.path().join("figs").join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"), "{f} must hold data");
    }
}
