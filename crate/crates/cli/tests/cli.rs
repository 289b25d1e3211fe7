use std::path::Path;
use std::process::{Command, Output};

use innae::data::synthetic::write_mnist_dir;
use innae::experiment::read_csv;

fn innae(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_innae"))
        .args(args)
        .env_remove("INNAE_MNIST_DIR")
        .env_remove("INNAE_CIFAR_DIR")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "innae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_and_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_mnist_dir(&data, 48, 12, 1).unwrap();
    let run = tmp.path().join("run");
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "model = classic\nbottleneck = 4\nepochs = 5\nbatch_size = 16\n").unwrap();

    innae(&[
        "train", "--config", s(&conf), "--epochs", "2", "--data-dir", s(&data), "--out", s(&run), "--seed", "3",
    ]);
    let rows = read_csv(&run.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2, "flag overrides the config file");
    assert_eq!((rows[0].model.as_str(), rows[0].k, rows[0].seed), ("classic", 4, 3));

    let eval = || stdout(&innae(&["eval", "--checkpoint", s(&run), "--data-dir", s(&data)]));
    let first = eval();
    assert_eq!(first, eval());
    let l1: f64 = first.trim().strip_prefix("test_l1 ").unwrap().parse().unwrap();
    assert!((l1 - rows[1].test_l1).abs() <= 1e-6 * l1);

    let grids = |dir: &Path| {
        innae(&[
            "dump-grids", "--checkpoint", s(&run), "--data-dir", s(&data), "--n", "5", "--seed", "2", "--out", s(dir),
        ]);
        ["inputs", "reconstructions", "differences"].map(|n| std::fs::read(dir.join(format!("{n}.pgm"))).unwrap())
    };
    let a = grids(&tmp.path().join("g1"));
    let b = grids(&tmp.path().join("g2"));
    assert_eq!(a, b);
    for img in &a {
        assert!(img.starts_with(b"P5\n84 56\n255\n"));
        assert_eq!(img.len(), b"P5\n84 56\n255\n".len() + 84 * 56);
    }
}

#[test]
fn inn_sweep_keeps_parameter_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_mnist_dir(&data, 16, 4, 2).unwrap();
    let out = tmp.path().join("sweep");
    innae(&[
        "sweep", "--model", "inn", "--bottleneck", "4,784", "--epochs", "1", "--batch-size", "8", "--data-dir", s(&data),
        "--out", s(&out),
    ]);
    let rows = read_csv(&out.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].param_count, rows[1].param_count);
    assert!(rows[1].test_l1 < 1e-4);
    assert!(out.join("fairness.csv").exists());
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = stdout(&innae(&["gradcheck"]));
    assert!(out.lines().count() >= 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_innae"))
        .args(["train", "--bottleneck", "900", "--data-dir", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bottleneck 900 exceeds"));
}
