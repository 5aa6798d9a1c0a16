//! End-to-end runs of the binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evbracket"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_writes_dataset_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "gen", "--nx", "16", "--nz", "3", "--sigma", "0.1", "--n", "2000", "--seed", "7",
            "--out", "data.csv",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("# seed = 7"));
    let text = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2000);
    assert!(rows.iter().all(|r| r.split(',').count() == 16));
    let model = evbracket::io::load_model(&dir.path().join("data.model.json")).unwrap();
    assert_eq!((model.n_x(), model.n_z(), model.sigma()), (16, 3, 0.1));

    // same seed, same bytes
    let again = run(
        dir.path(),
        &[
            "gen",
            "--nx",
            "16",
            "--nz",
            "3",
            "--sigma",
            "0.1",
            "--n",
            "2000",
            "--seed",
            "7",
            "--out",
            "again.csv",
        ],
    );
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(
        text,
        std::fs::read_to_string(dir.path().join("again.csv")).unwrap()
    );
}

#[test]
fn fit_ppca_recovers_noise_scale() {
    let dir = tempfile::tempdir().unwrap();
    let g = run(
        dir.path(),
        &[
            "gen",
            "--nx",
            "8",
            "--nz",
            "2",
            "--sigma",
            "0.2",
            "--n",
            "5000",
            "--seed",
            "1",
            "--out",
            "d.csv",
            "--model",
            "truth.bin",
        ],
    );
    assert_eq!(g.status.code(), Some(0));
    let o = run(
        dir.path(),
        &[
            "fit-ppca", "--data", "d.csv", "--nz", "2", "--out", "fit.json",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let fit = evbracket::io::load_model(&dir.path().join("fit.json")).unwrap();
    assert!((fit.sigma() - 0.2).abs() < 0.01, "sigma {}", fit.sigma());
    let truth = evbracket::io::load_model(&dir.path().join("truth.bin")).unwrap();
    assert_eq!(truth.n_z(), 2);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "1,2\n3,x\n").unwrap();
    let o = run(
        dir.path(),
        &[
            "fit-ppca", "--data", "bad.csv", "--nz", "1", "--out", "m.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(stdout(&o).lines().all(|l| l.starts_with('#')));

    let o = run(
        dir.path(),
        &[
            "fit-ppca",
            "--data",
            "missing.csv",
            "--nz",
            "1",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.csv"));

    assert_eq!(
        run(dir.path(), &["train", "--epochs", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["gen", "--nx", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["explode"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["train", "--seed", "1", "--objective", "nope"])
            .status
            .code(),
        Some(2)
    );

    std::fs::write(
        dir.path().join("bad.toml"),
        "objective = \"ELBO\"\nepochs = 0\n",
    )
    .unwrap();
    assert_eq!(
        run(
            dir.path(),
            &["train", "--config", "bad.toml", "--seed", "1"]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["check", "--trials", "100", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.matches("PASS").count(), 4);
    assert!(!out.contains("FAIL"));
}

#[test]
fn train_and_bracket_write_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "objective = \"ELBO\"\nn_x = 6\nn_z = 2\nhidden = []\nepochs = 4\nbatch_size = 20\n\
         learning_rate = 0.01\nseed = 5\neval_every = 2\neval_mc_samples = 16\n\
         metrics = \"bracket.jsonl\"\n[data]\nsource = \"synthetic\"\nsigma = 0.3\nn_points = 200\n",
    )
    .unwrap();
    let o = run(dir.path(), &["bracket", "--config", "run.cfg"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("width"));
    let lines = std::fs::read_to_string(dir.path().join("bracket.jsonl")).unwrap();
    // epochs 0, 2, 4 for each of the two runs
    assert_eq!(lines.lines().count(), 6);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "epoch",
            "objective",
            "value",
            "recon",
            "regu",
            "extra",
            "exact_evidence",
            "gap",
            "wall_time",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    let o = run(
        dir.path(),
        &[
            "train",
            "--config",
            "run.cfg",
            "--seed",
            "5",
            "--objective",
            "vae-c",
            "--metrics",
            "t.jsonl",
            "--checkpoint",
            "ck.json",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("objective = \"VAE_C\""));
    let ck = evbracket::nets::Checkpoint::load(&dir.path().join("ck.json")).unwrap();
    assert_eq!(ck.nets.len(), 3);
}
