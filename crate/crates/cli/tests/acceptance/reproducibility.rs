//! End-to-end runs of the binary and the shipped profile configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use docgrid::network::{load_checkpoint, Checkpoint};
use docgrid_cli::ExperimentConfig;

use crate::{ensure, ok, Outcome};

fn docgrid(args: &[&str]) -> Result<String, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_docgrid")).args(args).output())?;
    ensure!(
        out.status.success(),
        "docgrid {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temp paths are utf-8")
}

pub fn reproducibility() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let data = dir.path().join("data");
    docgrid(&[
        "--threads",
        "1",
        "gen-data",
        "--per-class",
        "12",
        "--size",
        "64",
        "--seed",
        "3",
        "--out",
        path(&data),
    ])?;
    let config = serde_json::json!({
        "manifest": data.join("manifest.csv"),
        "output_dir": dir.path().join("unused"),
        "seed": 5,
        "transform": {"kind": "shear"},
        "arch": {"input_size": 64, "depth": 2, "width": {"conv": 0.1, "fc": 0.1}, "classes": 4},
        "train": {"batch_size": 8, "updates": 30, "base_lr": 0.01, "lr_step": 20, "val_interval": 10}
    });
    let cfg_path = dir.path().join("run.json");
    ok(fs::write(&cfg_path, config.to_string()))?;

    let run = |name: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        docgrid(&[
            "--threads",
            "1",
            "train",
            "--config",
            path(&cfg_path),
            "--out",
            path(&out),
            "--quiet",
        ])?;
        Ok(out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let csv_a = ok(fs::read(a.join("train.csv")))?;
    let csv_b = ok(fs::read(b.join("train.csv")))?;
    ensure!(csv_a == csv_b, "train.csv differs between identical runs");
    let ckpt_a = ok(fs::read(a.join("best.ckpt")))?;
    ensure!(
        ckpt_a == ok(fs::read(b.join("best.ckpt")))?,
        "best.ckpt differs between identical runs"
    );

    let loaded = ok(load_checkpoint(a.join("best.ckpt")))?;
    let bytes = ok(loaded.to_bytes())?;
    ensure!(bytes == ckpt_a, "re-serialized checkpoint differs from the file");
    let again = ok(Checkpoint::from_bytes(&bytes))?;
    ensure!(again == loaded, "checkpoint changed across a byte round trip");
    let rows = csv_a.iter().filter(|&&c| c == b'\n').count();
    Ok(format!(
        "two --threads 1 runs gave identical train.csv ({rows} lines) and best.ckpt ({} bytes); round trip exact",
        ckpt_a.len()
    ))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Profile {
    file: &'static str,
    batch: usize,
    updates: usize,
    lr: f64,
    step: usize,
    decay: f64,
}

const PROFILES: [Profile; 2] = [
    Profile {
        file: "rvl-cdip.json",
        batch: 32,
        updates: 500_000,
        lr: 0.003,
        step: 150_000,
        decay: 0.1,
    },
    Profile {
        file: "andoc.json",
        batch: 128,
        updates: 250_000,
        lr: 0.005,
        step: 100_000,
        decay: 0.1,
    },
];

pub fn hyperparameters() -> Outcome {
    for p in PROFILES {
        let cfg = ok(ExperimentConfig::load(configs().join(p.file)))?;
        let t = cfg.train_config();
        let got = (t.batch_size, t.updates, t.base_lr, t.lr_step, t.lr_decay);
        let want = (p.batch, p.updates, p.lr, p.step, p.decay);
        ensure!(
            got == want,
            "{}: (batch, updates, lr, step, decay) {got:?}, want {want:?}",
            p.file
        );
    }
    let shear = ok(ExperimentConfig::load(configs().join("synth-shear.cfg")))?;
    ensure!(
        shear.transform.shear == [-10.0, 10.0],
        "synth-shear.cfg shear range {:?}",
        shear.transform.shear
    );
    Ok("rvl-cdip 32/500000/0.003/x0.1@150000, andoc 128/250000/0.005/x0.1@100000".into())
}
