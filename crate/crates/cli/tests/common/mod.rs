#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use empathic::dataset::{build_dataset, DatasetConfig};
use empathic::features::make_splits;
use empathic::model::{checkpoint, TrainConfig};
use empathic::session::experiments::train_final;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub data: PathBuf,
    pub model: PathBuf,
}

/// A small saved dataset and a briefly trained model, shared per binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetConfig { subjects: 3, episodes: 3, ..Default::default() }).unwrap();
        let data = dir.path().join("data");
        ds.save(&data).unwrap();
        let splits = make_splits(&ds.episodes_per_subject(), ds.config.seed).unwrap();
        let (model, _) = train_final(&ds, &splits, &TrainConfig { max_epochs: 10, ..Default::default() }).unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint::save(&model, &path).unwrap();
        Fixture { data, model: path, _dir: dir }
    })
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_empathic"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
