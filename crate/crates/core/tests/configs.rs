use std::fs;
use std::path::{Path, PathBuf};

use capsbench::harness::{run_gradcheck, ExperimentConfig, ModelKind};

fn config_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            config_files(&path, out);
        } else if path.extension().is_some_and(|e| e == "cfg") {
            out.push(path);
        }
    }
}

fn shipped() -> Vec<PathBuf> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files = Vec::new();
    config_files(&root, &mut files);
    files.sort();
    files
}

#[test]
fn shipped_configs_parse_and_build() {
    let files = shipped();
    assert!(files.len() >= 10, "{files:?}");
    for f in &files {
        let cfg = ExperimentConfig::load(f, &[]).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        match cfg.model {
            ModelKind::CapsNet => drop(cfg.capsnet_config(64, 64, 4).unwrap()),
            ModelKind::LeNet => drop(cfg.lenet_config(90, 90, 62).unwrap()),
            ModelKind::TinyResNet => drop(cfg.resnet_config(32, 32, 100).unwrap()),
            ModelKind::Fisherfaces => assert!(cfg.n_components().unwrap() > 0),
        }
    }
}

#[test]
fn shipped_gradcheck_configs_pass() {
    for f in shipped().iter().filter(|f| f.file_name().unwrap().to_string_lossy().starts_with("gradcheck")) {
        let cfg = ExperimentConfig::load(f, &[]).unwrap();
        let out = run_gradcheck(&cfg, None).unwrap();
        assert!(out.passed(), "{}: {out:?}", f.display());
    }
}
