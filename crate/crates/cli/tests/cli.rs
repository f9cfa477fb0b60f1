use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn capsbench(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsbench"))
        .args(args)
        .current_dir(cwd)
        .env("CAPSBENCH_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = capsbench(&["synth", "n_per_class=8,size=24,seed=3,jitter=0.05", "toy"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("wrote 32 images"));

    write(
        &d.join("lenet.cfg"),
        "model=lenet\ndataset=toy\ndata_dir=.\nlenet.kernel=3\nepochs=2\nbatch_size=8\ntiming=off\nseed=1\n",
    );
    let o = capsbench(&["train", "lenet.cfg", "--out", "run", "--set", "learning_rate=0.001"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("test accuracy"));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,accuracy,wall_time_s"));
    assert_eq!(metrics.lines().filter(|l| l.contains(",test,")).count(), 1);

    let o = capsbench(&["eval", "run/best.ckpt", "toy"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("accuracy "));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("g.cfg"),
        "model=lenet\ndataset=shapes\ngradcheck.size=24\nlenet.kernel=3\ngradcheck.samples=20\nseed=2\n",
    );
    let ok = capsbench(&["gradcheck", "g.cfg"], d);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS"));
    let bad = capsbench(&["gradcheck", "g.cfg", "--corrupt-backward"], d);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn fisherfaces_gradcheck_is_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("f.cfg"), "model=fisherfaces\ndataset=yale\n");
    let o = capsbench(&["gradcheck", "f.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("not applicable") || stdout(&o).contains("nothing to check"));
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(capsbench(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(capsbench(&["train"], d).status.code(), Some(1));

    write(&d.join("unknown.cfg"), "model=lenet\ndataset=yale\nnot_a_key=1\n");
    assert_eq!(capsbench(&["train", "unknown.cfg"], d).status.code(), Some(1));

    write(&d.join("missing.cfg"), "model=lenet\ndataset=yale\ndata_dir=nowhere\n");
    assert_eq!(capsbench(&["train", "missing.cfg"], d).status.code(), Some(2));

    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(capsbench(&["eval", "nope.ckpt", "empty"], d).status.code(), Some(2));
}

#[test]
fn preprocess_applies_the_dataset_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(capsbench(&["synth", "n_per_class=2,size=40,seed=1", "raw"], d).status.success());
    let o = capsbench(&["preprocess", "mit", "raw", "mit"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("8 images"));
    let index = fs::read_to_string(d.join("mit/index.csv")).unwrap();
    let first = index.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let pgm = fs::read(d.join("mit").join(first)).unwrap();
    let text = String::from_utf8_lossy(&pgm[..16]).into_owned();
    let header: Vec<&str> = text.split_whitespace().take(3).collect();
    assert_eq!(header, ["P5", "72", "55"]);
    assert_eq!(capsbench(&["preprocess", "nosuch", "raw", "out"], d).status.code(), Some(1));
}

#[test]
fn bench_writes_a_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(capsbench(&["synth", "n_per_class=10,size=24,seed=4", "data/toy"], d).status.success());
    fs::create_dir(d.join("cfgs")).unwrap();
    write(&d.join("cfgs/a_fisher.cfg"), "model=fisherfaces\ndataset=toy\ntiming=off\n");
    write(
        &d.join("cfgs/b_lenet.cfg"),
        "model=lenet\ndataset=toy\nlenet.kernel=3\nepochs=1\ntiming=off\n",
    );
    write(&d.join("cfgs/notes.txt"), "ignored");
    let o = capsbench(&["bench", "cfgs", "--out", "out"], d);
    assert!(o.status.success(), "{o:?}");
    let table = fs::read_to_string(d.join("out/results.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "dataset,classes,instances,algorithm,avg_training_time,test_accuracy");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("toy,4,40,fisherfaces,"));
    assert!(rows[2].starts_with("toy,4,40,lenet,"));
    assert!(stdout(&o).contains("| toy |"));
    assert!(d.join("out/b_lenet/metrics.csv").exists());
}
