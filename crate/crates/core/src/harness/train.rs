//! Experiment driver: data loading, the training loop, K-fold and bench runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::AdamState;
use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, ModelKind};
use super::metrics::{
    evaluate_accuracy, results_markdown, write_metrics_csv, write_results_table, write_text, MetricsRecord,
    RunSummary, Split,
};
use crate::baselines::{FisherfaceModel, LeNet, TinyResNet};
use crate::capsnet::CapsNet;
use crate::data::{
    class_count, kfold_split, load_dataset_dir, split_dataset, synth_shapes, DatasetKind, PreprocessChain, Sample,
    ShapesSpec,
};
use crate::error::{Error, Result};
use crate::model::{Classifier, NeuralModel, SampleOutcome};
use crate::tensor::Tensor;

/// Loads one dataset reference: a `shapes:...` synth spec, a known dataset
/// name (read from `data_dir/<name>` through its preprocessing chain), or a
/// directory path, tried as given and then under `data_dir`.
pub fn load_samples(reference: &str, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    if reference.starts_with("shapes") {
        return synth_shapes(&ShapesSpec::parse(reference)?);
    }
    if let Ok(kind) = reference.parse::<DatasetKind>() {
        let dir = cfg.data_dir().join(kind.name());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "dataset {kind} not found: expected a directory at {}",
                dir.display()
            )));
        }
        let chain = PreprocessChain::for_dataset(kind, cfg.equalize_policy()?);
        return load_dataset_dir(&dir, Some(&chain));
    }
    let path = Path::new(reference);
    if path.is_dir() {
        return load_dataset_dir(path, None);
    }
    let under = cfg.data_dir().join(reference);
    if under.is_dir() {
        return load_dataset_dir(&under, None);
    }
    Err(Error::Dataset(format!("dataset {reference:?} not found")))
}

/// The three splits of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
    /// `[height, width, channels]` shared by every image.
    pub input_shape: [usize; 3],
}

impl ExperimentData {
    pub fn new(train: Vec<Sample>, validation: Vec<Sample>, test: Vec<Sample>, min_classes: usize) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Dataset("training split is empty".into()))?;
        let &[h, w, c] = first.image.shape() else {
            return Err(Error::Dataset(format!("expected H x W x C images, got {:?}", first.image.shape())));
        };
        let all = || train.iter().chain(&validation).chain(&test);
        if let Some(s) = all().find(|s| s.image.shape() != [h, w, c]) {
            return Err(Error::Dataset(format!(
                "{}: image shape {:?} differs from {:?}",
                s.source_id,
                s.image.shape(),
                [h, w, c]
            )));
        }
        let classes = [class_count(&train), class_count(&validation), class_count(&test), min_classes]
            .into_iter()
            .max()
            .unwrap_or(0);
        Ok(Self {
            train,
            validation,
            test,
            classes,
            input_shape: [h, w, c],
        })
    }

    pub fn instances(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

fn known_classes(reference: &str) -> usize {
    reference.parse::<DatasetKind>().map_or(0, DatasetKind::classes)
}

/// Loads the configured dataset and splits it 70/15/15, unless explicit
/// validation and test datasets are configured.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let samples = load_samples(&cfg.dataset, cfg)?;
    let min_classes = known_classes(&cfg.dataset);
    match (cfg.get("validation_dataset"), cfg.get("test_dataset")) {
        (Some(v), Some(t)) => {
            let validation = load_samples(v, cfg)?;
            let test = load_samples(t, cfg)?;
            ExperimentData::new(samples, validation, test, min_classes)
        }
        _ => {
            let split = split_dataset(samples, cfg.split_seed()?, cfg.stratified()?);
            ExperimentData::new(split.train, split.validation, split.test, min_classes)
        }
    }
}

/// A fitted model of any supported kind.
#[derive(Debug)]
pub enum TrainedModel {
    Fisherfaces(FisherfaceModel),
    CapsNet(CapsNet),
    LeNet(LeNet),
    TinyResNet(TinyResNet),
}

impl TrainedModel {
    /// Freshly initialised network for `cfg.model`; Fisherfaces has no
    /// untrained form and is rejected.
    pub fn build(cfg: &ExperimentConfig, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let [h, w, c] = input_shape;
        if c != 1 {
            return Err(Error::Dataset(format!("{} expects grayscale images, got {c} channels", cfg.model)));
        }
        Ok(match cfg.model {
            ModelKind::CapsNet => TrainedModel::CapsNet(CapsNet::build(cfg.capsnet_config(h, w, classes)?, cfg.seed)?),
            ModelKind::LeNet => TrainedModel::LeNet(LeNet::build(cfg.lenet_config(h, w, classes)?, cfg.seed)?),
            ModelKind::TinyResNet => {
                TrainedModel::TinyResNet(TinyResNet::build(cfg.resnet_config(h, w, classes)?, cfg.seed)?)
            }
            ModelKind::Fisherfaces => {
                return Err(Error::InvalidArgument("fisherfaces is built by fitting, not initialised".into()))
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Fisherfaces(_) => ModelKind::Fisherfaces,
            TrainedModel::CapsNet(_) => ModelKind::CapsNet,
            TrainedModel::LeNet(_) => ModelKind::LeNet,
            TrainedModel::TinyResNet(_) => ModelKind::TinyResNet,
        }
    }

    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            TrainedModel::Fisherfaces(m) => m,
            TrainedModel::CapsNet(m) => m,
            TrainedModel::LeNet(m) => m,
            TrainedModel::TinyResNet(m) => m,
        }
    }

    pub fn neural(&self) -> Option<&dyn NeuralModel> {
        match self {
            TrainedModel::Fisherfaces(_) => None,
            TrainedModel::CapsNet(m) => Some(m),
            TrainedModel::LeNet(m) => Some(m),
            TrainedModel::TinyResNet(m) => Some(m),
        }
    }

    pub fn neural_mut(&mut self) -> Option<&mut dyn NeuralModel> {
        match self {
            TrainedModel::Fisherfaces(_) => None,
            TrainedModel::CapsNet(m) => Some(m),
            TrainedModel::LeNet(m) => Some(m),
            TrainedModel::TinyResNet(m) => Some(m),
        }
    }

    /// Every persisted tensor: parameters and buffers, or the Fisherfaces blobs.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        match (self, self.neural()) {
            (TrainedModel::Fisherfaces(m), _) => m.to_blobs(),
            (_, Some(n)) => {
                let mut out: Vec<(String, Tensor)> =
                    n.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
                out.extend(n.buffers());
                out
            }
            (_, None) => unreachable!("every non-Fisherfaces model is neural"),
        }
    }

    fn load_state(&mut self, blobs: &[(String, Tensor)]) -> Result<()> {
        let n = self
            .neural_mut()
            .ok_or_else(|| Error::InvalidArgument("fisherfaces state is loaded with from_blobs".into()))?;
        n.params_mut().load_values(blobs)?;
        n.load_buffers(blobs)
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig, input_shape: [usize; 3], classes: usize) -> Checkpoint {
        Checkpoint {
            config_text: cfg.to_text(),
            input_shape,
            classes,
            blobs: self.state(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Self)> {
        let cfg = ExperimentConfig::parse(&ckpt.config_text)?;
        let model = if cfg.model == ModelKind::Fisherfaces {
            TrainedModel::Fisherfaces(FisherfaceModel::from_blobs(&ckpt.blobs, &ckpt.input_shape, ckpt.classes)?)
        } else {
            let mut m = Self::build(&cfg, ckpt.input_shape, ckpt.classes)?;
            m.load_state(&ckpt.blobs)?;
            m
        };
        Ok((cfg, model))
    }
}

/// A trained model (restored to its best-validation state) and its
/// train/validation records.
#[derive(Debug)]
pub struct FitResult {
    pub model: TrainedModel,
    pub records: Vec<MetricsRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_time_s: f64,
}

fn mean_outcome(outcomes: &[SampleOutcome], samples: &[Sample]) -> (f64, f64) {
    let n = outcomes.len().max(1) as f64;
    let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / n;
    let correct = outcomes.iter().zip(samples).filter(|(o, s)| o.predicted == s.label).count();
    (loss, correct as f64 / n)
}

fn evaluate_split(model: &dyn NeuralModel, samples: &[Sample]) -> Result<(f64, f64)> {
    let outcomes: Vec<SampleOutcome> = samples.par_iter().map(|s| model.evaluate(s)).collect::<Result<_>>()?;
    Ok(mean_outcome(&outcomes, samples))
}

struct Clock(Option<Instant>);

impl Clock {
    fn start(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

fn numeric_abort(out_dir: Option<&Path>, records: &[MetricsRecord], message: String) -> Error {
    if let Some(dir) = out_dir {
        let _ = write_metrics_csv(records, dir.join("metrics.csv"));
        let _ = write_text(&dir.join("diagnostic.txt"), &format!("{message}\n"));
    }
    Error::Numeric(message)
}

/// Validation accuracy, validation loss, epoch and model state.
type Snapshot = (f64, f64, usize, Vec<(String, Tensor)>);

/// Trains `cfg.model` on `train`, selecting the epoch with the best
/// validation accuracy (lower loss breaks ties). When `out_dir` is given,
/// the best state is saved there as `best.ckpt` whenever it improves.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &[Sample],
    validation: &[Sample],
    input_shape: [usize; 3],
    classes: usize,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let timing = cfg.timing()?;
    let started = Instant::now();

    if cfg.model == ModelKind::Fisherfaces {
        let clock = Clock::start(timing);
        let model = FisherfaceModel::fit(train, cfg.n_components()?)?;
        let fit_time = clock.seconds();
        let mut records = vec![MetricsRecord {
            epoch: 1,
            split: Split::Train,
            loss: 0.0,
            accuracy: evaluate_accuracy(&model, train)?,
            wall_time_s: fit_time,
        }];
        if !validation.is_empty() {
            let clock = Clock::start(timing);
            let accuracy = evaluate_accuracy(&model, validation)?;
            records.push(MetricsRecord {
                epoch: 1,
                split: Split::Validation,
                loss: 0.0,
                accuracy,
                wall_time_s: clock.seconds(),
            });
        }
        let model = TrainedModel::Fisherfaces(model);
        if let Some(dir) = out_dir {
            model.to_checkpoint(cfg, input_shape, classes).save(dir.join("best.ckpt"))?;
        }
        return Ok(FitResult {
            model,
            records,
            epochs_run: 1,
            best_epoch: 1,
            train_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let mut model = TrainedModel::build(cfg, input_shape, classes)?;
    let net = model.neural_mut().expect("built models are neural");
    let mut adam = AdamState::new(net.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let patience = cfg.patience()?;

    let mut records = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        let clock = Clock::start(timing);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let result = net.batch_gradient(&batch, None)?;
            if !result.loss.is_finite() || result.grads.iter().any(|g| !g.is_finite()) {
                let msg = format!(
                    "non-finite training loss {} at epoch {epoch}, samples {}..",
                    result.loss, batch[0].source_id
                );
                return Err(numeric_abort(out_dir, &records, msg));
            }
            loss_sum += result.loss * batch.len() as f64;
            correct += result.predictions.iter().zip(&batch).filter(|(p, s)| **p == s.label).count();
            adam.step(net.params_mut(), &result.grads)?;
        }
        let n = train.len() as f64;
        records.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            wall_time_s: clock.seconds(),
        });
        epochs_run = epoch;

        let (val_loss, val_acc) = if validation.is_empty() {
            (loss_sum / n, correct as f64 / n)
        } else {
            let clock = Clock::start(timing);
            let (loss, accuracy) = evaluate_split(&*net, validation)?;
            if !loss.is_finite() {
                let msg = format!("non-finite validation loss {loss} at epoch {epoch}");
                return Err(numeric_abort(out_dir, &records, msg));
            }
            records.push(MetricsRecord {
                epoch,
                split: Split::Validation,
                loss,
                accuracy,
                wall_time_s: clock.seconds(),
            });
            (loss, accuracy)
        };
        log::info!(
            "{} epoch {epoch}/{}: train loss {:.5} acc {:.4}, validation loss {val_loss:.5} acc {val_acc:.4}",
            cfg.model,
            cfg.epochs,
            loss_sum / n,
            correct as f64 / n
        );

        let improved = best
            .as_ref()
            .is_none_or(|&(acc, loss, _, _)| val_acc > acc || (val_acc == acc && val_loss < loss));
        if improved {
            let state: Vec<(String, Tensor)> = {
                let mut s: Vec<(String, Tensor)> =
                    net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
                s.extend(net.buffers());
                s
            };
            if let Some(dir) = out_dir {
                Checkpoint {
                    config_text: cfg.to_text(),
                    input_shape,
                    classes,
                    blobs: state.clone(),
                }
                .save(dir.join("best.ckpt"))?;
            }
            best = Some((val_acc, val_loss, epoch, state));
        }
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if patience > 0 && stale >= patience {
                log::info!("validation loss has not improved for {patience} epochs; stopping");
                break;
            }
        }
    }

    let (_, _, best_epoch, state) = best.expect("at least one epoch ran");
    model.load_state(&state)?;
    Ok(FitResult {
        model,
        records,
        epochs_run,
        best_epoch,
        train_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Everything a finished `train` run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub fit: FitResult,
    /// Train and validation records followed by the single test record.
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub output_dir: PathBuf,
}

fn test_record(cfg: &ExperimentConfig, fit: &FitResult, test: &[Sample]) -> Result<MetricsRecord> {
    let clock = Clock::start(cfg.timing()?);
    let (loss, accuracy) = match fit.model.neural() {
        Some(net) => evaluate_split(net, test)?,
        None => (0.0, evaluate_accuracy(fit.model.classifier(), test)?),
    };
    Ok(MetricsRecord {
        epoch: fit.epochs_run,
        split: Split::Test,
        loss,
        accuracy,
        wall_time_s: clock.seconds(),
    })
}

/// Loads data, trains, evaluates the test split once with the best
/// weights, and writes `metrics.csv`, `summary.csv` and `best.ckpt` into
/// the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = load_experiment_data(cfg)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!(
        "{} on {}: {} train / {} validation / {} test, {} classes",
        cfg.model,
        cfg.dataset,
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.classes
    );
    let fit = train_model(cfg, &data.train, &data.validation, data.input_shape, data.classes, Some(&out))?;
    let mut records = fit.records.clone();
    if !data.test.is_empty() {
        records.push(test_record(cfg, &fit, &data.test)?);
    }
    write_metrics_csv(&records, out.join("metrics.csv"))?;
    let summary = RunSummary {
        dataset: cfg.dataset.clone(),
        classes: data.classes,
        instances: data.instances(),
        algorithm: cfg.model.to_string(),
        avg_training_time: if cfg.timing()? { fit.train_time_s } else { 0.0 },
        test_accuracy: records.iter().find(|r| r.split == Split::Test).map_or(0.0, |r| r.accuracy),
    };
    write_results_table(std::slice::from_ref(&summary), out.join("summary.csv"))?;
    Ok(RunOutcome {
        fit,
        records,
        summary,
        output_dir: out,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFoldReport {
    /// Validation accuracy per fold, in `(repeat, fold)` order.
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_train_time_s: f64,
}

/// Repeated K-fold cross-validation over the configured dataset.
pub fn run_kfold(cfg: &ExperimentConfig) -> Result<KFoldReport> {
    let (k, repeats) = cfg
        .kfold()?
        .ok_or_else(|| Error::Config("kfold.k is not set".into()))?;
    let samples = load_samples(&cfg.dataset, cfg)?;
    let data = ExperimentData::new(samples, Vec::new(), Vec::new(), known_classes(&cfg.dataset))?;
    let folds = kfold_split(data.train.len(), k, repeats, cfg.split_seed()?)?;
    let mut fold_accuracies = Vec::with_capacity(folds.len());
    let mut total_time = 0.0;
    for fold in &folds {
        let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| data.train[i].clone()).collect() };
        let (train, validation) = (pick(&fold.train), pick(&fold.validation));
        let fit = train_model(cfg, &train, &validation, data.input_shape, data.classes, None)?;
        let acc = evaluate_accuracy(fit.model.classifier(), &validation)?;
        log::info!("repeat {} fold {}: validation accuracy {acc:.4}", fold.repeat, fold.fold);
        fold_accuracies.push(acc);
        total_time += fit.train_time_s;
    }
    let n = fold_accuracies.len() as f64;
    Ok(KFoldReport {
        mean_accuracy: fold_accuracies.iter().sum::<f64>() / n,
        mean_train_time_s: total_time / n,
        fold_accuracies,
    })
}

/// Accuracy of a saved model on a dataset reference.
pub fn evaluate_checkpoint(ckpt_path: impl AsRef<Path>, dataset: &str) -> Result<f64> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (cfg, model) = TrainedModel::from_checkpoint(&ckpt)?;
    let samples = load_samples(dataset, &cfg)?;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != ckpt.input_shape) {
        return Err(Error::Dataset(format!(
            "{}: image shape {:?}, model expects {:?}",
            s.source_id,
            s.image.shape(),
            ckpt.input_shape
        )));
    }
    evaluate_accuracy(model.classifier(), &samples)
}

/// Runs every `*.cfg` file in `config_dir` (sorted by name), each into
/// `<output_root>/<file stem>`, and writes the combined `results.csv`.
pub fn run_bench(config_dir: impl AsRef<Path>, output_root: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let (config_dir, output_root) = (config_dir.as_ref(), output_root.as_ref());
    let mut files: Vec<PathBuf> = fs::read_dir(config_dir)
        .map_err(|e| Error::io(config_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .cfg files in {}", config_dir.display())));
    }
    fs::create_dir_all(output_root).map_err(|e| Error::io(output_root, e))?;
    let mut summaries = Vec::with_capacity(files.len());
    for file in &files {
        let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let out = output_root.join(&stem);
        let cfg = ExperimentConfig::load(file, &[("output_dir".into(), out.to_string_lossy().into_owned())])?;
        log::info!("bench: {}", file.display());
        let summary = match cfg.kfold()? {
            Some(_) => {
                let report = run_kfold(&cfg)?;
                let samples = load_samples(&cfg.dataset, &cfg)?;
                RunSummary {
                    dataset: cfg.dataset.clone(),
                    classes: class_count(&samples).max(known_classes(&cfg.dataset)),
                    instances: samples.len(),
                    algorithm: cfg.model.to_string(),
                    avg_training_time: report.mean_train_time_s,
                    test_accuracy: report.mean_accuracy,
                }
            }
            None => run_experiment(&cfg)?.summary,
        };
        summaries.push(summary);
    }
    write_results_table(&summaries, output_root.join("results.csv"))?;
    write_text(&output_root.join("results.md"), &results_markdown(&summaries))?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str, out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::parse(text).unwrap();
        c.set("output_dir", out.to_string_lossy()).unwrap();
        c
    }

    #[test]
    fn fisherfaces_gives_one_record_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(
            "model=fisherfaces\ndataset=shapes:n_per_class=12,size=16,jitter=0.05,seed=3\nfisherfaces.n_components=3\n",
            dir.path(),
        );
        let run = run_experiment(&c).unwrap();
        let splits: Vec<Split> = run.records.iter().map(|r| r.split).collect();
        assert_eq!(splits, [Split::Train, Split::Validation, Split::Test]);
        assert!(run.records.iter().all(|r| r.epoch == 1 && (0.0..=1.0).contains(&r.accuracy)));
        let ckpt = Checkpoint::load(dir.path().join("best.ckpt")).unwrap();
        let (_, back) = TrainedModel::from_checkpoint(&ckpt).unwrap();
        let data = load_experiment_data(&c).unwrap();
        let a = evaluate_accuracy(back.classifier(), &data.test).unwrap();
        assert_eq!(a, run.summary.test_accuracy);
    }

    #[test]
    fn short_lenet_run_writes_outputs_and_restores_best() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(
            "model=lenet\ndataset=shapes:n_per_class=10,size=32,seed=1\nlenet.kernel=3\nepochs=3\nbatch_size=8\nlearning_rate=0.001\ntiming=off\n",
            dir.path(),
        );
        let run = run_experiment(&c).unwrap();
        assert_eq!(run.records.len(), 7);
        assert!(run.records.iter().all(|r| r.wall_time_s == 0.0));
        for name in ["metrics.csv", "summary.csv", "best.ckpt"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let best_val = run
            .records
            .iter()
            .filter(|r| r.split == Split::Validation && r.epoch == run.fit.best_epoch)
            .map(|r| r.accuracy)
            .next()
            .unwrap();
        let data = load_experiment_data(&c).unwrap();
        let restored = evaluate_accuracy(run.fit.model.classifier(), &data.validation).unwrap();
        assert_eq!(restored, best_val);
    }

    #[test]
    fn patience_stops_early() {
        let c = ExperimentConfig::parse(
            "model=lenet\ndataset=shapes\nlenet.kernel=3\nepochs=20\nbatch_size=4\nlearning_rate=0.003\npatience=2\ntiming=off\n",
        )
        .unwrap();
        let spec = ShapesSpec::parse("n_per_class=4,size=32,seed=2").unwrap();
        let train = synth_shapes(&spec).unwrap();
        // relabelled copies: fitting the training set drives their loss up
        let val: Vec<Sample> = train
            .iter()
            .map(|s| Sample::new(s.image.clone(), (s.label + 1) % 4, ""))
            .collect();
        let fit = train_model(&c, &train, &val, [32, 32, 1], 4, None).unwrap();
        assert!(fit.epochs_run < 20, "{}", fit.epochs_run);
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let c = ExperimentConfig::parse("model=lenet\ndataset=yale\ndata_dir=/nonexistent\n").unwrap();
        let err = load_experiment_data(&c).unwrap_err();
        assert!(err.is_data_error(), "{err}");
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(
            "model=lenet\ndataset=shapes\nlenet.kernel=3\nepochs=2\nbatch_size=4\ntiming=off\n",
            dir.path(),
        );
        let spec = ShapesSpec::parse("n_per_class=2,size=32,seed=2").unwrap();
        let mut samples = synth_shapes(&spec).unwrap();
        samples[0].image.data_mut()[5] = f64::NAN;
        let err = train_model(&c, &samples, &[], [32, 32, 1], 4, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(dir.path().join("diagnostic.txt").is_file());
        assert!(dir.path().join("metrics.csv").is_file());
    }

    #[test]
    fn kfold_mean_is_mean_of_folds() {
        let c = ExperimentConfig::parse(
            "model=fisherfaces\ndataset=shapes:n_per_class=6,size=12,seed=4\nkfold.k=3\nkfold.repeats=2\nfisherfaces.n_components=3\n",
        )
        .unwrap();
        let r = run_kfold(&c).unwrap();
        assert_eq!(r.fold_accuracies.len(), 6);
        let mut s = 0.0;
        for a in &r.fold_accuracies {
            s += a;
        }
        assert_eq!(r.mean_accuracy, s / 6.0);
    }
}
