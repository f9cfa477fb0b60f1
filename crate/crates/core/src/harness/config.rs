//! Line-oriented `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{LeNetConfig, TinyResNetConfig, DEFAULT_COMPONENTS};
use crate::capsnet::{default_recon_weight, CapsNetConfig, RoutingGradient};
use crate::data::EqualizePolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    CapsNet,
    LeNet,
    Fisherfaces,
    TinyResNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CapsNet => "capsnet",
            ModelKind::LeNet => "lenet",
            ModelKind::Fisherfaces => "fisherfaces",
            ModelKind::TinyResNet => "tiny_resnet",
        }
    }

    pub fn is_neural(self) -> bool {
        self != ModelKind::Fisherfaces
    }

    fn default_batch_size(self) -> usize {
        match self {
            ModelKind::CapsNet => 16,
            ModelKind::LeNet => 128,
            ModelKind::TinyResNet => 64,
            ModelKind::Fisherfaces => 1,
        }
    }

    fn default_learning_rate(self) -> f64 {
        match self {
            ModelKind::LeNet => 1e-4,
            _ => 1e-3,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "capsnet" => ModelKind::CapsNet,
            "lenet" => ModelKind::LeNet,
            "fisherfaces" | "fisherface" => ModelKind::Fisherfaces,
            "tiny_resnet" | "resnet" => ModelKind::TinyResNet,
            _ => return Err(Error::Config(format!("unknown model {s:?}"))),
        })
    }
}

const KEYS: &[&str] = &[
    "model",
    "dataset",
    "validation_dataset",
    "test_dataset",
    "data_dir",
    "output_dir",
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "split_seed",
    "stratified",
    "timing",
    "patience",
    "equalize",
    "equalize.min_range",
    "equalize.entropy_threshold",
    "kfold.k",
    "kfold.repeats",
    "gradcheck.size",
    "gradcheck.classes",
    "gradcheck.samples",
    "gradcheck.tolerance",
    "gradcheck.step",
    "capsnet.D1",
    "capsnet.D2",
    "capsnet.F",
    "capsnet.stem_maps",
    "capsnet.stem_kernel",
    "capsnet.primary_kernel",
    "capsnet.primary_stride",
    "capsnet.routing_iterations",
    "capsnet.routing_gradient",
    "capsnet.recon_weight",
    "capsnet.decoder_h1",
    "capsnet.decoder_h2",
    "capsnet.routing_init_std",
    "capsnet.m_plus",
    "capsnet.m_minus",
    "capsnet.lambda",
    "lenet.kernel",
    "resnet.blocks",
    "resnet.channels",
    "fisherfaces.n_components",
];

/// Short spellings accepted for frequently used model keys.
fn canonical(key: &str) -> &str {
    match key {
        "D1" => "capsnet.D1",
        "D2" => "capsnet.D2",
        "F" => "capsnet.F",
        "routing_iterations" => "capsnet.routing_iterations",
        "n_components" => "fisherfaces.n_components",
        other => other,
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One validated experiment. Unset keys fall back to per-model defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
    pub model: ModelKind,
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Reads a config file; `overrides` win over file values.
    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(pairs)
    }

    /// Later pairs override earlier ones.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            let key = canonical(&k);
            if KEYS.contains(&key) {
                entries.insert(key.to_string(), v);
            } else if !unknown.contains(&k) {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let model: ModelKind = entries
            .get("model")
            .ok_or_else(|| Error::Config("missing required key `model`".into()))?
            .parse()?;
        let dataset = entries
            .get("dataset")
            .cloned()
            .ok_or_else(|| Error::Config("missing required key `dataset`".into()))?;
        let mut cfg = Self {
            entries,
            model,
            dataset,
            epochs: 0,
            batch_size: 0,
            learning_rate: 0.0,
            seed: 0,
        };
        cfg.epochs = cfg.get_or("epochs", 10)?;
        cfg.batch_size = cfg.get_or("batch_size", model.default_batch_size())?;
        cfg.learning_rate = cfg.get_or("learning_rate", model.default_learning_rate())?;
        cfg.seed = cfg.get_or("seed", 0)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.model.is_neural() && self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.entries.contains_key("validation_dataset") != self.entries.contains_key("test_dataset") {
            return Err(Error::Config(
                "validation_dataset and test_dataset must be given together".into(),
            ));
        }
        // surface malformed optional values now rather than mid-run
        self.equalize_policy()?;
        self.timing()?;
        self.stratified()?;
        self.patience()?;
        self.kfold()?;
        Ok(())
    }

    /// Raw value of a key as written (after alias resolution).
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(canonical(key)).map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("on" | "true" | "yes" | "1") => Ok(true),
            Some("off" | "false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("bad value for {key}: {v:?} (use on/off)"))),
        }
    }

    /// Canonical `key=value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let mut pairs: Vec<(String, String)> = self.entries.clone().into_iter().collect();
        pairs.push((key.to_string(), value.into()));
        *self = Self::from_pairs(pairs)?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data_dir").unwrap_or("data"))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output_dir").unwrap_or("runs"))
    }

    pub fn split_seed(&self) -> Result<u64> {
        self.get_or("split_seed", self.seed)
    }

    pub fn stratified(&self) -> Result<bool> {
        self.flag("stratified", true)
    }

    /// Whether epoch wall time is measured. When off, every record reports
    /// 0 s so metrics files are reproducible byte for byte.
    pub fn timing(&self) -> Result<bool> {
        self.flag("timing", true)
    }

    /// Epochs without validation-loss improvement before stopping; 0 = never.
    pub fn patience(&self) -> Result<usize> {
        self.get_or("patience", 0)
    }

    /// `(K, repeats)` when K-fold evaluation is requested.
    pub fn kfold(&self) -> Result<Option<(usize, usize)>> {
        let k: usize = self.get_or("kfold.k", 0)?;
        let repeats: usize = self.get_or("kfold.repeats", 1)?;
        Ok((k > 0).then_some((k, repeats)))
    }

    pub fn equalize_policy(&self) -> Result<EqualizePolicy> {
        let EqualizePolicy::Auto {
            min_range,
            entropy_threshold,
        } = EqualizePolicy::default()
        else {
            unreachable!("default policy is automatic")
        };
        match self.get("equalize").unwrap_or("auto") {
            "always" => Ok(EqualizePolicy::Always),
            "never" => Ok(EqualizePolicy::Never),
            "auto" => Ok(EqualizePolicy::Auto {
                min_range: self.get_or("equalize.min_range", min_range)?,
                entropy_threshold: self.get_or("equalize.entropy_threshold", entropy_threshold)?,
            }),
            v => Err(Error::Config(format!("bad value for equalize: {v:?} (always/never/auto)"))),
        }
    }

    pub fn capsnet_config(&self, height: usize, width: usize, classes: usize) -> Result<CapsNetConfig> {
        let mut c = CapsNetConfig::new(height, width, classes);
        c.primary_dim = self.get_or("capsnet.D1", c.primary_dim)?;
        c.class_dim = self.get_or("capsnet.D2", c.class_dim)?;
        c.primary_channels = self.get_or("capsnet.F", c.primary_channels)?;
        c.stem_maps = self.get_or("capsnet.stem_maps", c.stem_maps)?;
        c.stem_kernel = self.get_or("capsnet.stem_kernel", c.stem_kernel)?;
        c.primary_kernel = self.get_or("capsnet.primary_kernel", c.primary_kernel)?;
        c.primary_stride = self.get_or("capsnet.primary_stride", c.primary_stride)?;
        c.routing_iterations = self.get_or("capsnet.routing_iterations", c.routing_iterations)?;
        c.routing_gradient = match self.get("capsnet.routing_gradient").unwrap_or("full") {
            "full" => RoutingGradient::Full,
            "stop" | "stop_gradient" => RoutingGradient::StopGradient,
            v => return Err(Error::Config(format!("bad value for capsnet.routing_gradient: {v:?} (full/stop)"))),
        };
        c.recon_weight = self.get_or("capsnet.recon_weight", default_recon_weight(height, width))?;
        c.decoder_hidden = [
            self.get_or("capsnet.decoder_h1", c.decoder_hidden[0])?,
            self.get_or("capsnet.decoder_h2", c.decoder_hidden[1])?,
        ];
        c.routing_init_std = self.get_or("capsnet.routing_init_std", c.routing_init_std)?;
        c.margin.m_plus = self.get_or("capsnet.m_plus", c.margin.m_plus)?;
        c.margin.m_minus = self.get_or("capsnet.m_minus", c.margin.m_minus)?;
        c.margin.lambda = self.get_or("capsnet.lambda", c.margin.lambda)?;
        c.validate()?;
        Ok(c)
    }

    pub fn lenet_config(&self, height: usize, width: usize, classes: usize) -> Result<LeNetConfig> {
        let mut c = LeNetConfig::new(height, width, classes);
        c.kernel = self.get_or("lenet.kernel", c.kernel)?;
        c.validate()?;
        Ok(c)
    }

    pub fn resnet_config(&self, height: usize, width: usize, classes: usize) -> Result<TinyResNetConfig> {
        let mut c = TinyResNetConfig::new(height, width, classes);
        c.blocks = self.get_or("resnet.blocks", c.blocks)?;
        c.channels = self.get_or("resnet.channels", c.channels)?;
        c.validate()?;
        Ok(c)
    }

    pub fn n_components(&self) -> Result<usize> {
        self.get_or("fisherfaces.n_components", DEFAULT_COMPONENTS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_setting() {
        let c = ExperimentConfig::parse("model=lenet\ndataset=belgiumts\nlearning_rate=0.0001\nbatch_size=128\n").unwrap();
        assert_eq!(c.model, ModelKind::LeNet);
        assert_eq!(c.learning_rate, 0.0001);
        assert_eq!(c.batch_size, 128);
    }

    #[test]
    fn missing_model() {
        let err = ExperimentConfig::parse("dataset=mit\n").unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn override_wins() {
        let mut pairs = parse_pairs("model=capsnet\ndataset=yale\nepochs=10\n").unwrap();
        pairs.push(("epochs".into(), "40".into()));
        assert_eq!(ExperimentConfig::from_pairs(pairs).unwrap().epochs, 40);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::parse("model=lenet\ndataset=x\ncolour=red\nsize=3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("colour") && msg.contains("size"), "{msg}");
    }

    #[test]
    fn comments_aliases_and_defaults() {
        let c = ExperimentConfig::parse("# yale\nmodel = capsnet  # trailing\ndataset=yale\nD1=8\nF=8\ncapsnet.D2=8\n").unwrap();
        assert_eq!(c.batch_size, 16);
        let caps = c.capsnet_config(84, 96, 38).unwrap();
        assert_eq!((caps.primary_dim, caps.primary_channels, caps.class_dim), (8, 8, 8));
        let round = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::parse("model=lenet\ndataset=x\nbatch_size=0\n").is_err());
        assert!(ExperimentConfig::parse("model=lenet\ndataset=x\ntiming=maybe\n").is_err());
        assert!(ExperimentConfig::parse("model=lenet\ndataset=x\ntest_dataset=y\n").is_err());
        assert!(ExperimentConfig::parse("model=lenet\ndataset=x\nlearning_rate=0\n").is_err());
    }
}
