//! `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`train.lr = 0.001`). Every key has a default; unknown keys and
//! malformed values are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use spikelab::hessian::HessianSettings;
use spikelab::init::{InitKind, InitScheme};
use spikelab::network::{Encoder, Mode};
use spikelab::neuron::{NeuronModel, NeuronSpec, ResetMode, SurrogateKind, SurrogateSpec};
use spikelab::train::{OptimizerConfig, Thresholds, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug)]
enum Kind {
    UInt,
    Real,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    /// Comma-separated list of choices.
    ChoiceList(&'static [&'static str]),
    UIntList,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::UInt => "a nonnegative integer".into(),
            Kind::Real => "a real number".into(),
            Kind::Bool => "true or false".into(),
            Kind::Text => "text".into(),
            Kind::Choice(c) => format!("one of {}", c.join(", ")),
            Kind::ChoiceList(c) => format!("a comma-separated list drawn from {}", c.join(", ")),
            Kind::UIntList => "a comma-separated list of nonnegative integers".into(),
        }
    }
}

const SCHEMES: &[&str] = &["normal", "lecun", "xavier", "kaiming", "ikun_v1", "ikun_v2"];

/// `(key, kind, default)`; the default is the literal a file would contain.
const KEYS: &[(&str, Kind, &str)] = &[
    ("seed", Kind::UInt, "0"),
    ("out", Kind::Text, "out"),
    ("data.source", Kind::Choice(&["fashion_mnist", "synthetic"]), "fashion_mnist"),
    ("data.dir", Kind::Text, "data/fashion-mnist"),
    ("data.train_size", Kind::UInt, "10000"),
    ("data.test_size", Kind::UInt, "2000"),
    ("data.subset_seed", Kind::UInt, "0"),
    ("net.conv1_channels", Kind::UInt, "8"),
    ("net.conv2_channels", Kind::UInt, "16"),
    ("net.time_steps", Kind::UInt, "4"),
    ("net.encoder", Kind::Choice(&["constant", "poisson"]), "constant"),
    ("neuron.model", Kind::Choice(&["lif", "if"]), "lif"),
    ("neuron.tau", Kind::Real, "2"),
    ("neuron.v_threshold", Kind::Real, "1"),
    ("neuron.v_reset", Kind::Real, "0"),
    ("neuron.reset", Kind::Choice(&["hard", "soft"]), "hard"),
    ("neuron.dt", Kind::Real, "1"),
    ("neuron.capacitance", Kind::Real, "1"),
    ("surrogate.kind", Kind::Choice(&["sigmoid", "atan", "triangular", "constant"]), "sigmoid"),
    ("surrogate.alpha", Kind::Real, "4"),
    ("init.kind", Kind::Choice(SCHEMES), "ikun_v2"),
    ("init.alpha", Kind::Real, "2"),
    ("init.std", Kind::Real, "0.05"),
    ("init.calibrate", Kind::Bool, "false"),
    ("init.calibration_size", Kind::UInt, "256"),
    ("train.optimizer", Kind::Choice(&["sgd", "adam"]), "sgd"),
    ("train.lr", Kind::Real, "0.1 (sgd) / 0.001 (adam)"),
    ("train.momentum", Kind::Real, "0.9"),
    ("train.beta1", Kind::Real, "0.9"),
    ("train.beta2", Kind::Real, "0.999"),
    ("train.eps", Kind::Real, "1e-8"),
    ("train.batch_size", Kind::UInt, "64"),
    ("train.epochs", Kind::UInt, "30"),
    ("train.train_threshold", Kind::Real, "0.95"),
    ("train.test_threshold", Kind::Real, "0.91"),
    ("hessian.enabled", Kind::Bool, "true"),
    ("hessian.k", Kind::UInt, "50"),
    ("hessian.probes", Kind::UInt, "100"),
    ("hessian.max_iters", Kind::UInt, "200"),
    ("hessian.lanczos_steps", Kind::UInt, "80"),
    ("hessian.density_probes", Kind::UInt, "4"),
    ("hessian.tol", Kind::Real, "1e-6"),
    ("hessian.eps_rel", Kind::Real, "1e-3"),
    ("hessian.mode", Kind::Choice(&["spiking", "relaxed"]), "spiking"),
    ("varprop.depth", Kind::UInt, "10"),
    ("varprop.width", Kind::UInt, "128"),
    ("varprop.batch", Kind::UInt, "256"),
    ("varprop.time_steps", Kind::UInt, "8"),
    ("compare.schemes", Kind::ChoiceList(SCHEMES), "normal,lecun,xavier,kaiming,ikun_v1,ikun_v2"),
    ("compare.seeds", Kind::UIntList, "0,1,2"),
    ("compare.jobs", Kind::UInt, "1"),
];

/// Key table as `(key, expected type, default)`, for help output.
pub fn documented_keys() -> impl Iterator<Item = (&'static str, String, &'static str)> {
    KEYS.iter().map(|(k, kind, d)| (*k, kind.describe(), *d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    FashionMnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    pub subset_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub time_steps: usize,
    pub encoder: Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub scheme: InitScheme,
    pub calibrate: bool,
    pub calibration_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianConfig {
    pub enabled: bool,
    pub settings: HessianSettings,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarpropConfig {
    pub depth: usize,
    pub width: usize,
    pub batch: usize,
    pub time_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub schemes: Vec<InitKind>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    pub neuron: NeuronSpec,
    pub surrogate: SurrogateSpec,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub hessian: HessianConfig,
    pub varprop: VarpropConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_values(&BTreeMap::new()).expect("defaults are valid")
    }
}

fn nearest<'a>(word: &str, options: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut scored: Vec<(usize, &str)> = options.into_iter().map(|o| (strsim::levenshtein(word, o), o)).collect();
    scored.sort();
    let Some(&(best, _)) = scored.first() else {
        return Vec::new();
    };
    scored.into_iter().take_while(|(d, _)| *d <= best.max(2)).take(3).map(|(_, o)| o).collect()
}

fn lookup(key: &str) -> Result<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind).ok_or_else(|| {
        let near = nearest(key, KEYS.iter().map(|(k, _, _)| *k));
        ConfigError(format!("unknown key `{key}`; nearest valid key: {}", quote_list(&near)))
    })
}

fn quote_list(items: &[&str]) -> String {
    items.iter().map(|s| format!("`{s}`")).collect::<Vec<_>>().join(", ")
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let mismatch = || ConfigError(format!("key `{key}` expects {}, got `{value}`", kind.describe()));
    let bad_choice = |word: &str, choices: &'static [&'static str]| {
        ConfigError(format!(
            "key `{key}`: `{word}` is not valid; candidates: {}",
            quote_list(&nearest(word, choices.iter().copied()))
        ))
    };
    match kind {
        Kind::UInt => value.parse::<u64>().map(|_| ()).map_err(|_| mismatch()),
        Kind::Real => match value.parse::<f64>() {
            Ok(v) if !v.is_nan() => Ok(()),
            _ => Err(mismatch()),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| mismatch()),
        Kind::Text => {
            if value.is_empty() {
                Err(mismatch())
            } else {
                Ok(())
            }
        }
        Kind::Choice(c) => {
            if c.contains(&value) {
                Ok(())
            } else {
                Err(bad_choice(value, c))
            }
        }
        Kind::ChoiceList(c) => {
            let items: Vec<&str> = value.split(',').map(str::trim).collect();
            if items.iter().any(|s| s.is_empty()) {
                return Err(mismatch());
            }
            match items.iter().find(|s| !c.contains(s)) {
                Some(bad) => Err(bad_choice(bad, c)),
                None => Ok(()),
            }
        }
        Kind::UIntList => {
            if value.split(',').all(|s| s.trim().parse::<u64>().is_ok()) {
                Ok(())
            } else {
                Err(mismatch())
            }
        }
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

/// Parses one `key = value` assignment.
pub fn parse_assignment(line: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("expected `key = value`, got `{}`", line.trim())))?;
    let key = k.trim().to_string();
    let value = unquote(v).to_string();
    let kind = lookup(&key)?;
    check_value(&key, kind, &value)?;
    Ok((key, value))
}

/// Parses config text; later assignments to the same key win.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut values = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line).map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        values.insert(k, v);
    }
    Ok(values)
}

/// Reads an optional config file, then applies `overrides` in order.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut values = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            parse_text(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    for o in overrides {
        let (k, v) = parse_assignment(o).map_err(|e| ConfigError(format!("--set {o}: {e}")))?;
        values.insert(k, v);
    }
    ExperimentConfig::from_values(&values)
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn text(&self, key: &str) -> String {
        self.raw(key).map(str::to_string).unwrap_or_else(|| default_of(key).to_string())
    }

    fn uint(&self, key: &str) -> u64 {
        self.text(key).parse().expect("validated")
    }

    fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn real(&self, key: &str) -> f64 {
        self.text(key).parse().expect("validated")
    }

    fn boolean(&self, key: &str) -> bool {
        self.text(key).parse().expect("validated")
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.text(key).split(',').map(|s| s.trim().to_string()).collect()
    }
}

fn default_of(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, _, d)| *d).expect("known key")
}

impl ExperimentConfig {
    fn from_values(values: &BTreeMap<String, String>) -> Result<Self> {
        let v = Values(values);
        let data = DataConfig {
            source: match v.text("data.source").as_str() {
                "synthetic" => DataSource::Synthetic,
                _ => DataSource::FashionMnist,
            },
            dir: PathBuf::from(v.text("data.dir")),
            train_size: v.usize("data.train_size"),
            test_size: v.usize("data.test_size"),
            subset_seed: v.uint("data.subset_seed"),
        };
        let net = NetConfig {
            conv1_channels: v.usize("net.conv1_channels"),
            conv2_channels: v.usize("net.conv2_channels"),
            time_steps: v.usize("net.time_steps"),
            encoder: match v.text("net.encoder").as_str() {
                "poisson" => Encoder::PoissonRate,
                _ => Encoder::ConstantCurrent,
            },
        };
        let neuron = NeuronSpec {
            model: match v.text("neuron.model").as_str() {
                "if" => NeuronModel::If,
                _ => NeuronModel::Lif,
            },
            tau: v.real("neuron.tau"),
            v_threshold: v.real("neuron.v_threshold"),
            v_reset: v.real("neuron.v_reset"),
            reset: match v.text("neuron.reset").as_str() {
                "soft" => ResetMode::Soft,
                _ => ResetMode::Hard,
            },
            dt: v.real("neuron.dt"),
            capacitance: v.real("neuron.capacitance"),
        };
        let surrogate = SurrogateSpec {
            kind: match v.text("surrogate.kind").as_str() {
                "atan" => SurrogateKind::Atan,
                "triangular" => SurrogateKind::Triangular,
                "constant" => SurrogateKind::Constant,
                _ => SurrogateKind::Sigmoid,
            },
            alpha: v.real("surrogate.alpha"),
        };
        let kind: InitKind = v.text("init.kind").parse().map_err(|e| ConfigError(format!("{e}")))?;
        let init = InitConfig {
            scheme: InitScheme { kind, alpha: v.real("init.alpha"), fixed_std: v.real("init.std") },
            calibrate: v.boolean("init.calibrate"),
            calibration_size: v.usize("init.calibration_size"),
        };
        let adam = v.text("train.optimizer") == "adam";
        let lr = match v.raw("train.lr") {
            Some(s) => s.parse().expect("validated"),
            None if adam => 1e-3,
            None => 0.1,
        };
        let optimizer = if adam {
            OptimizerConfig::Adam {
                lr,
                beta1: v.real("train.beta1"),
                beta2: v.real("train.beta2"),
                eps: v.real("train.eps"),
            }
        } else {
            OptimizerConfig::Sgd { lr, momentum: v.real("train.momentum") }
        };
        let seed = v.uint("seed");
        let train = TrainConfig {
            optimizer,
            batch_size: v.usize("train.batch_size"),
            epochs: v.usize("train.epochs"),
            seed,
            thresholds: Thresholds {
                train_acc: v.real("train.train_threshold"),
                test_acc: v.real("train.test_threshold"),
            },
        };
        let hessian = HessianConfig {
            enabled: v.boolean("hessian.enabled"),
            settings: HessianSettings {
                k: v.usize("hessian.k"),
                probes: v.usize("hessian.probes"),
                max_iters: v.usize("hessian.max_iters"),
                lanczos_steps: v.usize("hessian.lanczos_steps"),
                density_probes: v.usize("hessian.density_probes"),
                tol: v.real("hessian.tol"),
                eps_rel: v.real("hessian.eps_rel"),
            },
            mode: match v.text("hessian.mode").as_str() {
                "relaxed" => Mode::Relaxed,
                _ => Mode::Spiking,
            },
        };
        let varprop = VarpropConfig {
            depth: v.usize("varprop.depth"),
            width: v.usize("varprop.width"),
            batch: v.usize("varprop.batch"),
            time_steps: v.usize("varprop.time_steps"),
        };
        let compare = CompareConfig {
            schemes: v
                .list("compare.schemes")
                .iter()
                .map(|s| s.parse::<InitKind>().map_err(|e| ConfigError(format!("{e}"))))
                .collect::<Result<_>>()?,
            seeds: v.list("compare.seeds").iter().map(|s| s.parse().expect("validated")).collect(),
            jobs: v.usize("compare.jobs"),
        };
        let cfg = Self {
            seed,
            out: PathBuf::from(v.text("out")),
            data,
            net,
            neuron,
            surrogate,
            init,
            train,
            hessian,
            varprop,
            compare,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks beyond per-key types.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: spikelab::Error| ConfigError(e.to_string());
        self.neuron.validate().map_err(wrap)?;
        self.surrogate.validate().map_err(wrap)?;
        self.init.scheme.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.train.optimizer.lr() <= 0.0 {
            return Err(ConfigError("train.lr must be > 0".into()));
        }
        if self.net.time_steps == 0 || self.net.conv1_channels == 0 || self.net.conv2_channels == 0 {
            return Err(ConfigError("net.time_steps and channel counts must be >= 1".into()));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(ConfigError("data.train_size and data.test_size must be >= 1".into()));
        }
        if self.init.calibration_size == 0 {
            return Err(ConfigError("init.calibration_size must be >= 1".into()));
        }
        if self.compare.jobs == 0 {
            return Err(ConfigError("compare.jobs must be >= 1".into()));
        }
        if self.varprop.depth < 2 || self.varprop.width < 2 || self.varprop.time_steps == 0 {
            return Err(ConfigError("varprop.depth and varprop.width must be >= 2, varprop.time_steps >= 1".into()));
        }
        if self.varprop.batch < spikelab::varprop::MIN_BATCH {
            return Err(ConfigError(format!("varprop.batch must be >= {}", spikelab::varprop::MIN_BATCH)));
        }
        self.hessian.settings.validate().map_err(wrap)?;
        Ok(())
    }
}
