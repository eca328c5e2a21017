//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Unknown keys and repeated
//! keys are errors. Relative paths are resolved against the directory of
//! the configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bitrobust_core::evalharness::DEFAULT_CHIPS;
use bitrobust_core::fixedpoint::{Granularity, IntegerRepr, RangeMode, Rounding};
use bitrobust_core::{Architecture, LossSpec, QuantScheme, TrainConfig};

use crate::error::CliError;

/// Every accepted key with its meaning, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "preset",
        "training mode: normal | rquant | clipping | randbet (default rquant)",
    ),
    (
        "model",
        "name used for output files and report rows (default: the preset)",
    ),
    ("m", "bits per weight, 2..=8 (default 8)"),
    ("granularity", "override the preset: global | per-group"),
    ("range", "override the preset: symmetric | asymmetric"),
    ("repr", "override the preset: signed | unsigned"),
    ("rounding", "override the preset: truncate | round"),
    ("hidden", "comma-separated hidden layer sizes (default 256,128)"),
    ("epochs", "training epochs (default 10)"),
    ("batch_size", "mini-batch size (default 128)"),
    ("lr", "initial learning rate (default 0.05)"),
    ("momentum", "SGD momentum (default 0.9)"),
    ("weight_decay", "L2 weight decay (default 5e-4)"),
    ("wmax", "weight clipping bound; required by clipping and randbet"),
    ("p_train", "training bit error rate; required by randbet"),
    ("lambda", "weight of the perturbed gradient (default 1)"),
    (
        "gate_threshold",
        "smoothed clean loss below which bit errors start (default 1.75)",
    ),
    ("gate_decay", "decay of the smoothed loss (default 0.95)"),
    ("loss", "ce | smoothed (default ce)"),
    ("smooth_target", "true-class target of the smoothed loss (default 0.9)"),
    (
        "seed",
        "seed of initialization, shuffling and training bit errors (default 0)",
    ),
    ("chips", "size of the evaluation chip panel (default 50)"),
    ("chip_seed", "seed of the evaluation chip panel (default 1)"),
    (
        "p_eval",
        "comma-separated evaluation bit error rates (default 0,0.001,0.005,0.01,0.015)",
    ),
    ("map_seed", "seed of the cell draws of profiled maps (default 0)"),
    (
        "linf_eps",
        "comma-separated relative L-infinity noise levels (default none)",
    ),
    ("linf_samples", "noise draws per L-infinity level (default 10)"),
    ("train_images", "IDX training images (optionally gzipped)"),
    ("train_labels", "IDX training labels"),
    ("test_images", "IDX test images"),
    ("test_labels", "IDX test labels"),
    ("train_limit", "use only the first N training examples"),
    ("test_limit", "use only the first N test examples"),
    ("out_dir", "output directory (default .)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Normal,
    RQuant,
    Clipping,
    RandBet,
}

impl Preset {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "normal" => Preset::Normal,
            "rquant" => Preset::RQuant,
            "clipping" => Preset::Clipping,
            "randbet" => Preset::RandBet,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Normal => "normal",
            Preset::RQuant => "rquant",
            Preset::Clipping => "clipping",
            Preset::RandBet => "randbet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

/// A validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub model: String,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub chips: usize,
    pub chip_seed: u64,
    pub p_eval: Vec<f64>,
    pub map_seed: u64,
    pub linf_eps: Vec<f64>,
    pub linf_samples: usize,
    pub data: DataPaths,
    pub out_dir: PathBuf,
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parse configuration text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return Err(CliError::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if kv.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(CliError::Config(format!("line {}: key `{k}` set twice", n + 1)));
            }
        }
        Self::from_map(&kv, base)
    }

    fn from_map(kv: &BTreeMap<String, String>, base: &Path) -> Result<Self, CliError> {
        let get = |k: &str| kv.get(k).map(String::as_str);
        let preset = match get("preset") {
            Some(v) => {
                Preset::parse(v).ok_or_else(|| bad("preset", v, "expected normal, rquant, clipping or randbet"))?
            }
            None => Preset::RQuant,
        };
        let m: u8 = get("m").map(|v| num("m", v)).transpose()?.unwrap_or(8);
        let scheme = Self::scheme(preset, m, kv)?;

        let mut train = TrainConfig {
            scheme: Some(scheme),
            ..TrainConfig::default()
        };
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = get($key) {
                    $field = num($key, v)?;
                }
            };
        }
        set!("epochs", train.epochs);
        set!("batch_size", train.batch_size);
        set!("lr", train.lr);
        set!("momentum", train.momentum);
        set!("weight_decay", train.weight_decay);
        set!("lambda", train.lambda);
        set!("gate_threshold", train.gate_threshold);
        set!("gate_decay", train.gate_decay);
        set!("seed", train.seed);
        train.wmax = get("wmax").map(|v| num("wmax", v)).transpose()?;
        train.p_train = get("p_train").map(|v| num("p_train", v)).transpose()?;

        match preset {
            Preset::Normal | Preset::RQuant => {
                if train.p_train.is_some() {
                    return Err(CliError::Config(format!(
                        "preset {} does not train with bit errors; use randbet",
                        preset.name()
                    )));
                }
            }
            Preset::Clipping => {
                if train.wmax.is_none() {
                    return Err(CliError::Config("preset clipping requires wmax".into()));
                }
                if train.p_train.is_some() {
                    return Err(CliError::Config(
                        "preset clipping does not train with bit errors; use randbet".into(),
                    ));
                }
            }
            Preset::RandBet => {
                if train.wmax.is_none() || train.p_train.is_none() {
                    return Err(CliError::Config("preset randbet requires wmax and p_train".into()));
                }
            }
        }

        let smooth_target = get("smooth_target")
            .map(|v| num("smooth_target", v))
            .transpose()?
            .unwrap_or(LossSpec::DEFAULT_SMOOTH_TARGET);
        train.loss = match get("loss").unwrap_or("ce") {
            "ce" => LossSpec::CrossEntropy,
            "smoothed" => LossSpec::LabelSmoothed { smooth_target },
            v => return Err(bad("loss", v, "expected ce or smoothed")),
        };
        train.validate()?;

        let hidden = match get("hidden") {
            Some(v) => list("hidden", v)?,
            None => vec![256, 128],
        };
        let chips: usize = get("chips")
            .map(|v| num("chips", v))
            .transpose()?
            .unwrap_or(DEFAULT_CHIPS);
        if chips == 0 {
            return Err(bad("chips", "0", "the chip panel needs at least one chip"));
        }
        let p_eval = match get("p_eval") {
            Some(v) => list("p_eval", v)?,
            None => vec![0.0, 0.001, 0.005, 0.01, 0.015],
        };
        if let Some(p) = p_eval.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(bad("p_eval", &p.to_string(), "rates must lie in [0, 1]"));
        }
        let linf_eps = match get("linf_eps") {
            Some(v) => list("linf_eps", v)?,
            None => Vec::new(),
        };
        let path = |k: &str| get(k).map(|v| base.join(v));
        let cfg = Self {
            preset,
            model: get("model").unwrap_or(preset.name()).to_owned(),
            hidden,
            train,
            chips,
            chip_seed: get("chip_seed").map(|v| num("chip_seed", v)).transpose()?.unwrap_or(1),
            p_eval,
            map_seed: get("map_seed").map(|v| num("map_seed", v)).transpose()?.unwrap_or(0),
            linf_eps,
            linf_samples: get("linf_samples")
                .map(|v| num("linf_samples", v))
                .transpose()?
                .unwrap_or(10),
            data: DataPaths {
                train_images: path("train_images"),
                train_labels: path("train_labels"),
                test_images: path("test_images"),
                test_labels: path("test_labels"),
                train_limit: get("train_limit").map(|v| num("train_limit", v)).transpose()?,
                test_limit: get("test_limit").map(|v| num("test_limit", v)).transpose()?,
            },
            out_dir: path("out_dir").unwrap_or_else(|| base.to_path_buf()),
        };
        if cfg.model.is_empty() || cfg.model.contains(['/', '\\', ',']) {
            return Err(bad("model", &cfg.model, "must be a plain file name without commas"));
        }
        Ok(cfg)
    }

    fn scheme(preset: Preset, m: u8, kv: &BTreeMap<String, String>) -> Result<QuantScheme, CliError> {
        let base = match preset {
            Preset::Normal => QuantScheme::normal(m)?,
            _ => QuantScheme::rquant(m)?,
        };
        let get = |k: &str| kv.get(k).map(String::as_str);
        let granularity = match get("granularity") {
            None => base.granularity(),
            Some("global") => Granularity::Global,
            Some("per-group") => Granularity::PerGroup,
            Some(v) => return Err(bad("granularity", v, "expected global or per-group")),
        };
        let range = match get("range") {
            None => base.range_mode(),
            Some("symmetric") => RangeMode::Symmetric,
            Some("asymmetric") => RangeMode::Asymmetric,
            Some(v) => return Err(bad("range", v, "expected symmetric or asymmetric")),
        };
        let repr = match get("repr") {
            None => base.integer_repr(),
            Some("signed") => IntegerRepr::SignedTwosComplement,
            Some("unsigned") => IntegerRepr::Unsigned,
            Some(v) => return Err(bad("repr", v, "expected signed or unsigned")),
        };
        let rounding = match get("rounding") {
            None => base.rounding(),
            Some("truncate") => Rounding::Truncate,
            Some("round") => Rounding::RoundNearest,
            Some(v) => return Err(bad("rounding", v, "expected truncate or round")),
        };
        Ok(QuantScheme::new(m, granularity, range, repr, rounding)?)
    }

    pub fn scheme_of(&self) -> QuantScheme {
        self.train.scheme.expect("configurations always carry a scheme")
    }

    /// Architecture for `inputs` pixels and `classes` classes.
    pub fn architecture(&self, inputs: usize, classes: usize) -> Result<Architecture, CliError> {
        let mut dims = vec![inputs];
        dims.extend(&self.hidden);
        dims.push(classes);
        Ok(Architecture::new(dims)?)
    }
}

/// The key table formatted for `--help`.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (one `key = value` per line, `#` comments):\n");
    for (k, d) in KEYS {
        out.push_str(&format!("  {k:<15} {d}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn presets_select_schemes() {
        let c = parse("preset = rquant\nm = 8").unwrap();
        assert_eq!(c.scheme_of(), QuantScheme::rquant(8).unwrap());
        let c = parse("preset = normal").unwrap();
        assert_eq!(c.scheme_of(), QuantScheme::normal(8).unwrap());
        let c = parse("preset = clipping\nwmax = 0.1\nm = 4\nrounding = truncate").unwrap();
        assert_eq!(
            c.scheme_of(),
            QuantScheme::rquant(4).unwrap().with_rounding(Rounding::Truncate)
        );
        assert_eq!(c.train.wmax, Some(0.1));
    }

    #[test]
    fn randbet_needs_wmax_and_rate() {
        assert!(parse("preset = randbet").is_err());
        assert!(parse("preset = randbet\nwmax = 0.1").is_err());
        assert!(parse("preset = randbet\np_train = 0.01").is_err());
        let c = parse("preset = randbet\nwmax = 0.1\np_train = 0.01 # one percent").unwrap();
        assert_eq!(c.train.p_train, Some(0.01));
        assert_eq!(c.model, "randbet");
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        let e = parse("learning_rate = 0.1").unwrap_err();
        assert!(e.to_string().contains("unknown key"));
        assert!(parse("lr = 0.1\nlr = 0.2").is_err());
        assert!(parse("lr 0.1").is_err());
        assert!(parse("range = symmetric\nrepr = unsigned").is_err());
    }

    #[test]
    fn lists_and_paths() {
        let c = parse("p_eval = 0, 0.01,0.02\nhidden = 32\ntest_images = data/t.gz\nout_dir = /abs").unwrap();
        assert_eq!(c.p_eval, vec![0.0, 0.01, 0.02]);
        assert_eq!(c.hidden, vec![32]);
        assert_eq!(c.data.test_images, Some(PathBuf::from("/base/data/t.gz")));
        assert_eq!(c.out_dir, PathBuf::from("/abs"));
        assert!(parse("p_eval = 0.5, 2").is_err());
    }

    #[test]
    fn every_key_is_documented() {
        let help = keys_help();
        for (k, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
