//! Run configuration resolved from flags, a JSON config file, environment
//! variables and built-in defaults, in that order of precedence.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use confood_core::synthetic::RhoDistribution;
use confood_core::{
    DetectionConfig, DropoutBudget, LayerId, MergingMethod, SplitSpec, SyntheticSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Names the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CONFOOD_CONFIG";
/// Prefix of per-key environment overrides, e.g. `CONFOOD_EPSILON`.
pub const ENV_PREFIX: &str = "CONFOOD_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Built-in redundant-voter model.
    #[default]
    Synthetic,
    /// External probe process speaking JSONL over stdio.
    Probe,
}

/// One source of settings. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub model: Option<ModelKind>,
    pub probe_cmd: Option<String>,
    pub layers: Option<Vec<LayerId>>,
    pub max_drop: Option<usize>,
    pub step: Option<usize>,
    pub inclusive_bound: Option<bool>,
    pub method: Option<String>,
    pub epsilon: Option<f64>,
    pub runs: Option<usize>,
    pub cal_frac: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub n_id: Option<usize>,
    pub n_ood: Option<usize>,
    pub rho_id: Option<f64>,
    pub rho_ood: Option<f64>,
    pub all_methods: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub id_queries: Option<PathBuf>,
    pub ood_queries: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

/// Keys whose environment values are taken verbatim rather than parsed.
const STRING_KEYS: &[&str] = &[
    "model",
    "probe_cmd",
    "method",
    "out_dir",
    "queries",
    "id_queries",
    "ood_queries",
    "calibration",
];

macro_rules! overlay {
    ($hi:ident, $lo:ident; $($field:ident),*) => {
        ConfigLayer { $($field: $hi.$field.or($lo.$field)),* }
    };
}

impl ConfigLayer {
    /// Keys set here win; the rest fall through to `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        let (hi, lo) = (self, lower);
        overlay!(hi, lo; model, probe_cmd, layers, max_drop, step, inclusive_bound, method,
            epsilon, runs, cal_frac, seed, jobs, n_id, n_ood, rho_id, rho_ood, all_methods,
            out_dir, queries, id_queries, ood_queries, calibration)
    }

    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Collects `CONFOOD_<KEY>` variables. Other variables are ignored.
    pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut map = Map::new();
        for (name, raw) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if name == CONFIG_ENV || !Self::is_key(&key) {
                continue;
            }
            let value = if STRING_KEYS.contains(&key.as_str()) {
                Value::String(raw)
            } else if key == "layers" {
                Value::Array(
                    raw.split(',')
                        .map(|s| {
                            s.trim().parse::<LayerId>().map(Value::from).map_err(|e| {
                                CliError::Config(format!("{name}: bad layer {s:?}: {e}"))
                            })
                        })
                        .collect::<Result<_, _>>()?,
                )
            } else {
                serde_json::from_str(raw.trim())
                    .map_err(|_| CliError::Config(format!("{name}: cannot parse {raw:?}")))?
            };
            map.insert(key, value);
        }
        serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::Config(format!("environment: {e}")))
    }

    fn is_key(key: &str) -> bool {
        let Value::Object(all) = serde_json::to_value(ConfigLayer::default()).expect("serializes")
        else {
            unreachable!()
        };
        all.contains_key(key)
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub model: ModelKind,
    pub probe_cmd: Option<Vec<String>>,
    pub detection: DetectionConfig,
    pub split: SplitSpec,
    pub spec: SyntheticSpec,
    pub jobs: usize,
    pub all_methods: bool,
    pub out_dir: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub id_queries: Option<PathBuf>,
    pub ood_queries: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

/// Layers flags over the config file over the environment, then fills in
/// defaults and validates.
pub fn resolve(
    flags: ConfigLayer,
    config_path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<Settings, CliError> {
    let env: Vec<(String, String)> = env.into_iter().collect();
    let path = config_path.map(Path::to_path_buf).or_else(|| {
        env.iter()
            .find(|(k, _)| k == CONFIG_ENV)
            .map(|(_, v)| PathBuf::from(v))
    });
    let file = match path {
        Some(p) => ConfigLayer::from_file(&p)?,
        None => ConfigLayer::default(),
    };
    let env = ConfigLayer::from_env(env)?;
    settle(flags.over(file).over(env))
}

/// Applies defaults to a merged layer.
pub fn settle(layer: ConfigLayer) -> Result<Settings, CliError> {
    let defaults = DetectionConfig::default();
    let method = match &layer.method {
        Some(m) => m
            .parse::<MergingMethod>()
            .map_err(|e| CliError::Config(e.to_string()))?,
        None => defaults.method,
    };
    let budget = DropoutBudget {
        max_drop: layer.max_drop.unwrap_or(defaults.budget.max_drop),
        step: layer.step.unwrap_or(defaults.budget.step),
        inclusive_bound: layer
            .inclusive_bound
            .unwrap_or(defaults.budget.inclusive_bound),
    };
    let detection = DetectionConfig {
        layers: layer.layers.unwrap_or(defaults.layers),
        budget,
        method,
        epsilon: layer.epsilon.unwrap_or(defaults.epsilon),
    };
    detection
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let seed = layer.seed.unwrap_or(0);
    let split_defaults = SplitSpec::default();
    let split = SplitSpec {
        calibration_fraction: layer
            .cal_frac
            .unwrap_or(split_defaults.calibration_fraction),
        runs: layer.runs.unwrap_or(split_defaults.runs),
        seed,
    };
    split
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let spec_defaults = SyntheticSpec::default();
    let rho = |center: Option<f64>, d: RhoDistribution| RhoDistribution {
        center: center.unwrap_or(d.center),
        ..d
    };
    let spec = SyntheticSpec {
        seed,
        n_id: layer.n_id.unwrap_or(spec_defaults.n_id),
        n_ood: layer.n_ood.unwrap_or(spec_defaults.n_ood),
        rho_id: rho(layer.rho_id, spec_defaults.rho_id),
        rho_ood: rho(layer.rho_ood, spec_defaults.rho_ood),
        ..spec_defaults
    };
    spec.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let model = layer.model.unwrap_or_default();
    let probe_cmd = match layer.probe_cmd {
        Some(cmd) => {
            let argv = shlex::split(&cmd)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| CliError::Config(format!("cannot split probe command {cmd:?}")))?;
            Some(argv)
        }
        None => None,
    };
    if model == ModelKind::Probe && probe_cmd.is_none() {
        return Err(CliError::Config("--model probe needs --probe-cmd".into()));
    }
    let jobs = match layer.jobs {
        Some(0) => return Err(CliError::Config("jobs must be at least 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };

    Ok(Settings {
        model,
        probe_cmd,
        detection,
        split,
        spec,
        jobs,
        all_methods: layer.all_methods.unwrap_or(false),
        out_dir: layer.out_dir,
        queries: layer.queries,
        id_queries: layer.id_queries,
        ood_queries: layer.ood_queries,
        calibration: layer.calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_follow_the_detector() {
        let s = settle(ConfigLayer::default()).unwrap();
        assert_eq!(s.detection, DetectionConfig::default());
        assert_eq!(s.split.runs, 5);
        assert_eq!(s.split.calibration_fraction, 0.2);
        assert_eq!(s.model, ModelKind::Synthetic);
        assert_eq!(s.spec.n_id, 200);
    }

    #[test]
    fn environment_values_are_typed() {
        let layer = ConfigLayer::from_env(env(&[
            ("CONFOOD_EPSILON", "0.1"),
            ("CONFOOD_LAYERS", "3, 9"),
            ("CONFOOD_METHOD", "gm"),
            ("CONFOOD_INCLUSIVE_BOUND", "true"),
            ("CONFOOD_OUT_DIR", "123"),
            ("CONFOOD_CONFIG", "ignored.json"),
            ("CONFOOD_UNRELATED", "x"),
            ("PATH", "/bin"),
        ]))
        .unwrap();
        assert_eq!(layer.epsilon, Some(0.1));
        assert_eq!(layer.layers, Some(vec![3, 9]));
        assert_eq!(layer.method.as_deref(), Some("gm"));
        assert_eq!(layer.inclusive_bound, Some(true));
        assert_eq!(layer.out_dir, Some(PathBuf::from("123")));
        assert!(ConfigLayer::from_env(env(&[("CONFOOD_RUNS", "five")])).is_err());
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(ConfigLayer::from_json_str(r#"{"epsilon": 0.1}"#).is_ok());
        assert!(ConfigLayer::from_json_str(r#"{"epsilom": 0.1}"#).is_err());
    }

    #[test]
    fn precedence_matrix() {
        // every subset of {flag, file, env} setting epsilon to a distinct value
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"epsilon": 0.2}"#).unwrap();
        for mask in 0..8u8 {
            let flag = mask & 1 != 0;
            let in_file = mask & 2 != 0;
            let in_env = mask & 4 != 0;
            let flags = ConfigLayer {
                epsilon: flag.then_some(0.1),
                ..ConfigLayer::default()
            };
            let vars = if in_env {
                env(&[("CONFOOD_EPSILON", "0.3")])
            } else {
                Vec::new()
            };
            let s = resolve(flags, in_file.then_some(file.as_path()), vars).unwrap();
            let want = if flag {
                0.1
            } else if in_file {
                0.2
            } else if in_env {
                0.3
            } else {
                0.05
            };
            assert_eq!(s.detection.epsilon, want, "mask {mask:03b}");
        }
    }

    #[test]
    fn config_path_from_environment() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"runs": 3, "layers": [1, 2]}"#).unwrap();
        let vars = env(&[(CONFIG_ENV, file.to_str().unwrap()), ("CONFOOD_RUNS", "4")]);
        let s = resolve(ConfigLayer::default(), None, vars).unwrap();
        assert_eq!(s.split.runs, 3);
        assert_eq!(s.detection.layers, vec![1, 2]);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = [
            ConfigLayer {
                epsilon: Some(1.0),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                method: Some("median".into()),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                cal_frac: Some(0.0),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                model: Some(ModelKind::Probe),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                probe_cmd: Some("python 'unterminated".into()),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                jobs: Some(0),
                ..ConfigLayer::default()
            },
            ConfigLayer {
                rho_id: Some(0.0),
                ..ConfigLayer::default()
            },
        ];
        for layer in bad {
            assert!(settle(layer.clone()).is_err(), "{layer:?}");
        }
    }

    #[test]
    fn probe_command_is_shell_split() {
        let s = settle(ConfigLayer {
            model: Some(ModelKind::Probe),
            probe_cmd: Some("python3 'my probe.py' --device cpu".into()),
            ..ConfigLayer::default()
        })
        .unwrap();
        assert_eq!(
            s.probe_cmd.unwrap(),
            vec!["python3", "my probe.py", "--device", "cpu"]
        );
    }
}
