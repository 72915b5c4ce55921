//! Run configuration: strict JSON with flag overrides and materialized
//! defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spreme_core::{DatasetSpec, FeatureLibrary, Horizon, Hyperparams, Method, SystemKind};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryConfig {
    pub degree: Option<u32>,
    pub trig: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub variances: Vec<f64>,
    pub horizons: Vec<Horizon>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            variances: vec![0.01, 0.1, 0.5],
            horizons: vec![
                Horizon::Steps(1),
                Horizon::Steps(2),
                Horizon::Steps(5),
                Horizon::Steps(10),
                Horizon::FULL,
            ],
        }
    }
}

/// One JSON document. `dataset` holds overrides of the benchmark dataset of
/// `system`; after resolution it holds every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: Option<SystemKind>,
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub dataset: Map<String, Value>,
    pub library: LibraryConfig,
    pub hyper: Hyperparams,
    pub sweep: SweepConfig,
    /// Write wall-clock columns. Off makes every output byte-reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: None,
            method: Method::Spreme,
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            dataset: Map::new(),
            library: LibraryConfig::default(),
            hyper: Hyperparams::default(),
            sweep: SweepConfig::default(),
            timing: true,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub system: Option<SystemKind>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// A fully resolved configuration.
#[derive(Debug, Clone)]
pub struct Effective {
    pub config: RunConfig,
    pub system: SystemKind,
    pub spec: DatasetSpec,
    pub library: FeatureLibrary,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| config_err(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.system {
            self.system = Some(s);
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
    }

    /// Fills every default and validates the result.
    pub fn resolve(mut self) -> Result<Effective, CliError> {
        let system = self
            .system
            .ok_or_else(|| config_err("no system given (use --system or the 'system' key)"))?;
        if self.jobs == 0 {
            return Err(config_err("jobs must be ≥ 1"));
        }

        let mut full = match serde_json::to_value(DatasetSpec::benchmark(system)) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("dataset spec serializes to an object"),
        };
        for (k, v) in &self.dataset {
            if !full.contains_key(k) {
                return Err(config_err(format!("unknown dataset key '{k}'")));
            }
            merge(full.get_mut(k).expect("key exists"), v);
        }
        let spec: DatasetSpec = serde_json::from_value(Value::Object(full.clone()))
            .map_err(|e| config_err(format!("bad dataset settings: {e}")))?;
        spec.validate(system).map_err(|e| config_err(e.to_string()))?;
        self.dataset = full;

        let default_lib = system.default_library();
        let degree = self.library.degree.unwrap_or(default_lib.degree());
        let trig = self.library.trig.unwrap_or(default_lib.include_trig());
        let library =
            FeatureLibrary::new(system.dim(), degree, trig).map_err(|e| config_err(e.to_string()))?;
        self.library = LibraryConfig {
            degree: Some(degree),
            trig: Some(trig),
        };

        self.hyper.validate().map_err(|e| config_err(e.to_string()))?;
        self.system = Some(system);
        Ok(Effective {
            config: self,
            system,
            spec,
            library,
        })
    }
}

/// Object values merge key by key; anything else replaces.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl Effective {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"system":"linear","colour":1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"hyper":{"lamda":1}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"system":"linear","dataset":{"bogus":1}}"#).unwrap();
        assert!(cfg.resolve().is_err());
        let cfg = RunConfig::from_json(r#"{"system":"linear","dataset":{"train":{"bogus":1}}}"#).unwrap();
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn flags_beat_file_beats_default() {
        let mut cfg = RunConfig::from_json(r#"{"system":"linear","seed":3}"#).unwrap();
        assert_eq!(cfg.method, Method::Spreme);
        cfg.apply(&Overrides {
            seed: Some(9),
            method: Some(Method::Sindy),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.method), (9, Method::Sindy));
        assert_eq!(cfg.system, Some(SystemKind::Linear3D));
    }

    #[test]
    fn effective_config_is_complete_and_stable() {
        let cfg = RunConfig::from_json(r#"{"system":"lorenz","dataset":{"train_envs":3}}"#).unwrap();
        let eff = cfg.resolve().unwrap();
        assert_eq!(eff.spec.train_envs, 3);
        assert_eq!(eff.config.library.degree, Some(eff.library.degree()));
        let again = RunConfig::from_json(&eff.to_json()).unwrap().resolve().unwrap();
        assert_eq!(again.to_json(), eff.to_json());
        assert_eq!(again.spec, eff.spec);
    }

    #[test]
    fn missing_system_is_a_config_error() {
        assert!(matches!(RunConfig::default().resolve(), Err(CliError::Config(_))));
    }
}
