//! Run configuration: a TOML file, optionally overridden by flags.

use std::fmt;
use std::path::{Path, PathBuf};

use ace_core::simulation::{Method, PropensityMode, Scenario, ScenarioConfig, TEST_SET_SEED};
use ace_core::surrogate::WeightSpec;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

/// Seed used when neither a flag, the config file nor `ACE_SEED` provides one.
pub const DEFAULT_SEED: u64 = 0;
pub const SEED_ENV: &str = "ACE_SEED";

/// A configuration problem tied to a field name.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// A TOML list or a comma-separated string; empty means every method of the scenario.
    #[serde(deserialize_with = "methods_from_list_or_csv")]
    pub methods: Vec<Method>,
    pub weight: WeightSpec,
    pub n: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub n_init: usize,
    pub noise_sd: f64,
    pub c: f64,
    pub refit_interval: usize,
    pub restarts: usize,
    pub refit_restarts: usize,
    pub propensity_mode: PropensityMode,
    pub noise_adjusted: bool,
    pub test_seed: u64,
    pub reps: usize,
    /// Replication `i` uses seed `seed + i` for every method.
    pub seed: Option<u64>,
    pub output: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sc = ScenarioConfig::default();
        RunConfig {
            scenario: sc.scenario,
            methods: Vec::new(),
            weight: sc.weight,
            n: sc.n,
            n_pool: sc.n_pool,
            n_test: sc.n_test,
            n_init: sc.n_init,
            noise_sd: sc.noise_sd,
            c: sc.c,
            refit_interval: sc.refit_interval,
            restarts: sc.restarts,
            refit_restarts: sc.refit_restarts,
            propensity_mode: sc.propensity_mode,
            noise_adjusted: sc.noise_adjusted,
            test_seed: TEST_SET_SEED,
            reps: 50,
            seed: None,
            output: PathBuf::from("results"),
            threads: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MethodList {
    List(Vec<String>),
    Csv(String),
}

fn methods_from_list_or_csv<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Method>, D::Error> {
    let names = match MethodList::deserialize(d)? {
        MethodList::List(v) => v,
        MethodList::Csv(s) => s.split(',').map(str::to_owned).collect(),
    };
    names
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Method>().map_err(serde::de::Error::custom))
        .collect()
}

/// Parses `"ace,alc"` style lists.
pub fn parse_methods(s: &str) -> Result<Vec<Method>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.parse::<Method>().map_err(|e| e.to_string()))
        .collect()
}

/// Seed precedence below an explicit flag or config value.
pub fn env_default_seed() -> Result<u64, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ConfigError::new(SEED_ENV, format!("expected an unsigned integer, got '{v}'"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object of a JSON manifest written by `simulate`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::new("config", e.to_string()))?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(cfg).map_err(|e| ConfigError::new("config", e.to_string()))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "config".into());
            ConfigError::new(field, msg)
        })
    }

    pub fn resolved_seed(&self) -> Result<u64, ConfigError> {
        match self.seed {
            Some(s) => Ok(s),
            None => env_default_seed(),
        }
    }

    pub fn effective_methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            self.scenario.methods().to_vec()
        } else {
            self.methods.clone()
        }
    }

    pub fn scenario_config(&self, method: Method) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            method,
            n: self.n,
            n_pool: self.n_pool,
            n_test: self.n_test,
            n_init: self.n_init,
            weight: self.weight,
            noise_sd: self.noise_sd,
            c: self.c,
            refit_interval: self.refit_interval,
            restarts: self.restarts,
            refit_restarts: self.refit_restarts,
            propensity_mode: self.propensity_mode,
            noise_adjusted: self.noise_adjusted,
            test_seed: self.test_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reps == 0 {
            return Err(ConfigError::new("reps", "must be at least 1"));
        }
        for m in self.effective_methods() {
            if let Err(e) = self.scenario_config(m).validate() {
                let text = e.to_string();
                let text = text.strip_prefix("invalid argument: ").unwrap_or(&text).to_string();
                let (field, msg) = match text.split_once(": ") {
                    Some((f, m)) if !f.contains(' ') => (f.to_string(), m.to_string()),
                    _ => ("config".to_string(), text.clone()),
                };
                return Err(ConfigError::new(field, msg));
            }
        }
        if self.resolved_seed()?.checked_add(self.reps as u64).is_none() {
            return Err(ConfigError::new("seed", "seed + reps overflows"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Result<Vec<u64>, ConfigError> {
        let base = self.resolved_seed()?;
        Ok((0..self.reps as u64).map(|i| base + i).collect())
    }

    /// Hex SHA-256 of the canonical JSON form with the seed resolved.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut canon = self.clone();
        canon.seed = Some(self.resolved_seed()?);
        let json = serde_json::to_string(&canon).expect("config serializes");
        Ok(Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
