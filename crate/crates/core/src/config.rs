//! Flat `key=value` settings files.
//!
//! One file can feed a scene, a training run, and a whole experiment grid;
//! every key maps one-to-one onto a field of [`SceneConfig`],
//! [`TrainConfig`], or [`ExperimentGrid`]. Unknown keys are rejected up
//! front with the full list of valid keys, so typos fail loudly instead of
//! silently running defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{ExperimentGrid, Variant};
use crate::model::Activation;
use crate::optim::TrainConfig;
use crate::synth::SceneConfig;

/// Every recognized key, sorted, and what it feeds.
pub const VALID_KEYS: &[&str] = &[
    // training
    "batch_size",
    "beta1",
    "beta2",
    "epochs",
    "epsilon",
    "init_scale",
    "learning_rate",
    "shuffle_each_epoch",
    // scene
    "bands",
    "brightness_jitter",
    "class_count",
    "height",
    "majority_weight",
    "noise_std",
    "region_granularity",
    "signature_separation",
    "spatial_blur",
    "width",
    // grid / model shape
    "activation",
    "hidden_count",
    "rank",
    "repeats",
    "ts_values",
    "tws_values",
    "use_bias",
    "variants",
    // shared
    "seed",
];

fn unknown_key_error(key: &str) -> Error {
    let mut valid: Vec<&str> = VALID_KEYS.to_vec();
    valid.sort_unstable();
    Error::invalid(format!(
        "unknown config key {key:?}; valid keys: {}",
        valid.join(", ")
    ))
}

/// Parsed settings; values stay strings until a typed getter needs them.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pairs: BTreeMap<String, String>,
}

impl Settings {
    pub fn empty() -> Self {
        Settings::default()
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown and duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!(
                    "line {}: expected key=value, got {line:?}",
                    number + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !VALID_KEYS.contains(&key) {
                return Err(unknown_key_error(key));
            }
            if pairs.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::invalid(format!(
                    "line {}: duplicate key {key:?}",
                    number + 1
                )));
            }
        }
        Ok(Settings { pairs })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::parse(&text)
            .map_err(|e| e.with_context(format!("config file {}", path.display())))
    }

    /// Inserts or overrides one value, e.g. from a CLI flag.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !VALID_KEYS.contains(&key) {
            return Err(unknown_key_error(key));
        }
        self.pairs.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.pairs.contains_key(key)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::invalid(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>().map_err(|e| {
                        Error::invalid(format!(
                            "config key {key}: cannot parse element {item:?}: {e}"
                        ))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// The file's own `seed` value, if any; command-line seeds take
    /// precedence over this, which takes precedence over the default.
    pub fn seed(&self) -> Result<Option<u64>> {
        self.get("seed")
    }

    /// Training configuration with every present key applied over the
    /// defaults; `seed` is taken from the caller, not the file.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        config.seed = seed;
        if let Some(v) = self.get("epochs")? {
            config.epochs = v;
        }
        if let Some(v) = self.get("batch_size")? {
            config.batch_size = v;
        }
        if let Some(v) = self.get("learning_rate")? {
            config.learning_rate = v;
        }
        if let Some(v) = self.get("beta1")? {
            config.beta1 = v;
        }
        if let Some(v) = self.get("beta2")? {
            config.beta2 = v;
        }
        if let Some(v) = self.get("epsilon")? {
            config.epsilon = v;
        }
        if let Some(v) = self.get("shuffle_each_epoch")? {
            config.shuffle_each_epoch = v;
        }
        if let Some(v) = self.get("init_scale")? {
            config.init_scale = v;
        }
        config.validate()?;
        Ok(config)
    }

    /// Scene configuration with every present key applied over the
    /// defaults; `seed` is taken from the caller, not the file.
    pub fn scene_config(&self, seed: u64) -> Result<SceneConfig> {
        let mut config = SceneConfig {
            seed,
            ..SceneConfig::default()
        };
        if let Some(v) = self.get("height")? {
            config.height = v;
        }
        if let Some(v) = self.get("width")? {
            config.width = v;
        }
        if let Some(v) = self.get("bands")? {
            config.bands = v;
        }
        if let Some(v) = self.get("class_count")? {
            config.class_count = v;
        }
        if let Some(v) = self.get("region_granularity")? {
            config.region_granularity = v;
        }
        if let Some(v) = self.get("signature_separation")? {
            config.signature_separation = v;
        }
        if let Some(v) = self.get("noise_std")? {
            config.noise_std = v;
        }
        if let Some(v) = self.get("spatial_blur")? {
            config.spatial_blur = v;
        }
        if let Some(v) = self.get("brightness_jitter")? {
            config.brightness_jitter = v;
        }
        if let Some(v) = self.get("majority_weight")? {
            config.majority_weight = v;
        }
        config.validate()?;
        Ok(config)
    }

    /// Grid configuration; `seed` becomes the base seed and the embedded
    /// training config is built from the same file.
    pub fn experiment_grid(&self, seed: u64) -> Result<ExperimentGrid> {
        let mut grid = ExperimentGrid {
            base_seed: seed,
            train: self.train_config(seed)?,
            ..ExperimentGrid::default()
        };
        if let Some(v) = self.get_list("tws_values")? {
            grid.tws_values = v;
        }
        if let Some(v) = self.get_list("ts_values")? {
            grid.ts_values = v;
        }
        if let Some(v) = self.get("repeats")? {
            grid.repeats = v;
        }
        if let Some(raw) = self.pairs.get("variants") {
            grid.variants = raw
                .split(',')
                .map(|name| Variant::from_name(name.trim()))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.get("hidden_count")? {
            grid.hidden_count = v;
        }
        if let Some(v) = self.get("rank")? {
            grid.rank = v;
        }
        if let Some(raw) = self.pairs.get("activation") {
            grid.activation = Activation::from_name(raw)?;
        }
        if let Some(v) = self.get("use_bias")? {
            grid.use_bias = v;
        }
        grid.validate()?;
        Ok(grid)
    }

    /// Activation by itself, for single-model training.
    pub fn activation(&self) -> Result<Activation> {
        match self.pairs.get("activation") {
            None => Ok(Activation::default()),
            Some(raw) => Activation::from_name(raw),
        }
    }

    pub fn use_bias(&self) -> Result<bool> {
        Ok(self.get("use_bias")?.unwrap_or(false))
    }

    pub fn hidden_count(&self) -> Result<usize> {
        Ok(self.get("hidden_count")?.unwrap_or(10))
    }

    pub fn rank(&self) -> Result<usize> {
        Ok(self.get("rank")?.unwrap_or(3))
    }
}
