//! Flat `key=value` run-configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Triples and quadruples (crop shapes, voxel spacings, channel
//! multipliers) are comma-separated on one line, e.g. `crop=32,24,24`.
//! Every key is optional — omitted keys keep their defaults — and unknown
//! keys are rejected so typos cannot silently fall back.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{PhantomSpec, TARGET_SPACING_MM};
use crate::nn::{ClsMode, LocMode, ModelConfig};
use crate::train::TrainConfig;

/// A malformed configuration file.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Parsed `key=value` lines with consumption tracking: every key must be
/// taken by the consumer, so leftovers surface as unknown-key errors.
struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    fn parse(text: &str) -> Result<KvMap, ConfigError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(err(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(err(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(KvMap { entries })
    }

    fn take<T>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => {
                v.parse().map(Some).map_err(|e| err(format!("key {key:?}: {v:?}: {e}")))
            }
        }
    }

    fn take_array<T, const K: usize>(&mut self, key: &str) -> Result<Option<[T; K]>, ConfigError>
    where
        T: FromStr + Copy + Default + Debug,
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != K {
                    return Err(err(format!(
                        "key {key:?}: {v:?} has {} comma-separated fields, want {K}",
                        parts.len()
                    )));
                }
                let mut out = [T::default(); K];
                for (slot, p) in out.iter_mut().zip(&parts) {
                    *slot = p.parse().map_err(|e| err(format!("key {key:?}: {p:?}: {e}")))?;
                }
                Ok(Some(out))
            }
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            None => Ok(()),
            Some(k) => Err(err(format!("unknown key {k:?}"))),
        }
    }
}

/// Parses a phantom-generation recipe; omitted keys keep
/// [`PhantomSpec::default`].
pub fn phantom_spec_from_kv(text: &str) -> Result<PhantomSpec, ConfigError> {
    let mut kv = KvMap::parse(text)?;
    let mut spec = PhantomSpec::default();
    if let Some(v) = kv.take("classes")? {
        spec.classes = v;
    }
    if let Some(v) = kv.take("count")? {
        spec.count = v;
    }
    if let Some(v) = kv.take("fov_start")? {
        spec.fov_start = v;
    }
    if let Some(v) = kv.take_array("extents")? {
        spec.extents = v;
    }
    if let Some(v) = kv.take_array("voxel_mm")? {
        spec.voxel_mm = v;
    }
    if let Some(v) = kv.take("spacing_mm")? {
        spec.spacing_mm = v;
    }
    if let Some(v) = kv.take("spacing_jitter_mm")? {
        spec.spacing_jitter_mm = v;
    }
    if let Some(v) = kv.take("radius_mm")? {
        spec.radius_mm = v;
    }
    if let Some(v) = kv.take("radius_growth_mm")? {
        spec.radius_growth_mm = v;
    }
    if let Some(v) = kv.take("peak_intensity")? {
        spec.peak_intensity = v;
    }
    if let Some(v) = kv.take("curve_amplitude_mm")? {
        spec.curve_amplitude_mm = v;
    }
    if let Some(v) = kv.take("noise_std")? {
        spec.noise_std = v;
    }
    if let Some(v) = kv.take("metal_probability")? {
        spec.metal_probability = v;
    }
    kv.finish()?;
    Ok(spec)
}

/// Everything a training run needs beyond the scans themselves: the
/// model/optimization configuration plus the dataset-assembly knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub train: TrainConfig,
    /// Isotropic resampling target in mm.
    pub target_spacing_mm: f64,
    /// Fixed crops pre-sampled from each training scan per epoch pass.
    pub crops_per_scan: usize,
    /// Probability that a sampled crop is forced to contain a vertebra.
    pub containment_bias: f64,
    /// Scans held out from the end of the dataset for validation.
    pub val_scans: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            train: TrainConfig::new(ModelConfig::desk()),
            target_spacing_mm: TARGET_SPACING_MM,
            crops_per_scan: 4,
            containment_bias: 0.8,
            val_scans: 8,
        }
    }
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| err(e.to_string()))?;
        if !(self.target_spacing_mm > 0.0) || !self.target_spacing_mm.is_finite() {
            return Err(err(format!(
                "target_spacing_mm must be positive, got {}",
                self.target_spacing_mm
            )));
        }
        if self.crops_per_scan == 0 {
            return Err(err("crops_per_scan must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.containment_bias) {
            return Err(err(format!(
                "containment_bias must lie in [0, 1], got {}",
                self.containment_bias
            )));
        }
        Ok(())
    }
}

/// Parses a training setup; omitted keys keep [`TrainSetup::default`]
/// (the desk-sized model and the published optimization constants).
pub fn train_setup_from_kv(text: &str) -> Result<TrainSetup, ConfigError> {
    let mut kv = KvMap::parse(text)?;
    let mut setup = TrainSetup::default();

    // Model.
    if let Some(v) = kv.take_array("crop")? {
        setup.train.model.crop = v;
    }
    if let Some(v) = kv.take("classes")? {
        setup.train.model.classes = v;
    }
    if let Some(v) = kv.take("base_channels")? {
        setup.train.model.base_channels = v;
    }
    if let Some(v) = kv.take_array("multipliers")? {
        setup.train.model.multipliers = v;
    }
    if let Some(v) = kv.take("lstm_hidden")? {
        setup.train.model.lstm_hidden = v;
    }
    if let Some(v) = kv.take("lstm_layers")? {
        setup.train.model.lstm_layers = v;
    }
    if let Some(v) = kv.take("groups")? {
        setup.train.model.groups = v;
    }
    if let Some(v) = kv.take::<String>("loc_mode")? {
        setup.train.model.loc_mode = match v.as_str() {
            "integral" => LocMode::Integral,
            "direct_fc" => LocMode::DirectFc,
            "heatmap_argmax" => LocMode::HeatmapArgmax,
            other => {
                return Err(err(format!(
                    "loc_mode {other:?} is not integral | direct_fc | heatmap_argmax"
                )))
            }
        };
    }
    if let Some(v) = kv.take::<String>("cls_mode")? {
        setup.train.model.cls_mode = match v.as_str() {
            "bilstm" => ClsMode::BiLstm,
            "global_pool" => ClsMode::GlobalPool,
            other => return Err(err(format!("cls_mode {other:?} is not bilstm | global_pool"))),
        };
    }

    // Optimization.
    if let Some(v) = kv.take("epochs")? {
        setup.train.epochs = v;
    }
    if let Some(v) = kv.take("batch_size")? {
        setup.train.batch_size = v;
    }
    if let Some(v) = kv.take("lr")? {
        setup.train.lr = v;
    }
    if let Some(v) = kv.take("weight_decay")? {
        setup.train.weight_decay = v;
    }
    if let Some(v) = kv.take("patience")? {
        setup.train.patience = v;
    }
    if let Some(v) = kv.take("factor")? {
        setup.train.factor = v;
    }
    if let Some(v) = kv.take("min_lr")? {
        setup.train.min_lr = v;
    }
    if let Some(v) = kv.take("threshold")? {
        setup.train.threshold = v;
    }
    if let Some(v) = kv.take("heatmap_sigma")? {
        setup.train.heatmap_sigma = v;
    }
    if let Some(v) = kv.take("seed")? {
        setup.train.seed = v;
    }

    // Loss.
    if let Some(v) = kv.take("balance")? {
        setup.train.loss.balance = v;
    }
    if let Some(v) = kv.take("lambda")? {
        setup.train.loss.lambda = v;
    }
    if let Some(v) = kv.take("eps")? {
        setup.train.loss.eps = v;
    }

    // Dataset assembly.
    if let Some(v) = kv.take("target_spacing_mm")? {
        setup.target_spacing_mm = v;
    }
    if let Some(v) = kv.take("crops_per_scan")? {
        setup.crops_per_scan = v;
    }
    if let Some(v) = kv.take("containment_bias")? {
        setup.containment_bias = v;
    }
    if let Some(v) = kv.take("val_scans")? {
        setup.val_scans = v;
    }

    kv.finish()?;
    setup.validate()?;
    Ok(setup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn an_empty_file_yields_the_defaults() {
        let setup = train_setup_from_kv("").unwrap();
        assert_eq!(setup, TrainSetup::default());
        let spec = phantom_spec_from_kv("# only a comment\n\n").unwrap();
        assert_eq!(spec.classes, PhantomSpec::default().classes);
    }

    #[test]
    fn keys_override_defaults_and_tolerate_comments() {
        let text = "\n# training\nepochs = 3\ncrop=16, 8,8\nloc_mode=direct_fc # trailing\nlambda=0.7\nval_scans=2\n";
        let setup = train_setup_from_kv(text).unwrap();
        assert_eq!(setup.train.epochs, 3);
        assert_eq!(setup.train.model.crop, [16, 8, 8]);
        assert_eq!(setup.train.model.loc_mode, LocMode::DirectFc);
        assert_eq!(setup.train.loss.lambda, 0.7);
        assert_eq!(setup.val_scans, 2);
        // Untouched keys keep their defaults.
        assert_eq!(setup.train.batch_size, TrainSetup::default().train.batch_size);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        assert!(train_setup_from_kv("epochz=3").unwrap_err().to_string().contains("epochz"));
        assert!(train_setup_from_kv("epochs=1\nepochs=2")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        assert!(train_setup_from_kv("epochs").unwrap_err().to_string().contains("key=value"));
        assert!(train_setup_from_kv("crop=16,8").unwrap_err().to_string().contains("fields"));
        assert!(train_setup_from_kv("lr=fast").unwrap_err().to_string().contains("lr"));
        assert!(phantom_spec_from_kv("classes=0").is_err() || {
            // classes=0 parses; generation later rejects it. Either way the
            // bad value must not silently produce a usable spec.
            let s = phantom_spec_from_kv("classes=0").unwrap();
            crate::data::generate_phantom(&s, 0).is_err()
        });
    }

    #[test]
    fn invalid_settings_fail_validation() {
        assert!(train_setup_from_kv("factor=1.5").is_err());
        assert!(train_setup_from_kv("crops_per_scan=0").is_err());
        assert!(train_setup_from_kv("containment_bias=1.2").is_err());
        assert!(train_setup_from_kv("crop=15,8,8").is_err());
    }

    #[test]
    fn the_phantom_recipe_round_trips_its_fields() {
        let text = "classes=8\ncount=5\nfov_start=2\nextents=30,40,50\nvoxel_mm=2.5,1.5,1.5\nmetal_probability=0\n";
        let spec = phantom_spec_from_kv(text).unwrap();
        assert_eq!(spec.classes, 8);
        assert_eq!(spec.count, 5);
        assert_eq!(spec.fov_start, 2);
        assert_eq!(spec.extents, [30, 40, 50]);
        assert_eq!(spec.voxel_mm, [2.5, 1.5, 1.5]);
        assert_eq!(spec.metal_probability, 0.0);
    }
}
