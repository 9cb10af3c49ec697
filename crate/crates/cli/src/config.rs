//! Run configuration file (TOML). Every key is optional; unknown keys are
//! rejected.

use std::path::Path;

use facever::eval::csf::CsfParams;
use facever::eval::ComparisonOptions;
use facever::imaging::GeometryConfig;
use facever::model::{CalibrationOptions, ModelParams};
use facever::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub model: ModelParams,
    pub calibration: CalibrationOptions,
    pub csf: CsfParams,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.model.color.validate()?;
        self.calibration.weight_grid()?;
        let t = &self.model.template;
        if t.q == 0 || t.d == 0 {
            return Err(Error::Config("q and d must be at least 1".into()));
        }
        for (name, ridge) in [
            ("model.template.ridge", t.ridge),
            ("csf.ridge", self.csf.ridge),
        ] {
            if !(ridge >= 0.0 && ridge.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {ridge}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(self) -> String {
        toml::to_string(&self).expect("config serializes")
    }

    pub fn comparison(&self, timing: bool) -> ComparisonOptions {
        ComparisonOptions {
            geometry: self.geometry,
            params: self.model,
            csf: self.csf,
            weight_step: self.calibration.weight_step,
            threshold_mode: self.calibration.threshold_mode,
            seed: self.seed,
            timing,
            ..ComparisonOptions::default()
        }
    }
}
