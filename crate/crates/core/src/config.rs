//! Run configuration: estimator defaults plus adaptation learning rates,
//! stored as flat key=value text so nothing is hard-coded at call sites.

use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub estimator: EstimatorParams,
    /// Learning rate for plugin-mode (direct per-pixel adapter) updates.
    pub plugin_eta: f64,
    /// Learning rate for end-to-end smoothness tuning.
    pub e2e_eta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimator: EstimatorParams::default(),
            plugin_eta: 3000.0,
            e2e_eta: 0.1,
        }
    }
}

impl RunConfig {
    pub fn to_config_string(&self) -> String {
        format!(
            "{}plugin_eta={}\ne2e_eta={}\n",
            self.estimator.to_config_string(),
            self.plugin_eta,
            self.e2e_eta
        )
    }

    pub fn from_config_str(s: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut estimator_lines = String::new();
        for line in s.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line: {trimmed}")))?;
            let bad = |_| Error::Format(format!("bad config value: {trimmed}"));
            match key.trim() {
                "plugin_eta" => cfg.plugin_eta = value.trim().parse().map_err(bad)?,
                "e2e_eta" => cfg.e2e_eta = value.trim().parse().map_err(bad)?,
                _ => {
                    estimator_lines.push_str(trimmed);
                    estimator_lines.push('\n');
                }
            }
        }
        if !estimator_lines.is_empty() {
            cfg.estimator = EstimatorParams::from_config_str(&estimator_lines)?;
        }
        if !(cfg.plugin_eta >= 0.0 && cfg.e2e_eta >= 0.0) {
            return Err(Error::InvalidParam("learning rates must be >= 0".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }
}
