use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::OptimizerOptions;
use crate::error::{Error, Result};
use crate::mlvamp::{Bounds, Mode, RunOptions};
use crate::model::SyntheticConfig;
use crate::se::SeOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Methods {
    pub mlvamp: bool,
    pub baseline: bool,
    pub se: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Self {
            mlvamp: true,
            baseline: true,
            se: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlvampSection {
    pub max_iters: usize,
    pub damping: f64,
    pub tol: f64,
    pub gamma_init: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub alpha_min: f64,
}

impl Default for MlvampSection {
    fn default() -> Self {
        let o = RunOptions::<f64>::default();
        Self {
            max_iters: o.max_iters,
            damping: o.damping,
            tol: o.tol,
            gamma_init: o.gamma_init,
            gamma_min: o.bounds.gamma_min,
            gamma_max: o.bounds.gamma_max,
            alpha_min: o.bounds.alpha_min,
        }
    }
}

impl MlvampSection {
    fn bounds(&self) -> Bounds<f64> {
        Bounds {
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
            alpha_min: self.alpha_min,
        }
    }

    pub fn options(&self) -> RunOptions<f64> {
        RunOptions {
            max_iters: self.max_iters,
            damping: self.damping,
            bounds: self.bounds(),
            mode: Mode::Adaptive,
            tol: self.tol,
            gamma_init: self.gamma_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeSection {
    pub mc_samples: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SeSection {
    fn default() -> Self {
        let o = SeOptions::default();
        Self {
            mc_samples: o.mc_samples,
            max_iters: o.max_iters,
            tol: o.tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub step_size: f64,
    pub iters: usize,
    pub restarts: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let o = OptimizerOptions::default();
        Self {
            step_size: o.step_size,
            iters: o.iters,
            restarts: o.restarts,
        }
    }
}

impl BaselineSection {
    pub fn options(&self, seed: u64) -> OptimizerOptions {
        OptimizerOptions {
            step_size: self.step_size,
            iters: self.iters,
            restarts: self.restarts,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Network family; `output_dim` is replaced by each entry of `ny_sweep`.
    pub network: SyntheticConfig,
    pub ny_sweep: Vec<usize>,
    pub instances: usize,
    pub seed: u64,
    pub methods: Methods,
    pub mlvamp: MlvampSection,
    pub se: SeSection,
    pub baseline: BaselineSection,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: SyntheticConfig::default(),
            ny_sweep: vec![20, 50, 100, 150, 200, 300, 500],
            instances: 40,
            seed: 0,
            methods: Methods::default(),
            mlvamp: MlvampSection::default(),
            se: SeSection::default(),
            baseline: BaselineSection::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::InvalidArgument(
                "instances must be at least 1".into(),
            ));
        }
        if self.ny_sweep.is_empty() || self.ny_sweep.contains(&0) {
            return Err(Error::InvalidArgument(
                "ny_sweep must be nonempty with positive entries".into(),
            ));
        }
        self.network.validate()?;
        self.mlvamp.options().validate(2)?;
        self.baseline.options(0).validate()?;
        if self.se.mc_samples == 0 || self.se.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "se.mc_samples and se.max_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn se_options(&self, seed: u64) -> SeOptions {
        SeOptions {
            max_iters: self.se.max_iters,
            mc_samples: self.se.mc_samples,
            seed,
            bounds: self.mlvamp.bounds(),
            gamma_init: self.mlvamp.gamma_init,
            tol: self.se.tol,
        }
    }

    pub fn network_for(&self, ny: usize) -> SyntheticConfig {
        SyntheticConfig {
            output_dim: ny,
            ..self.network.clone()
        }
    }
}

/// Parses and validates a TOML config; `origin` names the source in errors.
pub fn config_from_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    config_from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            config_from_str("", "test").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn partial_sections_fill_in() {
        let cfg = config_from_str(
            "ny_sweep = [300]\ninstances = 2\n[network]\nsnr_db = 30.0\n[methods]\nse = false\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.ny_sweep, vec![300]);
        assert_eq!(cfg.network.snr_db, 30.0);
        assert!(cfg.methods.mlvamp && !cfg.methods.se);
        assert_eq!(cfg.mlvamp.damping, 0.8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            config_from_str("instancez = 3", "test"),
            Err(Error::Parse { .. })
        ));
        assert!(config_from_str("[mlvamp]\nstep = 1", "test").is_err());
        assert!(config_from_str("instances = 0", "test").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            output: Some("out.csv".into()),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(config_from_str(&text, "test").unwrap(), cfg);
    }
}
