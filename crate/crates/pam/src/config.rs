//! Run configuration for the CLI: strict TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, GateMode, PlacementPlan};
use crate::error::{Error, Result};
use crate::harness::data::YawLaw;
use crate::harness::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub n_per_identity: usize,
    pub yaw_law: YawLaw,
    pub eval_pairs: usize,
    pub eval_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            seed: 1,
            n_identities: 20,
            n_per_identity: 50,
            yaw_law: YawLaw::FrontalSkewed,
            eval_pairs: 400,
            eval_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub placement: String,
    pub gate_mode: GateMode,
    pub gate_k_slope: f64,
    pub model_seed: u64,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            placement: "PAM12".to_string(),
            gate_mode: GateMode::Yaw,
            gate_k_slope: 10.0,
            model_seed: 0,
            output_dir: PathBuf::from("out"),
            backbone: BackboneConfig::toy(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Collects every validation failure before reporting.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = PlacementPlan::parse(&self.placement) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.backbone.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if self.gate_k_slope <= 0.0 {
            problems.push(format!("gate slope {} must be positive", self.gate_k_slope));
        }
        if self.dataset.n_identities < 2 || self.dataset.n_per_identity < 2 {
            problems.push("dataset needs at least 2 identities and 2 samples each".to_string());
        }
        if self.dataset.eval_pairs == 0 {
            problems.push("eval_pairs must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn plan(&self) -> Result<PlacementPlan> {
        PlacementPlan::parse(&self.placement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.placement, cfg.placement);
        assert_eq!(back.backbone, cfg.backbone);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text.push_str("\nmystery_knob = 3\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn unknown_section_key_rejected() {
        let text = RunConfig::default().to_toml().replace("momentum", "momentumm");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn validation_collects_multiple_problems() {
        let mut cfg = RunConfig::default();
        cfg.placement = "PAM99".to_string();
        cfg.gate_k_slope = -1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("placement") || msg.contains("stage"));
        assert!(msg.contains("slope"));
    }
}
