//! Run configuration: one JSON file with a section per pipeline stage.
//! Unknown keys are rejected at every level so sweep typos fail loudly.

use std::fs;
use std::path::Path;

use ciae_core::fusion::OobScore;
use ciae_core::{LossConfig, ProposalSimConfig, SceneGenConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Inference post-processing knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Absolute override; when absent the threshold scales with image area.
    pub min_stuff_area: Option<usize>,
    pub oob_score: OobScore,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            min_stuff_area: None,
            oob_score: OobScore::Zero,
        }
    }
}

impl FusionConfig {
    pub fn min_stuff_area_for(&self, height: usize, width: usize) -> usize {
        self.min_stuff_area
            .unwrap_or_else(|| ciae_core::default_min_stuff_area(height, width))
    }
}

/// Swept parameter of an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateParam {
    Margin,
    BoxExpand,
    Filtering,
    Dim,
    Momentum,
}

impl AblateParam {
    pub fn name(&self) -> &'static str {
        match self {
            AblateParam::Margin => "margin",
            AblateParam::BoxExpand => "box_expand",
            AblateParam::Filtering => "filtering",
            AblateParam::Dim => "dim",
            AblateParam::Momentum => "momentum",
        }
    }
}

/// Sweep description: which parameter, which values, how many seeds each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub param: AblateParam,
    pub values: Vec<serde_json::Value>,
    pub seeds: u64,
}

/// Union of all stage configurations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneGenConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub proposals: ProposalSimConfig,
    pub fusion: FusionConfig,
    pub ablate: Option<AblateConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene
            .validate()
            .and_then(|_| self.loss.validate())
            .and_then(|_| self.train.validate())
            .and_then(|_| self.proposals.validate())
            .map_err(|e| CliError::config(e.to_string()))?;
        if let Some(ablate) = &self.ablate {
            if ablate.values.is_empty() {
                return Err(CliError::config("ablate.values must not be empty".into()));
            }
            if ablate.seeds == 0 {
                return Err(CliError::config("ablate.seeds must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Write the effective configuration next to a command's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("config echo: {e}")))?;
        json.push('\n');
        fs::write(out_dir.join("config.echo.json"), json)
            .map_err(|e| CliError::runtime(format!("config echo: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"scene": {"heigth": 32}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let json = r#"{"scnee": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn partial_sections_use_defaults() {
        let json = r#"{"loss": {"margin": 0.3}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.loss.margin, 0.3);
        assert_eq!(cfg.loss.top_k, 5);
        assert_eq!(cfg.scene.height, 32);
    }
}
