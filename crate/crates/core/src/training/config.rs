use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::objective::{DecayWeighting, LossWeights};

use super::{Result, TrainError};

/// Scaled-down configuration for the bundled synthetic benchmark.
pub const BENCHMARK_CONFIG: &str = include_str!("../../assets/benchmark_config.toml");

/// How many forecast steps contribute to a point's prediction terms at
/// scoring time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreHorizon {
    /// Only the 1-step forecast (causal).
    #[default]
    OneStep,
    /// Mean error over every horizon step that targets the point.
    Full,
}

/// Training hyperparameters, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window_size: usize,
    pub latent_size: usize,
    pub memory_size: usize,
    pub pred_step: usize,
    pub reconstruction_weight: f64,
    pub forward_prediction_weight: f64,
    pub backward_prediction_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub no_memory: bool,
    pub no_prediction: bool,
    /// Global gradient-norm limit per optimizer step; 0 disables clipping.
    pub grad_clip: f64,
    pub conv_channels: Vec<usize>,
    pub hidden_size: usize,
    pub pred_weighting: DecayWeighting,
    pub score_horizon: ScoreHorizon,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_size: 32,
            latent_size: 16,
            memory_size: 512,
            pred_step: 7,
            reconstruction_weight: 1.0,
            forward_prediction_weight: 2.0,
            backward_prediction_weight: 0.1,
            learning_rate: 1e-3,
            epochs: 150,
            batches_per_epoch: 512,
            batch_size: 64,
            seed: 0,
            no_memory: false,
            no_prediction: false,
            grad_clip: 5.0,
            conv_channels: vec![32, 64],
            hidden_size: 64,
            pred_weighting: DecayWeighting::Literal,
            score_horizon: ScoreHorizon::OneStep,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.reconstruction_weight,
            gamma1: self.forward_prediction_weight,
            gamma2: self.backward_prediction_weight,
        }
    }

    pub fn model_config(&self, n_vars: usize) -> ModelConfig {
        ModelConfig {
            n_vars,
            window_size: self.window_size,
            latent_size: self.latent_size,
            memory_size: self.memory_size,
            pred_step: self.pred_step,
            conv_channels: self.conv_channels.clone(),
            hidden_size: self.hidden_size,
            use_memory: !self.no_memory,
            use_prediction: !self.no_prediction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
        ];
        // epochs may be zero: that yields the initialization
        if let Some((name, _)) = counts[1..].iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(TrainError::Config(format!("grad_clip = {} must be non-negative", self.grad_clip)));
        }
        self.weights().validate().map_err(TrainError::Config)?;
        self.model_config(1).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(TrainConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = TrainConfig::from_toml("window_size = 16\nreconstruction_weight = 2.5\npred_weighting = \"shifted\"\n").unwrap();
        assert_eq!(c.window_size, 16);
        assert_eq!(c.reconstruction_weight, 2.5);
        assert_eq!(c.pred_weighting, DecayWeighting::Shifted);
        assert_eq!(c.memory_size, 512);
    }

    #[test]
    fn bundled_benchmark_config_parses() {
        let c = TrainConfig::from_toml(BENCHMARK_CONFIG).unwrap();
        assert_eq!((c.memory_size, c.epochs, c.batch_size), (64, 50, 32));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml("windw_size = 16\n").unwrap_err().to_string();
        assert!(err.contains("windw_size"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "pred_step = 0",
            "batch_size = 0",
            "learning_rate = -1.0",
            "window_size = 30",
            "backward_prediction_weight = -0.5",
            "grad_clip = -1.0",
        ] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
        assert!(TrainConfig::from_toml("epochs = 0").is_ok());
    }
}
