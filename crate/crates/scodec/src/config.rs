//! Whole-codec configuration: sample rate, transform geometry, network
//! geometry and quantizer schedule, with the two shipped profiles.

use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::mdct::MdctConfig;
use crate::neural::CodecNetConfig;
use crate::rsvq::QuantizerSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub net: CodecNetConfig,
    pub schedule: QuantizerSchedule,
}

impl CodecConfig {
    /// Named profile ("low" or "high") at a sample rate.
    pub fn profile(name: &str, sample_rate: u32) -> Result<Self> {
        let schedule = QuantizerSchedule::profile(name)?;
        let cfg = Self {
            sample_rate,
            net: CodecNetConfig::default(),
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.schedule.validate()?;
        if self.sample_rate == 0 {
            return Err(CodecError::Config("sample rate must be positive".into()));
        }
        if self.net.latent_dim != self.schedule.latent_dim {
            return Err(CodecError::Config(format!(
                "network latent dimension {} does not match the quantizer's {}",
                self.net.latent_dim, self.schedule.latent_dim
            )));
        }
        Ok(())
    }

    /// MDCT frame shift in samples.
    pub fn frame_shift(&self) -> usize {
        self.net.bins
    }

    /// Samples consumed/produced per token frame.
    pub fn group_samples(&self) -> usize {
        self.net.bins * self.net.resample
    }

    /// Fixed algorithmic delay in samples: one token frame of input.
    pub fn algorithmic_delay_samples(&self) -> usize {
        self.group_samples()
    }

    pub fn mdct(&self) -> Result<MdctConfig> {
        MdctConfig::new(self.net.bins)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| CodecError::Config(format!("cannot parse codec config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for name in ["low", "high"] {
            for rate in [16000, 48000] {
                let cfg = CodecConfig::profile(name, rate).unwrap();
                assert_eq!(cfg.group_samples(), 320);
                assert_eq!(cfg.algorithmic_delay_samples(), 320);
                let text = cfg.to_toml();
                assert_eq!(CodecConfig::from_toml(&text).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn latent_dim_mismatch_is_rejected() {
        let mut cfg = CodecConfig::profile("low", 16000).unwrap();
        cfg.net.latent_dim = 16;
        assert!(cfg.validate().is_err());
    }
}
