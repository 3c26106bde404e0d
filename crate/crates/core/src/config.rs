//! Pipeline configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::EsConfig;
use crate::policy::{Activation, PolicyArchitecture};
use crate::sim::SimConfig;

/// Base seeds. Environment seeds for each dataset are consecutive integers
/// starting at the base; `policy_sampling` keys the stream for drawing the
/// finite policy set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub prior_data: u64,
    pub pac_data: u64,
    pub eval_data: u64,
    pub policy_sampling: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { prior_data: 0, pac_data: 1_000_000, eval_data: 1 << 32, policy_sampling: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Environments for training the prior.
    pub n_hat: usize,
    /// Environments for the bound.
    pub n: usize,
    /// Held-out environments for estimating the true cost.
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_hat: 200, n: 500, n_eval: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacConfig {
    /// Number of policies sampled from the prior.
    pub m: usize,
    pub delta: f64,
    /// Grid resolution of the posterior search.
    pub k: usize,
}

impl Default for PacConfig {
    fn default() -> Self {
        Self { m: 50, delta: 0.01, k: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: vec![24], activation: Activation::Elu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Independent pipeline replications.
    pub trials: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { trials: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: SeedConfig,
    pub data: DataConfig,
    pub pac: PacConfig,
    pub es: EsConfig,
    pub sim: SimConfig,
    pub policy: PolicyConfig,
    pub validate: ValidateConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn architecture(&self) -> Result<PolicyArchitecture> {
        PolicyArchitecture::new(
            self.sim.sensor.n_ray,
            self.sim.primitives.count,
            self.policy.hidden.clone(),
            self.policy.activation,
        )
    }

    /// Environment seeds of the bound dataset for replication `trial`.
    pub fn pac_seeds(&self, trial: u64) -> Vec<u64> {
        let start = self.seeds.pac_data + trial * self.data.n as u64;
        (start..start + self.data.n as u64).collect()
    }

    pub fn prior_seeds(&self) -> Vec<u64> {
        (self.seeds.prior_data..self.seeds.prior_data + self.data.n_hat as u64).collect()
    }

    /// First held-out seed for replication `trial`.
    pub fn eval_seed(&self, trial: u64) -> u64 {
        self.seeds.eval_data + trial * self.data.n_eval as u64
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.data.n_hat == 0 || self.data.n == 0 || self.data.n_eval == 0 {
            return cfg("data: n_hat, n and n_eval must be at least 1".into());
        }
        if self.pac.m == 0 || self.pac.k == 0 {
            return cfg("pac: m and k must be at least 1".into());
        }
        if !(self.pac.delta > 0.0 && self.pac.delta < 1.0) {
            return cfg(format!("pac: delta must lie in (0, 1), got {}", self.pac.delta));
        }
        if self.validate.trials == 0 {
            return cfg("validate: trials must be at least 1".into());
        }
        self.es.validate()?;
        self.sim.validate()?;
        self.architecture()?;
        self.check_seed_spaces()
    }

    /// The prior, bound and held-out seed ranges (including every validation
    /// replication) must not overlap.
    fn check_seed_spaces(&self) -> Result<()> {
        let trials = self.validate.trials as u128;
        let span = |name, start: u64, len: u128| -> Result<(&'static str, u128, u128)> {
            let end = start as u128 + len;
            if end > u64::MAX as u128 + 1 {
                return Err(Error::Config(format!("seeds: the {name} seed range overflows u64")));
            }
            Ok((name, start as u128, end))
        };
        let spaces = [
            span("prior", self.seeds.prior_data, self.data.n_hat as u128)?,
            span("bound", self.seeds.pac_data, self.data.n as u128 * trials)?,
            span("held-out", self.seeds.eval_data, self.data.n_eval as u128 * trials)?,
        ];
        for i in 0..spaces.len() {
            for j in i + 1..spaces.len() {
                let (a, b) = (spaces[i], spaces[j]);
                if a.1 < b.2 && b.1 < a.2 {
                    return Err(Error::Config(format!(
                        "seeds: the {} environment seeds [{}, {}) overlap the {} seeds [{}, {})",
                        a.0, a.1, a.2, b.0, b.1, b.2
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.architecture().unwrap().d(), 1167);
        assert_eq!(cfg.pac_seeds(1)[0], 1_000_500);
        assert_eq!(cfg.eval_seed(2), (1 << 32) + 4000);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("[pac]\nm = 3\ndelta = 0.1\n[sim.env]\nobstacle_count = 5\n").unwrap();
        assert_eq!(partial.pac.m, 3);
        assert_eq!(partial.pac.k, 200);
        assert_eq!(partial.sim.env.obstacle_count, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("[pac]\nmm = 3\n").unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn overlapping_seed_spaces_are_rejected() {
        let err = PipelineConfig::from_toml("[seeds]\npac_data = 100\n").unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        // Replications extend the bound range: 20 x 500 seeds from 1e6 reach 1.01e6.
        let err = PipelineConfig::from_toml("[seeds]\neval_data = 1005000\n").unwrap_err();
        assert!(err.is_config());
        PipelineConfig::from_toml("[seeds]\neval_data = 1010000\n").unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["[pac]\ndelta = 1.5\n", "[data]\nn = 0\n", "[es]\nm_hat = 0\n", "[sim.env]\nr_min = 0.5\nr_max = 0.1\n"] {
            assert!(PipelineConfig::from_toml(text).unwrap_err().is_config(), "{text}");
        }
    }
}
