//! Run configuration: a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use invrl::fit::FitConfig;
use invrl::model::ModelParams;
use invrl::risk::RiskMeasure;
use invrl::sim::{BuyPolicy, MarketSpec};
use serde::{Deserialize, Serialize};

/// How a sell is turned into a GBP reward. Only the cost-basis reading is
/// implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    #[default]
    CostBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub transactions: Option<PathBuf>,
    pub prices: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub out: PathBuf,
    pub lrt_confidence: f64,
    pub ci_confidence: f64,
    pub chance_threshold: f64,
    pub n_scrambles: usize,
    /// Keep only the first `cap` transactions of each active player.
    pub cap: Option<usize>,
    pub risk: RiskMeasure,
    pub reward: RewardScheme,
    pub seed: u64,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
    pub min_sells: usize,
    pub min_span_days: i64,
    pub fit: FitConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            transactions: None,
            prices: None,
            benchmark: None,
            out: PathBuf::from("out"),
            lrt_confidence: 0.95,
            ci_confidence: 0.99,
            chance_threshold: 0.5,
            n_scrambles: 500,
            cap: None,
            risk: RiskMeasure::Beta,
            reward: RewardScheme::CostBasis,
            seed: 0,
            threads: None,
            min_sells: 5,
            min_span_days: 30,
            fit: FitConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

/// Synthetic dataset settings. Every agent shares `params`; sell counts are
/// drawn uniformly from `sells_min..=sells_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_agents: usize,
    pub sells_min: usize,
    pub sells_max: usize,
    pub holding_days: usize,
    pub buy_policy: BuyPolicy,
    pub params: ModelParams,
    /// The market seed is replaced by one derived from the run seed.
    pub market: MarketSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_agents: 10,
            sells_min: 200,
            sells_max: 200,
            holding_days: 1,
            buy_policy: BuyPolicy::UniformRandom,
            params: ModelParams::new(0.8, 20.0, 0.0),
            market: MarketSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for (name, c) in [("lrt_confidence", self.lrt_confidence), ("ci_confidence", self.ci_confidence)] {
            if !(c > 0.0 && c < 1.0) {
                bail!("{name} must lie in (0,1), got {c}");
            }
        }
        if !(0.0..=1.0).contains(&self.chance_threshold) {
            bail!("chance_threshold must lie in [0,1], got {}", self.chance_threshold);
        }
        if self.n_scrambles == 0 {
            bail!("n_scrambles must be at least 1");
        }
        if self.cap == Some(0) {
            bail!("cap must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        let s = &self.simulate;
        if s.n_agents == 0 || s.sells_min == 0 || s.sells_min > s.sells_max || s.holding_days == 0 {
            bail!("simulate: need n_agents >= 1, 1 <= sells_min <= sells_max and holding_days >= 1");
        }
        Ok(())
    }

    pub(crate) fn require(&self, path: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
        path.clone()
            .with_context(|| format!("no {name} file given (set `{name}` or pass --{name})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_sections() {
        let c = RunConfig::from_toml(
            r#"
            risk = "riskiness"
            cap = 25
            [fit.grid]
            alpha = [0.5]
            [simulate]
            n_agents = 3
            [simulate.params]
            alpha = 0.3
            beta_inv_temp = 4.0
            gamma = 0.0
            [simulate.market]
            n_stocks = 12
            "#,
        )
        .unwrap();
        assert_eq!(c.risk, RiskMeasure::Riskiness);
        assert_eq!(c.cap, Some(25));
        assert_eq!(c.fit.grid.alpha, vec![0.5]);
        assert_eq!(c.simulate.market.n_stocks, 12);
        assert_eq!(c.simulate.params.rho, 500.0);
    }

    #[test]
    fn rejects_unknown_keys_and_schemes() {
        assert!(RunConfig::from_toml("n_scramble = 3").is_err());
        assert!(RunConfig::from_toml("reward = \"literal\"").is_err());
        let c = RunConfig { ci_confidence: 1.0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
