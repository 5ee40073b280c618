//! Maximum-likelihood fitting of the nested models and the comparison
//! battery built on top of it.
//!
//! Three models are compared per player:
//!
//! | model    | free parameters        | NLL                       |
//! |----------|------------------------|---------------------------|
//! | Random   | none                   | `n ln 3`                  |
//! | Myopic   | alpha, beta            | fitted, gamma pinned to 0 |
//! | FullRL   | alpha, beta, gamma     | fitted                    |
//!
//! Nested pairs are compared with a likelihood-ratio test; the ranked
//! classification is compared against scrambled ones with BIC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PlayerHistory;
use crate::model::{ChoiceSequence, ModelParams, ParamBounds, DEFAULT_RHO};
use crate::optimize::{minimize_bounded, MinimizeOptions, Termination};
use crate::risk::{scramble, RiskClassification};
use crate::stats::{bic, chi2_quantile, chi2_sf, clopper_pearson, PopulationStat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Random,
    Myopic,
    FullRl,
}

impl ModelKind {
    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Random => 0,
            ModelKind::Myopic => 2,
            ModelKind::FullRl => 3,
        }
    }
}

/// Entry-point values per parameter; the start grid is their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartGrid {
    pub alpha: Vec<f64>,
    pub beta_inv_temp: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for StartGrid {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 0.5, 2.0],
            beta_inv_temp: vec![0.0, 25.0, 50.0],
            gamma: vec![0.0, 0.5, 0.9999],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub bounds: ParamBounds,
    pub grid: StartGrid,
    /// Distance kept from open bounds.
    pub bound_epsilon: f64,
    pub minimize: MinimizeOptions,
    pub rho: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bounds: ParamBounds::default(),
            grid: StartGrid::default(),
            bound_epsilon: 1e-6,
            minimize: MinimizeOptions::default(),
            rho: DEFAULT_RHO,
        }
    }
}

impl FitConfig {
    fn boxes(&self) -> [(f64, f64); 3] {
        let e = self.bound_epsilon;
        [
            self.bounds.alpha.shrunk(e),
            self.bounds.beta_inv_temp.shrunk(e),
            self.bounds.gamma.shrunk(e),
        ]
    }

    /// Grid entry points clamped into the search box. Myopic starts drop
    /// the gamma axis.
    pub fn starts(&self, model: ModelKind) -> Vec<[f64; 3]> {
        let b = self.boxes();
        let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
        let gammas: Vec<f64> = match model {
            ModelKind::FullRl => self.grid.gamma.iter().map(|&g| clamp(g, b[2])).collect(),
            _ => vec![0.0],
        };
        let mut out = Vec::new();
        for &a in &self.grid.alpha {
            for &be in &self.grid.beta_inv_temp {
                for &g in &gammas {
                    out.push([clamp(a, b[0]), clamp(be, b[1]), g]);
                }
            }
        }
        out
    }
}

/// One multi-start entry and where it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub entry: [f64; 3],
    pub converged: Option<[f64; 3]>,
    pub nll: Option<f64>,
    pub termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub best_params: Option<ModelParams>,
    pub nll: f64,
    pub n_obs: usize,
    pub n_params: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub starts: Vec<StartRecord>,
}

impl FitResult {
    pub fn random(n_obs: usize) -> Result<Self> {
        Ok(Self {
            model: ModelKind::Random,
            best_params: None,
            nll: random_nll(n_obs)?,
            n_obs,
            n_params: 0,
            starts: Vec::new(),
        })
    }

    pub fn bic(&self) -> f64 {
        bic(self.nll, self.n_params, self.n_obs).expect("n_obs >= 1")
    }
}

/// NLL of uniform choice among three bins: `n ln 3`.
pub fn random_nll(n_sells: usize) -> Result<f64> {
    if n_sells == 0 {
        return Err(Error::NoSells);
    }
    Ok(n_sells as f64 * 3f64.ln())
}

/// Fit `model` to a player's history under `classification`.
pub fn fit_player(
    history: &PlayerHistory,
    classification: &RiskClassification,
    model: ModelKind,
    config: &FitConfig,
) -> Result<FitResult> {
    let seq = ChoiceSequence::from_history(history, classification, config.rho)?;
    fit_sequence(&seq, model, config)
}

/// Fit a prepared choice sequence. For the full model, the myopic optimum
/// is fitted first and injected as an extra start.
pub fn fit_sequence(seq: &ChoiceSequence, model: ModelKind, config: &FitConfig) -> Result<FitResult> {
    match model {
        ModelKind::Random => FitResult::random(seq.len()),
        ModelKind::Myopic => multi_start(seq, model, config.starts(model), config),
        ModelKind::FullRl => {
            let myopic = fit_sequence(seq, ModelKind::Myopic, config)?;
            fit_full_from(seq, &myopic, config)
        }
    }
}

/// Full-model fit that reuses an existing myopic fit as an extra start.
pub fn fit_full_from(seq: &ChoiceSequence, myopic: &FitResult, config: &FitConfig) -> Result<FitResult> {
    let mut starts = config.starts(ModelKind::FullRl);
    if let Some(p) = myopic.best_params {
        starts.push([p.alpha, p.beta_inv_temp, 0.0]);
    }
    multi_start(seq, ModelKind::FullRl, starts, config)
}

fn multi_start(
    seq: &ChoiceSequence,
    model: ModelKind,
    starts: Vec<[f64; 3]>,
    config: &FitConfig,
) -> Result<FitResult> {
    let boxes = config.boxes();
    let dims = if model == ModelKind::FullRl { 3 } else { 2 };
    let lower: Vec<f64> = boxes[..dims].iter().map(|b| b.0).collect();
    let upper: Vec<f64> = boxes[..dims].iter().map(|b| b.1).collect();
    let rho = config.rho;
    let objective = |x: &[f64]| {
        let gamma = if dims == 3 { x[2] } else { 0.0 };
        seq.nll(&ModelParams::new(x[0], x[1], gamma).with_rho(rho))
    };

    let records: Vec<StartRecord> = starts
        .par_iter()
        .map(|entry| {
            match minimize_bounded(objective, &entry[..dims], &lower, &upper, &config.minimize) {
                Ok(m) => {
                    let gamma = if dims == 3 { m.x[2] } else { 0.0 };
                    StartRecord {
                        entry: *entry,
                        converged: Some([m.x[0], m.x[1], gamma]),
                        nll: Some(m.f),
                        termination: Some(m.termination),
                        error: None,
                    }
                }
                Err(e) => StartRecord {
                    entry: *entry,
                    converged: None,
                    nll: None,
                    termination: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    // first minimum wins ties, so the reduction is schedule-independent
    let best = records
        .iter()
        .filter_map(|r| Some((r.nll?, r.converged?)))
        .fold(None::<(f64, [f64; 3])>, |acc, (nll, x)| match acc {
            Some((b, _)) if b <= nll => acc,
            _ => Some((nll, x)),
        });
    let (nll, x) = best.ok_or_else(|| Error::Fit(format!("all {} starts failed", records.len())))?;
    Ok(FitResult {
        model,
        best_params: Some(ModelParams::new(x[0], x[1], x[2]).with_rho(rho)),
        nll,
        n_obs: seq.len(),
        n_params: model.n_params(),
        starts: records,
    })
}

/// Myopic and full fits of one player together with the random baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerFits {
    pub random: FitResult,
    pub myopic: FitResult,
    pub full: FitResult,
}

pub fn fit_all_models(
    history: &PlayerHistory,
    classification: &RiskClassification,
    config: &FitConfig,
) -> Result<PlayerFits> {
    let seq = ChoiceSequence::from_history(history, classification, config.rho)?;
    let myopic = fit_sequence(&seq, ModelKind::Myopic, config)?;
    let full = fit_full_from(&seq, &myopic, config)?;
    Ok(PlayerFits {
        random: FitResult::random(seq.len())?,
        myopic,
        full,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub nested: ModelKind,
    pub fuller: ModelKind,
    pub lrt_statistic: f64,
    pub dof: u32,
    pub confidence: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub fn likelihood_ratio_test(
    nested: &FitResult,
    fuller: &FitResult,
    confidence: f64,
) -> Result<ComparisonResult> {
    if nested.n_obs != fuller.n_obs {
        return Err(Error::InvalidArgument(format!(
            "models fitted to different data: {} vs {} observations",
            nested.n_obs, fuller.n_obs
        )));
    }
    if nested.n_params >= fuller.n_params {
        return Err(Error::InvalidArgument(format!(
            "{:?} is not nested in {:?}",
            nested.model, fuller.model
        )));
    }
    let dof = (fuller.n_params - nested.n_params) as u32;
    let statistic = (2.0 * (nested.nll - fuller.nll)).max(0.0);
    let critical_value = chi2_quantile(confidence, dof)?;
    Ok(ComparisonResult {
        nested: nested.model,
        fuller: fuller.model,
        lrt_statistic: statistic,
        dof,
        confidence,
        critical_value,
        p_value: chi2_sf(statistic, dof),
        significant: statistic > critical_value,
    })
}

/// Seed for the `index`-th derived stream (splitmix64 finalizer over
/// master and index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrambleOutcome {
    pub ranked_bic: f64,
    /// `None` where the scrambled fit failed.
    pub scrambled_bic: Vec<Option<f64>>,
    pub stat: PopulationStat,
    pub diagnostics: Vec<String>,
}

/// Compare the myopic fit under the ranked classification against fits under
/// `n_scrambles` scrambled classifications. A success is a strictly lower
/// ranked BIC.
pub fn scrambled_experiment(
    history: &PlayerHistory,
    ranked: &RiskClassification,
    n_scrambles: usize,
    seed: u64,
    confidence: f64,
    config: &FitConfig,
) -> Result<ScrambleOutcome> {
    if n_scrambles == 0 {
        return Err(Error::InvalidArgument("n_scrambles must be at least 1".into()));
    }
    let seq = ChoiceSequence::from_history(history, ranked, config.rho)?;
    let ranked_bic = fit_sequence(&seq, ModelKind::Myopic, config)?.bic();

    let scrambled_bic: Vec<std::result::Result<f64, String>> = (0..n_scrambles as u64)
        .into_par_iter()
        .map(|i| {
            let c = scramble(ranked, derive_seed(seed, i));
            let actions = history
                .sells()
                .iter()
                .map(|s| c.bin(&s.stock).ok_or_else(|| s.stock.clone()))
                .collect::<std::result::Result<Vec<u8>, _>>()
                .map_err(|s| format!("stock {s} unclassified"))?;
            let relabelled = seq.with_actions(actions).map_err(|e| e.to_string())?;
            fit_sequence(&relabelled, ModelKind::Myopic, config)
                .map(|f| f.bic())
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut diagnostics = Vec::new();
    let mut successes = 0;
    let mut trials = 0;
    for (i, r) in scrambled_bic.iter().enumerate() {
        match r {
            Ok(b) => {
                trials += 1;
                successes += u64::from(ranked_bic < *b);
            }
            Err(e) => diagnostics.push(format!("scramble {i}: {e}")),
        }
    }
    if trials == 0 {
        return Err(Error::Fit("every scrambled fit failed".into()));
    }
    Ok(ScrambleOutcome {
        ranked_bic,
        scrambled_bic: scrambled_bic.into_iter().map(|r| r.ok()).collect(),
        stat: clopper_pearson(successes, trials, confidence)?,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationVerdict {
    pub stat: PopulationStat,
    pub chance_threshold: f64,
    /// Interval lies entirely above the chance threshold.
    pub positive: bool,
}

/// Count significant comparisons and test the proportion against chance.
pub fn population_verdict(
    per_player: &[ComparisonResult],
    confidence: f64,
    chance_threshold: f64,
) -> Result<PopulationVerdict> {
    if per_player.is_empty() {
        return Err(Error::InvalidArgument("no players".into()));
    }
    let successes = per_player.iter().filter(|c| c.significant).count() as u64;
    let stat = clopper_pearson(successes, per_player.len() as u64, confidence)?;
    Ok(PopulationVerdict {
        stat,
        chance_threshold,
        positive: stat.low > chance_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fit(model: ModelKind, nll: f64, n_obs: usize) -> FitResult {
        FitResult {
            model,
            best_params: None,
            nll,
            n_obs,
            n_params: model.n_params(),
            starts: vec![],
        }
    }

    #[test]
    fn random_baseline() {
        assert_relative_eq!(random_nll(1).unwrap(), 1.0986122886681098, epsilon = 1e-15);
        assert_relative_eq!(random_nll(30).unwrap(), 32.958368660043291, epsilon = 1e-12);
        assert_relative_eq!(random_nll(107).unwrap(), 117.55151488748775, epsilon = 1e-11);
        assert!(random_nll(0).is_err());
    }

    #[test]
    fn start_grids() {
        let cfg = FitConfig::default();
        let full = cfg.starts(ModelKind::FullRl);
        assert_eq!(full.len(), 27);
        assert_eq!(cfg.starts(ModelKind::Myopic).len(), 9);
        assert!(cfg.starts(ModelKind::Myopic).iter().all(|s| s[2] == 0.0));
        assert_eq!(full[0], [0.0001 + 1e-6, 1e-6, 0.0]);
        assert_eq!(full[26], [2.0 - 1e-6, 50.0 - 1e-6, 0.9999]);
    }

    #[test]
    fn lrt_examples() {
        let r = fit(ModelKind::Random, 20.0, 10);
        let m = fit(ModelKind::Myopic, 20.0, 10);
        let c = likelihood_ratio_test(&r, &m, 0.95).unwrap();
        assert_eq!(c.dof, 2);
        assert!((c.critical_value - 5.991).abs() < 1e-3);
        assert_eq!(c.lrt_statistic, 0.0);
        assert_eq!(c.p_value, 1.0);
        assert!(!c.significant);

        let f = fit(ModelKind::FullRl, 10.0, 10);
        let c = likelihood_ratio_test(&r, &f, 0.95).unwrap();
        assert_eq!(c.dof, 3);
        assert!((c.critical_value - 7.815).abs() < 1e-3);
        assert!(c.significant);

        let c = likelihood_ratio_test(&m, &f, 0.95).unwrap();
        assert_eq!(c.dof, 1);
        assert!((c.critical_value - 3.841).abs() < 1e-3);

        // slightly negative differences clip to zero
        let worse = fit(ModelKind::FullRl, 20.0 + 1e-12, 10);
        assert_eq!(likelihood_ratio_test(&m, &worse, 0.95).unwrap().lrt_statistic, 0.0);

        assert!(likelihood_ratio_test(&m, &fit(ModelKind::FullRl, 1.0, 11), 0.95).is_err());
        assert!(likelihood_ratio_test(&f, &m, 0.95).is_err());
    }

    #[test]
    fn lrt_shift_invariance() {
        for shift in [-3.0, 0.0, 12.5] {
            let a = likelihood_ratio_test(
                &fit(ModelKind::Random, 30.0 + shift, 20),
                &fit(ModelKind::Myopic, 24.0 + shift, 20),
                0.95,
            )
            .unwrap();
            assert_relative_eq!(a.lrt_statistic, 12.0, epsilon = 1e-9);
        }
    }

    fn verdicts(significant: usize, total: usize) -> Vec<ComparisonResult> {
        (0..total)
            .map(|i| ComparisonResult {
                nested: ModelKind::Random,
                fuller: ModelKind::Myopic,
                lrt_statistic: 0.0,
                dof: 2,
                confidence: 0.95,
                critical_value: 5.991,
                p_value: 1.0,
                significant: i < significant,
            })
            .collect()
    }

    #[test]
    fn population_examples() {
        let v = population_verdict(&verdicts(7, 46), 0.99, 0.5).unwrap();
        assert!(!v.positive);
        assert!(v.stat.high < 0.5);
        let v = population_verdict(&verdicts(46, 46), 0.99, 0.5).unwrap();
        assert!(v.positive);
        let v = population_verdict(&verdicts(0, 46), 0.99, 0.5).unwrap();
        assert_eq!(v.stat.low, 0.0);
        assert!(!v.positive);
        assert!(population_verdict(&[], 0.99, 0.5).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}
