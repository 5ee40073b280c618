//! CAPM beta estimation and discrete risk classification.
//!
//! Stocks are scored (beta, or the beta/volatility riskiness variant),
//! sorted ascending, and split into three balanced bins. Bin 0 is the
//! safest. Scrambled classifications permute the stock-to-bin assignment
//! while keeping the bin sizes.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::N_ACTIONS;

pub const PRICE_HEADER: [&str; 3] = ["stock", "date", "close"];

/// Daily closing prices of one stock (or of the benchmark).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    stock: String,
    observations: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    pub fn new(stock: impl Into<String>, observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let stock = stock.into();
        if let Some(w) = observations.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::Format(format!(
                "{stock}: dates not strictly increasing at {}",
                w[1].0
            )));
        }
        if let Some((d, p)) = observations.iter().find(|(_, p)| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::Format(format!("{stock}: non-positive price {p} on {d}")));
        }
        Ok(Self {
            stock,
            observations,
        })
    }

    pub fn stock(&self) -> &str {
        &self.stock
    }

    pub fn observations(&self) -> &[(NaiveDate, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Read the price CSV (`stock,date,close`). Rows may arrive in any order;
/// each stock's observations are sorted by date.
pub fn parse_prices<R: Read>(source: R) -> Result<Vec<PriceSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if headers != PRICE_HEADER {
        return Err(Error::Format(format!(
            "expected header {:?}, found {:?}",
            PRICE_HEADER.join(","),
            headers.join(",")
        )));
    }
    let mut order = Vec::new();
    let mut grouped: HashMap<String, Vec<(NaiveDate, f64)>> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let stock = row[0].to_owned();
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
            .map_err(|e| Error::Format(format!("line {line}: bad date {:?}: {e}", &row[1])))?;
        let close: f64 = row[2]
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: bad close {:?}", &row[2])))?;
        grouped
            .entry(stock.clone())
            .or_insert_with(|| {
                order.push(stock);
                Vec::new()
            })
            .push((date, close));
    }
    order
        .into_iter()
        .map(|stock| {
            let mut obs = grouped.remove(&stock).unwrap_or_default();
            obs.sort_by_key(|o| o.0);
            PriceSeries::new(stock, obs)
        })
        .collect()
}

pub fn write_prices<W: Write>(sink: W, series: &[PriceSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(PRICE_HEADER)?;
    for s in series {
        for (d, p) in s.observations() {
            w.write_record([s.stock(), &d.format("%Y-%m-%d").to_string(), &p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Simple daily returns `p_t / p_{t-1} - 1`, dated at `t`.
pub fn daily_returns(series: &PriceSeries) -> Result<Vec<(NaiveDate, f64)>> {
    let obs = series.observations();
    if obs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: need at least 2 prices, have {}",
            series.stock(),
            obs.len()
        )));
    }
    Ok(obs.windows(2).map(|w| (w[1].0, w[1].1 / w[0].1 - 1.0)).collect())
}

/// Intercept and slope of `r_a = intercept + beta * r_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapmFit {
    pub beta: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Inner-join two dated series on date. Both inputs must be date-sorted.
fn align(a: &[(NaiveDate, f64)], b: &[(NaiveDate, f64)]) -> (Vec<f64>, Vec<f64>) {
    let (mut i, mut j) = (0, 0);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xa.push(a[i].1);
                xb.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    (xa, xb)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample (n-1) covariance.
fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn capm_regression(asset: &[(NaiveDate, f64)], benchmark: &[(NaiveDate, f64)]) -> Result<CapmFit> {
    let (a, b) = align(asset, benchmark);
    if a.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} aligned returns, need at least 2",
            a.len()
        )));
    }
    let var_b = covariance(&b, &b);
    if var_b <= 0.0 || !var_b.is_finite() {
        return Err(Error::DegenerateBenchmark);
    }
    let beta = covariance(&a, &b) / var_b;
    Ok(CapmFit {
        beta,
        intercept: mean(&a) - beta * mean(&b),
        n: a.len(),
    })
}

/// `Cov(r_a, r_b) / Var(r_b)` over dates present in both series.
pub fn capm_beta(asset: &[(NaiveDate, f64)], benchmark: &[(NaiveDate, f64)]) -> Result<f64> {
    capm_regression(asset, benchmark).map(|f| f.beta)
}

/// Sample standard deviation of returns.
pub fn return_sigma(returns: &[(NaiveDate, f64)]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData("sigma needs 2 returns".into()));
    }
    let x: Vec<f64> = returns.iter().map(|r| r.1).collect();
    Ok(covariance(&x, &x).sqrt())
}

/// `|beta * sigma / sigma_max|`.
pub fn riskiness(beta: f64, sigma: f64, sigma_max: f64) -> Result<f64> {
    if !(sigma_max > 0.0) {
        return Err(Error::DegeneratePool(sigma_max));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
    }
    Ok((beta * sigma / sigma_max).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    BetaRanked,
    RiskinessRanked,
    Scrambled(u64),
}

/// Which score ranks the stocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMeasure {
    #[default]
    Beta,
    Riskiness,
}

/// Stock to risk-bin mapping, with the betas behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskClassification {
    pub scheme: Scheme,
    pub bins: BTreeMap<String, u8>,
    pub betas: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sigma: BTreeMap<String, f64>,
}

impl RiskClassification {
    pub fn bin(&self, stock: &str) -> Option<u8> {
        self.bins.get(stock).copied()
    }

    pub fn bin_sizes(&self) -> [usize; N_ACTIONS] {
        let mut sizes = [0; N_ACTIONS];
        for &b in self.bins.values() {
            sizes[b as usize] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sizes of the three bins for a pool of `n`: differ by at most one, larger
/// bins first (107 -> 36, 36, 35).
pub fn balanced_sizes(n: usize) -> [usize; N_ACTIONS] {
    let base = n / N_ACTIONS;
    let rem = n % N_ACTIONS;
    std::array::from_fn(|i| base + usize::from(i < rem))
}

/// Sort the pool ascending by score (ties by stock id) and cut into bins.
pub fn rank_into_bins(
    scores: &BTreeMap<String, f64>,
    pool: &[String],
    scheme: Scheme,
) -> Result<RiskClassification> {
    let mut scored = Vec::with_capacity(pool.len());
    for stock in pool {
        let s = *scores
            .get(stock)
            .ok_or_else(|| Error::MissingScore(stock.clone()))?;
        if s.is_nan() {
            return Err(Error::MissingScore(stock.clone()));
        }
        scored.push((s, stock));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let sizes = balanced_sizes(scored.len());
    let mut bins = BTreeMap::new();
    let mut it = scored.into_iter();
    for (bin, &size) in sizes.iter().enumerate() {
        for (_, stock) in it.by_ref().take(size) {
            bins.insert(stock.clone(), bin as u8);
        }
    }
    Ok(RiskClassification {
        scheme,
        bins,
        betas: BTreeMap::new(),
        sigma: BTreeMap::new(),
    })
}

/// Uniformly random bin assignment with the same bin sizes.
pub fn scramble(classification: &RiskClassification, seed: u64) -> RiskClassification {
    let mut labels: Vec<u8> = classification.bins.values().copied().collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bins = classification
        .bins
        .keys()
        .cloned()
        .zip(labels)
        .collect();
    RiskClassification {
        scheme: Scheme::Scrambled(seed),
        bins,
        betas: classification.betas.clone(),
        sigma: classification.sigma.clone(),
    }
}

/// Estimate betas (and sigmas) for every series against the benchmark and
/// rank them with the chosen measure.
pub fn classify(
    benchmark: &PriceSeries,
    stocks: &[PriceSeries],
    measure: RiskMeasure,
) -> Result<RiskClassification> {
    let bench = daily_returns(benchmark)?;
    let mut betas = BTreeMap::new();
    let mut sigma = BTreeMap::new();
    let mut pool = Vec::with_capacity(stocks.len());
    for s in stocks {
        let r = daily_returns(s)?;
        betas.insert(s.stock().to_owned(), capm_beta(&r, &bench)?);
        sigma.insert(s.stock().to_owned(), return_sigma(&r)?);
        pool.push(s.stock().to_owned());
    }
    let (scores, scheme) = match measure {
        RiskMeasure::Beta => (betas.clone(), Scheme::BetaRanked),
        RiskMeasure::Riskiness => {
            let sigma_max = sigma.values().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut scores = BTreeMap::new();
            for (stock, &b) in &betas {
                scores.insert(stock.clone(), riskiness(b, sigma[stock], sigma_max)?);
            }
            (scores, Scheme::RiskinessRanked)
        }
    };
    let mut c = rank_into_bins(&scores, &pool, scheme)?;
    c.betas = betas;
    c.sigma = sigma;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2013, 6, 3).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    fn series(prices: &[f64]) -> PriceSeries {
        PriceSeries::new("X", dates(prices.len()).into_iter().zip(prices.iter().copied()).collect()).unwrap()
    }

    fn dated(values: &[f64]) -> Vec<(NaiveDate, f64)> {
        dates(values.len()).into_iter().zip(values.iter().copied()).collect()
    }

    #[test]
    fn returns_examples() {
        let r = daily_returns(&series(&[100.0, 110.0])).unwrap();
        assert_relative_eq!(r[0].1, 0.10, epsilon = 1e-15);
        let r = daily_returns(&series(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(r.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0.0, 0.0]);
        let r = daily_returns(&series(&[100.0, 110.0, 99.0])).unwrap();
        assert_relative_eq!(r[1].1, -0.10, epsilon = 1e-15);
        assert!(matches!(
            daily_returns(&series(&[1.0])),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn price_series_invariants() {
        let d = dates(2);
        assert!(PriceSeries::new("X", vec![(d[1], 1.0), (d[0], 1.0)]).is_err());
        assert!(PriceSeries::new("X", vec![(d[0], 0.0)]).is_err());
    }

    #[test]
    fn beta_examples() {
        let b = dated(&[0.01, -0.02, 0.005, 0.03, -0.01]);
        assert_relative_eq!(capm_beta(&b, &b).unwrap(), 1.0, epsilon = 1e-12);
        let a2 = dated(&[0.02, -0.04, 0.01, 0.06, -0.02]);
        assert_relative_eq!(capm_beta(&a2, &b).unwrap(), 2.0, epsilon = 1e-12);
        let c = dated(&[0.003; 5]);
        assert_relative_eq!(capm_beta(&c, &b).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(capm_beta(&b, &c), Err(Error::DegenerateBenchmark)));
        assert!(matches!(
            capm_beta(&b[..1], &b[..1]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn beta_inner_joins_dates() {
        let b = dated(&[0.01, -0.02, 0.005, 0.03, -0.01]);
        let mut a: Vec<_> = b.iter().map(|&(d, r)| (d, 3.0 * r)).collect();
        a.remove(2);
        assert_relative_eq!(capm_beta(&a, &b).unwrap(), 3.0, epsilon = 1e-12);
        let fit = capm_regression(&a, &b).unwrap();
        assert_eq!(fit.n, 4);
        assert_relative_eq!(fit.intercept, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn riskiness_examples() {
        assert_eq!(riskiness(1.0, 0.2, 0.2).unwrap(), 1.0);
        assert_relative_eq!(riskiness(-0.5, 0.1, 0.2).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(riskiness(0.0, 0.7, 0.2).unwrap(), 0.0);
        assert!(matches!(riskiness(1.0, 0.1, 0.0), Err(Error::DegeneratePool(_))));
    }

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i:03}")).collect()
    }

    #[test]
    fn rank_examples() {
        let p = pool(107);
        let scores: BTreeMap<_, _> = p.iter().enumerate().map(|(i, s)| (s.clone(), (i * 7 % 107) as f64)).collect();
        let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        assert_eq!(c.bin_sizes(), [36, 36, 35]);

        let p: Vec<String> = ["A", "B", "C"].map(String::from).to_vec();
        let scores = BTreeMap::from([("A".into(), 0.5), ("B".into(), 1.5), ("C".into(), 1.0)]);
        let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        assert_eq!(c.bin("A"), Some(0));
        assert_eq!(c.bin("C"), Some(1));
        assert_eq!(c.bin("B"), Some(2));

        let p: Vec<String> = ["f", "b", "d", "a", "e", "c"].map(String::from).to_vec();
        let scores = p.iter().map(|s| (s.clone(), 1.0)).collect();
        let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        let got: Vec<_> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| c.bin(s).unwrap()).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2]);

        let err = rank_into_bins(&BTreeMap::new(), &p, Scheme::BetaRanked).unwrap_err();
        assert!(matches!(err, Error::MissingScore(_)));
    }

    #[test]
    fn scramble_is_deterministic() {
        let p = pool(30);
        let scores = p.iter().enumerate().map(|(i, s)| (s.clone(), i as f64)).collect();
        let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        assert_eq!(scramble(&c, 9), scramble(&c, 9));
        assert_ne!(scramble(&c, 9).bins, scramble(&c, 10).bins);
        assert_eq!(scramble(&c, 9).scheme, Scheme::Scrambled(9));
    }

    #[test]
    fn scramble_is_uniform() {
        // each of 6 stocks should land in bin 0 with probability 2/6
        let p = pool(6);
        let scores = p.iter().enumerate().map(|(i, s)| (s.clone(), i as f64)).collect();
        let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        let mut hits = [0usize; 6];
        let n = 10_000;
        for seed in 0..n {
            let s = scramble(&c, seed);
            for (i, stock) in p.iter().enumerate() {
                hits[i] += usize::from(s.bin(stock) == Some(0));
            }
        }
        for h in hits {
            let f = h as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn classification_json_shape() {
        let p: Vec<String> = ["A", "B", "C"].map(String::from).to_vec();
        let scores = BTreeMap::from([("A".into(), 0.5), ("B".into(), 1.5), ("C".into(), 1.0)]);
        let mut c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
        c.betas = scores;
        let v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(v["scheme"], "beta_ranked");
        assert_eq!(v["bins"]["B"], 2);
        assert_eq!(v["betas"]["A"], 0.5);
        let s = scramble(&c, 4);
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(v["scheme"]["scrambled"], 4);
    }

    proptest! {
        #[test]
        fn beta_affine_properties(
            bench in prop::collection::vec(-0.05f64..0.05, 5..40),
            noise in prop::collection::vec(-0.05f64..0.05, 40),
            c in -0.1f64..0.1,
            k in -3.0f64..3.0,
        ) {
            let b = dated(&bench);
            let a: Vec<_> = b.iter().zip(&noise).map(|(&(d, _), &n)| (d, n)).collect();
            prop_assume!(covariance(&bench, &bench) > 1e-8);
            let beta = capm_beta(&a, &b).unwrap();
            let shifted: Vec<_> = a.iter().map(|&(d, r)| (d, r + c)).collect();
            let scaled: Vec<_> = a.iter().map(|&(d, r)| (d, k * r)).collect();
            prop_assert!((capm_beta(&shifted, &b).unwrap() - beta).abs() < 1e-9);
            prop_assert!((capm_beta(&scaled, &b).unwrap() - k * beta).abs() < 1e-9);
        }

        #[test]
        fn ranking_invariant_under_monotone_transform(
            raw in prop::collection::vec(-5.0f64..5.0, 1..60),
        ) {
            let p = pool(raw.len());
            let scores: BTreeMap<_, _> = p.iter().cloned().zip(raw.iter().copied()).collect();
            let transformed = scores.iter().map(|(k, v)| (k.clone(), (2.0 * v).exp() + 3.0)).collect();
            let a = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
            let b = rank_into_bins(&transformed, &p, Scheme::BetaRanked).unwrap();
            prop_assert_eq!(a.bins, b.bins);
        }

        #[test]
        fn scramble_preserves_bin_sizes(n in 1usize..120, seed in any::<u64>()) {
            let p = pool(n);
            let scores = p.iter().enumerate().map(|(i, s)| (s.clone(), i as f64)).collect();
            let c = rank_into_bins(&scores, &p, Scheme::BetaRanked).unwrap();
            prop_assert_eq!(c.bin_sizes(), balanced_sizes(n));
            prop_assert_eq!(scramble(&c, seed).bin_sizes(), c.bin_sizes());
        }
    }
}
