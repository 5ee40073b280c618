//! Synthetic markets and Q-learning trading agents.
//!
//! The market is a single-factor Gaussian model: each stock's daily return
//! is `beta_s * r_benchmark + noise`, so beta estimation is well specified.
//! Agents pick a risk bin by soft-max over their own Q-table, trade a stock
//! from that bin, and learn from the squashed sell reward exactly as the
//! likelihood engine assumes.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PlayerHistory, TradeKind, Transaction};
use crate::model::{
    q_update, softmax_probs, squash, state_of, ModelParams, ParamBounds, Portfolio, QTable, N_ACTIONS,
};
use crate::risk::{balanced_sizes, PriceSeries, RiskClassification};

pub const BENCHMARK_ID: &str = "BENCH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketSpec {
    pub n_stocks: usize,
    /// Number of daily returns; prices have one more observation.
    pub horizon_days: usize,
    pub benchmark_vol: f64,
    /// Mean daily benchmark return.
    pub benchmark_drift: f64,
    /// Generating beta range of each bin, safest first.
    pub bin_beta_ranges: [[f64; 2]; N_ACTIONS],
    pub idiosyncratic_vol: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for MarketSpec {
    fn default() -> Self {
        Self {
            n_stocks: 107,
            horizon_days: 250,
            benchmark_vol: 0.01,
            benchmark_drift: 0.0,
            bin_beta_ranges: [[0.2, 0.6], [0.8, 1.2], [1.4, 1.8]],
            idiosyncratic_vol: 0.008,
            start_date: NaiveDate::from_ymd_opt(2013, 6, 3).expect("valid date"),
            seed: 0,
        }
    }
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("market spec: {m}")));
        if self.n_stocks < N_ACTIONS {
            return bad("need at least 3 stocks");
        }
        if self.horizon_days < 2 {
            return bad("horizon must be at least 2 days");
        }
        if !(self.benchmark_vol > 0.0) || !(self.idiosyncratic_vol >= 0.0) {
            return bad("volatilities must be positive");
        }
        for (i, r) in self.bin_beta_ranges.iter().enumerate() {
            if !(r[0] <= r[1]) {
                return bad("beta range low exceeds high");
            }
            if i > 0 && !(self.bin_beta_ranges[i - 1][1] < r[0]) {
                return bad("beta ranges must be ordered and non-overlapping");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub benchmark: PriceSeries,
    pub stocks: Vec<PriceSeries>,
    pub true_bins: BTreeMap<String, u8>,
    pub true_betas: BTreeMap<String, f64>,
}

impl Market {
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.benchmark.observations().iter().map(|o| o.0).collect()
    }

    pub fn stock_ids(&self) -> Vec<String> {
        self.stocks.iter().map(|s| s.stock().to_owned()).collect()
    }
}

fn trading_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

pub fn generate_market(spec: &MarketSpec) -> Result<Market> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dates = trading_days(spec.start_date, spec.horizon_days + 1);
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()));

    let bench_noise = normal(spec.benchmark_vol)?;
    let bench_returns: Vec<f64> = (0..spec.horizon_days)
        .map(|_| spec.benchmark_drift + bench_noise.sample(&mut rng))
        .collect();

    // balanced labels in random stock order
    let sizes = balanced_sizes(spec.n_stocks);
    let mut labels: Vec<u8> = (0..N_ACTIONS as u8)
        .flat_map(|b| std::iter::repeat_n(b, sizes[b as usize]))
        .collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let idio = normal(spec.idiosyncratic_vol)?;
    let width = spec.n_stocks.to_string().len().max(3);
    let accumulate = |returns: &mut dyn Iterator<Item = f64>| {
        let mut p = 100.0;
        let mut obs = vec![(dates[0], p)];
        for (i, r) in returns.enumerate() {
            p *= 1.0 + r;
            obs.push((dates[i + 1], p));
        }
        obs
    };

    let benchmark = PriceSeries::new(BENCHMARK_ID, accumulate(&mut bench_returns.iter().copied()))?;
    let mut stocks = Vec::with_capacity(spec.n_stocks);
    let mut true_bins = BTreeMap::new();
    let mut true_betas = BTreeMap::new();
    for (i, &bin) in labels.iter().enumerate() {
        let [lo, hi] = spec.bin_beta_ranges[bin as usize];
        let beta = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let id = format!("S{i:0width$}");
        let mut rs = bench_returns.iter().map(|&rb| beta * rb + idio.sample(&mut rng));
        stocks.push(PriceSeries::new(id.clone(), accumulate(&mut rs))?);
        true_bins.insert(id.clone(), bin);
        true_betas.insert(id, beta);
    }
    Ok(Market {
        benchmark,
        stocks,
        true_bins,
        true_betas,
    })
}

/// How the agent picks a stock once it has chosen a bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuyPolicy {
    #[default]
    UniformRandom,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub params: ModelParams,
    pub n_sells: usize,
    pub buy_policy: BuyPolicy,
    /// GBP.
    pub initial_cash: f64,
    /// GBP committed per purchase.
    pub trade_cash: f64,
    /// Trading days between a buy and its sell; also the spacing of sells.
    pub holding_days: usize,
    /// Trading day of the first buy.
    pub start_day: usize,
    pub seed: u64,
}

impl AgentSpec {
    pub fn new(params: ModelParams, n_sells: usize, seed: u64) -> Self {
        Self {
            params,
            n_sells,
            buy_policy: BuyPolicy::UniformRandom,
            initial_cash: 100_000.0,
            trade_cash: 20_000.0,
            holding_days: 1,
            start_day: 0,
            seed,
        }
    }

    /// Price observations needed to play this agent out.
    pub fn days_needed(&self) -> usize {
        self.start_day + self.n_sells * self.holding_days + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedHistory {
    pub history: PlayerHistory,
    /// Choice probabilities the agent used at each sell.
    pub choice_probs: Vec<[f64; N_ACTIONS]>,
}

/// Play an agent through the market. Each step buys a stock from the chosen
/// bin and sells it `holding_days` later; the next buy shares the sell's day
/// and comes after it.
pub fn generate_agent_history(
    player_id: &str,
    agent: &AgentSpec,
    market: &Market,
    classification: &RiskClassification,
) -> Result<GeneratedHistory> {
    if !ParamBounds::default().contains(&agent.params) {
        return Err(Error::InvalidArgument(format!(
            "agent parameters out of bounds: {:?}",
            agent.params
        )));
    }
    if agent.holding_days == 0 || agent.n_sells == 0 {
        return Err(Error::InvalidArgument("holding_days and n_sells must be positive".into()));
    }
    let n_days = market.benchmark.len();
    if agent.days_needed() > n_days {
        return Err(Error::InvalidArgument(format!(
            "agent needs {} trading days, market has {n_days}",
            agent.days_needed()
        )));
    }
    let mut members: [Vec<usize>; N_ACTIONS] = Default::default();
    for (i, s) in market.stocks.iter().enumerate() {
        let bin = classification
            .bin(s.stock())
            .ok_or_else(|| Error::Unclassified(s.stock().to_owned()))?;
        members[bin as usize].push(i);
    }
    if members.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every bin needs at least one stock".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(agent.seed);
    let mut cursor = [0usize; N_ACTIONS];
    let mut q = QTable::zeros();
    let mut pf = Portfolio::new();
    let mut cash = agent.initial_cash;
    let mut state = state_of(0.0);
    let mut txs = Vec::with_capacity(2 * agent.n_sells);
    let mut probs_log = Vec::with_capacity(agent.n_sells);

    for t in 0..agent.n_sells {
        let probs = softmax_probs(q.row(state), agent.params.beta_inv_temp);
        let action = sample_action(&probs, rng.random::<f64>());
        let pool = &members[action];
        let idx = match agent.buy_policy {
            BuyPolicy::UniformRandom => pool[rng.random_range(0..pool.len())],
            BuyPolicy::RoundRobin => {
                let i = pool[cursor[action] % pool.len()];
                cursor[action] += 1;
                i
            }
        };
        let series = &market.stocks[idx];
        let buy_day = agent.start_day + t * agent.holding_days;
        let sell_day = buy_day + agent.holding_days;
        let (buy_date, buy_px) = quote(series, buy_day);
        let (sell_date, sell_px) = quote(series, sell_day);

        let volume = ((agent.trade_cash.min(cash) / buy_px.to_f64()).floor() as u64).max(1);
        let buy = Transaction {
            date: buy_date,
            kind: TradeKind::Buy,
            stock: series.stock().to_owned(),
            volume,
            price: buy_px.decimal,
            total: buy_px.decimal * Decimal::from(volume),
        };
        let sell = Transaction {
            date: sell_date,
            kind: TradeKind::Sell,
            stock: series.stock().to_owned(),
            volume,
            price: sell_px.decimal,
            total: sell_px.decimal * Decimal::from(volume),
        };
        pf.buy(&buy.stock, buy.volume, buy.price_f64());
        let raw = pf.sell_reward(&sell.stock, sell.volume, sell.price_f64())?;
        cash += raw;
        let next = pf.book_profit(squash(raw, agent.params.rho));
        q = q_update(q, state, action, squash(raw, agent.params.rho), next, &agent.params);
        state = next;
        probs_log.push(probs);
        txs.push(buy);
        txs.push(sell);
    }

    Ok(GeneratedHistory {
        history: PlayerHistory::from_transactions(player_id, txs),
        choice_probs: probs_log,
    })
}

fn sample_action(probs: &[f64; N_ACTIONS], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    N_ACTIONS - 1
}

struct Quote {
    decimal: Decimal,
}

impl Quote {
    fn to_f64(&self) -> f64 {
        rust_decimal::prelude::ToPrimitive::to_f64(&self.decimal).expect("finite")
    }
}

/// Price on a trading day, rounded to 1/10000 GBP as a ticket would show it.
fn quote(series: &PriceSeries, day: usize) -> (NaiveDate, Quote) {
    let (date, p) = series.observations()[day];
    let decimal = Decimal::from_f64_retain(p)
        .unwrap_or_default()
        .round_dp(4)
        .max(Decimal::new(1, 4));
    (date, Quote { decimal })
}
