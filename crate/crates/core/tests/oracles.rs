mod common;

use chrono::NaiveDate;
use invrl::ingest::{PlayerHistory, TradeKind, Transaction};
use invrl::model::{replay_nll, ModelParams};
use invrl::risk::{RiskClassification, Scheme};
use invrl::stats::clopper_pearson;
use proptest::prelude::*;
use rust_decimal::Decimal;
use std::collections::BTreeMap;

use common::{clopper_pearson_oracle, sequential_nll, SellStep};

fn tx(day: u32, kind: TradeKind, volume: u64, price: &str) -> Transaction {
    let price = Decimal::from_str_exact(price).unwrap();
    Transaction {
        date: NaiveDate::from_ymd_opt(2014, 1, day).unwrap(),
        kind,
        stock: "VOD".into(),
        volume,
        price,
        total: price * Decimal::from(volume),
    }
}

/// One buy, then three partial sells earning +50, 0 and -50 GBP.
fn three_sell_history() -> PlayerHistory {
    PlayerHistory::from_transactions(
        "p",
        vec![
            tx(2, TradeKind::Buy, 300, "2.00"),
            tx(3, TradeKind::Sell, 100, "2.50"),
            tx(6, TradeKind::Sell, 100, "2.00"),
            tx(7, TradeKind::Sell, 100, "1.50"),
        ],
    )
}

fn classification() -> RiskClassification {
    RiskClassification {
        scheme: Scheme::BetaRanked,
        bins: BTreeMap::from([("VOD".to_string(), 2)]),
        betas: BTreeMap::new(),
        sigma: BTreeMap::new(),
    }
}

fn oracle_steps() -> Vec<SellStep> {
    [50.0, 0.0, -50.0]
        .map(|raw_reward| SellStep { bin: 2, raw_reward })
        .into()
}

#[test]
fn three_sell_rewards() {
    let h = three_sell_history();
    let rewards: Vec<f64> = h.sells().iter().map(|s| s.raw_reward).collect();
    assert_eq!(rewards, vec![50.0, 0.0, -50.0]);
}

#[test]
fn three_sell_frozen_value() {
    // 2 ln 3 + ln(2 + e^(10 r1)) - 10 r1 with r1 = tanh(0.05), evaluated
    // at 30 digits outside this crate
    let expected = 2.991_829_530_567_127_8;
    let oracle = sequential_nll(&oracle_steps(), 1.0, 10.0, 0.0, 500.0);
    assert!((oracle - expected).abs() < 1e-12);
    let got = replay_nll(&three_sell_history(), &classification(), &ModelParams::new(1.0, 10.0, 0.0)).unwrap();
    assert!((got.nll - expected).abs() < 1e-12, "{}", got.nll);
    assert_eq!(got.trace[2].state_after, 1, "zero profit is a win state");
}

#[test]
fn single_sell_uniform() {
    let h = PlayerHistory::from_transactions(
        "p",
        vec![tx(2, TradeKind::Buy, 10, "1"), tx(3, TradeKind::Sell, 10, "4")],
    );
    let r = replay_nll(&h, &classification(), &ModelParams::new(1.3, 0.0, 0.5)).unwrap();
    assert!((r.nll - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn profit_matches_trace() {
    let r = replay_nll(&three_sell_history(), &classification(), &ModelParams::new(0.3, 4.0, 0.2)).unwrap();
    let direct: f64 = [50.0f64, 0.0, -50.0].iter().map(|x| (x / 1000.0).tanh()).sum();
    assert!((r.profit() - direct).abs() < 1e-15);
    let lines = r.trace_jsonl().unwrap();
    assert_eq!(lines.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert_eq!(first["action"], 2);
}

#[test]
fn unclassified_stock_is_an_error() {
    let empty = RiskClassification {
        bins: BTreeMap::new(),
        ..classification()
    };
    assert!(replay_nll(&three_sell_history(), &empty, &ModelParams::new(1.0, 1.0, 0.0)).is_err());
}

#[test]
fn clopper_pearson_matches_binomial_tails() {
    for (k, n) in [(0, 10), (7, 46), (46, 46), (3, 17)] {
        for c in [0.95, 0.99] {
            let s = clopper_pearson(k, n, c).unwrap();
            let (lo, hi) = clopper_pearson_oracle(k, n, c);
            assert!((s.low - lo).abs() < 1e-6, "{k}/{n} {c}: {} vs {lo}", s.low);
            assert!((s.high - hi).abs() < 1e-6, "{k}/{n} {c}: {} vs {hi}", s.high);
        }
    }
    // (1 - p)^10 = 0.025
    let s = clopper_pearson(0, 10, 0.95).unwrap();
    assert!((s.high - 0.308_497_107_818_760_8).abs() < 1e-9);
}

proptest! {
    #[test]
    fn engine_matches_sequential_oracle(
        alpha in 0.0001f64..2.0,
        beta in 0.0f64..50.0,
        gamma in 0.0f64..0.9999,
    ) {
        let got = replay_nll(&three_sell_history(), &classification(), &ModelParams::new(alpha, beta, gamma)).unwrap();
        let want = sequential_nll(&oracle_steps(), alpha, beta, gamma, 500.0);
        prop_assert!((got.nll - want).abs() < 1e-10);
    }
}
