use invrl::fit::random_nll;
use invrl::ingest::{build_histories, parse_transactions, write_transactions};
use invrl::model::{replay_nll, ModelParams};
use invrl::risk::{classify, parse_prices, write_prices, RiskMeasure};
use invrl::sim::{generate_agent_history, generate_market, AgentSpec, MarketSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn beta_classification(spec: &MarketSpec) -> (invrl::sim::Market, invrl::risk::RiskClassification) {
    let m = generate_market(spec).unwrap();
    let c = classify(&m.benchmark, &m.stocks, RiskMeasure::Beta).unwrap();
    (m, c)
}

#[test]
fn default_market_recovers_bins() {
    let mut worst = 1.0f64;
    for seed in 0..20 {
        let (m, c) = beta_classification(&MarketSpec { seed, ..MarketSpec::default() });
        let hits = m.true_bins.iter().filter(|(s, b)| c.bin(s) == Some(**b)).count();
        worst = worst.min(hits as f64 / m.true_bins.len() as f64);
    }
    assert!(worst >= 0.95, "worst per-seed accuracy {worst}");
}

#[test]
fn price_files_round_trip() {
    let (m, _) = beta_classification(&MarketSpec { n_stocks: 9, horizon_days: 30, seed: 3, ..MarketSpec::default() });
    let mut buf = Vec::new();
    write_prices(&mut buf, &m.stocks).unwrap();
    let back = parse_prices(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 9);
    for (a, b) in back.iter().zip(&m.stocks) {
        assert_eq!(a.stock(), b.stock());
        for (x, y) in a.observations().iter().zip(b.observations()) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() <= 1e-12 * y.1);
        }
    }
}

#[test]
fn generated_histories_pass_ingest() {
    let (m, c) = beta_classification(&MarketSpec { horizon_days: 120, seed: 5, ..MarketSpec::default() });
    let mut records = Vec::new();
    for i in 0..6u64 {
        let mut agent = AgentSpec::new(ModelParams::new(0.5, 5.0 * i as f64, 0.3), 40, i);
        agent.holding_days = 1 + (i as usize % 3);
        let g = generate_agent_history(&format!("agent{i}"), &agent, &m, &c).unwrap();
        records.extend(g.history.records());
    }
    let mut csv = Vec::new();
    write_transactions(&mut csv, &records).unwrap();
    let parsed = parse_transactions(csv.as_slice()).unwrap();
    assert!(parsed.diagnostics.is_empty(), "{:?}", parsed.diagnostics);
    let hs = build_histories(&parsed.records);
    assert!(hs.diagnostics.is_empty(), "{:?}", hs.diagnostics);
    assert_eq!(hs.histories.len(), 6);
    for h in &hs.histories {
        assert_eq!(h.sells().len(), 40);
        assert!(h.excluded_sells().is_empty());
        assert!(h.transactions().windows(2).all(|w| w[0].date <= w[1].date));
    }
}

#[test]
fn uptrend_bin_is_learned() {
    // a rising market pays the high-beta bin most
    let spec = MarketSpec {
        horizon_days: 400,
        benchmark_drift: 0.01,
        benchmark_vol: 0.005,
        idiosyncratic_vol: 0.004,
        seed: 11,
        ..MarketSpec::default()
    };
    let (m, c) = beta_classification(&spec);
    for seed in 0..10 {
        let agent = AgentSpec::new(ModelParams::new(0.2, 20.0, 0.0), 400, seed);
        let g = generate_agent_history("trend", &agent, &m, &c).unwrap();
        let late: Vec<u8> = g
            .history
            .sells()
            .iter()
            .skip(100)
            .map(|s| c.bin(&s.stock).unwrap())
            .collect();
        let share = late.iter().filter(|&&b| b == 2).count() as f64 / late.len() as f64;
        assert!(share > 0.5, "seed {seed}: bin 2 share {share}");
    }
}

#[test]
fn true_params_beat_random_draws() {
    let mut wins = 0;
    let mut draws = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..20u64 {
        let (m, c) = beta_classification(&MarketSpec { horizon_days: 201, seed: 500 + seed, ..MarketSpec::default() });
        let truth = ModelParams::new(0.6, 15.0, 0.4);
        let g = generate_agent_history("p", &AgentSpec::new(truth, 200, seed), &m, &c).unwrap();
        let other = ModelParams::new(
            draws.random_range(0.0001..2.0),
            draws.random_range(0.0..50.0),
            draws.random_range(0.0..0.9999),
        );
        let at_truth = replay_nll(&g.history, &c, &truth).unwrap().nll;
        let at_other = replay_nll(&g.history, &c, &other).unwrap().nll;
        wins += usize::from(at_truth <= at_other);
    }
    assert!(wins >= 18, "true parameters won {wins}/20");
}

#[test]
fn uniform_agent_replays_at_ln3() {
    let (m, c) = beta_classification(&MarketSpec { horizon_days: 60, seed: 8, ..MarketSpec::default() });
    let g = generate_agent_history("u", &AgentSpec::new(ModelParams::new(1.0, 0.0, 0.0), 50, 2), &m, &c).unwrap();
    let r = replay_nll(&g.history, &c, &ModelParams::new(1.0, 0.0, 0.0)).unwrap();
    assert_eq!(r.nll, random_nll(50).unwrap());
}
