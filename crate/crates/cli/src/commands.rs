use std::collections::BTreeMap;
use std::fs::File;

use anyhow::{bail, ensure, Context};
use invrl::fit::{
    derive_seed, fit_all_models, likelihood_ratio_test, population_verdict, scrambled_experiment,
    ComparisonResult, PlayerFits, PopulationVerdict, StartRecord,
};
use invrl::ingest::{
    build_histories, cap_transactions, filter_active, parse_transactions, write_transactions, Diagnostic,
    PlayerHistory,
};
use invrl::model::ModelParams;
use invrl::risk::{classify, parse_prices, write_prices, RiskClassification, RiskMeasure, Scheme};
use invrl::sim::{generate_agent_history, generate_market, AgentSpec, MarketSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{file_stem, OutputDir};

/// Outcome of a command that did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some players (or scrambles) failed; see `diagnostics.jsonl`.
    Partial,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Partial => 2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Partial => "partial",
        }
    }
}

fn with_pool<T: Send>(config: &RunConfig, job: impl FnOnce() -> anyhow::Result<T> + Send) -> anyhow::Result<T> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()?;
    pool.install(job)
}

fn open(path: &std::path::Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn load_classification(config: &RunConfig) -> anyhow::Result<RiskClassification> {
    let prices_path = config.require(&config.prices, "prices")?;
    let bench_path = config.require(&config.benchmark, "benchmark")?;
    let stocks = parse_prices(open(&prices_path)?).with_context(|| format!("reading {}", prices_path.display()))?;
    let bench = parse_prices(open(&bench_path)?).with_context(|| format!("reading {}", bench_path.display()))?;
    ensure!(bench.len() == 1, "benchmark file must hold exactly one series, found {}", bench.len());
    ensure!(!stocks.is_empty(), "no price series in {}", prices_path.display());
    Ok(classify(&bench[0], &stocks, config.risk)?)
}

struct Population {
    histories: Vec<PlayerHistory>,
    n_players: usize,
    classification: RiskClassification,
    diagnostics: Vec<Diagnostic>,
}

fn load_population(config: &RunConfig) -> anyhow::Result<Population> {
    let path = config.require(&config.transactions, "transactions")?;
    let parsed = parse_transactions(open(&path)?).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!parsed.records.is_empty(), "no transactions in {}", path.display());
    let classification = load_classification(config)?;
    let built = build_histories(&parsed.records);
    let n_players = built.histories.len();
    let mut histories = filter_active(built.histories, config.min_sells, config.min_span_days);
    if let Some(cap) = config.cap {
        histories = histories.iter().map(|h| cap_transactions(h, cap)).collect();
    }
    ensure!(
        !histories.is_empty(),
        "none of {n_players} players has {} sells over {} days",
        config.min_sells,
        config.min_span_days
    );
    let mut diagnostics = parsed.diagnostics;
    diagnostics.extend(built.diagnostics);
    Ok(Population {
        histories,
        n_players,
        classification,
        diagnostics,
    })
}

fn diagnostics_jsonl(diags: &[Diagnostic]) -> Vec<u8> {
    diags.iter().flat_map(|d| (d.to_json_line() + "\n").into_bytes()).collect()
}

fn player_failure(player: &str, message: String) -> Diagnostic {
    Diagnostic {
        line: None,
        player: Some(player.to_owned()),
        message,
    }
}

#[derive(Serialize)]
struct ModelReport<'a> {
    params: Option<ModelParams>,
    nll: f64,
    starts: &'a [StartRecord],
}

#[derive(Clone, Serialize)]
struct Comparisons {
    myopic_vs_random: ComparisonResult,
    full_vs_random: ComparisonResult,
    full_vs_myopic: ComparisonResult,
}

#[derive(Serialize)]
struct Bics {
    random: f64,
    myopic: f64,
    full: f64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    player: &'a str,
    n_sells: usize,
    scheme: Scheme,
    cap: Option<usize>,
    random_nll: f64,
    myopic: ModelReport<'a>,
    full: ModelReport<'a>,
    lrt: Comparisons,
    bic: Bics,
}

struct Fitted {
    player: String,
    fits: PlayerFits,
    lrt: Comparisons,
}

fn fit_one(h: &PlayerHistory, c: &RiskClassification, config: &RunConfig) -> anyhow::Result<Fitted> {
    let fits = fit_all_models(h, c, &config.fit)?;
    let conf = config.lrt_confidence;
    let lrt = Comparisons {
        myopic_vs_random: likelihood_ratio_test(&fits.random, &fits.myopic, conf)?,
        full_vs_random: likelihood_ratio_test(&fits.random, &fits.full, conf)?,
        full_vs_myopic: likelihood_ratio_test(&fits.myopic, &fits.full, conf)?,
    };
    Ok(Fitted {
        player: h.player_id().to_owned(),
        fits,
        lrt,
    })
}

#[derive(Serialize)]
struct FitSummary<'a> {
    scheme: Scheme,
    risk: RiskMeasure,
    cap: Option<usize>,
    n_players: usize,
    n_active: usize,
    n_fitted: usize,
    failed: Vec<&'a str>,
    lrt_confidence: f64,
    ci_confidence: f64,
    chance_threshold: f64,
    population: BTreeMap<&'static str, PopulationVerdict>,
    /// Players whose lowest BIC belongs to each model.
    bic_preferred: BTreeMap<&'static str, usize>,
}

/// Shortest round-trip text, in exponent form for tiny magnitudes.
fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn comparison_csv(rows: &[(&str, usize, f64, f64, &ComparisonResult)]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "player",
        "n_sells",
        "model_nll",
        "baseline_nll",
        "lrt_statistic",
        "dof",
        "critical_value",
        "p_value",
        "significant",
    ])?;
    for (player, n, model, baseline, c) in rows {
        w.write_record([
            player.to_string(),
            n.to_string(),
            num(*model),
            num(*baseline),
            num(c.lrt_statistic),
            c.dof.to_string(),
            num(c.critical_value),
            num(c.p_value),
            c.significant.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Fit every active player, then write per-player reports, the population
/// summary and the comparison tables.
pub fn cmd_fit(config: &RunConfig) -> anyhow::Result<Status> {
    with_pool(config, || {
        let pop = load_population(config)?;
        let results: Vec<anyhow::Result<Fitted>> = pop
            .histories
            .par_iter()
            .map(|h| fit_one(h, &pop.classification, config))
            .collect();

        let mut out = OutputDir::create(&config.out)?;
        let mut diagnostics = pop.diagnostics;
        let mut fitted = Vec::new();
        let mut failed = Vec::new();
        for (h, r) in pop.histories.iter().zip(results) {
            match r {
                Ok(f) => fitted.push(f),
                Err(e) => {
                    diagnostics.push(player_failure(h.player_id(), format!("fit failed: {e:#}")));
                    failed.push(h.player_id());
                }
            }
        }
        out.write("diagnostics.jsonl", &diagnostics_jsonl(&diagnostics))?;
        if fitted.is_empty() {
            out.finish("fit", "failed", config)?;
            bail!("every player failed to fit; see diagnostics.jsonl");
        }

        let mut bic_preferred = BTreeMap::from([("random", 0), ("myopic", 0), ("full", 0)]);
        for f in &fitted {
            let fits = &f.fits;
            let bic = Bics {
                random: fits.random.bic(),
                myopic: fits.myopic.bic(),
                full: fits.full.bic(),
            };
            let best = [("random", bic.random), ("myopic", bic.myopic), ("full", bic.full)]
                .into_iter()
                .fold(("random", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            *bic_preferred.get_mut(best.0).expect("known key") += 1;
            let report = FitReport {
                player: &f.player,
                n_sells: fits.random.n_obs,
                scheme: pop.classification.scheme,
                cap: config.cap,
                random_nll: fits.random.nll,
                myopic: ModelReport {
                    params: fits.myopic.best_params,
                    nll: fits.myopic.nll,
                    starts: &fits.myopic.starts,
                },
                full: ModelReport {
                    params: fits.full.best_params,
                    nll: fits.full.nll,
                    starts: &fits.full.starts,
                },
                lrt: f.lrt.clone(),
                bic,
            };
            out.write_json(&format!("reports/{}.json", file_stem(&f.player)), &report)?;
        }

        let table = |pick: fn(&Fitted) -> (f64, f64, &ComparisonResult)| {
            let rows: Vec<_> = fitted
                .iter()
                .map(|f| {
                    let (m, b, c) = pick(f);
                    (f.player.as_str(), f.fits.random.n_obs, m, b, c)
                })
                .collect();
            comparison_csv(&rows)
        };
        out.write(
            "myopic_vs_random.csv",
            &table(|f| (f.fits.myopic.nll, f.fits.random.nll, &f.lrt.myopic_vs_random))?,
        )?;
        out.write(
            "full_vs_myopic.csv",
            &table(|f| (f.fits.full.nll, f.fits.myopic.nll, &f.lrt.full_vs_myopic))?,
        )?;
        out.write(
            "full_vs_random.csv",
            &table(|f| (f.fits.full.nll, f.fits.random.nll, &f.lrt.full_vs_random))?,
        )?;

        let mut population = BTreeMap::new();
        let groups: [(&str, fn(&Fitted) -> ComparisonResult); 3] = [
            ("myopic_vs_random", |f| f.lrt.myopic_vs_random.clone()),
            ("full_vs_random", |f| f.lrt.full_vs_random.clone()),
            ("full_vs_myopic", |f| f.lrt.full_vs_myopic.clone()),
        ];
        let mut pop_csv = csv::Writer::from_writer(Vec::new());
        pop_csv.write_record([
            "comparison",
            "successes",
            "trials",
            "proportion",
            "ci_low",
            "ci_high",
            "confidence",
            "chance_threshold",
            "positive",
        ])?;
        for (name, get) in groups {
            let per_player: Vec<ComparisonResult> = fitted.iter().map(get).collect();
            let v = population_verdict(&per_player, config.ci_confidence, config.chance_threshold)?;
            pop_csv.write_record([
                name.to_string(),
                v.stat.successes.to_string(),
                v.stat.trials.to_string(),
                num(v.stat.proportion()),
                num(v.stat.low),
                num(v.stat.high),
                num(v.stat.confidence),
                num(v.chance_threshold),
                v.positive.to_string(),
            ])?;
            population.insert(name, v);
        }
        out.write("population.csv", &pop_csv.into_inner()?)?;

        let status = if failed.is_empty() { Status::Success } else { Status::Partial };
        out.write_json(
            "summary.json",
            &FitSummary {
                scheme: pop.classification.scheme,
                risk: config.risk,
                cap: config.cap,
                n_players: pop.n_players,
                n_active: pop.histories.len(),
                n_fitted: fitted.len(),
                failed,
                lrt_confidence: config.lrt_confidence,
                ci_confidence: config.ci_confidence,
                chance_threshold: config.chance_threshold,
                population,
                bic_preferred,
            },
        )?;
        out.finish("fit", status.label(), config)?;
        Ok(status)
    })
}

#[derive(Serialize)]
struct ScrambleRow<'a> {
    player: &'a str,
    prob: f64,
    ci_low: f64,
    ci_high: f64,
    successes: u64,
    trials: u64,
    ranked_bic: f64,
}

#[derive(Serialize)]
struct ScrambleSummary {
    n_players: usize,
    n_scrambles: usize,
    seed: u64,
    ci_confidence: f64,
    chance_threshold: f64,
    /// Players whose interval lies entirely above the chance threshold.
    above_chance: usize,
}

/// Ranked-versus-scrambled comparison for the named players (every active
/// player when `players` is empty). All players see the same scrambles.
pub fn cmd_scramble(config: &RunConfig, players: &[String]) -> anyhow::Result<Status> {
    with_pool(config, || {
        let pop = load_population(config)?;
        let selected: Vec<&PlayerHistory> = if players.is_empty() {
            pop.histories.iter().collect()
        } else {
            players
                .iter()
                .map(|id| {
                    pop.histories
                        .iter()
                        .find(|h| h.player_id() == id)
                        .with_context(|| format!("unknown player {id:?} (absent or filtered out)"))
                })
                .collect::<anyhow::Result<_>>()?
        };

        let mut out = OutputDir::create(&config.out)?;
        let mut diagnostics = pop.diagnostics;
        let mut rows = Vec::new();
        let mut partial = false;
        for h in &selected {
            let r = scrambled_experiment(
                h,
                &pop.classification,
                config.n_scrambles,
                config.seed,
                config.ci_confidence,
                &config.fit,
            );
            match r {
                Ok(o) => {
                    partial |= !o.diagnostics.is_empty();
                    for m in o.diagnostics {
                        diagnostics.push(player_failure(h.player_id(), m));
                    }
                    rows.push(ScrambleRow {
                        player: h.player_id(),
                        prob: o.stat.proportion(),
                        ci_low: o.stat.low,
                        ci_high: o.stat.high,
                        successes: o.stat.successes,
                        trials: o.stat.trials,
                        ranked_bic: o.ranked_bic,
                    });
                }
                Err(e) => {
                    partial = true;
                    diagnostics.push(player_failure(h.player_id(), format!("scramble failed: {e:#}")));
                }
            }
        }
        out.write("diagnostics.jsonl", &diagnostics_jsonl(&diagnostics))?;
        if rows.is_empty() {
            out.finish("scramble", "failed", config)?;
            bail!("no player could be scrambled; see diagnostics.jsonl");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        out.write("scramble.csv", &w.into_inner()?)?;
        out.write_json(
            "scramble_summary.json",
            &ScrambleSummary {
                n_players: rows.len(),
                n_scrambles: config.n_scrambles,
                seed: config.seed,
                ci_confidence: config.ci_confidence,
                chance_threshold: config.chance_threshold,
                above_chance: rows.iter().filter(|r| r.ci_low > config.chance_threshold).count(),
            },
        )?;
        let status = if partial { Status::Partial } else { Status::Success };
        out.finish("scramble", status.label(), config)?;
        Ok(status)
    })
}

/// Classify the stocks in the price file and write `classification.json`.
pub fn cmd_risk(config: &RunConfig) -> anyhow::Result<Status> {
    config.validate()?;
    let c = load_classification(config)?;
    let mut out = OutputDir::create(&config.out)?;
    out.write("classification.json", (c.to_json()? + "\n").as_bytes())?;
    out.finish("risk", Status::Success.label(), config)?;
    Ok(Status::Success)
}

#[derive(Serialize)]
struct AgentTruth {
    agent: String,
    params: ModelParams,
    n_sells: usize,
    seed: u64,
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    agents: Vec<AgentTruth>,
    market: &'a MarketSpec,
    /// Bins the agents chose from (estimated from the written prices).
    scheme: Scheme,
    bins: &'a BTreeMap<String, u8>,
    /// Generating bins and betas.
    true_bins: &'a BTreeMap<String, u8>,
    true_betas: &'a BTreeMap<String, f64>,
}

/// Generate a market and a population of agents trading in it.
pub fn cmd_simulate(config: &RunConfig) -> anyhow::Result<Status> {
    with_pool(config, || {
        let s = &config.simulate;
        let span = (s.sells_max - s.sells_min + 1) as u64;
        let n_sells: Vec<usize> = (0..s.n_agents as u64)
            .map(|i| s.sells_min + (derive_seed(config.seed, (1 << 32) + i) % span) as usize)
            .collect();
        let mut spec = s.market.clone();
        spec.seed = derive_seed(config.seed, 0);
        let longest = n_sells.iter().max().copied().unwrap_or(0) * s.holding_days;
        spec.horizon_days = spec.horizon_days.max(longest);
        let market = generate_market(&spec)?;
        let classification = classify(&market.benchmark, &market.stocks, config.risk)?;

        let agents: Vec<(String, AgentSpec)> = n_sells
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut a = AgentSpec::new(s.params, n, derive_seed(config.seed, 1 + i as u64));
                a.holding_days = s.holding_days;
                a.buy_policy = s.buy_policy;
                (format!("agent{i:03}"), a)
            })
            .collect();
        let histories = agents
            .par_iter()
            .map(|(id, a)| generate_agent_history(id, a, &market, &classification))
            .collect::<Result<Vec<_>, _>>()?;

        let mut out = OutputDir::create(&config.out)?;
        let records: Vec<_> = histories.iter().flat_map(|g| g.history.records()).collect();
        let mut buf = Vec::new();
        write_transactions(&mut buf, &records)?;
        out.write("transactions.csv", &buf)?;
        let mut buf = Vec::new();
        write_prices(&mut buf, &market.stocks)?;
        out.write("prices.csv", &buf)?;
        let mut buf = Vec::new();
        write_prices(&mut buf, std::slice::from_ref(&market.benchmark))?;
        out.write("benchmark.csv", &buf)?;
        out.write_json(
            "ground_truth.json",
            &GroundTruth {
                agents: agents
                    .into_iter()
                    .map(|(agent, a)| AgentTruth {
                        agent,
                        params: a.params,
                        n_sells: a.n_sells,
                        seed: a.seed,
                    })
                    .collect(),
                market: &spec,
                scheme: classification.scheme,
                bins: &classification.bins,
                true_bins: &market.true_bins,
                true_betas: &market.true_betas,
            },
        )?;
        out.finish("simulate", Status::Success.label(), config)?;
        Ok(Status::Success)
    })
}
