//! Transaction log parsing, per-player grouping and activity filtering.
//!
//! Monetary fields stay exact decimals here; they become `f64` only when
//! the portfolio computes sell rewards.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Portfolio;

pub const TRANSACTION_HEADER: [&str; 7] =
    ["player", "date", "type", "stock", "volume", "price", "total"];

/// Default relative tolerance for the `total == volume * price` check.
pub const DEFAULT_TOTAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TradeKind {
    Buy,
    Sell,
}

impl fmt::Display for TradeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TradeKind::Buy => "Buy",
            TradeKind::Sell => "Sell",
        })
    }
}

impl FromStr for TradeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "buy" => Ok(TradeKind::Buy),
            "sell" => Ok(TradeKind::Sell),
            other => Err(Error::Format(format!("unknown transaction type {other:?}"))),
        }
    }
}

/// One dated buy or sell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub date: NaiveDate,
    pub kind: TradeKind,
    pub stock: String,
    pub volume: u64,
    /// GBP per share.
    pub price: Decimal,
    /// GBP.
    pub total: Decimal,
}

impl Transaction {
    pub fn price_f64(&self) -> f64 {
        self.price.to_f64().expect("decimal price fits in f64")
    }
}

/// A non-fatal problem found while reading or assembling data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: Option<u64>,
    pub player: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("diagnostic serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTransactions {
    pub records: Vec<(String, Transaction)>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub total_tolerance: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            total_tolerance: DEFAULT_TOTAL_TOLERANCE,
        }
    }
}

pub fn parse_transactions<R: Read>(source: R) -> Result<ParsedTransactions> {
    parse_transactions_with(source, ParseOptions::default())
}

pub fn parse_transactions_with<R: Read>(source: R, opts: ParseOptions) -> Result<ParsedTransactions> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = ParsedTransactions::default();

    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(map_csv_error(e)),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(out);
    }
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names != TRANSACTION_HEADER {
        return Err(Error::Format(format!(
            "expected header {:?}, found {:?}",
            TRANSACTION_HEADER.join(","),
            names.join(",")
        )));
    }

    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(map_csv_error(e));
                }
                out.diagnostics.push(Diagnostic {
                    line: e.position().map(|p| p.line()),
                    player: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line());
        let player = row.get(0).map(str::to_owned);
        match parse_row(&row) {
            Ok((player, tx, warning)) => {
                if let Some(message) = warning.or_else(|| total_mismatch(&tx, opts.total_tolerance)) {
                    out.diagnostics.push(Diagnostic {
                        line,
                        player: Some(player.clone()),
                        message,
                    });
                }
                out.records.push((player, tx));
            }
            Err(message) => out.diagnostics.push(Diagnostic {
                line,
                player,
                message,
            }),
        }
    }
    Ok(out)
}

fn map_csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

type RowResult = std::result::Result<(String, Transaction, Option<String>), String>;

fn parse_row(row: &csv::StringRecord) -> RowResult {
    if row.len() != 7 {
        return Err(format!("expected 7 fields, found {}", row.len()));
    }
    let player = row[0].to_owned();
    if player.is_empty() {
        return Err("empty player id".into());
    }
    let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
        .map_err(|e| format!("bad date {:?}: {e}", &row[1]))?;
    let kind: TradeKind = row[2].parse().map_err(|e: Error| e.to_string())?;
    let stock = row[3].to_owned();
    if stock.is_empty() {
        return Err("empty stock id".into());
    }
    let volume: i64 = row[4]
        .parse()
        .map_err(|_| format!("bad volume {:?}", &row[4]))?;
    if volume < 1 {
        return Err(format!("volume must be positive, got {volume}"));
    }
    let price = parse_decimal(&row[5], "price")?;
    if price.is_sign_negative() && !price.is_zero() {
        return Err(format!("price must be nonnegative, got {price}"));
    }
    let total = parse_decimal(&row[6], "total")?;
    Ok((
        player,
        Transaction {
            date,
            kind,
            stock,
            volume: volume as u64,
            price,
            total,
        },
        None,
    ))
}

fn parse_decimal(s: &str, field: &str) -> std::result::Result<Decimal, String> {
    if s.contains(',') || s.contains('e') || s.contains('E') {
        return Err(format!("bad {field} {s:?}"));
    }
    Decimal::from_str_exact(s).map_err(|_| format!("bad {field} {s:?}"))
}

fn total_mismatch(tx: &Transaction, tol: f64) -> Option<String> {
    let expected = Decimal::from(tx.volume) * tx.price;
    let diff = (expected - tx.total).abs().to_f64()?;
    let scale = expected.abs().to_f64()?.max(f64::MIN_POSITIVE);
    (diff > tol * scale).then(|| {
        format!(
            "total {} differs from volume x price = {}",
            tx.total, expected
        )
    })
}

/// Write records in the transaction CSV format.
pub fn write_transactions<W: Write>(sink: W, records: &[(String, Transaction)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRANSACTION_HEADER)?;
    for (player, tx) in records {
        w.write_record([
            player.as_str(),
            &tx.date.format("%Y-%m-%d").to_string(),
            &tx.kind.to_string(),
            &tx.stock,
            &tx.volume.to_string(),
            &tx.price.to_string(),
            &tx.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A sell that entered the choice sequence, with its cost-basis reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellRecord {
    /// Index into the history's transactions.
    pub tx_index: usize,
    pub stock: String,
    pub volume: u64,
    pub price: f64,
    /// GBP.
    pub raw_reward: f64,
}

/// Ordered transactions of one player and the derived sell sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerHistory {
    player_id: String,
    transactions: Vec<Transaction>,
    sells: Vec<SellRecord>,
    excluded: Vec<usize>,
}

impl PlayerHistory {
    /// Stable-sort by date and derive sells. Oversold sells are excluded
    /// from the sell sequence and listed in [`excluded_sells`](Self::excluded_sells).
    pub fn from_transactions(player_id: impl Into<String>, mut transactions: Vec<Transaction>) -> Self {
        transactions.sort_by_key(|t| t.date);
        let (sells, excluded) = derive_sells(&transactions);
        Self {
            player_id: player_id.into(),
            transactions,
            sells,
            excluded,
        }
    }

    pub fn player_id(&self) -> &str {
        &self.player_id
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn sells(&self) -> &[SellRecord] {
        &self.sells
    }

    /// Transaction indices of sells that had no matching prior purchase volume.
    pub fn excluded_sells(&self) -> &[usize] {
        &self.excluded
    }

    /// Calendar days between the first and last transaction.
    pub fn span_days(&self) -> i64 {
        match (self.transactions.first(), self.transactions.last()) {
            (Some(a), Some(b)) => (b.date - a.date).num_days(),
            _ => 0,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = (String, Transaction)> + '_ {
        self.transactions
            .iter()
            .map(|t| (self.player_id.clone(), t.clone()))
    }
}

fn derive_sells(transactions: &[Transaction]) -> (Vec<SellRecord>, Vec<usize>) {
    let mut pf = Portfolio::new();
    let mut sells = Vec::new();
    let mut excluded = Vec::new();
    for (i, tx) in transactions.iter().enumerate() {
        let price = tx.price_f64();
        match tx.kind {
            TradeKind::Buy => pf.buy(&tx.stock, tx.volume, price),
            TradeKind::Sell => match pf.sell_reward(&tx.stock, tx.volume, price) {
                Ok(raw_reward) => sells.push(SellRecord {
                    tx_index: i,
                    stock: tx.stock.clone(),
                    volume: tx.volume,
                    price,
                    raw_reward,
                }),
                Err(_) => excluded.push(i),
            },
        }
    }
    (sells, excluded)
}

#[derive(Debug, Clone, Default)]
pub struct Histories {
    pub histories: Vec<PlayerHistory>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Group records by player (first-appearance order) and derive each history.
pub fn build_histories(records: &[(String, Transaction)]) -> Histories {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<&str, Vec<Transaction>> = HashMap::new();
    for (player, tx) in records {
        grouped
            .entry(player.as_str())
            .or_insert_with(|| {
                order.push(player.clone());
                Vec::new()
            })
            .push(tx.clone());
    }
    let mut out = Histories::default();
    for player in order {
        let txs = grouped.remove(player.as_str()).unwrap_or_default();
        let h = PlayerHistory::from_transactions(player, txs);
        for &i in h.excluded_sells() {
            let tx = &h.transactions()[i];
            out.diagnostics.push(Diagnostic {
                line: None,
                player: Some(h.player_id().to_owned()),
                message: format!(
                    "sell of {} {} on {} exceeds holdings; excluded",
                    tx.volume, tx.stock, tx.date
                ),
            });
        }
        out.histories.push(h);
    }
    out
}

/// Activity filter thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityFilter {
    pub min_sells: usize,
    pub min_span_days: i64,
}

impl Default for ActivityFilter {
    fn default() -> Self {
        Self {
            min_sells: 5,
            min_span_days: 30,
        }
    }
}

/// Keep players with at least `min_sells` valid sells whose first and last
/// transactions are at least `min_span_days` apart.
pub fn filter_active(histories: Vec<PlayerHistory>, min_sells: usize, min_span_days: i64) -> Vec<PlayerHistory> {
    histories
        .into_iter()
        .filter(|h| h.sells().len() >= min_sells && h.span_days() >= min_span_days)
        .collect()
}

/// Chronological prefix of at most `cap` transactions.
pub fn cap_transactions(history: &PlayerHistory, cap: usize) -> PlayerHistory {
    if history.transactions().len() <= cap {
        return history.clone();
    }
    PlayerHistory::from_transactions(
        history.player_id(),
        history.transactions()[..cap].to_vec(),
    )
}
