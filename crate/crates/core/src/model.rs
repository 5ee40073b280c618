//! The likelihood engine.
//!
//! A player is modelled as a Q-learning agent with two states (cumulative
//! profit negative / non-negative) and three actions (the risk bin of the
//! stock being sold). Choices are observed through a soft-max policy, and
//! the engine replays a sell sequence to score it by negative log-likelihood.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PlayerHistory;
use crate::risk::RiskClassification;

pub const N_STATES: usize = 2;
pub const N_ACTIONS: usize = 3;

/// Loss state: cumulative profit below zero.
pub const STATE_LOSS: usize = 0;
/// Win state: cumulative profit zero or above.
pub const STATE_WIN: usize = 1;

/// Default reward squash scale in GBP.
pub const DEFAULT_RHO: f64 = 500.0;

/// Learning-model parameters.
///
/// `gamma == 0.0` is the myopic model. `rho` is a fixed scale, never fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub beta_inv_temp: f64,
    pub gamma: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

impl ModelParams {
    pub fn new(alpha: f64, beta_inv_temp: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta_inv_temp,
            gamma,
            rho: DEFAULT_RHO,
        }
    }

    pub fn myopic(alpha: f64, beta_inv_temp: f64) -> Self {
        Self::new(alpha, beta_inv_temp, 0.0)
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }
}

/// One parameter range, with each end either open or closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub open_lo: bool,
    #[serde(default)]
    pub open_hi: bool,
}

impl Interval {
    pub const fn open(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            open_lo: true,
            open_hi: true,
        }
    }

    pub const fn closed(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            open_lo: false,
            open_hi: false,
        }
    }

    /// Closed box used by the optimizer: open ends are pulled in by `eps`.
    pub fn shrunk(&self, eps: f64) -> (f64, f64) {
        let lo = if self.open_lo { self.lo + eps } else { self.lo };
        let hi = if self.open_hi { self.hi - eps } else { self.hi };
        (lo, hi)
    }

    /// Membership ignoring openness; boundary values are accepted.
    pub fn contains_closure(&self, x: f64) -> bool {
        x.is_finite() && x >= self.lo && x <= self.hi
    }
}

/// Search bounds for the free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamBounds {
    pub alpha: Interval,
    pub beta_inv_temp: Interval,
    pub gamma: Interval,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            alpha: Interval::open(0.0001, 2.0),
            beta_inv_temp: Interval::open(0.0, 50.0),
            // closed at 0 so the myopic optimum is a feasible full-model point
            gamma: Interval::closed(0.0, 0.9999),
        }
    }
}

impl ParamBounds {
    pub fn contains(&self, p: &ModelParams) -> bool {
        self.alpha.contains_closure(p.alpha)
            && self.beta_inv_temp.contains_closure(p.beta_inv_temp)
            && self.gamma.contains_closure(p.gamma)
            && p.rho > 0.0
    }
}

/// Action values for 2 states x 3 actions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QTable(pub [[f64; N_ACTIONS]; N_STATES]);

impl QTable {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn row(&self, state: usize) -> &[f64; N_ACTIONS] {
        &self.0[state]
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.0[state][action]
    }

    pub fn max(&self, state: usize) -> f64 {
        let r = &self.0[state];
        r[0].max(r[1]).max(r[2])
    }
}

/// Squash a GBP reward into (-1, 1): `(1 - e^(-r/rho)) / (1 + e^(-r/rho))`.
///
/// This is `tanh(r / (2 rho))`, which is how it is evaluated.
pub fn squash(raw_reward: f64, rho: f64) -> f64 {
    (raw_reward / (2.0 * rho)).tanh()
}

/// 0 (loss) iff profit < 0, else 1 (win).
pub fn state_of(profit: f64) -> usize {
    if profit < 0.0 {
        STATE_LOSS
    } else {
        STATE_WIN
    }
}

/// Soft-max choice probabilities, evaluated max-shifted.
pub fn softmax_probs(q_row: &[f64; N_ACTIONS], beta_inv_temp: f64) -> [f64; N_ACTIONS] {
    let z = q_row.map(|q| q * beta_inv_temp);
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

/// `-ln P(action)` under the soft-max policy, via log-sum-exp.
pub fn softmax_neg_log_prob(q_row: &[f64; N_ACTIONS], beta_inv_temp: f64, action: usize) -> f64 {
    let z = q_row.map(|q| q * beta_inv_temp);
    let m = z[0].max(z[1]).max(z[2]);
    let s = (z[0] - m).exp() + (z[1] - m).exp() + (z[2] - m).exp();
    m + s.ln() - z[action]
}

/// One Q-learning step:
/// `Q(s,a) += alpha * (r + gamma * max_b Q(s', b) - Q(s,a))`.
pub fn q_update(
    mut q: QTable,
    state: usize,
    action: usize,
    reward: f64,
    next_state: usize,
    params: &ModelParams,
) -> QTable {
    let target = reward + params.gamma * q.max(next_state);
    let cur = q.0[state][action];
    q.0[state][action] = cur + params.alpha * (target - cur);
    q
}

/// A single stock position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub volume: u64,
    pub avg_price: f64,
}

/// Holdings with volume-weighted average purchase prices, plus cumulative
/// squashed profit.
#[derive(Debug, Clone, Default)]
pub struct Portfolio {
    positions: HashMap<String, Position>,
    profit: f64,
}

impl Portfolio {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn position(&self, stock: &str) -> Option<&Position> {
        self.positions.get(stock)
    }

    pub fn holding(&self, stock: &str) -> u64 {
        self.positions.get(stock).map_or(0, |p| p.volume)
    }

    pub fn profit(&self) -> f64 {
        self.profit
    }

    pub fn buy(&mut self, stock: &str, volume: u64, price: f64) {
        let pos = self.positions.entry(stock.to_owned()).or_default();
        let held = pos.volume as f64;
        let added = volume as f64;
        pos.avg_price = (held * pos.avg_price + added * price) / (held + added);
        pos.volume += volume;
    }

    /// Sell `volume` shares and return the raw reward
    /// `volume * (price - average purchase price)`.
    ///
    /// The average price of the remaining shares is unchanged.
    pub fn sell_reward(&mut self, stock: &str, volume: u64, price: f64) -> Result<f64> {
        let held = self.holding(stock);
        if volume > held || volume == 0 {
            return Err(Error::Oversell {
                stock: stock.to_owned(),
                requested: volume,
                held,
            });
        }
        let pos = self.positions.get_mut(stock).expect("held > 0");
        let reward = volume as f64 * (price - pos.avg_price);
        pos.volume -= volume;
        if pos.volume == 0 {
            self.positions.remove(stock);
        }
        Ok(reward)
    }

    /// Add a squashed reward to cumulative profit, returning the new state.
    pub fn book_profit(&mut self, squashed: f64) -> usize {
        self.profit += squashed;
        state_of(self.profit)
    }
}

/// One replayed sell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SellEvent {
    /// 1-based index over sells.
    pub step: usize,
    pub action: usize,
    pub raw_reward: f64,
    pub squashed_reward: f64,
    pub state_before: usize,
    pub state_after: usize,
    pub probs: [f64; N_ACTIONS],
    pub neg_log_prob: f64,
}

/// Actions and squashed rewards extracted from a history once, so that the
/// likelihood can be evaluated repeatedly during a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSequence {
    actions: Vec<u8>,
    raw_rewards: Vec<f64>,
    rewards: Vec<f64>,
}

impl ChoiceSequence {
    pub fn from_history(
        history: &PlayerHistory,
        classification: &RiskClassification,
        rho: f64,
    ) -> Result<Self> {
        let mut actions = Vec::with_capacity(history.sells().len());
        let mut raw = Vec::with_capacity(history.sells().len());
        for sell in history.sells() {
            let bin = classification
                .bin(&sell.stock)
                .ok_or_else(|| Error::Unclassified(sell.stock.clone()))?;
            actions.push(bin);
            raw.push(sell.raw_reward);
        }
        Self::from_parts(actions, raw, rho)
    }

    pub fn from_parts(actions: Vec<u8>, raw_rewards: Vec<f64>, rho: f64) -> Result<Self> {
        if actions.len() != raw_rewards.len() {
            return Err(Error::InvalidArgument(
                "actions and rewards differ in length".into(),
            ));
        }
        if let Some(a) = actions.iter().find(|&&a| a as usize >= N_ACTIONS) {
            return Err(Error::InvalidArgument(format!("action {a} out of range")));
        }
        if actions.is_empty() {
            return Err(Error::NoSells);
        }
        let rewards = raw_rewards.iter().map(|&r| squash(r, rho)).collect();
        Ok(Self {
            actions,
            raw_rewards,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[u8] {
        &self.actions
    }

    pub fn squashed_rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Same sequence with actions relabelled by a different classification.
    pub fn with_actions(&self, actions: Vec<u8>) -> Result<Self> {
        if actions.len() != self.actions.len() {
            return Err(Error::InvalidArgument("action count mismatch".into()));
        }
        Ok(Self {
            actions,
            raw_rewards: self.raw_rewards.clone(),
            rewards: self.rewards.clone(),
        })
    }

    /// Negative log-likelihood in nats. `params.rho` is ignored; the
    /// squash scale was fixed at construction.
    pub fn nll(&self, params: &ModelParams) -> f64 {
        self.run(params, |_| {})
    }

    pub fn trace(&self, params: &ModelParams) -> (f64, Vec<SellEvent>) {
        let mut events = Vec::with_capacity(self.len());
        let nll = self.run(params, |e| events.push(e));
        (nll, events)
    }

    fn run(&self, params: &ModelParams, mut on_step: impl FnMut(SellEvent)) -> f64 {
        let mut q = QTable::zeros();
        let mut profit = 0.0;
        let mut state = state_of(profit);
        let mut total = NeumaierSum::default();
        for (i, (&a, &r)) in self.actions.iter().zip(&self.rewards).enumerate() {
            let a = a as usize;
            let row = q.row(state);
            let nlp = softmax_neg_log_prob(row, params.beta_inv_temp, a);
            total.add(nlp);
            profit += r;
            let next = state_of(profit);
            on_step(SellEvent {
                step: i + 1,
                action: a,
                raw_reward: self.raw_rewards[i],
                squashed_reward: r,
                state_before: state,
                state_after: next,
                probs: softmax_probs(row, params.beta_inv_temp),
                neg_log_prob: nlp,
            });
            q = q_update(q, state, a, r, next, params);
            state = next;
        }
        total.value()
    }
}

/// Result of replaying one history.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub nll: f64,
    pub trace: Vec<SellEvent>,
}

impl Replay {
    /// Cumulative squashed profit after the last sell.
    pub fn profit(&self) -> f64 {
        self.trace.iter().map(|e| e.squashed_reward).sum()
    }

    /// Trace as JSON lines, one object per sell.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Replay a player's sells through Q-learning and return the NLL and trace.
pub fn replay_nll(
    history: &PlayerHistory,
    classification: &RiskClassification,
    params: &ModelParams,
) -> Result<Replay> {
    let seq = ChoiceSequence::from_history(history, classification, params.rho)?;
    let (nll, trace) = seq.trace(params);
    Ok(Replay { nll, trace })
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    c: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}
