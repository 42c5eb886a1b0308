//! Step-size and sample-size schedules, and the per-round plan they imply.
//!
//! Round `i` (from 1) performs `s_i = floor(a * i^p + b)` SGD iterations in
//! total across all clients, at step size `eta0 / (1 + beta * sqrt(t))` where
//! `t` is the cumulative iteration count at the start of the round.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeSchedule {
    pub eta0: f64,
    pub beta: f64,
}

impl StepSizeSchedule {
    pub fn new(eta0: f64, beta: f64) -> Result<Self> {
        if !(eta0.is_finite() && eta0 > 0.0) {
            return Err(Error::config("opt.eta0", format!("must be finite and > 0, got {eta0}")));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::config("opt.beta", format!("must be finite and >= 0, got {beta}")));
        }
        Ok(Self { eta0, beta })
    }

    pub fn stepsize(&self, t: u64) -> f64 {
        self.eta0 / (1.0 + self.beta * (t as f64).sqrt())
    }
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        Self { eta0: 0.01, beta: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSizeSchedule {
    pub a: f64,
    pub p: f64,
    pub b: f64,
}

impl SampleSizeSchedule {
    pub fn new(a: f64, p: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config("schedule.a", format!("must be finite and >= 0, got {a}")));
        }
        if !p.is_finite() {
            return Err(Error::config("schedule.p", "must be finite"));
        }
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::config("schedule.b", format!("must be finite and >= 0, got {b}")));
        }
        if a + b <= 0.0 {
            return Err(Error::config("schedule.a", "a + b must be > 0"));
        }
        Ok(Self { a, p, b })
    }

    /// Constant schedule with `s` iterations per round.
    pub fn constant(s: u64) -> Self {
        Self { a: 0.0, p: 1.0, b: s as f64 }
    }

    /// Iterations in round `i`; never less than 1.
    pub fn sample_size(&self, i: u64) -> Result<u64> {
        if i == 0 {
            return Err(Error::Argument("round indices start at 1".into()));
        }
        let s = (self.a * (i as f64).powf(self.p) + self.b).floor();
        Ok(if s < 1.0 { 1 } else { s as u64 })
    }
}

impl Default for SampleSizeSchedule {
    fn default() -> Self {
        Self { a: 10.0, p: 1.0, b: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedRound {
    /// Round index, starting at 1.
    pub index: u64,
    /// Iterations across all clients this round.
    pub iterations: u64,
    /// `ceil(iterations / n)`.
    pub per_client: u64,
    pub eta: f64,
    /// Cumulative iterations before this round.
    pub cum_start: u64,
}

impl PlannedRound {
    /// Iterations assigned to `client` (0-based). Clients fill in order with
    /// `per_client` each until the round total is reached, so trailing clients
    /// may receive fewer, or none.
    pub fn client_share(&self, client: usize) -> u64 {
        let taken = self.per_client.saturating_mul(client as u64);
        self.iterations.saturating_sub(taken).min(self.per_client)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub rounds: Vec<PlannedRound>,
    pub budget: u64,
    pub clients: usize,
}

impl RoundPlan {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn total_iterations(&self) -> u64 {
        self.rounds.iter().map(|r| r.iterations).sum()
    }

    /// `round,s_i,per_client,eta_i,cum_start`
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "round,s_i,per_client,eta_i,cum_start")?;
        for r in &self.rounds {
            writeln!(out, "{},{},{},{},{}", r.index, r.iterations, r.per_client, r.eta, r.cum_start)?;
        }
        Ok(())
    }
}

pub fn build_round_plan(
    budget: u64,
    samples: &SampleSizeSchedule,
    steps: &StepSizeSchedule,
    clients: usize,
) -> Result<RoundPlan> {
    if budget == 0 {
        return Err(Error::config("schedule.K", "iteration budget must be >= 1"));
    }
    if clients == 0 {
        return Err(Error::config("dist.nodes", "need at least one client"));
    }
    let mut rounds = Vec::new();
    let mut done = 0u64;
    let mut i = 1u64;
    while done < budget {
        let s = samples.sample_size(i)?.min(budget - done);
        rounds.push(PlannedRound {
            index: i,
            iterations: s,
            per_client: s.div_ceil(clients as u64),
            eta: steps.stepsize(done),
            cum_start: done,
        });
        done += s;
        i += 1;
    }
    Ok(RoundPlan { rounds, budget, clients })
}

/// Number of rounds needed for each budget under `samples`.
pub fn rounds_growth_check(budgets: &[u64], samples: &SampleSizeSchedule) -> Result<Vec<usize>> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("budgets must be strictly increasing".into()));
    }
    budgets
        .iter()
        .map(|&k| build_round_plan(k, samples, &StepSizeSchedule::default(), 1).map(|p| p.num_rounds()))
        .collect()
}
