//! Prediction, extreme-event and communication metrics, and the run report.

use std::io::Write;

use crate::error::{Error, Result};
use crate::extreme::IndicatorLabel;

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Argument(format!("length mismatch: {} predictions, {} actuals", pred.len(), actual.len())));
    }
    if pred.is_empty() {
        return Err(Error::Argument("rmse of empty lists".into()));
    }
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// One-vs-rest scores for the right-extreme class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positives were predicted; precision reported as 0.
    pub precision_undefined: bool,
    /// No positives exist in the truth; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn extreme_prf(pred: &[IndicatorLabel], truth: &[IndicatorLabel]) -> Result<PrfScore> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", pred.len(), truth.len())));
    }
    let pos = IndicatorLabel::Right;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        match (*p == pos, *t == pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision_undefined = tp + fp == 0;
    let recall_undefined = tp + fneg == 0;
    let precision = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if recall_undefined { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision == 0.0 || recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PrfScore { precision, recall, f1, precision_undefined, recall_undefined })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub iterations: u64,
    pub eta: f64,
    /// Cumulative iterations at the end of the round.
    pub cum_iters: u64,
    /// Mean per-sample training loss over the round's local steps.
    pub train_loss: f64,
    /// RMSE of the global model on the test windows after the round, when evaluated.
    pub test_rmse: Option<f64>,
    pub wall_ms: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub max_staleness: u64,
}

pub const ROUNDS_CSV_HEADER: &str = "round,s_i,eta_i,cum_iters,train_loss,test_rmse,wall_ms,bytes_up,bytes_down,max_staleness";

pub fn write_rounds_csv<W: Write + ?Sized>(out: &mut W, rounds: &[RoundMetrics]) -> std::io::Result<()> {
    writeln!(out, "{ROUNDS_CSV_HEADER}")?;
    for r in rounds {
        let rmse = r.test_rmse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{:.3},{},{},{}",
            r.round, r.iterations, r.eta, r.cum_iters, r.train_loss, rmse, r.wall_ms, r.bytes_up, r.bytes_down, r.max_staleness
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Totals {
    pub rounds: usize,
    pub iterations: u64,
    pub wall_ms: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub max_staleness: u64,
}

impl Totals {
    pub fn from_rounds(rounds: &[RoundMetrics]) -> Self {
        Self {
            rounds: rounds.len(),
            iterations: rounds.iter().map(|r| r.iterations).sum(),
            wall_ms: rounds.iter().map(|r| r.wall_ms).sum(),
            bytes_up: rounds.iter().map(|r| r.bytes_up).sum(),
            bytes_down: rounds.iter().map(|r| r.bytes_down).sum(),
            max_staleness: rounds.iter().map(|r| r.max_staleness).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Settings that must agree for two reports to be comparable.
    pub fingerprint: String,
    /// Ordered `key = value` echo of the run settings.
    pub config: Vec<(String, String)>,
    pub clients: usize,
    pub rounds: Vec<RoundMetrics>,
    pub totals: Totals,
    /// Test RMSE of the final global model.
    pub final_test_rmse: f64,
}

impl ExperimentReport {
    pub fn new(fingerprint: String, config: Vec<(String, String)>, clients: usize, rounds: Vec<RoundMetrics>, final_test_rmse: f64) -> Self {
        let totals = Totals::from_rounds(&rounds);
        Self { fingerprint, config, clients, rounds, totals, final_test_rmse }
    }

    /// Plain `key = value` report; see the README for the field list.
    pub fn write_text<W: Write + ?Sized>(&self, out: &mut W, baseline: Option<&BaselineSummary>) -> std::io::Result<()> {
        writeln!(out, "# tsasync run report")?;
        writeln!(out, "fingerprint = {}", self.fingerprint)?;
        for (k, v) in &self.config {
            writeln!(out, "config.{k} = {v}")?;
        }
        writeln!(out, "clients = {}", self.clients)?;
        writeln!(out, "total_rounds = {}", self.totals.rounds)?;
        writeln!(out, "total_iterations = {}", self.totals.iterations)?;
        writeln!(out, "total_wall_ms = {:.3}", self.totals.wall_ms)?;
        writeln!(out, "total_bytes_up = {}", self.totals.bytes_up)?;
        writeln!(out, "total_bytes_down = {}", self.totals.bytes_down)?;
        writeln!(out, "max_staleness = {}", self.totals.max_staleness)?;
        writeln!(out, "final_test_rmse = {}", self.final_test_rmse)?;
        match baseline {
            Some(b) => {
                writeln!(out, "baseline_wall_ms = {:.3}", b.total_wall_ms)?;
                writeln!(out, "speedup = {:.4}", b.total_wall_ms / self.totals.wall_ms)?;
            }
            None if self.clients == 1 => writeln!(out, "speedup = 1.0000")?,
            None => writeln!(out, "speedup = n/a")?,
        }
        Ok(())
    }

    pub fn summary(&self) -> BaselineSummary {
        BaselineSummary {
            fingerprint: self.fingerprint.clone(),
            clients: self.clients,
            total_wall_ms: self.totals.wall_ms,
        }
    }
}

/// The parts of a stored report needed to compute a speedup against it.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSummary {
    pub fingerprint: String,
    pub clients: usize,
    pub total_wall_ms: f64,
}

impl BaselineSummary {
    /// Reads `fingerprint`, `clients` and `total_wall_ms` back from a text report.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fingerprint = None;
        let mut clients = None;
        let mut wall = None;
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once(" = ") else { continue };
            let bad = || Error::Parse { line: i + 1, message: format!("bad value for {k}: {v:?}") };
            match k {
                "fingerprint" => fingerprint = Some(v.to_string()),
                "clients" => clients = Some(v.parse().map_err(|_| bad())?),
                "total_wall_ms" => wall = Some(v.parse().map_err(|_| bad())?),
                _ => {}
            }
        }
        match (fingerprint, clients, wall) {
            (Some(fingerprint), Some(clients), Some(total_wall_ms)) => Ok(Self { fingerprint, clients, total_wall_ms }),
            _ => Err(Error::Parse { line: 0, message: "report lacks fingerprint, clients or total_wall_ms".into() }),
        }
    }
}

/// Wall time of the baseline divided by wall time of the `n`-client run.
pub fn speedup(report_n: &BaselineSummary, report_1: &BaselineSummary) -> Result<f64> {
    if report_n.fingerprint != report_1.fingerprint {
        return Err(Error::Argument(format!(
            "reports are not comparable:\n  {}\n  {}",
            report_n.fingerprint, report_1.fingerprint
        )));
    }
    if !(report_n.total_wall_ms > 0.0) {
        return Err(Error::Argument("run has no measured wall time".into()));
    }
    Ok(report_1.total_wall_ms / report_n.total_wall_ms)
}
