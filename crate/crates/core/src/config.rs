//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::data::DateRange;
use crate::error::{Error, Result};
use crate::nn::NetworkConfig;
use crate::schedule::{SampleSizeSchedule, StepSizeSchedule};
use crate::sim::{DataAccess, DelayPolicy, ExchangeMode, Execution};

/// `data.path` value that selects the sample series compiled into the binary.
pub const BUNDLED: &str = "bundled";

pub const KEYS: [&str; 29] = [
    "data.path",
    "data.symbol",
    "data.train_start",
    "data.train_end",
    "data.test_start",
    "data.test_end",
    "window.size",
    "model.hidden",
    "model.fc_dims",
    "model.clip",
    "opt.eta0",
    "opt.beta",
    "schedule.a",
    "schedule.p",
    "schedule.b",
    "schedule.K",
    "dist.nodes",
    "dist.exchange",
    "dist.delay",
    "dist.share_data",
    "dist.execution",
    "dist.jitter_us",
    "evl.enabled",
    "evl.gamma",
    "evl.quantile",
    "evl.weight",
    "evl.swap_betas",
    "metrics.eval_every_round",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: String,
    pub symbol: String,
    pub train: DateRange,
    pub test: DateRange,
    pub window: usize,
    pub hidden: usize,
    pub fc_dims: Vec<usize>,
    pub clip: f64,
    pub step: StepSizeSchedule,
    pub samples: SampleSizeSchedule,
    pub budget: u64,
    pub nodes: usize,
    pub exchange: ExchangeMode,
    pub delay: DelayPolicy,
    pub share_data: bool,
    pub execution: Execution,
    pub jitter_us: u64,
    pub evl_enabled: bool,
    pub evl_gamma: f64,
    pub evl_quantile: f64,
    pub evl_weight: f64,
    pub evl_swap_betas: bool,
    pub eval_every_round: bool,
    pub seed: u64,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid literal date")
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            data_path: BUNDLED.into(),
            symbol: "SP500".into(),
            train: DateRange { start: date(2012, 1, 1), end: date(2014, 12, 31) },
            test: DateRange { start: date(2015, 1, 1), end: date(2016, 12, 31) },
            window: 20,
            hidden: net.hidden_dim,
            fc_dims: net.fc_dims,
            clip: net.clip_norm,
            step: StepSizeSchedule::default(),
            samples: SampleSizeSchedule::default(),
            budget: 288_375,
            nodes: 1,
            exchange: ExchangeMode::Model,
            delay: DelayPolicy::None,
            share_data: true,
            execution: Execution::Threaded,
            jitter_us: 0,
            evl_enabled: false,
            evl_gamma: 2.0,
            evl_quantile: 0.95,
            evl_weight: 1.0,
            evl_swap_betas: false,
            eval_every_round: true,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
    }
}

fn parse_date(key: &str, v: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d").map_err(|_| Error::config(key, format!("expected YYYY-MM-DD, got {v:?}")))
}

fn finite(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::config(key, "must be finite"))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("line {}: key given twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.path" => self.data_path = v.to_string(),
            "data.symbol" => self.symbol = v.to_string(),
            "data.train_start" => self.train.start = parse_date(key, v)?,
            "data.train_end" => self.train.end = parse_date(key, v)?,
            "data.test_start" => self.test.start = parse_date(key, v)?,
            "data.test_end" => self.test.end = parse_date(key, v)?,
            "window.size" => self.window = parse_num(key, v)?,
            "model.hidden" => self.hidden = parse_num(key, v)?,
            "model.fc_dims" => {
                self.fc_dims = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
            }
            "model.clip" => self.clip = finite(key, v)?,
            "opt.eta0" => self.step.eta0 = finite(key, v)?,
            "opt.beta" => self.step.beta = finite(key, v)?,
            "schedule.a" => self.samples.a = finite(key, v)?,
            "schedule.p" => self.samples.p = finite(key, v)?,
            "schedule.b" => self.samples.b = finite(key, v)?,
            "schedule.K" => self.budget = parse_num(key, v)?,
            "dist.nodes" => self.nodes = parse_num(key, v)?,
            "dist.exchange" => self.exchange = v.parse()?,
            "dist.delay" => self.delay = v.parse()?,
            "dist.share_data" => self.share_data = parse_bool(key, v)?,
            "dist.execution" => {
                self.execution = match v {
                    "threaded" => Execution::Threaded,
                    "deterministic" => Execution::Deterministic,
                    _ => return Err(Error::config(key, format!("expected threaded or deterministic, got {v:?}"))),
                }
            }
            "dist.jitter_us" => self.jitter_us = parse_num(key, v)?,
            "evl.enabled" => self.evl_enabled = parse_bool(key, v)?,
            "evl.gamma" => self.evl_gamma = finite(key, v)?,
            "evl.quantile" => self.evl_quantile = finite(key, v)?,
            "evl.weight" => self.evl_weight = finite(key, v)?,
            "evl.swap_betas" => self.evl_swap_betas = parse_bool(key, v)?,
            "metrics.eval_every_round" => self.eval_every_round = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_path.is_empty() {
            return Err(Error::config("data.path", "must not be empty"));
        }
        if self.train.start > self.train.end {
            return Err(Error::config("data.train_end", "must not precede data.train_start"));
        }
        if self.test.start > self.test.end {
            return Err(Error::config("data.test_end", "must not precede data.test_start"));
        }
        if self.train.end >= self.test.start {
            return Err(Error::config("data.test_start", "test range must start after the training range ends"));
        }
        if self.window == 0 {
            return Err(Error::config("window.size", "must be >= 1"));
        }
        self.network(0.0).validate()?;
        StepSizeSchedule::new(self.step.eta0, self.step.beta)?;
        SampleSizeSchedule::new(self.samples.a, self.samples.p, self.samples.b)?;
        if self.budget == 0 {
            return Err(Error::config("schedule.K", "must be >= 1"));
        }
        if self.nodes == 0 {
            return Err(Error::config("dist.nodes", "must be >= 1"));
        }
        if self.evl_gamma <= 0.0 {
            return Err(Error::config("evl.gamma", "must be > 0"));
        }
        if !(self.evl_quantile > 0.5 && self.evl_quantile < 1.0) {
            return Err(Error::config("evl.quantile", "must lie in (0.5, 1)"));
        }
        Ok(())
    }

    /// Network settings with the given L2 coefficient.
    pub fn network(&self, lambda: f64) -> NetworkConfig {
        NetworkConfig {
            hidden_dim: self.hidden,
            fc_dims: self.fc_dims.clone(),
            clip_norm: self.clip,
            lambda,
            evl_weight: if self.evl_enabled { self.evl_weight } else { 0.0 },
            ..NetworkConfig::default()
        }
    }

    pub fn data_access(&self) -> DataAccess {
        if self.share_data {
            DataAccess::Shared
        } else {
            DataAccess::Sharded
        }
    }

    /// All effective values, one `(key, value)` pair per key in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let dims: Vec<String> = self.fc_dims.iter().map(|d| d.to_string()).collect();
        let values = [
            self.data_path.clone(),
            self.symbol.clone(),
            self.train.start.to_string(),
            self.train.end.to_string(),
            self.test.start.to_string(),
            self.test.end.to_string(),
            self.window.to_string(),
            self.hidden.to_string(),
            dims.join(","),
            self.clip.to_string(),
            self.step.eta0.to_string(),
            self.step.beta.to_string(),
            self.samples.a.to_string(),
            self.samples.p.to_string(),
            self.samples.b.to_string(),
            self.budget.to_string(),
            self.nodes.to_string(),
            self.exchange.to_string(),
            self.delay.to_string(),
            self.share_data.to_string(),
            match self.execution {
                Execution::Threaded => "threaded".into(),
                Execution::Deterministic => "deterministic".into(),
            },
            self.jitter_us.to_string(),
            self.evl_enabled.to_string(),
            self.evl_gamma.to_string(),
            self.evl_quantile.to_string(),
            self.evl_weight.to_string(),
            self.evl_swap_betas.to_string(),
            self.eval_every_round.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash of every setting that changes the computation performed, i.e. all
    /// but the client count and how clients are scheduled. Runs with equal
    /// fingerprints are comparable for speedup.
    pub fn fingerprint(&self) -> String {
        const SKIP: [&str; 4] = ["dist.nodes", "dist.execution", "dist.jitter_us", "metrics.eval_every_round"];
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.entries().iter().filter(|(k, _)| !SKIP.contains(&k.as_str())) {
            for b in k.bytes().chain([b'=']).chain(v.bytes()).chain([b'\n']) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}
