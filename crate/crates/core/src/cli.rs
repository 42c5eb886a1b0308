//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, BUNDLED};
use crate::data::{denormalize, load_csv, parse_csv, split_by_date, DatasetSplit, RawSeries};
use crate::error::{Error, Result};
use crate::extreme::{choose_thresholds, estimate_betas, indicator, BetaEstimate, EventThresholds, IndicatorLabel};
use crate::metrics::{speedup, write_rounds_csv, BaselineSummary, ExperimentReport};
use crate::nn::{write_checkpoint, EvlTerm, Network};
use crate::schedule::{build_round_plan, RoundPlan};
use crate::sim::{run_experiment, ExchangeMode, Execution, ExperimentConfig, ExperimentOutcome};

const SAMPLE_CSV: &str = include_str!("../data/sp500_sample.csv");

#[derive(Debug, Parser)]
#[command(name = "tsasync", version, about = "Asynchronous local-SGD LSTM training simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// `key = value` config file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment and write rounds.csv, predictions.csv, report.txt and model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// report.txt of an earlier run with the same settings, used for the speedup line.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write the round plan as plan.csv and print it.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Label training targets as extreme or normal; writes labels.csv.
    LabelEvents {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per exchange mode and write compare.txt.
    CompareExchangeModes {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, baseline } => {
            let cfg = load_config(common)?;
            cmd_train(&cfg, &common.out, baseline.as_deref()).map(|_| ())
        }
        Command::Plan { common } => {
            let cfg = load_config(common)?;
            let plan = cmd_plan(&cfg, &common.out)?;
            let mut stdout = std::io::stdout().lock();
            plan.write_csv(&mut stdout).map_err(|e| Error::io("<stdout>", e))
        }
        Command::LabelEvents { common } => {
            let cfg = load_config(common)?;
            let summary = cmd_label_events(&cfg, &common.out)?;
            println!("{}", summary.line());
            Ok(())
        }
        Command::CompareExchangeModes { common } => {
            let cfg = load_config(common)?;
            let text = cmd_compare_exchange(&cfg, &common.out)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_series(cfg: &RunConfig) -> Result<RawSeries> {
    if cfg.data_path == BUNDLED {
        parse_csv(SAMPLE_CSV, &cfg.symbol)
    } else {
        load_csv(&cfg.data_path, &cfg.symbol)
    }
}

pub fn load_split(cfg: &RunConfig) -> Result<(RawSeries, DatasetSplit)> {
    let series = load_series(cfg)?;
    let split = split_by_date(&series, cfg.train, cfg.test, cfg.window)?;
    if split.train.is_empty() {
        return Err(Error::Data("training range holds no complete window".into()));
    }
    Ok((series, split))
}

fn train_targets(split: &DatasetSplit) -> Vec<f64> {
    split.train.iter().map(|w| w.target).collect()
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Thresholds, labels and class shares of the training targets.
pub fn label_training_targets(cfg: &RunConfig, split: &DatasetSplit) -> Result<(EventThresholds, Vec<IndicatorLabel>, BetaEstimate)> {
    let targets = train_targets(split);
    let th = choose_thresholds(&targets, cfg.evl_quantile)?;
    let labels: Vec<IndicatorLabel> = targets.iter().map(|&y| indicator(y, &th)).collect();
    let betas = estimate_betas(&labels)?;
    Ok((th, labels, betas))
}

/// Builds the simulator settings for a loaded split. The L2 coefficient is one
/// over the number of training windows.
pub fn experiment_config(cfg: &RunConfig, split: &DatasetSplit) -> Result<ExperimentConfig> {
    let lambda = 1.0 / split.train_count() as f64;
    let network = Network::new(cfg.network(lambda))?;
    let plan = build_round_plan(cfg.budget, &cfg.samples, &cfg.step, cfg.nodes)?;
    let evl = if cfg.evl_enabled {
        let (thresholds, _, betas) = label_training_targets(cfg, split)?;
        let scale = std_dev(&train_targets(split));
        if !(scale > 0.0) {
            return Err(Error::Data("training targets have zero spread".into()));
        }
        Some(EvlTerm { thresholds, params: betas.evl_params(cfg.evl_gamma, cfg.evl_swap_betas)?, scale })
    } else {
        None
    };
    Ok(ExperimentConfig {
        network,
        plan,
        mode: cfg.exchange,
        delay: cfg.delay,
        data: cfg.data_access(),
        execution: cfg.execution,
        jitter: (cfg.jitter_us > 0).then(|| Duration::from_micros(cfg.jitter_us)),
        seed: cfg.seed,
        evl,
        eval_each_round: cfg.eval_every_round,
        echo: cfg.entries(),
        fingerprint: cfg.fingerprint(),
    })
}

/// Output files written to temporaries first and renamed into place only once
/// every file has been written.
struct Staged {
    dir: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staged {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), committed: false })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let run = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            body(&mut f)?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()
        };
        self.files.push((tmp.clone(), target));
        run().map_err(|e| Error::io(&tmp, e))
    }

    fn commit(mut self) -> Result<()> {
        for (tmp, target) in &self.files {
            fs::rename(tmp, target).map_err(|e| Error::io(target, e))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.files {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, baseline: Option<&Path>) -> Result<ExperimentOutcome> {
    let baseline = match baseline {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let b = BaselineSummary::parse(&text).map_err(|e| e.context(format!("reading baseline {}", p.display())))?;
            if b.fingerprint != cfg.fingerprint() {
                return Err(Error::config("--baseline", "baseline report was produced with different settings"));
            }
            Some(b)
        }
        None => None,
    };
    let (series, split) = load_split(cfg)?;
    let exp = experiment_config(cfg, &split)?;
    let outcome = run_experiment(&exp, &split)?;
    if let Some(b) = &baseline {
        speedup(&outcome.report.summary(), b)?;
    }

    let preds = split
        .test
        .iter()
        .map(|w| exp.network.predict(&outcome.state.params, &w.inputs))
        .collect::<Result<Vec<_>>>()?;

    let mut staged = Staged::new(out)?;
    staged.write("rounds.csv", |f| write_rounds_csv(f, &outcome.report.rounds))?;
    staged.write("predictions.csv", |f| {
        writeln!(f, "index,date,actual_price,predicted_price")?;
        for (k, (w, p)) in split.test.iter().zip(&preds).enumerate() {
            let t = w.target_index();
            writeln!(f, "{k},{},{},{}", series.dates[t], series.close[t], denormalize(*p, w.base_price))?;
        }
        Ok(())
    })?;
    staged.write("report.txt", |f| outcome.report.write_text(f, baseline.as_ref()))?;
    staged.write("model.ckpt", |f| write_checkpoint(f, &outcome.state.params))?;
    staged.commit()?;
    Ok(outcome)
}

pub fn cmd_plan(cfg: &RunConfig, out: &Path) -> Result<RoundPlan> {
    let plan = build_round_plan(cfg.budget, &cfg.samples, &cfg.step, cfg.nodes)?;
    let mut staged = Staged::new(out)?;
    staged.write("plan.csv", |f| plan.write_csv(f))?;
    staged.commit()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSummary {
    pub thresholds: EventThresholds,
    pub betas: BetaEstimate,
}

impl LabelSummary {
    pub fn line(&self) -> String {
        format!(
            "beta0={},beta1={},eps1={},eps2={}",
            self.betas.beta0, self.betas.beta1, self.thresholds.epsilon1, self.thresholds.epsilon2
        )
    }
}

/// Labels every training target; thresholds come from `evl.quantile`.
pub fn cmd_label_events(cfg: &RunConfig, out: &Path) -> Result<LabelSummary> {
    let (_, split) = load_split(cfg)?;
    let (thresholds, labels, betas) = label_training_targets(cfg, &split)?;
    let summary = LabelSummary { thresholds, betas };
    let mut staged = Staged::new(out)?;
    staged.write("labels.csv", |f| {
        writeln!(f, "index,target,label")?;
        for (k, (w, l)) in split.train.iter().zip(&labels).enumerate() {
            writeln!(f, "{k},{},{}", w.target, l.value())?;
        }
        Ok(())
    })?;
    staged.write("labels_summary.txt", |f| writeln!(f, "{}", summary.line()))?;
    staged.commit()?;
    Ok(summary)
}

/// Runs the same settings under both exchange modes. Always uses the
/// deterministic scheduler so the comparison is reproducible.
pub fn cmd_compare_exchange(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (_, split) = load_split(cfg)?;
    let mut reports: Vec<(ExchangeMode, ExperimentReport)> = Vec::new();
    for mode in [ExchangeMode::Model, ExchangeMode::Gradient] {
        let run_cfg = RunConfig { exchange: mode, execution: Execution::Deterministic, jitter_us: 0, ..cfg.clone() };
        let exp = experiment_config(&run_cfg, &split)?;
        let outcome = run_experiment(&exp, &split).map_err(|e| e.context(format!("{mode} exchange")))?;
        reports.push((mode, outcome.report));
    }
    let mut text = String::from("# tsasync exchange-mode comparison\n");
    text.push_str(&format!("fingerprint = {}\n", cfg.fingerprint()));
    text.push_str(&format!("clients = {}\nexecution = deterministic\n", cfg.nodes));
    for (mode, r) in &reports {
        text.push_str(&format!("{mode}.final_test_rmse = {}\n", r.final_test_rmse));
        text.push_str(&format!("{mode}.total_bytes_up = {}\n", r.totals.bytes_up));
        text.push_str(&format!("{mode}.total_bytes_down = {}\n", r.totals.bytes_down));
        text.push_str(&format!("{mode}.total_iterations = {}\n", r.totals.iterations));
    }
    let mut staged = Staged::new(out)?;
    staged.write("compare.txt", |f| f.write_all(text.as_bytes()))?;
    staged.commit()?;
    Ok(text)
}
