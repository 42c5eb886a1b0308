use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;
use tsasync::config::RunConfig;
use tsasync::nn::read_checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_tsasync");

fn small(extra: &str) -> String {
    format!("schedule.K = 600\nmodel.hidden = 4\nmodel.fc_dims = 3,1\n{extra}")
}

fn run(cmd: &str, config: &str, dir: &Path, out: &str) -> std::process::Output {
    let cfg = dir.join(format!("{out}.cfg"));
    fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .args([cmd, "--config", cfg.to_str().unwrap(), "--out", dir.join(out).to_str().unwrap()])
        .output()
        .unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn report_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("report.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(String::from))
        .unwrap_or_else(|| panic!("{key} missing from report"))
}

#[test]
fn train_writes_schema_valid_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = run("train", &small("dist.nodes = 2\n"), tmp.path(), "t");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("t");

    let (header, rows) = csv_rows(&dir.join("rounds.csv"));
    assert_eq!(header.join(","), "round,s_i,eta_i,cum_iters,train_loss,test_rmse,wall_ms,bytes_up,bytes_down,max_staleness");
    // 10 * (1 + ... + 10) = 550, so 11 rounds with the last truncated to 50
    assert_eq!(rows.len(), 11);
    assert_eq!(rows.last().unwrap()[1], "50");
    assert_eq!(rows.last().unwrap()[3], "600");
    let s_sum: u64 = rows.iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
    assert_eq!(s_sum, 600);

    let (header, rows) = csv_rows(&dir.join("predictions.csv"));
    assert_eq!(header.join(","), "index,date,actual_price,predicted_price");
    assert!(!rows.is_empty());
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r[0], k.to_string());
        assert!(r[1].starts_with("2015") || r[1].starts_with("2016"));
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
        assert!(r[3].parse::<f64>().unwrap().is_finite());
    }

    assert_eq!(report_value(&dir, "total_iterations"), "600");
    assert_eq!(report_value(&dir, "total_rounds"), "11");
    assert_eq!(report_value(&dir, "clients"), "2");

    let params = read_checkpoint(std::io::BufReader::new(fs::File::open(dir.join("model.ckpt")).unwrap())).unwrap();
    assert_eq!(params.len(), {
        // two LSTM layers of width 4 on scalar input, then 4 -> 3 -> 1
        let l0 = 16 + 16 * 4 + 16;
        let l1 = 16 * 4 + 16 * 4 + 16;
        l0 + l1 + (3 * 4 + 3) + (3 + 1)
    });
    let leftovers: Vec<_> = fs::read_dir(&dir).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().ends_with(".tmp")).collect();
    assert!(leftovers.is_empty());
}

#[test]
fn single_client_runs_repeat_exactly() {
    let tmp = TempDir::new().unwrap();
    let loss_columns = |name: &str| {
        let out = run("train", &small("seed = 5\n"), tmp.path(), name);
        assert!(out.status.success());
        let (_, rows) = csv_rows(&tmp.path().join(name).join("rounds.csv"));
        rows.into_iter().map(|r| (r[4].clone(), r[5].clone())).collect::<Vec<_>>()
    };
    assert_eq!(loss_columns("a"), loss_columns("b"));
}

#[test]
fn many_clients_conserve_the_budget() {
    let tmp = TempDir::new().unwrap();
    let out = run("train", &small("dist.nodes = 10\ndist.delay = sqrt_log\nmetrics.eval_every_round = false\n"), tmp.path(), "t");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("t");
    assert_eq!(report_value(&dir, "total_iterations"), "600");
    let (_, rows) = csv_rows(&dir.join("rounds.csv"));
    assert!(rows[..rows.len() - 1].iter().all(|r| r[5].is_empty()));
    assert!(!rows.last().unwrap()[5].is_empty());
}

#[test]
fn baseline_report_adds_speedup() {
    let tmp = TempDir::new().unwrap();
    assert!(run("train", &small(""), tmp.path(), "one").status.success());
    let base = tmp.path().join("one").join("report.txt");
    let cfg = tmp.path().join("two.cfg");
    fs::write(&cfg, small("dist.nodes = 2\n")).unwrap();
    let out = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("two").to_str().unwrap(), "--baseline", base.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("two");
    let ratio: f64 = report_value(&dir, "speedup").parse().unwrap();
    let base_ms: f64 = report_value(&tmp.path().join("one"), "total_wall_ms").parse().unwrap();
    let own_ms: f64 = report_value(&dir, "total_wall_ms").parse().unwrap();
    assert!((ratio - base_ms / own_ms).abs() < 1e-3 * ratio.max(1.0));

    fs::write(&cfg, small("seed = 99\n")).unwrap();
    let out = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("three").to_str().unwrap(), "--baseline", base.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_and_no_partial_output() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run("train", "model.depth = 2\n", tmp.path(), "c").status.code(), Some(1));
    assert_eq!(run("plan", "dist.delay = fixed:x\n", tmp.path(), "c").status.code(), Some(1));
    let missing = format!("data.path = {}\n", tmp.path().join("missing.csv").display());
    assert_eq!(run("train", &missing, tmp.path(), "d").status.code(), Some(2));

    fs::create_dir(tmp.path().join("r")).unwrap();
    let out = run("train", &small("opt.eta0 = 1e200\nmodel.clip = 0\n"), tmp.path(), "r");
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(tmp.path().join("r")).unwrap().count(), 0);

    let out = Command::new(BIN).args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn plan_rows(config: &str) -> Vec<Vec<String>> {
    let tmp = TempDir::new().unwrap();
    let out = run("plan", config, tmp.path(), "p");
    assert!(out.status.success());
    let (header, rows) = csv_rows(&tmp.path().join("p").join("plan.csv"));
    assert_eq!(header.join(","), "round,s_i,per_client,eta_i,cum_start");
    let printed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(printed, fs::read_to_string(tmp.path().join("p").join("plan.csv")).unwrap());
    rows
}

#[test]
fn plan_command_examples() {
    let rows = plan_rows("");
    assert_eq!(rows.len(), 240);
    assert_eq!(rows[239][1], "1575");
    let mut cum = 0u64;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[4].parse::<u64>().unwrap(), cum);
        let s: u64 = r[1].parse().unwrap();
        assert!(i == 239 || s == 10 * (i as u64 + 1));
        cum += s;
    }
    assert_eq!(cum, 288_375);

    let rows = plan_rows("schedule.a = 0\nschedule.b = 10\n");
    assert_eq!(rows.len(), 288_375usize.div_ceil(10));
    assert_eq!(rows.last().unwrap()[1], "5");

    let rows = plan_rows("schedule.K = 1\n");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "1");
}

fn write_series(path: &Path, closes: &[f64]) {
    let mut text = String::from("Date,Open,High,Low,Close,Volume\n");
    let mut d = chrono::NaiveDate::from_ymd_opt(2012, 1, 2).unwrap();
    for c in closes {
        text.push_str(&format!("{d},{c},{c},{c},{c},1000\n"));
        d = d.succ_opt().unwrap();
    }
    fs::write(path, text).unwrap();
}

#[test]
fn label_events_on_symmetric_series() {
    let tmp = TempDir::new().unwrap();
    // i.i.d. uniform prices around 100 give targets roughly symmetric about zero
    let mut closes = Vec::new();
    let mut x: u64 = 12345;
    for _ in 0..1200 {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (x >> 11) as f64 / (1u64 << 53) as f64;
        closes.push(100.0 * (1.0 + 0.2 * (u - 0.5)));
    }
    let csv_path = tmp.path().join("sym.csv");
    write_series(&csv_path, &closes);
    let cfg = format!(
        "data.path = {}\nwindow.size = 5\ndata.train_start = 2012-01-01\ndata.train_end = 2013-12-31\ndata.test_start = 2014-01-01\ndata.test_end = 2016-12-31\nevl.quantile = 0.95\n",
        csv_path.display()
    );
    let out = run("label-events", &cfg, tmp.path(), "l");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("l");
    let (header, rows) = csv_rows(&dir.join("labels.csv"));
    assert_eq!(header.join(","), "index,target,label");

    let targets: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let labels: Vec<i8> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let n = rows.len();
    let counts = [-1i8, 0, 1].map(|v| labels.iter().filter(|&&l| l == v).count());
    assert_eq!(counts.iter().sum::<usize>(), n);

    // order statistics: the number of targets strictly above the 95% quantile
    let mut sorted = targets.clone();
    sorted.sort_by(f64::total_cmp);
    let above = |q: f64| sorted.iter().filter(|&&t| t > q).count();
    let h = (n - 1) as f64 * 0.95;
    let q95 = sorted[h.floor() as usize] + (h - h.floor()) * (sorted[h.ceil() as usize] - sorted[h.floor() as usize]);
    assert_eq!(counts[2], above(q95));
    assert!((counts[2] as f64 - 0.05 * n as f64).abs() <= 1.0, "{} of {n}", counts[2]);

    let summary = fs::read_to_string(dir.join("labels_summary.txt")).unwrap();
    let fields: Vec<(&str, f64)> = summary.trim().split(',').map(|kv| {
        let (k, v) = kv.split_once('=').unwrap();
        (k, v.parse().unwrap())
    }).collect();
    assert_eq!(fields.iter().map(|f| f.0).collect::<Vec<_>>(), ["beta0", "beta1", "eps1", "eps2"]);
    assert!((fields[0].1 - counts[1] as f64 / n as f64).abs() < 1e-15);
    assert!((fields[1].1 - 0.05).abs() <= 1.0 / n as f64);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary);
}

#[test]
fn label_events_rejects_flat_series() {
    let tmp = TempDir::new().unwrap();
    let csv_path = tmp.path().join("flat.csv");
    write_series(&csv_path, &[42.0; 900]);
    let cfg = format!(
        "data.path = {}\nwindow.size = 5\ndata.train_start = 2012-01-01\ndata.train_end = 2013-06-30\ndata.test_start = 2013-07-01\ndata.test_end = 2016-12-31\n",
        csv_path.display()
    );
    let out = run("label-events", &cfg, tmp.path(), "l");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold clamp"));
    assert!(!tmp.path().join("l").join("labels.csv").exists());
}

fn compare_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn compare_exchange_modes_report() {
    let tmp = TempDir::new().unwrap();
    let out = run("compare-exchange-modes", &small(""), tmp.path(), "c");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("c").join("compare.txt")).unwrap();
    let values = compare_values(&text);
    let get = |k: &str| values.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
    let model: f64 = get("model.final_test_rmse").parse().unwrap();
    let grad: f64 = get("gradient.final_test_rmse").parse().unwrap();
    // with one client both modes take the same steps; only summation order differs
    assert!((model - grad).abs() <= 1e-9 * model, "{model} vs {grad}");
    assert_eq!(get("model.total_bytes_up"), get("gradient.total_bytes_up"));
    assert!(get("gradient.total_bytes_down").parse::<u64>().unwrap() > 0);

    let again = run("compare-exchange-modes", &small(""), tmp.path(), "c2");
    assert!(again.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("c2").join("compare.txt")).unwrap(), text);

    let out = run("compare-exchange-modes", &small("dist.nodes = 3\n"), tmp.path(), "c3");
    assert!(out.status.success());
    let again = run("compare-exchange-modes", &small("dist.nodes = 3\n"), tmp.path(), "c4");
    assert!(again.status.success());
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn config_file_round_trips_through_serialize() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.cfg");
    fs::write(&path, "dist.nodes = 4\ndist.delay = sqrt_log:2\nevl.enabled = true\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let text = cfg.serialize();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    assert!(text.contains("window.size = 20\n"));
    assert!(text.contains("schedule.K = 288375\n"));
    assert!(text.contains("dist.delay = sqrt_log:2\n"));
}
