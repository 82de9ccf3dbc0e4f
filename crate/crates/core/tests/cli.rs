use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use snkb::bounds::{beta_fixed, omega};
use snkb::cli::commands::{self, bandit_seed_file};
use snkb::cli::config::{self, BanditConfig, BoundsConfig, CoverageConfig, RegressionConfig, TestPoints};
use snkb::cli::{execute, CliError, Command, CommonArgs};
use snkb::validation::coverage_replication;
use snkb::Error;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn args(config: PathBuf, out: &Path) -> CommonArgs {
    CommonArgs {
        config,
        out: out.to_path_buf(),
        seed: None,
        threads: Some(2),
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(rows: &[Vec<String>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, cfg: &T) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, config::canonical(cfg)).unwrap();
    p
}

#[test]
fn bounds_single_row_matches_library() {
    let dir = TempDir::new().unwrap();
    let cfg = BoundsConfig {
        n: vec![1],
        rho: vec![1.0],
        y: vec![1.0],
        gamma: vec![0.0],
        b: 1.0,
        budget: snkb::bounds::Budget::Bernstein,
    };
    let path = write_json(dir.path(), "b.json", &cfg);
    execute(&Command::Bounds(args(path, dir.path()))).unwrap();
    let (header, rows) = read_csv(&dir.path().join(commands::BOUNDS_FILE));
    assert_eq!(header, ["n", "rho", "y", "gamma", "beta", "hoeffding", "omega", "budget"]);
    assert_eq!(rows.len(), 1);
    let beta: f64 = rows[0][4].parse().unwrap();
    assert_eq!(beta, beta_fixed(1.0, 1.0, 0.0).unwrap());
    assert!((beta - 6.779616761705371).abs() < 1e-12);
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), omega(1.0, 1.0, 0.0, 1.0).unwrap());
}

#[test]
fn empty_grid_gives_header_only() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("b.json");
    fs::write(&path, r#"{"n": [], "rho": [1.0], "y": [1.0], "gamma": [0.0]}"#).unwrap();
    execute(&Command::Bounds(args(path, dir.path()))).unwrap();
    let text = fs::read_to_string(dir.path().join(commands::BOUNDS_FILE)).unwrap();
    assert_eq!(text, "n,rho,y,gamma,beta,hoeffding,omega,budget\n");
}

#[test]
fn bounds_demo_matches_golden() {
    let dir = TempDir::new().unwrap();
    execute(&Command::Bounds(args(configs().join("bounds_demo.json"), dir.path()))).unwrap();
    let got = fs::read(dir.path().join(commands::BOUNDS_FILE)).unwrap();
    assert_eq!(got, fs::read(configs().join("golden/bounds.csv")).unwrap());
}

#[test]
fn coverage_budget_and_reproducible_flags() {
    let dir = TempDir::new().unwrap();
    let path = configs().join("coverage_smoke.json");
    execute(&Command::Coverage(args(path.clone(), dir.path()))).unwrap();
    let (_, summary) = read_csv(&dir.path().join(commands::COVERAGE_SUMMARY_FILE));
    assert_eq!(summary[0][0], "bernstein-fixed");
    assert_eq!(summary[0][5].parse::<f64>().unwrap(), 2.0 * (-3f64).exp());

    let cfg: CoverageConfig = config::load(&path).unwrap();
    let (_, rows) = read_csv(&dir.path().join(commands::COVERAGE_FILE));
    assert_eq!(rows.len(), cfg.reps);
    for i in [0usize, 17, 99] {
        let r = coverage_replication(&cfg.trace, cfg.theorem, cfg.y, cfg.seed, i as u64).unwrap();
        assert_eq!(rows[i][1], if r.violated { "1" } else { "0" });
        assert_eq!(rows[i][3].parse::<f64>().unwrap(), r.max_ratio);
    }
}

#[test]
fn single_arm_bandit_has_zero_regret() {
    let dir = TempDir::new().unwrap();
    execute(&Command::Bandit(args(configs().join("bandit_single_arm.json"), dir.path()))).unwrap();
    for i in 0..3 {
        let (_, rows) = read_csv(&dir.path().join(bandit_seed_file(i)));
        assert_eq!(rows.len(), 200);
        assert!(column(&rows, 4).iter().all(|&r| r == 0.0));
    }
}

#[test]
fn bandit_aggregate_is_mean_of_seed_files() {
    let dir = TempDir::new().unwrap();
    let mut cfg: BanditConfig = config::load(&configs().join("bandit_demo.json")).unwrap();
    cfg.seeds = 7;
    cfg.horizon = 150;
    let path = write_json(dir.path(), "bandit.json", &cfg);
    execute(&Command::Bandit(args(path, dir.path()))).unwrap();
    let seeds: Vec<Vec<f64>> = (0..7)
        .map(|i| column(&read_csv(&dir.path().join(bandit_seed_file(i))).1, 4))
        .collect();
    let (header, agg) = read_csv(&dir.path().join(commands::BANDIT_AGGREGATE_FILE));
    assert_eq!(header, ["round", "mean_cum_regret", "bound_curve"]);
    let means = column(&agg, 1);
    for n in 0..150 {
        let expect = seeds.iter().map(|s| s[n]).sum::<f64>() / 7.0;
        assert_eq!(means[n], expect);
    }
    let curve = column(&agg, 2);
    assert!(curve.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn bandit_demo_matches_golden() {
    let dir = TempDir::new().unwrap();
    execute(&Command::Bandit(args(configs().join("bandit_demo.json"), dir.path()))).unwrap();
    let got = fs::read(dir.path().join(commands::BANDIT_AGGREGATE_FILE)).unwrap();
    assert_eq!(got, fs::read(configs().join("golden/bandit_aggregate.csv")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let path = configs().join("bandit_single_arm.json");
    let mut with_seed = args(path.clone(), a.path());
    with_seed.seed = Some(99);
    execute(&Command::Bandit(with_seed)).unwrap();
    let mut cfg: BanditConfig = config::load(&path).unwrap();
    cfg.seed = 99;
    let p = write_json(b.path(), "c.json", &cfg);
    execute(&Command::Bandit(args(p, b.path()))).unwrap();
    for f in [bandit_seed_file(0), "config.json".into()] {
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
    }
}

fn regression_config(dir: &Path, dataset: &str) -> RegressionConfig {
    fs::write(dir.join("data.csv"), dataset).unwrap();
    RegressionConfig {
        kernel: snkb::kernel::KernelSpec::rbf(1, 0.5),
        dataset: "data.csv".into(),
        confidence: snkb::bounds::ConfidenceConfig::new(2.0, 3.0, 1.0).unwrap(),
        test_points: TestPoints::Grid {
            lower: vec![-1.0],
            upper: vec![1.0],
            steps: 5,
        },
    }
}

#[test]
fn regression_on_empty_dataset_is_the_prior() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "# nothing yet\n");
    let path = write_json(dir.path(), "r.json", &cfg);
    execute(&Command::Regression(args(path, dir.path()))).unwrap();
    let (header, rows) = read_csv(&dir.path().join(commands::REGRESSION_FILE));
    assert_eq!(header, ["test_point_0", "mean", "sigma", "lower", "upper"]);
    assert_eq!(rows.len(), 5);
    assert!(column(&rows, 1).iter().all(|&m| m == 0.0));
    assert!(column(&rows, 2).iter().all(|&s| s == 1.0));
}

#[test]
fn regression_band_is_symmetric() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "-0.5,1\n0.1,0\n0.4,1\n0.4,1\n");
    let path = write_json(dir.path(), "r.json", &cfg);
    let summary = execute(&Command::Regression(args(path, dir.path()))).unwrap();
    let w = summary["omega"].as_f64().unwrap();
    let (_, rows) = read_csv(&dir.path().join(commands::REGRESSION_FILE));
    for r in &rows {
        let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
        let (mean, sigma, lower, upper) = (v[1], v[2], v[3], v[4]);
        let half = w * sigma / 2f64.sqrt();
        assert!(((upper - lower) - 2.0 * half).abs() <= 1e-9 * half.max(1.0));
        assert!(((upper + lower) / 2.0 - mean).abs() <= 1e-9 * half.max(1.0));
    }
}

#[test]
fn regression_demo_matches_golden() {
    let dir = TempDir::new().unwrap();
    execute(&Command::Regression(args(configs().join("regression_demo.json"), dir.path()))).unwrap();
    let got = fs::read(dir.path().join(commands::REGRESSION_FILE)).unwrap();
    assert_eq!(got, fs::read(configs().join("golden/regression.csv")).unwrap());
}

#[test]
fn malformed_dataset_row_reports_line() {
    let dir = TempDir::new().unwrap();
    let cfg = regression_config(dir.path(), "0.1,1\n0.2,0\n0.3,abc\n");
    let path = write_json(dir.path(), "r.json", &cfg);
    let err = execute(&Command::Regression(args(path, dir.path()))).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("line 3"), "{err}");

    let cfg = regression_config(dir.path(), "0.1,1\n0.2,1.5\n");
    let path = write_json(dir.path(), "r.json", &cfg);
    let err = execute(&Command::Regression(args(path, dir.path()))).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn configs_round_trip_to_canonical_form() {
    fn check<T: serde::de::DeserializeOwned + serde::Serialize>(file: &str) {
        let text = fs::read_to_string(configs().join(file)).unwrap();
        let first = config::canonical(&config::parse::<T>(&text).unwrap());
        let second = config::canonical(&config::parse::<T>(&first).unwrap());
        assert_eq!(first, second, "{file}");
    }
    check::<BoundsConfig>("bounds_demo.json");
    check::<CoverageConfig>("coverage_bernstein.json");
    check::<CoverageConfig>("coverage_stitched.json");
    check::<BanditConfig>("bandit_demo.json");
    check::<RegressionConfig>("regression_demo.json");
}

#[test]
fn exit_code_classes() {
    assert_eq!(CliError::Config("x".into()).exit_code(), 1);
    assert_eq!(CliError::Library(Error::EmptyArmSet).exit_code(), 1);
    let stalled = Error::NoConvergence {
        iterations: 100,
        grad_norm: 1.0,
    };
    assert_eq!(CliError::Library(stalled.clone()).exit_code(), 2);
    let nested = Error::AtRound {
        round: 3,
        source: Box::new(stalled),
    };
    assert_eq!(CliError::Library(nested).exit_code(), 2);
    assert_eq!(CliError::Acceptance("x".into()).exit_code(), 3);
    let line = CliError::Acceptance("rate\ntoo high".into()).to_json_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "acceptance");
}

fn binary() -> Process {
    Process::new(env!("CARGO_BIN_EXE_snkb"))
}

#[test]
fn binary_rejects_unknown_keys_with_json_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"n": [1], "rho": [1.0], "y": [1.0], "gamma": [0.0], "extra": true}"#).unwrap();
    let out = binary()
        .args(["bounds", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("extra"));
    assert!(!dir.path().join(commands::BOUNDS_FILE).exists());
}

#[test]
fn binary_rejects_invalid_values_before_running() {
    let dir = TempDir::new().unwrap();
    let mut cfg: CoverageConfig = config::load(&configs().join("coverage_smoke.json")).unwrap();
    cfg.reps = 10;
    let path = write_json(dir.path(), "c.json", &cfg);
    let out = binary().arg("coverage").arg("--config").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = binary().arg("bandit").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_runs_with_thread_env() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = binary()
            .env("SNKB_THREADS", threads)
            .arg("coverage")
            .arg("--config")
            .arg(configs().join("coverage_smoke.json"))
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["theorem"], "bernstein-fixed");
    }
    for f in [commands::COVERAGE_FILE, commands::COVERAGE_SUMMARY_FILE, "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}
