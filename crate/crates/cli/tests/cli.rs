use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 3
mc_samples = 5000
[array]
n1 = 16
n2 = 4
[scenario]
paths = 2
samples = 30
r_min_m = 0.3
[em]
restarts = 2
[op]
grid_points = 21
";

fn nearfar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearfar")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_ok(cmd: &str, config: &str, out: &Path) {
    let o = nearfar(&[cmd, "--config", config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Data rows of a CSV written by the runner, header first.
fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().filter(|l| !l.starts_with('#')).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn full_pipeline_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("out");
    for cmd in ["generate", "fit", "op", "verify"] {
        run_ok(cmd, &config, &out);
    }
    let header = read(&out.join("config.toml")).lines().next().unwrap().to_string();
    assert!(header.starts_with("# config_hash=") && header.ends_with(" seed=3"));
    for f in [
        "samples.csv",
        "truth.toml",
        "fit_proposed.toml",
        "fit_far.toml",
        "fit_near.toml",
        "em_trace.csv",
        "op_curves.csv",
    ] {
        assert!(read(&out.join(f)).starts_with(&header), "{f}");
    }
    let samples = csv_rows(&read(&out.join("samples.csv")));
    assert_eq!(samples.len(), 1 + 30 * 64);

    let trace = csv_rows(&read(&out.join("em_trace.csv")));
    assert_eq!(trace[0], ["iter", "Q", "loglik", "param_change", "line_search_failed"]);
    let ll: Vec<f64> = trace[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(!ll.is_empty());
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-8), "{ll:?}");

    let op = csv_rows(&read(&out.join("op_curves.csv")));
    assert_eq!(op[0], ["r_th", "truth", "mc", "proposed", "far", "near"]);
    assert_eq!(op.len(), 22);
    for col in 1..op[0].len() {
        let v: Vec<f64> = op[1..].iter().map(|r| r[col].parse().unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] >= w[0]), "column {} not monotone", op[0][col]);
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("out");
    run_ok("generate", &config, &out);
    let truth = out.join("truth.toml");
    std::fs::write(&truth, read(&truth).replace("source = \"truth\"", "source = \"edited\"")).unwrap();
    let o = nearfar(&["verify", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truth.toml"));
}

#[test]
fn repeated_runs_are_byte_identical_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let mut outputs = Vec::new();
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = dir.path().join(name);
        let o = nearfar(&["generate", "--config", &config, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        outputs.push(read(&out.join("samples.csv")));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn gamma_one_truth_has_two_near_two_far() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    std::fs::write(&config, read(Path::new(&config)).replace("paths = 2", "paths = 4")).unwrap();
    let out = dir.path().join("out");
    run_ok("generate", &config, &out);
    let truth = read(&out.join("truth.toml"));
    assert_eq!(truth.matches("label = \"near\"").count(), 2);
    assert_eq!(truth.matches("label = \"far\"").count(), 2);
}

#[test]
fn scheme_filter_writes_only_em_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    std::fs::write(&config, format!("schemes = [\"proposed\"]\n{}", read(Path::new(&config)))).unwrap();
    let out = dir.path().join("out");
    run_ok("generate", &config, &out);
    run_ok("fit", &config, &out);
    assert!(out.join("fit_proposed.toml").exists() && out.join("em_report.txt").exists());
    assert!(!out.join("fit_far.toml").exists() && !out.join("fit_near.toml").exists());
    run_ok("op", &config, &out);
    assert_eq!(csv_rows(&read(&out.join("op_curves.csv")))[0], ["r_th", "truth", "proposed"]);
}

#[test]
fn failing_scheme_is_isolated_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[baselines]\nfar_grid = [0, 0]\n");
    let out = dir.path().join("out");
    let o_str = out.to_str().unwrap();
    run_ok("generate", &config, &out);
    let fit = nearfar(&["fit", "--config", &config, "--out", o_str]);
    assert_eq!(fit.status.code(), Some(2), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(!out.join("fit_far.toml").exists());
    assert!(out.join("fit_near.toml").exists() && out.join("fit_proposed.toml").exists());
    let status = read(&out.join("fit_status.csv"));
    assert!(status.contains("far,failed,") && status.contains("near,ok,"));
    let op = nearfar(&["op", "--config", &config, "--out", o_str]);
    assert_eq!(op.status.code(), Some(2));
    let rows = csv_rows(&read(&out.join("op_curves.csv")));
    let far = rows[0].iter().position(|c| c == "far").unwrap();
    assert!(rows[1..].iter().all(|r| r[far].is_empty() && !r[far + 1].is_empty()));
    run_ok("verify", &config, &out);
}

#[test]
fn config_errors_exit_one_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[power]\np_t_dbm = 40\nnoise = -96\n");
    let o = nearfar(&["generate", "--config", &config, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("noise") && err.contains("line 16"), "{err}");
}

#[test]
fn fit_without_samples_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let o = nearfar(&["fit", "--config", &config, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("samples.csv"));
}

#[test]
fn reusing_a_directory_with_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("out");
    run_ok("generate", &config, &out);
    let o = nearfar(&["fit", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gamma_sweep_emits_one_curve_set_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[sweep]\naxis = \"gamma\"\nvalues = [0.0, 0.5, 1.0]\n");
    let out = dir.path().join("out");
    run_ok("sweep", &config, &out);
    for v in ["0", "0.5", "1"] {
        assert!(out.join(format!("sweep/gamma={v}/trial_0/op_curves.csv")).exists(), "{v}");
    }
    let summary = csv_rows(&read(&out.join("summary.csv")));
    assert_eq!(summary[0], ["axis", "value", "scheme", "deviation", "std_error", "trials_ok", "trials_failed"]);
    assert_eq!(summary.len(), 1 + 3 * 4);
    for row in &summary[1..] {
        assert!(row[3].parse::<f64>().unwrap() >= 0.0);
    }
    run_ok("verify", &config, &out);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        nearfar_cli::ExperimentConfig::load(&path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 4);
}
