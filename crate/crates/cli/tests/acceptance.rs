//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nearfar_cli::config::{ExperimentConfig, SweepAxis, SweepSection};
use nearfar_cli::pipeline::{self, SweepPoint};
use nearfar_cli::{run, Command, Options};
use nearfar_core::channel::{
    draw_scenario, mean_channel, sample_channels, ChannelModelParams, FieldHypothesis, PathParams,
};
use nearfar_core::em::{
    aligned_labels, em_fit, hypothesis_logliks, match_paths, posterior_z, q_function, q_gradient, EmConfig, PosteriorZ,
};
use nearfar_core::outage::{
    dbm_to_watts, noncentral_chi2_cdf, outage_probability_analytic, outage_probability_mc, OpQuery,
};
use nearfar_core::rng::StreamKey;
use nearfar_core::steering::{ArrayGeometry, Field};
use nearfar_core::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

const P_T_DBM: f64 = 40.0;
const NOISE_DBM: f64 = -96.0;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("runtime {:.1}s exceeds {}s", t.as_secs_f64(), limit.as_secs()))
}

fn geometry(n1: usize, n2: usize) -> ArrayGeometry {
    ArrayGeometry::half_wavelength(n1, n2, 0.01).unwrap()
}

fn gradient_fd() -> Check {
    const INSTANCES: usize = 50;
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let g = geometry(8, 4);
    let rd = g.rayleigh_distance();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let sigma2 = rng.random_range(0.3..2.0);
        let paths = (0..2)
            .map(|_| {
                let beta = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                PathParams::new(
                    beta,
                    rng.random_range(1.1..2.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.2 * rd..rd),
                )
            })
            .collect();
        let params = ChannelModelParams::new(paths, sigma2).unwrap();
        // One near and one far path generate the data.
        let z = FieldHypothesis::from_index(1 + i % 2, 2);
        let h = sample_channels(&g, &params, &z, 10, StreamKey::new(i as u64)).unwrap();
        let post = PosteriorZ::from_log_weights((0..4).map(|_| rng.random_range(-3.0..0.0)).collect()).unwrap();
        let analytic = q_gradient(&g, &params, &post, &h, sigma2).unwrap().to_real();
        for (k, a) in analytic.iter().enumerate() {
            let q_at = |delta: f64| {
                let mut p = params.clone();
                let path = &mut p.paths[k / 5];
                match k % 5 {
                    0 => path.theta += delta,
                    1 => path.phi += delta,
                    2 => path.r += delta,
                    3 => path.beta.re += delta,
                    _ => path.beta.im += delta,
                }
                q_function(&g, &p, &post, &h, sigma2).unwrap()
            };
            let numeric = (q_at(STEP) - q_at(-STEP)) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            ensure(rel <= TOL, || format!("instance {i} component {k}: analytic {a} vs numeric {numeric}"))?;
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{INSTANCES} instances, worst relative error {worst:.2e} (tol {TOL:e})"))
}

fn analytic_vs_mc() -> Check {
    const SCENARIOS: u64 = 5;
    const SAMPLES: usize = 100_000;
    let start = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.op.grid_points = 11;
    cfg.op.grid_sigmas = 2.5;
    let geom = cfg.geometry().unwrap();
    let base = cfg.scenario_config(geom).unwrap();
    let p_t = dbm_to_watts(P_T_DBM);
    let noise = dbm_to_watts(NOISE_DBM);
    let mut worst = 0.0f64;
    for s in 0..SCENARIOS {
        let mut sc = base.clone();
        sc.k_db = [0.0, 5.0, 10.0, -5.0, 20.0][s as usize];
        let (params, z) = draw_scenario(&sc, &mut ChaCha8Rng::seed_from_u64(200 + s)).unwrap();
        let mean = mean_channel(&geom, &params, &z).unwrap();
        let rates = pipeline::auto_rates(&cfg, std::slice::from_ref(&mean), params.sigma2);
        for &r in &rates {
            let q = OpQuery::new(r, p_t, noise).unwrap();
            let a = outage_probability_analytic(&mean, params.sigma2, &q).unwrap();
            let m = outage_probability_mc(&geom, &params, &z, &q, SAMPLES, StreamKey::new(300 + s)).unwrap();
            let se = (a * (1.0 - a) / SAMPLES as f64).sqrt();
            let tol = 0.01f64.max(3.0 * se);
            worst = worst.max((a - m).abs());
            ensure((a - m).abs() <= tol, || format!("scenario {s} R_th {r}: analytic {a} vs mc {m}"))?;
        }
    }
    within(Duration::from_secs(300), start)?;
    Ok(format!("{SCENARIOS} scenarios x 11 rates, worst |analytic - mc| {worst:.4}"))
}

fn chi2_cdf() -> Check {
    const DRAWS: usize = 1_000_000;
    const TOL: f64 = 0.003;
    let mut worst_closed = 0.0f64;
    for i in 0..=200 {
        let x = 0.05 * i as f64;
        let err = (noncentral_chi2_cdf(x, 2.0, 0.0).unwrap() - (1.0 - (-x / 2.0).exp())).abs();
        worst_closed = worst_closed.max(err);
    }
    ensure(worst_closed <= 1e-10, || format!("central k=2 error {worst_closed:e}"))?;
    let mut worst = 0.0f64;
    for (i, &k) in [2.0f64, 8.0, 64.0].iter().enumerate() {
        for (j, &lambda) in [0.0f64, 1.0, 5.0, 20.0].iter().enumerate() {
            // (Z + √λ)² + χ²(k-1): exact non-central draw, independent of
            // the series under test.
            let mut rng = ChaCha8Rng::seed_from_u64(400 + (4 * i + j) as u64);
            let central = ChiSquared::new(k - 1.0).unwrap();
            let mut draws: Vec<f64> = (0..DRAWS)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z + lambda.sqrt()).powi(2) + central.sample(&mut rng)
                })
                .collect();
            draws.sort_by(f64::total_cmp);
            let mean = k + lambda;
            let sd = (2.0 * (k + 2.0 * lambda)).sqrt();
            for t in [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0] {
                let x = (mean + t * sd).max(0.01);
                let empirical = draws.partition_point(|&d| d <= x) as f64 / DRAWS as f64;
                let cdf = noncentral_chi2_cdf(x, k, lambda).unwrap();
                worst = worst.max((cdf - empirical).abs());
                ensure((cdf - empirical).abs() <= TOL, || {
                    format!("k={k} lambda={lambda} x={x}: {cdf} vs {empirical}")
                })?;
            }
        }
    }
    Ok(format!("closed-form error {worst_closed:.1e}, worst sampling gap {worst:.4} over 12 (k, lambda) pairs"))
}

fn em_recovery() -> Check {
    const SEEDS: u64 = 3;
    let start = Instant::now();
    let g = geometry(32, 8);
    let rd = g.rayleigh_distance();
    let cfg = EmConfig { restarts: 10, ..EmConfig::default() };
    let mut details = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut path = |r: f64| {
            let gain = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) / 2f64.sqrt();
            PathParams::new(
                gain * (0.01 / (4.0 * PI * r)),
                rng.random_range(PI / 3.0..2.0 * PI / 3.0),
                rng.random_range(-PI / 6.0..PI / 6.0),
                r,
            )
        };
        let paths = vec![path(0.1 * rd), path(2.0 * rd)];
        let z = FieldHypothesis::new(vec![Field::Near, Field::Far]);
        let mut truth = ChannelModelParams::new(paths, 1.0).unwrap();
        let mean = mean_channel(&g, &truth, &z).unwrap();
        truth.sigma2 = nearfar_core::channel::sigma2_for_k(&mean, 20.0, g.len()).unwrap();
        let h = sample_channels(&g, &truth, &z, 100, StreamKey::new(600 + seed)).unwrap();
        let res = em_fit(&g, &h, 2, truth.sigma2, &cfg).unwrap();
        for w in res.trace.windows(2) {
            ensure(w[1].loglik >= w[0].loglik - 1e-8, || {
                format!("seed {seed}: loglik fell from {} to {} at iteration {}", w[0].loglik, w[1].loglik, w[1].iter)
            })?;
        }
        let est = mean_channel(&g, &res.theta_hat, &res.map_labels).unwrap();
        let err = est.iter().zip(&mean).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
            / mean.iter().map(|m| m.norm_sqr()).sum::<f64>().sqrt();
        let perm = match_paths(&truth.paths, &res.theta_hat.paths).unwrap();
        let mass = res.posterior.prob(&aligned_labels(&z, &perm));
        ensure(err <= 0.05, || format!("seed {seed}: mean-channel relative error {err}"))?;
        ensure(mass >= 0.9, || format!("seed {seed}: posterior mass {mass} on the true labels"))?;
        details.push(format!("err {err:.4} mass {mass:.3}"));
    }
    within(Duration::from_secs(600), start)?;
    Ok(format!("{SEEDS} scenarios: {}", details.join("; ")))
}

fn sweep(axis: SweepAxis, values: &[f64]) -> Vec<SweepPoint> {
    let mut cfg = ExperimentConfig::desk();
    cfg.sweep = Some(SweepSection { axis, values: values.to_vec(), trials: 4 });
    cfg.validate().unwrap();
    let (points, _) = pipeline::run_sweep(&cfg).unwrap();
    for p in &points {
        assert!(p.failures.is_empty(), "{} = {}: {:?}", axis.as_str(), p.value, p.failures);
    }
    points
}

fn dev(p: &SweepPoint, scheme: &str) -> f64 {
    p.mean_deviation(scheme).unwrap_or(f64::INFINITY)
}

fn describe(points: &[SweepPoint]) -> String {
    points
        .iter()
        .map(|p| format!("{}: P {:.4} F {:.4} N {:.4}", p.value, dev(p, "proposed"), dev(p, "far"), dev(p, "near")))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn proposed_is_lowest(points: &[SweepPoint], axis: &str) -> Result<(), String> {
    for p in points {
        let (pr, f, n) = (dev(p, "proposed"), dev(p, "far"), dev(p, "near"));
        ensure(pr <= f && pr <= n, || format!("{axis} = {}: proposed {pr} vs far {f}, near {n}", p.value))?;
    }
    Ok(())
}

fn k_sweep_trend() -> Check {
    // Ordered 10 dB → 0 dB.
    let points = sweep(SweepAxis::KDb, &[10.0, 5.0, 0.0]);
    for scheme in ["far", "near"] {
        for w in points.windows(2) {
            ensure(dev(&w[1], scheme) < dev(&w[0], scheme), || {
                format!(
                    "{scheme} deviation rose from {} at K={} to {} at K={}",
                    dev(&w[0], scheme),
                    w[0].value,
                    dev(&w[1], scheme),
                    w[1].value
                )
            })?;
        }
    }
    proposed_is_lowest(&points, "K")?;
    Ok(describe(&points))
}

fn n1_gamma_trend() -> Check {
    let n1 = sweep(SweepAxis::N1, &[16.0, 32.0, 64.0]);
    proposed_is_lowest(&n1, "N1")?;
    let gamma = sweep(SweepAxis::Gamma, &[0.0, 0.5, 1.0]);
    proposed_is_lowest(&gamma, "gamma")?;
    for w in gamma.windows(2) {
        ensure(dev(&w[1], "far") >= dev(&w[0], "far"), || {
            format!(
                "far deviation fell from {} at gamma={} to {} at gamma={}",
                dev(&w[0], "far"),
                w[0].value,
                dev(&w[1], "far"),
                w[1].value
            )
        })?;
    }
    Ok(format!("N1 [{}]; gamma [{}]", describe(&n1), describe(&gamma)))
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_stability() -> Check {
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("experiment.toml");
    std::fs::write(
        &config,
        "seed = 7\nmc_samples = 20000\n[scenario]\npaths = 2\n[em]\nrestarts = 2\n\
         [sweep]\naxis = \"gamma\"\nvalues = [0.0, 1.0]\ntrials = 1\n",
    )
    .unwrap();
    let mut trees = Vec::new();
    for rep in 0..2 {
        let out = work.path().join(format!("run{rep}"));
        let opts = Options { config: Some(config.clone()), out: Some(out.clone()), ..Options::default() };
        for cmd in [Command::Generate, Command::Fit, Command::Op, Command::Sweep, Command::Verify] {
            let (status, msgs) = run(cmd, &opts).map_err(|e| format!("{cmd:?}: {e}"))?;
            ensure(status.code() == 0, || format!("{cmd:?} exit {}: {msgs:?}", status.code()))?;
        }
        trees.push(read_tree(&out));
    }
    ensure(trees[0].len() > 10, || format!("only {} files written", trees[0].len()))?;
    ensure(trees[0] == trees[1], || "repeated runs differ".into())?;

    // Log-domain posterior under extreme spreads.
    let weights = vec![0.0, -1e5, -5e4, 3e4 - 1e5];
    let post = PosteriorZ::from_log_weights(weights).map_err(|e| e.to_string())?;
    let total: f64 = post.probs().sum();
    ensure(post.log_probs().iter().all(|l| !l.is_nan() && *l != f64::INFINITY), || "NaN or +inf log weight".into())?;
    ensure((total - 1.0).abs() < 1e-12 && (post.probs().next().unwrap() - 1.0).abs() < 1e-12, || {
        format!("posterior sums to {total}")
    })?;
    let g = geometry(32, 8);
    let rd = g.rayleigh_distance();
    let truth = ChannelModelParams::new(
        vec![
            PathParams::new(Complex64::new(1.0, 0.0), 1.4, 0.2, 0.1 * rd),
            PathParams::new(Complex64::new(0.0, 1.0), 1.8, -0.3, 2.0 * rd),
        ],
        1e-4,
    )
    .unwrap();
    let z = FieldHypothesis::new(vec![Field::Near, Field::Far]);
    let h = sample_channels(&g, &truth, &z, 100, StreamKey::new(9)).unwrap();
    let lls = hypothesis_logliks(&g, &h, &truth).unwrap();
    let spread =
        lls.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - lls.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    ensure(spread >= 1e5, || format!("likelihood spread only {spread} nats"))?;
    let post = posterior_z(&g, &h, &truth).map_err(|e| e.to_string())?;
    ensure(post.probs().all(f64::is_finite) && post.log_probs().iter().all(|l| !l.is_nan()), || {
        "non-finite posterior".into()
    })?;
    ensure(post.prob(&z) > 0.999, || format!("true labels get {}", post.prob(&z)))?;
    Ok(format!("{} files byte-identical across runs; posterior finite at {spread:.3e}-nat spread", trees[0].len()))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient matches central finite differences", gradient_fd),
        ("analytic outage matches Monte Carlo", analytic_vs_mc),
        ("non-central chi-squared CDF", chi2_cdf),
        ("EM monotonicity and recovery", em_recovery),
        ("K sweep deviation trend", k_sweep_trend),
        ("N1 and gamma sweep trends", n1_gamma_trend),
        ("determinism and posterior stability", determinism_and_stability),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
