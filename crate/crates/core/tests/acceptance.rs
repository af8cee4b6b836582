//! Acceptance run: each criterion is checked at its stated tolerance and
//! runtime budget, and reported on one `PASS`/`FAIL` line. Criteria 7–9 drive
//! the `maddpm` binary through a full desk-scale experiment.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    bayes_posterior, brute_force_eer, brute_force_tables, gaussian_flow_terminal, gradient_check,
    gradient_check_setup, log_log_slope, rel_err, AdamOracle, GaussianDenoiser,
};
use maddpm::denoiser::{adamw_step, OptimizerState, Preconditioning, ADAM_EPS};
use maddpm::metrics::{eer, parse_score_csv, rank_test_attack_greater, ScoreRecord};
use maddpm::sampler::{ode_reconstruct, SOLVER_SIGMA_MIN};
use maddpm::{make_linear_schedule, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    check(took <= budget, format!("{detail}; {:.2} s (budget {:.0} s)", took.as_secs_f64(), budget.as_secs_f64()))
}

fn schedule_tables() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_end) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(1..=1000);
        let floor = ((1.0f64 - 1e-4).powi(-(n as i32)) - 1.0).sqrt();
        let sigma_max = rng.random_range(floor * 1.5 + 0.05..20.0);
        let s = make_linear_schedule(n, sigma_max).map_err(|e| e.to_string())?;
        let (abar, sigma) = brute_force_tables(s.betas());
        for t in 0..n {
            worst = worst.max(rel_err(s.alpha_bars()[t], abar[t])).max(rel_err(s.sigmas()[t], sigma[t]));
        }
        worst_end = worst_end.max(rel_err(s.sigma_at(n), sigma_max));
    }
    if worst > 1e-10 || worst_end > 1e-6 {
        return Err(format!("table error {worst:.2e}, terminal σ error {worst_end:.2e}"));
    }
    within(Duration::from_secs(1), start, format!("max table rel err {worst:.2e}, terminal σ rel err {worst_end:.2e}"))
}

fn posterior() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let floor = ((1.0f64 - 1e-4).powi(-(n as i32)) - 1.0).sqrt();
        let s = make_linear_schedule(n, rng.random_range(floor * 1.5 + 0.05..12.0)).map_err(|e| e.to_string())?;
        let (abar, _) = brute_force_tables(s.betas());
        let t = rng.random_range(1..=n);
        let (x0, xt) = (rng.random_range(-2.0..2.0), rng.random_range(-4.0..4.0));
        let abar_prev = if t == 1 { 1.0 } else { abar[t - 2] };
        let (m, v) = bayes_posterior(x0, xt, s.betas()[t - 1], abar_prev);
        let post = s
            .posterior_params(&Tensor::scalar(xt), &Tensor::scalar(x0), t)
            .map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(post.mean.data()[0], m)).max(rel_err(post.variance, v));
    }
    if worst > 1e-8 {
        return Err(format!("max rel err {worst:.2e}"));
    }
    within(Duration::from_secs(1), start, format!("max rel err {worst:.2e} over 1000 cases"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut params = 0;
    for pre in [Preconditioning::default(), Preconditioning::Epsilon] {
        let (model, xs, sigmas, ns) = gradient_check_setup(pre, 21);
        params = model.param_count();
        let refs: Vec<&Tensor> = xs.iter().collect();
        worst = worst.max(gradient_check(&model, &refs, &sigmas, &ns, 1e-4, 1e-6));
    }
    if worst > 1e-3 {
        return Err(format!("max rel err {worst:.2e}"));
    }
    within(Duration::from_secs(30), start, format!("{params} params, max rel err {worst:.2e}"))
}

fn solver_order() -> Outcome {
    let start = Instant::now();
    let steps = [5, 10, 20, 40];
    let (y0, v, s0) = (3.0, 0.25, 8.0);
    let d = GaussianDenoiser {
        variance: v,
        sigma_ceiling: s0,
    };
    let exact = gaussian_flow_terminal(y0, v, s0, SOLVER_SIGMA_MIN);
    let mut errs = Vec::new();
    for &n in &steps {
        let out = ode_reconstruct(&d, &Tensor::scalar(y0), s0, n).map_err(|e| e.to_string())?;
        errs.push((out.data()[0] - exact).abs());
    }
    let order = -log_log_slope(&steps, &errs);
    if order < 1.8 || errs[3] >= 1e-3 {
        return Err(format!("order {order:.3}, error at 40 steps {:.2e}", errs[3]));
    }
    within(Duration::from_secs(10), start, format!("order {order:.3}, error at 40 steps {:.2e}", errs[3]))
}

fn optimizer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let cfg = TrainConfig {
            learning_rate: 10f64.powf(rng.random_range(-5.0..-1.0)),
            beta1: rng.random_range(0.5..0.99),
            beta2: rng.random_range(0.9..0.9999),
            weight_decay: rng.random_range(0.0..0.1),
            ..TrainConfig::default()
        };
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut q = p.clone();
        let mut state = OptimizerState::new(n);
        let mut oracle = AdamOracle::new(n);
        for _ in 0..rng.random_range(1..6) {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            adamw_step(&mut p, &g, &mut state, &cfg).map_err(|e| e.to_string())?;
            oracle.step(&mut q, &g, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay, ADAM_EPS);
        }
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let d = serde_json::to_value(TrainConfig::default()).map_err(|e| e.to_string())?;
    let defaults = [("learning_rate", 1e-4), ("beta1", 0.95), ("beta2", 0.999), ("weight_decay", 1e-3)];
    let defaults_ok = defaults.iter().all(|(k, v)| d[k].as_f64() == Some(*v));
    if worst > 1e-10 || !defaults_ok {
        return Err(format!("max err {worst:.2e}, defaults {d}"));
    }
    within(Duration::from_secs(1), start, format!("max err {worst:.2e}; defaults lr=1e-4 β1=0.95 β2=0.999 wd=1e-3"))
}

fn eer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let n = rng.random_range(2..=50);
        let coarse = rng.random_bool(0.5);
        let mut recs: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                let label = if i == 0 || (i > 1 && rng.random_bool(0.5)) {
                    maddpm::metrics::Label::Attack
                } else {
                    maddpm::metrics::Label::Bonafide
                };
                let s = if coarse { rng.random_range(0..6) as f64 } else { rng.random_range(-3.0..3.0) };
                ScoreRecord::new(format!("s{i}"), label, s)
            })
            .collect();
        let got = eer(&recs).map_err(|e| e.to_string())?.0;
        let want = brute_force_eer(&recs).0;
        if got != want {
            return Err(format!("case {case}: eer {got} vs brute force {want}"));
        }
        for r in &mut recs {
            r.score = (0.7 * r.score).exp() * 3.0 + 10.0;
        }
        if eer(&recs).map_err(|e| e.to_string())?.0 != got {
            return Err(format!("case {case}: EER changed under a monotone transform"));
        }
    }
    within(Duration::from_secs(5), start, "1000 instances exact, rank invariant".into())
}

// ---------------------------------------------------------------------------
// End-to-end run through the binary.

const BIN: &str = env!("CARGO_BIN_EXE_maddpm");

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn maddpm(args: &[&str]) -> Result<(), String> {
    let cfg = desk_config();
    let mut full = vec!["--config", cfg.to_str().unwrap()];
    full.extend_from_slice(args);
    let out = Command::new(BIN)
        .args(&full)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`maddpm {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

struct Run {
    dir: PathBuf,
    train_secs: f64,
}

impl Run {
    fn path(&self, name: &str) -> String {
        self.dir.join(name).to_str().unwrap().to_owned()
    }
}

/// Synthesises, trains both branches, scores fused and per-branch, and
/// evaluates every score file.
fn desk_experiment(dir: &Path) -> Result<Run, String> {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_owned();
    maddpm(&["synth", "--bona", "2000", "--morph", "0", "--seed", "1", "--out", &p("train")])?;
    maddpm(&["synth", "--bona", "200", "--morph", "200", "--seed", "2", "--out", &p("test")])?;
    let start = Instant::now();
    maddpm(&["train", "--branch", "pixel", "--data", &p("train"), "--out", &p("pixel.ckpt")])?;
    maddpm(&["train", "--branch", "feature", "--data", &p("train"), "--out", &p("feature.ckpt")])?;
    let train_secs = start.elapsed().as_secs_f64();
    for (branches, name) in [("pixel,feature", "fused"), ("pixel", "pixel"), ("feature", "feature")] {
        let csv = p(&format!("scores_{name}.csv"));
        maddpm(&[
            "score", "--input", &p("test"), "--pixel-ckpt", &p("pixel.ckpt"), "--feature-ckpt",
            &p("feature.ckpt"), "--branches", branches, "--out", &csv,
        ])?;
        maddpm(&["eval", "--scores", &csv, "--out", &p(&format!("report_{name}.json"))])?;
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        train_secs,
    })
}

fn read(path: &str) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
}

fn report_eer(run: &Run, name: &str) -> Result<f64, String> {
    let v: serde_json::Value =
        serde_json::from_str(&read(&run.path(&format!("report_{name}.json")))?).map_err(|e| e.to_string())?;
    v["eer"].as_f64().ok_or_else(|| "report has no eer".to_string())
}

fn detection(run: &Run) -> Outcome {
    let recs = parse_score_csv(&read(&run.path("scores_fused.csv"))?).map_err(|e| e.to_string())?;
    let reported = report_eer(run, "fused")?;
    let (brute, _, _) = brute_force_eer(&recs);
    let (_, p) = rank_test_attack_greater(&recs).map_err(|e| e.to_string())?;
    let detail = format!(
        "fused EER {reported:.4} (brute force {brute:.4}), rank-test p {p:.2e}, training {:.0} s",
        run.train_secs
    );
    check(reported <= 0.30 && reported == brute && p < 0.01 && run.train_secs <= 1800.0, detail)
}

/// Columns after the label, keyed by sample id.
fn columns(text: &str) -> Result<Vec<(String, Vec<f64>)>, String> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let v = f[2..].iter().map(|s| s.parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
            Ok((f[0].to_owned(), v))
        })
        .collect()
}

fn ablation(run: &Run) -> Outcome {
    let fused = columns(&read(&run.path("scores_fused.csv"))?)?;
    let pixel = columns(&read(&run.path("scores_pixel.csv"))?)?;
    let feature = columns(&read(&run.path("scores_feature.csv"))?)?;
    if fused.len() != 400 || pixel.len() != 400 || feature.len() != 400 {
        return Err("expected 400 rows in every score file".into());
    }
    for ((f, p), q) in fused.iter().zip(&pixel).zip(&feature) {
        let [total, pt, ft] = f.1[..] else {
            return Err(format!("{}: fused row needs score,pixel,feature", f.0));
        };
        if total != pt + ft {
            return Err(format!("{}: {total} ≠ {pt} + {ft}", f.0));
        }
        if p.0 != f.0 || q.0 != f.0 || p.1 != [pt, pt] || q.1 != [ft, ft] {
            return Err(format!("{}: single-branch run disagrees with the fused run", f.0));
        }
    }
    let (ep, ef, eb) = (report_eer(run, "pixel")?, report_eer(run, "feature")?, report_eer(run, "fused")?);
    Ok(format!("EER pixel {ep:.4} / feature {ef:.4} / fused {eb:.4}; score = pixel + feature on all 400 rows"))
}

fn determinism(a: &Run, b: &Run) -> Outcome {
    let mut files = Vec::new();
    for name in ["fused", "pixel", "feature"] {
        files.push(format!("scores_{name}.csv"));
        files.push(format!("report_{name}.json"));
    }
    for f in &files {
        if read(&a.path(f))? != read(&b.path(f))? {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} score/report files byte-identical", files.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    };

    report(1, "schedule tables", schedule_tables());
    report(2, "posterior oracle", posterior());
    report(3, "gradient check", gradients());
    report(4, "solver order", solver_order());
    report(5, "optimizer oracle", optimizer());
    report(6, "EER oracle", eer_oracle());

    let root = tempfile::tempdir().expect("temporary directory");
    let first = desk_experiment(&root.path().join("run1"));
    match &first {
        Ok(run) => {
            report(7, "desk-scale detection", detection(run));
            report(8, "ablation structure", ablation(run));
        }
        Err(e) => {
            report(7, "desk-scale detection", Err(e.clone()));
            report(8, "ablation structure", Err("no run".into()));
        }
    }
    let second = desk_experiment(&root.path().join("run2"));
    match (&first, &second) {
        (Ok(a), Ok(b)) => report(9, "determinism", determinism(a, b)),
        (_, Err(e)) => report(9, "determinism", Err(e.clone())),
        _ => report(9, "determinism", Err("first run failed".into())),
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
