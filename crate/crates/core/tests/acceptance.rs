//! Acceptance suite. Prints one PASS, FAIL or SKIP line per criterion.
//!
//! Deterministic criteria (gradients, closed forms, doubly robust oracle,
//! determinism, invariants) fail the process. Training-outcome criteria are
//! reported but only fail the process with `DRVIDAL_ACCEPTANCE_STRICT=1`,
//! since at desk scale they measure the method rather than the code.
//!
//! `DRVIDAL_IHDP_DIR` points at a directory of `ihdp_npci_<r>.csv` files
//! (one-based `r`); without it the IHDP criterion is skipped.

mod common;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{brute, losses, TOLERANCE};
use drvidal_core::autodiff::{Module, Tensor};
use drvidal_core::cfgan::{gan_losses, replace_factual, GanBatch, GanConfig, GanModels, LossWeights};
use drvidal_core::datagen::{cevae_true_ate, gen_cevae, split_indices, CevaeProcess, SplitSpec};
use drvidal_core::drhead::{dr_ate_estimate, dr_outcomes, factual_counterfactual, DrPredictions};
use drvidal_core::experiment::{
    compare_dr_vs_nondr, read_realizations_csv, run_experiment, score, train_pipeline, write_report, DataSource,
    ExperimentConfig, Preset, RunResult, Summary,
};
use drvidal_core::metrics::{ate_error, att_and_error, pehe, policy_risk};
use drvidal_core::rng::{standard_normal, stream};
use drvidal_core::vae::kl_standard_normal;
use rand::Rng;

/// Population ATE of the proxy-confounder process, to four decimals.
const CEVAE_ATE: f64 = 0.9738;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome {
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            detail,
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Outcome {
            verdict: Verdict::Skip,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u8,
    name: &'static str,
    /// Failing a strict criterion fails the process.
    strict: bool,
    run: fn() -> Outcome,
}

fn gradient_suite() -> Outcome {
    let checks = losses::all();
    let (worst_name, worst) = checks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let failing: Vec<&str> = checks.iter().filter(|c| c.1 >= TOLERANCE).map(|c| c.0.as_str()).collect();
    Outcome::check(
        failing.is_empty(),
        format!(
            "{} fixtures, worst relative error {worst:.2e} ({worst_name}), failing {failing:?}",
            checks.len()
        ),
    )
}

fn closed_forms() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = stream(2024, 1);

    // KL against -1/2 Σ (1 + ln σ² - μ² - σ²), per row.
    let mut kl_worst: f64 = 0.0;
    for _ in 0..500 {
        let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..9));
        let mu: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.05..4.0)).collect();
        let oracle = -0.5
            * mu.iter()
                .zip(&sigma)
                .map(|(m, s)| 1.0 + (s * s).ln() - m * m - s * s)
                .sum::<f64>()
            / rows as f64;
        let got = kl_standard_normal(
            &Tensor::matrix(rows, cols, mu).unwrap(),
            &Tensor::matrix(rows, cols, sigma).unwrap(),
        )
        .unwrap();
        kl_worst = kl_worst.max((got - oracle).abs() / oracle.abs().max(1.0));
    }
    if kl_worst > 1e-12 {
        problems.push(format!("KL off by {kl_worst:e}"));
    }

    // Doubly robust outcomes by hand substitution.
    let one = |y0: f64, y1: f64, pi: f64, mu: f64, t: f64| {
        let p = DrPredictions {
            y0: vec![y0],
            y1: vec![y1],
            pi: vec![pi],
            mu: vec![mu],
        };
        dr_outcomes(&p, &[t]).unwrap().0[0]
    };
    let treated = one(0.0, 2.0, 0.8, 1.5, 1.0);
    if treated != (2.0 - (1.0 - 0.8) * 1.5) / 0.8 || (treated - 2.125).abs() > 1e-12 {
        problems.push(format!("treated DR outcome {treated}"));
    }
    let control = one(3.0, 0.0, 0.5, 0.0, 0.0);
    if control != 6.0 {
        problems.push(format!("control DR outcome {control}"));
    }
    let limit = one(0.0, 2.0, 1.0 - 1e-9, 7.0, 1.0);
    if (limit - 2.0).abs() > 1e-7 {
        problems.push(format!("DR outcome at the clamp boundary {limit}"));
    }

    // Doubly robust ATE by hand substitution.
    let single = dr_ate_estimate(&[2.0], &[1.0], &[0.5], &[1.0]).unwrap();
    if single != 4.0 {
        problems.push(format!("single-sample DR ATE {single}"));
    }
    let y: Vec<f64> = (0..50).map(|_| f64::from(rng.random_bool(0.4))).collect();
    let t: Vec<f64> = (0..50).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let ipw = y.iter().zip(&t).map(|(y, t)| 2.0 * y * t - 2.0 * y * (1.0 - t)).sum::<f64>() / 50.0;
    let collapsed = dr_ate_estimate(&y, &t, &[0.5; 50], &[0.0; 50]).unwrap();
    if collapsed != ipw {
        problems.push(format!("randomized DR ATE {collapsed} vs IPW {ipw}"));
    }

    // Metrics against direct enumeration.
    let mut mismatches = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..=6);
        let draw = |rng: &mut drvidal_core::rng::Rng| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (tau, y1, y0) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let pred: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let mut e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        e[0] = true;
        let att = att_and_error(&y1, &y0, &t, &y, &e).ok().map(|(_, err)| err);
        if pehe(&tau, &pred).unwrap().0 != brute::pehe(&tau, &pred)
            || ate_error(&tau, &pred).unwrap() != brute::ate_error(&tau, &pred)
            || policy_risk(&y1, &y0, &t, &y, &e).unwrap() != brute::policy_risk(&y1, &y0, &t, &y, &e)
            || att != brute::att_error(&y1, &y0, &t, &y, &e)
        {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        problems.push(format!("{mismatches} metric fixtures disagree with enumeration"));
    }
    let detail = if problems.is_empty() {
        format!("KL worst {kl_worst:.1e}, DR fixtures exact, 2000 metric fixtures exact")
    } else {
        problems.join("; ")
    };
    Outcome::check(problems.is_empty(), detail)
}

fn doubly_robust_oracle() -> Outcome {
    let (ds, z) = CevaeProcess::default().generate_with_latents(100_000, 31).unwrap();
    let truth = cevae_true_ate();
    let true_pi: Vec<f64> = z.iter().map(|&z| CevaeProcess::propensity(z)).collect();
    let true_mu: Vec<f64> = z.iter().zip(&ds.t).map(|(&z, &t)| CevaeProcess::outcome_mean(z, t)).collect();
    let n = ds.n();
    let a = dr_ate_estimate(&ds.y_f, &ds.t, &true_pi, &vec![0.0; n]).unwrap();
    let b = dr_ate_estimate(&ds.y_f, &ds.t, &vec![0.5; n], &true_mu).unwrap();
    let ok = (truth - CEVAE_ATE).abs() < 5e-5 && (a - truth).abs() < 0.02 && (b - truth).abs() < 0.02;
    Outcome::check(
        ok,
        format!("analytic ATE {truth:.4}; correct π/wrong μ {a:.4}; marginal π/correct μ {b:.4}; tolerance 0.02"),
    )
}

fn desk_config(data: DataSource, gan_epochs: usize, dr_epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Synthetic);
    cfg.data = data;
    cfg.gan.epochs = gan_epochs;
    cfg.dr.epochs = dr_epochs;
    cfg
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Out-of-sample ATE estimate of one full-pipeline run.
fn pipeline_ate(cfg: &ExperimentConfig, realization: usize) -> f64 {
    let p = train_pipeline(cfg, realization).unwrap();
    score(&p).unwrap().out_sample.ate_estimate
}

fn synthetic_end_to_end() -> Outcome {
    let seeds = env_usize("DRVIDAL_ACCEPTANCE_SEEDS", 3);
    let (gan_epochs, dr_epochs) = (10, 10);
    let mut mean_error = Vec::new();
    let mut large = Vec::new();
    let mut detail = String::new();
    for n in [1_000, 10_000] {
        let cfg = desk_config(DataSource::Cevae { n }, gan_epochs, dr_epochs);
        let estimates: Vec<f64> = (0..seeds).map(|r| pipeline_ate(&cfg, r)).collect();
        let err = estimates.iter().map(|e| (e - CEVAE_ATE).abs()).sum::<f64>() / seeds as f64;
        let _ = write!(detail, "n={n}: ATE {estimates:.3?}, mean |error| {err:.3}; ");
        mean_error.push(err);
        if n == 10_000 {
            large = estimates;
        }
    }
    let within = (large[0] - CEVAE_ATE).abs() <= 0.15;
    let trend = mean_error[1] < mean_error[0];
    let _ = write!(detail, "within 0.15: {within}, error decreases with n: {trend}");

    // Reference point, not part of the verdict: the same run without the
    // doubly robust loss.
    let mut ablated = desk_config(DataSource::Cevae { n: 10_000 }, gan_epochs, dr_epochs);
    ablated.ablation.without_dr_loss = true;
    let _ = write!(detail, "; without DR loss n=10000 ATE {:.3}", pipeline_ate(&ablated, 0));
    Outcome::check(within && trend, detail)
}

fn ihdp() -> Outcome {
    let Ok(dir) = std::env::var("DRVIDAL_IHDP_DIR") else {
        return Outcome::skip("DRVIDAL_IHDP_DIR not set; synthetic criteria stand in");
    };
    let mut cfg = ExperimentConfig::preset(Preset::Ihdp);
    if let DataSource::Csv { path, .. } = &mut cfg.data {
        *path = PathBuf::from(dir).join("ihdp_npci_{realization1}.csv").display().to_string();
    }
    cfg.realizations = env_usize("DRVIDAL_IHDP_REALIZATIONS", 10);
    cfg.gan.epochs = env_usize("DRVIDAL_IHDP_GAN_EPOCHS", 50);
    cfg.dr.epochs = env_usize("DRVIDAL_IHDP_DR_EPOCHS", 50);
    match run_experiment(&cfg) {
        Ok(res) => {
            let s = Summary::of(&res);
            let pehe = s.metrics["out_sqrt_pehe"];
            Outcome::check(
                pehe.mean <= 1.0 && cfg.realizations >= 10,
                format!(
                    "{} realizations, out-of-sample sqrt PEHE {:.3} ± {:.3} (bound 1.0)",
                    pehe.count, pehe.mean, pehe.std
                ),
            )
        }
        Err(e) => Outcome::check(false, format!("run failed: {e}")),
    }
}

fn ablation_direction() -> Outcome {
    let realizations = env_usize("DRVIDAL_ABLATION_REALIZATIONS", 10);
    let mut full = desk_config(DataSource::Drvidal { n: 1_000 }, 10, 10);
    full.realizations = realizations;
    full.parallel = false;
    let mut ablated = full.clone();
    ablated.ablation.without_dr_loss = true;
    let run = |cfg: &ExperimentConfig| run_experiment(cfg).unwrap();
    let (a, b) = (run(&full), run(&ablated));
    let mean = |r: &RunResult| Summary::of(r).metrics["out_sqrt_pehe"];
    let (ma, mb) = (mean(&a), mean(&b));
    let wins = compare_dr_vs_nondr(&a, &b).unwrap();
    Outcome::check(
        ma.mean <= mb.mean && realizations >= 10,
        format!(
            "gen_drvidal n=1000, {realizations} paired realizations: out-of-sample sqrt PEHE full {:.3} ± {:.3}, without DR loss {:.3} ± {:.3}; factual-error wins {}/{} (ties {})",
            ma.mean, ma.std, mb.mean, mb.std, wins.first, wins.second, wins.ties
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = desk_config(DataSource::Drvidal { n: 200 }, 3, 3);
    cfg.name = "determinism".into();
    cfg.realizations = 3;
    cfg.split.validation = 0.2;
    cfg.split.train = 0.6;
    let dir = tempfile::tempdir().unwrap();
    let emit = |cfg: &ExperimentConfig, sub: &str| {
        let out = dir.path().join(sub);
        write_report(&run_experiment(cfg).unwrap(), &out).unwrap();
        out
    };
    let a = emit(&cfg, "a");
    let b = emit(&cfg, "b");
    let replayed = emit(&ExperimentConfig::load(a.join("config.toml")).unwrap(), "c");
    let files = ["realizations.csv", "summary.toml", "config.toml"];
    let read = |d: &PathBuf, f: &str| std::fs::read(d.join(f)).unwrap();
    let identical = files.iter().all(|f| read(&a, f) == read(&b, f) && read(&a, f) == read(&replayed, f));

    // The summary is recomputable from the per-realization file.
    let records = read_realizations_csv(a.join("realizations.csv")).unwrap();
    let recomputed = Summary::from_records(&cfg.name, &cfg.fingerprint().unwrap(), &records);
    let written: Summary = toml::from_str(&String::from_utf8(read(&a, "summary.toml")).unwrap()).unwrap();
    let agree = recomputed.metrics.len() == written.metrics.len()
        && recomputed.metrics.iter().all(|(k, v)| {
            let w = written.metrics[k];
            (v.mean - w.mean).abs() <= 1e-12 && (v.std - w.std).abs() <= 1e-12 && v.count == w.count
        });
    Outcome::check(
        identical && agree,
        format!("two runs and a replay from the emitted config byte-identical: {identical}; summary recomputed from CSV: {agree}"),
    )
}

fn invariant_sweeps() -> Outcome {
    let mut rng = stream(99, 2);
    let mut failures = Vec::new();
    let cases = 500;
    for _ in 0..cases {
        let n = rng.random_range(1..20);
        let v = |rng: &mut drvidal_core::rng::Rng| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let (y0, y1, y_f) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let flipped: Vec<f64> = t.iter().map(|t| 1.0 - t).collect();

        let (f, cf) = factual_counterfactual(&y0, &y1, &t);
        let (f2, cf2) = factual_counterfactual(&y0, &y1, &flipped);
        if f != cf2 || cf != f2 {
            failures.push("swap identity");
        }

        let pair = Tensor::from_rows(&(0..n).map(|i| vec![y0[i], y1[i]]).collect::<Vec<_>>()).unwrap();
        let (a0, a1) = replace_factual(&pair, &t, &y_f).unwrap();
        let kept = (0..n).all(|i| if t[i] == 1.0 { a1[i] == y_f[i] } else { a0[i] == y_f[i] });
        let again = Tensor::from_rows(&(0..n).map(|i| vec![a0[i], a1[i]]).collect::<Vec<_>>()).unwrap();
        if !kept || replace_factual(&again, &t, &y_f).unwrap() != (a0.clone(), a1.clone()) {
            failures.push("replace_factual preservation");
        }

        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
        let kl = kl_standard_normal(&Tensor::matrix(1, n, y0.clone()).unwrap(), &Tensor::matrix(1, n, sigma).unwrap()).unwrap();
        if !(kl >= 0.0) {
            failures.push("KL non-negativity");
        }

        let yb: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let mut e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        e[0] = true;
        let r = policy_risk(&y1, &y0, &t, &yb, &e).unwrap();
        if !(0.0..=1.0).contains(&r) {
            failures.push("policy-risk range");
        }

        let rows = rng.random_range(3..300);
        let train = rng.random_range(0.1..0.8);
        let validation = rng.random_range(0.0..0.1);
        let spec = SplitSpec {
            train,
            validation,
            test: 1.0 - train - validation,
            seed: rng.random(),
        };
        let s = split_indices(rows, &spec).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        if all != (0..rows).collect::<Vec<_>>() {
            failures.push("split partition");
        }
    }

    // Clamped logs keep every GAN loss finite for saturated networks.
    let cfg = GanConfig {
        noise_dim: 4,
        generator_shared: vec![8],
        generator_head: vec![4],
        discriminator_hidden: vec![6],
        q_hidden: vec![4],
        ..GanConfig::default()
    };
    for (k, scale) in [1.0, 1e2, 1e4, 1e6].into_iter().enumerate() {
        let ds = gen_cevae(16, k as u64).unwrap();
        let mut models = GanModels::new(ds.d(), 8, ds.outcome_kind, &cfg, k as u64).unwrap();
        for p in models.discriminator.parameters_mut().into_iter().chain(models.generator.parameters_mut()) {
            for (j, v) in p.data_mut().iter_mut().enumerate() {
                *v = scale * if j % 2 == 0 { 1.0 } else { -0.7 };
            }
        }
        let mut r = stream(k as u64, 3);
        let batch = GanBatch {
            x: ds.x.clone(),
            t: ds.t.clone(),
            y_f: ds.y_f.clone(),
            z_g: standard_normal(16, 4, &mut r),
            z_c: standard_normal(16, 8, &mut r),
        };
        let l = gan_losses(&models, &batch, LossWeights { lambda: 0.2, gamma: 1.0 }).unwrap();
        if ![l.v_gan, l.generator, l.supervised, l.info].iter().all(|v| v.is_finite()) {
            failures.push("clamping finiteness");
        }
    }
    failures.sort_unstable();
    failures.dedup();
    Outcome::check(
        failures.is_empty(),
        format!("{cases} random cases per invariant plus saturated GAN losses; violated: {failures:?}"),
    )
}

fn main() -> ExitCode {
    let strict_all = std::env::var("DRVIDAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria = [
        Criterion { id: 1, name: "gradient suite", strict: true, run: gradient_suite },
        Criterion { id: 2, name: "closed-form oracles", strict: true, run: closed_forms },
        Criterion { id: 3, name: "doubly robust oracle on gen_cevae(1e5)", strict: true, run: doubly_robust_oracle },
        Criterion { id: 4, name: "synthetic end-to-end ATE", strict: false, run: synthetic_end_to_end },
        Criterion { id: 5, name: "IHDP reproduction", strict: false, run: ihdp },
        Criterion { id: 6, name: "ablation direction", strict: false, run: ablation_direction },
        Criterion { id: 7, name: "determinism", strict: true, run: determinism },
        Criterion { id: 8, name: "invariant suites", strict: true, run: invariant_sweeps },
    ];
    let only: Option<Vec<u8>> = std::env::var("DRVIDAL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let (mut pass, mut fail, mut skip, mut blocking) = (0, 0, 0, 0);
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let out = (c.run)();
        let label = match out.verdict {
            Verdict::Pass => {
                pass += 1;
                "PASS"
            }
            Verdict::Fail => {
                fail += 1;
                if c.strict || strict_all {
                    blocking += 1;
                }
                "FAIL"
            }
            Verdict::Skip => {
                skip += 1;
                "SKIP"
            }
        };
        println!(
            "criterion {} {}: {label} ({}) [{:.1}s]",
            c.id,
            c.name,
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if blocking > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
