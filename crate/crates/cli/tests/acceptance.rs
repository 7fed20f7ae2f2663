//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tempfile::TempDir;

use tcnf::base_process::TimeGrid;
use tcnf::flow::{Bijection, FlowConfig, FlowParams};
use tcnf::grad::{finite_diff_check, Fault, OpKind, ParamStore};
use tcnf::metrics::{oracle_report, phi_shape_deviation, EvalProtocol};
use tcnf::model::{FlowChoice, Model, TcnfObjective, TimeChangeConfig};
use tcnf::sde::{euler_maruyama, ou_exact_sample, ou_timechange_sample, simulate_exact, SdeSpec};
use tcnf::stats::{chi_square_p, ks_two_sample, mean, variance};
use tcnf::time_change::{audit_monotone, MmgnParams, TimeChangeKind, DEFAULT_EPS_SLOPE};
use tcnf::trainer::{train, ModelConfig};

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Criterion {
    checks: Vec<Check>,
}

impl Criterion {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("    {} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
        self.checks.push(Check { name: name.into(), pass, detail });
    }

    fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.pass).map(|c| format!("{} ({})", c.name, c.detail)).collect()
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Default-architecture model with every parameter moved off its init.
fn perturbed_default(seed: u64, amount: f64) -> (TimeChangeConfig, FlowConfig, Model) {
    let tc = TimeChangeConfig::mmgn_default();
    let flow = FlowConfig::default();
    let m = Model::init(&tc, &FlowChoice::Neural(flow), seed).unwrap();
    let mut store = m.to_store();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    for v in store.values_mut() {
        *v += rng.random_range(-amount..amount);
    }
    let m = Model::from_store(&tc, &FlowChoice::Neural(flow), &store).unwrap();
    (tc, flow, m)
}

fn neural(m: &Model) -> &FlowParams {
    match &m.bijection {
        Bijection::Neural(f) => f,
        _ => unreachable!(),
    }
}

fn brownian_nll(times: &[f64], x: &[f64]) -> f64 {
    let mut nll = 0.0;
    let (mut t0, mut x0) = (0.0, 0.0);
    for (&t, &v) in times.iter().zip(x) {
        let var = t - t0;
        nll += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + (v - x0) * (v - x0) / (2.0 * var);
        (t0, x0) = (t, v);
    }
    nll
}

fn criterion_1() -> Criterion {
    let start = Instant::now();
    let mut c = Criterion::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let (_, _, m) = perturbed_default(case % 20, 0.2);
        let f = neural(&m);
        let w = rng.random_range(-6.0..6.0);
        let tau = rng.random_range(0.0..3.0);
        let x = f.forward(w, tau).unwrap();
        worst = worst.max((f.inverse(x, tau).unwrap() - w).abs());
    }
    c.check("flow round-trip, 1e3 cases", worst < 1e-8, format!("max |error| {worst:.2e} < 1e-8"));

    let h = 1e-5;
    let mut worst_ld = 0.0f64;
    let mut worst_phi = 0.0f64;
    for case in 0..200u64 {
        let (_, _, m) = perturbed_default(case % 20, 0.2);
        let f = neural(&m);
        let w = rng.random_range(-4.0..4.0);
        let tau = rng.random_range(0.01..3.0);
        let fd = (f.forward(w + h, tau).unwrap() - f.forward(w - h, tau).unwrap()) / (2.0 * h);
        let exact = f.log_abs_deriv(w, tau).unwrap().exp();
        worst_ld = worst_ld.max((fd - exact).abs() / exact);
        let t = rng.random_range(0.01..1.5);
        let fd = (m.phi(t + h).unwrap() - m.phi(t - h).unwrap()) / (2.0 * h);
        let exact = m.time_change.phi_derivative(t).unwrap();
        worst_phi = worst_phi.max((fd - exact).abs() / exact.abs());
    }
    c.check("log_abs_deriv vs central differences", worst_ld < 1e-5, format!("max rel {worst_ld:.2e} < 1e-5"));
    c.check("phi_derivative vs central differences", worst_phi < 1e-5, format!("max rel {worst_phi:.2e} < 1e-5"));

    let (tc, flow, m) = perturbed_default(3, 0.2);
    let grid = TimeGrid::uniform(30, 1.5).unwrap();
    let paths = m.sample_paths(&grid, 4, 11).unwrap();
    let store: ParamStore = m.to_store();
    let obj = TcnfObjective::new(tc, flow, &grid, paths.iter().map(|p| p.as_slice()).collect());
    let err = finite_diff_check(&obj, &store, 60, 1e-4, 21).unwrap();
    c.check(
        "gradient audit, default architecture, 60 coordinates",
        err < 1e-4,
        format!("max rel {err:.2e} < 1e-4 over {} params", store.len()),
    );
    let mut caught = Vec::new();
    for kind in [OpKind::Tanh, OpKind::Softplus, OpKind::Mul] {
        let faulty = TcnfObjective::new(tc, flow, &grid, paths.iter().map(|p| p.as_slice()).collect())
            .with_fault(Fault { kind, scale: 1.3 });
        let e = finite_diff_check(&faulty, &store, 60, 1e-4, 21).unwrap();
        caught.push((kind, e));
    }
    c.check(
        "mutation: injected wrong partial is detected",
        caught.iter().all(|(_, e)| *e > 1e-2),
        caught.iter().map(|(k, e)| format!("{k:?} {e:.2e}")).collect::<Vec<_>>().join(", ") + " > 1e-2",
    );

    let mut bad = 0;
    for seed in 0..100u64 {
        let k = TimeChangeKind::Mmgn { params: MmgnParams::init(3, 16, seed), eps_slope: DEFAULT_EPS_SLOPE };
        if k.phi(0.0).unwrap() != 0.0 || !audit_monotone(&k, 1.5, 1000).unwrap() {
            bad += 1;
        }
    }
    c.check("phi monotone with phi(0) = 0, 100 inits on 1e3 points", bad == 0, format!("{bad} failures"));

    let id = Model {
        time_change: TimeChangeKind::Identity,
        bijection: Bijection::Neural(FlowParams::identity(FlowConfig::default()).unwrap()),
    };
    let times = [0.1, 0.35, 0.6, 1.0, 1.5];
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = times.iter().map(|_| r.random_range(-2.0..2.0)).collect();
        let got = id.path_nll(&TimeGrid::new(times.to_vec()).unwrap(), &x).unwrap();
        worst = worst.max((got - brownian_nll(&times, &x)).abs());
    }
    c.check("identity flow and clock give the Brownian NLL", worst < 1e-10, format!("max |diff| {worst:.2e} < 1e-10"));

    let (_, _, m) = perturbed_default(5, 0.2);
    let f = neural(&m);
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 1.0, 1.5] {
        let sd = m.phi(t).unwrap().sqrt();
        let tau = m.phi(t).unwrap();
        let (lo, hi) = (f.forward(-9.0 * sd, tau).unwrap(), f.forward(9.0 * sd, tau).unwrap());
        let mass = simpson(|x| m.density(x, t).unwrap(), lo, hi, 20_000);
        worst = worst.max((mass - 1.0).abs());
    }
    c.check("model density integrates to 1", worst < 1e-4, format!("max |mass - 1| {worst:.2e} < 1e-4"));

    let t = 1.0;
    let tau = m.phi(t).unwrap();
    let norm = Normal::new(0.0, 1.0).unwrap();
    let bins = 50;
    let edges: Vec<f64> = (1..bins)
        .map(|k| f.forward(tau.sqrt() * norm.inverse_cdf(k as f64 / bins as f64), tau).unwrap())
        .collect();
    let lo = f.forward(-10.0 * tau.sqrt(), tau).unwrap();
    let hi = f.forward(10.0 * tau.sqrt(), tau).unwrap();
    let mut bounds = vec![lo];
    bounds.extend(&edges);
    bounds.push(hi);
    let probs: Vec<f64> = bounds.windows(2).map(|w| simpson(|x| m.density(x, t).unwrap(), w[0], w[1], 400)).collect();
    let n = 100_000;
    let samples = m.sample_paths(&TimeGrid::new(vec![t]).unwrap(), n, 77).unwrap();
    let mut counts = vec![0usize; bins];
    for s in &samples {
        counts[edges.partition_point(|&e| e < s[0])] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = chi_square_p(stat, bins - 1);
    c.check("sample vs density chi-square, 1e5 samples, 50 bins", p > 0.01, format!("stat {stat:.1}, p {p:.3} > 0.01"));

    let el = start.elapsed();
    c.check("runtime", el < Duration::from_secs(300), format!("{:.1}s < 300s", el.as_secs_f64()));
    c
}

fn criterion_2() -> Criterion {
    let start = Instant::now();
    let mut c = Criterion::default();
    let spec = SdeSpec::toy_ou();
    let SdeSpec::ToyOu { theta, mu, sigma, x0 } = spec else { unreachable!() };
    let grid = TimeGrid::new(vec![0.25, 0.75, 1.5]).unwrap();
    let n = 10_000;
    let exact = ou_exact_sample(&spec, &grid, n, 101).unwrap();
    let tchange = ou_timechange_sample(&spec, &grid, n, 202).unwrap();
    let em = euler_maruyama(&spec, &grid, 128, n, 303).unwrap();
    let mut min_p = 1.0f64;
    for j in 0..grid.len() {
        for (a, b) in [(&exact, &tchange), (&exact, &em), (&tchange, &em)] {
            min_p = min_p.min(ks_two_sample(&a.column(j), &b.column(j)).1);
        }
    }
    c.check(
        "exact vs time-change vs fine Euler, pairwise KS at t = 0.25, 0.75, 1.5",
        min_p > 0.01,
        format!("min p {min_p:.3} > 0.01"),
    );

    let mut worst = 0.0f64;
    for (j, &t) in grid.times().iter().enumerate() {
        let expected = sigma * sigma * (1.0 - (-2.0 * theta * t).exp()) / (2.0 * theta);
        let se = expected * (2.0 / (n as f64 - 1.0)).sqrt();
        worst = worst.max((variance(&tchange.column(j)) - expected).abs() / se);
    }
    c.check("time-change variance vs closed form", worst < 3.0, format!("max {worst:.2} SE < 3"));

    let sq = SdeSpec::toy_ou_sqrt_t();
    let SdeSpec::ToyOuSqrtT { theta: th2, sigma: s2, .. } = sq else { unreachable!() };
    let set = euler_maruyama(&sq, &grid, 128, n, 404).unwrap();
    let mut worst = 0.0f64;
    for (j, &t) in grid.times().iter().enumerate() {
        let expected = simpson(|s| s2 * s2 * s * (-2.0 * th2 * (t - s)).exp(), 0.0, t, 4000);
        let se = expected * (2.0 / (n as f64 - 1.0)).sqrt();
        worst = worst.max((variance(&set.column(j)) - expected).abs() / se);
    }
    c.check("sqrt-t Euler variance vs quadrature", worst < 3.0, format!("max {worst:.2} SE < 3"));

    let end = TimeGrid::new(vec![1.5]).unwrap();
    let exact_mean = mu + (x0 - mu) * (-theta * 1.5).exp();
    let errs: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&k| (mean(&euler_maruyama(&spec, &end, k, 1_000_000, 505).unwrap().column(0)) - exact_mean).abs())
        .collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    c.check(
        "Euler weak error halves per substep doubling (8, 16, 32)",
        ratios.iter().all(|r| (1.5..=2.5).contains(r)),
        format!("ratios {:.2}, {:.2} in [1.5, 2.5]", ratios[0], ratios[1]),
    );

    let el = start.elapsed();
    c.check("runtime", el < Duration::from_secs(600), format!("{:.1}s < 600s", el.as_secs_f64()));
    c
}

struct Pair {
    tcnf: [f64; 4],
    ctfp: [f64; 4],
    dev: f64,
}

/// Trains TCNF and CTFP on the same data and returns their std, IQR and
/// density MAE plus TCNF's clock shape deviation.
fn desk_pair(spec: &SdeSpec, seed: u64) -> Pair {
    let grid = TimeGrid::uniform(30, 1.5).unwrap();
    let data = simulate_exact(spec, &grid, 1000, 1000 + seed).unwrap();
    let proto = EvalProtocol { n_paths: 1000, n_iterations: 5, n_slices: 30, n_space: 200, n_time: 50, ..Default::default() };
    let mut out = [[0.0; 4]; 2];
    let mut dev = 0.0;
    for (i, mut cfg) in [ModelConfig::tcnf(), ModelConfig::ctfp()].into_iter().enumerate() {
        cfg.seed = seed;
        cfg.optimizer.epochs = 60;
        cfg.optimizer.lr = 5e-3;
        cfg.optimizer.batch_size = 64;
        let m = train(&cfg, &data).unwrap().model().unwrap();
        let r = oracle_report(&m, spec, &proto, 5).unwrap();
        out[i] = [r.get("std_mae").unwrap(), r.get("iqr_mae").unwrap(), r.get("density_mae").unwrap(), r.get("mean_mae").unwrap()];
        if i == 0 {
            dev = phi_shape_deviation(&m, 1.5, 200).unwrap();
        }
    }
    Pair { tcnf: out[0], ctfp: out[1], dev }
}

fn criterion_3() -> Criterion {
    let start = Instant::now();
    let mut c = Criterion::default();
    let runs = |spec: SdeSpec| -> Vec<Pair> {
        (0..3u64)
            .map(|seed| {
                let p = desk_pair(&spec, seed);
                println!(
                    "    .... {} seed {seed}: std {:.4}/{:.4}  iqr {:.4}/{:.4}  density {:.5}/{:.5}  clock deviation {:.3}",
                    spec.name(),
                    p.tcnf[0],
                    p.ctfp[0],
                    p.tcnf[1],
                    p.ctfp[1],
                    p.tcnf[2],
                    p.ctfp[2],
                    p.dev
                );
                p
            })
            .collect()
    };
    let med = |ps: &[Pair], f: fn(&Pair) -> f64| median(ps.iter().map(f).collect());

    let ou = runs(SdeSpec::toy_ou());
    let (a, b) = (med(&ou, |p| p.tcnf[0]), med(&ou, |p| p.ctfp[0]));
    let (ia, ib) = (med(&ou, |p| p.tcnf[1]), med(&ou, |p| p.ctfp[1]));
    c.check(
        "toy-ou: TCNF/CTFP std and IQR MAE ratio <= 0.75 (median of 3 seeds)",
        a / b <= 0.75 && ia / ib <= 0.75,
        format!("std {a:.4}/{b:.4} = {:.3}, iqr {ia:.4}/{ib:.4} = {:.3}", a / b, ia / ib),
    );

    let sq = runs(SdeSpec::toy_ou_sqrt_t());
    let (a, b) = (med(&sq, |p| p.tcnf[0]), med(&sq, |p| p.ctfp[0]));
    let (ia, ib) = (med(&sq, |p| p.tcnf[1]), med(&sq, |p| p.ctfp[1]));
    c.check(
        "toy-ou-sqrt-t: TCNF beats CTFP on std and IQR MAE (median of 3 seeds)",
        a < b && ia < ib,
        format!("std {a:.4} < {b:.4}, iqr {ia:.4} < {ib:.4}"),
    );

    let gbm = runs(SdeSpec::toy_gbm());
    let (a, b) = (med(&gbm, |p| p.tcnf[2]), med(&gbm, |p| p.ctfp[2]));
    c.check(
        "toy-gbm: density MAE parity, |TCNF - CTFP| <= 0.5 max (median of 3 seeds)",
        (a - b).abs() <= 0.5 * a.max(b),
        format!("{a:.5} vs {b:.5}, |diff| {:.5} <= {:.5}", (a - b).abs(), 0.5 * a.max(b)),
    );
    let dev = med(&gbm, |p| p.dev);
    c.check("toy-gbm: learned clock near-linear", dev < 0.1, format!("shape deviation {dev:.4} < 0.1"));

    let el = start.elapsed();
    c.check("runtime", el < Duration::from_secs(3600), format!("{:.1}s < 3600s", el.as_secs_f64()));
    c
}

fn run_pipeline(dir: &Path) -> Vec<u8> {
    let bin = env!("CARGO_BIN_EXE_tcnf");
    let go = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let d = dir.to_str().unwrap();
    go(&["simulate", "--sde", "toy-ou", "--n-paths", "200", "--n-times", "10", "--seed", "13", "--out-dir", d]);
    fs::write(
        dir.join("run.toml"),
        "seed = 13\n[data]\ncsv = \"data.csv\"\n[model.flow]\ntype = \"neural\"\nblocks = 2\nunits = 4\nhidden = 8\n\
         [model.optimizer]\nepochs = 5\nbatch_size = 32\nlr = 0.005\n",
    )
    .unwrap();
    go(&["train", "--config", dir.join("run.toml").to_str().unwrap(), "--out-dir", d]);
    go(&[
        "eval", "--checkpoint", dir.join("checkpoint.json").to_str().unwrap(), "--oracle", "toy-ou", "--seed", "13",
        "--n-paths", "500", "--n-iterations", "5", "--n-slices", "10", "--n-space", "100", "--n-time", "20", "--out-dir", d,
    ]);
    fs::read(dir.join("report.csv")).unwrap()
}

fn criterion_4() -> Criterion {
    let mut c = Criterion::default();
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (ra, rb) = (run_pipeline(&a), run_pipeline(&b));
    c.check(
        "simulate -> train -> eval twice gives byte-identical report.csv",
        ra == rb && !ra.is_empty(),
        format!("{} bytes, identical: {}", ra.len(), ra == rb),
    );
    c
}

fn main() -> ExitCode {
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let all: [(&str, &str, fn() -> Criterion); 4] = [
        ("1", "property suite", criterion_1),
        ("2", "oracle equivalence suite", criterion_2),
        ("3", "desk-scale direction reproduction", criterion_3),
        ("4", "end-to-end CLI reproducibility", criterion_4),
    ];
    let mut summary = Vec::new();
    for (id, name, run) in all {
        if only.as_deref().is_some_and(|o| o != id) {
            continue;
        }
        println!("criterion {id}: {name}");
        let c = run();
        summary.push((id, name, c));
    }
    println!();
    let mut failed = false;
    for (id, name, c) in &summary {
        if c.pass() {
            println!("PASS criterion {id}: {name}");
        } else {
            failed = true;
            println!("FAIL criterion {id}: {name}: {}", c.failures().join("; "));
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
