//! Acceptance suites. Each criterion returns a measured value, its
//! tolerance and a pass flag; nothing is asserted here so a failing
//! criterion is reported rather than hidden.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimator::{NestedEstimator, NestingSchedule, TerminalClosure};
use crate::gaussian_step::StepModel;
use crate::harness::config::RunConfig;
use crate::harness::{run_to_writer, CellResult};
use crate::oracle::{toy_pde_value, tree_eval, zariphopoulou_value_1d, CirPathConfig};
use crate::problems::{
    cir_problem, diagnostic_problem, hjb_problem, toy_fullnl_problem, CirParams, DiagnosticModel, DiagnosticTerminal,
    HjbParams, ProblemSpec, ToyParams,
};
use crate::rand_time::{fill_gaussian, RngStream, TimeLaw};
use crate::smallnum::Mat;
use rand::Rng;

pub const PORTFOLIO_D1_CONFIG: &str = include_str!("../../configs/acceptance_portfolio_d1.toml");
pub const CIR_D2_CONFIG: &str = include_str!("../../configs/acceptance_cir_d2.toml");
pub const TOY_D3_CONFIG: &str = include_str!("../../configs/acceptance_toy_d3.toml");

/// Value function of the single-asset portfolio problem at `(0, 1, 0.3)`.
pub const PORTFOLIO_VALUE: f64 = -0.3662;

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} criterion {:>2} {:<14} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    PortfolioD1,
    Zariphopoulou,
    Cir,
    Toy,
    Unbiased,
    Weights,
    Golden,
    Variance,
    Determinism,
    Gamma,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 11] = [
        "portfolio-d1",
        "zariphopoulou",
        "cir",
        "toy",
        "unbiased",
        "weights",
        "golden",
        "variance",
        "determinism",
        "gamma",
        "all",
    ];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "portfolio-d1" => Suite::PortfolioD1,
            "zariphopoulou" => Suite::Zariphopoulou,
            "cir" => Suite::Cir,
            "toy" => Suite::Toy,
            "unbiased" => Suite::Unbiased,
            "weights" => Suite::Weights,
            "golden" => Suite::Golden,
            "variance" => Suite::Variance,
            "determinism" => Suite::Determinism,
            "gamma" => Suite::Gamma,
            "all" => Suite::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown suite '{other}', expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Runs one suite (or all of them, cheapest first).
pub fn run_suite(suite: Suite, shards: usize) -> Result<Vec<Criterion>> {
    let one = |c: Result<Criterion>| c.map(|c| vec![c]);
    match suite {
        Suite::PortfolioD1 => one(portfolio_d1(shards)),
        Suite::Zariphopoulou => one(zariphopoulou(shards)),
        Suite::Cir => one(cir_d2(shards)),
        Suite::Toy => one(toy_d3(shards)),
        Suite::Unbiased => one(unbiased(shards)),
        Suite::Weights => one(weights()),
        Suite::Golden => one(golden()),
        Suite::Variance => one(variance(shards)),
        Suite::Determinism => one(determinism()),
        Suite::Gamma => one(gamma_law()),
        Suite::All => {
            let mut out = Vec::new();
            for s in [
                Suite::Gamma,
                Suite::Weights,
                Suite::Golden,
                Suite::Unbiased,
                Suite::Zariphopoulou,
                Suite::PortfolioD1,
                Suite::Cir,
                Suite::Toy,
                Suite::Variance,
                Suite::Determinism,
            ] {
                out.extend(run_suite(s, shards)?);
            }
            out.sort_by_key(|c| c.id);
            Ok(out)
        }
    }
}

fn single_cell(text: &str, shards: usize) -> Result<CellResult> {
    let mut cfg = RunConfig::from_toml_str(text)?;
    cfg.run.shards = shards;
    let mut sink = std::io::sink();
    let mut cells = run_to_writer(&cfg, &mut sink)?;
    if cells.len() != 1 {
        return Err(Error::Config("acceptance configs must have exactly one cell".into()));
    }
    Ok(cells.remove(0))
}

pub fn portfolio_d1(shards: usize) -> Result<Criterion> {
    let c = single_cell(PORTFOLIO_D1_CONFIG, shards)?;
    let err = (c.estimate - PORTFOLIO_VALUE).abs();
    Ok(Criterion {
        id: 1,
        name: "portfolio-d1",
        passed: err <= 0.010 && err <= 3.0 * c.stderr,
        detail: format!(
            "estimate {:.5} stderr {:.5} |err| {:.5} (<= 0.010 and <= 3 stderr = {:.5}) [{:.1}s]",
            c.estimate,
            c.stderr,
            err,
            3.0 * c.stderr,
            c.wall_seconds
        ),
    })
}

pub fn zariphopoulou(shards: usize) -> Result<Criterion> {
    let start = std::time::Instant::now();
    let v = zariphopoulou_value_1d(
        &HjbParams::default(),
        0.0,
        1.0,
        0.3,
        CirPathConfig::default(),
        1,
        shards,
    )?;
    let err = (v.value - PORTFOLIO_VALUE).abs();
    Ok(Criterion {
        id: 2,
        name: "zariphopoulou",
        passed: err <= 0.002,
        detail: format!(
            "value {:.6} stderr {:.1e} |err| {:.6} (<= 0.002) [{:.1}s]",
            v.value,
            v.stderr,
            err,
            start.elapsed().as_secs_f64()
        ),
    })
}

fn relative_check(id: u32, name: &'static str, c: &CellResult) -> Criterion {
    let reference = c.reference.expect("problem has a closed form");
    let err = (c.estimate - reference).abs();
    let rel = err / reference.abs();
    Criterion {
        id,
        name,
        passed: rel <= 0.03 && err <= 3.0 * c.stderr,
        detail: format!(
            "estimate {:.5} reference {:.5} stderr {:.5} rel_err {:.4} (<= 0.03) |err| {:.5} (<= 3 stderr = {:.5}) [{:.1}s]",
            c.estimate,
            reference,
            c.stderr,
            rel,
            err,
            3.0 * c.stderr,
            c.wall_seconds
        ),
    }
}

pub fn cir_d2(shards: usize) -> Result<Criterion> {
    Ok(relative_check(3, "cir-d2", &single_cell(CIR_D2_CONFIG, shards)?))
}

pub fn toy_d3(shards: usize) -> Result<Criterion> {
    let c = single_cell(TOY_D3_CONFIG, shards)?;
    let mut crit = relative_check(4, "toy-d3", &c);
    // value of the clamped equation itself, for comparison
    let d = c.echo.dim;
    let s0: f64 = c.echo.x0.iter().sum();
    let params = RunConfig::from_toml_str(TOY_D3_CONFIG)?.problem.toy;
    let pde = toy_pde_value(&params, d, s0, 512, true)?;
    crit.detail.push_str(&format!(
        "; clamped-equation value {:.5}, estimate off by {:.2} stderr",
        pde,
        (c.estimate - pde) / c.stderr
    ));
    Ok(crit)
}

/// f = 0 over {BM, OU} x {linear, quadratic, cos} and p in {1, 2, 3}.
pub fn unbiased(shards: usize) -> Result<Criterion> {
    let law = TimeLaw::exponential(1.0)?;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cells = 0;
    for model in [DiagnosticModel::Brownian, DiagnosticModel::OrnsteinUhlenbeck] {
        for g in [
            DiagnosticTerminal::Linear,
            DiagnosticTerminal::Quadratic,
            DiagnosticTerminal::Cos,
        ] {
            let prob = diagnostic_problem(model, g, 2)?;
            let exact = prob.reference_at(0.0, &prob.default_x0).expect("closed form");
            for p in 1..=3 {
                let mut counts = vec![10_000];
                counts.extend(std::iter::repeat_n(2, p));
                let sched = NestingSchedule::new(counts, 0)?;
                let r = NestedEstimator::new(&prob, &sched, law).evaluate(&prob.default_x0, 11, shards)?;
                let z = (r.estimate - exact) / r.stderr;
                worst = worst.max(z.abs());
                cells += 1;
                if z.abs() > 3.0 {
                    failures.push(format!("{} p={p} z={z:.2}", prob.name));
                }
            }
        }
    }
    Ok(Criterion {
        id: 5,
        name: "unbiased",
        passed: failures.is_empty(),
        detail: format!(
            "{cells} cells, N0 = 10^4, max |est - exact| / stderr = {worst:.2} (<= 3){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    })
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; k],
            m2: vec![0.0; k],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1.0;
        for ((m, s), x) in self.mean.iter_mut().zip(&mut self.m2).zip(v) {
            let d = x - *m;
            *m += d / self.n;
            *s += d * (x - *m);
        }
    }

    fn stderr(&self, i: usize) -> f64 {
        (self.m2[i] / (self.n - 1.0) / self.n).sqrt()
    }
}

/// `E[V h(X)] = ∇E[h(X)]` and `E[W h(X)] = ∇²E[h(X)]` for `h = cos(Σx)`.
pub fn weights() -> Result<Criterion> {
    const N: usize = 1_000_000;
    let tau = 0.7;
    let x = [0.3, -0.2];
    // (label, model, a, mean, variance of x_1 + x_2)
    let ou_a = (-0.5f64 * tau).exp();
    let ou_var = 0.16 * (1.0 - (-tau).exp());
    let full = Mat::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.8]]);
    // variance of 1ᵀ sigma W_tau: |sigmaᵀ 1|² tau
    let full_var = ((1.0f64 + 0.5).powi(2) + 0.8f64.powi(2)) * tau;
    let cases: Vec<(&str, StepModel, [f64; 2], [f64; 2], f64)> = vec![
        (
            "bm",
            StepModel::brownian(&[0.1, -0.3], &[0.8, 1.2])?,
            [1.0, 1.0],
            [x[0] + 0.1 * tau, x[1] - 0.3 * tau],
            (0.64 + 1.44) * tau,
        ),
        (
            "ou",
            StepModel::ornstein_uhlenbeck(2, 0.5, 0.2, 0.4)?,
            [ou_a, ou_a],
            [0.2 + (x[0] - 0.2) * ou_a, 0.2 + (x[1] - 0.2) * ou_a],
            2.0 * ou_var,
        ),
        (
            "bm-full",
            StepModel::full_brownian(vec![0.0, 0.2], full)?,
            [1.0, 1.0],
            [x[0], x[1] + 0.2 * tau],
            full_var,
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for (ci, (label, model, a, mean, var)) in cases.iter().enumerate() {
        let coeffs = model.coeffs(tau);
        let mut rng = RngStream::new(2024).child(ci as u64).rng();
        let mut acc = Welford::new(5);
        let mut g = [0.0; 2];
        for _ in 0..N {
            fill_gaussian(&mut rng, &mut g);
            let xs = coeffs.step_triple(&x, &g);
            let h = (xs[0] + xs[1]).cos();
            let v = coeffs.first_weight(&g)?;
            let w = coeffs.second_weight(&g)?;
            acc.push(&[v[0] * h, v[1] * h, w.get(0, 0) * h, w.get(0, 1) * h, w.get(1, 1) * h]);
        }
        let s = mean[0] + mean[1];
        let damp = (-0.5 * var).exp();
        let exact = [
            -a[0] * s.sin() * damp,
            -a[1] * s.sin() * damp,
            -a[0] * a[0] * s.cos() * damp,
            -a[0] * a[1] * s.cos() * damp,
            -a[1] * a[1] * s.cos() * damp,
        ];
        for (i, e) in exact.iter().enumerate() {
            let z = (acc.mean[i] - e) / acc.stderr(i);
            worst = worst.max(z.abs());
            if z.abs() > 3.0 {
                bad.push(format!("{label}[{i}] z={z:.2}"));
            }
        }
    }
    Ok(Criterion {
        id: 6,
        name: "weights",
        passed: bad.is_empty(),
        detail: format!(
            "bm, ou, full-matrix bm; 10^6 samples; 15 entries, max |z| = {worst:.2} (<= 3){}",
            if bad.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", bad.join(", "))
            }
        ),
    })
}

fn golden_problem(kind: u32) -> Result<ProblemSpec> {
    Ok(match kind {
        0 => cir_problem(CirParams::default(), 2)?,
        1 => toy_fullnl_problem(ToyParams::default(), 2)?,
        2 => hjb_problem(HjbParams::default(), 1)?,
        _ => {
            let mut p = toy_fullnl_problem(ToyParams::default(), 2)?;
            p.model = StepModel::full_brownian(vec![0.1, 0.0], Mat::from_rows(&[vec![0.7, 0.2], vec![-0.3, 0.9]]))?;
            p.name = "toy-full-sigma".into();
            p.reference = None;
            p
        }
    })
}

/// Estimator against the explicit tree evaluator on recorded draws.
pub fn golden() -> Result<Criterion> {
    let mut worst: f64 = 0.0;
    let mut nodes = 0usize;
    for seed in 0..50u64 {
        let mut rng = RngStream::new(0x601d).child(seed).rng();
        let prob = golden_problem((seed % 4) as u32)?;
        let p = rng.random_range(1..=3usize);
        let counts: Vec<usize> = (0..=p).map(|_| rng.random_range(1..=3)).collect();
        let alpha = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
        let lambda = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let closure = if seed % 5 == 4 {
            TerminalClosure::Analytic
        } else {
            TerminalClosure::Antithetic
        };
        let law = TimeLaw::new(alpha, lambda)?;
        let sched = NestingSchedule::new(counts, 0)?;
        let est = NestedEstimator::new(&prob, &sched, law).with_closure(closure);
        let (main, tape) = est.record_outer_sample(&prob.default_x0, seed, 0)?;
        nodes += tape.draws.len();
        let tree = tree_eval(&prob, &sched, &law, closure, &prob.default_x0, &tape)?;
        let mut pairs = vec![(main.u, tree.u)];
        pairs.extend(main.du.iter().copied().zip(tree.du.iter().copied()));
        pairs.extend(main.d2u.packed().iter().copied().zip(tree.d2u.packed().iter().copied()));
        for (a, b) in pairs {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    Ok(Criterion {
        id: 7,
        name: "golden",
        passed: worst <= 1e-12,
        detail: format!("50 seeds, {nodes} nodes, max |diff| / max(1, |value|) = {worst:.2e} (<= 1e-12)"),
    })
}

pub fn variance(shards: usize) -> Result<Criterion> {
    let cfg = RunConfig::from_toml_str(CIR_D2_CONFIG)?;
    let resolved = cfg.resolve()?;
    let law = resolved.laws[0];
    let base = &resolved.schedules[0];
    let (lo, hi) = (base.with_ipart(2)?, base.with_ipart(3)?);
    let start = std::time::Instant::now();
    let mut ratios = Vec::new();
    for seed in 1..=10u64 {
        let a = NestedEstimator::new(&resolved.problem, &lo, law).evaluate(&resolved.x0, seed, shards)?;
        let b = NestedEstimator::new(&resolved.problem, &hi, law).evaluate(&resolved.x0, seed, shards)?;
        ratios.push(b.stderr / a.stderr);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(Criterion {
        id: 8,
        name: "variance",
        passed: (0.6..=0.85).contains(&mean),
        detail: format!(
            "cir-d2 stderr(ipart 3) / stderr(ipart 2) over 10 seeds: mean {mean:.3} (in [0.6, 0.85]), min {:.3}, max {:.3} [{:.1}s]",
            ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            ratios.iter().cloned().fold(0.0, f64::max),
            start.elapsed().as_secs_f64()
        ),
    })
}

pub fn determinism() -> Result<Criterion> {
    let start = std::time::Instant::now();
    let mut outputs = Vec::new();
    for shards in [1, 4, 16] {
        let mut cfg = RunConfig::from_toml_str(CIR_D2_CONFIG)?;
        cfg.run.shards = shards;
        cfg.run.no_timing = true;
        let mut buf = Vec::new();
        run_to_writer(&cfg, &mut buf)?;
        outputs.push(buf);
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    Ok(Criterion {
        id: 9,
        name: "determinism",
        passed: same,
        detail: format!(
            "cir-d2 CSV with shards 1, 4, 16: {} ({} bytes) [{:.1}s]",
            if same { "byte-identical" } else { "DIFFERENT" },
            outputs[0].len(),
            start.elapsed().as_secs_f64()
        ),
    })
}

/// Composite 5-point Gauss-Legendre rule on `panels` equal panels.
fn gauss_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = lo + (k as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(&WEIGHTS) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

/// Density quadrature, survival function and a Kolmogorov-Smirnov test of
/// the sampler.
pub fn gamma_law() -> Result<Criterion> {
    const KS_N: usize = 100_000;
    let mut worst_quad: f64 = 0.0;
    let mut bad = Vec::new();
    let mut worst_ks_ratio: f64 = 0.0;
    for (li, alpha) in [0.5, 1.0].into_iter().enumerate() {
        for (lj, lambda) in [0.05, 0.1, 0.15, 0.2].into_iter().enumerate() {
            let law = TimeLaw::new(alpha, lambda)?;
            // x = s^{1/alpha} removes the singularity at the origin
            let integrand = |s: f64| {
                if s <= 0.0 {
                    return 0.0;
                }
                let x = s.powf(1.0 / alpha);
                law.density(x) * x / (alpha * s)
            };
            let s_max = (60.0 / lambda).powf(alpha);
            let tail = |x: f64| gauss_legendre(integrand, x.powf(alpha), s_max, 4000);
            let mass = tail(0.0);
            let mut err = (mass - 1.0).abs();
            let mean = alpha / lambda;
            for k in 1..=20 {
                let x = mean * 4.0 * k as f64 / 20.0;
                err = err.max((law.survival(x) - tail(x)).abs());
            }
            worst_quad = worst_quad.max(err);
            if err > 1e-6 {
                bad.push(format!("quadrature alpha={alpha} lambda={lambda} err={err:.1e}"));
            }

            let mut rng = RngStream::new(77).child((li * 4 + lj) as u64).rng();
            let mut xs: Vec<f64> = (0..KS_N).map(|_| law.sample(&mut rng)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            let n = KS_N as f64;
            let d = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let c = law.cdf(x);
                    (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
                })
                .fold(0.0, f64::max);
            let limit = 1.628 / n.sqrt();
            worst_ks_ratio = worst_ks_ratio.max(d / limit);
            if d > limit {
                bad.push(format!("KS alpha={alpha} lambda={lambda} D={d:.4}"));
            }
        }
    }
    Ok(Criterion {
        id: 10,
        name: "gamma-law",
        passed: bad.is_empty(),
        detail: format!(
            "8 laws: max quadrature err {worst_quad:.1e} (<= 1e-6), max KS D / (1.628/sqrt n) = {worst_ks_ratio:.2} (<= 1), n = {KS_N}{}",
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    })
}
