//! Reference values computed independently of the nested estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimator::{DrawTape, EstimateTriple, NestingSchedule, TerminalClosure};
use crate::gaussian_step::CoordKind;
use crate::problems::{HjbParams, ProblemSpec, ToyParams};
use crate::rand_time::{RngStream, TimeLaw};
use crate::smallnum::SymMat;
use rand_distr::{Distribution, StandardNormal};

/// Lower bound applied to the variance inside `1 / Y`.
pub const POSITIVITY_EPS: f64 = 1e-10;

/// Discretisation of the variance paths (full-truncation Euler).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CirPathConfig {
    pub n_steps: usize,
    pub n_paths: usize,
}

impl Default for CirPathConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            n_paths: 1_000_000,
        }
    }
}

impl CirPathConfig {
    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_paths < 2 {
            return Err(invalid("need n_steps >= 1 and n_paths >= 2"));
        }
        Ok(())
    }
}

/// Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McValue {
    pub value: f64,
    pub stderr: f64,
}

/// One variance process `dY = (k (m - Y) - drift_shift) dt + c sqrt(Y) dW`
/// together with the integrand weight `mu²`.
#[derive(Debug, Clone, Copy)]
struct VarianceFactor {
    k: f64,
    m: f64,
    c: f64,
    drift_shift: f64,
    mu2: f64,
    y0: f64,
}

impl VarianceFactor {
    fn from_params(p: &HjbParams, y0: f64) -> Self {
        Self {
            k: p.k,
            m: p.m,
            c: p.c,
            drift_shift: p.mu * p.c * p.rho_corr,
            mu2: p.mu * p.mu,
            y0,
        }
    }

    /// `∫ mu² / Y ds` by the trapezoid rule on the Euler grid.
    fn integral<R: rand::Rng>(&self, rng: &mut R, dt: f64, n_steps: usize) -> f64 {
        let sqdt = dt.sqrt();
        let mut y = self.y0;
        let inv = |y: f64| self.mu2 / y.max(POSITIVITY_EPS);
        let mut acc = 0.5 * inv(y);
        for step in 0..n_steps {
            let yp = y.max(0.0);
            let z: f64 = StandardNormal.sample(rng);
            y += (self.k * (self.m - yp) - self.drift_shift) * dt + self.c * yp.sqrt() * sqdt * z;
            let w = if step + 1 == n_steps { 0.5 } else { 1.0 };
            acc += w * inv(y);
        }
        acc * dt
    }
}

/// Sample mean and standard error of `h(path)` over `n_paths` paths; path
/// `i` draws from `stream.child(i)`, so the result does not depend on the
/// number of shards.
fn path_mean(
    stream: RngStream,
    n_paths: usize,
    shards: usize,
    h: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
) -> McValue {
    let shards = shards.clamp(1, n_paths);
    // (count, mean, sum of squared deviations) per shard, merged in order
    let parts: Vec<(f64, f64, f64)> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let lo = s * n_paths / shards;
            let hi = (s + 1) * n_paths / shards;
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for i in lo..hi {
                let v = h(&mut stream.child(i as u64).rng());
                n += 1.0;
                let delta = v - mean;
                mean += delta / n;
                m2 += delta * (v - mean);
            }
            (n, mean, m2)
        })
        .collect();
    let (n, mean, m2) = parts.iter().fold((0.0, 0.0, 0.0), |(na, ma, sa), &(nb, mb, sb)| {
        let n = na + nb;
        let delta = mb - ma;
        (n, ma + delta * nb / n, sa + sb + delta * delta * na * nb / n)
    });
    let var = m2 / (n - 1.0);
    McValue {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

/// Quasi-explicit value of the exponential-utility problem with one
/// Heston asset: `-exp(-eta x) E[Z^q]^(1/q)`, `Z = exp(-½ ∫ mu²/Y ds)`,
/// `q = 1 - rho²`, with `Y` under the drift shifted by `mu c rho`.
pub fn zariphopoulou_value_1d(
    params: &HjbParams,
    t: f64,
    x: f64,
    y: f64,
    cfg: CirPathConfig,
    seed: u64,
    shards: usize,
) -> Result<McValue> {
    cfg.validate()?;
    if !(y > 0.0) {
        return Err(invalid("initial variance must be positive"));
    }
    let q = 1.0 - params.rho_corr * params.rho_corr;
    if !(q > 0.0) {
        return Err(invalid("formula requires |rho| < 1"));
    }
    if !(t < params.horizon) {
        return Err(invalid("t must be before the horizon"));
    }
    let dt = (params.horizon - t) / cfg.n_steps as f64;
    let factor = VarianceFactor::from_params(params, y);
    let mc = path_mean(RngStream::new(seed), cfg.n_paths, shards, |rng| {
        (-0.5 * q * factor.integral(rng, dt, cfg.n_steps)).exp()
    });
    let scale = -(-params.eta * x).exp();
    let value = scale * mc.value.powf(1.0 / q);
    // delta method for the power
    let stderr = scale.abs() * mc.value.powf(1.0 / q - 1.0) / q * mc.stderr;
    Ok(McValue { value, stderr })
}

fn check_nd(assets: &[HjbParams], y: &[f64], cfg: CirPathConfig, t: f64) -> Result<f64> {
    cfg.validate()?;
    if assets.is_empty() || assets.len() != y.len() {
        return Err(invalid("need one variance per asset"));
    }
    if assets.iter().any(|p| p.rho_corr != 0.0) {
        return Err(invalid("the product formula assumes rho = 0"));
    }
    if y.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("initial variances must be positive"));
    }
    let horizon = assets[0].horizon;
    if !(t < horizon) {
        return Err(invalid("t must be before the horizon"));
    }
    Ok((horizon - t) / cfg.n_steps as f64)
}

/// Multi-asset value as a product of independent single-asset factors.
/// Risk aversion and horizon are taken from the first asset.
pub fn zariphopoulou_value_nd(
    assets: &[HjbParams],
    t: f64,
    x: f64,
    y: &[f64],
    cfg: CirPathConfig,
    seed: u64,
    shards: usize,
) -> Result<McValue> {
    let dt = check_nd(assets, y, cfg, t)?;
    let root = RngStream::new(seed);
    let mut prod = 1.0;
    let mut rel2 = 0.0;
    for (i, (p, &yi)) in assets.iter().zip(y).enumerate() {
        let factor = VarianceFactor::from_params(p, yi);
        let mc = path_mean(root.child(i as u64), cfg.n_paths, shards, |rng| {
            (-0.5 * factor.integral(rng, dt, cfg.n_steps)).exp()
        });
        prod *= mc.value;
        rel2 += (mc.stderr / mc.value).powi(2);
    }
    let scale = -(-assets[0].eta * x).exp();
    Ok(McValue {
        value: scale * prod,
        stderr: (scale * prod).abs() * rel2.sqrt(),
    })
}

/// Same quantity with all variance paths simulated jointly and the product
/// taken inside the expectation.
pub fn zariphopoulou_value_nd_joint(
    assets: &[HjbParams],
    t: f64,
    x: f64,
    y: &[f64],
    cfg: CirPathConfig,
    seed: u64,
    shards: usize,
) -> Result<McValue> {
    let dt = check_nd(assets, y, cfg, t)?;
    let factors: Vec<VarianceFactor> = assets
        .iter()
        .zip(y)
        .map(|(p, &yi)| VarianceFactor::from_params(p, yi))
        .collect();
    let mc = path_mean(RngStream::new(seed), cfg.n_paths, shards, |rng| {
        let total: f64 = factors.iter().map(|f| f.integral(rng, dt, cfg.n_steps)).sum();
        (-0.5 * total).exp()
    });
    let scale = -(-assets[0].eta * x).exp();
    Ok(McValue {
        value: scale * mc.value,
        stderr: scale.abs() * mc.stderr,
    })
}

/// Closed-form solution of `problem` at `(t, x)`.
pub fn analytic_reference(problem: &ProblemSpec, t: f64, x: &[f64]) -> Result<f64> {
    if x.len() != problem.dim {
        return Err(invalid("point has the wrong dimension"));
    }
    problem
        .reference_at(t, x)
        .ok_or_else(|| invalid(format!("problem '{}' has no closed-form reference", problem.name)))
}

/// Solution of the toy problem at `t = 0`, `x` with `Σ x = s0`, computed by
/// finite differences. The solution depends on `x` only through `S = Σ x`
/// and is 2π-periodic in `S`, which leaves the 1-d equation
///
/// ```text
/// v_t + mu0 v_S + ½ sigma0² v_SS + f(t, S, v, d v_SS) = 0,   v(T) = cos S
/// ```
///
/// solved backwards with an explicit scheme on a periodic grid of `n_grid`
/// points through `s0`. With `clamped = false` the clamp is dropped and the
/// result reproduces the closed form.
pub fn toy_pde_value(params: &ToyParams, d: usize, s0: f64, n_grid: usize, clamped: bool) -> Result<f64> {
    if d == 0 || n_grid < 8 {
        return Err(invalid("need d >= 1 and at least 8 grid points"));
    }
    let ToyParams {
        a,
        mu0,
        sigma0,
        alpha_sol,
        horizon,
        ..
    } = *params;
    let rd = (d as f64).sqrt();
    let h = std::f64::consts::TAU / n_grid as f64;
    let grid: Vec<f64> = (0..n_grid).map(|j| s0 + j as f64 * h).collect();
    let (sin, cos): (Vec<f64>, Vec<f64>) = grid.iter().map(|s| s.sin_cos()).unzip();
    // stability bound for the explicit step, with room for the u D²u term
    let diffusion = 0.5 * sigma0 * sigma0 + a * rd * 2.0 * (alpha_sol.abs() * horizon).exp();
    let n_steps = (horizon / (0.2 * h * h / diffusion)).ceil() as usize;
    let dt = horizon / n_steps as f64;

    let mut v = cos.clone();
    let mut next = vec![0.0; n_grid];
    for step in 0..n_steps {
        let t = horizon - step as f64 * dt;
        let e = (alpha_sol * (horizon - t)).exp();
        let cap = e * e;
        for j in 0..n_grid {
            let (l, r) = (v[(j + n_grid - 1) % n_grid], v[(j + 1) % n_grid]);
            let vs = (r - l) / (2.0 * h);
            let vss = (r - 2.0 * v[j] + l) / (h * h);
            let mut y = v[j] * d as f64 * vss;
            if clamped {
                y = y.clamp(-cap, cap);
            }
            let f = cos[j] * (alpha_sol + 0.5 * sigma0 * sigma0) * e
                + sin[j] * mu0 * e
                + a * rd * cos[j] * cos[j] * cap
                + a / rd * y;
            next[j] = v[j] + dt * (mu0 * vs + 0.5 * sigma0 * sigma0 * vss + f);
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(v[0])
}

// ---------------------------------------------------------------------------
// Explicit tree evaluation.

/// Relative agreement required between the step kernel and the
/// recomputation in [`transition`].
const TRANSITION_RTOL: f64 = 1e-12;

/// Transition pieces recomputed from the model description: per-coordinate
/// `(a, b)` and the Malliavin weights for a given Gaussian draw.
struct Transition {
    a: Vec<f64>,
    b: Vec<f64>,
    /// Noise added to the `+G` particle.
    shift: Vec<f64>,
    v: Vec<f64>,
    /// Dense second weight.
    w: Vec<Vec<f64>>,
}

fn transition(problem: &ProblemSpec, tau: f64, g: &[f64]) -> Result<Transition> {
    let d = problem.dim;
    if let Some(coords) = problem.model.coords() {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d];
        for (i, c) in coords.iter().enumerate() {
            match *c {
                CoordKind::Brownian { drift, vol } => {
                    a[i] = 1.0;
                    b[i] = drift * tau;
                    s[i] = vol * tau.sqrt();
                }
                CoordKind::OrnsteinUhlenbeck { speed, mean, vol } => {
                    let e = (-speed * tau).exp();
                    a[i] = e;
                    b[i] = mean * -(-speed * tau).exp_m1();
                    s[i] = vol * (-(-2.0 * speed * tau).exp_m1() / (2.0 * speed)).sqrt();
                }
            }
            if !(s[i] > 0.0) {
                return Err(Error::DegenerateDiffusion { coord: i });
            }
        }
        let shift: Vec<f64> = (0..d).map(|i| s[i] * g[i]).collect();
        let v: Vec<f64> = (0..d).map(|i| a[i] * g[i] / s[i]).collect();
        let w = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diag = if i == j { a[i] * a[i] / (s[i] * s[i]) } else { 0.0 };
                        v[i] * v[j] - diag
                    })
                    .collect()
            })
            .collect();
        return Ok(Transition { a, b, shift, v, w });
    }

    let sigma = problem.model.sigma().expect("full model has sigma");
    let sit = problem.model.sigma_inv_t().expect("full model has inverse");
    if !(tau > 0.0) {
        return Err(Error::DegenerateDiffusion { coord: 0 });
    }
    let rt = tau.sqrt();
    let drift = problem
        .model
        .full_drift()
        .expect("full model has drift")
        .iter()
        .map(|m| m * tau)
        .collect();
    let shift: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|j| sigma.get(i, j) * g[j]).sum::<f64>() * rt)
        .collect();
    let v: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|j| sit.get(i, j) * g[j]).sum::<f64>() / rt)
        .collect();
    let w = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    // (σ^{-T} σ^{-1})_ij = Σ_k sit_ik sit_jk
                    let prec: f64 = (0..d).map(|k| sit.get(i, k) * sit.get(j, k)).sum();
                    v[i] * v[j] - prec / tau
                })
                .collect()
        })
        .collect();
    Ok(Transition {
        a: vec![1.0; d],
        b: drift,
        shift,
        v,
        w,
    })
}

/// The library step kernel. Propagation uses it so that the two evaluations
/// perform identical floating-point operations per step: the estimator's
/// second differences amplify ulp-level coefficient noise far past 1e-12.
fn kernel_transition(problem: &ProblemSpec, tau: f64, g: &[f64]) -> Result<Transition> {
    let d = problem.dim;
    let c = problem.model.coeffs(tau);
    let w = c.second_weight(g)?;
    Ok(Transition {
        a: c.a().to_vec(),
        b: c.b().to_vec(),
        shift: c.noise(g),
        v: c.first_weight(g)?,
        w: (0..d).map(|i| (0..d).map(|j| w.get(i, j)).collect()).collect(),
    })
}

/// Compares the kernel against the independent recomputation.
fn check_transition(kernel: &Transition, own: &Transition, draw: usize) -> Result<()> {
    let close = |a: f64, b: f64| (a - b).abs() <= TRANSITION_RTOL * a.abs().max(b.abs());
    let pairs = [
        (&kernel.a, &own.a, "a"),
        (&kernel.b, &own.b, "b"),
        (&kernel.shift, &own.shift, "noise"),
        (&kernel.v, &own.v, "V"),
    ];
    for (k, o, what) in pairs {
        if let Some(i) = (0..k.len()).find(|&i| !close(k[i], o[i])) {
            return Err(Error::DrawTape(format!(
                "draw {draw}: step kernel {what}[{i}] = {:e}, recomputed {:e}",
                k[i], o[i]
            )));
        }
    }
    for (i, (kr, or)) in kernel.w.iter().zip(&own.w).enumerate() {
        // V_i V_j minus the precision term cancels when G_i^2 is near 1
        let ok = |j: usize| {
            let scale = kr[j].abs().max(or[j].abs()).max((own.v[i] * own.v[j]).abs());
            (kr[j] - or[j]).abs() <= TRANSITION_RTOL * scale
        };
        if let Some(j) = (0..kr.len()).find(|&j| !ok(j)) {
            return Err(Error::DrawTape(format!(
                "draw {draw}: step kernel W[{i}][{j}] = {:e}, recomputed {:e}",
                kr[j], or[j]
            )));
        }
    }
    Ok(())
}

/// Triple stored densely, one per particle.
#[derive(Clone)]
struct DenseTriple {
    u: f64,
    du: Vec<f64>,
    d2u: Vec<Vec<f64>>,
}

impl DenseTriple {
    fn zero(d: usize) -> Self {
        Self {
            u: 0.0,
            du: vec![0.0; d],
            d2u: vec![vec![0.0; d]; d],
        }
    }
}

/// A particle with its history of antithetic signs (+1, 0, -1).
#[derive(Clone)]
struct Particle {
    #[allow(dead_code)]
    label: Vec<i8>,
    x: Vec<f64>,
}

struct TreeNode {
    level: usize,
    t: f64,
    particles: Vec<Particle>,
    tau: f64,
    terminal: bool,
    trans: Option<Transition>,
    /// Child particles: for each sign in (+, 0, -), for each input particle.
    child_particles: Vec<Particle>,
    children: Vec<usize>,
    result: Vec<DenseTriple>,
}

/// Evaluates one outer sample by building the whole particle tree from the
/// recorded draws and combining bottom-up without recursion.
pub fn tree_eval(
    problem: &ProblemSpec,
    schedule: &NestingSchedule,
    law: &TimeLaw,
    closure: TerminalClosure,
    x0: &[f64],
    tape: &DrawTape,
) -> Result<EstimateTriple> {
    let d = problem.dim;
    if x0.len() != d {
        return Err(invalid("x0 has the wrong dimension"));
    }
    let p = schedule.depth();
    let counts = schedule.effective_counts();
    let horizon = problem.horizon;

    let mut nodes: Vec<TreeNode> = Vec::new();
    nodes.push(TreeNode {
        level: 0,
        t: 0.0,
        particles: vec![Particle {
            label: Vec::new(),
            x: x0.to_vec(),
        }],
        tau: 0.0,
        terminal: true,
        trans: None,
        child_particles: Vec::new(),
        children: Vec::new(),
        result: Vec::new(),
    });

    // preorder expansion with an explicit stack
    let mut cursor = 0usize;
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let (level, t) = (nodes[id].level, nodes[id].t);
        if level == p && closure == TerminalClosure::Analytic {
            continue;
        }
        let draw = tape
            .draws
            .get(cursor)
            .ok_or_else(|| Error::DrawTape(format!("tape exhausted at draw {cursor}")))?;
        cursor += 1;
        if draw.gaussian.len() != d {
            return Err(Error::DrawTape(format!(
                "draw {} has {} Gaussian entries, expected {d}",
                cursor - 1,
                draw.gaussian.len()
            )));
        }
        let remaining = horizon - t;
        let terminal = draw.tau >= remaining || level == p;
        let tau = draw.tau.min(remaining);
        let tr = kernel_transition(problem, tau, &draw.gaussian)?;
        check_transition(&tr, &transition(problem, tau, &draw.gaussian)?, cursor - 1)?;

        let mut kids = Vec::with_capacity(3 * nodes[id].particles.len());
        for sign in [1i8, 0, -1] {
            for part in &nodes[id].particles {
                let x = (0..d)
                    .map(|i| tr.a[i] * part.x[i] + tr.b[i] + sign as f64 * tr.shift[i])
                    .collect();
                let mut label = part.label.clone();
                label.push(sign);
                kids.push(Particle { label, x });
            }
        }
        let node = &mut nodes[id];
        node.tau = tau;
        node.terminal = terminal;
        node.trans = Some(tr);
        node.child_particles = kids;
        if terminal {
            continue;
        }
        let reps = counts[level + 1];
        let first = nodes.len();
        for _ in 0..reps {
            let parts = nodes[id].child_particles.clone();
            nodes.push(TreeNode {
                level: level + 1,
                t: t + tau,
                particles: parts,
                tau: 0.0,
                terminal: true,
                trans: None,
                child_particles: Vec::new(),
                children: Vec::new(),
                result: Vec::new(),
            });
        }
        nodes[id].children = (first..first + reps).collect();
        for c in (first..first + reps).rev() {
            stack.push(c);
        }
    }
    if cursor != tape.draws.len() {
        return Err(Error::DrawTape(format!(
            "tape holds {} draws, tree consumed {cursor}",
            tape.draws.len()
        )));
    }

    // children always come after their parent
    for id in (0..nodes.len()).rev() {
        let node = &nodes[id];
        let m = node.particles.len();
        let result = match &node.trans {
            None => node
                .particles
                .iter()
                .map(|part| {
                    let g = problem
                        .terminal
                        .gradient(&part.x)
                        .ok_or_else(|| invalid("terminal gradient missing"))?;
                    let h = problem
                        .terminal
                        .hessian(&part.x)
                        .ok_or_else(|| invalid("terminal Hessian missing"))?;
                    Ok(DenseTriple {
                        u: problem.terminal.value(&part.x),
                        du: g,
                        d2u: (0..d).map(|i| (0..d).map(|j| h.get(i, j)).collect()).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            Some(tr) => {
                let vals: Vec<f64> = if node.terminal {
                    node.child_particles
                        .iter()
                        .map(|q| problem.terminal.value(&q.x))
                        .collect()
                } else {
                    let inv = 1.0 / node.children.len() as f64;
                    let mut avg = vec![DenseTriple::zero(d); 3 * m];
                    for &c in &node.children {
                        for (a, r) in avg.iter_mut().zip(&nodes[c].result) {
                            a.u += r.u;
                            for i in 0..d {
                                a.du[i] += r.du[i];
                                for j in 0..d {
                                    a.d2u[i][j] += r.d2u[i][j];
                                }
                            }
                        }
                    }
                    for a in avg.iter_mut() {
                        a.u *= inv;
                        a.du.iter_mut().for_each(|v| *v *= inv);
                        a.d2u.iter_mut().flatten().for_each(|v| *v *= inv);
                    }
                    let t_next = node.t + node.tau;
                    node.child_particles
                        .iter()
                        .zip(&avg)
                        .map(|(q, a)| {
                            let theta = SymMat::from_fn(d, |i, j| a.d2u[i][j]);
                            problem.driver.eval(t_next, &q.x, a.u, &a.du, theta.view())
                        })
                        .collect()
                };
                let weight = if !node.terminal {
                    1.0 / law.density(node.tau)
                } else if node.level < p {
                    1.0 / law.survival(horizon - node.t)
                } else {
                    1.0
                };
                (0..m)
                    .map(|r| {
                        let (plus, zero, minus) = (vals[r], vals[m + r], vals[2 * m + r]);
                        let sym = 0.5 * (plus + minus) * weight;
                        let anti = 0.5 * (plus - minus) * weight;
                        let curv = 0.5 * (plus + minus - 2.0 * zero) * weight;
                        DenseTriple {
                            u: sym,
                            du: tr.v.iter().map(|v| anti * v).collect(),
                            d2u: tr.w.iter().map(|row| row.iter().map(|w| curv * w).collect()).collect(),
                        }
                    })
                    .collect()
            }
        };
        nodes[id].result = result;
    }

    let root = &nodes[0].result[0];
    Ok(EstimateTriple {
        u: root.u,
        du: root.du.clone(),
        d2u: SymMat::from_fn(d, |i, j| root.d2u[i][j]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{NestedEstimator, NodeDraw};
    use crate::problems::{cir_problem, hjb_problem, CirParams};

    fn small_cfg() -> CirPathConfig {
        CirPathConfig {
            n_steps: 50,
            n_paths: 20_000,
        }
    }

    #[test]
    fn zero_drift_gives_exact_utility() {
        let p = HjbParams {
            mu: 0.0,
            ..HjbParams::default()
        };
        let v = zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, small_cfg(), 1, 1).unwrap();
        assert!((v.value + (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(v.stderr, 0.0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let p = HjbParams {
            rho_corr: 1.0,
            ..HjbParams::default()
        };
        assert!(zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, small_cfg(), 1, 1).is_err());
        let p = HjbParams::default();
        assert!(zariphopoulou_value_1d(&p, 0.0, 1.0, 0.0, small_cfg(), 1, 1).is_err());
        let bad = CirPathConfig {
            n_steps: 0,
            n_paths: 10,
        };
        assert!(zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, bad, 1, 1).is_err());
        assert!(
            zariphopoulou_value_nd(&[HjbParams { rho_corr: 0.3, ..p }], 0.0, 1.0, &[0.3], small_cfg(), 1, 1).is_err()
        );
    }

    #[test]
    fn value_near_deterministic_approximation() {
        // with Y frozen at m the value is -e^{-1} e^{-½ mu² T / m}
        let p = HjbParams::default();
        let v = zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, small_cfg(), 7, 1).unwrap();
        let frozen = -(-1.0f64).exp() * (-0.5 * 0.0025 / 0.3f64).exp();
        assert!((v.value - frozen).abs() < 2e-3, "{} vs {frozen}", v.value);
        assert!(v.value > frozen);
    }

    #[test]
    fn shard_count_does_not_change_value() {
        let p = HjbParams::default();
        let a = zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, small_cfg(), 3, 1).unwrap();
        let b = zariphopoulou_value_1d(&p, 0.0, 1.0, 0.3, small_cfg(), 3, 7).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
    }

    #[test]
    fn identical_assets_multiply() {
        let p = HjbParams::default();
        let one = zariphopoulou_value_nd(&[p], 0.0, 1.0, &[0.3], small_cfg(), 5, 1).unwrap();
        let three = zariphopoulou_value_nd(&[p; 3], 0.0, 1.0, &[0.3; 3], small_cfg(), 5, 1).unwrap();
        let factor = one.value / -(-1.0f64).exp();
        // independent streams per factor: agree within Monte Carlo error
        let expect = -(-1.0f64).exp() * factor.powi(3);
        assert!((three.value - expect).abs() < 4.0 * three.stderr + 1e-12);

        let flat = HjbParams { mu: 0.0, ..p };
        let mixed = zariphopoulou_value_nd(&[p, flat], 0.0, 1.0, &[0.3, 0.3], small_cfg(), 5, 1).unwrap();
        assert!((mixed.value - one.value).abs() < 1e-15);
    }

    #[test]
    fn joint_and_factorised_agree() {
        let p = HjbParams::default();
        let f = zariphopoulou_value_nd(&[p; 3], 0.0, 1.0, &[0.3; 3], small_cfg(), 11, 1).unwrap();
        let j = zariphopoulou_value_nd_joint(&[p; 3], 0.0, 1.0, &[0.3; 3], small_cfg(), 12, 1).unwrap();
        let se = (f.stderr.powi(2) + j.stderr.powi(2)).sqrt();
        assert!((f.value - j.value).abs() < 3.0 * se, "{f:?} {j:?}");
    }

    #[test]
    fn toy_pde_reproduces_closed_form_without_clamp() {
        let p = ToyParams::default();
        for d in [1, 3, 5] {
            let s0 = 0.5 * d as f64;
            let closed = 0.1f64.exp() * s0.cos();
            let v = toy_pde_value(&p, d, s0, 256, false).unwrap();
            assert!((v - closed).abs() < 2e-4, "d={d}: {v} vs {closed}");
        }
        // the clamp can never bind in dimension one
        let v = toy_pde_value(&p, 1, 0.5, 256, true).unwrap();
        assert!((v - 0.1f64.exp() * 0.5f64.cos()).abs() < 2e-4);
    }

    #[test]
    fn toy_pde_grid_convergence() {
        let p = ToyParams::default();
        let coarse = toy_pde_value(&p, 3, 1.5, 128, true).unwrap();
        let fine = toy_pde_value(&p, 3, 1.5, 256, true).unwrap();
        assert!((coarse - fine).abs() < 2e-4, "{coarse} {fine}");
        // the clamp binds along the paths and lifts the value well above
        // the closed form 0.0782
        assert!(fine > 0.095 && fine < 0.103, "{fine}");
    }

    #[test]
    fn analytic_reference_values() {
        let cir = cir_problem(CirParams::default(), 5).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(analytic_reference(&cir, 1.0, &x).unwrap(), cir.terminal.value(&x));
        assert!((analytic_reference(&cir, 0.0, &[0.3; 5]).unwrap() - 0.057_914_722_392_027_48).abs() < 1e-15);
        assert!(analytic_reference(&cir, 0.0, &[0.3; 4]).is_err());
        let hjb = hjb_problem(HjbParams::default(), 1).unwrap();
        assert!(analytic_reference(&hjb, 0.0, &[1.0, 0.3]).is_err());
    }

    fn tape(draws: &[(f64, &[f64])]) -> DrawTape {
        DrawTape {
            draws: draws
                .iter()
                .map(|(tau, g)| NodeDraw {
                    tau: *tau,
                    gaussian: g.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn constant_terminal_single_path() {
        use crate::problems::{Terminal, ZeroDriver};
        use std::sync::Arc;
        struct Const;
        impl Terminal for Const {
            fn value(&self, _x: &[f64]) -> f64 {
                2.5
            }
        }
        let mut prob = cir_problem(CirParams::default(), 1).unwrap();
        prob.driver = Arc::new(ZeroDriver);
        prob.terminal = Arc::new(Const);
        let law = TimeLaw::exponential(0.5).unwrap();
        let sched = NestingSchedule::new(vec![1, 1], 0).unwrap();
        // first switch beyond the horizon: one terminal node at level 0
        let t = tape(&[(3.0, &[0.4])]);
        let r = tree_eval(&prob, &sched, &law, TerminalClosure::Antithetic, &[0.3], &t).unwrap();
        assert!((r.u - 2.5 / law.survival(1.0)).abs() < 1e-12);
        assert_eq!(r.du[0], 0.0);
        // switch before the horizon then a level-1 terminal node: driver is
        // zero, so nothing survives
        let t = tape(&[(0.3, &[0.4]), (0.2, &[-1.0])]);
        let r = tree_eval(&prob, &sched, &law, TerminalClosure::Antithetic, &[0.3], &t).unwrap();
        assert_eq!(r.u, 0.0);
    }

    #[test]
    fn tape_mismatch_is_reported() {
        let prob = cir_problem(CirParams::default(), 2).unwrap();
        let law = TimeLaw::exponential(0.1).unwrap();
        let sched = NestingSchedule::new(vec![1, 1], 0).unwrap();
        let short = tape(&[(0.3, &[0.1, 0.2])]);
        assert!(matches!(
            tree_eval(&prob, &sched, &law, TerminalClosure::Antithetic, &[0.3, 0.3], &short),
            Err(Error::DrawTape(_))
        ));
        let wrong_dim = tape(&[(3.0, &[0.1])]);
        assert!(matches!(
            tree_eval(
                &prob,
                &sched,
                &law,
                TerminalClosure::Antithetic,
                &[0.3, 0.3],
                &wrong_dim
            ),
            Err(Error::DrawTape(_))
        ));
        let long = tape(&[(3.0, &[0.1, 0.2]), (3.0, &[0.1, 0.2])]);
        assert!(matches!(
            tree_eval(&prob, &sched, &law, TerminalClosure::Antithetic, &[0.3, 0.3], &long),
            Err(Error::DrawTape(_))
        ));
    }

    #[test]
    fn matches_estimator_on_recorded_draws() {
        let prob = cir_problem(CirParams::default(), 2).unwrap();
        let law = TimeLaw::exponential(0.8).unwrap();
        for (counts, closure) in [
            (vec![1, 1], TerminalClosure::Antithetic),
            (vec![1, 2, 2], TerminalClosure::Antithetic),
            (vec![1, 2, 2], TerminalClosure::Analytic),
        ] {
            let sched = NestingSchedule::new(counts, 0).unwrap();
            let est = NestedEstimator::new(&prob, &sched, law).with_closure(closure);
            for seed in 0..5 {
                let (main, tape) = est.record_outer_sample(&prob.default_x0, seed, 0).unwrap();
                let tree = tree_eval(&prob, &sched, &law, closure, &prob.default_x0, &tape).unwrap();
                let tol = |a: f64| 1e-12 * a.abs().max(1.0);
                assert!((main.u - tree.u).abs() <= tol(main.u), "{} {}", main.u, tree.u);
                for i in 0..2 {
                    assert!((main.du[i] - tree.du[i]).abs() <= tol(main.du[i]));
                    for j in 0..2 {
                        assert!((main.d2u.get(i, j) - tree.d2u.get(i, j)).abs() <= tol(main.d2u.get(i, j)));
                    }
                }
            }
        }
    }
}
