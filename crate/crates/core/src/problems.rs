//! Benchmark problems packaged as [`ProblemSpec`]s.
//!
//! Every problem is written against a non-degenerate base generator with an
//! exact Gaussian transition; whatever the true generator adds on top of the
//! base one is moved into the driver, which always receives
//! `(t, x, u, Du, D²u)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaussian_step::{CoordKind, StepModel};
use crate::smallnum::{SymMat, SymRef};

/// Non-linearity `f(t, x, y, z, θ)` with `y = u`, `z = Du`, `θ = D²u`.
pub trait Driver: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], theta: SymRef<'_>) -> f64;
}

/// Terminal condition `g`. Gradient and Hessian are optional and only used by
/// the analytic closure of the deepest level.
pub trait Terminal: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn hessian(&self, _x: &[f64]) -> Option<SymMat> {
        None
    }
}

pub type ReferenceFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub model: StepModel,
    pub driver: Arc<dyn Driver>,
    pub terminal: Arc<dyn Terminal>,
    /// Closed-form solution `u(t, x)`, when one is known.
    pub reference: Option<ReferenceFn>,
    pub default_x0: Vec<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("model", &self.model)
            .field("has_reference", &self.reference.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub fn reference_at(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.reference.as_ref().map(|r| r(t, x))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn eval(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _theta: SymRef<'_>) -> f64 {
        0.0
    }
}

/// `g(x) = cos(Σ x_i)`.
#[derive(Debug, Clone, Copy)]
pub struct CosSum;

impl Terminal for CosSum {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>().cos()
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s = x.iter().sum::<f64>().sin();
        Some(vec![-s; x.len()])
    }

    fn hessian(&self, x: &[f64]) -> Option<SymMat> {
        let c = x.iter().sum::<f64>().cos();
        Some(SymMat::from_fn(x.len(), |_, _| -c))
    }
}

/// Exponential utility of the first coordinate, `g(x) = -exp(-eta x_0)`.
#[derive(Debug, Clone, Copy)]
pub struct ExpUtility {
    pub eta: f64,
}

impl Terminal for ExpUtility {
    fn value(&self, x: &[f64]) -> f64 {
        -(-self.eta * x[0]).exp()
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        g[0] = self.eta * (-self.eta * x[0]).exp();
        Some(g)
    }

    fn hessian(&self, x: &[f64]) -> Option<SymMat> {
        let mut h = SymMat::zeros(x.len());
        h.set(0, 0, -self.eta * self.eta * (-self.eta * x[0]).exp());
        Some(h)
    }
}

/// `g(x) = Σ c_i x_i`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub coeffs: Vec<f64>,
}

impl Terminal for Linear {
    fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(self.coeffs.clone())
    }

    fn hessian(&self, x: &[f64]) -> Option<SymMat> {
        Some(SymMat::zeros(x.len()))
    }
}

/// `g(x) = |x|²`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredNorm;

impl Terminal for SquaredNorm {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| 2.0 * v).collect())
    }

    fn hessian(&self, x: &[f64]) -> Option<SymMat> {
        let mut h = SymMat::identity(x.len());
        for i in 0..x.len() {
            h.set(i, i, 2.0);
        }
        Some(h)
    }
}

// ---------------------------------------------------------------------------
// Degenerate CIR problem rewritten against an OU base generator.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirParams {
    /// Coupling of the `u Σ Du` term.
    pub a: f64,
    /// Decay rate of the exact solution.
    pub alpha_sol: f64,
    pub k_hat: f64,
    pub m_hat: f64,
    pub sigma_hat: f64,
    /// Volatility of the OU base process.
    pub sigma_bar: f64,
    pub horizon: f64,
    /// Reject parameters violating `2 k m > sigma²`.
    pub enforce_feller: bool,
}

impl Default for CirParams {
    fn default() -> Self {
        let sigma_hat: f64 = 0.5;
        let m_hat: f64 = 0.3;
        Self {
            a: 0.1,
            alpha_sol: 0.2,
            k_hat: 0.1,
            m_hat,
            sigma_hat,
            sigma_bar: sigma_hat * m_hat.sqrt(),
            horizon: 1.0,
            enforce_feller: false,
        }
    }
}

impl CirParams {
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.k_hat * self.m_hat > self.sigma_hat * self.sigma_hat
    }
}

#[derive(Debug, Clone)]
pub struct CirDriver {
    params: CirParams,
    dim: usize,
}

impl Driver for CirDriver {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], theta: SymRef<'_>) -> f64 {
        let CirParams {
            a,
            alpha_sol,
            k_hat,
            m_hat,
            sigma_hat,
            sigma_bar,
            horizon,
            ..
        } = self.params;
        let s2 = sigma_hat * sigma_hat;
        let sum: f64 = x.iter().sum();
        let (sin, cos) = sum.sin_cos();
        let decay = (-alpha_sol * (horizon - t)).exp();

        // difference between the CIR and OU diffusion terms
        let mut correction = 0.0;
        let mut level = -alpha_sol;
        let mut pull = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            correction += 0.5 * (s2 * xi - sigma_bar * sigma_bar) * theta.get(i, i);
            level += 0.5 * s2 * xi;
            pull += k_hat * (m_hat - xi);
        }
        let zsum: f64 = z.iter().sum();
        correction
            + a * y * zsum
            + level * cos * decay
            + pull * sin * decay
            + a * self.dim as f64 * cos * sin * decay * decay
    }
}

pub fn cir_problem(params: CirParams, d: usize) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if params.enforce_feller && !params.feller_satisfied() {
        return Err(invalid(format!(
            "Feller condition violated: 2 k m = {} <= sigma^2 = {}",
            2.0 * params.k_hat * params.m_hat,
            params.sigma_hat * params.sigma_hat
        )));
    }
    if !(params.sigma_bar > 0.0) || !(params.horizon > 0.0) {
        return Err(invalid("sigma_bar and horizon must be positive"));
    }
    let model = StepModel::ornstein_uhlenbeck(d, params.k_hat, params.m_hat, params.sigma_bar)?;
    let (alpha, horizon) = (params.alpha_sol, params.horizon);
    Ok(ProblemSpec {
        name: "cir".into(),
        dim: d,
        horizon,
        model,
        driver: Arc::new(CirDriver { params, dim: d }),
        terminal: Arc::new(CosSum),
        reference: Some(Arc::new(move |t, x: &[f64]| {
            x.iter().sum::<f64>().cos() * (-alpha * (horizon - t)).exp()
        })),
        default_x0: vec![params.m_hat; d],
    })
}

// ---------------------------------------------------------------------------
// Full non-linear toy problem with a clamped u·trace(D²u) term.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyParams {
    pub a: f64,
    pub mu0: f64,
    pub sigma0: f64,
    pub alpha_sol: f64,
    pub horizon: f64,
    /// Every coordinate of the default starting point.
    pub x0: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            mu0: 0.2,
            sigma0: 1.0,
            alpha_sol: 0.1,
            horizon: 1.0,
            x0: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDriver {
    params: ToyParams,
    dim: usize,
}

impl Driver for ToyDriver {
    fn eval(&self, t: f64, x: &[f64], y: f64, _z: &[f64], theta: SymRef<'_>) -> f64 {
        let ToyParams {
            a,
            mu0,
            sigma0,
            alpha_sol,
            horizon,
            ..
        } = self.params;
        let rd = (self.dim as f64).sqrt();
        let sum: f64 = x.iter().sum();
        let (sin, cos) = sum.sin_cos();
        let growth = (alpha_sol * (horizon - t)).exp();
        let cap = growth * growth;
        let clamped = (y * theta.trace()).clamp(-cap, cap);
        cos * (alpha_sol + 0.5 * sigma0 * sigma0) * growth
            + sin * mu0 * growth
            + a * rd * cos * cos * cap
            + a / rd * clamped
    }
}

pub fn toy_fullnl_problem(params: ToyParams, d: usize) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if !(params.sigma0 > 0.0) || !(params.horizon > 0.0) {
        return Err(invalid("sigma0 and horizon must be positive"));
    }
    let df = d as f64;
    let model = StepModel::brownian(&vec![params.mu0 / df; d], &vec![params.sigma0 / df.sqrt(); d])?;
    let (alpha, horizon) = (params.alpha_sol, params.horizon);
    Ok(ProblemSpec {
        name: "toy".into(),
        dim: d,
        horizon,
        model,
        driver: Arc::new(ToyDriver { params, dim: d }),
        terminal: Arc::new(CosSum),
        reference: Some(Arc::new(move |t, x: &[f64]| {
            (alpha * (horizon - t)).exp() * x.iter().sum::<f64>().cos()
        })),
        default_x0: vec![params.x0; d],
    })
}

// ---------------------------------------------------------------------------
// Exponential-utility portfolio problem with Heston assets.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HjbParams {
    /// Asset drift.
    pub mu: f64,
    /// Volatility of the variance process.
    pub c: f64,
    /// Mean reversion speed of the variance.
    pub k: f64,
    /// Long-run variance.
    pub m: f64,
    pub y0: f64,
    /// Correlation between the asset and its variance.
    pub rho_corr: f64,
    /// Absolute risk aversion.
    pub eta: f64,
    pub x0_wealth: f64,
    /// Cap on the amount invested in each asset.
    pub control_cap: f64,
    /// Volatility of the wealth coordinate in the base generator.
    pub sigma_bar: f64,
    pub horizon: f64,
}

impl Default for HjbParams {
    fn default() -> Self {
        Self {
            mu: 0.05,
            c: 0.2,
            k: 0.1,
            m: 0.3,
            y0: 0.3,
            rho_corr: 0.0,
            eta: 1.0,
            x0_wealth: 1.0,
            control_cap: 4.0,
            sigma_bar: 0.1,
            horizon: 1.0,
        }
    }
}

impl HjbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.y0 > 0.0) {
            return Err(invalid("initial variance y0 must be positive"));
        }
        if !(self.control_cap > 0.0) {
            return Err(invalid("control cap M must be positive"));
        }
        if !(self.eta > 0.0) {
            return Err(invalid("risk aversion eta must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.rho_corr) {
            return Err(invalid("correlation must lie in [-1, 1]"));
        }
        if !(self.c > 0.0 && self.m > 0.0 && self.sigma_bar > 0.0 && self.horizon > 0.0) {
            return Err(invalid("c, m, sigma_bar and horizon must be positive"));
        }
        Ok(())
    }
}

/// Range searched by the Hamiltonian supremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlBound {
    /// `0 <= amount <= cap` per asset.
    Capped(f64),
    /// Supremum over all real amounts. Unbounded when `y θ_00 >= 0`; only
    /// for experiments.
    Unbounded,
}

/// `sup_{e in [0, cap]} (½ e² curv + e slope)`, maximised exactly over the
/// candidate set {0, cap, clamped vertex}.
pub fn capped_quadratic_sup(curv: f64, slope: f64, cap: f64) -> f64 {
    let q = |e: f64| 0.5 * e * e * curv + e * slope;
    let mut best = q(0.0).max(q(cap));
    if curv != 0.0 {
        let vertex = (-slope / curv).clamp(0.0, cap);
        best = best.max(q(vertex));
    }
    best
}

#[derive(Debug, Clone)]
pub struct HjbDriver {
    params: HjbParams,
    bound: ControlBound,
}

impl HjbDriver {
    pub fn new(params: HjbParams) -> Self {
        Self {
            params,
            bound: ControlBound::Capped(params.control_cap),
        }
    }

    /// Driver without the control cap. The supremum divides by `y θ_00`
    /// and is infinite when that product is non-negative.
    pub fn new_untruncated_unchecked(params: HjbParams) -> Self {
        Self {
            params,
            bound: ControlBound::Unbounded,
        }
    }
}

impl Driver for HjbDriver {
    fn eval(&self, _t: f64, x: &[f64], _y: f64, z: &[f64], theta: SymRef<'_>) -> f64 {
        let HjbParams {
            mu,
            c,
            m,
            rho_corr,
            sigma_bar,
            ..
        } = self.params;
        let t00 = theta.get(0, 0);
        let mut f = -0.5 * sigma_bar * sigma_bar * t00;
        for i in 1..x.len() {
            let var = x[i];
            f += 0.5 * c * c * (var - m) * theta.get(i, i);
            let curv = var * t00;
            let slope = mu * z[0] + rho_corr * c * var * theta.get(0, i);
            f += match self.bound {
                ControlBound::Capped(cap) => capped_quadratic_sup(curv, slope, cap),
                ControlBound::Unbounded => {
                    if curv < 0.0 {
                        -slope * slope / (2.0 * curv)
                    } else {
                        f64::INFINITY
                    }
                }
            };
        }
        f
    }
}

/// State `(wealth, v_1, ..., v_n)`: wealth is Brownian with volatility
/// `sigma_bar`, each variance is OU with volatility `c sqrt(m)`.
pub fn hjb_problem(params: HjbParams, n_assets: usize) -> Result<ProblemSpec> {
    build_hjb(params, n_assets, HjbDriver::new(params))
}

pub fn hjb_problem_untruncated_unchecked(params: HjbParams, n_assets: usize) -> Result<ProblemSpec> {
    build_hjb(params, n_assets, HjbDriver::new_untruncated_unchecked(params))
}

fn build_hjb(params: HjbParams, n_assets: usize, driver: HjbDriver) -> Result<ProblemSpec> {
    params.validate()?;
    if n_assets == 0 {
        return Err(invalid("need at least one risky asset"));
    }
    let mut coords = vec![CoordKind::Brownian {
        drift: 0.0,
        vol: params.sigma_bar,
    }];
    coords.extend(std::iter::repeat_n(
        CoordKind::OrnsteinUhlenbeck {
            speed: params.k,
            mean: params.m,
            vol: params.c * params.m.sqrt(),
        },
        n_assets,
    ));
    let mut x0 = vec![params.x0_wealth];
    x0.extend(std::iter::repeat_n(params.y0, n_assets));
    Ok(ProblemSpec {
        name: "hjb".into(),
        dim: n_assets + 1,
        horizon: params.horizon,
        model: StepModel::diagonal(coords)?,
        driver: Arc::new(driver),
        terminal: Arc::new(ExpUtility { eta: params.eta }),
        reference: None,
        default_x0: x0,
    })
}

// ---------------------------------------------------------------------------
// Linear diagnostics: f = 0, so u(t, x) = E[g(X_T) | X_t = x].

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticModel {
    /// Driftless Brownian motion with unit volatility.
    Brownian,
    /// OU with speed 0.5, mean 0.2, volatility 0.4.
    OrnsteinUhlenbeck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticTerminal {
    /// `Σ x_i / (i + 1)`
    Linear,
    /// `|x|²`
    Quadratic,
    /// `cos(Σ x_i)`
    Cos,
}

pub fn diagnostic_problem(model: DiagnosticModel, terminal: DiagnosticTerminal, d: usize) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    let horizon = 1.0;
    let step = match model {
        DiagnosticModel::Brownian => StepModel::brownian(&vec![0.0; d], &vec![1.0; d])?,
        DiagnosticModel::OrnsteinUhlenbeck => StepModel::ornstein_uhlenbeck(d, 0.5, 0.2, 0.4)?,
    };
    let coeffs: Vec<f64> = (0..d).map(|i| 1.0 / (i + 1) as f64).collect();
    let term: Arc<dyn Terminal> = match terminal {
        DiagnosticTerminal::Linear => Arc::new(Linear { coeffs: coeffs.clone() }),
        DiagnosticTerminal::Quadratic => Arc::new(SquaredNorm),
        DiagnosticTerminal::Cos => Arc::new(CosSum),
    };
    let moments_model = step.clone();
    let reference: ReferenceFn = Arc::new(move |t, x: &[f64]| {
        let (mean, var) = moments_model
            .transition_moments(horizon - t, x)
            .expect("diagnostic models are diagonal");
        match terminal {
            DiagnosticTerminal::Linear => coeffs.iter().zip(&mean).map(|(c, m)| c * m).sum(),
            DiagnosticTerminal::Quadratic => mean.iter().zip(&var).map(|(m, v)| m * m + v).sum(),
            DiagnosticTerminal::Cos => mean.iter().sum::<f64>().cos() * (-0.5 * var.iter().sum::<f64>()).exp(),
        }
    });
    let name = format!(
        "diagnostic-{}-{}",
        match model {
            DiagnosticModel::Brownian => "bm",
            DiagnosticModel::OrnsteinUhlenbeck => "ou",
        },
        match terminal {
            DiagnosticTerminal::Linear => "linear",
            DiagnosticTerminal::Quadratic => "quadratic",
            DiagnosticTerminal::Cos => "cos",
        }
    );
    Ok(ProblemSpec {
        name,
        dim: d,
        horizon,
        model: step,
        driver: Arc::new(ZeroDriver),
        terminal: term,
        reference: Some(reference),
        default_x0: (0..d).map(|i| 0.1 * (i + 1) as f64).collect(),
    })
}

/// All six model/terminal combinations.
pub fn diagnostic_problems(d: usize) -> Result<Vec<ProblemSpec>> {
    let mut out = Vec::new();
    for model in [DiagnosticModel::Brownian, DiagnosticModel::OrnsteinUhlenbeck] {
        for g in [
            DiagnosticTerminal::Linear,
            DiagnosticTerminal::Quadratic,
            DiagnosticTerminal::Cos,
        ] {
            out.push(diagnostic_problem(model, g, d)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rand_time::RngStream;
    use rand::Rng;

    fn theta_from(d: usize, f: impl Fn(usize, usize) -> f64) -> SymMat {
        SymMat::from_fn(d, f)
    }

    // −∂t u − L u − f(t, x, u, Du, D²u) with derivatives supplied by `derivs`
    fn residual(
        p: &ProblemSpec,
        t: f64,
        x: &[f64],
        generator: impl Fn(&[f64], &[f64], &SymMat) -> f64,
        derivs: impl Fn(f64, &[f64]) -> (f64, f64, Vec<f64>, SymMat),
    ) -> f64 {
        let (u, ut, du, d2u) = derivs(t, x);
        -ut - generator(x, &du, &d2u) - p.driver.eval(t, x, u, &du, d2u.view())
    }

    fn fd_derivs(p: &ProblemSpec) -> impl Fn(f64, &[f64]) -> (f64, f64, Vec<f64>, SymMat) + '_ {
        move |t, x| {
            let h = 1e-4;
            let r = |t: f64, x: &[f64]| p.reference_at(t, x).unwrap();
            let d = x.len();
            let u = r(t, x);
            let ut = (r(t + h, x) - r(t - h, x)) / (2.0 * h);
            let shift = |i: usize, s: f64, j: usize, s2: f64| {
                let mut y = x.to_vec();
                y[i] += s;
                y[j] += s2;
                r(t, &y)
            };
            let du = (0..d)
                .map(|i| (shift(i, h, i, 0.0) - shift(i, -h, i, 0.0)) / (2.0 * h))
                .collect();
            let d2u = theta_from(d, |i, j| {
                (shift(i, h, j, h) - shift(i, h, j, -h) - shift(i, -h, j, h) + shift(i, -h, j, -h)) / (4.0 * h * h)
            });
            (u, ut, du, d2u)
        }
    }

    fn cir_exact(p: CirParams) -> impl Fn(f64, &[f64]) -> (f64, f64, Vec<f64>, SymMat) {
        move |t, x| {
            let d = x.len();
            let e = (-p.alpha_sol * (p.horizon - t)).exp();
            let s: f64 = x.iter().sum();
            let u = s.cos() * e;
            (
                u,
                p.alpha_sol * u,
                vec![-s.sin() * e; d],
                theta_from(d, |_, _| -s.cos() * e),
            )
        }
    }

    fn ou_generator(p: CirParams) -> impl Fn(&[f64], &[f64], &SymMat) -> f64 {
        move |x, du, d2u| {
            (0..x.len())
                .map(|i| p.k_hat * (p.m_hat - x[i]) * du[i] + 0.5 * p.sigma_bar * p.sigma_bar * d2u.get(i, i))
                .sum()
        }
    }

    #[test]
    fn default_cir_parameters_violate_feller() {
        let p = CirParams::default();
        assert!(!p.feller_satisfied());
        assert!(cir_problem(p, 5).is_ok());
        let strict = CirParams {
            enforce_feller: true,
            ..p
        };
        assert!(cir_problem(strict, 5).is_err());
        let ok = CirParams {
            sigma_hat: 0.2,
            enforce_feller: true,
            ..p
        };
        assert!(cir_problem(ok, 5).is_ok());
    }

    #[test]
    fn cir_residual_vanishes() {
        let params = CirParams::default();
        let mut rng = RngStream::new(1).rng();
        for d in [1, 2, 5] {
            let p = cir_problem(params, d).unwrap();
            for _ in 0..100 {
                let t = rng.random::<f64>();
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
                let exact = residual(&p, t, &x, ou_generator(params), cir_exact(params));
                assert!(exact.abs() < 1e-10, "exact residual {exact}");
                let fd = residual(&p, t, &x, ou_generator(params), fd_derivs(&p));
                assert!(fd.abs() < 1e-6, "fd residual {fd}");
            }
        }
    }

    #[test]
    fn cir_reference_values() {
        let p = cir_problem(CirParams::default(), 5).unwrap();
        let x = [0.2, -0.4, 1.1, 0.0, 0.3];
        assert_eq!(p.reference_at(1.0, &x).unwrap(), p.terminal.value(&x));
        // cos(1.5) e^{-0.2}, mpmath
        assert!((p.reference_at(0.0, &[0.3; 5]).unwrap() - 0.057_914_722_392_027_48).abs() < 1e-15);
    }

    fn toy_exact(p: ToyParams) -> impl Fn(f64, &[f64]) -> (f64, f64, Vec<f64>, SymMat) {
        move |t, x| {
            let d = x.len();
            let e = (p.alpha_sol * (p.horizon - t)).exp();
            let s: f64 = x.iter().sum();
            let u = s.cos() * e;
            (
                u,
                -p.alpha_sol * u,
                vec![-s.sin() * e; d],
                theta_from(d, |_, _| -s.cos() * e),
            )
        }
    }

    #[test]
    fn toy_residual_vanishes_where_clamp_inactive() {
        let params = ToyParams::default();
        let mut rng = RngStream::new(2).rng();
        for d in [1, 3, 5] {
            let p = toy_fullnl_problem(params, d).unwrap();
            let df = d as f64;
            let gen = |_: &[f64], du: &[f64], d2u: &SymMat| {
                du.iter().map(|v| params.mu0 / df * v).sum::<f64>() + 0.5 * params.sigma0.powi(2) / df * d2u.trace()
            };
            let mut checked = 0;
            while checked < 100 {
                let t = rng.random::<f64>();
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (u, _, _, d2u) = toy_exact(params)(t, &x);
                let cap = (2.0 * params.alpha_sol * (params.horizon - t)).exp();
                if (u * d2u.trace()).abs() > cap {
                    continue;
                }
                checked += 1;
                let exact = residual(&p, t, &x, gen, toy_exact(params));
                assert!(exact.abs() < 1e-10, "exact residual {exact}");
                let fd = residual(&p, t, &x, gen, fd_derivs(&p));
                assert!(fd.abs() < 1e-6, "fd residual {fd}");
            }
        }
    }

    #[test]
    fn toy_reference_value() {
        let p = toy_fullnl_problem(ToyParams::default(), 5).unwrap();
        // e^{0.1} cos(2.5), mpmath
        assert!((p.reference_at(0.0, &p.default_x0).unwrap() + 0.885_400_625_104_448_4).abs() < 1e-14);
    }

    #[test]
    fn toy_clamp_is_identity_when_inactive() {
        let p = toy_fullnl_problem(ToyParams::default(), 2).unwrap();
        let x = [0.1, 0.2];
        let z = [0.0, 0.0];
        let base = p.driver.eval(0.5, &x, 0.0, &z, SymMat::zeros(2).view());
        let theta = SymMat::from_fn(2, |i, j| if i == j { 0.3 } else { 0.0 });
        let with = p.driver.eval(0.5, &x, 0.8, &z, theta.view());
        let expected = 0.1 / 2f64.sqrt() * 0.8 * 0.6;
        assert!((with - base - expected).abs() < 1e-15);
        // far outside the cap the term saturates
        let big = SymMat::from_fn(2, |i, j| if i == j { 1e6 } else { 0.0 });
        let sat = p.driver.eval(0.5, &x, 1.0, &z, big.view());
        let cap = (2.0 * 0.1 * 0.5f64).exp();
        assert!((sat - base - 0.1 / 2f64.sqrt() * cap).abs() < 1e-13);
    }

    #[test]
    fn hjb_sup_examples() {
        // z = 0 and no cross term: max(0, ½ M² y θ)
        let cap = 4.0;
        assert_eq!(capped_quadratic_sup(0.3 * -0.5, 0.0, cap), 0.0);
        assert!((capped_quadratic_sup(0.3 * 0.5, 0.0, cap) - 0.5 * 16.0 * 0.15).abs() < 1e-15);
        // concave with interior vertex
        let (curv, slope) = (0.3 * -0.37, 0.05 * 0.37);
        let v = capped_quadratic_sup(curv, slope, cap);
        assert!((v - slope * slope / (-2.0 * curv)).abs() < 1e-15);
        assert!(v > 0.0 && v > 0.5 * cap * cap * curv + cap * slope);
        // degenerate curvature still evaluates the endpoints
        assert_eq!(capped_quadratic_sup(0.0, 0.2, cap), 0.8);
        assert_eq!(capped_quadratic_sup(0.0, -0.2, cap), 0.0);
    }

    #[test]
    fn hjb_sup_matches_grid_scan() {
        let mut rng = RngStream::new(3).rng();
        let cap = 4.0;
        for _ in 0..1000 {
            let y = rng.random_range(-0.2..1.0);
            let theta = rng.random_range(-2.0..2.0);
            let slope = rng.random_range(-1.0..1.0);
            let curv = y * theta;
            let grid = (0..=2000)
                .map(|i| {
                    let e = cap * i as f64 / 2000.0;
                    0.5 * e * e * curv + e * slope
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let exact = capped_quadratic_sup(curv, slope, cap);
            assert!(exact >= grid - 1e-12);
            // grid spacing 0.002: the discretisation gap is at most ½ |curv| h²
            assert!(
                exact - grid <= 0.5 * curv.abs() * 0.002f64.powi(2) / 4.0 + 1e-9,
                "{exact} {grid}"
            );
        }
    }

    #[test]
    fn hjb_driver_structure() {
        let params = HjbParams::default();
        let p = hjb_problem(params, 2).unwrap();
        assert_eq!(p.dim, 3);
        assert_eq!(p.default_x0, vec![1.0, 0.3, 0.3]);
        let x = [1.0, 0.3, 0.5];
        let z = [0.0, 0.0, 0.0];
        let theta = SymMat::from_fn(3, |i, j| if i == j { -0.4 } else { 0.0 });
        let f = p.driver.eval(0.0, &x, -0.36, &z, theta.view());
        let expected = -0.5 * 0.01 * -0.4 + 0.5 * 0.04 * (0.5 - 0.3) * -0.4;
        assert!((f - expected).abs() < 1e-15);
        assert!((p.terminal.value(&[1.0, 0.3, 0.3]) + (-1.0f64).exp()).abs() < 1e-15);

        let bad = HjbParams {
            control_cap: 0.0,
            ..params
        };
        assert!(hjb_problem(bad, 1).is_err());
        assert!(hjb_problem(HjbParams { y0: 0.0, ..params }, 1).is_err());
    }

    #[test]
    fn untruncated_driver_blows_up_on_convex_curvature() {
        let p = hjb_problem_untruncated_unchecked(HjbParams::default(), 1).unwrap();
        let theta = SymMat::from_fn(2, |i, j| if i == j { 0.1 } else { 0.0 });
        assert!(p
            .driver
            .eval(0.0, &[1.0, 0.3], 0.0, &[0.1, 0.0], theta.view())
            .is_infinite());
    }

    #[test]
    fn drivers_are_pure() {
        let p = toy_fullnl_problem(ToyParams::default(), 3).unwrap();
        let theta = SymMat::from_fn(3, |i, j| (i + 2 * j) as f64 * 0.1);
        let a = p
            .driver
            .eval(0.3, &[0.1, 0.2, 0.3], 0.5, &[0.1, 0.1, 0.1], theta.view());
        let b = p
            .driver
            .eval(0.3, &[0.1, 0.2, 0.3], 0.5, &[0.1, 0.1, 0.1], theta.view());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn diagnostic_references() {
        let q = diagnostic_problem(DiagnosticModel::Brownian, DiagnosticTerminal::Quadratic, 3).unwrap();
        let x = [0.1, 0.2, 0.3];
        assert!((q.reference_at(0.0, &x).unwrap() - (0.14 + 3.0)).abs() < 1e-14);
        let c = diagnostic_problem(DiagnosticModel::Brownian, DiagnosticTerminal::Cos, 2).unwrap();
        assert!((c.reference_at(0.0, &[0.2, 0.3]).unwrap() - 0.5f64.cos() * (-1.0f64).exp()).abs() < 1e-15);
        let l = diagnostic_problem(DiagnosticModel::OrnsteinUhlenbeck, DiagnosticTerminal::Linear, 1).unwrap();
        let mean = 0.2 + (0.7 - 0.2) * (-0.5f64).exp();
        assert!((l.reference_at(0.0, &[0.7]).unwrap() - mean).abs() < 1e-15);
        assert_eq!(diagnostic_problems(2).unwrap().len(), 6);
    }
}
