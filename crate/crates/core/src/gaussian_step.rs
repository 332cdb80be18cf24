//! Exact one-step Gaussian transitions and their Malliavin weights.
//!
//! Every supported model has an affine transition over a step `tau`:
//!
//! ```text
//! X = a ∘ x + b + L G,   G ~ N(0, I_d)
//! ```
//!
//! where `L` is diagonal (Brownian or exact Ornstein–Uhlenbeck coordinates) or
//! a constant full matrix `sigma * sqrt(tau)` (Brownian only). Integration by
//! parts against the Gaussian density gives the weights
//!
//! ```text
//! V = diag(a) L^{-T} G
//! W = diag(a) L^{-T} (G G^T - I) L^{-1} diag(a)
//! ```
//!
//! with `E[V h(X)] = ∇_x E[h(X)]` and `E[W h(X)] = ∇²_x E[h(X)]`.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::smallnum::{packed_index, packed_len, Mat, SymMat};

/// Dynamics of a single coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordKind {
    /// `dX = drift dt + vol dW`
    Brownian { drift: f64, vol: f64 },
    /// `dX = speed (mean - X) dt + vol dW`, stepped exactly.
    OrnsteinUhlenbeck { speed: f64, mean: f64, vol: f64 },
}

impl CoordKind {
    fn vol(&self) -> f64 {
        match *self {
            CoordKind::Brownian { vol, .. } | CoordKind::OrnsteinUhlenbeck { vol, .. } => vol,
        }
    }
}

/// Constant full diffusion matrix with its precomputed inverse data.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDiffusion {
    drift: Vec<f64>,
    sigma: Mat,
    sigma_inv_t: Mat,
    // sigma^{-T} sigma^{-1}
    precision: SymMat,
}

#[derive(Debug, Clone, PartialEq)]
enum ModelKind {
    Diagonal(Vec<CoordKind>),
    Full(Arc<FullDiffusion>),
}

/// Transition model of the base (non-degenerate) diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    dim: usize,
    kind: ModelKind,
}

impl StepModel {
    /// Independent coordinates, each Brownian or Ornstein–Uhlenbeck.
    pub fn diagonal(coords: Vec<CoordKind>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("model dimension must be at least 1"));
        }
        for (i, c) in coords.iter().enumerate() {
            let vol = c.vol();
            if vol == 0.0 {
                return Err(Error::DegenerateDiffusion { coord: i });
            }
            if !(vol > 0.0 && vol.is_finite()) {
                return Err(invalid(format!("coordinate {i}: volatility must be positive")));
            }
            if let CoordKind::OrnsteinUhlenbeck { speed, mean, .. } = *c {
                if !(speed >= 0.0 && speed.is_finite() && mean.is_finite()) {
                    return Err(invalid(format!("coordinate {i}: bad OU speed/mean")));
                }
            }
        }
        Ok(Self {
            dim: coords.len(),
            kind: ModelKind::Diagonal(coords),
        })
    }

    /// Arithmetic Brownian motion with per-coordinate drift and volatility.
    pub fn brownian(drift: &[f64], vol: &[f64]) -> Result<Self> {
        if drift.len() != vol.len() {
            return Err(invalid("drift and volatility lengths differ"));
        }
        Self::diagonal(
            drift
                .iter()
                .zip(vol)
                .map(|(&drift, &vol)| CoordKind::Brownian { drift, vol })
                .collect(),
        )
    }

    /// `d` identical exact OU coordinates.
    pub fn ornstein_uhlenbeck(d: usize, speed: f64, mean: f64, vol: f64) -> Result<Self> {
        Self::diagonal(vec![CoordKind::OrnsteinUhlenbeck { speed, mean, vol }; d])
    }

    /// Brownian motion `x + drift t + sigma W_t` with a full constant matrix.
    pub fn full_brownian(drift: Vec<f64>, sigma: Mat) -> Result<Self> {
        if drift.len() != sigma.dim() || drift.is_empty() {
            return Err(invalid("drift length must match sigma dimension"));
        }
        let inv = sigma.inverse()?;
        let sigma_inv_t = inv.transpose();
        let prod = sigma_inv_t.mul(&inv);
        let n = sigma.dim();
        let precision = SymMat::from_fn(n, |i, j| 0.5 * (prod.get(i, j) + prod.get(j, i)));
        Ok(Self {
            dim: n,
            kind: ModelKind::Full(Arc::new(FullDiffusion {
                drift,
                sigma,
                sigma_inv_t,
                precision,
            })),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-coordinate kinds; `None` for the full-matrix model.
    pub fn coords(&self) -> Option<&[CoordKind]> {
        match &self.kind {
            ModelKind::Diagonal(c) => Some(c),
            ModelKind::Full(_) => None,
        }
    }

    /// Full diffusion matrix, if the model was built with one.
    pub fn sigma(&self) -> Option<&Mat> {
        match &self.kind {
            ModelKind::Diagonal(_) => None,
            ModelKind::Full(f) => Some(&f.sigma),
        }
    }

    /// Drift of the full-matrix model.
    pub fn full_drift(&self) -> Option<&[f64]> {
        match &self.kind {
            ModelKind::Diagonal(_) => None,
            ModelKind::Full(f) => Some(&f.drift),
        }
    }

    /// Inverse transposed diffusion matrix, if the model was built with one.
    pub fn sigma_inv_t(&self) -> Option<&Mat> {
        match &self.kind {
            ModelKind::Diagonal(_) => None,
            ModelKind::Full(f) => Some(&f.sigma_inv_t),
        }
    }

    /// Transition coefficients over a step of length `tau >= 0`.
    pub fn coeffs(&self, tau: f64) -> StepCoeffs {
        assert!(tau >= 0.0, "negative step {tau}");
        match &self.kind {
            ModelKind::Diagonal(coords) => {
                let mut a = Vec::with_capacity(self.dim);
                let mut b = Vec::with_capacity(self.dim);
                let mut scale = Vec::with_capacity(self.dim);
                for c in coords {
                    match *c {
                        CoordKind::Brownian { drift, vol } => {
                            a.push(1.0);
                            b.push(drift * tau);
                            scale.push(vol * tau.sqrt());
                        }
                        CoordKind::OrnsteinUhlenbeck { speed, mean, vol } => {
                            let decay = (-speed * tau).exp();
                            a.push(decay);
                            b.push(mean * -(-speed * tau).exp_m1());
                            scale.push(vol * ou_variance_factor(speed, tau).sqrt());
                        }
                    }
                }
                StepCoeffs {
                    tau,
                    a,
                    b,
                    loading: Loading::Diagonal(scale),
                }
            }
            ModelKind::Full(full) => StepCoeffs {
                tau,
                a: vec![1.0; self.dim],
                b: full.drift.iter().map(|m| m * tau).collect(),
                loading: Loading::Full(full.clone()),
            },
        }
    }

    /// Mean and per-coordinate variance of `X_{t+tau}` given `X_t = x`.
    /// Only meaningful for diagonal models.
    pub fn transition_moments(&self, tau: f64, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let c = self.coeffs(tau);
        match &c.loading {
            Loading::Diagonal(s) => Some((
                x.iter().zip(&c.a).zip(&c.b).map(|((x, a), b)| a * x + b).collect(),
                s.iter().map(|s| s * s).collect(),
            )),
            Loading::Full(_) => None,
        }
    }
}

/// `(1 - e^{-2 k tau}) / (2 k)`, the OU variance per unit squared volatility.
pub fn ou_variance_factor(speed: f64, tau: f64) -> f64 {
    let x = speed * tau;
    if x < 1e-6 {
        // series in k tau; exact at k = 0
        tau * (1.0 - x + 2.0 * x * x / 3.0)
    } else {
        -(-2.0 * x).exp_m1() / (2.0 * speed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Loading {
    /// Per-coordinate transition standard deviations (sqrt(tau) folded in).
    Diagonal(Vec<f64>),
    /// Full constant matrix; the loading is `sigma * sqrt(tau)`.
    Full(Arc<FullDiffusion>),
}

impl FullDiffusion {
    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }

    pub fn sigma_inv_t(&self) -> &Mat {
        &self.sigma_inv_t
    }
}

/// Affine transition `a ∘ x + b + L G` over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoeffs {
    tau: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    loading: Loading,
}

impl StepCoeffs {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn loading(&self) -> &Loading {
        &self.loading
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Diagonal loading entries, or `None` for a full matrix.
    pub fn scale(&self) -> Option<&[f64]> {
        match &self.loading {
            Loading::Diagonal(s) => Some(s),
            Loading::Full(_) => None,
        }
    }

    /// The Gaussian displacement `L G` shared by every row of a batch.
    pub fn noise(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.dim(), "gaussian dimension mismatch");
        match &self.loading {
            Loading::Diagonal(s) => s.iter().zip(g).map(|(s, g)| s * g).collect(),
            Loading::Full(full) => {
                let rt = self.tau.sqrt();
                full.sigma.mat_vec(g).into_iter().map(|v| v * rt).collect()
            }
        }
    }

    /// Moves an `m x d` batch to the `3m x d` particle triple: rows `0..m`
    /// use `+G`, rows `m..2m` carry no noise, rows `2m..3m` use `-G`.
    pub fn step_triple(&self, batch: &[f64], g: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.step_triple_into(batch, g, &mut out);
        out
    }

    pub fn step_triple_into(&self, batch: &[f64], g: &[f64], out: &mut Vec<f64>) {
        let d = self.dim();
        assert_eq!(batch.len() % d, 0, "batch is not a multiple of d");
        let m = batch.len() / d;
        let noise = self.noise(g);
        out.clear();
        out.resize(3 * m * d, 0.0);
        let (plus, rest) = out.split_at_mut(m * d);
        let (frozen, minus) = rest.split_at_mut(m * d);
        for r in 0..m {
            for i in 0..d {
                let k = r * d + i;
                let base = self.a[i] * batch[k] + self.b[i];
                plus[k] = base + noise[i];
                frozen[k] = base;
                minus[k] = base - noise[i];
            }
        }
    }

    /// First-order weight `V`, with `E[V h(X)] = ∇ E[h(X)]`.
    pub fn first_weight(&self, g: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.first_weight_into(g, &mut v)?;
        Ok(v)
    }

    pub fn first_weight_into(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        assert_eq!(g.len(), d);
        match &self.loading {
            Loading::Diagonal(s) => {
                for i in 0..d {
                    if s[i] == 0.0 {
                        return Err(Error::DegenerateDiffusion { coord: i });
                    }
                    out[i] = self.a[i] * g[i] / s[i];
                }
            }
            Loading::Full(full) => {
                if self.tau == 0.0 {
                    return Err(Error::DegenerateDiffusion { coord: 0 });
                }
                full.sigma_inv_t.mat_vec_into(g, out);
                let inv_rt = 1.0 / self.tau.sqrt();
                out.iter_mut().for_each(|v| *v *= inv_rt);
            }
        }
        Ok(())
    }

    /// Second-order weight `W`, with `E[W h(X)] = ∇² E[h(X)]`.
    pub fn second_weight(&self, g: &[f64]) -> Result<SymMat> {
        let d = self.dim();
        let mut w = vec![0.0; packed_len(d)];
        self.second_weight_into(g, &mut w)?;
        Ok(SymMat::from_packed(d, w))
    }

    /// Writes `W` in packed symmetric storage.
    pub fn second_weight_into(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        assert_eq!(g.len(), d);
        assert_eq!(out.len(), packed_len(d));
        match &self.loading {
            Loading::Diagonal(s) => {
                for i in 0..d {
                    if s[i] == 0.0 {
                        return Err(Error::DegenerateDiffusion { coord: i });
                    }
                    let ri = self.a[i] / s[i];
                    for j in i..d {
                        let rj = self.a[j] / s[j];
                        let delta = if i == j { 1.0 } else { 0.0 };
                        out[packed_index(d, i, j)] = ri * rj * (g[i] * g[j] - delta);
                    }
                }
            }
            Loading::Full(full) => {
                if self.tau == 0.0 {
                    return Err(Error::DegenerateDiffusion { coord: 0 });
                }
                // w w^T - P / tau with w = sigma^{-T} G / sqrt(tau)
                let mut w = vec![0.0; d];
                self.first_weight_into(g, &mut w)?;
                let inv_tau = 1.0 / self.tau;
                for i in 0..d {
                    for j in i..d {
                        out[packed_index(d, i, j)] = w[i] * w[j] - full.precision.get(i, j) * inv_tau;
                    }
                }
            }
        }
        Ok(())
    }
}
