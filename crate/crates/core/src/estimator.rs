//! Batched recursive nested Monte Carlo estimator.
//!
//! A node at nesting level `l` receives a batch of `m = 3^l` particle
//! positions at time `t`. It draws one switching increment and one Gaussian
//! vector shared by the whole batch, moves the batch to the `3m` antithetic
//! triple, and either closes with the terminal function or recurses
//! `N_{l+1}` times on the `3m` rows and feeds the averaged `(u, Du, D²u)`
//! into the driver. Each node returns `m` triples built from half sums and
//! half differences of the three sub-rows multiplied by the Malliavin
//! weights and the importance factor of the switching-time law.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::problems::ProblemSpec;
use crate::rand_time::{fill_gaussian, RngStream, TimeLaw};
use crate::smallnum::{packed_len, SymMat, SymRef};

/// Depth and particle counts of the recursion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestingSchedule {
    base_counts: Vec<usize>,
    ipart: u32,
}

impl NestingSchedule {
    /// `base_counts` holds `N_0^0 .. N_p^0`; the depth is `p = len - 1`.
    pub fn new(base_counts: Vec<usize>, ipart: u32) -> Result<Self> {
        if base_counts.len() < 2 {
            return Err(invalid("schedule needs at least two counts (depth p >= 1)"));
        }
        if base_counts.contains(&0) {
            return Err(invalid("particle counts must be positive"));
        }
        if ipart > 40
            || base_counts
                .iter()
                .any(|&n| n.checked_shl(ipart).is_none_or(|v| v >> ipart != n))
        {
            return Err(invalid(format!("ipart {ipart} overflows the particle counts")));
        }
        Ok(Self { base_counts, ipart })
    }

    pub fn depth(&self) -> usize {
        self.base_counts.len() - 1
    }

    pub fn base_counts(&self) -> &[usize] {
        &self.base_counts
    }

    pub fn ipart(&self) -> u32 {
        self.ipart
    }

    pub fn with_ipart(&self, ipart: u32) -> Result<Self> {
        Self::new(self.base_counts.clone(), ipart)
    }

    /// `N_i = N_i^0 * 2^ipart`.
    pub fn effective_counts(&self) -> Vec<usize> {
        self.base_counts.iter().map(|&n| n << self.ipart).collect()
    }
}

/// How the deepest level closes the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalClosure {
    /// Step once more and combine `g` on the antithetic triple.
    #[default]
    Antithetic,
    /// Use the analytic `g`, `Dg`, `D²g` at the particle positions.
    Analytic,
}

/// Value, gradient and Hessian estimate for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTriple {
    pub u: f64,
    pub du: Vec<f64>,
    pub d2u: SymMat,
}

/// `m` estimate triples stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleBatch {
    dim: usize,
    u: Vec<f64>,
    du: Vec<f64>,
    d2u: Vec<f64>,
}

impl TripleBatch {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            u: vec![0.0; rows],
            du: vec![0.0; rows * dim],
            d2u: vec![0.0; rows * packed_len(dim)],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn du_row(&self, r: usize) -> &[f64] {
        &self.du[r * self.dim..(r + 1) * self.dim]
    }

    pub fn d2u_row(&self, r: usize) -> SymRef<'_> {
        let np = packed_len(self.dim);
        SymRef::new(self.dim, &self.d2u[r * np..(r + 1) * np])
    }

    pub fn row(&self, r: usize) -> EstimateTriple {
        EstimateTriple {
            u: self.u[r],
            du: self.du_row(r).to_vec(),
            d2u: self.d2u_row(r).to_owned(),
        }
    }

    fn add_assign(&mut self, other: &TripleBatch) {
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a += b;
        }
        for (a, b) in self.du.iter_mut().zip(&other.du) {
            *a += b;
        }
        for (a, b) in self.d2u.iter_mut().zip(&other.d2u) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.u
            .iter_mut()
            .chain(&mut self.du)
            .chain(&mut self.d2u)
            .for_each(|v| *v *= s);
    }

    fn all_finite(&self) -> bool {
        self.u.iter().chain(&self.du).chain(&self.d2u).all(|v| v.is_finite())
    }
}

/// Input of one recursion node: level, current time and `3^level` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFrame {
    pub level: usize,
    pub t: f64,
    pub batch: Vec<f64>,
}

/// Raw draws consumed by one node: the untruncated switching increment and
/// the shared Gaussian vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDraw {
    pub tau: f64,
    pub gaussian: Vec<f64>,
}

/// Node draws in the order the estimator consumed them (depth-first,
/// parent before children, children in repetition order).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrawTape {
    pub draws: Vec<NodeDraw>,
}

/// Supplier of per-node randomness.
pub trait DrawSource {
    fn draw(&mut self, law: &TimeLaw, stream: &RngStream, dim: usize) -> NodeDraw;
}

/// Draws from the node's own stream: switching time first, then `G`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StreamDraws;

impl DrawSource for StreamDraws {
    fn draw(&mut self, law: &TimeLaw, stream: &RngStream, dim: usize) -> NodeDraw {
        let mut rng = stream.rng();
        let tau = law.sample(&mut rng);
        let mut gaussian = vec![0.0; dim];
        fill_gaussian(&mut rng, &mut gaussian);
        NodeDraw { tau, gaussian }
    }
}

/// Stream draws that are also appended to a tape.
#[derive(Debug, Default)]
pub struct RecordingDraws {
    pub tape: DrawTape,
}

impl DrawSource for RecordingDraws {
    fn draw(&mut self, law: &TimeLaw, stream: &RngStream, dim: usize) -> NodeDraw {
        let d = StreamDraws.draw(law, stream, dim);
        self.tape.draws.push(d.clone());
        d
    }
}

/// Resolved inputs echoed with every result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEcho {
    pub problem: String,
    pub dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub counts: Vec<usize>,
    pub ipart: u32,
    pub alpha: f64,
    pub lambda: f64,
    pub closure: TerminalClosure,
    pub seed: u64,
    pub shards: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub estimate: f64,
    /// Sample standard deviation of the outer contributions over `sqrt(N_0)`.
    pub stderr: f64,
    pub n_outer: usize,
    pub wall_seconds: f64,
    /// Mean of the level-0 gradient estimates (diagnostic only).
    pub du_mean: Vec<f64>,
    /// Mean of the level-0 Hessian estimates (diagnostic only).
    pub d2u_mean: SymMat,
    pub echo: RunEcho,
}

pub struct NestedEstimator<'a> {
    problem: &'a ProblemSpec,
    schedule: NestingSchedule,
    counts: Vec<usize>,
    law: TimeLaw,
    closure: TerminalClosure,
}

impl<'a> NestedEstimator<'a> {
    pub fn new(problem: &'a ProblemSpec, schedule: &NestingSchedule, law: TimeLaw) -> Self {
        Self {
            problem,
            counts: schedule.effective_counts(),
            schedule: schedule.clone(),
            law,
            closure: TerminalClosure::default(),
        }
    }

    pub fn with_closure(mut self, closure: TerminalClosure) -> Self {
        self.closure = closure;
        self
    }

    pub fn problem(&self) -> &ProblemSpec {
        self.problem
    }

    pub fn schedule(&self) -> &NestingSchedule {
        &self.schedule
    }

    pub fn law(&self) -> &TimeLaw {
        &self.law
    }

    pub fn closure(&self) -> TerminalClosure {
        self.closure
    }

    fn check_x0(&self, x0: &[f64]) -> Result<()> {
        if x0.len() != self.problem.dim {
            return Err(invalid(format!(
                "x0 has dimension {}, problem has {}",
                x0.len(),
                self.problem.dim
            )));
        }
        if !(self.problem.horizon > 0.0) {
            return Err(invalid("horizon must be positive"));
        }
        if self.closure == TerminalClosure::Analytic
            && (self.problem.terminal.gradient(x0).is_none() || self.problem.terminal.hessian(x0).is_none())
        {
            return Err(invalid("analytic closure needs the terminal gradient and Hessian"));
        }
        Ok(())
    }

    /// Averages `N_0` independent outer samples. Sample `i` uses the stream
    /// `seed / i`, so the result does not depend on `shards`.
    pub fn evaluate(&self, x0: &[f64], seed: u64, shards: usize) -> Result<RunResult> {
        self.check_x0(x0)?;
        let start = Instant::now();
        let n0 = self.counts[0];
        let shards = shards.clamp(1, n0);
        let per_shard: Vec<Result<Vec<EstimateTriple>>> = (0..shards)
            .into_par_iter()
            .map(|s| {
                let lo = s * n0 / shards;
                let hi = (s + 1) * n0 / shards;
                (lo..hi).map(|i| self.outer_sample(x0, seed, i)).collect()
            })
            .collect();

        let mut samples = Vec::with_capacity(n0);
        for shard in per_shard {
            samples.extend(shard?);
        }

        let d = self.problem.dim;
        let nf = n0 as f64;
        let mut sum = 0.0;
        let mut du = vec![0.0; d];
        let mut d2u = vec![0.0; packed_len(d)];
        for s in &samples {
            sum += s.u;
            du.iter_mut().zip(&s.du).for_each(|(a, b)| *a += b);
            d2u.iter_mut().zip(s.d2u.packed()).for_each(|(a, b)| *a += b);
        }
        let mean = sum / nf;
        let stderr = if n0 > 1 {
            let ss: f64 = samples.iter().map(|s| (s.u - mean) * (s.u - mean)).sum();
            (ss / (nf - 1.0) / nf).sqrt()
        } else {
            0.0
        };
        du.iter_mut().for_each(|v| *v /= nf);
        d2u.iter_mut().for_each(|v| *v /= nf);

        Ok(RunResult {
            estimate: mean,
            stderr,
            n_outer: n0,
            wall_seconds: start.elapsed().as_secs_f64(),
            du_mean: du,
            d2u_mean: SymMat::from_packed(d, d2u),
            echo: RunEcho {
                problem: self.problem.name.clone(),
                dim: d,
                horizon: self.problem.horizon,
                x0: x0.to_vec(),
                counts: self.counts.clone(),
                ipart: self.schedule.ipart(),
                alpha: self.law.alpha(),
                lambda: self.law.lambda(),
                closure: self.closure,
                seed,
                shards,
            },
        })
    }

    /// One outer sample: the level-0 triple at `x0`.
    pub fn outer_sample(&self, x0: &[f64], seed: u64, index: usize) -> Result<EstimateTriple> {
        let stream = RngStream::new(seed).child(index as u64);
        let frame = NodeFrame {
            level: 0,
            t: 0.0,
            batch: x0.to_vec(),
        };
        self.eval_node_with(&frame, stream, &mut StreamDraws)
            .map(|b| b.row(0))
            .map_err(|e| with_sample(e, index))
    }

    /// Same as [`Self::outer_sample`] but also returns the consumed draws.
    pub fn record_outer_sample(&self, x0: &[f64], seed: u64, index: usize) -> Result<(EstimateTriple, DrawTape)> {
        self.check_x0(x0)?;
        let stream = RngStream::new(seed).child(index as u64);
        let frame = NodeFrame {
            level: 0,
            t: 0.0,
            batch: x0.to_vec(),
        };
        let mut rec = RecordingDraws::default();
        let out = self
            .eval_node_with(&frame, stream, &mut rec)
            .map_err(|e| with_sample(e, index))?;
        Ok((out.row(0), rec.tape))
    }

    pub fn eval_node(&self, frame: &NodeFrame, stream: RngStream) -> Result<TripleBatch> {
        self.eval_node_with(frame, stream, &mut StreamDraws)
    }

    /// Evaluates one node and its subtree. Non-finite outputs are reported
    /// as [`Error::NonFinite`] with the repetition indices leading to the
    /// failing node.
    pub fn eval_node_with<S: DrawSource>(
        &self,
        frame: &NodeFrame,
        stream: RngStream,
        draws: &mut S,
    ) -> Result<TripleBatch> {
        let d = self.problem.dim;
        let p = self.schedule.depth();
        let level = frame.level;
        assert!(level <= p, "node level {level} beyond depth {p}");
        let m = frame.batch.len() / d;
        assert_eq!(frame.batch.len(), m * d, "batch is not a multiple of d");
        assert_eq!(
            m,
            3usize.pow(level as u32),
            "level {level} batch must have 3^level rows"
        );

        let horizon = self.problem.horizon;
        let remaining = horizon - frame.t;
        let np = packed_len(d);

        if level == p && self.closure == TerminalClosure::Analytic {
            let g = &self.problem.terminal;
            let mut out = TripleBatch::zeros(m, d);
            for r in 0..m {
                let x = &frame.batch[r * d..(r + 1) * d];
                out.u[r] = g.value(x);
                out.du[r * d..(r + 1) * d].copy_from_slice(&g.gradient(x).expect("checked"));
                out.d2u[r * np..(r + 1) * np].copy_from_slice(g.hessian(x).expect("checked").packed());
            }
            return finite_or_fail(out);
        }

        let NodeDraw { tau: raw_tau, gaussian } = draws.draw(&self.law, &stream, d);
        let reaches_horizon = raw_tau >= remaining;
        let tau = if reaches_horizon { remaining } else { raw_tau };
        let coeffs = self.problem.model.coeffs(tau);
        let xs = coeffs.step_triple(&frame.batch, &gaussian);
        let v = coeffs.first_weight(&gaussian)?;
        let mut w = vec![0.0; np];
        coeffs.second_weight_into(&gaussian, &mut w)?;
        let t_next = frame.t + tau;

        // Per-row values on the three sub-rows and the importance factor.
        let mut out = TripleBatch::zeros(m, d);
        let combine = |out: &mut TripleBatch, r: usize, f1: f64, f2: f64, f3: f64, factor: f64| {
            let even = 0.5 * (f1 + f3) * factor;
            let odd = 0.5 * (f1 - f3) * factor;
            let second = 0.5 * (f1 + f3 - 2.0 * f2) * factor;
            out.u[r] = even;
            for (o, vi) in out.du[r * d..(r + 1) * d].iter_mut().zip(&v) {
                *o = odd * vi;
            }
            for (o, wk) in out.d2u[r * np..(r + 1) * np].iter_mut().zip(&w) {
                *o = second * wk;
            }
        };

        if reaches_horizon || level == p {
            let factor = if level < p {
                1.0 / self.law.survival(remaining)
            } else {
                1.0
            };
            let g = &self.problem.terminal;
            for r in 0..m {
                let g1 = g.value(&xs[r * d..(r + 1) * d]);
                let g2 = g.value(&xs[(m + r) * d..(m + r + 1) * d]);
                let g3 = g.value(&xs[(2 * m + r) * d..(2 * m + r + 1) * d]);
                combine(&mut out, r, g1, g2, g3, factor);
            }
            return finite_or_fail(out);
        }

        let reps = self.counts[level + 1];
        let child_frame = NodeFrame {
            level: level + 1,
            t: t_next,
            batch: xs,
        };
        let mut acc = TripleBatch::zeros(3 * m, d);
        for j in 0..reps {
            let child = self
                .eval_node_with(&child_frame, stream.child(j as u64), draws)
                .map_err(|e| prepend_path(e, j))?;
            acc.add_assign(&child);
        }
        acc.scale(1.0 / reps as f64);

        let xs = &child_frame.batch;
        let f = &self.problem.driver;
        let eval_row = |row: usize| {
            f.eval(
                t_next,
                &xs[row * d..(row + 1) * d],
                acc.u[row],
                acc.du_row(row),
                acc.d2u_row(row),
            )
        };
        let factor = 1.0 / self.law.density(tau);
        for r in 0..m {
            let f1 = eval_row(r);
            let f2 = eval_row(m + r);
            let f3 = eval_row(2 * m + r);
            combine(&mut out, r, f1, f2, f3, factor);
        }
        finite_or_fail(out)
    }
}

fn finite_or_fail(out: TripleBatch) -> Result<TripleBatch> {
    if out.all_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite {
            sample: 0,
            path: Vec::new(),
        })
    }
}

fn prepend_path(e: Error, j: usize) -> Error {
    match e {
        Error::NonFinite { sample, mut path } => {
            path.insert(0, j);
            Error::NonFinite { sample, path }
        }
        other => other,
    }
}

fn with_sample(e: Error, index: usize) -> Error {
    match e {
        Error::NonFinite { path, .. } => Error::NonFinite { sample: index, path },
        other => other,
    }
}
