//! Experiment configuration read from TOML.
//!
//! ```toml
//! [problem]
//! kind = "cir"          # cir | toy | hjb | diagnostic
//! d = 2                 # state dimension; number of assets for hjb
//! x0 = [0.3, 0.3]       # optional, problem default otherwise
//!
//! [problem.cir]         # optional parameter overrides
//! a = 0.1
//!
//! [schedule]
//! base_counts = [1000, 50, 25, 12]
//! ipart_min = 0
//! ipart_max = 3
//!
//! [law]
//! alpha = 1.0
//! lambdas = [0.1, 0.15]
//!
//! [run]
//! seed = 1
//! shards = 0            # 0 = available cores
//! output = "cir_d2.csv"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{NestingSchedule, TerminalClosure};
use crate::problems::{
    cir_problem, diagnostic_problem, hjb_problem, toy_fullnl_problem, CirParams, DiagnosticModel, DiagnosticTerminal,
    HjbParams, ProblemSpec, ToyParams,
};
use crate::rand_time::TimeLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Cir,
    Toy,
    Hjb,
    Diagnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticChoice {
    pub model: DiagnosticModel,
    pub terminal: DiagnosticTerminal,
}

impl Default for DiagnosticChoice {
    fn default() -> Self {
        Self {
            model: DiagnosticModel::Brownian,
            terminal: DiagnosticTerminal::Cos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Overrides the horizon of the parameter block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub cir: CirParams,
    #[serde(default)]
    pub toy: ToyParams,
    #[serde(default)]
    pub hjb: HjbParams,
    #[serde(default)]
    pub diagnostic: DiagnosticChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_counts: Vec<usize>,
    #[serde(default)]
    pub ipart_min: u32,
    pub ipart_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawConfig {
    #[serde(default = "one")]
    pub alpha: f64,
    pub lambdas: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// 0 picks the number of available cores.
    #[serde(default)]
    pub shards: usize,
    #[serde(default)]
    pub closure: TerminalClosure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Leave the wall-time column empty so output is byte-reproducible.
    #[serde(default)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub schedule: ScheduleConfig,
    pub law: LawConfig,
    #[serde(default)]
    pub run: RunSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shards: Option<usize>,
    pub ipart_min: Option<u32>,
    pub ipart_max: Option<u32>,
    pub output: Option<PathBuf>,
    pub no_timing: bool,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(s) = o.shards {
            self.run.shards = s;
        }
        if let Some(i) = o.ipart_min {
            self.schedule.ipart_min = i;
        }
        if let Some(i) = o.ipart_max {
            self.schedule.ipart_max = i;
        }
        if let Some(p) = &o.output {
            self.run.output = Some(p.clone());
        }
        if o.no_timing {
            self.run.no_timing = true;
        }
    }

    /// Checks everything that can be checked before any computation and
    /// returns the problem, the schedules in sweep order and the laws.
    pub fn resolve(&self) -> Result<Resolved> {
        let problem = self.build_problem()?;
        let x0 = match &self.problem.x0 {
            Some(x) if x.len() != problem.dim => {
                return Err(config_err(format!(
                    "x0 has {} entries, problem dimension is {}",
                    x.len(),
                    problem.dim
                )))
            }
            Some(x) => x.clone(),
            None => problem.default_x0.clone(),
        };
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(config_err("x0 must be finite"));
        }
        let s = &self.schedule;
        if s.ipart_min > s.ipart_max {
            return Err(config_err("ipart_min exceeds ipart_max"));
        }
        let schedules = (s.ipart_min..=s.ipart_max)
            .map(|i| NestingSchedule::new(s.base_counts.clone(), i))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| config_err(e.to_string()))?;
        if self.law.lambdas.is_empty() {
            return Err(config_err("law.lambdas is empty"));
        }
        let laws = self
            .law
            .lambdas
            .iter()
            .map(|&l| TimeLaw::new(self.law.alpha, l))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| config_err(e.to_string()))?;
        if self.run.closure == TerminalClosure::Analytic
            && (problem.terminal.gradient(&x0).is_none() || problem.terminal.hessian(&x0).is_none())
        {
            return Err(config_err("analytic closure needs terminal derivatives"));
        }
        let shards = match self.run.shards {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        };
        Ok(Resolved {
            problem,
            x0,
            schedules,
            laws,
            shards,
        })
    }

    fn build_problem(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let horizon = |h: f64| p.horizon.unwrap_or(h);
        if let Some(h) = p.horizon {
            if !(h > 0.0) {
                return Err(config_err("horizon must be positive"));
            }
        }
        let built = match p.kind {
            ProblemKind::Cir => cir_problem(
                CirParams {
                    horizon: horizon(p.cir.horizon),
                    ..p.cir
                },
                p.d,
            ),
            ProblemKind::Toy => toy_fullnl_problem(
                ToyParams {
                    horizon: horizon(p.toy.horizon),
                    ..p.toy
                },
                p.d,
            ),
            ProblemKind::Hjb => hjb_problem(
                HjbParams {
                    horizon: horizon(p.hjb.horizon),
                    ..p.hjb
                },
                p.d,
            ),
            ProblemKind::Diagnostic => {
                if p.horizon.is_some() {
                    return Err(config_err("diagnostic problems have a fixed horizon"));
                }
                diagnostic_problem(p.diagnostic.model, p.diagnostic.terminal, p.d)
            }
        };
        built.map_err(|e| config_err(e.to_string()))
    }
}

/// Validated experiment ready to run.
#[derive(Debug)]
pub struct Resolved {
    pub problem: ProblemSpec,
    pub x0: Vec<f64>,
    /// One schedule per ipart, low to high.
    pub schedules: Vec<NestingSchedule>,
    /// One law per lambda, in file order.
    pub laws: Vec<TimeLaw>,
    pub shards: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    const CIR: &str = r#"
[problem]
kind = "cir"
d = 2
x0 = [0.3, 0.3]

[schedule]
base_counts = [1000, 50, 25, 12]
ipart_min = 1
ipart_max = 3

[law]
lambdas = [0.1, 0.15]

[run]
seed = 7
shards = 2
"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::from_toml_str(CIR).unwrap();
        assert_eq!(c.law.alpha, 1.0);
        assert_eq!(c.problem.cir, CirParams::default());
        let r = c.resolve().unwrap();
        assert_eq!(r.problem.dim, 2);
        assert_eq!(r.schedules.len(), 3);
        assert_eq!(r.schedules[0].ipart(), 1);
        assert_eq!(r.laws[1].lambda(), 0.15);
        assert_eq!(r.shards, 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml_str(CIR).unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::from_toml_str(CIR).unwrap();
        c.apply(&Overrides {
            seed: Some(99),
            ipart_max: Some(1),
            no_timing: true,
            ..Default::default()
        });
        assert_eq!(c.run.seed, 99);
        assert!(c.run.no_timing);
        assert_eq!(c.resolve().unwrap().schedules.len(), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |edit: &dyn Fn(&mut RunConfig)| {
            let mut c = RunConfig::from_toml_str(CIR).unwrap();
            edit(&mut c);
            matches!(c.resolve(), Err(Error::Config(_)))
        };
        assert!(bad(&|c| c.problem.x0 = Some(vec![0.3])));
        assert!(bad(&|c| c.schedule.ipart_min = 5));
        assert!(bad(&|c| c.schedule.base_counts = vec![10]));
        assert!(bad(&|c| c.law.lambdas = vec![]));
        assert!(bad(&|c| c.law.alpha = 1.5));
        assert!(bad(&|c| c.problem.cir.enforce_feller = true));
        assert!(bad(&|c| {
            c.problem.kind = ProblemKind::Hjb;
            c.problem.x0 = None;
            c.problem.hjb.control_cap = 0.0;
        }));
        assert!(RunConfig::from_toml_str("[problem]\nkind = \"cir\"\nd = 2\nbogus = 1\n").is_err());
    }
}
