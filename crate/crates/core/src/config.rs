//! TOML run configuration for the command-line driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureMap;
use crate::global::SolveConfig;
use crate::local::PicardConfig;
use crate::problems::{builtin, CoefficientSet, LipschitzData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Certify,
    Diagnose,
    Compare,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Certify => "certify",
            Command::Diagnose => "diagnose",
            Command::Compare => "compare",
        }
    }
}

/// Overrides applied on top of the catalog's Lipschitz data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzOverride {
    pub k0: Option<f64>,
    pub k1: Option<f64>,
    pub sigma_z_sup: Option<f64>,
    pub alpha_bar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub lipschitz: Option<LipschitzOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    SolveConfig::default().steps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Required, either here or on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_paths() -> usize {
    SolveConfig::default().paths
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iters: usize,
    pub window: usize,
    pub lags: usize,
    pub degree: usize,
    pub exploration: f64,
    pub dispersion: f64,
    pub ode_steps: usize,
    pub monotonicity_samples: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        Self {
            tol: s.picard.tol,
            max_iters: s.picard.max_iters,
            window: s.picard.window,
            lags: s.picard.features.lags,
            degree: s.picard.features.degree,
            exploration: s.exploration,
            dispersion: s.dispersion,
            ode_steps: s.ode_steps,
            monotonicity_samples: s.monotonicity_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub pairs: usize,
    pub bump: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            pairs: 100,
            bump: 0.5,
        }
    }
}

/// Second problem of a stability comparison: the first one with `g + shift`,
/// optionally started elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub shift: Vec<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    /// Paths written to `solution.csv`.
    #[serde(default = "default_dump")]
    pub dump_paths: usize,
    /// Not part of the report, so reruns into another directory match.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn default_dump() -> usize {
    100
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the command-specific requirements.
    pub fn validate(&self) -> Result<()> {
        if self.ensemble.seed.is_none() {
            return Err(Error::Config("a seed is required (ensemble.seed or --seed)".into()));
        }
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            return Err(Error::Config(format!(
                "grid.horizon must be positive and finite, got {}",
                self.grid.horizon
            )));
        }
        let p = self.problem()?;
        if self.command != Command::Certify {
            let x0 = self.x0()?;
            if x0.len() != p.d {
                return Err(Error::Config(format!(
                    "problem.x0 has {} entries, expected {}",
                    x0.len(),
                    p.d
                )));
            }
            self.solve_config().validate()?;
        }
        match self.command {
            Command::Diagnose => {
                if self.diagnose.pairs == 0 || !(self.diagnose.bump != 0.0) {
                    return Err(Error::Config(
                        "diagnose needs pairs >= 1 and a nonzero bump".into(),
                    ));
                }
            }
            Command::Compare => {
                let c = self
                    .compare
                    .as_ref()
                    .ok_or_else(|| Error::Config("compare needs a [compare] section".into()))?;
                if c.shift.len() != p.n {
                    return Err(Error::Config(format!(
                        "compare.shift has {} entries, expected {}",
                        c.shift.len(),
                        p.n
                    )));
                }
                if c.x0.as_ref().is_some_and(|x| x.len() != p.d) {
                    return Err(Error::Config("compare.x0 has the wrong dimension".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.ensemble.seed.unwrap_or_default()
    }

    pub fn x0(&self) -> Result<&[f64]> {
        self.problem
            .x0
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs problem.x0", self.command.as_str())))
    }

    /// Catalog problem with the Lipschitz overrides applied.
    pub fn problem(&self) -> Result<CoefficientSet> {
        let p = builtin(&self.problem.name, &self.problem.params)?;
        let Some(o) = self.problem.lipschitz else {
            return Ok(p);
        };
        let base = p.lipschitz;
        let mut l = LipschitzData {
            k0: o.k0.unwrap_or(base.k0),
            k1: o.k1.unwrap_or(base.k1),
            sigma_z_sup: o.sigma_z_sup.unwrap_or(base.sigma_z_sup),
            ..base
        };
        if o.alpha_bar.is_some() {
            l.alpha_bar = o.alpha_bar;
        }
        p.with_lipschitz(l)
    }

    pub fn solve_config(&self) -> SolveConfig {
        let s = &self.solver;
        SolveConfig {
            steps: self.grid.steps,
            paths: self.ensemble.paths,
            seed: self.seed(),
            picard: PicardConfig {
                max_iters: s.max_iters,
                tol: s.tol,
                window: s.window,
                features: FeatureMap {
                    lags: s.lags,
                    degree: s.degree,
                },
            },
            exploration: s.exploration,
            dispersion: s.dispersion,
            ode_steps: s.ode_steps,
            monotonicity_samples: s.monotonicity_samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVE: &str = r#"
command = "solve"

[problem]
name = "decoupled_linear"
params = { a = 0.25 }
x0 = [1.0]

[grid]
horizon = 1.0
steps = 50

[ensemble]
paths = 2000
seed = 3
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = RunConfig::from_toml(SOLVE).unwrap();
        assert_eq!(c.command, Command::Solve);
        assert_eq!(c.grid.steps, 50);
        assert_eq!(c.solver, SolverSection::default());
        assert_eq!(c.dump_paths, 100);
        c.validate().unwrap();
        let s = c.solve_config();
        assert_eq!((s.steps, s.paths, s.seed), (50, 2000, 3));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml(SOLVE).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_seed() {
        let bad = SOLVE.replace("steps = 50", "steps = 50\nstep = 3");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let unseeded = RunConfig::from_toml(&SOLVE.replace("seed = 3", "")).unwrap();
        assert!(matches!(unseeded.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn command_specific_fields() {
        let c = RunConfig::from_toml(&SOLVE.replace("\"solve\"", "\"compare\"")).unwrap();
        assert!(c.validate().is_err());
        let no_x0 = RunConfig::from_toml(&SOLVE.replace("x0 = [1.0]", "")).unwrap();
        assert!(no_x0.validate().is_err());
        let certify = RunConfig::from_toml(
            &SOLVE.replace("x0 = [1.0]", "").replace("\"solve\"", "\"certify\""),
        )
        .unwrap();
        certify.validate().unwrap();
    }

    #[test]
    fn lipschitz_override_applies() {
        let text = SOLVE.replace("[grid]", "[problem.lipschitz]\nk1 = 2.0\nalpha_bar = 0.5\n\n[grid]");
        let c = RunConfig::from_toml(&text).unwrap();
        let p = c.problem().unwrap();
        assert_eq!(p.lipschitz.k1, 2.0);
        assert_eq!(p.lipschitz.alpha_bar, Some(0.5));
        assert_eq!(p.lipschitz.k0, 0.25);
    }
}
