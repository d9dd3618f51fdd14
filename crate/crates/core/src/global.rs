//! Patching construction of the global decoupling field: backward induction
//! over a certified schedule, then a forward pass along the field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dominating::{certify, CertifyOptions, HorizonCertificate, ODESolution, StepSchedule};
use crate::error::{Error, Result};
use crate::field::DecouplingField;
use crate::local::{mean_and_stderr, picard_loop, PicardConfig, SolutionTriple, Sweep, Transition};
use crate::paths::{simulate_brownian, BrownianEnsemble, PathEnsemble, PathView, TimeGrid};
use crate::problems::CoefficientSet;

/// Relative floor of the junction tolerance, covering ridge bias on exact fits.
pub const JUNCTION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub picard: PicardConfig,
    /// Scale of the independent noise added to the training ensemble.
    pub exploration: f64,
    /// Standard deviation of the training ensemble's initial points.
    pub dispersion: f64,
    pub ode_steps: usize,
    pub monotonicity_samples: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            paths: 10_000,
            seed: 0,
            picard: PicardConfig::default(),
            exploration: 1.0,
            dispersion: 1.0,
            ode_steps: 2000,
            monotonicity_samples: 1000,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.paths < 2 {
            return Err(Error::Parameter("need steps >= 1 and paths >= 2".into()));
        }
        if !(self.exploration >= 0.0) || !(self.dispersion >= 0.0) {
            return Err(Error::Parameter("exploration and dispersion must be >= 0".into()));
        }
        self.picard.validate()
    }

    pub fn certify_options(&self) -> CertifyOptions {
        CertifyOptions {
            ode_steps: self.ode_steps,
            monotonicity_samples: self.monotonicity_samples,
            seed: self.seed,
            ..CertifyOptions::default()
        }
    }

    /// Independent seeds for the training noise, exploration noise, initial
    /// dispersion and the forward pass.
    fn seeds(&self) -> [u64; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        [rng.random(), rng.random(), rng.random(), rng.random()]
    }
}

/// Paths on which the field is fitted. They follow `b(·,0,0)`, `σ(·,0,0)`
/// plus independent exploration noise from dispersed starting points, and
/// keep the Brownian increments that drive the one-step transitions.
#[derive(Debug, Clone)]
pub struct TrainingEnsemble {
    pub x: PathEnsemble,
    pub w: BrownianEnsemble,
}

impl TrainingEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn simulate(
        p: &CoefficientSet,
        grid: TimeGrid,
        x0: &[f64],
        paths: usize,
        seeds: (u64, u64, u64),
        exploration: f64,
        dispersion: f64,
    ) -> Result<Self> {
        let (d, n) = (p.d, p.n);
        if x0.len() != d {
            return Err(Error::Parameter(format!("x0 has {} coordinates, expected {d}", x0.len())));
        }
        let w = simulate_brownian(&grid, paths, n, seeds.0)?;
        let noise = simulate_brownian(&grid, paths, d, seeds.1)?;
        let unit = TimeGrid::new(0.0, 1.0, 1)?;
        let spread = simulate_brownian(&unit, paths, d, seeds.2)?;
        let starts: Vec<f64> = (0..paths)
            .flat_map(|m| {
                let e = spread.increment(m, 0);
                (0..d).map(move |i| x0[i] + dispersion * e[i]).collect::<Vec<_>>()
            })
            .collect();
        let mut x = PathEnsemble::starting_at_each(grid, d, &starts)?;
        let dt = grid.dt();
        let (y0, z0) = (vec![0.0; n], vec![0.0; n * n]);
        let bad = x
            .slots_mut()
            .enumerate()
            .map(|(m, mut slot)| {
                let mut b = vec![0.0; d];
                let mut s = vec![0.0; d * n];
                let mut next = vec![0.0; d];
                for k in 0..grid.n_steps() {
                    {
                        let view = slot.view(k);
                        p.b_into(&view, &y0, &z0, &mut b);
                        p.sigma_into(&view, &y0, &z0, &mut s);
                    }
                    let (dw, db) = (w.increment(m, k), noise.increment(m, k));
                    let xk = slot.value(k);
                    for i in 0..d {
                        next[i] = xk[i]
                            + b[i] * dt
                            + (0..n).map(|j| s[i * n + j] * dw[j]).sum::<f64>()
                            + exploration * db[i];
                    }
                    if next.iter().any(|v| !v.is_finite()) {
                        return Some(k + 1);
                    }
                    slot.set(k + 1, &next);
                }
                None
            })
            .min_by_key(|v| v.unwrap_or(usize::MAX))
            .flatten();
        if let Some(node) = bad {
            return Err(Error::Divergence {
                node,
                detail: "non-finite training path".into(),
            });
        }
        Ok(Self { x, w })
    }
}

/// A schedule patch snapped to grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpan {
    pub start_node: usize,
    pub end_node: usize,
}

/// Rounds schedule boundaries to grid nodes, merging patches shorter than a
/// step. Spans come in backward order.
pub fn snap_schedule(schedule: &StepSchedule, grid: &TimeGrid) -> Result<Vec<PatchSpan>> {
    if (schedule.horizon - grid.horizon()).abs() > 1e-9 * (1.0 + grid.horizon()) {
        return Err(Error::Parameter(format!(
            "schedule covers {} but the grid covers {}",
            schedule.horizon,
            grid.horizon()
        )));
    }
    let last = grid.n_steps();
    let mut nodes: Vec<usize> = vec![last];
    for b in schedule.boundaries().into_iter().skip(1) {
        let k = ((b - grid.t0()) / grid.dt()).round().clamp(0.0, last as f64) as usize;
        if k < *nodes.last().unwrap() {
            nodes.push(k);
        }
    }
    if *nodes.last().unwrap() != 0 {
        nodes.push(0);
    }
    Ok(nodes
        .windows(2)
        .map(|w| PatchSpan {
            start_node: w[1],
            end_node: w[0],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub index: usize,
    pub span: PatchSpan,
    pub start: f64,
    pub end: f64,
    pub updates: usize,
    pub residuals: Vec<f64>,
}

/// Backward induction of the field over `schedule` on the training paths.
pub fn build_field_backward(
    p: &CoefficientSet,
    schedule: &StepSchedule,
    training: &TrainingEnsemble,
    picard: &PicardConfig,
) -> Result<(DecouplingField, Vec<PatchReport>)> {
    picard.validate()?;
    let grid = *training.x.grid();
    let spans = snap_schedule(schedule, &grid)?;
    let mut field = DecouplingField::new(grid, p.d, p.n, picard.features, p.g.clone());
    let mut reports = Vec::with_capacity(spans.len());
    let paths = training.x.paths();
    for (index, span) in spans.iter().enumerate() {
        let (start, end) = (grid.time(span.start_node), grid.time(span.end_node));
        let wrap = |source: Error| Error::Patch {
            patch: index,
            start,
            end,
            source: Box::new(source),
        };
        let (res, residuals) = {
            let field_ref = &field;
            let term = |v: &PathView<'_>, out: &mut [f64]| field_ref.eval(v, out);
            picard_loop(
                picard,
                paths,
                p.n,
                span.end_node - span.start_node + 1,
                grid.dt(),
                |fy, fz| {
                    Sweep {
                        p,
                        x: &training.x,
                        w: &training.w,
                        w_offset: 0,
                        k_start: span.start_node,
                        k_end: span.end_node,
                        terminal: &term,
                        fm: &picard.features,
                        transition: Transition::OneStep,
                    }
                    .run(fy, fz)
                },
            )
            .map_err(wrap)?
        };
        for (i, (ym, zm)) in res.y_models.into_iter().zip(res.z_models).enumerate() {
            field.set_node(span.start_node + i, ym, zm);
        }
        reports.push(PatchReport {
            index,
            span: *span,
            start,
            end,
            updates: residuals.len().saturating_sub(1),
            residuals,
        });
    }
    Ok((field, reports))
}

/// Euler pass along the field: `Y = u(t, X)`, `Z` from the stored `Z` models.
pub fn forward_pass(
    p: &CoefficientSet,
    u: &DecouplingField,
    x0: &[f64],
    w: &BrownianEnsemble,
) -> Result<SolutionTriple> {
    let grid = *w.grid();
    if grid != *u.grid() {
        return Err(Error::Parameter("Brownian grid differs from the field grid".into()));
    }
    let (d, n) = (p.d, p.n);
    let nn = n * n;
    if x0.len() != d || w.dim() != n {
        return Err(Error::Parameter("dimension mismatch in forward pass".into()));
    }
    let paths = w.paths();
    let nodes = grid.node_count();
    let dt = grid.dt();
    let mut x = PathEnsemble::starting_at(grid, x0, paths);
    let per_path: Vec<Result<(Vec<f64>, Vec<f64>)>> = x
        .slots_mut()
        .enumerate()
        .map(|(m, mut slot)| {
            let mut ys = vec![0.0; nodes * n];
            let mut zs = vec![0.0; nodes * nn];
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * n];
            let mut next = vec![0.0; d];
            for k in 0..nodes {
                {
                    let view = slot.view(k);
                    let (yk, zk) = (&mut ys[k * n..(k + 1) * n], &mut zs[k * nn..(k + 1) * nn]);
                    u.eval(&view, yk)?;
                    u.eval_z(&view, zk)?;
                    if k + 1 == nodes {
                        break;
                    }
                    p.b_into(&view, yk, zk, &mut b);
                    p.sigma_into(&view, yk, zk, &mut s);
                }
                let dw = w.increment(m, k);
                let xk = slot.value(k);
                for i in 0..d {
                    next[i] = xk[i] + b[i] * dt + (0..n).map(|j| s[i * n + j] * dw[j]).sum::<f64>();
                }
                if next.iter().chain(&ys[k * n..(k + 1) * n]).any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        node: k + 1,
                        detail: format!("non-finite forward state on path {m}"),
                    });
                }
                slot.set(k + 1, &next);
            }
            Ok((ys, zs))
        })
        .collect();
    let mut y = vec![0.0; nodes * paths * n];
    let mut z = vec![0.0; nodes * paths * nn];
    for (m, r) in per_path.into_iter().enumerate() {
        let (ys, zs) = r?;
        for k in 0..nodes {
            y[(k * paths + m) * n..][..n].copy_from_slice(&ys[k * n..(k + 1) * n]);
            z[(k * paths + m) * nn..][..nn].copy_from_slice(&zs[k * nn..(k + 1) * nn]);
        }
    }
    SolutionTriple::new(x, 0, n, y, z)
}

/// Forward pass with a fresh Brownian ensemble.
pub fn forward_pass_seeded(
    p: &CoefficientSet,
    u: &DecouplingField,
    x0: &[f64],
    paths: usize,
    seed: u64,
) -> Result<(SolutionTriple, BrownianEnsemble)> {
    let w = simulate_brownian(u.grid(), paths, p.n, seed)?;
    Ok((forward_pass(p, u, x0, &w)?, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionReport {
    pub patch: usize,
    pub node: usize,
    pub time: f64,
    /// RMS over paths of the re-estimated `Y` at the patch start minus `u`.
    pub mismatch: f64,
    pub pooled_residual: f64,
    pub tolerance: f64,
    pub ok: bool,
}

/// Re-estimates `Y` at each patch start by a sweep over the forward paths
/// with the patch's terminal taken from the field, and compares with `u`.
pub fn junction_check(
    p: &CoefficientSet,
    u: &DecouplingField,
    sol: &SolutionTriple,
    w: &BrownianEnsemble,
    spans: &[PatchSpan],
) -> Result<Vec<JunctionReport>> {
    let paths = sol.paths();
    let n = p.n;
    let residuals = u.residuals();
    let term = |v: &PathView<'_>, out: &mut [f64]| u.eval(v, out);
    spans
        .iter()
        .enumerate()
        .map(|(patch, span)| {
            let res = Sweep {
                p,
                x: &sol.x,
                w,
                w_offset: 0,
                k_start: span.start_node,
                k_end: span.end_node,
                terminal: &term,
                fm: u.feature_map(),
                transition: Transition::OnPath,
            }
            .run(&[], &[])?;
            let k = span.start_node;
            let field_y = sol.y_node(k);
            let refit = &res.y[..paths * n];
            let mismatch = (refit
                .iter()
                .zip(field_y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / paths as f64)
                .sqrt();
            let scale = (field_y.iter().map(|v| v * v).sum::<f64>() / paths as f64).sqrt();
            let pooled: Vec<f64> = (span.start_node..span.end_node)
                .filter_map(|j| residuals[j])
                .collect();
            let pooled_residual = if pooled.is_empty() {
                0.0
            } else {
                (pooled.iter().map(|r| r * r).sum::<f64>() / pooled.len() as f64).sqrt()
            };
            let tolerance = 3.0 * pooled_residual + JUNCTION_FLOOR * (1.0 + scale);
            Ok(JunctionReport {
                patch,
                node: k,
                time: sol.grid().time(k),
                mismatch,
                pooled_residual,
                tolerance,
                ok: mismatch <= tolerance,
            })
        })
        .collect()
}

/// Serializable part of a global solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub problem: String,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub paths: usize,
    pub certificate: HorizonCertificate,
    pub spans: Vec<PatchSpan>,
    pub patches: Vec<PatchReport>,
    pub field_residuals: Vec<Option<f64>>,
    pub junctions: Vec<JunctionReport>,
    pub max_junction_mismatch: f64,
    pub junctions_ok: bool,
    /// `u(0, x0)` averaged over the forward ensemble.
    pub y0: Vec<f64>,
    /// Plain Monte Carlo estimate of `Y₀` from `g(X) + Σ f Δt`.
    pub y0_mc: f64,
    pub y0_mc_stderr: f64,
}

#[derive(Debug, Clone)]
pub struct GlobalSolveReport {
    pub summary: SolveSummary,
    pub trajectory: ODESolution,
    pub field: DecouplingField,
    pub solution: SolutionTriple,
    pub brownian: BrownianEnsemble,
}

impl GlobalSolveReport {
    pub fn schedule(&self) -> Option<&StepSchedule> {
        self.summary.certificate.schedule.as_ref()
    }
}

fn mc_y0(p: &CoefficientSet, sol: &SolutionTriple) -> (f64, f64) {
    let grid = sol.grid();
    let dt = grid.dt();
    let last = grid.n_steps();
    let n = p.n;
    let vals: Vec<f64> = (0..sol.paths())
        .into_par_iter()
        .map(|m| {
            let mut g = vec![0.0; n];
            p.g_into(&sol.x.view(m, last), &mut g);
            let mut acc = g[0];
            let mut f = vec![0.0; n];
            for k in 0..last {
                p.f_into(&sol.x.view(m, k), sol.y(m, k), sol.z(m, k), &mut f);
                acc += f[0] * dt;
            }
            acc
        })
        .collect();
    mean_and_stderr(&vals)
}

/// Certify, build the field over the certified schedule, run the forward
/// pass and check junction continuity. Refusals surface with their
/// certificate and no solution.
pub fn global_solve(
    p: &CoefficientSet,
    horizon: f64,
    x0: &[f64],
    cfg: &SolveConfig,
) -> Result<GlobalSolveReport> {
    cfg.validate()?;
    let cert = certify(p, horizon, &cfg.certify_options())?;
    let schedule = cert
        .certificate
        .schedule
        .clone()
        .ok_or_else(|| Error::Parameter("certificate carries no schedule".into()))?;
    solve_with_schedule(p, horizon, x0, cfg, &schedule, cert.certificate, cert.trajectory)
}

/// Field construction and forward pass over a given schedule.
pub fn solve_with_schedule(
    p: &CoefficientSet,
    horizon: f64,
    x0: &[f64],
    cfg: &SolveConfig,
    schedule: &StepSchedule,
    certificate: HorizonCertificate,
    trajectory: ODESolution,
) -> Result<GlobalSolveReport> {
    let grid = TimeGrid::new(0.0, horizon, cfg.steps)?;
    let [s_w, s_b, s_x, s_fwd] = cfg.seeds();
    let training = TrainingEnsemble::simulate(
        p,
        grid,
        x0,
        cfg.paths,
        (s_w, s_b, s_x),
        cfg.exploration,
        cfg.dispersion,
    )?;
    let (field, patches) = build_field_backward(p, schedule, &training, &cfg.picard)?;
    drop(training);
    let (solution, brownian) = forward_pass_seeded(p, &field, x0, cfg.paths, s_fwd)?;
    let spans = snap_schedule(schedule, &grid)?;
    let junctions = junction_check(p, &field, &solution, &brownian, &spans)?;
    let max_junction_mismatch = junctions.iter().fold(0.0f64, |a, j| a.max(j.mismatch));
    let junctions_ok = junctions.iter().all(|j| j.ok);
    let y0: Vec<f64> = (0..p.n)
        .map(|i| {
            (0..solution.paths()).map(|m| solution.y(m, 0)[i]).sum::<f64>()
                / solution.paths() as f64
        })
        .collect();
    let (y0_mc, y0_mc_stderr) = mc_y0(p, &solution);
    Ok(GlobalSolveReport {
        summary: SolveSummary {
            problem: p.name.clone(),
            horizon,
            x0: x0.to_vec(),
            steps: cfg.steps,
            paths: cfg.paths,
            certificate,
            spans,
            patches,
            field_residuals: field.residuals(),
            junctions,
            max_junction_mismatch,
            junctions_ok,
            y0,
            y0_mc,
            y0_mc_stderr,
        },
        trajectory,
        field,
        solution,
        brownian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::eval_field;
    use crate::paths::PathSample;
    use crate::problems::builtin;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn problem(name: &str) -> CoefficientSet {
        builtin(name, &BTreeMap::new()).unwrap()
    }

    fn small(steps: usize, paths: usize) -> SolveConfig {
        SolveConfig {
            steps,
            paths,
            ..SolveConfig::default()
        }
    }

    #[test]
    fn snapping_merges_short_patches() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let s = StepSchedule::uniform(1.0, 40).unwrap();
        let spans = snap_schedule(&s, &grid).unwrap();
        assert_eq!(spans.len(), 10);
        assert!(spans.iter().all(|s| s.end_node == s.start_node + 1));
        let s = StepSchedule::uniform(1.0, 1).unwrap();
        assert_eq!(
            snap_schedule(&s, &grid).unwrap(),
            vec![PatchSpan {
                start_node: 0,
                end_node: 10
            }]
        );
        let s = StepSchedule::uniform(2.0, 1).unwrap();
        assert!(snap_schedule(&s, &grid).is_err());
    }

    #[test]
    fn martingale_field_is_identity() {
        let p = problem("pure_martingale");
        let r = global_solve(&p, 1.0, &[1.0], &small(20, 2000)).unwrap();
        let grid = *r.field.grid();
        for k in 0..=20 {
            let x = PathSample::from_fn(grid, 1, |t| vec![0.3 + (5.0 * t).sin()]).unwrap();
            let y = eval_field(&r.field, k, &x).unwrap()[0];
            assert!((y - x.value(k)[0]).abs() < 1e-3, "node {k}: {y}");
        }
        assert!(r.summary.junctions_ok);
        assert_eq!(r.summary.patches.len(), 1);
        assert_eq!(r.summary.patches[0].updates, 1);
        let (zbar, _) = mean_and_stderr(r.solution.z_node(5));
        assert!((zbar - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_patch_matches_local_regressions() {
        // With one patch and a decoupled problem, every node model comes from
        // one sweep, so evaluating the field on training paths reproduces the
        // sweep's fitted values.
        let p = problem("pure_martingale");
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let tr = TrainingEnsemble::simulate(&p, grid, &[0.0], 500, (1, 2, 3), 1.0, 1.0).unwrap();
        let s = StepSchedule::uniform(1.0, 1).unwrap();
        let cfg = PicardConfig::default();
        let (field, _) = build_field_backward(&p, &s, &tr, &cfg).unwrap();
        let term = |v: &PathView<'_>, out: &mut [f64]| -> Result<()> {
            p.g_into(v, out);
            Ok(())
        };
        let res = Sweep {
            p: &p,
            x: &tr.x,
            w: &tr.w,
            w_offset: 0,
            k_start: 0,
            k_end: 10,
            terminal: &term,
            fm: &cfg.features,
            transition: Transition::OneStep,
        }
        .run(&vec![0.0; 11 * 500], &vec![0.0; 11 * 500])
        .unwrap();
        for k in [0, 4, 9] {
            for m in [0, 17, 499] {
                let mut out = [0.0];
                field.eval(&tr.x.view(m, k), &mut out).unwrap();
                assert!((out[0] - res.y[k * 500 + m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_y_drift_two_patches() {
        let p = problem("linear_y_drift");
        let grid = TimeGrid::new(0.0, 0.5, 100).unwrap();
        let tr = TrainingEnsemble::simulate(&p, grid, &[1.0], 1000, (4, 5, 6), 1.0, 1.0).unwrap();
        let s = StepSchedule::uniform(0.5, 2).unwrap();
        let (field, reports) = build_field_backward(&p, &s, &tr, &PicardConfig::default()).unwrap();
        assert_eq!(reports.len(), 2);
        let x = PathSample::constant(grid, &[1.0]).unwrap();
        let y = eval_field(&field, 0, &x).unwrap()[0];
        assert!((y / 2.0 - 1.0).abs() < 0.03, "{y}");
    }

    #[test]
    fn constant_problem_forward_pass() {
        let mut p = problem("pure_martingale");
        p.sigma = Arc::new(|_, _, _, out| out.fill(0.0));
        p.g = Arc::new(|_, out| out.fill(0.25));
        let r = global_solve(&p, 1.0, &[0.5], &small(10, 500)).unwrap();
        for k in 0..=10 {
            for m in [0, 250, 499] {
                assert!((r.solution.y(m, k)[0] - 0.25).abs() < 1e-6);
                assert!(r.solution.z(m, k)[0].abs() < 1e-6);
                assert_eq!(r.solution.x.value(m, k)[0], 0.5);
            }
        }
    }

    #[test]
    fn refusals_carry_certificates() {
        let p = problem("linear_y_drift");
        let err = global_solve(&p, 1.2, &[1.0], &small(20, 200)).unwrap_err();
        assert!(matches!(err, Error::Horizon { .. }));
        let z = problem("zdrift_counterexample");
        let err = global_solve(&z, 0.25, &[0.0], &small(20, 200)).unwrap_err();
        assert!(matches!(err, Error::MaximalInterval { .. }));
        assert!(err.certificate().is_some());
    }

    #[test]
    fn independent_seeds_agree() {
        let p = problem("pure_martingale");
        let a = global_solve(&p, 1.0, &[1.0], &small(20, 4000)).unwrap();
        let mut cfg = small(20, 4000);
        cfg.seed = 99;
        let b = global_solve(&p, 1.0, &[1.0], &cfg).unwrap();
        let (sa, sb) = (&a.summary, &b.summary);
        let se = (sa.y0_mc_stderr.powi(2) + sb.y0_mc_stderr.powi(2)).sqrt();
        assert!((sa.y0_mc - sb.y0_mc).abs() <= 3.0 * se);
    }
}
