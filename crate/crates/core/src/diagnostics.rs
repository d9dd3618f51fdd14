//! Numerical checks of the a-priori estimate, the stability inequality and
//! the comparison between characteristic and dominating trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristic::characteristic_ensemble;
use crate::error::{Error, Result};
use crate::global::{forward_pass, global_solve, SolveConfig};
use crate::local::SolutionTriple;
use crate::paths::simulate_brownian;
use crate::problems::{classify_structure, compute_i0, terminal_at_zero_sq, CoefficientSet};

/// Slack on the dominating trajectory in the comparison check.
pub const COMPARISON_SLACK: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBreakdown {
    pub t: f64,
    pub x_norm_sq: f64,
    pub y_sq: f64,
    pub z_tail: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub lhs: f64,
    pub rhs_core: f64,
    pub x_sq: f64,
    pub g0_sq: f64,
    pub i0_sq: f64,
    /// `lhs / rhs_core`; `None` when the right side vanishes.
    pub fitted_c: Option<f64>,
    pub degenerate: bool,
    pub nodes: Vec<NodeBreakdown>,
}

/// Per-node ensemble means of `‖X‖²_{2,t}`, `|Y_t|²` and `Σ_{j≥k}|Z_j|²Δt`,
/// for a single solution or for the difference of two.
fn node_breakdown(a: &SolutionTriple, b: Option<&SolutionTriple>) -> Vec<NodeBreakdown> {
    let grid = *a.grid();
    let dt = grid.dt();
    let nodes = grid.node_count();
    let paths = a.paths();
    let per_path: Vec<Vec<[f64; 3]>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut out = vec![[0.0; 3]; nodes];
            let mut sq_int = 0.0;
            for (k, o) in out.iter_mut().enumerate() {
                let xa = a.x.value(m, k);
                let x_sq: f64 = match b {
                    Some(b) => xa.iter().zip(b.x.value(m, k)).map(|(u, v)| (u - v).powi(2)).sum(),
                    None => xa.iter().map(|u| u * u).sum(),
                };
                o[0] = sq_int + x_sq;
                sq_int += x_sq * dt;
                let ya = a.y(m, k);
                o[1] = match b {
                    Some(b) => ya.iter().zip(b.y(m, k)).map(|(u, v)| (u - v).powi(2)).sum(),
                    None => ya.iter().map(|u| u * u).sum(),
                };
            }
            let mut tail = 0.0;
            for k in (0..nodes).rev() {
                let za = a.z(m, k);
                let z_sq: f64 = match b {
                    Some(b) => za.iter().zip(b.z(m, k)).map(|(u, v)| (u - v).powi(2)).sum(),
                    None => za.iter().map(|u| u * u).sum(),
                };
                if k + 1 < nodes {
                    tail += z_sq * dt;
                }
                out[k][2] = tail;
            }
            out
        })
        .collect();
    (0..nodes)
        .map(|k| {
            let mut s = [0.0; 3];
            for p in &per_path {
                for i in 0..3 {
                    s[i] += p[k][i];
                }
            }
            let [x_norm_sq, y_sq, z_tail] = s.map(|v| v / paths as f64);
            NodeBreakdown {
                t: grid.time(k),
                x_norm_sq,
                y_sq,
                z_tail,
                total: x_norm_sq + y_sq + z_tail,
            }
        })
        .collect()
}

fn sup_total(nodes: &[NodeBreakdown]) -> f64 {
    nodes.iter().fold(0.0f64, |a, n| a.max(n.total))
}

/// Both sides of the a-priori estimate on a global solution.
pub fn apriori_check(
    p: &CoefficientSet,
    horizon: f64,
    x0: &[f64],
    cfg: &SolveConfig,
) -> Result<AprioriReport> {
    let r = global_solve(p, horizon, x0, cfg)?;
    let grid = *r.solution.grid();
    let nodes = node_breakdown(&r.solution, None);
    let lhs = sup_total(&nodes);
    let x_sq: f64 = x0.iter().map(|v| v * v).sum();
    let g0_sq = terminal_at_zero_sq(p, &grid)?;
    let i0_sq = compute_i0(p, &grid)?.i0_sq;
    let rhs_core = x_sq + g0_sq + i0_sq;
    let degenerate = rhs_core == 0.0;
    Ok(AprioriReport {
        lhs,
        rhs_core,
        x_sq,
        g0_sq,
        i0_sq,
        fitted_c: (!degenerate).then(|| lhs / rhs_core),
        degenerate,
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub delta_lhs: f64,
    pub delta_rhs_core: f64,
    pub dx_sq: f64,
    pub dg_sq: f64,
    pub di0_sq: f64,
    /// `delta_lhs / delta_rhs_core`; `None` when the right side vanishes.
    pub ratio: Option<f64>,
    pub perturbation: String,
    pub nodes: Vec<NodeBreakdown>,
}

/// `E|Δg(X')|²` and `ΔI₀²` along the paths of the second solution.
fn perturbation_terms(
    p1: &CoefficientSet,
    p2: &CoefficientSet,
    s2: &SolutionTriple,
) -> Result<(f64, f64)> {
    let (d, n) = (p2.d, p2.n);
    let grid = *s2.grid();
    let dt = grid.dt();
    let last = grid.n_steps();
    let vals: Vec<(f64, f64)> = (0..s2.paths())
        .into_par_iter()
        .map(|m| {
            let (mut g1, mut g2) = (vec![0.0; n], vec![0.0; n]);
            let full = s2.x.view(m, last);
            p1.g_into(&full, &mut g1);
            p2.g_into(&full, &mut g2);
            let dg: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum();
            let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
            let (mut s1, mut s2v) = (vec![0.0; d * n], vec![0.0; d * n]);
            let (mut f1, mut f2) = (vec![0.0; n], vec![0.0; n]);
            let (mut drift, mut diffusion) = (0.0, 0.0);
            for k in 0..last {
                let v = s2.x.view(m, k);
                let (y, z) = (s2.y(m, k), s2.z(m, k));
                p1.b_into(&v, y, z, &mut b1);
                p2.b_into(&v, y, z, &mut b2);
                p1.sigma_into(&v, y, z, &mut s1);
                p2.sigma_into(&v, y, z, &mut s2v);
                p1.f_into(&v, y, z, &mut f1);
                p2.f_into(&v, y, z, &mut f2);
                let diff = |a: &[f64], b: &[f64]| {
                    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
                };
                drift += (diff(&f1, &f2).sqrt() + diff(&b1, &b2).sqrt()) * dt;
                diffusion += diff(&s1, &s2v) * dt;
            }
            (dg, drift * drift + diffusion)
        })
        .collect();
    if vals.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Evaluation("non-finite perturbation terms".into()));
    }
    let m = vals.len() as f64;
    Ok((
        vals.iter().map(|v| v.0).sum::<f64>() / m,
        vals.iter().map(|v| v.1).sum::<f64>() / m,
    ))
}

/// Both sides of the stability inequality for two problems solved on common
/// random numbers (the same seeds drive both solves).
pub fn stability_compare(
    p1: &CoefficientSet,
    p2: &CoefficientSet,
    horizon: f64,
    x0s: (&[f64], &[f64]),
    cfg: &SolveConfig,
) -> Result<StabilityReport> {
    let (c1, c2) = (classify_structure(p1)?, classify_structure(p2)?);
    if c1 != c2 {
        return Err(Error::Hypothesis(format!(
            "stability needs problems of one structural class, got {c1} and {c2}"
        )));
    }
    if p1.d != p2.d || p1.n != p2.n {
        return Err(Error::Hypothesis("problems have different dimensions".into()));
    }
    let r1 = global_solve(p1, horizon, x0s.0, cfg)?;
    let r2 = global_solve(p2, horizon, x0s.1, cfg)?;
    let nodes = node_breakdown(&r1.solution, Some(&r2.solution));
    let delta_lhs = sup_total(&nodes);
    let dx_sq: f64 = x0s.0.iter().zip(x0s.1).map(|(a, b)| (a - b).powi(2)).sum();
    let (dg_sq, di0_sq) = perturbation_terms(p1, p2, &r2.solution)?;
    let delta_rhs_core = dx_sq + dg_sq + di0_sq;
    Ok(StabilityReport {
        delta_lhs,
        delta_rhs_core,
        dx_sq,
        dg_sq,
        di0_sq,
        ratio: (delta_rhs_core > 0.0).then(|| delta_lhs / delta_rhs_core),
        perturbation: format!("`{}` against `{}`", p1.name, p2.name),
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pairs: usize,
    pub degenerate_pairs: usize,
    pub checked_nodes: usize,
    pub pass: bool,
    pub violations: usize,
    /// Smallest `1.2·y(t) − H_t` over checked nodes.
    pub worst_margin: f64,
    pub worst_path: Option<usize>,
    pub worst_time: Option<f64>,
    pub worst_h: Option<f64>,
    pub worst_y: Option<f64>,
    /// Largest `|β_t|` and largest `||P_t| − 1|` where `P` is defined.
    pub max_beta: f64,
    pub max_p_deviation: f64,
}

/// Solves on a certified horizon, runs `pairs` forward pairs from `x0` and
/// `x0 + bump` on shared noise and checks `H_t ≤ 1.2·y(t)` node-wise against
/// the dominating trajectory `y`.
pub fn comparison_check(
    p: &CoefficientSet,
    horizon: f64,
    x0: &[f64],
    pairs: usize,
    bump: f64,
    cfg: &SolveConfig,
) -> Result<ComparisonReport> {
    if pairs == 0 || !(bump != 0.0) || !bump.is_finite() {
        return Err(Error::Parameter("comparison needs pairs >= 1 and a finite nonzero bump".into()));
    }
    let r = global_solve(p, horizon, x0, cfg)?;
    let w = simulate_brownian(r.field.grid(), pairs, p.n, cfg.seed ^ 0x5eed_c0de)?;
    let bumped: Vec<f64> = x0.iter().map(|v| v + bump).collect();
    let s1 = forward_pass(p, &r.field, &bumped, &w)?;
    let s2 = forward_pass(p, &r.field, x0, &w)?;
    let trajectories = characteristic_ensemble(&s1, &s2, p)?;
    let mut report = ComparisonReport {
        pairs,
        degenerate_pairs: 0,
        checked_nodes: 0,
        pass: true,
        violations: 0,
        worst_margin: f64::INFINITY,
        worst_path: None,
        worst_time: None,
        worst_h: None,
        worst_y: None,
        max_beta: 0.0,
        max_p_deviation: 0.0,
    };
    for t in &trajectories {
        let Some(t) = t else {
            report.degenerate_pairs += 1;
            continue;
        };
        for i in 0..t.nodes() {
            if t.masked[i] {
                continue;
            }
            report.checked_nodes += 1;
            let beta = t.beta_at(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            report.max_beta = report.max_beta.max(beta);
            if t.p_defined[i] {
                let pn = t.p_at(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                report.max_p_deviation = report.max_p_deviation.max((pn - 1.0).abs());
            }
            let y = r.trajectory.value_at(t.times[i]);
            let margin = COMPARISON_SLACK * y - t.h[i];
            if margin < 0.0 {
                report.violations += 1;
                report.pass = false;
            }
            if margin < report.worst_margin {
                report.worst_margin = margin;
                report.worst_path = Some(t.path);
                report.worst_time = Some(t.times[i]);
                report.worst_h = Some(t.h[i]);
                report.worst_y = Some(y);
            }
        }
    }
    Ok(report)
}
