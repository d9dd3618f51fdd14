//! Local contraction machinery: the decoupled step, Picard iteration of the
//! map `(y, z) ↦ (Y, Z)`, the closed-form contraction constants and the
//! certified local-horizon search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Design, FeatureMap, NodeModel};
use crate::paths::{BrownianEnsemble, PathEnsemble, PathSample, PathView, TimeGrid};
use crate::problems::{CoefficientSet, LipschitzData, TerminalFn};

/// Contraction is certified when `γ` stays below this threshold.
pub const CERTIFY_THRESHOLD: f64 = 0.99;

/// Smallest interval length the horizon search tries.
pub const MIN_HORIZON: f64 = 1e-8;

/// Largest interval length the horizon search reports.
pub const MAX_HORIZON: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Iterations over which the residual must decrease.
    pub window: usize,
    pub features: FeatureMap,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-10,
            window: 10,
            features: FeatureMap::default(),
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) || self.window == 0 {
            return Err(Error::Parameter(
                "Picard needs max_iters >= 1, tol > 0 and window >= 1".into(),
            ));
        }
        self.features.validate()
    }
}

/// Ensemble of `(X, Y, Z)` on a grid. `Y` and `Z` are stored from node
/// `start` on, node-major; `Z` is `n × n` row-major.
#[derive(Debug, Clone)]
pub struct SolutionTriple {
    pub x: PathEnsemble,
    pub start: usize,
    pub n: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl SolutionTriple {
    pub fn new(x: PathEnsemble, start: usize, n: usize, y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let nodes = x.grid().node_count() - start;
        let m = x.paths();
        if y.len() != nodes * m * n || z.len() != nodes * m * n * n {
            return Err(Error::Parameter("solution arrays do not match the grid".into()));
        }
        Ok(Self { x, start, n, y, z })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    pub fn paths(&self) -> usize {
        self.x.paths()
    }

    pub fn y(&self, m: usize, k: usize) -> &[f64] {
        let i = ((k - self.start) * self.paths() + m) * self.n;
        &self.y[i..i + self.n]
    }

    pub fn z(&self, m: usize, k: usize) -> &[f64] {
        let nn = self.n * self.n;
        let i = ((k - self.start) * self.paths() + m) * nn;
        &self.z[i..i + nn]
    }

    pub fn y_node(&self, k: usize) -> &[f64] {
        let len = self.paths() * self.n;
        &self.y[(k - self.start) * len..(k - self.start + 1) * len]
    }

    pub fn z_node(&self, k: usize) -> &[f64] {
        let len = self.paths() * self.n * self.n;
        &self.z[(k - self.start) * len..(k - self.start + 1) * len]
    }

    /// Mean and standard error of the first `Y` coordinate at node `k`.
    pub fn y_stats(&self, k: usize) -> (f64, f64) {
        let m = self.paths();
        let vals: Vec<f64> = (0..m).map(|p| self.y(p, k)[0]).collect();
        mean_and_stderr(&vals)
    }
}

pub(crate) fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Initial condition of a local solve.
#[derive(Debug, Clone)]
pub enum Initial {
    /// `X` starts at this point at the first node of the Brownian grid.
    Point(Vec<f64>),
    /// `X` continues this path, which must end where the Brownian grid starts.
    Path(PathSample),
}

/// How the next forward node entering a regression target is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transition {
    /// The ensemble already follows the frozen dynamics; use its own next node.
    OnPath,
    /// Take one Euler step of the frozen dynamics from each node. The
    /// ensemble itself may follow any adapted sampling law.
    OneStep,
}

pub(crate) type FallibleTerminal<'a> = dyn Fn(&PathView<'_>, &mut [f64]) -> Result<()> + Sync + 'a;

/// One backward regression sweep over nodes `k_start..=k_end`.
pub(crate) struct Sweep<'a> {
    pub p: &'a CoefficientSet,
    pub x: &'a PathEnsemble,
    pub w: &'a BrownianEnsemble,
    /// `W` increment index of step `k` is `k - w_offset`.
    pub w_offset: usize,
    pub k_start: usize,
    pub k_end: usize,
    pub terminal: &'a FallibleTerminal<'a>,
    pub fm: &'a FeatureMap,
    pub transition: Transition,
}

#[derive(Debug, Clone)]
pub(crate) struct SweepResult {
    /// Node-major from `k_start` to `k_end`.
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// Models for nodes `k_start..k_end`.
    pub y_models: Vec<NodeModel>,
    pub z_models: Vec<NodeModel>,
}

impl Sweep<'_> {
    fn nodes(&self) -> usize {
        self.k_end - self.k_start + 1
    }

    pub fn run(&self, frozen_y: &[f64], frozen_z: &[f64]) -> Result<SweepResult> {
        let p = self.p;
        let (d, n) = (p.d, p.n);
        let nn = n * n;
        let m_paths = self.x.paths();
        let dt = self.x.grid().dt();
        let nodes = self.nodes();
        let feat = self.fm.count(d);
        let mut y = vec![0.0; nodes * m_paths * n];
        let mut z = vec![0.0; nodes * m_paths * nn];
        let mut y_models = Vec::with_capacity(nodes - 1);
        let mut z_models = Vec::with_capacity(nodes - 1);

        // Terminal node.
        let last = (nodes - 1) * m_paths * n;
        y[last..last + m_paths * n]
            .par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(m, out)| (self.terminal)(&self.x.view(m, self.k_end), out))?;

        let mut next_model: Option<NodeModel> = None;
        for k in (self.k_start..self.k_end).rev() {
            let rel = k - self.k_start;
            let (head, tail) = y.split_at_mut((rel + 1) * m_paths * n);
            let y_after = &tail[..m_paths * n];
            let mut phi = vec![0.0; m_paths * feat];
            let mut y_next = vec![0.0; m_paths * n];
            let mut dw = vec![0.0; m_paths * n];
            let widx = k - self.w_offset;
            phi.par_chunks_mut(feat)
                .zip(y_next.par_chunks_mut(n))
                .zip(dw.par_chunks_mut(n))
                .enumerate()
                .try_for_each(|(m, ((row, yn), dwm))| -> Result<()> {
                    let view = self.x.view(m, k);
                    self.fm.features(&view, row);
                    dwm.copy_from_slice(self.w.increment(m, widx));
                    match self.transition {
                        Transition::OnPath => yn.copy_from_slice(&y_after[m * n..(m + 1) * n]),
                        Transition::OneStep => {
                            let fy = &frozen_y[(rel * m_paths + m) * n..][..n];
                            let fz = &frozen_z[(rel * m_paths + m) * nn..][..nn];
                            let mut b = vec![0.0; d];
                            let mut s = vec![0.0; d * n];
                            p.b_into(&view, fy, fz, &mut b);
                            p.sigma_into(&view, fy, fz, &mut s);
                            let xk = view.current();
                            let next: Vec<f64> = (0..d)
                                .map(|i| {
                                    xk[i]
                                        + b[i] * dt
                                        + (0..n).map(|j| s[i * n + j] * dwm[j]).sum::<f64>()
                                })
                                .collect();
                            let mut ibuf = vec![0.0; d];
                            let ext = self.x.extended_view(m, k, &next, &mut ibuf);
                            match &next_model {
                                None => (self.terminal)(&ext, yn)?,
                                Some(model) => {
                                    let mut f = vec![0.0; feat];
                                    self.fm.features(&ext, &mut f);
                                    model.predict(&f, yn);
                                }
                            }
                        }
                    }
                    Ok(())
                })?;

            // Joint fit of y_next on [φ, φ·ΔW/√Δt]: the second block is Z·√Δt.
            let sd = dt.sqrt();
            let aug_cols = feat * (1 + n);
            let mut aug = vec![0.0; m_paths * aug_cols];
            aug.par_chunks_mut(aug_cols).enumerate().for_each(|(m, row)| {
                let base = &phi[m * feat..(m + 1) * feat];
                row[..feat].copy_from_slice(base);
                for j in 0..n {
                    let s = dw[m * n + j] / sd;
                    for (f, b) in base.iter().enumerate() {
                        row[(1 + j) * feat + f] = b * s;
                    }
                }
            });
            let joint = Design::new(k, aug, m_paths, aug_cols)?.fit(&y_next, n)?;
            let mut zc = vec![0.0; feat * nn];
            for f in 0..feat {
                for i in 0..n {
                    for j in 0..n {
                        zc[f * nn + i * n + j] = joint.coefficients[((1 + j) * feat + f) * n + i] / sd;
                    }
                }
            }
            let design = Design::new(k, phi, m_paths, feat)?;
            let mut zm = NodeModel {
                coefficients: zc,
                outputs: nn,
                residual: 0.0,
            };
            let zk = design.predict_all(&zm);
            zm.residual = joint.residual;

            let mut y_targets = vec![0.0; m_paths * n];
            y_targets
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(m, yt)| {
                    let view = self.x.view(m, k);
                    let yn = &y_next[m * n..(m + 1) * n];
                    let zm = &zk[m * nn..(m + 1) * nn];
                    let dwm = &dw[m * n..(m + 1) * n];
                    p.f_into(&view, yn, zm, yt);
                    for i in 0..n {
                        // Z·ΔW has zero conditional mean and serves as a control variate.
                        let zdw: f64 = (0..n).map(|j| zm[i * n + j] * dwm[j]).sum();
                        yt[i] = yn[i] - zdw + yt[i] * dt;
                    }
                });
            let ym = design.fit(&y_targets, n)?;
            let yk = design.predict_all(&ym);
            if yk.iter().chain(&zk).any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    node: k,
                    detail: "non-finite fitted values".into(),
                });
            }
            head[rel * m_paths * n..].copy_from_slice(&yk);
            z[rel * m_paths * nn..(rel + 1) * m_paths * nn].copy_from_slice(&zk);
            next_model = Some(ym.clone());
            y_models.push(ym);
            z_models.push(zm);
        }
        y_models.reverse();
        z_models.reverse();
        Ok(SweepResult {
            y,
            z,
            y_models,
            z_models,
        })
    }
}

/// Discrete `‖(Y,Z) − (y,z)‖²`: the largest over nodes of the ensemble mean
/// of `|ΔY_k|² + Σ_{j≥k} |ΔZ_j|² Δt`.
pub(crate) fn picard_residual(
    new: &SweepResult,
    old_y: &[f64],
    old_z: &[f64],
    paths: usize,
    n: usize,
    dt: f64,
) -> f64 {
    let nn = n * n;
    let nodes = new.y.len() / (paths * n);
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut acc = vec![0.0; nodes];
            let mut tail = 0.0;
            for r in (0..nodes).rev() {
                let yi = (r * paths + m) * n;
                let dy: f64 = (0..n)
                    .map(|i| (new.y[yi + i] - old_y[yi + i]).powi(2))
                    .sum();
                acc[r] = dy + tail;
                if r > 0 {
                    let zi = ((r - 1) * paths + m) * nn;
                    tail += (0..nn)
                        .map(|i| (new.z[zi + i] - old_z[zi + i]).powi(2))
                        .sum::<f64>()
                        * dt;
                }
            }
            acc
        })
        .collect();
    // Z at the last node is zero on both sides, so node r only collects
    // Z from nodes r..nodes-1 through `tail` updated before moving to r-1.
    let mut best = 0.0f64;
    for r in 0..nodes {
        let mean = per_path.iter().map(|a| a[r]).sum::<f64>() / paths as f64;
        best = best.max(mean);
    }
    best
}

/// Iterates `step` from `(0, 0)` until the residual drops below `tol`.
pub(crate) fn picard_loop<F>(
    cfg: &PicardConfig,
    paths: usize,
    n: usize,
    nodes: usize,
    dt: f64,
    mut step: F,
) -> Result<(SweepResult, Vec<f64>)>
where
    F: FnMut(&[f64], &[f64]) -> Result<SweepResult>,
{
    let mut frozen_y = vec![0.0; nodes * paths * n];
    let mut frozen_z = vec![0.0; nodes * paths * n * n];
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..cfg.max_iters {
        let res = step(&frozen_y, &frozen_z)?;
        let r = picard_residual(&res, &frozen_y, &frozen_z, paths, n, dt);
        if !r.is_finite() {
            return Err(Error::Divergence {
                node: 0,
                detail: format!("Picard residual became {r}"),
            });
        }
        history.push(r);
        if r < cfg.tol {
            return Ok((res, history));
        }
        // Not contracting: the best residual of the last `window` iterations
        // improves on the best before them by less than 10%.
        let len = history.len();
        let best = |h: &[f64]| h.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        if len > cfg.window
            && best(&history[len - cfg.window..]) >= 0.9 * best(&history[..len - cfg.window])
        {
            return Err(Error::NonContraction {
                from: len - 1 - cfg.window,
                to: len - 1,
                last: r,
                residuals: history,
            });
        }
        frozen_y = res.y;
        frozen_z = res.z;
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        tol: cfg.tol,
        last: history.last().copied().unwrap_or(f64::NAN),
        residuals: history,
    })
}

/// Working grid, start node and prefix-filled ensemble for an initial condition.
fn workspace(init: &Initial, w: &BrownianEnsemble, d: usize) -> Result<(PathEnsemble, usize)> {
    let wg = *w.grid();
    match init {
        Initial::Point(x0) => {
            if x0.len() != d {
                return Err(Error::Parameter(format!(
                    "initial point has {} coordinates, expected {d}",
                    x0.len()
                )));
            }
            Ok((PathEnsemble::starting_at(wg, x0, w.paths()), 0))
        }
        Initial::Path(prefix) => {
            let pg = prefix.grid();
            if prefix.dim() != d {
                return Err(Error::Parameter("initial path has the wrong dimension".into()));
            }
            if (pg.t1() - wg.t0()).abs() > 1e-12 * (1.0 + wg.t0().abs())
                || (pg.dt() - wg.dt()).abs() > 1e-12 * wg.dt()
            {
                return Err(Error::Junction(
                    "initial path must end where the Brownian grid starts, with equal steps"
                        .into(),
                ));
            }
            let grid = TimeGrid::new(pg.t0(), wg.t1(), pg.n_steps() + wg.n_steps())?;
            let start = pg.n_steps();
            let mut x = PathEnsemble::zeros(grid, d, w.paths());
            x.slots_mut().for_each(|mut slot| {
                for k in 0..=start {
                    slot.set(k, prefix.value(k));
                }
            });
            Ok((x, start))
        }
    }
}

/// Euler-Maruyama over nodes `k_start..k_end` with frozen `(y, z)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_frozen(
    p: &CoefficientSet,
    x: &mut PathEnsemble,
    w: &BrownianEnsemble,
    w_offset: usize,
    k_start: usize,
    k_end: usize,
    frozen_y: &[f64],
    frozen_z: &[f64],
) -> Result<()> {
    let (d, n) = (p.d, p.n);
    let nn = n * n;
    let paths = x.paths();
    let dt = x.grid().dt();
    let bad = x
        .slots_mut()
        .enumerate()
        .map(|(m, mut slot)| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * n];
            let mut next = vec![0.0; d];
            for k in k_start..k_end {
                let rel = k - k_start;
                let fy = &frozen_y[(rel * paths + m) * n..][..n];
                let fz = &frozen_z[(rel * paths + m) * nn..][..nn];
                {
                    let view = slot.view(k);
                    p.b_into(&view, fy, fz, &mut b);
                    p.sigma_into(&view, fy, fz, &mut s);
                }
                let dw = w.increment(m, k - w_offset);
                let xk = slot.value(k);
                for i in 0..d {
                    next[i] = xk[i]
                        + b[i] * dt
                        + (0..n).map(|j| s[i * n + j] * dw[j]).sum::<f64>();
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
    match bad {
        Some(node) => Err(Error::Divergence {
            node,
            detail: "non-finite forward state".into(),
        }),
        None => Ok(()),
    }
}

fn check_frozen(frozen: &[f64], expected: usize, what: &str) -> Result<()> {
    if frozen.len() != expected {
        return Err(Error::Parameter(format!(
            "frozen {what} has {} entries, expected {expected}",
            frozen.len()
        )));
    }
    Ok(())
}

/// One decoupled step: forward Euler with frozen `(y, z)` then a backward
/// regression sweep. Frozen arrays are node-major over the solve's nodes.
pub fn solve_decoupled_step(
    p: &CoefficientSet,
    init: &Initial,
    terminal: &TerminalFn,
    frozen_y: &[f64],
    frozen_z: &[f64],
    w: &BrownianEnsemble,
    fm: &FeatureMap,
) -> Result<SolutionTriple> {
    fm.validate()?;
    if w.dim() != p.n {
        return Err(Error::Parameter("Brownian dimension must equal n".into()));
    }
    let (mut x, start) = workspace(init, w, p.d)?;
    let end = x.grid().n_steps();
    let nodes = end - start + 1;
    check_frozen(frozen_y, nodes * w.paths() * p.n, "y")?;
    check_frozen(frozen_z, nodes * w.paths() * p.n * p.n, "z")?;
    simulate_frozen(p, &mut x, w, start, start, end, frozen_y, frozen_z)?;
    let term = |v: &PathView<'_>, out: &mut [f64]| -> Result<()> {
        terminal(v, out);
        Ok(())
    };
    let res = Sweep {
        p,
        x: &x,
        w,
        w_offset: start,
        k_start: start,
        k_end: end,
        terminal: &term,
        fm,
        transition: Transition::OnPath,
    }
    .run(frozen_y, frozen_z)?;
    SolutionTriple::new(x, start, p.n, res.y, res.z)
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub solution: SolutionTriple,
    pub residuals: Vec<f64>,
}

impl PicardOutcome {
    /// Number of map applications after the first.
    pub fn updates(&self) -> usize {
        self.residuals.len().saturating_sub(1)
    }
}

/// Picard iteration of the decoupled step, started at `(y, z) = (0, 0)`.
pub fn picard_iterate(
    p: &CoefficientSet,
    init: &Initial,
    terminal: &TerminalFn,
    w: &BrownianEnsemble,
    cfg: &PicardConfig,
) -> Result<PicardOutcome> {
    cfg.validate()?;
    if w.dim() != p.n {
        return Err(Error::Parameter("Brownian dimension must equal n".into()));
    }
    let (template, start) = workspace(init, w, p.d)?;
    let end = template.grid().n_steps();
    let nodes = end - start + 1;
    let dt = template.grid().dt();
    let term = |v: &PathView<'_>, out: &mut [f64]| -> Result<()> {
        terminal(v, out);
        Ok(())
    };
    let mut last_x = template.clone();
    let (res, residuals) = picard_loop(cfg, w.paths(), p.n, nodes, dt, |fy, fz| {
        let mut x = template.clone();
        simulate_frozen(p, &mut x, w, start, start, end, fy, fz)?;
        let out = Sweep {
            p,
            x: &x,
            w,
            w_offset: start,
            k_start: start,
            k_end: end,
            terminal: &term,
            fm: &cfg.features,
            transition: Transition::OnPath,
        }
        .run(fy, fz)?;
        last_x = x;
        Ok(out)
    })?;
    Ok(PicardOutcome {
        solution: SolutionTriple::new(last_x, start, p.n, res.y, res.z)?,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub epsilon: f64,
    pub t_len: f64,
    pub c_eps: f64,
    pub c_tilde_eps: f64,
    pub c_y: f64,
    pub c_z: f64,
    pub gamma: f64,
    pub certified: bool,
}

/// Closed-form contraction constants for an interval of length `t_len`.
pub fn contraction_gamma(eps: f64, t_len: f64, l: &LipschitzData) -> ContractionReport {
    let (k0, k1, sz) = (l.k0, l.k1, l.sigma_z_sup);
    let t = t_len;
    let c_eps = 2.0 * k0 * k0 * (1.0 + k0 / eps) * (1.0 + t) + k0 * (3.0 + t + 1.0 / eps);
    let c_tilde = k0 * (2.0 + 1.0 / eps);
    let e = (c_eps * t).exp();
    let c_y = (t + 1.0) * k1 * k1 * e * c_eps + k0 + t * (t + 1.0) * k0 * e * c_eps;
    let c_z = (t + 1.0) * k1 * k1 * e * (2.0 * k0 * eps + sz * sz)
        + k0 * (eps + t * (t + 1.0) * e * (3.0 * k0 * eps + sz * sz));
    let lead = c_tilde * t * (c_tilde * t).exp() + 1.0;
    let gamma = t * lead * c_y + lead * c_z;
    let gamma = if gamma.is_nan() { f64::INFINITY } else { gamma };
    ContractionReport {
        epsilon: eps,
        t_len,
        c_eps,
        c_tilde_eps: c_tilde,
        c_y,
        c_z,
        gamma,
        certified: gamma < 1.0,
    }
}

/// `count` log-spaced values in `[lo, hi]`.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default `ε` grid for the horizon search.
pub fn default_eps_grid() -> Vec<f64> {
    logspace(1e-4, 10.0, 41)
}

/// Largest certified interval length over the `ε` grid, or `None` when no
/// `ε` certifies even the shortest admissible interval.
pub fn find_local_horizon(
    l: &LipschitzData,
    eps_grid: &[f64],
) -> Option<(f64, ContractionReport)> {
    let ok = |eps: f64, t: f64| contraction_gamma(eps, t, l).gamma < CERTIFY_THRESHOLD;
    let mut best: Option<(f64, f64)> = None;
    for &eps in eps_grid {
        if !(eps > 0.0) || !ok(eps, MIN_HORIZON) {
            continue;
        }
        let delta = if ok(eps, MAX_HORIZON) {
            MAX_HORIZON
        } else {
            let mut lo = MIN_HORIZON;
            let mut hi = 2.0 * lo;
            while ok(eps, hi) {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if ok(eps, mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-12 * hi {
                    break;
                }
            }
            lo
        };
        if best.is_none_or(|(_, b)| delta > b) {
            best = Some((eps, delta));
        }
    }
    best.map(|(eps, delta)| (delta, contraction_gamma(eps, delta, l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::simulate_brownian;
    use crate::problems::builtin;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn problem(name: &str) -> CoefficientSet {
        builtin(name, &BTreeMap::new()).unwrap()
    }

    fn lip(k0: f64, k1: f64, sz: f64) -> LipschitzData {
        LipschitzData::new(k0, k1, sz).unwrap()
    }

    #[test]
    fn gamma_small_horizon_limit() {
        let r = contraction_gamma(0.1, 1e-9, &lip(1.0, 1.0, 0.0));
        assert!((r.gamma - 0.3).abs() < 1e-6, "{}", r.gamma);
    }

    #[test]
    fn gamma_increasing_in_length() {
        let l = lip(1.0, 1.5, 0.3);
        let mut last = contraction_gamma(0.2, 0.0, &l).gamma;
        for i in 1..200 {
            let t = i as f64 * 1e-3;
            let g = contraction_gamma(0.2, t, &l).gamma;
            assert!(g > last);
            let nudged = contraction_gamma(0.2, t + 1e-9, &l).gamma;
            assert!(nudged - g < 1e-5 * (1.0 + g), "jump at {t}");
            last = g;
        }
    }

    #[test]
    fn sharp_regime_never_certifies() {
        let l = lip(1.0, 1.0, 1.0);
        for eps in default_eps_grid() {
            for t in [1e-8, 1e-4, 0.1] {
                assert!(contraction_gamma(eps, t, &l).gamma >= 1.0);
            }
        }
        assert!(find_local_horizon(&l, &default_eps_grid()).is_none());
    }

    #[test]
    fn horizon_search_matches_bisection_oracle() {
        let l = lip(1.0, 1.0, 0.0);
        let (delta, report) = find_local_horizon(&l, &default_eps_grid()).unwrap();
        assert!(delta > 0.0 && report.gamma < CERTIFY_THRESHOLD);
        // Independent oracle: dense scan of the best ε on a fine T grid.
        let mut oracle = 0.0f64;
        for eps in default_eps_grid() {
            let mut t = 0.0;
            while contraction_gamma(eps, t + 1e-6, &l).gamma < CERTIFY_THRESHOLD {
                t += 1e-6;
            }
            oracle = oracle.max(t);
        }
        assert!((delta - oracle).abs() <= 1.01e-6, "{delta} vs {oracle}");
    }

    #[test]
    fn larger_constants_shrink_horizon() {
        let grid = default_eps_grid();
        let (a, _) = find_local_horizon(&lip(1.0, 1.0, 0.0), &grid).unwrap();
        let (b, _) = find_local_horizon(&lip(2.0, 1.0, 0.0), &grid).unwrap();
        assert!(b < a);
    }

    #[test]
    fn zero_constants_give_capped_horizon() {
        let (delta, r) = find_local_horizon(&lip(0.0, 1.0, 0.0), &default_eps_grid()).unwrap();
        assert_eq!(delta, MAX_HORIZON);
        assert_eq!(r.gamma, 0.0);
    }

    #[test]
    fn martingale_step_recovers_closed_form() {
        let p = problem("pure_martingale");
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let m = 10_000;
        let w = simulate_brownian(&grid, m, 1, 42).unwrap();
        let nodes = 101;
        let zeros = vec![0.0; nodes * m];
        let sol = solve_decoupled_step(
            &p,
            &Initial::Point(vec![1.0]),
            &p.g,
            &zeros,
            &zeros,
            &w,
            &FeatureMap::default(),
        )
        .unwrap();
        let (y0, se) = sol.y_stats(0);
        assert!((y0 - 1.0).abs() <= 3.0 / (m as f64).sqrt(), "{y0} ± {se}");
        for k in [0, 30, 60, 99] {
            let zbar = sol.z_node(k).iter().sum::<f64>() / m as f64;
            assert!((zbar - 1.0).abs() < 0.05, "node {k}: {zbar}");
        }
        // Terminal condition holds exactly.
        for mm in 0..m {
            assert_eq!(sol.y(mm, 100)[0], sol.x.value(mm, 100)[0]);
        }
    }

    #[test]
    fn trivial_constant_problem() {
        let mut p = problem("pure_martingale");
        p.sigma = Arc::new(|_, _, _, out| out.fill(0.0));
        p.g = Arc::new(|_, out| out.fill(0.7));
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let w = simulate_brownian(&grid, 200, 1, 1).unwrap();
        let out = picard_iterate(
            &p,
            &Initial::Point(vec![0.3]),
            &p.g.clone(),
            &w,
            &PicardConfig::default(),
        )
        .unwrap();
        let sol = out.solution;
        for k in 0..=10 {
            for m in 0..200 {
                assert_eq!(sol.x.value(m, k)[0], 0.3);
                assert!((sol.y(m, k)[0] - 0.7).abs() < 1e-6, "{}", sol.y(m, k)[0]);
                assert!(sol.z(m, k)[0].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoupled_linear_matches_exponential() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), 0.5);
        let p = builtin("decoupled_linear", &params).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let w = simulate_brownian(&grid, 10_000, 1, 3).unwrap();
        let out = picard_iterate(
            &p,
            &Initial::Point(vec![1.0]),
            &p.g,
            &w,
            &PicardConfig::default(),
        )
        .unwrap();
        let (y0, _) = out.solution.y_stats(0);
        assert!((y0 / 0.5f64.exp() - 1.0).abs() < 0.02, "{y0}");
    }

    #[test]
    fn martingale_picard_single_update() {
        let p = problem("pure_martingale");
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let w = simulate_brownian(&grid, 1000, 1, 5).unwrap();
        let out = picard_iterate(
            &p,
            &Initial::Point(vec![1.0]),
            &p.g,
            &w,
            &PicardConfig::default(),
        )
        .unwrap();
        assert_eq!(out.updates(), 1);
    }

    #[test]
    fn linear_y_drift_short_horizon() {
        let p = problem("linear_y_drift");
        let grid = TimeGrid::new(0.0, 0.25, 100).unwrap();
        let w = simulate_brownian(&grid, 200, 1, 9).unwrap();
        let cfg = PicardConfig::default();
        let out = picard_iterate(&p, &Initial::Point(vec![1.0]), &p.g, &w, &cfg).unwrap();
        let (y0, _) = out.solution.y_stats(0);
        assert!((y0 / (4.0 / 3.0) - 1.0).abs() < 0.02, "{y0}");
        // Residual ratios stay below the contraction factor plus slack.
        let r = &out.residuals;
        for k in 2..r.len() {
            if r[k - 1] > 1e-20 {
                assert!(r[k] / r[k - 1] <= 0.3 + 0.2, "ratio {}", r[k] / r[k - 1]);
            }
        }
        // Plugging the fixed point back in barely moves it.
        let sol = &out.solution;
        let nodes = 101;
        let m = 200;
        let mut fy = vec![0.0; nodes * m];
        for k in 0..nodes {
            fy[k * m..(k + 1) * m].copy_from_slice(sol.y_node(k));
        }
        let fz = vec![0.0; nodes * m];
        let again =
            solve_decoupled_step(&p, &Initial::Point(vec![1.0]), &p.g, &fy, &fz, &w, &cfg.features)
                .unwrap();
        let mut worst = 0.0f64;
        for k in 0..nodes {
            let d: f64 = (0..m)
                .map(|mm| (again.y(mm, k)[0] - sol.y(mm, k)[0]).powi(2))
                .sum::<f64>()
                / m as f64;
            worst = worst.max(d);
        }
        assert!(worst < 2.0 * cfg.tol, "{worst}");
    }

    #[test]
    fn zdrift_is_not_a_contraction() {
        let p = problem("zdrift_counterexample");
        let grid = TimeGrid::new(0.0, 0.25, 25).unwrap();
        let w = simulate_brownian(&grid, 2000, 1, 11).unwrap();
        let err = picard_iterate(
            &p,
            &Initial::Point(vec![0.0]),
            &p.g,
            &w,
            &PicardConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonContraction { .. }), "{err}");
    }

    #[test]
    fn path_initial_condition() {
        let p = problem("pure_martingale");
        let pre_grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let prefix = PathSample::from_fn(pre_grid, 1, |t| vec![2.0 * t]).unwrap();
        let grid = TimeGrid::new(0.5, 1.0, 10).unwrap();
        let w = simulate_brownian(&grid, 500, 1, 2).unwrap();
        let out = picard_iterate(
            &p,
            &Initial::Path(prefix),
            &p.g,
            &w,
            &PicardConfig::default(),
        )
        .unwrap();
        assert_eq!(out.solution.start, 10);
        let (y, _) = out.solution.y_stats(10);
        assert!((y - 1.0).abs() < 0.03, "{y}");
        let bad_grid = TimeGrid::new(0.6, 1.0, 8).unwrap();
        let w2 = simulate_brownian(&bad_grid, 500, 1, 2).unwrap();
        let prefix = PathSample::constant(pre_grid, &[0.0]).unwrap();
        assert!(picard_iterate(&p, &Initial::Path(prefix), &p.g, &w2, &PicardConfig::default()).is_err());
    }
}
