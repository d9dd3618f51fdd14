//! Per-node least-squares representation of the decoupling field
//! `Y_t = u(t, X_{·∧t})`.
//!
//! Each node carries a linear model on a fixed set of path features. The
//! Gram matrix of a node is factored once and reused for every right-hand
//! side fitted at that node.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{PathEnsemble, PathSample, PathView, TimeGrid};
use crate::problems::TerminalFn;

/// Minimum number of samples per feature.
pub const SAMPLES_PER_FEATURE: usize = 5;

/// Relative ridge damping added to the Gram matrix.
pub const RIDGE: f64 = 1e-8;

/// Rows per chunk in parallel reductions. Chunk sums are added in order so
/// results do not depend on thread scheduling.
const CHUNK: usize = 512;

/// Path features at a node: constant, `X_t`, degree-2 monomials of `X_t`,
/// `∫X ds`, `∫|X|² ds` and lagged values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub lags: usize,
    pub degree: usize,
}

impl Default for FeatureMap {
    fn default() -> Self {
        Self { lags: 3, degree: 2 }
    }
}

impl FeatureMap {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.degree) {
            return Err(Error::Parameter(format!(
                "feature degree must be 1 or 2, got {}",
                self.degree
            )));
        }
        Ok(())
    }

    pub fn count(&self, d: usize) -> usize {
        let quad = if self.degree >= 2 { d * (d + 1) / 2 } else { 0 };
        1 + d + quad + d + 1 + self.lags * d
    }

    pub fn names(&self, d: usize) -> Vec<String> {
        let mut names = vec!["const".to_string()];
        names.extend((0..d).map(|i| format!("x{i}")));
        if self.degree >= 2 {
            for i in 0..d {
                for j in i..d {
                    names.push(format!("x{i}*x{j}"));
                }
            }
        }
        names.extend((0..d).map(|i| format!("int_x{i}")));
        names.push("int_sq".to_string());
        for lag in 1..=self.lags {
            names.extend((0..d).map(|i| format!("lag{lag}_x{i}")));
        }
        names
    }

    /// Writes the features of `x` at its current node into `out`.
    pub fn features(&self, x: &PathView<'_>, out: &mut [f64]) {
        let d = x.dim();
        let cur = x.current();
        out[0] = 1.0;
        let mut pos = 1;
        out[pos..pos + d].copy_from_slice(cur);
        pos += d;
        if self.degree >= 2 {
            for i in 0..d {
                for j in i..d {
                    out[pos] = cur[i] * cur[j];
                    pos += 1;
                }
            }
        }
        x.integral_into(&mut out[pos..pos + d]);
        pos += d;
        out[pos] = x.sq_integral();
        pos += 1;
        for lag in 1..=self.lags {
            out[pos..pos + d].copy_from_slice(x.lagged(lag));
            pos += d;
        }
    }
}

/// Linear model `features → ℝ^q` at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    /// Row-major `features × outputs`.
    pub coefficients: Vec<f64>,
    pub outputs: usize,
    /// In-sample root-mean-square residual (Euclidean over outputs).
    pub residual: f64,
}

impl NodeModel {
    pub fn zeros(features: usize, outputs: usize) -> Self {
        Self {
            coefficients: vec![0.0; features * outputs],
            outputs,
            residual: 0.0,
        }
    }

    pub fn features(&self) -> usize {
        self.coefficients.len() / self.outputs
    }

    pub fn predict(&self, phi: &[f64], out: &mut [f64]) {
        let q = self.outputs;
        out[..q].iter_mut().for_each(|o| *o = 0.0);
        for (f, &v) in phi.iter().enumerate() {
            if v != 0.0 {
                let row = &self.coefficients[f * q..(f + 1) * q];
                for (o, c) in out.iter_mut().zip(row) {
                    *o += v * c;
                }
            }
        }
    }
}

/// Factored least-squares design for one node.
pub struct Design {
    node: usize,
    rows: usize,
    cols: usize,
    phi: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Design {
    /// Factors `ΦᵀΦ/M + λI` for the row-major `rows × cols` design `phi`.
    pub fn new(node: usize, phi: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        let required = SAMPLES_PER_FEATURE * cols;
        if rows < required {
            return Err(Error::UnderdeterminedFit {
                features: cols,
                required,
                samples: rows,
            });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                node,
                detail: "non-finite path features".into(),
            });
        }
        let partials: Vec<Vec<f64>> = phi
            .par_chunks(CHUNK * cols)
            .map(|block| {
                let mut g = vec![0.0; cols * cols];
                for row in block.chunks(cols) {
                    for i in 0..cols {
                        let ri = row[i];
                        if ri == 0.0 {
                            continue;
                        }
                        for j in i..cols {
                            g[i * cols + j] += ri * row[j];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(cols, cols);
        for g in &partials {
            for i in 0..cols {
                for j in i..cols {
                    gram[(i, j)] += g[i * cols + j];
                }
            }
        }
        let scale = 1.0 / rows as f64;
        for i in 0..cols {
            for j in i..cols {
                let v = gram[(i, j)] * scale;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let trace: f64 = (0..cols).map(|i| gram[(i, i)]).sum();
        let lambda = RIDGE * (trace / cols as f64).max(1.0);
        for i in 0..cols {
            gram[(i, i)] += lambda;
        }
        let chol = match gram.clone().cholesky() {
            Some(c) => c,
            None => {
                let eig = gram.symmetric_eigenvalues();
                let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
                return Err(Error::Regression {
                    node,
                    condition: if min > 0.0 { max / min } else { f64::INFINITY },
                });
            }
        };
        Ok(Self {
            node,
            rows,
            cols,
            phi,
            chol,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.phi[m * self.cols..(m + 1) * self.cols]
    }

    /// Fits `q` outputs to the row-major `rows × q` targets.
    pub fn fit(&self, targets: &[f64], q: usize) -> Result<NodeModel> {
        let cols = self.cols;
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                node: self.node,
                detail: "non-finite regression targets".into(),
            });
        }
        let partials: Vec<Vec<f64>> = self
            .phi
            .par_chunks(CHUNK * cols)
            .zip(targets.par_chunks(CHUNK * q))
            .map(|(block, tblock)| {
                let mut acc = vec![0.0; cols * q];
                for (row, t) in block.chunks(cols).zip(tblock.chunks(q)) {
                    for i in 0..cols {
                        let ri = row[i];
                        if ri == 0.0 {
                            continue;
                        }
                        for j in 0..q {
                            acc[i * q + j] += ri * t[j];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DMatrix::<f64>::zeros(cols, q);
        for acc in &partials {
            for i in 0..cols {
                for j in 0..q {
                    rhs[(i, j)] += acc[i * q + j];
                }
            }
        }
        rhs /= self.rows as f64;
        let sol = self.chol.solve(&rhs);
        let mut coefficients = vec![0.0; cols * q];
        for i in 0..cols {
            for j in 0..q {
                coefficients[i * q + j] = sol[(i, j)];
            }
        }
        let mut model = NodeModel {
            coefficients,
            outputs: q,
            residual: 0.0,
        };
        let sq: Vec<f64> = (0..self.rows)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|ms| {
                let mut pred = vec![0.0; q];
                let mut s = 0.0;
                for &m in ms {
                    model.predict(self.row(m), &mut pred);
                    s += pred
                        .iter()
                        .zip(&targets[m * q..(m + 1) * q])
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum::<f64>();
                }
                s
            })
            .collect();
        model.residual = (sq.iter().sum::<f64>() / self.rows as f64).sqrt();
        Ok(model)
    }

    /// Predictions of `model` on every row, row-major `rows × q`.
    pub fn predict_all(&self, model: &NodeModel) -> Vec<f64> {
        let q = model.outputs;
        let mut out = vec![0.0; self.rows * q];
        out.par_chunks_mut(q)
            .enumerate()
            .for_each(|(m, o)| model.predict(self.row(m), o));
        out
    }
}

/// Feature matrix of every path of `x` at node `k`.
pub fn design_matrix(x: &PathEnsemble, k: usize, fm: &FeatureMap) -> Vec<f64> {
    let p = fm.count(x.dim());
    let mut phi = vec![0.0; x.paths() * p];
    phi.par_chunks_mut(p)
        .enumerate()
        .for_each(|(m, row)| fm.features(&x.view(m, k), row));
    phi
}

/// Fits a node model of `targets` (row-major `M × q`) on the paths of `x` up
/// to node `k`.
pub fn fit_field_node(
    k: usize,
    x: &PathEnsemble,
    targets: &[f64],
    q: usize,
    fm: &FeatureMap,
) -> Result<NodeModel> {
    fm.validate()?;
    if k > x.grid().n_steps() {
        return Err(Error::Node {
            node: k,
            last: x.grid().n_steps(),
        });
    }
    if targets.len() != x.paths() * q {
        return Err(Error::Parameter(format!(
            "expected {} targets, got {}",
            x.paths() * q,
            targets.len()
        )));
    }
    let p = fm.count(x.dim());
    Design::new(k, design_matrix(x, k, fm), x.paths(), p)?.fit(targets, q)
}

/// Per-node models of `Y` and `Z`; the final node evaluates `g` directly.
#[derive(Clone)]
pub struct DecouplingField {
    grid: TimeGrid,
    d: usize,
    n: usize,
    fm: FeatureMap,
    y_models: Vec<Option<NodeModel>>,
    z_models: Vec<Option<NodeModel>>,
    g: TerminalFn,
}

impl std::fmt::Debug for DecouplingField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DecouplingField")
            .field("grid", &self.grid)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("fitted", &self.y_models.iter().filter(|m| m.is_some()).count())
            .finish_non_exhaustive()
    }
}

impl DecouplingField {
    pub fn new(grid: TimeGrid, d: usize, n: usize, fm: FeatureMap, g: TerminalFn) -> Self {
        Self {
            grid,
            d,
            n,
            fm,
            y_models: vec![None; grid.n_steps()],
            z_models: vec![None; grid.n_steps()],
            g,
        }
    }

    /// Field whose every interior node predicts zero.
    pub fn zeros(grid: TimeGrid, d: usize, n: usize, fm: FeatureMap, g: TerminalFn) -> Self {
        let p = fm.count(d);
        let mut u = Self::new(grid, d, n, fm, g);
        for k in 0..grid.n_steps() {
            u.set_node(k, NodeModel::zeros(p, n), NodeModel::zeros(p, n * n));
        }
        u
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.fm
    }

    pub fn terminal(&self) -> &TerminalFn {
        &self.g
    }

    pub fn set_node(&mut self, k: usize, y: NodeModel, z: NodeModel) {
        self.y_models[k] = Some(y);
        self.z_models[k] = Some(z);
    }

    pub fn is_fitted(&self, k: usize) -> bool {
        k == self.grid.n_steps() || self.y_models.get(k).is_some_and(|m| m.is_some())
    }

    pub fn y_model(&self, k: usize) -> Option<&NodeModel> {
        self.y_models.get(k).and_then(|m| m.as_ref())
    }

    pub fn z_model(&self, k: usize) -> Option<&NodeModel> {
        self.z_models.get(k).and_then(|m| m.as_ref())
    }

    fn model<'a>(&self, models: &'a [Option<NodeModel>], k: usize) -> Result<&'a NodeModel> {
        models.get(k).and_then(|m| m.as_ref()).ok_or(Error::Node {
            node: k,
            last: self.grid.n_steps(),
        })
    }

    /// `u(t_k, x)` for a view whose current node is `k`.
    pub fn eval(&self, x: &PathView<'_>, out: &mut [f64]) -> Result<()> {
        let k = x.node();
        if k == self.grid.n_steps() {
            (self.g)(x, out);
            return Ok(());
        }
        let model = self.model(&self.y_models, k)?;
        let mut phi = vec![0.0; self.fm.count(self.d)];
        self.fm.features(x, &mut phi);
        model.predict(&phi, out);
        Ok(())
    }

    /// The `Z` model at node `k` (zero at the final node).
    pub fn eval_z(&self, x: &PathView<'_>, out: &mut [f64]) -> Result<()> {
        let k = x.node();
        if k == self.grid.n_steps() {
            out[..self.n * self.n].iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        }
        let model = self.model(&self.z_models, k)?;
        let mut phi = vec![0.0; self.fm.count(self.d)];
        self.fm.features(x, &mut phi);
        model.predict(&phi, out);
        Ok(())
    }

    /// In-sample residuals of the fitted `Y` models, by node.
    pub fn residuals(&self) -> Vec<Option<f64>> {
        self.y_models
            .iter()
            .map(|m| m.as_ref().map(|m| m.residual))
            .collect()
    }

    /// Coefficient table: `t, target, feature, coefficient`.
    pub fn export_csv<W: Write>(&self, writer: W) -> Result<()> {
        let names = self.fm.names(self.d);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "target", "feature", "coefficient"])?;
        for k in 0..self.grid.n_steps() {
            let t = format!("{:.12e}", self.grid.time(k));
            let blocks = [("y", &self.y_models[k]), ("z", &self.z_models[k])];
            for (tag, model) in blocks {
                let Some(model) = model else { continue };
                for (f, name) in names.iter().enumerate() {
                    for j in 0..model.outputs {
                        let c = model.coefficients[f * model.outputs + j];
                        w.write_record([
                            t.as_str(),
                            &format!("{tag}{j}"),
                            name,
                            &format!("{c:.12e}"),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `u(t_k, x)` for a path sample on the field's grid.
pub fn eval_field(u: &DecouplingField, k: usize, x: &PathSample) -> Result<Vec<f64>> {
    let last = u.grid().n_steps();
    if k > last || k > x.grid().n_steps() {
        return Err(Error::Node { node: k, last });
    }
    let mut out = vec![0.0; u.n];
    u.eval(&x.view(k), &mut out)?;
    Ok(out)
}

/// Largest observed `|u(t,x) − u(t,x+δ)| / ‖δ‖_{2,t}` over random probes.
///
/// Half of the directions are single-node spikes (the first one at node `k`
/// itself), the rest are Gaussian paths; all are scaled to `‖δ‖_{2,t} =
/// bump`. The result is a lower bound for the Lipschitz constant of `u(t,·)`.
pub fn empirical_lipschitz(
    u: &DecouplingField,
    k: usize,
    probes: usize,
    bump: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 || !(bump > 0.0) {
        return Err(Error::Parameter("need probes >= 1 and bump > 0".into()));
    }
    let grid = *u.grid();
    if k > grid.n_steps() {
        return Err(Error::Node {
            node: k,
            last: grid.n_steps(),
        });
    }
    let d = u.d;
    let len = (k + 1) * d;
    let dt = grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let (mut ua, mut ub) = (vec![0.0; u.n], vec![0.0; u.n]);
    let mut best = 0.0f64;
    for i in 0..probes {
        let mut base = Vec::with_capacity(len);
        let mut level: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        for _ in 0..=k {
            base.extend_from_slice(&level);
            for v in level.iter_mut() {
                *v += dt.sqrt() * normal(&mut rng);
            }
        }
        let mut delta = vec![0.0; len];
        if i % 2 == 0 {
            let j = if i == 0 { k } else { rng.random_range(0..=k) };
            for c in 0..d {
                delta[j * d + c] = normal(&mut rng);
            }
        } else {
            for v in delta.iter_mut() {
                *v = normal(&mut rng);
            }
        }
        let norm = PathView::new(d, grid.t0(), dt, &delta).norm_sq().sqrt();
        if norm == 0.0 {
            continue;
        }
        let bumped: Vec<f64> = base
            .iter()
            .zip(&delta)
            .map(|(b, e)| b + e * bump / norm)
            .collect();
        u.eval(&PathView::new(d, grid.t0(), dt, &base), &mut ua)?;
        u.eval(&PathView::new(d, grid.t0(), dt, &bumped), &mut ub)?;
        let diff = ua
            .iter()
            .zip(&ub)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        best = best.max(diff / bump);
    }
    Ok(best)
}

/// Terminal functional `g(x) = x_T` (first `n` coordinates).
pub fn terminal_identity() -> TerminalFn {
    Arc::new(|x: &PathView<'_>, out: &mut [f64]| {
        let n = out.len();
        out.copy_from_slice(&x.current()[..n]);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::simulate_brownian;

    fn brownian_paths(grid: TimeGrid, m: usize, seed: u64) -> PathEnsemble {
        let w = simulate_brownian(&grid, m, 1, seed).unwrap();
        let mut x = PathEnsemble::zeros(grid, 1, m);
        x.slots_mut().enumerate().for_each(|(p, mut slot)| {
            let mut v = 1.0 + 0.5 * (p as f64 / m as f64 - 0.5);
            slot.set(0, &[v]);
            for k in 0..grid.n_steps() {
                v += w.increment(p, k)[0];
                slot.set(k + 1, &[v]);
            }
        });
        x
    }

    #[test]
    fn feature_layout() {
        let fm = FeatureMap::default();
        assert_eq!(fm.count(1), 8);
        assert_eq!(fm.names(1).len(), 8);
        assert_eq!(fm.count(2), fm.names(2).len());
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let x = PathSample::from_fn(grid, 1, |t| vec![1.0 + t]).unwrap();
        let mut phi = vec![0.0; 8];
        fm.features(&x.view(1), &mut phi);
        assert_eq!(phi[0], 1.0);
        assert_eq!(phi[1], 1.25);
        assert!((phi[2] - 1.5625).abs() < 1e-15);
        assert!((phi[3] - 0.25).abs() < 1e-15);
        assert!((phi[4] - 0.25).abs() < 1e-15);
        assert_eq!(&phi[5..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_targets() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x = brownian_paths(grid, 400, 1);
        let targets = vec![2.5; 400];
        let model = fit_field_node(5, &x, &targets, 1, &FeatureMap::default()).unwrap();
        assert!(model.residual < 1e-6);
        let mut out = [0.0];
        let mut phi = vec![0.0; 8];
        FeatureMap::default().features(&x.view(7, 5), &mut phi);
        model.predict(&phi, &mut out);
        assert!((out[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn recovers_current_value() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let x = brownian_paths(grid, 2000, 2);
        let k = 12;
        let targets: Vec<f64> = (0..2000).map(|m| x.value(m, k)[0]).collect();
        let model = fit_field_node(k, &x, &targets, 1, &FeatureMap::default()).unwrap();
        // x_t is a feature, so least squares reproduces it up to ridge damping.
        assert!((model.coefficients[1] - 1.0).abs() < 1e-6, "{:?}", model.coefficients);
        for (f, c) in model.coefficients.iter().enumerate() {
            if f != 1 {
                assert!(c.abs() < 1e-6, "feature {f}: {c}");
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let x = brownian_paths(grid, 39, 3);
        let err = fit_field_node(2, &x, &vec![0.0; 39], 1, &FeatureMap::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::UnderdeterminedFit {
                required: 40,
                samples: 39,
                ..
            }
        ));
    }

    #[test]
    fn terminal_bypass_and_zero_field() {
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let u = DecouplingField::zeros(grid, 1, 1, FeatureMap::default(), terminal_identity());
        let x = PathSample::from_fn(grid, 1, |t| vec![3.0 * t - 1.0]).unwrap();
        assert_eq!(eval_field(&u, 5, &x).unwrap(), vec![2.0]);
        assert_eq!(eval_field(&u, 2, &x).unwrap(), vec![0.0]);
        assert!(matches!(eval_field(&u, 6, &x), Err(Error::Node { .. })));
        assert_eq!(empirical_lipschitz(&u, 3, 20, 0.1, 1).unwrap(), 0.0);
        let unfitted = DecouplingField::new(grid, 1, 1, FeatureMap::default(), terminal_identity());
        assert!(matches!(eval_field(&unfitted, 1, &x), Err(Error::Node { .. })));
    }

    fn identity_field(grid: TimeGrid) -> DecouplingField {
        let fm = FeatureMap::default();
        let mut u = DecouplingField::zeros(grid, 1, 1, fm, terminal_identity());
        for k in 0..grid.n_steps() {
            let mut y = NodeModel::zeros(8, 1);
            y.coefficients[1] = 1.0;
            u.set_node(k, y, NodeModel::zeros(8, 1));
        }
        u
    }

    #[test]
    fn identity_lipschitz_at_most_one() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let u = identity_field(grid);
        for k in [0, 4, 9] {
            let l = empirical_lipschitz(&u, k, 50, 0.05, 7).unwrap();
            assert!(l <= 1.0 + 1e-12 && l > 0.99, "{l}");
        }
    }

    #[test]
    fn evaluation_is_adapted() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let x = brownian_paths(grid, 500, 4);
        let targets: Vec<f64> = (0..500).map(|m| x.value(m, 6)[0].powi(2)).collect();
        let mut u = DecouplingField::new(grid, 1, 1, FeatureMap::default(), terminal_identity());
        let model = fit_field_node(4, &x, &targets, 1, &FeatureMap::default()).unwrap();
        u.set_node(4, model, NodeModel::zeros(8, 1));
        let a = x.sample(3);
        let mut values = a.values().to_vec();
        for v in &mut values[5..] {
            *v += 10.0;
        }
        let b = PathSample::new(grid, 1, values).unwrap();
        assert_eq!(eval_field(&u, 4, &a).unwrap(), eval_field(&u, 4, &b).unwrap());
    }

    #[test]
    fn refit_on_disjoint_ensemble_is_stable() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let fm = FeatureMap::default();
        let k = 5;
        let fit = |seed| {
            let x = brownian_paths(grid, 4000, seed);
            let w = simulate_brownian(&grid, 4000, 1, seed + 100).unwrap();
            // Noisy targets x_{k+1}: the regression estimates E[x_{k+1} | F_k] = x_k.
            let targets: Vec<f64> = (0..4000)
                .map(|m| x.value(m, k)[0] + w.increment(m, k)[0])
                .collect();
            fit_field_node(k, &x, &targets, 1, &fm).unwrap()
        };
        let (a, b) = (fit(10), fit(20));
        let pooled = (a.residual + b.residual) / 2.0;
        let probes = brownian_paths(grid, 100, 30);
        let mut phi = vec![0.0; 8];
        let (mut ya, mut yb) = ([0.0], [0.0]);
        for m in 0..100 {
            fm.features(&probes.view(m, k), &mut phi);
            a.predict(&phi, &mut ya);
            b.predict(&phi, &mut yb);
            assert!((ya[0] - yb[0]).abs() <= 3.0 * pooled);
        }
    }

    #[test]
    fn csv_export_has_all_rows() {
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let u = identity_field(grid);
        let mut buf = Vec::new();
        u.export_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2 * 8);
        assert!(text.starts_with("t,target,feature,coefficient"));
    }
}
