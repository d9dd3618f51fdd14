//! Time grids, discretized paths and the Brownian driving noise.
//!
//! Paths live on uniform grids and are stored densely, node-major with the
//! spatial coordinates contiguous. The path-space norm is
//! `‖x‖²_{2,t} = ∫₀ᵗ |x(s)|² ds + |x(t)|²` with the integral taken as a
//! left Riemann sum, so it only ever reads nodes strictly before `t` plus
//! the endpoint itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when snapping a time onto its left-nearest node.
const NODE_SNAP: f64 = 1e-9;

const JUNCTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t0 >= t1 {
            return Err(Error::Parameter(format!(
                "time grid needs finite t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Parameter("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn node_count(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.node_count()).map(|k| self.time(k)).collect()
    }

    /// Left-nearest node of `t`; times within a small slack of a node snap onto it.
    pub fn node_at_or_before(&self, t: f64) -> Result<usize> {
        let span = self.t1 - self.t0;
        if !t.is_finite() || t < self.t0 - NODE_SNAP * span || t > self.t1 + NODE_SNAP * span {
            return Err(Error::Domain {
                t,
                t0: self.t0,
                t1: self.t1,
            });
        }
        let pos = (t - self.t0) / self.dt();
        let k = (pos + NODE_SNAP).floor().max(0.0) as usize;
        Ok(k.min(self.n_steps))
    }

    /// Nearest node of `t`, clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        let pos = ((t - self.t0) / self.dt()).round();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.n_steps)
        }
    }

    /// The coarser grid obtained by keeping every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::Parameter(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps
            )));
        }
        Self::new(self.t0, self.t1, self.n_steps / factor)
    }
}

/// A read-only view of one path up to (and including) a node.
///
/// Coefficients receive their path argument as a `PathView`, so by
/// construction they can never look past the current node. The current
/// node is held separately from the earlier ones, which lets a caller
/// append a tentative next value without copying the prefix.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    dim: usize,
    t0: f64,
    dt: f64,
    prefix: &'a [f64],
    current: &'a [f64],
    integral: Option<&'a [f64]>,
    sq_integral: Option<f64>,
}

impl<'a> PathView<'a> {
    /// View over raw node values `x_0, …, x_k` (row-major, `dim` per node).
    pub fn new(dim: usize, t0: f64, dt: f64, values: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && !values.is_empty() && values.len().is_multiple_of(dim));
        let split = values.len() - dim;
        Self::split(dim, t0, dt, &values[..split], &values[split..])
    }

    /// View whose earlier nodes are `prefix` and whose current node is `current`.
    pub fn split(dim: usize, t0: f64, dt: f64, prefix: &'a [f64], current: &'a [f64]) -> Self {
        debug_assert!(current.len() == dim && prefix.len().is_multiple_of(dim));
        Self {
            dim,
            t0,
            dt,
            prefix,
            current,
            integral: None,
            sq_integral: None,
        }
    }

    /// Attaches precomputed running integrals for the current node.
    pub fn with_cache(mut self, integral: &'a [f64], sq_integral: f64) -> Self {
        self.integral = Some(integral);
        self.sq_integral = Some(sq_integral);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index of the current (last visible) node.
    pub fn node(&self) -> usize {
        self.prefix.len() / self.dim
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.node() as f64 * self.dt
    }

    pub fn current(&self) -> &'a [f64] {
        self.current
    }

    pub fn at(&self, j: usize) -> &'a [f64] {
        if j == self.node() {
            self.current
        } else {
            &self.prefix[j * self.dim..(j + 1) * self.dim]
        }
    }

    /// Value `lag` nodes back, clamped at the first node.
    pub fn lagged(&self, lag: usize) -> &'a [f64] {
        self.at(self.node().saturating_sub(lag))
    }

    /// Left Riemann sum of `∫ x ds` up to the current node, written to `out`.
    pub fn integral_into(&self, out: &mut [f64]) {
        if let Some(cached) = self.integral {
            out.copy_from_slice(cached);
            return;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for node in self.prefix.chunks(self.dim) {
            for (o, v) in out.iter_mut().zip(node) {
                *o += v * self.dt;
            }
        }
    }

    /// Left Riemann sum of `∫ |x|² ds` up to the current node.
    pub fn sq_integral(&self) -> f64 {
        if let Some(cached) = self.sq_integral {
            return cached;
        }
        self.prefix
            .chunks(self.dim)
            .map(|node| node.iter().map(|v| v * v).sum::<f64>() * self.dt)
            .sum()
    }

    /// `‖x‖²_{2,t}` at the current node.
    pub fn norm_sq(&self) -> f64 {
        self.sq_integral() + self.current.iter().map(|v| v * v).sum::<f64>()
    }

    /// The same path seen only up to node `k <= node()`.
    pub fn truncate(&self, k: usize) -> PathView<'a> {
        if k == self.node() {
            return *self;
        }
        PathView::split(
            self.dim,
            self.t0,
            self.dt,
            &self.prefix[..k * self.dim],
            self.at(k),
        )
    }

    /// Earlier nodes `x_0, …, x_{k-1}`, flattened.
    pub fn prefix(&self) -> &'a [f64] {
        self.prefix
    }
}

/// A discretized continuous path `x ∈ C([t0, t1], ℝ^d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl PathSample {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("path dimension must be positive".into()));
        }
        if values.len() != grid.node_count() * dim {
            return Err(Error::Parameter(format!(
                "path needs {} values ({} nodes x {dim}), got {}",
                grid.node_count() * dim,
                grid.node_count(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "path value at flat index {bad} is not finite"
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: TimeGrid, point: &[f64]) -> Result<Self> {
        let values = point
            .iter()
            .copied()
            .cycle()
            .take(point.len() * grid.node_count())
            .collect();
        Self::new(grid, point.len(), values)
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.node_count() * dim);
        for k in 0..grid.node_count() {
            let v = f(grid.time(k));
            if v.len() != dim {
                return Err(Error::Parameter(format!(
                    "path generator returned {} coordinates, expected {dim}",
                    v.len()
                )));
            }
            values.extend(v);
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn view(&self, k: usize) -> PathView<'_> {
        PathView::new(
            self.dim,
            self.grid.t0(),
            self.grid.dt(),
            &self.values[..(k + 1) * self.dim],
        )
    }

    pub fn full_view(&self) -> PathView<'_> {
        self.view(self.grid.n_steps())
    }

    /// Pointwise `self + scale * other` on the same grid.
    pub fn axpy(&self, scale: f64, other: &PathSample) -> Result<PathSample> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::Parameter("paths live on different grids".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        PathSample::new(self.grid, self.dim, values)
    }

    pub fn scale(&self, factor: f64) -> Result<PathSample> {
        PathSample::new(
            self.grid,
            self.dim,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// `‖x‖_{2,t}`, evaluated at the left-nearest node of `t`.
pub fn path_norm_2t(x: &PathSample, t: f64) -> Result<f64> {
    let k = x.grid().node_at_or_before(t)?;
    Ok(x.view(k).norm_sq().sqrt())
}

/// Joins `head` and `tail` at their common node.
pub fn concat_paths(head: &PathSample, tail: &PathSample) -> Result<PathSample> {
    if head.dim != tail.dim {
        return Err(Error::Junction(format!(
            "dimension {} vs {}",
            head.dim, tail.dim
        )));
    }
    let (hg, tg) = (head.grid(), tail.grid());
    let scale = 1.0 + hg.t1().abs().max(tg.t0().abs());
    if (hg.t1() - tg.t0()).abs() > JUNCTION_TOL * scale {
        return Err(Error::Junction(format!(
            "head ends at t = {} but tail starts at t = {}",
            hg.t1(),
            tg.t0()
        )));
    }
    if (hg.dt() - tg.dt()).abs() > 1e-12 * hg.dt() {
        return Err(Error::Junction(format!(
            "step sizes differ ({} vs {})",
            hg.dt(),
            tg.dt()
        )));
    }
    let last = head.value(hg.n_steps());
    let first = tail.value(0);
    if let Some((a, b)) = last
        .iter()
        .zip(first)
        .find(|(a, b)| (*a - *b).abs() > JUNCTION_TOL)
    {
        return Err(Error::Junction(format!(
            "head ends at {a} but tail starts at {b}"
        )));
    }
    let grid = TimeGrid::new(hg.t0(), tg.t1(), hg.n_steps() + tg.n_steps())?;
    let mut values = head.values.clone();
    values.extend_from_slice(&tail.values[tail.dim..]);
    PathSample::new(grid, head.dim, values)
}

/// An ensemble of `M` paths sharing a grid, with cached running integrals.
///
/// Nodes must be written in increasing order for each path; the running
/// integrals at node `k` are derived from node `k - 1`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    values: Vec<f64>,
    integral: Vec<f64>,
    sq_integral: Vec<f64>,
}

impl PathEnsemble {
    pub fn zeros(grid: TimeGrid, dim: usize, paths: usize) -> Self {
        let nodes = grid.node_count();
        Self {
            grid,
            dim,
            paths,
            values: vec![0.0; paths * nodes * dim],
            integral: vec![0.0; paths * nodes * dim],
            sq_integral: vec![0.0; paths * nodes],
        }
    }

    /// Every path starts from `x0` at node 0.
    pub fn starting_at(grid: TimeGrid, x0: &[f64], paths: usize) -> Self {
        let mut ens = Self::zeros(grid, x0.len(), paths);
        ens.slots_mut().for_each(|mut slot| slot.set(0, x0));
        ens
    }

    /// Path `m` starts from `starts[m*d..(m+1)*d]`.
    pub fn starting_at_each(grid: TimeGrid, dim: usize, starts: &[f64]) -> Result<Self> {
        if dim == 0 || !starts.len().is_multiple_of(dim) {
            return Err(Error::Parameter("start points do not match dimension".into()));
        }
        let mut ens = Self::zeros(grid, dim, starts.len() / dim);
        ens.slots_mut()
            .zip(starts.par_chunks(dim))
            .for_each(|(mut slot, x)| slot.set(0, x));
        Ok(ens)
    }

    /// Replicates a single path sample `paths` times.
    pub fn replicate(sample: &PathSample, paths: usize) -> Self {
        let mut ens = Self::zeros(*sample.grid(), sample.dim(), paths);
        ens.slots_mut().for_each(|mut slot| {
            for k in 0..sample.grid().node_count() {
                slot.set(k, sample.value(k));
            }
        });
        ens
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    fn stride(&self) -> usize {
        self.grid.node_count() * self.dim
    }

    pub fn value(&self, m: usize, k: usize) -> &[f64] {
        let base = m * self.stride() + k * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn view(&self, m: usize, k: usize) -> PathView<'_> {
        let base = m * self.stride();
        let nodes = self.grid.node_count();
        PathView::new(
            self.dim,
            self.grid.t0(),
            self.grid.dt(),
            &self.values[base..base + (k + 1) * self.dim],
        )
        .with_cache(
            &self.integral[base + k * self.dim..base + (k + 1) * self.dim],
            self.sq_integral[m * nodes + k],
        )
    }

    /// Path `m` up to node `k`, followed by `next` as node `k + 1`.
    ///
    /// `integral_buf` (length `dim`) receives the running integral at the
    /// appended node.
    pub fn extended_view<'b>(
        &'b self,
        m: usize,
        k: usize,
        next: &'b [f64],
        integral_buf: &'b mut [f64],
    ) -> PathView<'b> {
        let base = m * self.stride();
        let nodes = self.grid.node_count();
        let d = self.dim;
        let xk = &self.values[base + k * d..base + (k + 1) * d];
        let ik = &self.integral[base + k * d..base + (k + 1) * d];
        let mut sq = 0.0;
        for i in 0..d {
            integral_buf[i] = ik[i] + xk[i] * self.grid.dt();
            sq += xk[i] * xk[i];
        }
        let sq = self.sq_integral[m * nodes + k] + sq * self.grid.dt();
        PathView::split(
            d,
            self.grid.t0(),
            self.grid.dt(),
            &self.values[base..base + (k + 1) * d],
            next,
        )
        .with_cache(integral_buf, sq)
    }

    /// Extracts path `m` as a standalone sample (all nodes).
    pub fn sample(&self, m: usize) -> PathSample {
        let base = m * self.stride();
        PathSample {
            grid: self.grid,
            dim: self.dim,
            values: self.values[base..base + self.stride()].to_vec(),
        }
    }

    pub fn slot_mut(&mut self, m: usize) -> PathSlot<'_> {
        let stride = self.stride();
        let nodes = self.grid.node_count();
        PathSlot {
            dim: self.dim,
            t0: self.grid.t0(),
            dt: self.grid.dt(),
            values: &mut self.values[m * stride..(m + 1) * stride],
            integral: &mut self.integral[m * stride..(m + 1) * stride],
            sq_integral: &mut self.sq_integral[m * nodes..(m + 1) * nodes],
        }
    }

    /// Mutable per-path slots, for data-parallel simulation.
    pub fn slots_mut(&mut self) -> impl IndexedParallelIterator<Item = PathSlot<'_>> {
        let stride = self.stride();
        let nodes = self.grid.node_count();
        let (dim, t0, dt) = (self.dim, self.grid.t0(), self.grid.dt());
        self.values
            .par_chunks_mut(stride)
            .zip(self.integral.par_chunks_mut(stride))
            .zip(self.sq_integral.par_chunks_mut(nodes))
            .map(move |((values, integral), sq_integral)| PathSlot {
                dim,
                t0,
                dt,
                values,
                integral,
                sq_integral,
            })
    }

    /// Copies nodes `0..=upto` of every path from `other`.
    pub fn copy_prefix_from(&mut self, other: &PathEnsemble, upto: usize) -> Result<()> {
        if other.grid != self.grid || other.dim != self.dim || other.paths != self.paths {
            return Err(Error::Parameter("ensembles are not aligned".into()));
        }
        let stride = self.stride();
        let nodes = self.grid.node_count();
        let len = (upto + 1) * self.dim;
        for m in 0..self.paths {
            let r = m * stride..m * stride + len;
            self.values[r.clone()].copy_from_slice(&other.values[r.clone()]);
            self.integral[r.clone()].copy_from_slice(&other.integral[r]);
            let s = m * nodes..m * nodes + upto + 1;
            self.sq_integral[s.clone()].copy_from_slice(&other.sq_integral[s]);
        }
        Ok(())
    }
}

/// Mutable access to one path of an ensemble.
pub struct PathSlot<'a> {
    dim: usize,
    t0: f64,
    dt: f64,
    values: &'a mut [f64],
    integral: &'a mut [f64],
    sq_integral: &'a mut [f64],
}

impl PathSlot<'_> {
    /// Writes node `k`, updating the running integrals from node `k - 1`.
    pub fn set(&mut self, k: usize, x: &[f64]) {
        let d = self.dim;
        self.values[k * d..(k + 1) * d].copy_from_slice(x);
        if k == 0 {
            self.integral[..d].iter_mut().for_each(|v| *v = 0.0);
            self.sq_integral[0] = 0.0;
        } else {
            let mut sq = 0.0;
            for i in 0..d {
                let prev = self.values[(k - 1) * d + i];
                self.integral[k * d + i] = self.integral[(k - 1) * d + i] + prev * self.dt;
                sq += prev * prev;
            }
            self.sq_integral[k] = self.sq_integral[k - 1] + sq * self.dt;
        }
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn view(&self, k: usize) -> PathView<'_> {
        let d = self.dim;
        PathView::new(d, self.t0, self.dt, &self.values[..(k + 1) * d])
            .with_cache(&self.integral[k * d..(k + 1) * d], self.sq_integral[k])
    }
}

/// Brownian increments for `M` paths of an `n`-dimensional Brownian motion.
#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl BrownianEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `ΔW` over step `k` (from node `k` to `k + 1`) of path `m`.
    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let base = (m * self.grid.n_steps() + k) * self.dim;
        &self.increments[base..base + self.dim]
    }

    /// All increments of path `m`, step-major.
    pub fn path_increments(&self, m: usize) -> &[f64] {
        let stride = self.grid.n_steps() * self.dim;
        &self.increments[m * stride..(m + 1) * stride]
    }

    /// `W` at node `k` of path `m` (with `W_0 = 0`).
    pub fn value(&self, m: usize, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for j in 0..k {
            for (wi, dw) in w.iter_mut().zip(self.increment(m, j)) {
                *wi += dw;
            }
        }
        w
    }

    /// Sums blocks of `factor` increments; the coarse ensemble is driven by
    /// the same Brownian paths.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let n = self.dim;
        let mut increments = vec![0.0; self.paths * grid.n_steps() * n];
        for m in 0..self.paths {
            for k in 0..grid.n_steps() {
                for j in 0..factor {
                    let fine = self.increment(m, k * factor + j);
                    let base = (m * grid.n_steps() + k) * n;
                    for i in 0..n {
                        increments[base + i] += fine[i];
                    }
                }
            }
        }
        Ok(Self {
            grid,
            paths: self.paths,
            dim: n,
            seed: self.seed,
            increments,
        })
    }
}

/// Simulates `paths` independent `dim`-dimensional Brownian paths on `grid`.
///
/// Path `m` draws from its own ChaCha stream, so the ensemble is
/// reproducible from the seed regardless of thread scheduling.
pub fn simulate_brownian(
    grid: &TimeGrid,
    paths: usize,
    dim: usize,
    seed: u64,
) -> Result<BrownianEnsemble> {
    if paths == 0 || dim == 0 {
        return Err(Error::Parameter(format!(
            "Brownian ensemble needs M >= 1 and n >= 1, got M = {paths}, n = {dim}"
        )));
    }
    let stride = grid.n_steps() * dim;
    let sd = grid.dt().sqrt();
    let mut increments = vec![0.0; paths * stride];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(m, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sd * z;
            }
        });
    Ok(BrownianEnsemble {
        grid: *grid,
        paths,
        dim,
        seed,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn grid_rejects_bad_bounds() {
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = unit_grid(4);
        assert_eq!(g.node_count(), 5);
        assert!(g.times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_path_has_zero_norm() {
        let g = unit_grid(10);
        let x = PathSample::constant(g, &[0.0, 0.0]).unwrap();
        for t in [0.0, 0.35, 1.0] {
            assert_eq!(path_norm_2t(&x, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_path_norm_is_exact() {
        let g = unit_grid(16);
        let c = -1.7;
        let x = PathSample::constant(g, &[c]).unwrap();
        let norm = path_norm_2t(&x, 1.0).unwrap();
        assert!((norm - c.abs() * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identity_path_converges_to_quadrature() {
        // Independent oracle: midpoint quadrature of ∫₀¹ s² ds at 10⁶ panels.
        let panels = 1_000_000;
        let h = 1.0 / panels as f64;
        let integral: f64 = (0..panels)
            .map(|i| {
                let s = (i as f64 + 0.5) * h;
                s * s * h
            })
            .sum();
        let oracle = (integral + 1.0).sqrt();
        assert!((oracle - (1.0f64 / 3.0 + 1.0).sqrt()).abs() < 1e-9);

        let mut last_err = f64::INFINITY;
        for n in [10, 100, 1000, 10_000] {
            let x = PathSample::from_fn(unit_grid(n), 1, |s| vec![s]).unwrap();
            let err = (path_norm_2t(&x, 1.0).unwrap() - oracle).abs();
            assert!(err < last_err);
            last_err = err;
        }
        assert!(last_err < 1e-4);
    }

    #[test]
    fn off_grid_time_uses_left_node() {
        let g = unit_grid(4);
        let x = PathSample::from_fn(g, 1, |s| vec![s]).unwrap();
        let at_node = path_norm_2t(&x, 0.5).unwrap();
        let between = path_norm_2t(&x, 0.6).unwrap();
        assert_eq!(at_node, between);
        assert!(path_norm_2t(&x, 1.5).is_err());
        assert!(path_norm_2t(&x, -0.1).is_err());
    }

    #[test]
    fn cached_view_matches_direct_computation() {
        let g = TimeGrid::new(0.0, 2.0, 20).unwrap();
        let x = PathSample::from_fn(g, 2, |s| vec![s.sin(), s * s - 1.0]).unwrap();
        let ens = PathEnsemble::replicate(&x, 3);
        for k in [0, 1, 7, 20] {
            let a = x.view(k);
            let b = ens.view(2, k);
            assert!((a.norm_sq() - b.norm_sq()).abs() < 1e-12);
            let (mut ia, mut ib) = ([0.0; 2], [0.0; 2]);
            a.integral_into(&mut ia);
            b.integral_into(&mut ib);
            assert!((ia[0] - ib[0]).abs() < 1e-12 && (ia[1] - ib[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_zero_paths() {
        let head = PathSample::constant(unit_grid(4), &[0.0]).unwrap();
        let tail = PathSample::constant(TimeGrid::new(1.0, 2.0, 4).unwrap(), &[0.0]).unwrap();
        let joined = concat_paths(&head, &tail).unwrap();
        assert_eq!(joined.grid().t0(), 0.0);
        assert_eq!(joined.grid().t1(), 2.0);
        assert!(joined.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn concat_counts_junction_once() {
        let head = PathSample::from_fn(unit_grid(5), 1, |s| vec![3.0 * s]).unwrap();
        let tail = PathSample::constant(TimeGrid::new(1.0, 2.0, 5).unwrap(), &[3.0]).unwrap();
        let joined = concat_paths(&head, &tail).unwrap();
        assert_eq!(joined.grid().node_count(), 6 + 6 - 1);
        assert_eq!(joined.value(5), &[3.0]);
    }

    #[test]
    fn concat_rejects_jump() {
        let head = PathSample::constant(unit_grid(5), &[1.0]).unwrap();
        let tail = PathSample::constant(TimeGrid::new(1.0, 2.0, 5).unwrap(), &[1.5]).unwrap();
        assert!(matches!(concat_paths(&head, &tail), Err(Error::Junction(_))));
        let late = PathSample::constant(TimeGrid::new(1.2, 2.2, 5).unwrap(), &[1.0]).unwrap();
        assert!(matches!(concat_paths(&head, &late), Err(Error::Junction(_))));
    }

    #[test]
    fn brownian_is_deterministic_under_seed() {
        let g = unit_grid(8);
        let a = simulate_brownian(&g, 5, 2, 99).unwrap();
        let b = simulate_brownian(&g, 5, 2, 99).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = simulate_brownian(&g, 5, 2, 100).unwrap();
        assert_ne!(a.increments(), c.increments());
        assert!(simulate_brownian(&g, 0, 1, 1).is_err());
    }

    #[test]
    fn single_increment_variance_over_seeds() {
        let g = TimeGrid::new(0.0, 0.25, 1).unwrap();
        let samples: Vec<f64> = (0..100_000u64)
            .map(|s| simulate_brownian(&g, 1, 1, s).unwrap().increment(0, 0)[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (samples.len() - 1) as f64;
        assert!((var / g.dt() - 1.0).abs() < 0.02, "variance ratio {}", var / g.dt());
    }

    #[test]
    fn coordinates_are_uncorrelated() {
        let g = unit_grid(1);
        let w = simulate_brownian(&g, 10_000, 2, 5).unwrap();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for m in 0..w.paths() {
            let dw = w.increment(m, 0);
            sxy += dw[0] * dw[1];
            sxx += dw[0] * dw[0];
            syy += dw[1] * dw[1];
        }
        let rho = sxy / (sxx * syy).sqrt();
        assert!(rho.abs() < 0.03, "rho = {rho}");
    }

    #[test]
    fn coarsening_preserves_terminal_value() {
        let g = unit_grid(12);
        let w = simulate_brownian(&g, 4, 2, 3).unwrap();
        let c = w.coarsen(4).unwrap();
        assert_eq!(c.grid().n_steps(), 3);
        for m in 0..4 {
            let (a, b) = (w.value(m, 12), c.value(m, 3));
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert!(w.coarsen(5).is_err());
    }

    fn arb_path(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n + 1)
    }

    proptest! {
        #[test]
        fn norm_triangle_and_homogeneity(xs in arb_path(12), ys in arb_path(12),
                                         lambda in -5.0f64..5.0, k in 0usize..=12) {
            let g = unit_grid(12);
            let x = PathSample::new(g, 1, xs).unwrap();
            let y = PathSample::new(g, 1, ys).unwrap();
            let t = g.time(k);
            let sum = x.axpy(1.0, &y).unwrap();
            let lhs = path_norm_2t(&sum, t).unwrap();
            let rhs = path_norm_2t(&x, t).unwrap() + path_norm_2t(&y, t).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
            let scaled = path_norm_2t(&x.scale(lambda).unwrap(), t).unwrap();
            prop_assert!((scaled - lambda.abs() * path_norm_2t(&x, t).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn integral_part_is_monotone(xs in arb_path(20)) {
            let x = PathSample::new(unit_grid(20), 1, xs).unwrap();
            let integrals: Vec<f64> = (0..=20).map(|k| x.view(k).sq_integral()).collect();
            prop_assert!(integrals.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn norm_monotone_for_growing_paths(steps in prop::collection::vec(0.0f64..3.0, 20),
                                           start in 0.0f64..2.0) {
            let mut vals = vec![start];
            for s in &steps {
                vals.push(vals.last().unwrap() + s);
            }
            let g = unit_grid(20);
            let x = PathSample::new(g, 1, vals).unwrap();
            let norms: Vec<f64> = (0..=20).map(|k| path_norm_2t(&x, g.time(k)).unwrap()).collect();
            prop_assert!(norms.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        }

        #[test]
        fn refinement_changes_norm_by_order_dt(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let f = |s: f64| vec![a + b * s];
            let coarse = PathSample::from_fn(unit_grid(50), 1, f).unwrap();
            let fine = PathSample::from_fn(unit_grid(100), 1, f).unwrap();
            let sq = |x: &PathSample| path_norm_2t(x, 1.0).unwrap().powi(2);
            let diff = (sq(&coarse) - sq(&fine)).abs();
            // |x|² is Lipschitz with constant 2|x|_∞|b|; left Riemann error is at most L·Δt.
            let bound = 2.0 * (a.abs() + b.abs()) * b.abs() * (1.0 / 50.0) + 1e-12;
            prop_assert!(diff <= bound);
        }
    }
}
