//! Characteristic quantities of a pair of solutions driven by the same noise:
//! `D = ‖ΔX‖_{2,t}`, `H = |ΔY|²/D²`, `α = ΔZ/D`, `β = ΔX_t/D`, `P = ΔY/|ΔY|`,
//! and the coefficients `A … F`, `N` of the scalar BSDE satisfied by `H`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::local::SolutionTriple;
use crate::paths::PathView;
use crate::problems::CoefficientSet;

/// Nodes with `D` below this are masked.
pub const MASK_THRESHOLD: f64 = 1e-12;

/// Node-indexed characteristic quantities of one path pair. Vectors and
/// matrices are stored node-major; `α` is `n × n`, `β` has `d` entries and
/// `P`, `N` and the drift have `n`. Masked nodes hold NaN.
#[derive(Debug, Clone)]
pub struct CharacteristicTrajectory {
    pub path: usize,
    pub d_dim: usize,
    pub n_dim: usize,
    pub times: Vec<f64>,
    pub masked: Vec<bool>,
    /// `false` where `ΔY = 0` and `P` is undefined (stored as zero).
    pub p_defined: Vec<bool>,
    pub dist: Vec<f64>,
    pub h: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub f: Vec<f64>,
    pub n: Vec<f64>,
    /// Drift of the tilted Brownian motion, `2(σ_x + σ_y P √H + Tr(σ_z α))ᵀβ`.
    /// Recorded only.
    pub girsanov_drift: Vec<f64>,
}

impl CharacteristicTrajectory {
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn beta_at(&self, i: usize) -> &[f64] {
        &self.beta[i * self.d_dim..(i + 1) * self.d_dim]
    }

    pub fn p_at(&self, i: usize) -> &[f64] {
        &self.p[i * self.n_dim..(i + 1) * self.n_dim]
    }

    pub fn alpha_at(&self, i: usize) -> &[f64] {
        let nn = self.n_dim * self.n_dim;
        &self.alpha[i * nn..(i + 1) * nn]
    }
}

/// Difference quotients of one coefficient `ξ` with output length `len`.
struct Quotients {
    /// `[ξ(x,y,z) − ξ(x',y,z)] / D`.
    x: Vec<f64>,
    /// One slice per `y` component.
    y: Vec<Vec<f64>>,
    /// One slice per `z` entry.
    z: Vec<Vec<f64>>,
}

type Eval<'a> = dyn Fn(&PathView<'_>, &[f64], &[f64], &mut [f64]) + 'a;

/// Telescoped quotients: `x` moves first, then `y` and `z` one component at a
/// time, so the differences sum to `ξ(θ) − ξ(θ')`. Coincident components get
/// a zero quotient.
#[allow(clippy::too_many_arguments)]
fn quotients(
    xi: &Eval<'_>,
    len: usize,
    v1: &PathView<'_>,
    v2: &PathView<'_>,
    dist: f64,
    (y1, y2): (&[f64], &[f64]),
    (z1, z2): (&[f64], &[f64]),
) -> Quotients {
    let mut hi = vec![0.0; len];
    let mut lo = vec![0.0; len];
    xi(v1, y1, z1, &mut hi);
    xi(v2, y1, z1, &mut lo);
    let x = hi.iter().zip(&lo).map(|(a, b)| (a - b) / dist).collect();

    let mut cur = y1.to_vec();
    let mut y = Vec::with_capacity(y1.len());
    for i in 0..y1.len() {
        xi(v2, &cur, z1, &mut hi);
        let step = y1[i] - y2[i];
        cur[i] = y2[i];
        xi(v2, &cur, z1, &mut lo);
        y.push(if step == 0.0 {
            vec![0.0; len]
        } else {
            hi.iter().zip(&lo).map(|(a, b)| (a - b) / step).collect()
        });
    }

    let mut cur = z1.to_vec();
    let mut z = Vec::with_capacity(z1.len());
    for i in 0..z1.len() {
        xi(v2, y2, &cur, &mut hi);
        let step = z1[i] - z2[i];
        cur[i] = z2[i];
        xi(v2, y2, &cur, &mut lo);
        z.push(if step == 0.0 {
            vec![0.0; len]
        } else {
            hi.iter().zip(&lo).map(|(a, b)| (a - b) / step).collect()
        });
    }
    Quotients { x, y, z }
}

/// `Σ_l w_l · slices_l`.
fn contract(slices: &[Vec<f64>], weights: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (s, w) in slices.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    out
}

fn check_pair(s1: &SolutionTriple, s2: &SolutionTriple, p: &CoefficientSet) -> Result<()> {
    let (g1, g2) = (s1.grid(), s2.grid());
    if g1 != g2 || s1.paths() != s2.paths() || s1.start != s2.start {
        return Err(Error::Parameter(
            "characteristic pairs need solutions on the same grid and ensemble".into(),
        ));
    }
    if s1.x.dim() != p.d || s1.n != p.n || s2.n != p.n {
        return Err(Error::Parameter("solution dimensions do not match the problem".into()));
    }
    Ok(())
}

fn pair_trajectory(
    s1: &SolutionTriple,
    s2: &SolutionTriple,
    p: &CoefficientSet,
    m: usize,
) -> Result<CharacteristicTrajectory> {
    let (d, n) = (p.d, p.n);
    let nn = n * n;
    let grid = s1.grid();
    let dt = grid.dt();
    let nodes = grid.node_count() - s1.start;
    let nan = f64::NAN;
    let mut t = CharacteristicTrajectory {
        path: m,
        d_dim: d,
        n_dim: n,
        times: (s1.start..grid.node_count()).map(|k| grid.time(k)).collect(),
        masked: vec![true; nodes],
        p_defined: vec![false; nodes],
        dist: vec![0.0; nodes],
        h: vec![nan; nodes],
        alpha: vec![nan; nodes * nn],
        beta: vec![nan; nodes * d],
        p: vec![nan; nodes * n],
        a: vec![nan; nodes],
        b: vec![nan; nodes],
        c: vec![nan; nodes],
        d: vec![nan; nodes],
        f: vec![nan; nodes],
        n: vec![nan; nodes * n],
        girsanov_drift: vec![nan; nodes * n],
    };
    let mut sq_int = 0.0;
    for k in 0..grid.node_count() {
        let x1 = s1.x.value(m, k);
        let x2 = s2.x.value(m, k);
        let dx_sq: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
        if k < s1.start {
            sq_int += dx_sq * dt;
            continue;
        }
        let i = k - s1.start;
        let dist = (sq_int + dx_sq).sqrt();
        sq_int += dx_sq * dt;
        t.dist[i] = dist;
        if dist < MASK_THRESHOLD {
            continue;
        }
        t.masked[i] = false;
        let (y1, y2) = (s1.y(m, k), s2.y(m, k));
        let (z1, z2) = (s1.z(m, k), s2.z(m, k));
        let dy: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a - b).collect();
        let dy_norm = dy.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sqrt_h = dy_norm / dist;
        let h = sqrt_h * sqrt_h;
        let alpha: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| (a - b) / dist).collect();
        let beta: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| (a - b) / dist).collect();
        let pv: Vec<f64> = if dy_norm > 0.0 {
            t.p_defined[i] = true;
            dy.iter().map(|v| v / dy_norm).collect()
        } else {
            vec![0.0; n]
        };

        let v1 = s1.x.view(m, k);
        let v2 = s2.x.view(m, k);
        let ys = (y1, y2);
        let zs = (z1, z2);
        let bq = quotients(&|v, y, z, o| p.b_into(v, y, z, o), d, &v1, &v2, dist, ys, zs);
        let sq = quotients(&|v, y, z, o| p.sigma_into(v, y, z, o), d * n, &v1, &v2, dist, ys, zs);
        let fq = quotients(&|v, y, z, o| p.f_into(v, y, z, o), n, &v1, &v2, dist, ys, zs);
        let all = bq.x.iter().chain(&sq.x).chain(&fq.x);
        let qs = [&bq, &sq, &fq];
        let deep = qs
            .iter()
            .flat_map(|q| q.y.iter().chain(&q.z))
            .flatten();
        if all.chain(deep).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "non-finite difference quotient on path {m} at node {k}"
            )));
        }

        // S = σ_y P (d×n), Σ = σ_x + Tr(σ_z α) (d×n).
        let s = contract(&sq.y, &pv, d * n);
        let tr_sz = contract(&sq.z, &alpha, d * n);
        let sigma: Vec<f64> = sq.x.iter().zip(&tr_sz).map(|(a, b)| a + b).collect();
        let tr_bz = contract(&bq.z, &alpha, d);
        let tr_fz = contract(&fq.z, &alpha, n);
        // b_y P (d), f_y P (n).
        let by_p = contract(&bq.y, &pv, d);
        let fy_p = contract(&fq.y, &pv, n);

        let t_row = |mat: &[f64]| -> Vec<f64> {
            // βᵀM for a d×n matrix.
            (0..n)
                .map(|j| (0..d).map(|r| beta[r] * mat[r * n + j]).sum())
                .collect()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let st_beta = t_row(&s);
        let sigt_beta = t_row(&sigma);
        let sxt_beta = t_row(&sq.x);

        let a = dot(&s, &s) - 8.0 * dot(&st_beta, &st_beta);
        let b = 2.0 * dot(&beta, &by_p) + 2.0 * dot(&s, &sigma) - 16.0 * dot(&st_beta, &sigt_beta);
        let bx_tr: Vec<f64> = bq.x.iter().zip(&tr_bz).map(|(a, b)| a + b).collect();
        let c = 2.0 * dot(&pv, &fy_p) + dot(&beta, &beta) + 2.0 * dot(&beta, &bx_tr)
            + dot(&sq.x, &sq.x)
            - 8.0 * dot(&sxt_beta, &sxt_beta);
        let dd = 2.0 * dot(&pv, &fq.x) + 2.0 * dot(&pv, &tr_fz);
        let f = -dot(&alpha, &alpha);

        // Σ + σ_y P √H, shared by N and the drift.
        let tilt: Vec<f64> = sigma.iter().zip(&s).map(|(a, b)| a + b * sqrt_h).collect();
        let tilt_beta = t_row(&tilt);
        for j in 0..n {
            let pa: f64 = (0..n).map(|r| pv[r] * alpha[r * n + j]).sum();
            t.n[i * n + j] = 2.0 * sqrt_h * pa - 2.0 * h * tilt_beta[j];
            t.girsanov_drift[i * n + j] = 2.0 * tilt_beta[j];
        }
        t.h[i] = h;
        t.alpha[i * nn..(i + 1) * nn].copy_from_slice(&alpha);
        t.beta[i * d..(i + 1) * d].copy_from_slice(&beta);
        t.p[i * n..(i + 1) * n].copy_from_slice(&pv);
        t.a[i] = a;
        t.b[i] = b;
        t.c[i] = c;
        t.d[i] = dd;
        t.f[i] = f;
    }
    Ok(t)
}

/// Characteristic trajectory of path `m` of a solution pair.
pub fn characteristic_trajectory(
    s1: &SolutionTriple,
    s2: &SolutionTriple,
    p: &CoefficientSet,
    m: usize,
) -> Result<CharacteristicTrajectory> {
    check_pair(s1, s2, p)?;
    if m >= s1.paths() {
        return Err(Error::Parameter(format!("path {m} out of range")));
    }
    let t = pair_trajectory(s1, s2, p, m)?;
    if t.masked.iter().all(|v| *v) {
        return Err(Error::Degenerate(format!("path {m}: D vanishes at every node")));
    }
    Ok(t)
}

/// Trajectories for every path; `None` marks a degenerate pair.
pub fn characteristic_ensemble(
    s1: &SolutionTriple,
    s2: &SolutionTriple,
    p: &CoefficientSet,
) -> Result<Vec<Option<CharacteristicTrajectory>>> {
    check_pair(s1, s2, p)?;
    (0..s1.paths())
        .into_par_iter()
        .map(|m| {
            let t = pair_trajectory(s1, s2, p, m)?;
            Ok((!t.masked.iter().all(|v| *v)).then_some(t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{PathEnsemble, TimeGrid};
    use crate::problems::builtin;
    use std::collections::BTreeMap;

    /// Closed-form martingale solution `X = x + W`, `Y = X`, `Z = 1` on
    /// a set of deterministic "Brownian" paths.
    fn martingale(x0: f64, grid: TimeGrid, walks: &[Vec<f64>]) -> SolutionTriple {
        let m = walks.len();
        let starts = vec![x0; m];
        let mut x = PathEnsemble::starting_at_each(grid, 1, &starts).unwrap();
        x.slots_mut().enumerate().for_each(|(i, mut slot)| {
            for (k, w) in walks[i].iter().enumerate().take(grid.node_count()) {
                slot.set(k, &[x0 + w]);
            }
        });
        let nodes = grid.node_count();
        let mut y = vec![0.0; nodes * m];
        let mut z = vec![1.0; nodes * m];
        for k in 0..nodes {
            for i in 0..m {
                y[k * m + i] = x0 + walks[i][k];
            }
        }
        z[(nodes - 1) * m..].fill(0.0);
        SolutionTriple::new(x, 0, 1, y, z).unwrap()
    }

    fn walks(grid: TimeGrid, m: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| {
                (0..grid.node_count())
                    .map(|k| ((i + 1) as f64 * 0.37 * k as f64).sin() * 0.3)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn shifted_martingale_gives_inverse_time() {
        let p = builtin("pure_martingale", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let w = walks(grid, 4);
        let c = 0.3;
        let (s1, s2) = (martingale(1.0 + c, grid, &w), martingale(1.0, grid, &w));
        for t in characteristic_ensemble(&s1, &s2, &p).unwrap() {
            let t = t.unwrap();
            for i in 0..t.nodes() {
                let exact = 1.0 / (t.times[i] + 1.0);
                assert!((t.h[i] - exact).abs() < 1e-12, "{} vs {exact}", t.h[i]);
                assert!((t.dist[i] - c * (t.times[i] + 1.0).sqrt()).abs() < 1e-12);
                assert_eq!((t.a[i], t.b[i]), (0.0, 0.0));
                assert!((t.p_at(i)[0].abs() - 1.0).abs() < 1e-12);
                assert!(t.beta_at(i)[0].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn constant_terminal_gives_zero_h() {
        let mut p = builtin("pure_martingale", &BTreeMap::new()).unwrap();
        p.g = std::sync::Arc::new(|_, out| out[0] = 2.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let w = walks(grid, 2);
        let mut s1 = martingale(1.5, grid, &w);
        let mut s2 = martingale(1.0, grid, &w);
        let nodes = grid.node_count();
        for s in [&mut s1, &mut s2] {
            *s = SolutionTriple::new(s.x.clone(), 0, 1, vec![2.0; nodes * 2], vec![0.0; nodes * 2])
                .unwrap();
        }
        let t = characteristic_trajectory(&s1, &s2, &p, 1).unwrap();
        assert!(t.h.iter().all(|h| *h == 0.0));
        assert!(t.p_defined.iter().all(|d| !d));
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let p = builtin("pure_martingale", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let w = walks(grid, 2);
        let s = martingale(1.0, grid, &w);
        assert!(matches!(
            characteristic_trajectory(&s, &s, &p, 0),
            Err(Error::Degenerate(_))
        ));
        assert!(characteristic_ensemble(&s, &s, &p).unwrap().iter().all(Option::is_none));
    }

    #[test]
    fn drift_coupled_quotients() {
        // b = y: b_y = 1 and every other quotient vanishes, so A = 0,
        // B = 2βP, C = |β|², D = 0, F = −α².
        let p = builtin("linear_y_drift", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let w = walks(grid, 3);
        let s1 = martingale(1.4, grid, &w);
        let mut s2 = martingale(1.0, grid, &w);
        let nodes = grid.node_count();
        let z2: Vec<f64> = (0..nodes * 3).map(|i| 0.5 + 0.01 * i as f64).collect();
        let y2: Vec<f64> = (0..nodes * 3).map(|i| 0.9 - 0.02 * i as f64).collect();
        s2 = SolutionTriple::new(s2.x.clone(), 0, 1, y2, z2).unwrap();
        let t = characteristic_trajectory(&s1, &s2, &p, 2).unwrap();
        for i in 0..nodes {
            let (beta, pv, al) = (t.beta_at(i)[0], t.p_at(i)[0], t.alpha_at(i)[0]);
            assert_eq!(t.a[i], 0.0);
            assert!((t.b[i] - 2.0 * beta * pv).abs() < 1e-12);
            assert!((t.c[i] - beta * beta).abs() < 1e-12);
            assert_eq!(t.d[i], 0.0);
            assert!((t.f[i] + al * al).abs() < 1e-12);
            let sqrt_h = t.h[i].sqrt();
            assert!((t.n[i] - 2.0 * sqrt_h * pv * al).abs() < 1e-12);
        }
    }
}
