//! Coefficient quadruples `(b, σ, f, g)`, their Lipschitz metadata, the
//! structural classes used for dispatch, and the built-in catalog.
//!
//! Every coefficient receives the forward path only up to the current node
//! through a [`PathView`], so adaptedness holds by construction.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{PathSample, PathView, TimeGrid};

/// `(t, x up to t, y, z, out)`; `z` is an `n × n` matrix stored row-major.
pub type PathFn = Arc<dyn Fn(&PathView<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Terminal functional of the full forward path.
pub type TerminalFn = Arc<dyn Fn(&PathView<'_>, &mut [f64]) + Send + Sync>;

const PROBE_SEED: u64 = 0x5eed_c1a5;
const PROBE_COUNT: usize = 20;
const PROBE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureClass {
    Decoupled,
    DriftYCoupled,
    SigmaXY,
    General,
}

impl fmt::Display for StructureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StructureClass::Decoupled => "decoupled",
            StructureClass::DriftYCoupled => "drift_y_coupled",
            StructureClass::SigmaXY => "sigma_xy",
            StructureClass::General => "general",
        };
        f.write_str(s)
    }
}

/// Optional sharper bounds on the individual partial Lipschitz constants.
///
/// `s_*` refers to σ. When absent every partial is bounded by `K0`
/// (and `s_z` by `sigma_z_sup`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialBounds {
    pub b_x: f64,
    pub b_y: f64,
    pub b_z: f64,
    pub s_x: f64,
    pub s_y: f64,
    pub s_z: f64,
    pub f_x: f64,
    pub f_y: f64,
    pub f_z: f64,
}

impl PartialBounds {
    pub fn zero() -> Self {
        Self {
            b_x: 0.0,
            b_y: 0.0,
            b_z: 0.0,
            s_x: 0.0,
            s_y: 0.0,
            s_z: 0.0,
            f_x: 0.0,
            f_y: 0.0,
            f_z: 0.0,
        }
    }

    fn all(&self) -> [f64; 9] {
        [
            self.b_x, self.b_y, self.b_z, self.s_x, self.s_y, self.s_z, self.f_x, self.f_y,
            self.f_z,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzData {
    pub k0: f64,
    pub k1: f64,
    pub sigma_z_sup: f64,
    pub alpha_bar: Option<f64>,
    #[serde(default)]
    pub partials: Option<PartialBounds>,
}

impl LipschitzData {
    pub fn new(k0: f64, k1: f64, sigma_z_sup: f64) -> Result<Self> {
        let l = Self {
            k0,
            k1,
            sigma_z_sup,
            alpha_bar: None,
            partials: None,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn with_alpha_bar(mut self, alpha_bar: f64) -> Self {
        self.alpha_bar = Some(alpha_bar);
        self
    }

    pub fn with_partials(mut self, partials: PartialBounds) -> Self {
        self.partials = Some(partials);
        self
    }

    pub fn with_k1(mut self, k1: f64) -> Self {
        self.k1 = k1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.k0) || !finite_nonneg(self.k1) || !finite_nonneg(self.sigma_z_sup)
        {
            return Err(Error::Parameter(format!(
                "Lipschitz constants must be finite and nonnegative (K0 = {}, K1 = {}, sigma_z = {})",
                self.k0, self.k1, self.sigma_z_sup
            )));
        }
        if self.sigma_z_sup > self.k0 {
            return Err(Error::Parameter(format!(
                "sigma_z_sup = {} exceeds K0 = {}",
                self.sigma_z_sup, self.k0
            )));
        }
        if let Some(a) = self.alpha_bar {
            if !finite_nonneg(a) {
                return Err(Error::Parameter(format!("alpha_bar = {a} is invalid")));
            }
        }
        if let Some(p) = self.partials {
            if p.all().iter().any(|v| !finite_nonneg(*v) || *v > self.k0) {
                return Err(Error::Parameter(
                    "partial bounds must lie in [0, K0]".into(),
                ));
            }
            if p.s_z > self.sigma_z_sup {
                return Err(Error::Parameter(format!(
                    "partial bound s_z = {} exceeds sigma_z_sup = {}",
                    p.s_z, self.sigma_z_sup
                )));
            }
        }
        Ok(())
    }

    /// Partial bounds in effect: the supplied ones or the generic `K0` ones.
    pub fn effective_partials(&self) -> PartialBounds {
        self.partials.unwrap_or(PartialBounds {
            b_x: self.k0,
            b_y: self.k0,
            b_z: self.k0,
            s_x: self.k0,
            s_y: self.k0,
            s_z: self.sigma_z_sup,
            f_x: self.k0,
            f_y: self.k0,
            f_z: self.k0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemNorm {
    pub i0_sq: f64,
}

/// The quadruple `(b, σ, f, g)` with dimensions `d` (forward) and `n` (backward
/// and Brownian).
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub d: usize,
    pub n: usize,
    pub b: PathFn,
    pub sigma: PathFn,
    pub f: PathFn,
    pub g: TerminalFn,
    pub lipschitz: LipschitzData,
    pub class: StructureClass,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("lipschitz", &self.lipschitz)
            .field("class", &self.class)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn b_into(&self, x: &PathView<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.b)(x, y, z, out)
    }

    pub fn sigma_into(&self, x: &PathView<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.sigma)(x, y, z, out)
    }

    pub fn f_into(&self, x: &PathView<'_>, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(x, y, z, out)
    }

    pub fn g_into(&self, x: &PathView<'_>, out: &mut [f64]) {
        (self.g)(x, out)
    }

    /// Same problem with terminal condition `g + shift`.
    pub fn with_terminal_shift(&self, shift: &[f64]) -> Result<CoefficientSet> {
        if shift.len() != self.n {
            return Err(Error::Parameter(format!(
                "terminal shift has {} entries, expected {}",
                shift.len(),
                self.n
            )));
        }
        let g = self.g.clone();
        let shift = shift.to_vec();
        let mut p = self.clone();
        p.name = format!("{}+shift", self.name);
        p.g = Arc::new(move |x, out| {
            g(x, out);
            for (o, s) in out.iter_mut().zip(&shift) {
                *o += s;
            }
        });
        Ok(p)
    }

    pub fn with_lipschitz(mut self, lipschitz: LipschitzData) -> Result<CoefficientSet> {
        lipschitz.validate()?;
        self.lipschitz = lipschitz;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::Parameter("dimensions must be positive".into()));
        }
        self.lipschitz.validate()
    }
}

/// Random probe point: a path prefix, a node and two `(y, z)` arguments.
struct Probe {
    path: PathSample,
    node: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    y2: Vec<f64>,
    z2: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_path(rng: &mut ChaCha8Rng, grid: TimeGrid, d: usize) -> PathSample {
    let sd = grid.dt().sqrt();
    let mut values = gaussian_vec(rng, d, 1.0);
    for k in 1..grid.node_count() {
        for i in 0..d {
            let prev = values[(k - 1) * d + i];
            values.push(prev + sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    PathSample::new(grid, d, values).expect("random path is finite")
}

fn probes(p: &CoefficientSet, seed: u64) -> Vec<Probe> {
    let grid = TimeGrid::new(0.0, 1.0, 10).expect("valid probe grid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PROBE_COUNT)
        .map(|_| {
            let path = random_path(&mut rng, grid, p.d);
            let node = rng.random_range(0..grid.node_count());
            Probe {
                path,
                node,
                y: gaussian_vec(&mut rng, p.n, 2.0),
                z: gaussian_vec(&mut rng, p.n * p.n, 2.0),
                y2: gaussian_vec(&mut rng, p.n, 2.0),
                z2: gaussian_vec(&mut rng, p.n * p.n, 2.0),
            }
        })
        .collect()
}

fn differs(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .any(|(u, v)| (u - v).abs() > PROBE_TOL * (1.0 + u.abs().max(v.abs())))
}

/// Checks that `func` ignores `y` (when `check_y`) and `z` (when `check_z`).
fn insensitive(
    p: &CoefficientSet,
    func: &PathFn,
    out_len: usize,
    name: &str,
    check_y: bool,
    check_z: bool,
    seed: u64,
) -> Result<()> {
    let mut base = vec![0.0; out_len];
    let mut moved = vec![0.0; out_len];
    for probe in probes(p, seed) {
        let view = probe.path.view(probe.node);
        func(&view, &probe.y, &probe.z, &mut base);
        if check_y {
            func(&view, &probe.y2, &probe.z, &mut moved);
            if differs(&base, &moved) {
                return Err(Error::Classification {
                    coefficient: name.into(),
                    detail: format!("depends on y at t = {}", view.time()),
                });
            }
        }
        if check_z {
            func(&view, &probe.y, &probe.z2, &mut moved);
            if differs(&base, &moved) {
                return Err(Error::Classification {
                    coefficient: name.into(),
                    detail: format!("depends on z at t = {}", view.time()),
                });
            }
        }
    }
    Ok(())
}

/// Confirms the declared class by probing at randomized `(y, z)` arguments.
pub fn classify_structure(p: &CoefficientSet) -> Result<StructureClass> {
    classify_structure_with_seed(p, PROBE_SEED)
}

pub fn classify_structure_with_seed(p: &CoefficientSet, seed: u64) -> Result<StructureClass> {
    p.validate()?;
    let (d, n) = (p.d, p.n);
    match p.class {
        StructureClass::Decoupled => {
            insensitive(p, &p.b, d, "b", true, true, seed)?;
            insensitive(p, &p.sigma, d * n, "sigma", true, true, seed)?;
        }
        StructureClass::DriftYCoupled => {
            insensitive(p, &p.b, d, "b", false, true, seed)?;
            insensitive(p, &p.sigma, d * n, "sigma", true, true, seed)?;
        }
        StructureClass::SigmaXY => {
            insensitive(p, &p.sigma, d * n, "sigma", false, true, seed)?;
        }
        StructureClass::General => {}
    }
    Ok(p.class)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `I₀²` on the zero path by left Riemann sums.
pub fn compute_i0(p: &CoefficientSet, grid: &TimeGrid) -> Result<ProblemNorm> {
    let zero = PathSample::constant(*grid, &vec![0.0; p.d])?;
    let (y, z) = (vec![0.0; p.n], vec![0.0; p.n * p.n]);
    let (mut b, mut s, mut f) = (vec![0.0; p.d], vec![0.0; p.d * p.n], vec![0.0; p.n]);
    let dt = grid.dt();
    let (mut drift, mut diffusion) = (0.0, 0.0);
    for k in 0..grid.n_steps() {
        let view = zero.view(k);
        p.b_into(&view, &y, &z, &mut b);
        p.sigma_into(&view, &y, &z, &mut s);
        p.f_into(&view, &y, &z, &mut f);
        if b.iter().chain(&s).chain(&f).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "coefficients of `{}` on the zero path at t = {}",
                p.name,
                grid.time(k)
            )));
        }
        drift += (norm(&f) + norm(&b)) * dt;
        diffusion += s.iter().map(|v| v * v).sum::<f64>() * dt;
    }
    Ok(ProblemNorm {
        i0_sq: drift * drift + diffusion,
    })
}

/// `|g(0)|²`, the terminal size term of the a-priori estimates.
pub fn terminal_at_zero_sq(p: &CoefficientSet, grid: &TimeGrid) -> Result<f64> {
    let zero = PathSample::constant(*grid, &vec![0.0; p.d])?;
    let mut g = vec![0.0; p.n];
    p.g_into(&zero.full_view(), &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("g of `{}` on the zero path", p.name)));
    }
    Ok(g.iter().map(|v| v * v).sum())
}

/// Largest excess `|Δξ| − K₀(‖Δx‖ + |Δy| + |Δz|)` over random argument pairs,
/// together with the corresponding excess for `g` against `K₁‖Δx‖_{2,T}`.
/// Nonpositive values mean the declared constants hold on the sample.
pub fn lipschitz_excess(p: &CoefficientSet, pairs: usize, seed: u64) -> (f64, f64) {
    let grid = TimeGrid::new(0.0, 1.0, 20).expect("valid grid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (p.d, p.n);
    let k0 = p.lipschitz.k0;
    let mut coeff_excess = f64::NEG_INFINITY;
    let mut g_excess = f64::NEG_INFINITY;
    let mut out1 = vec![0.0; d * n.max(1) + n];
    let mut out2 = out1.clone();
    for _ in 0..pairs {
        let x1 = random_path(&mut rng, grid, d);
        let x2 = random_path(&mut rng, grid, d);
        let k = rng.random_range(0..grid.node_count());
        let (y1, y2) = (gaussian_vec(&mut rng, n, 2.0), gaussian_vec(&mut rng, n, 2.0));
        let (z1, z2) = (
            gaussian_vec(&mut rng, n * n, 2.0),
            gaussian_vec(&mut rng, n * n, 2.0),
        );
        let dx = x1.axpy(-1.0, &x2).expect("same grid");
        let dx_norm = dx.view(k).norm_sq().sqrt();
        let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
        let allowed = k0 * (dx_norm + norm(&dy) + norm(&dz));
        let (v1, v2) = (x1.view(k), x2.view(k));
        for (func, len) in [(&p.b, d), (&p.sigma, d * n), (&p.f, n)] {
            func(&v1, &y1, &z1, &mut out1[..len]);
            func(&v2, &y2, &z2, &mut out2[..len]);
            let diff: Vec<f64> = out1[..len]
                .iter()
                .zip(&out2[..len])
                .map(|(a, b)| a - b)
                .collect();
            coeff_excess = coeff_excess.max(norm(&diff) - allowed);
        }
        p.g_into(&x1.full_view(), &mut out1[..n]);
        p.g_into(&x2.full_view(), &mut out2[..n]);
        let diff: Vec<f64> = out1[..n].iter().zip(&out2[..n]).map(|(a, b)| a - b).collect();
        let allowed_g = p.lipschitz.k1 * dx.full_view().norm_sq().sqrt();
        g_excess = g_excess.max(norm(&diff) - allowed_g);
    }
    (coeff_excess, g_excess)
}

fn take_param(
    params: &BTreeMap<String, f64>,
    allowed: &[&str],
    key: &str,
    default: f64,
) -> Result<f64> {
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Parameter(format!("unknown parameter `{bad}`")));
    }
    let v = params.get(key).copied().unwrap_or(default);
    if !v.is_finite() {
        return Err(Error::Parameter(format!("parameter `{key}` must be finite")));
    }
    Ok(v)
}

fn terminal_identity() -> TerminalFn {
    Arc::new(|x: &PathView<'_>, out: &mut [f64]| out.copy_from_slice(x.current()))
}

fn zero_fn() -> PathFn {
    Arc::new(|_: &PathView<'_>, _: &[f64], _: &[f64], out: &mut [f64]| out.fill(0.0))
}

fn constant_fn(c: f64) -> PathFn {
    Arc::new(move |_: &PathView<'_>, _: &[f64], _: &[f64], out: &mut [f64]| out.fill(c))
}

pub const CATALOG: [&str; 4] = [
    "zdrift_counterexample",
    "linear_y_drift",
    "decoupled_linear",
    "pure_martingale",
];

/// Built-in scalar benchmarks (`d = n = 1`, `g(x) = x_T`).
///
/// - `zdrift_counterexample(k)`: `dX = (k + Z) dW`, `f = 0`.
/// - `linear_y_drift`: `dX = Y dt`, `f = 0`.
/// - `decoupled_linear(a)`: `dX = dW`, `f = aY`.
/// - `pure_martingale`: `dX = dW`, `f = 0`.
///
/// The catalog entries carry exact per-partial bounds; the `Z` increments of
/// all but the first are identically zero, so they declare `alpha_bar = 0`.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<CoefficientSet> {
    let p = match name {
        "zdrift_counterexample" => {
            let k = take_param(params, &["k"], "k", 1.0)?;
            CoefficientSet {
                name: name.into(),
                d: 1,
                n: 1,
                b: zero_fn(),
                sigma: Arc::new(move |_, _, z, out| out[0] = k + z[0]),
                f: zero_fn(),
                g: terminal_identity(),
                lipschitz: LipschitzData::new(1.0, 1.0, 1.0)?.with_partials(PartialBounds {
                    s_z: 1.0,
                    ..PartialBounds::zero()
                }),
                class: StructureClass::General,
            }
        }
        "linear_y_drift" => {
            take_param(params, &[], "", 0.0)?;
            CoefficientSet {
                name: name.into(),
                d: 1,
                n: 1,
                b: Arc::new(|_, y, _, out| out[0] = y[0]),
                sigma: zero_fn(),
                f: zero_fn(),
                g: terminal_identity(),
                lipschitz: LipschitzData::new(1.0, 1.0, 0.0)?
                    .with_alpha_bar(0.0)
                    .with_partials(PartialBounds {
                        b_y: 1.0,
                        ..PartialBounds::zero()
                    }),
                class: StructureClass::DriftYCoupled,
            }
        }
        "decoupled_linear" => {
            let a = take_param(params, &["a"], "a", 0.5)?;
            CoefficientSet {
                name: name.into(),
                d: 1,
                n: 1,
                b: zero_fn(),
                sigma: constant_fn(1.0),
                f: Arc::new(move |_, y, _, out| out[0] = a * y[0]),
                g: terminal_identity(),
                lipschitz: LipschitzData::new(a.abs(), 1.0, 0.0)?
                    .with_alpha_bar(0.0)
                    .with_partials(PartialBounds {
                        f_y: a.abs(),
                        ..PartialBounds::zero()
                    }),
                class: StructureClass::Decoupled,
            }
        }
        "pure_martingale" => {
            take_param(params, &[], "", 0.0)?;
            CoefficientSet {
                name: name.into(),
                d: 1,
                n: 1,
                b: zero_fn(),
                sigma: constant_fn(1.0),
                f: zero_fn(),
                g: terminal_identity(),
                lipschitz: LipschitzData::new(0.0, 1.0, 0.0)?
                    .with_alpha_bar(0.0)
                    .with_partials(PartialBounds::zero()),
                class: StructureClass::Decoupled,
            }
        }
        other => return Err(Error::Catalog(other.into())),
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn with(key: &str, v: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([(key.to_string(), v)])
    }

    fn custom(class: StructureClass, b: PathFn, sigma: PathFn, f: PathFn) -> CoefficientSet {
        CoefficientSet {
            name: "custom".into(),
            d: 1,
            n: 1,
            b,
            sigma,
            f,
            g: terminal_identity(),
            lipschitz: LipschitzData::new(1.0, 1.0, 1.0).unwrap(),
            class,
        }
    }

    #[test]
    fn catalog_classes() {
        assert_eq!(
            classify_structure(&builtin("linear_y_drift", &none()).unwrap()).unwrap(),
            StructureClass::DriftYCoupled
        );
        let z = builtin("zdrift_counterexample", &with("k", 1.0)).unwrap();
        assert_eq!(classify_structure(&z).unwrap(), StructureClass::General);
        assert_eq!(z.lipschitz.k1 * z.lipschitz.sigma_z_sup, 1.0);
        let m = builtin("pure_martingale", &none()).unwrap();
        assert_eq!(classify_structure(&m).unwrap(), StructureClass::Decoupled);
        let l = builtin("decoupled_linear", &with("a", 0.5)).unwrap();
        assert_eq!(classify_structure(&l).unwrap(), StructureClass::Decoupled);
    }

    #[test]
    fn unknown_name_and_param() {
        assert!(matches!(builtin("nope", &none()), Err(Error::Catalog(_))));
        assert!(matches!(
            builtin("pure_martingale", &with("k", 1.0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn probing_detects_hidden_dependence() {
        let p = custom(
            StructureClass::Decoupled,
            Arc::new(|_, y, _, out| out[0] = y[0]),
            constant_fn(1.0),
            zero_fn(),
        );
        match classify_structure(&p) {
            Err(Error::Classification { coefficient, .. }) => assert_eq!(coefficient, "b"),
            other => panic!("expected classification error, got {other:?}"),
        }
        let p = custom(
            StructureClass::SigmaXY,
            zero_fn(),
            Arc::new(|_, _, z, out| out[0] = 1.0 + 0.5 * z[0]),
            zero_fn(),
        );
        assert!(matches!(
            classify_structure(&p),
            Err(Error::Classification { coefficient, .. }) if coefficient == "sigma"
        ));
        let p = custom(
            StructureClass::Decoupled,
            zero_fn(),
            constant_fn(1.0),
            zero_fn(),
        );
        assert_eq!(classify_structure(&p).unwrap(), StructureClass::Decoupled);
        let p = custom(
            StructureClass::General,
            zero_fn(),
            Arc::new(|_, _, z, out| out[0] = z[0]),
            zero_fn(),
        );
        assert_eq!(classify_structure(&p).unwrap(), StructureClass::General);
    }

    #[test]
    fn classification_idempotent_and_seed_stable() {
        for name in CATALOG {
            let p = builtin(name, &none()).unwrap();
            let a = classify_structure(&p).unwrap();
            assert_eq!(a, classify_structure(&p).unwrap());
            for seed in [1, 2, 3] {
                assert_eq!(a, classify_structure_with_seed(&p, seed).unwrap());
            }
        }
    }

    #[test]
    fn i0_examples() {
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let zero = custom(StructureClass::Decoupled, zero_fn(), zero_fn(), zero_fn());
        assert_eq!(compute_i0(&zero, &grid).unwrap().i0_sq, 0.0);

        let unit_f = custom(StructureClass::Decoupled, zero_fn(), zero_fn(), constant_fn(1.0));
        assert!((compute_i0(&unit_f, &grid).unwrap().i0_sq - 1.0).abs() < 1e-12);

        let ramp = custom(
            StructureClass::Decoupled,
            zero_fn(),
            Arc::new(|x, _, _, out| out[0] = x.time()),
            zero_fn(),
        );
        // ∫₀¹ t² dt = 1/3; left Riemann error is about Δt/2.
        let i0 = compute_i0(&ramp, &grid).unwrap().i0_sq;
        assert!((i0 - 1.0 / 3.0).abs() < 1e-3, "{i0}");

        let nan = custom(StructureClass::Decoupled, constant_fn(f64::NAN), zero_fn(), zero_fn());
        assert!(matches!(compute_i0(&nan, &grid), Err(Error::Evaluation(_))));
    }

    #[test]
    fn catalog_lipschitz_constants_hold() {
        for name in CATALOG {
            let p = builtin(name, &none()).unwrap();
            let (c, g) = lipschitz_excess(&p, 100, 11);
            assert!(c <= 1e-12, "{name}: coefficient excess {c}");
            assert!(g <= 1e-12, "{name}: terminal excess {g}");
        }
    }

    #[test]
    fn terminal_shift_moves_g_only() {
        let p = builtin("pure_martingale", &none()).unwrap();
        let q = p.with_terminal_shift(&[0.25]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let x = PathSample::constant(grid, &[2.0]).unwrap();
        let mut out = [0.0];
        q.g_into(&x.full_view(), &mut out);
        assert_eq!(out[0], 2.25);
        assert!(p.with_terminal_shift(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn lipschitz_validation() {
        assert!(LipschitzData::new(-1.0, 1.0, 0.0).is_err());
        assert!(LipschitzData::new(1.0, 1.0, 2.0).is_err());
        let l = LipschitzData::new(2.0, 1.0, 0.5).unwrap();
        let p = l.effective_partials();
        assert_eq!((p.b_x, p.s_z), (2.0, 0.5));
    }
}
