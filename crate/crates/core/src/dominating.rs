//! Bounds for the characteristic BSDE coefficients, the dominating ODE built
//! from them, its backward integration with explosion detection, the step
//! schedule derived from the integrated trajectory, and the monotonicity
//! check for drift-coupled problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{default_eps_grid, find_local_horizon, ContractionReport};
use crate::paths::{PathSample, TimeGrid};
use crate::problems::{classify_structure, CoefficientSet, LipschitzData, StructureClass};

/// Explosion cap for the dominating trajectory.
pub const EXPLOSION_CAP: f64 = 1e12;

/// Patch-count guard for the step schedule.
pub const MAX_PATCHES: usize = 1_000_000;

/// Horizon beyond which the explosion probe gives up.
const PROBE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicBounds {
    pub a_bar: f64,
    pub b_bar: f64,
    pub c_bar: f64,
    pub d_bar: f64,
    pub f_bar: f64,
}

/// Sup-norm bounds on the coefficients `A … F` of the characteristic BSDE.
///
/// With telescoped difference quotients each partial is bounded by its
/// Lipschitz constant per component, `|β| ≤ 1` and `|P| = 1`. `α` is bounded
/// row-wise by `alpha_bar`, so `|α|_F ≤ √n·ᾱ` and `Σ|α_kl| ≤ n√n·ᾱ`.
///
/// Term by term, with `S = σ_y P` and `Σ = σ_x + Tr(σ_z α)`:
/// - `A = Tr(SSᵀ) − 8βᵀSSᵀβ`: `|A| ≤ 9|S|²`.
/// - `B = 2βᵀb_yP + 2Tr(SΣᵀ) − 16βᵀSΣᵀβ`: `|B| ≤ 2|b_yP| + 18|S||Σ|`.
/// - `C = 2Pᵀf_yP + |β|² + 2βᵀ(b_x + Tr(b_zα)) + Tr(σ_xσ_xᵀ) − 8|σ_xᵀβ|²`:
///   `|C| ≤ 2|f_yP| + 1 + 2(|b_x| + |Tr(b_zα)|) + 9|σ_x|²`.
/// - `D = 2Pᵀf_x + 2PᵀTr(f_zα)`: `|D| ≤ 2|f_x| + 2|Tr(f_zα)|`.
/// - `F = −Tr(ααᵀ)`: `|F| ≤ |α|_F²`.
pub fn bound_coefficients(
    l: &LipschitzData,
    dims: (usize, usize),
    class: StructureClass,
) -> Result<CharacteristicBounds> {
    let alpha = l.alpha_bar.ok_or_else(|| {
        Error::Parameter("alpha_bar is required to bound the characteristic coefficients".into())
    })?;
    let (_, n) = dims;
    let nf = n as f64;
    let mut pb = l.effective_partials();
    match class {
        StructureClass::Decoupled => {
            pb.b_y = 0.0;
            pb.b_z = 0.0;
            pb.s_y = 0.0;
            pb.s_z = 0.0;
        }
        StructureClass::DriftYCoupled => {
            pb.s_y = 0.0;
            pb.s_z = 0.0;
            pb.b_z = 0.0;
        }
        StructureClass::SigmaXY => pb.s_z = 0.0,
        StructureClass::General => {}
    }
    let p_factor = nf.sqrt();
    let z_alpha = nf * nf.sqrt() * alpha;
    let s = pb.s_y * p_factor;
    let sigma = pb.s_x + pb.s_z * z_alpha;
    Ok(CharacteristicBounds {
        a_bar: 9.0 * s * s,
        b_bar: 2.0 * pb.b_y * p_factor + 18.0 * s * sigma,
        c_bar: 2.0 * pb.f_y * p_factor
            + 1.0
            + 2.0 * (pb.b_x + pb.b_z * z_alpha)
            + 9.0 * pb.s_x * pb.s_x,
        d_bar: 2.0 * pb.f_x + 2.0 * pb.f_z * z_alpha,
        f_bar: nf * alpha * alpha,
    })
}

/// `ẏ = −G(y)` with `G(y) = a2·y² + a1·y + a0` and `y_T = terminal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominatingODE {
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
    pub terminal: f64,
    pub class: StructureClass,
    pub linear: bool,
}

impl DominatingODE {
    pub fn g(&self, y: f64) -> f64 {
        (self.a2 * y + self.a1) * y + self.a0
    }
}

/// Linear ODE for decoupled problems and for drift-coupled problems whose
/// monotonicity condition holds; Riccati otherwise. Fractional powers are
/// split as `h^{3/2} ≤ (h² + h)/2` and `h^{1/2} ≤ (h + 1)/2`.
pub fn build_dominating_ode(
    bounds: &CharacteristicBounds,
    l: &LipschitzData,
    class: StructureClass,
    monotone: bool,
) -> DominatingODE {
    let linear = class == StructureClass::Decoupled
        || (class == StructureClass::DriftYCoupled && monotone);
    let a1 = bounds.c_bar + bounds.b_bar / 2.0 + bounds.d_bar / 2.0;
    let a0 = bounds.f_bar + bounds.d_bar / 2.0;
    let a2 = if linear {
        0.0
    } else {
        bounds.a_bar + bounds.b_bar / 2.0
    };
    DominatingODE {
        a2,
        a1,
        a0,
        terminal: l.k1 * l.k1,
        class,
        linear,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODESolution {
    pub horizon: f64,
    /// Ascending node times of the recorded trajectory.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub exploded: bool,
    /// Elapsed backward time at explosion; `None` means no explosion.
    pub t_max: Option<f64>,
    pub k_max: Option<f64>,
}

impl ODESolution {
    /// `y(t)` by linear interpolation of the recorded trajectory.
    pub fn value_at(&self, t: f64) -> f64 {
        let (ts, ys) = (&self.times, &self.values);
        if t <= ts[0] {
            return ys[0];
        }
        let last = ts.len() - 1;
        if t >= ts[last] {
            return ys[last];
        }
        let i = ts.partition_point(|s| *s <= t) - 1;
        let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
        ys[i] + w * (ys[i + 1] - ys[i])
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v))
    }
}

fn rk4(ode: &DominatingODE, y: f64, h: f64) -> f64 {
    let k1 = ode.g(y);
    let k2 = ode.g(y + 0.5 * h * k1);
    let k3 = ode.g(y + 0.5 * h * k2);
    let k4 = ode.g(y + h * k3);
    h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
}

/// Backward RK4 from `y_T` over `[0, horizon]`, halving steps whenever one
/// step would move `y` by more than `0.1·(1 + y)`.
pub fn integrate_backward(ode: &DominatingODE, horizon: f64, n_steps: usize) -> Result<ODESolution> {
    if n_steps < 100 {
        return Err(Error::Parameter(format!(
            "integration needs at least 100 steps, got {n_steps}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Parameter(format!("invalid horizon {horizon}")));
    }
    if ode.g(ode.terminal).is_nan() {
        return Err(Error::Integration("G is NaN at the terminal value".into()));
    }
    let big = horizon / n_steps as f64;
    let min_step = big * 1e-40;
    let mut y = ode.terminal;
    let mut tau = 0.0;
    let mut taus = vec![0.0];
    let mut ys = vec![y];
    let mut h = big;
    let mut exploded = false;
    'outer: for step in 1..=n_steps {
        let target = if step == n_steps {
            horizon
        } else {
            step as f64 * big
        };
        while tau < target {
            let h_try = h.min(target - tau);
            let dy = rk4(ode, y, h_try);
            if dy.is_nan() {
                return Err(Error::Integration(format!(
                    "G evaluation produced NaN at elapsed time {tau}"
                )));
            }
            if !dy.is_finite() || dy.abs() > 0.1 * (1.0 + y.abs()) {
                if h_try <= min_step {
                    exploded = true;
                    break 'outer;
                }
                h = 0.5 * h_try;
                continue;
            }
            y += dy;
            tau = if h_try == target - tau { target } else { tau + h_try };
            if y > EXPLOSION_CAP {
                exploded = true;
                break 'outer;
            }
            h = (2.0 * h_try).min(big);
        }
        taus.push(tau);
        ys.push(y);
    }
    if exploded {
        taus.push(tau);
        ys.push(y);
    }
    let times: Vec<f64> = taus.iter().rev().map(|s| horizon - s).collect();
    let values: Vec<f64> = ys.into_iter().rev().collect();
    let k_max = if exploded {
        None
    } else {
        Some(values.iter().fold(0.0f64, |a, v| a.max(*v)).sqrt())
    };
    Ok(ODESolution {
        horizon,
        times,
        values,
        exploded,
        t_max: exploded.then_some(tau),
        k_max,
    })
}

/// Explosion time of the dominating ODE, probing horizons beyond `horizon`.
/// `None` means no explosion (structurally for linear `G`).
pub fn probe_t_max(ode: &DominatingODE, horizon: f64, n_steps: usize) -> Result<Option<f64>> {
    if ode.a2 <= 0.0 {
        return Ok(None);
    }
    let mut h = horizon.max(1.0);
    while h <= PROBE_LIMIT {
        let sol = integrate_backward(ode, h, n_steps)?;
        if sol.exploded {
            return Ok(sol.t_max);
        }
        h *= 4.0;
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchCertificate {
    pub start: f64,
    pub end: f64,
    /// Lipschitz constant of the terminal condition at `end`.
    pub k_terminal: f64,
    pub delta: f64,
    pub contraction: Option<ContractionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub horizon: f64,
    /// Patches in backward order: the first ends at the horizon.
    pub patches: Vec<PatchCertificate>,
    /// Uniform certified step for the largest Lipschitz constant.
    pub eps_bar: Option<f64>,
    pub certified: bool,
}

impl StepSchedule {
    /// Uncertified schedule of `count` equal patches.
    pub fn uniform(horizon: f64, count: usize) -> Result<Self> {
        if count == 0 || !(horizon > 0.0) {
            return Err(Error::Parameter("uniform schedule needs count >= 1 and T > 0".into()));
        }
        let len = horizon / count as f64;
        let patches = (0..count)
            .map(|i| {
                let end = horizon - i as f64 * len;
                let start = if i + 1 == count { 0.0 } else { end - len };
                PatchCertificate {
                    start,
                    end,
                    k_terminal: f64::NAN,
                    delta: len,
                    contraction: None,
                }
            })
            .collect();
        Ok(Self {
            horizon,
            patches,
            eps_bar: None,
            certified: false,
        })
    }

    /// Boundaries `T = τ₀ > τ₁ > … > τ_m = 0`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.patches.iter().map(|p| p.end).collect();
        b.push(0.0);
        b
    }
}

/// Walks back from `T`, certifying each patch with `K(τ) = √y(τ)`.
pub fn build_step_schedule(
    sol: &ODESolution,
    l: &LipschitzData,
    horizon: f64,
    eps_grid: &[f64],
) -> Result<StepSchedule> {
    if sol.exploded {
        return Err(Error::Horizon {
            horizon,
            t_max: sol.t_max.unwrap_or(0.0),
            certificate: Box::default(),
        });
    }
    if horizon > sol.horizon * (1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "trajectory covers {} but the schedule needs {horizon}",
            sol.horizon
        )));
    }
    let shift = sol.horizon - horizon;
    let y_at = |tau: f64| sol.value_at(tau + shift).max(0.0);
    let k_max = sol.max_value().max(0.0).sqrt();
    let eps_bar = find_local_horizon(&l.with_k1(k_max), eps_grid).map(|(d, _)| d);
    let mut patches = Vec::new();
    let mut tau = horizon;
    while tau > 0.0 {
        if patches.len() >= MAX_PATCHES {
            return Err(Error::Parameter(format!(
                "schedule needs more than {MAX_PATCHES} patches"
            )));
        }
        let k = y_at(tau).sqrt();
        let local = l.with_k1(k);
        let Some((delta, report)) = find_local_horizon(&local, eps_grid) else {
            return Err(Error::MaximalInterval {
                t_min_lower_bound: tau,
                product: k * l.sigma_z_sup,
                certificate: Box::default(),
            });
        };
        let mut start = tau - delta;
        if start <= 1e-12 * horizon {
            start = 0.0;
        }
        patches.push(PatchCertificate {
            start,
            end: tau,
            k_terminal: k,
            delta,
            contraction: Some(report),
        });
        tau = start;
    }
    Ok(StepSchedule {
        horizon,
        patches,
        eps_bar,
        certified: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityWitness {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// `true` means not falsified on the sample.
    pub holds: bool,
    pub samples: usize,
    pub witnesses: Vec<MonotonicityWitness>,
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_walk(rng: &mut ChaCha8Rng, grid: TimeGrid, d: usize) -> PathSample {
    let sd = grid.dt().sqrt();
    let mut v = normals(rng, d);
    for k in 1..grid.node_count() {
        for i in 0..d {
            let prev = v[(k - 1) * d + i];
            v.push(prev + sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    PathSample::new(grid, d, v).expect("finite walk")
}

/// Samples the monotonicity inequality of drift-coupled problems.
///
/// Each sample draws `θ₁, θ₂` at a random node of `grid` and a `b_y` probe
/// (a telescoped difference quotient of `b` in `y` at another random point),
/// and compares `Δbᵀ b_y Δy − Δfᵀ b_yᵀ Δx_t + Tr(Δσᵀ b_y Δz)` with
/// `Δgᵀ b_yᵀ Δx_T`.
pub fn check_monotonicity(
    p: &CoefficientSet,
    samples: usize,
    seed: u64,
    grid: &TimeGrid,
) -> Result<MonotonicityReport> {
    if p.class != StructureClass::DriftYCoupled {
        return Err(Error::Hypothesis(format!(
            "monotonicity applies to drift-coupled problems, `{}` is {}",
            p.name, p.class
        )));
    }
    let (d, n) = (p.d, p.n);
    let nn = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut witnesses = Vec::new();
    let mut holds = true;
    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
    let (mut s1, mut s2) = (vec![0.0; d * n], vec![0.0; d * n]);
    let (mut f1, mut f2) = (vec![0.0; n], vec![0.0; n]);
    let (mut g1, mut g2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..samples {
        let x1 = random_walk(&mut rng, *grid, d);
        let x2 = random_walk(&mut rng, *grid, d);
        let k = rng.random_range(0..grid.node_count());
        let (y1, y2) = (normals(&mut rng, n), normals(&mut rng, n));
        let (z1, z2) = (normals(&mut rng, nn), normals(&mut rng, nn));

        // b_y probe.
        let xp = random_walk(&mut rng, *grid, d);
        let kp = rng.random_range(0..grid.node_count());
        let (ya, yb) = (normals(&mut rng, n), normals(&mut rng, n));
        let zp = normals(&mut rng, nn);
        let vp = xp.view(kp);
        let mut by = vec![0.0; d * n];
        let mut cur = ya.clone();
        let (mut lo, mut hi) = (vec![0.0; d], vec![0.0; d]);
        for j in 0..n {
            p.b_into(&vp, &cur, &zp, &mut hi);
            let dj = ya[j] - yb[j];
            cur[j] = yb[j];
            p.b_into(&vp, &cur, &zp, &mut lo);
            if dj != 0.0 {
                for i in 0..d {
                    by[i * n + j] = (hi[i] - lo[i]) / dj;
                }
            }
        }

        let (v1, v2) = (x1.view(k), x2.view(k));
        p.b_into(&v1, &y1, &z1, &mut b1);
        p.b_into(&v2, &y2, &z2, &mut b2);
        p.sigma_into(&v1, &y1, &z1, &mut s1);
        p.sigma_into(&v2, &y2, &z2, &mut s2);
        p.f_into(&v1, &y1, &z1, &mut f1);
        p.f_into(&v2, &y2, &z2, &mut f2);
        p.g_into(&x1.full_view(), &mut g1);
        p.g_into(&x2.full_view(), &mut g2);
        let all = b1.iter().chain(&b2).chain(&s1).chain(&s2).chain(&f1).chain(&f2);
        if all.chain(&g1).chain(&g2).chain(&by).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "non-finite coefficient of `{}` during monotonicity sampling",
                p.name
            )));
        }
        let dx_t: Vec<f64> = v1.current().iter().zip(v2.current()).map(|(a, b)| a - b).collect();
        let end = grid.n_steps();
        let dx_end: Vec<f64> = x1.value(end).iter().zip(x2.value(end)).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();

        let mut lhs = 0.0;
        for i in 0..d {
            for j in 0..n {
                lhs += (b1[i] - b2[i]) * by[i * n + j] * dy[j];
                lhs -= (f1[j] - f2[j]) * by[i * n + j] * dx_t[i];
            }
        }
        // Tr(Δσᵀ b_y Δz) = Σ_{i,j,l} Δσ_{ij} (b_y)_{il}... with b_y (d×n) and Δz (n×n).
        for i in 0..d {
            for j in 0..n {
                let ds = s1[i * n + j] - s2[i * n + j];
                for l in 0..n {
                    lhs += ds * by[i * n + l] * dz[l * n + j];
                }
            }
        }
        let mut rhs = 0.0;
        for i in 0..d {
            for j in 0..n {
                rhs += (g1[j] - g2[j]) * by[i * n + j] * dx_end[i];
            }
        }
        if lhs < rhs - 1e-12 * (1.0 + lhs.abs() + rhs.abs()) {
            holds = false;
            if witnesses.len() < 10 {
                witnesses.push(MonotonicityWitness {
                    t: grid.time(k),
                    lhs,
                    rhs,
                });
            }
        }
    }
    Ok(MonotonicityReport {
        holds,
        samples,
        witnesses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaProvenance {
    Supplied,
    /// `10·K₁`, used because no bound was supplied.
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    #[default]
    Certified,
    HorizonRefused,
    MaximalIntervalRefused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximalIntervalBound {
    pub t_min_lower_bound: f64,
    pub product: f64,
}

/// Everything the wellposedness verdict rests on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HorizonCertificate {
    pub status: CertificateStatus,
    pub problem: String,
    pub class: Option<StructureClass>,
    pub horizon: f64,
    pub lipschitz: Option<LipschitzData>,
    pub alpha_bar: Option<f64>,
    pub alpha_bar_provenance: Option<AlphaProvenance>,
    pub monotonicity: Option<MonotonicityReport>,
    pub bounds: Option<CharacteristicBounds>,
    pub ode: Option<DominatingODE>,
    /// Explosion time of the dominating ODE; `None` when it never explodes.
    pub t_max: Option<f64>,
    pub k_max: Option<f64>,
    pub schedule: Option<StepSchedule>,
    pub maximal_interval: Option<MaximalIntervalBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub ode_steps: usize,
    pub monotonicity_samples: usize,
    pub seed: u64,
    pub eps_grid: Vec<f64>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            ode_steps: 2000,
            monotonicity_samples: 1000,
            seed: 0,
            eps_grid: default_eps_grid(),
        }
    }
}

/// Certificate together with the integrated dominating trajectory.
#[derive(Debug, Clone)]
pub struct Certification {
    pub certificate: HorizonCertificate,
    pub trajectory: ODESolution,
}

/// Runs the certificate chain: classification, `α` bound, monotonicity,
/// coefficient bounds, dominating ODE, integration and step schedule.
/// Refusals carry the certificate assembled so far.
pub fn certify(p: &CoefficientSet, horizon: f64, opts: &CertifyOptions) -> Result<Certification> {
    let class = classify_structure(p)?;
    let (alpha_bar, provenance) = match p.lipschitz.alpha_bar {
        Some(a) => (a, AlphaProvenance::Supplied),
        None => (10.0 * p.lipschitz.k1, AlphaProvenance::Default),
    };
    let lipschitz = p.lipschitz.with_alpha_bar(alpha_bar);
    let monotonicity = if class == StructureClass::DriftYCoupled {
        let grid = TimeGrid::new(0.0, horizon, 20)?;
        Some(check_monotonicity(p, opts.monotonicity_samples, opts.seed, &grid)?)
    } else {
        None
    };
    let monotone = monotonicity.as_ref().is_some_and(|m| m.holds);
    let bounds = bound_coefficients(&lipschitz, (p.d, p.n), class)?;
    let ode = build_dominating_ode(&bounds, &lipschitz, class, monotone);
    let trajectory = integrate_backward(&ode, horizon, opts.ode_steps)?;
    let t_max = if trajectory.exploded {
        trajectory.t_max
    } else {
        probe_t_max(&ode, horizon, opts.ode_steps)?
    };
    let mut cert = HorizonCertificate {
        status: CertificateStatus::Certified,
        problem: p.name.clone(),
        class: Some(class),
        horizon,
        lipschitz: Some(lipschitz),
        alpha_bar: Some(alpha_bar),
        alpha_bar_provenance: Some(provenance),
        monotonicity,
        bounds: Some(bounds),
        ode: Some(ode),
        t_max,
        k_max: trajectory.k_max,
        schedule: None,
        maximal_interval: None,
    };
    if trajectory.exploded {
        cert.status = CertificateStatus::HorizonRefused;
        return Err(Error::Horizon {
            horizon,
            t_max: t_max.unwrap_or(0.0),
            certificate: Box::new(cert),
        });
    }
    match build_step_schedule(&trajectory, &lipschitz, horizon, &opts.eps_grid) {
        Ok(schedule) => {
            cert.schedule = Some(schedule);
            Ok(Certification {
                certificate: cert,
                trajectory,
            })
        }
        Err(Error::MaximalInterval {
            t_min_lower_bound,
            product,
            ..
        }) => {
            cert.status = CertificateStatus::MaximalIntervalRefused;
            cert.maximal_interval = Some(MaximalIntervalBound {
                t_min_lower_bound,
                product,
            });
            Err(Error::MaximalInterval {
                t_min_lower_bound,
                product,
                certificate: Box::new(cert),
            })
        }
        Err(e) => Err(e),
    }
}
