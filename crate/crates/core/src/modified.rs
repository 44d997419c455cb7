//! The corrected free dynamics
//!
//! `[E(t) f](x) = (2it)^{-3/2} exp(i|x|^2 / 4t) W(|x|/t, |x|)[f^(|x|/(2t) .)](x/|x|)`
//!
//! on a periodic Cartesian grid, the scalar Dollard modification, the Cook residual
//! `||iH E(t) f + d/dt E(t) f||` and the intertwining defect.
//!
//! Packets are separable, `f^(omega) = R(|omega|) A(omega/|omega|)`. Consequently one
//! sphere run per radial shell, started from `A`, carries everything the shell needs:
//! the radial factor and its derivatives act as scalars.
//!
//! The branch of `(2i)^{-3/2}` is `i^{-3/2} = exp(-3 pi i / 4)`. Only `t > 0` is
//! implemented.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::potentials::{smoothstep, Potential, PotentialSpec};
use crate::propagator::{Propagator, PropagatorState, StepPolicy, Tangents};
use crate::sphere::{gauss_legendre, HarmonicCoeffs, HarmonicEvaluator};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Annular wave packet `f^(omega) = R(|omega|) exp(i T |omega|^2) A(omega/|omega|)`.
///
/// `R(s) = S(u) S(1 - u)` with `u = (s - delta1)/(delta2 - delta1)` and `S` the quintic
/// smoothstep, so `f^` vanishes outside `delta1 < |omega| < delta2`. The optional
/// `free_time` `T` realises `exp(i T H_0) f`.
#[derive(Debug, Clone, PartialEq)]
pub struct WavePacketSpec {
    pub delta1: f64,
    pub delta2: f64,
    pub angular: HarmonicCoeffs,
    pub free_time: f64,
}

impl WavePacketSpec {
    pub fn new(delta1: f64, delta2: f64, angular: HarmonicCoeffs) -> Result<Self> {
        let spec = Self { delta1, delta2, angular, free_time: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    /// Random packet with angular content up to `l_max`, only orders divisible by
    /// `stride`, the default annulus `[0.5, 1]` and unit norm.
    pub fn seeded(seed: u64, l_max: usize, stride: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ac4_e7);
        let mut a = HarmonicCoeffs::zeros(l_max);
        let s = stride.max(1) as i64;
        for l in 0..=l_max {
            for m in -(l as i64)..=l as i64 {
                if m % s == 0 {
                    a.set(l, m, Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
                }
            }
        }
        let mut spec = Self { delta1: 0.5, delta2: 1.0, angular: a, free_time: 0.0 };
        let n = spec.norm();
        spec.angular.scale(Complex64::new(1.0 / n, 0.0));
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta1 > 0.0 && self.delta2 > self.delta1 && self.delta2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "packet annulus must satisfy 0 < delta1 < delta2, got ({}, {})",
                self.delta1, self.delta2
            )));
        }
        if self.angular.norm() == 0.0 {
            return Err(Error::InvalidParameter("packet angular content is zero".into()));
        }
        Ok(())
    }

    /// The same packet advanced by the free group, `exp(i T H_0) f`.
    pub fn with_free_time(&self, free_time: f64) -> Self {
        Self { free_time: self.free_time + free_time, ..self.clone() }
    }

    /// Real bump `[R, R', R'']` at `s = |omega|`.
    pub fn profile(&self, s: f64) -> [f64; 3] {
        let w = self.delta2 - self.delta1;
        let u = (s - self.delta1) / w;
        if u <= 0.0 || u >= 1.0 {
            return [0.0; 3];
        }
        let [a0, a1, a2] = smoothstep(u);
        let [b0, b1, b2] = smoothstep(1.0 - u);
        [a0 * b0, (a1 * b0 - a0 * b1) / w, (a2 * b0 - 2.0 * a1 * b1 + a0 * b2) / (w * w)]
    }

    /// Complex radial factor `R(s) exp(i T s^2)` with its first two derivatives.
    pub fn radial(&self, s: f64) -> [Complex64; 3] {
        let [r0, r1, r2] = self.profile(s);
        let t = self.free_time;
        if t == 0.0 {
            return [r0.into(), r1.into(), r2.into()];
        }
        let e = Complex64::from_polar(1.0, t * s * s);
        let i = Complex64::i();
        let d1 = r1 + 2.0 * i * t * s * r0;
        let d2 = r2 + 4.0 * i * t * s * r1 + (2.0 * i * t - 4.0 * t * t * s * s) * r0;
        [r0 * e, d1 * e, d2 * e]
    }

    /// `||f||_{L^2} = ||f^||_{L^2}`.
    pub fn norm(&self) -> f64 {
        let (x, w) = gauss_legendre(16);
        let (a, b) = (self.delta1, self.delta2);
        let radial: f64 = x
            .iter()
            .zip(&w)
            .map(|(xi, wi)| {
                let s = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                let r = self.profile(s)[0];
                0.5 * (b - a) * wi * r * r * s * s
            })
            .sum();
        radial.sqrt() * self.angular.norm()
    }

    /// `f^(omega)`.
    pub fn eval_hat(&self, omega: [f64; 3], evaluator: &mut HarmonicEvaluator) -> Complex64 {
        let s = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
        let r = self.radial(s)[0];
        if r == ZERO {
            return ZERO;
        }
        r * evaluator.evaluate(&self.angular, omega[2] / s, omega[1].atan2(omega[0]))
    }
}

/// Periodic cube `[-L, L)^3` with `n` points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidParameter(format!("box half-width {half_width} must be positive")));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("points per axis {n} must be a power of two >= 4")));
        }
        Ok(Self { half_width, n })
    }

    /// Box just large enough for the packet support at time `t` with 20% margin.
    pub fn for_time(t: f64, delta2: f64, n: usize) -> Result<Self> {
        Self::new(1.2 * 2.0 * delta2 * t, n)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }
    /// Position of the node with flat index `idx` (`x` slowest, `z` fastest).
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let n = self.n;
        [self.coordinate(idx / (n * n)), self.coordinate((idx / n) % n), self.coordinate(idx % n)]
    }
    /// Angular wavenumber of FFT bin `i`.
    pub fn wavenumber(&self, i: usize) -> f64 {
        let j = if i < self.n / 2 { i as f64 } else { i as f64 - self.n as f64 };
        PI * j / self.half_width
    }
    /// Per-axis Nyquist wavenumber.
    pub fn nyquist(&self) -> f64 {
        PI / self.spacing()
    }
}

/// Complex field on a [`GridSpec`] at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3DField {
    grid: GridSpec,
    t: f64,
    values: Vec<Complex64>,
}

impl Grid3DField {
    pub fn zeros(grid: GridSpec, t: f64) -> Self {
        Self { grid, t, values: vec![ZERO; grid.len()] }
    }

    pub fn from_values(grid: GridSpec, t: f64, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("{} values for a {}^3 grid", values.len(), grid.n)));
        }
        Ok(Self { grid, t, values })
    }

    pub fn from_fn(grid: GridSpec, t: f64, f: impl Fn([f64; 3]) -> Complex64 + Sync) -> Self {
        let values = (0..grid.len()).into_par_iter().map(|idx| f(grid.position(idx))).collect();
        Self { grid, t, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn t(&self) -> f64 {
        self.t
    }
    pub fn set_t(&mut self, t: f64) {
        self.t = t;
    }
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// Grid `L^2` norm `(sum |v|^2 h^3)^{1/2}`.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// Grid `L^2` inner product `sum conj(a) b h^3`.
    pub fn dot(&self, other: &Self) -> Complex64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum::<Complex64>() * self.grid.cell_volume()
    }

    /// `||self - other||` on the common grid.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::Shape("fields live on different grids".into()));
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        Ok((s * self.grid.cell_volume()).sqrt())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

/// `(2it)^{-3/2} exp(i rho^2 / 4t)`.
pub fn kappa(t: f64, rho: f64) -> Complex64 {
    Complex64::from_polar((2.0 * t).powf(-1.5), rho * rho / (4.0 * t) - 0.75 * PI)
}

/// Radial shell quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellOptions {
    /// Gauss–Legendre shells across `[2 delta1 t, 2 delta2 t]`.
    pub shells: usize,
    /// Largest tolerated leave-one-out interpolation residual (relative).
    pub max_interp_residual: f64,
    /// Field evaluation doubles the shell count up to this bound while the residual is
    /// too large.
    pub max_shells: usize,
}

impl Default for ShellOptions {
    fn default() -> Self {
        Self { shells: 128, max_interp_residual: 1e-3, max_shells: 2048 }
    }
}

/// Sphere solutions on the radial shells of one time `t`.
#[derive(Debug, Clone)]
pub struct ShellSet {
    pub t: f64,
    /// Ascending shell wavenumbers `k_j = rho_j / t`.
    pub k: Vec<f64>,
    /// Quadrature weights in `k`.
    pub weights: Vec<f64>,
    /// Interaction-picture data `U_0(k_j, tau_0(l), k_j t)^{-1} W(k_j, k_j t) A`.
    pub z: Vec<HarmonicCoeffs>,
    /// Degrees up to this one use `tau_0 = 1`, higher ones `tau_0 = infinity`.
    ///
    /// Content above the packet band is produced by scattering at large radii, so measuring
    /// its free phase from infinity keeps `z` slowly varying in `k`.
    pub origin_degree: usize,
    /// Relative leave-one-out residual of the cubic interpolation in `k`.
    pub interp_residual: f64,
}

/// Per-degree phase `exp(-sign * i l(l+1) (1/tau_0 - 1/tau)/k)` of the free flow from
/// `tau_0 = 1` for `l <= origin_degree` and from `tau_0 = infinity` above.
fn free_phases(l_max: usize, origin_degree: usize, k: f64, tau: f64, sign: f64) -> Vec<Complex64> {
    (0..=l_max)
        .map(|l| {
            let start = if l <= origin_degree { 1.0 } else { 0.0 };
            let e = (start - 1.0 / tau) / k;
            Complex64::from_polar(1.0, -sign * (l * (l + 1)) as f64 * e)
        })
        .collect()
}

fn apply_degree_phases(c: &mut HarmonicCoeffs, phases: &[Complex64]) {
    let mut it = phases.iter();
    c.map_degree(|_| *it.next().expect("one phase per degree"));
}

/// Cubic Lagrange weights on 4 nodes.
fn lagrange4(xs: &[f64], x: f64) -> [f64; 4] {
    let mut w = [1.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                w[i] *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
    }
    w
}

/// Start of the 4-node stencil around `x` in the ascending `nodes`.
fn stencil(nodes: &[f64], x: f64) -> usize {
    let pos = nodes.partition_point(|v| *v < x);
    pos.saturating_sub(2).min(nodes.len() - 4)
}

/// Which modification a field evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modification {
    /// Operator-valued correction `W(|x|/t, |x|)`.
    Operator,
    /// Scalar Dollard phase `|x|^2/4t - t int_0^1 V(sx) ds`.
    Dollard,
}

/// Evaluator of `E(t)`, its Cook residual and related diagnostics for one potential.
pub struct ModifiedEvolution {
    propagator: Propagator,
    options: ShellOptions,
}

impl std::fmt::Debug for ModifiedEvolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModifiedEvolution").field("propagator", &self.propagator).field("options", &self.options).finish()
    }
}

/// Shell-wise pieces of the Cook residual at one time.
struct CookShell {
    rho: f64,
    weight: f64,
    value: f64,
}

impl ModifiedEvolution {
    pub fn new(spec: &PotentialSpec, policy: StepPolicy) -> Result<Self> {
        Ok(Self { propagator: Propagator::new(spec, policy)?, options: ShellOptions::default() })
    }

    pub fn with_potential(potential: Arc<Potential>, policy: StepPolicy) -> Result<Self> {
        Ok(Self { propagator: Propagator::with_potential(potential, policy)?, options: ShellOptions::default() })
    }

    pub fn with_options(mut self, options: ShellOptions) -> Result<Self> {
        if options.shells < 8 {
            return Err(Error::InvalidParameter(format!("at least 8 shells required, got {}", options.shells)));
        }
        self.options = options;
        Ok(self)
    }

    pub fn options(&self) -> &ShellOptions {
        &self.options
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn potential(&self) -> &Arc<Potential> {
        self.propagator.potential()
    }

    fn check(&self, t: f64, f: &WavePacketSpec) -> Result<()> {
        f.validate()?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("the modified evolution needs t > 0, got {t}")));
        }
        if 2.0 * f.delta1 * t < 1.0 {
            return Err(Error::InvalidTau(2.0 * f.delta1 * t));
        }
        Ok(())
    }

    fn shell_nodes(&self, f: &WavePacketSpec, count: usize) -> (Vec<f64>, Vec<f64>) {
        let (x, w) = gauss_legendre(count);
        let (a, b) = (2.0 * f.delta1, 2.0 * f.delta2);
        let mut kw: Vec<(f64, f64)> =
            x.iter().zip(&w).map(|(xi, wi)| (0.5 * (a + b) + 0.5 * (b - a) * xi, 0.5 * (b - a) * wi)).collect();
        kw.sort_by(|p, q| p.0.total_cmp(&q.0));
        kw.into_iter().unzip()
    }

    /// Sphere runs for every shell at time `t` with the configured shell count.
    pub fn shells(&self, t: f64, f: &WavePacketSpec) -> Result<ShellSet> {
        self.shells_with(t, f, self.options.shells)
    }

    /// Sphere runs on `count` shells at time `t`.
    pub fn shells_with(&self, t: f64, f: &WavePacketSpec, count: usize) -> Result<ShellSet> {
        self.check(t, f)?;
        let (k, weights) = self.shell_nodes(f, count);
        let a = f.angular.resized(self.propagator.policy().l_max.max(f.angular.l_max()));
        let l_max = a.l_max();
        let origin_degree = f.angular.l_max();
        let z: Vec<HarmonicCoeffs> = k
            .par_iter()
            .map(|&kj| {
                let tau = kj * t;
                let mut y = self.propagator.propagate(kj, 1.0, tau, &a)?;
                apply_degree_phases(&mut y, &free_phases(l_max, origin_degree, kj, tau, -1.0));
                Ok(y)
            })
            .collect::<Result<_>>()?;
        let interp_residual = leave_one_out(f, &k, &z);
        Ok(ShellSet { t, k, weights, z, origin_degree, interp_residual })
    }

    /// `E(t) f` on `grid`.
    pub fn eval(&self, t: f64, f: &WavePacketSpec, grid: &GridSpec) -> Result<Grid3DField> {
        self.check(t, f)?;
        check_box(t, f, grid)?;
        Ok(assemble(&self.resolved_shells(t, f)?, f, grid))
    }

    /// Shells refined by doubling until the interpolation residual is acceptable.
    pub fn resolved_shells(&self, t: f64, f: &WavePacketSpec) -> Result<ShellSet> {
        let mut count = self.options.shells;
        loop {
            let shells = self.shells_with(t, f, count)?;
            if shells.interp_residual <= self.options.max_interp_residual {
                return Ok(shells);
            }
            if 2 * count > self.options.max_shells {
                return Err(Error::ShellResolution(shells.interp_residual));
            }
            count *= 2;
        }
    }

    /// Cook residual `||iH E(t) f + d/dt E(t) f||` from the sphere derivative fields.
    pub fn cook_residual(&self, t: f64, f: &WavePacketSpec) -> Result<f64> {
        Ok(self.cook_profile(&[t], f)?[0].1)
    }

    /// [`ModifiedEvolution::cook_residual`] at several ascending times, one sphere run per
    /// shell.
    pub fn cook_profile(&self, times: &[f64], f: &WavePacketSpec) -> Result<Vec<(f64, f64)>> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        for &t in times {
            self.check(t, f)?;
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("Cook times must be strictly increasing".into()));
        }
        let (k, weights) = self.shell_nodes(f, self.options.shells);
        let a = f.angular.resized(self.propagator.policy().l_max.max(f.angular.l_max()));
        let per_shell: Vec<Vec<CookShell>> = k
            .par_iter()
            .zip(&weights)
            .map(|(&kj, &wj)| {
                let cps: Vec<f64> = times.iter().map(|t| kj * t).collect();
                let states = self.propagator.run(kj, 1.0, &a, Tangents::Second, &cps)?;
                Ok(states
                    .iter()
                    .zip(times)
                    .map(|(st, &t)| CookShell { rho: st.tau, weight: wj * t, value: self.cook_integrand(st, t, f) })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let s: f64 = per_shell.iter().map(|sh| sh[i].weight * sh[i].rho * sh[i].rho * sh[i].value).sum();
                (t, ((2.0 * t).powi(-3) * s).sqrt())
            })
            .collect())
    }

    /// `||Y_rr + (2/rho) Y_r||^2_{L^2(sphere)}` on one shell.
    fn cook_integrand(&self, st: &PropagatorState, t: f64, f: &WavePacketSpec) -> f64 {
        let rho = st.tau;
        let [r0, r1, r2] = f.radial(rho / (2.0 * t));
        let (u, ytt) = self.propagator.time_derivatives(st);
        let chi = st.chi.as_ref().expect("first tangent");
        let eta = st.eta.as_ref().expect("second tangent");
        let chi_t = self.propagator.chi_tau(st, &u).expect("first tangent");
        let c = |v: f64| Complex64::new(v, 0.0);
        let mut yr = st.y.scaled(r1 / (2.0 * t));
        yr.axpy(r0 / t, chi);
        yr.axpy(r0, &u);
        let mut yrr = eta.scaled(r0 / (t * t));
        yrr.axpy(c(2.0 / t) * r0, &chi_t);
        yrr.axpy(r0, &ytt);
        yrr.axpy(r1 / (t * t), chi);
        yrr.axpy(r1 / t, &u);
        yrr.axpy(r2 / (4.0 * t * t), &st.y);
        yrr.axpy(c(2.0 / rho), &yr);
        yrr.norm().powi(2)
    }

    /// Grid cross-check of the Cook residual: spectral `H` plus a central difference in `t`.
    pub fn cook_residual_grid(&self, t: f64, f: &WavePacketSpec, grid: &GridSpec, dt: f64) -> Result<f64> {
        if !(dt > 0.0 && dt < 0.5 * t) {
            return Err(Error::InvalidParameter(format!("time difference {dt} must lie in (0, t/2)")));
        }
        let e0 = self.eval(t, f, grid)?;
        let ep = self.eval(t + dt, f, grid)?;
        let em = self.eval(t - dt, f, grid)?;
        let h = crate::schrodinger::Hamiltonian::with_potential(self.potential().clone(), *grid)?;
        let he = h.apply(&e0);
        let i = Complex64::i();
        let s: f64 = he
            .values()
            .iter()
            .zip(ep.values().iter().zip(em.values()))
            .map(|(hv, (p, m))| (i * hv + (p - m) / (2.0 * dt)).norm_sqr())
            .sum();
        Ok((s * grid.cell_volume()).sqrt())
    }

    /// `||E(t - T) f - E(t) exp(i T H_0) f||`.
    pub fn intertwining_residual(&self, t: f64, big_t: f64, f: &WavePacketSpec, grid: &GridSpec) -> Result<f64> {
        if !(t > big_t + 1.0 && big_t >= 0.0) {
            return Err(Error::InvalidParameter(format!("intertwining needs t > T + 1 and T >= 0, got t={t}, T={big_t}")));
        }
        if big_t == 0.0 {
            return Ok(0.0);
        }
        let a = self.eval(t - big_t, f, grid)?;
        let b = self.eval(t, &f.with_free_time(big_t), grid)?;
        a.distance(&b)
    }

    /// `E(t) f` or the Dollard field, chosen by `kind`.
    pub fn eval_kind(&self, kind: Modification, t: f64, f: &WavePacketSpec, grid: &GridSpec) -> Result<Grid3DField> {
        match kind {
            Modification::Operator => self.eval(t, f, grid),
            Modification::Dollard => dollard_field(self.potential(), t, f, grid),
        }
    }
}

fn check_box(t: f64, f: &WavePacketSpec, grid: &GridSpec) -> Result<()> {
    let radius = 2.0 * f.delta2 * t;
    if grid.half_width < 1.1 * radius {
        return Err(Error::ShellOutsideBox { radius, half_width: grid.half_width });
    }
    Ok(())
}

/// Largest `|R(k_j/2)| ||z_j - p_j||` over interior shells, `p_j` the cubic through the
/// two neighbours on each side, relative to `max |R| ||A||`.
fn leave_one_out(f: &WavePacketSpec, k: &[f64], z: &[HarmonicCoeffs]) -> f64 {
    let n = k.len();
    let scale = f.angular.norm() * f.profile(0.5 * (f.delta1 + f.delta2))[0];
    let mut worst = 0.0f64;
    for j in 2..n.saturating_sub(2) {
        let idx = [j - 2, j - 1, j + 1, j + 2];
        let xs: Vec<f64> = idx.iter().map(|&i| k[i]).collect();
        let w = lagrange4(&xs, k[j]);
        let mut p = HarmonicCoeffs::zeros(z[j].l_max());
        for (wi, &i) in w.iter().zip(&idx) {
            p.axpy(Complex64::new(*wi, 0.0), &z[i]);
        }
        let r = f.profile(k[j] / 2.0)[0];
        worst = worst.max(r * p.sub(&z[j]).norm());
    }
    worst / scale
}

/// Cartesian assembly: cubic interpolation of the interaction-picture data in `k`, the
/// exact free phase and radial factor at `|x|`, exact angular synthesis at `x/|x|`.
fn assemble(shells: &ShellSet, f: &WavePacketSpec, grid: &GridSpec) -> Grid3DField {
    let t = shells.t;
    let n = grid.n;
    let l_max = shells.z[0].l_max();
    let (lo, hi) = (2.0 * f.delta1 * t, 2.0 * f.delta2 * t);
    let mut values = vec![ZERO; grid.len()];
    values.par_chunks_mut(n * n).enumerate().for_each_init(
        || (HarmonicEvaluator::new(l_max), HarmonicCoeffs::zeros(l_max)),
        |(ev, c), (ix, plane)| {
            let x = grid.coordinate(ix);
            for (jj, v) in plane.iter_mut().enumerate() {
                let y = grid.coordinate(jj / n);
                let zc = grid.coordinate(jj % n);
                let rho = (x * x + y * y + zc * zc).sqrt();
                if rho <= lo || rho >= hi {
                    continue;
                }
                let k = rho / t;
                let r = f.radial(k / 2.0)[0];
                if r == ZERO {
                    continue;
                }
                let s0 = stencil(&shells.k, k);
                let w = lagrange4(&shells.k[s0..s0 + 4], k);
                c.as_mut_slice().fill(ZERO);
                for (i, wi) in w.iter().enumerate() {
                    c.axpy(Complex64::new(*wi, 0.0), &shells.z[s0 + i]);
                }
                apply_degree_phases(c, &free_phases(l_max, shells.origin_degree, k, rho, 1.0));
                *v = kappa(t, rho) * r * ev.evaluate(c, zc / rho, y.atan2(x));
            }
        },
    );
    Grid3DField { grid: *grid, t, values }
}

/// `int_0^rho V(s, theta) ds` along the ray through `theta = (psi, phi)`.
pub fn ray_integral(potential: &Potential, rho: f64, psi: f64, phi: f64) -> f64 {
    if potential.is_zero() || rho <= 0.0 {
        return 0.0;
    }
    let mut pts = vec![0.0];
    pts.extend(potential.block_edges(0.0, rho));
    pts.push(rho);
    pts.windows(2)
        .map(|w| {
            let c = potential.radial_integral(w[0], w[1]);
            if c == 0.0 {
                0.0
            } else {
                c * potential.angular(potential.block_of(0.5 * (w[0] + w[1]))).eval(psi, phi)
            }
        })
        .sum()
}

fn dollard_field(potential: &Potential, t: f64, f: &WavePacketSpec, grid: &GridSpec) -> Result<Grid3DField> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("the modified evolution needs t > 0, got {t}")));
    }
    f.validate()?;
    check_box(t, f, grid)?;
    let n = grid.n;
    let (lo, hi) = (2.0 * f.delta1 * t, 2.0 * f.delta2 * t);
    let mut values = vec![ZERO; grid.len()];
    values.par_chunks_mut(n * n).enumerate().for_each_init(
        || HarmonicEvaluator::new(f.angular.l_max()),
        |ev, (ix, plane)| {
            let x = grid.coordinate(ix);
            for (jj, v) in plane.iter_mut().enumerate() {
                let y = grid.coordinate(jj / n);
                let zc = grid.coordinate(jj % n);
                let rho = (x * x + y * y + zc * zc).sqrt();
                if rho <= lo || rho >= hi {
                    continue;
                }
                let r = f.radial(rho / (2.0 * t))[0];
                if r == ZERO {
                    continue;
                }
                let psi = (zc / rho).clamp(-1.0, 1.0).acos();
                let phi = y.atan2(x).rem_euclid(2.0 * PI);
                let xi = -t / rho * ray_integral(potential, rho, psi, phi);
                *v = kappa(t, rho) * Complex64::from_polar(1.0, xi) * r * ev.evaluate(&f.angular, zc / rho, phi);
            }
        },
    );
    Ok(Grid3DField { grid: *grid, t, values })
}

/// `E(t) f` on `grid`.
pub fn eval_modified_free(
    t: f64,
    f: &WavePacketSpec,
    spec: &PotentialSpec,
    grid: &GridSpec,
    policy: StepPolicy,
) -> Result<Grid3DField> {
    ModifiedEvolution::new(spec, policy)?.eval(t, f, grid)
}

/// Dollard field `(2it)^{-3/2} exp(i Xi(x, t)) f^(x/2t)`,
/// `Xi = |x|^2/4t - t int_0^1 V(sx) ds`.
pub fn eval_dollard(t: f64, f: &WavePacketSpec, spec: &PotentialSpec, grid: &GridSpec) -> Result<Grid3DField> {
    dollard_field(&Potential::new(spec)?, t, f, grid)
}

/// Cook residual at `t` from the sphere derivative fields.
pub fn cook_residual(t: f64, f: &WavePacketSpec, spec: &PotentialSpec, policy: StepPolicy) -> Result<f64> {
    ModifiedEvolution::new(spec, policy)?.cook_residual(t, f)
}

/// `||E(t - T) f - E(t) exp(i T H_0) f||`.
pub fn intertwining_residual(
    t: f64,
    big_t: f64,
    f: &WavePacketSpec,
    spec: &PotentialSpec,
    grid: &GridSpec,
    policy: StepPolicy,
) -> Result<f64> {
    ModifiedEvolution::new(spec, policy)?.intertwining_residual(t, big_t, f, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_derivatives_match_differences() {
        let f = WavePacketSpec::seeded(1, 2, 1).with_free_time(0.7);
        let h = 1e-5;
        for s in [0.55, 0.7, 0.93] {
            let [r0, r1, r2] = f.radial(s);
            let p = f.radial(s + h)[0];
            let m = f.radial(s - h)[0];
            assert!(((p - m) / (2.0 * h) - r1).norm() < 1e-6);
            assert!(((p - 2.0 * r0 + m) / (h * h) - r2).norm() < 1e-3);
        }
        assert_eq!(f.profile(0.5), [0.0; 3]);
        assert_eq!(f.profile(1.2), [0.0; 3]);
    }

    #[test]
    fn seeded_packet_has_unit_norm_and_stride() {
        let f = WavePacketSpec::seeded(3, 4, 2);
        assert!((f.norm() - 1.0).abs() < 1e-12);
        assert_eq!(f.angular.get(3, 1), ZERO);
        assert_ne!(f.angular.get(4, -2), ZERO);
    }

    #[test]
    fn lagrange_reproduces_cubics() {
        let xs = [0.1, 0.4, 0.45, 0.9];
        let p = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        let w = lagrange4(&xs, 0.3);
        let v: f64 = w.iter().zip(&xs).map(|(wi, x)| wi * p(*x)).sum();
        assert!((v - p(0.3)).abs() < 1e-14);
        assert_eq!(stencil(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 0);
        assert_eq!(stencil(&[1.0, 2.0, 3.0, 4.0, 5.0], 4.5), 1);
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(10.0, 48).is_err());
        assert!(GridSpec::new(-1.0, 32).is_err());
        let g = GridSpec::new(8.0, 16).unwrap();
        assert_eq!(g.position(0), [-8.0, -8.0, -8.0]);
        assert!((g.wavenumber(8) + g.nyquist()).abs() < 1e-12);
    }

    #[test]
    fn kappa_branch() {
        let k = kappa(0.5, 0.0);
        assert!((k - Complex64::from_polar(1.0, -0.75 * PI)).norm() < 1e-15);
        assert!((k * Complex64::i().powf(1.5) - 1.0).norm() < 1e-14);
    }
}
