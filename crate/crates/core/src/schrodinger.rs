//! Split-step evolution of `d psi/dt = i H psi`, `H = -Delta + V`, on a periodic cube.
//!
//! The group is `exp(itH)`: the kinetic subflow multiplies Fourier modes by
//! `exp(i dt |omega|^2)` and the potential subflow multiplies by `exp(i dt V)`. A Strang
//! step is half potential, full kinetic, half potential; interior half steps are fused.
//!
//! `V` is sampled at `(|x|, x/|x|)`. Inside `|x| < 1` the families use their own `C^2`
//! continuation (or vanish there), which only changes the potential on a compact set.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::modified::{Grid3DField, GridSpec, Modification, ModifiedEvolution, WavePacketSpec};
use crate::potentials::{Potential, PotentialSpec};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Largest tolerated fraction of the mass in the outer layer of the box.
pub const MAX_TAIL_MASS: f64 = 1e-6;

/// Largest phase one step may impart to the occupied modes plus the potential.
pub const MAX_STEP_PHASE: f64 = std::f64::consts::FRAC_PI_4;

/// Box and time-step description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub half_width: f64,
    pub n: usize,
    pub dt: f64,
    pub t_max: f64,
}

impl BoxSpec {
    /// Desk-scale box: `L = 2.4 delta2 t_max`, 128 points, `dt = 0.2`.
    pub fn for_horizon(t_max: f64, delta2: f64) -> Self {
        Self { half_width: 2.4 * delta2 * t_max, n: 128, dt: 0.2, t_max }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.half_width, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt={} must be positive", self.dt)));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::InvalidParameter(format!("t_max={} must be positive", self.t_max)));
        }
        Ok(())
    }

    /// Whether a packet with outer radius `2 delta2 t` fits for every `t <= t_max`.
    pub fn contains(&self, delta2: f64) -> bool {
        2.0 * delta2 * self.t_max * 1.1 <= self.half_width
    }
}

/// In-place 3-D FFT on the `x`-slowest layout.
struct Fft3 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self { n, forward: p.plan_fft_forward(n), inverse: p.plan_fft_inverse(n) }
    }

    fn run(&self, v: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inverse } else { &self.forward };
        // z lines are contiguous
        v.par_chunks_mut(n * n).for_each(|plane| {
            let mut scratch = vec![ZERO; plan.get_inplace_scratch_len()];
            plan.process_with_scratch(plane, &mut scratch);
            // y lines: transpose the (y, z) plane, transform, transpose back
            transpose_square(plane, n);
            plan.process_with_scratch(plane, &mut scratch);
            transpose_square(plane, n);
        });
        // x lines: gather per y row
        let mut line = vec![ZERO; n * n];
        let mut scratch = vec![ZERO; plan.get_inplace_scratch_len()];
        for iy in 0..n {
            for ix in 0..n {
                let src = (ix * n + iy) * n;
                for iz in 0..n {
                    line[iz * n + ix] = v[src + iz];
                }
            }
            plan.process_with_scratch(&mut line, &mut scratch);
            for ix in 0..n {
                let dst = (ix * n + iy) * n;
                for iz in 0..n {
                    v[dst + iz] = line[iz * n + ix];
                }
            }
        }
        if inverse {
            let s = 1.0 / (n * n * n) as f64;
            v.par_iter_mut().for_each(|c| *c *= s);
        }
    }
}

fn transpose_square(a: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            a.swap(i * n + j, j * n + i);
        }
    }
}

/// `H = -Delta + V` on one grid, with the potential sampled once.
pub struct Hamiltonian {
    grid: GridSpec,
    potential: Arc<Potential>,
    v: Vec<f64>,
    v_sup: f64,
    omega2: Vec<f64>,
    fft: Fft3,
}

impl std::fmt::Debug for Hamiltonian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hamiltonian").field("grid", &self.grid).field("v_sup", &self.v_sup).finish()
    }
}

impl Hamiltonian {
    pub fn new(spec: &PotentialSpec, grid: GridSpec) -> Result<Self> {
        Self::with_potential(Arc::new(Potential::new(spec)?), grid)
    }

    pub fn with_potential(potential: Arc<Potential>, grid: GridSpec) -> Result<Self> {
        let v: Vec<f64> = if potential.is_zero() {
            vec![0.0; grid.len()]
        } else {
            (0..grid.len()).into_par_iter().map(|idx| potential.eval_cartesian(grid.position(idx))).collect()
        };
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("potential sample {bad}")));
        }
        let v_sup = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let omega2 = (0..grid.n).map(|i| grid.wavenumber(i).powi(2)).collect();
        Ok(Self { grid, potential, v, v_sup, omega2, fft: Fft3::new(grid.n) })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn potential(&self) -> &Arc<Potential> {
        &self.potential
    }
    /// Samples of `V` at the grid nodes.
    pub fn potential_values(&self) -> &[f64] {
        &self.v
    }
    pub fn potential_sup(&self) -> f64 {
        self.v_sup
    }

    fn check_field(&self, field: &Grid3DField) -> Result<()> {
        if *field.grid() != self.grid {
            return Err(Error::Shape("field grid differs from the Hamiltonian grid".into()));
        }
        Ok(())
    }

    /// `H psi` with the spectral Laplacian.
    pub fn apply(&self, field: &Grid3DField) -> Grid3DField {
        let n = self.grid.n;
        let mut hat = field.values().to_vec();
        self.fft.run(&mut hat, false);
        let w2 = &self.omega2;
        hat.par_chunks_mut(n * n).enumerate().for_each(|(ix, plane)| {
            for (j, c) in plane.iter_mut().enumerate() {
                *c *= w2[ix] + w2[j / n] + w2[j % n];
            }
        });
        self.fft.run(&mut hat, true);
        for ((h, v), p) in hat.iter_mut().zip(&self.v).zip(field.values()) {
            *h += *v * p;
        }
        Grid3DField::from_values(self.grid, field.t(), hat).expect("same grid")
    }

    /// `<psi, H psi>` (real part).
    pub fn energy(&self, field: &Grid3DField) -> f64 {
        field.dot(&self.apply(field)).re
    }

    /// Fraction of the mass within `L/16` of the box faces.
    pub fn tail_mass(&self, field: &Grid3DField) -> f64 {
        let g = &self.grid;
        let edge = g.half_width * (1.0 - 1.0 / 16.0);
        let n = g.n;
        let outer = |i: usize| g.coordinate(i).abs() >= edge;
        let mut tail = 0.0;
        let mut total = 0.0;
        for (idx, v) in field.values().iter().enumerate() {
            let m = v.norm_sqr();
            total += m;
            if outer(idx / (n * n)) || outer((idx / n) % n) || outer(idx % n) {
                tail += m;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }

    /// Smallest `|omega|` outside which `field` carries less than [`MAX_TAIL_MASS`] of its mass.
    pub fn spectral_radius(&self, field: &Grid3DField) -> f64 {
        self.spectral_radius_at(field, MAX_TAIL_MASS)
    }

    /// Smallest `|omega|` outside which `field` carries less than `fraction` of its mass.
    pub fn spectral_radius_at(&self, field: &Grid3DField, fraction: f64) -> f64 {
        let n = self.grid.n;
        let mut hat = field.values().to_vec();
        self.fft.run(&mut hat, false);
        let mut shells: Vec<(f64, f64)> = hat
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let w2 = self.omega2[idx / (n * n)] + self.omega2[(idx / n) % n] + self.omega2[idx % n];
                (w2, c.norm_sqr())
            })
            .collect();
        let total: f64 = shells.iter().map(|s| s.1).sum();
        if total == 0.0 {
            return 0.0;
        }
        shells.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tail = 0.0;
        for (w2, m) in shells {
            tail += m;
            if tail > fraction * total {
                return w2.sqrt();
            }
        }
        0.0
    }

    /// Phase one step of size `dt` gives a mode of wavenumber `omega` plus the largest
    /// potential phase.
    pub fn step_phase(&self, dt: f64, omega: f64) -> f64 {
        dt.abs() * (omega * omega + self.v_sup)
    }

    /// `exp(i s H) psi` by `ceil(|s|/dt)` Strang steps (`s` may be negative).
    pub fn evolve(&self, field: &Grid3DField, duration: f64, dt: f64) -> Result<Grid3DField> {
        Ok(self.evolve_checkpoints(field, &[duration], dt)?.pop().expect("one checkpoint"))
    }

    /// Snapshots of `exp(i s H) psi` at monotone durations `s_1, s_2, ...` of one sign.
    pub fn evolve_checkpoints(&self, field: &Grid3DField, durations: &[f64], dt: f64) -> Result<Vec<Grid3DField>> {
        self.check_field(field)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt={dt} must be positive")));
        }
        let phase = self.step_phase(dt, self.spectral_radius(field));
        if phase > MAX_STEP_PHASE {
            return Err(Error::Cfl { phase });
        }
        let forward = durations.last().is_none_or(|d| *d >= 0.0);
        let monotone = std::iter::once(0.0).chain(durations.iter().copied()).collect::<Vec<_>>().windows(2).all(|w| {
            if forward {
                w[1] >= w[0]
            } else {
                w[1] <= w[0]
            }
        });
        if !monotone {
            return Err(Error::InvalidParameter("durations must be monotone and of one sign".into()));
        }
        let n = self.grid.n;
        let mut psi = field.values().to_vec();
        let mut out = Vec::with_capacity(durations.len());
        let mut elapsed = 0.0;
        for &target in durations {
            let span = target - elapsed;
            let steps = (span.abs() / dt - 1e-9).ceil().max(0.0) as usize;
            if steps > 0 {
                let h = span / steps as f64;
                let half: Vec<Complex64> = self.v.iter().map(|v| Complex64::from_polar(1.0, 0.5 * h * v)).collect();
                let full: Vec<Complex64> = half.iter().map(|c| c * c).collect();
                let kin: Vec<Complex64> = self.omega2.iter().map(|w| Complex64::from_polar(1.0, h * w)).collect();
                mul_in_place(&mut psi, &half);
                for s in 0..steps {
                    self.fft.run(&mut psi, false);
                    psi.par_chunks_mut(n * n).enumerate().for_each(|(ix, plane)| {
                        for (j, c) in plane.iter_mut().enumerate() {
                            *c *= kin[ix] * kin[j / n] * kin[j % n];
                        }
                    });
                    self.fft.run(&mut psi, true);
                    mul_in_place(&mut psi, if s + 1 == steps { &half } else { &full });
                    if s % 16 == 15 || s + 1 == steps {
                        let snap = Grid3DField::from_values(self.grid, 0.0, std::mem::take(&mut psi))?;
                        let tail = self.tail_mass(&snap);
                        psi = snap.into_values();
                        if tail > MAX_TAIL_MASS {
                            return Err(Error::BoxEscape(tail));
                        }
                    }
                }
            }
            elapsed = target;
            if let Some(bad) = psi.iter().find(|c| !(c.re.is_finite() && c.im.is_finite())) {
                return Err(Error::NonFinite(format!("field value {bad}")));
            }
            out.push(Grid3DField::from_values(self.grid, field.t() + target, psi.clone())?);
        }
        Ok(out)
    }
}

fn mul_in_place(psi: &mut [Complex64], factor: &[Complex64]) {
    psi.par_iter_mut().zip(factor.par_iter()).for_each(|(p, f)| *p *= f);
}

/// `exp(i (t_to - t_from) H) field` for a spec and box.
pub fn evolve(field: &Grid3DField, spec: &PotentialSpec, t_from: f64, t_to: f64, bx: &BoxSpec) -> Result<Grid3DField> {
    bx.validate()?;
    let h = Hamiltonian::new(spec, bx.grid()?)?;
    check_potential_step(&h, bx)?;
    let mut out = h.evolve(field, t_to - t_from, bx.dt)?;
    out.set_t(t_to);
    Ok(out)
}

/// `H field` for a spec.
pub fn apply_hamiltonian(field: &Grid3DField, spec: &PotentialSpec) -> Result<Grid3DField> {
    Ok(Hamiltonian::new(spec, *field.grid())?.apply(field))
}

fn check_potential_step(h: &Hamiltonian, bx: &BoxSpec) -> Result<()> {
    if bx.dt * h.potential_sup() > 0.1 {
        return Err(Error::InvalidParameter(format!(
            "dt * sup|V| = {:.3e} exceeds 0.1",
            bx.dt * h.potential_sup()
        )));
    }
    Ok(())
}

/// `D(t_i) = ||exp(i t_i H) E(t_i) f - exp(i t_N H) E(t_N) f||`, evaluated through unitarity as
/// `||E(t_i) f - exp(i (t_N - t_i) H) E(t_N) f||` with one evolution from `t_N`.
pub fn wave_operator_cauchy(
    evolution: &ModifiedEvolution,
    kind: Modification,
    f: &WavePacketSpec,
    bx: &BoxSpec,
    checkpoints: &[f64],
) -> Result<Vec<(f64, f64)>> {
    bx.validate()?;
    if checkpoints.len() < 2 || checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("need at least two strictly increasing checkpoints".into()));
    }
    let t_n = *checkpoints.last().expect("non-empty");
    if t_n > bx.t_max || !bx.contains(f.delta2) {
        return Err(Error::ShellOutsideBox { radius: 2.0 * f.delta2 * t_n, half_width: bx.half_width });
    }
    let grid = bx.grid()?;
    let h = Hamiltonian::with_potential(evolution.potential().clone(), grid)?;
    check_potential_step(&h, bx)?;
    let last = evolution.eval_kind(kind, t_n, f, &grid)?;
    let durations: Vec<f64> = checkpoints.iter().rev().skip(1).map(|t| t_n - t).collect();
    let evolved = h.evolve_checkpoints(&last, &durations, bx.dt)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    for (t, psi) in checkpoints.iter().rev().skip(1).zip(&evolved) {
        let e = evolution.eval_kind(kind, *t, f, &grid)?;
        out.push((*t, e.distance(psi)?));
    }
    out.reverse();
    out.push((t_n, 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::Family;

    fn gaussian(grid: GridSpec, w: f64, kx: f64) -> Grid3DField {
        Grid3DField::from_fn(grid, 0.0, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            Complex64::from_polar((-r2 / (w * w)).exp(), kx * x[0])
        })
    }

    #[test]
    fn fft_roundtrip() {
        let g = GridSpec::new(5.0, 16).unwrap();
        let f = gaussian(g, 2.0, 0.7);
        let mut v = f.values().to_vec();
        let fft = Fft3::new(16);
        fft.run(&mut v, false);
        fft.run(&mut v, true);
        let err = v.iter().zip(f.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-13);
    }

    #[test]
    fn plane_wave_is_eigenfunction_for_constant_potential() {
        let g = GridSpec::new(4.0, 16).unwrap();
        let w = [g.wavenumber(2), g.wavenumber(15), g.wavenumber(5)];
        let f = Grid3DField::from_fn(g, 0.0, |x| Complex64::from_polar(1.0, w[0] * x[0] + w[1] * x[1] + w[2] * x[2]));
        let h = Hamiltonian::new(&PotentialSpec::zero(), g).unwrap();
        let hf = h.apply(&f);
        let e = w.iter().map(|v| v * v).sum::<f64>();
        for (a, b) in hf.values().iter().zip(f.values()) {
            assert!((a - e * b).norm() < 1e-10);
        }
    }

    #[test]
    fn free_evolution_matches_gaussian_solution() {
        let g = GridSpec::new(12.0, 64).unwrap();
        let f = gaussian(g, 2.0, 0.0);
        let h = Hamiltonian::new(&PotentialSpec::zero(), g).unwrap();
        let t = 0.5;
        let a = h.evolve(&f, t, 0.01).unwrap();
        let b = h.evolve(&f, t, 0.05).unwrap();
        assert!(a.distance(&b).unwrap() < 1e-10);
        // psi_t = -i Delta psi keeps a Gaussian Gaussian: w^2 -> w^2 - 4it
        let w2 = Complex64::new(4.0, -4.0 * t);
        let amp = (Complex64::new(4.0, 0.0) / w2).powf(1.5);
        let exact = Grid3DField::from_fn(g, t, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            amp * (-r2 / w2).exp()
        });
        assert!(a.distance(&exact).unwrap() < 1e-10 * f.norm(), "{}", a.distance(&exact).unwrap());
    }

    #[test]
    fn cfl_and_escape_are_reported() {
        let g = GridSpec::new(4.0, 16).unwrap();
        let h = Hamiltonian::new(&PotentialSpec::zero(), g).unwrap();
        let f = gaussian(g, 1.0, 0.0);
        assert!(matches!(h.evolve(&f, 1.0, 0.5), Err(Error::Cfl { .. })));
        assert!(matches!(h.evolve(&f, 4.0, 0.01), Err(Error::BoxEscape(_))));
    }

    #[test]
    fn potential_is_sampled_at_nodes() {
        let spec = PotentialSpec::new(Family::SmoothAngle).with_gamma(0.7);
        let g = GridSpec::new(6.0, 8).unwrap();
        let h = Hamiltonian::new(&spec, g).unwrap();
        let p = Potential::new(&spec).unwrap();
        for idx in [0usize, 77, 300, 511] {
            assert_eq!(h.potential_values()[idx], p.eval_cartesian(g.position(idx)));
        }
    }
}
