//! Potential families `V(tau, theta)` and a numerical audit of their decay bounds.
//!
//! Every family is separable on each dyadic block `[2^n, 2^{n+1})`:
//! `V(tau, theta) = amplitude * r(tau) * A_n(theta)` with a fixed real angular factor
//! `A_n`. Families without block structure use a single angular factor for all `tau`.
//! The propagator relies on this structure to integrate the potential exactly in `tau`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sphere::{coeff_count, lm_index, HarmonicCoeffs, HarmonicEvaluator, SphereGrid, SphericalField};
use crate::{Error, Result};

/// Highest dyadic block index with precomputed angular data (`tau < 2^MAX_BLOCK`).
pub const MAX_BLOCK: u32 = 40;

/// Potential family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// `V = 0`.
    Zero,
    /// `V = C v(tau)`, angle independent.
    RadialOnly,
    /// `V = C tau^{-1-gamma} h(theta)`, integrable in `tau`.
    L1Decay,
    /// `V = C tau^{-gamma} h(theta)` with a fixed smooth low-degree `h`.
    SmoothAngle,
    /// `V = C v(tau) sin(min(2^n, L_pot) phi) chi(psi)` on block `n`.
    ExampleDyadic,
    /// `V = C v(tau) h_n(theta)` with seeded random band-limited `h_n` per block.
    HarmonicSeries,
    /// `V = tau^{-2} B Q` for an inner family `Q`.
    OscillatoryBq,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Zero,
        Family::RadialOnly,
        Family::L1Decay,
        Family::SmoothAngle,
        Family::ExampleDyadic,
        Family::HarmonicSeries,
        Family::OscillatoryBq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Zero => "zero",
            Family::RadialOnly => "radial_only",
            Family::L1Decay => "l1_decay",
            Family::SmoothAngle => "smooth_angle",
            Family::ExampleDyadic => "example_dyadic",
            Family::HarmonicSeries => "harmonic_series",
            Family::OscillatoryBq => "oscillatory_bq",
        }
    }

    /// Families whose radial factor is the dyadic envelope `v(tau)`.
    pub fn is_dyadic(self) -> bool {
        matches!(self, Family::RadialOnly | Family::ExampleDyadic | Family::HarmonicSeries)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unsupported potential family '{s}'")))
    }
}

/// Declarative description of a potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    pub family: Family,
    /// Decay exponent, required in `(1/2, 1)` for the decaying families.
    pub gamma: f64,
    /// Overall constant `C`.
    pub amplitude: f64,
    /// Colatitude cutoff of `chi(psi)`.
    pub delta: f64,
    /// Cap on the angular frequency / band limit of the angular factors.
    pub l_pot: usize,
    /// Seed for randomized angular data.
    pub seed: u64,
    /// First dyadic block on which the envelope `v` is switched on.
    pub first_block: u32,
    /// Inner family `Q` of [`Family::OscillatoryBq`].
    pub inner: Option<Box<PotentialSpec>>,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self {
            family: Family::ExampleDyadic,
            gamma: 0.6,
            amplitude: 1.0,
            delta: 0.3,
            l_pot: 32,
            seed: 0,
            first_block: 4,
            inner: None,
        }
    }
}

impl PotentialSpec {
    pub fn new(family: Family) -> Self {
        Self { family, ..Self::default() }
    }

    pub fn zero() -> Self {
        Self { amplitude: 0.0, ..Self::new(Family::Zero) }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_l_pot(mut self, l_pot: usize) -> Self {
        self.l_pot = l_pot;
        self
    }

    /// Parameter checks, including `1/2 < gamma < 1` for the decaying families.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.family != Family::Zero && self.family != Family::OscillatoryBq && !(self.gamma > 0.5 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma={} violates the decay constraint 1/2 < gamma < 1 for family {}",
                self.gamma, self.family
            )));
        }
        if let Some(inner) = &self.inner {
            inner.validate()?;
        }
        Ok(())
    }

    /// Checks that do not involve the decay exponent.
    fn validate_structure(&self) -> Result<()> {
        if !self.amplitude.is_finite() || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter("non-finite gamma or amplitude".into()));
        }
        if !(self.delta > 0.0 && 2.0 * self.delta < PI / 2.0) {
            return Err(Error::InvalidParameter(format!("delta={} must lie in (0, pi/4)", self.delta)));
        }
        if self.family.is_dyadic() && !(2..MAX_BLOCK).contains(&self.first_block) {
            return Err(Error::InvalidParameter(format!("first_block={} must lie in [2, {MAX_BLOCK})", self.first_block)));
        }
        if self.l_pot == 0 && matches!(self.family, Family::ExampleDyadic | Family::HarmonicSeries) {
            return Err(Error::InvalidParameter("l_pot must be positive".into()));
        }
        match (self.family, &self.inner) {
            (Family::OscillatoryBq, None) => Err(Error::InvalidParameter("oscillatory_bq needs an inner spec".into())),
            (Family::OscillatoryBq, Some(q)) if q.family == Family::OscillatoryBq => {
                Err(Error::InvalidParameter("oscillatory_bq cannot be nested".into()))
            }
            (Family::OscillatoryBq, Some(q)) => q.validate_structure(),
            (_, Some(_)) => Err(Error::InvalidParameter(format!("family {} takes no inner spec", self.family))),
            _ => Ok(()),
        }
    }

    /// For [`Family::OscillatoryBq`]: whether `gamma > 2/3`, the range where the full
    /// propagator is known to converge. `None` for other families.
    pub fn exceeds_two_thirds(&self) -> Option<bool> {
        (self.family == Family::OscillatoryBq).then(|| self.effective_gamma() > 2.0 / 3.0)
    }

    /// The decay exponent of the inner family for `OscillatoryBq`, else `gamma`.
    pub fn effective_gamma(&self) -> f64 {
        match (&self.family, &self.inner) {
            (Family::OscillatoryBq, Some(q)) => q.gamma,
            _ => self.gamma,
        }
    }
}

/// `V = tau^{-2} B Q`: wraps `qspec` as the inner family.
pub fn make_oscillatory_bq(qspec: PotentialSpec) -> Result<PotentialSpec> {
    qspec.validate_structure()?;
    if qspec.family == Family::OscillatoryBq {
        return Err(Error::InvalidParameter("oscillatory_bq cannot be nested".into()));
    }
    Ok(PotentialSpec {
        family: Family::OscillatoryBq,
        gamma: qspec.gamma,
        amplitude: 1.0,
        delta: qspec.delta,
        l_pot: qspec.l_pot,
        seed: qspec.seed,
        first_block: qspec.first_block,
        inner: Some(Box::new(qspec)),
    })
}

/// Quintic smoothstep `s(u) = u^3 (10 - 15u + 6u^2)` clamped to `[0, 1]`, with its
/// first two derivatives.
pub fn smoothstep(u: f64) -> [f64; 3] {
    if u <= 0.0 {
        [0.0, 0.0, 0.0]
    } else if u >= 1.0 {
        [1.0, 0.0, 0.0]
    } else {
        let u2 = u * u;
        [
            u2 * u * (10.0 - 15.0 * u + 6.0 * u2),
            30.0 * u2 * (1.0 - u) * (1.0 - u),
            60.0 * u * (1.0 - u) * (1.0 - 2.0 * u),
        ]
    }
}

/// Window on the dyadic block `[a, 2a)` and its derivatives: zero on `[a, a+1]` and
/// `[2a-1, 2a)`, rising to 1 at the centre `1.5 a` and falling back symmetrically.
fn dyadic_window(tau: f64, first_block: u32) -> [f64; 3] {
    if tau < 1.0 {
        return [0.0; 3];
    }
    let n = tau.log2().floor() as i32;
    if n < first_block as i32 {
        return [0.0; 3];
    }
    let a = (2.0f64).powi(n);
    let rho = (a - 2.0) / 2.0;
    let centre = 1.5 * a;
    if tau <= centre {
        let [s, ds, d2s] = smoothstep((tau - a - 1.0) / rho);
        [s, ds / rho, d2s / (rho * rho)]
    } else {
        let [s, ds, d2s] = smoothstep((2.0 * a - 1.0 - tau) / rho);
        [s, -ds / rho, d2s / (rho * rho)]
    }
}

/// Dyadic envelope `v(tau) = tau^{-gamma} w(tau)` with the default first block.
pub fn radial_envelope(gamma: f64, tau: f64) -> f64 {
    radial_envelope_derivatives(gamma, PotentialSpec::default().first_block, tau)[0]
}

/// `[v, v', v'']` for the dyadic envelope switched on from block `first_block`.
pub fn radial_envelope_derivatives(gamma: f64, first_block: u32, tau: f64) -> [f64; 3] {
    power_times_window(gamma, tau, dyadic_window(tau, first_block))
}

fn power_times_window(p: f64, tau: f64, w: [f64; 3]) -> [f64; 3] {
    if w == [0.0; 3] {
        return w;
    }
    let g = tau.powf(-p);
    let g1 = -p * g / tau;
    let g2 = p * (p + 1.0) * g / (tau * tau);
    [g * w[0], g1 * w[0] + g * w[1], g2 * w[0] + 2.0 * g1 * w[1] + g * w[2]]
}

/// Colatitude cutoff `chi(psi)` and derivatives: 0 on `[0, delta]`, 1 on
/// `[2 delta, pi - 2 delta]`, quintic smoothstep in between, symmetric about the equator.
pub fn chi_cutoff(delta: f64, psi: f64) -> [f64; 3] {
    if psi <= PI / 2.0 {
        let [s, ds, d2s] = smoothstep((psi - delta) / delta);
        [s, ds / delta, d2s / (delta * delta)]
    } else {
        let [s, ds, d2s] = smoothstep((PI - psi - delta) / delta);
        [s, -ds / delta, d2s / (delta * delta)]
    }
}

/// Real angular factor of one block.
#[derive(Debug, Clone)]
pub enum Angular {
    Zero,
    Constant(f64),
    /// Real band-limited field given by its harmonic coefficients.
    Field(HarmonicCoeffs),
    /// `sin(m phi) chi(psi)`, or `B` applied to it when `apply_b` is set.
    SinChi { m: usize, delta: f64, apply_b: bool },
}

thread_local! {
    static EVALUATOR: RefCell<Option<HarmonicEvaluator>> = const { RefCell::new(None) };
}

impl Angular {
    pub fn is_zero(&self) -> bool {
        match self {
            Angular::Zero => true,
            Angular::Constant(c) => *c == 0.0,
            Angular::Field(c) => c.as_slice().iter().all(|v| *v == Complex64::new(0.0, 0.0)),
            Angular::SinChi { m, .. } => *m == 0,
        }
    }

    /// Constant angular factors commute with everything on the sphere.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Angular::Zero => Some(0.0),
            Angular::Constant(c) => Some(*c),
            Angular::Field(c) if c.as_slice()[1..].iter().all(|v| v.norm() == 0.0) => {
                Some(c.as_slice()[0].re / (4.0 * PI).sqrt())
            }
            Angular::SinChi { m: 0, .. } => Some(0.0),
            _ => None,
        }
    }

    /// Rough angular band needed to resolve products with this factor.
    pub fn band_estimate(&self) -> usize {
        match self {
            Angular::Zero | Angular::Constant(_) => 0,
            Angular::Field(c) => c.l_max(),
            Angular::SinChi { m, delta, .. } => m + (4.0 * PI / delta).ceil() as usize,
        }
    }

    /// Value at colatitude `psi`, longitude `phi`.
    pub fn eval(&self, psi: f64, phi: f64) -> f64 {
        match self {
            Angular::Zero => 0.0,
            Angular::Constant(c) => *c,
            Angular::Field(coeffs) => EVALUATOR.with(|cell| {
                let mut slot = cell.borrow_mut();
                if slot.as_ref().is_none_or(|e| e.l_max() < coeffs.l_max()) {
                    *slot = Some(HarmonicEvaluator::new(coeffs.l_max()));
                }
                slot.as_mut().unwrap().evaluate(coeffs, psi.cos(), phi).re
            }),
            Angular::SinChi { m, delta, apply_b } => {
                let [c0, c1, c2] = chi_cutoff(*delta, psi);
                if c0 == 0.0 && c1 == 0.0 && c2 == 0.0 {
                    return 0.0;
                }
                let mf = *m as f64;
                let s = (mf * phi).sin();
                if *apply_b {
                    let sp = psi.sin();
                    -(c2 + psi.cos() / sp * c1 - mf * mf * c0 / (sp * sp)) * s
                } else {
                    c0 * s
                }
            }
        }
    }

    /// `B` applied to this factor.
    pub fn apply_b(&self) -> Angular {
        match self {
            Angular::Zero | Angular::Constant(_) => Angular::Zero,
            Angular::Field(c) => {
                let mut out = c.clone();
                out.map_degree(|l| Complex64::new((l * (l + 1)) as f64, 0.0));
                Angular::Field(out)
            }
            Angular::SinChi { m, delta, apply_b: false } => Angular::SinChi { m: *m, delta: *delta, apply_b: true },
            Angular::SinChi { apply_b: true, .. } => panic!("B applied twice to a cutoff factor"),
        }
    }
}

/// Radial factor `r(tau)`.
#[derive(Debug, Clone)]
enum Radial {
    Zero,
    /// `tau^{-p} w(tau)` with the dyadic window.
    Dyadic { p: f64, first_block: u32 },
    /// `tau^{-p}` for `tau >= 1`, a quintic `s^3 (c0 + c1 s + c2 s^2)` below 1.
    Power { p: f64, below: [f64; 3] },
}

impl Radial {
    fn power(p: f64) -> Self {
        // match value, first and second derivative of tau^{-p} at tau = 1
        let (v, d1, d2) = (1.0, -p, p * (p + 1.0));
        // rows: s^3, s^4, s^5 evaluated (value, d/ds, d2/ds2) at s = 1
        let m = [[1.0, 1.0, 1.0], [3.0, 4.0, 5.0], [6.0, 12.0, 20.0]];
        let rhs = [v, d1, d2];
        Radial::Power { p, below: solve3(m, rhs) }
    }

    fn eval(&self, tau: f64) -> [f64; 3] {
        match *self {
            Radial::Zero => [0.0; 3],
            Radial::Dyadic { p, first_block } => power_times_window(p, tau, dyadic_window(tau, first_block)),
            Radial::Power { p, below } => {
                if tau >= 1.0 {
                    let g = tau.powf(-p);
                    [g, -p * g / tau, p * (p + 1.0) * g / (tau * tau)]
                } else if tau <= 0.0 {
                    [0.0; 3]
                } else {
                    let s = tau;
                    let [a, b, c] = below;
                    let s2 = s * s;
                    [
                        s2 * s * (a + b * s + c * s2),
                        s2 * (3.0 * a + 4.0 * b * s + 5.0 * c * s2),
                        s * (6.0 * a + 12.0 * b * s + 20.0 * c * s2),
                    ]
                }
            }
        }
    }

    /// Points where `r` is only finitely smooth, inside `(lo, hi)`.
    fn knots(&self, lo: f64, hi: f64, out: &mut Vec<f64>) {
        match *self {
            Radial::Zero => {}
            Radial::Power { .. } => {
                if lo < 1.0 && 1.0 < hi {
                    out.push(1.0);
                }
            }
            Radial::Dyadic { first_block, .. } => {
                let n_lo = lo.max(1.0).log2().floor() as i32;
                let n_hi = hi.max(1.0).log2().ceil() as i32;
                for n in n_lo.max(first_block as i32)..=n_hi {
                    let a = (2.0f64).powi(n);
                    for x in [a, a + 1.0, 1.5 * a, 2.0 * a - 1.0] {
                        if lo < x && x < hi {
                            out.push(x);
                        }
                    }
                }
            }
        }
    }
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> [f64; 3] {
    // m[i] holds the coefficients of equation i
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let mut mj = m;
        for i in 0..3 {
            mj[i][j] = rhs[i];
        }
        *o = det(mj) / d;
    }
    out
}

const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

fn gl8(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    GL8_NODES.iter().zip(&GL8_WEIGHTS).map(|(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

/// A constructed potential: radial profile plus per-block angular factors.
#[derive(Debug, Clone)]
pub struct Potential {
    spec: PotentialSpec,
    amplitude: f64,
    radial: Radial,
    dyadic: bool,
    blocks: Arc<Vec<Angular>>,
}

impl Potential {
    /// Builds the potential; `gamma` is not range-checked so that deliberately
    /// non-conforming fixtures can be audited.
    pub fn new(spec: &PotentialSpec) -> Result<Self> {
        spec.validate_structure()?;
        let (radial, dyadic, blocks, amplitude) = build_parts(spec)?;
        Ok(Self { spec: spec.clone(), amplitude, radial, dyadic, blocks: Arc::new(blocks) })
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    /// True when the potential vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0 || matches!(self.radial, Radial::Zero) || self.blocks.iter().all(Angular::is_zero)
    }

    /// Block index holding `tau`; blocks are `[2^n, 2^{n+1})`, and a single block 0
    /// for families without dyadic structure.
    pub fn block_of(&self, tau: f64) -> usize {
        if self.dyadic && tau >= 1.0 {
            (tau.log2().floor() as usize).min(MAX_BLOCK as usize - 1)
        } else {
            0
        }
    }

    /// Block edges strictly inside `(lo, hi)`, ascending.
    pub fn block_edges(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if self.dyadic {
            let mut e = 2.0;
            while e < hi && e <= (2.0f64).powi(MAX_BLOCK as i32 - 1) {
                if e > lo {
                    out.push(e);
                }
                e *= 2.0;
            }
        }
        out
    }

    /// Angular factor of block `n` (without the amplitude).
    pub fn angular(&self, block: usize) -> &Angular {
        &self.blocks[block.min(self.blocks.len() - 1)]
    }

    /// Largest angular band over all blocks.
    pub fn max_band(&self) -> usize {
        self.blocks.iter().map(Angular::band_estimate).max().unwrap_or(0)
    }

    /// `amplitude * [r, r', r'']`.
    pub fn radial(&self, tau: f64) -> [f64; 3] {
        let [r0, r1, r2] = self.radial.eval(tau);
        [self.amplitude * r0, self.amplitude * r1, self.amplitude * r2]
    }

    /// `amplitude * int_a^b r(s) ds` (oriented) by piecewise 8-point Gauss–Legendre.
    pub fn radial_integral(&self, a: f64, b: f64) -> f64 {
        if a == b || self.amplitude == 0.0 {
            return 0.0;
        }
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let mut pts = vec![lo];
        self.radial.knots(lo, hi, &mut pts);
        pts.push(hi);
        pts.sort_by(f64::total_cmp);
        let f = |s: f64| self.radial.eval(s)[0];
        let total: f64 = pts.windows(2).map(|w| gl8(f, w[0], w[1])).sum();
        sign * self.amplitude * total
    }

    /// `V(tau, psi, phi)`.
    pub fn eval(&self, tau: f64, psi: f64, phi: f64) -> f64 {
        let r = self.radial(tau)[0];
        if r == 0.0 {
            return 0.0;
        }
        r * self.angular(self.block_of(tau)).eval(psi, phi)
    }

    /// `V` at a point of `R^3` with `tau = |x|`.
    pub fn eval_cartesian(&self, x: [f64; 3]) -> f64 {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let rad = self.radial(r)[0];
        if rad == 0.0 {
            return 0.0;
        }
        let psi = (x[2] / r).clamp(-1.0, 1.0).acos();
        let phi = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
        rad * self.angular(self.block_of(r)).eval(psi, phi)
    }

    /// Real samples of `V(tau, .)` on the nodes of `grid`.
    pub fn field(&self, tau: f64, grid: &Arc<SphereGrid>) -> SphericalField {
        let r = self.radial(tau)[0];
        let ang = self.angular(self.block_of(tau));
        SphericalField::from_fn(grid.clone(), |psi, phi| Complex64::new(r * ang.eval(psi, phi), 0.0))
    }

    /// Block containing the first capped angular frequency, if the family caps one.
    pub fn frequency_cap(&self) -> Option<FrequencyCap> {
        let base = match (&self.spec.family, &self.spec.inner) {
            (Family::OscillatoryBq, Some(q)) => q.as_ref(),
            _ => &self.spec,
        };
        if !matches!(base.family, Family::ExampleDyadic | Family::HarmonicSeries) {
            return None;
        }
        let first_capped = (base.first_block..MAX_BLOCK).find(|&n| (1usize << n) > base.l_pot)?;
        Some(FrequencyCap { l_pot: base.l_pot, first_capped_block: first_capped })
    }
}

/// Where the angular frequency `2^n` is replaced by the cap `L_pot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyCap {
    pub l_pot: usize,
    pub first_capped_block: u32,
}

type Parts = (Radial, bool, Vec<Angular>, f64);

fn build_parts(spec: &PotentialSpec) -> Result<Parts> {
    let gamma = spec.gamma;
    let dyadic_radial = Radial::Dyadic { p: gamma, first_block: spec.first_block };
    let per_block = |f: &dyn Fn(u32) -> Angular| -> Vec<Angular> {
        (0..MAX_BLOCK).map(|n| if n < spec.first_block { Angular::Zero } else { f(n) }).collect()
    };
    Ok(match spec.family {
        Family::Zero => (Radial::Zero, false, vec![Angular::Zero], 0.0),
        Family::RadialOnly => (dyadic_radial, true, per_block(&|_| Angular::Constant(1.0)), spec.amplitude),
        Family::L1Decay => (Radial::power(1.0 + gamma), false, vec![smooth_field(spec.seed)], spec.amplitude),
        Family::SmoothAngle => (Radial::power(gamma), false, vec![smooth_field(spec.seed)], spec.amplitude),
        Family::ExampleDyadic => {
            let blocks = per_block(&|n| Angular::SinChi {
                m: (1usize << n.min(62)).min(spec.l_pot),
                delta: spec.delta,
                apply_b: false,
            });
            (dyadic_radial, true, blocks, spec.amplitude)
        }
        Family::HarmonicSeries => {
            let blocks = per_block(&|n| {
                let band = (1usize << n.min(62)).min(spec.l_pot);
                Angular::Field(random_real_field(band, 0, spec.seed.wrapping_mul(1_000_003).wrapping_add(n as u64)))
            });
            (dyadic_radial, true, blocks, spec.amplitude)
        }
        Family::OscillatoryBq => {
            let q = spec.inner.as_ref().ok_or_else(|| Error::InvalidParameter("missing inner spec".into()))?;
            let (radial, dyadic, blocks, amp) = build_parts(q)?;
            let radial = match radial {
                Radial::Zero => Radial::Zero,
                Radial::Dyadic { p, first_block } => Radial::Dyadic { p: p + 2.0, first_block },
                Radial::Power { p, .. } => Radial::power(p + 2.0),
            };
            let blocks = blocks.iter().map(Angular::apply_b).collect();
            (radial, dyadic, blocks, amp * spec.amplitude)
        }
    })
}

/// Fixed smooth real field of degree <= 3 used by the non-dyadic families.
fn smooth_field(seed: u64) -> Angular {
    Angular::Field(random_real_field(3, 0, seed ^ 0x5eed_0f_a11))
}

/// Seeded real band-limited field with degrees in `[l_min, l_max]`, scaled so that its
/// maximum modulus on a dense grid equals 1.
pub fn random_real_field(l_max: usize, l_min: usize, seed: u64) -> HarmonicCoeffs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = HarmonicCoeffs::zeros(l_max);
    for l in l_min..=l_max {
        c.set(l, 0, Complex64::new(rng.random_range(-1.0..1.0), 0.0));
        for m in 1..=l as i64 {
            let v = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            c.set(l, m, v);
            let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
            c.set(l, -m, v.conj() * sign);
        }
    }
    let grid = Arc::new(SphereGrid::new(l_max, 2 * l_max + 8, 4 * l_max + 16).expect("dense grid"));
    let field = crate::sphere::sht_inverse(&c, &grid).expect("band fits");
    let sup = field.max_abs();
    if sup > 0.0 {
        c.scale(Complex64::new(1.0 / sup, 0.0));
    }
    debug_assert_eq!(c.as_slice().len(), coeff_count(l_max));
    debug_assert!(lm_index(l_max, l_max as i64) < c.as_slice().len());
    c
}

/// Samples of `V(tau, .)` on `grid` for a spec.
pub fn eval_potential(spec: &PotentialSpec, tau: f64, grid: &Arc<SphereGrid>) -> Result<SphericalField> {
    if !(tau >= 1.0) {
        return Err(Error::InvalidTau(tau));
    }
    Ok(Potential::new(spec)?.field(tau, grid))
}

/// Result of [`verify_conditions`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub family: Family,
    pub gamma: f64,
    /// `max_tau ||V(tau)||_inf tau^gamma`.
    pub sup_constant: f64,
    /// `max_tau ||V_tau(tau)||_inf tau^{1+gamma}`.
    pub d1_constant: f64,
    /// `max_tau ||V_tautau(tau)||_inf tau^{1+2 gamma}`.
    pub d2_constant: f64,
    /// Decay exponent fitted to per-block maxima of `||V||_inf`, if at least two blocks are nonzero.
    pub measured_decay: Option<f64>,
    /// Constant allowed for each bound.
    pub allowance: f64,
    pub gamma_in_range: bool,
    pub decay_ok: bool,
    pub bounds_ok: [bool; 3],
    pub pass: bool,
    pub frequency_cap: Option<FrequencyCap>,
}

/// Audit with the default allowance of 40 times the amplitude.
pub fn verify_conditions(spec: &PotentialSpec, tau_samples: &[f64]) -> Result<AuditReport> {
    verify_conditions_with(spec, tau_samples, 40.0 * spec.amplitude.abs())
}

/// Measures the constants in `|V| < C tau^-gamma`, `|V_tau| < C tau^{-1-gamma}`,
/// `|V_tautau| < C tau^{-1-2gamma}` by dense angular sampling and central differences
/// with step `1e-3 tau`, and checks them against `allowance`.
pub fn verify_conditions_with(spec: &PotentialSpec, tau_samples: &[f64], allowance: f64) -> Result<AuditReport> {
    if tau_samples.len() < 10 {
        return Err(Error::InvalidParameter(format!("audit needs at least 10 tau samples, got {}", tau_samples.len())));
    }
    if let Some(bad) = tau_samples.iter().find(|t| !(**t >= 1.0)) {
        return Err(Error::InvalidTau(*bad));
    }
    let pot = Potential::new(spec)?;
    let gamma = spec.effective_gamma();
    let band = pot.max_band().max(8);
    let n_psi = 2 * band + 32;
    let n_phi = 4 * band + 64;
    let nodes: Vec<(f64, f64)> = (0..n_psi)
        .flat_map(|i| {
            let psi = PI * (i as f64 + 0.5) / n_psi as f64;
            (0..n_phi).map(move |j| (psi, 2.0 * PI * j as f64 / n_phi as f64))
        })
        .collect();
    let sup = |tau: f64| -> Vec<f64> {
        let block = pot.block_of(tau);
        let r = pot.radial(tau)[0];
        if r == 0.0 {
            return vec![0.0; nodes.len()];
        }
        let ang = pot.angular(block);
        nodes.iter().map(|&(psi, phi)| r * ang.eval(psi, phi)).collect()
    };
    let mut c = [0.0f64; 3];
    let mut block_max: Vec<(usize, f64, f64)> = Vec::new();
    for &tau in tau_samples {
        let h = 1e-3 * tau;
        let v0 = sup(tau);
        let vp = sup(tau + h);
        let vm = sup(tau - h);
        let mut m = [0.0f64; 3];
        for i in 0..v0.len() {
            m[0] = m[0].max(v0[i].abs());
            m[1] = m[1].max(((vp[i] - vm[i]) / (2.0 * h)).abs());
            m[2] = m[2].max(((vp[i] - 2.0 * v0[i] + vm[i]) / (h * h)).abs());
        }
        c[0] = c[0].max(m[0] * tau.powf(gamma));
        c[1] = c[1].max(m[1] * tau.powf(1.0 + gamma));
        c[2] = c[2].max(m[2] * tau.powf(1.0 + 2.0 * gamma));
        let b = tau.log2().floor() as usize;
        match block_max.iter_mut().find(|e| e.0 == b) {
            Some(e) if m[0] > e.2 => {
                e.1 = tau;
                e.2 = m[0];
            }
            Some(_) => {}
            None => block_max.push((b, tau, m[0])),
        }
    }
    let pts: Vec<(f64, f64)> = block_max.iter().filter(|e| e.2 > 0.0).map(|e| (e.1.ln(), e.2.ln())).collect();
    let measured_decay = if pts.len() >= 2 { Some(-least_squares_slope(&pts)) } else { None };
    let is_zero = pot.is_zero() || c.iter().all(|v| *v == 0.0);
    let gamma_in_range = is_zero || (gamma > 0.5 && gamma < 1.0);
    let decay_ok = is_zero || measured_decay.is_none_or(|d| d > 0.5);
    let bounds_ok = [c[0] <= allowance, c[1] <= allowance, c[2] <= allowance];
    let pass = gamma_in_range && decay_ok && bounds_ok.iter().all(|b| *b);
    Ok(AuditReport {
        family: spec.family,
        gamma,
        sup_constant: c[0],
        d1_constant: c[1],
        d2_constant: c[2],
        measured_decay,
        allowance,
        gamma_in_range,
        decay_ok,
        bounds_ok,
        pass,
        frequency_cap: pot.frequency_cap(),
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Sup over `nodes` of the angular gradient `|D_theta V(tau, .)|`, by central
/// differences in `psi` and `phi`.
pub fn angular_gradient_sup(pot: &Potential, tau: f64, n_psi: usize, n_phi: usize) -> f64 {
    let h = 1e-5;
    let mut best = 0.0f64;
    for i in 0..n_psi {
        let psi = PI * (i as f64 + 0.5) / n_psi as f64;
        for j in 0..n_phi {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            let dpsi = (pot.eval(tau, psi + h, phi) - pot.eval(tau, psi - h, phi)) / (2.0 * h);
            let dphi = (pot.eval(tau, psi, phi + h) - pot.eval(tau, psi, phi - h)) / (2.0 * h) / psi.sin();
            best = best.max((dpsi * dpsi + dphi * dphi).sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn envelope_vanishes_on_collars_and_edges() {
        for n in 1..10 {
            let a = (2.0f64).powi(n);
            assert_eq!(radial_envelope(0.6, a), 0.0);
            assert_eq!(radial_envelope(0.6, a + 0.5), 0.0);
            assert_eq!(radial_envelope(0.6, a - 0.5), 0.0);
        }
    }

    #[test]
    fn envelope_peak_at_block_centre() {
        for n in 4..10 {
            let c = 1.5 * (2.0f64).powi(n);
            let v = radial_envelope(0.6, c);
            assert!((v - c.powf(-0.6)).abs() < 1e-15);
        }
        // blocks below the first one are switched off
        assert_eq!(radial_envelope(0.6, 12.0), 0.0);
    }

    #[test]
    fn envelope_second_derivative_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gamma = 0.6;
        for _ in 0..200 {
            let tau: f64 = (2.0f64).powf(rng.random_range(1.0..10.0));
            let h = 1e-3;
            let d2 = (radial_envelope(gamma, tau + h) - 2.0 * radial_envelope(gamma, tau) + radial_envelope(gamma, tau - h))
                / (h * h);
            assert!(d2.abs() <= 40.0 * tau.powf(-1.0 - 2.0 * gamma), "tau={tau} d2={d2}");
        }
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        for &tau in &[20.0f64, 23.7, 50.1, 300.0, 0.4, 1.7] {
            for pot in [
                Potential::new(&PotentialSpec::new(Family::ExampleDyadic)).unwrap(),
                Potential::new(&PotentialSpec::new(Family::SmoothAngle)).unwrap(),
                Potential::new(&make_oscillatory_bq(PotentialSpec::new(Family::ExampleDyadic)).unwrap()).unwrap(),
            ] {
                let h = 1e-4 * tau.max(1.0);
                let [r, r1, r2] = pot.radial(tau);
                let rp = pot.radial(tau + h)[0];
                let rm = pot.radial(tau - h)[0];
                let scale = r.abs().max(1e-3);
                assert!((r1 - (rp - rm) / (2.0 * h)).abs() < 1e-6 * scale / h.min(1.0), "tau={tau}");
                assert!((r2 - (rp - 2.0 * r + rm) / (h * h)).abs() < 1e-4 * scale / (h * h).min(1.0), "tau={tau}");
            }
        }
    }

    #[test]
    fn extension_below_one_is_c2() {
        let pot = Potential::new(&PotentialSpec::new(Family::SmoothAngle)).unwrap();
        let below = pot.radial(1.0 - 1e-12);
        let above = pot.radial(1.0);
        for i in 0..3 {
            assert!((below[i] - above[i]).abs() < 1e-9, "{i}");
        }
        assert_eq!(pot.radial(0.0), [0.0; 3]);
    }

    #[test]
    fn radial_integral_matches_fine_quadrature() {
        let pot = Potential::new(&PotentialSpec::new(Family::RadialOnly)).unwrap();
        let (a, b) = (17.3, 31.9);
        let n = 200_000;
        let h = (b - a) / n as f64;
        let fine: f64 = (0..n).map(|i| pot.radial(a + (i as f64 + 0.5) * h)[0]).sum::<f64>() * h;
        assert!((pot.radial_integral(a, b) - fine).abs() < 1e-9);
        assert!((pot.radial_integral(b, a) + fine).abs() < 1e-9);
    }

    #[test]
    fn radial_only_is_constant_in_angle() {
        let spec = PotentialSpec::new(Family::RadialOnly);
        let grid = Arc::new(SphereGrid::for_band_limit(6).unwrap());
        let f = eval_potential(&spec, 40.0, &grid).unwrap();
        let v = radial_envelope(0.6, 40.0);
        assert!(f.values().iter().all(|z| (z.re - v).abs() < 1e-15 && z.im == 0.0));
    }

    #[test]
    fn example_dyadic_vanishes_near_poles() {
        let pot = Potential::new(&PotentialSpec::new(Family::ExampleDyadic)).unwrap();
        for &psi in &[0.0, 0.1, 0.29, PI - 0.2] {
            for &phi in &[0.1, 1.0, 4.0] {
                assert_eq!(pot.eval(40.0, psi, phi), 0.0);
            }
        }
        assert!(pot.eval(40.0, PI / 2.0, PI / 32.0).abs() > 0.0);
    }

    #[test]
    fn example_dyadic_frequency_capped() {
        let spec = PotentialSpec::new(Family::ExampleDyadic).with_l_pot(32);
        let pot = Potential::new(&spec).unwrap();
        assert!(matches!(pot.angular(4), Angular::SinChi { m: 16, .. }));
        assert!(matches!(pot.angular(5), Angular::SinChi { m: 32, .. }));
        assert!(matches!(pot.angular(9), Angular::SinChi { m: 32, .. }));
        assert_eq!(pot.frequency_cap(), Some(FrequencyCap { l_pot: 32, first_capped_block: 6 }));
    }

    #[test]
    fn smooth_angle_gradient_bound() {
        let spec = PotentialSpec::new(Family::SmoothAngle).with_gamma(0.6);
        let pot = Potential::new(&spec).unwrap();
        let g = angular_gradient_sup(&pot, 100.0, 48, 96);
        // a unit-sup field of degree 3 has gradient at most 3*4 by Bernstein-type bounds
        assert!(g <= 12.0 * 100f64.powf(-0.6), "{g}");
        assert!(g > 0.0);
    }

    #[test]
    fn oscillatory_bq_of_eigenfunction() {
        let q = PotentialSpec::new(Family::SmoothAngle);
        let qpot = Potential::new(&q).unwrap();
        let v = Potential::new(&make_oscillatory_bq(q).unwrap()).unwrap();
        let (Angular::Field(qa), Angular::Field(va)) = (qpot.angular(0), v.angular(0)) else { panic!() };
        for l in 0..=3usize {
            for m in -(l as i64)..=(l as i64) {
                let expect = qa.get(l, m) * (l * (l + 1)) as f64;
                assert!((va.get(l, m) - expect).norm() < 1e-14);
            }
        }
        for &tau in &[2.0, 7.5] {
            assert!((v.radial(tau)[0] - qpot.radial(tau)[0] / (tau * tau)).abs() < 1e-15);
        }
    }

    #[test]
    fn oscillatory_bq_of_constant_vanishes() {
        let v = Potential::new(&make_oscillatory_bq(PotentialSpec::new(Family::RadialOnly)).unwrap()).unwrap();
        assert!(v.is_zero());
        assert_eq!(v.eval(40.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn oscillatory_bq_commutes_with_transform() {
        let q = PotentialSpec::new(Family::HarmonicSeries).with_l_pot(8);
        let qpot = Potential::new(&q).unwrap();
        let v = Potential::new(&make_oscillatory_bq(q).unwrap()).unwrap();
        let grid = Arc::new(SphereGrid::for_band_limit(8).unwrap());
        let tau = 44.0;
        let qc = crate::sphere::sht_forward(&qpot.field(tau, &grid), 8).unwrap();
        let vc = crate::sphere::sht_forward(&v.field(tau, &grid), 8).unwrap();
        let mut expect = crate::sphere::apply_b(&qc);
        expect.scale(Complex64::new(1.0 / (tau * tau), 0.0));
        assert!(vc.sub(&expect).norm() < 1e-10);
    }

    #[test]
    fn b_of_cutoff_sine_matches_finite_differences() {
        let a = Angular::SinChi { m: 5, delta: 0.3, apply_b: false };
        let b = a.apply_b();
        let h = 1e-4;
        for &(psi, phi) in &[(0.5, 0.3), (1.2, 2.0), (2.5, 5.0), (0.7, 1.1)] {
            let f = |p: f64, q: f64| a.eval(p, q);
            let d2psi = (f(psi + h, phi) - 2.0 * f(psi, phi) + f(psi - h, phi)) / (h * h);
            let dpsi = (f(psi + h, phi) - f(psi - h, phi)) / (2.0 * h);
            let d2phi = (f(psi, phi + h) - 2.0 * f(psi, phi) + f(psi, phi - h)) / (h * h);
            let lap = d2psi + psi.cos() / psi.sin() * dpsi + d2phi / psi.sin().powi(2);
            assert!((b.eval(psi, phi) + lap).abs() < 1e-4 * (1.0 + lap.abs()), "psi={psi}");
        }
    }

    #[test]
    fn fields_are_real_and_continuous_across_blocks() {
        let grid = Arc::new(SphereGrid::for_band_limit(16).unwrap());
        for fam in [Family::ExampleDyadic, Family::HarmonicSeries, Family::RadialOnly] {
            let pot = Potential::new(&PotentialSpec::new(fam)).unwrap();
            for e in [32.0, 64.0] {
                let lo = pot.field(e - 1e-9, &grid).max_abs();
                let hi = pot.field(e + 1e-9, &grid).max_abs();
                assert_eq!(lo, 0.0);
                assert_eq!(hi, 0.0);
            }
            let f = pot.field(45.0, &grid);
            assert!(f.values().iter().all(|v| v.im.abs() <= 1e-14));
        }
    }

    #[test]
    fn audit_zero_passes_with_zero_constants() {
        let taus: Vec<f64> = (1..=12).map(|i| (2.0f64).powf(i as f64 * 0.8)).collect();
        let r = verify_conditions(&PotentialSpec::zero(), &taus).unwrap();
        assert!(r.pass);
        assert_eq!([r.sup_constant, r.d1_constant, r.d2_constant], [0.0; 3]);
    }

    #[test]
    fn audit_rejects_slow_decay() {
        let taus: Vec<f64> = (0..16).map(|i| (2.0f64).powf(1.0 + i as f64 * 0.6)).collect();
        let spec = PotentialSpec::new(Family::SmoothAngle).with_gamma(0.25);
        assert!(spec.validate().is_err());
        let r = verify_conditions(&spec, &taus).unwrap();
        assert!(!r.pass);
        assert!(!r.gamma_in_range);
        let d = r.measured_decay.unwrap();
        assert!((d - 0.25).abs() < 0.01, "{d}");
        assert!(!r.decay_ok);
    }

    #[test]
    fn validate_messages() {
        let e = PotentialSpec::new(Family::ExampleDyadic).with_gamma(1.2).validate().unwrap_err();
        assert!(e.to_string().contains("1/2 < gamma < 1"));
        assert!("bogus".parse::<Family>().is_err());
        assert_eq!("oscillatory_bq".parse::<Family>().unwrap(), Family::OscillatoryBq);
        assert!(make_oscillatory_bq(make_oscillatory_bq(PotentialSpec::default()).unwrap()).is_err());
        let bq = make_oscillatory_bq(PotentialSpec::default().with_gamma(0.7)).unwrap();
        assert_eq!(bq.exceeds_two_thirds(), Some(true));
        let bq = make_oscillatory_bq(PotentialSpec::default().with_gamma(0.6)).unwrap();
        assert_eq!(bq.exceeds_two_thirds(), Some(false));
    }
}
