//! Spherical-harmonic analysis and synthesis on a Gauss–Legendre grid.
//!
//! Conventions, fixed here once for the whole crate:
//!
//! * colatitude `psi` in `[0, pi]`, longitude `phi` in `[0, 2 pi)`;
//! * complex orthonormal harmonics `Y_l^m = N_lm P_l^m(cos psi) e^{i m phi}` with the
//!   Condon–Shortley phase, so `Y_l^{-m} = (-1)^m conj(Y_l^m)`;
//! * coefficients are stored flat at index `l^2 + l + m`.
//!
//! `B` is the positive Laplace–Beltrami operator, `B Y_l^m = l(l+1) Y_l^m`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes in descending order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let j = j as f64;
        let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

/// Orthonormal associated Legendre values `N_lm P_l^m(x)` for `0 <= m <= l <= l_max`,
/// written at `out[lm_index(l, m)]` (non-negative `m` slots only).
pub fn normalized_legendre(l_max: usize, x: f64, out: &mut [f64]) {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = (0.25 / PI).sqrt();
    for m in 0..=l_max {
        if m > 0 {
            let mf = m as f64;
            pmm *= -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
        }
        out[lm_index(m, m as i64)] = pmm;
        if m == l_max {
            break;
        }
        let mut p_prev = pmm;
        let mut p = (2.0 * m as f64 + 3.0).sqrt() * x * pmm;
        out[lm_index(m + 1, m as i64)] = p;
        let mf = m as f64;
        for l in (m + 2)..=l_max {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let next = a * (x * p - b * p_prev);
            p_prev = p;
            p = next;
            out[lm_index(l, m as i64)] = p;
        }
    }
}

/// Flat coefficient index of `(l, m)`.
#[inline]
pub fn lm_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Number of coefficients up to band limit `l_max`.
#[inline]
pub fn coeff_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Band-limited function on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicCoeffs {
    l_max: usize,
    data: Vec<Complex64>,
}

impl HarmonicCoeffs {
    pub fn zeros(l_max: usize) -> Self {
        Self { l_max, data: vec![ZERO; coeff_count(l_max)] }
    }

    pub fn from_vec(l_max: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != coeff_count(l_max) {
            return Err(Error::Shape(format!(
                "expected {} coefficients for l_max={l_max}, got {}",
                coeff_count(l_max),
                data.len()
            )));
        }
        Ok(Self { l_max, data })
    }

    /// Single harmonic `Y_l^m`.
    pub fn single(l_max: usize, l: usize, m: i64) -> Self {
        let mut c = Self::zeros(l_max);
        c.set(l, m, Complex64::new(1.0, 0.0));
        c
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, l: usize, m: i64) -> Complex64 {
        assert!(l <= self.l_max && m.unsigned_abs() as usize <= l);
        self.data[lm_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: i64, v: Complex64) {
        assert!(l <= self.l_max && m.unsigned_abs() as usize <= l);
        self.data[lm_index(l, m)] = v;
    }

    /// Euclidean norm of the coefficient vector (the `L^2(Sigma)` norm by Parseval).
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Complex64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    /// Zero-padded or truncated copy at a different band limit.
    pub fn resized(&self, l_max: usize) -> Self {
        let mut out = Self::zeros(l_max);
        let l_common = l_max.min(self.l_max);
        let n = coeff_count(l_common);
        out.data[..n].copy_from_slice(&self.data[..n]);
        out
    }

    pub fn scale(&mut self, s: Complex64) {
        for c in &mut self.data {
            *c *= s;
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: Complex64, other: &Self) {
        assert_eq!(self.l_max, other.l_max);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(Complex64::new(-1.0, 0.0), other);
        out
    }

    /// Multiply each degree-`l` block by `f(l)`.
    pub fn map_degree(&mut self, mut f: impl FnMut(usize) -> Complex64) {
        for l in 0..=self.l_max {
            let s = f(l);
            let start = l * l;
            for c in &mut self.data[start..start + 2 * l + 1] {
                *c *= s;
            }
        }
    }

    /// Norm of the coefficients of degree `l`.
    pub fn degree_power(&self, l: usize) -> f64 {
        let start = l * l;
        self.data[start..start + 2 * l + 1].iter().map(|c| c.norm_sqr()).sum()
    }
}

/// `B`: multiply degree `l` by `l(l+1)`.
pub fn apply_b(coeffs: &HarmonicCoeffs) -> HarmonicCoeffs {
    let mut out = coeffs.clone();
    out.map_degree(|l| Complex64::new((l * (l + 1)) as f64, 0.0));
    out
}

/// Exponent of the free flow: `int_{tau0}^{tau1} s^{-2} ds`.
#[inline]
pub fn free_flow_exponent(tau0: f64, tau1: f64) -> f64 {
    (tau1 - tau0) / (tau1 * tau0)
}

/// Exact free flow `U_0(k, tau0, tau1) = exp[(1/(ik)) (tau1-tau0)/(tau1 tau0) B]`.
pub fn apply_u0(k: f64, tau0: f64, tau1: f64, coeffs: &HarmonicCoeffs) -> Result<HarmonicCoeffs> {
    if k == 0.0 || !k.is_finite() {
        return Err(Error::InvalidWavenumber(k));
    }
    if !(tau0 > 0.0 && tau1 > 0.0) {
        return Err(Error::InvalidTau(tau0.min(tau1)));
    }
    let mut out = coeffs.clone();
    let alpha = free_flow_exponent(tau0, tau1) / k;
    out.map_degree(|l| Complex64::from_polar(1.0, -alpha * (l * (l + 1)) as f64));
    Ok(out)
}

/// Gauss–Legendre × equispaced-longitude grid with precomputed Legendre tables.
///
/// `l_max` is the largest degree the tables support. Transforms are exact for
/// band-limited data when `n_lat >= l_max + 1` and `n_lon >= 2 l_max + 1`.
///
/// A grid with azimuthal `stride > 1` only carries orders `m` that are multiples of the
/// stride. Such functions are `2 pi / stride` periodic in longitude, so the `n_lon`
/// longitudes cover `[0, 2 pi / stride)` and the resolution condition becomes
/// `n_lon >= 2 (l_max / stride) + 1`. All other coefficients are ignored by analysis
/// and synthesis.
pub struct SphereGrid {
    l_max: usize,
    n_lat: usize,
    n_lon: usize,
    stride: usize,
    cos_colat: Vec<f64>,
    colat: Vec<f64>,
    gl_weights: Vec<f64>,
    /// `plm[m / stride][lat][l - m]`, flattened, orthonormal Legendre values.
    plm: Vec<f64>,
    m_offsets: Vec<usize>,
    fft_forward: Arc<dyn Fft<f64>>,
    fft_inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SphereGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SphereGrid")
            .field("l_max", &self.l_max)
            .field("n_lat", &self.n_lat)
            .field("n_lon", &self.n_lon)
            .field("stride", &self.stride)
            .finish()
    }
}

impl SphereGrid {
    /// Grid with explicit resolution, rejected when too coarse for `l_max`.
    pub fn new(l_max: usize, n_lat: usize, n_lon: usize) -> Result<Self> {
        Self::with_stride(l_max, n_lat, n_lon, 1)
    }

    /// Grid restricted to orders `m` divisible by `stride`.
    pub fn with_stride(l_max: usize, n_lat: usize, n_lon: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidParameter("azimuthal stride must be positive".into()));
        }
        if n_lat < l_max + 1 || n_lon < 2 * (l_max / stride) + 1 {
            return Err(Error::GridTooCoarse { l_max, n_lat, n_lon });
        }
        let (x, w) = gauss_legendre(n_lat);
        let colat: Vec<f64> = x.iter().map(|v| v.clamp(-1.0, 1.0).acos()).collect();
        let n_orders = l_max / stride + 1;
        let mut m_offsets = Vec::with_capacity(n_orders + 1);
        let mut off = 0;
        for mi in 0..n_orders {
            m_offsets.push(off);
            off += n_lat * (l_max + 1 - mi * stride);
        }
        m_offsets.push(off);
        let mut plm = vec![0.0; off];
        let mut scratch = vec![0.0; coeff_count(l_max)];
        for (i, &xi) in x.iter().enumerate() {
            normalized_legendre(l_max, xi, &mut scratch);
            for mi in 0..n_orders {
                let m = mi * stride;
                let width = l_max + 1 - m;
                let base = m_offsets[mi] + i * width;
                for l in m..=l_max {
                    plm[base + l - m] = scratch[lm_index(l, m as i64)];
                }
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            l_max,
            n_lat,
            n_lon,
            stride,
            cos_colat: x,
            colat,
            gl_weights: w,
            plm,
            m_offsets,
            fft_forward: planner.plan_fft_forward(n_lon),
            fft_inverse: planner.plan_fft_inverse(n_lon),
        })
    }

    /// Minimal exact grid for band limit `l_max` (even longitude count).
    pub fn for_band_limit(l_max: usize) -> Result<Self> {
        Self::new(l_max, l_max + 1, 2 * l_max + 2)
    }

    /// Grid resolving products of degree `l_max` functions with angular content up to
    /// `l_extra`.
    pub fn oversampled(l_max: usize, l_extra: usize) -> Result<Self> {
        Self::oversampled_with_stride(l_max, l_extra, 1)
    }

    /// [`SphereGrid::oversampled`] restricted to orders divisible by `stride`.
    pub fn oversampled_with_stride(l_max: usize, l_extra: usize, stride: usize) -> Result<Self> {
        let n_lat = l_max + l_extra / 2 + 2;
        let n_lon = ((2 * l_max + l_extra) / stride.max(1) + 2).next_multiple_of(2);
        Self::with_stride(l_max, n_lat, n_lon, stride)
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }
    pub fn n_lat(&self) -> usize {
        self.n_lat
    }
    pub fn n_lon(&self) -> usize {
        self.n_lon
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn colatitudes(&self) -> &[f64] {
        &self.colat
    }
    pub fn cos_colatitudes(&self) -> &[f64] {
        &self.cos_colat
    }
    pub fn longitude(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / (self.n_lon * self.stride) as f64
    }
    /// Quadrature weight of node `(i, j)`; the weights sum to `4 pi` (each node stands
    /// for its `stride` periodic images).
    pub fn weight(&self, i: usize) -> f64 {
        self.gl_weights[i] * 2.0 * PI / self.n_lon as f64
    }
    pub fn node(&self, idx: usize) -> (f64, f64) {
        (self.colat[idx / self.n_lon], self.longitude(idx % self.n_lon))
    }

    /// Whether `coeffs` only has orders this grid carries.
    pub fn supports(&self, coeffs: &HarmonicCoeffs) -> bool {
        if self.stride == 1 {
            return true;
        }
        (0..=coeffs.l_max()).all(|l| {
            (-(l as i64)..=l as i64)
                .filter(|m| m.rem_euclid(self.stride as i64) != 0)
                .all(|m| coeffs.get(l, m) == ZERO)
        })
    }

    fn check_band(&self, l_max: usize) -> Result<()> {
        if l_max > self.l_max {
            return Err(Error::GridTooCoarse { l_max, n_lat: self.n_lat, n_lon: self.n_lon });
        }
        Ok(())
    }

    #[inline]
    fn plm_row(&self, mi: usize, i: usize) -> &[f64] {
        let width = self.l_max + 1 - mi * self.stride;
        let base = self.m_offsets[mi] + i * width;
        &self.plm[base..base + width]
    }

    /// Scratch length required by [`SphereGrid::synthesize_into`]/[`SphereGrid::analyze_into`].
    pub fn scratch_len(&self) -> usize {
        self.fft_forward
            .get_inplace_scratch_len()
            .max(self.fft_inverse.get_inplace_scratch_len())
            + 2 * coeff_count(self.l_max)
    }

    /// Pointwise synthesis `sum a_lm Y_lm(node)` into `out` (row-major `lat, lon`).
    pub fn synthesize_into(&self, coeffs: &HarmonicCoeffs, out: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        let l_max = coeffs.l_max();
        debug_assert!(l_max <= self.l_max);
        debug_assert_eq!(out.len(), self.len());
        scratch.resize(self.scratch_len(), ZERO);
        let ncoef = coeff_count(self.l_max);
        let (mmajor, fft_scratch) = scratch.split_at_mut(2 * ncoef);
        let s = self.stride;
        // m-major regrouping: positive block then negative block per m
        let a = coeffs.as_slice();
        let mut pos = 0;
        for m in (0..=l_max).step_by(s) {
            for l in m..=l_max {
                mmajor[pos + l - m] = a[lm_index(l, m as i64)];
            }
            pos += l_max + 1 - m;
            if m > 0 {
                let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
                for l in m..=l_max {
                    mmajor[pos + l - m] = a[lm_index(l, -(m as i64))] * sign;
                }
                pos += l_max + 1 - m;
            }
        }
        out.fill(ZERO);
        let n_lon = self.n_lon;
        for i in 0..self.n_lat {
            let row = &mut out[i * n_lon..(i + 1) * n_lon];
            let mut pos = 0;
            for (mi, m) in (0..=l_max).step_by(s).enumerate() {
                let width = l_max + 1 - m;
                let p = &self.plm_row(mi, i)[..width];
                row[mi] = dot_real(p, &mmajor[pos..pos + width]);
                pos += width;
                if m > 0 {
                    row[n_lon - mi] = dot_real(p, &mmajor[pos..pos + width]);
                    pos += width;
                }
            }
        }
        self.fft_inverse.process_with_scratch(out, fft_scratch);
    }

    /// Quadrature analysis of grid values onto orthonormal harmonics up to `coeffs.l_max()`.
    /// The input buffer is overwritten.
    pub fn analyze_into(&self, values: &mut [Complex64], coeffs: &mut HarmonicCoeffs, scratch: &mut Vec<Complex64>) {
        let l_max = coeffs.l_max();
        debug_assert!(l_max <= self.l_max);
        debug_assert_eq!(values.len(), self.len());
        scratch.resize(self.scratch_len(), ZERO);
        let (_, fft_scratch) = scratch.split_at_mut(2 * coeff_count(self.l_max));
        self.fft_forward.process_with_scratch(values, fft_scratch);
        let n_lon = self.n_lon;
        let dphi = 2.0 * PI / n_lon as f64;
        let a = coeffs.as_mut_slice();
        a.fill(ZERO);
        for i in 0..self.n_lat {
            let w = self.gl_weights[i] * dphi;
            let row = &values[i * n_lon..(i + 1) * n_lon];
            for (mi, m) in (0..=l_max).step_by(self.stride).enumerate() {
                let width = l_max + 1 - m;
                let p = &self.plm_row(mi, i)[..width];
                let fpos = row[mi] * w;
                for (l_off, &pv) in p.iter().enumerate() {
                    a[lm_index(m + l_off, m as i64)] += fpos * pv;
                }
                if m > 0 {
                    let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
                    let fneg = row[n_lon - mi] * (w * sign);
                    for (l_off, &pv) in p.iter().enumerate() {
                        a[lm_index(m + l_off, -(m as i64))] += fneg * pv;
                    }
                }
            }
        }
    }

    /// Quadrature integral `sum w |f|^2` of raw grid values.
    pub fn quadrature_norm_sqr(&self, values: &[Complex64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_lat {
            let w = self.weight(i);
            acc += w * values[i * self.n_lon..(i + 1) * self.n_lon].iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        acc
    }
}

#[inline]
fn dot_real(p: &[f64], a: &[Complex64]) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (pv, av) in p.iter().zip(a) {
        re += pv * av.re;
        im += pv * av.im;
    }
    Complex64::new(re, im)
}

/// Complex values on the nodes of a [`SphereGrid`].
#[derive(Debug, Clone)]
pub struct SphericalField {
    grid: Arc<SphereGrid>,
    values: Vec<Complex64>,
}

impl SphericalField {
    pub fn zeros(grid: Arc<SphereGrid>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![ZERO; n] }
    }

    /// Samples `f(psi, phi)` at every node.
    pub fn from_fn(grid: Arc<SphereGrid>, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let (psi, phi) = grid.node(idx);
                f(psi, phi)
            })
            .collect();
        Self { grid, values }
    }

    pub fn from_values(grid: Arc<SphereGrid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("expected {} grid values, got {}", grid.len(), values.len())));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }
    pub fn n_lat(&self) -> usize {
        self.grid.n_lat()
    }
    pub fn n_lon(&self) -> usize {
        self.grid.n_lon()
    }
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.grid.n_lon() + j]
    }
    /// `(colatitude, longitude)` of node `(i, j)`.
    pub fn coordinates(&self, i: usize, j: usize) -> (f64, f64) {
        (self.grid.colatitudes()[i], self.grid.longitude(j))
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Projection onto orthonormal harmonics up to `l_max` by Gauss–Legendre quadrature.
pub fn sht_forward(field: &SphericalField, l_max: usize) -> Result<HarmonicCoeffs> {
    let grid = field.grid();
    if grid.n_lat() < l_max + 1 || grid.n_lon() < 2 * (l_max / grid.stride()) + 1 {
        return Err(Error::GridTooCoarse { l_max, n_lat: grid.n_lat(), n_lon: grid.n_lon() });
    }
    grid.check_band(l_max)?;
    let mut values = field.values.clone();
    let mut out = HarmonicCoeffs::zeros(l_max);
    let mut scratch = Vec::new();
    grid.analyze_into(&mut values, &mut out, &mut scratch);
    Ok(out)
}

/// Pointwise synthesis on `grid`.
pub fn sht_inverse(coeffs: &HarmonicCoeffs, grid: &Arc<SphereGrid>) -> Result<SphericalField> {
    grid.check_band(coeffs.l_max())?;
    let mut field = SphericalField::zeros(grid.clone());
    let mut scratch = Vec::new();
    grid.synthesize_into(coeffs, &mut field.values, &mut scratch);
    Ok(field)
}

/// `L^2(Sigma)` norm by quadrature.
pub fn norm_l2(field: &SphericalField) -> f64 {
    field.grid.quadrature_norm_sqr(&field.values).sqrt()
}

/// Evaluates all `Y_l^m(psi, phi)`, `l <= l_max`, at one direction.
pub struct HarmonicEvaluator {
    l_max: usize,
    plm: Vec<f64>,
}

impl HarmonicEvaluator {
    pub fn new(l_max: usize) -> Self {
        Self { l_max, plm: vec![0.0; coeff_count(l_max)] }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// `sum a_lm Y_lm` at the direction with `cos(psi) = z` and longitude `phi`.
    pub fn evaluate(&mut self, coeffs: &HarmonicCoeffs, z: f64, phi: f64) -> Complex64 {
        let l_max = coeffs.l_max().min(self.l_max);
        normalized_legendre(self.l_max, z, &mut self.plm);
        let a = coeffs.as_slice();
        let mut acc = ZERO;
        let step = Complex64::from_polar(1.0, phi);
        let mut e = Complex64::new(1.0, 0.0);
        for m in 0..=l_max {
            let mut pos = ZERO;
            let mut neg = ZERO;
            for l in m..=l_max {
                let p = self.plm[lm_index(l, m as i64)];
                pos += a[lm_index(l, m as i64)] * p;
                if m > 0 {
                    neg += a[lm_index(l, -(m as i64))] * p;
                }
            }
            acc += pos * e;
            if m > 0 {
                let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
                acc += neg * e.conj() * sign;
            }
            e *= step;
        }
        acc
    }

    /// Several coefficient sets at the same direction, sharing the Legendre evaluation.
    pub fn evaluate_many(&mut self, sets: &[&HarmonicCoeffs], z: f64, phi: f64, out: &mut [Complex64]) {
        normalized_legendre(self.l_max, z, &mut self.plm);
        let step = Complex64::from_polar(1.0, phi);
        for (o, coeffs) in out.iter_mut().zip(sets) {
            let l_max = coeffs.l_max().min(self.l_max);
            let a = coeffs.as_slice();
            let mut acc = ZERO;
            let mut e = Complex64::new(1.0, 0.0);
            for m in 0..=l_max {
                let mut pos = ZERO;
                let mut neg = ZERO;
                for l in m..=l_max {
                    let p = self.plm[lm_index(l, m as i64)];
                    pos += a[lm_index(l, m as i64)] * p;
                    if m > 0 {
                        neg += a[lm_index(l, -(m as i64))] * p;
                    }
                }
                acc += pos * e;
                if m > 0 {
                    let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
                    acc += neg * e.conj() * sign;
                }
                e *= step;
            }
            *o = acc;
        }
    }
}
