//! Solver for the sphere evolution `ik y_tau = B y / tau^2 + V(tau, theta) y`.
//!
//! One step over `[s0, s1]` with midpoint `m` is the Strang composition
//! `P(int_m^{s1} V) U_0(s0, s1) P(int_{s0}^m V)`, where `P(c) = exp[(1/(ik)) c M]`.
//! Because the potential is separable on each dyadic block, the `tau` integrals are
//! exact and consecutive potential half steps merge. `M` is the Galerkin matrix of the
//! block's angular factor on the band `l <= L_max`, computed by an oversampled
//! quadrature; it is exactly Hermitian, so every step is unitary to rounding.
//!
//! The k-derivatives `chi = d y/dk` and `eta = d^2 y/dk^2` are propagated as exact
//! tangents of the discrete scheme.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::potentials::{Angular, Potential, PotentialSpec, MAX_BLOCK};
use crate::sphere::{HarmonicCoeffs, SphereGrid, SphericalField};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Wavenumber interval `I` accepted by default.
pub const DEFAULT_K_INTERVAL: (f64, f64) = (0.5, 4.0);

/// Largest Galerkin basis for which block exponentials use an eigendecomposition; larger
/// bases fall back to a scaled Taylor series.
pub const SPECTRAL_MAX_DIM: usize = 640;

/// Norm drift beyond which a step is rejected.
pub const MAX_STEP_DRIFT: f64 = 1e-6;

/// Step size control: `dtau = min(dtau_max, growth * tau) / refine` on each segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    pub dtau_max: f64,
    pub growth: f64,
    /// Band limit of the propagated coefficients.
    pub l_max: usize,
    /// Subdivision factor applied on top of the step rule (for convergence studies).
    pub refine: usize,
    /// Only azimuthal orders divisible by this are carried. Both the data and every
    /// angular factor of the potential must respect it.
    pub azimuthal_stride: usize,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self { dtau_max: 1.0, growth: 0.005, l_max: 16, refine: 1, azimuthal_stride: 1 }
    }
}

impl StepPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.dtau_max > 0.0 && self.dtau_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("dtau_max={} must be positive", self.dtau_max)));
        }
        if !(self.growth > 0.0 && self.growth <= 0.1) {
            return Err(Error::InvalidParameter(format!("growth={} must lie in (0, 0.1]", self.growth)));
        }
        if self.refine == 0 {
            return Err(Error::InvalidParameter("refine must be at least 1".into()));
        }
        if self.azimuthal_stride == 0 {
            return Err(Error::InvalidParameter("azimuthal_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn refined(mut self, factor: usize) -> Self {
        self.refine *= factor;
        self
    }

    fn steps_for(&self, a: f64, b: f64) -> usize {
        let lo = a.min(b);
        let h = self.dtau_max.min(self.growth * lo);
        let n = ((b - a).abs() / h - 1e-9).ceil().max(1.0) as usize;
        n * self.refine
    }
}

/// Which k-derivatives to carry along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tangents {
    None,
    First,
    Second,
}

/// Solution snapshot at one `tau`.
#[derive(Debug, Clone)]
pub struct PropagatorState {
    pub k: f64,
    pub tau: f64,
    pub y: HarmonicCoeffs,
    /// `d y / dk`.
    pub chi: Option<HarmonicCoeffs>,
    /// `d^2 y / dk^2`.
    pub eta: Option<HarmonicCoeffs>,
    /// Per-block radial integrals: `int_{tau0}^{tau} V ds = sum_n phase[n] A_n(theta)`.
    pub phase: Vec<f64>,
    /// Number of steps taken since `tau0`.
    pub steps: usize,
    /// Largest `| ||y|| - ||f|| |` seen along the way.
    pub max_drift: f64,
}

/// One row of [`Propagator::derivative_norm_table`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeRow {
    pub tau: f64,
    pub w_tau: f64,
    pub w_tautau: f64,
    pub w_k: f64,
    pub w_tauk: f64,
    pub w_kk: f64,
}

/// How `W_kk` is obtained in the derivative table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KkMethod {
    /// Central difference of `chi` in `k` with the given step.
    FiniteDifference(f64),
    /// Second-order tangent of the scheme.
    Tangent,
}

struct BlockOp {
    /// Angular factor at the product-grid nodes; `None` for angle-independent blocks.
    values: Option<Vec<f64>>,
    constant: f64,
    sup: f64,
    /// Eigendecomposition of the Galerkin matrix, built on first use and shared between
    /// blocks with identical angular factors.
    spectral: Arc<OnceLock<Option<Spectral>>>,
}

/// `M = Q diag(lambda) Q^H` on the coefficients listed in `basis`.
struct SpectralBlock {
    basis: Vec<usize>,
    m: DMatrix<Complex64>,
    q: DMatrix<Complex64>,
    lambda: DVector<f64>,
}

/// Galerkin matrix split into the invariant subspaces it couples.
struct Spectral {
    blocks: Vec<SpectralBlock>,
}

impl SpectralBlock {
    fn gather(&self, v: &[Complex64]) -> DVector<Complex64> {
        DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&i| v[i]))
    }

    fn scatter(&self, x: &DVector<Complex64>, out: &mut [Complex64]) {
        for (&i, v) in self.basis.iter().zip(x.iter()) {
            out[i] = *v;
        }
    }
}

impl Spectral {
    fn exp(&self, coef: Complex64, v: &HarmonicCoeffs) -> HarmonicCoeffs {
        let mut out = HarmonicCoeffs::zeros(v.l_max());
        for b in &self.blocks {
            let mut w = b.q.ad_mul(&b.gather(v.as_slice()));
            for (wi, li) in w.iter_mut().zip(b.lambda.iter()) {
                *wi *= (coef * *li).exp();
            }
            b.scatter(&(&b.q * w), out.as_mut_slice());
        }
        out
    }

    fn apply(&self, coef: Complex64, v: &HarmonicCoeffs) -> HarmonicCoeffs {
        let mut out = HarmonicCoeffs::zeros(v.l_max());
        for b in &self.blocks {
            b.scatter(&((&b.m * b.gather(v.as_slice())) * coef), out.as_mut_slice());
        }
        out
    }
}

fn find_root(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Propagator for a fixed potential and step policy.
pub struct Propagator {
    potential: Arc<Potential>,
    policy: StepPolicy,
    k_interval: (f64, f64),
    grid: Arc<SphereGrid>,
    blocks: Vec<BlockOp>,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator").field("policy", &self.policy).field("grid", &self.grid).finish()
    }
}

struct Workspace {
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// Generator of one stage, `g = a Z` with `a = 1/(ik)`.
enum Stage<'a> {
    /// `Z = beta B`.
    Free { beta: f64 },
    /// `Z = c M`, `M` the multiplication by `values`.
    Angular { c: f64, op: &'a BlockOp },
}

impl Propagator {
    pub fn new(spec: &PotentialSpec, policy: StepPolicy) -> Result<Self> {
        policy.validate()?;
        let potential = Arc::new(Potential::new(spec)?);
        Self::with_potential(potential, policy)
    }

    pub fn with_potential(potential: Arc<Potential>, policy: StepPolicy) -> Result<Self> {
        policy.validate()?;
        let l = policy.l_max;
        let band = potential.max_band();
        let stride = policy.azimuthal_stride;
        let grid = Arc::new(SphereGrid::oversampled_with_stride(l, band, stride)?);
        let n_blocks = if potential.spec().family == crate::potentials::Family::Zero { 1 } else { MAX_BLOCK as usize };
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let ang = potential.angular(b);
            let compatible = match ang {
                Angular::SinChi { m, .. } => m % stride == 0,
                Angular::Field(coeffs) => grid.supports(coeffs),
                _ => true,
            };
            if !compatible {
                return Err(Error::InvalidParameter(format!(
                    "potential block {b} has azimuthal orders not divisible by stride {stride}"
                )));
            }
            let op = if let Some(c) = ang.as_constant() {
                BlockOp { values: None, constant: c, sup: c.abs(), spectral: Arc::new(OnceLock::new()) }
            } else {
                let values: Vec<f64> = match ang {
                    Angular::Field(coeffs) => {
                        let g = Arc::new(SphereGrid::with_stride(coeffs.l_max().max(l), grid.n_lat(), grid.n_lon(), stride)?);
                        let f = crate::sphere::sht_inverse(coeffs, &g)?;
                        f.values().iter().map(|v| v.re).collect()
                    }
                    _ => (0..grid.len()).map(|idx| {
                        let (psi, phi) = grid.node(idx);
                        ang.eval(psi, phi)
                    }).collect(),
                };
                let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let shared = blocks
                    .iter()
                    .rev()
                    .find(|b: &&BlockOp| b.values.as_ref() == Some(&values))
                    .map(|b| b.spectral.clone());
                BlockOp { values: Some(values), constant: 0.0, sup, spectral: shared.unwrap_or_default() }
            };
            blocks.push(op);
        }
        Ok(Self { potential, policy, k_interval: DEFAULT_K_INTERVAL, grid, blocks })
    }

    /// Replaces the admissible wavenumber interval.
    pub fn with_k_interval(mut self, lo: f64, hi: f64) -> Self {
        self.k_interval = (lo, hi);
        self
    }

    pub fn policy(&self) -> &StepPolicy {
        &self.policy
    }

    pub fn potential(&self) -> &Arc<Potential> {
        &self.potential
    }

    /// Quadrature grid used for products with the potential.
    pub fn product_grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    fn block_op(&self, block: usize) -> &BlockOp {
        &self.blocks[block.min(self.blocks.len() - 1)]
    }

    fn workspace(&self) -> Workspace {
        Workspace { buf: vec![ZERO; self.grid.len()], scratch: Vec::new() }
    }

    fn check_k(&self, k: f64) -> Result<()> {
        if !(k >= self.k_interval.0 && k <= self.k_interval.1) || k == 0.0 {
            return Err(Error::InvalidWavenumber(k));
        }
        Ok(())
    }

    /// `out = values * v` on the band (Galerkin product).
    fn apply_values(&self, values: &[f64], v: &HarmonicCoeffs, ws: &mut Workspace) -> HarmonicCoeffs {
        self.grid.synthesize_into(v, &mut ws.buf, &mut ws.scratch);
        for (b, a) in ws.buf.iter_mut().zip(values) {
            *b *= *a;
        }
        let mut out = HarmonicCoeffs::zeros(v.l_max());
        self.grid.analyze_into(&mut ws.buf, &mut out, &mut ws.scratch);
        out
    }

    /// `V(tau) v` with the Galerkin potential of the block holding `tau`, scaled by `r`.
    fn apply_potential(&self, block: usize, r: f64, v: &HarmonicCoeffs, ws: &mut Workspace) -> HarmonicCoeffs {
        let op = self.block_op(block);
        if r == 0.0 {
            return HarmonicCoeffs::zeros(v.l_max());
        }
        match &op.values {
            None => v.scaled(Complex64::new(r * op.constant, 0.0)),
            Some(vals) => {
                let mut out = self.apply_values(vals, v, ws);
                out.scale(Complex64::new(r, 0.0));
                out
            }
        }
    }

    /// Eigendecomposition of a block's Galerkin matrix, if the basis is small enough.
    fn spectral<'a>(&self, op: &'a BlockOp) -> Option<&'a Spectral> {
        let vals = op.values.as_ref()?;
        op.spectral.get_or_init(|| self.build_spectral(vals)).as_ref()
    }

    fn build_spectral(&self, vals: &[f64]) -> Option<Spectral> {
        let l_max = self.policy.l_max;
        let stride = self.policy.azimuthal_stride as i64;
        let mut basis = Vec::new();
        for l in 0..=l_max {
            for m in -(l as i64)..=l as i64 {
                if m.rem_euclid(stride) == 0 {
                    basis.push(crate::sphere::lm_index(l, m));
                }
            }
        }
        let n = basis.len();
        if n > SPECTRAL_MAX_DIM {
            return None;
        }
        let mut ws = self.workspace();
        let mut m = DMatrix::from_element(n, n, ZERO);
        let mut unit = HarmonicCoeffs::zeros(l_max);
        for (j, &bj) in basis.iter().enumerate() {
            unit.as_mut_slice()[bj] = Complex64::new(1.0, 0.0);
            let col = self.apply_values(vals, &unit, &mut ws);
            unit.as_mut_slice()[bj] = ZERO;
            for (i, &bi) in basis.iter().enumerate() {
                m[(i, j)] = col.as_slice()[bi];
            }
        }
        let m = (&m + m.adjoint()).scale(0.5);
        // connected components of the coupling graph
        let tol = 1e-13 * m.iter().fold(0.0f64, |a, v| a.max(v.norm())).max(f64::MIN_POSITIVE);
        let mut parent: Vec<usize> = (0..n).collect();
        for j in 0..n {
            for i in 0..j {
                if m[(i, j)].norm() > tol {
                    let (ri, rj) = (find_root(&mut parent, i), find_root(&mut parent, j));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
        for i in 0..n {
            let r = find_root(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let blocks = groups
            .into_values()
            .map(|members| {
                let d = members.len();
                let mb = DMatrix::from_fn(d, d, |i, j| m[(members[i], members[j])]);
                let eig = SymmetricEigen::new(mb.clone());
                SpectralBlock {
                    basis: members.iter().map(|&i| basis[i]).collect(),
                    m: mb,
                    q: eig.eigenvectors,
                    lambda: eig.eigenvalues,
                }
            })
            .collect();
        Some(Spectral { blocks })
    }

    /// `g v` for an angular stage.
    fn stage_gen(&self, coef: Complex64, op: &BlockOp, v: &HarmonicCoeffs, ws: &mut Workspace) -> HarmonicCoeffs {
        if let Some(sp) = self.spectral(op) {
            return sp.apply(coef, v);
        }
        match &op.values {
            None => v.scaled(coef * op.constant),
            Some(vals) => {
                let mut out = self.apply_values(vals, v, ws);
                out.scale(coef);
                out
            }
        }
    }

    /// `exp(coef M) v` by a scaled Taylor series.
    fn stage_exp(&self, coef: Complex64, op: &BlockOp, v: &HarmonicCoeffs, ws: &mut Workspace) -> Result<HarmonicCoeffs> {
        let vals = match &op.values {
            None => return Ok(v.scaled((coef * op.constant).exp())),
            Some(vals) => vals,
        };
        if let Some(sp) = self.spectral(op) {
            return Ok(sp.exp(coef, v));
        }
        let theta = coef.norm() * op.sup;
        let sub = theta.ceil().max(1.0) as usize;
        let c = coef / sub as f64;
        let mut cur = v.clone();
        let v_norm = v.norm();
        if v_norm == 0.0 {
            return Ok(cur);
        }
        for _ in 0..sub {
            let mut sum = cur.clone();
            let mut term = cur;
            let mut n = 0;
            loop {
                n += 1;
                let mut next = self.apply_values(vals, &term, ws);
                next.scale(c / n as f64);
                let tn = next.norm();
                sum.axpy(Complex64::new(1.0, 0.0), &next);
                term = next;
                if tn <= 1e-17 * v_norm {
                    break;
                }
                if n > 80 || !tn.is_finite() {
                    return Err(Error::NonFinite("Taylor series of the potential step did not converge".into()));
                }
            }
            cur = sum;
        }
        Ok(cur)
    }

    /// Applies one stage to `(y, chi, eta)` including the exact tangent updates.
    fn apply_stage(
        &self,
        k: f64,
        stage: Stage<'_>,
        y: &mut HarmonicCoeffs,
        chi: &mut Option<HarmonicCoeffs>,
        eta: &mut Option<HarmonicCoeffs>,
        ws: &mut Workspace,
    ) -> Result<()> {
        let a = Complex64::new(0.0, -1.0 / k);
        let inv_k = 1.0 / k;
        match stage {
            Stage::Free { beta } => {
                if beta == 0.0 {
                    return Ok(());
                }
                let l_max = y.l_max();
                for l in 0..=l_max {
                    let g = a * (beta * (l * (l + 1)) as f64);
                    let e = g.exp();
                    let start = l * l;
                    for idx in start..start + 2 * l + 1 {
                        let y_new = e * y.as_slice()[idx];
                        if let Some(c) = chi.as_mut() {
                            let c_old_e = e * c.as_slice()[idx];
                            if let Some(h) = eta.as_mut() {
                                let h_val = e * h.as_slice()[idx] - 2.0 * inv_k * g * c_old_e
                                    + inv_k * inv_k * (g * g + 2.0 * g) * y_new;
                                h.as_mut_slice()[idx] = h_val;
                            }
                            c.as_mut_slice()[idx] = c_old_e - inv_k * g * y_new;
                        }
                        y.as_mut_slice()[idx] = y_new;
                    }
                }
            }
            Stage::Angular { c, op } => {
                if c == 0.0 || (op.values.is_none() && op.constant == 0.0) {
                    return Ok(());
                }
                let coef = a * c;
                let ey = self.stage_exp(coef, op, y, ws)?;
                if let Some(ch) = chi.as_mut() {
                    let echi = self.stage_exp(coef, op, ch, ws)?;
                    let gy = self.stage_gen(coef, op, &ey, ws);
                    if let Some(h) = eta.as_mut() {
                        let mut eh = self.stage_exp(coef, op, h, ws)?;
                        let gchi = self.stage_gen(coef, op, &echi, ws);
                        let ggy = self.stage_gen(coef, op, &gy, ws);
                        eh.axpy(Complex64::new(-2.0 * inv_k, 0.0), &gchi);
                        eh.axpy(Complex64::new(inv_k * inv_k, 0.0), &ggy);
                        eh.axpy(Complex64::new(2.0 * inv_k * inv_k, 0.0), &gy);
                        *h = eh;
                    }
                    let mut new_chi = echi;
                    new_chi.axpy(Complex64::new(-inv_k, 0.0), &gy);
                    *ch = new_chi;
                }
                *y = ey;
            }
        }
        Ok(())
    }

    /// Runs from `tau0` through the monotone list `checkpoints` and returns the state at
    /// each checkpoint. Checkpoints may also decrease (inverse flow).
    pub fn run(
        &self,
        k: f64,
        tau0: f64,
        f: &HarmonicCoeffs,
        tangents: Tangents,
        checkpoints: &[f64],
    ) -> Result<Vec<PropagatorState>> {
        self.check_k(k)?;
        if !self.grid.supports(f) {
            return Err(Error::InvalidParameter(format!(
                "initial data has azimuthal orders not divisible by stride {}",
                self.policy.azimuthal_stride
            )));
        }
        if !(tau0 >= 1.0) {
            return Err(Error::InvalidTau(tau0));
        }
        if let Some(bad) = checkpoints.iter().find(|t| !(**t >= 1.0)) {
            return Err(Error::InvalidTau(*bad));
        }
        if checkpoints.is_empty() {
            return Ok(Vec::new());
        }
        let forward = checkpoints[checkpoints.len() - 1] >= tau0;
        let monotone = std::iter::once(tau0)
            .chain(checkpoints.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| if forward { w[1] >= w[0] } else { w[1] <= w[0] });
        if !monotone {
            return Err(Error::InvalidParameter("checkpoints must be monotone away from tau0".into()));
        }
        let l_max = self.policy.l_max;
        let mut y = f.resized(l_max);
        let f_norm = y.norm();
        let mut chi = (tangents >= Tangents::First).then(|| HarmonicCoeffs::zeros(l_max));
        let mut eta = (tangents >= Tangents::Second).then(|| HarmonicCoeffs::zeros(l_max));
        let mut ws = self.workspace();
        let mut phase = vec![0.0; MAX_BLOCK as usize];
        let mut out = Vec::with_capacity(checkpoints.len());
        let mut steps = 0usize;
        let mut max_drift = 0.0f64;

        // free flow not yet applied starts here; scalar potential phase not yet applied
        let mut free_from = tau0;
        let mut pending_scalar = 0.0f64;
        let mut tau = tau0;

        let flush_free = |to: f64, y: &mut HarmonicCoeffs, chi: &mut Option<HarmonicCoeffs>, eta: &mut Option<HarmonicCoeffs>, free_from: &mut f64, ws: &mut Workspace| -> Result<()> {
            if *free_from != to {
                let beta = crate::sphere::free_flow_exponent(*free_from, to);
                self.apply_stage(k, Stage::Free { beta }, y, chi, eta, ws)?;
                *free_from = to;
            }
            Ok(())
        };
        let scalar_op = BlockOp { values: None, constant: 1.0, sup: 1.0, spectral: Arc::new(OnceLock::new()) };

        for &target in checkpoints {
            let lo = tau.min(target);
            let hi = tau.max(target);
            let mut pts = vec![lo];
            pts.extend(self.potential.block_edges(lo, hi));
            pts.push(hi);
            if !forward {
                pts.reverse();
            }
            for seg in pts.windows(2) {
                let (sa, sb) = (seg[0], seg[1]);
                if sa == sb {
                    continue;
                }
                let block = self.potential.block_of(0.5 * (sa + sb));
                let op = self.block_op(block);
                let scalar = op.values.is_none();
                let n = self.policy.steps_for(sa, sb);
                let h = (sb - sa) / n as f64;
                let mut pending = 0.0f64;
                for j in 0..n {
                    let t0 = sa + j as f64 * h;
                    let t1 = if j + 1 == n { sb } else { sa + (j + 1) as f64 * h };
                    let m = 0.5 * (t0 + t1);
                    let c0 = self.potential.radial_integral(t0, m);
                    let c1 = self.potential.radial_integral(m, t1);
                    phase[block] += c0 + c1;
                    if scalar {
                        pending_scalar += (c0 + c1) * op.constant;
                    } else {
                        pending += c0;
                        if pending != 0.0 {
                            flush_free(t0, &mut y, &mut chi, &mut eta, &mut free_from, &mut ws)?;
                            self.apply_stage(k, Stage::Angular { c: pending, op }, &mut y, &mut chi, &mut eta, &mut ws)?;
                        }
                        pending = c1;
                    }
                    steps += 1;
                    let drift = (y.norm() - f_norm).abs();
                    max_drift = max_drift.max(drift);
                    if drift > MAX_STEP_DRIFT {
                        return Err(Error::StepRejected { tau: t1, drift });
                    }
                }
                if pending != 0.0 {
                    flush_free(sb, &mut y, &mut chi, &mut eta, &mut free_from, &mut ws)?;
                    self.apply_stage(k, Stage::Angular { c: pending, op }, &mut y, &mut chi, &mut eta, &mut ws)?;
                }
            }
            tau = target;
            flush_free(tau, &mut y, &mut chi, &mut eta, &mut free_from, &mut ws)?;
            if pending_scalar != 0.0 {
                self.apply_stage(k, Stage::Angular { c: pending_scalar, op: &scalar_op }, &mut y, &mut chi, &mut eta, &mut ws)?;
                pending_scalar = 0.0;
            }
            let drift = (y.norm() - f_norm).abs();
            max_drift = max_drift.max(drift);
            if drift > MAX_STEP_DRIFT {
                return Err(Error::StepRejected { tau, drift });
            }
            out.push(PropagatorState {
                k,
                tau,
                y: y.clone(),
                chi: chi.clone(),
                eta: eta.clone(),
                phase: phase.clone(),
                steps,
                max_drift,
            });
        }
        Ok(out)
    }

    /// `U(k, tau0, tau1) f`.
    pub fn propagate(&self, k: f64, tau0: f64, tau1: f64, f: &HarmonicCoeffs) -> Result<HarmonicCoeffs> {
        Ok(self.run(k, tau0, f, Tangents::None, &[tau1])?.pop().expect("one checkpoint").y)
    }

    /// `(U f, d/dk U f)`.
    pub fn propagate_variational(
        &self,
        k: f64,
        tau0: f64,
        tau1: f64,
        f: &HarmonicCoeffs,
    ) -> Result<(HarmonicCoeffs, HarmonicCoeffs)> {
        let s = self.run(k, tau0, f, Tangents::First, &[tau1])?.pop().expect("one checkpoint");
        Ok((s.y, s.chi.expect("first tangent")))
    }

    /// `(B/tau^2 + V(tau)) v`.
    fn apply_generator(&self, tau: f64, v: &HarmonicCoeffs, ws: &mut Workspace) -> HarmonicCoeffs {
        let block = self.potential.block_of(tau);
        let r = self.potential.radial(tau)[0];
        let mut out = self.apply_potential(block, r, v, ws);
        let mut bv = crate::sphere::apply_b(v);
        bv.scale(Complex64::new(1.0 / (tau * tau), 0.0));
        out.axpy(Complex64::new(1.0, 0.0), &bv);
        out
    }

    /// `(y_tau, y_tautau)` from the equation and its `tau` derivative.
    pub fn time_derivatives(&self, state: &PropagatorState) -> (HarmonicCoeffs, HarmonicCoeffs) {
        let mut ws = self.workspace();
        let (tau, k) = (state.tau, state.k);
        let a = Complex64::new(0.0, -1.0 / k);
        let mut u = self.apply_generator(tau, &state.y, &mut ws);
        u.scale(a);
        let mut utau = self.apply_generator(tau, &u, &mut ws);
        let block = self.potential.block_of(tau);
        let r1 = self.potential.radial(tau)[1];
        let vtau_y = self.apply_potential(block, r1, &state.y, &mut ws);
        utau.axpy(Complex64::new(1.0, 0.0), &vtau_y);
        let by = crate::sphere::apply_b(&state.y);
        utau.axpy(Complex64::new(-2.0 / (tau * tau * tau), 0.0), &by);
        utau.scale(a);
        (u, utau)
    }

    /// `chi_tau = (1/(ik)) (B/tau^2 + V) chi - y_tau / k`.
    pub fn chi_tau(&self, state: &PropagatorState, y_tau: &HarmonicCoeffs) -> Option<HarmonicCoeffs> {
        let chi = state.chi.as_ref()?;
        let mut ws = self.workspace();
        let mut out = self.apply_generator(state.tau, chi, &mut ws);
        out.scale(Complex64::new(0.0, -1.0 / state.k));
        out.axpy(Complex64::new(-1.0 / state.k, 0.0), y_tau);
        Some(out)
    }

    /// `mu = chi_tau_tau`, the `tau` derivative of [`Propagator::chi_tau`].
    pub fn chi_tautau(&self, state: &PropagatorState, y_tau: &HarmonicCoeffs, y_tautau: &HarmonicCoeffs) -> Option<HarmonicCoeffs> {
        let chi = state.chi.as_ref()?;
        let chi_t = self.chi_tau(state, y_tau)?;
        let (tau, k) = (state.tau, state.k);
        let mut ws = self.workspace();
        let block = self.potential.block_of(tau);
        let r1 = self.potential.radial(tau)[1];
        let mut out = self.apply_generator(tau, &chi_t, &mut ws);
        out.axpy(Complex64::new(1.0, 0.0), &self.apply_potential(block, r1, chi, &mut ws));
        out.axpy(Complex64::new(-2.0 / (tau * tau * tau), 0.0), &crate::sphere::apply_b(chi));
        out.scale(Complex64::new(0.0, -1.0 / k));
        out.axpy(Complex64::new(-1.0 / k, 0.0), y_tautau);
        Some(out)
    }

    /// Norms of `W_tau f, W_tautau f, W_k f, W_tauk f, W_kk f` at each checkpoint,
    /// with `W = U(k, 1, .)`.
    pub fn derivative_norm_table(
        &self,
        k: f64,
        f: &HarmonicCoeffs,
        checkpoints: &[f64],
        kk: KkMethod,
    ) -> Result<Vec<DerivativeRow>> {
        let tangents = if kk == KkMethod::Tangent { Tangents::Second } else { Tangents::First };
        let states = self.run(k, 1.0, f, tangents, checkpoints)?;
        let kk_norms: Vec<f64> = match kk {
            KkMethod::Tangent => states.iter().map(|s| s.eta.as_ref().expect("eta").norm()).collect(),
            KkMethod::FiniteDifference(h) => {
                let plus = self.run(k + h, 1.0, f, Tangents::First, checkpoints)?;
                let minus = self.run(k - h, 1.0, f, Tangents::First, checkpoints)?;
                plus.iter()
                    .zip(&minus)
                    .map(|(p, m)| p.chi.as_ref().unwrap().sub(m.chi.as_ref().unwrap()).norm() / (2.0 * h))
                    .collect()
            }
        };
        Ok(states
            .iter()
            .zip(kk_norms)
            .map(|(s, w_kk)| {
                let (yt, ytt) = self.time_derivatives(s);
                let ct = self.chi_tau(s, &yt).expect("chi");
                DerivativeRow {
                    tau: s.tau,
                    w_tau: yt.norm(),
                    w_tautau: ytt.norm(),
                    w_k: s.chi.as_ref().unwrap().norm(),
                    w_tauk: ct.norm(),
                    w_kk,
                }
            })
            .collect())
    }

    /// Phase function `Phi(theta) = int_{tau0}^{tau} V ds` of a state on `grid`.
    pub fn phase_field(&self, state: &PropagatorState, grid: &Arc<SphereGrid>) -> SphericalField {
        let active: Vec<(usize, f64)> = state.phase.iter().copied().enumerate().filter(|(_, c)| *c != 0.0).collect();
        SphericalField::from_fn(grid.clone(), |psi, phi| {
            let v: f64 = active.iter().map(|&(b, c)| c * self.potential.angular(b).eval(psi, phi)).sum();
            Complex64::new(v, 0.0)
        })
    }

    /// Grid values of `W_mod = exp[-(ik)^{-1} Phi] W f` for a state.
    pub fn scalar_modified_field(&self, state: &PropagatorState, grid: &Arc<SphereGrid>) -> Result<SphericalField> {
        let phi = self.phase_field(state, grid);
        let mut y = crate::sphere::sht_inverse(&state.y, grid)?;
        for (v, p) in y.values_mut().iter_mut().zip(phi.values()) {
            *v *= Complex64::from_polar(1.0, p.re / state.k);
        }
        Ok(y)
    }

    /// Grid on which scalar-modified fields are compared.
    pub fn comparison_grid(&self) -> Result<Arc<SphereGrid>> {
        let band = self.policy.l_max + self.potential.max_band().min(4 * self.policy.l_max + 64);
        let s = self.policy.azimuthal_stride;
        Ok(Arc::new(SphereGrid::with_stride(self.policy.l_max, band + 8, (2 * band) / s + 16, s)?))
    }

    /// `W_mod(k, tau) f` analysed back to coefficients at band `l_out`.
    pub fn scalar_modified(&self, k: f64, tau: f64, f: &HarmonicCoeffs, l_out: usize) -> Result<HarmonicCoeffs> {
        let state = self.run(k, 1.0, f, Tangents::None, &[tau])?.pop().expect("state");
        let fine = self.comparison_grid()?;
        let s = self.policy.azimuthal_stride;
        let grid = Arc::new(SphereGrid::with_stride(
            l_out.max(self.policy.l_max),
            fine.n_lat().max(l_out + 1),
            fine.n_lon().max(2 * (l_out / s) + 2),
            s,
        )?);
        let field = self.scalar_modified_field(&state, &grid)?;
        crate::sphere::sht_forward(&field, l_out)
    }

    /// `||y(tau_i) - y(tau_N)||` for `W = U(k, 1, .)`.
    pub fn cauchy_profile(&self, k: f64, f: &HarmonicCoeffs, checkpoints: &[f64]) -> Result<Vec<(f64, f64)>> {
        let states = self.run(k, 1.0, f, Tangents::None, checkpoints)?;
        let last = &states.last().ok_or_else(|| Error::InvalidParameter("no checkpoints".into()))?.y;
        Ok(states.iter().map(|s| (s.tau, s.y.sub(last).norm())).collect())
    }

    /// `||W_mod(tau_i) f - W_mod(tau_N) f||` measured by quadrature on the comparison grid.
    pub fn scalar_modified_profile(&self, k: f64, f: &HarmonicCoeffs, checkpoints: &[f64]) -> Result<Vec<(f64, f64)>> {
        let states = self.run(k, 1.0, f, Tangents::None, checkpoints)?;
        let grid = self.comparison_grid()?;
        let fields: Vec<SphericalField> = states.iter().map(|s| self.scalar_modified_field(s, &grid)).collect::<Result<_>>()?;
        let last = fields.last().ok_or_else(|| Error::InvalidParameter("no checkpoints".into()))?;
        Ok(states
            .iter()
            .zip(&fields)
            .map(|(s, fl)| {
                let diff: Vec<Complex64> = fl.values().iter().zip(last.values()).map(|(a, b)| a - b).collect();
                (s.tau, grid.quadrature_norm_sqr(&diff).sqrt())
            })
            .collect())
    }
}

/// `U(k, tau0, tau1) f` for a spec and policy.
pub fn propagate(
    k: f64,
    tau0: f64,
    tau1: f64,
    f: &HarmonicCoeffs,
    spec: &PotentialSpec,
    policy: StepPolicy,
) -> Result<HarmonicCoeffs> {
    Propagator::new(spec, policy)?.propagate(k, tau0, tau1, f)
}

/// `(U f, d/dk U f)` for a spec and policy.
pub fn propagate_variational(
    k: f64,
    tau0: f64,
    tau1: f64,
    f: &HarmonicCoeffs,
    spec: &PotentialSpec,
    policy: StepPolicy,
) -> Result<(HarmonicCoeffs, HarmonicCoeffs)> {
    Propagator::new(spec, policy)?.propagate_variational(k, tau0, tau1, f)
}
