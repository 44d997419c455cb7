use proptest::prelude::*;
use wkb_core::modified::{eval_dollard, GridSpec, ModifiedEvolution, ShellOptions, WavePacketSpec};
use wkb_core::potentials::{Family, Potential, PotentialSpec};
use wkb_core::propagator::StepPolicy;
use wkb_core::sphere::{gauss_legendre, HarmonicCoeffs};
use wkb_core::Complex64;

fn policy() -> StepPolicy {
    StepPolicy { l_max: 12, ..StepPolicy::default() }
}

fn dyadic() -> PotentialSpec {
    PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.6).with_l_pot(8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn modified_evolution_is_isometric(seed in 0u64..1000, t in 6.0..12.0f64) {
        let f = WavePacketSpec::seeded(seed, 3, 1);
        let evo = ModifiedEvolution::new(&dyadic(), policy()).unwrap();
        let grid = GridSpec::for_time(t, f.delta2, 64).unwrap();
        let e = evo.eval(t, &f, &grid).unwrap();
        prop_assert!((e.norm() - f.norm()).abs() <= 1e-3 * f.norm(), "norm {} vs {}", e.norm(), f.norm());
    }
}

#[test]
fn field_vanishes_off_the_support_shell() {
    let f = WavePacketSpec::seeded(5, 4, 1);
    let t = 8.0;
    let grid = GridSpec::for_time(t, f.delta2, 32).unwrap();
    let e = ModifiedEvolution::new(&dyadic(), policy()).unwrap().eval(t, &f, &grid).unwrap();
    let eps = 2.0 * grid.spacing();
    let (lo, hi) = (2.0 * f.delta1 * t - eps, 2.0 * f.delta2 * t + eps);
    for (idx, v) in e.values().iter().enumerate() {
        let x = grid.position(idx);
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if r < lo || r > hi {
            assert_eq!(*v, Complex64::new(0.0, 0.0), "nonzero at |x| = {r}");
        }
    }
}

#[test]
fn doubling_the_shells_changes_little() {
    let f = WavePacketSpec::seeded(11, 4, 1);
    let t = 8.0;
    let grid = GridSpec::for_time(t, f.delta2, 64).unwrap();
    let eval = |shells: usize| {
        let opts = ShellOptions { shells, max_shells: shells, ..ShellOptions::default() };
        ModifiedEvolution::new(&dyadic(), policy()).unwrap().with_options(opts).unwrap().eval(t, &f, &grid).unwrap()
    };
    let d = eval(128).distance(&eval(256)).unwrap();
    assert!(d <= 1e-4 * f.norm(), "shell doubling moved the field by {d:e}");
}

/// Panelled Gauss-Legendre `int_a^b V(s) ds` along one fixed direction.
fn line_integral(pot: &Potential, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre(12);
    let panels = 2000;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            let lo = a + p as f64 * h;
            x.iter().zip(&w).map(|(xi, wi)| 0.5 * h * wi * pot.eval(lo + 0.5 * h * (xi + 1.0), 0.9, 2.0)).sum::<f64>()
        })
        .sum()
}

#[test]
fn dollard_phase_matches_line_quadrature() {
    let spec = PotentialSpec::new(Family::RadialOnly).with_gamma(0.7).with_amplitude(0.6);
    let pot = Potential::new(&spec).unwrap();
    let f = WavePacketSpec::seeded(2, 2, 1);
    let t = 5.0;
    let grid = GridSpec::for_time(t, f.delta2, 16).unwrap();
    let with_v = eval_dollard(t, &f, &spec, &grid).unwrap();
    let free = eval_dollard(t, &f, &PotentialSpec::zero(), &grid).unwrap();
    let peak = free.max_abs();
    let mut checked = 0;
    for (idx, (a, b)) in with_v.values().iter().zip(free.values()).enumerate() {
        if b.norm() < 1e-3 * peak {
            continue;
        }
        let x = grid.position(idx);
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let expected = Complex64::from_polar(1.0, -t / r * line_integral(&pot, 0.0, r));
        assert!((a / b - expected).norm() <= 1e-8, "|x| = {r}: {} vs {expected}", a / b);
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn radial_potential_corrections_differ_by_a_shell_phase() {
    // for a single degree l and radial V the two corrections differ by
    // exp(-i l(l+1) (t/r)(1 - 1/r)) exp(i (t/r) int_0^1 v)
    let spec = PotentialSpec::new(Family::RadialOnly).with_gamma(0.7).with_amplitude(0.6);
    let pot = Potential::new(&spec).unwrap();
    let f = WavePacketSpec::new(0.5, 1.0, HarmonicCoeffs::single(2, 2, 1)).unwrap();
    let t = 8.0;
    let grid = GridSpec::for_time(t, f.delta2, 64).unwrap();
    let e = ModifiedEvolution::new(&spec, StepPolicy { l_max: 2, ..StepPolicy::default() }).unwrap().eval(t, &f, &grid).unwrap();
    let d = eval_dollard(t, &f, &spec, &grid).unwrap();
    let inner = line_integral(&pot, 0.0, 1.0);
    let lam = 6.0;
    let mut err = 0.0;
    for (idx, (a, b)) in e.values().iter().zip(d.values()).enumerate() {
        let x = grid.position(idx);
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if r == 0.0 {
            continue;
        }
        let shell = Complex64::from_polar(1.0, -lam * (t / r) * (1.0 - 1.0 / r) + t / r * inner);
        err += (a - shell * b).norm_sqr();
    }
    let err = (err * grid.cell_volume()).sqrt();
    assert!(err <= 1e-2 * f.norm(), "aligned distance {err:e}");
}

/// Closed-form Cook residual for `V = 0`: every degree carries `R(r/2t) exp(i g_l(r))` with
/// `g_l = -l(l+1) t (1/r - 1/r^2)`.
fn free_cook_residual(t: f64, f: &WavePacketSpec) -> f64 {
    let (x, w) = gauss_legendre(16);
    let (a, b) = (2.0 * f.delta1 * t, 2.0 * f.delta2 * t);
    let panels = 64;
    let h = (b - a) / panels as f64;
    let l_max = f.angular.l_max();
    let mut total = 0.0;
    for l in 0..=l_max {
        let weight = f.angular.degree_power(l);
        if weight == 0.0 {
            continue;
        }
        let lam = (l * (l + 1)) as f64;
        for p in 0..panels {
            for (xi, wi) in x.iter().zip(&w) {
                let r = a + h * (p as f64 + 0.5 * (xi + 1.0));
                let [r0, r1, r2] = f.profile(r / (2.0 * t));
                let (r1, r2) = (r1 / (2.0 * t), r2 / (4.0 * t * t));
                let g1 = -lam * t * (-1.0 / (r * r) + 2.0 / r.powi(3));
                let g2 = -lam * t * (2.0 / r.powi(3) - 6.0 / r.powi(4));
                let i = Complex64::i();
                let y1 = r1 + i * g1 * r0;
                let y2 = r2 + 2.0 * i * g1 * r1 + (i * g2 - g1 * g1) * r0;
                total += 0.5 * h * wi * weight * r * r * (y2 + 2.0 / r * y1).norm_sqr();
            }
        }
    }
    ((2.0 * t).powi(-3) * total).sqrt()
}

#[test]
fn free_cook_residual_matches_closed_form() {
    let f = WavePacketSpec::seeded(9, 4, 1);
    let evo = ModifiedEvolution::new(&PotentialSpec::zero(), StepPolicy { l_max: 4, ..StepPolicy::default() }).unwrap();
    for &t in &[4.0, 16.0, 64.0] {
        let got = evo.cook_residual(t, &f).unwrap();
        let exact = free_cook_residual(t, &f);
        assert!((got - exact).abs() <= 1e-6 * exact, "t={t}: {got:e} vs {exact:e}");
    }
}

#[test]
fn zero_shift_intertwining_is_exact() {
    let f = WavePacketSpec::seeded(1, 2, 1);
    let grid = GridSpec::for_time(8.0, f.delta2, 16).unwrap();
    let evo = ModifiedEvolution::new(&dyadic(), policy()).unwrap();
    assert_eq!(evo.intertwining_residual(8.0, 0.0, &f, &grid).unwrap(), 0.0);
    assert!(evo.intertwining_residual(8.0, 7.5, &f, &grid).is_err());
}
