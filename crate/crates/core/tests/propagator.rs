use proptest::prelude::*;
use wkb_core::potentials::{Family, Potential, PotentialSpec};
use wkb_core::propagator::{Propagator, StepPolicy};
use wkb_core::sphere::{apply_u0, coeff_count, gauss_legendre, HarmonicCoeffs};
use wkb_core::Complex64;

fn packet(l_max: usize, raw: &[(f64, f64)]) -> HarmonicCoeffs {
    let data = raw.iter().take(coeff_count(l_max)).map(|&(a, b)| Complex64::new(a, b)).collect();
    HarmonicCoeffs::from_vec(l_max, data).unwrap()
}

fn arb_packet(l_max: usize) -> impl Strategy<Value = HarmonicCoeffs> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), coeff_count(l_max)).prop_map(move |raw| packet(l_max, &raw))
}

fn dyadic() -> Propagator {
    let spec = PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.6).with_l_pot(8);
    Propagator::new(&spec, StepPolicy { l_max: 12, ..StepPolicy::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn propagation_is_linear(
        f in arb_packet(12),
        g in arb_packet(12),
        a in (-2.0..2.0f64, -2.0..2.0f64),
        b in (-2.0..2.0f64, -2.0..2.0f64),
        k in 0.5..4.0f64,
    ) {
        let p = dyadic();
        let (a, b) = (Complex64::new(a.0, a.1), Complex64::new(b.0, b.1));
        let mut combo = f.scaled(a);
        combo.axpy(b, &g);
        let lhs = p.propagate(k, 1.0, 24.0, &combo).unwrap();
        let mut rhs = p.propagate(k, 1.0, 24.0, &f).unwrap().scaled(a);
        rhs.axpy(b, &p.propagate(k, 1.0, 24.0, &g).unwrap());
        prop_assert!(lhs.sub(&rhs).norm() <= 1e-10 * (1.0 + combo.norm()));
    }

    #[test]
    fn propagation_is_unitary_and_invertible(f in arb_packet(12), k in 0.5..4.0f64, tau in 2.0..64.0f64) {
        let p = dyadic();
        let y = p.propagate(k, 1.0, tau, &f).unwrap();
        prop_assert!((y.norm() - f.norm()).abs() <= 1e-8 * f.norm());
        let back = p.propagate(k, tau, 1.0, &y).unwrap();
        prop_assert!(back.sub(&f).norm() <= 1e-8 * f.norm());
    }
}

#[test]
fn zero_potential_reproduces_the_free_group() {
    let p = Propagator::new(&PotentialSpec::zero(), StepPolicy { l_max: 8, ..StepPolicy::default() }).unwrap();
    let f = packet(8, &(0..coeff_count(8)).map(|i| ((i as f64).sin(), (i as f64 * 0.3).cos())).collect::<Vec<_>>());
    for &k in &[0.5, 1.0, 2.0, 4.0] {
        for &tau in &[1.5, 8.0, 100.0, 512.0] {
            let y = p.propagate(k, 1.0, tau, &f).unwrap();
            let exact = apply_u0(k, 1.0, tau, &f).unwrap();
            assert!(y.sub(&exact).norm() <= 1e-12 * f.norm(), "k={k} tau={tau}");
        }
    }
}

/// `int_a^b V(s, theta) ds` by panelled Gauss-Legendre at a fixed direction.
fn line_integral(pot: &Potential, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre(10);
    let mut edges = vec![a];
    edges.extend(pot.block_edges(a, b));
    edges.push(b);
    let mut total = 0.0;
    for e in edges.windows(2) {
        let panels = 400;
        let h = (e[1] - e[0]) / panels as f64;
        for p in 0..panels {
            let lo = e[0] + p as f64 * h;
            for (xi, wi) in x.iter().zip(&w) {
                total += 0.5 * h * wi * pot.eval(lo + 0.5 * h * (xi + 1.0), 1.1, 0.4);
            }
        }
    }
    total
}

#[test]
fn radial_potential_is_a_scalar_phase() {
    let spec = PotentialSpec::new(Family::RadialOnly).with_gamma(0.7).with_amplitude(0.8);
    let pot = Potential::new(&spec).unwrap();
    let p = Propagator::new(&spec, StepPolicy { l_max: 6, ..StepPolicy::default() }).unwrap();
    let f = packet(6, &(0..coeff_count(6)).map(|i| (1.0 / (1.0 + i as f64), 0.2)).collect::<Vec<_>>());
    let k = 1.3;
    for &tau in &[7.0, 40.0, 300.0] {
        let y = p.propagate(k, 1.0, tau, &f).unwrap();
        let phase = Complex64::from_polar(1.0, -line_integral(&pot, 1.0, tau) / k);
        let exact = apply_u0(k, 1.0, tau, &f).unwrap().scaled(phase);
        assert!(y.sub(&exact).norm() <= 1e-10 * f.norm(), "tau={tau}: {:e}", y.sub(&exact).norm());
    }
}

#[test]
fn strang_splitting_is_second_order() {
    let p = dyadic();
    let f = packet(4, &(0..coeff_count(4)).map(|i| ((i as f64 * 0.7).cos(), 0.1 * i as f64)).collect::<Vec<_>>());
    let f = f.resized(12);
    let (k, tau) = (1.0, 64.0);
    let run = |refine: usize| {
        let pr = Propagator::new(p.potential().spec(), p.policy().refined(refine)).unwrap();
        pr.propagate(k, 1.0, tau, &f).unwrap()
    };
    let oracle = run(8);
    let coarse = run(1).sub(&oracle).norm();
    let fine = run(2).sub(&oracle).norm();
    // the dt/8 oracle carries 1/64 of the coarse error, so the observed ratio sits near 4 * 63/60
    let ratio = coarse / fine;
    assert!((3.4..=4.6).contains(&ratio), "ratio {ratio} (coarse {coarse:e}, fine {fine:e})");
}
