use std::sync::Arc;

use proptest::prelude::*;
use wkb_core::sphere::{apply_b, apply_u0, coeff_count, lm_index, sht_forward, sht_inverse, HarmonicCoeffs, SphereGrid};
use wkb_core::Complex64;

fn coeffs(l_max: usize, raw: &[(f64, f64)]) -> HarmonicCoeffs {
    let data = raw.iter().take(coeff_count(l_max)).map(|&(a, b)| Complex64::new(a, b)).collect();
    HarmonicCoeffs::from_vec(l_max, data).unwrap()
}

fn arb_coeffs(max_l: usize) -> impl Strategy<Value = HarmonicCoeffs> {
    (0..=max_l).prop_flat_map(|l| {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), coeff_count(l)).prop_map(move |raw| coeffs(l, &raw))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transform_roundtrip(c in arb_coeffs(20)) {
        let grid = Arc::new(SphereGrid::for_band_limit(c.l_max()).unwrap());
        let back = sht_forward(&sht_inverse(&c, &grid).unwrap(), c.l_max()).unwrap();
        prop_assert!(back.sub(&c).norm() <= 1e-12 * (1.0 + c.norm()));
    }

    #[test]
    fn parseval_on_the_quadrature_grid(c in arb_coeffs(20)) {
        let grid = Arc::new(SphereGrid::oversampled(c.l_max(), 3).unwrap());
        let field = sht_inverse(&c, &grid).unwrap();
        let q = grid.quadrature_norm_sqr(field.values());
        prop_assert!((q - c.norm().powi(2)).abs() <= 1e-12 * (1.0 + q));
    }

    #[test]
    fn free_flow_is_a_unitary_group(
        c in arb_coeffs(12),
        k in 0.5..4.0f64,
        a in 1.0..50.0f64,
        b in 1.0..50.0f64,
        d in 1.0..50.0f64,
    ) {
        let direct = apply_u0(k, a, d, &c).unwrap();
        let composed = apply_u0(k, b, d, &apply_u0(k, a, b, &c).unwrap()).unwrap();
        prop_assert!(direct.sub(&composed).norm() <= 1e-12 * (1.0 + c.norm()));
        prop_assert!((direct.norm() - c.norm()).abs() <= 1e-12 * (1.0 + c.norm()));
        let back = apply_u0(k, d, a, &direct).unwrap();
        prop_assert!(back.sub(&c).norm() <= 1e-12 * (1.0 + c.norm()));
    }
}

#[test]
fn free_flow_matches_the_degree_multiplier() {
    // exp(-i l(l+1) (1/tau0 - 1/tau1) / k) per degree
    let l_max = 6;
    let (k, t0, t1) = (0.7, 2.0, 9.0);
    let mut c = HarmonicCoeffs::zeros(l_max);
    for (i, v) in c.as_mut_slice().iter_mut().enumerate() {
        *v = Complex64::new(1.0 + i as f64, -0.5 * i as f64);
    }
    let out = apply_u0(k, t0, t1, &c).unwrap();
    for l in 0..=l_max {
        let lam = (l * (l + 1)) as f64;
        let phase = Complex64::from_polar(1.0, -lam * (1.0 / t0 - 1.0 / t1) / k);
        for m in -(l as i64)..=l as i64 {
            let i = lm_index(l, m);
            assert!((out.as_slice()[i] - phase * c.as_slice()[i]).norm() <= 1e-13 * (1.0 + c.as_slice()[i].norm()));
        }
    }
}

#[test]
fn laplace_beltrami_matches_finite_differences() {
    // independent check of B = -Delta_sphere on a real combination of low harmonics
    let l_max = 5;
    let mut c = HarmonicCoeffs::zeros(l_max);
    c.set(2, 1, Complex64::new(0.4, 0.3));
    c.set(2, -1, Complex64::new(-0.4, 0.3));
    c.set(5, 0, Complex64::new(0.7, 0.0));
    c.set(3, 2, Complex64::new(0.1, -0.2));
    let bc = apply_b(&c);
    let mut ev = wkb_core::sphere::HarmonicEvaluator::new(l_max);
    let f = |ev: &mut wkb_core::sphere::HarmonicEvaluator, psi: f64, phi: f64| ev.evaluate(&c, psi.cos(), phi);
    let h = 1e-3;
    for &(psi, phi) in &[(0.7, 0.3), (1.3, 2.0), (2.2, 4.1)] {
        let f0 = f(&mut ev, psi, phi);
        let dpsi = (f(&mut ev, psi + h, phi) - f(&mut ev, psi - h, phi)) / (2.0 * h);
        let d2psi = (f(&mut ev, psi + h, phi) - 2.0 * f0 + f(&mut ev, psi - h, phi)) / (h * h);
        let d2phi = (f(&mut ev, psi, phi + h) - 2.0 * f0 + f(&mut ev, psi, phi - h)) / (h * h);
        let lap = d2psi + dpsi * (psi.cos() / psi.sin()) + d2phi / psi.sin().powi(2);
        let got = ev.evaluate(&bc, psi.cos(), phi);
        // second differences with h = 1e-3 leave O(h^2 l^4) behind
        assert!((got + lap).norm() < 1e-4, "B f = {got}, -Delta f = {}", -lap);
    }
}
