use proptest::prelude::*;
use wkb_core::modified::{Grid3DField, GridSpec};
use wkb_core::potentials::{Family, PotentialSpec};
use wkb_core::schrodinger::Hamiltonian;
use wkb_core::Complex64;

fn packet(grid: GridSpec, centre: [f64; 3], width: f64, kv: [f64; 3]) -> Grid3DField {
    Grid3DField::from_fn(grid, 0.0, |x| {
        let d: Vec<f64> = (0..3).map(|i| x[i] - centre[i]).collect();
        let r2: f64 = d.iter().map(|v| v * v).sum();
        let ph: f64 = (0..3).map(|i| kv[i] * x[i]).sum();
        Complex64::from_polar((-r2 / (width * width)).exp(), ph)
    })
}

fn dyadic_h(grid: GridSpec) -> Hamiltonian {
    let spec = PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.6).with_l_pot(8).with_amplitude(0.5);
    Hamiltonian::new(&spec, grid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn evolution_conserves_mass_and_reverses(cx in -3.0..3.0f64, kx in -1.0..1.0f64, width in 3.0..3.5f64) {
        let grid = GridSpec::new(16.0, 32).unwrap();
        let h = dyadic_h(grid);
        let psi = packet(grid, [cx, 0.5, -1.0], width, [kx, 0.3, 0.0]);
        // 1000 steps of 0.001
        let out = h.evolve(&psi, 1.0, 0.001).unwrap();
        prop_assert!((out.norm() - psi.norm()).abs() <= 1e-9 * psi.norm());
        let back = h.evolve(&out, -1.0, 0.001).unwrap();
        prop_assert!(back.distance(&psi).unwrap() <= 1e-8 * psi.norm());
    }
}

#[test]
fn energy_is_conserved_for_static_potentials() {
    let grid = GridSpec::new(16.0, 32).unwrap();
    let h = dyadic_h(grid);
    let psi = packet(grid, [1.0, 0.0, 0.0], 3.0, [0.4, 0.0, 0.2]);
    let e0 = h.energy(&psi);
    let out = h.evolve(&psi, 2.0, 0.005).unwrap();
    assert!((h.energy(&out) - e0).abs() <= 1e-6 * e0.abs(), "{} vs {e0}", h.energy(&out));
}

#[test]
fn free_evolution_matches_the_heat_kernel_continuation() {
    // exp(-r^2/w^2) evolves into (a/(a - it))^{3/2} exp(-r^2 / 4(a - it)), a = w^2/4
    let grid = GridSpec::new(16.0, 64).unwrap();
    let h = Hamiltonian::new(&PotentialSpec::zero(), grid).unwrap();
    let w = 2.0;
    let psi = packet(grid, [0.0; 3], w, [0.0; 3]);
    let t = 1.0;
    let out = h.evolve(&psi, t, 0.1).unwrap();
    let a = Complex64::new(w * w / 4.0, -t);
    let pre = (Complex64::new(w * w / 4.0, 0.0) / a).powf(1.5);
    let exact = Grid3DField::from_fn(grid, t, |x| {
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        pre * (-r2 / (4.0 * a)).exp()
    });
    assert!(out.distance(&exact).unwrap() <= 1e-10 * psi.norm());
}

#[test]
fn split_step_is_second_order() {
    let grid = GridSpec::new(16.0, 32).unwrap();
    let h = dyadic_h(grid);
    let psi = packet(grid, [0.0, 1.0, 0.0], 3.0, [0.5, 0.0, 0.0]);
    let t = 2.0;
    let dt = 0.1;
    let oracle = h.evolve(&psi, t, dt / 8.0).unwrap();
    let coarse = h.evolve(&psi, t, dt).unwrap().distance(&oracle).unwrap();
    let fine = h.evolve(&psi, t, dt / 2.0).unwrap().distance(&oracle).unwrap();
    let ratio = coarse / fine;
    assert!((3.4..=4.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn hamiltonian_is_positive_and_matches_finite_differences() {
    let grid = GridSpec::new(16.0, 64).unwrap();
    let h0 = Hamiltonian::new(&PotentialSpec::zero(), grid).unwrap();
    let psi = packet(grid, [0.0, 0.0, 0.0], 3.0, [0.3, 0.0, 0.0]);
    assert!(h0.energy(&psi) >= 0.0);
    let hp = h0.apply(&psi);
    let n = grid.n;
    let dx = grid.spacing();
    let at = |i: usize, j: usize, k: usize| psi.values()[((i % n) * n + j % n) * n + k % n];
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            for k in 1..n - 1 {
                let c = at(i, j, k);
                let lap = (at(i + 1, j, k) + at(i - 1, j, k) + at(i, j + 1, k) + at(i, j - 1, k) + at(i, j, k + 1)
                    + at(i, j, k - 1)
                    - 6.0 * c)
                    / (dx * dx);
                err = err.max((hp.values()[(i * n + j) * n + k] + lap).norm());
                scale = scale.max(lap.norm());
            }
        }
    }
    // second-order stencil: about h^2/12 times fourth derivatives of a width-3 Gaussian
    assert!(err <= 0.05 * scale, "max deviation {err:e} against {scale:e}");
}

#[test]
fn constant_potential_shifts_plane_wave_eigenvalues() {
    let grid = GridSpec::new(8.0, 16).unwrap();
    let spec = PotentialSpec::new(Family::RadialOnly).with_amplitude(0.0);
    let h = Hamiltonian::new(&spec, grid).unwrap();
    let w = grid.wavenumber(3);
    let mode = Grid3DField::from_fn(grid, 0.0, |x| Complex64::from_polar(1.0, w * x[1]));
    let hm = h.apply(&mode);
    for (a, b) in hm.values().iter().zip(mode.values()) {
        assert!((a - b * (w * w)).norm() < 1e-10);
    }
}
