use polymer_core::annealed::{annealed_pair_weight, annealed_path_weight};
use polymer_core::environment::{phi_beta, Environment, Medium, PotentialSpec};
use polymer_core::lattice::{
    cone_points, diamonds_intersect, irreducible_decompose, unit_step, ConeAperture, Diamond, LatticePath,
    LatticePoint,
};
use polymer_core::pathsum::ModelParams;
use proptest::prelude::*;

fn point(d: usize) -> impl Strategy<Value = LatticePoint> {
    (prop::collection::vec(-6i32..=6, d), -6i32..=12).prop_map(|(perp, par)| LatticePoint::new(&perp, par))
}

/// Mostly upward walks in `d = 1`, so cone points are common.
fn path(max_len: usize) -> impl Strategy<Value = LatticePath> {
    prop::collection::vec(0usize..6, 1..max_len).prop_map(|codes| {
        let steps = codes.into_iter().map(|c| match c {
            0 => unit_step(1, 0),
            1 => -unit_step(1, 0),
            2 => -unit_step(1, 1),
            _ => unit_step(1, 1),
        });
        LatticePath::from_steps(LatticePoint::ORIGIN, steps).unwrap()
    })
}

fn aperture() -> impl Strategy<Value = ConeAperture> {
    (1u32..5, 1u32..5).prop_map(|(p, q)| ConeAperture::new(p, q).unwrap())
}

fn spec() -> impl Strategy<Value = PotentialSpec> {
    prop_oneof![
        (0.1f64..3.0, 0.05f64..0.9).prop_map(|(v, rho)| PotentialSpec::TwoPoint { v, rho, p: 0.0 }),
        (0.01f64..0.5).prop_map(|p| PotentialSpec::BernoulliTrap { p }),
        (0.2f64..4.0, 0.0f64..0.3).prop_map(|(rate, p)| PotentialSpec::ExpTrap { rate, p }),
    ]
}

proptest! {
    #[test]
    fn decomposition_reassembles(path in path(24), ap in aperture()) {
        let dec = irreducible_decompose(&path, ap);
        prop_assert_eq!(dec.reassemble(), path);
        for piece in &dec.pieces {
            prop_assert!(cone_points(piece, ap).is_empty());
        }
    }

    #[test]
    fn wider_cones_contain_narrower(x in point(2), a in aperture(), b in aperture()) {
        let (small, big) = if a.le(&b) { (a, b) } else { (b, a) };
        if small.open_contains(x) {
            prop_assert!(big.open_contains(x));
        }
    }

    #[test]
    fn cones_are_closed_under_addition(x in point(2), y in point(2), ap in aperture()) {
        if ap.open_contains(x) && ap.open_contains(y) {
            prop_assert!(ap.open_contains(x + y));
        }
    }

    #[test]
    fn diamond_intersection_is_symmetric(
        b1 in point(1), t1 in point(1), b2 in point(1), t2 in point(1), z in point(1), ap in aperture(),
    ) {
        let a = Diamond::new(b1, t1, ap);
        let b = Diamond::new(b2, t2, ap);
        let meet = diamonds_intersect(&a, &b);
        prop_assert_eq!(meet, diamonds_intersect(&b, &a));
        let inside = |dm: &Diamond| ap.open_contains(z - dm.base) && ap.open_contains(dm.tip - z);
        if inside(&a) && inside(&b) {
            prop_assert!(meet);
        }
    }

    #[test]
    fn phi_is_subadditive_and_monotone(s in spec(), beta in 0.0f64..2.0, a in 1u32..20, b in 1u32..20) {
        let phi = |l| phi_beta(l, beta, &s).unwrap();
        prop_assert!(phi(a + b) <= phi(a) + phi(b) + 1e-12);
        prop_assert!(phi(a) <= phi(a + 1) + 1e-12);
        prop_assert!(phi(a) >= 0.0);
    }

    #[test]
    fn pairs_of_paths_attract(s in spec(), beta in 0.0f64..2.0, a in path(12), b in path(12)) {
        let params = ModelParams::new(1, 2.5, beta, ConeAperture::default()).unwrap();
        let joint = annealed_pair_weight(&a, &b, &params, &s).unwrap();
        let split = annealed_path_weight(&a, &params, &s).unwrap() * annealed_path_weight(&b, &params, &s).unwrap();
        prop_assert!(joint >= split * (1.0 - 1e-12));
    }

    #[test]
    fn shifts_compose(seed in any::<u64>(), x in point(2), y in point(2), z in point(2)) {
        let env = Environment::new(PotentialSpec::ExpTrap { rate: 1.0, p: 0.1 }, seed).unwrap();
        prop_assert_eq!(env.shifted(x).shifted(y).potential(z), env.potential(x + y + z));
    }
}
