//! End-to-end checks across modules, each against an independent oracle.

use polymer_core::annealed::{annealed_partition_exact, renewal_tables, TableMethod};
use polymer_core::effective_walks::{exact_span_law, sample_walk, StepLaw};
use polymer_core::environment::{Environment, PotentialSpec};
use polymer_core::lattice::{ConeAperture, LatticePoint};
use polymer_core::pathsum::{
    free_root, quenched_green, restricted_weights, EnsembleKind, EnumOptions, LengthBudget, ModelParams, TMethod,
};
use polymer_core::quenched_limits::{mean_one_experiment, MeanOneConfig};

fn params(d: usize, lambda: f64, beta: f64) -> ModelParams {
    ModelParams::new(d, lambda, beta, ConeAperture::default()).unwrap()
}

const SPEC: PotentialSpec = PotentialSpec::TwoPoint { v: 1.0, rho: 0.3, p: 0.0 };

#[test]
fn slab_solver_hits_the_free_root_without_disorder() {
    for d in 1..=2 {
        let p = params(d, 3.0, 0.0);
        let env = Environment::new(SPEC, 5).unwrap();
        let f = free_root(d, 3.0);
        for n in [1, 3, 6] {
            let tol = 1e-9 * f.powi(n);
            let g = quenched_green(&env, &p, n as u32, tol).unwrap();
            assert!((g.total - f.powi(n)).abs() <= g.tail_bound.max(tol), "d={d} n={n}");
        }
    }
}

#[test]
fn quenched_renewal_holds_in_two_dimensions() {
    let p = params(2, 3.0, 0.8);
    let env = Environment::new(SPEC, 77).unwrap();
    let budget = LengthBudget::new(6, 2);
    let opts = EnumOptions::serial();
    let direct = restricted_weights(&env, &p, 3, EnsembleKind::T, budget, TMethod::Enumerate, &opts).unwrap();
    let conv = restricted_weights(&env, &p, 3, EnsembleKind::T, budget, TMethod::Convolution, &opts).unwrap();
    assert!(direct.max_abs_diff(&conv) < 1e-15);
    assert!(direct.total(&LatticePoint::new(&[0, 0], 3)) > 0.0);
}

#[test]
fn annealed_partition_is_below_free_and_matches_quenched_mean() {
    let p = params(1, 2.5, 0.6);
    let opts = EnumOptions::serial();
    let (z, tail) = annealed_partition_exact(&p, &SPEC, 2, 8, EnsembleKind::D, &opts).unwrap();
    assert!(z < free_root(1, 2.5).powi(2));
    // Replica mean of the quenched enumeration converges to the annealed value.
    let budget = LengthBudget::max_len(8);
    let spec = polymer_core::pathsum::PathEnsembleSpec { kind: EnsembleKind::D, max_height: 2, budget };
    let reps = 4000;
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for r in 0..reps {
        let env = Environment::new(SPEC, polymer_core::rng::environment_seed(3, r)).unwrap();
        let w = polymer_core::pathsum::enumerate_quenched(&env, &p, &spec, &opts).unwrap().by_height()[2];
        acc += w;
        acc2 += w * w;
    }
    let mean = acc / reps as f64;
    let se = ((acc2 / reps as f64 - mean * mean) / reps as f64).sqrt();
    assert!((mean - z).abs() < 4.0 * se + tail, "mean {mean} annealed {z} se {se}");
}

#[test]
fn markov_and_enumerated_tables_agree_at_zero_beta() {
    let p = params(1, 2.5, 0.0);
    let opts = EnumOptions::serial();
    let markov = renewal_tables(&p, &PotentialSpec::ConstantZero, 20, 5, TableMethod::Markov, &opts).unwrap();
    let budget = LengthBudget::new(30, 6);
    let enumerated =
        renewal_tables(&p, &PotentialSpec::ConstantZero, 20, 5, TableMethod::Enumerate { budget }, &opts).unwrap();
    // Both are normalised, so the budget tail shows up on either side.
    let slack = 2.0 * (markov.tail_bound + enumerated.tail_bound);
    for (a, b) in markov.q_by_height.iter().zip(&enumerated.q_by_height) {
        assert!((a - b).abs() <= slack, "{a} vs {b}, slack {slack}");
    }
    let long = renewal_tables(&p, &PotentialSpec::ConstantZero, 20, 12, TableMethod::Markov, &opts).unwrap();
    assert!(((-long.xi).exp() - free_root(1, 2.5)).abs() < 1e-6);
}

#[test]
fn step_law_from_a_table_walks_upward() {
    let p = params(1, 2.5, 0.0);
    let table = renewal_tables(&p, &PotentialSpec::ConstantZero, 10, 8, TableMethod::Markov, &EnumOptions::serial()).unwrap();
    let law = StepLaw::from_table(&table, p.aperture, None).unwrap();
    let walk = sample_walk(&law, 50, 9);
    assert!(walk.windows(2).all(|w| p.aperture.open_contains(w[1] - w[0])));
    let f = exact_span_law(&law, 40);
    let mass: f64 = f.iter().sum();
    assert!(mass <= 1.0 + 1e-12 && mass > 0.99, "{mass}");
}

#[test]
fn mean_one_with_a_matching_table() {
    let p = params(1, 2.2, 0.5);
    let budget = LengthBudget::new(30, 2);
    let table =
        renewal_tables(&p, &SPEC, 4, 4, TableMethod::Enumerate { budget }, &EnumOptions::serial()).unwrap();
    let cfg = MeanOneConfig { ns: vec![2, 4], replicas: 400, seed: 1, budget, parallel: false };
    let report = mean_one_experiment(&SPEC, &p, &table, &cfg).unwrap();
    assert!(report.fits["max_abs_z"] < 4.5, "{:?}", report.fits);
    assert_eq!(report.rows.len(), 800);
}
