//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string; failures come back as `{"error": "..."}` so the page can show them.

use std::collections::BTreeMap;

use polymer_core::annealed::{renewal_tables, TableMethod};
use polymer_core::effective_walks::{StepLaw, SyncSampler};
use polymer_core::environment::{Environment, PotentialSpec};
use polymer_core::lattice::{ConeAperture, LatticePoint};
use polymer_core::pathsum::{free_root, quenched_green, EnumOptions, ModelParams};
use polymer_core::rng::replica_rng;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: polymer_core::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn params(d: u32, lambda: f64, beta: f64) -> polymer_core::Result<ModelParams> {
    ModelParams::new(d as usize, lambda, beta, ConeAperture::default())
}

#[derive(Serialize)]
struct Renewal {
    exp_minus_xi: f64,
    free_root: f64,
    inverse_mu: f64,
    t_by_height: Vec<f64>,
    q_by_height: Vec<f64>,
}

/// Free renewal table: `e^{-ξ}` against the closed-form root and `t_N → 1/μ`.
#[wasm_bindgen]
pub fn renewal_summary(d: u32, lambda: f64, m_max: i32, n_max: i32) -> String {
    respond((|| {
        let p = params(d, lambda, 0.0)?;
        let t = renewal_tables(&p, &PotentialSpec::ConstantZero, n_max, m_max, TableMethod::Markov, &EnumOptions::serial())?;
        Ok(Renewal {
            exp_minus_xi: (-t.xi).exp(),
            free_root: free_root(p.d, lambda),
            inverse_mu: 1.0 / t.mu,
            t_by_height: t.t_by_height,
            q_by_height: t.q_by_height,
        })
    })())
}

#[derive(Serialize)]
struct Profile {
    partition: f64,
    free_power: f64,
    tail_bound: f64,
    /// Endpoint law along the first transverse axis, as `(x, mass)`.
    endpoint: Vec<(i32, f64)>,
}

/// Quenched partition function at height `n` in a two-point environment.
#[wasm_bindgen]
pub fn quenched_profile(d: u32, lambda: f64, beta: f64, v: f64, rho: f64, seed: u32, n: u32) -> String {
    respond((|| {
        let p = params(d, lambda, beta)?;
        let spec = PotentialSpec::TwoPoint { v, rho, p: 0.0 };
        let env = Environment::new(spec, seed as u64)?;
        let f = free_root(p.d, lambda).powi(n as i32);
        let g = quenched_green(&env, &p, n, 1e-8 * f)?;
        let mut marginal: BTreeMap<i32, f64> = BTreeMap::new();
        for (x, m) in g.endpoint_distribution() {
            *marginal.entry(x.perp[0]).or_insert(0.0) += m;
        }
        Ok(Profile { partition: g.total, free_power: f, tail_bound: g.tail_bound, endpoint: marginal.into_iter().collect() })
    })())
}

#[derive(Serialize)]
struct Walks {
    /// `(height, first transverse coordinate)` of each walk at common heights.
    u: Vec<(i32, i32)>,
    v: Vec<(i32, i32)>,
    spans: Vec<i32>,
}

/// A synchronised pair of effective walks in `d = 1`, started `offset` apart.
#[wasm_bindgen]
pub fn synchronized_walks(lambda: f64, offset: i32, steps: u32, seed: u32) -> String {
    respond((|| {
        let p = params(1, lambda, 0.0)?;
        let table = renewal_tables(&p, &PotentialSpec::ConstantZero, 8, 10, TableMethod::Markov, &EnumOptions::serial())?;
        let law = StepLaw::from_table(&table, p.aperture, None)?;
        let mut rng = replica_rng(seed as u64, 0);
        let mut s = SyncSampler::new(&law, LatticePoint::ORIGIN, LatticePoint::new(&[offset], 0));
        let mut out = Walks { u: vec![(0, 0)], v: vec![(0, offset)], spans: Vec::new() };
        for _ in 0..steps {
            let step = s.next_step(&mut rng);
            out.spans.push(step.t);
            out.u.push((s.u.par, s.u.perp[0]));
            out.v.push((s.v.par, s.v.perp[0]));
        }
        Ok(out)
    })())
}
