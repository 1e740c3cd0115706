//! Annealed weights, renewal tables, tilts and diffusivity.
//!
//! Averaging a path weight over the environment only depends on local
//! times: `E w(γ) = e^{-λ|γ|} exp(-Σ_w φ_β(ℓ_γ(w)))`. Irreducible masses are
//! obtained either by enumeration with these weights or, when `φ_β` is
//! linear, from an exact Green's-function solve on each diamond.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{phi_beta, PotentialSpec};
use crate::error::{invalid, Error, Result};
use crate::lattice::{unit_step, LatticePath, LatticePoint};
use crate::pathsum::{
    enumerate_graded, free_length_tail, EnsembleKind, EnumOptions, GradedTable, LengthBudget, ModelParams,
    PathEnsembleSpec, Weigher,
};

/// Local times of the visited sites, the starting point excluded.
fn local_times(path: &LatticePath) -> HashMap<LatticePoint, u32> {
    let mut ell = HashMap::new();
    for &x in path.points().iter().skip(1) {
        *ell.entry(x).or_insert(0) += 1;
    }
    ell
}

pub fn annealed_path_weight(path: &LatticePath, params: &ModelParams, spec: &PotentialSpec) -> Result<f64> {
    let mut log_w = -params.lambda * path.len() as f64;
    for (_, l) in local_times(path) {
        log_w -= phi_beta(l, params.beta, spec)?;
    }
    Ok(log_w.exp())
}

/// `E[w(γ₁) w(γ₂)]` for two paths from the origin sharing the environment.
pub fn annealed_pair_weight(a: &LatticePath, b: &LatticePath, params: &ModelParams, spec: &PotentialSpec) -> Result<f64> {
    let mut ell = local_times(a);
    for (x, l) in local_times(b) {
        *ell.entry(x).or_insert(0) += l;
    }
    let mut log_w = -params.lambda * (a.len() + b.len()) as f64;
    for (_, l) in ell {
        log_w -= phi_beta(l, params.beta, spec)?;
    }
    Ok(log_w.exp())
}

/// Outcome of comparing `E[w₁w₂]` with `E w₁ E w₂` on random path pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractivenessReport {
    pub pairs: usize,
    /// Pairs visiting a common site other than the origin.
    pub sharing: usize,
    /// Pairs with `E[w₁w₂] < E w₁ E w₂` beyond rounding.
    pub violations: usize,
    /// Sharing pairs without a strict inequality although `V` is random.
    pub strict_failures: usize,
    /// Smallest `log E[w₁w₂] - log(E w₁ E w₂)` over sharing pairs.
    pub min_log_gap_shared: f64,
}

fn random_path(d: usize, len: usize, rng: &mut impl Rng) -> LatticePath {
    let steps = (0..len).map(|_| {
        let k = rng.random_range(0..2 * (d + 1));
        let e = unit_step(d, k / 2);
        if k % 2 == 0 {
            e
        } else {
            -e
        }
    });
    LatticePath::from_steps(LatticePoint::ORIGIN, steps).expect("unit steps")
}

/// Draws `pairs` pairs of nearest-neighbour paths from the origin with
/// lengths uniform in `1..=max_len` and checks the pair correlation.
pub fn attractiveness_check(
    params: &ModelParams,
    spec: &PotentialSpec,
    pairs: usize,
    max_len: usize,
    seed: u64,
) -> Result<AttractivenessReport> {
    params.validate()?;
    spec.validate()?;
    if max_len == 0 {
        return invalid("paths need at least one step");
    }
    let strict = !spec.is_deterministic(params.beta);
    let mut rep =
        AttractivenessReport { pairs, sharing: 0, violations: 0, strict_failures: 0, min_log_gap_shared: f64::INFINITY };
    for i in 0..pairs as u64 {
        let mut rng = crate::rng::replica_rng(seed, i);
        let la = rng.random_range(1..=max_len);
        let lb = rng.random_range(1..=max_len);
        let a = random_path(params.d, la, &mut rng);
        let b = random_path(params.d, lb, &mut rng);
        let joint = annealed_pair_weight(&a, &b, params, spec)?.ln();
        let split = annealed_path_weight(&a, params, spec)?.ln() + annealed_path_weight(&b, params, spec)?.ln();
        let gap = joint - split;
        let tol = 1e-12 * split.abs().max(1.0);
        if gap < -tol {
            rep.violations += 1;
        }
        let ta = local_times(&a);
        if local_times(&b).keys().any(|x| ta.contains_key(x)) {
            rep.sharing += 1;
            rep.min_log_gap_shared = rep.min_log_gap_shared.min(gap);
            if strict && gap <= tol {
                rep.strict_failures += 1;
            }
        }
    }
    Ok(rep)
}

/// Annealed step weight: revisiting a site with local time `c` costs
/// `φ(c+1) - φ(c)`.
pub struct AnnealedWeigher {
    kill: f64,
    increments: Vec<f64>,
}

impl AnnealedWeigher {
    pub fn new(params: &ModelParams, spec: &PotentialSpec, max_len: usize) -> Result<Self> {
        let mut increments = Vec::with_capacity(max_len + 1);
        let mut prev = 0.0;
        for l in 1..=max_len as u32 + 1 {
            let phi = phi_beta(l, params.beta, spec)?;
            increments.push((-(phi - prev)).exp());
            prev = phi;
        }
        Ok(AnnealedWeigher { kill: (-params.lambda).exp(), increments })
    }
}

impl Weigher for AnnealedWeigher {
    #[inline]
    fn step(&self, path: &[LatticePoint], next: LatticePoint) -> f64 {
        let c = path[1..].iter().filter(|&&y| y == next).count();
        self.kill * self.increments[c.min(self.increments.len() - 1)]
    }
}

pub fn annealed_enumerate(
    params: &ModelParams,
    spec: &PotentialSpec,
    ens: &PathEnsembleSpec,
    opts: &EnumOptions,
) -> Result<GradedTable> {
    params.validate()?;
    spec.validate()?;
    let cap = ens.budget.allowed(ens.max_height);
    let w = AnnealedWeigher::new(params, spec, cap)?;
    enumerate_graded(&w, params.d, params.lambda, params.aperture, ens, opts)
}

/// Annealed weight of the family's paths ending at height `n`, length at
/// most `max_len`, with the length-tail bound.
pub fn annealed_partition_exact(
    params: &ModelParams,
    spec: &PotentialSpec,
    n: u32,
    max_len: usize,
    kind: EnsembleKind,
    opts: &EnumOptions,
) -> Result<(f64, f64)> {
    if max_len < n as usize {
        return invalid(format!("max_len {max_len} is below the target height {n}"));
    }
    let ens = PathEnsembleSpec { kind, max_height: n as i32, budget: LengthBudget::max_len(max_len) };
    let t = annealed_enumerate(params, spec, &ens, opts)?;
    Ok((t.by_height()[n as usize], t.tail_by_height[n as usize]))
}

/// Exact annealed cone-confined masses `t_x` (unscaled) for all endpoints up
/// to height `m_max`, valid when `φ_β` is linear in the local time.
///
/// Cone-confined paths from `0` to `x` are walks through the lattice points
/// of the open diamond, so `t_x` is a killed Green's function there.
pub fn markov_t_masses(params: &ModelParams, spec: &PotentialSpec, m_max: i32) -> Result<BTreeMap<LatticePoint, f64>> {
    params.validate()?;
    if !spec.is_deterministic(params.beta) {
        return invalid("the Markov route needs a potential that is deterministic at this beta");
    }
    let rate = params.lambda + phi_beta(1, params.beta, spec)?;
    let a = (-rate).exp();
    let d = params.d;
    let ap = params.aperture;
    let mut out = BTreeMap::new();
    for x in cone_points_up_to(d, ap, m_max) {
        // Interior sites of the diamond, in height order.
        let interior: Vec<LatticePoint> = cone_points_up_to(d, ap, x.par - 1)
            .into_iter()
            .filter(|&y| y != LatticePoint::ORIGIN && ap.open_contains(x - y))
            .collect();
        let index: HashMap<LatticePoint, usize> = interior.iter().enumerate().map(|(i, y)| (*y, i)).collect();
        let nbrs: Vec<Vec<usize>> = interior
            .iter()
            .map(|y| (0..2 * d + 2).filter_map(|k| index.get(&(*y + unit_step(d, k))).copied()).collect())
            .collect();
        let src: Vec<f64> = interior.iter().map(|y| if y.is_neighbor(&LatticePoint::ORIGIN) { a } else { 0.0 }).collect();
        let mut g = vec![0.0; interior.len()];
        for sweep in 0..10_000 {
            // Entries span many orders of magnitude, so convergence is judged
            // site by site.
            let mut change: f64 = 0.0;
            let order: Box<dyn Iterator<Item = usize>> =
                if sweep % 2 == 0 { Box::new(0..g.len()) } else { Box::new((0..g.len()).rev()) };
            for i in order {
                let v = src[i] + a * nbrs[i].iter().map(|&j| g[j]).sum::<f64>();
                if v > 0.0 {
                    change = change.max((v - g[i]).abs() / v);
                }
                g[i] = v;
            }
            if change <= 1e-15 {
                break;
            }
            if sweep == 9_999 {
                return Err(Error::NonConvergence(format!("diamond solve for {x} did not settle")));
            }
        }
        let mut t = if x.is_neighbor(&LatticePoint::ORIGIN) { a } else { 0.0 };
        for k in 0..2 * d + 2 {
            if let Some(&j) = index.get(&(x + unit_step(d, k))) {
                t += a * g[j];
            }
        }
        out.insert(x, t);
    }
    Ok(out)
}

/// Lattice points strictly inside the forward cone of the origin with
/// height `1..=m_max`, in the derived order.
fn cone_points_up_to(d: usize, ap: crate::lattice::ConeAperture, m_max: i32) -> Vec<LatticePoint> {
    let mut out = Vec::new();
    for h in 1..=m_max {
        let r = (ap.delta() * h as f64).ceil() as i32;
        let mut coords = vec![-r; d];
        loop {
            let x = LatticePoint::new(&coords, h);
            if ap.open_contains(x) {
                out.push(x);
            }
            let mut k = 0;
            while k < d {
                coords[k] += 1;
                if coords[k] <= r {
                    break;
                }
                coords[k] = -r;
                k += 1;
            }
            if k == d {
                break;
            }
        }
    }
    out.sort();
    out
}

/// Irreducible masses from cone-confined ones: `q_x = t_x - Σ_{0<y∥<x∥} t_y q_{x-y}`.
pub fn deconvolve(t: &BTreeMap<LatticePoint, f64>) -> BTreeMap<LatticePoint, f64> {
    let mut q: BTreeMap<LatticePoint, f64> = BTreeMap::new();
    for (&x, &tx) in t {
        let mut v = tx;
        for (&y, &ty) in t.range(..LatticePoint::height_floor(x.par)) {
            if let Some(&qv) = q.get(&(x - y)) {
                v -= ty * qv;
            }
        }
        q.insert(x, v);
    }
    q
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TableSource {
    /// Exact diamond Green's functions (linear `φ_β`).
    Markov,
    /// Enumeration of irreducible paths within a length budget.
    Enumerated { budget: LengthBudget },
    /// Supplied directly, already normalised.
    Given,
}

/// Scaled annealed renewal data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalTable {
    pub d: usize,
    pub xi: f64,
    #[serde(with = "crate::serde_util::point_map")]
    pub q_by_endpoint: BTreeMap<LatticePoint, f64>,
    /// `q_by_height[M]`, with `q_0 = 0`.
    pub q_by_height: Vec<f64>,
    /// `t_by_height[N]`, with `t_0 = 1`.
    pub t_by_height: Vec<f64>,
    pub mu: f64,
    pub m_max: i32,
    pub n_max: i32,
    pub nu_fit: f64,
    pub tail_bound: f64,
    pub source: TableSource,
}

/// Solves `Σ_M s^M Q_M = 1` for `s = e^ξ`.
pub fn solve_xi(q_by_height: &[f64]) -> Result<f64> {
    let poly = |s: f64| q_by_height.iter().enumerate().fold(0.0, |acc, (m, &q)| acc + q * s.powi(m as i32));
    if q_by_height.iter().all(|&q| q <= 0.0) {
        return Err(Error::NonConvergence("all irreducible masses vanish; xi is not bracketed".into()));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while poly(hi) < 1.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NonConvergence("xi root not bracketed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if poly(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if (poly(lo) - 1.0).abs() <= (poly(hi) - 1.0).abs() { lo } else { hi };
    Ok(s.ln())
}

/// Decay rate of `q_M` from a least-squares fit of `log q_M` on `M`.
pub fn fit_decay(q_by_height: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        q_by_height.iter().enumerate().skip(1).filter(|(_, &q)| q > 0.0).map(|(m, &q)| (m as f64, q.ln())).collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    -linear_fit(&pts).0
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, r²)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let a = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (a, my - a * mx, r2)
}

impl RenewalTable {
    /// Builds a table from unscaled irreducible masses. `length_tails[M]`
    /// bounds the unscaled mass missed at height `M`.
    pub fn from_unscaled(
        d: usize,
        q_unscaled: &BTreeMap<LatticePoint, f64>,
        m_max: i32,
        n_max: i32,
        length_tails: &[f64],
        source: TableSource,
    ) -> Result<Self> {
        let mut heights = vec![0.0; m_max as usize + 1];
        for (x, &q) in q_unscaled {
            if (1..=m_max).contains(&x.par) {
                heights[x.par as usize] += q;
            }
        }
        let xi = solve_xi(&heights)?;
        let q_by_endpoint: BTreeMap<LatticePoint, f64> = q_unscaled
            .iter()
            .filter(|(x, _)| (1..=m_max).contains(&x.par))
            .map(|(x, &q)| (*x, q * (xi * x.par as f64).exp()))
            .collect();
        let scaled_tail: f64 =
            length_tails.iter().enumerate().skip(1).map(|(m, &t)| t * (xi * m as f64).exp()).sum();
        Self::from_scaled(d, xi, q_by_endpoint, m_max, n_max, scaled_tail, source)
    }

    /// Builds a table from already normalised masses.
    pub fn from_scaled(
        d: usize,
        xi: f64,
        q_by_endpoint: BTreeMap<LatticePoint, f64>,
        m_max: i32,
        n_max: i32,
        length_tail: f64,
        source: TableSource,
    ) -> Result<Self> {
        if q_by_endpoint.keys().any(|x| x.par < 1) {
            return invalid("irreducible steps must gain height");
        }
        let mut q_by_height = vec![0.0; m_max as usize + 1];
        for (x, &q) in &q_by_endpoint {
            if q < 0.0 {
                return invalid(format!("negative irreducible mass {q} at {x}"));
            }
            if x.par <= m_max {
                q_by_height[x.par as usize] += q;
            }
        }
        let mu = q_by_height.iter().enumerate().map(|(m, q)| m as f64 * q).sum();
        let t_by_height = renewal_sequence(&q_by_height, n_max as usize);
        let nu_fit = fit_decay(&q_by_height);
        let height_tail = match q_by_height.last() {
            _ if source == TableSource::Given => 0.0,
            Some(&last) if nu_fit.is_finite() && nu_fit > 0.0 && m_max > 1 => last * (-nu_fit).exp() / (1.0 - (-nu_fit).exp()),
            _ => 0.0,
        };
        Ok(RenewalTable {
            d,
            xi,
            q_by_endpoint,
            q_by_height,
            t_by_height,
            mu,
            m_max,
            n_max,
            nu_fit,
            tail_bound: length_tail + height_tail,
            source,
        })
    }

    /// Worst residual of `t_N = Σ t_M q_{N-M}`.
    pub fn renewal_residual(&self) -> f64 {
        let t = &self.t_by_height;
        (1..t.len())
            .map(|n| {
                let s: f64 = (1..=n.min(self.m_max as usize)).map(|m| t[n - m] * self.q_by_height[m]).sum();
                (t[n] - s).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest transverse-to-height ratio of an atom.
    fn growth(&self) -> f64 {
        self.q_by_endpoint
            .keys()
            .map(|x| (x.perp_norm2() as f64).sqrt() / x.par as f64)
            .fold(0.0, f64::max)
            .max(1e-12)
    }

    /// Endpoint-resolved `t_x` (scaled) for heights `0..=n`.
    pub fn t_by_endpoint(&self, n: i32) -> BTreeMap<LatticePoint, f64> {
        let mut t: BTreeMap<LatticePoint, f64> = BTreeMap::new();
        t.insert(LatticePoint::ORIGIN, 1.0);
        for h in 0..n {
            let layer: Vec<(LatticePoint, f64)> =
                t.range(LatticePoint::height_floor(h)..LatticePoint::height_floor(h + 1)).map(|(x, v)| (*x, *v)).collect();
            for (y, ty) in layer {
                for (dx, &q) in &self.q_by_endpoint {
                    let x = y + *dx;
                    if x.par <= n {
                        *t.entry(x).or_insert(0.0) += ty * q;
                    }
                }
            }
        }
        t
    }
}

/// `t_0 = 1`, `t_N = Σ_{M=1}^{N} t_{N-M} q_M`.
pub fn renewal_sequence(q_by_height: &[f64], n_max: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_max + 1];
    t[0] = 1.0;
    for n in 1..=n_max {
        let mut s = 0.0;
        for m in 1..=n.min(q_by_height.len() - 1) {
            s += t[n - m] * q_by_height[m];
        }
        t[n] = s;
    }
    t
}

/// How irreducible masses are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TableMethod {
    /// Markov route when available, enumeration otherwise.
    Auto { budget: LengthBudget },
    Markov,
    Enumerate { budget: LengthBudget },
}

/// Unscaled annealed irreducible masses and their length tails.
pub fn annealed_irreducible(
    params: &ModelParams,
    spec: &PotentialSpec,
    m_max: i32,
    method: TableMethod,
    opts: &EnumOptions,
) -> Result<(BTreeMap<LatticePoint, f64>, Vec<f64>, TableSource)> {
    let markov = match method {
        TableMethod::Markov => true,
        TableMethod::Auto { .. } => spec.is_deterministic(params.beta),
        TableMethod::Enumerate { .. } => false,
    };
    if markov {
        let t = markov_t_masses(params, spec, m_max)?;
        return Ok((deconvolve(&t), vec![0.0; m_max as usize + 1], TableSource::Markov));
    }
    let budget = match method {
        TableMethod::Auto { budget } | TableMethod::Enumerate { budget } => budget,
        TableMethod::Markov => unreachable!(),
    };
    let ens = PathEnsembleSpec { kind: EnsembleKind::T0, max_height: m_max, budget };
    let table = annealed_enumerate(params, spec, &ens, opts)?;
    Ok((table.totals(), table.tail_by_height.clone(), TableSource::Enumerated { budget }))
}

/// `ξ` and the fitted decay rate of the scaled irreducible masses.
pub fn lyapunov_xi(
    params: &ModelParams,
    spec: &PotentialSpec,
    m_max: i32,
    method: TableMethod,
    opts: &EnumOptions,
) -> Result<(f64, f64)> {
    let t = renewal_tables(params, spec, m_max, m_max, method, opts)?;
    Ok((t.xi, t.nu_fit))
}

pub fn renewal_tables(
    params: &ModelParams,
    spec: &PotentialSpec,
    n_max: i32,
    m_max: i32,
    method: TableMethod,
    opts: &EnumOptions,
) -> Result<RenewalTable> {
    if m_max < 1 || n_max < 0 {
        return invalid("table heights must be positive");
    }
    let (q, tails, source) = annealed_irreducible(params, spec, m_max, method, opts)?;
    RenewalTable::from_unscaled(params.d, &q, m_max, n_max, &tails, source)
}

/// Length-tail bounds for each height, for callers assembling tables by hand.
pub fn length_tails(params: &ModelParams, m_max: i32, budget: &LengthBudget) -> Vec<f64> {
    (0..=m_max).map(|m| free_length_tail(params.d, params.lambda, m, budget.allowed(m))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltResult {
    pub z: Vec<f64>,
    pub phi: f64,
    pub newton_residual: f64,
    pub iterations: usize,
}

/// Solves `Σ_x q_x e^{-M φ + (z, x⊥)} = 1` for real `φ`.
pub fn tilted_phi(table: &RenewalTable, z: &[f64]) -> Result<TiltResult> {
    if z.len() != table.d {
        return invalid(format!("tilt has {} components, expected {}", z.len(), table.d));
    }
    let norm = z.iter().map(|c| c * c).sum::<f64>().sqrt();
    if table.tail_bound > 0.0 && norm >= table.nu_fit / (2.0 * table.growth()) {
        return invalid(format!(
            "tilt norm {norm} outside the convergence box {:.4}",
            table.nu_fit / (2.0 * table.growth())
        ));
    }
    let atoms: Vec<(f64, f64)> = table
        .q_by_endpoint
        .iter()
        .map(|(x, &q)| {
            let dot: f64 = z.iter().enumerate().map(|(i, c)| c * x.perp[i] as f64).sum();
            (x.par as f64, q * dot.exp())
        })
        .collect();
    let h = |phi: f64| {
        let mut v = -1.0;
        let mut dv = 0.0;
        for &(m, w) in &atoms {
            let e = w * (-m * phi).exp();
            v += e;
            dv -= m * e;
        }
        (v, dv)
    };
    let mut phi = 0.0;
    let mut trace = Vec::new();
    for it in 0..100 {
        let (v, dv) = h(phi);
        trace.push(v);
        if v.abs() <= 1e-14 {
            return Ok(TiltResult { z: z.to_vec(), phi, newton_residual: v.abs(), iterations: it });
        }
        if dv >= 0.0 {
            break;
        }
        phi -= v / dv;
    }
    let (v, _) = h(phi);
    if v.abs() <= 1e-12 {
        return Ok(TiltResult { z: z.to_vec(), phi, newton_residual: v.abs(), iterations: 100 });
    }
    Err(Error::NonConvergence(format!("tilt Newton iteration failed; residual trace {trace:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityEstimate {
    pub sigma_matrix: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub fd_step: f64,
}

fn hessian(table: &RenewalTable, h: f64) -> Result<Vec<Vec<f64>>> {
    let d = table.d;
    let phi = |z: &[f64]| tilted_phi(table, z).map(|r| r.phi);
    let zero = vec![0.0; d];
    let f0 = phi(&zero)?;
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        let mut zp = zero.clone();
        zp[i] = h;
        let mut zm = zero.clone();
        zm[i] = -h;
        out[i][i] = (phi(&zp)? - 2.0 * f0 + phi(&zm)?) / (h * h);
        for j in 0..i {
            let mut v = 0.0;
            for (si, sj, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut zz = zero.clone();
                zz[i] = si * h;
                zz[j] = sj * h;
                v += sign * phi(&zz)?;
            }
            out[i][j] = v / (4.0 * h * h);
            out[j][i] = out[i][j];
        }
    }
    Ok(out)
}

/// Central finite-difference Hessian of `φ` at the origin, optionally with
/// one Richardson step.
pub fn diffusivity(table: &RenewalTable, fd_step: f64, richardson: bool) -> Result<DiffusivityEstimate> {
    if !(fd_step > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let mut s = hessian(table, fd_step)?;
    if richardson {
        let half = hessian(table, 0.5 * fd_step)?;
        for (row, hrow) in s.iter_mut().zip(&half) {
            for (v, hv) in row.iter_mut().zip(hrow) {
                *v = (4.0 * hv - *v) / 3.0;
            }
        }
    }
    let sigma2 = (0..table.d).map(|i| s[i][i]).sum();
    Ok(DiffusivityEstimate { sigma_matrix: s, sigma2, fd_step })
}

/// Endpoint law `t_x / t_N` on height `n`, keyed by the transverse part.
pub fn annealed_clt_profile(table: &RenewalTable, n: i32) -> BTreeMap<Vec<i32>, f64> {
    let t = table.t_by_endpoint(n);
    let layer: Vec<(LatticePoint, f64)> =
        t.range(LatticePoint::height_floor(n)..LatticePoint::height_floor(n + 1)).map(|(x, v)| (*x, *v)).collect();
    let total: f64 = layer.iter().map(|(_, v)| v).sum();
    layer.into_iter().map(|(x, v)| (x.perp[..table.d].to_vec(), v / total)).collect()
}

/// `(1/(N t_N)) Σ_{x∥=N} ‖x⊥‖² t_x` for each `N` in `ns`.
pub fn second_moments(table: &RenewalTable, ns: &[i32]) -> Vec<f64> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let t = table.t_by_endpoint(n_max);
    ns.iter()
        .map(|&n| {
            let (mut m2, mut tn) = (0.0, 0.0);
            for (x, v) in t.range(LatticePoint::height_floor(n)..LatticePoint::height_floor(n + 1)) {
                m2 += x.perp_norm2() as f64 * v;
                tn += v;
            }
            m2 / (n as f64 * tn)
        })
        .collect()
}

/// The two-atom table `{(±1, 1): a, (0, 2): b}` with `2a + b = 1`.
pub fn toy_table(a: f64, n_max: i32) -> Result<RenewalTable> {
    if !(a > 0.0 && 2.0 * a < 1.0) {
        return invalid(format!("toy weight {a} must lie in (0, 1/2)"));
    }
    let b = 1.0 - 2.0 * a;
    let q = BTreeMap::from([
        (LatticePoint::new(&[1], 1), a),
        (LatticePoint::new(&[-1], 1), a),
        (LatticePoint::new(&[0], 2), b),
    ]);
    RenewalTable::from_scaled(1, 0.0, q, 2, n_max, 0.0, TableSource::Given)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ConeAperture;
    use crate::pathsum::{free_root, EnumOptions};

    fn params(d: usize, lambda: f64, beta: f64) -> ModelParams {
        ModelParams::new(d, lambda, beta, ConeAperture::default()).unwrap()
    }

    fn lp(perp: i32, par: i32) -> LatticePoint {
        LatticePoint::new(&[perp], par)
    }

    #[test]
    fn path_weight_examples() {
        let p = params(1, 2.5, 0.3);
        let trap = PotentialSpec::BernoulliTrap { p: 0.1 };
        let path = LatticePath::new(vec![lp(0, 0), lp(0, 1), lp(1, 1), lp(1, 2)]).unwrap();
        let w = annealed_path_weight(&path, &p, &trap).unwrap();
        assert!((w - (-7.5f64).exp() * 0.9f64.powi(3)).abs() < 1e-16);
        assert!((annealed_path_weight(&path, &p.with_beta(0.0), &trap).unwrap() - (-7.5f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn single_step_annealed() {
        let p = params(1, 2.5, 0.3);
        let trap = PotentialSpec::BernoulliTrap { p: 0.1 };
        let (v, _) = annealed_partition_exact(&p, &trap, 1, 1, EnsembleKind::D, &EnumOptions::serial()).unwrap();
        assert!((v - (-2.5f64).exp() * 0.9).abs() < 1e-16);
    }

    #[test]
    fn markov_route_reproduces_free_root() {
        let p = params(1, 2.5, 0.0);
        let t = renewal_tables(&p, &PotentialSpec::ConstantZero, 40, 24, TableMethod::Markov, &EnumOptions::serial()).unwrap();
        assert!(((-t.xi).exp() - free_root(1, 2.5)).abs() < 1e-9);
        assert!(t.renewal_residual() < 1e-14);
    }

    #[test]
    fn markov_and_enumeration_agree_on_small_heights() {
        let p = params(1, 2.5, 0.0);
        let t = markov_t_masses(&p, &PotentialSpec::ConstantZero, 3).unwrap();
        let q = deconvolve(&t);
        let ens = PathEnsembleSpec { kind: EnsembleKind::T0, max_height: 3, budget: LengthBudget::max_len(15) };
        let e = annealed_enumerate(&p, &PotentialSpec::ConstantZero, &ens, &EnumOptions::serial()).unwrap();
        for (x, v) in e.totals() {
            let tail = e.tail_by_height[x.par as usize];
            assert!(q[&x] >= v - 1e-18 && q[&x] - v <= tail, "{x}: {} vs {v}", q[&x]);
        }
    }

    #[test]
    fn toy_tilt_matches_quadratic() {
        let a = 0.3;
        let b = 1.0 - 2.0 * a;
        let table = toy_table(a, 10).unwrap();
        for z in [-0.4, -0.1, 0.0, 0.2, 0.5] {
            let got = tilted_phi(&table, &[z]).unwrap().phi;
            let c = 2.0 * a * f64::cosh(z);
            let u = (-c + (c * c + 4.0 * b).sqrt()) / (2.0 * b);
            assert!((got + u.ln()).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn toy_diffusivity() {
        let a = 0.3;
        let table = toy_table(a, 10).unwrap();
        let est = diffusivity(&table, 1e-3, true).unwrap();
        assert!((est.sigma2 - a / (1.0 - a)).abs() < 1e-7);
    }

    #[test]
    fn renewal_limit_toy() {
        let table = toy_table(0.25, 60).unwrap();
        let inv_mu = 1.0 / table.mu;
        assert!((table.t_by_height[60] - inv_mu).abs() < 1e-12);
        assert_eq!(table.t_by_height[1], table.q_by_height[1]);
    }

    #[test]
    fn clt_profile_normalised_and_centred() {
        let table = toy_table(0.3, 12).unwrap();
        let prof = annealed_clt_profile(&table, 12);
        let total: f64 = prof.values().sum();
        let mean: f64 = prof.iter().map(|(x, p)| x[0] as f64 * p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn solve_xi_single_atom() {
        let xi = solve_xi(&[0.0, 0.25]).unwrap();
        assert!((xi - 4f64.ln()).abs() < 1e-14);
        assert!(solve_xi(&[0.0, 0.0]).is_err());
    }
}
