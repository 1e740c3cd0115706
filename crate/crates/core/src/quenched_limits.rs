//! Quenched limits: the partial sums `𝔰_N`, the Sinai identities, the
//! full-ensemble limit candidate and the replica experiments.
//!
//! Quantities with a hat in the notes below are scaled by `e^{ξ x∥}` with the
//! `ξ` of the annealed table they are compared against.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealed::{annealed_enumerate, annealed_partition_exact, diffusivity, linear_fit, RenewalTable};
use crate::environment::{in_infinite_cluster, ClusterProbe, Environment, Medium, PotentialSpec};
use crate::error::{invalid, Result};
use crate::lattice::LatticePoint;
use crate::pathsum::{
    convolve_graded, enumerate_quenched, free_length_tail, free_root, quenched_green, quenched_green_from,
    EnsembleKind, EnumOptions, GradedTable, LengthBudget, ModelParams, PathEnsembleSpec, SlabBox,
};
use crate::rng::environment_seed;

/// `𝔰_N` (or a ratio) for a sequence of heights in one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedSeries {
    pub env_seed: Option<u64>,
    pub params: ModelParams,
    pub ns: Vec<u32>,
    pub values: Vec<f64>,
    pub budget: LengthBudget,
    /// Bound on the weight the length budget drops from the quenched sums.
    pub tail_bound: f64,
}

fn check_table(params: &ModelParams, table: &RenewalTable, n: u32) -> Result<()> {
    params.validate()?;
    if table.d != params.d {
        return invalid(format!("table dimension {} differs from model dimension {}", table.d, params.d));
    }
    if n == 0 {
        return invalid("height must be positive");
    }
    if (n as i32) > table.m_max {
        return invalid(format!("height {n} exceeds the table's irreducible range {}", table.m_max));
    }
    Ok(())
}

/// `𝔰_N^ω = 1 + Σ_{x∥<N} 𝔱_x (𝔮^{θ_x}_{1,N-x∥} - q_{1,N-x∥})` for every
/// `N` in `1..=n_max`.
///
/// `𝔱` is built by the renewal convolution, reusing the shifted irreducible
/// tables that also feed the `𝔮` sums. When the annealed table was
/// enumerated with the same `budget`, each term has mean zero exactly.
pub fn s_series<M: Medium>(
    env: &M,
    params: &ModelParams,
    table: &RenewalTable,
    n_max: u32,
    budget: LengthBudget,
    opts: &EnumOptions,
) -> Result<QuenchedSeries> {
    check_table(params, table, n_max)?;
    let top = n_max as i32;
    let xi = table.xi;
    let scale: Vec<f64> = (0..=top).map(|k| (xi * k as f64).exp()).collect();
    let mut qcum = vec![0.0; n_max as usize + 1];
    let mut dropped = vec![0.0; n_max as usize + 1];
    for k in 1..=n_max as usize {
        qcum[k] = qcum[k - 1] + table.q_by_height[k];
        dropped[k] = dropped[k - 1]
            + scale[k] * free_length_tail(params.d, params.lambda, k as i32, budget.allowed(k as i32));
    }

    let mut t: BTreeMap<LatticePoint, Vec<f64>> = BTreeMap::new();
    t.insert(LatticePoint::ORIGIN, vec![1.0]);
    let mut sums = vec![1.0; n_max as usize + 1];
    let mut tail = 0.0;
    for h in 0..top {
        let layer: Vec<(LatticePoint, Vec<f64>)> =
            t.range(LatticePoint::height_floor(h)..LatticePoint::height_floor(h + 1)).map(|(x, v)| (*x, v.clone())).collect();
        for (y, ty) in layer {
            let ty_hat = ty.iter().sum::<f64>() * scale[h as usize];
            if ty_hat == 0.0 {
                continue;
            }
            let spec = PathEnsembleSpec { kind: EnsembleKind::T0, max_height: top - h, budget };
            let q = enumerate_quenched(&env.shifted(y), params, &spec, opts)?;
            let mut acc = 0.0;
            for (k, qk) in q.by_height().iter().enumerate().skip(1) {
                acc += qk * scale[k];
                let n = h as usize + k;
                sums[n] += ty_hat * (acc - qcum[k]);
            }
            tail += ty_hat * dropped[(top - h) as usize];
            if h + 1 < top {
                convolve_graded(&mut t, y, &ty, &q.by_endpoint, &budget, top - 1);
            }
        }
    }
    Ok(QuenchedSeries {
        env_seed: None,
        params: *params,
        ns: (1..=n_max).collect(),
        values: sums[1..].to_vec(),
        budget,
        tail_bound: tail,
    })
}

/// `𝔰_N^ω` at the single height `n`.
pub fn s_partial<M: Medium>(
    env: &M,
    params: &ModelParams,
    table: &RenewalTable,
    n: u32,
    budget: LengthBudget,
    opts: &EnumOptions,
) -> Result<f64> {
    Ok(*s_series(env, params, table, n, budget, opts)?.values.last().unwrap())
}

/// Both sides of the two Sinai expansions of `𝔱^ω_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinaiResidual {
    pub lhs: f64,
    pub rhs_last: f64,
    pub rhs_first: f64,
    pub residual_last: f64,
    pub residual_first: f64,
}

/// `Σ_{a+b ≤ cap} u[a] v[b]`.
fn graded_product(u: &[f64], v: &[f64], cap: usize) -> f64 {
    let mut s = 0.0;
    for (a, &x) in u.iter().enumerate().take(cap + 1) {
        if x == 0.0 {
            continue;
        }
        for &y in v.iter().take(cap + 1 - a) {
            s += x * y;
        }
    }
    s
}

fn graded_diff(plus: &BTreeMap<LatticePoint, Vec<f64>>, minus: &BTreeMap<LatticePoint, Vec<f64>>) -> BTreeMap<LatticePoint, Vec<f64>> {
    let mut out = plus.clone();
    for (z, v) in minus {
        let slot = out.entry(*z).or_default();
        if slot.len() < v.len() {
            slot.resize(v.len(), 0.0);
        }
        for (s, m) in slot.iter_mut().zip(v) {
            *s -= m;
        }
    }
    out
}

/// Evaluates `𝔱_x = t_x + Σ 𝔱_y (𝔮^{θ_y}_{z-y} - q_{z-y}) t_{x-z}` (last
/// perturbed segment) and `𝔱_x = t_x + Σ t_y (𝔮^{θ_y}_{z-y} - q_{z-y}) 𝔱^{θ_z}_{x-z}`
/// (first perturbed segment), with every factor enumerated under `budget`.
///
/// The annealed `t` and `q` are enumerated here from `spec` rather than taken
/// from a scaled table: the identities are exact only when all factors are
/// graded by length and truncated together.
pub fn sinai_residual<M: Medium>(
    env: &M,
    params: &ModelParams,
    spec: &PotentialSpec,
    x: LatticePoint,
    budget: LengthBudget,
    opts: &EnumOptions,
) -> Result<SinaiResidual> {
    params.validate()?;
    let h = x.par;
    if h < 1 {
        return invalid("the target must lie strictly above the origin");
    }
    let cap = budget.allowed(h);
    let ens = |kind, max_height| PathEnsembleSpec { kind, max_height, budget };
    let t_q = enumerate_quenched(env, params, &ens(EnsembleKind::T, h), opts)?;
    let t_a = annealed_enumerate(params, spec, &ens(EnsembleKind::T, h), opts)?;
    let q_a = annealed_enumerate(params, spec, &ens(EnsembleKind::T0, h), opts)?;
    let lhs = t_q.total(&x);
    let empty = Vec::new();
    let ta_at = |z: LatticePoint| t_a.by_endpoint.get(&z).unwrap_or(&empty);

    let mut q_shift: HashMap<LatticePoint, GradedTable> = HashMap::new();
    let mut shifted_q = |y: LatticePoint| -> Result<BTreeMap<LatticePoint, Vec<f64>>> {
        if let Some(t) = q_shift.get(&y) {
            return Ok(t.by_endpoint.clone());
        }
        let t = enumerate_quenched(&env.shifted(y), params, &ens(EnsembleKind::T0, h - y.par), opts)?;
        let out = t.by_endpoint.clone();
        q_shift.insert(y, t);
        Ok(out)
    };

    // Last perturbed segment.
    let (mut plus, mut minus) = (BTreeMap::new(), BTreeMap::new());
    for (y, ty) in t_q.by_endpoint.range(..LatticePoint::height_floor(h)) {
        if ty.iter().all(|&w| w == 0.0) {
            continue;
        }
        convolve_graded(&mut plus, *y, ty, &shifted_q(*y)?, &budget, h);
        convolve_graded(&mut minus, *y, ty, &q_a.by_endpoint, &budget, h);
    }
    let mut rhs_last = t_a.total(&x);
    for (z, v) in graded_diff(&plus, &minus) {
        rhs_last += graded_product(&v, ta_at(x - z), cap);
    }

    // First perturbed segment.
    let (mut plus, mut minus) = (BTreeMap::new(), BTreeMap::new());
    for (y, ty) in t_a.by_endpoint.range(..LatticePoint::height_floor(h)) {
        convolve_graded(&mut plus, *y, ty, &shifted_q(*y)?, &budget, h);
        convolve_graded(&mut minus, *y, ty, &q_a.by_endpoint, &budget, h);
    }
    let mut rhs_first = t_a.total(&x);
    for (z, v) in graded_diff(&plus, &minus) {
        let tz = enumerate_quenched(&env.shifted(z), params, &ens(EnsembleKind::T, h - z.par), opts)?;
        if let Some(w) = tz.by_endpoint.get(&(x - z)) {
            rhs_first += graded_product(&v, w, cap);
        }
    }

    Ok(SinaiResidual {
        lhs,
        rhs_last,
        rhs_first,
        residual_last: (lhs - rhs_last).abs(),
        residual_first: (lhs - rhs_first).abs(),
    })
}

/// Truncation heights for [`full_limit_candidate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitBudgets {
    /// Highest endpoint of the left pieces `𝔩`.
    pub l_height: i32,
    /// Highest arrival height of the right pieces `r`.
    pub r_height: i32,
    /// Height at which each `𝔰^{θ_x}` is evaluated.
    pub s_height: u32,
    pub budget: LengthBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullLimit {
    /// `Σ_x 𝔩̂_x 𝔰^{θ_x}`.
    pub sum_ls: f64,
    pub c_l: f64,
    pub c_r: f64,
    pub mu: f64,
    /// `(c_r/μ) Σ_x 𝔩̂_x 𝔰^{θ_x}`, the limit of the scaled partition function.
    pub scaled: f64,
    /// `Σ_x 𝔩̂_x 𝔰^{θ_x} / c_l`, the limit of `𝔇_N / D_N`.
    pub ratio: f64,
    /// Scaled weight missed by the length budget in `c_l` and `c_r`.
    pub tail_bound: f64,
}

/// Limit candidate of the full first-arrival ensemble.
///
/// Left and right pieces are nonempty (the origin and the arrival point are
/// never cone points), so `c_l = Σ_{M≥1} l̂_M` and `c_r = Σ_{K≥1} r̂_K`.
pub fn full_limit_candidate<M: Medium>(
    env: &M,
    params: &ModelParams,
    spec: &PotentialSpec,
    table: &RenewalTable,
    budgets: &LimitBudgets,
    opts: &EnumOptions,
) -> Result<FullLimit> {
    check_table(params, table, budgets.s_height)?;
    if budgets.l_height < 1 || budgets.r_height < 1 {
        return invalid("left and right heights must be positive");
    }
    let xi = table.xi;
    let budget = budgets.budget;
    let scaled_sum = |t: &GradedTable| -> (f64, f64) {
        let mass = t.by_height().iter().enumerate().skip(1).map(|(m, v)| v * (xi * m as f64).exp()).sum();
        let tail = t.tail_by_height.iter().enumerate().skip(1).map(|(m, v)| v * (xi * m as f64).exp()).sum();
        (mass, tail)
    };
    let l_spec = PathEnsembleSpec { kind: EnsembleKind::Tl, max_height: budgets.l_height, budget };
    let r_spec = PathEnsembleSpec { kind: EnsembleKind::Tr, max_height: budgets.r_height, budget };
    let (c_l, l_tail) = scaled_sum(&annealed_enumerate(params, spec, &l_spec, opts)?);
    let (c_r, r_tail) = scaled_sum(&annealed_enumerate(params, spec, &r_spec, opts)?);
    let l_q = enumerate_quenched(env, params, &l_spec, opts)?;
    let mut sum_ls = 0.0;
    for (x, w) in l_q.totals() {
        if x.par < 1 || w == 0.0 {
            continue;
        }
        let s = s_partial(&env.shifted(x), params, table, budgets.s_height, budget, opts)?;
        sum_ls += w * (xi * x.par as f64).exp() * s;
    }
    Ok(FullLimit {
        sum_ls,
        c_l,
        c_r,
        mu: table.mu,
        scaled: c_r / table.mu * sum_ls,
        ratio: sum_ls / c_l,
        tail_bound: l_tail + r_tail,
    })
}

/// Sample mean, unbiased variance and the 95% normal half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub sd: f64,
    pub ci_halfwidth: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = if n > 0 { xs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let variance =
            if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let sd = variance.sqrt();
        let ci_halfwidth = if n > 0 { 1.96 * sd / (n as f64).sqrt() } else { f64::NAN };
        Summary { count: n, mean, variance, sd, ci_halfwidth }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.sd / (self.count as f64).sqrt()
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NStats {
    pub n: u32,
    pub summary: Summary,
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub replica: u64,
    pub n: u32,
    pub value: f64,
    pub aux: f64,
}

/// Replica `r` uses stream `first_stream + r` of `base_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_seed: u64,
    pub first_stream: u64,
    pub stream_count: u64,
}

impl Provenance {
    pub fn env_seed(&self, replica: u64) -> u64 {
        environment_seed(self.base_seed, self.first_stream + replica)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub replica_count: usize,
    /// Replicas dropped by conditioning.
    pub excluded: usize,
    pub provenance: Provenance,
    pub per_n: Vec<NStats>,
    pub fits: BTreeMap<String, f64>,
    pub rows: Vec<ReplicaRow>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentReport {
    pub fn stats(&self, n: u32) -> Option<&NStats> {
        self.per_n.iter().find(|s| s.n == n)
    }

    /// One row per replica per height.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_replicas<T, F>(count: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..count as u64).into_par_iter().map(f).collect()
    } else {
        (0..count as u64).map(f).collect()
    }
}

/// Settings shared by the replica experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub ns: Vec<u32>,
    pub replicas: usize,
    pub seed: u64,
    /// Slab-solver tolerance relative to `F^N`.
    pub rel_tol: f64,
    pub parallel: bool,
}

impl ReplicaConfig {
    fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns.windows(2).any(|w| w[0] >= w[1]) || self.ns[0] == 0 {
            return invalid("heights must be positive and strictly increasing");
        }
        if self.replicas < 2 {
            return invalid("at least two replicas are needed");
        }
        if !(self.rel_tol > 0.0) {
            return invalid("relative tolerance must be positive");
        }
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        Provenance { base_seed: self.seed, first_stream: 0, stream_count: self.replicas as u64 }
    }
}

/// Heights up to this use the exact annealed cross-check in the ratio run.
const ANNEALED_CHECK_HEIGHT: u32 = 4;

/// `𝔇_N^ω / D̄_N` across replicas, with `D̄_N` the replica mean.
pub fn ratio_experiment(spec: &PotentialSpec, params: &ModelParams, cfg: &ReplicaConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    spec.validate()?;
    params.validate()?;
    let start = Instant::now();
    let prov = cfg.provenance();
    let f = free_root(params.d, params.lambda);
    let tols: Vec<f64> = cfg.ns.iter().map(|&n| cfg.rel_tol * f.powi(n as i32)).collect();
    // Replica 0 fixes the starting box for everyone, so the per-replica work
    // does not depend on scheduling.
    let env0 = Environment::new(*spec, prov.env_seed(0))?;
    let boxes: Vec<SlabBox> = cfg
        .ns
        .iter()
        .zip(&tols)
        .map(|(&n, &tol)| {
            quenched_green(&env0, params, n, tol).map(|g| SlabBox { halfwidth: g.box_halfwidth, depth: g.depth })
        })
        .collect::<Result<_>>()?;
    let parts: Vec<Vec<f64>> = run_replicas(cfg.replicas, cfg.parallel, |r| {
        let env = Environment::new(*spec, prov.env_seed(r))?;
        cfg.ns
            .iter()
            .zip(&tols)
            .zip(&boxes)
            .map(|((&n, &tol), &b)| quenched_green_from(&env, params, n, tol, b).map(|g| g.total))
            .collect()
    })?;

    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    let mut ratios: Vec<Vec<f64>> = Vec::new();
    for (i, &n) in cfg.ns.iter().enumerate() {
        let raw: Vec<f64> = parts.iter().map(|p| p[i]).collect();
        let dbar = raw.iter().sum::<f64>() / raw.len() as f64;
        let r: Vec<f64> = raw.iter().map(|v| v / dbar).collect();
        for (k, (&ratio, &value)) in r.iter().zip(&raw).enumerate() {
            rows.push(ReplicaRow { replica: k as u64, n, value: ratio, aux: value });
        }
        let mut extra = BTreeMap::from([("d_bar".to_string(), dbar), ("d_bar_over_free".to_string(), dbar / f.powi(n as i32))]);
        if i > 0 {
            let inc: Vec<f64> = r.iter().zip(&ratios[i - 1]).map(|(a, b)| a - b).collect();
            extra.insert("increment_variance".into(), Summary::of(&inc).variance);
        }
        if n <= ANNEALED_CHECK_HEIGHT {
            let (exact, tail) =
                annealed_partition_exact(params, spec, n, n as usize + 2, EnsembleKind::D, &EnumOptions::serial())?;
            extra.insert("annealed_exact".into(), exact);
            extra.insert("annealed_exact_tail".into(), tail);
        }
        per_n.push(NStats { n, summary: Summary::of(&r), extra });
        ratios.push(r);
    }
    let mut fits = BTreeMap::new();
    let last = *cfg.ns.last().unwrap();
    if let (Some(a), Some(b)) = (per_n.iter().find(|s| s.n == last), per_n.iter().find(|s| s.n == last / 2)) {
        fits.insert("plateau_ratio".into(), a.summary.variance / b.summary.variance);
    }
    Ok(ExperimentReport {
        experiment: "ratio".into(),
        replica_count: cfg.replicas,
        excluded: 0,
        provenance: prov,
        per_n,
        fits,
        rows,
        wall_time: start.elapsed(),
    })
}

/// Settings for [`mean_one_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanOneConfig {
    pub ns: Vec<u32>,
    pub replicas: usize,
    pub seed: u64,
    pub budget: LengthBudget,
    pub parallel: bool,
}

/// `𝔰_N^ω` across replicas. The annealed table should be enumerated with the
/// same budget, otherwise the mean is one only up to the budget tail.
pub fn mean_one_experiment(
    spec: &PotentialSpec,
    params: &ModelParams,
    table: &RenewalTable,
    cfg: &MeanOneConfig,
) -> Result<ExperimentReport> {
    spec.validate()?;
    if cfg.ns.is_empty() || cfg.ns.windows(2).any(|w| w[0] >= w[1]) || cfg.ns[0] == 0 {
        return invalid("heights must be positive and strictly increasing");
    }
    if cfg.replicas < 2 {
        return invalid("at least two replicas are needed");
    }
    let top = *cfg.ns.last().unwrap();
    check_table(params, table, top)?;
    let start = Instant::now();
    let prov = Provenance { base_seed: cfg.seed, first_stream: 0, stream_count: cfg.replicas as u64 };
    let opts = EnumOptions::serial();
    let series: Vec<QuenchedSeries> = run_replicas(cfg.replicas, cfg.parallel, |r| {
        let env = Environment::new(*spec, prov.env_seed(r))?;
        let mut s = s_series(&env, params, table, top, cfg.budget, &opts)?;
        s.env_seed = Some(prov.env_seed(r));
        Ok(s)
    })?;
    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    let mut worst_z: f64 = 0.0;
    for &n in &cfg.ns {
        let vals: Vec<f64> = series.iter().map(|s| s.values[n as usize - 1]).collect();
        for (k, (&v, s)) in vals.iter().zip(&series).enumerate() {
            rows.push(ReplicaRow { replica: k as u64, n, value: v, aux: s.tail_bound });
        }
        let summary = Summary::of(&vals);
        let z = (summary.mean - 1.0) / summary.std_error();
        worst_z = worst_z.max(z.abs());
        let tail = series.iter().map(|s| s.tail_bound).fold(0.0, f64::max);
        let extra = BTreeMap::from([("z".to_string(), z), ("max_tail_bound".to_string(), tail)]);
        per_n.push(NStats { n, summary, extra });
    }
    Ok(ExperimentReport {
        experiment: "mean_one".into(),
        replica_count: cfg.replicas,
        excluded: 0,
        provenance: prov,
        per_n,
        fits: BTreeMap::from([("max_abs_z".to_string(), worst_z)]),
        rows,
        wall_time: start.elapsed(),
    })
}

/// Solves `A u = b` by Gaussian elimination with partial pivoting.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c].abs() < 1e-300 {
            return invalid("covariance matrix is singular");
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let m = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= m * a[c][k];
            }
            b[r] -= m * b[c];
        }
    }
    let mut u = vec![0.0; n];
    for c in (0..n).rev() {
        u[c] = (b[c] - (c + 1..n).map(|k| a[c][k] * u[k]).sum::<f64>()) / a[c][c];
    }
    Ok(u)
}

/// Lattice Gaussian with covariance `cov` restricted to the box
/// `|x_i| ≤ w`, normalised over that box.
pub fn lattice_gaussian(cov: &[Vec<f64>], w: i32) -> Result<BTreeMap<Vec<i32>, f64>> {
    let d = cov.len();
    let mut out = BTreeMap::new();
    let side = (2 * w + 1) as usize;
    let mut total = 0.0;
    for idx in 0..side.pow(d as u32) {
        let mut j = idx;
        let x: Vec<i32> = (0..d)
            .map(|_| {
                let c = (j % side) as i32 - w;
                j /= side;
                c
            })
            .collect();
        let xf: Vec<f64> = x.iter().map(|&c| c as f64).collect();
        let u = solve_small(cov.to_vec(), xf.clone())?;
        let quad: f64 = xf.iter().zip(&u).map(|(a, b)| a * b).sum();
        let g = (-0.5 * quad).exp();
        total += g;
        out.insert(x, g);
    }
    for v in out.values_mut() {
        *v /= total;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveConfig {
    #[serde(flatten)]
    pub replicas: ReplicaConfig,
    /// Radius of the cluster probe used for conditioning on `0 ∈ Cl_∞`.
    pub probe_radius: u32,
}

/// Endpoint spread of the quenched measure on admitted replicas: rows carry
/// `Σ‖x⊥‖² μ_N(x) / N` and the total-variation distance to the lattice
/// Gaussian with covariance `N Σ`.
pub fn diffusive_experiment(
    spec: &PotentialSpec,
    params: &ModelParams,
    table: &RenewalTable,
    cfg: &DiffusiveConfig,
) -> Result<ExperimentReport> {
    let rc = &cfg.replicas;
    rc.validate()?;
    spec.validate()?;
    params.validate()?;
    if table.d != params.d {
        return invalid("table dimension differs from model dimension");
    }
    let start = Instant::now();
    let prov = rc.provenance();
    let sigma = diffusivity(table, 1e-3, true)?;
    let f = free_root(params.d, params.lambda);
    let per_replica: Vec<Option<Vec<(f64, f64)>>> = run_replicas(rc.replicas, rc.parallel, |r| {
        let env = Environment::new(*spec, prov.env_seed(r))?;
        if in_infinite_cluster(&env, LatticePoint::ORIGIN, cfg.probe_radius, params.d) != ClusterProbe::ConnectedBeyondProbe {
            return Ok(None);
        }
        let mut out = Vec::new();
        for &n in &rc.ns {
            let g = quenched_green(&env, params, n, rc.rel_tol * f.powi(n as i32))?;
            let mu = g.endpoint_distribution();
            if mu.is_empty() {
                out.push((f64::NAN, f64::NAN));
                continue;
            }
            let m2: f64 = mu.iter().map(|(x, p)| x.perp_norm2() as f64 * p).sum::<f64>() / n as f64;
            let cov: Vec<Vec<f64>> = sigma.sigma_matrix.iter().map(|row| row.iter().map(|v| v * n as f64).collect()).collect();
            let gauss = lattice_gaussian(&cov, g.box_halfwidth)?;
            let mut tv = 0.0;
            for (x, p) in &gauss {
                let q = mu.get(&LatticePoint::new(x, n as i32)).copied().unwrap_or(0.0);
                tv += (p - q).abs();
            }
            out.push((m2, 0.5 * tv));
        }
        Ok(Some(out))
    })?;

    let admitted: Vec<(u64, &Vec<(f64, f64)>)> =
        per_replica.iter().enumerate().filter_map(|(r, v)| v.as_ref().map(|v| (r as u64, v))).collect();
    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    for (i, &n) in rc.ns.iter().enumerate() {
        let m2: Vec<f64> = admitted.iter().map(|(_, v)| v[i].0).collect();
        let tv: Vec<f64> = admitted.iter().map(|(_, v)| v[i].1).collect();
        for (r, v) in &admitted {
            rows.push(ReplicaRow { replica: *r, n, value: v[i].0, aux: v[i].1 });
        }
        let gaps: Vec<f64> = m2.iter().map(|v| (v - sigma.sigma2).abs()).collect();
        let extra = BTreeMap::from([
            ("median_abs_gap".to_string(), median(&gaps)),
            ("tv_mean".to_string(), Summary::of(&tv).mean),
            ("tv_median".to_string(), median(&tv)),
        ]);
        per_n.push(NStats { n, summary: Summary::of(&m2), extra });
    }
    let excluded = rc.replicas - admitted.len();
    let fits = BTreeMap::from([
        ("sigma2".to_string(), sigma.sigma2),
        ("excluded_fraction".to_string(), excluded as f64 / rc.replicas as f64),
    ]);
    Ok(ExperimentReport {
        experiment: "diffusive".into(),
        replica_count: rc.replicas,
        excluded,
        provenance: prov,
        per_n,
        fits,
        rows,
        wall_time: start.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityConfig {
    /// Box sides `n`; the box is `[0, n)^d` on the base hyperplane.
    pub box_sides: Vec<i32>,
    pub replicas: usize,
    pub seed: u64,
    pub s_height: u32,
    pub budget: LengthBudget,
    pub probe_radius: u32,
    pub parallel: bool,
}

/// `𝔰^{θ_x}` over boxes of the base hyperplane. Rows carry the box average
/// of `𝔰 - 1` and the box maximum of `𝔰`.
pub fn positivity_probe(
    spec: &PotentialSpec,
    params: &ModelParams,
    table: &RenewalTable,
    cfg: &PositivityConfig,
) -> Result<ExperimentReport> {
    spec.validate()?;
    check_table(params, table, cfg.s_height)?;
    if cfg.box_sides.is_empty() || cfg.box_sides.iter().any(|&n| n < 1) {
        return invalid("box sides must be positive");
    }
    if cfg.replicas < 2 {
        return invalid("at least two replicas are needed");
    }
    let start = Instant::now();
    let prov = Provenance { base_seed: cfg.seed, first_stream: 0, stream_count: cfg.replicas as u64 };
    let d = params.d;
    let opts = EnumOptions::serial();
    let per_replica: Vec<(bool, Vec<(f64, f64)>)> = run_replicas(cfg.replicas, cfg.parallel, |r| {
        let env = Environment::new(*spec, prov.env_seed(r))?;
        let connected =
            in_infinite_cluster(&env, LatticePoint::ORIGIN, cfg.probe_radius, d) == ClusterProbe::ConnectedBeyondProbe;
        let mut cache: BTreeMap<LatticePoint, f64> = BTreeMap::new();
        let mut out = Vec::new();
        for &n in &cfg.box_sides {
            let (mut sum, mut best) = (0.0, f64::NEG_INFINITY);
            let count = (n as usize).pow(d as u32);
            for idx in 0..count {
                let mut j = idx;
                let perp: Vec<i32> = (0..d)
                    .map(|_| {
                        let c = (j % n as usize) as i32;
                        j /= n as usize;
                        c
                    })
                    .collect();
                let x = LatticePoint::new(&perp, 0);
                let s = match cache.get(&x) {
                    Some(&s) => s,
                    None => {
                        let s = s_partial(&env.shifted(x), params, table, cfg.s_height, cfg.budget, &opts)?;
                        cache.insert(x, s);
                        s
                    }
                };
                sum += s - 1.0;
                best = best.max(s);
            }
            out.push((sum / count as f64, best));
        }
        Ok((connected, out))
    })?;

    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    let mut log_pts = Vec::new();
    for (i, &n) in cfg.box_sides.iter().enumerate() {
        let avg: Vec<f64> = per_replica.iter().map(|(_, v)| v[i].0).collect();
        for (r, (_, v)) in per_replica.iter().enumerate() {
            rows.push(ReplicaRow { replica: r as u64, n: n as u32, value: v[i].0, aux: v[i].1 });
        }
        let connected: Vec<&(bool, Vec<(f64, f64)>)> = per_replica.iter().filter(|(c, _)| *c).collect();
        let positive = connected.iter().filter(|(_, v)| v[i].1 > 0.0).count();
        let frac = if connected.is_empty() { f64::NAN } else { positive as f64 / connected.len() as f64 };
        let summary = Summary::of(&avg);
        if summary.variance > 0.0 {
            log_pts.push(((n as f64).ln(), summary.variance.ln()));
        }
        per_n.push(NStats { n: n as u32, summary, extra: BTreeMap::from([("positive_fraction".to_string(), frac)]) });
    }
    let connected = per_replica.iter().filter(|(c, _)| *c).count();
    let mut fits = BTreeMap::from([(
        "connected_fraction".to_string(),
        connected as f64 / cfg.replicas as f64,
    )]);
    if log_pts.len() >= 2 {
        let (slope, _, r2) = linear_fit(&log_pts);
        fits.insert("variance_slope".into(), slope);
        fits.insert("variance_slope_r2".into(), r2);
        if log_pts.len() >= 3 {
            let k = log_pts.len() as f64;
            let mx = log_pts.iter().map(|p| p.0).sum::<f64>() / k;
            let sxx: f64 = log_pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let my = log_pts.iter().map(|p| p.1).sum::<f64>() / k;
            let syy: f64 = log_pts.iter().map(|p| (p.1 - my).powi(2)).sum();
            let se = ((1.0 - r2) * syy / (k - 2.0) / sxx).sqrt();
            fits.insert("variance_slope_se".into(), se);
        }
    }
    Ok(ExperimentReport {
        experiment: "positivity".into(),
        replica_count: cfg.replicas,
        excluded: cfg.replicas - connected,
        provenance: prov,
        per_n,
        fits,
        rows,
        wall_time: start.elapsed(),
    })
}
