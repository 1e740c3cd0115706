//! One function per subcommand. Each reads what it needs from the config,
//! calls into `polymer_core` and hands its payload to the bundle writer.

use std::collections::BTreeMap;

use polymer_core::annealed::{
    annealed_partition_exact, attractiveness_check, diffusivity, renewal_tables, second_moments, tilted_phi,
    toy_table, RenewalTable,
};
use polymer_core::effective_walks::{
    bubble_statistics, exact_span_law, intersection_decay, span_tail_fit, BubbleConfig, DecayConfig, StepLaw,
};
use polymer_core::environment::{Environment, PotentialSpec};
use polymer_core::lattice::LatticePoint;
use polymer_core::pathsum::{
    free_root, quenched_green, quenched_green_from, restricted_weights, EnsembleKind, SlabBox, TMethod,
};
use polymer_core::quenched_limits::{
    diffusive_experiment, lattice_gaussian, mean_one_experiment, positivity_probe, ratio_experiment, sinai_residual,
    DiffusiveConfig, MeanOneConfig, PositivityConfig, ReplicaConfig,
};
use polymer_core::rng::environment_seed;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{emit_plotdata, BundleWriter, PlotKind, PlotPoint};
use crate::HarnessError;

type Out = Result<(), HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Enumerate,
    Quenched,
    Annealed,
    Renewal,
    Tilt,
    Diffusivity,
    Sinai,
    MeanOne,
    Ratio,
    Diffusive,
    Positivity,
    Walks,
}

impl Command {
    pub const ALL: [Command; 12] = [
        Command::Enumerate,
        Command::Quenched,
        Command::Annealed,
        Command::Renewal,
        Command::Tilt,
        Command::Diffusivity,
        Command::Sinai,
        Command::MeanOne,
        Command::Ratio,
        Command::Diffusive,
        Command::Positivity,
        Command::Walks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Enumerate => "enumerate",
            Command::Quenched => "quenched",
            Command::Annealed => "annealed",
            Command::Renewal => "renewal",
            Command::Tilt => "tilt",
            Command::Diffusivity => "diffusivity",
            Command::Sinai => "sinai",
            Command::MeanOne => "mean-one",
            Command::Ratio => "ratio",
            Command::Diffusive => "diffusive",
            Command::Positivity => "positivity",
            Command::Walks => "walks",
        }
    }
}

pub(crate) fn dispatch(cmd: Command, cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    match cmd {
        Command::Enumerate => enumerate(cfg, parallel, w),
        Command::Quenched => quenched(cfg, w),
        Command::Annealed => annealed(cfg, parallel, w),
        Command::Renewal => renewal(cfg, parallel, w),
        Command::Tilt => tilt(cfg, parallel, w),
        Command::Diffusivity => diffusivity_cmd(cfg, parallel, w),
        Command::Sinai => sinai(cfg, parallel, w),
        Command::MeanOne => mean_one(cfg, parallel, w),
        Command::Ratio => ratio(cfg, parallel, w),
        Command::Diffusive => diffusive(cfg, parallel, w),
        Command::Positivity => positivity(cfg, parallel, w),
        Command::Walks => walks(cfg, parallel, w),
    }
}

fn max_height(cfg: &RunConfig) -> u32 {
    *cfg.experiment.heights.iter().max().expect("validated nonempty")
}

fn env_for(spec: &PotentialSpec, seed: u64, replica: u64) -> Result<Environment, HarnessError> {
    Ok(Environment::new(*spec, environment_seed(seed, replica))?)
}

/// The annealed table named by the config, or the toy table.
pub fn table_for(cfg: &RunConfig, parallel: bool) -> Result<RenewalTable, HarnessError> {
    let b = &cfg.budgets;
    if let Some(a) = cfg.experiment.toy {
        if cfg.model.d != 1 {
            return Err(HarnessError::Config("the toy table needs d = 1".into()));
        }
        return Ok(toy_table(a, b.n_max)?);
    }
    let params = cfg.params()?;
    Ok(renewal_tables(&params, &cfg.potential, b.n_max, b.m_max, cfg.table_method(), &cfg.enum_options(parallel))?)
}

#[derive(Serialize)]
struct EnumerateReplica {
    replica: u64,
    env_seed: u64,
    nodes: u64,
    by_height: Vec<f64>,
    tail_by_height: Vec<f64>,
    /// `max_x |T_x - (T * Q)_x|` between direct enumeration and the
    /// renewal convolution; only for the `t` family.
    renewal_residual: Option<f64>,
}

#[derive(Serialize)]
struct EnumeratePayload {
    kind: EnsembleKind,
    max_height: u32,
    budget: polymer_core::pathsum::LengthBudget,
    replicas: Vec<EnumerateReplica>,
    max_renewal_residual: Option<f64>,
}

fn enumerate(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let kind = cfg.experiment.ensemble;
    let n = max_height(cfg);
    let budget = cfg.budget();
    let opts = cfg.enum_options(parallel);
    let mut replicas = Vec::new();
    let mut first = None;
    for r in 0..cfg.budgets.replicas as u64 {
        let env = env_for(&cfg.potential, cfg.seed, r)?;
        let table = restricted_weights(&env, &params, n, kind, budget, TMethod::Enumerate, &opts)?;
        let renewal_residual = if kind == EnsembleKind::T {
            let conv = restricted_weights(&env, &params, n, kind, budget, TMethod::Convolution, &opts)?;
            Some(table.max_abs_diff(&conv))
        } else {
            None
        };
        replicas.push(EnumerateReplica {
            replica: r,
            env_seed: environment_seed(cfg.seed, r),
            nodes: table.nodes,
            by_height: table.by_height(),
            tail_by_height: table.tail_by_height.clone(),
            renewal_residual,
        });
        if first.is_none() {
            first = Some(table);
        }
    }
    let max_renewal_residual = replicas.iter().filter_map(|r| r.renewal_residual).reduce(f64::max);
    w.json("enumerate.json", &EnumeratePayload { kind, max_height: n, budget, replicas, max_renewal_residual })?;
    if let Some(t) = first {
        w.csv_with("weights.csv", |buf| t.to_weights().write_csv(params.d, buf))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct QuenchedRow {
    n: u32,
    partition: f64,
    tail_bound: f64,
    tolerance: f64,
    free_power: f64,
    box_halfwidth: i32,
    depth: i32,
    sweeps: usize,
}

fn quenched(cfg: &RunConfig, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let env = env_for(&cfg.potential, cfg.seed, 0)?;
    let f = free_root(params.d, params.lambda);
    let mut heights = cfg.experiment.heights.clone();
    heights.sort_unstable();
    let mut rows = Vec::new();
    let mut last = None;
    for &n in &heights {
        let tol = cfg.budgets.rel_tol * f.powi(n as i32);
        let g = if cfg.budgets.box_halfwidth > 0 {
            let start = SlabBox { halfwidth: cfg.budgets.box_halfwidth, ..SlabBox::initial(n) };
            quenched_green_from(&env, &params, n, tol, start)?
        } else {
            quenched_green(&env, &params, n, tol)?
        };
        rows.push(QuenchedRow {
            n,
            partition: g.total,
            tail_bound: g.tail_bound,
            tolerance: tol,
            free_power: f.powi(n as i32),
            box_halfwidth: g.box_halfwidth,
            depth: g.depth,
            sweeps: g.sweeps,
        });
        last = Some(g);
    }
    w.json("quenched.json", &rows)?;
    if let Some(g) = last {
        let d = params.d;
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("mass".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let body: Vec<Vec<String>> = g
            .endpoint_distribution()
            .iter()
            .map(|(x, m)| {
                let mut r: Vec<String> = x.perp[..d].iter().map(|c| c.to_string()).collect();
                r.push(m.to_string());
                r
            })
            .collect();
        w.rows("endpoint.csv", &header, &body)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AnnealedRow {
    n: u32,
    partition: f64,
    tail_bound: f64,
    free_power: f64,
}

#[derive(Serialize)]
struct AnnealedPayload {
    kind: EnsembleKind,
    rows: Vec<AnnealedRow>,
    attractiveness: Option<polymer_core::annealed::AttractivenessReport>,
}

fn annealed(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let kind = cfg.experiment.ensemble;
    let budget = cfg.budget();
    let f = free_root(params.d, params.lambda);
    let opts = cfg.enum_options(parallel);
    let mut rows = Vec::new();
    for &n in &cfg.experiment.heights {
        let (partition, tail_bound) =
            annealed_partition_exact(&params, &cfg.potential, n, budget.allowed(n as i32), kind, &opts)?;
        rows.push(AnnealedRow { n, partition, tail_bound, free_power: f.powi(n as i32) });
    }
    let e = &cfg.experiment;
    let attractiveness = if e.attract_pairs > 0 {
        Some(attractiveness_check(&params, &cfg.potential, e.attract_pairs, e.attract_max_len, cfg.seed)?)
    } else {
        None
    };
    w.json("annealed.json", &AnnealedPayload { kind, rows, attractiveness })
}

/// Exponential envelope of `|t_N - 1/μ|` above the rounding floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceFit {
    /// Decay rate `c` of the least-squares fit of the log error.
    pub rate: f64,
    /// Smallest `C` with `|t_N - 1/μ| ≤ C e^{-cN}` on the fitted range.
    pub constant: f64,
    pub fit_from: i32,
    pub fit_to: i32,
    pub r2: f64,
    pub floor: f64,
    pub final_n: i32,
    pub final_error: f64,
}

pub fn convergence_fit(table: &RenewalTable) -> ConvergenceFit {
    let inv = 1.0 / table.mu;
    let floor = 1e3 * f64::EPSILON * inv;
    let err: Vec<f64> = table.t_by_height.iter().map(|t| (t - inv).abs()).collect();
    let pts: Vec<(f64, f64)> =
        err.iter().enumerate().skip(1).filter(|(_, e)| **e > floor).map(|(n, e)| (n as f64, e.ln())).collect();
    let final_n = err.len() as i32 - 1;
    let final_error = *err.last().unwrap_or(&f64::NAN);
    if pts.len() < 2 {
        return ConvergenceFit {
            rate: f64::NAN,
            constant: f64::NAN,
            fit_from: 0,
            fit_to: 0,
            r2: f64::NAN,
            floor,
            final_n,
            final_error,
        };
    }
    let (slope, _, r2) = polymer_core::annealed::linear_fit(&pts);
    let rate = -slope;
    let constant = pts.iter().map(|(n, le)| (le + rate * n).exp()).fold(0.0, f64::max);
    ConvergenceFit {
        rate,
        constant,
        fit_from: pts[0].0 as i32,
        fit_to: pts.last().unwrap().0 as i32,
        r2,
        floor,
        final_n,
        final_error,
    }
}

#[derive(Serialize)]
struct RenewalPayload<'a> {
    table: &'a RenewalTable,
    exp_minus_xi: f64,
    free_root: f64,
    inverse_mu: f64,
    convergence: ConvergenceFit,
}

fn renewal(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let table = table_for(cfg, parallel)?;
    let fit = convergence_fit(&table);
    let inv = 1.0 / table.mu;
    let payload = RenewalPayload {
        table: &table,
        exp_minus_xi: (-table.xi).exp(),
        free_root: free_root(cfg.model.d, cfg.model.lambda),
        inverse_mu: inv,
        convergence: fit,
    };
    w.json("renewal.json", &payload)?;
    let pts: Vec<PlotPoint> = table
        .t_by_height
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            let env = (fit.constant * (-fit.rate * n as f64).exp()).max(fit.floor);
            PlotPoint { x: n as f64, y: t, ci_lo: inv - env, ci_hi: inv + env }
        })
        .collect();
    w.plot("t_convergence.csv", &pts)
}

/// `φ[z]` of the toy table: `b s² + 2a cosh(z) s = 1` with `s = e^{-φ}`.
pub fn toy_phi(a: f64, z: f64) -> f64 {
    let b = 1.0 - 2.0 * a;
    let c = a * z.cosh();
    let s = (-c + (c * c + b).sqrt()) / b;
    -s.ln()
}

#[derive(Serialize)]
struct TiltRow {
    z: Vec<f64>,
    phi: f64,
    newton_residual: f64,
    iterations: usize,
    closed_form: Option<f64>,
}

fn tilt(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let table = table_for(cfg, parallel)?;
    let mut rows = Vec::new();
    for z in &cfg.experiment.z_grid {
        let r = tilted_phi(&table, z)?;
        let closed_form = cfg.experiment.toy.map(|a| toy_phi(a, z[0]));
        rows.push(TiltRow { z: r.z, phi: r.phi, newton_residual: r.newton_residual, iterations: r.iterations, closed_form });
    }
    w.json("tilt.json", &rows)
}

#[derive(Serialize)]
struct DiffusivityPayload {
    sigma_matrix: Vec<Vec<f64>>,
    sigma2: f64,
    fd_step: f64,
    /// `(N, (1/(N t_N)) Σ ‖x⊥‖² t_x, gap to σ², N × gap)`.
    moments: Vec<(u32, f64, f64, f64)>,
    /// `gap(N) / gap(2N)` for every height whose double is also listed.
    halving: Vec<(u32, f64)>,
}

fn diffusivity_cmd(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let table = table_for(cfg, parallel)?;
    let est = diffusivity(&table, cfg.experiment.fd_step, cfg.experiment.richardson)?;
    let hs = &cfg.experiment.heights;
    if max_height(cfg) as i32 > table.n_max {
        return Err(HarnessError::Config(format!("heights exceed n_max = {}", table.n_max)));
    }
    let ns: Vec<i32> = hs.iter().map(|&n| n as i32).collect();
    let m2 = second_moments(&table, &ns);
    let moments: Vec<(u32, f64, f64, f64)> =
        hs.iter().zip(&m2).map(|(&n, &m)| (n, m, m - est.sigma2, n as f64 * (m - est.sigma2))).collect();
    let gap: BTreeMap<u32, f64> = moments.iter().map(|m| (m.0, m.2)).collect();
    let halving = gap.iter().filter_map(|(&n, &g)| gap.get(&(2 * n)).map(|&g2| (n, g / g2))).collect();
    w.json(
        "diffusivity.json",
        &DiffusivityPayload { sigma_matrix: est.sigma_matrix, sigma2: est.sigma2, fd_step: est.fd_step, moments, halving },
    )
}

fn cone_targets(cfg: &RunConfig) -> Result<Vec<LatticePoint>, HarnessError> {
    let params = cfg.params()?;
    let d = params.d;
    if !cfg.experiment.targets.is_empty() {
        return cfg
            .experiment
            .targets
            .iter()
            .map(|t| {
                if t.len() != d + 1 {
                    return Err(HarnessError::Config(format!("target {t:?} needs {} coordinates", d + 1)));
                }
                Ok(LatticePoint::new(&t[..d], t[d]))
            })
            .collect();
    }
    let h = max_height(cfg) as i32;
    let [p, q] = cfg.model.aperture;
    let r = (p as i32 * h) / q as i32 + 1;
    let side = (2 * r + 1) as usize;
    let mut out = Vec::new();
    for idx in 0..side.pow(d as u32) {
        let mut j = idx;
        let perp: Vec<i32> = (0..d)
            .map(|_| {
                let c = (j % side) as i32 - r;
                j /= side;
                c
            })
            .collect();
        let x = LatticePoint::new(&perp, h);
        if params.aperture.open_contains(x) {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SinaiRow {
    replica: u64,
    target: LatticePoint,
    lhs: f64,
    residual_last: f64,
    residual_first: f64,
}

#[derive(Serialize)]
struct SinaiPayload {
    rows: Vec<SinaiRow>,
    max_residual_last: f64,
    max_residual_first: f64,
}

fn sinai(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let targets = cone_targets(cfg)?;
    let opts = cfg.enum_options(parallel);
    let mut rows = Vec::new();
    for r in 0..cfg.budgets.replicas as u64 {
        let env = env_for(&cfg.potential, cfg.seed, r)?;
        for &x in &targets {
            let s = sinai_residual(&env, &params, &cfg.potential, x, cfg.budget(), &opts)?;
            rows.push(SinaiRow {
                replica: r,
                target: x,
                lhs: s.lhs,
                residual_last: s.residual_last,
                residual_first: s.residual_first,
            });
        }
    }
    let max_residual_last = rows.iter().map(|r| r.residual_last.abs()).fold(0.0, f64::max);
    let max_residual_first = rows.iter().map(|r| r.residual_first.abs()).fold(0.0, f64::max);
    w.json("sinai.json", &SinaiPayload { rows, max_residual_last, max_residual_first })
}

fn replica_config(cfg: &RunConfig, parallel: bool) -> ReplicaConfig {
    ReplicaConfig {
        ns: cfg.experiment.heights.clone(),
        replicas: cfg.budgets.replicas,
        seed: cfg.seed,
        rel_tol: cfg.budgets.rel_tol,
        parallel,
    }
}

fn write_report(w: &mut BundleWriter, name: &str, report: &polymer_core::quenched_limits::ExperimentReport) -> Out {
    w.json(&format!("{name}.json"), report)?;
    w.csv_with(&format!("{name}_rows.csv"), |buf| report.write_csv(buf))
}

fn mean_one(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let table = table_for(cfg, parallel)?;
    let mc = MeanOneConfig {
        ns: cfg.experiment.heights.clone(),
        replicas: cfg.budgets.replicas,
        seed: cfg.seed,
        budget: cfg.budget(),
        parallel,
    };
    let report = mean_one_experiment(&cfg.potential, &params, &table, &mc)?;
    write_report(w, "mean_one", &report)?;
    emit_plotdata(w, "mean_vs_n.csv", &report, PlotKind::MeanVsN)
}

fn ratio(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let report = ratio_experiment(&cfg.potential, &params, &replica_config(cfg, parallel))?;
    write_report(w, "ratio", &report)?;
    emit_plotdata(w, "ratio_vs_n.csv", &report, PlotKind::VarianceVsN)
}

fn diffusive(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let table = table_for(cfg, parallel)?;
    let dc = DiffusiveConfig { replicas: replica_config(cfg, parallel), probe_radius: cfg.experiment.probe_radius };
    let report = diffusive_experiment(&cfg.potential, &params, &table, &dc)?;
    write_report(w, "diffusive", &report)?;

    // Overlay for replica 0 at the largest height: first transverse
    // coordinate of the endpoint against the lattice Gaussian.
    let n = max_height(cfg);
    let env = env_for(&cfg.potential, cfg.seed, 0)?;
    let tol = cfg.budgets.rel_tol * free_root(params.d, params.lambda).powi(n as i32);
    let g = quenched_green(&env, &params, n, tol)?;
    let mut empirical: BTreeMap<i32, f64> = BTreeMap::new();
    for (x, m) in g.endpoint_distribution() {
        *empirical.entry(x.perp[0]).or_insert(0.0) += m;
    }
    let sigma2 = report.fits.get("sigma2").copied().unwrap_or(f64::NAN);
    let var = sigma2 / params.d as f64 * n as f64;
    let half = empirical.keys().map(|k| k.abs()).max().unwrap_or(0);
    let gauss = if var > 0.0 { lattice_gaussian(&[vec![var]], half)? } else { BTreeMap::new() };
    let emp_pts: Vec<PlotPoint> = empirical.iter().map(|(&k, &m)| PlotPoint::exact(k as f64, m)).collect();
    let gauss_pts: Vec<PlotPoint> = gauss.iter().map(|(k, &m)| PlotPoint::exact(k[0] as f64, m)).collect();
    w.plot("histogram_empirical.csv", &emp_pts)?;
    w.plot("histogram_gaussian.csv", &gauss_pts)
}

fn positivity(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let table = table_for(cfg, parallel)?;
    let e = &cfg.experiment;
    let pc = PositivityConfig {
        box_sides: e.box_sides.clone(),
        replicas: cfg.budgets.replicas,
        seed: cfg.seed,
        s_height: e.s_height,
        budget: cfg.budget(),
        probe_radius: e.probe_radius,
        parallel,
    };
    let report = positivity_probe(&cfg.potential, &params, &table, &pc)?;
    write_report(w, "positivity", &report)?;
    emit_plotdata(w, "variance_vs_n.csv", &report, PlotKind::VarianceVsN)
}

#[derive(Serialize)]
struct WalksPayload {
    law: StepLaw,
    exact_span_law: Vec<f64>,
    tail: Option<polymer_core::effective_walks::SpanTailFit>,
}

fn walks(cfg: &RunConfig, parallel: bool, w: &mut BundleWriter) -> Out {
    let params = cfg.params()?;
    let table = table_for(cfg, parallel)?;
    let law = StepLaw::from_table(&table, params.aperture, Some(cfg.hash()))?;
    let e = &cfg.experiment;
    let tail = if e.pairs > 0 { Some(span_tail_fit(&law, e.pairs, e.l_min, e.l_max, cfg.seed, parallel)?) } else { None };
    if let Some(t) = &tail {
        let pts: Vec<PlotPoint> = t
            .survival
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                let h = 1.96 * (s * (1.0 - s) / t.pairs as f64).sqrt();
                PlotPoint { x: l as f64, y: s, ci_lo: s - h, ci_hi: s + h }
            })
            .collect();
        w.plot("span_tail.csv", &pts)?;
    }
    if !e.spans.is_empty() && e.samples > 0 {
        let bc = BubbleConfig {
            spans: e.spans.clone(),
            offsets: e.offsets.clone(),
            samples: e.samples,
            eta: e.eta,
            eta_grid: e.eta_grid.clone(),
            horizon: e.horizon,
            seed: cfg.seed,
            parallel,
        };
        let report = bubble_statistics(&law, params.aperture, &bc)?;
        w.json("bubbles.json", &report)?;
        let pts: Vec<PlotPoint> = report
            .per_n
            .iter()
            .map(|s| {
                let y = s.extra.get("scaled").copied().unwrap_or(f64::NAN);
                let se = s.extra.get("scaled_se").copied().unwrap_or(f64::NAN);
                PlotPoint { x: s.n as f64, y, ci_lo: y - 1.96 * se, ci_hi: y + 1.96 * se }
            })
            .collect();
        w.plot("bubbles_scaled.csv", &pts)?;
    }
    if !e.separations.is_empty() && e.pairs > 0 {
        let dc = DecayConfig {
            separations: e.separations.clone(),
            pairs: e.pairs,
            horizon: e.horizon,
            seed: cfg.seed,
            parallel,
        };
        let report = intersection_decay(&law, params.aperture, &dc)?;
        w.json("decay.json", &report)?;
    }
    let exact = exact_span_law(&law, e.l_max.max(1));
    w.json("walks.json", &WalksPayload { law, exact_span_law: exact, tail })
}
