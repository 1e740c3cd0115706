//! Random walks driven by the irreducible step law, their synchronization
//! and the intersection statistics of their step diamonds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealed::{linear_fit, renewal_sequence, RenewalTable};
use crate::error::{invalid, Result};
use crate::lattice::{diamonds_intersect, ConeAperture, Diamond, LatticePoint};
use crate::quenched_limits::{ExperimentReport, NStats, Provenance, ReplicaRow, Summary};
use crate::rng::replica_rng;

/// Samples are drawn in this many fixed chunks, each on its own stream, so
/// results do not depend on the thread count.
const CHUNKS: u64 = 64;

/// Normalised irreducible step law.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLaw {
    pub d: usize,
    pub atoms: Vec<(LatticePoint, f64)>,
    pub source_hash: Option<String>,
    #[serde(skip)]
    alias: Option<WeightedAliasIndex<f64>>,
}

impl PartialEq for StepLaw {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.atoms == other.atoms && self.source_hash == other.source_hash
    }
}

impl StepLaw {
    /// Atoms must gain height; weights are normalised to sum to one.
    pub fn new(d: usize, atoms: Vec<(LatticePoint, f64)>) -> Result<Self> {
        let atoms: Vec<(LatticePoint, f64)> = atoms.into_iter().filter(|(_, p)| *p > 0.0).collect();
        if atoms.is_empty() {
            return invalid("step law has no atoms");
        }
        if let Some((x, _)) = atoms.iter().find(|(x, _)| x.par < 1) {
            return invalid(format!("atom {x} does not gain height"));
        }
        if atoms.iter().any(|(_, p)| !p.is_finite()) {
            return invalid("step law weights must be finite");
        }
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        let atoms: Vec<(LatticePoint, f64)> = atoms.into_iter().map(|(x, p)| (x, p / total)).collect();
        let mut law = StepLaw { d, atoms, source_hash: None, alias: None };
        law.build_alias()?;
        Ok(law)
    }

    /// Law of a table's scaled irreducible masses. The mass must be one up
    /// to the table's tail bound, and every atom must lie in the open cone.
    pub fn from_table(table: &RenewalTable, aperture: ConeAperture, source_hash: Option<String>) -> Result<Self> {
        let total: f64 = table.q_by_endpoint.values().sum();
        if (total - 1.0).abs() > table.tail_bound + 1e-9 {
            return invalid(format!("table mass {total} is not one within its tail bound {:e}", table.tail_bound));
        }
        if let Some(x) = table.q_by_endpoint.keys().find(|x| !aperture.open_contains(**x)) {
            return invalid(format!("atom {x} lies outside the cone"));
        }
        let mut law = Self::new(table.d, table.q_by_endpoint.iter().map(|(x, p)| (*x, *p)).collect())?;
        law.source_hash = source_hash;
        Ok(law)
    }

    fn build_alias(&mut self) -> Result<()> {
        let w: Vec<f64> = self.atoms.iter().map(|(_, p)| *p).collect();
        self.alias = Some(WeightedAliasIndex::new(w).map_err(|e| crate::Error::Validation(format!("step law: {e}")))?);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatticePoint {
        let alias = self.alias.as_ref().expect("alias table is built on construction");
        self.atoms[alias.sample(rng)].0
    }

    /// Total mass per height `0..=max`.
    pub fn height_law(&self) -> Vec<f64> {
        let top = self.atoms.iter().map(|(x, _)| x.par).max().unwrap_or(0);
        let mut out = vec![0.0; top as usize + 1];
        for (x, p) in &self.atoms {
            out[x.par as usize] += p;
        }
        out
    }

    /// Restores the sampler after deserialisation.
    pub fn rebuild(mut self) -> Result<Self> {
        self.build_alias()?;
        Ok(self)
    }
}

/// `start` followed by the cumulative sums of `steps` draws.
pub fn sample_walk_from<R: Rng + ?Sized>(law: &StepLaw, start: LatticePoint, steps: usize, rng: &mut R) -> Vec<LatticePoint> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = start;
    out.push(x);
    for _ in 0..steps {
        x = x + law.sample(rng);
        out.push(x);
    }
    out
}

/// A walk of `steps` draws from the origin on stream 0 of `seed`.
pub fn sample_walk(law: &StepLaw, steps: usize, seed: u64) -> Vec<LatticePoint> {
    sample_walk_from(law, LatticePoint::ORIGIN, steps, &mut replica_rng(seed, 0))
}

/// One step of the synchronized pair: both increments end on the same
/// hyperplane, `t = u∥ = v∥`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SyncStep {
    pub t: i32,
    pub u: LatticePoint,
    pub v: LatticePoint,
}

/// Steps of the pair between consecutive hyperplanes hit by both paths.
/// Both paths must start at the same height and gain height at every step.
pub fn synchronize(x: &[LatticePoint], y: &[LatticePoint]) -> Vec<SyncStep> {
    let mut out = Vec::new();
    let (Some(&x0), Some(&y0)) = (x.first(), y.first()) else {
        return out;
    };
    if x0.par != y0.par {
        return out;
    }
    let (mut u, mut v) = (x0, y0);
    let (mut i, mut j) = (1, 1);
    while i < x.len() && j < y.len() {
        match x[i].par.cmp(&y[j].par) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(SyncStep { t: x[i].par - u.par, u: x[i] - u, v: y[j] - v });
                u = x[i];
                v = y[j];
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Absolute positions of a synchronized pair started at `(u0, v0)`.
pub fn sync_positions(u0: LatticePoint, v0: LatticePoint, steps: &[SyncStep]) -> (Vec<LatticePoint>, Vec<LatticePoint>) {
    let mut us = vec![u0];
    let mut vs = vec![v0];
    for s in steps {
        us.push(*us.last().unwrap() + s.u);
        vs.push(*vs.last().unwrap() + s.v);
    }
    (us, vs)
}

/// Draws synchronized steps directly, advancing whichever walk is lower.
pub struct SyncSampler<'a> {
    law: &'a StepLaw,
    pub u: LatticePoint,
    pub v: LatticePoint,
}

impl<'a> SyncSampler<'a> {
    pub fn new(law: &'a StepLaw, u: LatticePoint, v: LatticePoint) -> Self {
        SyncSampler { law, u, v }
    }

    pub fn next_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SyncStep {
        let (mut x, mut y) = (self.u + self.law.sample(rng), self.v + self.law.sample(rng));
        while x.par != y.par {
            if x.par < y.par {
                x = x + self.law.sample(rng);
            } else {
                y = y + self.law.sample(rng);
            }
        }
        let step = SyncStep { t: x.par - self.u.par, u: x - self.u, v: y - self.v };
        self.u = x;
        self.v = y;
        step
    }
}

/// Number of pairs of step diamonds, one from each path, that intersect.
/// Only steps ending at height `≤ horizon` count.
pub fn diamond_intersection_number(x: &[LatticePoint], y: &[LatticePoint], aperture: ConeAperture, horizon: i32) -> u64 {
    let steps = |p: &[LatticePoint]| -> Vec<Diamond> {
        p.windows(2).take_while(|w| w[1].par <= horizon).map(|w| Diamond::new(w[0], w[1], aperture)).collect()
    };
    let (dx, dy) = (steps(x), steps(y));
    let mut count = 0;
    let mut lo = 0;
    for a in &dx {
        // Both lists are sorted by height, so the band of candidate partners
        // only moves upwards.
        while lo < dy.len() && dy[lo].tip.par <= a.base.par {
            lo += 1;
        }
        for b in &dy[lo..] {
            if b.base.par >= a.tip.par {
                break;
            }
            if diamonds_intersect(a, b) {
                count += 1;
            }
        }
    }
    count
}

/// `Σ_k T_k 1{D_k(u) ∩ D_k(v) ≠ ∅}` along synchronized positions, for steps
/// ending at height `≤ horizon`.
pub fn sync_intersection_bound(us: &[LatticePoint], vs: &[LatticePoint], aperture: ConeAperture, horizon: i32) -> u64 {
    us.windows(2)
        .zip(vs.windows(2))
        .take_while(|(a, _)| a[1].par <= horizon)
        .filter(|(a, b)| diamonds_intersect(&Diamond::new(a[0], a[1], aperture), &Diamond::new(b[0], b[1], aperture)))
        .map(|(a, _)| (a[1].par - a[0].par) as u64)
        .sum()
}

/// Constant of the surrogate `T_k > α ‖Z⊥_{k-1}‖` for step-diamond contact.
pub fn surrogate_alpha(aperture: ConeAperture) -> f64 {
    1.0 / (2.0 * aperture.delta())
}

/// Two step diamonds with a common span `t` and transverse base separation
/// `z` can meet only if `‖z‖ < δ t`.
fn may_touch(t: i32, z: LatticePoint, aperture: ConeAperture) -> bool {
    let (p, q) = (aperture.p() as i64, aperture.q() as i64);
    q * q * z.perp_norm2() < p * p * (t as i64) * (t as i64)
}

/// `P̂(T = t)` for `t = 0..=t_max`: common hit heights of two independent
/// copies form a renewal process with renewal probabilities `u_n²`.
pub fn exact_span_law(law: &StepLaw, t_max: usize) -> Vec<f64> {
    let u = renewal_sequence(&law.height_law(), t_max);
    let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
    let mut f = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        f[t] = u2[t] - (1..t).map(|s| f[s] * u2[t - s]).sum::<f64>();
    }
    f
}

/// Endpoint-resolved `P̂(t, u, v)` for `t ≤ t_max`, summed over the pairs of
/// height compositions whose interior heights are disjoint.
pub fn exact_sync_law(law: &StepLaw, t_max: i32) -> Result<BTreeMap<SyncStep, f64>> {
    if !(1..=12).contains(&t_max) {
        return invalid("exact synchronized law is limited to spans 1..=12");
    }
    let mut by_height: BTreeMap<i32, Vec<(LatticePoint, f64)>> = BTreeMap::new();
    for (x, p) in &law.atoms {
        by_height.entry(x.par).or_default().push((*x, *p));
    }
    let mut out = BTreeMap::new();
    for t in 1..=t_max {
        // Interior hit heights as a bitmask over 1..t.
        let masks = 1u32 << (t - 1);
        let mut dist: Vec<BTreeMap<LatticePoint, f64>> = Vec::with_capacity(masks as usize);
        for mask in 0..masks {
            let mut cur = BTreeMap::from([(LatticePoint::ORIGIN, 1.0)]);
            let mut prev = 0;
            let cuts = (1..t).filter(|h| mask >> (h - 1) & 1 == 1).chain(std::iter::once(t));
            for h in cuts {
                let mut next = BTreeMap::new();
                for (x, p) in &cur {
                    for (a, q) in by_height.get(&(h - prev)).map(|v| v.as_slice()).unwrap_or(&[]) {
                        *next.entry(*x + *a).or_insert(0.0) += p * q;
                    }
                }
                cur = next;
                prev = h;
            }
            dist.push(cur);
        }
        for (m1, d1) in dist.iter().enumerate() {
            for (m2, d2) in dist.iter().enumerate() {
                if m1 & m2 != 0 {
                    continue;
                }
                for (u, p) in d1 {
                    for (v, q) in d2 {
                        *out.entry(SyncStep { t, u: *u, v: *v }).or_insert(0.0) += p * q;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs `samples` draws split into fixed chunks on separate streams and
/// returns the chunk results in order.
fn chunked<T, F>(samples: usize, seed: u64, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync + Send,
{
    let per = samples / CHUNKS as usize;
    let extra = samples % CHUNKS as usize;
    let run = |c: u64| {
        let n = per + usize::from((c as usize) < extra);
        f(n, &mut replica_rng(seed, c))
    };
    if parallel {
        (0..CHUNKS).into_par_iter().map(run).collect()
    } else {
        (0..CHUNKS).map(run).collect()
    }
}

/// Log-linear fit of the first-span survival `P̂(T > ℓ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanTailFit {
    pub pairs: usize,
    /// `survival[ℓ] = P̂(T > ℓ)` for `ℓ = 0..=l_max`.
    pub survival: Vec<f64>,
    pub l_min: usize,
    pub l_max: usize,
    pub kappa: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn span_tail_fit(law: &StepLaw, pairs: usize, l_min: usize, l_max: usize, seed: u64, parallel: bool) -> Result<SpanTailFit> {
    if l_min >= l_max || pairs == 0 {
        return invalid("need pairs > 0 and l_min < l_max");
    }
    let counts = chunked(pairs, seed, parallel, |n, rng| {
        let mut c = vec![0u64; l_max + 1];
        for _ in 0..n {
            let t = SyncSampler::new(law, LatticePoint::ORIGIN, LatticePoint::ORIGIN).next_step(rng).t as usize;
            for slot in c.iter_mut().take(t.min(l_max + 1)) {
                *slot += 1;
            }
        }
        c
    });
    let mut survival = vec![0.0; l_max + 1];
    for c in counts {
        for (s, k) in survival.iter_mut().zip(c) {
            *s += k as f64;
        }
    }
    for s in survival.iter_mut() {
        *s /= pairs as f64;
    }
    let pts: Vec<(f64, f64)> =
        (l_min..=l_max).filter(|&l| survival[l] > 0.0).map(|l| (l as f64, survival[l].ln())).collect();
    if pts.len() < 2 {
        return invalid("survival vanishes on the fit range; use more pairs");
    }
    let (slope, intercept, r2) = linear_fit(&pts);
    Ok(SpanTailFit { pairs, survival, l_min, l_max, kappa: -slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleConfig {
    /// Bubble spans `B` at which `I(B)` is estimated.
    pub spans: Vec<u32>,
    /// Transverse offsets along the first axis for the starting separation;
    /// `I(B)` takes the largest estimate over them.
    pub offsets: Vec<i32>,
    pub samples: usize,
    pub eta: f64,
    /// Grid for the exponential moment of the contact time.
    pub eta_grid: Vec<f64>,
    /// Height up to which contact times are accumulated.
    pub horizon: u32,
    pub seed: u64,
    pub parallel: bool,
}

/// Per-offset sums for the `I(B)` bins and the contact-time moments.
#[derive(Clone, Default)]
struct BubbleAcc {
    sum: Vec<f64>,
    sum2: Vec<f64>,
    moment: Vec<f64>,
    moment2: Vec<f64>,
    surrogate_violations: u64,
}

/// Statistics behind the bubble bound. `per_n` carries one entry per span
/// `B` with `I(B) B^{d/2}` and its standard error; `fits` carries the
/// weighted trend slope of `I(B) B^{d/2}` in `log₂ B` and the exponential
/// moments `E exp{η Σ T_k 1{contact}}` keyed by `η`.
pub fn bubble_statistics(law: &StepLaw, aperture: ConeAperture, cfg: &BubbleConfig) -> Result<ExperimentReport> {
    if cfg.spans.is_empty() || cfg.samples < 2 || cfg.offsets.is_empty() {
        return invalid("bubble statistics need spans, offsets and at least two samples");
    }
    let start = Instant::now();
    let d = law.d;
    let alpha = surrogate_alpha(aperture);
    let b_max = *cfg.spans.iter().max().unwrap() as i32;
    let nb = cfg.spans.len();
    let mut best: Vec<(f64, f64)> = vec![(f64::NEG_INFINITY, 0.0); nb];
    let mut moments: Vec<(f64, f64)> = vec![(0.0, 0.0); cfg.eta_grid.len()];
    let mut violations = 0;
    let mut rows = Vec::new();
    for (oi, &off) in cfg.offsets.iter().enumerate() {
        let v0 = LatticePoint::new(&{
            let mut p = vec![0; d];
            p[0] = off;
            p
        }, 0);
        let seed = cfg.seed.wrapping_add(oi as u64);
        let parts = chunked(cfg.samples, seed, cfg.parallel, |n, rng| {
            let mut acc = BubbleAcc {
                sum: vec![0.0; nb],
                sum2: vec![0.0; nb],
                moment: vec![0.0; cfg.eta_grid.len()],
                moment2: vec![0.0; cfg.eta_grid.len()],
                surrogate_violations: 0,
            };
            for _ in 0..n {
                let mut s = SyncSampler::new(law, LatticePoint::ORIGIN, v0);
                let mut span = 0;
                let mut contact = 0.0;
                let mut vals = vec![0.0; nb];
                while span < b_max.max(cfg.horizon as i32) {
                    let (u, v) = (s.u, s.v);
                    let z = u - v;
                    let step = s.next_step(rng);
                    span += step.t;
                    let t = step.t as f64;
                    if t > alpha * (z.perp_norm2() as f64).sqrt() {
                        if let Some(i) = cfg.spans.iter().position(|&b| b as i32 == span) {
                            vals[i] = t * (cfg.eta * t).exp();
                        }
                    }
                    if span <= cfg.horizon as i32 && may_touch(step.t, z, aperture) {
                        let hit = diamonds_intersect(&Diamond::new(u, s.u, aperture), &Diamond::new(v, s.v, aperture));
                        if hit {
                            contact += t;
                            if !(t > alpha * (z.perp_norm2() as f64).sqrt()) {
                                acc.surrogate_violations += 1;
                            }
                        }
                    }
                }
                for i in 0..nb {
                    acc.sum[i] += vals[i];
                    acc.sum2[i] += vals[i] * vals[i];
                }
                for (k, &eta) in cfg.eta_grid.iter().enumerate() {
                    let e = (eta * contact).exp();
                    acc.moment[k] += e;
                    acc.moment2[k] += e * e;
                }
            }
            acc
        });
        let mut tot = BubbleAcc { sum: vec![0.0; nb], sum2: vec![0.0; nb], moment: vec![0.0; cfg.eta_grid.len()], moment2: vec![0.0; cfg.eta_grid.len()], surrogate_violations: 0 };
        for p in parts {
            for i in 0..nb {
                tot.sum[i] += p.sum[i];
                tot.sum2[i] += p.sum2[i];
            }
            for k in 0..cfg.eta_grid.len() {
                tot.moment[k] += p.moment[k];
                tot.moment2[k] += p.moment2[k];
            }
            tot.surrogate_violations += p.surrogate_violations;
        }
        violations += tot.surrogate_violations;
        let n = cfg.samples as f64;
        for i in 0..nb {
            let mean = tot.sum[i] / n;
            let var = (tot.sum2[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
            rows.push(ReplicaRow { replica: oi as u64, n: cfg.spans[i], value: mean, aux: (var / n).sqrt() });
            if mean > best[i].0 {
                best[i] = (mean, (var / n).sqrt());
            }
        }
        if oi == 0 {
            for k in 0..cfg.eta_grid.len() {
                let mean = tot.moment[k] / n;
                let var = (tot.moment2[k] / n - mean * mean).max(0.0) * n / (n - 1.0);
                moments[k] = (mean, (var / n).sqrt());
            }
        }
    }

    let half_d = d as f64 / 2.0;
    let mut per_n = Vec::new();
    let mut pts = Vec::new();
    for (i, &b) in cfg.spans.iter().enumerate() {
        let scale = (b as f64).powf(half_d);
        let (value, se) = (best[i].0 * scale, best[i].1 * scale);
        pts.push(((b as f64).log2(), value, se));
        per_n.push(NStats {
            n: b,
            summary: Summary { count: cfg.samples, mean: best[i].0, variance: (best[i].1).powi(2) * cfg.samples as f64, sd: best[i].1 * (cfg.samples as f64).sqrt(), ci_halfwidth: 1.96 * best[i].1 },
            extra: BTreeMap::from([("scaled".to_string(), value), ("scaled_se".to_string(), se)]),
        });
    }
    let mut fits = BTreeMap::new();
    if let Some((slope, se)) = weighted_slope(&pts) {
        fits.insert("trend_slope".into(), slope);
        fits.insert("trend_slope_se".into(), se);
        fits.insert("trend_z".into(), slope / se);
    }
    for (k, &eta) in cfg.eta_grid.iter().enumerate() {
        fits.insert(format!("exp_moment[{eta}]"), moments[k].0);
        fits.insert(format!("exp_moment_se[{eta}]"), moments[k].1);
    }
    fits.insert("surrogate_violations".into(), violations as f64);
    Ok(ExperimentReport {
        experiment: "bubbles".into(),
        replica_count: cfg.samples,
        excluded: 0,
        provenance: Provenance { base_seed: cfg.seed, first_stream: 0, stream_count: CHUNKS },
        per_n,
        fits,
        rows,
        wall_time: start.elapsed(),
    })
}

/// Weighted least-squares slope of `y` on `x` with weights `1/se²`, and its
/// standard error.
pub fn weighted_slope(pts: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<&(f64, f64, f64)> = pts.iter().filter(|p| p.2 > 0.0 && p.1.is_finite()).collect();
    if pts.len() < 2 {
        return None;
    }
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &&(x, y, se) in &pts {
        let w = 1.0 / (se * se);
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = sw * sxx - sx * sx;
    if det <= 0.0 {
        return None;
    }
    Some(((sw * sxy - sx * sy) / det, (sw / det).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    /// Transverse separations along the first axis.
    pub separations: Vec<i32>,
    pub pairs: usize,
    pub horizon: u32,
    pub seed: u64,
    pub parallel: bool,
}

/// Mean diamond intersection number of two independent walks started at
/// transverse distance `r`, for each `r`, with the log-log slope in `fits`
/// next to the reference `-(d/2 - 1)`.
pub fn intersection_decay(law: &StepLaw, aperture: ConeAperture, cfg: &DecayConfig) -> Result<ExperimentReport> {
    if cfg.separations.is_empty() || cfg.pairs < 2 {
        return invalid("need separations and at least two pairs");
    }
    let start = Instant::now();
    let d = law.d;
    let h = cfg.horizon as i32;
    let walk_to = |from: LatticePoint, rng: &mut ChaCha8Rng| {
        let mut p = vec![from];
        while p.last().unwrap().par < h {
            let next = *p.last().unwrap() + law.sample(rng);
            p.push(next);
        }
        p
    };
    let mut per_n = Vec::new();
    let mut pts = Vec::new();
    for (ri, &r) in cfg.separations.iter().enumerate() {
        let mut perp = vec![0; d];
        perp[0] = r;
        let y0 = LatticePoint::new(&perp, 0);
        let parts = chunked(cfg.pairs, cfg.seed.wrapping_add(ri as u64), cfg.parallel, |n, rng| {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let x = walk_to(LatticePoint::ORIGIN, rng);
                let y = walk_to(y0, rng);
                v.push(diamond_intersection_number(&x, &y, aperture, h) as f64);
            }
            v
        });
        let all: Vec<f64> = parts.into_iter().flatten().collect();
        let s = Summary::of(&all);
        if s.mean > 0.0 {
            pts.push(((r as f64).ln(), s.mean.ln()));
        }
        per_n.push(NStats { n: r as u32, summary: s, extra: BTreeMap::new() });
    }
    let mut fits = BTreeMap::from([("reference_exponent".to_string(), -(d as f64 / 2.0 - 1.0))]);
    if pts.len() >= 2 {
        let (slope, _, r2) = linear_fit(&pts);
        fits.insert("fitted_exponent".into(), slope);
        fits.insert("fit_r2".into(), r2);
    }
    Ok(ExperimentReport {
        experiment: "intersection_decay".into(),
        replica_count: cfg.pairs,
        excluded: 0,
        provenance: Provenance { base_seed: cfg.seed, first_stream: 0, stream_count: CHUNKS },
        per_n,
        fits,
        rows: Vec::new(),
        wall_time: start.elapsed(),
    })
}
