//! Quenched partition functions.
//!
//! Two independent routes are provided. [`quenched_partition`] solves the
//! Green's function of the killed walk on a truncated slab and reports a
//! rigorous error bound. [`enumerate_graded`] walks every path in a family
//! depth first and tabulates weights by endpoint and by length; it is the
//! oracle for all exact identities.
//!
//! Crossing paths use the first-arrival convention: every point before the
//! last lies strictly below the target hyperplane.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Medium;
use crate::error::{invalid, Error, Result};
use crate::lattice::{unit_step, ConeAperture, LatticePoint, MAX_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub lambda: f64,
    pub beta: f64,
    pub aperture: ConeAperture,
}

impl ModelParams {
    pub fn new(d: usize, lambda: f64, beta: f64, aperture: ConeAperture) -> Result<Self> {
        let m = ModelParams { d, lambda, beta, aperture };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > MAX_DIM {
            return invalid(format!("transverse dimension {} must be in 1..={MAX_DIM}", self.d));
        }
        if !(self.lambda > lambda0(self.d)) {
            return invalid(format!("lambda {} must exceed log(2d+2) = {:.6}", self.lambda, lambda0(self.d)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid(format!("beta {} must be finite and nonnegative", self.beta));
        }
        Ok(())
    }

    /// Contraction ratio `(2d+2) e^{-λ}`.
    pub fn contraction(&self) -> f64 {
        (2 * self.d + 2) as f64 * (-self.lambda).exp()
    }

    pub fn with_beta(self, beta: f64) -> Self {
        ModelParams { beta, ..self }
    }
}

pub fn lambda0(d: usize) -> f64 {
    ((2 * d + 2) as f64).ln()
}

/// Smaller root of `e^{-λ}F² + (2d e^{-λ} - 1)F + e^{-λ} = 0`: the free
/// first-passage weight for one unit of height.
pub fn free_root(d: usize, lambda: f64) -> f64 {
    let a = (-lambda).exp();
    let b = 2.0 * d as f64 * a - 1.0;
    // Stable form of (-b - sqrt(b² - 4a²)) / 2a for the smaller root.
    let disc = (b * b - 4.0 * a * a).sqrt();
    2.0 * a / (-b + disc)
}

/// First-passage weight of the one-dimensional walk on the axis.
pub fn column_root(lambda: f64) -> f64 {
    let a = (-lambda).exp();
    2.0 * a / (1.0 + (1.0 - 4.0 * a * a).sqrt())
}

/// Green's function of the killed walk on a truncated slab below height `n`.
#[derive(Clone, Debug)]
pub struct SlabGreen {
    pub n: i32,
    pub d: usize,
    pub box_halfwidth: i32,
    pub depth: i32,
    pub sweeps: usize,
    values: Vec<f64>,
    /// First-arrival mass by endpoint on the target hyperplane.
    pub arrivals: BTreeMap<LatticePoint, f64>,
    pub total: f64,
    pub tail_bound: f64,
}

struct SlabGeometry {
    d: usize,
    w: i32,
    hmin: i32,
    n: i32,
    side: usize,
    layer: usize,
    perp_strides: [usize; MAX_DIM],
}

impl SlabGeometry {
    fn new(d: usize, w: i32, depth: i32, n: i32) -> Self {
        let side = (2 * w + 3) as usize;
        let mut perp_strides = [0; MAX_DIM];
        let mut s = 1;
        for st in perp_strides.iter_mut().take(d) {
            *st = s;
            s *= side;
        }
        SlabGeometry { d, w, hmin: -depth, n, side, layer: s, perp_strides }
    }

    fn layers(&self) -> usize {
        (self.n - self.hmin + 2) as usize
    }

    fn len(&self) -> usize {
        self.layers() * self.layer
    }

    fn index(&self, x: LatticePoint) -> usize {
        let mut i = (x.par - self.hmin + 1) as usize * self.layer;
        for k in 0..self.d {
            i += (x.perp[k] + self.w + 1) as usize * self.perp_strides[k];
        }
        i
    }

    fn point(&self, mut i: usize) -> LatticePoint {
        let mut x = LatticePoint::ORIGIN;
        x.par = (i / self.layer) as i32 + self.hmin - 1;
        i %= self.layer;
        for k in 0..self.d {
            x.perp[k] = (i % self.side) as i32 - self.w - 1;
            i /= self.side;
        }
        x
    }

    fn is_interior_perp(&self, x: &LatticePoint) -> bool {
        x.perp[..self.d].iter().all(|&c| c.abs() <= self.w)
    }

    /// Transverse offsets of interior columns within a layer.
    fn interior_columns(&self) -> Vec<usize> {
        (0..self.layer)
            .filter(|&i| {
                let mut j = i;
                (0..self.d).all(|_| {
                    let c = j % self.side;
                    j /= self.side;
                    c >= 1 && c + 1 < self.side
                })
            })
            .collect()
    }
}

const MAX_SLAB_SITES: usize = 60_000_000;
const MAX_SWEEPS: usize = 20_000;
/// Prefix depth at which the enumeration tree is cut into independent tasks.
const SPLIT_DEPTH: usize = 4;

/// Starting box for the slab solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabBox {
    pub halfwidth: i32,
    pub depth: i32,
}

impl SlabBox {
    pub fn initial(n: u32) -> Self {
        SlabBox { halfwidth: (2.0 * (n as f64).sqrt()).ceil() as i32 + 3, depth: 2 }
    }
}

/// `𝔇_N` to absolute tolerance `tol`.
pub fn quenched_partition<M: Medium>(env: &M, params: &ModelParams, n: u32, tol: f64) -> Result<f64> {
    Ok(quenched_green(env, params, n, tol)?.total)
}

pub fn quenched_green<M: Medium>(env: &M, params: &ModelParams, n: u32, tol: f64) -> Result<SlabGreen> {
    quenched_green_from(env, params, n, tol, SlabBox::initial(n))
}

/// Solves for the slab Green's function starting from box `start`, growing
/// the side or the bottom until the error bound is below `tol`.
pub fn quenched_green_from<M: Medium>(
    env: &M,
    params: &ModelParams,
    n: u32,
    tol: f64,
    start: SlabBox,
) -> Result<SlabGreen> {
    params.validate()?;
    if n == 0 {
        return invalid("target height must be positive");
    }
    if !(tol > 0.0) {
        return invalid(format!("tolerance {tol} must be positive"));
    }
    let mut b = SlabBox { halfwidth: start.halfwidth.max(1), depth: start.depth.max(1) };
    loop {
        let geom = SlabGeometry::new(params.d, b.halfwidth, b.depth, n as i32);
        if geom.len() > MAX_SLAB_SITES {
            return Err(Error::NonConvergence(format!(
                "slab of half-width {} and depth {} exceeds the size cap before reaching tolerance {tol:e}",
                b.halfwidth, b.depth
            )));
        }
        let (green, side, bottom) = match params.d {
            1 => solve_slab::<M, 4>(env, params, geom, tol)?,
            2 => solve_slab::<M, 6>(env, params, geom, tol)?,
            3 => solve_slab::<M, 8>(env, params, geom, tol)?,
            _ => solve_slab::<M, 10>(env, params, geom, tol)?,
        };
        if green.tail_bound <= tol {
            return Ok(green);
        }
        if side > 0.25 * tol {
            b.halfwidth += (b.halfwidth / 4).max(2);
        }
        if bottom > 0.25 * tol {
            b.depth += 2;
        }
    }
}

/// Gauss-Seidel solve on one box. `K` is the number of neighbours,
/// `2d + 2`. Returns the solution with the side and bottom leak bounds.
fn solve_slab<M: Medium, const K: usize>(
    env: &M,
    params: &ModelParams,
    geom: SlabGeometry,
    tol: f64,
) -> Result<(SlabGreen, f64, f64)> {
    let d = params.d;
    let n = geom.n;
    let kill = (-params.lambda).exp();
    let f = free_root(d, params.lambda);
    let len = geom.len();
    let mut nbr = [0isize; K];
    nbr[0] = geom.layer as isize;
    nbr[1] = -(geom.layer as isize);
    for k in 0..d {
        nbr[2 + 2 * k] = geom.perp_strides[k] as isize;
        nbr[3 + 2 * k] = -(geom.perp_strides[k] as isize);
    }
    // Interior sites come in contiguous runs along the first transverse axis.
    let run = geom.side - 2;
    let rows: Vec<usize> = geom.interior_columns().into_iter().filter(|&c| c % geom.side == 1).collect();

    // Site kernel factors e^{-λ} f(x) on interior layers and the arrival layer.
    let mut kf = vec![0.0; len];
    for h in geom.hmin..=n {
        let base = (h - geom.hmin + 1) as usize * geom.layer;
        for &r in &rows {
            for i in base + r..base + r + run {
                kf[i] = kill * env.factor(geom.point(i), params.beta);
            }
        }
    }
    let origin = geom.index(LatticePoint::ORIGIN);
    let fpow: Vec<f64> = (0..=(n - geom.hmin + 2)).map(|k| f.powi(k)).collect();
    let layers: Vec<(usize, f64)> =
        (geom.hmin..n).map(|h| ((h - geom.hmin + 1) as usize * geom.layer, fpow[(n - h) as usize])).collect();

    #[inline(always)]
    fn nsum<const K: usize>(g: &[f64], i: usize, nbr: &[isize; K]) -> f64 {
        let mut s = 0.0;
        for o in nbr {
            s += g[(i as isize + o) as usize];
        }
        s
    }

    let mut g = vec![0.0; len];
    g[origin] = 1.0;
    let mut sweeps = 0;
    let missing = loop {
        let mut moved = 0.0;
        let ascending = sweeps % 2 == 0;
        for li in 0..layers.len() {
            let (base, weight) = layers[if ascending { li } else { layers.len() - 1 - li }];
            let mut layer_moved = 0.0;
            for &r in &rows {
                for i in base + r..base + r + run {
                    let v = kf[i] * nsum(&g, i, &nbr) + if i == origin { 1.0 } else { 0.0 };
                    layer_moved += (v - g[i]).abs();
                    g[i] = v;
                }
            }
            moved += layer_moved * weight;
        }
        sweeps += 1;
        // The residual pass costs a full sweep, so it only runs once the
        // updates have become small.
        if moved <= 0.125 * tol || sweeps % 16 == 0 {
            let mut missing = 0.0;
            for &(base, weight) in &layers {
                let mut layer_res = 0.0;
                for &r in &rows {
                    for i in base + r..base + r + run {
                        let v = kf[i] * nsum(&g, i, &nbr) + if i == origin { 1.0 } else { 0.0 };
                        layer_res += (v - g[i]).abs();
                    }
                }
                missing += layer_res * weight;
            }
            if missing <= 0.5 * tol {
                break missing;
            }
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::NonConvergence(format!("slab iteration stalled after {sweeps} sweeps")));
        }
    };

    // Treating G̃ as a trial solution on the whole half-space, the sites just
    // outside the box carry residual e^{-λ} f(z) Σ G̃, and every residual
    // reaches the target at most through free first-arrival mass.
    let (mut side, mut bottom) = (0.0, 0.0);
    for &(base, _) in &layers {
        for &r in &rows {
            for i in base + r..base + r + run {
                for &o in &nbr {
                    let z = geom.point((i as isize + o) as usize);
                    if z.par < geom.hmin {
                        bottom += g[i] * kill * fpow[(n - z.par) as usize];
                    } else if z.par < n && !geom.is_interior_perp(&z) {
                        side += g[i] * kill * fpow[(n - z.par) as usize];
                    }
                }
            }
        }
    }

    let top = (n - geom.hmin + 1) as usize * geom.layer;
    let mut arrivals = BTreeMap::new();
    let mut total = 0.0;
    for &r in &rows {
        for i in top + r..top + r + run {
            let a = kf[i] * g[i - geom.layer];
            if a > 0.0 {
                arrivals.insert(geom.point(i), a);
            }
            total += a;
        }
    }
    let green = SlabGreen {
        n,
        d,
        box_halfwidth: geom.w,
        depth: -geom.hmin,
        sweeps,
        values: g,
        arrivals,
        total,
        tail_bound: missing + side + bottom,
    };
    Ok((green, side, bottom))
}

impl SlabGreen {
    /// `G(x)` for a site of the solved box, zero outside it.
    pub fn value(&self, x: LatticePoint) -> f64 {
        let geom = SlabGeometry::new(self.d, self.box_halfwidth, self.depth, self.n);
        if x.par < geom.hmin || x.par >= self.n || !geom.is_interior_perp(&x) {
            return 0.0;
        }
        self.values[geom.index(x)]
    }

    /// Quenched endpoint law on the target hyperplane; empty if `𝔇_N = 0`.
    pub fn endpoint_distribution(&self) -> BTreeMap<LatticePoint, f64> {
        if self.total <= 0.0 {
            return BTreeMap::new();
        }
        self.arrivals.iter().map(|(&x, &a)| (x, a / self.total)).collect()
    }
}

/// Path families summed by the enumerator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    /// All first-arrival crossings of the target hyperplane.
    D,
    /// Cone-confined paths.
    T,
    /// Cone-confined paths without cone points.
    T0,
    /// Paths inside the backward cone of their endpoint, without cone points.
    Tl,
    /// Paths inside the forward cone of their start, without cone points,
    /// counted at first arrival.
    Tr,
}

impl EnsembleKind {
    fn forward_origin(self) -> bool {
        matches!(self, EnsembleKind::T | EnsembleKind::T0 | EnsembleKind::Tr)
    }

    fn backward_endpoint(self) -> bool {
        matches!(self, EnsembleKind::T | EnsembleKind::T0 | EnsembleKind::Tl)
    }

    fn no_cone_points(self) -> bool {
        matches!(self, EnsembleKind::T0 | EnsembleKind::Tl | EnsembleKind::Tr)
    }

    /// Whether the empty path belongs to the family.
    fn has_empty_path(self) -> bool {
        matches!(self, EnsembleKind::T | EnsembleKind::Tl | EnsembleKind::Tr)
    }
}

/// Paths reaching height `M` are kept when their length is at most
/// `min(max_len, M + max_excess)`. The excess `length - height` is additive
/// under concatenation, so this class is closed under splitting at cone
/// points and convolution identities hold exactly within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LengthBudget {
    pub max_len: usize,
    pub max_excess: usize,
}

impl LengthBudget {
    pub fn new(max_len: usize, max_excess: usize) -> Self {
        LengthBudget { max_len, max_excess }
    }

    /// Only the plain length cap.
    pub fn max_len(max_len: usize) -> Self {
        LengthBudget { max_len, max_excess: usize::MAX / 4 }
    }

    pub fn allowed(&self, height: i32) -> usize {
        if height < 0 {
            return 0;
        }
        self.max_len.min(height as usize + self.max_excess)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsembleSpec {
    pub kind: EnsembleKind,
    /// Highest endpoint height tabulated (the target height for `D`).
    pub max_height: i32,
    pub budget: LengthBudget,
}

#[derive(Clone, Copy, Debug)]
pub struct EnumOptions {
    pub parallel: bool,
    pub node_budget: u64,
}

impl Default for EnumOptions {
    fn default() -> Self {
        EnumOptions { parallel: true, node_budget: 2_000_000_000 }
    }
}

impl EnumOptions {
    pub fn serial() -> Self {
        EnumOptions { parallel: false, ..Default::default() }
    }
}

/// Per-step weight of a path, seen incrementally.
pub trait Weigher: Sync {
    /// Factor for stepping onto `next` after `path` (which starts at the
    /// origin and is nonempty).
    fn step(&self, path: &[LatticePoint], next: LatticePoint) -> f64;
}

/// Quenched weight `e^{-λ} exp(-β V(x))` per step.
pub struct QuenchedWeigher<'a, M: Medium> {
    pub env: &'a M,
    pub kill: f64,
    pub beta: f64,
}

impl<'a, M: Medium> QuenchedWeigher<'a, M> {
    pub fn new(env: &'a M, params: &ModelParams) -> Self {
        QuenchedWeigher { env, kill: (-params.lambda).exp(), beta: params.beta }
    }
}

impl<M: Medium> Weigher for QuenchedWeigher<'_, M> {
    #[inline]
    fn step(&self, _path: &[LatticePoint], next: LatticePoint) -> f64 {
        self.kill * self.env.factor(next, self.beta)
    }
}

/// Weights tabulated by endpoint and by path length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradedTable {
    pub kind: EnsembleKind,
    pub max_height: i32,
    pub budget: LengthBudget,
    /// `by_endpoint[x][n]`: total weight of length-`n` paths ending at `x`.
    #[serde(with = "crate::serde_util::point_map")]
    pub by_endpoint: BTreeMap<LatticePoint, Vec<f64>>,
    /// Rigorous bound on the weight missed at each height `0..=max_height`.
    pub tail_by_height: Vec<f64>,
    pub nodes: u64,
}

impl GradedTable {
    pub fn empty(kind: EnsembleKind, max_height: i32, budget: LengthBudget) -> Self {
        GradedTable {
            kind,
            max_height,
            budget,
            by_endpoint: BTreeMap::new(),
            tail_by_height: vec![0.0; max_height.max(0) as usize + 1],
            nodes: 0,
        }
    }

    pub fn total(&self, x: &LatticePoint) -> f64 {
        self.by_endpoint.get(x).map_or(0.0, |v| v.iter().sum())
    }

    pub fn totals(&self) -> BTreeMap<LatticePoint, f64> {
        self.by_endpoint.iter().map(|(x, v)| (*x, v.iter().sum())).collect()
    }

    /// Sum over endpoints at each height `0..=max_height`.
    pub fn by_height(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.max_height.max(0) as usize + 1];
        for (x, v) in &self.by_endpoint {
            if (0..=self.max_height).contains(&x.par) {
                out[x.par as usize] += v.iter().sum::<f64>();
            }
        }
        out
    }

    fn add(&mut self, x: LatticePoint, len: usize, w: f64) {
        let v = self.by_endpoint.entry(x).or_default();
        if v.len() <= len {
            v.resize(len + 1, 0.0);
        }
        v[len] += w;
    }

    fn merge(&mut self, other: GradedTable) {
        for (x, v) in other.by_endpoint {
            for (len, w) in v.into_iter().enumerate() {
                if w != 0.0 {
                    self.add(x, len, w);
                }
            }
        }
        self.nodes += other.nodes;
    }

    /// Entry-wise difference `self - other`, dropping nothing.
    pub fn max_abs_diff(&self, other: &GradedTable) -> f64 {
        let mut worst: f64 = 0.0;
        let keys: std::collections::BTreeSet<_> = self.by_endpoint.keys().chain(other.by_endpoint.keys()).collect();
        for x in keys {
            worst = worst.max((self.total(x) - other.total(x)).abs());
        }
        worst
    }

    pub fn to_weights(&self) -> EnsembleWeights {
        EnsembleWeights {
            kind: self.kind,
            by_endpoint: self.totals(),
            scaled: false,
            tail_bound: self.tail_by_height.iter().sum(),
        }
    }
}

/// Free mass of first-arrival paths to height `m` with more than `max_len`
/// steps: an upper bound on everything an enumeration capped at `max_len`
/// can miss at that height, for any medium and any `β ≥ 0`.
pub fn free_length_tail(d: usize, lambda: f64, m: i32, max_len: usize) -> f64 {
    if m <= 0 {
        return 0.0;
    }
    let kill = (-lambda).exp();
    let f = free_root(d, lambda);
    let total = f.powi(m);
    let off = max_len as i32 + 1;
    let size = (m + off) as usize;
    let mut cur = vec![0.0; size];
    cur[off as usize] = 1.0;
    let mut arrived = 0.0;
    for _ in 0..max_len {
        arrived += kill * cur[(m - 1 + off) as usize];
        let mut next = vec![0.0; size];
        for h in 0..size {
            let mut s = 2.0 * d as f64 * cur[h];
            if h > 0 {
                s += cur[h - 1];
            }
            if h + 1 < size {
                s += cur[h + 1];
            }
            next[h] = kill * s;
        }
        cur = next;
    }
    // Cancellation guard: F^m - arrived loses about one ulp of F^m.
    (total - arrived).max(0.0) + 4.0 * f64::EPSILON * total
}

/// Exhaustive enumeration of one path family.
///
/// Endpoints are recorded at every record height (the first visit above all
/// earlier points) that passes the family's filter.
pub fn enumerate_graded<W: Weigher>(
    weigher: &W,
    d: usize,
    lambda: f64,
    aperture: ConeAperture,
    spec: &PathEnsembleSpec,
    opts: &EnumOptions,
) -> Result<GradedTable> {
    if spec.max_height < 0 || (spec.kind == EnsembleKind::D && spec.max_height == 0) {
        return invalid(format!("target height {} out of range", spec.max_height));
    }
    if spec.budget.allowed(spec.max_height) < spec.max_height as usize {
        return invalid(format!(
            "length budget {} cannot reach height {}",
            spec.budget.allowed(spec.max_height),
            spec.max_height
        ));
    }
    let counter = AtomicU64::new(0);
    let ctx = Ctx { weigher, d, aperture, spec: *spec, budget: opts.node_budget, counter: &counter };

    let mut root = GradedTable::empty(spec.kind, spec.max_height, spec.budget);
    if spec.kind.has_empty_path() {
        root.add(LatticePoint::ORIGIN, 0, 1.0);
    }
    let mut prefixes = Vec::new();
    let mut st = DfsState::new();
    ctx.walk(&mut st, &mut root, Some((SPLIT_DEPTH, &mut prefixes)))?;

    let subtrees: Vec<Result<GradedTable>> = if opts.parallel {
        prefixes.par_iter().map(|p| ctx.replay(p)).collect()
    } else {
        prefixes.iter().map(|p| ctx.replay(p)).collect()
    };
    for t in subtrees {
        root.merge(t?);
    }
    root.nodes = counter.load(Ordering::Relaxed);
    root.tail_by_height =
        (0..=spec.max_height).map(|m| free_length_tail(d, lambda, m, spec.budget.allowed(m))).collect();
    if spec.kind == EnsembleKind::D {
        // Only the target height is tabulated.
        for (m, t) in root.tail_by_height.iter_mut().enumerate() {
            if m as i32 != spec.max_height {
                *t = 0.0;
            }
        }
    }
    Ok(root)
}

struct Ctx<'a, W: Weigher> {
    weigher: &'a W,
    d: usize,
    aperture: ConeAperture,
    spec: PathEnsembleSpec,
    budget: u64,
    counter: &'a AtomicU64,
}

#[derive(Clone)]
struct DfsState {
    path: Vec<LatticePoint>,
    weight: Vec<f64>,
    hmax: Vec<i32>,
    /// Cone-point candidates still alive at each depth.
    alive: Vec<Vec<usize>>,
}

impl DfsState {
    fn new() -> Self {
        DfsState { path: vec![LatticePoint::ORIGIN], weight: vec![1.0], hmax: vec![0], alive: vec![Vec::new()] }
    }
}

type Prefixes = Vec<Vec<LatticePoint>>;

impl<W: Weigher> Ctx<'_, W> {
    /// Strictly-inside-backward-cone test of every earlier point.
    fn prefix_in_backward_cone(&self, path: &[LatticePoint], p: LatticePoint) -> bool {
        path.iter().all(|&y| self.aperture.open_contains(p - y))
    }

    /// Pushes `p`; returns whether the node is live (nonzero weight, allowed
    /// by the forward-cone filter) and whether it is a recorded leaf.
    fn push(&self, st: &mut DfsState, p: LatticePoint) -> Result<Option<bool>> {
        let nodes = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        if nodes > self.budget {
            return Err(Error::BudgetExceeded { budget: self.budget });
        }
        let kind = self.spec.kind;
        if kind.forward_origin() && !self.aperture.open_contains(p) {
            return Ok(None);
        }
        let w = *st.weight.last().unwrap() * self.weigher.step(&st.path, p);
        if w == 0.0 {
            return Ok(None);
        }
        let hmax_prev = *st.hmax.last().unwrap();
        let record = p.par > hmax_prev;
        let need_prefix = kind.no_cone_points() || (record && kind.backward_endpoint());
        let prefix_ok = need_prefix && self.prefix_in_backward_cone(&st.path, p);

        let mut alive = Vec::new();
        if kind.no_cone_points() {
            alive.extend(st.alive.last().unwrap().iter().copied().filter(|&k| self.aperture.open_contains(p - st.path[k])));
        }
        let leaf = record
            && (kind != EnsembleKind::D || p.par == self.spec.max_height)
            && (!kind.backward_endpoint() || prefix_ok)
            && (!kind.no_cone_points() || alive.is_empty());
        if kind.no_cone_points() && prefix_ok && p.par > 0 {
            alive.push(st.path.len());
        }
        st.path.push(p);
        st.weight.push(w);
        st.hmax.push(hmax_prev.max(p.par));
        st.alive.push(alive);
        Ok(Some(leaf))
    }

    fn pop(&self, st: &mut DfsState) {
        st.path.pop();
        st.weight.pop();
        st.hmax.pop();
        st.alive.pop();
    }

    /// Whether any further record can still be reached within the budget.
    fn extendable(&self, st: &DfsState) -> bool {
        let hmax = *st.hmax.last().unwrap();
        if hmax >= self.spec.max_height {
            return false;
        }
        let cur = st.path.last().unwrap().par;
        let steps = st.path.len() - 1;
        steps + (hmax + 1 - cur) as usize <= self.spec.budget.allowed(hmax + 1)
    }

    fn walk(&self, st: &mut DfsState, out: &mut GradedTable, mut split: Option<(usize, &mut Prefixes)>) -> Result<()> {
        if !self.extendable(st) {
            return Ok(());
        }
        if let Some((depth, prefixes)) = split.as_mut() {
            if st.path.len() - 1 == *depth {
                prefixes.push(st.path.clone());
                return Ok(());
            }
        }
        let here = *st.path.last().unwrap();
        for k in 0..2 * self.d + 2 {
            let p = here + unit_step(self.d, k);
            let Some(leaf) = self.push(st, p)? else { continue };
            if leaf {
                out.add(p, st.path.len() - 1, *st.weight.last().unwrap());
            }
            let sub = split.as_mut().map(|(d, v)| (*d, &mut **v));
            self.walk(st, out, sub)?;
            self.pop(st);
        }
        Ok(())
    }

    /// Re-enters the subtree below a recorded prefix.
    fn replay(&self, prefix: &[LatticePoint]) -> Result<GradedTable> {
        let mut st = DfsState::new();
        let mut scratch = GradedTable::empty(self.spec.kind, self.spec.max_height, self.spec.budget);
        for &p in &prefix[1..] {
            // The prefix was live when recorded, so every push succeeds.
            self.push(&mut st, p)?.expect("recorded prefix is live");
        }
        self.walk(&mut st, &mut scratch, None)?;
        Ok(scratch)
    }
}

/// Enumerates the family with quenched weights.
pub fn enumerate_quenched<M: Medium>(
    env: &M,
    params: &ModelParams,
    spec: &PathEnsembleSpec,
    opts: &EnumOptions,
) -> Result<GradedTable> {
    params.validate()?;
    enumerate_graded(&QuenchedWeigher::new(env, params), params.d, params.lambda, params.aperture, spec, opts)
}

/// Total quenched weight of the family's paths ending at height `n` and of
/// length at most `max_len`, with a bound on what the cap misses.
pub fn enumerate_partition<M: Medium>(
    env: &M,
    params: &ModelParams,
    n: u32,
    max_len: usize,
    kind: EnsembleKind,
    opts: &EnumOptions,
) -> Result<(f64, f64)> {
    if max_len < n as usize {
        return invalid(format!("max_len {max_len} is below the target height {n}"));
    }
    let spec = PathEnsembleSpec { kind, max_height: n as i32, budget: LengthBudget::max_len(max_len) };
    let table = enumerate_quenched(env, params, &spec, opts)?;
    Ok((table.by_height()[n as usize], table.tail_by_height[n as usize]))
}

/// Per-endpoint sums of one family, unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub kind: EnsembleKind,
    #[serde(with = "crate::serde_util::point_map")]
    pub by_endpoint: BTreeMap<LatticePoint, f64>,
    pub scaled: bool,
    pub tail_bound: f64,
}

impl EnsembleWeights {
    /// Multiplies each entry by `e^{ξ x∥}`.
    pub fn scale(&self, xi: f64) -> EnsembleWeights {
        EnsembleWeights {
            by_endpoint: self.by_endpoint.iter().map(|(x, w)| (*x, w * (xi * x.par as f64).exp())).collect(),
            scaled: true,
            ..self.clone()
        }
    }

    /// CSV with columns `x1..xd, par, weight`.
    pub fn write_csv<Wr: Write>(&self, d: usize, out: Wr) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("par".into());
        header.push("weight".into());
        w.write_record(&header)?;
        for (x, v) in &self.by_endpoint {
            let mut row: Vec<String> = x.perp[..d].iter().map(|c| c.to_string()).collect();
            row.push(x.par.to_string());
            row.push(format!("{v:e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How the cone-confined table is produced by [`restricted_weights`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TMethod {
    Enumerate,
    /// Quenched renewal convolution of shifted irreducible tables.
    Convolution,
}

/// Per-endpoint weights of a family for heights up to `n`.
pub fn restricted_weights<M: Medium>(
    env: &M,
    params: &ModelParams,
    n: u32,
    kind: EnsembleKind,
    budget: LengthBudget,
    method: TMethod,
    opts: &EnumOptions,
) -> Result<GradedTable> {
    let spec = PathEnsembleSpec { kind, max_height: n as i32, budget };
    match (kind, method) {
        (EnsembleKind::T, TMethod::Convolution) => quenched_t_by_convolution(env, params, n as i32, budget, opts),
        _ => enumerate_quenched(env, params, &spec, opts),
    }
}

/// Graded convolution `a * b`, truncated to the length budget at each
/// endpoint height.
pub fn convolve_graded(
    acc: &mut BTreeMap<LatticePoint, Vec<f64>>,
    y: LatticePoint,
    ty: &[f64],
    q: &BTreeMap<LatticePoint, Vec<f64>>,
    budget: &LengthBudget,
    max_height: i32,
) {
    for (dx, qv) in q {
        let x = y + *dx;
        if dx.par < 1 || x.par > max_height {
            continue;
        }
        let cap = budget.allowed(x.par);
        let slot = acc.entry(x).or_default();
        for (n1, &a) in ty.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (n2, &b) in qv.iter().enumerate() {
                let n = n1 + n2;
                if n > cap {
                    break;
                }
                if slot.len() <= n {
                    slot.resize(n + 1, 0.0);
                }
                slot[n] += a * b;
            }
        }
    }
}

/// `𝔱_x = Σ_y 𝔱_y 𝔮^{θ_y}_{x-y}` with `𝔱_0 = 1`, built height by height.
pub fn quenched_t_by_convolution<M: Medium>(
    env: &M,
    params: &ModelParams,
    max_height: i32,
    budget: LengthBudget,
    opts: &EnumOptions,
) -> Result<GradedTable> {
    let mut t: BTreeMap<LatticePoint, Vec<f64>> = BTreeMap::new();
    t.insert(LatticePoint::ORIGIN, vec![1.0]);
    let mut nodes = 0;
    // BTreeMap orders by height first, so every y is final before it is used.
    let mut h = 0;
    while h < max_height {
        let layer: Vec<(LatticePoint, Vec<f64>)> =
            t.range(LatticePoint::height_floor(h)..LatticePoint::height_floor(h + 1)).map(|(x, v)| (*x, v.clone())).collect();
        for (y, ty) in layer {
            if ty.iter().all(|&w| w == 0.0) {
                continue;
            }
            let spec = PathEnsembleSpec { kind: EnsembleKind::T0, max_height: max_height - h, budget };
            let q = enumerate_quenched(&env.shifted(y), params, &spec, opts)?;
            nodes += q.nodes;
            convolve_graded(&mut t, y, &ty, &q.by_endpoint, &budget, max_height);
        }
        h += 1;
    }
    let mut out = GradedTable::empty(EnsembleKind::T, max_height, budget);
    out.by_endpoint = t;
    out.nodes = nodes;
    out.tail_by_height =
        (0..=max_height).map(|m| free_length_tail(params.d, params.lambda, m, budget.allowed(m))).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, Fixture, PotentialSpec, SitePotential};

    fn params(d: usize, lambda: f64, beta: f64) -> ModelParams {
        ModelParams::new(d, lambda, beta, ConeAperture::default()).unwrap()
    }

    #[test]
    fn roots_solve_their_quadratics() {
        let f = free_root(1, 2.5);
        let a = (-2.5f64).exp();
        assert!((a * f * f + (2.0 * a - 1.0) * f + a).abs() < 1e-15);
        assert!((f - 0.0992).abs() < 1e-4);
        let c = column_root(2.5);
        assert!((a * c * c - c + a).abs() < 1e-15);
        assert!((c - 0.08265).abs() < 1e-5);
    }

    #[test]
    fn rejects_subcritical_lambda() {
        assert!(ModelParams::new(1, 4f64.ln(), 0.0, ConeAperture::default()).is_err());
        let env = Fixture::constant(0.0);
        let mut p = params(1, 2.5, 0.0);
        assert!(quenched_partition(&env, &p, 3, 0.0).is_err());
        p.lambda = 1.0;
        assert!(quenched_partition(&env, &p, 3, 1e-9).is_err());
    }

    #[test]
    fn free_dp_matches_root() {
        let env = Fixture::constant(0.0);
        for d in 1..=2 {
            let p = params(d, 2.5, 0.0);
            let f = free_root(d, 2.5);
            for n in 1..=6 {
                let got = quenched_partition(&env, &p, n, 1e-13).unwrap();
                assert!((got - f.powi(n as i32)).abs() < 1e-13, "d={d} n={n}");
            }
        }
    }

    #[test]
    fn column_fixture() {
        let env = Fixture::column();
        let p = params(1, 2.5, 1.0);
        let fc = column_root(2.5);
        for n in 1..=5 {
            let got = quenched_partition(&env, &p, n, 1e-14).unwrap();
            assert!((got - fc.powi(n as i32)).abs() < 1e-14);
            let (e, tail) = enumerate_partition(&env, &p, n, 14, EnsembleKind::D, &EnumOptions::serial()).unwrap();
            assert!((e - fc.powi(n as i32)).abs() <= tail);
        }
    }

    #[test]
    fn trap_shell_kills_everything() {
        let env = Fixture::constant(0.0).trap_shell(LatticePoint::ORIGIN, 1);
        let p = params(1, 2.5, 0.5);
        assert_eq!(quenched_partition(&env, &p, 4, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn single_step_enumeration() {
        let env = Environment::new(PotentialSpec::ExpTrap { rate: 1.0, p: 0.0 }, 5).unwrap();
        let p = params(1, 2.5, 0.7);
        let (v, _) = enumerate_partition(&env, &p, 1, 1, EnsembleKind::D, &EnumOptions::serial()).unwrap();
        let want = (-2.5f64).exp() * env.factor(LatticePoint::on_axis(1), 0.7);
        assert!((v - want).abs() < 1e-18);
    }

    #[test]
    fn enumeration_brackets_free_value() {
        let env = Fixture::constant(0.0);
        let p = params(1, 2.5, 0.0);
        let f = free_root(1, 2.5);
        for n in 1..=4 {
            let (v, tail) = enumerate_partition(&env, &p, n, 12, EnsembleKind::D, &EnumOptions::default()).unwrap();
            let exact = f.powi(n as i32);
            assert!(v <= exact * (1.0 + 1e-12) && exact <= v + tail, "n={n} v={v} tail={tail} exact={exact}");
        }
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let env = Environment::new(PotentialSpec::TwoPoint { v: 1.0, rho: 0.4, p: 0.05 }, 9).unwrap();
        let p = params(1, 2.0, 0.8);
        let spec = PathEnsembleSpec { kind: EnsembleKind::T, max_height: 4, budget: LengthBudget::new(10, 5) };
        let a = enumerate_quenched(&env, &p, &spec, &EnumOptions::serial()).unwrap();
        let b = enumerate_quenched(&env, &p, &spec, &EnumOptions::default()).unwrap();
        assert_eq!(a.by_endpoint, b.by_endpoint);
    }

    #[test]
    fn node_budget_is_enforced() {
        let env = Fixture::constant(0.0);
        let p = params(1, 2.5, 0.0);
        let spec = PathEnsembleSpec { kind: EnsembleKind::D, max_height: 4, budget: LengthBudget::max_len(14) };
        let opts = EnumOptions { parallel: false, node_budget: 1000 };
        assert!(matches!(enumerate_quenched(&env, &p, &spec, &opts), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn empty_path_conventions() {
        let env = Fixture::constant(0.0);
        let p = params(1, 2.5, 0.0);
        let spec = PathEnsembleSpec { kind: EnsembleKind::Tr, max_height: 2, budget: LengthBudget::max_len(4) };
        let t = enumerate_quenched(&env, &p, &spec, &EnumOptions::serial()).unwrap();
        assert_eq!(t.total(&LatticePoint::ORIGIN), 1.0);
    }

    #[test]
    fn pinned_trap_on_axis_reduces_partition() {
        let base = Fixture::constant(0.0);
        let pinned = base.clone().pin(LatticePoint::on_axis(1), SitePotential::Trap);
        let p = params(1, 2.5, 1.0);
        let a = quenched_partition(&base, &p, 3, 1e-12).unwrap();
        let b = quenched_partition(&pinned, &p, 3, 1e-12).unwrap();
        assert!(b < a);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut w = EnsembleWeights { kind: EnsembleKind::T, by_endpoint: BTreeMap::new(), scaled: false, tail_bound: 0.0 };
        w.by_endpoint.insert(LatticePoint::new(&[1], 2), 0.5);
        let mut buf = Vec::new();
        w.write_csv(1, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next(), Some("x1,par,weight"));
        assert_eq!(s.lines().count(), 2);
    }
}
