//! Integer geometry of `Z^{d+1}` with a distinguished longitudinal axis.
//!
//! Points are split into a transverse part (`perp`, up to [`MAX_DIM`]
//! coordinates) and a longitudinal height (`par`). Cones are open and
//! parametrised by a rational aperture `p/q`, so every membership test is an
//! exact integer comparison.
//!
//! Path-level predicates (`is_cone_confined`, `cone_points`) exempt only the
//! apex *index* itself: a path that revisits its starting point or a
//! candidate cone point is treated as leaving the cone. This is what makes
//! the decomposition into irreducible pieces a bijection.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported transverse dimension.
pub const MAX_DIM: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint {
    // `par` first so the derived ordering sorts by height.
    pub par: i32,
    pub perp: [i32; MAX_DIM],
}

impl LatticePoint {
    pub const ORIGIN: LatticePoint = LatticePoint { par: 0, perp: [0; MAX_DIM] };

    /// Builds a point from its transverse coordinates and height.
    ///
    /// Panics if `perp` has more than [`MAX_DIM`] entries.
    pub fn new(perp: &[i32], par: i32) -> Self {
        assert!(perp.len() <= MAX_DIM, "transverse dimension {} exceeds {MAX_DIM}", perp.len());
        let mut p = [0; MAX_DIM];
        p[..perp.len()].copy_from_slice(perp);
        LatticePoint { par, perp: p }
    }

    /// The point at height `par` on the longitudinal axis.
    pub fn on_axis(par: i32) -> Self {
        LatticePoint { par, perp: [0; MAX_DIM] }
    }

    pub fn split(&self, d: usize) -> (Vec<i32>, i32) {
        (self.perp[..d].to_vec(), self.par)
    }

    pub fn join(perp: &[i32], par: i32) -> Self {
        Self::new(perp, par)
    }

    pub fn perp_slice(&self, d: usize) -> &[i32] {
        &self.perp[..d]
    }

    /// Squared Euclidean norm of the transverse part.
    pub fn perp_norm2(&self) -> i64 {
        self.perp.iter().map(|&c| (c as i64) * (c as i64)).sum()
    }

    pub fn l1_norm(&self) -> i64 {
        self.perp.iter().map(|&c| (c as i64).abs()).sum::<i64>() + (self.par as i64).abs()
    }

    pub fn linf_norm(&self) -> i64 {
        self.perp.iter().map(|&c| (c as i64).abs()).chain(std::iter::once((self.par as i64).abs())).max().unwrap_or(0)
    }

    /// Nearest neighbours in `Z^{d+1}`: up, down, then `±e_i` for each
    /// transverse direction.
    pub fn neighbors(&self, d: usize) -> impl Iterator<Item = LatticePoint> + '_ {
        let base = *self;
        (0..2 * d + 2).map(move |k| base + unit_step(d, k))
    }

    pub fn is_neighbor(&self, other: &LatticePoint) -> bool {
        (*self - *other).l1_norm() == 1
    }

    /// Smallest point at height `h` in the derived order.
    pub fn height_floor(h: i32) -> Self {
        LatticePoint { par: h, perp: [i32::MIN; MAX_DIM] }
    }

    pub fn with_par(mut self, par: i32) -> Self {
        self.par = par;
        self
    }
}

/// The `k`-th unit step (`0..2d+2`): `+e_par`, `-e_par`, then `+e_1, -e_1, ...`.
pub fn unit_step(d: usize, k: usize) -> LatticePoint {
    debug_assert!(k < 2 * d + 2);
    let mut step = LatticePoint::ORIGIN;
    match k {
        0 => step.par = 1,
        1 => step.par = -1,
        _ => {
            let axis = (k - 2) / 2;
            step.perp[axis] = if k % 2 == 0 { 1 } else { -1 };
        }
    }
    step
}

impl Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, rhs: Self) -> Self {
        let mut perp = self.perp;
        for (a, b) in perp.iter_mut().zip(rhs.perp) {
            *a += b;
        }
        LatticePoint { par: self.par + rhs.par, perp }
    }
}

impl Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> Self {
        LatticePoint { par: -self.par, perp: self.perp.map(|c| -c) }
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}; {})", self.perp, self.par)
    }
}

/// Cone aperture `δ = p/q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConeAperture {
    p: u32,
    q: u32,
}

impl Default for ConeAperture {
    fn default() -> Self {
        ConeAperture { p: 2, q: 1 }
    }
}

impl ConeAperture {
    pub fn new(p: u32, q: u32) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Validation(format!("cone aperture {p}/{q} must be positive")));
        }
        Ok(ConeAperture { p, q })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn delta(&self) -> f64 {
        self.p as f64 / self.q as f64
    }

    /// Exact test of `‖dperp‖ < δ·dpar` for an integer displacement.
    #[inline]
    pub fn open_contains(&self, disp: LatticePoint) -> bool {
        if disp.par <= 0 {
            return false;
        }
        let q = self.q as i128;
        let p = self.p as i128;
        let dpar = disp.par as i128;
        q * q * (disp.perp_norm2() as i128) < p * p * dpar * dpar
    }

    /// `self ≤ other` as rationals.
    pub fn le(&self, other: &ConeAperture) -> bool {
        (self.p as u64) * (other.q as u64) <= (other.p as u64) * (self.q as u64)
    }
}

/// `x ∈ apex + Y_δ`, with the apex itself adjoined.
pub fn in_cone(x: LatticePoint, apex: LatticePoint, aperture: ConeAperture) -> bool {
    x == apex || aperture.open_contains(x - apex)
}

/// A nearest-neighbour path; self-intersections are allowed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePath {
    points: Vec<LatticePoint>,
}

impl LatticePath {
    pub fn new(points: Vec<LatticePoint>) -> Result<Self> {
        if let Some(w) = points.windows(2).find(|w| !w[0].is_neighbor(&w[1])) {
            return Err(Error::Validation(format!("{} and {} are not nearest neighbours", w[0], w[1])));
        }
        Ok(LatticePath { points })
    }

    pub fn empty() -> Self {
        LatticePath { points: Vec::new() }
    }

    /// Walks from `start` along the given unit steps.
    pub fn from_steps(start: LatticePoint, steps: impl IntoIterator<Item = LatticePoint>) -> Result<Self> {
        let mut points = vec![start];
        for s in steps {
            points.push(*points.last().unwrap() + s);
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> Option<LatticePoint> {
        self.points.first().copied()
    }

    pub fn end(&self) -> Option<LatticePoint> {
        self.points.last().copied()
    }

    /// Concatenates paths that share endpoints; empty paths are skipped.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a LatticePath>) -> Result<Self> {
        let mut points: Vec<LatticePoint> = Vec::new();
        for part in parts {
            let Some(first) = part.start() else { continue };
            match points.last() {
                None => points.extend_from_slice(&part.points),
                Some(&last) if last == first => points.extend_from_slice(&part.points[1..]),
                Some(&last) => {
                    return Err(Error::Validation(format!("cannot join path ending at {last} with one starting at {first}")))
                }
            }
        }
        Ok(LatticePath { points })
    }
}

/// Every point after the first lies strictly inside the forward cone of
/// `γ(0)` and every point before the last strictly inside the backward cone
/// of `γ(n)`.
pub fn is_cone_confined(path: &LatticePath, aperture: ConeAperture) -> bool {
    let pts = path.points();
    let (Some(&start), Some(&end)) = (pts.first(), pts.last()) else {
        return true;
    };
    let n = pts.len() - 1;
    pts.iter().enumerate().all(|(j, &x)| {
        (j == 0 || aperture.open_contains(x - start)) && (j == n || aperture.open_contains(end - x))
    })
}

/// Indices `1 ≤ k < n` that are cone points of the path.
pub fn cone_points(path: &LatticePath, aperture: ConeAperture) -> Vec<usize> {
    let pts = path.points();
    if pts.len() < 3 {
        return Vec::new();
    }
    let n = pts.len() - 1;
    let (lo, hi) = (pts[0].par, pts[n].par);
    (1..n)
        .filter(|&k| {
            let c = pts[k];
            lo < c.par
                && c.par < hi
                && pts
                    .iter()
                    .enumerate()
                    .all(|(j, &x)| j == k || aperture.open_contains(c - x) || aperture.open_contains(x - c))
        })
        .collect()
}

/// Output of [`irreducible_decompose`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decomposition {
    pub prefix: LatticePath,
    pub pieces: Vec<LatticePath>,
    pub suffix: LatticePath,
}

impl Decomposition {
    pub fn reassemble(&self) -> LatticePath {
        LatticePath::concat(std::iter::once(&self.prefix).chain(&self.pieces).chain(std::iter::once(&self.suffix)))
            .expect("pieces of a decomposition share endpoints")
    }
}

/// Splits a path at all its cone points. Paths with fewer than two cone
/// points come back whole as the prefix.
pub fn irreducible_decompose(path: &LatticePath, aperture: ConeAperture) -> Decomposition {
    let cps = cone_points(path, aperture);
    if cps.len() < 2 {
        return Decomposition { prefix: path.clone(), pieces: Vec::new(), suffix: LatticePath::empty() };
    }
    let pts = path.points();
    let slice = |a: usize, b: usize| LatticePath { points: pts[a..=b].to_vec() };
    Decomposition {
        prefix: slice(0, cps[0]),
        pieces: cps.windows(2).map(|w| slice(w[0], w[1])).collect(),
        suffix: slice(*cps.last().unwrap(), pts.len() - 1),
    }
}

/// The open real diamond `(base + Y_δ) ∩ (tip − Y_δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diamond {
    pub base: LatticePoint,
    pub tip: LatticePoint,
    pub aperture: ConeAperture,
}

impl Diamond {
    pub fn new(base: LatticePoint, tip: LatticePoint, aperture: ConeAperture) -> Self {
        Diamond { base, tip, aperture }
    }

    /// Membership of a lattice point, with both apexes adjoined.
    pub fn contains(&self, x: LatticePoint) -> bool {
        in_cone(x, self.base, self.aperture) && in_cone(self.tip, x, self.aperture)
    }

    fn span(&self) -> i32 {
        self.tip.par - self.base.par
    }

    fn is_empty(&self) -> bool {
        !self.aperture.open_contains(self.tip - self.base)
    }

    /// The four cone constraints `‖y⊥ − c⊥‖ − σδ(h − c∥) < 0`, as
    /// `(center, sign)`.
    fn constraints(&self) -> [(LatticePoint, f64); 2] {
        [(self.base, 1.0), (self.tip, -1.0)]
    }

    /// Real midpoint of the axis segment; lies strictly inside a non-empty diamond.
    fn midpoint(&self, d: usize) -> Vec<f64> {
        let mut z: Vec<f64> = (0..d).map(|i| 0.5 * (self.base.perp[i] + self.tip.perp[i]) as f64).collect();
        z.push(0.5 * (self.base.par + self.tip.par) as f64);
        z
    }
}

/// Transverse dimension needed to hold both diamonds' coordinates.
fn active_dim(points: &[LatticePoint]) -> usize {
    (0..MAX_DIM).rev().find(|&i| points.iter().any(|p| p.perp[i] != 0)).map_or(1, |i| i + 1)
}

/// Margin by which a point must sit inside all cones to count as a common
/// interior point.
const INTERIOR_MARGIN: f64 = 1e-9;

fn max_violation(z: &[f64], diamonds: &[&Diamond], delta: f64) -> (f64, Vec<f64>) {
    let d = z.len() - 1;
    let mut worst = f64::NEG_INFINITY;
    let mut grad = vec![0.0; d + 1];
    for dia in diamonds {
        for (c, sign) in dia.constraints() {
            let mut r2 = 0.0;
            for i in 0..d {
                let t = z[i] - c.perp[i] as f64;
                r2 += t * t;
            }
            let r = r2.sqrt();
            let g = r - sign * delta * (z[d] - c.par as f64);
            if g > worst {
                worst = g;
                for i in 0..d {
                    grad[i] = if r > 0.0 { (z[i] - c.perp[i] as f64) / r } else { 0.0 };
                }
                grad[d] = -sign * delta;
            }
        }
    }
    (worst, grad)
}

/// Whether two open diamonds share a real point.
///
/// Cheap height and cylinder tests settle most pairs; the rest go to a
/// central-cut ellipsoid search for a point inside all four cones.
pub fn diamonds_intersect(a: &Diamond, b: &Diamond) -> bool {
    if a.aperture != b.aperture {
        // Mixed apertures never occur in practice; fall back to the wider one.
        let wide = if a.aperture.le(&b.aperture) { b.aperture } else { a.aperture };
        return diamonds_intersect(&Diamond { aperture: wide, ..*a }, &Diamond { aperture: wide, ..*b });
    }
    if a.is_empty() || b.is_empty() {
        return false;
    }
    if a.base.par.max(b.base.par) >= a.tip.par.min(b.tip.par) {
        return false;
    }
    let delta = a.aperture.delta();
    let d = active_dim(&[a.base, a.tip, b.base, b.tip]);
    // Each diamond sits inside the open cylinder of radius δT/2 around the
    // midpoint of its axis.
    let (ma, mb) = (a.midpoint(d), b.midpoint(d));
    let center_gap = (0..d).map(|i| (ma[i] - mb[i]).powi(2)).sum::<f64>().sqrt();
    if center_gap >= 0.5 * delta * (a.span() + b.span()) as f64 {
        return false;
    }
    let both = [a, b];
    for z in [&ma, &mb] {
        if max_violation(z, &both, delta).0 < -INTERIOR_MARGIN {
            return true;
        }
    }
    ellipsoid_search(&both, d, delta)
}

fn ellipsoid_search(diamonds: &[&Diamond; 2], d: usize, delta: f64) -> bool {
    let n = d + 1;
    let nf = n as f64;
    let a = diamonds[0];
    let mut center = a.midpoint(d);
    let half = 0.5 * a.span() as f64;
    let radius = half * (1.0 + delta) + 1.0;
    let mut shape = vec![0.0; n * n];
    for i in 0..n {
        shape[i * n + i] = radius * radius;
    }
    // Volume shrinks by at least exp(-1/(2(n+1))) per cut.
    let target = (radius * (1.0 + delta) / INTERIOR_MARGIN).ln();
    let max_iter = (2.0 * (nf + 1.0) * nf * target).ceil() as usize + 50;
    let mut pg = vec![0.0; n];
    for _ in 0..max_iter {
        let (worst, g) = max_violation(&center, diamonds, delta);
        if worst < -INTERIOR_MARGIN {
            return true;
        }
        for i in 0..n {
            pg[i] = (0..n).map(|j| shape[i * n + j] * g[j]).sum();
        }
        let gpg: f64 = (0..n).map(|i| g[i] * pg[i]).sum();
        if gpg <= 0.0 || !gpg.is_finite() {
            return false;
        }
        let s = gpg.sqrt();
        // Deep cut: the feasible set needs g·(z − c) ≤ −worst − margin.
        let alpha = ((worst + INTERIOR_MARGIN) / s).min(1.0);
        if alpha >= 1.0 {
            return false;
        }
        let tau = (1.0 + nf * alpha) / (nf + 1.0);
        let sigma = 2.0 * (1.0 + nf * alpha) / ((nf + 1.0) * (1.0 + alpha));
        let scale = nf * nf / (nf * nf - 1.0) * (1.0 - alpha * alpha);
        for i in 0..n {
            center[i] -= tau * pg[i] / s;
        }
        for i in 0..n {
            for j in 0..n {
                shape[i * n + j] = scale * (shape[i * n + j] - sigma * pg[i] * pg[j] / gpg);
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(perp: i32, par: i32) -> LatticePoint {
        LatticePoint::new(&[perp], par)
    }

    fn path(pts: &[(i32, i32)]) -> LatticePath {
        LatticePath::new(pts.iter().map(|&(a, b)| pt(a, b)).collect()).unwrap()
    }

    fn ap(p: u32, q: u32) -> ConeAperture {
        ConeAperture::new(p, q).unwrap()
    }

    #[test]
    fn split_join_round_trip() {
        let x = LatticePoint::new(&[3, -2, 7], 5);
        let (perp, par) = x.split(3);
        assert_eq!(LatticePoint::join(&perp, par), x);
    }

    #[test]
    fn neighbours_are_unit_steps() {
        let x = LatticePoint::new(&[1, 1], 4);
        let nb: Vec<_> = x.neighbors(2).collect();
        assert_eq!(nb.len(), 6);
        assert!(nb.iter().all(|y| (*y - x).l1_norm() == 1));
    }

    #[test]
    fn cone_membership_examples() {
        let o = LatticePoint::ORIGIN;
        assert!(in_cone(o, o, ap(1, 3)));
        assert!(in_cone(pt(1, 1), o, ap(2, 1)));
        assert!(!in_cone(pt(1, 1), o, ap(1, 2)));
        assert!(!in_cone(pt(0, -1), o, ap(5, 1)));
    }

    #[test]
    fn rejects_bad_aperture_and_non_neighbour_paths() {
        assert!(ConeAperture::new(0, 1).is_err());
        assert!(LatticePath::new(vec![pt(0, 0), pt(1, 1)]).is_err());
    }

    #[test]
    fn cone_confinement_examples() {
        let vertical = path(&[(0, 0), (0, 1), (0, 2), (0, 3)]);
        assert!(is_cone_confined(&vertical, ap(1, 2)));
        assert!(!is_cone_confined(&path(&[(0, 0), (1, 0)]), ap(1, 2)));
        assert!(is_cone_confined(&path(&[(0, 0), (0, 1), (1, 1), (1, 2)]), ap(2, 1)));
        // Returning to the start leaves the open cone.
        assert!(!is_cone_confined(&path(&[(0, 0), (0, 1), (0, 0), (0, 1), (0, 2)]), ap(2, 1)));
    }

    #[test]
    fn cone_point_examples() {
        let vertical = path(&[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]);
        assert_eq!(cone_points(&vertical, ap(2, 1)), vec![1, 2, 3]);
        assert!(cone_points(&path(&[(0, 0), (0, 1), (0, 0), (1, 0)]), ap(2, 1)).is_empty());
        let p = path(&[(0, 0), (0, 1), (1, 1), (1, 2), (1, 3)]);
        assert_eq!(cone_points(&p, ap(2, 1)), vec![3]);
    }

    #[test]
    fn decomposition_of_vertical_path() {
        let vertical = path(&[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let dec = irreducible_decompose(&vertical, ap(2, 1));
        assert_eq!(dec.prefix, path(&[(0, 0), (0, 1)]));
        assert_eq!(dec.pieces, vec![path(&[(0, 1), (0, 2)])]);
        assert_eq!(dec.suffix, path(&[(0, 2), (0, 3)]));
        assert_eq!(dec.reassemble(), vertical);
    }

    #[test]
    fn strongly_irreducible_path_comes_back_whole() {
        let p = path(&[(0, 0), (0, 1), (1, 1), (1, 2)]);
        assert!(cone_points(&p, ap(2, 1)).is_empty());
        let dec = irreducible_decompose(&p, ap(2, 1));
        assert_eq!(dec.prefix, p);
        assert!(dec.pieces.is_empty() && dec.suffix.is_empty());
    }

    #[test]
    fn diamond_examples() {
        let a = ap(2, 1);
        let d1 = Diamond::new(pt(0, 0), pt(0, 2), a);
        assert!(diamonds_intersect(&d1, &d1));
        assert!(!diamonds_intersect(&d1, &Diamond::new(pt(0, 5), pt(0, 7), a)));
        let left = Diamond::new(pt(0, 0), pt(0, 4), a);
        let right = Diamond::new(pt(3, 0), pt(3, 4), a);
        assert!(diamonds_intersect(&left, &right));
        // Diamonds stacked tip to base only touch.
        assert!(!diamonds_intersect(&d1, &Diamond::new(pt(0, 2), pt(0, 4), a)));
    }

    #[test]
    fn degenerate_diamond_is_empty() {
        let a = ap(2, 1);
        let dot = Diamond::new(pt(0, 1), pt(0, 1), a);
        assert!(!diamonds_intersect(&dot, &Diamond::new(pt(0, 0), pt(0, 2), a)));
    }
}
