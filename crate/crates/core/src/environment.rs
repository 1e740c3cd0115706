//! Random potentials on `Z^{d+1}`.
//!
//! An [`Environment`] never stores site values. `V(x)` is obtained by hashing
//! `(seed, origin_shift + x)` to a uniform variate and inverting the
//! distribution function of the [`PotentialSpec`]. Shifting the environment
//! only moves `origin_shift`, so `θ_x` is exact on the whole lattice.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{LatticePoint, MAX_DIM};
use crate::rng::mix64;

/// Value of the potential at one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SitePotential {
    Finite(f64),
    Trap,
}

impl SitePotential {
    /// `exp(-β V)`, with traps inert at `β = 0` and absorbing otherwise.
    #[inline]
    pub fn factor(self, beta: f64) -> f64 {
        match self {
            _ if beta == 0.0 => 1.0,
            SitePotential::Trap => 0.0,
            SitePotential::Finite(v) => (-beta * v).exp(),
        }
    }

    pub fn is_trap(self) -> bool {
        matches!(self, SitePotential::Trap)
    }
}

/// Single-site law of the potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `0` w.p. `1 - rho - p`, `v` w.p. `rho`, trap w.p. `p`.
    TwoPoint {
        v: f64,
        rho: f64,
        #[serde(default)]
        p: f64,
    },
    BernoulliTrap { p: f64 },
    /// Exponential with the given rate w.p. `1 - p`, trap w.p. `p`.
    ExpTrap {
        rate: f64,
        #[serde(default)]
        p: f64,
    },
    ConstantZero,
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.trap_probability();
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("trap probability {p} must lie in [0, 1)"));
        }
        match *self {
            PotentialSpec::TwoPoint { v, rho, p } => {
                if !(v.is_finite() && v >= 0.0) {
                    return invalid(format!("atom value {v} must be finite and nonnegative"));
                }
                if !(0.0..=1.0).contains(&rho) || rho + p >= 1.0 {
                    return invalid(format!("atom weight {rho} with trap probability {p} leaves no mass at 0"));
                }
            }
            PotentialSpec::ExpTrap { rate, .. } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return invalid(format!("exponential rate {rate} must be positive"));
                }
            }
            PotentialSpec::BernoulliTrap { .. } | PotentialSpec::ConstantZero => {}
        }
        Ok(())
    }

    pub fn trap_probability(&self) -> f64 {
        match *self {
            PotentialSpec::TwoPoint { p, .. } | PotentialSpec::BernoulliTrap { p } | PotentialSpec::ExpTrap { p, .. } => p,
            PotentialSpec::ConstantZero => 0.0,
        }
    }

    /// Inverse distribution function; `u` is uniform on `(0, 1)`.
    pub fn sample(&self, u: f64) -> SitePotential {
        let p = self.trap_probability();
        if u < p {
            return SitePotential::Trap;
        }
        match *self {
            PotentialSpec::TwoPoint { v, rho, .. } => SitePotential::Finite(if u < p + rho { v } else { 0.0 }),
            PotentialSpec::ExpTrap { rate, .. } => {
                // Conditional uniform on (0, 1] given no trap.
                let w = (1.0 - u) / (1.0 - p);
                SitePotential::Finite(-w.ln() / rate)
            }
            PotentialSpec::BernoulliTrap { .. } | PotentialSpec::ConstantZero => SitePotential::Finite(0.0),
        }
    }

    /// `E exp(-β ℓ V)`.
    pub fn laplace(&self, ell: u32, beta: f64) -> f64 {
        if beta == 0.0 {
            return 1.0;
        }
        let s = beta * ell as f64;
        match *self {
            PotentialSpec::TwoPoint { v, rho, p } => (1.0 - rho - p) + rho * (-s * v).exp(),
            PotentialSpec::BernoulliTrap { p } => 1.0 - p,
            PotentialSpec::ExpTrap { rate, p } => (1.0 - p) * rate / (rate + s),
            PotentialSpec::ConstantZero => 1.0,
        }
    }

    /// Whether `V` is almost surely constant as seen by weights at this `β`.
    /// Annealed weights are then Markov in the path.
    pub fn is_deterministic(&self, beta: f64) -> bool {
        if beta == 0.0 {
            return true;
        }
        match *self {
            PotentialSpec::ConstantZero => true,
            PotentialSpec::BernoulliTrap { p } => p == 0.0,
            PotentialSpec::TwoPoint { v, rho, p } => p == 0.0 && (rho == 0.0 || v == 0.0),
            PotentialSpec::ExpTrap { .. } => false,
        }
    }
}

/// `φ_β(ℓ) = -log E exp(-β ℓ V)`.
pub fn phi_beta(ell: u32, beta: f64, spec: &PotentialSpec) -> Result<f64> {
    if !(beta >= 0.0) {
        return invalid(format!("inverse temperature {beta} must be nonnegative"));
    }
    if ell == 0 {
        return invalid("local time must be positive");
    }
    Ok(-spec.laplace(ell, beta).ln())
}

/// Anything that assigns a potential to lattice sites.
pub trait Medium: Clone + Send + Sync {
    fn potential(&self, x: LatticePoint) -> SitePotential;

    /// The same medium seen from `by`: `θ_by V (x) = V(by + x)`.
    fn shifted(&self, by: LatticePoint) -> Self;

    #[inline]
    fn factor(&self, x: LatticePoint, beta: f64) -> f64 {
        self.potential(x).factor(beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub spec: PotentialSpec,
    pub seed: u64,
    pub origin_shift: LatticePoint,
}

impl Environment {
    pub fn new(spec: PotentialSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Environment { spec, seed, origin_shift: LatticePoint::ORIGIN })
    }

    pub fn shift(&self, by: LatticePoint) -> Self {
        Environment { origin_shift: self.origin_shift + by, ..*self }
    }

    /// Uniform variate attached to the absolute site `x`.
    fn uniform(&self, x: LatticePoint) -> f64 {
        let mut h = mix64(self.seed);
        h = mix64(h ^ (x.par as u32 as u64));
        for c in x.perp {
            h = mix64(h ^ (c as u32 as u64));
        }
        ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl Medium for Environment {
    #[inline]
    fn potential(&self, x: LatticePoint) -> SitePotential {
        self.spec.sample(self.uniform(self.origin_shift + x))
    }

    fn shifted(&self, by: LatticePoint) -> Self {
        self.shift(by)
    }
}

pub fn potential_at<M: Medium>(env: &M, x: LatticePoint) -> SitePotential {
    env.potential(x)
}

#[derive(Clone, Debug, PartialEq)]
pub enum FixtureBase {
    Random(Environment),
    /// Free on the axis `x⊥ = 0`, trapped everywhere else.
    Column,
    Constant(f64),
}

/// A medium with hand-picked values, for closed-form checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    base: FixtureBase,
    pins: HashMap<LatticePoint, SitePotential>,
    origin_shift: LatticePoint,
}

impl Fixture {
    pub fn new(base: FixtureBase) -> Self {
        Fixture { base, pins: HashMap::new(), origin_shift: LatticePoint::ORIGIN }
    }

    pub fn column() -> Self {
        Self::new(FixtureBase::Column)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(FixtureBase::Constant(c))
    }

    /// Pins the value at `x`, given in the fixture's current coordinates.
    pub fn pin(mut self, x: LatticePoint, v: SitePotential) -> Self {
        self.pins.insert(self.origin_shift + x, v);
        self
    }

    /// Traps every site at sup-distance exactly 1 from `center`.
    pub fn trap_shell(mut self, center: LatticePoint, d: usize) -> Self {
        for site in sup_ball(center, 1, d) {
            if (site - center).linf_norm() == 1 {
                self = self.pin(site, SitePotential::Trap);
            }
        }
        self
    }
}

impl Medium for Fixture {
    fn potential(&self, x: LatticePoint) -> SitePotential {
        let abs = self.origin_shift + x;
        if let Some(&v) = self.pins.get(&abs) {
            return v;
        }
        match &self.base {
            FixtureBase::Random(env) => env.potential(abs),
            FixtureBase::Column => {
                if abs.perp.iter().all(|&c| c == 0) {
                    SitePotential::Finite(0.0)
                } else {
                    SitePotential::Trap
                }
            }
            FixtureBase::Constant(c) => SitePotential::Finite(*c),
        }
    }

    fn shifted(&self, by: LatticePoint) -> Self {
        Fixture { origin_shift: self.origin_shift + by, ..self.clone() }
    }
}

fn sup_ball(center: LatticePoint, radius: i32, d: usize) -> Vec<LatticePoint> {
    let mut out = vec![center];
    let axes: Vec<usize> = (0..d).collect();
    for axis in std::iter::once(None).chain(axes.into_iter().map(Some)) {
        let mut next = Vec::with_capacity(out.len() * (2 * radius as usize + 1));
        for p in &out {
            for k in -radius..=radius {
                let mut q = *p;
                match axis {
                    None => q.par += k,
                    Some(i) => q.perp[i] += k,
                }
                next.push(q);
            }
        }
        out = next;
    }
    debug_assert!(d <= MAX_DIM);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterProbe {
    ConnectedBeyondProbe,
    Blocked,
    TrappedSite,
}

/// Breadth-first search over non-trap sites inside the sup-ball of radius
/// `probe_radius` around `x`.
pub fn in_infinite_cluster<M: Medium>(env: &M, x: LatticePoint, probe_radius: u32, d: usize) -> ClusterProbe {
    if env.potential(x).is_trap() {
        return ClusterProbe::TrappedSite;
    }
    let r = probe_radius.max(1) as i64;
    let mut seen = HashSet::from([x]);
    let mut queue = VecDeque::from([x]);
    while let Some(y) = queue.pop_front() {
        if (y - x).linf_norm() >= r {
            return ClusterProbe::ConnectedBeyondProbe;
        }
        for z in y.neighbors(d) {
            if seen.insert(z) && !env.potential(z).is_trap() {
                queue.push_back(z);
            }
        }
    }
    ClusterProbe::Blocked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(PotentialSpec::BernoulliTrap { p: 1.0 }.validate().is_err());
        assert!(PotentialSpec::TwoPoint { v: 1.0, rho: 0.9, p: 0.1 }.validate().is_err());
        assert!(PotentialSpec::ExpTrap { rate: 0.0, p: 0.0 }.validate().is_err());
        assert!(PotentialSpec::TwoPoint { v: 1.0, rho: 0.5, p: 0.0 }.validate().is_ok());
    }

    #[test]
    fn phi_examples() {
        let trap = PotentialSpec::BernoulliTrap { p: 0.1 };
        assert!((phi_beta(1, 0.7, &trap).unwrap() + 0.9f64.ln()).abs() < 1e-15);
        assert_eq!(phi_beta(3, 0.0, &trap).unwrap(), 0.0);
        let two = PotentialSpec::TwoPoint { v: 1.0, rho: 0.5, p: 0.0 };
        let want = -(0.5 + 0.5 * (-2.0f64).exp()).ln();
        assert!((phi_beta(2, 1.0, &two).unwrap() - want).abs() < 1e-15);
        assert!(phi_beta(1, -1.0, &two).is_err());
    }

    #[test]
    fn constant_zero_is_zero_everywhere() {
        let env = Environment::new(PotentialSpec::ConstantZero, 3).unwrap();
        for k in -5..5 {
            assert_eq!(env.potential(LatticePoint::new(&[k, 2 * k], k)), SitePotential::Finite(0.0));
        }
    }

    #[test]
    fn shift_composes() {
        let env = Environment::new(PotentialSpec::ExpTrap { rate: 1.0, p: 0.2 }, 11).unwrap();
        let x = LatticePoint::new(&[3, -1], 4);
        let y = LatticePoint::new(&[-7, 2], 1);
        assert_eq!(env.shift(x).potential(y), env.potential(x + y));
        assert_eq!(env.shift(x).shift(y), env.shift(x + y));
    }

    #[test]
    fn trap_shell_blocks() {
        let f = Fixture::new(FixtureBase::Constant(0.0)).trap_shell(LatticePoint::ORIGIN, 1);
        assert_eq!(in_infinite_cluster(&f, LatticePoint::ORIGIN, 3, 1), ClusterProbe::Blocked);
        let t = Fixture::constant(0.0).pin(LatticePoint::ORIGIN, SitePotential::Trap);
        assert_eq!(in_infinite_cluster(&t, LatticePoint::ORIGIN, 3, 1), ClusterProbe::TrappedSite);
        let free = Environment::new(PotentialSpec::TwoPoint { v: 1.0, rho: 0.3, p: 0.0 }, 1).unwrap();
        assert_eq!(in_infinite_cluster(&free, LatticePoint::ORIGIN, 4, 2), ClusterProbe::ConnectedBeyondProbe);
    }

    #[test]
    fn trap_factor_convention() {
        assert_eq!(SitePotential::Trap.factor(0.0), 1.0);
        assert_eq!(SitePotential::Trap.factor(1e-9), 0.0);
    }
}
