//! Jump intensities `g`, the constrained rate kernels and the cylinder
//! functions `p_j`, `q_j` of the m=2 model.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lattice::{Configuration, Site, TorusGeometry};
use crate::{Error, Result};

/// Default number of cached `g(k)` values.
pub const DEFAULT_K_MAX: usize = 4096;

/// Tolerance for [`check_gradient_identity`].
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum GFamily {
    /// `g(k) = k / (q + k − 1)`.
    Example1 { q: f64 },
    /// `g(1) = 1`, `g(k) = (k / (k − 1))^β`.
    Example2 { beta: f64 },
    /// `g(k) = k^γ`.
    Example3 { gamma: f64 },
    /// Explicit values `g(0), g(1), …`.
    Tabulated { values: Vec<f64> },
}

impl GFamily {
    pub fn name(&self) -> &'static str {
        match self {
            GFamily::Example1 { .. } => "example1",
            GFamily::Example2 { .. } => "example2",
            GFamily::Example3 { .. } => "example3",
            GFamily::Tabulated { .. } => "tabulated",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            GFamily::Example1 { q } if !(q > 0.0 && q.is_finite()) => {
                Err(Error::param("q", format!("{q} must be positive")))
            }
            GFamily::Example2 { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::param("beta", format!("{beta} outside [0, 1]")))
            }
            GFamily::Example3 { gamma } if !(gamma > 0.0 && gamma <= 0.5) => {
                Err(Error::param("gamma", format!("{gamma} outside (0, 1/2]")))
            }
            GFamily::Tabulated { ref values } => {
                if values.len() < 2 {
                    return Err(Error::param("g", "table needs g(0) and g(1)"));
                }
                if values[0] != 0.0 {
                    return Err(Error::param("g", "tabulated g(0) must be 0"));
                }
                if let Some(k) = values[1..]
                    .iter()
                    .position(|&v| !(v > 0.0 && v.is_finite()))
                {
                    return Err(Error::param(
                        "g",
                        format!("tabulated g({}) must be positive", k + 1),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `g(k)` straight from the defining formula.
    pub fn eval(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Ok(0.0);
        }
        let kf = k as f64;
        Ok(match *self {
            GFamily::Example1 { q } => kf / (q + kf - 1.0),
            GFamily::Example2 { beta } => {
                if k == 1 {
                    1.0
                } else {
                    (kf / (kf - 1.0)).powf(beta)
                }
            }
            GFamily::Example3 { gamma } => kf.powf(gamma),
            GFamily::Tabulated { ref values } => *values.get(k).ok_or(Error::BeyondTable {
                k,
                cap: values.len() - 1,
            })?,
        })
    }

    /// Largest `k` for which [`GFamily::eval`] succeeds, if finite.
    pub fn domain_limit(&self) -> Option<usize> {
        match self {
            GFamily::Tabulated { values } => Some(values.len() - 1),
            _ => None,
        }
    }
}

impl fmt::Display for GFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GFamily::Example1 { q } => write!(f, "example1(q={q})"),
            GFamily::Example2 { beta } => write!(f, "example2(beta={beta})"),
            GFamily::Example3 { gamma } => write!(f, "example3(gamma={gamma})"),
            GFamily::Tabulated { values } => write!(f, "tabulated({} values)", values.len()),
        }
    }
}

/// The jump-intensity sequence with `g(k)` and `log g(k)!` cached for
/// `k ≤ K_max`. Serialises as its family; deserialising rebuilds the
/// caches with the default cap.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GFamily", into = "GFamily")]
pub struct GFunction {
    family: GFamily,
    values: Vec<f64>,
    log_factorials: Vec<f64>,
}

impl GFunction {
    pub fn new(family: GFamily) -> Result<Self> {
        Self::with_cap(family, DEFAULT_K_MAX)
    }

    pub fn with_cap(family: GFamily, k_max: usize) -> Result<Self> {
        family.validate()?;
        if k_max == 0 {
            return Err(Error::param("k_max", "must be at least 1"));
        }
        let cap = family
            .domain_limit()
            .map_or(k_max, |limit| limit.min(k_max));
        let values = (0..=cap)
            .map(|k| family.eval(k))
            .collect::<Result<Vec<_>>>()?;
        let mut log_factorials = Vec::with_capacity(values.len());
        log_factorials.push(0.0);
        for k in 1..values.len() {
            log_factorials.push(log_factorials[k - 1] + values[k].ln());
        }
        Ok(Self {
            family,
            values,
            log_factorials,
        })
    }

    pub fn example1(q: f64) -> Result<Self> {
        Self::new(GFamily::Example1 { q })
    }

    pub fn example2(beta: f64) -> Result<Self> {
        Self::new(GFamily::Example2 { beta })
    }

    pub fn example3(gamma: f64) -> Result<Self> {
        Self::new(GFamily::Example3 { gamma })
    }

    pub fn tabulated(values: Vec<f64>) -> Result<Self> {
        Self::new(GFamily::Tabulated { values })
    }

    /// Reads a two-column `k g(k)` table, ascending from `k = 0`.
    pub fn from_table_reader<R: BufRead>(input: R) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(k), Some(v), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse(format!(
                    "line {}: expected `k g(k)`",
                    lineno + 1
                )));
            };
            let k: usize = k
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad k `{k}`", lineno + 1)))?;
            if k != values.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected k = {}, found {k}",
                    lineno + 1,
                    values.len()
                )));
            }
            values.push(
                v.parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad g `{v}`", lineno + 1)))?,
            );
        }
        Self::tabulated(values)
    }

    pub fn from_table_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_table_reader(std::io::BufReader::new(file))
    }

    pub fn family(&self) -> &GFamily {
        &self.family
    }

    /// Largest cached `k`.
    pub fn cap(&self) -> usize {
        self.values.len() - 1
    }

    /// Table lookup; `k` must not exceed [`GFunction::cap`].
    #[inline]
    pub fn value(&self, k: u32) -> f64 {
        self.values[k as usize]
    }

    pub fn g_value(&self, k: usize) -> Result<f64> {
        self.values
            .get(k)
            .copied()
            .ok_or(Error::BeyondTable { k, cap: self.cap() })
    }

    /// `log g(k)!` with `g(0)! = 1`.
    pub fn log_factorial(&self, k: usize) -> Result<f64> {
        self.log_factorials
            .get(k)
            .copied()
            .ok_or(Error::BeyondTable { k, cap: self.cap() })
    }

    /// `max_{1≤k≤K} g(k)^exponent / k`.
    pub fn growth_constant(&self, exponent: i32, k_max: usize) -> Result<f64> {
        if k_max == 0 {
            return Err(Error::param("k_max", "must be at least 1"));
        }
        let mut b: f64 = 0.0;
        for k in 1..=k_max {
            let g = match self.values.get(k) {
                Some(&g) => g,
                None => self.family.eval(k)?,
            };
            b = b.max(g.powi(exponent) / k as f64);
        }
        Ok(b)
    }

    /// Heuristic witness that `g(k)^exponent / k` stays bounded: its maximum
    /// over the upper half of the cached range does not exceed the maximum
    /// over the lower half. Built-in families satisfy it by construction.
    pub fn has_bounded_growth(&self, exponent: i32) -> bool {
        if !matches!(self.family, GFamily::Tabulated { .. }) {
            return match self.family {
                GFamily::Example3 { gamma } => gamma * f64::from(exponent) <= 1.0,
                _ => true,
            };
        }
        let cap = self.cap();
        if cap < 2 {
            return true;
        }
        let ratio = |k: usize| self.values[k].powi(exponent) / k as f64;
        let head = (1..=cap / 2).map(ratio).fold(0.0, f64::max);
        let tail = (cap / 2 + 1..=cap).map(ratio).fold(0.0, f64::max);
        tail <= head * (1.0 + 1e-12)
    }
}

/// `max_{1≤k≤K} g(k)² / k`: the constant `b` of `g(k)² ≤ b·k`.
pub fn condition_g_constant(gf: &GFunction, k_max: usize) -> Result<f64> {
    gf.growth_constant(2, k_max)
}

impl TryFrom<GFamily> for GFunction {
    type Error = Error;

    fn try_from(family: GFamily) -> Result<Self> {
        GFunction::new(family)
    }
}

impl From<GFunction> for GFamily {
    fn from(gf: GFunction) -> Self {
        gf.family
    }
}

/// Constraint factor `c(x, y, η)` of the jump rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `c ≡ 1`: the plain zero-range process.
    ZeroRange,
    /// `c(x,x+e,η) = g(η(x−e)) + g(η(x+2e))`.
    Quadratic,
    /// `c(x,x+e,η) = g(η(x−e))g(η(x+2e)) + g(η(x−2e))g(η(x−e)) + g(η(x+2e))g(η(x+3e))`.
    Cubic,
}

impl Kernel {
    pub fn from_m(m: u32) -> Result<Self> {
        match m {
            2 => Ok(Kernel::Quadratic),
            3 => Ok(Kernel::Cubic),
            _ => Err(Error::param("m", format!("{m} is not 2 or 3"))),
        }
    }

    /// Exponent of the flux `Φ(ρ)^m` in the limit equation; 1 for the
    /// zero-range process.
    pub fn m(self) -> u32 {
        match self {
            Kernel::ZeroRange => 1,
            Kernel::Quadratic => 2,
            Kernel::Cubic => 3,
        }
    }

    /// Largest distance from the bond origin read by the constraint.
    pub fn stencil_radius(self) -> usize {
        match self {
            Kernel::ZeroRange => 1,
            Kernel::Quadratic => 2,
            Kernel::Cubic => 3,
        }
    }

    /// Distance along an axis within which a changed occupancy can alter a
    /// directed-bond rate originating at a site.
    pub fn update_reach(self) -> usize {
        match self {
            Kernel::ZeroRange => 0,
            Kernel::Quadratic => 2,
            Kernel::Cubic => 3,
        }
    }

    /// Smallest torus side on which the stencil does not wrap onto itself.
    pub fn min_side(self) -> usize {
        match self {
            Kernel::ZeroRange => 3,
            Kernel::Quadratic => 5,
            Kernel::Cubic => 7,
        }
    }

    /// `c(x, x + e_axis, η)` read from a raw occupancy slice.
    #[inline]
    pub fn constraint_raw(
        self,
        gf: &GFunction,
        geometry: &TorusGeometry,
        occupancy: &[u32],
        x: Site,
        axis: usize,
    ) -> f64 {
        let g = |steps: isize| gf.value(occupancy[geometry.offset(x, axis, steps)]);
        match self {
            Kernel::ZeroRange => 1.0,
            Kernel::Quadratic => g(-1) + g(2),
            Kernel::Cubic => {
                let (m2, m1, p2, p3) = (g(-2), g(-1), g(2), g(3));
                m1 * p2 + m2 * m1 + p2 * p3
            }
        }
    }

    pub fn constraint(self, gf: &GFunction, config: &Configuration, x: Site, axis: usize) -> f64 {
        self.constraint_raw(gf, config.geometry(), config.occupancy(), x, axis)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::ZeroRange => f.write_str("zero-range"),
            Kernel::Quadratic => f.write_str("m=2"),
            Kernel::Cubic => f.write_str("m=3"),
        }
    }
}

/// Rate of a jump from `x` to `x + direction·e_axis`, `direction = ±1`.
#[inline]
pub fn directed_rate_raw(
    gf: &GFunction,
    kernel: Kernel,
    geometry: &TorusGeometry,
    occupancy: &[u32],
    x: Site,
    axis: usize,
    direction: isize,
) -> f64 {
    let k = occupancy[x];
    if k == 0 {
        return 0.0;
    }
    let origin = if direction > 0 {
        x
    } else {
        geometry.offset(x, axis, -1)
    };
    kernel.constraint_raw(gf, geometry, occupancy, origin, axis) * gf.value(k)
}

pub fn directed_rate(
    gf: &GFunction,
    kernel: Kernel,
    config: &Configuration,
    x: Site,
    axis: usize,
    direction: isize,
) -> f64 {
    directed_rate_raw(
        gf,
        kernel,
        config.geometry(),
        config.occupancy(),
        x,
        axis,
        direction,
    )
}

/// `c(x, x+e_j, η)·g(η(x))`: the rate of one particle jumping `x → x+e_j`.
pub fn bond_rate(
    gf: &GFunction,
    kernel: Kernel,
    config: &Configuration,
    x: Site,
    axis: usize,
) -> Result<f64> {
    config.geometry().check_axis(axis)?;
    config.geometry().check_site(x)?;
    Ok(directed_rate(gf, kernel, config, x, axis, 1))
}

/// `τ_x p_j(η) = g(η(x))g(η(x+e)) + g(η(x))g(η(x−e)) − g(η(x+e))g(η(x−e))`.
pub fn p_j(
    gf: &GFunction,
    kernel: Kernel,
    config: &Configuration,
    x: Site,
    axis: usize,
) -> Result<f64> {
    require_quadratic(kernel)?;
    config.geometry().check_axis(axis)?;
    Ok(p_raw(gf, config.geometry(), config.occupancy(), x, axis))
}

/// `τ_x q_j(η) = c(x, x+e_j, η)·{g(η(x)) + g(η(x+e))}`.
pub fn q_j(
    gf: &GFunction,
    kernel: Kernel,
    config: &Configuration,
    x: Site,
    axis: usize,
) -> Result<f64> {
    require_quadratic(kernel)?;
    config.geometry().check_axis(axis)?;
    Ok(q_raw(gf, config.geometry(), config.occupancy(), x, axis))
}

pub(crate) fn p_raw(
    gf: &GFunction,
    geometry: &TorusGeometry,
    occupancy: &[u32],
    x: Site,
    axis: usize,
) -> f64 {
    let g = |steps: isize| gf.value(occupancy[geometry.offset(x, axis, steps)]);
    let (here, fwd, back) = (g(0), g(1), g(-1));
    here * fwd + here * back - fwd * back
}

pub(crate) fn q_raw(
    gf: &GFunction,
    geometry: &TorusGeometry,
    occupancy: &[u32],
    x: Site,
    axis: usize,
) -> f64 {
    let c = Kernel::Quadratic.constraint_raw(gf, geometry, occupancy, x, axis);
    let g = |steps: isize| gf.value(occupancy[geometry.offset(x, axis, steps)]);
    c * (g(0) + g(1))
}

fn require_quadratic(kernel: Kernel) -> Result<()> {
    if kernel == Kernel::Quadratic {
        Ok(())
    } else {
        Err(Error::UnsupportedKernel(kernel.to_string()))
    }
}

/// Checks `c(x,x+e,η){g(η(x)) − g(η(x+e))} = τ_x p_j(η) − τ_{x+e} p_j(η)`.
pub fn check_gradient_identity(
    gf: &GFunction,
    config: &Configuration,
    x: Site,
    axis: usize,
) -> bool {
    let (lhs, rhs) = gradient_sides(gf, config, x, axis);
    (lhs - rhs).abs() <= GRADIENT_TOLERANCE * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Both sides of the gradient identity, for reporting.
pub fn gradient_sides(gf: &GFunction, config: &Configuration, x: Site, axis: usize) -> (f64, f64) {
    let geometry = config.geometry();
    let occ = config.occupancy();
    let next = geometry.offset(x, axis, 1);
    let c = Kernel::Quadratic.constraint_raw(gf, geometry, occ, x, axis);
    let current = c * (gf.value(occ[x]) - gf.value(occ[next]));
    let gradient = p_raw(gf, geometry, occ, x, axis) - p_raw(gf, geometry, occ, next, axis);
    (current, gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TorusGeometry;
    use proptest::prelude::*;

    fn ring(occ: Vec<u32>) -> Configuration {
        let n = occ.len();
        Configuration::new(TorusGeometry::new(1, n).unwrap(), occ).unwrap()
    }

    #[test]
    fn example_values() {
        let g1 = GFunction::example1(1.0).unwrap();
        assert_eq!(g1.value(0), 0.0);
        for k in 1..100 {
            assert_eq!(g1.value(k), 1.0);
        }
        let g3 = GFunction::example3(0.5).unwrap();
        assert_eq!(g3.value(4), 2.0);
        let g1q2 = GFunction::example1(2.0).unwrap();
        assert!((g1q2.value(3) - 0.75).abs() < 1e-15);
        let g2 = GFunction::example2(1.0).unwrap();
        assert_eq!(g2.value(1), 1.0);
        assert!((g2.value(3) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(GFunction::example1(0.0).is_err());
        assert!(GFunction::example2(1.5).is_err());
        assert!(GFunction::example3(0.6).is_err());
        assert!(GFunction::example3(0.0).is_err());
        assert!(GFunction::tabulated(vec![1.0, 1.0]).is_err());
        assert!(GFunction::tabulated(vec![0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn tabulated_cap_is_enforced() {
        let gf = GFunction::tabulated(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(gf.cap(), 2);
        assert_eq!(gf.g_value(2).unwrap(), 2.0);
        assert!(matches!(
            gf.g_value(3),
            Err(Error::BeyondTable { k: 3, .. })
        ));
    }

    #[test]
    fn table_file_parsing() {
        let text = "# k g\n0 0\n1 1.0\n2 1.5\n";
        let gf = GFunction::from_table_reader(text.as_bytes()).unwrap();
        assert_eq!(gf.g_value(2).unwrap(), 1.5);
        assert!(GFunction::from_table_reader("0 0\n2 1\n".as_bytes()).is_err());
        assert!(GFunction::from_table_reader("0 0\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn log_factorials_accumulate() {
        let gf = GFunction::example3(0.5).unwrap();
        // g(k)! = sqrt(k!)
        let expect = 0.5 * (1..=10).map(|k| (k as f64).ln()).sum::<f64>();
        assert!((gf.log_factorial(10).unwrap() - expect).abs() < 1e-12);
        assert_eq!(gf.log_factorial(0).unwrap(), 0.0);
    }

    #[test]
    fn condition_g_examples() {
        let b3 = condition_g_constant(&GFunction::example3(0.5).unwrap(), 1000).unwrap();
        assert!((b3 - 1.0).abs() < 1e-12);
        let b1 = condition_g_constant(&GFunction::example1(1.0).unwrap(), 1000).unwrap();
        assert_eq!(b1, 1.0);
        let b2 = condition_g_constant(&GFunction::example2(1.0).unwrap(), 1000).unwrap();
        assert!((b2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bounded_growth_witness() {
        let linear = GFunction::tabulated((0..200).map(f64::from).collect()).unwrap();
        assert!(!linear.has_bounded_growth(2));
        let sqrt = GFunction::tabulated((0..200).map(|k| f64::from(k).sqrt()).collect()).unwrap();
        assert!(sqrt.has_bounded_growth(2));
        assert!(!sqrt.has_bounded_growth(3));
        assert!(GFunction::example1(2.0).unwrap().has_bounded_growth(3));
    }

    #[test]
    fn bond_rate_examples() {
        let gf = GFunction::example1(1.0).unwrap();
        let c = ring(vec![1, 2, 0, 1, 0]);
        assert_eq!(bond_rate(&gf, Kernel::Quadratic, &c, 1, 0).unwrap(), 2.0);
        assert_eq!(bond_rate(&gf, Kernel::Quadratic, &c, 2, 0).unwrap(), 0.0);
        // η(x−1) = η(x+2) = 0 with η(x) > 0
        let blocked = ring(vec![0, 3, 0, 0, 0, 0]);
        assert_eq!(
            bond_rate(&gf, Kernel::Quadratic, &blocked, 1, 0).unwrap(),
            0.0
        );
        assert!(bond_rate(&gf, Kernel::Quadratic, &c, 1, 1).is_err());
        assert_eq!(
            bond_rate(&gf, Kernel::ZeroRange, &blocked, 1, 0).unwrap(),
            1.0
        );
    }

    #[test]
    fn cubic_constraint_matches_formula() {
        let gf = GFunction::example3(0.5).unwrap();
        let c = ring(vec![1, 4, 2, 9, 0, 3, 1, 0]);
        let g = |k: u32| f64::from(k).sqrt();
        // x = 3: x−2 → 1, x−1 → 2, x+2 → 5, x+3 → 6
        let expect = g(2) * g(3) + g(4) * g(2) + g(3) * g(1);
        assert!((Kernel::Cubic.constraint(&gf, &c, 3, 0) - expect).abs() < 1e-14);
    }

    #[test]
    fn cylinder_function_examples() {
        let gf = GFunction::example1(1.0).unwrap();
        let empty = ring(vec![0; 6]);
        assert_eq!(p_j(&gf, Kernel::Quadratic, &empty, 2, 0).unwrap(), 0.0);
        assert_eq!(q_j(&gf, Kernel::Quadratic, &empty, 2, 0).unwrap(), 0.0);
        let ones = ring(vec![1; 6]);
        assert_eq!(p_j(&gf, Kernel::Quadratic, &ones, 2, 0).unwrap(), 1.0);
        assert_eq!(q_j(&gf, Kernel::Quadratic, &ones, 2, 0).unwrap(), 4.0);
        assert!(matches!(
            p_j(&gf, Kernel::Cubic, &ones, 2, 0),
            Err(Error::UnsupportedKernel(_))
        ));
        let (w, grad) = gradient_sides(&gf, &ones, 2, 0);
        assert_eq!((w, grad), (0.0, 0.0));
        assert!(check_gradient_identity(&gf, &empty, 0, 0));
    }

    fn occupancies(len: usize) -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(
            prop_oneof![3 => Just(0u32), 5 => 1u32..4, 1 => 4u32..40],
            len,
        )
    }

    fn families() -> impl Strategy<Value = GFunction> {
        prop_oneof![
            (0.2f64..4.0).prop_map(|q| GFunction::example1(q).unwrap()),
            (0.0f64..=1.0).prop_map(|b| GFunction::example2(b).unwrap()),
            (0.05f64..=0.5).prop_map(|g| GFunction::example3(g).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(occ in occupancies(9), x in 0usize..9, gf in families()) {
            let c = ring(occ);
            let g = c.geometry();
            let y = g.offset(x, 0, 1);
            for kernel in [Kernel::Quadratic, Kernel::Cubic] {
                let from_x = kernel.constraint(&gf, &c, x, 0);
                // The bond seen from y: reflect the ring so that y → x becomes
                // a forward jump from −y.
                let from_y_reversed = {
                    let rev: Vec<u32> = (0..9).map(|z| c.get((18 - z) % 9)).collect();
                    let rc = ring(rev);
                    // y maps to −y; the jump y → x is a forward jump −y → −x.
                    let ry = (9 - y) % 9;
                    kernel.constraint(&gf, &rc, ry, 0)
                };
                prop_assert!((from_x - from_y_reversed).abs() < 1e-12);
            }
        }

        #[test]
        fn rates_are_local(occ in occupancies(11), x in 0usize..11, far in 0usize..11, delta in 1u32..5, gf in families()) {
            let c = ring(occ);
            for kernel in [Kernel::Quadratic, Kernel::Cubic] {
                for dir in [1isize, -1] {
                    let origin = if dir > 0 { x as isize } else { x as isize - 1 };
                    let reach = kernel.stencil_radius() as isize;
                    let lo = origin - reach + 1;
                    let hi = origin + reach;
                    let f = far as isize;
                    let inside = (lo..=hi).any(|s| s.rem_euclid(11) == f);
                    if inside || far == x { continue; }
                    let mut perturbed = c.clone();
                    perturbed.set(far, c.get(far) + delta);
                    let before = directed_rate(&gf, kernel, &c, x, 0, dir);
                    let after = directed_rate(&gf, kernel, &perturbed, x, 0, dir);
                    prop_assert_eq!(before, after);
                }
            }
        }

        #[test]
        fn bond_pair_sums_to_q(occ in occupancies(8), x in 0usize..8, gf in families()) {
            let c = ring(occ);
            let y = c.geometry().offset(x, 0, 1);
            let total = directed_rate(&gf, Kernel::Quadratic, &c, x, 0, 1)
                + directed_rate(&gf, Kernel::Quadratic, &c, y, 0, -1);
            let q = q_j(&gf, Kernel::Quadratic, &c, x, 0).unwrap();
            prop_assert!((total - q).abs() <= 1e-12 * q.max(1.0));
        }

        #[test]
        fn p_is_bounded_by_local_mass(occ in occupancies(7), x in 0usize..7, gf in families()) {
            let c = ring(occ);
            let b = condition_g_constant(&gf, gf.cap()).unwrap();
            let g = c.geometry();
            let p = p_j(&gf, Kernel::Quadratic, &c, x, 0).unwrap();
            let mass = f64::from(c.get(g.offset(x, 0, -1)) + c.get(x) + c.get(g.offset(x, 0, 1)));
            prop_assert!(p.abs() <= b * mass + 1e-12);
        }
    }
}
