//! Exact analysis of the finite hyperplanes `Σ_{N,k}` of configurations with
//! `k` particles: enumeration, decomposition into communicating classes,
//! blocked states and detailed balance with respect to the product weights.

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::lattice::{Configuration, TorusGeometry};
use crate::rates::{directed_rate_raw, GFunction, Kernel};
use crate::simulator::{blocked_by_occupation_pattern, find_mobile_cluster};
use crate::{Error, Result};

/// Largest hyperplane the exhaustive routines accept.
pub const MAX_HYPERPLANE: u128 = 10_000_000;

/// Largest geometry, in sites, the exhaustive routines accept.
pub const MAX_SITES: usize = 12;

/// `C(n, r)` in exact integer arithmetic, saturating at `u128::MAX`.
pub fn binomial(n: u64, r: u64) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = match acc.checked_mul(u128::from(n - i)) {
            Some(v) => v / u128::from(i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Dense ranking of `Σ_{N,k}`. A weak composition `η` of `k` into `n` parts
/// corresponds to the bar positions `b_i = η(0)+…+η(i) + i`, `i < n−1`,
/// a strictly increasing subset of `{0, …, k+n−2}`; its rank is
/// `Σ_i C(b_i, i+1)` in the combinatorial number system.
#[derive(Clone, Debug)]
pub struct HyperplaneIndex {
    geometry: TorusGeometry,
    k: u32,
    size: usize,
    table: Vec<Vec<u64>>,
}

impl HyperplaneIndex {
    pub fn new(geometry: TorusGeometry, k: u32) -> Result<Self> {
        let n = geometry.site_count();
        if n > MAX_SITES {
            return Err(Error::param(
                "N",
                format!("{n} sites exceed the exhaustive limit of {MAX_SITES}"),
            ));
        }
        let size = binomial(u64::from(k) + n as u64 - 1, n as u64 - 1);
        if size > MAX_HYPERPLANE {
            return Err(Error::HyperplaneTooLarge {
                size,
                limit: MAX_HYPERPLANE,
            });
        }
        let top = k as usize + n;
        let table = (0..=top)
            .map(|a| {
                (0..n)
                    .map(|r| binomial(a as u64, r as u64) as u64)
                    .collect()
            })
            .collect();
        Ok(Self {
            geometry,
            k,
            size: size as usize,
            table,
        })
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geometry
    }

    pub fn particles(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn rank(&self, occupancy: &[u32]) -> usize {
        let n = occupancy.len();
        let mut partial = 0usize;
        let mut rank = 0u64;
        for (i, &v) in occupancy[..n - 1].iter().enumerate() {
            partial += v as usize;
            rank += self.table[partial + i][i + 1];
        }
        rank as usize
    }

    pub fn unrank_into(&self, rank: usize, occupancy: &mut [u32]) {
        let n = occupancy.len();
        let mut rest = rank as u64;
        let mut upper = self.k as usize + n - 1;
        let mut bars = vec![0usize; n - 1];
        for i in (0..n - 1).rev() {
            // largest b < upper with C(b, i+1) ≤ rest
            let mut b = upper - 1;
            while self.table[b][i + 1] > rest {
                b -= 1;
            }
            bars[i] = b;
            rest -= self.table[b][i + 1];
            upper = b;
        }
        let mut previous: isize = -1;
        for (i, &b) in bars.iter().enumerate() {
            occupancy[i] = (b as isize - previous - 1) as u32;
            previous = b as isize;
        }
        occupancy[n - 1] = (self.k as isize + n as isize - 2 - previous) as u32;
    }

    pub fn unrank(&self, rank: usize) -> Configuration {
        let mut occupancy = vec![0; self.geometry.site_count()];
        self.unrank_into(rank, &mut occupancy);
        Configuration::new(self.geometry.clone(), occupancy).expect("geometry matches")
    }

    /// Every configuration of the hyperplane, in rank order.
    pub fn iter(&self) -> impl Iterator<Item = Configuration> + '_ {
        (0..self.size).map(|r| self.unrank(r))
    }
}

/// Number of configurations of `Σ_{N,k}` together with an iterator over them.
pub fn enumerate_hyperplane(
    geometry: &TorusGeometry,
    k: u32,
) -> Result<(usize, impl Iterator<Item = Configuration>)> {
    let index = HyperplaneIndex::new(geometry.clone(), k)?;
    let size = index.len();
    Ok((size, (0..size).map(move |r| index.unrank(r))))
}

/// The allowed-move graph of one hyperplane, with its connected components.
/// Component labels are numbered by the smallest rank they contain.
#[derive(Clone, Debug)]
pub struct HyperplaneAnalysis {
    index: HyperplaneIndex,
    kernel: Kernel,
    labels: Vec<usize>,
    exit_rates: Vec<f64>,
    components: usize,
}

impl HyperplaneAnalysis {
    pub fn new(geometry: &TorusGeometry, k: u32, gf: &GFunction, kernel: Kernel) -> Result<Self> {
        let index = HyperplaneIndex::new(geometry.clone(), k)?;
        if k as usize > gf.cap() {
            return Err(Error::BeyondTable {
                k: k as usize,
                cap: gf.cap(),
            });
        }
        let n = geometry.site_count();
        let mut uf = UnionFind::<usize>::new(index.len());
        let mut exit_rates = vec![0.0; index.len()];
        let mut occ = vec![0u32; n];
        for (r, exit) in exit_rates.iter_mut().enumerate() {
            index.unrank_into(r, &mut occ);
            let mut total = 0.0;
            for_each_move(gf, kernel, geometry, &mut occ, |occ_after, rate, _, _| {
                total += rate;
                uf.union(r, index.rank(occ_after));
            });
            *exit = total;
        }
        let mut labels = vec![usize::MAX; index.len()];
        let mut root_label = vec![usize::MAX; index.len()];
        let mut components = 0;
        for (r, label) in labels.iter_mut().enumerate() {
            let root = uf.find_mut(r);
            if root_label[root] == usize::MAX {
                root_label[root] = components;
                components += 1;
            }
            *label = root_label[root];
        }
        Ok(Self {
            index,
            kernel,
            labels,
            exit_rates,
            components,
        })
    }

    pub fn index(&self) -> &HyperplaneIndex {
        &self.index
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    /// Component label of each configuration, indexed by rank.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Total exit rate `Λ(η)` of each configuration, indexed by rank.
    pub fn exit_rates(&self) -> &[f64] {
        &self.exit_rates
    }

    pub fn component_count(&self) -> usize {
        self.components
    }

    /// Components as sorted lists of ranks, ordered by their smallest rank.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.components];
        for (r, &label) in self.labels.iter().enumerate() {
            out[label].push(r);
        }
        out
    }

    pub fn blocked_count(&self) -> usize {
        self.exit_rates.iter().filter(|&&r| r == 0.0).count()
    }

    /// Number of configurations blocked by the one-dimensional occupation
    /// pattern criterion.
    pub fn pattern_blocked_count(&self) -> Result<usize> {
        let mut count = 0;
        for r in 0..self.index.len() {
            if blocked_by_occupation_pattern(self.kernel, &self.index.unrank(r))? {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Ranks of the configurations containing a fully occupied unit
    /// hypercube.
    pub fn sigma_star(&self) -> Vec<usize> {
        (0..self.index.len())
            .filter(|&r| find_mobile_cluster(&self.index.unrank(r)).is_some())
            .collect()
    }

    /// Number of distinct components met by the configurations with a fully
    /// occupied unit hypercube.
    pub fn sigma_star_component_count(&self) -> usize {
        let mut seen: Vec<usize> = self
            .sigma_star()
            .into_iter()
            .map(|r| self.labels[r])
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// True iff every configuration with a fully occupied unit hypercube lies
    /// in a single component; vacuous when there is none.
    pub fn sigma_star_single_component(&self) -> bool {
        self.sigma_star_component_count() <= 1
    }
}

/// Calls `visit(η^{x,y}, rate, x, y)` for every move of positive rate out of
/// `occ`. `occ` is restored before returning.
fn for_each_move<F>(
    gf: &GFunction,
    kernel: Kernel,
    geometry: &TorusGeometry,
    occ: &mut [u32],
    mut visit: F,
) where
    F: FnMut(&[u32], f64, usize, usize),
{
    for x in 0..geometry.site_count() {
        if occ[x] == 0 {
            continue;
        }
        for axis in 0..geometry.dim() {
            for dir in [1isize, -1] {
                let rate = directed_rate_raw(gf, kernel, geometry, occ, x, axis, dir);
                if rate > 0.0 {
                    let y = geometry.offset(x, axis, dir);
                    occ[x] -= 1;
                    occ[y] += 1;
                    visit(occ, rate, x, y);
                    occ[y] -= 1;
                    occ[x] += 1;
                }
            }
        }
    }
}

pub fn decompose_components(
    geometry: &TorusGeometry,
    k: u32,
    gf: &GFunction,
    kernel: Kernel,
) -> Result<Vec<Vec<usize>>> {
    Ok(HyperplaneAnalysis::new(geometry, k, gf, kernel)?.components())
}

pub fn verify_sigma_star(
    geometry: &TorusGeometry,
    k: u32,
    gf: &GFunction,
    kernel: Kernel,
) -> Result<bool> {
    Ok(HyperplaneAnalysis::new(geometry, k, gf, kernel)?.sigma_star_single_component())
}

pub fn count_blocked(
    geometry: &TorusGeometry,
    k: u32,
    gf: &GFunction,
    kernel: Kernel,
) -> Result<usize> {
    Ok(HyperplaneAnalysis::new(geometry, k, gf, kernel)?.blocked_count())
}

/// Outcome of the exhaustive detailed-balance check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetailedBalance {
    /// `max |w(η)·r(η→η′) − w(η′)·r(η′→η)|` over all moves.
    pub max_violation: f64,
    /// Moves whose reverse has rate zero.
    pub one_way_moves: usize,
    pub moves: usize,
}

/// Checks `w(η)·r(η→η′) = w(η′)·r(η′→η)` with the unnormalised weights
/// `w(η) = Π_x ψ^{η(x)}/g(η(x))!` over every move of `Σ_{N,k}`.
pub fn check_detailed_balance(
    geometry: &TorusGeometry,
    k: u32,
    gf: &GFunction,
    kernel: Kernel,
    psi: f64,
) -> Result<DetailedBalance> {
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(Error::param(
            "psi",
            format!("fugacity {psi} must be positive"),
        ));
    }
    let index = HyperplaneIndex::new(geometry.clone(), k)?;
    let log_fact: Vec<f64> = (0..=k as usize)
        .map(|j| gf.log_factorial(j))
        .collect::<Result<_>>()?;
    let weight = |occ: &[u32]| {
        let log_w: f64 = occ
            .iter()
            .map(|&j| f64::from(j) * psi.ln() - log_fact[j as usize])
            .sum();
        log_w.exp()
    };
    let mut occ = vec![0u32; geometry.site_count()];
    let mut result = DetailedBalance {
        max_violation: 0.0,
        one_way_moves: 0,
        moves: 0,
    };
    for r in 0..index.len() {
        index.unrank_into(r, &mut occ);
        let w = weight(&occ);
        for_each_move(gf, kernel, geometry, &mut occ, |after, rate, x, y| {
            let (axis, dir) = geometry
                .bond_direction(y, x)
                .expect("moves are between neighbours");
            let reverse = directed_rate_raw(gf, kernel, geometry, after, y, axis, dir);
            if reverse <= 0.0 {
                result.one_way_moves += 1;
            }
            let violation = (w * rate - weight(after) * reverse).abs();
            result.max_violation = result.max_violation.max(violation);
            result.moves += 1;
        });
    }
    Ok(result)
}

/// Serialisable summary of one hyperplane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    #[serde(rename = "N")]
    pub side: usize,
    pub d: usize,
    pub k: u32,
    pub m: u32,
    pub g_family: String,
    pub hyperplane_size: usize,
    pub component_count: usize,
    pub blocked_count: usize,
    pub sigma_star_single_component: bool,
    pub max_detailed_balance_violation: f64,
}

/// Full report; the detailed-balance check uses fugacity `psi`.
pub fn ergodicity_report(
    geometry: &TorusGeometry,
    k: u32,
    gf: &GFunction,
    kernel: Kernel,
    psi: f64,
) -> Result<ErgodicityReport> {
    let analysis = HyperplaneAnalysis::new(geometry, k, gf, kernel)?;
    let balance = check_detailed_balance(geometry, k, gf, kernel, psi)?;
    Ok(ErgodicityReport {
        side: geometry.side(),
        d: geometry.dim(),
        k,
        m: kernel.m(),
        g_family: gf.family().to_string(),
        hyperplane_size: analysis.index().len(),
        component_count: analysis.component_count(),
        blocked_count: analysis.blocked_count(),
        sigma_star_single_component: analysis.sigma_star_single_component(),
        max_detailed_balance_violation: balance.max_violation,
    })
}
