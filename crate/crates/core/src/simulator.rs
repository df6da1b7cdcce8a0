//! Event-driven kinetic Monte Carlo for the generator
//! `L_N f(η) = Σ c(x,y,η) g(η(x)) [f(η^{x,y}) − f(η)]`, run under diffusive
//! scaling: macroscopic time `t` corresponds to microscopic time `N² t`.
//!
//! Every directed bond `(x, axis, ±)` is a leaf of a binary partial-sum tree,
//! so selecting the next jump and updating a rate are both `O(log N^d)`.
//! After a jump only the bonds whose constraint stencil reads `x` or `y` are
//! recomputed.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Mollifier;
use crate::lattice::{Configuration, Site, TorusGeometry};
use crate::rates::{directed_rate_raw, GFunction, Kernel};
use crate::{Error, Result};

/// Events between full rebuilds of the rate table.
pub const REBUILD_INTERVAL: u64 = 1_000_000;

/// Binary tree of partial sums over a fixed number of non-negative leaves.
#[derive(Clone, Debug)]
pub struct SumTree {
    leaves: usize,
    len: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(values: &[f64]) -> Self {
        let leaves = values.len().max(1).next_power_of_two();
        let mut nodes = vec![0.0; 2 * leaves];
        nodes[leaves..leaves + values.len()].copy_from_slice(values);
        let mut tree = Self {
            leaves,
            len: values.len(),
            nodes,
        };
        tree.rebuild();
        tree
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rebuild(&mut self) {
        for i in (1..self.leaves).rev() {
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Sets leaf `i`; parents are recomputed from their children so the
    /// stored sums never drift from the leaves.
    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        let mut node = self.leaves + i;
        self.nodes[node] = value;
        node >>= 1;
        while node >= 1 {
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
            node >>= 1;
        }
    }

    /// Leaf whose cumulative interval contains `target ∈ [0, total)`. Leaves
    /// with zero weight are never returned.
    #[inline]
    pub fn find(&self, mut target: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = self.nodes[2 * node];
            if target < left || self.nodes[2 * node + 1] == 0.0 {
                node *= 2;
            } else {
                target -= left;
                node = 2 * node + 1;
            }
        }
        node - self.leaves
    }
}

/// Rates of every directed bond, indexed `site·2d + 2·axis + (0 forward, 1
/// backward)`.
#[derive(Clone, Debug)]
pub struct RateTable {
    dirs: usize,
    tree: SumTree,
}

impl RateTable {
    fn build(gf: &GFunction, kernel: Kernel, config: &Configuration) -> Self {
        let geometry = config.geometry();
        let dirs = 2 * geometry.dim();
        let mut values = vec![0.0; geometry.site_count() * dirs];
        for x in 0..geometry.site_count() {
            for axis in 0..geometry.dim() {
                for (slot, dir) in [(0, 1), (1, -1)] {
                    values[x * dirs + 2 * axis + slot] =
                        directed_rate_raw(gf, kernel, geometry, config.occupancy(), x, axis, dir);
                }
            }
        }
        Self {
            dirs,
            tree: SumTree::new(&values),
        }
    }

    /// Total exit rate `Λ`.
    pub fn total(&self) -> f64 {
        self.tree.total()
    }

    pub fn rate(&self, x: Site, axis: usize, direction: isize) -> f64 {
        self.tree
            .get(x * self.dirs + 2 * axis + usize::from(direction < 0))
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn leaf(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    fn decode(&self, leaf: usize) -> (Site, usize, isize) {
        let x = leaf / self.dirs;
        let r = leaf % self.dirs;
        (x, r / 2, if r.is_multiple_of(2) { 1 } else { -1 })
    }
}

/// One jump of a particle from `from` to `to`, after a holding time `dt`
/// in microscopic units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub from: Site,
    pub to: Site,
    pub dt: f64,
}

/// Callback fired on the macroscopic observation grid.
pub trait Observer {
    fn observe(&mut self, t_macro: f64, state: &SimState<'_>);
}

impl<F: FnMut(f64, &SimState<'_>)> Observer for F {
    fn observe(&mut self, t_macro: f64, state: &SimState<'_>) {
        self(t_macro, state)
    }
}

/// Per-site or per-gridpoint quantity recorded by [`CsvObserver`].
#[derive(Clone, Debug)]
pub enum Recorded {
    Occupation,
    G,
    Mollified(Mollifier),
}

impl Recorded {
    pub fn name(&self) -> &'static str {
        match self {
            Recorded::Occupation => "eta",
            Recorded::G => "g",
            Recorded::Mollified(_) => "rho",
        }
    }
}

/// Streams `seed,t_macro,site_or_gridpoint,value` rows. Write failures are
/// kept and reported by [`CsvObserver::finish`].
pub struct CsvObserver<W: Write> {
    out: W,
    recorded: Recorded,
    error: Option<std::io::Error>,
}

impl<W: Write> CsvObserver<W> {
    pub fn new(mut out: W, recorded: Recorded) -> Result<Self> {
        writeln!(out, "seed,t_macro,site_or_gridpoint,value")?;
        Ok(Self {
            out,
            recorded,
            error: None,
        })
    }

    fn write_rows(&mut self, t_macro: f64, state: &SimState<'_>) -> std::io::Result<()> {
        let seed = state.seed();
        let config = state.config();
        match &self.recorded {
            Recorded::Occupation => {
                for (x, &k) in config.occupancy().iter().enumerate() {
                    writeln!(self.out, "{seed},{t_macro},{x},{k}")?;
                }
            }
            Recorded::G => {
                for (x, &k) in config.occupancy().iter().enumerate() {
                    writeln!(self.out, "{seed},{t_macro},{x},{}", state.g().value(k))?;
                }
            }
            Recorded::Mollified(mollifier) => {
                let grid = mollifier
                    .apply(config)
                    .map_err(|e| std::io::Error::other(e.to_string()))?;
                for (i, v) in grid.values().iter().enumerate() {
                    writeln!(self.out, "{seed},{t_macro},{i},{v}")?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> Observer for CsvObserver<W> {
    fn observe(&mut self, t_macro: f64, state: &SimState<'_>) {
        if self.error.is_none() {
            if let Err(e) = self.write_rows(t_macro, state) {
                self.error = Some(e);
            }
        }
    }
}

pub struct SimState<'a> {
    gf: &'a GFunction,
    kernel: Kernel,
    config: Configuration,
    rates: RateTable,
    micro_time: f64,
    scale: f64,
    rng: ChaCha8Rng,
    seed: u64,
    events: u64,
    since_rebuild: u64,
    pending: Option<f64>,
    g_total: f64,
}

impl<'a> SimState<'a> {
    /// Builds the full rate table for `config`. Rejects tori on which the
    /// kernel stencil overlaps itself, occupancies beyond the `g` table and
    /// `g` families without a bounded-growth witness.
    pub fn new(
        gf: &'a GFunction,
        kernel: Kernel,
        config: Configuration,
        seed: u64,
    ) -> Result<Self> {
        let geometry = config.geometry();
        if geometry.side() < kernel.min_side() {
            return Err(Error::InvalidGeometry(format!(
                "side {} is below {} required by the {kernel} kernel",
                geometry.side(),
                kernel.min_side()
            )));
        }
        let exponent = kernel.m().max(2) as i32;
        if !gf.has_bounded_growth(exponent) {
            return Err(Error::param(
                "g",
                format!("g(k)^{exponent}/k is not bounded on the tabulated range"),
            ));
        }
        if let Some((site, &occupancy)) = config
            .occupancy()
            .iter()
            .enumerate()
            .find(|(_, &k)| k as usize > gf.cap())
        {
            return Err(Error::OccupancyCap {
                site,
                occupancy,
                cap: gf.cap(),
            });
        }
        let rates = RateTable::build(gf, kernel, &config);
        let g_total = config.occupancy().iter().map(|&k| gf.value(k)).sum();
        let side = geometry.side() as f64;
        Ok(Self {
            gf,
            kernel,
            config,
            rates,
            micro_time: 0.0,
            scale: side * side,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            events: 0,
            since_rebuild: 0,
            pending: None,
            g_total,
        })
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn into_config(self) -> Configuration {
        self.config
    }

    pub fn geometry(&self) -> &TorusGeometry {
        self.config.geometry()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn g(&self) -> &GFunction {
        self.gf
    }

    pub fn rates(&self) -> &RateTable {
        &self.rates
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.total()
    }

    pub fn micro_time(&self) -> f64 {
        self.micro_time
    }

    pub fn macro_time(&self) -> f64 {
        self.micro_time / self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    /// `Σ_x g(η(x))`, maintained incrementally.
    pub fn g_total(&self) -> f64 {
        self.g_total
    }

    pub fn is_blocked(&self) -> bool {
        self.rates.total() <= 0.0
    }

    /// Performs the next jump regardless of any horizon. `Ok(None)` means the
    /// configuration is blocked.
    pub fn step(&mut self) -> Result<Option<Event>> {
        self.next_event(f64::INFINITY)
    }

    /// Next jump if it happens no later than `horizon` (microscopic time);
    /// otherwise the clock is moved to `horizon` and `None` is returned. The
    /// drawn holding time is kept, so the trajectory does not depend on
    /// where it is interrupted.
    fn next_event(&mut self, horizon: f64) -> Result<Option<Event>> {
        let total = self.rates.total();
        if total <= 0.0 {
            self.pending = None;
            if horizon.is_finite() {
                self.micro_time = self.micro_time.max(horizon);
            }
            return Ok(None);
        }
        let start = self.micro_time;
        let next = match self.pending {
            Some(t) => t,
            None => {
                let u: f64 = self.rng.random();
                let t = start - (1.0 - u).ln() / total;
                self.pending = Some(t);
                t
            }
        };
        if next > horizon {
            self.micro_time = horizon;
            return Ok(None);
        }
        self.pending = None;
        self.micro_time = next;
        let target = self.rng.random::<f64>() * total;
        let leaf = self.rates.tree.find(target);
        let (from, axis, dir) = self.rates.decode(leaf);
        let to = self.config.geometry().offset(from, axis, dir);
        self.apply(from, to, axis, dir)?;
        Ok(Some(Event {
            from,
            to,
            dt: next - start,
        }))
    }

    fn apply(&mut self, from: Site, to: Site, axis: usize, direction: isize) -> Result<()> {
        let (k_from, k_to) = (self.config.get(from), self.config.get(to));
        if k_to as usize + 1 > self.gf.cap() {
            return Err(Error::OccupancyCap {
                site: to,
                occupancy: k_to + 1,
                cap: self.gf.cap(),
            });
        }
        self.config.move_particle(from, to);
        self.g_total += self.gf.value(k_from - 1) - self.gf.value(k_from) + self.gf.value(k_to + 1)
            - self.gf.value(k_to);
        self.refresh_after_jump(from, to, axis, direction);
        self.events += 1;
        self.since_rebuild += 1;
        if self.since_rebuild >= REBUILD_INTERVAL {
            self.rebuild();
        }
        Ok(())
    }

    /// Recomputes every directed bond whose rate reads `from` or `to`. The
    /// rate of a bond at `z` along `axis` reads only sites `z + o·e_axis`
    /// with `|o| ≤ update_reach`.
    fn refresh_after_jump(&mut self, from: Site, to: Site, axis: usize, direction: isize) {
        let reach = self.kernel.update_reach() as isize;
        let side = self.config.geometry().side();
        // along the jump axis the two stencils form one window of 2·reach+2 sites
        let left = if direction > 0 { from } else { to };
        let width = (2 * reach as usize + 2).min(side);
        let mut z = self.config.geometry().offset(left, axis, -reach);
        for _ in 0..width {
            self.refresh_site(z, axis);
            z = self.config.geometry().offset(z, axis, 1);
        }
        for other in 0..self.config.geometry().dim() {
            if other == axis {
                continue;
            }
            for s in [from, to] {
                for o in -reach..=reach {
                    let z = self.config.geometry().offset(s, other, o);
                    self.refresh_site(z, other);
                }
            }
        }
    }

    #[inline]
    fn refresh_site(&mut self, z: Site, axis: usize) {
        let geometry = self.config.geometry();
        let dirs = self.rates.dirs;
        for (slot, dir) in [(0usize, 1isize), (1, -1)] {
            let rate = directed_rate_raw(
                self.gf,
                self.kernel,
                geometry,
                self.config.occupancy(),
                z,
                axis,
                dir,
            );
            let leaf = z * dirs + 2 * axis + slot;
            if self.rates.tree.get(leaf) != rate {
                self.rates.tree.set(leaf, rate);
            }
        }
    }

    /// Recomputes every rate and `Σ g(η(x))` from scratch.
    pub fn rebuild(&mut self) {
        self.rates = RateTable::build(self.gf, self.kernel, &self.config);
        self.g_total = self
            .config
            .occupancy()
            .iter()
            .map(|&k| self.gf.value(k))
            .sum();
        self.since_rebuild = 0;
    }

    /// Largest difference between the stored rates and a from-scratch
    /// rebuild.
    pub fn max_rate_discrepancy(&self) -> f64 {
        let fresh = RateTable::build(self.gf, self.kernel, &self.config);
        (0..fresh.len())
            .map(|i| (fresh.leaf(i) - self.rates.leaf(i)).abs())
            .fold(0.0, f64::max)
    }

    /// Runs until microscopic time `horizon`, calling `on_hold(state, dt)`
    /// before every event (and for the final partial interval) with the time
    /// spent in the current configuration.
    pub fn run_until_micro_with<F>(&mut self, horizon: f64, mut on_hold: F) -> Result<()>
    where
        F: FnMut(&SimState<'a>, f64),
    {
        loop {
            let before = self.micro_time;
            let next = self.peek_next_time();
            if next > horizon {
                on_hold(self, horizon - before);
                self.next_event(horizon)?;
                return Ok(());
            }
            on_hold(self, next - before);
            self.next_event(horizon)?;
        }
    }

    fn peek_next_time(&mut self) -> f64 {
        let total = self.rates.total();
        if total <= 0.0 {
            return f64::INFINITY;
        }
        match self.pending {
            Some(t) => t,
            None => {
                let u: f64 = self.rng.random();
                let t = self.micro_time - (1.0 - u).ln() / total;
                self.pending = Some(t);
                t
            }
        }
    }

    /// Advances to macroscopic time `t` without observers.
    pub fn advance_to_macro(&mut self, t: f64) -> Result<()> {
        let horizon = t * self.scale;
        while self.next_event(horizon)?.is_some() {}
        Ok(())
    }

    /// Advances to macroscopic time `t`, firing every observer at the grid
    /// times `k·Δ` (from the current time up to and including `t`).
    pub fn run_until_macro(
        &mut self,
        t: f64,
        grid_step: f64,
        observers: &mut [&mut dyn Observer],
    ) -> Result<()> {
        if !(grid_step > 0.0) {
            return Err(Error::param("dt", "observer grid step must be positive"));
        }
        let now = self.macro_time();
        if t < now {
            return Err(Error::param(
                "t",
                format!("target time {t} is before the current time {now}"),
            ));
        }
        for time in observation_grid(now, t, grid_step) {
            self.advance_to_macro(time)?;
            for obs in observers.iter_mut() {
                obs.observe(time, self);
            }
        }
        self.advance_to_macro(t)
    }
}

/// Grid points `k·Δ` in `[start, end]`, with `end` itself always included.
pub fn observation_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let tol = 1e-9 * step;
    let mut times = Vec::new();
    let mut k = (start / step - 1e-9).ceil().max(0.0) as u64;
    loop {
        let t = k as f64 * step;
        if t > end + tol {
            break;
        }
        times.push(t.min(end));
        k += 1;
    }
    if times.last().is_none_or(|&last| (last - end).abs() > tol) {
        times.push(end);
    }
    times
}

/// Convenience constructor mirroring [`SimState::new`].
pub fn init_sim<'a>(
    gf: &'a GFunction,
    kernel: Kernel,
    config: Configuration,
    seed: u64,
) -> Result<SimState<'a>> {
    SimState::new(gf, kernel, config, seed)
}

/// True iff every directed bond has rate zero.
pub fn is_blocked_config(gf: &GFunction, kernel: Kernel, config: &Configuration) -> bool {
    let geometry = config.geometry();
    (0..geometry.site_count()).all(|x| {
        config.get(x) == 0
            || (0..geometry.dim()).all(|axis| {
                [1, -1].iter().all(|&dir| {
                    directed_rate_raw(gf, kernel, geometry, config.occupancy(), x, axis, dir) == 0.0
                })
            })
    })
}

/// Pairs of offsets that must both be occupied (besides the jumping site)
/// for some jump out of a one-dimensional site to be possible.
fn unblocking_patterns(kernel: Kernel) -> &'static [&'static [isize]] {
    match kernel {
        Kernel::ZeroRange => &[&[]],
        // c(x,x+1) needs x−1 or x+2; c(x−1,x) needs x+1 or x−2
        Kernel::Quadratic => &[&[-1], &[2], &[1], &[-2]],
        Kernel::Cubic => &[&[-1, 2], &[-2, -1], &[2, 3], &[-2, 1], &[-3, -2], &[1, 2]],
    }
}

/// Combinatorial blocking criterion in one dimension, independent of the
/// values of `g`: for m=2 a configuration is blocked iff no two nonempty
/// sites lie at distance one or two.
pub fn blocked_by_occupation_pattern(kernel: Kernel, config: &Configuration) -> Result<bool> {
    let geometry = config.geometry();
    if geometry.dim() != 1 {
        return Err(Error::InvalidGeometry(
            "the occupation-pattern criterion is one-dimensional".into(),
        ));
    }
    let occupied = |x: Site, o: isize| config.get(geometry.offset(x, 0, o)) > 0;
    let mobile = (0..geometry.site_count()).any(|x| {
        config.get(x) > 0
            && unblocking_patterns(kernel)
                .iter()
                .any(|pattern| pattern.iter().all(|&o| occupied(x, o)))
    });
    Ok(!mobile)
}

/// Some `x` whose unit hypercube `Q_x = {x + Σ_{j∈S} e_j}` is fully occupied.
pub fn find_mobile_cluster(config: &Configuration) -> Option<Site> {
    let geometry = config.geometry();
    (0..geometry.site_count()).find(|&x| hypercube_occupied(config, x))
}

pub fn hypercube_occupied(config: &Configuration, x: Site) -> bool {
    let geometry = config.geometry();
    let dim = geometry.dim();
    (0..(1usize << dim)).all(|corner| {
        let y = (0..dim).fold(x, |y, axis| {
            if (corner >> axis) & 1 == 1 {
                geometry.offset(y, axis, 1)
            } else {
                y
            }
        });
        config.get(y) > 0
    })
}

/// True iff the ℓ∞ box of radius `l` around `centre` contains a fully
/// occupied unit hypercube lying entirely inside the box.
pub fn box_contains_mobile_cluster(config: &Configuration, centre: Site, l: usize) -> bool {
    let geometry = config.geometry();
    let dim = geometry.dim();
    let width = 2 * l;
    let corners = width.pow(dim as u32);
    (0..corners).any(|c| {
        let mut rest = c;
        let mut x = centre;
        for axis in 0..dim {
            let step = (rest % width) as isize - l as isize;
            rest /= width;
            x = geometry.offset(x, axis, step);
        }
        hypercube_occupied(config, x)
    })
}

/// Seeded generator used for the dynamics of trajectory `seed`.
pub fn dynamics_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded generator for initial-condition sampling, on a stream disjoint
/// from [`dynamics_rng`].
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(occ: Vec<u32>) -> Configuration {
        let n = occ.len();
        Configuration::new(TorusGeometry::new(1, n).unwrap(), occ).unwrap()
    }

    #[test]
    fn sum_tree_selection() {
        let mut tree = SumTree::new(&[1.0, 0.0, 2.0, 0.0, 3.0]);
        assert_eq!(tree.total(), 6.0);
        assert_eq!(tree.find(0.5), 0);
        assert_eq!(tree.find(1.0), 2);
        assert_eq!(tree.find(2.999), 2);
        assert_eq!(tree.find(3.0), 4);
        assert_eq!(tree.find(5.999_999), 4);
        tree.set(4, 0.0);
        assert_eq!(tree.total(), 3.0);
        // a target at the very top never lands on a zero leaf
        assert_eq!(tree.find(3.0), 2);
    }

    #[test]
    fn init_examples() {
        let gf = GFunction::example1(1.0).unwrap();
        let empty = SimState::new(&gf, Kernel::Quadratic, ring(vec![0; 8]), 1).unwrap();
        assert_eq!(empty.total_rate(), 0.0);
        let mut single = vec![0; 8];
        single[3] = 5;
        let s = SimState::new(&gf, Kernel::Quadratic, ring(single), 1).unwrap();
        assert_eq!(s.total_rate(), 0.0);
        let ones = SimState::new(&gf, Kernel::Quadratic, ring(vec![1; 8]), 1).unwrap();
        assert_eq!(ones.total_rate(), 32.0);
        for x in 0..8 {
            assert_eq!(ones.rates().rate(x, 0, 1), 2.0);
            assert_eq!(ones.rates().rate(x, 0, -1), 2.0);
        }
    }

    #[test]
    fn init_rejections() {
        let gf = GFunction::example1(1.0).unwrap();
        assert!(SimState::new(&gf, Kernel::Quadratic, ring(vec![1; 4]), 1).is_err());
        assert!(SimState::new(&gf, Kernel::Cubic, ring(vec![1; 6]), 1).is_err());
        let small = GFunction::with_cap(gf.family().clone(), 10).unwrap();
        let mut occ = vec![0; 8];
        occ[0] = 11;
        assert!(matches!(
            SimState::new(&small, Kernel::Quadratic, ring(occ), 1),
            Err(Error::OccupancyCap { .. })
        ));
        let linear = GFunction::tabulated((0..100).map(f64::from).collect()).unwrap();
        assert!(SimState::new(&linear, Kernel::Quadratic, ring(vec![1; 8]), 1).is_err());
    }

    #[test]
    fn blocked_state_is_terminal() {
        let gf = GFunction::example1(1.0).unwrap();
        let mut occ = vec![0; 8];
        occ[0] = 1;
        occ[4] = 2;
        let mut s = SimState::new(&gf, Kernel::Quadratic, ring(occ), 1).unwrap();
        assert!(s.is_blocked());
        assert_eq!(s.step().unwrap(), None);
        s.advance_to_macro(0.5).unwrap();
        assert_eq!(s.event_count(), 0);
        assert!((s.macro_time() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blocking_examples() {
        let gf = GFunction::example1(1.0).unwrap();
        let mut far = vec![0; 8];
        far[0] = 1;
        far[4] = 1;
        let far = ring(far);
        assert!(is_blocked_config(&gf, Kernel::Quadratic, &far));
        assert!(blocked_by_occupation_pattern(Kernel::Quadratic, &far).unwrap());
        let mut near = vec![0; 8];
        near[0] = 1;
        near[2] = 1;
        let near = ring(near);
        assert!(!is_blocked_config(&gf, Kernel::Quadratic, &near));
        assert!(!blocked_by_occupation_pattern(Kernel::Quadratic, &near).unwrap());
        let empty = ring(vec![0; 8]);
        assert!(is_blocked_config(&gf, Kernel::Quadratic, &empty));
        // two adjacent particles: mobile for m=2, stuck for m=3
        let mut pair = vec![0; 8];
        pair[0] = 1;
        pair[1] = 1;
        let pair = ring(pair);
        assert!(!is_blocked_config(&gf, Kernel::Quadratic, &pair));
        assert!(is_blocked_config(&gf, Kernel::Cubic, &pair));
        assert!(blocked_by_occupation_pattern(Kernel::Cubic, &pair).unwrap());
    }

    #[test]
    fn mobile_cluster_examples() {
        let geom = TorusGeometry::new(2, 5).unwrap();
        let mut c = Configuration::empty(geom.clone());
        for coords in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            c.set(geom.site_at(&coords).unwrap(), 1);
        }
        assert_eq!(find_mobile_cluster(&c), Some(0));
        let gf = GFunction::example1(1.0).unwrap();
        assert!(!is_blocked_config(&gf, Kernel::Quadratic, &c));
        let alternating = ring(vec![1, 0, 1, 0, 1, 0]);
        assert_eq!(find_mobile_cluster(&alternating), None);
        assert!(box_contains_mobile_cluster(
            &c,
            geom.site_at(&[1, 1]).unwrap(),
            1
        ));
        assert!(!box_contains_mobile_cluster(
            &c,
            geom.site_at(&[3, 3]).unwrap(),
            1
        ));
    }

    #[test]
    fn conservation_and_incremental_rates() {
        for kernel in [Kernel::Quadratic, Kernel::Cubic, Kernel::ZeroRange] {
            for gf in [
                GFunction::example1(1.0).unwrap(),
                GFunction::example3(0.5).unwrap(),
            ] {
                if !gf.has_bounded_growth(kernel.m().max(2) as i32) {
                    continue;
                }
                let occ: Vec<u32> = (0..60).map(|i| ((i * 37 + 11) % 7 % 4) as u32).collect();
                let config = ring(occ);
                let total = config.total();
                let mut s = SimState::new(&gf, kernel, config, 42).unwrap();
                for _ in 0..10_000 {
                    if s.step().unwrap().is_none() {
                        break;
                    }
                    assert_eq!(s.config().total(), total);
                }
                assert!(s.max_rate_discrepancy() <= 1e-9, "{kernel}");
                let direct: f64 = s.config().occupancy().iter().map(|&k| gf.value(k)).sum();
                assert!((s.g_total() - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_dimensional_incremental_rates() {
        let gf = GFunction::example3(0.5).unwrap();
        let geom = TorusGeometry::new(2, 9).unwrap();
        let occ: Vec<u32> = (0..81).map(|i| ((i * 13 + 5) % 5 % 3) as u32).collect();
        let mut s = SimState::new(
            &gf,
            Kernel::Quadratic,
            Configuration::new(geom, occ).unwrap(),
            9,
        )
        .unwrap();
        for _ in 0..10_000 {
            if s.step().unwrap().is_none() {
                break;
            }
        }
        assert!(s.max_rate_discrepancy() <= 1e-9);
    }

    #[test]
    fn determinism_and_interruption_independence() {
        let gf = GFunction::example1(1.0).unwrap();
        let config = ring((0..32).map(|i| (i % 3) as u32).collect());
        let run = |grid: f64| {
            let mut s = SimState::new(&gf, Kernel::Quadratic, config.clone(), 7).unwrap();
            let mut times = Vec::new();
            let mut obs = |t: f64, st: &SimState<'_>| times.push((t, st.event_count()));
            s.run_until_macro(0.05, grid, &mut [&mut obs]).unwrap();
            (s.into_config(), times)
        };
        let (a, ta) = run(0.01);
        let (b, tb) = run(0.01);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 6);
        let (c, _) = run(0.002);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_horizon_makes_no_events() {
        let gf = GFunction::example1(1.0).unwrap();
        let mut s = SimState::new(&gf, Kernel::Quadratic, ring(vec![1; 16]), 3).unwrap();
        s.advance_to_macro(0.0).unwrap();
        assert_eq!(s.event_count(), 0);
        s.advance_to_macro(0.01).unwrap();
        assert!(s.event_count() > 0);
        assert!(s.run_until_macro(0.001, 0.001, &mut []).is_err());
    }

    #[test]
    fn observation_grid_points() {
        assert_eq!(observation_grid(0.0, 0.1, 0.05), vec![0.0, 0.05, 0.1]);
        let g = observation_grid(0.0, 0.1, 0.03);
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 0.1);
        assert_eq!(observation_grid(0.02, 0.05, 0.02), vec![0.02, 0.04, 0.05]);
    }

    #[test]
    fn holding_time_integration_covers_the_horizon() {
        let gf = GFunction::example1(1.0).unwrap();
        let mut s = SimState::new(&gf, Kernel::Quadratic, ring(vec![1; 16]), 3).unwrap();
        let mut elapsed = 0.0;
        s.run_until_micro_with(5.0, |_, dt| elapsed += dt).unwrap();
        assert!((elapsed - 5.0).abs() < 1e-12);
        assert_eq!(s.micro_time(), 5.0);
    }

    proptest! {
        #[test]
        fn perturbation_changes_only_stencil_rates(
            occ in prop::collection::vec(0u32..3, 15),
            site in 0usize..15,
            kernel_m in 2u32..=3,
        ) {
            let gf = GFunction::example3(1.0 / 3.0).unwrap();
            let kernel = Kernel::from_m(kernel_m).unwrap();
            let c = ring(occ);
            let a = SimState::new(&gf, kernel, c.clone(), 0).unwrap();
            let mut p = c.clone();
            p.set(site, c.get(site) + 1);
            let b = SimState::new(&gf, kernel, p, 0).unwrap();
            let reach = kernel.update_reach() as isize;
            for x in 0..15usize {
                let d = (x as isize - site as isize).rem_euclid(15);
                let dist = d.min(15 - d);
                if dist > reach {
                    for dir in [1, -1] {
                        prop_assert_eq!(a.rates().rate(x, 0, dir), b.rates().rate(x, 0, dir));
                    }
                }
            }
        }
    }
}
