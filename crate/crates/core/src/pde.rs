//! Explicit finite differences for `∂ₜρ = Δ(Φ(ρ)^m)` on the periodic unit
//! torus. With `m = 1` the same scheme solves the nonlinear heat equation of
//! the zero-range process.
//!
//! The flux `w = Φ(ρ)^m` is read from a monotone cubic Hermite table built
//! once per problem, so no root finding happens inside the time loop.

use crate::grid::GridFunction;
use crate::measures::EquilibriumFamily;
use crate::profile::DensityProfile;
use crate::{Error, Result};

pub const TABLE_KNOTS: usize = 4096;
/// Fraction of the stability bound used by [`solve`].
pub const CFL_FRACTION: f64 = 0.4;
pub const MIN_POINTS: usize = 16;

/// `w(ρ) = Φ(ρ)^e` and `D(ρ) = w'(ρ)` tabulated on a uniform grid of
/// densities.
#[derive(Clone, Debug)]
pub struct FluxTable {
    exponent: u32,
    lo: f64,
    hi: f64,
    step: f64,
    flux: Vec<f64>,
    slope: Vec<f64>,
}

impl FluxTable {
    pub fn new(
        fam: &EquilibriumFamily,
        exponent: u32,
        lo: f64,
        hi: f64,
        knots: usize,
    ) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::param(
                "profile",
                format!("table range [{lo}, {hi}] is not positive"),
            ));
        }
        if exponent == 0 {
            return Err(Error::param("m", "flux exponent must be positive"));
        }
        if knots < 2 {
            return Err(Error::param("knots", "a table needs at least two knots"));
        }
        let step = (hi - lo) / (knots - 1) as f64;
        let mut flux = Vec::with_capacity(knots);
        let mut slope = Vec::with_capacity(knots);
        for i in 0..knots {
            let rho = lo + i as f64 * step;
            let (phi, dphi) = fam.phi_with_derivative(rho)?;
            flux.push(phi.powi(exponent as i32));
            slope.push(f64::from(exponent) * phi.powi(exponent as i32 - 1) * dphi);
        }
        limit_slopes(&flux, &mut slope, step);
        Ok(Self {
            exponent,
            lo,
            hi,
            step,
            flux,
            slope,
        })
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    #[inline]
    fn locate(&self, rho: f64) -> Result<(usize, f64)> {
        if !(rho >= self.lo && rho <= self.hi) {
            return Err(Error::TableRange {
                rho,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let pos = (rho - self.lo) / self.step;
        let i = (pos.floor() as usize).min(self.flux.len() - 2);
        Ok((i, pos - i as f64))
    }

    /// `Φ(ρ)^e` by cubic Hermite interpolation.
    #[inline]
    pub fn flux(&self, rho: f64) -> Result<f64> {
        let (i, s) = self.locate(rho)?;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok(h00 * self.flux[i]
            + h10 * self.step * self.slope[i]
            + h01 * self.flux[i + 1]
            + h11 * self.step * self.slope[i + 1])
    }

    /// `D(ρ) = d/dρ Φ(ρ)^e`, linearly interpolated between knots.
    #[inline]
    pub fn diffusion(&self, rho: f64) -> Result<f64> {
        let (i, s) = self.locate(rho)?;
        Ok((1.0 - s) * self.slope[i] + s * self.slope[i + 1])
    }

    /// True iff the knot values are strictly increasing.
    pub fn is_strictly_increasing(&self) -> bool {
        self.flux.windows(2).all(|w| w[1] > w[0])
    }
}

/// Fritsch–Carlson limiter: keeps the Hermite interpolant monotone on every
/// interval where the data are monotone.
fn limit_slopes(values: &[f64], slopes: &mut [f64], step: f64) {
    for i in 0..values.len() - 1 {
        let secant = (values[i + 1] - values[i]) / step;
        if secant == 0.0 {
            slopes[i] = 0.0;
            slopes[i + 1] = 0.0;
            continue;
        }
        let a = slopes[i] / secant;
        let b = slopes[i + 1] / secant;
        if a < 0.0 {
            slopes[i] = 0.0;
        }
        if b < 0.0 {
            slopes[i + 1] = 0.0;
        }
        let r = a * a + b * b;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            slopes[i] = tau * a * secant;
            slopes[i + 1] = tau * b * secant;
        }
    }
}

/// `∂ₜρ = Δ(Φ(ρ)^m)` on `[0,1)^d` with initial datum bounded in `[δ₀, δ₁]`.
#[derive(Clone, Debug)]
pub struct MpmeProblem {
    fam: EquilibriumFamily,
    m: u32,
    dim: usize,
    initial: DensityProfile,
    horizon: f64,
}

impl MpmeProblem {
    pub fn new(
        fam: EquilibriumFamily,
        m: u32,
        dim: usize,
        initial: DensityProfile,
        horizon: f64,
    ) -> Result<Self> {
        if !(m == 2 || m == 3) {
            return Err(Error::param("m", format!("{m} is not 2 or 3")));
        }
        if dim == 0 || !initial.shape().dim_compatible(dim) {
            return Err(Error::param(
                "d",
                format!("profile does not live in dimension {dim}"),
            ));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::param(
                "t",
                format!("horizon {horizon} must be finite and non-negative"),
            ));
        }
        Ok(Self {
            fam,
            m,
            dim,
            initial,
            horizon,
        })
    }

    pub fn family(&self) -> &EquilibriumFamily {
        &self.fam
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial(&self) -> &DensityProfile {
        &self.initial
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `[δ₀/2, 2δ₁]`.
    pub fn table_range(&self) -> (f64, f64) {
        let (d0, d1) = self.initial.bounds();
        (0.5 * d0, 2.0 * d1)
    }

    pub fn initial_grid(&self, points: usize) -> GridFunction {
        GridFunction::from_shape(self.initial.shape(), self.dim, points)
    }

    pub fn solver(&self) -> Result<Solver> {
        self.solver_with_exponent(self.m)
    }

    /// Solver for the zero-range limit `∂ₜρ = ΔΦ(ρ)`.
    pub fn zero_range_solver(&self) -> Result<Solver> {
        self.solver_with_exponent(1)
    }

    fn solver_with_exponent(&self, exponent: u32) -> Result<Solver> {
        let (lo, hi) = self.table_range();
        Ok(Solver {
            table: FluxTable::new(&self.fam, exponent, lo, hi, TABLE_KNOTS)?,
            horizon: self.horizon,
        })
    }
}

/// Time stepper sharing one flux table across steps.
#[derive(Clone, Debug)]
pub struct Solver {
    table: FluxTable,
    horizon: f64,
}

impl Solver {
    pub fn table(&self) -> &FluxTable {
        &self.table
    }

    /// `h² / (2d·D_max)` for the current grid values.
    pub fn stability_bound(&self, rho: &GridFunction) -> Result<f64> {
        let mut d_max: f64 = 0.0;
        for &r in rho.values() {
            d_max = d_max.max(self.table.diffusion(r)?);
        }
        let h = rho.spacing();
        Ok(if d_max > 0.0 {
            h * h / (2.0 * rho.dim() as f64 * d_max)
        } else {
            f64::INFINITY
        })
    }

    /// One explicit step
    /// `ρ_i ← ρ_i + (Δt/h²) Σ_j (w_{i+e_j} − 2w_i + w_{i−e_j})`.
    pub fn step(&self, rho: &GridFunction, dt: f64) -> Result<GridFunction> {
        let limit = self.stability_bound(rho)?;
        if !(dt >= 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, limit });
        }
        let w: Vec<f64> = rho
            .values()
            .iter()
            .map(|&r| self.table.flux(r))
            .collect::<Result<_>>()?;
        let h = rho.spacing();
        let ratio = dt / (h * h);
        let mut next = rho.clone();
        let points = rho.points();
        let dim = rho.dim();
        let values = next.values_mut();
        for axis in 0..dim {
            let stride = points.pow((dim - 1 - axis) as u32);
            for (i, v) in values.iter_mut().enumerate() {
                let c = (i / stride) % points;
                let up = if c + 1 == points {
                    i + stride - points * stride
                } else {
                    i + stride
                };
                let down = if c == 0 {
                    i + (points - 1) * stride
                } else {
                    i - stride
                };
                *v += ratio * (w[up] - 2.0 * w[i] + w[down]);
            }
        }
        Ok(next)
    }

    /// Integrates from `rho` over a time span `t` with steps of
    /// `CFL_FRACTION` times the stability bound.
    pub fn advance(&self, rho: &GridFunction, t: f64) -> Result<GridFunction> {
        let mut current = rho.clone();
        let mut elapsed = 0.0;
        while elapsed < t {
            let dt = (CFL_FRACTION * self.stability_bound(&current)?).min(t - elapsed);
            current = self.step(&current, dt)?;
            elapsed += dt;
            if t - elapsed <= 1e-14 * t {
                break;
            }
        }
        Ok(current)
    }

    /// Solutions at each of the increasing times `times`, starting from
    /// `rho` at time zero.
    pub fn solve_at(&self, rho: &GridFunction, times: &[f64]) -> Result<Vec<GridFunction>> {
        if rho.points() < MIN_POINTS {
            return Err(Error::param(
                "M",
                format!("grid of {} points is below {MIN_POINTS}", rho.points()),
            ));
        }
        let mut out = Vec::with_capacity(times.len());
        let mut current = rho.clone();
        let mut now = 0.0;
        for &t in times {
            if !(t >= now) || t > self.horizon {
                return Err(Error::param(
                    "t",
                    format!("observation time {t} is not in [{now}, {}]", self.horizon),
                ));
            }
            current = self.advance(&current, t - now)?;
            now = t;
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// One explicit step of the MPME scheme.
pub fn mpme_step(problem: &MpmeProblem, rho: &GridFunction, dt: f64) -> Result<GridFunction> {
    problem.solver()?.step(rho, dt)
}

/// `ρ(t,·)` on an `M^d` grid.
pub fn solve(problem: &MpmeProblem, points: usize, t: f64) -> Result<GridFunction> {
    let solver = problem.solver()?;
    Ok(solver
        .solve_at(&problem.initial_grid(points), &[t])?
        .remove(0))
}

/// Solution of `∂ₜρ = ΔΦ(ρ)` from the same initial datum.
pub fn zero_range_reference(problem: &MpmeProblem, points: usize, t: f64) -> Result<GridFunction> {
    let solver = problem.zero_range_solver()?;
    Ok(solver
        .solve_at(&problem.initial_grid(points), &[t])?
        .remove(0))
}

/// Amplitude of the Fourier mode `cos(2π u_1)` of a grid function.
pub fn first_mode_amplitude(rho: &GridFunction) -> f64 {
    let dim = rho.dim();
    let mut acc = 0.0;
    let mut u = vec![0.0; dim];
    for (i, &v) in rho.values().iter().enumerate() {
        rho.point_into(i, &mut u);
        acc += v * (std::f64::consts::TAU * u[0]).cos();
    }
    2.0 * acc / rho.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::GFunction;

    fn ex1(q: f64) -> EquilibriumFamily {
        EquilibriumFamily::new(GFunction::example1(q).unwrap()).unwrap()
    }

    fn cosine_problem(m: u32, a1: f64, horizon: f64) -> MpmeProblem {
        MpmeProblem::new(
            ex1(1.0),
            m,
            1,
            DensityProfile::cosine(1.0, a1, 1.0, 1).unwrap(),
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn table_matches_closed_form() {
        // Φ(ρ) = ρ/(ρ+q) for the first family
        let table = FluxTable::new(&ex1(1.0), 2, 0.4, 2.4, TABLE_KNOTS).unwrap();
        assert!(table.is_strictly_increasing());
        for i in 0..=200 {
            let rho = 0.4 + 2.0 * i as f64 / 200.0;
            let phi = rho / (rho + 1.0);
            assert!((table.flux(rho).unwrap() - phi * phi).abs() < 1e-12);
            let d = 2.0 * rho / (rho + 1.0).powi(3);
            assert!((table.diffusion(rho).unwrap() - d).abs() < 1e-6);
        }
        assert!(matches!(table.flux(2.5), Err(Error::TableRange { .. })));
        assert!(matches!(table.flux(0.3), Err(Error::TableRange { .. })));
    }

    #[test]
    fn limiter_keeps_monotone_data_monotone() {
        let values = [0.0, 1.0, 1.0, 1.5, 10.0];
        let mut slopes = [5.0, 5.0, 5.0, -1.0, 30.0];
        limit_slopes(&values, &mut slopes, 1.0);
        assert_eq!(slopes[1], 0.0);
        assert_eq!(slopes[2], 0.0);
        assert!(slopes.iter().all(|&s| s >= 0.0));
        for i in 0..4 {
            let secant = values[i + 1] - values[i];
            if secant > 0.0 {
                let (a, b) = (slopes[i] / secant, slopes[i + 1] / secant);
                assert!(a * a + b * b <= 9.0 + 1e-12);
            }
        }
    }

    #[test]
    fn problem_validation() {
        let p = DensityProfile::constant(1.0).unwrap();
        assert!(MpmeProblem::new(ex1(1.0), 4, 1, p.clone(), 1.0).is_err());
        assert!(MpmeProblem::new(ex1(1.0), 2, 1, p.clone(), -1.0).is_err());
        let cos2 = DensityProfile::cosine(1.0, 0.2, 1.0, 2).unwrap();
        assert!(MpmeProblem::new(ex1(1.0), 2, 1, cos2, 1.0).is_err());
    }

    #[test]
    fn constant_profile_is_a_fixed_point() {
        let p =
            MpmeProblem::new(ex1(1.0), 2, 1, DensityProfile::constant(1.3).unwrap(), 0.1).unwrap();
        let rho = solve(&p, 32, 0.1).unwrap();
        assert!(rho.values().iter().all(|&v| (v - 1.3).abs() < 1e-14));
        let z = zero_range_reference(&p, 32, 0.1).unwrap();
        assert!(z.values().iter().all(|&v| (v - 1.3).abs() < 1e-14));
    }

    #[test]
    fn step_conserves_mass_and_obeys_the_maximum_principle() {
        let p = cosine_problem(2, 0.2, 0.1);
        let solver = p.solver().unwrap();
        let rho = p.initial_grid(64);
        let dt = 0.9 * solver.stability_bound(&rho).unwrap();
        let next = mpme_step(&p, &rho, dt).unwrap();
        assert!((next.integral() - rho.integral()).abs() <= 1e-12 * rho.integral());
        assert!(next.max() < rho.max());
        assert!(next.min() > rho.min());
        assert!(matches!(
            solver.step(&rho, 2.0 * dt),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn bounds_and_mass_along_the_solution() {
        let p = cosine_problem(3, 0.4, 0.05);
        let solver = p.solver().unwrap();
        let mut rho = p.initial_grid(64);
        let mass = rho.integral();
        let (lo, hi) = p.initial().bounds();
        for _ in 0..500 {
            let dt = CFL_FRACTION * solver.stability_bound(&rho).unwrap();
            let next = solver.step(&rho, dt).unwrap();
            assert!((next.integral() - mass).abs() <= 1e-12 * mass);
            assert!(next.min() >= rho.min() - 1e-15 && next.max() <= rho.max() + 1e-15);
            assert!(next.min() >= lo && next.max() <= hi);
            rho = next;
        }
    }

    #[test]
    fn self_convergence_is_second_order() {
        let p = cosine_problem(2, 0.2, 0.05);
        let solver = p.solver().unwrap();
        let at = |m: usize| {
            solver
                .solve_at(&p.initial_grid(m), &[0.05])
                .unwrap()
                .remove(0)
        };
        let (r64, r128, r256) = (at(64), at(128), at(256));
        let e1 = r64.l1_distance(&r128.restrict(2).unwrap()).unwrap();
        let e2 = r128.l1_distance(&r256.restrict(2).unwrap()).unwrap();
        let order = (e1 / e2).log2();
        assert!(order >= 1.8, "order {order}");
    }

    #[test]
    fn zero_range_cosine_mode_decays_at_the_linear_rate() {
        let p = cosine_problem(2, 0.05, 0.05);
        let t = 0.05;
        let rho = zero_range_reference(&p, 256, t).unwrap();
        let measured = -(first_mode_amplitude(&rho) / 0.05).ln() / t;
        // Φ'(1) = q/(1+q)² = 1/4
        let expected = 4.0 * std::f64::consts::PI.powi(2) * 0.25;
        assert!(
            (measured / expected - 1.0).abs() < 0.05,
            "{measured} vs {expected}"
        );
    }

    #[test]
    fn time_zero_returns_the_sampled_initial_profile() {
        let p = cosine_problem(2, 0.2, 0.05);
        assert_eq!(solve(&p, 64, 0.0).unwrap(), p.initial_grid(64));
        assert!(solve(&p, 8, 0.0).is_err());
        assert!(solve(&p, 64, 0.06).is_err());
    }
}
