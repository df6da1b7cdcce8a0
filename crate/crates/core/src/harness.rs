//! Ensemble experiments: hydrodynamic convergence of the empirical density
//! towards the PDE solution, conservation of local equilibrium, the
//! zero-range control and stationarity under the product measures.
//!
//! Trajectory `i` of an ensemble uses seed `base_seed + i` both for its
//! initial configuration and its dynamics (on disjoint generator streams).
//! Results are collected in seed order, so reports do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridFunction, Mollifier};
use crate::lattice::{Configuration, TorusGeometry};
use crate::measures::{EquilibriumFamily, ProductSampler};
use crate::pde::MpmeProblem;
use crate::profile::{DensityProfile, ProfileShape};
use crate::rates::{p_raw, q_raw, GFunction, Kernel};
use crate::simulator::{box_contains_mobile_cluster, sampling_rng, SimState};
use crate::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 256;
pub const DEFAULT_SEEDS: usize = 200;

/// Default mollifier half-width `2/√N`.
pub fn default_width(side: usize) -> f64 {
    2.0 / (side as f64).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub g: GFunction,
    pub kernel: Kernel,
    pub dim: usize,
    pub sides: Vec<usize>,
    pub profile: DensityProfile,
    pub horizon: f64,
    /// Increasing observation times in `[0, horizon]`.
    pub times: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    /// Fixed mollifier half-width; `None` selects [`default_width`] per side.
    pub width: Option<f64>,
    pub grid_points: usize,
}

impl ExperimentPlan {
    pub fn new(
        g: GFunction,
        kernel: Kernel,
        dim: usize,
        sides: Vec<usize>,
        profile: DensityProfile,
        times: Vec<f64>,
    ) -> Result<Self> {
        let horizon = times.iter().copied().fold(0.0, f64::max);
        let plan = Self {
            g,
            kernel,
            dim,
            sides,
            profile,
            horizon,
            times,
            seeds: DEFAULT_SEEDS,
            base_seed: 0,
            width: None,
            grid_points: DEFAULT_GRID_POINTS,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.profile.shape().dim_compatible(self.dim) {
            return Err(Error::param(
                "d",
                format!("profile does not live in dimension {}", self.dim),
            ));
        }
        if self.sides.is_empty() {
            return Err(Error::param("N", "at least one lattice size is required"));
        }
        for &side in &self.sides {
            if side < self.kernel.min_side() {
                return Err(Error::param(
                    "N",
                    format!(
                        "side {side} is below {} required by the {} kernel",
                        self.kernel.min_side(),
                        self.kernel
                    ),
                ));
            }
            let width = self.width_for(side);
            if !(width >= 1.0 / side as f64) {
                return Err(Error::param(
                    "w",
                    format!("width {width} is below the lattice spacing 1/{side}"),
                ));
            }
        }
        let (lower, _) = self.profile.bounds();
        if !(lower > 0.0) {
            return Err(Error::param(
                "profile",
                "density must be bounded away from zero",
            ));
        }
        if self.times.is_empty()
            || self.times.windows(2).any(|w| !(w[1] > w[0]))
            || self.times[0] < 0.0
        {
            return Err(Error::param(
                "t",
                "observation times must be non-negative and increasing",
            ));
        }
        if self.times.iter().any(|&t| t > self.horizon) {
            return Err(Error::param("t", "observation time beyond the horizon"));
        }
        if self.seeds == 0 {
            return Err(Error::param(
                "seeds",
                "ensemble must contain at least one trajectory",
            ));
        }
        if self.grid_points < crate::pde::MIN_POINTS {
            return Err(Error::param(
                "M",
                format!("grid must have at least {} points", crate::pde::MIN_POINTS),
            ));
        }
        Ok(())
    }

    pub fn width_for(&self, side: usize) -> f64 {
        self.width.unwrap_or_else(|| default_width(side))
    }

    fn family(&self) -> Result<EquilibriumFamily> {
        EquilibriumFamily::new(self.g.clone())
    }

    /// PDE problem whose MPME exponent is that of the plan's kernel; the
    /// zero-range kernel is compared against the m=2 equation.
    fn problem(&self) -> Result<MpmeProblem> {
        let m = match self.kernel {
            Kernel::Cubic => 3,
            _ => 2,
        };
        MpmeProblem::new(
            self.family()?,
            m,
            self.dim,
            self.profile.clone(),
            self.horizon,
        )
    }
}

/// Configurations of one trajectory at the observation times.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub initial_density: f64,
    pub snapshots: Vec<Configuration>,
    pub events: u64,
    pub blocked: bool,
}

/// Samples `seeds` initial configurations from the slowly varying product
/// measure and runs each under `kernel` through the observation times.
pub fn run_ensemble(
    plan: &ExperimentPlan,
    side: usize,
    kernel: Kernel,
) -> Result<Vec<TrajectoryRecord>> {
    let fam = plan.family()?;
    let geometry = TorusGeometry::new(plan.dim, side)?;
    let sampler = ProductSampler::new(&fam, &plan.profile, &geometry)?;
    (0..plan.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = plan.base_seed.wrapping_add(i);
            let initial = sampler.sample(&mut sampling_rng(seed));
            let initial_density = initial.density();
            let mut state = SimState::new(&plan.g, kernel, initial, seed)?;
            let mut snapshots = Vec::with_capacity(plan.times.len());
            for &t in &plan.times {
                state.advance_to_macro(t)?;
                snapshots.push(state.config().clone());
            }
            Ok(TrajectoryRecord {
                seed,
                initial_density,
                snapshots,
                events: state.event_count(),
                blocked: state.is_blocked(),
            })
        })
        .collect()
}

/// Mean, and standard error of the mean, of a sample.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `‖mean(samples) − target‖₁` with its jackknife standard error over the
/// samples.
pub fn l1_with_jackknife(samples: &[Vec<f64>], target: &[f64]) -> (f64, f64) {
    let (estimate, se, _) = jackknife(samples, |mean| {
        crate::grid::l1_distance_slices(mean, target)
    });
    (estimate, se)
}

/// Jackknife of a statistic of the sample mean: returns the full-sample
/// value, the standard error and the leave-one-out values.
pub fn jackknife<F>(samples: &[Vec<f64>], statistic: F) -> (f64, f64, Vec<f64>)
where
    F: Fn(&[f64]) -> f64,
{
    let n = samples.len();
    let len = samples[0].len();
    let mut sum = vec![0.0; len];
    for s in samples {
        for (acc, v) in sum.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
    let full = statistic(&mean);
    if n < 2 {
        return (full, f64::NAN, vec![full]);
    }
    let mut buffer = vec![0.0; len];
    let loo: Vec<f64> = samples
        .iter()
        .map(|s| {
            for ((b, total), v) in buffer.iter_mut().zip(&sum).zip(s) {
                *b = (total - v) / (n - 1) as f64;
            }
            statistic(&buffer)
        })
        .collect();
    let centre = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - centre).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (full, var.sqrt(), loo)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub side: usize,
    pub t: f64,
    pub width: f64,
    /// `‖ρ̂_N(t) − ρ_ref(t)‖₁` for the ensemble-mean mollified profile.
    pub l1_error: f64,
    pub l1_stderr: f64,
    /// Same distance to the competing limit equation.
    pub alternative_l1: f64,
    pub alternative_stderr: f64,
    /// `alternative_l1 − l1_error`, with a jackknife error of the paired
    /// difference.
    pub paired_gap: f64,
    pub paired_gap_stderr: f64,
    pub trajectories: usize,
    pub blocked: usize,
    pub mean_events: f64,
    pub initial_density: f64,
    pub density: f64,
    /// Largest `|density(t) − density(0)|` over the trajectories.
    pub max_conservation_error: f64,
    /// Ensemble-mean mollified profile on the PDE grid.
    pub empirical_profile: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub plan: ExperimentPlan,
    pub dynamics: String,
    pub reference: String,
    pub alternative: String,
    pub times: Vec<f64>,
    pub reference_profiles: Vec<Vec<f64>>,
    pub alternative_profiles: Vec<Vec<f64>>,
    pub entries: Vec<ConvergenceEntry>,
}

impl ConvergenceReport {
    pub fn entry(&self, side: usize, t: f64) -> Option<&ConvergenceEntry> {
        self.entries
            .iter()
            .find(|e| e.side == side && (e.t - t).abs() <= 1e-12 * t.max(1.0))
    }

    /// Errors at time `t` in the order of `plan.sides`.
    pub fn errors_at(&self, t: f64) -> Vec<&ConvergenceEntry> {
        self.plan
            .sides
            .iter()
            .filter_map(|&n| self.entry(n, t))
            .collect()
    }

    /// Point estimates strictly decreasing in `N`, and the last error below
    /// the first by three combined standard errors.
    pub fn decreasing_at(&self, t: f64) -> bool {
        let e = self.errors_at(t);
        if e.len() < 2 {
            return false;
        }
        let strictly = e.windows(2).all(|w| w[1].l1_error < w[0].l1_error);
        let (first, last) = (e[0], e[e.len() - 1]);
        let sigma = (first.l1_stderr.powi(2) + last.l1_stderr.powi(2)).sqrt();
        strictly && last.l1_error < first.l1_error - 3.0 * sigma
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// `side,t,width,l1_error,l1_stderr,alternative_l1,alternative_stderr,paired_gap,paired_gap_stderr,trajectories,blocked,density`
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "side,t,width,l1_error,l1_stderr,alternative_l1,alternative_stderr,paired_gap,paired_gap_stderr,trajectories,blocked,density"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                e.side,
                e.t,
                e.width,
                e.l1_error,
                e.l1_stderr,
                e.alternative_l1,
                e.alternative_stderr,
                e.paired_gap,
                e.paired_gap_stderr,
                e.trajectories,
                e.blocked,
                e.density
            )?;
        }
        Ok(())
    }

    /// Overlay of the empirical profiles on the reference solution at
    /// observation time index `k`. One-dimensional plans only.
    pub fn svg(&self, k: usize) -> Result<String> {
        if self.plan.dim != 1 {
            return Err(Error::param("d", "profile plots are one-dimensional"));
        }
        let reference = &self.reference_profiles[k];
        let t = self.times[k];
        let curves: Vec<(&str, String, &[f64])> = std::iter::once((
            "#000000",
            format!("{} t={t}", self.reference),
            reference.as_slice(),
        ))
        .chain(
            self.entries
                .iter()
                .filter(|e| (e.t - t).abs() <= 1e-12 * t.max(1.0))
                .zip(
                    [
                        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                    ]
                    .iter()
                    .cycle(),
                )
                .map(|(e, &colour)| {
                    (
                        colour,
                        format!("N={}", e.side),
                        e.empirical_profile.as_slice(),
                    )
                }),
        )
        .collect();
        let (lo, hi) = curves
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let pad = 0.05 * (hi - lo).max(1e-9);
        let (lo, hi) = (lo - pad, hi + pad);
        let (width, height, margin) = (640.0, 400.0, 40.0);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (row, (colour, label, values)) in curves.iter().enumerate() {
            let n = values.len() as f64;
            let points: Vec<String> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let x = margin + (width - 2.0 * margin) * i as f64 / n;
                    let y = height - margin - (height - 2.0 * margin) * (v - lo) / (hi - lo);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{label}</text>"#,
                width - 150.0,
                margin + 14.0 * row as f64
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{margin}" y="{}" font-size="12">rho in [{lo:.4}, {hi:.4}], u in [0, 1)</text>"#,
            height - 10.0
        );
        svg.push_str("</svg>\n");
        Ok(svg)
    }
}

/// Runs the plan's dynamics and measures its distance to the MPME solution,
/// with the zero-range limit as the alternative.
pub fn run_hydro_experiment(plan: &ExperimentPlan) -> Result<ConvergenceReport> {
    plan.validate()?;
    if plan.kernel == Kernel::ZeroRange {
        return zero_range_baseline(plan);
    }
    convergence(plan, plan.kernel, false)
}

/// The same pipeline for `c ≡ 1` dynamics, measured against the nonlinear
/// heat equation `∂ₜρ = ΔΦ(ρ)` with the MPME solution as the alternative.
pub fn zero_range_baseline(plan: &ExperimentPlan) -> Result<ConvergenceReport> {
    plan.validate()?;
    convergence(plan, Kernel::ZeroRange, true)
}

fn convergence(
    plan: &ExperimentPlan,
    dynamics: Kernel,
    zero_range_reference: bool,
) -> Result<ConvergenceReport> {
    let problem = plan.problem()?;
    let initial = problem.initial_grid(plan.grid_points);
    let mpme = problem.solver()?.solve_at(&initial, &plan.times)?;
    let heat = problem
        .zero_range_solver()?
        .solve_at(&initial, &plan.times)?;
    let mpme_name = format!("mpme m={}", problem.m());
    let (reference, alternative, reference_name, alternative_name) = if zero_range_reference {
        (heat, mpme, "zero-range".to_string(), mpme_name)
    } else {
        (mpme, heat, mpme_name, "zero-range".to_string())
    };
    let mut entries = Vec::new();
    for &side in &plan.sides {
        let width = plan.width_for(side);
        let mollifier = Mollifier::new(side, plan.grid_points, width)?;
        let records = run_ensemble(plan, side, dynamics)?;
        let initial_densities: Vec<f64> = records.iter().map(|r| r.initial_density).collect();
        for (k, &t) in plan.times.iter().enumerate() {
            let profiles: Vec<Vec<f64>> = records
                .par_iter()
                .map(|r| Ok(mollifier.apply(&r.snapshots[k])?.into_values()))
                .collect::<Result<_>>()?;
            let (l1, l1_se) = l1_with_jackknife(&profiles, reference[k].values());
            let (alt, alt_se) = l1_with_jackknife(&profiles, alternative[k].values());
            let (gap, gap_se, _) = jackknife(&profiles, |mean| {
                crate::grid::l1_distance_slices(mean, alternative[k].values())
                    - crate::grid::l1_distance_slices(mean, reference[k].values())
            });
            let densities: Vec<f64> = records.iter().map(|r| r.snapshots[k].density()).collect();
            let max_conservation_error = densities
                .iter()
                .zip(&initial_densities)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let n = records.len() as f64;
            let mut empirical = vec![0.0; plan.grid_points.pow(plan.dim as u32)];
            for p in &profiles {
                for (acc, v) in empirical.iter_mut().zip(p) {
                    *acc += v / n;
                }
            }
            entries.push(ConvergenceEntry {
                side,
                t,
                width,
                l1_error: l1,
                l1_stderr: l1_se,
                alternative_l1: alt,
                alternative_stderr: alt_se,
                paired_gap: gap,
                paired_gap_stderr: gap_se,
                trajectories: records.len(),
                blocked: records.iter().filter(|r| r.blocked).count(),
                mean_events: records.iter().map(|r| r.events as f64).sum::<f64>() / n,
                initial_density: initial_densities.iter().sum::<f64>() / n,
                density: densities.iter().sum::<f64>() / n,
                max_conservation_error,
                empirical_profile: empirical,
            });
        }
    }
    Ok(ConvergenceReport {
        plan: plan.clone(),
        dynamics: dynamics.to_string(),
        reference: reference_name,
        alternative: alternative_name,
        times: plan.times.clone(),
        reference_profiles: reference
            .into_iter()
            .map(GridFunction::into_values)
            .collect(),
        alternative_profiles: alternative
            .into_iter()
            .map(GridFunction::into_values)
            .collect(),
        entries,
    })
}

/// Cylinder functions whose spatial averages are compared with their
/// equilibrium expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    /// `η(0)`, expectation `ρ`.
    Occupation,
    /// `g(η(0))`, expectation `Φ(ρ)`.
    G,
    /// `p_1`, expectation `Φ(ρ)²`.
    P,
    /// `q_1`, expectation `4Φ(ρ)²`.
    Q,
}

impl Observable {
    pub const ALL: [Observable; 4] = [
        Observable::Occupation,
        Observable::G,
        Observable::P,
        Observable::Q,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::Occupation => "eta",
            Observable::G => "g",
            Observable::P => "p",
            Observable::Q => "q",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Observable::ALL
            .into_iter()
            .find(|o| o.name() == name)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown observable `{name}` (expected eta, g, p or q)"
                ))
            })
    }

    /// Equilibrium expectation at density `rho`.
    pub fn target(self, fam: &EquilibriumFamily, rho: f64) -> Result<f64> {
        Ok(match self {
            Observable::Occupation => rho,
            Observable::G => fam.phi(rho)?,
            Observable::P => fam.phi(rho)?.powi(2),
            Observable::Q => 4.0 * fam.phi(rho)?.powi(2),
        })
    }

    /// `τ_x Ψ(η)`, with `p` and `q` taken along the first axis.
    pub fn eval(self, gf: &GFunction, config: &Configuration, x: usize) -> f64 {
        let occ = config.occupancy();
        match self {
            Observable::Occupation => f64::from(occ[x]),
            Observable::G => gf.value(occ[x]),
            Observable::P => p_raw(gf, config.geometry(), occ, x, 0),
            Observable::Q => q_raw(gf, config.geometry(), occ, x, 0),
        }
    }

    /// `N^{-d} Σ_x H(x/N) τ_x Ψ(η)`.
    pub fn weighted_average(
        self,
        gf: &GFunction,
        config: &Configuration,
        test: &ProfileShape,
    ) -> f64 {
        let geometry = config.geometry();
        let total: f64 = (0..geometry.site_count())
            .map(|x| {
                let value = self.eval(gf, config, x);
                if value == 0.0 {
                    0.0
                } else {
                    test.eval(&geometry.macro_point(x)) * value
                }
            })
            .sum();
        total / geometry.site_count() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalEquilibriumEntry {
    pub side: usize,
    pub t: f64,
    pub observable: Observable,
    /// `∫ H(u) E_{ν_{ρ(t,u)}}[Ψ] du` by quadrature on the PDE grid.
    pub target: f64,
    pub empirical_mean: f64,
    /// `empirical_mean − target` and its standard error.
    pub signed_discrepancy: f64,
    pub signed_stderr: f64,
    /// Ensemble mean of `|X − target|` over trajectories, with standard error.
    pub mean_abs_discrepancy: f64,
    pub abs_stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalEquilibriumReport {
    pub plan: ExperimentPlan,
    pub test_function: ProfileShape,
    pub entries: Vec<LocalEquilibriumEntry>,
}

impl LocalEquilibriumReport {
    pub fn entry(
        &self,
        side: usize,
        t: f64,
        observable: Observable,
    ) -> Option<&LocalEquilibriumEntry> {
        self.entries.iter().find(|e| {
            e.side == side && e.observable == observable && (e.t - t).abs() <= 1e-12 * t.max(1.0)
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "side,t,observable,target,empirical_mean,signed_discrepancy,signed_stderr,mean_abs_discrepancy,abs_stderr"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.side,
                e.t,
                e.observable.name(),
                e.target,
                e.empirical_mean,
                e.signed_discrepancy,
                e.signed_stderr,
                e.mean_abs_discrepancy,
                e.abs_stderr
            )?;
        }
        Ok(())
    }
}

/// Compares `N^{-d} Σ_x H(x/N) τ_xΨ(η_t)` with `∫ H(u) E_{ν_{ρ(t,u)}}[Ψ] du`
/// along trajectories of the plan's dynamics.
pub fn local_equilibrium_check(
    plan: &ExperimentPlan,
    observables: &[Observable],
    test: &ProfileShape,
) -> Result<LocalEquilibriumReport> {
    plan.validate()?;
    if !test.dim_compatible(plan.dim) {
        return Err(Error::param("H", "test function has the wrong dimension"));
    }
    if plan.kernel == Kernel::Cubic
        && observables
            .iter()
            .any(|o| matches!(o, Observable::P | Observable::Q))
    {
        return Err(Error::UnsupportedKernel(plan.kernel.to_string()));
    }
    let fam = plan.family()?;
    let problem = plan.problem()?;
    let initial = problem.initial_grid(plan.grid_points);
    let solutions = if plan.kernel == Kernel::ZeroRange {
        problem
            .zero_range_solver()?
            .solve_at(&initial, &plan.times)?
    } else {
        problem.solver()?.solve_at(&initial, &plan.times)?
    };
    let weights = GridFunction::from_shape(test, plan.dim, plan.grid_points);
    let mut targets = vec![vec![0.0; observables.len()]; plan.times.len()];
    for (k, rho) in solutions.iter().enumerate() {
        for (j, &obs) in observables.iter().enumerate() {
            let mut acc = 0.0;
            for (&h, &r) in weights.values().iter().zip(rho.values()) {
                acc += h * obs.target(&fam, r)?;
            }
            targets[k][j] = acc / rho.len() as f64;
        }
    }
    let mut entries = Vec::new();
    for &side in &plan.sides {
        let records = run_ensemble(plan, side, plan.kernel)?;
        for (k, &t) in plan.times.iter().enumerate() {
            for (j, &obs) in observables.iter().enumerate() {
                let target = targets[k][j];
                let values: Vec<f64> = records
                    .par_iter()
                    .map(|r| obs.weighted_average(&plan.g, &r.snapshots[k], test))
                    .collect();
                let (mean, se) = mean_and_stderr(&values);
                let abs: Vec<f64> = values.iter().map(|v| (v - target).abs()).collect();
                let (abs_mean, abs_se) = mean_and_stderr(&abs);
                entries.push(LocalEquilibriumEntry {
                    side,
                    t,
                    observable: obs,
                    target,
                    empirical_mean: mean,
                    signed_discrepancy: mean - target,
                    signed_stderr: se,
                    mean_abs_discrepancy: abs_mean,
                    abs_stderr: abs_se,
                });
            }
        }
    }
    Ok(LocalEquilibriumReport {
        plan: plan.clone(),
        test_function: test.clone(),
        entries,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationarityReport {
    pub alpha: f64,
    pub phi: f64,
    /// Ensemble mean of the time-averaged spatial mean of `g(η(x))`.
    pub mean: f64,
    pub stderr: f64,
    pub per_trajectory: Vec<f64>,
}

/// Starts independent trajectories from `ν_α` and integrates
/// `N^{-d} Σ_x g(η_s(x))` exactly over macroscopic time `[0, t]`.
#[allow(clippy::too_many_arguments)]
pub fn stationary_g_average(
    gf: &GFunction,
    kernel: Kernel,
    dim: usize,
    side: usize,
    alpha: f64,
    t: f64,
    trajectories: usize,
    base_seed: u64,
) -> Result<StationarityReport> {
    if !(t > 0.0) {
        return Err(Error::param("t", "averaging window must be positive"));
    }
    if trajectories < 2 {
        return Err(Error::param(
            "seeds",
            "need at least two trajectories for an error bar",
        ));
    }
    let fam = EquilibriumFamily::new(gf.clone())?;
    let geometry = TorusGeometry::new(dim, side)?;
    let profile = DensityProfile::constant(alpha)?;
    let sampler = ProductSampler::new(&fam, &profile, &geometry)?;
    let sites = geometry.site_count() as f64;
    let horizon = t * (side * side) as f64;
    let per_trajectory: Vec<f64> = (0..trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let initial = sampler.sample(&mut sampling_rng(seed));
            let mut state = SimState::new(gf, kernel, initial, seed)?;
            let mut integral = 0.0;
            state.run_until_micro_with(horizon, |s, dt| integral += s.g_total() * dt)?;
            Ok(integral / (horizon * sites))
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_and_stderr(&per_trajectory);
    Ok(StationarityReport {
        alpha,
        phi: fam.phi(alpha)?,
        mean,
        stderr,
        per_trajectory,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MobileClusterEstimate {
    pub frequency: f64,
    pub stderr: f64,
    pub bound: f64,
    pub boxes: usize,
}

/// Fraction of independent radius-`l` boxes, filled i.i.d. from `ν_{δ₀}`,
/// that contain a fully occupied unit hypercube.
pub fn mobile_cluster_frequency(
    fam: &EquilibriumFamily,
    dim: usize,
    delta0: f64,
    l: usize,
    boxes: usize,
    seed: u64,
) -> Result<MobileClusterEstimate> {
    if l == 0 || boxes == 0 {
        return Err(Error::param("l", "box radius and count must be positive"));
    }
    let geometry = TorusGeometry::new(dim, (2 * l + 1).max(crate::lattice::MIN_SIDE))?;
    let centre = geometry.site_at(&vec![l; dim])?;
    let sampler = ProductSampler::new(fam, &DensityProfile::constant(delta0)?, &geometry)?;
    let mut rng = sampling_rng(seed);
    let hits = (0..boxes)
        .filter(|_| box_contains_mobile_cluster(&sampler.sample(&mut rng), centre, l))
        .count();
    let p = hits as f64 / boxes as f64;
    Ok(MobileClusterEstimate {
        frequency: p,
        stderr: (p * (1.0 - p) / boxes as f64).sqrt(),
        bound: fam.mobile_cluster_probability_bound(delta0, dim, l)?,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan(profile: DensityProfile, kernel: Kernel) -> ExperimentPlan {
        let mut plan = ExperimentPlan::new(
            GFunction::example1(1.0).unwrap(),
            kernel,
            1,
            vec![32, 64],
            profile,
            vec![0.0, 0.01],
        )
        .unwrap();
        plan.seeds = 8;
        plan.grid_points = 32;
        plan
    }

    #[test]
    fn jackknife_of_the_mean_is_the_standard_error() {
        let samples: Vec<Vec<f64>> = [1.0, 2.0, 4.0, 7.0].iter().map(|&v| vec![v]).collect();
        let (full, se, loo) = jackknife(&samples, |m| m[0]);
        let (mean, stderr) = mean_and_stderr(&[1.0, 2.0, 4.0, 7.0]);
        assert!((full - mean).abs() < 1e-15);
        assert!((se - stderr).abs() < 1e-12);
        assert_eq!(loo.len(), 4);
    }

    #[test]
    fn plan_validation() {
        let p = DensityProfile::cosine(1.0, 0.2, 1.0, 1).unwrap();
        let g = GFunction::example1(1.0).unwrap();
        assert!(ExperimentPlan::new(
            g.clone(),
            Kernel::Quadratic,
            1,
            vec![4],
            p.clone(),
            vec![0.1]
        )
        .is_err());
        assert!(ExperimentPlan::new(
            g.clone(),
            Kernel::Quadratic,
            1,
            vec![],
            p.clone(),
            vec![0.1]
        )
        .is_err());
        assert!(ExperimentPlan::new(
            g.clone(),
            Kernel::Quadratic,
            1,
            vec![16],
            p.clone(),
            vec![0.2, 0.1]
        )
        .is_err());
        assert!(ExperimentPlan::new(
            g.clone(),
            Kernel::Quadratic,
            2,
            vec![16],
            p.clone(),
            vec![0.1]
        )
        .is_err());
        let mut plan =
            ExperimentPlan::new(g, Kernel::Quadratic, 1, vec![16], p, vec![0.1]).unwrap();
        plan.width = Some(0.01);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn ensembles_conserve_particles_and_are_reproducible() {
        let plan = small_plan(
            DensityProfile::cosine(1.0, 0.2, 1.0, 1).unwrap(),
            Kernel::Quadratic,
        );
        let a = run_ensemble(&plan, 32, Kernel::Quadratic).unwrap();
        let b = run_ensemble(&plan, 32, Kernel::Quadratic).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.snapshots, rb.snapshots);
            for s in &ra.snapshots {
                assert_eq!(s.density(), ra.initial_density);
            }
        }
        assert_eq!(a[3].seed, 3);
    }

    #[test]
    fn constant_profile_stays_flat() {
        let plan = small_plan(DensityProfile::constant(1.0).unwrap(), Kernel::Quadratic);
        let report = run_hydro_experiment(&plan).unwrap();
        assert_eq!(report.entries.len(), 4);
        for e in &report.entries {
            assert!(e.l1_error >= 0.0 && e.l1_stderr >= 0.0);
            assert_eq!(e.max_conservation_error, 0.0);
            // both limits coincide for a constant profile
            assert!((e.l1_error - e.alternative_l1).abs() < 1e-12);
            assert!(e.l1_error < 5.0 * e.l1_stderr + 0.05, "{e:?}");
        }
        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        let value: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(value["entries"].as_array().unwrap().len(), 4);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
        assert!(report.svg(1).unwrap().contains("<polyline"));
    }

    #[test]
    fn zero_range_baseline_swaps_the_reference() {
        let plan = small_plan(
            DensityProfile::cosine(1.0, 0.2, 1.0, 1).unwrap(),
            Kernel::Quadratic,
        );
        let report = zero_range_baseline(&plan).unwrap();
        assert_eq!(report.dynamics, "zero-range");
        assert_eq!(report.reference, "zero-range");
        let mpme = run_hydro_experiment(&plan).unwrap();
        assert_eq!(mpme.reference_profiles, report.alternative_profiles);
    }

    #[test]
    fn occupation_average_with_unit_test_function_is_the_density() {
        let plan = small_plan(
            DensityProfile::cosine(1.0, 0.2, 1.0, 1).unwrap(),
            Kernel::Quadratic,
        );
        let report = local_equilibrium_check(
            &plan,
            &[Observable::Occupation],
            &ProfileShape::Constant { value: 1.0 },
        )
        .unwrap();
        for e in &report.entries {
            // target is the conserved PDE mass, 1
            assert!((e.target - 1.0).abs() < 1e-12);
            assert!(e.signed_discrepancy.abs() < 4.0 * e.signed_stderr + 1e-12);
        }
        let mut plan3 = plan.clone();
        plan3.kernel = Kernel::Cubic;
        plan3.sides = vec![32];
        assert!(local_equilibrium_check(
            &plan3,
            &[Observable::Q],
            &ProfileShape::Constant { value: 1.0 }
        )
        .is_err());
    }

    #[test]
    fn observables_against_hand_computed_values() {
        let gf = GFunction::example3(0.5).unwrap();
        let geom = TorusGeometry::new(1, 5).unwrap();
        let c = Configuration::new(geom, vec![4, 1, 0, 9, 0]).unwrap();
        assert_eq!(Observable::Occupation.eval(&gf, &c, 0), 4.0);
        assert_eq!(Observable::G.eval(&gf, &c, 0), 2.0);
        // p at 0: g0 g1 + g0 g4 − g1 g4 = 2·1 + 0 − 0
        assert_eq!(Observable::P.eval(&gf, &c, 0), 2.0);
        // q at 0: (g(η(4)) + g(η(2)))·(g0 + g1) = 0
        assert_eq!(Observable::Q.eval(&gf, &c, 0), 0.0);
        // q at 1: (g(η(0)) + g(η(3)))·(g1 + g2) = (2 + 3)·1
        assert_eq!(Observable::Q.eval(&gf, &c, 1), 5.0);
        let h = ProfileShape::Constant { value: 2.0 };
        assert!(
            (Observable::Occupation.weighted_average(&gf, &c, &h) - 2.0 * 14.0 / 5.0).abs() < 1e-15
        );
        assert_eq!(Observable::parse("q").unwrap(), Observable::Q);
        assert!(Observable::parse("r").is_err());
    }

    #[test]
    fn stationary_average_is_close_to_phi() {
        let gf = GFunction::example1(1.0).unwrap();
        let r = stationary_g_average(&gf, Kernel::Quadratic, 1, 32, 1.0, 0.05, 16, 5).unwrap();
        assert!((r.phi - 0.5).abs() < 1e-10);
        assert!(
            (r.mean - r.phi).abs() < 5.0 * r.stderr,
            "{} ± {}",
            r.mean,
            r.stderr
        );
    }

    #[test]
    fn mobile_cluster_frequency_respects_the_bound() {
        let fam = EquilibriumFamily::new(GFunction::example1(1.0).unwrap()).unwrap();
        let est = mobile_cluster_frequency(&fam, 1, 1.0, 2, 2000, 1).unwrap();
        // P = 1/2, bound 1 − (1 − 1/4)² = 7/16
        assert!((est.bound - 7.0 / 16.0).abs() < 1e-9);
        assert!(est.frequency >= est.bound - 3.0 * est.stderr);
    }
}
