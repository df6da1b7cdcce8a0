//! The equilibrium family `ν̄_ψ`: partition function, density map `R`, its
//! inverse `Φ`, sampling of product measures and their relative entropies.
//!
//! All series are summed in log space from cached `log g(k)!`.

use std::collections::HashMap;

use rand::Rng;

use crate::lattice::{Configuration, TorusGeometry};
use crate::profile::DensityProfile;
use crate::rates::{GFamily, GFunction};
use crate::{Error, Result};

/// Relative size below which a series term counts as negligible.
pub const DEFAULT_SERIES_EPSILON: f64 = 1e-17;
/// Hard cap on the number of series terms.
pub const DEFAULT_SERIES_CAP: usize = 100_000;
/// Mass left out of the sampled marginal.
pub const SAMPLER_TRUNCATION: f64 = 1e-12;
/// Acceptance threshold for `|R(Φ(ρ)) − ρ| / (1 + ρ)`.
pub const PHI_TOLERANCE: f64 = 1e-10;

/// `log Z`, mean and variance of `η(0)` under `ν̄_ψ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub log_z: f64,
    pub mean: f64,
    pub variance: f64,
    /// Number of series terms used.
    pub terms: usize,
}

#[derive(Clone, Debug)]
pub struct EquilibriumFamily {
    gf: GFunction,
    psi_star: f64,
    log_factorials: Vec<f64>,
    epsilon: f64,
}

impl EquilibriumFamily {
    pub fn new(gf: GFunction) -> Result<Self> {
        Self::with_truncation(gf, DEFAULT_SERIES_EPSILON, DEFAULT_SERIES_CAP)
    }

    pub fn with_truncation(gf: GFunction, epsilon: f64, cap: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1e-3) {
            return Err(Error::param(
                "epsilon",
                format!("{epsilon} outside (0, 1e-3)"),
            ));
        }
        let psi_star = match gf.family() {
            GFamily::Example1 { .. } | GFamily::Example2 { .. } => 1.0,
            GFamily::Example3 { .. } | GFamily::Tabulated { .. } => f64::INFINITY,
        };
        let limit = gf.family().domain_limit().map_or(cap, |l| l.min(cap));
        let mut log_factorials = Vec::with_capacity(limit + 1);
        log_factorials.push(0.0);
        for k in 1..=limit {
            let g = match gf.g_value(k) {
                Ok(g) => g,
                Err(_) => gf.family().eval(k)?,
            };
            log_factorials.push(log_factorials[k - 1] + g.ln());
        }
        Ok(Self {
            gf,
            psi_star,
            log_factorials,
            epsilon,
        })
    }

    pub fn g(&self) -> &GFunction {
        &self.gf
    }

    /// Radius of convergence `ψ*` of the partition series.
    pub fn psi_star(&self) -> f64 {
        self.psi_star
    }

    /// Largest fugacity the series are evaluated at.
    pub fn psi_eval_max(&self) -> f64 {
        if self.psi_star.is_finite() {
            self.psi_star * (1.0 - 1e-6)
        } else {
            f64::INFINITY
        }
    }

    fn check_psi(&self, psi: f64) -> Result<()> {
        if psi >= 0.0 && psi < self.psi_eval_max() {
            Ok(())
        } else {
            Err(Error::FugacityOutOfRange {
                psi,
                max: self.psi_eval_max(),
            })
        }
    }

    /// Sums `Σ_k k^i ψ^k / g(k)!` for `i = 0, 1, 2` in log space.
    pub fn moments(&self, psi: f64) -> Result<Moments> {
        self.check_psi(psi)?;
        if psi == 0.0 {
            return Ok(Moments {
                log_z: 0.0,
                mean: 0.0,
                variance: 0.0,
                terms: 1,
            });
        }
        let ln_psi = psi.ln();
        // running sums scaled by exp(-shift)
        let mut shift = 0.0;
        let (mut s0, mut s1, mut s2) = (1.0, 0.0, 0.0);
        let mut prev_log_term = 0.0;
        let mut quiet = 0;
        for k in 1..self.log_factorials.len() {
            let log_term = k as f64 * ln_psi - self.log_factorials[k];
            if log_term > shift {
                let rescale = (shift - log_term).exp();
                s0 *= rescale;
                s1 *= rescale;
                s2 *= rescale;
                shift = log_term;
            }
            let term = (log_term - shift).exp();
            let kf = k as f64;
            s0 += term;
            s1 += kf * term;
            s2 += kf * kf * term;
            let weighted = term * (1.0 + kf) * (1.0 + kf);
            if weighted < self.epsilon * s0 && log_term < prev_log_term {
                quiet += 1;
                if quiet == 3 {
                    let mean = s1 / s0;
                    return Ok(Moments {
                        log_z: shift + s0.ln(),
                        mean,
                        variance: (s2 / s0 - mean * mean).max(0.0),
                        terms: k + 1,
                    });
                }
            } else {
                quiet = 0;
            }
            prev_log_term = log_term;
        }
        Err(Error::SeriesNotConverged(self.log_factorials.len()))
    }

    pub fn log_partition_z(&self, psi: f64) -> Result<f64> {
        Ok(self.moments(psi)?.log_z)
    }

    /// `Z(ψ) = Σ_k ψ^k / g(k)!`.
    pub fn partition_z(&self, psi: f64) -> Result<f64> {
        Ok(self.log_partition_z(psi)?.exp())
    }

    /// `R(ψ) = E_{ν̄_ψ}[η(0)] = ψ Z'(ψ) / Z(ψ)`.
    pub fn density_r(&self, psi: f64) -> Result<f64> {
        Ok(self.moments(psi)?.mean)
    }

    /// `Φ(ρ)`: the fugacity with `R(Φ(ρ)) = ρ`.
    pub fn phi(&self, rho: f64) -> Result<f64> {
        Ok(self.phi_with_derivative(rho)?.0)
    }

    /// `Φ(ρ)` and `Φ'(ρ) = ψ / Var_{ν̄_ψ}(η(0))`.
    pub fn phi_with_derivative(&self, rho: f64) -> Result<(f64, f64)> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::param(
                "rho",
                format!("density {rho} must be non-negative"),
            ));
        }
        if rho == 0.0 {
            // Φ'(0) = g(1)
            return Ok((0.0, self.gf.g_value(1)?));
        }
        let (mut lo, mut hi) = self.bracket(rho)?;
        let mut psi = 0.5 * (lo + hi);
        for _ in 0..200 {
            let m = self.moments(psi)?;
            let residual = m.mean - rho;
            if residual > 0.0 {
                hi = psi;
            } else {
                lo = psi;
            }
            let slope = m.variance / psi;
            let mut next = if slope > 0.0 {
                psi - residual / slope
            } else {
                f64::NAN
            };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let converged = (next - psi).abs() <= 4.0 * f64::EPSILON * psi;
            if converged || hi - lo <= 2.0 * f64::EPSILON * hi {
                let m = self.moments(next)?;
                if (m.mean - rho).abs() > PHI_TOLERANCE * (1.0 + rho) {
                    return Err(Error::BracketFailure(rho));
                }
                return Ok((next, next / m.variance));
            }
            psi = next;
        }
        Err(Error::BracketFailure(rho))
    }

    fn bracket(&self, rho: f64) -> Result<(f64, f64)> {
        let reaches = |psi: f64| matches!(self.density_r(psi), Ok(r) if r >= rho);
        let mut lo = 0.0;
        if self.psi_star.is_finite() {
            let ceiling = self.psi_eval_max();
            let mut gap = 0.5;
            loop {
                let hi = (self.psi_star * (1.0 - gap)).min(ceiling);
                if reaches(hi) {
                    return Ok((lo, hi));
                }
                if self.density_r(hi).is_err() || hi >= ceiling {
                    return Err(Error::BracketFailure(rho));
                }
                lo = hi;
                gap *= 0.5;
            }
        } else {
            let mut hi = 1.0;
            for _ in 0..1100 {
                if reaches(hi) {
                    return Ok((lo, hi));
                }
                if self.density_r(hi).is_err() {
                    return Err(Error::BracketFailure(rho));
                }
                lo = hi;
                hi *= 2.0;
            }
            Err(Error::BracketFailure(rho))
        }
    }

    /// `Φ'(ρ)` by central difference with step `1e-6·(1+ρ)`.
    pub fn phi_derivative_fd(&self, rho: f64) -> Result<f64> {
        let mut h = 1e-6 * (1.0 + rho);
        if rho - h < 0.0 {
            h = 0.5 * rho;
        }
        if h == 0.0 {
            return Err(Error::param("rho", "diffusion coefficient needs rho > 0"));
        }
        Ok((self.phi(rho + h)? - self.phi(rho - h)?) / (2.0 * h))
    }

    /// `D(ρ) = m Φ(ρ)^{m−1} Φ'(ρ)`.
    pub fn diffusion_d(&self, rho: f64, m: u32) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(Error::param("rho", format!("{rho} must be positive")));
        }
        if m == 0 {
            return Err(Error::param("m", "must be positive"));
        }
        let phi = self.phi(rho)?;
        let dphi = self.phi_derivative_fd(rho)?;
        Ok(f64::from(m) * phi.powi(m as i32 - 1) * dphi)
    }

    /// Inverse-CDF sampler for the marginal at fugacity `psi`.
    pub fn marginal_sampler(&self, psi: f64) -> Result<MarginalSampler> {
        MarginalSampler::new(self, psi)
    }

    pub fn sample_marginal<R: Rng + ?Sized>(&self, psi: f64, rng: &mut R) -> Result<u32> {
        Ok(self.marginal_sampler(psi)?.sample(rng))
    }

    /// Exact `H(ν^N_μ / ν^N_ν)` between two product measures with slowly
    /// varying profiles.
    pub fn product_relative_entropy(
        &self,
        mu: &DensityProfile,
        nu: &DensityProfile,
        geometry: &TorusGeometry,
    ) -> Result<f64> {
        let mut cache: HashMap<(u64, u64), f64> = HashMap::new();
        let mut total = 0.0;
        for x in 0..geometry.site_count() {
            let u = geometry.macro_point(x);
            let (a, b) = (mu.eval(&u), nu.eval(&u));
            let key = (a.to_bits(), b.to_bits());
            let site = match cache.get(&key) {
                Some(&v) => v,
                None => {
                    let v = self.site_relative_entropy(a, b)?;
                    cache.insert(key, v);
                    v
                }
            };
            total += site;
        }
        Ok(total.max(0.0))
    }

    /// `KL(ν_a ‖ ν_b) = R(ψ_a) log(ψ_a/ψ_b) − log Z(ψ_a) + log Z(ψ_b)`.
    pub fn site_relative_entropy(&self, rho_a: f64, rho_b: f64) -> Result<f64> {
        if rho_a == rho_b {
            return Ok(0.0);
        }
        let psi_a = self.phi(rho_a)?;
        let psi_b = self.phi(rho_b)?;
        let ma = self.moments(psi_a)?;
        let mb = self.moments(psi_b)?;
        let cross = if rho_a == 0.0 {
            0.0
        } else {
            ma.mean * (psi_a / psi_b).ln()
        };
        Ok((cross - ma.log_z + mb.log_z).max(0.0))
    }

    /// `P_δ = ν_δ(η(0) ≥ 1) = 1 − 1/Z(Φ(δ))`.
    pub fn occupied_probability(&self, density: f64) -> Result<f64> {
        let psi = self.phi(density)?;
        Ok(-(-self.log_partition_z(psi)?).exp_m1())
    }

    /// Lower bound `1 − (1 − P_{δ₀}^{2^d})^{l^d}` on the probability that a
    /// box of radius `l` holds a fully occupied hypercube of side 2.
    pub fn mobile_cluster_probability_bound(
        &self,
        delta0: f64,
        dim: usize,
        l: usize,
    ) -> Result<f64> {
        if !(delta0 > 0.0) {
            return Err(Error::param("delta0", format!("{delta0} must be positive")));
        }
        let p = self.occupied_probability(delta0)?;
        let cube = p.powi(1 << dim);
        let boxes = (l as f64).powi(dim as i32);
        Ok(1.0 - (1.0 - cube).powf(boxes))
    }

    /// Finds `θ > 0` with `E_{ν_α}[e^{θη(0)}] = Z(Φ(α)e^θ)/Z(Φ(α))` finite by
    /// halving from `θ = 1`. Returns `θ` and the moment.
    pub fn exponential_moment(&self, alpha: f64) -> Result<(f64, f64)> {
        let psi = self.phi(alpha)?;
        let log_z = self.log_partition_z(psi)?;
        let mut theta: f64 = 1.0;
        for _ in 0..60 {
            if let Ok(shifted) = self.log_partition_z(psi * theta.exp()) {
                return Ok((theta, (shifted - log_z).exp()));
            }
            theta *= 0.5;
        }
        Err(Error::SeriesNotConverged(self.log_factorials.len()))
    }
}

/// Cumulative distribution of one marginal `ν̄_ψ`, truncated where the
/// remaining mass drops below [`SAMPLER_TRUNCATION`].
#[derive(Clone, Debug)]
pub struct MarginalSampler {
    cdf: Vec<f64>,
}

impl MarginalSampler {
    pub fn new(fam: &EquilibriumFamily, psi: f64) -> Result<Self> {
        let m = fam.moments(psi)?;
        if psi == 0.0 {
            return Ok(Self { cdf: vec![1.0] });
        }
        let ln_psi = psi.ln();
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        for k in 0..fam.log_factorials.len() {
            let p = (k as f64 * ln_psi - fam.log_factorials[k] - m.log_z).exp();
            acc += p;
            cdf.push(acc);
            if k + 1 >= m.terms && 1.0 - acc < SAMPLER_TRUNCATION {
                break;
            }
            if k + 1 >= m.terms && p < SAMPLER_TRUNCATION * 1e-4 {
                break;
            }
        }
        Ok(Self { cdf })
    }

    /// Largest value the sampler can return.
    pub fn support_max(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1) as u32
    }
}

/// Per-site samplers for `ν^N_{ρ₀(·)}`, with `ψ_x = Φ(ρ₀(x/N))`.
#[derive(Clone, Debug)]
pub struct ProductSampler {
    geometry: TorusGeometry,
    samplers: Vec<MarginalSampler>,
    site_sampler: Vec<usize>,
}

impl ProductSampler {
    pub fn new(
        fam: &EquilibriumFamily,
        profile: &DensityProfile,
        geometry: &TorusGeometry,
    ) -> Result<Self> {
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut samplers = Vec::new();
        let mut site_sampler = Vec::with_capacity(geometry.site_count());
        for x in 0..geometry.site_count() {
            let rho = profile.eval(&geometry.macro_point(x));
            let id = match index.get(&rho.to_bits()) {
                Some(&id) => id,
                None => {
                    let psi = fam.phi(rho)?;
                    samplers.push(MarginalSampler::new(fam, psi)?);
                    index.insert(rho.to_bits(), samplers.len() - 1);
                    samplers.len() - 1
                }
            };
            site_sampler.push(id);
        }
        Ok(Self {
            geometry: geometry.clone(),
            samplers,
            site_sampler,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let occupancy = self
            .site_sampler
            .iter()
            .map(|&id| self.samplers[id].sample(rng))
            .collect();
        Configuration::new(self.geometry.clone(), occupancy)
            .expect("sampler built for this geometry")
    }
}

pub fn sample_product<R: Rng + ?Sized>(
    fam: &EquilibriumFamily,
    profile: &DensityProfile,
    geometry: &TorusGeometry,
    rng: &mut R,
) -> Result<Configuration> {
    Ok(ProductSampler::new(fam, profile, geometry)?.sample(rng))
}
