//! Periodic grid functions and the box-kernel mollifier that maps particle
//! configurations onto them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::lattice::Configuration;
use crate::profile::ProfileShape;
use crate::{Error, Result};

/// Real values on the uniform grid `u_i = i/M` of `[0,1)^d`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    dim: usize,
    points: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(dim: usize, points: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || points == 0 {
            return Err(Error::param(
                "M",
                "grid needs a positive dimension and size",
            ));
        }
        let expected = points.pow(dim as u32);
        if values.len() != expected {
            return Err(Error::param(
                "M",
                format!("{} values for a {points}^{dim} grid", values.len()),
            ));
        }
        Ok(Self {
            dim,
            points,
            values,
        })
    }

    pub fn zeros(dim: usize, points: usize) -> Self {
        Self {
            dim,
            points,
            values: vec![0.0; points.pow(dim as u32)],
        }
    }

    /// Samples `f` at the grid points.
    pub fn sample(dim: usize, points: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut grid = Self::zeros(dim, points);
        let mut u = vec![0.0; dim];
        for i in 0..grid.values.len() {
            grid.point_into(i, &mut u);
            grid.values[i] = f(&u);
        }
        grid
    }

    pub fn from_shape(shape: &ProfileShape, dim: usize, points: usize) -> Self {
        Self::sample(dim, points, |u| shape.eval(u))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.points as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point_into(&self, i: usize, u: &mut [f64]) {
        let mut rest = i;
        for axis in (0..self.dim).rev() {
            u[axis] = (rest % self.points) as f64 / self.points as f64;
            rest /= self.points;
        }
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut u = vec![0.0; self.dim];
        self.point_into(i, &mut u);
        u
    }

    /// Neighbour of grid index `i` along `axis` with periodic wrap.
    #[inline]
    pub fn neighbour(&self, i: usize, axis: usize, steps: isize) -> usize {
        let stride = self.points.pow((self.dim - 1 - axis) as u32);
        let c = (i / stride) % self.points;
        let shifted = (c as isize + steps).rem_euclid(self.points as isize) as usize;
        i + shifted * stride - c * stride
    }

    /// Discrete integral `M^{-d} Σ values`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.dim != other.dim || self.points != other.points {
            return Err(Error::param(
                "M",
                format!(
                    "grids differ: {}^{} vs {}^{}",
                    self.points, self.dim, other.points, other.dim
                ),
            ));
        }
        Ok(())
    }

    /// Discrete `L¹` distance `M^{-d} Σ |f_i − g_i|`.
    pub fn l1_distance(&self, other: &GridFunction) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(l1_distance_slices(&self.values, &other.values))
    }

    /// Restriction to the coarse grid with `points / factor` points per axis.
    pub fn restrict(&self, factor: usize) -> Result<GridFunction> {
        if factor == 0 || !self.points.is_multiple_of(factor) {
            return Err(Error::param(
                "M",
                format!("{} points are not divisible by {factor}", self.points),
            ));
        }
        let coarse = self.points / factor;
        let mut out = GridFunction::zeros(self.dim, coarse);
        for i in 0..out.values.len() {
            let mut rest = i;
            let mut fine = 0;
            let mut stride = 1;
            for _ in 0..self.dim {
                fine += (rest % coarse) * factor * stride;
                rest /= coarse;
                stride *= self.points;
            }
            out.values[i] = self.values[fine];
        }
        Ok(out)
    }

    /// CSV with columns `u1[,u2,…],rho`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim)
            .map(|a| format!("u{a}"))
            .chain(std::iter::once("rho".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut u = vec![0.0; self.dim];
        for (i, v) in self.values.iter().enumerate() {
            self.point_into(i, &mut u);
            let coords: Vec<String> = u.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{},{}", coords.join(","), v)?;
        }
        Ok(())
    }
}

pub(crate) fn l1_distance_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Periodic box-kernel smoothing of a lattice configuration onto a grid.
///
/// Each particle is spread uniformly over its lattice cell, convolved with
/// the box of half-width `w`, and averaged over each grid cell. The three
/// box convolutions keep both the particle mass and constant profiles exact;
/// the kernel is separable, so one set of one-dimensional weights serves
/// every axis.
#[derive(Clone, Debug)]
pub struct Mollifier {
    side: usize,
    points: usize,
    width: f64,
    /// For every grid index: lattice coordinates and weights with nonzero
    /// overlap.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Mollifier {
    pub fn new(side: usize, points: usize, width: f64) -> Result<Self> {
        if !(width >= 1.0 / side as f64) || !width.is_finite() {
            return Err(Error::param(
                "w",
                format!("mollifier width {width} is below the lattice spacing 1/{side}"),
            ));
        }
        if points == 0 {
            return Err(Error::param("M", "grid needs at least one point"));
        }
        let cell_grid = 1.0 / points as f64;
        let cell_lattice = 1.0 / side as f64;
        let images = (width + 1.0).ceil() as i64 + 1;
        let norm = 1.0 / (side as f64 * 2.0 * width);
        let rows = (0..points)
            .map(|i| {
                let u = i as f64 / points as f64;
                (0..side)
                    .filter_map(|x| {
                        let centre = u - x as f64 / side as f64;
                        let p: f64 = (-images..=images)
                            .map(|k| {
                                let delta = centre + k as f64;
                                difference_cdf(width - delta, cell_grid, cell_lattice)
                                    - difference_cdf(-width - delta, cell_grid, cell_lattice)
                            })
                            .sum();
                        (p > 0.0).then_some((x, p * norm))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            side,
            points,
            width,
            rows,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// `ρ̂(u_i) = Σ_x η(x) A(u_i − x/N)`.
    pub fn apply(&self, config: &Configuration) -> Result<GridFunction> {
        let geometry = config.geometry();
        if geometry.side() != self.side {
            return Err(Error::param(
                "N",
                format!(
                    "mollifier built for side {}, configuration has {}",
                    self.side,
                    geometry.side()
                ),
            ));
        }
        let dim = geometry.dim();
        let mut data: Vec<f64> = config.occupancy().iter().map(|&k| f64::from(k)).collect();
        // shape[a] is the current extent along axis a
        let mut shape = vec![self.side; dim];
        for axis in 0..dim {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[axis];
            let mut next = vec![0.0; outer * self.points * inner];
            for o in 0..outer {
                for (i, row) in self.rows.iter().enumerate() {
                    let dst = (o * self.points + i) * inner;
                    for &(x, w) in row {
                        let src = (o * extent + x) * inner;
                        for r in 0..inner {
                            next[dst + r] += w * data[src + r];
                        }
                    }
                }
            }
            data = next;
            shape[axis] = self.points;
        }
        GridFunction::new(dim, self.points, data)
    }
}

/// CDF at `z` of `s + t`, `s ~ U(−a/2, a/2)`, `t ~ U(−b/2, b/2)` independent.
fn difference_cdf(z: f64, a: f64, b: f64) -> f64 {
    let ramp = |v: f64| if v > 0.0 { 0.5 * v * v } else { 0.0 };
    let (ha, hb) = (0.5 * a, 0.5 * b);
    if z <= -(ha + hb) {
        return 0.0;
    }
    if z >= ha + hb {
        return 1.0;
    }
    let area = ramp(z + ha + hb) - ramp(z - ha + hb) - ramp(z + ha - hb) + ramp(z - ha - hb);
    (area / (a * b)).clamp(0.0, 1.0)
}

/// Convenience wrapper building a one-off [`Mollifier`].
pub fn mollified_profile(
    config: &Configuration,
    width: f64,
    points: usize,
) -> Result<GridFunction> {
    Mollifier::new(config.geometry().side(), points, width)?.apply(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TorusGeometry;

    #[test]
    fn integral_and_distance() {
        let a = GridFunction::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = GridFunction::new(1, 4, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.integral(), 2.5);
        assert_eq!(a.l1_distance(&b).unwrap(), 1.5);
        assert!(a.l1_distance(&GridFunction::zeros(1, 8)).is_err());
    }

    #[test]
    fn neighbours_wrap() {
        let g = GridFunction::zeros(2, 4);
        // index of (1, 3)
        let i = 4 + 3;
        assert_eq!(g.neighbour(i, 1, 1), 4);
        assert_eq!(g.neighbour(i, 0, -2), 12 + 3);
        assert_eq!(g.point(i), vec![0.25, 0.75]);
    }

    #[test]
    fn restriction_picks_coarse_points() {
        let fine = GridFunction::sample(2, 8, |u| u[0] * 10.0 + u[1]);
        let coarse = fine.restrict(2).unwrap();
        let direct = GridFunction::sample(2, 4, |u| u[0] * 10.0 + u[1]);
        assert_eq!(coarse, direct);
    }

    #[test]
    fn csv_layout() {
        let g = GridFunction::new(1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "u1,rho\n0,1\n0.5,2\n");
    }

    #[test]
    fn difference_cdf_is_a_cdf() {
        let (a, b) = (0.1, 0.25);
        assert_eq!(difference_cdf(-1.0, a, b), 0.0);
        assert_eq!(difference_cdf(1.0, a, b), 1.0);
        assert!((difference_cdf(0.0, a, b) - 0.5).abs() < 1e-15);
        // flat middle of the trapezoid density: slope 1/b
        let slope = (difference_cdf(0.01, a, b) - difference_cdf(-0.01, a, b)) / 0.02;
        assert!((slope - 1.0 / b).abs() < 1e-9);
    }

    #[test]
    fn constant_configuration_is_reproduced() {
        for (dim, n, m, w) in [(1, 64, 256, 0.25), (1, 100, 64, 0.13), (2, 12, 16, 0.2)] {
            let geom = TorusGeometry::new(dim, n).unwrap();
            let c = Configuration::constant(geom, 3);
            let rho = mollified_profile(&c, w, m).unwrap();
            for &v in rho.values() {
                assert!((v - 3.0).abs() < 1e-12, "got {v}");
            }
        }
    }

    #[test]
    fn mass_is_preserved() {
        let geom = TorusGeometry::new(1, 37).unwrap();
        let occ: Vec<u32> = (0..37).map(|i| (i * 7 % 5) as u32).collect();
        let c = Configuration::new(geom, occ).unwrap();
        let rho = mollified_profile(&c, 0.11, 50).unwrap();
        assert!((rho.integral() - c.density()).abs() < 1e-12);

        let geom2 = TorusGeometry::new(2, 9).unwrap();
        let occ2: Vec<u32> = (0..81).map(|i| (i * 3 % 4) as u32).collect();
        let c2 = Configuration::new(geom2, occ2).unwrap();
        let rho2 = mollified_profile(&c2, 0.2, 20).unwrap();
        assert!((rho2.integral() - c2.density()).abs() < 1e-12);
    }

    #[test]
    fn single_particle_plateau() {
        let n = 100;
        let m = 200;
        let w = 0.1;
        let geom = TorusGeometry::new(1, n).unwrap();
        let mut c = Configuration::empty(geom);
        c.set(0, 1);
        let rho = mollified_profile(&c, w, m).unwrap();
        let plateau = 1.0 / (n as f64 * 2.0 * w);
        let blur = 0.5 / m as f64 + 0.5 / n as f64;
        for (i, &v) in rho.values().iter().enumerate() {
            let u = i as f64 / m as f64;
            let dist = u.min(1.0 - u);
            if dist <= w - blur - 1e-12 {
                assert!((v - plateau).abs() < 1e-12, "u={u} v={v}");
            } else if dist >= w + blur + 1e-12 {
                assert_eq!(v, 0.0, "u={u}");
            }
        }
    }

    #[test]
    fn width_below_spacing_is_rejected() {
        assert!(Mollifier::new(10, 16, 0.05).is_err());
        assert!(Mollifier::new(10, 16, 0.1).is_ok());
    }
}
