//! Macroscopic profiles on the continuum torus `[0,1)^d`.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A real function on `[0,1)^d`; used both for density profiles and for
/// test functions `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProfileShape {
    Constant {
        value: f64,
    },
    /// `a0 + a1·cos(2π k·u)`.
    Cosine {
        a0: f64,
        a1: f64,
        wavevector: Vec<f64>,
    },
    /// Values on a uniform `points^d` grid, row-major, interpolated
    /// multilinearly with periodic wrap.
    Tabulated {
        dim: usize,
        points: usize,
        values: Vec<f64>,
    },
}

impl ProfileShape {
    /// Parses `const:<c>`, `cosine:<a0>,<a1>,<k>` or `file:<path>`. For the
    /// cosine form the wavevector is `k·e_1`.
    pub fn parse(spec: &str, dim: usize) -> Result<Self> {
        let (kind, args) = spec
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("profile `{spec}` has no `kind:` prefix")))?;
        let numbers = |args: &str| -> Result<Vec<f64>> {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number `{a}` in profile `{spec}`")))
                })
                .collect()
        };
        match kind {
            "const" => match numbers(args)?.as_slice() {
                [c] => Ok(ProfileShape::Constant { value: *c }),
                _ => Err(Error::Parse(format!("`const` takes one value: `{spec}`"))),
            },
            "cosine" => match numbers(args)?.as_slice() {
                [a0, a1, k] => {
                    let mut wavevector = vec![0.0; dim];
                    wavevector[0] = *k;
                    Ok(ProfileShape::Cosine {
                        a0: *a0,
                        a1: *a1,
                        wavevector,
                    })
                }
                _ => Err(Error::Parse(format!("`cosine` takes `a0,a1,k`: `{spec}`"))),
            },
            "file" => Self::from_file(Path::new(args), dim),
            other => Err(Error::Parse(format!("unknown profile kind `{other}`"))),
        }
    }

    /// Reads a grid profile: one row per grid point in row-major order, the
    /// last column holding the value (`u rho` in one dimension).
    pub fn from_file(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_table_text(&text, dim)
    }

    pub fn from_table_text(text: &str, dim: usize) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let last = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .rfind(|s| !s.is_empty())
                .ok_or_else(|| Error::Parse(format!("line {}: empty row", lineno + 1)))?;
            values.push(
                last.parse::<f64>().map_err(|_| {
                    Error::Parse(format!("line {}: bad value `{last}`", lineno + 1))
                })?,
            );
        }
        let points = (values.len() as f64).powf(1.0 / dim as f64).round() as usize;
        if points == 0 || points.pow(dim as u32) != values.len() {
            return Err(Error::Parse(format!(
                "{} rows do not form a {dim}-dimensional square grid",
                values.len()
            )));
        }
        Ok(ProfileShape::Tabulated {
            dim,
            points,
            values,
        })
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            ProfileShape::Constant { value } => *value,
            ProfileShape::Cosine { a0, a1, wavevector } => {
                let phase: f64 = wavevector.iter().zip(u).map(|(k, x)| k * x).sum();
                a0 + a1 * (TAU * phase).cos()
            }
            ProfileShape::Tabulated {
                dim,
                points,
                values,
            } => interpolate(*dim, *points, values, u),
        }
    }

    /// Lower and upper bound over the torus.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ProfileShape::Constant { value } => (*value, *value),
            ProfileShape::Cosine { a0, a1, wavevector } => {
                if wavevector.iter().all(|&k| k == 0.0) {
                    (a0 + a1, a0 + a1)
                } else {
                    (a0 - a1.abs(), a0 + a1.abs())
                }
            }
            ProfileShape::Tabulated { values, .. } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
        }
    }

    pub fn dim_compatible(&self, dim: usize) -> bool {
        match self {
            ProfileShape::Constant { .. } => true,
            ProfileShape::Cosine { wavevector, .. } => wavevector.len() == dim,
            ProfileShape::Tabulated { dim: d, .. } => *d == dim,
        }
    }
}

fn interpolate(dim: usize, points: usize, values: &[f64], u: &[f64]) -> f64 {
    let mut base = vec![0usize; dim];
    let mut frac = vec![0.0; dim];
    for axis in 0..dim {
        let pos = u[axis].rem_euclid(1.0) * points as f64;
        let i = pos.floor();
        base[axis] = (i as usize) % points;
        frac[axis] = pos - i;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << dim) {
        let mut weight = 1.0;
        let mut index = 0;
        for axis in 0..dim {
            let up = (corner >> axis) & 1 == 1;
            let i = if up {
                (base[axis] + 1) % points
            } else {
                base[axis]
            };
            weight *= if up { frac[axis] } else { 1.0 - frac[axis] };
            index = index * points + i;
        }
        if weight != 0.0 {
            acc += weight * values[index];
        }
    }
    acc
}

/// A density profile bounded by `0 < δ₀ ≤ ρ₀(u) ≤ δ₁`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    shape: ProfileShape,
    lower: f64,
    upper: f64,
}

impl DensityProfile {
    pub fn new(shape: ProfileShape) -> Result<Self> {
        let (lower, upper) = shape.bounds();
        if !(lower > 0.0 && upper.is_finite()) {
            return Err(Error::param(
                "profile",
                format!("density bounds [{lower}, {upper}] are not strictly positive and finite"),
            ));
        }
        Ok(Self {
            shape,
            lower,
            upper,
        })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(ProfileShape::Constant { value })
    }

    /// `a0 + a1·cos(2π k u_1)` in `dim` dimensions.
    pub fn cosine(a0: f64, a1: f64, k: f64, dim: usize) -> Result<Self> {
        let mut wavevector = vec![0.0; dim];
        wavevector[0] = k;
        Self::new(ProfileShape::Cosine { a0, a1, wavevector })
    }

    pub fn parse(spec: &str, dim: usize) -> Result<Self> {
        Self::new(ProfileShape::parse(spec, dim)?)
    }

    pub fn shape(&self) -> &ProfileShape {
        &self.shape
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        self.shape.eval(u)
    }

    /// `(δ₀, δ₁)`.
    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_grammar() {
        let c = DensityProfile::parse("const:1.5", 1).unwrap();
        assert_eq!(c.eval(&[0.3]), 1.5);
        assert_eq!(c.bounds(), (1.5, 1.5));
        let cos = DensityProfile::parse("cosine:1.0,0.2,1", 2).unwrap();
        assert!((cos.eval(&[0.0, 0.7]) - 1.2).abs() < 1e-15);
        assert!((cos.eval(&[0.5, 0.1]) - 0.8).abs() < 1e-15);
        assert_eq!(cos.bounds(), (0.8, 1.2));
        assert!(DensityProfile::parse("gauss:1", 1).is_err());
        assert!(DensityProfile::parse("cosine:1,2", 1).is_err());
        assert!(DensityProfile::parse("const:-1", 1).is_err());
        assert!(DensityProfile::parse("cosine:0.1,0.2,1", 1).is_err());
    }

    #[test]
    fn tabulated_interpolation() {
        let shape = ProfileShape::from_table_text("0 1\n0.25 2\n0.5 3\n0.75 2\n", 1).unwrap();
        assert_eq!(shape.eval(&[0.5]), 3.0);
        assert!((shape.eval(&[0.125]) - 1.5).abs() < 1e-15);
        // periodic wrap between the last knot and the first
        assert!((shape.eval(&[0.875]) - 1.5).abs() < 1e-15);
        assert_eq!(shape.bounds(), (1.0, 3.0));

        let grid = ProfileShape::from_table_text("1\n2\n3\n4\n", 2).unwrap();
        // row-major: (0,0)=1 (0,1)=2 (1,0)=3 (1,1)=4
        assert!((grid.eval(&[0.25, 0.25]) - 2.5).abs() < 1e-15);
        assert!(ProfileShape::from_table_text("1\n2\n3\n", 2).is_err());
    }
}
