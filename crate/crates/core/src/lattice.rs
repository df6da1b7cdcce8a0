//! Torus geometry, particle configurations and elementary moves.
//!
//! Sites are addressed by their row-major linear index; the last axis varies
//! fastest. Axes are numbered from zero.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear index of a site of the torus.
pub type Site = usize;

/// Smallest side length accepted by the geometry. Smaller tori would make
/// `x + e_j` and `x - e_j` coincide.
pub const MIN_SIDE: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGeometry {
    dim: usize,
    side: usize,
    sites: usize,
    strides: Vec<usize>,
}

impl TorusGeometry {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGeometry("dimension must be positive".into()));
        }
        if side < MIN_SIDE {
            return Err(Error::InvalidGeometry(format!(
                "side {side} is below the minimum {MIN_SIDE}"
            )));
        }
        let sites = u32::try_from(dim)
            .ok()
            .and_then(|d| side.checked_pow(d))
            .ok_or_else(|| Error::InvalidGeometry(format!("{side}^{dim} sites overflow")))?;
        let mut strides = vec![1; dim];
        for axis in (0..dim.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * side;
        }
        Ok(Self {
            dim,
            side,
            sites,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn site_count(&self) -> usize {
        self.sites
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis < self.dim {
            Ok(())
        } else {
            Err(Error::AxisOutOfRange {
                axis,
                dim: self.dim,
            })
        }
    }

    pub fn check_site(&self, x: Site) -> Result<()> {
        if x < self.sites {
            Ok(())
        } else {
            Err(Error::SiteOutOfRange {
                site: x,
                sites: self.sites,
            })
        }
    }

    /// Coordinate of `x` along `axis`.
    #[inline]
    pub fn coordinate(&self, x: Site, axis: usize) -> usize {
        (x / self.strides[axis]) % self.side
    }

    pub fn coordinates(&self, x: Site) -> Vec<usize> {
        (0..self.dim).map(|axis| self.coordinate(x, axis)).collect()
    }

    pub fn site_at(&self, coords: &[usize]) -> Result<Site> {
        if coords.len() != self.dim {
            return Err(Error::InvalidGeometry(format!(
                "expected {} coordinates, got {}",
                self.dim,
                coords.len()
            )));
        }
        let mut x = 0;
        for (axis, &c) in coords.iter().enumerate() {
            if c >= self.side {
                return Err(Error::InvalidGeometry(format!(
                    "coordinate {c} outside 0..{}",
                    self.side
                )));
            }
            x += c * self.strides[axis];
        }
        Ok(x)
    }

    /// `x + steps·e_axis` with periodic wrap. Unchecked hot-path variant of
    /// [`TorusGeometry::shift_site`].
    #[inline]
    pub fn offset(&self, x: Site, axis: usize, steps: isize) -> Site {
        let n = self.side as isize;
        let stride = self.strides[axis];
        let c = if stride == 1 {
            x % self.side
        } else {
            (x / stride) % self.side
        } as isize;
        let mut shifted = c + steps;
        if shifted < 0 {
            shifted += n;
        } else if shifted >= n {
            shifted -= n;
        }
        if !(0..n).contains(&shifted) {
            shifted = (c + steps).rem_euclid(n);
        }
        (x as isize + (shifted - c) * stride as isize) as Site
    }

    pub fn shift_site(&self, x: Site, axis: usize, steps: i64) -> Result<Site> {
        self.check_axis(axis)?;
        self.check_site(x)?;
        let steps = steps.rem_euclid(self.side as i64) as isize;
        Ok(self.offset(x, axis, steps))
    }

    /// Translation `x + z` of two sites, coordinate-wise modulo the side.
    pub fn translate(&self, x: Site, z: Site) -> Site {
        (0..self.dim).fold(x, |acc, axis| {
            self.offset(acc, axis, self.coordinate(z, axis) as isize)
        })
    }

    /// Axis and direction (`+1`/`-1`) of the bond `x → y`, if the two sites
    /// are nearest neighbours in the sum norm.
    pub fn bond_direction(&self, x: Site, y: Site) -> Option<(usize, isize)> {
        (0..self.dim).find_map(|axis| {
            if self.offset(x, axis, 1) == y {
                Some((axis, 1))
            } else if self.offset(x, axis, -1) == y {
                Some((axis, -1))
            } else {
                None
            }
        })
    }

    /// Lattice point `x/N` in `[0,1)^d`.
    pub fn macro_point(&self, x: Site) -> Vec<f64> {
        (0..self.dim)
            .map(|axis| self.coordinate(x, axis) as f64 / self.side as f64)
            .collect()
    }
}

/// Occupation numbers `η(x)` on every site, with the particle count cached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration {
    geometry: TorusGeometry,
    occupancy: Vec<u32>,
    total: u64,
}

impl Configuration {
    pub fn new(geometry: TorusGeometry, occupancy: Vec<u32>) -> Result<Self> {
        if occupancy.len() != geometry.site_count() {
            return Err(Error::InvalidGeometry(format!(
                "{} occupancies for {} sites",
                occupancy.len(),
                geometry.site_count()
            )));
        }
        let total = occupancy.iter().map(|&k| u64::from(k)).sum();
        Ok(Self {
            geometry,
            occupancy,
            total,
        })
    }

    pub fn empty(geometry: TorusGeometry) -> Self {
        let occupancy = vec![0; geometry.site_count()];
        Self {
            geometry,
            occupancy,
            total: 0,
        }
    }

    pub fn constant(geometry: TorusGeometry, k: u32) -> Self {
        let occupancy = vec![k; geometry.site_count()];
        let total = u64::from(k) * occupancy.len() as u64;
        Self {
            geometry,
            occupancy,
            total,
        }
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geometry
    }

    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    #[inline]
    pub fn get(&self, x: Site) -> u32 {
        self.occupancy[x]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn density(&self) -> f64 {
        self.total as f64 / self.geometry.site_count() as f64
    }

    pub fn set(&mut self, x: Site, k: u32) {
        self.total = self.total - u64::from(self.occupancy[x]) + u64::from(k);
        self.occupancy[x] = k;
    }

    fn check_jump(&self, x: Site, y: Site) -> Result<()> {
        self.geometry.check_site(x)?;
        self.geometry.check_site(y)?;
        if self.geometry.bond_direction(x, y).is_none() {
            return Err(Error::NotNeighbours(x, y));
        }
        if self.occupancy[x] == 0 {
            return Err(Error::EmptySource(x));
        }
        Ok(())
    }

    /// `η^{x,y}`: one particle moved from `x` to the neighbouring site `y`.
    pub fn apply_jump(&self, x: Site, y: Site) -> Result<Configuration> {
        let mut next = self.clone();
        next.jump_in_place(x, y)?;
        Ok(next)
    }

    pub fn jump_in_place(&mut self, x: Site, y: Site) -> Result<()> {
        self.check_jump(x, y)?;
        self.move_particle(x, y);
        Ok(())
    }

    /// Moves one particle without validating the bond. Callers guarantee
    /// `η(x) ≥ 1`.
    #[inline]
    pub(crate) fn move_particle(&mut self, x: Site, y: Site) {
        debug_assert!(self.occupancy[x] > 0);
        self.occupancy[x] -= 1;
        self.occupancy[y] += 1;
    }

    /// Mean occupancy over the ℓ∞ cube of radius `l` centred at `x`.
    pub fn block_average(&self, x: Site, l: usize) -> Result<f64> {
        self.geometry.check_site(x)?;
        if 2 * l + 1 > self.geometry.side() {
            return Err(Error::BlockTooLarge {
                radius: l,
                side: self.geometry.side(),
            });
        }
        let dim = self.geometry.dim();
        let width = 2 * l + 1;
        let cells = width.pow(dim as u32);
        let mut sum = 0u64;
        for cell in 0..cells {
            let mut y = x;
            let mut rest = cell;
            for axis in 0..dim {
                let step = (rest % width) as isize - l as isize;
                rest /= width;
                y = self.geometry.offset(y, axis, step);
            }
            sum += u64::from(self.occupancy[y]);
        }
        Ok(sum as f64 / cells as f64)
    }

    /// The shifted configuration `(τ_z η)(y) = η(y − z)`.
    pub fn shifted(&self, z: Site) -> Configuration {
        let mut occupancy = vec![0; self.occupancy.len()];
        for (x, &k) in self.occupancy.iter().enumerate() {
            occupancy[self.geometry.translate(x, z)] = k;
        }
        Configuration {
            geometry: self.geometry.clone(),
            occupancy,
            total: self.total,
        }
    }

    pub fn max_occupancy(&self) -> u32 {
        self.occupancy.iter().copied().max().unwrap_or(0)
    }
}

/// Header line of a configuration snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub dim: usize,
    pub side: usize,
    pub m: u32,
    pub seed: u64,
    pub t_macro: f64,
}

/// Writes `d N m seed t_macro` followed by the occupancies in site order.
pub fn write_snapshot<W: Write>(
    mut out: W,
    config: &Configuration,
    m: u32,
    seed: u64,
    t_macro: f64,
) -> Result<()> {
    let g = config.geometry();
    writeln!(out, "{} {} {} {} {}", g.dim(), g.side(), m, seed, t_macro)?;
    let line = config
        .occupancy()
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    writeln!(out, "{line}")?;
    Ok(())
}

/// Lines starting with `#` are ignored.
pub fn read_snapshot<R: BufRead>(input: R) -> Result<(SnapshotHeader, Configuration)> {
    let mut lines = input.lines().filter(|l| {
        l.as_ref()
            .map_or(true, |l| !l.trim_start().starts_with('#'))
    });
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty snapshot".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Parse(format!(
            "snapshot header needs `d N m seed t_macro`, got `{header}`"
        )));
    }
    let bad = |what: &str| Error::Parse(format!("bad {what} in snapshot header"));
    let header = SnapshotHeader {
        dim: fields[0].parse().map_err(|_| bad("d"))?,
        side: fields[1].parse().map_err(|_| bad("N"))?,
        m: fields[2].parse().map_err(|_| bad("m"))?,
        seed: fields[3].parse().map_err(|_| bad("seed"))?,
        t_macro: fields[4].parse().map_err(|_| bad("t_macro"))?,
    };
    let mut occupancy = Vec::new();
    for line in lines {
        for tok in line?.split_whitespace() {
            occupancy.push(
                tok.parse::<u32>()
                    .map_err(|_| Error::Parse(format!("bad occupancy `{tok}`")))?,
            );
        }
    }
    let geometry = TorusGeometry::new(header.dim, header.side)?;
    let config = Configuration::new(geometry, occupancy)?;
    Ok((header, config))
}
