//! Orthographic splatting onto the receiver's azimuth/elevation grid and the
//! depth-sorted tile index.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, Matrix2x3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{AngularGrid, GaussianPrimitive};
use crate::sort::radix_sort_pairs;
use crate::{Mat3, Vec3};

/// Rays per tile edge.
pub const TILE_SIZE: usize = 16;

/// Offsets shorter than this are treated as coincident with the receiver.
pub const MIN_OFFSET: f64 = 1e-9;

/// Relative slack on bounding spheres so cap tests never reject a ray the
/// exact intersection would accept.
const CAP_SLACK: f64 = 1e-9;

/// Cone of directions from the receiver that can reach a primitive's
/// 3-sigma ellipsoid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cap {
    pub axis: Vec3,
    /// Cosine of the half-angle; `-1` covers the whole sphere.
    pub cos_half: f64,
    pub half_angle: f64,
}

impl Cap {
    pub fn full() -> Self {
        Self {
            axis: Vec3::z(),
            cos_half: -1.0,
            half_angle: PI,
        }
    }

    /// Cap subtending a sphere of radius `radius` at distance `depth`.
    pub fn of_sphere(axis: Vec3, depth: f64, radius: f64) -> Self {
        let r = radius * (1.0 + CAP_SLACK);
        if depth <= r {
            return Self::full();
        }
        let half_angle = (r / depth).asin() + CAP_SLACK;
        Self {
            axis,
            cos_half: half_angle.cos(),
            half_angle,
        }
    }

    pub fn contains(&self, dir: &Vec3) -> bool {
        self.cos_half <= -1.0 || dir.dot(&self.axis) >= self.cos_half
    }
}

/// Projection of one primitive onto the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub gaussian_index: usize,
    /// Continuous grid coordinates of the bearing, in cells.
    pub center_u: f64,
    pub center_v: f64,
    /// Three-sigma radius of the projected covariance, in cells.
    pub radius_px: f64,
    /// Distance from the receiver to the mean.
    pub depth: f64,
    /// Conservative direction cone; `None` tiles by the disc alone.
    pub cap: Option<Cap>,
}

/// `(distance, azimuth, elevation)` of `p` seen from `rx`, azimuth in
/// `[0, 2 pi)` and elevation in `[-pi/2, pi/2]`.
pub fn to_spherical(p: &Vec3, rx: &Vec3) -> Result<(f64, f64, f64)> {
    let d = p - rx;
    let zeta = d.norm();
    if !(zeta > MIN_OFFSET) {
        return Err(Error::DegenerateDirection(format!(
            "point {p:?} coincides with receiver {rx:?}"
        )));
    }
    let mut alpha = d.y.atan2(d.x);
    if alpha < 0.0 {
        alpha += 2.0 * PI;
    }
    if alpha >= 2.0 * PI {
        alpha -= 2.0 * PI;
    }
    let beta = FRAC_PI_2 - (d.z / zeta).clamp(-1.0, 1.0).acos();
    Ok((zeta, alpha, beta))
}

/// Discretize a direction on `grid`.
pub fn to_grid(grid: &AngularGrid, alpha: f64, beta: f64) -> (usize, usize) {
    grid.to_grid(alpha, beta)
}

/// Partial derivatives of azimuth and elevation with respect to the offset
/// `o`, as rows `[d alpha / d o; d beta / d o]`. `None` on the polar axis.
pub fn angle_jacobian(o: &Vec3) -> Option<Matrix2x3<f64>> {
    let rho2 = o.x * o.x + o.y * o.y;
    let r2 = rho2 + o.z * o.z;
    let rho = rho2.sqrt();
    if !(rho > 1e-12 * r2.sqrt()) {
        return None;
    }
    Some(Matrix2x3::new(
        -o.y / rho2,
        o.x / rho2,
        0.0,
        -o.z * o.x / (r2 * rho),
        -o.z * o.y / (r2 * rho),
        rho / r2,
    ))
}

/// Jacobian of the grid coordinates `(u, v)` with respect to world
/// position, in cells per meter.
pub fn grid_jacobian(o: &Vec3, cell_deg: f64) -> Option<Matrix2x3<f64>> {
    angle_jacobian(o).map(|j| j * (180.0 / PI / cell_deg))
}

/// Three-sigma radius in cells of `cov` projected at offset `o`.
pub fn projected_radius(o: &Vec3, cov: &Mat3, cell_deg: f64) -> f64 {
    match grid_jacobian(o, cell_deg) {
        Some(j) => {
            let c2: Matrix2<f64> = j * cov * j.transpose();
            let c2 = (c2 + c2.transpose()) * 0.5;
            let lmax = SymmetricEigen::new(c2).eigenvalues.max().max(0.0);
            3.0 * lmax.sqrt()
        }
        None => f64::INFINITY,
    }
}

/// Project primitive `index` as seen from `rx`. `None` when the mean lies
/// inside the ray-emitting sphere of radius `ress_radius`.
pub fn project_gaussian(
    p: &GaussianPrimitive,
    index: usize,
    rx: &Vec3,
    ress_radius: f64,
    grid: &AngularGrid,
) -> Result<Option<Splat2D>> {
    let (depth, alpha, beta) = to_spherical(&p.mean, rx)?;
    if depth < ress_radius {
        return Ok(None);
    }
    let o = p.mean - rx;
    let radius_px = projected_radius(&o, &p.covariance(), grid.cell_deg);
    Ok(Some(Splat2D {
        gaussian_index: index,
        center_u: alpha.to_degrees() / grid.cell_deg,
        center_v: (beta.to_degrees() + 90.0) / grid.cell_deg,
        radius_px,
        depth,
        cap: Some(Cap::of_sphere(o / depth, depth, p.bounding_radius())),
    }))
}

/// Project every primitive, dropping those inside the ray-emitting sphere.
pub fn project_all(
    primitives: &[GaussianPrimitive],
    rx: &Vec3,
    ress_radius: f64,
    grid: &AngularGrid,
) -> Result<Vec<Splat2D>> {
    let out: Result<Vec<Option<Splat2D>>> = primitives
        .par_iter()
        .enumerate()
        .map(|(i, p)| project_gaussian(p, i, rx, ress_radius, grid))
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

/// Azimuth distance in cells with wraparound over `period`.
pub fn wrapped_delta(u: f64, center: f64, period: f64) -> f64 {
    let d = (u - center).abs().rem_euclid(period);
    d.min(period - d)
}

/// Disc test between a splat and ray cell `(u, v)`.
pub fn intersects(s: &Splat2D, u: usize, v: usize, period: usize) -> bool {
    let du = wrapped_delta(u as f64, s.center_u, period as f64);
    let dv = v as f64 - s.center_v;
    du * du + dv * dv <= s.radius_px * s.radius_px
}

/// Sort key: tile in the high word, depth bits in the low word.
pub fn depth_key(tile: usize, depth: f64) -> u64 {
    let d = depth as f32;
    assert!(d >= 0.0, "negative depth {depth} in tile key");
    ((tile as u64) << 32) | d.to_bits() as u64
}

pub fn key_tile(key: u64) -> usize {
    (key >> 32) as usize
}

pub fn key_depth(key: u64) -> f32 {
    f32::from_bits(key as u32)
}

/// Splats bucketed by 16x16 ray tiles, depth-sorted within each tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TileIndex {
    pub tile_w: usize,
    pub tile_h: usize,
    pub tiles_u: usize,
    pub tiles_v: usize,
    pub n_az: usize,
    pub n_el: usize,
    /// `(key, gaussian_index)` sorted by key.
    pub entries: Vec<(u64, u32)>,
    /// Half-open ranges into `entries`, one per tile.
    pub ranges: Vec<(usize, usize)>,
}

impl TileIndex {
    pub fn n_tiles(&self) -> usize {
        self.tiles_u * self.tiles_v
    }

    pub fn tile_of(&self, u: usize, v: usize) -> usize {
        (u / self.tile_w) * self.tiles_v + v / self.tile_h
    }

    /// Ray cell ranges `(u0..u1, v0..v1)` of a tile.
    pub fn tile_cells(&self, tile: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tu = tile / self.tiles_v;
        let tv = tile % self.tiles_v;
        let u0 = tu * self.tile_w;
        let v0 = tv * self.tile_h;
        (
            u0..(u0 + self.tile_w).min(self.n_az),
            v0..(v0 + self.tile_h).min(self.n_el),
        )
    }

    pub fn tile_entries(&self, tile: usize) -> &[(u64, u32)] {
        let (a, b) = self.ranges[tile];
        &self.entries[a..b]
    }
}

struct TileLayout {
    tiles_u: usize,
    tiles_v: usize,
    n_az: usize,
    n_el: usize,
    period: usize,
}

impl TileLayout {
    fn new(grid: &AngularGrid) -> Self {
        Self {
            tiles_u: grid.n_az.div_ceil(TILE_SIZE),
            tiles_v: grid.n_el.div_ceil(TILE_SIZE),
            n_az: grid.n_az,
            n_el: grid.n_el,
            period: grid.az_period(),
        }
    }

    fn cols(&self, tu: usize) -> (usize, usize) {
        (tu * TILE_SIZE, ((tu + 1) * TILE_SIZE).min(self.n_az) - 1)
    }

    fn rows(&self, tv: usize) -> (usize, usize) {
        (tv * TILE_SIZE, ((tv + 1) * TILE_SIZE).min(self.n_el) - 1)
    }

    /// Exact disc-versus-tile test on the ray lattice.
    fn disc_hits_tile(&self, s: &Splat2D, tu: usize, tv: usize) -> bool {
        let (u0, u1) = self.cols(tu);
        let (v0, v1) = self.rows(tv);
        let r2 = s.radius_px * s.radius_px;
        let dv = s.center_v.round().clamp(v0 as f64, v1 as f64) - s.center_v;
        if dv * dv > r2 {
            return false;
        }
        let period = self.period as f64;
        let mut du = f64::INFINITY;
        for u in u0..=u1 {
            du = du.min(wrapped_delta(u as f64, s.center_u, period));
        }
        du * du + dv * dv <= r2
    }

    fn mark_disc(&self, s: &Splat2D, hit: &mut [bool]) {
        if !(s.radius_px >= 0.0) {
            return;
        }
        let r = s.radius_px;
        let v_lo = (s.center_v - r).floor().max(0.0);
        let v_hi = (s.center_v + r).ceil().min((self.n_el - 1) as f64);
        if v_lo > v_hi {
            return;
        }
        let tv0 = v_lo as usize / TILE_SIZE;
        let tv1 = v_hi as usize / TILE_SIZE;
        let period = self.period as f64;
        for tu in 0..self.tiles_u {
            let (u0, u1) = self.cols(tu);
            // Lower bound on the wrapped distance from the column span.
            let mid = 0.5 * (u0 + u1) as f64;
            let half = 0.5 * (u1 - u0) as f64;
            if wrapped_delta(mid, s.center_u, period) - half > r {
                continue;
            }
            for tv in tv0..=tv1 {
                let t = tu * self.tiles_v + tv;
                if !hit[t] && self.disc_hits_tile(s, tu, tv) {
                    hit[t] = true;
                }
            }
        }
    }

    /// Mark every tile holding a cell whose angular extent overlaps the
    /// cap's azimuth/elevation bounding box.
    fn mark_cap(&self, cap: &Cap, cell_deg: f64, hit: &mut [bool]) {
        let cell = cell_deg.to_radians();
        let (beta_lo, beta_hi, az) = if cap.cos_half <= -1.0 {
            (-FRAC_PI_2, FRAC_PI_2, None)
        } else {
            let beta_c = cap.axis.z.clamp(-1.0, 1.0).asin();
            let lo = beta_c - cap.half_angle;
            let hi = beta_c + cap.half_angle;
            if lo <= -FRAC_PI_2 || hi >= FRAC_PI_2 {
                (lo.max(-FRAC_PI_2), hi.min(FRAC_PI_2), None)
            } else {
                let ratio = cap.half_angle.sin() / beta_c.cos();
                if ratio >= 1.0 {
                    (lo, hi, None)
                } else {
                    let alpha_c = cap.axis.y.atan2(cap.axis.x);
                    let w = ratio.asin() + CAP_SLACK;
                    (lo, hi, Some((alpha_c - w, alpha_c + w)))
                }
            }
        };
        let v_lo = ((beta_lo + FRAC_PI_2) / cell - CAP_SLACK).floor().max(0.0) as usize;
        let v_hi = ((beta_hi + FRAC_PI_2) / cell + CAP_SLACK).floor();
        if v_hi < 0.0 || v_lo >= self.n_el {
            return;
        }
        let v_hi = (v_hi as usize).min(self.n_el - 1);
        let tv0 = v_lo / TILE_SIZE;
        let tv1 = v_hi / TILE_SIZE;
        let mut mark_cols = |u_lo: usize, u_hi: usize| {
            if u_lo >= self.n_az {
                return;
            }
            let u_hi = u_hi.min(self.n_az - 1);
            for tu in u_lo / TILE_SIZE..=u_hi / TILE_SIZE {
                for tv in tv0..=tv1 {
                    hit[tu * self.tiles_v + tv] = true;
                }
            }
        };
        match az {
            None => mark_cols(0, self.n_az - 1),
            Some((a_lo, a_hi)) => {
                let period = self.period as i64;
                let u_lo = (a_lo / cell - CAP_SLACK).floor() as i64;
                let u_hi = (a_hi / cell + CAP_SLACK).floor() as i64;
                if u_hi - u_lo + 1 >= period {
                    mark_cols(0, self.n_az - 1);
                    return;
                }
                let a = u_lo.rem_euclid(period);
                let b = u_hi.rem_euclid(period);
                if a <= b {
                    mark_cols(a as usize, b as usize);
                } else {
                    mark_cols(a as usize, (period - 1) as usize);
                    mark_cols(0, b as usize);
                }
            }
        }
    }
}

/// Bucket splats into tiles and sort each tile by depth.
///
/// A splat enters every tile its disc touches and every tile its cap's
/// bounding box touches.
pub fn build_tiles(splats: &[Splat2D], grid: &AngularGrid) -> TileIndex {
    let layout = TileLayout::new(grid);
    let n_tiles = layout.tiles_u * layout.tiles_v;
    let mut entries: Vec<(u64, u32)> = splats
        .par_iter()
        .map(|s| {
            let mut hit = vec![false; n_tiles];
            layout.mark_disc(s, &mut hit);
            if let Some(cap) = &s.cap {
                layout.mark_cap(cap, grid.cell_deg, &mut hit);
            }
            hit.iter()
                .enumerate()
                .filter(|(_, &h)| h)
                .map(|(t, _)| (depth_key(t, s.depth), s.gaussian_index as u32))
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();
    radix_sort_pairs(&mut entries);
    let mut ranges = vec![(0, 0); n_tiles];
    let mut start = 0;
    while start < entries.len() {
        let t = key_tile(entries[start].0);
        let mut end = start;
        while end < entries.len() && key_tile(entries[end].0) == t {
            end += 1;
        }
        ranges[t] = (start, end);
        start = end;
    }
    TileIndex {
        tile_w: TILE_SIZE,
        tile_h: TILE_SIZE,
        tiles_u: layout.tiles_u,
        tiles_v: layout.tiles_v,
        n_az: grid.n_az,
        n_el: grid.n_el,
        entries,
        ranges,
    }
}
