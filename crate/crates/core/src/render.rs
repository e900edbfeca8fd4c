//! Forward complex ray tracing.
//!
//! Every grid cell emits one ray from the ray-emitting sphere through the
//! cell-center direction. A ray collects its intersections with 3-sigma
//! ellipsoids, orders them by segment midpoint and accumulates
//! `sum_k w_k psi_k T_k` with `T_{k+1} = T_k rho_k`.

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fle;
use crate::scene::{AngularGrid, GaussianPrimitive, RFScene, MAX_CONDITION};
use crate::splat::{self, Cap, TileIndex};
use crate::{Complex, Mat3, Vec3};

/// Squared Mahalanobis radius of the ellipsoid a ray must cross.
pub const LEVEL: f64 = 9.0;

/// Accumulation stops once the cumulative transmittance falls below this.
pub const T_EPSILON: f64 = 1e-6;

const NORM_3D: f64 = 15.749609945722419; // (2 pi)^{3/2}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub min_t: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, min_t: f64) -> Result<Self> {
        if ((dir.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::InvalidInput(format!("ray direction {dir:?} is not unit")));
        }
        if !(min_t > 0.0) {
            return Err(Error::InvalidInput(format!("ray min_t {min_t} must be positive")));
        }
        Ok(Self { origin, dir, min_t })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub gaussian_index: usize,
    pub t_in: f64,
    pub t_out: f64,
    pub t_mid: f64,
    pub weight: f64,
}

/// Real `n_az x n_el` frame stored azimuth-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFrame {
    pub n_az: usize,
    pub n_el: usize,
    pub data: Vec<f64>,
}

impl SpectrumFrame {
    pub fn zeros(n_az: usize, n_el: usize) -> Self {
        Self {
            n_az,
            n_el,
            data: vec![0.0; n_az * n_el],
        }
    }

    pub fn new(n_az: usize, n_el: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_az * n_el {
            return Err(Error::shape(format!("{n_az}x{n_el} values"), data.len()));
        }
        Ok(Self { n_az, n_el, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n_el + v]
    }

    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[u * self.n_el + v] = value;
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n_az != other.n_az || self.n_el != other.n_el {
            return Err(Error::shape(
                format!("{}x{}", self.n_az, self.n_el),
                format!("{}x{}", other.n_az, other.n_el),
            ));
        }
        Ok(())
    }

    /// Index and value of the largest entry.
    pub fn argmax(&self) -> Option<((usize, usize), f64)> {
        let (i, v) = self
            .data
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })?;
        Some(((i / self.n_el, i % self.n_el), v))
    }
}

/// Complex per-ray values, `channels` per ray, azimuth-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub n_az: usize,
    pub n_el: usize,
    pub channels: usize,
    pub values: Vec<Complex>,
}

impl RenderedFrame {
    pub fn zeros(n_az: usize, n_el: usize, channels: usize) -> Self {
        Self {
            n_az,
            n_el,
            channels,
            values: vec![Complex::new(0.0, 0.0); n_az * n_el * channels],
        }
    }

    pub fn ray(&self, ray: usize) -> &[Complex] {
        &self.values[ray * self.channels..(ray + 1) * self.channels]
    }

    /// Per-ray power summed over channels.
    pub fn power(&self) -> SpectrumFrame {
        let data = self
            .values
            .chunks(self.channels)
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum())
            .collect();
        SpectrumFrame {
            n_az: self.n_az,
            n_el: self.n_el,
            data,
        }
    }

    /// Coherent sum over all rays, one value per channel.
    pub fn coherent_sum(&self) -> Vec<Complex> {
        let mut out = vec![Complex::new(0.0, 0.0); self.channels];
        for ray in self.values.chunks(self.channels) {
            for (o, z) in out.iter_mut().zip(ray) {
                *o += z;
            }
        }
        out
    }

    pub fn max_relative_deviation(&self, other: &Self) -> f64 {
        let scale = self
            .values
            .iter()
            .chain(&other.values)
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale
    }
}

/// Ray/ellipsoid quadratic coefficients for `(x - mu)^T P (x - mu) = 9`
/// along `o + t v` with `o = origin - mu`.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn new(precision: &Mat3, offset: &Vec3, dir: &Vec3) -> Self {
        let pv = precision * dir;
        Self {
            a: dir.dot(&pv),
            b: offset.dot(&pv),
            c: offset.dot(&(precision * offset)),
        }
    }

    pub fn discriminant(&self) -> f64 {
        self.b * self.b - self.a * (self.c - LEVEL)
    }

    /// Entry/exit parameters, entry clamped up to `min_t`.
    pub fn roots(&self, min_t: f64) -> Option<(f64, f64)> {
        let disc = self.discriminant();
        if !(disc > 0.0) {
            return None;
        }
        let sq = disc.sqrt();
        let t_out = (-self.b + sq) / self.a;
        if t_out <= min_t {
            return None;
        }
        let t_in = ((-self.b - sq) / self.a).max(min_t);
        Some((t_in, t_out))
    }
}

/// Entry and exit distances of `ray` through the 3-sigma ellipsoid of
/// `(mu, sigma)`.
pub fn ray_ellipsoid_intersect(ray: &Ray, mu: &Vec3, sigma: &Mat3) -> Option<(f64, f64)> {
    let p = Cholesky::new(*sigma)?.inverse();
    Quadratic::new(&p, &(ray.origin - mu), &ray.dir).roots(ray.min_t)
}

pub fn transmittance_value(p: &GaussianPrimitive) -> Complex {
    p.transmittance()
}

/// Per-primitive quantities reused by every ray of one render.
#[derive(Clone, Debug)]
pub struct PreparedGaussian {
    pub mean: Vec3,
    pub precision: Mat3,
    /// `(2 pi)^{-3/2} |Sigma|^{-1/2}`.
    pub norm: f64,
    pub rho: Complex,
    /// Radiance toward the transmitter, one value per channel.
    pub radiance: Vec<Complex>,
    pub cap: Cap,
    /// False for primitives inside the ray-emitting sphere.
    pub active: bool,
}

impl PreparedGaussian {
    /// Intersection of `ray` with this primitive, with the density at the
    /// segment midpoint.
    pub fn hit(&self, index: usize, ray: &Ray) -> Option<RayHit> {
        let o = ray.origin - self.mean;
        let q = Quadratic::new(&self.precision, &o, &ray.dir);
        let (t_in, t_out) = q.roots(ray.min_t)?;
        let t_mid = 0.5 * (t_in + t_out);
        let d = o + ray.dir * t_mid;
        let weight = self.norm * (-0.5 * d.dot(&(self.precision * d))).exp();
        Some(RayHit {
            gaussian_index: index,
            t_in,
            t_out,
            t_mid,
            weight,
        })
    }
}

/// Scene state specialized to one transmitter position.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub gaussians: Vec<PreparedGaussian>,
    pub rx: Vec3,
    pub tx: Vec3,
    pub min_t: f64,
    pub grid: AngularGrid,
    pub channels: usize,
}

/// Azimuth and elevation of the bearing from `mean` toward `tx`.
pub fn radiance_direction(mean: &Vec3, tx: &Vec3) -> Result<(f64, f64)> {
    let (_, alpha, beta) = splat::to_spherical(tx, mean)?;
    Ok((alpha, beta))
}

impl PreparedScene {
    pub fn new(scene: &RFScene, tx: &Vec3) -> Result<Self> {
        Self::build(scene, tx, None)
    }

    /// Prepare with explicit covariances in place of the stored shapes.
    pub fn with_covariances(scene: &RFScene, tx: &Vec3, covariances: &[Mat3]) -> Result<Self> {
        if covariances.len() != scene.len() {
            return Err(Error::shape(scene.len(), covariances.len()));
        }
        Self::build(scene, tx, Some(covariances))
    }

    fn build(scene: &RFScene, tx: &Vec3, covariances: Option<&[Mat3]>) -> Result<Self> {
        scene.validate()?;
        let basis_len = scene.basis_len();
        let gaussians = scene
            .primitives
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (precision, det, bound) = match covariances {
                    None => {
                        let condition = p.condition_number();
                        if !(condition <= MAX_CONDITION) {
                            return Err(Error::DegenerateCovariance { condition });
                        }
                        let r = p.rotation_matrix();
                        let inv_var = p.log_scale.map(|s| (-2.0 * s).exp());
                        let precision = r * Mat3::from_diagonal(&inv_var) * r.transpose();
                        let det = (2.0 * p.log_scale.sum()).exp();
                        (precision, det, p.bounding_radius())
                    }
                    Some(covs) => {
                        let cov = covs[i];
                        let eig = cov.symmetric_eigenvalues();
                        let condition = eig.max() / eig.min();
                        if !(eig.min() > 0.0 && condition <= MAX_CONDITION) {
                            return Err(Error::DegenerateCovariance { condition });
                        }
                        let chol = Cholesky::new(cov).ok_or(Error::DegenerateCovariance { condition })?;
                        (chol.inverse(), chol.determinant(), 3.0 * eig.max().sqrt())
                    }
                };
                let offset = p.mean - scene.rx;
                let depth = offset.norm();
                if !(depth > splat::MIN_OFFSET) {
                    return Err(Error::DegenerateDirection(format!(
                        "primitive {i} is centered on the receiver"
                    )));
                }
                let (alpha, beta) = radiance_direction(&p.mean, tx)?;
                let basis = fle::fle_basis(alpha, beta, scene.fle_degree).values;
                let radiance = (0..scene.channels)
                    .map(|ch| fle::dot(p.channel_coeffs(ch, basis_len), &basis))
                    .collect();
                Ok(PreparedGaussian {
                    mean: p.mean,
                    precision,
                    norm: 1.0 / (NORM_3D * det.sqrt()),
                    rho: p.transmittance(),
                    radiance,
                    cap: Cap::of_sphere(offset / depth, depth, bound),
                    active: depth >= scene.ress_radius,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gaussians,
            rx: scene.rx,
            tx: *tx,
            min_t: scene.ress_radius,
            grid: scene.grid,
            channels: scene.channels,
        })
    }

    pub fn ray(&self, u: usize, v: usize) -> Ray {
        Ray {
            origin: self.rx,
            dir: self.grid.cell_direction(u, v),
            min_t: self.min_t,
        }
    }
}

/// Insert `hit` keeping `(t_mid, gaussian_index)` order.
fn insert_sorted<T>(hits: &mut Vec<T>, item: T, hit: impl Fn(&T) -> &RayHit) {
    let h = hit(&item);
    let key = (h.t_mid, h.gaussian_index);
    let mut i = hits.len();
    while i > 0 {
        let prev = hit(&hits[i - 1]);
        if (prev.t_mid, prev.gaussian_index) <= key {
            break;
        }
        i -= 1;
    }
    hits.insert(i, item);
}

/// Sort hits by `(t_mid, gaussian_index)` with a comparison sort.
pub fn sort_hits(hits: &mut [RayHit]) {
    hits.sort_by(|a, b| {
        a.t_mid
            .total_cmp(&b.t_mid)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
}

/// Accumulate sorted hits into `out` (one value per channel).
pub fn accumulate(prepared: &PreparedScene, hits: &[RayHit], out: &mut [Complex]) {
    out.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
    let mut t = Complex::new(1.0, 0.0);
    for h in hits {
        if t.norm() < T_EPSILON {
            break;
        }
        let g = &prepared.gaussians[h.gaussian_index];
        let wt = t * h.weight;
        for (o, psi) in out.iter_mut().zip(&g.radiance) {
            *o += wt * psi;
        }
        t *= g.rho;
    }
}

/// Single-channel accumulation over explicit hits, checking the depth
/// order.
pub fn trace_ray(hits: &[RayHit], scene: &RFScene, tx: &Vec3) -> Result<Complex> {
    if let Some(w) = hits.windows(2).find(|w| w[1].t_mid < w[0].t_mid) {
        return Err(Error::Contract(format!(
            "hits not sorted by midpoint ({} after {})",
            w[1].t_mid, w[0].t_mid
        )));
    }
    let mut s = Complex::new(0.0, 0.0);
    let mut t = Complex::new(1.0, 0.0);
    let basis_len = scene.basis_len();
    for h in hits {
        if t.norm() < T_EPSILON {
            break;
        }
        let p = scene
            .primitives
            .get(h.gaussian_index)
            .ok_or_else(|| Error::Contract(format!("hit references missing primitive {}", h.gaussian_index)))?;
        let (alpha, beta) = radiance_direction(&p.mean, tx)?;
        let psi = fle::fle_eval(p.channel_coeffs(0, basis_len), alpha, beta)?;
        s += t * h.weight * psi;
        t *= p.transmittance();
    }
    Ok(s)
}

/// Prepared scene plus tile index for one transmitter.
#[derive(Clone, Debug)]
pub struct RenderPlan {
    pub prepared: PreparedScene,
    pub tiles: TileIndex,
}

impl RenderPlan {
    pub fn new(scene: &RFScene, tx: &Vec3) -> Result<Self> {
        Self::from_prepared(scene, PreparedScene::new(scene, tx)?)
    }

    pub fn from_prepared(scene: &RFScene, prepared: PreparedScene) -> Result<Self> {
        let splats = splat::project_all(&scene.primitives, &scene.rx, scene.ress_radius, &scene.grid)?;
        let tiles = splat::build_tiles(&splats, &scene.grid);
        Ok(Self { prepared, tiles })
    }

    /// Depth-ordered hits of ray `(u, v)` from its tile's splat list.
    pub fn hits(&self, u: usize, v: usize, out: &mut Vec<RayHit>) {
        out.clear();
        let ray = self.prepared.ray(u, v);
        for &(_, gi) in self.tiles.tile_entries(self.tiles.tile_of(u, v)) {
            if let Some(h) = self.test(gi as usize, &ray) {
                insert_sorted(out, h, |h| h);
            }
        }
    }

    /// Like [`RenderPlan::hits`], pairing each hit with its position in the
    /// tile's splat list.
    pub fn hits_with_slots(&self, u: usize, v: usize, out: &mut Vec<(RayHit, usize)>) {
        out.clear();
        let ray = self.prepared.ray(u, v);
        for (slot, &(_, gi)) in self.tiles.tile_entries(self.tiles.tile_of(u, v)).iter().enumerate() {
            if let Some(h) = self.test(gi as usize, &ray) {
                insert_sorted(out, (h, slot), |p| &p.0);
            }
        }
    }

    fn test(&self, gi: usize, ray: &Ray) -> Option<RayHit> {
        let g = &self.prepared.gaussians[gi];
        if !g.cap.contains(&ray.dir) {
            return None;
        }
        g.hit(gi, ray)
    }

    /// Render every ray, parallel over tiles.
    pub fn render(&self) -> RenderedFrame {
        let grid = &self.prepared.grid;
        let ch = self.prepared.channels;
        let per_tile: Vec<Vec<(usize, Vec<Complex>)>> = (0..self.tiles.n_tiles())
            .into_par_iter()
            .map(|tile| {
                let (us, vs) = self.tiles.tile_cells(tile);
                let mut hits = Vec::new();
                let mut rows = Vec::with_capacity(us.len() * vs.len());
                for u in us {
                    for v in vs.clone() {
                        self.hits(u, v, &mut hits);
                        let mut s = vec![Complex::new(0.0, 0.0); ch];
                        accumulate(&self.prepared, &hits, &mut s);
                        rows.push((grid.ray_index(u, v), s));
                    }
                }
                rows
            })
            .collect();
        let mut frame = RenderedFrame::zeros(grid.n_az, grid.n_el, ch);
        for (ray, s) in per_tile.into_iter().flatten() {
            frame.values[ray * ch..(ray + 1) * ch].copy_from_slice(&s);
        }
        frame
    }
}

/// Complex per-ray frame through the tiled pipeline.
pub fn render_frame(scene: &RFScene, tx: &Vec3) -> Result<RenderedFrame> {
    Ok(RenderPlan::new(scene, tx)?.render())
}

/// Power spectrum `|S|^2` per ray.
pub fn render_spectrum(scene: &RFScene, tx: &Vec3) -> Result<SpectrumFrame> {
    Ok(render_frame(scene, tx)?.power())
}

/// Coherent sum over all rays, one value per channel.
pub fn render_scalar(scene: &RFScene, tx: &Vec3) -> Result<Vec<Complex>> {
    Ok(render_frame(scene, tx)?.coherent_sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Bounds, SceneSetup};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn x_ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::x(), 1.0).unwrap()
    }

    #[test]
    fn sphere_intersections() {
        let r = x_ray();
        let (a, b) = ray_ellipsoid_intersect(&r, &Vec3::new(10.0, 0.0, 0.0), &Mat3::identity()).unwrap();
        assert_relative_eq!(a, 7.0, epsilon = 1e-12);
        assert_relative_eq!(b, 13.0, epsilon = 1e-12);
        assert!(ray_ellipsoid_intersect(&r, &Vec3::new(10.0, 4.0, 0.0), &Mat3::identity()).is_none());
        // Behind the receiver.
        assert!(ray_ellipsoid_intersect(&r, &Vec3::new(-10.0, 0.0, 0.0), &Mat3::identity()).is_none());
        // Receiver inside the ellipsoid: entry clamps to min_t.
        let (a, b) = ray_ellipsoid_intersect(&r, &Vec3::new(0.5, 0.0, 0.0), &Mat3::identity()).unwrap();
        assert_eq!(a, 1.0);
        assert_relative_eq!(b, 3.5, epsilon = 1e-12);
    }

    /// Level-set crossing of `f(d) = (x - mu)^T P (x - mu) - 9` by bisection.
    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn roots_match_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 200 {
            let mut p = GaussianPrimitive::isotropic(Vec3::zeros(), 1.0, 0, 1);
            p.mean = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..8.0),
            );
            p.rotation = [rng.random(), rng.random(), rng.random(), rng.random()];
            p.log_scale = Vec3::new(
                rng.random_range(-1.0..0.3),
                rng.random_range(-1.0..0.3),
                rng.random_range(-1.0..0.3),
            );
            let sigma = p.covariance();
            let dir = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
            let ray = Ray::new(Vec3::zeros(), dir, 0.5).unwrap();
            let Some((t_in, t_out)) = ray_ellipsoid_intersect(&ray, &p.mean, &sigma) else {
                continue;
            };
            let prec = sigma.try_inverse().unwrap();
            let f = |d: f64| {
                let x = ray.at(d) - p.mean;
                x.dot(&(prec * x)) - LEVEL
            };
            // Closest approach lies between the two crossings.
            let t_star = dir.dot(&(prec * (p.mean - ray.origin))) / dir.dot(&(prec * dir));
            assert!(f(t_star) < 0.0);
            assert!((bisect(f, 0.5, t_star) - t_in).abs() < 1e-8);
            assert!((bisect(f, t_star, 100.0) - t_out).abs() < 1e-8);
            checked += 1;
        }
    }

    #[test]
    fn transmittance_examples() {
        let mut p = GaussianPrimitive::isotropic(Vec3::zeros(), 1.0, 0, 1);
        assert_eq!(transmittance_value(&p), Complex::new(0.5, 0.0));
        p.trans_mag_raw = 40.0;
        p.trans_phase = PI;
        assert!((transmittance_value(&p) - Complex::new(-1.0, 0.0)).norm() < 1e-12);
        p.trans_mag_raw = logit(0.8);
        p.trans_phase = PI / 2.0;
        assert!((transmittance_value(&p) - Complex::new(0.0, 0.8)).norm() < 1e-12);
    }

    fn tiny_scene(n: usize) -> RFScene {
        let setup = SceneSetup {
            grid: AngularGrid::full_sphere(16, 8).unwrap(),
            ..SceneSetup::default()
        };
        let bounds = Bounds::new(Vec3::repeat(-5.0), Vec3::repeat(5.0)).unwrap();
        let mut s = RFScene::empty(&setup, bounds, 1, 1);
        for i in 0..n {
            let mut p = GaussianPrimitive::isotropic(Vec3::new(3.0 + i as f64, 0.0, 0.0), 0.5, 1, 1);
            p.coeffs[0] = Complex::new(1.0, 0.0);
            s.primitives.push(p);
        }
        s
    }

    fn hit(i: usize, t: f64, w: f64) -> RayHit {
        RayHit {
            gaussian_index: i,
            t_in: t - 0.5,
            t_out: t + 0.5,
            t_mid: t,
            weight: w,
        }
    }

    #[test]
    fn trace_examples() {
        let mut scene = tiny_scene(2);
        let tx = Vec3::new(0.0, 5.0, 0.0);
        assert_eq!(trace_ray(&[], &scene, &tx).unwrap(), Complex::new(0.0, 0.0));
        let one = trace_ray(&[hit(0, 3.0, 0.7)], &scene, &tx).unwrap();
        assert!((one - Complex::new(0.7, 0.0)).norm() < 1e-15);
        scene.primitives[0].trans_mag_raw = 60.0;
        scene.primitives[0].trans_phase = PI;
        let two = trace_ray(&[hit(0, 3.0, 0.7), hit(1, 4.0, 0.7)], &scene, &tx).unwrap();
        assert!(two.norm() < 1e-12);
        assert!(matches!(
            trace_ray(&[hit(1, 4.0, 0.7), hit(0, 3.0, 0.7)], &scene, &tx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn phase_shift_rotates_downstream_contributions() {
        let mut scene = tiny_scene(3);
        let tx = Vec3::new(0.0, 5.0, 0.0);
        let hits = [hit(0, 3.0, 0.7), hit(1, 4.0, 0.4), hit(2, 5.0, 0.2)];
        let first = Complex::new(0.7, 0.0);
        let base = trace_ray(&hits, &scene, &tx).unwrap() - first;
        let delta = 0.8;
        scene.primitives[0].trans_phase += delta;
        let shifted = trace_ray(&hits, &scene, &tx).unwrap() - first;
        assert!((shifted - base * Complex::from_polar(1.0, delta)).norm() < 1e-14);
    }

    #[test]
    fn empty_scene_renders_zero() {
        let scene = tiny_scene(0);
        let f = render_spectrum(&scene, &Vec3::new(0.0, 5.0, 0.0)).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        assert_eq!(
            render_scalar(&scene, &Vec3::new(0.0, 5.0, 0.0)).unwrap(),
            vec![Complex::new(0.0, 0.0)]
        );
    }

    #[test]
    fn isotropic_gaussian_peaks_at_its_bearing() {
        let setup = SceneSetup {
            grid: AngularGrid::degrees(360, 180).unwrap(),
            ..SceneSetup::default()
        };
        let bounds = Bounds::new(Vec3::repeat(-10.0), Vec3::repeat(10.0)).unwrap();
        let mut scene = RFScene::empty(&setup, bounds, 3, 1);
        let mean = Vec3::new(4.0, 3.0, 2.0);
        let mut p = GaussianPrimitive::isotropic(mean, 0.3, 3, 1);
        p.coeffs[0] = Complex::new(1.0, 0.0);
        scene.primitives.push(p);
        let frame = render_spectrum(&scene, &Vec3::new(-3.0, 0.0, 0.0)).unwrap();
        let (cell, _) = frame.argmax().unwrap();
        let (_, a, b) = splat::to_spherical(&mean, &Vec3::zeros()).unwrap();
        assert_eq!(cell, scene.grid.to_grid(a, b));
    }

    #[test]
    fn coefficient_scaling_scales_power_quadratically() {
        let mut scene = tiny_scene(3);
        for (i, p) in scene.primitives.iter_mut().enumerate() {
            p.mean.y = 0.3 * i as f64;
            p.coeffs = vec![
                Complex::new(0.2, -0.1 * i as f64),
                Complex::new(0.05, 0.3),
                Complex::new(-0.1, 0.0),
                Complex::new(0.0, 0.2),
            ];
        }
        let tx = Vec3::new(1.0, 4.0, -1.0);
        let f1 = render_spectrum(&scene, &tx).unwrap();
        let c = 2.5;
        for p in &mut scene.primitives {
            p.coeffs.iter_mut().for_each(|z| *z *= c);
        }
        let f2 = render_spectrum(&scene, &tx).unwrap();
        for (a, b) in f1.data.iter().zip(&f2.data) {
            assert!((b - c * c * a).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn scalar_is_the_sum_of_ray_values() {
        let mut scene = tiny_scene(3);
        scene.primitives[1].mean = Vec3::new(0.0, 3.0, 1.0);
        let tx = Vec3::new(1.0, 4.0, -1.0);
        let frame = render_frame(&scene, &tx).unwrap();
        let mut sum = Complex::new(0.0, 0.0);
        for r in 0..frame.n_az * frame.n_el {
            sum += frame.ray(r)[0];
        }
        let s = render_scalar(&scene, &tx).unwrap()[0];
        assert!((s - sum).norm() <= 1e-9 * sum.norm());
        assert!(sum.norm() > 0.0);
    }

    #[test]
    fn attenuation_never_increases_downstream_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let rhos: Vec<Complex> = (0..6)
                .map(|_| Complex::from_polar(rng.random_range(0.01..0.99), rng.random_range(-PI..PI)))
                .collect();
            let extra = Complex::from_polar(rng.random_range(0.01..0.99), rng.random_range(-PI..PI));
            let mut t0 = Complex::new(1.0, 0.0);
            let mut t1 = extra;
            for r in &rhos {
                assert!(t1.norm() <= t0.norm());
                t0 *= r;
                t1 *= r;
            }
        }
    }
}
