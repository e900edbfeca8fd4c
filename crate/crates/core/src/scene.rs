//! Gaussian primitives and the scene container.

use std::f64::consts::PI;

use nalgebra::{Cholesky, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fle;
use crate::{Complex, Mat3, Vec3};

/// Largest covariance condition number accepted by [`gaussian_density`].
pub const MAX_CONDITION: f64 = 1e12;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ext = self.extent();
        if !ext.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::InvalidInput(format!(
                "degenerate bounds with extent ({}, {}, {})",
                ext.x, ext.y, ext.z
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// Azimuth/elevation ray grid on the receiving sphere.
///
/// Cell `(u, v)` covers azimuth `[u, u + 1) * cell_deg` and elevation
/// `[v * cell_deg - 90, (v + 1) * cell_deg - 90)` degrees. With
/// `cell_deg = 1` this is the one-degree plane: `u = floor(alpha deg)`,
/// `v = floor(beta deg + 90)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    pub n_az: usize,
    pub n_el: usize,
    #[serde(default = "one_degree")]
    pub cell_deg: f64,
}

fn one_degree() -> f64 {
    1.0
}

impl AngularGrid {
    pub fn new(n_az: usize, n_el: usize, cell_deg: f64) -> Result<Self> {
        let g = Self { n_az, n_el, cell_deg };
        g.validate()?;
        Ok(g)
    }

    /// One-degree grid.
    pub fn degrees(n_az: usize, n_el: usize) -> Result<Self> {
        Self::new(n_az, n_el, 1.0)
    }

    /// Grid spanning the whole sphere with `n_az` azimuth cells.
    pub fn full_sphere(n_az: usize, n_el: usize) -> Result<Self> {
        let cell = 360.0 / n_az as f64;
        if (cell * n_el as f64 - 180.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{n_az}x{n_el} cells are not square over the sphere"
            )));
        }
        Self::new(n_az, n_el, cell)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_deg.is_finite() && self.cell_deg > 0.0) {
            return Err(Error::Config(format!("cell size {} deg", self.cell_deg)));
        }
        let period = 360.0 / self.cell_deg;
        if (period - period.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "cell size {} deg does not divide 360",
                self.cell_deg
            )));
        }
        let max_az = self.az_period();
        let max_el = self.el_rows();
        if self.n_az == 0 || self.n_az > max_az {
            return Err(Error::Config(format!("n_az = {} outside 1..={max_az}", self.n_az)));
        }
        if self.n_el == 0 || self.n_el > max_el {
            return Err(Error::Config(format!("n_el = {} outside 1..={max_el}", self.n_el)));
        }
        Ok(())
    }

    /// Number of cells covering a full turn in azimuth.
    pub fn az_period(&self) -> usize {
        (360.0 / self.cell_deg).round() as usize
    }

    /// Number of cells covering the full elevation range.
    pub fn el_rows(&self) -> usize {
        (180.0 / self.cell_deg).floor().max(1.0) as usize
    }

    pub fn n_rays(&self) -> usize {
        self.n_az * self.n_el
    }

    /// Flat ray index, azimuth-major.
    pub fn ray_index(&self, u: usize, v: usize) -> usize {
        u * self.n_el + v
    }

    /// Discretize `(alpha, beta)` in radians to a cell.
    ///
    /// `u` wraps into the azimuth period; `v` is clamped to the elevation
    /// rows of the full sphere, so `beta = pi/2` lands in the top row.
    pub fn to_grid(&self, alpha: f64, beta: f64) -> (usize, usize) {
        let period = self.az_period() as i64;
        let u = (alpha.to_degrees() / self.cell_deg).floor() as i64;
        let u = u.rem_euclid(period) as usize;
        let v = ((beta.to_degrees() + 90.0) / self.cell_deg).floor();
        let v = v.clamp(0.0, (self.el_rows() - 1) as f64) as usize;
        (u, v)
    }

    /// Direction angles of the center of cell `(u, v)`.
    pub fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        let alpha = ((u as f64 + 0.5) * self.cell_deg).to_radians();
        let beta = ((v as f64 + 0.5) * self.cell_deg - 90.0).to_radians();
        (alpha, beta)
    }

    /// Unit direction through the center of cell `(u, v)`.
    pub fn cell_direction(&self, u: usize, v: usize) -> Vec3 {
        let (alpha, beta) = self.cell_center(u, v);
        direction_from_angles(alpha, beta)
    }
}

/// Unit vector for azimuth `alpha` and elevation `beta`.
pub fn direction_from_angles(alpha: f64, beta: f64) -> Vec3 {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    Vec3::new(cb * ca, cb * sa, sb)
}

/// Receiver-side setup shared by every primitive in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSetup {
    pub rx: Vec3,
    /// Radius of the sphere rays are emitted from.
    pub ress_radius: f64,
    pub carrier_freq: f64,
    pub grid: AngularGrid,
}

impl Default for SceneSetup {
    fn default() -> Self {
        Self {
            rx: Vec3::zeros(),
            ress_radius: 1.0,
            carrier_freq: 2.4e9,
            grid: AngularGrid {
                n_az: 360,
                n_el: 180,
                cell_deg: 1.0,
            },
        }
    }
}

/// Initial attribute values for freshly created primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub c00_magnitude: f64,
    pub c00_phase: f64,
    pub fle_degree: usize,
    /// Radiance channels per primitive (1 for spectra and RSSI, one per
    /// subcarrier for CSI).
    pub channels: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            c00_magnitude: 0.1,
            c00_phase: 0.0,
            fle_degree: 3,
            channels: 1,
        }
    }
}

/// One scene element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    /// `|rho| = logistic(trans_mag_raw)`.
    pub trans_mag_raw: f64,
    pub trans_phase: f64,
    /// `channels * (L + 1)^2` coefficients, channel-major, each channel in
    /// `(l, m)` order `l = 0..=L`, `m = -l..=l`.
    pub coeffs: Vec<Complex>,
}

impl GaussianPrimitive {
    /// Isotropic primitive with identity rotation and `|rho| = 0.5`.
    pub fn isotropic(mean: Vec3, scale: f64, fle_degree: usize, channels: usize) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
            trans_mag_raw: 0.0,
            trans_phase: 0.0,
            coeffs: vec![Complex::new(0.0, 0.0); channels * fle::basis_len(fle_degree)],
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_matrix(&self.rotation)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance(self)
    }

    /// Condition number of the covariance, exact from the log-scales.
    pub fn condition_number(&self) -> f64 {
        let s = &self.log_scale;
        (2.0 * (s.max() - s.min())).exp()
    }

    /// Radius of the sphere enclosing the 3-sigma ellipsoid.
    pub fn bounding_radius(&self) -> f64 {
        3.0 * self.log_scale.max().exp()
    }

    pub fn transmittance_magnitude(&self) -> f64 {
        logistic(self.trans_mag_raw)
    }

    pub fn transmittance(&self) -> Complex {
        Complex::from_polar(self.transmittance_magnitude(), self.trans_phase)
    }

    /// Coefficients of one radiance channel.
    pub fn channel_coeffs(&self, channel: usize, basis_len: usize) -> &[Complex] {
        &self.coeffs[channel * basis_len..(channel + 1) * basis_len]
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 && n.is_finite() {
            self.rotation.iter_mut().for_each(|q| *q /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &[f64; 4]) -> Mat3 {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient with respect to the rotation matrix back to the raw
/// (unnormalized) quaternion components.
pub fn rotation_matrix_vjp(q: &[f64; 4], d_r: &Mat3) -> [f64; 4] {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Mat3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Mat3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    let g = [
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    ];
    // Project out the radial direction and undo the normalization scale.
    let unit = [w, x, y, z];
    let radial: f64 = g.iter().zip(&unit).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (g[i] - unit[i] * radial) / n;
    }
    out
}

/// `Sigma = R S S^T R^T`.
pub fn covariance(p: &GaussianPrimitive) -> Mat3 {
    let r = p.rotation_matrix();
    let m = r * Mat3::from_diagonal(&p.scales());
    m * m.transpose()
}

/// Normalized trivariate Gaussian density.
pub fn gaussian_density(x: &Vec3, mean: &Vec3, cov: &Mat3) -> Result<f64> {
    let eig = SymmetricEigen::new(*cov);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) {
        return Err(Error::DegenerateCovariance {
            condition: f64::INFINITY,
        });
    }
    let condition = hi / lo;
    if condition > MAX_CONDITION {
        return Err(Error::DegenerateCovariance { condition });
    }
    let chol = Cholesky::new(*cov).ok_or(Error::DegenerateCovariance { condition })?;
    let d = x - mean;
    let maha = d.dot(&chol.solve(&d));
    let det = chol.determinant();
    Ok((-0.5 * maha).exp() / ((2.0 * PI).powf(1.5) * det.sqrt()))
}

/// Full scene: primitives plus receiver geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RFScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub rx: Vec3,
    pub ress_radius: f64,
    pub carrier_freq: f64,
    pub bounds: Bounds,
    pub grid: AngularGrid,
    pub fle_degree: usize,
    pub channels: usize,
}

impl RFScene {
    pub fn empty(setup: &SceneSetup, bounds: Bounds, fle_degree: usize, channels: usize) -> Self {
        Self {
            primitives: Vec::new(),
            rx: setup.rx,
            ress_radius: setup.ress_radius,
            carrier_freq: setup.carrier_freq,
            bounds,
            grid: setup.grid,
            fle_degree,
            channels,
        }
    }

    pub fn setup(&self) -> SceneSetup {
        SceneSetup {
            rx: self.rx,
            ress_radius: self.ress_radius,
            carrier_freq: self.carrier_freq,
            grid: self.grid,
        }
    }

    pub fn basis_len(&self) -> usize {
        fle::basis_len(self.fle_degree)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ress_radius > 0.0 && self.ress_radius.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "RESS radius {} must be positive",
                self.ress_radius
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidInput("scene has zero channels".into()));
        }
        self.grid.validate()?;
        self.bounds.validate()?;
        let want = self.channels * self.basis_len();
        for (i, p) in self.primitives.iter().enumerate() {
            if p.coeffs.len() != want {
                return Err(Error::shape(
                    format!("{want} coefficients"),
                    format!("{} on primitive {i}", p.coeffs.len()),
                ));
            }
            let finite = p.mean.iter().all(|v| v.is_finite())
                && p.log_scale.iter().all(|v| v.is_finite())
                && p.rotation.iter().all(|v| v.is_finite())
                && p.trans_mag_raw.is_finite()
                && p.trans_phase.is_finite()
                && p.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("primitive {i} has non-finite attributes")));
            }
        }
        Ok(())
    }
}

/// Number of whole cubes of edge `edge` along an extent.
fn cube_count(extent: f64, edge: f64) -> usize {
    (extent / edge + 1e-9).floor() as usize
}

/// Partition `bounds` into cubes of edge `cube_edge` and place one primitive
/// at each cube center.
pub fn cube_init(bounds: &Bounds, cube_edge: f64, init: &InitConfig, setup: &SceneSetup) -> Result<RFScene> {
    bounds.validate()?;
    if !(cube_edge > 0.0 && cube_edge.is_finite()) {
        return Err(Error::InvalidInput(format!("cube edge {cube_edge} must be positive")));
    }
    let ext = bounds.extent();
    if cube_edge > ext.min() + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "cube edge {cube_edge} exceeds the smallest bounds extent {}",
            ext.min()
        )));
    }
    if init.channels == 0 {
        return Err(Error::Config("init.channels must be at least 1".into()));
    }
    let counts = [
        cube_count(ext.x, cube_edge),
        cube_count(ext.y, cube_edge),
        cube_count(ext.z, cube_edge),
    ];
    // Center the cube lattice inside the box.
    let origin = bounds.min
        + Vec3::new(
            ext.x - counts[0] as f64 * cube_edge,
            ext.y - counts[1] as f64 * cube_edge,
            ext.z - counts[2] as f64 * cube_edge,
        ) * 0.5;
    let n_basis = fle::basis_len(init.fle_degree);
    let c00 = Complex::from_polar(init.c00_magnitude, init.c00_phase);
    let mut scene = RFScene::empty(setup, *bounds, init.fle_degree, init.channels);
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let center = origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * cube_edge;
                let mut p = GaussianPrimitive::isotropic(center, cube_edge / 2.0, init.fle_degree, init.channels);
                for ch in 0..init.channels {
                    p.coeffs[ch * n_basis] = c00;
                }
                scene.primitives.push(p);
            }
        }
    }
    Ok(scene)
}
