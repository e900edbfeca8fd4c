//! Hand-derived reverse pass through the complex ray tracer.
//!
//! The loss is real and every ray value `S` is complex. Upstream gradients
//! travel as `G = dL/dRe(S) + i dL/dIm(S)`; for any real parameter `p` the
//! chain rule reads `dL/dp = Re(conj(G) dS/dp)`.
//!
//! Per ray, with hits ordered front to back and `T_1 = 1`:
//!
//! * radiance: `dS/dpsi_k = w_k T_k`
//! * transmittance: `dS/drho_k = T_k D_k` where `D_k` is the downstream sum
//!   `sum_{j>k} w_j psi_j T_j / T_{k+1}`, built in one reverse sweep
//! * weight: `dS/dw_k = psi_k T_k`, chained to the mean and covariance
//!   through the density and through the segment midpoint.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fle;
use crate::render::{RayHit, RenderPlan, RenderedFrame, SpectrumFrame, LEVEL, T_EPSILON};
use crate::scene::{logistic, rotation_matrix_vjp, RFScene};
use crate::splat::angle_jacobian;
use crate::{Complex, Mat3, Vec3};

/// Discriminants below this skip the midpoint terms.
pub const TANGENCY: f64 = 1e-10;

/// Upstream `dL/dRe(S) + i dL/dIm(S)` for every ray and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Upstream {
    pub n_az: usize,
    pub n_el: usize,
    pub channels: usize,
    pub values: Vec<Complex>,
}

impl Upstream {
    pub fn zeros(n_az: usize, n_el: usize, channels: usize) -> Self {
        Self {
            n_az,
            n_el,
            channels,
            values: vec![Complex::new(0.0, 0.0); n_az * n_el * channels],
        }
    }

    /// The same upstream on every ray, as for a coherent sum over rays.
    pub fn uniform(n_az: usize, n_el: usize, g: &[Complex]) -> Self {
        let values = (0..n_az * n_el).flat_map(|_| g.iter().copied()).collect();
        Self {
            n_az,
            n_el,
            channels: g.len(),
            values,
        }
    }

    pub fn ray(&self, ray: usize) -> &[Complex] {
        &self.values[ray * self.channels..(ray + 1) * self.channels]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|g| g.re == 0.0 && g.im == 0.0)
    }
}

/// `(dL/dRe S, dL/dIm S)` of one ray when the loss sees the power `|S|^2`.
pub fn upstream_to_ray(s: Complex, dl_dp: f64) -> [f64; 2] {
    [2.0 * s.re * dl_dp, 2.0 * s.im * dl_dp]
}

/// Chain a power-frame gradient through `P = sum_c |S_c|^2`.
pub fn upstream_from_power(frame: &RenderedFrame, dl_dp: &SpectrumFrame) -> Result<Upstream> {
    if frame.n_az != dl_dp.n_az || frame.n_el != dl_dp.n_el {
        return Err(Error::Contract(format!(
            "forward cache is {}x{}, loss gradient is {}x{}",
            frame.n_az, frame.n_el, dl_dp.n_az, dl_dp.n_el
        )));
    }
    let ch = frame.channels;
    let mut values = Vec::with_capacity(frame.values.len());
    for (ray, &g) in dl_dp.data.iter().enumerate() {
        for s in frame.ray(ray) {
            let [re, im] = upstream_to_ray(*s, g);
            values.push(Complex::new(re, im));
        }
    }
    Ok(Upstream {
        n_az: frame.n_az,
        n_el: frame.n_el,
        channels: ch,
        values,
    })
}

/// Gradient of the loss for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub mean: Vec3,
    /// Symmetric `dL/dSigma`.
    pub covariance: Mat3,
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    /// With respect to `|rho|`.
    pub trans_mag: f64,
    pub trans_mag_raw: f64,
    pub trans_phase: f64,
    /// `dL/dRe(c) + i dL/dIm(c)` per coefficient.
    pub coeffs: Vec<Complex>,
}

impl PrimitiveGrad {
    pub fn zeros(n_coeffs: usize) -> Self {
        Self {
            mean: Vec3::zeros(),
            covariance: Mat3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vec3::zeros(),
            trans_mag: 0.0,
            trans_mag_raw: 0.0,
            trans_phase: 0.0,
            coeffs: vec![Complex::new(0.0, 0.0); n_coeffs],
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.mean += other.mean;
        self.covariance += other.covariance;
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            *a += b;
        }
        self.log_scale += other.log_scale;
        self.trans_mag += other.trans_mag;
        self.trans_mag_raw += other.trans_mag_raw;
        self.trans_phase += other.trans_phase;
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
    }

    /// First non-finite field, if any.
    pub fn non_finite_field(&self) -> Option<&'static str> {
        let fin = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !fin(self.mean.as_slice()) {
            Some("mean")
        } else if !fin(&self.rotation) {
            Some("rotation")
        } else if !fin(self.log_scale.as_slice()) {
            Some("log_scale")
        } else if !(self.trans_mag_raw.is_finite() && self.trans_mag.is_finite()) {
            Some("trans_mag")
        } else if !self.trans_phase.is_finite() {
            Some("trans_phase")
        } else if !self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            Some("coeffs")
        } else {
            None
        }
    }
}

/// Per-primitive gradients for a whole scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub grads: Vec<PrimitiveGrad>,
}

impl GradientBuffer {
    pub fn zeros(n: usize, n_coeffs: usize) -> Self {
        Self {
            grads: vec![PrimitiveGrad::zeros(n_coeffs); n],
        }
    }

    pub fn for_scene(scene: &RFScene) -> Self {
        Self::zeros(scene.len(), scene.channels * scene.basis_len())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add(b);
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = PrimitiveGrad::zeros(g.coeffs.len());
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(field) = g.non_finite_field() {
                return Err(Error::NonFiniteGradient { primitive: i, field });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradConfig {
    /// Chain the radiance bearing toward the transmitter into the mean.
    pub direction_chain: bool,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self { direction_chain: true }
    }
}

/// Raw per-primitive sums gathered over rays before the shape and
/// direction chains.
#[derive(Clone, Debug)]
struct RayAccum {
    /// `sum G conj(w T)` per channel.
    g_psi: Vec<Complex>,
    /// `sum conj(G) T D` over channels.
    g_rho: Complex,
    mean: Vec3,
    /// Unsymmetrized `dL/dSigma`.
    cov: Mat3,
}

impl RayAccum {
    fn zeros(channels: usize) -> Self {
        Self {
            g_psi: vec![Complex::new(0.0, 0.0); channels],
            g_rho: Complex::new(0.0, 0.0),
            mean: Vec3::zeros(),
            cov: Mat3::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        for (a, b) in self.g_psi.iter_mut().zip(&o.g_psi) {
            *a += b;
        }
        self.g_rho += o.g_rho;
        self.mean += o.mean;
        self.cov += o.cov;
    }
}

/// Contribution of `dL/dw` at one hit to the mean and covariance.
///
/// `w = N exp(-q/2)` with `q = d^T P d`, `d = o + t v`, `o = rx - mu`, `P`
/// the precision, and `t` the midpoint of the clamped segment.
pub fn weight_backward(
    g_w: f64,
    hit: &RayHit,
    mean: &Vec3,
    precision: &Mat3,
    origin: &Vec3,
    dir: &Vec3,
    min_t: f64,
) -> (Vec3, Mat3) {
    let p = precision;
    let v = dir;
    let o = origin - mean;
    let d = o + v * hit.t_mid;
    let pd = p * d;
    let pv = p * v;
    let w = hit.weight;
    let a = v.dot(&pv);
    let b = o.dot(&pv);
    let c = o.dot(&(p * o));
    let disc = b * b - a * (c - LEVEL);
    // dq/dt
    let q_t = 2.0 * v.dot(&pd);
    let (dt_dmu, dt_dp) = if disc < TANGENCY {
        (Vec3::zeros(), Mat3::zeros())
    } else if hit.t_in > min_t {
        (pv / a, -(v * o.transpose()) / a + (v * v.transpose()) * (b / (a * a)))
    } else {
        // t = (min_t + t_out) / 2
        let sq = disc.sqrt();
        let po = p * o;
        let d_disc_dmu = -2.0 * b * pv + 2.0 * a * po;
        let dt_out_dmu = (pv + d_disc_dmu / (2.0 * sq)) / a;
        let vo = v * o.transpose();
        let vv = v * v.transpose();
        let oo = o * o.transpose();
        let dt_out_dp = (-vo + (2.0 * b * vo - (c - LEVEL) * vv - a * oo) / (2.0 * sq) - hit.t_out * vv) / a;
        (0.5 * dt_out_dmu, 0.5 * dt_out_dp)
    };
    let d_mean = g_w * w * (pd - dt_dmu * v.dot(&pd));
    // dw/dSigma = w (P d d^T P + q_t P (dt/dP) P - P) / 2
    let inner = d * d.transpose() + dt_dp * q_t;
    let d_cov = g_w * 0.5 * w * (p * inner * p - p);
    (d_mean, d_cov)
}

/// Reverse sweep over one ray's hits, adding into `acc[slot]`.
fn ray_backward(
    plan: &RenderPlan,
    hits: &[(RayHit, usize)],
    g: &[Complex],
    ray_dir: &Vec3,
    acc: &mut [RayAccum],
    t_buf: &mut Vec<Complex>,
    d_buf: &mut Vec<Complex>,
) {
    let prep = &plan.prepared;
    let ch = g.len();
    t_buf.clear();
    let mut t = Complex::new(1.0, 0.0);
    for (h, _) in hits {
        if t.norm() < T_EPSILON {
            break;
        }
        t_buf.push(t);
        t *= prep.gaussians[h.gaussian_index].rho;
    }
    let k_max = t_buf.len();
    d_buf.clear();
    d_buf.resize(ch, Complex::new(0.0, 0.0));
    for k in (0..k_max).rev() {
        let (h, slot) = &hits[k];
        let gauss = &prep.gaussians[h.gaussian_index];
        let tk = t_buf[k];
        let a = &mut acc[*slot];
        let wt = tk * h.weight;
        let mut g_w = 0.0;
        let mut g_rho = Complex::new(0.0, 0.0);
        for c in 0..ch {
            let gc = g[c];
            a.g_psi[c] += gc * wt.conj();
            g_w += (gc.conj() * gauss.radiance[c] * tk).re;
            g_rho += gc.conj() * tk * d_buf[c];
            d_buf[c] = h.weight * gauss.radiance[c] + gauss.rho * d_buf[c];
        }
        a.g_rho += g_rho;
        if g_w != 0.0 {
            let (dm, dc) = weight_backward(g_w, h, &gauss.mean, &gauss.precision, &prep.rx, ray_dir, prep.min_t);
            a.mean += dm;
            a.cov += dc;
        }
    }
}

/// Gradients of every primitive given upstream ray gradients.
pub fn backward(
    scene: &RFScene,
    plan: &RenderPlan,
    upstream: &Upstream,
    config: &GradConfig,
) -> Result<GradientBuffer> {
    let grid = &plan.prepared.grid;
    if upstream.n_az != grid.n_az || upstream.n_el != grid.n_el || upstream.channels != scene.channels {
        return Err(Error::Contract(format!(
            "upstream {}x{}x{} does not match the render {}x{}x{}",
            upstream.n_az, upstream.n_el, upstream.channels, grid.n_az, grid.n_el, scene.channels
        )));
    }
    let ch = scene.channels;
    let tiles = &plan.tiles;
    let per_tile: Vec<Vec<RayAccum>> = (0..tiles.n_tiles())
        .into_par_iter()
        .map(|tile| {
            let entries = tiles.tile_entries(tile);
            let mut acc = vec![RayAccum::zeros(ch); entries.len()];
            if entries.is_empty() {
                return acc;
            }
            let (us, vs) = tiles.tile_cells(tile);
            let mut hits = Vec::new();
            let mut t_buf = Vec::new();
            let mut d_buf = Vec::new();
            for u in us {
                for v in vs.clone() {
                    let g = upstream.ray(grid.ray_index(u, v));
                    if g.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                        continue;
                    }
                    plan.hits_with_slots(u, v, &mut hits);
                    if hits.is_empty() {
                        continue;
                    }
                    let dir = grid.cell_direction(u, v);
                    ray_backward(plan, &hits, g, &dir, &mut acc, &mut t_buf, &mut d_buf);
                }
            }
            acc
        })
        .collect();
    let mut raw = vec![RayAccum::zeros(ch); scene.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (&(_, gi), a) in tiles.tile_entries(tile).iter().zip(acc) {
            raw[gi as usize].add(a);
        }
    }
    let grads = raw
        .par_iter()
        .enumerate()
        .map(|(i, a)| finalize(scene, &plan.prepared.tx, i, a, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientBuffer { grads })
}

/// Apply coefficient, transmittance, direction and shape chains.
fn finalize(scene: &RFScene, tx: &Vec3, index: usize, a: &RayAccum, config: &GradConfig) -> Result<PrimitiveGrad> {
    let p = &scene.primitives[index];
    let bl = scene.basis_len();
    let mut out = PrimitiveGrad::zeros(p.coeffs.len());
    let any_psi = a.g_psi.iter().any(|z| z.re != 0.0 || z.im != 0.0);
    if any_psi {
        let e = tx - p.mean;
        let (alpha, beta) = crate::render::radiance_direction(&p.mean, tx)?;
        let basis = fle::fle_basis_grad(alpha, beta, scene.fle_degree);
        let mut d_alpha = 0.0;
        let mut d_beta = 0.0;
        for (c, g) in a.g_psi.iter().enumerate() {
            let coeffs = p.channel_coeffs(c, bl);
            for j in 0..bl {
                out.coeffs[c * bl + j] = g * basis.values[j].conj();
            }
            if config.direction_chain {
                d_alpha += (g.conj() * fle::dot(coeffs, &basis.d_alpha)).re;
                d_beta += (g.conj() * fle::dot(coeffs, &basis.d_beta)).re;
            }
        }
        if config.direction_chain {
            if let Some(j) = angle_jacobian(&e) {
                let de = j.transpose() * nalgebra::Vector2::new(d_alpha, d_beta);
                out.mean -= de;
            }
        }
    }
    let m = p.transmittance_magnitude();
    let phase = Complex::from_polar(1.0, p.trans_phase);
    out.trans_mag = (a.g_rho * phase).re;
    out.trans_phase = (a.g_rho * Complex::new(0.0, 1.0) * p.transmittance()).re;
    out.trans_mag_raw = out.trans_mag * m * (1.0 - m);
    out.mean += a.mean;
    let g_cov = 0.5 * (a.cov + a.cov.transpose());
    out.covariance = g_cov;
    let (rot, ls) = shape_backward(&p.rotation, &p.log_scale, &g_cov);
    out.rotation = rot;
    out.log_scale = ls;
    Ok(out)
}

/// Chain a symmetric `dL/dSigma` to the raw quaternion and log-scales of
/// `Sigma = (R S)(R S)^T`.
pub fn shape_backward(q: &[f64; 4], log_scale: &Vec3, g_cov: &Mat3) -> ([f64; 4], Vec3) {
    let r = crate::scene::rotation_matrix(q);
    let s = Mat3::from_diagonal(&log_scale.map(f64::exp));
    let g_m = 2.0 * g_cov * r * s;
    let g_r = g_m * s;
    let rt_gm = r.transpose() * g_m;
    let g_s = Vec3::new(
        rt_gm[(0, 0)] * s[(0, 0)],
        rt_gm[(1, 1)] * s[(1, 1)],
        rt_gm[(2, 2)] * s[(2, 2)],
    );
    (rotation_matrix_vjp(q, &g_r), g_s)
}

/// `d|rho|/draw` for the logistic magnitude.
pub fn magnitude_raw_derivative(raw: f64) -> f64 {
    let m = logistic(raw);
    m * (1.0 - m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{PreparedScene, RenderPlan};
    use crate::scene::{AngularGrid, Bounds, GaussianPrimitive, SceneSetup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn power_upstream_examples() {
        assert_eq!(upstream_to_ray(Complex::new(3.0, 4.0), 1.0), [6.0, 8.0]);
        assert_eq!(upstream_to_ray(Complex::new(3.0, 4.0), 0.0), [0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = Complex::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let g: f64 = rng.random_range(-2.0..2.0);
            let h = 1e-6;
            let p = |z: Complex| g * z.norm_sqr();
            let fr = (p(s + h) - p(s - h)) / (2.0 * h);
            let fi = (p(s + Complex::new(0.0, h)) - p(s - Complex::new(0.0, h))) / (2.0 * h);
            let [re, im] = upstream_to_ray(s, g);
            assert!((fr - re).abs() < 1e-6 && (fi - im).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let s = Vec3::new(
                rng.random_range(-1.0..0.5),
                rng.random_range(-1.0..0.5),
                rng.random_range(-1.0..0.5),
            );
            let gm = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let g = 0.5 * (gm + gm.transpose());
            let f = |q: &[f64; 4], s: &Vec3| {
                let mut p = GaussianPrimitive::isotropic(Vec3::zeros(), 1.0, 0, 1);
                p.rotation = *q;
                p.log_scale = *s;
                p.covariance().component_mul(&g).sum()
            };
            let (dq, ds) = shape_backward(&q, &s, &g);
            let h = 1e-6;
            for i in 0..4 {
                let mut a = q;
                let mut b = q;
                a[i] += h;
                b[i] -= h;
                assert!(((f(&a, &s) - f(&b, &s)) / (2.0 * h) - dq[i]).abs() < 1e-6);
            }
            for i in 0..3 {
                let mut a = s;
                let mut b = s;
                a[i] += h;
                b[i] -= h;
                assert!(((f(&q, &a) - f(&q, &b)) / (2.0 * h) - ds[i]).abs() < 1e-6);
            }
        }
    }

    fn single_hit_scene() -> RFScene {
        let setup = SceneSetup {
            grid: AngularGrid::full_sphere(16, 8).unwrap(),
            ..SceneSetup::default()
        };
        let bounds = Bounds::new(Vec3::repeat(-6.0), Vec3::repeat(6.0)).unwrap();
        let mut scene = RFScene::empty(&setup, bounds, 0, 1);
        let dir = scene.grid.cell_direction(0, 4);
        let mut p = GaussianPrimitive::isotropic(dir * 4.0, 0.05, 0, 1);
        p.coeffs[0] = Complex::new(0.3, 0.1);
        scene.primitives.push(p);
        scene
    }

    #[test]
    fn single_hit_coefficient_gradient_is_the_weight() {
        let scene = single_hit_scene();
        let tx = Vec3::new(0.0, 0.0, 5.0);
        let plan = RenderPlan::new(&scene, &tx).unwrap();
        let mut hits = Vec::new();
        plan.hits(0, 4, &mut hits);
        assert_eq!(hits.len(), 1);
        let w = hits[0].weight;
        let grid = scene.grid;
        for (g, want) in [
            (Complex::new(1.0, 0.0), Complex::new(w, 0.0)),
            (Complex::new(0.0, 1.0), Complex::new(0.0, w)),
        ] {
            let mut up = Upstream::zeros(grid.n_az, grid.n_el, 1);
            up.values[grid.ray_index(0, 4)] = g;
            let buf = backward(&scene, &plan, &up, &GradConfig::default()).unwrap();
            assert!((buf.grads[0].coeffs[0] - want).norm() < 1e-15);
            assert_eq!(buf.grads[0].trans_mag, 0.0);
            assert_eq!(buf.grads[0].trans_phase, 0.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let scene = single_hit_scene();
        let tx = Vec3::new(0.0, 0.0, 5.0);
        let plan = RenderPlan::new(&scene, &tx).unwrap();
        let up = Upstream::zeros(16, 8, 1);
        let buf = backward(&scene, &plan, &up, &GradConfig::default()).unwrap();
        assert_eq!(buf, GradientBuffer::for_scene(&scene));
        let _ = PreparedScene::new(&scene, &tx).unwrap();
    }
}
