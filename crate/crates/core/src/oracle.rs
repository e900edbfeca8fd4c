//! Reference implementations: multipath propagation, a synthetic spectrum
//! generator, a brute-force renderer and central finite differences.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward, upstream_from_power, GradConfig, GradientBuffer, PrimitiveGrad};
use crate::io::{Dataset, Mode, Sample, Split, Target};
use crate::loss::power_dbm;
use crate::loss::{spectrum_loss, LossWeights};
use crate::render::{accumulate, sort_hits, PreparedScene, RayHit, RenderPlan, RenderedFrame, SpectrumFrame};
use crate::scene::{logistic, logit, AngularGrid, Bounds, GaussianPrimitive, RFScene, SceneSetup};
use crate::splat::{self, wrapped_delta};
use crate::{Complex, Mat3, Vec3};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.99792458e8;

/// Propagation constants of the synthetic medium.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Medium {
    pub speed_of_light: f64,
    /// Divide each path amplitude by its length.
    pub free_space_rolloff: bool,
}

impl Default for Medium {
    fn default() -> Self {
        Self {
            speed_of_light: SPEED_OF_LIGHT,
            free_space_rolloff: false,
        }
    }
}

/// One propagation path: direct when `reflector` is `None`, otherwise a
/// single bounce off `reflector`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    #[serde(default)]
    pub reflector: Option<Vec3>,
    #[serde(default)]
    pub phase: f64,
    pub amplitude: f64,
}

impl PathSpec {
    pub fn direct(amplitude: f64) -> Self {
        Self {
            reflector: None,
            phase: 0.0,
            amplitude,
        }
    }

    pub fn bounce(reflector: Vec3, amplitude: f64, phase: f64) -> Self {
        Self {
            reflector: Some(reflector),
            phase,
            amplitude,
        }
    }

    /// Geometric length from `tx` to `rx`.
    pub fn length(&self, tx: &Vec3, rx: &Vec3) -> Result<f64> {
        let legs = match self.reflector {
            None => vec![(tx - rx).norm()],
            Some(p) => vec![(tx - p).norm(), (p - rx).norm()],
        };
        if legs.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "zero-length path leg between {tx:?} and {rx:?}"
            )));
        }
        Ok(legs.iter().sum())
    }

    /// Point the final leg arrives from.
    pub fn last_point(&self, tx: &Vec3) -> Vec3 {
        self.reflector.unwrap_or(*tx)
    }

    /// Complex contribution `A e^{j(2 pi f d / c + theta)}`.
    pub fn contribution(&self, tx: &Vec3, rx: &Vec3, carrier: f64, medium: &Medium) -> Result<Complex> {
        if self.amplitude < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative path amplitude {}",
                self.amplitude
            )));
        }
        let d = self.length(tx, rx)?;
        let phase = 2.0 * PI * carrier * d / medium.speed_of_light + self.phase;
        let amp = if medium.free_space_rolloff {
            self.amplitude / d
        } else {
            self.amplitude
        };
        Ok(Complex::from_polar(amp, phase))
    }
}

/// Coherent sum of all paths.
pub fn multipath_signal(paths: &[PathSpec], tx: &Vec3, rx: &Vec3, carrier: f64, medium: &Medium) -> Result<Complex> {
    paths.iter().map(|p| p.contribution(tx, rx, carrier, medium)).sum()
}

/// Transmitters, a receiver and the paths every transmitter uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub rx: Vec3,
    pub carrier_freq: f64,
    pub tx_positions: Vec<Vec3>,
    pub paths: Vec<PathSpec>,
    #[serde(default)]
    pub medium: Medium,
}

/// Ground-truth power spectrum: each path deposits its complex value into
/// the cells around its arrival bearing with a Gaussian beam of width
/// `sigma_deg`; a zero width deposits into the arrival cell only.
pub fn spectrum_oracle(
    paths: &[PathSpec],
    tx: &Vec3,
    rx: &Vec3,
    carrier: f64,
    medium: &Medium,
    grid: &AngularGrid,
    sigma_deg: f64,
) -> Result<SpectrumFrame> {
    let mut cells = vec![Complex::new(0.0, 0.0); grid.n_rays()];
    let period = grid.az_period() as f64;
    for p in paths {
        let z = p.contribution(tx, rx, carrier, medium)?;
        let (_, alpha, beta) = splat::to_spherical(&p.last_point(tx), rx)?;
        let (u0, v0) = grid.to_grid(alpha, beta);
        if sigma_deg <= 0.0 {
            if u0 < grid.n_az && v0 < grid.n_el {
                cells[grid.ray_index(u0, v0)] += z;
            }
            continue;
        }
        let s2 = (sigma_deg / grid.cell_deg).powi(2);
        for u in 0..grid.n_az {
            let du = wrapped_delta(u as f64, u0 as f64, period);
            for v in 0..grid.n_el {
                let dv = v as f64 - v0 as f64;
                let k = (-(du * du + dv * dv) / (2.0 * s2)).exp();
                cells[grid.ray_index(u, v)] += z * k;
            }
        }
    }
    SpectrumFrame::new(grid.n_az, grid.n_el, cells.iter().map(|z| z.norm_sqr()).collect())
}

/// Sorted hits of every ray, testing every primitive against every ray.
pub fn naive_hits(prepared: &PreparedScene) -> Vec<Vec<RayHit>> {
    let grid = prepared.grid;
    (0..grid.n_rays())
        .into_par_iter()
        .map(|ray| {
            let r = prepared.ray(ray / grid.n_el, ray % grid.n_el);
            let mut hits: Vec<_> = prepared
                .gaussians
                .iter()
                .enumerate()
                .filter(|(_, g)| g.active)
                .filter_map(|(i, g)| g.hit(i, &r))
                .collect();
            sort_hits(&mut hits);
            hits
        })
        .collect()
}

fn composite(prepared: &PreparedScene, hits: &[Vec<RayHit>]) -> RenderedFrame {
    let ch = prepared.channels;
    let mut values = Vec::with_capacity(hits.len() * ch);
    for h in hits {
        let mut s = vec![Complex::new(0.0, 0.0); ch];
        accumulate(prepared, h, &mut s);
        values.extend(s);
    }
    RenderedFrame {
        n_az: prepared.grid.n_az,
        n_el: prepared.grid.n_el,
        channels: ch,
        values,
    }
}

/// Test every primitive against every ray and sort hits with a comparison
/// sort.
pub fn naive_render(prepared: &PreparedScene) -> RenderedFrame {
    composite(prepared, &naive_hits(prepared))
}

pub fn naive_render_scene(scene: &RFScene, tx: &Vec3) -> Result<RenderedFrame> {
    Ok(naive_render(&PreparedScene::new(scene, tx)?))
}

/// Central difference `(f(w + h) - f(w - h)) / 2h`.
pub fn finite_diff(mut f: impl FnMut(f64) -> Result<f64>, w: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step {h} must be positive")));
    }
    let plus = f(w + h)?;
    let minus = f(w - h)?;
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(Error::Domain(format!("non-finite loss at {w} +- {h}")));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Central differences at `h` and `h / 2` combined to cancel the
/// second-order truncation term.
pub fn finite_diff_richardson(mut f: impl FnMut(f64) -> Result<f64>, w: f64, h: f64) -> Result<f64> {
    let coarse = finite_diff(&mut f, w, h)?;
    let fine = finite_diff(&mut f, w, 0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// One scalar parameter of one primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelector {
    MeanAxis {
        prim: usize,
        axis: usize,
    },
    Rotation {
        prim: usize,
        index: usize,
    },
    LogScale {
        prim: usize,
        axis: usize,
    },
    /// `|rho|` itself, written back through the logit.
    TransMag {
        prim: usize,
    },
    TransMagRaw {
        prim: usize,
    },
    TransPhase {
        prim: usize,
    },
    /// Flat coefficient index across channels.
    Coeff {
        prim: usize,
        index: usize,
        imag: bool,
    },
}

impl ParamSelector {
    pub fn prim(&self) -> usize {
        match *self {
            Self::MeanAxis { prim, .. }
            | Self::Rotation { prim, .. }
            | Self::LogScale { prim, .. }
            | Self::TransMag { prim }
            | Self::TransMagRaw { prim }
            | Self::TransPhase { prim }
            | Self::Coeff { prim, .. } => prim,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            Self::MeanAxis { .. } => "mean",
            Self::Rotation { .. } => "rotation",
            Self::LogScale { .. } => "log_scale",
            Self::TransMag { .. } | Self::TransMagRaw { .. } => "trans_mag",
            Self::TransPhase { .. } => "trans_phase",
            Self::Coeff { .. } => "coeffs",
        }
    }

    pub fn get(&self, scene: &RFScene) -> f64 {
        let p = &scene.primitives[self.prim()];
        match *self {
            Self::MeanAxis { axis, .. } => p.mean[axis],
            Self::Rotation { index, .. } => p.rotation[index],
            Self::LogScale { axis, .. } => p.log_scale[axis],
            Self::TransMag { .. } => logistic(p.trans_mag_raw),
            Self::TransMagRaw { .. } => p.trans_mag_raw,
            Self::TransPhase { .. } => p.trans_phase,
            Self::Coeff { index, imag, .. } => {
                if imag {
                    p.coeffs[index].im
                } else {
                    p.coeffs[index].re
                }
            }
        }
    }

    pub fn set(&self, scene: &mut RFScene, value: f64) {
        let p = &mut scene.primitives[self.prim()];
        match *self {
            Self::MeanAxis { axis, .. } => p.mean[axis] = value,
            Self::Rotation { index, .. } => p.rotation[index] = value,
            Self::LogScale { axis, .. } => p.log_scale[axis] = value,
            Self::TransMag { .. } => p.trans_mag_raw = logit(value),
            Self::TransMagRaw { .. } => p.trans_mag_raw = value,
            Self::TransPhase { .. } => p.trans_phase = value,
            Self::Coeff { index, imag, .. } => {
                if imag {
                    p.coeffs[index].im = value
                } else {
                    p.coeffs[index].re = value
                }
            }
        }
    }

    /// The matching entry of an analytic gradient.
    pub fn analytic(&self, g: &PrimitiveGrad) -> f64 {
        match *self {
            Self::MeanAxis { axis, .. } => g.mean[axis],
            Self::Rotation { index, .. } => g.rotation[index],
            Self::LogScale { axis, .. } => g.log_scale[axis],
            Self::TransMag { .. } => g.trans_mag,
            Self::TransMagRaw { .. } => g.trans_mag_raw,
            Self::TransPhase { .. } => g.trans_phase,
            Self::Coeff { index, imag, .. } => {
                if imag {
                    g.coeffs[index].im
                } else {
                    g.coeffs[index].re
                }
            }
        }
    }

    /// Every scalar parameter of primitive `prim`.
    pub fn all_for(prim: usize, n_coeffs: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for index in 0..n_coeffs {
            for imag in [false, true] {
                out.push(Self::Coeff { prim, index, imag });
            }
        }
        out.push(Self::TransMag { prim });
        out.push(Self::TransMagRaw { prim });
        out.push(Self::TransPhase { prim });
        for axis in 0..3 {
            out.push(Self::MeanAxis { prim, axis });
        }
        for index in 0..4 {
            out.push(Self::Rotation { prim, index });
        }
        for axis in 0..3 {
            out.push(Self::LogScale { prim, axis });
        }
        out
    }
}

/// Central difference of `loss` along one scene parameter.
pub fn finite_diff_param(
    loss: impl Fn(&RFScene) -> Result<f64>,
    scene: &RFScene,
    sel: ParamSelector,
    h: f64,
) -> Result<f64> {
    let w = sel.get(scene);
    let mut work = scene.clone();
    finite_diff(
        |x| {
            sel.set(&mut work, x);
            loss(&work)
        },
        w,
        h,
    )
}

/// Extrapolated central difference of `loss` along one scene parameter.
pub fn finite_diff_param_richardson(
    loss: impl Fn(&RFScene) -> Result<f64>,
    scene: &RFScene,
    sel: ParamSelector,
    h: f64,
) -> Result<f64> {
    let w = sel.get(scene);
    let mut work = scene.clone();
    finite_diff_richardson(
        |x| {
            sel.set(&mut work, x);
            loss(&work)
        },
        w,
        h,
    )
}

/// Ranges for randomly drawn primitives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSpec {
    /// Distance of the mean from the receiver.
    pub distance: (f64, f64),
    /// Per-axis standard deviation.
    pub scale: (f64, f64),
    /// Bound on the degree-zero coefficient parts; degree `l` uses
    /// `amplitude / (1 + l)`.
    pub amplitude: f64,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            distance: (1.3, 4.0),
            scale: (0.15, 0.6),
            amplitude: 0.5,
        }
    }
}

/// Random primitive around `rx`.
pub fn random_primitive(
    rng: &mut impl Rng,
    rx: &Vec3,
    spec: &RandomSpec,
    fle_degree: usize,
    channels: usize,
) -> GaussianPrimitive {
    let dir = loop {
        let d = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = d.norm();
        if n > 0.1 && n <= 1.0 {
            break d / n;
        }
    };
    let mean = rx + dir * rng.random_range(spec.distance.0..spec.distance.1);
    let mut p = GaussianPrimitive::isotropic(mean, 1.0, fle_degree, channels);
    p.rotation = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    p.normalize_rotation();
    let (lo, hi) = spec.scale;
    p.log_scale = Vec3::new(
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    )
    .map(f64::ln);
    p.trans_mag_raw = rng.random_range(-0.5..1.5);
    p.trans_phase = rng.random_range(-PI..PI);
    let bl = crate::fle::basis_len(fle_degree);
    for (i, c) in p.coeffs.iter_mut().enumerate() {
        let l = ((i % bl) as f64).sqrt().floor();
        let amp = spec.amplitude / (1.0 + l);
        *c = Complex::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
    }
    p
}

/// Random scene of `n` primitives around the origin receiver.
pub fn random_scene(rng: &mut impl Rng, n: usize, grid: AngularGrid, fle_degree: usize, channels: usize) -> RFScene {
    random_scene_with(rng, n, grid, fle_degree, channels, &RandomSpec::default())
}

pub fn random_scene_with(
    rng: &mut impl Rng,
    n: usize,
    grid: AngularGrid,
    fle_degree: usize,
    channels: usize,
    spec: &RandomSpec,
) -> RFScene {
    let setup = SceneSetup {
        grid,
        ..SceneSetup::default()
    };
    let r = spec.distance.1 + 3.0 * spec.scale.1 + 1.0;
    let bounds = Bounds::new(Vec3::repeat(-r), Vec3::repeat(r)).expect("finite bounds");
    let mut scene = RFScene::empty(&setup, bounds, fle_degree, channels);
    for _ in 0..n {
        scene
            .primitives
            .push(random_primitive(rng, &setup.rx, spec, fle_degree, channels));
    }
    scene
}

/// Many small primitives spread around the receiver, sized for render timing.
pub fn bench_scene(rng: &mut impl Rng, n: usize, grid: AngularGrid) -> RFScene {
    let spec = RandomSpec {
        distance: (1.5, 8.0),
        scale: (0.02, 0.1),
        amplitude: 0.5,
    };
    random_scene_with(rng, n, grid, 3, 1, &spec)
}

/// Spectrum loss of the brute-force render, for finite differences.
pub fn spectrum_loss_naive(prepared: &PreparedScene, gt: &SpectrumFrame, weights: &LossWeights) -> Result<f64> {
    Ok(spectrum_loss(&naive_render(prepared).power(), gt, weights)?.total)
}

/// Analytic gradient of the spectrum loss through the tiled pipeline.
pub fn spectrum_gradient(
    scene: &RFScene,
    tx: &Vec3,
    gt: &SpectrumFrame,
    weights: &LossWeights,
    config: &GradConfig,
) -> Result<(f64, GradientBuffer)> {
    let plan = RenderPlan::new(scene, tx)?;
    let frame = plan.render();
    let report = spectrum_loss(&frame.power(), gt, weights)?;
    let up = upstream_from_power(&frame, &report.grad)?;
    Ok((report.total, backward(scene, &plan, &up, config)?))
}

/// Largest relative error of one parameter class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Parameters skipped because a ray grazes the primitive's ellipsoid.
    pub skipped: usize,
    /// Parameters whose difference stencil crosses a non-smooth point.
    pub kinks: usize,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub classes: Vec<ClassReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(ClassReport::passed)
    }

    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// Combine reports class by class, keeping the worst error.
    pub fn merge(&mut self, other: &Self) {
        for o in &other.classes {
            match self.classes.iter_mut().find(|c| c.class == o.class) {
                Some(c) => {
                    c.max_rel_err = c.max_rel_err.max(o.max_rel_err);
                    c.checked += o.checked;
                    c.skipped += o.skipped;
                    c.kinks += o.kinks;
                }
                None => self.classes.push(o.clone()),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step for coefficients.
    pub step: f64,
    /// Extrapolation step for means, rotation, log-scale and covariance.
    pub geometry_step: f64,
    /// Extrapolation step for transmittance magnitude and phase.
    pub transmittance_step: f64,
    /// Tolerance for coefficients, transmittance and means.
    pub tolerance: f64,
    /// Tolerance for rotation, log-scale and covariance entries.
    pub shape_tolerance: f64,
    pub weights: LossWeights,
    pub grad: GradConfig,
    /// Grazing threshold on `1 - b^2 / 9`, `b` the Mahalanobis distance
    /// from the mean to the ray.
    pub graze: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            geometry_step: 1e-4,
            transmittance_step: 1e-2,
            tolerance: 1e-4,
            shape_tolerance: 1e-3,
            weights: LossWeights::default(),
            grad: GradConfig::default(),
            graze: 1e-3,
        }
    }
}

/// Primitives whose geometry sits near a non-smooth configuration: a ray
/// grazing the 3-sigma surface, a segment end crossing the ray-emitting
/// sphere, or a transmitter bearing on the equator of the radiance basis.
pub fn fragile_primitives(prepared: &PreparedScene, graze: f64) -> Vec<bool> {
    let grid = prepared.grid;
    let mut out = vec![false; prepared.gaussians.len()];
    for (i, g) in prepared.gaussians.iter().enumerate() {
        if !g.active {
            continue;
        }
        let e = prepared.tx - g.mean;
        if (e.z / e.norm()).abs() < 1e-3 {
            out[i] = true;
            continue;
        }
        for u in 0..grid.n_az {
            for v in 0..grid.n_el {
                let ray = prepared.ray(u, v);
                let o = ray.origin - g.mean;
                let q = crate::render::Quadratic::new(&g.precision, &o, &ray.dir);
                let margin = q.discriminant() / (crate::render::LEVEL * q.a);
                if margin.abs() < graze {
                    out[i] = true;
                }
                if margin > 0.0 {
                    let sq = q.discriminant().sqrt();
                    let std = q.a.sqrt();
                    let t_in = (-q.b - sq) / q.a;
                    let t_out = (-q.b + sq) / q.a;
                    if ((t_in - ray.min_t) * std).abs() < graze || ((t_out - ray.min_t) * std).abs() < graze {
                        out[i] = true;
                    }
                }
            }
        }
    }
    out
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Denominator floor as a fraction of the largest numeric gradient in a class.
const FLOOR_FRACTION: f64 = 1e-5;

/// Power frame plus the ordered primitive indices hit by every ray.
struct Probe {
    power: SpectrumFrame,
    order: Vec<Vec<usize>>,
}

impl Probe {
    fn new(prepared: &PreparedScene) -> Self {
        let hits = naive_hits(prepared);
        Self {
            power: composite(prepared, &hits).power(),
            order: hits
                .iter()
                .map(|h| h.iter().map(|x| x.gaussian_index).collect())
                .collect(),
        }
    }

    /// True when the loss is not smooth between `self` and `other`: a ray
    /// gains, loses or reorders hits, or a residual changes sign.
    fn breaks(&self, other: &Self, gt: &SpectrumFrame) -> bool {
        self.order != other.order
            || self
                .power
                .data
                .iter()
                .zip(&other.power.data)
                .zip(&gt.data)
                .any(|((x, y), g)| (x - g) * (y - g) < 0.0)
    }
}

/// Central difference of the spectrum loss along `w`, or `None` when the
/// stencil crosses a non-smooth point.
fn loss_probe(
    mut prepare: impl FnMut(f64) -> Result<PreparedScene>,
    w: f64,
    h: f64,
    extrapolate: bool,
    center: &Probe,
    gt: &SpectrumFrame,
    weights: &LossWeights,
) -> Result<Option<f64>> {
    let steps: &[f64] = if extrapolate { &[1.0, 0.5] } else { &[1.0] };
    let mut diffs = Vec::with_capacity(steps.len());
    for &k in steps {
        let plus = Probe::new(&prepare(w + k * h)?);
        let minus = Probe::new(&prepare(w - k * h)?);
        if center.breaks(&plus, gt) || center.breaks(&minus, gt) {
            return Ok(None);
        }
        let lp = spectrum_loss(&plus.power, gt, weights)?.total;
        let lm = spectrum_loss(&minus.power, gt, weights)?.total;
        diffs.push((lp - lm) / (2.0 * k * h));
    }
    Ok(Some(match diffs[..] {
        [d] => d,
        [coarse, fine] => (4.0 * fine - coarse) / 3.0,
        _ => unreachable!(),
    }))
}

enum Row {
    Checked(f64, f64),
    Grazing,
    Kink,
}

/// Compare analytic gradients of the spectrum loss with central finite
/// differences for every parameter of every primitive, plus the six
/// independent covariance entries.
pub fn gradcheck(scene: &RFScene, tx: &Vec3, gt: &SpectrumFrame, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (_, buf) = spectrum_gradient(scene, tx, gt, &cfg.weights, &cfg.grad)?;
    let prepared = PreparedScene::new(scene, tx)?;
    let center = Probe::new(&prepared);
    let fragile = fragile_primitives(&prepared, cfg.graze);
    let n_coeffs = scene.channels * scene.basis_len();
    let geometric = |c: &str| matches!(c, "mean" | "rotation" | "log_scale" | "covariance");
    let base: Vec<Mat3> = scene.primitives.iter().map(GaussianPrimitive::covariance).collect();
    let mut rows: Vec<(&'static str, Row)> = Vec::new();
    for prim in 0..scene.len() {
        for sel in ParamSelector::all_for(prim, n_coeffs) {
            let class = sel.class();
            if geometric(class) && fragile[prim] {
                rows.push((class, Row::Grazing));
                continue;
            }
            let (h, extrapolate) = match sel {
                ParamSelector::Coeff { .. } => (cfg.step, false),
                ParamSelector::TransMag { .. }
                | ParamSelector::TransMagRaw { .. }
                | ParamSelector::TransPhase { .. } => (cfg.transmittance_step, true),
                _ => (cfg.geometry_step, true),
            };
            let mut work = scene.clone();
            let probe = loss_probe(
                |x| {
                    sel.set(&mut work, x);
                    PreparedScene::new(&work, tx)
                },
                sel.get(scene),
                h,
                extrapolate,
                &center,
                gt,
                &cfg.weights,
            )?;
            rows.push((
                class,
                match probe {
                    Some(n) => Row::Checked(sel.analytic(&buf.grads[prim]), n),
                    None => Row::Kink,
                },
            ));
        }
        for i in 0..3 {
            for j in i..3 {
                if fragile[prim] {
                    rows.push(("covariance", Row::Grazing));
                    continue;
                }
                let mut e = Mat3::zeros();
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let analytic = buf.grads[prim].covariance.component_mul(&e).sum();
                let probe = loss_probe(
                    |x| {
                        let mut covs = base.clone();
                        covs[prim] += e * x;
                        PreparedScene::with_covariances(scene, tx, &covs)
                    },
                    0.0,
                    cfg.geometry_step,
                    true,
                    &center,
                    gt,
                    &cfg.weights,
                )?;
                rows.push((
                    "covariance",
                    match probe {
                        Some(n) => Row::Checked(analytic, n),
                        None => Row::Kink,
                    },
                ));
            }
        }
    }
    let order = [
        "coeffs",
        "trans_mag",
        "trans_phase",
        "mean",
        "rotation",
        "log_scale",
        "covariance",
    ];
    let classes = order
        .iter()
        .map(|&class| {
            let items: Vec<&Row> = rows.iter().filter(|r| r.0 == class).map(|r| &r.1).collect();
            let checked: Vec<(f64, f64)> = items
                .iter()
                .filter_map(|r| match r {
                    Row::Checked(a, n) => Some((*a, *n)),
                    _ => None,
                })
                .collect();
            let scale = checked.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
            let floor = FLOOR_FRACTION * scale;
            ClassReport {
                class: class.to_string(),
                max_rel_err: checked.iter().map(|r| rel_err(r.0, r.1, floor)).fold(0.0, f64::max),
                tolerance: if geometric(class) && class != "mean" {
                    cfg.shape_tolerance
                } else {
                    cfg.tolerance
                },
                checked: checked.len(),
                skipped: items.iter().filter(|r| matches!(r, Row::Grazing)).count(),
                kinks: items.iter().filter(|r| matches!(r, Row::Kink)).count(),
            }
        })
        .collect();
    Ok(GradcheckReport { classes })
}

/// A random scene, transmitter and target spectrum for gradient checks.
pub fn gradcheck_case(rng: &mut impl Rng, n: usize) -> Result<(RFScene, Vec3, SpectrumFrame)> {
    let grid = AngularGrid::full_sphere(16, 8)?;
    let scene = random_scene(rng, n, grid, 3, 1);
    let far = RandomSpec {
        distance: (3.0, 6.0),
        scale: (1.0, 1.1),
        ..RandomSpec::default()
    };
    let tx = random_primitive(rng, &Vec3::zeros(), &far, 0, 1).mean;
    let mut teacher = scene.clone();
    for p in &mut teacher.primitives {
        p.mean += Vec3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        );
        for c in &mut p.coeffs {
            *c *= rng.random_range(0.5..1.5);
        }
    }
    let gt = naive_render_scene(&teacher, &tx)?.power();
    Ok((scene, tx, gt))
}

/// Number of CSI subcarriers per sample.
pub const CSI_SUBCARRIERS: usize = 26;
/// Subcarrier spacing in Hz.
pub const SUBCARRIER_SPACING: f64 = 312.5e3;

/// Frequencies of the CSI subcarriers, centered on the carrier.
pub fn subcarrier_freqs(carrier: f64) -> Vec<f64> {
    let mid = (CSI_SUBCARRIERS as f64 - 1.0) / 2.0;
    (0..CSI_SUBCARRIERS)
        .map(|k| carrier + (k as f64 - mid) * SUBCARRIER_SPACING)
        .collect()
}

/// Where ground truth comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    /// Direct plus single-bounce paths through the multipath simulator.
    Multipath {
        paths: Vec<PathSpec>,
        #[serde(default)]
        medium: Medium,
        #[serde(default = "default_sigma_beam")]
        sigma_beam: f64,
    },
    /// A random Gaussian scene rendered by the brute-force renderer.
    Teacher {
        gaussians: usize,
        #[serde(default = "default_teacher_degree")]
        fle_degree: usize,
        #[serde(default)]
        shape: RandomSpec,
    },
}

fn default_sigma_beam() -> f64 {
    2.0
}

fn default_teacher_degree() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub mode: Mode,
    pub samples: usize,
    /// Fraction of samples held out for evaluation.
    pub test_fraction: f64,
    pub n_az: usize,
    pub n_el: usize,
    pub cell_deg: f64,
    pub carrier_freq: f64,
    pub rx: Vec3,
    /// Transmitters are drawn uniformly from this box.
    pub tx_min: Vec3,
    pub tx_max: Vec3,
    /// Minimum transmitter distance from the receiver and any reflector.
    pub clearance: f64,
    pub source: Source,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Spectrum,
            samples: 10,
            test_fraction: 0.1,
            n_az: 36,
            n_el: 18,
            cell_deg: 10.0,
            carrier_freq: 2.4e9,
            rx: Vec3::zeros(),
            tx_min: Vec3::new(-6.0, -6.0, -2.0),
            tx_max: Vec3::new(6.0, 6.0, 2.0),
            clearance: 1.0,
            source: Source::Multipath {
                paths: vec![
                    PathSpec::direct(1.0),
                    PathSpec::bounce(Vec3::new(0.0, 4.0, 0.0), 0.6, 0.0),
                    PathSpec::bounce(Vec3::new(-4.0, 0.0, 1.0), 0.5, 0.3),
                    PathSpec::bounce(Vec3::new(0.0, 0.0, -3.0), 0.4, 1.1),
                ],
                medium: Medium::default(),
                sigma_beam: default_sigma_beam(),
            },
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn grid(&self) -> Result<AngularGrid> {
        AngularGrid::new(self.n_az, self.n_el, self.cell_deg)
    }

    pub fn channels(&self) -> usize {
        if self.mode == Mode::Csi {
            CSI_SUBCARRIERS
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} must lie in [0, 1)",
                self.test_fraction
            )));
        }
        if (0..3).any(|i| !(self.tx_min[i] < self.tx_max[i])) {
            return Err(Error::Config("tx_min must lie below tx_max on every axis".into()));
        }
        if !(self.carrier_freq > 0.0) {
            return Err(Error::Config("carrier_freq must be positive".into()));
        }
        match &self.source {
            Source::Multipath {
                paths,
                medium,
                sigma_beam,
            } => {
                if paths.is_empty() || paths.iter().any(|p| !(p.amplitude >= 0.0)) {
                    return Err(Error::Config(
                        "paths must be non-empty with non-negative amplitudes".into(),
                    ));
                }
                if !(medium.speed_of_light > 0.0 && *sigma_beam >= 0.0) {
                    return Err(Error::Config(
                        "speed_of_light must be positive, sigma_beam non-negative".into(),
                    ));
                }
            }
            Source::Teacher { gaussians, .. } => {
                if *gaussians == 0 {
                    return Err(Error::Config("teacher scene needs at least one Gaussian".into()));
                }
            }
        }
        Ok(())
    }
}

fn draw_tx(rng: &mut ChaCha8Rng, cfg: &GenerateConfig, avoid: &[Vec3]) -> Result<Vec3> {
    for _ in 0..10_000 {
        let t = Vec3::from_fn(|i, _| rng.random_range(cfg.tx_min[i]..cfg.tx_max[i]));
        if avoid.iter().all(|a| (t - a).norm() >= cfg.clearance) {
            return Ok(t);
        }
    }
    Err(Error::Config("no transmitter position satisfies the clearance".into()))
}

/// Teacher scene used by a `Teacher` source; deterministic in the seed.
pub fn teacher_scene(cfg: &GenerateConfig) -> Result<Option<RFScene>> {
    let Source::Teacher {
        gaussians,
        fle_degree,
        shape,
    } = cfg.source
    else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac_4e55);
    let mut scene = random_scene_with(&mut rng, gaussians, cfg.grid()?, fle_degree, cfg.channels(), &shape);
    scene.rx = cfg.rx;
    for p in &mut scene.primitives {
        p.mean += cfg.rx;
    }
    Ok(Some(scene))
}

/// Synthesize a dataset; targets are rounded to `f32` so the in-memory
/// copy equals what [`crate::io::write_dataset`] stores.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let teacher = teacher_scene(cfg)?;
    let mut avoid = vec![cfg.rx];
    match (&cfg.source, &teacher) {
        (Source::Multipath { paths, .. }, _) => avoid.extend(paths.iter().filter_map(|p| p.reflector)),
        (_, Some(t)) => avoid.extend(t.primitives.iter().map(|p| p.mean)),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let txs = (0..cfg.samples)
        .map(|_| draw_tx(&mut rng, cfg, &avoid))
        .collect::<Result<Vec<_>>>()?;
    let n_test = (cfg.samples as f64 * cfg.test_fraction).round() as usize;
    let samples = txs
        .par_iter()
        .enumerate()
        .map(|(i, tx)| {
            let target = synthesize(cfg, &grid, teacher.as_ref(), tx)?.quantized();
            Ok(Sample {
                id: format!("{i:05}"),
                tx: *tx,
                split: if i + n_test >= cfg.samples {
                    Split::Test
                } else {
                    Split::Train
                },
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        mode: cfg.mode,
        grid,
        carrier_freq: cfg.carrier_freq,
        rx: cfg.rx,
        channels: cfg.channels(),
        samples,
    })
}

fn synthesize(cfg: &GenerateConfig, grid: &AngularGrid, teacher: Option<&RFScene>, tx: &Vec3) -> Result<Target> {
    match (&cfg.source, teacher) {
        (
            Source::Multipath {
                paths,
                medium,
                sigma_beam,
            },
            _,
        ) => Ok(match cfg.mode {
            Mode::Spectrum => Target::Spectrum(spectrum_oracle(
                paths,
                tx,
                &cfg.rx,
                cfg.carrier_freq,
                medium,
                grid,
                *sigma_beam,
            )?),
            Mode::Rssi => Target::Rssi(power_dbm(multipath_signal(
                paths,
                tx,
                &cfg.rx,
                cfg.carrier_freq,
                medium,
            )?)),
            Mode::Csi => Target::Csi(
                subcarrier_freqs(cfg.carrier_freq)
                    .iter()
                    .map(|&f| multipath_signal(paths, tx, &cfg.rx, f, medium))
                    .collect::<Result<_>>()?,
            ),
        }),
        (Source::Teacher { .. }, Some(scene)) => {
            let frame = naive_render_scene(scene, tx)?;
            Ok(match cfg.mode {
                Mode::Spectrum => Target::Spectrum(frame.power()),
                Mode::Rssi => Target::Rssi(power_dbm(frame.coherent_sum()[0])),
                Mode::Csi => Target::Csi(frame.coherent_sum()),
            })
        }
        _ => Err(Error::Contract("teacher source without a teacher scene".into())),
    }
}
