//! Fourier-Legendre expansion of directional complex radiance.
//!
//! Basis entry `(l, m)` is `e^{i m alpha} P_l^m(cos beta)` with `alpha` the
//! azimuth and `beta` the elevation in `[-pi/2, pi/2]`. Associated Legendre
//! functions carry the Condon-Shortley phase. Entries are stored in `(l, m)`
//! order, index `l^2 + l + m`.

use crate::error::{Error, Result};
use crate::Complex;

/// Number of basis functions up to degree `degree`.
pub const fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Flat index of `(l, m)`.
pub fn basis_index(l: usize, m: i64) -> usize {
    (l * l) + (l as i64 + m) as usize
}

/// Associated Legendre function `P_l^m(x)`, Condon-Shortley phase.
pub fn assoc_legendre(l: usize, m: i64, x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("Legendre argument {x} outside [-1, 1]")));
    }
    if m.unsigned_abs() as usize > l {
        return Err(Error::Domain(format!("|m| = {} exceeds l = {l}", m.abs())));
    }
    let table = legendre_table(l, x);
    Ok(table[basis_index(l, m)])
}

/// All `P_l^m(x)` for `l <= degree`, `|m| <= l`, in basis order.
///
/// Upward recurrence in `l` at fixed `m >= 0`; negative orders from
/// `P_l^{-m} = (-1)^m (l-m)!/(l+m)! P_l^m`.
pub fn legendre_table(degree: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; basis_len(degree)];
    let s = (1.0 - x * x).max(0.0).sqrt();
    // P_m^m = (-1)^m (2m-1)!! s^m
    let mut pmm = 1.0;
    for m in 0..=degree {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        out[basis_index(m, m as i64)] = pmm;
        if m < degree {
            let mut prev = pmm;
            let mut cur = x * (2 * m + 1) as f64 * pmm;
            out[basis_index(m + 1, m as i64)] = cur;
            for l in (m + 2)..=degree {
                let next = ((2 * l - 1) as f64 * x * cur - (l + m - 1) as f64 * prev) / (l - m) as f64;
                prev = cur;
                cur = next;
                out[basis_index(l, m as i64)] = cur;
            }
        }
    }
    for l in 1..=degree {
        for m in 1..=l {
            let mut ratio = 1.0;
            // (l-m)!/(l+m)!
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            out[basis_index(l, -(m as i64))] = sign * ratio * out[basis_index(l, m as i64)];
        }
    }
    out
}

/// Basis values at one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct FleBasis {
    pub degree: usize,
    pub values: Vec<Complex>,
}

/// Basis values and their derivatives with respect to `alpha` and `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct FleBasisGrad {
    pub values: Vec<Complex>,
    pub d_alpha: Vec<Complex>,
    pub d_beta: Vec<Complex>,
}

fn azimuth_factors(degree: usize, alpha: f64) -> Vec<Complex> {
    // e^{i m alpha} for m = -L..=L
    let l = degree as i64;
    (-l..=l).map(|m| Complex::from_polar(1.0, m as f64 * alpha)).collect()
}

/// Evaluate the basis at azimuth `alpha`, elevation `beta`.
pub fn fle_basis(alpha: f64, beta: f64, degree: usize) -> FleBasis {
    FleBasis {
        degree,
        values: basis_from_cos(alpha, beta.cos(), degree),
    }
}

/// Basis with an explicit Legendre argument, used where the angle is a
/// polar angle rather than an elevation.
pub fn basis_from_cos(alpha: f64, cos_arg: f64, degree: usize) -> Vec<Complex> {
    let p = legendre_table(degree, cos_arg.clamp(-1.0, 1.0));
    let az = azimuth_factors(degree, alpha);
    let mut out = Vec::with_capacity(basis_len(degree));
    for l in 0..=degree {
        for m in -(l as i64)..=(l as i64) {
            out.push(az[(m + degree as i64) as usize] * p[basis_index(l, m)]);
        }
    }
    out
}

/// Basis values with angular derivatives.
///
/// `P_l^m(cos beta)` depends on `|beta|`, so the elevation derivative is
/// `sign(beta) f'(|beta|)` with
/// `f'(t) = (P_l^{m+1}(cos t) - (l+m)(l-m+1) P_l^{m-1}(cos t)) / 2`,
/// which stays finite at the equator and the poles. At `beta = 0` the odd
/// orders have a kink and the zero subgradient is returned.
pub fn fle_basis_grad(alpha: f64, beta: f64, degree: usize) -> FleBasisGrad {
    let x = beta.cos();
    let p = legendre_table(degree, x);
    let az = azimuth_factors(degree, alpha);
    let sign = if beta > 0.0 {
        1.0
    } else if beta < 0.0 {
        -1.0
    } else {
        0.0
    };
    let n = basis_len(degree);
    let mut values = Vec::with_capacity(n);
    let mut d_alpha = Vec::with_capacity(n);
    let mut d_beta = Vec::with_capacity(n);
    for l in 0..=degree {
        let li = l as i64;
        for m in -li..=li {
            let e = az[(m + degree as i64) as usize];
            let v = e * p[basis_index(l, m)];
            values.push(v);
            d_alpha.push(v * Complex::new(0.0, m as f64));
            let up = if m < li { p[basis_index(l, m + 1)] } else { 0.0 };
            let down = if m > -li { p[basis_index(l, m - 1)] } else { 0.0 };
            let dtheta = 0.5 * (up - ((li + m) * (li - m + 1)) as f64 * down);
            d_beta.push(e * (sign * dtheta));
        }
    }
    FleBasisGrad {
        values,
        d_alpha,
        d_beta,
    }
}

/// Radiance `sum c_lm e^{i m alpha} P_l^m(cos beta)`.
pub fn fle_eval(coeffs: &[Complex], alpha: f64, beta: f64) -> Result<Complex> {
    let degree = degree_for_len(coeffs.len())?;
    let basis = fle_basis(alpha, beta, degree);
    Ok(dot(coeffs, &basis.values))
}

/// Degree `L` with `(L + 1)^2 = len`.
pub fn degree_for_len(len: usize) -> Result<usize> {
    let root = (len as f64).sqrt().round() as usize;
    if root == 0 || root * root != len {
        return Err(Error::shape("(L+1)^2 coefficients", len));
    }
    Ok(root - 1)
}

pub(crate) fn dot(coeffs: &[Complex], basis: &[Complex]) -> Complex {
    coeffs.iter().zip(basis).map(|(c, b)| c * b).sum()
}
