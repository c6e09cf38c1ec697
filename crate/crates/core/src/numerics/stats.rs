use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle into the half-open interval `[−π, π)`.
pub fn wrap(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let two_pi = 2.0 * PI;
    let mut r = x - two_pi * ((x + PI) / two_pi).floor();
    // floor can land one period off when x+π is within an ulp of a multiple
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    if r >= PI {
        -PI
    } else {
        r
    }
}

/// Empirical CDF with the midpoint-rank convention.
///
/// Each distinct sample value `u` covering sorted positions `i..i+t` sits at
/// height `(i + t/2)/n`; evaluation interpolates linearly between these knots
/// and clamps outside the sample range, so `inv(eval(v)) = v` on samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    sorted: Vec<f64>,
    knots_x: Vec<f64>,
    knots_u: Vec<f64>,
}

impl Ecdf {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::insufficient(1, 0));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite ECDF sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut knots_x = Vec::new();
        let mut knots_u = Vec::new();
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            knots_x.push(sorted[i]);
            knots_u.push((i + j) as f64 / (2.0 * n));
            i = j;
        }
        Ok(Self {
            sorted,
            knots_x,
            knots_u,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn eval(&self, v: f64) -> f64 {
        interp(&self.knots_x, &self.knots_u, v)
    }

    pub fn inv(&self, u: f64) -> f64 {
        interp(&self.knots_u, &self.knots_x, u)
    }

    /// Quantile transfer `G⁻¹(F(v))` from this distribution onto `target`.
    pub fn transfer(&self, target: &Ecdf, v: f64) -> f64 {
        target.inv(self.eval(v))
    }
}

// Piecewise-linear interpolation through strictly increasing `xs`, clamped.
fn interp(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let last = xs.len() - 1;
    if v <= xs[0] {
        return ys[0];
    }
    if v >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&x| x <= v);
    let lo = hi - 1;
    if xs[lo] == v {
        return ys[lo];
    }
    let w = (v - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}

pub fn ecdf_fit(values: &[f64]) -> Result<Ecdf> {
    Ecdf::fit(values)
}

pub fn ecdf_eval(f: &Ecdf, v: f64) -> f64 {
    f.eval(v)
}

pub fn ecdf_inv(f: &Ecdf, u: f64) -> f64 {
    f.inv(u)
}

/// Magnitude and argument of the mean resultant `E e^{iθ}`.
pub fn circular_mean(angles: &[f64]) -> Result<(f64, f64)> {
    if angles.is_empty() {
        return Err(Error::insufficient(1, 0));
    }
    let n = angles.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for &a in angles {
        c += a.cos();
        s += a.sin();
    }
    let (c, s) = (c / n, s / n);
    let mag = (c * c + s * s).sqrt().min(1.0);
    Ok((mag, wrap(s.atan2(c))))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
