//! Horizontal spectral machinery on the torus T^2 = (2 pi L1 T) x (2 pi L2 T).
//!
//! Fields are expanded as f(x') = sum_xi c_xi e^{i xi . x'} over the frequency
//! lattice xi in (L1^-1 Z) x (L2^-1 Z) truncated to the grid.  Coefficients are
//! stored in FFT order; the forward transform divides by n1*n2 so that the
//! coefficients are the c_xi above.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Result, SimError};

/// Periodic horizontal domain spec: torus lengths and mode counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusSpec {
    /// Periodicity length L1 (the torus direction 1 has circumference 2 pi L1).
    pub l1: f64,
    /// Periodicity length L2.
    pub l2: f64,
    /// Grid points along direction 1 (even, >= 4).
    pub n1: usize,
    /// Grid points along direction 2 (even, >= 4).
    pub n2: usize,
}

impl TorusSpec {
    pub fn new(l1: f64, l2: f64, n1: usize, n2: usize) -> Result<Self> {
        if !(l1 > 0.0) || !(l2 > 0.0) {
            return Err(SimError::ValidationError {
                key: "grid.l1/l2".into(),
                msg: "periodicity lengths must be positive".into(),
            });
        }
        if n1 < 4 || n2 < 4 || n1 % 2 != 0 || n2 % 2 != 0 {
            return Err(SimError::ValidationError {
                key: "grid.n1/n2".into(),
                msg: "mode counts must be even and >= 4".into(),
            });
        }
        Ok(TorusSpec { l1, l2, n1, n2 })
    }

    /// Horizontal area (2 pi L1)(2 pi L2).
    pub fn area(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.l1) * (2.0 * std::f64::consts::PI * self.l2)
    }

    /// Grid spacing along direction 1.
    pub fn dx1(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.l1 / self.n1 as f64
    }

    pub fn dx2(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.l2 / self.n2 as f64
    }

    /// Grid coordinates x1_i = i * dx1.
    pub fn x1(&self, i: usize) -> f64 {
        i as f64 * self.dx1()
    }

    pub fn x2(&self, j: usize) -> f64 {
        j as f64 * self.dx2()
    }

    /// Signed integer wavenumber for FFT index k along an axis of n points.
    #[inline]
    pub fn wavenumber(k: usize, n: usize) -> i64 {
        if k <= n / 2 {
            k as i64
        } else {
            k as i64 - n as i64
        }
    }

    /// Frequency component xi_1 at FFT index k1 (zero at the Nyquist index so
    /// that spectral derivatives of real fields stay real).
    #[inline]
    pub fn xi1(&self, k1: usize) -> f64 {
        let m = Self::wavenumber(k1, self.n1);
        if 2 * k1 == self.n1 {
            0.0
        } else {
            m as f64 / self.l1
        }
    }

    #[inline]
    pub fn xi2(&self, k2: usize) -> f64 {
        let m = Self::wavenumber(k2, self.n2);
        if 2 * k2 == self.n2 {
            0.0
        } else {
            m as f64 / self.l2
        }
    }

    /// |xi| at FFT indices (k1, k2); Nyquist rows use the true magnitude
    /// (it only scales even multipliers such as e^{|xi| z}).
    #[inline]
    pub fn xi_mag(&self, k1: usize, k2: usize) -> f64 {
        let m1 = Self::wavenumber(k1, self.n1) as f64 / self.l1;
        let m2 = Self::wavenumber(k2, self.n2) as f64 / self.l2;
        (m1 * m1 + m2 * m2).sqrt()
    }
}

thread_local! {
    static PLANS: Mutex<HashMap<usize, Arc<dyn Fft<f64>>>> = Mutex::new(HashMap::new());
    static PLANS_INV: Mutex<HashMap<usize, Arc<dyn Fft<f64>>>> = Mutex::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let cache = if inverse { &PLANS_INV } else { &PLANS };
    cache.with(|c| {
        let mut map = c.lock().unwrap();
        map.entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn fft2_inplace(data: &mut Array2<Complex64>, inverse: bool) {
    let (n1, n2) = data.dim();
    let p2 = plan(n2, inverse);
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        p2.process(slice);
    }
    let p1 = plan(n1, inverse);
    let mut col = vec![Complex64::default(); n1];
    for j in 0..n2 {
        for i in 0..n1 {
            col[i] = data[[i, j]];
        }
        p1.process(&mut col);
        for i in 0..n1 {
            data[[i, j]] = col[i];
        }
    }
}

/// Forward transform: grid values -> coefficients c_xi (normalized by n1*n2).
pub fn grid_to_coeffs(values: &Array2<f64>) -> Array2<Complex64> {
    let (n1, n2) = values.dim();
    let mut data = values.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut data, false);
    let scale = 1.0 / (n1 * n2) as f64;
    data.mapv_inplace(|c| c * scale);
    data
}

/// Inverse transform: coefficients -> real grid values (imaginary parts dropped;
/// they are round-off for Hermitian-symmetric input).
pub fn coeffs_to_grid(coeffs: &Array2<Complex64>) -> Array2<f64> {
    let mut data = coeffs.clone();
    fft2_inplace(&mut data, true);
    data.mapv(|c| c.re)
}

/// Enforce Hermitian symmetry c(-xi) = conj(c(xi)) by averaging paired entries.
pub fn symmetrize(coeffs: &mut Array2<Complex64>) {
    let (n1, n2) = coeffs.dim();
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let m1 = (n1 - k1) % n1;
            let m2 = (n2 - k2) % n2;
            if (k1, k2) <= (m1, m2) {
                let a = coeffs[[k1, k2]];
                let b = coeffs[[m1, m2]].conj();
                let avg = 0.5 * (a + b);
                coeffs[[k1, k2]] = avg;
                coeffs[[m1, m2]] = avg.conj();
            }
        }
    }
}

/// Max deviation from Hermitian symmetry (diagnostic).
pub fn hermitian_defect(coeffs: &Array2<Complex64>) -> f64 {
    let (n1, n2) = coeffs.dim();
    let mut worst = 0.0f64;
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let m1 = (n1 - k1) % n1;
            let m2 = (n2 - k2) % n2;
            let d = (coeffs[[k1, k2]] - coeffs[[m1, m2]].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst
}

/// Spectral derivative along axis 1 or 2 of a grid field.
pub fn spectral_derivative(spec: &TorusSpec, values: &Array2<f64>, axis: usize) -> Array2<f64> {
    let mut coeffs = grid_to_coeffs(values);
    apply_derivative(spec, &mut coeffs, axis);
    coeffs_to_grid(&coeffs)
}

/// Multiply coefficients by i xi_axis in place.
pub fn apply_derivative(spec: &TorusSpec, coeffs: &mut Array2<Complex64>, axis: usize) {
    let (n1, n2) = coeffs.dim();
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let xi = if axis == 0 { spec.xi1(k1) } else { spec.xi2(k2) };
            coeffs[[k1, k2]] *= Complex64::new(0.0, xi);
        }
    }
}

/// Horizontal Laplacian multiplier -|xi|^2 applied in place.
pub fn apply_laplacian(spec: &TorusSpec, coeffs: &mut Array2<Complex64>) {
    let (n1, n2) = coeffs.dim();
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let xi1 = spec.xi1(k1);
            let xi2 = spec.xi2(k2);
            coeffs[[k1, k2]] *= -(xi1 * xi1 + xi2 * xi2);
        }
    }
}

fn padded_size(n: usize) -> usize {
    // 3/2 rule, rounded up to the next even size
    let m = (3 * n + 1) / 2;
    if m % 2 == 0 {
        m
    } else {
        m + 1
    }
}

/// Zero-pad coefficients onto the 3/2 grid.
fn pad(coeffs: &Array2<Complex64>) -> Array2<Complex64> {
    let (n1, n2) = coeffs.dim();
    let (m1, m2) = (padded_size(n1), padded_size(n2));
    let mut out = Array2::zeros((m1, m2));
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let t1 = if k1 <= n1 / 2 { k1 } else { m1 - (n1 - k1) };
            let t2 = if k2 <= n2 / 2 { k2 } else { m2 - (n2 - k2) };
            out[[t1, t2]] = coeffs[[k1, k2]];
        }
    }
    out
}

/// Truncate padded coefficients back to the working grid.
fn truncate(padded: &Array2<Complex64>, n1: usize, n2: usize) -> Array2<Complex64> {
    let (m1, m2) = padded.dim();
    let mut out = Array2::zeros((n1, n2));
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let t1 = if k1 <= n1 / 2 { k1 } else { m1 - (n1 - k1) };
            let t2 = if k2 <= n2 / 2 { k2 } else { m2 - (n2 - k2) };
            out[[k1, k2]] = padded[[t1, t2]];
        }
    }
    out
}

/// Grid values of a coefficient array on the 3/2-padded grid.
pub fn padded_values(coeffs: &Array2<Complex64>) -> Array2<f64> {
    coeffs_to_grid(&pad(coeffs))
}

/// Transform padded-grid values back and truncate to the working (n1, n2) spectrum.
pub fn truncate_from_padded(grid: &Array2<f64>, n1: usize, n2: usize) -> Array2<Complex64> {
    truncate(&grid_to_coeffs(grid), n1, n2)
}

/// Dealiased pointwise product of two grid fields (3/2-rule zero padding).
pub fn dealiased_product(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n1, n2) = a.dim();
    let ca = pad(&grid_to_coeffs(a));
    let cb = pad(&grid_to_coeffs(b));
    let ga = coeffs_to_grid(&ca);
    let gb = coeffs_to_grid(&cb);
    let prod = &ga * &gb;
    let cp = truncate(&grid_to_coeffs(&prod), n1, n2);
    coeffs_to_grid(&cp)
}

/// Dealiased quotient a/b evaluated on the padded grid (b must be bounded away
/// from zero; used for the curvature denominator).
pub fn dealiased_quotient(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n1, n2) = a.dim();
    let ca = pad(&grid_to_coeffs(a));
    let cb = pad(&grid_to_coeffs(b));
    let ga = coeffs_to_grid(&ca);
    let gb = coeffs_to_grid(&cb);
    let quot = ndarray::Zip::from(&ga).and(&gb).map_collect(|&x, &y| x / y);
    let cq = truncate(&grid_to_coeffs(&quot), n1, n2);
    coeffs_to_grid(&cq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec() -> TorusSpec {
        TorusSpec::new(1.0, 2.0, 16, 8).unwrap()
    }

    fn sample(spec: &TorusSpec, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        Array2::from_shape_fn((spec.n1, spec.n2), |(i, j)| f(spec.x1(i), spec.x2(j)))
    }

    #[test]
    fn roundtrip_is_identity() {
        let s = spec();
        let v = sample(&s, |x, y| (x / s.l1).sin() + 0.3 * (2.0 * y / s.l2).cos());
        let back = coeffs_to_grid(&grid_to_coeffs(&v));
        for (a, b) in v.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn forward_transform_is_hermitian_for_real_input() {
        let s = spec();
        let v = sample(&s, |x, y| (3.0 * x / s.l1).cos() * (y / s.l2).sin() + 0.5);
        let c = grid_to_coeffs(&v);
        assert!(hermitian_defect(&c) < 1e-14);
    }

    #[test]
    fn derivative_of_single_mode() {
        let s = spec();
        let v = sample(&s, |x, _| (2.0 * x / s.l1).sin());
        let d = spectral_derivative(&s, &v, 0);
        let expected = sample(&s, |x, _| 2.0 / s.l1 * (2.0 * x / s.l1).cos());
        for (a, b) in d.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dealiased_product_matches_exact_for_low_modes() {
        let s = spec();
        let a = sample(&s, |x, _| (x / s.l1).sin());
        let b = sample(&s, |x, _| (2.0 * x / s.l1).cos());
        let p = dealiased_product(&a, &b);
        let exact = sample(&s, |x, _| (x / s.l1).sin() * (2.0 * x / s.l1).cos());
        for (u, v) in p.iter().zip(exact.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn nyquist_derivative_is_zeroed() {
        let s = spec();
        // the pure Nyquist mode cos(8 x / L1) on 16 points
        let v = sample(&s, |x, _| (8.0 * x / s.l1).cos());
        let d = spectral_derivative(&s, &v, 0);
        for a in d.iter() {
            assert_abs_diff_eq!(a, &0.0, epsilon = 1e-12);
        }
    }
}
