//! Flattening geometry: Poisson extensions of the free-surface functions and
//! the coefficient fields of the coordinate map
//!
//!   Theta(x, t) = (x1, x2, x3 + b1(x3) etabar_+ + b2(x3) etabar_-),
//!
//! with theta = b1 etabar_+ + b2 etabar_-, A = d1 theta, B = d2 theta,
//! J = 1 + d3 theta, K = 1/J, and
//!
//!   Acal = [[1, 0, -A K], [0, 1, -B K], [0, 0, K]].
//!
//! Vertical profiles of the extensions are evaluated analytically per mode
//! (e^{|xi| z} factors), never by a discrete Laplace solve.

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::fields::{Layer, Side, SlabSpec, SurfaceField, SurfacePair, VolumeScalar};
use crate::spectral::{self, TorusSpec};

/// Default Jacobian floor below which the coordinate map is declared degenerate.
pub const JACOBIAN_FLOOR: f64 = 0.1;

/// Quintic smoothstep s^3 (10 - 15 s + 6 s^2) and its derivative.
fn smoothstep(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn smoothstep_deriv(s: f64) -> f64 {
    30.0 * s * s * (1.0 - s) * (1.0 - s)
}

/// The two bump profiles of the coordinate map, built as piecewise quintics
/// with vanishing first and second derivatives at all three anchors:
/// b1(-b) = b1(0) = 0, b1(ell) = 1 and b2(-b) = b2(ell) = 0, b2(0) = 1.
#[derive(Debug, Clone, Copy)]
pub struct BumpProfiles {
    pub ell: f64,
    pub b: f64,
}

impl BumpProfiles {
    pub fn new(slab: &SlabSpec) -> Self {
        BumpProfiles { ell: slab.ell, b: slab.b }
    }

    pub fn b1(&self, z: f64) -> f64 {
        if z <= 0.0 {
            0.0
        } else {
            smoothstep((z / self.ell).min(1.0))
        }
    }

    pub fn b1_deriv(&self, z: f64) -> f64 {
        if z <= 0.0 || z >= self.ell {
            0.0
        } else {
            smoothstep_deriv(z / self.ell) / self.ell
        }
    }

    pub fn b2(&self, z: f64) -> f64 {
        if z >= 0.0 {
            smoothstep(1.0 - (z / self.ell).min(1.0))
        } else {
            smoothstep(((z + self.b) / self.b).max(0.0))
        }
    }

    pub fn b2_deriv(&self, z: f64) -> f64 {
        if z >= self.ell || z <= -self.b {
            0.0
        } else if z >= 0.0 {
            -smoothstep_deriv(1.0 - z / self.ell) / self.ell
        } else {
            smoothstep_deriv((z + self.b) / self.b) / self.b
        }
    }

    /// Anchor conditions evaluated exactly (used as a precondition check).
    pub fn anchors_ok(&self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        close(self.b1(0.0), 0.0)
            && close(self.b1(-self.b), 0.0)
            && close(self.b1(self.ell), 1.0)
            && close(self.b2(self.ell), 0.0)
            && close(self.b2(-self.b), 0.0)
            && close(self.b2(0.0), 1.0)
    }
}

/// Solve the Vandermonde system V(lambda) alpha = (1,...,1)^T with
/// V_ij = (-lambda_j)^i.  The coefficients make the upward interface
/// extension match m vertical derivatives across x3 = 0.
pub fn vandermonde_coeffs(lambdas: &[f64]) -> Result<Vec<f64>> {
    let m1 = lambdas.len();
    if m1 < 2 {
        return Err(SimError::Vandermonde("need at least two nodes (m >= 1)".into()));
    }
    for w in lambdas.windows(2) {
        if !(w[0] < w[1]) {
            return Err(SimError::Vandermonde("nodes must be strictly increasing".into()));
        }
    }
    if !(lambdas[0] > 0.0) {
        return Err(SimError::Vandermonde("nodes must be positive".into()));
    }
    let v = nalgebra::DMatrix::from_fn(m1, m1, |i, j| (-lambdas[j]).powi(i as i32));
    let rhs = nalgebra::DVector::from_element(m1, 1.0);
    let svd = v.clone().svd(true, true);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if !(smin > 0.0) || smax / smin > 1e14 {
        return Err(SimError::Vandermonde(format!(
            "numerically singular system (cond ~ {:.2e})",
            smax / smin.max(f64::MIN_POSITIVE)
        )));
    }
    let alpha = svd
        .solve(&rhs, 0.0)
        .map_err(|e| SimError::Vandermonde(e.to_string()))?;
    let resid = (&v * &alpha - &rhs).amax();
    let cond = smax / smin;
    if resid > 1e-10 * cond.max(1.0) {
        return Err(SimError::Vandermonde(format!(
            "residual {resid:.2e} exceeds cond-scaled tolerance"
        )));
    }
    Ok(alpha.iter().cloned().collect())
}

/// Analytic Poisson-extension evaluator for the pair (eta_+, eta_-).
#[derive(Debug, Clone)]
pub struct Extensions {
    pub torus: TorusSpec,
    pub slab: SlabSpec,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Extensions {
    /// Default interface nodes lambda_j = j + 1 for j = 0..m with m = 6.
    pub fn new(torus: TorusSpec, slab: SlabSpec, m: usize) -> Result<Self> {
        let lambdas: Vec<f64> = (0..=m).map(|j| (j + 1) as f64).collect();
        let alphas = vandermonde_coeffs(&lambdas)?;
        Ok(Extensions { torus, slab, lambdas, alphas })
    }

    /// Mode multiplier (value, d/dz) for the upper extension e^{|xi|(z - ell)}.
    pub fn factor_upper(&self, xi: f64, z: f64) -> (f64, f64) {
        let e = (xi * (z - self.slab.ell)).exp();
        (e, xi * e)
    }

    /// Mode multiplier for the interface extension: e^{|xi| z} below, the
    /// Vandermonde-matched sum of decaying exponentials above.  The xi = 0
    /// mode is exactly constant (sum alpha_j = 1 analytically).
    pub fn factor_lower(&self, xi: f64, z: f64) -> (f64, f64) {
        if xi == 0.0 {
            (1.0, 0.0)
        } else if z <= 0.0 {
            let e = (xi * z).exp();
            (e, xi * e)
        } else {
            let mut v = 0.0;
            let mut d = 0.0;
            for (alpha, lambda) in self.alphas.iter().zip(&self.lambdas) {
                let e = (-lambda * xi * z).exp();
                v += alpha * e;
                d += alpha * (-lambda * xi) * e;
            }
            (v, d)
        }
    }

    fn eval_at_levels(
        &self,
        eta: &SurfaceField,
        levels: &[f64],
        factor: impl Fn(f64, f64) -> (f64, f64),
        derivative: bool,
    ) -> Array3<f64> {
        let (n1, n2) = (self.torus.n1, self.torus.n2);
        let mut out = Array3::zeros((n1, n2, levels.len()));
        let mut scaled: Array2<Complex64> = Array2::zeros((n1, n2));
        for (kz, &z) in levels.iter().enumerate() {
            for k1 in 0..n1 {
                for k2 in 0..n2 {
                    let xi = self.torus.xi_mag(k1, k2);
                    let (v, d) = factor(xi, z);
                    scaled[[k1, k2]] = eta.coeffs[[k1, k2]] * if derivative { d } else { v };
                }
            }
            let grid = spectral::coeffs_to_grid(&scaled);
            out.index_axis_mut(ndarray::Axis(2), kz).assign(&grid);
        }
        out
    }

    /// Poisson extension of eta_+ into the whole slab (mode xi scaled by
    /// e^{|xi|(x3 - ell)}; the xi = 0 mode is constant in x3).
    pub fn extend_upper(&self, eta_plus: &SurfaceField) -> VolumeScalar {
        self.extend(eta_plus, true, false)
    }

    /// Specialized interface extension of eta_- (C^m across x3 = 0).
    pub fn extend_interface(&self, eta_minus: &SurfaceField) -> VolumeScalar {
        self.extend(eta_minus, false, false)
    }

    fn extend(&self, eta: &SurfaceField, upper: bool, derivative: bool) -> VolumeScalar {
        let mut out = VolumeScalar::zeros(self.torus, self.slab);
        for layer in Layer::BOTH {
            let levels = self.slab.z_nodes(layer);
            let arr = if upper {
                self.eval_at_levels(eta, &levels, |xi, z| self.factor_upper(xi, z), derivative)
            } else {
                self.eval_at_levels(eta, &levels, |xi, z| self.factor_lower(xi, z), derivative)
            };
            out.layer_mut(layer).assign(&arr);
        }
        out
    }

    /// d/dz of the upper extension (analytic).
    pub fn extend_upper_dz(&self, eta_plus: &SurfaceField) -> VolumeScalar {
        self.extend(eta_plus, true, true)
    }

    pub fn extend_interface_dz(&self, eta_minus: &SurfaceField) -> VolumeScalar {
        self.extend(eta_minus, false, true)
    }

    /// Extension values of both surface functions at arbitrary vertical
    /// levels of one layer; returns (etabar_+, etabar_-, d3 etabar_+, d3 etabar_-).
    pub fn at_levels(
        &self,
        eta: &SurfacePair,
        levels: &[f64],
    ) -> (Array3<f64>, Array3<f64>, Array3<f64>, Array3<f64>) {
        (
            self.eval_at_levels(&eta.plus, levels, |xi, z| self.factor_upper(xi, z), false),
            self.eval_at_levels(&eta.minus, levels, |xi, z| self.factor_lower(xi, z), false),
            self.eval_at_levels(&eta.plus, levels, |xi, z| self.factor_upper(xi, z), true),
            self.eval_at_levels(&eta.minus, levels, |xi, z| self.factor_lower(xi, z), true),
        )
    }
}

/// Non-unit normal components on one surface (grid values):
/// N = (-d1 eta, -d2 eta, 1).
#[derive(Debug, Clone)]
pub struct SurfaceNormal {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
}

impl SurfaceNormal {
    fn from_eta(eta: &SurfaceField) -> Self {
        let gx = eta.derivative(0).values();
        let gy = eta.derivative(1).values();
        let n = gx.dim();
        SurfaceNormal { x: -gx, y: -gy, z: Array2::ones(n) }
    }

    /// Max over the grid of |N - e3|.
    pub fn max_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.x.iter().zip(self.y.iter()) {
            worst = worst.max((a * a + b * b).sqrt());
        }
        worst
    }
}

/// All flattening-derived coefficient fields for a given (eta_+, eta_-).
#[derive(Debug, Clone)]
pub struct Geometry {
    pub torus: TorusSpec,
    pub slab: SlabSpec,
    pub ext: Extensions,
    pub bumps: BumpProfiles,
    pub eta: SurfacePair,
    pub theta: VolumeScalar,
    /// A = d1 theta
    pub a_coef: VolumeScalar,
    /// B = d2 theta
    pub b_coef: VolumeScalar,
    /// J = 1 + d3 theta (Jacobian of the map)
    pub jac: VolumeScalar,
    /// K = 1/J
    pub k_coef: VolumeScalar,
    pub normal_plus: SurfaceNormal,
    pub normal_minus: SurfaceNormal,
    pub curvature_plus: SurfaceField,
    pub curvature_minus: SurfaceField,
}

/// Coefficient slices of one layer at a caller-chosen set of vertical levels.
pub struct GeomLevels {
    pub a: Array3<f64>,
    pub b: Array3<f64>,
    pub j: Array3<f64>,
    pub k: Array3<f64>,
}

impl Geometry {
    /// Entry (i, j) of the matrix Acal (1-based indices), materialized on the grid.
    pub fn acal(&self, i: usize, j: usize) -> VolumeScalar {
        match (i, j) {
            (1, 1) | (2, 2) => VolumeScalar::from_fn(self.torus, self.slab, |_, _, _| 1.0),
            (1, 3) => self.a_coef.mul(&self.k_coef).scale(-1.0),
            (2, 3) => self.b_coef.mul(&self.k_coef).scale(-1.0),
            (3, 3) => self.k_coef.clone(),
            _ => VolumeScalar::zeros(self.torus, self.slab),
        }
    }

    pub fn normal(&self, side: Side) -> &SurfaceNormal {
        match side {
            Side::Plus => &self.normal_plus,
            Side::Minus => &self.normal_minus,
        }
    }

    /// Evaluate (A, B, J, K) analytically at arbitrary vertical levels of one
    /// layer (used by the Lame quadrature).
    pub fn coefficients_at_levels(&self, levels: &[f64]) -> GeomLevels {
        let (ext, bumps) = (&self.ext, &self.bumps);
        let (up, low, up_dz, low_dz) = ext.at_levels(&self.eta, levels);
        let (n1, n2, nz) = up.dim();
        let torus = self.torus;
        // theta at the levels, for horizontal derivatives (per-level spectral)
        let mut a = Array3::zeros((n1, n2, nz));
        let mut b = Array3::zeros((n1, n2, nz));
        let mut j = Array3::zeros((n1, n2, nz));
        let mut k = Array3::zeros((n1, n2, nz));
        for (kz, &z) in levels.iter().enumerate() {
            let b1 = bumps.b1(z);
            let b2 = bumps.b2(z);
            let b1p = bumps.b1_deriv(z);
            let b2p = bumps.b2_deriv(z);
            let theta_lvl = up.index_axis(ndarray::Axis(2), kz).mapv(|v| v * b1)
                + low.index_axis(ndarray::Axis(2), kz).mapv(|v| v * b2);
            let da = spectral::spectral_derivative(&torus, &theta_lvl, 0);
            let db = spectral::spectral_derivative(&torus, &theta_lvl, 1);
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let dz = b1p * up[[i1, i2, kz]]
                        + b1 * up_dz[[i1, i2, kz]]
                        + b2p * low[[i1, i2, kz]]
                        + b2 * low_dz[[i1, i2, kz]];
                    let jj = 1.0 + dz;
                    a[[i1, i2, kz]] = da[[i1, i2]];
                    b[[i1, i2, kz]] = db[[i1, i2]];
                    j[[i1, i2, kz]] = jj;
                    k[[i1, i2, kz]] = 1.0 / jj;
                }
            }
        }
        GeomLevels { a, b, j, k }
    }
}

/// Assemble the full geometry from the surface pair.  Reports
/// `DegenerateJacobian` if min J falls at or below `jacobian_floor`.
pub fn build_geometry(
    eta: &SurfacePair,
    ext: &Extensions,
    bumps: &BumpProfiles,
    jacobian_floor: f64,
) -> Result<Geometry> {
    let g = build_geometry_unchecked(eta, ext, bumps);
    let min_j = g.jac.min();
    if min_j <= jacobian_floor {
        return Err(SimError::DegenerateJacobian { min_j, floor: jacobian_floor });
    }
    Ok(g)
}

/// Geometry assembly without the Jacobian floor check (the margin report
/// still wants the fields of a degenerate map).
pub fn build_geometry_unchecked(
    eta: &SurfacePair,
    ext: &Extensions,
    bumps: &BumpProfiles,
) -> Geometry {
    debug_assert!(bumps.anchors_ok());
    let torus = ext.torus;
    let slab = ext.slab;
    let up = ext.extend_upper(&eta.plus);
    let low = ext.extend_interface(&eta.minus);
    let up_dz = ext.extend_upper_dz(&eta.plus);
    let low_dz = ext.extend_interface_dz(&eta.minus);

    let mut theta = VolumeScalar::zeros(torus, slab);
    let mut jac = VolumeScalar::zeros(torus, slab);
    for layer in Layer::BOTH {
        let nz = slab.nz(layer);
        for kz in 0..nz {
            let z = slab.z(layer, kz);
            let b1 = bumps.b1(z);
            let b2 = bumps.b2(z);
            let b1p = bumps.b1_deriv(z);
            let b2p = bumps.b2_deriv(z);
            for i1 in 0..torus.n1 {
                for i2 in 0..torus.n2 {
                    let u = up.layer(layer)[[i1, i2, kz]];
                    let l = low.layer(layer)[[i1, i2, kz]];
                    let udz = up_dz.layer(layer)[[i1, i2, kz]];
                    let ldz = low_dz.layer(layer)[[i1, i2, kz]];
                    theta.layer_mut(layer)[[i1, i2, kz]] = b1 * u + b2 * l;
                    jac.layer_mut(layer)[[i1, i2, kz]] =
                        1.0 + b1p * u + b1 * udz + b2p * l + b2 * ldz;
                }
            }
        }
    }
    let a_coef = theta.horizontal_derivative(0);
    let b_coef = theta.horizontal_derivative(1);
    let k_coef = jac.map(|j| 1.0 / j);
    Geometry {
        torus,
        slab,
        ext: ext.clone(),
        bumps: *bumps,
        eta: eta.clone(),
        theta,
        a_coef,
        b_coef,
        jac,
        k_coef,
        normal_plus: SurfaceNormal::from_eta(&eta.plus),
        normal_minus: SurfaceNormal::from_eta(&eta.minus),
        curvature_plus: mean_curvature(&eta.plus),
        curvature_minus: mean_curvature(&eta.minus),
    }
}

/// Twice the mean curvature of the graph surface:
/// H = div_*( grad_* eta / sqrt(1 + |grad_* eta|^2) ), computed
/// pseudo-spectrally (gradient spectral, quotient on the 3/2-padded grid,
/// divergence spectral).
pub fn mean_curvature(eta: &SurfaceField) -> SurfaceField {
    let spec = eta.spec;
    let g1 = eta.derivative(0);
    let g2 = eta.derivative(1);
    let g1_pad = spectral::padded_values(&g1.coeffs);
    let g2_pad = spectral::padded_values(&g2.coeffs);
    let denom = ndarray::Zip::from(&g1_pad)
        .and(&g2_pad)
        .map_collect(|&a, &b| (1.0 + a * a + b * b).sqrt());
    let q1 = ndarray::Zip::from(&g1_pad).and(&denom).map_collect(|&a, &d| a / d);
    let q2 = ndarray::Zip::from(&g2_pad).and(&denom).map_collect(|&a, &d| a / d);
    let mut c1 = spectral::truncate_from_padded(&q1, spec.n1, spec.n2);
    let mut c2 = spectral::truncate_from_padded(&q2, spec.n1, spec.n2);
    spectral::apply_derivative(&spec, &mut c1, 0);
    spectral::apply_derivative(&spec, &mut c2, 1);
    SurfaceField { spec, side: eta.side, coeffs: c1 + c2 }
}

/// Diffeomorphism margin report against the coefficient smallness bounds
/// (each quantity within 1/2 and min J above the floor).
#[derive(Debug, Clone, Copy)]
pub struct DiffeoReport {
    pub min_j: f64,
    pub max_j_dev: f64,
    pub max_a: f64,
    pub max_b: f64,
    pub max_normal_dev: f64,
    pub max_k_dev_surface: f64,
    pub within_margin: bool,
    pub degenerate: bool,
}

pub fn check_diffeomorphism(g: &Geometry, jacobian_floor: f64) -> DiffeoReport {
    let min_j = g.jac.min();
    let max_j_dev = g.jac.map(|v| v - 1.0).max_abs();
    let max_a = g.a_coef.max_abs();
    let max_b = g.b_coef.max_abs();
    let max_normal_dev = g
        .normal_plus
        .max_deviation()
        .max(g.normal_minus.max_deviation());
    let k_top = g.k_coef.trace_top();
    let k_int = g.k_coef.trace_interface(Layer::Plus);
    let max_k_dev_surface = k_top
        .iter()
        .chain(k_int.iter())
        .fold(0.0f64, |acc, &v| acc.max((v - 1.0).abs()));
    let degenerate = !(min_j > jacobian_floor);
    let within_margin = !degenerate
        && max_j_dev <= 0.5
        && max_a <= 0.5
        && max_b <= 0.5
        && max_normal_dev <= 0.5
        && max_k_dev_surface <= 0.5;
    DiffeoReport {
        min_j,
        max_j_dev,
        max_a,
        max_b,
        max_normal_dev,
        max_k_dev_surface,
        within_margin,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn setup() -> (TorusSpec, SlabSpec, Extensions, BumpProfiles) {
        let torus = TorusSpec::new(1.0, 1.0, 16, 16).unwrap();
        let slab = SlabSpec::new(1.0, 1.5, 17, 21).unwrap();
        let ext = Extensions::new(torus, slab, 6).unwrap();
        let bumps = BumpProfiles::new(&slab);
        (torus, slab, ext, bumps)
    }

    fn random_band_limited(torus: TorusSpec, side: Side, seed: u64, amp: f64) -> SurfaceField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut values = Array2::zeros((torus.n1, torus.n2));
        for m1 in -2i64..=2 {
            for m2 in -2i64..=2 {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let p: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for i in 0..torus.n1 {
                    for j in 0..torus.n2 {
                        let phase =
                            m1 as f64 * torus.x1(i) / torus.l1 + m2 as f64 * torus.x2(j) / torus.l2;
                        values[[i, j]] += amp * a * (phase + p).cos();
                    }
                }
            }
        }
        SurfaceField::from_values(torus, side, &values)
    }

    #[test]
    fn bump_anchor_conditions() {
        let (_, slab, _, bumps) = setup();
        assert!(bumps.anchors_ok());
        // first derivatives vanish at the anchors
        for z in [-slab.b, 0.0, slab.ell] {
            assert_abs_diff_eq!(bumps.b1_deriv(z), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(bumps.b2_deriv(z), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn vandermonde_two_node_hand_case() {
        let alpha = vandermonde_coeffs(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(alpha[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn vandermonde_rows_sum_to_one_and_residual_small() {
        let lambdas: Vec<f64> = (0..=6).map(|j| (j + 1) as f64).collect();
        let alpha = vandermonde_coeffs(&lambdas).unwrap();
        let sum: f64 = alpha.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        // residual substitution for the 3x3 case
        let a3 = vandermonde_coeffs(&[1.0, 2.0, 3.0]).unwrap();
        for i in 0..3 {
            let r: f64 = a3
                .iter()
                .zip([1.0f64, 2.0, 3.0])
                .map(|(a, l)| a * (-l).powi(i))
                .sum();
            assert_abs_diff_eq!(r, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn vandermonde_rejects_bad_nodes() {
        assert!(vandermonde_coeffs(&[2.0, 1.0]).is_err());
        assert!(vandermonde_coeffs(&[-1.0, 2.0]).is_err());
        assert!(vandermonde_coeffs(&[1.0]).is_err());
    }

    #[test]
    fn upper_extension_single_mode_decay() {
        let (torus, slab, ext, _) = setup();
        let eta = SurfaceField::from_fn(torus, Side::Plus, |x, _| (x / torus.l1).cos());
        let bar = ext.extend_upper(&eta);
        let xi = 1.0 / torus.l1;
        for layer in Layer::BOTH {
            for k in 0..slab.nz(layer) {
                let z = slab.z(layer, k);
                let expected = (torus.x1(3) / torus.l1).cos() * (xi * (z - slab.ell)).exp();
                assert_abs_diff_eq!(bar.layer(layer)[[3, 5, k]], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_extends_to_constant() {
        let (torus, _, ext, _) = setup();
        let c = 0.37;
        let up = ext.extend_upper(&SurfaceField::constant(torus, Side::Plus, c));
        let low = ext.extend_interface(&SurfaceField::constant(torus, Side::Minus, c));
        assert_abs_diff_eq!(up.max(), c, epsilon = 1e-12);
        assert_abs_diff_eq!(up.min(), c, epsilon = 1e-12);
        assert_abs_diff_eq!(low.max(), c, epsilon = 1e-12);
        assert_abs_diff_eq!(low.min(), c, epsilon = 1e-12);
    }

    #[test]
    fn trace_recovery_for_random_band_limited() {
        let (torus, slab, ext, _) = setup();
        let eta_p = random_band_limited(torus, Side::Plus, 7, 0.3);
        let bar = ext.extend_upper(&eta_p);
        let trace = bar.trace_top();
        let orig = eta_p.values();
        let scale = orig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for (a, b) in trace.iter().zip(orig.iter()) {
            assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
        }
        let eta_m = random_band_limited(torus, Side::Minus, 8, 0.3);
        let bar_m = ext.extend_interface(&eta_m);
        let trace_m = bar_m.trace_interface(Layer::Minus);
        for (a, b) in trace_m.iter().zip(eta_m.values().iter()) {
            assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn interface_extension_c1_matching_for_m1() {
        let (torus, slab, _, _) = setup();
        let mut ext = Extensions::new(torus, slab, 1).unwrap();
        ext.lambdas = vec![1.0, 2.0];
        ext.alphas = vandermonde_coeffs(&ext.lambdas).unwrap();
        let xi = 1.0 / torus.l1;
        let (v_lo, d_lo) = ext.factor_lower(xi, 0.0);
        let (v_hi, d_hi) = ext.factor_lower(xi, f64::MIN_POSITIVE);
        assert_abs_diff_eq!(v_lo, v_hi, epsilon = 1e-13);
        assert_abs_diff_eq!(d_lo, d_hi, epsilon = 1e-13);
        // both one-sided d3 values equal +|xi| times the trace value
        assert_abs_diff_eq!(d_lo, xi, epsilon = 1e-13);
        // l = m + 1 = 2 derivative jump is nonzero: sum alpha_j lambda_j^2 = -5 != 1
        let upper_d2: f64 = ext
            .alphas
            .iter()
            .zip(&ext.lambdas)
            .map(|(a, l)| a * (l * xi).powi(2))
            .sum();
        assert!((upper_d2 - xi * xi).abs() > 0.1 * xi * xi);
    }

    #[test]
    fn equilibrium_geometry_is_trivial() {
        let (torus, slab, ext, bumps) = setup();
        let eta = SurfacePair::zeros(torus);
        let g = build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR).unwrap();
        assert_abs_diff_eq!(g.theta.max_abs(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.jac.map(|v| v - 1.0).max_abs(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.k_coef.map(|v| v - 1.0).max_abs(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.normal_plus.max_deviation(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.curvature_plus.values().iter().fold(0.0f64, |a, &v| a.max(v.abs())), 0.0, epsilon = 1e-13);
        let r = check_diffeomorphism(&g, JACOBIAN_FLOOR);
        assert!(r.within_margin);
    }

    #[test]
    fn jacobian_at_top_matches_analytic_single_mode() {
        let (torus, slab, ext, bumps) = setup();
        let eps = 0.05;
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| eps * (x / torus.l1).sin()),
            minus: SurfaceField::zeros(torus, Side::Minus),
        };
        let g = build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR).unwrap();
        // at Sigma_+: b1 = 1, b1' = 0, so d3 theta = |xi| eta
        let xi = 1.0 / torus.l1;
        let nz = slab.nz_plus;
        for i in 0..torus.n1 {
            let expected = 1.0 + xi * eps * (torus.x1(i) / torus.l1).sin();
            assert_abs_diff_eq!(g.jac.plus[[i, 0, nz - 1]], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn kj_identity_and_acal_sparsity() {
        let (torus, _, ext, bumps) = setup();
        let eta = SurfacePair {
            plus: random_band_limited(torus, Side::Plus, 3, 0.04),
            minus: random_band_limited(torus, Side::Minus, 4, 0.03),
        };
        let g = build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR).unwrap();
        let kj = g.k_coef.mul(&g.jac);
        assert!(kj.map(|v| v - 1.0).max_abs() < 1e-13);
        for (i, j) in [(1usize, 2usize), (2, 1), (3, 1), (3, 2)] {
            assert_abs_diff_eq!(g.acal(i, j).max_abs(), 0.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(g.acal(1, 1).map(|v| v - 1.0).max_abs(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.acal(2, 2).map(|v| v - 1.0).max_abs(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn upper_extension_is_harmonic_on_the_grid() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 33, 33).unwrap();
        let ext = Extensions::new(torus, slab, 6).unwrap();
        let eta = SurfaceField::from_fn(torus, Side::Plus, |x, _| (x / torus.l1).sin());
        let bar = ext.extend_upper(&eta);
        let lap_h = bar.horizontal_derivative(0).horizontal_derivative(0).add(
            &bar.horizontal_derivative(1).horizontal_derivative(1),
        );
        let d2z = bar.vertical_derivative().vertical_derivative();
        let resid = lap_h.add(&d2z);
        // FD4 truncation: interior residual far below the field scale
        let interior_max = {
            let mut m = 0.0f64;
            for layer in Layer::BOTH {
                let arr = resid.layer(layer);
                let nz = slab.nz(layer);
                for ((_, _, k), v) in arr.indexed_iter() {
                    if k >= 4 && k + 4 < nz {
                        m = m.max(v.abs());
                    }
                }
            }
            m
        };
        assert!(interior_max < 1e-6, "harmonic residual {interior_max}");
    }

    #[test]
    fn mean_curvature_linearizes_to_laplacian() {
        let (torus, _, _, _) = setup();
        let eps = 1e-6;
        let eta = SurfaceField::from_fn(torus, Side::Plus, |x, _| eps * (x / torus.l1).sin());
        let h = mean_curvature(&eta);
        let lap = eta.laplacian();
        let diff = h.sub(&lap);
        let rel = diff.l2_sq().sqrt() / lap.l2_sq().sqrt();
        assert!(rel <= 1e-6, "relative deviation {rel}");
    }

    #[test]
    fn mean_curvature_matches_fine_fd_oracle() {
        let (torus, _, _, _) = setup();
        let amp = 0.3;
        let eta = SurfaceField::from_fn(torus, Side::Plus, |x, _| amp * (x / torus.l1).sin());
        let h = mean_curvature(&eta).values();
        // independent 1-D fine-grid FD oracle of the same formula
        let nf = 8192usize;
        let lf = 2.0 * std::f64::consts::PI * torus.l1;
        let hf = lf / nf as f64;
        let etaf = |x: f64| amp * (x / torus.l1).sin();
        let oracle = |x: f64| {
            let gp = |x: f64| (etaf(x + hf) - etaf(x - hf)) / (2.0 * hf);
            let flux = |x: f64| {
                let g = gp(x);
                g / (1.0 + g * g).sqrt()
            };
            (flux(x + hf) - flux(x - hf)) / (2.0 * hf)
        };
        let mut worst = 0.0f64;
        for i in 0..torus.n1 {
            worst = worst.max((h[[i, 0]] - oracle(torus.x1(i))).abs());
        }
        assert!(worst <= 1e-6, "max deviation {worst}");
    }

    #[test]
    fn mean_curvature_is_odd() {
        let (torus, _, _, _) = setup();
        let eta = random_band_limited(torus, Side::Minus, 11, 0.2);
        let h1 = mean_curvature(&eta);
        let h2 = mean_curvature(&eta.scale(-1.0));
        let diff = h1.add(&h2);
        assert!(diff.l2_sq().sqrt() < 1e-10);
    }

    #[test]
    fn degenerate_jacobian_detected() {
        let (torus, _, ext, bumps) = setup();
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| 3.0 * (x / torus.l1).sin()),
            minus: SurfaceField::zeros(torus, Side::Minus),
        };
        assert!(matches!(
            build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR),
            Err(SimError::DegenerateJacobian { .. })
        ));
        let g = build_geometry_unchecked(&eta, &ext, &bumps);
        let r = check_diffeomorphism(&g, JACOBIAN_FLOOR);
        assert!(!r.within_margin);
        assert!(r.degenerate);
    }

    #[test]
    fn small_mode_j_deviation_matches_analytic_field() {
        let (torus, slab, ext, bumps) = setup();
        let eps = 1e-3;
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| eps * (x / torus.l1).sin()),
            minus: SurfaceField::zeros(torus, Side::Minus),
        };
        let g = build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR).unwrap();
        let xi = 1.0 / torus.l1;
        // analytic d3(b1 etabar_+) evaluated on the same nodes
        let analytic = VolumeScalar::from_fn(torus, slab, |x, _, z| {
            let e = (xi * (z - slab.ell)).exp();
            eps * (x / torus.l1).sin() * (bumps.b1_deriv(z) * e + bumps.b1(z) * xi * e)
        });
        let dev = g.jac.map(|v| v - 1.0);
        assert!((dev.max_abs() - analytic.max_abs()).abs() <= 1e-8);
    }
}
