//! Field containers on the layered slab Omega = Omega_+ u Omega_- and its
//! bounding surfaces Sigma_+ (top), Sigma_- (interface), Sigma_b (bottom).
//!
//! Surface fields are primarily spectral (Hermitian-symmetric coefficients);
//! volume fields hold collocation values per layer, horizontal grid x vertical
//! nodes, with spectral horizontal derivatives and 4th-order finite-difference
//! vertical derivatives.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::spectral::{self, TorusSpec};

/// Which bounding surface a surface field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Sigma_+ = {x3 = ell}
    Plus,
    /// Sigma_- = {x3 = 0}
    Minus,
}

/// Which fluid layer a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// Omega_+ = {0 < x3 < ell}
    Plus,
    /// Omega_- = {-b < x3 < 0}
    Minus,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::Plus, Layer::Minus];
}

/// Vertical extent and node counts of the two equilibrium layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabSpec {
    /// Upper-layer height ell.
    pub ell: f64,
    /// Lower-layer depth b.
    pub b: f64,
    /// Vertical nodes in the upper layer (including x3 = 0 and x3 = ell).
    pub nz_plus: usize,
    /// Vertical nodes in the lower layer (including x3 = -b and x3 = 0).
    pub nz_minus: usize,
}

impl SlabSpec {
    pub fn new(ell: f64, b: f64, nz_plus: usize, nz_minus: usize) -> Result<Self> {
        if !(ell > 0.0) || !(b > 0.0) {
            return Err(SimError::ValidationError {
                key: "grid.ell/b".into(),
                msg: "layer heights must be positive".into(),
            });
        }
        if nz_plus < 5 || nz_minus < 5 {
            return Err(SimError::ValidationError {
                key: "grid.nz".into(),
                msg: "vertical node counts must be >= 5 for the FD4 stencils".into(),
            });
        }
        Ok(SlabSpec { ell, b, nz_plus, nz_minus })
    }

    pub fn nz(&self, layer: Layer) -> usize {
        match layer {
            Layer::Plus => self.nz_plus,
            Layer::Minus => self.nz_minus,
        }
    }

    /// Uniform spacing in the given layer.
    pub fn h(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Plus => self.ell / (self.nz_plus - 1) as f64,
            Layer::Minus => self.b / (self.nz_minus - 1) as f64,
        }
    }

    /// Node coordinate: Plus runs 0..ell upward, Minus runs -b..0 upward.
    pub fn z(&self, layer: Layer, k: usize) -> f64 {
        match layer {
            Layer::Plus => k as f64 * self.h(layer),
            Layer::Minus => -self.b + k as f64 * self.h(layer),
        }
    }

    pub fn z_nodes(&self, layer: Layer) -> Vec<f64> {
        (0..self.nz(layer)).map(|k| self.z(layer, k)).collect()
    }
}

/// Scalar field on Sigma_+ or Sigma_-, stored as spectral coefficients.
#[derive(Debug, Clone)]
pub struct SurfaceField {
    pub spec: TorusSpec,
    pub side: Side,
    pub coeffs: Array2<Complex64>,
}

impl SurfaceField {
    pub fn zeros(spec: TorusSpec, side: Side) -> Self {
        SurfaceField { spec, side, coeffs: Array2::zeros((spec.n1, spec.n2)) }
    }

    pub fn constant(spec: TorusSpec, side: Side, c: f64) -> Self {
        let mut f = Self::zeros(spec, side);
        f.coeffs[[0, 0]] = Complex64::new(c, 0.0);
        f
    }

    /// Build from grid values (forward transform).
    pub fn from_values(spec: TorusSpec, side: Side, values: &Array2<f64>) -> Self {
        SurfaceField { spec, side, coeffs: spectral::grid_to_coeffs(values) }
    }

    /// Build from a pointwise function of (x1, x2).
    pub fn from_fn(spec: TorusSpec, side: Side, f: impl Fn(f64, f64) -> f64) -> Self {
        let values =
            Array2::from_shape_fn((spec.n1, spec.n2), |(i, j)| f(spec.x1(i), spec.x2(j)));
        Self::from_values(spec, side, &values)
    }

    /// Build from raw coefficients, enforcing Hermitian symmetry.
    pub fn from_coeffs(spec: TorusSpec, side: Side, mut coeffs: Array2<Complex64>) -> Self {
        spectral::symmetrize(&mut coeffs);
        SurfaceField { spec, side, coeffs }
    }

    /// Grid synchronization: values on the collocation grid.
    pub fn values(&self) -> Array2<f64> {
        spectral::coeffs_to_grid(&self.coeffs)
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[[0, 0]].re
    }

    /// Spectral horizontal derivative along axis (0 or 1).
    pub fn derivative(&self, axis: usize) -> SurfaceField {
        let mut coeffs = self.coeffs.clone();
        spectral::apply_derivative(&self.spec, &mut coeffs, axis);
        SurfaceField { spec: self.spec, side: self.side, coeffs }
    }

    /// Spectral horizontal Laplacian.
    pub fn laplacian(&self) -> SurfaceField {
        let mut coeffs = self.coeffs.clone();
        spectral::apply_laplacian(&self.spec, &mut coeffs);
        SurfaceField { spec: self.spec, side: self.side, coeffs }
    }

    pub fn scale(&self, s: f64) -> SurfaceField {
        SurfaceField { spec: self.spec, side: self.side, coeffs: self.coeffs.mapv(|c| c * s) }
    }

    pub fn add(&self, other: &SurfaceField) -> SurfaceField {
        SurfaceField {
            spec: self.spec,
            side: self.side,
            coeffs: &self.coeffs + &other.coeffs,
        }
    }

    pub fn sub(&self, other: &SurfaceField) -> SurfaceField {
        SurfaceField {
            spec: self.spec,
            side: self.side,
            coeffs: &self.coeffs - &other.coeffs,
        }
    }

    /// Exact spectral Sobolev norm squared: sum <xi>^{2s} |fhat(xi)|^2 with the
    /// paper's transform normalization (constants have norm^2 = c^2 * area).
    pub fn sobolev_sq(&self, s: f64) -> f64 {
        let area = self.spec.area();
        let mut total = 0.0;
        for k1 in 0..self.spec.n1 {
            for k2 in 0..self.spec.n2 {
                let m1 = TorusSpec::wavenumber(k1, self.spec.n1) as f64 / self.spec.l1;
                let m2 = TorusSpec::wavenumber(k2, self.spec.n2) as f64 / self.spec.l2;
                let w = (1.0 + m1 * m1 + m2 * m2).powf(s);
                total += w * self.coeffs[[k1, k2]].norm_sqr();
            }
        }
        area * total
    }

    /// L2 norm squared over the surface.
    pub fn l2_sq(&self) -> f64 {
        self.sobolev_sq(0.0)
    }
}

/// A pair of surface fields (top, interface).
#[derive(Debug, Clone)]
pub struct SurfacePair {
    pub plus: SurfaceField,
    pub minus: SurfaceField,
}

impl SurfacePair {
    pub fn zeros(spec: TorusSpec) -> Self {
        SurfacePair {
            plus: SurfaceField::zeros(spec, Side::Plus),
            minus: SurfaceField::zeros(spec, Side::Minus),
        }
    }

    pub fn get(&self, side: Side) -> &SurfaceField {
        match side {
            Side::Plus => &self.plus,
            Side::Minus => &self.minus,
        }
    }

    pub fn add(&self, other: &SurfacePair) -> SurfacePair {
        SurfacePair { plus: self.plus.add(&other.plus), minus: self.minus.add(&other.minus) }
    }

    pub fn sub(&self, other: &SurfacePair) -> SurfacePair {
        SurfacePair { plus: self.plus.sub(&other.plus), minus: self.minus.sub(&other.minus) }
    }

    pub fn scale(&self, s: f64) -> SurfacePair {
        SurfacePair { plus: self.plus.scale(s), minus: self.minus.scale(s) }
    }
}

/// 4th-order finite-difference first-derivative matrix on a uniform grid:
/// centered five-point interior rows, one-sided at the two boundary pairs.
pub fn fd4_matrix(n: usize, h: f64) -> Array2<f64> {
    assert!(n >= 5);
    let mut d = Array2::zeros((n, n));
    let c = 1.0 / (12.0 * h);
    // one-sided rows
    let row0 = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let row1 = [-3.0, -10.0, 18.0, -6.0, 1.0];
    for (j, v) in row0.iter().enumerate() {
        d[[0, j]] = v * c;
        d[[n - 1, n - 1 - j]] = -v * c;
    }
    for (j, v) in row1.iter().enumerate() {
        d[[1, j]] = v * c;
        d[[n - 2, n - 1 - j]] = -v * c;
    }
    for i in 2..n - 2 {
        d[[i, i - 2]] = c;
        d[[i, i - 1]] = -8.0 * c;
        d[[i, i + 1]] = 8.0 * c;
        d[[i, i + 2]] = -c;
    }
    d
}

/// Trapezoid quadrature weights on a uniform grid.
pub fn trapezoid_weights(n: usize, h: f64) -> Array1<f64> {
    let mut w = Array1::from_elem(n, h);
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Gregory end-corrected quadrature weights (positive, O(h^4) accurate for
/// n >= 7; plain trapezoid below that).
pub fn quad_weights(n: usize, h: f64) -> Array1<f64> {
    if n < 7 {
        return trapezoid_weights(n, h);
    }
    let mut w = Array1::from_elem(n, h);
    let ends = [3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0];
    for (i, e) in ends.iter().enumerate() {
        w[i] = e * h;
        w[n - 1 - i] = e * h;
    }
    w
}

/// Scalar field on the slab: per-layer collocation values, shape (n1, n2, nz).
#[derive(Debug, Clone)]
pub struct VolumeScalar {
    pub torus: TorusSpec,
    pub slab: SlabSpec,
    pub plus: Array3<f64>,
    pub minus: Array3<f64>,
}

impl VolumeScalar {
    pub fn zeros(torus: TorusSpec, slab: SlabSpec) -> Self {
        VolumeScalar {
            torus,
            slab,
            plus: Array3::zeros((torus.n1, torus.n2, slab.nz_plus)),
            minus: Array3::zeros((torus.n1, torus.n2, slab.nz_minus)),
        }
    }

    pub fn from_fn(torus: TorusSpec, slab: SlabSpec, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        Self::from_layer_fn(torus, slab, |_, x, y, z| f(x, y, z))
    }

    /// Like `from_fn` but layer-aware (the interface node x3 = 0 belongs to
    /// both layers, so two-sided values need the layer tag).
    pub fn from_layer_fn(
        torus: TorusSpec,
        slab: SlabSpec,
        f: impl Fn(Layer, f64, f64, f64) -> f64,
    ) -> Self {
        let build = |layer: Layer| {
            Array3::from_shape_fn((torus.n1, torus.n2, slab.nz(layer)), |(i, j, k)| {
                f(layer, torus.x1(i), torus.x2(j), slab.z(layer, k))
            })
        };
        VolumeScalar { torus, slab, plus: build(Layer::Plus), minus: build(Layer::Minus) }
    }

    /// Purely vertical profile replicated over the horizontal grid.
    pub fn from_profile(torus: TorusSpec, slab: SlabSpec, f: impl Fn(Layer, f64) -> f64) -> Self {
        Self::from_fn(torus, slab, |_, _, _| 0.0).map_layers(|layer, arr| {
            let mut out = arr.clone();
            for ((_, _, k), v) in out.indexed_iter_mut() {
                *v = f(layer, slab.z(layer, k));
            }
            out
        })
    }

    fn map_layers(mut self, f: impl Fn(Layer, &Array3<f64>) -> Array3<f64>) -> Self {
        self.plus = f(Layer::Plus, &self.plus);
        self.minus = f(Layer::Minus, &self.minus);
        self
    }

    pub fn layer(&self, layer: Layer) -> &Array3<f64> {
        match layer {
            Layer::Plus => &self.plus,
            Layer::Minus => &self.minus,
        }
    }

    pub fn layer_mut(&mut self, layer: Layer) -> &mut Array3<f64> {
        match layer {
            Layer::Plus => &mut self.plus,
            Layer::Minus => &mut self.minus,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VolumeScalar {
        VolumeScalar {
            torus: self.torus,
            slab: self.slab,
            plus: self.plus.mapv(&f),
            minus: self.minus.mapv(&f),
        }
    }

    /// Pointwise combination of two fields.
    pub fn zip(&self, other: &VolumeScalar, f: impl Fn(f64, f64) -> f64) -> VolumeScalar {
        VolumeScalar {
            torus: self.torus,
            slab: self.slab,
            plus: ndarray::Zip::from(&self.plus)
                .and(&other.plus)
                .map_collect(|&a, &b| f(a, b)),
            minus: ndarray::Zip::from(&self.minus)
                .and(&other.minus)
                .map_collect(|&a, &b| f(a, b)),
        }
    }

    pub fn add(&self, o: &VolumeScalar) -> VolumeScalar {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &VolumeScalar) -> VolumeScalar {
        self.zip(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &VolumeScalar) -> VolumeScalar {
        self.zip(o, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> VolumeScalar {
        self.map(|a| a * s)
    }

    /// Spectral horizontal derivative (axis 0 or 1) applied level by level.
    pub fn horizontal_derivative(&self, axis: usize) -> VolumeScalar {
        let torus = self.torus;
        let apply = |arr: &Array3<f64>| {
            let (n1, n2, nz) = arr.dim();
            let mut out = Array3::zeros((n1, n2, nz));
            for k in 0..nz {
                let level = arr.index_axis(ndarray::Axis(2), k).to_owned();
                let d = spectral::spectral_derivative(&torus, &level, axis);
                out.index_axis_mut(ndarray::Axis(2), k).assign(&d);
            }
            out
        };
        VolumeScalar { torus, slab: self.slab, plus: apply(&self.plus), minus: apply(&self.minus) }
    }

    /// Vertical derivative by the per-layer FD4 matrices.
    pub fn vertical_derivative(&self) -> VolumeScalar {
        let apply = |layer: Layer, arr: &Array3<f64>| {
            let nz = self.slab.nz(layer);
            let d = fd4_matrix(nz, self.slab.h(layer));
            let (n1, n2, _) = arr.dim();
            let mut out = Array3::zeros((n1, n2, nz));
            for i in 0..n1 {
                for j in 0..n2 {
                    for r in 0..nz {
                        let mut acc = 0.0;
                        for c in 0..nz {
                            let w = d[[r, c]];
                            if w != 0.0 {
                                acc += w * arr[[i, j, c]];
                            }
                        }
                        out[[i, j, r]] = acc;
                    }
                }
            }
            out
        };
        VolumeScalar {
            torus: self.torus,
            slab: self.slab,
            plus: apply(Layer::Plus, &self.plus),
            minus: apply(Layer::Minus, &self.minus),
        }
    }

    pub fn derivative(&self, axis: usize) -> VolumeScalar {
        if axis < 2 {
            self.horizontal_derivative(axis)
        } else {
            self.vertical_derivative()
        }
    }

    /// Volume integral over both layers (spectral-exact horizontal mean times
    /// area, Gregory end-corrected vertical).
    pub fn integral(&self) -> f64 {
        let area = self.torus.area();
        let npts = (self.torus.n1 * self.torus.n2) as f64;
        let mut total = 0.0;
        for layer in Layer::BOTH {
            let arr = self.layer(layer);
            let w = quad_weights(self.slab.nz(layer), self.slab.h(layer));
            for ((_, _, k), v) in arr.indexed_iter() {
                total += w[k] * v;
            }
        }
        total * area / npts
    }

    /// L2 norm squared over Omega.
    pub fn l2_sq(&self) -> f64 {
        self.zip(self, |a, _| a * a).integral()
    }

    pub fn max_abs(&self) -> f64 {
        let m = |arr: &Array3<f64>| arr.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        m(&self.plus).max(m(&self.minus))
    }

    pub fn min(&self) -> f64 {
        let m = |arr: &Array3<f64>| arr.iter().fold(f64::INFINITY, |acc, &v| acc.min(v));
        m(&self.plus).min(m(&self.minus))
    }

    pub fn max(&self) -> f64 {
        let m = |arr: &Array3<f64>| arr.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        m(&self.plus).max(m(&self.minus))
    }

    /// Trace at the top surface Sigma_+ (grid values).
    pub fn trace_top(&self) -> Array2<f64> {
        self.plus
            .index_axis(ndarray::Axis(2), self.slab.nz_plus - 1)
            .to_owned()
    }

    /// Trace at the interface Sigma_- taken from the given layer.
    pub fn trace_interface(&self, layer: Layer) -> Array2<f64> {
        match layer {
            Layer::Plus => self.plus.index_axis(ndarray::Axis(2), 0).to_owned(),
            Layer::Minus => self
                .minus
                .index_axis(ndarray::Axis(2), self.slab.nz_minus - 1)
                .to_owned(),
        }
    }

    /// Trace at the rigid bottom Sigma_b.
    pub fn trace_bottom(&self) -> Array2<f64> {
        self.minus.index_axis(ndarray::Axis(2), 0).to_owned()
    }

    /// Interfacial jump [[f]] = f_+ - f_- at x3 = 0 (grid values).
    pub fn jump(&self) -> Array2<f64> {
        &self.trace_interface(Layer::Plus) - &self.trace_interface(Layer::Minus)
    }

    pub fn is_finite(&self) -> bool {
        self.plus.iter().all(|v| v.is_finite()) && self.minus.iter().all(|v| v.is_finite())
    }
}

/// 3-vector volume field.
#[derive(Debug, Clone)]
pub struct VolumeVector {
    pub comps: [VolumeScalar; 3],
}

impl VolumeVector {
    pub fn zeros(torus: TorusSpec, slab: SlabSpec) -> Self {
        VolumeVector {
            comps: [
                VolumeScalar::zeros(torus, slab),
                VolumeScalar::zeros(torus, slab),
                VolumeScalar::zeros(torus, slab),
            ],
        }
    }

    pub fn from_fns(
        torus: TorusSpec,
        slab: SlabSpec,
        f: [&dyn Fn(f64, f64, f64) -> f64; 3],
    ) -> Self {
        VolumeVector {
            comps: [
                VolumeScalar::from_fn(torus, slab, f[0]),
                VolumeScalar::from_fn(torus, slab, f[1]),
                VolumeScalar::from_fn(torus, slab, f[2]),
            ],
        }
    }

    pub fn torus(&self) -> TorusSpec {
        self.comps[0].torus
    }

    pub fn slab(&self) -> SlabSpec {
        self.comps[0].slab
    }

    pub fn add(&self, o: &VolumeVector) -> VolumeVector {
        VolumeVector {
            comps: [
                self.comps[0].add(&o.comps[0]),
                self.comps[1].add(&o.comps[1]),
                self.comps[2].add(&o.comps[2]),
            ],
        }
    }

    pub fn sub(&self, o: &VolumeVector) -> VolumeVector {
        VolumeVector {
            comps: [
                self.comps[0].sub(&o.comps[0]),
                self.comps[1].sub(&o.comps[1]),
                self.comps[2].sub(&o.comps[2]),
            ],
        }
    }

    pub fn scale(&self, s: f64) -> VolumeVector {
        VolumeVector {
            comps: [self.comps[0].scale(s), self.comps[1].scale(s), self.comps[2].scale(s)],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|c| c.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn setup() -> (TorusSpec, SlabSpec) {
        (
            TorusSpec::new(1.0, 1.0, 8, 8).unwrap(),
            SlabSpec::new(1.0, 1.5, 9, 11).unwrap(),
        )
    }

    #[test]
    fn fd4_differentiates_quartics_exactly() {
        let n = 9;
        let h = 0.25;
        let d = fd4_matrix(n, h);
        let xs: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
        let f: Vec<f64> = xs.iter().map(|x| x.powi(4) - 2.0 * x.powi(2) + 3.0).collect();
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += d[[r, c]] * f[c];
            }
            let exact = 4.0 * xs[r].powi(3) - 4.0 * xs[r];
            assert_abs_diff_eq!(acc, exact, epsilon = 1e-10);
        }
    }

    #[test]
    fn surface_constant_norm_matches_area() {
        let (t, _) = setup();
        let f = SurfaceField::constant(t, Side::Plus, 2.0);
        for s in [-1.0, 0.0, 0.5, 2.0] {
            assert_abs_diff_eq!(f.sobolev_sq(s), 4.0 * t.area(), epsilon = 1e-10);
        }
    }

    #[test]
    fn surface_single_mode_norm() {
        let (t, _) = setup();
        // f = a sin(x1/L1): coefficients a/(2i) at xi = +-(1,0)
        let a = 0.7;
        let f = SurfaceField::from_fn(t, Side::Minus, |x, _| a * (x / t.l1).sin());
        let s = 1.5;
        let w = (1.0 + 1.0 / (t.l1 * t.l1)).powf(s);
        let expected = t.area() * w * (a * a / 2.0);
        assert_abs_diff_eq!(f.sobolev_sq(s), expected, epsilon = 1e-10 * expected.abs());
    }

    #[test]
    fn volume_integral_of_one_is_slab_volume() {
        let (t, s) = setup();
        let f = VolumeScalar::from_fn(t, s, |_, _, _| 1.0);
        let exact = t.area() * (s.ell + s.b);
        assert_abs_diff_eq!(f.integral(), exact, epsilon = 1e-10 * exact);
    }

    #[test]
    fn traces_and_jump() {
        let (t, s) = setup();
        let f = VolumeScalar::from_layer_fn(t, s, |layer, _, _, z| match layer {
            Layer::Plus => z + 2.0,
            Layer::Minus => z - 1.0,
        });
        assert_abs_diff_eq!(f.trace_top()[[0, 0]], s.ell + 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.trace_bottom()[[0, 0]], -s.b - 1.0, epsilon = 1e-14);
        // jump = f_+(0) - f_-(0) = 2 - (-1) = 3
        assert_abs_diff_eq!(f.jump()[[3, 4]], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn vertical_derivative_on_polynomial_profile() {
        let (t, s) = setup();
        let f = VolumeScalar::from_fn(t, s, |_, _, z| z.powi(3));
        let d = f.vertical_derivative();
        for layer in Layer::BOTH {
            for k in 0..s.nz(layer) {
                let z = s.z(layer, k);
                assert_abs_diff_eq!(d.layer(layer)[[2, 5, k]], 3.0 * z * z, epsilon = 1e-9);
            }
        }
    }
}
