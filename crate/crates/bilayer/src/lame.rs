//! The two-phase geometric Lame problem for the velocity field, discretized
//! by a Galerkin method on the weak form
//!
//!   <<u, w>> = int_Omega J ( mu/2 D0_A u : D0_A w + mu' div_A u div_A w ),
//!
//! with Fourier collocation horizontally and nodal P1 elements vertically.
//! The trial space carries the interface continuity [[u]] = 0 (shared
//! interface degree of freedom) and the bottom Dirichlet row u_-(-b) = 0.
//!
//! At eta = 0 the weak form decouples exactly by horizontal mode; those
//! per-mode blocks are assembled densely and serve both as the direct solver
//! for flat geometry and as the preconditioner for the conjugate-gradient
//! iteration when eta != 0.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::fields::{Layer, SlabSpec, SurfacePair, VolumeScalar, VolumeVector};
use crate::geometry::{GeomLevels, Geometry};
use crate::spectral::{self, TorusSpec};

const GAUSS_OFFSETS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Physical and solver parameters for the Lame problem.
#[derive(Debug, Clone, Copy)]
pub struct LameParams {
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub mu_prime_plus: f64,
    pub mu_prime_minus: f64,
    /// Admissible density corridor [rho_*/2, 3 rho^*/2].
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub jacobian_floor: f64,
    pub cg_tol: f64,
    pub cg_maxit: usize,
}

impl LameParams {
    pub fn mu(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Plus => self.mu_plus,
            Layer::Minus => self.mu_minus,
        }
    }

    pub fn mu_prime(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Plus => self.mu_prime_plus,
            Layer::Minus => self.mu_prime_minus,
        }
    }
}

impl Default for LameParams {
    fn default() -> Self {
        LameParams {
            mu_plus: 1.0,
            mu_minus: 1.0,
            mu_prime_plus: 0.0,
            mu_prime_minus: 0.0,
            rho_lo: 0.0,
            rho_hi: f64::INFINITY,
            jacobian_floor: crate::geometry::JACOBIAN_FLOOR,
            cg_tol: 1e-10,
            cg_maxit: 500,
        }
    }
}

/// Traction data entering the natural boundary terms of the weak form.
#[derive(Debug, Clone)]
pub struct TractionData {
    pub f2_plus: [Array2<f64>; 3],
    pub f2_minus: [Array2<f64>; 3],
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub eta: SurfacePair,
}

impl TractionData {
    pub fn zero(torus: TorusSpec) -> Self {
        let z = || Array2::zeros((torus.n1, torus.n2));
        TractionData {
            f2_plus: [z(), z(), z()],
            f2_minus: [z(), z(), z()],
            sigma_plus: 0.0,
            sigma_minus: 0.0,
            eta: SurfacePair::zeros(torus),
        }
    }
}

/// Which constrained space the degrees of freedom live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpaceKind {
    /// [[u]] = 0 at the interface (shared dof), u = 0 at the bottom;
    /// natural conditions at Sigma_+ and Sigma_-.
    Coupled,
    /// Dirichlet at Sigma_+, Sigma_-, Sigma_b: interior nodes only.
    DirichletInterior,
}

#[derive(Debug, Clone, Copy)]
struct DofMap {
    slab: SlabSpec,
    kind: SpaceKind,
    nv: usize,
}

impl DofMap {
    fn coupled(slab: SlabSpec) -> Self {
        DofMap { slab, kind: SpaceKind::Coupled, nv: slab.nz_minus + slab.nz_plus - 2 }
    }

    fn dirichlet(slab: SlabSpec) -> Self {
        DofMap {
            slab,
            kind: SpaceKind::DirichletInterior,
            nv: slab.nz_minus + slab.nz_plus - 4,
        }
    }

    /// Vertical dof index of a (layer, node), or None for constrained nodes.
    fn index(&self, layer: Layer, node: usize) -> Option<usize> {
        let nzm = self.slab.nz_minus;
        let nzp = self.slab.nz_plus;
        match self.kind {
            SpaceKind::Coupled => match layer {
                Layer::Minus => {
                    if node == 0 {
                        None
                    } else {
                        Some(node - 1)
                    }
                }
                Layer::Plus => Some(nzm - 2 + node),
            },
            SpaceKind::DirichletInterior => match layer {
                Layer::Minus => {
                    if node == 0 || node == nzm - 1 {
                        None
                    } else {
                        Some(node - 1)
                    }
                }
                Layer::Plus => {
                    if node == 0 || node == nzp - 1 {
                        None
                    } else {
                        Some(nzm - 2 + node - 1)
                    }
                }
            },
        }
    }

    /// Scatter a dof array into node fields, with constrained nodes taken
    /// from `lift` (or zero).
    fn scatter(
        &self,
        torus: TorusSpec,
        dof: &Array4<f64>,
        lift: Option<&VolumeVector>,
    ) -> VolumeVector {
        let mut out = match lift {
            Some(l) => l.clone(),
            None => VolumeVector::zeros(torus, self.slab),
        };
        for c in 0..3 {
            for layer in Layer::BOTH {
                for node in 0..self.slab.nz(layer) {
                    if let Some(j) = self.index(layer, node) {
                        for i1 in 0..torus.n1 {
                            for i2 in 0..torus.n2 {
                                out.comps[c].layer_mut(layer)[[i1, i2, node]] =
                                    dof[[c, j, i1, i2]];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Geometry, density and viscosity coefficients sampled at the vertical Gauss
/// levels of one layer (level index = 2 * element + gauss point).
struct LayerTables {
    geom: GeomLevels,
    /// mass coefficient rho * J at Gauss levels
    rhoj: Array3<f64>,
    /// J alone at Gauss levels (volume forcing weight)
    j: Array3<f64>,
}

fn gauss_levels(slab: SlabSpec, layer: Layer) -> Vec<f64> {
    let nz = slab.nz(layer);
    let h = slab.h(layer);
    let mut out = Vec::with_capacity(2 * (nz - 1));
    for e in 0..nz - 1 {
        let z0 = slab.z(layer, e);
        for off in GAUSS_OFFSETS {
            out.push(z0 + off * h);
        }
    }
    out
}

fn interp_to_gauss(nodes: &Array3<f64>) -> Array3<f64> {
    let (n1, n2, nz) = nodes.dim();
    let mut out = Array3::zeros((n1, n2, 2 * (nz - 1)));
    for e in 0..nz - 1 {
        for (gp, off) in GAUSS_OFFSETS.iter().enumerate() {
            let (w0, w1) = (1.0 - off, *off);
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    out[[i1, i2, 2 * e + gp]] =
                        w0 * nodes[[i1, i2, e]] + w1 * nodes[[i1, i2, e + 1]];
                }
            }
        }
    }
    out
}

/// What quadratic form the kernel evaluates.
#[derive(Clone, Copy)]
enum FormKind {
    /// mu J/2 |D0_A u|^2 + mu' J |div_A u|^2 with the stored geometry
    Viscous,
    /// plain H^1 inner product (flat metric): grad u : grad w + u . w
    H1,
}

/// Assembled operator for one geometry/density/dt combination.
pub struct LameOperator {
    pub torus: TorusSpec,
    pub slab: SlabSpec,
    pub params: LameParams,
    pub dt: f64,
    dof: DofMap,
    tables: [LayerTables; 2],
    blocks: Vec<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>,
    pub flat: bool,
    form: FormKind,
    normals: [crate::geometry::SurfaceNormal; 2],
    /// 1/dt for the mass term; 0 for the elliptic (Dirichlet) variant
    mass_scale: f64,
}

fn layer_idx(layer: Layer) -> usize {
    match layer {
        Layer::Plus => 0,
        Layer::Minus => 1,
    }
}

impl LameOperator {
    fn quad_weight(&self, layer: Layer) -> f64 {
        0.5 * self.slab.h(layer) * self.torus.area() / (self.torus.n1 * self.torus.n2) as f64
    }

    /// Apply the bilinear form to node-space fields, accumulating the
    /// dof-space residual r[dof] = mass_scale * m(u, phi) + [visc] a(u, phi).
    fn apply_nodes(&self, u: &VolumeVector, include_visc: bool, mass_scale: f64) -> Array4<f64> {
        let torus = self.torus;
        let (n1, n2) = (torus.n1, torus.n2);
        let mut out = Array4::zeros((3, self.dof.nv, n1, n2));
        for layer in Layer::BOTH {
            let t = &self.tables[layer_idx(layer)];
            let nz = self.slab.nz(layer);
            let h = self.slab.h(layer);
            let w_elem = self.quad_weight(layer);
            let mu = self.params.mu(layer);
            let mu_p = self.params.mu_prime(layer);
            // spectral horizontal derivatives of all components at all nodes
            let mut d1 = Vec::with_capacity(3);
            let mut d2 = Vec::with_capacity(3);
            for c in 0..3 {
                let f = u.comps[c].layer(layer);
                let mut d1c = Array3::zeros((n1, n2, nz));
                let mut d2c = Array3::zeros((n1, n2, nz));
                if include_visc {
                    for k in 0..nz {
                        let lvl = f.index_axis(ndarray::Axis(2), k).to_owned();
                        d1c.index_axis_mut(ndarray::Axis(2), k)
                            .assign(&spectral::spectral_derivative(&torus, &lvl, 0));
                        d2c.index_axis_mut(ndarray::Axis(2), k)
                            .assign(&spectral::spectral_derivative(&torus, &lvl, 1));
                    }
                }
                d1.push(d1c);
                d2.push(d2c);
            }
            let mut p = [
                [
                    Array2::<f64>::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                ],
                [
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                ],
                [
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                ],
            ];
            let mut q = [
                Array2::<f64>::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
            ];
            for e in 0..nz - 1 {
                let dof_lo = self.dof.index(layer, e);
                let dof_hi = self.dof.index(layer, e + 1);
                for (gp, off) in GAUSS_OFFSETS.iter().enumerate() {
                    let lvl = 2 * e + gp;
                    let (w0, w1) = (1.0 - off, *off);
                    for i1 in 0..n1 {
                        for i2 in 0..n2 {
                            let (a13, a23, a33) = match self.form {
                                FormKind::Viscous => {
                                    let kk = t.geom.k[[i1, i2, lvl]];
                                    (
                                        -t.geom.a[[i1, i2, lvl]] * kk,
                                        -t.geom.b[[i1, i2, lvl]] * kk,
                                        kk,
                                    )
                                }
                                FormKind::H1 => (0.0, 0.0, 1.0),
                            };
                            let mut val = [0.0f64; 3];
                            let mut g = [[0.0f64; 3]; 3]; // g[i][j] = Acal_{ik} d_k u_j
                            for j in 0..3 {
                                let f = u.comps[j].layer(layer);
                                let f0 = f[[i1, i2, e]];
                                let f1 = f[[i1, i2, e + 1]];
                                val[j] = w0 * f0 + w1 * f1;
                                if include_visc {
                                    let du1 =
                                        w0 * d1[j][[i1, i2, e]] + w1 * d1[j][[i1, i2, e + 1]];
                                    let du2 =
                                        w0 * d2[j][[i1, i2, e]] + w1 * d2[j][[i1, i2, e + 1]];
                                    let du3 = (f1 - f0) / h;
                                    g[0][j] = du1 + a13 * du3;
                                    g[1][j] = du2 + a23 * du3;
                                    g[2][j] = a33 * du3;
                                }
                            }
                            if include_visc {
                                match self.form {
                                    FormKind::Viscous => {
                                        let jj = t.geom.j[[i1, i2, lvl]];
                                        let acal =
                                            [[1.0, 0.0, a13], [0.0, 1.0, a23], [0.0, 0.0, a33]];
                                        let div = g[0][0] + g[1][1] + g[2][2];
                                        let mut d0 = [[0.0f64; 3]; 3];
                                        for i in 0..3 {
                                            for jc in 0..3 {
                                                d0[i][jc] = g[i][jc] + g[jc][i];
                                            }
                                            d0[i][i] -= 2.0 / 3.0 * div;
                                        }
                                        for jc in 0..3 {
                                            for k in 0..3 {
                                                let mut s = 0.0;
                                                for i in 0..3 {
                                                    s += d0[i][jc] * acal[i][k];
                                                }
                                                p[jc][k][[i1, i2]] = w_elem
                                                    * jj
                                                    * (mu * s + mu_p * div * acal[jc][k]);
                                            }
                                        }
                                    }
                                    FormKind::H1 => {
                                        for jc in 0..3 {
                                            for k in 0..3 {
                                                p[jc][k][[i1, i2]] = w_elem * g[k][jc];
                                            }
                                        }
                                    }
                                }
                            }
                            if mass_scale != 0.0 {
                                let coef = match self.form {
                                    FormKind::Viscous => t.rhoj[[i1, i2, lvl]],
                                    FormKind::H1 => 1.0,
                                };
                                for jc in 0..3 {
                                    q[jc][[i1, i2]] = w_elem * mass_scale * coef * val[jc];
                                }
                            } else {
                                for jc in 0..3 {
                                    q[jc][[i1, i2]] = 0.0;
                                }
                            }
                        }
                    }
                    // adjoint scatter: R_j = -d1 P_j1 - d2 P_j2 + Q_j at the
                    // level; vertical part +- P_j3 / h to the element nodes
                    for jc in 0..3 {
                        let mut r = q[jc].clone();
                        if include_visc {
                            r = &r - &spectral::spectral_derivative(&torus, &p[jc][0], 0);
                            r = &r - &spectral::spectral_derivative(&torus, &p[jc][1], 1);
                        }
                        for i1 in 0..n1 {
                            for i2 in 0..n2 {
                                let rv = r[[i1, i2]];
                                let pv3 = if include_visc { p[jc][2][[i1, i2]] } else { 0.0 };
                                if let Some(dl) = dof_lo {
                                    out[[jc, dl, i1, i2]] += w0 * rv - pv3 / h;
                                }
                                if let Some(dh) = dof_hi {
                                    out[[jc, dh, i1, i2]] += w1 * rv + pv3 / h;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Quadratic-form energy mass_scale * m(u,u) + [visc] a(u,u), evaluated
    /// directly at the Gauss points.
    fn form_energy(&self, u: &VolumeVector, include_visc: bool, mass_scale: f64) -> f64 {
        let torus = self.torus;
        let (n1, n2) = (torus.n1, torus.n2);
        let mut total = 0.0;
        for layer in Layer::BOTH {
            let t = &self.tables[layer_idx(layer)];
            let nz = self.slab.nz(layer);
            let h = self.slab.h(layer);
            let w_elem = self.quad_weight(layer);
            let mu = self.params.mu(layer);
            let mu_p = self.params.mu_prime(layer);
            let mut d1 = Vec::with_capacity(3);
            let mut d2 = Vec::with_capacity(3);
            for c in 0..3 {
                let f = u.comps[c].layer(layer);
                let mut d1c = Array3::zeros((n1, n2, nz));
                let mut d2c = Array3::zeros((n1, n2, nz));
                if include_visc {
                    for k in 0..nz {
                        let lvl = f.index_axis(ndarray::Axis(2), k).to_owned();
                        d1c.index_axis_mut(ndarray::Axis(2), k)
                            .assign(&spectral::spectral_derivative(&torus, &lvl, 0));
                        d2c.index_axis_mut(ndarray::Axis(2), k)
                            .assign(&spectral::spectral_derivative(&torus, &lvl, 1));
                    }
                }
                d1.push(d1c);
                d2.push(d2c);
            }
            for e in 0..nz - 1 {
                for (gp, off) in GAUSS_OFFSETS.iter().enumerate() {
                    let lvl = 2 * e + gp;
                    let (w0, w1) = (1.0 - off, *off);
                    for i1 in 0..n1 {
                        for i2 in 0..n2 {
                            let (a13, a23, a33) = match self.form {
                                FormKind::Viscous => {
                                    let kk = t.geom.k[[i1, i2, lvl]];
                                    (
                                        -t.geom.a[[i1, i2, lvl]] * kk,
                                        -t.geom.b[[i1, i2, lvl]] * kk,
                                        kk,
                                    )
                                }
                                FormKind::H1 => (0.0, 0.0, 1.0),
                            };
                            let mut val = [0.0f64; 3];
                            let mut g = [[0.0f64; 3]; 3];
                            for j in 0..3 {
                                let f = u.comps[j].layer(layer);
                                let f0 = f[[i1, i2, e]];
                                let f1 = f[[i1, i2, e + 1]];
                                val[j] = w0 * f0 + w1 * f1;
                                if include_visc {
                                    let du1 =
                                        w0 * d1[j][[i1, i2, e]] + w1 * d1[j][[i1, i2, e + 1]];
                                    let du2 =
                                        w0 * d2[j][[i1, i2, e]] + w1 * d2[j][[i1, i2, e + 1]];
                                    let du3 = (f1 - f0) / h;
                                    g[0][j] = du1 + a13 * du3;
                                    g[1][j] = du2 + a23 * du3;
                                    g[2][j] = a33 * du3;
                                }
                            }
                            let mut pt = 0.0;
                            if include_visc {
                                match self.form {
                                    FormKind::Viscous => {
                                        let jj = t.geom.j[[i1, i2, lvl]];
                                        let div = g[0][0] + g[1][1] + g[2][2];
                                        let mut d0sq = 0.0;
                                        for i in 0..3 {
                                            for jc in 0..3 {
                                                let mut v = g[i][jc] + g[jc][i];
                                                if i == jc {
                                                    v -= 2.0 / 3.0 * div;
                                                }
                                                d0sq += v * v;
                                            }
                                        }
                                        pt += jj * (0.5 * mu * d0sq + mu_p * div * div);
                                    }
                                    FormKind::H1 => {
                                        for i in 0..3 {
                                            for jc in 0..3 {
                                                pt += g[i][jc] * g[i][jc];
                                            }
                                        }
                                    }
                                }
                            }
                            if mass_scale != 0.0 {
                                let coef = match self.form {
                                    FormKind::Viscous => t.rhoj[[i1, i2, lvl]],
                                    FormKind::H1 => 1.0,
                                };
                                pt += mass_scale
                                    * coef
                                    * (val[0] * val[0] + val[1] * val[1] + val[2] * val[2]);
                            }
                            total += w_elem * pt;
                        }
                    }
                }
            }
        }
        total
    }

    fn apply_dof(&self, x: &Array4<f64>) -> Array4<f64> {
        let u = self.dof.scatter(self.torus, x, None);
        self.apply_nodes(&u, true, self.mass_scale)
    }

    /// Block preconditioner: per-mode direct solves with the flat-geometry
    /// factorizations.  Exact inverse when the geometry is flat.
    fn precondition(&self, r: &Array4<f64>) -> Array4<f64> {
        let (n1, n2) = (self.torus.n1, self.torus.n2);
        let nv = self.dof.nv;
        let mut modes: Array4<Complex64> = Array4::zeros((3, nv, n1, n2));
        for c in 0..3 {
            for j in 0..nv {
                let slice = Array2::from_shape_fn((n1, n2), |(i1, i2)| r[[c, j, i1, i2]]);
                let coeffs = spectral::grid_to_coeffs(&slice);
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        modes[[c, j, i1, i2]] = coeffs[[i1, i2]];
                    }
                }
            }
        }
        let mut out_modes: Array4<Complex64> = Array4::zeros((3, nv, n1, n2));
        let mut rhs = nalgebra::DVector::<Complex64>::zeros(3 * nv);
        for k1 in 0..n1 {
            for k2 in 0..n2 {
                for c in 0..3 {
                    for j in 0..nv {
                        rhs[c * nv + j] = modes[[c, j, k1, k2]];
                    }
                }
                let sol = self.blocks[k1 * n2 + k2]
                    .solve(&rhs)
                    .expect("flat block solve");
                for c in 0..3 {
                    for j in 0..nv {
                        out_modes[[c, j, k1, k2]] = sol[c * nv + j];
                    }
                }
            }
        }
        let mut out = Array4::zeros((3, nv, n1, n2));
        for c in 0..3 {
            for j in 0..nv {
                let coeffs = Array2::from_shape_fn((n1, n2), |(i1, i2)| out_modes[[c, j, i1, i2]]);
                let grid = spectral::coeffs_to_grid(&coeffs);
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        out[[c, j, i1, i2]] = grid[[i1, i2]];
                    }
                }
            }
        }
        out
    }

    fn pcg(&self, b: &Array4<f64>) -> Result<(Array4<f64>, usize)> {
        let dot =
            |a: &Array4<f64>, b: &Array4<f64>| -> f64 { a.iter().zip(b.iter()).map(|(x, y)| x * y).sum() };
        let nb = dot(b, b).sqrt();
        let mut x = Array4::zeros(b.raw_dim());
        if nb == 0.0 {
            return Ok((x, 0));
        }
        let mut r = b.clone();
        let mut z = self.precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 0..self.params.cg_maxit {
            let ap = self.apply_dof(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                return Err(SimError::SolveFailure(format!(
                    "indefinite operator detected at CG iteration {it}"
                )));
            }
            let alpha = rz / pap;
            ndarray::Zip::from(&mut x).and(&p).for_each(|x, &p| *x += alpha * p);
            ndarray::Zip::from(&mut r).and(&ap).for_each(|r, &a| *r -= alpha * a);
            if dot(&r, &r).sqrt() <= self.params.cg_tol * nb {
                return Ok((x, it + 1));
            }
            z = self.precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            ndarray::Zip::from(&mut p).and(&z).for_each(|p, &z| *p = z + beta * *p);
        }
        Err(SimError::SolveFailure(format!(
            "CG failed to reach {} within {} iterations",
            self.params.cg_tol, self.params.cg_maxit
        )))
    }

    /// Assemble the flat-geometry per-mode blocks.  `rho_profile` holds the
    /// horizontally averaged mass coefficient at the Gauss levels per layer.
    fn assemble_blocks(
        torus: TorusSpec,
        slab: SlabSpec,
        dof: &DofMap,
        params: &LameParams,
        form: FormKind,
        mass_scale: f64,
        rho_profile: &[Vec<f64>; 2],
    ) -> Vec<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
        let nv = dof.nv;
        let dim = 3 * nv;
        let area_per_pt = torus.area() / (torus.n1 * torus.n2) as f64;
        let mut blocks = Vec::with_capacity(torus.n1 * torus.n2);
        for k1 in 0..torus.n1 {
            for k2 in 0..torus.n2 {
                let xi1 = torus.xi1(k1);
                let xi2 = torus.xi2(k2);
                let mut m = nalgebra::DMatrix::<Complex64>::zeros(dim, dim);
                for layer in Layer::BOTH {
                    let nz = slab.nz(layer);
                    let h = slab.h(layer);
                    let w_elem = 0.5 * h * area_per_pt;
                    let mu = params.mu(layer);
                    let mu_p = params.mu_prime(layer);
                    let prof = &rho_profile[layer_idx(layer)];
                    for e in 0..nz - 1 {
                        let dofs = [dof.index(layer, e), dof.index(layer, e + 1)];
                        for (gp, off) in GAUSS_OFFSETS.iter().enumerate() {
                            let lvl = 2 * e + gp;
                            let shapes = [1.0 - off, *off];
                            let dshapes = [-1.0 / h, 1.0 / h];
                            let coef = prof[lvl];
                            let gvec = |a: usize| {
                                [
                                    Complex64::new(0.0, xi1 * shapes[a]),
                                    Complex64::new(0.0, xi2 * shapes[a]),
                                    Complex64::new(dshapes[a], 0.0),
                                ]
                            };
                            for a in 0..2 {
                                let Some(ja) = dofs[a] else { continue };
                                let ga = gvec(a);
                                for bb in 0..2 {
                                    let Some(jb) = dofs[bb] else { continue };
                                    let gb = gvec(bb);
                                    let gdot: Complex64 =
                                        (0..3).map(|i| ga[i] * gb[i].conj()).sum();
                                    for c in 0..3 {
                                        for d in 0..3 {
                                            let mut val = Complex64::new(0.0, 0.0);
                                            match form {
                                                FormKind::Viscous => {
                                                    let mut visc = Complex64::new(0.0, 0.0);
                                                    if c == d {
                                                        visc += 2.0 * gdot;
                                                    }
                                                    visc += 2.0 * ga[d] * gb[c].conj();
                                                    visc -= 4.0 / 3.0 * ga[c] * gb[d].conj();
                                                    val += 0.5 * mu * visc
                                                        + mu_p * ga[c] * gb[d].conj();
                                                }
                                                FormKind::H1 => {
                                                    if c == d {
                                                        val += gdot;
                                                    }
                                                }
                                            }
                                            if c == d && mass_scale != 0.0 {
                                                let mc = match form {
                                                    FormKind::Viscous => coef,
                                                    FormKind::H1 => 1.0,
                                                };
                                                val += mass_scale * mc * shapes[a] * shapes[bb];
                                            }
                                            // row = test (d, jb), col = trial (c, ja)
                                            m[(d * nv + jb, c * nv + ja)] += w_elem * val;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                blocks.push(m.lu());
            }
        }
        blocks
    }
}

fn build_tables(g: &Geometry, rho: &VolumeScalar) -> [LayerTables; 2] {
    let make = |layer: Layer| {
        let levels = gauss_levels(g.slab, layer);
        let geom = g.coefficients_at_levels(&levels);
        let rho_g = interp_to_gauss(rho.layer(layer));
        let rhoj = &rho_g * &geom.j;
        LayerTables { j: geom.j.clone(), geom, rhoj }
    };
    [make(Layer::Plus), make(Layer::Minus)]
}

fn mean_profile(t: &LayerTables) -> Vec<f64> {
    let (n1, n2, nl) = t.rhoj.dim();
    let mut out = vec![0.0; nl];
    for l in 0..nl {
        let mut s = 0.0;
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                s += t.rhoj[[i1, i2, l]];
            }
        }
        out[l] = s / (n1 * n2) as f64;
    }
    out
}

/// Assemble the backward-Euler Lame operator v -> int rho J v . w / dt + <<v, w>>.
pub fn assemble_lame(
    g: &Geometry,
    rho: &VolumeScalar,
    dt: f64,
    params: &LameParams,
) -> Result<LameOperator> {
    let min_j = g.jac.min();
    if min_j <= params.jacobian_floor {
        return Err(SimError::DegenerateJacobian { min_j, floor: params.jacobian_floor });
    }
    let (rmin, rmax) = (rho.min(), rho.max());
    if rmin < params.rho_lo || rmax > params.rho_hi {
        return Err(SimError::DensityOutOfRange {
            min: rmin,
            max: rmax,
            lo: params.rho_lo,
            hi: params.rho_hi,
        });
    }
    let tables = build_tables(g, rho);
    let flat = g.a_coef.max_abs() < 1e-13
        && g.b_coef.max_abs() < 1e-13
        && g.jac.map(|v| v - 1.0).max_abs() < 1e-13;
    let dof = DofMap::coupled(g.slab);
    let profile = [mean_profile(&tables[0]), mean_profile(&tables[1])];
    let blocks = LameOperator::assemble_blocks(
        g.torus,
        g.slab,
        &dof,
        params,
        FormKind::Viscous,
        1.0 / dt,
        &profile,
    );
    Ok(LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: *params,
        dt,
        dof,
        tables,
        blocks,
        flat,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 1.0 / dt,
    })
}

impl LameOperator {
    /// Mass-type pass with J (not rho J) as the coefficient, for the volume
    /// forcing term int J F1 . w.
    fn volume_forcing(&self, f1: &VolumeVector) -> Array4<f64> {
        let torus = self.torus;
        let (n1, n2) = (torus.n1, torus.n2);
        let mut out = Array4::zeros((3, self.dof.nv, n1, n2));
        for layer in Layer::BOTH {
            let t = &self.tables[layer_idx(layer)];
            let nz = self.slab.nz(layer);
            let w_elem = self.quad_weight(layer);
            for e in 0..nz - 1 {
                let dof_lo = self.dof.index(layer, e);
                let dof_hi = self.dof.index(layer, e + 1);
                for (gp, off) in GAUSS_OFFSETS.iter().enumerate() {
                    let lvl = 2 * e + gp;
                    let (w0, w1) = (1.0 - off, *off);
                    for jc in 0..3 {
                        let f = f1.comps[jc].layer(layer);
                        for i1 in 0..n1 {
                            for i2 in 0..n2 {
                                let val = w0 * f[[i1, i2, e]] + w1 * f[[i1, i2, e + 1]];
                                let rv = w_elem * t.j[[i1, i2, lvl]] * val;
                                if let Some(dl) = dof_lo {
                                    out[[jc, dl, i1, i2]] += w0 * rv;
                                }
                                if let Some(dh) = dof_hi {
                                    out[[jc, dh, i1, i2]] += w1 * rv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One backward-Euler step of the two-phase Lame problem, solving
/// int rho J (u - u_prev)/dt . w + <<u, w>>
///   = int J F1 . w - int_Sigma (F2 - sigma lap_* eta N) . w  for all w.
/// Returns the velocity and the number of CG iterations used.
pub fn solve_lame_step(
    op: &LameOperator,
    u_prev: &VolumeVector,
    f1: &VolumeVector,
    tr: &TractionData,
) -> Result<(VolumeVector, usize)> {
    let mut rhs = op.apply_nodes(u_prev, false, 1.0 / op.dt);
    rhs += &op.volume_forcing(f1);
    let w_surf = op.torus.area() / (op.torus.n1 * op.torus.n2) as f64;
    let lap_p = tr.eta.plus.laplacian().values();
    let lap_m = tr.eta.minus.laplacian().values();
    let top_dof = op.dof.index(Layer::Plus, op.slab.nz_plus - 1).unwrap();
    let int_dof = op.dof.index(Layer::Plus, 0).unwrap();
    let np = &op.normals[0];
    let nm = &op.normals[1];
    for i1 in 0..op.torus.n1 {
        for i2 in 0..op.torus.n2 {
            let npv = [np.x[[i1, i2]], np.y[[i1, i2]], np.z[[i1, i2]]];
            let nmv = [nm.x[[i1, i2]], nm.y[[i1, i2]], nm.z[[i1, i2]]];
            for c in 0..3 {
                rhs[[c, top_dof, i1, i2]] +=
                    w_surf * (tr.sigma_plus * lap_p[[i1, i2]] * npv[c] - tr.f2_plus[c][[i1, i2]]);
                rhs[[c, int_dof, i1, i2]] +=
                    w_surf * (tr.sigma_minus * lap_m[[i1, i2]] * nmv[c] - tr.f2_minus[c][[i1, i2]]);
            }
        }
    }
    let (x, iters) = op.pcg(&rhs)?;
    Ok((op.dof.scatter(op.torus, &x, None), iters))
}

/// Dirichlet elliptic problem: -div_A S_A u = G with u = h_+ on Sigma_+,
/// u = h_- on Sigma_- (both traces), u_- = 0 on Sigma_b.
pub fn solve_lame_dirichlet(
    g: &Geometry,
    gg: &VolumeVector,
    h_plus: &[Array2<f64>; 3],
    h_minus: &[Array2<f64>; 3],
    params: &LameParams,
) -> Result<VolumeVector> {
    let min_j = g.jac.min();
    if min_j <= params.jacobian_floor {
        return Err(SimError::DegenerateJacobian { min_j, floor: params.jacobian_floor });
    }
    let rho = VolumeScalar::from_fn(g.torus, g.slab, |_, _, _| 1.0);
    let tables = build_tables(g, &rho);
    let dof = DofMap::dirichlet(g.slab);
    let profile = [
        vec![0.0; 2 * (g.slab.nz_plus - 1)],
        vec![0.0; 2 * (g.slab.nz_minus - 1)],
    ];
    let blocks = LameOperator::assemble_blocks(
        g.torus,
        g.slab,
        &dof,
        params,
        FormKind::Viscous,
        0.0,
        &profile,
    );
    let op = LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: *params,
        dt: 1.0,
        dof,
        tables,
        blocks,
        flat: false,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 0.0,
    };
    let mut lift = VolumeVector::zeros(g.torus, g.slab);
    let nzp = g.slab.nz_plus;
    let nzm = g.slab.nz_minus;
    for c in 0..3 {
        for i1 in 0..g.torus.n1 {
            for i2 in 0..g.torus.n2 {
                lift.comps[c].plus[[i1, i2, nzp - 1]] = h_plus[c][[i1, i2]];
                lift.comps[c].plus[[i1, i2, 0]] = h_minus[c][[i1, i2]];
                lift.comps[c].minus[[i1, i2, nzm - 1]] = h_minus[c][[i1, i2]];
            }
        }
    }
    let mut rhs = op.volume_forcing(gg);
    let lift_term = op.apply_nodes(&lift, true, 0.0);
    rhs -= &lift_term;
    let (x, _) = op.pcg(&rhs)?;
    Ok(op.dof.scatter(op.torus, &x, Some(&lift)))
}

/// Viscous-to-H1 Rayleigh quotient
/// ( int mu J/2 |D0_A u|^2 + mu' J |div_A u|^2 ) / ||u||^2_{H1,discrete}
/// for fields satisfying the coupled-space constraints.
pub fn korn_ratio(u: &VolumeVector, g: &Geometry, params: &LameParams) -> Result<f64> {
    let rho = VolumeScalar::from_fn(g.torus, g.slab, |_, _, _| 1.0);
    let tables = build_tables(g, &rho);
    let dof = DofMap::coupled(g.slab);
    let op = LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: *params,
        dt: 1.0,
        dof,
        tables,
        blocks: Vec::new(),
        flat: false,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 0.0,
    };
    let num = op.form_energy(u, true, 0.0);
    let denom = h1_energy(g.torus, g.slab, u);
    if denom <= 0.0 {
        return Err(SimError::ZeroField("korn_ratio"));
    }
    Ok(num / denom)
}

/// The viscous dissipation form <<u, u>> itself (used by the energy identity).
pub fn dissipation_form(u: &VolumeVector, g: &Geometry, params: &LameParams) -> f64 {
    let rho = VolumeScalar::from_fn(g.torus, g.slab, |_, _, _| 1.0);
    let tables = build_tables(g, &rho);
    let dof = DofMap::coupled(g.slab);
    let op = LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: *params,
        dt: 1.0,
        dof,
        tables,
        blocks: Vec::new(),
        flat: false,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 0.0,
    };
    op.form_energy(u, true, 0.0)
}

/// int rho J |u|^2 with the solver's P1/Gauss quadrature (the energy-identity
/// evaluation must match the discrete forms the step actually used).
pub fn mass_energy(u: &VolumeVector, g: &Geometry, rho: &VolumeScalar) -> f64 {
    let tables = build_tables(g, rho);
    let dof = DofMap::coupled(g.slab);
    let op = LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: LameParams::default(),
        dt: 1.0,
        dof,
        tables,
        blocks: Vec::new(),
        flat: false,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 1.0,
    };
    op.form_energy(u, false, 1.0)
}

/// int J f . u with the solver's quadrature (volume forcing pairing).
pub fn volume_pairing(f: &VolumeVector, u: &VolumeVector, g: &Geometry) -> f64 {
    let rho = VolumeScalar::from_fn(g.torus, g.slab, |_, _, _| 1.0);
    let tables = build_tables(g, &rho);
    let dof = DofMap::coupled(g.slab);
    let op = LameOperator {
        torus: g.torus,
        slab: g.slab,
        params: LameParams::default(),
        dt: 1.0,
        dof,
        tables,
        blocks: Vec::new(),
        flat: false,
        form: FormKind::Viscous,
        normals: [g.normal_plus.clone(), g.normal_minus.clone()],
        mass_scale: 1.0,
    };
    let rhs = op.volume_forcing(f);
    let udof = op.gather(u);
    rhs.iter().zip(udof.iter()).map(|(a, b)| a * b).sum()
}

impl LameOperator {
    /// Restriction of an admissible node field to the dof vector (interface
    /// value taken from the upper layer's trace).
    fn gather(&self, u: &VolumeVector) -> Array4<f64> {
        let mut out = Array4::zeros((3, self.dof.nv, self.torus.n1, self.torus.n2));
        for c in 0..3 {
            for layer in Layer::BOTH {
                // skip the minus-layer interface node; the plus layer fills it
                let top_skip = matches!(layer, Layer::Minus)
                    && matches!(self.dof.kind, SpaceKind::Coupled);
                for node in 0..self.slab.nz(layer) {
                    if top_skip && node == self.slab.nz_minus - 1 {
                        continue;
                    }
                    if let Some(j) = self.dof.index(layer, node) {
                        for i1 in 0..self.torus.n1 {
                            for i2 in 0..self.torus.n2 {
                                out[[c, j, i1, i2]] = u.comps[c].layer(layer)[[i1, i2, node]];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn h1_operator(torus: TorusSpec, slab: SlabSpec, with_blocks: bool) -> LameOperator {
    let dof = DofMap::coupled(slab);
    let geom = |layer: Layer| {
        let nl = 2 * (slab.nz(layer) - 1);
        GeomLevels {
            a: Array3::zeros((torus.n1, torus.n2, nl)),
            b: Array3::zeros((torus.n1, torus.n2, nl)),
            j: Array3::ones((torus.n1, torus.n2, nl)),
            k: Array3::ones((torus.n1, torus.n2, nl)),
        }
    };
    let mk = |layer: Layer| {
        let g = geom(layer);
        LayerTables { rhoj: g.j.clone(), j: g.j.clone(), geom: g }
    };
    let params = LameParams::default();
    let blocks = if with_blocks {
        let profile = [
            vec![1.0; 2 * (slab.nz_plus - 1)],
            vec![1.0; 2 * (slab.nz_minus - 1)],
        ];
        LameOperator::assemble_blocks(torus, slab, &dof, &params, FormKind::H1, 1.0, &profile)
    } else {
        Vec::new()
    };
    let zero_normal = || crate::geometry::SurfaceNormal {
        x: Array2::zeros((torus.n1, torus.n2)),
        y: Array2::zeros((torus.n1, torus.n2)),
        z: Array2::ones((torus.n1, torus.n2)),
    };
    LameOperator {
        torus,
        slab,
        params,
        dt: 1.0,
        dof,
        tables: [mk(Layer::Plus), mk(Layer::Minus)],
        blocks,
        flat: true,
        form: FormKind::H1,
        normals: [zero_normal(), zero_normal()],
        mass_scale: 1.0,
    }
}

/// Discrete H1 energy int |u|^2 + |grad u|^2 over Omega (P1/spectral form).
pub fn h1_energy(torus: TorusSpec, slab: SlabSpec, u: &VolumeVector) -> f64 {
    let op = h1_operator(torus, slab, false);
    op.form_energy(u, true, 1.0)
}

/// Riesz representative of the functional v -> int F . v on the discrete
/// constrained space with the H1 inner product; returns (w, ||w||_H1).
pub fn h1_riesz(torus: TorusSpec, slab: SlabSpec, f: &VolumeVector) -> Result<(VolumeVector, f64)> {
    let op = h1_operator(torus, slab, true);
    let rhs = op.volume_forcing(f);
    let (x, _) = op.pcg(&rhs)?;
    let norm_sq: f64 = x.iter().zip(rhs.iter()).map(|(a, b)| a * b).sum();
    Ok((op.dof.scatter(torus, &x, None), norm_sq.max(0.0).sqrt()))
}

/// L2(rho J) norm squared with this operator's density and geometry (the
/// contraction metric of the unforced step).
pub fn weighted_l2_sq(op: &LameOperator, u: &VolumeVector) -> f64 {
    op.form_energy(u, false, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Side, SurfaceField};
    use crate::geometry::{build_geometry, BumpProfiles, Extensions, JACOBIAN_FLOOR};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn flat_geometry(torus: TorusSpec, slab: SlabSpec) -> Geometry {
        let ext = Extensions::new(torus, slab, 6).unwrap();
        let bumps = BumpProfiles::new(&slab);
        build_geometry(&SurfacePair::zeros(torus), &ext, &bumps, JACOBIAN_FLOOR).unwrap()
    }

    fn wavy_geometry(torus: TorusSpec, slab: SlabSpec, amp: f64) -> Geometry {
        let ext = Extensions::new(torus, slab, 6).unwrap();
        let bumps = BumpProfiles::new(&slab);
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| amp * (x / torus.l1).sin()),
            minus: SurfaceField::from_fn(torus, Side::Minus, |x, y| {
                0.5 * amp * ((x / torus.l1).cos() + (y / torus.l2).sin())
            }),
        };
        build_geometry(&eta, &ext, &bumps, JACOBIAN_FLOOR).unwrap()
    }

    /// random admissible field: continuous across the interface, zero at bottom
    fn random_admissible(torus: TorusSpec, slab: SlabSpec, seed: u64) -> VolumeVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = VolumeVector::zeros(torus, slab);
        for c in 0..3 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let bcoef: f64 = rng.gen_range(-1.0..1.0);
            let ccoef: f64 = rng.gen_range(-1.0..1.0);
            let m1: f64 = rng.gen_range(0..3) as f64;
            let m2: f64 = rng.gen_range(0..3) as f64;
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            out.comps[c] = VolumeScalar::from_fn(torus, slab, |x, y, z| {
                let horiz = (m1 * x / torus.l1 + m2 * y / torus.l2 + ph).cos();
                let vert = (z + slab.b) * (a + bcoef * z + ccoef * z * z);
                horiz * vert
            });
        }
        out
    }

    fn params() -> LameParams {
        LameParams {
            mu_plus: 1.0,
            mu_minus: 2.0,
            mu_prime_plus: 0.3,
            mu_prime_minus: 0.1,
            rho_lo: 0.0,
            rho_hi: 100.0,
            ..LameParams::default()
        }
    }

    #[test]
    fn homogeneous_problem_stays_zero() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let g = flat_geometry(torus, slab);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
        let op = assemble_lame(&g, &rho, 0.1, &params()).unwrap();
        let zero = VolumeVector::zeros(torus, slab);
        let tr = TractionData::zero(torus);
        let (u, iters) = solve_lame_step(&op, &zero, &zero, &tr).unwrap();
        assert!(u.max_abs() < 1e-14);
        assert_eq!(iters, 0);
    }

    #[test]
    fn flat_geometry_decouples_per_mode() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 7, 7).unwrap();
        let g = flat_geometry(torus, slab);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
        let op = assemble_lame(&g, &rho, 0.25, &params()).unwrap();
        assert!(op.flat);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = Array4::zeros((3, op.dof.nv, torus.n1, torus.n2));
        for v in b.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (x, iters) = op.pcg(&b).unwrap();
        assert!(iters <= 2, "CG iterations {iters} at flat geometry");
        let r = op.apply_dof(&x) - &b;
        let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn <= 1e-9 * bn, "residual {:.2e}", rn / bn);
    }

    #[test]
    fn operator_is_symmetric_and_positive_definite() {
        let torus = TorusSpec::new(1.0, 1.0, 4, 4).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 6, 6).unwrap();
        let g = wavy_geometry(torus, slab, 0.02);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
        let op = assemble_lame(&g, &rho, 1e6, &params()).unwrap();
        let nv = op.dof.nv;
        let dim = 3 * nv * torus.n1 * torus.n2;
        let unflatten = |ix: usize| {
            let c = ix / (nv * torus.n1 * torus.n2);
            let r = ix % (nv * torus.n1 * torus.n2);
            let j = r / (torus.n1 * torus.n2);
            let r2 = r % (torus.n1 * torus.n2);
            (c, j, r2 / torus.n2, r2 % torus.n2)
        };
        let mut dense = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut basis = Array4::zeros((3, nv, torus.n1, torus.n2));
        for col in 0..dim {
            let idx = unflatten(col);
            basis[idx] = 1.0;
            let img = op.apply_dof(&basis);
            basis[idx] = 0.0;
            for row in 0..dim {
                dense[(row, col)] = img[unflatten(row)];
            }
        }
        let mut asym = 0.0f64;
        for i in 0..dim {
            for j in 0..i {
                asym = asym.max((dense[(i, j)] - dense[(j, i)]).abs());
            }
        }
        assert!(asym <= 1e-12 * dense.amax(), "asymmetry {asym:.2e}");
        let sym = nalgebra::DMatrix::from_fn(dim, dim, |i, j| {
            0.5 * (dense[(i, j)] + dense[(j, i)])
        });
        let eig = sym.symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_eig > 0.0, "smallest constrained eigenvalue {min_eig:.3e}");
    }

    #[test]
    fn korn_ratio_positive_on_random_admissible_fields() {
        let torus = TorusSpec::new(1.0, 1.0, 4, 4).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 6, 6).unwrap();
        let g = wavy_geometry(torus, slab, 0.02);
        let mut worst = f64::INFINITY;
        for seed in 0..100 {
            let u = random_admissible(torus, slab, seed);
            let r = korn_ratio(&u, &g, &params()).unwrap();
            assert!(r > 0.0);
            worst = worst.min(r);
        }
        assert!(worst > 1e-3, "Korn ratio lower bound {worst:.3e}");
    }

    /// manufactured smooth solution on flat geometry with a mu jump
    struct Mms {
        torus: TorusSpec,
        slab: SlabSpec,
        p: LameParams,
    }

    impl Mms {
        fn w(&self, z: f64) -> f64 {
            let s = z + self.slab.b;
            (1.3 * s).sin() * s
        }
        fn wp(&self, z: f64) -> f64 {
            let s = z + self.slab.b;
            1.3 * (1.3 * s).cos() * s + (1.3 * s).sin()
        }
        fn wpp(&self, z: f64) -> f64 {
            let s = z + self.slab.b;
            -1.69 * (1.3 * s).sin() * s + 2.6 * (1.3 * s).cos()
        }
        fn tfun(&self, t: f64) -> f64 {
            1.0 + t * t
        }
        fn tdot(&self, t: f64) -> f64 {
            2.0 * t
        }
        /// u = T(t) [ w(z) cos(k x), 0, w(z) sin(k x) ]
        fn u(&self, t: f64) -> VolumeVector {
            let k = 1.0 / self.torus.l1;
            let tt = self.tfun(t);
            let w = |z: f64| self.w(z);
            VolumeVector {
                comps: [
                    VolumeScalar::from_fn(self.torus, self.slab, |x, _, z| {
                        tt * w(z) * (k * x).cos()
                    }),
                    VolumeScalar::zeros(self.torus, self.slab),
                    VolumeScalar::from_fn(self.torus, self.slab, |x, _, z| {
                        tt * w(z) * (k * x).sin()
                    }),
                ],
            }
        }
        /// F1 = rho dt u - div S(u) with rho = 1
        fn f1(&self, t: f64) -> VolumeVector {
            let k = 1.0 / self.torus.l1;
            let tt = self.tfun(t);
            let td = self.tdot(t);
            let mu_p = self.p.mu_plus;
            let mu_m = self.p.mu_minus;
            let mup_p = self.p.mu_prime_plus;
            let mup_m = self.p.mu_prime_minus;
            VolumeVector {
                comps: [
                    VolumeScalar::from_layer_fn(self.torus, self.slab, |layer, x, _, z| {
                        let (mu, mup) = match layer {
                            Layer::Plus => (mu_p, mup_p),
                            Layer::Minus => (mu_m, mup_m),
                        };
                        let c = (k * x).cos();
                        let visc = mu * (-k * k * self.w(z) + self.wpp(z)) * c
                            + (mu / 3.0 + mup) * k * (self.wp(z) - k * self.w(z)) * c;
                        td * self.w(z) * c - tt * visc
                    }),
                    VolumeScalar::zeros(self.torus, self.slab),
                    VolumeScalar::from_layer_fn(self.torus, self.slab, |layer, x, _, z| {
                        let (mu, mup) = match layer {
                            Layer::Plus => (mu_p, mup_p),
                            Layer::Minus => (mu_m, mup_m),
                        };
                        let s = (k * x).sin();
                        let visc = mu * (-k * k * self.w(z) + self.wpp(z)) * s
                            + (mu / 3.0 + mup) * (self.wpp(z) - k * self.wp(z)) * s;
                        td * self.w(z) * s - tt * visc
                    }),
                ],
            }
        }
        /// tractions: F2_+ = -S u e3 at ell, F2_- = [[S u]] e3 at 0
        fn tractions(&self, t: f64) -> TractionData {
            let k = 1.0 / self.torus.l1;
            let tt = self.tfun(t);
            let stress = |mu: f64, mup: f64, z: f64, x: f64| -> [f64; 3] {
                let w = self.w(z);
                let wp = self.wp(z);
                let div = (wp - k * w) * (k * x).sin();
                let d13 = k * w * (k * x).cos() + wp * (k * x).cos();
                let d33 = 2.0 * wp * (k * x).sin();
                [
                    tt * mu * d13,
                    0.0,
                    tt * (mu * (d33 - 2.0 / 3.0 * div) + mup * div),
                ]
            };
            let (n1, n2) = (self.torus.n1, self.torus.n2);
            let mut f2p = [
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
            ];
            let mut f2m = [
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
            ];
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let x = self.torus.x1(i1);
                    let sp = stress(self.p.mu_plus, self.p.mu_prime_plus, self.slab.ell, x);
                    let s0p = stress(self.p.mu_plus, self.p.mu_prime_plus, 0.0, x);
                    let s0m = stress(self.p.mu_minus, self.p.mu_prime_minus, 0.0, x);
                    for c in 0..3 {
                        f2p[c][[i1, i2]] = -sp[c];
                        f2m[c][[i1, i2]] = s0p[c] - s0m[c];
                    }
                }
            }
            TractionData {
                f2_plus: f2p,
                f2_minus: f2m,
                sigma_plus: 0.0,
                sigma_minus: 0.0,
                eta: SurfacePair::zeros(self.torus),
            }
        }
    }

    fn step_error(nz: usize, dt: f64, t_end: f64) -> f64 {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, nz, nz).unwrap();
        let p = params();
        let mms = Mms { torus, slab, p };
        let g = flat_geometry(torus, slab);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
        let op = assemble_lame(&g, &rho, dt, &p).unwrap();
        let mut u = mms.u(0.0);
        let nsteps = (t_end / dt).round() as usize;
        for n in 0..nsteps {
            let t_next = (n + 1) as f64 * dt;
            let f1 = mms.f1(t_next);
            let tr = mms.tractions(t_next);
            u = solve_lame_step(&op, &u, &f1, &tr).unwrap().0;
        }
        let exact = mms.u(t_end);
        u.sub(&exact).max_abs() / exact.max_abs()
    }

    #[test]
    fn manufactured_step_first_order_in_time() {
        let e1 = step_error(33, 0.1, 0.4);
        let e2 = step_error(33, 0.05, 0.4);
        let order = (e1 / e2).log2();
        assert!(
            order >= 0.9,
            "temporal order {order:.3} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    fn dirichlet_error(nz: usize) -> f64 {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, nz, nz).unwrap();
        let p = params();
        let mms = Mms { torus, slab, p };
        let g = flat_geometry(torus, slab);
        let exact = mms.u(0.0);
        let f1 = mms.f1(0.0); // td = 0 at t = 0, so this is -div S u
        let k = 1.0 / torus.l1;
        let h_at = |z: f64| {
            let (n1, n2) = (torus.n1, torus.n2);
            let mut h = [
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
                Array2::zeros((n1, n2)),
            ];
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let x = torus.x1(i1);
                    h[0][[i1, i2]] = mms.w(z) * (k * x).cos();
                    h[2][[i1, i2]] = mms.w(z) * (k * x).sin();
                }
            }
            h
        };
        let sol = solve_lame_dirichlet(&g, &f1, &h_at(slab.ell), &h_at(0.0), &p).unwrap();
        sol.sub(&exact).max_abs() / exact.max_abs()
    }

    #[test]
    fn dirichlet_second_order_in_space() {
        let e1 = dirichlet_error(9);
        let e2 = dirichlet_error(17);
        let order = (e1 / e2).log2();
        assert!(
            order >= 1.9,
            "spatial order {order:.3} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn dirichlet_zero_data_gives_zero() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let g = flat_geometry(torus, slab);
        let zero = VolumeVector::zeros(torus, slab);
        let zh = [
            Array2::zeros((torus.n1, torus.n2)),
            Array2::zeros((torus.n1, torus.n2)),
            Array2::zeros((torus.n1, torus.n2)),
        ];
        let sol = solve_lame_dirichlet(&g, &zero, &zh, &zh, &params()).unwrap();
        assert!(sol.max_abs() < 1e-13);
    }

    #[test]
    fn dirichlet_h1_bound_stable_under_refinement() {
        let mut consts = Vec::new();
        for nz in [9usize, 17] {
            let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
            let slab = SlabSpec::new(1.0, 1.0, nz, nz).unwrap();
            let p = params();
            let mms = Mms { torus, slab, p };
            let g = flat_geometry(torus, slab);
            let f1 = mms.f1(0.0);
            let k = 1.0 / torus.l1;
            let h_at = |z: f64| {
                let (n1, n2) = (torus.n1, torus.n2);
                let mut h = [
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                    Array2::zeros((n1, n2)),
                ];
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        let x = torus.x1(i1);
                        h[0][[i1, i2]] = mms.w(z) * (k * x).cos();
                        h[2][[i1, i2]] = mms.w(z) * (k * x).sin();
                    }
                }
                h
            };
            let sol = solve_lame_dirichlet(&g, &f1, &h_at(slab.ell), &h_at(0.0), &p).unwrap();
            let h1 = h1_energy(torus, slab, &sol).sqrt();
            let data = f1.comps.iter().map(|c| c.l2_sq()).sum::<f64>().sqrt()
                + mms.w(slab.ell).abs()
                + mms.w(0.0).abs();
            consts.push(h1 / data);
        }
        let ratio = consts[1] / consts[0];
        assert!(ratio < 1.5 && ratio > 0.5, "constant drifted: {consts:?}");
    }

    #[test]
    fn unforced_step_contracts_weighted_l2() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let g = wavy_geometry(torus, slab, 0.03);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, z| 1.0 + 0.1 * z);
        let op = assemble_lame(&g, &rho, 0.05, &params()).unwrap();
        let tr = TractionData::zero(torus);
        let zero = VolumeVector::zeros(torus, slab);
        for seed in 0..5 {
            let u0 = random_admissible(torus, slab, 100 + seed);
            let (u1, _) = solve_lame_step(&op, &u0, &zero, &tr).unwrap();
            let n0 = weighted_l2_sq(&op, &u0);
            let n1 = weighted_l2_sq(&op, &u1);
            assert!(n1 <= n0 * (1.0 + 1e-12), "grew: {n1:.6e} > {n0:.6e}");
        }
    }

    #[test]
    fn korn_ratio_rejects_zero_field() {
        let torus = TorusSpec::new(1.0, 1.0, 4, 4).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 6, 6).unwrap();
        let g = flat_geometry(torus, slab);
        let zero = VolumeVector::zeros(torus, slab);
        assert!(matches!(
            korn_ratio(&zero, &g, &params()),
            Err(SimError::ZeroField(_))
        ));
    }

    #[test]
    fn korn_ratio_stable_under_refinement() {
        let torus = TorusSpec::new(1.0, 1.0, 4, 4).unwrap();
        let mut mins = Vec::new();
        for nz in [7usize, 13] {
            let slab = SlabSpec::new(1.0, 1.0, nz, nz).unwrap();
            let g = flat_geometry(torus, slab);
            let mut min_r = f64::INFINITY;
            for seed in 0..100 {
                let u = random_admissible(torus, slab, seed);
                min_r = min_r.min(korn_ratio(&u, &g, &params()).unwrap());
            }
            mins.push(min_r);
        }
        assert!(mins[0] > 0.0 && mins[1] > 0.0);
        let rel = (mins[1] - mins[0]).abs() / mins[0];
        assert!(rel <= 0.2, "Korn floor moved by {rel:.3}: {mins:?}");
    }

    #[test]
    fn rejects_bad_density() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let g = flat_geometry(torus, slab);
        let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
        let mut p = params();
        p.rho_lo = 2.0;
        p.rho_hi = 3.0;
        assert!(matches!(
            assemble_lame(&g, &rho, 0.1, &p),
            Err(SimError::DensityOutOfRange { .. })
        ));
    }

    #[test]
    fn h1_riesz_duality_bound() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let slab = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let f = random_admissible(torus, slab, 42);
        let (w, norm) = h1_riesz(torus, slab, &f).unwrap();
        assert!(norm > 0.0);
        for seed in 0..10 {
            let v = random_admissible(torus, slab, 500 + seed);
            let pairing: f64 = (0..3)
                .map(|c| f.comps[c].mul(&v.comps[c]).integral())
                .sum();
            let vh1 = h1_energy(torus, slab, &v).sqrt();
            assert!(pairing.abs() <= norm * vh1 * 1.05);
        }
        // equality at v = w, up to the P1-vs-trapezoid quadrature gap in the pairing
        let pairing_w: f64 = (0..3)
            .map(|c| f.comps[c].mul(&w.comps[c]).integral())
            .sum();
        let wh1 = h1_energy(torus, slab, &w).sqrt();
        assert!(pairing_w.abs() >= 0.9 * norm * wh1);
        // scaling: dual norm is 1-homogeneous
        let (_, norm2) = h1_riesz(torus, slab, &f.scale(3.0)).unwrap();
        assert_abs_diff_eq!(norm2, 3.0 * norm, epsilon = 1e-8 * norm);
        let (_, nz) = h1_riesz(torus, slab, &VolumeVector::zeros(torus, slab)).unwrap();
        assert!(nz < 1e-12);
    }
}
