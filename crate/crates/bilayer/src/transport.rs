//! The density-perturbation transport problem
//!
//!   dt q + v . grad q + c q = f,   v = A^T u - K dt(theta) e3,  c = div_A u,
//!
//! solved by back-traced characteristics
//!
//!   q(x,t) = q0(w(0,t,x)) e^{-int_0^t c} + int_0^t f(w(s,t,x),s) e^{-int_s^t c} ds,
//!
//! with a mollified Eulerian solver on a vertically extended domain as an
//! independent cross-validation oracle.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::equilibrium::EquilibriumProfile;
use crate::error::{Result, SimError};
use crate::fields::{Layer, SlabSpec, VolumeScalar, VolumeVector};
use crate::geometry::Geometry;
use crate::spectral::{self, TorusSpec};

/// Default pre-projection tolerance on |v . e3| at boundary nodes.
pub const BOUNDARY_TOL: f64 = 1e-8;

/// Clamp threshold for characteristics leaving the layer by round-off.
const ESCAPE_CLAMP: f64 = 1e-8;

/// Transport coefficients of one time level.
#[derive(Debug, Clone)]
pub struct TransportCoefficients {
    pub v: VolumeVector,
    pub c: VolumeScalar,
    pub f: VolumeScalar,
}

/// div_A X = d1 X1 + d2 X2 + K (d3 X3 - A d3 X1 - B d3 X2).
pub fn div_a(g: &Geometry, x: &VolumeVector) -> VolumeScalar {
    let d1 = x.comps[0].horizontal_derivative(0);
    let d2 = x.comps[1].horizontal_derivative(1);
    let dz1 = x.comps[0].vertical_derivative();
    let dz2 = x.comps[1].vertical_derivative();
    let dz3 = x.comps[2].vertical_derivative();
    let mut out = d1.add(&d2);
    let corr = dz3
        .sub(&g.a_coef.mul(&dz1))
        .sub(&g.b_coef.mul(&dz2))
        .mul(&g.k_coef);
    out = out.add(&corr);
    out
}

/// grad_A f = (d1 f - A K d3 f, d2 f - B K d3 f, K d3 f).
pub fn grad_a(g: &Geometry, f: &VolumeScalar) -> VolumeVector {
    let d1 = f.horizontal_derivative(0);
    let d2 = f.horizontal_derivative(1);
    let d3 = f.vertical_derivative();
    let kd3 = g.k_coef.mul(&d3);
    VolumeVector {
        comps: [
            d1.sub(&g.a_coef.mul(&kd3)),
            d2.sub(&g.b_coef.mul(&kd3)),
            kd3,
        ],
    }
}

/// Assemble (v, c, f) from the velocity, geometry, equilibrium profile and
/// dt(theta).  After the pre-projection tangency check, v . e3 is hard-set to
/// zero at every boundary node.
pub fn build_transport_coefficients(
    u: &VolumeVector,
    g: &Geometry,
    eq: &EquilibriumProfile,
    dtheta_dt: &VolumeScalar,
    boundary_tol: f64,
) -> Result<TransportCoefficients> {
    let torus = g.torus;
    let slab = g.slab;
    // v = A^T u - K dt(theta) e3
    let v3 = u.comps[2]
        .sub(&g.a_coef.mul(&u.comps[0]))
        .sub(&g.b_coef.mul(&u.comps[1]))
        .sub(dtheta_dt)
        .mul(&g.k_coef);
    let mut v = VolumeVector {
        comps: [u.comps[0].clone(), u.comps[1].clone(), v3],
    };
    // tangency check before projection
    let nzp = slab.nz_plus;
    let nzm = slab.nz_minus;
    let mut leaks = [(0.0f64, "Sigma_+"), (0.0, "Sigma_-"), (0.0, "Sigma_b")];
    for i1 in 0..torus.n1 {
        for i2 in 0..torus.n2 {
            leaks[0].0 = leaks[0].0.max(v.comps[2].plus[[i1, i2, nzp - 1]].abs());
            leaks[1].0 = leaks[1]
                .0
                .max(v.comps[2].plus[[i1, i2, 0]].abs())
                .max(v.comps[2].minus[[i1, i2, nzm - 1]].abs());
            leaks[2].0 = leaks[2].0.max(v.comps[2].minus[[i1, i2, 0]].abs());
        }
    }
    for (leak, location) in leaks {
        if leak > boundary_tol {
            return Err(SimError::BoundaryLeak { leak, tol: boundary_tol, location });
        }
    }
    for i1 in 0..torus.n1 {
        for i2 in 0..torus.n2 {
            v.comps[2].plus[[i1, i2, nzp - 1]] = 0.0;
            v.comps[2].plus[[i1, i2, 0]] = 0.0;
            v.comps[2].minus[[i1, i2, nzm - 1]] = 0.0;
            v.comps[2].minus[[i1, i2, 0]] = 0.0;
        }
    }
    let c = div_a(g, u);
    // f = -div_A(rhobar u) + K dt(theta) d3^2 rhobar theta - div_A(d3 rhobar theta u)
    let rho_bar = eq.rho_field(torus);
    let d_rho = eq.d_rho_field(torus);
    let d2_rho = eq.d2_rho_field(torus);
    let mk_vec = |s: &VolumeScalar| VolumeVector {
        comps: [
            s.mul(&u.comps[0]),
            s.mul(&u.comps[1]),
            s.mul(&u.comps[2]),
        ],
    };
    let term1 = div_a(g, &mk_vec(&rho_bar)).scale(-1.0);
    let term2 = g
        .k_coef
        .mul(dtheta_dt)
        .mul(&d2_rho)
        .mul(&g.theta);
    let term3 = div_a(g, &mk_vec(&d_rho.mul(&g.theta))).scale(-1.0);
    let f = term1.add(&term2).add(&term3);
    Ok(TransportCoefficients { v, c, f })
}

/// Coefficient snapshots at the stepper's time levels (linear in time
/// between them).
pub struct CoeffHistory {
    pub times: Vec<f64>,
    pub snaps: Vec<TransportCoefficients>,
}

impl CoeffHistory {
    pub fn new() -> Self {
        CoeffHistory { times: Vec::new(), snaps: Vec::new() }
    }

    pub fn push(&mut self, t: f64, c: TransportCoefficients) {
        self.times.push(t);
        self.snaps.push(c);
    }

    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (0, 0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let mut k = 0;
        while self.times[k + 1] < t {
            k += 1;
        }
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        (k, k + 1, w)
    }
}

impl Default for CoeffHistory {
    fn default() -> Self {
        Self::new()
    }
}

fn cubic_weights(t: f64) -> [f64; 4] {
    let mut w = [0.0; 4];
    for (a, wa) in w.iter_mut().enumerate() {
        let mut p = 1.0;
        for b in 0..4 {
            if a != b {
                p *= (t - b as f64) / (a as f64 - b as f64);
            }
        }
        *wa = p;
    }
    w
}

/// Tricubic Lagrange interpolation: periodic horizontally, shifted stencil
/// vertically; the clipped variant clamps to the surrounding cell's corner
/// range (monotone, for fields feeding the density).
pub fn interp_scalar(
    arr: &Array3<f64>,
    torus: TorusSpec,
    slab: SlabSpec,
    layer: Layer,
    x: [f64; 3],
    clipped: bool,
) -> f64 {
    let (n1, n2, nz) = arr.dim();
    let s1 = x[0] / torus.dx1();
    let s2 = x[1] / torus.dx2();
    let z0 = match layer {
        Layer::Plus => 0.0,
        Layer::Minus => -slab.b,
    };
    let s3 = ((x[2] - z0) / slab.h(layer)).clamp(0.0, (nz - 1) as f64);
    let i1 = s1.floor() as i64;
    let i2 = s2.floor() as i64;
    let i3 = (s3.floor() as usize).min(nz - 2);
    let base3 = i3.saturating_sub(1).min(nz - 4);
    let w1 = cubic_weights(s1 - (i1 - 1) as f64);
    let w2 = cubic_weights(s2 - (i2 - 1) as f64);
    let w3 = cubic_weights(s3 - base3 as f64);
    let wrap = |i: i64, n: usize| -> usize { i.rem_euclid(n as i64) as usize };
    let mut acc = 0.0;
    for a in 0..4 {
        let ia = wrap(i1 - 1 + a as i64, n1);
        for b in 0..4 {
            let ib = wrap(i2 - 1 + b as i64, n2);
            let wab = w1[a] * w2[b];
            for c in 0..4 {
                acc += wab * w3[c] * arr[[ia, ib, base3 + c]];
            }
        }
    }
    if clipped {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in 0..2 {
            let ia = wrap(i1 + a, n1);
            for b in 0..2 {
                let ib = wrap(i2 + b, n2);
                for c in 0..2 {
                    let val = arr[[ia, ib, i3 + c]];
                    lo = lo.min(val);
                    hi = hi.max(val);
                }
            }
        }
        acc = acc.clamp(lo, hi);
    }
    acc
}

fn layer_bounds(slab: SlabSpec, layer: Layer) -> (f64, f64) {
    match layer {
        Layer::Plus => (0.0, slab.ell),
        Layer::Minus => (-slab.b, 0.0),
    }
}

/// v at an off-grid point, linear in time between the bracketing snapshots.
fn velocity_at(
    hist: &CoeffHistory,
    torus: TorusSpec,
    slab: SlabSpec,
    layer: Layer,
    x: [f64; 3],
    t: f64,
) -> [f64; 3] {
    let (k0, k1, w) = hist.bracket(t);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let a = interp_scalar(hist.snaps[k0].v.comps[c].layer(layer), torus, slab, layer, x, false);
        let b = if k1 == k0 {
            a
        } else {
            interp_scalar(hist.snaps[k1].v.comps[c].layer(layer), torus, slab, layer, x, false)
        };
        out[c] = (1.0 - w) * a + w * b;
    }
    out
}

/// Back-trace w(s, t, x) through the coefficient history by RK4 with
/// linear-in-time velocity interpolation.  The returned point stays in the
/// closed layer of x (clamped if round-off exits by less than the threshold).
pub fn trace_characteristics(
    hist: &CoeffHistory,
    torus: TorusSpec,
    slab: SlabSpec,
    layer: Layer,
    x: [f64; 3],
    t: f64,
    s: f64,
) -> Result<[f64; 3]> {
    let (zmin, zmax) = layer_bounds(slab, layer);
    let mut pos = x;
    let n_steps = {
        // one RK4 step per history interval crossed, at least one
        let span = (t - s).abs();
        let dt_hist = if hist.times.len() > 1 {
            (hist.times[1] - hist.times[0]).abs()
        } else {
            span.max(1e-12)
        };
        ((span / dt_hist).ceil() as usize).max(1)
    };
    let dtau = (s - t) / n_steps as f64;
    let mut tau = t;
    for _ in 0..n_steps {
        let k1 = velocity_at(hist, torus, slab, layer, pos, tau);
        let mid1 = advect(pos, k1, 0.5 * dtau);
        let k2 = velocity_at(hist, torus, slab, layer, mid1, tau + 0.5 * dtau);
        let mid2 = advect(pos, k2, 0.5 * dtau);
        let k3 = velocity_at(hist, torus, slab, layer, mid2, tau + 0.5 * dtau);
        let end = advect(pos, k3, dtau);
        let k4 = velocity_at(hist, torus, slab, layer, end, tau + dtau);
        for c in 0..3 {
            pos[c] += dtau / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        tau += dtau;
        if pos[2] < zmin - ESCAPE_CLAMP || pos[2] > zmax + ESCAPE_CLAMP {
            let excess = (zmin - pos[2]).max(pos[2] - zmax);
            return Err(SimError::EscapedDomain { excess });
        }
        pos[2] = pos[2].clamp(zmin, zmax);
    }
    Ok(pos)
}

fn advect(x: [f64; 3], v: [f64; 3], dt: f64) -> [f64; 3] {
    [x[0] + dt * v[0], x[1] + dt * v[1], x[2] + dt * v[2]]
}

/// Semi-Lagrangian solve of the transport problem at the newest history time,
/// integrating the decay and source terms by trapezoid along each back-traced
/// path.  `clipped` selects the monotone interpolation of q0.
pub fn solve_transport(
    q0: &VolumeScalar,
    hist: &CoeffHistory,
    t: f64,
    clipped: bool,
) -> Result<VolumeScalar> {
    let torus = q0.torus;
    let slab = q0.slab;
    // snapshot times within [t0, t]
    let t0 = hist.times[0];
    let mut times: Vec<f64> = hist.times.iter().cloned().filter(|&tt| tt <= t + 1e-14).collect();
    if (times.last().copied().unwrap_or(t0) - t).abs() > 1e-14 {
        times.push(t);
    }
    let m = times.len() - 1;
    let mut out = VolumeScalar::zeros(torus, slab);
    for layer in Layer::BOTH {
        let nz = slab.nz(layer);
        let (n1, n2) = (torus.n1, torus.n2);
        let results: Vec<f64> = (0..n1 * n2 * nz)
            .into_par_iter()
            .map(|flat| {
                let i1 = flat / (n2 * nz);
                let i2 = (flat / nz) % n2;
                let k = flat % nz;
                let x = [torus.x1(i1), torus.x2(i2), slab.z(layer, k)];
                // positions along the path at each snapshot time
                let mut pos = vec![x; m + 1];
                for j in (0..m).rev() {
                    pos[j] =
                        trace_characteristics(hist, torus, slab, layer, pos[j + 1], times[j + 1], times[j])?;
                }
                // c and f along the path
                let mut cs = vec![0.0; m + 1];
                let mut fs = vec![0.0; m + 1];
                for j in 0..=m {
                    let (k0, k1, w) = hist.bracket(times[j]);
                    let cv = |snap: &TransportCoefficients, x: [f64; 3]| {
                        interp_scalar(snap.c.layer(layer), torus, slab, layer, x, false)
                    };
                    let fv = |snap: &TransportCoefficients, x: [f64; 3]| {
                        interp_scalar(snap.f.layer(layer), torus, slab, layer, x, false)
                    };
                    cs[j] = (1.0 - w) * cv(&hist.snaps[k0], pos[j])
                        + w * cv(&hist.snaps[k1], pos[j]);
                    fs[j] = (1.0 - w) * fv(&hist.snaps[k0], pos[j])
                        + w * fv(&hist.snaps[k1], pos[j]);
                }
                // I_c[j] = int_{times[j]}^{t} c along the path (trapezoid)
                let mut ic = vec![0.0; m + 1];
                for j in (0..m).rev() {
                    let h = times[j + 1] - times[j];
                    ic[j] = ic[j + 1] + 0.5 * h * (cs[j] + cs[j + 1]);
                }
                let mut q = interp_scalar(q0.layer(layer), torus, slab, layer, pos[0], clipped)
                    * (-ic[0]).exp();
                for j in 0..=m {
                    let w = if m == 0 {
                        0.0
                    } else if j == 0 {
                        0.5 * (times[1] - times[0])
                    } else if j == m {
                        0.5 * (times[m] - times[m - 1])
                    } else {
                        0.5 * (times[j + 1] - times[j - 1])
                    };
                    q += w * fs[j] * (-ic[j]).exp();
                }
                Ok(q)
            })
            .collect::<Result<Vec<f64>>>()?;
        let arr = out.layer_mut(layer);
        for (flat, val) in results.into_iter().enumerate() {
            let i1 = flat / (n2 * nz);
            let i2 = (flat / nz) % n2;
            let k = flat % nz;
            arr[[i1, i2, k]] = val;
        }
    }
    Ok(out)
}

/// One layer's box extension for the mollified reference solver.
struct ExtendedLayer {
    npad: usize,
    nz_box: usize,
    h: f64,
}

fn extend_to_box(arr: &Array3<f64>, npad: usize) -> Array3<f64> {
    let (n1, n2, nz) = arr.dim();
    let nz_box = nz + 2 * npad;
    let mut out = Array3::zeros((n1, n2, nz_box));
    // constant continuation over the inner half of the pad (so the mollifier
    // sees unmodified values at the layer boundary), smoothstep to the
    // homogeneous far field over the outer half
    let half = npad / 2;
    let taper = |d: usize| -> f64 {
        if d <= half {
            1.0
        } else {
            let s = (npad - d) as f64 / (npad - half) as f64;
            s * s * (3.0 - 2.0 * s)
        }
    };
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for k in 0..nz {
                out[[i1, i2, npad + k]] = arr[[i1, i2, k]];
            }
            for d in 1..=npad {
                out[[i1, i2, npad - d]] = arr[[i1, i2, 0]] * taper(d);
                out[[i1, i2, npad + nz - 1 + d]] = arr[[i1, i2, nz - 1]] * taper(d);
            }
        }
    }
    out
}

/// Horizontal spectral truncation (idempotent analogue of the Fejer-kernel
/// mollification) plus vertical triangular smoothing of half-width `wv`.
fn mollify(torus: TorusSpec, arr: &Array3<f64>, wv: usize) -> Array3<f64> {
    let (n1, n2, nz) = arr.dim();
    let mut out = Array3::zeros((n1, n2, nz));
    // horizontal truncation per level: zero modes with |m| > n/3
    for k in 0..nz {
        let lvl = Array2::from_shape_fn((n1, n2), |(i, j)| arr[[i, j, k]]);
        let mut coeffs = spectral::grid_to_coeffs(&lvl);
        for k1 in 0..n1 {
            for k2 in 0..n2 {
                let m1 = TorusSpec::wavenumber(k1, n1).unsigned_abs() as usize;
                let m2 = TorusSpec::wavenumber(k2, n2).unsigned_abs() as usize;
                if m1 > n1 / 3 || m2 > n2 / 3 {
                    coeffs[[k1, k2]] = num_complex::Complex64::new(0.0, 0.0);
                }
            }
        }
        let sm = spectral::coeffs_to_grid(&coeffs);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                out[[i1, i2, k]] = sm[[i1, i2]];
            }
        }
    }
    if wv == 0 {
        return out;
    }
    // vertical triangular kernel, truncated and renormalized at the ends
    let mut sm = Array3::zeros((n1, n2, nz));
    for k in 0..nz {
        let lo = k.saturating_sub(wv);
        let hi = (k + wv).min(nz - 1);
        let mut norm = 0.0;
        for j in lo..=hi {
            let d = (j as i64 - k as i64).unsigned_abs() as usize;
            norm += (wv + 1 - d) as f64;
        }
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let mut acc = 0.0;
                for j in lo..=hi {
                    let d = (j as i64 - k as i64).unsigned_abs() as usize;
                    acc += (wv + 1 - d) as f64 * out[[i1, i2, j]];
                }
                sm[[i1, i2, k]] = acc / norm;
            }
        }
    }
    sm
}

/// Mollified Eulerian reference solve on the vertically extended box
/// [-pad + layer_min, layer_max + pad] with pad = max(b, ell)/2, advanced by
/// SSP-RK3 with spectral horizontal and upwind vertical differencing of the
/// mollified advection term; the restriction back to the layer is returned.
pub fn mollified_reference_solve(
    q0: &VolumeScalar,
    hist: &CoeffHistory,
    t: f64,
    eps: f64,
) -> Result<VolumeScalar> {
    let torus = q0.torus;
    let slab = q0.slab;
    let mut out = VolumeScalar::zeros(torus, slab);
    for layer in Layer::BOTH {
        let h = slab.h(layer);
        let pad = slab.b.max(slab.ell) / 2.0;
        let npad = (pad / h).ceil() as usize;
        let nz = slab.nz(layer);
        let ext = ExtendedLayer { npad, nz_box: nz + 2 * npad, h };
        // discrete mollifier width in nodes; rounds to the identity when the
        // grid cannot resolve eps
        let wv = (eps / h).round() as usize;
        // extended + mollified coefficient snapshots
        let n_snap = hist.times.len();
        let mut v_ext: Vec<[Array3<f64>; 3]> = Vec::with_capacity(n_snap);
        let mut c_ext: Vec<Array3<f64>> = Vec::with_capacity(n_snap);
        let mut f_ext: Vec<Array3<f64>> = Vec::with_capacity(n_snap);
        for snap in &hist.snaps {
            let mut vcomp: Vec<Array3<f64>> = Vec::with_capacity(3);
            for c in 0..3 {
                let e = extend_to_box(snap.v.comps[c].layer(layer), npad);
                vcomp.push(mollify(torus, &e, wv));
            }
            v_ext.push([vcomp.remove(0), vcomp.remove(0), vcomp.remove(0)]);
            c_ext.push(extend_to_box(snap.c.layer(layer), npad));
            f_ext.push(extend_to_box(snap.f.layer(layer), npad));
        }
        let mut q = extend_to_box(q0.layer(layer), npad);
        // time stepping over history intervals with CFL substeps
        let xi_max = {
            let x1 = (torus.n1 / 2) as f64 / torus.l1;
            let x2 = (torus.n2 / 2) as f64 / torus.l2;
            (x1 * x1 + x2 * x2).sqrt()
        };
        let lerp = |a: &Array3<f64>, b: &Array3<f64>, w: f64| -> Array3<f64> {
            if w == 0.0 {
                a.clone()
            } else {
                a * (1.0 - w) + b * w
            }
        };
        let mut t_now = hist.times[0];
        let mut seg = 0usize;
        while t_now < t - 1e-14 {
            let t_end_seg = if seg + 1 < n_snap { hist.times[seg + 1].min(t) } else { t };
            let span = t_end_seg - t_now;
            let vmaxh = v_ext[seg][0]
                .iter()
                .chain(v_ext[seg][1].iter())
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            let vmax3 = v_ext[seg][2].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let speed = vmaxh * xi_max + vmax3 / ext.h;
            let n_sub = ((span * speed / 0.4).ceil() as usize).max(1);
            if n_sub > 100_000 {
                return Err(SimError::CflViolation { value: span * speed, max: 0.4 * 100_000.0 });
            }
            let dt_sub = span / n_sub as f64;
            for step in 0..n_sub {
                let tau = t_now + step as f64 * dt_sub;
                let seg_hi = (seg + 1).min(n_snap - 1);
                let seg_span = (hist.times[seg_hi] - hist.times[seg]).max(1e-300);
                let rhs = |qf: &Array3<f64>, tt: f64| -> Array3<f64> {
                    let w = ((tt - hist.times[seg]) / seg_span).clamp(0.0, 1.0);
                    let v1 = lerp(&v_ext[seg][0], &v_ext[seg_hi][0], w);
                    let v2 = lerp(&v_ext[seg][1], &v_ext[seg_hi][1], w);
                    let v3 = lerp(&v_ext[seg][2], &v_ext[seg_hi][2], w);
                    let cc = lerp(&c_ext[seg], &c_ext[seg_hi], w);
                    let ff = lerp(&f_ext[seg], &f_ext[seg_hi], w);
                    let qm = mollify(torus, qf, wv);
                    let adv = advection_term(torus, &ext, &qm, &v1, &v2, &v3);
                    let adv_m = mollify(torus, &adv, wv);
                    let mut l = ff;
                    ndarray::Zip::from(&mut l)
                        .and(&adv_m)
                        .and(&cc)
                        .and(qf)
                        .for_each(|l, &a, &c, &q| *l -= a + c * q);
                    l
                };
                // SSP-RK3
                let l0 = rhs(&q, tau);
                let q1 = &q + &(l0 * dt_sub);
                let l1 = rhs(&q1, tau + dt_sub);
                let q2 = &q * 0.75 + &(&q1 + &(l1 * dt_sub)) * 0.25;
                let l2 = rhs(&q2, tau + 0.5 * dt_sub);
                q = &q * (1.0 / 3.0) + &(&q2 + &(l2 * dt_sub)) * (2.0 / 3.0);
            }
            t_now = t_end_seg;
            if seg + 1 < n_snap && t_now >= hist.times[seg + 1] - 1e-14 {
                seg += 1;
            }
        }
        // restrict back to the layer nodes
        let arr = out.layer_mut(layer);
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                for k in 0..nz {
                    arr[[i1, i2, k]] = q[[i1, i2, npad + k]];
                }
            }
        }
    }
    Ok(out)
}

/// v . grad q with spectral horizontal derivatives and first-order upwind
/// vertical differencing.
fn advection_term(
    torus: TorusSpec,
    ext: &ExtendedLayer,
    q: &Array3<f64>,
    v1: &Array3<f64>,
    v2: &Array3<f64>,
    v3: &Array3<f64>,
) -> Array3<f64> {
    let (n1, n2, nz) = q.dim();
    let mut out = Array3::zeros((n1, n2, nz));
    for k in 0..nz {
        let lvl = Array2::from_shape_fn((n1, n2), |(i, j)| q[[i, j, k]]);
        let d1 = spectral::spectral_derivative(&torus, &lvl, 0);
        let d2 = spectral::spectral_derivative(&torus, &lvl, 1);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let w3 = v3[[i1, i2, k]];
                let d3 = if w3 > 0.0 {
                    if k == 0 {
                        (q[[i1, i2, 1]] - q[[i1, i2, 0]]) / ext.h
                    } else {
                        (q[[i1, i2, k]] - q[[i1, i2, k - 1]]) / ext.h
                    }
                } else if k == nz - 1 {
                    (q[[i1, i2, nz - 1]] - q[[i1, i2, nz - 2]]) / ext.h
                } else {
                    (q[[i1, i2, k + 1]] - q[[i1, i2, k]]) / ext.h
                };
                out[[i1, i2, k]] = v1[[i1, i2, k]] * d1[[i1, i2]]
                    + v2[[i1, i2, k]] * d2[[i1, i2]]
                    + w3 * d3;
            }
        }
    }
    let _ = ext.nz_box;
    out
}

/// Result of the low-regularity growth-bound check.
#[derive(Debug, Clone)]
pub struct GronwallReport {
    /// smallest constant validating the bound at every stored time
    pub c_star: f64,
    pub gamma: f64,
    pub valid: bool,
}

/// Verify ||q(t)||_k <= e^{C gamma t} ||q0||_k + int_0^t e^{C gamma (t-s)}
/// ||f(s)||_k ds with gamma = sup_t (||c||_{C^k} + ||v||_{C^k}), reporting the
/// smallest C that validates the whole run.
pub fn gronwall_bound_check(
    q_hist: &[&VolumeScalar],
    hist: &CoeffHistory,
    k: usize,
) -> Result<GronwallReport> {
    assert!(k <= 3);
    let s_max = 5.0;
    let ck_norm = |f: &VolumeScalar| -> f64 {
        // max norm of derivatives up to total order k
        let mut worst = 0.0f64;
        let mut stack = vec![(f.clone(), 0usize)];
        // breadth-limited: take successive derivatives in each direction
        while let Some((g, ord)) = stack.pop() {
            worst = worst.max(g.max_abs());
            if ord < k {
                for axis in 0..3 {
                    stack.push((g.derivative(axis), ord + 1));
                }
            }
        }
        worst
    };
    let mut gamma = 0.0f64;
    for snap in &hist.snaps {
        let mut s = ck_norm(&snap.c);
        let mut vmax = 0.0f64;
        for c in 0..3 {
            vmax = vmax.max(ck_norm(&snap.v.comps[c]));
        }
        s += vmax;
        gamma = gamma.max(s);
    }
    let q_norms: Vec<f64> = q_hist
        .iter()
        .map(|q| volume_hk(q, k, s_max))
        .collect::<Result<Vec<f64>>>()?;
    let f_norms: Vec<f64> = hist
        .snaps
        .iter()
        .map(|s| volume_hk(&s.f, k, s_max))
        .collect::<Result<Vec<f64>>>()?;
    let t0 = hist.times[0];
    let validates = |c: f64| -> bool {
        for (m, qn) in q_norms.iter().enumerate() {
            let tm = hist.times[m.min(hist.times.len() - 1)];
            let mut bound = (c * gamma * (tm - t0)).exp() * q_norms[0];
            for j in 0..m {
                let h = hist.times[j + 1] - hist.times[j];
                let mid = |jj: usize| (c * gamma * (tm - hist.times[jj])).exp() * f_norms[jj];
                bound += 0.5 * h * (mid(j) + mid(j + 1));
            }
            if *qn > bound * (1.0 + 1e-9) + 1e-12 {
                return false;
            }
        }
        true
    };
    if !validates(1e4) {
        return Ok(GronwallReport { c_star: f64::INFINITY, gamma, valid: false });
    }
    let (mut lo, mut hi) = (0.0, 1e4);
    if validates(0.0) {
        return Ok(GronwallReport { c_star: 0.0, gamma, valid: true });
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if validates(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(GronwallReport { c_star: hi, gamma, valid: true })
}

fn volume_hk(f: &VolumeScalar, k: usize, s_max: f64) -> Result<f64> {
    Ok(crate::diagnostics::volume_sobolev_sq(f, k as f64, s_max)?.sqrt())
}

/// Constant-coefficient history for tests and verification presets.
pub fn uniform_history(
    torus: TorusSpec,
    slab: SlabSpec,
    times: &[f64],
    v: [f64; 3],
    c: f64,
    f: impl Fn(f64, f64, f64) -> f64,
) -> CoeffHistory {
    let mut hist = CoeffHistory::new();
    for &t in times {
        let snap = TransportCoefficients {
            v: VolumeVector {
                comps: [
                    VolumeScalar::from_fn(torus, slab, |_, _, _| v[0]),
                    VolumeScalar::from_fn(torus, slab, |_, _, _| v[1]),
                    VolumeScalar::from_fn(torus, slab, |_, _, _| v[2]),
                ],
            },
            c: VolumeScalar::from_fn(torus, slab, |_, _, _| c),
            f: VolumeScalar::from_fn(torus, slab, &f),
        };
        hist.push(t, snap);
    }
    hist
}
