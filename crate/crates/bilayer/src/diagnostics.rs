//! Discrete Sobolev norms, the energy/dissipation functionals, the alpha = 0
//! energy-identity residual and conservation monitors.
//!
//! Surface norms are exact spectral sums sum <xi>^{2s} |fhat|^2.  Volume norms
//! realize integer orders through horizontal-spectral plus vertical-FD4
//! derivative sums over both layers; half-integer orders use the log-convex
//! interpolation ||f||^2_{k+1/2} = ||f||_k ||f||_{k+1}, which is exact
//! modewise.

use ndarray::Array2;
use std::collections::HashMap;

use crate::error::{Result, SimError};
use crate::fields::{SurfaceField, SurfacePair, VolumeScalar, VolumeVector};
use crate::geometry::Geometry;
use crate::lame::{self, LameParams};
use crate::spectral::TorusSpec;

/// Highest volume Sobolev order representable on the grid for index N.
pub fn s_max_volume(n: usize) -> f64 {
    (4 * n + 1) as f64
}

/// Exact spectral surface norm squared.
pub fn surface_sobolev_sq(f: &SurfaceField, s: f64) -> f64 {
    f.sobolev_sq(s)
}

/// Volume Sobolev norm squared at integer or half-integer order s >= 0.
pub fn volume_sobolev_sq(f: &VolumeScalar, s: f64, s_max: f64) -> Result<f64> {
    if !(0.0..=s_max).contains(&s) || (2.0 * s).fract() != 0.0 {
        return Err(SimError::UnsupportedOrder(s));
    }
    if s.fract() != 0.0 {
        let k = s.floor();
        let lo = volume_sobolev_sq(f, k, s_max)?;
        let hi = volume_sobolev_sq(f, k + 1.0, s_max)?;
        return Ok((lo * hi).sqrt());
    }
    let k = s as usize;
    // accumulate || d^alpha f ||^2 over multi-indices |alpha| <= k,
    // reusing lower-order derivatives
    let mut cache: HashMap<(usize, usize, usize), VolumeScalar> = HashMap::new();
    cache.insert((0, 0, 0), f.clone());
    let mut total = 0.0;
    for ord in 0..=k {
        for a1 in 0..=ord {
            for a2 in 0..=(ord - a1) {
                let a3 = ord - a1 - a2;
                let key = (a1, a2, a3);
                if !cache.contains_key(&key) {
                    let (prev, axis) = if a1 > 0 {
                        ((a1 - 1, a2, a3), 0)
                    } else if a2 > 0 {
                        ((a1, a2 - 1, a3), 1)
                    } else {
                        ((a1, a2, a3 - 1), 2)
                    };
                    let d = cache[&prev].derivative(axis);
                    cache.insert(key, d);
                }
                total += cache[&key].l2_sq();
            }
        }
    }
    Ok(total)
}

/// Vector volume norm: sum over the three components.
pub fn vector_sobolev_sq(f: &VolumeVector, s: f64, s_max: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in &f.comps {
        total += volume_sobolev_sq(c, s, s_max)?;
    }
    Ok(total)
}

/// Pair surface norm ||f||^2_s = ||f_+||^2 + ||f_-||^2.
pub fn pair_sobolev_sq(f: &SurfacePair, s: f64) -> f64 {
    f.plus.sobolev_sq(s) + f.minus.sobolev_sq(s)
}

/// Weighted pair norm gamma ||f||^2_s = gamma_+ ||f_+||^2 + gamma_- ||f_-||^2.
pub fn pair_sobolev_sq_weighted(f: &SurfacePair, s: f64, w_plus: f64, w_minus: f64) -> f64 {
    w_plus * f.plus.sobolev_sq(s) + w_minus * f.minus.sobolev_sq(s)
}

fn grad_pair(f: &SurfacePair) -> [SurfacePair; 2] {
    [
        SurfacePair { plus: f.plus.derivative(0), minus: f.minus.derivative(0) },
        SurfacePair { plus: f.plus.derivative(1), minus: f.minus.derivative(1) },
    ]
}

/// Dual norm ||F||_{H*} through the discrete Riesz map on the constrained
/// space: solve <w, v>_{H1} = int F . v for all v, return ||w||_{H1}.
pub fn dual_norm_hstar(f: &VolumeVector) -> Result<f64> {
    let (_, norm) = lame::h1_riesz(f.torus(), f.slab(), f)?;
    Ok(norm)
}

/// Every functional of one diagnostics row.
#[derive(Debug, Clone, Copy, Default)]
pub struct FunctionalReport {
    pub e_u: f64,
    pub e_q: f64,
    pub e_eta_sigma: f64,
    pub ehat_eta_sigma: f64,
    pub d_u: f64,
    pub d_u_weak: f64,
    pub d_q: f64,
    pub d_eta_sigma: f64,
    pub dhat_eta_sigma: f64,
    pub l_eta: f64,
    pub te: f64,
    pub n: usize,
}

/// Time history of the state fields, oldest first; the report is evaluated at
/// the newest level with backward differences for the temporal derivatives.
pub struct HistoryView<'a> {
    pub dt: f64,
    pub u: Vec<&'a VolumeVector>,
    pub q: Vec<&'a VolumeScalar>,
    pub eta: Vec<&'a SurfacePair>,
}

fn bd_u(hist: &[&VolumeVector], dt: f64, j: usize) -> VolumeVector {
    let n = hist.len();
    match j {
        0 => hist[n - 1].clone(),
        1 => hist[n - 1].sub(hist[n - 2]).scale(1.0 / dt),
        2 => hist[n - 1]
            .sub(&hist[n - 2].scale(2.0))
            .add(hist[n - 3])
            .scale(1.0 / (dt * dt)),
        _ => unreachable!("temporal differences limited to order 2"),
    }
}

fn bd_q(hist: &[&VolumeScalar], dt: f64, j: usize) -> VolumeScalar {
    let n = hist.len();
    match j {
        0 => hist[n - 1].clone(),
        1 => hist[n - 1].sub(hist[n - 2]).scale(1.0 / dt),
        2 => hist[n - 1]
            .sub(&hist[n - 2].scale(2.0))
            .add(hist[n - 3])
            .scale(1.0 / (dt * dt)),
        _ => unreachable!(),
    }
}

fn bd_eta(hist: &[&SurfacePair], dt: f64, j: usize) -> SurfacePair {
    let n = hist.len();
    match j {
        0 => hist[n - 1].clone(),
        1 => hist[n - 1].sub(hist[n - 2]).scale(1.0 / dt),
        2 => hist[n - 1]
            .sub(&hist[n - 2].scale(2.0))
            .add(hist[n - 3])
            .scale(1.0 / (dt * dt)),
        _ => unreachable!(),
    }
}

/// Temporal difference orders realized by backward differences; higher
/// orders are reported as absent rather than extrapolated.
const J_MAX_FD: usize = 2;

/// Evaluate the energy and dissipation functionals at regularity index N with
/// per-side surface-tension weights.
pub fn energy_functionals(
    hist: &HistoryView,
    n: usize,
    sigma_plus: f64,
    sigma_minus: f64,
    te: f64,
) -> Result<FunctionalReport> {
    if hist.u.is_empty() {
        return Err(SimError::InsufficientHistory { have: 0, need: 1 });
    }
    let levels = hist.u.len();
    let jmax = J_MAX_FD.min(levels - 1).min(2 * n);
    let s_max = s_max_volume(n);
    let n4 = (4 * n) as f64;
    let dt = hist.dt;

    let mut e_u = 0.0;
    let mut d_u = 0.0;
    let mut d_u_weak = 0.0;
    for j in 0..=jmax {
        let uj = bd_u(&hist.u, dt, j);
        e_u += vector_sobolev_sq(&uj, n4 - 2.0 * j as f64, s_max)?;
        let dterm = vector_sobolev_sq(&uj, n4 - 2.0 * j as f64 + 1.0, s_max)?;
        d_u += dterm;
        if j >= 1 {
            d_u_weak += dterm;
        }
    }
    // weak j = 0 part: the distinct multi-indices reached by grad_{*,0}^{4N-1}
    // in H^2, i.e. |beta| <= 4N plus |beta| = 4N+1 with at most two vertical
    // derivatives (a strict subset of the full H^{4N+1} index set)
    {
        let u0 = bd_u(&hist.u, dt, 0);
        d_u_weak += vector_sobolev_sq(&u0, n4, s_max)?;
        let top = 4 * n + 1;
        for c in 0..3 {
            let mut cache: HashMap<(usize, usize, usize), VolumeScalar> = HashMap::new();
            cache.insert((0, 0, 0), u0.comps[c].clone());
            let mut reach = |key: (usize, usize, usize),
                             cache: &mut HashMap<(usize, usize, usize), VolumeScalar>|
             -> VolumeScalar {
                fn get(
                    key: (usize, usize, usize),
                    cache: &mut HashMap<(usize, usize, usize), VolumeScalar>,
                ) -> VolumeScalar {
                    if let Some(v) = cache.get(&key) {
                        return v.clone();
                    }
                    let (prev, axis) = if key.0 > 0 {
                        ((key.0 - 1, key.1, key.2), 0)
                    } else if key.1 > 0 {
                        ((key.0, key.1 - 1, key.2), 1)
                    } else {
                        ((key.0, key.1, key.2 - 1), 2)
                    };
                    let base = get(prev, cache);
                    let d = base.derivative(axis);
                    cache.insert(key, d.clone());
                    d
                }
                get(key, cache)
            };
            for a1 in 0..=top {
                for a2 in 0..=(top - a1) {
                    let a3 = top - a1 - a2;
                    if a3 <= 2 {
                        let d = reach((a1, a2, a3), &mut cache);
                        d_u_weak += d.l2_sq();
                    }
                }
            }
        }
    }

    let mut e_q = 0.0;
    let mut d_q = 0.0;
    for j in 0..=jmax {
        let qj = bd_q(&hist.q, dt, j);
        if j == 0 {
            e_q += volume_sobolev_sq(&qj, n4, s_max)?;
            d_q += volume_sobolev_sq(&qj, n4, s_max)?;
        } else {
            e_q += volume_sobolev_sq(&qj, n4 - 2.0 * j as f64 + 1.0, s_max)?;
            if j == 1 {
                d_q += volume_sobolev_sq(&qj, n4 - 1.0, s_max)?;
            } else {
                d_q += volume_sobolev_sq(&qj, n4 - 2.0 * j as f64 + 2.0, s_max)?;
            }
        }
    }

    let mut e_eta = 0.0;
    let mut ehat_extra = 0.0;
    let mut d_eta = 0.0;
    let mut dhat_extra = 0.0;
    for j in 0..=jmax {
        let ej = bd_eta(&hist.eta, dt, j);
        let s = n4 - 2.0 * j as f64;
        e_eta += pair_sobolev_sq(&ej, s);
        for gp in grad_pair(&ej) {
            e_eta += pair_sobolev_sq_weighted(&gp, s, sigma_plus, sigma_minus);
        }
        if j >= 1 {
            ehat_extra += pair_sobolev_sq(&ej, n4 - 2.0 * j as f64 + 1.5);
            if j == 1 {
                d_eta += pair_sobolev_sq(&ej, n4 - 1.0);
                dhat_extra += pair_sobolev_sq(&ej, n4 - 0.5);
            } else {
                d_eta += pair_sobolev_sq(&ej, n4 - 2.0 * j as f64 + 2.0);
                dhat_extra += pair_sobolev_sq(&ej, n4 - 2.0 * j as f64 + 2.5);
            }
        }
    }
    let eta0 = bd_eta(&hist.eta, dt, 0);
    d_eta += pair_sobolev_sq_weighted(
        &eta0,
        n4 + 1.5,
        sigma_plus * sigma_plus,
        sigma_minus * sigma_minus,
    );
    let l_eta = pair_sobolev_sq(&eta0, n4 - 0.5);

    Ok(FunctionalReport {
        e_u,
        e_q,
        e_eta_sigma: e_eta,
        ehat_eta_sigma: e_eta + ehat_extra,
        d_u,
        d_u_weak,
        d_q,
        d_eta_sigma: d_eta,
        dhat_eta_sigma: d_eta + dhat_extra,
        l_eta,
        te,
        n,
    })
}

/// Data energy from the temporal-derivative chain at t = 0.
pub fn te_functional(
    u_chain: &[VolumeVector],
    q_chain: &[VolumeScalar],
    eta_chain: &[SurfacePair],
    n: usize,
    sigma_plus: f64,
    sigma_minus: f64,
) -> Result<f64> {
    let s_max = s_max_volume(n);
    let n4 = (4 * n) as f64;
    let jmax = (2 * n).min(u_chain.len().saturating_sub(1));
    let mut total = 0.0;
    for (j, u) in u_chain.iter().enumerate().take(jmax + 1) {
        total += vector_sobolev_sq(u, n4 - 2.0 * j as f64, s_max)?;
    }
    for (j, q) in q_chain.iter().enumerate().take(jmax + 1) {
        let s = if j == 0 { n4 } else { n4 - 2.0 * j as f64 + 1.0 };
        total += volume_sobolev_sq(q, s, s_max)?;
    }
    for (j, eta) in eta_chain.iter().enumerate().take(jmax + 1) {
        if j == 0 {
            total += pair_sobolev_sq(eta, n4 + 0.5);
            for gp in grad_pair(eta) {
                total += pair_sobolev_sq_weighted(&gp, n4, sigma_plus, sigma_minus);
            }
        } else {
            total += pair_sobolev_sq(eta, n4 - 2.0 * j as f64 + 1.5);
        }
    }
    Ok(total)
}

/// Total mass int_Omega rho J dx.
pub fn mass_total(rho: &VolumeScalar, g: &Geometry) -> f64 {
    rho.mul(&g.jac).integral()
}

/// Everything the alpha = 0 energy identity of one committed step needs.
pub struct StepRecord<'a> {
    pub dt: f64,
    pub kappa: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub params: &'a LameParams,
    pub g_old: &'a Geometry,
    pub g_new: &'a Geometry,
    pub rho_old: &'a VolumeScalar,
    pub rho_new: &'a VolumeScalar,
    pub u_old: &'a VolumeVector,
    pub u_new: &'a VolumeVector,
    pub eta_old: &'a SurfacePair,
    pub eta_new: &'a SurfacePair,
    /// volume forcing at the new time level
    pub f1: &'a VolumeVector,
    /// traction forcing at the new time level
    pub f2_plus: &'a [Array2<f64>; 3],
    pub f2_minus: &'a [Array2<f64>; 3],
    /// u . N at the new time level
    pub un_new: &'a SurfacePair,
    /// corrector at the new time level (None for the kinematic run)
    pub xi_new: Option<&'a SurfacePair>,
}

fn surface_collocation_sum(torus: TorusSpec, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let w = torus.area() / (torus.n1 * torus.n2) as f64;
    w * a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()
}

/// Relative residual of the alpha = 0 energy identity over one committed
/// step, with d/dt realized as the step's backward difference and every
/// integral evaluated with the solver's own quadratures.
pub fn energy_identity_residual(rec: &StepRecord) -> f64 {
    let torus = rec.g_new.torus;
    let vol_energy = |u: &VolumeVector, g: &Geometry, rho: &VolumeScalar| {
        0.5 * lame::mass_energy(u, g, rho)
    };
    let surf_energy = |eta: &SurfacePair| {
        let mut e = 0.5 * pair_sobolev_sq(eta, 0.0);
        for gp in grad_pair(eta) {
            e += 0.5 * pair_sobolev_sq_weighted(&gp, 0.0, rec.sigma_plus, rec.sigma_minus);
        }
        e
    };
    let e_new = vol_energy(rec.u_new, rec.g_new, rec.rho_new) + surf_energy(rec.eta_new);
    let e_old = vol_energy(rec.u_old, rec.g_old, rec.rho_old) + surf_energy(rec.eta_old);
    let dissipation = lame::dissipation_form(rec.u_new, rec.g_new, rec.params);
    let mut kappa_term = 0.0;
    if rec.kappa > 0.0 {
        for gp in grad_pair(rec.eta_new) {
            kappa_term += rec.kappa * pair_sobolev_sq(&gp, 0.0);
        }
        let lap = SurfacePair {
            plus: rec.eta_new.plus.laplacian(),
            minus: rec.eta_new.minus.laplacian(),
        };
        kappa_term +=
            rec.kappa * pair_sobolev_sq_weighted(&lap, 0.0, rec.sigma_plus, rec.sigma_minus);
    }
    let lhs = (e_new - e_old) / rec.dt + dissipation + kappa_term;

    let mut rhs = 0.0;
    // int [dt(rho J)/(rho J)] rho J |u|^2/2 with dt(rho J) backward differenced
    rhs += (lame::mass_energy(rec.u_new, rec.g_new, rec.rho_new)
        - lame::mass_energy(rec.u_new, rec.g_old, rec.rho_old))
        / rec.dt
        * 0.5;
    rhs += lame::volume_pairing(rec.f1, rec.u_new, rec.g_new);
    let tr = crate::surface::UTrace::of(rec.u_new);
    for c in 0..3 {
        rhs -= surface_collocation_sum(torus, &rec.f2_plus[c], &tr.plus[c]);
        rhs -= surface_collocation_sum(torus, &rec.f2_minus[c], &tr.minus[c]);
    }
    rhs += surface_collocation_sum(torus, &rec.eta_new.plus.values(), &rec.un_new.plus.values());
    rhs += surface_collocation_sum(
        torus,
        &rec.eta_new.minus.values(),
        &rec.un_new.minus.values(),
    );
    if let Some(xi) = rec.xi_new {
        if rec.kappa > 0.0 {
            let lap_p = rec.eta_new.plus.laplacian().values();
            let lap_m = rec.eta_new.minus.laplacian().values();
            let mix_p = &(&lap_p * rec.sigma_plus) - &rec.eta_new.plus.values();
            let mix_m = &(&lap_m * rec.sigma_minus) - &rec.eta_new.minus.values();
            rhs += rec.kappa * surface_collocation_sum(torus, &xi.plus.values(), &mix_p);
            rhs += rec.kappa * surface_collocation_sum(torus, &xi.minus.values(), &mix_m);
        }
    }
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Layer, Side, SlabSpec};
    use approx::assert_abs_diff_eq;

    fn setup() -> (TorusSpec, SlabSpec) {
        (
            TorusSpec::new(1.0, 1.0, 8, 8).unwrap(),
            SlabSpec::new(1.0, 1.5, 9, 9).unwrap(),
        )
    }

    #[test]
    fn volume_h1_matches_quadrature_oracle() {
        let t = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let s = SlabSpec::new(1.0, 1.5, 33, 33).unwrap();
        let f = VolumeScalar::from_fn(t, s, |x, _, z| (x / t.l1).sin() * (1.0 + z * z));
        let got = volume_sobolev_sq(&f, 1.0, 5.0).unwrap();
        // dense 1-D quadrature oracle over both layers
        let nf = 200_000;
        let mut oracle = 0.0;
        for (z0, z1) in [(0.0, s.ell), (-s.b, 0.0)] {
            let h = (z1 - z0) / nf as f64;
            for i in 0..=nf {
                let z = z0 + i as f64 * h;
                let w = if i == 0 || i == nf { 0.5 * h } else { h };
                let p = 1.0 + z * z;
                let pp = 2.0 * z;
                oracle += w * (p * p * (1.0 + 1.0 / (t.l1 * t.l1)) + pp * pp);
            }
        }
        oracle *= t.area() / 2.0; // mean of sin^2, cos^2 over the torus
        let rel = (got - oracle).abs() / oracle;
        assert!(rel <= 1e-6, "relative H1 deviation {rel:.3e}");
    }

    #[test]
    fn half_integer_interpolation_exact_on_single_surface_mode() {
        let t = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let f = SurfaceField::from_fn(t, Side::Plus, |x, _| 0.4 * (2.0 * x / t.l1).sin());
        let k = 2.0;
        let exact = f.sobolev_sq(k + 0.5);
        let interp = (f.sobolev_sq(k) * f.sobolev_sq(k + 1.0)).sqrt();
        assert_abs_diff_eq!(exact, interp, epsilon = 1e-12 * exact);
    }

    #[test]
    fn unsupported_orders_rejected() {
        let (t, s) = setup();
        let f = VolumeScalar::zeros(t, s);
        for bad in [7.0, 0.25, -1.0] {
            assert!(matches!(
                volume_sobolev_sq(&f, bad, 5.0),
                Err(SimError::UnsupportedOrder(_))
            ));
        }
    }

    #[test]
    fn functionals_vanish_at_zero_and_scale_quadratically() {
        let (t, s) = setup();
        let zero_u = VolumeVector::zeros(t, s);
        let zero_q = VolumeScalar::zeros(t, s);
        let zero_eta = SurfacePair::zeros(t);
        let hist = HistoryView {
            dt: 0.1,
            u: vec![&zero_u, &zero_u, &zero_u],
            q: vec![&zero_q, &zero_q, &zero_q],
            eta: vec![&zero_eta, &zero_eta, &zero_eta],
        };
        let rep = energy_functionals(&hist, 1, 0.5, 0.3, 0.0).unwrap();
        assert_eq!(rep.e_u, 0.0);
        assert_eq!(rep.e_q, 0.0);
        assert_eq!(rep.e_eta_sigma, 0.0);
        assert_eq!(rep.d_u, 0.0);
        assert_eq!(rep.l_eta, 0.0);

        let u1 = VolumeVector::from_fns(
            t,
            s,
            [
                &|x: f64, _: f64, z: f64| x.sin() * (z + 1.5),
                &|_, _, _| 0.0,
                &|_: f64, y: f64, z: f64| 0.3 * y.cos() * z,
            ],
        );
        let q1 = VolumeScalar::from_fn(t, s, |x, _, z| 0.1 * x.cos() * (1.0 + z));
        let eta1 = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| 0.05 * x.sin()),
            minus: SurfaceField::from_fn(t, Side::Minus, |_, y| 0.04 * y.cos()),
        };
        let u2 = u1.scale(0.8);
        let q2 = q1.scale(0.7);
        let eta2 = eta1.scale(0.9);
        let hist1 = HistoryView {
            dt: 0.1,
            u: vec![&u2, &u1],
            q: vec![&q2, &q1],
            eta: vec![&eta2, &eta1],
        };
        let lam = 2.0;
        let (u1s, u2s) = (u1.scale(lam), u2.scale(lam));
        let (q1s, q2s) = (q1.scale(lam), q2.scale(lam));
        let (eta1s, eta2s) = (eta1.scale(lam), eta2.scale(lam));
        let hist2 = HistoryView {
            dt: 0.1,
            u: vec![&u2s, &u1s],
            q: vec![&q2s, &q1s],
            eta: vec![&eta2s, &eta1s],
        };
        let r1 = energy_functionals(&hist1, 1, 0.5, 0.3, 0.0).unwrap();
        let r2 = energy_functionals(&hist2, 1, 0.5, 0.3, 0.0).unwrap();
        for (a, b) in [
            (r1.e_u, r2.e_u),
            (r1.e_q, r2.e_q),
            (r1.e_eta_sigma, r2.e_eta_sigma),
            (r1.ehat_eta_sigma, r2.ehat_eta_sigma),
            (r1.d_u, r2.d_u),
            (r1.d_u_weak, r2.d_u_weak),
            (r1.d_q, r2.d_q),
            (r1.d_eta_sigma, r2.d_eta_sigma),
            (r1.dhat_eta_sigma, r2.dhat_eta_sigma),
            (r1.l_eta, r2.l_eta),
        ] {
            assert!(a > 0.0);
            assert_abs_diff_eq!(b, lam * lam * a, epsilon = 1e-9 * b.abs());
        }
        assert!(r1.ehat_eta_sigma >= r1.e_eta_sigma);
        assert!(r1.dhat_eta_sigma >= r1.d_eta_sigma);
        assert!(r1.d_u_weak <= r1.d_u + 1e-12);
    }

    #[test]
    fn static_single_mode_eta_energy_closed_form() {
        let t = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let s = SlabSpec::new(1.0, 1.0, 9, 9).unwrap();
        let a = 0.3;
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| a * (x / t.l1).sin()),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let zero_u = VolumeVector::zeros(t, s);
        let zero_q = VolumeScalar::zeros(t, s);
        let sigma0 = 0.7;
        let hist = HistoryView {
            dt: 0.1,
            u: vec![&zero_u, &zero_u, &zero_u],
            q: vec![&zero_q, &zero_q, &zero_q],
            eta: vec![&eta, &eta, &eta],
        };
        let rep = energy_functionals(&hist, 1, sigma0, sigma0, 0.0).unwrap();
        // static single mode at N = 1: ||eta||_4^2 + sigma ||grad eta||_4^2
        let xi2 = 1.0 + 1.0 / (t.l1 * t.l1);
        let base = t.area() * a * a / 2.0;
        let expected = base * xi2.powi(4) * (1.0 + sigma0 / (t.l1 * t.l1));
        assert_abs_diff_eq!(rep.e_eta_sigma, expected, epsilon = 1e-10 * expected);
        let rep2 = energy_functionals(&hist, 1, 2.0 * sigma0, 2.0 * sigma0, 0.0).unwrap();
        assert!(rep2.e_eta_sigma > rep.e_eta_sigma);
    }

    #[test]
    fn mass_of_equilibrium_profile_matches_1d_quadrature() {
        let (t, s) = setup();
        let prof = crate::equilibrium::solve_equilibrium(
            crate::equilibrium::PressureLaw::Isothermal { c: 1.1 },
            crate::equilibrium::PressureLaw::Isothermal { c: 0.9 },
            0.8,
            2.0,
            s,
        )
        .unwrap();
        let ext = crate::geometry::Extensions::new(t, s, 6).unwrap();
        let bumps = crate::geometry::BumpProfiles::new(&s);
        let g = crate::geometry::build_geometry(
            &SurfacePair::zeros(t),
            &ext,
            &bumps,
            crate::geometry::JACOBIAN_FLOOR,
        )
        .unwrap();
        let rho = prof.rho_field(t);
        let got = mass_total(&rho, &g);
        let mut oracle = 0.0;
        for layer in Layer::BOTH {
            let vals = prof.node_values(layer);
            let w = crate::fields::quad_weights(vals.len(), s.h(layer));
            for (k, v) in vals.iter().enumerate() {
                oracle += w[k] * v;
            }
        }
        oracle *= t.area();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-10 * oracle);
    }

    #[test]
    fn uniform_density_flat_geometry_mass_is_volume() {
        let (t, s) = setup();
        let ext = crate::geometry::Extensions::new(t, s, 6).unwrap();
        let bumps = crate::geometry::BumpProfiles::new(&s);
        let g = crate::geometry::build_geometry(
            &SurfacePair::zeros(t),
            &ext,
            &bumps,
            crate::geometry::JACOBIAN_FLOOR,
        )
        .unwrap();
        let rho = VolumeScalar::from_fn(t, s, |_, _, _| 1.0);
        let vol = t.area() * (s.ell + s.b);
        assert_abs_diff_eq!(mass_total(&rho, &g), vol, epsilon = 1e-10 * vol);
    }

    #[test]
    fn dual_norm_of_zero_is_zero() {
        let (t, s) = setup();
        let f = VolumeVector::zeros(t, s);
        assert!(dual_norm_hstar(&f).unwrap() < 1e-12);
    }
}
