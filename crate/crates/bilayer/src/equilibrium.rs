//! Hydrostatic equilibrium: the density profiles rhobar_+-(x3) solving
//!
//!   d(P(rhobar))/dy3 = -g rhobar,   P_+(rhobar_+(ell)) = p_atm,
//!   P_+(rhobar_+(0)) = P_-(rhobar_-(0)),
//!
//! together with the enthalpy functions h(z) = int P'(r)/r dr used by the
//! perturbation formulation.

use crate::error::{Result, SimError};
use crate::fields::{Layer, SlabSpec, VolumeScalar};
use crate::spectral::TorusSpec;

/// Barotropic pressure closure P(rho) with analytic first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PressureLaw {
    /// P = c^2 rho
    Isothermal { c: f64 },
    /// P = k rho^gamma
    Polytropic { k: f64, gamma: f64 },
}

impl PressureLaw {
    pub fn p(&self, rho: f64) -> f64 {
        match *self {
            PressureLaw::Isothermal { c } => c * c * rho,
            PressureLaw::Polytropic { k, gamma } => k * rho.powf(gamma),
        }
    }

    pub fn dp(&self, rho: f64) -> f64 {
        match *self {
            PressureLaw::Isothermal { c } => c * c,
            PressureLaw::Polytropic { k, gamma } => k * gamma * rho.powf(gamma - 1.0),
        }
    }

    pub fn d2p(&self, rho: f64) -> f64 {
        match *self {
            PressureLaw::Isothermal { .. } => 0.0,
            PressureLaw::Polytropic { k, gamma } => {
                k * gamma * (gamma - 1.0) * rho.powf(gamma - 2.0)
            }
        }
    }

    /// Invert P on the positive half-line by safeguarded Newton with a
    /// bisection fallback.  Monotonicity gives a unique root.
    pub fn inverse(&self, p: f64) -> Result<f64> {
        if !(p > 0.0) {
            return Err(SimError::AdmissibilityFailure(format!(
                "pressure {p} outside the positive range"
            )));
        }
        let (mut lo, mut hi) = (1e-12, 1.0);
        while self.p(hi) < p {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(SimError::AdmissibilityFailure(
                    "P^-1 bracket expansion overflowed".into(),
                ));
            }
        }
        while self.p(lo) > p {
            lo *= 0.5;
            if lo < 1e-300 {
                return Err(SimError::AdmissibilityFailure(
                    "P^-1 bracket collapsed to zero density".into(),
                ));
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.p(x) - p;
            if f.abs() <= 1e-14 * p {
                return Ok(x);
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let newton = x - f / self.dp(x);
            x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (hi - lo) <= 1e-16 * x.abs() {
                return Ok(x);
            }
        }
        Ok(x)
    }
}

/// Equilibrium density profiles on a fine per-layer grid plus the interface
/// constants.  The fine grid is an integer refinement of the slab node grid,
/// so slab nodes coincide with fine nodes.
#[derive(Debug, Clone)]
pub struct EquilibriumProfile {
    pub law_plus: PressureLaw,
    pub law_minus: PressureLaw,
    pub g: f64,
    pub p_atm: f64,
    pub slab: SlabSpec,
    /// Fine-grid values, index 0 at the layer bottom.
    fine_plus: Vec<f64>,
    fine_minus: Vec<f64>,
    refine_plus: usize,
    refine_minus: usize,
    /// rhobar_1 = rhobar_+(ell)
    pub rho1: f64,
    /// rhobar^+ = rhobar_+(0)
    pub rho_plus0: f64,
    /// rhobar^- = rhobar_-(0)
    pub rho_minus0: f64,
    /// [[rhobar]] = rhobar^+ - rhobar^-
    pub jump: f64,
}

fn rk4_step(law: &PressureLaw, g: f64, rho: f64, dz: f64) -> f64 {
    // integrating d rho / dy3 = -g rho / P'(rho)
    let f = |r: f64| -g * r / law.dp(r);
    let k1 = f(rho);
    let k2 = f(rho + 0.5 * dz * k1);
    let k3 = f(rho + 0.5 * dz * k2);
    let k4 = f(rho + dz * k3);
    rho + dz / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrate the equilibrium ODE downward through both layers.
pub fn solve_equilibrium(
    law_plus: PressureLaw,
    law_minus: PressureLaw,
    g: f64,
    p_atm: f64,
    slab: SlabSpec,
) -> Result<EquilibriumProfile> {
    if !(g > 0.0) || !(p_atm > 0.0) {
        return Err(SimError::AdmissibilityFailure(
            "g and p_atm must be positive".into(),
        ));
    }
    let refine = |nz: usize| -> usize { (512 + nz - 2) / (nz - 1) };
    let refine_plus = refine(slab.nz_plus);
    let refine_minus = refine(slab.nz_minus);
    let nf_plus = (slab.nz_plus - 1) * refine_plus + 1;
    let nf_minus = (slab.nz_minus - 1) * refine_minus + 1;

    // upper layer: from y3 = ell (index nf-1) down to y3 = 0 (index 0)
    let mut fine_plus = vec![0.0; nf_plus];
    let dz_p = slab.ell / (nf_plus - 1) as f64;
    let rho1 = law_plus.inverse(p_atm)?;
    fine_plus[nf_plus - 1] = rho1;
    for i in (0..nf_plus - 1).rev() {
        let next = rk4_step(&law_plus, g, fine_plus[i + 1], -dz_p);
        if !(next > 0.0) || !next.is_finite() {
            return Err(SimError::AdmissibilityFailure(
                "upper-layer density left the positive range".into(),
            ));
        }
        fine_plus[i] = next;
    }
    let rho_plus0 = fine_plus[0];

    // pressure matching at the interface, then integrate the lower layer down
    let p_interface = law_plus.p(rho_plus0);
    let rho_minus0 = law_minus.inverse(p_interface)?;
    let mut fine_minus = vec![0.0; nf_minus];
    let dz_m = slab.b / (nf_minus - 1) as f64;
    fine_minus[nf_minus - 1] = rho_minus0;
    for i in (0..nf_minus - 1).rev() {
        let next = rk4_step(&law_minus, g, fine_minus[i + 1], -dz_m);
        if !(next > 0.0) || !next.is_finite() {
            return Err(SimError::AdmissibilityFailure(
                "lower-layer density left the positive range".into(),
            ));
        }
        fine_minus[i] = next;
    }

    Ok(EquilibriumProfile {
        law_plus,
        law_minus,
        g,
        p_atm,
        slab,
        fine_plus,
        fine_minus,
        refine_plus,
        refine_minus,
        rho1,
        rho_plus0,
        rho_minus0,
        jump: rho_plus0 - rho_minus0,
    })
}

impl EquilibriumProfile {
    pub fn law(&self, layer: Layer) -> &PressureLaw {
        match layer {
            Layer::Plus => &self.law_plus,
            Layer::Minus => &self.law_minus,
        }
    }

    fn fine(&self, layer: Layer) -> (&[f64], f64, f64) {
        // (values, z of index 0, spacing)
        match layer {
            Layer::Plus => (
                &self.fine_plus,
                0.0,
                self.slab.ell / (self.fine_plus.len() - 1) as f64,
            ),
            Layer::Minus => (
                &self.fine_minus,
                -self.slab.b,
                self.slab.b / (self.fine_minus.len() - 1) as f64,
            ),
        }
    }

    /// rhobar at an arbitrary height of the given layer (cubic interpolation
    /// on the fine grid; exact at slab nodes).
    pub fn rho(&self, layer: Layer, z: f64) -> f64 {
        let (vals, z0, h) = self.fine(layer);
        let n = vals.len();
        let s = ((z - z0) / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        if (s - i as f64).abs() < 1e-12 {
            return vals[i];
        }
        // 4-point Lagrange with the stencil shifted to stay inside
        let i0 = i.saturating_sub(1).min(n - 4);
        let t = s - i0 as f64;
        let mut acc = 0.0;
        for a in 0..4 {
            let mut w = 1.0;
            for b in 0..4 {
                if a != b {
                    w *= (t - b as f64) / (a as f64 - b as f64);
                }
            }
            acc += w * vals[i0 + a];
        }
        acc
    }

    /// d3 rhobar, from the ODE relation rho' = -g rho / P'(rho).
    pub fn d_rho(&self, layer: Layer, z: f64) -> f64 {
        let r = self.rho(layer, z);
        -self.g * r / self.law(layer).dp(r)
    }

    /// d3^2 rhobar, differentiating the ODE relation once more.
    pub fn d2_rho(&self, layer: Layer, z: f64) -> f64 {
        let law = self.law(layer);
        let r = self.rho(layer, z);
        let rp = self.d_rho(layer, z);
        let dp = law.dp(r);
        let d2p = law.d2p(r);
        -self.g * rp * (dp - r * d2p) / (dp * dp)
    }

    /// Node values on the slab grid (index 0 at the layer bottom).
    pub fn node_values(&self, layer: Layer) -> Vec<f64> {
        let (vals, _, _) = self.fine(layer);
        let refine = match layer {
            Layer::Plus => self.refine_plus,
            Layer::Minus => self.refine_minus,
        };
        (0..self.slab.nz(layer)).map(|k| vals[k * refine]).collect()
    }

    /// rhobar replicated over the horizontal grid.
    pub fn rho_field(&self, torus: TorusSpec) -> VolumeScalar {
        VolumeScalar::from_profile(torus, self.slab, |layer, z| self.rho(layer, z))
    }

    pub fn d_rho_field(&self, torus: TorusSpec) -> VolumeScalar {
        VolumeScalar::from_profile(torus, self.slab, |layer, z| self.d_rho(layer, z))
    }

    pub fn d2_rho_field(&self, torus: TorusSpec) -> VolumeScalar {
        VolumeScalar::from_profile(torus, self.slab, |layer, z| self.d2_rho(layer, z))
    }

    /// Enthalpy h(z) = int_{base}^{z} P'(r)/r dr with base rhobar_1 in the
    /// upper layer and rhobar^- in the lower, by adaptive quadrature.
    pub fn enthalpy(&self, layer: Layer, z: f64) -> Result<f64> {
        if !(z > 0.0) {
            return Err(SimError::DomainError(format!(
                "enthalpy argument {z} outside the positive range"
            )));
        }
        let law = *self.law(layer);
        let base = match layer {
            Layer::Plus => self.rho1,
            Layer::Minus => self.rho_minus0,
        };
        Ok(adaptive_simpson(
            &|r| law.dp(r) / r,
            base,
            z,
            1e-10,
        ))
    }

    /// h'(z) = P'(z)/z, exact.
    pub fn enthalpy_derivative(&self, layer: Layer, z: f64) -> Result<f64> {
        if !(z > 0.0) {
            return Err(SimError::DomainError(format!(
                "enthalpy argument {z} outside the positive range"
            )));
        }
        Ok(self.law(layer).dp(z) / z)
    }

    /// Max hydrostatic residual |d(P(rhobar))/dy3 + g rhobar| over the interior
    /// fine nodes of both layers, by 4th-order centered differences on the
    /// fine grid.
    pub fn hydrostatic_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for layer in Layer::BOTH {
            let (vals, _, h) = self.fine(layer);
            let law = self.law(layer);
            let pf: Vec<f64> = vals.iter().map(|&r| law.p(r)).collect();
            for i in 2..vals.len() - 2 {
                let dp = (pf[i - 2] - 8.0 * pf[i - 1] + 8.0 * pf[i + 1] - pf[i + 2]) / (12.0 * h);
                worst = worst.max((dp + self.g * vals[i]).abs());
            }
        }
        worst
    }

    /// Boundary and interface matching residuals of the equilibrium system:
    /// (|P_+(rho_+(ell)) - p_atm|, |P_+(rho_+(0)) - P_-(rho_-(0))|).
    pub fn matching_residuals(&self) -> (f64, f64) {
        let top = (self.law_plus.p(self.rho1) - self.p_atm).abs();
        let mid = (self.law_plus.p(self.rho_plus0) - self.law_minus.p(self.rho_minus0)).abs();
        (top, mid)
    }
}

/// Adaptive Simpson quadrature with relative tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    let scale = whole.abs().max(1e-300);
    recurse(f, a, fa, b, fb, whole, m, fm, rel_tol * scale, 48)
}
