//! The per-time-step Picard iteration coupling the two-phase Lame solve for
//! u, the surface update for eta, and the transport solve for q, together
//! with the nonlinear forcing assembly, the compatibility-data recursion at
//! t = 0, the Fourier-multiplier seed extension, and the low-regularity
//! contraction norms that monitor convergence.

use ndarray::Array2;
use num_complex::Complex64;

use crate::diagnostics;
use crate::equilibrium::{adaptive_simpson, EquilibriumProfile};
use crate::error::{Result, SimError};
use crate::fields::{Layer, Side, SlabSpec, SurfaceField, SurfacePair, VolumeScalar, VolumeVector};
use crate::geometry::{build_geometry, mean_curvature, Geometry};
use crate::lame::{self, LameParams, TractionData};
use crate::spectral::{self, TorusSpec};
use crate::surface::{self, PhiProfiles, UTrace, XiCorrector};
use crate::transport::{self, CoeffHistory};

/// Scheme parameters of the coupled stepper.
#[derive(Debug, Clone)]
pub struct StepperParams {
    pub dt: f64,
    pub t_end: f64,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub reject_retries: usize,
    pub geometry_refreshes: usize,
    pub kappa: f64,
    pub use_kappa: bool,
    pub cfl_max: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub gravity: f64,
    /// admissible density corridor [rho_*/2, 3 rho^*/2]
    pub rho_lo: f64,
    pub rho_hi: f64,
    /// bound on L[eta] = ||eta||^2_{4N-1/2}
    pub eta_delta: f64,
    pub cc_tol: f64,
    pub j_max: usize,
    pub boundary_tol: f64,
    pub lame: LameParams,
    pub n_index: usize,
    pub jacobian_floor: f64,
    /// monotone (clipped) semi-Lagrangian interpolation for q
    pub clip_transport: bool,
}

impl Default for StepperParams {
    fn default() -> Self {
        StepperParams {
            dt: 1e-2,
            t_end: 0.1,
            max_picard: 25,
            picard_tol: 1e-9,
            reject_retries: 5,
            geometry_refreshes: 1,
            kappa: 0.0,
            use_kappa: false,
            cfl_max: 0.5,
            sigma_plus: 0.0,
            sigma_minus: 0.0,
            gravity: 1.0,
            rho_lo: 0.0,
            rho_hi: f64::INFINITY,
            eta_delta: 0.01,
            cc_tol: 1e-8,
            j_max: 2,
            boundary_tol: 1e-8,
            lame: LameParams::default(),
            n_index: 1,
            jacobian_floor: crate::geometry::JACOBIAN_FLOOR,
            clip_transport: true,
        }
    }
}

/// The state triple at one time level, with the derived geometry and density.
#[derive(Clone)]
pub struct State {
    pub t: f64,
    pub u: VolumeVector,
    pub q: VolumeScalar,
    pub eta: SurfacePair,
    pub geometry: Geometry,
    pub rho: VolumeScalar,
}

/// rho = rhobar + q + d3(rhobar) theta.
pub fn density_of(q: &VolumeScalar, g: &Geometry, eq: &EquilibriumProfile) -> VolumeScalar {
    let d_rho = eq.d_rho_field(g.torus);
    eq.rho_field(g.torus).add(q).add(&d_rho.mul(&g.theta))
}

impl State {
    /// Build the state (geometry floor enforced; other invariants checked by
    /// `validate`).
    pub fn build(
        t: f64,
        u: VolumeVector,
        q: VolumeScalar,
        eta: SurfacePair,
        ext: &crate::geometry::Extensions,
        bumps: &crate::geometry::BumpProfiles,
        eq: &EquilibriumProfile,
        jacobian_floor: f64,
    ) -> Result<State> {
        let geometry = build_geometry(&eta, ext, bumps, jacobian_floor)?;
        let rho = density_of(&q, &geometry, eq);
        Ok(State { t, u, q, eta, geometry, rho })
    }

    /// Check the committed-state invariants: the density corridor, the
    /// constraint rows of u, and the eta smallness bound.
    pub fn validate(&self, p: &StepperParams) -> Result<()> {
        let (rmin, rmax) = (self.rho.min(), self.rho.max());
        if rmin < p.rho_lo || rmax > p.rho_hi {
            return Err(SimError::DensityOutOfRange {
                min: rmin,
                max: rmax,
                lo: p.rho_lo,
                hi: p.rho_hi,
            });
        }
        let l_eta = diagnostics::pair_sobolev_sq(&self.eta, (4 * p.n_index) as f64 - 0.5);
        if l_eta > p.eta_delta {
            return Err(SimError::ValidationError {
                key: "state.l_eta".into(),
                msg: format!("L[eta] = {l_eta:.3e} exceeds delta = {:.3e}", p.eta_delta),
            });
        }
        let jump = {
            let mut worst = 0.0f64;
            for c in 0..3 {
                worst = worst.max(
                    self.u.comps[c]
                        .jump()
                        .iter()
                        .fold(0.0f64, |a, v| a.max(v.abs())),
                );
            }
            worst
        };
        let bottom = {
            let mut worst = 0.0f64;
            for c in 0..3 {
                worst = worst.max(
                    self.u.comps[c]
                        .trace_bottom()
                        .iter()
                        .fold(0.0f64, |a, v| a.max(v.abs())),
                );
            }
            worst
        };
        if jump > 1e-10 || bottom > 1e-10 {
            return Err(SimError::ValidationError {
                key: "state.u_constraints".into(),
                msg: format!("interface jump {jump:.2e}, bottom residual {bottom:.2e}"),
            });
        }
        Ok(())
    }
}

/// The assembled nonlinear forcing of one iterate.
pub struct Forcing {
    pub f1: VolumeVector,
    pub f2_plus: [Array2<f64>; 3],
    pub f2_minus: [Array2<f64>; 3],
    /// transport source f per (the density equation's right side)
    pub f_transport: VolumeScalar,
}

/// Taylor remainder R = int_{rhobar}^{rhobar + w} (rhobar + w - z) P''(z) dz
/// by pointwise adaptive quadrature (identically zero for isothermal laws).
pub fn taylor_remainder(
    w: &VolumeScalar,
    eq: &EquilibriumProfile,
) -> VolumeScalar {
    let torus = w.torus;
    let slab = w.slab;
    let mut out = VolumeScalar::zeros(torus, slab);
    for layer in Layer::BOTH {
        let law = *eq.law(layer);
        if matches!(law, crate::equilibrium::PressureLaw::Isothermal { .. }) {
            continue;
        }
        let nz = slab.nz(layer);
        for k in 0..nz {
            let rb = eq.rho(layer, slab.z(layer, k));
            for i1 in 0..torus.n1 {
                for i2 in 0..torus.n2 {
                    let wv = w.layer(layer)[[i1, i2, k]];
                    if wv == 0.0 {
                        continue;
                    }
                    let upper = rb + wv;
                    let integrand = move |z: f64| (upper - z) * law.d2p(z);
                    out.layer_mut(layer)[[i1, i2, k]] =
                        adaptive_simpson(&integrand, rb, upper, 1e-10);
                }
            }
        }
    }
    out
}

/// dt(theta) = b1 P_+(dt eta_+) + b2 P_-(dt eta_-): the extension operators
/// applied to a surface time-derivative pair.
pub fn theta_dot(g: &Geometry, deta: &SurfacePair) -> VolumeScalar {
    let up = g.ext.extend_upper(&deta.plus);
    let low = g.ext.extend_interface(&deta.minus);
    let torus = g.torus;
    let slab = g.slab;
    let mut out = VolumeScalar::zeros(torus, slab);
    for layer in Layer::BOTH {
        for k in 0..slab.nz(layer) {
            let z = slab.z(layer, k);
            let b1 = g.bumps.b1(z);
            let b2 = g.bumps.b2(z);
            for i1 in 0..torus.n1 {
                for i2 in 0..torus.n2 {
                    out.layer_mut(layer)[[i1, i2, k]] = b1 * up.layer(layer)[[i1, i2, k]]
                        + b2 * low.layer(layer)[[i1, i2, k]];
                }
            }
        }
    }
    out
}

/// u . N on both surfaces with plain collocation products (this variant keeps
/// the transport tangency identity exact on the grid; the surface update uses
/// the dealiased variant from `surface`).
pub fn normal_velocity_plain(u: &VolumeVector, eta: &SurfacePair) -> SurfacePair {
    let tr = UTrace::of(u);
    let mk = |trc: &[Array2<f64>; 3], e: &SurfaceField| {
        let g1 = e.derivative(0).values();
        let g2 = e.derivative(1).values();
        let vals = &trc[2] - &(&trc[0] * &g1) - &(&trc[1] * &g2);
        SurfaceField::from_values(e.spec, e.side, &vals)
    };
    SurfacePair { plus: mk(&tr.plus, &eta.plus), minus: mk(&tr.minus, &eta.minus) }
}

/// The surface equation's right side at this state: u . N for the kinematic
/// run, u . N + kappa (lap eta - Xi(t)) in kappa mode.
pub fn surface_rhs(
    state_u: &VolumeVector,
    eta: &SurfacePair,
    xi: Option<(&XiCorrector, f64)>,
    kappa: f64,
) -> SurfacePair {
    let un = normal_velocity_plain(state_u, eta);
    match xi {
        Some((corr, t)) if kappa > 0.0 => {
            let xi_t = corr.eval_pair(t);
            let lap = SurfacePair {
                plus: eta.plus.laplacian(),
                minus: eta.minus.laplacian(),
            };
            un.add(&lap.sub(&xi_t).scale(kappa))
        }
        _ => un,
    }
}

/// Strong-form viscous stress divergence div_A S_A(u) (used by the
/// compatibility-data recursion).
pub fn stress_divergence(u: &VolumeVector, g: &Geometry, p: &LameParams) -> VolumeVector {
    // G[i][j] = Acal_{ik} d_k u_j
    let grads: Vec<VolumeVector> = (0..3).map(|j| transport::grad_a(g, &u.comps[j])).collect();
    let div = grads[0].comps[0]
        .add(&grads[1].comps[1])
        .add(&grads[2].comps[2]);
    let mu = VolumeScalar::from_layer_fn(g.torus, g.slab, |layer, _, _, _| p.mu(layer));
    let mu_p = VolumeScalar::from_layer_fn(g.torus, g.slab, |layer, _, _, _| p.mu_prime(layer));
    let mut rows: Vec<VolumeVector> = Vec::with_capacity(3);
    for i in 0..3 {
        let mut comps: Vec<VolumeScalar> = Vec::with_capacity(3);
        for j in 0..3 {
            // S_ij = mu (G_ij + G_ji - 2/3 div delta_ij) + mu' div delta_ij
            let mut s = grads[j].comps[i].add(&grads[i].comps[j]).mul(&mu);
            if i == j {
                s = s.add(&div.mul(&mu_p.sub(&mu.scale(2.0 / 3.0))));
            }
            comps.push(s);
        }
        rows.push(VolumeVector {
            comps: [comps.remove(0), comps.remove(0), comps.remove(0)],
        });
    }
    VolumeVector {
        comps: [
            transport::div_a(g, &rows[0]),
            transport::div_a(g, &rows[1]),
            transport::div_a(g, &rows[2]),
        ],
    }
}

/// The viscous stress applied to the non-unit normal on one surface:
/// (S_A u N)_i at the given side, on the grid.
fn stress_normal(
    u: &VolumeVector,
    g: &Geometry,
    p: &LameParams,
    side: Side,
) -> [Array2<f64>; 3] {
    let grads: Vec<VolumeVector> = (0..3).map(|j| transport::grad_a(g, &u.comps[j])).collect();
    let div = grads[0].comps[0]
        .add(&grads[1].comps[1])
        .add(&grads[2].comps[2]);
    let (layer, mu, mu_p) = match side {
        Side::Plus => (Layer::Plus, p.mu_plus, p.mu_prime_plus),
        Side::Minus => (Layer::Plus, p.mu_plus, p.mu_prime_plus),
    };
    let _ = layer;
    let trace_of = |f: &VolumeScalar, from: Layer| match side {
        Side::Plus => f.trace_top(),
        Side::Minus => f.trace_interface(from),
    };
    let normal = g.normal(side);
    let nvec = [&normal.x, &normal.y, &normal.z];
    let mut out = [
        Array2::zeros((g.torus.n1, g.torus.n2)),
        Array2::zeros((g.torus.n1, g.torus.n2)),
        Array2::zeros((g.torus.n1, g.torus.n2)),
    ];
    let from = Layer::Plus;
    let div_tr = trace_of(&div, from);
    for i in 0..3 {
        let mut acc: Array2<f64> = Array2::zeros((g.torus.n1, g.torus.n2));
        for j in 0..3 {
            let gij = trace_of(&grads[j].comps[i], from);
            let gji = trace_of(&grads[i].comps[j], from);
            let mut s = (&gij + &gji) * mu;
            if i == j {
                s = s + &div_tr * (mu_p - mu * 2.0 / 3.0);
            }
            acc = acc + &s * nvec[j];
        }
        out[i] = acc;
    }
    out
}

/// As `stress_normal` on Sigma_-, but the interfacial jump [[S_A u]] N using
/// the per-layer viscosities.
fn stress_normal_jump(u: &VolumeVector, g: &Geometry, p: &LameParams) -> [Array2<f64>; 3] {
    let grads: Vec<VolumeVector> = (0..3).map(|j| transport::grad_a(g, &u.comps[j])).collect();
    let div = grads[0].comps[0]
        .add(&grads[1].comps[1])
        .add(&grads[2].comps[2]);
    let normal = g.normal(Side::Minus);
    let nvec = [&normal.x, &normal.y, &normal.z];
    let mut out = [
        Array2::zeros((g.torus.n1, g.torus.n2)),
        Array2::zeros((g.torus.n1, g.torus.n2)),
        Array2::zeros((g.torus.n1, g.torus.n2)),
    ];
    for i in 0..3 {
        let mut acc: Array2<f64> = Array2::zeros((g.torus.n1, g.torus.n2));
        for j in 0..3 {
            for (layer, mu, mu_p, sign) in [
                (Layer::Plus, p.mu_plus, p.mu_prime_plus, 1.0),
                (Layer::Minus, p.mu_minus, p.mu_prime_minus, -1.0),
            ] {
                let gij = grads[j].comps[i].trace_interface(layer);
                let gji = grads[i].comps[j].trace_interface(layer);
                let mut s = (&gij + &gji) * mu;
                if i == j {
                    s = s + &div.trace_interface(layer) * (mu_p - mu * 2.0 / 3.0);
                }
                acc = acc + &(&s * nvec[j]) * sign;
            }
        }
        out[i] = acc;
    }
    out
}

/// Assemble the nonlinear forcing terms of one iterate: the momentum forcing
/// F1, the traction pair F2+-, and the transport source f.
pub fn assemble_forcing(
    state: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    deta: &SurfacePair,
) -> Result<Forcing> {
    let g = &state.geometry;
    let torus = g.torus;
    let dtheta = theta_dot(g, deta);
    let d_rho = eq.d_rho_field(torus);
    let rho_bar = eq.rho_field(torus);
    let w = state.q.add(&d_rho.mul(&g.theta)); // q + d3(rhobar) theta
    let rho = rho_bar.add(&w);
    {
        let (rmin, rmax) = (rho.min(), rho.max());
        if rmin <= 0.0 || !rmin.is_finite() || !rmax.is_finite() {
            return Err(SimError::DensityOutOfRange {
                min: rmin,
                max: rmax,
                lo: p.rho_lo,
                hi: p.rho_hi,
            });
        }
    }
    // F1 = -rho (-K dt(theta) d3 u + u . grad_A u) - rhobar grad_A(h'(rhobar) q)
    //      - grad_A R - g (q + d3 rhobar theta) grad_A theta
    let k_dtheta = g.k_coef.mul(&dtheta);
    let mut f1_comps: Vec<VolumeScalar> = Vec::with_capacity(3);
    let grads_u: Vec<VolumeVector> =
        (0..3).map(|c| transport::grad_a(g, &state.u.comps[c])).collect();
    let hprime_q = {
        // h'(rhobar) q with h' = P'(rhobar)/rhobar, exact per layer
        let hp = VolumeScalar::from_layer_fn(torus, g.slab, |layer, _, _, z| {
            let r = eq.rho(layer, z);
            eq.law(layer).dp(r) / r
        });
        hp.mul(&state.q)
    };
    let grad_hq = transport::grad_a(g, &hprime_q);
    let remainder = taylor_remainder(&w, eq);
    let grad_r = transport::grad_a(g, &remainder);
    let grad_theta = transport::grad_a(g, &g.theta);
    for c in 0..3 {
        let duz = state.u.comps[c].vertical_derivative();
        let transport_term = k_dtheta.mul(&duz).scale(-1.0).add(
            &state.u.comps[0]
                .mul(&grads_u[c].comps[0])
                .add(&state.u.comps[1].mul(&grads_u[c].comps[1]))
                .add(&state.u.comps[2].mul(&grads_u[c].comps[2])),
        );
        let term = rho
            .mul(&transport_term)
            .scale(-1.0)
            .sub(&rho_bar.mul(&grad_hq.comps[c]))
            .sub(&grad_r.comps[c])
            .sub(&w.mul(&grad_theta.comps[c]).scale(p.gravity));
        f1_comps.push(term);
    }
    let f1 = VolumeVector {
        comps: [f1_comps.remove(0), f1_comps.remove(0), f1_comps.remove(0)],
    };

    // tractions
    let q_top = state.q.trace_top();
    let eta_p = state.eta.plus.values();
    let r_top = remainder.trace_top();
    let curv_rem_p = mean_curvature(&state.eta.plus)
        .sub(&state.eta.plus.laplacian())
        .values();
    let np = g.normal(Side::Plus);
    let np_vec = [&np.x, &np.y, &np.z];
    let scalar_p = {
        // -P'(rhobar_1) q + rhobar_1 g eta - R - sigma_+ (H - lap eta)
        let c1 = eq.law_plus.dp(eq.rho1);
        let mut s = Array2::zeros((torus.n1, torus.n2));
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                s[[i1, i2]] = -c1 * q_top[[i1, i2]] + eq.rho1 * p.gravity * eta_p[[i1, i2]]
                    - r_top[[i1, i2]]
                    - p.sigma_plus * curv_rem_p[[i1, i2]];
            }
        }
        s
    };
    let f2_plus = [
        &scalar_p * np_vec[0],
        &scalar_p * np_vec[1],
        &scalar_p * np_vec[2],
    ];

    let eta_m = state.eta.minus.values();
    let curv_rem_m = mean_curvature(&state.eta.minus)
        .sub(&state.eta.minus.laplacian())
        .values();
    let nm = g.normal(Side::Minus);
    let nm_vec = [&nm.x, &nm.y, &nm.z];
    let scalar_m = {
        // [[P'(rhobar) q]] - [[rhobar]] g eta + [[R]] - sigma_- (H - lap eta)
        let cp = eq.law_plus.dp(eq.rho_plus0);
        let cm = eq.law_minus.dp(eq.rho_minus0);
        let qp = state.q.trace_interface(Layer::Plus);
        let qm = state.q.trace_interface(Layer::Minus);
        let rp = remainder.trace_interface(Layer::Plus);
        let rm = remainder.trace_interface(Layer::Minus);
        let mut s = Array2::zeros((torus.n1, torus.n2));
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                s[[i1, i2]] = cp * qp[[i1, i2]] - cm * qm[[i1, i2]]
                    - eq.jump * p.gravity * eta_m[[i1, i2]]
                    + (rp[[i1, i2]] - rm[[i1, i2]])
                    - p.sigma_minus * curv_rem_m[[i1, i2]];
            }
        }
        s
    };
    let f2_minus = [
        &scalar_m * nm_vec[0],
        &scalar_m * nm_vec[1],
        &scalar_m * nm_vec[2],
    ];

    // transport source f = -div_A(rhobar u) + K dt(theta) d3^2 rhobar theta
    //                      - div_A(d3 rhobar theta u)
    let mk_vec = |s: &VolumeScalar| VolumeVector {
        comps: [
            s.mul(&state.u.comps[0]),
            s.mul(&state.u.comps[1]),
            s.mul(&state.u.comps[2]),
        ],
    };
    let d2_rho = eq.d2_rho_field(torus);
    let f_transport = transport::div_a(g, &mk_vec(&rho_bar))
        .scale(-1.0)
        .add(&k_dtheta.mul(&d2_rho).mul(&g.theta))
        .sub(&transport::div_a(g, &mk_vec(&d_rho.mul(&g.theta))));

    Ok(Forcing { f1, f2_plus, f2_minus, f_transport })
}

/// The temporal-derivative chain of the data at t = 0.
pub struct DataChain {
    pub u: Vec<VolumeVector>,
    pub q: Vec<VolumeScalar>,
    pub eta: Vec<SurfacePair>,
}

/// Right sides of the evolution system evaluated at a given state (the
/// functions F1, F2, F3 of the data recursion, with dt(eta) supplied).
fn evolution_rhs(
    state: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    deta: &SurfacePair,
) -> Result<(VolumeVector, VolumeScalar)> {
    let forcing = assemble_forcing(state, eq, p, deta)?;
    let g = &state.geometry;
    // dt u = (div_A S_A u + F1) / rho
    let sdiv = stress_divergence(&state.u, g, &p.lame);
    let inv_rho = state.rho.map(|r| 1.0 / r);
    let du = VolumeVector {
        comps: [
            sdiv.comps[0].add(&forcing.f1.comps[0]).mul(&inv_rho),
            sdiv.comps[1].add(&forcing.f1.comps[1]).mul(&inv_rho),
            sdiv.comps[2].add(&forcing.f1.comps[2]).mul(&inv_rho),
        ],
    };
    // dt q = K dt(theta) d3 q - div_A(q u) + f
    let dtheta = theta_dot(g, deta);
    let qu = VolumeVector {
        comps: [
            state.q.mul(&state.u.comps[0]),
            state.q.mul(&state.u.comps[1]),
            state.q.mul(&state.u.comps[2]),
        ],
    };
    let dq = g
        .k_coef
        .mul(&dtheta)
        .mul(&state.q.vertical_derivative())
        .sub(&transport::div_a(g, &qu))
        .add(&forcing.f_transport);
    Ok((du, dq))
}

/// Build the compatibility chain {dt^j (u, q, eta)(0)} for j <= j_max by the
/// data recursion: dt(eta) from the kinematic trace, then dt(u) and dt(q)
/// from the evolution equations; the j = 2 entries differentiate those right
/// sides along the chain by exact directional central differences.
pub fn compatibility_data(
    state0: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
) -> Result<DataChain> {
    assert!(p.j_max <= 2, "chain depth limited to 2");
    let mut u_chain = vec![state0.u.clone()];
    let mut q_chain = vec![state0.q.clone()];
    let mut eta_chain = vec![state0.eta.clone()];
    if p.j_max >= 1 {
        let eta1 = normal_velocity_plain(&state0.u, &state0.eta);
        let (u1, q1) = evolution_rhs(state0, eq, p, &eta1)?;
        u_chain.push(u1);
        q_chain.push(q1);
        eta_chain.push(eta1);
    }
    if p.j_max >= 2 {
        // dt^2 eta(0) = dt(u . N) = dt(u) . N + u . dt(N), exact product rule
        let n0 = &state0.geometry;
        let u1 = &u_chain[1];
        let eta1 = &eta_chain[1];
        let tr_u1 = UTrace::of(u1);
        let tr_u0 = UTrace::of(&state0.u);
        let mk = |side: Side| {
            let e0 = state0.eta.get(side);
            let e1 = eta1.get(side);
            let g1 = e0.derivative(0).values();
            let g2 = e0.derivative(1).values();
            let d1 = e1.derivative(0).values();
            let d2 = e1.derivative(1).values();
            let t1 = match side {
                Side::Plus => &tr_u1.plus,
                Side::Minus => &tr_u1.minus,
            };
            let t0 = match side {
                Side::Plus => &tr_u0.plus,
                Side::Minus => &tr_u0.minus,
            };
            let vals = &t1[2] - &(&t1[0] * &g1) - &(&t1[1] * &g2) - &(&t0[0] * &d1)
                - &(&t0[1] * &d2);
            SurfaceField::from_values(e0.spec, side, &vals)
        };
        let _ = n0;
        let eta2 = SurfacePair { plus: mk(Side::Plus), minus: mk(Side::Minus) };
        // dt^2 u(0), dt^2 q(0): directional derivative of the right sides
        // along the chain path (u0 + tau u1, q0 + tau q1, eta0 + tau eta1)
        let tau = 1e-5;
        let eval_at = |sgn: f64| -> Result<(VolumeVector, VolumeScalar)> {
            let s = sgn * tau;
            let eta_s = state0.eta.add(&eta_chain[1].scale(s));
            let st = State::build(
                0.0,
                state0.u.add(&u_chain[1].scale(s)),
                state0.q.add(&q_chain[1].scale(s)),
                eta_s,
                &state0.geometry.ext,
                &state0.geometry.bumps,
                eq,
                p.jacobian_floor,
            )?;
            let deta_s = eta_chain[1].add(&eta2.scale(s));
            evolution_rhs(&st, eq, p, &deta_s)
        };
        let (up, qp) = eval_at(1.0)?;
        let (um, qm) = eval_at(-1.0)?;
        u_chain.push(up.sub(&um).scale(0.5 / tau));
        q_chain.push(qp.sub(&qm).scale(0.5 / tau));
        eta_chain.push(eta2);
    }
    Ok(DataChain { u: u_chain, q: q_chain, eta: eta_chain })
}

/// Max-norm residuals of the j = 0 and j = 1 compatibility conditions.
#[derive(Debug, Clone, Copy)]
pub struct CompatReport {
    pub dynamic_plus: f64,
    pub dynamic_minus: f64,
    pub jump_u: f64,
    pub bottom_u: f64,
    pub dynamic_plus_j1: Option<f64>,
    pub dynamic_minus_j1: Option<f64>,
}

fn dynamic_residuals(
    state: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
) -> (Array2<f64>, Array2<f64>) {
    // Sigma_+: P'(rhobar) q N - S_A u N - rhobar_1 g eta N + sigma_+ H N + R N
    let g = &state.geometry;
    let torus = g.torus;
    let d_rho = eq.d_rho_field(torus);
    let w = state.q.add(&d_rho.mul(&g.theta));
    let remainder = taylor_remainder(&w, eq);
    let sn_p = stress_normal(&state.u, g, &p.lame, Side::Plus);
    let sn_jump = stress_normal_jump(&state.u, g, &p.lame);
    let q_top = state.q.trace_top();
    let r_top = remainder.trace_top();
    let eta_p = state.eta.plus.values();
    let curv_p = mean_curvature(&state.eta.plus).values();
    let np = g.normal(Side::Plus);
    let np_vec = [&np.x, &np.y, &np.z];
    let mut res_p: Array2<f64> = Array2::zeros((torus.n1, torus.n2));
    for c in 0..3 {
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                let lhs = eq.law_plus.dp(eq.rho1) * q_top[[i1, i2]] * np_vec[c][[i1, i2]]
                    - sn_p[c][[i1, i2]];
                let rhs = eq.rho1 * p.gravity * eta_p[[i1, i2]] * np_vec[c][[i1, i2]]
                    - p.sigma_plus * curv_p[[i1, i2]] * np_vec[c][[i1, i2]]
                    - r_top[[i1, i2]] * np_vec[c][[i1, i2]];
                let r = (lhs - rhs).abs();
                if r > res_p[[i1, i2]] {
                    res_p[[i1, i2]] = r;
                }
            }
        }
    }
    let qp = state.q.trace_interface(Layer::Plus);
    let qm = state.q.trace_interface(Layer::Minus);
    let rp = remainder.trace_interface(Layer::Plus);
    let rm = remainder.trace_interface(Layer::Minus);
    let eta_m = state.eta.minus.values();
    let curv_m = mean_curvature(&state.eta.minus).values();
    let nm = g.normal(Side::Minus);
    let nm_vec = [&nm.x, &nm.y, &nm.z];
    let mut res_m: Array2<f64> = Array2::zeros((torus.n1, torus.n2));
    for c in 0..3 {
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                let jump_pq = eq.law_plus.dp(eq.rho_plus0) * qp[[i1, i2]]
                    - eq.law_minus.dp(eq.rho_minus0) * qm[[i1, i2]];
                let lhs = jump_pq * nm_vec[c][[i1, i2]] - sn_jump[c][[i1, i2]];
                let rhs = eq.jump * p.gravity * eta_m[[i1, i2]] * nm_vec[c][[i1, i2]]
                    + p.sigma_minus * curv_m[[i1, i2]] * nm_vec[c][[i1, i2]]
                    - (rp[[i1, i2]] - rm[[i1, i2]]) * nm_vec[c][[i1, i2]];
                let r = (lhs - rhs).abs();
                if r > res_m[[i1, i2]] {
                    res_m[[i1, i2]] = r;
                }
            }
        }
    }
    (res_p, res_m)
}

/// Evaluate the compatibility residuals of a data chain (the dynamic boundary
/// rows on both surfaces and the jump/no-slip rows).
pub fn check_compatibility(
    chain: &DataChain,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    state0: &State,
) -> Result<CompatReport> {
    let (rp, rm) = dynamic_residuals(state0, eq, p);
    let maxof = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut jump_u = 0.0f64;
    let mut bottom_u = 0.0f64;
    for c in 0..3 {
        jump_u = jump_u.max(maxof(&state0.u.comps[c].jump()));
        bottom_u = bottom_u.max(maxof(&state0.u.comps[c].trace_bottom()));
    }
    // j = 1 rows by directional differencing of the residual map along the chain
    let (d1p, d1m) = if chain.u.len() >= 2 {
        let tau = 1e-5;
        let eval = |sgn: f64| -> Result<(Array2<f64>, Array2<f64>)> {
            let s = sgn * tau;
            let st = State::build(
                0.0,
                state0.u.add(&chain.u[1].scale(s)),
                state0.q.add(&chain.q[1].scale(s)),
                state0.eta.add(&chain.eta[1].scale(s)),
                &state0.geometry.ext,
                &state0.geometry.bumps,
                eq,
                p.jacobian_floor,
            )?;
            Ok(dynamic_residuals(&st, eq, p))
        };
        let (pp, pm) = eval(1.0)?;
        let (mp, mm) = eval(-1.0)?;
        let dp = ndarray::Zip::from(&pp).and(&mp).fold(0.0f64, |acc, a, b| {
            acc.max(((a - b) / (2.0 * tau)).abs())
        });
        let dm = ndarray::Zip::from(&pm).and(&mm).fold(0.0f64, |acc, a, b| {
            acc.max(((a - b) / (2.0 * tau)).abs())
        });
        (Some(dp), Some(dm))
    } else {
        (None, None)
    };
    Ok(CompatReport {
        dynamic_plus: maxof(&rp),
        dynamic_minus: maxof(&rm),
        jump_u,
        bottom_u,
        dynamic_plus_j1: d1p,
        dynamic_minus_j1: d1m,
    })
}

/// Constraint projection of raw initial data: zero the bottom nodes of u and
/// average the two interface traces; q is never modified.
pub fn prepare_initial_data(
    u_raw: &VolumeVector,
    q_raw: &VolumeScalar,
    eta0: &SurfacePair,
    ext: &crate::geometry::Extensions,
    bumps: &crate::geometry::BumpProfiles,
    eq: &EquilibriumProfile,
    p: &StepperParams,
) -> Result<(State, CompatReport)> {
    let torus = u_raw.torus();
    let slab = u_raw.slab();
    if !u_raw.is_finite() || !q_raw.is_finite() {
        return Err(SimError::DomainError("non-finite initial fields".into()));
    }
    let mut u = u_raw.clone();
    let nzm = slab.nz_minus;
    for c in 0..3 {
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                u.comps[c].minus[[i1, i2, 0]] = 0.0;
                let avg = 0.5
                    * (u.comps[c].plus[[i1, i2, 0]] + u.comps[c].minus[[i1, i2, nzm - 1]]);
                u.comps[c].plus[[i1, i2, 0]] = avg;
                u.comps[c].minus[[i1, i2, nzm - 1]] = avg;
            }
        }
    }
    let state = State::build(0.0, u, q_raw.clone(), eta0.clone(), ext, bumps, eq, p.jacobian_floor)?;
    let chain = DataChain {
        u: vec![state.u.clone()],
        q: vec![state.q.clone()],
        eta: vec![state.eta.clone()],
    };
    let report = check_compatibility(&chain, eq, p, &state)?;
    Ok((state, report))
}

/// Low-regularity contraction norms of an iterate difference, with the
/// temporal derivatives realized as the difference at the new level over dt
/// (iterates share their initial data, so earlier levels cancel).
pub fn contraction_norms(
    du: &VolumeVector,
    dq: &VolumeScalar,
    deta: &SurfacePair,
    dt: f64,
    sigma_plus: f64,
    sigma_minus: f64,
) -> Result<(f64, f64)> {
    let s_max = 5.0;
    let dtu = du.scale(1.0 / dt);
    let dtq = dq.scale(1.0 / dt);
    let dteta = deta.scale(1.0 / dt);
    let dt2eta = deta.scale(1.0 / (dt * dt));
    let grad = |f: &SurfacePair| {
        [
            SurfacePair { plus: f.plus.derivative(0), minus: f.minus.derivative(0) },
            SurfacePair { plus: f.plus.derivative(1), minus: f.minus.derivative(1) },
        ]
    };
    let mut w_inf = diagnostics::vector_sobolev_sq(du, 2.0, s_max)?
        + diagnostics::vector_sobolev_sq(&dtu, 0.0, s_max)?
        + diagnostics::volume_sobolev_sq(dq, 2.0, s_max)?
        + diagnostics::volume_sobolev_sq(&dtq, 1.0, s_max)?
        + diagnostics::pair_sobolev_sq(deta, 2.5)
        + diagnostics::pair_sobolev_sq(&dteta, 1.5);
    for gp in grad(deta) {
        w_inf += diagnostics::pair_sobolev_sq_weighted(&gp, 2.0, sigma_plus, sigma_minus);
    }
    for gp in grad(&dteta) {
        w_inf += diagnostics::pair_sobolev_sq_weighted(&gp, 0.0, sigma_plus, sigma_minus);
    }
    let w_2 = diagnostics::vector_sobolev_sq(du, 3.0, s_max)?
        + diagnostics::vector_sobolev_sq(&dtu, 1.0, s_max)?
        + diagnostics::pair_sobolev_sq_weighted(
            deta,
            3.5,
            sigma_plus * sigma_plus,
            sigma_minus * sigma_minus,
        )
        + diagnostics::pair_sobolev_sq(&dt2eta, 0.5);
    Ok((w_inf, w_2))
}

/// Fourier-multiplier seed: eval(t) reproduces the chain derivatives at
/// t = 0 (phi_j(0) = delta_j0 makes eval(0) the j = 0 data exactly).
pub struct SeedExtension {
    phi: PhiProfiles,
    torus: TorusSpec,
    slab: SlabSpec,
    /// horizontal spectra of the chain entries: [j][component][layer-level]
    u_spec: Vec<[Vec<Array2<Complex64>>; 3]>,
    q_spec: Vec<Vec<Array2<Complex64>>>,
    q_spec_minus: Vec<Vec<Array2<Complex64>>>,
    u_spec_minus: Vec<[Vec<Array2<Complex64>>; 3]>,
    eta_spec: Vec<[Array2<Complex64>; 2]>,
}

fn level_spectra(f: &VolumeScalar, layer: Layer) -> Vec<Array2<Complex64>> {
    let arr = f.layer(layer);
    let (_, _, nz) = arr.dim();
    (0..nz)
        .map(|k| {
            let lvl = Array2::from_shape_fn((f.torus.n1, f.torus.n2), |(i, j)| arr[[i, j, k]]);
            spectral::grid_to_coeffs(&lvl)
        })
        .collect()
}

/// Build the Picard seed from the data chain by the multiplier ansatz
/// F_hat_j(xi, t) = phi_j(t <xi>^2) f_hat_j(xi) <xi>^{-2j} per field
/// (<xi> instead of <xi>^2 in the j = 0 surface term).
pub fn seed_extension(chain: &DataChain, torus: TorusSpec, slab: SlabSpec) -> SeedExtension {
    let j_max = chain.u.len() - 1;
    let phi = PhiProfiles::new(j_max.max(1));
    let u_spec = chain
        .u
        .iter()
        .map(|u| {
            [
                level_spectra(&u.comps[0], Layer::Plus),
                level_spectra(&u.comps[1], Layer::Plus),
                level_spectra(&u.comps[2], Layer::Plus),
            ]
        })
        .collect();
    let u_spec_minus = chain
        .u
        .iter()
        .map(|u| {
            [
                level_spectra(&u.comps[0], Layer::Minus),
                level_spectra(&u.comps[1], Layer::Minus),
                level_spectra(&u.comps[2], Layer::Minus),
            ]
        })
        .collect();
    let q_spec = chain.q.iter().map(|q| level_spectra(q, Layer::Plus)).collect();
    let q_spec_minus = chain.q.iter().map(|q| level_spectra(q, Layer::Minus)).collect();
    let eta_spec = chain
        .eta
        .iter()
        .map(|e| [e.plus.coeffs.clone(), e.minus.coeffs.clone()])
        .collect();
    SeedExtension {
        phi,
        torus,
        slab,
        u_spec,
        q_spec,
        q_spec_minus,
        u_spec_minus,
        eta_spec,
    }
}

impl SeedExtension {
    fn synth_volume(
        &self,
        spec_plus: &[Vec<Array2<Complex64>>],
        spec_minus: &[Vec<Array2<Complex64>>],
        t: f64,
    ) -> VolumeScalar {
        let torus = self.torus;
        let mut out = VolumeScalar::zeros(torus, self.slab);
        for (layer, specs) in [(Layer::Plus, spec_plus), (Layer::Minus, spec_minus)] {
            let nz = self.slab.nz(layer);
            for k in 0..nz {
                let mut coeffs: Array2<Complex64> = Array2::zeros((torus.n1, torus.n2));
                for (j, levels) in specs.iter().enumerate() {
                    for k1 in 0..torus.n1 {
                        for k2 in 0..torus.n2 {
                            let m = torus.xi_mag(k1, k2);
                            let br2 = 1.0 + m * m;
                            let mult = self.phi.eval(j, t * br2) * br2.powi(-(j as i32));
                            coeffs[[k1, k2]] += levels[k][[k1, k2]] * mult;
                        }
                    }
                }
                let grid = spectral::coeffs_to_grid(&coeffs);
                out.layer_mut(layer)
                    .index_axis_mut(ndarray::Axis(2), k)
                    .assign(&grid);
            }
        }
        out
    }

    pub fn eval(&self, t: f64) -> (VolumeVector, VolumeScalar, SurfacePair) {
        // velocity components
        let mut u_comps: Vec<VolumeScalar> = Vec::with_capacity(3);
        for c in 0..3 {
            let plus: Vec<Vec<Array2<Complex64>>> =
                self.u_spec.iter().map(|j| j[c].clone()).collect();
            let minus: Vec<Vec<Array2<Complex64>>> =
                self.u_spec_minus.iter().map(|j| j[c].clone()).collect();
            u_comps.push(self.synth_volume(&plus, &minus, t));
        }
        let u = VolumeVector {
            comps: [u_comps.remove(0), u_comps.remove(0), u_comps.remove(0)],
        };
        let q = self.synth_volume(&self.q_spec, &self.q_spec_minus, t);
        // eta: j = 0 term uses phi_0(t <xi>), j >= 1 the parabolic scaling
        let torus = self.torus;
        let mut eta_out = SurfacePair::zeros(torus);
        for (side_idx, side) in [Side::Plus, Side::Minus].iter().enumerate() {
            let mut coeffs: Array2<Complex64> = Array2::zeros((torus.n1, torus.n2));
            for (j, e) in self.eta_spec.iter().enumerate() {
                for k1 in 0..torus.n1 {
                    for k2 in 0..torus.n2 {
                        let m = torus.xi_mag(k1, k2);
                        let br = (1.0 + m * m).sqrt();
                        let mult = if j == 0 {
                            self.phi.eval(0, t * br)
                        } else {
                            self.phi.eval(j, t * br * br) * (br * br).powi(-(j as i32))
                        };
                        coeffs[[k1, k2]] += e[side_idx][[k1, k2]] * mult;
                    }
                }
            }
            let f = SurfaceField { spec: torus, side: *side, coeffs };
            match side {
                Side::Plus => eta_out.plus = f,
                Side::Minus => eta_out.minus = f,
            }
        }
        (u, q, eta_out)
    }
}

/// Per-step convergence statistics.
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub iterations: usize,
    /// W_inf + dt W_2 of successive iterate differences
    pub diffs: Vec<f64>,
    /// ratios of successive diffs (the measured contraction factors)
    pub ratios: Vec<f64>,
    pub cg_iterations: usize,
}

/// One Picard iterate update: assemble forcing from `prev`, solve the Lame
/// step on the lagged geometry, advance the surfaces, refresh, then solve
/// transport with the new pair.
pub fn picard_step(
    prev: &State,
    base: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    xi: Option<&XiCorrector>,
) -> Result<(State, usize)> {
    let dt = p.dt;
    let t_new = base.t + dt;
    let kappa = if p.use_kappa { p.kappa } else { 0.0 };
    // surface right side of the previous iterate drives dt(theta) in F1
    let xi_arg = xi.map(|x| (x, prev.t));
    let deta_prev = surface_rhs(&prev.u, &prev.eta, xi_arg, kappa);
    let forcing = assemble_forcing(prev, eq, p, &deta_prev)?;
    let mut cg_total = 0;

    let mut eta_new = prev.eta.clone();
    let mut u_new = prev.u.clone();
    let mut geom = prev.geometry.clone();
    for refresh in 0..=p.geometry_refreshes {
        let op = lame::assemble_lame(&geom, &prev.rho, dt, &p.lame)?;
        let tr = TractionData {
            f2_plus: forcing.f2_plus.clone(),
            f2_minus: forcing.f2_minus.clone(),
            sigma_plus: p.sigma_plus,
            sigma_minus: p.sigma_minus,
            eta: if refresh == 0 { prev.eta.clone() } else { eta_new.clone() },
        };
        let (u_sol, iters) = lame::solve_lame_step(&op, &base.u, &forcing.f1, &tr)?;
        cg_total += iters;
        u_new = u_sol;
        // surface update from the committed base state with the new velocity
        let tr_old = UTrace::of(&base.u);
        let tr_new = UTrace::of(&u_new);
        eta_new = if p.use_kappa {
            let un_old = surface::normal_velocity_pair(&tr_old, &base.eta);
            let un_new = surface::normal_velocity_pair(&tr_new, &eta_new);
            surface::advance_eta_kappa(
                &base.eta,
                &un_old,
                &un_new,
                xi.expect("kappa mode requires the corrector"),
                p.kappa,
                dt,
                base.t,
            )
        } else {
            surface::advance_eta_kinematic(&base.eta, &tr_old, &tr_new, dt, p.cfl_max)?
        };
        geom = build_geometry(&eta_new, &prev.geometry.ext, &prev.geometry.bumps, p.jacobian_floor)?;
    }

    // transport for q with coefficients from the committed state and the new pair
    let deta_base = normal_velocity_plain(&base.u, &base.eta);
    let dtheta_base = theta_dot(&base.geometry, &deta_base);
    let co_old = transport::build_transport_coefficients(
        &base.u,
        &base.geometry,
        eq,
        &dtheta_base,
        p.boundary_tol,
    )?;
    let deta_new = normal_velocity_plain(&u_new, &eta_new);
    let dtheta_new = theta_dot(&geom, &deta_new);
    let co_new =
        transport::build_transport_coefficients(&u_new, &geom, eq, &dtheta_new, p.boundary_tol)?;
    let mut hist = CoeffHistory::new();
    hist.push(base.t, co_old);
    hist.push(t_new, co_new);
    let q_new = transport::solve_transport(&base.q, &hist, t_new, p.clip_transport)?;

    let rho_new = density_of(&q_new, &geom, eq);
    Ok((
        State { t: t_new, u: u_new, q: q_new, eta: eta_new, geometry: geom, rho: rho_new },
        cg_total,
    ))
}

/// Advance one committed time step: iterate `picard_step` until the
/// contraction norm of successive iterates falls below tolerance, then
/// re-validate the invariants and commit.
pub fn advance_time_step(
    base: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    xi: Option<&XiCorrector>,
    seed: Option<&SeedExtension>,
) -> Result<(State, StepStats)> {
    let mut stats = StepStats::default();
    // iterate 0: the seed extension at t + dt (first step) or constant
    // extrapolation of the committed state
    let mut prev = match seed {
        Some(s) => {
            let (u, q, eta) = s.eval(base.t + p.dt);
            State::build(
                base.t + p.dt,
                u,
                q,
                eta,
                &base.geometry.ext,
                &base.geometry.bumps,
                eq,
                p.jacobian_floor,
            )?
        }
        None => base.clone(),
    };
    let mut last_diff = f64::INFINITY;
    for it in 0..p.max_picard {
        let (next, cg) = picard_step(&prev, base, eq, p, xi)?;
        stats.cg_iterations += cg;
        stats.iterations = it + 1;
        let du = next.u.sub(&prev.u);
        let dq = next.q.sub(&prev.q);
        let deta = next.eta.sub(&prev.eta);
        let (w_inf, w_2) =
            contraction_norms(&du, &dq, &deta, p.dt, p.sigma_plus, p.sigma_minus)?;
        let diff = w_inf + p.dt * w_2;
        if !stats.diffs.is_empty() && last_diff > 0.0 {
            stats.ratios.push(diff / last_diff);
        }
        stats.diffs.push(diff);
        last_diff = diff;
        prev = next;
        if diff < p.picard_tol {
            prev.validate(p)?;
            if prev.geometry.jac.min() <= p.jacobian_floor {
                return Err(SimError::DegenerateJacobian {
                    min_j: prev.geometry.jac.min(),
                    floor: p.jacobian_floor,
                });
            }
            return Ok((prev, stats));
        }
    }
    Err(SimError::PicardStall {
        iters: p.max_picard,
        ratio: stats.ratios.last().copied().unwrap_or(f64::NAN),
        tol: p.picard_tol,
    })
}

/// Step with the rejection policy: on failure halve dt and retry, up to
/// `reject_retries` times.  Returns the committed state, its stats, and the
/// dt actually used.
pub fn advance_with_rejection(
    base: &State,
    eq: &EquilibriumProfile,
    p: &StepperParams,
    xi: Option<&XiCorrector>,
    seed: Option<&SeedExtension>,
) -> Result<(State, StepStats, f64, usize)> {
    let mut local = p.clone();
    let mut rejections = 0;
    loop {
        match advance_time_step(base, eq, &local, xi, seed) {
            Ok((state, stats)) => return Ok((state, stats, local.dt, rejections)),
            Err(e) => {
                rejections += 1;
                if rejections > p.reject_retries {
                    return Err(e);
                }
                local.dt *= 0.5;
            }
        }
    }
}
