//! Free-surface advancement: the kappa-regularized heat update
//!
//!   dt eta - kappa lap_* eta = u . N - kappa Xi   on Sigma,
//!
//! with the corrector Xi chosen so the t = 0 compatibility data match the
//! kinematic problem's, and the pure kinematic update dt eta = u . N used
//! once kappa -> 0.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::fields::{Layer, Side, SurfaceField, SurfacePair, VolumeVector};
use crate::spectral::{self, TorusSpec};

/// Compactly supported profile functions phi_j with phi_j^(k)(0) = delta_jk,
/// built from the standard mollifier bump B(t) = e^{-1/(1-t^2)} as
/// phi_j(t) = sum_m a_m t^m B(t) with a small triangular solve for the a_m.
#[derive(Debug, Clone)]
pub struct PhiProfiles {
    /// coeffs[j][m] multiplies t^m B(t) in phi_j
    coeffs: Vec<Vec<f64>>,
}

fn bump(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (-1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

fn bump_deriv(t: f64) -> f64 {
    if t.abs() < 1.0 {
        let s = 1.0 - t * t;
        bump(t) * (-2.0 * t / (s * s))
    } else {
        0.0
    }
}

/// B^(k)(0) for k = 0..=4 (odd derivatives vanish; B is even).
const BUMP_DERIVS_AT_ZERO: [f64; 5] = [1.0, 0.0, -2.0, 0.0, -12.0];

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

impl PhiProfiles {
    pub fn new(j_max: usize) -> Self {
        assert!(j_max <= 4, "bump derivative table covers orders <= 4");
        let e = (-1.0f64).exp();
        let n = j_max + 1;
        // M[k][m] = d^k/dt^k (t^m B)|_0 = C(k,m) m! B^(k-m)(0), lower triangular
        let mut m = vec![vec![0.0; n]; n];
        for k in 0..n {
            for mm in 0..=k {
                m[k][mm] = binomial(k, mm) * factorial(mm) * BUMP_DERIVS_AT_ZERO[k - mm] * e;
            }
        }
        let mut coeffs = Vec::with_capacity(n);
        for j in 0..n {
            let mut a = vec![0.0; n];
            for k in 0..n {
                let mut rhs = if k == j { 1.0 } else { 0.0 };
                for mm in 0..k {
                    rhs -= m[k][mm] * a[mm];
                }
                a[k] = rhs / m[k][k];
            }
            coeffs.push(a);
        }
        PhiProfiles { coeffs }
    }

    pub fn eval(&self, j: usize, t: f64) -> f64 {
        let b = bump(t);
        if b == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut tp = 1.0;
        for a in &self.coeffs[j] {
            acc += a * tp;
            tp *= t;
        }
        acc * b
    }

    pub fn eval_deriv(&self, j: usize, t: f64) -> f64 {
        let b = bump(t);
        let bp = bump_deriv(t);
        if b == 0.0 && bp == 0.0 {
            return 0.0;
        }
        let mut poly = 0.0;
        let mut dpoly = 0.0;
        let mut tp = 1.0;
        for (m, a) in self.coeffs[j].iter().enumerate() {
            poly += a * tp;
            if m > 0 {
                dpoly += a * m as f64 * tp / t.max(f64::MIN_POSITIVE);
            }
            tp *= t;
        }
        // handle t = 0 exactly for the linear coefficient
        if t == 0.0 {
            dpoly = if self.coeffs[j].len() > 1 { self.coeffs[j][1] } else { 0.0 };
        }
        dpoly * b + poly * bp
    }
}

/// Time-extended corrector Xi on both surfaces: per mode
/// Xi_hat(xi, t) = sum_j phi_j(t <xi>^2) f_hat_j(xi) <xi>^{-2j}
/// with f_0 = lap_* eta_0 and f_j = lap_* (dt^j eta)(0) for j >= 1.
#[derive(Debug, Clone)]
pub struct XiCorrector {
    pub torus: TorusSpec,
    phi: PhiProfiles,
    /// spectral chain data (lap_* of the eta time derivatives), per side
    data_plus: Vec<Array2<Complex64>>,
    data_minus: Vec<Array2<Complex64>>,
}

impl XiCorrector {
    /// Build from the eta time-derivative chain {dt^j eta(0)}_{j=0..=j_max}
    /// (dt^j eta(0) = dt^{j-1}(u . N)(0) for the compatible data chain).
    pub fn build(eta_chain: &[SurfacePair], j_max: usize) -> Self {
        assert!(eta_chain.len() > j_max);
        let torus = eta_chain[0].plus.spec;
        let lap = |f: &SurfaceField| f.laplacian().coeffs;
        let data_plus: Vec<_> = (0..=j_max).map(|j| lap(&eta_chain[j].plus)).collect();
        let data_minus: Vec<_> = (0..=j_max).map(|j| lap(&eta_chain[j].minus)).collect();
        XiCorrector { torus, phi: PhiProfiles::new(j_max), data_plus, data_minus }
    }

    /// Corrector that is identically zero (used when no chain is available).
    pub fn zero(torus: TorusSpec) -> Self {
        XiCorrector {
            torus,
            phi: PhiProfiles::new(0),
            data_plus: vec![Array2::zeros((torus.n1, torus.n2))],
            data_minus: vec![Array2::zeros((torus.n1, torus.n2))],
        }
    }

    fn data(&self, side: Side) -> &[Array2<Complex64>] {
        match side {
            Side::Plus => &self.data_plus,
            Side::Minus => &self.data_minus,
        }
    }

    pub fn eval(&self, side: Side, t: f64) -> SurfaceField {
        let torus = self.torus;
        let mut coeffs: Array2<Complex64> = Array2::zeros((torus.n1, torus.n2));
        for (j, f) in self.data(side).iter().enumerate() {
            for k1 in 0..torus.n1 {
                for k2 in 0..torus.n2 {
                    let xi2 = {
                        let m = torus.xi_mag(k1, k2);
                        1.0 + m * m
                    };
                    let mult = self.phi.eval(j, t * xi2) * xi2.powi(-(j as i32));
                    coeffs[[k1, k2]] += f[[k1, k2]] * mult;
                }
            }
        }
        SurfaceField { spec: torus, side, coeffs }
    }

    /// Time derivative dt Xi (for the matching-condition checks).
    pub fn eval_dt(&self, side: Side, t: f64) -> SurfaceField {
        let torus = self.torus;
        let mut coeffs: Array2<Complex64> = Array2::zeros((torus.n1, torus.n2));
        for (j, f) in self.data(side).iter().enumerate() {
            for k1 in 0..torus.n1 {
                for k2 in 0..torus.n2 {
                    let xi2 = {
                        let m = torus.xi_mag(k1, k2);
                        1.0 + m * m
                    };
                    let mult = self.phi.eval_deriv(j, t * xi2) * xi2 * xi2.powi(-(j as i32));
                    coeffs[[k1, k2]] += f[[k1, k2]] * mult;
                }
            }
        }
        SurfaceField { spec: torus, side, coeffs }
    }

    pub fn eval_pair(&self, t: f64) -> SurfacePair {
        SurfacePair { plus: self.eval(Side::Plus, t), minus: self.eval(Side::Minus, t) }
    }
}

/// Traces of a velocity field on the two free surfaces.
#[derive(Debug, Clone)]
pub struct UTrace {
    pub plus: [Array2<f64>; 3],
    pub minus: [Array2<f64>; 3],
}

impl UTrace {
    pub fn of(u: &VolumeVector) -> Self {
        let get = |c: usize, side: Side| match side {
            Side::Plus => u.comps[c].trace_top(),
            Side::Minus => u.comps[c].trace_interface(Layer::Plus),
        };
        UTrace {
            plus: [get(0, Side::Plus), get(1, Side::Plus), get(2, Side::Plus)],
            minus: [get(0, Side::Minus), get(1, Side::Minus), get(2, Side::Minus)],
        }
    }

    pub fn side(&self, side: Side) -> &[Array2<f64>; 3] {
        match side {
            Side::Plus => &self.plus,
            Side::Minus => &self.minus,
        }
    }

    pub fn zero(torus: TorusSpec) -> Self {
        let z = || Array2::zeros((torus.n1, torus.n2));
        UTrace { plus: [z(), z(), z()], minus: [z(), z(), z()] }
    }

    pub fn max_horizontal(&self) -> f64 {
        let m = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        m(&self.plus[0]).max(m(&self.plus[1])).max(m(&self.minus[0])).max(m(&self.minus[1]))
    }
}

/// u . N = u3 - u1 d1 eta - u2 d2 eta on one surface, with 3/2-dealiased
/// pseudo-spectral products.
pub fn normal_velocity(trace: &[Array2<f64>; 3], eta: &SurfaceField) -> SurfaceField {
    let g1 = eta.derivative(0).values();
    let g2 = eta.derivative(1).values();
    let p1 = spectral::dealiased_product(&trace[0], &g1);
    let p2 = spectral::dealiased_product(&trace[1], &g2);
    let vals = &trace[2] - &p1 - &p2;
    SurfaceField::from_values(eta.spec, eta.side, &vals)
}

pub fn normal_velocity_pair(trace: &UTrace, eta: &SurfacePair) -> SurfacePair {
    SurfacePair {
        plus: normal_velocity(&trace.plus, &eta.plus),
        minus: normal_velocity(&trace.minus, &eta.minus),
    }
}

/// One kappa-heat step by the exact per-mode integrating factor with the
/// right side held at its midpoint value (trapezoid of the endpoint values,
/// corrector evaluated analytically at t + dt/2):
///   eta_hat(t+dt) = E eta_hat(t) + R_hat (1 - E)/(kappa |xi|^2),
///   E = e^{-kappa |xi|^2 dt}.
pub fn advance_eta_kappa(
    eta: &SurfacePair,
    un_old: &SurfacePair,
    un_new: &SurfacePair,
    xi: &XiCorrector,
    kappa: f64,
    dt: f64,
    t: f64,
) -> SurfacePair {
    let advance = |e: &SurfaceField, r_old: &SurfaceField, r_new: &SurfaceField, side: Side| {
        let torus = e.spec;
        let xi_mid = xi.eval(side, t + 0.5 * dt);
        let mut coeffs = e.coeffs.clone();
        for k1 in 0..torus.n1 {
            for k2 in 0..torus.n2 {
                let lam = {
                    let m = torus.xi_mag(k1, k2);
                    m * m
                };
                let r_mid = 0.5 * (r_old.coeffs[[k1, k2]] + r_new.coeffs[[k1, k2]])
                    - kappa * xi_mid.coeffs[[k1, k2]];
                let kl = kappa * lam;
                let (decay, gain) = if kl * dt < 1e-12 {
                    (1.0, dt)
                } else {
                    let e = (-kl * dt).exp();
                    (e, (1.0 - e) / kl)
                };
                coeffs[[k1, k2]] = coeffs[[k1, k2]] * decay + r_mid * gain;
            }
        }
        SurfaceField { spec: torus, side, coeffs }
    };
    SurfacePair {
        plus: advance(&eta.plus, &un_old.plus, &un_new.plus, Side::Plus),
        minus: advance(&eta.minus, &un_old.minus, &un_new.minus, Side::Minus),
    }
}

/// One kinematic step dt eta = u . N by SSP-RK2 (Heun), with the velocity
/// trace at the start and end of the step.
pub fn advance_eta_kinematic(
    eta: &SurfacePair,
    tr_old: &UTrace,
    tr_new: &UTrace,
    dt: f64,
    cfl_max: f64,
) -> Result<SurfacePair> {
    let torus = eta.plus.spec;
    let xi_max = {
        let x1 = (torus.n1 / 2) as f64 / torus.l1;
        let x2 = (torus.n2 / 2) as f64 / torus.l2;
        (x1 * x1 + x2 * x2).sqrt()
    };
    let umax = tr_old.max_horizontal().max(tr_new.max_horizontal());
    let cfl = dt * umax * xi_max;
    if cfl > cfl_max {
        return Err(SimError::CflViolation { value: cfl, max: cfl_max });
    }
    let g_old = normal_velocity_pair(tr_old, eta);
    let stage1 = eta.add(&g_old.scale(dt));
    let g_new = normal_velocity_pair(tr_new, &stage1);
    let stage2 = stage1.add(&g_new.scale(dt));
    Ok(eta.add(&stage2).scale(0.5))
}

/// Deviation report of a kappa ladder against the kappa = 0 run.
#[derive(Debug, Clone)]
pub struct KappaLadderReport {
    pub kappas: Vec<f64>,
    /// max-in-time H1 surface deviation from the kappa = 0 trajectory
    pub deviations: Vec<f64>,
    /// empirical order between consecutive kappa levels
    pub orders: Vec<f64>,
}

/// Run the provided closure at each kappa (and at kappa = 0) and measure the
/// max-in-time discrete H1 surface deviation from the kappa = 0 trajectory.
pub fn kappa_ladder(
    run: impl Fn(f64) -> Result<Vec<SurfacePair>>,
    kappas: &[f64],
) -> Result<KappaLadderReport> {
    let base = run(0.0)?;
    let mut deviations = Vec::with_capacity(kappas.len());
    for &k in kappas {
        let traj = run(k)?;
        let mut worst = 0.0f64;
        for (a, b) in traj.iter().zip(base.iter()) {
            let d = a.sub(b);
            let h1 = d.plus.sobolev_sq(1.0) + d.minus.sobolev_sq(1.0);
            worst = worst.max(h1.sqrt());
        }
        deviations.push(worst);
    }
    let mut orders = Vec::new();
    for i in 0..deviations.len().saturating_sub(1) {
        let num = (deviations[i] / deviations[i + 1]).ln();
        let den = (kappas[i] / kappas[i + 1]).ln();
        orders.push(num / den);
    }
    Ok(KappaLadderReport { kappas: kappas.to_vec(), deviations, orders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn torus() -> TorusSpec {
        TorusSpec::new(1.0, 1.0, 16, 16).unwrap()
    }

    #[test]
    fn phi_profiles_match_kronecker_conditions() {
        let j_max = 2;
        let phi = PhiProfiles::new(j_max);
        let h = 1e-5;
        for j in 0..=j_max {
            // sampled derivatives at zero by one-sided differences of high order
            let f = |t: f64| phi.eval(j, t);
            let d0 = f(0.0);
            let d1 = phi.eval_deriv(j, 0.0);
            let d2 = (2.0 * f(0.0) - 5.0 * f(h) + 4.0 * f(2.0 * h) - f(3.0 * h)) / (h * h);
            let expect = |k: usize| if k == j { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(d0, expect(0), epsilon = 1e-10);
            assert_abs_diff_eq!(d1, expect(1), epsilon = 1e-9);
            assert_abs_diff_eq!(d2, expect(2), epsilon = 1e-4);
            // compact support
            assert_eq!(f(1.5), 0.0);
        }
    }

    #[test]
    fn xi_zero_data_gives_zero() {
        let t = torus();
        let chain = vec![SurfacePair::zeros(t); 3];
        let xi = XiCorrector::build(&chain, 2);
        assert!(xi.eval(Side::Plus, 0.0).l2_sq() < 1e-28);
        assert!(xi.eval(Side::Minus, 0.3).l2_sq() < 1e-28);
    }

    #[test]
    fn xi_matches_laplacian_at_time_zero() {
        let t = torus();
        let eta0 = SurfaceField::from_fn(t, Side::Plus, |x, _| 0.1 * (2.0 * x / t.l1).sin());
        let chain = vec![
            SurfacePair { plus: eta0.clone(), minus: SurfaceField::zeros(t, Side::Minus) },
            SurfacePair::zeros(t),
            SurfacePair::zeros(t),
        ];
        let xi = XiCorrector::build(&chain, 2);
        let got = xi.eval(Side::Plus, 0.0);
        let want = eta0.laplacian();
        assert!(got.sub(&want).l2_sq().sqrt() < 1e-12);
    }

    #[test]
    fn xi_time_derivative_matches_chain_entry() {
        let t = torus();
        // dt eta(0) = some field; dt Xi(0) must equal lap_* of it
        let eta1 = SurfaceField::from_fn(t, Side::Minus, |x, y| {
            0.3 * (x / t.l1).cos() * (y / t.l2).sin()
        });
        let chain = vec![
            SurfacePair::zeros(t),
            SurfacePair { plus: SurfaceField::zeros(t, Side::Plus), minus: eta1.clone() },
            SurfacePair::zeros(t),
        ];
        let xi = XiCorrector::build(&chain, 2);
        let got = xi.eval_dt(Side::Minus, 0.0);
        let want = eta1.laplacian();
        let rel = got.sub(&want).l2_sq().sqrt() / want.l2_sq().sqrt();
        assert!(rel < 1e-10, "relative mismatch {rel}");
    }

    #[test]
    fn pure_heat_decays_exactly_per_mode() {
        let t = torus();
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| (3.0 * x / t.l1).cos()),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let zero = SurfacePair::zeros(t);
        let xi = XiCorrector::zero(t);
        let kappa = 0.2;
        let dt = 0.05;
        let out = advance_eta_kappa(&eta, &zero, &zero, &xi, kappa, dt, 0.0);
        let lam = 9.0 / (t.l1 * t.l1);
        let factor = (-kappa * lam * dt).exp();
        let want = eta.plus.scale(factor);
        assert!(out.plus.sub(&want).l2_sq().sqrt() < 1e-13);
        // mean (xi = 0 mode) is untouched by the heat term
        let eta_c = SurfacePair {
            plus: SurfaceField::constant(t, Side::Plus, 0.7),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let out_c = advance_eta_kappa(&eta_c, &zero, &zero, &xi, kappa, dt, 0.0);
        assert_abs_diff_eq!(out_c.plus.mean(), 0.7, epsilon = 1e-14);
    }

    #[test]
    fn small_kappa_limit_is_forward_step() {
        let t = torus();
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| 0.2 * (x / t.l1).sin()),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let un = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| (x / t.l1).cos()),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let xi = XiCorrector::zero(t);
        let dt = 0.01;
        let out = advance_eta_kappa(&eta, &un, &un, &xi, 1e-14, dt, 0.0);
        let want = eta.plus.add(&un.plus.scale(dt));
        assert!(out.plus.sub(&want).l2_sq().sqrt() < 1e-12);
    }

    #[test]
    fn manufactured_oscillatory_rhs_second_order() {
        // single mode, RHS cos(omega t): compare to the closed-form ODE solution
        let t = torus();
        let kappa = 0.3;
        let omega = 2.0;
        let lam = 1.0 / (t.l1 * t.l1);
        let t_end = 0.5;
        let exact = |tt: f64| {
            let kl = kappa * lam;
            let d = kl * kl + omega * omega;
            let p = (kl * (omega * tt).cos() + omega * (omega * tt).sin()) / d;
            let p0 = kl / d;
            p + (1.0 - p0) * (-kl * tt).exp()
        };
        let run = |dt: f64| -> f64 {
            let mut eta = SurfacePair {
                plus: SurfaceField::from_fn(t, Side::Plus, |x, _| (x / t.l1).sin()),
                minus: SurfaceField::zeros(t, Side::Minus),
            };
            let xi = XiCorrector::zero(t);
            let nsteps = (t_end / dt).round() as usize;
            for n in 0..nsteps {
                let t0 = n as f64 * dt;
                let mk = |tt: f64| SurfacePair {
                    plus: SurfaceField::from_fn(t, Side::Plus, |x, _| {
                        (omega * tt).cos() * (x / t.l1).sin()
                    }),
                    minus: SurfaceField::zeros(t, Side::Minus),
                };
                eta = advance_eta_kappa(&eta, &mk(t0), &mk(t0 + dt), &xi, kappa, dt, t0);
            }
            let want =
                SurfaceField::from_fn(t, Side::Plus, |x, _| exact(t_end) * (x / t.l1).sin());
            eta.plus.sub(&want).l2_sq().sqrt()
        };
        let e1 = run(0.02);
        let e2 = run(0.01);
        let order = (e1 / e2).log2();
        assert!(order > 1.8, "order {order:.3} (errors {e1:.3e}, {e2:.3e})");
    }

    #[test]
    fn kinematic_pure_vertical_motion_is_exact() {
        let t = torus();
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, y| {
                0.1 * (x / t.l1).sin() + 0.05 * (y / t.l2).cos()
            }),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let w = 0.37;
        let mut tr = UTrace::zero(t);
        tr.plus[2].fill(w);
        tr.minus[2].fill(w);
        let dt = 0.02;
        let out = advance_eta_kinematic(&eta, &tr, &tr, dt, 0.5).unwrap();
        assert_abs_diff_eq!(out.plus.mean(), eta.plus.mean() + w * dt, epsilon = 1e-13);
        let want = eta.plus.add(&SurfaceField::constant(t, Side::Plus, w * dt));
        assert!(out.plus.sub(&want).l2_sq().sqrt() < 1e-12);
    }

    #[test]
    fn kinematic_advection_of_single_mode() {
        let t = torus();
        let uu = 0.8;
        let amp = 0.02;
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(t, Side::Plus, |x, _| amp * (x / t.l1).sin()),
            minus: SurfaceField::zeros(t, Side::Minus),
        };
        let mut tr = UTrace::zero(t);
        tr.plus[0].fill(uu);
        let dt = 0.01;
        let out = advance_eta_kinematic(&eta, &tr, &tr, dt, 0.5).unwrap();
        // the equation reduces to dt eta + U d1 eta = 0: eta shifts by U dt
        let want = SurfaceField::from_fn(t, Side::Plus, |x, _| {
            amp * ((x - uu * dt) / t.l1).sin()
        });
        let err = out.plus.sub(&want).l2_sq().sqrt();
        assert!(err < 2.0 * amp * (dt * uu / t.l1).powi(3), "one-step error {err:.3e}");
    }

    #[test]
    fn kinematic_cfl_guard() {
        let t = torus();
        let eta = SurfacePair::zeros(t);
        let mut tr = UTrace::zero(t);
        tr.plus[0].fill(100.0);
        assert!(matches!(
            advance_eta_kinematic(&eta, &tr, &tr, 0.1, 0.5),
            Err(SimError::CflViolation { .. })
        ));
    }

    #[test]
    fn first_step_compatibility_cancellation() {
        // Xi(0) = lap eta0 exactly, so the kappa term cancels at t = 0
        let t = torus();
        let eta0 = SurfaceField::from_fn(t, Side::Plus, |x, _| 0.1 * (x / t.l1).sin());
        let chain = vec![
            SurfacePair { plus: eta0.clone(), minus: SurfaceField::zeros(t, Side::Minus) },
            SurfacePair::zeros(t),
            SurfacePair::zeros(t),
        ];
        let xi = XiCorrector::build(&chain, 2);
        let cancel = xi.eval(Side::Plus, 0.0).sub(&eta0.laplacian());
        assert!(cancel.l2_sq().sqrt() < 1e-13);
        // and the first-step finite difference reproduces dt eta(0) = u . N at
        // first order (here u = 0 so the update must be O(dt^2) small)
        let eta = SurfacePair { plus: eta0.clone(), minus: SurfaceField::zeros(t, Side::Minus) };
        let zero = SurfacePair::zeros(t);
        let dt = 1e-4;
        let out = advance_eta_kappa(&eta, &zero, &zero, &xi, 0.1, dt, 0.0);
        let rate = out.plus.sub(&eta.plus).l2_sq().sqrt() / dt;
        assert!(rate < 1e-2 * eta0.l2_sq().sqrt(), "dt eta(0) residual rate {rate:.3e}");
    }

    #[test]
    fn ladder_measures_first_order_in_kappa() {
        // uncorrected heat drift of a single mode: deviation ~ kappa lam T
        let t = torus();
        let t_end: f64 = 0.5;
        let dt: f64 = 0.025;
        let run = |kappa: f64| -> crate::error::Result<Vec<SurfacePair>> {
            let mut eta = SurfacePair {
                plus: SurfaceField::from_fn(t, Side::Plus, |x, _| 0.1 * (x / t.l1).sin()),
                minus: SurfaceField::zeros(t, Side::Minus),
            };
            let zero = SurfacePair::zeros(t);
            let xi = XiCorrector::zero(t);
            let mut traj = vec![eta.clone()];
            let nsteps = (t_end / dt).round() as usize;
            for n in 0..nsteps {
                eta = advance_eta_kappa(&eta, &zero, &zero, &xi, kappa, dt, n as f64 * dt);
                traj.push(eta.clone());
            }
            Ok(traj)
        };
        let report = kappa_ladder(run, &[0.1, 0.05, 0.025]).unwrap();
        for ord in &report.orders {
            assert!(*ord >= 0.9, "measured kappa-order {ord:.3}");
        }
        // kappa = 0 entry equals the kinematic run bitwise
        let a = run(0.0).unwrap();
        let b = run(0.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.plus.coeffs, y.plus.coeffs);
        }
    }
}
