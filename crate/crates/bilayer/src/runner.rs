//! Run orchestration: preset initial data, the committed-step loop with
//! diagnostics output, the built-in verification suites, and the
//! kappa-ladder driver.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::{InitSelector, RunConfig};
use crate::diagnostics::{self, FunctionalReport, HistoryView, StepRecord};
use crate::equilibrium::{solve_equilibrium, EquilibriumProfile, PressureLaw};
use crate::error::{Result, SimError};
use crate::fields::{Layer, Side, SlabSpec, SurfaceField, SurfacePair, VolumeScalar, VolumeVector};
use crate::geometry::{self, BumpProfiles, Extensions};
use crate::lame;
use crate::snapshot;
use crate::spectral::TorusSpec;
use crate::stepper::{self, State, StepperParams};
use crate::surface::{self, XiCorrector};
use crate::transport;

/// Everything a run needs, derived from the configuration.
pub struct Workspace {
    pub cfg: RunConfig,
    pub torus: TorusSpec,
    pub slab: SlabSpec,
    pub ext: Extensions,
    pub bumps: BumpProfiles,
    pub eq: EquilibriumProfile,
    pub params: StepperParams,
    pub rho_star: f64,
    pub rho_star_upper: f64,
}

pub fn build_workspace(cfg: &RunConfig) -> Result<Workspace> {
    let torus = cfg.torus()?;
    let slab = cfg.slab()?;
    let ext = Extensions::new(torus, slab, cfg.vandermonde_m)?;
    let bumps = BumpProfiles::new(&slab);
    let eq = solve_equilibrium(cfg.law_plus, cfg.law_minus, cfg.gravity, cfg.p_atm, slab)?;
    let prof_min = eq
        .node_values(Layer::Plus)
        .into_iter()
        .chain(eq.node_values(Layer::Minus))
        .fold(f64::INFINITY, f64::min);
    let prof_max = eq
        .node_values(Layer::Plus)
        .into_iter()
        .chain(eq.node_values(Layer::Minus))
        .fold(0.0f64, f64::max);
    let rho_star = cfg.rho_star.unwrap_or(prof_min);
    let rho_star_upper = cfg.rho_star_upper.unwrap_or(prof_max);
    let params = cfg.stepper_params(rho_star, rho_star_upper);
    Ok(Workspace {
        cfg: cfg.clone(),
        torus,
        slab,
        ext,
        bumps,
        eq,
        params,
        rho_star,
        rho_star_upper,
    })
}

/// Build the preset (u0, q0, eta0) triple.
pub fn preset_fields(ws: &Workspace) -> Result<(VolumeVector, VolumeScalar, SurfacePair)> {
    let (torus, slab) = (ws.torus, ws.slab);
    let zero_u = VolumeVector::zeros(torus, slab);
    let zero_q = VolumeScalar::zeros(torus, slab);
    match &ws.cfg.init {
        InitSelector::Equilibrium => Ok((zero_u, zero_q, SurfacePair::zeros(torus))),
        InitSelector::SmallEta => {
            let a = ws.cfg.init_amplitude;
            let eta = SurfacePair {
                plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| a * (x / torus.l1).sin()),
                minus: SurfaceField::from_fn(torus, Side::Minus, |_, y| {
                    0.5 * a * (y / torus.l2).cos()
                }),
            };
            Ok((zero_u, zero_q, eta))
        }
        InitSelector::LargeEta => {
            // deliberately beyond the diffeomorphism margin
            let eta = SurfacePair {
                plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| {
                    3.0 * (x / torus.l1).sin()
                }),
                minus: SurfaceField::zeros(torus, Side::Minus),
            };
            Ok((zero_u, zero_q, eta))
        }
        InitSelector::Snapshot(base) => {
            let base = PathBuf::from(base);
            let u = snapshot::read_volume_vector(&base.with_file_name(format!(
                "{}_u",
                base.file_name().unwrap().to_string_lossy()
            )), torus, slab)?;
            let q = snapshot::read_volume_scalar(&base.with_file_name(format!(
                "{}_q",
                base.file_name().unwrap().to_string_lossy()
            )), torus, slab)?;
            let eta = snapshot::read_surface_pair(&base.with_file_name(format!(
                "{}_eta",
                base.file_name().unwrap().to_string_lossy()
            )), torus)?;
            Ok((u, q, eta))
        }
    }
}

/// Exit report of one simulation run.
#[derive(Debug)]
pub struct RunReport {
    pub steps: usize,
    pub rejections: usize,
    pub aborted: Option<String>,
    pub final_functionals: Option<FunctionalReport>,
    pub mass_initial: f64,
    pub mass_final: f64,
    pub max_energy: f64,
    pub max_mass_drift: f64,
    pub invariant_violations: usize,
    pub csv_path: PathBuf,
}

const CSV_HEADER: &str = "step,t,dt,e_u,e_q,e_eta_sigma,ehat_eta_sigma,d_u,d_u_weak,d_q,\
d_eta_sigma,dhat_eta_sigma,l_eta,te,mass,energy_residual,picard_iters,contraction_ratio";

struct StepRow {
    report: FunctionalReport,
    mass: f64,
    energy_residual: f64,
    picard_iters: usize,
    ratio: f64,
}

fn functional_history<'a>(states: &'a [State], dt: f64) -> HistoryView<'a> {
    let n = states.len().min(3);
    let tail = &states[states.len() - n..];
    HistoryView {
        dt,
        u: tail.iter().map(|s| &s.u).collect(),
        q: tail.iter().map(|s| &s.q).collect(),
        eta: tail.iter().map(|s| &s.eta).collect(),
    }
}

/// Energy-identity residual of the committed step from `old` to `new`,
/// rebuilding the converged iterate's forcing from the committed state.
pub fn committed_step_residual(
    old: &State,
    new: &State,
    ws: &Workspace,
    xi: Option<&XiCorrector>,
    dt: f64,
) -> Result<f64> {
    let kappa = if ws.params.use_kappa { ws.params.kappa } else { 0.0 };
    let xi_arg = xi.map(|x| (x, new.t));
    let deta = stepper::surface_rhs(&new.u, &new.eta, xi_arg, kappa);
    let forcing = stepper::assemble_forcing(new, &ws.eq, &ws.params, &deta)?;
    let tr = surface::UTrace::of(&new.u);
    let un_new = surface::normal_velocity_pair(&tr, &new.eta);
    let xi_new = xi.map(|x| x.eval_pair(new.t));
    let rec = StepRecord {
        dt,
        kappa,
        sigma_plus: ws.params.sigma_plus,
        sigma_minus: ws.params.sigma_minus,
        params: &ws.params.lame,
        g_old: &old.geometry,
        g_new: &new.geometry,
        rho_old: &old.rho,
        rho_new: &new.rho,
        u_old: &old.u,
        u_new: &new.u,
        eta_old: &old.eta,
        eta_new: &new.eta,
        f1: &forcing.f1,
        f2_plus: &forcing.f2_plus,
        f2_minus: &forcing.f2_minus,
        un_new: &un_new,
        xi_new: xi_new.as_ref(),
    };
    Ok(diagnostics::energy_identity_residual(&rec))
}

/// Run the coupled simulation to t_end, writing snapshots and the
/// diagnostics CSV continuously.
pub fn run_simulation(cfg: &RunConfig) -> Result<RunReport> {
    let ws = build_workspace(cfg)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    // run header: full config with every defaulted key echoed
    let mut header = String::from("# run configuration (defaults applied)\n");
    header.push_str(&crate::config::serialize(cfg));
    if !cfg.defaulted.is_empty() {
        header.push_str("# defaulted keys:\n");
        for k in &cfg.defaulted {
            header.push_str(&format!("#   {k}\n"));
        }
    }
    std::fs::write(out_dir.join("run_header.txt"), &header)?;
    let csv_path = out_dir.join("diagnostics.csv");
    if csv_path.exists() {
        std::fs::remove_file(&csv_path)?;
    }

    let (u0, q0, eta0) = preset_fields(&ws)?;
    let (state0, compat) =
        stepper::prepare_initial_data(&u0, &q0, &eta0, &ws.ext, &ws.bumps, &ws.eq, &ws.params)?;
    let chain = stepper::compatibility_data(&state0, &ws.eq, &ws.params)?;
    let te = diagnostics::te_functional(
        &chain.u,
        &chain.q,
        &chain.eta,
        ws.params.n_index,
        ws.params.sigma_plus,
        ws.params.sigma_minus,
    )?;
    let xi = if ws.params.use_kappa {
        Some(XiCorrector::build(&chain.eta, ws.params.j_max))
    } else {
        None
    };
    let seed = stepper::seed_extension(&chain, ws.torus, ws.slab);
    std::fs::write(
        out_dir.join("compatibility.txt"),
        format!(
            "dynamic_plus = {:.6e}\ndynamic_minus = {:.6e}\njump_u = {:.6e}\nbottom_u = {:.6e}\n",
            compat.dynamic_plus, compat.dynamic_minus, compat.jump_u, compat.bottom_u
        ),
    )?;

    let mass0 = diagnostics::mass_total(&state0.rho, &state0.geometry);
    let mut states = vec![state0];
    let mut report = RunReport {
        steps: 0,
        rejections: 0,
        aborted: None,
        final_functionals: None,
        mass_initial: mass0,
        mass_final: mass0,
        max_energy: 0.0,
        max_mass_drift: 0.0,
        invariant_violations: 0,
        csv_path: csv_path.clone(),
    };
    let mut t = 0.0;
    let mut step = 0usize;
    while t < cfg.t_end - 1e-12 {
        let base = states.last().unwrap();
        let seed_arg = if step == 0 { Some(&seed) } else { None };
        let advanced =
            stepper::advance_with_rejection(base, &ws.eq, &ws.params, xi.as_ref(), seed_arg);
        let (new_state, stats, dt_used, rejections) = match advanced {
            Ok(v) => v,
            Err(e) => {
                report.aborted = Some(format!("step {step} at t = {t:.6}: {e}"));
                break;
            }
        };
        report.rejections += rejections;
        t = new_state.t;
        step += 1;
        report.steps = step;
        states.push(new_state);
        if states.len() > 4 {
            states.remove(0);
        }
        let row = {
            let hist = functional_history(&states, dt_used);
            let fr = diagnostics::energy_functionals(
                &hist,
                ws.params.n_index,
                ws.params.sigma_plus,
                ws.params.sigma_minus,
                te,
            )?;
            let two = &states[states.len() - 2..];
            let resid = committed_step_residual(&two[0], &two[1], &ws, xi.as_ref(), dt_used)?;
            let mass = diagnostics::mass_total(
                &states.last().unwrap().rho,
                &states.last().unwrap().geometry,
            );
            StepRow {
                report: fr,
                mass,
                energy_residual: resid,
                picard_iters: stats.iterations,
                ratio: stats.ratios.last().copied().unwrap_or(0.0),
            }
        };
        report.max_energy = report
            .max_energy
            .max(row.report.e_u)
            .max(row.report.e_q)
            .max(row.report.e_eta_sigma);
        report.mass_final = row.mass;
        report.max_mass_drift = report
            .max_mass_drift
            .max(((row.mass - mass0) / mass0).abs());
        report.final_functionals = Some(row.report);
        let csv_row = format!(
            "{step},{t:.10e},{dt_used:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{},{:.6e}",
            row.report.e_u,
            row.report.e_q,
            row.report.e_eta_sigma,
            row.report.ehat_eta_sigma,
            row.report.d_u,
            row.report.d_u_weak,
            row.report.d_q,
            row.report.d_eta_sigma,
            row.report.dhat_eta_sigma,
            row.report.l_eta,
            row.report.te,
            row.mass,
            row.energy_residual,
            row.picard_iters,
            row.ratio,
        );
        snapshot::append_csv_row(&csv_path, CSV_HEADER, &csv_row)?;
        if cfg.snap_every > 0 && step % cfg.snap_every == 0 {
            let st = states.last().unwrap();
            snapshot::write_volume_vector(&out_dir.join(format!("u_{step:06}")), &st.u, "u", t)?;
            snapshot::write_volume_scalar(&out_dir.join(format!("q_{step:06}")), &st.q, "q", t)?;
            snapshot::write_surface_pair(
                &out_dir.join(format!("eta_{step:06}")),
                &st.eta,
                "eta",
                t,
            )?;
        }
    }
    Ok(report)
}

/// Run the coupled stepper at one kappa value, returning the eta trajectory.
pub fn eta_trajectory(cfg: &RunConfig, kappa: f64) -> Result<Vec<SurfacePair>> {
    let mut cfg = cfg.clone();
    if kappa > 0.0 {
        cfg.use_kappa = true;
        cfg.kappa = kappa;
    } else {
        cfg.use_kappa = false;
    }
    let ws = build_workspace(&cfg)?;
    let (u0, q0, eta0) = preset_fields(&ws)?;
    let (state0, _) =
        stepper::prepare_initial_data(&u0, &q0, &eta0, &ws.ext, &ws.bumps, &ws.eq, &ws.params)?;
    let chain = stepper::compatibility_data(&state0, &ws.eq, &ws.params)?;
    let xi = if ws.params.use_kappa {
        Some(XiCorrector::build(&chain.eta, ws.params.j_max))
    } else {
        None
    };
    let seed = stepper::seed_extension(&chain, ws.torus, ws.slab);
    let mut traj = vec![state0.eta.clone()];
    let mut state = state0;
    let nsteps = (cfg.t_end / cfg.dt).round() as usize;
    for step in 0..nsteps {
        let seed_arg = if step == 0 { Some(&seed) } else { None };
        let (next, _) = stepper::advance_time_step(&state, &ws.eq, &ws.params, xi.as_ref(), seed_arg)?;
        traj.push(next.eta.clone());
        state = next;
    }
    Ok(traj)
}

/// Kappa-ladder driver over the configured run.
pub fn kappa_ladder_run(cfg: &RunConfig, kappas: &[f64]) -> Result<surface::KappaLadderReport> {
    surface::kappa_ladder(|k| eta_trajectory(cfg, k), kappas)
}

/// One row of a verification table.
#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tol: f64,
}

impl VerifyRow {
    fn new(name: &str, value: f64, tol: f64) -> Self {
        VerifyRow { name: name.into(), pass: value <= tol, value, tol }
    }
}

fn verify_world() -> Result<(TorusSpec, SlabSpec, Extensions, BumpProfiles)> {
    let torus = TorusSpec::new(1.0, 1.0, 16, 16)?;
    let slab = SlabSpec::new(1.0, 1.5, 17, 17)?;
    let ext = Extensions::new(torus, slab, 6)?;
    let bumps = BumpProfiles::new(&slab);
    Ok((torus, slab, ext, bumps))
}

fn verify_geometry() -> Result<Vec<VerifyRow>> {
    let (torus, slab, ext, bumps) = verify_world()?;
    let mut rows = Vec::new();
    // trace recovery
    let eta = SurfaceField::from_fn(torus, Side::Plus, |x, y| {
        0.2 * (x / torus.l1).sin() + 0.1 * (2.0 * y / torus.l2).cos()
    });
    let bar = ext.extend_upper(&eta);
    let trace = bar.trace_top();
    let orig = eta.values();
    let scale = orig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let trace_err = trace
        .iter()
        .zip(orig.iter())
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
        / scale;
    rows.push(VerifyRow::new("trace_recovery", trace_err, 1e-10));
    // Vandermonde hand case and residual
    let alpha = geometry::vandermonde_coeffs(&[1.0, 2.0])?;
    rows.push(VerifyRow::new(
        "vandermonde_hand_case",
        (alpha[0] - 3.0).abs() + (alpha[1] + 2.0).abs(),
        1e-10,
    ));
    let lam: Vec<f64> = (0..=6).map(|j| (j + 1) as f64).collect();
    let a6 = geometry::vandermonde_coeffs(&lam)?;
    let mut resid = 0.0f64;
    for i in 0..=6 {
        let r: f64 = a6.iter().zip(&lam).map(|(a, l)| a * (-l).powi(i)).sum();
        resid = resid.max((r - 1.0).abs());
    }
    rows.push(VerifyRow::new("vandermonde_residual_m6", resid, 1e-9));
    // C^m matching: the analytic one-sided derivative ratios for l <= 6
    let mut match_err = 0.0f64;
    for l in 0..=6usize {
        let upper: f64 = a6.iter().zip(&lam).map(|(a, la)| a * (-la).powi(l as i32)).sum();
        match_err = match_err.max((upper - 1.0).abs());
    }
    rows.push(VerifyRow::new("interface_cm_matching", match_err, 1e-8));
    // harmonicity of the upper extension on a refined vertical grid
    let slab_f = SlabSpec::new(1.0, 1.0, 33, 33)?;
    let ext_f = Extensions::new(torus, slab_f, 6)?;
    let eta1 = SurfaceField::from_fn(torus, Side::Plus, |x, _| (x / torus.l1).sin());
    let bar1 = ext_f.extend_upper(&eta1);
    let lap = bar1
        .horizontal_derivative(0)
        .horizontal_derivative(0)
        .add(&bar1.horizontal_derivative(1).horizontal_derivative(1))
        .add(&bar1.vertical_derivative().vertical_derivative());
    let mut interior = 0.0f64;
    for layer in Layer::BOTH {
        let arr = lap.layer(layer);
        let nz = slab_f.nz(layer);
        for ((_, _, k), v) in arr.indexed_iter() {
            if k >= 4 && k + 4 < nz {
                interior = interior.max(v.abs());
            }
        }
    }
    rows.push(VerifyRow::new("harmonicity_interior", interior, 1e-6));
    // K J identity
    let pair = SurfacePair {
        plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| 0.05 * (x / torus.l1).sin()),
        minus: SurfaceField::from_fn(torus, Side::Minus, |_, y| 0.04 * (y / torus.l2).cos()),
    };
    let g = geometry::build_geometry(&pair, &ext, &bumps, 0.1)?;
    rows.push(VerifyRow::new(
        "kj_identity",
        g.k_coef.mul(&g.jac).map(|v| v - 1.0).max_abs(),
        1e-12,
    ));
    // mean curvature linearization
    let small = SurfaceField::from_fn(torus, Side::Plus, |x, _| 1e-6 * (x / torus.l1).sin());
    let h = geometry::mean_curvature(&small);
    let rel = h.sub(&small.laplacian()).l2_sq().sqrt() / small.laplacian().l2_sq().sqrt();
    rows.push(VerifyRow::new("curvature_linearization", rel, 1e-6));
    Ok(rows)
}

fn verify_equilibrium() -> Result<Vec<VerifyRow>> {
    let slab = SlabSpec::new(1.0, 1.5, 129, 129)?;
    let (cp, cm, g, patm) = (1.2, 0.9, 0.7, 2.0);
    let prof = solve_equilibrium(
        PressureLaw::Isothermal { c: cp },
        PressureLaw::Isothermal { c: cm },
        g,
        patm,
        slab,
    )?;
    let mut rows = Vec::new();
    let rho_top = patm / (cp * cp);
    let mut worst = 0.0f64;
    for (k, v) in prof.node_values(Layer::Plus).iter().enumerate() {
        let z = slab.z(Layer::Plus, k);
        let exact = rho_top * ((g * (slab.ell - z)) / (cp * cp)).exp();
        worst = worst.max((v - exact).abs());
    }
    rows.push(VerifyRow::new("isothermal_closed_form", worst, 1e-8));
    let (top, mid) = prof.matching_residuals();
    rows.push(VerifyRow::new("boundary_matching", top.max(mid), 1e-10));
    rows.push(VerifyRow::new("hydrostatic_residual", prof.hydrostatic_residual(), 1e-8));
    let p_star = prof.law_plus.p(prof.rho_plus0);
    let jump_exact = p_star / (cp * cp) - p_star / (cm * cm);
    rows.push(VerifyRow::new(
        "density_jump_identity",
        (prof.jump - jump_exact).abs(),
        1e-10,
    ));
    Ok(rows)
}

fn verify_lame() -> Result<Vec<VerifyRow>> {
    let torus = TorusSpec::new(1.0, 1.0, 8, 8)?;
    let slab = SlabSpec::new(1.0, 1.0, 9, 9)?;
    let ext = Extensions::new(torus, slab, 6)?;
    let bumps = BumpProfiles::new(&slab);
    let g = geometry::build_geometry(&SurfacePair::zeros(torus), &ext, &bumps, 0.1)?;
    let p = lame::LameParams {
        mu_plus: 1.0,
        mu_minus: 2.0,
        mu_prime_plus: 0.3,
        mu_prime_minus: 0.1,
        rho_lo: 0.0,
        rho_hi: 10.0,
        ..lame::LameParams::default()
    };
    let mut rows = Vec::new();
    let rho = VolumeScalar::from_fn(torus, slab, |_, _, _| 1.0);
    let op = lame::assemble_lame(&g, &rho, 0.1, &p)?;
    let zero = VolumeVector::zeros(torus, slab);
    let tr = lame::TractionData::zero(torus);
    let (u, _) = lame::solve_lame_step(&op, &zero, &zero, &tr)?;
    rows.push(VerifyRow::new("homogeneous_zero", u.max_abs(), 1e-13));
    // Korn positivity over random admissible fields
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut min_r = f64::INFINITY;
    for _ in 0..100 {
        let mut comps: Vec<VolumeScalar> = Vec::with_capacity(3);
        for _ in 0..3 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b2: f64 = rng.gen_range(-1.0..1.0);
            let m1 = rng.gen_range(0..3) as f64;
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            comps.push(VolumeScalar::from_fn(torus, slab, |x, _, z| {
                (m1 * x / torus.l1 + ph).cos() * (z + slab.b) * (a + b2 * z)
            }));
        }
        let u = VolumeVector { comps: [comps.remove(0), comps.remove(0), comps.remove(0)] };
        min_r = min_r.min(lame::korn_ratio(&u, &g, &p)?);
    }
    rows.push(VerifyRow::new("korn_ratio_floor", 1.0 / min_r.max(1e-300), 1.0 / 1e-3));
    // unforced contraction
    let wavy = {
        let eta = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| 0.03 * (x / torus.l1).sin()),
            minus: SurfaceField::zeros(torus, Side::Minus),
        };
        geometry::build_geometry(&eta, &ext, &bumps, 0.1)?
    };
    let op2 = lame::assemble_lame(&wavy, &rho, 0.05, &p)?;
    let u0 = VolumeVector {
        comps: [
            VolumeScalar::from_fn(torus, slab, |x, _, z| (x / torus.l1).cos() * (z + slab.b)),
            VolumeScalar::zeros(torus, slab),
            VolumeScalar::from_fn(torus, slab, |_, y, z| (y / torus.l2).sin() * (z + slab.b)),
        ],
    };
    let (u1, _) = lame::solve_lame_step(&op2, &u0, &zero, &lame::TractionData::zero(torus))?;
    let growth = lame::weighted_l2_sq(&op2, &u1) / lame::weighted_l2_sq(&op2, &u0);
    rows.push(VerifyRow::new("unforced_step_contraction", growth, 1.0 + 1e-12));
    Ok(rows)
}

fn verify_transport() -> Result<Vec<VerifyRow>> {
    let torus = TorusSpec::new(1.0, 1.0, 32, 4)?;
    let slab = SlabSpec::new(1.0, 1.0, 9, 9)?;
    let mut rows = Vec::new();
    let t_end = 0.2;
    let times: Vec<f64> = (0..=8).map(|i| i as f64 * 0.025).collect();
    // pure advection cross-oracle
    let hist = transport::uniform_history(torus, slab, &times, [1.0, 0.0, 0.0], 0.0, |_, _, _| 0.0);
    let q0 = VolumeScalar::from_fn(torus, slab, |x, _, _| (x / torus.l1).sin());
    let qc = transport::solve_transport(&q0, &hist, t_end, false)?;
    let qm = transport::mollified_reference_solve(&q0, &hist, t_end, 0.03)?;
    rows.push(VerifyRow::new("cross_oracle_advection", qc.sub(&qm).l2_sq().sqrt(), 1e-4));
    // pure decay cross-oracle
    let hist_d =
        transport::uniform_history(torus, slab, &times, [0.0, 0.0, 0.0], 0.8, |_, _, _| 0.0);
    let qcd = transport::solve_transport(&q0, &hist_d, t_end, false)?;
    let qmd = transport::mollified_reference_solve(&q0, &hist_d, t_end, 0.03)?;
    rows.push(VerifyRow::new("cross_oracle_decay", qcd.sub(&qmd).l2_sq().sqrt(), 1e-4));
    // gronwall
    let mut qs = vec![q0.clone()];
    for &tt in &times[1..] {
        qs.push(transport::solve_transport(&q0, &hist, tt, false)?);
    }
    let q_refs: Vec<&VolumeScalar> = qs.iter().collect();
    let rep = transport::gronwall_bound_check(&q_refs, &hist, 0)?;
    rows.push(VerifyRow::new(
        "gronwall_finite_c",
        if rep.valid { rep.c_star } else { f64::INFINITY },
        1e4,
    ));
    Ok(rows)
}

fn verify_surface() -> Result<Vec<VerifyRow>> {
    let torus = TorusSpec::new(1.0, 1.0, 16, 16)?;
    let mut rows = Vec::new();
    // exact heat decay
    let eta = SurfacePair {
        plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| (3.0 * x / torus.l1).cos()),
        minus: SurfaceField::zeros(torus, Side::Minus),
    };
    let zerop = SurfacePair::zeros(torus);
    let xi = XiCorrector::zero(torus);
    let out = surface::advance_eta_kappa(&eta, &zerop, &zerop, &xi, 0.2, 0.05, 0.0);
    let lam = 9.0 / (torus.l1 * torus.l1);
    let want = eta.plus.scale((-0.2 * lam * 0.05).exp());
    rows.push(VerifyRow::new("heat_decay_exact", out.plus.sub(&want).l2_sq().sqrt(), 1e-12));
    // xi matching at t = 0
    let eta0 = SurfaceField::from_fn(torus, Side::Plus, |x, _| 0.1 * (x / torus.l1).sin());
    let chain = vec![
        SurfacePair { plus: eta0.clone(), minus: SurfaceField::zeros(torus, Side::Minus) },
        SurfacePair::zeros(torus),
        SurfacePair::zeros(torus),
    ];
    let xi2 = XiCorrector::build(&chain, 2);
    let cancel = xi2.eval(Side::Plus, 0.0).sub(&eta0.laplacian()).l2_sq().sqrt();
    rows.push(VerifyRow::new("xi_t0_matching", cancel, 1e-12));
    // kinematic advection accuracy
    let mut tr = surface::UTrace::zero(torus);
    tr.plus[0].fill(0.8);
    let amp = 0.02;
    let eta_k = SurfacePair {
        plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| amp * (x / torus.l1).sin()),
        minus: SurfaceField::zeros(torus, Side::Minus),
    };
    let dt = 0.01;
    let moved = surface::advance_eta_kinematic(&eta_k, &tr, &tr, dt, 0.5)?;
    let want_k = SurfaceField::from_fn(torus, Side::Plus, |x, _| {
        amp * ((x - 0.8 * dt) / torus.l1).sin()
    });
    rows.push(VerifyRow::new(
        "kinematic_one_step",
        moved.plus.sub(&want_k).l2_sq().sqrt(),
        2.0 * amp * (dt * 0.8 / torus.l1).powi(3),
    ));
    Ok(rows)
}

fn verify_coupled() -> Result<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    // equilibrium fixed point over a short run
    let mut cfg = RunConfig {
        n1: 8,
        n2: 8,
        nz_plus: 9,
        nz_minus: 9,
        dt: 0.01,
        t_end: 0.1,
        sigma_plus: 0.1,
        sigma_minus: 0.1,
        gravity: 0.5,
        out_dir: std::env::temp_dir()
            .join("bilayer_verify_coupled")
            .to_string_lossy()
            .into_owned(),
        snap_every: 0,
        ..RunConfig::default()
    };
    let report = run_simulation(&cfg)?;
    rows.push(VerifyRow::new("equilibrium_max_energy", report.max_energy, 1e-16));
    rows.push(VerifyRow::new("equilibrium_mass_drift", report.max_mass_drift, 1e-12));
    rows.push(VerifyRow::new(
        "equilibrium_clean_exit",
        if report.aborted.is_none() { 0.0 } else { 1.0 },
        0.5,
    ));
    // small-eta run stays within the invariant corridor
    cfg.init = InitSelector::SmallEta;
    cfg.init_amplitude = 1e-3;
    cfg.t_end = 0.05;
    cfg.dt = 5e-3;
    let report2 = run_simulation(&cfg)?;
    rows.push(VerifyRow::new(
        "small_eta_clean_exit",
        if report2.aborted.is_none() { 0.0 } else { 1.0 },
        0.5,
    ));
    rows.push(VerifyRow::new("small_eta_mass_drift", report2.max_mass_drift, 1e-6));
    Ok(rows)
}

/// Run one verification suite by name.
pub fn verify(suite: &str) -> Result<Vec<VerifyRow>> {
    match suite {
        "geometry" => verify_geometry(),
        "equilibrium" => verify_equilibrium(),
        "lame" => verify_lame(),
        "transport" => verify_transport(),
        "surface" => verify_surface(),
        "coupled" => verify_coupled(),
        other => Err(SimError::ValidationError {
            key: "suite".into(),
            msg: format!(
                "unknown suite `{other}` (geometry | equilibrium | lame | transport | surface | coupled)"
            ),
        }),
    }
}

/// Equilibrium profile dump: CSV rows (y3, rhobar, P(rhobar), h'(rhobar)).
pub fn dump_equilibrium(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ws = build_workspace(cfg)?;
    let mut text = String::from("y3,rho_bar,pressure,h_prime\n");
    for layer in [Layer::Minus, Layer::Plus] {
        let vals = ws.eq.node_values(layer);
        for (k, rho) in vals.iter().enumerate() {
            let z = ws.slab.z(layer, k);
            let p = ws.eq.law(layer).p(*rho);
            let hp = ws.eq.enthalpy_derivative(layer, *rho)?;
            text.push_str(&format!("{z:.10e},{rho:.10e},{p:.10e},{hp:.10e}\n"));
        }
    }
    std::fs::write(out, text)?;
    Ok(())
}

fn _unused(_: &Array2<f64>) {}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> RunConfig {
        RunConfig {
            n1: 8,
            n2: 8,
            nz_plus: 9,
            nz_minus: 9,
            dt: 0.01,
            t_end: 0.03,
            gravity: 0.5,
            out_dir: std::env::temp_dir()
                .join("bilayer_runner_test")
                .to_string_lossy()
                .into_owned(),
            snap_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn equilibrium_run_is_quiet_and_writes_outputs() {
        let cfg = quiet_cfg();
        let report = run_simulation(&cfg).unwrap();
        assert_eq!(report.steps, 3);
        assert!(report.aborted.is_none());
        assert!(report.max_energy <= 1e-16, "max energy {:.3e}", report.max_energy);
        assert!(report.max_mass_drift <= 1e-12);
        assert!(report.csv_path.exists());
        let text = std::fs::read_to_string(&report.csv_path).unwrap();
        assert!(text.lines().count() == 4); // header + 3 rows
        let out = PathBuf::from(&cfg.out_dir);
        assert!(out.join("run_header.txt").exists());
        assert!(out.join("u_000002.f64").exists());
    }

    #[test]
    fn large_eta_preset_aborts_with_degenerate_jacobian() {
        let mut cfg = quiet_cfg();
        cfg.init = InitSelector::LargeEta;
        cfg.out_dir = std::env::temp_dir()
            .join("bilayer_runner_large")
            .to_string_lossy()
            .into_owned();
        let err = run_simulation(&cfg);
        assert!(matches!(err, Err(SimError::DegenerateJacobian { .. })));
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(verify("nope").is_err());
    }
}
