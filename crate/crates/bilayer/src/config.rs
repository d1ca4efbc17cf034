//! Run configuration: a flat `section.key = value` text format with full
//! validation, defaults for absent keys, and rejection of unknown keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::equilibrium::PressureLaw;
use crate::error::{Result, SimError};
use crate::fields::SlabSpec;
use crate::lame::LameParams;
use crate::spectral::TorusSpec;
use crate::stepper::StepperParams;

/// Initial-condition selector.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSelector {
    Equilibrium,
    SmallEta,
    LargeEta,
    Snapshot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub l1: f64,
    pub l2: f64,
    pub n1: usize,
    pub n2: usize,
    pub ell: f64,
    pub b: f64,
    pub nz_plus: usize,
    pub nz_minus: usize,
    pub gravity: f64,
    pub p_atm: f64,
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub mu_prime_plus: f64,
    pub mu_prime_minus: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    /// corridor anchors rho_* and rho^*; None = derive from the equilibrium
    pub rho_star: Option<f64>,
    pub rho_star_upper: Option<f64>,
    pub law_plus: PressureLaw,
    pub law_minus: PressureLaw,
    pub n_index: usize,
    pub vandermonde_m: usize,
    pub jacobian_floor: f64,
    pub kappa: f64,
    pub use_kappa: bool,
    pub cfl_max: f64,
    pub j_max: usize,
    pub cg_tol: f64,
    pub cg_maxit: usize,
    pub transport_scheme: String,
    pub transport_eps: f64,
    pub boundary_tol: f64,
    pub transport_clip: bool,
    pub dt: f64,
    pub t_end: f64,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub reject_retries: usize,
    pub geometry_refreshes: usize,
    pub eta_delta: f64,
    pub cc_tol: f64,
    pub init: InitSelector,
    pub init_amplitude: f64,
    pub out_dir: String,
    pub snap_every: usize,
    pub threads: usize,
    pub seed: u64,
    /// keys that were absent and took their defaults (echoed by the runner)
    pub defaulted: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            l1: 1.0,
            l2: 1.0,
            n1: 16,
            n2: 16,
            ell: 1.0,
            b: 1.0,
            nz_plus: 17,
            nz_minus: 17,
            gravity: 1.0,
            p_atm: 2.0,
            mu_plus: 1.0,
            mu_minus: 1.0,
            mu_prime_plus: 0.0,
            mu_prime_minus: 0.0,
            sigma_plus: 0.0,
            sigma_minus: 0.0,
            rho_star: None,
            rho_star_upper: None,
            law_plus: PressureLaw::Isothermal { c: 1.0 },
            law_minus: PressureLaw::Isothermal { c: 1.0 },
            n_index: 1,
            vandermonde_m: 6,
            jacobian_floor: 0.1,
            kappa: 0.05,
            use_kappa: false,
            cfl_max: 0.5,
            j_max: 2,
            cg_tol: 1e-10,
            cg_maxit: 500,
            transport_scheme: "characteristics".into(),
            transport_eps: 0.05,
            boundary_tol: 1e-8,
            transport_clip: true,
            dt: 0.01,
            t_end: 0.1,
            max_picard: 25,
            picard_tol: 1e-9,
            reject_retries: 5,
            geometry_refreshes: 1,
            eta_delta: 0.01,
            cc_tol: 1e-8,
            init: InitSelector::Equilibrium,
            init_amplitude: 1e-3,
            out_dir: "out".into(),
            snap_every: 50,
            threads: 1,
            seed: 0,
            defaulted: Vec::new(),
        }
    }
}

/// Keys the grammar accepts, in canonical order.
const KNOWN_KEYS: &[&str] = &[
    "grid.l1",
    "grid.l2",
    "grid.n1",
    "grid.n2",
    "grid.ell",
    "grid.b",
    "grid.nz_plus",
    "grid.nz_minus",
    "physics.g",
    "physics.p_atm",
    "physics.mu_plus",
    "physics.mu_minus",
    "physics.mu_prime_plus",
    "physics.mu_prime_minus",
    "physics.sigma_plus",
    "physics.sigma_minus",
    "physics.rho_star",
    "physics.rho_star_upper",
    "physics.law_plus",
    "physics.law_minus",
    "physics.n",
    "geometry.vandermonde_m",
    "geometry.jacobian_floor",
    "surface.kappa",
    "surface.use_kappa",
    "surface.cfl_max",
    "surface.j_max",
    "lame.cg_tol",
    "lame.cg_maxit",
    "transport.scheme",
    "transport.eps",
    "transport.boundary_tol",
    "transport.clip",
    "step.dt",
    "step.t_end",
    "step.max_picard",
    "step.picard_tol",
    "step.reject_retries",
    "step.geometry_refreshes",
    "step.eta_delta",
    "step.cc_tol",
    "init.preset",
    "init.amplitude",
    "init.snapshot",
    "io.out_dir",
    "io.snap_every",
    "io.threads",
    "io.seed",
];

fn parse_law(key: &str, v: &str) -> Result<PressureLaw> {
    let bad = |msg: &str| SimError::ValidationError { key: key.into(), msg: msg.into() };
    let v = v.trim();
    if let Some(rest) = v.strip_prefix("isothermal(") {
        let inner = rest.strip_suffix(')').ok_or_else(|| bad("missing closing paren"))?;
        let c: f64 = inner.trim().parse().map_err(|_| bad("bad isothermal constant"))?;
        if !(c > 0.0) {
            return Err(bad("isothermal sound speed must be positive"));
        }
        return Ok(PressureLaw::Isothermal { c });
    }
    if let Some(rest) = v.strip_prefix("polytropic(") {
        let inner = rest.strip_suffix(')').ok_or_else(|| bad("missing closing paren"))?;
        let parts: Vec<&str> = inner.split(',').collect();
        if parts.len() != 2 {
            return Err(bad("polytropic law takes (K, gamma)"));
        }
        let k: f64 = parts[0].trim().parse().map_err(|_| bad("bad polytropic K"))?;
        let gamma: f64 = parts[1].trim().parse().map_err(|_| bad("bad polytropic gamma"))?;
        if !(k > 0.0) || !(gamma > 1.0) {
            return Err(bad("polytropic law needs K > 0 and gamma > 1"));
        }
        return Ok(PressureLaw::Polytropic { k, gamma });
    }
    Err(bad("unknown pressure law (expected isothermal(c) or polytropic(K, gamma))"))
}

fn law_string(law: &PressureLaw) -> String {
    match law {
        PressureLaw::Isothermal { c } => format!("isothermal({c})"),
        PressureLaw::Polytropic { k, gamma } => format!("polytropic({k}, {gamma})"),
    }
}

/// Parse a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parse config text (the documented key/value grammar).
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut seen: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SimError::ParseError {
                line: lineno + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(SimError::ParseError {
                line: lineno + 1,
                msg: format!("unknown key `{key}`"),
            });
        }
        if seen.insert(key.clone(), (lineno + 1, value.trim().to_string())).is_some() {
            return Err(SimError::ParseError {
                line: lineno + 1,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    let mut cfg = RunConfig::default();
    let mut get = |key: &str| seen.remove(key);
    macro_rules! set {
        ($key:expr, $field:expr, $ty:ty) => {
            if let Some((line, v)) = get($key) {
                $field = v.parse::<$ty>().map_err(|_| SimError::ParseError {
                    line,
                    msg: format!("bad value `{v}` for `{}`", $key),
                })?;
            } else {
                cfg.defaulted.push($key.to_string());
            }
        };
    }
    set!("grid.l1", cfg.l1, f64);
    set!("grid.l2", cfg.l2, f64);
    set!("grid.n1", cfg.n1, usize);
    set!("grid.n2", cfg.n2, usize);
    set!("grid.ell", cfg.ell, f64);
    set!("grid.b", cfg.b, f64);
    set!("grid.nz_plus", cfg.nz_plus, usize);
    set!("grid.nz_minus", cfg.nz_minus, usize);
    set!("physics.g", cfg.gravity, f64);
    set!("physics.p_atm", cfg.p_atm, f64);
    set!("physics.mu_plus", cfg.mu_plus, f64);
    set!("physics.mu_minus", cfg.mu_minus, f64);
    set!("physics.mu_prime_plus", cfg.mu_prime_plus, f64);
    set!("physics.mu_prime_minus", cfg.mu_prime_minus, f64);
    set!("physics.sigma_plus", cfg.sigma_plus, f64);
    set!("physics.sigma_minus", cfg.sigma_minus, f64);
    if let Some((line, v)) = get("physics.rho_star") {
        cfg.rho_star = Some(v.parse().map_err(|_| SimError::ParseError {
            line,
            msg: format!("bad value `{v}` for physics.rho_star"),
        })?);
    } else {
        cfg.defaulted.push("physics.rho_star".into());
    }
    if let Some((line, v)) = get("physics.rho_star_upper") {
        cfg.rho_star_upper = Some(v.parse().map_err(|_| SimError::ParseError {
            line,
            msg: format!("bad value `{v}` for physics.rho_star_upper"),
        })?);
    } else {
        cfg.defaulted.push("physics.rho_star_upper".into());
    }
    if let Some((_, v)) = get("physics.law_plus") {
        cfg.law_plus = parse_law("physics.law_plus", &v)?;
    } else {
        cfg.defaulted.push("physics.law_plus".into());
    }
    if let Some((_, v)) = get("physics.law_minus") {
        cfg.law_minus = parse_law("physics.law_minus", &v)?;
    } else {
        cfg.defaulted.push("physics.law_minus".into());
    }
    set!("physics.n", cfg.n_index, usize);
    set!("geometry.vandermonde_m", cfg.vandermonde_m, usize);
    set!("geometry.jacobian_floor", cfg.jacobian_floor, f64);
    set!("surface.kappa", cfg.kappa, f64);
    set!("surface.use_kappa", cfg.use_kappa, bool);
    set!("surface.cfl_max", cfg.cfl_max, f64);
    set!("surface.j_max", cfg.j_max, usize);
    set!("lame.cg_tol", cfg.cg_tol, f64);
    set!("lame.cg_maxit", cfg.cg_maxit, usize);
    set!("transport.scheme", cfg.transport_scheme, String);
    set!("transport.eps", cfg.transport_eps, f64);
    set!("transport.boundary_tol", cfg.boundary_tol, f64);
    set!("transport.clip", cfg.transport_clip, bool);
    set!("step.dt", cfg.dt, f64);
    set!("step.t_end", cfg.t_end, f64);
    set!("step.max_picard", cfg.max_picard, usize);
    set!("step.picard_tol", cfg.picard_tol, f64);
    set!("step.reject_retries", cfg.reject_retries, usize);
    set!("step.geometry_refreshes", cfg.geometry_refreshes, usize);
    set!("step.eta_delta", cfg.eta_delta, f64);
    set!("step.cc_tol", cfg.cc_tol, f64);
    let snapshot_path = get("init.snapshot").map(|(_, v)| v);
    if let Some((line, v)) = get("init.preset") {
        cfg.init = match v.as_str() {
            "equilibrium" => InitSelector::Equilibrium,
            "small-eta" => InitSelector::SmallEta,
            "large-eta" => InitSelector::LargeEta,
            "snapshot" => InitSelector::Snapshot(snapshot_path.clone().unwrap_or_default()),
            other => {
                return Err(SimError::ParseError {
                    line,
                    msg: format!("unknown preset `{other}`"),
                })
            }
        };
    } else {
        cfg.defaulted.push("init.preset".into());
    }
    if matches!(cfg.init, InitSelector::Snapshot(ref p) if p.is_empty()) {
        return Err(SimError::ValidationError {
            key: "init.snapshot".into(),
            msg: "snapshot preset requires init.snapshot".into(),
        });
    }
    set!("init.amplitude", cfg.init_amplitude, f64);
    set!("io.out_dir", cfg.out_dir, String);
    set!("io.snap_every", cfg.snap_every, usize);
    set!("io.threads", cfg.threads, usize);
    set!("io.seed", cfg.seed, u64);
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let bad = |key: &str, msg: &str| -> Result<()> {
        Err(SimError::ValidationError { key: key.into(), msg: msg.into() })
    };
    if !(cfg.gravity > 0.0) {
        return bad("physics.g", "gravity must be positive");
    }
    if !(cfg.p_atm > 0.0) {
        return bad("physics.p_atm", "atmospheric pressure must be positive");
    }
    if !(cfg.mu_plus > 0.0) || !(cfg.mu_minus > 0.0) {
        return bad("physics.mu", "shear viscosities must satisfy mu_+- > 0");
    }
    if cfg.mu_prime_plus < 0.0 || cfg.mu_prime_minus < 0.0 {
        return bad("physics.mu_prime", "bulk viscosities must satisfy mu'_+- >= 0");
    }
    if cfg.sigma_plus < 0.0 || cfg.sigma_minus < 0.0 {
        return bad("physics.sigma", "surface tension coefficients must be >= 0");
    }
    if cfg.use_kappa && !(cfg.kappa > 0.0 && cfg.kappa < 1.0) {
        return bad("surface.kappa", "kappa must lie in (0, 1)");
    }
    if cfg.j_max > 2 {
        return bad("surface.j_max", "chain depth limited to 2");
    }
    if !(cfg.dt > 0.0) || !(cfg.t_end > 0.0) {
        return bad("step.dt", "dt and t_end must be positive");
    }
    if cfg.n_index == 0 {
        return bad("physics.n", "regularity index N must be >= 1");
    }
    // grid invariants via the domain constructors
    TorusSpec::new(cfg.l1, cfg.l2, cfg.n1, cfg.n2)?;
    SlabSpec::new(cfg.ell, cfg.b, cfg.nz_plus, cfg.nz_minus)?;
    match cfg.transport_scheme.as_str() {
        "characteristics" | "mollified" | "both" => {}
        other => {
            return bad(
                "transport.scheme",
                &format!("unknown scheme `{other}` (characteristics | mollified | both)"),
            )
        }
    }
    Ok(())
}

/// Canonical serialization: every key, one per line.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("grid.l1", cfg.l1.to_string());
    push("grid.l2", cfg.l2.to_string());
    push("grid.n1", cfg.n1.to_string());
    push("grid.n2", cfg.n2.to_string());
    push("grid.ell", cfg.ell.to_string());
    push("grid.b", cfg.b.to_string());
    push("grid.nz_plus", cfg.nz_plus.to_string());
    push("grid.nz_minus", cfg.nz_minus.to_string());
    push("physics.g", cfg.gravity.to_string());
    push("physics.p_atm", cfg.p_atm.to_string());
    push("physics.mu_plus", cfg.mu_plus.to_string());
    push("physics.mu_minus", cfg.mu_minus.to_string());
    push("physics.mu_prime_plus", cfg.mu_prime_plus.to_string());
    push("physics.mu_prime_minus", cfg.mu_prime_minus.to_string());
    push("physics.sigma_plus", cfg.sigma_plus.to_string());
    push("physics.sigma_minus", cfg.sigma_minus.to_string());
    if let Some(r) = cfg.rho_star {
        push("physics.rho_star", r.to_string());
    }
    if let Some(r) = cfg.rho_star_upper {
        push("physics.rho_star_upper", r.to_string());
    }
    push("physics.law_plus", law_string(&cfg.law_plus));
    push("physics.law_minus", law_string(&cfg.law_minus));
    push("physics.n", cfg.n_index.to_string());
    push("geometry.vandermonde_m", cfg.vandermonde_m.to_string());
    push("geometry.jacobian_floor", cfg.jacobian_floor.to_string());
    push("surface.kappa", cfg.kappa.to_string());
    push("surface.use_kappa", cfg.use_kappa.to_string());
    push("surface.cfl_max", cfg.cfl_max.to_string());
    push("surface.j_max", cfg.j_max.to_string());
    push("lame.cg_tol", cfg.cg_tol.to_string());
    push("lame.cg_maxit", cfg.cg_maxit.to_string());
    push("transport.scheme", cfg.transport_scheme.clone());
    push("transport.eps", cfg.transport_eps.to_string());
    push("transport.boundary_tol", cfg.boundary_tol.to_string());
    push("transport.clip", cfg.transport_clip.to_string());
    push("step.dt", cfg.dt.to_string());
    push("step.t_end", cfg.t_end.to_string());
    push("step.max_picard", cfg.max_picard.to_string());
    push("step.picard_tol", cfg.picard_tol.to_string());
    push("step.reject_retries", cfg.reject_retries.to_string());
    push("step.geometry_refreshes", cfg.geometry_refreshes.to_string());
    push("step.eta_delta", cfg.eta_delta.to_string());
    push("step.cc_tol", cfg.cc_tol.to_string());
    match &cfg.init {
        InitSelector::Equilibrium => push("init.preset", "equilibrium".into()),
        InitSelector::SmallEta => push("init.preset", "small-eta".into()),
        InitSelector::LargeEta => push("init.preset", "large-eta".into()),
        InitSelector::Snapshot(p) => {
            push("init.preset", "snapshot".into());
            push("init.snapshot", p.clone());
        }
    }
    push("init.amplitude", cfg.init_amplitude.to_string());
    push("io.out_dir", cfg.out_dir.clone());
    push("io.snap_every", cfg.snap_every.to_string());
    push("io.threads", cfg.threads.to_string());
    push("io.seed", cfg.seed.to_string());
    out
}

impl RunConfig {
    pub fn torus(&self) -> Result<TorusSpec> {
        TorusSpec::new(self.l1, self.l2, self.n1, self.n2)
    }

    pub fn slab(&self) -> Result<SlabSpec> {
        SlabSpec::new(self.ell, self.b, self.nz_plus, self.nz_minus)
    }

    /// Stepper parameters with the density corridor anchored at
    /// (rho_*, rho^*): [rho_*/2, 3 rho^*/2].
    pub fn stepper_params(&self, rho_star: f64, rho_star_upper: f64) -> StepperParams {
        let rho_lo = rho_star / 2.0;
        let rho_hi = 1.5 * rho_star_upper;
        StepperParams {
            dt: self.dt,
            t_end: self.t_end,
            max_picard: self.max_picard,
            picard_tol: self.picard_tol,
            reject_retries: self.reject_retries,
            geometry_refreshes: self.geometry_refreshes,
            kappa: self.kappa,
            use_kappa: self.use_kappa,
            cfl_max: self.cfl_max,
            sigma_plus: self.sigma_plus,
            sigma_minus: self.sigma_minus,
            gravity: self.gravity,
            rho_lo,
            rho_hi,
            eta_delta: self.eta_delta,
            cc_tol: self.cc_tol,
            j_max: self.j_max,
            boundary_tol: self.boundary_tol,
            lame: LameParams {
                mu_plus: self.mu_plus,
                mu_minus: self.mu_minus,
                mu_prime_plus: self.mu_prime_plus,
                mu_prime_minus: self.mu_prime_minus,
                rho_lo,
                rho_hi,
                jacobian_floor: self.jacobian_floor,
                cg_tol: self.cg_tol,
                cg_maxit: self.cg_maxit,
            },
            n_index: self.n_index,
            jacobian_floor: self.jacobian_floor,
            clip_transport: self.transport_clip,
        }
    }
}
