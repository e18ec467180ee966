//! Single-purpose commands: each reads the run config, computes, and
//! writes its CSV artifacts.

use roetrace_core::heat::{theta, ThetaOptions, ThetaSample};
use roetrace_core::spectral::{betti, ns_numbers, spectral_density, DensityMethod, DensityRequest, NsPolicy, SpectralDensity};
use roetrace_core::space::check_regular;
use roetrace_core::trace::{
    counterexample_suite, default_schedule, regularized_trace, roe_functional, CounterexampleOptions, TraceValue,
};
use roetrace_core::{KernelOperator, SpaceModel};

use crate::config::{Failure, RunConfig};
use crate::output::{num, opt, Run};

/// Probe pairs `(r, r)` from the exhaustion probes, one mesh step by default.
pub fn probes(cfg: &RunConfig, space: &SpaceModel) -> Result<Vec<(f64, f64)>, Failure> {
    let radii = cfg.list("exhaustion", "probes")?.unwrap_or_else(|| vec![space.step()]);
    Ok(radii.into_iter().map(|r| (r, r)).collect())
}

fn value_row(v: &TraceValue) -> Vec<String> {
    vec![
        opt(v.value),
        num(v.envelope.0),
        num(v.envelope.1),
        num(v.uncertainty),
        v.cone_member.to_string(),
        v.omega_dependent.to_string(),
        v.infinitesimal.to_string(),
    ]
}

const VALUE_HEADER: [&str; 7] =
    ["value", "envelope_lo", "envelope_hi", "err_bound", "cone_member", "omega_dependent", "infinitesimal"];

pub fn space_build(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    let rows: Vec<Vec<String>> = exh
        .scales()
        .iter()
        .zip(exh.sets())
        .map(|(s, k)| vec![num(*s), k.len().to_string(), num(space.volume(k))])
        .collect();
    run.csv("exhaustion", &["scale", "sites", "volume"], &rows)?;
    if !exh.radii_probes().is_empty() {
        let rep = run.time("regularity", || check_regular(&space, &exh))?;
        let rows: Vec<Vec<String>> = rep
            .probes
            .iter()
            .flat_map(|p| p.ratios.iter().map(move |(s, q)| vec![num(p.radius), num(*s), num(*q), p.pass.to_string()]))
            .collect();
        run.csv("regularity", &["probe_radius", "scale", "ratio", "regular"], &rows)?;
    }
    Ok(())
}

pub fn trace_phi(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    let op = run.time("operator", || cfg.operator(&space))?;
    let v = run.time("phi", || roe_functional(&op, &exh, &cfg.limit()?, &probes(cfg, &space)?).map_err(Failure::from))?;
    run.csv("phi", &VALUE_HEADER, &[value_row(&v)])?;
    let rows: Vec<Vec<String>> =
        v.diagnostics.iter().map(|s| vec![num(s.scale), num(s.ratio), num(s.mu), num(s.vol)]).collect();
    run.csv("phi_ratios", &["scale", "ratio", "mu", "vol"], &rows)?;
    Ok(())
}

pub fn trace_regularized(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    let op = run.time("operator", || cfg.operator(&space))?;
    let schedule = cfg.list("trace", "schedule")?.unwrap_or_else(|| default_schedule(&space));
    let reg = run.time("regularized", || {
        regularized_trace(&op, &schedule, &exh, &cfg.limit()?, &probes(cfg, &space)?).map_err(Failure::from)
    })?;
    let rows: Vec<Vec<String>> = reg.per_delta.iter().map(|(d, v)| vec![num(*d), opt(*v)]).collect();
    run.csv("regularized_schedule", &["delta", "psi"], &rows)?;
    let mut header = vec!["functional"];
    header.extend(VALUE_HEADER);
    header.extend(["gap", "monotone"]);
    let tail = [opt(reg.gap), reg.monotone.to_string()];
    let rows = vec![
        [vec!["phi".to_string()], value_row(&reg.phi), tail.to_vec()].concat(),
        [vec!["sup_psi".to_string()], value_row(&reg.value), tail.to_vec()].concat(),
    ];
    run.csv("regularized", &header, &rows)?;
    Ok(())
}

pub fn trace_counterexample(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let n: usize = cfg.get("trace", "n", 5)?;
    let d = CounterexampleOptions::default();
    let opts = CounterexampleOptions {
        mesh_ratio: cfg.get("trace", "mesh_ratio", d.mesh_ratio)?,
        measured_stages: cfg.get("trace", "measured", d.measured_stages)?,
        ..d
    };
    let rep = run.time("counterexample", || counterexample_suite(n, &opts))?;
    let rows: Vec<Vec<String>> = rep
        .stages
        .iter()
        .map(|s| {
            vec![s.stage.to_string(), num(s.radius), num(s.mesh), num(s.schur), num(s.beta2), num(s.diagonal_density)]
        })
        .collect();
    run.csv("counterexample_stages", &["stage", "radius", "mesh", "schur_bound", "beta2", "diagonal_density"], &rows)?;
    let mut rows = vec![
        vec!["norm_tail_measured".into(), num(rep.tail_measured), String::new()],
        vec!["norm_tail_beta2".into(), num(rep.tail_beta), String::new()],
        vec!["phi_T_inf".into(), opt(rep.phi_infinite.value), num(rep.phi_infinite.uncertainty)],
    ];
    for (k, v) in rep.phi_finite.iter().enumerate() {
        rows.push(vec![format!("phi_T_{}", k + 1), opt(v.value), num(v.uncertainty)]);
    }
    run.csv("counterexample", &["quantity", "value", "err_bound"], &rows)?;
    Ok(())
}

/// `ϑ(t)` of the space Laplacian on the `[heat]` grid.
pub fn theta_samples(cfg: &RunConfig, space: &std::sync::Arc<SpaceModel>) -> Result<Vec<ThetaSample>, Failure> {
    let lap = KernelOperator::laplacian(space.clone(), space.fiber());
    let opts = ThetaOptions { eps: cfg.heat_eps()?, source: cfg.moment_source()?, set: None };
    Ok(theta(&lap, &cfg.heat_times()?, &opts)?)
}

/// `N(λ)` of the space Laplacian on `grid` with the `[spectral]` method.
pub fn density(cfg: &RunConfig, space: &std::sync::Arc<SpaceModel>, grid: &[f64]) -> Result<SpectralDensity, Failure> {
    let lap = KernelOperator::laplacian(space.clone(), space.fiber());
    let request = match cfg.raw("spectral", "method").unwrap_or("oracle") {
        "oracle" => DensityRequest::FourierOracle,
        "moments" => DensityRequest::Moments { degree: cfg.get("spectral", "degree", 400)?, source: cfg.moment_source()?, set: None },
        other => return Err(crate::config::ConfigError(format!("[spectral] unknown method `{other}`")).into()),
    };
    Ok(spectral_density(&lap, grid, &request)?)
}

pub fn heat_theta(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let samples = run.time("theta", || theta_samples(cfg, &space))?;
    let rows: Vec<Vec<String>> =
        samples.iter().map(|s| vec![num(s.t), num(s.theta), num(s.err_bound), s.degree.to_string()]).collect();
    run.csv("theta", &["t", "theta", "err_bound", "degree"], &rows)?;
    Ok(())
}

pub fn spectral_dos(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let grid = cfg.lambda_grid()?;
    let d = run.time("density", || density(cfg, &space, &grid))?;
    let width = match d.method {
        DensityMethod::FourierOracle => 0.0,
        DensityMethod::Moments { width, .. } => width,
    };
    let rows: Vec<Vec<String>> = d.grid.iter().zip(&d.values).map(|(l, n)| vec![num(*l), num(*n), num(width)]).collect();
    run.csv("dos", &["lambda", "N", "smoothing_width"], &rows)?;
    let method = match d.method {
        DensityMethod::FourierOracle => "oracle".to_string(),
        DensityMethod::Moments { degree, .. } => format!("moments:{degree}"),
    };
    run.csv("dos_summary", &["method", "atom", "mass", "smoothing_width"], &[vec![method, num(d.atom), num(d.mass), num(width)]])?;
    Ok(())
}

pub fn spectral_ns(run: &Run) -> Result<(), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let th = run.time("theta", || theta_samples(cfg, &space))?;
    let grid = cfg.lambda_grid()?;
    let d = run.time("density", || density(cfg, &space, &grid))?;
    let th_pts: Vec<(f64, f64)> = th.iter().map(|s| (s.t, s.theta)).collect();
    let de_pts: Vec<(f64, f64)> = d.grid.iter().copied().zip(d.values.iter().copied()).collect();
    let falling: Vec<(f64, f64)> = de_pts.iter().rev().copied().collect();
    let b = betti(&th_pts, &falling, cfg.get("spectral", "betti_tol", 1e-2)?)?;
    let b_value = b.value.ok_or_else(|| {
        Failure::runtime(format!(
            "spectral: Betti routes disagree (theta {:e}, density {:e})",
            b.theta_route.0, b.density_route.0
        ))
    })?;
    let rep = ns_numbers(&th_pts, &de_pts, b_value, &NsPolicy::default())?;
    let rows = vec![
        vec!["betti".into(), num(b_value), num(b.uncertainty)],
        vec!["alpha".into(), opt(rep.alpha), num(rep.residual)],
        vec!["alpha_lower".into(), opt(rep.alpha_lower), num(rep.residual)],
        vec!["alpha_prime".into(), opt(rep.alpha_prime), num(rep.residual)],
        vec!["alpha_prime_lower".into(), opt(rep.alpha_prime_lower), num(rep.residual)],
        vec!["wide".into(), rep.wide.to_string(), String::new()],
        vec!["power_law_regular".into(), rep.power_law_regular.to_string(), String::new()],
        vec!["chain_ok".into(), rep.chain_ok.map(|c| c.to_string()).unwrap_or_default(), String::new()],
    ];
    run.csv("ns", &["quantity", "value", "err_bound"], &rows)?;
    let rows: Vec<Vec<String>> = th.iter().map(|s| vec![num(s.t), num(s.theta - b_value), num(s.err_bound)]).collect();
    run.csv("ns_theta", &["t", "theta_minus_b", "err_bound"], &rows)?;
    let rows: Vec<Vec<String>> = de_pts.iter().map(|(l, n)| vec![num(*l), num(n - b_value)]).collect();
    run.csv("ns_density", &["lambda", "N_minus_b"], &rows)?;
    Ok(())
}
