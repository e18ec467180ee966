//! `verify all`: nine invariant suites on the configured space, run
//! concurrently, each writing its own CSV.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use roetrace_core::heat::{semigroup_check, theta, ThetaOptions};
use roetrace_core::operator::{make_delta_unitary, UnitaryRecipe};
use roetrace_core::space::check_regular;
use roetrace_core::spectral::{betti, laplace_transform, ns_numbers, varopoulos_check, FourierSymbol, NsPolicy};
use roetrace_core::trace::{
    conjugation_suite, default_schedule, mollified_functional, regularized_trace, roe_functional, shifted_grid,
};
use roetrace_core::{KernelOperator, SpaceModel};

use crate::commands::{density, probes, theta_samples};
use crate::config::{Failure, RunConfig};
use crate::output::{num, Run};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    /// The suite does not apply to the configured space.
    Skip,
}

impl Status {
    fn of(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        }
    }
}

pub struct SuiteResult {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

type Suite = fn(&Run) -> Result<(Status, String), Failure>;

pub const SUITES: [(&str, Suite); 9] = [
    ("heat", heat),
    ("decay", decay),
    ("tauberian", tauberian),
    ("novikov_shubin", novikov_shubin),
    ("regularity", regularity),
    ("shift", shift),
    ("regularization", regularization),
    ("conjugation", conjugation),
    ("compact", compact),
];

/// Runs every suite; the summary goes to `verify.csv`.
pub fn verify_all(run: &Run) -> Result<Vec<SuiteResult>, Failure> {
    let results: Vec<SuiteResult> = SUITES
        .par_iter()
        .map(|(name, suite)| {
            let (status, detail) = run.time(name, || suite(run)).unwrap_or_else(|f| (Status::Fail, f.message));
            SuiteResult { name, status, detail }
        })
        .collect();
    let rows: Vec<Vec<String>> =
        results.iter().map(|r| vec![r.name.to_string(), r.status.label().to_string(), r.detail.clone()]).collect();
    run.csv("verify", &["suite", "status", "detail"], &rows)?;
    Ok(results)
}

fn laplacian(space: &Arc<SpaceModel>) -> KernelOperator {
    KernelOperator::laplacian(space.clone(), space.fiber())
}

fn trials(cfg: &RunConfig) -> Result<usize, Failure> {
    Ok(cfg.get("verify", "trials", 8)?)
}

fn rng(cfg: &RunConfig, salt: u64) -> Result<ChaCha8Rng, Failure> {
    Ok(ChaCha8Rng::seed_from_u64(cfg.seed()?.wrapping_mul(1_000_003).wrapping_add(salt)))
}

/// `ϑ(t)` against the Laplace transform of the Fourier counting function,
/// and the semigroup law `p_s p_t = p_{s+t}`.
fn heat(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let lap = laplacian(&space);
    let eps = cfg.heat_eps()?;
    let times = [0.5, 1.0, 2.0, 4.0, 8.0];
    let samples = theta(&lap, &times, &ThetaOptions { eps, ..ThetaOptions::default() })?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let sym = FourierSymbol::of(&lap);
    for s in &samples {
        let other = sym.as_ref().map(|sym| laplace_transform(|l| sym.counting(l), sym.spectrum().1, sym.mass, s.t, 200));
        if let Some(o) = other {
            worst = worst.max((s.theta - o).abs());
        }
        rows.push(vec![num(s.t), num(s.theta), other.map(num).unwrap_or_default(), num(s.err_bound)]);
    }
    run.csv("verify_heat", &["t", "theta", "theta_fourier", "err_bound"], &rows)?;
    let semi = semigroup_check(&lap, 1.0, 2.0, eps)?;
    let ok = worst <= 1e-8 && semi.pass;
    let route = if sym.is_some() { format!("max |ϑ - Fourier| {worst:.1e}; ") } else { String::new() };
    Ok((Status::of(ok), format!("{route}semigroup defect {:.1e} (bound {:.1e})", semi.defect, semi.bound)))
}

/// `sup_x H(t,x,x) <= C t^{-1/2}` on the `[heat]` grid.
fn decay(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let rep = varopoulos_check(&laplacian(&space), &cfg.heat_times()?, None, cfg.heat_eps()?, 0.05)?;
    let rows: Vec<Vec<String>> = rep.samples.iter().map(|(t, h)| vec![num(*t), num(*h), num(rep.constant / t.sqrt())]).collect();
    run.csv("verify_decay", &["t", "sup_heat_diagonal", "bound"], &rows)?;
    let ok = rep.pass && rep.alpha >= 0.95;
    Ok((Status::of(ok), format!("C = {:.4}, decay exponent {:.3}", rep.constant, rep.alpha)))
}

/// `(t, ϑ)` and `(λ, N)` samples.
type Routes = (Vec<(f64, f64)>, Vec<(f64, f64)>);

/// Both spectral routes, or `None` when the oracle density does not apply.
fn routes(run: &Run) -> Result<Option<Routes>, Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    if cfg.raw("spectral", "method").unwrap_or("oracle") == "oracle" && FourierSymbol::of(&laplacian(&space)).is_none() {
        return Ok(None);
    }
    let th: Vec<(f64, f64)> = theta_samples(cfg, &space)?.iter().map(|s| (s.t, s.theta)).collect();
    let d = density(cfg, &space, &cfg.lambda_grid()?)?;
    Ok(Some((th, d.grid.iter().copied().zip(d.values.iter().copied()).collect())))
}

/// `lim_{t→∞} ϑ(t) = lim_{λ→0+} N(λ)`.
fn tauberian(run: &Run) -> Result<(Status, String), Failure> {
    let Some((th, de)) = routes(run)? else {
        return Ok((Status::Skip, "Fourier oracle needs a lattice; set spectral.method = moments".into()));
    };
    let falling: Vec<(f64, f64)> = de.iter().rev().copied().collect();
    let b = betti(&th, &falling, run.config().get("spectral", "betti_tol", 1e-2)?)?;
    run.csv(
        "verify_tauberian",
        &["route", "limit", "err_bound"],
        &[
            vec!["theta".into(), num(b.theta_route.0), num(b.theta_route.1)],
            vec!["density".into(), num(b.density_route.0), num(b.density_route.1)],
        ],
    )?;
    let gap = (b.theta_route.0 - b.density_route.0).abs();
    Ok((Status::of(b.agree), format!("ϑ → {:.2e}, N → {:.2e}, gap {gap:.1e}", b.theta_route.0, b.density_route.0)))
}

/// Heat-side and density-side exponents agree and satisfy the chain.
fn novikov_shubin(run: &Run) -> Result<(Status, String), Failure> {
    let Some((th, de)) = routes(run)? else {
        return Ok((Status::Skip, "Fourier oracle needs a lattice; set spectral.method = moments".into()));
    };
    let falling: Vec<(f64, f64)> = de.iter().rev().copied().collect();
    let b = betti(&th, &falling, run.config().get("spectral", "betti_tol", 1e-2)?)?;
    let Some(bv) = b.value else {
        return Ok((Status::Fail, "Betti routes disagree".into()));
    };
    let policy = NsPolicy::default();
    let rep = ns_numbers(&th, &de, bv, &policy)?;
    run.csv(
        "verify_novikov_shubin",
        &["quantity", "value", "err_bound"],
        &[
            vec!["alpha".into(), rep.alpha.map(num).unwrap_or_default(), num(rep.residual)],
            vec!["alpha_prime".into(), rep.alpha_prime.map(num).unwrap_or_default(), num(rep.residual)],
        ],
    )?;
    let (Some(a), Some(ap)) = (rep.alpha, rep.alpha_prime) else {
        return Ok((Status::Fail, "missing exponent".into()));
    };
    let ok = !rep.wide && (a - ap).abs() <= policy.chain_tolerance && rep.chain_ok != Some(false);
    Ok((Status::of(ok), format!("α = {a:.4}, α′ = {ap:.4}, wide = {}", rep.wide)))
}

/// Shell ratios `vol(K(r))/vol(K(-r))` tend to 1.
fn regularity(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    if exh.radii_probes().is_empty() {
        return Ok((Status::Skip, "no probe radii configured".into()));
    }
    let rep = check_regular(&space, &exh)?;
    let rows: Vec<Vec<String>> = rep
        .probes
        .iter()
        .flat_map(|p| p.ratios.iter().map(move |(s, q)| vec![num(p.radius), num(*s), num(*q)]))
        .collect();
    run.csv("verify_regularity", &["probe_radius", "scale", "ratio"], &rows)?;
    let last = rep.probes.iter().filter_map(|p| p.ratios.last().map(|r| r.1)).fold(0.0, f64::max);
    Ok((Status::of(rep.pass), format!("largest final shell ratio {last:.4}")))
}

/// `φ` is unchanged by signed shifts of the exhaustion.
fn shift(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    let op = cfg.operator(&space)?;
    let radii: Vec<f64> = (-2..=3).map(|r| r as f64 * space.step()).collect();
    let grid = shifted_grid(&op, &exh, &radii, &cfg.limit()?, &probes(cfg, &space)?)?;
    let base = grid
        .iter()
        .find(|g| g.0 == 0.0 && g.1 == 0.0)
        .and_then(|g| g.2.value)
        .ok_or_else(|| Failure::runtime("trace: unshifted value withheld"))?;
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (r1, r2, v) in &grid {
        let x = v.value.unwrap_or(f64::NAN);
        worst = worst.max((x - base).abs());
        rows.push(vec![num(*r1), num(*r2), num(x), num(v.uncertainty)]);
    }
    run.csv("verify_shift", &["r1", "r2", "value", "err_bound"], &rows)?;
    Ok((Status::of(worst <= 1e-3), format!("max |shifted - φ| = {worst:.2e} over {} shifts", grid.len())))
}

/// Random `C*C`, `C` banded along the first axis with period `p` coefficients.
fn periodic_gram(space: &Arc<SpaceModel>, rng: &mut ChaCha8Rng) -> Result<KernelOperator, Failure> {
    let p = rng.gen_range(1..=4i64);
    let b = rng.gen_range(0..=2i64);
    let coef: Vec<Vec<Complex64>> = (0..p)
        .map(|_| (0..=2 * b).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let sp = space.clone();
    let c = KernelOperator::from_fn(space.clone(), 1, b as f64 * space.step(), move |x, y| {
        let (cx, cy) = (sp.coords(x), sp.coords(y));
        let o = cy[0] - cx[0];
        (cx[1..] == cy[1..] && o.abs() <= b).then(|| vec![coef[cx[0].rem_euclid(p) as usize][(o + b) as usize]])
    })?;
    Ok(c.adjoint().compose(&c)?.mark_positive("Gram operator C* C"))
}

/// `ψ_δ(A) <= φ(A)` for random positive operators.
fn regularization(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    if !space.is_grid() {
        return Ok((Status::Skip, "needs a grid space".into()));
    }
    let exh = cfg.exhaustion(&space)?;
    let lim = cfg.limit()?;
    let pr = probes(cfg, &space)?;
    let schedule = default_schedule(&space);
    let mut rng = rng(cfg, 6)?;
    let mut rows = Vec::new();
    let mut violations = 0;
    for trial in 0..trials(cfg)? {
        let a = periodic_gram(&space, &mut rng)?;
        let phi = roe_functional(&a, &exh, &lim, &pr)?;
        let pv = phi.scalar()?;
        for &d in &schedule {
            let psi = mollified_functional(&a, d, &exh, &lim, &pr)?;
            let sv = psi.scalar()?;
            let slack = phi.uncertainty + psi.uncertainty;
            if !(psi.cone_member && sv <= pv + slack) {
                violations += 1;
            }
            rows.push(vec![trial.to_string(), num(d), num(pv), num(sv), num(slack)]);
        }
    }
    run.csv("verify_regularization", &["trial", "delta", "phi", "psi", "err_bound"], &rows)?;
    Ok((Status::of(violations == 0), format!("ψ_δ ≤ φ violations: {violations}/{}", rows.len())))
}

/// `φ(UAU*)/φ(A) ∈ [1-2δ, 1+2δ]` for δ-unitary `U`.
fn conjugation(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    if !space.is_grid() {
        return Ok((Status::Skip, "needs a grid space".into()));
    }
    let exh = cfg.exhaustion(&space)?;
    let lim = cfg.limit()?;
    let pr = probes(cfg, &space)?;
    let a = cfg.operator(&space)?;
    let mut rng = rng(cfg, 7)?;
    let mut rows = Vec::new();
    let mut violations = 0;
    for trial in 0..trials(cfg)? {
        let eps = rng.gen_range(0.0005..0.0045);
        let recipe = UnitaryRecipe::PerturbedShift { axis: 0, epsilon: eps, seed: rng.gen() };
        let u = make_delta_unitary(space.clone(), space.fiber(), 0.01, recipe)?;
        let rep = conjugation_suite(&a, &u, &exh, &lim, &pr)?;
        if !(rep.defects.max() <= 0.01 && rep.in_band) {
            violations += 1;
        }
        rows.push(vec![trial.to_string(), num(rep.defects.max()), num(rep.ratio), num(rep.band.0), num(rep.band.1)]);
    }
    run.csv("verify_conjugation", &["trial", "delta", "ratio", "band_lo", "band_hi"], &rows)?;
    Ok((Status::of(violations == 0), format!("violations: {violations}/{}", rows.len())))
}

/// Finitely supported positive operators have `φ = 0` and regularized trace 0.
fn compact(run: &Run) -> Result<(Status, String), Failure> {
    let cfg = run.config();
    let space = cfg.space()?;
    let exh = cfg.exhaustion(&space)?;
    let lim = cfg.limit()?;
    let pr = probes(cfg, &space)?;
    let schedule = default_schedule(&space);
    let mut rng = rng(cfg, 10)?;
    let mut rows = Vec::new();
    let mut failures = 0;
    for trial in 0..trials(cfg)? {
        let support: Vec<usize> = space.ball(space.center(), rng.gen_range(0.0..4.0) * space.step())?.iter().collect();
        let mut entries = Vec::new();
        for &x in &support {
            for &y in &support {
                if rng.gen_bool(0.6) {
                    entries.push((x, y, vec![Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))]));
                }
            }
        }
        let c = KernelOperator::from_entries(space.clone(), 1, entries)?;
        let a = c.adjoint().compose(&c)?.mark_positive("Gram operator C* C");
        let phi = roe_functional(&a, &exh, &lim, &pr)?;
        let reg = regularized_trace(&a, &schedule, &exh, &lim, &pr)?;
        let ok = phi.cone_member && phi.value == Some(0.0) && reg.value.value == Some(0.0);
        if !ok {
            failures += 1;
        }
        rows.push(vec![trial.to_string(), support.len().to_string(), phi.value.map(num).unwrap_or_default(), reg.value.value.map(num).unwrap_or_default()]);
    }
    run.csv("verify_compact", &["trial", "support_sites", "phi", "regularized"], &rows)?;
    Ok((Status::of(failures == 0), format!("exact zeros: {}/{}", rows.len() - failures, rows.len())))
}
