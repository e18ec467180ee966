//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roetrace_core::heat::{geometric_grid, heat_operator, theta, ThetaOptions};
use roetrace_core::operator::{make_delta_unitary, UnitaryRecipe};
use roetrace_core::space::check_regular;
use roetrace_core::spectral::{betti, ns_numbers, varopoulos_check, FourierSymbol, NsPolicy};
use roetrace_core::trace::{
    conjugation_suite, counterexample_suite, default_schedule, mollified_functional, regularized_trace,
    roe_functional, shifted_grid, CounterexampleOptions, LimitProcedure,
};
use roetrace_core::{Exhaustion, KernelOperator, SiteSet, SpaceModel, SpaceSpec};
use roetrace_oracle as oracle;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn lattice(d: usize, w: usize) -> Arc<SpaceModel> {
    Arc::new(SpaceModel::new(SpaceSpec::lattice(d, w)).expect("lattice"))
}

fn strip(length: f64, mesh: f64) -> Arc<SpaceModel> {
    Arc::new(SpaceModel::new(SpaceSpec::strip(length, mesh)).expect("strip"))
}

fn e<E: std::fmt::Debug>(err: E) -> String {
    format!("{err:?}")
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `(t, ϑ(t))` on `t ∈ [10, 10^4]`, 10 points per decade, for `Z^d`.
fn long_theta(d: usize) -> &'static Vec<(f64, f64)> {
    static Z1: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    static Z2: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let cell = if d == 1 { &Z1 } else { &Z2 };
    cell.get_or_init(|| {
        let s = lattice(d, if d == 1 { 540 } else { 760 });
        let lap = KernelOperator::laplacian(s, 1);
        let times = geometric_grid(10.0, 1e4, 31).expect("grid");
        theta(&lap, &times, &ThetaOptions::default()).expect("theta").iter().map(|x| (x.t, x.theta)).collect()
    })
}

fn oracle_density(d: usize, lambdas: &[f64]) -> Vec<(f64, f64)> {
    let lap = KernelOperator::laplacian(lattice(d, 8), 1);
    let sym = FourierSymbol::of(&lap).expect("separable stencil");
    lambdas.iter().map(|&l| (l, sym.counting(l))).collect()
}

fn c1_heat_trace() -> Verdict {
    let start = Instant::now();
    let times = [0.5, 1.0, 2.0, 4.0, 8.0];
    let opts = ThetaOptions { eps: 1e-13, ..ThetaOptions::default() };
    let mut worst = [0.0f64; 2];
    for d in [1usize, 2] {
        let lap = KernelOperator::laplacian(lattice(d, 80), 1);
        for s in theta(&lap, &times, &opts).map_err(e)? {
            let want = oracle::zd_heat_diag(s.t, d as u32);
            worst[d - 1] = worst[d - 1].max((s.theta - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst[0] <= 1e-10 && worst[1] <= 1e-9 && secs < 10.0,
        format!("max |ϑ - oracle|: Z¹ {:.2e} (≤1e-10), Z² {:.2e} (≤1e-9); {secs:.2} s (<10 s)", worst[0], worst[1]),
    )
}

fn c2_novikov_shubin() -> Verdict {
    let start = Instant::now();
    let lambdas = geometric_grid(1e-4, 1e-1, 31).map_err(e)?;
    let small: Vec<f64> = geometric_grid(1e-6, 1e-2, 9).map_err(e)?.into_iter().rev().collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for (d, target, tol) in [(1usize, 1.0, 0.05), (2, 2.0, 0.10)] {
        let th = long_theta(d);
        let b = betti(th, &oracle_density(d, &small), 1e-2).map_err(e)?;
        let b = b.value.ok_or("Betti routes disagree")?;
        let rep = ns_numbers(th, &oracle_density(d, &lambdas), b, &NsPolicy::default()).map_err(e)?;
        let ap = rep.alpha_prime.ok_or("no heat-side exponent")?;
        let a = rep.alpha.ok_or("no density-side exponent")?;
        ok &= (ap - target).abs() <= tol && (a - ap).abs() <= 0.05 && !rep.wide;
        parts.push(format!("Z{d}: α′={ap:.4} (target {target}±{tol}), α={a:.4}, |α-α′|={:.4}", (a - ap).abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    check(ok, format!("{}; {secs:.1} s (<120 s)", parts.join("; ")))
}

fn c3_varopoulos() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    let models: Vec<(&str, KernelOperator, Vec<f64>, Exhaustion)> = {
        let z1 = lattice(1, 700);
        let z2 = lattice(2, 240);
        let st = strip(130.0, 0.5);
        vec![
            (
                "Z¹",
                KernelOperator::laplacian(z1.clone(), 1),
                geometric_grid(10.0, 1e3, 21).map_err(e)?,
                Exhaustion::centered(&z1, 20, 200, 20, &[1.0, 2.0]).map_err(e)?,
            ),
            (
                "Z¹⊕Z¹",
                KernelOperator::laplacian(z1.clone(), 2),
                geometric_grid(10.0, 1e3, 21).map_err(e)?,
                Exhaustion::centered(&z1, 20, 200, 20, &[1.0, 2.0]).map_err(e)?,
            ),
            (
                "Z²",
                KernelOperator::laplacian(z2.clone(), 1),
                geometric_grid(10.0, 1e3, 21).map_err(e)?,
                Exhaustion::centered(&z2, 20, 200, 20, &[1.0, 2.0]).map_err(e)?,
            ),
            (
                "strip",
                KernelOperator::laplacian(st.clone(), 1),
                geometric_grid(1.0, 100.0, 21).map_err(e)?,
                Exhaustion::centered(&st, 20, 120, 10, &[0.5, 1.0]).map_err(e)?,
            ),
        ]
    };
    let mut constants = Vec::new();
    for (name, lap, times, exh) in &models {
        let regular = check_regular(lap.space(), exh).map_err(e)?.pass;
        let rep = varopoulos_check(lap, times, None, 1e-12, 0.05).map_err(e)?;
        ok &= regular && rep.pass && rep.alpha >= 0.95 && rep.constant > 0.0;
        constants.push(rep.constant);
        parts.push(format!("{name}: regular={regular} α₀={:.3} C={:.4}", rep.alpha, rep.constant));
    }
    // Z¹ at t = 100 against the oracle; direct sum doubles the constant
    let z1 = &models[0];
    let rep = varopoulos_check(&z1.1, &[100.0, 200.0], None, 1e-12, 0.05).map_err(e)?;
    let want = oracle::z1_heat(100.0, 0);
    ok &= (rep.samples[0].1 - want).abs() <= 1e-10 && (constants[1] - 2.0 * constants[0]).abs() <= 1e-10;
    parts.push(format!("sup H(100) = {:.6} (oracle {want:.6})", rep.samples[0].1));
    check(ok, parts.join("; "))
}

fn c4_tauberian() -> Verdict {
    let small: Vec<f64> = geometric_grid(1e-6, 1e-2, 9).map_err(e)?.into_iter().rev().collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [1usize, 2] {
        let b = betti(long_theta(d), &oracle_density(d, &small), 1e-2).map_err(e)?;
        let gap = (b.theta_route.0 - b.density_route.0).abs();
        ok &= gap <= 1e-2 && b.agree;
        parts.push(format!("Z{d}: ϑ→{:.2e}, N→{:.2e}, gap {gap:.1e}", b.theta_route.0, b.density_route.0));
    }
    let zero = KernelOperator::zero(lattice(1, 10), 1);
    let th: Vec<(f64, f64)> = theta(&zero, &[1.0, 10.0, 100.0, 1e3, 1e4], &ThetaOptions::default())
        .map_err(e)?
        .iter()
        .map(|s| (s.t, s.theta))
        .collect();
    let sym = FourierSymbol::of(&zero).ok_or("zero operator symbol")?;
    let dens: Vec<(f64, f64)> = small.iter().map(|&l| (l, sym.counting(l))).collect();
    let b = betti(&th, &dens, 1e-2).map_err(e)?;
    ok &= b.theta_route.0 == 1.0 && b.density_route.0 == 1.0;
    parts.push(format!("zero operator: ϑ→{}, N→{}", b.theta_route.0, b.density_route.0));
    check(ok, parts.join("; "))
}

fn c5_counterexample() -> Verdict {
    let rep = counterexample_suite(5, &CounterexampleOptions::default()).map_err(e)?;
    let phi_inf = rep.phi_infinite.value.ok_or("φ(T_∞) withheld")?;
    let zeros = rep.phi_finite.iter().all(|v| v.value == Some(0.0));
    let oracle_tail = oracle::geometric_tail(4.0, 5);
    let diag_ok = rep.stages.iter().all(|s| (s.diagonal_density - 1.0).abs() <= 1e-12 && s.schur <= s.beta2 * (1.0 + 1e-12));
    check(
        rep.tail_measured <= 6.6e-4 && (phi_inf - 1.0).abs() <= 1e-3 && zeros && diag_ok
            && (rep.tail_beta - oracle_tail).abs() <= 1e-15,
        format!(
            "‖T_∞ - T_5‖ ≤ {:.4e} (≤6.6e-4; Σβ₂ = {:.4e}, oracle {:.4e}); φ(T_∞) = {phi_inf:.6}; φ(T_1..5) exactly 0: {zeros}",
            rep.tail_measured, rep.tail_beta, oracle_tail
        ),
    )
}

/// Random `C* C` with `C` periodic (period `p`, band `b`) on a 1-D grid.
fn random_periodic_gram(space: &Arc<SpaceModel>, rng: &mut ChaCha8Rng) -> KernelOperator {
    let p = rng.gen_range(1..=4usize);
    let b = rng.gen_range(0..=2i64);
    let coef: Vec<Vec<Complex64>> = (0..p)
        .map(|_| (0..=2 * b).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let sp = space.clone();
    let c = KernelOperator::from_fn(space.clone(), 1, b as f64 * space.step(), move |x, y| {
        let (cx, cy) = (sp.coords(x)[0], sp.coords(y)[0]);
        let o = cy - cx;
        (o.abs() <= b).then(|| vec![coef[cx.rem_euclid(p as i64) as usize][(o + b) as usize]])
    })
    .expect("periodic factor");
    c.adjoint().compose(&c).expect("gram").mark_positive("Gram operator C* C")
}

fn random_stencil_gram(space: &Arc<SpaceModel>, rng: &mut ChaCha8Rng) -> KernelOperator {
    let b = rng.gen_range(0..=4i64);
    let entries = (-b..=b)
        .map(|o| (vec![o], vec![Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))]))
        .collect();
    let c = KernelOperator::from_stencil(space.clone(), 1, entries).expect("stencil factor");
    c.adjoint().compose(&c).expect("gram").mark_positive("Gram operator C* C")
}

fn c6_regularization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lim = LimitProcedure::cesaro().with_deflation(3);
    let probes = [(1.0, 1.0)];
    let z1 = lattice(1, 520);
    let exh = Exhaustion::centered(&z1, 240, 480, 24, &[]).map_err(e)?;
    let mut violations = 0;
    let mut max_slack: f64 = 0.0;
    let mut compare = |a: &KernelOperator, deltas: &[f64], exh: &Exhaustion| -> Result<(), String> {
        let phi = roe_functional(a, exh, &lim, &probes).map_err(e)?;
        let pv = phi.scalar().map_err(e)?;
        for &d in deltas {
            let psi = mollified_functional(a, d, exh, &lim, &probes).map_err(e)?;
            let slack = phi.uncertainty + psi.uncertainty;
            max_slack = max_slack.max(slack);
            if !(psi.cone_member && psi.scalar().map_err(e)? <= pv + slack) {
                violations += 1;
            }
        }
        Ok(())
    };
    for _ in 0..100 {
        let a = random_periodic_gram(&z1, &mut rng);
        compare(&a, &[0.5, 1.5, 2.5], &exh)?;
    }
    let st = strip(34.0, 0.05);
    let sexh = Exhaustion::centered(&st, 100, 300, 20, &[]).map_err(e)?;
    let sched = default_schedule(&st);
    for _ in 0..20 {
        let a = random_stencil_gram(&st, &mut rng);
        compare(&a, &sched, &sexh)?;
    }
    // Gauss-kernel family on the strip
    let gs = strip(80.0, 0.05);
    let gexh = Exhaustion::centered(&gs, 100, 300, 20, &[]).map_err(e)?;
    let h = gs.step();
    let mut worst_gap_ratio: f64 = 0.0;
    for sigma in [0.1, 0.2, 0.4] {
        let reach = (6.0 * sigma / h).ceil() as i64;
        let entries = (-reach..=reach)
            .map(|o| {
                let u = o as f64 * h;
                (vec![o], vec![Complex64::new(h * (-u * u / (sigma * sigma)).exp(), 0.0)])
            })
            .collect();
        let c = KernelOperator::from_stencil(gs.clone(), 1, entries).map_err(e)?;
        let a = c.adjoint().compose(&c).map_err(e)?.mark_positive("Gram operator C* C");
        let centre = gs.center();
        let row: Vec<f64> = (0..=2 * reach as usize).map(|j| a.block(centre, centre + j)[0].re / h).collect();
        let lip = row.windows(2).map(|w| (w[1] - w[0]).abs() / h).fold(0.0, f64::max);
        let phi = roe_functional(&a, &gexh, &lim, &probes).map_err(e)?.scalar().map_err(e)?;
        for d in default_schedule(&gs) {
            let psi = mollified_functional(&a, d, &gexh, &lim, &probes).map_err(e)?.scalar().map_err(e)?;
            worst_gap_ratio = worst_gap_ratio.max((phi - psi).abs() / (3.0 * lip * d));
        }
    }
    check(
        violations == 0 && worst_gap_ratio <= 1.0,
        format!(
            "ψ_δ ≤ φ violations: {violations} / (300 lattice + {} strip) (max slack {max_slack:.1e}); Gauss gap / (3·Lip·δ) ≤ {worst_gap_ratio:.3}",
            20 * sched.len()
        ),
    )
}

fn c7_delta_unitary() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z1 = lattice(1, 520);
    let exh = Exhaustion::centered(&z1, 240, 480, 24, &[]).map_err(e)?;
    let lim = LimitProcedure::cesaro().with_deflation(3);
    let heat = heat_operator(&KernelOperator::laplacian(z1.clone(), 1), 1.0, 1e-13).map_err(e)?;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let mut max_delta: f64 = 0.0;
    for trial in 0..50 {
        let a = if trial % 2 == 0 {
            heat.clone()
        } else {
            let p = rng.gen_range(1..=4i64);
            let vals: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..2.0)).collect();
            let diag: Vec<f64> = (0..z1.len()).map(|x| vals[z1.coords(x)[0].rem_euclid(p) as usize]).collect();
            KernelOperator::diagonal(z1.clone(), 1, &diag).map_err(e)?
        };
        let eps = rng.gen_range(0.0005..0.0045);
        let u = make_delta_unitary(z1.clone(), 1, 0.01, UnitaryRecipe::PerturbedShift { axis: 0, epsilon: eps, seed: trial })
            .map_err(e)?;
        let rep = conjugation_suite(&a, &u, &exh, &lim, &[(1.0, 1.0)]).map_err(e)?;
        let delta = rep.defects.max();
        max_delta = max_delta.max(delta);
        worst = worst.max((rep.ratio - 1.0).abs() / (2.0 * delta));
        if !(delta <= 0.01 && rep.in_band) {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!("violations: {violations}/50; max δ = {max_delta:.4}; max |ratio-1|/(2δ) = {worst:.3}"),
    )
}

fn c8_shift_invariance() -> Verdict {
    let lim = LimitProcedure::cesaro().with_deflation(3);
    let radii: Vec<f64> = (-2..=3).map(|r| r as f64).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [1usize, 2] {
        let s = lattice(d, 504);
        let exh = Exhaustion::centered(&s, 260, 500, 20, &[]).map_err(e)?;
        let heat = heat_operator(&KernelOperator::laplacian(s.clone(), 1), 1.0, 1e-13).map_err(e)?;
        let mut ops = vec![("e^{-Δ}", heat)];
        if d == 1 {
            let diag: Vec<f64> =
                (0..s.len()).map(|x| if s.coords(x)[0].rem_euclid(2) == 0 { 1.0 } else { 3.0 }).collect();
            ops.push(("periodic diagonal", KernelOperator::diagonal(s.clone(), 1, &diag).map_err(e)?));
        }
        for (name, op) in ops {
            let grid = shifted_grid(&op, &exh, &radii, &lim, &[(1.0, 1.0)]).map_err(e)?;
            let base = grid.iter().find(|g| g.0 == 0.0 && g.1 == 0.0).ok_or("no base entry")?.2.scalar().map_err(e)?;
            let mut worst: f64 = 0.0;
            for (_, _, v) in &grid {
                worst = worst.max((v.scalar().map_err(e)? - base).abs());
            }
            ok &= worst <= 1e-3;
            parts.push(format!("Z{d} {name}: max |shifted - φ| = {worst:.2e} over 36 probes"));
        }
    }
    check(ok, format!("{} (≤1e-3)", parts.join("; ")))
}

fn c9_regularity() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [1usize, 2] {
        let s = lattice(d, 220);
        let exh = Exhaustion::centered(&s, 20, 200, 20, &[1.0]).map_err(e)?;
        let rep = check_regular(&s, &exh).map_err(e)?;
        let worst = rep.probes[0].ratios.iter().map(|(n, r)| (r - 1.0) * n).fold(0.0, f64::max);
        ok &= rep.pass && worst <= 5.0;
        parts.push(format!("Z{d}: max n·(ratio-1) = {worst:.3} (≤5)"));
    }
    let tree = Arc::new(SpaceModel::new(SpaceSpec::tree(3, 12)).map_err(e)?);
    let radii: Vec<f64> = (2..=10).map(|r| r as f64).collect();
    let texh = Exhaustion::balls(&tree, tree.center(), &radii, &[1.0]).map_err(e)?;
    let trep = check_regular(&tree, &texh).map_err(e)?;
    let tmin = trep.probes[0].ratios.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    ok &= !trep.pass && tmin >= 2.0;
    parts.push(format!("tree: FAIL as expected, min ratio {tmin:.3} (≥2)"));

    // penumbra lemma (i) and (iii) by enumeration
    let spaces = [lattice(1, 40), lattice(2, 24), Arc::new(SpaceModel::new(SpaceSpec::tree(3, 14)).map_err(e)?), strip(20.0, 0.25)];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for i in 0..200 {
        let s = &spaces[i % spaces.len()];
        let h = s.step();
        let core = s.ball(s.center(), rng.gen_range(0.0..3.0) * h).map_err(e)?;
        let cloud = s.ball(s.center(), 6.0 * h).map_err(e)?;
        let k: SiteSet = cloud.iter().filter(|x| core.contains(*x) || rng.gen_bool(0.5)).collect();
        let (r1, r2, big_r) = (rng.gen_range(0.0..3.0) * h, rng.gen_range(0.0..3.0) * h, rng.gen_range(0.0..3.0) * h);
        let outer = s.pen_plus(&k, r1).map_err(e)?;
        let inner = s.pen_minus(&k, r2).map_err(e)?;
        let lemma_i = inner.is_subset(&k) && k.is_subset(&outer);
        let shell = outer.difference(&inner);
        let lemma_iii = shell.is_empty() || {
            let grown = s.pen_plus(&shell, big_r).map_err(e)?;
            let bound = s.pen_plus(&k, r1 + big_r + h).map_err(e)?.difference(&s.pen_minus(&k, r2 + big_r + h).map_err(e)?);
            grown.is_subset(&bound)
        };
        if !(lemma_i && lemma_iii) {
            failures += 1;
        }
    }
    ok &= failures == 0;
    parts.push(format!("penumbra lemma (i)/(iii): {failures} failures in 200 instances"));
    check(ok, parts.join("; "))
}

fn c10_compact_vanishing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let lim = LimitProcedure::cesaro().with_deflation(3);
    let mut failures = 0;
    for i in 0..100 {
        let d = 1 + i % 2;
        let s = lattice(d, if d == 1 { 110 } else { 60 });
        let exh = if d == 1 {
            Exhaustion::centered(&s, 20, 100, 10, &[]).map_err(e)?
        } else {
            Exhaustion::centered(&s, 10, 50, 5, &[]).map_err(e)?
        };
        let support: Vec<usize> = s.ball(s.center(), rng.gen_range(0.0..4.0)).map_err(e)?.iter().collect();
        let mut entries: Vec<(usize, usize, Vec<Complex64>)> = Vec::new();
        for &x in &support {
            for &y in &support {
                if rng.gen_bool(0.6) {
                    entries.push((x, y, vec![Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))]));
                }
            }
        }
        let c = KernelOperator::from_entries(s.clone(), 1, entries).map_err(e)?;
        let a = c.adjoint().compose(&c).map_err(e)?.mark_positive("Gram operator C* C");
        let phi = roe_functional(&a, &exh, &lim, &[(1.0, 1.0)]).map_err(e)?;
        let reg = regularized_trace(&a, &[0.5, 1.5], &exh, &lim, &[(1.0, 1.0)]).map_err(e)?;
        let ok = phi.cone_member
            && phi.value == Some(0.0)
            && reg.value.value == Some(0.0)
            && reg.per_delta.iter().all(|p| p.1 == Some(0.0));
        if !ok {
            failures += 1;
        }
    }
    check(failures == 0, format!("φ = 0 and regularized trace = 0 exactly: {} / 100 instances", 100 - failures))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 heat-trace oracle", c1_heat_trace),
        ("2 Novikov–Shubin exponents", c2_novikov_shubin),
        ("3 Varopoulos bound", c3_varopoulos),
        ("4 Tauberian identity", c4_tauberian),
        ("5 non-semicontinuity", c5_counterexample),
        ("6 regularization dominance", c6_regularization),
        ("7 δ-unitary ε-invariance", c7_delta_unitary),
        ("8 shift invariance", c8_shift_invariance),
        ("9 exhaustion regularity", c9_regularity),
        ("10 compact vanishing", c10_compact_vanishing),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{name}] {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{name}] {detail} ({secs:.1} s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
