//! Exhaustion-averaged traces: the functional `φ(A) = Lim μ_A(K_n)/vol(K_n)`,
//! its shifted variants, cone diagnostics, conjugation invariance, the
//! mollified functionals `ψ_δ = φ(B_δ · B_δ*)` and the regularized trace.
//!
//! The generalized limit is replaced by computable surrogates on the tail
//! of the ratio sequence. Before folding, a fitted expansion
//! `Σ_j c_j / n^j` may be subtracted: the difference is an infinitesimal
//! sequence, which every generalized limit ignores.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{vanishing_trend, TrendVerdict};
use crate::operator::{
    certify_positive, is_delta_unitary, schur_bound, schur_bound_general, KernelOperator, LocalTraceMeasure,
    Positivity, UnitaryDefects,
};
use crate::space::{ComparisonBounds, Exhaustion, SiteSet, SpaceKind, SpaceModel, SpaceSpec};

const MODULE: &str = "trace";

/// Surrogate for the generalized limit `Lim_ω`.
#[derive(Clone, Debug, PartialEq)]
pub enum LimitMode {
    /// Mean of the tail.
    Cesaro,
    /// Mean over the listed sequence indices.
    Subsequence(Vec<usize>),
    /// `[liminf, limsup]` of the tail; the value is the midpoint.
    Envelope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitProcedure {
    pub mode: LimitMode,
    /// First sequence index included in the tail.
    pub tail_start: usize,
    /// Order `p` of the subtracted expansion `Σ_{j<=p} c_j / n^j` (0: none).
    pub deflate: usize,
    /// Envelope width above which no scalar is reported (relative to
    /// `max(1, |centre|)`).
    pub tolerance: f64,
}

impl Default for LimitProcedure {
    fn default() -> Self {
        LimitProcedure { mode: LimitMode::Cesaro, tail_start: 0, deflate: 0, tolerance: 1e-2 }
    }
}

impl LimitProcedure {
    pub fn cesaro() -> Self {
        Self::default()
    }

    pub fn envelope() -> Self {
        LimitProcedure { mode: LimitMode::Envelope, ..Self::default() }
    }

    pub fn subsequence(indices: Vec<usize>) -> Self {
        LimitProcedure { mode: LimitMode::Subsequence(indices), ..Self::default() }
    }

    pub fn with_tail(mut self, start: usize) -> Self {
        self.tail_start = start;
        self
    }

    pub fn with_deflation(mut self, order: usize) -> Self {
        self.deflate = order;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    /// Folds `mu_n / vol_n` sampled at `scales`.
    pub fn evaluate(&self, scales: &[f64], mu: &[f64], vol: &[f64]) -> Result<LimitOutcome> {
        let n = scales.len();
        if n == 0 || mu.len() != n || vol.len() != n {
            return Err(Error::invalid(MODULE, "limit needs equally long, non-empty scale/mu/vol samples"));
        }
        let ratios: Vec<f64> = mu.iter().zip(vol).map(|(m, v)| m / v).collect();
        let start = if self.tail_start < n { self.tail_start } else { n / 2 };
        let tail: Vec<usize> = (start..n).collect();

        // bounded numerator over unbounded volumes: an exact infinitesimal
        let last = mu[n - 1];
        let flat = tail.len() >= 2
            && tail.iter().all(|&i| (mu[i] - last).abs() <= 1e-12 * last.abs().max(1e-300))
            && tail.windows(2).all(|w| vol[w[1]] > vol[w[0]]);
        if flat || tail.iter().all(|&i| mu[i] == 0.0) {
            return Ok(LimitOutcome {
                value: Some(0.0),
                envelope: (0.0, 0.0),
                uncertainty: 0.0,
                infinitesimal: true,
                omega_dependent: false,
                deflated: vec![0.0; n],
            });
        }

        let deflated = if self.deflate > 0 && tail.len() >= self.deflate + 2 {
            deflate(scales, &ratios, &tail, self.deflate)?
        } else {
            ratios.clone()
        };
        let tail_vals: Vec<f64> = tail.iter().map(|&i| deflated[i]).collect();
        let lo = tail_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = tail_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let centre = match &self.mode {
            LimitMode::Cesaro => tail_vals.iter().sum::<f64>() / tail_vals.len() as f64,
            LimitMode::Envelope => 0.5 * (lo + hi),
            LimitMode::Subsequence(idx) => {
                if idx.is_empty() || idx.iter().any(|&i| i >= n) {
                    return Err(Error::invalid(MODULE, "subsequence indices out of range"));
                }
                idx.iter().map(|&i| deflated[i]).sum::<f64>() / idx.len() as f64
            }
        };
        let (lo, hi) = (lo.min(centre), hi.max(centre));
        let omega_dependent = hi - lo > self.tolerance * centre.abs().max(1.0);
        let mut uncertainty = hi - lo;
        if self.deflate > 0 && tail.len() >= self.deflate + 2 {
            let lower = LimitProcedure { deflate: self.deflate - 1, tolerance: f64::INFINITY, ..self.clone() };
            if let Some(v) = lower.evaluate(scales, mu, vol)?.value {
                uncertainty += (v - centre).abs();
            }
        }
        Ok(LimitOutcome {
            value: if omega_dependent { None } else { Some(centre) },
            envelope: (lo, hi),
            uncertainty,
            infinitesimal: false,
            omega_dependent,
            deflated,
        })
    }
}

/// Least-squares fit of `a_n = L + Σ_{j=1}^p c_j (s_0/s_n)^j` on the tail;
/// returns `a_n - Σ c_j (s_0/s_n)^j` for every `n`.
fn deflate(scales: &[f64], ratios: &[f64], tail: &[usize], order: usize) -> Result<Vec<f64>> {
    let s0 = scales[tail[0]];
    let rows = tail.len();
    let cols = order + 1;
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut b = DVector::<f64>::zeros(rows);
    for (r, &i) in tail.iter().enumerate() {
        let x = s0 / scales[i];
        for j in 0..cols {
            a[(r, j)] = x.powi(j as i32);
        }
        b[r] = ratios[i];
    }
    let svd = a.svd(true, true);
    let coef = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::numerical(MODULE, format!("deflation fit failed: {e}")))?;
    Ok(scales
        .iter()
        .zip(ratios)
        .map(|(s, r)| {
            let x = s0 / s;
            r - (1..cols).map(|j| coef[j] * x.powi(j as i32)).sum::<f64>()
        })
        .collect())
}

/// Folded limit of a ratio sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitOutcome {
    pub value: Option<f64>,
    pub envelope: (f64, f64),
    /// Envelope width plus the shift caused by the last deflation order.
    pub uncertainty: f64,
    /// The sequence was recognised as `bounded / unbounded`.
    pub infinitesimal: bool,
    pub omega_dependent: bool,
    pub deflated: Vec<f64>,
}

/// One term `μ(K_n(r1)) / vol(K_n(r2))` of a ratio sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioSample {
    pub scale: f64,
    pub mu: f64,
    pub vol: f64,
    pub ratio: f64,
}

/// Value of a functional with its envelope and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValue {
    /// `None` when the envelope is too wide to report a scalar;
    /// `+∞` when the operator is not a cone member.
    pub value: Option<f64>,
    pub envelope: (f64, f64),
    pub uncertainty: f64,
    pub cone_member: bool,
    pub omega_dependent: bool,
    pub infinitesimal: bool,
    pub diagnostics: Vec<RatioSample>,
}

impl TraceValue {
    fn from_outcome(out: LimitOutcome, cone_member: bool, diagnostics: Vec<RatioSample>) -> Self {
        if !cone_member {
            return TraceValue {
                value: Some(f64::INFINITY),
                envelope: (f64::INFINITY, f64::INFINITY),
                uncertainty: 0.0,
                cone_member,
                omega_dependent: false,
                infinitesimal: false,
                diagnostics,
            };
        }
        TraceValue {
            value: out.value,
            envelope: out.envelope,
            uncertainty: out.uncertainty,
            cone_member,
            omega_dependent: out.omega_dependent,
            infinitesimal: out.infinitesimal,
            diagnostics,
        }
    }

    /// The scalar value, or an error naming the reason it is withheld.
    pub fn scalar(&self) -> Result<f64> {
        self.value.ok_or_else(|| Error::numerical(MODULE, "envelope too wide: value depends on the generalized limit"))
    }
}

/// `μ(K_n(r1)) / vol(K_n(r2))` for every exhaustion set (signed penumbrae).
pub fn ratio_sequence(
    measure: &LocalTraceMeasure,
    space: &SpaceModel,
    exhaustion: &Exhaustion,
    r1: f64,
    r2: f64,
) -> Result<Vec<RatioSample>> {
    exhaustion
        .scales()
        .par_iter()
        .zip(exhaustion.sets().par_iter())
        .map(|(&scale, k)| {
            let num = if r1 == 0.0 { k.clone() } else { space.penumbra(k, r1)? };
            let den = if r2 == 0.0 { k.clone() } else { space.penumbra(k, r2)? };
            let mu = measure.measure(&num);
            let vol = space.volume(&den);
            if vol <= 0.0 {
                return Err(Error::domain(MODULE, format!("empty denominator set at scale {scale}")));
            }
            Ok(RatioSample { scale, mu, vol, ratio: mu / vol })
        })
        .collect()
}

/// Vanishing-ratio sequence for one probe `(r1, r2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDiagnostics {
    pub r1: f64,
    pub r2: f64,
    /// `(scale, μ(K_n(r1) \ K_n(-r2)) / vol(K_n))`.
    pub ratios: Vec<(f64, f64)>,
    pub verdict: TrendVerdict,
}

/// Cone `J_0+` diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeDiagnostics {
    pub positivity: Option<Positivity>,
    /// `sup_n μ(K_n)/vol(K_n)`.
    pub bound: f64,
    pub probes: Vec<ProbeDiagnostics>,
    pub member: bool,
}

/// Membership test for the cone: positivity, bounded ratio, vanishing
/// boundary ratios for each probe (declining `C/sqrt(n)` schedule).
pub fn cone_membership(op: &KernelOperator, exhaustion: &Exhaustion, probes: &[(f64, f64)]) -> Result<ConeDiagnostics> {
    let measure = op.local_trace_measure();
    cone_membership_with(op, &measure, exhaustion, probes)
}

fn cone_membership_with(
    op: &KernelOperator,
    measure: &LocalTraceMeasure,
    exhaustion: &Exhaustion,
    probes: &[(f64, f64)],
) -> Result<ConeDiagnostics> {
    let space = op.space();
    let positivity = certify_positive(op);
    let base = ratio_sequence(measure, space, exhaustion, 0.0, 0.0)?;
    let bound = base.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let mut diag = Vec::with_capacity(probes.len());
    for &(r1, r2) in probes {
        if r1 < 0.0 || r2 < 0.0 {
            return Err(Error::invalid(MODULE, "cone probes need r1, r2 >= 0"));
        }
        let ratios: Vec<(f64, f64)> = exhaustion
            .scales()
            .par_iter()
            .zip(exhaustion.sets().par_iter())
            .map(|(&scale, k)| {
                let outer = space.pen_plus(k, r1)?;
                let inner = space.pen_minus(k, r2)?;
                let shell = outer.difference(&inner);
                Ok((scale, measure.measure(&shell) / space.volume(k)))
            })
            .collect::<Result<_>>()?;
        let scales: Vec<f64> = ratios.iter().map(|p| p.0).collect();
        let values: Vec<f64> = ratios.iter().map(|p| p.1).collect();
        let verdict = vanishing_trend(&scales, &values);
        diag.push(ProbeDiagnostics { r1, r2, ratios, verdict });
    }
    let member = positivity.is_some() && bound.is_finite() && diag.iter().all(|p| p.verdict.pass);
    Ok(ConeDiagnostics { positivity, bound, probes: diag, member })
}

/// `φ(A) = Lim μ_A(K_n)/vol(K_n)`, `+∞` for non-members of the cone.
pub fn roe_functional(
    op: &KernelOperator,
    exhaustion: &Exhaustion,
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<TraceValue> {
    let measure = op.local_trace_measure();
    let cone = cone_membership_with(op, &measure, exhaustion, probes)?;
    shifted_with(op, &measure, exhaustion, 0.0, 0.0, limit, &cone)
}

/// `Lim μ_A(K_n(r1))/vol(K_n(r2))`; equal to `φ(A)` on the cone.
pub fn shifted_functional(
    op: &KernelOperator,
    exhaustion: &Exhaustion,
    r1: f64,
    r2: f64,
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<TraceValue> {
    let measure = op.local_trace_measure();
    let cone = cone_membership_with(op, &measure, exhaustion, probes)?;
    shifted_with(op, &measure, exhaustion, r1, r2, limit, &cone)
}

/// Shifted functional reusing a measure and cone verdict computed once.
pub fn shifted_functional_with(
    op: &KernelOperator,
    measure: &LocalTraceMeasure,
    exhaustion: &Exhaustion,
    r1: f64,
    r2: f64,
    limit: &LimitProcedure,
    cone: &ConeDiagnostics,
) -> Result<TraceValue> {
    shifted_with(op, measure, exhaustion, r1, r2, limit, cone)
}

fn shifted_with(
    op: &KernelOperator,
    measure: &LocalTraceMeasure,
    exhaustion: &Exhaustion,
    r1: f64,
    r2: f64,
    limit: &LimitProcedure,
    cone: &ConeDiagnostics,
) -> Result<TraceValue> {
    let samples = ratio_sequence(measure, op.space(), exhaustion, r1, r2)?;
    let scales: Vec<f64> = samples.iter().map(|s| s.scale).collect();
    let mu: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let vol: Vec<f64> = samples.iter().map(|s| s.vol).collect();
    let out = limit.evaluate(&scales, &mu, &vol)?;
    Ok(TraceValue::from_outcome(out, cone.member, samples))
}

/// Shifted functionals for every pair `(r1, r2)` of `radii`; each penumbra
/// `K_n(r)` is built once per scale.
pub fn shifted_grid(
    op: &KernelOperator,
    exhaustion: &Exhaustion,
    radii: &[f64],
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<Vec<(f64, f64, TraceValue)>> {
    let measure = op.local_trace_measure();
    let cone = cone_membership_with(op, &measure, exhaustion, probes)?;
    let space = op.space();
    // per scale: (μ(K_n(r)), vol(K_n(r))) for each r
    let table: Vec<Vec<(f64, f64)>> = exhaustion
        .sets()
        .par_iter()
        .map(|k| {
            radii
                .iter()
                .map(|&r| {
                    let s = if r == 0.0 { k.clone() } else { space.penumbra(k, r)? };
                    Ok((measure.measure(&s), space.volume(&s)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let scales = exhaustion.scales();
    let mut out = Vec::with_capacity(radii.len() * radii.len());
    for (i, &r1) in radii.iter().enumerate() {
        for (j, &r2) in radii.iter().enumerate() {
            let samples: Vec<RatioSample> = scales
                .iter()
                .zip(&table)
                .map(|(&scale, row)| {
                    let (mu, vol) = (row[i].0, row[j].1);
                    RatioSample { scale, mu, vol, ratio: mu / vol }
                })
                .collect();
            if samples.iter().any(|s| s.vol <= 0.0) {
                return Err(Error::domain(MODULE, format!("empty denominator set for r2 = {r2}")));
            }
            let mu: Vec<f64> = samples.iter().map(|s| s.mu).collect();
            let vol: Vec<f64> = samples.iter().map(|s| s.vol).collect();
            let outcome = limit.evaluate(scales, &mu, &vol)?;
            out.push((r1, r2, TraceValue::from_outcome(outcome, cone.member, samples)));
        }
    }
    Ok(out)
}

/// Diagonal average `Lim (1/vol K_n) Σ_{x∈K_n} tr M(x,x)` without the cone
/// requirement (self-adjoint operators that need not be positive).
pub fn diagonal_average(op: &KernelOperator, exhaustion: &Exhaustion, limit: &LimitProcedure) -> Result<TraceValue> {
    let measure = op.local_trace_measure();
    let samples = ratio_sequence(&measure, op.space(), exhaustion, 0.0, 0.0)?;
    diagonal_average_of(samples, limit)
}

fn diagonal_average_of(samples: Vec<RatioSample>, limit: &LimitProcedure) -> Result<TraceValue> {
    let scales: Vec<f64> = samples.iter().map(|s| s.scale).collect();
    let mu: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let vol: Vec<f64> = samples.iter().map(|s| s.vol).collect();
    let out = limit.evaluate(&scales, &mu, &vol)?;
    Ok(TraceValue::from_outcome(out, true, samples))
}

/// Outcome of conjugating `A` by `U`.
#[derive(Clone, Debug)]
pub struct ConjugationReport {
    pub phi: f64,
    pub phi_conjugated: f64,
    pub ratio: f64,
    pub conjugate_member: bool,
    pub defects: UnitaryDefects,
    /// Schur-certified `||U||` upper bound.
    pub norm_bound: f64,
    /// `φ(UAU*) <= φ(A)` (checked when `||U|| <= 1`).
    pub contraction: Option<bool>,
    /// `[1 - 2δ, 1 + 2δ]` with `δ` the measured defect.
    pub band: (f64, f64),
    pub in_band: bool,
}

/// `φ(A)`, `φ(UAU*)` and the invariance checks for a positive cone member `A`.
pub fn conjugation_suite(
    a: &KernelOperator,
    u: &KernelOperator,
    exhaustion: &Exhaustion,
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<ConjugationReport> {
    let phi = roe_functional(a, exhaustion, limit, probes)?;
    if !phi.cone_member {
        return Err(Error::invalid(MODULE, "conjugation suite needs a positive cone member"));
    }
    let conj = u.compose(a)?.compose(&u.adjoint())?.mark_positive("conjugate of a positive operator");
    let phi_c = roe_functional(&conj, exhaustion, limit, probes)?;
    let slack = phi.uncertainty + phi_c.uncertainty;
    let (phi, phi_conjugated) = (phi.scalar()?, phi_c.scalar()?);
    let (_, defects) = is_delta_unitary(u, 1.0)?;
    let norm_bound = schur_bound_general(u);
    let delta = defects.max();
    let ratio = phi_conjugated / phi;
    let band = (1.0 - 2.0 * delta, 1.0 + 2.0 * delta);
    let slack = slack + 1e-12 * phi.abs().max(1e-300);
    Ok(ConjugationReport {
        phi,
        phi_conjugated,
        ratio,
        conjugate_member: phi_c.cone_member,
        defects,
        norm_bound,
        contraction: (norm_bound <= 1.0 + 1e-12).then_some(phi_conjugated <= phi + slack),
        band,
        in_band: ratio >= band.0 - slack / phi.abs().max(1e-300) && ratio <= band.1 + slack / phi.abs().max(1e-300),
    })
}

/// The averaging operator `B_δ` with kernel `(β1/β2) χ_{δ(x,y)<δ} / V(x,δ)`.
#[derive(Clone, Debug)]
pub struct MollifierFamily {
    pub delta: f64,
    pub operator: KernelOperator,
    /// `β1(δ)/β2(δ)`; 1 on homogeneous models.
    pub beta_ratio: f64,
    /// Sites in `B(x, δ)` (open ball) on the infinite model.
    pub ball_sites: usize,
    /// Schur bound of `B_δ` (at most 1).
    pub norm_bound: f64,
}

/// Builds `B_δ` on `space` (fiber copied from the space).
pub fn mollifier(space: &Arc<SpaceModel>, delta: f64) -> Result<MollifierFamily> {
    mollifier_with_fiber(space, space.fiber(), delta)
}

pub fn mollifier_with_fiber(space: &Arc<SpaceModel>, fiber: usize, delta: f64) -> Result<MollifierFamily> {
    if !(delta > 0.0) {
        return Err(Error::invalid(MODULE, format!("mollifier radius must be > 0, got {delta}")));
    }
    let h = space.step();
    if space.kind() == SpaceKind::Strip && delta < 4.0 * h - 1e-12 {
        return Err(Error::invalid(
            MODULE,
            format!("mollifier radius {delta} is below the mesh resolution 4h = {}", 4.0 * h),
        ));
    }
    // open ball: sites at distance < δ (strictly)
    let steps = ((delta / h) - 1e-9).ceil() as i64 - 1;
    let steps = steps.max(0);
    let op = if space.is_grid() {
        let dim = space.dim();
        let mut offsets = vec![vec![]];
        for _ in 0..dim {
            offsets = offsets
                .into_iter()
                .flat_map(|o: Vec<i64>| {
                    (-steps..=steps).map(move |c| {
                        let mut p = o.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        let count = offsets.len();
        let value = Complex64::new(1.0 / count as f64, 0.0);
        let mut id = vec![Complex64::new(0.0, 0.0); fiber * fiber];
        for i in 0..fiber {
            id[i * fiber + i] = value;
        }
        KernelOperator::from_stencil(space.clone(), fiber, offsets.into_iter().map(|o| (o, id.clone())).collect())?
    } else {
        let q = space.infinite_degree();
        let count = 1 + (0..steps).map(|j| q * (q - 1).pow(j as u32)).sum::<usize>();
        let value = Complex64::new(1.0 / count as f64, 0.0);
        let reach = steps as f64 * h;
        let sp = space.clone();
        KernelOperator::from_fn(space.clone(), fiber, reach, move |x, y| {
            (sp.distance(x, y) <= reach + 1e-12).then(|| {
                let mut b = vec![Complex64::new(0.0, 0.0); fiber * fiber];
                for i in 0..fiber {
                    b[i * fiber + i] = value;
                }
                b
            })
        })?
    };
    let ball_sites = match &op {
        o if o.is_stencil() => o.stored_blocks(),
        _ => 0,
    };
    let norm_bound = schur_bound(&op)?;
    if norm_bound > 1.0 + 1e-12 {
        return Err(Error::numerical(MODULE, format!("mollifier norm bound {norm_bound} exceeds 1")));
    }
    let op = op.with_propagation(steps as f64 * h);
    Ok(MollifierFamily { delta, operator: op, beta_ratio: 1.0, ball_sites, norm_bound })
}

/// `ψ_δ(A) = φ(B_δ A B_δ*)`.
pub fn mollified_functional(
    a: &KernelOperator,
    delta: f64,
    exhaustion: &Exhaustion,
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<TraceValue> {
    let b = mollifier_with_fiber(a.space(), a.fiber(), delta)?;
    let mut conj = b.operator.compose(a)?.compose(&b.operator.adjoint())?;
    if certify_positive(a).is_some() {
        conj = conj.mark_positive("conjugate of a positive operator");
    }
    roe_functional(&conj, exhaustion, limit, probes)
}

/// Default δ-schedule: `{0.5}` on lattices and trees (sub-unit balls are
/// points), `{0.4, 0.2, 0.1, 0.05}` on the strip restricted to `δ >= 4h`.
pub fn default_schedule(space: &SpaceModel) -> Vec<f64> {
    match space.kind() {
        SpaceKind::Strip => {
            [0.4, 0.2, 0.1, 0.05].into_iter().filter(|d| *d >= 4.0 * space.step() - 1e-12).collect()
        }
        _ => vec![0.5],
    }
}

/// `sup_δ ψ_δ(A)` over a schedule, with `φ(A)` and the gap.
#[derive(Clone, Debug)]
pub struct RegularizedTrace {
    pub value: TraceValue,
    pub per_delta: Vec<(f64, Option<f64>)>,
    pub phi: TraceValue,
    /// `φ(A) - sup ψ_δ(A)` when both are scalars.
    pub gap: Option<f64>,
    /// Values nondecreasing as δ decreases along the schedule.
    pub monotone: bool,
}

pub fn regularized_trace(
    a: &KernelOperator,
    schedule: &[f64],
    exhaustion: &Exhaustion,
    limit: &LimitProcedure,
    probes: &[(f64, f64)],
) -> Result<RegularizedTrace> {
    if schedule.is_empty() {
        return Err(Error::invalid(MODULE, "empty δ-schedule"));
    }
    let mut sched = schedule.to_vec();
    sched.sort_by(|x, y| y.partial_cmp(x).expect("finite radii"));
    let phi = roe_functional(a, exhaustion, limit, probes)?;
    let mut best: Option<TraceValue> = None;
    let mut per_delta = Vec::with_capacity(sched.len());
    for &d in &sched {
        let psi = mollified_functional(a, d, exhaustion, limit, probes)?;
        per_delta.push((d, psi.value));
        let better = match (&best, psi.value) {
            (None, _) => true,
            (Some(b), Some(v)) => b.value.is_none_or(|bv| v > bv),
            _ => false,
        };
        if better {
            best = Some(psi);
        }
    }
    let value = best.expect("non-empty schedule");
    let monotone = per_delta.windows(2).all(|w| match (w[0].1, w[1].1) {
        (Some(x), Some(y)) => y >= x - 1e-12 * x.abs().max(1.0),
        _ => false,
    });
    let gap = match (phi.value, value.value) {
        (Some(p), Some(v)) if p.is_finite() && v.is_finite() => Some(p - v),
        _ => None,
    };
    Ok(RegularizedTrace { value, per_delta, phi, gap, monotone })
}

/// Annulus kernels of the non-closedness counterexample: radii
/// `r_k = 4^{-k}`, annuli `k <= |x| <= k + 1`, `k >= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnulusKernel {
    /// Number of annuli (`None`: all of them).
    pub stages: Option<usize>,
}

impl AnnulusKernel {
    pub fn radius(k: usize) -> f64 {
        4f64.powi(-(k as i32))
    }

    /// Characteristic function of `Y_n` at `(x1, x2)`.
    pub fn value(&self, x1: f64, x2: f64) -> f64 {
        let k1 = x1.abs().floor() as usize;
        let k2 = x2.abs().floor() as usize;
        let in_stage = |k: usize, x: f64| k >= 1 && x.abs() >= k as f64 && x.abs() <= (k + 1) as f64;
        let check = |k: usize| {
            in_stage(k, x1) && in_stage(k, x2) && (x1 - x2).abs() <= Self::radius(k) && self.stages.is_none_or(|n| k <= n)
        };
        let candidates = [k1, k1.saturating_sub(1), k2, k2.saturating_sub(1)];
        if candidates.iter().any(|&k| check(k)) {
            1.0
        } else {
            0.0
        }
    }
}

/// `∫_{-h}^{s} (h - |u|) du`, clamped to `[0, h^2]`.
fn triangle_cdf(s: f64, h: f64) -> f64 {
    if s <= -h {
        0.0
    } else if s <= 0.0 {
        0.5 * (s + h) * (s + h)
    } else if s < h {
        h * h - 0.5 * (h - s) * (h - s)
    } else {
        h * h
    }
}

/// One annulus of the counterexample on its own mesh.
#[derive(Clone, Debug)]
pub struct StageOperator {
    pub stage: usize,
    pub radius: f64,
    pub mesh: f64,
    /// Galerkin matrix `(1/h) ∫∫_{cell_i × cell_j} χ_{|x-y| <= r}` on the
    /// unit annulus (cells `0..1/h` of a strip centred at 0).
    pub operator: KernelOperator,
    pub annulus: SiteSet,
}

/// Builds stage `k` with mesh `r_k / mesh_ratio` (`mesh_ratio >= 4`).
pub fn stage_operator(k: usize, mesh_ratio: f64) -> Result<StageOperator> {
    if k == 0 {
        return Err(Error::invalid(MODULE, "annuli start at k = 1"));
    }
    if !(mesh_ratio >= 4.0) {
        return Err(Error::invalid(MODULE, format!("mesh must satisfy h_k <= r_k/4 (ratio {mesh_ratio} < 4)")));
    }
    let r = AnnulusKernel::radius(k);
    let cells_per_unit = (mesh_ratio / r).round();
    if (cells_per_unit - mesh_ratio / r).abs() > 1e-9 * cells_per_unit {
        return Err(Error::invalid(MODULE, "mesh must divide the unit annulus"));
    }
    let h = 1.0 / cells_per_unit;
    let space = Arc::new(SpaceModel::new(SpaceSpec::strip(2.0, h))?);
    let n = cells_per_unit as i64;
    let c = space.center();
    let band = (r / h).ceil() as i64 + 1;
    let mut entries = Vec::new();
    for i in 0..n {
        for j in (i - band).max(0)..=(i + band).min(n - 1) {
            let d = (i - j) as f64 * h;
            let area = triangle_cdf(r - d, h) - triangle_cdf(-r - d, h);
            if area > 0.0 {
                entries.push((c + i as usize, c + j as usize, vec![Complex64::new(area / h, 0.0)]));
            }
        }
    }
    let operator = KernelOperator::from_entries(space.clone(), 1, entries)?;
    let annulus: SiteSet = (0..n as usize).map(|i| c + i).collect();
    Ok(StageOperator { stage: k, radius: r, mesh: h, operator, annulus })
}

/// Per-stage measurements of the counterexample.
#[derive(Clone, Debug, PartialEq)]
pub struct StageBound {
    pub stage: usize,
    pub radius: f64,
    pub mesh: f64,
    /// Schur bound of the discretized annulus operator.
    pub schur: f64,
    /// `β2(r_k)`.
    pub beta2: f64,
    /// Mean of `M(x,x)/w` over the annulus (the kernel on the diagonal).
    pub diagonal_density: f64,
}

#[derive(Clone, Debug)]
pub struct CounterexampleReport {
    pub n: usize,
    pub stages: Vec<StageBound>,
    /// Measured stage Schur bounds plus `Σ β2(r_k)` beyond the measured stages.
    pub tail_measured: f64,
    /// `Σ_{k>n} β2(r_k)`.
    pub tail_beta: f64,
    /// Diagonal averages of `T_1, ..., T_n`.
    pub phi_finite: Vec<TraceValue>,
    /// Diagonal average of `T_∞`.
    pub phi_infinite: TraceValue,
}

/// Options for [`counterexample_suite`].
#[derive(Clone, Debug)]
pub struct CounterexampleOptions {
    pub mesh_ratio: f64,
    /// Stages `n+1 ..= n+measured` are discretized and measured.
    pub measured_stages: usize,
    /// Exhaustion `K_L = [-L, L]` for `L` in this list.
    pub lengths: Vec<f64>,
    /// Mesh of the diagonal quadrature.
    pub quadrature_mesh: f64,
    pub limit: LimitProcedure,
}

impl Default for CounterexampleOptions {
    fn default() -> Self {
        CounterexampleOptions {
            mesh_ratio: 4.0,
            measured_stages: 3,
            lengths: (3..=10).map(|j| 2f64.powi(j)).collect(),
            quadrature_mesh: 1.0 / 64.0,
            limit: LimitProcedure::cesaro().with_tail(3).with_deflation(2),
        }
    }
}

/// Non-closedness of the kernel of `φ`: `φ(T_n) = 0` for finite `n`,
/// `||T_∞ - T_n|| <= Σ_{k>n} β2(r_k)`, `φ(T_∞) = 1`.
pub fn counterexample_suite(n: usize, opts: &CounterexampleOptions) -> Result<CounterexampleReport> {
    if n == 0 {
        return Err(Error::invalid(MODULE, "counterexample needs n >= 1"));
    }
    let bounds = ComparisonBounds::euclidean(1);
    let measured_last = n + opts.measured_stages;
    let stage_ids: Vec<usize> = (1..=measured_last).collect();
    let stages: Vec<StageBound> = stage_ids
        .par_iter()
        .map(|&k| {
            let st = stage_operator(k, opts.mesh_ratio)?;
            let schur = schur_bound(&st.operator)?;
            let meas = st.operator.local_trace_measure();
            let w = st.operator.space().volume_weight();
            let diagonal_density = meas.measure(&st.annulus) / (st.annulus.len() as f64 * w);
            Ok(StageBound { stage: k, radius: st.radius, mesh: st.mesh, schur, beta2: bounds.beta2(st.radius)?, diagonal_density })
        })
        .collect::<Result<_>>()?;
    let mut tail_beta = 0.0;
    let mut tail_rest = 0.0;
    let mut k = n + 1;
    loop {
        let b = bounds.beta2(AnnulusKernel::radius(k))?;
        tail_beta += b;
        if k > measured_last {
            tail_rest += b;
        }
        if b < 1e-18 * tail_beta {
            break;
        }
        k += 1;
    }
    let tail_measured = stages.iter().filter(|s| s.stage > n).map(|s| s.schur).sum::<f64>() + tail_rest;

    // diagonal averages from the kernel diagonal on K_L = [-L, L]
    let h = opts.quadrature_mesh;
    let diag_average = |kernel: AnnulusKernel| -> Result<TraceValue> {
        let samples: Vec<RatioSample> = opts
            .lengths
            .iter()
            .map(|&l| {
                let cells = (2.0 * l / h).round() as usize;
                let mu: f64 = (0..cells)
                    .map(|i| {
                        let x = -l + (i as f64 + 0.5) * h;
                        kernel.value(x, x) * h
                    })
                    .sum();
                let vol = cells as f64 * h;
                RatioSample { scale: l, mu, vol, ratio: mu / vol }
            })
            .collect();
        diagonal_average_of(samples, &opts.limit)
    };
    let phi_finite = (1..=n).map(|m| diag_average(AnnulusKernel { stages: Some(m) })).collect::<Result<_>>()?;
    let phi_infinite = diag_average(AnnulusKernel { stages: None })?;
    Ok(CounterexampleReport { n, stages, tail_measured, tail_beta, phi_finite, phi_infinite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::heat_operator;

    fn z1(w: usize) -> Arc<SpaceModel> {
        Arc::new(SpaceModel::new(SpaceSpec::lattice(1, w)).unwrap())
    }

    const BESSEL_T1: f64 = 0.308508322553671;

    #[test]
    fn limit_modes_agree_on_convergent_sequences() {
        let scales: Vec<f64> = (1..=20).map(|k| 10.0 * k as f64).collect();
        let vol: Vec<f64> = scales.iter().map(|n| 2.0 * n + 1.0).collect();
        let mu: Vec<f64> = vol.iter().map(|v| 0.7 * v).collect();
        for lim in [LimitProcedure::cesaro(), LimitProcedure::envelope(), LimitProcedure::subsequence(vec![3, 9, 19])] {
            let o = lim.evaluate(&scales, &mu, &vol).unwrap();
            assert!((o.value.unwrap() - 0.7).abs() < 1e-12);
            assert!(o.envelope.1 - o.envelope.0 < 1e-9);
        }
    }

    #[test]
    fn deflation_removes_boundary_terms() {
        let scales: Vec<f64> = (10..=25).map(|k| 20.0 * k as f64).collect();
        let mu: Vec<f64> = scales.iter().map(|n| 2.0 * n + 5.0).collect();
        let vol: Vec<f64> = scales.iter().map(|n| 2.0 * n + 1.0).collect();
        let o = LimitProcedure::cesaro().with_deflation(3).evaluate(&scales, &mu, &vol).unwrap();
        assert!((o.value.unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn wide_envelope_withholds_value() {
        let scales: Vec<f64> = (1..=12).map(|k| k as f64).collect();
        let vol = [1.0; 12];
        let mu: Vec<f64> = (0..12).map(|k| if k % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let vol: Vec<f64> = vol.iter().enumerate().map(|(i, v)| v + i as f64 * 0.0).collect();
        let o = LimitProcedure::envelope().evaluate(&scales, &mu, &vol).unwrap();
        assert!(o.omega_dependent && o.value.is_none());
    }

    #[test]
    fn phi_of_standard_operators() {
        let s = z1(120);
        let exh = Exhaustion::centered(&s, 20, 100, 10, &[]).unwrap();
        let lim = LimitProcedure::cesaro();
        let id = KernelOperator::identity(s.clone(), 1);
        assert_eq!(roe_functional(&id, &exh, &lim, &[(1.0, 1.0)]).unwrap().value, Some(1.0));
        let lap = KernelOperator::laplacian(s.clone(), 1);
        assert_eq!(roe_functional(&lap, &exh, &lim, &[(1.0, 1.0)]).unwrap().value, Some(2.0));
        let h = heat_operator(&lap, 1.0, 1e-13).unwrap();
        let v = roe_functional(&h, &exh, &lim, &[(1.0, 1.0)]).unwrap();
        assert!(v.cone_member);
        assert!((v.value.unwrap() - BESSEL_T1).abs() < 1e-12);
    }

    #[test]
    fn cone_constants_and_rank_one() {
        let s = z1(120);
        let exh = Exhaustion::centered(&s, 20, 100, 10, &[]).unwrap();
        let id = KernelOperator::identity(s.clone(), 1);
        let c = cone_membership(&id, &exh, &[(1.0, 1.0)]).unwrap();
        assert_eq!(c.bound, 1.0);
        assert!(c.member);
        let (sc, v) = c.probes[0].ratios[0];
        assert!((v - 4.0 / (2.0 * sc + 1.0)).abs() < 1e-15);
        let p = KernelOperator::diagonal(
            s.clone(),
            1,
            &(0..s.len()).map(|x| if x == s.center() { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        )
        .unwrap();
        let v = roe_functional(&p, &exh, &LimitProcedure::cesaro(), &[(1.0, 1.0)]).unwrap();
        assert!(v.cone_member && v.infinitesimal);
        assert_eq!(v.value, Some(0.0));
    }

    #[test]
    fn non_positive_operators_get_the_sentinel() {
        let s = z1(60);
        let exh = Exhaustion::centered(&s, 10, 40, 10, &[]).unwrap();
        let neg = KernelOperator::identity(s, 1).scaled(Complex64::new(-1.0, 0.0));
        let v = roe_functional(&neg, &exh, &LimitProcedure::cesaro(), &[]).unwrap();
        assert!(!v.cone_member);
        assert_eq!(v.value, Some(f64::INFINITY));
    }

    #[test]
    fn shifted_identity() {
        let s = z1(520);
        let exh = Exhaustion::centered(&s, 260, 500, 20, &[]).unwrap();
        let lim = LimitProcedure::cesaro().with_deflation(3);
        let id = KernelOperator::identity(s.clone(), 1);
        let raw = shifted_functional(&id, &exh, 2.0, 0.0, &LimitProcedure::cesaro(), &[]).unwrap();
        let last = raw.diagnostics.last().unwrap();
        assert!((last.ratio - 1005.0 / 1001.0).abs() < 1e-15);
        for (r1, r2) in [(2.0, 0.0), (-2.0, 1.0)] {
            let v = shifted_functional(&id, &exh, r1, r2, &lim, &[(1.0, 1.0)]).unwrap();
            assert!((v.value.unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn periodic_diagonal_is_shift_invariant() {
        let s = z1(80);
        let exh = Exhaustion::centered(&s, 20, 60, 2, &[]).unwrap();
        let vals: Vec<f64> = (0..s.len()).map(|x| if s.coords(x)[0].rem_euclid(2) == 0 { 1.0 } else { 2.0 }).collect();
        let a = KernelOperator::diagonal(s.clone(), 1, &vals).unwrap();
        let u = KernelOperator::shift(s.clone(), 1, 0).unwrap();
        let lim = LimitProcedure::cesaro().with_deflation(3);
        let r = conjugation_suite(&a, &u, &exh, &lim, &[(1.0, 1.0)]).unwrap();
        assert!((r.phi - 1.5).abs() < 1e-5 && (r.phi_conjugated - 1.5).abs() < 1e-5);
        assert_eq!(r.contraction, Some(true));
    }

    #[test]
    fn contraction_by_half_identity() {
        let s = z1(120);
        let exh = Exhaustion::centered(&s, 20, 100, 10, &[]).unwrap();
        let lap = KernelOperator::laplacian(s.clone(), 1);
        let t = heat_operator(&lap, 1.0, 1e-13).unwrap();
        let b = KernelOperator::identity(s.clone(), 1).scaled(Complex64::new(0.5, 0.0));
        let r = conjugation_suite(&t, &b, &exh, &LimitProcedure::cesaro(), &[(1.0, 1.0)]).unwrap();
        assert!((r.phi_conjugated - r.phi / 4.0).abs() < 1e-13);
        assert_eq!(r.contraction, Some(true));
    }

    #[test]
    fn lattice_mollifier_below_unit_scale_is_identity() {
        let s = z1(60);
        let b = mollifier(&s, 0.5).unwrap();
        assert_eq!(b.operator.stored_blocks(), 1);
        let b3 = mollifier(&s, 2.5).unwrap();
        assert_eq!(b3.operator.stored_blocks(), 5);
        assert!((b3.norm_bound - 1.0).abs() < 1e-15);
        let strip = Arc::new(SpaceModel::new(SpaceSpec::strip(4.0, 0.1)).unwrap());
        assert!(mollifier(&strip, 0.2).is_err());
    }

    #[test]
    fn regularized_trace_on_lattice_equals_phi() {
        let s = z1(120);
        let exh = Exhaustion::centered(&s, 20, 100, 10, &[]).unwrap();
        let lap = KernelOperator::laplacian(s.clone(), 1);
        let t = heat_operator(&lap, 1.0, 1e-13).unwrap();
        let r = regularized_trace(&t, &default_schedule(&s), &exh, &LimitProcedure::cesaro(), &[(1.0, 1.0)]).unwrap();
        assert_eq!(r.gap, Some(0.0));
    }

    #[test]
    fn galerkin_stage_has_unit_diagonal_and_row_sum_two_r() {
        let st = stage_operator(2, 4.0).unwrap();
        assert!((schur_bound(&st.operator).unwrap() - 2.0 * st.radius).abs() < 1e-14);
        let c = st.annulus.as_slice()[5];
        assert!((st.operator.block(c, c)[0].re - st.mesh).abs() < 1e-15);
        assert!(stage_operator(2, 2.0).is_err());
    }

    #[test]
    fn annulus_kernel_diagonal() {
        let t = AnnulusKernel { stages: Some(2) };
        assert_eq!(t.value(1.5, 1.5), 1.0);
        assert_eq!(t.value(3.5, 3.5), 0.0);
        assert_eq!(t.value(0.5, 0.5), 0.0);
        assert_eq!(t.value(1.5, 1.8), 0.0);
        assert_eq!(t.value(1.5, 1.7), 1.0);
        assert_eq!(AnnulusKernel { stages: None }.value(-40.2, -40.2), 1.0);
    }
}
