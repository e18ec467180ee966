//! Heat semigroups through Chebyshev polynomial filters.
//!
//! On a spectral interval `[lo, hi]` the heat function expands as
//! `e^{-tλ} = e^{-t lo} e^{-z} (I_0(z) + 2 Σ (-1)^k I_k(z) T_k(x))` with
//! `z = t (hi - lo) / 2` and `x` the affine image of `λ` in `[-1, 1]`.
//! Truncating after degree `m` gives a polynomial `p(Δ)` of propagation
//! `m u_Δ` whose uniform error is the coefficient tail.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fit::linear_fit;
use crate::operator::{
    certify_positive, schur_bound, schur_bound_general, schur_bound_general_on, symbol_norm_bound, KernelOperator,
};
use crate::space::{SiteSet, SpaceModel};

const MODULE: &str = "heat";
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Smallest uniform error a filter may be asked for.
pub const PRECISION_FLOOR: f64 = 1e-15;

/// Largest filter degree the degree search will consider.
pub const MAX_DEGREE: usize = 200_000;

/// `e^{-z} I_k(z)` for `k = 0..=kmax`, by Miller's backward recurrence
/// normalised with `I_0 + 2 Σ I_k = e^z`.
pub fn scaled_bessel_sequence(z: f64, kmax: usize) -> Vec<f64> {
    assert!(z >= 0.0 && z.is_finite());
    let mut out = vec![0.0; kmax + 1];
    if z == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = kmax + 32 + (40.0 * z).sqrt().ceil() as usize + (z.min(1e3) as usize);
    let mut vals = vec![0.0; start + 2];
    vals[start] = 1e-280;
    for k in (1..=start).rev() {
        let next = vals[k + 1] + (2.0 * k as f64 / z) * vals[k];
        vals[k - 1] = next;
        if next > 1e250 {
            for v in vals[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let norm = vals[0] + 2.0 * vals[1..=start].iter().sum::<f64>();
    for k in 0..=kmax {
        out[k] = vals[k] / norm;
    }
    out
}

/// Truncated Chebyshev expansion of `λ ↦ e^{-tλ}` on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialFilter {
    pub t: f64,
    pub lo: f64,
    pub hi: f64,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    /// `sup_{[lo, hi]} |p - e^{-tλ}|` bound: the absolute coefficient tail.
    pub truncation_bound: f64,
}

impl PolynomialFilter {
    /// Filter for the interval `[lo, hi]` with uniform error at most `eps`.
    pub fn new(t: f64, lo: f64, hi: f64, eps: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::invalid(MODULE, format!("time must be finite and >= 0, got {t}")));
        }
        if !(hi >= lo) {
            return Err(Error::invalid(MODULE, format!("empty spectral interval [{lo}, {hi}]")));
        }
        if !(eps >= PRECISION_FLOOR) {
            return Err(Error::Precision { requested: eps, floor: PRECISION_FLOOR });
        }
        let z = 0.5 * t * (hi - lo);
        let pre = (-t * lo).exp();
        if z == 0.0 {
            return Ok(PolynomialFilter { t, lo, hi, degree: 0, coeffs: vec![pre], truncation_bound: 0.0 });
        }
        // I_k(z) is negligible once k^2 / 2z exceeds the precision budget
        let kmax = (((2.0 * z * 50.0).sqrt() + 60.0) as usize).min(MAX_DEGREE);
        let b = scaled_bessel_sequence(z, kmax);
        let coeffs_all: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                pre * if k == 0 { *v } else { 2.0 * sign * v }
            })
            .collect();
        let mut tails = vec![0.0; kmax + 2];
        for k in (0..=kmax).rev() {
            tails[k] = tails[k + 1] + coeffs_all[k].abs();
        }
        let degree = (0..=kmax).find(|&m| tails[m + 1] <= eps).ok_or_else(|| {
            Error::numerical(MODULE, format!("no filter degree <= {kmax} reaches {eps:e} at t = {t}"))
        })?;
        Ok(PolynomialFilter {
            t,
            lo,
            hi,
            degree,
            coeffs: coeffs_all[..=degree].to_vec(),
            truncation_bound: tails[degree + 1],
        })
    }

    /// Scalar evaluation by Clenshaw's recurrence.
    pub fn eval(&self, lambda: f64) -> f64 {
        let x = self.to_unit(lambda);
        let (mut b1, mut b2) = (0.0, 0.0);
        for k in (1..self.coeffs.len()).rev() {
            let b0 = self.coeffs[k] + 2.0 * x * b1 - b2;
            b2 = b1;
            b1 = b0;
        }
        self.coeffs[0] + x * b1 - b2
    }

    fn to_unit(&self, lambda: f64) -> f64 {
        if self.hi == self.lo {
            0.0
        } else {
            (2.0 * lambda - self.hi - self.lo) / (self.hi - self.lo)
        }
    }

    /// `X = (2Δ - (hi + lo)) / (hi - lo)`.
    fn unit_operator(&self, delta: &KernelOperator) -> Result<KernelOperator> {
        let id = KernelOperator::identity(delta.space().clone(), delta.fiber());
        let w = self.hi - self.lo;
        if w == 0.0 {
            return Ok(KernelOperator::zero(delta.space().clone(), delta.fiber()));
        }
        delta.scaled(Complex64::new(2.0 / w, 0.0)).add_scaled(&id, Complex64::new(-(self.hi + self.lo) / w, 0.0))
    }

    /// `p(Δ)` as a kernel operator (Clenshaw in the operator algebra); its
    /// propagation is `degree · u_Δ`.
    pub fn to_operator(&self, delta: &KernelOperator) -> Result<KernelOperator> {
        let space = delta.space().clone();
        let f = delta.fiber();
        let id = KernelOperator::identity(space.clone(), f);
        if self.degree == 0 {
            return Ok(id.scaled(Complex64::new(self.coeffs[0], 0.0)));
        }
        let x = self.unit_operator(delta)?;
        let mut b1 = KernelOperator::zero(space.clone(), f);
        let mut b2 = KernelOperator::zero(space, f);
        for k in (1..self.coeffs.len()).rev() {
            let b0 = x
                .compose(&b1)?
                .scaled(Complex64::new(2.0, 0.0))
                .sub(&b2)?
                .add_scaled(&id, Complex64::new(self.coeffs[k], 0.0))?;
            b2 = b1;
            b1 = b0;
        }
        let out = x.compose(&b1)?.sub(&b2)?.add_scaled(&id, Complex64::new(self.coeffs[0], 0.0))?;
        Ok(out.with_propagation(self.degree as f64 * delta.propagation()))
    }

    /// `p(Δ) v` by Clenshaw on vectors, touching only the growing support of
    /// `v`. Requires `Pen+(supp v, degree · u_Δ)` to stay inside the window.
    pub fn apply(&self, delta: &KernelOperator, v: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut local = LocalApply::new(delta, self.lo, self.hi)?;
        let support: Vec<usize> = (0..delta.space().len())
            .filter(|&s| v[s * delta.fiber()..(s + 1) * delta.fiber()].iter().any(|z| *z != ZERO))
            .collect();
        check_margin(delta, &support, self.degree)?;
        local.seed_support(&support);
        let n = v.len();
        let mut b1 = vec![ZERO; n];
        let mut b2 = vec![ZERO; n];
        let mut tmp = vec![ZERO; n];
        for k in (1..self.coeffs.len()).rev() {
            local.apply_unit(&b1, &mut tmp);
            let active = local.active().to_vec();
            local.for_active(&active, |i| {
                let b0 = self.coeffs[k] * v[i] + 2.0 * tmp[i] - b2[i];
                b2[i] = b1[i];
                b1[i] = b0;
            });
        }
        local.apply_unit(&b1, &mut tmp);
        let active = local.active().to_vec();
        let mut out = vec![ZERO; n];
        local.for_active(&active, |i| out[i] = self.coeffs[0] * v[i] + tmp[i] - b2[i]);
        Ok(out)
    }
}

/// Spectral interval `[lo, hi]` used for `Δ`: `hi` is the Schur bound and
/// `lo = 0` when positivity is certified, `-hi` otherwise.
pub fn spectral_interval(delta: &KernelOperator) -> Result<(f64, f64)> {
    let hi = schur_bound(delta)?;
    let lo = if certify_positive(delta).is_some() { 0.0 } else { -hi };
    Ok((lo, hi))
}

/// Filter for `e^{-tΔ}` with uniform error at most `eps` on the spectral
/// interval of `Δ`.
pub fn heat_filter(delta: &KernelOperator, t: f64, eps: f64) -> Result<PolynomialFilter> {
    let (lo, hi) = spectral_interval(delta)?;
    PolynomialFilter::new(t, lo, hi, eps)
}

fn check_margin(delta: &KernelOperator, sites: &[usize], steps: usize) -> Result<()> {
    let reach = steps as f64 * delta.propagation();
    let space = delta.space();
    for &s in sites {
        if reach >= space.boundary_distance(s) - 1e-9 {
            return Err(Error::escape(
                MODULE,
                format!(
                    "site {} needs margin {reach} but lies {} from the window boundary",
                    space.site_label(s),
                    space.boundary_distance(s)
                ),
            ));
        }
    }
    Ok(())
}

/// Applies `X = a Δ + b` to vectors supported on a tracked, growing site
/// set. `Δ` must be self-adjoint: outputs are scattered through its rows.
struct LocalApply<'a> {
    delta: &'a KernelOperator,
    scale: f64,
    shift: f64,
    fiber: usize,
    mark: Vec<bool>,
    active: Vec<usize>,
}

impl<'a> LocalApply<'a> {
    fn new(delta: &'a KernelOperator, lo: f64, hi: f64) -> Result<Self> {
        if !delta.is_self_adjoint() {
            return Err(Error::NotSelfAdjoint { context: "heat filter".into() });
        }
        let w = hi - lo;
        let (scale, shift) = if w == 0.0 { (0.0, 0.0) } else { (2.0 / w, -(hi + lo) / w) };
        Ok(LocalApply {
            delta,
            scale,
            shift,
            fiber: delta.fiber(),
            mark: vec![false; delta.space().len()],
            active: Vec::new(),
        })
    }

    fn seed_support(&mut self, sites: &[usize]) {
        for &s in sites {
            if !self.mark[s] {
                self.mark[s] = true;
                self.active.push(s);
            }
        }
    }

    fn active(&self) -> &[usize] {
        &self.active
    }

    fn for_active<F: FnMut(usize)>(&self, sites: &[usize], mut f: F) {
        for &s in sites {
            for i in 0..self.fiber {
                f(s * self.fiber + i);
            }
        }
    }

    /// `out = X v` where `v` vanishes off the active set; grows the active set
    /// by the sites reached.
    fn apply_unit(&mut self, v: &[Complex64], out: &mut [Complex64]) {
        let f = self.fiber;
        let before = self.active.len();
        for k in 0..before {
            let s = self.active[k];
            for i in 0..f {
                out[s * f + i] = self.shift * v[s * f + i];
            }
        }
        let mut fresh = Vec::new();
        for k in 0..before {
            let y = self.active[k];
            let vy = &v[y * f..(y + 1) * f];
            if vy.iter().all(|z| *z == ZERO) {
                continue;
            }
            let mark = &mut self.mark;
            let scale = self.scale;
            self.delta.for_each_in_row(y, |x, b| {
                if !mark[x] {
                    mark[x] = true;
                    fresh.push(x);
                    for i in 0..f {
                        out[x * f + i] = ZERO;
                    }
                }
                // M(x, y) = M(y, x)^*
                for i in 0..f {
                    let mut acc = ZERO;
                    for j in 0..f {
                        acc += b[j * f + i].conj() * vy[j];
                    }
                    out[x * f + i] += scale * acc;
                }
            });
        }
        self.active.extend(fresh);
    }
}

/// Diagonal Chebyshev moments `tr <e_x, T_k(X) e_x>` summed over the fiber,
/// averaged over a set of sites (or a single site).
#[derive(Clone, Debug)]
pub struct ChebyshevMoments {
    pub lo: f64,
    pub hi: f64,
    pub moments: Vec<f64>,
    /// Sample standard error per moment (stochastic mode; zero otherwise).
    pub std_error: Vec<f64>,
    pub fiber: usize,
}

impl ChebyshevMoments {
    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    /// `Σ_k c_k μ_k` with the filter's truncation bound scaled by the fiber.
    pub fn heat_trace(&self, filter: &PolynomialFilter) -> Result<(f64, f64)> {
        if filter.degree + 1 > self.moments.len() {
            return Err(Error::invalid(
                MODULE,
                format!("filter degree {} exceeds the {} available moments", filter.degree, self.moments.len()),
            ));
        }
        let v: f64 = filter.coeffs.iter().zip(&self.moments).map(|(c, m)| c * m).sum();
        let noise: f64 = filter.coeffs.iter().zip(&self.std_error).map(|(c, e)| (c * e).powi(2)).sum::<f64>().sqrt();
        Ok((v, filter.truncation_bound * self.fiber as f64 + noise))
    }
}

/// Moments `0..=degree` at one site via the doubling identities
/// `μ_{2k} = 2<v_k, v_k> - μ_0`, `μ_{2k+1} = 2<v_{k+1}, v_k> - μ_1`.
/// Exact when `Pen+(x, ceil(degree/2) u_Δ)` stays inside the window.
pub fn site_moments(delta: &KernelOperator, lo: f64, hi: f64, site: usize, degree: usize) -> Result<Vec<f64>> {
    let half = degree.div_ceil(2);
    check_margin(delta, &[site], half)?;
    let f = delta.fiber();
    let mut total = vec![0.0; degree + 1];
    for i in 0..f {
        let mut start = vec![ZERO; delta.space().len() * f];
        start[site * f + i] = Complex64::new(1.0, 0.0);
        let m = vector_moments(delta, lo, hi, &start, degree)?;
        for (t, v) in total.iter_mut().zip(m) {
            *t += v;
        }
    }
    Ok(total)
}

/// Moments `<v, T_k(X) v>` for `k = 0..=degree`.
fn vector_moments(delta: &KernelOperator, lo: f64, hi: f64, v0: &[Complex64], degree: usize) -> Result<Vec<f64>> {
    let f = delta.fiber();
    let mut local = LocalApply::new(delta, lo, hi)?;
    let support: Vec<usize> =
        (0..delta.space().len()).filter(|&s| v0[s * f..(s + 1) * f].iter().any(|z| *z != ZERO)).collect();
    local.seed_support(&support);
    let dot = |a: &[Complex64], b: &[Complex64], sites: &[usize]| -> f64 {
        let mut s = 0.0;
        for &x in sites {
            for i in 0..f {
                s += (a[x * f + i].conj() * b[x * f + i]).re;
            }
        }
        s
    };
    let mut mu = vec![0.0; degree + 1];
    let mut prev = v0.to_vec();
    let mu0 = dot(&prev, &prev, local.active());
    mu[0] = mu0;
    if degree == 0 {
        return Ok(mu);
    }
    let mut cur = vec![ZERO; v0.len()];
    local.apply_unit(&prev, &mut cur);
    let mu1 = dot(&prev, &cur, local.active());
    mu[1] = mu1;
    // v_0 = prev, v_1 = cur
    let mut k = 1;
    let mut next = vec![ZERO; v0.len()];
    loop {
        // μ_{2k} from v_k, μ_{2k-1} from (v_k, v_{k-1})
        if 2 * k <= degree {
            mu[2 * k] = 2.0 * dot(&cur, &cur, local.active()) - mu0;
        }
        if 2 * k - 1 <= degree && k >= 1 && 2 * k - 1 > 1 {
            mu[2 * k - 1] = 2.0 * dot(&cur, &prev, local.active()) - mu1;
        }
        if 2 * k >= degree {
            break;
        }
        local.apply_unit(&cur, &mut next);
        let active = local.active().to_vec();
        local.for_active(&active, |i| next[i] = 2.0 * next[i] - prev[i]);
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        k += 1;
    }
    Ok(mu)
}

/// How the per-volume moments were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentSource {
    /// One interior site (translation-invariant operators).
    HomogeneousSite,
    /// Exact average over every site of the set.
    SiteAverage,
    /// Hutchinson estimate with seeded Rademacher probes on the set.
    Stochastic { probes: usize, seed: u64 },
}

/// Per-volume diagonal moments over `set` (site weights are uniform).
pub fn moments_over(
    delta: &KernelOperator,
    lo: f64,
    hi: f64,
    set: &SiteSet,
    degree: usize,
    source: MomentSource,
) -> Result<ChebyshevMoments> {
    let f = delta.fiber();
    let fiber = f;
    match source {
        MomentSource::HomogeneousSite => {
            if !delta.is_stencil() {
                return Err(Error::invalid(MODULE, "homogeneous moments need a translation-invariant operator"));
            }
            let m = site_moments(delta, lo, hi, delta.space().center(), degree)?;
            Ok(ChebyshevMoments { lo, hi, std_error: vec![0.0; m.len()], moments: m, fiber })
        }
        MomentSource::SiteAverage => {
            if set.is_empty() {
                return Err(Error::invalid(MODULE, "moments over an empty set"));
            }
            check_margin(delta, set.as_slice(), degree.div_ceil(2))?;
            let per: Vec<Vec<f64>> = {
                use rayon::prelude::*;
                set.as_slice().par_iter().map(|&s| site_moments(delta, lo, hi, s, degree)).collect::<Result<_>>()?
            };
            let n = per.len() as f64;
            let moments = (0..=degree).map(|k| per.iter().map(|m| m[k]).sum::<f64>() / n).collect::<Vec<_>>();
            Ok(ChebyshevMoments { lo, hi, std_error: vec![0.0; moments.len()], moments, fiber })
        }
        MomentSource::Stochastic { probes, seed } => {
            if probes < 2 || set.is_empty() {
                return Err(Error::invalid(MODULE, "stochastic moments need >= 2 probes and a non-empty set"));
            }
            check_margin(delta, set.as_slice(), degree.div_ceil(2))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = set.len() as f64;
            let mut samples: Vec<Vec<f64>> = Vec::with_capacity(probes);
            for _ in 0..probes {
                let mut v = vec![ZERO; delta.space().len() * f];
                for s in set.iter() {
                    for i in 0..f {
                        v[s * f + i] = Complex64::new(if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0);
                    }
                }
                let m = vector_moments(delta, lo, hi, &v, degree)?;
                samples.push(m.into_iter().map(|x| x / n).collect());
            }
            let p = probes as f64;
            let moments: Vec<f64> = (0..=degree).map(|k| samples.iter().map(|m| m[k]).sum::<f64>() / p).collect();
            let std_error = (0..=degree)
                .map(|k| {
                    let var = samples.iter().map(|m| (m[k] - moments[k]).powi(2)).sum::<f64>() / (p - 1.0);
                    (var / p).sqrt()
                })
                .collect();
            Ok(ChebyshevMoments { lo, hi, moments, std_error, fiber })
        }
    }
}

/// Diagonal heat values `H(t, x, x)` at the requested sites, plus optional
/// off-diagonal samples `H(t, x, y)` for `(x, y)` in `pairs`.
#[derive(Clone, Debug)]
pub struct HeatSample {
    pub t: f64,
    pub sites: Vec<usize>,
    /// `tr H(t, x, x)` per requested site.
    pub diagonal: Vec<f64>,
    /// `(x, y, |H(t, x, y)|)` (block norm).
    pub off_diagonal: Vec<(usize, usize, f64)>,
    /// Average of `diagonal`.
    pub theta: f64,
    pub truncation_bound: f64,
}

/// Applies the filter to indicator vectors of the requested sites.
/// Every site needs margin `degree · u_Δ`.
pub fn diagonal_heat(
    delta: &KernelOperator,
    t: f64,
    eps: f64,
    sites: &[usize],
    pairs: &[(usize, usize)],
) -> Result<HeatSample> {
    if sites.is_empty() {
        return Err(Error::invalid(MODULE, "no sites requested"));
    }
    let filter = heat_filter(delta, t, eps)?;
    let f = delta.fiber();
    let n = delta.space().len() * f;
    let mut columns: std::collections::HashMap<usize, Vec<Vec<Complex64>>> = Default::default();
    let mut column = |x: usize| -> Result<Vec<Vec<Complex64>>> {
        if let Some(c) = columns.get(&x) {
            return Ok(c.clone());
        }
        let mut cols = Vec::with_capacity(f);
        for i in 0..f {
            let mut e = vec![ZERO; n];
            e[x * f + i] = Complex64::new(1.0, 0.0);
            cols.push(filter.apply(delta, &e)?);
        }
        columns.insert(x, cols.clone());
        Ok(cols)
    };
    let mut diagonal = Vec::with_capacity(sites.len());
    for &x in sites {
        let cols = column(x)?;
        diagonal.push((0..f).map(|i| cols[i][x * f + i].re).sum());
    }
    let mut off = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        // H(t, y, x) block from the columns at x; symmetric for real Δ
        let cols = column(x)?;
        let block: Vec<Complex64> = (0..f).flat_map(|i| (0..f).map(move |j| (i, j))).map(|(i, j)| cols[j][y * f + i]).collect();
        let norm = if f == 1 {
            block[0].norm()
        } else {
            nalgebra::DMatrix::from_row_slice(f, f, &block).singular_values().max()
        };
        off.push((x, y, norm));
    }
    let theta = diagonal.iter().sum::<f64>() / diagonal.len() as f64;
    Ok(HeatSample {
        t,
        sites: sites.to_vec(),
        diagonal,
        off_diagonal: off,
        theta,
        truncation_bound: filter.truncation_bound * f as f64,
    })
}

/// One heat-trace sample `ϑ(t)` with its error bar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaSample {
    pub t: f64,
    pub theta: f64,
    pub err_bound: f64,
    pub degree: usize,
}

/// Options for [`theta`].
#[derive(Clone, Debug)]
pub struct ThetaOptions {
    pub eps: f64,
    pub source: MomentSource,
    /// Averaging set for non-homogeneous sources; defaults to the centre site.
    pub set: Option<SiteSet>,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        ThetaOptions { eps: 1e-12, source: MomentSource::HomogeneousSite, set: None }
    }
}

/// Per-volume heat trace `ϑ(t) = Lim μ_{e^{-tΔ}}(K_n)/vol(K_n)` on a time
/// grid. Moments are computed once, up to the largest degree the grid needs.
pub fn theta(delta: &KernelOperator, times: &[f64], opts: &ThetaOptions) -> Result<Vec<ThetaSample>> {
    let (lo, hi) = spectral_interval(delta)?;
    let filters = times.iter().map(|&t| PolynomialFilter::new(t, lo, hi, opts.eps)).collect::<Result<Vec<_>>>()?;
    let degree = filters.iter().map(|f| f.degree).max().unwrap_or(0);
    let set = opts.set.clone().unwrap_or_else(|| SiteSet::new(vec![delta.space().center()]));
    let moments = moments_over(delta, lo, hi, &set, degree, opts.source)?;
    // uniform volume weights: per-volume trace equals the per-site average
    filters
        .iter()
        .map(|f| {
            let (v, e) = moments.heat_trace(f)?;
            Ok(ThetaSample { t: f.t, theta: v, err_bound: e, degree: f.degree })
        })
        .collect()
}

/// Geometric grid `t_0 · 2^j` (or any ratio) from `tmin` to `tmax` with
/// `points` samples.
pub fn geometric_grid(tmin: f64, tmax: f64, points: usize) -> Result<Vec<f64>> {
    if !(tmin > 0.0 && tmax >= tmin) || points == 0 {
        return Err(Error::invalid(MODULE, "geometric grid needs 0 < tmin <= tmax and points >= 1"));
    }
    if points == 1 {
        return Ok(vec![tmin]);
    }
    let r = (tmax / tmin).ln() / (points - 1) as f64;
    Ok((0..points).map(|j| if j + 1 == points { tmax } else { tmin * (r * j as f64).exp() }).collect())
}

/// Report of [`gaussian_decay_check`].
#[derive(Clone, Debug)]
pub struct DecayReport {
    pub t: f64,
    /// `(δ(x,y)^2 / t, |H(t,x,y)|)`.
    pub samples: Vec<(f64, f64)>,
    /// Slope of `log |H|` against `δ^2 / t`.
    pub slope: f64,
    pub negative_slope: bool,
    /// `max |H(t,x,y) - H(t,x,x)|` over pairs with `δ(x,y)` at most one step.
    pub near_diagonal_oscillation: f64,
}

/// Fits `log |H(t, x, y)|` against `δ(x, y)^2 / t` over the pairs.
pub fn gaussian_decay_check(delta: &KernelOperator, t: f64, eps: f64, pairs: &[(usize, usize)]) -> Result<DecayReport> {
    let space = delta.space();
    let sites: Vec<usize> = {
        let mut s: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let sample = diagonal_heat(delta, t, eps, &sites, pairs)?;
    let mut samples = Vec::new();
    let mut osc: f64 = 0.0;
    for &(x, y, h) in &sample.off_diagonal {
        let d = space.distance(x, y);
        if h > 0.0 {
            samples.push((d * d / t, h));
        }
        if d <= space.step() + 1e-12 {
            let i = sites.iter().position(|&s| s == x).expect("site present");
            osc = osc.max((h - sample.diagonal[i] / delta.fiber() as f64).abs());
        }
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let slope = linear_fit(&xs, &ys).map(|f| f.slope).unwrap_or(f64::NAN);
    Ok(DecayReport { t, samples, slope, negative_slope: slope < 0.0, near_diagonal_oscillation: osc })
}

/// `||p_{t1}(Δ) p_{t2}(Δ) - p_{t1+t2}(Δ)||`, Schur-certified over the rows
/// where all three operators are exact (the smaller of the Schur and
/// symbol bounds for scalar stencils), against `2 (ε1 + ε2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemigroupReport {
    pub defect: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn semigroup_check(delta: &KernelOperator, t1: f64, t2: f64, eps: f64) -> Result<SemigroupReport> {
    let p1 = heat_filter(delta, t1, eps)?.to_operator(delta)?;
    let p2 = heat_filter(delta, t2, eps)?.to_operator(delta)?;
    let p3 = heat_filter(delta, t1 + t2, eps)?.to_operator(delta)?;
    let diff = p1.compose(&p2)?.sub(&p3)?;
    let margin = diff.exact_margin().max(p1.propagation() + p2.propagation());
    let rows = delta.space().interior(margin);
    let defect = if diff.is_stencil() {
        let schur = schur_bound_general(&diff);
        symbol_norm_bound(&diff).map_or(schur, |s| s.min(schur))
    } else {
        schur_bound_general_on(&diff, &rows)
    };
    let bound = 2.0 * (eps + eps);
    Ok(SemigroupReport { defect, bound, pass: defect <= bound })
}

/// `e^{-tΔ}` as a kernel operator with uniform error `eps`.
pub fn heat_operator(delta: &KernelOperator, t: f64, eps: f64) -> Result<KernelOperator> {
    let op = heat_filter(delta, t, eps)?.to_operator(delta)?;
    Ok(op.mark_positive("non-negative function of a self-adjoint operator"))
}

/// Lattice Laplacian helper used throughout the tests and the CLI.
pub fn lattice_laplacian(space: &Arc<SpaceModel>) -> KernelOperator {
    KernelOperator::laplacian(space.clone(), space.fiber())
}
