//! Spectral density functions `N(λ) = μ([0, λ))`, L²-Betti numbers,
//! Novikov–Shubin exponents, Hodge Laplacians on cubical lattices and the
//! heat-kernel decay check.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fit::{aitken_limit, isotonic_nondecreasing, linear_fit, window_slopes, WindowSlope};
use crate::heat::{moments_over, site_moments, spectral_interval, MomentSource, PolynomialFilter};
use crate::operator::{schur_bound, KernelOperator};
use crate::quadrature::integrate_endpoint_clustered;
use crate::space::{SiteSet, SpaceKind, SpaceModel};

const MODULE: &str = "spectral";
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Hodge Laplacian `Δ_p` on the cubical complex of `Z^d`, `p ∈ {0, 1}`.
/// Edges `(x, x + e_a)` are stored in fiber component `a` of site `x`;
/// `Δ_1` uses fiber `d` (so `d <= 3` keeps faces within the fiber).
pub fn hodge_laplacian(space: &Arc<SpaceModel>, p: usize) -> Result<KernelOperator> {
    if space.kind() != SpaceKind::Lattice {
        return Err(Error::invalid(MODULE, "Hodge Laplacians need a lattice"));
    }
    let d = space.dim();
    match p {
        0 => Ok(KernelOperator::laplacian(space.clone(), 1).mark_positive("Gram operator d* d")),
        1 => {
            if d > 3 {
                return Err(Error::invalid(MODULE, "edge Laplacian supports dimensions 1 to 3"));
            }
            let d0 = coboundary_vertices(space)?;
            let d1 = coboundary_edges(space)?;
            let up = d0.compose(&d0.adjoint())?;
            let down = d1.adjoint().compose(&d1)?;
            Ok(up.add(&down)?.tighten_propagation().mark_positive("Gram sum d d* + d* d"))
        }
        _ => Err(Error::invalid(MODULE, format!("Hodge Laplacian for p = {p} is unsupported (p ∈ {{0, 1}})"))),
    }
}

fn unit(d: usize, a: usize, s: i64) -> Vec<i64> {
    let mut o = vec![0; d];
    o[a] = s;
    o
}

fn block(f: usize, entries: &[(usize, usize, f64)]) -> Vec<Complex64> {
    let mut b = vec![ZERO; f * f];
    for &(i, j, v) in entries {
        b[i * f + j] += Complex64::new(v, 0.0);
    }
    b
}

/// `(d_0 g)(x, a) = g(x + e_a) - g(x)`, vertex values in component 0.
fn coboundary_vertices(space: &Arc<SpaceModel>) -> Result<KernelOperator> {
    let d = space.dim();
    let mut entries = Vec::new();
    for a in 0..d {
        entries.push((unit(d, a, 1), block(d, &[(a, 0, 1.0)])));
        entries.push((vec![0; d], block(d, &[(a, 0, -1.0)])));
    }
    KernelOperator::from_stencil(space.clone(), d, entries)
}

/// `(d_1 g)(x, F_ab) = g(x,a) + g(x+e_a,b) - g(x+e_b,a) - g(x,b)`, face
/// `F_ab` (`a < b`) stored in component `face_index(a, b)`.
fn coboundary_edges(space: &Arc<SpaceModel>) -> Result<KernelOperator> {
    let d = space.dim();
    let mut entries = Vec::new();
    let mut face = 0;
    for a in 0..d {
        for b in a + 1..d {
            entries.push((vec![0; d], block(d, &[(face, a, 1.0), (face, b, -1.0)])));
            entries.push((unit(d, a, 1), block(d, &[(face, b, 1.0)])));
            entries.push((unit(d, b, 1), block(d, &[(face, a, -1.0)])));
            face += 1;
        }
    }
    if entries.is_empty() {
        return Ok(KernelOperator::zero(space.clone(), d));
    }
    KernelOperator::from_stencil(space.clone(), d, entries)
}

/// Symbol `c + Σ_a 2 w_a cos θ_a` of a separable nearest-neighbour stencil
/// with scalar blocks; `mass` is the fiber dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSymbol {
    pub constant: f64,
    pub weights: Vec<f64>,
    pub mass: f64,
}

impl FourierSymbol {
    /// Extracts the symbol, or `None` if the operator is not of this form.
    pub fn of(op: &KernelOperator) -> Option<Self> {
        let space = op.space();
        if !op.is_stencil() || space.kind() != SpaceKind::Lattice || !op.is_self_adjoint() {
            return None;
        }
        let d = space.dim();
        let f = op.fiber();
        let centre = space.center();
        let scalar = |b: &[Complex64]| -> Option<f64> {
            let v = b[0];
            for i in 0..f {
                for j in 0..f {
                    let e = b[i * f + j];
                    let want = if i == j { v } else { ZERO };
                    if (e - want).norm() > 1e-14 * v.norm().max(1.0) {
                        return None;
                    }
                }
            }
            (v.im.abs() <= 1e-14 * v.norm().max(1.0)).then_some(v.re)
        };
        let mut constant = 0.0;
        let mut weights = vec![0.0; d];
        let mut ok = true;
        let origin = space.coords(centre);
        op.for_each_in_row(centre, |y, b| {
            let o: Vec<i64> = space.coords(y).iter().zip(&origin).map(|(a, c)| a - c).collect();
            let nonzero: Vec<usize> = (0..d).filter(|&a| o[a] != 0).collect();
            match (nonzero.as_slice(), scalar(b)) {
                ([], Some(v)) => constant = v,
                ([a], Some(v)) if o[*a].abs() == 1 => {
                    if o[*a] == 1 {
                        weights[*a] = v;
                    }
                }
                _ => ok = false,
            }
        });
        if !ok {
            return None;
        }
        Some(FourierSymbol { constant, weights, mass: f as f64 })
    }

    /// Symbol range `[min, max]`.
    pub fn spectrum(&self) -> (f64, f64) {
        let spread: f64 = self.weights.iter().map(|w| 2.0 * w.abs()).sum();
        (self.constant - spread, self.constant + spread)
    }

    /// `μ({0})`: the symbol vanishes on a null set unless it is identically 0.
    pub fn atom(&self) -> f64 {
        if self.weights.iter().all(|w| *w == 0.0) && self.constant == 0.0 {
            self.mass
        } else {
            0.0
        }
    }

    /// `N(λ) = mass · |{θ ∈ [0,π]^d : symbol(θ) < λ}| / π^d`.
    pub fn counting(&self, lambda: f64) -> f64 {
        self.mass * counting_nested(self.constant, &self.weights, lambda)
    }
}

const ORACLE_ORDER: usize = 20;

fn counting_nested(c: f64, w: &[f64], lambda: f64) -> f64 {
    match w.split_last() {
        None => {
            if c < lambda {
                1.0
            } else {
                0.0
            }
        }
        Some((&wd, rest)) => {
            if rest.is_empty() {
                return counting_1d(c, wd, lambda);
            }
            let spread: f64 = rest.iter().map(|x| 2.0 * x.abs()).sum();
            let (lo, hi) = (c - spread, c + spread);
            if lambda <= lo - 2.0 * wd.abs() {
                return 0.0;
            }
            if lambda > hi + 2.0 * wd.abs() {
                return 1.0;
            }
            if wd == 0.0 {
                return counting_nested(c, rest, lambda);
            }
            // inner argument λ - 2 w cos θ crosses the inner band edges at these angles
            let mut cuts = vec![0.0, PI];
            for edge in [lo, hi] {
                let q = (lambda - edge) / (2.0 * wd);
                if q > -1.0 && q < 1.0 {
                    cuts.push(q.acos());
                }
            }
            cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
            let inner = |theta: f64| counting_nested(c, rest, lambda - 2.0 * wd * theta.cos());
            cuts.windows(2).map(|p| integrate_endpoint_clustered(inner, p[0], p[1], ORACLE_ORDER)).sum::<f64>() / PI
        }
    }
}

fn counting_1d(c: f64, w: f64, lambda: f64) -> f64 {
    if w == 0.0 {
        return if c < lambda { 1.0 } else { 0.0 };
    }
    let q = (lambda - c) / (2.0 * w);
    let frac = q.clamp(-1.0, 1.0).acos() / PI;
    if w < 0.0 {
        frac
    } else {
        1.0 - frac
    }
}

/// How a density was obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum DensityMethod {
    FourierOracle,
    /// Jackson-damped Chebyshev moments; `width` is the declared smoothing.
    Moments { degree: usize, width: f64 },
}

/// Requested method for [`spectral_density`].
#[derive(Clone, Debug, PartialEq)]
pub enum DensityRequest {
    FourierOracle,
    Moments { degree: usize, source: MomentSource, set: Option<SiteSet> },
}

/// `N(λ)` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub method: DensityMethod,
    /// Estimate of the atom at 0.
    pub atom: f64,
    /// Total mass (the fiber dimension).
    pub mass: f64,
}

/// Spectral density of `Δ` on `grid ⊂ [0, schur_bound]`.
pub fn spectral_density(delta: &KernelOperator, grid: &[f64], request: &DensityRequest) -> Result<SpectralDensity> {
    let bound = schur_bound(delta)?;
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && *l <= bound * (1.0 + 1e-12) + 1e-12)) {
        return Err(Error::invalid(MODULE, format!("density grid must lie in [0, {bound}]")));
    }
    match request {
        DensityRequest::FourierOracle => {
            let sym = FourierSymbol::of(delta).ok_or_else(|| {
                Error::invalid(MODULE, "Fourier oracle needs a separable nearest-neighbour lattice stencil")
            })?;
            let raw: Vec<f64> = grid.iter().map(|&l| sym.counting(l)).collect();
            Ok(SpectralDensity {
                grid: grid.to_vec(),
                values: monotone(grid, &raw, sym.mass),
                method: DensityMethod::FourierOracle,
                atom: sym.atom(),
                mass: sym.mass,
            })
        }
        DensityRequest::Moments { degree, source, set } => {
            let (lo, hi) = spectral_interval(delta)?;
            let m = *degree;
            if m < 2 {
                return Err(Error::invalid(MODULE, "moment density needs degree >= 2"));
            }
            let width = 3.0 * PI / m as f64 * (hi - lo) / 2.0;
            let step = min_step(grid);
            if width < step {
                return Err(Error::invalid(
                    MODULE,
                    format!("smoothing width {width:.3e} is below the grid resolution {step:.3e}"),
                ));
            }
            let set = set.clone().unwrap_or_else(|| SiteSet::new(vec![delta.space().center()]));
            let mom = moments_over(delta, lo, hi, &set, m, *source)?;
            let kpm = JacksonCounting::new(lo, hi, &mom.moments);
            let raw: Vec<f64> = grid.iter().map(|&l| kpm.counting(l)).collect();
            let mass = mom.moments[0];
            Ok(SpectralDensity {
                grid: grid.to_vec(),
                values: monotone(grid, &raw, mass),
                method: DensityMethod::Moments { degree: m, width },
                atom: kpm.counting(lo + width).max(0.0),
                mass,
            })
        }
    }
}

fn min_step(grid: &[f64]) -> f64 {
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    g.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min).min(f64::MAX)
}

/// Isotonic correction (in grid order) and clamping to `[0, mass]`.
fn monotone(grid: &[f64], raw: &[f64], mass: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].partial_cmp(&grid[b]).expect("finite grid"));
    let sorted: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let fixed = isotonic_nondecreasing(&sorted);
    let mut out = vec![0.0; grid.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = fixed[k].clamp(0.0, mass);
    }
    out
}

/// Cumulative Jackson-damped Chebyshev expansion.
#[derive(Clone, Debug)]
pub struct JacksonCounting {
    lo: f64,
    hi: f64,
    damped: Vec<f64>,
}

impl JacksonCounting {
    pub fn new(lo: f64, hi: f64, moments: &[f64]) -> Self {
        let m = moments.len();
        let np1 = m as f64;
        let damped = moments
            .iter()
            .enumerate()
            .map(|(k, mu)| {
                let a = PI / np1;
                let g = ((np1 - k as f64) * (a * k as f64).cos() + (a * k as f64).sin() / a.tan()) / np1;
                g * mu
            })
            .collect();
        JacksonCounting { lo, hi, damped }
    }

    /// `N(λ) = (1/π)[μ_0 (π - θ) - 2 Σ_k g_k μ_k sin(kθ)/k]`, `θ = arccos x`.
    pub fn counting(&self, lambda: f64) -> f64 {
        if self.hi <= self.lo {
            return if lambda > self.lo { self.damped[0] } else { 0.0 };
        }
        let x = ((2.0 * lambda - self.hi - self.lo) / (self.hi - self.lo)).clamp(-1.0, 1.0);
        let theta = x.acos();
        let mut s = self.damped[0] * (PI - theta);
        for (k, gm) in self.damped.iter().enumerate().skip(1) {
            s -= 2.0 * gm * (k as f64 * theta).sin() / k as f64;
        }
        s / PI
    }
}

/// `ϑ(t) = ∫_{[0,Λ]} e^{-tλ} dN(λ) = e^{-tΛ} N(Λ+) + t ∫_0^Λ e^{-tλ} N(λ) dλ`.
pub fn laplace_transform<F: Fn(f64) -> f64>(counting: F, lambda_max: f64, mass: f64, t: f64, panels: usize) -> f64 {
    let width = lambda_max / panels as f64;
    let body: f64 = (0..panels)
        .map(|p| {
            let a = p as f64 * width;
            integrate_endpoint_clustered(|l| (-t * l).exp() * counting(l), a, a + width, 16)
        })
        .sum();
    (-t * lambda_max).exp() * mass + t * body
}

/// L²-Betti number with the two routes it is computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct BettiEstimate {
    /// `None` when the routes disagree beyond the tolerance.
    pub value: Option<f64>,
    /// `(limit, uncertainty)` of `ϑ(t)` as `t → ∞`.
    pub theta_route: (f64, f64),
    /// `(limit, uncertainty)` of `N(λ)` as `λ → 0+`.
    pub density_route: (f64, f64),
    pub uncertainty: f64,
    pub agree: bool,
}

/// `b = lim_{t→∞} ϑ(t) = lim_{λ→0+} N(λ)`: Aitken extrapolation on each
/// route. `theta` is `(t, ϑ)` with increasing `t`; `density` is `(λ, N)`
/// with decreasing `λ`; both should be geometric grids.
pub fn betti(theta: &[(f64, f64)], density: &[(f64, f64)], tolerance: f64) -> Result<BettiEstimate> {
    if theta.len() < 3 || density.len() < 3 {
        return Err(Error::invalid(MODULE, "Betti estimation needs at least three samples per route"));
    }
    if theta.windows(2).any(|w| w[1].0 <= w[0].0) || density.windows(2).any(|w| w[1].0 >= w[0].0) {
        return Err(Error::invalid(MODULE, "theta times must increase and density points must decrease"));
    }
    let tail = |v: Vec<f64>| -> Vec<f64> {
        let k = v.len().min(6);
        v[v.len() - k..].to_vec()
    };
    let th = aitken_limit(&tail(theta.iter().map(|p| p.1).collect())).expect("non-empty");
    let de = aitken_limit(&tail(density.iter().map(|p| p.1).collect())).expect("non-empty");
    let th = (th.0.max(0.0), th.1);
    let de = (de.0.max(0.0), de.1);
    let diff = (th.0 - de.0).abs();
    let agree = diff <= tolerance;
    Ok(BettiEstimate {
        value: agree.then_some(th.0),
        theta_route: th,
        density_route: de,
        uncertainty: th.1.max(diff),
        agree,
    })
}

/// Window policy for [`ns_numbers`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NsPolicy {
    /// Sliding-window width in decades.
    pub decades: f64,
    /// Minimum coverage in decades before the WIDE flag is raised.
    pub min_coverage: f64,
    /// Slack for the chain `α_ = α'_ <= α' <= α`.
    pub chain_tolerance: f64,
}

impl Default for NsPolicy {
    fn default() -> Self {
        NsPolicy { decades: 1.0, min_coverage: 2.0, chain_tolerance: 0.05 }
    }
}

/// Novikov–Shubin exponents.
#[derive(Clone, Debug, PartialEq)]
pub struct NsReport {
    /// `2 limsup_{λ→0} log N⁰/log λ` (max window slope).
    pub alpha: Option<f64>,
    /// liminf variant (min window slope).
    pub alpha_lower: Option<f64>,
    /// `2 limsup_{t→∞} log ϑ⁰/log(1/t)`.
    pub alpha_prime: Option<f64>,
    pub alpha_prime_lower: Option<f64>,
    pub theta_window: Option<(f64, f64)>,
    pub density_window: Option<(f64, f64)>,
    /// Largest window RMS residual (log10 units).
    pub residual: f64,
    /// Fewer than `min_coverage` decades of clean power law.
    pub wide: bool,
    /// `ϑ⁰ = O(t^{-δ})` for some `δ > 0` on the sampled range.
    pub power_law_regular: bool,
    /// Chain inequality verdict (when both sides are present).
    pub chain_ok: Option<bool>,
}

/// Max and min window fits, largest residual and coverage of one side.
type SideFit = (Option<(f64, f64)>, Option<(f64, f64)>, f64, f64);

/// Exponents from `(t, ϑ)` and/or `(λ, N)` samples with `b` subtracted.
pub fn ns_numbers(theta: &[(f64, f64)], density: &[(f64, f64)], b: f64, policy: &NsPolicy) -> Result<NsReport> {
    if theta.is_empty() && density.is_empty() {
        return Err(Error::invalid(MODULE, "no samples for Novikov–Shubin fitting"));
    }
    let side = |pts: &[(f64, f64)], sign: f64| -> SideFit {
        let mut pts: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, y - b)).filter(|p| p.0 > 0.0 && p.1 > 0.0).collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite samples"));
        if pts.len() < 2 {
            return (None, None, 0.0, 0.0);
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().cloned().unzip();
        let coverage = (xs[xs.len() - 1] / xs[0]).log10();
        let mut wins: Vec<WindowSlope> = window_slopes(&xs, &ys, policy.decades);
        if wins.is_empty() {
            if let Some(fit) = linear_fit(
                &xs.iter().map(|x| x.log10()).collect::<Vec<_>>(),
                &ys.iter().map(|y| y.log10()).collect::<Vec<_>>(),
            ) {
                wins.push(WindowSlope { lo: xs[0], hi: xs[xs.len() - 1], fit });
            }
        }
        let slopes: Vec<f64> = wins.iter().map(|w| 2.0 * sign * w.fit.slope).collect();
        let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
        let residual = wins.iter().map(|w| w.fit.residual).fold(0.0, f64::max);
        (Some((lo, hi)), Some((xs[0], xs[xs.len() - 1])), residual, coverage)
    };
    let (th, th_win, th_res, th_cov) = side(theta, -1.0);
    let (de, de_win, de_res, de_cov) = side(density, 1.0);
    let wide = (th.is_some() && th_cov < policy.min_coverage)
        || (de.is_some() && de_cov < policy.min_coverage)
        || (th.is_none() && !theta.is_empty())
        || (de.is_none() && !density.is_empty());
    let chain_ok = match (th, de) {
        (Some((apl, ap)), Some((al, a))) => {
            let tol = policy.chain_tolerance;
            Some((al - apl).abs() <= tol && apl <= ap + tol && ap <= a + tol)
        }
        _ => None,
    };
    Ok(NsReport {
        alpha: de.map(|p| p.1),
        alpha_lower: de.map(|p| p.0),
        alpha_prime: th.map(|p| p.1),
        alpha_prime_lower: th.map(|p| p.0),
        theta_window: th_win,
        density_window: de_win,
        residual: th_res.max(de_res),
        wide,
        power_law_regular: th.is_some_and(|p| p.0 > 0.0),
        chain_ok,
    })
}

/// Heat-kernel decay verdict `sup_x H(t,x,x) <= C t^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct VaropoulosReport {
    /// `(t, sup_x H(t,x,x))`, kernel normalised by the volume weight and
    /// traced over the fiber.
    pub samples: Vec<(f64, f64)>,
    /// Smallest `C` with `sup H <= C t^{-1/2}` on the grid.
    pub constant: f64,
    /// `2 ×` the smallest window decay exponent.
    pub alpha: f64,
    pub pass: bool,
}

/// Samples `sup_x H(t,x,x)` over `sites` (the centre for stencils).
pub fn varopoulos_check(
    delta: &KernelOperator,
    times: &[f64],
    sites: Option<&[usize]>,
    eps: f64,
    tolerance: f64,
) -> Result<VaropoulosReport> {
    if times.len() < 2 {
        return Err(Error::invalid(MODULE, "decay check needs at least two times"));
    }
    let (lo, hi) = spectral_interval(delta)?;
    let filters = times.iter().map(|&t| PolynomialFilter::new(t, lo, hi, eps)).collect::<Result<Vec<_>>>()?;
    let degree = filters.iter().map(|f| f.degree).max().unwrap_or(0);
    let centre = [delta.space().center()];
    let sites: &[usize] = match sites {
        Some(s) if !s.is_empty() => s,
        _ => &centre,
    };
    let w = delta.space().volume_weight();
    let per_site = sites.iter().map(|&s| site_moments(delta, lo, hi, s, degree)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<(f64, f64)> = filters
        .iter()
        .map(|f| {
            let sup = per_site
                .iter()
                .map(|m| f.coeffs.iter().zip(m).map(|(c, v)| c * v).sum::<f64>() / w)
                .fold(f64::NEG_INFINITY, f64::max);
            (f.t, sup)
        })
        .collect();
    let constant = samples.iter().map(|(t, h)| h * t.sqrt()).fold(0.0, f64::max);
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples.iter().cloned().unzip();
    let mut wins = window_slopes(&xs, &ys, 1.0);
    if wins.is_empty() {
        let lx: Vec<f64> = xs.iter().map(|x| x.log10()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-300).log10()).collect();
        if let Some(fit) = linear_fit(&lx, &ly) {
            wins.push(WindowSlope { lo: xs[0], hi: xs[xs.len() - 1], fit });
        }
    }
    let alpha = wins.iter().map(|w| -2.0 * w.fit.slope).fold(f64::INFINITY, f64::min);
    let pass = constant > 0.0 && constant.is_finite() && alpha >= 1.0 - tolerance;
    Ok(VaropoulosReport { samples, constant, alpha, pass })
}

/// `||A - B||` bounded by the Schur bound of the difference.
pub fn operator_distance(a: &KernelOperator, b: &KernelOperator) -> Result<f64> {
    Ok(crate::operator::schur_bound_general(&a.sub(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::{theta, ThetaOptions};
    use crate::space::SpaceSpec;

    fn lattice(d: usize, w: usize) -> Arc<SpaceModel> {
        Arc::new(SpaceModel::new(SpaceSpec::lattice(d, w)).unwrap())
    }

    #[test]
    fn hodge_examples() {
        let z1 = lattice(1, 20);
        let d0 = hodge_laplacian(&z1, 0).unwrap();
        let c = z1.center();
        assert_eq!(d0.block(c, c)[0].re, 2.0);
        assert_eq!(d0.block(c, c + 1)[0].re, -1.0);
        let d1 = hodge_laplacian(&z1, 1).unwrap();
        assert_eq!(operator_distance(&d0, &d1).unwrap(), 0.0);
        let z2 = lattice(2, 10);
        let e = hodge_laplacian(&z2, 1).unwrap();
        let c = z2.center();
        let b = e.block(c, c);
        assert_eq!((b[0].re, b[3].re), (4.0, 4.0));
        assert!(e.is_self_adjoint());
        assert_eq!(e.propagation(), 1.0);
        assert!(hodge_laplacian(&z2, 2).is_err());
    }

    #[test]
    fn oracle_examples() {
        let z1 = lattice(1, 20);
        let lap = KernelOperator::laplacian(z1.clone(), 1);
        let sym = FourierSymbol::of(&lap).unwrap();
        assert_eq!(sym.counting(0.0), 0.0);
        assert!((sym.counting(2.0) - 0.5).abs() < 1e-15);
        assert!((sym.counting(4.0 - 1e-12) - 1.0).abs() < 1e-5);
        let z2 = lattice(2, 10);
        let sym2 = FourierSymbol::of(&KernelOperator::laplacian(z2, 1)).unwrap();
        assert!((sym2.counting(4.0) - 0.5).abs() < 1e-12);
        // small-λ law N ~ λ/(4π)
        assert!((sym2.counting(1e-4) / (1e-4 / (4.0 * PI)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn laplace_transform_reproduces_theta() {
        let z1 = lattice(1, 20);
        let sym = FourierSymbol::of(&KernelOperator::laplacian(z1, 1)).unwrap();
        let v = laplace_transform(|l| sym.counting(l), 4.0, 1.0, 1.0, 200);
        assert!((v - 0.308508322553671).abs() < 1e-9);
    }

    #[test]
    fn moment_density_tracks_the_oracle() {
        let z1 = lattice(1, 300);
        let lap = KernelOperator::laplacian(z1, 1);
        let sym = FourierSymbol::of(&lap).unwrap();
        let grid: Vec<f64> = (0..=80).map(|i| 0.05 * i as f64).collect();
        let req = DensityRequest::Moments { degree: 256, source: MomentSource::HomogeneousSite, set: None };
        let d = spectral_density(&lap, &grid, &req).unwrap();
        let DensityMethod::Moments { width, .. } = d.method else { panic!() };
        for (l, n) in grid.iter().zip(&d.values) {
            assert!(*n >= sym.counting(l - width) - 1e-3 && *n <= sym.counting(l + width) + 1e-3);
        }
        let coarse: Vec<f64> = (0..=8).map(|i| 0.5 * i as f64).collect();
        assert!(spectral_density(&lap, &coarse, &req).is_err());
    }

    #[test]
    fn zero_operator_has_unit_betti() {
        let z1 = lattice(1, 20);
        let zero = KernelOperator::zero(z1, 1);
        let times = [1.0, 10.0, 100.0, 1000.0];
        let th = theta(&zero, &times, &ThetaOptions::default()).unwrap();
        assert!(th.iter().all(|s| s.theta == 1.0));
        let sym = FourierSymbol::of(&zero).unwrap();
        let dens: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3, 1e-4].iter().map(|&l| (l, sym.counting(l))).collect();
        let b = betti(&th.iter().map(|s| (s.t, s.theta)).collect::<Vec<_>>(), &dens, 1e-2).unwrap();
        assert_eq!(b.value, Some(1.0));
        assert_eq!(sym.atom(), 1.0);
    }
}
