//! Reference values for the test suites.
//!
//! Everything here is computed by a route that shares no code with
//! `roetrace-core`: power series for modified Bessel functions, closed-form
//! lattice densities of states, brute-force Brillouin-zone counting and
//! composite Simpson quadrature.

/// `e^{-x} I_k(x)` by its power series, summed in log space so that large
/// arguments neither overflow nor lose the leading exponential.
pub fn bessel_i_scaled(k: u32, x: f64) -> f64 {
    assert!(x >= 0.0, "bessel oracle needs x >= 0");
    if x == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let ln_half = half.ln();
    // log of the m = 0 term: k ln(x/2) - ln k! - x
    let mut ln_term = k as f64 * ln_half - ln_factorial(k as u64) - x;
    let mut peak = ln_term;
    let mut logs = vec![ln_term];
    let mut m: u64 = 0;
    loop {
        m += 1;
        ln_term += 2.0 * ln_half - (m as f64).ln() - ((m + k as u64) as f64).ln();
        logs.push(ln_term);
        if ln_term > peak {
            peak = ln_term;
        }
        if ln_term < peak - 40.0 && (m as f64) > half {
            break;
        }
    }
    let sum: f64 = logs.iter().map(|l| (l - peak).exp()).sum();
    (peak + sum.ln()).exp()
}

fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Heat kernel of the standard Laplacian on Z at time `t` between sites at
/// lattice distance `dist`: `e^{-2t} I_dist(2t)`.
pub fn z1_heat(t: f64, dist: u32) -> f64 {
    bessel_i_scaled(dist, 2.0 * t)
}

/// On-diagonal heat kernel of Z^d, the d-th power of the Z kernel.
pub fn zd_heat_diag(t: f64, d: u32) -> f64 {
    z1_heat(t, 0).powi(d as i32)
}

/// Chebyshev coefficients of `e^{-t lambda}` on `[0, spectral_max]` in the
/// convention `f = sum_k a_k T_k`, from the generating function
/// `e^{-z x} = I_0(z) + 2 sum_k (-1)^k I_k(z) T_k(x)`.
pub fn heat_chebyshev_coefficient(t: f64, spectral_max: f64, k: u32) -> f64 {
    let z = 0.5 * t * spectral_max;
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let factor = if k == 0 { 1.0 } else { 2.0 };
    sign * factor * bessel_i_scaled(k, z)
}

/// Tail sum `sum_{k > degree} |a_k|` of the heat Chebyshev expansion.
pub fn heat_chebyshev_tail(t: f64, spectral_max: f64, degree: u32) -> f64 {
    let mut total = 0.0;
    let mut k = degree + 1;
    loop {
        let c = heat_chebyshev_coefficient(t, spectral_max, k).abs();
        total += c;
        if c < 1e-300 || (c < total * 1e-17 && k > degree + 8) {
            break;
        }
        k += 1;
    }
    total
}

/// Integrated density of states of the Laplacian on Z:
/// `N(lambda) = arccos(1 - lambda/2) / pi` on `[0, 4]`.
pub fn z1_density(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else if lambda >= 4.0 {
        1.0
    } else {
        (1.0 - 0.5 * lambda).acos() / std::f64::consts::PI
    }
}

/// Brute-force integrated density of states of the Laplacian on Z^d: the
/// fraction of a midpoint grid of `points^d` momenta whose symbol
/// `sum_i (2 - 2 cos k_i)` lies below `lambda`.
pub fn zd_density_bruteforce(lambda: f64, d: usize, points: usize) -> f64 {
    let symbols: Vec<f64> = (0..points)
        .map(|j| {
            let k = -std::f64::consts::PI
                + 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / points as f64;
            2.0 - 2.0 * k.cos()
        })
        .collect();
    fn count(symbols: &[f64], d: usize, budget: f64) -> f64 {
        if d == 1 {
            return symbols.iter().filter(|&&s| s < budget).count() as f64;
        }
        symbols
            .iter()
            .filter(|&&s| s < budget)
            .map(|&s| count(symbols, d - 1, budget - s))
            .sum()
    }
    count(&symbols, d, lambda) / (points as f64).powi(d as i32)
}

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = if panels.is_multiple_of(2) { panels } else { panels + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Geometric series `sum_{k > n} 2 * base^{-k}`.
pub fn geometric_tail(base: f64, n: u32) -> f64 {
    2.0 * base.powi(-(n as i32 + 1)) / (1.0 - 1.0 / base)
}
