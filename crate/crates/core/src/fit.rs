//! Small-sample fitting helpers: least-squares lines, sliding log-log
//! windows, trend tests for "tends to zero" verdicts, Aitken extrapolation
//! and isotonic regression.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    /// Standard error of the slope (0 for exactly two points).
    pub slope_stderr: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let residual = (ss / nf).sqrt();
    let slope_stderr = if n > 2 { (ss / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Some(LineFit { slope, intercept, residual, slope_stderr })
}

/// One sliding window of a log-log fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSlope {
    pub lo: f64,
    pub hi: f64,
    pub fit: LineFit,
}

/// Fits `log y` against `log x` on every maximal run of consecutive samples
/// spanning at most `decades` decades (and at least two points). Samples
/// with non-positive `x` or `y` are skipped.
pub fn window_slopes(xs: &[f64], ys: &[f64], decades: f64) -> Vec<WindowSlope> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let mut out = Vec::new();
    for start in 0..pts.len() {
        let mut end = start;
        while end + 1 < pts.len() && (pts[end + 1].0 - pts[start].0).abs() <= decades + 1e-9 {
            end += 1;
        }
        if end == start {
            continue;
        }
        // keep only windows that are not contained in the previous one
        if let Some(prev) = out.last() {
            let prev: &WindowSlope = prev;
            if 10f64.powf(pts[end].0) <= prev.hi * (1.0 + 1e-12) && start > 0 {
                continue;
            }
        }
        let (lx, ly): (Vec<f64>, Vec<f64>) = pts[start..=end].iter().cloned().unzip();
        if let Some(fit) = linear_fit(&lx, &ly) {
            out.push(WindowSlope { lo: 10f64.powf(pts[start].0), hi: 10f64.powf(pts[end].0), fit });
        }
    }
    out
}

/// Outcome of a scale-free "tends to zero" test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendVerdict {
    /// Constant `C` fitted on the first half: `max value * sqrt(scale)`.
    pub constant: f64,
    pub pass: bool,
}

/// Values `v_i >= 0` sampled at increasing scales `n_i` pass when every
/// second-half value lies below `C / sqrt(n_i)`, with `C` fitted on the
/// first half. Sequences that are identically zero pass; fewer than four
/// samples never pass.
pub fn vanishing_trend(scales: &[f64], values: &[f64]) -> TrendVerdict {
    let floor = 1e-13;
    if values.iter().all(|v| v.abs() <= floor) && !values.is_empty() {
        return TrendVerdict { constant: 0.0, pass: true };
    }
    if values.len() < 4 || scales.len() != values.len() {
        return TrendVerdict { constant: f64::NAN, pass: false };
    }
    let half = values.len() / 2;
    let constant = scales[..half]
        .iter()
        .zip(&values[..half])
        .map(|(n, v)| v.abs() * n.sqrt())
        .fold(0.0, f64::max);
    let pass = scales[half..]
        .iter()
        .zip(&values[half..])
        .all(|(n, v)| v.abs() <= constant / n.sqrt() * (1.0 + 1e-9) + floor);
    TrendVerdict { constant, pass }
}

/// Aitken's delta-squared extrapolation of a sequence that approaches its
/// limit geometrically (e.g. power-law samples on a geometric grid).
/// Returns `(limit, uncertainty)`; a constant sequence returns itself.
pub fn aitken_limit(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let last = values[n - 1];
    if n < 3 {
        return Some((last, if n == 2 { (values[1] - values[0]).abs() } else { f64::INFINITY }));
    }
    let estimate = |i: usize| -> f64 {
        let (a, b, c) = (values[i - 2], values[i - 1], values[i]);
        let d1 = b - a;
        let d2 = c - b;
        let denom = d2 - d1;
        if d2 == 0.0 || denom.abs() <= 1e-300 || (d2 / d1) <= 0.0 || (d2 / d1) >= 1.0 {
            c
        } else {
            c - d2 * d2 / denom
        }
    };
    let e_last = estimate(n - 1);
    let spread = if n >= 4 { (e_last - estimate(n - 2)).abs() } else { (last - e_last).abs() };
    Some((e_last, spread))
}

/// Pool-adjacent-violators: the nondecreasing sequence closest in least
/// squares to `values`.
pub fn isotonic_nondecreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            blocks.pop();
            let c = c1 + c2;
            blocks.push(((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c));
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}
