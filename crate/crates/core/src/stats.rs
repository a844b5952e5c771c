//! Small numeric helpers shared across evaluators.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    // Welford: exact zero for constant input.
    let (mut m, mut ss) = (0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        let delta = x - m;
        m += delta / (i + 1) as f64;
        ss += delta * (x - m);
    }
    (ss.max(0.0) / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Pearson correlation. A column with (numerically) zero spread has no
/// defined correlation and yields 0.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let n = xs.len().max(1) as f64;
    if is_flat(sxx / n, mx) || is_flat(syy / n, my) {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

fn is_flat(variance: f64, mean: f64) -> bool {
    variance.sqrt() <= 1e-12 * mean.abs().max(1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Cramér's V between two discrete variables given as level indices.
pub fn cramers_v(a: &[u32], ka: usize, b: &[u32], kb: usize) -> f64 {
    let n = a.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mut table = vec![0.0; ka * kb];
    let mut ra = vec![0.0; ka];
    let mut rb = vec![0.0; kb];
    for (x, y) in a.iter().zip(b) {
        table[*x as usize * kb + *y as usize] += 1.0;
        ra[*x as usize] += 1.0;
        rb[*y as usize] += 1.0;
    }
    let mut chi2 = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let e = ra[i] * rb[j] / n;
            if e > 0.0 {
                let d = table[i * kb + j] - e;
                chi2 += d * d / e;
            }
        }
    }
    let observed_a = ra.iter().filter(|c| **c > 0.0).count();
    let observed_b = rb.iter().filter(|c| **c > 0.0).count();
    let dof = observed_a.min(observed_b).saturating_sub(1);
    if dof == 0 {
        return 0.0;
    }
    (chi2 / (n * dof as f64)).sqrt().clamp(0.0, 1.0)
}

/// Correlation ratio (eta) of a numeric variable on a discrete grouping.
/// Equals the absolute point-biserial correlation for two groups.
pub fn correlation_ratio(groups: &[u32], k: usize, values: &[f64]) -> f64 {
    let m = mean(values);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0.0; k];
    for (g, v) in groups.iter().zip(values) {
        sums[*g as usize] += v;
        counts[*g as usize] += 1.0;
    }
    let total: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    if is_flat(total / values.len().max(1) as f64, m) {
        return 0.0;
    }
    let between: f64 = sums
        .iter()
        .zip(&counts)
        .filter(|(_, c)| **c > 0.0)
        .map(|(s, c)| {
            let gm = s / c;
            c * (gm - m) * (gm - m)
        })
        .sum();
    (between / total).sqrt().clamp(0.0, 1.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
