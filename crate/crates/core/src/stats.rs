//! Small distribution-comparison helpers.

use nalgebra::DMatrix;

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}

/// Overlap `Σ min(p, q)` of the normalized 2-D histograms of two point sets
/// (`2 × n` matrices) on a shared grid spanning both.
pub fn histogram_overlap_2d(a: &DMatrix<f64>, b: &DMatrix<f64>, bins: usize) -> f64 {
    let bins = bins.max(1);
    let range = |r: usize| {
        a.row(r)
            .iter()
            .chain(b.row(r).iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    };
    let (rx, ry) = (range(0), range(1));
    let index = |v: f64, (lo, hi): (f64, f64)| {
        if hi > lo {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let hist = |m: &DMatrix<f64>| {
        let mut h = vec![0.0; bins * bins];
        let w = 1.0 / m.ncols() as f64;
        for col in m.column_iter() {
            h[index(col[0], rx) * bins + index(col[1], ry)] += w;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(p, q)| p.min(*q)).sum()
}
