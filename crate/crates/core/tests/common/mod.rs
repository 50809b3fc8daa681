//! Reference implementations written independently of the library, used as
//! test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

/// Normal density.
pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// Density of `S_T/S − 1` under Black-Scholes dynamics with rate `rf`.
pub fn bs_return_pdf(r: f64, rf: f64, vol: f64, tau: f64) -> f64 {
    if r <= -1.0 {
        return 0.0;
    }
    let s = vol * tau.sqrt();
    let mu = (rf - 0.5 * vol * vol) * tau;
    let x = (1.0 + r).ln();
    (-(x - mu).powi(2) / (2.0 * s * s)).exp() / ((1.0 + r) * s * (2.0 * PI).sqrt())
}

/// Merge history of greedy Ward clustering computed straight from point
/// coordinates: at every step the pair whose union raises the total
/// within-cluster sum of squares the least is merged. Heights are
/// `sqrt(2·ΔSS)`.
pub fn ward_by_enumeration(points: &[Vec<f64>]) -> Vec<(BTreeSet<usize>, BTreeSet<usize>, f64)> {
    let sse = |members: &BTreeSet<usize>| -> f64 {
        let dim = points[0].len();
        let n = members.len() as f64;
        let mut c = vec![0.0; dim];
        for &i in members {
            for (k, v) in points[i].iter().enumerate() {
                c[k] += v / n;
            }
        }
        members
            .iter()
            .map(|&i| points[i].iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    };
    let mut clusters: Vec<BTreeSet<usize>> = (0..points.len()).map(|i| BTreeSet::from([i])).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let union: BTreeSet<usize> = clusters[i].union(&clusters[j]).copied().collect();
                let delta = sse(&union) - sse(&clusters[i]) - sse(&clusters[j]);
                if best.is_none_or(|(b, _, _)| delta < b) {
                    best = Some((delta, i, j));
                }
            }
        }
        let (delta, i, j) = best.expect("two clusters remain");
        let b = clusters.remove(j);
        let a = clusters.remove(i);
        out.push((a.clone(), b.clone(), (2.0 * delta.max(0.0)).sqrt()));
        clusters.push(a.union(&b).copied().collect());
    }
    out
}

/// Member sets of each merge in scipy-style id notation.
pub fn merge_sets(n: usize, merges: &[(usize, usize)]) -> Vec<(BTreeSet<usize>, BTreeSet<usize>)> {
    let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    let mut out = Vec::new();
    for &(a, b) in merges {
        let (sa, sb) = (sets[a].clone(), sets[b].clone());
        sets.push(sa.union(&sb).copied().collect());
        out.push((sa, sb));
    }
    out
}

pub fn euclidean_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            points
                .iter()
                .map(|q| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Fraction of point pairs on which two labelings agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// Closed-form maximum-likelihood logistic fit with one binary covariate:
/// intercept is the log-odds in group 0, slope the log odds ratio.
/// Returns `(coefficients, standard errors)`.
pub fn logistic_binary_covariate(x: &[bool], y: &[bool]) -> ([f64; 2], [f64; 2]) {
    let count = |g: bool| {
        let n = x.iter().filter(|v| **v == g).count() as f64;
        let k = x.iter().zip(y).filter(|(xv, yv)| **xv == g && **yv).count() as f64;
        (n, k / n)
    };
    let (n0, p0) = count(false);
    let (n1, p1) = count(true);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let v0 = 1.0 / (n0 * p0 * (1.0 - p0));
    let v1 = 1.0 / (n1 * p1 * (1.0 - p1));
    ([logit(p0), logit(p1) - logit(p0)], [v0.sqrt(), (v0 + v1).sqrt()])
}
