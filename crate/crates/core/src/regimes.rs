//! Volatility regimes: CLR distances across tenors, hierarchical clustering,
//! embedding and logistic diagnostics, and cluster-conditional premia.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physical::{assemble_physical, conditional_rescaled_returns};
use crate::premia::{anova_oneway, premia_report, AnovaResult, DecompositionCurve, LowerBounds, PremiaInputs, PremiaReport, PricingKernelCurve};
use crate::rnd::{average_density, ClrFunction, DensityGrid};

pub const DEFAULT_TENORS: [u32; 3] = [9, 27, 45];
pub const MAX_IRLS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TenorWeighting {
    /// Trapezoid rule over the sorted tenors.
    #[default]
    Trapezoid,
    Uniform,
}

/// Normalized quadrature weights for `tenors` (sorted ascending).
pub fn tenor_weights(tenors: &[u32], mode: TenorWeighting) -> Vec<f64> {
    let n = tenors.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = match mode {
        TenorWeighting::Uniform => vec![1.0; n],
        TenorWeighting::Trapezoid => (0..n)
            .map(|i| {
                let left = if i > 0 { (tenors[i] - tenors[i - 1]) as f64 } else { 0.0 };
                let right = if i + 1 < n { (tenors[i + 1] - tenors[i]) as f64 } else { 0.0 };
                0.5 * (left + right)
            })
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub dates: Vec<NaiveDate>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(dates: Vec<NaiveDate>, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let n = dates.len();
        let upper: Vec<(usize, usize, f64)> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, f(i, j)))
            .collect();
        let mut values = vec![0.0; n * n];
        for (i, j, d) in upper {
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
        Self { dates, values }
    }

    /// Matrix with placeholder dates, for callers that only have distances.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let base = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
        let dates = (0..n).map(|i| base + chrono::Duration::days(i as i64)).collect();
        let mut values = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::InvalidInput("distance matrix must be square".into()));
            }
            values.extend_from_slice(row);
        }
        let m = Self { dates, values };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let d = self.get(i, j);
                if !d.is_finite() || d < 0.0 || d != self.get(j, i) {
                    return Err(Error::InvalidInput(format!("bad distance at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Reorder rows and columns: entry `(a, b)` of the result is `(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self {
            dates: perm.iter().map(|&i| self.dates[i]).collect(),
            values,
        }
    }
}

/// CLR functions per date and tenor.
pub type ClrPanel = BTreeMap<NaiveDate, BTreeMap<u32, ClrFunction>>;

/// Squared L² distance `∫ (a − b)² dr` by trapezoid.
pub fn clr_sq_distance(a: &ClrFunction, b: &ClrFunction) -> Result<f64> {
    a.grid.ensure_matches(&b.grid)?;
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).collect();
    Ok(a.grid.integrate(&d))
}

/// `D(i,j) = sqrt(Σ_τ w_τ ∫ (clr_i − clr_j)² dr)` over dates carrying every tenor.
///
/// Returns the matrix and the dates dropped for missing a tenor.
pub fn multivariate_distance(panel: &ClrPanel, tenors: &[u32], weighting: TenorWeighting) -> Result<(DistanceMatrix, Vec<NaiveDate>)> {
    let mut tenors = tenors.to_vec();
    tenors.sort_unstable();
    tenors.dedup();
    let weights = tenor_weights(&tenors, weighting);
    let mut dates = Vec::new();
    let mut excluded = Vec::new();
    let mut rows: Vec<Vec<&ClrFunction>> = Vec::new();
    for (date, by_tenor) in panel {
        let picked: Option<Vec<&ClrFunction>> = tenors.iter().map(|t| by_tenor.get(t)).collect();
        match picked {
            Some(p) => {
                dates.push(*date);
                rows.push(p);
            }
            None => {
                log::info!("{date}: missing a tenor in {tenors:?}, excluded from clustering");
                excluded.push(*date);
            }
        }
    }
    if let Some(first) = rows.first() {
        let grid = first[0].grid;
        for row in &rows {
            for c in row {
                grid.ensure_matches(&c.grid)?;
            }
        }
    }
    let m = DistanceMatrix::from_fn(dates, |i, j| {
        let mut s = 0.0;
        for (k, w) in weights.iter().enumerate() {
            s += w * clr_sq_distance(rows[i][k], rows[j][k]).expect("grids checked");
        }
        s.sqrt()
    });
    Ok((m, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Complete,
    Single,
    Average,
}

/// One agglomeration step. Ids below `n` are dates; id `n + s` is the
/// cluster formed at step `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Linkage height; for Ward the square root of the Lance-Williams `d²`.
    pub cost: f64,
    pub size: usize,
}

/// Agglomerative clustering by the Lance-Williams recurrence.
///
/// Ward runs on squared distances; ties go to the smallest `(i, j)` pair of
/// slot indices, a slot being the lowest original index in its cluster.
pub fn linkage(d: &DistanceMatrix, method: Linkage) -> Vec<Merge> {
    let n = d.len();
    let squared = method == Linkage::Ward;
    let mut dm: Vec<f64> = d.values.iter().map(|v| if squared { v * v } else { *v }).collect();
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let at = |dm: &[f64], i: usize, j: usize| dm[i * n + j];

    let nearest = |dm: &[f64], active: &[bool], i: usize| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j != i && active[j] {
                let v = at(dm, i, j);
                if v < best_d {
                    best_d = v;
                    best = j;
                }
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = nearest(&dm, &active, i);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        // Global minimum over cached nearest neighbours, ties on (i, j).
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] || nn[i] == usize::MAX {
                continue;
            }
            let j = nn[i];
            let (lo, hi) = (i.min(j), i.max(j));
            let v = at(&dm, i, j);
            let better = match pick {
                None => true,
                Some((bv, bi, bj)) => v < bv || (v == bv && (lo, hi) < (bi, bj)),
            };
            if better {
                pick = Some((v, lo, hi));
            }
        }
        let (v, a, b) = pick.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        let dab = v;
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (dak, dbk) = (at(&dm, a, k), at(&dm, b, k));
            let nk = size[k] as f64;
            let new = match method {
                Linkage::Ward => ((na + nk) * dak + (nb + nk) * dbk - nk * dab) / (na + nb + nk),
                Linkage::Complete => dak.max(dbk),
                Linkage::Single => dak.min(dbk),
                Linkage::Average => (na * dak + nb * dbk) / (na + nb),
            };
            dm[a * n + k] = new;
            dm[k * n + a] = new;
        }
        active[b] = false;
        merges.push(Merge {
            a: id[a].min(id[b]),
            b: id[a].max(id[b]),
            cost: if squared { dab.max(0.0).sqrt() } else { dab },
            size: size[a] + size[b],
        });
        size[a] += size[b];
        id[a] = n + step;

        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == a || nn[k] == a || nn[k] == b {
                nn[k] = nearest(&dm, &active, k);
            } else {
                let cur = at(&dm, k, nn[k]);
                let cand = at(&dm, k, a);
                if cand < cur || (cand == cur && a < nn[k]) {
                    nn[k] = a;
                }
            }
        }
    }
    merges
}

/// Cluster index per date after replaying the first `n − k` merges.
/// Clusters are numbered by their smallest member.
pub fn cut_tree(n: usize, merges: &[Merge], k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for (s, m) in merges.iter().take(n.saturating_sub(k)).enumerate() {
        let new = n + s;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = new;
        parent[rb] = new;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut number: BTreeMap<usize, usize> = BTreeMap::new();
    roots
        .iter()
        .map(|r| {
            let next = number.len();
            *number.entry(*r).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    pub dates: Vec<NaiveDate>,
    /// Cluster index per date; 0 has the highest mean 27-day RND variance.
    pub labels: Vec<usize>,
    pub names: Vec<String>,
    pub merges: Vec<Merge>,
    pub k: usize,
    pub linkage: Linkage,
}

impl RegimeModel {
    pub fn label_of(&self, i: usize) -> &str {
        &self.names[self.labels[i]]
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

pub fn cluster_names(k: usize) -> Vec<String> {
    match k {
        1 => vec!["ALL".into()],
        2 => vec!["HV".into(), "LV".into()],
        _ => (0..k).map(|i| format!("C{i}")).collect(),
    }
}

/// Cluster and order clusters by decreasing mean of `variance27`.
pub fn ward_cluster(d: &DistanceMatrix, k: usize, variance27: &[f64]) -> Result<RegimeModel> {
    cluster_with(d, k, variance27, Linkage::Ward)
}

pub fn cluster_with(d: &DistanceMatrix, k: usize, variance27: &[f64], method: Linkage) -> Result<RegimeModel> {
    let n = d.len();
    if !(k >= 1 && k <= n) {
        return Err(Error::InvalidInput(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if variance27.len() != n {
        return Err(Error::InvalidInput(format!("{} variances for {n} dates", variance27.len())));
    }
    let merges = linkage(d, method);
    let raw = cut_tree(n, &merges, k);
    let mut sums = vec![(0.0, 0usize); k];
    for (c, v) in raw.iter().zip(variance27) {
        sums[*c].0 += v;
        sums[*c].1 += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| {
        let (mx, my) = (sums[x].0 / sums[x].1 as f64, sums[y].0 / sums[y].1 as f64);
        my.total_cmp(&mx).then(x.cmp(&y))
    });
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    Ok(RegimeModel {
        dates: d.dates.clone(),
        labels: raw.iter().map(|c| rank[*c]).collect(),
        names: cluster_names(k),
        merges,
        k,
        linkage: method,
    })
}

/// Share of date pairs on which two partitions agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// First two coordinates per date.
    pub coords: Vec<[f64; 2]>,
    /// All eigenvalues of the double-centred matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub explained: [f64; 2],
    /// Set when a negative eigenvalue exceeds tolerance.
    pub non_euclidean: bool,
}

/// Classical multidimensional scaling of `D`.
pub fn pca_embedding(d: &DistanceMatrix) -> Result<Embedding> {
    let n = d.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &j * d2 * &j;
    let b = 0.5 * (&b + b.transpose());
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lead = eigenvalues[0].abs().max(f64::MIN_POSITIVE);
    let non_euclidean = eigenvalues.iter().any(|&l| l < -1e-8 * lead);
    if non_euclidean {
        log::warn!("distance matrix is not Euclidean; embedding is approximate");
    }
    let mut coords = vec![[0.0; 2]; n];
    for c in 0..2 {
        let lambda = eigenvalues[c].max(0.0);
        let v = eig.eigenvectors.column(order[c]);
        let pivot = (0..n).max_by(|&x, &y| v[x].abs().total_cmp(&v[y].abs()).then(y.cmp(&x))).expect("n >= 3");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][c] = sign * v[i] * lambda.sqrt();
        }
    }
    let positive: f64 = eigenvalues.iter().filter(|l| **l > 0.0).sum();
    let share = |l: f64| if positive > 0.0 { l.max(0.0) / positive } else { 0.0 };
    Ok(Embedding {
        coords,
        explained: [share(eigenvalues[0]), share(eigenvalues[1])],
        eigenvalues,
        non_euclidean,
    })
}

/// Columns rescaled to zero mean and unit sample variance.
pub fn standardize(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    let p = rows[0].len();
    let mut out = rows.to_vec();
    for c in 0..p {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var.sqrt() > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVarianceFeature(c));
        }
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[c] = (r[c] - mean) / sd;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one per feature.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    /// McFadden: `1 − ℓ/ℓ₀`.
    pub pseudo_r2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Perfect or quasi-complete separation suspected.
    pub separation: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bernoulli_loglik(y: &[bool], p: &[f64]) -> f64 {
    y.iter()
        .zip(p)
        .map(|(&yi, &pi)| if yi { pi.max(1e-300).ln() } else { (1.0 - pi).max(1e-300).ln() })
        .sum()
}

/// Maximum-likelihood logistic regression with intercept, by IRLS.
pub fn logistic_regression(y: &[bool], features: &[Vec<f64>]) -> Result<LogisticFit> {
    let n = y.len();
    if features.len() != n {
        return Err(Error::InvalidInput(format!("{} feature rows for {n} labels", features.len())));
    }
    let positives = y.iter().filter(|v| **v).count();
    if positives < 2 || n - positives < 2 {
        return Err(Error::DegenerateGroups(format!("{positives} positives out of {n}")));
    }
    let p = features.first().map_or(0, Vec::len);
    for c in 0..p {
        let first = features[0][c];
        if features.iter().all(|r| r[c] == first) {
            return Err(Error::ZeroVarianceFeature(c));
        }
    }
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let yv = DVector::from_iterator(n, y.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    let mut beta = DVector::<f64>::zeros(p + 1);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::<f64>::identity(p + 1, p + 1);
    for it in 1..=MAX_IRLS_ITERATIONS {
        iterations = it;
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let mut xtwx = DMatrix::<f64>::zeros(p + 1, p + 1);
        for i in 0..n {
            let row = x.row(i);
            xtwx += w[i] * row.transpose() * row;
        }
        let grad = x.transpose() * (&yv - &mu);
        info = xtwx.clone();
        let step = match xtwx.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match xtwx.svd(true, true).solve(&grad, 1e-14) {
                Ok(s) => s,
                Err(_) => break,
            },
        };
        beta += &step;
        if step.amax() < 1e-10 * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
    }
    let mu: Vec<f64> = (&x * &beta).iter().map(|&z| sigmoid(z)).collect();
    let ll = bernoulli_loglik(y, &mu);
    let pbar = positives as f64 / n as f64;
    let ll0 = n as f64 * (pbar * pbar.ln() + (1.0 - pbar) * (1.0 - pbar).ln());
    let fitted_extreme = mu.iter().all(|&m| !(1e-8..=1.0 - 1e-8).contains(&m));
    let separation = !converged || fitted_extreme;
    if separation {
        log::warn!("logistic fit: separation suspected after {iterations} iterations");
    }
    let std_errors = match info.clone().cholesky() {
        Some(ch) => ch.inverse().diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        None => vec![f64::INFINITY; p + 1],
    };
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        log_likelihood: ll,
        null_log_likelihood: ll0,
        pseudo_r2: (1.0 - ll / ll0).clamp(0.0, 1.0),
        iterations,
        converged,
        separation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub feature_names: Vec<String>,
    pub logistic: Option<LogisticFit>,
    pub embedding: Option<Embedding>,
    pub anova: BTreeMap<String, AnovaResult>,
}

pub const MOMENT_FEATURES: [&str; 4] = ["mean", "variance", "skewness", "kurtosis"];

/// Logistic fit of membership in cluster 0 on standardized RND moments.
pub fn logistic_diagnostics(model: &RegimeModel, moments: &[[f64; 4]]) -> Result<LogisticFit> {
    let y: Vec<bool> = model.labels.iter().map(|&l| l == 0).collect();
    let rows: Vec<Vec<f64>> = moments.iter().map(|m| m.to_vec()).collect();
    logistic_regression(&y, &standardize(&rows)?)
}

/// Per-date inputs to cluster-conditional premia.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDay {
    pub date: NaiveDate,
    pub q27: DensityGrid,
    pub realized_variance: f64,
    pub bvix: f64,
    pub rf: f64,
    pub bounds: LowerBounds,
}

/// Everything computed for one conditioning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSet {
    pub report: PremiaReport,
    pub curve: DecompositionCurve,
    pub kernel: PricingKernelCurve,
    pub p: DensityGrid,
    pub q: DensityGrid,
}

fn set_for(label: &str, days: &[&RegimeDay], returns: &[f64], overall_rv: f64, n_bins: usize, intervals: &[(f64, f64)]) -> Result<ConditionalSet> {
    if days.is_empty() {
        return Err(Error::EmptyCluster(label.to_string()));
    }
    let qs: Vec<DensityGrid> = days.iter().map(|d| d.q27.clone()).collect();
    let q = average_density(&qs)?;
    let rv: Vec<f64> = days.iter().map(|d| d.realized_variance).collect();
    let cluster_rv = rv.iter().sum::<f64>() / rv.len() as f64;
    let scaled = conditional_rescaled_returns(returns, cluster_rv, overall_rv)?;
    let p = assemble_physical(&scaled, n_bins, &q.grid, q.tenor_days)?.density_grid();
    let inputs = PremiaInputs {
        rates: days.iter().map(|d| d.rf).collect(),
        bvix: days.iter().map(|d| d.bvix).collect(),
        realized_variance: rv,
        bounds: days.iter().map(|d| d.bounds).collect(),
    };
    let (report, curve, kernel) = premia_report(label, &p, &q, &inputs, intervals)?;
    Ok(ConditionalSet { report, curve, kernel, p, q })
}

/// Unconditional set followed by one set per cluster, plus ANOVA across
/// clusters for `σ²_Q`, `σ²_P` and BVRP.
pub fn conditional_reports(
    model: &RegimeModel,
    days: &[RegimeDay],
    returns: &[f64],
    n_bins: usize,
    intervals: &[(f64, f64)],
) -> Result<(Vec<ConditionalSet>, BTreeMap<String, AnovaResult>)> {
    if days.len() != model.labels.len() {
        return Err(Error::InvalidInput(format!("{} days for {} labels", days.len(), model.labels.len())));
    }
    let all: Vec<&RegimeDay> = days.iter().collect();
    let overall_rv = days.iter().map(|d| d.realized_variance).sum::<f64>() / days.len().max(1) as f64;
    let mut sets = vec![set_for("overall", &all, returns, overall_rv, n_bins, intervals)?];
    let mut groups: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for c in 0..model.k {
        let members: Vec<&RegimeDay> = model.members(c).into_iter().map(|i| &days[i]).collect();
        sets.push(set_for(&model.names[c], &members, returns, overall_rv, n_bins, intervals)?);
        let s2q: Vec<f64> = members.iter().map(|d| (d.bvix / 100.0).powi(2)).collect();
        let s2p: Vec<f64> = members.iter().map(|d| d.realized_variance).collect();
        let vrp: Vec<f64> = s2q.iter().zip(&s2p).map(|(a, b)| a - b).collect();
        groups.entry("sigma2_q").or_default().push(s2q);
        groups.entry("sigma2_p").or_default().push(s2p);
        groups.entry("bvrp").or_default().push(vrp);
    }
    let mut anova = BTreeMap::new();
    if model.k >= 2 {
        for (name, g) in groups {
            match anova_oneway(&g) {
                Ok(r) => {
                    anova.insert(name.to_string(), r);
                }
                Err(e) => log::warn!("ANOVA for {name} skipped: {e}"),
            }
        }
    }
    Ok((sets, anova))
}

pub fn write_labels<W: Write>(model: &RegimeModel, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "label"])?;
    for (i, d) in model.dates.iter().enumerate() {
        wtr.write_record([d.format("%Y-%m-%d").to_string(), model.label_of(i).to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_labels<R: std::io::Read>(r: R) -> Result<Vec<(NaiveDate, String)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["date", "label"] {
        return Err(Error::MalformedHeader(header.join(",")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = crate::market_data::parse_date(&rec[0]).ok_or_else(|| Error::Validation(format!("bad date '{}'", &rec[0])))?;
        out.push((date, rec[1].to_string()));
    }
    Ok(out)
}

pub fn write_dendrogram<W: Write>(merges: &[Merge], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "a", "b", "cost"])?;
    for (s, m) in merges.iter().enumerate() {
        wtr.write_record([s.to_string(), m.a.to_string(), m.b.to_string(), format!("{:e}", m.cost)])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ReturnGrid;

    fn date(i: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Duration::days(i)
    }

    fn euclid(points: &[[f64; 2]]) -> DistanceMatrix {
        let pts = points.to_vec();
        DistanceMatrix::from_fn((0..pts.len() as i64).map(date).collect(), move |i, j| {
            ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt()
        })
    }

    #[test]
    fn trapezoid_weights() {
        let w = tenor_weights(&[9, 27, 45], TenorWeighting::Trapezoid);
        assert_eq!(w, vec![0.25, 0.5, 0.25]);
        let u = tenor_weights(&[9, 27, 45], TenorWeighting::Uniform);
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(tenor_weights(&[27], TenorWeighting::Trapezoid), vec![1.0]);
    }

    fn clr(grid: ReturnGrid, f: impl Fn(f64) -> f64) -> ClrFunction {
        ClrFunction {
            grid,
            values: grid.points().into_iter().map(f).collect(),
        }
    }

    #[test]
    fn constant_shift_on_one_tenor() {
        let g = ReturnGrid::new(-0.5, 0.5, 0.01).unwrap();
        let base = |r: f64| r * r;
        let mut panel = ClrPanel::new();
        for (i, shift) in [(0, 0.0), (1, 0.3)] {
            let mut m = BTreeMap::new();
            m.insert(9, clr(g, base));
            m.insert(27, clr(g, move |r| base(r) + shift));
            m.insert(45, clr(g, base));
            panel.insert(date(i), m);
        }
        let (d, excluded) = multivariate_distance(&panel, &DEFAULT_TENORS, TenorWeighting::Trapezoid).unwrap();
        assert!(excluded.is_empty());
        assert_eq!(d.get(0, 0), 0.0);
        let expected = 0.3 * (0.5 * g.range()).sqrt();
        assert!((d.get(0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn dates_missing_a_tenor_are_excluded() {
        let g = ReturnGrid::new(-0.5, 0.5, 0.01).unwrap();
        let mut panel = ClrPanel::new();
        let full: BTreeMap<u32, ClrFunction> = DEFAULT_TENORS.iter().map(|&t| (t, clr(g, |r| r))).collect();
        panel.insert(date(0), full.clone());
        panel.insert(date(1), full);
        let mut partial = BTreeMap::new();
        partial.insert(9, clr(g, |r| r));
        panel.insert(date(2), partial);
        let (d, excluded) = multivariate_distance(&panel, &DEFAULT_TENORS, TenorWeighting::Trapezoid).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(excluded, vec![date(2)]);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let g1 = ReturnGrid::new(-0.5, 0.5, 0.01).unwrap();
        let g2 = ReturnGrid::new(-0.5, 0.5, 0.02).unwrap();
        let mut panel = ClrPanel::new();
        panel.insert(date(0), [(27, clr(g1, |r| r))].into_iter().collect());
        panel.insert(date(1), [(27, clr(g2, |r| r))].into_iter().collect());
        assert!(multivariate_distance(&panel, &[27], TenorWeighting::Trapezoid).is_err());
    }

    #[test]
    fn ward_on_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push([i as f64 * 0.1, 0.0]);
            pts.push([10.0 + i as f64 * 0.1, 0.0]);
        }
        let d = euclid(&pts);
        let var: Vec<f64> = pts.iter().map(|p| if p[0] > 5.0 { 2.0 } else { 1.0 }).collect();
        let m = ward_cluster(&d, 2, &var).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(m.label_of(i), if p[0] > 5.0 { "HV" } else { "LV" });
        }
        for w in m.merges.windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-12);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let d = euclid(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]);
        let m = ward_cluster(&d, 3, &[1.0, 2.0, 3.0]).unwrap();
        let mut l = m.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2]);
        assert!(ward_cluster(&d, 4, &[1.0; 3]).is_err());
    }

    #[test]
    fn ward_two_point_height() {
        let d = euclid(&[[0.0, 0.0], [3.0, 4.0]]);
        let m = linkage(&d, Linkage::Ward);
        assert_eq!(m.len(), 1);
        assert!((m[0].cost - 5.0).abs() < 1e-12);
    }

    #[test]
    fn alternative_linkages_run() {
        let d = euclid(&[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [6.0, 0.0]]);
        for method in [Linkage::Complete, Linkage::Single, Linkage::Average] {
            let m = cluster_with(&d, 2, &[1.0, 1.0, 2.0, 2.0], method).unwrap();
            assert_eq!(m.labels, vec![1, 1, 0, 0]);
        }
        let single = linkage(&d, Linkage::Single);
        assert!((single[2].cost - 4.0).abs() < 1e-12);
        let complete = linkage(&d, Linkage::Complete);
        assert!((complete[2].cost - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rand_index_cases() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!((rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn equilateral_embedding() {
        let d = DistanceMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let e = pca_embedding(&d).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let c = (e.coords[i][0] - e.coords[j][0]).hypot(e.coords[i][1] - e.coords[j][1]);
                assert!((c - d.get(i, j)).abs() < 1e-8);
            }
        }
        assert!(e.explained[0] >= e.explained[1]);
    }

    #[test]
    fn embedding_sign_convention() {
        let d = euclid(&[[0.0, 0.0], [1.0, 0.0], [3.0, 1.0], [-2.0, 0.5]]);
        let e = pca_embedding(&d).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = e.coords.iter().map(|p| p[c]).collect();
            let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big > 0.0);
        }
        assert!(pca_embedding(&euclid(&[[0.0, 0.0], [1.0, 0.0]])).is_err());
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 4.0]];
        assert!(matches!(standardize(&rows), Err(Error::ZeroVarianceFeature(0))));
        let ok = standardize(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!((ok[0][0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn logistic_separation_is_flagged() {
        let y = [false, false, false, true, true, true];
        let x: Vec<Vec<f64>> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0].iter().map(|v| vec![*v]).collect();
        let fit = logistic_regression(&y, &x).unwrap();
        assert!(fit.separation);
        assert!(fit.iterations <= MAX_IRLS_ITERATIONS);
    }

    #[test]
    fn logistic_null_feature() {
        // Feature balanced across classes: slope 0, pseudo-R² 0.
        let y = [true, false, true, false, true, false, true, false];
        let x: Vec<Vec<f64>> = [1.0, 1.0, -1.0, -1.0, 2.0, 2.0, -2.0, -2.0].iter().map(|v| vec![*v]).collect();
        let fit = logistic_regression(&y, &x).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[1].abs() < 1e-10);
        assert!(fit.pseudo_r2 < 1e-10);
    }
}
