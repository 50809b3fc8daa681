//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use bitcoin_premia::grid::ReturnGrid;
use bitcoin_premia::market_data::Side;
use bitcoin_premia::physical::assemble_physical;
use bitcoin_premia::pipeline::{run_all, run_stage, PipelineConfig, Stage};
use bitcoin_premia::premia::{bp_decomposition, bvix, mean_p, pricing_kernel, anova_oneway, ExpiryChain, StrikeQuote, PK_FLOOR};
use bitcoin_premia::regimes::{linkage, logistic_regression, pca_embedding, read_labels, DistanceMatrix, Linkage};
use bitcoin_premia::rnd::{extract_rnd, DensityGrid};
use bitcoin_premia::synth::{synth_market, SynthConfig};
use bitcoin_premia::vol_surface::{fit_svi, svi_total_variance, IvCurve, SviParams};
use bitcoin_premia::{bs, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_grid() -> ReturnGrid {
    ReturnGrid::new(-0.99, 4.0, 1e-3).unwrap()
}

fn rnd_oracle() -> Check {
    let (vol, rf, spot) = (0.8, 0.02, 40_000.0);
    let grid = default_grid();
    let mut worst_sup: f64 = 0.0;
    let mut worst_martingale: f64 = 0.0;
    for tenor in [9.0, 27.0, 45.0] {
        let q = extract_rnd(&IvCurve::flat(vol, tenor, &grid), spot, rf, tenor).map_err(|e| e.to_string())?;
        let tau = tenor / 365.0;
        let pts = grid.points();
        for (r, v) in pts.iter().zip(&q.values) {
            worst_sup = worst_sup.max((v - common::bs_return_pdf(*r, rf, vol, tau)).abs());
        }
        let gross: Vec<f64> = pts.iter().zip(&q.values).map(|(r, v)| (1.0 + r) * v).collect();
        worst_martingale = worst_martingale.max((grid.integrate(&gross) - (rf * tau).exp()).abs());
    }
    verdict(
        worst_sup < 1e-3 && worst_martingale < 1e-3,
        format!("sup error {worst_sup:.2e} (< 1e-3), martingale error {worst_martingale:.2e} (< 1e-3)"),
    )
}

fn svi_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    while cases.len() < 50 {
        let draw = SviParams::new(
            rng.random_range(0.01..0.5),
            rng.random_range(0.05..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.2..0.3),
            rng.random_range(0.05..0.5),
        );
        if let Ok(p) = draw {
            cases.push(p);
        }
    }
    let mut good = 0;
    let mut worst_param: f64 = 0.0;
    for truth in &cases {
        let pts: Vec<(f64, f64)> = (0..25)
            .map(|i| {
                let r = -0.5 + 1.5 * i as f64 / 24.0;
                (r, svi_total_variance(r, truth))
            })
            .collect();
        let Ok(curve) = fit_svi(&pts, 27) else { continue };
        let err = curve
            .params
            .as_array()
            .iter()
            .zip(truth.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_param = worst_param.max(err);
        if err < 1e-3 && curve.fit_rmse < 1e-6 {
            good += 1;
        }
    }
    verdict(good >= 48, format!("{good}/50 recovered (>= 48); worst parameter error {worst_param:.2e}"))
}

fn flat_chain(spot: f64, vol: f64, rf: f64, tenor_days: f64, spacing: f64) -> ExpiryChain {
    let tau = tenor_days / 365.0;
    let n = (8.0 * spot / spacing).round() as usize;
    ExpiryChain {
        tenor_days,
        spot,
        strikes: (1..=n)
            .map(|i| {
                let k = spacing * i as f64;
                StrikeQuote {
                    strike: k,
                    call: Some(bs::price(Side::Call, spot, k, rf, tau, vol)),
                    put: Some(bs::price(Side::Put, spot, k, rf, tau, vol)),
                }
            })
            .collect(),
    }
}

fn bvix_convergence() -> Check {
    let (spot, vol, rf) = (100.0, 0.8, 0.01);
    let mut errors = Vec::new();
    for spacing in [10.0, 5.0, 2.5] {
        let chains = [flat_chain(spot, vol, rf, 21.0, spacing), flat_chain(spot, vol, rf, 35.0, spacing)];
        let idx = bvix(&chains, 27.0, rf).map_err(|e| e.to_string())?;
        errors.push((idx.index - 100.0 * vol).abs());
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let shrinking = ratios.iter().all(|&r| r >= 1.7);
    let last = *errors.last().expect("three spacings");
    verdict(
        shrinking && last < 1.0,
        format!(
            "errors {:.3}/{:.3}/{:.3} vol points at spacing 10/5/2.5, reduction ratios {:.2}/{:.2} (>= 1.7), final < 1",
            errors[0], errors[1], errors[2], ratios[0], ratios[1]
        ),
    )
}

fn physical_sample() -> Vec<f64> {
    // Seed fixed before the first run; not tuned.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let normal = Normal::new(0.05, 0.22).unwrap();
    (0..50_000).map(|_| normal.sample(&mut rng)).collect()
}

fn physical_oracle() -> Check {
    let sample = physical_sample();
    let grid = default_grid();
    let pd = assemble_physical(&sample, 12, &grid, 27.0).map_err(|e| e.to_string())?;
    let sup = grid
        .points()
        .iter()
        .zip(&pd.values)
        .filter(|(r, _)| (-0.6..=0.8).contains(*r))
        .map(|(r, v)| (v - common::normal_pdf(*r, 0.05, 0.22)).abs())
        .fold(0.0, f64::max);
    let mass = grid.integrate(&pd.values);
    let gap = pd.knot_gap();

    let rf = 0.01;
    let bp_for = |bins: usize| -> Result<f64, String> {
        let p = assemble_physical(&sample, bins, &grid, 27.0).map_err(|e| e.to_string())?;
        Ok(mean_p(&p.density_grid()) - rf)
    };
    let base = bp_for(12)?;
    let mut worst_rel: f64 = 0.0;
    for bins in 8..=13 {
        worst_rel = worst_rel.max(((bp_for(bins)? - base) / base).abs());
    }
    verdict(
        sup < 2e-2 && gap < 1e-6 && (mass - 1.0).abs() < 1e-3 && worst_rel < 0.10,
        format!(
            "sup error {sup:.4} (< 2e-2), knot gap {gap:.1e} (< 1e-6), mass {mass:.6}, BP spread over 8..13 bins {:.2}% (< 10%)",
            100.0 * worst_rel
        ),
    )
}

fn lognormal(grid: &ReturnGrid, drift: f64, vol: f64, tenor: f64) -> DensityGrid {
    let tau = tenor / 365.0;
    let values = grid
        .points()
        .iter()
        .map(|&r| common::bs_return_pdf(r, drift, vol, tau))
        .collect();
    DensityGrid::from_values(*grid, values, tenor).unwrap()
}

fn decomposition_identities() -> Check {
    let grid = default_grid();
    let physical = assemble_physical(&physical_sample(), 12, &grid, 27.0)
        .map_err(|e| e.to_string())?
        .density_grid();
    let flat_q = extract_rnd(&IvCurve::flat(0.8, 27.0, &grid), 100.0, 0.01, 27.0).map_err(|e| e.to_string())?;
    let fixtures = [
        ("lognormal up", lognormal(&grid, 0.6, 0.8, 27.0), lognormal(&grid, 0.01, 0.9, 27.0)),
        ("lognormal down", lognormal(&grid, -0.3, 0.6, 27.0), lognormal(&grid, 0.01, 0.7, 27.0)),
        ("physical vs flat", physical, flat_q),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, p, q) in &fixtures {
        let curve = bp_decomposition(p, q).map_err(|e| format!("{name}: {e}"))?;
        let first = curve.values[0];
        let last = *curve.values.last().expect("nonempty");
        let com = pricing_kernel(p, q, PK_FLOOR).map_err(|e| e.to_string())?.change_of_measure(p);
        ok &= first.abs() < 1e-3 && (last - 1.0).abs() < 1e-3 && (com - 1.0).abs() < 1e-3;
        notes.push(format!("{name}: BP(min) {first:.1e}, BP(max) {last:.6}, int PK p {com:.6}"));
    }
    let p = &fixtures[0].1;
    let degenerate = matches!(bp_decomposition(p, p), Err(Error::DegeneratePremium(_)));
    let pk = pricing_kernel(p, p, PK_FLOOR).map_err(|e| e.to_string())?;
    let unit = pk.values.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12) && pk.values.iter().any(Option::is_some);
    ok &= degenerate && unit;
    notes.push(format!("p = q: degenerate flagged {degenerate}, PK == 1 {unit}"));
    verdict(ok, notes.join("; "))
}

fn synth_config_file(dir: &Path) -> PipelineConfig {
    let data = dir.join("data");
    synth_market(&SynthConfig::two_regimes(30, 0.02)).unwrap().write_to(&data).unwrap();
    PipelineConfig {
        quotes: data.join("quotes.csv"),
        spots: data.join("spots.csv"),
        rates: data.join("rates.csv"),
        out_dir: dir.join("out"),
        ..PipelineConfig::default()
    }
}

fn clustering() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = synth_config_file(dir.path());
    for stage in [Stage::Ingest, Stage::FitSurface, Stage::Rnd, Stage::Cluster] {
        run_stage(stage, &cfg).map_err(|e| format!("{stage}: {e}"))?;
    }
    let labels = read_labels(std::fs::File::open(cfg.out_dir.join("labels.csv")).unwrap()).map_err(|e| e.to_string())?;
    let planted: std::collections::BTreeMap<String, usize> = csv::Reader::from_path(dir.path().join("data/regimes.csv"))
        .unwrap()
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    let found: Vec<usize> = labels.iter().map(|(_, l)| usize::from(l != "HV")).collect();
    let truth: Vec<usize> = labels.iter().map(|(d, _)| planted[&d.format("%Y-%m-%d").to_string()]).collect();
    let ri = common::rand_index(&found, &truth);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    let trials = 300;
    for t in 0..trials {
        let n = 2 + t % 5;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d = DistanceMatrix::from_rows(&common::euclidean_matrix(&pts)).unwrap();
        let merges = linkage(&d, Linkage::Ward);
        let ours = common::merge_sets(n, &merges.iter().map(|m| (m.a, m.b)).collect::<Vec<_>>());
        let oracle = common::ward_by_enumeration(&pts);
        let same = ours.iter().zip(&merges).zip(&oracle).all(|(((a, b), m), (oa, ob, h))| {
            let pair: BTreeSet<&BTreeSet<usize>> = [a, b].into();
            let opair: BTreeSet<&BTreeSet<usize>> = [oa, ob].into();
            pair == opair && (m.cost - h).abs() <= 1e-9 * h.max(1.0)
        });
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        ri >= 0.95 && mismatches == 0 && labels.len() == 60,
        format!(
            "Rand index {ri:.3} over {} dates (>= 0.95); Ward merge order mismatches {mismatches}/{trials} for n <= 6",
            labels.len()
        ),
    )
}

fn diagnostics() -> Check {
    // Logistic: one binary covariate, 1/4 positives in group 0 and 3/4 in group 1.
    let x = [false, false, false, false, true, true, true, true];
    let y = [true, false, false, false, true, true, true, false];
    let features: Vec<Vec<f64>> = x.iter().map(|&v| vec![if v { 1.0 } else { 0.0 }]).collect();
    let fit = logistic_regression(&y, &features).map_err(|e| e.to_string())?;
    let (coef, se) = common::logistic_binary_covariate(&x, &y);
    let logit_err = (0..2)
        .map(|i| (fit.coefficients[i] - coef[i]).abs().max((fit.std_errors[i] - se[i]).abs()))
        .fold(0.0, f64::max);

    // ANOVA: means 5, 9, 10; SSB = 84, SSW = 68, F = 42 / (68/15) = 315/34.
    let groups = vec![
        vec![6.0, 8.0, 4.0, 5.0, 3.0, 4.0],
        vec![8.0, 12.0, 9.0, 11.0, 6.0, 8.0],
        vec![13.0, 9.0, 11.0, 8.0, 7.0, 12.0],
    ];
    let a = anova_oneway(&groups).map_err(|e| e.to_string())?;
    let anova_ok = a.ss_between == 84.0 && a.ss_within == 68.0 && (a.f - 315.0 / 34.0).abs() < 1e-12 && a.df_between == 2 && a.df_within == 15;
    // With two numerator degrees of freedom the upper tail is (1 + 2F/d2)^(-d2/2).
    let p_exact = (1.0 + 2.0 * a.f / 15.0).powf(-7.5);
    let p_err = (a.p_value - p_exact).abs();

    // PCA: planar points must be reproduced up to a rigid motion.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)]).collect();
    let dm = common::euclidean_matrix(&pts);
    let emb = pca_embedding(&DistanceMatrix::from_rows(&dm).unwrap()).map_err(|e| e.to_string())?;
    let mut pca_err: f64 = 0.0;
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let (a, b) = (emb.coords[i], emb.coords[j]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            pca_err = pca_err.max((d - dm[i][j]).abs());
        }
    }
    verdict(
        logit_err < 1e-6 && anova_ok && p_err < 1e-12 && pca_err < 1e-6,
        format!(
            "logistic max error {logit_err:.1e} (< 1e-6); ANOVA F {:.6} exact {anova_ok}, p error {p_err:.1e}; PCA distance error {pca_err:.1e} (< 1e-6)",
            a.f
        ),
    )
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = synth_config_file(dir.path());
        run_all(&cfg).map_err(|e| e.to_string())?;
        let manifest = std::fs::read(cfg.out_dir.join("manifest.json")).unwrap();
        runs.push((manifest, tree_bytes(&cfg.out_dir.join("report")), tree_bytes(&cfg.out_dir)));
    }
    let manifest_same = runs[0].0 == runs[1].0;
    let reports_same = runs[0].1 == runs[1].1;
    let all_same = runs[0].2 == runs[1].2;
    verdict(
        manifest_same && reports_same && all_same && !runs[0].1.is_empty(),
        format!(
            "manifest identical {manifest_same}, {} report files identical {reports_same}, all {} artifacts identical {all_same}",
            runs[0].1.len(),
            runs[0].2.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check, Option<f64>); 8] = [
        ("rnd_oracle", rnd_oracle, Some(5.0)),
        ("svi_recovery", svi_recovery, Some(60.0)),
        ("bvix_convergence", bvix_convergence, Some(10.0)),
        ("physical_density_oracle", physical_oracle, None),
        ("decomposition_identities", decomposition_identities, None),
        ("clustering", clustering, None),
        ("diagnostics_oracles", diagnostics, None),
        ("end_to_end_determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let over = budget.is_some_and(|b| secs >= b);
        let (ok, detail) = match outcome {
            Ok(d) => (!over, d),
            Err(d) => (false, d),
        };
        let limit = budget.map_or(String::new(), |b| format!(", limit {b:.0}s"));
        println!("{} {name}: {detail} [{secs:.2}s{limit}]", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
