//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Each criterion also has a wall-clock budget.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use microstat::decontam::{call_contaminants, DecontamSettings};
use microstat::genmodel::{fit_nb, gof_all, simulate, GofOptions, LibraryModel, SimGroup, SimScenario, SimTaxon};
use microstat::ingest::write_count_table;
use microstat::ordination::{correspondence_analysis, pcoa, unifrac, DistanceMatrix, UnifracVariant};
use microstat::permtest::strain_switch_power;
use microstat::rng::{self, StatRng};
use microstat::special::{ln_gamma, sample_dirichlet, sample_multinomial, sample_nb};
use microstat::topics::{differential_topics, fit_lda, greedy_matching, pearson, split_rhat, CollapsedGibbs, LdaSpec};
use microstat::transforms::{anscombe_value, median_of_ratios};
use microstat::{parse_newick, CountTable};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome detail; `Err` means the criterion failed.
type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn nb_gof_calibration() -> Outcome {
    let n = 60;
    let mut r = rng::stream(101, 0);
    let base_taxa: Vec<SimTaxon> = (0..500)
        .map(|i| SimTaxon {
            id: format!("asv{i:03}"),
            mu: (r.random_range(2f64.ln()..500f64.ln())).exp(),
            k: r.random_range(0.5..20.0),
            fold_change: 1.0,
            contamination: 0.0,
        })
        .collect();
    let scenario = |taxa: Vec<SimTaxon>, seed: u64| SimScenario {
        groups: vec![SimGroup { name: "all".into(), n }],
        taxa,
        library: LibraryModel::Fixed { size_factor: 1.0 },
        n_controls: 0,
        control_size_factor: 1.0,
        switch_pairs: vec![],
        switch_fraction: None,
        seed,
    };
    let base = simulate(&scenario(base_taxa, 102)).map_err(|e| e.to_string())?;
    let ones = vec![1.0; n];
    let mut fitted = Vec::new();
    for (i, id) in base.counts.taxa_ids().iter().enumerate() {
        let Ok(fit) = fit_nb(base.counts.row(i), &ones) else { continue };
        fitted.push(SimTaxon {
            id: id.clone(),
            mu: fit.params.mu,
            k: fit.params.k,
            fold_change: 1.0,
            contamination: 0.0,
        });
    }
    if fitted.len() != 500 {
        return Err(format!("only {} of 500 base taxa could be fitted", fitted.len()));
    }
    let ds = simulate(&scenario(fitted, 103)).map_err(|e| e.to_string())?;
    let report = gof_all(&ds, 1000, 104, GofOptions::default()).map_err(|e| e.to_string())?;
    let rejected = report.results.iter().filter(|g| g.p_adjusted < 0.05).count();
    let failed = report.results.iter().filter(|g| g.p_value.is_nan()).count();
    let frac = rejected as f64 / report.results.len() as f64;
    check(frac <= 0.01 && failed == 0, format!("{rejected}/500 rejected at BH 0.05 ({frac:.3}), {failed} unfitted"))
}

// ---------------------------------------------------------------- 2

fn anscombe_stabilizes_variance() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for (a, k) in [3.0, 5.0, 10.0, 25.0].into_iter().enumerate() {
        for (b, mu) in [20.0, 100.0].into_iter().enumerate() {
            let mut r = rng::stream(201, (a * 2 + b) as u64);
            let y: Vec<f64> = (0..100_000).map(|_| anscombe_value(sample_nb(&mut r, mu, k) as f64, k)).collect();
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
            let ratio = var / (1.0 / (4.0 * (k - 0.5)));
            worst = worst.max((ratio - 1.0).abs());
            cells.push(format!("{ratio:.3}"));
        }
    }
    check(worst <= 0.15, format!("variance/target {} (max deviation {:.1}%)", cells.join(" "), 100.0 * worst))
}

// ---------------------------------------------------------------- 3

fn planted_contaminants() -> Outcome {
    let mut r = rng::stream(301, 0);
    let mut taxa: Vec<SimTaxon> = (0..30)
        .map(|i| SimTaxon {
            id: format!("R{i:02}"),
            mu: r.random_range(30.0..300.0),
            k: 5.0,
            fold_change: 1.0,
            // A third of the real taxa also leak into the controls.
            contamination: if i % 3 == 0 { 0.5 } else { 0.0 },
        })
        .collect();
    taxa.extend((0..10).map(|i| SimTaxon {
        id: format!("C{i:02}"),
        mu: 0.0,
        k: 1.0,
        fold_change: 1.0,
        contamination: r.random_range(5.0..20.0),
    }));
    let ds = simulate(&SimScenario {
        groups: vec![SimGroup { name: "all".into(), n: 20 }],
        taxa,
        library: LibraryModel::NegativeBinomial { mean: 1.0, k: 20.0 },
        n_controls: 5,
        control_size_factor: 1.0,
        switch_pairs: vec![],
        switch_fraction: None,
        seed: 302,
    })
    .map_err(|e| e.to_string())?;
    let res = call_contaminants(&ds, &DecontamSettings::default(), 303).map_err(|e| e.to_string())?;
    let (mut tp, mut pos, mut tn, mut neg) = (0, 0, 0, 0);
    for s in &res.summaries {
        if s.taxon_id.starts_with('C') {
            pos += 1;
            tp += usize::from(s.is_contaminant);
        } else {
            neg += 1;
            tn += usize::from(!s.is_contaminant);
        }
    }
    let (sens, spec) = (tp as f64 / pos as f64, tn as f64 / neg as f64);
    check(
        sens >= 0.9 && spec >= 0.9 && pos == 200 && neg == 600,
        format!("sensitivity {sens:.3} ({tp}/{pos}), specificity {spec:.3} ({tn}/{neg})"),
    )
}

// ---------------------------------------------------------------- 4

fn median_of_ratios_exact() -> Outcome {
    let mut r = rng::stream(401, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = r.random_range(5..40);
        let n = r.random_range(3..12);
        let counts: Vec<u64> = (0..m * n).map(|_| r.random_range(1..1000)).collect();
        let table = CountTable::new(
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            counts.clone(),
        )
        .map_err(|e| e.to_string())?;
        let c = r.random_range(0..n);
        let f = r.random_range(2..20) as u64;
        let scaled = table
            .with_counts(counts.iter().enumerate().map(|(idx, &v)| if idx % n == c { v * f } else { v }).collect())
            .map_err(|e| e.to_string())?;
        let d = median_of_ratios(&table, false).map_err(|e| e.to_string())?;
        let e = median_of_ratios(&scaled, false).map_err(|e| e.to_string())?;
        for o in (0..n).filter(|&o| o != c) {
            let rel = (e[c] / d[c]) / (e[o] / d[o]);
            worst = worst.max((rel - f as f64).abs() / f as f64);
        }
    }
    check(worst <= 1e-9, format!("max relative error {worst:.2e} over 100 tables"))
}

// ---------------------------------------------------------------- 5

fn procrustes_rmse(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let center = |a: &DMatrix<f64>| {
        let mut a = a.clone();
        for c in 0..a.ncols() {
            let mean = a.column(c).mean();
            a.column_mut(c).add_scalar_mut(-mean);
        }
        a
    };
    let (x, y) = (center(x), center(y));
    let svd = (y.transpose() * &x).svd(true, true);
    let rot = svd.u.unwrap() * svd.v_t.unwrap();
    ((&x - y * rot).norm_squared() / x.nrows() as f64).sqrt()
}

fn chi_square_over_n(rows: &[Vec<u64>]) -> f64 {
    let n: f64 = rows.iter().flatten().map(|&v| v as f64).sum();
    let rs: Vec<f64> = rows.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cs: Vec<f64> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j] as f64).sum()).collect();
    let mut x2 = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let e = rs[i] * cs[j] / n;
            x2 += (v as f64 - e).powi(2) / e;
        }
    }
    x2 / n
}

fn ordination_oracles() -> Outcome {
    let mut r = rng::stream(501, 0);
    let mut pcoa_worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(5..30);
        let x = DMatrix::from_fn(n, 2, |_, _| r.random_range(-10.0..10.0));
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = (x.row(i) - x.row(j)).norm();
            }
        }
        let d = DistanceMatrix::new((0..n).map(|i| format!("p{i}")).collect(), v, "euclidean").map_err(|e| e.to_string())?;
        let o = pcoa(&d, 2).map_err(|e| e.to_string())?;
        let y = DMatrix::from_row_slice(n, 2, &o.coordinates);
        pcoa_worst = pcoa_worst.max(procrustes_rmse(&x, &y));
    }

    let mut ca_worst: f64 = 0.0;
    for _ in 0..100 {
        let m = r.random_range(2..8);
        let n = r.random_range(2..8);
        let rows: Vec<Vec<u64>> = (0..m).map(|_| (0..n).map(|_| r.random_range(1..50)).collect()).collect();
        let table = CountTable::from_rows(
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            rows.clone(),
        )
        .map_err(|e| e.to_string())?;
        let o = correspondence_analysis(&table, 10).map_err(|e| e.to_string())?;
        let inertia = o.total_inertia.ok_or("CA reported no total inertia")?;
        ca_worst = ca_worst.max((inertia - chi_square_over_n(&rows)).abs());
    }

    // Hand-computed values: branch length times |pX - pY| summed over
    // branches (weighted), that sum over Σ l (pX + pY) (normalized), and
    // unique over observed branch length (unweighted).
    let fixtures: [(&str, [[u64; 2]; 4], [f64; 3]); 3] = [
        ("((A:1,B:2):0.5,(C:3,D:1):1.5);", [[2, 1], [2, 0], [0, 1], [0, 2]], [4.0, 4.0 / 4.75, 7.5 / 9.0]),
        ("((A:1,B:1):1,(C:1,D:1):1);", [[3, 0], [0, 0], [0, 0], [0, 5]], [4.0, 1.0, 1.0]),
        ("((A:1,B:1):1,(C:1,D:1):1);", [[1, 2], [1, 2], [1, 2], [1, 2]], [0.0, 0.0, 0.0]),
    ];
    let mut unifrac_exact = true;
    for (newick, rows, want) in fixtures {
        let tree = parse_newick(newick).map_err(|e| e.to_string())?;
        let ct = CountTable::from_rows(
            vec!["A".into(), "B".into(), "C".into(), "D".into()],
            vec!["X".into(), "Y".into()],
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .map_err(|e| e.to_string())?;
        for (variant, w) in [UnifracVariant::Weighted, UnifracVariant::WeightedNormalized, UnifracVariant::Unweighted].into_iter().zip(want) {
            let got = unifrac(&ct, &tree, variant).map_err(|e| e.to_string())?.get(0, 1);
            unifrac_exact &= got == w;
        }
    }
    check(
        pcoa_worst < 1e-8 && ca_worst <= 1e-10 && unifrac_exact,
        format!("PCoA Procrustes RMSE max {pcoa_worst:.1e}, CA |inertia - χ²/n| max {ca_worst:.1e}, UniFrac fixtures exact: {unifrac_exact}"),
    )
}

// ---------------------------------------------------------------- 6

fn switch_scenario(fold_change: f64) -> SimScenario {
    let mut taxa: Vec<SimTaxon> = (0..15)
        .map(|i| SimTaxon {
            id: format!("bg{i}"),
            mu: 40.0 + 10.0 * i as f64,
            k: 4.0,
            fold_change: 1.0,
            contamination: 0.0,
        })
        .collect();
    for (id, fc) in [("A", fold_change), ("B", 1.0)] {
        taxa.push(SimTaxon {
            id: id.into(),
            mu: 300.0,
            k: 4.0,
            fold_change: fc,
            contamination: 0.0,
        });
    }
    SimScenario {
        groups: vec![SimGroup { name: "g1".into(), n: 10 }, SimGroup { name: "g2".into(), n: 10 }],
        taxa,
        library: Default::default(),
        n_controls: 0,
        control_size_factor: 1.0,
        switch_pairs: vec![("A".into(), "B".into())],
        switch_fraction: None,
        seed: 0,
    }
}

fn permanova_size_and_switching() -> Outcome {
    let null = strain_switch_power(&switch_scenario(1.0), &[0.5], 1000, 0.05, 199, 601).map_err(|e| e.to_string())?;
    let size = null.without_switching.power[0];
    let alt = strain_switch_power(&switch_scenario(3.0), &[0.5], 500, 0.05, 199, 602).map_err(|e| e.to_string())?;
    let (before, after) = (alt.without_switching.power[0], alt.with_switching.power[0]);
    check(
        (size - 0.05).abs() <= 0.02 && before - after >= 0.1,
        format!("null rejection rate {size:.3} over 1000 replicates; power {before:.3} unswitched vs {after:.3} with half switched"),
    )
}

// ---------------------------------------------------------------- 7

/// Topic t puts 90% of its mass on its own block of taxa.
fn planted_beta(topics: usize, taxa: usize, r: &mut StatRng) -> Vec<f64> {
    let block = taxa / topics;
    let mut beta = Vec::with_capacity(topics * taxa);
    for t in 0..topics {
        let w = sample_dirichlet(r, &vec![1.0; taxa]);
        let row: Vec<f64> = (0..taxa).map(|i| if i / block == t { 0.9 * w[i] } else { 0.1 * w[i] }).collect();
        let s: f64 = row.iter().sum();
        beta.extend(row.into_iter().map(|v| v / s));
    }
    beta
}

fn sample_corpus(beta: &[f64], theta: &[f64], topics: usize, sizes: &[u64], seed: u64) -> CountTable {
    let n = sizes.len();
    let m = beta.len() / topics;
    let mut r = rng::stream(seed, 77);
    let mut rows = vec![vec![0u64; n]; m];
    let mut draw = vec![0u64; m];
    for j in 0..n {
        let probs: Vec<f64> = (0..m).map(|w| (0..topics).map(|t| theta[j * topics + t] * beta[t * m + w]).sum()).collect();
        sample_multinomial(&mut r, sizes[j], &probs, &mut draw);
        for w in 0..m {
            rows[w][j] = draw[w];
        }
    }
    CountTable::from_rows((0..m).map(|i| format!("asv{i:03}")).collect(), (0..n).map(|j| format!("S{j:03}")).collect(), rows).unwrap()
}

/// Exact posterior over the 2^(na+nb) assignment vectors of one specimen
/// with two taxa and two topics; tokens of taxon a come first.
fn enumerate_posterior(na: usize, nb: usize, alpha: f64, gamma: f64) -> Vec<f64> {
    let s = na + nb;
    let lw: Vec<f64> = (0u32..(1 << s))
        .map(|z| {
            let mut n_tw = [[0usize; 2]; 2];
            for i in 0..s {
                n_tw[((z >> i) & 1) as usize][usize::from(i >= na)] += 1;
            }
            (0..2)
                .map(|t| {
                    let n_t = (n_tw[t][0] + n_tw[t][1]) as f64;
                    ln_gamma(n_t + alpha) - ln_gamma(n_t + 2.0 * gamma) + ln_gamma(n_tw[t][0] as f64 + gamma) + ln_gamma(n_tw[t][1] as f64 + gamma)
                })
                .sum()
        })
        .collect();
    let mx = lw.iter().cloned().fold(f64::MIN, f64::max);
    let p: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = p.iter().sum();
    p.into_iter().map(|v| v / s).collect()
}

fn lda_recovery() -> Outcome {
    let (topics, taxa, n) = (3, 30, 100);
    let mut r = rng::stream(701, 1);
    let beta = planted_beta(topics, taxa, &mut r);
    let theta: Vec<f64> = (0..n).flat_map(|_| sample_dirichlet(&mut r, &vec![0.8; topics])).collect();
    let corpus = sample_corpus(&beta, &theta, topics, &vec![2000; n], 702);
    let spec = LdaSpec {
        iters: 600,
        warmup: 300,
        thin: 3,
        ..LdaSpec::new(topics, 703)
    };
    let fit = fit_lda(&corpus, &spec).map_err(|e| e.to_string())?;
    let est = fit.beta_mean();
    let perm = greedy_matching(&beta, &est, topics).map_err(|e| e.to_string())?;
    let corr: Vec<f64> = perm
        .iter()
        .enumerate()
        .map(|(t, &f)| pearson(&beta[t * taxa..(t + 1) * taxa], &est[f * taxa..(f + 1) * taxa]).unwrap_or(f64::NAN))
        .collect();
    let min_corr = corr.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut simplex_err: f64 = 0.0;
    for chain in &fit.chains {
        for row in chain.theta.chunks(topics).chain(chain.beta.chunks(taxa)) {
            simplex_err = simplex_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let (na, nb, alpha, gamma) = (5, 3, 0.8, 0.5);
    let exact = enumerate_posterior(na, nb, alpha, gamma);
    let micro = CountTable::from_rows(vec!["a".into(), "b".into()], vec!["S1".into()], vec![vec![na as u64], vec![nb as u64]]).unwrap();
    let mut g = CollapsedGibbs::new(&micro, 2, alpha, gamma, false, rng::stream(704, 0)).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        g.sweep();
    }
    let sweeps = 400_000;
    let mut freq = vec![0usize; 1 << (na + nb)];
    for _ in 0..sweeps {
        g.sweep();
        let z = g.assignments().ok_or("token sampler exposes no assignments")?;
        freq[z.iter().enumerate().fold(0usize, |acc, (i, &t)| acc | ((t as usize) << i))] += 1;
    }
    let tv = 0.5 * freq.iter().zip(&exact).map(|(&f, &p)| (f as f64 / sweeps as f64 - p).abs()).sum::<f64>();

    let mut rz = rng::stream(705, 0);
    let rhats: Vec<f64> = (0..5)
        .map(|_| {
            let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| StandardNormal.sample(&mut rz)).collect()).collect();
            split_rhat(&chains.iter().map(Vec::as_slice).collect::<Vec<_>>())
        })
        .collect();
    let rhat_ok = rhats.iter().all(|h| (0.99..=1.01).contains(h));
    let rhat_range = rhats.iter().fold((f64::INFINITY, f64::MIN), |(lo, hi), &h| (lo.min(h), hi.max(h)));

    check(
        min_corr >= 0.9 && tv < 0.02 && simplex_err <= 1e-10 && rhat_ok,
        format!(
            "β correlation min {min_corr:.3}, enumeration TV {tv:.4}, simplex error {simplex_err:.1e}, iid R̂ in [{:.4}, {:.4}]",
            rhat_range.0, rhat_range.1
        ),
    )
}

// ---------------------------------------------------------------- 8

/// 20 + 20 specimens from three topics; in the second group topic 0's share
/// is multiplied by `shift` before renormalizing.
fn group_corpus(shift: f64, seed: u64) -> (CountTable, Vec<f64>, Vec<String>) {
    let (t, m, n) = (3, 30, 20);
    let mut r = rng::stream(seed, 2);
    let beta = planted_beta(t, m, &mut r);
    let mut theta = Vec::new();
    for j in 0..2 * n {
        let mut th = sample_dirichlet(&mut r, &vec![5.0; t]);
        if j >= n {
            th[0] *= shift;
        }
        let s: f64 = th.iter().sum();
        theta.extend(th.into_iter().map(|v| v / s));
    }
    let sizes: Vec<u64> = (0..2 * n).map(|_| r.random_range(800..1200)).collect();
    let groups = (0..2 * n).map(|j| if j < n { "O" } else { "M" }.to_string()).collect();
    (sample_corpus(&beta, &theta, t, &sizes, seed), beta, groups)
}

fn diff_spec(seed: u64) -> LdaSpec {
    LdaSpec {
        chains: 2,
        iters: 200,
        warmup: 100,
        thin: 2,
        ..LdaSpec::new(3, seed)
    }
}

fn differential_topics_calibration() -> Outcome {
    let run = |shift: f64, seed: u64| -> Result<(Vec<microstat::nbglm::WaldRow>, usize), String> {
        let (counts, beta, groups) = group_corpus(shift, seed);
        let fit = fit_lda(&counts, &diff_spec(seed)).map_err(|e| e.to_string())?;
        let sizes: Vec<u64> = (0..counts.n_specimens()).map(|j| counts.column(j).iter().sum()).collect();
        let rows = differential_topics(&fit, &sizes, &groups).map_err(|e| e.to_string())?;
        let planted = greedy_matching(&beta, &fit.beta_mean(), 3).map_err(|e| e.to_string())?[0];
        Ok((rows, planted))
    };
    let null_reps = 200;
    let mut any = 0;
    for rep in 0..null_reps {
        let (rows, _) = run(1.0, 8000 + rep)?;
        any += usize::from(rows.iter().any(|w| w.p_adj <= 0.05));
    }
    let fdr = any as f64 / null_reps as f64;
    let power_reps = 50;
    let mut hits = 0;
    let mut header = String::new();
    for rep in 0..power_reps {
        let (rows, planted) = run(4.0, 9000 + rep)?;
        hits += usize::from(rows[planted].p_adj <= 0.05);
        if rep == 0 {
            header = microstat::nbglm::rows_to_csv(&rows, "Topic").lines().next().unwrap_or_default().to_string();
        }
    }
    let power = hits as f64 / power_reps as f64;
    let schema = header == "Topic,lfc,lfcSE,WTS,pvalue,p.adj";
    check(
        fdr <= 0.07 && power >= 0.8 && schema,
        format!("null FDR {fdr:.3} ({any}/{null_reps}), power {power:.2} ({hits}/{power_reps}) at 4-fold shift, header '{header}'"),
    )
}

// ---------------------------------------------------------------- 9

fn write_fixture(dir: &Path) -> Result<(), String> {
    let mut taxa: Vec<SimTaxon> = (0..24)
        .map(|i| SimTaxon {
            id: format!("asv{i:02}"),
            mu: 20.0 + 15.0 * i as f64,
            k: 3.0,
            fold_change: if i >= 21 { 4.0 } else { 1.0 },
            contamination: 0.0,
        })
        .collect();
    taxa.extend((0..3).map(|i| SimTaxon {
        id: format!("contam{i}"),
        mu: 0.0,
        k: 1.0,
        fold_change: 1.0,
        contamination: 15.0,
    }));
    let ds = simulate(&SimScenario {
        groups: vec![SimGroup { name: "O".into(), n: 10 }, SimGroup { name: "M".into(), n: 10 }],
        taxa,
        library: LibraryModel::NegativeBinomial { mean: 1.0, k: 20.0 },
        n_controls: 4,
        control_size_factor: 1.0,
        switch_pairs: vec![],
        switch_fraction: None,
        seed: 901,
    })
    .map_err(|e| e.to_string())?;
    let io = |e: std::io::Error| e.to_string();
    fs::write(dir.join("counts.tsv"), write_count_table(&ds.counts, b'\t')).map_err(io)?;
    let mut samples = String::from("specimen_id\tspecimen_type\tgroup\n");
    for m in &ds.samples {
        let kind = if m.group.is_some() { "biological" } else { "negative_control" };
        samples.push_str(&format!("{}\t{kind}\t{}\n", m.specimen_id, m.group.clone().unwrap_or_default()));
    }
    fs::write(dir.join("samples.tsv"), samples).map_err(io)?;
    let mut tax = String::from("taxon_id\tKingdom\tFamily\n");
    for (i, id) in ds.counts.taxa_ids().iter().enumerate() {
        tax.push_str(&format!("{id}\tBacteria\t{}\n", if i == 5 { "Mitochondria" } else { "Fam" }));
    }
    fs::write(dir.join("taxonomy.tsv"), tax).map_err(io)?;
    fs::write(
        dir.join("run.cfg"),
        "seed = 2024\n\
         ingest counts=counts.tsv samples=samples.tsv taxonomy=taxonomy.tsv\n\
         filter data=@ingest min-reads=100 drop-taxonomy=Family=Mitochondria\n\
         decontam data=@filter report=contam.csv\n\
         transform data=@decontam method=anscombe\n\
         ordinate data=@decontam table=@transform metric=euclidean method=pcoa axes-out=axes.csv\n\
         test data=@decontam metric=bray method=permanova group=group\n\
         topics data=@decontam T=3 theta=theta.csv diagnostics=diagnostics.csv\n\
         topics-diff fit=@topics group=group\n",
    )
    .map_err(io)
}

/// Every non-manifest file in a run directory, sorted by name.
fn run_outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if !name.ends_with(".manifest.json") {
            files.push((name, fs::read(&path).map_err(|e| e.to_string())?));
        }
    }
    files.sort();
    Ok(files)
}

fn pipeline_is_deterministic() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    write_fixture(dir)?;
    let mut runs = Vec::new();
    for (run_dir, threads) in [("run1", None), ("run2", Some("1"))] {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_microstat"));
        cmd.current_dir(dir).args(["pipeline", "--config", "run.cfg", "--run-dir", run_dir]);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{run_dir} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        runs.push(run_outputs(&dir.join(run_dir))?);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    check(
        runs[0].len() == runs[1].len() && runs[0].len() == 12 && differing.is_empty(),
        format!("{} outputs compared ({}), differing: {differing:?}", names.len(), names.join(" ")),
    )
}

// ----------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "NB goodness-of-fit calibration", budget: Duration::from_secs(120), run: nb_gof_calibration },
        Criterion { id: 2, name: "Anscombe variance stabilization", budget: Duration::from_secs(30), run: anscombe_stabilizes_variance },
        Criterion { id: 3, name: "planted contaminant calls", budget: Duration::from_secs(600), run: planted_contaminants },
        Criterion { id: 4, name: "median-of-ratios exactness", budget: Duration::from_secs(5), run: median_of_ratios_exact },
        Criterion { id: 5, name: "ordination oracles", budget: Duration::from_secs(30), run: ordination_oracles },
        Criterion { id: 6, name: "PERMANOVA size and strain-switching power", budget: Duration::from_secs(600), run: permanova_size_and_switching },
        Criterion { id: 7, name: "LDA recovery and sampler correctness", budget: Duration::from_secs(900), run: lda_recovery },
        Criterion { id: 8, name: "differential topics", budget: Duration::from_secs(600), run: differential_topics_calibration },
        Criterion { id: 9, name: "end-to-end pipeline determinism", budget: Duration::from_secs(1200), run: pipeline_is_deterministic },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let over = elapsed > c.budget;
        let (verdict, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {}s budget", c.budget.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        failures += usize::from(verdict == "FAIL");
        println!("criterion {} {}: {verdict} ({detail}; {:.1}s)", c.id, c.name, elapsed.as_secs_f64());
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
