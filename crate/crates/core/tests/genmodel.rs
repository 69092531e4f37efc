use microstat::genmodel::{fit_nb, gof_all, gof_nb, simulate, FitFlag, GofFlag, GofOptions, LibraryModel, SimGroup, SimScenario, SimTaxon};
use microstat::nbglm::bh_adjust;
use microstat::rng;
use microstat::special::{sample_nb, sample_poisson};
use proptest::prelude::*;

fn nb_draws(seed: u64, n: usize, mu: f64, k: f64) -> Vec<u64> {
    let mut r = rng::stream(seed, 0);
    (0..n).map(|_| sample_nb(&mut r, mu, k)).collect()
}

fn taxon(id: &str, mu: f64, k: f64) -> SimTaxon {
    SimTaxon {
        id: id.into(),
        mu,
        k,
        fold_change: 1.0,
        contamination: 0.0,
    }
}

fn scenario(groups: &[usize], taxa: Vec<SimTaxon>, seed: u64) -> SimScenario {
    SimScenario {
        groups: groups
            .iter()
            .enumerate()
            .map(|(g, &n)| SimGroup { name: format!("g{}", g + 1), n })
            .collect(),
        taxa,
        library: LibraryModel::Fixed { size_factor: 1.0 },
        n_controls: 0,
        control_size_factor: 1.0,
        switch_pairs: vec![],
        switch_fraction: None,
        seed,
    }
}

#[test]
fn fit_equidispersed_hits_poisson_limit() {
    let mut r = rng::stream(11, 0);
    let y: Vec<u64> = (0..2000).map(|_| sample_poisson(&mut r, 30.0)).collect();
    let fit = fit_nb(&y, &vec![1.0; y.len()]).unwrap();
    assert!(fit.params.k > 1e3, "k = {}", fit.params.k);
    assert!((fit.params.mu - 30.0).abs() < 1.0);
}

#[test]
fn fit_recovers_nb_parameters() {
    let y = nb_draws(5, 10_000, 50.0, 5.0);
    let fit = fit_nb(&y, &vec![1.0; y.len()]).unwrap();
    assert!((fit.params.mu / 50.0 - 1.0).abs() < 0.05, "{:?}", fit);
    assert!((fit.params.k / 5.0 - 1.0).abs() < 0.15, "{:?}", fit);
    assert!(!fit.flags.contains(&FitFlag::MomentFallback));
}

#[test]
fn fit_uses_size_factors() {
    let mut r = rng::stream(9, 0);
    let d: Vec<f64> = (0..5000).map(|j| 0.3 + (j % 7) as f64 * 0.4).collect();
    let y: Vec<u64> = d.iter().map(|&dj| sample_nb(&mut r, 20.0 * dj, 3.0)).collect();
    let fit = fit_nb(&y, &d).unwrap();
    assert!((fit.params.mu / 20.0 - 1.0).abs() < 0.05);
    assert!((fit.params.k / 3.0 - 1.0).abs() < 0.15);
}

#[test]
fn fit_rejects_all_zero_and_short_input() {
    assert!(fit_nb(&[0, 0, 0], &[1.0; 3]).is_err());
    assert!(fit_nb(&[1, 2], &[1.0; 2]).is_err());
}

#[test]
fn constant_vector_is_degenerate() {
    let g = gof_nb(&[7; 40], &[1.0; 40], 99, 1).unwrap();
    assert!(g.flags.contains(&GofFlag::DegenerateBins));
    assert_eq!(g.p_value, 1.0);
}

#[test]
fn gof_is_deterministic_and_on_grid() {
    let y = nb_draws(3, 150, 20.0, 4.0);
    let a = gof_nb(&y, &[1.0; 150], 199, 42).unwrap();
    let b = gof_nb(&y, &[1.0; 150], 199, 42).unwrap();
    assert_eq!(a, b);
    let r = a.p_value * 200.0 - 1.0;
    assert!((r - r.round()).abs() < 1e-9);
}

#[test]
fn gof_accepts_nb_data() {
    let seeds = 100u64;
    let ok = (0..seeds)
        .filter(|&s| {
            let y = nb_draws(1000 + s, 200, 20.0, 4.0);
            gof_nb(&y, &[1.0; 200], 1000, s).unwrap().p_value > 0.05
        })
        .count();
    assert!(ok >= 90, "accepted in {ok}/100 seeds");
}

#[test]
fn gof_rejects_bimodal_mixture() {
    let seeds = 100u64;
    let rejected = (0..seeds)
        .filter(|&s| {
            let mut r = rng::stream(2000 + s, 0);
            let y: Vec<u64> = (0..200)
                .map(|j| if j % 2 == 0 { sample_nb(&mut r, 2.0, 5.0) } else { sample_nb(&mut r, 200.0, 5.0) })
                .collect();
            gof_nb(&y, &[1.0; 200], 1000, s).unwrap().p_value < 0.05
        })
        .count();
    assert!(rejected >= 80, "rejected in {rejected}/100 seeds");
}

#[test]
fn gof_p_values_are_super_uniform() {
    let reps = 300;
    let alpha = 0.1;
    let below = (0..reps)
        .filter(|&s| {
            let y = nb_draws(5000 + s, 100, 8.0, 2.0);
            gof_nb(&y, &[1.0; 100], 199, s).unwrap().p_value <= alpha
        })
        .count() as f64
        / reps as f64;
    let tol = 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
    assert!(below <= alpha + tol, "ecdf({alpha}) = {below}");
}

#[test]
fn gof_all_single_taxon_unadjusted() {
    let ds = simulate(&scenario(&[120], vec![taxon("A", 15.0, 3.0)], 4)).unwrap();
    let rep = gof_all(&ds, 199, 1, GofOptions::default()).unwrap();
    assert_eq!(rep.results.len(), 1);
    assert_eq!(rep.results[0].p_adjusted, rep.results[0].p_value);
}

#[test]
fn gof_all_null_and_planted_alternatives() {
    // 90 NB taxa plus 10 bimodal ones built by summing two switched taxa.
    let mut taxa: Vec<SimTaxon> = (0..90).map(|i| taxon(&format!("T{i}"), 5.0 + i as f64, 1.0 + (i % 5) as f64)).collect();
    let mut s = scenario(&[200], vec![], 77);
    for i in 0..10 {
        taxa.push(taxon(&format!("M{i}"), 200.0, 5.0));
    }
    s.taxa = taxa;
    let mut ds = simulate(&s).unwrap();
    // Zero out half of each planted taxon's specimens' high component and
    // replace with a low NB draw, giving a 50/50 mixture.
    let mut r = rng::stream(78, 0);
    let mut rows: Vec<Vec<u64>> = (0..ds.counts.n_taxa()).map(|i| ds.counts.row(i).to_vec()).collect();
    for row in rows.iter_mut().skip(90) {
        for (j, v) in row.iter_mut().enumerate() {
            if j % 2 == 0 {
                *v = sample_nb(&mut r, 2.0, 5.0);
            }
        }
    }
    ds.counts = microstat::CountTable::from_rows(ds.counts.taxa_ids().to_vec(), ds.counts.specimen_ids().to_vec(), rows).unwrap();
    let rep = gof_all(&ds, 999, 5, GofOptions::default()).unwrap();
    let flagged_alt = rep.results[90..].iter().filter(|r| r.p_adjusted < 0.1).count();
    let flagged_null = rep.results[..90].iter().filter(|r| r.p_adjusted < 0.05).count();
    assert!(flagged_alt >= 7, "{flagged_alt} of 10 planted flagged");
    assert!(flagged_null <= 1, "{flagged_null} null taxa rejected");
    assert!(rep.results.iter().all(|r| r.p_adjusted >= r.p_value));
}

#[test]
fn excess_zeros_detected() {
    let mut y = nb_draws(8, 300, 30.0, 10.0);
    for v in y.iter_mut().take(120) {
        *v = 0;
    }
    let g = gof_nb(&y, &[1.0; 300], 99, 2).unwrap();
    assert!(g.excess_zeros);
    let g = gof_nb(&nb_draws(8, 300, 30.0, 10.0), &[1.0; 300], 99, 2).unwrap();
    assert!(!g.excess_zeros);
}

#[test]
fn simulate_poisson_limit_dispersion_ratio() {
    let ds = simulate(&scenario(&[5000], vec![taxon("A", 12.0, 1e12)], 1)).unwrap();
    let row = ds.counts.row(0);
    let n = row.len() as f64;
    let mean = row.iter().sum::<u64>() as f64 / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / mean - 1.0).abs() < 0.1);
}

#[test]
fn simulate_switch_pairs_zero_columns() {
    let mut s = scenario(&[30, 30], vec![taxon("A", 40.0, 5.0), taxon("B", 40.0, 5.0), taxon("C", 10.0, 2.0)], 3);
    s.switch_pairs = vec![("A".into(), "B".into())];
    let ds = simulate(&s).unwrap();
    let (a, b) = (ds.counts.row(0), ds.counts.row(1));
    assert!(b[..30].iter().all(|&v| v == 0));
    assert!(a[30..].iter().all(|&v| v == 0));
    assert!(b[30..].iter().sum::<u64>() > 0);

    s.switch_pairs = vec![("A".into(), "Z".into())];
    assert!(simulate(&s).is_err());
    s.switch_pairs = vec![("A".into(), "A".into())];
    assert!(simulate(&s).is_err());
}

#[test]
fn simulate_switch_fraction_is_group_independent() {
    let mut s = scenario(&[40, 40], vec![taxon("A", 40.0, 50.0), taxon("B", 40.0, 5.0)], 3);
    s.switch_pairs = vec![("A".into(), "B".into())];
    s.switch_fraction = Some(0.5);
    let ds = simulate(&s).unwrap();
    let b = ds.counts.row(1);
    for g in 0..2 {
        let switched = b[g * 40..(g + 1) * 40].iter().filter(|&&v| v > 0).count();
        assert_eq!(switched, 20);
    }
}

#[test]
fn simulate_moments_with_contamination() {
    let mut t = taxon("A", 30.0, 4.0);
    t.contamination = 10.0;
    let mut s = scenario(&[5000], vec![t], 21);
    s.library = LibraryModel::NegativeBinomial { mean: 10_000.0, k: 20.0 };
    let ds = simulate(&s).unwrap();
    let d = ds.size_factors.as_ref().unwrap();
    let dbar = d.iter().sum::<f64>() / d.len() as f64;
    let mean = ds.counts.row(0).iter().sum::<u64>() as f64 / 5000.0;
    assert!((mean / (40.0 * dbar) - 1.0).abs() < 0.05, "mean {mean} vs {}", 40.0 * dbar);
}

#[test]
fn simulate_controls_see_only_contamination() {
    let mut t = taxon("A", 30.0, 4.0);
    t.contamination = 0.0;
    let mut s = scenario(&[10], vec![t, taxon("B", 5.0, 1.0)], 2);
    s.taxa[1].contamination = 20.0;
    s.n_controls = 5;
    let ds = simulate(&s).unwrap();
    assert_eq!(ds.control_indices().unwrap().len(), 5);
    assert!(ds.counts.row(0)[10..].iter().all(|&v| v == 0));
    assert!(ds.counts.row(1)[10..].iter().all(|&v| v > 0));
    assert_eq!(ds.counts.specimen_ids()[10], "NC01");
    assert!(microstat::validate(&ds).is_empty());
}

#[test]
fn simulate_is_reproducible() {
    let mut s = scenario(&[20, 20], (0..30).map(|i| taxon(&format!("T{i}"), 10.0 + i as f64, 2.0)).collect(), 99);
    s.library = LibraryModel::NegativeBinomial { mean: 5000.0, k: 10.0 };
    let a = simulate(&s).unwrap().to_json().unwrap();
    let b = simulate(&s).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn fit_mu_error_shrinks_with_n() {
    // |mu_hat - mu| * sqrt(n) stays bounded across n.
    for &n in &[250usize, 1000, 4000, 16000] {
        let errs: Vec<f64> = (0..20)
            .map(|s| {
                let y = nb_draws(300 + s, n, 25.0, 3.0);
                (fit_nb(&y, &vec![1.0; n]).unwrap().params.mu - 25.0).abs()
            })
            .collect();
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / 20.0).sqrt();
        let scaled = rmse * (n as f64).sqrt();
        // sd of the mean is sqrt(mu + mu^2/k) ≈ 15.3
        assert!(scaled < 3.0 * 15.3, "n={n}: scaled error {scaled}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bh_is_monotone_and_dominates(mut p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        p.sort_by(f64::total_cmp);
        let q = bh_adjust(&p);
        for w in q.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-15);
        }
        for (a, b) in p.iter().zip(&q) {
            prop_assert!(b >= a && *b <= 1.0);
        }
    }

    #[test]
    fn fit_never_panics(y in proptest::collection::vec(0u64..500, 3..30)) {
        let d = vec![1.0; y.len()];
        match fit_nb(&y, &d) {
            Ok(f) => prop_assert!(f.params.mu > 0.0 && f.params.k > 0.0 && f.params.k.is_finite()),
            Err(_) => prop_assert!(y.iter().all(|&v| v == 0)),
        }
    }
}
