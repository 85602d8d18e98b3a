use dyadiv::data::{read_csv, signed_indicator_terms, swap_roles, write_csv, DyadDataset, DyadRow, Ego, EstimandSpec};
use dyadiv::estimators::{estimate, EstimationConfig, Method};
use dyadiv::inference::{bootstrap, coverage, plugin_ci, quantile_sorted, BootstrapConfig};
use dyadiv::nuisance::{fit_all, NuisanceConfig};
use dyadiv::sim::dgp::{generate, DgpConfig};
use dyadiv::sim::mc::{run_mc, CiKind, McConfig, McMethod};
use proptest::prelude::*;

fn arb_row(p: usize) -> impl Strategy<Value = DyadRow> {
    (
        prop::collection::vec(-3.0f64..3.0, p),
        0u8..2,
        0u8..2,
        0u8..2,
        0u8..2,
        -50.0f64..50.0,
        -50.0f64..50.0,
    )
        .prop_map(|(x, z1, z2, d1, d2, y1, y2)| DyadRow { x, z1, z2, d1, d2, y1, y2: Some(y2) })
}

fn arb_dataset() -> impl Strategy<Value = DyadDataset> {
    (0usize..4)
        .prop_flat_map(|p| prop::collection::vec(arb_row(p), 1..60))
        .prop_map(|rows| DyadDataset::from_rows(rows).unwrap())
}

fn sim(n: usize, seed: u64) -> DyadDataset {
    generate(&DgpConfig::new(n, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swap_is_an_involution(ds in arb_dataset()) {
        let once = swap_roles(&ds).unwrap();
        prop_assert_eq!(once.x_row(0), ds.x_row(0));
        prop_assert_eq!(once.z1(), ds.z2());
        prop_assert_eq!(once.y1(), ds.y2().unwrap());
        prop_assert_eq!(swap_roles(&once).unwrap(), ds);
    }

    #[test]
    fn csv_round_trip_is_exact(ds in arb_dataset()) {
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice(), Some(true)).unwrap(), ds);
    }

    #[test]
    fn signed_terms(row in arb_row(1), level in 0u8..2) {
        let (s, num, den) = signed_indicator_terms(&row, &EstimandSpec::dte(level));
        prop_assert_eq!(s, if row.z1 == 1 { 1.0 } else { -1.0 });
        let ind = f64::from(u8::from(row.d2 == level));
        prop_assert_eq!(num, ind * row.y1);
        prop_assert_eq!(den, f64::from(row.d1) * ind);
        prop_assert!(den == 0.0 || den == 1.0);
    }

    #[test]
    fn coverage_is_a_share(ints in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0), 1..40), truth in -5.0f64..5.0) {
        let reps: Vec<(f64, (f64, f64))> = ints.iter().map(|&(c, w)| (c, (c - w, c + w))).collect();
        let cp = coverage(&reps, truth);
        prop_assert!((0.0..=1.0).contains(&cp));
    }

    #[test]
    fn quantiles_are_monotone(mut v in prop::collection::vec(-1e3f64..1e3, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantile_sorted(&v, lo) <= quantile_sorted(&v, hi));
        prop_assert!(quantile_sorted(&v, 0.0) == v[0] && quantile_sorted(&v, 1.0) == v[v.len() - 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outcome_scaling_is_equivariant(seed in 0u64..1000, c in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]) {
        let ds = sim(800, seed);
        let scaled = ds.with_scaled_outcomes(c);
        let cfg = EstimationConfig::default();
        for m in Method::ALL {
            let (a, b) = match (estimate(&ds, &EstimandSpec::dte(1), m, &cfg), estimate(&scaled, &EstimandSpec::dte(1), m, &cfg)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(_), Err(_)) => continue,
                (a, b) => return Err(TestCaseError::fail(format!("{m}: {a:?} vs {b:?}"))),
            };
            prop_assert!((b.point - c * a.point).abs() <= 1e-8 * (1.0 + a.point.abs()), "{}: {} vs {}", m, b.point, c * a.point);
            if let (Some(sa), Some(sb)) = (a.se_plugin, b.se_plugin) {
                prop_assert!((sb - c.abs() * sa).abs() <= 1e-8 * (1.0 + sa));
            }
        }
    }

    #[test]
    fn plugin_intervals_nest_by_level(seed in 0u64..1000, l1 in 0.5f64..0.99, l2 in 0.5f64..0.99) {
        let r = estimate(&sim(600, seed), &EstimandSpec::dte(0), Method::Mr, &EstimationConfig::default()).unwrap();
        let (lo_l, hi_l) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = plugin_ci(&r, lo_l).unwrap();
        let b = plugin_ci(&r, hi_l).unwrap();
        prop_assert!(b.0 <= a.0 && a.1 <= b.1);
        prop_assert!(a.0 <= r.point && r.point <= a.1);
    }

    #[test]
    fn eif_is_centered_and_matches_se(seed in 0u64..1000) {
        let r = estimate(&sim(700, seed), &EstimandSpec::dte(1), Method::Mr, &EstimationConfig::default()).unwrap();
        let n = r.eif_values.len() as f64;
        let mean = r.eif_values.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-10 * (1.0 + r.point.abs()));
        let var = r.eif_values.iter().map(|v| v * v).sum::<f64>() / (n - 1.0);
        prop_assert!(((var / n).sqrt() - r.se_plugin.unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ite_is_the_difference_of_direct_effects(seed in 0u64..1000) {
        let ds = sim(700, seed);
        let cfg = EstimationConfig::default();
        let one = estimate(&ds, &EstimandSpec::dte(1), Method::Mr, &cfg).unwrap();
        let zero = estimate(&ds, &EstimandSpec::dte(0), Method::Mr, &cfg).unwrap();
        let ite = estimate(&ds, &EstimandSpec::ite(), Method::Mr, &cfg).unwrap();
        prop_assert_eq!(ite.point, one.point - zero.point);
        for i in 0..ds.n() {
            prop_assert_eq!(ite.eif_values[i], one.eif_values[i] - zero.eif_values[i]);
        }
    }

    #[test]
    fn trimmed_propensities_stay_inside(seed in 0u64..1000, eps in 0.01f64..0.2) {
        let ds = sim(400, seed);
        let cfg = NuisanceConfig { trim_eps: eps, ..NuisanceConfig::default() };
        let set = fit_all(&ds, &EstimandSpec::dte(1), &cfg).unwrap();
        let v = set.values(&ds).unwrap();
        prop_assert!(v.pi1.iter().all(|p| (eps..=1.0 - eps).contains(p)));
    }
}

#[test]
fn second_ego_is_first_ego_on_swapped_data() {
    let ds = sim(1500, 21);
    let sw = swap_roles(&ds).unwrap();
    let cfg = EstimationConfig::default();
    for level in [0, 1] {
        for m in Method::ALL {
            let a = estimate(&ds, &EstimandSpec::dte(level).with_ego(Ego::Unit2), m, &cfg).unwrap();
            let b = estimate(&sw, &EstimandSpec::dte(level), m, &cfg).unwrap();
            assert_eq!(a.point, b.point, "{m}");
        }
    }
}

#[test]
fn spillover_is_direct_effect_with_instruments_and_treatments_exchanged() {
    let ds = sim(1500, 22);
    // ego keeps its outcome; the peer's treatment becomes the one under study
    let rows: Vec<DyadRow> = ds
        .rows()
        .map(|r| DyadRow { z1: r.z2, z2: r.z1, d1: r.d2, d2: r.d1, y2: None, ..r })
        .collect();
    let manual = DyadDataset::from_rows(rows).unwrap();
    let cfg = EstimationConfig::default();
    for level in [0, 1] {
        for m in [Method::Wald, Method::Mr, Method::G] {
            let ste = estimate(&ds, &EstimandSpec::ste(level), m, &cfg).unwrap();
            let dte = estimate(&manual, &EstimandSpec::dte(level), m, &cfg).unwrap();
            assert_eq!(ste.point, dte.point, "{m} level {level}");
        }
    }
}

#[test]
fn bootstrap_ignores_thread_count() {
    let ds = sim(600, 5);
    let spec = EstimandSpec::dte(1);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| bootstrap(&ds, &spec, Method::Mr, &EstimationConfig::default(), &BootstrapConfig::new(30, 8)).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn mc_table_ignores_thread_count() {
    let mut c = McConfig::new(4, vec![300], vec![McMethod::Parametric, McMethod::Sieve], 2);
    c.estimands = vec![EstimandSpec::dte(1), EstimandSpec::ste(0)];
    c.ci = CiKind::Bootstrap;
    c.bootstrap_b = 10;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_mc(&c).unwrap())
    };
    assert_eq!(run(1), run(4));
}
