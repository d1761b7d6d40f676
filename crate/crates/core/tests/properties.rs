use gbsvie_core::bsvie::{solve_bsvie_picard, Interval};
use gbsvie_core::expr::Expression;
use gbsvie_core::gexp::solve_gbsde;
use gbsvie_core::model::{GeneratorSpec, TerminalFamily};
use gbsvie_core::paths::{reconstruct_k_all, simulate_paths, PathConfig, VolControl};
use gbsvie_core::verify::{compare_solutions, random_ordered_pair, CompareOptions};
use gbsvie_core::{solve_bsvie, ProblemFile, ProblemSpec, VolatilityBand};
use proptest::prelude::*;

fn small_spec(lo: f64, hi: f64) -> ProblemSpec {
    ProblemSpec::from_exprs(VolatilityBand::new(lo, hi).unwrap(), 1.0, 30, 3.0, 31, "0", 0.0, "0").unwrap()
}

fn with_data(spec: &ProblemSpec, generator: &str, lip: f64, terminal: &str) -> ProblemSpec {
    spec.clone()
        .with_generator(GeneratorSpec::new(Expression::parse(generator).unwrap(), lip).unwrap())
        .with_terminal(TerminalFamily::new(Expression::parse(terminal).unwrap(), 2))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn ordered_random_pairs_compare(seed in 0u64..10_000) {
        let template = small_spec(0.5, 1.0);
        let (s1, s2) = random_ordered_pair(&template, seed).unwrap();
        let c = compare_solutions(&s1, &s2, &CompareOptions { chained: true, ..Default::default() }).unwrap();
        prop_assert!(c.report.min_gap >= -1e-6, "{:?}", c.report);
        prop_assert!(c.report.ladder.unwrap().monotone);
    }

    #[test]
    fn diagonal_matches_surfaces(a in 0.0f64..1.0, c in -1.0f64..1.0, w in 0.5f64..2.0) {
        let spec = with_data(
            &small_spec(0.5, 1.0),
            &format!("({a})*sin(y) + ({c})*cos(x - s) + 0.1*z"),
            a + 0.1,
            &format!("sin(({w})*x) + t"),
        );
        let b = solve_bsvie(&spec).unwrap();
        for i in [0usize, 7, 15, 29, 30] {
            let surface = solve_gbsde(i, &spec, Some(&b.y)).unwrap();
            // the accepted diagonal is a fixed point up to the Picard tolerance
            for (p, q) in surface.diagonal().iter().zip(b.y.row(i)) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn cash_translation(shift in -2.0f64..2.0, a in 0.0f64..0.8) {
        let base = small_spec(0.5, 1.0);
        let s = with_data(&base, &format!("({a})*y + 0.2*cos(x)"), a, "abs(x)");
        let shifted = with_data(&base, &format!("({a})*y + 0.2*cos(x)"), a, &format!("abs(x) + ({shift})"));
        let (y0, y1) = (solve_bsvie(&s).unwrap().y, solve_bsvie(&shifted).unwrap().y);
        // Y shifts by shift * exp(a (T - t)) in the linear y case, node by node
        for i in 0..=30 {
            let factor = (1.0 + a * s.dt()).powi((30 - i) as i32);
            for (p, q) in y0.row(i).iter().zip(y1.row(i)) {
                prop_assert!((q - p - shift * factor).abs() <= 1e-8 * (1.0 + factor));
            }
        }
    }

    #[test]
    fn quadratic_variation_within_band(lo in 0.2f64..1.0, width in 0.0f64..1.0, seed in 0u64..1000) {
        let hi = lo + width;
        let spec = small_spec(lo, hi);
        let schedule: Vec<f64> = (0..30).map(|k| lo + width * ((k * 7 + seed as usize) % 5) as f64 / 4.0).collect();
        let batch = simulate_paths(&VolControl::Schedule(schedule), &spec, &PathConfig::new(20, seed).with_substeps(3)).unwrap();
        for p in 0..20 {
            let qv = batch.quadratic_variation(p);
            prop_assert!(qv >= lo * lo - 1e-12 && qv <= hi * hi + 1e-12);
        }
    }

    #[test]
    fn k_is_non_positive_under_any_control(seed in 0u64..1000, sigma in 0.5f64..1.0) {
        let spec = ProblemSpec::from_exprs(VolatilityBand::new(0.5, 1.0).unwrap(), 1.0, 60, 5.0, 51, "0", 0.0, "x^2/2 + sin(x)").unwrap();
        let b = solve_bsvie(&spec).unwrap();
        let batch = simulate_paths(&VolControl::Constant(sigma), &spec, &PathConfig::new(50, seed).with_substeps(128)).unwrap();
        for k in reconstruct_k_all(&b, &spec, &batch, 0).unwrap() {
            prop_assert!(k.value <= 5e-2, "{:?}", k);
        }
    }

    #[test]
    fn problem_file_round_trip(lo in 0.1f64..1.0, width in 0.0f64..1.0, n_t in 10usize..80) {
        let spec = with_data(
            &ProblemSpec::from_exprs(VolatilityBand::new(lo, lo + width).unwrap(), 1.5, n_t, 4.0, 21, "0", 0.0, "0").unwrap(),
            "max(x, 0) + 0.5*y",
            0.5,
            "x^2",
        );
        let text = serde_json::to_string(&ProblemFile::from_spec(&spec)).unwrap();
        let file: ProblemFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(file.to_spec().unwrap(), spec);
    }
}

#[test]
fn picard_and_direct_agree_for_y_free_generators() {
    let spec = with_data(&small_spec(0.5, 1.0), "x*cos(s - t) + 0.3*z", 0.3, "x^2 - t");
    let a = solve_bsvie_picard(&spec).unwrap();
    let b = solve_bsvie(&spec).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.z, b.z);
    // (T - delta, T] with delta = T leaves t = 0 to a second interval
    let intervals: Vec<Interval> = a.plan.intervals.iter().map(|l| l.interval).collect();
    assert_eq!(intervals, vec![Interval { lo: 1, hi: 30 }, Interval { lo: 0, hi: 0 }]);
}
