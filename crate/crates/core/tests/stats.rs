use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simbench_core::data::Domain;
use simbench_core::explain::Method;
use simbench_core::par::Parallelism;
use simbench_core::stats::{
    analyze, block_bootstrap_change, fit_logistic, quantile, random_effects_pre, rating_regression, AnalysisConfig,
    Condition, Observation, RatingScale, ResponseTable, StatsError, VARIANCE_FLOOR,
};
use simbench_core::testbench::{PhaseKind, TestKind};

const PAR: Parallelism = Parallelism::Parallel;

fn cond(kind: TestKind, method: Method) -> Condition {
    Condition {
        kind,
        domain: Domain::Tabular,
        method,
    }
}

fn lime() -> Condition {
    cond(TestKind::Forward, Method::Lime)
}

fn obs(user: &str, c: Condition, item: &str, phase: PhaseKind, correct: bool) -> Observation {
    Observation {
        user: user.into(),
        condition: c,
        item: item.into(),
        phase,
        correct: Some(correct),
        rating: None,
    }
}

/// Pre and Post rows for every (user, item) with the given correctness.
fn paired(c: Condition, users: usize, items: usize, f: impl Fn(usize, usize) -> (bool, bool)) -> Vec<Observation> {
    let mut rows = Vec::new();
    for u in 0..users {
        for i in 0..items {
            let (a, b) = f(u, i);
            rows.push(obs(&format!("u{u}"), c, &format!("i{i}"), PhaseKind::Pre, a));
            rows.push(obs(&format!("u{u}"), c, &format!("i{i}"), PhaseKind::Post, b));
        }
    }
    rows
}

#[test]
fn all_correct_table_has_no_change() {
    let table = ResponseTable { rows: paired(lime(), 5, 8, |_, _| (true, true)) };
    let e = block_bootstrap_change(&table, lime(), 10_000, 1, PAR).unwrap();
    assert_eq!((e.change, e.ci_low, e.ci_high, e.p_value), (0.0, 0.0, 0.0, 1.0));
    assert_eq!((e.pre, e.post), (100.0, 100.0));
    assert_eq!((e.users, e.items, e.pairs, e.replicates_used), (5, 8, 40, 10_000));
}

#[test]
fn synthetic_improvement_fixture() {
    // Eight users, sixteen items; user u misses items 2u and 2u+1 in Pre only.
    let table = ResponseTable {
        rows: paired(lime(), 8, 16, |u, i| (i / 2 != u, true)),
    };
    let e = block_bootstrap_change(&table, lime(), 10_000, 7, PAR).unwrap();
    assert!((e.change - 12.5).abs() < 0.1);
    assert!(e.ci_low > 0.0 && e.ci_high > e.change);
    assert!(e.p_value < 0.05);
    assert_eq!(e.post, 100.0);
    assert_eq!(e.pre, 87.5);
}

#[test]
fn unpaired_answers_are_left_out() {
    let mut rows = paired(lime(), 3, 4, |u, i| ((u + i) % 2 == 0, true));
    rows.push(obs("u0", lime(), "extra", PhaseKind::Pre, false));
    rows.push(obs("u9", lime(), "i0", PhaseKind::Post, true));
    let e = block_bootstrap_change(&ResponseTable { rows }, lime(), 100, 1, PAR).unwrap();
    assert_eq!((e.users, e.items, e.pairs), (3, 4, 12));
}

#[test]
fn bootstrap_needs_two_users_and_two_items() {
    let table = ResponseTable { rows: paired(lime(), 1, 5, |_, _| (false, true)) };
    assert!(matches!(
        block_bootstrap_change(&table, lime(), 100, 0, PAR),
        Err(StatsError::InsufficientData(_))
    ));
    let table = ResponseTable { rows: paired(lime(), 4, 1, |_, _| (false, true)) };
    assert!(block_bootstrap_change(&table, lime(), 100, 0, PAR).is_err());
    let table = ResponseTable { rows: paired(lime(), 4, 4, |_, _| (false, true)) };
    assert!(block_bootstrap_change(&table, lime(), 0, 0, PAR).is_err());
}

/// Every equally likely (user draw sequence, item draw sequence) for a 3×3 table.
fn exact_distribution(diff: &[[f64; 3]; 3]) -> Vec<f64> {
    let seqs: Vec<[usize; 3]> = (0..27).map(|k| [k / 9, (k / 3) % 3, k % 3]).collect();
    let mut out = Vec::new();
    for us in &seqs {
        for is in &seqs {
            let mut mu = [0.0; 3];
            let mut mi = [0.0; 3];
            us.iter().for_each(|&u| mu[u] += 1.0);
            is.iter().for_each(|&i| mi[i] += 1.0);
            let (mut num, mut den) = (0.0, 0.0);
            for u in 0..3 {
                for i in 0..3 {
                    num += mu[u] * mi[i] * diff[u][i];
                    den += mu[u] * mi[i];
                }
            }
            out.push(100.0 * num / den);
        }
    }
    out
}

#[test]
fn bootstrap_matches_exhaustive_enumeration() {
    // Correctness pattern: Pre/Post per (user, item).
    let pattern = [
        [(false, true), (true, true), (false, false)],
        [(true, false), (false, true), (false, true)],
        [(true, true), (false, true), (true, true)],
    ];
    let diff: [[f64; 3]; 3] =
        std::array::from_fn(|u| std::array::from_fn(|i| f64::from(u8::from(pattern[u][i].1)) - f64::from(u8::from(pattern[u][i].0))));
    let table = ResponseTable { rows: paired(lime(), 3, 3, |u, i| pattern[u][i]) };
    let b = 20_000;
    let e = block_bootstrap_change(&table, lime(), b, 3, PAR).unwrap();
    assert!((e.change - 100.0 * 3.0 / 9.0).abs() < 1e-12);

    let mut exact = exact_distribution(&diff);
    let m = exact.len() as f64;
    let le = exact.iter().filter(|&&c| c <= 0.0).count() as f64 / m;
    let ge = exact.iter().filter(|&&c| c >= 0.0).count() as f64 / m;
    let p = 2.0 * le.min(ge);
    let sd = 2.0 * (le.min(ge) * (1.0 - le.min(ge)) / b as f64).sqrt();
    assert!((e.p_value - p).abs() < 4.0 * sd, "p {} vs exact {p}", e.p_value);

    exact.sort_by(f64::total_cmp);
    let q = |x: f64| exact[((m * x).ceil() as usize).min(exact.len() - 1)];
    assert!(e.ci_low >= q(0.015) && e.ci_low <= q(0.035), "low {} outside [{}, {}]", e.ci_low, q(0.015), q(0.035));
    assert!(e.ci_high >= q(0.965) && e.ci_high <= q(0.985), "high {} outside [{}, {}]", e.ci_high, q(0.965), q(0.985));
}

#[test]
fn bootstrap_is_deterministic_across_modes() {
    let table = ResponseTable {
        rows: paired(lime(), 6, 10, |u, i| ((u * 7 + i) % 3 == 0, (u + i) % 4 != 0)),
    };
    let a = block_bootstrap_change(&table, lime(), 2000, 5, Parallelism::Sequential).unwrap();
    let b = block_bootstrap_change(&table, lime(), 2000, 5, Parallelism::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn quantile_interpolates_linearly() {
    let s = [1.0, 2.0, 4.0, 8.0];
    assert_eq!(quantile(&s, 0.0), 1.0);
    assert_eq!(quantile(&s, 1.0), 8.0);
    assert_eq!(quantile(&s, 0.5), 3.0);
    assert!((quantile(&s, 0.9) - 6.8).abs() < 1e-12);
    assert_eq!(quantile(&[5.0], 0.3), 5.0);
}

/// Pre rows only, with each user's accuracy given as (correct, answered).
fn pre_rows(groups: &[(Condition, Vec<(usize, usize)>)]) -> Vec<Observation> {
    let mut rows = Vec::new();
    for (c, users) in groups {
        for (u, &(k, n)) in users.iter().enumerate() {
            for i in 0..n {
                rows.push(obs(&format!("{c}-u{u}"), *c, &format!("i{i}"), PhaseKind::Pre, i < k));
            }
        }
    }
    rows
}

/// The DerSimonian–Laird estimator written out step by step.
fn dl_oracle(groups: &[(Condition, Vec<(usize, usize)>)]) -> (Vec<f64>, f64, f64) {
    let acc: Vec<Vec<f64>> =
        groups.iter().map(|(_, us)| us.iter().map(|&(k, n)| 100.0 * k as f64 / n as f64).collect()).collect();
    let y: Vec<f64> = acc.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).collect();
    let s2: Vec<f64> = acc
        .iter()
        .zip(&y)
        .map(|(a, m)| if a.len() > 1 { a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64 } else { f64::NAN })
        .collect();
    let mut pooled_num = 0.0;
    let mut pooled_den = 0.0;
    for (a, s) in acc.iter().zip(&s2) {
        if a.len() > 1 {
            pooled_num += (a.len() - 1) as f64 * s;
            pooled_den += (a.len() - 1) as f64;
        }
    }
    let v: Vec<f64> = acc
        .iter()
        .zip(&s2)
        .map(|(a, s)| {
            let s = if a.len() > 1 {
                *s
            } else if pooled_den > 0.0 {
                pooled_num / pooled_den
            } else {
                0.0
            };
            (s / a.len() as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let w: Vec<f64> = v.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let ybar: f64 = (0..y.len()).map(|g| w[g] * y[g]).sum::<f64>() / sw;
    let q: f64 = (0..y.len()).map(|g| w[g] * (y[g] - ybar).powi(2)).sum();
    let c = sw - w.iter().map(|x| x * x).sum::<f64>() / sw;
    let tau2 = ((q - (y.len() as f64 - 1.0)) / c).max(0.0);
    let wr: Vec<f64> = v.iter().map(|v| 1.0 / (v + tau2)).collect();
    let mu: f64 = (0..y.len()).map(|g| wr[g] * y[g]).sum::<f64>() / wr.iter().sum::<f64>();
    let shrunk = (0..y.len()).map(|g| y[g] + v[g] / (v[g] + tau2) * (mu - y[g])).collect();
    (shrunk, tau2, mu)
}

fn groups() -> Vec<(Condition, Vec<(usize, usize)>)> {
    vec![
        (cond(TestKind::Forward, Method::Lime), vec![(20, 32), (25, 32), (18, 32), (30, 32)]),
        (cond(TestKind::Forward, Method::Anchor), vec![(28, 32), (31, 32), (29, 32)]),
        (cond(TestKind::Forward, Method::Prototype), vec![(10, 32), (14, 32), (12, 32), (9, 32), (16, 32)]),
        (cond(TestKind::Counterfactual, Method::Lime), vec![(22, 32)]),
    ]
}

#[test]
fn random_effects_match_the_formula_oracle() {
    let g = groups();
    let re = random_effects_pre(&ResponseTable { rows: pre_rows(&g) }).unwrap();
    let (shrunk, tau2, mu) = dl_oracle(&g);
    assert!(tau2 > 0.0);
    assert!((re.tau2 - tau2).abs() <= 1e-9 * tau2.max(1.0));
    assert!((re.grand_mean - mu).abs() < 1e-9);
    for (c, _) in &g {
        let m = re.means.iter().find(|m| m.condition == *c).unwrap();
        let k = g.iter().position(|x| x.0 == *c).unwrap();
        assert!((m.shrunk - shrunk[k]).abs() < 1e-9, "{c}: {} vs {}", m.shrunk, shrunk[k]);
        let lo = m.raw.min(re.grand_mean);
        let hi = m.raw.max(re.grand_mean);
        assert!(m.shrunk >= lo - 1e-12 && m.shrunk <= hi + 1e-12);
    }
}

#[test]
fn homogeneous_conditions_shrink_fully() {
    // Identical user accuracies within and across conditions: τ² = 0.
    let same = vec![(20, 32), (24, 32), (22, 32)];
    let g = vec![
        (cond(TestKind::Forward, Method::Lime), same.clone()),
        (cond(TestKind::Forward, Method::Anchor), same.clone()),
        (cond(TestKind::Forward, Method::Composite), same),
    ];
    let re = random_effects_pre(&ResponseTable { rows: pre_rows(&g) }).unwrap();
    assert_eq!(re.tau2, 0.0);
    for m in &re.means {
        assert!((m.shrunk - re.grand_mean).abs() < 1e-9);
    }
}

#[test]
fn zero_variance_conditions_use_the_floor() {
    let g = vec![
        (cond(TestKind::Forward, Method::Lime), vec![(16, 32), (16, 32)]),
        (cond(TestKind::Forward, Method::Anchor), vec![(32, 32), (32, 32)]),
    ];
    let re = random_effects_pre(&ResponseTable { rows: pre_rows(&g) }).unwrap();
    for m in &re.means {
        assert_eq!(m.variance, VARIANCE_FLOOR);
        assert!((m.shrunk - m.raw).abs() < 1e-6);
    }
}

#[test]
fn a_precise_condition_barely_moves() {
    let many: Vec<(usize, usize)> = (0..400).map(|u| (20 + u % 3, 32)).collect();
    let g = vec![
        (cond(TestKind::Forward, Method::Lime), many),
        (cond(TestKind::Forward, Method::Anchor), vec![(5, 32), (30, 32)]),
        (cond(TestKind::Forward, Method::Prototype), vec![(31, 32), (8, 32)]),
    ];
    let re = random_effects_pre(&ResponseTable { rows: pre_rows(&g) }).unwrap();
    let precise = &re.means[0];
    assert!((re.grand_mean - precise.raw).abs() < 0.05);
    assert!((precise.shrunk - precise.raw).abs() < 0.05);
    assert!(re.means[1..].iter().all(|m| (m.shrunk - m.raw).abs() > (precise.shrunk - precise.raw).abs()));
}

#[test]
fn random_effects_need_two_conditions() {
    let g = vec![(lime(), vec![(3, 4), (2, 4)])];
    assert!(matches!(
        random_effects_pre(&ResponseTable { rows: pre_rows(&g) }),
        Err(StatsError::InsufficientData(_))
    ));
}

fn rated(user: &str, item: usize, correct: bool, rating: u8) -> Observation {
    Observation {
        user: user.into(),
        condition: cond(TestKind::Counterfactual, Method::Lime),
        item: format!("i{item}"),
        phase: PhaseKind::Post,
        correct: Some(correct),
        rating: Some(rating),
    }
}

#[test]
fn logistic_fit_solves_the_score_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..300).map(|_| rng.gen_range(1..=7) as f64).collect();
    let y: Vec<bool> = x.iter().map(|&v| rng.gen::<f64>() < 1.0 / (1.0 + (-(-2.0 + 0.5 * v)).exp())).collect();
    let fit = fit_logistic(&x, &y);
    assert!(!fit.separation);
    let (mut g0, mut g1) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(&y) {
        let p = 1.0 / (1.0 + (-(fit.intercept + fit.slope * xi)).exp());
        g0 += f64::from(u8::from(yi)) - p;
        g1 += (f64::from(u8::from(yi)) - p) * xi;
    }
    assert!(g0.abs() < 1e-6 && g1.abs() < 1e-6, "score ({g0}, {g1})");
    assert!((fit.slope - 0.5).abs() < 0.25);
}

#[test]
fn constant_ratings_give_a_flat_fit() {
    let x = vec![4.0; 40];
    let y: Vec<bool> = (0..40).map(|i| i % 4 != 0).collect();
    let fit = fit_logistic(&x, &y);
    assert_eq!(fit.slope, 0.0);
    assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
    let rows: Vec<Observation> = (0..40).map(|i| rated(&format!("u{}", i % 5), i, i % 4 != 0, 4)).collect();
    let e = rating_regression(&ResponseTable { rows }, RatingScale::Raw, 500, 1, PAR).unwrap();
    assert_eq!(e.effect, 0.0);
    let rows: Vec<Observation> = (0..40).map(|i| rated(&format!("u{}", i % 5), i, i % 4 != 0, 4)).collect();
    let e = rating_regression(&ResponseTable { rows }, RatingScale::UserNormalized, 500, 1, PAR).unwrap();
    assert_eq!(e.effect, 0.0);
}

#[test]
fn perfectly_predictive_ratings_are_flagged_as_separated() {
    let rows: Vec<Observation> =
        (0..60).map(|i| {
            let rating = (i % 7 + 1) as u8;
            rated(&format!("u{}", i % 6), i, rating >= 5, rating)
        })
        .collect();
    let table = ResponseTable { rows };
    let e = rating_regression(&table, RatingScale::Raw, 500, 1, PAR).unwrap();
    assert!(e.fit.separation);
    assert!(e.fit.slope.is_finite() && e.fit.slope > 0.0);
    assert!(e.effect > 50.0, "effect {}", e.effect);
    assert!(e.ci_low > 0.0);
    let n = rating_regression(&table, RatingScale::UserNormalized, 500, 1, PAR).unwrap();
    assert!(n.effect > 0.0);
    assert_eq!((e.rows, e.users), (60, 6));
}

#[test]
fn independent_ratings_have_intervals_covering_zero() {
    let mut covered = 0;
    for trial in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let rows: Vec<Observation> = (0..200)
            .map(|i| rated(&format!("u{}", i % 20), i, rng.gen::<f64>() < 0.7, rng.gen_range(1..=7)))
            .collect();
        let e = rating_regression(&ResponseTable { rows }, RatingScale::Raw, 400, trial, PAR).unwrap();
        if e.ci_low <= 0.0 && e.ci_high >= 0.0 {
            covered += 1;
        }
    }
    assert!(covered >= 34, "{covered}/40 intervals covered zero");
}

#[test]
fn rating_regression_needs_enough_rows() {
    let rows: Vec<Observation> = (0..29).map(|i| rated("u", i, true, 5)).collect();
    assert!(matches!(
        rating_regression(&ResponseTable { rows }, RatingScale::Raw, 100, 0, PAR),
        Err(StatsError::InsufficientData(_))
    ));
}

#[test]
fn analyze_is_deterministic_and_notes_gaps() {
    let mut rows = paired(lime(), 6, 8, |u, i| ((u + i) % 3 != 0, (u * i) % 5 != 1));
    rows.extend(paired(cond(TestKind::Forward, Method::Anchor), 4, 8, |u, i| (i % 2 == 0, u % 2 == 0)));
    rows.extend(paired(cond(TestKind::Counterfactual, Method::Prototype), 1, 8, |_, i| (i % 2 == 0, true)));
    let table = ResponseTable { rows };
    let config = AnalysisConfig { replicates: 1000, seed: 4, mode: PAR };
    let a = analyze(&table, &config);
    let b = analyze(&table, &AnalysisConfig { mode: Parallelism::Sequential, ..config.clone() });
    assert_eq!(a, b);
    assert_eq!(a.conditions.len(), 3);
    let single = a.conditions.iter().find(|c| c.users == 1).unwrap();
    assert!(single.change.is_none() && single.note.is_some());
    assert!(a.rating_raw.is_none());
    assert!(a.notes.iter().any(|n| n.contains("rating")));
    let text = a.render();
    assert!(text.contains("forward simulation") && text.contains("counterfactual simulation"));
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<simbench_core::stats::AnalysisReport>(&json).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn change_is_the_paired_mean_difference(bits in proptest::collection::vec(any::<(bool, bool)>(), 12)) {
        let table = ResponseTable { rows: paired(lime(), 3, 4, |u, i| bits[u * 4 + i]) };
        let e = block_bootstrap_change(&table, lime(), 200, 0, PAR).unwrap();
        let pre = bits.iter().filter(|b| b.0).count() as f64;
        let post = bits.iter().filter(|b| b.1).count() as f64;
        prop_assert!((e.change - 100.0 * (post - pre) / 12.0).abs() < 1e-9);
        prop_assert!(e.ci_low <= e.ci_high);
        prop_assert!(e.p_value >= 1.0 / 200.0 && e.p_value <= 1.0);
        prop_assert!(e.ci_low >= -100.0 && e.ci_high <= 100.0);
    }

    #[test]
    fn shrunken_means_lie_between_raw_and_grand_mean(
        accs in proptest::collection::vec(proptest::collection::vec(0usize..=16, 1..6), 2..6),
    ) {
        let methods = Method::ALL;
        let g: Vec<(Condition, Vec<(usize, usize)>)> = accs
            .iter()
            .enumerate()
            .map(|(k, us)| (cond(TestKind::Forward, methods[k % 5]), us.iter().map(|&c| (c, 16)).collect()))
            .collect();
        let mut seen = BTreeMap::new();
        for (c, _) in &g {
            *seen.entry(*c).or_insert(0) += 1;
        }
        prop_assume!(seen.values().all(|&n| n == 1));
        let re = random_effects_pre(&ResponseTable { rows: pre_rows(&g) }).unwrap();
        let (shrunk, tau2, _) = dl_oracle(&g);
        prop_assert!((re.tau2 - tau2).abs() <= 1e-9 * tau2.max(1.0));
        for (m, s) in re.means.iter().zip(&shrunk) {
            prop_assert!(m.shrunk >= m.raw.min(re.grand_mean) - 1e-9);
            prop_assert!(m.shrunk <= m.raw.max(re.grand_mean) + 1e-9);
            prop_assert!((m.shrunk - s).abs() < 1e-9);
        }
    }
}
