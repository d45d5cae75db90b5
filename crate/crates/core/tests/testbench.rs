mod common;

use std::collections::HashSet;

use simbench_core::data::Domain;
use simbench_core::explain::{Explanation, Method};
use simbench_core::testbench::{
    score_session, AnswerMode, ItemKind, PhaseKind, Quadrant, ResponseRecord, TestKind, TestSession, TestbenchError,
};
use simbench_core::workbench::Workbench;

fn quadrant_counts(s: &TestSession, ids: &[String]) -> [usize; 4] {
    let mut c = [0; 4];
    for id in ids {
        let q = s.item(id).unwrap().quadrant;
        c[Quadrant::ALL.iter().position(|&a| a == q).unwrap()] += 1;
    }
    c
}

/// Checks a session against the data and models it was drawn from.
fn check(wb: &Workbench, s: &TestSession, n: usize) {
    let ex = wb.explainers();
    let model = ex.model_for(s.method);
    for item in &s.items {
        let x = &item.instance;
        assert_eq!(item.prediction, model.predict(x));
        assert_eq!(item.quadrant, Quadrant::of(item.gold, item.prediction));
        let (split, index) = item.id.rsplit_once('-').unwrap();
        let index: usize = index.parse().unwrap();
        assert_eq!(&wb.data.instances[index].features, x);
        assert_eq!(wb.data.instances[index].label, item.gold);
        let pool = if split.ends_with("val") { &wb.data.split.validation } else { &wb.data.split.test };
        assert!(pool.contains(&index), "{} is not in its split", item.id);
        if let Some(e) = &item.explanation {
            assert_eq!(e.method(), s.method);
            let described = match e {
                Explanation::Lime(e) => &e.instance,
                Explanation::Anchor(e) => &e.instance,
                Explanation::Prototype(e) => &e.instance,
                Explanation::DecisionBoundary(e) => &e.instance,
                Explanation::Composite(e) => &e.instance,
            };
            assert_eq!(described, x, "explanations describe the original input");
        }
    }
    match s.kind {
        TestKind::Forward => {
            let learn = s.phase(PhaseKind::Learn).unwrap();
            let pre = s.phase(PhaseKind::Pre).unwrap();
            let post = s.phase(PhaseKind::Post).unwrap();
            let le = s.phase(PhaseKind::LearnExplain).unwrap();
            assert_eq!(pre.items, post.items);
            assert_eq!(learn.items, le.items);
            assert_eq!(pre.items.len(), n);
            let a: HashSet<&String> = learn.items.iter().collect();
            assert!(pre.items.iter().all(|i| !a.contains(i)));
            assert_eq!(quadrant_counts(s, &learn.items), [learn.items.len() / 4; 4]);
            assert_eq!(quadrant_counts(s, &pre.items), [n / 4; 4]);
            assert!(!pre.show_explanation && !post.show_explanation && !learn.show_explanation);
            assert!(le.show_explanation && learn.show_gold && !pre.show_prediction);
            assert_eq!(le.answers, AnswerMode::Rating);
            for id in &learn.items {
                let item = s.item(id).unwrap();
                assert_eq!(item.kind, ItemKind::ForwardLearning);
                assert!(item.explanation.is_some());
            }
            for id in &pre.items {
                let item = s.item(id).unwrap();
                assert_eq!(item.kind, ItemKind::ForwardPredict);
                assert!(item.explanation.is_none() && item.counterfactual.is_none());
            }
        }
        TestKind::Counterfactual => {
            let pre = s.phase(PhaseKind::Pre).unwrap();
            let post = s.phase(PhaseKind::Post).unwrap();
            assert_eq!(pre.items, post.items);
            assert_eq!(pre.items.len(), n);
            assert_eq!(s.items.len(), n);
            assert_eq!(quadrant_counts(s, &pre.items), [n / 4; 4]);
            assert!(!pre.show_explanation && post.show_explanation);
            assert_eq!(post.answers, AnswerMode::PredictionAndRating);
            let mut flipped = 0;
            for item in &s.items {
                assert_eq!(item.kind, ItemKind::Counterfactual);
                let cf = item.counterfactual.as_ref().unwrap();
                assert_ne!(cf.instance, item.instance);
                assert_eq!(cf.prediction, model.predict(&cf.instance));
                assert_eq!(cf.flipped, cf.prediction != item.prediction);
                assert_eq!(item.truth(), cf.prediction);
                assert!(item.explanation.is_some());
                flipped += usize::from(cf.flipped);
            }
            assert_eq!(flipped * 2, n);
        }
    }
}

#[test]
fn forward_sessions_are_balanced_and_disjoint() {
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        for method in [Method::Lime, Method::Prototype, Method::DecisionBoundary] {
            let s = wb.bench().make_forward_session("s", method, 16, 32, common::SEED).unwrap();
            check(wb, &s, 32);
        }
    }
}

#[test]
fn counterfactual_sessions_flip_exactly_half() {
    for domain in [Domain::Tabular, Domain::Text] {
        let wb = common::workbench(domain);
        for method in [Method::Lime, Method::Prototype, Method::DecisionBoundary] {
            let s = wb.bench().make_counterfactual_session("c", method, 32, common::SEED).unwrap();
            check(wb, &s, 32);
        }
    }
}

#[test]
fn sessions_are_deterministic_and_round_trip() {
    let wb = common::workbench(Domain::Text);
    let a = wb.bench().make_session("x", Method::Prototype, TestKind::Counterfactual, 16, 8).unwrap();
    let b = wb.bench().make_session("x", Method::Prototype, TestKind::Counterfactual, 16, 8).unwrap();
    let ja = serde_json::to_string(&a).unwrap();
    assert_eq!(ja, serde_json::to_string(&b).unwrap());
    let back: TestSession = serde_json::from_str(&ja).unwrap();
    assert_eq!(back, a);
    assert_eq!(serde_json::to_string(&back).unwrap(), ja);
    let json: serde_json::Value = serde_json::from_str(&ja).unwrap();
    assert_eq!(json["kind"], "counterfactual");
    assert_eq!(json["items"][0]["kind"], "counterfactual");
    assert_eq!(json["phases"][1]["kind"], "post");
}

#[test]
fn invalid_sizes_are_rejected() {
    let wb = common::workbench(Domain::Tabular);
    for n in [0, 6, 30] {
        assert!(matches!(
            wb.bench().make_counterfactual_session("c", Method::Lime, n, 1),
            Err(TestbenchError::InvalidSize(m)) if m == n
        ));
        assert!(matches!(
            wb.bench().make_forward_session("f", Method::Lime, 16, n, 1),
            Err(TestbenchError::InvalidSize(_))
        ));
    }
}

#[test]
fn oversized_requests_report_the_short_quadrant() {
    let wb = common::workbench(Domain::Tabular);
    match wb.bench().make_forward_session("f", Method::Lime, 400, 32, 1) {
        Err(TestbenchError::InsufficientQuadrant { split, need, have, .. }) => {
            assert_eq!(split, "val");
            assert_eq!(need, 100);
            assert!(have < need);
        }
        other => panic!("expected a quadrant shortage, got {other:?}"),
    }
}

#[test]
fn quadrants_and_kinds() {
    assert_eq!(Quadrant::of(1, 1), Quadrant::TP);
    assert_eq!(Quadrant::of(0, 1), Quadrant::FP);
    assert_eq!(Quadrant::of(0, 0), Quadrant::TN);
    assert_eq!(Quadrant::of(1, 0), Quadrant::FN);
    assert_eq!("forward".parse::<TestKind>().unwrap(), TestKind::Forward);
    assert_eq!(TestKind::Counterfactual.to_string(), "counterfactual");
    assert!("sideways".parse::<TestKind>().is_err());
    assert_eq!(PhaseKind::LearnExplain.to_string(), "learn_explain");
    assert!(!AnswerMode::Rating.takes_prediction() && AnswerMode::Rating.allows_rating());
    assert!(AnswerMode::PredictionAndRating.takes_prediction() && AnswerMode::PredictionAndRating.allows_rating());
    assert!(!AnswerMode::Prediction.allows_rating());
}

fn response(session: &str, item: &str, phase: PhaseKind, class: Option<usize>) -> ResponseRecord {
    ResponseRecord {
        session_id: session.into(),
        item_id: item.into(),
        phase,
        predicted_class: class,
        rating: None,
        elapsed_ms: 1000,
        user_id: "u".into(),
        timestamp_ms: 0,
    }
}

#[test]
fn scoring_counts_items_answered_in_both_phases() {
    let wb = common::workbench(Domain::Tabular);
    let s = wb.bench().make_counterfactual_session("c", Method::Lime, 8, common::SEED).unwrap();
    let ids = s.phase(PhaseKind::Pre).unwrap().items.clone();
    let truth = |i: usize| s.item(&ids[i]).unwrap().truth();
    let mut r = Vec::new();
    // Pre: items 0..4 right, 4..8 wrong. Post: all right except item 7; item 0 never answered in Post.
    for i in 0..8 {
        let t = truth(i);
        r.push(response("c", &ids[i], PhaseKind::Pre, Some(if i < 4 { t } else { 1 - t })));
        if i > 0 {
            r.push(response("c", &ids[i], PhaseKind::Post, Some(if i == 7 { 1 - t } else { t })));
        }
    }
    r.push(response("other", "nothing", PhaseKind::Pre, Some(0)));
    let score = score_session(&s, &r).unwrap();
    assert_eq!(score.items, 7);
    assert!((score.pre - 300.0 / 7.0).abs() < 1e-12);
    assert!((score.post - 600.0 / 7.0).abs() < 1e-12);
    assert!((score.change - 300.0 / 7.0).abs() < 1e-12);

    let mut dup = r.clone();
    dup.push(response("c", &ids[3], PhaseKind::Pre, Some(0)));
    assert!(matches!(score_session(&s, &dup), Err(TestbenchError::DuplicateResponse { .. })));
    let mut stray = r.clone();
    stray.push(response("c", "tabular-test-99999", PhaseKind::Post, Some(0)));
    assert!(matches!(score_session(&s, &stray), Err(TestbenchError::UnknownItem { .. })));
    let mut wrong_phase = r;
    wrong_phase.push(response("c", &ids[1], PhaseKind::Learn, None));
    assert!(matches!(score_session(&s, &wrong_phase), Err(TestbenchError::UnknownItem { .. })));

    let empty = score_session(&s, &[]).unwrap();
    assert_eq!((empty.items, empty.pre, empty.change), (0, 0.0, 0.0));
}

#[test]
fn forward_scores_use_the_model_prediction_not_the_label() {
    let wb = common::workbench(Domain::Tabular);
    let s = wb.bench().make_forward_session("f", Method::Prototype, 8, 8, common::SEED).unwrap();
    let ids = s.phase(PhaseKind::Pre).unwrap().items.clone();
    let mut r = Vec::new();
    for id in &ids {
        let item = s.item(id).unwrap();
        r.push(response("f", id, PhaseKind::Pre, Some(item.gold)));
        r.push(response("f", id, PhaseKind::Post, Some(item.prediction)));
    }
    let score = score_session(&s, &r).unwrap();
    // Half of a balanced set are model errors, so echoing the label scores 50%.
    assert_eq!(score.pre, 50.0);
    assert_eq!(score.post, 100.0);
    assert_eq!(score.change, 50.0);
}
