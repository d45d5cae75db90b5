//! Plain-text rendering of explanations for terminals.

use std::fmt::Write;

use super::{AnchorExplanation, BoundaryBundle, BoundaryExplanation, Explanation, LimeExplanation, DISPLAYED_STEPS};
use crate::models::PrototypeExplanation;

fn class_name(c: usize) -> &'static str {
    if c == 1 {
        "positive"
    } else {
        "negative"
    }
}

fn lime(out: &mut String, e: &LimeExplanation) {
    let _ = writeln!(out, "LIME");
    for f in &e.features {
        let _ = writeln!(out, "  {:<32} {:+.3}", f.label, f.weight);
    }
    if e.features.is_empty() {
        let _ = writeln!(out, "  (no feature changes the output locally)");
    }
    let _ = writeln!(out, "  intercept        {:.3}", e.intercept);
    let _ = writeln!(out, "  sum of weights   {:.3}", e.weight_sum);
    let _ = writeln!(out, "  model output     {:.3}", e.predicted);
}

fn anchor(out: &mut String, e: &AnchorExplanation) {
    let _ = writeln!(out, "Anchor");
    let rule = if e.predicates.is_empty() {
        "(any input)".to_string()
    } else {
        e.predicates.iter().map(|p| p.label.clone()).collect::<Vec<_>>().join(" AND ")
    };
    let _ = writeln!(
        out,
        "  IF {rule} THEN predict {} (precision {:.2}{})",
        class_name(e.prediction),
        e.precision,
        if e.verified { "" } else { ", unverified" }
    );
}

fn prototype(out: &mut String, e: &PrototypeExplanation) {
    let _ = writeln!(out, "Prototype");
    let _ = writeln!(out, "  predicted {} with score {:.3}", class_name(e.predicted_class), e.score);
    let _ = writeln!(out, "  most similar prototype: {}", e.example_text);
    if e.importances.is_empty() {
        let _ = writeln!(out, "  (no feature importance meets the display threshold)");
    }
    for f in &e.importances {
        let _ = writeln!(out, "  {:<32} {:+.3}", f.label, f.score);
    }
}

fn boundary(out: &mut String, e: &BoundaryExplanation) {
    let _ = writeln!(out, "Decision Boundary");
    let _ = writeln!(out, "  start: evidence margin {:+.3} ({})", e.original_margin, class_name(e.original_prediction));
    if e.steps.len() > DISPLAYED_STEPS {
        let _ = writeln!(out, "  ... {} earlier steps", e.steps.len() - DISPLAYED_STEPS);
    }
    for s in e.displayed() {
        let _ = writeln!(
            out,
            "  {} -> {}: evidence margin {:+.3} ({})",
            s.edit.from_label,
            s.edit.to_label,
            s.margin,
            class_name(s.prediction)
        );
    }
}

fn bundle(out: &mut String, e: &BoundaryBundle) {
    let _ = writeln!(out, "Decision Boundary");
    let edits: Vec<String> = e.edits.iter().map(|d| format!("{} -> {}", d.from_label, d.to_label)).collect();
    let _ = writeln!(
        out,
        "  {}: evidence margin {:+.3} -> {:+.3} ({})",
        edits.join(", "),
        e.original_margin,
        e.margin,
        class_name(e.prediction)
    );
}

pub fn render(e: &Explanation) -> String {
    let mut out = String::new();
    match e {
        Explanation::Lime(x) => lime(&mut out, x),
        Explanation::Anchor(x) => anchor(&mut out, x),
        Explanation::Prototype(x) => prototype(&mut out, x),
        Explanation::DecisionBoundary(x) => boundary(&mut out, x),
        Explanation::Composite(x) => {
            lime(&mut out, &x.lime);
            anchor(&mut out, &x.anchor);
            bundle(&mut out, &x.boundary);
            prototype(&mut out, &x.prototype);
        }
    }
    out
}
