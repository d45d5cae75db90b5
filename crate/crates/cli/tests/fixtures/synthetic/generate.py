"""Writes the synthetic response fixture and the expected analysis values.

Three conditions, answered by hand-built patterns:

* forward/tabular/lime: 8 users x 16 items. User u misses items 2u and 2u+1
  in Pre and nothing in Post, so every user improves by exactly 12.5 points.
* counterfactual/tabular/prototype: the same 8 users x 8 items, Post answers
  rated 1-7 with correctness loosely tied to the rating.
* counterfactual/text/anchor: 3 further users x 8 items.

oracle.json holds the quantities that do not depend on bootstrap draws,
computed here with numpy and statsmodels.

    python3 generate.py
"""

import json
from pathlib import Path

import numpy as np
import statsmodels.api as sm

HERE = Path(__file__).parent


def quadrant(gold, prediction):
    if prediction == 1:
        return "TP" if gold == prediction else "FP"
    return "TN" if gold == prediction else "FN"


def item(item_id, kind, k, counterfactual):
    gold, prediction = k % 2, (k // 2) % 2
    entry = {
        "id": item_id,
        "kind": kind,
        "instance": [k % 3, k % 5],
        "text": f"a={k % 3}, b={k % 5}",
        "gold": gold,
        "prediction": prediction,
        "quadrant": quadrant(gold, prediction),
        "counterfactual": None,
        "explanation": None,
    }
    if counterfactual:
        flipped = k % 2 == 0
        entry["counterfactual"] = {
            "instance": [(k + 1) % 3, k % 5],
            "text": f"a={(k + 1) % 3}, b={k % 5}",
            "prediction": 1 - prediction if flipped else prediction,
            "flipped": flipped,
        }
    return entry


def truth(entry):
    cf = entry["counterfactual"]
    return cf["prediction"] if cf else entry["prediction"]


def phase(kind, ids, answers, show_gold, show_explanation):
    return {
        "kind": kind,
        "items": ids,
        "answers": answers,
        "show_gold": show_gold,
        "show_prediction": show_gold,
        "show_explanation": show_explanation,
    }


def forward_session(sid, prefix):
    learn = [item(f"{prefix}-learn-{k}", "forward-learning", k, False) for k in range(4)]
    predict = [item(f"{prefix}-{k}", "forward-predict", k, False) for k in range(16)]
    learn_ids = [i["id"] for i in learn]
    predict_ids = [i["id"] for i in predict]
    return {
        "id": sid,
        "method": "lime",
        "domain": "tabular",
        "kind": "forward",
        "seed": 0,
        "phases": [
            phase("learn", learn_ids, "none", True, False),
            phase("pre", predict_ids, "prediction", False, False),
            phase("learn_explain", learn_ids, "rating", True, True),
            phase("post", predict_ids, "prediction", False, False),
        ],
        "items": learn + predict,
        "retries": 0,
    }


def counterfactual_session(sid, prefix, method, domain):
    items = [item(f"{prefix}-{k}", "counterfactual", k, True) for k in range(8)]
    ids = [i["id"] for i in items]
    return {
        "id": sid,
        "method": method,
        "domain": domain,
        "kind": "counterfactual",
        "seed": 0,
        "phases": [
            phase("pre", ids, "prediction", True, False),
            phase("post", ids, "prediction_and_rating", True, True),
        ],
        "items": items,
        "retries": 0,
    }


def build():
    sessions, responses = [], []
    clock = [1_700_000_000_000]

    def respond(session, user, entry, phase_kind, correct, rating=None):
        predicted = None
        if correct is not None:
            predicted = truth(entry) if correct else 1 - truth(entry)
        clock[0] += 1000
        responses.append(
            {
                "session_id": session["id"],
                "item_id": entry["id"],
                "phase": phase_kind,
                "predicted_class": predicted,
                "rating": rating,
                "elapsed_ms": 4000 + (clock[0] // 1000) % 7 * 500,
                "user_id": user,
                "timestamp_ms": clock[0],
            }
        )

    for u in range(8):
        user = f"user{u}"
        s = forward_session(f"fwd-lime-{u}", f"f{u}")
        sessions.append(s)
        learn, predict = s["items"][:4], s["items"][4:]
        for k, e in enumerate(predict):
            respond(s, user, e, "pre", k not in (2 * u, 2 * u + 1))
        for k, e in enumerate(learn):
            respond(s, user, e, "learn_explain", None, rating=1 + (u + k) % 7)
        for e in predict:
            respond(s, user, e, "post", True)

        s = counterfactual_session(f"cf-proto-{u}", f"p{u}", "prototype", "tabular")
        sessions.append(s)
        for k, e in enumerate(s["items"]):
            respond(s, user, e, "pre", (u + k) % 3 != 0)
        for k, e in enumerate(s["items"]):
            rating = 1 + (3 * u + 5 * k) % 7
            correct = (rating >= 4) != ((u * k) % 5 == 1)
            respond(s, user, e, "post", correct, rating=rating)

    for u in range(3):
        user = f"reader{u}"
        s = counterfactual_session(f"cf-anchor-{u}", f"a{u}", "anchor", "text")
        sessions.append(s)
        for k, e in enumerate(s["items"]):
            respond(s, user, e, "pre", (u * k + u) % 4 != 0)
        for k, e in enumerate(s["items"]):
            rating = 1 + (2 * u + 3 * k) % 7
            correct = (rating >= 3) != ((u + k) % 4 == 0)
            respond(s, user, e, "post", correct, rating=rating)
    return sessions, responses


def condition_of(session):
    return (session["kind"], session["domain"], session["method"])


def oracle(sessions, responses):
    by_id = {s["id"]: s for s in sessions}
    rows = []
    for r in responses:
        s = by_id[r["session_id"]]
        e = next(i for i in s["items"] if i["id"] == r["item_id"])
        correct = None if r["predicted_class"] is None else r["predicted_class"] == truth(e)
        rows.append((r["user_id"], condition_of(s), r["item_id"], r["phase"], correct, r["rating"]))

    kind_order = {"forward": 0, "counterfactual": 1}
    domain_order = {"text": 0, "tabular": 1}
    method_order = {m: i for i, m in enumerate(["lime", "anchor", "prototype", "decision_boundary", "composite"])}
    conditions = sorted({c for _, c, *_ in rows}, key=lambda c: (kind_order[c[0]], domain_order[c[1]], method_order[c[2]]))

    # per-user Pre accuracy, DerSimonian-Laird
    y, v, raws = [], [], {}
    groups = {}
    for c in conditions:
        acc = {}
        for user, cond, _, ph, correct, _ in rows:
            if cond == c and ph == "pre" and correct is not None:
                acc.setdefault(user, []).append(correct)
        groups[c] = np.array([100.0 * np.mean(a) for a in acc.values()])
    for c in conditions:
        xs = groups[c]
        y.append(xs.mean())
        v.append(max(xs.var(ddof=1) / len(xs), 1e-6))
    y, v = np.array(y), np.array(v)
    w = 1 / v
    fixed = (w * y).sum() / w.sum()
    q = (w * (y - fixed) ** 2).sum()
    cc = w.sum() - (w**2).sum() / w.sum()
    tau2 = max(0.0, (q - (len(y) - 1)) / cc)
    ws = 1 / (v + tau2)
    grand = (ws * y).sum() / ws.sum()
    shrunk = v / (v + tau2) * grand + tau2 / (v + tau2) * y

    reports = []
    for g, c in enumerate(conditions):
        pre = {(u, i): k for u, cond, i, ph, k, _ in rows if cond == c and ph == "pre" and k is not None}
        post = {(u, i): k for u, cond, i, ph, k, _ in rows if cond == c and ph == "post" and k is not None}
        pairs = sorted(set(pre) & set(post))
        change = 100.0 * (np.mean([post[p] for p in pairs]) - np.mean([pre[p] for p in pairs]))
        reports.append(
            {
                "kind": c[0],
                "domain": c[1],
                "method": c[2],
                "users": len({u for u, cond, *_ in rows if cond == c}),
                "responses": sum(1 for r in rows if r[1] == c),
                "pairs": len(pairs),
                "pre_raw": y[g],
                "pre_shrunk": shrunk[g],
                "change": change,
            }
        )

    rated = [(u, r, k) for u, c, _, ph, k, r in rows if c[0] == "counterfactual" and ph == "post" and r is not None]
    users = sorted({u for u, _, _ in rated})

    def effect(xs, ks, lo, hi):
        fit = sm.Logit(np.array(ks, dtype=float), sm.add_constant(np.array(xs, dtype=float))).fit(disp=0, tol=1e-12)
        a, b = fit.params
        p = lambda x: 1 / (1 + np.exp(-(a + b * x)))
        return {"intercept": a, "slope": b, "effect": 100 * (p(hi) - p(lo))}

    raw = effect([r for _, r, _ in rated], [k for *_, k in rated], 4.0, 5.0)
    zs, ks = [], []
    for user in users:
        mine = [(r, k) for u, r, k in rated if u == user]
        xs = np.array([r for r, _ in mine], dtype=float)
        sd = xs.std()
        zs.extend((xs - xs.mean()) / sd if sd > 0 else np.zeros_like(xs))
        ks.extend(k for _, k in mine)
    normalized = effect(zs, ks, 0.0, 1.0)

    return {
        "conditions": reports,
        "tau2": tau2,
        "grand_mean": grand,
        "rating_rows": len(rated),
        "rating_users": len(users),
        "rating_raw": raw,
        "rating_normalized": normalized,
    }


def main():
    sessions, responses = build()
    out = HERE / "sessions"
    out.mkdir(exist_ok=True)
    for s in sessions:
        (out / f"{s['id']}.json").write_text(json.dumps(s, indent=2) + "\n")
    with open(HERE / "responses.jsonl", "w") as f:
        for r in responses:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")
    expected = oracle(sessions, responses)
    (HERE / "oracle.json").write_text(json.dumps(expected, indent=2, default=float) + "\n")


if __name__ == "__main__":
    main()
