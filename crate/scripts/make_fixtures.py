#!/usr/bin/env python3
"""Regenerate the bundled fixtures under crates/core/fixtures/.

Produces:
  adult_schema.json, adult.csv          Adult-style income data, all columns
                                        categorical (continuous columns binned
                                        into quartiles)
  reviews.tsv                           one-sentence movie reviews, label<TAB>text
  embeddings.txt                        5,000 x 50 word2vec-style text vectors
  checksums.json                        counts computed here, independently of
                                        the Rust loaders, used by the tests

Deterministic: fixed numpy seed. Run from the repository root:
    python3 scripts/make_fixtures.py
"""

import json
import os

import numpy as np

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "fixtures")
rng = np.random.default_rng(20200705)


# --------------------------------------------------------------------------
# tabular
# --------------------------------------------------------------------------

def quartile_labels(values, unit=""):
    edges = np.quantile(values, [0.25, 0.5, 0.75])
    edges = np.unique(np.round(edges).astype(int))
    lo, hi = int(values.min()), int(values.max())
    bounds = [lo] + [e + 1 for e in edges] + [hi + 1]
    labels = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        labels.append(f"{a}-{b - 1}{unit}" if b - 1 > a else f"{a}{unit}")
    idx = np.searchsorted(edges, values, side="left")
    return labels, idx


def make_tabular(n=800):
    age = np.clip(rng.gamma(7.0, 5.5, n) + 17, 17, 90).round()
    sex = rng.choice(2, n, p=[0.67, 0.33])  # Male, Female
    edu = rng.choice(4, n, p=[0.45, 0.25, 0.2, 0.1])
    married_p = np.clip(0.15 + (age - 17) / 60, 0.05, 0.75)
    marital = np.where(rng.random(n) < married_p, 0, rng.choice([1, 2, 3], n, p=[0.55, 0.3, 0.15]))
    relationship = np.where(
        marital == 0,
        np.where(sex == 0, 0, 1),
        np.where(age < 25, rng.choice([2, 3], n, p=[0.4, 0.6]), rng.choice([2, 4], n, p=[0.8, 0.2])),
    )
    occ_p = np.array([
        [0.08, 0.08, 0.22, 0.30, 0.14, 0.18],
        [0.15, 0.12, 0.18, 0.22, 0.18, 0.15],
        [0.35, 0.20, 0.08, 0.10, 0.15, 0.12],
        [0.55, 0.25, 0.04, 0.04, 0.06, 0.06],
    ])
    occupation = np.array([rng.choice(6, p=occ_p[e]) for e in edu])
    workclass = rng.choice(4, n, p=[0.7, 0.1, 0.13, 0.07])
    race = rng.choice(3, n, p=[0.85, 0.1, 0.05])
    country = rng.choice(2, n, p=[0.9, 0.1])
    hours = np.clip(rng.normal(40 + 4 * (occupation <= 1) - 6 * sex, 10, n), 1, 99).round()
    gain_draw = rng.random(n)
    capital_gain = np.where(gain_draw < 0.88, 0, np.where(gain_draw < 0.95, 1, 2))

    logit = (
        -4.3
        + 1.9 * (marital == 0)
        + 0.85 * edu
        + 0.9 * (occupation <= 1)
        + 0.045 * np.clip(age - 25, 0, 30)
        - 0.03 * np.clip(age - 60, 0, 30)
        + 0.035 * (hours - 40)
        + 0.9 * (capital_gain == 1)
        + 3.2 * (capital_gain == 2)
        + 0.45 * (workclass == 1)
        - 0.3 * sex
        - 0.2 * (race != 0)
    )
    label = (rng.random(n) < 1 / (1 + np.exp(-1.4 * logit))).astype(int)

    age_labels, age_idx = quartile_labels(age)
    hour_labels, hour_idx = quartile_labels(hours, "h")
    features = [
        ("age", age_labels, age_idx),
        ("workclass", ["Private", "Self-emp", "Government", "Other"], workclass),
        ("education", ["HS-or-less", "Some-college", "Bachelors", "Advanced"], edu),
        ("marital_status", ["Married", "Never-married", "Divorced", "Other"], marital),
        ("occupation", ["Professional", "Managerial", "Service", "Manual", "Clerical", "Other"], occupation),
        ("relationship", ["Husband", "Wife", "Not-in-family", "Own-child", "Other-relative"], relationship),
        ("race", ["White", "Black", "Other"], race),
        ("sex", ["Male", "Female"], sex),
        ("capital_gain", ["None", "Low", "High"], capital_gain),
        ("hours_per_week", hour_labels, hour_idx),
        ("native_country", ["United-States", "Other"], country),
    ]
    schema = {"features": [{"name": name, "values": list(vals)} for name, vals, _ in features]}
    with open(os.path.join(OUT, "adult_schema.json"), "w") as f:
        json.dump(schema, f, indent=2)
        f.write("\n")
    with open(os.path.join(OUT, "adult.csv"), "w") as f:
        f.write(",".join([name for name, _, _ in features] + ["label"]) + "\n")
        for i in range(n):
            row = [vals[int(idx[i])] for _, vals, idx in features]
            f.write(",".join(row + [str(label[i])]) + "\n")

    # sanity: a one-hot logistic regression should land in the low-to-mid 80s
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import OneHotEncoder

    X = np.stack([idx for _, _, idx in features], axis=1)
    Xo = OneHotEncoder().fit_transform(X)
    clf = LogisticRegression(max_iter=2000).fit(Xo[:560], label[:560])
    print("tabular: positive rate %.3f, logreg holdout acc %.3f"
          % (label.mean(), clf.score(Xo[560:], label[560:])))
    return label


# --------------------------------------------------------------------------
# text
# --------------------------------------------------------------------------

POS_STRONG = "great excellent superb wonderful brilliant masterful terrific outstanding delightful stunning remarkable gorgeous".split()
POS_MILD = "good nice decent fine enjoyable pleasant solid charming funny clever engaging touching moving fresh smart warm".split()
NEG_STRONG = "terrible awful dreadful horrible atrocious abysmal dismal painful unbearable pathetic".split()
NEG_MILD = "bad dull boring weak bland tedious flat messy sloppy silly predictable forgettable tired clumsy stale lifeless".split()
POS_VERBS = "delights shines works succeeds impresses soars charms entertains".split()
NEG_VERBS = "fails drags sucks bores stumbles falters disappoints collapses".split()
NEUTRAL_VERBS = "feels seems looks remains becomes".split()
NOUNS = ("film movie story plot script cast acting director performance picture drama comedy "
         "dialogue ending pacing characters score screenplay premise thriller romance moment scenes humor visuals").split()
ADVERBS = "very really quite truly mostly just rather often always simply surprisingly ultimately".split()
FUNCTION = "the a an and but it this that is was of with in to for its as not too so yet on by than while although , .".split()
NAMES = ["kowalczyk", "brandauer", "okonkwo", "vasquezian", "thorndyke", "halvorsen", "marchetti", "delacroixe"]

POLARITY = {}
for w in POS_STRONG:
    POLARITY[w] = 2.0
for w in POS_MILD:
    POLARITY[w] = 1.0
for w in NEG_STRONG:
    POLARITY[w] = -2.0
for w in NEG_MILD:
    POLARITY[w] = -1.0
for w in POS_VERBS:
    POLARITY[w] = 1.2
for w in NEG_VERBS:
    POLARITY[w] = -1.2


def adj(p_pos):
    if rng.random() < p_pos:
        return rng.choice(POS_STRONG if rng.random() < 0.35 else POS_MILD)
    return rng.choice(NEG_STRONG if rng.random() < 0.35 else NEG_MILD)


def clause(p_pos):
    t = rng.choice(6, p=[0.2, 0.2, 0.2, 0.15, 0.17, 0.08])
    noun = rng.choice(NOUNS)
    if t == 0:
        words = ["the", noun, rng.choice(["is", "was"])]
        if rng.random() < 0.4:
            words.append(rng.choice(ADVERBS))
        words.append(adj(p_pos))
    elif t == 1:
        words = ["a", adj(p_pos), noun]
    elif t == 2:
        verb = rng.choice(POS_VERBS) if rng.random() < p_pos else rng.choice(NEG_VERBS)
        words = ["the", noun, verb]
    elif t == 3:
        words = ["it", rng.choice(NEUTRAL_VERBS), adj(p_pos), "and", adj(p_pos)]
    elif t == 4:
        words = [adj(p_pos), "and", adj(p_pos)]
    else:
        words = ["the", noun, "is", "not", adj(1 - p_pos)]
    if rng.random() < 0.25:
        words += [rng.choice(["with", "in", "of"]), "the", rng.choice(NOUNS)]
    if rng.random() < 0.12:
        words += ["by", rng.choice(NAMES)]
    return words


def clause_score(words):
    s = sum(POLARITY.get(w, 0.0) for w in words)
    if "not" in words:
        s = -s
    return s


def make_text(n=1000):
    lines = []
    labels = []
    for _ in range(n):
        lean = rng.random() < 0.5
        p_pos = 0.9 if lean else 0.1
        first = clause(p_pos)
        words = list(first)
        score = clause_score(first)
        if rng.random() < 0.55:
            conj = rng.choice(["but", "and", ", yet", "while"])
            # contrastive clauses lean the other way a third of the time
            p2 = 1 - p_pos if conj in ("but", ", yet") and rng.random() < 0.33 else p_pos
            second = clause(p2)
            weight = 1.5 if conj in ("but", ", yet") else 1.0
            words += conj.split() + second
            score += weight * clause_score(second)
        words.append(".")
        y = int(score + rng.normal(0, 0.4) > 0)
        if rng.random() < 0.05:
            y = 1 - y
        lines.append(" ".join(words))
        labels.append(y)
    with open(os.path.join(OUT, "reviews.tsv"), "w") as f:
        for y, s in zip(labels, lines):
            f.write(f"{y}\t{s}\n")
    return lines, labels


def make_embeddings(dim=50, total=5000):
    sent = rng.normal(size=dim)
    sent /= np.linalg.norm(sent)

    def unit():
        v = rng.normal(size=dim)
        return v / np.linalg.norm(v)

    topic_adj, topic_noun, topic_verb, topic_adv, topic_fn = (unit() for _ in range(5))
    vocab = []
    vecs = []

    def add(word, center, pol, noise):
        vocab.append(word)
        vecs.append(center + 0.4 * pol * sent + noise * unit())

    for w in POS_STRONG + POS_MILD + NEG_STRONG + NEG_MILD:
        add(w, topic_adj, np.sign(POLARITY[w]), 0.9)
    for w in POS_VERBS + NEG_VERBS:
        add(w, topic_verb, np.sign(POLARITY[w]), 0.9)
    for w in NEUTRAL_VERBS:
        add(w, topic_verb, 0.0, 0.9)
    for w in NOUNS:
        add(w, topic_noun, 0.0, 0.9)
    for w in ADVERBS:
        add(w, topic_adv, 0.0, 0.9)
    for w in FUNCTION:
        add(w, topic_fn, 0.0, 0.9)

    syll = ["ka", "lo", "mi", "ne", "ru", "ta", "vi", "zo", "pe", "shu", "dra", "gol", "fin", "bar", "qui", "sel"]
    topics = [unit() for _ in range(40)]
    seen = set(vocab) | set(NAMES)
    while len(vocab) < total:
        k = rng.integers(2, 5)
        w = "".join(rng.choice(syll) for _ in range(k))
        if w in seen:
            continue
        seen.add(w)
        add(w, topics[rng.integers(len(topics))], 0.0, 1.1)

    mat = np.array(vecs)
    with open(os.path.join(OUT, "embeddings.txt"), "w") as f:
        for w, v in zip(vocab, mat):
            f.write(w + " " + " ".join(f"{x:.5f}" for x in v) + "\n")
    return vocab, np.array([[float(f"{x:.5f}") for x in v] for v in mat])


def main():
    os.makedirs(OUT, exist_ok=True)
    tab_labels = make_tabular()
    lines, text_labels = make_text()
    vocab, mat = make_embeddings()

    # independent checksum computations over the written files
    with open(os.path.join(OUT, "adult.csv")) as f:
        rows = [r.strip().split(",") for r in f.read().strip().split("\n")[1:]]
    tab_counts = [sum(1 for r in rows if r[-1] == "0"), sum(1 for r in rows if r[-1] == "1")]
    assert tab_counts == [int((tab_labels == 0).sum()), int((tab_labels == 1).sum())]

    vocab_set = set(vocab)
    total = oov = 0
    text_counts = [0, 0]
    with open(os.path.join(OUT, "reviews.tsv")) as f:
        for line in f:
            y, s = line.rstrip("\n").split("\t")
            text_counts[int(y)] += 1
            for tok in s.lower().split():
                total += 1
                oov += tok not in vocab_set

    good = vocab.index("good")
    norms = np.linalg.norm(mat, axis=1)
    cos = mat @ mat[good] / (norms * norms[good])
    cos[good] = -np.inf
    nn = int(np.argmax(cos))

    checks = {
        "tabular_rows": len(rows),
        "tabular_label_counts": tab_counts,
        "text_lines": sum(text_counts),
        "text_label_counts": text_counts,
        "text_total_tokens": total,
        "text_oov_tokens": oov,
        "embedding_tokens": len(vocab),
        "embedding_dim": int(mat.shape[1]),
        "nearest_to_good": vocab[nn],
        "nearest_to_good_cosine": round(float(cos[nn]), 9),
    }
    with open(os.path.join(OUT, "checksums.json"), "w") as f:
        json.dump(checks, f, indent=2)
        f.write("\n")
    print(json.dumps(checks, indent=2))

    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression

    cv = CountVectorizer(token_pattern=r"[^ ]+")
    X = cv.fit_transform(lines)
    clf = LogisticRegression(max_iter=2000).fit(X[:800], text_labels[:800])
    print("text: bag-of-words logreg holdout acc %.3f" % clf.score(X[800:], text_labels[800:]))


if __name__ == "__main__":
    main()
