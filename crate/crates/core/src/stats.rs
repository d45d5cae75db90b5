//! Analysis of simulation test responses.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Domain;
use crate::explain::Method;
use crate::par::{self, Parallelism};
use crate::seed;
use crate::testbench::{score_session, PhaseKind, ResponseRecord, TestKind, TestSession, TestbenchError};

pub const DEFAULT_REPLICATES: usize = 10_000;
/// Fewer rated counterfactual answers than this and the rating regression is skipped.
pub const MIN_RATING_ROWS: usize = 30;
/// Lower bound on a condition's sampling variance, in squared percentage points.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Ridge penalty used when the rating data are separable.
pub const SEPARATION_RIDGE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("response refers to unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Session(#[from] TestbenchError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub kind: TestKind,
    pub domain: Domain,
    pub method: Method,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.kind, self.domain, self.method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub user: String,
    pub condition: Condition,
    pub item: String,
    pub phase: PhaseKind,
    /// Whether the prediction matched the model; absent for rating-only answers.
    pub correct: Option<bool>,
    pub rating: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub rows: Vec<Observation>,
}

impl ResponseTable {
    /// Joins responses with the sessions they answer. Every session's
    /// responses are validated as in [`score_session`].
    pub fn build(sessions: &[TestSession], responses: &[ResponseRecord]) -> Result<Self, StatsError> {
        let by_id: HashMap<&str, &TestSession> = sessions.iter().map(|s| (s.id.as_str(), s)).collect();
        if let Some(r) = responses.iter().find(|r| !by_id.contains_key(r.session_id.as_str())) {
            return Err(StatsError::UnknownSession(r.session_id.clone()));
        }
        for s in sessions {
            score_session(s, responses)?;
        }
        let rows = responses
            .iter()
            .map(|r| {
                let s = by_id[r.session_id.as_str()];
                let item = s.item(&r.item_id).expect("validated item");
                Observation {
                    user: r.user_id.clone(),
                    condition: Condition {
                        kind: s.kind,
                        domain: s.domain,
                        method: s.method,
                    },
                    item: r.item_id.clone(),
                    phase: r.phase,
                    correct: r.predicted_class.map(|p| p == item.truth()),
                    rating: r.rating,
                }
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.rows.iter().map(|r| r.condition).collect();
        c.sort();
        c.dedup();
        c
    }

    fn answers(&self, condition: Condition, phase: PhaseKind) -> impl Iterator<Item = (&str, &str, bool)> {
        self.rows.iter().filter_map(move |r| match r.correct {
            Some(c) if r.condition == condition && r.phase == phase => Some((r.user.as_str(), r.item.as_str(), c)),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeEstimate {
    /// Post minus Pre accuracy in percentage points, over (user, item) pairs
    /// answered in both phases.
    pub change: f64,
    pub pre: f64,
    pub post: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub users: usize,
    pub items: usize,
    pub pairs: usize,
    /// Replicates with at least one pair; the others are skipped.
    pub replicates_used: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn multiplicities<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut m = vec![0.0; n];
    for _ in 0..n {
        m[rng.gen_range(0..n)] += 1.0;
    }
    m
}

/// Change in accuracy with a two-way block bootstrap: each replicate
/// resamples users and items independently with replacement and weights
/// every pair by the product of its user's and item's multiplicities. The
/// 95% interval is the percentile interval; the two-sided p-value is twice
/// the smaller tail fraction at zero, clipped to [1/B, 1].
pub fn block_bootstrap_change(
    table: &ResponseTable,
    condition: Condition,
    replicates: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<ChangeEstimate, StatsError> {
    if replicates == 0 {
        return Err(StatsError::InsufficientData("zero bootstrap replicates".into()));
    }
    let pre: HashMap<(&str, &str), bool> = table.answers(condition, PhaseKind::Pre).map(|(u, i, c)| ((u, i), c)).collect();
    let mut users: BTreeMap<&str, usize> = BTreeMap::new();
    let mut items: BTreeMap<&str, usize> = BTreeMap::new();
    let mut raw: Vec<(&str, &str, bool, bool)> = Vec::new();
    for (u, i, post) in table.answers(condition, PhaseKind::Post) {
        if let Some(&before) = pre.get(&(u, i)) {
            raw.push((u, i, before, post));
            users.insert(u, 0);
            items.insert(i, 0);
        }
    }
    if users.len() < 2 || items.len() < 2 {
        return Err(StatsError::InsufficientData(format!(
            "{condition}: {} users and {} items answered in both phases; at least 2 of each needed",
            users.len(),
            items.len()
        )));
    }
    for (k, v) in users.values_mut().enumerate() {
        *v = k;
    }
    for (k, v) in items.values_mut().enumerate() {
        *v = k;
    }
    let pairs: Vec<(usize, usize, f64)> = raw
        .iter()
        .map(|&(u, i, a, b)| (users[u], items[i], f64::from(u8::from(b)) - f64::from(u8::from(a))))
        .collect();
    let n = pairs.len() as f64;
    let pre_acc = 100.0 * raw.iter().filter(|r| r.2).count() as f64 / n;
    let post_acc = 100.0 * raw.iter().filter(|r| r.3).count() as f64 / n;
    let change = 100.0 * pairs.iter().map(|p| p.2).sum::<f64>() / n;

    let (nu, ni) = (users.len(), items.len());
    let reps = par::map_indexed(mode, replicates, |b| {
        let mut rng = seed::stream(seed, b as u64);
        let mu = multiplicities(nu, &mut rng);
        let mi = multiplicities(ni, &mut rng);
        let (mut num, mut den) = (0.0, 0.0);
        for &(u, i, d) in &pairs {
            let w = mu[u] * mi[i];
            num += w * d;
            den += w;
        }
        (den > 0.0).then(|| 100.0 * num / den)
    });
    let mut valid: Vec<f64> = reps.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(StatsError::InsufficientData(format!("{condition}: every bootstrap replicate was empty")));
    }
    valid.sort_by(f64::total_cmp);
    let v = valid.len() as f64;
    let le = valid.iter().filter(|&&c| c <= 0.0).count() as f64 / v;
    let ge = valid.iter().filter(|&&c| c >= 0.0).count() as f64 / v;
    let p_value = (2.0 * le.min(ge)).clamp(1.0 / replicates as f64, 1.0);
    Ok(ChangeEstimate {
        change,
        pre: pre_acc,
        post: post_acc,
        ci_low: quantile(&valid, 0.025),
        ci_high: quantile(&valid, 0.975),
        p_value,
        users: nu,
        items: ni,
        pairs: pairs.len(),
        replicates_used: valid.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrunkenMean {
    pub condition: Condition,
    pub users: usize,
    /// Mean over users of each user's Pre accuracy, in percent.
    pub raw: f64,
    pub shrunk: f64,
    /// Sampling variance of `raw`.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub means: Vec<ShrunkenMean>,
    /// Between-condition variance τ².
    pub tau2: f64,
    /// Random-effects weighted mean the conditions shrink toward.
    pub grand_mean: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (m, v)
}

/// DerSimonian–Laird random-effects shrinkage of per-condition Pre accuracy.
/// Each condition's estimate is the mean of its users' Pre accuracies with
/// variance s²/n (pooled within-condition s² for single-user conditions);
/// shrunken means are B·μ + (1 − B)·raw with B = v/(v + τ²).
pub fn random_effects_pre(table: &ResponseTable) -> Result<RandomEffects, StatsError> {
    let mut per_user: BTreeMap<Condition, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    for r in &table.rows {
        if let (PhaseKind::Pre, Some(c)) = (r.phase, r.correct) {
            let e = per_user.entry(r.condition).or_default().entry(r.user.as_str()).or_default();
            e.0 += f64::from(u8::from(c));
            e.1 += 1.0;
        }
    }
    if per_user.len() < 2 {
        return Err(StatsError::InsufficientData(format!(
            "Pre-phase predictions in {} condition(s); at least 2 needed",
            per_user.len()
        )));
    }
    let groups: Vec<(Condition, Vec<f64>)> = per_user
        .into_iter()
        .map(|(c, users)| (c, users.values().map(|(k, n)| 100.0 * k / n).collect()))
        .collect();
    let stats: Vec<(f64, f64)> = groups.iter().map(|(_, xs)| mean_var(xs)).collect();
    let (num, den) = groups.iter().zip(&stats).fold((0.0, 0.0), |(a, b), ((_, xs), (_, v))| {
        if xs.len() > 1 {
            (a + (xs.len() - 1) as f64 * v, b + (xs.len() - 1) as f64)
        } else {
            (a, b)
        }
    });
    let pooled = if den > 0.0 { num / den } else { 0.0 };
    let y: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let v: Vec<f64> = groups
        .iter()
        .zip(&stats)
        .map(|((_, xs), (_, s2))| {
            let s2 = if xs.len() > 1 { *s2 } else { pooled };
            (s2 / xs.len() as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let k = y.len();
    let w: Vec<f64> = v.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let fixed = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let q: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - fixed).powi(2)).sum();
    let c = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
    let tau2 = if c > 0.0 { ((q - (k - 1) as f64) / c).max(0.0) } else { 0.0 };
    let ws: Vec<f64> = v.iter().map(|v| 1.0 / (v + tau2)).collect();
    let grand_mean = ws.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / ws.iter().sum::<f64>();
    let means = groups
        .iter()
        .enumerate()
        .map(|(g, (cond, xs))| {
            let b = v[g] / (v[g] + tau2);
            ShrunkenMean {
                condition: *cond,
                users: xs.len(),
                raw: y[g],
                shrunk: b * grand_mean + (1.0 - b) * y[g],
                variance: v[g],
            }
        })
        .collect();
    Ok(RandomEffects { means, tau2, grand_mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingScale {
    /// Effect of a rating of 5 versus 4.
    Raw,
    /// Ratings z-scored within each user; effect of +1 standard deviation.
    UserNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    /// The outcomes were (quasi-)separable so a small ridge penalty was added.
    pub separation: bool,
}

impl LogisticFit {
    fn prob(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(self.intercept + self.slope * x)).exp())
    }
}

/// Maximum-likelihood logistic regression of `y` on one predictor by
/// Newton's method. Separable data get a ridge penalty so the fit is finite.
pub fn fit_logistic(x: &[f64], y: &[bool]) -> LogisticFit {
    let n = x.len() as f64;
    let p_bar = y.iter().filter(|&&v| v).count() as f64 / n;
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 && p_bar > 0.0 && p_bar < 1.0 {
        return LogisticFit {
            intercept: (p_bar / (1.0 - p_bar)).ln(),
            slope: 0.0,
            separation: false,
        };
    }
    let range = |want: bool| {
        x.iter()
            .zip(y)
            .filter(|(_, &v)| v == want)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (&v, _)| (a.min(v), b.max(v)))
    };
    let (min1, max1) = range(true);
    let (min0, max0) = range(false);
    let separation = p_bar == 0.0 || p_bar == 1.0 || max0 <= min1 || max1 <= min0;
    let lambda = if separation { SEPARATION_RIDGE } else { 0.0 };
    let objective = |a: f64, b: f64| {
        let ll: f64 = x
            .iter()
            .zip(y)
            .map(|(&xi, &yi)| {
                let eta = a + b * xi;
                let log1p = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                if yi {
                    eta - log1p
                } else {
                    -log1p
                }
            })
            .sum();
        ll - 0.5 * lambda * (a * a + b * b)
    };
    let (mut a, mut b) = (0.0, 0.0);
    let mut current = objective(a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (-lambda * a, -lambda * b, lambda, 0.0, lambda);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(a + b * xi)).exp());
            let r = f64::from(u8::from(yi)) - p;
            let w = p * (1.0 - p);
            ga += r;
            gb += r * xi;
            haa += w;
            hab += w * xi;
            hbb += w * xi * xi;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let next = objective(a + t * da, b + t * db);
            if next >= current - 1e-12 {
                a += t * da;
                b += t * db;
                current = next;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || (t * da).abs().max((t * db).abs()) < 1e-10 {
            break;
        }
    }
    LogisticFit {
        intercept: a,
        slope: b,
        separation,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEffect {
    pub scale: RatingScale,
    pub fit: LogisticFit,
    /// Change in predicted counterfactual accuracy, in percentage points.
    pub effect: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rows: usize,
    pub users: usize,
}

fn effect_of(fit: &LogisticFit, scale: RatingScale) -> f64 {
    let (from, to) = match scale {
        RatingScale::Raw => (4.0, 5.0),
        RatingScale::UserNormalized => (0.0, 1.0),
    };
    100.0 * (fit.prob(to) - fit.prob(from))
}

/// Logistic regression of counterfactual Post correctness on the rating
/// given alongside it, with a bootstrap-over-users interval.
pub fn rating_regression(
    table: &ResponseTable,
    scale: RatingScale,
    replicates: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<RatingEffect, StatsError> {
    let mut by_user: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for r in &table.rows {
        if let (TestKind::Counterfactual, PhaseKind::Post, Some(c), Some(rating)) =
            (r.condition.kind, r.phase, r.correct, r.rating)
        {
            by_user.entry(r.user.as_str()).or_default().push((f64::from(rating), c));
        }
    }
    let rows: usize = by_user.values().map(Vec::len).sum();
    if rows < MIN_RATING_ROWS {
        return Err(StatsError::InsufficientData(format!(
            "{rows} rated counterfactual answers; at least {MIN_RATING_ROWS} needed"
        )));
    }
    if replicates == 0 {
        return Err(StatsError::InsufficientData("zero bootstrap replicates".into()));
    }
    let groups: Vec<Vec<(f64, bool)>> = by_user
        .into_values()
        .map(|mut g| {
            if scale == RatingScale::UserNormalized {
                let xs: Vec<f64> = g.iter().map(|r| r.0).collect();
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                for r in &mut g {
                    r.0 = if sd > 0.0 { (r.0 - m) / sd } else { 0.0 };
                }
            }
            g
        })
        .collect();
    let fit_groups = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for g in idx {
            for &(r, c) in &groups[g] {
                x.push(r);
                y.push(c);
            }
        }
        fit_logistic(&x, &y)
    };
    let fit = fit_groups(&mut (0..groups.len()));
    let n = groups.len();
    let mut effects = par::map_indexed(mode, replicates, |b| {
        let mut rng = seed::stream(seed, b as u64);
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        effect_of(&fit_groups(&mut picks.into_iter()), scale)
    });
    effects.sort_by(f64::total_cmp);
    Ok(RatingEffect {
        scale,
        effect: effect_of(&fit, scale),
        fit,
        ci_low: quantile(&effects, 0.025),
        ci_high: quantile(&effects, 0.975),
        rows,
        users: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub replicates: usize,
    pub seed: u64,
    pub mode: Parallelism,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            mode: Parallelism::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub users: usize,
    pub responses: usize,
    pub pre_raw: Option<f64>,
    pub pre_shrunk: Option<f64>,
    pub change: Option<ChangeEstimate>,
    /// Why `change` is missing.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub conditions: Vec<ConditionReport>,
    pub tau2: Option<f64>,
    pub grand_mean: Option<f64>,
    pub rating_raw: Option<RatingEffect>,
    pub rating_normalized: Option<RatingEffect>,
    pub notes: Vec<String>,
    pub replicates: usize,
    pub seed: u64,
}

/// Every analysis the data support; the rest are listed in `notes`.
pub fn analyze(table: &ResponseTable, config: &AnalysisConfig) -> AnalysisReport {
    let mut notes = Vec::new();
    let re = random_effects_pre(table).map_err(|e| notes.push(e.to_string())).ok();
    let conditions = table
        .conditions()
        .into_iter()
        .map(|c| {
            let rows: Vec<&Observation> = table.rows.iter().filter(|r| r.condition == c).collect();
            let mut users: Vec<&str> = rows.iter().map(|r| r.user.as_str()).collect();
            users.sort_unstable();
            users.dedup();
            let shrunk = re.as_ref().and_then(|re| re.means.iter().find(|m| m.condition == c));
            let s = seed::derive(config.seed, &format!("bootstrap-{c}"));
            let (change, note) = match block_bootstrap_change(table, c, config.replicates, s, config.mode) {
                Ok(e) => (Some(e), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ConditionReport {
                condition: c,
                users: users.len(),
                responses: rows.len(),
                pre_raw: shrunk.map(|m| m.raw),
                pre_shrunk: shrunk.map(|m| m.shrunk),
                change,
                note,
            }
        })
        .collect();
    let mut rating = |scale, label: &str| {
        let s = seed::derive(config.seed, label);
        rating_regression(table, scale, config.replicates, s, config.mode)
            .map_err(|e| notes.push(format!("rating regression ({label}): {e}")))
            .ok()
    };
    let rating_raw = rating(RatingScale::Raw, "rating-raw");
    let rating_normalized = rating(RatingScale::UserNormalized, "rating-normalized");
    notes.dedup();
    AnalysisReport {
        conditions,
        tau2: re.as_ref().map(|r| r.tau2),
        grand_mean: re.as_ref().map(|r| r.grand_mean),
        rating_raw,
        rating_normalized,
        notes,
        replicates: config.replicates,
        seed: config.seed,
    }
}

fn opt(v: Option<f64>, width: usize) -> String {
    v.map_or_else(|| format!("{:>width$}", "-"), |v| format!("{v:>width$.1}"))
}

impl AnalysisReport {
    /// Text tables, one per test type.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for kind in [TestKind::Forward, TestKind::Counterfactual] {
            let rows: Vec<&ConditionReport> = self.conditions.iter().filter(|c| c.condition.kind == kind).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{kind} simulation");
            let _ = writeln!(
                out,
                "{:<8} {:<18} {:>5} {:>6} {:>6} {:>7} {:>16} {:>7}",
                "domain", "method", "users", "pre", "shrunk", "change", "95% CI", "p"
            );
            for r in rows {
                let (change, ci, p) = match &r.change {
                    Some(e) => (
                        format!("{:>7.1}", e.change),
                        format!("[{:.1}, {:.1}]", e.ci_low, e.ci_high),
                        format!("{:.4}", e.p_value),
                    ),
                    None => (format!("{:>7}", "-"), "-".into(), "-".into()),
                };
                let _ = writeln!(
                    out,
                    "{:<8} {:<18} {:>5} {} {} {} {:>16} {:>7}",
                    r.condition.domain.to_string(),
                    r.condition.method.as_str(),
                    r.users,
                    opt(r.pre_raw, 6),
                    opt(r.pre_shrunk, 6),
                    change,
                    ci,
                    p
                );
            }
            let _ = writeln!(out);
        }
        for e in [&self.rating_raw, &self.rating_normalized].into_iter().flatten() {
            let label = match e.scale {
                RatingScale::Raw => "rating 4 -> 5",
                RatingScale::UserNormalized => "rating +1 sd (per user)",
            };
            let _ = writeln!(
                out,
                "{label}: {:+.1} points [{:.1}, {:.1}] over {} answers from {} users{}",
                e.effect,
                e.ci_low,
                e.ci_high,
                e.rows,
                e.users,
                if e.fit.separation { " (separable data, ridge fit)" } else { "" }
            );
        }
        if let Some(t) = self.tau2 {
            let _ = writeln!(out, "between-condition variance of pre accuracy: {t:.2}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "{} bootstrap replicates, seed {}", self.replicates, self.seed);
        out
    }
}
