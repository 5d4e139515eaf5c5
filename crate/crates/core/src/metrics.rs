//! Evaluation math over predictions and judgments.
//!
//! Everything here is a pure function of its inputs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{Answer, Judgment, Session};

/// Average per-question entropy observed in the human study for the yes/no
/// elicitation policy. A reference value only.
pub const HUMAN_STUDY_MEAN_ENTROPY_BITS: f64 = 0.77;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("no baseline (cutoff 0) predictions")]
    MissingBaseline,
    #[error("need at least one cutoff after the baseline")]
    NoLaterCutoff,
    #[error("item {item} has predictions at cutoff {cutoff} but not at the baseline")]
    ItemMismatch { item: String, cutoff: f64 },
    #[error("no judged items to average over")]
    NoJudgedItems,
    #[error("curve invalid: {0}")]
    InvalidCurve(&'static str),
    #[error("horizon {horizon} before last coordinate {last}")]
    HorizonTooShort { horizon: f64, last: f64 },
    #[error("need both yes and no labels")]
    SingleClass,
    #[error("length mismatch: {0} scores, {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty group")]
    EmptyGroup,
    #[error("groups judged disjoint test sets")]
    DisjointTestSets,
    #[error("need at least two shared methods, found {0}")]
    TooFewMethods(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite value")]
    NonFinite,
    #[error("objective weights must be non-negative and not both zero")]
    InvalidWeights,
    #[error("negative objective term")]
    NegativeTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    alpha: f64,
    beta: f64,
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, MetricsError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(alpha) || !ok(beta) || (alpha == 0.0 && beta == 0.0) {
            return Err(MetricsError::InvalidWeights);
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Minutes,
    Turns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCurve {
    pub axis: Axis,
    /// (coordinate, mean Δp(correct)), starting at (0, 0).
    pub points: Vec<(f64, f64)>,
}

impl DeltaCurve {
    /// Builds a curve, checking it starts at the origin and increases.
    pub fn new(axis: Axis, points: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        let curve = Self { axis, points };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        match self.points.first() {
            Some(&(x, y)) if x == 0.0 && y == 0.0 => {}
            _ => return Err(MetricsError::InvalidCurve("must start at (0, 0)")),
        }
        if self.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(MetricsError::InvalidCurve("non-finite point"));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(MetricsError::InvalidCurve("coordinates must strictly increase"));
        }
        Ok(())
    }

    pub fn last_value(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    /// Value at `x` by linear interpolation, holding the last value flat.
    pub fn value_at(&self, x: f64) -> f64 {
        let pts = &self.points;
        match pts.iter().position(|p| p.0 >= x) {
            None => self.last_value(),
            Some(0) => pts[0].1,
            Some(i) => {
                let (x0, y0) = pts[i - 1];
                let (x1, y1) = pts[i];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

pub fn p_correct(prob_yes: f64, label: Answer) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&prob_yes) {
        return Err(MetricsError::ProbabilityOutOfRange(prob_yes));
    }
    Ok(if label.is_yes() { prob_yes } else { 1.0 - prob_yes })
}

/// One prediction reduced to what the curve needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffPrediction {
    pub item_id: String,
    pub coordinate: f64,
    pub prob_yes: f64,
}

/// Mean change in p(correct) relative to the coordinate-0 baseline at each
/// later coordinate. Items without a judgment are left out of every mean.
pub fn delta_curve(
    axis: Axis,
    predictions: &[CutoffPrediction],
    judgments: &[Judgment],
) -> Result<DeltaCurve, MetricsError> {
    let labels: HashMap<&str, Answer> = judgments.iter().map(|j| (j.item_id.as_str(), j.answer)).collect();
    let mut baseline: BTreeMap<&str, f64> = BTreeMap::new();
    let mut later: BTreeMap<OrderedCoord, Vec<(&str, f64)>> = BTreeMap::new();
    for p in predictions {
        if p.coordinate == 0.0 {
            baseline.insert(&p.item_id, p.prob_yes);
        } else {
            later
                .entry(OrderedCoord(p.coordinate))
                .or_default()
                .push((&p.item_id, p.prob_yes));
        }
    }
    if baseline.is_empty() {
        return Err(MetricsError::MissingBaseline);
    }
    if later.is_empty() {
        return Err(MetricsError::NoLaterCutoff);
    }

    let mut points = vec![(0.0, 0.0)];
    for (coord, preds) in later {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (item, prob) in preds {
            let base = *baseline.get(item).ok_or_else(|| MetricsError::ItemMismatch {
                item: item.to_string(),
                cutoff: coord.0,
            })?;
            let Some(&label) = labels.get(item) else { continue };
            sum += p_correct(prob, label)? - p_correct(base, label)?;
            n += 1;
        }
        if n == 0 {
            return Err(MetricsError::NoJudgedItems);
        }
        points.push((coord.0, sum / n as f64));
    }
    DeltaCurve::new(axis, points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedCoord(f64);

impl Eq for OrderedCoord {}

impl PartialOrd for OrderedCoord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedCoord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Trapezoid area under `curve` on [0, horizon], holding the final value
/// flat out to the horizon.
pub fn auc(curve: &DeltaCurve, horizon: f64) -> Result<f64, MetricsError> {
    curve.validate()?;
    let last = curve.points.last().expect("validated").0;
    if horizon < last {
        return Err(MetricsError::HorizonTooShort { horizon, last });
    }
    let mut area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    area += (horizon - last) * curve.last_value();
    Ok(area)
}

/// Mann–Whitney AUROC; ties count one half.
pub fn auroc(prob_yes: &[f64], labels: &[Answer]) -> Result<f64, MetricsError> {
    if prob_yes.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(prob_yes.len(), labels.len()));
    }
    if prob_yes.iter().any(|p| !p.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut scored: Vec<(f64, bool)> = prob_yes
        .iter()
        .copied()
        .zip(labels.iter().map(|l| l.is_yes()))
        .collect();
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk tie groups in ascending score; each positive beats every negative
    // strictly below it and half of the negatives tied with it.
    let mut wins = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let group = &scored[i..j];
        let pos = group.iter().filter(|s| s.1).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (negatives_below as f64 + neg as f64 / 2.0);
        negatives_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// AUROC at each cutoff minus the baseline AUROC, in the same shape as
/// [`delta_curve`].
pub fn delta_auroc_curve(
    axis: Axis,
    predictions: &[CutoffPrediction],
    judgments: &[Judgment],
) -> Result<DeltaCurve, MetricsError> {
    let labels: HashMap<&str, Answer> = judgments.iter().map(|j| (j.item_id.as_str(), j.answer)).collect();
    let mut by_coord: BTreeMap<OrderedCoord, (Vec<f64>, Vec<Answer>)> = BTreeMap::new();
    for p in predictions {
        if let Some(&label) = labels.get(p.item_id.as_str()) {
            let entry = by_coord.entry(OrderedCoord(p.coordinate)).or_default();
            entry.0.push(p.prob_yes);
            entry.1.push(label);
        }
    }
    let base = match by_coord.get(&OrderedCoord(0.0)) {
        Some((probs, labels)) => auroc(probs, labels)?,
        None => return Err(MetricsError::MissingBaseline),
    };
    if by_coord.len() < 2 {
        return Err(MetricsError::NoLaterCutoff);
    }
    let mut points = vec![(0.0, 0.0)];
    for (coord, (probs, labels)) in by_coord.iter().skip(1) {
        points.push((coord.0, auroc(probs, labels)? - base));
    }
    DeltaCurve::new(axis, points)
}

/// Bernoulli entropy in bits.
pub fn question_entropy(yes_fraction: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    let p = yes_fraction.clamp(0.0, 1.0);
    term(p) + term(1.0 - p)
}

/// Per-item fraction of "yes" judgments in each group, over items both
/// groups judged.
pub fn preference_shift(group_a: &[&Session], group_b: &[&Session]) -> Result<Vec<(String, f64, f64)>, MetricsError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let fractions = |group: &[&Session]| {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for s in group {
            for j in s.judgments() {
                let c = counts.entry(j.item_id.clone()).or_default();
                c.0 += usize::from(j.answer.is_yes());
                c.1 += 1;
            }
        }
        counts
            .into_iter()
            .map(|(id, (yes, n))| (id, yes as f64 / n as f64))
            .collect::<BTreeMap<_, _>>()
    };
    let a = fractions(group_a);
    let b = fractions(group_b);
    let pairs: Vec<_> = a
        .iter()
        .filter_map(|(id, fa)| b.get(id).map(|fb| (id.clone(), *fa, *fb)))
        .collect();
    if pairs.is_empty() {
        return Err(MetricsError::DisjointTestSets);
    }
    Ok(pairs)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFewMethods(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation over methods present in both maps.
pub fn method_correlation(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    let (xs, ys) = shared_values(a, b);
    if xs.len() < 2 {
        return Err(MetricsError::TooFewMethods(xs.len()));
    }
    pearson(&xs, &ys)
}

pub(crate) fn shared_values(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter().filter_map(|(k, x)| b.get(k).map(|y| (*x, *y))).unzip()
}

pub fn weighted_objective(weights: ObjectiveWeights, cost: f64, alignment_error: f64) -> Result<f64, MetricsError> {
    if !(cost >= 0.0 && alignment_error >= 0.0) {
        return Err(MetricsError::NegativeTerm);
    }
    Ok(weights.alpha * cost + weights.beta * alignment_error)
}

/// Effort proxy: words the user typed while specifying.
pub fn specification_cost(session: &Session) -> f64 {
    session
        .transcript()
        .iter()
        .map(|t| t.answer_text.split_whitespace().count())
        .sum::<usize>() as f64
}

/// Mean disagreement between predicted p(yes) and the user's labels,
/// i.e. 1 − mean p(correct).
pub fn alignment_error(pairs: &[(f64, Answer)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoJudgedItems);
    }
    let mut total = 0.0;
    for &(p, label) in pairs {
        total += 1.0 - p_correct(p, label)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Pointwise mean of curves sampled on the union of their coordinates,
/// each held flat past its last point.
pub fn mean_curve(curves: &[DeltaCurve]) -> Result<DeltaCurve, MetricsError> {
    let first = curves.first().ok_or(MetricsError::EmptyGroup)?;
    for c in curves {
        c.validate()?;
        if c.axis != first.axis {
            return Err(MetricsError::InvalidCurve("mixed axes"));
        }
    }
    let mut xs: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let n = curves.len() as f64;
    let points = xs
        .into_iter()
        .map(|x| (x, curves.iter().map(|c| c.value_at(x)).sum::<f64>() / n))
        .collect();
    DeltaCurve::new(first.axis, points)
}
