//! Dual-axis rubric scoring (accuracy and methodology), run aggregation,
//! Δ% arithmetic and radar normalization.

pub mod tables;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use tables::{emit_tables, radar_csv, round_half_up, ModeColumns, TableFormat, TableRow};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("criterion {id}: expected {expected}")]
    TypeMismatch { id: String, expected: &'static str },
    #[error("criterion {0}: no verdict supplied")]
    MissingVerdict(String),
    #[error("invalid criterion {id}: {reason}")]
    InvalidCriterion { id: String, reason: String },
    #[error("methodology weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("invalid methodology stage {id}: {reason}")]
    InvalidStage { id: String, reason: String },
    #[error("rubric has no accuracy criteria")]
    NoCriteria,
    #[error("cannot aggregate an empty group")]
    EmptyGroup,
    #[error("zero baseline in Δ%")]
    ZeroBaseline,
    #[error("cannot parse rubric: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriterionKind {
    ToleranceBand {
        #[serde(rename = "ref")]
        reference: f64,
        full_tol: f64,
        partial_tol: f64,
    },
    ExactMatch {
        #[serde(rename = "ref")]
        reference: String,
        #[serde(default = "yes")]
        case_sensitive: bool,
    },
    MadThreshold {
        refs: Vec<f64>,
        full_mad: f64,
        partial_mad: f64,
    },
    RangeCheck {
        lo: f64,
        hi: f64,
    },
    RelativeErrorBand {
        #[serde(rename = "ref")]
        reference: f64,
        full_rel: f64,
        partial_rel: f64,
    },
    Judged {
        verdict: String,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(flatten)]
    pub kind: CriterionKind,
}

impl Criterion {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |reason: &str| {
            Err(ScoreError::InvalidCriterion {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        match &self.kind {
            CriterionKind::ToleranceBand { full_tol: f, partial_tol: p, .. }
            | CriterionKind::MadThreshold { full_mad: f, partial_mad: p, .. }
            | CriterionKind::RelativeErrorBand { full_rel: f, partial_rel: p, .. } => {
                if !(*f >= 0.0 && f <= p) {
                    return bad("full threshold must be nonnegative and at most the partial threshold");
                }
            }
            CriterionKind::RangeCheck { lo, hi } if lo > hi => return bad("lo exceeds hi"),
            _ => {}
        }
        match &self.kind {
            CriterionKind::MadThreshold { refs, .. } if refs.is_empty() => bad("refs is empty"),
            CriterionKind::RelativeErrorBand { reference, .. } if *reference == 0.0 => {
                bad("relative error needs a nonzero reference")
            }
            _ => Ok(()),
        }
    }
}

/// Absorbs binary representation error at band edges.
fn edge(tol: f64, scale: f64) -> f64 {
    tol + 1e-12 * scale.abs().max(1.0)
}

fn band(deviation: f64, full: f64, partial: f64, scale: f64) -> f64 {
    if deviation <= edge(full, scale) {
        1.0
    } else if deviation <= edge(partial, scale) {
        0.5
    } else {
        0.0
    }
}

fn number(id: &str, v: &Value) -> Result<f64, ScoreError> {
    v.as_f64().ok_or_else(|| ScoreError::TypeMismatch {
        id: id.into(),
        expected: "a number",
    })
}

/// Score of one criterion: 0, 0.5 or 1. A missing observation scores 0.
pub fn score_criterion(
    c: &Criterion,
    observed: Option<&Value>,
    verdicts: &BTreeMap<String, bool>,
) -> Result<f64, ScoreError> {
    c.validate()?;
    if let CriterionKind::Judged { verdict } = &c.kind {
        return verdicts
            .get(verdict)
            .map(|v| if *v { 1.0 } else { 0.0 })
            .ok_or_else(|| ScoreError::MissingVerdict(c.id.clone()));
    }
    let Some(obs) = observed.filter(|v| !v.is_null()) else {
        return Ok(0.0);
    };
    Ok(match &c.kind {
        CriterionKind::ToleranceBand { reference, full_tol, partial_tol } => {
            band((number(&c.id, obs)? - reference).abs(), *full_tol, *partial_tol, *reference)
        }
        CriterionKind::RelativeErrorBand { reference, full_rel, partial_rel } => {
            let rel = (number(&c.id, obs)? - reference).abs() / reference.abs();
            band(rel, *full_rel, *partial_rel, 1.0)
        }
        CriterionKind::RangeCheck { lo, hi } => {
            let x = number(&c.id, obs)?;
            if *lo <= x && x <= *hi {
                1.0
            } else {
                0.0
            }
        }
        CriterionKind::ExactMatch { reference, case_sensitive } => {
            let s = obs.as_str().ok_or_else(|| ScoreError::TypeMismatch {
                id: c.id.clone(),
                expected: "a string",
            })?;
            let hit = if *case_sensitive {
                s == reference
            } else {
                s.to_lowercase() == reference.to_lowercase()
            };
            if hit {
                1.0
            } else {
                0.0
            }
        }
        CriterionKind::MadThreshold { refs, full_mad, partial_mad } => {
            let mismatch = || ScoreError::TypeMismatch {
                id: c.id.clone(),
                expected: "a list of numbers as long as refs",
            };
            let xs = obs.as_array().ok_or_else(mismatch)?;
            if xs.len() != refs.len() {
                return Err(mismatch());
            }
            let mut total = 0.0;
            for (x, r) in xs.iter().zip(refs) {
                total += (x.as_f64().ok_or_else(mismatch)? - r).abs();
            }
            band(total / refs.len() as f64, *full_mad, *partial_mad, 1.0)
        }
        CriterionKind::Judged { .. } => unreachable!("handled above"),
    })
}

/// Mean of the per-criterion scores.
pub fn score_accuracy(
    criteria: &[Criterion],
    observed: &BTreeMap<String, Value>,
    verdicts: &BTreeMap<String, bool>,
) -> Result<f64, ScoreError> {
    if criteria.is_empty() {
        return Err(ScoreError::NoCriteria);
    }
    let mut sum = 0.0;
    for c in criteria {
        if observed.get(&c.id).is_none() && !matches!(c.kind, CriterionKind::Judged { .. }) {
            log::warn!("no observed value for criterion {}; scoring 0", c.id);
        }
        sum += score_criterion(c, observed.get(&c.id), verdicts)?;
    }
    Ok(sum / criteria.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodologyStage {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub weight: f64,
    /// 0 to 10.
    #[serde(default)]
    pub score: f64,
}

/// Weighted average of stage scores on a 0–1 scale.
pub fn score_methodology(stages: &[MethodologyStage]) -> Result<f64, ScoreError> {
    for s in stages {
        if !(s.weight > 0.0 && s.weight <= 1.0) {
            return Err(ScoreError::InvalidStage {
                id: s.id.clone(),
                reason: format!("weight {} outside (0, 1]", s.weight),
            });
        }
        if !(0.0..=10.0).contains(&s.score) {
            return Err(ScoreError::InvalidStage {
                id: s.id.clone(),
                reason: format!("score {} outside [0, 10]", s.score),
            });
        }
    }
    let total: f64 = stages.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ScoreError::WeightSum(total));
    }
    Ok(stages.iter().map(|s| s.weight * s.score / 10.0).sum())
}

pub fn combined(accuracy: f64, methodology: f64) -> f64 {
    (accuracy + methodology) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub accuracy: f64,
    pub methodology: f64,
    pub combined: f64,
}

impl RubricScore {
    pub fn new(accuracy: f64, methodology: f64) -> Self {
        Self {
            accuracy,
            methodology,
            combined: combined(accuracy, methodology),
        }
    }
}

/// A rubric document: accuracy criteria plus weighted methodology stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rubric {
    #[serde(default)]
    pub name: String,
    pub criteria: Vec<Criterion>,
    pub methodology: Vec<MethodologyStage>,
}

/// Observations for one run of one task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    #[serde(default)]
    pub observed: BTreeMap<String, Value>,
    #[serde(default)]
    pub verdicts: BTreeMap<String, bool>,
    /// Stage id to 0–10 score.
    #[serde(default)]
    pub methodology: BTreeMap<String, f64>,
}

impl Rubric {
    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        let r: Rubric = serde_json::from_str(text).map_err(|e| ScoreError::Parse(e.to_string()))?;
        for c in &r.criteria {
            c.validate()?;
        }
        Ok(r)
    }

    pub fn score(&self, results: &RunResults) -> Result<RubricScore, ScoreError> {
        let accuracy = score_accuracy(&self.criteria, &results.observed, &results.verdicts)?;
        let stages: Vec<MethodologyStage> = self
            .methodology
            .iter()
            .map(|s| {
                let score = results.methodology.get(&s.id).copied().unwrap_or_else(|| {
                    log::warn!("no score for methodology stage {}; scoring 0", s.id);
                    0.0
                });
                MethodologyStage { score, ..s.clone() }
            })
            .collect();
        Ok(RubricScore::new(accuracy, score_methodology(&stages)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task_id: String,
    pub run: u32,
    pub time_min: f64,
    pub cost_usd: f64,
    pub iterations: u32,
    pub score: RubricScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyGroup);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Summary { n, mean, std })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model: String,
    pub mode: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub time_min: Summary,
    pub cost_usd: Summary,
    pub iterations: Summary,
    /// Combined score.
    pub score: Summary,
}

pub fn aggregate_group(runs: &[RunMetrics]) -> Result<AggregateRow, ScoreError> {
    let col = |f: fn(&RunMetrics) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateRow {
        time_min: col(|r| r.time_min)?,
        cost_usd: col(|r| r.cost_usd)?,
        iterations: col(|r| f64::from(r.iterations))?,
        score: col(|r| r.score.combined)?,
    })
}

/// Mean and sample standard deviation of every metric, per group.
pub fn aggregate(
    groups: &BTreeMap<GroupKey, Vec<RunMetrics>>,
) -> Result<BTreeMap<GroupKey, AggregateRow>, ScoreError> {
    groups
        .iter()
        .map(|(k, runs)| Ok((k.clone(), aggregate_group(runs)?)))
        .collect()
}

/// `100 · (tr − zs) / zs`; negative means the reuse run was faster or cheaper.
pub fn delta_pct(tr: f64, zs: f64) -> Result<f64, ScoreError> {
    if zs == 0.0 {
        return Err(ScoreError::ZeroBaseline);
    }
    Ok(100.0 * (tr - zs) / zs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarAxis {
    pub name: String,
    /// Time and cost: smaller raw values plot further out.
    pub lower_is_better: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRadar {
    /// One vector per axis, same order as the input.
    pub values: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Rescales each axis independently onto [0.1, 0.9]. A constant axis maps
/// to 0.5 everywhere and produces a warning.
pub fn normalize_radar(axes: &[RadarAxis]) -> NormalizedRadar {
    let mut out = NormalizedRadar {
        values: Vec::new(),
        warnings: Vec::new(),
    };
    for axis in axes {
        let min = axis.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = axis.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if axis.values.is_empty() || max <= min {
            if !axis.values.is_empty() {
                let w = format!("radar axis `{}` is constant; plotting every point at 0.5", axis.name);
                log::warn!("{w}");
                out.warnings.push(w);
            }
            out.values.push(vec![0.5; axis.values.len()]);
            continue;
        }
        out.values.push(
            axis.values
                .iter()
                .map(|v| {
                    let t = if axis.lower_is_better { max - v } else { v - min };
                    0.1 + 0.8 * t / (max - min)
                })
                .collect(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn tol(reference: f64, full: f64, partial: f64) -> Criterion {
        Criterion {
            id: "C1".into(),
            description: String::new(),
            kind: CriterionKind::ToleranceBand {
                reference,
                full_tol: full,
                partial_tol: partial,
            },
        }
    }

    fn none() -> BTreeMap<String, bool> {
        BTreeMap::new()
    }

    #[test]
    fn band_kinds() {
        let c = tol(-76.0, 0.001, 0.010);
        assert_eq!(score_criterion(&c, Some(&json!(-76.0005)), &none()).unwrap(), 1.0);
        assert_eq!(score_criterion(&c, Some(&json!(-76.005)), &none()).unwrap(), 0.5);
        assert_eq!(score_criterion(&c, Some(&json!(-76.02)), &none()).unwrap(), 0.0);
        assert_eq!(score_criterion(&c, None, &none()).unwrap(), 0.0);
        assert!(matches!(
            score_criterion(&c, Some(&json!("x")), &none()),
            Err(ScoreError::TypeMismatch { .. })
        ));

        let rel = Criterion {
            id: "C4".into(),
            description: String::new(),
            kind: CriterionKind::RelativeErrorBand { reference: 0.5, full_rel: 0.2, partial_rel: 0.5 },
        };
        assert_eq!(score_criterion(&rel, Some(&json!(0.55)), &none()).unwrap(), 1.0);
        assert_eq!(score_criterion(&rel, Some(&json!(0.7)), &none()).unwrap(), 0.5);
        assert_eq!(score_criterion(&rel, Some(&json!(1.0)), &none()).unwrap(), 0.0);

        let mad = Criterion {
            id: "C5".into(),
            description: String::new(),
            kind: CriterionKind::MadThreshold { refs: vec![0.1, -0.1], full_mad: 0.02, partial_mad: 0.05 },
        };
        assert_eq!(score_criterion(&mad, Some(&json!([0.11, -0.11])), &none()).unwrap(), 1.0);
        assert_eq!(score_criterion(&mad, Some(&json!([0.14, -0.14])), &none()).unwrap(), 0.5);
        assert!(score_criterion(&mad, Some(&json!([0.1])), &none()).is_err());
    }

    #[test]
    fn exact_range_and_judged() {
        let pg = Criterion {
            id: "C2".into(),
            description: String::new(),
            kind: CriterionKind::ExactMatch { reference: "C2v".into(), case_sensitive: true },
        };
        assert_eq!(score_criterion(&pg, Some(&json!("C2v")), &none()).unwrap(), 1.0);
        assert_eq!(score_criterion(&pg, Some(&json!("c2v")), &none()).unwrap(), 0.0);

        let range = Criterion {
            id: "C1".into(),
            description: String::new(),
            kind: CriterionKind::RangeCheck { lo: 19.0, hi: 25.0 },
        };
        assert_eq!(score_criterion(&range, Some(&json!(19.0)), &none()).unwrap(), 1.0);
        assert_eq!(score_criterion(&range, Some(&json!(25.1)), &none()).unwrap(), 0.0);

        let judged = Criterion {
            id: "C3".into(),
            description: String::new(),
            kind: CriterionKind::Judged { verdict: "plot_ok".into() },
        };
        let mut v = BTreeMap::new();
        assert_eq!(score_criterion(&judged, None, &v), Err(ScoreError::MissingVerdict("C3".into())));
        v.insert("plot_ok".into(), true);
        assert_eq!(score_criterion(&judged, None, &v).unwrap(), 1.0);
    }

    #[test]
    fn invalid_criteria() {
        assert!(tol(0.0, 0.1, 0.01).validate().is_err());
        let r = Criterion {
            id: "x".into(),
            description: String::new(),
            kind: CriterionKind::RangeCheck { lo: 2.0, hi: 1.0 },
        };
        assert!(r.validate().is_err());
    }

    #[test]
    fn accuracy_methodology_combined() {
        let crit: Vec<Criterion> = (0..3).map(|i| Criterion { id: format!("C{i}"), ..tol(0.0, 0.1, 0.2) }).collect();
        let obs: BTreeMap<String, Value> =
            [("C0", json!(0.0)), ("C1", json!(0.15))].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(score_accuracy(&crit, &obs, &none()).unwrap(), 0.5);
        assert_eq!(score_accuracy(&[], &obs, &none()), Err(ScoreError::NoCriteria));

        let stage = |w: f64, s: f64| MethodologyStage { id: "s".into(), description: String::new(), weight: w, score: s };
        let m = score_methodology(&[stage(0.2, 10.0), stage(0.4, 5.0), stage(0.4, 10.0)]).unwrap();
        assert!((m - 0.8).abs() < 1e-12);
        assert!(matches!(score_methodology(&[stage(0.5, 1.0), stage(0.6, 1.0)]), Err(ScoreError::WeightSum(_))));
        assert!((combined(1.0, 0.8) - 0.9).abs() < 1e-12);
        assert_eq!(combined(0.657, 0.657), 0.657);
    }

    #[test]
    fn summaries() {
        let s = summarize(&[88.0, 81.2, 90.7]).unwrap();
        assert!((s.mean - 86.633_333_333).abs() < 1e-6);
        assert_eq!(summarize(&[3.0]).unwrap().std, None);
        assert_eq!(summarize(&[2.0, 2.0]).unwrap().std, Some(0.0));
        assert_eq!(summarize(&[]), Err(ScoreError::EmptyGroup));
        assert!((delta_pct(2.69, 5.56).unwrap() + 51.6187).abs() < 1e-3);
        assert_eq!(delta_pct(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(delta_pct(1.0, 0.0), Err(ScoreError::ZeroBaseline));
    }

    #[test]
    fn radar_endpoints_and_degenerate_axes() {
        let r = normalize_radar(&[
            RadarAxis { name: "score".into(), lower_is_better: false, values: vec![1.0, 3.0, 2.0] },
            RadarAxis { name: "cost".into(), lower_is_better: true, values: vec![1.0, 3.0] },
            RadarAxis { name: "flat".into(), lower_is_better: false, values: vec![4.0, 4.0] },
        ]);
        assert_eq!(r.values[0], vec![0.1, 0.9, 0.5]);
        assert_eq!(r.values[1], vec![0.9, 0.1]);
        assert_eq!(r.values[2], vec![0.5, 0.5]);
        assert_eq!(r.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn band_scores_are_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let c = tol(0.0, 0.1, 0.3);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s_lo = score_criterion(&c, Some(&json!(lo)), &none()).unwrap();
            let s_hi = score_criterion(&c, Some(&json!(hi)), &none()).unwrap();
            prop_assert!(s_hi <= s_lo);
        }

        #[test]
        fn combined_is_bounded_and_symmetric(a in 0.0f64..=1.0, m in 0.0f64..=1.0) {
            let c = combined(a, m);
            prop_assert_eq!(c, combined(m, a));
            prop_assert!(a.min(m) <= c && c <= a.max(m));
        }

        #[test]
        fn radar_is_affine_invariant(vals in prop::collection::vec(-100.0f64..100.0, 2..8), shift in -50.0f64..50.0, lower in any::<bool>()) {
            let spread = vals.iter().copied().fold(f64::MIN, f64::max) - vals.iter().copied().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let a = normalize_radar(&[RadarAxis { name: "a".into(), lower_is_better: lower, values: vals }]);
            let b = normalize_radar(&[RadarAxis { name: "a".into(), lower_is_better: lower, values: shifted }]);
            for (x, y) in a.values[0].iter().zip(&b.values[0]) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
